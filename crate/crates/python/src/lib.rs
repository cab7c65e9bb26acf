//! Python bindings: networks, the mask transform, synthetic data, training,
//! evaluation and analysis.
//!
//! Configs cross the boundary as plain dicts with the same keys as the JSON
//! run config; images are flat row-major lists of `C*H*W` floats.

use std::path::PathBuf;

use mcan::analysis;
use mcan::dataset::{self, DatasetSpec, Sample};
use mcan::robustness;
use mcan::transform;
use mcan::trainer::{self, TrainConfig};
use mcan::{checkpoint, MultiAttrNet, NetConfig, Tensor, TransformParams};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn err(e: mcan::Error) -> PyErr {
    match e {
        mcan::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn from_dict<T: DeserializeOwned + Default>(py: Python<'_>, dict: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(d) = dict else {
        return Ok(T::default());
    };
    let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn params(n: f64, beta: f64) -> PyResult<TransformParams> {
    TransformParams::new(n, beta).map_err(err)
}

/// Mask transformation `g(m; n, beta)` applied to one value.
#[pyfunction]
#[pyo3(signature = (m, n=1.0, beta=0.0))]
fn g(m: f64, n: f64, beta: f64) -> PyResult<f64> {
    transform::g(m, params(n, beta)?).map_err(err)
}

/// `count` evenly spaced `(m, g(m))` pairs over `[0, 1]`.
#[pyfunction]
#[pyo3(signature = (n=1.0, beta=0.0, count=101))]
fn curve(n: f64, beta: f64, count: usize) -> PyResult<Vec<(f64, f64)>> {
    transform::curve_samples(params(n, beta)?, count).map_err(err)
}

/// Labelled images, optionally with per-attribute support bitmaps.
#[pyclass(name = "Dataset", module = "mcan_py")]
struct PyDataset {
    names: Vec<String>,
    samples: Vec<Sample>,
}

#[pymethods]
impl PyDataset {
    /// Builds a dataset from flat images of shape `[channels, size, size]`.
    #[new]
    #[pyo3(signature = (images, labels, attribute_names, channels=1))]
    fn new(images: Vec<Vec<f64>>, labels: Vec<Vec<u8>>, attribute_names: Vec<String>, channels: usize) -> PyResult<Self> {
        if images.len() != labels.len() {
            return Err(PyValueError::new_err("images and labels differ in length"));
        }
        let samples = images
            .into_iter()
            .zip(labels)
            .map(|(img, y)| {
                if y.len() != attribute_names.len() {
                    return Err(PyValueError::new_err("label row length differs from attribute count"));
                }
                let side = ((img.len() / channels.max(1)) as f64).sqrt() as usize;
                if channels == 0 || side * side * channels != img.len() {
                    return Err(PyValueError::new_err(format!("image of {} values is not square", img.len())));
                }
                let t = Tensor::new(vec![channels, side, side], img).map_err(err)?;
                Sample::from_raw(t, y).map_err(err)
            })
            .collect::<PyResult<_>>()?;
        Ok(Self {
            names: attribute_names,
            samples,
        })
    }

    /// Loads a directory written by `gen-data` (or `export`).
    #[staticmethod]
    #[pyo3(signature = (path, image_size=32, channels=1))]
    fn load(path: PathBuf, image_size: usize, channels: usize) -> PyResult<Self> {
        let d = dataset::load_dataset_dir(&path, image_size, channels).map_err(err)?;
        Ok(Self {
            names: d.attribute_names,
            samples: d.samples,
        })
    }

    #[getter]
    fn attribute_names(&self) -> Vec<String> {
        self.names.clone()
    }

    #[getter]
    fn labels(&self) -> Vec<Vec<u8>> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }

    fn image(&self, index: usize) -> PyResult<Vec<f64>> {
        self.samples
            .get(index)
            .map(|s| s.image.data().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))
    }

    fn has_supports(&self) -> bool {
        self.samples.iter().all(|s| s.supports.is_some())
    }

    /// Seeded `(train, held_out)` split.
    #[pyo3(signature = (train_fraction=0.8, seed=0))]
    fn split(&self, train_fraction: f64, seed: u64) -> PyResult<(Self, Self)> {
        let (a, b) = dataset::split(&self.samples, train_fraction, seed).map_err(err)?;
        let wrap = |samples| Self {
            names: self.names.clone(),
            samples,
        };
        Ok((wrap(a), wrap(b)))
    }

    /// Copy with additive Gaussian noise, clamped to `[0, 1]`.
    fn corrupt(&self, sigma: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            names: self.names.clone(),
            samples: dataset::corrupt_samples(&self.samples, sigma, seed).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.samples.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(samples={}, attributes={:?})", self.samples.len(), self.names)
    }
}

/// Synthetic shapes dataset with exact supports.
#[pyfunction]
#[pyo3(signature = (num_samples=2500, image_size=32, seed=0, attribute_names=None))]
fn synthetic(num_samples: usize, image_size: usize, seed: u64, attribute_names: Option<Vec<String>>) -> PyResult<PyDataset> {
    let mut spec = DatasetSpec {
        num_samples,
        image_size,
        seed,
        ..DatasetSpec::default()
    };
    if let Some(names) = attribute_names {
        spec.attribute_names = names;
    }
    let d = dataset::synthetic_dataset(&spec).map_err(err)?;
    Ok(PyDataset {
        names: d.attribute_names,
        samples: d.samples,
    })
}

/// Multi-attribute network with one attention mask generator per attribute.
#[pyclass(name = "Net", module = "mcan_py")]
struct PyNet {
    net: MultiAttrNet,
    train_config: TrainConfig,
}

impl PyNet {
    fn batch(&self, images: Vec<Vec<f64>>) -> PyResult<Tensor> {
        let c = self.net.config();
        let per = c.image_channels * c.image_size * c.image_size;
        let n = images.len();
        let mut flat = Vec::with_capacity(n * per);
        for img in images {
            if img.len() != per {
                return Err(PyValueError::new_err(format!("expected {per} values per image, got {}", img.len())));
            }
            flat.extend(img);
        }
        Tensor::new(vec![n, c.image_channels, c.image_size, c.image_size], flat).map_err(err)
    }
}

#[pymethods]
impl PyNet {
    /// Glorot-initialised network; `config` takes the JSON config keys.
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(py: Python<'_>, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg: NetConfig = from_dict(py, config)?;
        Ok(Self {
            net: MultiAttrNet::init_params(cfg).map_err(err)?,
            train_config: TrainConfig::default(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (net, train_config) = checkpoint::load(&path).map_err(err)?;
        Ok(Self { net, train_config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.net, &self.train_config, &path).map_err(err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, self.net.config())
    }

    #[getter]
    fn num_attributes(&self) -> usize {
        self.net.num_attributes()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.net.num_scalars()
    }

    /// Attribute probabilities, one row of `K` per image.
    #[pyo3(signature = (images, n=1.0, beta=0.0))]
    fn predict(&self, images: Vec<Vec<f64>>, n: f64, beta: f64) -> PyResult<Vec<Vec<f64>>> {
        let k = self.net.num_attributes();
        let probs = self.net.predict(&self.batch(images)?, params(n, beta)?).map_err(err)?;
        Ok(probs.data().chunks(k).map(<[f64]>::to_vec).collect())
    }

    /// Attention masks of one image: `K` flat `[C, H', W']` lists.
    fn masks(&self, image: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let set = self.net.masks(&self.batch(vec![image])?).map_err(err)?;
        Ok(set.masks.into_iter().map(Tensor::into_data).collect())
    }

    /// Trains in place and returns the per-epoch trace as a list of dicts.
    #[pyo3(signature = (train, held_out=None, config=None))]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        train: &PyDataset,
        held_out: Option<&PyDataset>,
        config: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<Vec<Bound<'py, PyAny>>> {
        let cfg: TrainConfig = from_dict(py, config)?;
        let held: &[Sample] = held_out.map_or(&[], |h| &h.samples);
        let (net, trace) = trainer::train(self.net.clone(), &train.samples, held, &cfg).map_err(err)?;
        self.net = net;
        self.train_config = cfg;
        trace
            .epochs
            .iter()
            .map(|e| {
                let d = PyDict::new(py);
                d.set_item("epoch", e.epoch)?;
                d.set_item("l_b", e.loss.l_b)?;
                d.set_item("l_m", e.loss.l_m)?;
                d.set_item("l_r", e.loss.l_r)?;
                d.set_item("l_mask_l1", e.loss.l_mask_l1)?;
                d.set_item("total", e.loss.total)?;
                d.set_item("held_out_accuracy", e.held_out_accuracy)?;
                Ok(d.into_any())
            })
            .collect()
    }

    /// Per-attribute accuracy at a 0.5 threshold under `g(.; n, beta)`.
    #[pyo3(signature = (data, n=1.0, beta=0.0, threshold=0.5))]
    fn evaluate(&self, data: &PyDataset, n: f64, beta: f64, threshold: f64) -> PyResult<Vec<f64>> {
        robustness::evaluate(&self.net, &data.samples, params(n, beta)?, threshold).map_err(err)
    }

    /// Mean activation per mask channel for attribute `k`.
    fn channel_importance(&self, data: &PyDataset, k: usize) -> PyResult<Vec<f64>> {
        Ok(analysis::channel_importance(&self.net, &data.samples, k).map_err(err)?.scores)
    }

    /// Correlation matrix between attributes' importance vectors.
    fn attribute_correlation(&self, data: &PyDataset) -> PyResult<Vec<Vec<f64>>> {
        Ok(analysis::attribute_correlation(&self.net, &data.samples, &data.names)
            .map_err(err)?
            .matrix)
    }

    /// Share of attribute `k`'s mask mass that falls inside its support.
    fn localization(&self, data: &PyDataset, k: usize) -> PyResult<f64> {
        analysis::localization_score(&self.net, &data.samples, k).map_err(err)
    }

    fn __repr__(&self) -> String {
        let c = self.net.config();
        format!(
            "Net(image_size={}, feature_channels={}, num_attributes={})",
            c.image_size, c.feature_channels, c.num_attributes
        )
    }
}

#[pymodule]
fn mcan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNet>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(g, m)?)?;
    m.add_function(wrap_pyfunction!(curve, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic, m)?)?;
    Ok(())
}
