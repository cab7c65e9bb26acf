//! Samples, the synthetic shape dataset, CelebA-style ingestion and noise.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::objective::Batch;
use crate::pnm::PnmImage;

/// Row-major `H x W` membership mask.
pub type Bitmap = Vec<bool>;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[Cimg, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// One 0/1 entry per attribute.
    pub labels: Vec<u8>,
    /// Pixels rendering each attribute (synthetic data only).
    pub supports: Option<Vec<Bitmap>>,
}

impl Sample {
    /// Wraps an already decoded image; values are clamped to `[0, 1]`.
    pub fn from_raw(image: Tensor, labels: Vec<u8>) -> Result<Self> {
        if image.ndim() != 3 {
            return Err(Error::shape(format!("sample image must be [C,H,W], got {:?}", image.shape())));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::validation("labels must be 0 or 1"));
        }
        Ok(Self {
            image: image.map(|v| v.clamp(0.0, 1.0)),
            labels,
            supports: None,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Samples plus the attribute names they are labelled with.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub attribute_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn has_supports(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.supports.is_some())
    }
}

/// The synthetic attributes, in default order.
pub const SYNTHETIC_ATTRIBUTES: [&str; 6] = ["circle", "square", "cross", "bright_top", "dark_left", "large_object"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub num_samples: usize,
    pub image_size: usize,
    pub attribute_names: Vec<String>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_samples: 2500,
            image_size: 32,
            attribute_names: SYNTHETIC_ATTRIBUTES.iter().map(|s| s.to_string()).collect(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::validation("num_samples must be at least 1"));
        }
        if self.attribute_names.len() < 2 {
            return Err(Error::validation("at least two attributes are required"));
        }
        if self.image_size < 16 || self.image_size % 2 != 0 {
            return Err(Error::validation("synthetic images must be even-sized and at least 16 pixels"));
        }
        for name in &self.attribute_names {
            if !SYNTHETIC_ATTRIBUTES.contains(&name.as_str()) {
                return Err(Error::validation(format!(
                    "unknown synthetic attribute {name:?}; choose from {SYNTHETIC_ATTRIBUTES:?}"
                )));
            }
        }
        let mut sorted = self.attribute_names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.attribute_names.len() {
            return Err(Error::validation("attribute names must be unique"));
        }
        Ok(())
    }
}

const SHAPE_LEVEL: f64 = 0.9;
const PRIMARY_LEVEL: f64 = 0.05;
const BRIGHT_BOOST: f64 = 0.3;
const DARK_DROP: f64 = 0.2;

/// Everything random about one synthetic image, drawn up front so that
/// switching an attribute off leaves every other pixel untouched.
#[derive(Debug, Clone)]
struct SceneDraw {
    background: f64,
    present: [bool; 6],
    // circle, square, cross and primary diamond, one per quadrant (TL, TR, BL, BR)
    centres: [(f64, f64); 4],
    circle_radius: f64,
    square_half: f64,
    cross_arm: f64,
    cross_half_width: f64,
    primary_small: f64,
    primary_large: f64,
}

impl SceneDraw {
    fn sample(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let q = size as f64 / 2.0;
        let background = rng.random_range(0.3..=0.5);
        let mut present = [false; 6];
        for p in &mut present {
            *p = rng.random_bool(0.5);
        }
        let jitter = q / 8.0;
        let mut centres = [(0.0, 0.0); 4];
        for (slot, c) in centres.iter_mut().enumerate() {
            let (qy, qx) = ((slot / 2) as f64, (slot % 2) as f64);
            *c = (
                q * (qy + 0.5) + rng.random_range(-jitter..=jitter),
                q * (qx + 0.5) + rng.random_range(-jitter..=jitter),
            );
        }
        Self {
            background,
            present,
            centres,
            circle_radius: rng.random_range(0.2 * q..=0.3 * q),
            square_half: rng.random_range(0.15 * q..=0.25 * q),
            cross_arm: rng.random_range(0.25 * q..=0.35 * q),
            cross_half_width: 0.1 * q,
            primary_small: rng.random_range(0.12 * q..=0.18 * q),
            primary_large: rng.random_range(0.35 * q..=0.42 * q),
        }
    }
}

/// Threshold on the primary diamond radius separating small from large.
pub fn large_object_threshold(image_size: usize) -> f64 {
    0.3 * image_size as f64 / 2.0
}

fn render(draw: &SceneDraw, size: usize, enabled: [bool; 6]) -> (Vec<f64>, [Bitmap; 6]) {
    let n = size * size;
    let mut img = vec![draw.background; n];
    let mut supports: [Bitmap; 6] = std::array::from_fn(|_| vec![false; n]);
    let on = |a: usize| draw.present[a] && enabled[a];
    let centre = |p: usize, y: usize, x: usize| {
        let (cy, cx) = draw.centres[p];
        (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx)
    };
    let paint = |img: &mut Vec<f64>, support: &mut Bitmap, idx: usize, v: f64| {
        if img[idx] != v {
            support[idx] = true;
        }
        img[idx] = v;
    };
    for y in 0..size {
        for x in 0..size {
            let idx = y * size + x;
            if on(0) {
                let (dy, dx) = centre(0, y, x);
                if dy * dy + dx * dx <= draw.circle_radius * draw.circle_radius {
                    paint(&mut img, &mut supports[0], idx, SHAPE_LEVEL);
                }
            }
            if on(1) {
                let (dy, dx) = centre(1, y, x);
                if dy.abs() <= draw.square_half && dx.abs() <= draw.square_half {
                    paint(&mut img, &mut supports[1], idx, SHAPE_LEVEL);
                }
            }
            if on(2) {
                let (dy, dx) = centre(2, y, x);
                let (arm, hw) = (draw.cross_arm, draw.cross_half_width);
                if (dy.abs() <= hw && dx.abs() <= arm) || (dx.abs() <= hw && dy.abs() <= arm) {
                    paint(&mut img, &mut supports[2], idx, SHAPE_LEVEL);
                }
            }
            let (dy, dx) = centre(3, y, x);
            let l1 = dy.abs() + dx.abs();
            if l1 <= draw.primary_small {
                img[idx] = PRIMARY_LEVEL;
            } else if on(5) && l1 <= draw.primary_large {
                paint(&mut img, &mut supports[5], idx, PRIMARY_LEVEL);
            }
        }
    }
    let half = size / 2;
    if on(3) {
        for idx in 0..half * size {
            let v = (img[idx] + BRIGHT_BOOST).min(1.0);
            paint(&mut img, &mut supports[3], idx, v);
        }
    }
    if on(4) {
        for y in 0..size {
            for x in 0..half {
                let idx = y * size + x;
                let v = (img[idx] - DARK_DROP).max(0.0);
                paint(&mut img, &mut supports[4], idx, v);
            }
        }
    }
    (img, supports)
}

fn synthetic_sample(spec: &DatasetSpec, draw: &SceneDraw, enabled: [bool; 6]) -> Sample {
    let size = spec.image_size;
    let (img, mut supports) = render(draw, size, enabled);
    let mut labels = Vec::with_capacity(spec.attribute_names.len());
    let mut chosen = Vec::with_capacity(spec.attribute_names.len());
    for name in &spec.attribute_names {
        let a = SYNTHETIC_ATTRIBUTES.iter().position(|n| n == name).expect("validated");
        let support = std::mem::take(&mut supports[a]);
        labels.push(support.iter().any(|&b| b) as u8);
        chosen.push(support);
    }
    Sample {
        image: Tensor::new(vec![1, size, size], img).expect("size matches"),
        labels,
        supports: Some(chosen),
    }
}

fn enabled_mask(spec: &DatasetSpec) -> [bool; 6] {
    let mut enabled = [false; 6];
    for name in &spec.attribute_names {
        if let Some(a) = SYNTHETIC_ATTRIBUTES.iter().position(|n| n == name) {
            enabled[a] = true;
        }
    }
    enabled
}

/// Deterministic synthetic shapes dataset; every attribute is present with
/// probability 0.5 independently.
pub fn generate_synthetic(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let enabled = enabled_mask(spec);
    Ok((0..spec.num_samples)
        .map(|_| synthetic_sample(spec, &SceneDraw::sample(&mut rng, spec.image_size), enabled))
        .collect())
}

/// Regenerates sample `index` with `attribute` forced off; all other draws are kept.
pub fn synthetic_counterfactual(spec: &DatasetSpec, index: usize, attribute: &str) -> Result<Sample> {
    spec.validate()?;
    if index >= spec.num_samples {
        return Err(Error::Index(format!("sample {index} out of range")));
    }
    let a = SYNTHETIC_ATTRIBUTES
        .iter()
        .position(|n| *n == attribute)
        .ok_or_else(|| Error::validation(format!("unknown attribute {attribute:?}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = SceneDraw::sample(&mut rng, spec.image_size);
    for _ in 0..index {
        draw = SceneDraw::sample(&mut rng, spec.image_size);
    }
    let mut enabled = enabled_mask(spec);
    enabled[a] = false;
    Ok(synthetic_sample(spec, &draw, enabled))
}

pub fn synthetic_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    Ok(Dataset {
        attribute_names: spec.attribute_names.clone(),
        samples: generate_synthetic(spec)?,
    })
}

/// `len` i.i.d. draws from `N(0, sigma^2)`.
pub fn gaussian_noise(len: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::validation(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::validation(e.to_string()))?;
    Ok((0..len).map(|_| normal.sample(rng)).collect())
}

/// `clamp(image + N(0, sigma^2), 0, 1)`, seeded.
pub fn add_gaussian_noise(image: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    noisy_copy(image, sigma, &mut rng)
}

fn noisy_copy(image: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let noise = gaussian_noise(image.numel(), sigma, rng)?;
    let data = image.data().iter().zip(noise).map(|(&v, n)| (v + n).clamp(0.0, 1.0)).collect();
    Tensor::new(image.shape().to_vec(), data)
}

/// Corrupts every sample from one seeded stream, in order. Labels and
/// supports are carried over unchanged.
pub fn corrupt_samples(samples: &[Sample], sigma: f64, seed: u64) -> Result<Vec<Sample>> {
    if !(sigma >= 0.0) {
        return Err(Error::validation(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .iter()
        .map(|s| {
            Ok(Sample {
                image: noisy_copy(&s.image, sigma, &mut rng)?,
                labels: s.labels.clone(),
                supports: s.supports.clone(),
            })
        })
        .collect()
}

/// Seeded shuffle, then the first `round(n * train_fraction)` samples train.
pub fn split(samples: &[Sample], train_fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::validation(format!("train_fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (samples.len() as f64 * train_fraction).round() as usize;
    let train = order[..cut].iter().map(|&i| samples[i].clone()).collect();
    let test = order[cut..].iter().map(|&i| samples[i].clone()).collect();
    Ok((train, test))
}

/// Stacks samples into a training batch.
pub fn make_batch(samples: &[&Sample]) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::validation("cannot batch zero samples"))?;
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let k = first.labels.len();
    if samples.iter().any(|s| s.labels.len() != k) {
        return Err(Error::shape("samples disagree on attribute count"));
    }
    let labels = samples.iter().flat_map(|s| s.labels.iter().map(|&y| y as f64)).collect();
    Batch::new(Tensor::stack(&images)?, Tensor::new(vec![samples.len(), k], labels)?)
}

/// Bilinear resize of a `[C, H, W]` image with half-pixel centres and
/// edge clamping: output pixel `o` samples input coordinate
/// `(o + 0.5) * in / out - 0.5`.
pub fn resize_bilinear(image: &Tensor, size: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(format!("resize expects [C,H,W], got {:?}", image.shape())));
    };
    if h == size && w == size {
        return Ok(image.clone());
    }
    let coord = |o: usize, input: usize| {
        let src = ((o as f64 + 0.5) * input as f64 / size as f64 - 0.5).clamp(0.0, (input - 1) as f64);
        let lo = src.floor() as usize;
        (lo, (lo + 1).min(input - 1), src - lo as f64)
    };
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..size {
            let (y0, y1, fy) = coord(oy, h);
            for ox in 0..size {
                let (x0, x1, fx) = coord(ox, w);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![c, size, size], out)
}

fn convert_channels(image: Tensor, channels: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else { unreachable!("decoded images are [C,H,W]") };
    let hw = h * w;
    match (c, channels) {
        (a, b) if a == b => Ok(image),
        (3, 1) => {
            let d = image.data();
            let luma = (0..hw).map(|i| 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i]).collect();
            Tensor::new(vec![1, h, w], luma)
        }
        (1, n) => Tensor::new(vec![n, h, w], image.data().repeat(n)),
        (a, b) => Err(Error::shape(format!("cannot convert {a}-channel image to {b} channels"))),
    }
}

fn format_err(file: &Path, line: Option<usize>, message: impl Into<String>) -> Error {
    Error::Format {
        file: file.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parsed attribute list: names and `(filename, labels)` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeFile {
    pub names: Vec<String>,
    pub rows: Vec<(String, Vec<u8>)>,
}

/// Reads a CelebA attribute list: a sample count, a line of attribute
/// names, then one `filename ±1 ...` row per sample.
pub fn read_attribute_file(path: &Path) -> Result<AttributeFile> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, count_line) = lines
        .next()
        .ok_or_else(|| Error::validation(format!("attribute file {} is empty", path.display())))?;
    let count: usize = count_line
        .trim()
        .parse()
        .map_err(|_| format_err(path, Some(1), "first line must be the sample count"))?;
    let (names_idx, names_line) = lines
        .next()
        .ok_or_else(|| format_err(path, Some(2), "missing attribute-name line"))?;
    let names: Vec<String> = names_line.split_whitespace().map(str::to_string).collect();
    if names.is_empty() {
        return Err(format_err(path, Some(names_idx + 1), "no attribute names"));
    }
    let mut rows = Vec::with_capacity(count);
    for (idx, line) in lines {
        let lineno = idx + 1;
        if rows.len() == count {
            return Err(format_err(path, Some(lineno), format!("header declares {count} samples but more rows follow")));
        }
        let mut fields = line.split_whitespace();
        let file = fields.next().expect("line is non-empty").to_string();
        let labels = fields
            .map(|f| match f {
                "1" | "+1" => Ok(1u8),
                "-1" => Ok(0u8),
                other => Err(format_err(path, Some(lineno), format!("label {other:?} is not ±1"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        if labels.len() != names.len() {
            return Err(format_err(
                path,
                Some(lineno),
                format!("row has {} labels but the header names {} attributes", labels.len(), names.len()),
            ));
        }
        rows.push((file, labels));
    }
    if rows.len() != count {
        return Err(format_err(path, None, format!("header declares {count} samples but {} rows follow", rows.len())));
    }
    Ok(AttributeFile { names, rows })
}

pub fn write_attribute_file(path: &Path, names: &[String], rows: &[(String, Vec<u8>)]) -> Result<()> {
    let mut text = format!("{}\n{}\n", rows.len(), names.join(" "));
    for (file, labels) in rows {
        text.push_str(file);
        for &y in labels {
            text.push_str(if y == 1 { " 1" } else { " -1" });
        }
        text.push('\n');
    }
    Ok(fs::write(path, text)?)
}

/// Loads a CelebA-layout dataset of PGM/PPM images, converting each image to
/// `channels` channels and resizing it to `resize_to` square.
pub fn load_celeba_format(attr_file: &Path, image_dir: &Path, resize_to: usize, channels: usize) -> Result<Dataset> {
    let parsed = read_attribute_file(attr_file)?;
    let samples = parsed
        .rows
        .into_iter()
        .map(|(file, labels)| {
            let img = PnmImage::read(&image_dir.join(&file))?.to_tensor();
            let img = resize_bilinear(&convert_channels(img, channels)?, resize_to)?;
            Sample::from_raw(img, labels)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        attribute_names: parsed.names,
        samples,
    })
}

pub const ATTRIBUTE_FILE: &str = "attributes.txt";
pub const SUPPORTS_FILE: &str = "supports.json";

/// Sidecar describing a synthetic export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSidecar {
    pub seed: u64,
    pub image_size: usize,
    pub attribute_names: Vec<String>,
    /// Per file, per attribute run lengths alternating absent/present, starting absent.
    pub supports: BTreeMap<String, Vec<Vec<usize>>>,
}

pub fn encode_rle(bits: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &b in bits {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn decode_rle(runs: &[usize]) -> Bitmap {
    runs.iter()
        .enumerate()
        .flat_map(|(i, &n)| std::iter::repeat_n(i % 2 == 1, n))
        .collect()
}

pub fn sample_file_name(index: usize) -> String {
    format!("img{index:05}.pgm")
}

/// Writes PGM images, the attribute file and the support sidecar into `dir`.
pub fn export_synthetic(dataset: &Dataset, seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(dataset.samples.len());
    let mut supports = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let name = sample_file_name(i);
        PnmImage::from_tensor(&s.image)?.write(&dir.join(&name))?;
        if let Some(sup) = &s.supports {
            supports.insert(name.clone(), sup.iter().map(|b| encode_rle(b)).collect());
        }
        rows.push((name, s.labels.clone()));
    }
    write_attribute_file(&dir.join(ATTRIBUTE_FILE), &dataset.attribute_names, &rows)?;
    let sidecar = SupportSidecar {
        seed,
        image_size: dataset.samples.first().map_or(0, Sample::image_size),
        attribute_names: dataset.attribute_names.clone(),
        supports,
    };
    fs::write(dir.join(SUPPORTS_FILE), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Loads an exported dataset directory. Supports are attached when the
/// sidecar exists and no resize was needed.
pub fn load_dataset_dir(dir: &Path, resize_to: usize, channels: usize) -> Result<Dataset> {
    let attr: PathBuf = dir.join(ATTRIBUTE_FILE);
    let mut dataset = load_celeba_format(&attr, dir, resize_to, channels)?;
    let sidecar_path = dir.join(SUPPORTS_FILE);
    if !sidecar_path.exists() {
        return Ok(dataset);
    }
    let sidecar: SupportSidecar = serde_json::from_str(&fs::read_to_string(&sidecar_path)?)?;
    if sidecar.image_size != resize_to {
        return Ok(dataset);
    }
    let parsed = read_attribute_file(&attr)?;
    for ((file, _), sample) in parsed.rows.iter().zip(&mut dataset.samples) {
        sample.supports = sidecar
            .supports
            .get(file)
            .map(|runs| runs.iter().map(|r| decode_rle(r)).collect());
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, seed: u64) -> DatasetSpec {
        DatasetSpec {
            num_samples: n,
            seed,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(generate_synthetic(&spec(20, 7)).unwrap(), generate_synthetic(&spec(20, 7)).unwrap());
        assert_ne!(generate_synthetic(&spec(20, 7)).unwrap(), generate_synthetic(&spec(20, 8)).unwrap());
    }

    #[test]
    fn labels_follow_supports_and_values_in_range() {
        for s in generate_synthetic(&spec(200, 3)).unwrap() {
            let sup = s.supports.as_ref().unwrap();
            for (y, b) in s.labels.iter().zip(sup) {
                assert_eq!(*y == 1, b.iter().any(|&v| v));
            }
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(s.image.shape(), &[1, 32, 32]);
        }
    }

    #[test]
    fn label_marginals_are_balanced() {
        let samples = generate_synthetic(&spec(2000, 11)).unwrap();
        for k in 0..6 {
            let rate = samples.iter().filter(|s| s.labels[k] == 1).count() as f64 / 2000.0;
            assert!((0.4..=0.6).contains(&rate), "attribute {k} rate {rate}");
        }
    }

    #[test]
    fn counterfactual_differs_only_inside_support() {
        let sp = spec(30, 5);
        let samples = generate_synthetic(&sp).unwrap();
        for (i, s) in samples.iter().enumerate() {
            for (k, name) in sp.attribute_names.iter().enumerate() {
                let cf = synthetic_counterfactual(&sp, i, name).unwrap();
                assert_eq!(cf.labels[k], 0);
                let support = &s.supports.as_ref().unwrap()[k];
                for (p, (a, b)) in s.image.data().iter().zip(cf.image.data()).enumerate() {
                    if a != b {
                        assert!(support[p], "sample {i} {name} pixel {p} changed outside support");
                    }
                }
                if s.labels[k] == 1 {
                    assert_ne!(s.image, cf.image);
                }
            }
        }
    }

    #[test]
    fn subset_of_attributes() {
        let sp = DatasetSpec {
            attribute_names: vec!["cross".into(), "circle".into()],
            ..spec(10, 1)
        };
        let samples = generate_synthetic(&sp).unwrap();
        assert!(samples.iter().all(|s| s.labels.len() == 2));
        let bad = DatasetSpec {
            attribute_names: vec!["circle".into()],
            ..spec(10, 1)
        };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn zero_noise_is_exact_and_noise_is_clamped() {
        let img = generate_synthetic(&spec(1, 2)).unwrap().remove(0).image;
        assert_eq!(add_gaussian_noise(&img, 0.0, 9).unwrap(), img);
        let noisy = add_gaussian_noise(&img, 0.5, 9).unwrap();
        assert_eq!(noisy.shape(), img.shape());
        assert!(noisy.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(noisy, add_gaussian_noise(&img, 0.5, 9).unwrap());
        assert!(matches!(add_gaussian_noise(&img, -0.1, 9), Err(Error::Validation(_))));
    }

    #[test]
    fn noise_has_requested_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = gaussian_noise(100_000, 0.3, &mut rng).unwrap();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((var.sqrt() - 0.3).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn corruption_keeps_labels() {
        let samples = generate_synthetic(&spec(4, 2)).unwrap();
        let noisy = corrupt_samples(&samples, 0.2, 1).unwrap();
        for (a, b) in samples.iter().zip(&noisy) {
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.image.shape(), b.image.shape());
        }
    }

    #[test]
    fn split_sizes_partition_and_determinism() {
        let samples = generate_synthetic(&spec(10, 4)).unwrap();
        let (train, test) = split(&samples, 0.8, 3).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        for s in &samples {
            let count = train.iter().chain(&test).filter(|t| *t == s).count();
            assert!(count >= 1);
        }
        assert_eq!(split(&samples, 0.8, 3).unwrap(), (train, test));
        assert!(split(&samples, 1.0, 3).is_err());
    }

    #[test]
    fn rle_roundtrip() {
        let bits = vec![true, true, false, true, false, false];
        assert_eq!(encode_rle(&bits), vec![0, 2, 1, 1, 2]);
        assert_eq!(decode_rle(&encode_rle(&bits)), bits);
        assert!(decode_rle(&encode_rle(&[])).is_empty());
    }

    #[test]
    fn resize_preserves_constants_and_identity() {
        let c = Tensor::full(&[1, 5, 7], 0.25);
        let r = resize_bilinear(&c, 3).unwrap();
        assert_eq!(r.shape(), &[1, 3, 3]);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let ramp = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(resize_bilinear(&ramp, 2).unwrap(), ramp);
        // 2x upsampling of a 1x2 ramp row: centres at -0.25, 0.25, 0.75, 1.25
        let row = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let up = resize_bilinear(&row, 4).unwrap();
        assert_eq!(&up.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn gray(dir: &Path, name: &str) {
        PnmImage::from_tensor(&Tensor::full(&[1, 4, 4], 0.5)).unwrap().write(&dir.join(name)).unwrap();
    }

    #[test]
    fn attribute_rows_map_signs() {
        let dir = tempfile::tempdir().unwrap();
        gray(dir.path(), "img1.pgm");
        let attr = write(dir.path(), "list.txt", "1\na b c\nimg1.pgm 1 -1 1\n");
        let ds = load_celeba_format(&attr, dir.path(), 8, 1).unwrap();
        assert_eq!(ds.attribute_names, vec!["a", "b", "c"]);
        assert_eq!(ds.samples[0].labels, vec![1, 0, 1]);
        assert_eq!(ds.samples[0].image.shape(), &[1, 8, 8]);
        assert!(ds.samples[0].supports.is_none());
        let rgb = load_celeba_format(&attr, dir.path(), 4, 3).unwrap();
        assert_eq!(rgb.samples[0].image.shape(), &[3, 4, 4]);
    }

    #[test]
    fn attribute_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["a.pgm", "b.pgm", "c.pgm"] {
            gray(dir.path(), f);
        }
        let extra = write(dir.path(), "extra.txt", "2\nx y\na.pgm 1 1\nb.pgm -1 1\nc.pgm 1 -1\n");
        let err = load_celeba_format(&extra, dir.path(), 4, 1).unwrap_err();
        assert!(matches!(err, Error::Format { line: Some(5), .. }), "{err}");

        let empty = write(dir.path(), "empty.txt", "");
        assert!(matches!(load_celeba_format(&empty, dir.path(), 4, 1), Err(Error::Validation(_))));

        let bad = write(dir.path(), "bad.txt", "1\nx y\na.pgm 1 0\n");
        assert!(matches!(load_celeba_format(&bad, dir.path(), 4, 1), Err(Error::Format { line: Some(3), .. })));

        let short = write(dir.path(), "short.txt", "1\nx y z\na.pgm 1 1\n");
        assert!(matches!(load_celeba_format(&short, dir.path(), 4, 1), Err(Error::Format { .. })));

        let missing = write(dir.path(), "missing.txt", "1\nx y\nnope.pgm 1 1\n");
        match load_celeba_format(&missing, dir.path(), 4, 1) {
            Err(Error::MissingImage(p)) => assert!(p.ends_with("nope.pgm")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn export_and_reload_keeps_labels_and_supports() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthetic_dataset(&spec(12, 6)).unwrap();
        export_synthetic(&ds, 6, dir.path()).unwrap();
        let back = load_dataset_dir(dir.path(), 32, 1).unwrap();
        assert_eq!(back.attribute_names, ds.attribute_names);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.supports, b.supports);
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
        }
    }
}
