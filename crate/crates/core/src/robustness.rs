//! Accuracy evaluation and the noise-level versus mask-transform sweep.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{corrupt_samples, make_batch, Sample};
use crate::error::{Error, Result};
use crate::network::MultiAttrNet;
use crate::transform::TransformParams;

/// Attribute label used for the unweighted mean rows.
pub const MEAN_LABEL: &str = "__mean__";

const EVAL_BATCH: usize = 100;

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::validation(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    Ok(())
}

fn tally(correct: &mut [usize], probs: &[f64], batch: &[&Sample], threshold: f64, k: usize, stride: usize, offset: usize) {
    for (i, s) in batch.iter().enumerate() {
        let predicted = (probs[i * stride + offset] >= threshold) as u8;
        if predicted == s.labels[k] {
            correct[k] += 1;
        }
    }
}

/// Per-attribute accuracy: predict 1 iff the probability is at least `threshold`.
pub fn evaluate(net: &MultiAttrNet, samples: &[Sample], transform: TransformParams, threshold: f64) -> Result<Vec<f64>> {
    check_threshold(threshold)?;
    if samples.is_empty() {
        return Err(Error::validation("cannot evaluate on zero samples"));
    }
    let k_attr = net.num_attributes();
    let mut correct = vec![0usize; k_attr];
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = make_batch(&refs)?;
        if batch.labels.shape()[1] != k_attr {
            return Err(Error::shape(format!(
                "samples carry {} labels, network has {k_attr} attributes",
                batch.labels.shape()[1]
            )));
        }
        let probs = net.predict(&batch.images, transform)?;
        for k in 0..k_attr {
            tally(&mut correct, probs.data(), &refs, threshold, k, k_attr, k);
        }
    }
    Ok(correct.iter().map(|&c| c as f64 / samples.len() as f64).collect())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub sigmas: Vec<f64>,
    pub ns: Vec<f64>,
    pub betas: Vec<f64>,
    /// Evaluate on the first `eval_samples` samples; `None` uses all.
    pub eval_samples: Option<usize>,
    pub noise_seed: u64,
    pub threshold: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            sigmas: (0..=10).map(|i| i as f64 / 20.0).collect(),
            ns: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            betas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            eval_samples: None,
            noise_seed: 0,
            threshold: 0.5,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sigmas.is_empty() || self.ns.is_empty() || self.betas.is_empty() {
            return Err(Error::validation("sweep grids must be nonempty"));
        }
        if self.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::validation("sigmas must be finite and non-negative"));
        }
        if self.sigmas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("sigmas must be strictly ascending"));
        }
        for &n in &self.ns {
            for &beta in &self.betas {
                TransformParams::new(n, beta)?;
            }
        }
        if !self.ns.contains(&1.0) || !self.betas.contains(&0.0) {
            return Err(Error::validation("the baseline cell n = 1, beta = 0 must be part of the grid"));
        }
        if self.eval_samples == Some(0) {
            return Err(Error::validation("eval_samples must be at least 1"));
        }
        check_threshold(self.threshold)
    }

    pub fn cells(&self) -> Vec<TransformParams> {
        self.ns
            .iter()
            .flat_map(|&n| self.betas.iter().map(move |&beta| TransformParams { n, beta }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub sigma: f64,
    pub n: f64,
    pub beta: f64,
    /// Attribute name, or [`MEAN_LABEL`].
    pub attribute: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub records: Vec<SweepRecord>,
}

impl SweepResult {
    pub fn mean_records(&self) -> impl Iterator<Item = &SweepRecord> {
        self.records.iter().filter(|r| r.attribute == MEAN_LABEL)
    }

    /// Mean accuracy of cell `(n, beta)` at each sigma, in sweep order.
    pub fn mean_curve(&self, params: TransformParams) -> Vec<(f64, f64)> {
        self.mean_records()
            .filter(|r| r.n == params.n && r.beta == params.beta)
            .map(|r| (r.sigma, r.accuracy))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sigma,n,beta,attribute,accuracy\n");
        for r in &self.records {
            writeln!(out, "{},{},{},{},{}", r.sigma, r.n, r.beta, r.attribute, r.accuracy).expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }
}

/// Seed for the corrupted copy at sigma index `index`.
pub fn noise_seed_for(noise_seed: u64, index: usize) -> u64 {
    noise_seed ^ index as u64
}

/// Corrupts the evaluation set once per sigma and scores every `(n, beta)`
/// cell on that same corrupted copy. Features and masks are computed once
/// per batch; only the heads run per cell.
pub fn run_sweep(net: &MultiAttrNet, clean: &[Sample], names: &[String], spec: &SweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    if clean.is_empty() {
        return Err(Error::validation("cannot sweep over zero samples"));
    }
    let k_attr = net.num_attributes();
    if names.len() != k_attr {
        return Err(Error::shape(format!("{} attribute names for {k_attr} attributes", names.len())));
    }
    let eval = &clean[..spec.eval_samples.unwrap_or(clean.len()).min(clean.len())];
    let cells = spec.cells();
    let mut records = Vec::with_capacity(spec.sigmas.len() * cells.len() * (k_attr + 1));
    for (si, &sigma) in spec.sigmas.iter().enumerate() {
        let noisy = corrupt_samples(eval, sigma, noise_seed_for(spec.noise_seed, si))?;
        let mut correct = vec![vec![0usize; k_attr]; cells.len()];
        for chunk in noisy.chunks(EVAL_BATCH) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let batch = make_batch(&refs)?;
            let feat = net.extract_features(&batch.images)?;
            for k in 0..k_attr {
                let mask = net.generate_mask(k, &feat)?;
                for (ci, &cell) in cells.iter().enumerate() {
                    let probs = net.attribute_from_mask(k, &feat, &mask, cell)?;
                    tally(&mut correct[ci], probs.data(), &refs, spec.threshold, k, 1, 0);
                }
            }
        }
        for (ci, cell) in cells.iter().enumerate() {
            let acc: Vec<f64> = correct[ci].iter().map(|&c| c as f64 / eval.len() as f64).collect();
            for (name, &a) in names.iter().zip(&acc) {
                records.push(SweepRecord {
                    sigma,
                    n: cell.n,
                    beta: cell.beta,
                    attribute: name.clone(),
                    accuracy: a,
                });
            }
            records.push(SweepRecord {
                sigma,
                n: cell.n,
                beta: cell.beta,
                attribute: MEAN_LABEL.to_string(),
                accuracy: mean(&acc),
            });
        }
    }
    Ok(SweepResult { records })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub sigma: f64,
    pub best_n: f64,
    pub best_beta: f64,
    pub best_acc: f64,
    pub baseline_acc: f64,
    pub delta: f64,
}

/// Per sigma, the best grid cell by mean accuracy against the `(1, 0)`
/// baseline. Ties go to the baseline, then smaller `n`, then smaller `beta`.
pub fn baseline_delta(result: &SweepResult) -> Result<Vec<DeltaRow>> {
    let mut sigmas: Vec<f64> = Vec::new();
    for r in result.mean_records() {
        if !sigmas.contains(&r.sigma) {
            sigmas.push(r.sigma);
        }
    }
    sigmas
        .into_iter()
        .map(|sigma| {
            let rows: Vec<&SweepRecord> = result.mean_records().filter(|r| r.sigma == sigma).collect();
            let is_base = |r: &SweepRecord| TransformParams { n: r.n, beta: r.beta }.is_identity();
            let baseline = rows
                .iter()
                .find(|r| is_base(r))
                .ok_or_else(|| Error::validation(format!("baseline cell missing at sigma {sigma}")))?;
            let best = rows
                .iter()
                .copied()
                .min_by(|a, b| {
                    b.accuracy
                        .total_cmp(&a.accuracy)
                        .then_with(|| is_base(b).cmp(&is_base(a)))
                        .then_with(|| a.n.total_cmp(&b.n))
                        .then_with(|| a.beta.total_cmp(&b.beta))
                })
                .expect("baseline row exists");
            Ok(DeltaRow {
                sigma,
                best_n: best.n,
                best_beta: best.beta,
                best_acc: best.accuracy,
                baseline_acc: baseline.accuracy,
                delta: best.accuracy - baseline.accuracy,
            })
        })
        .collect()
}

pub fn delta_csv(rows: &[DeltaRow]) -> String {
    let mut out = String::from("sigma,best_n,best_beta,best_acc,baseline_acc,delta\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.sigma, r.best_n, r.best_beta, r.best_acc, r.baseline_acc, r.delta
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::network::NetConfig;

    fn tiny_net() -> MultiAttrNet {
        MultiAttrNet::init_params(NetConfig {
            image_size: 8,
            feature_channels: 4,
            num_attributes: 2,
            head_hidden: 2,
            seed: 3,
            ..NetConfig::desk()
        })
        .unwrap()
    }

    fn samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let data = (0..64).map(|p| ((p * 7 + i * 13) % 17) as f64 / 16.0).collect();
                Sample::from_raw(Tensor::new(vec![1, 8, 8], data).unwrap(), vec![(i % 2) as u8, 1]).unwrap()
            })
            .collect()
    }

    fn names() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    #[test]
    fn saturated_head_with_constant_labels_is_perfect() {
        let mut net = tiny_net();
        let idx = net.param_index("binhead1.dense.bias").unwrap();
        net.params_mut()[idx].value = Tensor::from_slice(&[50.0]);
        let acc = evaluate(&net, &samples(5), TransformParams::IDENTITY, 0.5).unwrap();
        assert_eq!(acc[1], 1.0);
    }

    #[test]
    fn flipping_labels_complements_accuracy() {
        let net = tiny_net();
        let s = samples(7);
        let flipped: Vec<Sample> = s
            .iter()
            .map(|x| Sample {
                labels: x.labels.iter().map(|y| 1 - y).collect(),
                ..x.clone()
            })
            .collect();
        let a = evaluate(&net, &s, TransformParams::IDENTITY, 0.5).unwrap();
        let b = evaluate(&net, &flipped, TransformParams::IDENTITY, 0.5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x + y - 1.0).abs() < 1e-12);
        }
        assert!(evaluate(&net, &s, TransformParams::IDENTITY, 1.0).is_err());
        assert!(evaluate(&net, &[], TransformParams::IDENTITY, 0.5).is_err());
    }

    #[test]
    fn sweep_counts_identity_cell_and_determinism() {
        let net = tiny_net();
        let s = samples(6);
        let spec = SweepSpec {
            sigmas: vec![0.0, 0.2],
            ns: vec![1.0, 2.0],
            betas: vec![0.0, 0.5],
            ..SweepSpec::default()
        };
        let res = run_sweep(&net, &s, &names(), &spec).unwrap();
        assert_eq!(res.records.len(), 2 * 2 * 2 * 3);
        let clean = evaluate(&net, &s, TransformParams::IDENTITY, 0.5).unwrap();
        let base: Vec<f64> = res
            .records
            .iter()
            .filter(|r| r.sigma == 0.0 && r.n == 1.0 && r.beta == 0.0 && r.attribute != MEAN_LABEL)
            .map(|r| r.accuracy)
            .collect();
        assert_eq!(base, clean);
        assert_eq!(res.to_csv(), run_sweep(&net, &s, &names(), &spec).unwrap().to_csv());
        assert!(res.to_csv().starts_with("sigma,n,beta,attribute,accuracy\n"));
    }

    #[test]
    fn spec_validation() {
        assert!(SweepSpec::default().validate().is_ok());
        assert_eq!(SweepSpec::default().sigmas.len(), 11);
        assert_eq!(SweepSpec::default().cells().len(), 25);
        let no_base = SweepSpec {
            ns: vec![2.0],
            ..SweepSpec::default()
        };
        assert!(no_base.validate().is_err());
        let descending = SweepSpec {
            sigmas: vec![0.2, 0.1],
            ..SweepSpec::default()
        };
        assert!(descending.validate().is_err());
    }

    fn rec(sigma: f64, n: f64, beta: f64, acc: f64) -> SweepRecord {
        SweepRecord {
            sigma,
            n,
            beta,
            attribute: MEAN_LABEL.into(),
            accuracy: acc,
        }
    }

    #[test]
    fn singleton_grid_has_zero_delta() {
        let res = SweepResult {
            records: vec![rec(0.0, 1.0, 0.0, 0.9), rec(0.1, 1.0, 0.0, 0.8)],
        };
        let rows = baseline_delta(&res).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.delta == 0.0 && r.best_n == 1.0 && r.best_beta == 0.0));
    }

    #[test]
    fn injected_winner_and_ties() {
        let res = SweepResult {
            records: vec![
                rec(0.3, 1.0, 0.0, 0.70),
                rec(0.3, 2.0, 1.0, 0.73),
                rec(0.3, 3.0, 0.5, 0.72),
                rec(0.5, 0.0, 0.0, 0.60),
                rec(0.5, 1.0, 0.0, 0.60),
                rec(0.5, 2.0, 0.25, 0.61),
                rec(0.5, 2.0, 0.0, 0.61),
            ],
        };
        let rows = baseline_delta(&res).unwrap();
        assert_eq!((rows[0].best_n, rows[0].best_beta), (2.0, 1.0));
        assert!((rows[0].delta - 0.03).abs() < 1e-12);
        assert_eq!((rows[1].best_n, rows[1].best_beta), (2.0, 0.0));

        let tie = SweepResult {
            records: vec![rec(0.0, 0.0, 0.0, 0.5), rec(0.0, 1.0, 0.0, 0.5)],
        };
        let r = baseline_delta(&tie).unwrap()[0];
        assert_eq!((r.best_n, r.best_beta, r.delta), (1.0, 0.0, 0.0));
        let missing = SweepResult {
            records: vec![rec(0.0, 2.0, 0.0, 0.5)],
        };
        assert!(baseline_delta(&missing).is_err());
    }
}
