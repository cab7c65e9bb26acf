//! Mini-batch training over the composite objective.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{make_batch, Sample};
use crate::error::{Error, Result};
use crate::network::{Forward, MultiAttrNet, NetConfig};
use crate::objective::{total_loss, L1Reduction, LossBreakdown, LossWeights, ObjectiveConfig};
use crate::optim::{adam_step, sgd_step, AdamHyper, AdamState};
use crate::robustness::{evaluate, mean};
use crate::transform::TransformParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

/// Which auxiliary heads are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoRecon,
    NoMultilabel,
    NoBoth,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoRecon, Ablation::NoMultilabel, Ablation::NoBoth];

    pub fn uses_reconstructor(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoMultilabel)
    }

    pub fn uses_multilabel(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoRecon)
    }

    /// Sets the network switches to match this variant.
    pub fn apply(self, config: &mut NetConfig) {
        config.enable_reconstructor = self.uses_reconstructor();
        config.enable_multilabel = self.uses_multilabel();
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoRecon => "no_recon",
            Ablation::NoMultilabel => "no_multilabel",
            Ablation::NoBoth => "no_both",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown ablation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss_weights: LossWeights,
    pub l1_reduction: L1Reduction,
    pub ablation: Ablation,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamHyper::default();
        Self {
            epochs: 15,
            batch_size: 32,
            learning_rate: adam.lr,
            optimizer: Optimizer::Adam,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            loss_weights: LossWeights::default(),
            l1_reduction: L1Reduction::default(),
            ablation: Ablation::Full,
            seed: 0,
            grad_clip: None,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::validation("epochs and batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::validation("adam betas must lie in [0, 1) and eps must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::validation(format!("grad_clip must be positive, got {c}")));
            }
        }
        self.loss_weights.validate()
    }

    fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the per-batch loss terms.
    pub loss: LossBreakdown,
    /// Mean attribute accuracy on the held-out set under the identity transform.
    pub held_out_accuracy: Option<f64>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    /// Per-epoch CSV. Wall-clock time is left out so reruns are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_b,l_m,l_r,l_mask_l1,total,held_out_accuracy\n");
        for e in &self.epochs {
            let acc = e.held_out_accuracy.map_or(String::new(), |a| a.to_string());
            let l = &e.loss;
            writeln!(out, "{},{},{},{},{},{},{acc}", e.epoch, l.l_b, l.l_m, l.l_r, l.l_mask_l1, l.total)
                .expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }
}

enum OptimState {
    Sgd,
    Adam { states: Vec<AdamState>, t: u64 },
}

fn global_norm(net: &MultiAttrNet) -> f64 {
    net.params().iter().flat_map(|p| p.grad.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Trains `net` on `train`, scoring `held_out` after every epoch.
pub fn train(net: MultiAttrNet, train: &[Sample], held_out: &[Sample], config: &TrainConfig) -> Result<(MultiAttrNet, TrainTrace)> {
    train_with_progress(net, train, held_out, config, |_| {})
}

/// As [`train`], calling `on_epoch` after each completed epoch.
pub fn train_with_progress(
    mut net: MultiAttrNet,
    train: &[Sample],
    held_out: &[Sample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(MultiAttrNet, TrainTrace)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let cfg = net.config();
    if cfg.enable_reconstructor != config.ablation.uses_reconstructor()
        || cfg.enable_multilabel != config.ablation.uses_multilabel()
    {
        return Err(Error::validation(format!(
            "network switches (reconstructor {}, multi-label {}) do not match ablation {}",
            cfg.enable_reconstructor,
            cfg.enable_multilabel,
            config.ablation.name()
        )));
    }
    let objective = ObjectiveConfig {
        weights: config.loss_weights,
        l1_reduction: config.l1_reduction,
    };
    let mut optim = match config.optimizer {
        Optimizer::Sgd => OptimState::Sgd,
        Optimizer::Adam => OptimState::Adam {
            states: net.params().iter().map(|p| AdamState::zeros(p.value.numel())).collect(),
            t: 0,
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = TrainTrace::default();

    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = make_batch(&refs)?;
            let grads = {
                let mut fwd = Forward::training(&net);
                let (loss, parts) = total_loss(&mut fwd, &batch, &objective)?;
                if let Some(component) = parts.first_non_finite() {
                    return Err(Error::NonFinite { component, epoch, batch: bi });
                }
                let w = batch.len() as f64;
                sums.l_b += parts.l_b * w;
                sums.l_m += parts.l_m * w;
                sums.l_r += parts.l_r * w;
                sums.l_mask_l1 += parts.l_mask_l1 * w;
                sums.total += parts.total * w;
                fwd.backward(loss)?;
                fwd.param_grads()
            };
            net.accumulate_grads(&grads);
            step(&mut net, &mut optim, config)?;
            net.zero_grad();
        }
        let n = train.len() as f64;
        let loss = LossBreakdown {
            l_b: sums.l_b / n,
            l_m: sums.l_m / n,
            l_r: sums.l_r / n,
            l_mask_l1: sums.l_mask_l1 / n,
            total: sums.total / n,
        };
        let held_out_accuracy = if held_out.is_empty() {
            None
        } else {
            Some(mean(&evaluate(&net, held_out, TransformParams::IDENTITY, 0.5)?))
        };
        let record = EpochRecord {
            epoch,
            loss,
            held_out_accuracy,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        trace.epochs.push(record);
    }
    if let Some(path) = &config.checkpoint_path {
        crate::checkpoint::save(&net, config, path)?;
    }
    Ok((net, trace))
}

fn step(net: &mut MultiAttrNet, optim: &mut OptimState, config: &TrainConfig) -> Result<()> {
    if let Some(limit) = config.grad_clip {
        let norm = global_norm(net);
        if norm > limit {
            let scale = limit / norm;
            for p in net.params_mut() {
                p.grad.iter_mut().for_each(|g| *g *= scale);
            }
        }
    }
    match optim {
        OptimState::Sgd => {
            for p in net.params_mut() {
                sgd_step(p.value.data_mut(), &p.grad, config.learning_rate)?;
            }
        }
        OptimState::Adam { states, t } => {
            *t += 1;
            let hp = config.adam();
            for (p, s) in net.params_mut().iter_mut().zip(states.iter_mut()) {
                adam_step(p.value.data_mut(), &p.grad, s, hp, *t)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn tiny(ablation: Ablation) -> NetConfig {
        let mut c = NetConfig {
            image_size: 8,
            feature_channels: 4,
            num_attributes: 2,
            head_hidden: 2,
            seed: 1,
            ..NetConfig::desk()
        };
        ablation.apply(&mut c);
        c
    }

    fn data(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let bright = i % 2 == 0;
                let data = (0..64).map(|p| if bright { 0.8 } else { 0.2 } + (p % 5) as f64 * 0.01).collect();
                Sample::from_raw(Tensor::new(vec![1, 8, 8], data).unwrap(), vec![bright as u8, (i % 3 == 0) as u8])
                    .unwrap()
            })
            .collect()
    }

    fn cfg(epochs: usize, ablation: Ablation) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            ablation,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn tiny_learning_rate_leaves_params_nearly_unchanged() {
        let net = MultiAttrNet::init_params(tiny(Ablation::Full)).unwrap();
        let before = net.clone();
        let config = TrainConfig {
            learning_rate: 1e-300,
            optimizer: Optimizer::Sgd,
            ..cfg(1, Ablation::Full)
        };
        let (after, trace) = train(net, &data(8), &[], &config).unwrap();
        assert_eq!(trace.epochs.len(), 1);
        for (a, b) in before.params().iter().zip(after.params()) {
            assert!(a.value.max_abs_diff(&b.value) < 1e-200, "{}", a.name);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let run = || {
            let net = MultiAttrNet::init_params(tiny(Ablation::Full)).unwrap();
            train(net, &data(10), &data(4), &cfg(2, Ablation::Full)).unwrap()
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(ta.to_csv(), tb.to_csv());
        assert_eq!(ta.epochs.len(), 2);
        assert!(ta.epochs.iter().all(|e| e.held_out_accuracy.is_some()));
    }

    #[test]
    fn ablations_zero_their_terms() {
        for ablation in Ablation::ALL {
            let net = MultiAttrNet::init_params(tiny(ablation)).unwrap();
            let (_, trace) = train(net, &data(8), &[], &cfg(1, ablation)).unwrap();
            let l = trace.epochs[0].loss;
            assert_eq!(l.l_r == 0.0, !ablation.uses_reconstructor(), "{ablation:?}");
            assert_eq!(l.l_m == 0.0, !ablation.uses_multilabel(), "{ablation:?}");
        }
        let no_recon = MultiAttrNet::init_params(tiny(Ablation::NoRecon)).unwrap();
        assert!(no_recon.params().iter().all(|p| !p.name.starts_with("reconstructor")));
    }

    #[test]
    fn mismatched_ablation_is_rejected() {
        let net = MultiAttrNet::init_params(tiny(Ablation::Full)).unwrap();
        assert!(matches!(train(net, &data(4), &[], &cfg(1, Ablation::NoBoth)), Err(Error::Validation(_))));
    }

    #[test]
    fn non_finite_loss_names_component() {
        let mut net = MultiAttrNet::init_params(tiny(Ablation::Full)).unwrap();
        let idx = net.param_index("reconstructor.out.bias").unwrap();
        net.params_mut()[idx].value = Tensor::from_slice(&[f64::NAN]);
        match train(net, &data(4), &[], &cfg(1, Ablation::Full)) {
            Err(Error::NonFinite { component, epoch: 0, batch: 0 }) => assert_eq!(component, "l_r"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn clipping_and_config_validation() {
        let net = MultiAttrNet::init_params(tiny(Ablation::Full)).unwrap();
        let clipped = TrainConfig {
            grad_clip: Some(1e-3),
            ..cfg(1, Ablation::Full)
        };
        assert!(train(net, &data(4), &[], &clipped).is_ok());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert_eq!("no_both".parse::<Ablation>().unwrap(), Ablation::NoBoth);
        assert!("none".parse::<Ablation>().is_err());
    }

    #[test]
    fn training_reduces_loss_on_learnable_toy() {
        let net = MultiAttrNet::init_params(tiny(Ablation::Full)).unwrap();
        let (_, trace) = train(net, &data(16), &[], &cfg(8, Ablation::Full)).unwrap();
        let first = trace.epochs[0].loss.total;
        let last = trace.epochs.last().unwrap().loss.total;
        assert!(last < first, "{first} -> {last}");
    }
}
