mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcan::analysis::{self, CorrelationMatrix};
use mcan::dataset::{self, Dataset, Sample};
use mcan::robustness::{self, MEAN_LABEL};
use mcan::trainer::{self, Ablation, Optimizer};
use mcan::transform::{curve_samples, TransformParams};
use mcan::{checkpoint, MultiAttrNet};

use config::{RunConfig, Subset};

#[derive(Parser)]
#[command(name = "mcan", version, about = "Multi-channel attention networks for multi-attribute classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// CelebA-style attribute list (alternative to --data).
    #[arg(long)]
    attr_file: Option<PathBuf>,
    /// Image directory for --attr-file (defaults to the file's directory).
    #[arg(long)]
    image_dir: Option<PathBuf>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Part of the split to read.
    #[arg(long, value_enum)]
    subset: Option<Subset>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        image_size: Option<usize>,
        /// Comma-separated attribute names.
        #[arg(long, value_delimiter = ',')]
        attributes: Option<Vec<String>>,
    },
    /// Train a network and write a checkpoint plus per-epoch trace.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, value_parser = parse_optimizer)]
        optimizer: Option<Optimizer>,
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
        #[arg(long)]
        lambda_b: Option<f64>,
        #[arg(long)]
        lambda_m: Option<f64>,
        #[arg(long)]
        lambda_r: Option<f64>,
        #[arg(long)]
        lambda_1: Option<f64>,
        #[arg(long)]
        grad_clip: Option<f64>,
        /// Shuffle seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Initialisation seed.
        #[arg(long)]
        net_seed: Option<u64>,
        #[arg(long)]
        feature_channels: Option<usize>,
        #[arg(long)]
        head_hidden: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        image_channels: Option<usize>,
        /// Use the full-width preset network.
        #[arg(long)]
        paper_preset: bool,
    },
    /// Per-attribute accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        n: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Mask images, channel importance and correlation tables.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        max_samples: Option<usize>,
        #[arg(long)]
        mask_sample: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Accuracy over noise levels and mask-transform parameters.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        ns: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        #[arg(long)]
        eval_samples: Option<usize>,
        #[arg(long)]
        noise_seed: Option<u64>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Sample the mask transformation curve.
    Curve {
        #[command(flatten)]
        common: Common,
        /// Comma-separated exponents; paired with --beta.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        beta: Option<Vec<f64>>,
        #[arg(long)]
        count: Option<usize>,
    },
}

fn parse_optimizer(s: &str) -> Result<Optimizer, String> {
    match s {
        "sgd" => Ok(Optimizer::Sgd),
        "adam" => Ok(Optimizer::Adam),
        _ => Err(format!("unknown optimizer {s:?} (sgd, adam)")),
    }
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: mcan::Error| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<mcan::Error> for Failure {
    fn from(e: mcan::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn usage<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Usage(e.to_string())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn base_config(common: &Common, command: &str) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    cfg.command = command.to_string();
    cfg.paths.out = common.out.clone();
    Ok(cfg)
}

fn apply_data_args(cfg: &mut RunConfig, data: DataArgs) {
    if data.data.is_some() || data.attr_file.is_some() {
        cfg.paths.data = data.data;
        cfg.paths.attr_file = data.attr_file;
        cfg.paths.image_dir = data.image_dir;
    }
    set(&mut cfg.split.train_fraction, data.train_fraction);
    set(&mut cfg.split.seed, data.split_seed);
    set(&mut cfg.split.subset, data.subset);
}

fn load_data(cfg: &RunConfig, size: usize, channels: usize) -> Result<Dataset, Failure> {
    let p = &cfg.paths;
    match (&p.data, &p.attr_file) {
        (Some(dir), _) => Ok(dataset::load_dataset_dir(dir, size, channels)?),
        (None, Some(attr)) => {
            let images = p
                .image_dir
                .clone()
                .or_else(|| attr.parent().map(Path::to_path_buf))
                .unwrap_or_default();
            Ok(dataset::load_celeba_format(attr, &images, size, channels)?)
        }
        (None, None) => Err(Failure::Usage("a dataset is required: pass --data or --attr-file".into())),
    }
}

/// The configured subset of a seeded split.
fn subset(cfg: &RunConfig, samples: &[Sample]) -> Result<(Vec<Sample>, Vec<Sample>), Failure> {
    let (train, test) = dataset::split(samples, cfg.split.train_fraction, cfg.split.seed).map_err(usage)?;
    Ok(match cfg.split.subset {
        Subset::Train => (train.clone(), train),
        Subset::Test => (train, test),
        Subset::All => (train, samples.to_vec()),
    })
}

fn load_checkpoint(cfg: &mut RunConfig, flag: Option<PathBuf>) -> Result<MultiAttrNet, Failure> {
    set(&mut cfg.paths.checkpoint, flag.map(Some));
    let path = cfg
        .paths
        .checkpoint
        .clone()
        .ok_or_else(|| Failure::Usage("--checkpoint is required".into()))?;
    let (net, train) = checkpoint::load(&path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    cfg.net = net.config().clone();
    cfg.train = train;
    Ok(net)
}

fn check_names(names: &[String], net: &MultiAttrNet) -> Result<(), Failure> {
    if names.len() != net.num_attributes() {
        return Err(Failure::Runtime(format!(
            "dataset has {} attributes, checkpoint expects {}",
            names.len(),
            net.num_attributes()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData {
            common,
            samples,
            seed,
            image_size,
            attributes,
        } => {
            let mut cfg = base_config(&common, "gen-data")?;
            set(&mut cfg.dataset.num_samples, samples);
            set(&mut cfg.dataset.seed, seed);
            set(&mut cfg.dataset.image_size, image_size);
            set(&mut cfg.dataset.attribute_names, attributes);
            cfg.dataset.validate().map_err(usage)?;
            let data = dataset::synthetic_dataset(&cfg.dataset)?;
            dataset::export_synthetic(&data, cfg.dataset.seed, &cfg.paths.out)?;
            cfg.write(&cfg.paths.out)?;
            eprintln!("wrote {} samples to {}", data.samples.len(), cfg.paths.out.display());
            Ok(())
        }
        Command::Train {
            common,
            data,
            epochs,
            batch_size,
            lr,
            optimizer,
            ablation,
            lambda_b,
            lambda_m,
            lambda_r,
            lambda_1,
            grad_clip,
            seed,
            net_seed,
            feature_channels,
            head_hidden,
            image_size,
            image_channels,
            paper_preset,
        } => {
            let mut cfg = base_config(&common, "train")?;
            apply_data_args(&mut cfg, data);
            if paper_preset {
                cfg.net = mcan::NetConfig::paper();
            }
            let t = &mut cfg.train;
            set(&mut t.epochs, epochs);
            set(&mut t.batch_size, batch_size);
            set(&mut t.learning_rate, lr);
            set(&mut t.optimizer, optimizer);
            set(&mut t.ablation, ablation);
            set(&mut t.loss_weights.lambda_b, lambda_b);
            set(&mut t.loss_weights.lambda_m, lambda_m);
            set(&mut t.loss_weights.lambda_r, lambda_r);
            set(&mut t.loss_weights.lambda_1, lambda_1);
            set(&mut t.grad_clip, grad_clip.map(Some));
            set(&mut t.seed, seed);
            t.checkpoint_path = None;
            let n = &mut cfg.net;
            set(&mut n.seed, net_seed);
            set(&mut n.feature_channels, feature_channels);
            set(&mut n.head_hidden, head_hidden);
            set(&mut n.image_size, image_size);
            set(&mut n.image_channels, image_channels);
            cfg.train.ablation.apply(&mut cfg.net);
            cfg.train.validate().map_err(usage)?;

            let data = load_data(&cfg, cfg.net.image_size, cfg.net.image_channels)?;
            cfg.net.num_attributes = data.attribute_names.len();
            cfg.net.validate().map_err(usage)?;
            let (train_set, held_out) = subset(&cfg, &data.samples)?;
            let ckpt = cfg.paths.checkpoint.clone().unwrap_or_else(|| cfg.paths.out.join("model.ckpt"));
            cfg.paths.checkpoint = Some(ckpt.clone());
            fs::create_dir_all(&cfg.paths.out)?;
            cfg.write(&cfg.paths.out)?;

            let net = MultiAttrNet::init_params(cfg.net.clone())?;
            let (net, trace) = trainer::train_with_progress(net, &train_set, &held_out, &cfg.train, |e| {
                let acc = e.held_out_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
                eprintln!(
                    "epoch {:>3}  total {:.4}  l_b {:.4}  l_m {:.4}  l_r {:.4}  held-out acc {acc}  ({:.1}s)",
                    e.epoch + 1,
                    e.loss.total,
                    e.loss.l_b,
                    e.loss.l_m,
                    e.loss.l_r,
                    e.wall_clock_secs
                );
            })?;
            checkpoint::save(&net, &cfg.train, &ckpt)?;
            trace.write_csv(&cfg.paths.out.join("trace.csv"))?;
            eprintln!("checkpoint written to {}", ckpt.display());
            Ok(())
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            n,
            beta,
            threshold,
        } => {
            let mut cfg = base_config(&common, "eval")?;
            apply_data_args(&mut cfg, data);
            set(&mut cfg.eval.n, n);
            set(&mut cfg.eval.beta, beta);
            set(&mut cfg.eval.threshold, threshold);
            let params = TransformParams::new(cfg.eval.n, cfg.eval.beta).map_err(usage)?;
            let net = load_checkpoint(&mut cfg, checkpoint)?;
            let data = load_data(&cfg, cfg.net.image_size, cfg.net.image_channels)?;
            check_names(&data.attribute_names, &net)?;
            let (_, samples) = subset(&cfg, &data.samples)?;
            let acc = robustness::evaluate(&net, &samples, params, cfg.eval.threshold).map_err(|e| match e {
                mcan::Error::Validation(m) => Failure::Usage(m),
                other => other.into(),
            })?;
            let mut csv = String::from("attribute,accuracy\n");
            for (name, a) in data.attribute_names.iter().zip(&acc) {
                writeln!(csv, "{name},{a}").expect("string write");
            }
            writeln!(csv, "{MEAN_LABEL},{}", robustness::mean(&acc)).expect("string write");
            fs::create_dir_all(&cfg.paths.out)?;
            fs::write(cfg.paths.out.join("accuracy.csv"), &csv)?;
            cfg.write(&cfg.paths.out)?;
            print!("{csv}");
            Ok(())
        }
        Command::Analyze {
            common,
            data,
            checkpoint,
            max_samples,
            mask_sample,
            top_k,
        } => {
            let mut cfg = base_config(&common, "analyze")?;
            apply_data_args(&mut cfg, data);
            set(&mut cfg.analyze.max_samples, max_samples.map(Some));
            set(&mut cfg.analyze.mask_sample, mask_sample);
            set(&mut cfg.analyze.top_k, top_k);
            let net = load_checkpoint(&mut cfg, checkpoint)?;
            let data = load_data(&cfg, cfg.net.image_size, cfg.net.image_channels)?;
            check_names(&data.attribute_names, &net)?;
            let (_, mut samples) = subset(&cfg, &data.samples)?;
            if let Some(cap) = cfg.analyze.max_samples {
                samples.truncate(cap);
            }
            let out = cfg.paths.out.clone();
            fs::create_dir_all(&out)?;
            cfg.write(&out)?;
            analyze(&cfg, &net, &data.attribute_names, &samples, &out)
        }
        Command::Sweep {
            common,
            data,
            checkpoint,
            sigmas,
            ns,
            betas,
            eval_samples,
            noise_seed,
            threshold,
        } => {
            let mut cfg = base_config(&common, "sweep")?;
            apply_data_args(&mut cfg, data);
            let s = &mut cfg.sweep;
            set(&mut s.sigmas, sigmas);
            set(&mut s.ns, ns);
            set(&mut s.betas, betas);
            set(&mut s.eval_samples, eval_samples.map(Some));
            set(&mut s.noise_seed, noise_seed);
            set(&mut s.threshold, threshold);
            cfg.sweep.validate().map_err(usage)?;
            let net = load_checkpoint(&mut cfg, checkpoint)?;
            let data = load_data(&cfg, cfg.net.image_size, cfg.net.image_channels)?;
            check_names(&data.attribute_names, &net)?;
            let (_, samples) = subset(&cfg, &data.samples)?;
            let result = robustness::run_sweep(&net, &samples, &data.attribute_names, &cfg.sweep)?;
            let summary = robustness::baseline_delta(&result)?;
            fs::create_dir_all(&cfg.paths.out)?;
            result.write_csv(&cfg.paths.out.join("sweep.csv"))?;
            fs::write(cfg.paths.out.join("summary.csv"), robustness::delta_csv(&summary))?;
            cfg.write(&cfg.paths.out)?;
            print!("{}", robustness::delta_csv(&summary));
            Ok(())
        }
        Command::Curve { common, n, beta, count } => {
            let mut cfg = base_config(&common, "curve")?;
            set(&mut cfg.curve.ns, n);
            set(&mut cfg.curve.betas, beta);
            set(&mut cfg.curve.count, count);
            let pairs = curve_pairs(&cfg.curve.ns, &cfg.curve.betas)?;
            let mut files = Vec::with_capacity(pairs.len());
            for p in &pairs {
                let rows = curve_samples(*p, cfg.curve.count).map_err(usage)?;
                let mut csv = String::from("m,g\n");
                for (m, g) in rows {
                    writeln!(csv, "{m},{g}").expect("string write");
                }
                let name = if pairs.len() == 1 {
                    "curve.csv".to_string()
                } else {
                    format!("curve_n{}_beta{}.csv", p.n, p.beta)
                };
                files.push((name, csv));
            }
            fs::create_dir_all(&cfg.paths.out)?;
            for (name, csv) in files {
                fs::write(cfg.paths.out.join(name), csv)?;
            }
            cfg.write(&cfg.paths.out)?;
            Ok(())
        }
    }
}

fn curve_pairs(ns: &[f64], betas: &[f64]) -> Result<Vec<TransformParams>, Failure> {
    let len = match (ns.len(), betas.len()) {
        (0, _) | (_, 0) => return Err(Failure::Usage("--n and --beta need at least one value".into())),
        (a, b) if a == b || b == 1 => a,
        (1, b) => b,
        (a, b) => return Err(Failure::Usage(format!("--n has {a} values but --beta has {b}"))),
    };
    (0..len)
        .map(|i| {
            let n = ns[if ns.len() == 1 { 0 } else { i }];
            let beta = betas[if betas.len() == 1 { 0 } else { i }];
            TransformParams::new(n, beta).map_err(usage)
        })
        .collect()
}

fn analyze(cfg: &RunConfig, net: &MultiAttrNet, names: &[String], samples: &[Sample], out: &Path) -> Result<(), Failure> {
    if samples.len() < 2 {
        return Err(Failure::Runtime("analysis needs at least two samples".into()));
    }
    let mask_sample = samples.get(cfg.analyze.mask_sample).ok_or_else(|| {
        Failure::Usage(format!(
            "mask sample {} out of range for {} samples",
            cfg.analyze.mask_sample,
            samples.len()
        ))
    })?;
    let masks_dir = out.join("masks");
    for k in 0..net.num_attributes() {
        analysis::export_masks(net, mask_sample, k, &masks_dir)?;
    }
    let stats = analysis::mask_statistics(net, samples)?;
    let importances: Vec<_> = (0..net.num_attributes()).map(|k| stats.importance(k)).collect();
    fs::write(out.join("importance.csv"), analysis::importance_csv(&importances, names))?;
    let mut top = serde_json::Map::new();
    for imp in &importances {
        let ids = analysis::top_k_channels(imp, cfg.analyze.top_k.min(imp.scores.len())).map_err(usage)?;
        top.insert(names[imp.attribute].clone(), serde_json::to_value(ids)?);
    }
    fs::write(out.join("top_channels.json"), serde_json::to_string_pretty(&top)?)?;

    let features: CorrelationMatrix = analysis::feature_correlation_from(&stats)?;
    features.write(out, "feature_correlation")?;
    if names.len() >= 2 {
        analysis::attribute_correlation_from(&stats, names)?.write(out, "attribute_correlation")?;
    } else {
        eprintln!("note: attribute correlation needs at least two attributes; skipped");
    }

    if samples.iter().all(|s| s.supports.is_some()) {
        let mut csv = String::from("attribute,score\n");
        for (k, name) in names.iter().enumerate() {
            match analysis::localization_score(net, samples, k) {
                Ok(score) => writeln!(csv, "{name},{score}").expect("string write"),
                Err(mcan::Error::Validation(msg)) => eprintln!("note: localization for {name} skipped: {msg}"),
                Err(e) => return Err(e.into()),
            }
        }
        fs::write(out.join("localization.csv"), csv)?;
    } else {
        eprintln!("note: dataset has no support bitmaps; localization scores omitted");
    }
    eprintln!("analysis written to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
