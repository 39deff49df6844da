use std::fs;
use std::path::{Path, PathBuf};

use churnkit::amc::{
    apply_choices, distill_meta_fit, select_by_scores, stack_fit, stack_predict, DistillMetaConfig, MetaModel,
    StackConfig, DEFAULT_FOLDS, DEFAULT_LAMBDA_GRID,
};
use churnkit::calibration::{apply_temperature, reliability, temperature_fit, DEFAULT_BINS};
use churnkit::data::{synth_dataset, Dataset, SynthKind};
use churnkit::io::{self, Format};
use churnkit::metrics::flip_decomposition;
use churnkit::net::MlpNet;
use churnkit::ops::logit_accuracy;
use churnkit::scores::{
    avgconf_exact, conf_score, knn_avgconf_estimate, knn_avgconf_fit, NeighborSearch, ScoreVector, DEFAULT_KNN_K,
};
use churnkit::trainer::{self_consistency_run, train, SelfConsistencyConfig, TrainConfig, TrainMode};
use churnkit::{softmax, EmbeddingMatrix, LogitMatrix, PredictionBundle};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::manifest::{self, digest, fmt6, to_json, RunManifest};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "churnkit",
    version,
    about = "Measure and reduce predictive churn between model versions"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(untagged)]
enum Command {
    /// Churn, negative flip rate and flip decomposition of two logit files.
    Churn(ChurnArgs),
    /// Combine a base and a new model and report the resulting churn.
    Amc(AmcArgs),
    /// Fit a temperature and report reliability before and after scaling.
    Calibrate(CalibrateArgs),
    /// Full-batch training trace of forgetting and gradient compatibility.
    Selfconsistency(SelfConsistencyArgs),
    /// Train an MLP with a churn-reduction baseline.
    Train(TrainArgs),
    /// Write a synthetic dataset as feature and label files.
    Synth(SynthArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Churn(_) => "churn",
            Command::Amc(_) => "amc",
            Command::Calibrate(_) => "calibrate",
            Command::Selfconsistency(_) => "selfconsistency",
            Command::Train(_) => "train",
            Command::Synth(_) => "synth",
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct ChurnArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    new: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Directory for the run manifest (stderr otherwise).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum AmcMode {
    Conf,
    Avgconf,
    Combined,
    Learned,
    Distill,
}

#[derive(Debug, Args, Serialize)]
struct AmcArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    new: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, value_enum)]
    mode: AmcMode,
    /// Per-epoch logits of the base model on the evaluated samples.
    #[arg(long)]
    base_checkpoints: Option<PathBuf>,
    #[arg(long)]
    new_checkpoints: Option<PathBuf>,
    /// Validation embeddings and checkpoints of the base model for the
    /// nearest-neighbour AvgConf estimate, with embeddings of the evaluated samples.
    #[arg(long, requires_all = ["base_index_checkpoints", "base_embeddings"])]
    base_index_embeddings: Option<PathBuf>,
    #[arg(long)]
    base_index_checkpoints: Option<PathBuf>,
    #[arg(long)]
    base_embeddings: Option<PathBuf>,
    #[arg(long, requires_all = ["new_index_checkpoints", "new_embeddings"])]
    new_index_embeddings: Option<PathBuf>,
    #[arg(long)]
    new_index_checkpoints: Option<PathBuf>,
    #[arg(long)]
    new_embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_KNN_K)]
    knn_k: usize,
    /// Validation bundle for the learned combiners.
    #[arg(long)]
    val_base: Option<PathBuf>,
    #[arg(long)]
    val_new: Option<PathBuf>,
    #[arg(long)]
    val_labels: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    folds: usize,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LAMBDA_GRID)]
    lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Minimum validation accuracy for a distilled combiner (default: the
    /// new model's validation accuracy minus 0.005).
    #[arg(long)]
    accuracy_floor: Option<f64>,
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct CalibrateArgs {
    #[arg(long)]
    logits: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum DatasetArg {
    Blobs,
    Spirals,
    File,
}

#[derive(Debug, Args, Serialize)]
struct DataArgs {
    #[arg(long, value_enum, default_value_t = DatasetArg::Blobs)]
    dataset: DatasetArg,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 2.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    /// Source files for `--dataset file`.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Seed of the generated data (defaults to the run seed).
    #[arg(long)]
    data_seed: Option<u64>,
}

impl DataArgs {
    fn kind(&self) -> Result<SynthKind, CliError> {
        Ok(match self.dataset {
            DatasetArg::Blobs => SynthKind::Blobs {
                classes: self.classes,
                dim: self.dim,
                separation: self.separation,
                spread: self.spread,
            },
            DatasetArg::Spirals => SynthKind::TwoSpirals { noise: self.noise },
            DatasetArg::File => match (&self.features, &self.labels) {
                (Some(f), Some(l)) => SynthKind::FromFile {
                    features: f.clone(),
                    labels: l.clone(),
                },
                _ => return Err(CliError::Usage("--dataset file needs --features and --labels".into())),
            },
        })
    }

    fn inputs(&self) -> Vec<&Path> {
        match self.dataset {
            DatasetArg::File => self.features.iter().chain(&self.labels).map(PathBuf::as_path).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct SelfConsistencyArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    constrained: bool,
    #[arg(long, default_value_t = 2000)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Apply raw gradient steps instead of unit-norm steps.
    #[arg(long)]
    raw_steps: bool,
    #[arg(long, value_delimiter = ',', default_values_t = [32, 32])]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum TrainModeArg {
    Cold,
    Warm,
    Distill,
    Focal,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum OptimizerArg {
    Adam,
    Gd,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Flat `key = value` configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<TrainModeArg>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    constrained: bool,
    #[arg(long, value_delimiter = ',', default_values_t = [32, 32])]
    hidden: Vec<usize>,
    /// Base network blob, required for warm start.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Base model logits on the training set for distill and focal modes.
    #[arg(long)]
    base_logits: Option<PathBuf>,
    /// Monitoring set for checkpoints and early stopping.
    #[arg(long, requires = "monitor_labels")]
    monitor_features: Option<PathBuf>,
    #[arg(long, requires = "monitor_features")]
    monitor_labels: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_features: PathBuf,
    #[arg(long)]
    out_labels: PathBuf,
}

/// Collects input digests and seeds while a command runs.
struct Run {
    inputs: Vec<PathBuf>,
    seeds: Vec<u64>,
}

impl Run {
    fn input<'a>(&mut self, p: &'a Path) -> &'a Path {
        self.inputs.push(p.to_path_buf());
        p
    }
}

/// Accuracy a distilled combiner may give up relative to the new model.
const DEFAULT_FLOOR_MARGIN: f64 = 0.005;

pub fn run(cli: Cli) -> Result<Value, CliError> {
    let started_at = manifest::now();
    let config = serde_json::to_value(&cli.command).map_err(|e| CliError::Output(e.to_string()))?;
    let mut run = Run {
        inputs: Vec::new(),
        seeds: Vec::new(),
    };
    let (doc, out_dir) = match &cli.command {
        Command::Churn(a) => (churn(a, &mut run)?, a.out_dir.clone()),
        Command::Amc(a) => (amc(a, &mut run)?, Some(a.out_dir.clone())),
        Command::Calibrate(a) => (calibrate(a, &mut run)?, a.out_dir.clone()),
        Command::Selfconsistency(a) => (selfconsistency(a, &mut run)?, a.out_dir.clone()),
        Command::Train(a) => (train_cmd(a, &mut run)?, Some(a.out_dir.clone())),
        Command::Synth(a) => (synth(a, &mut run)?, None),
    };
    run.seeds.dedup();
    let inputs = run.inputs.iter().map(|p| digest(p)).collect::<Result<_, _>>()?;
    let record = RunManifest {
        command: cli.command.name().into(),
        config,
        seeds: run.seeds,
        inputs,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        started_at,
        finished_at: manifest::now(),
    };
    manifest::emit(&record, out_dir.as_deref())?;
    Ok(doc)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Core(churnkit::Error::io(dir, e)))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Core(churnkit::Error::io(path, e)))
}

fn load_bundle(base: &Path, new: &Path, labels: &Path, run: &mut Run) -> Result<PredictionBundle, CliError> {
    Ok(PredictionBundle::new(
        io::read_logits(run.input(base))?,
        io::read_logits(run.input(new))?,
        io::read_labels(run.input(labels))?,
    )?)
}

fn churn(a: &ChurnArgs, run: &mut Run) -> Result<Value, CliError> {
    let bundle = load_bundle(&a.base, &a.new, &a.labels, run)?;
    to_json(&flip_decomposition(&bundle))
}

fn avgconf_for(
    label: &str,
    checkpoints: &Option<PathBuf>,
    index: (&Option<PathBuf>, &Option<PathBuf>, &Option<PathBuf>),
    k: usize,
    n: usize,
    run: &mut Run,
) -> Result<ScoreVector, CliError> {
    if let Some(path) = checkpoints {
        let series = io::load_checkpoints(run.input(path))?;
        if series.rows() != n {
            return Err(churnkit::Error::ShapeMismatch(format!(
                "{label} checkpoints cover {} samples, expected {n}",
                series.rows()
            ))
            .into());
        }
        return Ok(avgconf_exact(&series));
    }
    if let (Some(emb), Some(ckpt), Some(query)) = index {
        let val_emb = EmbeddingMatrix::new(io::read_matrix(run.input(emb))?);
        let series = io::load_checkpoints(run.input(ckpt))?;
        let idx = knn_avgconf_fit(val_emb, &series, k, NeighborSearch::KdTree)?;
        let q = EmbeddingMatrix::new(io::read_matrix(run.input(query))?);
        if q.rows() != n {
            return Err(churnkit::Error::ShapeMismatch(format!(
                "{label} embeddings cover {} samples, expected {n}",
                q.rows()
            ))
            .into());
        }
        return Ok(knn_avgconf_estimate(&idx, &q)?);
    }
    Err(CliError::Usage(format!(
        "AvgConf for the {label} model needs --{label}-checkpoints or --{label}-index-embeddings, \
         --{label}-index-checkpoints and --{label}-embeddings"
    )))
}

fn choices_csv(choices: &[churnkit::Choice], pairs: &[(ScoreVector, ScoreVector)]) -> String {
    let mut out = String::from("index,choice");
    for (b, _) in pairs {
        out.push_str(&format!(",{k}_base,{k}_new", k = b.kind()));
    }
    out.push('\n');
    for (i, c) in choices.iter().enumerate() {
        out.push_str(&format!("{i},{}", c.as_str()));
        for (b, m) in pairs {
            out.push_str(&format!(",{},{}", fmt6(b.values()[i]), fmt6(m.values()[i])));
        }
        out.push('\n');
    }
    out
}

fn amc(a: &AmcArgs, run: &mut Run) -> Result<Value, CliError> {
    let bundle = load_bundle(&a.base, &a.new, &a.labels, run)?;
    let n = bundle.len();
    run.seeds.push(a.seed);
    let avg = |run: &mut Run| -> Result<(ScoreVector, ScoreVector), CliError> {
        let b = avgconf_for(
            "base",
            &a.base_checkpoints,
            (&a.base_index_embeddings, &a.base_index_checkpoints, &a.base_embeddings),
            a.knn_k,
            n,
            run,
        )?;
        let m = avgconf_for(
            "new",
            &a.new_checkpoints,
            (&a.new_index_embeddings, &a.new_index_checkpoints, &a.new_embeddings),
            a.knn_k,
            n,
            run,
        )?;
        Ok((b, m))
    };
    let conf = || (conf_score(bundle.base()), conf_score(bundle.new_model()));
    let (combined, choices_text, meta): (LogitMatrix, Option<String>, Option<MetaModel>) = match a.mode {
        AmcMode::Conf | AmcMode::Avgconf | AmcMode::Combined => {
            let pairs = match a.mode {
                AmcMode::Conf => vec![conf()],
                AmcMode::Avgconf => vec![avg(run)?],
                _ => vec![conf(), avg(run)?],
            };
            let choices = select_by_scores(&bundle, &pairs)?;
            (
                apply_choices(&bundle, &choices)?,
                Some(choices_csv(&choices, &pairs)),
                None,
            )
        }
        AmcMode::Learned | AmcMode::Distill => {
            let (Some(vb), Some(vn), Some(vl)) = (&a.val_base, &a.val_new, &a.val_labels) else {
                return Err(CliError::Usage(
                    "learned and distill modes need --val-base, --val-new and --val-labels".into(),
                ));
            };
            let val = load_bundle(vb, vn, vl, run)?;
            let model = if let AmcMode::Learned = a.mode {
                stack_fit(
                    &val,
                    &StackConfig {
                        folds: a.folds,
                        lambda_grid: a.lambdas.clone(),
                        seed: a.seed,
                    },
                )?
            } else {
                let mut cfg = DistillMetaConfig {
                    max_epochs: a.max_epochs,
                    accuracy_floor: Some(match a.accuracy_floor {
                        Some(f) => f,
                        None => logit_accuracy(val.new_model(), val.labels())? - DEFAULT_FLOOR_MARGIN,
                    }),
                    seed: a.seed,
                    ..DistillMetaConfig::default()
                };
                if let Some(alphas) = &a.alphas {
                    cfg.alpha_grid = alphas.clone();
                }
                distill_meta_fit(&val, &softmax(val.base()), &cfg)?
            };
            let model = model.quantized();
            (stack_predict(&model, &bundle)?, None, Some(model))
        }
    };
    create_dir(&a.out_dir)?;
    io::save_matrix(&combined, &a.out_dir.join("combined.lgt"), Format::Binary)?;
    if let Some(text) = &choices_text {
        write_text(&a.out_dir.join("choices.csv"), text)?;
    }
    if let Some(m) = &meta {
        let path = a.out_dir.join("meta.amcm");
        fs::write(&path, m.to_bytes()?).map_err(|e| CliError::Core(churnkit::Error::io(&path, e)))?;
    }
    let psi = bundle.with_new(combined)?;
    let use_new = choices_text
        .as_ref()
        .map(|t| t.lines().filter(|l| l.contains(",use_new")).count());
    to_json(&json!({
        "mode": a.mode,
        "n": n,
        "classes": bundle.classes(),
        "use_new": use_new,
        "new_model": flip_decomposition(&bundle),
        "combined": flip_decomposition(&psi),
        "meta": meta.as_ref().map(MetaModel::summary),
    }))
}

fn calibrate(a: &CalibrateArgs, run: &mut Run) -> Result<Value, CliError> {
    let logits = io::read_logits(run.input(&a.logits))?;
    let labels = io::read_labels(run.input(&a.labels))?;
    let fit = temperature_fit(&logits, &labels)?;
    let scaled = apply_temperature(&logits, fit.temperature)?;
    let before = reliability(&softmax(&logits), &labels, a.bins)?;
    let after = reliability(&softmax(&scaled), &labels, a.bins)?;
    if let Some(dir) = &a.out_dir {
        create_dir(dir)?;
        io::save_matrix(&scaled, &dir.join("calibrated.lgt"), Format::Binary)?;
        write_text(&dir.join("reliability_before.csv"), &before.to_csv())?;
        write_text(&dir.join("reliability_after.csv"), &after.to_csv())?;
    }
    to_json(&json!({
        "fit": fit,
        "accuracy": logit_accuracy(&logits, &labels)?,
        "before": before,
        "after": after,
    }))
}

fn dataset(data: &DataArgs, seed: u64, run: &mut Run) -> Result<Dataset, CliError> {
    for p in data.inputs() {
        run.input(p);
    }
    let data_seed = data.data_seed.unwrap_or(seed);
    run.seeds.push(data_seed);
    Ok(synth_dataset(&data.kind()?, data.samples, data_seed)?)
}

fn selfconsistency(a: &SelfConsistencyArgs, run: &mut Run) -> Result<Value, CliError> {
    run.seeds.push(a.seed);
    let data = dataset(&a.data, a.seed, run)?;
    let trace = self_consistency_run(
        &data,
        &SelfConsistencyConfig {
            hidden: a.hidden.clone(),
            lr: a.lr,
            epochs: a.epochs,
            constrained: a.constrained,
            unit_norm: !a.raw_steps,
            seed: a.seed,
        },
    )?;
    if let Some(dir) = &a.out_dir {
        create_dir(dir)?;
        write_text(&dir.join("trace.csv"), &trace.to_csv_with(fmt6))?;
    }
    to_json(&trace.summary)
}

fn train_cmd(a: &TrainArgs, run: &mut Run) -> Result<Value, CliError> {
    let features = io::read_matrix(run.input(&a.features))?;
    let labels = io::read_labels(run.input(&a.labels))?;
    let classes = labels.iter().copied().max().map_or(2, |m| m + 1).max(2);
    let data = Dataset::new(features, labels, classes)?;

    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(run.input(path)).map_err(|e| churnkit::Error::io(path, e))?;
        cfg.apply_text(&text)?;
    }
    let mut set = |key: &str, value: Option<String>| -> Result<(), CliError> {
        match value {
            Some(v) => cfg.set(key, &v).map_err(|e| CliError::Usage(e.to_string())),
            None => Ok(()),
        }
    };
    let mode = a.mode.map(|m| match m {
        TrainModeArg::Cold => "cold",
        TrainModeArg::Warm => "warm",
        TrainModeArg::Distill => "distill",
        TrainModeArg::Focal => "focal",
    });
    let optimizer = a.optimizer.map(|o| match o {
        OptimizerArg::Adam => "adam",
        OptimizerArg::Gd => "gd",
    });
    set("mode", mode.map(String::from))?;
    set("alpha", a.alpha.map(|v| v.to_string()))?;
    set("eps", a.eps.map(|v| v.to_string()))?;
    set("optimizer", optimizer.map(String::from))?;
    set("lr", a.lr.map(|v| v.to_string()))?;
    set("batch", a.batch.map(|v| v.to_string()))?;
    set("epochs", a.epochs.map(|v| v.to_string()))?;
    set("patience", a.patience.map(|v| v.to_string()))?;
    set("seed", a.seed.map(|v| v.to_string()))?;
    if a.constrained {
        set("constrained", Some("true".into()))?;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    run.seeds.push(cfg.seed);

    let base = match &a.base {
        Some(p) => Some(MlpNet::from_bytes(
            &fs::read(run.input(p)).map_err(|e| churnkit::Error::io(p, e))?,
        )?),
        None => None,
    };
    let needs_base_outputs = matches!(cfg.mode, TrainMode::Distill { .. } | TrainMode::Focal { .. });
    let base_logits = match (&a.base_logits, &base) {
        (Some(p), _) => Some(io::read_logits(run.input(p))?),
        (None, Some(net)) if needs_base_outputs => Some(net.logits(&data.features)?),
        _ => None,
    };
    match cfg.mode {
        TrainMode::WarmStart if base.is_none() => {
            return Err(CliError::Usage("warm start needs --base".into()));
        }
        _ if needs_base_outputs && base_logits.is_none() => {
            return Err(CliError::Usage(format!(
                "{} mode needs --base or --base-logits",
                cfg.mode.name()
            )));
        }
        _ => {}
    }
    let monitor = match (&a.monitor_features, &a.monitor_labels) {
        (Some(f), Some(l)) => Some(Dataset::new(
            io::read_matrix(run.input(f))?,
            io::read_labels(run.input(l))?,
            classes,
        )?),
        _ => None,
    };

    let out = train(
        &data,
        &a.hidden,
        &cfg,
        base.as_ref(),
        base_logits.as_ref(),
        monitor.as_ref(),
    )?;
    let net = out.net.quantized();
    create_dir(&a.out_dir)?;
    let model_path = a.out_dir.join("model.mlp");
    fs::write(&model_path, net.to_bytes()?).map_err(|e| churnkit::Error::io(&model_path, e))?;
    io::save_checkpoints(
        &out.checkpoints,
        &a.out_dir.join("checkpoints"),
        &a.out_dir.join("checkpoints.txt"),
    )?;
    let logits = net.logits(&data.features)?;
    io::save_matrix(&logits, &a.out_dir.join("logits.lgt"), Format::Binary)?;
    to_json(&json!({
        "config": cfg,
        "layers": net.sizes(),
        "epochs_run": out.epochs_run,
        "best_epoch": out.best_epoch,
        "train_accuracy": logit_accuracy(&logits, &data.labels)?,
        "final_loss": out.losses.last(),
    }))
}

fn synth(a: &SynthArgs, run: &mut Run) -> Result<Value, CliError> {
    run.seeds.push(a.seed);
    let data = dataset(&a.data, a.seed, run)?;
    for path in [&a.out_features, &a.out_labels] {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
    }
    io::save_matrix(&data.features, &a.out_features, Format::from_path(&a.out_features))?;
    io::save_labels(&data.labels, &a.out_labels, Format::from_path(&a.out_labels))?;
    to_json(&json!({
        "samples": data.len(),
        "classes": data.classes,
        "dim": data.dim(),
    }))
}
