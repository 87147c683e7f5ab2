//! Command-line front end: `train`, `eval`, `cost` and `gradcheck`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
//! 4 numeric failure (non-finite values, failed gradient check).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::caps::{ArchitectureSpec, RoutingMethod};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, RESOLVED_CONFIG_FILE};
use crate::cost::CostReport;
use crate::data::{
    idx_paths, load_idx, make_affnist_style, pad_centered, split_train_val, AffnistVariant, Dataset, Split,
};
use crate::error::{config_err, Error, Result};
use crate::model::CapsNet;
use crate::tensor::gradcheck::GradcheckConfig;
use crate::train::{self, evaluate, RunMetrics, LAST_CHECKPOINT, METRICS_FILE};
use crate::verify::{check_model, ModelCheck};

#[derive(Debug, Parser)]
#[command(name = "capsnet", version, about = "Shortcut-routing capsule networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write metrics, checkpoints and the resolved config.
    Train(TrainArgs),
    /// Measure the accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Parameter, voting-volume and routing-FLOP accounting.
    Cost(CostArgs),
    /// Finite-difference check of end-to-end gradients on a tiny network.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Attention,
    Fuzzy,
}

impl From<MethodArg> for RoutingMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Attention => RoutingMethod::Attention,
            MethodArg::Fuzzy => RoutingMethod::Fuzzy,
        }
    }
}

/// Architecture selection shared by `train` and `cost`.
#[derive(Debug, Default, Args)]
pub struct ModelArgs {
    /// Named architecture: baseline, expanded or tiny.
    #[arg(long, conflicts_with = "layers")]
    pub preset: Option<String>,
    /// Layer string, e.g. "Conv1: (64, 5, 2) - PrimaryCaps: (8, 1, 1) - ...".
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long, value_enum)]
    pub routing: Option<MethodArg>,
    /// Route every capsule layer straight to the class capsules.
    #[arg(long, conflicts_with = "no_shortcut")]
    pub shortcut: bool,
    /// Layer-to-layer routing instead of shortcuts.
    #[arg(long)]
    pub no_shortcut: bool,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub input_size: Option<usize>,
}

impl ModelArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = self.preset.as_ref().or(self.layers.as_ref()) {
            cfg.architecture.layers = p.clone();
        }
        if let Some(m) = self.routing {
            cfg.routing.method = m.into();
        }
        if self.shortcut {
            cfg.routing.shortcut = true;
        }
        if self.no_shortcut {
            cfg.routing.shortcut = false;
        }
        if let Some(i) = self.iterations {
            cfg.routing.iterations = i;
        }
        if let Some(s) = self.input_size {
            cfg.architecture.input_size = Some(s);
        }
    }
}

#[derive(Debug, Default, Args)]
pub struct TrainArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Examples read from the training file before splitting.
    #[arg(long)]
    pub subset_size: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long, env = "CAPSNET_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Run directory for metrics, checkpoints and the resolved config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the run directory's last checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Store measured epoch durations in metrics.csv.
    #[arg(long)]
    pub record_wall_time: bool,
    /// Train on padded frames with random shifts (affNist protocol).
    #[arg(long)]
    pub padded: bool,
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        self.model.apply(&mut cfg);
        if let Some(v) = self.epochs {
            cfg.training.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.training.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.training.lr.base = v;
        }
        if let Some(v) = self.seed {
            cfg.training.seed = v;
        }
        if let Some(v) = self.subset_size {
            cfg.data.subset_size = Some(v);
        }
        if let Some(v) = self.n_val {
            cfg.data.n_val = v;
        }
        if let Some(v) = &self.data_dir {
            cfg.data.dir = Some(v.clone());
        }
        if let Some(v) = &self.out {
            cfg.output.run_dir = v.clone();
        }
        if self.record_wall_time {
            cfg.training.record_wall_time = true;
        }
        if self.padded {
            cfg.data.padded_training = true;
        }
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads the configured subset and splits it into training and validation
/// sets, padding both when `data.padded_training` is set.
pub fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train_set, val_set) = load_raw_splits(cfg)?;
    if cfg.data.padded_training {
        let side = cfg.data.augmentation.pad_to;
        return Ok((pad_centered(&train_set, side)?, pad_centered(&val_set, side)?));
    }
    Ok((train_set, val_set))
}

fn load_raw_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (images, labels) = idx_paths(cfg.data_dir()?, "train")?;
    let all = load_idx(images, labels)?;
    let n = cfg.data.subset_size.unwrap_or(all.len());
    if n > all.len() {
        return Err(config_err!("data.subset_size: {n} exceeds the {} available examples", all.len()));
    }
    let subset = all.take(n);
    split_train_val(&subset, n - cfg.data.n_val, cfg.data.n_val, cfg.data.split_seed)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub metrics: RunMetrics,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let cfg = args.resolve()?;
    let spec = cfg.architecture_spec()?;
    let (train_set, val_set) = load_splits(&cfg)?;
    let dir = cfg.output.run_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let snapshot = dir.join(RESOLVED_CONFIG_FILE);
    fs::write(&snapshot, cfg.to_json() + "\n").map_err(|e| Error::io(&snapshot, e))?;
    let tcfg = cfg.train_config();
    let last = dir.join(LAST_CHECKPOINT);
    let metrics = if args.resume && last.is_file() {
        let ckpt = Checkpoint::load(&last)?;
        ckpt.expect_spec(&spec)?;
        log::info!("resuming from {} after epoch {}", last.display(), ckpt.progress.epochs_done);
        train::resume(ckpt, &train_set, &val_set, &tcfg, Some(&dir))?.1
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
        let mut net = CapsNet::with_options(spec, cfg.objectives.activation, cfg.routing.fuzzy, &mut rng)?;
        log::info!("{} parameters; {} train / {} validation examples", net.param_count(), train_set.len(), val_set.len());
        train::train(&mut net, &train_set, &val_set, &tcfg, Some(&dir))?
    };
    let (best_epoch, best_val_accuracy) = metrics.best();
    Ok(TrainSummary {
        run_dir: dir,
        epochs: metrics.records.len(),
        best_epoch,
        best_val_accuracy,
        metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalDataset {
    /// The validation split of the run's configuration.
    Val,
    /// The `t10k` files in the data directory.
    Test,
    /// Affine-transformed, padded copies of the test files (or of the
    /// validation split when no test files exist).
    AffnistStyle,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub dataset: EvalDataset,
    /// Run configuration for the data split; defaults to the config.json
    /// next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "CAPSNET_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Where to write the JSON report; defaults to eval-<dataset>.json next
    /// to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of the affNist-style transforms.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub architecture: String,
    pub dataset: EvalDataset,
    pub examples: usize,
    pub accuracy: f64,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(EvalReport, PathBuf)> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let sibling = args.checkpoint.parent().unwrap_or(Path::new(".")).join(RESOLVED_CONFIG_FILE);
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None if sibling.is_file() => RunConfig::load(&sibling)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &args.data_dir {
        cfg.data.dir = Some(d.clone());
    }
    cfg.apply_env();
    let architecture = ckpt.spec.clone();
    let (net, _, _) = ckpt.restore()?;
    let dir = cfg.data_dir()?;
    let has_test = idx_paths(dir, "t10k").is_ok();
    let ds = match args.dataset {
        EvalDataset::Val => load_splits(&cfg)?.1,
        EvalDataset::Test => {
            let (i, l) = idx_paths(dir, "t10k")?;
            let test = load_idx(i, l)?.with_split(Split::Test);
            if cfg.data.padded_training {
                pad_centered(&test, cfg.data.augmentation.pad_to)?
            } else {
                test
            }
        }
        EvalDataset::AffnistStyle => {
            let source = if has_test {
                let (i, l) = idx_paths(dir, "t10k")?;
                load_idx(i, l)?.with_split(Split::Test)
            } else {
                load_raw_splits(&cfg)?.1
            };
            make_affnist_style(&source, &cfg.data.augmentation, AffnistVariant::Test, args.seed)?
        }
    };
    if ds.height() != net.spec().input_size {
        return Err(config_err!(
            "the checkpoint expects {}x{} inputs but the {:?} set has {}x{} images",
            net.spec().input_size,
            net.spec().input_size,
            args.dataset,
            ds.height(),
            ds.width()
        ));
    }
    let accuracy = evaluate(&net, &ds, cfg.training.eval_batch_size)?;
    let report = EvalReport {
        checkpoint: args.checkpoint.clone(),
        architecture,
        dataset: args.dataset,
        examples: ds.len(),
        accuracy,
    };
    let out = args.out.clone().unwrap_or_else(|| {
        let name = format!("eval-{}.json", serde_json::to_value(args.dataset).expect("enum").as_str().expect("string"));
        args.checkpoint.parent().unwrap_or(Path::new(".")).join(name)
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
    Ok((report, out))
}

#[derive(Debug, Default, Args)]
pub struct CostArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Also report the opposite routing schedule.
    #[arg(long)]
    pub compare: bool,
    /// Write the structured report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostOutput {
    pub primary: CostReport,
    pub other: Option<CostReport>,
}

pub fn cmd_cost(args: &CostArgs) -> Result<(CostOutput, String)> {
    let mut cfg = RunConfig::default();
    args.model.apply(&mut cfg);
    let spec = cfg.architecture_spec()?;
    let primary = CostReport::new(&spec)?;
    let other = if args.compare {
        Some(CostReport::new(&spec.clone().with_shortcut(!spec.shortcut))?)
    } else {
        None
    };
    let table = primary.render_table(other.as_ref());
    let out = CostOutput { primary, other };
    if let Some(path) = &args.json {
        let text = serde_json::to_string_pretty(&out).expect("report serializes") + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok((out, table))
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Scalar parameters probed per network.
    #[arg(long, default_value_t = 20)]
    pub n_params: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Check only this routing method (default: both).
    #[arg(long, value_enum)]
    pub routing: Option<MethodArg>,
    #[arg(long, conflicts_with = "no_shortcut")]
    pub shortcut: bool,
    #[arg(long)]
    pub no_shortcut: bool,
    /// Route the activations through an op with a wrong derivative.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        Self {
            n_params: 20,
            eps: 1e-5,
            tol: 1e-4,
            seed: 0,
            routing: None,
            shortcut: false,
            no_shortcut: false,
            inject_fault: false,
        }
    }
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(Vec<ModelCheck>, String)> {
    if !(args.eps > 0.0 && args.tol > 0.0) {
        return Err(config_err!("eps and tol must be positive"));
    }
    let gc = GradcheckConfig {
        eps: args.eps,
        tolerance: args.tol,
        samples: args.n_params,
        ..GradcheckConfig::default()
    };
    let schedules: &[bool] = match (args.shortcut, args.no_shortcut) {
        (true, _) => &[true],
        (_, true) => &[false],
        _ => &[true, false],
    };
    let methods = match args.routing {
        Some(m) => vec![m.into()],
        None => vec![RoutingMethod::Attention, RoutingMethod::Fuzzy],
    };
    let mut text = String::new();
    if args.n_params == 0 {
        log::warn!("--n-params 0: nothing to check");
        text.push_str("warning: no parameters sampled; the check passes trivially\n");
    }
    let mut checks = Vec::new();
    for &shortcut in schedules {
        for &method in &methods {
            let spec = ArchitectureSpec::tiny().with_routing(method).with_shortcut(shortcut);
            let report = check_model(&spec, &gc, args.seed, args.inject_fault)?;
            let check = ModelCheck { method, shortcut, report };
            text.push_str(&format!(
                "{:<22} {} samples  max rel error {:.3e}  {}\n",
                check.label(),
                check.report.samples.len(),
                check.report.max_rel_error(),
                if check.report.passed() { "PASS" } else { "FAIL" }
            ));
            checks.push(check);
        }
    }
    Ok((checks, text))
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: &Command) -> Result<i32> {
    match command {
        Command::Train(a) => {
            let s = cmd_train(a)?;
            println!(
                "trained {} epochs; best validation accuracy {:.4} at epoch {}",
                s.epochs, s.best_val_accuracy, s.best_epoch
            );
            println!("run directory: {} ({METRICS_FILE}, best.ckpt, {LAST_CHECKPOINT}, {RESOLVED_CONFIG_FILE})", s.run_dir.display());
            Ok(0)
        }
        Command::Eval(a) => {
            let (r, out) = cmd_eval(a)?;
            println!("{} accuracy {:.4} on {} examples", serde_json::to_value(r.dataset).expect("enum").as_str().expect("string"), r.accuracy, r.examples);
            println!("report: {}", out.display());
            Ok(0)
        }
        Command::Cost(a) => {
            let (_, table) = cmd_cost(a)?;
            print!("{table}");
            Ok(0)
        }
        Command::Gradcheck(a) => {
            let (checks, text) = cmd_gradcheck(a)?;
            print!("{text}");
            let failed: Vec<String> = checks.iter().filter(|c| !c.report.passed()).map(ModelCheck::label).collect();
            if failed.is_empty() {
                Ok(0)
            } else {
                Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
    }
}
