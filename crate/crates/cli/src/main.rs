//! `essd`: analyze, build, train, evaluate and benchmark detectors.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use essd_core::depth;
use essd_core::error::WeightFileError;
use essd_core::eval::{self, DetectConfig, EvalReport};
use essd_core::gradcheck;
use essd_core::graph::{Fusion, NetGraph, WeightStore};
use essd_core::model::{ModelSpec, ProfileKind};
use essd_core::train::{self, canonical_phase_plan, heldout_seed, synth_dataset, DatasetConfig};
use essd_core::{EvalError, GraphError, TrainError};

use config::RunConfig;

/// Process exit codes.
mod exit {
    pub const CONFIG: u8 = 2;
    pub const MISSING: u8 = 3;
    pub const INVALID: u8 = 4;
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(m: impl Into<String>) -> Self {
        Failure { code: exit::CONFIG, message: m.into() }
    }
    fn missing(m: impl Into<String>) -> Self {
        Failure { code: exit::MISSING, message: m.into() }
    }
    fn invalid(m: impl Into<String>) -> Self {
        Failure { code: exit::INVALID, message: m.into() }
    }
}

impl From<GraphError> for Failure {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::Descriptor(_) | GraphError::Config(_) => Failure::config(e.to_string()),
            _ => Failure::invalid(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Plan(_) | TrainError::Phase(_) | TrainError::UnknownLayer(_) => Failure::config(e.to_string()),
            TrainError::Graph(g) => g.into(),
            _ => Failure::invalid(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(_) => Failure::config(e.to_string()),
            EvalError::Graph(g) => g.into(),
            _ => Failure::invalid(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

#[derive(Parser)]
#[command(name = "essd", version, about = "Single-shot detectors with extension modules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Weighted average depth of each prediction source and their CV.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Analyze a graph descriptor file instead of a built-in model.
        #[arg(long)]
        descriptor: Option<PathBuf>,
    },
    /// Print the graph descriptor of a model.
    Build {
        #[command(flatten)]
        common: Common,
    },
    /// Run training phases on the synthetic shapes dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run a single phase (1, 2 or 3).
        #[arg(long, conflicts_with = "all_phases")]
        phase: Option<usize>,
        /// Run all phases in one go (the default).
        #[arg(long)]
        all_phases: bool,
        /// Divide every phase's iteration count by this factor.
        #[arg(long)]
        scale: Option<usize>,
        /// Weights produced by the previous phase.
        #[arg(long)]
        init_weights: Option<PathBuf>,
        /// Training images.
        #[arg(long)]
        n: Option<usize>,
    },
    /// mAP of a weight file on a synthetic split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Detections on a synthetic split as JSON lines.
    Detect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        score_thresh: Option<f64>,
    },
    /// Batch-1 latency of forward pass plus post-processing.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Timed runs.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        /// Seeds per op.
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Toy,
    Canonical300,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Sum,
    Prod,
    Concat,
}

#[derive(Args)]
struct Common {
    /// `ssd`, `essd`, or a variant name such as `ESSD-less`.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set)]
    extra_pred_conv: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (training: output directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Default)]
enum Split {
    #[default]
    Train,
    Heldout,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Train)]
    split: Split,
    /// Images to use (train split: defaults to the training set size).
    #[arg(long)]
    n: Option<usize>,
}

const HELDOUT_IMAGES: usize = 200;
const DEFAULT_WEIGHTS: &str = "weights_phase3.bin";

/// Fully resolved settings for one invocation.
struct Run {
    cfg: RunConfig,
    spec: ModelSpec,
    seed: u64,
    out: Option<PathBuf>,
}

fn resolve(common: &Common) -> Result<Run> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut spec = cfg.model.clone();
    if let Some(name) = &common.model {
        let named: ModelSpec = name.parse().map_err(|e: GraphError| Failure::config(e.to_string()))?;
        spec.variant = named.variant;
        spec.fusion = named.fusion;
        spec.extra_pred_conv = named.extra_pred_conv;
    }
    if let Some(f) = common.fusion {
        spec.fusion = match f {
            FusionArg::Sum => Fusion::Sum,
            FusionArg::Prod => Fusion::Prod,
            FusionArg::Concat => Fusion::Concat,
        };
    }
    if let Some(x) = common.extra_pred_conv {
        spec.extra_pred_conv = x;
    }
    if let Some(p) = common.profile {
        spec.profile = match p {
            ProfileArg::Toy => ProfileKind::Toy,
            ProfileArg::Canonical300 => ProfileKind::Canonical300,
        };
    }
    let seed = common.seed.or(cfg.seed).unwrap_or(cfg.train.seed);
    cfg.train.seed = seed;
    let out = common.out.clone().or_else(|| cfg.paths.out.clone());
    Ok(Run { cfg, spec, seed, out })
}

fn require_toy(spec: &ModelSpec, command: &str) -> Result<()> {
    if spec.profile != ProfileKind::Toy {
        return Err(Failure::config(format!("`{command}` needs the toy profile; canonical300 is topology-only (analyze, build)")));
    }
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::invalid(format!("writing {}: {e}", p.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()).map_err(|e| Failure::invalid(format!("stdout: {e}")))
        }
    }
}

fn with_newline(mut s: String) -> String {
    if !s.ends_with('\n') {
        s.push('\n');
    }
    s
}

fn load_weights(path: &Path) -> Result<WeightStore<f32>> {
    if !path.exists() {
        return Err(Failure::missing(format!("weight file {} not found", path.display())));
    }
    train::load_weights(path).map_err(|e| match e {
        WeightFileError::Io(io) => Failure::missing(format!("{}: {io}", path.display())),
        other => Failure::invalid(format!("{}: {other}", path.display())),
    })
}

fn analyze(common: &Common, descriptor: Option<&Path>) -> Result<()> {
    let run = resolve(common)?;
    let graph = match descriptor {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::missing(format!("{}: {e}", p.display())))?;
            NetGraph::from_json(&text)?
        }
        None => run.spec.trunk()?,
    };
    let report = depth::analyze(&graph).map_err(|e| Failure::invalid(e.to_string()))?;
    emit(run.out.as_deref(), &with_newline(report.to_json()))
}

fn build(common: &Common) -> Result<()> {
    let run = resolve(common)?;
    emit(run.out.as_deref(), &with_newline(run.spec.graph()?.to_json()))
}

#[derive(Serialize)]
struct TrainSummary {
    model: String,
    phases: Vec<usize>,
    iterations: usize,
    final_loss: Option<f64>,
    weights: PathBuf,
    log: PathBuf,
}

fn train_cmd(common: &Common, phase: Option<usize>, scale: Option<usize>, init_weights: Option<&Path>, n: Option<usize>) -> Result<()> {
    let mut run = resolve(common)?;
    require_toy(&run.spec, "train")?;
    if let Some(s) = scale {
        if s == 0 {
            return Err(Failure::config("--scale must be at least 1"));
        }
        run.cfg.train.plan = canonical_phase_plan().scale(s);
    }
    if let Some(n) = n {
        run.cfg.train.dataset = DatasetConfig { n_images: n, ..run.cfg.train.dataset };
    }
    let phases: Vec<usize> = match phase {
        Some(p) => {
            run.cfg.train.plan.phase(p).map_err(|e| Failure::config(e.to_string()))?;
            vec![p]
        }
        None => (1..=run.cfg.train.plan.phases.len()).collect(),
    };
    let dir = run.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let init_path = init_weights.map(Path::to_path_buf).or_else(|| run.cfg.paths.init_weights.clone());
    let init = match (phases[0], init_path) {
        (_, Some(p)) => Some(load_weights(&p)?),
        (1, None) => None,
        (p, None) => {
            let expected = dir.join(format!("weights_phase{}.bin", p - 1));
            if !expected.exists() {
                return Err(Failure::missing(format!(
                    "phase {p} resumes from phase {} weights: expected {} (or pass --init-weights)",
                    p - 1,
                    expected.display()
                )));
            }
            Some(load_weights(&expected)?)
        }
    };

    eprintln!("training {} phases {:?} on {} images, seed {}", run.spec.name(), phases, run.cfg.train.dataset.n_images, run.seed);
    let outcome = train::train(&run.spec, &run.cfg.train, &phases, init.as_ref())?;
    fs::create_dir_all(&dir).map_err(|e| Failure::invalid(format!("{}: {e}", dir.display())))?;
    let last = *phases.last().expect("non-empty");
    let weights = dir.join(format!("weights_phase{last}.bin"));
    let log = match phase {
        Some(p) => dir.join(format!("train_phase{p}.jsonl")),
        None => dir.join("train_log.jsonl"),
    };
    train::save_weights(&weights, &outcome.weights).map_err(|e| Failure::invalid(format!("{}: {e}", weights.display())))?;
    fs::write(&log, outcome.log_jsonl()).map_err(|e| Failure::invalid(format!("{}: {e}", log.display())))?;
    eprintln!("wrote {} and {}", weights.display(), log.display());
    let summary = TrainSummary {
        model: run.spec.name(),
        phases,
        iterations: outcome.log.len(),
        final_loss: outcome.log.last().map(|r| r.loss.total),
        weights,
        log,
    };
    emit(None, &with_newline(serde_json::to_string_pretty(&summary).expect("summary serializes")))
}

/// The requested split of the synthetic dataset.
fn dataset(run: &Run, data: &DataArgs) -> Vec<train::SynthSample> {
    let size = run.spec.input_size();
    match data.split {
        Split::Train => {
            let mut cfg = run.cfg.train.dataset;
            if let Some(n) = data.n {
                cfg.n_images = n;
            }
            train::synth_dataset_with(run.seed, &cfg, size)
        }
        Split::Heldout => synth_dataset(heldout_seed(run.seed), data.n.unwrap_or(HELDOUT_IMAGES), size),
    }
}

fn weights_path(run: &Run, explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).or_else(|| run.cfg.paths.weights.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_WEIGHTS))
}

fn eval_cmd(common: &Common, data: &DataArgs) -> Result<()> {
    let run = resolve(common)?;
    require_toy(&run.spec, "eval")?;
    let weights = load_weights(&weights_path(&run, data.weights.as_deref()))?;
    let graph = run.spec.graph()?;
    let anchors = run.spec.anchors().map_err(|e| Failure::config(e.to_string()))?;
    let samples = dataset(&run, data);
    let threads = eval::threads_from_env();
    eprintln!("evaluating {} on {} images with {threads} thread(s)", run.spec.name(), samples.len());
    let report: EvalReport = eval::evaluate(&graph, &weights, &anchors, &samples, &run.cfg.eval, threads)?;
    eprintln!("mAP@{}: {:.4}", report.iou_thresh, report.map);
    emit(run.out.as_deref(), &with_newline(report.to_json()))
}

fn detect_cmd(common: &Common, data: &DataArgs, score_thresh: Option<f64>) -> Result<()> {
    let run = resolve(common)?;
    require_toy(&run.spec, "detect")?;
    let weights = load_weights(&weights_path(&run, data.weights.as_deref()))?;
    let graph = run.spec.graph()?;
    let anchors = run.spec.anchors().map_err(|e| Failure::config(e.to_string()))?;
    let mut cfg: DetectConfig = run.cfg.eval.detect;
    if let Some(t) = score_thresh {
        cfg.score_thresh = t;
    }
    let samples = dataset(&run, data);
    let dets = eval::detect_all(&graph, &weights, &anchors, &samples, &cfg, eval::threads_from_env())?;
    eprintln!("{} detections on {} images", dets.len(), samples.len());
    emit(run.out.as_deref(), &eval::detections_jsonl(&dets))
}

fn bench_cmd(common: &Common, weights: Option<&Path>, n: Option<usize>, warmup: Option<usize>) -> Result<()> {
    let run = resolve(common)?;
    require_toy(&run.spec, "bench")?;
    let graph = run.spec.graph()?;
    let explicit = weights.map(Path::to_path_buf).or_else(|| run.cfg.paths.weights.clone());
    let store = match explicit {
        Some(p) => load_weights(&p)?,
        None => {
            eprintln!("no --weights given; timing freshly initialized weights");
            use rand::SeedableRng;
            WeightStore::init(&graph, &mut rand_chacha::ChaCha8Rng::seed_from_u64(run.seed))
        }
    };
    let anchors = run.spec.anchors().map_err(|e| Failure::config(e.to_string()))?;
    let image = synth_dataset(heldout_seed(run.seed), 1, run.spec.input_size()).remove(0).image;
    let report = eval::bench(
        &graph,
        &store,
        &anchors,
        &image,
        &run.cfg.eval.detect,
        warmup.unwrap_or(run.cfg.bench.n_warmup),
        n.unwrap_or(run.cfg.bench.n_timed),
    )?;
    emit(run.out.as_deref(), &with_newline(serde_json::to_string_pretty(&report).expect("report serializes")))
}

fn gradcheck_cmd(n: usize, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    if n == 0 {
        return Err(Failure::config("--n must be at least 1"));
    }
    let base = seed.unwrap_or(0);
    let seeds: Vec<u64> = (base..base + n as u64).collect();
    let rows = gradcheck::op_suite(&seeds).map_err(|e| Failure::invalid(e.to_string()))?;
    emit(out, &gradcheck::format_table(&rows))?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::invalid(format!("gradient check failed for {failed:?}")))
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Analyze { common, descriptor } => analyze(common, descriptor.as_deref()),
        Command::Build { common } => build(common),
        Command::Train { common, phase, all_phases: _, scale, init_weights, n } => {
            train_cmd(common, *phase, *scale, init_weights.as_deref(), *n)
        }
        Command::Eval { common, data } => eval_cmd(common, data),
        Command::Detect { common, data, score_thresh } => detect_cmd(common, data, *score_thresh),
        Command::Bench { common, weights, n, warmup } => bench_cmd(common, weights.as_deref(), *n, *warmup),
        Command::Gradcheck { n, seed, out } => gradcheck_cmd(*n, *seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(exit::CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
