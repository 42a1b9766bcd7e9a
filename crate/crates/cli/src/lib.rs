//! The `chromaformer` command line.
//!
//! Every command reads one JSON config or a set of input files, writes its
//! artifacts into an output directory and drops a `run_manifest.json` next to
//! them. Exit codes: 0 success, 1 failed check, 2 bad config or input, 3 I/O,
//! 4 numeric divergence.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use chromaformer::autodiff::FaultInjection;
use chromaformer::backbone::checkpoint;
use chromaformer::data::{
    generate_synthetic_region, read_fraction_table, split_audit, write_split_audit, Dataset,
    GeneratorConfig, Manifest, Split, SplitAudit,
};
use chromaformer::gradcheck::{run_suite, targets, Scope, TargetResult, THRESHOLD};
use chromaformer::plot::LineChart;
use chromaformer::scaling::{build_report, read_records, Entry, ScalingReport};
use chromaformer::train::{
    binomial_ci_halfwidth, evaluate, read_metrics_csv, train, write_metrics_csv, MetricsRecord,
    TrainConfig,
};
use chromaformer::{build_model, Family, ModelConfig};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const ENV_OUT_DIR: &str = "CHROMA_OUT_DIR";
pub const ENV_THREADS: &str = "CHROMA_THREADS";
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Core(#[from] chromaformer::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use chromaformer::Error as E;
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::Io(_) => 3,
                E::Divergence(_) | E::NonFinite { .. } => 4,
                E::Csv(c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => 3,
                _ => 2,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

/// Names the file a core I/O error came from.
fn at<T>(path: &Path, r: chromaformer::Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        chromaformer::Error::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other.into(),
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Parser)]
#[command(
    name = "chromaformer",
    version,
    about = "Multi-spectral segmentation: data, training, checks and reports"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Primitives,
    Sdm,
    Block,
    Model,
    All,
}

impl ScopeArg {
    fn scope(self) -> Option<Scope> {
        match self {
            ScopeArg::Primitives => Some(Scope::Primitives),
            ScopeArg::Sdm => Some(Scope::Sdm),
            ScopeArg::Block => Some(Scope::Block),
            ScopeArg::Model => Some(Scope::Model),
            ScopeArg::All => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum PlotKind {
    AccuracyCurves,
    LossMa,
    Scaling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic multi-band dataset.
    GenData {
        /// Generator config (JSON); defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-class fractions for each split and their pairwise chi-squared distances.
    SplitAudit {
        #[arg(
            long,
            conflicts_with = "fractions",
            required_unless_present = "fractions"
        )]
        manifest: Option<PathBuf>,
        /// A ready `class,train_frac,val_frac,test_frac` table instead of a dataset.
        #[arg(long)]
        fractions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes a checkpoint and a metrics CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Overall accuracy with a 95% interval, plus a confusion matrix.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        scope: ScopeArg,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Scale one primitive's pullback, as `op` or `op:factor`.
        #[arg(long)]
        inject_fault: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scaling coefficients per family, with charts.
    ScalingReport {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Line charts from metrics or run-record CSVs.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// One legend label per input; defaults to the file name.
        #[arg(long = "label")]
        labels: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::SplitAudit { .. } => "split-audit",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::ScalingReport { .. } => "scaling-report",
            Command::Plot { .. } => "plot",
        }
    }

    fn out_flag(&self) -> Option<&PathBuf> {
        match self {
            Command::GenData { out, .. }
            | Command::SplitAudit { out, .. }
            | Command::Train { out, .. }
            | Command::Eval { out, .. }
            | Command::Gradcheck { out, .. }
            | Command::ScalingReport { out, .. }
            | Command::Plot { out, .. } => out.as_ref(),
        }
    }
}

/// `--out` if given, else `$CHROMA_OUT_DIR/<command>`, else `runs/<command>`.
pub fn output_dir(cmd: &Command) -> PathBuf {
    if let Some(dir) = cmd.out_flag() {
        return dir.clone();
    }
    let root = std::env::var_os(ENV_OUT_DIR)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(cmd.name())
}

/// Caps the global rayon pool at `$CHROMA_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(ENV_THREADS) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config(format!(
            "{ENV_THREADS} must be a positive integer, got `{raw}`"
        ))
    })?;
    // A pool that already exists keeps its size.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// Everything needed to re-run one command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub code_version: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub wall_seconds: f64,
    pub timings: BTreeMap<String, f64>,
}

struct Run {
    command: &'static str,
    out: PathBuf,
    started: Instant,
    started_unix: u64,
    config: Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    timings: BTreeMap<String, f64>,
}

impl Run {
    fn start(command: &'static str, out: PathBuf) -> Result<Self> {
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        Ok(Self {
            command,
            out,
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            config: Value::Null,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn time<R>(&mut self, label: &str, f: impl FnOnce() -> R) -> R {
        let t = Instant::now();
        let r = f();
        self.timings
            .insert(label.to_string(), t.elapsed().as_secs_f64());
        r
    }

    fn finish(self) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config: self.config,
            seed: self.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix: self.started_unix,
            wall_seconds: self.started.elapsed().as_secs_f64(),
            timings: self.timings,
        };
        let path = self.out.join(RUN_MANIFEST);
        let body = serde_json::to_vec_pretty(&manifest).map_err(chromaformer::Error::from)?;
        fs::write(&path, body).map_err(io_err(&path))?;
        Ok(manifest)
    }
}

pub fn run(cli: Cli, stdout: &mut impl Write) -> Result<()> {
    let out = output_dir(&cli.command);
    match cli.command {
        Command::GenData { config, .. } => gen_data(config.as_deref(), out, stdout),
        Command::SplitAudit {
            manifest,
            fractions,
            ..
        } => split_audit_cmd(manifest.as_deref(), fractions.as_deref(), out, stdout),
        Command::Train { config, .. } => train_cmd(&config, out, stdout),
        Command::Eval {
            checkpoint,
            manifest,
            split,
            ..
        } => eval_cmd(&checkpoint, &manifest, split.into(), out, stdout),
        Command::Gradcheck {
            scope,
            seeds,
            inject_fault,
            ..
        } => gradcheck_cmd(scope, seeds, inject_fault.as_deref(), out, stdout),
        Command::ScalingReport { records, .. } => scaling_report_cmd(&records, out, stdout),
        Command::Plot {
            kind,
            inputs,
            labels,
            ..
        } => plot_cmd(kind, &inputs, &labels, out, stdout),
    }
}

macro_rules! say {
    ($w:expr, $($arg:tt)*) => {
        writeln!($w, $($arg)*).map_err(io_err(Path::new("<stdout>")))?
    };
}

fn gen_data(config: Option<&Path>, out: PathBuf, stdout: &mut impl Write) -> Result<()> {
    let mut run = Run::start("gen-data", out)?;
    let cfg: GeneratorConfig = match config {
        Some(p) => {
            run.inputs.push(p.to_path_buf());
            read_json(p)?
        }
        None => GeneratorConfig::default(),
    };
    cfg.validate()?;
    run.config = serde_json::to_value(&cfg).map_err(chromaformer::Error::from)?;
    run.seed = Some(cfg.seed);
    let region = run.time("generate", || generate_synthetic_region(&cfg))?;
    let dir = run.out.clone();
    let (path, manifest) = run.time("write", || Manifest::write_region(&region, &dir))?;
    run.outputs.push(path.clone());
    run.outputs.push(dir.join("tiles"));
    say!(
        stdout,
        "dataset {}: {} tiles, {} bands, {} classes",
        path.display(),
        manifest.tiles.len(),
        manifest.bands,
        manifest.num_classes()
    );
    for split in Split::ALL {
        say!(
            stdout,
            "  {:<5} {} tiles",
            split.as_str(),
            manifest.count(split)
        );
    }
    run.finish()?;
    Ok(())
}

fn split_audit_cmd(
    manifest: Option<&Path>,
    fractions: Option<&Path>,
    out: PathBuf,
    stdout: &mut impl Write,
) -> Result<()> {
    let mut run = Run::start("split-audit", out)?;
    let audit: SplitAudit = match (manifest, fractions) {
        (Some(m), None) => {
            run.inputs.push(m.to_path_buf());
            let ds = at(m, run.time("load", || Dataset::load(m)))?;
            split_audit(&ds)?
        }
        (None, Some(f)) => {
            run.inputs.push(f.to_path_buf());
            read_fraction_table(open(f)?)?
        }
        _ => {
            return Err(CliError::Config(
                "give exactly one of --manifest or --fractions".into(),
            ))
        }
    };
    run.config = json!({ "manifest": manifest, "fractions": fractions });
    let path = run.path("split_audit.csv");
    write_split_audit(create(&path)?, &audit)?;
    say!(stdout, "chi-squared train/val  {:.5}", audit.train_val);
    say!(stdout, "chi-squared train/test {:.5}", audit.train_test);
    say!(stdout, "chi-squared val/test   {:.5}", audit.val_test);
    run.finish()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Desk,
    Full,
}

/// A named preset, or a complete architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset {
        family: Family,
        variant: String,
        #[serde(default)]
        scale: Scale,
    },
    Explicit(ModelConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    /// Dataset manifest; relative paths resolve against the config's directory.
    pub dataset: PathBuf,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Parameter initialisation seed; `train.seed` when absent.
    #[serde(default)]
    pub init_seed: Option<u64>,
}

impl TrainJob {
    pub fn resolve_model(&self, bands: usize, classes: usize) -> Result<ModelConfig> {
        let cfg = match &self.model {
            ModelSpec::Preset {
                family,
                variant,
                scale,
            } => match (family, scale) {
                (Family::Chromaformer | Family::Swin, Scale::Desk) => {
                    ModelConfig::desk_scale(*family, variant, bands, classes)?
                }
                (Family::Chromaformer | Family::Swin, Scale::Full) => {
                    ModelConfig::full_scale(*family, variant, bands, classes)?
                }
                (f, _) => {
                    return Err(CliError::Config(format!(
                        "no presets for family {}; give a full model config",
                        f.as_str()
                    )))
                }
            },
            ModelSpec::Explicit(c) => c.clone(),
        };
        cfg.validate()?;
        if cfg.in_bands != bands || cfg.num_classes != classes {
            return Err(CliError::Config(format!(
                "model takes {} bands / {} classes, dataset has {bands} / {classes}",
                cfg.in_bands, cfg.num_classes
            )));
        }
        Ok(cfg)
    }
}

fn train_cmd(config: &Path, out: PathBuf, stdout: &mut impl Write) -> Result<()> {
    let mut run = Run::start("train", out)?;
    run.inputs.push(config.to_path_buf());
    let mut job: TrainJob = read_json(config)?;
    job.train.validate()?;
    if job.dataset.is_relative() {
        job.dataset = config.parent().unwrap_or(Path::new(".")).join(&job.dataset);
    }
    run.inputs.push(job.dataset.clone());
    let ds = at(
        &job.dataset,
        run.time("load", || Dataset::load(&job.dataset)),
    )?;
    let model_cfg = job.resolve_model(ds.manifest.bands, ds.manifest.num_classes())?;
    let init_seed = job.init_seed.unwrap_or(job.train.seed);
    job.model = ModelSpec::Explicit(model_cfg.clone());
    job.init_seed = Some(init_seed);
    run.config = serde_json::to_value(&job).map_err(chromaformer::Error::from)?;
    run.seed = Some(job.train.seed);

    let model = build_model(&model_cfg)?;
    let mut params = model.init_params::<f32>(init_seed);
    say!(
        stdout,
        "{} model, {} parameters, {} train / {} val tiles",
        model_cfg.family.as_str(),
        model.param_count(),
        ds.manifest.count(Split::Train),
        ds.manifest.count(Split::Val)
    );
    let (train_tiles, val_tiles) = (ds.split(Split::Train), ds.split(Split::Val));
    let report = run.time("train", || {
        train(
            &model,
            &mut params,
            &train_tiles,
            &val_tiles,
            &job.train,
            |r| {
                // progress only; a closed stdout must not abort training
                let _ = writeln!(stdout, "{}", format_epoch(r));
            },
        )
    })?;
    let metrics = run.path("metrics.csv");
    write_metrics_csv(create(&metrics)?, &report.records)?;
    let ckpt_dir = run.out.join("checkpoint");
    let ckpt = checkpoint::save(&ckpt_dir, &model_cfg, &params)?;
    run.outputs.push(ckpt.clone());
    say!(
        stdout,
        "{} steps; checkpoint {}",
        report.steps,
        ckpt.display()
    );
    run.finish()?;
    Ok(())
}

fn format_epoch(r: &MetricsRecord) -> String {
    let val = r
        .val_oa
        .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    format!(
        "epoch {:>3}  loss {:.4}  ma {:.4}  val_oa {val}  {:.1}s",
        r.epoch, r.loss, r.ma_loss, r.seconds
    )
}

fn eval_cmd(
    ckpt: &Path,
    manifest: &Path,
    split: Split,
    out: PathBuf,
    stdout: &mut impl Write,
) -> Result<()> {
    let mut run = Run::start("eval", out)?;
    run.inputs
        .extend([ckpt.to_path_buf(), manifest.to_path_buf()]);
    run.config = json!({ "checkpoint": ckpt, "manifest": manifest, "split": split.as_str() });
    let (model, params) = at(ckpt, checkpoint::load(ckpt))?;
    let ds = at(manifest, Dataset::load(manifest))?;
    let (k, bands) = (ds.manifest.num_classes(), ds.manifest.bands);
    if model.config.num_classes != k {
        return Err(CliError::Config(format!(
            "checkpoint predicts {} classes, dataset has {k}",
            model.config.num_classes
        )));
    }
    if model.config.in_bands != bands {
        return Err(CliError::Config(format!(
            "checkpoint takes {} bands, dataset has {bands}",
            model.config.in_bands
        )));
    }
    let tiles = ds.split(split);
    if tiles.is_empty() {
        return Err(CliError::Config(format!("split `{split}` has no tiles")));
    }
    let ev = run.time("evaluate", || evaluate(&model, &params, &tiles))?;
    let hw = binomial_ci_halfwidth(ev.overall_accuracy, ev.pixels)?;
    let cm = run.path("confusion.csv");
    ev.confusion
        .write_csv(create(&cm)?, &ds.manifest.class_names)?;
    let summary = run.path("eval.json");
    let body = json!({
        "split": split.as_str(),
        "overall_accuracy": ev.overall_accuracy,
        "ci_halfwidth": hw,
        "pixels": ev.pixels,
    });
    fs::write(&summary, body.to_string()).map_err(io_err(&summary))?;
    say!(
        stdout,
        "OA {:.4} ± {:.4} (N={})",
        ev.overall_accuracy,
        hw,
        ev.pixels
    );
    run.finish()?;
    Ok(())
}

/// `op` or `op:factor`; the factor defaults to 1.1.
pub fn parse_fault(spec: &str) -> Result<FaultInjection> {
    let (op, factor) = match spec.split_once(':') {
        Some((op, f)) => {
            let factor: f64 = f
                .parse()
                .map_err(|_| CliError::Config(format!("bad fault factor `{f}`")))?;
            (op, factor)
        }
        None => (spec, 1.1),
    };
    let known = targets(Some(Scope::Primitives));
    if !known.iter().any(|(_, name)| *name == op) {
        return Err(CliError::Config(format!(
            "unknown primitive `{op}` for fault injection"
        )));
    }
    if !factor.is_finite() {
        return Err(CliError::Config("fault factor must be finite".into()));
    }
    Ok(FaultInjection {
        op: op.to_string(),
        factor,
    })
}

fn gradcheck_cmd(
    scope: ScopeArg,
    seeds: u64,
    fault: Option<&str>,
    out: PathBuf,
    stdout: &mut impl Write,
) -> Result<()> {
    if seeds == 0 {
        return Err(CliError::Config("need at least one seed".into()));
    }
    let fault = fault.map(parse_fault).transpose()?;
    let mut run = Run::start("gradcheck", out)?;
    run.config = json!({
        "scope": format!("{scope:?}").to_lowercase(),
        "seeds": seeds,
        "inject_fault": fault.as_ref().map(|f| json!({ "op": f.op, "factor": f.factor })),
        "threshold": THRESHOLD,
    });
    let results = run.time("suite", || run_suite(scope.scope(), 0..seeds, fault))?;
    let csv_path = run.path("gradcheck.csv");
    write_gradcheck_csv(create(&csv_path)?, &results)?;
    say!(
        stdout,
        "{:<11} {:<22} {:>5} {:>7} {:>12}  result",
        "scope",
        "target",
        "seeds",
        "coords",
        "max_rel_err"
    );
    for r in &results {
        say!(
            stdout,
            "{:<11} {:<22} {:>5} {:>7} {:>12.3e}  {}",
            r.scope.as_str(),
            r.name,
            r.seeds,
            r.coords,
            r.max_rel_error,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    run.finish()?;
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name)
        .collect();
    if failed.is_empty() {
        say!(stdout, "all {} targets below {THRESHOLD:e}", results.len());
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn write_gradcheck_csv(w: impl Write, results: &[TargetResult]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let row = |out: &mut csv::Writer<_>, r: [String; 7]| {
        out.write_record(r).map_err(chromaformer::Error::from)
    };
    row(
        &mut out,
        [
            "scope",
            "target",
            "seeds",
            "coords",
            "max_rel_error",
            "worst_seed",
            "passed",
        ]
        .map(String::from),
    )?;
    for r in results {
        row(
            &mut out,
            [
                r.scope.to_string(),
                r.name.to_string(),
                r.seeds.to_string(),
                r.coords.to_string(),
                format!("{:e}", r.max_rel_error),
                r.worst_seed.to_string(),
                r.passed().to_string(),
            ],
        )?;
    }
    out.flush().map_err(io_err(Path::new("gradcheck.csv")))?;
    Ok(())
}

fn scaling_charts(report: &ScalingReport) -> (LineChart, LineChart) {
    let mut s = LineChart::new(
        "Scaling efficiency",
        "parameter factor P",
        "scaling coefficient S",
    )
    .log_x(true);
    let mut a =
        LineChart::new("Accuracy against size", "parameter factor P", "accuracy").log_x(true);
    for series in &report.series {
        if !series.scaling.is_empty() {
            s.push(&series.family, series.scaling.clone());
        }
        a.push(&series.family, series.accuracy.clone());
    }
    (s, a)
}

fn scaling_report_cmd(records: &Path, out: PathBuf, stdout: &mut impl Write) -> Result<()> {
    let mut run = Run::start("scaling-report", out)?;
    run.inputs.push(records.to_path_buf());
    run.config = json!({ "records": records });
    let recs = read_records(open(records)?)?;
    let report = build_report(&recs)?;
    let csv_path = run.path("scaling_report.csv");
    report.write_csv(create(&csv_path)?)?;
    let (s_chart, a_chart) = scaling_charts(&report);
    for (name, chart) in [("scaling.svg", s_chart), ("accuracy.svg", a_chart)] {
        if chart.series.iter().any(|s| !s.points.is_empty()) {
            let path = run.path(name);
            fs::write(&path, chart.to_svg()?).map_err(io_err(&path))?;
        }
    }
    for row in &report.rows {
        let s = match &row.entry {
            Entry::Baseline => "Baseline".to_string(),
            Entry::NotApplicable => "N/A".to_string(),
            Entry::Coefficient { s, .. } => format!("{s:.3}"),
            Entry::Undefined { note, .. } => format!("undefined ({note})"),
        };
        say!(
            stdout,
            "{:<14} {:<18} {s}",
            row.record.family,
            row.record.name
        );
    }
    run.finish()?;
    Ok(())
}

fn series_label(path: &Path, given: Option<&String>) -> String {
    if let Some(l) = given {
        return l.clone();
    }
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if stem == "metrics" {
        if let Some(parent) = path.parent().and_then(Path::file_name) {
            return parent.to_string_lossy().into_owned();
        }
    }
    stem
}

fn plot_cmd(
    kind: PlotKind,
    inputs: &[PathBuf],
    labels: &[String],
    out: PathBuf,
    stdout: &mut impl Write,
) -> Result<()> {
    if !labels.is_empty() && labels.len() != inputs.len() {
        return Err(CliError::Config(format!(
            "{} labels for {} inputs",
            labels.len(),
            inputs.len()
        )));
    }
    let mut run = Run::start("plot", out)?;
    run.inputs.extend(inputs.iter().cloned());
    let kind_name = kind
        .to_possible_value()
        .map(|v| v.get_name().to_string())
        .unwrap_or_default();
    run.config = json!({ "kind": kind_name, "inputs": inputs, "labels": labels });
    let chart = match kind {
        PlotKind::AccuracyCurves | PlotKind::LossMa => {
            let mut chart = if kind == PlotKind::LossMa {
                LineChart::new(
                    "Moving-average training loss",
                    "samples seen",
                    "loss (moving average)",
                )
                .log_x(true)
            } else {
                LineChart::new("Validation accuracy", "epoch", "overall accuracy")
            };
            for (i, path) in inputs.iter().enumerate() {
                let records = read_metrics_csv(open(path)?)?;
                let points: Vec<(f64, f64)> = match kind {
                    PlotKind::LossMa => records
                        .iter()
                        .map(|r| (r.samples_seen as f64, r.ma_loss))
                        .collect(),
                    _ => records
                        .iter()
                        .filter_map(|r| r.val_oa.map(|v| (r.epoch as f64, v)))
                        .collect(),
                };
                if points.is_empty() {
                    return Err(CliError::Config(format!(
                        "{}: no points to plot",
                        path.display()
                    )));
                }
                chart.push(&series_label(path, labels.get(i)), points);
            }
            chart
        }
        PlotKind::Scaling => {
            let mut recs = Vec::new();
            for path in inputs {
                recs.extend(read_records(open(path)?)?);
            }
            let (chart, _) = scaling_charts(&build_report(&recs)?);
            if chart.series.is_empty() {
                return Err(CliError::Config(
                    "no family has more than one member".into(),
                ));
            }
            chart
        }
    };
    let path = run.path(&format!("{kind_name}.svg"));
    fs::write(&path, chart.to_svg()?).map_err(io_err(&path))?;
    say!(
        stdout,
        "wrote {} ({} series)",
        path.display(),
        chart.series.len()
    );
    run.finish()?;
    Ok(())
}
