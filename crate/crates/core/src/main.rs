use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use efclip::data::{self, few_shot_sample, ef_class, Manifest, Split, SplitCounts, SyntheticConfig};
use efclip::diffcore::RegressionKind;
use efclip::harness::{
    self, ablate, evaluate, gradcheck_all, load_checkpoint, named_grid, save_checkpoint, write_metrics,
    GridPoint, MetricsRow, Model, Precision, TrainConfig, GRADCHECK_TOLERANCE,
};
use efclip::mfl::AggregatorKind;
use efclip::ordinal::BinScheme;
use efclip::{Error, Result};

const CONFIG_FILE: &str = "config.json";
const CHECKPOINT_FILE: &str = "model.efk";

#[derive(Parser)]
#[command(name = "efclip", version, about = "Few-shot ejection-fraction regression on echo-like videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    SynthGen(SynthArgs),
    /// Train one configuration and score it on TEST.
    Train(TrainArgs),
    /// Score a trained model on one split.
    Eval(EvalArgs),
    /// Train and score a grid of configurations over several seeds.
    Ablate(AblateArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write the few-shot TRAIN subset of a manifest.
    FewshotSplit(FewshotArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// TRAIN clips per integer EF class.
    #[arg(long, default_value_t = 1)]
    clips_per_class: usize,
    #[arg(long, default_value_t = 1)]
    val_per_class: usize,
    #[arg(long, default_value_t = 3)]
    test_per_class: usize,
    #[arg(long, default_value_t = 20)]
    ef_min: u32,
    #[arg(long, default_value_t = 80)]
    ef_max: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    cycle_period: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Smallest end-diastolic cavity area as a fraction of the frame.
    #[arg(long)]
    eda_min: Option<f64>,
    #[arg(long)]
    eda_max: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

/// Per-flag overrides applied on top of `--config`.
#[derive(Args, Default)]
struct Overrides {
    /// JSON training config; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    aggregator: Option<String>,
    #[arg(long, value_enum)]
    echozoom: Option<OnOff>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    bin_scheme: Option<String>,
    #[arg(long)]
    reg_loss: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, value_parser = ["1", "2", "4", "8"])]
    shots: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip_length: Option<usize>,
    #[arg(long)]
    clip_stride: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    precision: Option<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_json_file(p).map_err(|e| match e {
                Error::Json(j) => Error::Validation(format!("{}: {j}", p.display())),
                other => other,
            })?,
            None => TrainConfig::default(),
        };
        if let Some(a) = &self.aggregator {
            cfg.aggregator = a.parse::<AggregatorKind>().map_err(to_validation)?;
        }
        if let Some(z) = self.echozoom {
            cfg.echozoom = matches!(z, OnOff::On);
        }
        if let Some(k) = self.bins {
            cfg.bins = k;
        }
        if let Some(s) = &self.bin_scheme {
            cfg.bin_scheme = BinScheme::parse(s).map_err(to_validation)?;
        }
        if let Some(r) = &self.reg_loss {
            cfg.reg_loss = RegressionKind::parse(r).map_err(to_validation)?;
        }
        if let Some(t) = self.temperature {
            cfg.temperature = t;
        }
        if let Some(s) = &self.shots {
            cfg.shots = Some(s.parse().expect("restricted by clap"));
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.learning_rate = lr;
        }
        if let Some(n) = self.clip_length {
            cfg.clip_length = n;
        }
        if let Some(n) = self.clip_stride {
            cfg.clip_stride = n;
        }
        if let Some(n) = self.batch_size {
            cfg.batch_size = n;
        }
        if let Some(r) = self.resolution {
            cfg.resolution = r;
        }
        if let Some(p) = &self.precision {
            cfg.precision = match p.as_str() {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                _ => return Err(Error::Validation(format!("precision must be f32 or f64, got `{p}`"))),
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn to_validation(e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Validation(m),
        other => other,
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (manifest plus clip files).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the config and checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    setting: String,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    setting: String,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Built-in axis: modules, frames, mfl, loss or aggregation.
    #[arg(long, conflicts_with = "grid")]
    axis: Option<String>,
    /// JSON list of `{"setting": ..., "overrides": {...}}` grid points.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

#[derive(Args)]
struct FewshotArgs {
    /// Manifest CSV (a synthetic FileList.csv or an EchoNet-Dynamic FileList).
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_parser = ["1", "2", "4", "8"])]
    shots: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the subset manifest; counts are always printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn synth_gen(a: &SynthArgs) -> Result<()> {
    let mut cfg = SyntheticConfig::default();
    if let Some(r) = a.resolution {
        cfg.resolution = r;
    }
    if let Some(t) = a.frames {
        cfg.total_frames = t;
    }
    if let Some(p) = a.cycle_period {
        cfg.cycle_period = p;
    }
    if let Some(s) = a.noise_sigma {
        cfg.noise_sigma = s;
    }
    if let Some(v) = a.eda_min {
        cfg.eda_fraction[0] = v;
    }
    if let Some(v) = a.eda_max {
        cfg.eda_fraction[1] = v;
    }
    let counts = SplitCounts {
        train: a.clips_per_class,
        val: a.val_per_class,
        test: a.test_per_class,
    };
    let ds = data::synth_dataset(&cfg, counts, a.ef_min, a.ef_max, a.seed)?;
    data::write_dataset(&a.out, &ds)?;
    println!(
        "wrote {} clips ({} train, {} val, {} test) to {}",
        ds.clips.len(),
        ds.clips_in(Split::Train).len(),
        ds.clips_in(Split::Val).len(),
        ds.clips_in(Split::Test).len(),
        a.out.display()
    );
    Ok(())
}

fn maybe_write_metrics(path: &Option<PathBuf>, rows: &[MetricsRow]) -> Result<()> {
    if let Some(p) = path {
        write_metrics(p, rows)?;
    }
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = a.overrides.resolve()?;
    let ds = data::read_dataset(&a.data)?;
    let (report, model) = harness::run(&cfg, &ds)?;
    for e in &report.history {
        match e.val_mae {
            Some(v) => println!("epoch {:3}  lr {:.3e}  loss {:.4}  val_mae {:.3}", e.epoch, e.learning_rate, e.train_loss, v),
            None => println!("epoch {:3}  lr {:.3e}  loss {:.4}", e.epoch, e.learning_rate, e.train_loss),
        }
    }
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join(CONFIG_FILE), cfg.to_json()?)?;
    save_checkpoint(&a.out.join(CHECKPOINT_FILE), &model.store)?;
    println!(
        "best epoch {}  test mae {:.4}  rmse {:.4}",
        report.best_epoch, report.evaluation.mae, report.evaluation.rmse
    );
    maybe_write_metrics(&a.metrics_out, &[report.metrics_row(&a.setting, &cfg)])
}

fn load_model(dir: &Path) -> Result<Model<f64>> {
    let cfg = TrainConfig::from_json_file(&dir.join(CONFIG_FILE))?;
    let mut model = Model::<f64>::new(&cfg)?;
    let stored = load_checkpoint::<f64>(&dir.join(CHECKPOINT_FILE))?;
    model.store.load_from(&stored)?;
    Ok(model)
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let model = load_model(&a.model)?;
    let ds = data::read_dataset(&a.data)?;
    let clips = ds.clips_in(split);
    if clips.is_empty() {
        return Err(Error::Validation(format!("split {split} is empty")));
    }
    let start = std::time::Instant::now();
    let ev = evaluate(&model, &clips)?;
    println!("{split}: {} clips  mae {:.4}  rmse {:.4}", clips.len(), ev.mae, ev.rmse);
    let wall = if model.cfg.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
    let row = MetricsRow::run(&a.setting, model.cfg.shots, model.cfg.seed, ev.mae, ev.rmse, wall);
    maybe_write_metrics(&a.metrics_out, &[row])
}

fn ablate_cmd(a: &AblateArgs) -> Result<i32> {
    let base = a.overrides.resolve()?;
    let grid: Vec<GridPoint> = match (&a.axis, &a.grid) {
        (Some(axis), None) => named_grid(axis)?,
        (None, Some(path)) => serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?,
        _ => return Err(Error::Validation("pass exactly one of --axis or --grid".into())),
    };
    if a.seeds.is_empty() {
        return Err(Error::Validation("at least one seed required".into()));
    }
    let ds = data::read_dataset(&a.data)?;
    let out = ablate(&base, &grid, &a.seeds, &ds, a.workers)?;
    for r in &out.rows {
        println!("{:24} shots {:3} seed {:8} mae {:>24} rmse {:>24}", r.setting, r.shots, r.seed, r.mae, r.rmse);
    }
    maybe_write_metrics(&a.metrics_out, &out.rows)?;
    for f in &out.failures {
        eprintln!("failed: {} seed {}: {}", f.setting, f.seed, f.error);
    }
    Ok(out.failures.first().map_or(0, |f| f.exit_code))
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<i32> {
    let reports = gradcheck_all(a.seeds)?;
    let mut failed = 0;
    for r in &reports {
        let ok = r.passed(GRADCHECK_TOLERANCE);
        failed += usize::from(!ok);
        println!(
            "{:4} {:28} max_rel_error {:.3e}  coords {:5}  worst {:?}",
            if ok { "ok" } else { "FAIL" },
            r.op_name,
            r.max_rel_error,
            r.coordinates_checked,
            r.worst_coordinate
        );
    }
    println!("{} checks, {failed} above {GRADCHECK_TOLERANCE:e}", reports.len());
    Ok(if failed > 0 { 3 } else { 0 })
}

fn fewshot_cmd(a: &FewshotArgs) -> Result<()> {
    let manifest = Manifest::read(&a.manifest)?;
    let n: usize = a.shots.parse().expect("restricted by clap");
    let subset = few_shot_sample(&manifest, n, a.seed)?;
    let classes: std::collections::BTreeSet<u32> = subset.rows().iter().map(|r| ef_class(r.ef)).collect();
    println!("{n}-shot: {} rows over {} classes", subset.len(), classes.len());
    if let Some(out) = &a.out {
        subset.write(out)?;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::SynthGen(a) => synth_gen(a).map(|_| 0),
        Command::Train(a) => train_cmd(a).map(|_| 0),
        Command::Eval(a) => eval_cmd(a).map(|_| 0),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::FewshotSplit(a) => fewshot_cmd(a).map(|_| 0),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
