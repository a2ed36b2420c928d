use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use stressad_core::detection::{
    detect, score_vitals, write_detection_csv, Calibration, ThresholdSpec,
};
use stressad_core::eval::{
    ablate_sampling, confusion, dunn_pooled, dunn_posthoc, extract, friedman_test, load_labels, point_adjust, Adjustment,
    MethodScoreTable, PipelineConfig,
};
use stressad_core::model::{ModelConfig, ModelState};
use stressad_core::signal::{
    generate_synthetic, load_signal, load_truth_csv, write_signal_csv, write_signal_raw_f32, write_truth_csv,
    GeneratorConfig, SignalFormat, SignalKind,
};
use stressad_core::training::{
    load_checkpoint, parse_run_config, save_checkpoint, train, Checkpoint, TrainConfig, TrainMode,
};
use stressad_core::vitals::{load_vitals_csv, make_windows, write_vitals_csv, Normalizer};

#[derive(Parser)]
#[command(name = "stressad", version, about = "Stress detection from ECG/BVP as anomaly detection")]
struct Cli {
    /// Seed for generation, initialisation and training.
    #[arg(long, global = true, env = "STRESSAD_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic recording and its ground truth.
    Synth(SynthArgs),
    /// Detect beats and compute HR/HRV series.
    Extract(ExtractArgs),
    /// Train a reconstruction model on a vitals series.
    Train(TrainArgs),
    /// Score a vitals series and label anomalies.
    Detect(DetectArgs),
    /// Compare predicted labels with true labels.
    Eval(EvalArgs),
    /// Friedman and Dunn tests over a method-by-dataset score table.
    Stats(StatsArgs),
    /// F1 across vitals sampling intervals.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Generator settings as `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output waveform.
    #[arg(long, alias = "out-signal")]
    out: PathBuf,
    /// Output ground truth CSV (`kind,start_s,end_s`).
    #[arg(long, alias = "out-truth")]
    truth: PathBuf,
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Args)]
struct SignalArgs {
    #[arg(long, alias = "in")]
    signal: PathBuf,
    #[arg(long, default_value = "csv")]
    format: String,
    /// Sampling rate; needed for raw streams and value-only CSVs.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long, default_value = "ecg")]
    kind: String,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    input: SignalArgs,
    #[arg(long, default_value_t = 10.0)]
    step: f64,
    #[arg(long, default_value_t = 60.0)]
    lookback: f64,
    /// Ground truth; adds a `label` column.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    vitals: PathBuf,
    /// Model and training settings as `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch losses as CSV.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 60.0)]
    lookback: f64,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vitals: PathBuf,
    /// Vitals CSV whose scores set the thresholds, or `self`.
    #[arg(long, default_value = "self")]
    calib: String,
    #[arg(long, default_value_t = 3.0)]
    low: f64,
    #[arg(long, default_value_t = 97.0)]
    high: f64,
    /// Only flag scores above the high threshold.
    #[arg(long)]
    one_sided: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60.0)]
    lookback: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// CSV with a `label` column.
    #[arg(long)]
    pred: PathBuf,
    /// CSV with a `label` column.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    point_adjust: bool,
}

#[derive(Args)]
struct StatsArgs {
    /// Method-by-dataset CSV; the bundled F1 table when omitted.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, default_value = "UniTS")]
    control: String,
    /// Comma-separated subset of methods.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long, default_value = "none")]
    adjust: String,
    /// `friedman` (per-dataset ranks) or `pooled` (joint ranks) for the Dunn test.
    #[arg(long, default_value = "friedman")]
    ranks: String,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    input: SignalArgs,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,20,30,60")]
    intervals: Vec<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 60.0)]
    lookback: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Bad flag values or combinations: exit code 1.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

fn parse_flag<T: std::str::FromStr>(name: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().or_else(|e| usage(format!("--{name}: {e}")))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn run_config(path: Option<&Path>) -> Result<(ModelConfig, TrainConfig)> {
    match path {
        Some(p) => Ok(parse_run_config(&read_text(p)?)?),
        None => Ok((ModelConfig::default(), TrainConfig::default())),
    }
}

fn load_input(args: &SignalArgs) -> Result<stressad_core::signal::RawSignal> {
    let format: SignalFormat = parse_flag("format", &args.format)?;
    let kind: SignalKind = parse_flag("kind", &args.kind)?;
    Ok(load_signal(&args.signal, format, args.rate, kind)?)
}

fn synth(args: SynthArgs, seed: Option<u64>) -> Result<()> {
    let format: SignalFormat = parse_flag("format", &args.format)?;
    let mut cfg = match &args.config {
        Some(p) => GeneratorConfig::parse_kv(&read_text(p)?)?,
        None => GeneratorConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (signal, truth) = generate_synthetic(&cfg)?;
    match format {
        SignalFormat::Csv => write_signal_csv(&signal, &args.out)?,
        SignalFormat::RawF32 => write_signal_raw_f32(&signal, &args.out)?,
    }
    write_truth_csv(&truth, &args.truth)?;
    println!(
        "{} samples at {} Hz, {} beats, {} stress episodes",
        signal.len(),
        signal.rate_hz(),
        truth.beat_times.len(),
        truth.stress_intervals.len()
    );
    Ok(())
}

fn extract_cmd(args: ExtractArgs) -> Result<()> {
    let signal = load_input(&args.input)?;
    let mut vitals = extract(&signal, args.step, args.lookback)?;
    if let Some(t) = &args.truth {
        vitals = vitals.with_truth(&load_truth_csv(t)?);
    }
    write_vitals_csv(&vitals, &args.out)?;
    println!("{} vitals points, step {} s", vitals.len(), vitals.step_s);
    Ok(())
}

fn train_cmd(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let (mut model_cfg, mut train_cfg) = run_config(args.config.as_deref())?;
    if let Some(m) = &args.mode {
        train_cfg.mode = parse_flag::<TrainMode>("mode", m)?;
    }
    if let Some(s) = seed {
        model_cfg.seed = s;
        train_cfg.seed = s;
    }
    let vitals = load_vitals_csv(&args.vitals, args.lookback)?;
    let (init, normalizer) = match &args.init {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            let norm = ckpt.normalizer.clone();
            (ckpt.state, norm)
        }
        None => (ModelState::init(model_cfg)?, None),
    };
    let windows = make_windows(&vitals, init.config.window_len)?;
    let normalizer = normalizer.unwrap_or_else(|| {
        let clean: Vec<usize> = match &windows.labels {
            Some(l) => (0..windows.len()).filter(|&i| !l[i]).collect(),
            None => (0..windows.len()).collect(),
        };
        Normalizer::fit(&windows.select(&clean))
    });
    let (state, report) = train(&normalizer.apply(&windows), &train_cfg, init)?;
    save_checkpoint(
        &args.out,
        &Checkpoint {
            state,
            normalizer: Some(normalizer),
        },
    )?;
    match &args.report {
        Some(p) => report.write_csv(p)?,
        None => print!("{}", report.to_csv()),
    }
    println!("best epoch {} after {} steps", report.best_epoch, report.steps);
    Ok(())
}

fn detect_cmd(args: DetectArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let normalizer = ckpt
        .normalizer
        .clone()
        .unwrap_or_else(|| Normalizer::identity(ckpt.state.config.n_vars));
    let vitals = load_vitals_csv(&args.vitals, args.lookback)?;
    let mut spec = ThresholdSpec {
        low_pct: args.low,
        high_pct: args.high,
        two_sided: !args.one_sided,
        ..Default::default()
    };
    if let Err(e) = spec.validate() {
        return usage(e.to_string());
    }
    let calib = if args.calib == "self" {
        spec.calibration = Calibration::SelfScores;
        None
    } else {
        let cv = load_vitals_csv(Path::new(&args.calib), args.lookback)?;
        Some(score_vitals(&ckpt.state, &normalizer, &cv)?)
    };
    let result = detect(&ckpt.state, &normalizer, &vitals, &spec, calib.as_ref())?;
    write_detection_csv(&result, &vitals, &args.out)?;
    println!(
        "{} of {} points flagged ({:.1}%), tau_low {:.6}, tau_high {:.6}",
        result.anomalies.len(),
        result.labels.len(),
        100.0 * result.anomaly_fraction(),
        result.tau_low,
        result.tau_high
    );
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let truth = load_labels(&args.truth)?;
    let mut pred = load_labels(&args.pred)?;
    if args.point_adjust {
        pred = point_adjust(&pred, &truth)?;
    }
    let c = confusion(&pred, &truth)?;
    println!("F1={:?} FPR={:?} FNR={:?}", c.f1(), c.fpr(), c.fnr());
    println!("tp={} fp={} tn={} fn={}", c.tp, c.fp, c.tn, c.fn_);
    Ok(())
}

fn stats_cmd(args: StatsArgs) -> Result<()> {
    let adjust: Adjustment = parse_flag("adjust", &args.adjust)?;
    let mut table = match &args.table {
        Some(p) => MethodScoreTable::load_csv(p)?,
        None => MethodScoreTable::reference(),
    };
    if !args.methods.is_empty() {
        let names: Vec<&str> = args.methods.iter().map(String::as_str).collect();
        table = table.subset(&names)?;
    }
    let f = friedman_test(&table)?;
    println!(
        "friedman: statistic={:.4} df={} p={:.4e} ({} methods, {} datasets)",
        f.statistic,
        f.df,
        f.p_value,
        table.methods.len(),
        table.datasets.len()
    );
    for (m, r) in table.methods.iter().zip(&f.mean_ranks) {
        println!("  rank {r:.3}  {m}");
    }
    println!("dunn vs {}:", args.control);
    let dunn = match args.ranks.as_str() {
        "friedman" => dunn_posthoc(&table, &args.control, adjust)?,
        "pooled" => dunn_pooled(&table, &args.control, adjust)?,
        other => return usage(format!("--ranks: unknown scheme {other:?}")),
    };
    for d in dunn {
        println!("  {:<12} z={:+.4} p={:.4e}", d.method, d.z, d.p_value);
    }
    Ok(())
}

fn ablate_cmd(args: AblateArgs, seed: Option<u64>) -> Result<()> {
    let (mut model, mut train_cfg) = run_config(args.config.as_deref())?;
    if let Some(s) = seed {
        model.seed = s;
        train_cfg.seed = s;
    }
    let signal = load_input(&args.input)?;
    let truth = load_truth_csv(&args.truth)?;
    let cfg = PipelineConfig {
        lookback_s: args.lookback,
        model,
        train: train_cfg,
        ..Default::default()
    };
    let report = ablate_sampling(&signal, &truth, &args.intervals, &cfg)?;
    report.write_csv(&args.out)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a, cli.seed),
        Command::Extract(a) => extract_cmd(a),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::Detect(a) => detect_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Stats(a) => stats_cmd(a),
        Command::Ablate(a) => ablate_cmd(a, cli.seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("usage error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
