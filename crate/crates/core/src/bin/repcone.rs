use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use repcone::embed::{load_embeddings, save_embeddings, EmbeddingSet};
use repcone::experiment::{probe_tasks, stacked_test_sets, ExperimentConfig, ScenarioSource, TaskFiles};
use repcone::geometry::{cosine_pair_distribution, fit_cone_view, ConeFitConfig};
use repcone::learner::load_checkpoint;
use repcone::metrics::{rotation_between, topo_report, RotationTracker};
use repcone::probe::{encode_set, probe_cell, probe_timeline_from_log, ProbeTask};
use repcone::replay::{DirStore, NoObserver, ReplayInterval, RunLog, TrainObserver};
use repcone::synth::build_scenario;
use repcone::{Error, Result};

/// Cone geometry, replay and probing experiments on embedding sets.
#[derive(Parser)]
#[command(name = "repcone", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scenario as EMBV1 files plus ground truth.
    GenSynthetic(GenArgs),
    /// Fit the cone of one class.
    FitCone(FitConeArgs),
    /// Probe one checkpoint on one task.
    Probe(ProbeArgs),
    /// Train over the task sequence, saving checkpoints and a run log.
    TrainSeq(TrainArgs),
    /// Probe every checkpoint of a run on every task.
    Timeline(TimelineArgs),
    /// Representation-space metrics.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Histogram of cosines between two classes.
    Cosdist(CosdistArgs),
    /// Map an embedding set through a checkpoint's encoder.
    Encode(EncodeArgs),
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Topological-order coefficients between two row-aligned sets.
    Topo(TopoArgs),
    /// Cone rotation toward decoder columns between two checkpoints.
    Rotation(RotationArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let seed = self.seed.unwrap_or(config.seed);
        Ok(config.with_seed(seed))
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
}

#[derive(Args)]
struct FitConeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    class: u32,
    #[arg(long, default_value_t = 0.95)]
    coverage: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replay interval in examples, or "seq" for no replay.
    #[arg(long)]
    interval: Option<ReplayInterval>,
    /// Storage and replay rate.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Examples between checkpoints.
    #[arg(long)]
    cadence: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct TimelineArgs {
    #[command(flatten)]
    common: Common,
    /// Directory written by train-seq.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TopoArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    before: PathBuf,
    #[arg(long)]
    after: PathBuf,
    /// Neighbor counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    ns: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RotationArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    before: PathBuf,
    #[arg(long)]
    after: PathBuf,
    /// Labeled inputs whose encodings define the class cones.
    #[arg(long)]
    inputs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CosdistArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    class_a: u32,
    #[arg(long)]
    class_b: u32,
    #[arg(long)]
    samples: Option<u64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long, required_unless_present = "run", conflicts_with = "run")]
    ckpt: Option<PathBuf>,
    /// Directory written by train-seq; picks its final checkpoint, or the
    /// last one taken while `--task` trained.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long, requires = "run")]
    task: Option<usize>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<String> {
    match command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::FitCone(a) => fit_cone(a),
        Command::Probe(a) => probe(a),
        Command::TrainSeq(a) => train_seq(a),
        Command::Timeline(a) => timeline(a),
        Command::Metrics(MetricsCommand::Topo(a)) => topo(a),
        Command::Metrics(MetricsCommand::Rotation(a)) => rotation(a),
        Command::Cosdist(a) => cosdist(a),
        Command::Encode(a) => encode(a),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a report next to `<report>.config.json`, which records everything
/// that produced it.
fn write_report(path: &Path, contents: &str, provenance: Value) -> Result<()> {
    write(path, contents)?;
    let mut side = path.as_os_str().to_owned();
    side.push(".config.json");
    write(Path::new(&side), &serde_json::to_string_pretty(&provenance)?)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn gen_synthetic(a: GenArgs) -> Result<String> {
    let mut config = a.common.resolve()?;
    let out = a.out.unwrap_or_else(|| config.output_dir.clone());
    let ScenarioSource::Synthetic { spec } = &mut config.scenario else {
        return Err(Error::Validation("config does not describe a synthetic scenario".into()));
    };
    for class in spec.tasks.iter_mut().flat_map(|t| &mut t.classes) {
        class.train_count = a.train_per_class.unwrap_or(class.train_count);
        class.test_count = a.test_per_class.unwrap_or(class.test_count);
    }
    let spec = spec.clone();
    config.validate()?;
    let scenario = build_scenario(&spec)?;
    let written = scenario.write(&out)?;
    let rows: usize = scenario.tasks.iter().map(|t| t.train.len() + t.test.len()).sum();

    // A config pointing at the written files, for the commands that follow.
    let mut files = config.clone();
    files.scenario = ScenarioSource::Files {
        tasks: scenario
            .tasks
            .iter()
            .enumerate()
            .map(|(k, t)| TaskFiles {
                name: t.name.clone(),
                train: out.join(format!("task_{k}_train.emb")),
                test: out.join(format!("task_{k}_test.emb")),
            })
            .collect(),
    };
    files.output_dir = out.clone();
    write(&out.join("experiment.json"), &files.to_json()?)?;
    write(
        &out.join("gen-synthetic.config.json"),
        &serde_json::to_string_pretty(&json!({ "command": "gen-synthetic", "config": config }))?,
    )?;
    Ok(format!(
        "gen-synthetic: {} tasks, {} classes, {} rows, {} files in {}",
        scenario.tasks.len(),
        scenario.truth.len(),
        rows,
        written.len(),
        out.display()
    ))
}

fn fit_cone(a: FitConeArgs) -> Result<String> {
    let set = load_embeddings(&a.input)?;
    let view = set.class_view(a.class)?;
    let config = ConeFitConfig::default().with_coverage(a.coverage);
    let fit = fit_cone_view(&view, &config, None)?;
    let report = json!({
        "class": a.class,
        "rows": view.len(),
        "cone": fit.cone,
        "half_angle_deg": fit.cone.half_angle().to_degrees(),
        "peel_rounds": fit.peel_rounds,
    });
    write_report(
        &a.out,
        &serde_json::to_string_pretty(&report)?,
        json!({ "command": "fit-cone", "input": path_str(&a.input), "class": a.class, "cone": config }),
    )?;
    Ok(format!(
        "fit-cone: class {} axis fitted over {} of {} rows, aperture {:.6} ({:.3} deg)",
        a.class,
        fit.cone.kept_count,
        view.len(),
        fit.cone.aperture,
        fit.cone.half_angle().to_degrees()
    ))
}

fn probe(a: ProbeArgs) -> Result<String> {
    let config = a.common.resolve()?;
    config.probe.validate()?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let train = load_embeddings(&a.train)?;
    let test = load_embeddings(&a.test)?;
    let task = ProbeTask::Classes { train, test };
    let (p, o) = probe_cell(&ckpt, &task, &config.probe)?;
    let csv = format!("task_id,metric,probe_score,original_score\n{},accuracy,{p:.6},{o:.6}\n", task.name());
    write_report(
        &a.out,
        &csv,
        json!({
            "command": "probe",
            "checkpoint": path_str(&a.ckpt),
            "train": path_str(&a.train),
            "test": path_str(&a.test),
            "probe": config.probe,
        }),
    )?;
    Ok(format!("probe: {} probe {p:.4} original {o:.4}", task.name()))
}

fn train_seq(a: TrainArgs) -> Result<String> {
    let mut config = a.common.resolve()?;
    let t = &mut config.train;
    if let Some(i) = a.interval {
        t.schedule.interval = i;
        if i != ReplayInterval::Never && a.rate.is_none() && t.schedule.rate == 0.0 {
            t.schedule.rate = 0.01;
        }
    }
    if let Some(r) = a.rate {
        t.schedule.rate = r;
    }
    if let Some(lr) = a.lr {
        t.adam.learning_rate = lr;
    }
    if let Some(e) = a.epochs {
        t.epochs_per_task = e;
    }
    if let Some(c) = a.cadence {
        t.plan.cadence = c;
    }
    if let Some(b) = a.batch_size {
        t.plan.batch_size = b;
    }
    let out = a.out.unwrap_or_else(|| config.output_dir.clone());
    config.output_dir = out.clone();
    config.validate()?;

    let tasks = config.load_tasks()?;
    let mut store = DirStore::new(out.join("checkpoints"))?;
    let track = config.metrics.rotation && config.train.schedule.interval != ReplayInterval::Never;
    let mut tracker = if track {
        Some(RotationTracker::new(stacked_test_sets(&tasks)?, config.metrics.cone.clone()).from_task(1))
    } else {
        None
    };
    let observer: &mut dyn TrainObserver = match &mut tracker {
        Some(t) => t,
        None => &mut NoObserver,
    };
    let (_, log) = config.train(&tasks, &mut store, observer)?;
    write_report(
        &out.join("run_log.json"),
        &log.to_json()?,
        json!({ "command": "train-seq", "config": config }),
    )?;
    if let Some(t) = &tracker {
        let provenance = json!({ "command": "train-seq", "config": config });
        write_report(&out.join("rotation.csv"), &t.report.to_csv(), provenance.clone())?;
        write_report(&out.join("drift.csv"), &t.report.drift_csv(), provenance)?;
    }
    Ok(format!(
        "train-seq: {} tasks, {} steps, {} checkpoints, {} replay events, memory {} -> {}",
        log.tasks.len(),
        log.optimizer_steps,
        log.checkpoints.len(),
        log.replay_events.len(),
        log.memory_size,
        out.display()
    ))
}

fn timeline(a: TimelineArgs) -> Result<String> {
    let config = a.common.resolve()?;
    config.validate()?;
    let log = RunLog::load(a.run.join("run_log.json"))?;
    let tasks = config.load_tasks()?;
    let timeline = probe_timeline_from_log(
        &log,
        &a.run.join("checkpoints"),
        &probe_tasks(&tasks),
        &config.probe,
    )?;
    let out = a.out.unwrap_or_else(|| a.run.clone());
    write_report(
        &out.join("timeline.csv"),
        &timeline.to_csv(),
        json!({ "command": "timeline", "run": path_str(&a.run), "config": config }),
    )?;
    let last = log.checkpoints.last().map(|c| c.id).unwrap_or(0);
    let finals: Vec<String> = timeline
        .rows
        .iter()
        .filter(|r| r.checkpoint_id == last)
        .map(|r| format!("{} probe {:.4} original {:.4}", r.task_id, r.probe_score, r.original_score))
        .collect();
    Ok(format!(
        "timeline: {} cells; checkpoint {last}: {}",
        timeline.rows.len(),
        finals.join(", ")
    ))
}

fn topo(a: TopoArgs) -> Result<String> {
    let config = a.common.resolve()?;
    let ns = a.ns.unwrap_or_else(|| config.metrics.topo_ns.clone());
    if ns.is_empty() || ns.contains(&0) {
        return Err(Error::Validation("--ns needs positive neighbor counts".into()));
    }
    let before = load_embeddings(&a.before)?;
    let after = load_embeddings(&a.after)?;
    let report = topo_report(&before, &after, &ns, &config.metrics.cone)?;
    write_report(
        &a.out,
        &report.to_csv(),
        json!({
            "command": "metrics topo",
            "before": path_str(&a.before),
            "after": path_str(&a.after),
            "ns": ns,
            "cone": config.metrics.cone,
        }),
    )?;
    let mean = report.rows.iter().map(|r| r.pearson).sum::<f64>() / report.rows.len() as f64;
    Ok(format!("metrics topo: {} rows, mean coefficient {mean:.4}", report.rows.len()))
}

fn rotation(a: RotationArgs) -> Result<String> {
    let config = a.common.resolve()?;
    let before = load_checkpoint(&a.before)?;
    let after = load_checkpoint(&a.after)?;
    let inputs = load_embeddings(&a.inputs)?;
    let report = rotation_between(&before.model, &after.model, &inputs, &config.metrics.cone, 0)?;
    let provenance = json!({
        "command": "metrics rotation",
        "before": path_str(&a.before),
        "after": path_str(&a.after),
        "inputs": path_str(&a.inputs),
        "cone": config.metrics.cone,
    });
    write_report(&a.out, &report.to_csv(), provenance.clone())?;
    let stem = a.out.file_stem().unwrap_or_default().to_string_lossy();
    let drift = a.out.with_file_name(format!("{stem}_drift.csv"));
    write_report(&drift, &report.drift_csv(), provenance)?;
    let max_drift = report.rows.iter().map(|r| r.drift).fold(0.0, f64::max);
    let mean = report.rows.iter().map(|r| r.delta_zeta).sum::<f64>() / report.rows.len() as f64;
    Ok(format!(
        "metrics rotation: {} classes, mean delta_zeta {mean:.3e}, max drift {max_drift:.3e} rad",
        report.rows.len()
    ))
}

fn cosdist(a: CosdistArgs) -> Result<String> {
    let config = a.common.resolve()?;
    let samples = a.samples.unwrap_or(config.metrics.cosdist_samples);
    let bins = a.bins.unwrap_or(config.metrics.cosdist_bins);
    let set = load_embeddings(&a.input)?;
    let hist = cosine_pair_distribution(
        &set.class_view(a.class_a)?,
        &set.class_view(a.class_b)?,
        samples,
        bins,
        config.seed,
    )?;
    write_report(
        &a.out,
        &hist.to_csv(),
        json!({
            "command": "cosdist",
            "input": path_str(&a.input),
            "classes": [a.class_a, a.class_b],
            "samples": samples,
            "bins": bins,
            "seed": config.seed,
        }),
    )?;
    Ok(format!(
        "cosdist: classes {} and {}, {} samples, {:.3} of mass at cos >= 0.9",
        a.class_a,
        a.class_b,
        samples,
        hist.mass_within(0.9, 1.0)
    ))
}

fn run_checkpoint(run: &Path, task: Option<usize>) -> Result<PathBuf> {
    let log = RunLog::load(run.join("run_log.json"))?;
    let record = log
        .checkpoints
        .iter().rfind(|c| task.is_none_or(|t| c.task == t))
        .ok_or_else(|| Error::Validation(format!("run has no checkpoint for task {task:?}")))?;
    Ok(run.join("checkpoints").join(&record.location))
}

fn encode(a: EncodeArgs) -> Result<String> {
    let path = match (&a.ckpt, &a.run) {
        (Some(p), _) => p.clone(),
        (None, Some(run)) => run_checkpoint(run, a.task)?,
        (None, None) => return Err(Error::Validation("--ckpt or --run is required".into())),
    };
    let ckpt = load_checkpoint(&path)?;
    let set: EmbeddingSet = load_embeddings(&a.input)?;
    let encoded = encode_set(&ckpt.model.encoder, &set)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    save_embeddings(&encoded, &a.out)?;
    Ok(format!(
        "encode: {} rows, {} -> {} dims, wrote {}",
        encoded.len(),
        set.dim(),
        encoded.dim(),
        a.out.display()
    ))
}
