use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use serde::Serialize;

use stableflow::ccnf::{StableCcnfParams, DEFAULT_RATE_RATIO};
use stableflow::data::{generate, read_points_csv, write_dataset, DatasetName, Rng};
use stableflow::dynamics::{
    field_grid, push_forward_baseline, push_forward_stable, stability_eval, write_trajectories, DEFAULT_DT,
};
use stableflow::loss::EmpiricalTarget;
use stableflow::model::{Model, ModelKind};
use stableflow::train::{load_checkpoint, save_checkpoint, train, Scale, TrainConfig};
use stableflow::verify::{run_suite, Suite};
use stableflow::Error;

const OK: u8 = 0;
const VERIFY_FAILED: u8 = 1;
const USAGE: u8 = 2;
const NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "stableflow", version, about = "Stable autonomous flow matching experiments")]
struct Cli {
    /// Overrides the seed of the command (or of the training config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Omit wall-clock fields so repeated runs write byte-identical files.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic 2-D dataset as CSV plus a JSON sidecar.
    Generate(GenerateArgs),
    /// Train a model and write checkpoint, loss history and manifest.
    Train(TrainArgs),
    /// Integrate samples from a checkpoint and write trajectories.
    Sample(SampleArgs),
    /// Evaluate a checkpoint's field on a regular 2-D grid.
    Grid(GridArgs),
    /// Run property suites; exit 1 if any check fails.
    Verify(VerifyArgs),
    /// Push samples to t = 1.5 and report stability diagnostics.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value = "moons")]
    dataset: String,
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config mirroring the TrainConfig fields; defaults to a preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config is given.
    #[arg(long, default_value = "desk")]
    scale: String,
    /// `stable` (potential) or `ot` (baseline) preset.
    #[arg(long, default_value = "stable")]
    model: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    t_end: f64,
    #[arg(long, default_value_t = DEFAULT_DT)]
    dt: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `z1_min,z1_max,z2_min,z2_max`
    #[arg(long, value_delimiter = ',', default_value = "-3,3,-3,3", allow_hyphen_values = true)]
    bounds: Vec<f64>,
    /// `nx,ny`
    #[arg(long, value_delimiter = ',', default_value = "25,25")]
    resolution: Vec<usize>,
    /// τ for stable models, t for the baseline.
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    slice: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value = "all")]
    suite: String,
    /// Pseudo-time parameters (JSON) to check instead of the defaults.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Directory for `verify.json`; the report goes to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A `z1,z2` CSV, or `moons` / `circles` generated with 20000 points.
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_DT)]
    dt: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct Divergence {
    count: usize,
    fraction: f64,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    version: &'static str,
    seed: Option<u64>,
    config: serde_json::Value,
    artifacts: BTreeMap<String, PathBuf>,
    success: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    divergence: Option<Divergence>,
    #[serde(skip_serializing_if = "Option::is_none")]
    started_unix_secs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_clock_secs: Option<f64>,
}

/// Manifest under construction; timing is dropped under `--deterministic`.
struct Run {
    manifest: RunManifest,
    out: PathBuf,
    start: Instant,
    deterministic: bool,
}

impl Run {
    fn new(command: &str, out: &Path, seed: Option<u64>, config: serde_json::Value, deterministic: bool) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        Self {
            manifest: RunManifest {
                command: command.into(),
                version: env!("CARGO_PKG_VERSION"),
                seed,
                config,
                artifacts: BTreeMap::new(),
                success: false,
                warnings: Vec::new(),
                divergence: None,
                started_unix_secs: (!deterministic).then_some(started),
                wall_clock_secs: None,
            },
            out: out.to_path_buf(),
            start: Instant::now(),
            deterministic,
        }
    }

    fn path(&mut self, key: &str, file: &str) -> PathBuf {
        let p = self.out.join(file);
        self.manifest.artifacts.insert(key.into(), p.clone());
        p
    }

    fn finish(mut self, success: bool) -> Result<(), Error> {
        self.manifest.success = success;
        if !self.deterministic {
            self.manifest.wall_clock_secs = Some(self.start.elapsed().as_secs_f64());
        }
        let path = self.out.join("manifest.json");
        write_json(&path, &self.manifest)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn code_for(e: &Error) -> u8 {
    match e {
        Error::NumericFault { .. }
        | Error::Divergence { .. }
        | Error::Singularity(_)
        | Error::DegenerateCovariance(_)
        | Error::InfiniteTime { .. } => NUMERIC,
        _ => USAGE,
    }
}

fn fail(e: Error) -> u8 {
    error!("{e}");
    code_for(&e)
}

fn create_dir(out: &Path) -> Result<(), Error> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn cmd_generate(a: &GenerateArgs, seed: u64, deterministic: bool) -> Result<u8, Error> {
    let name: DatasetName = a.dataset.parse()?;
    let ds = generate(name, a.n, a.noise, seed)?;
    create_dir(&a.out)?;
    let config = serde_json::json!({ "dataset": name, "n": a.n, "noise_std": a.noise });
    let mut run = Run::new("generate", &a.out, Some(seed), config, deterministic);
    let csv = run.path("dataset", "data.csv");
    run.path("metadata", "data.json");
    write_dataset(&ds, seed, &csv)?;
    run.finish(true)?;
    info!("wrote {} points to {}", ds.n(), csv.display());
    Ok(OK)
}

fn load_config(a: &TrainArgs, seed: Option<u64>, deterministic: bool) -> Result<TrainConfig, Error> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config {
                field: "config".into(),
                message: format!("cannot read {}: {e}", path.display()),
            })?;
            TrainConfig::from_json(&text)?
        }
        None => {
            let scale: Scale = a.scale.parse()?;
            let kind: ModelKind = a.model.parse()?;
            TrainConfig::preset(scale, kind)
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.deterministic |= deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs, seed: Option<u64>, deterministic: bool) -> Result<u8, Error> {
    let cfg = load_config(a, seed, deterministic)?;
    let data = cfg.data.load(cfg.seed)?;
    create_dir(&a.out)?;
    let config = serde_json::to_value(&cfg).expect("config serializes");
    let mut run = Run::new("train", &a.out, Some(cfg.seed), config, deterministic);
    let model = cfg.init_model(data.dim())?;
    info!(
        "training {:?} model on {} points for {} iterations",
        cfg.model_kind(),
        data.len(),
        cfg.iterations
    );
    let (model, history, fault) = match train(model, &data, &cfg, &mut cfg.batch_rng()) {
        Ok((m, h)) => (m, h, None),
        Err(abort) => (abort.model, abort.history, Some(abort.error)),
    };
    let ck = run.path("checkpoint", "checkpoint.json");
    save_checkpoint(&model, Some(&cfg), &ck)?;
    let losses = run.path("loss_history", "loss.csv");
    fs::write(&losses, history.to_csv())?;
    match fault {
        None => {
            run.finish(true)?;
            info!("final loss {:.6e}", history.losses.last().copied().unwrap_or(f64::NAN));
            Ok(OK)
        }
        Some(e) => {
            let code = code_for(&e);
            let report = run.path("fault_report", "fault.json");
            write_json(
                &report,
                &serde_json::json!({ "error": e.to_string(), "completed_steps": history.losses.len() }),
            )?;
            run.manifest.warnings.push(e.to_string());
            run.finish(false)?;
            error!("training aborted: {e}; last good model saved to {}", ck.display());
            Ok(code)
        }
    }
}

fn cmd_sample(a: &SampleArgs, seed: u64, deterministic: bool) -> Result<u8, Error> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.model()?;
    create_dir(&a.out)?;
    let config = serde_json::json!({
        "checkpoint": a.checkpoint, "n": a.n, "t_end": a.t_end, "dt": a.dt,
    });
    let mut run = Run::new("sample", &a.out, Some(seed), config, deterministic);
    let mut rng = Rng::new(seed);
    let (pf, has_tau) = match &model {
        Model::Potential(m) => (push_forward_stable(m, &ck.ccnf(), a.n, a.t_end, a.dt, &mut rng)?, true),
        Model::Field(m) => (push_forward_baseline(m, a.n, a.t_end, a.dt, &mut rng)?, false),
    };
    let path = run.path("trajectories", "trajectories.csv");
    let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
    write_trajectories(&mut f, &pf.trajectories(), model.dim(), has_tau)?;
    f.flush()?;
    let fraction = pf.divergence_fraction();
    if pf.diverged > 0 {
        warn!("{} of {} samples diverged", pf.diverged, pf.len());
    }
    if fraction > 0.5 {
        run.manifest
            .warnings
            .push(format!("{} of {} samples diverged", pf.diverged, pf.len()));
    }
    run.manifest.divergence = Some(Divergence { count: pf.diverged, fraction });
    run.finish(true)?;
    Ok(OK)
}

fn cmd_grid(a: &GridArgs, deterministic: bool) -> Result<u8, Error> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.model()?;
    if model.dim() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: model.dim() });
    }
    let bounds: [f64; 4] = a.bounds.as_slice().try_into().map_err(|_| Error::Config {
        field: "bounds".into(),
        message: format!("expected 4 comma-separated values, got {}", a.bounds.len()),
    })?;
    if a.resolution.len() != 2 {
        return Err(Error::Config {
            field: "resolution".into(),
            message: format!("expected `nx,ny`, got {} values", a.resolution.len()),
        });
    }
    let res = (a.resolution[0], a.resolution[1]);
    let grid = match &model {
        Model::Potential(m) => field_grid(|z, s| m.grad_field(z, s), bounds, res, a.slice)?,
        Model::Field(m) => field_grid(|z, s| m.baseline_field(z, s), bounds, res, a.slice)?,
    };
    create_dir(&a.out)?;
    let config = serde_json::json!({
        "checkpoint": a.checkpoint, "bounds": bounds, "resolution": [res.0, res.1], "slice": a.slice,
    });
    let mut run = Run::new("grid", &a.out, None, config, deterministic);
    let path = run.path("grid", "grid.csv");
    grid.save(&path)?;
    run.finish(true)?;
    Ok(OK)
}

fn cmd_verify(a: &VerifyArgs, deterministic: bool) -> Result<u8, Error> {
    let suite: Suite = a.suite.parse()?;
    let params = match &a.params {
        // not validated here: the positivity check reports bad rates
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str::<StableCcnfParams>(&text).map_err(|e| Error::from_json(e, &text))?
        }
        None => StableCcnfParams::standard(2, DEFAULT_RATE_RATIO),
    };
    let start = Instant::now();
    let report = run_suite(suite, &params);
    info!("suite {:?} finished in {:.2}s", suite, start.elapsed().as_secs_f64());
    match &a.out {
        Some(out) => {
            create_dir(out)?;
            let config = serde_json::json!({ "suite": suite, "params": params });
            let mut run = Run::new("verify", out, None, config, deterministic);
            let path = run.path("report", "verify.json");
            write_json(&path, &report)?;
            run.finish(report.pass)?;
        }
        None => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
    }
    if report.pass {
        Ok(OK)
    } else {
        error!("failing checks: {}", report.failing().join(", "));
        Ok(VERIFY_FAILED)
    }
}

fn load_dataset(spec: &str, seed: u64) -> Result<EmpiricalTarget, Error> {
    match spec.parse::<DatasetName>() {
        Ok(name) => EmpiricalTarget::new(generate(name, 20_000, 0.05, seed)?.to_vectors()),
        Err(_) => EmpiricalTarget::new(read_points_csv(Path::new(spec))?),
    }
}

fn cmd_eval(a: &EvalArgs, seed: u64, deterministic: bool) -> Result<u8, Error> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.model()?;
    let data_seed = ck.config.as_ref().map_or(seed, |c| c.seed);
    let data = load_dataset(&a.dataset, data_seed)?;
    let p = ck.ccnf();
    let ev = stability_eval(&model, Some(&p), &data, a.n, a.dt, &mut Rng::new(seed))?;
    create_dir(&a.out)?;
    let config = serde_json::json!({
        "checkpoint": a.checkpoint, "dataset": a.dataset, "n": a.n, "dt": a.dt,
    });
    let mut run = Run::new("eval", &a.out, Some(seed), config, deterministic);
    let path = run.path("report", "eval.json");
    write_json(&path, &ev)?;
    if ev.divergence_fraction > 0.5 {
        run.manifest
            .warnings
            .push(format!("{:.1}% of samples diverged", 100.0 * ev.divergence_fraction));
    }
    run.manifest.divergence = Some(Divergence {
        count: (ev.divergence_fraction * ev.n as f64).round() as usize,
        fraction: ev.divergence_fraction,
    });
    run.finish(true)?;
    for (t, d) in ev.times.iter().zip(&ev.support_distance) {
        match d {
            Some(d) => info!("support distance at t = {t}: {d:.5}"),
            None => info!("support distance at t = {t}: no sample reached it"),
        }
    }
    Ok(OK)
}

fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("STABLEFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| Error::Config {
        field: "STABLEFLOW_THREADS".into(),
        message: format!("expected a positive integer, got `{v}`"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config {
            field: "STABLEFLOW_THREADS".into(),
            message: e.to_string(),
        })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        return ExitCode::from(fail(e));
    }
    let seed = cli.seed.unwrap_or(0);
    let det = cli.deterministic;
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a, seed, det),
        Command::Train(a) => cmd_train(a, cli.seed, det),
        Command::Sample(a) => cmd_sample(a, seed, det),
        Command::Grid(a) => cmd_grid(a, det),
        Command::Verify(a) => cmd_verify(a, det),
        Command::Eval(a) => cmd_eval(a, seed, det),
    };
    ExitCode::from(result.unwrap_or_else(fail))
}
