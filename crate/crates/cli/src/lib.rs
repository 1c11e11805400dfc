//! Command implementations behind the `hiloc` binary.
//!
//! Exit codes: 0 ok, 2 configuration, 3 I/O, 4 data.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use hiloc::config::KeyValues;
use hiloc::eval::{ate_with, rpe_with, write_metrics, Metric, Trajectory, DEFAULT_MAX_DT};
use hiloc::geometry::check::{check_jacobians, AnalyticJacobians};
use hiloc::pipeline::{run_sequence, write_status_csv, MergePolicy, Mode, PipelineConfig};
use hiloc::synth::{DatasetReader, SynthConfig};
use hiloc::VisualMap;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("data error: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Data(_) => 4,
        }
    }

    fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    /// Failures while reading inputs: files that are missing or malformed.
    fn input(e: hiloc::Error) -> Self {
        CliError::Io(e.to_string())
    }

    fn data(e: hiloc::Error) -> Self {
        match e {
            hiloc::Error::Io(_) => CliError::Io(e.to_string()),
            hiloc::Error::InvalidArgument(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "hiloc", version, about = "Hierarchical visual localization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// key=value config file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config entry (repeatable)
    #[arg(long = "set", value_name = "K=V", global = true)]
    pub set: Vec<String>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Localize a dataset, writing est.tum and status.csv
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// ATE/RPE of an estimate against ground truth
    Eval {
        est: PathBuf,
        gt: PathBuf,
        #[arg(long, default_value_t = 1)]
        delta: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_DT)]
        max_dt: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of the analytic Jacobians
    CheckJacobians {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[command(flatten)]
        common: Common,
    },
}

/// Config file (if any) with `--set` overrides and `--seed` applied on top.
pub fn load_config(common: &Common) -> CliResult<KeyValues> {
    let mut kv = match &common.config {
        Some(p) => KeyValues::load(p).map_err(|e| match e {
            hiloc::Error::Io(io) => CliError::Config(format!("{}: {io}", p.display())),
            other => CliError::config(other),
        })?,
        None => KeyValues::new(),
    };
    for s in &common.set {
        let (k, v) = KeyValues::parse_override(s).map_err(CliError::config)?;
        kv.set(&k, v);
    }
    if let Some(seed) = common.seed {
        kv.set("seed", seed);
    }
    Ok(kv)
}

fn out_dir(common: &Common) -> CliResult<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

pub fn cmd_synth(common: &Common, log: &mut dyn Write) -> CliResult<()> {
    let kv = load_config(common)?;
    let cfg = SynthConfig::from_kv(&kv).map_err(CliError::config)?;
    let dir = out_dir(common)?;
    let scenario = cfg.build().map_err(CliError::config)?;
    scenario
        .write_dataset(&dir)
        .map_err(|e| CliError::Io(e.to_string()))?;
    let _ = writeln!(
        log,
        "wrote {} frames, {} world points, {} prior points to {}",
        scenario.renderer.len(),
        scenario.world.points.len(),
        scenario.prior.points.len(),
        dir.display()
    );
    Ok(())
}

/// Pipeline settings from config keys, on top of the defaults.
pub fn pipeline_config(kv: &KeyValues) -> CliResult<PipelineConfig> {
    let c = |e: hiloc::Error| CliError::config(e);
    let mut p = PipelineConfig {
        mode: kv.get_or("mode", Mode::Hierarchical).map_err(c)?,
        merge: kv.get_or("merge", MergePolicy::Deterministic).map_err(c)?,
        ..PipelineConfig::default()
    };
    p.min_track_inliers = kv.get_or("min_track_inliers", p.min_track_inliers).map_err(c)?;
    p.tracking.window_radius = kv.get_or("tracking_window", p.tracking.window_radius).map_err(c)?;
    p.keyframes.translation = kv.get_or("kf_translation", p.keyframes.translation).map_err(c)?;
    p.keyframes.rotation_deg = kv.get_or("kf_rotation_deg", p.keyframes.rotation_deg).map_err(c)?;
    p.keyframes.tracked_ratio = kv.get_or("kf_tracked_ratio", p.keyframes.tracked_ratio).map_err(c)?;
    p.k_align = kv.get_or("k_align", p.k_align).map_err(c)?;
    p.window_size = kv.get_or("window_size", p.window_size).map_err(c)?;
    p.fixed_size = kv.get_or("fixed_size", p.fixed_size).map_err(c)?;
    p.max_local_keyframes = kv.get_or("max_local_keyframes", p.max_local_keyframes).map_err(c)?;
    p.align.rounds = kv.get_or("align_rounds", p.align.rounds).map_err(c)?;
    p.align.matching.window_radius = kv.get_or("align_window", p.align.matching.window_radius).map_err(c)?;
    p.align.min_prior_matches = kv.get_or("min_prior_matches", p.align.min_prior_matches).map_err(c)?;
    p.max_align_window = kv.get_or("max_align_window", p.max_align_window).map_err(c)?;
    p.prior_frame_radius = kv.get_or("prior_frame_radius", p.prior_frame_radius).map_err(c)?;
    p.max_depth = kv.get_or("max_depth", p.max_depth).map_err(c)?;
    p.learned_max_keypoints = kv.get_or("learned_max_keypoints", p.learned_max_keypoints).map_err(c)?;
    p.validate().map_err(c)?;
    Ok(p)
}

pub fn cmd_run(common: &Common, log: &mut dyn Write) -> CliResult<()> {
    let kv = load_config(common)?;
    let cfg = pipeline_config(&kv)?;
    let dataset: PathBuf = kv.get_required("dataset").map_err(CliError::config)?;
    let prior_path: Option<PathBuf> = kv.get("prior_map").map_err(CliError::config)?;
    if cfg.mode == Mode::Hierarchical && prior_path.is_none() {
        return Err(CliError::Config("hierarchical mode requires 'prior_map'".into()));
    }
    let reader = DatasetReader::open(&dataset).map_err(CliError::input)?;
    let prior = match (cfg.mode, prior_path) {
        (Mode::Hierarchical, Some(p)) => Some(Arc::new(VisualMap::load(&p).map_err(CliError::input)?)),
        _ => None,
    };
    let dir = out_dir(common)?;
    let info = reader.info;
    let out = run_sequence(&reader, info.camera, info.baseline, info.initial_pose, prior, &cfg).map_err(|e| match e {
        hiloc::Error::Io(_) | hiloc::Error::Parse { .. } => CliError::Io(e.to_string()),
        other => CliError::data(other),
    })?;
    out.trajectory
        .save_tum(&dir.join("est.tum"))
        .map_err(|e| CliError::Io(e.to_string()))?;
    let mut csv = Vec::new();
    write_status_csv(&out.reports, &mut csv).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(dir.join("status.csv"), csv).map_err(|e| CliError::Io(e.to_string()))?;
    let s = out.stats;
    let _ = writeln!(
        log,
        "{} frames, {} keyframes, {} lost, {} corrections, {} alignment failures",
        s.frames, s.keyframes, s.lost_frames, s.corrections_applied, s.alignment_failures
    );
    Ok(())
}

/// ATE and RPE metrics for two trajectory files.
pub fn evaluate(est: &Path, gt: &Path, delta: usize, max_dt: f64) -> CliResult<Vec<Metric>> {
    if delta < 1 {
        return Err(CliError::Config("delta must be >= 1".into()));
    }
    let est = Trajectory::load_tum(est).map_err(CliError::input)?;
    let gt = Trajectory::load_tum(gt).map_err(CliError::input)?;
    let a = ate_with(&est, &gt, max_dt).map_err(CliError::data)?;
    let r = rpe_with(&est, &gt, delta, max_dt).map_err(CliError::data)?;
    Ok(vec![
        Metric::new("ate_rmse", a.rmse, "m", a.errors.len()),
        Metric::new("rpe_rmse", r.rmse, "m", r.errors.len()),
    ])
}

pub fn cmd_eval(est: &Path, gt: &Path, delta: usize, max_dt: f64, common: &Common, stdout: &mut dyn Write) -> CliResult<()> {
    let metrics = evaluate(est, gt, delta, max_dt)?;
    let mut buf = Vec::new();
    write_metrics(&metrics, &mut buf).map_err(|e| CliError::Io(e.to_string()))?;
    if common.out.is_some() {
        let dir = out_dir(common)?;
        std::fs::write(dir.join("metrics.csv"), &buf).map_err(|e| CliError::Io(e.to_string()))?;
    }
    stdout.write_all(&buf).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

pub fn cmd_check_jacobians(seed: u64, trials: usize, jac: &AnalyticJacobians, stdout: &mut dyn Write) -> CliResult<()> {
    if trials == 0 {
        return Err(CliError::Config("trials must be >= 1".into()));
    }
    let report = check_jacobians(seed, trials, jac);
    for s in &report.stats {
        let _ = writeln!(
            stdout,
            "{:<11} trials={} max_rel_err={:.3e} {}",
            s.name,
            s.trials,
            s.max_relative_error,
            if s.passed() { "ok" } else { "FAIL" }
        );
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "jacobian check failed, max relative error {:.3e}",
            report.max_relative_error()
        )))
    }
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                let _ = write!(stdout, "{e}");
            } else {
                let _ = write!(stderr, "{e}");
            }
            return code;
        }
    };
    let result = match &cli.command {
        Command::Synth { common } => cmd_synth(common, stderr),
        Command::Run { common } => cmd_run(common, stderr),
        Command::Eval {
            est,
            gt,
            delta,
            max_dt,
            common,
        } => cmd_eval(est, gt, *delta, *max_dt, common, stdout),
        Command::CheckJacobians { trials, common } => {
            cmd_check_jacobians(common.seed.unwrap_or(0), *trials, &AnalyticJacobians::default(), stdout)
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "hiloc: {e}");
            e.exit_code()
        }
    }
}
