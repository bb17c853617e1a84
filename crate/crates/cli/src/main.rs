//! `rec-distill` command line.
//!
//! Exit codes: 0 success, 1 I/O, 2 configuration or usage, 3 numeric
//! divergence, 4 failed check.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rec_distill::pipeline::{self, ExperimentSpec, PRESET_NAMES};
use rec_distill::validation::{self, DEFAULT_PROBES, DEFAULT_TOLERANCE, LOW_POWER_SAMPLES};
use rec_distill::Error;

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "rec-distill", version, about = "Teacher-student distillation experiments on synthetic streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config; writes metrics CSV and the resolved config.
    Run {
        config: PathBuf,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, env = "REC_DISTILL_OUT", default_value = "out")]
        out: PathBuf,
        /// Comma-separated arm names to keep.
        #[arg(long, value_delimiter = ',')]
        arms: Vec<String>,
        /// Run seeds on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Run every arm of a preset; writes one CSV plus a summary table.
    Ablate {
        preset: String,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, env = "REC_DISTILL_OUT", default_value = "out")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        arms: Vec<String>,
        #[arg(long)]
        parallel: bool,
    },
    /// Finite-difference gradient check of every loss.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_PROBES)]
        probes: usize,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Monte Carlo check that debiasing recovers the true posterior.
    Calibrate {
        #[arg(long, value_delimiter = ',', default_value = "2,5,10")]
        rs_list: Vec<f64>,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List preset names.
    Presets,
}

struct Failure {
    code: u8,
    component: &'static str,
    message: String,
}

impl Failure {
    fn check(component: &'static str, message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CHECK,
            component,
            message: message.into(),
        }
    }

    fn from_error(component: &'static str, e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::ConfigLine { .. } | Error::UnknownPreset(_) => EXIT_CONFIG,
            Error::Divergence(_) | Error::NonFinite(_) => EXIT_DIVERGENCE,
            _ => EXIT_IO,
        };
        Self {
            code,
            component,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn io_failure(component: &'static str, path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_IO,
        component,
        message: format!("{}: {e}", path.display()),
    }
}

fn filter_arms(spec: &mut ExperimentSpec, arms: &[String]) -> Outcome {
    if arms.is_empty() {
        return Ok(());
    }
    for a in arms {
        if spec.arm(a).is_none() {
            return Err(Failure::from_error(
                "config",
                Error::config(format!("unknown arm `{a}`; known: {}", spec.arm_names().join(", "))),
            ));
        }
    }
    spec.arms.retain(|a| arms.contains(&a.name));
    Ok(())
}

/// Runs `spec` and writes `<name>.csv` and `<name>.resolved.cfg` under `out`.
fn execute(spec: &ExperimentSpec, out: &Path) -> Result<String, Failure> {
    std::fs::create_dir_all(out).map_err(|e| io_failure("output", out, e))?;
    let result = pipeline::run_experiment(spec).map_err(|e| Failure::from_error("pipeline", e))?;
    let csv = out.join(format!("{}.csv", spec.name));
    result.report.write_csv(&csv).map_err(|e| io_failure("output", &csv, e))?;
    let cfg = out.join(format!("{}.resolved.cfg", spec.name));
    write_atomic(&cfg, &pipeline::snapshot(spec)).map_err(|e| io_failure("output", &cfg, e))?;
    eprintln!("wrote {} and {}", csv.display(), cfg.display());
    Ok(result.report.summary())
}

fn write_atomic(path: &Path, text: &str) -> std::io::Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(text.as_bytes())?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn run(config: &Path, seed: Option<u64>, out: &Path, arms: &[String], parallel: bool) -> Outcome {
    let mut spec = pipeline::load_config(config).map_err(|e| Failure::from_error("config", e))?;
    if let Some(s) = seed {
        spec.seeds = vec![s];
    }
    spec.parallel |= parallel;
    filter_arms(&mut spec, arms)?;
    print!("{}", execute(&spec, out)?);
    Ok(())
}

fn ablate(preset: &str, seeds: &[u64], out: &Path, arms: &[String], parallel: bool) -> Outcome {
    let mut spec = pipeline::preset(preset).map_err(|e| Failure::from_error("config", e))?;
    if !seeds.is_empty() {
        spec.seeds = seeds.to_vec();
    }
    spec.parallel |= parallel;
    filter_arms(&mut spec, arms)?;
    spec.validate().map_err(|e| Failure::from_error("config", e))?;
    let summary = execute(&spec, out)?;
    let path = out.join(format!("{}.summary.txt", spec.name));
    write_atomic(&path, &summary).map_err(|e| io_failure("output", &path, e))?;
    print!("{summary}");
    Ok(())
}

fn gradcheck(probes: usize, tolerance: f64, seed: u64) -> Outcome {
    let checks =
        validation::gradcheck_suite(probes, tolerance, seed).map_err(|e| Failure::from_error("gradcheck", e))?;
    println!("{:<20} {:>12} {:>9} {:>8}  status", "loss", "worst_error", "compared", "skipped");
    for c in &checks {
        println!(
            "{:<20} {:>12.3e} {:>9} {:>8}  {}",
            c.loss,
            c.worst_error,
            c.compared,
            c.skipped,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.loss.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::check(
            "gradcheck",
            format!("worst error above {tolerance:e} for {}", failed.join(", ")),
        ))
    }
}

fn calibrate(rs_list: &[f64], samples: usize, seed: u64) -> Outcome {
    if rs_list.is_empty() {
        return Err(Failure::from_error("calibrate", Error::config("--rs-list is empty")));
    }
    if samples < LOW_POWER_SAMPLES {
        eprintln!(
            "warning [calibrate]: {samples} samples is below {LOW_POWER_SAMPLES}; the check has little \
             statistical power, threshold relaxed to 0.01 * sqrt(1e6 / n) = {:.4}",
            validation::calibration_threshold(samples)
        );
    }
    let mut failed = Vec::new();
    println!("{:>6} {:>10} {:>12} {:>10}  status", "r_s", "samples", "mae", "threshold");
    for &r_s in rs_list {
        let c = validation::calibrate(r_s, samples, seed).map_err(|e| Failure::from_error("calibrate", e))?;
        println!(
            "{:>6} {:>10} {:>12.6} {:>10.4}  {}",
            c.r_s,
            c.samples,
            c.mae,
            c.threshold,
            if c.passed { "ok" } else { "FAIL" }
        );
        if !c.passed {
            failed.push(r_s.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::check("calibrate", format!("MAE above threshold for r_s {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run {
            config,
            seed,
            out,
            arms,
            parallel,
        } => run(config, *seed, out, arms, *parallel),
        Command::Ablate {
            preset,
            seeds,
            out,
            arms,
            parallel,
        } => ablate(preset, seeds, out, arms, *parallel),
        Command::Gradcheck { probes, tolerance, seed } => gradcheck(*probes, *tolerance, *seed),
        Command::Calibrate { rs_list, samples, seed } => calibrate(rs_list, *samples, *seed),
        Command::Presets => {
            for name in PRESET_NAMES {
                println!("{name}");
            }
            Ok(())
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error [{}]: {}", f.component, f.message);
            ExitCode::from(f.code)
        }
    }
}
