use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use qamro::checkpoint::Checkpoint;
use qamro::config::{resolve, ExperimentConfig, Overrides};
use qamro::data::{
    generate_synthetic, load_dataset, save_dataset, RatedSample, RatingScale, SynthSpec,
};
use qamro::experiment::{
    ablation_median, evaluate, evaluate_clip_level, run_ablation, run_beta_sweep, run_single,
    sweep_median, write_ablation_csv, write_sweep_csv, Variant,
};
use qamro::gradcheck::{grad_check, GradCheckConfig, LossKind};
use qamro::{Error, Result};

#[derive(Parser)]
#[command(name = "qamro", version)]
#[command(about = "Quality-aware adaptive-margin ranking losses for MOS prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model, evaluate it on the validation split, write checkpoint and metrics
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory (checkpoint.json, metrics.csv, train_log.csv, config.json)
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset at system level
    Eval {
        /// JSONL dataset to score
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also print clip-level metrics to stderr (debugging only)
        #[arg(long)]
        clip_level: bool,
        /// Metrics CSV path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the four loss variants for every seed
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Worker threads for independent runs (0 = one per core)
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// CSV path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full objective for every (beta, seed)
    SweepBeta {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,9")]
        betas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic loss gradients against central finite differences
    GradCheck {
        /// mr, qamro, huber, combined, or all
        #[arg(long, default_value = "all")]
        loss: String,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Write a synthetic JSONL dataset
    GenSynth {
        #[command(flatten)]
        spec: SynthArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSONL dataset; the built-in synthetic dataset when omitted
    #[arg(long)]
    data: Option<PathBuf>,
    /// TOML file with configuration overrides (flags take precedence)
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, Vec<RatedSample>)> {
        let cfg = resolve(self.config.as_deref(), &self.overrides)?;
        info!("effective config: {}", serde_json::to_string(&cfg)?);
        let samples = match &self.data {
            Some(path) => load_dataset(path, cfg.scale())?,
            None => {
                info!("no --data given; using the built-in synthetic dataset");
                let spec = SynthSpec {
                    scale: cfg.scale(),
                    ..SynthSpec::default()
                };
                generate_synthetic(&spec)?.samples
            }
        };
        Ok((cfg, samples))
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    n_systems: usize,
    #[arg(long, default_value_t = 25)]
    clips_per_system: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    /// Comma-separated score dimension names
    #[arg(long, value_delimiter = ',', default_value = "MI,TA")]
    dimensions: Vec<String>,
    #[arg(long, default_value_t = 2.0)]
    system_quality_spread: f64,
    #[arg(long, default_value_t = 0.5)]
    clip_noise_sd: f64,
    #[arg(long, default_value_t = 0.5)]
    signal_to_noise: f64,
    #[arg(long, default_value_t = 1.0)]
    scale_min: f64,
    #[arg(long, default_value_t = 5.0)]
    scale_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
}

/// Writes to `path`, or stdout when absent.
fn with_output(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => f(&mut create(p)?),
        None => f(&mut io::stdout().lock()),
    }
}

/// `<out>.config.json` next to a CSV output, recording the effective configuration.
fn write_config_sidecar(out: Option<&Path>, cfg: &impl serde::Serialize) -> Result<()> {
    if let Some(out) = out {
        let mut name = out.as_os_str().to_owned();
        name.push(".config.json");
        let mut w = create(Path::new(&name))?;
        serde_json::to_writer_pretty(&mut w, cfg)?;
        writeln!(w).map_err(|e| Error::Io {
            path: name.into(),
            source: e,
        })?;
    }
    Ok(())
}

fn cmd_train(common: &Common, out: &Path) -> Result<()> {
    let (cfg, samples) = common.resolve()?;
    let outcome = run_single(&samples, &cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    Checkpoint {
        regressor: outcome.regressor,
        loss: cfg.train.loss,
    }
    .save(out.join("checkpoint.json"))?;
    outcome
        .report
        .write_csv(create(&out.join("metrics.csv"))?)?;
    outcome.log.write_csv(create(&out.join("train_log.csv"))?)?;
    let mut w = create(&out.join("config.json"))?;
    serde_json::to_writer_pretty(&mut w, &cfg)?;
    w.flush().map_err(|e| Error::Io {
        path: out.join("config.json"),
        source: e,
    })?;
    eprintln!(
        "trained {} epochs (best {}); {} validation systems",
        outcome.log.stopped_epoch, outcome.log.best_epoch, outcome.report.n_systems
    );
    for (dim, m) in &outcome.report.per_dimension {
        eprintln!(
            "  {dim}: mse {:.4} lcc {:.4} srcc {:.4} ktau {:.4}",
            m.mse, m.lcc, m.srcc, m.ktau
        );
    }
    Ok(())
}

fn cmd_eval(data: &Path, checkpoint: &Path, clip_level: bool, out: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let scale = RatingScale::new(ckpt.loss.scale_min, ckpt.loss.scale_max)?;
    let samples = load_dataset(data, scale)?;
    let report = evaluate(&ckpt.regressor, &samples, scale)?;
    if clip_level {
        for (dim, m) in evaluate_clip_level(&ckpt.regressor, &samples, scale)? {
            eprintln!(
                "clip-level {dim}: mse {:.4} lcc {:.4} srcc {:.4} ktau {:.4}",
                m.mse, m.lcc, m.srcc, m.ktau
            );
        }
    }
    with_output(out, |w| report.write_csv(w))?;
    let echo = serde_json::json!({
        "checkpoint": checkpoint,
        "hidden_dims": ckpt.regressor.hidden_dims,
        "seed": ckpt.regressor.seed,
        "loss": ckpt.loss,
    });
    write_config_sidecar(out, &echo)
}

fn cmd_ablate(common: &Common, seeds: &[u64], threads: usize, out: Option<&Path>) -> Result<()> {
    let (cfg, samples) = common.resolve()?;
    let results = run_ablation(&samples, &cfg, seeds, threads)?;
    with_output(out, |w| write_ablation_csv(&results, w))?;
    write_config_sidecar(out, &cfg)?;
    if let Some(first) = results.first() {
        for (dim, _) in &first.report.per_dimension {
            for v in Variant::ALL {
                let srcc = ablation_median(&results, v, dim, "srcc").unwrap_or(f64::NAN);
                eprintln!("median srcc {dim} {v:<16} {srcc:.4}");
            }
        }
    }
    Ok(())
}

fn cmd_sweep(
    common: &Common,
    betas: &[f64],
    seeds: &[u64],
    threads: usize,
    out: Option<&Path>,
) -> Result<()> {
    let (cfg, samples) = common.resolve()?;
    let results = run_beta_sweep(&samples, &cfg, betas, seeds, threads)?;
    with_output(out, |w| write_sweep_csv(&results, w))?;
    write_config_sidecar(out, &cfg)?;
    if let Some(first) = results.first() {
        for (dim, _) in &first.report.per_dimension {
            for &b in betas {
                let srcc = sweep_median(&results, b, dim, "srcc").unwrap_or(f64::NAN);
                eprintln!("median srcc {dim} beta={b} {srcc:.4}");
            }
        }
    }
    Ok(())
}

/// Returns whether every requested loss passed.
fn cmd_grad_check(loss: &str, trials: usize, seed: u64, step: f64, tolerance: f64) -> Result<bool> {
    let kinds = if loss == "all" {
        LossKind::ALL.to_vec()
    } else {
        vec![loss.parse::<LossKind>()?]
    };
    if trials == 0 {
        warn!("grad-check with 0 trials passes vacuously");
    }
    let check = GradCheckConfig {
        step,
        tolerance,
        ..GradCheckConfig::default()
    };
    let mut all_passed = true;
    for kind in kinds {
        let report = grad_check(kind, trials, seed, &check)?;
        let status = if report.passed() { "pass" } else { "FAIL" };
        println!(
            "loss={kind} trials={trials} max_rel_error={:e} tolerance={tolerance:e} status={status}",
            report.max_rel_error
        );
        for f in &report.failures {
            println!("  failing configuration: {}", serde_json::to_string(f)?);
        }
        all_passed &= report.passed();
    }
    Ok(all_passed)
}

fn cmd_gen_synth(args: &SynthArgs, out: &Path) -> Result<()> {
    let spec = SynthSpec {
        n_systems: args.n_systems,
        clips_per_system: args.clips_per_system,
        feature_dim: args.feature_dim,
        dimension_names: args.dimensions.clone(),
        system_quality_spread: args.system_quality_spread,
        clip_noise_sd: args.clip_noise_sd,
        signal_to_noise: args.signal_to_noise,
        scale: RatingScale::new(args.scale_min, args.scale_max)?,
        seed: args.seed,
    };
    let data = generate_synthetic(&spec)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    save_dataset(out, &data.samples)?;
    let (lo, hi) = data
        .samples
        .iter()
        .flat_map(|s| s.scores.values())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| {
            (lo.min(y), hi.max(y))
        });
    eprintln!(
        "wrote {} clips from {} systems to {}; scores in [{lo:.3}, {hi:.3}]",
        data.samples.len(),
        spec.n_systems,
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Train { common, out } => cmd_train(common, out).map(|_| true),
        Command::Eval {
            data,
            checkpoint,
            clip_level,
            out,
        } => cmd_eval(data, checkpoint, *clip_level, out.as_deref()).map(|_| true),
        Command::Ablate {
            common,
            seeds,
            threads,
            out,
        } => cmd_ablate(common, seeds, *threads, out.as_deref()).map(|_| true),
        Command::SweepBeta {
            common,
            betas,
            seeds,
            threads,
            out,
        } => cmd_sweep(common, betas, seeds, *threads, out.as_deref()).map(|_| true),
        Command::GradCheck {
            loss,
            trials,
            seed,
            step,
            tolerance,
        } => cmd_grad_check(loss, *trials, *seed, *step, *tolerance),
        Command::GenSynth { spec, out } => cmd_gen_synth(spec, out).map(|_| true),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QAMRO_LOG_LEVEL", "warn"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
