use asgdro::harness::{
    emit_landscape, emit_spectrum, load_bundle, run_experiment, seed_dir, sweep, write_report,
    Checkpoint, ExperimentConfig, LandscapeParams,
};
use asgdro::landscape::{BallGrid, Bounds, ObjectiveId};
use asgdro::robust_opt::AlgorithmRegistry;
use asgdro::{Error, Result};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "asgdro", version, about = "Sharpness-aware group-robust training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (`.json` or key-value text).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only log errors.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset as CSV files.
    GenData(Common),
    /// Train every configured seed and keep the worst-group-best checkpoint.
    Train(Common),
    /// Grid search over the config's `sweep.*` axes.
    Sweep(Common),
    /// Scan a toy landscape objective on a square grid.
    Landscape {
        #[command(flatten)]
        common: Common,
        /// Scenario id: a1 or a2.
        #[arg(long, default_value = "a1")]
        scenario: String,
        /// group1, group2, erm, gdro, asgdro or all.
        #[arg(long, default_value = "all")]
        objective: String,
        #[arg(long, default_value_t = 201)]
        resolution: usize,
        /// Half width of the square scan region.
        #[arg(long, default_value_t = 5.0)]
        half_width: f64,
        #[arg(long, default_value_t = 64)]
        n_angles: usize,
        #[arg(long, default_value_t = 16)]
        n_radii: usize,
        /// Skip the SVG heatmap.
        #[arg(long)]
        no_svg: bool,
    },
    /// Hessian spectra of a trained checkpoint.
    Spectrum {
        #[command(flatten)]
        common: Common,
        /// A checkpoint file or a run directory holding `seed_<n>/checkpoint.json`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Aggregate run summaries into per-algorithm tables.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory searched recursively for summary.json and sweep.json.
        #[arg(long)]
        runs: PathBuf,
    },
}

fn init_logging(quiet: bool) {
    let level = if quiet { "error" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig, label: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        cfg.output_root()
            .join(format!("{label}-{}-{}", cfg.algorithm, cfg.fingerprint()))
    })
}

fn say(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        println!("{}", msg.as_ref());
    }
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let seed = cfg.seeds[0];
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_root().join(format!("data-seed{seed}")));
    let bundle = load_bundle(&cfg, seed)?;
    bundle.save(&out)?;
    say(
        common.quiet,
        format!(
            "wrote {} ({} train, {} val, {} test sets) to {}",
            bundle.kind,
            bundle.train.len(),
            bundle.val.len(),
            bundle.tests.len(),
            out.display()
        ),
    );
    Ok(())
}

fn train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let registry = AlgorithmRegistry::builtin();
    cfg.validate(&registry)?;
    let out = out_dir(common, &cfg, "train");
    let result = run_experiment(&cfg, &registry, Some(&out))?;
    for s in &result.summary.seeds {
        match &s.error {
            Some(e) => say(common.quiet, format!("seed {}: FAILED {e}", s.seed)),
            None => {
                let tests: Vec<String> = s
                    .test
                    .iter()
                    .map(|(n, avg, worst)| format!("{n} {avg:.4}/{worst:.4}"))
                    .collect();
                say(
                    common.quiet,
                    format!(
                        "seed {}: epoch {} val worst {:.4}; {}",
                        s.seed,
                        s.selected_epoch.unwrap_or(0),
                        s.val_worst.unwrap_or(f64::NAN),
                        tests.join(", ")
                    ),
                );
            }
        }
    }
    say(common.quiet, format!("outputs in {}", out.display()));
    if result.summary.seeds.iter().all(|s| !s.ok) {
        return Err(Error::InvalidArgument("every seed failed".into()));
    }
    Ok(())
}

fn run_sweep(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let registry = AlgorithmRegistry::builtin();
    let out = out_dir(common, &cfg, "sweep");
    let result = sweep(&cfg, &registry, Some(&out))?;
    let best = result.best_cell();
    say(
        common.quiet,
        format!(
            "{}: best cell {} rho={} C={} eta={} mean val worst {:.4}; outputs in {}",
            result.algorithm,
            best.index,
            best.cell.rho,
            best.cell.adjustment_c,
            best.cell.eta,
            best.mean_val_worst.unwrap_or(f64::NAN),
            out.display()
        ),
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn landscape(
    common: &Common,
    scenario: &str,
    objective: &str,
    resolution: usize,
    half_width: f64,
    n_angles: usize,
    n_radii: usize,
    no_svg: bool,
) -> Result<()> {
    let objectives: Vec<ObjectiveId> = if objective == "all" {
        vec![
            ObjectiveId::Group1,
            ObjectiveId::Group2,
            ObjectiveId::Erm,
            ObjectiveId::Gdro,
            ObjectiveId::Asgdro,
        ]
    } else {
        vec![objective.parse()?]
    };
    if !(half_width > 0.0) {
        return Err(Error::Config("--half-width must be positive".into()));
    }
    let params = LandscapeParams {
        bounds: Bounds::square(half_width),
        resolution,
        ball_grid: BallGrid { n_angles, n_radii },
        svg: !no_svg,
    };
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| asgdro::harness::default_output_root().join("landscape"));
    for obj in objectives {
        let (summary, files) = emit_landscape(scenario, obj, &params, &out)?;
        say(
            common.quiet,
            format!(
                "{} {}: min {:.6} at ({:.3}, {:.3}){}; {}",
                summary.scenario,
                summary.objective,
                summary.argmin_value,
                summary.argmin_theta[0],
                summary.argmin_theta[1],
                if summary.argmin_is_interior { "" } else { " on the boundary" },
                files.csv.display()
            ),
        );
    }
    Ok(())
}

fn resolve_checkpoint(path: &Path, seed: Option<u64>) -> Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    if let Some(seed) = seed {
        return Ok(seed_dir(path, seed).join("checkpoint.json"));
    }
    let direct = path.join("checkpoint.json");
    if direct.is_file() {
        return Ok(direct);
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|_| Error::MissingCheckpoint(path.display().to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path().join("checkpoint.json")))
        .filter(|p| p.is_file())
        .collect();
    found.sort();
    found
        .into_iter()
        .next()
        .ok_or_else(|| Error::MissingCheckpoint(path.display().to_string()))
}

fn spectrum(common: &Common, checkpoint: &Path) -> Result<()> {
    let ckpt = resolve_checkpoint(checkpoint, common.seed)?;
    let spectrum_cfg = match &common.config {
        Some(p) => ExperimentConfig::from_path(p)?.spectrum,
        None => Checkpoint::load(&ckpt)?.config.spectrum,
    };
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| ckpt.with_file_name("spectrum.json"));
    let out = if out.extension().is_some_and(|e| e == "json") {
        out
    } else {
        out.join("spectrum.json")
    };
    let result = emit_spectrum(&ckpt, &spectrum_cfg, &out)?;
    for g in &result.report.per_group {
        say(
            common.quiet,
            format!(
                "group {} ({}): eigs {:?}{}",
                g.group,
                g.name,
                g.entry.eigenvalues(),
                if g.entry.converged { "" } else { " (not converged)" }
            ),
        );
    }
    say(
        common.quiet,
        format!(
            "worst-group largest eigenvalue {:.6}; wrote {}",
            result.worst_group_largest,
            out.display()
        ),
    );
    Ok(())
}

fn report(common: &Common, runs: &Path) -> Result<()> {
    let out = common.out.clone().unwrap_or_else(|| runs.to_path_buf());
    let report = write_report(runs, &out)?;
    say(common.quiet, report.markdown());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train(c),
        Command::Sweep(c) => run_sweep(c),
        Command::Landscape {
            common,
            scenario,
            objective,
            resolution,
            half_width,
            n_angles,
            n_radii,
            no_svg,
        } => landscape(
            common,
            scenario,
            objective,
            *resolution,
            *half_width,
            *n_angles,
            *n_radii,
            *no_svg,
        ),
        Command::Spectrum { common, checkpoint } => spectrum(common, checkpoint),
        Command::Report { common, runs } => report(common, runs),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = match &cli.command {
        Command::GenData(c) | Command::Train(c) | Command::Sweep(c) => c.quiet,
        Command::Landscape { common, .. }
        | Command::Spectrum { common, .. }
        | Command::Report { common, .. } => common.quiet,
    };
    init_logging(quiet);
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
