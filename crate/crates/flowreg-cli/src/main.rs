mod ablate;

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use flowreg::flowmodel::{fit, FitConfig, ModelKind, Preset};
use flowreg::gradcheck::{run_gradcheck, GradcheckConfig};
use flowreg::io;
use flowreg::losses::SmoothKind;
use flowreg::metrics::{compute_metrics_mode, ThetaMode};
use flowreg::normals::estimate_normals;
use flowreg::synth::{generate_scene, SceneMode, SceneSpec};

/// Scene flow estimation between two point clouds.
#[derive(Parser)]
#[command(name = "flowreg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic rigid scene with exact ground-truth flow.
    Synth(SynthArgs),
    /// Fit a flow field between a source and a target cloud.
    Fit(FitArgs),
    /// Evaluate a flow file against ground truth.
    Eval(EvalArgs),
    /// Estimate per-point surface normals and dump them as CSV.
    Normals(NormalsArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the loss-combination ablation over a set of scenes.
    Ablate(ablate::AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for source.csv, target.csv, gt_flow.csv, body_id.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of moving rigid bodies.
    #[arg(long, default_value_t = 2)]
    bodies: usize,
    /// Points sampled per body.
    #[arg(long, default_value_t = 512)]
    points: usize,
    /// Static background points.
    #[arg(long, default_value_t = 512)]
    background: usize,
    /// Minimum per-body translation magnitude in meters.
    #[arg(long, default_value_t = 0.1)]
    translation_min: f64,
    /// Maximum per-body translation magnitude in meters.
    #[arg(long, default_value_t = 1.0)]
    translation_max: f64,
    /// Maximum rotation about the body centroid, radians.
    #[arg(long, default_value_t = 0.1)]
    rotation_max: f64,
    /// Resample the target cloud independently instead of warping the source.
    #[arg(long, default_value_t = false)]
    resample_target: bool,
    /// Gaussian noise sigma applied to sampled points, meters.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Generate the adjacent plane-and-wall scene instead of scattered bodies.
    #[arg(long, default_value_t = false)]
    adjacent: bool,
}

#[derive(Args)]
struct FitArgs {
    source: PathBuf,
    target: PathBuf,
    /// Where to write the estimated flow.
    #[arg(long)]
    out_flow: PathBuf,
    /// Optional JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Ground-truth flow; when given, the report includes metrics.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Hyperparameter preset.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Flat key-value config file (keys mirror the fit configuration).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha_surf: Option<f64>,
    #[arg(long)]
    alpha_cyc: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    /// Neighbors used for normal estimation.
    #[arg(long)]
    kn: Option<usize>,
    #[arg(long)]
    normal_scale: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Relative loss-improvement threshold for convergence.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Flow parameterization: direct or coordnet.
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelKind>,
    #[arg(long)]
    hidden_layers: Option<usize>,
    #[arg(long)]
    hidden_width: Option<usize>,
    /// Rebuild cyclic clusters every this many iterations.
    #[arg(long)]
    cyc_refresh_every: Option<usize>,
    /// Clusters feeding the smoothness term: surf or knn.
    #[arg(long, value_parser = parse_smooth_kind)]
    smooth_kind: Option<SmoothKind>,
    /// Angle-error convention: homogeneous or raw3d.
    #[arg(long, value_parser = parse_theta_mode, default_value = "homogeneous")]
    theta_mode: ThetaMode,
}

#[derive(Args)]
struct EvalArgs {
    flow: PathBuf,
    gt: PathBuf,
    /// Optional JSON report path; without it the report prints to stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_parser = parse_theta_mode, default_value = "homogeneous")]
    theta_mode: ThetaMode,
}

#[derive(Args)]
struct NormalsArgs {
    cloud: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Neighbors used per normal (the point itself included).
    #[arg(long, default_value_t = 5)]
    kn: usize,
    /// Sensor position for sign disambiguation, as `x,y,z`.
    #[arg(long, default_value = "0,0,0", value_parser = parse_vec3)]
    viewpoint: Vector3<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Configurations per model variant.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 64)]
    max_points: usize,
}

pub(crate) fn parse_preset(s: &str) -> Result<Preset, String> {
    match s {
        "stereo" => Ok(Preset::Stereo),
        "lidar" => Ok(Preset::Lidar),
        other => Err(format!("unknown preset `{other}` (expected stereo|lidar)")),
    }
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    match s {
        "direct" => Ok(ModelKind::Direct),
        "coordnet" => Ok(ModelKind::CoordNet),
        other => Err(format!("unknown model `{other}` (expected direct|coordnet)")),
    }
}

fn parse_smooth_kind(s: &str) -> Result<SmoothKind, String> {
    match s {
        "surf" => Ok(SmoothKind::Surf),
        "knn" => Ok(SmoothKind::Knn),
        other => Err(format!("unknown smooth kind `{other}` (expected surf|knn)")),
    }
}

fn parse_theta_mode(s: &str) -> Result<ThetaMode, String> {
    match s {
        "homogeneous" => Ok(ThetaMode::Homogeneous),
        "raw3d" => Ok(ThetaMode::Raw3d),
        other => Err(format!(
            "unknown theta mode `{other}` (expected homogeneous|raw3d)"
        )),
    }
}

fn parse_vec3(s: &str) -> Result<Vector3<f64>, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected `x,y,z`, got `{s}`"));
    }
    let mut v = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        v[i] = p
            .trim()
            .parse()
            .map_err(|_| format!("cannot parse `{}` as a number", p.trim()))?;
    }
    Ok(Vector3::new(v[0], v[1], v[2]))
}

/// True when FLOWREG_THREADS=1 pins the run to a single thread; reports
/// then omit wall-clock timing so identical runs stay byte-identical.
fn deterministic_mode() -> bool {
    std::env::var("FLOWREG_THREADS").map(|v| v == "1").unwrap_or(false)
}

fn configure_threads() -> Result<()> {
    if let Ok(value) = std::env::var("FLOWREG_THREADS") {
        let n: usize = value
            .parse()
            .with_context(|| format!("FLOWREG_THREADS must be a number, got `{value}`"))?;
        if n > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("failed to configure the thread pool")?;
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Normals(args) => cmd_normals(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Ablate(args) => ablate::cmd_ablate(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SceneSpec {
        n_bodies: args.bodies,
        points_per_body: args.points,
        background_points: args.background,
        translation_range: (args.translation_min, args.translation_max),
        rotation_max: args.rotation_max,
        resample_target: args.resample_target,
        noise_sigma: args.noise,
        seed: args.seed,
        mode: if args.adjacent {
            SceneMode::AdjacentSurfaces
        } else {
            SceneMode::Scatter
        },
        ..SceneSpec::default()
    };
    let scene = generate_scene(&spec)?;
    io::write_cloud(&scene.source, &args.out.join("source.csv"))?;
    io::write_cloud(&scene.target, &args.out.join("target.csv"))?;
    io::write_flow(&scene.gt_flow, &args.out.join("gt_flow.csv"))?;
    io::write_body_ids(&scene.body_id, &args.out.join("body_id.csv"))?;
    println!(
        "wrote scene with {} source points ({} bodies) to {}",
        scene.source.len(),
        args.bodies,
        args.out.display()
    );
    Ok(())
}

fn resolve_fit_config(args: &FitArgs) -> Result<FitConfig> {
    let mut cfg = match (&args.config, args.preset) {
        (Some(_), Some(_)) => {
            bail!("--preset and --config are mutually exclusive; put `preset:` in the config file")
        }
        (Some(path), None) => io::read_config(path)?,
        (None, Some(p)) => FitConfig::from_preset(p),
        (None, None) => FitConfig::default(),
    };

    if let Some(v) = args.alpha_surf {
        cfg.alpha_surf = v;
    }
    if let Some(v) = args.alpha_cyc {
        cfg.alpha_cyc = v;
    }
    if let Some(v) = args.k {
        cfg.k = v;
    }
    if let Some(v) = args.kn {
        cfg.k_n = v;
    }
    if let Some(v) = args.normal_scale {
        cfg.normal_scale = v;
    }
    if let Some(v) = args.max_iters {
        cfg.max_iters = v;
    }
    if let Some(v) = args.tol {
        cfg.convergence_tol = v;
    }
    if let Some(v) = args.patience {
        cfg.patience = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.model {
        cfg.model = v;
    }
    if let Some(v) = args.hidden_layers {
        cfg.hidden_layers = v;
    }
    if let Some(v) = args.hidden_width {
        cfg.hidden_width = v;
    }
    if let Some(v) = args.cyc_refresh_every {
        cfg.cyc_refresh_every = v;
    }
    if let Some(v) = args.smooth_kind {
        cfg.smooth_kind = v;
    }
    Ok(cfg)
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = resolve_fit_config(&args)?;
    let source = io::read_cloud(&args.source)?;
    let target = io::read_cloud(&args.target)?;

    let outcome = fit(&source, &target, &cfg)?;
    io::write_flow(&outcome.flow, &args.out_flow)?;

    let metrics = match &args.gt {
        Some(path) => {
            let gt = io::read_flow(path)?;
            Some(compute_metrics_mode(&outcome.flow, &gt, args.theta_mode)?)
        }
        None => None,
    };

    let first = *outcome.history.first().expect("at least one iteration");
    let last = *outcome.history.last().expect("at least one iteration");
    let summary = io::LossSummary {
        iterations: outcome.iterations,
        converged: outcome.converged,
        best_iteration: outcome.best_iteration,
        initial: first,
        last,
        best: outcome.history[outcome.best_iteration],
    };

    println!(
        "fit: {} iterations, total loss {:.6e} -> {:.6e} (best {:.6e} at iteration {})",
        outcome.iterations, first.total, last.total, outcome.best_total, outcome.best_iteration
    );
    if let Some(m) = &metrics {
        println!(
            "metrics: EPE {:.4} m, AS {:.2}%, AR {:.2}%, Out {:.2}%, theta {:.4} rad",
            m.epe, m.acc_strict, m.acc_relaxed, m.outliers, m.angle_error
        );
    }

    if let Some(report_path) = &args.report {
        let report = io::Report {
            command: "fit".into(),
            seed: Some(cfg.seed),
            source: Some(args.source.display().to_string()),
            target: Some(args.target.display().to_string()),
            config: Some(cfg),
            loss: Some(summary),
            metrics,
            runtime_seconds: if deterministic_mode() {
                None
            } else {
                Some(started.elapsed().as_secs_f64())
            },
        };
        io::write_report(&report, report_path)?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let flow = io::read_flow(&args.flow)?;
    let gt = io::read_flow(&args.gt)?;
    let metrics = compute_metrics_mode(&flow, &gt, args.theta_mode)?;
    let report = io::Report {
        command: "eval".into(),
        seed: None,
        source: Some(args.flow.display().to_string()),
        target: Some(args.gt.display().to_string()),
        config: None,
        loss: None,
        metrics: Some(metrics),
        runtime_seconds: None,
    };
    match &args.report {
        Some(path) => {
            io::write_report(&report, path)?;
            println!(
                "metrics: EPE {:.4} m, AS {:.2}%, AR {:.2}%, Out {:.2}%, theta {:.4} rad",
                metrics.epe, metrics.acc_strict, metrics.acc_relaxed, metrics.outliers,
                metrics.angle_error
            );
        }
        None => {
            println!("{}", io::report_to_string(&report)?);
        }
    }
    Ok(())
}

fn cmd_normals(args: NormalsArgs) -> Result<()> {
    let cloud = io::read_cloud(&args.cloud)?;
    let normals = estimate_normals(&cloud, args.kn, args.viewpoint)?;
    io::write_normals(&normals, &args.out)?;
    let invalid = normals.normals().iter().filter(|n| n.is_none()).count();
    println!(
        "wrote {} normals to {} ({} degenerate)",
        normals.len(),
        args.out.display(),
        invalid
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let report = run_gradcheck(&GradcheckConfig {
        trials: args.trials,
        seed: args.seed,
        max_points: args.max_points,
        ..GradcheckConfig::default()
    })?;
    if report.pass {
        println!(
            "PASS, max rel err {:.3e} < 1e-4 ({} configurations, {} parameters, {} resampled)",
            report.max_rel_err, report.trials, report.parameters_checked, report.resampled
        );
        Ok(())
    } else {
        bail!(
            "FAIL, max rel err {:.3e} >= 1e-4 ({} configurations)",
            report.max_rel_err,
            report.trials
        );
    }
}
