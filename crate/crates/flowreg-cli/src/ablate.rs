//! Loss-combination ablation over a batch of scenes.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use rayon::prelude::*;

use flowreg::cloud::{FlowField, PointCloud};
use flowreg::flowmodel::{fit, FitConfig, Preset};
use flowreg::io;
use flowreg::losses::SmoothKind;
use flowreg::metrics::{compute_metrics, Metrics};
use flowreg::synth::{generate_scene, SceneSpec};

#[derive(Args)]
pub struct AblateArgs {
    /// Output CSV with one row per loss combination.
    #[arg(long)]
    out: PathBuf,
    /// Directories containing source.csv, target.csv, gt_flow.csv
    /// (repeatable). When omitted, scenes are generated.
    #[arg(long)]
    scene_dir: Vec<PathBuf>,
    /// Number of generated scenes.
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    bodies_min: usize,
    #[arg(long, default_value_t = 4)]
    bodies_max: usize,
    /// Total source points per generated scene (bodies plus background).
    #[arg(long, default_value_t = 2048)]
    points_total: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, value_parser = super::parse_preset, default_value = "lidar")]
    preset: Preset,
    #[arg(long)]
    max_iters: Option<usize>,
}

/// One tested loss combination.
#[derive(Debug, Clone, Copy)]
struct RowSpec {
    smooth_on: bool,
    cyc_on: bool,
    surf_on: bool,
}

/// The combinations of the ablation, in fixed output order.
const ROWS: [RowSpec; 6] = [
    RowSpec { smooth_on: false, cyc_on: false, surf_on: false },
    RowSpec { smooth_on: true, cyc_on: false, surf_on: false },
    RowSpec { smooth_on: false, cyc_on: true, surf_on: false },
    RowSpec { smooth_on: false, cyc_on: false, surf_on: true },
    RowSpec { smooth_on: true, cyc_on: true, surf_on: false },
    RowSpec { smooth_on: false, cyc_on: true, surf_on: true },
];

/// Maps a row onto the fit configuration. The smoothness slot runs on
/// plain spatial clusters for the baseline rows and on surface-aware
/// clusters for the surf rows; the two never combine, so the flags are
/// mutually exclusive by construction.
pub(crate) fn row_config(base: &FitConfig, smooth_on: bool, cyc_on: bool, surf_on: bool) -> FitConfig {
    let mut cfg = *base;
    cfg.alpha_cyc = if cyc_on { base.alpha_cyc } else { 0.0 };
    if surf_on {
        cfg.smooth_kind = SmoothKind::Surf;
        cfg.alpha_surf = base.alpha_surf;
    } else if smooth_on {
        cfg.smooth_kind = SmoothKind::Knn;
        cfg.alpha_surf = base.alpha_surf;
    } else {
        cfg.alpha_surf = 0.0;
    }
    cfg
}

struct Scene {
    source: PointCloud,
    target: PointCloud,
    gt: FlowField,
    seed: u64,
}

pub fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let scenes = load_scenes(&args)?;
    if scenes.is_empty() {
        bail!("no scenes to ablate");
    }

    let mut base = FitConfig::from_preset(args.preset);
    if let Some(v) = args.max_iters {
        base.max_iters = v;
    }

    // All (scene, row) fits are independent; aggregation stays in fixed
    // row order regardless of scheduling.
    let jobs: Vec<(usize, usize)> = (0..ROWS.len())
        .flat_map(|r| (0..scenes.len()).map(move |s| (r, s)))
        .collect();
    let results: Vec<(usize, Metrics)> = jobs
        .par_iter()
        .map(|&(r, s)| -> Result<(usize, Metrics)> {
            let row = ROWS[r];
            let mut cfg = row_config(&base, row.smooth_on, row.cyc_on, row.surf_on);
            cfg.seed = scenes[s].seed;
            let outcome = fit(&scenes[s].source, &scenes[s].target, &cfg)
                .with_context(|| format!("fit failed for row {r}, scene {s}"))?;
            let metrics = compute_metrics(&outcome.flow, &scenes[s].gt)?;
            Ok((r, metrics))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut csv = String::from("smooth,cyc,surf,n_runs,epe,acc_strict,acc_relaxed,outliers,angle_error\n");
    println!("smooth cyc surf |   EPE [m]   AS [%]   AR [%]  Out [%]  theta [rad]  (n = {})", scenes.len());
    for (r, row) in ROWS.iter().enumerate() {
        let per_row: Vec<&Metrics> = results
            .iter()
            .filter(|(rr, _)| *rr == r)
            .map(|(_, m)| m)
            .collect();
        let n = per_row.len() as f64;
        let mean = |f: fn(&Metrics) -> f64| per_row.iter().map(|m| f(m)).sum::<f64>() / n;
        let epe = mean(|m| m.epe);
        let acc_s = mean(|m| m.acc_strict);
        let acc_r = mean(|m| m.acc_relaxed);
        let out = mean(|m| m.outliers);
        let theta = mean(|m| m.angle_error);
        let _ = writeln!(
            csv,
            "{},{},{},{},{epe},{acc_s},{acc_r},{out},{theta}",
            row.smooth_on as u8, row.cyc_on as u8, row.surf_on as u8, per_row.len()
        );
        println!(
            "{:^6} {:^3} {:^4} | {:9.4} {:8.2} {:8.2} {:8.2} {:12.4}",
            mark(row.smooth_on),
            mark(row.cyc_on),
            mark(row.surf_on),
            epe,
            acc_s,
            acc_r,
            out,
            theta
        );
    }

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    std::fs::write(&args.out, csv).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote ablation table to {}", args.out.display());
    Ok(())
}

fn mark(on: bool) -> &'static str {
    if on {
        "x"
    } else {
        "-"
    }
}

fn load_scenes(args: &AblateArgs) -> Result<Vec<Scene>> {
    if !args.scene_dir.is_empty() {
        return args
            .scene_dir
            .iter()
            .enumerate()
            .map(|(i, dir)| {
                Ok(Scene {
                    source: io::read_cloud(&dir.join("source.csv"))?,
                    target: io::read_cloud(&dir.join("target.csv"))?,
                    gt: io::read_flow(&dir.join("gt_flow.csv"))?,
                    seed: i as u64,
                })
            })
            .collect();
    }

    if args.bodies_min < 1 || args.bodies_max < args.bodies_min {
        bail!(
            "bad body range [{}, {}]",
            args.bodies_min,
            args.bodies_max
        );
    }
    (0..args.scenes)
        .map(|i| {
            let n_bodies = args.bodies_min + i % (args.bodies_max - args.bodies_min + 1);
            let spec = scene_spec(args.points_total, n_bodies, args.seed + i as u64, args.noise);
            let scene = generate_scene(&spec)?;
            Ok(Scene {
                source: scene.source,
                target: scene.target,
                gt: scene.gt_flow,
                seed: args.seed + i as u64,
            })
        })
        .collect()
}

/// Splits a total point budget between moving bodies (half) and the static
/// ground (the rest), with the target independently resampled so no exact
/// correspondences exist.
pub(crate) fn scene_spec(points_total: usize, n_bodies: usize, seed: u64, noise: f64) -> SceneSpec {
    let points_per_body = (points_total / 2) / n_bodies.max(1);
    let background = points_total - n_bodies * points_per_body;
    SceneSpec {
        n_bodies,
        points_per_body,
        background_points: background,
        resample_target: true,
        noise_sigma: noise,
        seed,
        ..SceneSpec::default()
    }
}
