//! Finite-difference verification of the analytic gradients.
//!
//! Random (cloud, flow, weights) configurations are drawn, the total loss
//! is differentiated analytically through the model parameterization, and
//! every parameter is probed with central finite differences of the same
//! objective. Configurations that land too close to an L1 kink, a
//! nearest-neighbor decision boundary, or a ReLU kink are resampled: at
//! such points the objective is not differentiable and a finite-difference
//! probe would straddle the non-smoothness. The margin is set well above
//! the probe step so every retained configuration is smooth across the
//! probed interval.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::flowmodel::{FlowModel, ModelKind};
use crate::kdtree::KdTree;
use crate::losses::{
    clusters_cyc, clusters_knn, clusters_surf, loss_dist, total_loss, ClusterSet, LossConfig,
    SmoothKind,
};
use crate::normals::{build_descriptors, estimate_normals, DescriptorSet};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    /// Configurations per model variant.
    pub trials: usize,
    pub seed: u64,
    pub max_points: usize,
    pub fd_step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            max_points: 64,
            fd_step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckReport {
    pub trials: usize,
    pub parameters_checked: usize,
    pub resampled: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Margin (in flow units) that keeps finite-difference probes away from L1
/// kinks and correspondence switches; 10x the probe step.
const KINK_MARGIN: f64 = 1e-4;
/// Pre-activation margin for ReLU units.
const RELU_MARGIN: f64 = 1e-4;
const MAX_RESAMPLES: usize = 500;

struct Trial {
    source: PointCloud,
    target: PointCloud,
    model: FlowModel,
    descriptors: Option<DescriptorSet>,
    cfg: LossConfig,
}

pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    if config.trials == 0 {
        return Err(Error::InvalidConfig("gradcheck needs at least one trial".into()));
    }
    if config.fd_step <= 0.0 || config.tolerance <= 0.0 {
        return Err(Error::InvalidConfig(
            "gradcheck step and tolerance must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut max_rel_err: f64 = 0.0;
    let mut resampled = 0usize;
    let mut parameters_checked = 0usize;
    let mut trials = 0usize;

    for variant in [ModelKind::Direct, ModelKind::CoordNet] {
        for _ in 0..config.trials {
            let trial = sample_smooth_trial(variant, config, &mut rng, &mut resampled)?;
            trials += 1;

            let flow = trial.model.forward(&trial.source)?;
            let breakdown = total_loss(
                &trial.source,
                &flow,
                &trial.target,
                trial.descriptors.as_ref(),
                trial.cfg,
            )?;
            let analytic = trial.model.backward(&trial.source, &breakdown.grad_total)?;

            let theta = trial.model.params_flat();
            let h = config.fd_step;
            for j in 0..theta.len() {
                let probe = |delta: f64| -> Result<f64> {
                    let mut model = trial.model.clone();
                    let mut t = theta.clone();
                    t[j] += delta;
                    model.set_params_flat(&t)?;
                    let f = model.forward(&trial.source)?;
                    Ok(total_loss(
                        &trial.source,
                        &f,
                        &trial.target,
                        trial.descriptors.as_ref(),
                        trial.cfg,
                    )?
                    .total)
                };
                let fd = (probe(h)? - probe(-h)?) / (2.0 * h);
                let denom = analytic[j].abs().max(fd.abs()).max(1e-6);
                let rel = (analytic[j] - fd).abs() / denom;
                max_rel_err = max_rel_err.max(rel);
                parameters_checked += 1;
            }
        }
    }

    Ok(GradcheckReport {
        trials,
        parameters_checked,
        resampled,
        max_rel_err,
        pass: max_rel_err < config.tolerance,
    })
}

fn sample_smooth_trial(
    variant: ModelKind,
    config: &GradcheckConfig,
    rng: &mut ChaCha8Rng,
    resampled: &mut usize,
) -> Result<Trial> {
    for _ in 0..MAX_RESAMPLES {
        let trial = sample_trial(variant, config, rng)?;
        if is_smooth_configuration(&trial)? {
            return Ok(trial);
        }
        *resampled += 1;
    }
    Err(Error::InvalidConfig(format!(
        "could not sample a smooth configuration in {MAX_RESAMPLES} attempts"
    )))
}

fn sample_trial(
    variant: ModelKind,
    config: &GradcheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Trial> {
    let n_src = rng.gen_range(8..=config.max_points);
    let n_tgt = rng.gen_range(8..=config.max_points);
    let source = random_cloud(rng, n_src);
    let target = random_cloud(rng, n_tgt);

    let smooth_kind = if rng.gen_bool(0.5) {
        SmoothKind::Surf
    } else {
        SmoothKind::Knn
    };
    let cfg = LossConfig {
        alpha_surf: rng.gen_range(0.1..5.0),
        alpha_cyc: rng.gen_range(0.1..10.0),
        k: rng.gen_range(2..=4),
        smooth_kind,
    };
    let descriptors = if smooth_kind == SmoothKind::Surf {
        let normals = estimate_normals(&source, 5, Vector3::new(0.0, 0.0, 4.0))?;
        Some(build_descriptors(
            &source,
            &normals,
            rng.gen_range(0.5..2.0),
        )?)
    } else {
        None
    };

    let model = match variant {
        ModelKind::Direct => {
            let mut model = FlowModel::new_direct(n_src);
            let flows: Vec<f64> = (0..3 * n_src).map(|_| rng.gen_range(-0.5..0.5)).collect();
            model.set_params_flat(&flows)?;
            model
        }
        ModelKind::CoordNet => FlowModel::new_coordnet(2, 8, rng)?,
    };

    Ok(Trial {
        source,
        target,
        model,
        descriptors,
        cfg,
    })
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect(),
    )
    .expect("non-empty finite cloud")
}

/// True when the configuration sits comfortably away from every source of
/// non-smoothness that a parameter probe could cross.
fn is_smooth_configuration(trial: &Trial) -> Result<bool> {
    let flow = trial.model.forward(&trial.source)?;

    // Nearest-neighbor decision margin: the runner-up target must be
    // clearly farther than the matched one for every warped point.
    let tree = KdTree::build(trial.target.to_arrays())?;
    for (x, f) in trial.source.points().iter().zip(flow.vectors()) {
        let w = x + f;
        let nearest = tree.knn(&[w.x, w.y, w.z], 2);
        if nearest.len() == 2 {
            let gap = nearest[1].dist_sq.sqrt() - nearest[0].dist_sq.sqrt();
            if gap < KINK_MARGIN {
                return Ok(false);
            }
        }
    }

    // L1 kink margin inside every active cluster.
    let mut active: Vec<ClusterSet> = Vec::new();
    match trial.cfg.smooth_kind {
        SmoothKind::Surf => {
            active.push(clusters_surf(trial.descriptors.as_ref().unwrap(), trial.cfg.k)?)
        }
        SmoothKind::Knn => active.push(clusters_knn(&trial.source, trial.cfg.k)?),
    }
    let (_, corr) = loss_dist(&trial.source, &flow, &trial.target, &tree)?;
    active.push(clusters_cyc(&corr, &trial.target, &tree, trial.cfg.k)?);
    for set in &active {
        for i in 0..set.len() {
            for &r in set.cluster(i) {
                if r == i {
                    continue;
                }
                let d = flow.get(i) - flow.get(r);
                if d.x.abs() < KINK_MARGIN || d.y.abs() < KINK_MARGIN || d.z.abs() < KINK_MARGIN {
                    return Ok(false);
                }
            }
        }
    }

    // ReLU kink margin for the coordinate network.
    if let FlowModel::CoordNet(net) = &trial.model {
        let mut a = nalgebra::DMatrix::from_fn(3, trial.source.len(), |row, col| {
            trial.source.get(col)[row]
        });
        let last = net.layers().len() - 1;
        for (l, layer) in net.layers().iter().enumerate() {
            let mut z = &layer.weights * &a;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            if l < last {
                if z.iter().any(|v| v.abs() < RELU_MARGIN) {
                    return Ok(false);
                }
                z.apply(|v| *v = v.max(0.0));
            }
            a = z;
        }
    }

    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_gradcheck_passes() {
        let report = run_gradcheck(&GradcheckConfig {
            trials: 4,
            seed: 11,
            max_points: 24,
            ..GradcheckConfig::default()
        })
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        assert_eq!(report.trials, 8); // both variants
        assert!(report.parameters_checked > 0);
    }

    #[test]
    fn zero_trials_rejected() {
        assert!(run_gradcheck(&GradcheckConfig {
            trials: 0,
            ..GradcheckConfig::default()
        })
        .is_err());
    }
}
