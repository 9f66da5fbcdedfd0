//! Scene flow evaluation against ground truth.
//!
//! Per-point errors: `e = |f - f_gt|` and the relative error
//! `e_rel = e / |f_gt|`. When the ground-truth flow is zero, `e_rel` is 0
//! for an exact prediction and +inf otherwise, which makes the
//! absolute-or-relative threshold predicates below evaluate correctly.
//!
//! Aggregates:
//! * `epe` — mean point error in meters.
//! * `acc_strict` — percent with `e < 0.05` or `e_rel < 5%`.
//! * `acc_relaxed` — percent with `e < 0.1` or `e_rel < 10%`.
//! * `outliers` — percent with `e > 0.3` or `e_rel > 10%`.
//! * `angle_error` — mean angle between flow directions, by default in the
//!   homogeneous convention (append a unit fourth component, normalize),
//!   which stays defined for zero flows.

use serde::{Deserialize, Serialize};

use crate::cloud::FlowField;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epe: f64,
    pub acc_strict: f64,
    pub acc_relaxed: f64,
    pub outliers: f64,
    pub angle_error: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThetaMode {
    /// Angle between (f, 1) extensions; defined for all finite flows.
    Homogeneous,
    /// Plain 3D angle; points where either flow has zero norm are skipped.
    Raw3d,
}

/// Per-point absolute and relative errors.
pub fn point_errors(flow: &FlowField, gt: &FlowField) -> Result<Vec<(f64, f64)>> {
    check_lengths(flow, gt)?;
    Ok(flow
        .vectors()
        .iter()
        .zip(gt.vectors())
        .map(|(f, g)| {
            let e = (f - g).norm();
            let gt_norm = g.norm();
            let e_rel = if gt_norm == 0.0 {
                if e > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            } else {
                e / gt_norm
            };
            (e, e_rel)
        })
        .collect())
}

pub fn compute_metrics(flow: &FlowField, gt: &FlowField) -> Result<Metrics> {
    compute_metrics_mode(flow, gt, ThetaMode::Homogeneous)
}

pub fn compute_metrics_mode(flow: &FlowField, gt: &FlowField, mode: ThetaMode) -> Result<Metrics> {
    let errors = point_errors(flow, gt)?;
    let n = errors.len();
    let nf = n as f64;

    let mut epe = 0.0;
    let mut strict = 0usize;
    let mut relaxed = 0usize;
    let mut outliers = 0usize;
    for &(e, e_rel) in &errors {
        epe += e;
        if e < 0.05 || e_rel < 0.05 {
            strict += 1;
        }
        if e < 0.1 || e_rel < 0.1 {
            relaxed += 1;
        }
        if e > 0.3 || e_rel > 0.1 {
            outliers += 1;
        }
    }
    epe /= nf;

    let angle_error = match mode {
        ThetaMode::Homogeneous => {
            let mut acc = 0.0;
            for (f, g) in flow.vectors().iter().zip(gt.vectors()) {
                let nf4 = (f.norm_squared() + 1.0).sqrt();
                let ng4 = (g.norm_squared() + 1.0).sqrt();
                let cos = (f.dot(g) + 1.0) / (nf4 * ng4);
                acc += cos.clamp(-1.0, 1.0).acos();
            }
            acc / nf
        }
        ThetaMode::Raw3d => {
            let mut acc = 0.0;
            let mut count = 0usize;
            for (f, g) in flow.vectors().iter().zip(gt.vectors()) {
                let nf3 = f.norm();
                let ng3 = g.norm();
                if nf3 == 0.0 || ng3 == 0.0 {
                    continue;
                }
                let cos = f.dot(g) / (nf3 * ng3);
                acc += cos.clamp(-1.0, 1.0).acos();
                count += 1;
            }
            if count == 0 {
                0.0
            } else {
                acc / count as f64
            }
        }
    };

    Ok(Metrics {
        epe,
        acc_strict: 100.0 * strict as f64 / nf,
        acc_relaxed: 100.0 * relaxed as f64 / nf,
        outliers: 100.0 * outliers as f64 / nf,
        angle_error,
        n_points: n,
    })
}

fn check_lengths(flow: &FlowField, gt: &FlowField) -> Result<()> {
    if flow.len() != gt.len() {
        return Err(Error::LengthMismatch {
            context: "metrics",
            left: flow.len(),
            right: gt.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(vectors: &[[f64; 3]]) -> FlowField {
        FlowField::new(vectors.iter().map(|v| Vector3::from(*v)).collect()).unwrap()
    }

    #[test]
    fn identical_flows_are_perfect() {
        let f = field(&[[1.0, 0.5, -0.25], [0.0, 0.0, 0.0], [2.0, 2.0, 2.0]]);
        let m = compute_metrics(&f, &f).unwrap();
        assert_eq!(m.epe, 0.0);
        assert_eq!(m.acc_strict, 100.0);
        assert_eq!(m.acc_relaxed, 100.0);
        assert_eq!(m.outliers, 0.0);
        assert_eq!(m.angle_error, 0.0);
        assert_eq!(m.n_points, 3);
    }

    #[test]
    fn threshold_arithmetic_single_point() {
        let m = compute_metrics(&field(&[[1.07, 0.0, 0.0]]), &field(&[[1.0, 0.0, 0.0]])).unwrap();
        assert_relative_eq!(m.epe, 0.07, max_relative = 1e-12);
        assert_eq!(m.acc_strict, 0.0); // e = 0.07 >= 0.05 and rel = 7% >= 5%
        assert_eq!(m.acc_relaxed, 100.0); // e < 0.1
        assert_eq!(m.outliers, 0.0); // e <= 0.3 and rel <= 10%
    }

    #[test]
    fn predicates_are_independent() {
        // Tiny motion: absolute error is small (strict passes) while the
        // relative error is 100% (outlier fires).
        let m = compute_metrics(&field(&[[0.02, 0.0, 0.0]]), &field(&[[0.01, 0.0, 0.0]])).unwrap();
        assert_eq!(m.acc_strict, 100.0);
        assert_eq!(m.acc_relaxed, 100.0);
        assert_eq!(m.outliers, 100.0);
    }

    #[test]
    fn zero_ground_truth_sentinel() {
        let errors = point_errors(&field(&[[0.02, 0.0, 0.0]]), &field(&[[0.0, 0.0, 0.0]])).unwrap();
        assert_relative_eq!(errors[0].0, 0.02, max_relative = 1e-12);
        assert!(errors[0].1.is_infinite());

        let exact = point_errors(&field(&[[0.0; 3]]), &field(&[[0.0; 3]])).unwrap();
        assert_eq!(exact[0], (0.0, 0.0));
    }

    #[test]
    fn matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 256;
        let flow = FlowField::new(
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
        .unwrap();
        let gt = FlowField::new(
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
        .unwrap();
        let m = compute_metrics(&flow, &gt).unwrap();

        // Straightforward reimplementation.
        let mut epe = 0.0;
        let (mut acc_s, mut acc_r, mut out) = (0.0, 0.0, 0.0);
        let mut theta = 0.0;
        for i in 0..n {
            let e = (flow.get(i) - gt.get(i)).norm();
            let rel = e / gt.get(i).norm();
            epe += e / n as f64;
            if e < 0.05 || rel < 0.05 {
                acc_s += 100.0 / n as f64;
            }
            if e < 0.1 || rel < 0.1 {
                acc_r += 100.0 / n as f64;
            }
            if e > 0.3 || rel > 0.1 {
                out += 100.0 / n as f64;
            }
            let a = flow.get(i).push(1.0);
            let b = gt.get(i).push(1.0);
            theta += (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos() / n as f64;
        }
        assert_relative_eq!(m.epe, epe, max_relative = 1e-12);
        assert_relative_eq!(m.acc_strict, acc_s, max_relative = 1e-12);
        assert_relative_eq!(m.acc_relaxed, acc_r, max_relative = 1e-12);
        assert_relative_eq!(m.outliers, out, max_relative = 1e-12);
        assert_relative_eq!(m.angle_error, theta, max_relative = 1e-9);
    }

    #[test]
    fn strict_implies_relaxed() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..20 {
            let n = rng.gen_range(1..100);
            let flow = FlowField::new(
                (0..n)
                    .map(|_| Vector3::new(rng.gen_range(-0.5..0.5), 0.0, 0.0))
                    .collect(),
            )
            .unwrap();
            let gt = FlowField::new(
                (0..n)
                    .map(|_| Vector3::new(rng.gen_range(-0.5..0.5), 0.0, 0.0))
                    .collect(),
            )
            .unwrap();
            let m = compute_metrics(&flow, &gt).unwrap();
            assert!(m.acc_strict <= m.acc_relaxed);
        }
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let n = 64;
        let f: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let g: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let a = compute_metrics(
            &FlowField::new(f.clone()).unwrap(),
            &FlowField::new(g.clone()).unwrap(),
        )
        .unwrap();
        let b = compute_metrics(
            &FlowField::new(f.iter().rev().cloned().collect()).unwrap(),
            &FlowField::new(g.iter().rev().cloned().collect()).unwrap(),
        )
        .unwrap();
        assert_relative_eq!(a.epe, b.epe, max_relative = 1e-12);
        assert_relative_eq!(a.acc_strict, b.acc_strict, max_relative = 1e-12);
        assert_relative_eq!(a.angle_error, b.angle_error, max_relative = 1e-12);
    }

    #[test]
    fn raw3d_skips_zero_norm_points() {
        let flow = field(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let gt = field(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let m = compute_metrics_mode(&flow, &gt, ThetaMode::Raw3d).unwrap();
        // Only the second pair counts: 90 degrees.
        assert_relative_eq!(m.angle_error, std::f64::consts::FRAC_PI_2, max_relative = 1e-12);
    }
}
