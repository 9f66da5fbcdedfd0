//! Surface normal estimation and 6D surface-aware descriptors.
//!
//! Normals come from a PCA of each point's `k_n`-neighborhood (the point
//! itself included): the eigenvector of the covariance matrix belonging to
//! the smallest eigenvalue, flipped to face the sensor viewpoint.
//! Rank-deficient neighborhoods (collinear or coincident points) yield no
//! normal; such points fall back to position-only descriptors.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::kdtree::KdTree;

/// Relative eigenvalue threshold below which a neighborhood counts as
/// rank-deficient. Exactly collinear inputs land many orders of magnitude
/// under this; real planar patches sit far above it.
const RANK_EPS: f64 = 1e-12;

/// Per-point unit normals; `None` marks a degenerate neighborhood.
#[derive(Debug, Clone)]
pub struct NormalField {
    normals: Vec<Option<Vector3<f64>>>,
}

impl NormalField {
    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    pub fn normals(&self) -> &[Option<Vector3<f64>>] {
        &self.normals
    }

    pub fn get(&self, index: usize) -> Option<Vector3<f64>> {
        self.normals[index]
    }

    /// Normal as stored in descriptors and CSV dumps: zero when invalid.
    pub fn get_or_zero(&self, index: usize) -> Vector3<f64> {
        self.normals[index].unwrap_or_else(Vector3::zeros)
    }
}

/// 6D descriptors `(position, normal_scale * normal)`.
#[derive(Debug, Clone)]
pub struct DescriptorSet {
    descriptors: Vec<[f64; 6]>,
    normal_scale: f64,
}

impl DescriptorSet {
    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn descriptors(&self) -> &[[f64; 6]] {
        &self.descriptors
    }

    pub fn normal_scale(&self) -> f64 {
        self.normal_scale
    }
}

/// Estimates one normal per point from the `k_n` nearest neighbors
/// (including the point itself), oriented to satisfy
/// `n . (viewpoint - p) >= 0`.
pub fn estimate_normals(
    cloud: &PointCloud,
    k_n: usize,
    viewpoint: Vector3<f64>,
) -> Result<NormalField> {
    if k_n < 3 {
        return Err(Error::DegenerateNeighborhood(format!(
            "normal estimation needs k_n >= 3, got {k_n}"
        )));
    }
    if cloud.len() < k_n {
        return Err(Error::DegenerateNeighborhood(format!(
            "normal estimation needs at least k_n = {k_n} points, cloud has {}",
            cloud.len()
        )));
    }
    if !crate::cloud::is_finite3(&viewpoint) {
        return Err(Error::NonFinite("viewpoint"));
    }

    let tree = KdTree::build(cloud.to_arrays())?;
    let normals: Vec<Option<Vector3<f64>>> = cloud
        .points()
        .par_iter()
        .map(|p| {
            let neighbors = tree.knn(&[p.x, p.y, p.z], k_n);
            let mut mean = Vector3::zeros();
            for n in &neighbors {
                mean += cloud.get(n.index);
            }
            mean /= neighbors.len() as f64;
            let mut cov = Matrix3::zeros();
            for n in &neighbors {
                let d = cloud.get(n.index) - mean;
                cov += d * d.transpose();
            }
            cov /= neighbors.len() as f64;
            plane_normal(&cov).map(|n| orient(n, viewpoint - p))
        })
        .collect();

    Ok(NormalField { normals })
}

/// Eigenvector of the smallest covariance eigenvalue, or `None` when the
/// covariance has rank < 2.
fn plane_normal(cov: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let eigen = cov.symmetric_eigen();
    // Deterministic ascending order of the three eigenpairs.
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| {
        eigen.eigenvalues[a]
            .partial_cmp(&eigen.eigenvalues[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let lambda_mid = eigen.eigenvalues[idx[1]];
    let lambda_max = eigen.eigenvalues[idx[2]];
    if lambda_max <= 0.0 || lambda_mid <= RANK_EPS * lambda_max {
        return None;
    }
    let v = eigen.eigenvectors.column(idx[0]).into_owned();
    Some(v / v.norm())
}

/// Flips `n` to face the viewpoint; when the normal is exactly orthogonal
/// to the view ray, the first nonzero component is made positive so the
/// sign stays deterministic.
fn orient(n: Vector3<f64>, to_viewpoint: Vector3<f64>) -> Vector3<f64> {
    let dot = n.dot(&to_viewpoint);
    if dot < 0.0 {
        return -n;
    }
    if dot == 0.0 {
        for c in 0..3 {
            if n[c] != 0.0 {
                return if n[c] < 0.0 { -n } else { n };
            }
        }
    }
    n
}

/// Concatenates positions with scaled normals; invalid normals contribute a
/// zero normal slot.
pub fn build_descriptors(
    cloud: &PointCloud,
    normals: &NormalField,
    normal_scale: f64,
) -> Result<DescriptorSet> {
    if cloud.len() != normals.len() {
        return Err(Error::LengthMismatch {
            context: "descriptors",
            left: cloud.len(),
            right: normals.len(),
        });
    }
    if !normal_scale.is_finite() || normal_scale < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "normal_scale must be finite and non-negative, got {normal_scale}"
        )));
    }
    let descriptors = cloud
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let n = normals.get_or_zero(i) * normal_scale;
            [p.x, p.y, p.z, n.x, n.y, n.z]
        })
        .collect();
    Ok(DescriptorSet {
        descriptors,
        normal_scale,
    })
}
