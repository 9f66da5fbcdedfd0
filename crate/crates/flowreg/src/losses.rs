//! Self-supervised scene flow losses and rigid-cluster constructions.
//!
//! The objective combines a nearest-neighbor alignment term with L1
//! smoothness penalties evaluated over rigid clusters:
//!
//! * `loss_dist` — mean squared distance from each warped source point to
//!   its nearest target point.
//! * `clusters_knn` — plain spatial neighborhoods in the source cloud.
//! * `clusters_surf` — neighborhoods in the 6D space of surface-aware
//!   descriptors (position + scaled normal), which keeps clusters from
//!   bleeding across nearby but differently-oriented surfaces.
//! * `clusters_cyc` — cyclic-consistency clusters: source points whose
//!   current flow sends them into the neighborhood of the same matched
//!   target point.
//! * `loss_smooth` — per-cluster-normalized L1 penalty on flow differences.
//!
//! Gradients are analytic. Cluster assignments and correspondences are
//! treated as locally constant (they are recomputed between iterations,
//! not differentiated through), and `sign(0) = 0` in the L1 subgradient.
//! Per-point work may run in parallel; every reduction happens in a fixed
//! order so results are identical for any thread count.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{FlowField, PointCloud};
use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::normals::DescriptorSet;

/// One loss term: scalar value plus its gradient with respect to the flow.
#[derive(Debug, Clone)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Vec<Vector3<f64>>,
}

impl LossTerm {
    fn zero(n: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![Vector3::zeros(); n],
        }
    }
}

/// For each source point, the index of the nearest target point to its
/// warped position (ties broken by lower target index).
#[derive(Debug, Clone)]
pub struct Correspondences {
    pub target_index: Vec<usize>,
}

impl Correspondences {
    pub fn len(&self) -> usize {
        self.target_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_index.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterKind {
    Knn,
    Surf,
    Cyc,
}

/// Per source point, the indices of its rigid cluster.
#[derive(Debug, Clone)]
pub struct ClusterSet {
    pub kind: ClusterKind,
    clusters: Vec<Vec<usize>>,
}

impl ClusterSet {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn cluster(&self, index: usize) -> &[usize] {
        &self.clusters[index]
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }
}

/// Mean squared nearest-neighbor distance of the warped source cloud to the
/// target, with its gradient and the matched correspondences.
///
/// `target_tree` must be built over `target` positions.
pub fn loss_dist(
    source: &PointCloud,
    flow: &FlowField,
    target: &PointCloud,
    target_tree: &KdTree<3>,
) -> Result<(LossTerm, Correspondences)> {
    check_flow_len(source, flow)?;
    if target_tree.len() != target.len() {
        return Err(Error::LengthMismatch {
            context: "target index",
            left: target_tree.len(),
            right: target.len(),
        });
    }
    let n = source.len() as f64;
    let per_point: Vec<(f64, usize, Vector3<f64>)> = source
        .points()
        .par_iter()
        .zip(flow.vectors().par_iter())
        .map(|(x, f)| {
            let warped = x + f;
            let nearest = target_tree.knn(&[warped.x, warped.y, warped.z], 1)[0];
            let residual = warped - target.get(nearest.index);
            (nearest.dist_sq, nearest.index, residual * (2.0 / n))
        })
        .collect();

    let mut value = 0.0;
    let mut grad = Vec::with_capacity(per_point.len());
    let mut target_index = Vec::with_capacity(per_point.len());
    for (d2, idx, g) in per_point {
        value += d2;
        grad.push(g);
        target_index.push(idx);
    }
    value /= n;

    Ok((LossTerm { value, grad }, Correspondences { target_index }))
}

/// k-nearest-neighbor rigid clusters in the source cloud, excluding the
/// point itself. `k` clamps to `n - 1`.
pub fn clusters_knn(source: &PointCloud, k: usize) -> Result<ClusterSet> {
    let tree = KdTree::build(source.to_arrays())?;
    let clusters = knn_clusters_excluding_self(&tree, &source.to_arrays(), k);
    Ok(ClusterSet {
        kind: ClusterKind::Knn,
        clusters,
    })
}

/// Surface-aware rigid clusters: k nearest neighbors in 6D descriptor
/// space, excluding the point itself.
pub fn clusters_surf(descriptors: &DescriptorSet, k: usize) -> Result<ClusterSet> {
    let desc = descriptors.descriptors().to_vec();
    let tree = KdTree::build(desc.clone())?;
    let clusters = knn_clusters_excluding_self(&tree, &desc, k);
    Ok(ClusterSet {
        kind: ClusterKind::Surf,
        clusters,
    })
}

fn knn_clusters_excluding_self<const D: usize>(
    tree: &KdTree<D>,
    points: &[[f64; D]],
    k: usize,
) -> Vec<Vec<usize>> {
    let n = points.len();
    let k_eff = k.min(n.saturating_sub(1));
    if k_eff == 0 {
        return vec![Vec::new(); n];
    }
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            // Query one extra slot so dropping the self match still leaves
            // the k nearest other points.
            let mut members: Vec<usize> = tree
                .knn(p, k_eff + 1)
                .into_iter()
                .map(|nb| nb.index)
                .filter(|&idx| idx != i)
                .collect();
            members.truncate(k_eff);
            members
        })
        .collect()
}

/// Cyclic-consistency rigid clusters. Point `r` belongs to the cluster of
/// `i` when `r`'s matched target point lies in the k-neighborhood (in the
/// target cloud) of `i`'s matched target point. Every point belongs to its
/// own cluster. Members are listed in ascending index order.
pub fn clusters_cyc(
    corr: &Correspondences,
    target: &PointCloud,
    target_tree: &KdTree<3>,
    k: usize,
) -> Result<ClusterSet> {
    if target_tree.len() != target.len() {
        return Err(Error::LengthMismatch {
            context: "target index",
            left: target_tree.len(),
            right: target.len(),
        });
    }
    let n = corr.len();
    // Invert the correspondence map: for each target point, the source
    // points matched to it, in ascending order.
    let mut matched_sources: Vec<Vec<usize>> = vec![Vec::new(); target.len()];
    for (r, &t) in corr.target_index.iter().enumerate() {
        matched_sources[t].push(r);
    }

    let clusters: Vec<Vec<usize>> = corr
        .target_index
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let y = target.get(t);
            let mut members = Vec::new();
            for nb in target_tree.knn(&[y.x, y.y, y.z], k.min(target.len())) {
                members.extend_from_slice(&matched_sources[nb.index]);
            }
            members.sort_unstable();
            if members.binary_search(&i).is_err() {
                let pos = members.partition_point(|&m| m < i);
                members.insert(pos, i);
            }
            members
        })
        .collect();

    debug_assert_eq!(clusters.len(), n);
    Ok(ClusterSet {
        kind: ClusterKind::Cyc,
        clusters,
    })
}

/// L1 smoothness of the flow over rigid clusters, normalized per point by
/// its cluster size. Empty clusters contribute zero. The exact subgradient
/// accumulates both sides of every (point, neighbor) pair.
pub fn loss_smooth(flow: &FlowField, clusters: &ClusterSet) -> Result<LossTerm> {
    let n = flow.len();
    if clusters.len() != n {
        return Err(Error::LengthMismatch {
            context: "smoothness clusters",
            left: clusters.len(),
            right: n,
        });
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = vec![Vector3::zeros(); n];
    for i in 0..n {
        let members = clusters.cluster(i);
        if members.is_empty() {
            continue;
        }
        let w = inv_n / members.len() as f64;
        let fi = flow.get(i);
        for &r in members {
            let diff = fi - flow.get(r);
            value += w * (diff.x.abs() + diff.y.abs() + diff.z.abs());
            let s = Vector3::new(sign(diff.x), sign(diff.y), sign(diff.z)) * w;
            grad[i] += s;
            grad[r] -= s;
        }
    }
    Ok(LossTerm { value, grad })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Which rigid clusters feed the smoothness term of the combined
/// objective: surface-aware descriptors (default) or the plain spatial
/// baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothKind {
    Surf,
    Knn,
}

/// Weights and neighborhood size of the combined objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha_surf: f64,
    pub alpha_cyc: f64,
    pub k: usize,
    pub smooth_kind: SmoothKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_surf: 1.0,
            alpha_cyc: 10.0,
            k: 4,
            smooth_kind: SmoothKind::Surf,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha_surf.is_finite() || self.alpha_surf < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha_surf must be finite and non-negative, got {}",
                self.alpha_surf
            )));
        }
        if !self.alpha_cyc.is_finite() || self.alpha_cyc < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha_cyc must be finite and non-negative, got {}",
                self.alpha_cyc
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scalar values of each term plus the gradient of the combined objective,
/// `total = dist + alpha_surf * surf + alpha_cyc * cyc`.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub dist: f64,
    pub surf: f64,
    pub cyc: f64,
    pub total: f64,
    pub grad_total: Vec<Vector3<f64>>,
    pub alpha_surf: f64,
    pub alpha_cyc: f64,
}

/// Reusable evaluator for repeated loss computation against fixed source
/// and target clouds. The smoothness clusters depend only on the source
/// geometry and are built once; correspondences are refreshed on every
/// call and the cyclic clusters every `cyc_refresh_every` calls.
pub struct LossEvaluator<'a> {
    source: &'a PointCloud,
    target: &'a PointCloud,
    target_tree: KdTree<3>,
    smooth_clusters: Option<ClusterSet>,
    cfg: LossConfig,
    cyc_refresh_every: usize,
    calls: usize,
    cyc_cache: Option<ClusterSet>,
}

impl<'a> LossEvaluator<'a> {
    /// `descriptors` are required when `alpha_surf > 0` and the smoothness
    /// term runs on surface-aware clusters.
    pub fn new(
        source: &'a PointCloud,
        target: &'a PointCloud,
        descriptors: Option<&DescriptorSet>,
        cfg: LossConfig,
        cyc_refresh_every: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if cyc_refresh_every == 0 {
            return Err(Error::InvalidConfig(
                "cyc_refresh_every must be at least 1".into(),
            ));
        }
        let target_tree = KdTree::build(target.to_arrays())?;
        let smooth_clusters = if cfg.alpha_surf > 0.0 {
            Some(match cfg.smooth_kind {
                SmoothKind::Surf => {
                    let desc = descriptors.ok_or_else(|| {
                        Error::InvalidConfig(
                            "surface-aware smoothness needs descriptors".into(),
                        )
                    })?;
                    if desc.len() != source.len() {
                        return Err(Error::LengthMismatch {
                            context: "descriptors",
                            left: desc.len(),
                            right: source.len(),
                        });
                    }
                    clusters_surf(desc, cfg.k)?
                }
                SmoothKind::Knn => clusters_knn(source, cfg.k)?,
            })
        } else {
            None
        };
        Ok(Self {
            source,
            target,
            target_tree,
            smooth_clusters,
            cfg,
            cyc_refresh_every,
            calls: 0,
            cyc_cache: None,
        })
    }

    pub fn evaluate(&mut self, flow: &FlowField) -> Result<LossBreakdown> {
        check_flow_len(self.source, flow)?;
        let n = self.source.len();
        let (dist_term, corr) = loss_dist(self.source, flow, self.target, &self.target_tree)?;

        let surf_term = match &self.smooth_clusters {
            Some(clusters) => loss_smooth(flow, clusters)?,
            None => LossTerm::zero(n),
        };

        let cyc_term = if self.cfg.alpha_cyc > 0.0 {
            if self.cyc_cache.is_none() || self.calls % self.cyc_refresh_every == 0 {
                self.cyc_cache = Some(clusters_cyc(
                    &corr,
                    self.target,
                    &self.target_tree,
                    self.cfg.k,
                )?);
            }
            loss_smooth(flow, self.cyc_cache.as_ref().unwrap())?
        } else {
            LossTerm::zero(n)
        };
        self.calls += 1;

        let total =
            dist_term.value + self.cfg.alpha_surf * surf_term.value + self.cfg.alpha_cyc * cyc_term.value;
        let grad_total: Vec<Vector3<f64>> = (0..n)
            .map(|i| {
                dist_term.grad[i]
                    + surf_term.grad[i] * self.cfg.alpha_surf
                    + cyc_term.grad[i] * self.cfg.alpha_cyc
            })
            .collect();

        Ok(LossBreakdown {
            dist: dist_term.value,
            surf: surf_term.value,
            cyc: cyc_term.value,
            total,
            grad_total,
            alpha_surf: self.cfg.alpha_surf,
            alpha_cyc: self.cfg.alpha_cyc,
        })
    }
}

/// One-shot evaluation of the combined objective. Clusters and
/// correspondences are derived from the given flow; nothing is cached.
pub fn total_loss(
    source: &PointCloud,
    flow: &FlowField,
    target: &PointCloud,
    descriptors: Option<&DescriptorSet>,
    cfg: LossConfig,
) -> Result<LossBreakdown> {
    let mut evaluator = LossEvaluator::new(source, target, descriptors, cfg, 1)?;
    evaluator.evaluate(flow)
}

fn check_flow_len(source: &PointCloud, flow: &FlowField) -> Result<()> {
    if source.len() != flow.len() {
        return Err(Error::LengthMismatch {
            context: "flow field",
            left: source.len(),
            right: flow.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normals::{build_descriptors, estimate_normals};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.iter().map(|p| Vector3::from(*p)).collect()).unwrap()
    }

    fn flow(vectors: &[[f64; 3]]) -> FlowField {
        FlowField::new(vectors.iter().map(|v| Vector3::from(*v)).collect()).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-scale..scale),
                        rng.gen_range(-scale..scale),
                        rng.gen_range(-scale..scale),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn dist_hand_example() {
        let x = cloud(&[[0.0, 0.0, 0.0]]);
        let f = flow(&[[1.0, 0.0, 0.0]]);
        let y = cloud(&[[2.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        let tree = KdTree::build(y.to_arrays()).unwrap();
        let (term, corr) = loss_dist(&x, &f, &y, &tree).unwrap();
        assert_eq!(term.value, 1.0);
        assert_eq!(corr.target_index, vec![0]);
        assert_eq!(term.grad[0], Vector3::new(-2.0, 0.0, 0.0));
    }

    #[test]
    fn dist_zero_on_perfect_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_cloud(&mut rng, 40, 1.0);
        let shift = Vector3::new(0.5, -0.25, 0.125);
        let y = PointCloud::new(x.points().iter().map(|p| p + shift).collect()).unwrap();
        let f = FlowField::new(vec![shift; x.len()]).unwrap();
        let tree = KdTree::build(y.to_arrays()).unwrap();
        let (term, _) = loss_dist(&x, &f, &y, &tree).unwrap();
        assert_eq!(term.value, 0.0);
        assert!(term.grad.iter().all(|g| *g == Vector3::zeros()));
    }

    #[test]
    fn dist_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_cloud(&mut rng, 64, 1.0);
        let y = random_cloud(&mut rng, 64, 1.0);
        let f = FlowField::new(
            (0..64)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                    )
                })
                .collect(),
        )
        .unwrap();
        let tree = KdTree::build(y.to_arrays()).unwrap();
        let (term, corr) = loss_dist(&x, &f, &y, &tree).unwrap();

        let mut expected = 0.0;
        for i in 0..x.len() {
            let w = x.get(i) + f.get(i);
            let mut best = f64::INFINITY;
            let mut best_idx = usize::MAX;
            for j in 0..y.len() {
                let d = (w - y.get(j)).norm_squared();
                if d < best {
                    best = d;
                    best_idx = j;
                }
            }
            expected += best;
            assert_eq!(corr.target_index[i], best_idx);
        }
        expected /= x.len() as f64;
        assert_relative_eq!(term.value, expected, max_relative = 1e-12);
    }

    #[test]
    fn knn_clusters_tie_rule_on_collinear_points() {
        let x = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let set = clusters_knn(&x, 1).unwrap();
        // The middle point ties between both endpoints; lower index wins.
        assert_eq!(set.cluster(1), &[0]);
        assert_eq!(set.cluster(0), &[1]);
        assert_eq!(set.cluster(2), &[1]);
    }

    #[test]
    fn knn_clusters_k_equals_all_others() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_cloud(&mut rng, 12, 1.0);
        let set = clusters_knn(&x, 11).unwrap();
        for i in 0..12 {
            let mut members = set.cluster(i).to_vec();
            members.sort_unstable();
            let expected: Vec<usize> = (0..12).filter(|&j| j != i).collect();
            assert_eq!(members, expected);
        }
    }

    #[test]
    fn surf_zero_scale_equals_knn() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_cloud(&mut rng, 80, 1.0);
        let normals = estimate_normals(&x, 5, Vector3::new(0.0, 0.0, 5.0)).unwrap();
        let desc = build_descriptors(&x, &normals, 0.0).unwrap();
        for k in [1, 3, 8] {
            let surf = clusters_surf(&desc, k).unwrap();
            let knn = clusters_knn(&x, k).unwrap();
            assert_eq!(surf.clusters(), knn.clusters(), "k = {k}");
        }
    }

    #[test]
    fn surf_cluster_stays_on_its_surface_near_a_corner() {
        // A ground patch and a wall 0.08 m apart with a 0.05 m sample grid.
        // For the ground corner point the nearest wall sample is closer than
        // the fourth-nearest ground sample, so plain knn mixes surfaces while
        // the surface-aware cluster does not.
        let mut pts = Vec::new();
        for i in 0..5 {
            for j in 0..2 {
                pts.push(Vector3::new(0.05 * i as f64, 0.08 + 0.05 * j as f64, 0.0));
            }
        }
        let ground_len = pts.len();
        for i in 0..5 {
            for j in 0..2 {
                pts.push(Vector3::new(0.05 * i as f64, 0.0, 0.04 + 0.05 * j as f64));
            }
        }
        let x = PointCloud::new(pts).unwrap();
        let viewpoint = Vector3::new(0.1, 0.5, 0.5);
        let normals = estimate_normals(&x, 4, viewpoint).unwrap();
        let desc = build_descriptors(&x, &normals, 1.0).unwrap();

        let corner = 0; // ground point at (0, 0.08, 0)
        let knn = clusters_knn(&x, 4).unwrap();
        let surf = clusters_surf(&desc, 4).unwrap();
        assert!(
            knn.cluster(corner).iter().any(|&m| m >= ground_len),
            "spatial cluster should reach the wall: {:?}",
            knn.cluster(corner)
        );
        assert!(
            surf.cluster(corner).iter().all(|&m| m < ground_len),
            "surface-aware cluster should stay on the ground: {:?}",
            surf.cluster(corner)
        );

        // Brute-force 6D check of the surface-aware cluster.
        let d = desc.descriptors();
        let mut ranked: Vec<(f64, usize)> = (0..x.len())
            .filter(|&j| j != corner)
            .map(|j| {
                let mut acc = 0.0;
                for c in 0..6 {
                    let diff = d[corner][c] - d[j][c];
                    acc += diff * diff;
                }
                (acc, j)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = ranked.iter().take(4).map(|&(_, j)| j).collect();
        assert_eq!(surf.cluster(corner), &expected[..]);
    }

    #[test]
    fn cyc_identity_configuration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_cloud(&mut rng, 30, 1.0);
        let f = FlowField::zeros(30);
        let tree = KdTree::build(x.to_arrays()).unwrap();
        let (_, corr) = loss_dist(&x, &f, &x, &tree).unwrap();

        // k = 1: every cluster collapses to the point itself.
        let set = clusters_cyc(&corr, &x, &tree, 1).unwrap();
        for i in 0..30 {
            assert_eq!(set.cluster(i), &[i]);
        }

        // Any k: cluster = spatial k-neighborhood (self included).
        for k in [2, 4, 7] {
            let set = clusters_cyc(&corr, &x, &tree, k).unwrap();
            for i in 0..30 {
                let mut expected: Vec<usize> = tree
                    .knn(&x.to_arrays()[i], k)
                    .into_iter()
                    .map(|nb| nb.index)
                    .collect();
                if !expected.contains(&i) {
                    expected.push(i);
                }
                expected.sort_unstable();
                assert_eq!(set.cluster(i), &expected[..], "k = {k}, i = {i}");
            }
        }
    }

    #[test]
    fn cyc_matches_membership_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_cloud(&mut rng, 128, 1.0);
        let y = random_cloud(&mut rng, 128, 1.0);
        let f = FlowField::new(
            (0..128)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-0.4..0.4),
                        rng.gen_range(-0.4..0.4),
                        rng.gen_range(-0.4..0.4),
                    )
                })
                .collect(),
        )
        .unwrap();
        let tree = KdTree::build(y.to_arrays()).unwrap();
        let (_, corr) = loss_dist(&x, &f, &y, &tree).unwrap();
        let set = clusters_cyc(&corr, &y, &tree, 4).unwrap();

        // O(n^2) membership oracle over (i, r).
        for i in 0..x.len() {
            let neigh: Vec<usize> = tree
                .knn(&y.to_arrays()[corr.target_index[i]], 4)
                .into_iter()
                .map(|nb| nb.index)
                .collect();
            let mut expected: Vec<usize> = (0..x.len())
                .filter(|&r| neigh.contains(&corr.target_index[r]))
                .collect();
            if !expected.contains(&i) {
                expected.push(i);
                expected.sort_unstable();
            }
            assert_eq!(set.cluster(i), &expected[..], "i = {i}");
        }
    }

    #[test]
    fn smooth_hand_example() {
        let f = flow(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let set = ClusterSet {
            kind: ClusterKind::Knn,
            clusters: vec![vec![1], vec![0]],
        };
        let term = loss_smooth(&f, &set).unwrap();
        assert_eq!(term.value, 1.0);
        assert_eq!(term.grad[0], Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(term.grad[1], Vector3::new(-1.0, 0.0, 0.0));
    }

    #[test]
    fn smooth_constant_flow_is_zero() {
        let c = Vector3::new(0.3, -0.7, 0.1);
        let f = FlowField::new(vec![c; 10]).unwrap();
        let set = ClusterSet {
            kind: ClusterKind::Knn,
            clusters: (0..10).map(|i| vec![(i + 1) % 10, (i + 3) % 10]).collect(),
        };
        let term = loss_smooth(&f, &set).unwrap();
        assert_eq!(term.value, 0.0);
        assert!(term.grad.iter().all(|g| *g == Vector3::zeros()));
    }

    #[test]
    fn smooth_empty_cluster_contributes_zero() {
        let f = flow(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]);
        let set = ClusterSet {
            kind: ClusterKind::Cyc,
            clusters: vec![vec![], vec![]],
        };
        let term = loss_smooth(&f, &set).unwrap();
        assert_eq!(term.value, 0.0);
    }

    #[test]
    fn smooth_matches_double_sum_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 64;
        // Resample flows whose in-cluster differences sit too close to an L1
        // kink for the finite-difference probe.
        let (f, set) = loop {
            let f = FlowField::new(
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
            let set = ClusterSet {
                kind: ClusterKind::Knn,
                clusters: (0..n)
                    .map(|_| {
                        (0..4)
                            .map(|_| rng.gen_range(0..n))
                            .collect::<Vec<usize>>()
                    })
                    .collect(),
            };
            let kink = (0..n).any(|i| {
                set.cluster(i).iter().any(|&r| {
                    let d = f.get(i) - f.get(r);
                    (i != r) && (d.x.abs() < 1e-4 || d.y.abs() < 1e-4 || d.z.abs() < 1e-4)
                })
            });
            if !kink {
                break (f, set);
            }
        };

        let term = loss_smooth(&f, &set).unwrap();

        let direct = |field: &FlowField| -> f64 {
            let mut acc = 0.0;
            for i in 0..n {
                let members = set.cluster(i);
                if members.is_empty() {
                    continue;
                }
                let mut cluster_sum = 0.0;
                for &r in members {
                    let d = field.get(i) - field.get(r);
                    cluster_sum += d.x.abs() + d.y.abs() + d.z.abs();
                }
                acc += cluster_sum / members.len() as f64;
            }
            acc / n as f64
        };
        assert_relative_eq!(term.value, direct(&f), max_relative = 1e-12);

        let h = 1e-5;
        for i in (0..n).step_by(7) {
            for c in 0..3 {
                let mut plus = f.vectors().to_vec();
                plus[i][c] += h;
                let mut minus = f.vectors().to_vec();
                minus[i][c] -= h;
                let fd = (direct(&FlowField::new(plus).unwrap())
                    - direct(&FlowField::new(minus).unwrap()))
                    / (2.0 * h);
                let analytic = term.grad[i][c];
                let denom = analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (analytic - fd).abs() / denom < 1e-4,
                    "grad[{i}][{c}]: analytic {analytic}, fd {fd}"
                );
            }
        }
    }

    #[test]
    fn total_weights_off_equals_dist() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_cloud(&mut rng, 32, 1.0);
        let y = random_cloud(&mut rng, 32, 1.0);
        let f = FlowField::zeros(32);
        let cfg = LossConfig {
            alpha_surf: 0.0,
            alpha_cyc: 0.0,
            ..LossConfig::default()
        };
        let breakdown = total_loss(&x, &f, &y, None, cfg).unwrap();
        assert_eq!(breakdown.total, breakdown.dist);
        assert_eq!(breakdown.surf, 0.0);
        assert_eq!(breakdown.cyc, 0.0);
    }

    #[test]
    fn total_zero_for_exact_rigid_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_cloud(&mut rng, 60, 1.0);
        let c = Vector3::new(0.8, -0.2, 0.4);
        let y = PointCloud::new(x.points().iter().map(|p| p + c).collect()).unwrap();
        let f = FlowField::new(vec![c; x.len()]).unwrap();
        let normals = estimate_normals(&x, 5, Vector3::new(0.0, 0.0, 10.0)).unwrap();
        let desc = build_descriptors(&x, &normals, 1.0).unwrap();
        let breakdown = total_loss(&x, &f, &y, Some(&desc), LossConfig::default()).unwrap();
        assert!(breakdown.dist <= 1e-12);
        assert_eq!(breakdown.surf, 0.0);
        assert_eq!(breakdown.cyc, 0.0);
        assert!(breakdown.total <= 1e-12);
    }

    #[test]
    fn total_identity_holds_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_cloud(&mut rng, 50, 1.0);
        let y = random_cloud(&mut rng, 45, 1.0);
        let f = FlowField::new(
            (0..50)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                    )
                })
                .collect(),
        )
        .unwrap();
        let normals = estimate_normals(&x, 5, Vector3::zeros()).unwrap();
        let desc = build_descriptors(&x, &normals, 1.0).unwrap();
        let cfg = LossConfig {
            alpha_surf: 3.5,
            alpha_cyc: 7.25,
            k: 4,
            smooth_kind: SmoothKind::Surf,
        };
        let b = total_loss(&x, &f, &y, Some(&desc), cfg).unwrap();
        let recombined = b.dist + b.alpha_surf * b.surf + b.alpha_cyc * b.cyc;
        assert_eq!(b.total, recombined);
    }

    #[test]
    fn target_permutation_leaves_losses_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_cloud(&mut rng, 40, 1.0);
        let y = random_cloud(&mut rng, 40, 1.0);
        let f = FlowField::new(
            (0..40)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                    )
                })
                .collect(),
        )
        .unwrap();
        let shuffled = PointCloud::new(y.points().iter().rev().cloned().collect()).unwrap();
        let cfg = LossConfig {
            smooth_kind: SmoothKind::Knn,
            ..LossConfig::default()
        };
        let a = total_loss(&x, &f, &y, None, cfg).unwrap();
        let b = total_loss(&x, &f, &shuffled, None, cfg).unwrap();
        assert_relative_eq!(a.dist, b.dist, max_relative = 1e-12);
        assert_relative_eq!(a.cyc, b.cyc, max_relative = 1e-12);
        assert_relative_eq!(a.total, b.total, max_relative = 1e-12);
    }
}
