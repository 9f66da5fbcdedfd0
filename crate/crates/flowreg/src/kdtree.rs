//! Exact k-nearest-neighbor search over a fixed D-dimensional point set.
//!
//! Queries return `min(k, n)` indices ordered by non-decreasing squared
//! Euclidean distance, ties broken by lower point index. Results are
//! identical to exhaustive search under the same rule, which keeps every
//! downstream cluster construction bit-deterministic across runs and
//! thread counts.
//!
//! The tree is immutable after [`KdTree::build`] and safe to query from
//! multiple threads.

use rayon::prelude::*;

use crate::error::{Error, Result};

const BUCKET_SIZE: usize = 16;

/// A single search result: original point index plus squared distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

#[derive(Debug)]
enum Node {
    Split { dim: usize, value: f64, right: usize },
    Leaf { start: usize, len: usize },
}

/// Bucketed kd-tree with midpoint splits along the widest dimension.
#[derive(Debug)]
pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    nodes: Vec<Node>,
    order: Vec<usize>,
}

impl<const D: usize> KdTree<D> {
    pub fn build(points: Vec<[f64; D]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        if points
            .iter()
            .any(|p| p.iter().any(|coord| !coord.is_finite()))
        {
            return Err(Error::NonFinite("indexed point set"));
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        build_node(&points, &mut order, 0, &mut nodes);
        Ok(Self {
            points,
            nodes,
            order,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> [f64; D] {
        self.points[index]
    }

    /// Returns the `min(k, n)` nearest indexed points to `query`, sorted by
    /// squared distance then index. A query sitting exactly on an indexed
    /// point returns that point; callers drop self-matches where needed.
    pub fn knn(&self, query: &[f64; D], k: usize) -> Vec<Neighbor> {
        assert!(k >= 1, "knn requires k >= 1");
        let mut best = Candidates::new(k.min(self.points.len()));
        self.search(0, query, &mut best);
        best.into_sorted()
    }

    /// One query per input point, computed in parallel. Output order matches
    /// input order, so the result is independent of thread scheduling.
    pub fn knn_batch(&self, queries: &[[f64; D]], k: usize) -> Vec<Vec<Neighbor>> {
        queries.par_iter().map(|q| self.knn(q, k)).collect()
    }

    fn search(&self, node: usize, query: &[f64; D], best: &mut Candidates) {
        match self.nodes[node] {
            Node::Leaf { start, len } => {
                for &index in &self.order[start..start + len] {
                    let d2 = dist_sq(query, &self.points[index]);
                    best.offer(d2, index);
                }
            }
            Node::Split { dim, value, right } => {
                let offset = query[dim] - value;
                let (near, far) = if offset < 0.0 {
                    (node + 1, right)
                } else {
                    (right, node + 1)
                };
                self.search(near, query, best);
                // The far side can still hold an equal-distance lower-index
                // candidate, hence <= rather than <.
                if !best.full() || offset * offset <= best.worst_dist_sq() {
                    self.search(far, query, best);
                }
            }
        }
    }
}

fn dist_sq<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut acc = 0.0;
    for dim in 0..D {
        let diff = a[dim] - b[dim];
        acc += diff * diff;
    }
    acc
}

fn build_node<const D: usize>(
    points: &[[f64; D]],
    order: &mut [usize],
    base: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let id = nodes.len();
    if order.len() <= BUCKET_SIZE {
        nodes.push(Node::Leaf {
            start: base,
            len: order.len(),
        });
        return id;
    }

    // Split the widest dimension at the midpoint of its bounds.
    let mut min = [f64::INFINITY; D];
    let mut max = [f64::NEG_INFINITY; D];
    for &index in order.iter() {
        for dim in 0..D {
            min[dim] = min[dim].min(points[index][dim]);
            max[dim] = max[dim].max(points[index][dim]);
        }
    }
    let mut dim = 0;
    for d in 1..D {
        if max[d] - min[d] > max[dim] - min[dim] {
            dim = d;
        }
    }
    if max[dim] - min[dim] == 0.0 {
        // All remaining points coincide; a flat scan is the only option.
        nodes.push(Node::Leaf {
            start: base,
            len: order.len(),
        });
        return id;
    }

    let value = 0.5 * (min[dim] + max[dim]);
    let split = partition_in_place(order, |index| points[index][dim] < value);
    debug_assert!(split > 0 && split < order.len());

    nodes.push(Node::Split {
        dim,
        value,
        right: usize::MAX,
    });
    let (left_order, right_order) = order.split_at_mut(split);
    let left = build_node(points, left_order, base, nodes);
    debug_assert_eq!(left, id + 1);
    let right = build_node(points, right_order, base + split, nodes);
    if let Node::Split { right: slot, .. } = &mut nodes[id] {
        *slot = right;
    }
    id
}

fn partition_in_place<F: Fn(usize) -> bool>(order: &mut [usize], pred: F) -> usize {
    let mut split = 0;
    for i in 0..order.len() {
        if pred(order[i]) {
            order.swap(split, i);
            split += 1;
        }
    }
    split
}

/// Bounded candidate list kept sorted by (dist_sq, index).
struct Candidates {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl Candidates {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn full(&self) -> bool {
        self.items.len() == self.k
    }

    fn worst_dist_sq(&self) -> f64 {
        self.items.last().map(|&(d, _)| d).unwrap_or(f64::INFINITY)
    }

    fn offer(&mut self, dist_sq: f64, index: usize) {
        if self.full() {
            let worst = *self.items.last().unwrap();
            if !lex_less((dist_sq, index), worst) {
                return;
            }
        }
        let pos = self
            .items
            .partition_point(|&cand| lex_less(cand, (dist_sq, index)));
        self.items.insert(pos, (dist_sq, index));
        if self.items.len() > self.k {
            self.items.pop();
        }
    }

    fn into_sorted(self) -> Vec<Neighbor> {
        self.items
            .into_iter()
            .map(|(dist_sq, index)| Neighbor { index, dist_sq })
            .collect()
    }
}

fn lex_less(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive-search reference with the same tie rule.
    fn brute_force<const D: usize>(points: &[[f64; D]], query: &[f64; D], k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (dist_sq(query, p), i))
            .collect();
        all.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap()
                .then_with(|| a.1.cmp(&b.1))
        });
        all.truncate(k);
        all.into_iter().map(|(_, i)| i).collect()
    }

    fn indices(neighbors: &[Neighbor]) -> Vec<usize> {
        neighbors.iter().map(|n| n.index).collect()
    }

    #[test]
    fn single_point_any_query() {
        let tree = KdTree::build(vec![[0.0, 0.0, 0.0]]).unwrap();
        let result = tree.knn(&[5.0, 5.0, 5.0], 1);
        assert_eq!(indices(&result), vec![0]);
    }

    #[test]
    fn hand_example_distance_order() {
        let tree =
            KdTree::build(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        let result = tree.knn(&[0.9, 0.0, 0.0], 2);
        assert_eq!(indices(&result), vec![1, 0]);
    }

    #[test]
    fn duplicate_points_tie_by_lower_index() {
        let tree = KdTree::build(vec![
            [1.0, 1.0, 1.0],
            [0.0, 0.0, 0.0],
            [1.0, 1.0, 1.0],
            [1.0, 1.0, 1.0],
        ])
        .unwrap();
        let result = tree.knn(&[1.0, 1.0, 1.0], 2);
        assert_eq!(indices(&result), vec![0, 2]);
    }

    #[test]
    fn k_larger_than_set_returns_everything() {
        let tree = KdTree::build(vec![[0.0; 3], [1.0; 3]]).unwrap();
        let result = tree.knn(&[0.2, 0.0, 0.0], 10);
        assert_eq!(result.len(), 2);
        assert_eq!(indices(&result), vec![0, 1]);
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(
            KdTree::<3>::build(vec![]),
            Err(Error::EmptyPointSet)
        ));
        assert!(matches!(
            KdTree::build(vec![[0.0, f64::NAN, 0.0]]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn matches_brute_force_3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points: Vec<[f64; 3]> = (0..300)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let tree = KdTree::build(points.clone()).unwrap();
        for _ in 0..50 {
            let q = [
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
            ];
            let got = indices(&tree.knn(&q, 8));
            assert_eq!(got, brute_force(&points, &q, 8));
        }
    }

    #[test]
    fn matches_brute_force_6d() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let points: Vec<[f64; 6]> = (0..200)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
            .collect();
        let tree = KdTree::build(points.clone()).unwrap();
        for _ in 0..50 {
            let q: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let got = indices(&tree.knn(&q, 5));
            assert_eq!(got, brute_force(&points, &q, 5));
        }
    }

    #[test]
    fn matches_brute_force_on_gridded_ties() {
        // Grid data produces many exactly-equal distances.
        let mut points = Vec::new();
        for x in 0..5 {
            for y in 0..5 {
                for z in 0..3 {
                    points.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        let tree = KdTree::build(points.clone()).unwrap();
        for (i, p) in points.iter().enumerate() {
            let got = indices(&tree.knn(p, 6));
            assert_eq!(got, brute_force(&points, p, 6), "query at grid point {i}");
        }
    }

    #[test]
    fn permutation_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let points: Vec<[f64; 3]> = (0..120)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
            .collect();
        // Reverse relabeling: new index i holds old point n-1-i.
        let reversed: Vec<[f64; 3]> = points.iter().rev().copied().collect();
        let tree = KdTree::build(points.clone()).unwrap();
        let tree_rev = KdTree::build(reversed).unwrap();
        let n = points.len();
        for _ in 0..20 {
            let q: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let a: Vec<usize> = indices(&tree.knn(&q, 4));
            let b: Vec<usize> = indices(&tree_rev.knn(&q, 4))
                .into_iter()
                .map(|i| n - 1 - i)
                .collect();
            // Same points selected; order may differ only where distances tie,
            // in which case the relabeled index order flips. Compare as sets.
            let mut a_sorted = a.clone();
            let mut b_sorted = b.clone();
            a_sorted.sort_unstable();
            b_sorted.sort_unstable();
            assert_eq!(a_sorted, b_sorted);
        }
    }

    #[test]
    fn distances_non_decreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let points: Vec<[f64; 3]> = (0..200)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
            .collect();
        let tree = KdTree::build(points).unwrap();
        for _ in 0..30 {
            let q: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let result = tree.knn(&q, 12);
            for pair in result.windows(2) {
                assert!(pair[0].dist_sq <= pair[1].dist_sq);
            }
        }
    }
}
