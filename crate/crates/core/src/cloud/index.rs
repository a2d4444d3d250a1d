use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{dist2, PointCloud};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 12;

/// A query result: point index and its squared distance to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Neighbor {
    pub fn dist(&self) -> f64 {
        self.dist2.sqrt()
    }
}

// Ordered by (distance, index) so a max-heap keeps the worst candidate on top.
impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Exact kd-tree over 3D points.
///
/// Every query returns the same set, in the same order, as a brute-force scan
/// sorted by `(distance, index)`.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<[f64; 3]>,
    perm: Vec<usize>,
    nodes: Vec<Node>,
}

impl NeighborIndex {
    pub fn build(cloud: &PointCloud) -> Result<Self> {
        Self::from_points(cloud.points_f64())
    }

    pub fn from_points(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut index = Self {
            perm: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        let n = index.points.len();
        index.build_node(0, n);
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.perm[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] - lo[axis] == 0.0 {
            // all coincident
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = self.points[self.perm[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// `k` nearest points to `query`, ascending by distance then index.
    ///
    /// With `exclude_self`, points at exactly zero distance from the query are
    /// skipped.
    pub fn knn(&self, query: &[f64; 3], k: usize, exclude_self: bool) -> Result<Vec<Neighbor>> {
        let n = self.len();
        if k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        if k > n {
            return Err(Error::NotEnoughPoints { k, available: n, n });
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_node(0, query, k, exclude_self, &mut heap);
        if heap.len() < k {
            return Err(Error::NotEnoughPoints {
                k,
                available: heap.len(),
                n,
            });
        }
        Ok(heap.into_sorted_vec())
    }

    /// Indices only, see [`NeighborIndex::knn`].
    pub fn knn_indices(&self, query: &[f64; 3], k: usize, exclude_self: bool) -> Result<Vec<usize>> {
        Ok(self
            .knn(query, k, exclude_self)?
            .into_iter()
            .map(|nb| nb.index)
            .collect())
    }

    fn knn_node(
        &self,
        id: usize,
        query: &[f64; 3],
        k: usize,
        exclude_self: bool,
        heap: &mut BinaryHeap<Neighbor>,
    ) {
        match self.nodes[id] {
            Node::Leaf { start, end } => {
                for &i in &self.perm[start..end] {
                    let d2 = dist2(query, &self.points[i]);
                    if exclude_self && d2 == 0.0 {
                        continue;
                    }
                    let cand = Neighbor { index: i, dist2: d2 };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if let Some(worst) = heap.peek() {
                        if cand < *worst {
                            heap.pop();
                            heap.push(cand);
                        }
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_node(near, query, k, exclude_self, heap);
                // ties at the bound may still hold a lower index, so compare inclusively
                let visit_far = heap.len() < k
                    || heap.peek().is_some_and(|worst| diff * diff <= worst.dist2);
                if visit_far {
                    self.knn_node(far, query, k, exclude_self, heap);
                }
            }
        }
    }

    /// All points within distance `r` (inclusive), ascending by distance then index.
    pub fn radius(&self, query: &[f64; 3], r: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        if !(r >= 0.0) {
            return out;
        }
        let r2 = r * r;
        self.radius_node(0, query, r2, &mut out);
        out.sort_unstable();
        out
    }

    fn radius_node(&self, id: usize, query: &[f64; 3], r2: f64, out: &mut Vec<Neighbor>) {
        match self.nodes[id] {
            Node::Leaf { start, end } => {
                for &i in &self.perm[start..end] {
                    let d2 = dist2(query, &self.points[i]);
                    if d2 <= r2 {
                        out.push(Neighbor { index: i, dist2: d2 });
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.radius_node(near, query, r2, out);
                if diff * diff <= r2 {
                    self.radius_node(far, query, r2, out);
                }
            }
        }
    }

    /// The `k` nearest points that also lie within `r`, excluding zero-distance
    /// matches when `exclude_self` is set. May return fewer than `k`.
    pub fn knn_within(&self, query: &[f64; 3], k: usize, r: f64, exclude_self: bool) -> Vec<Neighbor> {
        let mut hits = self.radius(query, r);
        if exclude_self {
            hits.retain(|nb| nb.dist2 != 0.0);
        }
        hits.truncate(k);
        hits
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(points: &[[f64; 3]], q: &[f64; 3], k: usize, exclude_self: bool) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (dist2(q, p), i))
            .filter(|(d, _)| !(exclude_self && *d == 0.0))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    fn line() -> NeighborIndex {
        NeighborIndex::from_points(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
            .unwrap()
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(NeighborIndex::from_points(vec![]), Err(Error::EmptyCloud)));
    }

    #[test]
    fn singleton_answers_every_query() {
        let idx = NeighborIndex::from_points(vec![[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(idx.knn_indices(&[-5.0, 0.0, 9.0], 1, false).unwrap(), vec![0]);
        assert_eq!(idx.radius(&[1.0, 2.0, 3.0], 0.1).len(), 1);
    }

    #[test]
    fn line_cloud_queries() {
        let idx = line();
        assert_eq!(idx.knn_indices(&[0.0; 3], 2, true).unwrap(), vec![1, 2]);
        assert_eq!(idx.knn_indices(&[10.0, 0.0, 0.0], 1, true).unwrap(), vec![2]);
        let r: Vec<usize> = idx.radius(&[0.0; 3], 2.5).iter().map(|nb| nb.index).collect();
        assert_eq!(r, vec![0, 1, 2]);
        assert!(idx.radius(&[0.5, 0.5, 0.0], 0.1).is_empty());
        assert_eq!(idx.radius(&[0.0; 3], 1e12).len(), 4);
    }

    #[test]
    fn k_equal_n_is_permutation() {
        let idx = line();
        let mut all = idx.knn_indices(&[3.0, 1.0, 0.0], 4, false).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn too_many_neighbours_names_k_and_n() {
        let idx = line();
        let err = idx.knn(&[0.0; 3], 5, false).unwrap_err();
        assert!(matches!(err, Error::NotEnoughPoints { k: 5, n: 4, .. }));
        let err = idx.knn(&[0.0; 3], 4, true).unwrap_err();
        assert!(matches!(err, Error::NotEnoughPoints { k: 4, available: 3, n: 4 }));
    }

    #[test]
    fn duplicates_break_ties_by_index() {
        let idx = NeighborIndex::from_points(vec![[5.0; 3], [1.0; 3], [1.0; 3], [1.0; 3]]).unwrap();
        assert_eq!(idx.knn_indices(&[1.0; 3], 2, false).unwrap(), vec![1, 2]);
        assert_eq!(idx.knn_indices(&[1.0; 3], 1, true).unwrap(), vec![0]);
    }

    #[test]
    fn random_cloud_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<[f64; 3]> = (0..200)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let idx = NeighborIndex::from_points(pts.clone()).unwrap();
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(idx.knn_indices(p, 5, false).unwrap(), brute_knn(&pts, p, 5, false), "point {i}");
            assert_eq!(idx.knn_indices(p, 5, true).unwrap(), brute_knn(&pts, p, 5, true), "point {i}");
        }
    }

    proptest! {
        #[test]
        fn gridded_cloud_matches_brute_force(
            raw in prop::collection::vec((0i32..6, 0i32..6, 0i32..3), 1..120),
            q in (0i32..6, 0i32..6, 0i32..3),
            k in 1usize..10,
            r in 0.0f64..4.0,
        ) {
            // integer grid coordinates force many exact ties
            let pts: Vec<[f64; 3]> = raw.iter().map(|&(x, y, z)| [x as f64, y as f64, z as f64]).collect();
            let q = [q.0 as f64, q.1 as f64, q.2 as f64];
            let idx = NeighborIndex::from_points(pts.clone()).unwrap();
            let k = k.min(pts.len());
            prop_assert_eq!(idx.knn_indices(&q, k, false).unwrap(), brute_knn(&pts, &q, k, false));
            let got: Vec<usize> = idx.radius(&q, r).iter().map(|nb| nb.index).collect();
            let mut want: Vec<(f64, usize)> = pts.iter().enumerate()
                .map(|(i, p)| (dist2(&q, p), i)).filter(|(d, _)| *d <= r * r).collect();
            want.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            prop_assert_eq!(got, want.into_iter().map(|(_, i)| i).collect::<Vec<_>>());
        }

        #[test]
        fn knn_sets_survive_shuffling(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<[f64; 3]> = (0..60).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let mut order: Vec<usize> = (0..60).collect();
            for i in (1..60).rev() { order.swap(i, rng.random_range(0..=i)); }
            let shuffled: Vec<[f64; 3]> = order.iter().map(|&i| pts[i]).collect();
            let a = NeighborIndex::from_points(pts.clone()).unwrap();
            let b = NeighborIndex::from_points(shuffled).unwrap();
            let q = [rng.random(), rng.random(), rng.random()];
            let want = a.knn_indices(&q, 7, false).unwrap();
            let got: Vec<usize> = b.knn_indices(&q, 7, false).unwrap().into_iter().map(|i| order[i]).collect();
            prop_assert_eq!(got, want);
        }
    }
}
