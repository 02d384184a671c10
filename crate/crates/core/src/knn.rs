//! Exact k-nearest-neighbor search.
//!
//! Candidates are ordered by `(squared distance, index)`, so equidistant
//! neighbors are always reported lowest index first. The kd-tree and the
//! brute-force scan share that order and therefore return identical lists.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::cloud::Point3;
use crate::error::{Error, Result};

/// Below this many points a full scan beats building a tree.
const BRUTE_FORCE_LIMIT: usize = 256;
const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Candidate {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.key_cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key_cmp(other)
    }
}

/// Bounded max-heap keeping the `k` best candidates.
struct Best {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl Best {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn offer(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(worst) = self.heap.peek() {
            if c < *worst {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    /// Squared radius that still admits new candidates.
    fn bound(&self) -> f64 {
        if self.heap.len() < self.k {
            f64::INFINITY
        } else {
            self.heap.peek().map_or(f64::INFINITY, |c| c.dist2)
        }
    }

    fn into_sorted(self) -> Vec<Candidate> {
        self.heap.into_sorted_vec()
    }
}

#[derive(Debug, Clone)]
enum KdNode {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree over a borrowed point slice.
#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a [Point3],
    order: Vec<usize>,
    nodes: Vec<KdNode>,
    root: usize,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Point3]) -> Self {
        let mut tree = Self {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
            root: 0,
        };
        if !points.is_empty() {
            tree.root = tree.build_range(0, points.len());
        }
        tree
    }

    fn build_range(&mut self, start: usize, end: usize) -> usize {
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        let pts = self.points;
        let slice = &mut self.order[start..end];
        let mut lo = pts[slice[0]];
        let mut hi = lo;
        for &i in slice.iter() {
            lo = lo.zip_map(&pts[i], f64::min);
            hi = hi.zip_map(&pts[i], f64::max);
        }
        let axis = (hi - lo).imax();
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let value = pts[slice[mid]][axis];
        let left = self.build_range(start, start + mid);
        let right = self.build_range(start + mid, end);
        self.nodes.push(KdNode::Split {
            axis,
            value,
            left,
            right,
        });
        self.nodes.len() - 1
    }

    /// The `k` nearest points to `query`, skipping index `exclude`, sorted by
    /// ascending distance (ties by index). Returns fewer than `k` only when
    /// the tree holds fewer eligible points.
    pub fn nearest(&self, query: &Point3, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut best = Best::new(k);
        self.search(self.root, query, exclude, &mut best);
        best.into_sorted()
            .into_iter()
            .map(|c| (c.index, c.dist2))
            .collect()
    }

    fn search(&self, node: usize, q: &Point3, exclude: Option<usize>, best: &mut Best) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) != exclude {
                        best.offer(Candidate {
                            dist2: (self.points[i] - q).norm_squared(),
                            index: i,
                        });
                    }
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, exclude, best);
                // Ties must still be visited: an equidistant point with a
                // lower index can displace the current worst candidate.
                if diff * diff <= best.bound() {
                    self.search(far, q, exclude, best);
                }
            }
        }
    }
}

fn brute_force_nearest(
    points: &[Point3],
    query: &Point3,
    k: usize,
    exclude: Option<usize>,
) -> Vec<(usize, f64)> {
    let mut best = Best::new(k);
    for (i, p) in points.iter().enumerate() {
        if Some(i) != exclude {
            best.offer(Candidate {
                dist2: (p - query).norm_squared(),
                index: i,
            });
        }
    }
    best.into_sorted()
        .into_iter()
        .map(|c| (c.index, c.dist2))
        .collect()
}

/// Nearest-neighbor lists for every point of a cloud.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    k: usize,
    neighbors: Vec<usize>,
}

impl KnnGraph {
    /// Wraps precomputed neighbor lists (flattened, `k` per point).
    pub fn from_flat(k: usize, neighbors: Vec<usize>) -> Result<Self> {
        if k == 0 || !neighbors.len().is_multiple_of(k) {
            return Err(Error::invalid(format!(
                "{} neighbor entries do not form lists of {k}",
                neighbors.len()
            )));
        }
        let n = neighbors.len() / k;
        for (slot, &j) in neighbors.iter().enumerate() {
            if j >= n || j == slot / k {
                return Err(Error::invalid(format!(
                    "bad neighbor {j} for point {} of {n}",
                    slot / k
                )));
            }
        }
        Ok(Self { k, neighbors })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of points the graph was built over.
    pub fn len(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// All lists concatenated in point order.
    pub fn flat(&self) -> &[usize] {
        &self.neighbors
    }
}

/// Exact kNN graph: each point's `k` nearest other points.
pub fn build_knn_graph(positions: &[Point3], k: usize) -> Result<KnnGraph> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if positions.len() <= k {
        return Err(Error::invalid(format!(
            "kNN with k={k} needs more than {k} points, got {}",
            positions.len()
        )));
    }
    let mut neighbors = Vec::with_capacity(positions.len() * k);
    if positions.len() < BRUTE_FORCE_LIMIT {
        for (i, p) in positions.iter().enumerate() {
            neighbors.extend(
                brute_force_nearest(positions, p, k, Some(i))
                    .iter()
                    .map(|c| c.0),
            );
        }
    } else {
        let tree = KdTree::build(positions);
        for (i, p) in positions.iter().enumerate() {
            neighbors.extend(tree.nearest(p, k, Some(i)).iter().map(|c| c.0));
        }
    }
    Ok(KnnGraph { k, neighbors })
}

/// Squared distance from each query point to its nearest point in `target`.
pub fn nearest_sq_distances(queries: &[Point3], target: &[Point3]) -> Vec<f64> {
    if target.len() < BRUTE_FORCE_LIMIT {
        return queries
            .iter()
            .map(|q| brute_force_nearest(target, q, 1, None)[0].1)
            .collect();
    }
    let tree = KdTree::build(target);
    queries
        .iter()
        .map(|q| tree.nearest(q, 1, None)[0].1)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> Vec<Point3> {
        xs.iter().map(|&x| Point3::new(x, 0.0, 0.0)).collect()
    }

    #[test]
    fn collinear_points_k1() {
        let g = build_knn_graph(&line(&[0.0, 1.0, 2.0, 4.0]), 1).unwrap();
        assert_eq!(g.flat(), &[1, 0, 1, 2]);
    }

    #[test]
    fn two_points_k1() {
        let g = build_knn_graph(&line(&[0.0, 5.0]), 1).unwrap();
        assert_eq!(g.flat(), &[1, 0]);
    }

    #[test]
    fn unit_square_ties_by_index() {
        let sq = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        let g = build_knn_graph(&sq, 2).unwrap();
        assert_eq!(g.neighbors(0), &[1, 3]);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.neighbors(2), &[1, 3]);
        assert_eq!(g.neighbors(3), &[0, 2]);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            build_knn_graph(&line(&[0.0, 1.0]), 2),
            Err(Error::InvalidArgument(_))
        ));
        assert!(build_knn_graph(&line(&[0.0, 1.0]), 0).is_err());
    }

    #[test]
    fn kd_tree_handles_duplicates() {
        let mut pts = line(&[0.0; 20]);
        pts.extend(line(&[1.0; 300]));
        let tree = KdTree::build(&pts);
        let got = tree.nearest(&Point3::zeros(), 4, Some(2));
        assert_eq!(
            got.iter().map(|c| c.0).collect::<Vec<_>>(),
            vec![0, 1, 3, 4]
        );
    }

    #[test]
    fn graph_rejects_self_loops() {
        assert!(KnnGraph::from_flat(1, vec![0, 0]).is_err());
        assert!(KnnGraph::from_flat(1, vec![1, 0]).is_ok());
    }
}
