//! Exact k-nearest-neighbor search over 3D points.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

const LEAF_SIZE: usize = 12;

/// Clouds smaller than this are searched by exhaustive scan.
pub const BRUTE_FORCE_LIMIT: usize = 1000;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    // query first, then ascending index
    rank: usize,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.rank.cmp(&other.rank))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded max-heap holding the k best candidates seen so far.
struct Best {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl Best {
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

    fn bound(&self) -> f64 {
        if self.heap.len() < self.k {
            f64::INFINITY
        } else {
            self.heap.peek().map_or(f64::INFINITY, |c| c.dist2)
        }
    }

    fn into_sorted(self) -> Vec<usize> {
        self.heap.into_sorted_vec().into_iter().map(|c| c.index).collect()
    }
}

/// Spatial index answering exact k-NN queries with deterministic tie-breaking.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<Vector3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl NeighborIndex {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut index = NeighborIndex {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if points.len() >= BRUTE_FORCE_LIMIT {
            index.build(0, points.len());
        }
        index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let dim = (hi - lo).imax();
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |a, b| points[*a][dim].total_cmp(&points[*b][dim]));
        let value = self.points[self.order[mid]][dim];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { dim, value, left, right };
        id
    }

    /// The `k` nearest points to `target`, closest first. `prefer` wins ties
    /// at equal distance; remaining ties go to the lower index.
    pub fn knn_point(&self, target: &Vector3<f64>, k: usize, prefer: Option<usize>) -> Vec<usize> {
        let mut best = Best {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        };
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let candidate = |i: usize| Candidate {
            dist2: (self.points[i] - target).norm_squared(),
            rank: if Some(i) == prefer { 0 } else { i + 1 },
            index: i,
        };
        if self.nodes.is_empty() {
            for i in 0..self.points.len() {
                best.offer(candidate(i));
            }
        } else {
            let mut stack = vec![(0usize, 0.0f64)];
            while let Some((node, plane_dist2)) = stack.pop() {
                if plane_dist2 > best.bound() {
                    continue;
                }
                match self.nodes[node] {
                    Node::Leaf { start, end } => {
                        for &i in &self.order[start..end] {
                            best.offer(candidate(i));
                        }
                    }
                    Node::Split { dim, value, left, right } => {
                        let diff = target[dim] - value;
                        let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                        // far side first so the near side is popped next
                        stack.push((far, diff * diff));
                        stack.push((near, 0.0));
                    }
                }
            }
        }
        best.into_sorted()
    }

    pub fn knn(&self, query_index: usize, k: usize) -> Vec<usize> {
        self.knn_point(&self.points[query_index], k, Some(query_index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[Vector3<f64>], q: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| ((p - points[q]).norm_squared(), if i == q { 0 } else { i + 1 }, i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|t| t.2).collect()
    }

    #[test]
    fn tree_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts: Vec<Vector3<f64>> = (0..3000)
            .map(|_| Vector3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let index = NeighborIndex::new(&pts);
        for q in (0..3000).step_by(97) {
            assert_eq!(index.knn(q, 256), brute(&pts, q, 256));
        }
    }

    #[test]
    fn tree_handles_duplicates_and_grid_ties() {
        let mut pts = Vec::new();
        for x in 0..12 {
            for y in 0..12 {
                for z in 0..12 {
                    pts.push(Vector3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        pts.push(pts[500]);
        let index = NeighborIndex::new(&pts);
        for q in [0, 500, 777, pts.len() - 1] {
            let got = index.knn(q, 27);
            assert_eq!(got, brute(&pts, q, 27));
            assert_eq!(got[0], q);
        }
    }
}
