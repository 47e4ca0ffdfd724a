//! Static 3-d tree for nearest-neighbour queries.
//!
//! Ties are broken by the lower point index so results match a linear scan
//! exactly.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::geometry::Vec3;

#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a [Vec3],
    /// Point indices arranged as an implicit balanced tree.
    order: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        build(points, &mut order, 0);
        Self { points, order }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        let mut best = None::<Candidate>;
        self.search_nearest(0, self.order.len(), 0, q, &mut best);
        best.map(|c| (c.index, c.dist2))
    }

    /// The `k` nearest points sorted by distance, then index.
    pub fn k_nearest(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.search_k(0, self.order.len(), 0, q, k, &mut heap);
        }
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.dist2)).collect()
    }

    fn search_nearest(&self, lo: usize, hi: usize, depth: usize, q: &Vec3, best: &mut Option<Candidate>) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let c = Candidate {
            dist2: dist2(p, q),
            index: idx,
        };
        if best.map_or(true, |b| c < b) {
            *best = Some(c);
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (first, second) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search_nearest(first.0, first.1, depth + 1, q, best);
        if best.map_or(true, |b| diff * diff <= b.dist2) {
            self.search_nearest(second.0, second.1, depth + 1, q, best);
        }
    }

    fn search_k(&self, lo: usize, hi: usize, depth: usize, q: &Vec3, k: usize, heap: &mut BinaryHeap<Candidate>) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let c = Candidate {
            dist2: dist2(p, q),
            index: idx,
        };
        if heap.len() < k {
            heap.push(c);
        } else if c < *heap.peek().unwrap() {
            heap.pop();
            heap.push(c);
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (first, second) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search_k(first.0, first.1, depth + 1, q, k, heap);
        if heap.len() < k || diff * diff <= heap.peek().unwrap().dist2 {
            self.search_k(second.0, second.1, depth + 1, q, k, heap);
        }
    }
}

fn build(points: &[Vec3], order: &mut [usize], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |a, b| {
        points[*a][axis]
            .total_cmp(&points[*b][axis])
            .then(a.cmp(b))
    });
    let (left, right) = order.split_at_mut(mid);
    build(points, left, depth + 1);
    build(points, &mut right[1..], depth + 1);
}
