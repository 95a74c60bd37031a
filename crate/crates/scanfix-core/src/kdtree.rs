//! A small 3D k-d tree for nearest-neighbor, k-NN, and radius queries.
//!
//! Built once over an immutable point set; queries are read-only and safe
//! to run from multiple threads. Splits use the axis of widest extent and
//! the median element, which keeps the tree balanced for the gridded scan
//! data this crate works with.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Point3;

/// f64 keyed max-heap entry with a deterministic index tie-break.
#[derive(PartialEq)]
struct HeapEntry {
    dist2: f64,
    index: u32,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub struct KdTree {
    /// Coordinates in tree order.
    pts: Vec<[f64; 3]>,
    /// Original point index per tree slot.
    idx: Vec<u32>,
    /// Split axis per tree slot (valid at each subtree midpoint).
    axis: Vec<u8>,
}

impl KdTree {
    pub fn build(points: &[Point3<f64>]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut axis = vec![0u8; points.len()];
        let coords: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        Self::split(&coords, &mut order, &mut axis, 0);
        let pts = order.iter().map(|&i| coords[i as usize]).collect();
        KdTree { pts, idx: order, axis }
    }

    fn split(coords: &[[f64; 3]], order: &mut [u32], axis: &mut [u8], offset: usize) {
        if order.len() <= 1 {
            return;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in order.iter() {
            let p = &coords[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut split_axis = 0;
        for a in 1..3 {
            if hi[a] - lo[a] > hi[split_axis] - lo[split_axis] {
                split_axis = a;
            }
        }
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            coords[a as usize][split_axis]
                .total_cmp(&coords[b as usize][split_axis])
                .then(a.cmp(&b))
        });
        axis[offset + mid] = split_axis as u8;
        let (left, rest) = order.split_at_mut(mid);
        Self::split(coords, left, axis, offset);
        Self::split(coords, &mut rest[1..], axis, offset + mid + 1);
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, query: &Point3<f64>) -> Option<(usize, f64)> {
        if self.pts.is_empty() {
            return None;
        }
        let q = [query.x, query.y, query.z];
        let mut best = (u32::MAX, f64::INFINITY);
        self.nearest_rec(&q, 0, self.pts.len(), &mut best);
        Some((best.0 as usize, best.1))
    }

    fn nearest_rec(&self, q: &[f64; 3], lo: usize, hi: usize, best: &mut (u32, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let d2 = dist2(&self.pts[mid], q);
        if d2 < best.1 || (d2 == best.1 && self.idx[mid] < best.0) {
            *best = (self.idx[mid], d2);
        }
        let a = self.axis[mid] as usize;
        let delta = q[a] - self.pts[mid][a];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_rec(q, near.0, near.1, best);
        if delta * delta <= best.1 {
            self.nearest_rec(q, far.0, far.1, best);
        }
    }

    /// The `k` nearest points as `(original_index, squared_distance)`,
    /// sorted by ascending distance with index tie-break. Returns fewer
    /// entries when the tree holds fewer than `k` points.
    pub fn knn(&self, query: &Point3<f64>, k: usize) -> Vec<(usize, f64)> {
        let q = [query.x, query.y, query.z];
        let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.knn_rec(&q, 0, self.pts.len(), k, &mut heap);
        }
        let mut out: Vec<(usize, f64)> =
            heap.into_iter().map(|e| (e.index as usize, e.dist2)).collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    fn knn_rec(&self, q: &[f64; 3], lo: usize, hi: usize, k: usize, heap: &mut BinaryHeap<HeapEntry>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let d2 = dist2(&self.pts[mid], q);
        let entry = HeapEntry { dist2: d2, index: self.idx[mid] };
        if heap.len() < k {
            heap.push(entry);
        } else if entry < *heap.peek().unwrap() {
            heap.pop();
            heap.push(entry);
        }
        let a = self.axis[mid] as usize;
        let delta = q[a] - self.pts[mid][a];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_rec(q, near.0, near.1, k, heap);
        if heap.len() < k || delta * delta <= heap.peek().unwrap().dist2 {
            self.knn_rec(q, far.0, far.1, k, heap);
        }
    }

    /// Original indices of all points with distance <= radius, ascending.
    pub fn within_radius(&self, query: &Point3<f64>, radius: f64) -> Vec<usize> {
        let q = [query.x, query.y, query.z];
        let mut out = Vec::new();
        self.radius_rec(&q, radius * radius, 0, self.pts.len(), &mut out);
        out.sort_unstable();
        out
    }

    fn radius_rec(&self, q: &[f64; 3], r2: f64, lo: usize, hi: usize, out: &mut Vec<usize>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        if dist2(&self.pts[mid], q) <= r2 {
            out.push(self.idx[mid] as usize);
        }
        let a = self.axis[mid] as usize;
        let delta = q[a] - self.pts[mid][a];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.radius_rec(q, r2, near.0, near.1, out);
        if delta * delta <= r2 {
            self.radius_rec(q, r2, far.0, far.1, out);
        }
    }
}

fn dist2(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    let dx = p[0] - q[0];
    let dy = p[1] - q[1];
    let dz = p[2] - q[2];
    dx * dx + dy * dy + dz * dz
}
