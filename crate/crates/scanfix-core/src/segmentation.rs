//! Dominant-plane extraction from an aligned cloud: points are bucketed by
//! oriented normal direction, each bucket is split spatially with DBSCAN so
//! co-oriented but disjoint surfaces (parallel walls) stay separate, and
//! every candidate is refit and filtered by size and planarity.

use nalgebra::{Point3, Vector3};
use thiserror::Error;

use crate::geometry::{fit_plane_svd, GeometryError, PlaneSegment, PointCloud};
use crate::kdtree::KdTree;

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("parameter error: {0}")]
    BadParameter(&'static str),
    #[error("cloud has no normals")]
    MissingNormals,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// DBSCAN labels: -1 marks noise, clusters are numbered from zero in
/// discovery order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterLabels {
    pub labels: Vec<i32>,
    pub cluster_count: usize,
}

impl ClusterLabels {
    /// Member indices per cluster, in ascending point order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.cluster_count];
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= 0 {
                out[l as usize].push(i);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationParams {
    /// Angular gate for grouping points by normal direction, degrees.
    pub angle_threshold_deg: f64,
    /// Spatial DBSCAN radius within a normal bucket, meters.
    pub dbscan_eps: f64,
    /// DBSCAN core-point density (neighborhood includes the point itself).
    pub dbscan_min_pts: usize,
    /// Minimum surviving segment size in points.
    pub min_segment_points: usize,
    /// Maximum RMS plane-fit residual for a surviving segment, meters.
    pub max_rms_distance: f64,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self {
            angle_threshold_deg: 10.0,
            dbscan_eps: 0.10,
            dbscan_min_pts: 50,
            min_segment_points: 2000,
            max_rms_distance: 0.010,
        }
    }
}

/// Standard DBSCAN over 3D points. A point is a core point when its
/// eps-neighborhood (itself included) holds at least `min_pts` points;
/// clusters are maximal density-connected sets. Points are visited in
/// index order, so border points go to the lowest-id cluster that reaches
/// them.
pub fn dbscan(
    points: &[Point3<f64>],
    eps: f64,
    min_pts: usize,
) -> Result<ClusterLabels, SegmentationError> {
    if !(eps > 0.0) {
        return Err(SegmentationError::BadParameter("eps must be positive"));
    }
    if min_pts < 1 {
        return Err(SegmentationError::BadParameter("min_pts must be at least 1"));
    }
    let n = points.len();
    let mut labels = vec![-2i32; n]; // -2 unvisited, -1 noise
    if n == 0 {
        return Ok(ClusterLabels { labels: Vec::new(), cluster_count: 0 });
    }
    let tree = KdTree::build(points);
    let mut cluster = 0i32;
    let mut queue: Vec<usize> = Vec::new();
    for i in 0..n {
        if labels[i] != -2 {
            continue;
        }
        let neighbors = tree.within_radius(&points[i], eps);
        if neighbors.len() < min_pts {
            labels[i] = -1;
            continue;
        }
        labels[i] = cluster;
        queue.clear();
        queue.extend(neighbors.iter().copied().filter(|&j| j != i));
        let mut head = 0;
        while head < queue.len() {
            let j = queue[head];
            head += 1;
            if labels[j] == -1 {
                labels[j] = cluster; // noise becomes a border point
            }
            if labels[j] != -2 {
                continue;
            }
            labels[j] = cluster;
            let reach = tree.within_radius(&points[j], eps);
            if reach.len() >= min_pts {
                queue.extend(reach.into_iter().filter(|&k| labels[k] == -2 || labels[k] == -1));
            }
        }
        cluster += 1;
    }
    Ok(ClusterLabels { labels, cluster_count: cluster as usize })
}

/// Greedy normal-direction buckets: points join the angularly closest
/// existing bucket within the threshold, else found a new one. Bucket
/// representatives are the founding point's normal.
fn bucket_by_normal(
    cloud: &PointCloud,
    angle_threshold_deg: f64,
) -> (Vec<Vector3<f64>>, Vec<Vec<usize>>) {
    let normals = cloud.normals().expect("caller checks normals");
    let cos_gate = angle_threshold_deg.to_radians().cos();
    let mut reps: Vec<Vector3<f64>> = Vec::new();
    let mut buckets: Vec<Vec<usize>> = Vec::new();
    for i in 0..cloud.len() {
        if !normals.is_valid(i) {
            continue;
        }
        let n = normals.vector(i);
        let mut best: Option<(usize, f64)> = None;
        for (b, rep) in reps.iter().enumerate() {
            let c = n.dot(rep);
            if c >= cos_gate && best.map_or(true, |(_, bc)| c > bc) {
                best = Some((b, c));
            }
        }
        match best {
            Some((b, _)) => buckets[b].push(i),
            None => {
                reps.push(n);
                buckets.push(vec![i]);
            }
        }
    }
    (reps, buckets)
}

/// Extracts planar segments: normal bucketing, per-bucket spatial DBSCAN,
/// SVD refit, then size and planarity filtering. Segments are disjoint and
/// ordered by descending size (ties by centroid lexicographic order); an
/// empty result is not an error.
pub fn segment_planes(
    cloud: &PointCloud,
    params: &SegmentationParams,
) -> Result<Vec<PlaneSegment>, SegmentationError> {
    if cloud.normals().is_none() {
        return Err(SegmentationError::MissingNormals);
    }
    if !(params.angle_threshold_deg > 0.0) {
        return Err(SegmentationError::BadParameter("angle threshold must be positive"));
    }
    let (reps, buckets) = bucket_by_normal(cloud, params.angle_threshold_deg);

    let mut segments: Vec<PlaneSegment> = Vec::new();
    for (rep, bucket) in reps.iter().zip(buckets.iter()) {
        if bucket.len() < params.min_segment_points {
            continue;
        }
        let pts: Vec<Point3<f64>> = bucket.iter().map(|&i| cloud.point(i)).collect();
        let clusters = dbscan(&pts, params.dbscan_eps, params.dbscan_min_pts)?;
        for members in clusters.members() {
            if members.len() < params.min_segment_points {
                continue;
            }
            let indices: Vec<usize> = members.iter().map(|&k| bucket[k]).collect();
            let member_pts: Vec<Point3<f64>> = members.iter().map(|&k| pts[k]).collect();
            let Ok(fit) = fit_plane_svd(&member_pts) else {
                continue;
            };
            if fit.rms_distance > params.max_rms_distance {
                continue;
            }
            // Keep the bucket's orientation rather than the canonical sign.
            let normal = if fit.normal.dot(rep) < 0.0 { -fit.normal } else { fit.normal };
            segments.push(PlaneSegment {
                indices,
                normal,
                centroid: fit.centroid,
                rms_distance: fit.rms_distance,
            });
        }
    }

    segments.sort_by(|a, b| {
        b.indices
            .len()
            .cmp(&a.indices.len())
            .then_with(|| a.centroid.x.total_cmp(&b.centroid.x))
            .then_with(|| a.centroid.y.total_cmp(&b.centroid.y))
            .then_with(|| a.centroid.z.total_cmp(&b.centroid.z))
    });
    Ok(segments)
}
