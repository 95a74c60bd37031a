//! Core 3D types shared by the whole pipeline: point clouds, rigid motions,
//! PCA normal estimation, and least-squares plane fitting.
//!
//! All geometry is carried in f64; coordinates are meters. Types are
//! immutable after construction and may be shared freely across threads.

use nalgebra::{Matrix3, Point3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::kdtree::KdTree;

/// Tolerance for rotation-matrix orthogonality and determinant checks.
pub const ROTATION_TOL: f64 = 1e-9;
/// Tolerance for unit-norm checks on normals.
pub const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("non-finite coordinate at point index {0}")]
    NonFinitePoint(usize),
    #[error("rotation matrix is not orthonormal with determinant +1")]
    InvalidRotation,
    #[error("normals length {normals} does not match point count {points}")]
    NormalLengthMismatch { normals: usize, points: usize },
    #[error("normal at index {0} is not unit length")]
    NonUnitNormal(usize),
    #[error("need at least {needed} points, got {got}")]
    NotEnoughPoints { needed: usize, got: usize },
    #[error("degenerate input: points are collinear or coincident")]
    DegenerateInput,
    #[error("k_neighbors must be at least 3, got {0}")]
    BadNeighborCount(usize),
}

/// Per-point unit normals with a validity flag for points whose
/// neighborhood was too degenerate to orient a plane.
///
/// Invalid entries hold the placeholder `(0, 0, 1)` so that every stored
/// vector is unit length; consumers must consult [`Normals::valid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normals {
    vectors: Vec<Vector3<f64>>,
    valid: Vec<bool>,
}

impl Normals {
    pub fn new(vectors: Vec<Vector3<f64>>, valid: Vec<bool>) -> Result<Self, GeometryError> {
        if vectors.len() != valid.len() {
            return Err(GeometryError::NormalLengthMismatch {
                normals: valid.len(),
                points: vectors.len(),
            });
        }
        for (i, v) in vectors.iter().enumerate() {
            if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) {
                return Err(GeometryError::NonFinitePoint(i));
            }
            if (v.norm() - 1.0).abs() > UNIT_TOL {
                return Err(GeometryError::NonUnitNormal(i));
            }
        }
        Ok(Self { vectors, valid })
    }

    /// All entries valid.
    pub fn all_valid(vectors: Vec<Vector3<f64>>) -> Result<Self, GeometryError> {
        let valid = vec![true; vectors.len()];
        Self::new(vectors, valid)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, i: usize) -> Vector3<f64> {
        self.vectors[i]
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn vectors(&self) -> &[Vector3<f64>] {
        &self.vectors
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// An ordered set of 3D points in meters, optionally carrying per-point
/// unit normals of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
    normals: Option<Normals>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self, GeometryError> {
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(GeometryError::NonFinitePoint(i));
            }
        }
        Ok(Self { points, normals: None })
    }

    pub fn with_normals(points: Vec<Point3<f64>>, normals: Normals) -> Result<Self, GeometryError> {
        if normals.len() != points.len() {
            return Err(GeometryError::NormalLengthMismatch {
                normals: normals.len(),
                points: points.len(),
            });
        }
        let mut cloud = Self::new(points)?;
        cloud.normals = Some(normals);
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Point3<f64> {
        self.points[i]
    }

    pub fn normals(&self) -> Option<&Normals> {
        self.normals.as_ref()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    /// Cloud restricted to the given indices (normals carried along).
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let normals = self.normals.as_ref().map(|n| Normals {
            vectors: indices.iter().map(|&i| n.vectors[i]).collect(),
            valid: indices.iter().map(|&i| n.valid[i]).collect(),
        });
        PointCloud { points, normals }
    }

    pub fn centroid(&self) -> Point3<f64> {
        let mut acc = Vector3::zeros();
        for p in &self.points {
            acc += p.coords;
        }
        Point3::from(acc / self.points.len().max(1) as f64)
    }
}

/// A rigid motion: rotation followed by translation. Stored as a proper
/// rotation matrix (validated on construction) and a translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let gram = rotation.transpose() * rotation;
        let mut max_dev: f64 = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                let target = if r == c { 1.0 } else { 0.0 };
                max_dev = max_dev.max((gram[(r, c)] - target).abs());
            }
        }
        if max_dev > ROTATION_TOL || (rotation.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation);
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn apply_point(&self, p: Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self` after `first`: `(self ∘ first)(p) = self(first(p))`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// 4x4 homogeneous form, row-major `[R t; 0 1]`.
    pub fn to_homogeneous(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// Angle of the rotation part in radians.
    pub fn rotation_angle(&self) -> f64 {
        let tr = self.rotation.trace();
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// A segmented planar subset of a source cloud.
#[derive(Debug, Clone)]
pub struct PlaneSegment {
    /// Member point indices into the source cloud (unique, non-empty).
    pub indices: Vec<usize>,
    /// Unit plane normal.
    pub normal: Vector3<f64>,
    /// Centroid of the member points, meters.
    pub centroid: Point3<f64>,
    /// Root-mean-square point-to-plane distance of the members, meters.
    pub rms_distance: f64,
}

impl PlaneSegment {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.indices.is_empty() {
            return Err(GeometryError::NotEnoughPoints { needed: 1, got: 0 });
        }
        let mut sorted = self.indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.indices.len() {
            return Err(GeometryError::DegenerateInput);
        }
        if (self.normal.norm() - 1.0).abs() > UNIT_TOL || self.rms_distance < 0.0 {
            return Err(GeometryError::NonUnitNormal(0));
        }
        Ok(())
    }
}

/// Result of a least-squares plane fit.
#[derive(Debug, Clone, Copy)]
pub struct PlaneFit {
    pub centroid: Point3<f64>,
    /// Unit normal with canonical sign (largest-magnitude component positive).
    pub normal: Vector3<f64>,
    pub rms_distance: f64,
}

/// Applies a rigid motion to every point; normals, when present, are
/// rotated only. Point count and ordering are preserved.
pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    let points = cloud.points.iter().map(|p| t.apply_point(*p)).collect();
    let normals = cloud.normals.as_ref().map(|n| Normals {
        vectors: n.vectors.iter().map(|v| t.apply_vector(*v)).collect(),
        valid: n.valid.clone(),
    });
    PointCloud { points, normals }
}

/// PCA normal estimation over k-nearest neighborhoods.
///
/// Each normal is the least-variance eigenvector of the covariance of the
/// point and its `k_neighbors` nearest neighbors, oriented toward
/// `viewpoint`. Collinear or coincident neighborhoods yield an invalid
/// flag for that point.
pub fn estimate_normals(
    cloud: &PointCloud,
    k_neighbors: usize,
    viewpoint: Point3<f64>,
) -> Result<PointCloud, GeometryError> {
    if k_neighbors < 3 {
        return Err(GeometryError::BadNeighborCount(k_neighbors));
    }
    if cloud.len() < k_neighbors + 1 {
        return Err(GeometryError::NotEnoughPoints { needed: k_neighbors + 1, got: cloud.len() });
    }
    let tree = KdTree::build(cloud.points());
    let results: Vec<(Vector3<f64>, bool)> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let p = cloud.points[i];
            let neighbors = tree.knn(&p, k_neighbors + 1);
            let mut centroid = Vector3::zeros();
            for &(j, _) in &neighbors {
                centroid += cloud.points[j].coords;
            }
            centroid /= neighbors.len() as f64;
            let mut scatter = Matrix3::zeros();
            for &(j, _) in &neighbors {
                let d = cloud.points[j].coords - centroid;
                scatter += d * d.transpose();
            }
            match smallest_eigenvector(&scatter) {
                Some(mut n) => {
                    if n.dot(&(viewpoint - p)) < 0.0 {
                        n = -n;
                    }
                    (n, true)
                }
                None => (Vector3::new(0.0, 0.0, 1.0), false),
            }
        })
        .collect();
    let (vectors, valid): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    PointCloud::with_normals(cloud.points.clone(), Normals::new(vectors, valid)?)
}

/// Fits a plane by the direction of minimal variance of the centered
/// points: the centroid plus the eigenvector of the smallest eigenvalue of
/// the scatter matrix. Fails on fewer than three points or rank-deficient
/// (collinear) input.
pub fn fit_plane_svd(points: &[Point3<f64>]) -> Result<PlaneFit, GeometryError> {
    if points.len() < 3 {
        return Err(GeometryError::NotEnoughPoints { needed: 3, got: points.len() });
    }
    let mut centroid = Vector3::zeros();
    for p in points {
        centroid += p.coords;
    }
    centroid /= points.len() as f64;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p.coords - centroid;
        scatter += d * d.transpose();
    }
    let normal = smallest_eigenvector(&scatter).ok_or(GeometryError::DegenerateInput)?;
    let normal = canonical_sign(normal);
    let centroid = Point3::from(centroid);
    let mut sum_sq = 0.0;
    for p in points {
        let d = normal.dot(&(p.coords - centroid.coords));
        sum_sq += d * d;
    }
    let rms_distance = (sum_sq / points.len() as f64).sqrt();
    Ok(PlaneFit { centroid, normal, rms_distance })
}

/// Flips `n` so its largest-magnitude component is positive.
pub fn canonical_sign(n: Vector3<f64>) -> Vector3<f64> {
    let mut axis = 0;
    for a in 1..3 {
        if n[a].abs() > n[axis].abs() {
            axis = a;
        }
    }
    if n[axis] < 0.0 {
        -n
    } else {
        n
    }
}

/// Unit eigenvector of the smallest eigenvalue of a symmetric 3x3 matrix,
/// or `None` when the two smallest eigenvalues are both (near) zero
/// relative to the largest, i.e. the points have no plane of least
/// variance.
fn smallest_eigenvector(scatter: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let eig = nalgebra::SymmetricEigen::new(*scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let [lo, mid, hi] = order;
    let max = eig.eigenvalues[hi].max(0.0);
    // Collinear: only one direction of spread. Coincident: none.
    if max <= 0.0 || eig.eigenvalues[mid] <= max * 1e-12 {
        return None;
    }
    let _ = lo;
    let v = eig.eigenvectors.column(order[0]).into_owned();
    Some(v.normalize())
}
