//! Alignment of a low-accuracy scan to a high-accuracy scan of the same
//! scene: voxel downsampling, FPFH descriptors, feature matching, RANSAC
//! global alignment, and a three-stage point-to-plane ICP refinement with
//! decreasing correspondence gates.

use std::collections::HashMap;

use nalgebra::{Matrix3, Matrix6, Point3, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{estimate_normals, GeometryError, PointCloud, RigidTransform};
use crate::kdtree::KdTree;

pub const FPFH_BINS_PER_FEATURE: usize = 11;
pub const FPFH_DIM: usize = FPFH_BINS_PER_FEATURE * 3;

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("parameter error: {0}")]
    BadParameter(&'static str),
    #[error("cloud is empty")]
    EmptyCloud,
    #[error("cloud has no normals")]
    MissingNormals,
    #[error("feature set is empty")]
    EmptyFeatures,
    #[error("need at least {needed} correspondences, got {got}")]
    NotEnoughCorrespondences { needed: usize, got: usize },
    #[error("RANSAC found no sample reaching {needed} inliers")]
    RansacFailed { needed: usize },
    #[error("ICP stage {stage} gated zero correspondences")]
    IcpStageFailed { stage: usize },
    #[error("registration failed at the {stage} stage: {source}")]
    Pipeline {
        stage: &'static str,
        #[source]
        source: Box<RegistrationError>,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl RegistrationError {
    fn at(self, stage: &'static str) -> Self {
        RegistrationError::Pipeline { stage, source: Box::new(self) }
    }

    /// Name of the pipeline stage an error was wrapped with, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            RegistrationError::Pipeline { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

/// 33-bin FPFH descriptors for a downsampled cloud. `isolated[i]` marks
/// points that had no usable neighbors inside the feature radius; their
/// descriptor is all zero and they are skipped during matching.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub descriptors: Vec<[f64; FPFH_DIM]>,
    pub source_indices: Vec<usize>,
    pub isolated: Vec<bool>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }
}

/// Candidate point pairs `(source_index, target_index)` with their
/// descriptor distances.
#[derive(Debug, Clone, Default)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(usize, usize)>,
    pub feature_distances: Vec<f64>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Per-stage ICP summary: gate threshold, accepted iterations, and the
/// final mean-squared point-to-plane objective (m^2).
#[derive(Debug, Clone, Copy)]
pub struct IcpStageLog {
    pub threshold: f64,
    pub iterations: usize,
    pub final_objective: f64,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub inlier_count: usize,
    /// RMS alignment error in meters (point-to-point for RANSAC,
    /// point-to-plane for ICP results).
    pub rms_alignment_error: f64,
    /// Inlier threshold used by the global RANSAC stage, echoed for audit.
    pub ransac_epsilon: Option<f64>,
    pub stage_log: Vec<IcpStageLog>,
}

#[derive(Debug, Clone)]
pub struct RansacParams {
    pub epsilon: f64,
    pub sample_size: usize,
    pub max_iterations: usize,
    /// Stop scanning iterations once the best inlier ratio reaches this.
    pub early_exit_ratio: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            epsilon: 0.03,
            sample_size: 4,
            max_iterations: 100_000,
            early_exit_ratio: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IcpParams {
    /// Correspondence gates in meters, strictly decreasing.
    pub stage_thresholds: Vec<f64>,
    pub max_iter_per_stage: usize,
    /// Stop a stage when the objective improves by less than this.
    pub convergence_delta: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            stage_thresholds: vec![0.008, 0.004, 0.002],
            max_iter_per_stage: 50,
            convergence_delta: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationParams {
    pub voxel_size: f64,
    pub fpfh_radius: f64,
    /// k for PCA normals (both the downsampled feature clouds and the
    /// full-resolution ICP target).
    pub normals_k: usize,
    pub mutual_filter: bool,
    pub max_feature_distance: Option<f64>,
    pub ransac: RansacParams,
    pub icp: IcpParams,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            voxel_size: 0.05,
            fpfh_radius: 0.125,
            normals_k: 16,
            mutual_filter: true,
            max_feature_distance: None,
            ransac: RansacParams::default(),
            icp: IcpParams::default(),
        }
    }
}

/// Replaces each occupied voxel by the centroid of its member points.
/// Output is ordered by voxel key, so equal inputs give equal outputs.
pub fn voxel_downsample(
    cloud: &PointCloud,
    voxel_size: f64,
) -> Result<PointCloud, RegistrationError> {
    if !(voxel_size > 0.0) {
        return Err(RegistrationError::BadParameter("voxel_size must be positive"));
    }
    let mut cells: HashMap<(i64, i64, i64), (Vector3<f64>, usize)> = HashMap::new();
    for p in cloud.points() {
        let key = (
            (p.x / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.z / voxel_size).floor() as i64,
        );
        let cell = cells.entry(key).or_insert((Vector3::zeros(), 0));
        cell.0 += p.coords;
        cell.1 += 1;
    }
    let mut keyed: Vec<_> = cells.into_iter().collect();
    keyed.sort_unstable_by_key(|(k, _)| *k);
    let points = keyed
        .into_iter()
        .map(|(_, (sum, n))| Point3::from(sum / n as f64))
        .collect();
    Ok(PointCloud::new(points)?)
}

/// Standard FPFH: per-point simplified histograms over (alpha, phi, theta)
/// angle triplets, 11 bins each, followed by the distance-weighted
/// neighbor sum. Each 11-bin block is normalized to sum 100.
pub fn compute_fpfh(cloud: &PointCloud, radius: f64) -> Result<FeatureSet, RegistrationError> {
    if !(radius > 0.0) {
        return Err(RegistrationError::BadParameter("fpfh radius must be positive"));
    }
    let normals = cloud.normals().ok_or(RegistrationError::MissingNormals)?;
    let n = cloud.len();
    let tree = KdTree::build(cloud.points());

    // Neighbor lists (self excluded, invalid-normal points excluded).
    let neighborhoods: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if !normals.is_valid(i) {
                return Vec::new();
            }
            tree.within_radius(&cloud.point(i), radius)
                .into_iter()
                .filter(|&j| j != i && normals.is_valid(j))
                .collect()
        })
        .collect();

    let spfh: Vec<[f64; FPFH_DIM]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut hist = [0.0f64; FPFH_DIM];
            let mut count = 0usize;
            for &j in &neighborhoods[i] {
                if let Some((a, p, t)) = pair_features(
                    cloud.point(i),
                    normals.vector(i),
                    cloud.point(j),
                    normals.vector(j),
                ) {
                    hist[bin_unit(a)] += 1.0;
                    hist[FPFH_BINS_PER_FEATURE + bin_unit(p)] += 1.0;
                    hist[2 * FPFH_BINS_PER_FEATURE + bin_angle(t)] += 1.0;
                    count += 1;
                }
            }
            if count > 0 {
                normalize_blocks(&mut hist);
            }
            hist
        })
        .collect();

    let descriptors: Vec<[f64; FPFH_DIM]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let neighbors = &neighborhoods[i];
            if neighbors.is_empty() {
                return [0.0f64; FPFH_DIM];
            }
            let mut acc = spfh[i];
            let k = neighbors.len() as f64;
            for &j in neighbors {
                let w = (cloud.point(i) - cloud.point(j)).norm();
                if w > 0.0 {
                    let scale = 1.0 / (k * w);
                    for (d, s) in acc.iter_mut().zip(spfh[j].iter()) {
                        *d += scale * s;
                    }
                }
            }
            normalize_blocks(&mut acc);
            acc
        })
        .collect();

    let isolated = neighborhoods.iter().map(|nb| nb.is_empty()).collect();
    Ok(FeatureSet { descriptors, source_indices: (0..n).collect(), isolated })
}

/// Darboux-frame angle triplet for an ordered point pair, with the usual
/// role swap so the source is the point whose normal is closer to the
/// connecting line. Returns `None` for coincident points or a degenerate
/// frame.
fn pair_features(
    p1: Point3<f64>,
    n1: Vector3<f64>,
    p2: Point3<f64>,
    n2: Vector3<f64>,
) -> Option<(f64, f64, f64)> {
    let mut d = p2 - p1;
    let dist = d.norm();
    if dist <= 0.0 {
        return None;
    }
    d /= dist;
    let (ns, nt) = if n1.dot(&d).abs() < n2.dot(&d).abs() {
        d = -d;
        (n2, n1)
    } else {
        (n1, n2)
    };
    let u = ns;
    let v = d.cross(&u);
    let v_norm = v.norm();
    if v_norm < 1e-12 {
        return None;
    }
    let v = v / v_norm;
    let w = u.cross(&v);
    let alpha = v.dot(&nt);
    let phi = u.dot(&d);
    let theta = w.dot(&nt).atan2(u.dot(&nt));
    Some((alpha, phi, theta))
}

fn bin_unit(value: f64) -> usize {
    let b = (FPFH_BINS_PER_FEATURE as f64 * (value + 1.0) / 2.0).floor() as isize;
    b.clamp(0, FPFH_BINS_PER_FEATURE as isize - 1) as usize
}

fn bin_angle(value: f64) -> usize {
    let b = (FPFH_BINS_PER_FEATURE as f64 * (value + std::f64::consts::PI)
        / (2.0 * std::f64::consts::PI))
        .floor() as isize;
    b.clamp(0, FPFH_BINS_PER_FEATURE as isize - 1) as usize
}

fn normalize_blocks(hist: &mut [f64; FPFH_DIM]) {
    for block in 0..3 {
        let s = block * FPFH_BINS_PER_FEATURE;
        let e = s + FPFH_BINS_PER_FEATURE;
        let sum: f64 = hist[s..e].iter().sum();
        if sum > 0.0 {
            for v in &mut hist[s..e] {
                *v *= 100.0 / sum;
            }
        }
    }
}

fn descriptor_distance(a: &[f64; FPFH_DIM], b: &[f64; FPFH_DIM]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Maps each usable source descriptor to its nearest target descriptor.
/// With `mutual` set, keeps only reciprocal nearest-neighbor pairs; with
/// `max_distance` set, drops pairs above it. Isolated (flagged) points on
/// either side never participate.
pub fn match_features(
    source: &FeatureSet,
    target: &FeatureSet,
    mutual: bool,
    max_distance: Option<f64>,
) -> Result<CorrespondenceSet, RegistrationError> {
    let src_active: Vec<usize> =
        (0..source.len()).filter(|&i| !source.isolated[i]).collect();
    let tgt_active: Vec<usize> =
        (0..target.len()).filter(|&i| !target.isolated[i]).collect();
    if src_active.is_empty() || tgt_active.is_empty() {
        return Err(RegistrationError::EmptyFeatures);
    }

    let nearest_in_target: Vec<(usize, f64)> = src_active
        .par_iter()
        .map(|&i| nearest_descriptor(&source.descriptors[i], &target.descriptors, &tgt_active))
        .collect();

    let nearest_in_source: Option<HashMap<usize, usize>> = if mutual {
        let back: Vec<(usize, f64)> = tgt_active
            .par_iter()
            .map(|&j| nearest_descriptor(&target.descriptors[j], &source.descriptors, &src_active))
            .collect();
        Some(tgt_active.iter().copied().zip(back.into_iter().map(|(i, _)| i)).collect())
    } else {
        None
    };

    let mut pairs = Vec::new();
    let mut feature_distances = Vec::new();
    for (slot, &i) in src_active.iter().enumerate() {
        let (j, dist) = nearest_in_target[slot];
        if let Some(limit) = max_distance {
            if dist > limit {
                continue;
            }
        }
        if let Some(back) = &nearest_in_source {
            if back.get(&j) != Some(&i) {
                continue;
            }
        }
        pairs.push((i, j));
        feature_distances.push(dist);
    }
    Ok(CorrespondenceSet { pairs, feature_distances })
}

fn nearest_descriptor(
    query: &[f64; FPFH_DIM],
    descriptors: &[[f64; FPFH_DIM]],
    active: &[usize],
) -> (usize, f64) {
    let mut best = (active[0], f64::INFINITY);
    for &j in active {
        let d = descriptor_distance(query, &descriptors[j]);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Least-squares rigid motion from paired points via the cross-covariance
/// SVD, with the usual reflection guard. `None` when the pairing is too
/// degenerate to produce a proper rotation.
pub fn solve_rigid(
    src: &[Point3<f64>],
    dst: &[Point3<f64>],
) -> Option<RigidTransform> {
    if src.len() != dst.len() || src.len() < 3 {
        return None;
    }
    let n = src.len() as f64;
    let mut cs = Vector3::zeros();
    let mut cd = Vector3::zeros();
    for (s, d) in src.iter().zip(dst.iter()) {
        cs += s.coords;
        cd += d.coords;
    }
    cs /= n;
    cd /= n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst.iter()) {
        h += (s.coords - cs) * (d.coords - cd).transpose();
    }
    let svd = nalgebra::SVD::new(h, true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let v = vt.transpose();
    let mut r = v * u.transpose();
    if r.determinant() < 0.0 {
        let flip = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        r = v * flip * u.transpose();
    }
    let t = cd - r * cs;
    RigidTransform::new(r, t).ok()
}

/// RANSAC over feature correspondences: repeatedly fit a rigid motion to
/// `sample_size` random pairs, count inliers under `epsilon`, keep the
/// best (ties go to the earliest iteration), then refit on its inliers.
/// Iteration RNG streams are derived from the seed, so the result does not
/// depend on thread count.
pub fn ransac_align(
    correspondences: &CorrespondenceSet,
    source: &PointCloud,
    target: &PointCloud,
    params: &RansacParams,
) -> Result<RegistrationResult, RegistrationError> {
    let n = correspondences.len();
    if params.sample_size < 3 {
        return Err(RegistrationError::BadParameter("sample_size must be at least 3"));
    }
    if n < params.sample_size {
        return Err(RegistrationError::NotEnoughCorrespondences {
            needed: params.sample_size,
            got: n,
        });
    }
    let src_pts: Vec<Point3<f64>> =
        correspondences.pairs.iter().map(|&(i, _)| source.point(i)).collect();
    let dst_pts: Vec<Point3<f64>> =
        correspondences.pairs.iter().map(|&(_, j)| target.point(j)).collect();
    let eps2 = params.epsilon * params.epsilon;

    let count_inliers = |t: &RigidTransform| -> usize {
        src_pts
            .iter()
            .zip(dst_pts.iter())
            .filter(|(s, d)| (t.apply_point(**s) - **d).norm_squared() < eps2)
            .count()
    };

    const CHUNK: usize = 2048;
    let mut best: Option<(usize, usize, RigidTransform)> = None; // (inliers, iter, t)
    let mut start = 0usize;
    while start < params.max_iterations {
        let end = (start + CHUNK).min(params.max_iterations);
        let chunk_best = (start..end)
            .into_par_iter()
            .filter_map(|iter| {
                let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
                rng.set_stream(iter as u64 + 1);
                let sample = rand::seq::index::sample(&mut rng, n, params.sample_size);
                let s: Vec<Point3<f64>> = sample.iter().map(|k| src_pts[k]).collect();
                let d: Vec<Point3<f64>> = sample.iter().map(|k| dst_pts[k]).collect();
                let t = solve_rigid(&s, &d)?;
                Some((count_inliers(&t), iter, t))
            })
            .reduce_with(|a, b| {
                // Max inliers; ties keep the earliest iteration.
                if (b.0, std::cmp::Reverse(b.1)) > (a.0, std::cmp::Reverse(a.1)) {
                    b
                } else {
                    a
                }
            });
        if let Some(cb) = chunk_best {
            let better = match &best {
                None => true,
                Some(old) => (cb.0, std::cmp::Reverse(cb.1)) > (old.0, std::cmp::Reverse(old.1)),
            };
            if better {
                best = Some(cb);
            }
        }
        if let Some((inliers, _, _)) = &best {
            if *inliers as f64 >= params.early_exit_ratio * n as f64 {
                break;
            }
        }
        start = end;
    }

    let (best_inliers, _, best_t) = best.ok_or(RegistrationError::RansacFailed {
        needed: params.sample_size,
    })?;
    if best_inliers < params.sample_size {
        return Err(RegistrationError::RansacFailed { needed: params.sample_size });
    }

    // Refit on the winning consensus set, then recount under the refit.
    let inlier_idx: Vec<usize> = (0..n)
        .filter(|&k| (best_t.apply_point(src_pts[k]) - dst_pts[k]).norm_squared() < eps2)
        .collect();
    let s: Vec<Point3<f64>> = inlier_idx.iter().map(|&k| src_pts[k]).collect();
    let d: Vec<Point3<f64>> = inlier_idx.iter().map(|&k| dst_pts[k]).collect();
    let transform = solve_rigid(&s, &d).unwrap_or(best_t);
    let inlier_count = count_inliers(&transform);
    let mut sum_sq = 0.0;
    let mut kept = 0usize;
    for k in 0..n {
        let d2 = (transform.apply_point(src_pts[k]) - dst_pts[k]).norm_squared();
        if d2 < eps2 {
            sum_sq += d2;
            kept += 1;
        }
    }
    let rms = if kept > 0 { (sum_sq / kept as f64).sqrt() } else { 0.0 };
    Ok(RegistrationResult {
        transform,
        inlier_count,
        rms_alignment_error: rms,
        ransac_epsilon: Some(params.epsilon),
        stage_log: Vec::new(),
    })
}

/// Three-stage point-to-plane ICP. Each stage gates nearest-neighbor
/// correspondences by its threshold, then iterates linearized least-squares
/// updates, accepting an update only while the mean-squared point-to-plane
/// objective does not increase.
pub fn icp_point_to_plane(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    params: &IcpParams,
) -> Result<RegistrationResult, RegistrationError> {
    let normals = target.normals().ok_or(RegistrationError::MissingNormals)?;
    if source.is_empty() || target.is_empty() {
        return Err(RegistrationError::EmptyCloud);
    }
    if params.stage_thresholds.is_empty()
        || params.stage_thresholds.windows(2).any(|w| w[1] >= w[0])
        || params.stage_thresholds.iter().any(|t| *t <= 0.0)
    {
        return Err(RegistrationError::BadParameter(
            "stage thresholds must be positive and strictly decreasing",
        ));
    }

    let tree = KdTree::build(target.points());
    let mut transform = *init;
    let mut stage_log = Vec::with_capacity(params.stage_thresholds.len());
    let mut final_pairs = 0usize;

    for (stage, &threshold) in params.stage_thresholds.iter().enumerate() {
        let gate2 = threshold * threshold;
        let mut iterations = 0usize;
        let mut last_obj = f64::INFINITY;
        let mut gated_count;

        loop {
            let gated = gate_correspondences(source, target, normals, &tree, &transform, gate2);
            gated_count = gated.len();
            if gated.is_empty() {
                return Err(RegistrationError::IcpStageFailed { stage });
            }
            let obj_now = mean_sq_objective(&gated, &transform);
            if last_obj.is_infinite() {
                last_obj = obj_now;
            }
            if iterations >= params.max_iter_per_stage {
                break;
            }
            let Some(update) = solve_point_to_plane_step(&gated, &transform) else {
                break;
            };
            let candidate = update.compose(&transform);
            let obj_new = mean_sq_objective(&gated, &candidate);
            // Reject any step that worsens the objective and end the stage.
            if obj_new > last_obj || !obj_new.is_finite() {
                break;
            }
            transform = candidate;
            iterations += 1;
            let improved = last_obj - obj_new;
            last_obj = obj_new;
            if improved < params.convergence_delta {
                break;
            }
        }
        stage_log.push(IcpStageLog { threshold, iterations, final_objective: last_obj });
        final_pairs = gated_count;
    }

    let rms = stage_log.last().map(|s| s.final_objective.sqrt()).unwrap_or(0.0);
    Ok(RegistrationResult {
        transform,
        inlier_count: final_pairs,
        rms_alignment_error: rms,
        ransac_epsilon: None,
        stage_log,
    })
}

struct GatedPair {
    source: Point3<f64>,
    target: Point3<f64>,
    normal: Vector3<f64>,
}

fn gate_correspondences(
    source: &PointCloud,
    target: &PointCloud,
    normals: &crate::geometry::Normals,
    tree: &KdTree,
    transform: &RigidTransform,
    gate2: f64,
) -> Vec<GatedPair> {
    source
        .points()
        .par_iter()
        .filter_map(|p| {
            let moved = transform.apply_point(*p);
            let (j, d2) = tree.nearest(&moved)?;
            if d2 < gate2 && normals.is_valid(j) {
                Some(GatedPair { source: *p, target: target.point(j), normal: normals.vector(j) })
            } else {
                None
            }
        })
        .collect()
}

fn mean_sq_objective(pairs: &[GatedPair], transform: &RigidTransform) -> f64 {
    // Fixed-size chunks folded in order keep the sum independent of
    // worker-thread count.
    let partials: Vec<f64> = pairs
        .par_chunks(4096)
        .map(|chunk| {
            chunk
                .iter()
                .map(|pair| {
                    let r = pair
                        .normal
                        .dot(&(transform.apply_point(pair.source) - pair.target));
                    r * r
                })
                .sum::<f64>()
        })
        .collect();
    partials.iter().sum::<f64>() / pairs.len() as f64
}

/// One linearized point-to-plane step around the current transform: solves
/// the 6x6 normal equations for a small rotation/translation, using an
/// SVD pseudo-inverse so rank-deficient geometry (a single plane) yields
/// the minimum-norm update.
fn solve_point_to_plane_step(
    pairs: &[GatedPair],
    transform: &RigidTransform,
) -> Option<RigidTransform> {
    let partials: Vec<(Matrix6<f64>, Vector6<f64>)> = pairs
        .par_chunks(4096)
        .map(|chunk| {
            let mut a = Matrix6::zeros();
            let mut b = Vector6::zeros();
            for pair in chunk {
                let moved = transform.apply_point(pair.source);
                let n = pair.normal;
                let c = moved.coords.cross(&n);
                let row = Vector6::new(c.x, c.y, c.z, n.x, n.y, n.z);
                let r = n.dot(&(moved - pair.target));
                a += row * row.transpose();
                b += -r * row;
            }
            (a, b)
        })
        .collect();
    let mut a = Matrix6::zeros();
    let mut b = Vector6::zeros();
    for (pa, pb) in partials {
        a += pa;
        b += pb;
    }
    let svd = nalgebra::SVD::new(a, true, true);
    let s_max = svd.singular_values.max();
    if !(s_max > 0.0) {
        return None;
    }
    let x = svd.solve(&b, s_max * 1e-12).ok()?;
    let omega = Vector3::new(x[0], x[1], x[2]);
    let delta_t = Vector3::new(x[3], x[4], x[5]);
    let rot = nalgebra::Rotation3::from_scaled_axis(omega).into_inner();
    RigidTransform::new(rot, delta_t).ok()
}

/// Full coarse-to-fine alignment of a low-accuracy cloud onto a
/// high-accuracy cloud: downsample, estimate normals, FPFH, match, RANSAC,
/// then staged ICP on the full-resolution clouds. Normals are oriented
/// toward each cloud's own centroid, which is stable under the unknown
/// misalignment between the device frames.
pub fn register_pair(
    las: &PointCloud,
    has: &PointCloud,
    params: &RegistrationParams,
) -> Result<RegistrationResult, RegistrationError> {
    if las.is_empty() || has.is_empty() {
        return Err(RegistrationError::EmptyCloud.at("downsample"));
    }
    let ds_las = voxel_downsample(las, params.voxel_size).map_err(|e| e.at("downsample"))?;
    let ds_has = voxel_downsample(has, params.voxel_size).map_err(|e| e.at("downsample"))?;

    let ds_las = estimate_normals(&ds_las, params.normals_k, ds_las.centroid())
        .map_err(|e| RegistrationError::from(e).at("normals"))?;
    let ds_has = estimate_normals(&ds_has, params.normals_k, ds_has.centroid())
        .map_err(|e| RegistrationError::from(e).at("normals"))?;

    let feat_las = compute_fpfh(&ds_las, params.fpfh_radius).map_err(|e| e.at("features"))?;
    let feat_has = compute_fpfh(&ds_has, params.fpfh_radius).map_err(|e| e.at("features"))?;

    let correspondences =
        match_features(&feat_las, &feat_has, params.mutual_filter, params.max_feature_distance)
            .map_err(|e| e.at("matching"))?;

    let global = ransac_align(&correspondences, &ds_las, &ds_has, &params.ransac)
        .map_err(|e| e.at("ransac"))?;

    let has_with_normals = estimate_normals(has, params.normals_k, has.centroid())
        .map_err(|e| RegistrationError::from(e).at("icp"))?;
    let refined = icp_point_to_plane(las, &has_with_normals, &global.transform, &params.icp)
        .map_err(|e| e.at("icp"))?;

    Ok(RegistrationResult { ransac_epsilon: global.ransac_epsilon, ..refined })
}

/// Direct inlier recount under the RANSAC criterion; used by tests to
/// audit reported counts.
pub fn count_inliers_direct(
    correspondences: &CorrespondenceSet,
    source: &PointCloud,
    target: &PointCloud,
    transform: &RigidTransform,
    epsilon: f64,
) -> usize {
    correspondences
        .pairs
        .iter()
        .filter(|&&(i, j)| {
            (transform.apply_point(source.point(i)) - target.point(j)).norm() < epsilon
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::apply_transform;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_plane(nx: usize, ny: usize, spacing: f64, z: f64) -> Vec<Point3<f64>> {
        let mut pts = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                pts.push(Point3::new(i as f64 * spacing, j as f64 * spacing, z));
            }
        }
        pts
    }

    #[test]
    fn voxel_merges_cohabitants_to_midpoint() {
        let cloud = PointCloud::new(vec![
            Point3::new(0.010, 0.010, 0.010),
            Point3::new(0.030, 0.030, 0.030),
        ])
        .unwrap();
        let out = voxel_downsample(&cloud, 0.05).unwrap();
        assert_eq!(out.len(), 1);
        assert_relative_eq!(out.point(0).x, 0.020, epsilon = 1e-15);
    }

    #[test]
    fn voxel_keeps_separated_points() {
        let cloud = PointCloud::new(vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(0.2, 0.2, 0.2),
            Point3::new(-0.2, 0.3, 0.4),
        ])
        .unwrap();
        let out = voxel_downsample(&cloud, 0.1).unwrap();
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn voxel_pigeonholes_unit_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Point3<f64>> = (0..10_000)
            .map(|_| {
                Point3::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))
            })
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let out = voxel_downsample(&cloud, 0.1).unwrap();
        assert!(out.len() <= 1000, "{} voxels", out.len());
    }

    #[test]
    fn voxel_rejects_bad_size() {
        let cloud = PointCloud::new(vec![Point3::origin()]).unwrap();
        assert!(voxel_downsample(&cloud, 0.0).is_err());
    }

    #[test]
    fn fpfh_uniform_plane_gives_identical_descriptors() {
        let pts = grid_plane(12, 12, 0.05, 0.0);
        let normals = crate::geometry::Normals::all_valid(vec![Vector3::z(); pts.len()]).unwrap();
        let cloud = PointCloud::with_normals(pts, normals).unwrap();
        let feats = compute_fpfh(&cloud, 0.12).unwrap();
        let first = feats.descriptors[0];
        for d in &feats.descriptors {
            for (a, b) in d.iter().zip(first.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fpfh_isolated_point_is_flagged_zero() {
        let mut pts = grid_plane(8, 8, 0.05, 0.0);
        pts.push(Point3::new(10.0, 10.0, 10.0));
        let normals = crate::geometry::Normals::all_valid(vec![Vector3::z(); pts.len()]).unwrap();
        let cloud = PointCloud::with_normals(pts, normals).unwrap();
        let feats = compute_fpfh(&cloud, 0.12).unwrap();
        let last = feats.len() - 1;
        assert!(feats.isolated[last]);
        assert!(feats.descriptors[last].iter().all(|v| *v == 0.0));
        assert!(!feats.isolated[0]);
    }

    #[test]
    fn fpfh_invariant_under_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // A bumpy sheet so descriptors are non-trivial.
        let pts: Vec<Point3<f64>> = grid_plane(15, 15, 0.05, 0.0)
            .into_iter()
            .map(|p| Point3::new(p.x, p.y, 0.02 * (p.x * 30.0).sin() * (p.y * 25.0).cos()))
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let cloud = estimate_normals(&cloud, 8, Point3::new(0.3, 0.3, 5.0)).unwrap();
        let feats = compute_fpfh(&cloud, 0.13).unwrap();

        let t = crate::geometry::tests::random_rigid(&mut rng);
        let moved = apply_transform(&cloud, &t);
        let feats_moved = compute_fpfh(&moved, 0.13).unwrap();
        for (a, b) in feats.descriptors.iter().zip(feats_moved.descriptors.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
        }
    }

    fn toy_features(descs: Vec<[f64; FPFH_DIM]>) -> FeatureSet {
        let n = descs.len();
        FeatureSet { descriptors: descs, source_indices: (0..n).collect(), isolated: vec![false; n] }
    }

    #[test]
    fn match_identity_is_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let descs: Vec<[f64; FPFH_DIM]> = (0..20)
            .map(|_| {
                let mut d = [0.0; FPFH_DIM];
                for v in &mut d {
                    *v = rng.gen_range(0.0..10.0);
                }
                d
            })
            .collect();
        let set = toy_features(descs);
        let matches = match_features(&set, &set, true, None).unwrap();
        assert_eq!(matches.len(), 20);
        for (k, &(i, j)) in matches.pairs.iter().enumerate() {
            assert_eq!(i, j);
            assert_eq!(matches.feature_distances[k], 0.0);
        }
    }

    #[test]
    fn match_equals_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mk = |rng: &mut ChaCha8Rng, n: usize| -> Vec<[f64; FPFH_DIM]> {
            (0..n)
                .map(|_| {
                    let mut d = [0.0; FPFH_DIM];
                    for v in &mut d {
                        *v = rng.gen_range(0.0..10.0);
                    }
                    d
                })
                .collect()
        };
        let src = toy_features(mk(&mut rng, 50));
        let tgt = toy_features(mk(&mut rng, 50));
        let got = match_features(&src, &tgt, false, None).unwrap();
        for (k, &(i, j)) in got.pairs.iter().enumerate() {
            let mut best = (usize::MAX, f64::INFINITY);
            for jj in 0..tgt.len() {
                let d = descriptor_distance(&src.descriptors[i], &tgt.descriptors[jj]);
                if d < best.1 {
                    best = (jj, d);
                }
            }
            assert_eq!(j, best.0);
            assert_relative_eq!(got.feature_distances[k], best.1);
        }
    }

    #[test]
    fn mutual_filter_removes_nonreciprocal_pairs() {
        // target[0] is everyone's favorite, but it prefers source[0].
        let mut a = [0.0; FPFH_DIM];
        a[0] = 1.0;
        let mut b = [0.0; FPFH_DIM];
        b[0] = 1.2;
        let mut c = [0.0; FPFH_DIM];
        c[0] = 1.3;
        let mut far = [0.0; FPFH_DIM];
        far[0] = 50.0;
        let src = toy_features(vec![a, b, c]);
        let tgt = toy_features(vec![a, far, far]);
        let loose = match_features(&src, &tgt, false, None).unwrap();
        assert_eq!(loose.len(), 3);
        let strict = match_features(&src, &tgt, true, None).unwrap();
        assert_eq!(strict.pairs, vec![(0, 0)]);
    }

    #[test]
    fn empty_features_rejected() {
        let set = toy_features(vec![]);
        let other = toy_features(vec![[0.0; FPFH_DIM]]);
        assert!(matches!(
            match_features(&set, &other, false, None),
            Err(RegistrationError::EmptyFeatures)
        ));
    }

    fn self_correspondences(n: usize) -> CorrespondenceSet {
        CorrespondenceSet { pairs: (0..n).map(|i| (i, i)).collect(), feature_distances: vec![0.0; n] }
    }

    #[test]
    fn ransac_on_self_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pts: Vec<Point3<f64>> = (0..60)
            .map(|_| {
                Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            })
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let corr = self_correspondences(cloud.len());
        let res = ransac_align(&corr, &cloud, &cloud, &RansacParams::default()).unwrap();
        assert_eq!(res.inlier_count, corr.len());
        assert_eq!(res.ransac_epsilon, Some(0.03));
        assert!(res.transform.rotation_angle() < 1e-9);
        assert!(res.transform.translation().norm() < 1e-9);
    }

    #[test]
    fn ransac_recovers_transform_under_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let src_pts: Vec<Point3<f64>> = (0..200)
            .map(|_| {
                Point3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))
            })
            .collect();
        let source = PointCloud::new(src_pts).unwrap();
        let truth = crate::geometry::tests::random_rigid(&mut rng);
        let mut dst_pts: Vec<Point3<f64>> =
            source.points().iter().map(|p| truth.apply_point(*p)).collect();
        // 30% outliers: scramble targets.
        for k in 0..60 {
            dst_pts[k * 3] = Point3::new(
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
            );
        }
        let target = PointCloud::new(dst_pts).unwrap();
        let corr = self_correspondences(source.len());
        let params = RansacParams { max_iterations: 4000, seed: 5, ..RansacParams::default() };
        let res = ransac_align(&corr, &source, &target, &params).unwrap();
        let residual = res.transform.compose(&truth.inverse());
        assert!(residual.rotation_angle().to_degrees() < 0.5);
        assert!(residual.translation().norm() < 0.005);
        let recount =
            count_inliers_direct(&corr, &source, &target, &res.transform, params.epsilon);
        assert_eq!(res.inlier_count, recount);
    }

    #[test]
    fn ransac_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pts: Vec<Point3<f64>> = (0..80)
            .map(|_| {
                Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            })
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let corr = self_correspondences(cloud.len());
        let params = RansacParams { seed: 77, max_iterations: 500, ..RansacParams::default() };
        let a = ransac_align(&corr, &cloud, &cloud, &params).unwrap();
        let b = ransac_align(&corr, &cloud, &cloud, &params).unwrap();
        assert_eq!(a.transform.to_homogeneous(), b.transform.to_homogeneous());
        assert_eq!(a.inlier_count, b.inlier_count);
    }

    fn wavy_room(seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        // Two orthogonal walls and a floor, lightly textured.
        for i in 0..40 {
            for j in 0..40 {
                let (u, v) = (i as f64 * 0.05, j as f64 * 0.05);
                let bump = 0.003 * ((u * 7.0).sin() + (v * 9.0).cos());
                pts.push(Point3::new(u, v, bump));
                pts.push(Point3::new(u, bump, v * 0.5 + 0.05));
                pts.push(Point3::new(bump, u, v * 0.5 + 0.05));
            }
        }
        let _ = &mut rng;
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn icp_self_alignment_is_identity() {
        let cloud = wavy_room(1);
        let with_normals = estimate_normals(&cloud, 12, cloud.centroid()).unwrap();
        let res = icp_point_to_plane(
            &cloud,
            &with_normals,
            &RigidTransform::identity(),
            &IcpParams::default(),
        )
        .unwrap();
        assert!(res.transform.rotation_angle() < 1e-9);
        assert!(res.transform.translation().norm() < 1e-9);
        assert!(res.stage_log.last().unwrap().final_objective < 1e-18);
        let thresholds: Vec<f64> = res.stage_log.iter().map(|s| s.threshold).collect();
        assert_eq!(thresholds, vec![0.008, 0.004, 0.002]);
    }

    #[test]
    fn icp_pulls_offset_plane_flat() {
        let pts = grid_plane(30, 30, 0.01, 0.0);
        let target = PointCloud::new(pts.clone()).unwrap();
        let normals =
            crate::geometry::Normals::all_valid(vec![Vector3::z(); target.len()]).unwrap();
        let target = PointCloud::with_normals(target.points().to_vec(), normals).unwrap();
        let source = PointCloud::new(
            pts.iter().map(|p| Point3::new(p.x, p.y, p.z + 0.005)).collect(),
        )
        .unwrap();
        let params = IcpParams { stage_thresholds: vec![0.008], ..IcpParams::default() };
        let res =
            icp_point_to_plane(&source, &target, &RigidTransform::identity(), &params).unwrap();
        // Residual normal offset of the transformed source.
        let moved = apply_transform(&source, &res.transform);
        let mean_z: f64 =
            moved.points().iter().map(|p| p.z).sum::<f64>() / moved.len() as f64;
        assert!(mean_z.abs() < 1e-6, "residual offset {mean_z}");
    }

    #[test]
    fn icp_objective_non_increasing_within_stages() {
        let cloud = wavy_room(2);
        let with_normals = estimate_normals(&cloud, 12, cloud.centroid()).unwrap();
        let nudge = RigidTransform::new(
            nalgebra::Rotation3::from_scaled_axis(Vector3::new(0.0, 0.0, 0.004)).into_inner(),
            Vector3::new(0.003, -0.002, 0.001),
        )
        .unwrap();
        let source = apply_transform(&cloud, &nudge);
        let res = icp_point_to_plane(
            &source,
            &with_normals,
            &RigidTransform::identity(),
            &IcpParams::default(),
        )
        .unwrap();
        // Recovered transform should invert the nudge.
        let residual = res.transform.compose(&nudge);
        assert!(residual.rotation_angle() < 1e-4);
        assert!(residual.translation().norm() < 1e-6 + 2e-4);
        assert_eq!(res.stage_log.len(), 3);
    }

    #[test]
    fn icp_errors_when_gate_excludes_everything() {
        let a = PointCloud::new(grid_plane(5, 5, 0.01, 0.0)).unwrap();
        let far = PointCloud::new(grid_plane(5, 5, 0.01, 10.0)).unwrap();
        let normals = crate::geometry::Normals::all_valid(vec![Vector3::z(); far.len()]).unwrap();
        let far = PointCloud::with_normals(far.points().to_vec(), normals).unwrap();
        let err = icp_point_to_plane(&a, &far, &RigidTransform::identity(), &IcpParams::default())
            .unwrap_err();
        assert!(matches!(err, RegistrationError::IcpStageFailed { stage: 0 }));
    }

    #[test]
    fn register_pair_empty_las_names_downsample_stage() {
        let empty = PointCloud::new(vec![]).unwrap();
        let cloud = wavy_room(3);
        let err = register_pair(&empty, &cloud, &RegistrationParams::default()).unwrap_err();
        assert_eq!(err.stage(), Some("downsample"));
    }

    #[test]
    fn register_pair_identical_clouds_is_near_identity() {
        let cloud = wavy_room(4);
        let params = RegistrationParams {
            voxel_size: 0.08,
            fpfh_radius: 0.2,
            ransac: RansacParams { max_iterations: 2000, ..RansacParams::default() },
            ..RegistrationParams::default()
        };
        let res = register_pair(&cloud, &cloud, &params).unwrap();
        assert!(res.transform.rotation_angle().to_degrees() < 0.01);
        assert!(res.transform.translation().norm() < 1e-4);
        assert_eq!(res.ransac_epsilon, Some(0.03));
        assert_eq!(res.stage_log.len(), 3);
    }
}
