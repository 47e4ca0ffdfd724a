//! Alignment estimators and reconstruction / tracking / pose / depth metrics.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_angle, CameraPose, DepthMap, Sim3, Vec3};
use crate::knn::KdTree;
use crate::rng::{self, streams};

pub const DEFAULT_APD_THRESHOLDS: [f64; 5] = [0.05, 0.10, 0.20, 0.40, 0.80];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Correspondences {
    pub pred: Vec<Vec3>,
    pub gt: Vec<Vec3>,
    pub weights: Option<Vec<f64>>,
}

impl Correspondences {
    pub fn new(pred: Vec<Vec3>, gt: Vec<Vec3>) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::LengthMismatch(pred.len(), gt.len()));
        }
        Ok(Self {
            pred,
            gt,
            weights: None,
        })
    }

    /// Pairs restricted to entries where `valid` is set.
    pub fn masked(pred: &[Vec3], gt: &[Vec3], valid: &[bool]) -> Result<Self> {
        if pred.len() != gt.len() || pred.len() != valid.len() {
            return Err(Error::LengthMismatch(pred.len(), gt.len()));
        }
        let (p, g) = pred
            .iter()
            .zip(gt)
            .zip(valid)
            .filter(|(_, v)| **v)
            .map(|((p, g), _)| (*p, *g))
            .unzip();
        Self::new(p, g)
    }

    pub fn len(&self) -> usize {
        self.pred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            pred: idx.iter().map(|&i| self.pred[i]).collect(),
            gt: idx.iter().map(|&i| self.gt[i]).collect(),
            weights: self.weights.as_ref().map(|w| idx.iter().map(|&i| w[i]).collect()),
        }
    }
}

/// Relative singular-value floor below which a configuration counts as
/// degenerate (collinear or coincident).
const DEGENERACY_RATIO: f64 = 1e-10;

/// Closed-form least-squares similarity `gt ≈ s R pred + t` (Umeyama 1991),
/// with optional per-pair weights.
pub fn umeyama_sim3(c: &Correspondences) -> Result<Sim3> {
    let n = c.len();
    if n < 3 {
        return Err(Error::Degenerate(format!("need at least 3 correspondences, got {n}")));
    }
    if c.gt.len() != n {
        return Err(Error::LengthMismatch(n, c.gt.len()));
    }
    let weights: Vec<f64> = match &c.weights {
        Some(w) if w.len() == n => w.clone(),
        Some(w) => return Err(Error::LengthMismatch(n, w.len())),
        None => vec![1.0; n],
    };
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::Degenerate("weights sum to zero".into()));
    }
    let mu_p = c.pred.iter().zip(&weights).map(|(p, w)| p * *w).sum::<Vec3>() / wsum;
    let mu_g = c.gt.iter().zip(&weights).map(|(g, w)| g * *w).sum::<Vec3>() / wsum;

    let mut cov = Matrix3::zeros();
    let mut cov_p = Matrix3::zeros();
    let mut var_p = 0.0;
    for ((p, g), w) in c.pred.iter().zip(&c.gt).zip(&weights) {
        let dp = p - mu_p;
        let dg = g - mu_g;
        cov += (dg * dp.transpose()) * *w;
        cov_p += (dp * dp.transpose()) * *w;
        var_p += dp.norm_squared() * w;
    }
    cov /= wsum;
    cov_p /= wsum;
    var_p /= wsum;

    let sp = cov_p.singular_values();
    if !(sp[0] > 0.0) || sp[1] <= DEGENERACY_RATIO * sp[0] {
        return Err(Error::Degenerate("predicted points are collinear or coincident".into()));
    }
    // Identical sets: return the exact solution rather than an SVD round-off.
    if c.pred == c.gt {
        return Ok(Sim3::identity());
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    if sv[1] <= DEGENERACY_RATIO * sv[0] {
        return Err(Error::Degenerate("cross-covariance has rank < 2".into()));
    }
    let mut s_diag = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s_diag[(2, 2)] = -1.0;
    }
    let r = u * s_diag * v_t;
    let trace_ds = sv[0] * s_diag[(0, 0)] + sv[1] * s_diag[(1, 1)] + sv[2] * s_diag[(2, 2)];
    let scale = trace_ds / var_p;
    if !(scale > 0.0) {
        return Err(Error::Degenerate("non-positive scale".into()));
    }
    let rotation = UnitQuaternion::from_matrix(&r);
    let translation = mu_g - scale * (rotation * mu_p);
    Ok(Sim3::new(scale, rotation, translation))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 512,
            inlier_threshold: 0.05,
            seed: 0,
        }
    }
}

fn inliers(t: &Sim3, c: &Correspondences, threshold: f64) -> Vec<bool> {
    c.pred
        .iter()
        .zip(&c.gt)
        .map(|(p, g)| (t.apply(p) - g).norm() < threshold)
        .collect()
}

/// Minimal-sample RANSAC over Umeyama fits. The first model with the most
/// inliers wins; the result is a single refit on that inlier set.
pub fn ransac_sim3(c: &Correspondences, cfg: &RansacConfig) -> Result<(Sim3, Vec<bool>)> {
    let n = c.len();
    if n < 3 {
        return Err(Error::Degenerate(format!("need at least 3 correspondences, got {n}")));
    }
    let mut rng = rng::stream(cfg.seed, streams::RANSAC);
    let mut best: Option<(usize, Vec<bool>)> = None;
    for _ in 0..cfg.iterations {
        let idx = sample(&mut rng, n, 3).into_vec();
        let Ok(model) = umeyama_sim3(&c.subset(&idx)) else {
            continue;
        };
        let mask = inliers(&model, c, cfg.inlier_threshold);
        let count = mask.iter().filter(|m| **m).count();
        if count >= 3 && best.as_ref().map_or(true, |(b, _)| count > *b) {
            best = Some((count, mask));
        }
    }
    let (_, mask) = best.ok_or(Error::NoConsensus)?;
    let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let refit = umeyama_sim3(&c.subset(&idx))?;
    Ok((refit, mask))
}

/// Lower median; `values` must be non-empty.
pub fn lower_median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// Median of `‖gt‖ / ‖pred‖` about the shared world origin.
pub fn median_scale(c: &Correspondences) -> Result<f64> {
    if c.is_empty() {
        return Err(Error::EmptyValidSet);
    }
    let mut ratios = Vec::with_capacity(c.len());
    for (k, (p, g)) in c.pred.iter().zip(&c.gt).enumerate() {
        let np = p.norm();
        if np == 0.0 {
            return Err(Error::ZeroNorm(k));
        }
        ratios.push(g.norm() / np);
    }
    Ok(lower_median(&mut ratios))
}

fn track_errors(pred: &[Vec3], gt: &[Vec3], valid: &[bool]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() || pred.len() != valid.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    let errs: Vec<f64> = pred
        .iter()
        .zip(gt)
        .zip(valid)
        .filter(|(_, v)| **v)
        .map(|((p, g), _)| (p - g).norm())
        .collect();
    if errs.is_empty() {
        return Err(Error::EmptyValidSet);
    }
    Ok(errs)
}

/// Mean over thresholds of the percentage of points with error below it.
pub fn apd(pred: &[Vec3], gt: &[Vec3], valid: &[bool], thresholds: &[f64]) -> Result<f64> {
    let errs = track_errors(pred, gt, valid)?;
    if thresholds.is_empty() {
        return Err(Error::EmptyValidSet);
    }
    let n = errs.len() as f64;
    let total: f64 = thresholds
        .iter()
        .map(|t| 100.0 * errs.iter().filter(|e| **e < *t).count() as f64 / n)
        .sum();
    Ok(total / thresholds.len() as f64)
}

/// Mean Euclidean end-point error.
pub fn epe(pred: &[Vec3], gt: &[Vec3], valid: &[bool]) -> Result<f64> {
    let errs = track_errors(pred, gt, valid)?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    pub ate: f64,
    pub rpe_t: f64,
    /// Degrees.
    pub rpe_r: f64,
    pub alignment: Sim3,
    /// True when camera centers were degenerate and only translation was
    /// aligned.
    pub centroid_only: bool,
}

/// ATE after Sim(3) alignment of camera centers; RPE over consecutive pairs.
pub fn ate_rpe(pred: &[CameraPose], gt: &[CameraPose]) -> Result<PoseErrors> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.len() < 2 {
        return Err(Error::Degenerate("need at least 2 poses".into()));
    }
    let c = Correspondences::new(
        pred.iter().map(|p| p.translation).collect(),
        gt.iter().map(|p| p.translation).collect(),
    )?;
    let (align, centroid_only) = match umeyama_sim3(&c) {
        Ok(t) => (t, false),
        Err(Error::Degenerate(_)) => {
            let n = c.len() as f64;
            let mp = c.pred.iter().sum::<Vec3>() / n;
            let mg = c.gt.iter().sum::<Vec3>() / n;
            (Sim3::new(1.0, UnitQuaternion::identity(), mg - mp), true)
        }
        Err(e) => return Err(e),
    };
    let aligned: Vec<CameraPose> = pred.iter().map(|p| align.apply_pose(p)).collect();
    let n = pred.len() as f64;
    let ate = (aligned
        .iter()
        .zip(gt)
        .map(|(a, g)| (a.translation - g.translation).norm_squared())
        .sum::<f64>()
        / n)
        .sqrt();
    let mut rpe_t = 0.0;
    let mut rpe_r = 0.0;
    for k in 0..pred.len() - 1 {
        let rel_gt = gt[k].inverse().compose(&gt[k + 1]);
        let rel_pred = aligned[k].inverse().compose(&aligned[k + 1]);
        let err = rel_gt.inverse().compose(&rel_pred);
        rpe_t += err.translation.norm();
        rpe_r += rotation_angle(&err.rotation, &UnitQuaternion::identity()).to_degrees();
    }
    let m = (pred.len() - 1) as f64;
    Ok(PoseErrors {
        ate,
        rpe_t: rpe_t / m,
        rpe_r: rpe_r / m,
        alignment: align,
        centroid_only,
    })
}

/// Unoriented unit normals from PCA over each point's `k` nearest neighbours
/// (the point itself included).
pub fn estimate_normals(points: &[Vec3], k: usize) -> Vec<Vec3> {
    let tree = KdTree::new(points);
    points
        .iter()
        .map(|p| {
            let nb = tree.k_nearest(p, k);
            let mean = nb.iter().map(|(i, _)| points[*i]).sum::<Vec3>() / nb.len() as f64;
            let mut cov = Matrix3::zeros();
            for (i, _) in &nb {
                let d = points[*i] - mean;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let (mut min_i, mut min_v) = (0, f64::INFINITY);
            for j in 0..3 {
                if eig.eigenvalues[j] < min_v {
                    min_v = eig.eigenvalues[j];
                    min_i = j;
                }
            }
            eig.eigenvectors.column(min_i).normalize()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudMetrics {
    pub acc: f64,
    pub comp: f64,
    /// `None` when a cloud has fewer than `k + 1` points.
    pub nc: Option<f64>,
}

/// Accuracy, completeness and normal consistency between two clouds.
pub fn acc_comp_nc(pred: &[Vec3], gt: &[Vec3], knn_for_normals: usize) -> Result<CloudMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyValidSet);
    }
    let gt_tree = KdTree::new(gt);
    let pred_tree = KdTree::new(pred);
    let p2g: Vec<(usize, f64)> = pred.iter().map(|p| gt_tree.nearest(p).unwrap()).collect();
    let g2p: Vec<(usize, f64)> = gt.iter().map(|g| pred_tree.nearest(g).unwrap()).collect();
    let acc = p2g.iter().map(|(_, d)| d.sqrt()).sum::<f64>() / pred.len() as f64;
    let comp = g2p.iter().map(|(_, d)| d.sqrt()).sum::<f64>() / gt.len() as f64;

    let k = knn_for_normals;
    let nc = if pred.len() > k && gt.len() > k && k >= 2 {
        let np = estimate_normals(pred, k);
        let ng = estimate_normals(gt, k);
        let a = p2g
            .iter()
            .enumerate()
            .map(|(i, (j, _))| np[i].dot(&ng[*j]).abs())
            .sum::<f64>()
            / pred.len() as f64;
        let b = g2p
            .iter()
            .enumerate()
            .map(|(j, (i, _))| ng[j].dot(&np[*i]).abs())
            .sum::<f64>()
            / gt.len() as f64;
        Some(((a + b) / 2.0).min(1.0))
    } else {
        None
    };
    Ok(CloudMetrics { acc, comp, nc })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthAlignment {
    Scale,
    ScaleShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rel: f64,
    /// Percentage with `max(d̂/d, d/d̂) < 1.25`.
    pub delta: f64,
    pub scale: f64,
    pub shift: f64,
}

/// Per-sequence aligned depth metrics over the valid intersection.
pub fn depth_metrics(pred: &[DepthMap], gt: &[DepthMap], mode: DepthAlignment) -> Result<DepthMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    let mut pairs = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        if p.values.len() != g.values.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", g.height, g.width),
                actual: format!("{}x{}", p.height, p.width),
            });
        }
        for i in 0..p.values.len() {
            let (dp, dg) = (p.values[i], g.values[i]);
            if p.valid[i] && g.valid[i] && dg > 0.0 && dp.is_finite() && dg.is_finite() {
                pairs.push((dp, dg));
            }
        }
    }
    let (scale, shift) = match mode {
        DepthAlignment::Scale => {
            let mut ratios: Vec<f64> = pairs.iter().filter(|(p, _)| *p > 0.0).map(|(p, g)| g / p).collect();
            if ratios.is_empty() {
                return Err(Error::EmptyValidSet);
            }
            (lower_median(&mut ratios), 0.0)
        }
        DepthAlignment::ScaleShift => {
            if pairs.is_empty() {
                return Err(Error::EmptyValidSet);
            }
            let n = pairs.len() as f64;
            let mp = pairs.iter().map(|(p, _)| p).sum::<f64>() / n;
            let mg = pairs.iter().map(|(_, g)| g).sum::<f64>() / n;
            let cov: f64 = pairs.iter().map(|(p, g)| (p - mp) * (g - mg)).sum();
            let var: f64 = pairs.iter().map(|(p, _)| (p - mp) * (p - mp)).sum();
            if var <= 0.0 {
                (0.0, mg)
            } else {
                let s = cov / var;
                (s, mg - s * mp)
            }
        }
    };
    if pairs.is_empty() {
        return Err(Error::EmptyValidSet);
    }
    let n = pairs.len() as f64;
    let mut rel = 0.0;
    let mut within = 0usize;
    for (p, g) in &pairs {
        let a = scale * p + shift;
        rel += (a - g).abs() / g;
        if a > 0.0 && (a / g).max(g / a) < 1.25 {
            within += 1;
        }
    }
    Ok(DepthMetrics {
        rel: rel / n,
        delta: 100.0 * within as f64 / n,
        scale,
        shift,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackAlignment {
    Sim3Ransac,
    MedianScale,
    None,
}

impl std::str::FromStr for TrackAlignment {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sim3_ransac" => Ok(Self::Sim3Ransac),
            "median_scale" => Ok(Self::MedianScale),
            "none" => Ok(Self::None),
            other => Err(format!("unknown alignment '{other}'")),
        }
    }
}

/// Aligns predicted track points to ground truth using the valid pairs;
/// returns the aligned points and the transform used.
pub fn align_tracks(
    pred: &[Vec3],
    gt: &[Vec3],
    valid: &[bool],
    mode: TrackAlignment,
    ransac: &RansacConfig,
) -> Result<(Vec<Vec3>, Sim3)> {
    let c = Correspondences::masked(pred, gt, valid)?;
    if c.is_empty() {
        return Err(Error::EmptyValidSet);
    }
    let t = match mode {
        TrackAlignment::None => Sim3::identity(),
        TrackAlignment::MedianScale => {
            Sim3::new(median_scale(&c)?, UnitQuaternion::identity(), Vec3::zeros())
        }
        TrackAlignment::Sim3Ransac => ransac_sim3(&c, ransac)?.0,
    };
    Ok((pred.iter().map(|p| t.apply(p)).collect(), t))
}

/// Structured metric results; every field is optional and only the ones a
/// task computes are populated.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(default)]
    pub name: String,
    pub apd: Option<f64>,
    pub epe: Option<f64>,
    pub ate: Option<f64>,
    pub rpe_t: Option<f64>,
    pub rpe_r: Option<f64>,
    pub acc: Option<f64>,
    pub comp: Option<f64>,
    pub nc: Option<f64>,
    pub depth_rel: Option<f64>,
    pub depth_delta: Option<f64>,
    #[serde(default)]
    pub apd_thresholds: Vec<f64>,
    /// Alignment method and parameters per metric group.
    #[serde(default)]
    pub alignment: BTreeMap<String, serde_json::Value>,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 10] = [
        "apd", "epe", "ate", "rpe_t", "rpe_r", "acc", "comp", "nc", "depth_rel", "depth_delta",
    ];

    pub fn get(&self, column: &str) -> Option<f64> {
        match column {
            "apd" => self.apd,
            "epe" => self.epe,
            "ate" => self.ate,
            "rpe_t" => self.rpe_t,
            "rpe_r" => self.rpe_r,
            "acc" => self.acc,
            "comp" => self.comp,
            "nc" => self.nc,
            "depth_rel" => self.depth_rel,
            "depth_delta" => self.depth_delta,
            _ => None,
        }
    }

    pub fn set(&mut self, column: &str, value: Option<f64>) {
        match column {
            "apd" => self.apd = value,
            "epe" => self.epe = value,
            "ate" => self.ate = value,
            "rpe_t" => self.rpe_t = value,
            "rpe_r" => self.rpe_r = value,
            "acc" => self.acc = value,
            "comp" => self.comp = value,
            "nc" => self.nc = value,
            "depth_rel" => self.depth_rel = value,
            "depth_delta" => self.depth_delta = value,
            _ => {}
        }
    }

    /// Names of populated metrics in column order.
    pub fn populated(&self) -> Vec<&'static str> {
        Self::COLUMNS.iter().copied().filter(|c| self.get(c).is_some()).collect()
    }

    pub fn csv_header() -> String {
        let mut h = vec!["name"];
        h.extend(Self::COLUMNS);
        h.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut row = vec![self.name.clone()];
        row.extend(
            Self::COLUMNS
                .iter()
                .map(|c| self.get(c).map(|v| format!("{v}")).unwrap_or_default()),
        );
        row.join(",")
    }
}
