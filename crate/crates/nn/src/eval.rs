//! Dense-tracking evaluation of a model on ground-truth clips.

use anytime4d_core::evalmetrics::{apd, epe, ransac_sim3, umeyama_sim3, Correspondences, RansacConfig, TrackAlignment};
use anytime4d_core::geometry::{Sim3, Vec3};
use anytime4d_core::scenegen::GroundTruthBundle;
use anytime4d_core::{Error, Result};
use nalgebra::UnitQuaternion;

use crate::model::{Forward4D, Model};
use crate::tensor::Real;

/// Positions of the query pixels at every decoded target: base + displacement.
pub fn predicted_tracks(out: &Forward4D) -> Vec<Vec<Vec3>> {
    out.frame
        .displacements
        .values()
        .map(|f| out.frame.base.points.iter().zip(&f.deltas).map(|(p, d)| p + d).collect())
        .collect()
}

/// Ground-truth tracks of frame `q` toward every frame, with validity.
pub fn gt_tracks(bundle: &GroundTruthBundle, q: usize) -> (Vec<Vec<Vec3>>, Vec<Vec<bool>>) {
    let base = bundle.base_pointmap(q);
    (0..bundle.num_frames())
        .map(|tau| {
            let f = bundle.displacement(q, tau);
            let pts = base.points.iter().zip(&f.deltas).map(|(p, d)| p + d).collect();
            let valid = base.valid.iter().zip(&f.valid).map(|(a, b)| *a && *b).collect();
            (pts, valid)
        })
        .unzip()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingEval {
    pub epe: f64,
    pub apd: f64,
    pub points: usize,
    pub alignment: Sim3,
    /// `sim3_ransac`, `umeyama` (RANSAC found no consensus), `median_scale`,
    /// `identity`.
    pub alignment_used: &'static str,
}

/// Aligns pooled predicted tracks to ground truth. Sim(3) RANSAC falls back
/// to a plain least-squares fit when no consensus is found, and to identity
/// when the prediction is degenerate.
pub fn align_pooled(
    pred: &[Vec3],
    gt: &[Vec3],
    valid: &[bool],
    mode: TrackAlignment,
    ransac: &RansacConfig,
) -> Result<(Sim3, &'static str)> {
    let c = Correspondences::masked(pred, gt, valid)?;
    if c.is_empty() {
        return Err(Error::EmptyValidSet);
    }
    Ok(match mode {
        TrackAlignment::None => (Sim3::identity(), "identity"),
        TrackAlignment::MedianScale => {
            let s = anytime4d_core::evalmetrics::median_scale(&c)?;
            (Sim3::new(s, UnitQuaternion::identity(), Vec3::zeros()), "median_scale")
        }
        TrackAlignment::Sim3Ransac => match ransac_sim3(&c, ransac) {
            Ok((t, _)) => (t, "sim3_ransac"),
            Err(_) => match umeyama_sim3(&c) {
                Ok(t) => (t, "umeyama"),
                Err(_) => (Sim3::identity(), "identity"),
            },
        },
    })
}

/// Tracks every pixel of each query frame to every frame of a normalized
/// clip and scores them after one alignment over all pooled points.
pub fn evaluate_tracking<T: Real>(
    model: &Model<T>,
    bundle: &GroundTruthBundle,
    queries: &[usize],
    mode: TrackAlignment,
    ransac: &RansacConfig,
    thresholds: &[f64],
) -> Result<TrackingEval> {
    let n = bundle.num_frames();
    let times: Vec<_> = (0..n).map(|i| bundle.timestamp(i)).collect();
    let targets: Vec<usize> = (0..n).collect();
    let (mut pred, mut gt, mut valid) = (Vec::new(), Vec::new(), Vec::new());
    for &q in queries {
        let out = model.forward_4d(&bundle.frames, &times, q, &targets)?;
        let (g, v) = gt_tracks(bundle, q);
        for (p, (g, v)) in predicted_tracks(&out).into_iter().zip(g.into_iter().zip(v)) {
            pred.extend(p);
            gt.extend(g);
            valid.extend(v);
        }
    }
    let (t, used) = align_pooled(&pred, &gt, &valid, mode, ransac)?;
    let aligned: Vec<Vec3> = pred.iter().map(|p| t.apply(p)).collect();
    Ok(TrackingEval {
        epe: epe(&aligned, &gt, &valid)?,
        apd: apd(&aligned, &gt, &valid, thresholds)?,
        points: valid.iter().filter(|v| **v).count(),
        alignment: t,
        alignment_used: used,
    })
}
