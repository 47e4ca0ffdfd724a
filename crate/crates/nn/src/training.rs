//! Losses, supervision sampling, the optimizer and checkpoints.

use std::path::Path;

use anytime4d_core::archive::{Array, TensorArchive};
use anytime4d_core::geometry::{intrinsics_to_rays, CameraPose, DepthMap, RayMap, Vec3};
use anytime4d_core::rng::{self, streams};
use anytime4d_core::scenegen::GroundTruthBundle;
use anytime4d_core::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::graph::{Graph, Var};
use crate::model::{images_tensor, Layout, Model, ModelConfig, PointOutput};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisionConfig {
    /// Probability of supervising every valid pixel in an iteration.
    pub dense_probability: f64,
    /// Range of the fraction of largest-motion pixels kept otherwise.
    pub keep_fraction: (f64, f64),
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        Self {
            dense_probability: 0.2,
            keep_fraction: (0.2, 0.3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Length of the cosine schedule.
    pub steps: usize,
    /// Learning rate at the end of the schedule, as a fraction of the peak.
    pub min_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of the spatial-gradient term relative to the depth value term.
    pub depth_gradient_weight: f64,
    /// Weight of the temporal term relative to the motion value term.
    pub motion_temporal_weight: f64,
    pub supervision: SupervisionConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 0.05,
            clip_norm: 1.0,
            steps: 5000,
            min_lr_fraction: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            depth_gradient_weight: 1.0,
            motion_temporal_weight: 1.0,
            supervision: SupervisionConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("learning_rate and weight_decay must be nonnegative, clip_norm positive");
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return bad("min_lr_fraction must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("invalid Adam constants");
        }
        let s = &self.supervision;
        if !(0.0..=1.0).contains(&s.dense_probability) {
            return bad("dense_probability must be in [0, 1]");
        }
        let (lo, hi) = s.keep_fraction;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad("keep_fraction must satisfy 0 < lo <= hi <= 1");
        }
        Ok(())
    }

    /// Cosine-annealed learning rate at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.steps.max(1) as f64;
        let p = (step as f64 / total).min(1.0);
        let floor = self.learning_rate * self.min_lr_fraction;
        floor + (self.learning_rate - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Which pixels of the query frame are supervised toward each target.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionPlan {
    pub query: usize,
    /// All frames, in time order.
    pub targets: Vec<usize>,
    /// One mask per target, row-major over the query frame.
    pub masks: Vec<Vec<bool>>,
    pub dense: bool,
    /// Fraction kept in sparse mode; 1 when dense.
    pub keep_fraction: f64,
}

/// Keeps the `fraction` of valid pixels with the largest magnitudes. Ties are
/// broken by pixel index.
pub fn top_fraction_mask(magnitudes: &[f64], valid: &[bool], fraction: f64) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..magnitudes.len()).filter(|&i| valid[i]).collect();
    let keep = ((idx.len() as f64) * fraction).round() as usize;
    let keep = if idx.is_empty() { 0 } else { keep.clamp(1, idx.len()) };
    idx.sort_by(|&a, &b| magnitudes[b].total_cmp(&magnitudes[a]).then(a.cmp(&b)));
    let mut mask = vec![false; magnitudes.len()];
    for &i in &idx[..keep] {
        mask[i] = true;
    }
    mask
}

pub fn build_supervision_plan(bundle: &GroundTruthBundle, seed: u64, cfg: &SupervisionConfig) -> Result<SupervisionPlan> {
    let n = bundle.num_frames();
    if n < 2 {
        return Err(Error::InsufficientFrames {
            requested: 2,
            stride: 1,
            available: n,
        });
    }
    let mut r = rng::stream(seed, streams::SUPERVISION);
    let query = r.gen_range(0..n);
    let dense = r.gen_bool(cfg.dense_probability.clamp(0.0, 1.0));
    let (lo, hi) = cfg.keep_fraction;
    let keep_fraction = if dense {
        1.0
    } else if hi > lo {
        r.gen_range(lo..hi)
    } else {
        lo
    };
    let targets: Vec<usize> = (0..n).collect();
    let masks = targets
        .iter()
        .map(|&tau| {
            let f = bundle.displacement(query, tau);
            if dense {
                f.valid.clone()
            } else {
                top_fraction_mask(&f.magnitudes(), &f.valid, keep_fraction)
            }
        })
        .collect();
    Ok(SupervisionPlan {
        query,
        targets,
        masks,
        dense,
        keep_fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub depth: f64,
    pub ray: f64,
    pub camera: f64,
    pub motion: f64,
    pub total: f64,
    pub depth_pixels: usize,
    pub ray_pixels: usize,
    pub camera_frames: usize,
    pub motion_pixels: usize,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str =
        "step,lr,total,depth,ray,camera,motion,depth_pixels,ray_pixels,camera_frames,motion_pixels,grad_norm";

    pub fn csv_row(&self, step: usize, lr: f64, grad_norm: f64) -> String {
        format!(
            "{step},{lr:e},{:e},{:e},{:e},{:e},{:e},{},{},{},{},{grad_norm:e}",
            self.total,
            self.depth,
            self.ray,
            self.camera,
            self.motion,
            self.depth_pixels,
            self.ray_pixels,
            self.camera_frames,
            self.motion_pixels
        )
    }
}

fn aleatoric<T: Real>(g: &mut Graph<T>, pred: Var, gt: Tensor<T>, ls: Var, mask: Vec<bool>) -> Option<(Var, usize)> {
    let count = mask.iter().filter(|m| **m).count();
    g.aleatoric_l1(pred, gt, ls, mask).map(|v| (v, count))
}

fn weighted_sum<T: Real>(g: &mut Graph<T>, a: Var, b: Option<Var>, w: f64) -> Var {
    match b {
        Some(b) => {
            let b = g.scale(b, T::of(w));
            g.add(a, b)
        }
        None => a,
    }
}

/// Index pairs `(a, b)` of horizontally then vertically adjacent pixels over
/// `frames` stacked `w x h` images.
pub fn forward_difference_pairs(frames: usize, w: usize, h: usize) -> (Vec<usize>, Vec<usize>) {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for f in 0..frames {
        let o = f * w * h;
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                a.push(o + y * w + x);
                b.push(o + y * w + x + 1);
            }
        }
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                a.push(o + y * w + x);
                b.push(o + (y + 1) * w + x);
            }
        }
    }
    (a, b)
}

/// Value term plus forward-difference gradient term over stacked depth maps.
/// `pred` and `log_sigma` are `[frames * H * W, 1]`; the gradient term uses the
/// uncertainty of the first pixel of each pair.
pub fn depth_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    log_sigma: Var,
    gt: &[DepthMap],
    gradient_weight: f64,
) -> Result<(Var, usize)> {
    let (w, h) = (gt[0].width, gt[0].height);
    let values: Vec<f64> = gt.iter().flat_map(|d| d.values.iter().copied()).collect();
    let valid: Vec<bool> = gt.iter().flat_map(|d| d.valid.iter().copied()).collect();
    if g.shape(pred) != (values.len(), 1) {
        return Err(Error::ShapeMismatch {
            expected: format!("[{}, 1]", values.len()),
            actual: format!("{:?}", g.shape(pred)),
        });
    }
    let (val, count) = aleatoric(g, pred, Tensor::from_f64(values.len(), 1, &values), log_sigma, valid.clone())
        .ok_or(Error::EmptyValidSet)?;
    let (ia, ib) = forward_difference_pairs(gt.len(), w, h);
    let pa = g.gather_rows(pred, ia.clone());
    let pb = g.gather_rows(pred, ib.clone());
    let dp = g.sub(pb, pa);
    let dg: Vec<f64> = ia.iter().zip(&ib).map(|(&a, &b)| values[b] - values[a]).collect();
    let mask: Vec<bool> = ia.iter().zip(&ib).map(|(&a, &b)| valid[a] && valid[b]).collect();
    let s = g.gather_rows(log_sigma, ia);
    let grad = aleatoric(g, dp, Tensor::from_f64(dg.len(), 1, &dg), s, mask).map(|x| x.0);
    Ok((weighted_sum(g, val, grad, gradient_weight), count))
}

/// Aleatoric L1 over the six origin/direction channels at half resolution.
pub fn ray_loss<T: Real>(g: &mut Graph<T>, pred: Var, log_sigma: Var, gt: &[RayMap]) -> Result<(Var, usize)> {
    let ch: Vec<f64> = gt.iter().flat_map(|r| r.to_channels()).collect();
    let rows = ch.len() / 6;
    if g.shape(pred) != (rows, 6) {
        return Err(Error::ShapeMismatch {
            expected: format!("[{rows}, 6]"),
            actual: format!("{:?}", g.shape(pred)),
        });
    }
    aleatoric(g, pred, Tensor::from_f64(rows, 6, &ch), log_sigma, vec![true; rows]).ok_or(Error::EmptyValidSet)
}

/// Mean over frames of `|fov error| + rotation angle + L1 translation error`.
pub fn camera_loss<T: Real>(g: &mut Graph<T>, fov: Var, quat: Var, trans: Var, gt_fov: f64, gt: &[CameraPose]) -> Var {
    let n = gt.len();
    let fgt = g.constant(Tensor::full(n, 1, T::of(gt_fov)));
    let df = g.sub(fov, fgt);
    let df = g.abs(df);
    let q: Vec<f64> = gt.iter().flat_map(|p| p.quaternion_wxyz()).collect();
    let ang = g.quat_geodesic(quat, Tensor::from_f64(n, 4, &q));
    let t: Vec<f64> = gt.iter().flat_map(|p| [p.translation.x, p.translation.y, p.translation.z]).collect();
    let tgt = g.constant(Tensor::from_f64(n, 3, &t));
    let dt = g.sub(trans, tgt);
    let dt = g.abs(dt);
    let parts = [g.sum(df), g.sum(ang), g.sum(dt)];
    let s = g.add(parts[0], parts[1]);
    let s = g.add(s, parts[2]);
    g.scale(s, T::of(1.0 / n as f64))
}

/// Value term plus consecutive-target difference term. `pred` and `log_sigma`
/// stack the targets in time order (`[T * H * W, 3]` and `[T * H * W, 1]`);
/// the temporal term uses the uncertainty at the later target.
pub fn motion_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    log_sigma: Var,
    gt: &[Vec<Vec3>],
    masks: &[Vec<bool>],
    temporal_weight: f64,
) -> Result<(Var, usize)> {
    let t = gt.len();
    if t == 0 || masks.len() != t {
        return Err(Error::LengthMismatch(masks.len(), t));
    }
    let hw = gt[0].len();
    if g.shape(pred) != (t * hw, 3) {
        return Err(Error::ShapeMismatch {
            expected: format!("[{}, 3]", t * hw),
            actual: format!("{:?}", g.shape(pred)),
        });
    }
    let flat: Vec<f64> = gt.iter().flat_map(|v| v.iter().flat_map(|p| [p.x, p.y, p.z])).collect();
    let mask: Vec<bool> = masks.iter().flatten().copied().collect();
    let (val, count) =
        aleatoric(g, pred, Tensor::from_f64(t * hw, 3, &flat), log_sigma, mask).ok_or(Error::EmptyValidSet)?;
    if t == 1 {
        return Ok((val, count));
    }
    let early: Vec<usize> = (0..(t - 1) * hw).collect();
    let late: Vec<usize> = (hw..t * hw).collect();
    let pa = g.gather_rows(pred, early.clone());
    let pb = g.gather_rows(pred, late.clone());
    let dp = g.sub(pb, pa);
    let dg: Vec<f64> = early
        .iter()
        .zip(&late)
        .flat_map(|(&a, &b)| (0..3).map(move |c| (a, b, c)))
        .map(|(a, b, c)| flat[b * 3 + c] - flat[a * 3 + c])
        .collect();
    let dm: Vec<bool> = early
        .iter()
        .zip(&late)
        .map(|(&a, &b)| masks[a / hw][a % hw] && masks[b / hw][b % hw])
        .collect();
    let s = g.gather_rows(log_sigma, late);
    let temporal = aleatoric(g, dp, Tensor::from_f64(dm.len(), 3, &dg), s, dm).map(|x| x.0);
    Ok((weighted_sum(g, val, temporal, temporal_weight), count))
}

/// Motion targets of the query toward each planned target, in the model's
/// output parameterization.
pub fn motion_targets(bundle: &GroundTruthBundle, plan: &SupervisionPlan, output: PointOutput) -> Vec<Vec<Vec3>> {
    let q = plan.query;
    let base = bundle.base_pointmap(q);
    let pose = bundle.poses[q];
    plan.targets
        .iter()
        .map(|&tau| {
            let d = &bundle.displacement(q, tau).deltas;
            match output {
                PointOutput::Displacement => d.clone(),
                PointOutput::PointsWorld => base.points.iter().zip(d).map(|(p, d)| p + d).collect(),
                PointOutput::PointsLocal => base
                    .points
                    .iter()
                    .zip(d)
                    .map(|(p, d)| pose.world_to_camera(&(p + d)))
                    .collect(),
            }
        })
        .collect()
}

/// The four loss terms as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub depth: Var,
    pub ray: Var,
    pub camera: Var,
    pub motion: Var,
    pub total: Var,
    pub counts: [usize; 4],
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().to_f64().unwrap();
        let (depth, ray, camera, motion) = (v(self.depth), v(self.ray), v(self.camera), v(self.motion));
        LossBreakdown {
            depth,
            ray,
            camera,
            motion,
            total: depth + ray + camera + motion,
            depth_pixels: self.counts[0],
            ray_pixels: self.counts[1],
            camera_frames: self.counts[2],
            motion_pixels: self.counts[3],
        }
    }

    /// First term whose value is not finite.
    pub fn non_finite<T: Real>(&self, g: &Graph<T>) -> Option<&'static str> {
        [
            ("depth", self.depth),
            ("ray", self.ray),
            ("camera", self.camera),
            ("motion", self.motion),
        ]
        .into_iter()
        .find(|(_, v)| !g.value(*v).item().is_finite())
        .map(|(n, _)| n)
    }
}

/// Builds the full training loss for one normalized clip with the given
/// input images (`[N * H * W, 3]`, possibly augmented).
pub fn clip_loss<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    images: Var,
    clip: &GroundTruthBundle,
    plan: &SupervisionPlan,
    cfg: &TrainConfig,
) -> Result<LossVars> {
    let n = clip.num_frames();
    let lay: Layout = model.layout(n, clip.height(), clip.width())?;
    let times: Vec<_> = (0..n).map(|i| clip.timestamp(i)).collect();
    let latent = model.encode(g, images, &lay, &times)?;
    let all: Vec<usize> = (0..n).collect();
    let gv = model.geometry_head(g, latent, &lay, &all);
    let (depth, dc) = depth_loss(g, gv.depth, gv.depth_log_sigma, &clip.depths, cfg.depth_gradient_weight)?;
    let rays: Vec<RayMap> = clip
        .poses
        .iter()
        .map(|p| intrinsics_to_rays(&clip.intrinsics, p))
        .collect::<Result<_>>()?;
    let (ray, rc) = ray_loss(g, gv.rays, gv.ray_log_sigma, &rays)?;
    let camera = camera_loss(g, gv.fov, gv.quat, gv.trans, clip.intrinsics.vertical_fov, &clip.poses);
    let mv = model.motion_head(g, latent, &lay, plan.query, &plan.targets);
    let gt = motion_targets(clip, plan, model.config.output);
    let (motion, mc) = motion_loss(g, mv.out, mv.log_sigma, &gt, &plan.masks, cfg.motion_temporal_weight)?;
    let a = g.add(depth, ray);
    let b = g.add(camera, motion);
    let total = g.add(a, b);
    Ok(LossVars {
        depth,
        ray,
        camera,
        motion,
        total,
        counts: [dc, rc, n, mc],
    })
}

/// Decoupled-weight-decay Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Updates applied so far.
    pub t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, _, p)| Tensor::zeros(p.rows, p.cols)).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Clips `grads` to `cfg.clip_norm` and applies one update. Weight decay
    /// applies to weight matrices only. Returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64, cfg: &TrainConfig) -> f64 {
        let norm = grads
            .iter()
            .map(|g| g.data.iter().map(|x| x.to_f64().unwrap().powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let decays: Vec<bool> = params.iter().map(|(_, name, _)| name.ends_with(".w")).collect();
        let (tb1, tb2, tclip) = (T::of(b1), T::of(b2), T::of(clip));
        let (step, eps, c2s) = (T::of(lr / c1), T::of(cfg.eps), T::of(c2.sqrt()));
        let decay = T::of(1.0 - lr * cfg.weight_decay);
        for (k, p) in params.values_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k].data, &mut self.v[k].data);
            let wd = decays[k] && cfg.weight_decay > 0.0;
            for (i, x) in p.data.iter_mut().enumerate() {
                let gi = grads[k].data[i] * tclip;
                m[i] = tb1 * m[i] + (T::one() - tb1) * gi;
                v[i] = tb2 * v[i] + (T::one() - tb2) * gi * gi;
                if wd {
                    *x *= decay;
                }
                *x -= step * m[i] / (v[i].sqrt() / c2s + eps);
            }
        }
        norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
}

/// One optimization step on a normalized clip. `images` overrides the clip's
/// frames (e.g. augmented copies). Parameters are left untouched when any
/// loss term or gradient is not finite.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    clip: &GroundTruthBundle,
    images: Option<&[anytime4d_core::scenegen::RgbImage]>,
    plan: &SupervisionPlan,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepReport> {
    let mut g = Graph::new();
    let img = g.constant(images_tensor(images.unwrap_or(&clip.frames)));
    let lv = clip_loss(model, &mut g, img, clip, plan, cfg)?;
    if let Some(term) = lv.non_finite(&g) {
        return Err(Error::NonFinite(format!("{term} loss")));
    }
    let grads = g.backward(lv.total).params(&g, &model.params);
    if let Some((_, name, _)) = model.params.iter().zip(&grads).find(|(_, gr)| !gr.all_finite()).map(|(p, _)| p) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    let lr = cfg.lr_at(step);
    let grad_norm = opt.update(&mut model.params, &grads, lr, cfg);
    Ok(StepReport {
        loss: lv.breakdown(&g),
        lr,
        grad_norm,
    })
}

/// Per-step seed for clip sampling, supervision and augmentation.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    rng::child_seed(rng::child_seed(seed, streams::TRAIN_STEP), step as u64)
}

/// Saves parameters (float32), Adam moments and the step counter.
pub fn save_checkpoint(
    dir: &Path,
    model: &Model<f32>,
    opt: &AdamW<f32>,
    train: &TrainConfig,
    step: usize,
    extra: serde_json::Value,
) -> Result<()> {
    let mut a = TensorArchive::new();
    for (id, name, t) in model.params.iter() {
        let k = id.index();
        a.insert(&format!("param.{name}"), Array::f32(vec![t.rows, t.cols], t.data.clone())?)?;
        a.insert(&format!("adam_m.{name}"), Array::f32(vec![t.rows, t.cols], opt.m[k].data.clone())?)?;
        a.insert(&format!("adam_v.{name}"), Array::f32(vec![t.rows, t.cols], opt.v[k].data.clone())?)?;
    }
    a.config = json!({ "model": model.config, "train": train, "extra": extra });
    a.meta.insert("step".into(), json!(step));
    a.meta.insert("adam_t".into(), json!(opt.t));
    a.meta.insert("param_order".into(), json!(model.params.iter().map(|(_, n, _)| n).collect::<Vec<_>>()));
    a.rng_states.insert(
        "train".into(),
        json!({ "seed": train.seed, "next_step": step, "derivation": "child_seed(child_seed(seed, 7), step)" }),
    );
    a.write(dir)
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub opt: AdamW<f32>,
    pub train: TrainConfig,
    pub step: usize,
    pub extra: serde_json::Value,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let a = TensorArchive::read(dir)?;
    let cfg = a.config.as_object().ok_or_else(|| Error::Archive("checkpoint config".into()))?;
    let model_cfg: ModelConfig = serde_json::from_value(cfg.get("model").cloned().unwrap_or_default())?;
    let train: TrainConfig = serde_json::from_value(cfg.get("train").cloned().unwrap_or_default())?;
    let extra = cfg.get("extra").cloned().unwrap_or(serde_json::Value::Null);
    let order: Vec<String> = serde_json::from_value(
        a.meta.get("param_order").cloned().ok_or_else(|| Error::Archive("missing param_order".into()))?,
    )?;
    let step = a.meta.get("step").and_then(|v| v.as_u64()).ok_or_else(|| Error::Archive("missing step".into()))? as usize;
    let t = a.meta.get("adam_t").and_then(|v| v.as_u64()).unwrap_or(0);
    let load = |key: &str| -> Result<Tensor<f32>> {
        let (shape, data) = a.get_f32(key)?;
        if shape.len() != 2 {
            return Err(Error::Archive(format!("{key} must be 2-D")));
        }
        Ok(Tensor::new(shape[0], shape[1], data.to_vec()))
    };
    let mut params = ParamStore::new();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for name in &order {
        params.add(name.clone(), load(&format!("param.{name}"))?);
        m.push(load(&format!("adam_m.{name}"))?);
        v.push(load(&format!("adam_v.{name}"))?);
    }
    let model = Model::with_params(model_cfg, params)?;
    Ok(Checkpoint {
        model,
        opt: AdamW { m, v, t },
        train,
        step,
        extra,
    })
}
