//! Toy-scale 4D reconstruction network.
//!
//! Every frame becomes `M` patch tokens followed by one camera token and one
//! time token. The encoder alternates frame-wise and global self-attention
//! blocks. A geometry head decodes depth, half-resolution rays and camera
//! parameters per frame; a motion head decodes the displacement of a query
//! frame's pixels toward any target time from the cached tokens.

use std::cell::Cell;
use std::f64::consts::PI;

use anytime4d_core::geometry::{pointmap_from_rays, CameraPose, DepthMap, RayMap, Vec3};
use anytime4d_core::representation::{DisplacementField, FactorizedFrame4D, Timestamp};
use anytime4d_core::scenegen::RgbImage;
use anytime4d_core::{Error, Result};
use nalgebra::{Quaternion, UnitQuaternion};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{AttnGroup, Graph, Unary, Var};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Which motion-head component to remove, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MotionAblation {
    #[default]
    None,
    NoCrossAttn,
    NoSelfAttn,
    NoAdaln,
}

/// What the motion head's three output channels mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PointOutput {
    /// World-space displacement from the query frame's base geometry.
    #[default]
    Displacement,
    /// World-space position at the target time.
    PointsWorld,
    /// Position at the target time in the query camera's frame.
    PointsLocal,
}

/// Attention pattern of the global encoder layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GlobalAttention {
    #[default]
    Full,
    /// Each frame attends to itself and earlier frames only.
    Causal,
    /// Global layers are skipped; frames are encoded independently.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Even; layers alternate frame-wise (first) and global.
    pub encoder_layers: usize,
    pub heads: usize,
    pub motion_layers: usize,
    pub mlp_ratio: f64,
    pub ablation: MotionAblation,
    pub output: PointOutput,
    /// Causal global attention for the streaming variant.
    pub causal: bool,
    /// Standard deviation of the normal weight initialization.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 128,
            encoder_layers: 6,
            heads: 4,
            motion_layers: 4,
            mlp_ratio: 4.0,
            ablation: MotionAblation::None,
            output: PointOutput::Displacement,
            causal: false,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.patch_size < 2 || self.patch_size % 2 != 0 {
            return bad("patch_size must be even and at least 2");
        }
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return bad("embed_dim must be a positive multiple of 4");
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be divisible by heads");
        }
        if self.encoder_layers == 0 || self.encoder_layers % 2 != 0 {
            return bad("encoder_layers must be even and positive");
        }
        if self.motion_layers == 0 {
            return bad("motion_layers must be positive");
        }
        if !(self.mlp_ratio > 0.0) {
            return bad("mlp_ratio must be positive");
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive");
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    pub fn global_attention(&self) -> GlobalAttention {
        if self.causal {
            GlobalAttention::Causal
        } else {
            GlobalAttention::Full
        }
    }

    /// Layer `l` (0-based) attends globally when odd.
    pub fn is_global_layer(l: usize) -> bool {
        l % 2 == 1
    }
}

/// Token bookkeeping for an encoded clip of `n` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Layout {
    pub fn new(n: usize, height: usize, width: usize, patch: usize) -> Result<Self> {
        if height % patch != 0 || width % patch != 0 || height == 0 || width == 0 {
            return Err(Error::InvalidSpec(format!(
                "image {height}x{width} not divisible by patch size {patch}"
            )));
        }
        Ok(Self {
            n,
            height,
            width,
            patch,
            grid_h: height / patch,
            grid_w: width / patch,
        })
    }

    /// Patch tokens per frame.
    pub fn m(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Tokens per frame.
    pub fn s(&self) -> usize {
        self.m() + 2
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn half_pixels(&self) -> usize {
        self.pixels() / 4
    }

    pub fn patch_rows(&self, f: usize) -> std::ops::Range<usize> {
        f * self.s()..f * self.s() + self.m()
    }

    pub fn camera_row(&self, f: usize) -> usize {
        f * self.s() + self.m()
    }

    pub fn time_row(&self, f: usize) -> usize {
        f * self.s() + self.m() + 1
    }

    /// Gather indices mapping per-patch blocks of `b x b` cells with `ch`
    /// channels (`[rows, b*b*ch]`, `b = patch / down`) to per-cell rows
    /// (`[frames * (H/down) * (W/down), ch]`) in raster order.
    pub fn unpatch_index(&self, frames: usize, down: usize, ch: usize) -> Vec<usize> {
        let b = self.patch / down;
        let (h, w) = (self.height / down, self.width / down);
        let cols = b * b * ch;
        let mut idx = Vec::with_capacity(frames * h * w * ch);
        for f in 0..frames {
            for y in 0..h {
                for x in 0..w {
                    let row = f * self.m() + (y / b) * self.grid_w + x / b;
                    let cell = (y % b) * b + x % b;
                    for c in 0..ch {
                        idx.push(row * cols + cell * ch + c);
                    }
                }
            }
        }
        idx
    }

    /// Gather indices turning `[frames * H * W, 3]` pixels into
    /// `[frames * M, patch * patch * 3]` patches.
    pub fn patchify_index(&self, frames: usize) -> Vec<usize> {
        let p = self.patch;
        let mut idx = Vec::with_capacity(frames * self.pixels() * 3);
        for f in 0..frames {
            for gy in 0..self.grid_h {
                for gx in 0..self.grid_w {
                    for py in 0..p {
                        for px in 0..p {
                            let pix = f * self.pixels() + (gy * p + py) * self.width + gx * p + px;
                            for c in 0..3 {
                                idx.push(pix * 3 + c);
                            }
                        }
                    }
                }
            }
        }
        idx
    }
}

/// Sinusoidal 2-D positional encoding: the first half of the channels
/// encodes the patch row, the second half the column.
pub fn patch_positional_encoding(grid_h: usize, grid_w: usize, dim: usize) -> Vec<f64> {
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(grid_h * grid_w * dim);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            for pos in [gy as f64, gx as f64] {
                for j in 0..quarter {
                    let w = 1.0 / 10000f64.powf(j as f64 / quarter as f64);
                    out.push((pos * w).sin());
                    out.push((pos * w).cos());
                }
            }
        }
    }
    out
}

/// Sinusoidal encoding of a normalized time in `[0, 1]` with frequencies
/// spaced geometrically from `pi` to `256 pi`.
pub fn time_encoding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let e = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
        let f = PI * 256f64.powf(e);
        out.push((f * t).sin());
        out.push((f * t).cos());
    }
    out
}

/// Image stack `[frames * H * W, 3]`.
pub fn images_tensor<T: Real>(frames: &[RgbImage]) -> Tensor<T> {
    let n: usize = frames.iter().map(|f| f.width * f.height).sum();
    Tensor::new(n, 3, frames.iter().flat_map(|f| f.data.iter().map(|x| T::of(*x as f64))).collect())
}

/// Graph handles for per-frame geometry outputs.
#[derive(Debug, Clone, Copy)]
pub struct GeometryVars {
    /// `[frames * H * W, 1]`, positive.
    pub depth: Var,
    pub depth_log_sigma: Var,
    /// `[frames * H/2 * W/2, 6]`: origin then direction.
    pub rays: Var,
    pub ray_log_sigma: Var,
    /// `[frames, 1]` in `(0, pi)`.
    pub fov: Var,
    /// `[frames, 4]` unit `(w, x, y, z)`.
    pub quat: Var,
    /// `[frames, 3]`.
    pub trans: Var,
}

/// Graph handles for one query frame toward several targets.
#[derive(Debug, Clone, Copy)]
pub struct MotionVars {
    /// `[targets * H * W, 3]` in the configured parameterization.
    pub out: Var,
    /// `[targets * H * W, 1]`.
    pub log_sigma: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryPrediction {
    pub depth: DepthMap,
    pub depth_log_sigma: Vec<f64>,
    pub rays: RayMap,
    pub ray_log_sigma: Vec<f64>,
    pub vertical_fov: f64,
    pub pose: CameraPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionPrediction {
    pub deltas: DisplacementField,
    pub motion_log_sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward4D {
    pub geometry: Vec<GeometryPrediction>,
    pub frame: FactorizedFrame4D,
    pub motion: Vec<MotionPrediction>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    encoder_calls: Cell<usize>,
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let p = config.patch_size;
        let hid = config.hidden_dim();
        let std = config.init_std;
        let mut ps = ParamStore::new();
        let linear = |ps: &mut ParamStore<T>, name: &str, i: usize, o: usize, rng: &mut R| {
            ps.normal(format!("{name}.w"), i, o, std, rng);
            ps.zeros(format!("{name}.b"), 1, o);
        };
        let norm = |ps: &mut ParamStore<T>, name: &str| {
            ps.ones(format!("{name}.g"), 1, d);
            ps.zeros(format!("{name}.b"), 1, d);
        };

        linear(&mut ps, "embed", p * p * 3, d, rng);
        ps.normal("camera_token", 1, d, std, rng);
        ps.normal("time_token", 1, d, std, rng);
        for l in 0..config.encoder_layers {
            let n = format!("enc.{l}");
            norm(&mut ps, &format!("{n}.ln1"));
            linear(&mut ps, &format!("{n}.qkv"), d, 3 * d, rng);
            linear(&mut ps, &format!("{n}.proj"), d, d, rng);
            norm(&mut ps, &format!("{n}.ln2"));
            linear(&mut ps, &format!("{n}.fc1"), d, hid, rng);
            linear(&mut ps, &format!("{n}.fc2"), hid, d, rng);
        }
        norm(&mut ps, "enc.ln");

        linear(&mut ps, "geo.depth.fc1", d, d, rng);
        linear(&mut ps, "geo.depth.fc2", d, p * p * 2, rng);
        linear(&mut ps, "geo.ray.fc1", d, d, rng);
        linear(&mut ps, "geo.ray.fc2", d, (p / 2) * (p / 2) * 7, rng);
        linear(&mut ps, "geo.cam.fc1", d, d, rng);
        linear(&mut ps, "geo.cam.fc2", d, 8, rng);

        let ab = config.ablation;
        for k in 0..config.motion_layers {
            let n = format!("mot.{k}");
            if ab != MotionAblation::NoAdaln {
                // Zero init: shift = scale = gate = 0 at the start.
                ps.zeros(format!("{n}.ada.w"), d, 3 * d);
                ps.zeros(format!("{n}.ada.b"), 1, 3 * d);
            }
            if ab != MotionAblation::NoSelfAttn {
                norm(&mut ps, &format!("{n}.ln1"));
                linear(&mut ps, &format!("{n}.qkv"), d, 3 * d, rng);
                linear(&mut ps, &format!("{n}.proj"), d, d, rng);
            }
            if ab != MotionAblation::NoCrossAttn {
                norm(&mut ps, &format!("{n}.lnc"));
                linear(&mut ps, &format!("{n}.q"), d, d, rng);
                linear(&mut ps, &format!("{n}.kv"), d, 2 * d, rng);
                linear(&mut ps, &format!("{n}.cproj"), d, d, rng);
            }
            norm(&mut ps, &format!("{n}.ln2"));
            linear(&mut ps, &format!("{n}.fc1"), d, hid, rng);
            linear(&mut ps, &format!("{n}.fc2"), hid, d, rng);
        }
        norm(&mut ps, "mot.ln");
        linear(&mut ps, "mot.head", d, p * p * 4, rng);

        Ok(Self {
            config,
            params: ps,
            encoder_calls: Cell::new(0),
        })
    }

    /// Same architecture with parameters taken from `params`.
    pub fn with_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let reference = Model::<T>::new(config.clone(), &mut anytime4d_core::rng::stream(0, 0))?;
        for (_, name, t) in reference.params.iter() {
            let id = params
                .id(name)
                .ok_or_else(|| Error::InvalidSpec(format!("missing parameter {name}")))?;
            if params.get(id).shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name} {:?}", t.shape()),
                    actual: format!("{:?}", params.get(id).shape()),
                });
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::InvalidSpec("unexpected extra parameters".into()));
        }
        Ok(Self {
            config,
            params,
            encoder_calls: Cell::new(0),
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder_calls: Cell::new(0),
        }
    }

    /// Number of encoder passes run so far.
    pub fn encoder_calls(&self) -> usize {
        self.encoder_calls.get()
    }

    pub fn p(&self, g: &mut Graph<T>, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        g.param(&self.params, id)
    }

    fn lin(&self, g: &mut Graph<T>, x: Var, name: &str) -> Var {
        let w = self.p(g, &format!("{name}.w"));
        let b = self.p(g, &format!("{name}.b"));
        g.linear(x, w, Some(b))
    }

    fn ln(&self, g: &mut Graph<T>, x: Var, name: &str) -> Var {
        let gm = self.p(g, &format!("{name}.g"));
        let b = self.p(g, &format!("{name}.b"));
        g.layer_norm(x, Some(gm), Some(b))
    }

    fn mlp(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Var {
        let h = self.lin(g, x, &format!("{prefix}.fc1"));
        let h = g.gelu(h);
        self.lin(g, h, &format!("{prefix}.fc2"))
    }

    pub fn layout(&self, n: usize, height: usize, width: usize) -> Result<Layout> {
        Layout::new(n, height, width, self.config.patch_size)
    }

    /// Patch, camera and time tokens for `images` (`[n * H * W, 3]`), laid
    /// out per frame as `[patches, camera, time]`.
    pub fn embed(&self, g: &mut Graph<T>, images: Var, lay: &Layout, times: &[Timestamp]) -> Result<Var> {
        let n = lay.n;
        if times.len() != n {
            return Err(Error::LengthMismatch(times.len(), n));
        }
        if g.shape(images) != (n * lay.pixels(), 3) {
            return Err(Error::ShapeMismatch {
                expected: format!("[{}, 3]", n * lay.pixels()),
                actual: format!("{:?}", g.shape(images)),
            });
        }
        let d = self.config.embed_dim;
        let p = self.config.patch_size;
        let m = lay.m();
        let patches = g.gather(images, lay.patchify_index(n), n * m, p * p * 3);
        let emb = self.lin(g, patches, "embed");
        let pe = patch_positional_encoding(lay.grid_h, lay.grid_w, d);
        let pos: Vec<f64> = (0..n).flat_map(|_| pe.iter().copied()).collect();
        let pos = g.constant(Tensor::from_f64(n * m, d, &pos));
        let emb = g.add(emb, pos);

        let cam = self.p(g, "camera_token");
        let cam = g.gather_rows(cam, vec![0; n]);
        let tbase = self.p(g, "time_token");
        let tbase = g.gather_rows(tbase, vec![0; n]);
        let tenc: Vec<f64> = times.iter().flat_map(|t| time_encoding(t.normalized_time(), d)).collect();
        let tenc = g.constant(Tensor::from_f64(n, d, &tenc));
        let time = g.add(tbase, tenc);

        let all = g.concat_rows(&[emb, cam, time]);
        let mut order = Vec::with_capacity(n * lay.s());
        for f in 0..n {
            order.extend(f * m..(f + 1) * m);
            order.push(n * m + f);
            order.push(n * m + n + f);
        }
        Ok(g.gather_rows(all, order))
    }

    /// One pre-norm encoder block. `kv_prefix` holds cached keys/values that
    /// are prepended to this block's own; `groups` index into the combined
    /// key rows. Returns the output and this block's new keys and values.
    pub fn encoder_block(
        &self,
        g: &mut Graph<T>,
        l: usize,
        x: Var,
        groups: Vec<AttnGroup>,
        kv_prefix: Option<(Var, Var)>,
    ) -> (Var, Var, Var) {
        let d = self.config.embed_dim;
        let n = format!("enc.{l}");
        let h = self.ln(g, x, &format!("{n}.ln1"));
        let qkv = self.lin(g, h, &format!("{n}.qkv"));
        let q = g.slice_cols(qkv, 0, d);
        let k = g.slice_cols(qkv, d, d);
        let v = g.slice_cols(qkv, 2 * d, d);
        let (ka, va) = match kv_prefix {
            Some((pk, pv)) => (g.concat_rows(&[pk, k]), g.concat_rows(&[pv, v])),
            None => (k, v),
        };
        let a = g.attention(q, ka, va, self.config.heads, groups);
        let a = self.lin(g, a, &format!("{n}.proj"));
        let x = g.add(x, a);
        let h = self.ln(g, x, &format!("{n}.ln2"));
        let m = self.mlp(g, h, &n);
        (g.add(x, m), k, v)
    }

    /// Runs the encoder over embedded tokens.
    pub fn encode_tokens(&self, g: &mut Graph<T>, tokens: Var, lay: &Layout, global: GlobalAttention) -> Var {
        self.encoder_calls.set(self.encoder_calls.get() + 1);
        let s = lay.s();
        let n = lay.n;
        let framewise: Vec<AttnGroup> = (0..n)
            .map(|f| AttnGroup {
                q: f * s..(f + 1) * s,
                kv: f * s..(f + 1) * s,
            })
            .collect();
        let global_groups = match global {
            GlobalAttention::Full => vec![AttnGroup { q: 0..n * s, kv: 0..n * s }],
            GlobalAttention::Causal => (0..n)
                .map(|f| AttnGroup {
                    q: f * s..(f + 1) * s,
                    kv: 0..(f + 1) * s,
                })
                .collect(),
            GlobalAttention::Disabled => Vec::new(),
        };
        let mut x = tokens;
        for l in 0..self.config.encoder_layers {
            if ModelConfig::is_global_layer(l) {
                if global == GlobalAttention::Disabled {
                    continue;
                }
                x = self.encoder_block(g, l, x, global_groups.clone(), None).0;
            } else {
                x = self.encoder_block(g, l, x, framewise.clone(), None).0;
            }
        }
        self.ln(g, x, "enc.ln")
    }

    pub fn encode(&self, g: &mut Graph<T>, images: Var, lay: &Layout, times: &[Timestamp]) -> Result<Var> {
        if lay.n < 2 && !self.config.causal {
            return Err(Error::InvalidSpec("encoding needs at least 2 frames".into()));
        }
        let tokens = self.embed(g, images, lay, times)?;
        Ok(self.encode_tokens(g, tokens, lay, self.config.global_attention()))
    }

    /// Geometry for `frames` (indices into the encoded clip), batched.
    pub fn geometry_head(&self, g: &mut Graph<T>, latent: Var, lay: &Layout, frames: &[usize]) -> GeometryVars {
        let m = lay.m();
        let f = frames.len();
        let rows: Vec<usize> = frames.iter().flat_map(|&i| lay.patch_rows(i)).collect();
        let z = g.gather_rows(latent, rows);

        let dh = self.mlp(g, z, "geo.depth");
        let px = g.gather(dh, lay.unpatch_index(f, 1, 2), f * lay.pixels(), 2);
        let raw = g.slice_cols(px, 0, 1);
        let depth = g.exp(raw);
        let depth_log_sigma = g.slice_cols(px, 1, 1);

        let rh = self.mlp(g, z, "geo.ray");
        let rp = g.gather(rh, lay.unpatch_index(f, 2, 7), f * lay.half_pixels(), 7);
        let rays = g.slice_cols(rp, 0, 6);
        let ray_log_sigma = g.slice_cols(rp, 6, 1);

        let cam_rows: Vec<usize> = frames.iter().map(|&i| lay.camera_row(i)).collect();
        let c = g.gather_rows(latent, cam_rows);
        let co = self.mlp(g, c, "geo.cam");
        let fraw = g.slice_cols(co, 0, 1);
        let sp = g.unary(fraw, Unary::Softplus);
        let ratio = g.unary(sp, Unary::Ratio);
        let fov = g.scale(ratio, T::of(PI));
        let qraw = g.slice_cols(co, 1, 4);
        let quat = g.normalize_rows(qraw);
        let trans = g.slice_cols(co, 5, 3);
        let _ = m;
        GeometryVars {
            depth,
            depth_log_sigma,
            rays,
            ray_log_sigma,
            fov,
            quat,
            trans,
        }
    }

    fn modulate(&self, g: &mut Graph<T>, h: Var, shift: Var, scale: Var) -> Var {
        let one_plus = g.add_scalar(scale, T::one());
        let h = g.mul(h, one_plus);
        g.add(h, shift)
    }

    /// Motion of query frame `q` toward each of `targets`, batched over
    /// targets.
    pub fn motion_head(&self, g: &mut Graph<T>, latent: Var, lay: &Layout, q: usize, targets: &[usize]) -> MotionVars {
        let d = self.config.embed_dim;
        let m = lay.m();
        let t = targets.len();
        let ab = self.config.ablation;
        let groups: Vec<AttnGroup> = (0..t)
            .map(|i| AttnGroup {
                q: i * m..(i + 1) * m,
                kv: i * m..(i + 1) * m,
            })
            .collect();
        let qrows: Vec<usize> = (0..t).flat_map(|_| lay.patch_rows(q)).collect();
        let mut x = g.gather_rows(latent, qrows);
        let trows: Vec<usize> = targets.iter().flat_map(|&tau| lay.patch_rows(tau)).collect();
        let ztau = g.gather_rows(latent, trows);
        let time_rows: Vec<usize> = targets.iter().map(|&tau| lay.time_row(tau)).collect();
        let ttau = g.gather_rows(latent, time_rows);
        let tsilu = g.silu(ttau);
        let expand: Vec<usize> = (0..t).flat_map(|i| std::iter::repeat(i).take(m)).collect();

        for k in 0..self.config.motion_layers {
            let n = format!("mot.{k}");
            let ada = if ab != MotionAblation::NoAdaln {
                let mo = self.lin(g, tsilu, &format!("{n}.ada"));
                let mo = g.gather_rows(mo, expand.clone());
                Some((g.slice_cols(mo, 0, d), g.slice_cols(mo, d, d), g.slice_cols(mo, 2 * d, d)))
            } else {
                None
            };
            // The time modulation goes on the first attention sublayer
            // present: self-attention, or cross-attention when self-attention
            // is ablated.
            if ab != MotionAblation::NoSelfAttn {
                let h = match ada {
                    Some((shift, scale, _)) => {
                        let h = g.layer_norm(x, None, None);
                        self.modulate(g, h, shift, scale)
                    }
                    None => self.ln(g, x, &format!("{n}.ln1")),
                };
                let qkv = self.lin(g, h, &format!("{n}.qkv"));
                let qq = g.slice_cols(qkv, 0, d);
                let kk = g.slice_cols(qkv, d, d);
                let vv = g.slice_cols(qkv, 2 * d, d);
                let a = g.attention(qq, kk, vv, self.config.heads, groups.clone());
                let mut a = self.lin(g, a, &format!("{n}.proj"));
                if let Some((_, _, gate)) = ada {
                    a = g.mul(a, gate);
                }
                x = g.add(x, a);
            }
            if ab != MotionAblation::NoCrossAttn {
                let modulated = ab == MotionAblation::NoSelfAttn;
                let h = match (ada, modulated) {
                    (Some((shift, scale, _)), true) => {
                        let h = g.layer_norm(x, None, None);
                        self.modulate(g, h, shift, scale)
                    }
                    _ => self.ln(g, x, &format!("{n}.lnc")),
                };
                let qq = self.lin(g, h, &format!("{n}.q"));
                let kv = self.lin(g, ztau, &format!("{n}.kv"));
                let kk = g.slice_cols(kv, 0, d);
                let vv = g.slice_cols(kv, d, d);
                let a = g.attention(qq, kk, vv, self.config.heads, groups.clone());
                let mut a = self.lin(g, a, &format!("{n}.cproj"));
                if let (Some((_, _, gate)), true) = (ada, modulated) {
                    a = g.mul(a, gate);
                }
                x = g.add(x, a);
            }
            let h = self.ln(g, x, &format!("{n}.ln2"));
            let mm = self.mlp(g, h, &n);
            x = g.add(x, mm);
        }
        let h = self.ln(g, x, "mot.ln");
        let o = self.lin(g, h, "mot.head");
        let px = g.gather(o, lay.unpatch_index(t, 1, 4), t * lay.pixels(), 4);
        MotionVars {
            out: g.slice_cols(px, 0, 3),
            log_sigma: g.slice_cols(px, 3, 1),
        }
    }

    /// Encodes once, decodes geometry for every frame and motion for the
    /// query toward each target.
    pub fn forward_4d(&self, frames: &[RgbImage], times: &[Timestamp], q: usize, targets: &[usize]) -> Result<Forward4D> {
        let n = frames.len();
        if n == 0 {
            return Err(Error::InvalidSpec("no frames".into()));
        }
        let (w, h) = (frames[0].width, frames[0].height);
        if frames.iter().any(|f| f.width != w || f.height != h) {
            return Err(Error::InvalidSpec("frames differ in size".into()));
        }
        if q >= n {
            return Err(Error::IndexOutOfRange { index: q, len: n });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        let lay = self.layout(n, h, w)?;
        let mut g = Graph::new();
        let images = g.constant(images_tensor(frames));
        let latent = self.encode(&mut g, images, &lay, times)?;
        let all: Vec<usize> = (0..n).collect();
        let gv = self.geometry_head(&mut g, latent, &lay, &all);
        let geometry = geometry_predictions(&g, &gv, &lay, n)?;
        let mut sorted = targets.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mv = self.motion_head(&mut g, latent, &lay, q, &sorted);
        let (frame, motion) = assemble_motion(&g, &mv, &lay, &self.config, &geometry[q], times, q, &sorted)?;
        Ok(Forward4D { geometry, frame, motion })
    }
}

fn col(t: &Tensor<impl Real>, c: usize) -> Vec<f64> {
    (0..t.rows).map(|r| t.get(r, c).to_f64().unwrap()).collect()
}

/// Converts geometry outputs for `n` frames to plain predictions.
pub fn geometry_predictions<T: Real>(g: &Graph<T>, gv: &GeometryVars, lay: &Layout, n: usize) -> Result<Vec<GeometryPrediction>> {
    let (hw, hhw) = (lay.pixels(), lay.half_pixels());
    let depth = g.value(gv.depth).to_f64();
    let dls = g.value(gv.depth_log_sigma).to_f64();
    let rays = g.value(gv.rays).to_f64();
    let rls = g.value(gv.ray_log_sigma).to_f64();
    let fov = col(g.value(gv.fov), 0);
    let quat = g.value(gv.quat).to_f64();
    let trans = g.value(gv.trans).to_f64();
    (0..n)
        .map(|f| {
            let q = &quat[f * 4..f * 4 + 4];
            let rotation = UnitQuaternion::new_normalize(Quaternion::new(q[0], q[1], q[2], q[3]));
            Ok(GeometryPrediction {
                depth: DepthMap::new(lay.width, lay.height, depth[f * hw..(f + 1) * hw].to_vec(), vec![true; hw])?,
                depth_log_sigma: dls[f * hw..(f + 1) * hw].to_vec(),
                rays: RayMap::from_channels(lay.width / 2, lay.height / 2, &rays[f * hhw * 6..(f + 1) * hhw * 6])?,
                ray_log_sigma: rls[f * hhw..(f + 1) * hhw].to_vec(),
                vertical_fov: fov[f],
                pose: CameraPose::new(rotation, Vec3::new(trans[f * 3], trans[f * 3 + 1], trans[f * 3 + 2])),
            })
        })
        .collect()
}

/// Base pointmap of a frame from its predicted depth and rays.
pub fn predicted_base(geo: &GeometryPrediction) -> Result<anytime4d_core::geometry::PointMap> {
    pointmap_from_rays(&geo.depth, &geo.rays)
}

/// Turns raw motion outputs into displacement fields and the query frame's
/// factorized representation.
#[allow(clippy::too_many_arguments)]
pub fn assemble_motion<T: Real>(
    g: &Graph<T>,
    mv: &MotionVars,
    lay: &Layout,
    cfg: &ModelConfig,
    query_geo: &GeometryPrediction,
    times: &[Timestamp],
    q: usize,
    targets: &[usize],
) -> Result<(FactorizedFrame4D, Vec<MotionPrediction>)> {
    let hw = lay.pixels();
    let out = g.value(mv.out).to_f64();
    let ls = g.value(mv.log_sigma).to_f64();
    let base = predicted_base(query_geo)?;
    let mut frame = FactorizedFrame4D::new(times[q], base.clone());
    let mut preds = Vec::with_capacity(targets.len());
    for (k, &tau) in targets.iter().enumerate() {
        let raw = &out[k * hw * 3..(k + 1) * hw * 3];
        let deltas: Vec<Vec3> = raw
            .chunks_exact(3)
            .enumerate()
            .map(|(i, c)| {
                let v = Vec3::new(c[0], c[1], c[2]);
                match cfg.output {
                    PointOutput::Displacement => v,
                    PointOutput::PointsWorld => v - base.points[i],
                    PointOutput::PointsLocal => query_geo.pose.camera_to_world(&v) - base.points[i],
                }
            })
            .collect();
        let field = DisplacementField {
            width: lay.width,
            height: lay.height,
            deltas,
            valid: vec![true; hw],
            source: times[q],
            target: times[tau],
        };
        frame.insert(field.clone())?;
        preds.push(MotionPrediction {
            deltas: field,
            motion_log_sigma: ls[k * hw..(k + 1) * hw].to_vec(),
        });
    }
    Ok((frame, preds))
}
