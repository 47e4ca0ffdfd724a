//! Causal frame-by-frame encoding with a latent cache.
//!
//! Global layers keep the keys and values of every ingested frame; a new
//! frame attends to them plus its own tokens. Nothing already in the cache is
//! recomputed, so earlier entries never change.

use anytime4d_core::archive::{Array, TensorArchive};
use anytime4d_core::representation::Timestamp;
use anytime4d_core::scenegen::RgbImage;
use anytime4d_core::{Error, Result};
use serde_json::json;

use crate::graph::{AttnGroup, Graph};
use crate::model::{
    assemble_motion, geometry_predictions, images_tensor, GeometryPrediction, Layout, Model, ModelConfig,
    MotionPrediction,
};
use crate::tensor::{Real, Tensor};

/// Final tokens of one ingested frame, `[M + 2, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedFrame<T> {
    pub timestamp: Timestamp,
    pub tokens: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCache<T> {
    pub config: ModelConfig,
    pub width: usize,
    pub height: usize,
    frames: Vec<CachedFrame<T>>,
    /// Keys and values per encoder layer; empty for frame-wise layers.
    kv: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> LatentCache<T> {
    pub fn new(config: &ModelConfig, width: usize, height: usize) -> Result<Self> {
        Layout::new(1, height, width, config.patch_size)?;
        let d = config.embed_dim;
        Ok(Self {
            config: config.clone(),
            width,
            height,
            frames: Vec::new(),
            kv: (0..config.encoder_layers)
                .map(|_| (Tensor::zeros(0, d), Tensor::zeros(0, d)))
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[CachedFrame<T>] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> Result<&CachedFrame<T>> {
        self.frames.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: self.frames.len(),
        })
    }

    fn single_layout(&self) -> Layout {
        Layout::new(1, self.height, self.width, self.config.patch_size).expect("checked at construction")
    }

    fn check_model(&self, model: &Model<T>) -> Result<()> {
        if model.config.patch_size != self.config.patch_size
            || model.config.embed_dim != self.config.embed_dim
            || model.config.encoder_layers != self.config.encoder_layers
        {
            return Err(Error::InvalidSpec("model does not match the cache configuration".into()));
        }
        Ok(())
    }

    /// Encodes `frame` against the cached past and appends its tokens.
    pub fn ingest_frame(&mut self, model: &Model<T>, frame: &RgbImage, timestamp: Timestamp) -> Result<()> {
        self.check_model(model)?;
        if frame.width != self.width || frame.height != self.height {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.height, self.width),
                actual: format!("{}x{}", frame.height, frame.width),
            });
        }
        if let Some(last) = self.frames.last() {
            if timestamp.frame_index <= last.timestamp.frame_index || timestamp.num_frames != last.timestamp.num_frames {
                return Err(Error::NonMonotoneTimestamp {
                    previous: last.timestamp.frame_index,
                    got: timestamp.frame_index,
                });
            }
        }
        let lay = self.single_layout();
        let s = lay.s();
        let past = self.frames.len() * s;
        let mut g = Graph::new();
        let img = g.constant(images_tensor(std::slice::from_ref(frame)));
        let mut x = model.embed(&mut g, img, &lay, &[timestamp])?;
        let mut fresh = Vec::new();
        for l in 0..model.config.encoder_layers {
            if ModelConfig::is_global_layer(l) {
                let prefix = (past > 0).then(|| {
                    let (k, v) = &self.kv[l];
                    (g.constant(k.clone()), g.constant(v.clone()))
                });
                let groups = vec![AttnGroup { q: 0..s, kv: 0..past + s }];
                let (y, k, v) = model.encoder_block(&mut g, l, x, groups, prefix);
                fresh.push((l, k, v));
                x = y;
            } else {
                let groups = vec![AttnGroup { q: 0..s, kv: 0..s }];
                x = model.encoder_block(&mut g, l, x, groups, None).0;
            }
        }
        let gm = model.p(&mut g, "enc.ln.g");
        let b = model.p(&mut g, "enc.ln.b");
        let z = g.layer_norm(x, Some(gm), Some(b));
        let tokens = g.value(z).clone();
        if !tokens.all_finite() {
            return Err(Error::NonFinite("streaming tokens".into()));
        }
        for (l, k, v) in fresh {
            append_rows(&mut self.kv[l].0, g.value(k));
            append_rows(&mut self.kv[l].1, g.value(v));
        }
        self.frames.push(CachedFrame { timestamp, tokens });
        Ok(())
    }

    /// Latent of the listed cached frames, stacked in order.
    fn stacked(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let d = self.config.embed_dim;
        let mut data = Vec::new();
        for &i in idx {
            data.extend_from_slice(&self.frame(i)?.tokens.data);
        }
        Ok(Tensor::new(data.len() / d, d, data))
    }

    /// Geometry of cached frame `i`.
    pub fn geometry(&self, model: &Model<T>, i: usize) -> Result<GeometryPrediction> {
        self.check_model(model)?;
        let lay = self.single_layout();
        let mut g = Graph::new();
        let z = g.constant(self.stacked(&[i])?);
        let gv = model.geometry_head(&mut g, z, &lay, &[0]);
        Ok(geometry_predictions(&g, &gv, &lay, 1)?.remove(0))
    }

    /// Motion of cached frame `i` toward the time of cached frame `j`, decoded
    /// from the cached tokens alone.
    pub fn query_streaming(&self, model: &Model<T>, i: usize, j: usize) -> Result<MotionPrediction> {
        self.check_model(model)?;
        self.frame(i)?;
        self.frame(j)?;
        let idx: Vec<usize> = if i == j { vec![i] } else { vec![i, j] };
        let lay = Layout::new(idx.len(), self.height, self.width, self.config.patch_size)?;
        let mut g = Graph::new();
        let z = g.constant(self.stacked(&idx)?);
        let gv = model.geometry_head(&mut g, z, &lay, &[0]);
        let geo = geometry_predictions(&g, &gv, &lay, 1)?.remove(0);
        let target = idx.len() - 1;
        let mv = model.motion_head(&mut g, z, &lay, 0, &[target]);
        let times: Vec<Timestamp> = idx.iter().map(|&k| self.frames[k].timestamp).collect();
        let (_, mut preds) = assemble_motion(&g, &mv, &lay, &model.config, &geo, &times, 0, &[target])?;
        Ok(preds.remove(0))
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let d = self.config.embed_dim;
        let s = self.single_layout().s();
        let f = self.frames.len();
        let mut a = TensorArchive::new();
        let tokens: Vec<f64> = self.frames.iter().flat_map(|c| c.tokens.to_f64()).collect();
        a.insert("tokens", Array::f64(vec![f, s, d], tokens)?)?;
        let idx: Vec<i32> = self.frames.iter().map(|c| c.timestamp.frame_index as i32).collect();
        a.insert("frame_index", Array::i32(vec![f], idx)?)?;
        for (l, (k, v)) in self.kv.iter().enumerate() {
            if ModelConfig::is_global_layer(l) {
                a.insert(&format!("kv.{l}.k"), Array::f64(vec![k.rows, d], k.to_f64())?)?;
                a.insert(&format!("kv.{l}.v"), Array::f64(vec![v.rows, d], v.to_f64())?)?;
            }
        }
        a.config = serde_json::to_value(&self.config)?;
        a.meta.insert("width".into(), json!(self.width));
        a.meta.insert("height".into(), json!(self.height));
        let n = self.frames.first().map(|c| c.timestamp.num_frames).unwrap_or(0);
        a.meta.insert("num_frames".into(), json!(n));
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(a.config.clone())?;
        config.validate()?;
        let meta = |k: &str| {
            a.meta
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Archive(format!("missing meta {k}")))
        };
        let mut cache = Self::new(&config, meta("width")?, meta("height")?)?;
        let n = meta("num_frames")?;
        let d = config.embed_dim;
        let s = cache.single_layout().s();
        let (shape, tokens) = a.get_f64("tokens")?;
        let (_, idx) = a.get_i32("frame_index")?;
        let f = idx.len();
        if shape != [f, s, d] {
            return Err(Error::Archive(format!("tokens shape {shape:?}")));
        }
        for (k, &fi) in idx.iter().enumerate() {
            if fi < 0 || fi as usize >= n {
                return Err(Error::Archive(format!("frame index {fi}")));
            }
            cache.frames.push(CachedFrame {
                timestamp: Timestamp::new(fi as usize, n),
                tokens: Tensor::from_f64(s, d, &tokens[k * s * d..(k + 1) * s * d]),
            });
        }
        for l in 0..config.encoder_layers {
            if ModelConfig::is_global_layer(l) {
                let load = |name: &str| -> Result<Tensor<T>> {
                    let (shape, v) = a.get_f64(name)?;
                    if shape != [f * s, d] {
                        return Err(Error::Archive(format!("{name} shape {shape:?}")));
                    }
                    Ok(Tensor::from_f64(f * s, d, v))
                };
                cache.kv[l] = (load(&format!("kv.{l}.k"))?, load(&format!("kv.{l}.v"))?);
            }
        }
        Ok(cache)
    }
}

fn append_rows<T: Real>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    assert_eq!(dst.cols, src.cols);
    dst.data.extend_from_slice(&src.data);
    dst.rows += src.rows;
}
