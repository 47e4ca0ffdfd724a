//! Prediction archives written by `query` and read by `metrics`.
//!
//! Arrays (all `f64` unless noted):
//!
//! | name              | shape           |
//! |-------------------|-----------------|
//! | `depth`           | `[N, H, W]`     |
//! | `depth_log_sigma` | `[N, H, W]`     |
//! | `rays`            | `[N, H/2, W/2, 6]` |
//! | `ray_log_sigma`   | `[N, H/2, W/2]` |
//! | `fov`             | `[N]`           |
//! | `poses`           | `[N, 7]` (w, x, y, z, tx, ty, tz) |
//! | `base`            | `[H, W, 3]`     |
//! | `base_valid`      | `[H, W]` bool   |
//! | `displacement`    | `[T, H, W, 3]`  |
//! | `motion_log_sigma`| `[T, H, W]`     |
//! | `targets`         | `[T]` i32       |
//! | `source`          | `[1]` i32       |
//!
//! `meta.kind` is `"prediction"`.

use anytime4d_core::archive::{pose_from_array, pose_to_array, Array, TensorArchive};
use anytime4d_core::geometry::{intrinsics_to_rays, CameraPose, DepthMap, PointMap, RayMap, Vec3};
use anytime4d_core::representation::{DisplacementField, FactorizedFrame4D, Timestamp};
use anytime4d_core::scenegen::GroundTruthBundle;
use anytime4d_nn::model::{GeometryPrediction, MotionPrediction};
use serde_json::json;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub depths: Vec<DepthMap>,
    pub depth_log_sigma: Vec<Vec<f64>>,
    pub rays: Vec<RayMap>,
    pub ray_log_sigma: Vec<Vec<f64>>,
    pub fov: Vec<f64>,
    pub poses: Vec<CameraPose>,
    pub frame: FactorizedFrame4D,
    pub motion_log_sigma: Vec<Vec<f64>>,
}

fn vec3s(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn to_vec3s(v: &[f64]) -> Vec<Vec3> {
    v.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

impl Prediction {
    pub fn from_model(geometry: Vec<GeometryPrediction>, frame: FactorizedFrame4D, motion: Vec<MotionPrediction>) -> Self {
        Self {
            depth_log_sigma: geometry.iter().map(|g| g.depth_log_sigma.clone()).collect(),
            rays: geometry.iter().map(|g| g.rays.clone()).collect(),
            ray_log_sigma: geometry.iter().map(|g| g.ray_log_sigma.clone()).collect(),
            fov: geometry.iter().map(|g| g.vertical_fov).collect(),
            poses: geometry.iter().map(|g| g.pose).collect(),
            depths: geometry.into_iter().map(|g| g.depth).collect(),
            frame,
            motion_log_sigma: motion.into_iter().map(|m| m.motion_log_sigma).collect(),
        }
    }

    /// Treats ground truth as a prediction for `source` toward every frame.
    pub fn from_bundle(b: &GroundTruthBundle, source: usize) -> CliResult<Self> {
        let n = b.num_frames();
        if source >= n {
            return Err(CliError::Config(format!("source {source} out of range for {n} frames")));
        }
        let hw = b.width() * b.height();
        let mut frame = FactorizedFrame4D::new(b.timestamp(source), b.base_pointmap(source));
        for tau in 0..n {
            frame.insert(b.displacement(source, tau).clone())?;
        }
        let rays = b
            .poses
            .iter()
            .map(|p| intrinsics_to_rays(&b.intrinsics, p))
            .collect::<anytime4d_core::Result<Vec<_>>>()?;
        Ok(Self {
            depths: b.depths.clone(),
            depth_log_sigma: vec![vec![0.0; hw]; n],
            ray_log_sigma: vec![vec![0.0; hw / 4]; n],
            rays,
            fov: vec![b.intrinsics.vertical_fov; n],
            poses: b.poses.clone(),
            frame,
            motion_log_sigma: vec![vec![0.0; hw]; n],
        })
    }

    pub fn num_frames(&self) -> usize {
        self.depths.len()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.frame.displacements.keys().copied().collect()
    }

    pub fn to_archive(&self) -> CliResult<TensorArchive> {
        let n = self.num_frames();
        let (w, h) = (self.frame.base.width, self.frame.base.height);
        let (hw_, hh) = (w / 2, h / 2);
        let t = self.frame.displacements.len();
        let mut a = TensorArchive::new();
        a.insert("depth", Array::f64(vec![n, h, w], self.depths.iter().flat_map(|d| d.values.clone()).collect())?)?;
        a.insert("depth_log_sigma", Array::f64(vec![n, h, w], self.depth_log_sigma.concat())?)?;
        a.insert("rays", Array::f64(vec![n, hh, hw_, 6], self.rays.iter().flat_map(|r| r.to_channels()).collect())?)?;
        a.insert("ray_log_sigma", Array::f64(vec![n, hh, hw_], self.ray_log_sigma.concat())?)?;
        a.insert("fov", Array::f64(vec![n], self.fov.clone())?)?;
        a.insert("poses", Array::f64(vec![n, 7], self.poses.iter().flat_map(pose_to_array).collect())?)?;
        a.insert("base", Array::f64(vec![h, w, 3], vec3s(&self.frame.base.points))?)?;
        a.insert("base_valid", Array::bool(vec![h, w], self.frame.base.valid.clone())?)?;
        let fields: Vec<&DisplacementField> = self.frame.displacements.values().collect();
        a.insert(
            "displacement",
            Array::f64(vec![t, h, w, 3], fields.iter().flat_map(|f| vec3s(&f.deltas)).collect())?,
        )?;
        a.insert("motion_log_sigma", Array::f64(vec![t, h, w], self.motion_log_sigma.concat())?)?;
        a.insert("targets", Array::i32(vec![t], self.targets().iter().map(|&k| k as i32).collect())?)?;
        a.insert("source", Array::i32(vec![1], vec![self.frame.source.frame_index as i32])?)?;
        a.meta.insert("kind".into(), json!("prediction"));
        a.meta.insert("num_frames".into(), json!(n));
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> CliResult<Self> {
        let bad = |m: String| CliError::Data(m);
        let (s, depth) = a.get_f64("depth")?;
        if s.len() != 3 {
            return Err(bad(format!("depth shape {s:?}")));
        }
        let (n, h, w) = (s[0], s[1], s[2]);
        let hw = h * w;
        let expect = |name: &str, got: &[usize], want: &[usize]| {
            if got == want {
                Ok(())
            } else {
                Err(bad(format!("{name} shape {got:?}, expected {want:?}")))
            }
        };
        let (s, dls) = a.get_f64("depth_log_sigma")?;
        expect("depth_log_sigma", s, &[n, h, w])?;
        let (s, rays) = a.get_f64("rays")?;
        expect("rays", s, &[n, h / 2, w / 2, 6])?;
        let (s, rls) = a.get_f64("ray_log_sigma")?;
        expect("ray_log_sigma", s, &[n, h / 2, w / 2])?;
        let (s, fov) = a.get_f64("fov")?;
        expect("fov", s, &[n])?;
        let (s, poses) = a.get_f64("poses")?;
        expect("poses", s, &[n, 7])?;
        let (s, base) = a.get_f64("base")?;
        expect("base", s, &[h, w, 3])?;
        let (s, base_valid) = a.get_bool("base_valid")?;
        expect("base_valid", s, &[h, w])?;
        let (s, targets) = a.get_i32("targets")?;
        let t = s.first().copied().unwrap_or(0);
        let (s, disp) = a.get_f64("displacement")?;
        expect("displacement", s, &[t, h, w, 3])?;
        let (s, mls) = a.get_f64("motion_log_sigma")?;
        expect("motion_log_sigma", s, &[t, h, w])?;
        let (_, source) = a.get_i32("source")?;
        let idx = |v: i32| -> CliResult<usize> {
            if v < 0 || v as usize >= n {
                Err(bad(format!("frame index {v} out of range")))
            } else {
                Ok(v as usize)
            }
        };
        let src = Timestamp::new(idx(source[0])?, n);
        let base = PointMap {
            width: w,
            height: h,
            points: to_vec3s(base),
            valid: base_valid.to_vec(),
        };
        let mut frame = FactorizedFrame4D::new(src, base);
        for (k, &tau) in targets.iter().enumerate() {
            frame.insert(DisplacementField {
                width: w,
                height: h,
                deltas: to_vec3s(&disp[k * hw * 3..(k + 1) * hw * 3]),
                valid: vec![true; hw],
                source: src,
                target: Timestamp::new(idx(tau)?, n),
            })?;
        }
        let qhw = hw / 4;
        Ok(Self {
            depths: (0..n)
                .map(|i| DepthMap::new(w, h, depth[i * hw..(i + 1) * hw].to_vec(), vec![true; hw]))
                .collect::<anytime4d_core::Result<_>>()?,
            depth_log_sigma: dls.chunks(hw).map(|c| c.to_vec()).collect(),
            rays: (0..n)
                .map(|i| RayMap::from_channels(w / 2, h / 2, &rays[i * qhw * 6..(i + 1) * qhw * 6]))
                .collect::<anytime4d_core::Result<_>>()?,
            ray_log_sigma: rls.chunks(qhw.max(1)).map(|c| c.to_vec()).collect(),
            fov: fov.to_vec(),
            poses: poses.chunks_exact(7).map(pose_from_array).collect(),
            frame,
            motion_log_sigma: mls.chunks(hw).map(|c| c.to_vec()).collect(),
        })
    }
}
