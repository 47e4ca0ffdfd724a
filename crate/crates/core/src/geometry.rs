//! Pinhole cameras, ray maps, pointmaps and similarity transforms.
//!
//! Conventions: camera frame is x right, y down, z forward. Poses map camera
//! coordinates to world coordinates. Depth is z-depth, and every ray
//! direction has a camera-frame z component of exactly 1 before rotation, so
//! `origin + depth * direction` is the unprojected point.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    /// Vertical field of view in radians.
    pub vertical_fov: f64,
    pub principal_point: (f64, f64),
}

impl CameraIntrinsics {
    /// Intrinsics with the principal point at the image center.
    pub fn new(width: usize, height: usize, vertical_fov: f64) -> Result<Self> {
        let intr = Self {
            width,
            height,
            vertical_fov,
            principal_point: (width as f64 / 2.0, height as f64 / 2.0),
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn with_principal_point(mut self, px: f64, py: f64) -> Result<Self> {
        self.principal_point = (px, py);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(Error::OddDimensions {
                width: self.width,
                height: self.height,
            });
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidIntrinsics(format!(
                "image must be at least 8x8, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov < std::f64::consts::PI) {
            return Err(Error::InvalidIntrinsics(format!(
                "vertical fov {} outside (0, pi)",
                self.vertical_fov
            )));
        }
        let (px, py) = self.principal_point;
        if !(px >= 0.0 && px <= self.width as f64 && py >= 0.0 && py <= self.height as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({px}, {py}) outside image"
            )));
        }
        Ok(())
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        (self.height as f64 / 2.0) / (self.vertical_fov / 2.0).tan()
    }

    /// Camera-frame ray through continuous pixel coordinate `(u, v)`, z = 1.
    pub fn camera_ray(&self, u: f64, v: f64) -> Vec3 {
        let f = self.focal();
        Vec3::new(
            (u - self.principal_point.0) / f,
            (v - self.principal_point.1) / f,
            1.0,
        )
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    pub fn project_camera(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        let f = self.focal();
        Some((
            f * p.x / p.z + self.principal_point.0,
            f * p.y / p.z + self.principal_point.1,
        ))
    }

    pub fn scaled_to(&self, width: usize, height: usize) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let intr = Self {
            width,
            height,
            vertical_fov: self.vertical_fov,
            principal_point: (self.principal_point.0 * sx, self.principal_point.1 * sy),
        };
        intr.validate()?;
        Ok(intr)
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: UnitQuaternion<f64>,
    /// Camera center in world coordinates.
    pub translation: Vec3,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse() * (p - self.translation)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> CameraPose {
        let r = self.rotation.inverse();
        CameraPose {
            rotation: r,
            translation: -(r * self.translation),
        }
    }

    /// Scalar-first quaternion with non-negative scalar part.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        quat_to_wxyz(&self.rotation)
    }

    pub fn from_wxyz(q: [f64; 4], translation: Vec3) -> Self {
        Self {
            rotation: quat_from_wxyz(q),
            translation,
        }
    }
}

pub fn quat_to_wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
    let q = q.quaternion();
    let s = if q.w < 0.0 { -1.0 } else { 1.0 };
    [s * q.w, s * q.i, s * q.j, s * q.k]
}

pub fn quat_from_wxyz(q: [f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
}

/// Geodesic angle between two rotations in radians, in [0, π].
pub fn rotation_angle(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let rel = a.inverse() * b;
    let q = rel.quaternion();
    2.0 * q.imag().norm().atan2(q.w.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if values.len() != n || valid.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} pixels"),
                actual: format!("{} values, {} mask", values.len(), valid.len()),
            });
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self {
            width,
            height,
            values: vec![depth; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Half-resolution per-pixel rays in world space.
#[derive(Debug, Clone, PartialEq)]
pub struct RayMap {
    pub width: usize,
    pub height: usize,
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
}

impl RayMap {
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// Flattened `(ox, oy, oz, dx, dy, dz)` per pixel.
    pub fn to_channels(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.origins.len() * 6);
        for (o, d) in self.origins.iter().zip(&self.directions) {
            out.extend_from_slice(&[o.x, o.y, o.z, d.x, d.y, d.z]);
        }
        out
    }

    pub fn from_channels(width: usize, height: usize, ch: &[f64]) -> Result<Self> {
        if ch.len() != width * height * 6 {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x6", height, width),
                actual: format!("{} values", ch.len()),
            });
        }
        let origins = ch.chunks_exact(6).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        let directions = ch.chunks_exact(6).map(|c| Vec3::new(c[3], c[4], c[5])).collect();
        Ok(Self {
            width,
            height,
            origins,
            directions,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vec3>,
    pub valid: Vec<bool>,
}

impl PointMap {
    pub fn get(&self, x: usize, y: usize) -> Option<Vec3> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.points[i])
    }

    pub fn valid_points(&self) -> impl Iterator<Item = &Vec3> {
        self.points
            .iter()
            .zip(&self.valid)
            .filter_map(|(p, v)| v.then_some(p))
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Similarity transform `p ↦ scale · R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for Sim3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        assert!(scale > 0.0, "Sim3 scale must be positive");
        Self {
            scale,
            rotation,
            translation,
        }
    }

    pub fn from_pose(pose: &CameraPose) -> Self {
        Self::new(1.0, pose.rotation, pose.translation)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Sim3) -> Sim3 {
        Sim3 {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Sim3 {
        let r = self.rotation.inverse();
        let s = 1.0 / self.scale;
        Sim3 {
            scale: s,
            rotation: r,
            translation: -s * (r * self.translation),
        }
    }

    /// Applies the transform to a camera pose (maps the camera center and
    /// composes the rotation).
    pub fn apply_pose(&self, pose: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * pose.rotation,
            translation: self.apply(&pose.translation),
        }
    }
}

fn check_even(width: usize, height: usize) -> Result<()> {
    if width % 2 != 0 || height % 2 != 0 {
        return Err(Error::OddDimensions { width, height });
    }
    Ok(())
}

/// Half-resolution world rays. The half-grid pixel `(a, b)` covers the 2x2
/// block whose center is the full-resolution coordinate `(2a + 1, 2b + 1)`.
pub fn intrinsics_to_rays(intr: &CameraIntrinsics, pose: &CameraPose) -> Result<RayMap> {
    check_even(intr.width, intr.height)?;
    let (w, h) = (intr.width / 2, intr.height / 2);
    let mut directions = Vec::with_capacity(w * h);
    for b in 0..h {
        for a in 0..w {
            let u = 2.0 * a as f64 + 1.0;
            let v = 2.0 * b as f64 + 1.0;
            directions.push(pose.rotation * intr.camera_ray(u, v));
        }
    }
    Ok(RayMap {
        width: w,
        height: h,
        origins: vec![pose.translation; w * h],
        directions,
    })
}

/// World ray for full-resolution pixel `(x, y)` sampled at its center.
pub fn pixel_ray(intr: &CameraIntrinsics, pose: &CameraPose, x: usize, y: usize) -> Vec3 {
    pose.rotation * intr.camera_ray(x as f64 + 0.5, y as f64 + 0.5)
}

pub fn unproject(depth: &DepthMap, intr: &CameraIntrinsics, pose: &CameraPose) -> Result<PointMap> {
    if depth.width != intr.width || depth.height != intr.height {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", intr.height, intr.width),
            actual: format!("{}x{}", depth.height, depth.width),
        });
    }
    let mut points = Vec::with_capacity(depth.values.len());
    for y in 0..depth.height {
        for x in 0..depth.width {
            let i = y * depth.width + x;
            if depth.valid[i] {
                let d = pixel_ray(intr, pose, x, y);
                points.push(pose.translation + depth.values[i] * d);
            } else {
                points.push(Vec3::zeros());
            }
        }
    }
    Ok(PointMap {
        width: depth.width,
        height: depth.height,
        points,
        valid: depth.valid.clone(),
    })
}

/// Projects a world point into continuous pixel coordinates plus z-depth.
pub fn project(p: &Vec3, intr: &CameraIntrinsics, pose: &CameraPose) -> Option<(f64, f64, f64)> {
    let pc = pose.world_to_camera(p);
    intr.project_camera(&pc).map(|(u, v)| (u, v, pc.z))
}

/// Maps a full-resolution pixel center onto the half grid: returns the lower
/// sample index and the (possibly extrapolating) interpolation weight.
fn half_grid_coord(full: usize, half_len: usize) -> (usize, f64) {
    let g = (full as f64 + 0.5) / 2.0 - 0.5;
    let i0 = (g.floor().max(0.0) as usize).min(half_len - 2);
    (i0, g - i0 as f64)
}

fn bilinear(field: &[Vec3], w: usize, x0: usize, y0: usize, fx: f64, fy: f64) -> Vec3 {
    let at = |x: usize, y: usize| field[y * w + x];
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Upsamples a half-resolution ray map to full resolution. Border pixels are
/// linearly extrapolated, so affine ray fields are reproduced exactly.
pub fn upsample_rays(rays: &RayMap) -> (Vec<Vec3>, Vec<Vec3>) {
    let (fw, fh) = (rays.width * 2, rays.height * 2);
    let mut origins = Vec::with_capacity(fw * fh);
    let mut directions = Vec::with_capacity(fw * fh);
    for y in 0..fh {
        let (y0, fy) = half_grid_coord(y, rays.height);
        for x in 0..fw {
            let (x0, fx) = half_grid_coord(x, rays.width);
            origins.push(bilinear(&rays.origins, rays.width, x0, y0, fx, fy));
            directions.push(bilinear(&rays.directions, rays.width, x0, y0, fx, fy));
        }
    }
    (origins, directions)
}

pub fn pointmap_from_rays(depth: &DepthMap, rays: &RayMap) -> Result<PointMap> {
    if rays.width * 2 != depth.width || rays.height * 2 != depth.height {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} ray grid", depth.height / 2, depth.width / 2),
            actual: format!("{}x{}", rays.height, rays.width),
        });
    }
    if rays.width < 2 || rays.height < 2 {
        return Err(Error::ShapeMismatch {
            expected: "ray grid at least 2x2".into(),
            actual: format!("{}x{}", rays.height, rays.width),
        });
    }
    let (origins, directions) = upsample_rays(rays);
    let points = (0..depth.values.len())
        .map(|i| {
            if depth.valid[i] {
                origins[i] + depth.values[i] * directions[i]
            } else {
                Vec3::zeros()
            }
        })
        .collect();
    Ok(PointMap {
        width: depth.width,
        height: depth.height,
        points,
        valid: depth.valid.clone(),
    })
}

pub fn sim3_apply(t: &Sim3, pts: &PointMap) -> PointMap {
    PointMap {
        width: pts.width,
        height: pts.height,
        points: pts.points.iter().map(|p| t.apply(p)).collect(),
        valid: pts.valid.clone(),
    }
}

/// `1 / mean ‖p‖` over every valid point of every pointmap.
pub fn normalization_scale<'a>(maps: impl IntoIterator<Item = &'a PointMap>) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for m in maps {
        for p in m.valid_points() {
            sum += p.norm();
            count += 1;
        }
    }
    if count == 0 || sum <= 0.0 {
        return Err(Error::NoValidPoints);
    }
    Ok(count as f64 / sum)
}

/// Rescales the scene so the mean valid point norm becomes 1. Points and
/// camera translations are scaled in place; the scale is returned so callers
/// can apply it to displacement targets and depths.
pub fn normalize_scene(frames: &mut [(PointMap, CameraPose)]) -> Result<f64> {
    let s = normalization_scale(frames.iter().map(|(m, _)| m))?;
    for (map, pose) in frames.iter_mut() {
        for p in map.points.iter_mut() {
            *p *= s;
        }
        pose.translation *= s;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn intr64() -> CameraIntrinsics {
        CameraIntrinsics::new(64, 48, 1.0).unwrap()
    }

    #[test]
    fn center_half_pixel_direction() {
        // 18x18 gives a 9x9 half grid whose middle sample sits on the
        // centered principal point.
        let intr = CameraIntrinsics::new(18, 18, 1.2).unwrap();
        let id = intrinsics_to_rays(&intr, &CameraPose::identity()).unwrap();
        assert_eq!((id.width, id.height), (9, 9));
        let c = id.idx(4, 4);
        assert!((id.directions[c] - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        let yaw = CameraPose::new(
            UnitQuaternion::from_axis_angle(&Vec3::y_axis(), FRAC_PI_2),
            Vec3::new(1.0, 2.0, 3.0),
        );
        let rays = intrinsics_to_rays(&intr, &yaw).unwrap();
        assert!((rays.directions[c] - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-9);
        assert!(rays.origins.iter().all(|o| *o == yaw.translation));
    }

    #[test]
    fn rejects_odd_dimensions() {
        let intr = CameraIntrinsics {
            width: 15,
            height: 16,
            vertical_fov: 1.0,
            principal_point: (7.5, 8.0),
        };
        assert!(matches!(
            intrinsics_to_rays(&intr, &CameraPose::identity()),
            Err(Error::OddDimensions { .. })
        ));
        assert!(CameraIntrinsics::new(15, 16, 1.0).is_err());
        assert!(CameraIntrinsics::new(16, 16, 3.2).is_err());
    }

    #[test]
    fn unproject_center_and_translation() {
        let intr = CameraIntrinsics::new(16, 16, 1.0)
            .unwrap()
            .with_principal_point(8.5, 8.5)
            .unwrap();
        let depth = DepthMap::constant(16, 16, 1.0);
        let pm = unproject(&depth, &intr, &CameraPose::identity()).unwrap();
        assert!((pm.get(8, 8).unwrap() - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);

        let shifted = CameraPose::new(UnitQuaternion::identity(), Vec3::new(0.0, 0.0, -5.0));
        let pm2 = unproject(&depth, &intr, &shifted).unwrap();
        for (a, b) in pm.points.iter().zip(&pm2.points) {
            assert!((b - a - Vec3::new(0.0, 0.0, -5.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn unproject_rejects_dimension_mismatch() {
        let depth = DepthMap::constant(16, 16, 1.0);
        assert!(unproject(&depth, &intr64(), &CameraPose::identity()).is_err());
    }

    #[test]
    fn unproject_project_round_trip() {
        let intr = intr64();
        let pose = CameraPose::new(
            UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3),
            Vec3::new(0.5, -1.0, 2.0),
        );
        let mut values = Vec::new();
        for i in 0..intr.width * intr.height {
            values.push(1.0 + (i as f64 * 0.37).sin().abs() * 5.0);
        }
        let depth = DepthMap::new(intr.width, intr.height, values, vec![true; 64 * 48]).unwrap();
        let pm = unproject(&depth, &intr, &pose).unwrap();
        for y in 0..intr.height {
            for x in 0..intr.width {
                let p = pm.get(x, y).unwrap();
                let (u, v, z) = project(&p, &intr, &pose).unwrap();
                assert!((u - (x as f64 + 0.5)).abs() < 1e-9);
                assert!((v - (y as f64 + 0.5)).abs() < 1e-9);
                assert!((z - depth.values[y * intr.width + x]).abs() < 1e-9);
                let d = DepthMap::constant(1, 1, z);
                let back = pose.translation + d.values[0] * pixel_ray(&intr, &pose, x, y);
                assert!((back - p).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn pointmap_from_rays_matches_unproject() {
        let intr = intr64();
        let pose = CameraPose::new(
            UnitQuaternion::from_euler_angles(-0.3, 0.2, 0.1),
            Vec3::new(1.0, 0.0, -2.0),
        );
        let mut depth = DepthMap::constant(64, 48, 2.0);
        for (i, d) in depth.values.iter_mut().enumerate() {
            *d = 1.0 + (i % 7) as f64 * 0.3;
        }
        depth.valid[10] = false;
        let rays = intrinsics_to_rays(&intr, &pose).unwrap();
        let a = pointmap_from_rays(&depth, &rays).unwrap();
        let b = unproject(&depth, &intr, &pose).unwrap();
        assert!(!a.valid[10]);
        for i in 0..a.points.len() {
            assert_eq!(a.valid[i], b.valid[i]);
            if a.valid[i] {
                assert!((a.points[i] - b.points[i]).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_rays_upsample_exactly() {
        let o = Vec3::new(0.25, -1.5, 3.0);
        let d = Vec3::new(0.1, 0.2, 1.0);
        let rays = RayMap {
            width: 4,
            height: 4,
            origins: vec![o; 16],
            directions: vec![d; 16],
        };
        let depth = DepthMap::constant(8, 8, 2.0);
        let pm = pointmap_from_rays(&depth, &rays).unwrap();
        for p in &pm.points {
            assert!((p - (o + 2.0 * d)).norm() < 1e-12);
        }
        let wrong = DepthMap::constant(10, 8, 1.0);
        assert!(pointmap_from_rays(&wrong, &rays).is_err());
    }

    #[test]
    fn full_res_rays_at_half_grid_centers_match() {
        let intr = intr64();
        let pose = CameraPose::new(
            UnitQuaternion::from_euler_angles(0.4, 0.1, -0.2),
            Vec3::zeros(),
        );
        let rays = intrinsics_to_rays(&intr, &pose).unwrap();
        for b in 0..rays.height {
            for a in 0..rays.width {
                let full = pose.rotation
                    * intr.camera_ray(2.0 * a as f64 + 1.0, 2.0 * b as f64 + 1.0);
                assert!((full - rays.directions[rays.idx(a, b)]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn sim3_basics() {
        let p = Vec3::new(1.0, 1.0, 1.0);
        assert_eq!(Sim3::identity().apply(&p), p);
        let s = Sim3::new(2.0, UnitQuaternion::identity(), Vec3::zeros());
        assert!((s.apply(&p) - Vec3::new(2.0, 2.0, 2.0)).norm() < 1e-15);
        let t = Sim3::new(
            0.7,
            UnitQuaternion::from_euler_angles(0.3, 1.1, -0.4),
            Vec3::new(3.0, -2.0, 0.5),
        );
        assert!((t.apply(&t.inverse().apply(&p)) - p).norm() < 1e-9);
        let id = t.compose(&t.inverse());
        assert!((id.apply(&p) - p).norm() < 1e-9);
    }

    #[test]
    fn normalize_scene_cases() {
        let make = |pts: Vec<Vec3>| PointMap {
            width: pts.len(),
            height: 1,
            valid: vec![true; pts.len()],
            points: pts,
        };
        let mut unit = vec![(
            make(vec![Vec3::x(), Vec3::y(), -Vec3::z()]),
            CameraPose::identity(),
        )];
        let before = unit.clone();
        let s = normalize_scene(&mut unit).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(unit[0].0, before[0].0);

        let mut four = vec![(
            make(vec![Vec3::x() * 4.0, Vec3::y() * -4.0]),
            CameraPose::new(UnitQuaternion::identity(), Vec3::new(0.0, 0.0, 8.0)),
        )];
        let s = normalize_scene(&mut four).unwrap();
        assert!((s - 0.25).abs() < 1e-15);
        assert!((four[0].1.translation.z - 2.0).abs() < 1e-15);

        let mut empty = vec![(
            PointMap {
                width: 1,
                height: 1,
                points: vec![Vec3::x()],
                valid: vec![false],
            },
            CameraPose::identity(),
        )];
        assert!(matches!(
            normalize_scene(&mut empty),
            Err(Error::NoValidPoints)
        ));
    }

    #[test]
    fn quaternion_canonical_layout() {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(-0.5, 0.5, 0.5, 0.5));
        let wxyz = quat_to_wxyz(&q);
        assert!(wxyz[0] > 0.0);
        assert!(rotation_angle(&q, &quat_from_wxyz(wxyz)) < 1e-12);
    }
}
