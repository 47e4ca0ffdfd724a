//! Procedural dynamic scenes with exact ground truth.
//!
//! Scenes are made of analytic rigid primitives in front of a textured
//! backdrop plane. Every frame is rasterized with a z-buffer: each primitive
//! is intersected analytically for the pixels inside its projected bounding
//! box, and the nearest hit wins. Each covered pixel keeps the object-local
//! surface point it shows, so the displacement of that point to any other
//! time is the object's rigid motion applied to it, exactly.

use nalgebra::UnitQuaternion;
use rand::Rng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    unproject, CameraIntrinsics, CameraPose, DepthMap, PointMap, Vec3,
};
use crate::representation::{DisplacementField, Timestamp};
use crate::rng::{self, streams};

/// Rigid local-to-world transform of an object.
pub type RigidPose = CameraPose;

const NEAR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    /// Checker cells per scene unit.
    pub checker_scale: f64,
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
    /// Amplitude of value noise added on top of the checker.
    pub noise_amp: f64,
    pub noise_scale: f64,
    pub noise_seed: u32,
}

impl Texture {
    pub fn random(rng: &mut Pcg64) -> Self {
        let mut color = || [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
        let color_a = color();
        let color_b = color();
        Self {
            checker_scale: rng.gen_range(2.0..6.0),
            color_a,
            color_b,
            noise_amp: rng.gen_range(0.05..0.25),
            noise_scale: rng.gen_range(3.0..9.0),
            noise_seed: rng.gen(),
        }
    }

    pub fn color(&self, p: &Vec3) -> [f64; 3] {
        let c = (p * self.checker_scale).map(f64::floor);
        let parity = (c.x + c.y + c.z).rem_euclid(2.0) < 0.5;
        let base = if parity { self.color_a } else { self.color_b };
        let n = value_noise(&(p * self.noise_scale), self.noise_seed) - 0.5;
        base.map(|b| (b + self.noise_amp * n).clamp(0.0, 1.0))
    }
}

fn lattice_hash(x: i64, y: i64, z: i64, seed: u32) -> f64 {
    let mut h = (x as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7)
        ^ (y as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (z as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (seed as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    h = rng::splitmix64(h);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear value noise with smoothstep weights, in [0, 1].
fn value_noise(p: &Vec3, seed: u32) -> f64 {
    let f = p.map(f64::floor);
    let t = p - f;
    let s = t.map(|v| v * v * (3.0 - 2.0 * v));
    let (x0, y0, z0) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { s.x } else { 1.0 - s.x })
                    * (if dy == 1 { s.y } else { 1.0 - s.y })
                    * (if dz == 1 { s.z } else { 1.0 - s.z });
                acc += w * lattice_hash(x0 + dx, y0 + dy, z0 + dz, seed);
            }
        }
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    /// Double-sided rectangle in the local xy plane.
    Quad { half_width: f64, half_height: f64 },
}

impl Shape {
    fn bounding_radius(&self) -> f64 {
        match self {
            Shape::Sphere { radius } => *radius,
            Shape::Box { half_extents: h } => Vec3::new(h[0], h[1], h[2]).norm(),
            Shape::Quad {
                half_width,
                half_height,
            } => half_width.hypot(*half_height),
        }
    }

    fn size_ok(&self) -> bool {
        match self {
            Shape::Sphere { radius } => *radius > 0.0,
            Shape::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0),
            Shape::Quad {
                half_width,
                half_height,
            } => *half_width > 0.0 && *half_height > 0.0,
        }
    }

    /// Intersects a local-frame ray; returns `(t, local normal)`.
    fn intersect_local(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
        match self {
            Shape::Sphere { radius } => {
                let a = d.dot(d);
                let b = 2.0 * d.dot(o);
                let c = o.dot(o) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / (2.0 * a);
                let t1 = (-b + sq) / (2.0 * a);
                let t = if t0 > NEAR { t0 } else if t1 > NEAR { t1 } else { return None };
                Some((t, (o + t * d) / *radius))
            }
            Shape::Box { half_extents: h } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis_near = 0;
                let mut axis_far = 0;
                for k in 0..3 {
                    if d[k].abs() < 1e-300 {
                        if o[k].abs() > h[k] {
                            return None;
                        }
                        continue;
                    }
                    let mut ta = (-h[k] - o[k]) / d[k];
                    let mut tb = (h[k] - o[k]) / d[k];
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t_near {
                        t_near = ta;
                        axis_near = k;
                    }
                    if tb < t_far {
                        t_far = tb;
                        axis_far = k;
                    }
                }
                if t_near > t_far {
                    return None;
                }
                let (t, k) = if t_near > NEAR {
                    (t_near, axis_near)
                } else if t_far > NEAR {
                    (t_far, axis_far)
                } else {
                    return None;
                };
                let mut n = Vec3::zeros();
                n[k] = (o[k] + t * d[k]).signum();
                Some((t, n))
            }
            Shape::Quad {
                half_width,
                half_height,
            } => {
                if d.z.abs() < 1e-300 {
                    return None;
                }
                let t = -o.z / d.z;
                if t <= NEAR {
                    return None;
                }
                let p = o + t * d;
                (p.x.abs() <= *half_width && p.y.abs() <= *half_height)
                    .then(|| (t, Vec3::z()))
            }
        }
    }
}

/// Per-frame rigid poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionProgram {
    pub poses: Vec<RigidPose>,
}

fn exp_rotation(v: &Vec3) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*v)
}

impl MotionProgram {
    pub fn fixed(pose: RigidPose, num_frames: usize) -> Self {
        Self {
            poses: vec![pose; num_frames],
        }
    }

    /// Constant linear velocity and angular velocity (axis-angle per frame).
    pub fn constant_velocity(start: RigidPose, velocity: Vec3, angular: Vec3, num_frames: usize) -> Self {
        let poses = (0..num_frames)
            .map(|t| {
                let tf = t as f64;
                RigidPose::new(
                    exp_rotation(&(angular * tf)) * start.rotation,
                    start.translation + velocity * tf,
                )
            })
            .collect();
        Self { poses }
    }

    /// Translation oscillates around the start position; rotation spins at a
    /// constant rate.
    pub fn sinusoidal(
        start: RigidPose,
        amplitude: Vec3,
        frequency: f64,
        phase: f64,
        angular: Vec3,
        num_frames: usize,
    ) -> Self {
        let poses = (0..num_frames)
            .map(|t| {
                let tf = t as f64;
                let w = (std::f64::consts::TAU * frequency * tf + phase).sin() - phase.sin();
                RigidPose::new(
                    exp_rotation(&(angular * tf)) * start.rotation,
                    start.translation + amplitude * w,
                )
            })
            .collect();
        Self { poses }
    }

    /// Linear interpolation between waypoints placed at the given frames.
    pub fn piecewise_linear(start: RigidPose, waypoints: &[(usize, Vec3)], num_frames: usize) -> Self {
        let mut keys: Vec<(usize, Vec3)> = vec![(0, start.translation)];
        keys.extend(waypoints.iter().copied().filter(|(f, _)| *f > 0));
        keys.sort_by_key(|k| k.0);
        let poses = (0..num_frames)
            .map(|t| {
                let pos = match keys.iter().position(|k| k.0 >= t) {
                    Some(0) => keys[0].1,
                    Some(j) => {
                        let (fa, pa) = keys[j - 1];
                        let (fb, pb) = keys[j];
                        let a = (t - fa) as f64 / (fb - fa) as f64;
                        pa * (1.0 - a) + pb * a
                    }
                    None => keys.last().unwrap().1,
                };
                RigidPose::new(start.rotation, pos)
            })
            .collect();
        Self { poses }
    }

    pub fn is_static(&self) -> bool {
        self.poses.windows(2).all(|w| w[0] == w[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidBody {
    pub shape: Shape,
    pub texture: Texture,
    pub motion: MotionProgram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Background {
    /// Infinite textured plane through `point` with the given normal.
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
        texture: Texture,
    },
    /// Nothing behind the objects; uncovered pixels are invalid.
    Sky { color: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub vertical_fov: f64,
    pub objects: Vec<RigidBody>,
    /// Camera-to-world poses; frame 0 must be the identity.
    pub camera_path: MotionProgram,
    pub background: Background,
}

/// Ranges for randomly generated scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneRanges {
    pub num_frames: (usize, usize),
    /// Image height (the longer side is derived from the aspect ratio).
    pub height: usize,
    /// Width / height, sampled uniformly.
    pub aspect: (f64, f64),
    /// Both dimensions are rounded to a multiple of this.
    pub size_multiple: usize,
    pub num_objects: (usize, usize),
    pub object_size: (f64, f64),
    pub object_depth: (f64, f64),
    /// Maximum object speed, scene units per frame.
    pub max_speed: f64,
    /// Maximum object spin, radians per frame.
    pub max_spin: f64,
    pub static_object_probability: f64,
    pub camera_max_speed: f64,
    pub camera_max_spin: f64,
    pub static_camera_probability: f64,
    pub fov: (f64, f64),
    pub backdrop_depth: (f64, f64),
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            num_frames: (2, 18),
            height: 64,
            aspect: (1.0, 1.0),
            size_multiple: 8,
            num_objects: (1, 3),
            object_size: (0.35, 0.8),
            object_depth: (2.5, 5.0),
            max_speed: 0.15,
            max_spin: 0.08,
            static_object_probability: 0.2,
            camera_max_speed: 0.05,
            camera_max_spin: 0.01,
            static_camera_probability: 0.3,
            fov: (0.8, 1.1),
            backdrop_depth: (6.0, 9.0),
        }
    }
}

fn random_unit(rng: &mut Pcg64) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_range_usize(rng: &mut Pcg64, r: (usize, usize)) -> usize {
    if r.1 <= r.0 {
        r.0
    } else {
        rng.gen_range(r.0..=r.1)
    }
}

fn random_range_f64(rng: &mut Pcg64, r: (f64, f64)) -> f64 {
    if r.1 <= r.0 {
        r.0
    } else {
        rng.gen_range(r.0..r.1)
    }
}

impl SceneSpec {
    /// Random scene drawn from `ranges`, fully determined by `seed`.
    pub fn random(seed: u64, ranges: &SceneRanges) -> Self {
        let mut rng = rng::stream(seed, streams::SCENE_LAYOUT);
        let num_frames = random_range_usize(&mut rng, ranges.num_frames);
        let m = ranges.size_multiple.max(2);
        let aspect = random_range_f64(&mut rng, ranges.aspect);
        let height = ((ranges.height as f64 / m as f64).round() as usize).max(1) * m;
        let width = ((ranges.height as f64 * aspect / m as f64).round() as usize).max(1) * m;
        let vertical_fov = random_range_f64(&mut rng, ranges.fov);
        let tan_v = (vertical_fov / 2.0).tan();
        let tan_h = tan_v * width as f64 / height as f64;

        let n_obj = random_range_usize(&mut rng, ranges.num_objects);
        let mut objects = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            let size = random_range_f64(&mut rng, ranges.object_size);
            let shape = match rng.gen_range(0..3) {
                0 => Shape::Sphere { radius: size },
                1 => Shape::Box {
                    half_extents: [
                        size * rng.gen_range(0.6..1.0),
                        size * rng.gen_range(0.6..1.0),
                        size * rng.gen_range(0.6..1.0),
                    ],
                },
                _ => Shape::Quad {
                    half_width: size * rng.gen_range(0.8..1.3),
                    half_height: size * rng.gen_range(0.8..1.3),
                },
            };
            let z = random_range_f64(&mut rng, ranges.object_depth);
            let x = rng.gen_range(-0.5..0.5) * tan_h * z;
            let y = rng.gen_range(-0.5..0.5) * tan_v * z;
            let rot = match shape {
                // Keep quads roughly facing the camera so they stay visible.
                Shape::Quad { .. } => exp_rotation(&(random_unit(&mut rng) * rng.gen_range(0.0..0.6))),
                _ => exp_rotation(&(random_unit(&mut rng) * rng.gen_range(0.0..std::f64::consts::PI))),
            };
            let start = RigidPose::new(rot, Vec3::new(x, y, z));
            let texture = Texture::random(&mut rng);
            let motion = if rng.gen_bool(ranges.static_object_probability.clamp(0.0, 1.0)) {
                MotionProgram::fixed(start, num_frames)
            } else {
                let speed = rng.gen_range(0.3..1.0) * ranges.max_speed;
                let dir = random_unit(&mut rng);
                let spin = random_unit(&mut rng) * rng.gen_range(0.0..=ranges.max_spin);
                match rng.gen_range(0..3) {
                    0 => MotionProgram::constant_velocity(start, dir * speed, spin, num_frames),
                    1 => MotionProgram::sinusoidal(
                        start,
                        dir * speed * 3.0,
                        rng.gen_range(0.05..0.2),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                        spin,
                        num_frames,
                    ),
                    _ => {
                        let mut waypoints = Vec::new();
                        let mut p = start.translation;
                        let mut f = 0;
                        while f + 1 < num_frames {
                            let step = rng.gen_range(2..=4usize).min(num_frames - 1 - f);
                            f += step;
                            p += random_unit(&mut rng) * speed * step as f64;
                            waypoints.push((f, p));
                        }
                        MotionProgram::piecewise_linear(start, &waypoints, num_frames)
                    }
                }
            };
            objects.push(RigidBody {
                shape,
                texture,
                motion,
            });
        }

        let camera_path = if rng.gen_bool(ranges.static_camera_probability.clamp(0.0, 1.0)) {
            MotionProgram::fixed(CameraPose::identity(), num_frames)
        } else {
            let v = random_unit(&mut rng) * rng.gen_range(0.0..=ranges.camera_max_speed);
            let w = random_unit(&mut rng) * rng.gen_range(0.0..=ranges.camera_max_spin);
            MotionProgram::constant_velocity(CameraPose::identity(), v, w, num_frames)
        };

        let depth = random_range_f64(&mut rng, ranges.backdrop_depth);
        let tilt = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 0.0);
        let normal = exp_rotation(&tilt) * Vec3::new(0.0, 0.0, -1.0);
        let background = Background::Plane {
            point: [0.0, 0.0, depth],
            normal: [normal.x, normal.y, normal.z],
            texture: Texture::random(&mut rng),
        };

        Self {
            seed,
            num_frames,
            height,
            width,
            vertical_fov,
            objects,
            camera_path,
            background,
        }
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.width, self.height, self.vertical_fov)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics()?;
        if self.num_frames < 1 {
            return Err(Error::InvalidSpec("need at least one frame".into()));
        }
        if self.camera_path.poses.len() != self.num_frames {
            return Err(Error::InvalidSpec("camera path length != num_frames".into()));
        }
        let first = &self.camera_path.poses[0];
        if first.translation.norm() > 1e-12 || first.rotation.angle() > 1e-12 {
            return Err(Error::InvalidSpec("first camera pose must be the identity".into()));
        }
        for (k, o) in self.objects.iter().enumerate() {
            if !o.shape.size_ok() {
                return Err(Error::InvalidSpec(format!("object {k} has non-positive size")));
            }
            if o.motion.poses.len() != self.num_frames {
                return Err(Error::InvalidSpec(format!("object {k} motion length != num_frames")));
            }
            if o.motion.poses.iter().any(|p| !p.translation.iter().all(|v| v.is_finite())) {
                return Err(Error::InvalidSpec(format!("object {k} has non-finite motion")));
            }
        }
        Ok(())
    }
}

/// What a ray hit: object index (`None` for the backdrop), local surface
/// point and depth parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub object: Option<usize>,
    pub local: Vec3,
    pub depth: f64,
    pub world_normal: Vec3,
}

fn backdrop_hit(bg: &Background, o: &Vec3, d: &Vec3) -> Option<Hit> {
    match bg {
        Background::Plane { point, normal, .. } => {
            let n = Vec3::from(*normal);
            let denom = d.dot(&n);
            if denom.abs() < 1e-300 {
                return None;
            }
            let t = (Vec3::from(*point) - o).dot(&n) / denom;
            (t > NEAR).then(|| Hit {
                object: None,
                local: o + t * d,
                depth: t,
                world_normal: n,
            })
        }
        Background::Sky { .. } => None,
    }
}

fn object_hit(body: &RigidBody, k: usize, frame: usize, o: &Vec3, d: &Vec3) -> Option<Hit> {
    let pose = &body.motion.poses[frame];
    let inv = pose.rotation.inverse();
    let ol = inv * (o - pose.translation);
    let dl = inv * d;
    body.shape.intersect_local(&ol, &dl).map(|(t, n)| Hit {
        object: Some(k),
        local: ol + t * dl,
        depth: t,
        world_normal: pose.rotation * n,
    })
}

/// Casts the ray through continuous pixel `(u, v)` of frame `frame`.
/// The ray's camera-frame z component is 1, so `depth` is z-depth.
pub fn cast_ray(spec: &SceneSpec, intr: &CameraIntrinsics, frame: usize, u: f64, v: f64) -> Option<Hit> {
    let cam = &spec.camera_path.poses[frame];
    let o = cam.translation;
    let d = cam.rotation * intr.camera_ray(u, v);
    let mut best = backdrop_hit(&spec.background, &o, &d);
    for (k, body) in spec.objects.iter().enumerate() {
        if let Some(h) = object_hit(body, k, frame, &o, &d) {
            if best.map_or(true, |b| h.depth < b.depth) {
                best = Some(h);
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples in [0, 1].
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

fn shade(albedo: [f64; 3], normal: &Vec3) -> [f32; 3] {
    let light = Vec3::new(0.3, -0.6, -0.74).normalize();
    let lambert = normal.dot(&light).abs();
    albedo.map(|a| (a * (0.55 + 0.45 * lambert)).clamp(0.0, 1.0) as f32)
}

/// Everything the generator knows about one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBundle {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<RgbImage>,
    pub depths: Vec<DepthMap>,
    pub poses: Vec<CameraPose>,
    /// `displacements[i][tau]`, world space.
    pub displacements: Vec<Vec<DisplacementField>>,
    /// `visibility[i][tau]`: the surface point seen at a pixel of frame `i`
    /// is unoccluded and inside the image at time `tau`.
    pub visibility: Vec<Vec<Vec<bool>>>,
    /// Pixels showing an object that moves at some point in the sequence.
    pub dynamic_mask: Vec<Vec<bool>>,
    /// Source frame index in the originally generated sequence.
    pub frame_ids: Vec<usize>,
    /// Factor applied to all lengths since generation.
    pub scale: f64,
}

/// Frame-level rasterization result.
struct Raster {
    hits: Vec<Option<Hit>>,
    rgb: RgbImage,
}

fn rasterize(spec: &SceneSpec, intr: &CameraIntrinsics, frame: usize) -> Raster {
    let (w, h) = (spec.width, spec.height);
    let cam = &spec.camera_path.poses[frame];
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut hits: Vec<Option<Hit>> = vec![None; w * h];

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d = cam.rotation * intr.camera_ray(x as f64 + 0.5, y as f64 + 0.5);
            if let Some(hit) = backdrop_hit(&spec.background, &cam.translation, &d) {
                zbuf[i] = hit.depth;
                hits[i] = Some(hit);
            }
        }
    }

    for (k, body) in spec.objects.iter().enumerate() {
        let pose = &body.motion.poses[frame];
        let (x0, x1, y0, y1) = screen_bounds(intr, cam, &pose.translation, body.shape.bounding_radius());
        for y in y0..y1 {
            for x in x0..x1 {
                let i = y * w + x;
                let d = cam.rotation * intr.camera_ray(x as f64 + 0.5, y as f64 + 0.5);
                if let Some(hit) = object_hit(body, k, frame, &cam.translation, &d) {
                    if hit.depth < zbuf[i] {
                        zbuf[i] = hit.depth;
                        hits[i] = Some(hit);
                    }
                }
            }
        }
    }

    let mut rgb = RgbImage::new(w, h);
    for (i, hit) in hits.iter().enumerate() {
        let c = match hit {
            Some(hit) => {
                let texture = match hit.object {
                    Some(k) => &spec.objects[k].texture,
                    None => match &spec.background {
                        Background::Plane { texture, .. } => texture,
                        Background::Sky { .. } => unreachable!(),
                    },
                };
                shade(texture.color(&hit.local), &hit.world_normal)
            }
            None => match &spec.background {
                Background::Sky { color } => color.map(|c| c as f32),
                Background::Plane { .. } => [0.0; 3],
            },
        };
        rgb.data[i * 3..i * 3 + 3].copy_from_slice(&c);
    }
    Raster { hits, rgb }
}

/// Pixel rectangle covering the projection of a bounding sphere; the whole
/// image when the sphere reaches behind the camera.
fn screen_bounds(intr: &CameraIntrinsics, cam: &CameraPose, center: &Vec3, radius: f64) -> (usize, usize, usize, usize) {
    let full = (0, intr.width, 0, intr.height);
    let c = cam.world_to_camera(center);
    if c.z - radius <= 1e-3 {
        return full;
    }
    let f = intr.focal();
    let (px, py) = intr.principal_point;
    // Conservative: extent of the sphere at its nearest depth.
    let zn = c.z - radius;
    let xs = [(c.x - radius) / zn, (c.x + radius) / zn, (c.x - radius) / c.z, (c.x + radius) / c.z];
    let ys = [(c.y - radius) / zn, (c.y + radius) / zn, (c.y - radius) / c.z, (c.y + radius) / c.z];
    let umin = xs.iter().cloned().fold(f64::INFINITY, f64::min) * f + px;
    let umax = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * f + px;
    let vmin = ys.iter().cloned().fold(f64::INFINITY, f64::min) * f + py;
    let vmax = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * f + py;
    let clampi = |v: f64, hi: usize| v.floor().clamp(0.0, hi as f64) as usize;
    (
        clampi(umin - 1.0, intr.width),
        clampi(umax + 2.0, intr.width),
        clampi(vmin - 1.0, intr.height),
        clampi(vmax + 2.0, intr.height),
    )
}

/// World position at frame `tau` of a surface point hit in some frame.
fn world_at(spec: &SceneSpec, hit: &Hit, tau: usize) -> Vec3 {
    match hit.object {
        Some(k) => spec.objects[k].motion.poses[tau].camera_to_world(&hit.local),
        None => hit.local,
    }
}

/// Relative tolerance of the visibility depth test.
const VISIBILITY_TOL: f64 = 1e-6;

/// Whether world point `p` is inside frame `tau`'s image and not occluded.
pub fn point_visible(spec: &SceneSpec, intr: &CameraIntrinsics, tau: usize, p: &Vec3) -> bool {
    let cam = &spec.camera_path.poses[tau];
    let pc = cam.world_to_camera(p);
    let Some((u, v)) = intr.project_camera(&pc) else {
        return false;
    };
    if !(u >= 0.0 && u < intr.width as f64 && v >= 0.0 && v < intr.height as f64) {
        return false;
    }
    match cast_ray(spec, intr, tau, u, v) {
        Some(hit) => hit.depth >= pc.z * (1.0 - VISIBILITY_TOL),
        None => true,
    }
}

pub fn generate(spec: &SceneSpec) -> Result<GroundTruthBundle> {
    spec.validate()?;
    let intr = spec.intrinsics()?;
    let n = spec.num_frames;
    let (w, h) = (spec.width, spec.height);
    let rasters: Vec<Raster> = (0..n).map(|f| rasterize(spec, &intr, f)).collect();

    let mut frames = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    let mut displacements = Vec::with_capacity(n);
    let mut visibility = Vec::with_capacity(n);
    let mut dynamic_mask = Vec::with_capacity(n);
    let moving: Vec<bool> = spec.objects.iter().map(|o| !o.motion.is_static()).collect();

    for (i, raster) in rasters.iter().enumerate() {
        let valid: Vec<bool> = raster.hits.iter().map(|h| h.is_some()).collect();
        let values = raster.hits.iter().map(|h| h.map_or(0.0, |h| h.depth)).collect();
        depths.push(DepthMap::new(w, h, values, valid.clone())?);
        frames.push(raster.rgb.clone());
        dynamic_mask.push(
            raster
                .hits
                .iter()
                .map(|h| matches!(h, Some(Hit { object: Some(k), .. }) if moving[*k]))
                .collect(),
        );

        let src = Timestamp::new(i, n);
        let mut row_d = Vec::with_capacity(n);
        let mut row_v = Vec::with_capacity(n);
        for tau in 0..n {
            let mut field = DisplacementField::zeros(w, h, valid.clone(), src, Timestamp::new(tau, n));
            let mut vis = vec![false; w * h];
            for (px, hit) in raster.hits.iter().enumerate() {
                let Some(hit) = hit else { continue };
                if tau != i {
                    if let Some(k) = hit.object {
                        if moving[k] {
                            field.deltas[px] = world_at(spec, hit, tau) - world_at(spec, hit, i);
                        }
                    }
                }
                vis[px] = if tau == i {
                    true
                } else {
                    point_visible(spec, &intr, tau, &world_at(spec, hit, tau))
                };
            }
            row_d.push(field);
            row_v.push(vis);
        }
        displacements.push(row_d);
        visibility.push(row_v);
    }

    Ok(GroundTruthBundle {
        intrinsics: intr,
        frames,
        depths,
        poses: spec.camera_path.poses.clone(),
        displacements,
        visibility,
        dynamic_mask,
        frame_ids: (0..n).collect(),
        scale: 1.0,
    })
}

impl GroundTruthBundle {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn timestamp(&self, i: usize) -> Timestamp {
        Timestamp::new(i, self.num_frames())
    }

    pub fn displacement(&self, i: usize, tau: usize) -> &DisplacementField {
        &self.displacements[i][tau]
    }

    /// Base geometry of frame `i` in world coordinates.
    pub fn base_pointmap(&self, i: usize) -> PointMap {
        unproject(&self.depths[i], &self.intrinsics, &self.poses[i])
            .expect("bundle depth matches intrinsics")
    }

    pub fn base_pointmaps(&self) -> Vec<PointMap> {
        (0..self.num_frames()).map(|i| self.base_pointmap(i)).collect()
    }

    /// Multiplies every length (depths, camera centers, displacements) by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for d in &mut out.depths {
            for v in &mut d.values {
                *v *= s;
            }
        }
        for p in &mut out.poses {
            p.translation *= s;
        }
        for row in &mut out.displacements {
            for f in row {
                for d in &mut f.deltas {
                    *d *= s;
                }
            }
        }
        out.scale *= s;
        out
    }

    /// Rescales so the mean norm of all valid base points is 1. Returns the
    /// normalized bundle and the applied factor.
    pub fn normalized(&self) -> Result<(Self, f64)> {
        let maps = self.base_pointmaps();
        let s = crate::geometry::normalization_scale(maps.iter())?;
        Ok((self.scaled(s), s))
    }

    /// Expresses everything in the coordinate frame of camera `frame`.
    pub fn recentered_on(&self, frame: usize) -> Self {
        let t = self.poses[frame].inverse();
        let mut out = self.clone();
        for p in &mut out.poses {
            *p = t.compose(p);
        }
        for row in &mut out.displacements {
            for f in row {
                for d in &mut f.deltas {
                    *d = t.rotation * *d;
                }
            }
        }
        out
    }

    /// Keeps the listed frames (in the given order) and re-indexes
    /// timestamps. World frame is not changed.
    pub fn select_frames(&self, indices: &[usize]) -> Result<Self> {
        let n = self.num_frames();
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
        }
        let m = indices.len();
        let displacements = indices
            .iter()
            .enumerate()
            .map(|(a, &i)| {
                indices
                    .iter()
                    .enumerate()
                    .map(|(b, &tau)| {
                        let mut f = self.displacements[i][tau].clone();
                        f.source = Timestamp::new(a, m);
                        f.target = Timestamp::new(b, m);
                        f
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            intrinsics: self.intrinsics,
            frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
            depths: indices.iter().map(|&i| self.depths[i].clone()).collect(),
            poses: indices.iter().map(|&i| self.poses[i]).collect(),
            displacements,
            visibility: indices
                .iter()
                .map(|&i| indices.iter().map(|&tau| self.visibility[i][tau].clone()).collect())
                .collect(),
            dynamic_mask: indices.iter().map(|&i| self.dynamic_mask[i].clone()).collect(),
            frame_ids: indices.iter().map(|&i| self.frame_ids[i]).collect(),
            scale: self.scale,
        })
    }
}

/// Indices `start, start + stride, ...` of a clip.
pub fn clip_indices(available: usize, len: usize, stride: usize, start: usize) -> Result<Vec<usize>> {
    let stride = stride.max(1);
    if len == 0 || start + (len - 1) * stride >= available {
        return Err(Error::InsufficientFrames {
            requested: len,
            stride,
            available,
        });
    }
    Ok((0..len).map(|k| start + k * stride).collect())
}

/// Samples a clip of `len` frames with a random stride in `[1, max_stride]`
/// (capped at what the bundle allows) and a random start, then re-centers the
/// world frame on the clip's first camera.
pub fn sample_clip(bundle: &GroundTruthBundle, seed: u64, len: usize, max_stride: usize) -> Result<GroundTruthBundle> {
    let n = bundle.num_frames();
    if len == 0 || len > n {
        return Err(Error::InsufficientFrames {
            requested: len,
            stride: 1,
            available: n,
        });
    }
    let mut rng = rng::stream(seed, streams::CLIP);
    let feasible = if len > 1 { (n - 1) / (len - 1) } else { max_stride };
    let stride = rng.gen_range(1..=max_stride.max(1).min(feasible.max(1)));
    let span = (len - 1) * stride;
    let start = rng.gen_range(0..=(n - 1 - span));
    let idx = clip_indices(n, len, stride, start)?;
    Ok(bundle.select_frames(&idx)?.recentered_on(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub blur_probability: f64,
    pub jitter_probability: f64,
    pub grayscale_probability: f64,
    pub blur_sigma: (f64, f64),
    /// Brightness/contrast/saturation factors are drawn from `1 ± jitter_strength`.
    pub jitter_strength: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            blur_probability: 0.2,
            jitter_probability: 0.1,
            grayscale_probability: 0.05,
            blur_sigma: (0.1, 2.0),
            jitter_strength: 0.4,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            blur_probability: 0.0,
            jitter_probability: 0.0,
            grayscale_probability: 0.0,
            ..Self::default()
        }
    }
}

fn luminance(p: &[f32]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f32> = {
        let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let s: f64 = k.iter().sum();
        k.iter().map(|v| (v / s) as f32).collect()
    };
    let (w, h) = (img.width as isize, img.height as isize);
    let clamp = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;
    let mut tmp = RgbImage::new(img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let xx = clamp(x + j as isize - r, w);
                    acc += kv * img.data[(y as usize * img.width + xx) * 3 + c];
                }
                tmp.data[(y as usize * img.width + x as usize) * 3 + c] = acc;
            }
        }
    }
    let mut out = RgbImage::new(img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let yy = clamp(y + j as isize - r, h);
                    acc += kv * tmp.data[(yy * img.width + x as usize) * 3 + c];
                }
                out.data[(y as usize * img.width + x as usize) * 3 + c] = acc;
            }
        }
    }
    out
}

/// Photometric augmentation of a clip; each augmentation is decided once per
/// clip so all frames receive the same treatment. Geometry is untouched.
pub fn augment(frames: &[RgbImage], seed: u64, cfg: &AugmentConfig) -> Vec<RgbImage> {
    let mut rng = rng::stream(seed, streams::AUGMENT);
    let blur = rng.gen_bool(cfg.blur_probability.clamp(0.0, 1.0));
    let sigma = random_range_f64(&mut rng, cfg.blur_sigma);
    let jitter = rng.gen_bool(cfg.jitter_probability.clamp(0.0, 1.0));
    let s = cfg.jitter_strength.clamp(0.0, 1.0);
    let mut factor = || if s > 0.0 { rng.gen_range(1.0 - s..1.0 + s) as f32 } else { 1.0 };
    let (brightness, contrast, saturation) = (factor(), factor(), factor());
    let gray = rng.gen_bool(cfg.grayscale_probability.clamp(0.0, 1.0));

    frames
        .iter()
        .map(|img| {
            let mut out = if blur { gaussian_blur(img, sigma) } else { img.clone() };
            if jitter {
                let n = (out.data.len() / 3) as f32;
                let mean = out.data.chunks_exact(3).map(luminance).sum::<f32>() / n;
                for p in out.data.chunks_exact_mut(3) {
                    for c in p.iter_mut() {
                        *c *= brightness;
                    }
                    for c in p.iter_mut() {
                        *c = (*c - mean) * contrast + mean;
                    }
                    let l = luminance(p);
                    for c in p.iter_mut() {
                        *c = (*c - l) * saturation + l;
                    }
                }
            }
            if gray {
                for p in out.data.chunks_exact_mut(3) {
                    let l = luminance(p);
                    p.fill(l);
                }
            }
            for v in &mut out.data {
                *v = v.clamp(0.0, 1.0);
            }
            out
        })
        .collect()
}
