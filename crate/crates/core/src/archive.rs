//! Directory-based tensor archives.
//!
//! An archive is a directory holding `manifest.json` and one raw blob per
//! array, `<name>.bin`, row-major and little-endian. Element types are
//! `f32`, `f64`, `i32`, `u8` and `bool` (stored as one byte, 0 or 1).
//!
//! ```text
//! {
//!   "schema_version": 1,
//!   "byte_order": "little",
//!   "arrays": [{"name": "depth", "dtype": "f64", "shape": [6, 64, 64], "file": "depth.bin"}, ...],
//!   "rng_states": {...},
//!   "config": {...},
//!   "meta": {...}
//! }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{quat_from_wxyz, CameraIntrinsics, CameraPose, DepthMap, Vec3};
use crate::representation::{DisplacementField, Timestamp};
use crate::scenegen::{GroundTruthBundle, RgbImage};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I32,
    U8,
    Bool,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::U8 | DType::Bool => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    U8(Vec<u8>),
    Bool(Vec<bool>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
            ArrayData::I32(_) => DType::I32,
            ArrayData::U8(_) => DType::U8,
            ArrayData::Bool(_) => DType::Bool,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
            ArrayData::Bool(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U8(v) => v.clone(),
            ArrayData::Bool(v) => v.iter().map(|b| *b as u8).collect(),
        }
    }

    fn from_bytes(dtype: DType, bytes: &[u8]) -> Result<Self> {
        Ok(match dtype {
            DType::F32 => ArrayData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::F64 => ArrayData::F64(
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::I32 => ArrayData::I32(
                bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::U8 => ArrayData::U8(bytes.to_vec()),
            DType::Bool => ArrayData::Bool(
                bytes
                    .iter()
                    .map(|b| match b {
                        0 => Ok(false),
                        1 => Ok(true),
                        other => Err(Error::Archive(format!("invalid bool byte {other}"))),
                    })
                    .collect::<Result<_>>()?,
            ),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{shape:?} ({n} elements)"),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, v: Vec<f32>) -> Result<Self> {
        Self::new(shape, ArrayData::F32(v))
    }

    pub fn f64(shape: Vec<usize>, v: Vec<f64>) -> Result<Self> {
        Self::new(shape, ArrayData::F64(v))
    }

    pub fn i32(shape: Vec<usize>, v: Vec<i32>) -> Result<Self> {
        Self::new(shape, ArrayData::I32(v))
    }

    pub fn bool(shape: Vec<usize>, v: Vec<bool>) -> Result<Self> {
        Self::new(shape, ArrayData::Bool(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub byte_order: String,
    pub arrays: Vec<ArrayEntry>,
    #[serde(default)]
    pub rng_states: BTreeMap<String, Value>,
    #[serde(default)]
    pub config: Value,
    #[serde(default)]
    pub meta: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    pub arrays: BTreeMap<String, Array>,
    pub rng_states: BTreeMap<String, Value>,
    pub config: Value,
    pub meta: BTreeMap<String, Value>,
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name != "manifest"
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
        && !name.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Archive(format!("invalid array name '{name}'")))
    }
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, array: Array) -> Result<()> {
        check_name(name)?;
        self.arrays.insert(name.to_string(), array);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing array '{name}'")))
    }

    pub fn get_f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        match self.get(name)? {
            Array { shape, data: ArrayData::F32(v) } => Ok((shape, v)),
            a => Err(type_error(name, DType::F32, a.data.dtype())),
        }
    }

    pub fn get_f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name)? {
            Array { shape, data: ArrayData::F64(v) } => Ok((shape, v)),
            a => Err(type_error(name, DType::F64, a.data.dtype())),
        }
    }

    pub fn get_i32(&self, name: &str) -> Result<(&[usize], &[i32])> {
        match self.get(name)? {
            Array { shape, data: ArrayData::I32(v) } => Ok((shape, v)),
            a => Err(type_error(name, DType::I32, a.data.dtype())),
        }
    }

    pub fn get_bool(&self, name: &str) -> Result<(&[usize], &[bool])> {
        match self.get(name)? {
            Array { shape, data: ArrayData::Bool(v) } => Ok((shape, v)),
            a => Err(type_error(name, DType::Bool, a.data.dtype())),
        }
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            schema_version: SCHEMA_VERSION,
            byte_order: "little".into(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, a)| ArrayEntry {
                    name: name.clone(),
                    dtype: a.data.dtype(),
                    shape: a.shape.clone(),
                    file: format!("{name}.bin"),
                })
                .collect(),
            rng_states: self.rng_states.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
        }
    }

    /// Writes into `dir`, creating it if needed. Existing files with the
    /// same names are overwritten.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = self.manifest();
        for entry in &manifest.arrays {
            fs::write(dir.join(&entry.file), self.arrays[&entry.name].data.to_bytes())?;
        }
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fs::write(dir.join(MANIFEST), json)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Archive(format!(
                "schema version {} unsupported (expected {SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        if manifest.byte_order != "little" {
            return Err(Error::Archive(format!("byte order '{}' unsupported", manifest.byte_order)));
        }
        let mut arrays = BTreeMap::new();
        for entry in &manifest.arrays {
            check_name(&entry.name)?;
            if entry.file != format!("{}.bin", entry.name) {
                return Err(Error::Archive(format!("unexpected file name '{}'", entry.file)));
            }
            let bytes = fs::read(dir.join(&entry.file))?;
            let n: usize = entry.shape.iter().product();
            if bytes.len() != n * entry.dtype.size() {
                return Err(Error::Archive(format!(
                    "array '{}' has {} bytes, expected {}",
                    entry.name,
                    bytes.len(),
                    n * entry.dtype.size()
                )));
            }
            let data = ArrayData::from_bytes(entry.dtype, &bytes)?;
            if arrays.insert(entry.name.clone(), Array::new(entry.shape.clone(), data)?).is_some() {
                return Err(Error::Archive(format!("duplicate array '{}'", entry.name)));
            }
        }
        Ok(Self {
            arrays,
            rng_states: manifest.rng_states,
            config: manifest.config,
            meta: manifest.meta,
        })
    }
}

fn type_error(name: &str, want: DType, got: DType) -> Error {
    Error::Archive(format!("array '{name}' has dtype {got:?}, expected {want:?}"))
}

fn expect_shape(name: &str, shape: &[usize], want: &[usize]) -> Result<()> {
    if shape != want {
        return Err(Error::ShapeMismatch {
            expected: format!("{name} {want:?}"),
            actual: format!("{shape:?}"),
        });
    }
    Ok(())
}

/// Flattens a pose to `[w, x, y, z, tx, ty, tz]`.
pub fn pose_to_array(p: &CameraPose) -> [f64; 7] {
    let q = p.rotation.quaternion();
    [q.w, q.i, q.j, q.k, p.translation.x, p.translation.y, p.translation.z]
}

pub fn pose_from_array(a: &[f64]) -> CameraPose {
    // Stored quaternions are already unit length; skip renormalization so
    // the round trip is exact.
    let q = nalgebra::Quaternion::new(a[0], a[1], a[2], a[3]);
    let rotation = if (q.norm() - 1.0).abs() < 1e-12 {
        UnitQuaternion::new_unchecked(q)
    } else {
        quat_from_wxyz([a[0], a[1], a[2], a[3]])
    };
    CameraPose::new(rotation, Vec3::new(a[4], a[5], a[6]))
}

fn vec3s(v: &[Vec3]) -> impl Iterator<Item = f64> + '_ {
    v.iter().flat_map(|p| [p.x, p.y, p.z])
}

/// Stores a ground-truth bundle. Real-valued geometry is kept in `f64`
/// so the conversion is lossless; images are `f32`.
pub fn bundle_to_archive(b: &GroundTruthBundle) -> Result<TensorArchive> {
    let (n, h, w) = (b.num_frames(), b.height(), b.width());
    let mut a = TensorArchive::new();
    a.insert(
        "intrinsics",
        Array::f64(
            vec![3],
            vec![
                b.intrinsics.vertical_fov,
                b.intrinsics.principal_point.0,
                b.intrinsics.principal_point.1,
            ],
        )?,
    )?;
    a.insert("frames", Array::f32(vec![n, h, w, 3], b.frames.iter().flat_map(|f| f.data.iter().copied()).collect())?)?;
    a.insert("depth", Array::f64(vec![n, h, w], b.depths.iter().flat_map(|d| d.values.iter().copied()).collect())?)?;
    a.insert("depth_valid", Array::bool(vec![n, h, w], b.depths.iter().flat_map(|d| d.valid.iter().copied()).collect())?)?;
    a.insert("poses", Array::f64(vec![n, 7], b.poses.iter().flat_map(pose_to_array).collect())?)?;
    let fields = b.displacements.iter().flatten();
    a.insert(
        "displacement",
        Array::f64(vec![n, n, h, w, 3], fields.clone().flat_map(|f| vec3s(&f.deltas)).collect())?,
    )?;
    a.insert(
        "displacement_valid",
        Array::bool(vec![n, n, h, w], fields.flat_map(|f| f.valid.iter().copied()).collect())?,
    )?;
    a.insert(
        "visibility",
        Array::bool(vec![n, n, h, w], b.visibility.iter().flatten().flatten().copied().collect())?,
    )?;
    a.insert("dynamic_mask", Array::bool(vec![n, h, w], b.dynamic_mask.iter().flatten().copied().collect())?)?;
    a.insert("frame_ids", Array::i32(vec![n], b.frame_ids.iter().map(|&i| i as i32).collect())?)?;
    a.insert("scale", Array::f64(vec![1], vec![b.scale])?)?;
    Ok(a)
}

pub fn bundle_from_archive(a: &TensorArchive) -> Result<GroundTruthBundle> {
    let (shape, frames) = a.get_f32("frames")?;
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::ShapeMismatch {
            expected: "frames [N, H, W, 3]".into(),
            actual: format!("{shape:?}"),
        });
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let (s, intr) = a.get_f64("intrinsics")?;
    expect_shape("intrinsics", s, &[3])?;
    let intrinsics = CameraIntrinsics::new(w, h, intr[0])?.with_principal_point(intr[1], intr[2])?;

    let (s, depth) = a.get_f64("depth")?;
    expect_shape("depth", s, &[n, h, w])?;
    let (s, depth_valid) = a.get_bool("depth_valid")?;
    expect_shape("depth_valid", s, &[n, h, w])?;
    let (s, poses) = a.get_f64("poses")?;
    expect_shape("poses", s, &[n, 7])?;
    let (s, disp) = a.get_f64("displacement")?;
    expect_shape("displacement", s, &[n, n, h, w, 3])?;
    let (s, disp_valid) = a.get_bool("displacement_valid")?;
    expect_shape("displacement_valid", s, &[n, n, h, w])?;
    let (s, vis) = a.get_bool("visibility")?;
    expect_shape("visibility", s, &[n, n, h, w])?;
    let (s, dynm) = a.get_bool("dynamic_mask")?;
    expect_shape("dynamic_mask", s, &[n, h, w])?;
    let (s, ids) = a.get_i32("frame_ids")?;
    expect_shape("frame_ids", s, &[n])?;
    let (s, scale) = a.get_f64("scale")?;
    expect_shape("scale", s, &[1])?;

    let mut displacements = Vec::with_capacity(n);
    let mut visibility = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(n);
        let mut vrow = Vec::with_capacity(n);
        for tau in 0..n {
            let k = i * n + tau;
            let d = &disp[k * hw * 3..(k + 1) * hw * 3];
            row.push(DisplacementField {
                width: w,
                height: h,
                deltas: d.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
                valid: disp_valid[k * hw..(k + 1) * hw].to_vec(),
                source: Timestamp::new(i, n),
                target: Timestamp::new(tau, n),
            });
            vrow.push(vis[k * hw..(k + 1) * hw].to_vec());
        }
        displacements.push(row);
        visibility.push(vrow);
    }
    Ok(GroundTruthBundle {
        intrinsics,
        frames: (0..n)
            .map(|i| RgbImage {
                width: w,
                height: h,
                data: frames[i * hw * 3..(i + 1) * hw * 3].to_vec(),
            })
            .collect(),
        depths: (0..n)
            .map(|i| DepthMap::new(w, h, depth[i * hw..(i + 1) * hw].to_vec(), depth_valid[i * hw..(i + 1) * hw].to_vec()))
            .collect::<Result<_>>()?,
        poses: poses.chunks_exact(7).map(pose_from_array).collect(),
        displacements,
        visibility,
        dynamic_mask: (0..n).map(|i| dynm[i * hw..(i + 1) * hw].to_vec()).collect(),
        frame_ids: ids
            .iter()
            .map(|&i| usize::try_from(i).map_err(|_| Error::Archive(format!("negative frame id {i}"))))
            .collect::<Result<_>>()?,
        scale: scale[0],
    })
}
