//! Base geometry plus per-target displacement fields.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{PointMap, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Timestamp {
    pub frame_index: usize,
    pub num_frames: usize,
}

impl Timestamp {
    pub fn new(frame_index: usize, num_frames: usize) -> Self {
        assert!(
            frame_index < num_frames,
            "frame {frame_index} out of range for {num_frames} frames"
        );
        Self {
            frame_index,
            num_frames,
        }
    }

    /// `frame_index / max(N - 1, 1)`.
    pub fn normalized_time(&self) -> f64 {
        self.frame_index as f64 / (self.num_frames.saturating_sub(1)).max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub width: usize,
    pub height: usize,
    pub deltas: Vec<Vec3>,
    pub valid: Vec<bool>,
    pub source: Timestamp,
    pub target: Timestamp,
}

impl DisplacementField {
    pub fn zeros(width: usize, height: usize, valid: Vec<bool>, source: Timestamp, target: Timestamp) -> Self {
        Self {
            width,
            height,
            deltas: vec![Vec3::zeros(); width * height],
            valid,
            source,
            target,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Option<Vec3> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.deltas[i])
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.deltas.iter().map(|d| d.norm()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedFrame4D {
    pub source: Timestamp,
    pub base: PointMap,
    /// Keyed by target frame index.
    pub displacements: BTreeMap<usize, DisplacementField>,
}

impl FactorizedFrame4D {
    pub fn new(source: Timestamp, base: PointMap) -> Self {
        Self {
            source,
            base,
            displacements: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, field: DisplacementField) -> Result<()> {
        if field.width != self.base.width || field.height != self.base.height {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.base.height, self.base.width),
                actual: format!("{}x{}", field.height, field.width),
            });
        }
        if field.source != self.source {
            return Err(Error::ShapeMismatch {
                expected: format!("source frame {}", self.source.frame_index),
                actual: format!("source frame {}", field.source.frame_index),
            });
        }
        self.displacements.insert(field.target.frame_index, field);
        Ok(())
    }

    pub fn displacement(&self, target: Timestamp) -> Option<&DisplacementField> {
        self.displacements.get(&target.frame_index)
    }

    /// Pointmap of the source pixels at `target` time: base + displacement,
    /// valid where both are valid. A missing self-displacement is treated as
    /// zero.
    pub fn compose(&self, target: Timestamp) -> Result<PointMap> {
        let Some(field) = self.displacement(target) else {
            if target.frame_index == self.source.frame_index {
                return Ok(self.base.clone());
            }
            return Err(Error::MissingTimestamp(target.frame_index));
        };
        let points = self
            .base
            .points
            .iter()
            .zip(&field.deltas)
            .map(|(p, d)| p + d)
            .collect();
        let valid = self
            .base
            .valid
            .iter()
            .zip(&field.valid)
            .map(|(a, b)| *a && *b)
            .collect();
        Ok(PointMap {
            width: self.base.width,
            height: self.base.height,
            points,
            valid,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub source_pixel: (usize, usize),
    pub positions: Vec<(Timestamp, Vec3)>,
    pub visibility: Option<Vec<bool>>,
}

/// Follows one source pixel through the requested targets. The source
/// position is always first; remaining targets follow in timestamp order.
pub fn extract_trajectory(
    frames: &[FactorizedFrame4D],
    source: Timestamp,
    pixel: (usize, usize),
    targets: &[Timestamp],
) -> Result<Trajectory> {
    let frame = frames
        .iter()
        .find(|f| f.source.frame_index == source.frame_index)
        .ok_or(Error::MissingTimestamp(source.frame_index))?;
    let (x, y) = pixel;
    if x >= frame.base.width || y >= frame.base.height {
        return Err(Error::InvalidPixel(x, y));
    }
    let base = frame.base.get(x, y).ok_or(Error::InvalidPixel(x, y))?;

    let mut ordered: Vec<Timestamp> = targets
        .iter()
        .copied()
        .filter(|t| t.frame_index != source.frame_index)
        .collect();
    ordered.sort();
    ordered.dedup();

    let mut positions = vec![(source, base)];
    for t in ordered {
        let field = frame
            .displacement(t)
            .ok_or(Error::MissingTimestamp(t.frame_index))?;
        let i = y * field.width + x;
        positions.push((t, base + field.deltas[i]));
    }
    Ok(Trajectory {
        source_pixel: pixel,
        positions,
        visibility: None,
    })
}
