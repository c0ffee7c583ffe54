//! Depth targets for distillation: per-image standardization, teacher
//! sources and the analytic teacher for synthetic scenes.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::io::pfm;
use crate::tensor::{Shape, Tensor};

/// Standard deviations at or below this count as a constant map.
const CONSTANT_STD: f64 = 1e-12;

/// A single-channel `1×1×H×W` depth map.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub values: Tensor,
    pub normalized: bool,
}

impl DepthMap {
    pub fn raw(values: Tensor) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn normalize(&self) -> Self {
        Self {
            values: normalize(&self.values),
            normalized: true,
        }
    }
}

/// Standardizes every batch item to zero mean and unit standard deviation.
/// Constant items become all zeros.
pub fn normalize(t: &Tensor) -> Tensor {
    let s = t.shape();
    let per = s.c * s.plane();
    let mut out = t.clone();
    for chunk in out.data_mut().chunks_mut(per.max(1)) {
        let n = chunk.len() as f64;
        let mean = chunk.iter().sum::<f64>() / n;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        for v in chunk.iter_mut() {
            *v = if std > CONSTANT_STD && std.is_finite() {
                (*v - mean) / std
            } else {
                0.0
            };
        }
    }
    out
}

/// Where depth targets come from for samples without attached depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TeacherSource {
    /// One `<stem>.pfm` per image.
    PrecomputedDir { path: PathBuf },
    /// Vertical ramp from `near` (top row) to `far` (bottom row).
    Synthetic { near: f64, far: f64 },
}

impl Default for TeacherSource {
    fn default() -> Self {
        Self::Synthetic { near: 1.0, far: 2.0 }
    }
}

/// Normalized teacher depth for `sample_id`, resized to `size`.
pub fn teacher_depth(sample_id: &str, source: &TeacherSource, size: (usize, usize)) -> Result<DepthMap> {
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("depth size {h}×{w} is empty")));
    }
    let raw = match source {
        TeacherSource::PrecomputedDir { path } => {
            let file = path.join(format!("{sample_id}.pfm"));
            if !file.is_file() {
                return Err(Error::MissingDepth {
                    id: sample_id.to_string(),
                    expected: file,
                });
            }
            pfm::read(&file)?.resize_bilinear(h, w)
        }
        TeacherSource::Synthetic { near, far } => ramp(Shape::new(1, 1, h, w), *near, *far),
    };
    if !raw.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "teacher depth for `{sample_id}` is not finite"
        )));
    }
    Ok(DepthMap::raw(raw).normalize())
}

fn ramp(shape: Shape, near: f64, far: f64) -> Tensor {
    let denom = (shape.h.max(2) - 1) as f64;
    Tensor::from_fn(shape, |_, _, y, _| near + (far - near) * y as f64 / denom)
}

/// Analytic depth of a synthetic scene: constant `d_fg` on the foreground,
/// a vertical ramp from `d_bg_near` to `d_bg_far` elsewhere. Not normalized.
pub fn synthetic_teacher(scene: &SceneSpec) -> DepthMap {
    let (h, w) = scene.size;
    let bg = ramp(Shape::new(1, 1, h, w), scene.depth.d_bg_near, scene.depth.d_bg_far);
    let mask = scene.rasterize_mask();
    let values = bg
        .zip_map(&mask, |b, m| if m == 1.0 { scene.depth.d_fg } else { b })
        .expect("mask has the canvas shape");
    DepthMap::raw(values)
}

/// Depth of field `2·N·C·D²/f²` for f-number `n`, circle of confusion `c`,
/// subject distance `d` and focal length `f`, all in consistent units.
pub fn dof(n: f64, c: f64, d: f64, f: f64) -> Result<f64> {
    for (name, v) in [("N", n), ("C", c), ("D", d), ("f", f)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(2.0 * n * c * d * d / (f * f))
}
