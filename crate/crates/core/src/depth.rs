//! Blur-cue providers: precomputed depth files, a synthetic smooth field for
//! tests, and an external depth tool.
//!
//! Every provider returns a foreground-high [`SaliencyMask`]: larger values
//! are nearer and in focus (the disparity convention).

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{load_gray, GrayMap};
use crate::imaging::SaliencyMask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Stretch the map's own range to `[0, 1]`.
    #[default]
    Minmax,
    /// Divide by the full-scale value of the file's bit depth.
    FixedRange,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Larger stored values are nearer.
    #[default]
    Disparity,
    /// Larger stored values are farther; inverted on load.
    Depth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DepthKind {
    PrecomputedFile,
    SyntheticGradient,
    /// Invoked as `<program> <input_image> <output_depth>`.
    ExternalCommand { program: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSource {
    #[serde(flatten)]
    pub kind: DepthKind,
    pub normalization: Normalization,
    pub convention: Convention,
}

impl Default for DepthSource {
    fn default() -> Self {
        Self { kind: DepthKind::PrecomputedFile, normalization: Normalization::Minmax, convention: Convention::Disparity }
    }
}

/// Half-pixel-centred bilinear resampling of a row-major map.
pub fn resize_bilinear(data: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    if (h, w) == (th, tw) {
        return data.to_vec();
    }
    let coord = |i: usize, src: usize, dst: usize| {
        let s = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..tw).map(|x| coord(x, w, tw)).collect();
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let (y0, y1, fy) = coord(y, h, th);
        for &(x0, x1, fx) in &xs {
            let top = data[y0 * w + x0] * (1.0 - fx) + data[y0 * w + x1] * fx;
            let bot = data[y1 * w + x0] * (1.0 - fx) + data[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Stretches to `[0, 1]`. Fails on constant maps.
pub fn minmax(data: &[f64], what: &dyn std::fmt::Display) -> Result<Vec<f64>> {
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return Err(Error::Data(format!(
            "depth map {what} is constant ({lo}); min-max normalization is undefined. \
             Regenerate the map, or use fixed_range normalization to accept a flat cue"
        )));
    }
    Ok(data.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect())
}

impl DepthSource {
    fn finish(&self, map: GrayMap, target: (usize, usize), what: &dyn std::fmt::Display) -> Result<SaliencyMask> {
        let (th, tw) = target;
        if th == 0 || tw == 0 {
            return Err(Error::Shape("target dims must be positive".into()));
        }
        let resized = resize_bilinear(&map.data, map.height, map.width, th, tw);
        let mut data = match self.normalization {
            Normalization::Minmax => minmax(&resized, what)?,
            Normalization::FixedRange => resized.iter().map(|v| (v / map.full_scale).clamp(0.0, 1.0)).collect(),
        };
        if self.convention == Convention::Depth {
            data.iter_mut().for_each(|v| *v = 1.0 - *v);
        }
        SaliencyMask::new(th, tw, data)
    }

    /// Reads a single-channel file and resizes it to `target` (height, width).
    pub fn load(&self, path: &Path, target: (usize, usize)) -> Result<SaliencyMask> {
        self.finish(load_gray(path)?, target, &path.display())
    }

    /// Produces a mask for `image_path`. `depth_out` is where an external
    /// tool writes its result; `seed` drives the synthetic kind.
    pub fn produce(&self, image_path: &Path, target: (usize, usize), depth_out: &Path, seed: u64) -> Result<SaliencyMask> {
        match &self.kind {
            DepthKind::PrecomputedFile => Err(Error::Config(
                "precomputed_file depth needs an explicit depth path for every image".into(),
            )),
            DepthKind::SyntheticGradient => synthetic_depth(target, seed),
            DepthKind::ExternalCommand { program } => {
                let status = Command::new(program)
                    .arg(image_path)
                    .arg(depth_out)
                    .status()
                    .map_err(|e| Error::Config(format!("cannot run depth tool {}: {e}", program.display())))?;
                if !status.success() {
                    return Err(Error::Data(format!("depth tool {} failed with {status}", program.display())));
                }
                self.load(depth_out, target)
            }
        }
    }
}

/// Loads with the default source: min-max normalized, disparity convention.
pub fn load_depth(path: &Path, target: (usize, usize)) -> Result<SaliencyMask> {
    DepthSource::default().load(path, target)
}

/// Smooth random field: a vertical ramp (nearer towards the bottom) plus a few
/// low-frequency cosine waves, min-max normalized.
pub fn synthetic_depth(dims: (usize, usize), seed: u64) -> Result<SaliencyMask> {
    let (h, w) = dims;
    if h < 8 || w < 8 {
        return Err(Error::DimensionTooSmall(format!("synthetic depth needs at least 8x8, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let fy = rng.random_range(0.5..2.0);
            let fx = rng.random_range(0.5..2.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.2..0.5);
            (fy, fx, phase, amp)
        })
        .collect();
    let data: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / (h - 1) as f64, (i % w) as f64 / (w - 1) as f64);
            y + waves.iter().map(|&(fy, fx, p, a)| a * (2.0 * PI * (fy * y + fx * x) + p).cos()).sum::<f64>()
        })
        .collect();
    SaliencyMask::new(h, w, minmax(&data, &"synthetic")?)
}
