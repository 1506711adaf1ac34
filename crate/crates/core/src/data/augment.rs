use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SkeletonSequence;
use crate::error::{Error, Result};

/// Augmentation pipeline settings. A `None` component is disabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Temporal crop ratio range `[lo, hi]` within `(0, 1]`.
    pub crop_ratio: Option<[f64; 2]>,
    /// Maximum absolute rotation angle per axis, radians.
    pub rotation: Option<f64>,
    /// Maximum absolute off-diagonal shear coefficient.
    pub shear: Option<f64>,
    /// Gaussian joint jitter standard deviation, meters.
    pub jitter_sd: Option<f64>,
    /// Output sequence length.
    pub t_out: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_ratio: Some([0.5, 1.0]),
            rotation: Some(0.3),
            shear: Some(0.5),
            jitter_sd: Some(0.01),
            t_out: 64,
        }
    }
}

impl AugmentationConfig {
    /// All components disabled; only resampling to `t_out` remains.
    pub fn identity(t_out: usize) -> Self {
        Self {
            crop_ratio: None,
            rotation: None,
            shear: None,
            jitter_sd: None,
            t_out,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_out < 2 {
            return Err(Error::config(format!("t_out must be >= 2, got {}", self.t_out)));
        }
        if let Some([lo, hi]) = self.crop_ratio {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::config(format!("crop_ratio [{lo}, {hi}] outside (0, 1]")));
            }
        }
        for (name, v) in [("rotation", self.rotation), ("shear", self.shear), ("jitter_sd", self.jitter_sd)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::config(format!("{name} must be positive when enabled, got {v}")));
                }
            }
        }
        Ok(())
    }
}

/// Linearly resamples frames `start..start+len` of `coords` to `t_out` frames.
fn resample_window(coords: &Array3<f32>, start: usize, len: usize, t_out: usize) -> Array3<f32> {
    let (c, v, _) = coords.dim();
    let mut out = Array3::zeros((c, v, t_out));
    for i in 0..t_out {
        let pos = if len == 1 || t_out == 1 {
            0.0
        } else {
            (i * (len - 1)) as f64 / (t_out - 1) as f64
        };
        let lo = pos.floor() as usize;
        let frac = (pos - lo as f64) as f32;
        let a = start + lo;
        if frac == 0.0 || lo + 1 >= len {
            for ci in 0..c {
                for vi in 0..v {
                    out[[ci, vi, i]] = coords[[ci, vi, a]];
                }
            }
        } else {
            for ci in 0..c {
                for vi in 0..v {
                    let x0 = coords[[ci, vi, a]];
                    let x1 = coords[[ci, vi, a + 1]];
                    out[[ci, vi, i]] = x0 + (x1 - x0) * frac;
                }
            }
        }
    }
    out
}

/// Deterministic uniform resampling of the whole sequence to `t_out` frames.
pub fn resample_uniform(seq: &SkeletonSequence, t_out: usize) -> SkeletonSequence {
    let t = seq.n_frames();
    SkeletonSequence {
        coords: resample_window(&seq.coords, 0, t, t_out),
        ..seq.clone()
    }
}

fn rotation_matrix(ax: f64, ay: f64, az: f64) -> [[f64; 3]; 3] {
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    matmul3(&rz, &matmul3(&ry, &rx))
}

pub(crate) fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Applies a 3x3 linear map to every joint of every frame.
pub(crate) fn apply_linear(coords: &mut Array3<f32>, m: &[[f64; 3]; 3]) {
    let (_, v, t) = coords.dim();
    for vi in 0..v {
        for ti in 0..t {
            let p = [
                coords[[0, vi, ti]] as f64,
                coords[[1, vi, ti]] as f64,
                coords[[2, vi, ti]] as f64,
            ];
            for (r, row) in m.iter().enumerate() {
                coords[[r, vi, ti]] = (row[0] * p[0] + row[1] * p[1] + row[2] * p[2]) as f32;
            }
        }
    }
}

/// Random crop + resize, rotation, shear and jitter, in that order.
pub fn augment<R: Rng + ?Sized>(seq: &SkeletonSequence, cfg: &AugmentationConfig, rng: &mut R) -> SkeletonSequence {
    let t = seq.n_frames();
    let (start, len) = match cfg.crop_ratio {
        Some([lo, hi]) => {
            let ratio = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let len = ((ratio * t as f64).round() as usize).max(2).min(t);
            let start = rng.random_range(0..=t - len);
            (start, len)
        }
        None => (0, t),
    };
    let mut coords = resample_window(&seq.coords, start, len, cfg.t_out);

    if let Some(max) = cfg.rotation {
        let ax = rng.random_range(-max..=max);
        let ay = rng.random_range(-max..=max);
        let az = rng.random_range(-max..=max);
        apply_linear(&mut coords, &rotation_matrix(ax, ay, az));
    }
    if let Some(s) = cfg.shear {
        let mut m = [[1.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                if i != j {
                    *x = rng.random_range(-s..=s);
                }
            }
        }
        apply_linear(&mut coords, &m);
    }
    if let Some(sd) = cfg.jitter_sd {
        let normal = Normal::new(0.0f32, sd as f32).expect("validated jitter sd");
        coords.mapv_inplace(|x| x + normal.sample(rng));
    }

    SkeletonSequence {
        coords,
        ..seq.clone()
    }
}
