//! Per-crop image operations on CHW `f32` buffers: bilinear resize, small
//! rotations and horizontal flips.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::synth::CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Rotations are drawn uniformly from `[-rotation_degrees, rotation_degrees]`.
    pub rotation_degrees: f64,
    pub horizontal_flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_degrees: 10.0,
            horizontal_flip: true,
        }
    }
}

/// Bilinear sample of channel plane `plane` at `(y, x)` with edge clamping.
fn sample(plane: &[f32], size: usize, y: f64, x: f64) -> f32 {
    let max = (size - 1) as f64;
    let y = y.clamp(0.0, max);
    let x = x.clamp(0.0, max);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(size - 1);
    let x1 = (x0 + 1).min(size - 1);
    let fy = (y - y0 as f64) as f32;
    let fx = (x - x0 as f64) as f32;
    let top = plane[y0 * size + x0] * (1.0 - fx) + plane[y0 * size + x1] * fx;
    let bottom = plane[y1 * size + x0] * (1.0 - fx) + plane[y1 * size + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resizes a square CHW crop from `from` to `to` pixels per side.
pub fn resize(crop: &[f32], from: usize, to: usize) -> Vec<f32> {
    if from == to {
        return crop.to_vec();
    }
    let scale = from as f64 / to as f64;
    let mut out = Vec::with_capacity(CHANNELS * to * to);
    for plane in crop.chunks_exact(from * from) {
        for r in 0..to {
            for c in 0..to {
                // Pixel-centre alignment.
                let y = (r as f64 + 0.5) * scale - 0.5;
                let x = (c as f64 + 0.5) * scale - 0.5;
                out.push(sample(plane, from, y, x));
            }
        }
    }
    out
}

/// Rotates a square CHW crop by `degrees` about its centre, optionally
/// mirroring it left to right. Pixels mapped from outside take the nearest
/// edge value.
pub fn rotate_flip(crop: &[f32], size: usize, degrees: f64, flip: bool) -> Vec<f32> {
    if degrees == 0.0 && !flip {
        return crop.to_vec();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let mid = (size as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(crop.len());
    for plane in crop.chunks_exact(size * size) {
        for r in 0..size {
            for col in 0..size {
                let col = if flip { size - 1 - col } else { col };
                let dy = r as f64 - mid;
                let dx = col as f64 - mid;
                // Inverse rotation of the output coordinate.
                let y = c * dy - s * dx + mid;
                let x = s * dy + c * dx + mid;
                out.push(sample(plane, size, y, x));
            }
        }
    }
    out
}

/// Random rotation and flip drawn from `cfg`.
pub fn augment<R: Rng + ?Sized>(crop: &[f32], size: usize, cfg: &AugmentConfig, rng: &mut R) -> Vec<f32> {
    let degrees = if cfg.rotation_degrees > 0.0 {
        rng.random_range(-cfg.rotation_degrees..=cfg.rotation_degrees)
    } else {
        0.0
    };
    let flip = cfg.horizontal_flip && rng.random_bool(0.5);
    rotate_flip(crop, size, degrees, flip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(size: usize) -> Vec<f32> {
        (0..CHANNELS * size * size).map(|i| (i % (size * size)) as f32).collect()
    }

    #[test]
    fn identity_cases() {
        let x = ramp(5);
        assert_eq!(resize(&x, 5, 5), x);
        assert_eq!(rotate_flip(&x, 5, 0.0, false), x);
        let full = rotate_flip(&x, 5, 360.0, false);
        for (a, b) in full.iter().zip(&x) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn flip_mirrors_columns() {
        let x = ramp(4);
        let f = rotate_flip(&x, 4, 0.0, true);
        assert_eq!(&f[0..4], &[3.0, 2.0, 1.0, 0.0]);
        assert_eq!(rotate_flip(&f, 4, 0.0, true), x);
    }

    #[test]
    fn quarter_turn_moves_corners() {
        let mut x = vec![0.0f32; CHANNELS * 9];
        x[0] = 1.0; // top-left of channel 0
        let r = rotate_flip(&x, 3, 90.0, false);
        assert!((r[2] - 1.0).abs() < 1e-5, "{:?}", &r[..9]);
        assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn resize_preserves_constants_and_shape() {
        let x = vec![0.25f32; CHANNELS * 16 * 16];
        let y = resize(&x, 16, 24);
        assert_eq!(y.len(), CHANNELS * 24 * 24);
        assert!(y.iter().all(|&v| (v - 0.25).abs() < 1e-6));
        assert_eq!(resize(&x, 16, 8).len(), CHANNELS * 64);
    }
}
