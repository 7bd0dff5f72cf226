//! Per-image normalization and paired flip/rotation augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::bilinear_at;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MIN_STD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Inclusive bounds in degrees.
    pub rotation_range_deg: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotation_range_deg: (-25.0, 25.0),
        }
    }
}

impl AugmentConfig {
    /// No flips, no rotation.
    pub fn disabled() -> Self {
        AugmentConfig {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotation_range_deg: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        let (lo, hi) = self.rotation_range_deg;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("rotation range ({lo}, {hi}) is not an interval")));
        }
        Ok(())
    }
}

/// The concrete transform drawn for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        hflip: false,
        vflip: false,
        angle_deg: 0.0,
    };

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let hflip = rng.random_bool(cfg.hflip_prob);
        let vflip = rng.random_bool(cfg.vflip_prob);
        let (lo, hi) = cfg.rotation_range_deg;
        let angle_deg = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        Transform { hflip, vflip, angle_deg }
    }
}

/// Per image and channel: subtract the mean, divide by `max(std, 1e-6)`.
pub fn normalize_image(image: &Tensor<f32>) -> Tensor<f32> {
    let mut out = image.clone();
    let [n, c, _, _] = image.shape().0;
    for i in 0..n {
        for ch in 0..c {
            let plane = out.plane_mut(i, ch);
            let len = plane.len().max(1) as f64;
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / len;
            let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / len;
            let std = var.sqrt().max(MIN_STD);
            for v in plane {
                *v = ((*v as f64 - mean) / std) as f32;
            }
        }
    }
    out
}

fn flip(t: &mut Tensor<f32>, horizontal: bool) {
    let w = t.shape().w();
    let [n, c, _, _] = t.shape().0;
    for i in 0..n {
        for ch in 0..c {
            let plane = t.plane_mut(i, ch);
            if horizontal {
                for row in plane.chunks_mut(w) {
                    row.reverse();
                }
            } else {
                let rows = plane.len() / w;
                for y in 0..rows / 2 {
                    let (top, bottom) = plane.split_at_mut((rows - 1 - y) * w);
                    top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
                }
            }
        }
    }
}

/// Rotates every plane by `angle_deg` counter-clockwise about the image
/// centre. Pixels whose source falls outside the image become 0.
fn rotate(t: &Tensor<f32>, angle_deg: f64, bilinear: bool) -> Tensor<f32> {
    let [n, c, h, w] = t.shape().0;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = Tensor::zeros(t.shape());
    for i in 0..n {
        for ch in 0..c {
            let src = t.plane(i, ch);
            let dst = out.plane_mut(i, ch);
            for y in 0..h {
                for x in 0..w {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    // Inverse map: rotate the output point back by -angle.
                    let sx = cos * dx - sin * dy + cx - 0.5;
                    let sy = sin * dx + cos * dy + cy - 0.5;
                    dst[y * w + x] = if bilinear {
                        sample_bilinear_zero(src, w, h, sx, sy)
                    } else {
                        let (ix, iy) = (sx.round(), sy.round());
                        if ix < 0.0 || iy < 0.0 || ix >= w as f64 || iy >= h as f64 {
                            0.0
                        } else {
                            src[iy as usize * w + ix as usize]
                        }
                    };
                }
            }
        }
    }
    out
}

/// Bilinear sample treating everything outside the grid as 0.
fn sample_bilinear_zero(src: &[f32], w: usize, h: usize, sx: f64, sy: f64) -> f32 {
    if sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64 {
        return bilinear_at(src, w, h, sx, sy) as f32;
    }
    let (x0, y0) = (sx.floor(), sy.floor());
    let (ax, ay) = (sx - x0, sy - y0);
    let px = |x: f64, y: f64| -> f64 {
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            0.0
        } else {
            src[y as usize * w + x as usize] as f64
        }
    };
    let v = (px(x0, y0) * (1.0 - ax) + px(x0 + 1.0, y0) * ax) * (1.0 - ay)
        + (px(x0, y0 + 1.0) * (1.0 - ax) + px(x0 + 1.0, y0 + 1.0) * ax) * ay;
    v as f32
}

/// Applies the same transform to an image (bilinear) and its mask
/// (nearest, so it stays binary).
pub fn apply_transform(image: &Tensor<f32>, mask: &Tensor<f32>, tf: Transform) -> (Tensor<f32>, Tensor<f32>) {
    let (mut image, mut mask) = (image.clone(), mask.clone());
    if tf.hflip {
        flip(&mut image, true);
        flip(&mut mask, true);
    }
    if tf.vflip {
        flip(&mut image, false);
        flip(&mut mask, false);
    }
    if tf.angle_deg != 0.0 {
        image = rotate(&image, tf.angle_deg, true);
        mask = rotate(&mask, tf.angle_deg, false);
    }
    (image, mask)
}

pub fn augment(
    image: &Tensor<f32>,
    mask: &Tensor<f32>,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (Tensor<f32>, Tensor<f32>) {
    apply_transform(image, mask, Transform::sample(cfg, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_vec([1, c, h, w], (0..c * h * w).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let t = Tensor::<f32>::full([1, 3, 4, 4], 0.3);
        assert!(normalize_image(&t).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_channels_are_standardized() {
        let n = normalize_image(&ramp(3, 8, 6));
        for c in 0..3 {
            let p = n.plane(0, c);
            let mean = p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64;
            let std = (p.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / p.len() as f64).sqrt();
            assert!(mean.abs() < 1e-5 && (std - 1.0).abs() < 1e-3, "{mean} {std}");
        }
    }

    #[test]
    fn normalization_is_affine_invariant() {
        let x = ramp(3, 5, 7);
        let y = x.map(|v| 2.5 * v + 0.75);
        assert!(normalize_image(&x).max_abs_diff(&normalize_image(&y)) < 1e-5);
    }

    #[test]
    fn identity_transform_and_double_flip() {
        let img = ramp(3, 6, 5);
        let mask = img.map(|v| (v > 0.0) as u8 as f32);
        let (a, b) = apply_transform(&img, &mask, Transform::IDENTITY);
        assert_eq!((a, b), (img.clone(), mask.clone()));
        let h = Transform { hflip: true, ..Transform::IDENTITY };
        let (a, b) = apply_transform(&img, &mask, h);
        assert_ne!(a, img);
        assert_eq!(apply_transform(&a, &b, h), (img.clone(), mask.clone()));
        let v = Transform { vflip: true, ..Transform::IDENTITY };
        let (a, b) = apply_transform(&img, &mask, v);
        assert_eq!(a.at(0, 1, 0, 2), img.at(0, 1, 5, 2));
        assert_eq!(apply_transform(&a, &b, v), (img, mask));
    }

    #[test]
    fn quarter_turn_moves_pixels() {
        // Counter-clockwise in image coordinates (y down): the top-right
        // corner moves to the top-left.
        let mut m = Tensor::<f32>::zeros([1, 1, 4, 4]);
        m.data_mut()[3] = 1.0;
        let (_, r) = apply_transform(&m.clone(), &m, Transform { angle_deg: 90.0, ..Transform::IDENTITY });
        let on: Vec<usize> = r.data().iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
        assert_eq!(on.len(), 1);
        assert!(on[0] == 0 || on[0] == 15, "{on:?}");
    }

    #[test]
    fn rotation_zero_fills_corners() {
        let img = Tensor::<f32>::full([1, 1, 8, 8], 1.0);
        let (r, _) = apply_transform(&img, &img.clone(), Transform { angle_deg: 45.0, ..Transform::IDENTITY });
        assert!(r.data()[0] < 0.5);
        assert!((r.at(0, 0, 4, 4) - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn augmented_masks_stay_binary(seed in any::<u64>(), h in 3usize..12, w in 3usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bits: Vec<f32> = (0..h * w).map(|_| rng.random_bool(0.4) as u8 as f32).collect();
            let mask = Tensor::from_vec([1, 1, h, w], bits).unwrap();
            let img = normalize_image(&ramp(3, h, w));
            let (a, m) = augment(&img, &mask, &AugmentConfig::default(), &mut rng);
            prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert!(a.all_finite());
        }
    }
}
