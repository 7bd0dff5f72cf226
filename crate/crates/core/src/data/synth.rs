//! Procedural lesion-like images with exact ground-truth masks.
//!
//! Each sample is a rotated ellipse whose radius is modulated by a few
//! low-frequency harmonics, painted darker and redder than a noisy skin
//! background with a soft edge, and optionally crossed by thin dark hairs.
//! The mask is the pixel-centre rasterization of the perturbed ellipse, so
//! it is exact by construction.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{SamplePair, Size};
use crate::tensor::Tensor;

/// Largest area fraction an unclipped lesion may cover.
const MAX_AREA_FRACTION: f64 = 0.55;
const HARMONICS: [u32; 3] = [2, 3, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub count: usize,
    pub seed: u64,
    pub canvas: Size,
    /// Semi-axis range as a fraction of the canvas side.
    pub axis_range: (f64, f64),
    /// Lesion-versus-skin mean intensity difference.
    pub contrast_range: (f64, f64),
    pub noise_sigma_range: (f64, f64),
    pub max_hairs: usize,
    /// Upper bound of the radial perturbation amplitude.
    pub max_irregularity: f64,
}

impl SynthParams {
    pub fn new(count: usize, seed: u64, canvas: Size) -> Self {
        SynthParams {
            count,
            seed,
            canvas,
            axis_range: (0.1, 0.4),
            contrast_range: (0.05, 0.35),
            noise_sigma_range: (0.01, 0.08),
            max_hairs: 5,
            max_irregularity: 0.3,
        }
    }
}

struct Lesion {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    /// `(k, amplitude, phase)`
    harmonics: Vec<(u32, f64, f64)>,
}

impl Lesion {
    fn sample(rng: &mut ChaCha8Rng, p: &SynthParams) -> Self {
        let (lo, hi) = p.axis_range;
        let mut a = rng.random_range(lo..=hi);
        let mut b = rng.random_range(lo..=hi);
        let amp = rng.random_range(0.0..=p.max_irregularity);
        let area = PI * a * b * (1.0 + amp).powi(2);
        if area > MAX_AREA_FRACTION {
            let s = (MAX_AREA_FRACTION / area).sqrt();
            a *= s;
            b *= s;
        }
        let raw: Vec<(u32, f64, f64)> = HARMONICS
            .iter()
            .map(|&k| (k, rng.random_range(0.0..1.0), rng.random_range(0.0..2.0 * PI)))
            .collect();
        let total: f64 = raw.iter().map(|h| h.1).sum::<f64>().max(1e-12);
        let harmonics = raw.into_iter().map(|(k, w, ph)| (k, amp * w / total, ph)).collect();
        let angle = rng.random_range(0.0..PI);
        Lesion {
            cx: rng.random_range(0.3..=0.7),
            cy: rng.random_range(0.3..=0.7),
            a,
            b,
            cos: angle.cos(),
            sin: angle.sin(),
            harmonics,
        }
    }

    /// Normalized radius `rho` and boundary radius `r(theta)` at a point in
    /// unit canvas coordinates; the point is inside iff `rho <= r`.
    fn polar(&self, u: f64, v: f64) -> (f64, f64) {
        let (dx, dy) = (u - self.cx, v - self.cy);
        let ex = (dx * self.cos + dy * self.sin) / self.a;
        let ey = (-dx * self.sin + dy * self.cos) / self.b;
        let theta = ey.atan2(ex);
        let r = 1.0
            + self
                .harmonics
                .iter()
                .map(|&(k, amp, ph)| amp * (k as f64 * theta + ph).cos())
                .sum::<f64>();
        (ex.hypot(ey), r)
    }
}

struct Hair {
    cx: f64,
    cy: f64,
    radius: f64,
    start: f64,
    span: f64,
    half_width: f64,
    darkness: f64,
}

impl Hair {
    fn sample(rng: &mut ChaCha8Rng, canvas: Size) -> Self {
        let side = canvas.width.max(canvas.height) as f64;
        Hair {
            cx: rng.random_range(-0.5..1.5) * canvas.width as f64,
            cy: rng.random_range(-0.5..1.5) * canvas.height as f64,
            radius: rng.random_range(0.4..1.2) * side,
            start: rng.random_range(0.0..2.0 * PI),
            span: rng.random_range(0.3..1.2),
            half_width: rng.random_range(0.3..0.7),
            darkness: rng.random_range(0.6..0.9),
        }
    }

    /// Pixel coverage in `[0, 1]` at pixel centre `(x, y)`.
    fn coverage(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let mut phi = dy.atan2(dx) - self.start;
        phi = phi.rem_euclid(2.0 * PI);
        let d = if phi <= self.span {
            (dx.hypot(dy) - self.radius).abs()
        } else {
            let end = |t: f64| {
                let (ex, ey) = (self.cx + self.radius * t.cos(), self.cy + self.radius * t.sin());
                (x - ex).hypot(y - ey)
            };
            end(self.start).min(end(self.start + self.span))
        };
        (self.half_width + 0.5 - d).clamp(0.0, 1.0)
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Sample `index` of the dataset described by `params`.
pub fn generate_sample(params: &SynthParams, index: usize) -> SamplePair {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index as u64);
    let Size { width, height } = params.canvas;

    let lesion = Lesion::sample(&mut rng, params);
    let skin = [
        rng.random_range(0.75..0.92),
        rng.random_range(0.55..0.72),
        rng.random_range(0.45..0.62),
    ];
    let gap = rng.random_range(params.contrast_range.0..=params.contrast_range.1);
    // Darker overall, with green and blue dropping faster than red.
    let tint = [0.6, 1.2, 1.0];
    let inside: Vec<f64> = skin.iter().zip(tint).map(|(s, t)| s - gap * t).collect();
    let sigma = rng.random_range(params.noise_sigma_range.0..=params.noise_sigma_range.1);
    let softness = rng.random_range(0.03..0.12);
    let hairs: Vec<Hair> = (0..rng.random_range(0..=params.max_hairs))
        .map(|_| Hair::sample(&mut rng, params.canvas))
        .collect();
    let noise = Normal::new(0.0, sigma).expect("sigma is positive");

    let plane = width * height;
    let mut image = vec![0.0f32; 3 * plane];
    let mut mask = vec![0.0f32; plane];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (rho, r) = lesion.polar(px / width as f64, py / height as f64);
            if rho <= r {
                mask[i] = 1.0;
            }
            // Soft blend across the boundary; exactly 0.5 on it.
            let w = 1.0 - smoothstep(r * (1.0 - softness), r * (1.0 + softness), rho);
            let shade = hairs
                .iter()
                .map(|h| h.coverage(px, py) * h.darkness)
                .fold(0.0, f64::max);
            for c in 0..3 {
                let base = skin[c] * (1.0 - w) + inside[c] * w + noise.sample(&mut rng);
                let v = base * (1.0 - shade);
                image[c * plane + i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    SamplePair {
        id: format!("synth_{index:05}"),
        image: Tensor::from_vec([1, 3, height, width], image).expect("sized above"),
        mask: Tensor::from_vec([1, 1, height, width], mask).expect("sized above"),
    }
}

/// Deterministic under `params.seed`; sample `i` depends only on the seed
/// and `i`, so generation parallelizes without changing the output.
pub fn generate_synthetic(params: &SynthParams) -> Vec<SamplePair> {
    (0..params.count)
        .into_par_iter()
        .map(|i| generate_sample(params, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_count_is_empty() {
        assert!(generate_synthetic(&SynthParams::new(0, 1, Size::new(8, 8))).is_empty());
    }

    #[test]
    fn same_seed_same_samples() {
        let p = SynthParams::new(4, 42, Size::new(24, 16));
        let a = generate_synthetic(&p);
        let b = generate_synthetic(&p);
        assert_eq!(a, b);
        let other = generate_synthetic(&SynthParams::new(4, 43, Size::new(24, 16)));
        assert_ne!(a[0].image, other[0].image);
    }

    #[test]
    fn samples_are_valid_pairs() {
        for s in generate_synthetic(&SynthParams::new(6, 9, Size::new(32, 20))) {
            SamplePair::new(s.id.clone(), s.image.clone(), s.mask.clone()).unwrap();
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn lesion_is_darker_than_skin_on_average() {
        let samples = generate_synthetic(&SynthParams::new(20, 3, Size::new(32, 32)));
        let mut darker = 0;
        for s in &samples {
            let lum: Vec<f32> = (0..32 * 32)
                .map(|i| (0..3).map(|c| s.image.plane(0, c)[i]).sum())
                .collect();
            let mean = |fg: bool| {
                let v: Vec<f32> =
                    lum.iter().zip(s.mask.data()).filter(|(_, &m)| (m == 1.0) == fg).map(|(l, _)| *l).collect();
                v.iter().sum::<f32>() / v.len().max(1) as f32
            };
            if mean(true) < mean(false) {
                darker += 1;
            }
        }
        assert!(darker >= 19, "{darker}/20");
    }

    #[test]
    fn hair_coverage_peaks_on_the_arc() {
        let h = Hair { cx: 0.0, cy: 0.0, radius: 10.0, start: 0.0, span: 1.0, half_width: 0.5, darkness: 0.8 };
        assert_eq!(h.coverage(10.0, 0.0), 1.0);
        assert_eq!(h.coverage(13.0, 0.0), 0.0);
        assert_eq!(h.coverage(-10.0, 0.0), 0.0);
    }
}
