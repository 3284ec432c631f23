//! Seeded synthetic image generators.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Provenance};
use crate::error::{AodError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Blobs,
    Textures,
}

/// Intensity of the flat defect patch.
pub const DEFECT_VALUE: f64 = 0.3;
const DEFECT_STRIPE_MID: f64 = 0.65;
const DEFECT_STRIPE_AMP: f64 = 0.3;

fn check(n: usize, shape: [usize; 3]) -> Result<()> {
    if n == 0 || shape.contains(&0) {
        return Err(AodError::Contract(format!("need n >= 1 and a positive shape, got {n} x {shape:?}")));
    }
    Ok(())
}

/// Pixels i.i.d. from N(0.5, 1) clipped to `[0, 1]`, or from U[0, 1].
pub fn synth_noise(kind: NoiseKind, n: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    check(n, shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = n * shape.iter().product::<usize>();
    let data: Vec<f64> = match kind {
        NoiseKind::Gaussian => {
            let normal = Normal::<f64>::new(0.5, 1.0).expect("valid normal");
            (0..total).map(|_| normal.sample(&mut rng).clamp(0.0, 1.0)).collect()
        }
        NoiseKind::Uniform => (0..total).map(|_| rng.gen_range(0.0..=1.0)).collect(),
    };
    let generator = match kind {
        NoiseKind::Gaussian => "noise-gaussian",
        NoiseKind::Uniform => "noise-uniform",
    };
    Dataset::new(shape, data, Provenance { generator: generator.into(), seed })
}

fn blob(rng: &mut ChaCha8Rng, h: usize, w: usize, out: &mut [f64]) {
    let cell = rng.gen_range(0..9);
    let cy = (cell / 3 + 1) as f64 * h as f64 / 4.0 + rng.gen_range(-1.0..1.0);
    let cx = (cell % 3 + 1) as f64 * w as f64 / 4.0 + rng.gen_range(-1.0..1.0);
    let sigma = 0.12 * h.min(w) as f64;
    let amp = rng.gen_range(0.8..1.0);
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            out[y * w + x] = amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
}

fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize, out: &mut [f64]) {
    let angle = rng.gen_range(0..4) as f64 * PI / 4.0 + rng.gen_range(-0.15..0.15);
    let period = rng.gen_range(4.0..6.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let checks = rng.gen_bool(0.3);
    let (s, c) = angle.sin_cos();
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let u = 2.0 * PI * (xf * c + yf * s) / period + phase;
            let v = if checks {
                let t = 2.0 * PI * (yf * c - xf * s) / period;
                u.sin() * t.sin()
            } else {
                u.sin()
            };
            out[y * w + x] = 0.5 + 0.4 * v;
        }
    }
}

/// In-distribution families: smooth Gaussian bumps at jittered grid
/// positions, or periodic stripe/check textures. Every channel of a sample
/// carries the same pattern.
pub fn make_indist(family: Family, n: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    check(n, shape)?;
    let [c, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; n * c * h * w];
    let mut plane = vec![0.0; h * w];
    for sample in data.chunks_mut(c * h * w) {
        match family {
            Family::Blobs => blob(&mut rng, h, w, &mut plane),
            Family::Textures => texture(&mut rng, h, w, &mut plane),
        }
        for ch in sample.chunks_mut(h * w) {
            ch.copy_from_slice(&plane);
        }
    }
    let generator = match family {
        Family::Blobs => "blobs",
        Family::Textures => "textures",
    };
    Dataset::new(shape, data, Provenance { generator: generator.into(), seed })
}

/// Vertical stripe images; every odd-indexed sample carries one flat
/// rectangular patch covering 4-15% of the image, with its exact mask.
pub fn synth_defects(n: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    check(n, shape)?;
    if n < 2 {
        return Err(AodError::Contract("need at least two images".into()));
    }
    let [c, h, w] = shape;
    let area = (h * w) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; n * c * h * w];
    let mut masks = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut plane = vec![0.0; h * w];
    for (i, sample) in data.chunks_mut(c * h * w).enumerate() {
        let period = 4.0;
        let phase = rng.gen_range(0.0..2.0 * PI);
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = DEFECT_STRIPE_MID + DEFECT_STRIPE_AMP * (2.0 * PI * x as f64 / period + phase).sin();
            }
        }
        let mut mask = vec![false; h * w];
        let defective = i % 2 == 1;
        if defective {
            // Rejection-sample a rectangle whose area lands in [4%, 15%].
            let (ph, pw) = loop {
                let ph = rng.gen_range(1..=h);
                let pw = rng.gen_range(1..=w);
                let frac = (ph * pw) as f64 / area;
                if (0.04..=0.15).contains(&frac) {
                    break (ph, pw);
                }
            };
            let y0 = rng.gen_range(0..=h - ph);
            let x0 = rng.gen_range(0..=w - pw);
            for y in y0..y0 + ph {
                for x in x0..x0 + pw {
                    plane[y * w + x] = DEFECT_VALUE;
                    mask[y * w + x] = true;
                }
            }
        }
        for ch in sample.chunks_mut(h * w) {
            ch.copy_from_slice(&plane);
        }
        masks.push(mask);
        labels.push(defective);
    }
    let mut ds = Dataset::new(shape, data, Provenance { generator: "defects".into(), seed })?;
    ds.masks = Some(masks);
    ds.labels = Some(labels);
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_noise_stays_in_unit_interval() {
        let d = synth_noise(NoiseKind::Uniform, 50, [1, 8, 8], 3).unwrap();
        assert!(d.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn defect_masks_follow_contract() {
        let d = synth_defects(20, [1, 16, 16], 5).unwrap();
        for (i, m) in d.masks.as_ref().unwrap().iter().enumerate() {
            let area = m.iter().filter(|&&b| b).count() as f64 / 256.0;
            if i % 2 == 0 {
                assert_eq!(area, 0.0);
            } else {
                assert!((0.04..=0.15).contains(&area), "{area}");
            }
        }
    }
}
