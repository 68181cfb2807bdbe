//! Procedural image/label stream.
//!
//! Each image is split into four quadrants, each filled with one of `K`
//! texture patterns. Three quadrants carry faint distractor textures; the
//! dominant quadrant carries full-amplitude texture and its pattern id is
//! the label. Image `i` is drawn from its own ChaCha stream, so any image
//! can be regenerated without replaying earlier ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{CHANNELS, MAX_CLASSES};
use crate::numerics::Tensor;

const NOISE_STD: f64 = 0.05;
const DISTRACTOR_AMPLITUDE: (f32, f32) = (0.2, 0.6);
/// Held-out images live far past any training index.
pub const EVAL_OFFSET: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub image_size: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H × W × 3]`
    pub image: Tensor,
    pub label: usize,
}

/// Texture `k` at quadrant-local coordinates `u, v ∈ [0, 1)`, in `[-1, 1]`.
fn pattern(k: usize, u: f32, v: f32) -> f32 {
    use std::f32::consts::TAU;
    match k {
        0 => (TAU * 3.0 * v).sin(),
        1 => (TAU * 3.0 * u).sin(),
        2 => {
            let a = ((u * 4.0) as i32 + (v * 4.0) as i32) % 2;
            if a == 0 {
                1.0
            } else {
                -1.0
            }
        }
        3 => {
            let r2 = (u - 0.5).powi(2) + (v - 0.5).powi(2);
            2.0 * (-r2 / 0.04).exp() - 1.0
        }
        4 => (TAU * 2.0 * (u + v)).sin(),
        _ => {
            let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
            (TAU * 3.0 * r).cos()
        }
    }
}

/// Per-pattern channel tint so patterns differ in colour as well as shape.
fn tint(k: usize, c: usize) -> f32 {
    0.6 + 0.4 * ((k * 2 + c) as f32 * 1.3).cos()
}

impl SyntheticDataset {
    pub fn new(seed: u64, image_size: usize, classes: usize) -> Self {
        assert!((1..=MAX_CLASSES).contains(&classes), "1..={MAX_CLASSES} classes supported");
        assert!(image_size >= 2 && image_size % 2 == 0, "image size must be even");
        Self {
            seed,
            image_size,
            classes,
        }
    }

    pub fn sample(&self, index: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let label = rng.random_range(0..self.classes);
        let dominant = rng.random_range(0..4usize);
        let mut quads = [(label, 1.0f32); 4];
        for (q, slot) in quads.iter_mut().enumerate() {
            if q != dominant {
                let k = rng.random_range(0..self.classes);
                let a = rng.random_range(DISTRACTOR_AMPLITUDE.0..DISTRACTOR_AMPLITUDE.1);
                *slot = (k, a);
            }
        }
        let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
        let s = self.image_size;
        let half = s / 2;
        let image = Tensor::from_fn(&[s, s, CHANNELS], |i| {
            let c = i % CHANNELS;
            let x = (i / CHANNELS) % s;
            let y = i / (CHANNELS * s);
            let q = (y / half) * 2 + x / half;
            let (k, a) = quads[q];
            let u = (x % half) as f32 / half as f32;
            let v = (y % half) as f32 / half as f32;
            a * tint(k, c) * pattern(k, u, v) + noise.sample(&mut rng) as f32
        });
        Sample { image, label }
    }

    /// Training batch `step`: images `step·batch .. (step+1)·batch`.
    pub fn batch(&self, step: usize, batch: usize) -> Vec<Sample> {
        let start = (step * batch) as u64;
        (start..start + batch as u64).map(|i| self.sample(i)).collect()
    }

    pub fn eval_set(&self, count: usize) -> Vec<Sample> {
        (0..count as u64).map(|i| self.sample(EVAL_OFFSET + i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a = SyntheticDataset::new(3, 32, 4);
        let b = SyntheticDataset::new(3, 32, 4);
        assert_eq!(a.batch(5, 3), b.batch(5, 3));
        assert_eq!(a.sample(16), a.batch(4, 4)[0]);
        assert_ne!(a.sample(0), SyntheticDataset::new(4, 32, 4).sample(0));
    }

    #[test]
    fn labels_in_range_and_varied() {
        let d = SyntheticDataset::new(0, 16, 4);
        let labels: Vec<usize> = (0..64).map(|i| d.sample(i).label).collect();
        assert!(labels.iter().all(|&l| l < 4));
        for k in 0..4 {
            assert!(labels.contains(&k));
        }
    }

    #[test]
    fn pixels_finite_and_bounded() {
        let s = SyntheticDataset::new(1, 32, 6).sample(9);
        assert_eq!(s.image.shape(), &[32, 32, 3]);
        assert!(s.image.data().iter().all(|v| v.is_finite() && v.abs() < 2.0));
    }
}
