//! Synthetic tracker-distortion ground truth.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::MatchedPair;
use crate::rng::RngStream;
use crate::timebase::TimestampNs;

/// Radial Gaussian displacement `amplitude * exp(-|p - center|^2 / (2 width^2))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionField {
    /// Row-major d x d.
    pub a0: Vec<f64>,
    pub t0: Vec<f64>,
    pub bumps: Vec<Bump>,
    pub noise_std: f64,
    pub seed: u64,
}

impl DistortionField {
    pub fn dim(&self) -> usize {
        self.t0.len()
    }

    pub fn a0_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.a0)
    }

    pub fn warp(&self, p: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(p.len());
        for b in &self.bumps {
            let c = DVector::from_column_slice(&b.center);
            let g = (-(p - c).norm_squared() / (2.0 * b.width * b.width)).exp();
            out += DVector::from_column_slice(&b.amplitude) * g;
        }
        out
    }

    /// Tracker frame to reference frame.
    pub fn forward(&self, p_t: &DVector<f64>) -> DVector<f64> {
        self.a0_matrix() * p_t + DVector::from_column_slice(&self.t0) + self.warp(p_t)
    }

    /// Solve `forward(p_t) = p_l` by fixed-point iteration; converges while
    /// the warp is a contraction under `A0^-1`.
    pub fn inverse(&self, p_l: &DVector<f64>) -> DVector<f64> {
        let a_inv = self.a0_matrix().try_inverse().expect("A0 invertible");
        let base = p_l - DVector::from_column_slice(&self.t0);
        let mut p = &a_inv * &base;
        for _ in 0..100 {
            let next = &a_inv * (&base - self.warp(&p));
            let done = (&next - &p).norm() < 1e-15;
            p = next;
            if done {
                break;
            }
        }
        p
    }

    /// The default sandbox field: 20 degree rotation with 2% anisotropic
    /// scale, offset (3, -1.5), four 0.6 m bumps of at most 4 cm, 3 mm noise.
    pub fn benchmark(seed: u64) -> Self {
        let (s, c) = 20f64.to_radians().sin_cos();
        let (sx, sy) = (1.02, 0.98);
        let mut rng = RngStream::new(seed, "reg.field");
        let bumps = (0..4)
            .map(|_| {
                let center = vec![rng.random_range(0.6..3.6), rng.random_range(0.6..3.6)];
                let amp: f64 = rng.random_range(0.02..0.04);
                let dir: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                Bump { center, amplitude: vec![amp * dir.cos(), amp * dir.sin()], width: 0.6 }
            })
            .collect();
        Self { a0: vec![c * sx, -s * sy, s * sx, c * sy], t0: vec![3.0, -1.5], bumps, noise_std: 0.003, seed }
    }
}

pub const BENCHMARK_PAIRS: usize = 3433;
pub const BENCHMARK_WORKSPACE: f64 = 4.2;

/// Uniform reference points in the box `[lo, hi]` per dimension, mapped back
/// to the tracker frame, with Gaussian noise on the tracker reading.
pub fn synth_dataset(field: &DistortionField, n_points: usize, lo: &[f64], hi: &[f64]) -> Vec<MatchedPair> {
    let d = field.dim();
    let mut rng = RngStream::new(field.seed, "reg.synth");
    let noise = Normal::new(0.0, field.noise_std.max(0.0)).expect("finite std");
    (0..n_points)
        .map(|i| {
            let p_l = DVector::from_fn(d, |k, _| rng.random_range(lo[k]..hi[k]));
            let mut p_t = field.inverse(&p_l);
            if field.noise_std > 0.0 {
                p_t.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            MatchedPair {
                t: TimestampNs(i as u64 * 10_000_000),
                p_t: p_t.iter().copied().collect(),
                p_l: p_l.iter().copied().collect(),
            }
        })
        .collect()
}

/// The shipped benchmark dataset.
pub fn benchmark_dataset(seed: u64) -> Vec<MatchedPair> {
    let w = BENCHMARK_WORKSPACE;
    synth_dataset(&DistortionField::benchmark(seed), BENCHMARK_PAIRS, &[0.0, 0.0], &[w, w])
}
