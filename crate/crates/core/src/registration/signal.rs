//! Stream fusion and Savitzky-Golay smoothing.

use serde::{Deserialize, Serialize};

use super::{MatchedPair, RegistrationError};
use crate::timebase::TimestampNs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub t: TimestampNs,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseStream {
    pub samples: Vec<PoseSample>,
    pub rate_hz: f64,
}

impl PoseStream {
    pub fn new(samples: Vec<PoseSample>, rate_hz: f64) -> Result<Self, RegistrationError> {
        if samples.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(RegistrationError::Unsorted);
        }
        if let Some(first) = samples.first() {
            let d = first.p.len();
            if !(d == 2 || d == 3) || samples.iter().any(|s| s.p.len() != d) {
                return Err(RegistrationError::Dimension);
            }
            if samples.iter().any(|s| s.p.iter().any(|v| !v.is_finite())) {
                return Err(RegistrationError::NonFinite);
            }
        }
        Ok(Self { samples, rate_hz })
    }

    pub fn period_s(&self) -> f64 {
        1.0 / self.rate_hz
    }
}

/// Default rejection gap: three high-rate periods.
pub fn default_max_gap(high: &PoseStream) -> f64 {
    3.0 * high.period_s()
}

/// Pair every low-rate sample with the high-rate stream extrapolated
/// causally to its timestamp from the two most recent high-rate samples.
/// The high-rate stream is the tracker (`p_t`), the low-rate stream the
/// reference (`p_l`).
pub fn fuse_streams(high: &PoseStream, low: &PoseStream, max_gap: f64) -> Vec<MatchedPair> {
    let mut out = Vec::with_capacity(low.samples.len());
    let gap_ns = max_gap * 1e9;
    for ref_sample in &low.samples {
        let tau = ref_sample.t;
        let k = high.samples.partition_point(|s| s.t <= tau);
        if k < 2 {
            continue;
        }
        let s1 = &high.samples[k - 1];
        let s0 = &high.samples[k - 2];
        if (tau.0 - s1.t.0) as f64 > gap_ns {
            continue;
        }
        let u = (tau.0 - s1.t.0) as f64 / (s1.t.0 - s0.t.0) as f64;
        let p_t = s1.p.iter().zip(&s0.p).map(|(a, b)| a + (a - b) * u).collect();
        out.push(MatchedPair { t: tau, p_t, p_l: ref_sample.p.clone() });
    }
    out
}

/// Center-point weights of a least-squares polynomial fit of `order` over
/// `2m + 1` equispaced samples. Orthonormal polynomials are built by
/// Arnoldi iteration with reorthogonalization, which stays well conditioned
/// where the raw Vandermonde system does not.
pub fn sg_weights(m: usize, order: usize) -> Vec<f64> {
    let w = 2 * m + 1;
    if m == 0 {
        return vec![1.0];
    }
    let x: Vec<f64> = (0..w).map(|i| (i as f64 - m as f64) / m as f64).collect();
    let mut q: Vec<Vec<f64>> = vec![vec![1.0 / (w as f64).sqrt(); w]];
    for k in 0..order.min(w - 1) {
        let mut v: Vec<f64> = q[k].iter().zip(&x).map(|(a, b)| a * b).collect();
        for _ in 0..2 {
            for qj in &q {
                let c: f64 = qj.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(qj).for_each(|(vi, qi)| *vi -= c * qi);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|vi| *vi /= n);
        q.push(v);
    }
    (0..w).map(|j| q.iter().map(|qk| qk[m] * qk[j]).sum()).collect()
}

/// Per-dimension SG smoothing. Near the ends the window shrinks to the
/// largest centered odd window that fits.
pub fn sg_smooth(stream: &PoseStream, window: usize, order: usize) -> Result<PoseStream, RegistrationError> {
    if window % 2 == 0 || order >= window {
        return Err(RegistrationError::SgParams { window, order });
    }
    let s = &stream.samples;
    if s.len() >= 2 {
        let nominal = 1e9 / stream.rate_hz;
        if s.windows(2).any(|w| ((w[1].t.0 - w[0].t.0) as f64 - nominal).abs() > 0.01 * nominal) {
            return Err(RegistrationError::NonUniform);
        }
    }
    let half = window / 2;
    let n = s.len();
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; half + 1];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let m = half.min(i).min(n - 1 - i);
        let wts = cache[m].get_or_insert_with(|| sg_weights(m, order.min(2 * m)));
        let d = s[i].p.len();
        let p = (0..d)
            .map(|k| wts.iter().enumerate().map(|(j, w)| w * s[i + j - m].p[k]).sum())
            .collect();
        out.push(PoseSample { t: s[i].t, p });
    }
    Ok(PoseStream { samples: out, rate_hz: stream.rate_hz })
}
