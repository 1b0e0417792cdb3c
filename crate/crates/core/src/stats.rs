//! Summary statistics shared by the metrology modules.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("cannot summarize an empty series")]
    Empty,
}

/// Mean, sample standard deviation, RMSE, MAE and nearest-rank P95 of a
/// series. P95 is taken over absolute values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub rmse: f64,
    pub mae: f64,
    pub p95: f64,
    pub n: usize,
}

impl MetricSummary {
    pub fn from_values(values: &[f64]) -> Result<Self, StatsError> {
        if values.is_empty() {
            return Err(StatsError::Empty);
        }
        let n = values.len();
        let nf = n as f64;
        let mean = values.iter().sum::<f64>() / nf;
        let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        let std = if n > 1 { (ss / (nf - 1.0)).sqrt() } else { 0.0 };
        let rmse = (values.iter().map(|v| v * v).sum::<f64>() / nf).sqrt();
        let mae = values.iter().map(|v| v.abs()).sum::<f64>() / nf;
        let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
        Ok(Self { mean, std, rmse, mae, p95: nearest_rank(&mut abs, 95), n })
    }

    pub fn zeros(n: usize) -> Self {
        Self { mean: 0.0, std: 0.0, rmse: 0.0, mae: 0.0, p95: 0.0, n }
    }
}

/// Nearest-rank percentile: the smallest value with at least `pct`% of the
/// sample at or below it. Sorts `values` in place.
pub fn nearest_rank(values: &mut [f64], pct: u32) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let rank = (pct as usize * n).div_ceil(100).max(1);
    values[rank - 1]
}

/// Serialize `f64` as a JSON number when finite and as `"inf"`, `"-inf"` or
/// `"nan"` otherwise.
pub mod json_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(de::Error::custom(format!("invalid float `{other}`"))),
            },
        }
    }
}

/// [`json_f64`] for optional values; `None` is `null`.
pub mod json_opt_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => super::json_f64::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        struct W(#[serde(with = "super::json_f64")] f64);
        Ok(Option::<W>::deserialize(d)?.map(|w| w.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_series() {
        let s = MetricSummary::from_values(&[0.1; 50]).unwrap();
        assert!((s.mean - 0.1).abs() < 1e-15);
        assert!((s.rmse - 0.1).abs() < 1e-15);
        assert!((s.mae - 0.1).abs() < 1e-15);
        assert_eq!(s.p95, 0.1);
        assert!(s.std < 1e-15);
    }

    #[test]
    fn empty_series_rejected() {
        assert_eq!(MetricSummary::from_values(&[]), Err(StatsError::Empty));
    }

    #[test]
    fn nearest_rank_examples() {
        let mut v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&mut v, 95), 95.0);
        let mut v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(nearest_rank(&mut v, 95), 19.0);
        let mut v = vec![3.0];
        assert_eq!(nearest_rank(&mut v, 95), 3.0);
    }

    proptest! {
        #[test]
        fn rmse_decomposes_into_mean_and_std(values in prop::collection::vec(-10.0f64..10.0, 2..200)) {
            let s = MetricSummary::from_values(&values).unwrap();
            let n = values.len() as f64;
            let lhs = s.rmse * s.rmse;
            let rhs = s.mean * s.mean + s.std * s.std * (n - 1.0) / n;
            prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.max(1e-12));
        }
    }
}
