//! Tracker-to-reference registration: stream fusion, smoothing, rigid and
//! affine baselines, an MLP residual correction, and error evaluation.
//!
//! The hybrid model is `f(p) = A p + t + s * g(normalize(p))`, where `g` is
//! the residual MLP and `s` a scalar output scale fixed at training time.

mod fit;
mod mlp;
mod signal;
mod synth;

use std::io::{Read, Write};
use std::path::Path;

pub use fit::{fit_affine, fit_rigid_svd};
pub use mlp::{Mlp, MlpHyper, TrainReport, HIDDEN};
pub use signal::{default_max_gap, fuse_streams, sg_smooth, sg_weights, PoseSample, PoseStream};
pub use synth::{benchmark_dataset, synth_dataset, Bump, DistortionField, BENCHMARK_PAIRS, BENCHMARK_WORKSPACE};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;
use crate::stats::{MetricSummary, StatsError};
use crate::timebase::TimestampNs;

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("pose stream timestamps must strictly increase")]
    Unsorted,
    #[error("points must all have the same dimension, 2 or 3")]
    Dimension,
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("SG window must be odd and exceed the order (window {window}, order {order})")]
    SgParams { window: usize, order: usize },
    #[error("stream is not uniformly sampled within 1% of its period")]
    NonUniform,
    #[error("need at least {need} pairs, got {got}")]
    TooFewPairs { need: usize, got: usize },
    #[error("degenerate point configuration")]
    Degenerate,
    #[error("non-finite loss {loss} at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, loss: f64 },
    #[error("model: {0}")]
    Model(String),
    #[error("empty evaluation set")]
    EmptyTestSet,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub t: TimestampNs,
    pub p_t: Vec<f64>,
    pub p_l: Vec<f64>,
}

/// Seeded uniform shuffle, first `floor(train_fraction * n)` to training.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut RngStream::new(seed, "reg.split"));
    let n_train = (n as f64 * train_fraction).floor() as usize;
    let test = idx.split_off(n_train);
    (idx, test)
}

/// Per-dimension zero-mean unit-variance scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(points: &[&[f64]]) -> Self {
        let d = points[0].len();
        let n = points.len() as f64;
        let mean: Vec<f64> = (0..d).map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|k| {
                let var = points.iter().map(|p| (p[k] - mean[k]).powi(2)).sum::<f64>() / n;
                if var > 0.0 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}

/// Trained residual correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub normalizer: Normalizer,
    pub mlp: Mlp,
    pub out_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationModel {
    pub a: DMatrix<f64>,
    pub t: DVector<f64>,
    pub residual: Option<Residual>,
}

impl RegistrationModel {
    pub fn identity(d: usize) -> Self {
        Self { a: DMatrix::identity(d, d), t: DVector::zeros(d), residual: None }
    }

    pub fn linear(a: DMatrix<f64>, t: DVector<f64>) -> Self {
        Self { a, t, residual: None }
    }

    pub fn dim(&self) -> usize {
        self.t.len()
    }

    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let mut out = &self.a * DVector::from_column_slice(p) + &self.t;
        if let Some(r) = &self.residual {
            let x = DMatrix::from_column_slice(p.len(), 1, &r.normalizer.apply(p));
            out += r.mlp.forward(&x).column(0) * r.out_scale;
        }
        out.iter().copied().collect()
    }

    pub fn to_doc(&self) -> ModelDoc {
        let d = self.dim();
        let a = (0..d).flat_map(|r| (0..d).map(move |c| (r, c))).map(|(r, c)| self.a[(r, c)]).collect();
        let (normalizer, layers, theta, out_scale) = match &self.residual {
            Some(r) => (Some(r.normalizer.clone()), r.mlp.layers.clone(), r.mlp.to_flat(), r.out_scale),
            None => (None, Vec::new(), Vec::new(), 0.0),
        };
        ModelDoc { version: MODEL_VERSION, d, a, t: self.t.iter().copied().collect(), normalizer, layers, theta, out_scale }
    }

    pub fn from_doc(doc: ModelDoc) -> Result<Self, RegistrationError> {
        if doc.version != MODEL_VERSION {
            return Err(RegistrationError::Model(format!("unsupported model version {}", doc.version)));
        }
        let d = doc.d;
        if doc.a.len() != d * d || doc.t.len() != d {
            return Err(RegistrationError::Model("A or t has the wrong size".into()));
        }
        let residual = match doc.normalizer {
            None => None,
            Some(normalizer) => {
                if doc.layers.first() != Some(&d) || doc.layers.last() != Some(&d) {
                    return Err(RegistrationError::Model("MLP layers must start and end at d".into()));
                }
                Some(Residual { normalizer, mlp: Mlp::from_flat(&doc.layers, &doc.theta)?, out_scale: doc.out_scale })
            }
        };
        Ok(Self { a: DMatrix::from_row_slice(d, d, &doc.a), t: DVector::from_vec(doc.t), residual })
    }

    pub fn save(&self, path: &Path) -> Result<(), RegistrationError> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_doc())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RegistrationError> {
        Self::from_doc(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// On-disk model: matrices as flat row-major arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub version: u32,
    pub d: usize,
    pub a: Vec<f64>,
    pub t: Vec<f64>,
    pub normalizer: Option<Normalizer>,
    pub layers: Vec<usize>,
    pub theta: Vec<f64>,
    pub out_scale: f64,
}

/// Train the residual MLP on `p_l - (A p_t + t)` over `train_idx`. Targets
/// are divided by their RMS so the network sees unit-scale outputs. The
/// report's row lists are pair indices.
pub fn fit_residual_mlp(
    pairs: &[MatchedPair],
    train_idx: &[usize],
    affine: (&DMatrix<f64>, &DVector<f64>),
    hyper: &MlpHyper,
) -> Result<(Residual, TrainReport), RegistrationError> {
    let d = train_idx.first().map(|&i| pairs[i].p_t.len()).ok_or(RegistrationError::TooFewPairs { need: 2, got: 0 })?;
    let inputs: Vec<&[f64]> = train_idx.iter().map(|&i| pairs[i].p_t.as_slice()).collect();
    let normalizer = Normalizer::fit(&inputs);
    let n = train_idx.len();
    let mut x = DMatrix::zeros(d, n);
    let mut y = DMatrix::zeros(d, n);
    for (c, &i) in train_idx.iter().enumerate() {
        let p = DVector::from_column_slice(&pairs[i].p_t);
        let r = DVector::from_column_slice(&pairs[i].p_l) - (affine.0 * &p + affine.1);
        x.set_column(c, &DVector::from_vec(normalizer.apply(&pairs[i].p_t)));
        y.set_column(c, &r);
    }
    let rms = (y.norm_squared() / y.len() as f64).sqrt();
    let out_scale = if rms > 0.0 { rms } else { 1.0 };
    y /= out_scale;
    let (mlp, mut report) = mlp::train(&[d, HIDDEN, HIDDEN, d], &x, &y, hyper)?;
    report.train_rows = report.train_rows.iter().map(|&r| train_idx[r]).collect();
    report.val_rows = report.val_rows.iter().map(|&r| train_idx[r]).collect();
    Ok((Residual { normalizer, mlp, out_scale }, report))
}

/// Error statistics of `|f(p_t) - p_l|` over the test pairs.
pub fn evaluate(model: &RegistrationModel, pairs: &[MatchedPair], test_idx: &[usize]) -> Result<MetricSummary, RegistrationError> {
    let errs: Vec<f64> = test_idx
        .iter()
        .map(|&i| {
            let q = model.apply(&pairs[i].p_t);
            q.iter().zip(&pairs[i].p_l).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    MetricSummary::from_values(&errs).map_err(|StatsError::Empty| RegistrationError::EmptyTestSet)
}

/// Results of the four-rung comparison on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ladder {
    pub raw: MetricSummary,
    pub rigid: MetricSummary,
    pub affine: MetricSummary,
    pub hybrid: MetricSummary,
    pub mlp_epochs: usize,
}

/// Fit rigid, affine and hybrid models on `train` and evaluate all of them
/// plus the untransformed readings on `test`.
pub fn run_ladder(
    pairs: &[MatchedPair],
    train: &[usize],
    test: &[usize],
    hyper: &MlpHyper,
) -> Result<(Ladder, RegistrationModel), RegistrationError> {
    let d = pairs[0].p_t.len();
    let raw = evaluate(&RegistrationModel::identity(d), pairs, test)?;
    let (r, tr) = fit_rigid_svd(pairs, train)?;
    let rigid = evaluate(&RegistrationModel::linear(r, tr), pairs, test)?;
    let (a, ta) = fit_affine(pairs, train)?;
    let affine_model = RegistrationModel::linear(a.clone(), ta.clone());
    let affine = evaluate(&affine_model, pairs, test)?;
    let (residual, report) = fit_residual_mlp(pairs, train, (&a, &ta), hyper)?;
    let hybrid_model = RegistrationModel { a, t: ta, residual: Some(residual) };
    let hybrid = evaluate(&hybrid_model, pairs, test)?;
    Ok((Ladder { raw, rigid, affine, hybrid, mlp_epochs: report.epochs_run }, hybrid_model))
}

fn dataset_header(d: usize) -> Vec<&'static str> {
    if d == 3 {
        vec!["t_ns", "pTx", "pTy", "pTz", "pLx", "pLy", "pLz"]
    } else {
        vec!["t_ns", "pTx", "pTy", "pLx", "pLy"]
    }
}

pub fn write_dataset_csv<W: Write>(w: W, pairs: &[MatchedPair]) -> Result<(), RegistrationError> {
    let d = pairs.first().map_or(2, |p| p.p_t.len());
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(dataset_header(d))?;
    for p in pairs {
        let mut rec = vec![p.t.0.to_string()];
        rec.extend(p.p_t.iter().chain(&p.p_l).map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_dataset_csv<R: Read>(r: R) -> Result<Vec<MatchedPair>, RegistrationError> {
    let mut rdr = csv::Reader::from_reader(r);
    let d = match rdr.headers()?.len() {
        5 => 2,
        7 => 3,
        _ => return Err(RegistrationError::Dimension),
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64, RegistrationError> {
            rec[k].trim().parse().map_err(|_| RegistrationError::Model(format!("bad number `{}`", &rec[k])))
        };
        let t = rec[0].trim().parse().map_err(|_| RegistrationError::Model(format!("bad t_ns `{}`", &rec[0])))?;
        let p_t = (1..=d).map(num).collect::<Result<Vec<_>, _>>()?;
        let p_l = (d + 1..=2 * d).map(num).collect::<Result<Vec<_>, _>>()?;
        if p_t.iter().chain(&p_l).any(|v| !v.is_finite()) {
            return Err(RegistrationError::NonFinite);
        }
        out.push(MatchedPair { t: TimestampNs(t), p_t, p_l });
    }
    Ok(out)
}
