//! Small tanh MLP trained with Adam on mini-batches.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RegistrationError;
use crate::rng::RngStream;

pub const HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpHyper {
    pub epochs: usize,
    pub batch: usize,
    /// Adam step size.
    pub step: f64,
    pub seed: u64,
    pub val_fraction: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_patience() -> usize {
    50
}

impl Default for MlpHyper {
    fn default() -> Self {
        Self { epochs: 2000, batch: 256, step: 1e-3, seed: 0, val_fraction: 0.1, patience: 50 }
    }
}

/// Fully connected network with tanh hidden layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<usize>,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(layers: &[usize], rng: &mut impl Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layers.windows(2) {
            let lim = (6.0 / (w[0] + w[1]) as f64).sqrt();
            weights.push(DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-lim..lim)));
            biases.push(DVector::zeros(w[1]));
        }
        Self { layers: layers.to_vec(), weights, biases }
    }

    pub fn param_count(layers: &[usize]) -> usize {
        layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Row-major weights then bias, layer by layer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::param_count(&self.layers));
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for r in 0..w.nrows() {
                out.extend(w.row(r).iter());
            }
            out.extend(b.iter());
        }
        out
    }

    pub fn from_flat(layers: &[usize], theta: &[f64]) -> Result<Self, RegistrationError> {
        if layers.len() < 2 || theta.len() != Self::param_count(layers) {
            return Err(RegistrationError::Model("parameter count does not match layer sizes".into()));
        }
        let mut off = 0;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layers.windows(2) {
            let (i, o) = (w[0], w[1]);
            weights.push(DMatrix::from_row_slice(o, i, &theta[off..off + i * o]));
            off += i * o;
            biases.push(DVector::from_column_slice(&theta[off..off + o]));
            off += o;
        }
        Ok(Self { layers: layers.to_vec(), weights, biases })
    }

    /// Evaluate on a batch of column inputs; returns the activations of every
    /// layer, input first.
    fn forward_all(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = vec![x.clone()];
        let last = self.weights.len() - 1;
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * acts.last().expect("non-empty");
            for mut c in z.column_iter_mut() {
                c += b;
            }
            if k < last {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_all(x).pop().expect("non-empty")
    }

    /// Mean squared error and its gradients.
    fn grad(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let acts = self.forward_all(x);
        let out = acts.last().expect("non-empty");
        let diff = out - y;
        let scale = 1.0 / diff.len() as f64;
        let loss = diff.norm_squared() * scale;
        let mut delta = diff * (2.0 * scale);
        let nl = self.weights.len();
        let mut gw = vec![DMatrix::zeros(0, 0); nl];
        let mut gb = vec![DVector::zeros(0); nl];
        for k in (0..nl).rev() {
            gw[k] = &delta * acts[k].transpose();
            gb[k] = delta.column_sum();
            if k > 0 {
                let mut back = self.weights[k].transpose() * &delta;
                back.zip_apply(&acts[k], |g, a| *g *= 1.0 - a * a);
                delta = back;
            }
        }
        (loss, gw, gb)
    }

    pub fn mse(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        (self.forward(x) - y).norm_squared() / y.len() as f64
    }
}

struct Adam {
    t: i32,
    mw: Vec<DMatrix<f64>>,
    vw: Vec<DMatrix<f64>>,
    mb: Vec<DVector<f64>>,
    vb: Vec<DVector<f64>>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &Mlp) -> Self {
        let zw = |w: &DMatrix<f64>| DMatrix::zeros(w.nrows(), w.ncols());
        Self {
            t: 0,
            mw: net.weights.iter().map(zw).collect(),
            vw: net.weights.iter().map(zw).collect(),
            mb: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            vb: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    fn step(&mut self, net: &mut Mlp, gw: &[DMatrix<f64>], gb: &[DVector<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let upd = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        };
        for k in 0..net.weights.len() {
            upd(net.weights[k].as_mut_slice(), gw[k].as_slice(), self.mw[k].as_mut_slice(), self.vw[k].as_mut_slice());
            upd(net.biases[k].as_mut_slice(), gb[k].as_slice(), self.mb[k].as_mut_slice(), self.vb[k].as_mut_slice());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Rows of the caller's input actually used for gradient steps.
    pub train_rows: Vec<usize>,
    /// Rows used only for early stopping.
    pub val_rows: Vec<usize>,
}

fn columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
}

/// Train on the columns of `x` -> `y`. A seeded shuffle holds out
/// `val_fraction` of the columns for early stopping; the best-validation
/// parameters are returned.
pub fn train(layers: &[usize], x: &DMatrix<f64>, y: &DMatrix<f64>, hyper: &MlpHyper) -> Result<(Mlp, TrainReport), RegistrationError> {
    let n = x.ncols();
    if n < 2 || hyper.batch == 0 || !(0.0..1.0).contains(&hyper.val_fraction) {
        return Err(RegistrationError::Model("invalid training set or hyperparameters".into()));
    }
    let mut rng = RngStream::new(hyper.seed, "reg.mlp");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * hyper.val_fraction).round() as usize).clamp(1, n - 1);
    let val_rows = order[n - n_val..].to_vec();
    let mut train_rows = order[..n - n_val].to_vec();
    let xv = columns(x, &val_rows);
    let yv = columns(y, &val_rows);

    let mut net = Mlp::init(layers, &mut rng);
    let mut adam = Adam::new(&net);
    let mut best = (net.mse(&xv, &yv), net.clone(), 0usize);
    let mut epochs_run = 0;
    for epoch in 1..=hyper.epochs {
        epochs_run = epoch;
        train_rows.shuffle(&mut rng);
        for chunk in train_rows.chunks(hyper.batch) {
            let (loss, gw, gb) = net.grad(&columns(x, chunk), &columns(y, chunk));
            if !loss.is_finite() {
                return Err(RegistrationError::NonFiniteLoss { epoch, loss });
            }
            adam.step(&mut net, &gw, &gb, hyper.step);
        }
        let val = net.mse(&xv, &yv);
        if !val.is_finite() {
            return Err(RegistrationError::NonFiniteLoss { epoch, loss: val });
        }
        if val < best.0 {
            best = (val, net.clone(), epoch);
        } else if epoch - best.2 >= hyper.patience {
            break;
        }
    }
    train_rows.sort_unstable();
    let mut val_rows = val_rows;
    val_rows.sort_unstable();
    let report = TrainReport { epochs_run, best_epoch: best.2, best_val_loss: best.0, train_rows, val_rows };
    Ok((best.1, report))
}
