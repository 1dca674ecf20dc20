//! Feature maps, read-out matrix and their exact derivatives.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviations below this are replaced by it.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// `φ(u) = [1, ũ]`.
    Linear,
    /// Two tanh layers on `ũ`.
    Mlp,
}

/// Per-entry standardisation of inputs and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub in_mean: Vec<f64>,
    pub in_scale: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_scale: Vec<f64>,
}

fn column_stats(data: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = data.nrows() as f64;
    data.column_iter()
        .map(|col| {
            let mean = col.sum() / n;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt().max(SCALE_FLOOR))
        })
        .unzip()
}

impl Normalizer {
    /// Mean and population standard deviation of each column (rows are samples).
    pub fn fit(inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<Self> {
        if inputs.nrows() == 0 || inputs.nrows() != targets.nrows() {
            return Err(Error::Validation("normalizer needs a non-empty, aligned sample set".into()));
        }
        let (in_mean, in_scale) = column_stats(inputs);
        let (out_mean, out_scale) = column_stats(targets);
        Ok(Self {
            in_mean,
            in_scale,
            out_mean,
            out_scale,
        })
    }

    pub fn identity(m: usize, d: usize) -> Self {
        Self {
            in_mean: vec![0.0; m],
            in_scale: vec![1.0; m],
            out_mean: vec![0.0; d],
            out_scale: vec![1.0; d],
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.in_mean.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.out_mean.len()
    }

    pub fn normalize_input(&self, u: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            u.len(),
            u.iter().zip(&self.in_mean).zip(&self.in_scale).map(|((x, m), s)| (x - m) / s),
        )
    }

    pub fn denormalize_output(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            y.len(),
            y.iter().zip(&self.out_mean).zip(&self.out_scale).map(|((x, m), s)| x * s + m),
        )
    }

    /// Samples as columns, normalised: `m × n`.
    pub fn normalize_inputs(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(inputs.ncols(), inputs.nrows(), |j, i| {
            (inputs[(i, j)] - self.in_mean[j]) / self.in_scale[j]
        })
    }

    /// Targets as columns, normalised: `d × n`.
    pub fn normalize_targets(&self, targets: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(targets.ncols(), targets.nrows(), |j, i| {
            (targets[(i, j)] - self.out_mean[j]) / self.out_scale[j]
        })
    }
}

/// Hidden layers `h1 = tanh(W1 ũ + b1)`, `h2 = tanh(W2 h1 + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl Mlp {
    /// Glorot-uniform weights and zero biases.
    pub fn glorot(m: usize, hidden: [usize; 2], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit))
        };
        let w1 = layer(hidden[0], m);
        let w2 = layer(hidden[1], hidden[0]);
        Self {
            w1,
            b1: DVector::zeros(hidden[0]),
            w2,
            b2: DVector::zeros(hidden[1]),
        }
    }

    pub fn hidden(&self) -> [usize; 2] {
        [self.w1.nrows(), self.w2.nrows()]
    }

    fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

/// Trainable map `ũ ↦ A φ(ũ)` in normalised coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    pub kind: FeatureKind,
    pub mlp: Option<Mlp>,
    pub a: DMatrix<f64>,
}

/// Intermediate values of a batch forward pass.
struct Forward {
    h1: DMatrix<f64>,
    h2: DMatrix<f64>,
    out: DMatrix<f64>,
}

fn tanh_layer(w: &DMatrix<f64>, b: &DVector<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = w * x;
    for mut col in z.column_iter_mut() {
        col += b;
        col.apply(|v| *v = v.tanh());
    }
    z
}

fn with_constant_row(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut f = DMatrix::from_element(x.nrows() + 1, x.ncols(), 1.0);
    f.rows_mut(1, x.nrows()).copy_from(x);
    f
}

impl Regressor {
    /// Zero read-out, so the initial prediction is the target mean.
    pub fn new(kind: FeatureKind, m: usize, d: usize, hidden: [usize; 2], seed: u64) -> Self {
        match kind {
            FeatureKind::Linear => Self {
                kind,
                mlp: None,
                a: DMatrix::zeros(d, m + 1),
            },
            FeatureKind::Mlp => Self {
                kind,
                mlp: Some(Mlp::glorot(m, hidden, seed)),
                a: DMatrix::zeros(d, hidden[1]),
            },
        }
    }

    pub fn n_outputs(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.a.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.mlp.as_ref().map_or(0, Mlp::n_params) + self.a.len()
    }

    /// Features of one normalised input.
    pub fn features(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.mlp {
            None => {
                let mut f = DVector::from_element(x.len() + 1, 1.0);
                f.rows_mut(1, x.len()).copy_from(x);
                f
            }
            Some(mlp) => {
                let h1 = (&mlp.w1 * x + &mlp.b1).map(f64::tanh);
                (&mlp.w2 * h1 + &mlp.b2).map(f64::tanh)
            }
        }
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * self.features(x)
    }

    /// `∂(A φ(x))/∂x` for one normalised input.
    pub fn input_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.mlp {
            None => self.a.columns(1, x.len()).into_owned(),
            Some(mlp) => {
                let h1 = (&mlp.w1 * x + &mlp.b1).map(f64::tanh);
                let h2 = (&mlp.w2 * &h1 + &mlp.b2).map(f64::tanh);
                let mut inner = mlp.w1.clone();
                for (i, mut row) in inner.row_iter_mut().enumerate() {
                    row *= 1.0 - h1[i] * h1[i];
                }
                let mut mid = &mlp.w2 * inner;
                for (i, mut row) in mid.row_iter_mut().enumerate() {
                    row *= 1.0 - h2[i] * h2[i];
                }
                &self.a * mid
            }
        }
    }

    fn forward_batch(&self, x: &DMatrix<f64>) -> Forward {
        match &self.mlp {
            None => {
                let f = with_constant_row(x);
                let out = &self.a * &f;
                Forward {
                    h1: DMatrix::zeros(0, 0),
                    h2: f,
                    out,
                }
            }
            Some(mlp) => {
                let h1 = tanh_layer(&mlp.w1, &mlp.b1, x);
                let h2 = tanh_layer(&mlp.w2, &mlp.b2, &h1);
                let out = &self.a * &h2;
                Forward { h1, h2, out }
            }
        }
    }

    /// Mean squared prediction error over columns of `x` (`m × n`) and `y` (`d × n`).
    pub fn loss(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        let n = x.ncols().max(1) as f64;
        (self.forward_batch(x).out - y).norm_squared() / n
    }

    /// Loss and its gradient with respect to [`Self::params`], by reverse mode.
    pub fn loss_and_grad(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, Vec<f64>) {
        let n = x.ncols().max(1) as f64;
        let fw = self.forward_batch(x);
        let err = fw.out - y;
        let loss = err.norm_squared() / n;
        let g_out = err * (2.0 / n);
        let g_a = &g_out * fw.h2.transpose();

        let mut grad = Vec::with_capacity(self.n_params());
        if let Some(mlp) = &self.mlp {
            let mut g_z2 = self.a.transpose() * &g_out;
            g_z2.zip_apply(&fw.h2, |g, h| *g *= 1.0 - h * h);
            let g_w2 = &g_z2 * fw.h1.transpose();
            let g_b2 = g_z2.column_sum();
            let mut g_z1 = mlp.w2.transpose() * &g_z2;
            g_z1.zip_apply(&fw.h1, |g, h| *g *= 1.0 - h * h);
            let g_w1 = &g_z1 * x.transpose();
            let g_b1 = g_z1.column_sum();
            grad.extend_from_slice(g_w1.as_slice());
            grad.extend_from_slice(g_b1.as_slice());
            grad.extend_from_slice(g_w2.as_slice());
            grad.extend_from_slice(g_b2.as_slice());
        }
        grad.extend_from_slice(g_a.as_slice());
        (loss, grad)
    }

    /// Flat parameter vector: `W1, b1, W2, b2` (MLP only), then `A`, all column-major.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        if let Some(mlp) = &self.mlp {
            p.extend_from_slice(mlp.w1.as_slice());
            p.extend_from_slice(mlp.b1.as_slice());
            p.extend_from_slice(mlp.w2.as_slice());
            p.extend_from_slice(mlp.b2.as_slice());
        }
        p.extend_from_slice(self.a.as_slice());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter vector length");
        let mut at = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&p[at..at + dst.len()]);
            at += dst.len();
        };
        if let Some(mlp) = &mut self.mlp {
            take(mlp.w1.as_mut_slice());
            take(mlp.b1.as_mut_slice());
            take(mlp.w2.as_mut_slice());
            take(mlp.b2.as_mut_slice());
        }
        take(self.a.as_mut_slice());
    }
}
