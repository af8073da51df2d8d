//! Dense layers and two-layer perceptrons with hand-written backward passes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fully connected layer, `y = W x + b`, with `W` stored row-major
/// (`out × inp`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inp: usize,
    pub out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Self {
            inp,
            out,
            w: vec![0.0; inp * out],
            b: vec![0.0; out],
        }
    }

    /// Weights and biases drawn from `U(-1/sqrt(inp), 1/sqrt(inp))`.
    pub fn init(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inp.max(1) as f64).sqrt();
        let mut draw = || rng.random_range(-bound..=bound);
        let w = (0..inp * out).map(|_| draw()).collect();
        let b = (0..out).map(|_| draw()).collect();
        Self { inp, out, w, b }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.w[i * self.inp..(i + 1) * self.inp]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inp);
        (0..self.out).map(|i| self.b[i] + dot(self.row(i), x)).collect()
    }

    /// Accumulates `dy` into the parameter gradient `grad` and, when given,
    /// the input gradient `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense, dx: Option<&mut [f64]>) {
        for (i, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b[i] += g;
            axpy(g, x, &mut grad.w[i * self.inp..(i + 1) * self.inp]);
        }
        if let Some(dx) = dx {
            for (i, &g) in dy.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, self.row(i), dx);
                }
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `Dense → ReLU → Dense`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Dense,
    pub output: Dense,
}

/// Intermediate values of one [`Mlp`] evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTrace {
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    pub out: Vec<f64>,
}

impl Mlp {
    pub fn init(inp: usize, hidden: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            hidden: Dense::init(inp, hidden, rng),
            output: Dense::init(hidden, out, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: Dense::zeros(self.hidden.inp, self.hidden.out),
            output: Dense::zeros(self.output.inp, self.output.out),
        }
    }

    pub fn inp(&self) -> usize {
        self.hidden.inp
    }

    pub fn out(&self) -> usize {
        self.output.out
    }

    pub fn trace(&self, x: &[f64]) -> MlpTrace {
        let pre = self.hidden.forward(x);
        self.trace_from_pre(pre)
    }

    /// Completes a forward pass from precomputed hidden pre-activations.
    pub fn trace_from_pre(&self, pre: Vec<f64>) -> MlpTrace {
        let act: Vec<f64> = pre.iter().map(|&z| relu(z)).collect();
        let out = self.output.forward(&act);
        MlpTrace { pre, act, out }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).out
    }

    /// Backpropagates `dy` through the output layer and the ReLU, returning
    /// the gradient with respect to the hidden pre-activations.
    pub fn backward_to_pre(&self, t: &MlpTrace, dy: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let mut dact = vec![0.0; self.output.inp];
        self.output.backward(&t.act, dy, &mut grad.output, Some(&mut dact));
        dact.iter()
            .zip(&t.pre)
            .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
            .collect()
    }

    pub fn backward(&self, x: &[f64], t: &MlpTrace, dy: &[f64], grad: &mut Mlp, dx: Option<&mut [f64]>) {
        let dpre = self.backward_to_pre(t, dy, grad);
        self.hidden.backward(x, &dpre, &mut grad.hidden, dx);
    }

    pub fn tensors(&self) -> [&Vec<f64>; 4] {
        [&self.hidden.w, &self.hidden.b, &self.output.w, &self.output.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.hidden.w,
            &mut self.hidden.b,
            &mut self.output.w,
            &mut self.output.b,
        ]
    }
}

pub(crate) const TENSOR_SUFFIXES: [&str; 4] = ["hidden.w", "hidden.b", "output.w", "output.b"];

/// On-disk form of a dense layer: `weights[out][inp]` and `bias[out]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseDoc {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpDoc {
    pub hidden: DenseDoc,
    pub output: DenseDoc,
}

impl From<&Dense> for DenseDoc {
    fn from(d: &Dense) -> Self {
        Self {
            weights: d.w.chunks(d.inp.max(1)).map(<[f64]>::to_vec).collect(),
            bias: d.b.clone(),
        }
    }
}

impl DenseDoc {
    fn into_dense(self, inp: usize, out: usize, name: &str) -> Result<Dense> {
        if self.bias.len() != out || self.weights.len() != out || self.weights.iter().any(|r| r.len() != inp) {
            return Err(Error::Model(format!(
                "{name}: expected {out}x{inp} weights and {out} biases"
            )));
        }
        let w: Vec<f64> = self.weights.into_iter().flatten().collect();
        if w.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::Model(format!("{name}: non-finite weight")));
        }
        Ok(Dense {
            inp,
            out,
            w,
            b: self.bias,
        })
    }
}

impl From<&Mlp> for MlpDoc {
    fn from(m: &Mlp) -> Self {
        Self {
            hidden: (&m.hidden).into(),
            output: (&m.output).into(),
        }
    }
}

impl MlpDoc {
    pub fn into_mlp(self, inp: usize, hidden: usize, out: usize, name: &str) -> Result<Mlp> {
        Ok(Mlp {
            hidden: self.hidden.into_dense(inp, hidden, &format!("{name}.hidden"))?,
            output: self.output.into_dense(hidden, out, &format!("{name}.output"))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::init(5, 7, 3, &mut rng);
        let x: Vec<f64> = (0..5).map(|i| (i as f64 * 0.37).sin()).collect();
        let w = [0.3, -1.2, 0.8];
        let loss = |m: &Mlp, x: &[f64]| dot(&m.forward(x), &w);
        let t = mlp.trace(&x);
        let mut grad = mlp.zeros_like();
        let mut dx = vec![0.0; 5];
        mlp.backward(&x, &t, &w, &mut grad, Some(&mut dx));
        let h = 1e-6;
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&mlp, &xp) - loss(&mlp, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-7, "dx[{i}] {fd} vs {}", dx[i]);
        }
        for (ti, g) in grad.tensors().iter().enumerate() {
            for j in 0..g.len() {
                let mut p = mlp.clone();
                p.tensors_mut()[ti][j] += h;
                let mut m = mlp.clone();
                m.tensors_mut()[ti][j] -= h;
                let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-7, "tensor {ti}[{j}]");
            }
        }
    }

    #[test]
    fn doc_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mlp = Mlp::init(4, 3, 2, &mut rng);
        let json = serde_json::to_string(&MlpDoc::from(&mlp)).unwrap();
        let back: MlpDoc = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_mlp(4, 3, 2, "m").unwrap(), mlp);
    }

    #[test]
    fn doc_rejects_wrong_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let doc = MlpDoc::from(&Mlp::init(4, 3, 2, &mut rng));
        assert!(doc.into_mlp(5, 3, 2, "m").is_err());
    }
}
