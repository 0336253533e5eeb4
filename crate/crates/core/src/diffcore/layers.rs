//! Parameterized layers with explicit reverse-mode gradients.
//!
//! Every layer offers `forward_batch` over a batch-major matrix (one sample
//! per row) and a matching `backward_batch(cached inputs, upstream grad)`
//! returning the input gradient plus parameter gradients shaped exactly like
//! the parameters. Models compose these in reverse call order; no graph
//! engine is involved.

use serde::{Deserialize, Serialize};

use crate::diffcore::rng::RngStream;
use crate::diffcore::tensor::{gemm, Tensor};
use crate::error::CoreError;

/// Anything with a fixed-order flat view of its parameters. Grad structs
/// share the parameter types, so the same ordering serves both directions.
pub trait ParamPack {
    fn param_count(&self) -> usize;
    /// Append all parameters to `dst` in canonical order.
    fn write_flat(&self, dst: &mut Vec<f64>);
    /// Add all parameters into `dst` starting at `*pos` (gradient accumulation).
    fn add_flat(&self, dst: &mut [f64], pos: &mut usize);
    /// Overwrite all parameters from `src` starting at `*pos`.
    fn read_flat(&mut self, src: &[f64], pos: &mut usize);
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// silu(t) = t·σ(t).
pub fn silu(t: f64) -> f64 {
    t * sigmoid(t)
}

/// d/dt silu(t) = σ(t)·(1 + t·(1 − σ(t))).
pub fn silu_prime(t: f64) -> f64 {
    let s = sigmoid(t);
    s * (1.0 + t * (1.0 - s))
}

/// Dense affine map y = W·x + b, stored as W: [out, in], b: [out].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    /// Kaiming-style fan-in uniform init, limit √(6/fan_in); zero biases.
    pub fn kaiming(out_dim: usize, in_dim: usize, rng: &mut RngStream) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let data = (0..out_dim * in_dim)
            .map(|_| rng.uniform(-limit, limit))
            .collect();
        Self {
            weight: Tensor::matrix(out_dim, in_dim, data),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    /// All-zero weights and biases (output projections start as identity maps).
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![out_dim, in_dim]),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Single-vector forward: W·x + b.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, CoreError> {
        if x.len() != self.in_dim() {
            return Err(CoreError::LengthMismatch {
                context: "linear_forward input",
                expected: self.in_dim(),
                actual: x.len(),
            });
        }
        let (out, inp) = (self.out_dim(), self.in_dim());
        let mut y = self.bias.data().to_vec();
        for i in 0..out {
            let row = &self.weight.data()[i * inp..(i + 1) * inp];
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            y[i] += acc;
        }
        Ok(y)
    }

    /// Batch forward: x [n, in] → [n, out] = x·Wᵀ + b.
    pub fn forward_batch(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.cols(), self.in_dim(), "linear batch input width");
        let mut y = gemm(false, true, x, &self.weight);
        let b = self.bias.data();
        for i in 0..y.rows() {
            for (v, bv) in y.row_mut(i).iter_mut().zip(b) {
                *v += bv;
            }
        }
        y
    }

    /// Batch backward: given the forward input and ∂L/∂y, produce ∂L/∂x and
    /// parameter gradients (dW = dyᵀ·x, db = column sums of dy).
    pub fn backward_batch(&self, x: &Tensor, dy: &Tensor) -> (Tensor, LinearParams) {
        assert_eq!(dy.cols(), self.out_dim(), "linear backward grad width");
        assert_eq!(dy.rows(), x.rows(), "linear backward batch size");
        let dx = gemm(false, false, dy, &self.weight);
        let dw = gemm(true, false, dy, x);
        let mut db = Tensor::zeros(vec![self.out_dim()]);
        for i in 0..dy.rows() {
            for (acc, g) in db.data_mut().iter_mut().zip(dy.row(i)) {
                *acc += g;
            }
        }
        (
            dx,
            LinearParams {
                weight: dw,
                bias: db,
            },
        )
    }
}

impl ParamPack for LinearParams {
    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn write_flat(&self, dst: &mut Vec<f64>) {
        dst.extend_from_slice(self.weight.data());
        dst.extend_from_slice(self.bias.data());
    }

    fn add_flat(&self, dst: &mut [f64], pos: &mut usize) {
        for v in self.weight.data().iter().chain(self.bias.data()) {
            dst[*pos] += v;
            *pos += 1;
        }
    }

    fn read_flat(&mut self, src: &[f64], pos: &mut usize) {
        for v in self.weight.data_mut().iter_mut().chain(self.bias.data_mut()) {
            *v = src[*pos];
            *pos += 1;
        }
    }
}

/// Gated activation: split the input in half, return silu(a) ⊙ b.
pub fn swiglu(x: &[f64]) -> Result<Vec<f64>, CoreError> {
    if x.len() % 2 != 0 {
        return Err(CoreError::contract("swiglu input length must be even"));
    }
    let k = x.len() / 2;
    Ok((0..k).map(|i| silu(x[i]) * x[k + i]).collect())
}

/// Batch swiglu: [n, 2k] → [n, k], halving each row.
pub fn swiglu_batch(x: &Tensor) -> Tensor {
    let two_k = x.cols();
    assert_eq!(two_k % 2, 0, "swiglu width must be even");
    let k = two_k / 2;
    let n = x.rows();
    let mut out = Tensor::zeros(vec![n, k]);
    for i in 0..n {
        let row = x.row(i);
        for j in 0..k {
            out.row_mut(i)[j] = silu(row[j]) * row[k + j];
        }
    }
    out
}

/// Batch swiglu backward: from the pre-activation and ∂L/∂out, return ∂L/∂x.
pub fn swiglu_backward_batch(x: &Tensor, dy: &Tensor) -> Tensor {
    let k = x.cols() / 2;
    assert_eq!(dy.cols(), k, "swiglu backward grad width");
    let n = x.rows();
    let mut dx = Tensor::zeros(vec![n, 2 * k]);
    for i in 0..n {
        let row = x.row(i);
        let g = dy.row(i);
        let drow = dx.row_mut(i);
        for j in 0..k {
            let (a, b) = (row[j], row[k + j]);
            drow[j] = g[j] * silu_prime(a) * b;
            drow[k + j] = g[j] * silu(a);
        }
    }
    dx
}

/// Width-preserving residual unit: x + swiglu(expand(x)), expand: h → 2h.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub expand: LinearParams,
}

/// Intermediates cached by [`ResidualBlock::forward_batch`] for the backward pass.
pub struct ResidualCache {
    pre: Tensor,
}

impl ResidualBlock {
    pub fn new(width: usize, rng: &mut RngStream) -> Self {
        Self {
            expand: LinearParams::kaiming(2 * width, width, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.expand.in_dim()
    }

    pub fn forward_batch(&self, x: &Tensor) -> (Tensor, ResidualCache) {
        let pre = self.expand.forward_batch(x);
        let gated = swiglu_batch(&pre);
        let mut out = x.clone();
        for (o, g) in out.data_mut().iter_mut().zip(gated.data()) {
            *o += g;
        }
        (out, ResidualCache { pre })
    }

    pub fn backward_batch(
        &self,
        x: &Tensor,
        cache: &ResidualCache,
        dy: &Tensor,
    ) -> (Tensor, ResidualBlock) {
        let dpre = swiglu_backward_batch(&cache.pre, dy);
        let (branch_dx, grads) = self.expand.backward_batch(x, &dpre);
        let mut dx = dy.clone();
        for (d, b) in dx.data_mut().iter_mut().zip(branch_dx.data()) {
            *d += b;
        }
        (dx, ResidualBlock { expand: grads })
    }
}

impl ParamPack for ResidualBlock {
    fn param_count(&self) -> usize {
        self.expand.param_count()
    }

    fn write_flat(&self, dst: &mut Vec<f64>) {
        self.expand.write_flat(dst);
    }

    fn add_flat(&self, dst: &mut [f64], pos: &mut usize) {
        self.expand.add_flat(dst, pos);
    }

    fn read_flat(&mut self, src: &[f64], pos: &mut usize) {
        self.expand.read_flat(src, pos);
    }
}
