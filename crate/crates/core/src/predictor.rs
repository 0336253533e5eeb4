//! The auxiliary-information predictor g_φ: estimates the discarded latent
//! suffix z_aux from the stored prefix z_comp. A single Linear → SwiGLU →
//! Linear stack; the output projection starts at zero so the untrained model
//! predicts the neutral ẑ_aux = 0.

use serde::{Deserialize, Serialize};

use crate::diffcore::layers::{
    swiglu_backward_batch, swiglu_batch, LinearParams, ParamPack,
};
use crate::diffcore::rng::RngStream;
use crate::diffcore::tensor::Tensor;
use crate::error::CoreError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorNet {
    /// m → 2·h_p.
    pub input_proj: LinearParams,
    /// h_p → d−m; zero-initialized.
    pub out_proj: LinearParams,
}

/// Intermediates from [`PredictorNet::forward_batch_cached`].
pub struct PredictorCache {
    z: Tensor,
    /// Pre-swiglu projection, [n, 2h_p].
    u: Tensor,
    /// Post-swiglu hidden state, [n, h_p].
    v: Tensor,
}

impl PredictorNet {
    pub fn new(m: usize, out_dim: usize, hidden: usize, rng: &mut RngStream) -> Result<Self, CoreError> {
        if m == 0 || out_dim == 0 || hidden == 0 {
            return Err(CoreError::contract("predictor dimensions must be positive"));
        }
        Ok(Self {
            input_proj: LinearParams::kaiming(2 * hidden, m, rng),
            out_proj: LinearParams::zeros(out_dim, hidden),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.input_proj.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.out_proj.out_dim()
    }

    pub fn hidden(&self) -> usize {
        self.out_proj.in_dim()
    }

    /// ẑ_aux for one stored vector.
    pub fn predict_aux(&self, z_comp: &[f64]) -> Result<Vec<f64>, CoreError> {
        if z_comp.len() != self.in_dim() {
            return Err(CoreError::LengthMismatch {
                context: "predict_aux input",
                expected: self.in_dim(),
                actual: z_comp.len(),
            });
        }
        let y = self.forward_batch(&Tensor::matrix(1, z_comp.len(), z_comp.to_vec()));
        Ok(y.into_data())
    }

    pub fn forward_batch(&self, z: &Tensor) -> Tensor {
        self.out_proj
            .forward_batch(&swiglu_batch(&self.input_proj.forward_batch(z)))
    }

    pub fn forward_batch_cached(&self, z: &Tensor) -> (Tensor, PredictorCache) {
        let u = self.input_proj.forward_batch(z);
        let v = swiglu_batch(&u);
        let y = self.out_proj.forward_batch(&v);
        (
            y,
            PredictorCache {
                z: z.clone(),
                u,
                v,
            },
        )
    }

    /// ∂L/∂ŷ → (∂L/∂z_comp, parameter grads).
    pub fn backward_batch(&self, cache: &PredictorCache, dy: &Tensor) -> (Tensor, PredictorNet) {
        let (dv, g_out) = self.out_proj.backward_batch(&cache.v, dy);
        let du = swiglu_backward_batch(&cache.u, &dv);
        let (dz, g_in) = self.input_proj.backward_batch(&cache.z, &du);
        (
            dz,
            PredictorNet {
                input_proj: g_in,
                out_proj: g_out,
            },
        )
    }
}

impl ParamPack for PredictorNet {
    fn param_count(&self) -> usize {
        self.input_proj.param_count() + self.out_proj.param_count()
    }

    fn write_flat(&self, dst: &mut Vec<f64>) {
        self.input_proj.write_flat(dst);
        self.out_proj.write_flat(dst);
    }

    fn add_flat(&self, dst: &mut [f64], pos: &mut usize) {
        self.input_proj.add_flat(dst, pos);
        self.out_proj.add_flat(dst, pos);
    }

    fn read_flat(&mut self, src: &[f64], pos: &mut usize) {
        self.input_proj.read_flat(src, pos);
        self.out_proj.read_flat(src, pos);
    }
}
