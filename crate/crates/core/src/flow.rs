//! The invertible encoder f_θ: affine coupling layers alternating with fixed
//! random permutations, exactly invertible by construction, plus the latent
//! split into the stored prefix z_comp and discarded suffix z_aux.
//!
//! Batch convention throughout: one sample per row. Every `*_cached` forward
//! keeps the intermediates its `*_backward_batch` twin needs; coupling
//! parameters receive gradients from both the forward (encode) and inverse
//! (reconstruct) passes, so both directions carry a backward implementation.

use serde::{Deserialize, Serialize};

use crate::diffcore::layers::{
    swiglu_backward_batch, swiglu_batch, LinearParams, ParamPack, ResidualBlock, ResidualCache,
};
use crate::diffcore::rng::RngStream;
use crate::diffcore::tensor::Tensor;
use crate::error::CoreError;

/// Shape hyperparameters for a [`FlowEncoder`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Data dimension; must be even (the pipeline zero-pads odd inputs).
    pub d: usize,
    /// Stored-part dimension, 0 < m < d.
    pub m: usize,
    /// Number of (coupling, permutation) pairs.
    pub n_layers: usize,
    /// Coupling subnet hidden width h.
    pub hidden: usize,
    /// Residual blocks per subnet.
    pub residual_blocks: usize,
    /// Scale clamp bound; effective s = s_max·tanh(s_raw/s_max).
    pub s_max: f64,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.d < 2 || self.d % 2 != 0 {
            return Err(CoreError::contract("flow dimension d must be even and >= 2"));
        }
        if self.m == 0 || self.m >= self.d {
            return Err(CoreError::contract("latent split m must satisfy 0 < m < d"));
        }
        if self.n_layers == 0 {
            return Err(CoreError::contract("flow needs at least one coupling pair"));
        }
        if self.hidden == 0 {
            return Err(CoreError::contract("coupling hidden width must be positive"));
        }
        if !(self.s_max > 0.0 && self.s_max.is_finite()) {
            return Err(CoreError::contract("s_max must be positive and finite"));
        }
        Ok(())
    }
}

/// The conditioner 𝓝 inside one coupling: maps x1 ∈ ℝ^{d/2} to scale and
/// translation, each ℝ^{d/2}. Output projection starts at zero so the layer
/// begins as the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingSubnet {
    pub input_proj: LinearParams,
    pub blocks: Vec<ResidualBlock>,
    pub out_proj: LinearParams,
    pub s_max: f64,
}

/// Intermediates from [`CouplingSubnet::forward_batch_cached`].
pub struct SubnetCache {
    x1: Tensor,
    /// Pre-swiglu projection, [n, 2h].
    u: Tensor,
    /// vs[0] is post-swiglu; vs[i+1] the i-th residual block's output.
    vs: Vec<Tensor>,
    block_caches: Vec<ResidualCache>,
    /// Effective (clamped) scale, kept for the tanh backward.
    s: Tensor,
}

impl CouplingSubnet {
    pub fn new(d: usize, hidden: usize, residual_blocks: usize, s_max: f64, rng: &mut RngStream) -> Self {
        let half = d / 2;
        Self {
            input_proj: LinearParams::kaiming(2 * hidden, half, rng),
            blocks: (0..residual_blocks)
                .map(|_| ResidualBlock::new(hidden, rng))
                .collect(),
            out_proj: LinearParams::zeros(d, hidden),
            s_max,
        }
    }

    pub fn half_dim(&self) -> usize {
        self.input_proj.in_dim()
    }

    /// (s, t) for a batch of x1 rows, with the cache for the backward pass.
    pub fn forward_batch_cached(&self, x1: &Tensor) -> (Tensor, Tensor, SubnetCache) {
        let u = self.input_proj.forward_batch(x1);
        let mut vs = vec![swiglu_batch(&u)];
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (v, cache) = block.forward_batch(vs.last().unwrap());
            vs.push(v);
            block_caches.push(cache);
        }
        let w = self.out_proj.forward_batch(vs.last().unwrap());
        let half = self.half_dim();
        let (s_raw, t) = w.split_cols(half);
        let mut s = s_raw;
        for v in s.data_mut() {
            *v = self.s_max * (*v / self.s_max).tanh();
        }
        let cache = SubnetCache {
            x1: x1.clone(),
            u,
            vs,
            block_caches,
            s: s.clone(),
        };
        (s, t, cache)
    }

    /// (s, t) without retaining intermediates.
    pub fn forward_batch(&self, x1: &Tensor) -> (Tensor, Tensor) {
        let (s, t, _) = self.forward_batch_cached(x1);
        (s, t)
    }

    /// Propagate (∂L/∂s, ∂L/∂t) back to the subnet input and parameters.
    pub fn backward_batch(
        &self,
        cache: &SubnetCache,
        ds: &Tensor,
        dt: &Tensor,
    ) -> (Tensor, CouplingSubnet) {
        // Through the clamp: ds_raw = ds · (1 − (s/s_max)²).
        let mut dw = Tensor::zeros(vec![ds.rows(), 2 * self.half_dim()]);
        let half = self.half_dim();
        for i in 0..ds.rows() {
            let srow = cache.s.row(i);
            let (dsr, dtr) = (ds.row(i), dt.row(i));
            let out = dw.row_mut(i);
            for j in 0..half {
                let th = srow[j] / self.s_max;
                out[j] = dsr[j] * (1.0 - th * th);
                out[half + j] = dtr[j];
            }
        }
        let (mut dv, g_out) = self.out_proj.backward_batch(cache.vs.last().unwrap(), &dw);
        let mut g_blocks = vec![
            ResidualBlock {
                expand: LinearParams::zeros(0, 0)
            };
            self.blocks.len()
        ];
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let (dxb, g) = block.backward_batch(&cache.vs[i], &cache.block_caches[i], &dv);
            dv = dxb;
            g_blocks[i] = g;
        }
        let du = swiglu_backward_batch(&cache.u, &dv);
        let (dx1, g_in) = self.input_proj.backward_batch(&cache.x1, &du);
        (
            dx1,
            CouplingSubnet {
                input_proj: g_in,
                blocks: g_blocks,
                out_proj: g_out,
                s_max: self.s_max,
            },
        )
    }
}

impl ParamPack for CouplingSubnet {
    fn param_count(&self) -> usize {
        self.input_proj.param_count()
            + self.blocks.iter().map(|b| b.param_count()).sum::<usize>()
            + self.out_proj.param_count()
    }

    fn write_flat(&self, dst: &mut Vec<f64>) {
        self.input_proj.write_flat(dst);
        for b in &self.blocks {
            b.write_flat(dst);
        }
        self.out_proj.write_flat(dst);
    }

    fn add_flat(&self, dst: &mut [f64], pos: &mut usize) {
        self.input_proj.add_flat(dst, pos);
        for b in &self.blocks {
            b.add_flat(dst, pos);
        }
        self.out_proj.add_flat(dst, pos);
    }

    fn read_flat(&mut self, src: &[f64], pos: &mut usize) {
        self.input_proj.read_flat(src, pos);
        for b in &mut self.blocks {
            b.read_flat(src, pos);
        }
        self.out_proj.read_flat(src, pos);
    }
}

/// One affine coupling: y1 = x1, y2 = x2 ⊙ exp(s) + t with (s, t) = 𝓝(x1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    pub subnet: CouplingSubnet,
    pub d: usize,
}

/// Cache for the encode-direction backward pass.
pub struct CouplingForwardCache {
    subnet: SubnetCache,
    /// exp(s), [n, d/2].
    es: Tensor,
    x2: Tensor,
}

/// Cache for the reconstruct-direction backward pass.
pub struct CouplingInverseCache {
    subnet: SubnetCache,
    /// exp(−s), [n, d/2].
    ens: Tensor,
    /// The recovered x2 = (y2 − t) ⊙ exp(−s).
    x2_out: Tensor,
}

impl CouplingLayer {
    pub fn new(d: usize, hidden: usize, residual_blocks: usize, s_max: f64, rng: &mut RngStream) -> Result<Self, CoreError> {
        if d < 2 || d % 2 != 0 {
            return Err(CoreError::contract("coupling dimension must be even and >= 2"));
        }
        Ok(Self {
            subnet: CouplingSubnet::new(d, hidden, residual_blocks, s_max, rng),
            d,
        })
    }

    pub fn forward_batch_cached(&self, x: &Tensor) -> (Tensor, CouplingForwardCache) {
        assert_eq!(x.cols(), self.d, "coupling input width");
        let half = self.d / 2;
        let (x1, x2) = x.split_cols(half);
        let (s, t, subnet) = self.subnet.forward_batch_cached(&x1);
        let mut es = s;
        for v in es.data_mut() {
            *v = v.exp();
        }
        let mut y2 = x2.clone();
        for ((y, e), tv) in y2.data_mut().iter_mut().zip(es.data()).zip(t.data()) {
            *y = *y * e + tv;
        }
        let y = Tensor::concat_cols(&x1, &y2);
        (y, CouplingForwardCache { subnet, es, x2 })
    }

    pub fn forward_batch(&self, x: &Tensor) -> Tensor {
        self.forward_batch_cached(x).0
    }

    /// Encode-direction backward: ∂L/∂y → (∂L/∂x, subnet parameter grads).
    pub fn backward_batch(
        &self,
        cache: &CouplingForwardCache,
        dy: &Tensor,
    ) -> (Tensor, CouplingSubnet) {
        let half = self.d / 2;
        let (dy1, dy2) = dy.split_cols(half);
        // y2 = x2·eˢ + t ⇒ ∂x2 = dy2·eˢ, ∂s = dy2·x2·eˢ, ∂t = dy2.
        let mut dx2 = dy2.clone();
        let mut ds = dy2.clone();
        for ((d2, dsv), (e, x2v)) in dx2
            .data_mut()
            .iter_mut()
            .zip(ds.data_mut())
            .zip(cache.es.data().iter().zip(cache.x2.data()))
        {
            *d2 *= e;
            *dsv *= x2v * e;
        }
        let (dx1_subnet, grads) = self.subnet.backward_batch(&cache.subnet, &ds, &dy2);
        let mut dx1 = dy1;
        for (a, b) in dx1.data_mut().iter_mut().zip(dx1_subnet.data()) {
            *a += b;
        }
        (Tensor::concat_cols(&dx1, &dx2), grads)
    }

    pub fn inverse_batch_cached(&self, y: &Tensor) -> (Tensor, CouplingInverseCache) {
        assert_eq!(y.cols(), self.d, "coupling inverse input width");
        let half = self.d / 2;
        let (y1, y2) = y.split_cols(half);
        let (s, t, subnet) = self.subnet.forward_batch_cached(&y1);
        let mut ens = s;
        for v in ens.data_mut() {
            *v = (-*v).exp();
        }
        let mut x2 = y2;
        for ((x, e), tv) in x2.data_mut().iter_mut().zip(ens.data()).zip(t.data()) {
            *x = (*x - tv) * e;
        }
        let x = Tensor::concat_cols(&y1, &x2);
        (
            x,
            CouplingInverseCache {
                subnet,
                ens,
                x2_out: x2,
            },
        )
    }

    pub fn inverse_batch(&self, y: &Tensor) -> Tensor {
        self.inverse_batch_cached(y).0
    }

    /// Reconstruct-direction backward: ∂L/∂x → (∂L/∂y, subnet parameter
    /// grads). x2 = (y2 − t)·e⁻ˢ ⇒ ∂y2 = dx2·e⁻ˢ, ∂t = −dx2·e⁻ˢ, ∂s = −dx2·x2.
    pub fn inverse_backward_batch(
        &self,
        cache: &CouplingInverseCache,
        dx: &Tensor,
    ) -> (Tensor, CouplingSubnet) {
        let half = self.d / 2;
        let (dx1, dx2) = dx.split_cols(half);
        let mut dy2 = dx2.clone();
        for (g, e) in dy2.data_mut().iter_mut().zip(cache.ens.data()) {
            *g *= e;
        }
        let mut dt = dy2.clone();
        for v in dt.data_mut() {
            *v = -*v;
        }
        let mut ds = dx2;
        for (g, x2v) in ds.data_mut().iter_mut().zip(cache.x2_out.data()) {
            *g *= -x2v;
        }
        let (dy1_subnet, grads) = self.subnet.backward_batch(&cache.subnet, &ds, &dt);
        let mut dy1 = dx1;
        for (a, b) in dy1.data_mut().iter_mut().zip(dy1_subnet.data()) {
            *a += b;
        }
        (Tensor::concat_cols(&dy1, &dy2), grads)
    }
}

/// Fixed permutation: forward reads out[i] = x[perm[i]]; inverse undoes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermuteLayer {
    pub perm: Vec<usize>,
    pub inv_perm: Vec<usize>,
}

impl PermuteLayer {
    pub fn new(perm: Vec<usize>) -> Result<Self, CoreError> {
        let d = perm.len();
        let mut inv_perm = vec![usize::MAX; d];
        for (i, &p) in perm.iter().enumerate() {
            if p >= d || inv_perm[p] != usize::MAX {
                return Err(CoreError::contract("permutation must be a bijection"));
            }
            inv_perm[p] = i;
        }
        Ok(Self { perm, inv_perm })
    }

    pub fn random(d: usize, rng: &mut RngStream) -> Self {
        Self::new(rng.permutation(d)).expect("Fisher-Yates output is a bijection")
    }

    pub fn identity(d: usize) -> Self {
        Self::new((0..d).collect()).expect("identity is a bijection")
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.perm.iter().map(|&p| x[p]).collect()
    }

    pub fn apply_inverse(&self, x: &[f64]) -> Vec<f64> {
        self.inv_perm.iter().map(|&p| x[p]).collect()
    }

    pub fn forward_batch(&self, x: &Tensor) -> Tensor {
        self.map_rows(x, &self.perm)
    }

    pub fn inverse_batch(&self, x: &Tensor) -> Tensor {
        self.map_rows(x, &self.inv_perm)
    }

    fn map_rows(&self, x: &Tensor, idx: &[usize]) -> Tensor {
        assert_eq!(x.cols(), idx.len(), "permutation width");
        let mut out = Tensor::zeros(vec![x.rows(), x.cols()]);
        for i in 0..x.rows() {
            let src = x.row(i);
            for (o, &p) in out.row_mut(i).iter_mut().zip(idx) {
                *o = src[p];
            }
        }
        out
    }
}

/// Grads for every coupling subnet, in layer order. Permutations are
/// parameter-free.
pub struct FlowGrads(pub Vec<CouplingSubnet>);

impl FlowGrads {
    /// Add every entry into `dst` in the encoder's canonical parameter order.
    pub fn add_flat(&self, dst: &mut [f64], pos: &mut usize) {
        for g in &self.0 {
            g.add_flat(dst, pos);
        }
    }
}

/// One (coupling, permutation) stage of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowPair {
    pub coupling: CouplingLayer,
    pub permute: PermuteLayer,
}

/// The full invertible encoder f_θ: N coupling/permutation pairs over ℝ^d,
/// with the latent split position m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowEncoder {
    pub pairs: Vec<FlowPair>,
    pub d: usize,
    pub m: usize,
    pub s_max: f64,
}

/// Per-layer caches from an encode pass, in layer order.
pub struct EncoderCache {
    couplings: Vec<CouplingForwardCache>,
}

/// Per-layer caches from a reconstruct pass, indexed by layer (not
/// application) order.
pub struct InverseCache {
    couplings: Vec<CouplingInverseCache>,
}

impl FlowEncoder {
    pub fn new(cfg: &FlowConfig, rng: &mut RngStream) -> Result<Self, CoreError> {
        cfg.validate()?;
        let mut pairs = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            pairs.push(FlowPair {
                coupling: CouplingLayer::new(
                    cfg.d,
                    cfg.hidden,
                    cfg.residual_blocks,
                    cfg.s_max,
                    rng,
                )?,
                permute: PermuteLayer::random(cfg.d, rng),
            });
        }
        Ok(Self {
            pairs,
            d: cfg.d,
            m: cfg.m,
            s_max: cfg.s_max,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.pairs.len()
    }

    pub fn forward_batch(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for pair in &self.pairs {
            cur = pair.permute.forward_batch(&pair.coupling.forward_batch(&cur));
        }
        cur
    }

    pub fn forward_batch_cached(&self, x: &Tensor) -> (Tensor, EncoderCache) {
        let mut cur = x.clone();
        let mut couplings = Vec::with_capacity(self.pairs.len());
        for pair in &self.pairs {
            let (y, cache) = pair.coupling.forward_batch_cached(&cur);
            couplings.push(cache);
            cur = pair.permute.forward_batch(&y);
        }
        (cur, EncoderCache { couplings })
    }

    /// Encode-direction backward: ∂L/∂z → (∂L/∂x, coupling grads).
    pub fn backward_batch(&self, cache: &EncoderCache, dz: &Tensor) -> (Tensor, FlowGrads) {
        let mut grads: Vec<Option<CouplingSubnet>> = (0..self.pairs.len()).map(|_| None).collect();
        let mut g = dz.clone();
        for (i, pair) in self.pairs.iter().enumerate().rev() {
            g = pair.permute.inverse_batch(&g);
            let (gx, layer_grads) = pair.coupling.backward_batch(&cache.couplings[i], &g);
            g = gx;
            grads[i] = Some(layer_grads);
        }
        (g, FlowGrads(grads.into_iter().map(|g| g.unwrap()).collect()))
    }

    pub fn inverse_batch(&self, z: &Tensor) -> Tensor {
        let mut cur = z.clone();
        for pair in self.pairs.iter().rev() {
            cur = pair.coupling.inverse_batch(&pair.permute.inverse_batch(&cur));
        }
        cur
    }

    pub fn inverse_batch_cached(&self, z: &Tensor) -> (Tensor, InverseCache) {
        let mut couplings: Vec<Option<CouplingInverseCache>> =
            (0..self.pairs.len()).map(|_| None).collect();
        let mut cur = z.clone();
        for (i, pair) in self.pairs.iter().enumerate().rev() {
            let (x, cache) = pair.coupling.inverse_batch_cached(&pair.permute.inverse_batch(&cur));
            cur = x;
            couplings[i] = Some(cache);
        }
        (
            cur,
            InverseCache {
                couplings: couplings.into_iter().map(|c| c.unwrap()).collect(),
            },
        )
    }

    /// Reconstruct-direction backward: ∂L/∂x̂ → (∂L/∂z, coupling grads).
    pub fn inverse_backward_batch(&self, cache: &InverseCache, dx: &Tensor) -> (Tensor, FlowGrads) {
        let mut grads = Vec::with_capacity(self.pairs.len());
        let mut g = dx.clone();
        for (i, pair) in self.pairs.iter().enumerate() {
            let (gy, layer_grads) = pair
                .coupling
                .inverse_backward_batch(&cache.couplings[i], &g);
            g = pair.permute.forward_batch(&gy);
            grads.push(layer_grads);
        }
        (g, FlowGrads(grads))
    }

    /// Single-vector encode.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, CoreError> {
        self.check_width(x.len())?;
        let z = self.forward_batch(&Tensor::matrix(1, self.d, x.to_vec()));
        Ok(z.into_data())
    }

    /// Single-vector decode.
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>, CoreError> {
        self.check_width(z.len())?;
        let x = self.inverse_batch(&Tensor::matrix(1, self.d, z.to_vec()));
        Ok(x.into_data())
    }

    /// Prefix split z → (z_comp, z_aux).
    pub fn split_latent(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>), CoreError> {
        self.check_width(z.len())?;
        Ok((z[..self.m].to_vec(), z[self.m..].to_vec()))
    }

    /// Column split of a latent batch at m.
    pub fn split_latent_batch(&self, z: &Tensor) -> (Tensor, Tensor) {
        z.split_cols(self.m)
    }

    /// Inverse of [`FlowEncoder::split_latent`].
    pub fn concat_latent(&self, z_comp: &[f64], z_aux: &[f64]) -> Result<Vec<f64>, CoreError> {
        if z_comp.len() != self.m {
            return Err(CoreError::LengthMismatch {
                context: "concat_latent z_comp",
                expected: self.m,
                actual: z_comp.len(),
            });
        }
        if z_aux.len() != self.d - self.m {
            return Err(CoreError::LengthMismatch {
                context: "concat_latent z_aux",
                expected: self.d - self.m,
                actual: z_aux.len(),
            });
        }
        let mut z = z_comp.to_vec();
        z.extend_from_slice(z_aux);
        Ok(z)
    }

    fn check_width(&self, len: usize) -> Result<(), CoreError> {
        if len != self.d {
            return Err(CoreError::LengthMismatch {
                context: "flow input width",
                expected: self.d,
                actual: len,
            });
        }
        Ok(())
    }
}

impl ParamPack for FlowEncoder {
    fn param_count(&self) -> usize {
        self.pairs.iter().map(|p| p.coupling.subnet.param_count()).sum()
    }

    fn write_flat(&self, dst: &mut Vec<f64>) {
        for pair in &self.pairs {
            pair.coupling.subnet.write_flat(dst);
        }
    }

    fn add_flat(&self, dst: &mut [f64], pos: &mut usize) {
        for pair in &self.pairs {
            pair.coupling.subnet.add_flat(dst, pos);
        }
    }

    fn read_flat(&mut self, src: &[f64], pos: &mut usize) {
        for pair in &mut self.pairs {
            pair.coupling.subnet.read_flat(src, pos);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::grad_check;

    fn rand_tensor(rows: usize, cols: usize, rng: &mut RngStream, lo: f64, hi: f64) -> Tensor {
        let mut t = Tensor::zeros(vec![rows, cols]);
        for v in t.data_mut() {
            *v = rng.uniform(lo, hi);
        }
        t
    }

    /// Randomize every parameter so round-trips exercise non-identity maps.
    /// Deliberately aggressive; only safe for small/shallow configurations.
    fn randomize(enc: &mut FlowEncoder, rng: &mut RngStream) {
        let n = enc.param_count();
        let theta: Vec<f64> = (0..n).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let mut pos = 0;
        enc.read_flat(&theta, &mut pos);
    }

    /// Move only the zero-initialized output projections, keeping the
    /// Kaiming-scaled hidden weights. Activations then stay bounded the way
    /// they do in a trained network, which deep stacks need: the swiglu
    /// product can square magnitudes per layer, so fully random deep nets
    /// overflow while remaining algebraically invertible.
    fn randomize_out_projections(enc: &mut FlowEncoder, rng: &mut RngStream) {
        for pair in &mut enc.pairs {
            let out = &mut pair.coupling.subnet.out_proj;
            for v in out
                .weight
                .data_mut()
                .iter_mut()
                .chain(out.bias.data_mut().iter_mut())
            {
                *v = rng.uniform(-0.1, 0.1);
            }
        }
    }

    fn small_cfg(d: usize, m: usize, n_layers: usize) -> FlowConfig {
        FlowConfig {
            d,
            m,
            n_layers,
            hidden: 8,
            residual_blocks: 1,
            s_max: 2.0,
        }
    }

    /// A coupling whose subnet always emits the given (s, t), regardless of
    /// input: zero weights everywhere, constants loaded into the output bias.
    fn stub_coupling(d: usize, s: f64, t: f64) -> CouplingLayer {
        let mut rng = RngStream::new(0);
        let mut layer = CouplingLayer::new(d, 4, 1, 2.0, &mut rng).unwrap();
        let n = layer.subnet.param_count();
        let mut pos = 0;
        layer.subnet.read_flat(&vec![0.0; n], &mut pos);
        // Invert the clamp so the effective scale is exactly s.
        let s_raw = layer.subnet.s_max * (s / layer.subnet.s_max).atanh();
        let half = d / 2;
        for j in 0..half {
            layer.subnet.out_proj.bias.data_mut()[j] = s_raw;
            layer.subnet.out_proj.bias.data_mut()[half + j] = t;
        }
        layer
    }

    #[test]
    fn zero_init_coupling_is_identity() {
        let mut rng = RngStream::new(1);
        let layer = CouplingLayer::new(8, 16, 1, 2.0, &mut rng).unwrap();
        let x = rand_tensor(3, 8, &mut rng, -2.0, 2.0);
        let y = layer.forward_batch(&x);
        assert_eq!(y, x, "zero-initialized output projection must be identity");
    }

    #[test]
    fn coupling_forward_hand_example() {
        // s = ln 2, t = 0.5 on x = [1, 2] → y = [1, 2·2 + 0.5] = [1, 4.5].
        let layer = stub_coupling(2, std::f64::consts::LN_2, 0.5);
        let y = layer.forward_batch(&Tensor::matrix(1, 2, vec![1.0, 2.0]));
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 4.5).abs() < 1e-12, "got {}", y.data()[1]);
    }

    #[test]
    fn coupling_inverse_hand_example() {
        let layer = stub_coupling(2, std::f64::consts::LN_2, 0.5);
        let x = layer.inverse_batch(&Tensor::matrix(1, 2, vec![1.0, 4.5]));
        assert!((x.data()[0] - 1.0).abs() < 1e-12);
        assert!((x.data()[1] - 2.0).abs() < 1e-12, "got {}", x.data()[1]);
    }

    #[test]
    fn coupling_zero_x2_maps_to_t() {
        let layer = stub_coupling(4, 0.7, 0.25);
        let y = layer.forward_batch(&Tensor::matrix(1, 4, vec![3.0, -1.0, 0.0, 0.0]));
        assert!((y.data()[2] - 0.25).abs() < 1e-12);
        assert!((y.data()[3] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn coupling_round_trip_random_weights() {
        let mut rng = RngStream::new(2);
        let mut layer = CouplingLayer::new(8, 16, 1, 2.0, &mut rng).unwrap();
        let n = layer.subnet.param_count();
        let theta: Vec<f64> = (0..n).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let mut pos = 0;
        layer.subnet.read_flat(&theta, &mut pos);
        let x = rand_tensor(16, 8, &mut rng, -3.0, 3.0);
        let back = layer.inverse_batch(&layer.forward_batch(&x));
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-10, "round trip {a} vs {b}");
        }
    }

    #[test]
    fn coupling_rejects_odd_dimension() {
        let mut rng = RngStream::new(3);
        assert!(CouplingLayer::new(7, 8, 1, 2.0, &mut rng).is_err());
        assert!(CouplingLayer::new(0, 8, 1, 2.0, &mut rng).is_err());
    }

    #[test]
    fn permute_identity_and_cycle() {
        let id = PermuteLayer::identity(3);
        assert_eq!(id.apply(&[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);

        let p = PermuteLayer::new(vec![2, 0, 1]).unwrap();
        let out = p.apply(&[10.0, 20.0, 30.0]);
        assert_eq!(out, vec![30.0, 10.0, 20.0]);
        assert_eq!(p.apply_inverse(&out), vec![10.0, 20.0, 30.0]);
    }

    #[test]
    fn permute_round_trip_is_bit_exact() {
        let mut rng = RngStream::new(4);
        let p = PermuteLayer::random(32, &mut rng);
        let x: Vec<f64> = (0..32).map(|_| rng.uniform(-1.0, 1.0)).collect();
        assert_eq!(p.apply_inverse(&p.apply(&x)), x);
    }

    #[test]
    fn permute_rejects_non_bijections() {
        assert!(PermuteLayer::new(vec![0, 0, 1]).is_err());
        assert!(PermuteLayer::new(vec![0, 3]).is_err());
    }

    #[test]
    fn encoder_identity_init_is_pure_permutation() {
        let mut rng = RngStream::new(5);
        let enc = FlowEncoder::new(&small_cfg(8, 2, 3), &mut rng).unwrap();
        let x: Vec<f64> = (0..8).map(|i| i as f64 + 0.5).collect();
        let z = enc.forward(&x).unwrap();
        // Compose only the permutations; couplings start as identity.
        let mut expect = x.clone();
        for pair in &enc.pairs {
            expect = pair.permute.apply(&expect);
        }
        assert_eq!(z, expect);
    }

    #[test]
    fn encoder_round_trip_across_shapes() {
        for (d, n_layers, seed) in [(2usize, 1usize, 10u64), (8, 6, 11), (64, 6, 12)] {
            let mut rng = RngStream::new(seed);
            let mut enc = FlowEncoder::new(&small_cfg(d, d / 2, n_layers), &mut rng).unwrap();
            randomize_out_projections(&mut enc, &mut rng);
            // Unit-range inputs, matching the data domain the encoder serves.
            let x = rand_tensor(8, d, &mut rng, 0.0, 1.0);
            let back = enc.inverse_batch(&enc.forward_batch(&x));
            for (a, b) in back.data().iter().zip(x.data()) {
                assert!(
                    (a - b).abs() <= 1e-8,
                    "d={d} N={n_layers}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn encoder_scales_stay_clamped() {
        let mut rng = RngStream::new(13);
        let mut enc = FlowEncoder::new(&small_cfg(8, 2, 4), &mut rng).unwrap();
        randomize_out_projections(&mut enc, &mut rng);
        // Drive every subnet with inputs far outside the data range. The raw
        // scales reach ~1e11 here; the clamp must keep the effective scale
        // finite and bounded. tanh saturates to exactly ±1 in f64 for
        // |arg| ≳ 19, so the attainable bound is |s| ≤ s_max — exp(±s_max)
        // stays tiny either way, which is what the clamp exists to guarantee.
        let mut max_abs = 0.0f64;
        for pair in &enc.pairs {
            let half = pair.coupling.d / 2;
            let x1 = rand_tensor(16, half, &mut rng, -50.0, 50.0);
            let (s, _) = pair.coupling.subnet.forward_batch(&x1);
            for &v in s.data() {
                assert!(v.is_finite(), "scale became non-finite");
                assert!(v.abs() <= enc.s_max, "scale {v} escaped clamp");
                max_abs = max_abs.max(v.abs());
            }
        }
        // Prove the probe actually pushed into the saturation regime.
        assert!(max_abs > 0.9 * enc.s_max, "probe too weak: max |s| = {max_abs}");
    }

    #[test]
    fn split_latent_prefix_and_concat() {
        let mut rng = RngStream::new(14);
        let enc = FlowEncoder::new(&small_cfg(4, 2, 1), &mut rng).unwrap();
        let (zc, za) = enc.split_latent(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(zc, vec![1.0, 2.0]);
        assert_eq!(za, vec![3.0, 4.0]);
        assert_eq!(enc.concat_latent(&zc, &za).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);

        // Boundary: m = d−1 leaves a single auxiliary scalar.
        let enc = FlowEncoder::new(&small_cfg(4, 3, 1), &mut rng).unwrap();
        let (zc, za) = enc.split_latent(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(zc.len(), 3);
        assert_eq!(za, vec![4.0]);
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut rng = RngStream::new(15);
        for cfg in [
            small_cfg(7, 2, 1),  // odd d
            small_cfg(8, 0, 1),  // m = 0
            small_cfg(8, 8, 1),  // m = d
            small_cfg(8, 2, 0),  // no layers
        ] {
            assert!(FlowEncoder::new(&cfg, &mut rng).is_err(), "{cfg:?}");
        }
    }

    fn sq_loss(t: &Tensor) -> f64 {
        t.data().iter().map(|v| v * v).sum()
    }

    fn doubled(t: &Tensor) -> Tensor {
        let mut d = t.clone();
        for v in d.data_mut() {
            *v *= 2.0;
        }
        d
    }

    #[test]
    fn encoder_forward_gradients_pass_finite_difference_check() {
        let mut rng = RngStream::new(16);
        let mut enc = FlowEncoder::new(&small_cfg(8, 2, 2), &mut rng).unwrap();
        randomize(&mut enc, &mut rng);
        let x = rand_tensor(4, 8, &mut rng, -1.0, 1.0);

        let mut theta = Vec::new();
        enc.write_flat(&mut theta);
        let analytic = {
            let (z, cache) = enc.forward_batch_cached(&x);
            let (_, grads) = enc.backward_batch(&cache, &doubled(&z));
            let mut flat = vec![0.0; theta.len()];
            let mut pos = 0;
            grads.add_flat(&mut flat, &mut pos);
            flat
        };
        let err = grad_check(
            |t| {
                let mut probe = enc.clone();
                let mut pos = 0;
                probe.read_flat(t, &mut pos);
                sq_loss(&probe.forward_batch(&x))
            },
            &mut theta,
            &analytic,
            1e-5,
            &mut rng,
            64,
        )
        .unwrap();
        assert!(err < 1e-5, "encoder forward grad err {err}");
    }

    #[test]
    fn encoder_inverse_gradients_pass_finite_difference_check() {
        let mut rng = RngStream::new(17);
        let mut enc = FlowEncoder::new(&small_cfg(8, 2, 2), &mut rng).unwrap();
        randomize(&mut enc, &mut rng);
        let z = rand_tensor(4, 8, &mut rng, -1.0, 1.0);

        let mut theta = Vec::new();
        enc.write_flat(&mut theta);
        let analytic = {
            let (x, cache) = enc.inverse_batch_cached(&z);
            let (_, grads) = enc.inverse_backward_batch(&cache, &doubled(&x));
            let mut flat = vec![0.0; theta.len()];
            let mut pos = 0;
            grads.add_flat(&mut flat, &mut pos);
            flat
        };
        let err = grad_check(
            |t| {
                let mut probe = enc.clone();
                let mut pos = 0;
                probe.read_flat(t, &mut pos);
                sq_loss(&probe.inverse_batch(&z))
            },
            &mut theta,
            &analytic,
            1e-5,
            &mut rng,
            64,
        )
        .unwrap();
        assert!(err < 1e-5, "encoder inverse grad err {err}");
    }

    #[test]
    fn encoder_input_gradients_pass_finite_difference_check() {
        let mut rng = RngStream::new(18);
        let mut enc = FlowEncoder::new(&small_cfg(8, 2, 2), &mut rng).unwrap();
        randomize(&mut enc, &mut rng);
        let x = rand_tensor(3, 8, &mut rng, -1.0, 1.0);

        let mut xin = x.data().to_vec();
        let analytic = {
            let (z, cache) = enc.forward_batch_cached(&x);
            enc.backward_batch(&cache, &doubled(&z)).0.into_data()
        };
        let err = grad_check(
            |t| {
                let probe = Tensor::matrix(3, 8, t.to_vec());
                sq_loss(&enc.forward_batch(&probe))
            },
            &mut xin,
            &analytic,
            1e-5,
            &mut rng,
            24,
        )
        .unwrap();
        assert!(err < 1e-5, "encoder input grad err {err}");
    }
}
