//! The complete codec and trainer: encode/compress/reconstruct through the
//! invertible encoder and auxiliary predictor, the joint two-term loss,
//! predictor pretraining, mini-batch Adam training, and the structural-noise
//! decomposition.
//!
//! Because the encoder is exactly invertible, the predictor is provably the
//! sole source of reconstruction error: substituting the true z_aux drives
//! the error to floating-point noise. Training therefore shapes both how the
//! flow arranges information (what lands in z_comp) and how well the
//! predictor recovers the remainder.

use serde::{Deserialize, Serialize};

use crate::diffcore::adam::{AdamConfig, AdamState};
use crate::diffcore::layers::ParamPack;
use crate::diffcore::rng::RngStream;
use crate::diffcore::tensor::Tensor;
use crate::error::CoreError;
use crate::flow::{FlowConfig, FlowEncoder};
use crate::metrics::psnr_from_mse;
use crate::predictor::PredictorNet;

/// Shape hyperparameters for a fresh [`IdrpModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub flow: FlowConfig,
    /// Predictor hidden width h_p.
    pub predictor_hidden: usize,
}

/// Encoder + predictor: the invertible-dimensionality-reduction codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdrpModel {
    pub encoder: FlowEncoder,
    pub predictor: PredictorNet,
}

/// Optimization schedule and loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Joint-training epochs.
    pub epochs: usize,
    /// Predictor-only epochs with the encoder frozen.
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight λ on the auxiliary-prediction term.
    pub lambda_aux: f64,
    pub seed: u64,
    /// Whether joint training updates the flow alongside the predictor.
    pub train_flow: bool,
    /// Record history every this many epochs (the final epoch always logs).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            pretrain_epochs: 2000,
            batch_size: 128,
            lr: 1e-3,
            lambda_aux: 1.0,
            seed: 0,
            train_flow: true,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::contract("lr must be positive"));
        }
        if !(self.lambda_aux >= 0.0 && self.lambda_aux.is_finite()) {
            return Err(CoreError::contract("lambda_aux must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(CoreError::contract("batch_size must be positive"));
        }
        if self.log_every == 0 {
            return Err(CoreError::contract("log_every must be positive"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// One logged epoch of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub recon_mse: f64,
    pub aux_mse: f64,
}

/// Loss curves, one record per logged epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,total_loss,recon_mse,aux_mse\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.total_loss, r.recon_mse, r.aux_mse
            ));
        }
        out
    }
}

/// Per-sample error decomposition: predictor error in latent space and the
/// reconstruction error it becomes after the inverse transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub sample_id: usize,
    /// ‖z_aux − ẑ_aux‖².
    pub aux_err: f64,
    /// ‖x − x̂‖².
    pub recon_err: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub mean_aux_err: f64,
    pub max_aux_err: f64,
    pub mean_recon_err: f64,
    pub max_recon_err: f64,
    /// PSNR of the mean per-sample reconstruction MSE.
    pub psnr_of_mean_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub records: Vec<NoiseRecord>,
    pub summary: NoiseSummary,
}

impl NoiseReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,aux_err,recon_err,psnr\n");
        for r in &self.records {
            let psnr = if r.psnr.is_infinite() {
                "inf".to_string()
            } else {
                format!("{}", r.psnr)
            };
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.sample_id, r.aux_err, r.recon_err, psnr
            ));
        }
        out
    }
}

impl IdrpModel {
    pub fn new(cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self, CoreError> {
        let encoder = FlowEncoder::new(&cfg.flow, rng)?;
        let predictor = PredictorNet::new(
            cfg.flow.m,
            cfg.flow.d - cfg.flow.m,
            cfg.predictor_hidden,
            rng,
        )?;
        Ok(Self { encoder, predictor })
    }

    pub fn d(&self) -> usize {
        self.encoder.d
    }

    pub fn m(&self) -> usize {
        self.encoder.m
    }

    /// x → (z_comp, z_aux_true).
    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), CoreError> {
        let z = self.encoder.forward(x)?;
        self.encoder.split_latent(&z)
    }

    /// The stored part alone.
    pub fn compress(&self, x: &[f64]) -> Result<Vec<f64>, CoreError> {
        Ok(self.encode(x)?.0)
    }

    /// z_comp → x̂ via the predicted auxiliary part and the inverse flow.
    pub fn reconstruct(&self, z_comp: &[f64]) -> Result<Vec<f64>, CoreError> {
        let z_aux = self.predictor.predict_aux(z_comp)?;
        self.reconstruct_with_aux(z_comp, &z_aux)
    }

    /// Reconstruction from an explicitly supplied auxiliary part. With the
    /// true z_aux this recovers x up to floating-point error — the predictor
    /// is the codec's only error source.
    pub fn reconstruct_with_aux(&self, z_comp: &[f64], z_aux: &[f64]) -> Result<Vec<f64>, CoreError> {
        let z = self.encoder.concat_latent(z_comp, z_aux)?;
        self.encoder.inverse(&z)
    }

    /// Batch compress: [n, d] → [n, m].
    pub fn compress_batch(&self, x: &Tensor) -> Tensor {
        self.encoder.split_latent_batch(&self.encoder.forward_batch(x)).0
    }

    /// Batch reconstruct: [n, m] → [n, d].
    pub fn reconstruct_batch(&self, z_comp: &Tensor) -> Tensor {
        let z_aux = self.predictor.forward_batch(z_comp);
        self.encoder
            .inverse_batch(&Tensor::concat_cols(z_comp, &z_aux))
    }

    /// (total, recon_mse, aux_mse) on a batch, with recon_mse = mean‖x−x̂‖²/d
    /// and aux_mse = mean‖z_aux−ẑ_aux‖²/(d−m).
    pub fn loss(&self, batch: &Tensor, lambda_aux: f64) -> Result<(f64, f64, f64), CoreError> {
        if batch.ndim() != 2 || batch.rows() == 0 {
            return Err(CoreError::contract("loss requires a non-empty batch"));
        }
        let n = batch.rows();
        let (d, m) = (self.d(), self.m());
        let z = self.encoder.forward_batch(batch);
        let (zc, za) = self.encoder.split_latent_batch(&z);
        let za_hat = self.predictor.forward_batch(&zc);
        let aux_mse = sum_sq_diff(za.data(), za_hat.data()) / (n * (d - m)) as f64;
        let x_hat = self
            .encoder
            .inverse_batch(&Tensor::concat_cols(&zc, &za_hat));
        let recon_mse = sum_sq_diff(batch.data(), x_hat.data()) / (n * d) as f64;
        Ok((recon_mse + lambda_aux * aux_mse, recon_mse, aux_mse))
    }

    /// Flat parameter vector: encoder couplings first, then the predictor.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_flat(&mut out);
        out
    }

    pub fn assign_params(&mut self, flat: &[f64]) -> Result<(), CoreError> {
        if flat.len() != self.param_count() {
            return Err(CoreError::LengthMismatch {
                context: "assign_params",
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut pos = 0;
        self.read_flat(flat, &mut pos);
        Ok(())
    }

    /// Joint loss gradient on a batch: returns (total, recon_mse, aux_mse,
    /// flat gradient over [encoder | predictor] parameters). The flow
    /// parameters collect contributions from both the encode pass and the
    /// reconstruction (inverse) pass; the true z_aux also routes the
    /// auxiliary loss back into the encoder.
    pub fn loss_backward(
        &self,
        batch: &Tensor,
        lambda_aux: f64,
        train_flow: bool,
    ) -> (f64, f64, f64, Vec<f64>) {
        let n = batch.rows();
        let (d, m) = (self.d(), self.m());
        let aux_denom = (n * (d - m)) as f64;
        let recon_denom = (n * d) as f64;

        let (z, enc_cache) = self.encoder.forward_batch_cached(batch);
        let (zc, za) = self.encoder.split_latent_batch(&z);
        let (za_hat, pred_cache) = self.predictor.forward_batch_cached(&zc);
        let z_hat = Tensor::concat_cols(&zc, &za_hat);
        let (x_hat, inv_cache) = self.encoder.inverse_batch_cached(&z_hat);

        let mut aux_sq = 0.0;
        for (a, b) in za.data().iter().zip(za_hat.data()) {
            let e = a - b;
            aux_sq += e * e;
        }
        let aux_mse = aux_sq / aux_denom;
        let mut recon_sq = 0.0;
        let mut dx_hat = Tensor::zeros(vec![n, d]);
        for ((g, xh), x) in dx_hat
            .data_mut()
            .iter_mut()
            .zip(x_hat.data())
            .zip(batch.data())
        {
            let e = xh - x;
            recon_sq += e * e;
            *g = 2.0 * e / recon_denom;
        }
        let recon_mse = recon_sq / recon_denom;
        let total = recon_mse + lambda_aux * aux_mse;

        // Reconstruction path: through f⁻¹ back to ẑ (and into the flow's
        // own parameters, since θ appears in f⁻¹ directly).
        let (dz_hat, flow_grads_inv) = self.encoder.inverse_backward_batch(&inv_cache, &dx_hat);
        let (dzc_inv, dza_hat_inv) = dz_hat.split_cols(m);

        // Auxiliary term: ∂aux/∂ẑ_aux and ∂aux/∂z_aux are ± 2(ẑ−z)/denom.
        let mut dza_hat = dza_hat_inv;
        let mut dza = Tensor::zeros(vec![n, d - m]);
        for ((g_hat, g_true), (zh, zt)) in dza_hat
            .data_mut()
            .iter_mut()
            .zip(dza.data_mut())
            .zip(za_hat.data().iter().zip(za.data()))
        {
            let e = 2.0 * lambda_aux * (zh - zt) / aux_denom;
            *g_hat += e;
            *g_true -= e;
        }

        // Predictor path: ẑ_aux = g_φ(z_comp).
        let (dzc_pred, pred_grads) = self.predictor.backward_batch(&pred_cache, &dza_hat);

        let mut grads = vec![0.0; self.param_count()];
        let enc_count = self.encoder.param_count();

        if train_flow {
            // Encode path: both z_comp uses (storage + predictor input) and
            // the true z_aux feed back through f.
            let mut dzc = dzc_inv;
            for (a, b) in dzc.data_mut().iter_mut().zip(dzc_pred.data()) {
                *a += b;
            }
            let dz = Tensor::concat_cols(&dzc, &dza);
            let (_, flow_grads_fwd) = self.encoder.backward_batch(&enc_cache, &dz);

            let mut pos = 0;
            flow_grads_fwd.add_flat(&mut grads, &mut pos);
            debug_assert_eq!(pos, enc_count);
            let mut pos = 0;
            flow_grads_inv.add_flat(&mut grads, &mut pos);
            debug_assert_eq!(pos, enc_count);
        }
        let mut pos = enc_count;
        pred_grads.add_flat(&mut grads, &mut pos);
        debug_assert_eq!(pos, grads.len());

        (total, recon_mse, aux_mse, grads)
    }

    /// Optimize the predictor alone against the frozen encoder's latents.
    pub fn pretrain_predictor(
        &mut self,
        data: &Tensor,
        cfg: &TrainConfig,
    ) -> Result<TrainHistory, CoreError> {
        cfg.validate()?;
        let mut history = TrainHistory::default();
        if cfg.pretrain_epochs == 0 {
            return Ok(history);
        }
        if data.rows() == 0 {
            return Err(CoreError::contract("pretrain on empty dataset"));
        }
        let n = data.rows();
        let (d, m) = (self.d(), self.m());

        // The encoder is frozen, so every latent is fixed for the whole
        // phase: compute them once.
        let z = self.encoder.forward_batch(data);
        let (zc, za) = self.encoder.split_latent_batch(&z);

        // Fixed probe subset for the recon curve (reconstruction isn't part
        // of the pretraining objective, but the history keeps it observable).
        let probe = (0..n.min(cfg.batch_size)).collect::<Vec<_>>();
        let probe_x = data.select_rows(&probe);
        let probe_zc = zc.select_rows(&probe);

        let mut theta = Vec::new();
        self.predictor.write_flat(&mut theta);
        let mut adam = AdamState::new(theta.len(), cfg.adam());
        let mut rng = RngStream::new(cfg.seed);
        let mut order: Vec<usize> = (0..n).collect();

        for epoch in 1..=cfg.pretrain_epochs {
            rng.shuffle(&mut order);
            let mut epoch_aux = 0.0;
            let mut seen = 0usize;
            for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let bzc = zc.select_rows(chunk);
                let bza = za.select_rows(chunk);
                let denom = (chunk.len() * (d - m)) as f64;

                let (pred, cache) = self.predictor.forward_batch_cached(&bzc);
                let mut dy = Tensor::zeros(vec![chunk.len(), d - m]);
                let mut sq = 0.0;
                for ((g, p), t) in dy.data_mut().iter_mut().zip(pred.data()).zip(bza.data()) {
                    let e = p - t;
                    sq += e * e;
                    *g = 2.0 * e / denom;
                }
                let batch_aux = sq / denom;
                if !batch_aux.is_finite() {
                    return Err(CoreError::Diverged {
                        epoch,
                        batch: batch_idx,
                    });
                }
                let (_, grads) = self.predictor.backward_batch(&cache, &dy);
                let mut flat = Vec::with_capacity(theta.len());
                grads.write_flat(&mut flat);
                adam.step(&mut theta, &flat)?;
                let mut pos = 0;
                self.predictor.read_flat(&theta, &mut pos);

                epoch_aux += batch_aux * chunk.len() as f64;
                seen += chunk.len();
            }
            let aux_mse = epoch_aux / seen as f64;
            if epoch % cfg.log_every == 0 || epoch == cfg.pretrain_epochs {
                let recon_mse = self.probe_recon_mse(&probe_x, &probe_zc);
                history.records.push(EpochRecord {
                    epoch,
                    total_loss: aux_mse,
                    recon_mse,
                    aux_mse,
                });
            }
        }
        Ok(history)
    }

    fn probe_recon_mse(&self, probe_x: &Tensor, probe_zc: &Tensor) -> f64 {
        let za_hat = self.predictor.forward_batch(probe_zc);
        let x_hat = self
            .encoder
            .inverse_batch(&Tensor::concat_cols(probe_zc, &za_hat));
        let mut sq = 0.0;
        for (a, b) in probe_x.data().iter().zip(x_hat.data()) {
            let e = a - b;
            sq += e * e;
        }
        sq / probe_x.len() as f64
    }

    /// Mini-batch Adam over the joint loss. `cfg.train_flow` decides whether
    /// the flow moves or only the predictor.
    pub fn train_joint(&mut self, data: &Tensor, cfg: &TrainConfig) -> Result<TrainHistory, CoreError> {
        cfg.validate()?;
        let mut history = TrainHistory::default();
        if cfg.epochs == 0 {
            return Ok(history);
        }
        if data.rows() == 0 {
            return Err(CoreError::contract("train_joint on empty dataset"));
        }
        let n = data.rows();
        let enc_count = self.encoder.param_count();

        let mut theta = self.flatten_params();
        // Frozen-flow training still flattens the full vector; only the
        // predictor segment receives optimizer updates.
        let trained = if cfg.train_flow {
            0..theta.len()
        } else {
            enc_count..theta.len()
        };
        let mut adam = AdamState::new(trained.len(), cfg.adam());
        let mut rng = RngStream::new(cfg.seed);
        let mut order: Vec<usize> = (0..n).collect();

        for epoch in 1..=cfg.epochs {
            rng.shuffle(&mut order);
            let (mut e_total, mut e_recon, mut e_aux) = (0.0, 0.0, 0.0);
            let mut seen = 0usize;
            for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let batch = data.select_rows(chunk);
                let (total, recon, aux, grads) =
                    self.loss_backward(&batch, cfg.lambda_aux, cfg.train_flow);
                if !total.is_finite() {
                    return Err(CoreError::Diverged {
                        epoch,
                        batch: batch_idx,
                    });
                }
                adam.step(&mut theta[trained.clone()], &grads[trained.clone()])?;
                let mut pos = 0;
                self.read_flat(&theta, &mut pos);

                let w = chunk.len() as f64;
                e_total += total * w;
                e_recon += recon * w;
                e_aux += aux * w;
                seen += chunk.len();
            }
            if epoch % cfg.log_every == 0 || epoch == cfg.epochs {
                let w = seen as f64;
                history.records.push(EpochRecord {
                    epoch,
                    total_loss: e_total / w,
                    recon_mse: e_recon / w,
                    aux_mse: e_aux / w,
                });
            }
        }
        Ok(history)
    }

    /// Per-sample decomposition of predictor error and the structural noise
    /// it induces in the reconstruction.
    pub fn noise_analysis(&self, data: &Tensor) -> NoiseReport {
        let d = self.d();
        let n = data.rows();
        let z = self.encoder.forward_batch(data);
        let (zc, za) = self.encoder.split_latent_batch(&z);
        let za_hat = self.predictor.forward_batch(&zc);
        let x_hat = self
            .encoder
            .inverse_batch(&Tensor::concat_cols(&zc, &za_hat));

        let mut records = Vec::with_capacity(n);
        let (mut sum_aux, mut max_aux, mut sum_recon, mut max_recon) = (0.0, 0.0f64, 0.0, 0.0f64);
        for i in 0..n {
            let mut aux_err = 0.0;
            for (a, b) in za.row(i).iter().zip(za_hat.row(i)) {
                let e = a - b;
                aux_err += e * e;
            }
            let mut recon_err = 0.0;
            for (a, b) in data.row(i).iter().zip(x_hat.row(i)) {
                let e = a - b;
                recon_err += e * e;
            }
            let psnr = psnr_from_mse(recon_err / d as f64, 1.0);
            records.push(NoiseRecord {
                sample_id: i,
                aux_err,
                recon_err,
                psnr,
            });
            sum_aux += aux_err;
            max_aux = max_aux.max(aux_err);
            sum_recon += recon_err;
            max_recon = max_recon.max(recon_err);
        }
        let nf = n.max(1) as f64;
        let mean_recon_mse = sum_recon / nf / d as f64;
        NoiseReport {
            records,
            summary: NoiseSummary {
                mean_aux_err: sum_aux / nf,
                max_aux_err: max_aux,
                mean_recon_err: sum_recon / nf,
                max_recon_err: max_recon,
                psnr_of_mean_mse: psnr_from_mse(mean_recon_mse, 1.0),
            },
        }
    }
}

impl ParamPack for IdrpModel {
    fn param_count(&self) -> usize {
        self.encoder.param_count() + self.predictor.param_count()
    }

    fn write_flat(&self, dst: &mut Vec<f64>) {
        self.encoder.write_flat(dst);
        self.predictor.write_flat(dst);
    }

    fn add_flat(&self, dst: &mut [f64], pos: &mut usize) {
        self.encoder.add_flat(dst, pos);
        self.predictor.add_flat(dst, pos);
    }

    fn read_flat(&mut self, src: &[f64], pos: &mut usize) {
        self.encoder.read_flat(src, pos);
        self.predictor.read_flat(src, pos);
    }
}

fn sum_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let e = x - y;
            e * e
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::grad_check;
    use crate::flow::PermuteLayer;

    fn model_cfg(d: usize, m: usize, n_layers: usize, hidden: usize) -> ModelConfig {
        ModelConfig {
            flow: FlowConfig {
                d,
                m,
                n_layers,
                hidden,
                residual_blocks: 1,
                s_max: 2.0,
            },
            predictor_hidden: hidden,
        }
    }

    /// Fresh model whose encoder is the exact identity (zero-init couplings,
    /// permutations replaced by identity) and whose predictor is all zeros.
    fn identity_model(d: usize, m: usize) -> IdrpModel {
        let mut rng = RngStream::new(0);
        let mut model = IdrpModel::new(&model_cfg(d, m, 2, 4), &mut rng).unwrap();
        for pair in &mut model.encoder.pairs {
            pair.permute = PermuteLayer::identity(d);
        }
        let n = model.predictor.param_count();
        let mut pos = 0;
        model.predictor.read_flat(&vec![0.0; n], &mut pos);
        model
    }

    fn randomized_model(d: usize, m: usize, n_layers: usize, hidden: usize, seed: u64) -> IdrpModel {
        let mut rng = RngStream::new(seed);
        let mut model = IdrpModel::new(&model_cfg(d, m, n_layers, hidden), &mut rng).unwrap();
        // Move the zero-initialized projections so the codec is non-trivial.
        for pair in &mut model.encoder.pairs {
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
        let out = &mut model.predictor.out_proj;
        for v in out
            .weight
            .data_mut()
            .iter_mut()
            .chain(out.bias.data_mut().iter_mut())
        {
            *v = rng.uniform(-0.1, 0.1);
        }
        model
    }

    fn unit_batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed);
        let mut t = Tensor::zeros(vec![rows, cols]);
        for v in t.data_mut() {
            *v = rng.next_f64();
        }
        t
    }

    #[test]
    fn identity_encoder_compresses_to_prefix() {
        let model = identity_model(4, 2);
        let (zc, za) = model.encode(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(zc, vec![1.0, 2.0]);
        assert_eq!(za, vec![3.0, 4.0]);
        assert_eq!(model.compress(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn encode_is_deterministic() {
        let model = randomized_model(8, 2, 2, 8, 42);
        let x: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        assert_eq!(model.encode(&x).unwrap(), model.encode(&x).unwrap());
    }

    #[test]
    fn encode_concat_round_trips_through_inverse() {
        let model = randomized_model(8, 2, 3, 8, 7);
        let x: Vec<f64> = (0..8).map(|i| 0.1 + 0.1 * i as f64).collect();
        let (zc, za) = model.encode(&x).unwrap();
        let back = model.reconstruct_with_aux(&zc, &za).unwrap();
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn true_aux_makes_reconstruction_exact() {
        // Predictor-is-sole-error: with the true z_aux substituted, the
        // reconstruction is exact to floating-point noise for every sample.
        let model = randomized_model(16, 4, 4, 16, 8);
        let x = unit_batch(32, 16, 9);
        for i in 0..x.rows() {
            let (zc, za) = model.encode(x.row(i)).unwrap();
            let back = model.reconstruct_with_aux(&zc, &za).unwrap();
            for (a, b) in back.iter().zip(x.row(i)) {
                assert!((a - b).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn zero_predictor_identity_encoder_hand_reconstruction() {
        let model = identity_model(4, 2);
        let x_hat = model.reconstruct(&[1.0, 2.0]).unwrap();
        assert_eq!(x_hat, vec![1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn loss_hand_arithmetic() {
        let model = identity_model(4, 2);
        let batch = Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let (total, recon, aux) = model.loss(&batch, 1.0).unwrap();
        assert!((recon - 6.25).abs() < 1e-12, "recon {recon}");
        assert!((aux - 12.5).abs() < 1e-12, "aux {aux}");
        assert!((total - 18.75).abs() < 1e-12, "total {total}");
    }

    #[test]
    fn lambda_zero_makes_total_equal_recon() {
        let model = randomized_model(8, 2, 2, 8, 10);
        let batch = unit_batch(5, 8, 11);
        let (total, recon, _) = model.loss(&batch, 0.0).unwrap();
        assert_eq!(total, recon);
    }

    #[test]
    fn oracle_predictor_gives_zero_loss() {
        // Constant z_aux across the data plus a bias-only predictor set to
        // that constant is an exact oracle: every loss term vanishes.
        let mut model = identity_model(4, 2);
        let c = [0.3, -0.7];
        model.predictor.out_proj.bias = Tensor::from_vec(c.to_vec());
        let batch = Tensor::matrix(2, 4, vec![0.1, 0.9, c[0], c[1], 0.4, 0.2, c[0], c[1]]);
        let (total, recon, aux) = model.loss(&batch, 1.0).unwrap();
        assert!(total.abs() <= 1e-24, "total {total}");
        assert!(recon.abs() <= 1e-24);
        assert!(aux.abs() <= 1e-24);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let model = identity_model(4, 2);
        let batch = Tensor::zeros(vec![0, 4]);
        assert!(model.loss(&batch, 1.0).is_err());
    }

    #[test]
    fn joint_loss_gradients_pass_finite_difference_check() {
        let model = randomized_model(8, 2, 2, 8, 12);
        let batch = unit_batch(4, 8, 13);
        let lambda = 0.7;

        let mut theta = model.flatten_params();
        let (_, _, _, analytic) = model.loss_backward(&batch, lambda, true);
        let mut rng = RngStream::new(14);
        let err = grad_check(
            |t| {
                let mut probe = model.clone();
                probe.assign_params(t).unwrap();
                probe.loss(&batch, lambda).unwrap().0
            },
            &mut theta,
            &analytic,
            1e-5,
            &mut rng,
            96,
        )
        .unwrap();
        assert!(err < 1e-5, "joint loss grad err {err}");
    }

    #[test]
    fn pretrain_zero_epochs_is_identity() {
        let mut model = randomized_model(8, 2, 2, 8, 15);
        let before = model.flatten_params();
        let data = unit_batch(16, 8, 16);
        let cfg = TrainConfig {
            pretrain_epochs: 0,
            ..TrainConfig::default()
        };
        let history = model.pretrain_predictor(&data, &cfg).unwrap();
        assert!(history.records.is_empty());
        assert_eq!(model.flatten_params(), before);
    }

    #[test]
    fn pretrain_absorbs_constant_aux_into_bias() {
        // z_aux constant across the dataset: the output bias alone can fit
        // it, so the auxiliary loss collapses quickly.
        let mut model = identity_model(4, 2);
        let c = [0.3, -0.2];
        let n = 64;
        let mut data = Tensor::zeros(vec![n, 4]);
        let mut rng = RngStream::new(17);
        for i in 0..n {
            let row = data.row_mut(i);
            row[0] = rng.next_f64();
            row[1] = rng.next_f64();
            row[2] = c[0];
            row[3] = c[1];
        }
        let cfg = TrainConfig {
            pretrain_epochs: 500,
            batch_size: 16,
            log_every: 100,
            seed: 18,
            ..TrainConfig::default()
        };
        let history = model.pretrain_predictor(&data, &cfg).unwrap();
        let last = history.records.last().unwrap();
        assert!(last.aux_mse < 1e-6, "aux_mse {}", last.aux_mse);
    }

    #[test]
    fn pretrain_improves_over_first_epoch() {
        let mut model = randomized_model(8, 2, 2, 8, 19);
        let data = curve_dataset(128, 20);
        let cfg = TrainConfig {
            pretrain_epochs: 200,
            batch_size: 32,
            log_every: 1,
            seed: 21,
            ..TrainConfig::default()
        };
        let history = model.pretrain_predictor(&data, &cfg).unwrap();
        let first = history.records.first().unwrap();
        let last = history.records.last().unwrap();
        assert!(
            last.total_loss <= first.total_loss,
            "epoch 200 {} > epoch 1 {}",
            last.total_loss,
            first.total_loss
        );
    }

    /// Points on a 1-D nonlinear curve embedded in ℝ⁸, values in [0,1].
    fn curve_dataset(n: usize, seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed);
        let omegas = [2.3, 4.1, 1.7, 5.9, 3.3, 2.9, 4.7, 1.3];
        let phases = [0.3, 1.1, 2.0, 0.7, 1.9, 0.1, 2.6, 1.5];
        let mut data = Tensor::zeros(vec![n, 8]);
        for i in 0..n {
            let u = rng.next_f64();
            for j in 0..8 {
                data.row_mut(i)[j] = 0.5 + 0.5 * (omegas[j] * u + phases[j]).sin();
            }
        }
        data
    }

    #[test]
    fn joint_zero_epochs_is_identity() {
        let mut model = randomized_model(8, 2, 2, 8, 22);
        let before = model.flatten_params();
        let data = unit_batch(16, 8, 23);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let history = model.train_joint(&data, &cfg).unwrap();
        assert!(history.records.is_empty());
        assert_eq!(model.flatten_params(), before);
    }

    #[test]
    fn joint_training_fits_a_nonlinear_curve() {
        let data = curve_dataset(256, 24);
        // Data variance, per coordinate, averaged — same normalization as
        // recon_mse.
        let n = data.rows();
        let mut mean = vec![0.0; 8];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(data.row(i)) {
                *m += v / n as f64;
            }
        }
        let mut var = 0.0;
        for i in 0..n {
            for (m, v) in mean.iter().zip(data.row(i)) {
                var += (v - m) * (v - m);
            }
        }
        var /= (n * 8) as f64;

        let mut rng = RngStream::new(25);
        let mut model = IdrpModel::new(&model_cfg(8, 2, 2, 16), &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs: 300,
            pretrain_epochs: 200,
            batch_size: 64,
            log_every: 50,
            seed: 26,
            ..TrainConfig::default()
        };
        model.pretrain_predictor(&data, &cfg).unwrap();
        let history = model.train_joint(&data, &cfg).unwrap();
        let final_recon = history.records.last().unwrap().recon_mse;
        assert!(
            final_recon < 0.1 * var,
            "recon {final_recon} vs 10% of variance {var}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let data = curve_dataset(64, 27);
        let cfg = TrainConfig {
            epochs: 20,
            pretrain_epochs: 10,
            batch_size: 16,
            log_every: 1,
            seed: 28,
            ..TrainConfig::default()
        };
        let run = || {
            let mut rng = RngStream::new(29);
            let mut model = IdrpModel::new(&model_cfg(8, 2, 2, 8), &mut rng).unwrap();
            let h1 = model.pretrain_predictor(&data, &cfg).unwrap();
            let h2 = model.train_joint(&data, &cfg).unwrap();
            (h1, h2, model.flatten_params())
        };
        let (a1, a2, ap) = run();
        let (b1, b2, bp) = run();
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
        assert_eq!(ap, bp);
    }

    #[test]
    fn frozen_flow_training_moves_only_the_predictor() {
        let data = curve_dataset(64, 30);
        let mut model = randomized_model(8, 2, 2, 8, 31);
        let enc_before = {
            let mut v = Vec::new();
            model.encoder.write_flat(&mut v);
            v
        };
        let pred_before = {
            let mut v = Vec::new();
            model.predictor.write_flat(&mut v);
            v
        };
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 16,
            train_flow: false,
            lambda_aux: 0.0,
            log_every: 1,
            seed: 32,
            ..TrainConfig::default()
        };
        let history = model.train_joint(&data, &cfg).unwrap();
        let enc_after = {
            let mut v = Vec::new();
            model.encoder.write_flat(&mut v);
            v
        };
        let pred_after = {
            let mut v = Vec::new();
            model.predictor.write_flat(&mut v);
            v
        };
        assert_eq!(enc_before, enc_after, "encoder must stay frozen");
        assert_ne!(pred_before, pred_after, "predictor must move");
        // λ = 0: the optimized objective is recon_mse alone.
        for r in &history.records {
            assert_eq!(r.total_loss, r.recon_mse);
        }
    }

    #[test]
    fn noise_analysis_oracle_predictor_reports_zeros() {
        let mut model = identity_model(4, 2);
        let c = [0.25, 0.75];
        model.predictor.out_proj.bias = Tensor::from_vec(c.to_vec());
        let mut data = Tensor::zeros(vec![8, 4]);
        let mut rng = RngStream::new(33);
        for i in 0..8 {
            let row = data.row_mut(i);
            row[0] = rng.next_f64();
            row[1] = rng.next_f64();
            row[2] = c[0];
            row[3] = c[1];
        }
        let report = model.noise_analysis(&data);
        for r in &report.records {
            assert_eq!(r.aux_err, 0.0);
            assert_eq!(r.recon_err, 0.0);
            assert!(r.psnr.is_infinite());
        }
        assert_eq!(report.summary.mean_recon_err, 0.0);
        assert!(report.summary.psnr_of_mean_mse.is_infinite());
    }

    #[test]
    fn zero_aux_error_implies_tiny_recon_error() {
        // Any sample whose aux_err happens to be 0 must reconstruct exactly
        // (up to round-off): invertibility leaves no other error source.
        let model = randomized_model(8, 2, 2, 8, 34);
        let data = unit_batch(16, 8, 35);
        let report = model.noise_analysis(&data);
        for r in &report.records {
            if r.aux_err == 0.0 {
                assert!(r.recon_err <= 1e-12);
            }
            // And in all cases the reconstruction error is finite and the
            // decomposition produced both stages.
            assert!(r.recon_err.is_finite());
        }
    }

    #[test]
    fn noise_analysis_matches_loss_recon_mse() {
        let model = randomized_model(8, 2, 2, 8, 36);
        let data = unit_batch(32, 8, 37);
        let report = model.noise_analysis(&data);
        let (_, recon_mse, _) = model.loss(&data, 1.0).unwrap();
        let mean_from_noise = report.summary.mean_recon_err / 8.0;
        assert!(
            (mean_from_noise - recon_mse).abs() <= 1e-12,
            "{mean_from_noise} vs {recon_mse}"
        );
    }

    #[test]
    fn history_csv_has_header_and_rows() {
        let history = TrainHistory {
            records: vec![EpochRecord {
                epoch: 1,
                total_loss: 0.5,
                recon_mse: 0.3,
                aux_mse: 0.2,
            }],
        };
        let csv = history.to_csv();
        assert!(csv.starts_with("epoch,total_loss,recon_mse,aux_mse\n"));
        assert!(csv.contains("1,0.5,0.3,0.2"));
    }
}
