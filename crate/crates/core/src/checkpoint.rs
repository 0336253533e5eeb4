//! Checkpoint container: a single JSON document holding the configuration
//! snapshot, the RNG identity, every parameter array (named and shaped),
//! and an FNV-1a digest over the parameter bits.
//!
//! Values serialize in their shortest exact decimal form and parse back
//! bit-for-bit, so save → load reproduces model outputs exactly. The digest
//! catches any edit to a stored parameter between save and load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diffcore::rng::RNG_ALGORITHM;
use crate::error::CoreError;
use crate::idrp::IdrpModel;
use crate::membank::MemoryBank;
use crate::pca::PcaModel;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    /// "idrp" | "pca" | "bank".
    pub kind: String,
    pub config: RunConfig,
    pub rng_algorithm: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idrp: Option<IdrpModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pca: Option<PcaModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bank: Option<MemoryBank>,
    /// FNV-1a 64 over the parameter bits, hex.
    pub param_digest: String,
}

impl Checkpoint {
    pub fn new_idrp(config: RunConfig, seed: u64, model: IdrpModel) -> Self {
        let mut ckpt = Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: "idrp".to_string(),
            config,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            seed,
            idrp: Some(model),
            pca: None,
            bank: None,
            param_digest: String::new(),
        };
        ckpt.param_digest = ckpt.compute_digest();
        ckpt
    }

    pub fn new_pca(config: RunConfig, seed: u64, model: PcaModel) -> Self {
        let mut ckpt = Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: "pca".to_string(),
            config,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            seed,
            idrp: None,
            pca: Some(model),
            bank: None,
            param_digest: String::new(),
        };
        ckpt.param_digest = ckpt.compute_digest();
        ckpt
    }

    pub fn new_bank(config: RunConfig, seed: u64, model: IdrpModel, bank: MemoryBank) -> Self {
        let mut ckpt = Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: "bank".to_string(),
            config,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            seed,
            idrp: Some(model),
            pca: None,
            bank: Some(bank),
            param_digest: String::new(),
        };
        ckpt.param_digest = ckpt.compute_digest();
        ckpt
    }

    /// Digest over every stored parameter array, in field order.
    pub fn compute_digest(&self) -> String {
        let mut bytes: Vec<u8> = Vec::new();
        if let Some(model) = &self.idrp {
            for v in model.flatten_params() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        if let Some(pca) = &self.pca {
            for v in pca
                .mean
                .iter()
                .chain(pca.components.data())
                .chain(&pca.explained_variance)
            {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        if let Some(bank) = &self.bank {
            for i in 0..bank.max_mem() {
                for v in bank.slot_vec(i) {
                    bytes.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
            for a in bank.aff() {
                bytes.extend_from_slice(&a.to_le_bytes());
            }
        }
        format!("{:016x}", fnv1a64(bytes))
    }

    pub fn verify_digest(&self) -> Result<(), CoreError> {
        let computed = self.compute_digest();
        if computed != self.param_digest {
            return Err(CoreError::Checkpoint(format!(
                "parameter digest mismatch: stored {}, computed {computed}",
                self.param_digest
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CoreError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::Checkpoint(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|source| CoreError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Parses without digest verification (so a corrupted file can still be
    /// inspected); use [`Checkpoint::load_verified`] on trusted paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CoreError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(CoreError::Checkpoint(format!(
                "unsupported format_version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    pub fn load_verified(path: impl AsRef<Path>) -> Result<Self, CoreError> {
        let ckpt = Self::load(path)?;
        ckpt.verify_digest()?;
        Ok(ckpt)
    }

    pub fn require_idrp(&self) -> Result<&IdrpModel, CoreError> {
        self.idrp
            .as_ref()
            .ok_or_else(|| CoreError::Checkpoint("checkpoint holds no idrp model".to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::rng::RngStream;
    use crate::diffcore::tensor::Tensor;
    use crate::pca::pca_fit;
    use std::path::PathBuf;

    fn tmp_path(name: &str) -> PathBuf {
        std::env::temp_dir().join(format!("flowmem_ckpt_{}_{}", std::process::id(), name))
    }

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.d = 8;
        cfg.model.m = 2;
        cfg.model.n_layers = 2;
        cfg.model.hidden = 8;
        cfg.model.predictor_hidden = 8;
        cfg
    }

    fn small_model(cfg: &RunConfig, seed: u64) -> IdrpModel {
        let mut rng = RngStream::new(seed);
        let mut model = IdrpModel::new(&cfg.model.model_config(), &mut rng).unwrap();
        // Populate the zero-initialized projections so the digest covers
        // non-trivial values.
        let n = model.param_count();
        let mut flat = model.flatten_params();
        for (i, v) in flat.iter_mut().enumerate() {
            if *v == 0.0 {
                *v = (i as f64 % 7.0 - 3.0) * 1e-3;
            }
        }
        let _ = n;
        model.assign_params(&flat).unwrap();
        model
    }

    #[test]
    fn fnv1a64_known_vectors() {
        // Standard FNV-1a test vectors.
        assert_eq!(fnv1a64("".bytes()), 0xcbf29ce484222325);
        assert_eq!(fnv1a64("a".bytes()), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64("foobar".bytes()), 0x85944171f73967e8);
    }

    #[test]
    fn idrp_round_trip_is_bit_exact() {
        let cfg = small_config();
        let model = small_model(&cfg, 1);
        let x: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let before = model.encode(&x).unwrap();

        let path = tmp_path("idrp.json");
        let ckpt = Checkpoint::new_idrp(cfg, 1, model);
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load_verified(&path).unwrap();
        assert_eq!(&loaded, &ckpt);
        let after = loaded.require_idrp().unwrap().encode(&x).unwrap();
        assert_eq!(before, after);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn digest_detects_parameter_mutation() {
        let cfg = small_config();
        let model = small_model(&cfg, 2);
        let mut ckpt = Checkpoint::new_idrp(cfg, 2, model);
        ckpt.verify_digest().unwrap();

        let model = ckpt.idrp.as_mut().unwrap();
        let mut flat = model.flatten_params();
        flat[3] += 1e-9;
        model.assign_params(&flat).unwrap();
        assert!(ckpt.verify_digest().is_err());
    }

    #[test]
    fn corrupted_file_fails_digest_verification() {
        let cfg = small_config();
        let model = small_model(&cfg, 3);
        let path = tmp_path("corrupt.json");
        Checkpoint::new_idrp(cfg, 3, model).save(&path).unwrap();

        // Flip one digit inside a stored weight (searching after the model
        // section starts, so the config's own numbers are not the match).
        let text = std::fs::read_to_string(&path).unwrap();
        let params_at = text.find("\"idrp\": {").expect("model section");
        let needle = "0.001";
        let pos = params_at
            + text[params_at..]
                .find(needle)
                .expect("a weight containing 0.001");
        let mut corrupted = text.clone();
        corrupted.replace_range(pos..pos + needle.len(), "0.002");
        std::fs::write(&path, &corrupted).unwrap();

        // Still parses; digest verification reports the tampering.
        let loaded = Checkpoint::load(&path).unwrap();
        assert!(loaded.verify_digest().is_err());
        assert!(Checkpoint::load_verified(&path).is_err());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn unknown_fields_and_bad_versions_are_rejected() {
        let cfg = small_config();
        let model = small_model(&cfg, 4);
        let path = tmp_path("fields.json");
        Checkpoint::new_idrp(cfg, 4, model).save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();

        let with_extra = text.replacen(
            "\"format_version\"",
            "\"surprise\": 1,\n  \"format_version\"",
            1,
        );
        std::fs::write(&path, with_extra).unwrap();
        assert!(Checkpoint::load(&path).is_err());

        let with_bad_version = text.replacen(
            "\"format_version\": 1",
            "\"format_version\": 99",
            1,
        );
        std::fs::write(&path, with_bad_version).unwrap();
        assert!(Checkpoint::load(&path).is_err());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn pca_and_bank_kinds_round_trip() {
        let mut rng = RngStream::new(5);
        let mut data = Tensor::zeros(vec![12, 8]);
        for v in data.data_mut() {
            *v = rng.next_f64();
        }
        let pca = pca_fit(&data, 3).unwrap();
        let path = tmp_path("pca.json");
        let ckpt = Checkpoint::new_pca(small_config(), 5, pca);
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load_verified(&path).unwrap();
        assert_eq!(loaded, ckpt);
        assert!(loaded.require_idrp().is_err());
        std::fs::remove_file(&path).ok();

        let cfg = small_config();
        let model = small_model(&cfg, 6);
        let mut bank = MemoryBank::new(4, 2).unwrap();
        bank.write_latent(&[0.5, -0.25]).unwrap();
        let path = tmp_path("bank.json");
        let ckpt = Checkpoint::new_bank(cfg, 6, model, bank);
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load_verified(&path).unwrap();
        assert_eq!(loaded, ckpt);
        std::fs::remove_file(&path).ok();
    }
}
