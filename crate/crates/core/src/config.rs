//! Run configuration: one JSON document covering model shape, training
//! schedule, data source, bank size, and output location.
//!
//! Every section rejects unknown keys (typos fail loudly), every field has
//! a default, and the whole document is validated against the model
//! invariants before any work starts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DataSource, Dataset};
use crate::error::CoreError;
use crate::flow::FlowConfig;
use crate::idrp::{ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Input/latent dimension d (must be even).
    pub d: usize,
    /// Stored-prefix length m.
    pub m: usize,
    /// Coupling/permutation pair count N.
    pub n_layers: usize,
    /// Coupling subnet hidden width h.
    pub hidden: usize,
    /// Predictor hidden width h_p.
    pub predictor_hidden: usize,
    /// Residual blocks r per coupling subnet.
    pub residual_blocks: usize,
    /// Scale clamp bound.
    pub s_max: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d: 64,
            m: 16,
            n_layers: 6,
            hidden: 256,
            predictor_hidden: 256,
            residual_blocks: 1,
            s_max: 2.0,
        }
    }
}

impl ModelSection {
    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            d: self.d,
            m: self.m,
            n_layers: self.n_layers,
            hidden: self.hidden,
            residual_blocks: self.residual_blocks,
            s_max: self.s_max,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            flow: self.flow_config(),
            predictor_hidden: self.predictor_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// Fraction of samples that land in the training split.
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::default(),
            train_fraction: 0.5,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankSection {
    pub max_mem: usize,
}

impl Default for BankSection {
    fn default() -> Self {
        Self { max_mem: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub bank: BankSection,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            train: TrainConfig::default(),
            data: DataSection::default(),
            bank: BankSection::default(),
            out_dir: "out".to_string(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        self.model
            .flow_config()
            .validate()
            .map_err(|e| CoreError::Config(e.to_string()))?;
        if self.model.predictor_hidden == 0 {
            return Err(CoreError::Config(
                "predictor_hidden must be positive".to_string(),
            ));
        }
        self.train
            .validate()
            .map_err(|e| CoreError::Config(e.to_string()))?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(CoreError::Config(
                "train_fraction must lie strictly between 0 and 1".to_string(),
            ));
        }
        if self.bank.max_mem == 0 {
            return Err(CoreError::Config("max_mem must be positive".to_string()));
        }
        if self.out_dir.is_empty() {
            return Err(CoreError::Config("out_dir must be non-empty".to_string()));
        }
        Ok(())
    }

    /// Loads, widens to even d if the source needs it, and validates.
    pub fn from_json(text: &str) -> Result<Self, CoreError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CoreError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Resolves the data section into a concrete dataset, zero-padded to an
    /// even width when a loaded file has odd d.
    pub fn load_dataset(&self) -> Result<Dataset, CoreError> {
        let ds = self.data.source.load()?;
        let ds = ds.padded_to_even();
        if ds.d() != self.model.d {
            return Err(CoreError::Config(format!(
                "data dimension {} does not match model d {}",
                ds.d(),
                self.model.d
            )));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ManifoldKind;

    #[test]
    fn empty_document_yields_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.n_layers, 6);
        assert_eq!(cfg.model.hidden, 256);
        assert_eq!(cfg.bank.max_mem, 64);
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let cfg = RunConfig::from_json(
            r#"{"model": {"d": 8, "m": 2, "n_layers": 2, "hidden": 8, "predictor_hidden": 8},
                "train": {"epochs": 5},
                "out_dir": "results"}"#,
        )
        .unwrap();
        assert_eq!(cfg.model.d, 8);
        assert_eq!(cfg.model.s_max, 2.0);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.out_dir, "results");
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in [
            r#"{"surprise": 1}"#,
            r#"{"model": {"depth": 3}}"#,
            r#"{"train": {"learning_rate": 0.1}}"#,
            r#"{"data": {"fraction": 0.5}}"#,
            r#"{"bank": {"slots": 4}}"#,
            r#"{"data": {"source": {"manifold": {"samples": 10}}}}"#,
        ] {
            assert!(
                matches!(RunConfig::from_json(doc), Err(CoreError::Config(_))),
                "accepted: {doc}"
            );
        }
    }

    #[test]
    fn invalid_settings_fail_validation() {
        for doc in [
            r#"{"model": {"d": 7}}"#,                       // odd d
            r#"{"model": {"d": 8, "m": 8}}"#,              // m not < d
            r#"{"train": {"lr": 0.0}}"#,                   // non-positive lr
            r#"{"train": {"batch_size": 0}}"#,             // empty batches
            r#"{"data": {"train_fraction": 1.0}}"#,        // no test split
            r#"{"bank": {"max_mem": 0}}"#,                 // no slots
            r#"{"out_dir": ""}"#,                          // nowhere to write
        ] {
            assert!(
                matches!(RunConfig::from_json(doc), Err(CoreError::Config(_))),
                "accepted: {doc}"
            );
        }
    }

    #[test]
    fn data_sources_parse_in_all_forms() {
        let cfg = RunConfig::from_json(
            r#"{"data": {"source": {"csv": {"path": "x.csv", "has_header": true}}}}"#,
        )
        .unwrap();
        assert!(matches!(
            cfg.data.source,
            DataSource::Csv { ref path, has_header: true } if path == "x.csv"
        ));

        let cfg =
            RunConfig::from_json(r#"{"data": {"source": {"pgm": {"path": "img.pgm"}}}}"#).unwrap();
        assert!(matches!(cfg.data.source, DataSource::Pgm { .. }));

        let cfg = RunConfig::from_json(
            r#"{"data": {"source": {"manifold": {"n": 32, "d": 64, "kind": "blobs"}}}}"#,
        )
        .unwrap();
        match cfg.data.source {
            DataSource::Manifold(spec) => {
                assert_eq!(spec.n, 32);
                assert_eq!(spec.kind, ManifoldKind::Blobs);
                assert_eq!(spec.intrinsic_dim, 2);
            }
            other => panic!("unexpected source {other:?}"),
        }
    }

    #[test]
    fn round_trip_preserves_the_document() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn dataset_dimension_mismatch_is_a_config_error() {
        let cfg = RunConfig::from_json(
            r#"{"model": {"d": 8, "m": 2, "n_layers": 1, "hidden": 4, "predictor_hidden": 4},
                "data": {"source": {"manifold": {"n": 4, "d": 6, "intrinsic_dim": 1}}}}"#,
        )
        .unwrap();
        assert!(matches!(cfg.load_dataset(), Err(CoreError::Config(_))));
    }
}
