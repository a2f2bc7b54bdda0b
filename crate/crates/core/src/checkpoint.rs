//! Versioned JSON checkpoints for trained parameters.
//!
//! Format (version 1): one JSON object
//! `{"version": 1, "config": {..flat TrainConfig..}, "params": {name: {"shape": [r, c], "data": [..row-major..]}}}`.
//! Parameter names are namespaced (`encoder.*`, `head.*`, `gen.*`) so the
//! encoder player and the generator player share a single file. Restoring
//! re-derives every dimension from the stored config plus the `encoder.w1`
//! input width, so a checkpoint is self-describing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::encoder::{ProjectionHead, TargetEncoder};
use crate::generator::ViewGenerator;
use crate::graph::{sym_normalize, Graph};
use crate::trainer::{TrainConfig, TrainOutput};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}, this build reads version {CHECKPOINT_VERSION}")]
    Version(u32),
    #[error("checkpoint parameter error: {0}")]
    Param(String),
    #[error("invalid checkpoint config: {0}")]
    Config(#[from] crate::trainer::ConfigError),
}

/// One tensor: row-major values plus its (rows, cols) shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    /// Relative path of the run manifest that produced this file, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
    pub params: BTreeMap<String, ParamEntry>,
}

/// A model rebuilt from a checkpoint, ready for inference-time embedding.
pub struct RestoredModel {
    pub config: TrainConfig,
    pub encoder_store: ParamStore,
    pub generator_store: ParamStore,
    pub encoder: TargetEncoder,
    pub head: ProjectionHead,
    pub generator: Option<ViewGenerator>,
}

impl RestoredModel {
    /// Mean embeddings on the clean graph, matching [`TrainOutput::embeddings`].
    #[must_use]
    pub fn embeddings(&self, g: &Graph) -> Array2<f64> {
        let adj = sym_normalize(g);
        self.encoder.embed_mu(&self.encoder_store, &adj, g.features())
    }
}

impl Checkpoint {
    /// Snapshots the resolved config and every parameter of both stores.
    #[must_use]
    pub fn capture(config: &TrainConfig, stores: &[&ParamStore]) -> Checkpoint {
        let mut params = BTreeMap::new();
        for store in stores {
            for (name, shape, data) in store.export() {
                params.insert(name, ParamEntry { shape: [shape.0, shape.1], data });
            }
        }
        Checkpoint { version: CHECKPOINT_VERSION, config: config.clone(), manifest: None, params }
    }

    /// Convenience wrapper over [`Checkpoint::capture`] for a finished run.
    #[must_use]
    pub fn from_output(output: &TrainOutput, config: &TrainConfig) -> Checkpoint {
        Checkpoint::capture(config, &[&output.encoder_store, &output.generator_store])
    }

    /// Serializes to pretty JSON via a temp file + rename, so a crash never
    /// leaves a truncated checkpoint at the target path.
    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        let json = serde_json::to_string_pretty(self)?;
        let tmp = path.with_file_name(format!(
            "{}.tmp",
            path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
        ));
        fs::write(&tmp, json)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(ckpt.version));
        }
        Ok(ckpt)
    }

    /// Rebuilds the encoder, head, and (if configured) generator, then
    /// overwrites their freshly initialized values with the stored tensors.
    /// Every live parameter must be present and the file must not carry
    /// parameters the config does not produce.
    pub fn restore(&self) -> Result<RestoredModel, CheckpointError> {
        self.config.validate()?;
        let w1 = self
            .params
            .get("encoder.w1")
            .ok_or_else(|| CheckpointError::Param("missing `encoder.w1`".into()))?;
        let in_dim = w1.shape[0];
        let h = self.config.hidden_dim;
        if w1.shape[1] != h {
            return Err(CheckpointError::Param(format!(
                "`encoder.w1` is {:?} but the config says hidden_dim {h}",
                w1.shape
            )));
        }

        // The RNG only shapes the throwaway init; every value is imported.
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut encoder_store = ParamStore::new();
        let encoder =
            TargetEncoder::init(&mut encoder_store, in_dim, h, h, self.config.activation, &mut rng);
        let head = ProjectionHead::init(&mut encoder_store, h, &mut rng);
        let mut generator_store = ParamStore::new();
        let generator = if self.config.use_generator {
            Some(
                ViewGenerator::init(
                    &mut generator_store,
                    in_dim,
                    h,
                    (0.0, self.config.p_ea),
                    self.config.t_g,
                    &mut rng,
                )
                .map_err(|e| CheckpointError::Param(e.to_string()))?,
            )
        } else {
            None
        };

        for (name, entry) in &self.params {
            let store =
                if name.starts_with("gen.") { &mut generator_store } else { &mut encoder_store };
            store
                .import(name, (entry.shape[0], entry.shape[1]), &entry.data)
                .map_err(CheckpointError::Param)?;
        }
        for store in [&encoder_store, &generator_store] {
            for id in store.ids() {
                let name = store.name(id);
                if !self.params.contains_key(name) {
                    return Err(CheckpointError::Param(format!(
                        "checkpoint is missing `{name}`"
                    )));
                }
            }
        }
        Ok(RestoredModel {
            config: self.config.clone(),
            encoder_store,
            generator_store,
            encoder,
            head,
            generator,
        })
    }
}
