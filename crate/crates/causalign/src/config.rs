//! Run configuration: a single structured file (TOML, or JSON as an
//! alternative encoding) with sections for the synthetic corpus, the model,
//! proxy pretraining, and variant training — plus the run-directory layout
//! every command writes into.

use std::path::{Path, PathBuf};

use crate::corpus::SynthConfig;
use crate::engine::{TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::scalar::Precision;
use crate::util::{derive_seed, sha256_hex};

/// The `[model]` section. `vocab_size` is usually left unset and taken from
/// the built vocabulary; setting it pins the embedding table size explicitly
/// (it must then be at least as large as the vocabulary).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub vocab_size: Option<usize>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            vocab_size: None,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            max_seq: 128,
        }
    }
}

impl ModelSection {
    /// Concrete dimensions given the actual vocabulary size.
    pub fn dims(&self, vocab_size: usize) -> Result<ModelDims> {
        let v = match self.vocab_size {
            Some(v) if v < vocab_size => {
                return Err(Error::InvalidConfig(format!(
                    "configured vocab_size {v} is smaller than the built vocabulary ({vocab_size} tokens)"
                )));
            }
            Some(v) => v,
            None => vocab_size,
        };
        let dims = ModelDims {
            vocab_size: v,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq: self.max_seq,
        };
        dims.validate()?;
        Ok(dims)
    }
}

/// The `[pretrain]` section: how the proxy is trained from initialization.
/// Always plain uniform-weight fine-tuning with history present.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub grad_clip: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 40,
            learning_rate: 1e-3,
            batch_size: 8,
            weight_decay: 0.0,
            dropout: 0.0,
            grad_clip: Some(1.0),
        }
    }
}

/// Everything a run needs. One file drives the whole pipeline; artifacts
/// land under `<out_root>/<run_name>/seed-<seed>/`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run_name: String,
    /// Output root; falls back to `$CAUSALIGN_OUT`, then `./runs`.
    pub out_root: Option<PathBuf>,
    /// Master seed. Synthetic-data, pretraining, and per-variant training
    /// streams are all derived from it, so one flag reseeds the whole run.
    pub seed: u64,
    pub precision: Precision,
    /// Vocabulary size cap (specials included).
    pub max_vocab: usize,
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_name: "run".into(),
            out_root: None,
            seed: 42,
            precision: Precision::Double,
            max_vocab: 512,
            synth: SynthConfig::default(),
            model: ModelSection::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn valid_path_component(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && !name.contains(['/', '\\'])
        && !name.contains('\0')
}

impl RunConfig {
    /// Parses TOML by default, JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::MissingArtifact {
            what: "run config",
            path: path.to_path_buf(),
            hint: format!("create one (`causalign` defaults to causalign.toml) ({e})"),
        })?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                what: "run config",
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
        } else {
            toml::from_str(&text).map_err(|e| Error::Parse {
                what: "run config",
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = if path.extension().is_some_and(|e| e == "json") {
            serde_json::to_string_pretty(self).expect("config serialization cannot fail")
        } else {
            toml::to_string_pretty(self).map_err(|e| Error::Parse {
                what: "run config",
                path: path.to_path_buf(),
                reason: format!("not TOML-encodable: {e}"),
            })?
        };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if !valid_path_component(&self.run_name) {
            return Err(Error::InvalidConfig(format!(
                "run_name {:?} is not a valid path component",
                self.run_name
            )));
        }
        self.synth.validate()?;
        if self.max_vocab < crate::corpus::SPECIAL_TOKENS.len() + 1 {
            return Err(Error::InvalidConfig(format!(
                "max_vocab {} leaves no room for content tokens",
                self.max_vocab
            )));
        }
        // Surface model-section mistakes that don't depend on the vocabulary.
        if self.model.d_model == 0
            || self.model.n_heads == 0
            || self.model.d_model % self.model.n_heads != 0
        {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.model.d_model, self.model.n_heads
            )));
        }
        self.train.validate()?;
        Ok(())
    }

    /// Reseeds the whole run: the master seed plus the derived synthetic and
    /// training streams.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = derive_seed("synth", &[seed]);
        self.train.seed = derive_seed("train", &[seed]);
        self
    }

    /// Hex sha256 over the canonical JSON encoding; stamped into checkpoints
    /// and reports so results trace back to their exact configuration.
    pub fn sha256(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialization cannot fail");
        sha256_hex(&json)
    }

    pub fn resolved_out_root(&self) -> PathBuf {
        self.out_root
            .clone()
            .or_else(|| std::env::var_os("CAUSALIGN_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolved_out_root()
            .join(&self.run_name)
            .join(format!("seed-{}", self.seed))
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.run_dir().join("corpus.jsonl")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.run_dir().join("vocab.json")
    }

    pub fn proxy_path(&self) -> PathBuf {
        self.run_dir().join("proxy.json")
    }

    pub fn proxy_loss_path(&self) -> PathBuf {
        self.run_dir().join("loss-proxy.csv")
    }

    pub fn weights_path(&self) -> PathBuf {
        self.run_dir().join("weights.jsonl")
    }

    pub fn checkpoint_path(&self, variant: Variant) -> PathBuf {
        self.run_dir().join(format!("ckpt-{variant}.json"))
    }

    pub fn loss_path(&self, variant: Variant) -> PathBuf {
        self.run_dir().join(format!("loss-{variant}.csv"))
    }

    pub fn attribution_path(&self) -> PathBuf {
        self.run_dir().join("attribution.json")
    }

    pub fn attribution_histogram_path(&self) -> PathBuf {
        self.run_dir().join("attribution_histogram.csv")
    }

    pub fn attribution_compare_path(&self) -> PathBuf {
        self.run_dir().join("attribution_compare.json")
    }

    pub fn eval_path(&self, checkpoint: &Path) -> PathBuf {
        let stem = checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into());
        self.run_dir().join(format!("eval-{stem}.csv"))
    }

    /// Pretraining as a concrete training configuration: plain fine-tuning,
    /// uniform weights, history visible, its own derived seed.
    pub fn pretrain_train_config(&self) -> TrainConfig {
        TrainConfig {
            variant: Variant::Base,
            alpha: 0.0,
            learning_rate: self.pretrain.learning_rate,
            weight_decay: self.pretrain.weight_decay,
            dropout: self.pretrain.dropout,
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            grad_clip: self.pretrain.grad_clip,
            seed: derive_seed("pretrain", &[self.seed]),
            ..self.train.clone()
        }
    }

    /// The `[train]` section specialized to one variant, with a per-variant
    /// seed stream so variants differ only by their objective, not by
    /// accidental seed reuse.
    pub fn variant_train_config(&self, variant: Variant) -> TrainConfig {
        let idx = Variant::ALL.iter().position(|&v| v == variant).unwrap() as u64;
        TrainConfig {
            variant,
            seed: derive_seed("variant-train", &[self.train.seed, idx]),
            ..self.train.clone()
        }
    }

    /// Seed for the proxy's parameter initialization.
    pub fn proxy_init_seed(&self) -> u64 {
        derive_seed("proxy-init", &[self.seed])
    }
}
