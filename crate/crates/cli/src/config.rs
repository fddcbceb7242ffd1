//! The single flat pipeline configuration file (TOML). Every key has a
//! default, so an empty file is valid; command-line flags override file
//! values.

use std::path::{Path, PathBuf};

use leafcls::classifier::{BackboneSpec, PreprocessSpec};
use leafcls::optim::{default_optimizer, OptimizerConfig, OptimizerKind};
use leafcls::segmenter::{GateBounds, SegmenterBackendId};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    // Paths.
    /// Corpus root; defaults assume `<corpus_dir>/labels.csv` and
    /// `<corpus_dir>/images/` unless overridden below.
    pub corpus_dir: PathBuf,
    pub label_table: Option<PathBuf>,
    pub image_dir: Option<PathBuf>,
    /// All pipeline outputs live under this directory.
    pub work_dir: PathBuf,
    /// Pretrained backbone weights (safetensors). Unset requires
    /// `allow_random_init = true`.
    pub backbone_weights: Option<PathBuf>,
    /// Salient-object-detection ONNX model for `backend = "salient"`.
    pub salient_model: Option<PathBuf>,

    // Seeds.
    pub balance_seed: u64,
    pub split_seed: u64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub synth_seed: u64,

    // Segmentation.
    /// `"baseline"` or `"salient"`.
    pub backend: String,
    pub threshold: f64,
    pub gate_min: f64,
    pub gate_max: f64,
    /// Optional file with one manually rejected image_id per line.
    pub manual_rejects: Option<PathBuf>,

    // Model.
    pub freeze_boundary: usize,
    pub allow_random_init: bool,

    // Training.
    pub epochs: usize,
    pub batch_size: usize,

    // Optimizer overrides (defaults are the published hyperparameters).
    pub adam_learning_rate: f64,
    pub adam_beta_1: f64,
    pub adam_beta_2: f64,
    pub adam_epsilon: f64,
    pub adam_amsgrad: bool,
    pub rmsprop_learning_rate: f64,
    pub rmsprop_rho: f64,
    pub rmsprop_momentum: f64,
    pub rmsprop_epsilon: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let adam = default_optimizer(OptimizerKind::Adam);
        let rmsprop = default_optimizer(OptimizerKind::Rmsprop);
        let gate = GateBounds::default();
        PipelineConfig {
            corpus_dir: PathBuf::from("corpus"),
            label_table: None,
            image_dir: None,
            work_dir: PathBuf::from("work"),
            backbone_weights: None,
            salient_model: None,
            balance_seed: 42,
            split_seed: 42,
            init_seed: 42,
            shuffle_seed: 42,
            synth_seed: 42,
            backend: "baseline".to_string(),
            threshold: 0.5,
            gate_min: gate.min_frac,
            gate_max: gate.max_frac,
            manual_rejects: None,
            freeze_boundary: 2,
            allow_random_init: false,
            epochs: 50,
            batch_size: 16,
            adam_learning_rate: adam.learning_rate,
            adam_beta_1: adam.beta_1,
            adam_beta_2: adam.beta_2,
            adam_epsilon: adam.epsilon,
            adam_amsgrad: adam.amsgrad,
            rmsprop_learning_rate: rmsprop.learning_rate,
            rmsprop_rho: rmsprop.rho,
            rmsprop_momentum: rmsprop.momentum,
            rmsprop_epsilon: rmsprop.epsilon,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading config {}: {e}", path.display()))?;
        let config: PipelineConfig =
            toml::from_str(&text).map_err(|e| anyhow::anyhow!("parsing config {}: {e}", path.display()))?;
        Ok(config)
    }

    /// Stable digest of the fully resolved configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config json");
        let d = Sha256::digest(json.as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn label_table(&self) -> PathBuf {
        self.label_table.clone().unwrap_or_else(|| self.corpus_dir.join("labels.csv"))
    }

    pub fn image_dir(&self) -> PathBuf {
        self.image_dir.clone().unwrap_or_else(|| self.corpus_dir.join("images"))
    }

    pub fn manifests_dir(&self) -> PathBuf {
        self.work_dir.join("manifests")
    }

    pub fn split_path(&self) -> PathBuf {
        self.manifests_dir().join("split.csv")
    }

    pub fn dataset_manifest_path(&self, name: leafcls::augmenter::DatasetName) -> PathBuf {
        self.manifests_dir().join(format!("{}.csv", name.as_str()))
    }

    pub fn masks_dir(&self) -> PathBuf {
        self.work_dir.join("masks")
    }

    pub fn segmented_dir(&self) -> PathBuf {
        self.work_dir.join("segmented")
    }

    pub fn verdicts_path(&self) -> PathBuf {
        self.work_dir.join("verdicts.csv")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.work_dir.join("models")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.work_dir.join("report")
    }

    pub fn gate_bounds(&self) -> GateBounds {
        GateBounds { min_frac: self.gate_min, max_frac: self.gate_max }
    }

    pub fn backend_id(&self) -> anyhow::Result<SegmenterBackendId> {
        match self.backend.as_str() {
            "baseline" => Ok(SegmenterBackendId::baseline()),
            "salient" => {
                let path = self
                    .salient_model
                    .as_ref()
                    .ok_or_else(|| anyhow::anyhow!("backend = \"salient\" requires salient_model"))?;
                Ok(SegmenterBackendId::salient(path))
            }
            other => Err(anyhow::anyhow!("unknown backend {other:?} (expected baseline|salient)")),
        }
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        BackboneSpec {
            weights_path: self.backbone_weights.clone(),
            freeze_boundary: self.freeze_boundary,
            allow_random_init: self.allow_random_init,
        }
    }

    pub fn preprocess_spec(&self) -> PreprocessSpec {
        PreprocessSpec::default()
    }

    pub fn optimizer_config(&self, kind: OptimizerKind) -> OptimizerConfig {
        let mut cfg = default_optimizer(kind);
        match kind {
            OptimizerKind::Adam => {
                cfg.learning_rate = self.adam_learning_rate;
                cfg.beta_1 = self.adam_beta_1;
                cfg.beta_2 = self.adam_beta_2;
                cfg.epsilon = self.adam_epsilon;
                cfg.amsgrad = self.adam_amsgrad;
            }
            OptimizerKind::Rmsprop => {
                cfg.learning_rate = self.rmsprop_learning_rate;
                cfg.rho = self.rmsprop_rho;
                cfg.momentum = self.rmsprop_momentum;
                cfg.epsilon = self.rmsprop_epsilon;
            }
        }
        cfg
    }
}
