//! Run configuration: one JSON document, two shipped profiles, dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{EntityTaxonomy, GraphError, TaxonomyFile};
use crate::losses::{LossError, LossWeights};
use crate::metrics::MatchConfig;
use crate::pair_decoder::{CostWeights, DecoderConfig};
use crate::pointtemp::{PointTempConfig, PointTempError};
use crate::synth::{AugmentPolicy, VIEWS};
use crate::viewtemp::{BackboneConfig, ViewKernelSet, ViewTempConfig, ViewTempError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("override `{0}` must have the form key=value")]
    OverrideSyntax(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("unknown profile `{0}` (expected full, desk or overfit)")]
    UnknownProfile(String),
    #[error("invalid value for {key}: {message}")]
    Invalid { key: &'static str, message: String },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    PointTemp(#[from] PointTempError),
    #[error(transparent)]
    ViewTemp(#[from] ViewTempError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub train_split: String,
    pub eval_split: String,
    /// Optional taxonomy JSON; the built-in placeholder labels otherwise.
    pub taxonomy: Option<PathBuf>,
    /// Left-pad the first windows by repeating frame 0 so every frame gets a prediction.
    pub padded_windows: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            train_split: "train".into(),
            eval_split: "val".into(),
            taxonomy: None,
            padded_windows: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemporalConfig {
    pub l: usize,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self { l: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { width: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiConfig {
    pub output_size: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self { output_size: 7 }
    }
}

/// Which boxes feed RoI pooling and frustum selection for matched pairs during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxSource {
    Predicted,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnifyConfig {
    pub train_boxes: BoxSource,
    /// Heads of the classifier cross-attention.
    pub heads: usize,
}

impl Default for UnifyConfig {
    fn default() -> Self {
        Self {
            train_boxes: BoxSource::Predicted,
            heads: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingProvider {
    /// Knowledge transfer disabled: no alignment term, randomly initialised classifier.
    None,
    Pseudo,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    pub provider: EmbeddingProvider,
    pub path: Option<PathBuf>,
    /// Embedding width used by the pseudo provider and by `none`.
    pub dim: usize,
    pub pseudo_seed: u64,
    pub pseudo_correlation: f64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            provider: EmbeddingProvider::File,
            path: None,
            dim: 64,
            pseudo_seed: 7,
            pseudo_correlation: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub name: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: Option<f64>,
    pub schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: "adamw".into(),
            lr: 5e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
            schedule: LrSchedule::Constant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub augment: bool,
    pub augmentation: AugmentPolicy,
    /// Evaluate on the training split after every epoch and record the macro F1.
    pub eval_train: bool,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 4,
            max_steps: None,
            augment: true,
            augmentation: AugmentPolicy::default(),
            eval_train: false,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    #[serde(flatten)]
    pub matching: MatchConfig,
    /// Relation scores below this are left out of prediction dumps.
    pub dump_min_score: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            matching: MatchConfig::default(),
            dump_min_score: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub temporal: TemporalConfig,
    pub model: ModelConfig,
    pub backbone: BackboneConfig,
    pub viewtemp: ViewTempConfig,
    pub pointtemp: PointTempConfig,
    pub decoder: DecoderConfig,
    pub matcher: CostWeights,
    pub roi: RoiConfig,
    pub unify: UnifyConfig,
    pub text: TextConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl RunConfig {
    /// Full-size hyperparameters.
    pub fn full() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            temporal: TemporalConfig::default(),
            model: ModelConfig::default(),
            backbone: BackboneConfig::default(),
            viewtemp: ViewTempConfig::default(),
            pointtemp: PointTempConfig::default(),
            decoder: DecoderConfig::default(),
            matcher: CostWeights::default(),
            roi: RoiConfig::default(),
            unify: UnifyConfig::default(),
            text: TextConfig::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// CPU-sized profile for synthetic data.
    pub fn desk() -> Self {
        let mut c = Self::full();
        c.model.width = 128;
        c.backbone.hidden = 96;
        c.decoder.queries = 10;
        c.decoder.ffn_dim = 256;
        c.pointtemp.anchors = 32;
        c.pointtemp.hidden = 32;
        c.text.provider = EmbeddingProvider::Pseudo;
        c.text.pseudo_correlation = 0.5;
        c.train.epochs = 5;
        c.optimizer.lr = 5e-4;
        c.optimizer.max_grad_norm = Some(1.0);
        c.train.out_dir = PathBuf::from("runs/desk");
        c
    }

    /// Desk profile tuned to memorise one short clip.
    pub fn overfit() -> Self {
        let mut c = Self::desk();
        c.model.width = 64;
        c.backbone.hidden = 64;
        c.decoder.ffn_dim = 128;
        c.decoder.layers = 2;
        c.pointtemp.anchors = 16;
        c.train.augment = false;
        c.train.batch_size = 8;
        c.train.epochs = 100;
        c.train.max_steps = Some(300);
        c.optimizer.lr = 1e-3;
        c.optimizer.max_grad_norm = None;
        c.optimizer.weight_decay = 0.0;
        c.train.out_dir = PathBuf::from("runs/overfit");
        c
    }

    pub fn profile(name: &str) -> Result<Self, ConfigError> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            "overfit" => Ok(Self::overfit()),
            other => Err(ConfigError::UnknownProfile(other.into())),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialisation")
    }

    /// Applies `key.path=value` overrides; values parse as JSON, falling back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::OverrideSyntax(o.into()))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            set_path(&mut doc, key.trim(), value)?;
        }
        Ok(serde_json::from_value(doc)?)
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialisation");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn taxonomy(&self) -> Result<EntityTaxonomy, ConfigError> {
        match &self.dataset.taxonomy {
            None => Ok(EntityTaxonomy::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.clone(),
                    source,
                })?;
                let file: TaxonomyFile = serde_json::from_str(&text)?;
                Ok(file.into_taxonomy()?)
            }
        }
    }

    pub fn kernel_set(&self, view: &str) -> Result<ViewKernelSet, ConfigError> {
        let k = self.viewtemp.kernels.get(view).ok_or(ConfigError::Invalid {
            key: "viewtemp.kernels",
            message: format!("no kernel set for {view}"),
        })?;
        Ok(ViewKernelSet::new(view, k.clone())?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.loss.validate()?;
        self.pointtemp.validate()?;
        for v in VIEWS {
            self.kernel_set(v)?;
        }
        let invalid = |key, message: String| Err(ConfigError::Invalid { key, message });
        let d = self.model.width;
        if d == 0 || d % 4 != 0 {
            return invalid("model.width", format!("{d} is not a positive multiple of 4"));
        }
        for (key, heads) in [
            ("decoder.heads", self.decoder.heads),
            ("viewtemp.heads", self.viewtemp.heads),
            ("pointtemp.heads", self.pointtemp.heads),
        ] {
            if heads == 0 || d % heads != 0 {
                return invalid(key, format!("{heads} heads do not divide width {d}"));
            }
        }
        if self.unify.heads == 0 || self.text.dim % self.unify.heads != 0 {
            return invalid("unify.heads", format!("{} heads do not divide text.dim {}", self.unify.heads, self.text.dim));
        }
        if self.temporal.l == 0 {
            return invalid("temporal.l", "must be at least 1".into());
        }
        if self.decoder.queries == 0 || self.decoder.layers == 0 {
            return invalid("decoder", "queries and layers must be positive".into());
        }
        if self.roi.output_size == 0 {
            return invalid("roi.output_size", "must be positive".into());
        }
        if self.optimizer.name != "adamw" {
            return invalid("optimizer.name", format!("unsupported optimizer {}", self.optimizer.name));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return invalid("optimizer.lr", format!("{}", self.optimizer.lr));
        }
        if self.train.batch_size == 0 {
            return invalid("train.batch_size", "must be positive".into());
        }
        if self.text.provider == EmbeddingProvider::File && self.text.path.is_none() {
            return invalid("text.path", "the file provider needs an embedding file".into());
        }
        Ok(())
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(ConfigError::UnknownKey(key.into()));
            }
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
    }
    Err(ConfigError::UnknownKey(key.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::full();
        assert_eq!(c.temporal.l, 3);
        assert_eq!(c.loss.lambda_c, 1.0);
        assert_eq!(c.loss.lambda_t, 0.1);
        assert_eq!(c.optimizer.lr, 5e-5);
        assert_eq!(c.optimizer.weight_decay, 1e-4);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.train.epochs, 60);
        assert_eq!(c.viewtemp.kernels["view1"], vec![1, 3, 5, 7]);
        assert_eq!(c.viewtemp.kernels["view6"], vec![3, 5, 7, 9]);
        let d = RunConfig::desk();
        assert_eq!((d.model.width, d.decoder.queries, d.train.epochs), (128, 10, 5));
        d.validate().unwrap();
        RunConfig::overfit().validate().unwrap();
    }

    #[test]
    fn overrides_and_roundtrip() {
        let c = RunConfig::desk()
            .with_overrides(&["temporal.l=5", "viewtemp.kernels.view1=[3,3,3,3]", "dataset.root=/tmp/x", "eval.iou_thresh=0.7"])
            .unwrap();
        assert_eq!(c.temporal.l, 5);
        assert_eq!(c.viewtemp.kernels["view1"], vec![3, 3, 3, 3]);
        assert_eq!(c.dataset.root, PathBuf::from("/tmp/x"));
        assert_eq!(c.eval.matching.iou_thresh, 0.7);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_ne!(c.hash(), RunConfig::desk().hash());
        assert!(matches!(RunConfig::desk().with_overrides(&["temporal.k=1"]), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::desk().with_overrides(&["temporal"]), Err(ConfigError::OverrideSyntax(_))));
        let bad = RunConfig::desk().with_overrides(&["viewtemp.kernels.view1=[2,3]"]).unwrap();
        assert!(bad.validate().is_err());
    }
}
