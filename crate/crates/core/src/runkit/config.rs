//! Experiment configuration read from TOML sections `[model]`, `[graph]`,
//! `[loss]`, `[train]` and `[da]`.
//!
//! Every key except `train.seed` has a default. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelgraph::{Ablation, AdjacencyNorm};
use crate::losses::LossConfig;
use crate::metrics::Decision;
use crate::model::GeneratorKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeFeatureSource {
    /// Mean training feature vector of each label.
    Prototype,
    /// Glorot-initialized and trained with the classifier head.
    Learned,
    /// Read from `model.node_features_file` (CSV with a label-name header).
    File,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSchedule {
    Constant,
    DannRamp,
}

/// Where the adversarial weight is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaLocation {
    /// `l_c + λ l_d` with a unit gradient reversal.
    Objective,
    /// `l_c + l_d` with the reversal scaling by `λ`.
    Grl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub generator: GeneratorKind,
    /// Hidden widths of the MLP generator.
    pub generator_hidden: Vec<usize>,
    /// Feature width; for the identity generator it must equal the input width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_f: Option<usize>,
    pub layers: usize,
    /// Width between the two graph layers; defaults to `ceil(d_f / 2)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_width: Option<usize>,
    pub node_features: NodeFeatureSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_features_file: Option<PathBuf>,
    pub leaky_slope: f64,
    pub ablation: Ablation,
    pub detach_c: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            generator: GeneratorKind::Identity,
            generator_hidden: vec![64],
            d_f: None,
            layers: 1,
            hidden_width: None,
            node_features: NodeFeatureSource::Prototype,
            node_features_file: None,
            leaky_slope: 0.2,
            ablation: Ablation::ABC,
            detach_c: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub tau: f64,
    /// Unset: row normalization when `tau = 0`, symmetric otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjacency_norm: Option<AdjacencyNorm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::max_lr")]
    pub max_lr: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without validation-mAP improvement before stopping; 0 disables.
    #[serde(default = "defaults::patience")]
    pub patience: usize,
    #[serde(default = "defaults::threshold")]
    pub threshold: f64,
    /// When set, predictions are the top-k labels instead of thresholding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topk: Option<usize>,
}

mod defaults {
    pub fn epochs() -> usize {
        40
    }
    pub fn max_lr() -> f64 {
        1e-4
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn patience() -> usize {
        8
    }
    pub fn threshold() -> f64 {
        0.5
    }
}

impl TrainSection {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            epochs: defaults::epochs(),
            max_lr: defaults::max_lr(),
            batch_size: defaults::batch_size(),
            seed,
            patience: defaults::patience(),
            threshold: defaults::threshold(),
            topk: None,
        }
    }

    pub fn decision(&self) -> Decision {
        match self.topk {
            Some(k) => Decision::TopK(k),
            None => Decision::Threshold(self.threshold),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaSection {
    pub lambda_schedule: LambdaSchedule,
    pub grl_lambda_location: LambdaLocation,
    /// Hidden width of the domain classifier; defaults to `4 · d_f`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_hidden: Option<usize>,
}

impl Default for DaSection {
    fn default() -> Self {
        Self {
            lambda_schedule: LambdaSchedule::Constant,
            grl_lambda_location: LambdaLocation::Objective,
            domain_hidden: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub graph: GraphSection,
    #[serde(default)]
    pub loss: LossConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub da: DaSection,
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            model: ModelSection::default(),
            graph: GraphSection::default(),
            loss: LossConfig::default(),
            train: TrainSection::with_seed(seed),
            da: DaSection::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let has_seed = table
            .get("train")
            .and_then(|t| t.as_table())
            .is_some_and(|t| t.contains_key("seed"));
        if !has_seed {
            return Err(Error::Config("missing required key `train.seed`".into()));
        }
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The resolved configuration with every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let t = &self.train;
        if !(1..=2).contains(&m.layers) {
            return Err(Error::Config(format!("model.layers must be 1 or 2, got {}", m.layers)));
        }
        if m.d_f == Some(0) || m.hidden_width == Some(0) || m.generator_hidden.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if !(m.leaky_slope > 0.0 && m.leaky_slope.is_finite()) {
            return Err(Error::Config("model.leaky_slope must be positive".into()));
        }
        if (m.node_features == NodeFeatureSource::File) != m.node_features_file.is_some() {
            return Err(Error::Config(
                "model.node_features_file is required exactly when model.node_features = \"file\"".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.graph.tau) {
            return Err(Error::Config(format!("graph.tau must lie in [0, 1], got {}", self.graph.tau)));
        }
        self.loss.validate()?;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(t.max_lr > 0.0 && t.max_lr.is_finite()) {
            return Err(Error::Config("train.max_lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.threshold) {
            return Err(Error::Config("train.threshold must lie in [0, 1]".into()));
        }
        if t.topk == Some(0) {
            return Err(Error::Config("train.topk must be positive".into()));
        }
        if self.da.domain_hidden == Some(0) {
            return Err(Error::Config("da.domain_hidden must be positive".into()));
        }
        Ok(())
    }
}
