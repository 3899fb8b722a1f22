//! Multi-label datasets: in-memory type, synthetic generator, on-disk format.

mod io;
mod synth;

pub use io::{load_dataset, save_dataset, DatasetManifest, DATASET_FORMAT_VERSION};
pub use synth::{apply_shift, generate_split, generate_suite, generate_synthetic, Shift, Split, SynthSpec, SynthSuite};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMatrix;
use crate::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelDataset {
    pub ids: Vec<String>,
    pub features: Matrix,
    labels: Option<LabelMatrix>,
    labels_visible: bool,
    pub label_names: Vec<String>,
    pub domain: DomainTag,
}

impl MultiLabelDataset {
    pub fn new(
        ids: Vec<String>,
        features: Matrix,
        labels: Option<LabelMatrix>,
        label_names: Vec<String>,
        domain: DomainTag,
    ) -> Result<Self> {
        if ids.len() != features.rows() {
            return Err(Error::Contract(format!(
                "{} ids for {} feature rows",
                ids.len(),
                features.rows()
            )));
        }
        if let Some(l) = &labels {
            if l.rows() != features.rows() || l.cols() != label_names.len() {
                return Err(Error::Contract(format!(
                    "label matrix {}x{} does not match {} samples and {} label names",
                    l.rows(),
                    l.cols(),
                    features.rows(),
                    label_names.len()
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = label_names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::Contract(format!("duplicate label name `{dup}`")));
        }
        let labels_visible = labels.is_some();
        Ok(Self {
            ids,
            features,
            labels,
            labels_visible,
            label_names,
            domain,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn n_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Labels usable for training or evaluation; `None` when absent or hidden.
    pub fn labels(&self) -> Option<&LabelMatrix> {
        self.labels.as_ref().filter(|_| self.labels_visible)
    }

    /// Labels regardless of visibility.
    pub fn labels_internal(&self) -> Option<&LabelMatrix> {
        self.labels.as_ref()
    }

    pub fn labels_visible(&self) -> bool {
        self.labels_visible && self.labels.is_some()
    }

    pub fn require_labels(&self, what: &str) -> Result<&LabelMatrix> {
        self.labels()
            .ok_or_else(|| Error::Contract(format!("{what} dataset has no visible labels")))
    }

    pub fn hide_labels(mut self) -> Self {
        self.labels_visible = false;
        self
    }

    pub fn reveal_labels(mut self) -> Self {
        self.labels_visible = self.labels.is_some();
        self
    }

    pub fn with_domain(mut self, domain: DomainTag) -> Self {
        self.domain = domain;
        self
    }
}
