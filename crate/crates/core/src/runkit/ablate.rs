//! Multi-seed comparison harnesses: adjacency ablation and adaptation gain.

use super::config::TrainConfig;
use super::train::{train_da, train_single};
use crate::datakit::MultiLabelDataset;
use crate::error::Result;
use crate::labelgraph::Ablation;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Ablation,
    /// Final validation mAP per seed.
    pub maps: Vec<f64>,
    pub mean_map: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl AblationTable {
    pub fn row(&self, variant: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// `variant,map,delta_prev,delta_a`, one row per variant.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,map,delta_prev,delta_a\n");
        let base = self.rows.first().map_or(0.0, |r| r.mean_map);
        let mut prev = base;
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.variant.label(),
                r.mean_map,
                r.mean_map - prev,
                r.mean_map - base
            ));
            prev = r.mean_map;
        }
        out
    }
}

/// Runs A, A+B and A+B+C with seeds `cfg.train.seed + k`, `k < n_seeds`.
pub fn ablate(
    cfg: &TrainConfig,
    train: &MultiLabelDataset,
    val: &MultiLabelDataset,
    n_seeds: usize,
) -> Result<AblationTable> {
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|k| cfg.train.seed + k).collect();
    let mut rows = Vec::new();
    for variant in Ablation::ALL {
        let mut maps = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let mut c = cfg.clone();
            c.model.ablation = variant;
            c.train.seed = seed;
            maps.push(train_single(&c, train, val)?.final_report.map);
        }
        rows.push(AblationRow {
            variant,
            mean_map: mean(&maps),
            maps,
        });
    }
    Ok(AblationTable { seeds, rows })
}

/// Target mAP of source-only training versus adversarial adaptation.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationComparison {
    pub seeds: Vec<u64>,
    pub source_only: Vec<f64>,
    pub adapted: Vec<f64>,
}

impl AdaptationComparison {
    pub fn mean_source_only(&self) -> f64 {
        mean(&self.source_only)
    }

    pub fn mean_adapted(&self) -> f64 {
        mean(&self.adapted)
    }

    pub fn gain(&self) -> f64 {
        self.mean_adapted() - self.mean_source_only()
    }
}

/// The source-only baseline trains with the same configuration and is
/// evaluated on `target_val`, so the two arms differ only in the domain branch.
/// Early stopping is off in both arms since it would consult target labels.
pub fn compare_adaptation(
    cfg: &TrainConfig,
    source: &MultiLabelDataset,
    target: &MultiLabelDataset,
    target_val: &MultiLabelDataset,
    n_seeds: usize,
) -> Result<AdaptationComparison> {
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|k| cfg.train.seed + k).collect();
    let mut cmp = AdaptationComparison {
        seeds: seeds.clone(),
        source_only: Vec::new(),
        adapted: Vec::new(),
    };
    for &seed in &seeds {
        let mut c = cfg.clone();
        c.train.seed = seed;
        c.train.patience = 0;
        cmp.source_only.push(train_single(&c, source, target_val)?.final_report.map);
        cmp.adapted.push(train_da(&c, source, target, target_val)?.final_report.map);
    }
    Ok(cmp)
}
