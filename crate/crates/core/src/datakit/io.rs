//! Dataset directory layout: `manifest.json` plus `data.jsonl`, one sample
//! per line as `{"id": .., "features": [..], "labels": [..]}`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DomainTag, MultiLabelDataset};
use crate::error::{Error, Result};
use crate::labels::LabelMatrix;
use crate::Matrix;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const DATA_FILE: &str = "data.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n_labels: usize,
    pub feature_dim: usize,
    pub n_samples: usize,
    pub label_names: Vec<String>,
    pub domain_tag: DomainTag,
    pub has_labels: bool,
    /// Positive count per label; empty when unlabeled.
    #[serde(default)]
    pub label_counts: Vec<usize>,
}

#[derive(Serialize)]
struct SampleOut<'a> {
    id: &'a str,
    features: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<&'a [u8]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleIn {
    id: String,
    features: Vec<f64>,
    #[serde(default)]
    labels: Option<Vec<u8>>,
}

/// Writes `ds` under `dir`; hidden labels are not written. Returns the manifest path.
pub fn save_dataset(ds: &MultiLabelDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels = ds.labels();
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        n_labels: ds.n_labels(),
        feature_dim: ds.feature_dim(),
        n_samples: ds.n_samples(),
        label_names: ds.label_names.clone(),
        domain_tag: ds.domain,
        has_labels: labels.is_some(),
        label_counts: labels
            .map(|l| (0..l.cols()).map(|j| l.count_label(j)).collect())
            .unwrap_or_default(),
    };

    let data_path = dir.join(DATA_FILE);
    let file = fs::File::create(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let mut w = BufWriter::new(file);
    for (s, id) in ds.ids.iter().enumerate() {
        let sample = SampleOut {
            id,
            features: ds.features.row(s),
            labels: labels.map(|l| l.row(s)),
        };
        serde_json::to_writer(&mut w, &sample)?;
        w.write_all(b"\n").map_err(|e| Error::io(&data_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&data_path, e))?;

    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Loads a dataset given its manifest path, or the directory containing it.
pub fn load_dataset(path: &Path) -> Result<MultiLabelDataset> {
    let manifest_path = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Contract(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    if manifest.label_names.len() != manifest.n_labels {
        return Err(Error::Contract(format!(
            "manifest lists {} label names for n_labels = {}",
            manifest.label_names.len(),
            manifest.n_labels
        )));
    }

    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let data_path = dir.join(DATA_FILE);
    let file = fs::File::open(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let (n, d) = (manifest.n_labels, manifest.feature_dim);
    let mut ids = Vec::with_capacity(manifest.n_samples);
    let mut feats = Vec::with_capacity(manifest.n_samples * d);
    let mut labels = Vec::with_capacity(if manifest.has_labels { manifest.n_samples * n } else { 0 });

    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line_no = k + 1;
        let err = |msg: String| Error::Parse {
            path: data_path.clone(),
            line: line_no,
            msg,
        };
        let line = line.map_err(|e| Error::io(&data_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: SampleIn = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if sample.features.len() != d {
            return Err(err(format!(
                "{} feature values, manifest declares {d}",
                sample.features.len()
            )));
        }
        if let Some(bad) = sample.features.iter().find(|v| !v.is_finite()) {
            return Err(err(format!("non-finite feature value {bad}")));
        }
        match (sample.labels, manifest.has_labels) {
            (Some(l), true) => {
                if l.len() != n {
                    return Err(err(format!("{} label entries, manifest declares {n}", l.len())));
                }
                if let Some(v) = l.iter().find(|&&v| v > 1) {
                    return Err(err(format!("label value {v} is not 0 or 1")));
                }
                labels.extend(l);
            }
            (None, true) => return Err(err("missing labels".into())),
            (Some(_), false) => return Err(err("labels present but manifest has has_labels = false".into())),
            (None, false) => {}
        }
        ids.push(sample.id);
        feats.extend(sample.features);
    }

    if ids.len() != manifest.n_samples {
        return Err(Error::Contract(format!(
            "{} holds {} samples, manifest declares {}",
            data_path.display(),
            ids.len(),
            manifest.n_samples
        )));
    }
    let features = Matrix::new(ids.len(), d, feats)?;
    let labels = if manifest.has_labels {
        Some(LabelMatrix::new(ids.len(), n, labels)?)
    } else {
        None
    };
    MultiLabelDataset::new(ids, features, labels, manifest.label_names, manifest.domain_tag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{generate_synthetic, SynthSpec};

    fn write_files(dir: &Path, manifest: &str, data: &str) -> PathBuf {
        let m = dir.join("manifest.json");
        fs::write(&m, manifest).unwrap();
        fs::write(dir.join(DATA_FILE), data).unwrap();
        m
    }

    const MANIFEST3: &str = r#"{"format_version":1,"n_labels":3,"feature_dim":2,"n_samples":2,
        "label_names":["a","b","c"],"domain_tag":"source","has_labels":true}"#;

    #[test]
    fn round_trip_is_exact() {
        let ds = generate_synthetic(&SynthSpec::correlated(64, 4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn extra_label_entry_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let data = "{\"id\":\"s0\",\"features\":[1.0,2.0],\"labels\":[1,0,1]}\n\
                    {\"id\":\"s1\",\"features\":[1.0,2.0],\"labels\":[1,0,1,0]}\n";
        let m = write_files(dir.path(), MANIFEST3, data);
        match load_dataset(&m) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("4 label entries"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let data = "{\"id\":\"s0\",\"features\":[1.0,2.0],\"labels\":[1,0,1]}\nnot json\n";
        let m = write_files(dir.path(), MANIFEST3, data);
        assert!(matches!(load_dataset(&m), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn unlabeled_file_loads_without_labels() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = MANIFEST3.replace("\"has_labels\":true", "\"has_labels\":false").replace("source", "target");
        let data = "{\"id\":\"t0\",\"features\":[0.5,-1.0]}\n{\"id\":\"t1\",\"features\":[0.25,3.0]}\n";
        let ds = load_dataset(&write_files(dir.path(), &manifest, data)).unwrap();
        assert!(ds.labels().is_none());
        assert_eq!(ds.domain, DomainTag::Target);
        assert_eq!(ds.features.row(1), &[0.25, 3.0]);
    }

    #[test]
    fn sample_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let data = "{\"id\":\"s0\",\"features\":[1.0,2.0],\"labels\":[1,0,1]}\n";
        let m = write_files(dir.path(), MANIFEST3, data);
        assert!(matches!(load_dataset(&m), Err(Error::Contract(_))));
    }
}
