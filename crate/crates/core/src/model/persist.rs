//! Model directory layout: `manifest.json` (format version, config digest,
//! structure, array shapes) and `arrays.txt`, one line per array:
//! `name v0 v1 ...` in row-major order using shortest round-trip decimals.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DomainClassifier, FeatureGenerator, GeneratorKind, ModelBundle};
use crate::error::{Error, Result};
use crate::labelgraph::{Ablation, AdaptiveLayerParams, LabelGraph, LayerOptions};
use crate::numgrad::DenseMatrix;
use crate::scalar::Scalar;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    /// Hex SHA-256 of `config`.
    pub config_digest: String,
    pub config: String,
    pub label_names: Vec<String>,
    pub generator_kind: GeneratorKind,
    pub generator_widths: Vec<usize>,
    pub leaky_slope: f64,
    pub ablation: Ablation,
    pub detach_c: bool,
    pub node_features_learned: bool,
    pub threshold: f64,
    pub n_layers: usize,
    pub domain_hidden: Option<usize>,
    pub arrays: Vec<ArraySpec>,
}

pub struct LoadedModel<T> {
    pub bundle: ModelBundle<T>,
    pub manifest: ModelManifest,
}

pub fn config_digest(config: &str) -> String {
    Sha256::digest(config.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn named_arrays<T: Scalar>(bundle: &ModelBundle<T>) -> Vec<(String, &DenseMatrix<T>)> {
    let mut out = vec![
        ("graph.cooccurrence".to_string(), &bundle.graph.cooccurrence),
        ("graph.fixed_adj".to_string(), &bundle.graph.fixed_adj),
    ];
    if !bundle.node_features_learned {
        out.push(("graph.node_features".to_string(), &bundle.graph.node_features));
    }
    out.extend(bundle.parameters().into_iter().map(|(n, _, m)| (n, m)));
    out
}

/// Writes the bundle under `dir` and returns the manifest path.
pub fn save_model<T: Scalar>(
    bundle: &ModelBundle<T>,
    label_names: &[String],
    config: &str,
    dir: &Path,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let arrays = named_arrays(bundle);
    let manifest = ModelManifest {
        format_version: MODEL_FORMAT_VERSION,
        config_digest: config_digest(config),
        config: config.to_string(),
        label_names: label_names.to_vec(),
        generator_kind: bundle.generator.kind,
        generator_widths: bundle.generator.layer_widths.clone(),
        leaky_slope: bundle.generator.leaky_slope.as_f64(),
        ablation: bundle.options.ablation,
        detach_c: bundle.options.detach_c,
        node_features_learned: bundle.node_features_learned,
        threshold: bundle.graph.threshold.as_f64(),
        n_layers: bundle.layers.len(),
        domain_hidden: bundle.domain_clf.as_ref().map(|d| d.hidden_width),
        arrays: arrays
            .iter()
            .map(|(n, m)| ArraySpec {
                name: n.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let arrays_path = dir.join("arrays.txt");
    let mut body = String::new();
    for (name, m) in &arrays {
        body.push_str(name);
        for v in m.data() {
            body.push(' ');
            body.push_str(&format!("{v:e}"));
        }
        body.push('\n');
    }
    fs::write(&arrays_path, body).map_err(|e| Error::io(&arrays_path, e))?;

    let manifest_path = dir.join("manifest.json");
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

pub fn load_model<T: Scalar>(dir: &Path) -> Result<LoadedModel<T>> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: ModelManifest = serde_json::from_str(&text)?;
    if manifest.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Contract(format!(
            "unsupported model format version {}",
            manifest.format_version
        )));
    }
    if config_digest(&manifest.config) != manifest.config_digest {
        return Err(Error::Contract("model config digest mismatch".into()));
    }

    let arrays_path = dir.join("arrays.txt");
    let body = fs::read_to_string(&arrays_path).map_err(|e| Error::io(&arrays_path, e))?;
    let mut arrays = std::collections::BTreeMap::new();
    for (k, line) in body.lines().enumerate() {
        let parse_err = |msg: String| Error::Parse {
            path: arrays_path.clone(),
            line: k + 1,
            msg,
        };
        let mut tokens = line.split_ascii_whitespace();
        let name = tokens.next().ok_or_else(|| parse_err("empty line".into()))?;
        let spec = manifest
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| parse_err(format!("array `{name}` not declared in manifest")))?;
        let values = tokens
            .map(|t| t.parse::<T>().map_err(|_| parse_err(format!("invalid number `{t}`"))))
            .collect::<Result<Vec<T>>>()?;
        let m = DenseMatrix::new(spec.rows, spec.cols, values).map_err(|e| parse_err(e.to_string()))?;
        arrays.insert(name.to_string(), m);
    }
    let mut take = |name: &str| {
        arrays
            .remove(name)
            .ok_or_else(|| Error::Contract(format!("model is missing array `{name}`")))
    };

    let slope = T::lit(manifest.leaky_slope);
    let generator = match manifest.generator_kind {
        GeneratorKind::Identity => FeatureGenerator::from_parts(
            GeneratorKind::Identity,
            manifest.generator_widths.clone(),
            vec![],
            vec![],
            slope,
        )?,
        GeneratorKind::Mlp => {
            let n = manifest.generator_widths.len() - 1;
            let mut weights = Vec::with_capacity(n);
            let mut biases = Vec::with_capacity(n);
            for k in 0..n {
                weights.push(take(&format!("gen.w{k}"))?);
                biases.push(take(&format!("gen.b{k}"))?);
            }
            FeatureGenerator::from_parts(GeneratorKind::Mlp, manifest.generator_widths.clone(), weights, biases, slope)?
        }
    };
    let node_features = take("graph.node_features")?;
    let cooccurrence = take("graph.cooccurrence")?;
    let fixed_adj = take("graph.fixed_adj")?;
    let graph = LabelGraph {
        n_labels: cooccurrence.rows(),
        node_features,
        cooccurrence,
        fixed_adj,
        threshold: T::lit(manifest.threshold),
    };
    let mut layers = Vec::new();
    for k in 0..manifest.n_layers {
        layers.push(AdaptiveLayerParams::new(
            take(&format!("gcn.w{k}"))?,
            take(&format!("gcn.a{k}"))?,
            slope,
        )?);
    }
    let domain_clf = match manifest.domain_hidden {
        Some(hidden_width) => Some(DomainClassifier {
            hidden_width,
            w1: take("dom.w1")?,
            b1: take("dom.b1")?,
            w2: take("dom.w2")?,
            b2: take("dom.b2")?,
            leaky_slope: slope,
        }),
        None => None,
    };
    let bundle = ModelBundle::new(
        generator,
        graph,
        manifest.node_features_learned,
        layers,
        domain_clf,
        LayerOptions {
            ablation: manifest.ablation,
            detach_c: manifest.detach_c,
        },
    )?;
    Ok(LoadedModel { bundle, manifest })
}
