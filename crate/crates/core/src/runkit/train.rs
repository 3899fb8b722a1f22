//! Single-domain and domain-adversarial training loops.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{LambdaLocation, LambdaSchedule, NodeFeatureSource, TrainConfig};
use super::optim::{adam_step, cosine_lr, dann_ramp, AdamState};
use super::rng_stream;
use crate::datakit::MultiLabelDataset;
use crate::error::{Error, Result};
use crate::labelgraph::{
    gcn_subnet_forward, glorot, label_prototypes, read_matrix_csv, AdaptiveLayerParams, LabelGraph, LayerOptions,
};
use crate::labels::LabelMatrix;
use crate::losses::{asl_loss_saturating, domain_loss_paper_form, domain_loss_saturating, total_objective};
use crate::metrics::{evaluate, EvalFrame, MetricsReport, METRIC_KEYS};
use crate::model::{
    classify_domain, generate_features, save_model, BoundModel, DomainClassifier, FeatureGenerator, GeneratorKind,
    ModelBundle,
};
use crate::numgrad::{NodeId, ParamId, Tape};
use crate::{Matrix, Model};

const INIT_STREAM: u64 = 10;
const SHUFFLE_STREAM: u64 = 11;
const TARGET_SHUFFLE_STREAM: u64 = 12;

/// Emitted after every optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Objective value before the update.
    pub loss: f64,
    /// Adversarial weight in effect (0 for single-domain runs).
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub split: String,
    pub report: MetricsReport,
    /// Classification loss on the evaluation split.
    pub loss: f64,
    /// Learning rate of the last step taken (the peak rate for epoch 0).
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DomainRow {
    pub epoch: usize,
    pub domain_acc: f64,
    pub domain_loss: f64,
    pub domain_loss_paper: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub rows: Vec<EpochRow>,
    pub domain_rows: Vec<DomainRow>,
    pub final_report: MetricsReport,
    pub model: Model,
    pub config_echo: String,
    pub label_names: Vec<String>,
    /// Epoch after which early stopping ended the run.
    pub stopped_at: Option<usize>,
}

impl RunArtifacts {
    pub fn metrics_csv(&self) -> String {
        let mut out = format!("epoch,split,{},loss,lr\n", METRIC_KEYS.join(","));
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                r.split,
                r.report.to_csv_line(),
                r.loss,
                r.lr
            ));
        }
        out
    }

    pub fn domain_csv(&self) -> String {
        let mut out = String::from("epoch,domain_acc,domain_loss,domain_loss_paper\n");
        for r in &self.domain_rows {
            let paper = r.domain_loss_paper.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.domain_acc, r.domain_loss, paper));
        }
        out
    }

    /// Writes `metrics.csv`, `report.json`, `config.toml`, `model/` and, for
    /// adversarial runs, `domain.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        put("metrics.csv", self.metrics_csv())?;
        if !self.domain_rows.is_empty() {
            put("domain.csv", self.domain_csv())?;
        }
        put("report.json", self.final_report.to_json()? + "\n")?;
        put("config.toml", self.config_echo.clone())?;
        save_model(&self.model, &self.label_names, &self.config_echo, &dir.join("model"))?;
        Ok(())
    }
}

/// Callback invoked with the updated model after every step.
pub type Observer<'a> = dyn FnMut(&StepRecord, &Model) + 'a;

/// Initializes a model for `train` from `cfg`. Parameters are drawn in the
/// order generator, node features, graph layers, domain classifier, so the
/// first three match between single-domain and adversarial runs.
pub fn build_model(cfg: &TrainConfig, train: &MultiLabelDataset, with_domain: bool) -> Result<Model> {
    let labels = train.require_labels("training")?;
    let m = &cfg.model;
    let slope = m.leaky_slope;
    let d_in = train.feature_dim();
    let mut rng = rng_stream(cfg.train.seed, INIT_STREAM);

    let generator = match m.generator {
        GeneratorKind::Identity => {
            if let Some(d_f) = m.d_f.filter(|&d| d != d_in) {
                return Err(Error::Config(format!(
                    "identity generator keeps the input width {d_in}, but model.d_f = {d_f}"
                )));
            }
            FeatureGenerator::identity(d_in)
        }
        GeneratorKind::Mlp => {
            let mut widths = vec![d_in];
            widths.extend(&m.generator_hidden);
            widths.push(m.d_f.unwrap_or(32));
            FeatureGenerator::mlp(&mut rng, widths, slope)?
        }
    };
    let d_f = generator.output_width();

    let (node_features, learned) = match m.node_features {
        NodeFeatureSource::Prototype => (label_prototypes(&train.features, labels)?, false),
        NodeFeatureSource::Learned => (glorot(&mut rng, train.n_labels(), d_in), true),
        NodeFeatureSource::File => {
            let path = m.node_features_file.as_ref().expect("validated with the config");
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            let (names, feats) = read_matrix_csv::<f64, _>(file)?;
            if names != train.label_names {
                return Err(Error::Contract(format!(
                    "node feature file {} lists labels that differ from the dataset",
                    path.display()
                )));
            }
            (feats, false)
        }
    };
    let d0 = node_features.cols();
    let graph = LabelGraph::build(labels, node_features, cfg.graph.tau, cfg.graph.adjacency_norm)?;

    let widths = if m.layers == 1 {
        vec![d0, d_f]
    } else {
        vec![d0, m.hidden_width.unwrap_or(d_f.div_ceil(2)), d_f]
    };
    let layers = widths
        .windows(2)
        .map(|w| AdaptiveLayerParams::init(&mut rng, w[0], w[1], slope))
        .collect::<Result<Vec<_>>>()?;

    let domain_clf = if with_domain {
        let hidden = cfg.da.domain_hidden.unwrap_or(4 * d_f);
        Some(DomainClassifier::init(&mut rng, d_f, hidden, slope)?)
    } else {
        None
    };
    let options = LayerOptions {
        ablation: m.ablation,
        detach_c: m.detach_c,
    };
    ModelBundle::new(generator, graph, learned, layers, domain_clf, options)
}

/// `sigmoid(X · (F^L)ᵀ)` for generator output `features`.
fn classifier_head(tape: &mut Tape<f64>, model: &Model, bound: &BoundModel<f64>, features: NodeId) -> Result<NodeId> {
    let c = gcn_subnet_forward(
        tape,
        bound.node_features,
        bound.fixed_adj,
        &bound.layers,
        model.options,
        model.d_f,
    )?;
    let ct = tape.transpose(c)?;
    let logits = tape.matmul(features, ct)?;
    tape.sigmoid(logits)
}

fn collect_grads(tape: &mut Tape<f64>, model: &Model, root: NodeId) -> Result<Vec<Matrix>> {
    let grads = tape.backward(root)?;
    model
        .parameters()
        .iter()
        .enumerate()
        .map(|(k, (name, _, _))| {
            grads
                .get(ParamId(k))
                .cloned()
                .ok_or_else(|| Error::State(format!("no gradient for parameter `{name}`")))
        })
        .collect()
}

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("loss {loss} at epoch {epoch}, step {step}")))
    }
}

/// Loss and parameter gradients for one labeled batch.
pub fn classification_step(model: &Model, cfg: &TrainConfig, x: &Matrix, y: &LabelMatrix) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let input = tape.constant(x.clone())?;
    let feats = generate_features(&mut tape, &bound.generator, input)?;
    let probs = classifier_head(&mut tape, model, &bound, feats)?;
    let loss = asl_loss_saturating(&mut tape, probs, y, &cfg.loss)?;
    let value = tape.scalar_value(loss);
    Ok((value, collect_grads(&mut tape, model, loss)?))
}

/// Objective and gradients for one source batch paired with one target
/// batch. The generator runs once on the stacked rows; the classification
/// loss uses the source rows and the domain loss uses all rows.
pub fn adversarial_step(
    model: &Model,
    cfg: &TrainConfig,
    xs: &Matrix,
    ys: &LabelMatrix,
    xt: &Matrix,
    lambda: f64,
) -> Result<(f64, Vec<Matrix>)> {
    let (objective_weight, grl_factor) = match cfg.da.grl_lambda_location {
        LambdaLocation::Objective => (lambda, 1.0),
        LambdaLocation::Grl => (1.0, lambda),
    };
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let dom = bound
        .domain
        .ok_or_else(|| Error::Contract("adversarial training needs a domain classifier".into()))?;
    let ns = xs.rows();
    let input = tape.constant(xs.vstack(xt)?)?;
    let feats = generate_features(&mut tape, &bound.generator, input)?;
    let src = tape.slice_rows(feats, 0, ns)?;
    let probs = classifier_head(&mut tape, model, &bound, src)?;
    let l_c = asl_loss_saturating(&mut tape, probs, ys, &cfg.loss)?;
    let d_hat = classify_domain(&mut tape, &dom, feats, grl_factor)?;
    let domains: Vec<u8> = (0..ns + xt.rows()).map(|i| u8::from(i >= ns)).collect();
    let l_d = domain_loss_saturating(&mut tape, d_hat, &domains)?;
    let total = total_objective(&mut tape, l_c, l_d, objective_weight)?;
    let value = tape.scalar_value(total);
    Ok((value, collect_grads(&mut tape, model, total)?))
}

fn evaluate_split(model: &Model, cfg: &TrainConfig, ds: &MultiLabelDataset) -> Result<(MetricsReport, f64)> {
    let labels = ds.require_labels("evaluation")?;
    let probs = model.predict_probs(&ds.features, cfg.model.ablation)?;
    let report = evaluate(&EvalFrame::new(&probs, labels, cfg.train.decision())?)?;
    let mut tape = Tape::new();
    let p = tape.constant(probs)?;
    let loss = asl_loss_saturating(&mut tape, p, labels, &cfg.loss)?;
    Ok((report, tape.scalar_value(loss)))
}

/// Domain accuracy, mean BCE and the expectation form over all source and target rows.
fn domain_stats(model: &Model, source: &Matrix, target: &Matrix, epoch: usize) -> Result<DomainRow> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let dom = bound
        .domain
        .ok_or_else(|| Error::Contract("model has no domain classifier".into()))?;
    let input = tape.constant(source.vstack(target)?)?;
    let feats = generate_features(&mut tape, &bound.generator, input)?;
    let d_hat = classify_domain(&mut tape, &dom, feats, 1.0)?;
    let domains: Vec<u8> = (0..source.rows() + target.rows())
        .map(|i| u8::from(i >= source.rows()))
        .collect();
    let loss = domain_loss_saturating(&mut tape, d_hat, &domains)?;
    let preds = tape.value(d_hat).data().to_vec();
    let correct = preds
        .iter()
        .zip(&domains)
        .filter(|(&p, &d)| u8::from(p > 0.5) == d)
        .count();
    Ok(DomainRow {
        epoch,
        domain_acc: correct as f64 / domains.len() as f64,
        domain_loss: tape.scalar_value(loss),
        domain_loss_paper: domain_loss_paper_form(&preds, &domains),
    })
}

fn check_compatible(a: &MultiLabelDataset, b: &MultiLabelDataset, what: &str) -> Result<()> {
    if a.feature_dim() != b.feature_dim() {
        return Err(Error::Contract(format!(
            "{what} has feature width {}, training data has {}",
            b.feature_dim(),
            a.feature_dim()
        )));
    }
    if a.label_names != b.label_names {
        return Err(Error::Contract(format!("{what} label names differ from the training data")));
    }
    Ok(())
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Endless shuffled index stream over the target rows.
struct TargetCycle {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl TargetCycle {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = rng_stream(seed, TARGET_SHUFFLE_STREAM);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn run(
    cfg: &TrainConfig,
    train: &MultiLabelDataset,
    eval_set: &MultiLabelDataset,
    target: Option<&MultiLabelDataset>,
    observer: &mut Observer<'_>,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let labels = train.require_labels("training")?;
    check_compatible(train, eval_set, "evaluation data")?;
    eval_set.require_labels("evaluation")?;
    let split = if target.is_some() { "target_val" } else { "val" };
    if let Some(t) = target {
        check_compatible(train, t, "target data")?;
        if t.labels_visible() {
            return Err(Error::Contract(
                "target training data must not expose labels during adaptation".into(),
            ));
        }
    }

    let mut model = build_model(cfg, train, target.is_some())?;
    let mut adam = AdamState::for_params(&model.parameters().iter().map(|p| p.2).collect::<Vec<_>>());
    let mut shuffle_rng = rng_stream(cfg.train.seed, SHUFFLE_STREAM);
    let mut cycle = target.map(|t| TargetCycle::new(t.n_samples(), cfg.train.seed));

    let tc = &cfg.train;
    let per_epoch = train.n_samples().div_ceil(tc.batch_size);
    let total_steps = tc.epochs * per_epoch;
    let mut rows = Vec::new();
    let mut domain_rows = Vec::new();

    let (report, loss) = evaluate_split(&model, cfg, eval_set)?;
    let mut best = report.map;
    rows.push(EpochRow {
        epoch: 0,
        split: split.into(),
        report,
        loss,
        lr: tc.max_lr,
    });
    if let Some(t) = target {
        domain_rows.push(domain_stats(&model, &train.features, &t.features, 0)?);
    }

    let mut step = 0usize;
    let mut lr = tc.max_lr;
    let mut since_best = 0usize;
    let mut stopped_at = None;
    for epoch in 1..=tc.epochs {
        for idx in batches(train.n_samples(), tc.batch_size, &mut shuffle_rng) {
            lr = cosine_lr(step, total_steps, tc.max_lr)?;
            let xs = train.features.select_rows(&idx);
            let ys = labels.select_rows(&idx);
            let (loss, grads, lambda) = match (target, cycle.as_mut()) {
                (Some(t), Some(cycle)) => {
                    let xt = t.features.select_rows(&cycle.take(idx.len()));
                    let lambda = cfg.loss.lambda_d
                        * match cfg.da.lambda_schedule {
                            LambdaSchedule::Constant => 1.0,
                            LambdaSchedule::DannRamp => dann_ramp(step as f64 / total_steps as f64),
                        };
                    let (l, g) = adversarial_step(&model, cfg, &xs, &ys, &xt, lambda)?;
                    (l, g, lambda)
                }
                _ => {
                    let (l, g) = classification_step(&model, cfg, &xs, &ys)?;
                    (l, g, 0.0)
                }
            };
            check_finite(loss, epoch, step)?;
            adam_step(&mut model.parameters_mut(), &grads, &mut adam, lr)?;
            observer(
                &StepRecord {
                    epoch,
                    step,
                    lr,
                    loss,
                    lambda,
                },
                &model,
            );
            step += 1;
        }

        let (report, loss) = evaluate_split(&model, cfg, eval_set)?;
        check_finite(loss, epoch, step)?;
        let improved = report.map > best;
        if improved {
            best = report.map;
        }
        rows.push(EpochRow {
            epoch,
            split: split.into(),
            report,
            loss,
            lr,
        });
        if let Some(t) = target {
            domain_rows.push(domain_stats(&model, &train.features, &t.features, epoch)?);
        }
        // Early stopping on validation mAP is single-domain only: in adaptation
        // the evaluation split carries target labels that training must not use.
        since_best = if improved { 0 } else { since_best + 1 };
        if target.is_none() && tc.patience > 0 && since_best >= tc.patience && epoch < tc.epochs {
            stopped_at = Some(epoch);
            break;
        }
    }

    let final_report = rows.last().expect("epoch 0 row").report.clone();
    Ok(RunArtifacts {
        rows,
        domain_rows,
        final_report,
        model,
        config_echo: cfg.to_toml(),
        label_names: train.label_names.clone(),
        stopped_at,
    })
}

/// Trains on labeled `train`, evaluating on `val` after every epoch.
pub fn train_single(cfg: &TrainConfig, train: &MultiLabelDataset, val: &MultiLabelDataset) -> Result<RunArtifacts> {
    run(cfg, train, val, None, &mut |_, _| {})
}

pub fn train_single_observed(
    cfg: &TrainConfig,
    train: &MultiLabelDataset,
    val: &MultiLabelDataset,
    observer: &mut Observer<'_>,
) -> Result<RunArtifacts> {
    run(cfg, train, val, None, observer)
}

/// Adversarial adaptation from labeled `source` to unlabeled `target`,
/// evaluating on the labeled `target_val` after every epoch.
pub fn train_da(
    cfg: &TrainConfig,
    source: &MultiLabelDataset,
    target: &MultiLabelDataset,
    target_val: &MultiLabelDataset,
) -> Result<RunArtifacts> {
    run(cfg, source, target_val, Some(target), &mut |_, _| {})
}

pub fn train_da_observed(
    cfg: &TrainConfig,
    source: &MultiLabelDataset,
    target: &MultiLabelDataset,
    target_val: &MultiLabelDataset,
    observer: &mut Observer<'_>,
) -> Result<RunArtifacts> {
    run(cfg, source, target_val, Some(target), observer)
}

/// Metrics of a trained model on a labeled dataset.
pub fn evaluate_model(model: &Model, ds: &MultiLabelDataset, decision: crate::metrics::Decision) -> Result<MetricsReport> {
    if ds.feature_dim() != model.generator.input_width() {
        return Err(Error::Contract(format!(
            "dataset feature width {} does not match model input width {}",
            ds.feature_dim(),
            model.generator.input_width()
        )));
    }
    let labels = ds.require_labels("evaluation")?;
    if labels.cols() != model.n_labels() {
        return Err(Error::Contract(format!(
            "dataset has {} labels, model has {}",
            labels.cols(),
            model.n_labels()
        )));
    }
    let probs = model.predict_probs(&ds.features, model.options.ablation)?;
    evaluate(&EvalFrame::new(&probs, labels, decision)?)
}
