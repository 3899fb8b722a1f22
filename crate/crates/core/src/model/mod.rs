//! Feature generator, graph classifier head and domain classifier.

mod persist;

pub use persist::{load_model, save_model, ArraySpec, LoadedModel, ModelManifest, MODEL_FORMAT_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelgraph::{gcn_subnet_forward, glorot, Ablation, AdaptiveLayerParams, BoundLayer, LabelGraph, LayerOptions};
use crate::numgrad::{DenseMatrix, NodeId, ParamId, Tape};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Identity,
    Mlp,
}

/// Maps input vectors to `d_f`-dimensional image features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGenerator<T> {
    pub kind: GeneratorKind,
    /// Input width followed by every layer's output width; ends in `d_f`.
    pub layer_widths: Vec<usize>,
    pub weights: Vec<DenseMatrix<T>>,
    /// One `1 × width` row per layer.
    pub biases: Vec<DenseMatrix<T>>,
    pub leaky_slope: T,
}

impl<T: Scalar> FeatureGenerator<T> {
    pub fn identity(width: usize) -> Self {
        Self {
            kind: GeneratorKind::Identity,
            layer_widths: vec![width, width],
            weights: vec![],
            biases: vec![],
            leaky_slope: T::lit(0.2),
        }
    }

    /// Affine + LeakyReLU per hidden layer, plain affine at the output.
    pub fn mlp(rng: &mut impl Rng, layer_widths: Vec<usize>, leaky_slope: T) -> Result<Self> {
        if layer_widths.len() < 2 || layer_widths.contains(&0) {
            return Err(Error::Config(format!(
                "mlp generator needs at least input and output widths, all positive; got {layer_widths:?}"
            )));
        }
        let weights = layer_widths
            .windows(2)
            .map(|w| glorot(rng, w[0], w[1]))
            .collect();
        let biases = layer_widths[1..].iter().map(|&w| DenseMatrix::zeros(1, w)).collect();
        Self::from_parts(GeneratorKind::Mlp, layer_widths, weights, biases, leaky_slope)
    }

    pub fn from_parts(
        kind: GeneratorKind,
        layer_widths: Vec<usize>,
        weights: Vec<DenseMatrix<T>>,
        biases: Vec<DenseMatrix<T>>,
        leaky_slope: T,
    ) -> Result<Self> {
        match kind {
            GeneratorKind::Identity => {
                if layer_widths.len() != 2 || layer_widths[0] != layer_widths[1] || !weights.is_empty() {
                    return Err(Error::Config(
                        "identity generator requires input width equal to d_f and no weights".into(),
                    ));
                }
            }
            GeneratorKind::Mlp => {
                if weights.len() + 1 != layer_widths.len() || biases.len() != weights.len() {
                    return Err(Error::Config("mlp generator layer count mismatch".into()));
                }
                for (k, (w, b)) in weights.iter().zip(&biases).enumerate() {
                    if w.shape() != (layer_widths[k], layer_widths[k + 1]) || b.shape() != (1, layer_widths[k + 1]) {
                        return Err(Error::shape("mlp_generator", w.shape(), b.shape()));
                    }
                }
            }
        }
        Ok(Self {
            kind,
            layer_widths,
            weights,
            biases,
            leaky_slope,
        })
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("non-empty widths")
    }
}

#[derive(Clone, Debug)]
pub struct BoundGenerator<T> {
    pub input_width: usize,
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    pub leaky_slope: T,
}

pub fn generate_features<T: Scalar>(tape: &mut Tape<T>, gen: &BoundGenerator<T>, batch: NodeId) -> Result<NodeId> {
    if tape.shape(batch).1 != gen.input_width {
        return Err(Error::shape(
            "generate_features",
            tape.shape(batch),
            (tape.shape(batch).0, gen.input_width),
        ));
    }
    let mut x = batch;
    let last = gen.weights.len().saturating_sub(1);
    for (k, (&w, &b)) in gen.weights.iter().zip(&gen.biases).enumerate() {
        let z = tape.matmul(x, w)?;
        x = tape.add_row_broadcast(z, b)?;
        if k < last {
            x = tape.leaky_relu(x, gen.leaky_slope)?;
        }
    }
    Ok(x)
}

/// One hidden layer, sigmoid output: the probability that features come
/// from the target domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainClassifier<T> {
    pub hidden_width: usize,
    pub w1: DenseMatrix<T>,
    pub b1: DenseMatrix<T>,
    pub w2: DenseMatrix<T>,
    pub b2: DenseMatrix<T>,
    pub leaky_slope: T,
}

impl<T: Scalar> DomainClassifier<T> {
    pub fn init(rng: &mut impl Rng, d_f: usize, hidden_width: usize, leaky_slope: T) -> Result<Self> {
        if hidden_width == 0 || d_f == 0 {
            return Err(Error::Config("domain classifier widths must be positive".into()));
        }
        Ok(Self {
            hidden_width,
            w1: glorot(rng, d_f, hidden_width),
            b1: DenseMatrix::zeros(1, hidden_width),
            w2: glorot(rng, hidden_width, 1),
            b2: DenseMatrix::zeros(1, 1),
            leaky_slope,
        })
    }

    pub fn input_width(&self) -> usize {
        self.w1.rows()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDomain<T> {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub leaky_slope: T,
}

/// Gradient reversal layer.
pub fn grl<T: Scalar>(tape: &mut Tape<T>, x: NodeId, lambda: T) -> Result<NodeId> {
    tape.grl(x, lambda)
}

/// `d̂ = sigmoid(w2ᵀ σ(w1ᵀ grl(x) + b1) + b2)`, an `n × 1` column.
pub fn classify_domain<T: Scalar>(
    tape: &mut Tape<T>,
    clf: &BoundDomain<T>,
    feats: NodeId,
    lambda: T,
) -> Result<NodeId> {
    if tape.shape(feats).1 != tape.shape(clf.w1).0 {
        return Err(Error::shape("classify_domain", tape.shape(feats), tape.shape(clf.w1)));
    }
    let r = grl(tape, feats, lambda)?;
    let z1 = tape.matmul(r, clf.w1)?;
    let z1 = tape.add_row_broadcast(z1, clf.b1)?;
    let h = tape.leaky_relu(z1, clf.leaky_slope)?;
    let z2 = tape.matmul(h, clf.w2)?;
    let z2 = tape.add_row_broadcast(z2, clf.b2)?;
    tape.sigmoid(z2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Generator,
    Classifier,
    Domain,
}

/// All three networks plus the label graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub generator: FeatureGenerator<T>,
    pub graph: LabelGraph<T>,
    /// When true the node features are a learnable part of the classifier head.
    pub node_features_learned: bool,
    pub layers: Vec<AdaptiveLayerParams<T>>,
    pub domain_clf: Option<DomainClassifier<T>>,
    pub d_f: usize,
    pub options: LayerOptions,
}

/// A bundle's parameters registered on one tape.
#[derive(Clone, Debug)]
pub struct BoundModel<T> {
    pub generator: BoundGenerator<T>,
    pub node_features: NodeId,
    pub fixed_adj: NodeId,
    pub layers: Vec<BoundLayer<T>>,
    pub domain: Option<BoundDomain<T>>,
}

#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    pub features: NodeId,
    pub classifiers: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(
        generator: FeatureGenerator<T>,
        graph: LabelGraph<T>,
        node_features_learned: bool,
        layers: Vec<AdaptiveLayerParams<T>>,
        domain_clf: Option<DomainClassifier<T>>,
        options: LayerOptions,
    ) -> Result<Self> {
        let d_f = generator.output_width();
        if layers.is_empty() || layers.len() > 2 {
            return Err(Error::Config(format!("1 or 2 graph layers required, got {}", layers.len())));
        }
        let mut width = graph.node_features.cols();
        for l in &layers {
            if l.d_in() != width {
                return Err(Error::Config(format!(
                    "graph layer expects input width {}, previous width is {width}",
                    l.d_in()
                )));
            }
            width = l.d_out();
        }
        if width != d_f {
            return Err(Error::Config(format!(
                "final graph layer width {width} does not match feature width {d_f}"
            )));
        }
        if let Some(clf) = &domain_clf {
            if clf.input_width() != d_f {
                return Err(Error::Config("domain classifier input width must equal d_f".into()));
            }
        }
        Ok(Self {
            generator,
            graph,
            node_features_learned,
            layers,
            domain_clf,
            d_f,
            options,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.graph.n_labels
    }

    /// Named learnable tensors in a fixed order; the index is the [`ParamId`].
    pub fn parameters(&self) -> Vec<(String, ParamGroup, &DenseMatrix<T>)> {
        let mut out = Vec::new();
        for (k, (w, b)) in self.generator.weights.iter().zip(&self.generator.biases).enumerate() {
            out.push((format!("gen.w{k}"), ParamGroup::Generator, w));
            out.push((format!("gen.b{k}"), ParamGroup::Generator, b));
        }
        if self.node_features_learned {
            out.push(("graph.node_features".into(), ParamGroup::Classifier, &self.graph.node_features));
        }
        for (k, l) in self.layers.iter().enumerate() {
            out.push((format!("gcn.w{k}"), ParamGroup::Classifier, &l.weight));
            out.push((format!("gcn.a{k}"), ParamGroup::Classifier, &l.attn_vec));
        }
        if let Some(d) = &self.domain_clf {
            out.push(("dom.w1".into(), ParamGroup::Domain, &d.w1));
            out.push(("dom.b1".into(), ParamGroup::Domain, &d.b1));
            out.push(("dom.w2".into(), ParamGroup::Domain, &d.w2));
            out.push(("dom.b2".into(), ParamGroup::Domain, &d.b2));
        }
        out
    }

    /// Same order as [`ModelBundle::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut DenseMatrix<T>> {
        let mut out: Vec<&mut DenseMatrix<T>> = Vec::new();
        let gen = &mut self.generator;
        for (w, b) in gen.weights.iter_mut().zip(gen.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        if self.node_features_learned {
            out.push(&mut self.graph.node_features);
        }
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.attn_vec);
        }
        if let Some(d) = &mut self.domain_clf {
            out.push(&mut d.w1);
            out.push(&mut d.b1);
            out.push(&mut d.w2);
            out.push(&mut d.b2);
        }
        out
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        self.parameters().into_iter().map(|(_, g, _)| g).collect()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundModel<T>> {
        let mut next = 0usize;
        let mut id = || {
            next += 1;
            ParamId(next - 1)
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (w, b) in self.generator.weights.iter().zip(&self.generator.biases) {
            weights.push(tape.param(id(), w.clone())?);
            biases.push(tape.param(id(), b.clone())?);
        }
        let generator = BoundGenerator {
            input_width: self.generator.input_width(),
            weights,
            biases,
            leaky_slope: self.generator.leaky_slope,
        };
        let node_features = if self.node_features_learned {
            tape.param(id(), self.graph.node_features.clone())?
        } else {
            tape.constant(self.graph.node_features.clone())?
        };
        let fixed_adj = tape.constant(self.graph.fixed_adj.clone())?;
        let mut layers = Vec::new();
        for l in &self.layers {
            let (w, a) = (id(), id());
            layers.push(l.bind(tape, w, a)?);
        }
        let domain = match &self.domain_clf {
            Some(d) => Some(BoundDomain {
                w1: tape.param(id(), d.w1.clone())?,
                b1: tape.param(id(), d.b1.clone())?,
                w2: tape.param(id(), d.w2.clone())?,
                b2: tape.param(id(), d.b2.clone())?,
                leaky_slope: d.leaky_slope,
            }),
            None => None,
        };
        Ok(BoundModel {
            generator,
            node_features,
            fixed_adj,
            layers,
            domain,
        })
    }

    /// Evaluation-only forward pass returning `n × N` probabilities.
    pub fn predict_probs(&self, batch: &DenseMatrix<T>, ablation: Ablation) -> Result<DenseMatrix<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let input = tape.constant(batch.clone())?;
        let pred = predict(&mut tape, self, &bound, input, ablation)?;
        Ok(tape.value(pred.probs).clone())
    }

    /// Generator output for a batch, without building the classifier head.
    pub fn features(&self, batch: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let input = tape.constant(batch.clone())?;
        let x = generate_features(&mut tape, &bound.generator, input)?;
        Ok(tape.value(x).clone())
    }
}

/// `sigmoid(X · (F^L)ᵀ)` where `X` is the generator output and `F^L` the
/// graph subnet's classifier matrix.
pub fn predict<T: Scalar>(
    tape: &mut Tape<T>,
    bundle: &ModelBundle<T>,
    bound: &BoundModel<T>,
    batch: NodeId,
    ablation: Ablation,
) -> Result<Prediction> {
    let features = generate_features(tape, &bound.generator, batch)?;
    let opts = LayerOptions {
        ablation,
        ..bundle.options
    };
    let classifiers = gcn_subnet_forward(tape, bound.node_features, bound.fixed_adj, &bound.layers, opts, bundle.d_f)?;
    let ct = tape.transpose(classifiers)?;
    let logits = tape.matmul(features, ct)?;
    let probs = tape.sigmoid(logits)?;
    Ok(Prediction {
        features,
        classifiers,
        logits,
        probs,
    })
}
