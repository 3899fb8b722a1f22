//! Label graph: fixed co-occurrence adjacency plus the learned attention and
//! similarity adjacencies of the adaptive graph convolution.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMatrix;
use crate::numgrad::{DenseMatrix, NodeId, ParamId, Tape};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjacencyNorm {
    /// Each nonzero row divided by its sum.
    Row,
    /// `D^-1/2 (A + I) D^-1/2`.
    Sym,
}

/// Which adjacency terms participate in each layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    A,
    AB,
    ABC,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::A, Ablation::AB, Ablation::ABC];

    pub fn uses_attention(self) -> bool {
        matches!(self, Ablation::AB | Ablation::ABC)
    }

    pub fn uses_similarity(self) -> bool {
        matches!(self, Ablation::ABC)
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::A => "A",
            Ablation::AB => "A+B",
            Ablation::ABC => "A+B+C",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('+', "").as_str() {
            "A" => Ok(Ablation::A),
            "AB" => Ok(Ablation::AB),
            "ABC" => Ok(Ablation::ABC),
            _ => Err(Error::Config(format!("unknown ablation `{s}`"))),
        }
    }
}

/// Conditional co-occurrence `p_ij = P(label j | label i)` estimated from
/// a binary label matrix. Rows of labels that never occur are zero.
pub fn co_occurrence_matrix<T: Scalar>(labels: &LabelMatrix) -> Result<DenseMatrix<T>> {
    if labels.rows() == 0 {
        return Err(Error::Contract("co-occurrence of an empty dataset".into()));
    }
    let n = labels.cols();
    let mut counts = vec![0usize; n * n];
    for r in 0..labels.rows() {
        let row = labels.row(r);
        for i in (0..n).filter(|&i| row[i] == 1) {
            for j in (0..n).filter(|&j| row[j] == 1) {
                counts[i * n + j] += 1;
            }
        }
    }
    Ok(DenseMatrix::from_fn(n, n, |i, j| {
        let occ = counts[i * n + i];
        if occ == 0 {
            T::zero()
        } else {
            T::lit(counts[i * n + j] as f64) / T::lit(occ as f64)
        }
    }))
}

/// Binary adjacency keeping entries with `p_ij >= tau`.
pub fn threshold_adjacency<T: Scalar>(p: &DenseMatrix<T>, tau: T) -> Result<DenseMatrix<T>> {
    if !(tau >= T::zero() && tau <= T::one()) {
        return Err(Error::Config(format!("threshold tau must lie in [0, 1], got {tau}")));
    }
    if p.data().iter().any(|&v| v < T::zero() || v > T::one()) {
        return Err(Error::Contract("co-occurrence entries must lie in [0, 1]".into()));
    }
    Ok(p.map(|v| if v >= tau { T::one() } else { T::zero() }))
}

pub fn normalize_adjacency<T: Scalar>(a: &DenseMatrix<T>, scheme: AdjacencyNorm) -> Result<DenseMatrix<T>> {
    if a.rows() != a.cols() {
        return Err(Error::shape("normalize_adjacency", a.shape(), a.shape()));
    }
    if a.data().iter().any(|&v| v < T::zero()) {
        return Err(Error::Contract("adjacency must be nonnegative".into()));
    }
    let n = a.rows();
    Ok(match scheme {
        AdjacencyNorm::Row => {
            let sums: Vec<T> = (0..n).map(|i| a.row(i).iter().copied().sum()).collect();
            DenseMatrix::from_fn(n, n, |i, j| {
                if sums[i] > T::zero() {
                    a.get(i, j) / sums[i]
                } else {
                    T::zero()
                }
            })
        }
        AdjacencyNorm::Sym => {
            let with_self = a.add(&DenseMatrix::identity(n))?;
            let inv_sqrt: Vec<T> = (0..n)
                .map(|i| {
                    let d: T = with_self.row(i).iter().copied().sum();
                    T::one() / d.sqrt()
                })
                .collect();
            DenseMatrix::from_fn(n, n, |i, j| inv_sqrt[i] * with_self.get(i, j) * inv_sqrt[j])
        }
    })
}

/// Mean feature vector over the samples carrying each label; zero for labels
/// that never occur.
pub fn label_prototypes<T: Scalar>(features: &DenseMatrix<T>, labels: &LabelMatrix) -> Result<DenseMatrix<T>> {
    if features.rows() != labels.rows() {
        return Err(Error::shape(
            "label_prototypes",
            features.shape(),
            (labels.rows(), labels.cols()),
        ));
    }
    let (n_labels, d) = (labels.cols(), features.cols());
    let mut out = DenseMatrix::zeros(n_labels, d);
    let mut counts = vec![0usize; n_labels];
    for r in 0..labels.rows() {
        for (i, count) in counts.iter_mut().enumerate() {
            if labels.get(r, i) {
                *count += 1;
                for j in 0..d {
                    let v = out.get(i, j) + features.get(r, j);
                    out.set(i, j, v);
                }
            }
        }
    }
    for (i, &c) in counts.iter().enumerate() {
        if c > 0 {
            for j in 0..d {
                let v = out.get(i, j) / T::lit(c as f64);
                out.set(i, j, v);
            }
        }
    }
    Ok(out)
}

/// Node set, node features and the fixed adjacency of the label graph.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGraph<T> {
    pub n_labels: usize,
    pub node_features: DenseMatrix<T>,
    pub cooccurrence: DenseMatrix<T>,
    pub fixed_adj: DenseMatrix<T>,
    pub threshold: T,
}

impl<T: Scalar> LabelGraph<T> {
    /// `tau == 0` normalizes the raw conditional probabilities (row scheme by
    /// default); `tau > 0` thresholds first and defaults to the sym scheme.
    pub fn build(
        labels: &LabelMatrix,
        node_features: DenseMatrix<T>,
        tau: T,
        norm: Option<AdjacencyNorm>,
    ) -> Result<Self> {
        let cooccurrence = co_occurrence_matrix(labels)?;
        Self::from_cooccurrence(cooccurrence, node_features, tau, norm)
    }

    pub fn from_cooccurrence(
        cooccurrence: DenseMatrix<T>,
        node_features: DenseMatrix<T>,
        tau: T,
        norm: Option<AdjacencyNorm>,
    ) -> Result<Self> {
        let n = cooccurrence.rows();
        if node_features.rows() != n {
            return Err(Error::shape(
                "label_graph",
                cooccurrence.shape(),
                node_features.shape(),
            ));
        }
        let (base, default_norm) = if tau > T::zero() {
            (threshold_adjacency(&cooccurrence, tau)?, AdjacencyNorm::Sym)
        } else {
            // validates tau and the entry range even though nothing is dropped
            threshold_adjacency(&cooccurrence, tau)?;
            (cooccurrence.clone(), AdjacencyNorm::Row)
        };
        let fixed_adj = normalize_adjacency(&base, norm.unwrap_or(default_norm))?;
        Ok(Self {
            n_labels: n,
            node_features,
            cooccurrence,
            fixed_adj,
            threshold: tau,
        })
    }
}

/// Learnable weights of one adaptive graph convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveLayerParams<T> {
    /// `d_in × d_out`.
    pub weight: DenseMatrix<T>,
    /// `2·d_out × 1`; the first half scores the source node, the second the neighbor.
    pub attn_vec: DenseMatrix<T>,
    pub leaky_slope: T,
}

impl<T: Scalar> AdaptiveLayerParams<T> {
    pub fn new(weight: DenseMatrix<T>, attn_vec: DenseMatrix<T>, leaky_slope: T) -> Result<Self> {
        if attn_vec.shape() != (2 * weight.cols(), 1) {
            return Err(Error::shape(
                "adaptive_layer",
                weight.shape(),
                attn_vec.shape(),
            ));
        }
        if !(leaky_slope.is_finite() && leaky_slope > T::zero()) {
            return Err(Error::Config(format!("leaky slope must be positive, got {leaky_slope}")));
        }
        Ok(Self {
            weight,
            attn_vec,
            leaky_slope,
        })
    }

    /// Glorot-uniform initialization of both tensors.
    pub fn init(rng: &mut impl Rng, d_in: usize, d_out: usize, leaky_slope: T) -> Result<Self> {
        Self::new(
            glorot(rng, d_in, d_out),
            glorot(rng, 2 * d_out, 1),
            leaky_slope,
        )
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind(&self, tape: &mut Tape<T>, weight_id: ParamId, attn_id: ParamId) -> Result<BoundLayer<T>> {
        Ok(BoundLayer {
            weight: tape.param(weight_id, self.weight.clone())?,
            attn: tape.param(attn_id, self.attn_vec.clone())?,
            leaky_slope: self.leaky_slope,
        })
    }
}

pub(crate) fn glorot<T: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> DenseMatrix<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    DenseMatrix::from_fn(fan_in, fan_out, |_, _| T::lit(rng.random_range(-limit..limit)))
}

/// Layer parameters registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLayer<T> {
    pub weight: NodeId,
    pub attn: NodeId,
    pub leaky_slope: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerOptions {
    pub ablation: Ablation,
    /// Compute the similarity adjacency without gradient flow into the features.
    pub detach_c: bool,
}

impl Default for LayerOptions {
    fn default() -> Self {
        Self {
            ablation: Ablation::ABC,
            detach_c: false,
        }
    }
}

/// `e_ij = LeakyReLU(a^T [W f_i || W f_j])` over all node pairs.
pub fn attention_scores<T: Scalar>(tape: &mut Tape<T>, f: NodeId, layer: &BoundLayer<T>) -> Result<NodeId> {
    let d_out = tape.shape(layer.weight).1;
    if tape.shape(layer.attn) != (2 * d_out, 1) {
        return Err(Error::shape(
            "attention_scores",
            tape.shape(layer.weight),
            tape.shape(layer.attn),
        ));
    }
    let h = tape.matmul(f, layer.weight)?;
    let a_src = tape.slice_rows(layer.attn, 0, d_out)?;
    let a_dst = tape.slice_rows(layer.attn, d_out, 2 * d_out)?;
    let a_pair = tape.concat_cols(a_src, a_dst)?;
    let scores = tape.matmul(h, a_pair)?;
    let e = tape.pairwise_sum(scores)?;
    tape.leaky_relu(e, layer.leaky_slope)
}

/// Adds each row's maximum attention weight to its diagonal entry.
pub fn self_importance<T: Scalar>(tape: &mut Tape<T>, alpha: NodeId) -> Result<NodeId> {
    tape.self_importance(alpha)
}

/// Attention adjacency `B`: scores, row softmax over all nodes, self-importance.
pub fn attention_adjacency<T: Scalar>(tape: &mut Tape<T>, f: NodeId, layer: &BoundLayer<T>) -> Result<NodeId> {
    let e = attention_scores(tape, f, layer)?;
    let alpha = tape.row_softmax(e)?;
    self_importance(tape, alpha)
}

/// `LeakyReLU((A + B + C) F W)` with `B`, `C` included per the ablation.
pub fn agcn_layer<T: Scalar>(
    tape: &mut Tape<T>,
    f: NodeId,
    fixed_adj: NodeId,
    layer: &BoundLayer<T>,
    opts: LayerOptions,
) -> Result<NodeId> {
    let n = tape.shape(f).0;
    if tape.shape(fixed_adj) != (n, n) {
        return Err(Error::shape("agcn_layer", tape.shape(fixed_adj), tape.shape(f)));
    }
    if tape.shape(layer.weight).0 != tape.shape(f).1 {
        return Err(Error::shape("agcn_layer", tape.shape(f), tape.shape(layer.weight)));
    }
    let mut adj = fixed_adj;
    if opts.ablation.uses_attention() {
        let b = attention_adjacency(tape, f, layer)?;
        adj = tape.add(adj, b)?;
    }
    if opts.ablation.uses_similarity() {
        let src = if opts.detach_c { tape.detach(f)? } else { f };
        let c = tape.cosine_row_pairs(src)?;
        adj = tape.add(adj, c)?;
    }
    let mixed = tape.matmul(adj, f)?;
    let z = tape.matmul(mixed, layer.weight)?;
    tape.leaky_relu(z, layer.leaky_slope)
}

/// Stacks one or two adaptive layers, producing the `N × d_f` classifier matrix.
pub fn gcn_subnet_forward<T: Scalar>(
    tape: &mut Tape<T>,
    node_features: NodeId,
    fixed_adj: NodeId,
    layers: &[BoundLayer<T>],
    opts: LayerOptions,
    d_f: usize,
) -> Result<NodeId> {
    if layers.is_empty() || layers.len() > 2 {
        return Err(Error::Config(format!(
            "graph subnet supports 1 or 2 layers, got {}",
            layers.len()
        )));
    }
    let final_width = tape.shape(layers[layers.len() - 1].weight).1;
    if final_width != d_f {
        return Err(Error::Config(format!(
            "final graph layer width {final_width} does not match feature width {d_f}"
        )));
    }
    let mut f = node_features;
    for layer in layers {
        f = agcn_layer(tape, f, fixed_adj, layer, opts)?;
    }
    Ok(f)
}

/// Writes a square matrix as CSV with the label names as header.
pub fn write_matrix_csv<T: Scalar, W: Write>(m: &DenseMatrix<T>, names: &[String], out: W) -> Result<()> {
    if names.len() != m.cols() {
        return Err(Error::Contract(format!(
            "{} label names for a matrix with {} columns",
            names.len(),
            m.cols()
        )));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(names)?;
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v:e}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_matrix_csv<T: Scalar, R: Read>(input: R) -> Result<(Vec<String>, DenseMatrix<T>)> {
    let mut r = csv::Reader::from_reader(input);
    let names: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim().parse::<T>().map_err(|_| Error::Parse {
                    path: "<csv>".into(),
                    line: k + 2,
                    msg: format!("invalid number `{s}`"),
                })
            })
            .collect::<Result<Vec<T>>>()?;
        if row.len() != names.len() {
            return Err(Error::Parse {
                path: "<csv>".into(),
                line: k + 2,
                msg: format!("expected {} fields, got {}", names.len(), row.len()),
            });
        }
        rows.push(row);
    }
    Ok((names, DenseMatrix::from_rows(&rows)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    type M = DenseMatrix<f64>;

    fn m(rows: &[&[f64]]) -> M {
        M::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cooccurrence_hand_case() {
        let labels = LabelMatrix::from_rows(&[vec![1, 1], vec![1, 0]]).unwrap();
        let p: M = co_occurrence_matrix(&labels).unwrap();
        assert_eq!(p, m(&[&[1.0, 0.5], &[1.0, 1.0]]));
    }

    #[test]
    fn cooccurrence_disjoint_and_absent() {
        let labels = LabelMatrix::from_rows(&[vec![1, 0, 0], vec![0, 1, 0], vec![1, 0, 0]]).unwrap();
        let p: M = co_occurrence_matrix(&labels).unwrap();
        assert_eq!(p, m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 0.0]]));
    }

    #[test]
    fn threshold_cases() {
        let p = m(&[&[1.0, 0.4], &[0.6, 1.0]]);
        assert_eq!(threshold_adjacency(&p, 0.5).unwrap(), m(&[&[1.0, 0.0], &[1.0, 1.0]]));
        assert_eq!(threshold_adjacency(&p, 0.0).unwrap(), M::ones(2, 2));
        assert_eq!(threshold_adjacency(&p, 1.0).unwrap(), M::identity(2));
        assert!(matches!(threshold_adjacency(&p, 1.5), Err(Error::Config(_))));
        assert!(threshold_adjacency(&p, -0.1).is_err());
    }

    #[test]
    fn normalization_cases() {
        assert_eq!(normalize_adjacency(&M::identity(3), AdjacencyNorm::Row).unwrap(), M::identity(3));
        assert_eq!(
            normalize_adjacency(&M::ones(2, 2), AdjacencyNorm::Row).unwrap(),
            M::filled(2, 2, 0.5)
        );
        let sym = normalize_adjacency(&m(&[&[0.0, 1.0], &[1.0, 0.0]]), AdjacencyNorm::Sym).unwrap();
        assert!(sym.max_abs_diff(&M::filled(2, 2, 0.5)).unwrap() < 1e-15);
        let zero_row = normalize_adjacency(&m(&[&[0.0, 0.0], &[1.0, 3.0]]), AdjacencyNorm::Row).unwrap();
        assert_eq!(zero_row, m(&[&[0.0, 0.0], &[0.25, 0.75]]));
        assert!(normalize_adjacency(&m(&[&[-1.0]]), AdjacencyNorm::Row).is_err());
    }

    #[test]
    fn prototypes_average_and_zero_for_absent() {
        let feats = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let labels = LabelMatrix::from_rows(&[vec![1, 0, 1], vec![1, 0, 0]]).unwrap();
        let p = label_prototypes(&feats, &labels).unwrap();
        assert_eq!(p, m(&[&[2.0, 3.0], &[0.0, 0.0], &[1.0, 2.0]]));
    }

    fn bound(t: &mut Tape<f64>, w: M, a: M) -> BoundLayer<f64> {
        AdaptiveLayerParams::new(w, a, 0.2)
            .unwrap()
            .bind(t, ParamId(0), ParamId(1))
            .unwrap()
    }

    #[test]
    fn zero_attention_vector_gives_zero_scores_and_uniform_b() {
        let mut t = Tape::new();
        let f = t.constant(m(&[&[1.0, 2.0], &[0.5, -1.0], &[3.0, 0.0]])).unwrap();
        let layer = bound(&mut t, M::identity(2), M::zeros(4, 1));
        let e = attention_scores(&mut t, f, &layer).unwrap();
        assert!(t.value(e).data().iter().all(|&v| v == 0.0));
        let b = attention_adjacency(&mut t, f, &layer).unwrap();
        let bv = t.value(b);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 2.0 / 3.0 } else { 1.0 / 3.0 };
                assert!((bv.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_node_graph() {
        let mut t = Tape::new();
        let f = t.constant(m(&[&[1.0, -2.0]])).unwrap();
        let layer = bound(&mut t, M::identity(2), m(&[&[1.0], &[0.5], &[-1.0], &[2.0]]));
        let e = attention_scores(&mut t, f, &layer).unwrap();
        // a^T [f || f] = 1 - 1 + (-1) - 4 = -5, LeakyReLU -> -1
        assert_eq!(t.shape(e), (1, 1));
        assert!((t.scalar_value(e) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_configuration_passes_features_through() {
        let mut t = Tape::new();
        let fv = m(&[&[1.0, 2.0], &[0.5, 3.0]]);
        let f = t.constant(fv.clone()).unwrap();
        let adj = t.constant(M::identity(2)).unwrap();
        let layer = bound(&mut t, M::identity(2), M::zeros(4, 1));
        let opts = LayerOptions {
            ablation: Ablation::A,
            detach_c: false,
        };
        let out = agcn_layer(&mut t, f, adj, &layer, opts).unwrap();
        assert_eq!(t.value(out), &fv);
    }

    #[test]
    fn subnet_layer_count_and_width_checks() {
        let mut t = Tape::new();
        let f = t.constant(M::ones(2, 2)).unwrap();
        let adj = t.constant(M::identity(2)).unwrap();
        let layer = bound(&mut t, M::identity(2), M::zeros(4, 1));
        let opts = LayerOptions::default();
        assert!(gcn_subnet_forward(&mut t, f, adj, &[], opts, 2).is_err());
        assert!(gcn_subnet_forward(&mut t, f, adj, &[layer; 3], opts, 2).is_err());
        assert!(matches!(
            gcn_subnet_forward(&mut t, f, adj, &[layer], opts, 3),
            Err(Error::Config(_))
        ));
        assert!(gcn_subnet_forward(&mut t, f, adj, &[layer, layer], opts, 2).is_ok());
    }

    #[test]
    fn graph_build_modes() {
        let labels = LabelMatrix::from_rows(&[vec![1, 1, 0], vec![1, 0, 0], vec![0, 0, 1]]).unwrap();
        let g = LabelGraph::<f64>::build(&labels, M::zeros(3, 2), 0.0, None).unwrap();
        for i in 0..3 {
            let s: f64 = g.fixed_adj.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
        let g = LabelGraph::<f64>::build(&labels, M::zeros(3, 2), 0.6, None).unwrap();
        let binary = threshold_adjacency(&g.cooccurrence, 0.6).unwrap();
        assert_eq!(g.fixed_adj, normalize_adjacency(&binary, AdjacencyNorm::Sym).unwrap());
        assert!(LabelGraph::<f64>::build(&labels, M::zeros(2, 2), 0.0, None).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let p = m(&[&[1.0, 0.1], &[1.0 / 3.0, 1.0]]);
        let names = vec!["cat".to_string(), "dog".to_string()];
        let mut buf = Vec::new();
        write_matrix_csv(&p, &names, &mut buf).unwrap();
        let (n2, p2): (_, M) = read_matrix_csv(buf.as_slice()).unwrap();
        assert_eq!(n2, names);
        assert_eq!(p2, p);
    }

    #[test]
    fn ablation_parsing() {
        assert_eq!("A+B".parse::<Ablation>().unwrap(), Ablation::AB);
        assert_eq!("abc".parse::<Ablation>().unwrap(), Ablation::ABC);
        assert!("AC".parse::<Ablation>().is_err());
    }
}
