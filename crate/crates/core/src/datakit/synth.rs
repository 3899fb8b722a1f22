//! Synthetic multi-label data with clustered label co-occurrence.
//!
//! Labels are partitioned into contiguous clusters. Each sample picks one
//! cluster uniformly, includes each member label with `p_member` and every
//! other label with `p_other`. Features are the sum of the present labels'
//! prototype vectors plus isotropic Gaussian noise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DomainTag, MultiLabelDataset};
use crate::error::{Error, Result};
use crate::labels::LabelMatrix;
use crate::Matrix;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Shift {
    #[default]
    None,
    /// `x ← s · x R + bias`. `R` is a uniformly random orthogonal matrix with
    /// determinant +1, or, when `rotation_pairs` is set, a product of that
    /// many Givens rotations by `rotation_angle` on disjoint random axis pairs.
    Affine {
        scale: f64,
        rotation_seed: u64,
        bias: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rotation_pairs: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rotation_angle: Option<f64>,
    },
    Noise {
        sigma: f64,
        #[serde(default)]
        seed: u64,
    },
}


fn default_p_member() -> f64 {
    0.8
}

fn default_p_other() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_labels: usize,
    pub n_clusters: usize,
    pub samples: usize,
    /// Size of each validation split; defaults to `samples / 4`.
    #[serde(default)]
    pub val_samples: Option<usize>,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    #[serde(default)]
    pub shift: Shift,
    pub seed: u64,
    #[serde(default = "default_p_member")]
    pub p_member: f64,
    #[serde(default = "default_p_other")]
    pub p_other: f64,
}

impl SynthSpec {
    /// The 12-label correlated benchmark used by the examples and tests.
    pub fn correlated(samples: usize, seed: u64) -> Self {
        Self {
            n_labels: 12,
            n_clusters: 4,
            samples,
            val_samples: None,
            feature_dim: 32,
            noise_sigma: 1.0,
            shift: Shift::None,
            seed,
            p_member: default_p_member(),
            p_other: default_p_other(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_labels == 0 || self.n_clusters == 0 || self.samples == 0 || self.feature_dim == 0 {
            return Err(Error::Config("synthetic spec counts must be positive".into()));
        }
        if self.val_samples == Some(0) {
            return Err(Error::Config("val_samples must be positive".into()));
        }
        if self.n_clusters > self.n_labels {
            return Err(Error::Config(format!(
                "n_clusters ({}) exceeds n_labels ({})",
                self.n_clusters, self.n_labels
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        for p in [self.p_member, self.p_other] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("inclusion probability {p} outside [0, 1]")));
            }
        }
        validate_shift(&self.shift)
    }

    pub fn val_count(&self) -> usize {
        self.val_samples.unwrap_or((self.samples / 4).max(1))
    }

    pub fn cluster_of(&self, label: usize) -> usize {
        label * self.n_clusters / self.n_labels
    }

    pub fn label_names(&self) -> Vec<String> {
        (0..self.n_labels).map(|i| format!("label_{i:02}")).collect()
    }

    /// Marginal probability that any given label is present.
    pub fn label_marginal(&self) -> f64 {
        let k = self.n_clusters as f64;
        (self.p_member + (k - 1.0) * self.p_other) / k
    }
}

fn validate_shift(shift: &Shift) -> Result<()> {
    match *shift {
        Shift::None => Ok(()),
        Shift::Affine {
            scale,
            bias,
            rotation_angle,
            rotation_pairs,
            ..
        } => {
            if !(scale.is_finite() && bias.is_finite()) {
                return Err(Error::Config("affine shift parameters must be finite".into()));
            }
            if rotation_angle.is_some() != rotation_pairs.is_some() {
                return Err(Error::Config(
                    "rotation_pairs and rotation_angle must be given together".into(),
                ));
            }
            if rotation_angle.is_some_and(|a| !a.is_finite()) {
                return Err(Error::Config("rotation_angle must be finite".into()));
            }
            Ok(())
        }
        Shift::Noise { sigma, .. } => {
            if sigma >= 0.0 && sigma.is_finite() {
                Ok(())
            } else {
                Err(Error::Config("noise sigma must be finite and >= 0".into()))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Target,
    TargetVal,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Target => 3,
            Split::TargetVal => 4,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Target => "target",
            Split::TargetVal => "target_val",
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn prototypes(spec: &SynthSpec) -> Matrix {
    let mut rng = rng_for(spec.seed, 0);
    Matrix::from_fn(spec.n_labels, spec.feature_dim, |_, _| normal(&mut rng))
}

/// Unshifted samples of one split.
pub fn generate_split(spec: &SynthSpec, split: Split) -> Result<MultiLabelDataset> {
    spec.validate()?;
    let n = match split {
        Split::Train | Split::Target => spec.samples,
        Split::Val | Split::TargetVal => spec.val_count(),
    };
    let protos = prototypes(spec);
    let mut rng = rng_for(spec.seed, split.stream());
    let (n_labels, d) = (spec.n_labels, spec.feature_dim);
    let mut labels = LabelMatrix::zeros(n, n_labels);
    let mut feats = Matrix::zeros(n, d);
    for s in 0..n {
        let cluster = rng.random_range(0..spec.n_clusters);
        for i in 0..n_labels {
            let p = if spec.cluster_of(i) == cluster {
                spec.p_member
            } else {
                spec.p_other
            };
            if rng.random::<f64>() < p {
                labels.set(s, i, true);
            }
        }
        for j in 0..d {
            let mut v = 0.0;
            for i in (0..n_labels).filter(|&i| labels.get(s, i)) {
                v += protos.get(i, j);
            }
            if spec.noise_sigma > 0.0 {
                v += spec.noise_sigma * normal(&mut rng);
            }
            feats.set(s, j, v);
        }
    }
    let ids = (0..n).map(|k| format!("{}-{k:06}", split.prefix())).collect();
    MultiLabelDataset::new(ids, feats, Some(labels), spec.label_names(), DomainTag::Source)
}

/// Labeled source training samples of `spec`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<MultiLabelDataset> {
    generate_split(spec, Split::Train)
}

/// Uniformly random rotation (determinant +1) via Gram-Schmidt on a Gaussian matrix.
fn haar_rotation(d: usize, rng: &mut impl Rng) -> Matrix {
    let g = Matrix::from_fn(d, d, |_, _| normal(rng));
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    for j in 0..d {
        let mut v: Vec<f64> = (0..d).map(|i| g.get(i, j)).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|x| x / norm).collect());
    }
    let mut r = Matrix::from_fn(d, d, |i, j| q[j][i]);
    if determinant_sign(&r) < 0.0 {
        for i in 0..d {
            let v = r.get(i, 0);
            r.set(i, 0, -v);
        }
    }
    r
}

fn determinant_sign(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    let mut sign = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .expect("non-empty range");
        if a[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            sign = -sign;
        }
        if a[col][col] < 0.0 {
            sign = -sign;
        }
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    sign
}

fn givens_rotation(d: usize, pairs: usize, angle: f64, rng: &mut impl Rng) -> Result<Matrix> {
    if 2 * pairs > d {
        return Err(Error::Config(format!(
            "{pairs} disjoint rotation pairs need at least {} dimensions, have {d}",
            2 * pairs
        )));
    }
    let mut axes: Vec<usize> = (0..d).collect();
    for i in (1..d).rev() {
        let j = rng.random_range(0..=i);
        axes.swap(i, j);
    }
    let (s, c) = angle.sin_cos();
    let mut r = Matrix::identity(d);
    for p in 0..pairs {
        let (a, b) = (axes[2 * p], axes[2 * p + 1]);
        r.set(a, a, c);
        r.set(a, b, s);
        r.set(b, a, -s);
        r.set(b, b, c);
    }
    Ok(r)
}

/// The rotation matrix an affine shift applies.
pub fn shift_rotation(shift: &Shift, d: usize) -> Result<Option<Matrix>> {
    match *shift {
        Shift::Affine {
            rotation_seed,
            rotation_pairs,
            rotation_angle,
            ..
        } => {
            let mut rng = rng_for(rotation_seed, 0);
            Ok(Some(match (rotation_pairs, rotation_angle) {
                (Some(p), Some(a)) => givens_rotation(d, p, a, &mut rng)?,
                _ => haar_rotation(d, &mut rng),
            }))
        }
        _ => Ok(None),
    }
}

/// Moves a dataset to the target domain: features transformed, labels kept
/// but hidden.
pub fn apply_shift(ds: MultiLabelDataset, shift: &Shift) -> Result<MultiLabelDataset> {
    validate_shift(shift)?;
    let mut ds = ds;
    match *shift {
        Shift::None => {}
        Shift::Affine { scale, bias, .. } => {
            let r = shift_rotation(shift, ds.feature_dim())?.expect("affine shift has a rotation");
            ds.features = ds.features.matmul(&r)?.map(|v| v * scale + bias);
        }
        Shift::Noise { sigma, seed } => {
            let mut rng = rng_for(seed, 7);
            for v in ds.features.data_mut() {
                *v += sigma * normal(&mut rng);
            }
        }
    }
    Ok(ds.with_domain(DomainTag::Target).hide_labels())
}

/// All splits of one synthetic world.
#[derive(Clone, Debug)]
pub struct SynthSuite {
    pub train: MultiLabelDataset,
    pub val: MultiLabelDataset,
    /// Shifted training data with hidden labels; present when requested.
    pub target: Option<MultiLabelDataset>,
    /// Shifted data with visible labels for evaluation only.
    pub target_val: Option<MultiLabelDataset>,
}

pub fn generate_suite(spec: &SynthSpec, with_target: bool) -> Result<SynthSuite> {
    let train = generate_split(spec, Split::Train)?;
    let val = generate_split(spec, Split::Val)?;
    let (target, target_val) = if with_target {
        let t = apply_shift(generate_split(spec, Split::Target)?, &spec.shift)?;
        let tv = apply_shift(generate_split(spec, Split::TargetVal)?, &spec.shift)?.reveal_labels();
        (Some(t), Some(tv))
    } else {
        (None, None)
    };
    Ok(SynthSuite {
        train,
        val,
        target,
        target_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            samples: 200,
            ..SynthSpec::correlated(200, seed)
        }
    }

    #[test]
    fn noiseless_single_label_samples_are_prototypes() {
        let spec = SynthSpec {
            n_labels: 3,
            n_clusters: 3,
            samples: 50,
            val_samples: None,
            feature_dim: 4,
            noise_sigma: 0.0,
            shift: Shift::None,
            seed: 5,
            p_member: 1.0,
            p_other: 0.0,
        };
        let ds = generate_synthetic(&spec).unwrap();
        let protos = prototypes(&spec);
        let labels = ds.labels().unwrap();
        for s in 0..ds.n_samples() {
            let present: Vec<usize> = (0..3).filter(|&i| labels.get(s, i)).collect();
            assert_eq!(present.len(), 1);
            assert_eq!(ds.features.row(s), protos.row(present[0]));
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(generate_synthetic(&small(9)).unwrap(), generate_synthetic(&small(9)).unwrap());
        assert_ne!(generate_synthetic(&small(9)).unwrap(), generate_synthetic(&small(10)).unwrap());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = small(1);
        s.n_clusters = 13;
        assert!(matches!(generate_synthetic(&s), Err(Error::Config(_))));
        let mut s = small(1);
        s.noise_sigma = -1.0;
        assert!(s.validate().is_err());
        let mut s = small(1);
        s.samples = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn shift_none_and_identity_affine() {
        let ds = generate_synthetic(&small(2)).unwrap();
        let same = apply_shift(ds.clone(), &Shift::None).unwrap();
        assert_eq!(same.features, ds.features);
        assert_eq!(same.domain, DomainTag::Target);
        assert!(same.labels().is_none());
        assert_eq!(same.labels_internal(), ds.labels());
        let ident = Shift::Affine {
            scale: 1.0,
            rotation_seed: 3,
            bias: 0.0,
            rotation_pairs: Some(0),
            rotation_angle: Some(0.7),
        };
        assert_eq!(apply_shift(ds.clone(), &ident).unwrap().features, ds.features);
    }

    #[test]
    fn rotations_are_orthogonal() {
        let mut rng = rng_for(4, 0);
        for r in [haar_rotation(6, &mut rng), givens_rotation(6, 2, 0.9, &mut rng).unwrap()] {
            let rrt = r.matmul(&r.transpose()).unwrap();
            assert!(rrt.max_abs_diff(&Matrix::identity(6)).unwrap() < 1e-12);
            assert!(determinant_sign(&r) > 0.0);
        }
        assert!(givens_rotation(3, 2, 0.1, &mut rng).is_err());
    }

    #[test]
    fn suite_has_hidden_target_and_labeled_target_val() {
        let mut spec = small(3);
        spec.shift = Shift::Noise { sigma: 0.5, seed: 1 };
        let suite = generate_suite(&spec, true).unwrap();
        assert!(suite.target.as_ref().unwrap().labels().is_none());
        assert!(suite.target_val.as_ref().unwrap().labels().is_some());
        assert_eq!(suite.val.n_samples(), 50);
    }

    #[test]
    fn shift_serde_forms() {
        let s: Shift = serde_json::from_str(r#"{"kind":"affine","scale":1.5,"rotation_seed":2,"bias":0.3}"#).unwrap();
        assert!(matches!(s, Shift::Affine { rotation_pairs: None, .. }));
        let n: Shift = serde_json::from_str(r#"{"kind":"none"}"#).unwrap();
        assert_eq!(n, Shift::None);
        assert!(serde_json::from_str::<Shift>(r#"{"kind":"warp"}"#).is_err());
    }
}
