//! Finite-difference verification of every tape primitive and of the two
//! training objectives, over seeded random small instances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::TrainConfig;
use super::rng_stream;
use super::train::{adversarial_step, build_model, classification_step};
use crate::datakit::{DomainTag, MultiLabelDataset};
use crate::error::Result;
use crate::labels::LabelMatrix;
use crate::model::{GeneratorKind, ParamGroup};
use crate::numgrad::{compare_grads, finite_diff_grad, GradComparison, NodeId, ParamId, Tape};
use crate::{Matrix, Model};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckConfig {
    pub trials: usize,
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub h: f64,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            rel_tol: 1e-5,
            abs_floor: 1e-8,
            h: 1e-6,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<22} trials={:<4} max_rel={:.3e} max_abs={:.3e} {}",
            self.name,
            self.trials,
            self.max_rel,
            self.max_abs,
            if self.passed { "ok" } else { "FAIL" }
        )
    }
}

type Instance = (Vec<Matrix>, Vec<f64>);
type Forward = dyn Fn(&mut Tape<f64>, &[NodeId], &[f64]) -> Result<NodeId>;

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

/// Entries at least `gap` away from `at`, so a central difference of step
/// `h ≪ gap` never straddles a kink.
fn away_from(rng: &mut ChaCha8Rng, r: usize, c: usize, at: f64, gap: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| {
        let mag = rng.random_range(gap..1.5);
        if rng.random_bool(0.5) {
            at + mag
        } else {
            at - mag
        }
    })
}

fn weighted_value(inputs: &[Matrix], consts: &[f64], weights: &Matrix, f: &Forward) -> Result<f64> {
    let mut tape = Tape::new();
    let ids = inputs
        .iter()
        .map(|m| tape.constant(m.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &ids, consts)?;
    let w = tape.constant(weights.clone())?;
    let prod = tape.hadamard(w, out)?;
    let s = tape.sum(prod)?;
    Ok(tape.scalar_value(s))
}

/// Checks `f` through the scalar probe `sum(W ⊙ f(inputs))` with random `W`.
/// `reversal` scales the numeric gradient: 1 for ordinary primitives, `-λ`
/// for gradient reversal and 0 for a stop-gradient.
fn check_primitive(
    name: &'static str,
    cfg: &CheckConfig,
    rng: &mut ChaCha8Rng,
    build: &dyn Fn(&mut ChaCha8Rng) -> Instance,
    f: &Forward,
    reversal: &dyn Fn(&[f64]) -> f64,
) -> Result<CheckResult> {
    let mut cmp = GradComparison::perfect();
    for _ in 0..cfg.trials {
        let (inputs, consts) = build(rng);
        let mut tape = Tape::new();
        let ids = inputs
            .iter()
            .enumerate()
            .map(|(k, m)| tape.param(ParamId(k), m.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &ids, &consts)?;
        let (r, c) = tape.shape(out);
        let weights = gaussian(rng, r, c);
        let w = tape.constant(weights.clone())?;
        let prod = tape.hadamard(w, out)?;
        let s = tape.sum(prod)?;
        let grads = tape.backward(s)?;
        let scale = reversal(&consts);
        for (k, x) in inputs.iter().enumerate() {
            let numeric = finite_diff_grad(
                |p| {
                    let mut probe = inputs.clone();
                    probe[k] = p.clone();
                    weighted_value(&probe, &consts, &weights, f)
                },
                x,
                cfg.h,
            )?
            .scale(scale);
            let analytic = grads.get(ParamId(k)).expect("every input is a parameter");
            cmp = cmp.merge(compare_grads(analytic, &numeric, cfg.rel_tol, cfg.abs_floor)?);
        }
    }
    Ok(CheckResult {
        name,
        trials: cfg.trials,
        max_rel: cmp.max_rel,
        max_abs: cmp.max_abs,
        passed: cmp.passed,
    })
}

fn one(_: &[f64]) -> f64 {
    1.0
}

fn primitive_checks(cfg: &CheckConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut run = |name: &'static str,
                   build: &dyn Fn(&mut ChaCha8Rng) -> Instance,
                   f: &Forward,
                   reversal: &dyn Fn(&[f64]) -> f64|
     -> Result<()> {
        out.push(check_primitive(name, cfg, rng, build, f, reversal)?);
        Ok(())
    };
    let pair = |rng: &mut ChaCha8Rng| {
        let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 4));
        (vec![gaussian(rng, r, c), gaussian(rng, r, c)], vec![])
    };
    let single = |rng: &mut ChaCha8Rng| {
        let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 4));
        (vec![gaussian(rng, r, c)], vec![])
    };
    let with_const = |rng: &mut ChaCha8Rng| {
        let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 4));
        let k = rng.random_range(-2.0..2.0);
        (vec![gaussian(rng, r, c)], vec![k])
    };

    run(
        "matmul",
        &|rng| {
            let (n, k, m) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            (vec![gaussian(rng, n, k), gaussian(rng, k, m)], vec![])
        },
        &|t, x, _| t.matmul(x[0], x[1]),
        &one,
    )?;
    run("add", &pair, &|t, x, _| t.add(x[0], x[1]), &one)?;
    run("sub", &pair, &|t, x, _| t.sub(x[0], x[1]), &one)?;
    run("hadamard", &pair, &|t, x, _| t.hadamard(x[0], x[1]), &one)?;
    run("scale", &with_const, &|t, x, c| t.scale(x[0], c[0]), &one)?;
    run("add_scalar", &with_const, &|t, x, c| t.add_scalar(x[0], c[0]), &one)?;
    run("rsub_scalar", &with_const, &|t, x, c| t.rsub_scalar(c[0], x[0]), &one)?;
    run("transpose", &single, &|t, x, _| t.transpose(x[0]), &one)?;
    run(
        "concat_cols",
        &|rng| {
            let (n, a, b) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            (vec![gaussian(rng, n, a), gaussian(rng, n, b)], vec![])
        },
        &|t, x, _| t.concat_cols(x[0], x[1]),
        &one,
    )?;
    run(
        "slice_rows",
        &|rng| {
            let (n, m) = (dim(rng, 1, 5), dim(rng, 1, 4));
            let start = rng.random_range(0..n);
            let end = rng.random_range(start + 1..=n);
            (vec![gaussian(rng, n, m)], vec![start as f64, end as f64])
        },
        &|t, x, c| t.slice_rows(x[0], c[0] as usize, c[1] as usize),
        &one,
    )?;
    run("sum", &single, &|t, x, _| t.sum(x[0]), &one)?;
    run("sum_rows", &single, &|t, x, _| t.sum_rows(x[0]), &one)?;
    run("mean", &single, &|t, x, _| t.mean(x[0]), &one)?;
    run(
        "log",
        &|rng| {
            let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 4));
            (vec![uniform(rng, r, c, 0.2, 3.0)], vec![])
        },
        &|t, x, _| t.log(x[0]),
        &one,
    )?;
    run(
        "pow_const",
        &|rng| {
            let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let e = rng.random_range(0.5..4.0);
            (vec![uniform(rng, r, c, 0.2, 2.0)], vec![e])
        },
        &|t, x, c| t.pow_const(x[0], c[0]),
        &one,
    )?;
    run(
        "add_row_broadcast",
        &|rng| {
            let (n, m) = (dim(rng, 1, 4), dim(rng, 1, 4));
            (vec![gaussian(rng, n, m), gaussian(rng, 1, m)], vec![])
        },
        &|t, x, _| t.add_row_broadcast(x[0], x[1]),
        &one,
    )?;
    run(
        "leaky_relu",
        &|rng| {
            let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let slope = rng.random_range(0.01..0.5);
            (vec![away_from(rng, r, c, 0.0, 1e-3)], vec![slope])
        },
        &|t, x, c| t.leaky_relu(x[0], c[0]),
        &one,
    )?;
    run("sigmoid", &single, &|t, x, _| t.sigmoid(x[0]), &one)?;
    run("row_softmax", &single, &|t, x, _| t.row_softmax(x[0]), &one)?;
    run(
        "cosine_row_pairs",
        &|rng| {
            let (n, d) = (dim(rng, 1, 5), dim(rng, 1, 4));
            (vec![gaussian(rng, n, d)], vec![])
        },
        &|t, x, _| t.cosine_row_pairs(x[0]),
        &one,
    )?;
    run(
        "self_importance",
        &|rng| {
            let n = dim(rng, 1, 5);
            (vec![uniform(rng, n, n, 0.0, 1.0)], vec![])
        },
        &|t, x, _| t.self_importance(x[0]),
        &one,
    )?;
    run(
        "pairwise_sum",
        &|rng| {
            let n = dim(rng, 1, 5);
            (vec![gaussian(rng, n, 2)], vec![])
        },
        &|t, x, _| t.pairwise_sum(x[0]),
        &one,
    )?;
    run(
        "clamp_min",
        &|rng| {
            let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let lo = rng.random_range(-0.5..0.5);
            (vec![away_from(rng, r, c, lo, 1e-3)], vec![lo])
        },
        &|t, x, c| t.clamp_min(x[0], c[0]),
        &one,
    )?;
    run(
        "grl",
        &|rng| {
            let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let lambda = rng.random_range(0.0..2.0);
            (vec![gaussian(rng, r, c)], vec![lambda])
        },
        &|t, x, c| t.grl(x[0], c[0]),
        &|c| -c[0],
    )?;
    run("detach", &single, &|t, x, _| t.detach(x[0]), &|_| 0.0)?;
    Ok(out)
}

fn random_dataset(rng: &mut ChaCha8Rng, n: usize, d: usize, n_labels: usize, labeled: bool) -> Result<MultiLabelDataset> {
    let features = gaussian(rng, n, d);
    let labels = LabelMatrix::new(n, n_labels, (0..n * n_labels).map(|_| u8::from(rng.random_bool(0.5))).collect())?;
    let ds = MultiLabelDataset::new(
        (0..n).map(|i| format!("s{i}")).collect(),
        features,
        Some(labels),
        (0..n_labels).map(|i| format!("l{i}")).collect(),
        DomainTag::Source,
    )?;
    Ok(if labeled { ds } else { ds.hide_labels() })
}

/// A random small model: MLP generator, learned node features, 1–2 layers,
/// all three adjacency terms.
fn random_setup(rng: &mut ChaCha8Rng, with_domain: bool) -> Result<(TrainConfig, MultiLabelDataset, Model)> {
    let (n, d, n_labels) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 2, 5));
    let mut cfg = TrainConfig::with_seed(rng.random());
    cfg.model.generator = GeneratorKind::Mlp;
    cfg.model.generator_hidden = vec![dim(rng, 1, 4)];
    cfg.model.d_f = Some(dim(rng, 1, 4));
    cfg.model.layers = dim(rng, 1, 2);
    cfg.model.node_features = super::config::NodeFeatureSource::Learned;
    cfg.da.domain_hidden = Some(dim(rng, 1, 4));
    let ds = random_dataset(rng, n, d, n_labels, true)?;
    let model = build_model(&cfg, &ds, with_domain)?;
    Ok((cfg, ds, model))
}

fn with_param(model: &Model, k: usize, p: &Matrix) -> Model {
    let mut m = model.clone();
    *m.parameters_mut()[k] = p.clone();
    m
}

fn check_composed(
    name: &'static str,
    cfg: &CheckConfig,
    rng: &mut ChaCha8Rng,
    adversarial: bool,
) -> Result<CheckResult> {
    let mut cmp = GradComparison::perfect();
    for _ in 0..cfg.trials {
        let (tc, ds, model) = random_setup(rng, adversarial)?;
        let y = ds.require_labels("check")?.clone();
        let x = ds.features.clone();
        let nt = dim(rng, 1, 4);
        let xt = gaussian(rng, nt, ds.feature_dim());
        let lambda = rng.random_range(0.1..1.5);
        let objective = |m: &Model, sign: f64| -> Result<(f64, Vec<Matrix>)> {
            if adversarial {
                adversarial_step(m, &tc, &x, &y, &xt, sign * lambda)
            } else {
                classification_step(m, &tc, &x, &y)
            }
        };
        let (_, grads) = objective(&model, 1.0)?;
        for (k, group) in model.param_groups().into_iter().enumerate() {
            // Reversal makes the generator descend `l_c - λ l_d`.
            let sign = if group == ParamGroup::Generator { -1.0 } else { 1.0 };
            let p = model.parameters()[k].2.clone();
            let numeric = finite_diff_grad(|q| Ok(objective(&with_param(&model, k, q), sign)?.0), &p, cfg.h)?;
            cmp = cmp.merge(compare_grads(&grads[k], &numeric, cfg.rel_tol, cfg.abs_floor)?);
        }
    }
    Ok(CheckResult {
        name,
        trials: cfg.trials,
        max_rel: cmp.max_rel,
        max_abs: cmp.max_abs,
        passed: cmp.passed,
    })
}

/// Every primitive plus the single-domain and adversarial objectives.
pub fn run_suite(cfg: &CheckConfig) -> Result<Vec<CheckResult>> {
    let mut rng = rng_stream(cfg.seed, 20);
    let mut out = primitive_checks(cfg, &mut rng)?;
    out.push(check_composed("objective_single", cfg, &mut rng, false)?);
    out.push(check_composed("objective_adversarial", cfg, &mut rng, true)?);
    Ok(out)
}
