//! Property tests over randomly generated inputs.

mod common;

use common::*;
use mlagcn::datakit::{load_dataset, save_dataset, DomainTag, MultiLabelDataset};
use mlagcn::labelgraph::Ablation;
use mlagcn::losses::{asl_loss, domain_loss, LossConfig};
use mlagcn::metrics::{average_precision, evaluate, Decision, EvalFrame};
use mlagcn::numgrad::{ParamId, Tape};
use mlagcn::runkit::{build_model, NodeFeatureSource, TrainConfig};
use mlagcn::LabelMatrix;
use proptest::prelude::*;

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>, scale: f64) -> impl Strategy<Value = M> {
    (rows, cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-scale..scale, r * c).prop_map(move |d| M::new(r, c, d).unwrap())
    })
}

fn probs_and_labels() -> impl Strategy<Value = (M, LabelMatrix)> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
        (
            prop::collection::vec(0.001f64..0.999, r * c).prop_map(move |d| M::new(r, c, d).unwrap()),
            prop::collection::vec(0u8..2, r * c).prop_map(move |d| LabelMatrix::new(r, c, d).unwrap()),
        )
    })
}

/// Continuous scores with every label column holding a positive.
fn frame() -> impl Strategy<Value = (M, LabelMatrix)> {
    (2usize..12, 1usize..5).prop_flat_map(|(r, c)| {
        (
            prop::collection::vec(0.0f64..1.0, r * c).prop_map(move |d| M::new(r, c, d).unwrap()),
            prop::collection::vec(0u8..2, r * c).prop_map(move |mut d| {
                for j in 0..c {
                    d[j] = 1;
                }
                LabelMatrix::new(r, c, d).unwrap()
            }),
            Just(r),
        )
    })
    .prop_flat_map(|(s, l, r)| (Just(s), Just(l), Just((0..r).collect::<Vec<_>>()).prop_shuffle()))
    .prop_map(|(s, l, perm)| {
        // the shuffle is applied to the positive-seeded first row too
        (permute_rows(&s, &perm), permute_labels(&l, &perm))
    })
}

fn permute_rows(m: &M, perm: &[usize]) -> M {
    M::from_rows(&perm.iter().map(|&i| m.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
}

fn permute_labels(l: &LabelMatrix, perm: &[usize]) -> LabelMatrix {
    let mut d = Vec::with_capacity(l.rows() * l.cols());
    for &i in perm {
        d.extend((0..l.cols()).map(|j| u8::from(l.get(i, j))));
    }
    LabelMatrix::new(l.rows(), l.cols(), d).unwrap()
}

fn eval_on<F: Fn(&mut Tape<f64>, mlagcn::numgrad::NodeId) -> mlagcn::Result<mlagcn::numgrad::NodeId>>(x: &M, f: F) -> M {
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone()).unwrap();
    let out = f(&mut tape, xi).unwrap();
    tape.value(out).clone()
}

/// Batch mean of the per-sample sum over labels.
fn bce(p: &M, y: &LabelMatrix) -> f64 {
    let mut s = 0.0;
    for i in 0..p.rows() {
        for j in 0..p.cols() {
            let v = p.get(i, j);
            s += if y.get(i, j) { v.ln() } else { (1.0 - v).ln() };
        }
    }
    -s / p.rows() as f64
}

fn asl(p: &M, y: &LabelMatrix, cfg: &LossConfig) -> f64 {
    let mut tape = Tape::new();
    let pi = tape.constant(p.clone()).unwrap();
    let l = asl_loss(&mut tape, pi, y, cfg).unwrap();
    tape.scalar_value(l)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in matrix(1..=6, 1..=6, 20.0)) {
        let a = eval_on(&x, |t, n| t.row_softmax(n));
        for i in 0..a.rows() {
            prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn cosine_is_symmetric_bounded_with_unit_diagonal(x in matrix(1..=6, 1..=5, 3.0)) {
        let c = eval_on(&x, |t, n| t.cosine_row_pairs(n));
        for i in 0..c.rows() {
            let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-6 {
                prop_assert!((c.get(i, i) - 1.0).abs() < 1e-12);
            }
            for j in 0..c.cols() {
                prop_assert_eq!(c.get(i, j), c.get(j, i));
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c.get(i, j)));
            }
        }
    }

    #[test]
    fn self_importance_puts_the_row_max_on_the_diagonal(x in (1usize..7).prop_flat_map(|n| matrix(n..=n, n..=n, 5.0))) {
        let alpha = eval_on(&x, |t, n| t.row_softmax(n));
        let b = eval_on(&x, |t, n| { let a = t.row_softmax(n)?; t.self_importance(a) });
        for i in 0..b.rows() {
            let mx = alpha.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((b.row(i).iter().sum::<f64>() - (1.0 + mx)).abs() < 1e-12);
            for j in 0..b.cols() {
                prop_assert!(b.get(i, i) >= b.get(i, j));
            }
        }
    }

    #[test]
    fn fan_out_accumulates_gradients(x in matrix(1..=4, 1..=4, 3.0), c in -2.0f64..2.0) {
        // f = sum(x ⊙ x + c x) has gradient 2x + c
        let mut tape = Tape::new();
        let xi = tape.param(ParamId(0), x.clone()).unwrap();
        let sq = tape.hadamard(xi, xi).unwrap();
        let lin = tape.scale(xi, c).unwrap();
        let s = tape.add(sq, lin).unwrap();
        let root = tape.sum(s).unwrap();
        let g = tape.backward(root).unwrap();
        let g = g.get(ParamId(0)).unwrap();
        for (gv, xv) in g.data().iter().zip(x.data()) {
            prop_assert!((gv - (2.0 * xv + c)).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_evaluation_is_deterministic(x in (2usize..6).prop_flat_map(|n| matrix(n..=n, n..=n, 3.0))) {
        let run = || {
            let mut tape = Tape::new();
            let xi = tape.param(ParamId(0), x.clone()).unwrap();
            let a = tape.row_softmax(xi).unwrap();
            let b = tape.self_importance(a).unwrap();
            let c = tape.cosine_row_pairs(xi).unwrap();
            let s = tape.add(b, c).unwrap();
            let m = tape.matmul(s, xi).unwrap();
            let r = tape.leaky_relu(m, 0.2).unwrap();
            let root = tape.mean(r).unwrap();
            let g = tape.backward(root).unwrap();
            (tape.scalar_value(root), g.get(ParamId(0)).unwrap().clone())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        prop_assert_eq!(v1.to_bits(), v2.to_bits());
        prop_assert!(g1.data().iter().zip(g2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn asl_is_nonnegative((p, y) in probs_and_labels(), gp in 0.0f64..3.0, gn in 0.0f64..6.0, m in 0.0f64..0.3) {
        let cfg = LossConfig { gamma_pos: gp, gamma_neg: gn, margin: m, lambda_d: 1.0 };
        prop_assert!(asl(&p, &y, &cfg) >= 0.0);
    }

    #[test]
    fn asl_without_focusing_is_bce((p, y) in probs_and_labels()) {
        prop_assert!((asl(&p, &y, &LossConfig::bce()) - bce(&p, &y)).abs() < 1e-12);
    }

    #[test]
    fn asl_decreases_with_negative_focusing((p, y) in probs_and_labels(), g1 in 0.0f64..5.0, dg in 0.0f64..3.0, m in 0.0f64..0.2) {
        let lo = LossConfig { gamma_pos: 0.0, gamma_neg: g1, margin: m, lambda_d: 1.0 };
        let hi = LossConfig { gamma_neg: g1 + dg, ..lo.clone() };
        prop_assert!(asl(&p, &y, &hi) <= asl(&p, &y, &lo) + 1e-15);
    }

    #[test]
    fn domain_loss_ignores_sample_order(
        pairs in prop::collection::vec((0.01f64..0.99, 0u8..2), 1..12).prop_shuffle(),
    ) {
        let value = |pairs: &[(f64, u8)]| {
            let mut tape = Tape::new();
            let d = M::new(pairs.len(), 1, pairs.iter().map(|p| p.0).collect()).unwrap();
            let di = tape.constant(d).unwrap();
            let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            let l = domain_loss(&mut tape, di, &labels).unwrap();
            tape.scalar_value(l)
        };
        let mut sorted = pairs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assert!((value(&pairs) - value(&sorted)).abs() < 1e-12);
    }

    #[test]
    fn average_precision_ignores_monotone_transforms(
        pairs in prop::collection::vec((0.0f64..1.0, 0u8..2), 1..20),
        a in 0.1f64..5.0, b in -3.0f64..3.0,
    ) {
        let s: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let t: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let transformed: Vec<f64> = s.iter().map(|v| (a * v + b).exp()).collect();
        match (average_precision(&s, &t), average_precision(&transformed, &t)) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (None, None) => {}
            other => prop_assert!(false, "presence differs: {:?}", other),
        }
    }

    #[test]
    fn metrics_are_bounded_and_order_free((s, l) in frame(), seed in any::<u64>()) {
        let decision = Decision::Threshold(0.5);
        let rep = evaluate(&EvalFrame::new(&s, &l, decision).unwrap()).unwrap();
        for v in rep.values() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let mut perm: Vec<usize> = (0..s.rows()).collect();
        let mut r = rng(seed);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let (ps, pl) = (permute_rows(&s, &perm), permute_labels(&l, &perm));
        let other = evaluate(&EvalFrame::new(&ps, &pl, decision).unwrap()).unwrap();
        for (a, b) in rep.values().iter().zip(other.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_is_row_permutation_equivariant(seed in 0u64..1000, perm in Just((0..7).collect::<Vec<usize>>()).prop_shuffle()) {
        let mut r = rng(seed);
        let mut cfg = TrainConfig::with_seed(seed);
        cfg.model.generator = mlagcn::model::GeneratorKind::Mlp;
        cfg.model.generator_hidden = vec![6];
        cfg.model.d_f = Some(4);
        cfg.model.node_features = NodeFeatureSource::Learned;
        let ds = MultiLabelDataset::new(
            (0..7).map(|i| i.to_string()).collect(),
            from_grid(&random_grid(&mut r, 7, 3, 2.0)),
            Some(random_labels(&mut r, 7, 4, 0.5)),
            (0..4).map(|i| format!("l{i}")).collect(),
            DomainTag::Source,
        ).unwrap();
        let model = build_model(&cfg, &ds, false).unwrap();
        let p = model.predict_probs(&ds.features, Ablation::ABC).unwrap();
        let pp = model.predict_probs(&permute_rows(&ds.features, &perm), Ablation::ABC).unwrap();
        prop_assert!(permute_rows(&p, &perm).max_abs_diff(&pp).unwrap() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn datasets_round_trip(seed in any::<u64>(), n in 1usize..8, d in 1usize..5, m in 1usize..5, hidden in any::<bool>()) {
        let mut r = rng(seed);
        let mut ds = MultiLabelDataset::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            from_grid(&random_grid(&mut r, n, d, 1e3)),
            Some(random_labels(&mut r, n, m, 0.5)),
            (0..m).map(|i| format!("label {i}")).collect(),
            DomainTag::Source,
        ).unwrap();
        if hidden {
            ds = ds.with_domain(DomainTag::Target).hide_labels();
        }
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(&manifest).unwrap();
        prop_assert_eq!(&back.features, &ds.features);
        prop_assert_eq!(&back.ids, &ds.ids);
        prop_assert_eq!(&back.label_names, &ds.label_names);
        prop_assert_eq!(back.domain, ds.domain);
        prop_assert_eq!(back.labels(), ds.labels());
    }
}
