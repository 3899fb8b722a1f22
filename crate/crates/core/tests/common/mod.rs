//! Independent loop-based reference implementations shared by the
//! integration tests. Nothing here goes through the tape.
#![allow(dead_code)]

use mlagcn::numgrad::DenseMatrix;
use mlagcn::LabelMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type M = DenseMatrix<f64>;
pub type Grid = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn grid(m: &M) -> Grid {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn from_grid(g: &Grid) -> M {
    M::from_rows(g).unwrap()
}

pub fn random_grid(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Grid {
    (0..r)
        .map(|_| (0..c).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, m: usize, p: f64) -> LabelMatrix {
    LabelMatrix::new(n, m, (0..n * m).map(|_| u8::from(rng.random_bool(p))).collect()).unwrap()
}

pub fn max_diff(a: &Grid, b: &Grid) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst: f64 = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(rb) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

pub fn matmul(a: &Grid, b: &Grid) -> Grid {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn add(a: &Grid, b: &Grid) -> Grid {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn transpose(a: &Grid) -> Grid {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn lrelu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn map(a: &Grid, f: impl Fn(f64) -> f64) -> Grid {
    a.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

pub fn softmax_rows(e: &Grid) -> Grid {
    e.iter()
        .map(|r| {
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = r.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = ex.iter().sum();
            ex.iter().map(|v| v / s).collect()
        })
        .collect()
}

/// `e_ij = lrelu(Σ_k a_k (fW)_ik + Σ_k a_{d'+k} (fW)_jk)`.
pub fn attention_scores(f: &Grid, w: &Grid, a: &[f64], slope: f64) -> Grid {
    let h = matmul(f, w);
    let d = w[0].len();
    let n = f.len();
    let mut e = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..d {
                s += a[k] * h[i][k];
            }
            for k in 0..d {
                s += a[d + k] * h[j][k];
            }
            e[i][j] = lrelu(s, slope);
        }
    }
    e
}

pub fn self_importance(alpha: &Grid) -> Grid {
    let mut b = alpha.clone();
    for (i, row) in alpha.iter().enumerate() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        b[i][i] += mx;
    }
    b
}

pub fn cosine(f: &Grid) -> Grid {
    let n = f.len();
    let norm: Vec<f64> = f.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if norm[i] < 1e-12 || norm[j] < 1e-12 {
                continue;
            }
            let dot: f64 = f[i].iter().zip(&f[j]).map(|(x, y)| x * y).sum();
            c[i][j] = dot / (norm[i] * norm[j]);
        }
    }
    c
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Terms {
    A,
    AB,
    ABC,
}

pub fn agcn_layer(f: &Grid, adj: &Grid, w: &Grid, a: &[f64], slope: f64, terms: Terms) -> Grid {
    let mut total = adj.clone();
    if terms != Terms::A {
        let b = self_importance(&softmax_rows(&attention_scores(f, w, a, slope)));
        total = add(&total, &b);
    }
    if terms == Terms::ABC {
        total = add(&total, &cosine(f));
    }
    map(&matmul(&matmul(&total, f), w), |v| lrelu(v, slope))
}

pub fn cooccurrence(labels: &LabelMatrix) -> Grid {
    let (n, m) = (labels.rows(), labels.cols());
    let mut p = vec![vec![0.0; m]; m];
    for i in 0..m {
        let ni = (0..n).filter(|&s| labels.get(s, i)).count();
        if ni == 0 {
            continue;
        }
        for j in 0..m {
            let nij = (0..n).filter(|&s| labels.get(s, i) && labels.get(s, j)).count();
            p[i][j] = nij as f64 / ni as f64;
        }
    }
    p
}

pub fn threshold(p: &Grid, tau: f64) -> Grid {
    map(p, |v| if v >= tau { 1.0 } else { 0.0 })
}

pub fn sym_normalize(a: &Grid) -> Grid {
    let n = a.len();
    let mut ai = a.clone();
    for (i, row) in ai.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    let d: Vec<f64> = ai.iter().map(|r| r.iter().sum::<f64>()).collect();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            out[i][j] = ai[i][j] / (d[i].sqrt() * d[j].sqrt());
        }
    }
    out
}

pub fn row_normalize(a: &Grid) -> Grid {
    a.iter()
        .map(|r| {
            let s: f64 = r.iter().sum();
            if s == 0.0 {
                r.clone()
            } else {
                r.iter().map(|v| v / s).collect()
            }
        })
        .collect()
}

/// Affine-LReLU stack; no activation after the last layer.
pub fn mlp(x: &Grid, weights: &[Grid], biases: &[Vec<f64>], slope: f64) -> Grid {
    let mut h = x.clone();
    for (k, (w, b)) in weights.iter().zip(biases).enumerate() {
        h = matmul(&h, w);
        for row in h.iter_mut() {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        if k + 1 < weights.len() {
            h = map(&h, |v| lrelu(v, slope));
        }
    }
    h
}

/// Non-interpolated AP by full rescan: for each positive, count every
/// sample ranked at or above it.
pub fn ap_bruteforce(scores: &[f64], targets: &[u8]) -> Option<f64> {
    let n = scores.len();
    let ahead = |i: usize, j: usize| scores[i] > scores[j] || (scores[i] == scores[j] && i <= j);
    let positives: Vec<usize> = (0..n).filter(|&j| targets[j] == 1).collect();
    if positives.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &j in &positives {
        let rank = (0..n).filter(|&i| ahead(i, j)).count();
        let hits = (0..n).filter(|&i| ahead(i, j) && targets[i] == 1).count();
        sum += hits as f64 / rank as f64;
    }
    Some(sum / positives.len() as f64)
}

pub struct PrfOracle {
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn prf_threshold(scores: &Grid, targets: &LabelMatrix, t: f64) -> PrfOracle {
    let (n, m) = (scores.len(), scores[0].len());
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    let (mut cp, mut cr) = (0.0, 0.0);
    for j in 0..m {
        let pred: Vec<bool> = (0..n).map(|i| scores[i][j] >= t).collect();
        let ctp = (0..n).filter(|&i| pred[i] && targets.get(i, j)).count();
        let cnp = pred.iter().filter(|&&p| p).count();
        let cng = (0..n).filter(|&i| targets.get(i, j)).count();
        cp += ratio(ctp, cnp);
        cr += ratio(ctp, cng);
        tp += ctp;
        np += cnp;
        ng += cng;
    }
    let (cp, cr) = (cp / m as f64, cr / m as f64);
    let (op, or) = (ratio(tp, np), ratio(tp, ng));
    PrfOracle {
        cp,
        cr,
        cf1: f1(cp, cr),
        op,
        or,
        of1: f1(op, or),
    }
}
