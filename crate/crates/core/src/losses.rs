//! Asymmetric classification loss, domain loss and the combined objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMatrix;
use crate::numgrad::{DenseMatrix, NodeId, Tape};
use crate::scalar::Scalar;

/// Lower clamp applied to every log argument.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
    pub lambda_d: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            margin: 0.05,
            lambda_d: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.gamma_pos, self.gamma_neg, self.margin, self.lambda_d];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("loss parameters must be finite".into()));
        }
        if self.gamma_pos < 0.0 || self.gamma_neg < 0.0 {
            return Err(Error::Config("focusing parameters must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Config(format!("margin must lie in [0, 1), got {}", self.margin)));
        }
        if self.lambda_d < 0.0 {
            return Err(Error::Config("lambda_d must be >= 0".into()));
        }
        Ok(())
    }

    /// Plain binary cross-entropy settings.
    pub fn bce() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            margin: 0.0,
            lambda_d: 0.0,
        }
    }
}

fn targets_matrix<T: Scalar>(targets: &LabelMatrix) -> DenseMatrix<T> {
    DenseMatrix::from_fn(targets.rows(), targets.cols(), |i, j| {
        if targets.get(i, j) {
            T::one()
        } else {
            T::zero()
        }
    })
}

fn check_open_interval<T: Scalar>(tape: &Tape<T>, probs: NodeId, what: &str) -> Result<()> {
    if tape
        .value(probs)
        .data()
        .iter()
        .any(|&p| p <= T::zero() || p >= T::one())
    {
        return Err(Error::Contract(format!("{what} must lie strictly inside (0, 1)")));
    }
    Ok(())
}

/// `log(max(x, LOG_CLAMP))`.
fn clamped_log<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let c = tape.clamp_min(x, T::lit(LOG_CLAMP))?;
    tape.log(c)
}

fn focus<T: Scalar>(tape: &mut Tape<T>, base: NodeId, gamma: f64) -> Result<Option<NodeId>> {
    if gamma == 0.0 {
        Ok(None)
    } else {
        tape.pow_const(base, T::lit(gamma)).map(Some)
    }
}

fn weight_by<T: Scalar>(tape: &mut Tape<T>, x: NodeId, w: Option<NodeId>) -> Result<NodeId> {
    match w {
        Some(w) => tape.hadamard(x, w),
        None => Ok(x),
    }
}

/// Negated mean over samples of the per-sample sum over labels of
/// `y (1-p)^γ+ log p + (1-y) p_m^γ- log(1-p_m)`, `p_m = max(p - m, 0)`.
pub fn asl_loss<T: Scalar>(tape: &mut Tape<T>, probs: NodeId, targets: &LabelMatrix, cfg: &LossConfig) -> Result<NodeId> {
    check_open_interval(tape, probs, "probabilities")?;
    asl_loss_saturating(tape, probs, targets, cfg)
}

/// [`asl_loss`] without the open-interval check. Training uses this form
/// since sigmoid outputs may round to exactly 0 or 1; the log clamp keeps
/// every term finite.
pub fn asl_loss_saturating<T: Scalar>(
    tape: &mut Tape<T>,
    probs: NodeId,
    targets: &LabelMatrix,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let shape = tape.shape(probs);
    if shape != (targets.rows(), targets.cols()) {
        return Err(Error::shape("asl_loss", shape, (targets.rows(), targets.cols())));
    }
    let y_m = targets_matrix::<T>(targets);
    let not_y = y_m.map(|v| T::one() - v);
    let y = tape.constant(y_m)?;
    let not_y = tape.constant(not_y)?;

    let log_p = clamped_log(tape, probs)?;
    let one_minus_p = tape.rsub_scalar(T::one(), probs)?;
    let w_pos = focus(tape, one_minus_p, cfg.gamma_pos)?;
    let pos = weight_by(tape, log_p, w_pos)?;
    let pos = tape.hadamard(y, pos)?;

    let shifted = if cfg.margin > 0.0 {
        let s = tape.add_scalar(probs, T::lit(-cfg.margin))?;
        tape.clamp_min(s, T::zero())?
    } else {
        probs
    };
    let one_minus_pm = tape.rsub_scalar(T::one(), shifted)?;
    let log_q = clamped_log(tape, one_minus_pm)?;
    let w_neg = focus(tape, shifted, cfg.gamma_neg)?;
    let neg = weight_by(tape, log_q, w_neg)?;
    let neg = tape.hadamard(not_y, neg)?;

    let terms = tape.add(pos, neg)?;
    let total = tape.sum(terms)?;
    tape.scale(total, T::lit(-1.0 / shape.0 as f64))
}

/// Mean binary cross-entropy of domain predictions, `d = 0` source, `d = 1` target.
pub fn domain_loss<T: Scalar>(tape: &mut Tape<T>, d_hat: NodeId, domains: &[u8]) -> Result<NodeId> {
    check_open_interval(tape, d_hat, "domain predictions")?;
    domain_loss_saturating(tape, d_hat, domains)
}

pub fn domain_loss_saturating<T: Scalar>(tape: &mut Tape<T>, d_hat: NodeId, domains: &[u8]) -> Result<NodeId> {
    let shape = tape.shape(d_hat);
    if shape != (domains.len(), 1) {
        return Err(Error::shape("domain_loss", shape, (domains.len(), 1)));
    }
    if domains.iter().any(|&d| d > 1) {
        return Err(Error::Contract("domain labels must be 0 or 1".into()));
    }
    let d = DenseMatrix::from_fn(domains.len(), 1, |i, _| T::lit(domains[i] as f64));
    let not_d = d.map(|v| T::one() - v);
    let d = tape.constant(d)?;
    let not_d = tape.constant(not_d)?;
    let log_t = clamped_log(tape, d_hat)?;
    let one_minus = tape.rsub_scalar(T::one(), d_hat)?;
    let log_s = clamped_log(tape, one_minus)?;
    let a = tape.hadamard(not_d, log_s)?;
    let b = tape.hadamard(d, log_t)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.scale(m, -T::one())
}

/// `E[log 1/d̂ | source] + E[log 1/(1-d̂) | target]`, reported only.
/// Returns `None` unless both domains are present.
pub fn domain_loss_paper_form(d_hat: &[f64], domains: &[u8]) -> Option<f64> {
    let (mut s, mut ns, mut t, mut nt) = (0.0, 0usize, 0.0, 0usize);
    for (&p, &d) in d_hat.iter().zip(domains) {
        if d == 0 {
            s += -p.max(LOG_CLAMP).ln();
            ns += 1;
        } else {
            t += -(1.0 - p).max(LOG_CLAMP).ln();
            nt += 1;
        }
    }
    (ns > 0 && nt > 0).then(|| s / ns as f64 + t / nt as f64)
}

/// `l_c + λ l_d`.
pub fn total_objective<T: Scalar>(tape: &mut Tape<T>, l_c: NodeId, l_d: NodeId, lambda: T) -> Result<NodeId> {
    for (name, id) in [("classification", l_c), ("domain", l_d)] {
        if tape.shape(id) != (1, 1) {
            return Err(Error::Contract(format!("{name} loss must be scalar")));
        }
    }
    let weighted = tape.scale(l_d, lambda)?;
    tape.add(l_c, weighted)
}
