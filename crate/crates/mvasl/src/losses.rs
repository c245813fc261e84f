//! Two-way multi-label loss (sample-wise + class-wise), generalized
//! cross-entropy actionness loss, and the combined training objective.
//!
//! Each loss is implemented once, on the tape, so the trained path and the
//! value returned to callers can never drift apart; the pure `f64` entry
//! points evaluate on a throwaway tape.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("labels must have one entry per logit: {logits} logits vs {labels} labels")]
    LabelShape { logits: usize, labels: usize },
    #[error("logit matrix must have at least one sample")]
    Empty,
    #[error("q must lie in (0, 1], got {0}")]
    InvalidQ(f64),
    #[error("gamma must be positive, got {0}")]
    InvalidGamma(f64),
    #[error("alpha must be non-negative, got {0}")]
    InvalidAlpha(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// Scalar hyperparameters governing the objective. `k` defaults to
/// `ceil(T / 8)` when unset, resolved against the frame count in use.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub q: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub k: Option<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 1.0, gamma: 4.0, q: 0.7, beta1: 1.0, beta2: 1.0, k: None }
    }
}

impl LossConfig {
    pub fn resolve_k(&self, frames: usize) -> usize {
        self.k.unwrap_or(frames.div_ceil(8)).clamp(1, frames.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma <= 0.0 {
            return Err(LossError::InvalidGamma(self.gamma));
        }
        if self.q <= 0.0 || self.q > 1.0 {
            return Err(LossError::InvalidQ(self.q));
        }
        if self.alpha < 0.0 {
            return Err(LossError::InvalidAlpha(self.alpha));
        }
        Ok(())
    }
}

/// Logits over a batch of samples with their binary label matrix. Rows are
/// samples, columns classes; `labels[m * C + c]` marks class `c` positive
/// for sample `m`.
#[derive(Debug, Clone)]
pub struct LogitMatrix {
    pub logits: Tensor,
    pub labels: Vec<bool>,
}

impl LogitMatrix {
    pub fn new(logits: Tensor, labels: Vec<bool>) -> Result<Self> {
        if logits.rows() == 0 {
            return Err(LossError::Empty);
        }
        if logits.numel() != labels.len() {
            return Err(LossError::LabelShape { logits: logits.numel(), labels: labels.len() });
        }
        Ok(LogitMatrix { logits, labels })
    }

    pub fn samples(&self) -> usize {
        self.logits.rows()
    }

    pub fn classes(&self) -> usize {
        self.logits.cols()
    }

    fn label(&self, m: usize, c: usize) -> bool {
        self.labels[m * self.classes() + c]
    }
}

/// One softplus(log-sum-exp) discrimination term over a positive/negative
/// split of entries from `x`; `None` when either side is empty (such terms
/// contribute zero).
fn discrimination_term<'t>(
    x: Var<'t>,
    pos: &[(usize, usize)],
    neg: &[(usize, usize)],
    gamma: f64,
) -> Result<Option<Var<'t>>> {
    if pos.is_empty() || neg.is_empty() {
        return Ok(None);
    }
    let neg_lse = x.gather(neg)?.logsumexp_all()?;
    let pos_lse = x.gather(pos)?.affine(-1.0 / gamma, 0.0)?.logsumexp_all()?.affine(gamma, 0.0)?;
    Ok(Some(neg_lse.add(pos_lse)?.softplus()?))
}

fn mean_of_terms<'t>(tape: &'t Tape, terms: Vec<Var<'t>>, denom: usize) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for t in terms {
        acc = Some(match acc {
            Some(a) => a.add(t)?,
            None => t,
        });
    }
    match acc {
        Some(a) => Ok(a.affine(1.0 / denom as f64, 0.0)?),
        None => Ok(tape.leaf(Tensor::scalar(0.0))?),
    }
}

/// Sample-wise discrimination: for each sample, softplus of the combined
/// log-sum-exp of its negative-class logits and temperature-scaled
/// positive-class logits, averaged over all samples.
pub fn sample_wise_loss_var<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    lm: &LogitMatrix,
    gamma: f64,
) -> Result<Var<'t>> {
    if gamma <= 0.0 {
        return Err(LossError::InvalidGamma(gamma));
    }
    let (m_count, c_count) = (lm.samples(), lm.classes());
    let mut terms = Vec::new();
    for m in 0..m_count {
        let pos: Vec<(usize, usize)> = (0..c_count).filter(|&c| lm.label(m, c)).map(|c| (m, c)).collect();
        let neg: Vec<(usize, usize)> = (0..c_count).filter(|&c| !lm.label(m, c)).map(|c| (m, c)).collect();
        if let Some(term) = discrimination_term(x, &pos, &neg, gamma)? {
            terms.push(term);
        }
    }
    mean_of_terms(tape, terms, m_count)
}

/// Class-wise discrimination: the sample-wise form with the roles of
/// samples and classes transposed, averaged over classes.
pub fn class_wise_loss_var<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    lm: &LogitMatrix,
    gamma: f64,
) -> Result<Var<'t>> {
    if gamma <= 0.0 {
        return Err(LossError::InvalidGamma(gamma));
    }
    let (m_count, c_count) = (lm.samples(), lm.classes());
    let mut terms = Vec::new();
    for c in 0..c_count {
        let pos: Vec<(usize, usize)> = (0..m_count).filter(|&m| lm.label(m, c)).map(|m| (m, c)).collect();
        let neg: Vec<(usize, usize)> = (0..m_count).filter(|&m| !lm.label(m, c)).map(|m| (m, c)).collect();
        if let Some(term) = discrimination_term(x, &pos, &neg, gamma)? {
            terms.push(term);
        }
    }
    mean_of_terms(tape, terms, c_count)
}

/// Two-way loss: sample-wise plus `alpha` times class-wise.
pub fn two_way_loss_var<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    lm: &LogitMatrix,
    alpha: f64,
    gamma: f64,
) -> Result<Var<'t>> {
    if alpha < 0.0 {
        return Err(LossError::InvalidAlpha(alpha));
    }
    let sample = sample_wise_loss_var(tape, x, lm, gamma)?;
    let class = class_wise_loss_var(tape, x, lm, gamma)?;
    Ok(sample.add(class.affine(alpha, 0.0)?)?)
}

/// Generalized cross-entropy actionness loss over per-frame probabilities.
/// `probs` is a `[T, 1]` column of actionness probabilities; empty positive
/// or negative sets contribute zero.
pub fn gce_actionness_loss_var<'t>(
    tape: &'t Tape,
    probs: Var<'t>,
    pos: &[usize],
    neg: &[usize],
    q: f64,
) -> Result<Var<'t>> {
    if q <= 0.0 || q > 1.0 {
        return Err(LossError::InvalidQ(q));
    }
    let mut total: Option<Var<'t>> = None;
    // (1 - p^q) / q over positives, (1 - (1-p)^q) / q over negatives.
    for (set, flip) in [(pos, false), (neg, true)] {
        if set.is_empty() {
            continue;
        }
        let idx: Vec<(usize, usize)> = set.iter().map(|&t| (t, 0)).collect();
        let mut p = probs.gather(&idx)?;
        if flip {
            p = p.affine(-1.0, 1.0)?;
        }
        let term = p.powf(q)?.affine(-1.0 / q, 1.0 / q)?.mean_all()?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.leaf(Tensor::scalar(0.0))?),
    }
}

// ---- pure-value entry points -------------------------------------------

pub fn sample_wise_loss(lm: &LogitMatrix, gamma: f64) -> Result<f64> {
    let tape = Tape::new();
    let x = tape.leaf(lm.logits.clone())?;
    Ok(sample_wise_loss_var(&tape, x, lm, gamma)?.scalar_value()?)
}

pub fn class_wise_loss(lm: &LogitMatrix, gamma: f64) -> Result<f64> {
    let tape = Tape::new();
    let x = tape.leaf(lm.logits.clone())?;
    Ok(class_wise_loss_var(&tape, x, lm, gamma)?.scalar_value()?)
}

pub fn two_way_loss(lm: &LogitMatrix, alpha: f64, gamma: f64) -> Result<f64> {
    let tape = Tape::new();
    let x = tape.leaf(lm.logits.clone())?;
    Ok(two_way_loss_var(&tape, x, lm, alpha, gamma)?.scalar_value()?)
}

/// Per-sample actionness probabilities with their pseudo ground-truth
/// positive/negative frame sets.
#[derive(Debug, Clone)]
pub struct ActionnessSample {
    pub probs: Tensor,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

pub fn gce_actionness_loss(probs: &Tensor, pos: &[usize], neg: &[usize], q: f64) -> Result<f64> {
    let tape = Tape::new();
    let p = tape.leaf(probs.clone())?;
    Ok(gce_actionness_loss_var(&tape, p, pos, neg, q)?.scalar_value()?)
}

/// The combined objective: view-level two-way loss plus `beta1` times the
/// frame-level two-way loss plus `beta2` times the mean actionness loss
/// over the provided samples.
pub fn overall_loss(
    view: &LogitMatrix,
    frame: &LogitMatrix,
    actionness: &[ActionnessSample],
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let view_term = two_way_loss(view, cfg.alpha, cfg.gamma)?;
    let frame_term = two_way_loss(frame, cfg.alpha, cfg.gamma)?;
    let mut act_term = 0.0;
    if !actionness.is_empty() {
        for s in actionness {
            act_term += gce_actionness_loss(&s.probs, &s.pos, &s.neg, cfg.q)?;
        }
        act_term /= actionness.len() as f64;
    }
    Ok(view_term + cfg.beta1 * frame_term + cfg.beta2 * act_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients, grad_of, sigmoid, FD_STEP, FD_TOLERANCE};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, c: usize) -> LogitMatrix {
        let logits =
            Tensor::new(vec![m, c], (0..m * c).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let mut labels: Vec<bool> = (0..m * c).map(|_| rng.gen_bool(0.4)).collect();
        // keep at least one positive and one negative per sample
        for i in 0..m {
            labels[i * c] = true;
            labels[i * c + 1] = false;
        }
        LogitMatrix::new(logits, labels).unwrap()
    }

    /// Direct, unvectorized transcription of the two discrimination sums.
    fn sample_wise_direct(lm: &LogitMatrix, gamma: f64) -> f64 {
        let (m_count, c_count) = (lm.samples(), lm.classes());
        let mut total = 0.0;
        for m in 0..m_count {
            let pos: Vec<f64> = (0..c_count).filter(|&c| lm.label(m, c)).map(|c| lm.logits.at(m, c)).collect();
            let neg: Vec<f64> = (0..c_count).filter(|&c| !lm.label(m, c)).map(|c| lm.logits.at(m, c)).collect();
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            let neg_sum: f64 = neg.iter().map(|x| x.exp()).sum();
            let pos_sum: f64 = pos.iter().map(|x| (-x / gamma).exp()).sum();
            let z = neg_sum.ln() + gamma * pos_sum.ln();
            total += (1.0 + z.exp()).ln();
        }
        total / m_count as f64
    }

    fn class_wise_direct(lm: &LogitMatrix, gamma: f64) -> f64 {
        let (m_count, c_count) = (lm.samples(), lm.classes());
        let mut total = 0.0;
        for c in 0..c_count {
            let pos: Vec<f64> = (0..m_count).filter(|&m| lm.label(m, c)).map(|m| lm.logits.at(m, c)).collect();
            let neg: Vec<f64> = (0..m_count).filter(|&m| !lm.label(m, c)).map(|m| lm.logits.at(m, c)).collect();
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            let neg_sum: f64 = neg.iter().map(|x| x.exp()).sum();
            let pos_sum: f64 = pos.iter().map(|x| (-x / gamma).exp()).sum();
            let z = neg_sum.ln() + gamma * pos_sum.ln();
            total += (1.0 + z.exp()).ln();
        }
        total / c_count as f64
    }

    #[test]
    fn zero_logits_single_sample_gives_ln_two() {
        let lm = LogitMatrix::new(Tensor::zeros(vec![1, 2]), vec![true, false]).unwrap();
        let loss = sample_wise_loss(&lm, 4.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn separated_logits_drive_loss_to_zero() {
        let lm = LogitMatrix::new(
            Tensor::from_rows(&[vec![40.0, -40.0]]).unwrap(),
            vec![true, false],
        )
        .unwrap();
        assert!(sample_wise_loss(&lm, 4.0).unwrap() < 1e-15);
    }

    #[test]
    fn sample_wise_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lm = random_matrix(&mut rng, 5, 4);
        let fast = sample_wise_loss(&lm, 4.0).unwrap();
        let direct = sample_wise_direct(&lm, 4.0);
        assert!((fast - direct).abs() / direct.abs().max(1e-12) < 1e-10);
    }

    #[test]
    fn class_wise_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lm = random_matrix(&mut rng, 6, 5);
        let fast = class_wise_loss(&lm, 4.0).unwrap();
        let direct = class_wise_direct(&lm, 4.0);
        assert!((fast - direct).abs() / direct.abs().max(1e-12) < 1e-10);
    }

    #[test]
    fn class_wise_is_sample_wise_of_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lm = random_matrix(&mut rng, 4, 6);
        let (m, c) = (lm.samples(), lm.classes());
        let mut t_labels = vec![false; m * c];
        for i in 0..m {
            for j in 0..c {
                t_labels[j * m + i] = lm.label(i, j);
            }
        }
        let transposed = LogitMatrix::new(lm.logits.transpose().unwrap(), t_labels).unwrap();
        let a = class_wise_loss(&lm, 4.0).unwrap();
        let b = sample_wise_loss(&transposed, 4.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn class_with_no_positives_contributes_zero() {
        // two classes, second has no positive samples; only class 0 contributes
        let lm = LogitMatrix::new(
            Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap(),
            vec![true, false, false, false],
        )
        .unwrap();
        let full = class_wise_loss(&lm, 4.0).unwrap();
        let class0 = LogitMatrix::new(
            Tensor::from_rows(&[vec![1.0], vec![-1.0]]).unwrap(),
            vec![true, false],
        )
        .unwrap();
        let only = class_wise_loss(&class0, 4.0).unwrap();
        // normalization is by the full class count
        assert!((full - only / 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_way_composition_and_alpha_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lm = random_matrix(&mut rng, 2, 2);
        let s = sample_wise_loss(&lm, 4.0).unwrap();
        let c = class_wise_loss(&lm, 4.0).unwrap();
        let tw0 = two_way_loss(&lm, 0.0, 4.0).unwrap();
        let tw1 = two_way_loss(&lm, 1.0, 4.0).unwrap();
        let tw2 = two_way_loss(&lm, 2.0, 4.0).unwrap();
        assert!((tw0 - s).abs() < 1e-12);
        assert!((tw1 - (s + c)).abs() < 1e-12);
        assert!((tw2 - tw1 - c).abs() < 1e-12);
    }

    #[test]
    fn gce_perfect_prediction_is_zero() {
        // sigmoid saturates to exactly 1.0/0.0 for very large logits
        let probs = Tensor::new(vec![4, 1], vec![1.0, 1.0, 1e-300, 1e-300]).unwrap();
        // p^q with p=1 gives 1 -> zero positive term; (1-p)^q with tiny p -> ~1
        let loss = gce_actionness_loss(&probs, &[0, 1], &[2, 3], 0.7).unwrap();
        assert!(loss < 1e-12, "{loss}");
    }

    #[test]
    fn gce_single_frame_matches_scalar_oracle() {
        let probs = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let loss = gce_actionness_loss(&probs, &[0], &[], 0.7).unwrap();
        let oracle = (1.0 - 0.5f64.powf(0.7)) / 0.7;
        assert!((loss - oracle).abs() < 1e-12);
        assert!((oracle - 0.549_2).abs() < 1e-4);
    }

    #[test]
    fn gce_at_q_one_is_mean_absolute_error() {
        let probs = Tensor::new(vec![3, 1], vec![0.2, 0.6, 0.9]).unwrap();
        let loss = gce_actionness_loss(&probs, &[0, 1], &[2], 1.0).unwrap();
        let mae = ((1.0 - 0.2) + (1.0 - 0.6)) / 2.0 + (1.0 - (1.0 - 0.9));
        assert!((loss - mae).abs() < 1e-12);
    }

    #[test]
    fn gce_gradient_smaller_than_bce_on_mislabeled_frame() {
        // positive frame with p -> 0 (logit -6); BCE gradient wrt logit is
        // sigmoid(x) - 1, GCE's must be strictly smaller in magnitude at q=0.7
        let logit = -6.0;
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![logit]).unwrap()).unwrap();
        let p = x.sigmoid().unwrap();
        let loss = gce_actionness_loss_var(&tape, p, &[0], &[], 0.7).unwrap();
        let g = grad_of(loss, &[x]).unwrap()[0].data()[0];
        let bce_grad = sigmoid(logit) - 1.0;
        assert!(g.abs() < bce_grad.abs(), "gce {} vs bce {}", g, bce_grad);
        assert!(g.abs() > 0.0);
    }

    #[test]
    fn overall_loss_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let view = random_matrix(&mut rng, 3, 4);
        let frame = random_matrix(&mut rng, 3, 4);
        let act = vec![ActionnessSample {
            probs: Tensor::new(vec![4, 1], vec![0.3, 0.8, 0.6, 0.2]).unwrap(),
            pos: vec![1, 2],
            neg: vec![0, 3],
        }];
        let cfg = LossConfig::default();
        let total = overall_loss(&view, &frame, &act, &cfg).unwrap();
        let v = two_way_loss(&view, cfg.alpha, cfg.gamma).unwrap();
        let f = two_way_loss(&frame, cfg.alpha, cfg.gamma).unwrap();
        let a = gce_actionness_loss(&act[0].probs, &act[0].pos, &act[0].neg, cfg.q).unwrap();
        assert!((total - (v + f + a)).abs() < 1e-12);

        let zeroed = LossConfig { beta1: 0.0, beta2: 0.0, ..LossConfig::default() };
        let only_view = overall_loss(&view, &frame, &act, &zeroed).unwrap();
        assert!((only_view - v).abs() < 1e-12);

        let double_b2 = LossConfig { beta2: 2.0, ..LossConfig::default() };
        let doubled = overall_loss(&view, &frame, &act, &double_b2).unwrap();
        assert!((doubled - total - a).abs() < 1e-12);
    }

    #[test]
    fn losses_stay_finite_at_extreme_logits() {
        let lm = LogitMatrix::new(
            Tensor::from_rows(&[vec![1e4, -1e4, 5e3, -5e3]]).unwrap(),
            vec![true, false, false, true],
        )
        .unwrap();
        let loss = two_way_loss(&lm, 1.0, 4.0).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn positive_logit_increase_decreases_sample_wise_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let lm = random_matrix(&mut rng, 3, 4);
            let base = sample_wise_loss(&lm, 4.0).unwrap();
            // bump a positive logit
            let (m, c) = (0, 0); // labels[0] forced true in random_matrix
            let mut data = lm.logits.data().to_vec();
            data[m * lm.classes() + c] += 0.5;
            let bumped =
                LogitMatrix::new(Tensor::new(vec![3, 4], data).unwrap(), lm.labels.clone()).unwrap();
            let after = sample_wise_loss(&bumped, 4.0).unwrap();
            assert!(after < base);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lm = random_matrix(&mut rng, 4, 5);
        let labels = lm.labels.clone();

        for (name, alpha) in [("sample+class", 1.0), ("sample_only", 0.0)] {
            let eval = |params: &[Tensor]| -> crate::numerics::Result<f64> {
                let lm = LogitMatrix::new(params[0].clone(), labels.clone()).unwrap();
                let tape = Tape::new();
                let x = tape.leaf(params[0].clone())?;
                let loss = two_way_loss_var(&tape, x, &lm, alpha, 4.0).unwrap();
                loss.scalar_value()
            };
            let tape = Tape::new();
            let x = tape.leaf(lm.logits.clone()).unwrap();
            let loss = two_way_loss_var(&tape, x, &lm, alpha, 4.0).unwrap();
            let analytic = grad_of(loss, &[x]).unwrap();
            let report = check_gradients(
                name,
                eval,
                &[lm.logits.clone()],
                &analytic,
                100,
                FD_STEP,
                FD_TOLERANCE,
                &mut rng,
            )
            .unwrap();
            assert!(report.passed(), "{}: max rel err {}", name, report.max_rel_err);
        }

        // GCE through the sigmoid
        let logits = Tensor::new(vec![6, 1], (0..6).map(|_| rng.gen_range(-2.5..2.5)).collect()).unwrap();
        let pos = vec![0, 2, 4];
        let neg = vec![1, 3, 5];
        let eval = |params: &[Tensor]| -> crate::numerics::Result<f64> {
            let tape = Tape::new();
            let x = tape.leaf(params[0].clone())?;
            let p = x.sigmoid()?;
            let loss = gce_actionness_loss_var(&tape, p, &pos, &neg, 0.7).unwrap();
            loss.scalar_value()
        };
        let tape = Tape::new();
        let x = tape.leaf(logits.clone()).unwrap();
        let p = x.sigmoid().unwrap();
        let loss = gce_actionness_loss_var(&tape, p, &pos, &neg, 0.7).unwrap();
        let analytic = grad_of(loss, &[x]).unwrap();
        let report = check_gradients(
            "gce",
            eval,
            &[logits],
            &analytic,
            100,
            FD_STEP,
            FD_TOLERANCE,
            &mut rng,
        )
        .unwrap();
        assert!(report.passed(), "gce: max rel err {}", report.max_rel_err);
    }
}
