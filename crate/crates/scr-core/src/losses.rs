//! Training criteria: frame-level cross-entropy, CTC forward-backward over
//! blank-augmented label sequences, the sequence-level misclassification
//! measure with its smoothed zero-one loss, and the multi-task combination.
//!
//! Every operation returns exact gradients with respect to the pre-softmax
//! logits, assuming the supplied log-posteriors are a per-frame log-softmax.

use crate::error::{Error, Result};
use crate::numerics::{is_log_zero, log_add, log_sum_exp, Matrix, LOG_ZERO};

/// Log-domain forward/backward tables over the blank-augmented sequence l'.
///
/// Both tables include the emission at their own frame, so paths through
/// (t, s) carry probability `alpha[t][s] * beta[t][s] / y_t(l'_s)` and
/// `log Σ_s alpha[t][s] + beta[t][s] - y_t(l'_s)` is the total log-likelihood
/// at every frame.
#[derive(Debug, Clone)]
pub struct CtcTrellis {
    /// Original label sequence.
    pub label: Vec<usize>,
    /// Blank-interleaved sequence, length 2|label|+1.
    pub augmented: Vec<usize>,
    /// T x |l'| forward table.
    pub alpha: Matrix,
    /// T x |l'| backward table.
    pub beta: Matrix,
    /// Total log-likelihood log p(label | x).
    pub log_likelihood: f64,
}

impl CtcTrellis {
    /// Total log-likelihood computed from frame `t` alone; equal to
    /// [`CtcTrellis::log_likelihood`] at every frame (within roundoff).
    pub fn frame_log_likelihood(&self, t: usize, log_post: &Matrix) -> f64 {
        let m = self.augmented.len();
        let mut terms = Vec::with_capacity(m);
        for s in 0..m {
            let a = self.alpha[(t, s)];
            let b = self.beta[(t, s)];
            if is_log_zero(a) || is_log_zero(b) {
                terms.push(LOG_ZERO);
            } else {
                terms.push(a + b - log_post[(t, self.augmented[s])]);
            }
        }
        log_sum_exp(&terms)
    }
}

/// Negative log-likelihood and its gradient with respect to logits.
#[derive(Debug, Clone)]
pub struct CtcResult {
    pub nll: f64,
    pub grad_logits: Matrix,
}

/// Fewest frames that can carry `label`: one per symbol plus one separating
/// blank per adjacent repeat.
pub fn ctc_min_frames(label: &[usize]) -> usize {
    let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
    label.len() + repeats
}

fn check_label(label: &[usize], units: usize, blank: usize) -> Result<()> {
    for &l in label {
        if l >= units {
            return Err(Error::LabelOutOfRange { label: l, units });
        }
        if l == blank {
            return Err(Error::Invalid(format!(
                "label contains the blank id {blank}"
            )));
        }
    }
    Ok(())
}

/// Runs the log-domain forward and backward recursions for `label` over a
/// T x U table of per-frame log-posteriors (blank id = `blank`).
pub fn ctc_trellis(log_post: &Matrix, label: &[usize], blank: usize) -> Result<CtcTrellis> {
    let t_len = log_post.rows();
    let units = log_post.cols();
    check_label(label, units, blank)?;
    let needed = ctc_min_frames(label);
    if t_len < needed {
        return Err(Error::CtcInfeasible {
            needed,
            got: t_len,
        });
    }

    let mut augmented = Vec::with_capacity(2 * label.len() + 1);
    augmented.push(blank);
    for &l in label {
        augmented.push(l);
        augmented.push(blank);
    }
    let m = augmented.len();

    let mut alpha = Matrix::zeros(t_len, m);
    alpha.fill(LOG_ZERO);
    alpha[(0, 0)] = log_post[(0, augmented[0])];
    if m > 1 {
        alpha[(0, 1)] = log_post[(0, augmented[1])];
    }
    for t in 1..t_len {
        for s in 0..m {
            let mut acc = alpha[(t - 1, s)];
            if s >= 1 {
                acc = log_add(acc, alpha[(t - 1, s - 1)]);
            }
            if s >= 2 && augmented[s] != blank && augmented[s] != augmented[s - 2] {
                acc = log_add(acc, alpha[(t - 1, s - 2)]);
            }
            alpha[(t, s)] = if is_log_zero(acc) {
                LOG_ZERO
            } else {
                acc + log_post[(t, augmented[s])]
            };
        }
    }

    let mut beta = Matrix::zeros(t_len, m);
    beta.fill(LOG_ZERO);
    beta[(t_len - 1, m - 1)] = log_post[(t_len - 1, augmented[m - 1])];
    if m > 1 {
        beta[(t_len - 1, m - 2)] = log_post[(t_len - 1, augmented[m - 2])];
    }
    for t in (0..t_len.saturating_sub(1)).rev() {
        for s in 0..m {
            let mut acc = beta[(t + 1, s)];
            if s + 1 < m {
                acc = log_add(acc, beta[(t + 1, s + 1)]);
            }
            if s + 2 < m && augmented[s + 2] != blank && augmented[s + 2] != augmented[s] {
                acc = log_add(acc, beta[(t + 1, s + 2)]);
            }
            beta[(t, s)] = if is_log_zero(acc) {
                LOG_ZERO
            } else {
                acc + log_post[(t, augmented[s])]
            };
        }
    }

    let log_likelihood = if m > 1 {
        log_add(alpha[(t_len - 1, m - 1)], alpha[(t_len - 1, m - 2)])
    } else {
        alpha[(t_len - 1, m - 1)]
    };
    if is_log_zero(log_likelihood) {
        // Cannot happen with finite log-posteriors and a feasible length,
        // but guard against sentinel-filled inputs.
        return Err(Error::CtcInfeasible {
            needed,
            got: t_len,
        });
    }

    Ok(CtcTrellis {
        label: label.to_vec(),
        augmented,
        alpha,
        beta,
        log_likelihood,
    })
}

/// CTC negative log-likelihood of `label` plus the gradient of the NLL with
/// respect to the pre-softmax logits. Unalignable labels (T too short) are a
/// hard error, never a silent sentinel.
pub fn ctc_loss(log_post: &Matrix, label: &[usize], blank: usize) -> Result<CtcResult> {
    let trellis = ctc_trellis(log_post, label, blank)?;
    let t_len = log_post.rows();
    let units = log_post.cols();
    let m = trellis.augmented.len();
    let log_p = trellis.log_likelihood;

    // Occupancy per (frame, unit) in log space, then grad = softmax - occupancy.
    let mut grad = Matrix::zeros(t_len, units);
    let mut occ_log = vec![LOG_ZERO; units];
    for t in 0..t_len {
        occ_log.fill(LOG_ZERO);
        for s in 0..m {
            let a = trellis.alpha[(t, s)];
            let b = trellis.beta[(t, s)];
            if is_log_zero(a) || is_log_zero(b) {
                continue;
            }
            let u = trellis.augmented[s];
            let mass = a + b - log_post[(t, u)];
            occ_log[u] = log_add(occ_log[u], mass);
        }
        let row = grad.row_mut(t);
        for u in 0..units {
            let occupancy = if is_log_zero(occ_log[u]) {
                0.0
            } else {
                (occ_log[u] - log_p).exp()
            };
            row[u] = log_post[(t, u)].exp() - occupancy;
        }
    }

    Ok(CtcResult {
        nll: -log_p,
        grad_logits: grad,
    })
}

/// Mean per-frame negative log-posterior of the given frame labels, with the
/// gradient `(softmax - onehot) / T` per frame.
pub fn ce_frame_loss(log_post: &Matrix, frame_labels: &[usize]) -> Result<(f64, Matrix)> {
    let t_len = log_post.rows();
    let units = log_post.cols();
    if frame_labels.len() != t_len {
        return Err(Error::ShapeMismatch(format!(
            "{} frame labels for {} frames",
            frame_labels.len(),
            t_len
        )));
    }
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(t_len, units);
    let scale = 1.0 / t_len as f64;
    for (t, &label) in frame_labels.iter().enumerate() {
        if label >= units {
            return Err(Error::LabelOutOfRange { label, units });
        }
        loss -= log_post[(t, label)];
        let row = grad.row_mut(t);
        for u in 0..units {
            row[u] = log_post[(t, u)].exp() * scale;
        }
        row[label] -= scale;
    }
    Ok((loss * scale, grad))
}

/// Misclassification measure d = nll_target / Σ nll_confusers and its
/// partial derivatives.
#[derive(Debug, Clone)]
pub struct Measure {
    pub d: f64,
    /// ∂d/∂nll_target.
    pub d_target: f64,
    /// ∂d/∂nll_confuser for each confuser, in input order.
    pub d_confusers: Vec<f64>,
}

const DENOMINATOR_EPS: f64 = 1e-8;

/// Ratio of the target command's CTC negative log-likelihood to the summed
/// confuser NLLs. Driving d down pushes target likelihood up relative to the
/// confusing set.
pub fn msce_measure(nll_target: f64, nll_confusers: &[f64]) -> Result<Measure> {
    if nll_confusers.is_empty() {
        return Err(Error::EmptyConfusers);
    }
    if !nll_target.is_finite() || nll_confusers.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite loss input to measure".into()));
    }
    let denom: f64 = nll_confusers.iter().sum();
    if denom.abs() <= DENOMINATOR_EPS {
        return Err(Error::DegenerateDenominator(DENOMINATOR_EPS));
    }
    let d = nll_target / denom;
    let d_target = 1.0 / denom;
    let d_confusers = nll_confusers
        .iter()
        .map(|_| -nll_target / (denom * denom))
        .collect();
    Ok(Measure {
        d,
        d_target,
        d_confusers,
    })
}

/// Steepness/translation/mixing constants of the sequence-level criterion.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MsceLossConfig {
    /// Sigmoid steepness ξ > 0.
    pub xi: f64,
    /// Sigmoid translation α.
    pub alpha_shift: f64,
    /// Multi-task mixing weight β in [0, 1].
    pub beta_mix: f64,
}

impl Default for MsceLossConfig {
    fn default() -> Self {
        MsceLossConfig {
            xi: 1.0,
            alpha_shift: 0.0,
            beta_mix: 0.8,
        }
    }
}

impl MsceLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0) {
            return Err(Error::Config(format!("xi must be > 0, got {}", self.xi)));
        }
        if !(0.0..=1.0).contains(&self.beta_mix) {
            return Err(Error::Config(format!(
                "beta_mix must be in [0, 1], got {}",
                self.beta_mix
            )));
        }
        Ok(())
    }
}

/// Smoothed zero-one loss 1 / (1 + e^(-ξ(d + α))) and its derivative
/// ξ·L·(1-L) with respect to d.
pub fn msce_sigmoid_loss(d: f64, config: &MsceLossConfig) -> (f64, f64) {
    debug_assert!(config.xi > 0.0);
    let z = config.xi * (d + config.alpha_shift);
    // Evaluate in the numerically safe branch.
    let loss = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    (loss, config.xi * loss * (1.0 - loss))
}

/// Multi-task total β·L_seq + (1-β)·L_ce.
pub fn combined_loss(msce_loss: f64, ce_loss: f64, config: &MsceLossConfig) -> f64 {
    config.beta_mix * msce_loss + (1.0 - config.beta_mix) * ce_loss
}

/// Per-example sequence-level loss composed through the measure and sigmoid.
#[derive(Debug, Clone)]
pub struct MsceExample {
    /// Sigmoid loss in (0,1), or the raw target NLL under CTC fallback.
    pub loss: f64,
    /// Gradient of `loss` with respect to the pre-softmax logits.
    pub grad_logits: Matrix,
    /// Measure value; absent when every confuser was dropped.
    pub d: Option<f64>,
    /// Confusers dropped because their label did not fit in T frames.
    pub dropped_confusers: usize,
    /// Target CTC negative log-likelihood.
    pub nll_target: f64,
}

/// Runs CTC for the target and each confuser on one log-posterior matrix and
/// chains the results through the measure and the sigmoid into a single
/// gradient. Unalignable confusers are dropped (counted); if none remain the
/// example falls back to plain target CTC.
pub fn msce_example_loss(
    log_post: &Matrix,
    target: &[usize],
    confusers: &[&[usize]],
    config: &MsceLossConfig,
    blank: usize,
) -> Result<MsceExample> {
    config.validate()?;
    if confusers.is_empty() {
        return Err(Error::EmptyConfusers);
    }
    let target_ctc = ctc_loss(log_post, target, blank)?;

    let mut kept = Vec::with_capacity(confusers.len());
    let mut dropped = 0usize;
    for states in confusers {
        match ctc_loss(log_post, states, blank) {
            Ok(res) => kept.push(res),
            Err(Error::CtcInfeasible { .. }) => dropped += 1,
            Err(e) => return Err(e),
        }
    }

    if kept.is_empty() {
        let nll = target_ctc.nll;
        return Ok(MsceExample {
            loss: nll,
            grad_logits: target_ctc.grad_logits,
            d: None,
            dropped_confusers: dropped,
            nll_target: nll,
        });
    }

    let nll_confusers: Vec<f64> = kept.iter().map(|r| r.nll).collect();
    let measure = msce_measure(target_ctc.nll, &nll_confusers)?;
    let (loss, dloss_dd) = msce_sigmoid_loss(measure.d, config);

    let t_len = log_post.rows();
    let units = log_post.cols();
    let mut grad = Matrix::zeros(t_len, units);
    {
        let out = grad.as_mut_slice();
        let tgt = target_ctc.grad_logits.as_slice();
        let w_target = dloss_dd * measure.d_target;
        for (o, &g) in out.iter_mut().zip(tgt) {
            *o = w_target * g;
        }
        for (res, &dk) in kept.iter().zip(&measure.d_confusers) {
            let w = dloss_dd * dk;
            for (o, &g) in out.iter_mut().zip(res.grad_logits.as_slice()) {
                *o += w * g;
            }
        }
    }

    Ok(MsceExample {
        loss,
        grad_logits: grad,
        d: Some(measure.d),
        dropped_confusers: dropped,
        nll_target: target_ctc.nll,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, softmax_log_into, stream_rng, streams};
    use crate::oracle;
    use rand::Rng;

    fn uniform_log_post(t: usize, u: usize) -> Matrix {
        let v = (1.0 / u as f64).ln();
        Matrix::from_fn(t, u, |_, _| v)
    }

    fn random_logits(t: usize, u: usize, seed: u64) -> Matrix {
        let mut rng = stream_rng(seed, streams::TEST);
        Matrix::from_fn(t, u, |_, _| rng.gen_range(-2.0..2.0))
    }

    fn log_softmax_rows(logits: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(logits.rows(), logits.cols());
        for t in 0..logits.rows() {
            let (row_in, row_out) = (logits.row(t).to_vec(), out.row_mut(t));
            softmax_log_into(&row_in, row_out);
        }
        out
    }

    #[test]
    fn ce_perfect_posterior_zero_loss() {
        let mut lp = Matrix::from_fn(2, 3, |_, _| -1e9);
        lp[(0, 1)] = 0.0;
        lp[(1, 2)] = 0.0;
        let (loss, _) = ce_frame_loss(&lp, &[1, 2]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn ce_uniform_posterior_is_ln_u() {
        let lp = uniform_log_post(5, 4);
        let (loss, _) = ce_frame_loss(&lp, &[0, 1, 2, 3, 0]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_label_out_of_range() {
        let lp = uniform_log_post(1, 4);
        assert!(matches!(
            ce_frame_loss(&lp, &[4]),
            Err(Error::LabelOutOfRange { label: 4, units: 4 })
        ));
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let logits = random_logits(3, 4, 21);
        let labels = [2usize, 0, 3];
        let lp = log_softmax_rows(&logits);
        let (_, grad) = ce_frame_loss(&lp, &labels).unwrap();
        let err = finite_diff_check(
            |flat| {
                let m = Matrix::from_vec(3, 4, flat.to_vec());
                let lp = log_softmax_rows(&m);
                ce_frame_loss(&lp, &labels).unwrap().0
            },
            grad.as_slice(),
            logits.as_slice(),
            1e-5,
        );
        assert!(err <= 1e-6, "err = {err}");
    }

    #[test]
    fn ctc_single_frame_single_path() {
        // U = 2 (unit 0, blank 1), label [0], uniform 0.5: only path is "0".
        let lp = uniform_log_post(1, 2);
        let res = ctc_loss(&lp, &[0], 1).unwrap();
        assert!((res.nll - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ctc_two_frames_three_paths() {
        // Paths collapsing to "0": 00, 0-, -0 -> p = 3/4, nll = ln(4/3).
        let lp = uniform_log_post(2, 2);
        let res = ctc_loss(&lp, &[0], 1).unwrap();
        assert!((res.nll - (4.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_repeat_needs_separating_blank() {
        let lp = uniform_log_post(1, 2);
        assert!(matches!(
            ctc_loss(&lp, &[0, 0], 1),
            Err(Error::CtcInfeasible { needed: 3, got: 1 })
        ));
    }

    #[test]
    fn ctc_matches_brute_force_on_small_instances() {
        let mut rng = stream_rng(31, streams::TEST);
        for case in 0..60 {
            let t = rng.gen_range(1..=5);
            let u = rng.gen_range(2..=4);
            let blank = u - 1;
            let label_len = rng.gen_range(1..=3.min(t));
            let label: Vec<usize> = (0..label_len).map(|_| rng.gen_range(0..blank)).collect();
            if ctc_min_frames(&label) > t {
                continue;
            }
            let logits = random_logits(t, u, 1000 + case);
            let lp = log_softmax_rows(&logits);
            let dp = ctc_loss(&lp, &label, blank).unwrap().nll;
            let bf = oracle::ctc_nll_brute_force(&lp, &label, blank);
            assert!(
                (dp - bf).abs() <= 1e-9,
                "case {case}: dp={dp} bf={bf} label={label:?} t={t} u={u}"
            );
        }
    }

    #[test]
    fn ctc_gradient_rows_sum_to_zero() {
        let logits = random_logits(6, 4, 77);
        let lp = log_softmax_rows(&logits);
        let res = ctc_loss(&lp, &[0, 2, 1], 3).unwrap();
        for t in 0..6 {
            let s: f64 = res.grad_logits.row(t).iter().sum();
            assert!(s.abs() < 1e-10, "row {t} sums to {s}");
        }
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        let logits = random_logits(4, 3, 13);
        let label = [0usize, 1];
        let lp = log_softmax_rows(&logits);
        let res = ctc_loss(&lp, &label, 2).unwrap();
        let err = finite_diff_check(
            |flat| {
                let m = Matrix::from_vec(4, 3, flat.to_vec());
                let lp = log_softmax_rows(&m);
                ctc_loss(&lp, &label, 2).unwrap().nll
            },
            res.grad_logits.as_slice(),
            logits.as_slice(),
            1e-6,
        );
        assert!(err <= 1e-6, "err = {err}");
    }

    #[test]
    fn ctc_alpha_beta_frame_consistency() {
        let logits = random_logits(7, 4, 99);
        let lp = log_softmax_rows(&logits);
        let trellis = ctc_trellis(&lp, &[1, 0, 0, 2], 3).unwrap();
        for t in 0..7 {
            let per_frame = trellis.frame_log_likelihood(t, &lp);
            assert!(
                (per_frame - trellis.log_likelihood).abs() < 1e-8,
                "frame {t}: {per_frame} vs {}",
                trellis.log_likelihood
            );
        }
    }

    #[test]
    fn measure_trivial_values() {
        let m = msce_measure(1.0, &[1.0]).unwrap();
        assert!((m.d - 1.0).abs() < 1e-15);
        let m = msce_measure(2.0, &[1.0, 3.0]).unwrap();
        assert!((m.d - 0.5).abs() < 1e-15);
    }

    #[test]
    fn measure_errors() {
        assert!(matches!(msce_measure(1.0, &[]), Err(Error::EmptyConfusers)));
        assert!(matches!(
            msce_measure(1.0, &[1e-9]),
            Err(Error::DegenerateDenominator(_))
        ));
    }

    #[test]
    fn measure_partials_match_finite_differences() {
        let mut rng = stream_rng(41, streams::TEST);
        for _ in 0..20 {
            let target: f64 = rng.gen_range(0.5..5.0);
            let confusers: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..5.0)).collect();
            let m = msce_measure(target, &confusers).unwrap();
            let mut grad = vec![m.d_target];
            grad.extend(&m.d_confusers);
            let mut point = vec![target];
            point.extend(&confusers);
            let err = finite_diff_check(
                |x| msce_measure(x[0], &x[1..]).unwrap().d,
                &grad,
                &point,
                1e-6,
            );
            assert!(err <= 1e-8, "err = {err}");
        }
    }

    #[test]
    fn measure_scale_covariant() {
        let m1 = msce_measure(2.0, &[1.0, 3.0]).unwrap();
        let m2 = msce_measure(2.0 * 7.5, &[7.5, 22.5]).unwrap();
        assert!((m1.d - m2.d).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_closed_forms() {
        let cfg = MsceLossConfig::default();
        let (l, _) = msce_sigmoid_loss(0.0, &cfg);
        assert!((l - 0.5).abs() < 1e-15);
        let steep = MsceLossConfig {
            xi: 2.0,
            ..Default::default()
        };
        let (l, _) = msce_sigmoid_loss(1.0, &steep);
        assert!((l - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!((l - 0.880797).abs() < 1e-6);
        // Translation property: d = -alpha gives the midpoint for any xi.
        let shifted = MsceLossConfig {
            xi: 3.7,
            alpha_shift: 1.25,
            ..Default::default()
        };
        let (l, _) = msce_sigmoid_loss(-1.25, &shifted);
        assert!((l - 0.5).abs() < 1e-15);
    }

    #[test]
    fn combined_loss_values() {
        let cfg = MsceLossConfig::default();
        assert!((combined_loss(1.0, 2.0, &cfg) - 1.2).abs() < 1e-12);
        let pure_ce = MsceLossConfig {
            beta_mix: 0.0,
            ..Default::default()
        };
        assert_eq!(combined_loss(5.0, 2.0, &pure_ce), 2.0);
        let pure_seq = MsceLossConfig {
            beta_mix: 1.0,
            ..Default::default()
        };
        assert_eq!(combined_loss(5.0, 2.0, &pure_seq), 5.0);
    }

    #[test]
    fn example_loss_gradient_matches_finite_differences() {
        let t = 6;
        let u = 4;
        let blank = 3;
        let logits = random_logits(t, u, 57);
        let target = vec![0usize, 1];
        let confusers: Vec<Vec<usize>> = vec![vec![1, 2], vec![2, 0, 1]];
        let refs: Vec<&[usize]> = confusers.iter().map(|c| c.as_slice()).collect();
        let cfg = MsceLossConfig::default();
        let lp = log_softmax_rows(&logits);
        let ex = msce_example_loss(&lp, &target, &refs, &cfg, blank).unwrap();
        assert_eq!(ex.dropped_confusers, 0);
        let err = finite_diff_check(
            |flat| {
                let m = Matrix::from_vec(t, u, flat.to_vec());
                let lp = log_softmax_rows(&m);
                msce_example_loss(&lp, &target, &refs, &cfg, blank)
                    .unwrap()
                    .loss
            },
            ex.grad_logits.as_slice(),
            logits.as_slice(),
            1e-5,
        );
        assert!(err <= 1e-4, "err = {err}");
    }

    #[test]
    fn example_loss_decreases_as_target_is_favored() {
        // Strengthen the target's states in the logits: d = nll_t / Σ nll_c
        // falls toward 0 and the sigmoid loss falls monotonically toward its
        // 0.5 floor (d stays positive because both NLLs are positive).
        let t = 8;
        let u = 4;
        let blank = 3;
        let target = vec![0usize, 1];
        let confusers: Vec<Vec<usize>> = vec![vec![2, 1], vec![2]];
        let refs: Vec<&[usize]> = confusers.iter().map(|c| c.as_slice()).collect();
        let cfg = MsceLossConfig::default();
        let mut last = f64::INFINITY;
        for boost in [1.0, 2.0, 4.0, 8.0] {
            let logits = Matrix::from_fn(t, u, |i, j| {
                let on_target = if i < t / 2 { j == 0 } else { j == 1 };
                if on_target {
                    boost
                } else {
                    0.0
                }
            });
            let lp = log_softmax_rows(&logits);
            let ex = msce_example_loss(&lp, &target, &refs, &cfg, blank).unwrap();
            assert!(ex.loss < last, "boost {boost}: {} !< {last}", ex.loss);
            last = ex.loss;
        }
        assert!(last > 0.5 && last < 0.51, "expected convergence to 0.5, got {last}");
    }

    #[test]
    fn example_loss_degenerate_confuser_equals_target() {
        // Forbidden upstream, but the arithmetic is well-defined: the ratio
        // of equal NLLs is exactly 1 regardless of the logits.
        let mut rng = stream_rng(91, streams::TEST);
        for case in 0..5 {
            let logits = random_logits(5, 4, 400 + case);
            let lp = log_softmax_rows(&logits);
            let target = vec![0usize, 2];
            let refs: Vec<&[usize]> = vec![&target];
            let ex =
                msce_example_loss(&lp, &target, &refs, &MsceLossConfig::default(), 3).unwrap();
            assert!((ex.d.unwrap() - 1.0).abs() < 1e-12);
            let _ = &mut rng;
        }
    }

    #[test]
    fn example_loss_falls_back_when_all_confusers_drop() {
        let lp = uniform_log_post(2, 3);
        let target = vec![0usize];
        // Needs 4 frames; only 2 available.
        let long: Vec<usize> = vec![1, 1, 1];
        let refs: Vec<&[usize]> = vec![&long];
        let cfg = MsceLossConfig::default();
        let ex = msce_example_loss(&lp, &target, &refs, &cfg, 2).unwrap();
        assert_eq!(ex.dropped_confusers, 1);
        assert!(ex.d.is_none());
        assert!((ex.loss - ex.nll_target).abs() < 1e-12);
    }
}

