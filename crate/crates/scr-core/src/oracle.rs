//! Brute-force reference implementations used by the test suites.
//!
//! Everything here is deliberately naive and kept independent of the
//! production code paths it checks: CTC likelihood by explicit path
//! enumeration, and best-alignment search by a per-command dynamic program.

use crate::numerics::{log_add, Matrix, LOG_ZERO};

/// Collapses a frame-level path: merge consecutive repeats, then drop blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut last: Option<usize> = None;
    for &p in path {
        if Some(p) != last && p != blank {
            out.push(p);
        }
        last = Some(p);
    }
    out
}

/// CTC negative log-likelihood by enumerating all U^T alignment paths,
/// collapsing each, and summing the probability of those that match `label`.
/// Only usable for tiny T and U.
pub fn ctc_nll_brute_force(log_post: &Matrix, label: &[usize], blank: usize) -> f64 {
    let t_len = log_post.rows();
    let units = log_post.cols();
    let mut total = LOG_ZERO;
    let mut path = vec![0usize; t_len];
    loop {
        let lp: f64 = path
            .iter()
            .enumerate()
            .map(|(t, &u)| log_post[(t, u)])
            .sum();
        if collapse_path(&path, blank) == label {
            total = log_add(total, lp);
        }
        // Odometer increment over the U^T path space.
        let mut pos = 0;
        loop {
            if pos == t_len {
                return -total;
            }
            path[pos] += 1;
            if path[pos] < units {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// Best alignment of one command's emission-state chain against `T` frames
/// under token-passing semantics: waiting before the path starts costs the
/// blank score per frame (background), then per frame the path either stays
/// on the current state (scoring it, or the better of it and blank when
/// `blank_absorb` is set) or advances to the next state (scoring that
/// state). Returns the best accumulated log-score over alignments that have
/// consumed the whole chain by frame `T`, or None if `T` is too short.
pub fn best_alignment_score(
    log_post: &Matrix,
    states: &[usize],
    blank: usize,
    blank_absorb: bool,
) -> Option<f64> {
    let t_len = log_post.rows();
    let depth = states.len();
    if depth == 0 || t_len < depth {
        return None;
    }
    // dp[j] = best score having consumed j states after the current frame.
    let mut dp = vec![LOG_ZERO; depth + 1];
    dp[0] = 0.0;
    let mut next = vec![LOG_ZERO; depth + 1];
    for t in 0..t_len {
        for j in 0..=depth {
            // Stay: the start position absorbs the frame as background at
            // the blank score; a state position re-scores its own state
            // (or blank when absorbed).
            let stay = if j == 0 {
                dp[0] + log_post[(t, blank)]
            } else {
                let mut emit = log_post[(t, states[j - 1])];
                if blank_absorb {
                    emit = emit.max(log_post[(t, blank)]);
                }
                dp[j] + emit
            };
            // Advance into state j (1-based) consuming this frame on it.
            let advance = if j == 0 {
                LOG_ZERO
            } else {
                dp[j - 1] + log_post[(t, states[j - 1])]
            };
            next[j] = stay.max(advance);
        }
        std::mem::swap(&mut dp, &mut next);
    }
    let best = dp[depth];
    if best <= LOG_ZERO / 2.0 {
        None
    } else {
        Some(best)
    }
}

/// Exhaustive decode: the best (average-per-state score, command) over a set
/// of command state chains, with ties broken by smaller command id.
pub fn best_command_exhaustive(
    log_post: &Matrix,
    paths: &[(Vec<usize>, usize)],
    blank: usize,
    blank_absorb: bool,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (states, command) in paths {
        if let Some(score) = best_alignment_score(log_post, states, blank, blank_absorb) {
            let avg = score / states.len() as f64;
            best = match best {
                None => Some((*command, avg)),
                Some((bc, bs)) => {
                    if avg > bs || (avg == bs && *command < bc) {
                        Some((*command, avg))
                    } else {
                        Some((bc, bs))
                    }
                }
            };
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_merges_then_drops_blanks() {
        // "a a - a" collapses to "a a": the blank separates the repeat.
        assert_eq!(collapse_path(&[0, 0, 2, 0], 2), vec![0, 0]);
        assert_eq!(collapse_path(&[2, 2, 2], 2), Vec::<usize>::new());
        assert_eq!(collapse_path(&[1, 1, 1, 0], 2), vec![1, 0]);
    }

    #[test]
    fn brute_force_single_frame() {
        let lp = Matrix::from_fn(1, 2, |_, _| 0.5f64.ln());
        let nll = ctc_nll_brute_force(&lp, &[0], 1);
        assert!((nll - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn alignment_rejects_short_inputs() {
        let lp = Matrix::from_fn(2, 3, |_, _| (1.0f64 / 3.0).ln());
        assert!(best_alignment_score(&lp, &[0, 1, 0], 2, true).is_none());
    }

    #[test]
    fn alignment_one_hot_scores_zero() {
        // Frame t is one-hot on state t: a 3-state chain aligns at log 1 = 0.
        let mut lp = Matrix::from_fn(3, 4, |_, _| -1e9);
        lp[(0, 0)] = 0.0;
        lp[(1, 1)] = 0.0;
        lp[(2, 2)] = 0.0;
        let score = best_alignment_score(&lp, &[0, 1, 2], 3, false).unwrap();
        assert_eq!(score, 0.0);
    }
}
