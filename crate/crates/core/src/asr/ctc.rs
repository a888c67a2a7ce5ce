use super::vocab::{Vocab, BLANK};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Fewest frames that can emit `target`: one per label plus a blank between
/// each pair of repeated labels.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under `log_probs` (`[T, C]`, rows
/// are log-distributions) and its gradient with respect to `log_probs`.
pub fn ctc_nll(log_probs: &[f64], frames: usize, classes: usize, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    if log_probs.len() != frames * classes {
        return Err(Error::Shape(format!(
            "ctc: {} values for {frames}x{classes}",
            log_probs.len()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&c| c == BLANK || c >= classes) {
        return Err(Error::invalid(format!("ctc: target class {bad} is blank or out of range")));
    }
    if min_frames(target) > frames {
        return Err(Error::invalid(format!(
            "ctc: target of length {} needs at least {} frames, got {frames}",
            target.len(),
            min_frames(target)
        )));
    }
    let lp = |t: usize, c: usize| log_probs[t * classes + c];
    // Blank-augmented labels: b y1 b y2 ... yL b.
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s.is_multiple_of(2) { BLANK } else { target[s / 2] };
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && label(s) != label(s - 2);
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, BLANK);
    if s_len > 1 {
        alpha[1] = lp(0, label(1));
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, label(s)) };
        }
    }
    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = lp(frames - 1, BLANK);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(frames - 1, label(s_len - 2));
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp(t, label(s)) };
        }
    }
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::NonFinite {
            context: "ctc likelihood".into(),
            index: 0,
        });
    }
    // d(-log p)/d lp[t, c] = -Σ_{s: label(s) = c} exp(α + β - lp - log p)
    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab == ninf {
                continue;
            }
            let c = label(s);
            grad[t * classes + c] -= (ab - lp(t, c) - log_p).exp();
        }
    }
    Ok((-log_p, grad))
}

/// CTC loss node over `log_probs` (`[T, C]`).
pub fn ctc_loss(g: &mut Graph, log_probs: Var, target: &[usize]) -> Result<Var> {
    let (t, c) = g.value(log_probs).dims2()?;
    let (value, grad) = ctc_nll(g.value(log_probs).data(), t, c, target)?;
    g.scalar_fn(log_probs, value, grad)
}

/// Best-path class ids: per-frame argmax with repeats collapsed and blanks
/// removed. Ties go to the lowest class.
pub fn best_path(log_probs: &[f64], classes: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in log_probs.chunks_exact(classes) {
        let mut k = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[k] {
                k = c;
            }
        }
        if prev != Some(k) && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

pub fn greedy_decode(log_probs: &Tensor, vocab: &Vocab) -> Result<Vec<String>> {
    let (_, c) = log_probs.dims2()?;
    if c != vocab.classes() {
        return Err(Error::Shape(format!(
            "greedy_decode: {c} classes for a vocabulary of {}",
            vocab.classes()
        )));
    }
    Ok(vocab.decode(&best_path(log_probs.data(), c)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_frame_single_label() {
        let lp = [0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()];
        let (nll, _) = ctc_nll(&lp, 1, 3, &[1]).unwrap();
        assert!((nll + 0.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let p = [[0.7, 0.3], [0.6, 0.4], [0.9, 0.1]];
        let lp: Vec<f64> = p.iter().flat_map(|r| r.iter().map(|v: &f64| v.ln())).collect();
        let (nll, _) = ctc_nll(&lp, 3, 2, &[]).unwrap();
        let expect = -(0.7f64.ln() + 0.6f64.ln() + 0.9f64.ln());
        assert!((nll - expect).abs() < 1e-14);
    }

    #[test]
    fn repeated_labels_need_a_separator() {
        assert_eq!(min_frames(&[1, 1]), 3);
        assert_eq!(min_frames(&[1, 2, 2, 2]), 6);
        let lp = vec![(0.5f64).ln(); 4];
        assert!(ctc_nll(&lp, 2, 2, &[1, 1]).is_err());
    }

    #[test]
    fn collapse_rules() {
        let one_hot = |ids: &[usize]| -> Vec<f64> {
            ids.iter()
                .flat_map(|&k| (0..3).map(move |c| if c == k { 0.0 } else { -10.0 }))
                .collect()
        };
        assert_eq!(best_path(&one_hot(&[1, 1, 0, 1]), 3), vec![1, 1]);
        assert_eq!(best_path(&one_hot(&[0, 0, 0]), 3), Vec::<usize>::new());
        assert_eq!(best_path(&one_hot(&[0, 2, 2, 0, 2]), 3), vec![2, 2]);
    }
}
