use super::mask::MaskSet;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

/// Summed cross-entropy over the masked and unmasked frames of one
/// utterance. Logits and targets are truncated to the shorter length.
#[derive(Clone, Copy, Debug)]
pub struct MaskedTerms {
    pub masked_sum: Option<Var>,
    pub masked: usize,
    pub unmasked_sum: Option<Var>,
    pub unmasked: usize,
}

fn ce_sum(g: &mut Graph, log_probs: Var, k: usize, targets: &[u32], frames: &[usize]) -> Result<Option<Var>> {
    if frames.is_empty() {
        return Ok(None);
    }
    let idx: Vec<usize> = frames.iter().map(|&t| t * k + targets[t] as usize).collect();
    let picked = g.gather(log_probs, &idx)?;
    let s = g.sum(picked);
    Ok(Some(g.scale(s, -1.0)))
}

/// Splits the cross-entropy of `logits` (`[frames, k]`) against `targets`
/// into masked and unmasked sums. `with_unmasked` skips the unmasked term
/// when its weight is zero.
pub fn masked_ce_terms(g: &mut Graph, logits: Var, targets: &[u32], mask: &MaskSet, with_unmasked: bool) -> Result<MaskedTerms> {
    let (t, k) = match g.shape(logits) {
        [t, k] => (*t, *k),
        s => return Err(Error::Shape(format!("masked loss: logits must be 2-D, got {s:?}"))),
    };
    if let Some(bad) = targets.iter().find(|&&y| y as usize >= k) {
        return Err(Error::invalid(format!("target id {bad} out of range for {k} classes")));
    }
    let n = t.min(targets.len());
    let masked: Vec<usize> = mask.indices().iter().copied().filter(|&i| i < n).collect();
    let lsm = g.log_softmax(logits);
    let masked_sum = ce_sum(g, lsm, k, targets, &masked)?;
    let (unmasked_sum, unmasked) = if with_unmasked {
        let un: Vec<usize> = (0..n).filter(|i| !mask.contains(*i)).collect();
        (ce_sum(g, lsm, k, targets, &un)?, un.len())
    } else {
        (None, 0)
    };
    Ok(MaskedTerms {
        masked_sum,
        masked: masked.len(),
        unmasked_sum,
        unmasked,
    })
}

/// Mean cross-entropy over masked frames, plus `unmasked_weight` times the
/// mean over unmasked frames.
pub fn masked_prediction_loss(g: &mut Graph, logits: Var, targets: &[u32], mask: &MaskSet, unmasked_weight: f64) -> Result<Var> {
    let terms = masked_ce_terms(g, logits, targets, mask, unmasked_weight > 0.0)?;
    combine(g, &terms, terms.masked, terms.unmasked, unmasked_weight)
}

/// `masked_sum / masked_total + w · unmasked_sum / unmasked_total`, with the
/// totals taken over a whole batch.
pub fn combine(
    g: &mut Graph,
    terms: &MaskedTerms,
    masked_total: usize,
    unmasked_total: usize,
    unmasked_weight: f64,
) -> Result<Var> {
    if masked_total == 0 {
        return Err(Error::invalid("masked prediction loss over an empty mask"));
    }
    let mut loss = match terms.masked_sum {
        Some(s) => g.scale(s, 1.0 / masked_total as f64),
        None => g.constant(crate::numerics::Tensor::scalar(0.0)),
    };
    if let (Some(u), true) = (terms.unmasked_sum, unmasked_weight > 0.0 && unmasked_total > 0) {
        let u = g.scale(u, unmasked_weight / unmasked_total as f64);
        loss = g.add(loss, u)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::zeros(&[6, 5]));
        let m = MaskSet::from_indices(6, vec![1, 2, 4]);
        let loss = masked_prediction_loss(&mut g, l, &[0, 1, 2, 3, 4, 0], &m, 0.0).unwrap();
        assert!((g.value(loss).item() - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn large_margin_gives_tiny_loss() {
        let mut data = vec![0.0; 12];
        let targets = [2u32, 0, 1];
        for (t, &y) in targets.iter().enumerate() {
            data[t * 4 + y as usize] = 20.0;
        }
        let mut g = Graph::new();
        let l = g.leaf(Tensor::new(vec![3, 4], data).unwrap());
        let loss = masked_prediction_loss(&mut g, l, &targets, &MaskSet::from_indices(3, vec![0, 1, 2]), 0.0).unwrap();
        assert!(g.value(loss).item() < 1e-8);
    }

    #[test]
    fn empty_mask_fails_and_truncation_applies() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::zeros(&[4, 3]));
        assert!(masked_prediction_loss(&mut g, l, &[0, 1, 2, 0], &MaskSet::empty(4), 0.0).is_err());
        // only frame 3 is masked but targets stop at 3 frames
        assert!(masked_prediction_loss(&mut g, l, &[0, 1, 2], &MaskSet::from_indices(4, vec![3]), 0.0).is_err());
    }
}
