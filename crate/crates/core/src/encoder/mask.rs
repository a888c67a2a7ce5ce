use rand::Rng;

use super::config::MaskingConfig;

/// Sorted masked frame indices for one utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub frames: usize,
    indices: Vec<usize>,
}

impl MaskSet {
    /// Builds a set from arbitrary indices; out-of-range ones are dropped.
    pub fn from_indices(frames: usize, mut indices: Vec<usize>) -> Self {
        indices.retain(|&i| i < frames);
        indices.sort_unstable();
        indices.dedup();
        Self { frames, indices }
    }

    pub fn empty(frames: usize) -> Self {
        Self {
            frames,
            indices: Vec::new(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.indices.binary_search(&t).is_ok()
    }

    /// `[frames]` indicator vector.
    pub fn indicator(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.frames];
        for &i in &self.indices {
            v[i] = 1.0;
        }
        v
    }

    pub fn fraction(&self) -> f64 {
        self.indices.len() as f64 / self.frames.max(1) as f64
    }
}

/// Each frame starts a span with probability `mask_prob`; spans cover
/// `span_length` frames (clipped at the end) and are merged. When nothing was
/// drawn and `min_masks > 0`, one span is placed uniformly.
pub fn span_mask(frames: usize, cfg: &MaskingConfig, rng: &mut impl Rng) -> MaskSet {
    let mut hit = vec![false; frames];
    let mut any = false;
    for t in 0..frames {
        if rng.random::<f64>() < cfg.mask_prob {
            any = true;
            for h in &mut hit[t..(t + cfg.span_length).min(frames)] {
                *h = true;
            }
        }
    }
    if !any && cfg.min_masks > 0 && frames > 0 {
        let start = rng.random_range(0..frames.saturating_sub(cfg.span_length) + 1);
        for h in &mut hit[start..(start + cfg.span_length).min(frames)] {
            *h = true;
        }
    }
    MaskSet {
        frames,
        indices: (0..frames).filter(|&t| hit[t]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg(p: f64, min_masks: usize) -> MaskingConfig {
        MaskingConfig {
            mask_prob: p,
            min_masks,
            ..MaskingConfig::default()
        }
    }

    #[test]
    fn degenerate_probabilities() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(span_mask(50, &cfg(0.0, 0), &mut r).is_empty());
        assert_eq!(span_mask(50, &cfg(1.0, 0), &mut r).len(), 50);
        let forced = span_mask(50, &cfg(0.0, 1), &mut r);
        assert_eq!(forced.len(), 10);
        let tiny = span_mask(1, &cfg(0.0, 1), &mut r);
        assert_eq!(tiny.indices(), &[0]);
    }
}
