use serde::{Deserialize, Serialize};

/// Edit-operation counts of one alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
    pub ref_words: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.sub + self.del + self.ins
    }

    /// Errors over reference words; an empty reference counts as one word.
    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.ref_words.max(1) as f64
    }

    pub fn add(&mut self, o: &ErrorCounts) {
        self.sub += o.sub;
        self.del += o.del;
        self.ins += o.ins;
        self.ref_words += o.ref_words;
    }
}

/// Unit-cost Levenshtein alignment. Among minimum-cost alignments the
/// backtrace prefers substitutions, then deletions, then insertions.
pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> ErrorCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for (j, v) in d.iter_mut().take(w).enumerate() {
        *v = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = diag.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut c = ErrorCounts {
        ref_words: n,
        ..ErrorCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                c.sub += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            c.del += 1;
            i -= 1;
        } else {
            c.ins += 1;
            j -= 1;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_cases() {
        let r = ["a", "b", "c"];
        assert_eq!(wer(&r, &r).errors(), 0);
        let c = wer(&r, &["a", "c"]);
        assert_eq!((c.sub, c.del, c.ins), (0, 1, 0));
        assert!((c.wer() - 1.0 / 3.0).abs() < 1e-15);
        let c = wer::<&str>(&[], &["x", "y"]);
        assert_eq!((c.ins, c.wer()), (2, 2.0));
    }

    #[test]
    fn ties_prefer_substitution() {
        let c = wer(&["a", "b"], &["b", "a"]);
        assert_eq!((c.sub, c.del, c.ins), (2, 0, 0));
    }
}
