//! Property tests for invariants that hold for any input.

mod common;

use proptest::prelude::*;

use fatlab::asr::{best_path, ctc_nll, min_frames, wer};
use fatlab::audio::{istft, mean_power, mix_at_snr, stft, Waveform, Window};
use fatlab::encoder::{span_mask, FusionConfig, FusionVariant, MaskingConfig, Placement};
use fatlab::numerics::{Graph, Tensor};
use fatlab::targets::kmeans_fit;
use fatlab::targets::KMeansConfig;
use fatlab::training::batch_index;

fn log_softmax_rows(logits: Vec<f64>, t: usize, c: usize) -> Vec<f64> {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::new(vec![t, c], logits).unwrap());
    let y = g.log_softmax(x);
    g.value(y).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mix_hits_requested_snr(
        clean in prop::collection::vec(-1.0f64..1.0, 16..800),
        noise in prop::collection::vec(-1.0f64..1.0, 8..900),
        snr in -10.0f64..20.0,
    ) {
        prop_assume!(mean_power(&clean) > 1e-6 && mean_power(&noise) > 1e-6);
        let c = Waveform::new(clean, 16000).unwrap();
        let n = Waveform::new(noise, 16000).unwrap();
        let (m, gain) = mix_at_snr(&c, &n, snr).unwrap();
        prop_assert_eq!(m.len(), c.len());
        prop_assert!(gain > 0.0);
        let resid: Vec<f64> = m.samples().iter().zip(c.samples()).map(|(a, b)| a - b).collect();
        let got = 10.0 * (mean_power(c.samples()) / mean_power(&resid)).log10();
        prop_assert!((got - snr).abs() < 1e-9);
    }

    #[test]
    fn stft_round_trip(x in prop::collection::vec(-1.0f64..1.0, 1..2000), log_frame in 2u32..9) {
        let frame = 1usize << log_frame;
        let spec = stft(&x, frame, frame / 2, Window::Hann).unwrap();
        prop_assert_eq!(spec.bins, frame / 2 + 1);
        let y = istft(&spec).unwrap();
        prop_assert_eq!(y.len(), x.len());
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn wer_is_an_edit_metric(
        a in prop::collection::vec(0u8..4, 0..10),
        b in prop::collection::vec(0u8..4, 0..10),
    ) {
        let ab = wer(&a, &b);
        prop_assert_eq!(ab.errors(), wer(&b, &a).errors());
        prop_assert_eq!(wer(&a, &a).errors(), 0);
        prop_assert!(ab.errors() <= a.len().max(b.len()));
        prop_assert!(ab.errors() >= a.len().abs_diff(b.len()));
        // every reference word is matched, substituted or deleted
        prop_assert!(ab.sub + ab.del <= a.len());
        prop_assert_eq!(ab.ref_words, a.len());
    }

    #[test]
    fn ctc_posteriors_are_distributions(
        logits in prop::collection::vec(-3.0f64..3.0, 28),
        target in prop::collection::vec(1usize..4, 0..4),
    ) {
        let (t, c) = (7, 4);
        prop_assume!(min_frames(&target) <= t);
        let lp = log_softmax_rows(logits, t, c);
        let (nll, grad) = ctc_nll(&lp, t, c, &target).unwrap();
        prop_assert!(nll >= -1e-12 && nll.is_finite());
        // d nll / d log p(t, c) is minus the posterior occupancy
        for row in grad.chunks_exact(c) {
            prop_assert!((row.iter().sum::<f64>() + 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v <= 1e-12));
        }
    }

    #[test]
    fn best_path_has_a_frame_per_label(logits in prop::collection::vec(-3.0f64..3.0, 40)) {
        let path = best_path(&log_softmax_rows(logits, 10, 4), 4);
        prop_assert!(path.len() <= 10);
        prop_assert!(path.iter().all(|&s| s != 0 && s < 4));
    }

    #[test]
    fn span_masks_are_sorted_and_bounded(
        frames in 0usize..300,
        p in 0.0f64..0.5,
        span in 1usize..15,
        seed in any::<u64>(),
    ) {
        let cfg = MaskingConfig { mask_prob: p, span_length: span, ..MaskingConfig::default() };
        let m = span_mask(frames, &cfg, &mut common::rng(seed));
        prop_assert!(m.indices().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(m.indices().iter().all(|&i| i < frames));
        prop_assert_eq!(m.is_empty(), frames == 0);
    }

    #[test]
    fn inertia_never_increases(
        rows in prop::collection::vec(-5.0f64..5.0, 60..200),
        k in 2usize..6,
        seed in any::<u64>(),
    ) {
        let dim = 2;
        let n = rows.len() / dim;
        let rows = rows[..n * dim].to_vec();
        prop_assume!(fatlab::targets::count_distinct(&rows, dim) >= k);
        let cb = kmeans_fit(&rows, dim, &KMeansConfig { k, max_iters: 50, seed }, "p").unwrap();
        prop_assert!(cb.inertia_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn every_epoch_is_a_permutation(seed in any::<u64>(), n in 1usize..40, batch in 1usize..6) {
        let per_epoch = n.div_ceil(batch) * batch;
        let mut seen: Vec<usize> = (0..per_epoch * 2)
            .map(|pos| batch_index(seed, pos / batch, pos % batch, batch, n))
            .collect();
        // the first n positions cover every index exactly once
        let first = &mut seen[..n];
        first.sort_unstable();
        prop_assert_eq!(first.to_vec(), (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn fusion_cost_is_ordered(blocks in 1usize..13, dim in 1usize..1024) {
        for p in [Placement::First, Placement::Last, Placement::All] {
            let c = |v| FusionConfig::new(v, p).expected_params(blocks, dim);
            prop_assert!(c(FusionVariant::Oa) < c(FusionVariant::Sf));
            prop_assert!(c(FusionVariant::Sf) < c(FusionVariant::Da));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(x in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::inference();
        let v = g.constant(Tensor::new(vec![3, 4], x).unwrap());
        let s = g.softmax(v);
        for row in g.value(s).data().chunks_exact(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
