mod common;

use rand::Rng;

use common::{rng, signal, tiny_encoder};
use fatlab::audio::{NoiseBank, Waveform};
use fatlab::encoder::{FusionConfig, FusionVariant, MaskingConfig, Placement, SslModel};
use fatlab::frontends::{Family, Frontend, FrontendPool, FrontendSpec, TimeDomainHyper};
use fatlab::numerics::Graph;
use fatlab::training::{
    baseline_pretrain, pretrain, read_loss_csv, replay_step, BaselineInput, FatConfig, ImstConfig, PretrainConfig, PretrainData,
    PretrainOutput, Regime, Utterance,
};

fn corpus(n: usize, k: u32, seed: u64) -> Vec<Utterance> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let len = r.random_range(4000..7000);
            Utterance {
                id: format!("utt{i:02}"),
                clean: Waveform::new(signal(&mut r, len), 16000).unwrap(),
                targets: (0..len / 320).map(|_| r.random_range(0..k)).collect(),
            }
        })
        .collect()
}

fn small_frontend(id: &str, seed: u64) -> Frontend {
    let mut spec = FrontendSpec::new(id, Family::TimeDomain, seed);
    spec.time_domain = TimeDomainHyper {
        filters: 8,
        bottleneck: 8,
        blocks: 1,
        ..TimeDomainHyper::default()
    };
    Frontend::new(spec).unwrap()
}

#[test]
fn replay_reproduces_logged_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_encoder();
    let utts = corpus(5, cfg.k as u32, 1);
    let noise = NoiseBank::synthetic(2, 1.0, 16000, 3).unwrap();
    let data = PretrainData {
        utterances: &utts,
        noise: Some(&noise),
        manifest_hash: "m".into(),
    };
    let pool = FrontendPool::new(vec![small_frontend("a", 1).into(), small_frontend("b", 2).into()]).unwrap();
    let fat = FatConfig {
        pool: vec!["a".into(), "b".into()],
        ..FatConfig::default()
    };
    let imst = ImstConfig {
        segment_length_s: 0.1,
        ..ImstConfig::default()
    };
    let masking = MaskingConfig::default();
    let pcfg = PretrainConfig {
        steps: 6,
        batch_size: 2,
        lr: 1e-3,
        seed: 4,
        checkpoint_every: 2,
        ..PretrainConfig::default()
    };
    let mut model = SslModel::new(cfg.clone(), Some(FusionConfig::new(FusionVariant::Oa, Placement::First)), 2).unwrap();
    let out = PretrainOutput {
        dir: tmp.path().join("run"),
        system: "OA_first".into(),
        codebook: None,
    };
    let outcome = pretrain(&mut model, &data, &fat, &pool, Some(&imst), &masking, &pcfg, Some(&out)).unwrap();
    assert_eq!(outcome.checkpoints.len(), 3);
    let logged = read_loss_csv(&out.dir.join("loss.csv")).unwrap();
    assert_eq!(logged.len(), 6);

    let regime = Regime::Fat {
        fat: &fat,
        pool: &pool,
        imst: Some(&imst),
    };
    for (stem, step) in [("step000002", 2), ("step000004", 4)] {
        let (restored, side) = SslModel::load(&out.dir.join(stem)).unwrap();
        assert_eq!(side.provenance.steps, step);
        let loss = replay_step(&restored, &data, &regime, &masking, &pcfg, step).unwrap();
        assert_eq!(loss.to_bits(), outcome.log[step].loss.to_bits(), "step {step}");
        // the CSV keeps full precision
        assert_eq!(logged[step].loss, outcome.log[step].loss);
    }
    // provenance names the utterances and front-ends of every step
    let prov = std::fs::read_to_string(out.dir.join("provenance.jsonl")).unwrap();
    assert_eq!(prov.lines().count(), 6);
    assert!(prov.contains("\"frontend\""));
}

#[test]
fn fusion_sites_start_as_identity() {
    let cfg = tiny_encoder();
    let mut r = rng(9);
    let x = signal(&mut r, 4000);
    let y = signal(&mut r, 4000);
    let plain = SslModel::new(cfg.clone(), None, 3).unwrap();
    let mut g = Graph::inference();
    let reference = plain.forward_single(&mut g, &x, None).unwrap();
    let want = g.value(reference.logits).clone();
    for fc in FusionConfig::grid() {
        let m = SslModel::new(cfg.clone(), Some(fc), 3).unwrap();
        let mut g = Graph::inference();
        let f = m.forward_two_branch(&mut g, &x, &y, None).unwrap();
        let got = g.value(f.logits);
        let diff = got
            .data()
            .iter()
            .zip(want.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        match fc.variant {
            // OA and DA add a zero-initialised term
            FusionVariant::Oa | FusionVariant::Da => assert_eq!(diff, 0.0, "{}", fc.label()),
            // SF starts as the average of both branches
            FusionVariant::Sf => {
                assert!(diff > 0.0);
                for s in &f.sites {
                    let (o, a, b) = (g.value(s.out), g.value(s.main_in), g.value(s.aux));
                    for i in 0..o.numel() {
                        assert!((o.data()[i] - 0.5 * (a.data()[i] + b.data()[i])).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn frozen_fusion_stays_put_and_base_weights_move() {
    let cfg = tiny_encoder();
    let utts = corpus(4, cfg.k as u32, 5);
    let noise = NoiseBank::synthetic(2, 1.0, 16000, 6).unwrap();
    let data = PretrainData {
        utterances: &utts,
        noise: Some(&noise),
        manifest_hash: "m".into(),
    };
    let fat = FatConfig {
        include_identity_frontend: true,
        ..FatConfig::default()
    };
    let pcfg = PretrainConfig {
        steps: 3,
        batch_size: 2,
        lr: 1e-3,
        seed: 1,
        ..PretrainConfig::default()
    };
    let mut m = SslModel::new(cfg, Some(FusionConfig::new(FusionVariant::Oa, Placement::All)), 1).unwrap();
    let ids = m.fusion_param_ids();
    for &id in &ids {
        m.store.set_trainable(id, false);
    }
    let before = m.store.clone();
    pretrain(
        &mut m,
        &data,
        &fat,
        &FrontendPool::identity(),
        None,
        &MaskingConfig::default(),
        &pcfg,
        None,
    )
    .unwrap();
    let moved = m.store.ids().filter(|id| m.store.value(*id) != before.value(*id)).count();
    assert!(moved > m.store.len() / 2, "only {moved} of {} tensors changed", m.store.len());
    for &id in &ids {
        assert_eq!(m.store.value(id).data(), &[0.0]);
    }
}

#[test]
fn noisy_baseline_needs_noise() {
    let cfg = tiny_encoder();
    let utts = corpus(2, cfg.k as u32, 5);
    let data = PretrainData {
        utterances: &utts,
        noise: None,
        manifest_hash: "m".into(),
    };
    let pcfg = PretrainConfig {
        steps: 1,
        batch_size: 1,
        ..PretrainConfig::default()
    };
    let mut m = SslModel::new(cfg, None, 1).unwrap();
    let err = baseline_pretrain(
        &mut m,
        &data,
        BaselineInput::Noisy,
        [0.0, 5.0],
        &MaskingConfig::default(),
        &pcfg,
        None,
    )
    .unwrap_err();
    assert!(err.to_string().contains("noise"));
    // clean input trains without a bank
    baseline_pretrain(
        &mut m,
        &data,
        BaselineInput::Clean,
        [0.0, 5.0],
        &MaskingConfig::default(),
        &pcfg,
        None,
    )
    .unwrap();
}
