//! Acceptance harness. Runs every criterion, prints one PASS/FAIL line per
//! criterion, and exits non-zero when any fails.
//!
//! The trend criteria train the desk configuration on five seeds, which takes
//! a while on one core. Runs are cached under `target/tmp/acceptance`, keyed
//! by the hash of this test binary, so an unchanged build resumes instead of
//! retraining.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use common::{check_with_params, rng, signal, tiny_encoder, tiny_run_toml, uniform};
use fatlab::asr::{ctc_loss, ctc_nll, min_frames, wer, EvalReport, SnrBand};
use fatlab::audio::NoiseBank;
use fatlab::audio::{istft, mean_power, mix_at_snr, stft, Waveform, Window};
use fatlab::encoder::{
    masked_prediction_loss, span_mask, Block, FusionConfig, FusionSite, FusionVariant, MaskSet, MaskingConfig, Placement,
    SslModel,
};
use fatlab::frontends::{neg_si_snr_loss, FrontendPool};
use fatlab::numerics::{GradCheckReport, Graph, ParamStore, Tensor};
use fatlab::pipeline::{sha256_file, Pipeline, RunConfig, Stage};
use fatlab::targets::{assign, kmeans_fit, nearest, Codebook, FeatureSequence, KMeansConfig};
use fatlab::training::{
    baseline_pretrain, pretrain, BaselineInput, FatConfig, ImstConfig, PretrainConfig, PretrainData, Utterance,
};

// Tolerances and sizes, pinned.
const GRAD_SEEDS: u64 = 20;
const GRAD_STEP: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_BUDGET_S: f64 = 300.0;
const REDUCTION_TOL: f64 = 1e-12;
const CTC_TOL: f64 = 1e-10;
const WER_PAIRS: usize = 1000;
const KMEANS_RUNS: u64 = 50;
const MIX_CASES: usize = 1000;
const MIX_TOL_DB: f64 = 0.01;
const STFT_TOL: f64 = 1e-9;
const MASK_ORACLE_TRIALS: usize = 10_000;
const MASK_TRIALS: usize = 2_000;
const MASK_TOL: f64 = 0.05;
const TREND_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const TREND_MIN_SEEDS: usize = 3;
/// Low-SNR bands over which trend medians are taken.
const LOW_BANDS: [(f64, f64); 2] = [(0.0, 5.0), (-5.0, 0.0)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn max_report(reports: &[GradCheckReport]) -> f64 {
    reports.iter().map(|r| r.max_error()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 1

fn fusion_check(variant: FusionVariant, seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let (t, d) = (5, 6);
    let mut store = ParamStore::new();
    let site = FusionSite::new(&mut store, variant, "site", d, 2, &mut r);
    let ids: Vec<_> = store.ids().collect();
    let main = uniform(&mut r, &[t, d], 1.0);
    let aux = uniform(&mut r, &[t, d], 1.0);
    let w = uniform(&mut r, &[t, d], 1.0);
    check_with_params(
        |g, store, v| {
            let out = site.fuse(g, store, v[0], v[1])?;
            let wv = g.constant(w.clone());
            let p = g.mul(out, wv)?;
            Ok(g.sum(p))
        },
        vec![main, aux],
        &store,
        &ids,
        &mut r,
    )
    .unwrap()
}

fn block_check(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let cfg = tiny_encoder();
    let mut store = ParamStore::new();
    let block = Block::new(&mut store, "b", &cfg, &mut r);
    let ids: Vec<_> = store.ids().collect();
    let x = uniform(&mut r, &[4, cfg.model_dim], 1.0);
    let w = uniform(&mut r, &[4, cfg.model_dim], 1.0);
    check_with_params(
        |g, store, v| {
            let out = block.forward(g, store, v[0])?;
            let wv = g.constant(w.clone());
            let p = g.mul(out, wv)?;
            Ok(g.sum(p))
        },
        vec![x],
        &store,
        &ids,
        &mut r,
    )
    .unwrap()
}

fn masked_loss_check(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let (t, k) = (12, 5);
    let logits = uniform(&mut r, &[t, k], 2.0);
    let targets: Vec<u32> = (0..t).map(|_| r.random_range(0..k as u32)).collect();
    let mask = MaskSet::from_indices(t, (0..t).filter(|_| r.random_bool(0.4)).chain([seed as usize % t]).collect());
    let weight = if seed.is_multiple_of(2) { 0.0 } else { 0.5 };
    fatlab::numerics::grad_check(
        |g, v| masked_prediction_loss(g, v[0], &targets, &mask, weight),
        &[logits],
        GRAD_STEP,
    )
    .unwrap()
}

fn ctc_check(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let (t, c) = (8, 4);
    let target: Vec<usize> = loop {
        let l = r.random_range(1..=4);
        let y: Vec<usize> = (0..l).map(|_| r.random_range(1..c)).collect();
        if min_frames(&y) <= t {
            break y;
        }
    };
    let logits = uniform(&mut r, &[t, c], 2.0);
    fatlab::numerics::grad_check(
        |g, v| {
            let lp = g.log_softmax(v[0]);
            ctc_loss(g, lp, &target)
        },
        &[logits],
        GRAD_STEP,
    )
    .unwrap()
}

fn si_snr_check(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let len = 64;
    let reference = signal(&mut r, len);
    let est: Vec<f64> = reference.iter().map(|v| v + r.random_range(-0.2..0.2)).collect();
    fatlab::numerics::grad_check(
        |g, v| neg_si_snr_loss(g, v[0], &reference),
        &[Tensor::new(vec![len, 1], est).unwrap()],
        GRAD_STEP,
    )
    .unwrap()
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    let checks: [(&str, &dyn Fn(u64) -> GradCheckReport); 7] = [
        ("OA", &|s| fusion_check(FusionVariant::Oa, s)),
        ("SF", &|s| fusion_check(FusionVariant::Sf, s)),
        ("DA", &|s| fusion_check(FusionVariant::Da, s)),
        ("block", &block_check),
        ("masked", &masked_loss_check),
        ("ctc", &ctc_check),
        ("si_snr", &si_snr_check),
    ];
    for (name, f) in checks {
        let reports: Vec<_> = (0..GRAD_SEEDS).map(f).collect();
        let worst = max_report(&reports);
        pass &= worst < GRAD_REL_TOL;
        parts.push(format!("{name} {worst:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < GRAD_BUDGET_S;
    outcome(
        pass,
        format!(
            "max rel err over {GRAD_SEEDS} seeds: {} (< {GRAD_REL_TOL:e}); {secs:.1} s",
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 2

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn utterances(n: usize, frames_k: u32, seed: u64) -> Vec<Utterance> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let len = r.random_range(4000..6000);
            let clean = Waveform::new(signal(&mut r, len), 16000).unwrap();
            let targets = (0..len / 320).map(|_| r.random_range(0..frames_k)).collect();
            Utterance {
                id: format!("u{i}"),
                clean,
                targets,
            }
        })
        .collect()
}

fn criterion_reductions() -> Outcome {
    let cfg = tiny_encoder();
    let mut r = rng(3);
    let x = signal(&mut r, 5000);
    let y = signal(&mut r, 5000);
    let frames = cfg.frames(x.len()).unwrap();
    let mask = span_mask(frames, &MaskingConfig::default(), &mut r);

    // (a) identical branches, OA at alpha = 0
    let oa = SslModel::new(cfg.clone(), Some(FusionConfig::new(FusionVariant::Oa, Placement::All)), 5).unwrap();
    let mut g = Graph::inference();
    let two = oa.forward_two_branch(&mut g, &x, &x, Some(&mask)).unwrap();
    let one = oa.forward_single(&mut g, &x, Some(&mask)).unwrap();
    let da_ = max_abs_diff(g.value(two.logits), g.value(one.logits));

    // (b) DA at init against the same weights without fusion
    let plain = SslModel::new(cfg.clone(), None, 5).unwrap();
    let da = SslModel::new(cfg.clone(), Some(FusionConfig::new(FusionVariant::Da, Placement::All)), 5).unwrap();
    let mut g = Graph::inference();
    let fused = da.forward_two_branch(&mut g, &x, &y, Some(&mask)).unwrap();
    let base = plain.forward_single(&mut g, &x, Some(&mask)).unwrap();
    let db = max_abs_diff(g.value(fused.logits), g.value(base.logits));

    // (c) FAT + IMST with the identity pool and alpha frozen at 0 against
    // noisy baseline pretraining
    let utts = utterances(6, cfg.k as u32, 4);
    let noise = NoiseBank::synthetic(3, 1.0, 16000, 9).unwrap();
    let data = PretrainData {
        utterances: &utts,
        noise: Some(&noise),
        manifest_hash: "reduction".into(),
    };
    let masking = MaskingConfig::default();
    let pcfg = PretrainConfig {
        steps: 12,
        batch_size: 2,
        lr: 1e-3,
        seed: 21,
        ..PretrainConfig::default()
    };
    let fat = FatConfig {
        pool: Vec::new(),
        include_identity_frontend: true,
        ..FatConfig::default()
    };
    let imst = ImstConfig {
        segment_length_s: 0.05,
        ..ImstConfig::default()
    };
    let mut base_model = SslModel::new(cfg.clone(), None, 8).unwrap();
    let base_run = baseline_pretrain(
        &mut base_model,
        &data,
        BaselineInput::Noisy,
        fat.snr_range,
        &masking,
        &pcfg,
        None,
    )
    .unwrap();
    let mut fat_model = SslModel::new(cfg, Some(FusionConfig::new(FusionVariant::Oa, Placement::First)), 8).unwrap();
    for id in fat_model.fusion_param_ids() {
        fat_model.store.set_trainable(id, false);
    }
    let pool = FrontendPool::identity();
    let fat_run = pretrain(&mut fat_model, &data, &fat, &pool, Some(&imst), &masking, &pcfg, None).unwrap();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    let same = bits(base_run.losses()) == bits(fat_run.losses());

    let pass = da_ <= REDUCTION_TOL && db <= REDUCTION_TOL && same;
    outcome(
        pass,
        format!(
            "(a) {da_:.1e} (b) {db:.1e} (<= {REDUCTION_TOL:e}); (c) {} steps {}",
            pcfg.steps,
            if same { "bitwise equal" } else { "differ" }
        ),
    )
}

// ---------------------------------------------------------------- 3

/// Sum over every frame-level path that collapses to `target`.
fn ctc_by_enumeration(lp: &[f64], t: usize, c: usize, target: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &s in &path {
            if s != 0 && Some(s) != prev {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(i, &s)| lp[i * c + s]).sum::<f64>().exp();
        }
        let mut i = 0;
        loop {
            if i == t {
                return total;
            }
            path[i] += 1;
            if path[i] < c {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn all_sequences(v: usize, l: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..l {
        out = out
            .into_iter()
            .flat_map(|s| {
                (1..=v).map(move |x| {
                    let mut n = s.clone();
                    n.push(x);
                    n
                })
            })
            .collect();
    }
    out
}

fn edit_distance(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = edit_distance(ra, rb) + usize::from(x != y);
            sub.min(edit_distance(ra, b) + 1).min(edit_distance(a, rb) + 1)
        }
    }
}

fn criterion_oracles() -> Outcome {
    // CTC
    let mut r = rng(31);
    let mut ctc_worst: f64 = 0.0;
    let mut ctc_cases = 0;
    let mut ctc_ok = true;
    for v in 1..=3 {
        let c = v + 1;
        for t in 1..=6 {
            let lp: Vec<f64> = {
                let logits = uniform(&mut r, &[t, c], 2.0);
                let mut g = Graph::inference();
                let x = g.constant(logits);
                let y = g.log_softmax(x);
                g.value(y).data().to_vec()
            };
            for l in 0..=3 {
                for target in all_sequences(v, l) {
                    ctc_cases += 1;
                    let p = ctc_by_enumeration(&lp, t, c, &target);
                    match ctc_nll(&lp, t, c, &target) {
                        Ok((nll, _)) => {
                            ctc_ok &= p > 0.0;
                            ctc_worst = ctc_worst.max((nll + p.ln()).abs());
                        }
                        Err(_) => ctc_ok &= p == 0.0,
                    }
                }
            }
        }
    }
    ctc_ok &= ctc_worst <= CTC_TOL;

    // WER
    let mut wer_mismatch = 0;
    for _ in 0..WER_PAIRS {
        let a: Vec<u8> = (0..r.random_range(0..=6)).map(|_| r.random_range(0..3)).collect();
        let b: Vec<u8> = (0..r.random_range(0..=6)).map(|_| r.random_range(0..3)).collect();
        let e = wer(&a, &b);
        if e.errors() != edit_distance(&a, &b) || e.ref_words != a.len() {
            wer_mismatch += 1;
        }
    }

    // k-means
    let mut assign_mismatch = 0;
    let mut increases = 0;
    for seed in 0..KMEANS_RUNS {
        let mut r = rng(1000 + seed);
        let dim = r.random_range(1..=4);
        let n = r.random_range(40..120);
        let k = r.random_range(2..=8);
        let rows: Vec<f64> = (0..n * dim).map(|_| r.random_range(-3.0..3.0)).collect();
        let cb: Codebook = kmeans_fit(&rows, dim, &KMeansConfig { k, max_iters: 100, seed }, "test").unwrap();
        increases += cb.inertia_history.windows(2).filter(|w| w[1] > w[0]).count();
        let feats = FeatureSequence::new(n, dim, rows.clone(), 50.0).unwrap();
        let got = assign(&feats, &cb).unwrap();
        for (i, row) in rows.chunks_exact(dim).enumerate() {
            let mut best = (0, f64::INFINITY);
            for j in 0..k {
                let cj = cb.centroids.row(j);
                let d: f64 = row.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            if got[i] as usize != best.0 || nearest(row, cb.centroids.data(), dim).0 != best.0 {
                assign_mismatch += 1;
            }
        }
    }

    let pass = ctc_ok && wer_mismatch == 0 && assign_mismatch == 0 && increases == 0;
    outcome(
        pass,
        format!(
            "ctc {ctc_cases} cases max |diff| {ctc_worst:.1e} (<= {CTC_TOL:e}); wer {wer_mismatch}/{WER_PAIRS} mismatches; \
             k-means {assign_mismatch} assignment mismatches, {increases} inertia increases over {KMEANS_RUNS} runs"
        ),
    )
}

// ---------------------------------------------------------------- 4

/// Independent simulation of span masking: every frame starts a span with
/// probability `p`; spans of `l` frames are clipped at the end.
fn mask_oracle(p: f64, l: usize, t: usize, trials: usize) -> f64 {
    let mut r = rng(77);
    let mut covered = 0usize;
    for _ in 0..trials {
        let mut until = 0;
        let mut started = false;
        let mut n = 0;
        for i in 0..t {
            if r.random::<f64>() < p {
                until = i + l;
                started = true;
            }
            if started && i < until {
                n += 1;
            }
        }
        covered += n;
    }
    covered as f64 / (trials * t) as f64
}

fn criterion_signals() -> Outcome {
    let mut r = rng(41);
    let mut mix_worst: f64 = 0.0;
    for _ in 0..MIX_CASES {
        let len = r.random_range(200..4000);
        let clean = Waveform::new(signal(&mut r, len), 16000).unwrap();
        let nlen = r.random_range(50..6000);
        let noise = Waveform::new((0..nlen).map(|_| r.random_range(-1.0..1.0)).collect(), 16000).unwrap();
        let snr = r.random_range(-10.0..=20.0);
        let (mixed, _) = mix_at_snr(&clean, &noise, snr).unwrap();
        let resid: Vec<f64> = mixed.samples().iter().zip(clean.samples()).map(|(m, c)| m - c).collect();
        let measured = 10.0 * (mean_power(clean.samples()) / mean_power(&resid)).log10();
        mix_worst = mix_worst.max((measured - snr).abs());
    }

    let mut stft_worst: f64 = 0.0;
    for &frame in &[16usize, 64, 256, 512, 1024] {
        for _ in 0..4 {
            let len = r.random_range(frame..frame * 20);
            let x: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
            let spec = stft(&x, frame, frame / 2, Window::Hann).unwrap();
            let y = istft(&spec).unwrap();
            let e = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            stft_worst = stft_worst.max(e);
            if y.len() != x.len() {
                stft_worst = f64::INFINITY;
            }
        }
    }

    let cfg = MaskingConfig {
        mask_prob: 0.065,
        span_length: 10,
        ..MaskingConfig::default()
    };
    let oracle = mask_oracle(cfg.mask_prob, cfg.span_length, 1000, MASK_ORACLE_TRIALS);
    let mut mr = rng(78);
    let measured = (0..MASK_TRIALS)
        .map(|_| span_mask(1000, &cfg, &mut mr).fraction())
        .sum::<f64>()
        / MASK_TRIALS as f64;

    let pass = mix_worst <= MIX_TOL_DB && stft_worst < STFT_TOL && (measured - oracle).abs() <= MASK_TOL;
    outcome(
        pass,
        format!(
            "mix max err {mix_worst:.1e} dB (<= {MIX_TOL_DB}); istft(stft) max err {stft_worst:.1e} (< {STFT_TOL:e}); \
             mask coverage {measured:.4} vs oracle {oracle:.4} (±{MASK_TOL})"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_params() -> Outcome {
    let cfg = fatlab::encoder::EncoderConfig::default();
    let plain = SslModel::new(cfg.clone(), None, 1).unwrap().store.num_scalars();
    let mut pass = true;
    let mut parts = Vec::new();
    for placement in [Placement::First, Placement::Last, Placement::All] {
        let mut counts = Vec::new();
        for variant in [FusionVariant::Oa, FusionVariant::Sf, FusionVariant::Da] {
            let fc = FusionConfig::new(variant, placement);
            let m = SslModel::new(cfg.clone(), Some(fc), 1).unwrap();
            let measured = m.store.num_scalars() - plain;
            let expected = fc.expected_params(cfg.num_blocks, cfg.model_dim);
            pass &= measured == expected && m.fusion_param_count() == expected;
            counts.push(measured);
        }
        pass &= counts[0] < counts[1] && counts[1] < counts[2];
        parts.push(format!("{placement:?} {}/{}/{}", counts[0], counts[1], counts[2]));
    }
    outcome(pass, format!("OA/SF/DA new parameters: {}", parts.join(", ")))
}

// ---------------------------------------------------------------- 6-8

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

/// Work directory for cached trend runs; wiped whenever this binary changes.
fn trend_workdir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let exe = std::env::current_exe().expect("test binary path");
    let stamp = sha256_file(&exe).expect("hash test binary");
    let stamp_file = dir.join("build.sha256");
    if fs::read_to_string(&stamp_file).ok().as_deref() != Some(stamp.as_str()) {
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        fs::write(&stamp_file, &stamp).unwrap();
    }
    dir
}

fn copy_tree(from: &Path, to: &Path) {
    if from.is_dir() {
        fs::create_dir_all(to).unwrap();
        for e in fs::read_dir(from).unwrap() {
            let e = e.unwrap();
            copy_tree(&e.path(), &to.join(e.file_name()));
        }
    } else {
        fs::copy(from, to).unwrap();
    }
}

/// Shared data, front-ends and targets, then one full run per training
/// seed. Returns each seed's evaluation report.
fn trend_reports() -> fatlab::Result<Vec<(u64, EvalReport)>> {
    let work = trend_workdir();
    let mut cfg = RunConfig::load(&desk_config())?;
    cfg.run.dir = work.join("shared");
    let shared = Pipeline::new(cfg.clone());
    for stage in [Stage::Simulate, Stage::TrainFrontends, Stage::MakeTargets] {
        shared.run_stage(stage)?;
    }
    let mut out = Vec::new();
    for seed in TREND_SEEDS {
        let dir = work.join(format!("seed{seed}"));
        if !dir.exists() {
            for entry in ["data", "frontends", "targets", "manifest.json"] {
                copy_tree(&cfg.run.dir.join(entry), &dir.join(entry));
            }
        }
        let mut c = cfg.clone();
        c.run.dir = dir.clone();
        c.run.train_seed = Some(seed);
        let start = Instant::now();
        Pipeline::new(c).run_all()?;
        eprintln!("  trend seed {seed}: {:.0} s", start.elapsed().as_secs_f64());
        let path = dir.join("report/eval.csv");
        let csv = fs::read_to_string(&path).map_err(|source| fatlab::Error::Io { path, source })?;
        out.push((seed, EvalReport::from_csv(&csv)?));
    }
    Ok(out)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median WER of `system` over the low-SNR cells of `frontends`.
fn low_snr_median(report: &EvalReport, system: &str, frontends: &[&str]) -> f64 {
    let mut v = Vec::new();
    for &(lo, hi) in &LOW_BANDS {
        for fe in frontends {
            let cell = report
                .cell(system, fe, SnrBand::new(lo, hi))
                .unwrap_or_else(|| panic!("missing cell {system}/{fe}/{lo}~{hi}"));
            v.push(cell.wer().expect("cell present"));
        }
    }
    median(v)
}

/// Per seed, compares `a` against `b` on `frontends`; passes when `holds`
/// is true on enough seeds.
fn trend(reports: &[(u64, EvalReport)], a: &str, b: &str, frontends: &[&str], holds: fn(f64, f64) -> bool, rel: &str) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for (seed, rep) in reports {
        let (x, y) = (low_snr_median(rep, a, frontends), low_snr_median(rep, b, frontends));
        let ok = holds(x, y);
        wins += usize::from(ok);
        parts.push(format!(
            "s{seed} {:.1}{}{:.1}",
            100.0 * x,
            if ok { rel } else { "!" },
            100.0 * y
        ));
    }
    outcome(
        wins >= TREND_MIN_SEEDS,
        format!(
            "{a} {rel} {b} on {} low-SNR cells: {wins}/{} seeds (need {TREND_MIN_SEEDS}); {}",
            frontends.join("+"),
            reports.len(),
            parts.join(", ")
        ),
    )
}

fn front_ends(seen: bool) -> Vec<String> {
    let cfg = RunConfig::load(&desk_config()).unwrap();
    cfg.frontends
        .iter()
        .filter(|f| f.seen_in_training == seen)
        .map(|f| f.id.clone())
        .collect()
}

// ---------------------------------------------------------------- 9

fn criterion_reproducible() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let cfg = RunConfig::from_toml(&tiny_run_toml(&dir)).unwrap();
        if let Err(e) = Pipeline::new(cfg).run_all() {
            return outcome(false, format!("run {name} failed: {e}"));
        }
        csvs.push(fs::read(dir.join("report/eval.csv")).unwrap());
    }
    let same = csvs[0] == csvs[1];
    outcome(
        same && !csvs[0].is_empty(),
        format!(
            "two runs of one config: eval.csv {} ({} bytes)",
            if same { "byte-identical" } else { "differs" },
            csvs[0].len()
        ),
    )
}

fn timed(id: u8, name: &'static str, f: impl FnOnce() -> Outcome) -> (u8, &'static str, Outcome) {
    let t = Instant::now();
    let o = f();
    eprintln!("  [{id}] finished in {:.1} s", t.elapsed().as_secs_f64());
    (id, name, o)
}

type Criterion = (u8, &'static str, fn() -> Outcome);

/// Criterion ids given on the command line select a subset; none selects all.
fn main() {
    let selected: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: u8| selected.is_empty() || selected.contains(&id);
    let start = Instant::now();
    let mut results = Vec::new();
    let cheap: [Criterion; 5] = [
        (1, "gradient verification", criterion_gradients),
        (2, "reduction identities", criterion_reductions),
        (3, "oracle equivalence", criterion_oracles),
        (4, "signal-level checks", criterion_signals),
        (5, "parameter accounting", criterion_params),
    ];
    for (id, name, f) in cheap {
        if want(id) {
            results.push(timed(id, name, f));
        }
    }
    if [6, 7, 8].into_iter().any(want) {
        let names = [
            (6, "trend A: IMST helps under noise"),
            (7, "trend B: fusion vs IMST, seen front-ends"),
            (8, "trend C: unseen front-ends"),
        ];
        match trend_reports() {
            Ok(reports) => {
                let seen = front_ends(true);
                let unseen = front_ends(false);
                let seen: Vec<&str> = seen.iter().map(String::as_str).collect();
                let unseen: Vec<&str> = unseen.iter().map(String::as_str).collect();
                results.push((
                    6,
                    names[0].1,
                    trend(&reports, "imst", "baseline", &["NoEnh"], |a, b| a < b, "<"),
                ));
                results.push((7, names[1].1, trend(&reports, "OA_first", "imst", &seen, |a, b| a <= b, "<=")));
                results.push((
                    8,
                    names[2].1,
                    trend(&reports, "OA_first", "baseline", &unseen, |a, b| a < b, "<"),
                ));
            }
            Err(e) => {
                for (id, name) in names {
                    results.push((id, name, outcome(false, format!("trend runs failed: {e}"))));
                }
            }
        }
    }
    if want(9) {
        results.push(timed(9, "pipeline reproducibility", criterion_reproducible));
    }

    println!();
    let mut failed = 0;
    for (id, name, o) in &results {
        failed += usize::from(!o.pass);
        println!("{} [{id}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!(
        "acceptance: {}/{} criteria passed in {:.0} s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
