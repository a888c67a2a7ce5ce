//! Finite-difference checks of the building blocks that the acceptance
//! harness does not cover on its own.

mod common;

use rand::Rng;

use common::{check_with_params, rng, signal, tiny_encoder, uniform};
use fatlab::encoder::{masked_prediction_loss, FusionConfig, FusionSite, FusionVariant, MaskSet, Placement, SslModel};
use fatlab::nn::{Conv1d, Gru};
use fatlab::numerics::{grad_check, Graph, ParamStore, Var, REL_FLOOR};
use fatlab::Result;

const TOL: f64 = 1e-4;

fn weighted_sum(g: &mut Graph, x: Var, w: &fatlab::numerics::Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(x, wv)?;
    Ok(g.sum(p))
}

#[test]
fn dilated_strided_conv() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", 3, 4, 3, 2, 2, 2, true, &mut r);
        let ids: Vec<_> = store.ids().collect();
        let x = uniform(&mut r, &[17, 3], 1.0);
        let probe = {
            let mut g = Graph::inference();
            let xv = g.constant(x.clone());
            let y = conv.forward(&mut g, &store, xv).unwrap();
            uniform(&mut r, g.shape(y), 1.0)
        };
        let rep = check_with_params(
            |g, s, v| {
                let y = conv.forward(g, s, v[0])?;
                weighted_sum(g, y, &probe)
            },
            vec![x],
            &store,
            &ids,
            &mut r,
        )
        .unwrap();
        assert!(rep.passes(TOL), "seed {seed}: {rep:?}");
    }
}

#[test]
fn gru_through_time() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "g", 3, 4, &mut r);
        let ids: Vec<_> = store.ids().collect();
        let x = uniform(&mut r, &[6, 3], 1.0);
        let w = uniform(&mut r, &[6, 4], 1.0);
        let rep = check_with_params(
            |g, s, v| {
                let y = gru.forward(g, s, v[0])?;
                weighted_sum(g, y, &w)
            },
            vec![x],
            &store,
            &ids,
            &mut r,
        )
        .unwrap();
        assert!(rep.passes(TOL), "seed {seed}: {rep:?}");
    }
}

#[test]
fn key_bias_gradient_is_exactly_zero() {
    // Softmax ignores a per-row shift, so the key bias never matters. Its
    // analytic gradient is zero up to rounding, far below the checker floor.
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let site = FusionSite::new(&mut store, FusionVariant::Da, "s", 6, 2, &mut r);
    let kb = store.find("s.k.bias").unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        *store.value_mut(id) = uniform(&mut r, store.value(id).shape(), 0.5);
    }
    let main = uniform(&mut r, &[5, 6], 1.0);
    let aux = uniform(&mut r, &[5, 6], 1.0);
    let mut g = Graph::new();
    let (m, a) = (g.constant(main), g.constant(aux));
    let out = site.fuse(&mut g, &store, m, a).unwrap();
    let sq = g.mul(out, out).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    let grads = g.param_grads();
    let (_, gk) = grads.iter().find(|(id, _)| *id == kb).unwrap();
    assert!(gk.iter().all(|v| v.abs() < 1e-9 * REL_FLOOR), "{gk:?}");
}

#[test]
fn whole_model_masked_loss() {
    // Through both branches, every fusion site, masking and the head; checked
    // on the parameters that touch each of those paths.
    let cfg = tiny_encoder();
    let mut r = rng(11);
    let x = signal(&mut r, 3000);
    let y = signal(&mut r, 3000);
    for variant in [FusionVariant::Oa, FusionVariant::Sf] {
        let m = SslModel::new(cfg.clone(), Some(FusionConfig::new(variant, Placement::All)), 4).unwrap();
        let frames = m.frames(x.len()).unwrap();
        let targets: Vec<u32> = (0..frames).map(|_| r.random_range(0..cfg.k as u32)).collect();
        let mask = MaskSet::from_indices(frames, vec![1, 2, 3, frames - 1]);
        let mut ids = m.fusion_param_ids();
        for name in ["mask_emb", "head.bias", "final.norm.gain"] {
            ids.extend(m.store.find(name));
        }
        assert_eq!(ids.len(), m.fusion_param_ids().len() + 3);
        let rep = check_with_params(
            |g, s, _| {
                assert!(std::ptr::eq(s, &m.store));
                let f = m.forward_two_branch(g, &x, &y, Some(&mask))?;
                masked_prediction_loss(g, f.logits, &targets, &mask, 0.2)
            },
            Vec::new(),
            &m.store,
            &ids,
            &mut r,
        )
        .unwrap();
        assert!(rep.passes(TOL), "{variant:?}: {rep:?}");
    }
}

#[test]
fn checker_flags_a_wrong_gradient() {
    // scalar_fn with a deliberately wrong gradient must be caught
    let x = fatlab::numerics::Tensor::vector(vec![0.4, -0.7]);
    let rep = grad_check(
        |g, v| {
            let val = g.value(v[0]).data().iter().map(|a| a * a).sum();
            g.scalar_fn(v[0], val, vec![1.0, 1.0])
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(!rep.passes(TOL));
}
