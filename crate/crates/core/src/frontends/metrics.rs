use std::f64::consts::LN_10;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub const SI_SNR_CLAMP_DB: f64 = 60.0;

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - m).collect()
}

/// Scale-invariant SNR of `estimate` against `reference`, in dB, clamped to
/// `±60`.
pub fn si_snr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "si_snr: estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let e = zero_mean(estimate);
    let r = zero_mean(reference);
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(Error::invalid("si_snr: reference has zero energy"));
    }
    let scale = e.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr;
    let (mut target, mut resid) = (0.0, 0.0);
    for (a, b) in e.iter().zip(&r) {
        let s = scale * b;
        target += s * s;
        resid += (a - s) * (a - s);
    }
    let db = if resid == 0.0 {
        SI_SNR_CLAMP_DB
    } else if target == 0.0 {
        -SI_SNR_CLAMP_DB
    } else {
        10.0 * (target / resid).log10()
    };
    Ok(db.clamp(-SI_SNR_CLAMP_DB, SI_SNR_CLAMP_DB))
}

const LOSS_EPS: f64 = 1e-10;

/// Negative SI-SNR (dB) of `estimate` (`[len, 1]` on the graph) as a
/// differentiable loss. Unclamped, with a small floor inside the logs.
pub fn neg_si_snr_loss(g: &mut Graph, estimate: Var, reference: &[f64]) -> Result<Var> {
    let len = g.value(estimate).numel();
    if len != reference.len() {
        return Err(Error::Shape(format!(
            "neg_si_snr_loss: estimate {:?} against reference of {} samples",
            g.shape(estimate),
            reference.len()
        )));
    }
    let r = zero_mean(reference);
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(Error::invalid("si_snr: reference has zero energy"));
    }
    let shape = g.shape(estimate).to_vec();
    let r = g.constant(Tensor::new(shape, r)?);
    let mean = g.mean(estimate);
    let e = g.sub(estimate, mean)?;
    let er = g.mul(e, r)?;
    let dot = g.sum(er);
    let proj = g.scale(dot, 1.0 / rr);
    let s = g.mul(r, proj)?;
    let resid = g.sub(e, s)?;
    let ss = g.mul(s, s)?;
    let ss = g.sum(ss);
    let ss = g.add_scalar(ss, LOSS_EPS);
    let rs = g.mul(resid, resid)?;
    let rs = g.sum(rs);
    let rs = g.add_scalar(rs, LOSS_EPS);
    let ratio = g.div(rs, ss)?;
    let l = g.log(ratio);
    Ok(g.scale(l, 10.0 / LN_10))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_hits_clamp() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.2).sin()).collect();
        assert_eq!(si_snr(&x, &x).unwrap(), 60.0);
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_snr(&x2, &x).unwrap(), si_snr(&x, &x).unwrap());
    }

    #[test]
    fn orthogonal_equal_norm_is_zero_db() {
        // zero-mean, orthogonal, equal norm
        let x = [1.0, -1.0, 1.0, -1.0];
        let n = [1.0, 1.0, -1.0, -1.0];
        let est: Vec<f64> = x.iter().zip(&n).map(|(a, b)| a + b).collect();
        assert!(si_snr(&est, &x).unwrap().abs() < 1e-12);
    }

    #[test]
    fn zero_reference_fails() {
        assert!(si_snr(&[1.0, 2.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn loss_matches_metric() {
        let r: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        let e: Vec<f64> = r
            .iter()
            .enumerate()
            .map(|(i, v)| 0.7 * v + 0.2 * ((i * 13 % 5) as f64 - 2.0))
            .collect();
        let mut g = Graph::new();
        let ev = g.leaf(Tensor::new(vec![64, 1], e.clone()).unwrap());
        let l = neg_si_snr_loss(&mut g, ev, &r).unwrap();
        assert!((g.value(l).item() + si_snr(&e, &r).unwrap()).abs() < 1e-6);
    }
}
