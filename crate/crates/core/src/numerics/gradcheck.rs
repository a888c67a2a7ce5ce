//! Central finite-difference gradient checker.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error for each input tensor, in input order.
    pub per_input: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_input.iter().cloned().fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_error() < tol
    }
}

/// Denominator floor of [`relative_error`]. Central differences of an O(1)
/// function carry roundoff near `1e-16 / h`, about `1e-11` at `h = 1e-5`, so
/// a gradient that is exactly zero (a key bias under softmax) would otherwise
/// score as a large relative error.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the gradients produced by `backward` against central differences
/// with step `h`. `f` builds a scalar from leaves holding `inputs`; it must be
/// deterministic.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor], index: usize| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check forward".into(),
                index,
            });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check forward".into(),
            index: 0,
        });
    }
    g.backward(out)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut worst: f64 = 0.0;
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval(&work, i)?;
            work[i].data_mut()[j] = orig - h;
            let fm = eval(&work, i)?;
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(a, numeric));
        }
        per_input.push(worst);
    }
    Ok(GradCheckReport { per_input })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact_to_truncation() {
        // f = sum(x^2 + 3x); central differences are exact up to rounding.
        let x = Tensor::vector(vec![0.3, -1.2, 2.5, 0.9]);
        let report = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let lin = g.scale(v[0], 3.0);
                let s = g.add(sq, lin)?;
                Ok(g.sum(s))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_error() < 1e-8, "{:?}", report);
    }

    #[test]
    fn non_finite_forward_names_input() {
        let x = Tensor::vector(vec![-1.0]);
        let err = grad_check(
            |g, v| {
                let l = g.log(v[0]);
                Ok(g.sum(l))
            },
            &[x],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 0, .. }));
    }
}
