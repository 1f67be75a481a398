//! Central finite differences, the reference the tape is checked against.

use super::Tensor;
use crate::error::{contract_err, Result};
use std::collections::BTreeMap;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Central-difference estimate `(f(θ+s) − f(θ−s)) / 2s` for every coordinate
/// of every leaf. `f` must return a one-element tensor.
pub fn finite_diff<F>(
    f: F,
    leaves: &BTreeMap<String, Tensor>,
    step: f64,
) -> Result<BTreeMap<String, Tensor>>
where
    F: Fn(&BTreeMap<String, Tensor>) -> Result<Tensor>,
{
    if !(step > 0.0) {
        return Err(contract_err!("finite-difference step must be positive, got {step}"));
    }
    let eval = |l: &BTreeMap<String, Tensor>| -> Result<f64> {
        let out = f(l)?;
        if out.len() != 1 {
            return Err(contract_err!(
                "finite differences need a scalar function, got shape {:?}",
                out.shape()
            ));
        }
        Ok(out.data()[0])
    };
    // Surface a non-scalar `f` even when there is nothing to perturb.
    eval(leaves)?;

    let mut work = leaves.clone();
    let mut out = BTreeMap::new();
    for (name, value) in leaves {
        let mut grad = Tensor::zeros(value.shape());
        for i in 0..value.len() {
            let x = value.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = x + step;
            let plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = x - step;
            let minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = x;
            grad.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.insert(name.clone(), grad);
    }
    Ok(out)
}

/// `max |a − b| / max(max |b|, 1e-12)`: the largest deviation relative to the
/// scale of the reference gradient.
pub fn max_relative_error(analytic: &Tensor, reference: &Tensor) -> Result<f64> {
    let diff = analytic.max_abs_diff(reference)?;
    Ok(diff / reference.max_abs().max(1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn cubic() {
        let g = finite_diff(|l| Ok(l["x"].map(|v| v.powi(3))), &one("x", 2.0), 1e-5).unwrap();
        assert!((g["x"].item().unwrap() - 12.0).abs() < 1e-6);
    }

    #[test]
    fn exp_at_zero() {
        let g = finite_diff(|l| Ok(l["x"].map(f64::exp)), &one("x", 0.0), DEFAULT_FD_STEP).unwrap();
        assert!((g["x"].item().unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn non_scalar_is_contract_error() {
        let leaves = BTreeMap::from([("x".to_string(), Tensor::zeros(&[3]))]);
        let r = finite_diff(|l| Ok(l["x"].clone()), &leaves, 1e-6);
        assert!(matches!(r, Err(Error::Contract(_))));
        let r = finite_diff(|l| Ok(l["x"].clone()), &leaves, 0.0);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
