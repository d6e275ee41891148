//! Central finite-difference gradient checking for scalar functions of
//! parameter variables.

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};

/// Element-wise comparison of analytic and numeric derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Worst probe: (variable, flat index, analytic, numeric).
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Derivatives smaller than this are compared on an absolute scale: a
/// float64 central difference carries roughly 1e-10 of roundoff, so an
/// exactly-zero derivative cannot be resolved relatively.
pub const REL_FLOOR: f64 = 1e-5;

/// Roundoff allowance of a central difference, in units of
/// `f64::EPSILON * |f| / eps`. Forward passes accumulate a few ulps.
pub const ROUNDOFF_ULPS: f64 = 16.0;

/// Relative error after discounting the numeric derivative's roundoff bound.
fn rel_err(a: f64, n: f64, roundoff: f64) -> f64 {
    ((a - n).abs() - roundoff).max(0.0) / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn read(v: &Var, idx: usize) -> Result<f64> {
    Ok(v.as_tensor().flatten_all()?.get(idx)?.to_scalar::<f64>()?)
}

fn write(v: &Var, idx: usize, value: f64) -> Result<()> {
    let mut flat: Vec<f64> = v.as_tensor().flatten_all()?.to_vec1()?;
    flat[idx] = value;
    v.set(&Tensor::from_vec(flat, v.as_tensor().shape(), v.device())?)?;
    Ok(())
}

/// Probes `per_var` random entries of every variable (all entries when the
/// variable is smaller). Variables must be float64.
pub fn check<F>(vars: &[(String, Var)], f: F, per_var: usize, eps: f64, seed: u64) -> Result<GradReport>
where
    F: Fn() -> Result<Tensor>,
{
    let grads = f()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (name, v) in vars {
        ensure!(v.dtype() == DType::F64, "gradient check needs float64, {name} is {:?}", v.dtype());
        let n = v.elem_count();
        let analytic: Vec<f64> = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; n],
        };
        let idxs: Vec<usize> = if n <= per_var {
            (0..n).collect()
        } else {
            (0..per_var).map(|_| rng.random_range(0..n)).collect()
        };
        for idx in idxs {
            let orig = read(v, idx)?;
            write(v, idx, orig + eps)?;
            let up = f()?.to_scalar::<f64>()?;
            write(v, idx, orig - eps)?;
            let down = f()?.to_scalar::<f64>()?;
            write(v, idx, orig)?;
            let numeric = (up - down) / (2.0 * eps);
            let roundoff = ROUNDOFF_ULPS * f64::EPSILON * up.abs().max(down.abs()) / eps;
            let e = rel_err(analytic[idx], numeric, roundoff);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some((name.clone(), idx, analytic[idx], numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn quadratic_gradient_is_exact() {
        let v = Var::from_vec(vec![0.5f64, -1.5, 2.0], 3, &Device::Cpu).unwrap();
        let f = || Ok((v.as_tensor().sqr()?.sum_all()? * 3.0)?);
        let r = check(&[("v".into(), v.clone())], f, 10, 1e-5, 0).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let v = Var::from_vec(vec![0.5f64, -1.5], 2, &Device::Cpu).unwrap();
        // detach hides the second factor from autograd
        let f = || Ok((v.as_tensor() * v.as_tensor().detach())?.sum_all()?);
        let r = check(&[("v".into(), v.clone())], f, 10, 1e-5, 0).unwrap();
        assert!(r.max_rel_err > 0.4, "{r:?}");
    }
}
