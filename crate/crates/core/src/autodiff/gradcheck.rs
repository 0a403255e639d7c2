//! Central finite-difference verification of tape gradients.

use std::fmt;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradient magnitudes below this are treated as this, so a tensor whose true
/// gradient is ~0 is judged on absolute error instead of dividing noise by noise.
const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradEntry {
    pub name: String,
    pub max_abs_error: f64,
    /// `max_abs_error` divided by the largest analytic or numeric gradient
    /// magnitude in the tensor.
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_error))
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<28} abs {:.3e}  rel {:.3e}  {}",
                e.name,
                e.max_abs_error,
                e.max_rel_error,
                if e.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn evaluate<F>(forward: &F, params: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.constant(p.clone())).collect();
    forward(&tape, &vars)?.value().item()
}

/// Checks the tape gradient of `forward` against central differences
/// `(f(p+eps) − f(p−eps)) / 2eps` for every coordinate of every parameter.
pub fn grad_check<F>(forward: F, params: &[(&str, Tensor)], eps: f64, tol: f64) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|(_, p)| tape.param(p.clone())).collect();
    let loss = forward(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(v)).collect();
    compare_gradients(forward, params, &analytic, eps, tol)
}

/// The numeric half of [`grad_check`]: compares caller-supplied analytic
/// gradients against central differences.
pub fn compare_gradients<F>(
    forward: F,
    params: &[(&str, Tensor)],
    analytic: &[Tensor],
    eps: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if analytic.len() != params.len() {
        return Err(Error::Invalid(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut values: Vec<Tensor> = params.iter().map(|(_, p)| p.clone()).collect();
    let first = evaluate(&forward, &values)?;
    let second = evaluate(&forward, &values)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut entries = Vec::with_capacity(params.len());
    for (k, (name, original)) in params.iter().enumerate() {
        if analytic[k].shape() != original.shape() {
            return Err(Error::shape(
                "grad_check",
                format!("gradient for {name} has shape {:?}", analytic[k].shape()),
            ));
        }
        let mut max_abs: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..original.len() {
            let x = original.data()[i];
            values[k].data_mut()[i] = x + eps;
            let plus = evaluate(&forward, &values)?;
            values[k].data_mut()[i] = x - eps;
            let minus = evaluate(&forward, &values)?;
            values[k].data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k].data()[i];
            max_abs = max_abs.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        let max_rel = if max_abs == 0.0 { 0.0 } else { max_abs / scale.max(REL_FLOOR) };
        entries.push(GradEntry {
            name: name.to_string(),
            max_abs_error: max_abs,
            max_rel_error: max_rel,
            passed: max_rel <= tol,
        });
    }
    Ok(GradReport { entries, tolerance: tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    fn quadratic<'t>(_t: &'t Tape, p: &[Var<'t>]) -> Result<Var<'t>> {
        p[0].mul(&p[0])?.sum()
    }

    #[test]
    fn quadratic_passes_tightly() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]).unwrap();
        let r = grad_check(quadratic, &[("x", x)], 1e-5, 1e-4).unwrap();
        assert!(r.passed());
        assert!(r.max_rel_error() < 1e-8, "{r}");
    }

    #[test]
    fn doubled_gradient_fails() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]).unwrap();
        let doubled = x.scale(4.0).unwrap();
        let r = compare_gradients(quadratic, &[("x", x)], &[doubled], 1e-5, 1e-4).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn nondeterministic_forward_is_detected() {
        let calls = Cell::new(0u32);
        let x = Tensor::from_vec(vec![1.0]).unwrap();
        let r = grad_check(
            |_t, p| {
                calls.set(calls.get() + 1);
                p[0].scale(calls.get() as f64)?.sum()
            },
            &[("x", x)],
            1e-5,
            1e-4,
        );
        assert!(matches!(r, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn elementwise_ops_pass_on_random_instances() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::uniform(&[2, 3], 1.0, &mut rng);
            let b = Tensor::uniform(&[1, 3], 1.0, &mut rng);
            let r = grad_check(
                |_t, p| {
                    let s = p[0].add(&p[1])?.sigmoid()?;
                    let t = p[0].sub(&p[1])?.tanh()?.mul(&p[1])?;
                    let e = p[0].scale(0.5)?.exp()?.affine(1.0, 1.0)?.ln()?;
                    let r = p[0].relu()?;
                    s.mul(&t)?.add(&e)?.add(&r)?.sum()
                },
                &[("a", a), ("b", b)],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn structural_ops_pass() {
        use crate::tensor::Padding;
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = Tensor::uniform(&[2, 4, 4], 1.0, &mut rng);
            let k = Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut rng);
            let k3 = Tensor::uniform(&[2, 1, 3, 3, 3], 1.0, &mut rng);
            let r = grad_check(
                |_t, p| {
                    let y = p[0].conv2d(&p[1], Padding::Same)?; // 3×4×4
                    let a = y.narrow(0, 0, 1)?.softmax_spatial()?;
                    let z = y.mul(&a)?.avg_pool2()?.spatial_avg_pool()?;
                    let v = y.reshape(&[1, 3, 4, 4])?.conv3d(&p[2], Padding::Same)?;
                    let m = v.reshape(&[2, 48])?.transpose()?.mean_rows()?;
                    let c = super::super::concat(&[&z, &m], 0)?;
                    c.cross_entropy(1)?.add(&c.tanh()?.sum()?)
                },
                &[("x", x), ("k", k), ("k3", k3)],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed(), "{r}");
        }
    }
}
