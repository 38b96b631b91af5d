use std::collections::HashSet;

use super::{Graph, Mode, Param, Var};
use crate::error::{Error, Result};

const CHECK_SEED: u64 = 0x5eed;

fn eval_scalar<F>(f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(Mode::Train, CHECK_SEED);
    let out = f(&mut g)?;
    let v = g.value(out);
    if !v.is_scalar() {
        return Err(Error::Graph(format!(
            "grad_check needs a scalar function, got {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of `f` against central differences and
/// returns the largest `|analytic − numeric| / max(1, |analytic|, |numeric|)`
/// over every component of `params`.
///
/// `f` is evaluated on a fresh training-mode tape with a fixed seed each
/// time, so dropout masks repeat between evaluations.
pub fn grad_check<F>(params: &[Param], epsilon: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Graph) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let mut seen = HashSet::new();
    let unique: Vec<&Param> = params.iter().filter(|p| seen.insert(p.key())).collect();

    for p in &unique {
        p.zero_grad();
    }
    let mut g = Graph::new(Mode::Train, CHECK_SEED);
    let out = f(&mut g)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = unique.iter().map(|p| p.grad().data().to_vec()).collect();

    let mut worst: f64 = 0.0;
    for (p, grad) in unique.iter().zip(&analytic) {
        for (k, &a) in grad.iter().enumerate() {
            let orig = p.value().data()[k];
            p.value_mut().data_mut()[k] = orig + epsilon;
            let plus = eval_scalar(&mut f);
            p.value_mut().data_mut()[k] = orig - epsilon;
            let minus = eval_scalar(&mut f);
            p.value_mut().data_mut()[k] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "f is not finite when perturbing {}[{k}]",
                    p.id()
                )));
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sum_of_squares() {
        let p = Param::new("x", Tensor::from_slice(&[3], &[1.0, 2.0, 3.0]));
        let err = grad_check(std::slice::from_ref(&p), 1e-5, |g| {
            let x = g.param(&p);
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = Param::new("x", Tensor::from_slice(&[2], &[1.0, 2.0]));
        let err = grad_check(std::slice::from_ref(&p), 1e-5, |g| {
            let x = g.param(&p);
            let zero = g.scale(x, 0.0);
            let s = g.sum(zero);
            let c = g.input(Tensor::scalar(4.0));
            g.add(s, c)
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn reports_non_finite_component() {
        let p = Param::new("x", Tensor::scalar(0.0));
        let r = grad_check(std::slice::from_ref(&p), 1e-5, |g| {
            let x = g.param(&p);
            let v = g.value(x).item();
            // finite at 0, infinite once perturbed
            let c = g.input(Tensor::scalar(if v == 0.0 { 0.0 } else { f64::INFINITY }));
            let s = g.sum(x);
            g.add(s, c)
        });
        match r {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("x[0]")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_out_of_range_epsilon() {
        let p = Param::new("x", Tensor::scalar(0.0));
        assert!(grad_check(std::slice::from_ref(&p), 1e-1, |g| Ok(g.param(&p))).is_err());
    }
}
