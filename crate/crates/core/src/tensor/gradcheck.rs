use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the autodiff gradient of a scalar function against central
/// differences with step `h`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if h <= T::zero() {
        return Err(Error::contract("grad_check step must be positive"));
    }
    let eval = |input: Tensor<T>| -> Result<T> {
        let mut g = Graph::new();
        let v = g.constant(input);
        let root = f(&mut g, v)?;
        g.value(root).item()
    };

    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let root = f(&mut g, v)?;
    g.backward(root)?;
    let analytic: Vec<T> = match g.grad(v) {
        Some(grad) => grad.to_vec(),
        None => vec![T::zero(); x.len()],
    };

    let two_h = h + h;
    let mut worst = T::zero();
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] = x.data()[i] + h;
        let mut minus = x.clone();
        minus.data_mut()[i] = x.data()[i] - h;
        let numeric = (eval(plus)? - eval(minus)?) / two_h;
        let err = (a - numeric).abs() / a.abs().max(T::one());
        if !(err <= worst) {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::<f64>::from_fn(vec![5], |i| i as f64 - 2.0);
        let err = grad_check(|g, v| g.sum(v), &x, 1e-3).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn square_sum_matches_polynomial_oracle() {
        let x = Tensor::<f64>::new(vec![3], vec![1., 2., 3.]).unwrap();
        let f = |g: &mut Graph<f64>, v: Var| {
            let sq = g.mul(v, v)?;
            g.sum(sq)
        };
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let r = f(&mut g, v).unwrap();
        g.backward(r).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[2., 4., 6.]);
        let err = grad_check(f, &x, 1e-4).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::<f64>::zeros(vec![1]);
        assert!(grad_check(|g, v| g.sum(v), &x, 0.0).is_err());
    }
}
