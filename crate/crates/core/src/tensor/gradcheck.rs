use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences `(f(x + h) - f(x - h)) / 2h`, element by element.
///
/// Returns the largest relative error, using
/// `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point);
        let out = f(&mut g, v)?;
        scalar_value(&g, out)
    };

    let mut g = Graph::new();
    let mut leaf = x.clone();
    leaf.zero_grad();
    let v = g.leaf(leaf.with_grad());
    let out = f(&mut g, v)?;
    scalar_value(&g, out)?;
    g.backward(out)?;
    let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

fn scalar_value(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::NotScalar(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::new(vec![2, 3], vec![0.1, -0.4, 2.0, 3.5, -1.0, 0.25]).unwrap();
        let err = grad_check(|g, v| g.sum(v), &x, 1e-4).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn non_scalar_rejected() {
        let x = Tensor::zeros(&[2]);
        assert!(matches!(grad_check(|g, v| g.scale(v, 2.0), &x, 1e-4), Err(Error::NotScalar(_))));
        assert!(grad_check(|g, v| g.sum(v), &x, 0.0).is_err());
    }
}
