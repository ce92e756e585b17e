use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences `(f(x + h e_i) − f(x − h e_i)) / 2h`.
///
/// Returns the largest per-coordinate error `|g_rev − g_fd| / max(1, |g_rev|, |g_fd|)`,
/// i.e. relative error with a unit floor so that vanishing gradients are
/// compared absolutely.
pub fn check_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {h}")));
    }
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&tape, xv)?;
    if !y.value().is_scalar() {
        return Err(Error::contract("check_gradient needs a scalar-valued function"));
    }
    y.backward()?;
    let reverse = xv.grad().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |p: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(p.clone());
        Ok(f(&tape, v)?.item())
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let g = reverse.data()[i];
        let err = (g - fd).abs() / 1f64.max(g.abs()).max(fd.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = Rng::new(1);
        let x = rng.normal_tensor(&[6]);
        let err = check_gradient(|_, x| Ok(x.square().sum()), &x, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::ones(&[3]);
        let err = check_gradient(|t, _| Ok(t.constant(Tensor::scalar(2.5))), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn softmax_sum_gradient_vanishes() {
        let x = Tensor::new(&[4], vec![0.1, -2.0, 1.5, 0.0]).unwrap();
        let err = check_gradient(|_, x| Ok(x.softmax(0)?.sum()), &x, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::ones(&[1]);
        assert!(check_gradient(|_, x| Ok(x.sum()), &x, 0.0).is_err());
        assert!(check_gradient(|_, x| Ok(x.sum()), &x, -1e-3).is_err());
    }
}
