//! Central finite-difference derivatives, used as independent checks on the
//! analytic gradients and curvature identities.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn eval(f: &impl Fn(&Tensor) -> f64, x: &Tensor) -> Result<f64> {
    let v = f(x);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("function value {v} in stencil")));
    }
    Ok(v)
}

/// Central-difference gradient of a scalar function.
pub fn central_gradient(f: &impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Result<Tensor> {
    if step <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let x0 = x.data()[i];
        probe.data_mut()[i] = x0 + step;
        let fp = eval(f, &probe)?;
        probe.data_mut()[i] = x0 - step;
        let fm = eval(f, &probe)?;
        probe.data_mut()[i] = x0;
        g.data_mut()[i] = (fp - fm) / (2.0 * step);
    }
    Ok(g)
}

/// Central-difference Hessian of a scalar function, symmetrized as
/// `(H + H^T) / 2`. Returns an `n x n` matrix for `n = x.len()`.
pub fn finite_diff_hessian(f: &impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Result<Tensor> {
    if step <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let n = x.len();
    let mut h = vec![0.0; n * n];
    let mut probe = x.clone();
    let f0 = eval(f, x)?;
    let at = |probe: &mut Tensor, i: usize, di: f64, j: usize, dj: f64| -> Result<f64> {
        let (xi, xj) = (x.data()[i], x.data()[j]);
        probe.data_mut()[i] = xi + di;
        probe.data_mut()[j] += dj;
        let v = eval(f, probe);
        probe.data_mut()[i] = xi;
        probe.data_mut()[j] = xj;
        v
    };
    for i in 0..n {
        let fp = at(&mut probe, i, step, i, 0.0)?;
        let fm = at(&mut probe, i, -step, i, 0.0)?;
        h[i * n + i] = (fp - 2.0 * f0 + fm) / (step * step);
        for j in (i + 1)..n {
            let fpp = at(&mut probe, i, step, j, step)?;
            let fpm = at(&mut probe, i, step, j, -step)?;
            let fmp = at(&mut probe, i, -step, j, step)?;
            let fmm = at(&mut probe, i, -step, j, -step)?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * step * step);
            h[i * n + j] = v;
            h[j * n + i] = v;
        }
    }
    let mut sym = h.clone();
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = 0.5 * (h[i * n + j] + h[j * n + i]);
        }
    }
    Tensor::new(vec![n, n], sym)
}
