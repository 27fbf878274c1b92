//! Central finite-difference gradients, the independent oracle against
//! which every analytic backward rule is checked.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Relative error between an analytic and a numerical derivative, with a
/// small absolute floor so dead coordinates do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate of `x`. `f` must be a pure function of its argument.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    let values = finite_diff_at(&mut f, x, h, &coords)?;
    Ok(Tensor::from_parts(values, x.shape().to_vec()))
}

/// Central differences on a chosen coordinate subset (for large tensors).
/// Returns one derivative per entry of `coords`.
pub fn finite_diff_grad_sampled<T, F>(
    mut f: F,
    x: &Tensor<T>,
    h: T,
    coords: &[usize],
) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    finite_diff_at(&mut f, x, h, coords)
}

fn finite_diff_at<T, F>(f: &mut F, x: &Tensor<T>, h: T, coords: &[usize]) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if h <= T::zero() {
        return Err(crate::error::Error::parameter("h", "must be positive"));
    }
    let two_h = h + h;
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let mut plus = x.data().to_vec();
        plus[i] = plus[i] + h;
        let mut minus = x.data().to_vec();
        minus[i] = minus[i] - h;
        let fp = f(&Tensor::from_parts(plus, x.shape().to_vec()))?;
        let fm = f(&Tensor::from_parts(minus, x.shape().to_vec()))?;
        out.push((fp - fm) / two_h);
    }
    Ok(out)
}
