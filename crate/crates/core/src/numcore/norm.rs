use super::ops::channel_affine;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{config_err, Result};

/// Variance stabilizer used by every normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Group normalization without the affine step: each (sample, group) slice
/// is shifted to zero mean and scaled to unit variance.
pub fn group_norm_plain<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(config_err!("group_norm: {c} channels not divisible by {groups} groups"));
    }
    let span = (c / groups) * h * w;
    let eps = T::from_f64_lossy(NORM_EPS);
    let count = T::from_usize(span).expect("size fits");
    let mut out = x.to_vec();
    let mut inv_std = Vec::with_capacity(n * groups);
    for chunk in out.chunks_mut(span) {
        let mean = chunk.iter().copied().sum::<T>() / count;
        let var = chunk.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / count;
        let inv = T::one() / (var + eps).sqrt();
        chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        inv_std.push(inv);
    }
    let xhat = out.clone();
    Ok(Tensor::from_op(vec![n, c, h, w], out, "group_norm", vec![x.clone()], move |g| {
        let mut gx = vec![T::zero(); g.len()];
        for (((gc, xc), oc), inv) in g.chunks(span).zip(xhat.chunks(span)).zip(gx.chunks_mut(span)).zip(&inv_std) {
            let mean_g = gc.iter().copied().sum::<T>() / count;
            let mean_gx = gc.iter().zip(xc).map(|(a, b)| *a * *b).sum::<T>() / count;
            for ((o, gv), xv) in oc.iter_mut().zip(gc).zip(xc) {
                *o = *inv * (*gv - mean_g - *xv * mean_gx);
            }
        }
        vec![Some(gx)]
    }))
}

/// Group normalization followed by a per-channel affine.
pub fn group_norm<T: Scalar>(x: &Tensor<T>, groups: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let normed = group_norm_plain(x, groups)?;
    channel_affine(&normed, Some(gamma), Some(beta))
}
