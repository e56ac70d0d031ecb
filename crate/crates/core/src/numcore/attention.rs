//! Multi-head self-attention over the spatial token axis of a feature map.

use super::conv::{add_channel_bias, conv2d};
use super::norm::group_norm;
use super::ops::{add, batched_matmul, reshape, scale, slice_channels, softmax_last};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{config_err, Result};

/// Parameters of one attention layer on `C` channels.
#[derive(Clone, Debug)]
pub struct AttentionWeights<T: Scalar> {
    pub norm_gamma: Tensor<T>,
    pub norm_beta: Tensor<T>,
    /// `[3C, C, 1, 1]` projection to queries, keys and values.
    pub qkv_weight: Tensor<T>,
    pub qkv_bias: Tensor<T>,
    /// `[C, C, 1, 1]` output projection.
    pub proj_weight: Tensor<T>,
    pub proj_bias: Tensor<T>,
}

/// Scaled dot-product attention. `q`, `k`, `v` are `[B, d, L]`; returns the
/// attended values `[B, d, L]` and the attention matrix `[B, L, L]` whose
/// rows are softmax distributions over keys.
pub fn scaled_dot_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = q.shape()[1];
    let scores = batched_matmul(q, k, true, false)?;
    let scores = scale(&scores, T::one() / T::from_usize(d).expect("size fits").sqrt());
    let attn = softmax_last(&scores)?;
    let out = batched_matmul(v, &attn, false, true)?;
    Ok((out, attn))
}

/// `x + proj(attention(qkv(group_norm(x))))` with `heads` heads over the
/// `H·W` tokens.
pub fn self_attention<T: Scalar>(
    x: &Tensor<T>,
    heads: usize,
    groups: usize,
    weights: &AttentionWeights<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if heads == 0 || c % heads != 0 {
        return Err(config_err!("self_attention: {c} channels not divisible by {heads} heads"));
    }
    let l = h * w;
    let dh = c / heads;
    let normed = group_norm(x, groups, &weights.norm_gamma, &weights.norm_beta)?;
    let qkv = add_channel_bias(&conv2d(&normed, &weights.qkv_weight, 1, 0)?, &weights.qkv_bias)?;
    let split = |i: usize| -> Result<Tensor<T>> { reshape(&slice_channels(&qkv, i * c, c)?, &[n * heads, dh, l]) };
    let (q, k, v) = (split(0)?, split(1)?, split(2)?);
    let (attended, _) = scaled_dot_attention(&q, &k, &v)?;
    let attended = reshape(&attended, &[n, c, h, w])?;
    let projected = add_channel_bias(&conv2d(&attended, &weights.proj_weight, 1, 0)?, &weights.proj_bias)?;
    add(x, &projected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ops::sum;

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64) * 0.71).sin() * scale).collect()).unwrap()
    }

    fn weights(c: usize) -> AttentionWeights<f64> {
        AttentionWeights {
            norm_gamma: Tensor::ones(&[c]),
            norm_beta: Tensor::zeros(&[c]),
            qkv_weight: ramp(&[3 * c, c, 1, 1], 0.5),
            qkv_bias: ramp(&[3 * c], 0.1),
            proj_weight: ramp(&[c, c, 1, 1], 0.4),
            proj_bias: ramp(&[c], 0.2),
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let q = ramp(&[2, 4, 6], 1.0);
        let k = ramp(&[2, 4, 6], 2.0);
        let v = ramp(&[2, 4, 6], 1.0);
        let (_, attn) = scaled_dot_attention(&q, &k, &v).unwrap();
        for row in attn.to_vec().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn single_token_returns_value_projection() {
        let c = 4;
        let wts = weights(c);
        let x = ramp(&[1, c, 1, 1], 1.0);
        let y = self_attention(&x, 2, 2, &wts).unwrap();
        // With one token the softmax weight is 1, so the attended value is v itself.
        let normed = group_norm(&x, 2, &wts.norm_gamma, &wts.norm_beta).unwrap();
        let qkv = add_channel_bias(&conv2d(&normed, &wts.qkv_weight, 1, 0).unwrap(), &wts.qkv_bias).unwrap();
        let v = slice_channels(&qkv, 2 * c, c).unwrap();
        let expected =
            add(&x, &add_channel_bias(&conv2d(&v, &wts.proj_weight, 1, 0).unwrap(), &wts.proj_bias).unwrap()).unwrap();
        for (a, b) in y.to_vec().iter().zip(expected.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_must_divide_channels() {
        let x = ramp(&[1, 4, 2, 2], 1.0);
        assert!(matches!(self_attention(&x, 3, 2, &weights(4)), Err(crate::Error::Config(_))));
    }

    #[test]
    fn gradient_reaches_projection() {
        let mut w = weights(4);
        w.proj_weight = w.proj_weight.requires_grad();
        let x = ramp(&[1, 4, 2, 2], 1.0);
        sum(&self_attention(&x, 2, 2, &w).unwrap()).backward().unwrap();
        assert!(w.proj_weight.grad().unwrap().iter().any(|g| *g != 0.0));
    }
}
