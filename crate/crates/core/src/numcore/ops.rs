//! Differentiable elementwise, reduction, layout and matrix ops.
//!
//! Broadcasting is limited to the scalar-tensor and per-channel forms the
//! network needs; everything else requires identical shapes.

use super::scalar::{gemm, Scalar};
use super::tensor::{numel, Tensor};
use crate::error::{dim_err, Result};

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| *x + *y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, "add", vec![a.clone(), b.clone()], |g| {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| *x - *y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, "sub", vec![a.clone(), b.clone()], |g| {
        vec![Some(g.to_vec()), Some(g.iter().map(|v| -*v).collect())]
    }))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let av = a.to_vec();
    let bv = b.to_vec();
    let data = av.iter().zip(&bv).map(|(x, y)| *x * *y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, "mul", vec![a.clone(), b.clone()], move |g| {
        let ga = g.iter().zip(&bv).map(|(g, y)| *g * *y).collect();
        let gb = g.iter().zip(&av).map(|(g, x)| *g * *x).collect();
        vec![Some(ga), Some(gb)]
    }))
}

/// Multiplies every element by a constant.
pub fn scale<T: Scalar>(x: &Tensor<T>, s: T) -> Tensor<T> {
    let data = x.data().iter().map(|v| *v * s).collect();
    Tensor::from_op(x.shape().to_vec(), data, "scale", vec![x.clone()], move |g| {
        vec![Some(g.iter().map(|v| *v * s).collect())]
    })
}

pub fn add_scalar<T: Scalar>(x: &Tensor<T>, s: T) -> Tensor<T> {
    let data = x.data().iter().map(|v| *v + s).collect();
    Tensor::from_op(x.shape().to_vec(), data, "add_scalar", vec![x.clone()], |g| vec![Some(g.to_vec())])
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `x · sigmoid(x)`.
pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let xv = x.to_vec();
    let sig: Vec<T> = xv.iter().map(|v| sigmoid(*v)).collect();
    let data = xv.iter().zip(&sig).map(|(v, s)| *v * *s).collect();
    Tensor::from_op(x.shape().to_vec(), data, "silu", vec![x.clone()], move |g| {
        let gx =
            g.iter().zip(xv.iter().zip(&sig)).map(|(g, (x, s))| *g * *s * (T::one() + *x * (T::one() - *s))).collect();
        vec![Some(gx)]
    })
}

pub fn sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let total = x.data().iter().copied().sum();
    let n = x.numel();
    Tensor::from_op(Vec::new(), vec![total], "sum", vec![x.clone()], move |g| vec![Some(vec![g[0]; n])])
}

pub fn mean<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.numel();
    let inv = T::one() / T::from_usize(n).expect("size fits");
    scale(&sum(x), inv)
}

/// Mean of squared differences.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mse", a, b)?;
    let diff: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(x, y)| *x - *y).collect();
    let n = T::from_usize(diff.len()).expect("size fits");
    let value = diff.iter().map(|d| *d * *d).sum::<T>() / n;
    Ok(Tensor::from_op(Vec::new(), vec![value], "mse", vec![a.clone(), b.clone()], move |g| {
        let k = g[0] * (T::one() + T::one()) / n;
        let ga: Vec<T> = diff.iter().map(|d| *d * k).collect();
        let gb = ga.iter().map(|v| -*v).collect();
        vec![Some(ga), Some(gb)]
    }))
}

/// Weighted sum `Σ x·w` with constant weights; handy as a gradcheck probe.
pub fn dot_const<T: Scalar>(x: &Tensor<T>, weights: &[T]) -> Result<Tensor<T>> {
    if weights.len() != x.numel() {
        return Err(dim_err!("dot_const: {} weights for {} elements", weights.len(), x.numel()));
    }
    let value = x.data().iter().zip(weights).map(|(a, b)| *a * *b).sum();
    let w = weights.to_vec();
    Ok(Tensor::from_op(Vec::new(), vec![value], "dot_const", vec![x.clone()], move |g| {
        vec![Some(w.iter().map(|v| *v * g[0]).collect())]
    }))
}

pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if numel(shape) != x.numel() || shape.contains(&0) {
        return Err(dim_err!("cannot reshape {:?} into {shape:?}", x.shape()));
    }
    Ok(Tensor::from_op(shape.to_vec(), x.to_vec(), "reshape", vec![x.clone()], |g| vec![Some(g.to_vec())]))
}

/// `[m,k] × [k,n] → [m,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(dim_err!("matmul needs 2-d operands, got {:?} and {:?}", a.shape(), b.shape()));
    };
    if k != k2 {
        return Err(dim_err!("matmul inner dimensions {k} and {k2} differ"));
    }
    let av = a.to_vec();
    let bv = b.to_vec();
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, &av, false, &bv, false, &mut out, false);
    Ok(Tensor::from_op(vec![m, n], out, "matmul", vec![a.clone(), b.clone()], move |g| {
        let mut ga = vec![T::zero(); m * k];
        gemm(m, n, k, g, false, &bv, true, &mut ga, false);
        let mut gb = vec![T::zero(); k * n];
        gemm(k, m, n, &av, true, g, false, &mut gb, false);
        vec![Some(ga), Some(gb)]
    }))
}

/// Dense layer `x · wᵀ + b` with `x: [N,in]`, `w: [out,in]`, `b: [out]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (&[n, fan_in], &[fan_out, w_in]) = (x.shape(), w.shape()) else {
        return Err(dim_err!("linear needs [N,in] and [out,in], got {:?} and {:?}", x.shape(), w.shape()));
    };
    if fan_in != w_in {
        return Err(dim_err!("linear: input width {fan_in} vs weight width {w_in}"));
    }
    if let Some(b) = b {
        if b.shape() != [fan_out] {
            return Err(dim_err!("linear: bias shape {:?}, expected [{fan_out}]", b.shape()));
        }
    }
    let xv = x.to_vec();
    let wv = w.to_vec();
    let mut out = vec![T::zero(); n * fan_out];
    gemm(n, fan_in, fan_out, &xv, false, &wv, true, &mut out, false);
    if let Some(b) = b {
        let bv = b.data();
        for row in out.chunks_mut(fan_out) {
            row.iter_mut().zip(bv.iter()).for_each(|(o, b)| *o = *o + *b);
        }
    }
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let has_bias = b.is_some();
    Ok(Tensor::from_op(vec![n, fan_out], out, "linear", parents, move |g| {
        let mut gx = vec![T::zero(); n * fan_in];
        gemm(n, fan_out, fan_in, g, false, &wv, false, &mut gx, false);
        let mut gw = vec![T::zero(); fan_out * fan_in];
        gemm(fan_out, n, fan_in, g, true, &xv, false, &mut gw, false);
        let mut grads = vec![Some(gx), Some(gw)];
        if has_bias {
            let mut gb = vec![T::zero(); fan_out];
            for row in g.chunks(fan_out) {
                gb.iter_mut().zip(row).for_each(|(a, b)| *a = *a + *b);
            }
            grads.push(Some(gb));
        }
        grads
    }))
}

/// Batched product over the leading axis of two 3-d tensors, with optional
/// transposition of the trailing two axes of either operand.
pub fn batched_matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_a: bool, trans_b: bool) -> Result<Tensor<T>> {
    let (&[ba, a0, a1], &[bb, b0, b1]) = (a.shape(), b.shape()) else {
        return Err(dim_err!("batched_matmul needs 3-d operands, got {:?} and {:?}", a.shape(), b.shape()));
    };
    if ba != bb {
        return Err(dim_err!("batched_matmul batch sizes {ba} and {bb} differ"));
    }
    let (m, k) = if trans_a { (a1, a0) } else { (a0, a1) };
    let (k2, n) = if trans_b { (b1, b0) } else { (b0, b1) };
    if k != k2 {
        return Err(dim_err!("batched_matmul inner dimensions {k} and {k2} differ"));
    }
    let av = a.to_vec();
    let bv = b.to_vec();
    let mut out = vec![T::zero(); ba * m * n];
    for i in 0..ba {
        gemm(
            m,
            k,
            n,
            &av[i * m * k..(i + 1) * m * k],
            trans_a,
            &bv[i * k * n..(i + 1) * k * n],
            trans_b,
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    Ok(Tensor::from_op(vec![ba, m, n], out, "batched_matmul", vec![a.clone(), b.clone()], move |g| {
        let mut ga = vec![T::zero(); ba * m * k];
        let mut gb = vec![T::zero(); ba * k * n];
        for i in 0..ba {
            let gi = &g[i * m * n..(i + 1) * m * n];
            let ai = &av[i * m * k..(i + 1) * m * k];
            let bi = &bv[i * k * n..(i + 1) * k * n];
            let ga_i = &mut ga[i * m * k..(i + 1) * m * k];
            // dL/dA (logical [m,k]) = G · Bᵀ; stored transposed when trans_a.
            if trans_a {
                gemm(k, n, m, bi, trans_b, gi, true, ga_i, false);
            } else {
                gemm(m, n, k, gi, false, bi, !trans_b, ga_i, false);
            }
            let gb_i = &mut gb[i * k * n..(i + 1) * k * n];
            // dL/dB (logical [k,n]) = Aᵀ · G; stored transposed when trans_b.
            if trans_b {
                gemm(n, m, k, gi, true, ai, trans_a, gb_i, false);
            } else {
                gemm(k, m, n, ai, !trans_a, gi, false, gb_i, false);
            }
        }
        vec![Some(ga), Some(gb)]
    }))
}

/// Softmax over the last axis, computed with max subtraction.
pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let Some(&width) = x.shape().last() else {
        return Err(dim_err!("softmax needs at least one axis"));
    };
    let mut out = x.to_vec();
    for row in out.chunks_mut(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    let y = out.clone();
    Ok(Tensor::from_op(x.shape().to_vec(), out, "softmax", vec![x.clone()], move |g| {
        let mut gx = vec![T::zero(); y.len()];
        for ((yr, gr), out) in y.chunks(width).zip(g.chunks(width)).zip(gx.chunks_mut(width)) {
            let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
            for ((o, y), g) in out.iter_mut().zip(yr).zip(gr) {
                *o = *y * (*g - dot);
            }
        }
        vec![Some(gx)]
    }))
}

/// Concatenates 4-d tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| dim_err!("concat_channels needs at least one input"))?;
    let [n, _, h, w] = first.dims4()?;
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        let [pn, pc, ph, pw] = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(dim_err!(
                "concat_channels: {:?} does not match batch/spatial dims of {:?}",
                p.shape(),
                first.shape()
            ));
        }
        channels.push(pc);
    }
    let total: usize = channels.iter().sum();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total * hw);
    let views: Vec<_> = parts.iter().map(|p| p.data()).collect();
    for i in 0..n {
        for (view, &c) in views.iter().zip(&channels) {
            out.extend_from_slice(&view[i * c * hw..(i + 1) * c * hw]);
        }
    }
    drop(views);
    let parents = parts.iter().map(|p| (*p).clone()).collect();
    Ok(Tensor::from_op(vec![n, total, h, w], out, "concat_channels", parents, move |g| {
        let mut grads: Vec<Vec<T>> = channels.iter().map(|c| Vec::with_capacity(n * c * hw)).collect();
        for i in 0..n {
            let mut offset = i * total * hw;
            for (gr, &c) in grads.iter_mut().zip(&channels) {
                gr.extend_from_slice(&g[offset..offset + c * hw]);
                offset += c * hw;
            }
        }
        grads.into_iter().map(Some).collect()
    }))
}

/// Channel range `[start, start+len)` of a 4-d tensor.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if len == 0 || start + len > c {
        return Err(dim_err!("slice_channels [{start}, {}) out of {c} channels", start + len));
    }
    let hw = h * w;
    let xv = x.data();
    let mut out = Vec::with_capacity(n * len * hw);
    for i in 0..n {
        let base = (i * c + start) * hw;
        out.extend_from_slice(&xv[base..base + len * hw]);
    }
    drop(xv);
    Ok(Tensor::from_op(vec![n, len, h, w], out, "slice_channels", vec![x.clone()], move |g| {
        let mut gx = vec![T::zero(); n * c * hw];
        for i in 0..n {
            let base = (i * c + start) * hw;
            gx[base..base + len * hw].copy_from_slice(&g[i * len * hw..(i + 1) * len * hw]);
        }
        vec![Some(gx)]
    }))
}

/// Swaps the last two axes of a 3-d tensor.
pub fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[b, r, c] = x.shape() else {
        return Err(dim_err!("transpose_last2 needs a 3-d tensor, got {:?}", x.shape()));
    };
    let swap = move |src: &[T]| {
        let mut out = vec![T::zero(); src.len()];
        for i in 0..b {
            for row in 0..r {
                for col in 0..c {
                    out[i * r * c + col * r + row] = src[i * r * c + row * c + col];
                }
            }
        }
        out
    };
    let out = swap(&x.data());
    let back = move |src: &[T]| {
        let mut out = vec![T::zero(); src.len()];
        for i in 0..b {
            for col in 0..c {
                for row in 0..r {
                    out[i * r * c + row * c + col] = src[i * r * c + col * r + row];
                }
            }
        }
        out
    };
    Ok(Tensor::from_op(vec![b, c, r], out, "transpose_last2", vec![x.clone()], move |g| vec![Some(back(g))]))
}

/// Adds a per-sample, per-channel vector `v: [N,C]` over the spatial axes of
/// `x: [N,C,H,W]`.
pub fn add_per_channel<T: Scalar>(x: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if v.shape() != [n, c] {
        return Err(dim_err!("add_per_channel: vector shape {:?}, expected [{n}, {c}]", v.shape()));
    }
    let hw = h * w;
    let mut out = x.to_vec();
    {
        let vv = v.data();
        for (plane, b) in out.chunks_mut(hw).zip(vv.iter()) {
            plane.iter_mut().for_each(|o| *o = *o + *b);
        }
    }
    Ok(Tensor::from_op(x.shape().to_vec(), out, "add_per_channel", vec![x.clone(), v.clone()], move |g| {
        let gv = g.chunks(hw).map(|plane| plane.iter().copied().sum()).collect();
        vec![Some(g.to_vec()), Some(gv)]
    }))
}

/// Per-channel affine `x·γ_c + β_c` on `[N,C,H,W]`.
pub fn channel_affine<T: Scalar>(
    x: &Tensor<T>,
    gamma: Option<&Tensor<T>>,
    beta: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    for p in gamma.iter().chain(beta.iter()) {
        if p.shape() != [c] {
            return Err(dim_err!("channel_affine: parameter shape {:?}, expected [{c}]", p.shape()));
        }
    }
    let hw = h * w;
    let xv = x.to_vec();
    let gv = gamma.map(Tensor::to_vec);
    let bv = beta.map(Tensor::to_vec);
    let mut out = xv.clone();
    for (idx, plane) in out.chunks_mut(hw).enumerate() {
        let ch = idx % c;
        let gm = gv.as_ref().map_or(T::one(), |g| g[ch]);
        let bt = bv.as_ref().map_or(T::zero(), |b| b[ch]);
        plane.iter_mut().for_each(|o| *o = *o * gm + bt);
    }
    let mut parents = vec![x.clone()];
    parents.extend(gamma.cloned());
    parents.extend(beta.cloned());
    let (has_g, has_b) = (gamma.is_some(), beta.is_some());
    Ok(Tensor::from_op(vec![n, c, h, w], out, "channel_affine", parents, move |g| {
        let mut gx = g.to_vec();
        let mut g_gamma = vec![T::zero(); c];
        let mut g_beta = vec![T::zero(); c];
        for (idx, (gp, xp)) in g.chunks(hw).zip(xv.chunks(hw)).enumerate() {
            let ch = idx % c;
            if let Some(gm) = gv.as_ref() {
                gx[idx * hw..(idx + 1) * hw].iter_mut().for_each(|v| *v = *v * gm[ch]);
            }
            g_gamma[ch] = g_gamma[ch] + gp.iter().zip(xp).map(|(a, b)| *a * *b).sum();
            g_beta[ch] = g_beta[ch] + gp.iter().copied().sum();
        }
        let mut grads = vec![Some(gx)];
        if has_g {
            grads.push(Some(g_gamma));
        }
        if has_b {
            grads.push(Some(g_beta));
        }
        grads
    }))
}

/// Nearest-neighbour 2× spatial upsampling.
pub fn upsample_nearest2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let xv = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (plane_in, plane_out) in xv.chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for y in 0..oh {
            for xx in 0..ow {
                plane_out[y * ow + xx] = plane_in[(y / 2) * w + xx / 2];
            }
        }
    }
    drop(xv);
    Ok(Tensor::from_op(vec![n, c, oh, ow], out, "upsample_nearest2x", vec![x.clone()], move |g| {
        let mut gx = vec![T::zero(); n * c * h * w];
        for (plane_g, plane_x) in g.chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
            for y in 0..oh {
                for xx in 0..ow {
                    let d = &mut plane_x[(y / 2) * w + xx / 2];
                    *d = *d + plane_g[y * ow + xx];
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err!("avg_pool2x needs even spatial dims, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let xv = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (plane_in, plane_out) in xv.chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for y in 0..oh {
            for xx in 0..ow {
                let s = plane_in[2 * y * w + 2 * xx]
                    + plane_in[2 * y * w + 2 * xx + 1]
                    + plane_in[(2 * y + 1) * w + 2 * xx]
                    + plane_in[(2 * y + 1) * w + 2 * xx + 1];
                plane_out[y * ow + xx] = s * quarter;
            }
        }
    }
    drop(xv);
    Ok(Tensor::from_op(vec![n, c, oh, ow], out, "avg_pool2x", vec![x.clone()], move |g| {
        let mut gx = vec![T::zero(); n * c * h * w];
        for (plane_g, plane_x) in g.chunks(oh * ow).zip(gx.chunks_mut(h * w)) {
            for y in 0..h {
                for xx in 0..w {
                    plane_x[y * w + xx] = plane_g[(y / 2) * ow + xx / 2] * quarter;
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Replaces whole samples of `x: [N, ...]` with `replacement` (shape of one
/// sample) wherever `mask` is set. Gradients for replaced samples flow to
/// `replacement`, summed over the samples that used it.
pub fn replace_samples<T: Scalar>(x: &Tensor<T>, replacement: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    let n = *x.shape().first().ok_or_else(|| dim_err!("replace_samples on a scalar"))?;
    if mask.len() != n {
        return Err(dim_err!("replace_samples: mask of {} for batch {n}", mask.len()));
    }
    let per = x.numel() / n;
    if replacement.numel() != per || replacement.shape() != &x.shape()[1..] {
        return Err(dim_err!(
            "replace_samples: replacement {:?} does not match sample shape {:?}",
            replacement.shape(),
            &x.shape()[1..]
        ));
    }
    let mut out = x.to_vec();
    {
        let rv = replacement.data();
        for (chunk, _) in out.chunks_mut(per).zip(mask).filter(|(_, m)| **m) {
            chunk.copy_from_slice(&rv);
        }
    }
    let mask = mask.to_vec();
    Ok(Tensor::from_op(x.shape().to_vec(), out, "replace_samples", vec![x.clone(), replacement.clone()], move |g| {
        let mut gx = g.to_vec();
        let mut gr = vec![T::zero(); per];
        for (chunk, m) in gx.chunks_mut(per).zip(&mask) {
            if *m {
                gr.iter_mut().zip(chunk.iter()).for_each(|(a, b)| *a = *a + *b);
                chunk.iter_mut().for_each(|v| *v = T::zero());
            }
        }
        vec![Some(gx), Some(gr)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&i, &b).unwrap().to_vec(), b.to_vec());
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let c = t(&[2, 1], &[5.0, 6.0]);
        assert_eq!(matmul(&a, &c).unwrap().to_vec(), vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(matmul(&a, &b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn silu_mse_basics() {
        let z = t(&[1], &[0.0]);
        assert_eq!(silu(&z).item(), 0.0);
        let x = t(&[2], &[0.3, -1.2]);
        assert_eq!(mse(&x, &x).unwrap().item(), 0.0);
        let a = t(&[2], &[0.0, 0.0]);
        let b = t(&[2], &[1.0, 1.0]);
        assert_eq!(mse(&a, &b).unwrap().item(), 1.0);
        assert!(add(&a, &t(&[3], &[0.0; 3])).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, -500.0, 0.0, 500.0]);
        let y = softmax_last(&x).unwrap().to_vec();
        for row in y.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn backward_sum_and_square() {
        let x = Tensor::<f64>::parameter(&[3], vec![1.0, -2.0, 5.0]).unwrap();
        sum(&x).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 3]);

        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        sum(&mul(&x, &x).unwrap()).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = scale(&x, 2.0);
        assert!(matches!(y.backward(), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let x = Tensor::<f64>::parameter(&[2], vec![3.0, 4.0]).unwrap();
        let y = add(&x, &scale(&x, 2.0)).unwrap();
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn tape_is_consumed_by_backward() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = sum(&silu(&x));
        assert_eq!(super::super::Tape::record(&y).ops(), vec!["leaf", "silu", "sum"]);
        y.backward().unwrap();
        assert!(y.is_leaf());
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = {
            let _g = crate::numcore::no_grad();
            silu(&x)
        };
        assert!(!y.tracks_grad());
        assert!(silu(&x).tracks_grad());
    }

    #[test]
    fn replace_samples_routes_gradient() {
        let x = Tensor::<f64>::parameter(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = Tensor::<f64>::parameter(&[2], vec![9.0, 9.0]).unwrap();
        let y = replace_samples(&x, &r, &[false, true]).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 9.0, 9.0]);
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(r.grad().unwrap(), vec![1.0, 1.0]);
    }
}
