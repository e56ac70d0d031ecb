//! 2-d cross-correlation via im2col + GEMM.

use super::scalar::{gemm, Scalar};
use super::tensor::Tensor;
use crate::error::{dim_err, usage_err, Result};

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn l(&self) -> usize {
        self.oh * self.ow
    }
}

impl Geometry {
    /// Output columns `ox` whose input column `ox·stride + dx − pad` lies
    /// inside the image, as a half-open range.
    fn valid_cols(&self, dx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(dx).div_ceil(self.stride);
        let hi = (self.w + self.pad).saturating_sub(dx).div_ceil(self.stride).min(self.ow);
        (lo.min(hi), hi)
    }
}

/// Fills `cols: [K, N·L]`, row `(ci, dy, dx)`, column `(n, oy, ox)`.
fn im2col<T: Scalar>(x: &[T], g: &Geometry) -> Vec<T> {
    let (l, nl) = (g.l(), g.n * g.l());
    let mut cols = vec![T::zero(); g.k() * nl];
    for ci in 0..g.cin {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (ci * g.kh + dy) * g.kw + dx;
                let dst = &mut cols[row * nl..(row + 1) * nl];
                let (lo, hi) = g.valid_cols(dx);
                if lo == hi {
                    continue;
                }
                let ix0 = lo * g.stride + dx - g.pad;
                for n in 0..g.n {
                    let plane = &x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..][..g.w];
                        let out = &mut dst[n * l + oy * g.ow..][lo..hi];
                        if g.stride == 1 {
                            out.copy_from_slice(&src_row[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (o, v) in out.iter_mut().zip(src_row[ix0..].iter().step_by(g.stride)) {
                                *o = *v;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry) -> Vec<T> {
    let (l, nl) = (g.l(), g.n * g.l());
    let mut x = vec![T::zero(); g.n * g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (ci * g.kh + dy) * g.kw + dx;
                let src = &cols[row * nl..(row + 1) * nl];
                let (lo, hi) = g.valid_cols(dx);
                if lo == hi {
                    continue;
                }
                let ix0 = lo * g.stride + dx - g.pad;
                for n in 0..g.n {
                    let plane = &mut x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * g.w..][..g.w];
                        let vals = &src[n * l + oy * g.ow..][lo..hi];
                        if g.stride == 1 {
                            for (d, v) in dst_row[ix0..ix0 + (hi - lo)].iter_mut().zip(vals) {
                                *d = *d + *v;
                            }
                        } else {
                            for (d, v) in dst_row[ix0..].iter_mut().step_by(g.stride).zip(vals) {
                                *d = *d + *v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[Cout, N·L]` ⇄ `[N, Cout, L]`.
fn channel_major_to_batch<T: Scalar>(src: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for co in 0..c {
        for i in 0..n {
            out[(i * c + co) * l..][..l].copy_from_slice(&src[co * n * l + i * l..][..l]);
        }
    }
    out
}

fn batch_to_channel_major<T: Scalar>(src: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for co in 0..c {
        for i in 0..n {
            out[co * n * l + i * l..][..l].copy_from_slice(&src[(i * c + co) * l..][..l]);
        }
    }
    out
}

/// Cross-correlation of `x: [N,Cin,H,W]` with `w: [Cout,Cin,kh,kw]` and
/// zero padding. Output spatial size is `floor((H + 2p − kh)/stride) + 1`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let [n, cin, h, wd] = x.dims4()?;
    let [cout, wcin, kh, kw] = w.dims4()?;
    if stride == 0 {
        return Err(usage_err!("conv2d stride must be positive"));
    }
    if wcin != cin {
        return Err(dim_err!("conv2d: input has {cin} channels, kernel expects {wcin}"));
    }
    if kh > h + 2 * padding || kw > wd + 2 * padding {
        return Err(dim_err!(
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            wd + 2 * padding
        ));
    }
    let g = Geometry {
        n,
        cin,
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad: padding,
        oh: (h + 2 * padding - kh) / stride + 1,
        ow: (wd + 2 * padding - kw) / stride + 1,
    };
    let (k, l) = (g.k(), g.l());
    let cols = im2col(&x.data(), &g);
    let wv = w.to_vec();
    let mut out_cm = vec![T::zero(); cout * n * l];
    gemm(cout, k, n * l, &wv, false, &cols, false, &mut out_cm, false);
    let out = channel_major_to_batch(&out_cm, n, cout, l);
    Ok(Tensor::from_op(vec![n, cout, g.oh, g.ow], out, "conv2d", vec![x.clone(), w.clone()], move |grad| {
        let g_cm = batch_to_channel_major(grad, n, cout, l);
        let mut gw = vec![T::zero(); cout * k];
        gemm(cout, n * l, k, &g_cm, false, &cols, true, &mut gw, false);
        let mut gcols = vec![T::zero(); k * n * l];
        gemm(k, cout, n * l, &wv, true, &g_cm, false, &mut gcols, false);
        vec![Some(col2im(&gcols, &g)), Some(gw)]
    }))
}

/// Adds `b: [C]` to every spatial position of channel `c`.
pub fn add_channel_bias<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    super::ops::channel_affine(x, None, Some(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let w = Tensor::<f64>::from_vec(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(conv2d(&x, &w, 1, 0).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn all_ones_three_by_three() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.to_vec(), vec![9.0]);
    }

    #[test]
    fn output_size_follows_stride_and_padding() {
        let x = Tensor::<f64>::zeros(&[2, 3, 7, 5]);
        let w = Tensor::<f64>::zeros(&[4, 3, 3, 3]);
        assert_eq!(conv2d(&x, &w, 2, 1).unwrap().shape(), &[2, 4, 4, 3]);
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        assert!(matches!(conv2d(&x, &w, 1, 0), Err(crate::Error::Dimension(_))));
        assert!(conv2d(&x, &w, 1, 2).is_ok());
    }

    #[test]
    fn matches_direct_loop() {
        let x: Vec<f64> = (0..2 * 2 * 5 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let wt: Vec<f64> = (0..3 * 2 * 3 * 3).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let xt = Tensor::from_vec(&[2, 2, 5, 4], x.clone()).unwrap();
        let wtt = Tensor::from_vec(&[3, 2, 3, 3], wt.clone()).unwrap();
        let y = conv2d(&xt, &wtt, 2, 1).unwrap();
        let [_, _, oh, ow] = y.dims4().unwrap();
        let yv = y.to_vec();
        for n in 0..2 {
            for co in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..2 {
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let iy = (oy * 2 + dy) as isize - 1;
                                    let ix = (ox * 2 + dx) as isize - 1;
                                    if !(0..5).contains(&iy) || !(0..4).contains(&ix) {
                                        continue;
                                    }
                                    acc += x[((n * 2 + ci) * 5 + iy as usize) * 4 + ix as usize]
                                        * wt[((co * 2 + ci) * 3 + dy) * 3 + dx];
                                }
                            }
                        }
                        assert_eq!(yv[((n * 3 + co) * oh + oy) * ow + ox], acc);
                    }
                }
            }
        }
    }
}
