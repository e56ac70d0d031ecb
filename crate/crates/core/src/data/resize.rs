use crate::error::{dim_err, Result};

/// Bilinear resize of a `C×H×W` frame with half-pixel centres, so a 2×
/// downscale averages each 2×2 block. Output values are convex
/// combinations of input values.
pub fn resize(
    frame: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    new_h: usize,
    new_w: usize,
) -> Result<Vec<f32>> {
    if [channels, height, width, new_h, new_w].contains(&0) {
        return Err(dim_err!("resize needs positive sizes"));
    }
    if frame.len() != channels * height * width {
        return Err(dim_err!("frame of {} values is not {channels}×{height}×{width}", frame.len()));
    }
    if (new_h, new_w) == (height, width) {
        return Ok(frame.to_vec());
    }
    let taps = |out: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let ratio = src as f64 / out as f64;
        (0..out)
            .map(|i| {
                let x = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, (x - lo as f64) as f32)
            })
            .collect()
    };
    let ys = taps(new_h, height);
    let xs = taps(new_w, width);
    let mut out = Vec::with_capacity(channels * new_h * new_w);
    for plane in frame.chunks_exact(height * width) {
        for &(y0, y1, fy) in &ys {
            let (r0, r1) = (&plane[y0 * width..][..width], &plane[y1 * width..][..width]);
            for &(x0, x1, fx) in &xs {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Ok(out)
}
