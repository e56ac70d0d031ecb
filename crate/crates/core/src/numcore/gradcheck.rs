//! Central finite-difference gradient checking.
//!
//! Independent of the tape: the probe loss is re-evaluated with perturbed
//! inputs and compared against the analytic gradient from `backward`.

use super::ops::dot_const;
use super::tensor::{no_grad, Tensor};
use crate::error::Result;

/// Step used by the finite-difference oracle.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// `max|analytic − numeric| / max(max|numeric|, max|analytic|, floor)`.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Compares analytic and numeric gradients of `Σ f(inputs) ⊙ probe` with
/// respect to `inputs`. Only the listed coordinates of each input are
/// perturbed (`None` means all of them).
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    coords: Option<&[Vec<usize>]>,
    probe: &[f64],
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    inputs.iter().for_each(Tensor::zero_grad);
    let out = f(inputs)?;
    dot_const(&out, probe)?.backward()?;
    let analytic: Vec<Vec<f64>> = inputs.iter().map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect();

    let eval = || -> Result<f64> {
        let _g = no_grad();
        let y = f(inputs)?;
        let v = y.data().iter().zip(probe).map(|(a, b)| a * b).sum();
        Ok(v)
    };

    let mut max_abs = 0.0f64;
    let mut scale = 1e-8f64;
    let mut checked = 0;
    for (i, t) in inputs.iter().enumerate() {
        let all: Vec<usize>;
        let idx: &[usize] = match coords {
            Some(c) => &c[i],
            None => {
                all = (0..t.numel()).collect();
                &all
            }
        };
        for &j in idx {
            let orig = t.data()[j];
            t.data_mut()[j] = orig + FD_STEP;
            let plus = eval()?;
            t.data_mut()[j] = orig - FD_STEP;
            let minus = eval()?;
            t.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[i][j];
            max_abs = max_abs.max((a - numeric).abs());
            scale = scale.max(numeric.abs()).max(a.abs());
            checked += 1;
        }
    }
    inputs.iter().for_each(Tensor::zero_grad);
    Ok(GradCheckReport { rel_err: max_abs / scale, max_abs_err: max_abs, checked })
}
