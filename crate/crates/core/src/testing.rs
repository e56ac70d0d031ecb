//! Verification helpers shared by unit, integration and acceptance tests:
//! the finite-difference gradient catalog and an exact-noise oracle
//! denoiser. Neither is used on the production path.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::VideoClip;

use crate::denoiser::layers::{ParamStore, ResBlock, ResidualBlockSpec, Scope, Spade};
use crate::denoiser::{DenoiserModel, UNetConfig};
use crate::error::{dim_err, usage_err, Result};
use crate::numcore::gradcheck::{check_gradients, GradCheckReport};
use crate::numcore::init::standard_normal;
use crate::numcore::{self as nc, AttentionWeights, Scalar, Tensor};
use crate::predictor::WindowPlan;
use crate::schedule::{DiffusionSchedule, NoisePredictor};
use crate::seed::rng_from;

/// Noise predictor that knows the clean targets and returns the exact noise
/// consistent with the current `x_t`. Plugging it into the sampler turns the
/// reverse chain into a deterministic reconstruction of the targets.
pub struct OracleDenoiser<T: Scalar> {
    targets: Tensor<T>,
    schedule: DiffusionSchedule,
}

impl<T: Scalar> OracleDenoiser<T> {
    pub fn new(targets: Tensor<T>, schedule: DiffusionSchedule) -> Self {
        Self { targets, schedule }
    }
}

impl<T: Scalar> NoisePredictor<T> for OracleDenoiser<T> {
    fn predict_noise(&self, noisy: &Tensor<T>, _cond: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        if noisy.shape() != self.targets.shape() {
            return Err(dim_err!("oracle holds targets {:?}, asked about {:?}", self.targets.shape(), noisy.shape()));
        }
        let ab = self.schedule.alpha_bar(t)?;
        let (s, r) = (T::from_f64_lossy(ab.sqrt()), T::from_f64_lossy(1.0 / (1.0 - ab).sqrt()));
        let data = noisy.data().iter().zip(self.targets.data().iter()).map(|(x, x0)| (*x - s * *x0) * r).collect();
        Tensor::from_vec(noisy.shape(), data)
    }
}

/// Clip-level noise oracle for whole prediction runs. Each batch row is
/// matched to its window through its conditioning frames, so it requires
/// ground-truth (observed) conditioning.
pub struct ClipOracle {
    targets: HashMap<Vec<u32>, Vec<f32>>,
    schedule: DiffusionSchedule,
}

impl ClipOracle {
    pub fn new(clips: &[VideoClip], plan: &WindowPlan, schedule: DiffusionSchedule) -> Result<Self> {
        let mut targets = HashMap::new();
        for clip in clips {
            let last = clip.len().saturating_sub(1);
            for w in &plan.windows {
                let cond: Vec<f32> = clip.stack_frames(&w.cond_indices)?;
                // Frames past the clip end are discarded by the predictor.
                let block: Vec<usize> = (w.block_start..w.block_start + plan.predicted).map(|i| i.min(last)).collect();
                let target: Vec<f32> = clip.stack_frames(&block)?;
                match targets.insert(cond.iter().map(|v| v.to_bits()).collect::<Vec<u32>>(), target.clone()) {
                    Some(prev) if prev != target => {
                        return Err(usage_err!(
                            "clip {}: two windows share conditioning frames but differ in targets",
                            clip.id
                        ))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { targets, schedule })
    }
}

impl<T: Scalar> NoisePredictor<T> for ClipOracle {
    fn predict_noise(&self, noisy: &Tensor<T>, cond: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let n = noisy.shape()[0];
        let per_cond = cond.numel() / n.max(1);
        let cond_data = cond.data();
        let mut targets = Vec::with_capacity(noisy.numel());
        for row in cond_data.chunks(per_cond.max(1)).take(n) {
            let key: Vec<u32> = row.iter().map(|v| (v.to_f64_lossy() as f32).to_bits()).collect();
            let target = self
                .targets
                .get(&key)
                .ok_or_else(|| usage_err!("oracle: conditioning frames match no ground-truth window"))?;
            targets.extend(target.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        let targets = Tensor::from_vec(noisy.shape(), targets)?;
        OracleDenoiser::new(targets, self.schedule.clone()).predict_noise(noisy, cond, t)
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    standard_normal::<f64, _>(shape, rng).requires_grad()
}

fn probe(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn output_len(f: &OpRef, inputs: &[Tensor<f64>]) -> Result<usize> {
    let _g = nc::no_grad();
    Ok(f(inputs)?.numel())
}

type OpRef = dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>;
type OpFn = Box<OpRef>;

/// One gradient check: named inputs plus the function under test.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: OpFn,
    /// Coordinates to perturb per input (`None` = all).
    pub coords: Option<Vec<Vec<usize>>>,
}

impl GradCase {
    fn new(
        name: &'static str,
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + 'static,
    ) -> Self {
        Self { name, inputs, f: Box::new(f), coords: None }
    }

    pub fn run(&self, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
        let n = output_len(&*self.f, &self.inputs)?;
        let p = probe(n, rng);
        check_gradients(&self.inputs, self.coords.as_deref(), &p, &*self.f)
    }
}

fn scope_model<F, M>(seed: u64, build: F) -> (M, Vec<Tensor<f64>>)
where
    F: FnOnce(&mut Scope<'_, f64, ChaCha8Rng>) -> M,
{
    let mut store = ParamStore::new();
    let mut rng = rng_from(seed);
    let module = {
        let mut scope = Scope { store: &mut store, rng: &mut rng, prefix: String::new() };
        build(&mut scope)
    };
    // Zero-initialized weights would hide whole gradient paths.
    let mut fill = rng_from(seed ^ 0xA5A5);
    let params = store.tensors();
    for p in &params {
        p.data_mut().iter_mut().for_each(|v| *v = fill.random_range(-0.5..0.5));
    }
    (module, params)
}

/// Every differentiable primitive on randomized small shapes for one seed.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = rng_from(seed);
    let r = &mut rng;
    let mut cases = vec![
        GradCase::new("add", vec![randn(&[2, 3], r), randn(&[2, 3], r)], |x| nc::add(&x[0], &x[1])),
        GradCase::new("sub", vec![randn(&[2, 3], r), randn(&[2, 3], r)], |x| nc::sub(&x[0], &x[1])),
        GradCase::new("mul", vec![randn(&[3, 2], r), randn(&[3, 2], r)], |x| nc::mul(&x[0], &x[1])),
        GradCase::new("scale", vec![randn(&[4], r)], |x| Ok(nc::scale(&x[0], -1.7))),
        GradCase::new("add_scalar", vec![randn(&[4], r)], |x| Ok(nc::add_scalar(&x[0], 0.3))),
        GradCase::new("silu", vec![randn(&[2, 5], r)], |x| Ok(nc::silu(&x[0]))),
        GradCase::new("sum", vec![randn(&[3, 3], r)], |x| Ok(nc::sum(&x[0]))),
        GradCase::new("mean", vec![randn(&[3, 3], r)], |x| Ok(nc::mean(&x[0]))),
        GradCase::new("mse", vec![randn(&[2, 4], r), randn(&[2, 4], r)], |x| nc::mse(&x[0], &x[1])),
        GradCase::new("reshape", vec![randn(&[2, 6], r)], |x| nc::reshape(&x[0], &[3, 4])),
        GradCase::new("matmul", vec![randn(&[3, 4], r), randn(&[4, 2], r)], |x| nc::matmul(&x[0], &x[1])),
        GradCase::new("linear", vec![randn(&[3, 4], r), randn(&[5, 4], r), randn(&[5], r)], |x| {
            nc::linear(&x[0], &x[1], Some(&x[2]))
        }),
        GradCase::new("softmax_last", vec![randn(&[3, 5], r)], |x| nc::softmax_last(&x[0])),
        GradCase::new("transpose_last2", vec![randn(&[2, 3, 4], r)], |x| nc::transpose_last2(&x[0])),
        GradCase::new("concat_channels", vec![randn(&[2, 1, 3, 3], r), randn(&[2, 2, 3, 3], r)], |x| {
            nc::concat_channels(&[&x[0], &x[1]])
        }),
        GradCase::new("slice_channels", vec![randn(&[2, 4, 2, 2], r)], |x| nc::slice_channels(&x[0], 1, 2)),
        GradCase::new("add_per_channel", vec![randn(&[2, 3, 2, 2], r), randn(&[2, 3], r)], |x| {
            nc::add_per_channel(&x[0], &x[1])
        }),
        GradCase::new("channel_affine", vec![randn(&[2, 3, 2, 2], r), randn(&[3], r), randn(&[3], r)], |x| {
            nc::channel_affine(&x[0], Some(&x[1]), Some(&x[2]))
        }),
        GradCase::new("upsample_nearest2x", vec![randn(&[1, 2, 3, 2], r)], |x| nc::upsample_nearest2x(&x[0])),
        GradCase::new("avg_pool2x", vec![randn(&[1, 2, 4, 6], r)], |x| nc::avg_pool2x(&x[0])),
        GradCase::new("replace_samples", vec![randn(&[3, 2, 2], r), randn(&[2, 2], r)], |x| {
            nc::replace_samples(&x[0], &x[1], &[true, false, true])
        }),
        GradCase::new("conv2d", vec![randn(&[2, 2, 5, 5], r), randn(&[3, 2, 3, 3], r)], |x| {
            nc::conv2d(&x[0], &x[1], 1, 1)
        }),
        GradCase::new("conv2d_strided", vec![randn(&[2, 2, 5, 5], r), randn(&[2, 2, 3, 3], r)], |x| {
            nc::conv2d(&x[0], &x[1], 2, 1)
        }),
        GradCase::new("group_norm_plain", vec![randn(&[2, 4, 3, 3], r)], |x| nc::group_norm_plain(&x[0], 2)),
        GradCase::new("group_norm", vec![randn(&[2, 4, 3, 3], r), randn(&[4], r), randn(&[4], r)], |x| {
            nc::group_norm(&x[0], 2, &x[1], &x[2])
        }),
    ];
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let b_shape = if tb { [2, 5, 4] } else { [2, 4, 5] };
        cases.push(GradCase::new("batched_matmul", vec![randn(&a_shape, r), randn(&b_shape, r)], move |x| {
            nc::batched_matmul(&x[0], &x[1], ta, tb)
        }));
    }
    let c = 4;
    let attn_inputs = vec![
        randn(&[2, c, 2, 3], r),
        randn(&[c], r),
        randn(&[c], r),
        randn(&[3 * c, c, 1, 1], r),
        randn(&[3 * c], r),
        randn(&[c, c, 1, 1], r),
        randn(&[c], r),
    ];
    cases.push(GradCase::new("self_attention", attn_inputs, |x| {
        let w = AttentionWeights {
            norm_gamma: x[1].clone(),
            norm_beta: x[2].clone(),
            qkv_weight: x[3].clone(),
            qkv_bias: x[4].clone(),
            proj_weight: x[5].clone(),
            proj_bias: x[6].clone(),
        };
        nc::self_attention(&x[0], 2, 2, &w)
    }));
    cases
}

/// Composite graphs: conv → norm → attention, SPADE through the modulation
/// path, a residual block, and the full tiny U-Net.
pub fn composite_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = rng_from(seed.wrapping_add(1000));
    let r = &mut rng;
    let mut cases = Vec::new();

    let c = 4;
    let chain_inputs = vec![
        randn(&[2, 2, 4, 4], r),
        randn(&[c, 2, 3, 3], r),
        randn(&[c], r),
        randn(&[c], r),
        randn(&[3 * c, c, 1, 1], r),
        randn(&[3 * c], r),
        randn(&[c, c, 1, 1], r),
        randn(&[c], r),
    ];
    cases.push(GradCase::new("conv_norm_attention", chain_inputs, |x| {
        let h = nc::conv2d(&x[0], &x[1], 1, 1)?;
        let h = nc::silu(&nc::group_norm(&h, 2, &x[2], &x[3])?);
        let w = AttentionWeights {
            norm_gamma: x[2].clone(),
            norm_beta: x[3].clone(),
            qkv_weight: x[4].clone(),
            qkv_bias: x[5].clone(),
            proj_weight: x[6].clone(),
            proj_bias: x[7].clone(),
        };
        nc::self_attention(&h, 2, 2, &w)
    }));

    let (spade, mut params) = scope_model(seed, |s| Spade::new(s, 4, 2, 3, 2));
    let x = randn(&[2, 4, 3, 3], r);
    let cond = randn(&[2, 2, 3, 3], r);
    params.insert(0, x);
    params.insert(1, cond);
    cases.push(GradCase::new("spade", params, move |x| spade.forward(&x[0], &x[1])));

    let spec = ResidualBlockSpec { in_channels: 4, out_channels: 6, time_width: 5, spade: true };
    let (block, mut params) = scope_model(seed + 1, |s| ResBlock::new(s, spec, 2, 3, 2));
    params.insert(0, randn(&[2, 4, 4, 4], r));
    params.insert(1, randn(&[2, 5], r));
    params.insert(2, randn(&[2, 2, 4, 4], r));
    cases.push(GradCase::new("residual_block", params, move |x| block.forward(&x[0], &x[1], &x[2])));

    cases.push(unet_case(seed, r));
    cases
}

/// Tiny one-level U-Net, width 8.
pub fn tiny_unet_config() -> UNetConfig {
    UNetConfig {
        image_channels: 1,
        height: 4,
        width: 4,
        past_frames: 2,
        predicted_frames: 2,
        future_frames: 0,
        base_width: 8,
        channel_multipliers: vec![1],
        attention_levels: vec![0],
        groups: 2,
        heads: 2,
        time_embed_dim: 4,
        spade_hidden: 4,
        spade: true,
    }
}

fn unet_case(seed: u64, r: &mut ChaCha8Rng) -> GradCase {
    let model = DenoiserModel::<f64>::new(tiny_unet_config(), seed).expect("valid tiny config");
    let mut fill = rng_from(seed ^ 0x5A5A);
    for (_, p) in model.params().iter() {
        p.data_mut().iter_mut().for_each(|v| *v = fill.random_range(-0.4..0.4));
    }
    let noisy = randn(&[2, 2, 4, 4], r);
    let cond = randn(&[2, 2, 4, 4], r);
    let mut inputs = vec![noisy, cond];
    inputs.extend(model.params().tensors());
    // Two random coordinates per parameter tensor plus a handful per input.
    let coords = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let k = if i < 2 { 6 } else { 2 };
            (0..k.min(t.numel())).map(|_| r.random_range(0..t.numel())).collect()
        })
        .collect();
    let ts = [3usize, 71];
    let f = move |x: &[Tensor<f64>]| model.forward(&x[0], &x[1], &ts);
    GradCase { name: "unet", inputs, f: Box::new(f), coords: Some(coords) }
}

/// `P(normal > anomalous) + ½·P(tie)` by enumerating all pairs.
pub fn pairwise_auc(scores: &[f64], labels: &[crate::data::Label]) -> f64 {
    let (mut wins, mut pairs) = (0.0f64, 0u64);
    for (i, li) in labels.iter().enumerate() {
        if li.is_anomalous() {
            continue;
        }
        for (j, lj) in labels.iter().enumerate() {
            if !lj.is_anomalous() {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs as f64
}
