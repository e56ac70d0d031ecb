//! Sliding-window whole-clip prediction.
//!
//! Each window conditions on observed frames and samples a `k`-frame block.
//! Windows are independent under ground-truth conditioning, so windows from
//! many clips are batched through the sampler together. Every window draws
//! from a seed derived from the run seed, the clip id and the window index,
//! which makes results independent of batching and clip order.

use serde::{Deserialize, Serialize};

use crate::data::VideoClip;
use crate::error::{dim_err, usage_err, Result};
use crate::numcore::{Scalar, Tensor};
use crate::schedule::{sample_with_seeds, DiffusionSchedule, NoisePredictor};
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    /// Observed frames fed to the model: `p` past frames, then `f` future
    /// frames when future conditioning is on.
    pub cond_indices: Vec<usize>,
    /// First frame of the generated `k`-block.
    pub block_start: usize,
    /// Frames of the block kept in the output (all `k` except in a final
    /// partial window).
    pub predict_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub frames: usize,
    pub past: usize,
    pub predicted: usize,
    pub future: usize,
    pub windows: Vec<Window>,
}

impl WindowPlan {
    /// Predicted frame indices over all windows, ascending.
    pub fn predicted_indices(&self) -> Vec<usize> {
        self.windows.iter().flat_map(|w| w.predict_indices.iter().copied()).collect()
    }

    pub fn generated_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.frames];
        for i in self.predicted_indices() {
            mask[i] = true;
        }
        mask
    }
}

/// Windows with stride `k` starting at frame `p`.
///
/// Frames `{p .. F−f−1}` are predicted; the last `f` frames only serve as
/// future conditioning. When `F−p−f` is not a multiple of `k` the final
/// window keeps only the `r < k` remaining frames. Past-only plans place
/// that block right after the remainder's `p` preceding frames. With future
/// conditioning the block is aligned to end at `F−f` so its `f` future
/// frames exist, and the last `r` frames of the block are kept.
pub fn plan_windows(frames: usize, p: usize, k: usize, f: usize) -> Result<WindowPlan> {
    if p == 0 || k == 0 {
        return Err(usage_err!("need at least one past and one predicted frame (p={p}, k={k})"));
    }
    if frames < p + k + f {
        return Err(usage_err!("clip of {frames} frames is shorter than p+k+f = {}", p + k + f));
    }
    let end = frames - f;
    let mut windows = Vec::new();
    let mut s = p;
    while s < end {
        let r = (end - s).min(k);
        let block_start = if r < k && f > 0 { end - k } else { s };
        let mut cond_indices: Vec<usize> = (block_start - p..block_start).collect();
        cond_indices.extend(block_start + k..block_start + k + f);
        windows.push(Window { cond_indices, block_start, predict_indices: (s..s + r).collect() });
        s += k;
    }
    Ok(WindowPlan { frames, past: p, predicted: k, future: f, windows })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// Condition every window on ground-truth frames.
    #[default]
    Observed,
    /// Condition on previously generated frames where available.
    Autoregressive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictedClip {
    pub id: String,
    /// `[F, C, H, W]`: observed frames where `generated` is false.
    pub frames: Vec<f32>,
    pub shape: [usize; 4],
    pub generated: Vec<bool>,
}

impl PredictedClip {
    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.shape[1] * self.shape[2] * self.shape[3];
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn generated_indices(&self) -> Vec<usize> {
        (0..self.shape[0]).filter(|&i| self.generated[i]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictOptions {
    pub seed: u64,
    pub conditioning: Conditioning,
    /// Windows per sampler call.
    pub batch: usize,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self { seed: 0, conditioning: Conditioning::Observed, batch: 16 }
    }
}

/// Stable 64-bit FNV-1a hash, used to key window seeds by clip id.
fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of window `w` of clip `id`.
pub fn window_seed(seed: u64, id: &str, w: usize) -> u64 {
    derive_seed(derive_seed(seed, id_hash(id)), w as u64)
}

/// Predicts one clip.
pub fn predict_video<T: Scalar, D: NoisePredictor<T> + ?Sized>(
    model: &D,
    schedule: &DiffusionSchedule,
    clip: &VideoClip,
    plan: &WindowPlan,
    opts: &PredictOptions,
) -> Result<PredictedClip> {
    let mut out = predict_videos(model, schedule, std::slice::from_ref(clip), plan, opts)?;
    Ok(out.pop().expect("one clip in, one out"))
}

/// Predicts several clips sharing one plan. Observed conditioning batches
/// windows across clips; autoregressive conditioning runs the windows of
/// each clip in order but still batches across clips.
pub fn predict_videos<T: Scalar, D: NoisePredictor<T> + ?Sized>(
    model: &D,
    schedule: &DiffusionSchedule,
    clips: &[VideoClip],
    plan: &WindowPlan,
    opts: &PredictOptions,
) -> Result<Vec<PredictedClip>> {
    let Some(first) = clips.first() else { return Ok(Vec::new()) };
    let shape = first.shape();
    for clip in clips {
        if clip.len() != plan.frames {
            return Err(usage_err!("clip {} has {} frames, plan expects {}", clip.id, clip.len(), plan.frames));
        }
        if clip.shape() != shape {
            return Err(dim_err!("clip {} is {:?}, expected {:?}", clip.id, clip.shape(), shape));
        }
    }
    let mut outputs: Vec<PredictedClip> = clips
        .iter()
        .map(|c| PredictedClip { id: c.id.clone(), frames: c.data().to_vec(), shape, generated: plan.generated_mask() })
        .collect();

    // Work items: (clip, window). Autoregressive mode processes one window
    // index at a time so earlier predictions are in place.
    let jobs: Vec<Vec<(usize, usize)>> = match opts.conditioning {
        Conditioning::Observed => {
            vec![(0..clips.len()).flat_map(|c| (0..plan.windows.len()).map(move |w| (c, w))).collect()]
        }
        Conditioning::Autoregressive => {
            (0..plan.windows.len()).map(|w| (0..clips.len()).map(|c| (c, w)).collect()).collect()
        }
    };
    let batch = opts.batch.max(1);
    for stage in jobs {
        for chunk in stage.chunks(batch) {
            run_chunk(model, schedule, clips, plan, opts, chunk, &mut outputs)?;
        }
    }
    Ok(outputs)
}

fn run_chunk<T: Scalar, D: NoisePredictor<T> + ?Sized>(
    model: &D,
    schedule: &DiffusionSchedule,
    clips: &[VideoClip],
    plan: &WindowPlan,
    opts: &PredictOptions,
    chunk: &[(usize, usize)],
    outputs: &mut [PredictedClip],
) -> Result<()> {
    let [_, c, h, w] = outputs[0].shape;
    let frame_len = c * h * w;
    let k = plan.predicted;
    let n = chunk.len();
    let mut cond = Vec::new();
    let mut seeds = Vec::with_capacity(n);
    for &(ci, wi) in chunk {
        let window = &plan.windows[wi];
        let source: &[f32] = match opts.conditioning {
            Conditioning::Observed => clips[ci].data(),
            Conditioning::Autoregressive => &outputs[ci].frames,
        };
        for &i in &window.cond_indices {
            cond.extend(source[i * frame_len..(i + 1) * frame_len].iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        seeds.push(window_seed(opts.seed, &clips[ci].id, wi));
    }
    let cond_frames = plan.past + plan.future;
    let cond = Tensor::from_vec(&[n, cond_frames * c, h, w], cond)?;
    let generated = sample_with_seeds(model, schedule, &cond, &[n, k * c, h, w], &seeds)?;
    let data = generated.data();
    for (j, &(ci, wi)) in chunk.iter().enumerate() {
        let window = &plan.windows[wi];
        let block = &data[j * k * frame_len..(j + 1) * k * frame_len];
        for &i in &window.predict_indices {
            let off = i - window.block_start;
            let src = &block[off * frame_len..(off + 1) * frame_len];
            let dst = &mut outputs[ci].frames[i * frame_len..(i + 1) * frame_len];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d = s.to_f64_lossy() as f32);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_clip, Label, Source, SynthConfig};
    use crate::schedule::make_linear_schedule;
    use crate::testing::ClipOracle;
    use proptest::prelude::*;

    fn idx(r: std::ops::Range<usize>) -> Vec<usize> {
        r.collect()
    }

    #[test]
    fn reference_plan_for_fourteen_frames() {
        let plan = plan_windows(14, 2, 5, 0).unwrap();
        let got: Vec<(Vec<usize>, Vec<usize>)> =
            plan.windows.iter().map(|w| (w.cond_indices.clone(), w.predict_indices.clone())).collect();
        assert_eq!(got, vec![(vec![0, 1], idx(2..7)), (vec![5, 6], idx(7..12)), (vec![10, 11], vec![12, 13])]);
        assert_eq!(plan.windows[2].block_start, 12);
    }

    #[test]
    fn future_conditioning_layout() {
        let plan = plan_windows(14, 2, 3, 2).unwrap();
        let w0 = &plan.windows[0];
        assert_eq!(w0.cond_indices, vec![0, 1, 5, 6]);
        assert_eq!(w0.predict_indices, idx(2..5));
        assert_eq!(plan.predicted_indices(), idx(2..12));
        // 10 frames in blocks of 3: the last window is end-aligned.
        let last = plan.windows.last().unwrap();
        assert_eq!(last.block_start, 9);
        assert_eq!(last.predict_indices, vec![11]);
        assert_eq!(last.cond_indices, vec![7, 8, 12, 13]);
    }

    #[test]
    fn single_window_and_errors() {
        assert_eq!(plan_windows(7, 2, 5, 0).unwrap().windows.len(), 1);
        assert!(matches!(plan_windows(6, 2, 5, 0), Err(crate::Error::Usage(_))));
        assert!(plan_windows(9, 2, 5, 2).is_ok());
        assert!(plan_windows(8, 2, 5, 2).is_err());
        assert!(plan_windows(8, 0, 5, 0).is_err());
    }

    fn check_plan(plan: &WindowPlan) -> std::result::Result<(), TestCaseError> {
        let (fr, p, k, f) = (plan.frames, plan.past, plan.predicted, plan.future);
        prop_assert_eq!(plan.predicted_indices(), idx(p..fr - f));
        for w in &plan.windows {
            prop_assert_eq!(w.cond_indices.len(), p + f);
            prop_assert!(w.cond_indices.iter().all(|&i| i < fr));
            prop_assert!(w.predict_indices.iter().all(|&i| i >= w.block_start && i < w.block_start + k));
            prop_assert!(w.cond_indices.iter().all(|i| !(w.block_start..w.block_start + k).contains(i)));
            if f > 0 {
                prop_assert!(w.block_start + k + f <= fr);
            }
        }
        Ok(())
    }

    proptest! {
        #[test]
        fn coverage_is_exact_and_disjoint(p in 1usize..=5, k in 1usize..=8, f in prop::sample::select(vec![0usize, 2]), extra in 0usize..30) {
            let frames = p + k + f + extra;
            prop_assume!(frames <= 50);
            check_plan(&plan_windows(frames, p, k, f).unwrap())?;
        }
    }

    fn oracle_setup(n: usize) -> (Vec<VideoClip>, DiffusionSchedule) {
        let clips = (0..n)
            .map(|s| {
                let mut c = synth_clip(&SynthConfig { seed: s as u64, ..Default::default() }).unwrap();
                c.id = format!("clip{s}");
                c
            })
            .collect();
        (clips, make_linear_schedule(100, 1e-4, 0.02).unwrap())
    }

    #[test]
    fn oracle_reconstructs_through_the_pipeline() {
        let (clips, schedule) = oracle_setup(3);
        let plan = plan_windows(14, 2, 5, 0).unwrap();
        let oracle = ClipOracle::new(&clips, &plan, schedule.clone()).unwrap();
        let opts = PredictOptions { seed: 3, batch: 4, ..Default::default() };
        let out = predict_videos::<f64, _>(&oracle, &schedule, &clips, &plan, &opts).unwrap();
        for (clip, pred) in clips.iter().zip(&out) {
            assert_eq!(pred.generated_indices(), idx(2..14));
            let worst = clip.data().iter().zip(&pred.frames).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(worst <= 1e-2, "{}: {worst}", clip.id);
            assert_eq!(pred.frame(0), clip.frame(0));
            assert_eq!(pred.frame(1), clip.frame(1));
        }
    }

    /// Scaled noisy input plus a per-row conditioning bias; enough to
    /// exercise the plumbing.
    struct Damp;
    impl NoisePredictor<f64> for Damp {
        fn predict_noise(&self, noisy: &Tensor<f64>, cond: &Tensor<f64>, _t: usize) -> Result<Tensor<f64>> {
            let n = noisy.shape()[0];
            let (per, per_cond) = (noisy.numel() / n, cond.numel() / n);
            let (x, c) = (noisy.data(), cond.data());
            let out = (0..noisy.numel())
                .map(|i| {
                    let row = i / per;
                    0.5 * x[i] + 0.1 * c[row * per_cond + (i % per) % per_cond]
                })
                .collect();
            Tensor::from_vec(noisy.shape(), out)
        }
    }

    #[test]
    fn batching_and_order_do_not_change_results() {
        let (clips, schedule) = oracle_setup(3);
        let plan = plan_windows(14, 2, 5, 0).unwrap();
        let a = predict_videos(
            &Damp,
            &schedule,
            &clips,
            &plan,
            &PredictOptions { seed: 9, batch: 1, ..Default::default() },
        )
        .unwrap();
        let b = predict_videos(
            &Damp,
            &schedule,
            &clips,
            &plan,
            &PredictOptions { seed: 9, batch: 7, ..Default::default() },
        )
        .unwrap();
        assert_eq!(a, b);
        let single =
            predict_video(&Damp, &schedule, &clips[2], &plan, &PredictOptions { seed: 9, ..Default::default() })
                .unwrap();
        assert_eq!(single, a[2]);
        let c = predict_videos(
            &Damp,
            &schedule,
            &clips,
            &plan,
            &PredictOptions { seed: 10, batch: 7, ..Default::default() },
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_are_never_consulted() {
        let (clips, schedule) = oracle_setup(2);
        let plan = plan_windows(14, 2, 5, 0).unwrap();
        let relabeled: Vec<VideoClip> =
            clips.iter().map(|c| c.with_labels(vec![Label::Anomalous; 14]).unwrap()).collect();
        let opts = PredictOptions::default();
        assert_eq!(
            predict_videos(&Damp, &schedule, &clips, &plan, &opts).unwrap(),
            predict_videos(&Damp, &schedule, &relabeled, &plan, &opts).unwrap()
        );
    }

    #[test]
    fn autoregressive_uses_generated_frames() {
        let (clips, schedule) = oracle_setup(1);
        let plan = plan_windows(14, 2, 5, 0).unwrap();
        let obs = predict_video(&Damp, &schedule, &clips[0], &plan, &PredictOptions::default()).unwrap();
        let ar = PredictOptions { conditioning: Conditioning::Autoregressive, ..Default::default() };
        let auto = predict_video(&Damp, &schedule, &clips[0], &plan, &ar).unwrap();
        // First window sees identical inputs; later ones differ.
        assert_eq!(obs.frame(2), auto.frame(2));
        assert_ne!(obs.frame(8), auto.frame(8));
    }

    #[test]
    fn mismatched_clips_are_rejected() {
        let (clips, schedule) = oracle_setup(1);
        let plan = plan_windows(12, 2, 5, 0).unwrap();
        assert!(predict_video(&Damp, &schedule, &clips[0], &plan, &PredictOptions::default()).is_err());
        let other =
            VideoClip::new("x", Source::Ingested, [14, 1, 8, 8], vec![0.0; 14 * 64], vec![Label::Normal; 14]).unwrap();
        let plan = plan_windows(14, 2, 5, 0).unwrap();
        assert!(
            predict_videos(&Damp, &schedule, &[clips[0].clone(), other], &plan, &PredictOptions::default()).is_err()
        );
    }
}
