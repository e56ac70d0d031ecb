//! Noise-prediction training over windows of normal clips.
//!
//! Randomness is keyed by position rather than carried as state: epoch `e`
//! shuffles with its own stream and global step `s` draws its windows,
//! timesteps, noise and condition dropout from another. A run resumed from a
//! checkpoint therefore continues exactly where an uninterrupted run would
//! have been at that epoch boundary.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::VideoClip;
use crate::denoiser::checkpoint::{load_checkpoint, save_checkpoint, SaveState};
use crate::denoiser::{DenoiserModel, UNetConfig};
use crate::error::{config_err, data_err, Error, Result};
use crate::numcore::{mse, AdamState, DType, Scalar, Tensor};
use crate::schedule::{DiffusionSchedule, ScheduleParams};
use crate::seed::{derive_seed, rng_from};

const EPOCH_STREAM: u64 = 0x45_50_4f_43_48;
const STEP_STREAM: u64 = 0x53_54_45_50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub past: usize,
    pub predicted: usize,
    pub future: usize,
    pub p_drop: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 = final only).
    pub checkpoint_every: u64,
    pub dtype: DType,
    /// Exponential moving average of the weights, off by default.
    pub ema_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            lr: 2e-4,
            past: 2,
            predicted: 5,
            future: 0,
            p_drop: 0.0,
            seed: 0,
            checkpoint_every: 0,
            dtype: DType::F32,
            ema_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.past == 0 || self.predicted == 0 {
            return Err(config_err!("need at least one past and one predicted frame"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(config_err!("p_drop must lie in [0, 1], got {}", self.p_drop));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(config_err!("ema_decay must lie in [0, 1), got {d}"));
            }
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.past + self.predicted + self.future
    }

    /// Checks that the model is shaped for this window layout.
    pub fn check_model(&self, cfg: &UNetConfig) -> Result<()> {
        if (cfg.past_frames, cfg.predicted_frames, cfg.future_frames) != (self.past, self.predicted, self.future) {
            return Err(config_err!(
                "model is built for p={}, k={}, f={} but training uses p={}, k={}, f={}",
                cfg.past_frames,
                cfg.predicted_frames,
                cfg.future_frames,
                self.past,
                self.predicted,
                self.future
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub seconds: f64,
}

/// Frame indices of a window starting at `s`: conditioning (past, then
/// future) and target.
pub fn window_indices(s: usize, p: usize, k: usize, f: usize) -> (Vec<usize>, Vec<usize>) {
    let mut cond: Vec<usize> = (s..s + p).collect();
    cond.extend(s + p + k..s + p + k + f);
    (cond, (s + p..s + p + k).collect())
}

/// Uniformly placed training window. Returns the start index, the stacked
/// conditioning frames `[(p+f)·C, H, W]` and the target `[k·C, H, W]`.
pub fn sample_training_window<R: Rng + ?Sized>(
    clip: &VideoClip,
    p: usize,
    k: usize,
    f: usize,
    rng: &mut R,
) -> Result<(usize, Vec<f32>, Vec<f32>)> {
    let need = p + k + f;
    if clip.len() < need {
        return Err(data_err!("clip {} has {} frames, a window needs {need}", clip.id, clip.len()));
    }
    let s = rng.random_range(0..=clip.len() - need);
    let (ci, ti) = window_indices(s, p, k, f);
    Ok((s, clip.stack_frames(&ci)?, clip.stack_frames(&ti)?))
}

/// Uniform timestep in `1..=steps`.
pub fn sample_timestep<R: Rng + ?Sized>(steps: usize, rng: &mut R) -> usize {
    rng.random_range(1..=steps)
}

/// Everything random about one optimizer step, drawn up front.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub cond: Vec<f32>,
    pub target: Vec<f32>,
    pub ts: Vec<usize>,
    pub eps: Vec<f64>,
    pub drop: Vec<bool>,
}

impl Batch {
    /// Draws timesteps, noise and dropout for already-assembled windows.
    pub fn draw<R: Rng + ?Sized>(
        cond: Vec<f32>,
        target: Vec<f32>,
        size: usize,
        steps: usize,
        p_drop: f64,
        rng: &mut R,
    ) -> Self {
        let ts = (0..size).map(|_| sample_timestep(steps, rng)).collect();
        let eps = (0..target.len()).map(|_| rng.sample(StandardNormal)).collect();
        let drop = (0..size).map(|_| rng.random::<f64>() < p_drop).collect();
        Self { size, cond, target, ts, eps, drop }
    }

    fn assemble(clips: &[&VideoClip], cfg: &TrainConfig, steps: usize, rng: &mut impl Rng) -> Result<Self> {
        let (mut cond, mut target) = (Vec::new(), Vec::new());
        for clip in clips {
            let (_, c, t) = sample_training_window(clip, cfg.past, cfg.predicted, cfg.future, rng)?;
            cond.extend(c);
            target.extend(t);
        }
        Ok(Self::draw(cond, target, clips.len(), steps, cfg.p_drop, rng))
    }
}

fn tensor<T: Scalar>(shape: &[usize], data: impl Iterator<Item = f64>) -> Result<Tensor<T>> {
    Tensor::from_vec(shape, data.map(T::from_f64_lossy).collect())
}

/// Noise-prediction loss of one batch without touching gradients.
pub fn batch_loss<T: Scalar>(
    model: &DenoiserModel<T>,
    schedule: &DiffusionSchedule,
    batch: &Batch,
) -> Result<Tensor<T>> {
    let cfg = model.config();
    let (h, w) = (cfg.height, cfg.width);
    let n = batch.size;
    let target = tensor::<T>(&[n, cfg.noisy_channels(), h, w], batch.target.iter().map(|&v| v as f64))?;
    let cond = tensor::<T>(&[n, cfg.cond_channels(), h, w], batch.cond.iter().map(|&v| v as f64))?;
    let eps = tensor::<T>(target.shape(), batch.eps.iter().copied())?;
    let noisy = schedule.forward_sample_batch(&target, &batch.ts, &eps)?;
    let cond = if batch.drop.iter().any(|d| *d) {
        crate::numcore::replace_samples(&cond, model.null_condition(), &batch.drop)?
    } else {
        cond
    };
    let eps_hat = model.forward(&noisy, &cond, &batch.ts)?;
    mse(&eps, &eps_hat)
}

/// Backpropagates the batch loss and applies one Adam update.
pub fn apply_batch<T: Scalar>(
    model: &DenoiserModel<T>,
    schedule: &DiffusionSchedule,
    optimizer: &mut AdamState<T>,
    batch: &Batch,
) -> Result<f64> {
    let loss = batch_loss(model, schedule, batch)?;
    let value = loss.item().to_f64_lossy();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {value} (timesteps {:?})", batch.ts)));
    }
    loss.backward()?;
    optimizer.step(&model.params().tensors())?;
    Ok(value)
}

/// One optimizer step on stacked windows: draws per-sample `t` and `ε`,
/// corrupts the targets, applies condition dropout and regresses the noise.
/// Returns the batch loss before the update.
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    model: &DenoiserModel<T>,
    schedule: &DiffusionSchedule,
    optimizer: &mut AdamState<T>,
    cond: &[f32],
    target: &[f32],
    p_drop: f64,
    rng: &mut R,
) -> Result<f64> {
    let per = model.config().noisy_channels() * model.config().height * model.config().width;
    if per == 0 || !target.len().is_multiple_of(per) || target.is_empty() {
        return Err(data_err!("target of {} values is not a whole number of windows", target.len()));
    }
    let batch = Batch::draw(cond.to_vec(), target.to_vec(), target.len() / per, schedule.steps(), p_drop, rng);
    apply_batch(model, schedule, optimizer, &batch)
}

/// Mutable training state: model, optimizer, averaged weights and counters.
pub struct Trainer<T: Scalar> {
    pub model: DenoiserModel<T>,
    pub schedule: DiffusionSchedule,
    pub optimizer: AdamState<T>,
    pub ema: Option<Vec<Vec<T>>>,
    pub config: TrainConfig,
    pub step: u64,
    pub epoch: u64,
    model_seed: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model_config: UNetConfig, schedule: ScheduleParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        config.check_model(&model_config)?;
        let model_seed = derive_seed(config.seed, 0);
        let model = DenoiserModel::new(model_config, model_seed)?;
        let optimizer = AdamState::new(&model.params().tensors(), config.lr);
        let ema = config.ema_decay.map(|_| model.params().iter().map(|(_, p)| p.to_vec()).collect());
        Ok(Self { model, schedule: schedule.build()?, optimizer, ema, config, step: 0, epoch: 0, model_seed })
    }

    /// Continues from a checkpoint. The learning rate and EMA setting come
    /// from `config`; optimizer moments and counters from the file.
    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let ck = load_checkpoint::<T>(path)?;
        config.check_model(&ck.header.config)?;
        let mut optimizer = ck.optimizer.unwrap_or_else(|| AdamState::new(&ck.model.params().tensors(), config.lr));
        optimizer.lr = config.lr;
        let ema = match (config.ema_decay, ck.ema) {
            (Some(_), Some(e)) => Some(e),
            (Some(_), None) => Some(ck.model.params().iter().map(|(_, p)| p.to_vec()).collect()),
            (None, _) => None,
        };
        Ok(Self {
            schedule: ck.header.schedule.build()?,
            model: ck.model,
            optimizer,
            ema,
            config,
            step: ck.header.step,
            epoch: ck.header.epoch,
            model_seed: ck.header.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let state = SaveState {
            step: self.step,
            epoch: self.epoch,
            seed: self.model_seed,
            optimizer: Some(&self.optimizer),
            ema: self.ema.as_deref().zip(self.config.ema_decay),
        };
        save_checkpoint(path, &self.model, self.schedule.params(), &state)
    }

    fn update_ema(&mut self) {
        let (Some(ema), Some(d)) = (self.ema.as_mut(), self.config.ema_decay) else { return };
        let (d, one_d) = (T::from_f64_lossy(d), T::from_f64_lossy(1.0 - d));
        for ((_, p), e) in self.model.params().iter().zip(ema.iter_mut()) {
            e.iter_mut().zip(p.data().iter()).for_each(|(e, v)| *e = d * *e + one_d * *v);
        }
    }

    /// One step on a prepared batch; advances the step counter.
    pub fn step_batch(&mut self, batch: &Batch) -> Result<f64> {
        let loss = apply_batch(&self.model, &self.schedule, &mut self.optimizer, batch)?;
        self.step += 1;
        self.update_ema();
        Ok(loss)
    }

    /// Draws the batches of epoch `epoch` (clip order, then one window per
    /// clip) given the global step the epoch starts at.
    pub fn epoch_plan(&self, n_clips: usize, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n_clips).collect();
        order.shuffle(&mut rng_from(derive_seed(self.config.seed ^ EPOCH_STREAM, epoch)));
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Per-step random stream.
fn step_rng(seed: u64, step: u64) -> rand_chacha::ChaCha8Rng {
    rng_from(derive_seed(seed ^ STEP_STREAM, step))
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Resume from this checkpoint instead of initializing.
    pub resume: Option<PathBuf>,
    /// Write zero in the `seconds` log column and assemble batches inline,
    /// making the log byte-reproducible.
    pub deterministic: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub records: Vec<TrainRecord>,
}

pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";

fn check_clips(clips: &[VideoClip], cfg: &TrainConfig) -> Result<()> {
    if clips.is_empty() {
        return Err(data_err!("training set is empty"));
    }
    for c in clips {
        if c.has_anomaly() {
            return Err(data_err!("clip {} contains anomalous frames; training uses normal clips only", c.id));
        }
        if c.len() < cfg.window_len() {
            return Err(data_err!("clip {} has {} frames, a window needs {}", c.id, c.len(), cfg.window_len()));
        }
    }
    Ok(())
}

/// Runs `config.epochs` epochs (on top of a resumed checkpoint's), writing
/// `model.ckpt`, periodic `checkpoints/step_XXXXXXXX.ckpt` files and the
/// `train_log.csv` record stream under `opts.out_dir`.
pub fn train<T: Scalar>(
    clips: &[VideoClip],
    model_config: &UNetConfig,
    schedule: ScheduleParams,
    config: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_clips(clips, config)?;
    let [_, c, h, w] = clips[0].shape();
    if (c, h, w) != (model_config.image_channels, model_config.height, model_config.width) {
        return Err(config_err!(
            "clips are {c}×{h}×{w}, model expects {}×{}×{}",
            model_config.image_channels,
            model_config.height,
            model_config.width
        ));
    }
    if clips.iter().any(|x| x.shape()[1..] != clips[0].shape()[1..]) {
        return Err(data_err!("training clips differ in frame size"));
    }
    let mut trainer = match &opts.resume {
        Some(path) => Trainer::<T>::resume(path, config.clone())?,
        None => Trainer::<T>::new(model_config.clone(), schedule, config.clone())?,
    };
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let log_path = opts.out_dir.join(TRAIN_LOG);
    let fresh_log = opts.resume.is_none() || !log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .append(!fresh_log)
        .write(true)
        .truncate(fresh_log)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if fresh_log {
        writeln!(log, "step,epoch,loss,seconds").map_err(|e| Error::io(&log_path, e))?;
    }

    let started = Instant::now();
    let final_path = opts.out_dir.join(FINAL_CHECKPOINT);
    let mut records = Vec::new();
    let first_epoch = trainer.epoch;
    for epoch in first_epoch..first_epoch + config.epochs as u64 {
        let plan = trainer.epoch_plan(clips.len(), epoch);
        let steps = trainer.schedule.steps();
        let base_step = trainer.step;
        let make = |i: usize, idx: &[usize]| -> Result<Batch> {
            let picked: Vec<&VideoClip> = idx.iter().map(|&j| &clips[j]).collect();
            Batch::assemble(&picked, config, steps, &mut step_rng(config.seed, base_step + i as u64))
        };
        let mut on_batch = |trainer: &mut Trainer<T>, batch: Batch| -> Result<()> {
            let loss = match trainer.step_batch(&batch) {
                Ok(l) => l,
                Err(e @ Error::NonFinite(_)) => {
                    dump_state(&opts.out_dir, trainer, &batch);
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let seconds = if opts.deterministic { 0.0 } else { started.elapsed().as_secs_f64() };
            let rec = TrainRecord { step: trainer.step, epoch, loss, seconds };
            writeln!(log, "{},{},{},{}", rec.step, rec.epoch, rec.loss, rec.seconds)
                .map_err(|e| Error::io(&log_path, e))?;
            records.push(rec);
            if config.checkpoint_every > 0 && trainer.step.is_multiple_of(config.checkpoint_every) {
                let p = opts.out_dir.join("checkpoints").join(format!("step_{:08}.ckpt", trainer.step));
                trainer.save(&p)?;
            }
            Ok(())
        };
        if opts.deterministic {
            for (i, idx) in plan.iter().enumerate() {
                on_batch(&mut trainer, make(i, idx)?)?;
            }
        } else {
            // Two-stage pipeline: the next batches are assembled on a helper
            // thread while the optimizer works. Batch contents depend only
            // on step indices, so the result matches the inline path.
            std::thread::scope(|scope| -> Result<()> {
                let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(2);
                let plan = &plan;
                let make = &make;
                scope.spawn(move || {
                    for (i, idx) in plan.iter().enumerate() {
                        if tx.send(make(i, idx)).is_err() {
                            break;
                        }
                    }
                });
                for batch in rx {
                    on_batch(&mut trainer, batch?)?;
                }
                Ok(())
            })?;
        }
        trainer.epoch = epoch + 1;
    }
    trainer.save(&final_path)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome { checkpoint: final_path, records })
}

fn dump_state<T: Scalar>(dir: &Path, trainer: &Trainer<T>, batch: &Batch) {
    let norms: Vec<(String, f64)> = trainer
        .model
        .params()
        .iter()
        .map(|(n, p)| (n.to_string(), p.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt()))
        .collect();
    let dump = serde_json::json!({
        "step": trainer.step,
        "epoch": trainer.epoch,
        "timesteps": batch.ts,
        "dropped": batch.drop,
        "parameter_norms": norms,
    });
    // Best effort: the original error is what gets reported.
    let _ = fs::write(dir.join("nonfinite_dump.json"), serde_json::to_vec_pretty(&dump).unwrap_or_default());
}

/// Mean loss of a model over a fixed list of batches, without updates.
pub fn evaluate_loss<T: Scalar>(
    model: &DenoiserModel<T>,
    schedule: &DiffusionSchedule,
    batches: &[Batch],
) -> Result<f64> {
    let _g = crate::numcore::no_grad();
    let mut total = 0.0;
    for b in batches {
        total += batch_loss(model, schedule, b)?.item().to_f64_lossy();
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Fixed batches drawn from `clips` with a dedicated seed, for comparing
/// models on the same stream.
pub fn probe_batches(
    clips: &[VideoClip],
    config: &TrainConfig,
    steps: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    check_clips(clips, config)?;
    let mut rng = rng_from(seed);
    (0..count)
        .map(|_| {
            let picked: Vec<&VideoClip> =
                (0..config.batch_size).map(|_| &clips[rng.random_range(0..clips.len())]).collect();
            Batch::assemble(&picked, config, steps, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_clip, Label, Source, SynthConfig};
    use crate::denoiser::checkpoint::read_header;

    fn tiny_model(p: usize, k: usize, f: usize) -> UNetConfig {
        UNetConfig {
            height: 8,
            width: 8,
            past_frames: p,
            predicted_frames: k,
            future_frames: f,
            base_width: 8,
            channel_multipliers: vec![1, 2],
            attention_levels: vec![1],
            groups: 4,
            heads: 2,
            time_embed_dim: 8,
            spade_hidden: 4,
            ..UNetConfig::desk()
        }
    }

    fn clips(n: usize, frames: usize) -> Vec<VideoClip> {
        (0..n)
            .map(|s| {
                synth_clip(&SynthConfig { height: 8, width: 8, frames, seed: s as u64, ..Default::default() }).unwrap()
            })
            .collect()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 2, lr: 1e-3, past: 2, predicted: 2, ..Default::default() }
    }

    fn counting_clip(frames: usize) -> VideoClip {
        let data: Vec<f32> = (0..frames).map(|i| i as f32).collect();
        VideoClip::new("count", Source::Ingested, [frames, 1, 1, 1], data, vec![Label::Normal; frames]).unwrap()
    }

    #[test]
    fn exact_length_clip_starts_at_zero() {
        let clip = counting_clip(7);
        let mut rng = rng_from(0);
        for _ in 0..20 {
            let (s, c, t) = sample_training_window(&clip, 2, 5, 0, &mut rng).unwrap();
            assert_eq!(s, 0);
            assert_eq!(c, vec![0.0, 1.0]);
            assert_eq!(t, vec![2.0, 3.0, 4.0, 5.0, 6.0]);
        }
        assert!(matches!(sample_training_window(&clip, 2, 5, 1, &mut rng), Err(Error::Data(_))));
    }

    #[test]
    fn future_window_layout() {
        let clip = counting_clip(14);
        let mut rng = rng_from(3);
        for _ in 0..50 {
            let (s, c, t) = sample_training_window(&clip, 2, 3, 2, &mut rng).unwrap();
            let s = s as f32;
            assert_eq!(c, vec![s, s + 1.0, s + 5.0, s + 6.0]);
            assert_eq!(t, vec![s + 2.0, s + 3.0, s + 4.0]);
        }
    }

    /// Upper 1% point of chi-square with `df` degrees of freedom
    /// (Wilson–Hilferty).
    fn chi2_crit(df: f64) -> f64 {
        let z = 2.326_347_874;
        df * (1.0 - 2.0 / (9.0 * df) + z * (2.0 / (9.0 * df)).sqrt()).powi(3)
    }

    fn chi2(counts: &[usize], total: usize) -> f64 {
        let e = total as f64 / counts.len() as f64;
        counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
    }

    #[test]
    fn window_starts_are_uniform() {
        let clip = counting_clip(14);
        let mut rng = rng_from(11);
        let mut counts = [0usize; 8];
        for _ in 0..10_000 {
            counts[sample_training_window(&clip, 2, 5, 0, &mut rng).unwrap().0] += 1;
        }
        assert!(chi2(&counts, 10_000) < chi2_crit(7.0), "{counts:?}");
    }

    #[test]
    fn timesteps_are_uniform() {
        let mut rng = rng_from(12);
        let mut counts = vec![0usize; 100];
        for _ in 0..10_000 {
            let t = sample_timestep(100, &mut rng);
            counts[t - 1] += 1;
        }
        assert!(chi2(&counts, 10_000) < chi2_crit(99.0));
    }

    #[test]
    fn loss_is_deterministic_and_nonnegative() {
        let model_cfg = tiny_model(2, 2, 0);
        let schedule = ScheduleParams::default().build().unwrap();
        let data = clips(2, 6);
        let run = || {
            let model = DenoiserModel::<f64>::new(model_cfg.clone(), 5).unwrap();
            let mut opt = AdamState::new(&model.params().tensors(), 1e-3);
            let mut rng = rng_from(1);
            let (_, c0, t0) = sample_training_window(&data[0], 2, 2, 0, &mut rng).unwrap();
            let (_, c1, t1) = sample_training_window(&data[1], 2, 2, 0, &mut rng).unwrap();
            let cond = [c0, c1].concat();
            let target = [t0, t1].concat();
            train_step(&model, &schedule, &mut opt, &cond, &target, 0.5, &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a >= 0.0);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn overfits_a_single_clip() {
        let model_cfg = tiny_model(2, 2, 0);
        let schedule = ScheduleParams::default().build().unwrap();
        let clip = &clips(1, 4)[0];
        let model = DenoiserModel::<f32>::new(model_cfg, 2).unwrap();
        let mut opt = AdamState::new(&model.params().tensors(), 2e-3);
        let mut rng = rng_from(4);
        let cond: Vec<f32> = clip.stack_frames(&[0, 1]).unwrap().repeat(4);
        let target: Vec<f32> = clip.stack_frames(&[2, 3]).unwrap().repeat(4);
        let losses: Vec<f64> =
            (0..500).map(|_| train_step(&model, &schedule, &mut opt, &cond, &target, 0.0, &mut rng).unwrap()).collect();
        let first = losses[..50].iter().sum::<f64>() / 50.0;
        let last = losses[450..].iter().sum::<f64>() / 50.0;
        assert!(last < first, "first {first}, last {last}");
    }

    #[test]
    fn rejects_bad_training_sets() {
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions { out_dir: dir.path().into(), resume: None, deterministic: true };
        let m = tiny_model(2, 2, 0);
        let s = ScheduleParams::default();
        assert!(matches!(train::<f32>(&[], &m, s, &cfg(1), &opts), Err(Error::Data(_))));
        let bad = synth_clip(&SynthConfig {
            height: 8,
            width: 8,
            frames: 6,
            anomaly: crate::data::AnomalyKind::Hotspot,
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(train::<f32>(&[bad], &m, s, &cfg(1), &opts), Err(Error::Data(_))));
        assert!(matches!(train::<f32>(&clips(1, 3), &m, s, &cfg(1), &opts), Err(Error::Data(_))));
        let wrong = tiny_model(2, 3, 0);
        assert!(matches!(train::<f32>(&clips(2, 6), &wrong, s, &cfg(1), &opts), Err(Error::Config(_))));
    }

    #[test]
    fn zero_epochs_writes_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions { out_dir: dir.path().into(), resume: None, deterministic: true };
        let out = train::<f32>(&clips(2, 6), &tiny_model(2, 2, 0), ScheduleParams::default(), &cfg(0), &opts).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(read_header(&out.checkpoint).unwrap().step, 0);
        let fresh = DenoiserModel::<f32>::new(tiny_model(2, 2, 0), derive_seed(0, 0)).unwrap();
        let saved = load_checkpoint::<f32>(&out.checkpoint).unwrap();
        assert_eq!(fresh.params().tensors()[5].to_vec(), saved.model.params().tensors()[5].to_vec());
        assert!(!dir.path().join("checkpoints").exists());
        let log = fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
        assert_eq!(log, "step,epoch,loss,seconds\n");
    }

    #[test]
    fn pipeline_matches_inline_and_resume_continues() {
        let data = clips(5, 6);
        let m = tiny_model(2, 2, 0);
        let s = ScheduleParams::default();
        let mut c = cfg(2);
        c.checkpoint_every = 2;
        c.ema_decay = Some(0.9);

        let inline_dir = tempfile::tempdir().unwrap();
        let inline = TrainOptions { out_dir: inline_dir.path().into(), resume: None, deterministic: true };
        let a = train::<f32>(&data, &m, s, &c, &inline).unwrap();
        let piped_dir = tempfile::tempdir().unwrap();
        let piped = TrainOptions { out_dir: piped_dir.path().into(), resume: None, deterministic: false };
        let b = train::<f32>(&data, &m, s, &c, &piped).unwrap();
        let losses = |o: &TrainOutcome| o.records.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        // 5 clips in batches of 2: 3 steps per epoch.
        assert_eq!(a.records.last().unwrap().step, 6);
        assert!(inline_dir.path().join("checkpoints/step_00000004.ckpt").exists());

        // One epoch, then one more from the checkpoint, equals two epochs.
        let split_dir = tempfile::tempdir().unwrap();
        let first = TrainOptions { out_dir: split_dir.path().into(), resume: None, deterministic: true };
        train::<f32>(&data, &m, s, &TrainConfig { epochs: 1, ..c.clone() }, &first).unwrap();
        let second = TrainOptions { resume: Some(split_dir.path().join(FINAL_CHECKPOINT)), ..first };
        let rest = train::<f32>(&data, &m, s, &TrainConfig { epochs: 1, ..c.clone() }, &second).unwrap();
        assert_eq!(rest.records.first().unwrap().step, 4);
        assert_eq!(losses(&rest), losses(&a)[3..].to_vec());
        let log = fs::read_to_string(split_dir.path().join(TRAIN_LOG)).unwrap();
        let steps: Vec<u64> = log.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(steps, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(
            fs::read_to_string(inline_dir.path().join(TRAIN_LOG)).unwrap(),
            log,
            "deterministic logs are byte-identical"
        );
        let ck = load_checkpoint::<f32>(&split_dir.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(ck.header.epoch, 2);
        assert!(ck.ema.is_some());
    }
}
