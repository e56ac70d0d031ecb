//! Command-line pipeline: `synth`, `train`, `predict` and `eval`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 evaluation error, 1 anything else.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use diffwatch_core::data::{load_clip_dir, load_dataset, synth_dataset, write_clip_dir, Label, Source, VideoClip};
use diffwatch_core::denoiser::checkpoint::{load_checkpoint, read_header};
use diffwatch_core::predictor::{plan_windows, predict_videos, Conditioning, PredictedClip, WindowPlan};
use diffwatch_core::scoring::{evaluate, score_clip, write_roc_csv, write_scores_csv, ScoreSeries};
use diffwatch_core::testing::ClipOracle;
use diffwatch_core::trainer::{train, TrainOptions, TrainOutcome};
use diffwatch_core::{DType, Error, Result, Scalar};

use config::{CondMode, RunConfig};

/// Environment variable naming the default run directory.
pub const RUN_DIR_ENV: &str = "DIFFWATCH_RUN_DIR";

#[derive(Debug, Parser)]
#[command(name = "diffwatch", version, about = "Diffusion video prediction for anomaly detection")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: `<run dir>/<subcommand>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// 16×16 desk-scale preset.
    #[arg(long, global = true)]
    pub desk: bool,
    /// Default location for inputs and outputs.
    #[arg(long, global = true, env = RUN_DIR_ENV)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train the conditional denoiser on normal clips.
    Train(TrainArgs),
    /// Write real and predicted frames side by side.
    Predict(PredictArgs),
    /// Score clips and compute the frame-level ROC.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Clip counts; giving any of them replaces the configured mix, with
    /// omitted kinds set to zero.
    #[arg(long)]
    pub normal: Option<usize>,
    #[arg(long)]
    pub hotspot: Option<usize>,
    #[arg(long)]
    pub plume: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root (default: `<run dir>/data`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub cond: Option<CondMode>,
    #[arg(long)]
    pub dtype: Option<DType>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from a checkpoint; `--epochs` counts additional epochs.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Single-threaded batch assembly and a zero timing column, so the
    /// training log is byte-reproducible.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Dataset root or a single clip directory (default: `<run dir>/test`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Trained model (default: `<run dir>/train/model.ckpt`).
    #[arg(long, conflicts_with = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Use the exact-noise oracle instead of a trained model.
    #[arg(long)]
    pub oracle: bool,
    /// Expected window layout; must match the checkpoint.
    #[arg(long, value_enum)]
    pub cond: Option<CondMode>,
    /// Condition later windows on earlier predictions.
    #[arg(long)]
    pub autoregressive: bool,
    /// Windows per sampler call.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Parallel workers; results do not depend on the count.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Regular-score threshold for the `predicted_label` column.
    #[arg(long)]
    pub threshold: Option<f64>,
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) | Error::Config(_) | Error::Dimension(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) => 3,
        Error::Evaluation(_) => 4,
        Error::NonFinite(_) => 1,
    }
}

/// Parses `args` and runs the subcommand, returning the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    let mut cfg = RunConfig::load(c.config.as_deref(), c.desk)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(c, cfg, a),
        Command::Train(a) => cmd_train(c, cfg, a),
        Command::Predict(a) => cmd_predict(c, cfg, a),
        Command::Eval(a) => cmd_eval(c, cfg, a),
    }
}

fn run_path(c: &Common, explicit: Option<&PathBuf>, sub: &str, what: &str) -> Result<PathBuf> {
    explicit
        .cloned()
        .or_else(|| c.run_dir.as_ref().map(|r| r.join(sub)))
        .ok_or_else(|| Error::Usage(format!("{what} is required (or set {RUN_DIR_ENV})")))
}

fn cmd_synth(c: &Common, mut cfg: RunConfig, a: &SynthArgs) -> Result<()> {
    let out = run_path(c, c.out.as_ref(), "data", "--out")?;
    // Counts on the command line replace the configured mix as a whole.
    if a.normal.is_some() || a.hotspot.is_some() || a.plume.is_some() {
        cfg.data.normal = a.normal.unwrap_or(0);
        cfg.data.hotspot = a.hotspot.unwrap_or(0);
        cfg.data.plume = a.plume.unwrap_or(0);
    }
    cfg.validate()?;
    if cfg.data.channels != 1 {
        return Err(Error::Config("synthetic clips are grayscale; set data.channels = 1".into()));
    }
    let entries = synth_dataset(&out, cfg.counts(), &cfg.synth_config(), cfg.seed)?;
    cfg.echo(&out)?;
    println!("wrote {} clips to {}", entries.len(), out.display());
    Ok(())
}

fn cmd_train(c: &Common, mut cfg: RunConfig, a: &TrainArgs) -> Result<()> {
    let data = run_path(c, a.data.as_ref(), "data", "--data")?;
    let out = run_path(c, c.out.as_ref(), "train", "--out")?;
    if let Some(cond) = a.cond {
        cfg.set_cond(cond);
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.dtype {
        cfg.train.dtype = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.train.checkpoint_every = v;
    }
    if let Some(path) = &a.resume {
        let header = read_header(path)?;
        let requested = cfg.window;
        cfg.adopt_model(&header.config, header.schedule);
        if a.cond.is_some() && requested != cfg.window {
            return Err(layout_mismatch(&cfg));
        }
        cfg.train.dtype = header.dtype;
    }
    cfg.validate()?;
    let clips = load_dataset(&data, &cfg.load_options())?;
    cfg.echo(&out)?;
    let opts = TrainOptions { out_dir: out, resume: a.resume.clone(), deterministic: a.deterministic };
    let (model, sched, tcfg) = (cfg.unet_config(), cfg.schedule, cfg.train_config());
    let outcome: TrainOutcome = match cfg.train.dtype {
        DType::F32 => train::<f32>(&clips, &model, sched, &tcfg, &opts)?,
        DType::F64 => train::<f64>(&clips, &model, sched, &tcfg, &opts)?,
    };
    match outcome.records.last() {
        Some(r) => println!("step {} epoch {} loss {:.6}", r.step, r.epoch, r.loss),
        None => println!("no training steps run"),
    }
    println!("checkpoint {}", outcome.checkpoint.display());
    Ok(())
}

fn layout_mismatch(cfg: &RunConfig) -> Error {
    let w = cfg.window;
    Error::Config(format!(
        "the checkpoint uses {} past, {} predicted and {} future frames, which does not match --cond",
        w.past, w.predicted, w.future
    ))
}

/// Where predictions come from.
#[derive(Clone, Debug)]
enum Denoiser {
    Checkpoint(PathBuf),
    Oracle,
}

struct Prepared {
    cfg: RunConfig,
    denoiser: Denoiser,
    clips: Vec<VideoClip>,
    out: PathBuf,
}

fn prepare(c: &Common, mut cfg: RunConfig, a: &ModelArgs, sub: &str) -> Result<Prepared> {
    let data = run_path(c, a.data.as_ref(), "test", "--data")?;
    let out = run_path(c, c.out.as_ref(), sub, "--out")?;
    if let Some(cond) = a.cond {
        cfg.set_cond(cond);
    }
    if a.autoregressive {
        cfg.predict.conditioning = Conditioning::Autoregressive;
    }
    if let Some(v) = a.batch {
        cfg.predict.batch = v;
    }
    if let Some(v) = a.workers {
        cfg.predict.workers = v;
    }
    let denoiser = if a.oracle {
        if cfg.predict.conditioning != Conditioning::Observed {
            return Err(Error::Usage("the oracle needs observed conditioning".into()));
        }
        Denoiser::Oracle
    } else {
        let path = run_path(c, a.checkpoint.as_ref(), "train/model.ckpt", "--checkpoint")?;
        let header = read_header(&path)?;
        let requested = cfg.window;
        cfg.adopt_model(&header.config, header.schedule);
        if a.cond.is_some() && requested != cfg.window {
            return Err(layout_mismatch(&cfg));
        }
        cfg.train.dtype = header.dtype;
        Denoiser::Checkpoint(path)
    };
    cfg.validate()?;
    let clips = load_clips(&data, &cfg)?;
    cfg.echo(&out)?;
    Ok(Prepared { cfg, denoiser, clips, out })
}

/// Loads a dataset root, or a single clip when `dir` holds frames itself.
fn load_clips(dir: &Path, cfg: &RunConfig) -> Result<Vec<VideoClip>> {
    let has_frames = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .any(|e| e.path().extension().is_some_and(|x| x.eq_ignore_ascii_case("png")));
    let clips = if has_frames {
        vec![load_clip_dir(dir, &cfg.load_options())?]
    } else {
        load_dataset(dir, &cfg.load_options())?
    };
    if clips.is_empty() {
        return Err(Error::Data(format!("{}: no clips", dir.display())));
    }
    Ok(clips)
}

/// Predicts every clip. Clips are grouped by length (one window plan
/// each) and split into contiguous shares across workers; the window seeds
/// depend only on clip id and window index, so the output does not depend
/// on the split.
fn predict_all(p: &Prepared) -> Result<Vec<(PredictedClip, WindowPlan)>> {
    let w = p.cfg.window;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, clip) in p.clips.iter().enumerate() {
        groups.entry(clip.len()).or_default().push(i);
    }
    let mut results: Vec<Option<(PredictedClip, WindowPlan)>> = vec![None; p.clips.len()];
    for (len, members) in groups {
        let plan = plan_windows(len, w.past, w.predicted, w.future)
            .map_err(|e| Error::Data(format!("clips of {len} frames: {e}")))?;
        let clips: Vec<VideoClip> = members.iter().map(|&i| p.clips[i].clone()).collect();
        let share = clips.len().div_ceil(p.cfg.predict.workers.max(1));
        let preds: Vec<PredictedClip> = if p.cfg.predict.workers <= 1 || clips.len() <= 1 {
            predict_share(p, &clips, &plan)?
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> =
                    clips.chunks(share).map(|part| s.spawn(|| predict_share(p, part, &plan))).collect();
                let mut all = Vec::with_capacity(clips.len());
                for h in handles {
                    all.extend(h.join().map_err(|_| Error::Usage("prediction worker panicked".into()))??);
                }
                Ok::<_, Error>(all)
            })?
        };
        for (&i, pred) in members.iter().zip(preds) {
            results[i] = Some((pred, plan.clone()));
        }
    }
    Ok(results.into_iter().map(|r| r.expect("every clip predicted")).collect())
}

fn predict_share(p: &Prepared, clips: &[VideoClip], plan: &WindowPlan) -> Result<Vec<PredictedClip>> {
    let schedule = p.cfg.schedule.build()?;
    let opts = p.cfg.predict_options();
    match &p.denoiser {
        Denoiser::Oracle => {
            let oracle = ClipOracle::new(clips, plan, schedule.clone())?;
            predict_videos::<f64, _>(&oracle, &schedule, clips, plan, &opts)
        }
        Denoiser::Checkpoint(path) => match p.cfg.train.dtype {
            DType::F32 => predict_with::<f32>(path, &schedule, clips, plan, &opts),
            DType::F64 => predict_with::<f64>(path, &schedule, clips, plan, &opts),
        },
    }
}

fn predict_with<T: Scalar>(
    path: &Path,
    schedule: &diffwatch_core::DiffusionSchedule,
    clips: &[VideoClip],
    plan: &WindowPlan,
    opts: &diffwatch_core::predictor::PredictOptions,
) -> Result<Vec<PredictedClip>> {
    let ck = load_checkpoint::<T>(path)?;
    // Averaged weights, when present, are the ones meant for inference.
    ck.apply_ema();
    predict_videos(&ck.model, schedule, clips, plan, opts)
}

fn cmd_predict(c: &Common, cfg: RunConfig, a: &PredictArgs) -> Result<()> {
    let p = prepare(c, cfg, &a.model, "predict")?;
    let preds = predict_all(&p)?;
    for (clip, (pred, plan)) in p.clips.iter().zip(&preds) {
        let dir = p.out.join(&clip.id);
        write_clip_dir(&dir, &side_by_side(clip, pred)?)?;
        write_provenance(&dir.join("provenance.csv"), plan)?;
    }
    println!("wrote {} clips to {}", preds.len(), p.out.display());
    Ok(())
}

/// Frames with the real image on the left and the prediction on the right.
fn side_by_side(clip: &VideoClip, pred: &PredictedClip) -> Result<VideoClip> {
    let [f, c, h, w] = clip.shape();
    let mut data = Vec::with_capacity(2 * clip.data().len());
    for i in 0..f {
        let (real, fake) = (clip.frame(i), pred.frame(i));
        for row in 0..c * h {
            data.extend_from_slice(&real[row * w..(row + 1) * w]);
            data.extend_from_slice(&fake[row * w..(row + 1) * w]);
        }
    }
    VideoClip::new(clip.id.clone(), Source::Synthetic, [f, c, h, 2 * w], data, clip.labels().to_vec())
}

/// One row per frame: whether it was generated, by which window, and from
/// which conditioning frames.
fn write_provenance(path: &Path, plan: &WindowPlan) -> Result<()> {
    let mut rows = vec![("observed", String::new(), String::new(), String::new()); plan.frames];
    for (wi, w) in plan.windows.iter().enumerate() {
        let cond = w.cond_indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";");
        for &i in &w.predict_indices {
            rows[i] = ("predicted", wi.to_string(), w.block_start.to_string(), cond.clone());
        }
    }
    let mut text = String::from("frame_index,source,window,block_start,cond_indices\n");
    for (i, (src, wi, bs, cond)) in rows.iter().enumerate() {
        text.push_str(&format!("{i},{src},{wi},{bs},{cond}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn cmd_eval(c: &Common, mut cfg: RunConfig, a: &EvalArgs) -> Result<()> {
    if let Some(t) = a.threshold {
        cfg.predict.threshold = t;
    }
    let p = prepare(c, cfg, &a.model, "eval")?;
    let preds = predict_all(&p)?;
    let series: Vec<ScoreSeries> =
        p.clips.iter().zip(&preds).map(|(clip, (pred, _))| score_clip(clip, pred)).collect::<Result<_>>()?;
    let scores_dir = p.out.join("scores");
    std::fs::create_dir_all(&scores_dir).map_err(|e| Error::Data(format!("{}: {e}", scores_dir.display())))?;
    for s in &series {
        write_scores_csv(&scores_dir.join(format!("{}.csv", s.video_id)), s, p.cfg.predict.threshold)?;
    }
    let eval = evaluate(&series)?;
    write_roc_csv(&p.out.join("roc.csv"), &eval.roc)?;
    let frames: usize = series.iter().map(|s| s.psnr.len()).sum();
    let anomalous_frames: usize =
        series.iter().map(|s| s.labels.iter().filter(|l| **l == Label::Anomalous).count()).sum();
    let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
    let summary = format!(
        "AUC={:.6}\nvideos={}\nframes={frames}\nanomalous_frames={anomalous_frames}\nmean_regular_score_normal_videos={}\nmean_regular_score_anomalous_videos={}\n",
        eval.roc.auc,
        series.len(),
        fmt(eval.mean_score_normal_videos),
        fmt(eval.mean_score_anomalous_videos),
    );
    let path = p.out.join("summary.txt");
    std::fs::write(&path, &summary).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    println!("AUC={:.6}", eval.roc.auc);
    Ok(())
}
