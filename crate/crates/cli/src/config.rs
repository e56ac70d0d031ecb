//! Run configuration: preset defaults, merged with an optional TOML file,
//! then with command-line overrides.

use std::path::Path;

use diffwatch_core::data::{AnomalyKind, DatasetCounts, LoadOptions, SynthConfig};
use diffwatch_core::predictor::{Conditioning, PredictOptions};
use diffwatch_core::trainer::TrainConfig;
use diffwatch_core::{DType, Error, Result, ScheduleParams, UNetConfig};
use serde::{Deserialize, Serialize};

/// Name of the echoed configuration written to every output directory.
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 128×128 frames, 500 normal and 20 anomalous clips.
    #[default]
    Paper,
    /// 16×16 frames and a small network, sized for a CPU.
    Desk,
}

/// Window layout selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum CondMode {
    /// Past frames only.
    #[value(name = "past")]
    Past,
    /// Past and future frames around a shorter predicted block.
    #[value(name = "past+future")]
    PastFuture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub height: usize,
    pub width: usize,
    /// 1 (grayscale) or 3 (RGB); synthesis is grayscale only.
    pub channels: usize,
    pub frames: usize,
    pub n_blobs: usize,
    pub drift_min: f64,
    pub drift_max: f64,
    /// Fixed anomaly onset; drawn per clip when absent.
    pub onset: Option<usize>,
    pub normal: usize,
    pub hotspot: usize,
    pub plume: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    pub past: usize,
    pub predicted: usize,
    pub future: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub base_width: usize,
    pub channel_multipliers: Vec<usize>,
    pub attention_levels: Vec<usize>,
    pub groups: usize,
    pub heads: usize,
    pub time_embed_dim: usize,
    pub spade_hidden: usize,
    pub spade: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub p_drop: f64,
    pub checkpoint_every: u64,
    pub dtype: DType,
    pub ema_decay: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSection {
    pub conditioning: Conditioning,
    /// Windows per sampler call.
    pub batch: usize,
    /// Parallel evaluation workers; output is identical for any count.
    pub workers: usize,
    /// Regular-score threshold for the `predicted_label` column.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub data: DataSection,
    pub window: WindowSection,
    pub model: ModelSection,
    pub schedule: ScheduleParams,
    pub train: TrainSection,
    pub predict: PredictSection,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let desk = UNetConfig::desk();
        let (size, normal, model) = match preset {
            Preset::Desk => (
                16,
                200,
                ModelSection {
                    base_width: desk.base_width,
                    channel_multipliers: desk.channel_multipliers,
                    attention_levels: desk.attention_levels,
                    groups: desk.groups,
                    heads: desk.heads,
                    time_embed_dim: desk.time_embed_dim,
                    spade_hidden: desk.spade_hidden,
                    spade: desk.spade,
                },
            ),
            Preset::Paper => (
                128,
                500,
                ModelSection {
                    base_width: 64,
                    channel_multipliers: vec![1, 1, 2, 2, 4],
                    attention_levels: vec![4],
                    groups: 8,
                    heads: 4,
                    time_embed_dim: 64,
                    spade_hidden: 32,
                    spade: true,
                },
            ),
        };
        let synth = SynthConfig::default();
        let train = TrainConfig::default();
        Self {
            preset,
            seed: 0,
            data: DataSection {
                height: size,
                width: size,
                channels: 1,
                frames: synth.frames,
                n_blobs: synth.n_blobs,
                drift_min: synth.drift_min,
                drift_max: synth.drift_max,
                onset: None,
                normal,
                hotspot: 10,
                plume: 10,
            },
            window: WindowSection { past: train.past, predicted: train.predicted, future: train.future },
            model,
            schedule: ScheduleParams::default(),
            train: TrainSection {
                epochs: train.epochs,
                batch_size: train.batch_size,
                lr: train.lr,
                p_drop: train.p_drop,
                checkpoint_every: train.checkpoint_every,
                dtype: train.dtype,
                ema_decay: train.ema_decay,
            },
            predict: PredictSection { conditioning: Conditioning::Observed, batch: 16, workers: 1, threshold: 0.5 },
        }
    }

    /// Preset defaults overlaid with the TOML file at `path`. The file may
    /// pick the preset itself; `desk` forces the desk preset either way.
    pub fn load(path: Option<&Path>, desk: bool) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let named = match file.get("preset") {
            Some(v) => v.clone().try_into::<Preset>().map_err(|e| Error::Config(format!("preset: {e}")))?,
            None => Preset::default(),
        };
        let preset = if desk { Preset::Desk } else { named };
        let mut merged = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, file);
        merged.insert("preset".into(), toml::Value::try_from(preset).map_err(|e| Error::Config(e.to_string()))?);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn set_cond(&mut self, mode: CondMode) {
        match mode {
            CondMode::Past => self.window.future = 0,
            CondMode::PastFuture => {
                self.window.predicted = 3;
                self.window.future = 2;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.height == 0 || d.width == 0 || d.frames == 0 {
            return Err(Error::Config("data.height, data.width and data.frames must be positive".into()));
        }
        if !matches!(d.channels, 1 | 3) {
            return Err(Error::Config(format!("data.channels must be 1 or 3, got {}", d.channels)));
        }
        let w = &self.window;
        if d.frames < w.past + w.predicted + w.future {
            return Err(Error::Config(format!(
                "clips of {} frames cannot hold a window of {}+{}+{}",
                d.frames, w.past, w.predicted, w.future
            )));
        }
        if self.predict.batch == 0 || self.predict.workers == 0 {
            return Err(Error::Config("predict.batch and predict.workers must be positive".into()));
        }
        if !self.predict.threshold.is_finite() {
            return Err(Error::Config("predict.threshold must be finite".into()));
        }
        self.synth_config().validate()?;
        self.schedule.build()?;
        self.unet_config().validate()?;
        self.train_config().validate()
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            height: self.data.height,
            width: self.data.width,
            frames: self.data.frames,
            n_blobs: self.data.n_blobs,
            drift_min: self.data.drift_min,
            drift_max: self.data.drift_max,
            anomaly: AnomalyKind::None,
            onset: self.data.onset,
            seed: self.seed,
        }
    }

    pub fn counts(&self) -> DatasetCounts {
        DatasetCounts { normal: self.data.normal, hotspot: self.data.hotspot, plume: self.data.plume }
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions { height: Some(self.data.height), width: Some(self.data.width), channels: self.data.channels }
    }

    pub fn unet_config(&self) -> UNetConfig {
        let m = &self.model;
        UNetConfig {
            image_channels: self.data.channels,
            height: self.data.height,
            width: self.data.width,
            past_frames: self.window.past,
            predicted_frames: self.window.predicted,
            future_frames: self.window.future,
            base_width: m.base_width,
            channel_multipliers: m.channel_multipliers.clone(),
            attention_levels: m.attention_levels.clone(),
            groups: m.groups,
            heads: m.heads,
            time_embed_dim: m.time_embed_dim,
            spade_hidden: m.spade_hidden,
            spade: m.spade,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            past: self.window.past,
            predicted: self.window.predicted,
            future: self.window.future,
            p_drop: t.p_drop,
            seed: self.seed,
            checkpoint_every: t.checkpoint_every,
            dtype: t.dtype,
            ema_decay: t.ema_decay,
        }
    }

    pub fn predict_options(&self) -> PredictOptions {
        PredictOptions { seed: self.seed, conditioning: self.predict.conditioning, batch: self.predict.batch }
    }

    /// Adopts the network, schedule and window layout stored in a
    /// checkpoint so prediction matches what was trained.
    pub fn adopt_model(&mut self, model: &UNetConfig, schedule: ScheduleParams) {
        self.data.height = model.height;
        self.data.width = model.width;
        self.data.channels = model.image_channels;
        self.window =
            WindowSection { past: model.past_frames, predicted: model.predicted_frames, future: model.future_frames };
        self.model = ModelSection {
            base_width: model.base_width,
            channel_multipliers: model.channel_multipliers.clone(),
            attention_levels: model.attention_levels.clone(),
            groups: model.groups,
            heads: model.heads,
            time_embed_dim: model.time_embed_dim,
            spade_hidden: model.spade_hidden,
            spade: model.spade,
        };
        self.schedule = schedule;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Recursive table merge; values in `over` win.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
