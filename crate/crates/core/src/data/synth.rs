//! Synthetic fixed-viewpoint imagery: a static dim background with smooth
//! cloud bumps drifting at a per-clip velocity, optionally disturbed by a
//! growing hotspot or a downwind plume from an onset frame on.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::write_clip_dir;
use super::{Label, Source, VideoClip};
use crate::error::{config_err, data_err, Error, Result};
use crate::seed::{derive_seed, rng_from};

/// Upper bound of normal pixel intensity in `[0, 1]` units. Background and
/// clouds saturate below it; both anomaly types exceed it.
pub const ENVELOPE: f64 = 0.6;
const BACKGROUND: f64 = 0.1;
const BACKGROUND_RIPPLE: f64 = 0.05;
const HOTSPOT_PEAK: f64 = 0.95;
const PLUME_PEAK: f64 = 0.75;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    #[default]
    None,
    Hotspot,
    Plume,
}

impl AnomalyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::None => "none",
            AnomalyKind::Hotspot => "hotspot",
            AnomalyKind::Plume => "plume",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub n_blobs: usize,
    /// Cloud drift speed range in pixels per frame at 16×16; scaled with
    /// the image size.
    pub drift_min: f64,
    pub drift_max: f64,
    pub anomaly: AnomalyKind,
    /// First anomalous frame. `None` draws it from the middle third.
    pub onset: Option<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            frames: 14,
            n_blobs: 3,
            drift_min: 0.3,
            drift_max: 0.8,
            anomaly: AnomalyKind::None,
            onset: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(config_err!("synthetic clip dimensions must be positive"));
        }
        if !(self.drift_min >= 0.0 && self.drift_max >= self.drift_min && self.drift_max.is_finite()) {
            return Err(config_err!("drift range [{}, {}] is invalid", self.drift_min, self.drift_max));
        }
        if self.anomaly != AnomalyKind::None {
            if let Some(onset) = self.onset {
                if onset >= self.frames {
                    return Err(config_err!("onset {onset} must be below the clip length {}", self.frames));
                }
            }
        }
        Ok(())
    }

    /// Default onset window `[5F/14, 8F/14]`, i.e. frames 5..=8 for F = 14.
    pub fn onset_range(&self) -> (usize, usize) {
        let f = self.frames;
        let lo = (5 * f / 14).clamp(1.min(f - 1), f - 1);
        let hi = (8 * f / 14).clamp(lo, f - 1);
        (lo, hi)
    }

    fn scale(&self) -> f64 {
        self.height.min(self.width) as f64 / 16.0
    }
}

struct Blob {
    x: f64,
    y: f64,
    sigma: f64,
    amp: f64,
}

/// Signed toroidal offset in `[−n/2, n/2)`.
fn wrap(d: f64, n: f64) -> f64 {
    d - n * ((d / n) + 0.5).floor()
}

fn background(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(1..=2) as f64, rng.random_range(0..=2) as f64, rng.random_range(0.0..2.0 * PI)))
        .collect();
    let mut field: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
            waves.iter().map(|(fx, fy, ph)| (2.0 * PI * (fx * x + fy * y) + ph).cos()).sum()
        })
        .collect();
    let peak = field.iter().fold(1e-9f64, |m, v| m.max(v.abs()));
    field.iter_mut().for_each(|v| *v = BACKGROUND + BACKGROUND_RIPPLE * *v / peak);
    field
}

/// Renders one clip. Pure in `cfg` (including its seed).
pub fn synth_clip(cfg: &SynthConfig) -> Result<VideoClip> {
    cfg.validate()?;
    let mut rng = rng_from(cfg.seed);
    let (h, w, nf) = (cfg.height, cfg.width, cfg.frames);
    let (hf, wf) = (h as f64, w as f64);
    let s = cfg.scale();
    let bg = background(cfg, &mut rng);

    let blobs: Vec<Blob> = (0..cfg.n_blobs)
        .map(|_| Blob {
            x: rng.random_range(0.0..wf),
            y: rng.random_range(0.0..hf),
            sigma: rng.random_range(1.5..3.0) * s,
            amp: rng.random_range(0.6..1.4),
        })
        .collect();
    let speed = rng.random_range(cfg.drift_min..=cfg.drift_max) * s;
    let heading = rng.random_range(0.0..2.0 * PI);
    let (vx, vy) = (speed * heading.cos(), speed * heading.sin());

    let onset = match cfg.anomaly {
        AnomalyKind::None => nf,
        _ => cfg.onset.unwrap_or_else(|| {
            let (lo, hi) = cfg.onset_range();
            rng.random_range(lo..=hi)
        }),
    };
    // Anomaly sources sit on pixel centres away from the border.
    let margin = (2.0 * s).round() as usize;
    let pick = |rng: &mut ChaCha8Rng, n: usize| -> f64 {
        if n > 2 * margin {
            rng.random_range(margin..n - margin) as f64
        } else {
            (n / 2) as f64
        }
    };
    let (ax, ay) = (pick(&mut rng, w), pick(&mut rng, h));

    let mut frames = Vec::with_capacity(nf * h * w);
    for f in 0..nf {
        let ft = f as f64;
        for i in 0..h {
            for j in 0..w {
                let (py, px) = (i as f64, j as f64);
                let cloud: f64 = blobs
                    .iter()
                    .map(|b| {
                        let dx = wrap(px - (b.x + vx * ft), wf);
                        let dy = wrap(py - (b.y + vy * ft), hf);
                        b.amp * (-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma)).exp()
                    })
                    .sum();
                let base = bg[i * w + j];
                let mut v = base + (ENVELOPE - BACKGROUND - BACKGROUND_RIPPLE) * (1.0 - (-cloud).exp());
                if f >= onset {
                    let age = (f - onset) as f64;
                    let (dx, dy) = (px - ax, py - ay);
                    let extra = match cfg.anomaly {
                        AnomalyKind::None => 0.0,
                        AnomalyKind::Hotspot => {
                            let sigma = (0.6 + 0.35 * age) * s;
                            HOTSPOT_PEAK * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
                        }
                        AnomalyKind::Plume => {
                            let (ux, uy) = (heading.cos(), heading.sin());
                            let along = dx * ux + dy * uy;
                            let across = dx * uy - dy * ux;
                            let length = (1.0 + 1.5 * (age + 1.0)) * s;
                            let width = 0.6 * s;
                            let outside = if along < 0.0 {
                                -along
                            } else if along > length {
                                along - length
                            } else {
                                0.0
                            };
                            let taper = (-(outside * outside) / (2.0 * 0.25 * s * s)).exp();
                            PLUME_PEAK * taper * (-(across * across) / (2.0 * width * width)).exp()
                        }
                    };
                    v = v.max(extra);
                }
                frames.push((2.0 * v - 1.0) as f32);
            }
        }
    }
    let labels = (0..nf).map(|f| if f >= onset { Label::Anomalous } else { Label::Normal }).collect();
    let id = format!("{}_{:016x}", cfg.anomaly.as_str(), cfg.seed);
    VideoClip::new(id, Source::Synthetic, [nf, 1, h, w], frames, labels)
}

/// True when every pixel of the frame stays within the normal intensity
/// envelope (`[−1, 1]` units).
pub fn within_envelope(frame: &[f32]) -> bool {
    let limit = (2.0 * ENVELOPE - 1.0) as f32 + 1e-6;
    frame.iter().all(|&v| v <= limit)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub normal: usize,
    pub hotspot: usize,
    pub plume: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub source: Source,
    pub anomaly: AnomalyKind,
    pub frames: usize,
    pub normal_frames: usize,
    pub anomalous_frames: usize,
    pub seed: u64,
}

impl ManifestEntry {
    fn of(clip: &VideoClip, anomaly: AnomalyKind, seed: u64) -> Self {
        let anomalous = clip.labels().iter().filter(|l| l.is_anomalous()).count();
        Self {
            clip_id: clip.id.clone(),
            source: clip.source,
            anomaly,
            frames: clip.len(),
            normal_frames: clip.len() - anomalous,
            anomalous_frames: anomalous,
            seed,
        }
    }
}

/// Writes `counts` clips under `root` (one directory per clip plus
/// `manifest.csv`). Clip `i` uses seed `derive_seed(base_seed, i)`, normal
/// clips first, then hotspot, then plume.
pub fn synth_dataset(
    root: &Path,
    counts: DatasetCounts,
    template: &SynthConfig,
    base_seed: u64,
) -> Result<Vec<ManifestEntry>> {
    template.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let kinds = [
        (AnomalyKind::None, counts.normal),
        (AnomalyKind::Hotspot, counts.hotspot),
        (AnomalyKind::Plume, counts.plume),
    ];
    let mut entries = Vec::new();
    let mut index = 0u64;
    for (kind, n) in kinds {
        for j in 0..n {
            let seed = derive_seed(base_seed, index);
            index += 1;
            let cfg = SynthConfig { anomaly: kind, seed, ..template.clone() };
            let mut clip = synth_clip(&cfg)?;
            clip.id = format!("{}_{j:04}", kind.as_str().replace("none", "normal"));
            write_clip_dir(&root.join(&clip.id), &clip)?;
            entries.push(ManifestEntry::of(&clip, kind, seed));
        }
    }
    let path = root.join("manifest.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| data_err!("{}: {e}", path.display()))?;
    if entries.is_empty() {
        w.write_record(["clip_id", "source", "anomaly", "frames", "normal_frames", "anomalous_frames", "seed"])
            .map_err(|e| data_err!("{}: {e}", path.display()))?;
    }
    for e in &entries {
        w.serialize(e).map_err(|e| data_err!("{}: {e}", path.display()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join("manifest.csv");
    let mut r = csv::Reader::from_path(&path).map_err(|e| data_err!("{}: {e}", path.display()))?;
    r.deserialize().map(|row| row.map_err(|e| data_err!("{}: {e}", path.display()))).collect()
}
