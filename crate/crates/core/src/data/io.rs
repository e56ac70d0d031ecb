use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};

use super::resize::resize;
use super::synth::read_manifest;
use super::{Label, Source, VideoClip};
use crate::error::{data_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    /// Target size; `None` keeps the native frame size.
    pub height: Option<usize>,
    pub width: Option<usize>,
    /// 1 (grayscale) or 3 (RGB). Frames are converted as needed.
    pub channels: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { height: None, width: None, channels: 1 }
    }
}

impl LoadOptions {
    pub fn sized(height: usize, width: usize) -> Self {
        Self { height: Some(height), width: Some(width), channels: 1 }
    }
}

fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8
}

fn from_byte(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

/// Writes `frame_0000.png …` and `labels.csv` into `dir`.
pub fn write_clip_dir(dir: &Path, clip: &VideoClip) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [_, c, h, w] = clip.shape();
    for f in 0..clip.len() {
        let frame = clip.frame(f);
        let path = dir.join(format!("frame_{f:04}.png"));
        let plane = h * w;
        let img = match c {
            1 => DynamicImage::ImageLuma8(
                GrayImage::from_raw(w as u32, h as u32, frame.iter().map(|&v| to_byte(v)).collect())
                    .expect("buffer matches frame size"),
            ),
            3 => {
                let buf = (0..plane).flat_map(|i| (0..3).map(move |ch| to_byte(frame[ch * plane + i]))).collect();
                DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer matches frame size"))
            }
            _ => return Err(data_err!("cannot write {c}-channel frames as images")),
        };
        img.save(&path).map_err(|e| data_err!("{}: {e}", path.display()))?;
    }
    write_labels(&dir.join("labels.csv"), clip.labels())
}

pub fn write_labels(path: &Path, labels: &[Label]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| data_err!("{}: {e}", path.display()))?;
    let err = |e: csv::Error| data_err!("{}: {e}", path.display());
    w.write_record(["frame_index", "label"]).map_err(err)?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([i.to_string().as_str(), l.as_str()]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a `frame_index,label` sidecar. Every frame index in `0..n` must
/// appear exactly once.
pub fn read_labels(path: &Path, n: usize) -> Result<Vec<Label>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| data_err!("{}: {e}", path.display()))?;
    let mut labels = vec![None; n];
    for row in r.records() {
        let row = row.map_err(|e| data_err!("{}: {e}", path.display()))?;
        let (Some(idx), Some(label)) = (row.get(0), row.get(1)) else {
            return Err(data_err!("{}: expected frame_index,label rows", path.display()));
        };
        let i: usize = idx.trim().parse().map_err(|_| data_err!("{}: bad frame index {idx:?}", path.display()))?;
        let slot =
            labels.get_mut(i).ok_or_else(|| data_err!("{}: frame index {i} beyond {n} frames", path.display()))?;
        if slot.replace(label.parse::<Label>()?).is_some() {
            return Err(data_err!("{}: frame {i} labelled twice", path.display()));
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| data_err!("{}: frame {i} has no label", path.display())))
        .collect()
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Loads a directory of lexicographically ordered PNG frames (8-bit
/// grayscale or RGB) plus an optional `labels.csv`. Frames are resized
/// bilinearly when a target size is set and mapped to `[−1, 1]`.
pub fn load_clip_dir(dir: &Path, opts: &LoadOptions) -> Result<VideoClip> {
    if !matches!(opts.channels, 1 | 3) {
        return Err(data_err!("unsupported channel count {}", opts.channels));
    }
    let paths = frame_paths(dir)?;
    if paths.is_empty() {
        return Err(data_err!("{}: no PNG frames", dir.display()));
    }
    let c = opts.channels;
    let mut native: Option<(u32, u32)> = None;
    let mut data = Vec::new();
    let mut out_hw = (0, 0);
    for path in &paths {
        let img = image::open(path).map_err(|e| data_err!("{}: {e}", path.display()))?;
        let (w, h) = (img.width(), img.height());
        match native {
            None => native = Some((w, h)),
            Some(size) if size != (w, h) => {
                return Err(data_err!("{}: frame is {w}×{h}, earlier frames are {}×{}", path.display(), size.0, size.1))
            }
            _ => {}
        }
        let (w, h) = (w as usize, h as usize);
        let planar: Vec<f32> = if c == 1 {
            img.to_luma8().into_raw().into_iter().map(from_byte).collect()
        } else {
            let rgb = img.to_rgb8().into_raw();
            (0..3).flat_map(|ch| (0..h * w).map(move |i| (ch, i))).map(|(ch, i)| from_byte(rgb[i * 3 + ch])).collect()
        };
        let (th, tw) = (opts.height.unwrap_or(h), opts.width.unwrap_or(w));
        data.extend(resize(&planar, c, h, w, th, tw)?);
        out_hw = (th, tw);
    }
    let n = paths.len();
    let sidecar = dir.join("labels.csv");
    let labels = if sidecar.exists() { read_labels(&sidecar, n)? } else { vec![Label::Normal; n] };
    let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "clip".into());
    VideoClip::new(id, Source::Ingested, [n, c, out_hw.0, out_hw.1], data, labels)
}

/// Loads every clip of a dataset root: in manifest order when
/// `manifest.csv` exists, otherwise every subdirectory in sorted order.
pub fn load_dataset(root: &Path, opts: &LoadOptions) -> Result<Vec<VideoClip>> {
    if !root.is_dir() {
        return Err(data_err!("{}: dataset directory not found", root.display()));
    }
    if root.join("manifest.csv").exists() {
        return read_manifest(root)?
            .into_iter()
            .map(|e| {
                let mut clip = load_clip_dir(&root.join(&e.clip_id), opts)?;
                clip.source = e.source;
                Ok(clip)
            })
            .collect();
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    dirs.iter().map(|d| load_clip_dir(d, opts)).collect()
}
