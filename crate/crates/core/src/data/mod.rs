//! Video clips, the synthetic generator, frame-directory I/O and resizing.

mod io;
mod resize;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{data_err, dim_err, Result};
use crate::numcore::{Scalar, Tensor};

pub use io::{load_clip_dir, load_dataset, read_labels, write_clip_dir, write_labels, LoadOptions};
pub use resize::resize;
pub use synth::{
    read_manifest, synth_clip, synth_dataset, within_envelope, AnomalyKind, DatasetCounts, ManifestEntry, SynthConfig,
    ENVELOPE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "0" => Ok(Label::Normal),
            "anomalous" | "abnormal" | "1" => Ok(Label::Anomalous),
            other => Err(data_err!("unknown label {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Ingested,
}

/// A clip of `F` frames, each `C×H×W`, stored frame-major with values in
/// `[−1, 1]`. Plain `f32` storage keeps clips `Send`; convert with
/// [`VideoClip::tensor`] when a graph is needed.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub source: Source,
    frames: Vec<f32>,
    shape: [usize; 4],
    labels: Vec<Label>,
}

impl VideoClip {
    pub fn new(
        id: impl Into<String>,
        source: Source,
        shape: [usize; 4],
        frames: Vec<f32>,
        labels: Vec<Label>,
    ) -> Result<Self> {
        if shape.contains(&0) {
            return Err(dim_err!("clip shape {shape:?} has an empty axis"));
        }
        if frames.len() != shape.iter().product::<usize>() {
            return Err(dim_err!("clip data of {} values does not match shape {shape:?}", frames.len()));
        }
        if labels.len() != shape[0] {
            return Err(data_err!("{} labels for {} frames", labels.len(), shape[0]));
        }
        Ok(Self { id: id.into(), source, frames, shape, labels })
    }

    /// `[F, C, H, W]`.
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn frame_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.frames
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn with_labels(&self, labels: Vec<Label>) -> Result<Self> {
        Self::new(self.id.clone(), self.source, self.shape, self.frames.clone(), labels)
    }

    pub fn has_anomaly(&self) -> bool {
        self.labels.iter().any(|l| l.is_anomalous())
    }

    /// Whole clip as a `[F, C, H, W]` tensor.
    pub fn tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.frames.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        Tensor::from_vec(&self.shape, data).expect("clip shape is consistent")
    }

    /// Selected frames stacked along the channel axis: `[indices·C, H, W]`.
    pub fn stack_frames<T: Scalar>(&self, indices: &[usize]) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(indices.len() * self.frame_len());
        for &i in indices {
            if i >= self.len() {
                return Err(dim_err!("frame {i} out of range for clip of {}", self.len()));
            }
            out.extend(self.frame(i).iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_parsing() {
        assert_eq!("Anomalous".parse::<Label>().unwrap(), Label::Anomalous);
        assert_eq!("0".parse::<Label>().unwrap(), Label::Normal);
        assert!("maybe".parse::<Label>().is_err());
    }

    #[test]
    fn clip_validation_and_stacking() {
        let data: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let clip = VideoClip::new("c", Source::Ingested, [3, 1, 2, 2], data, vec![Label::Normal; 3]).unwrap();
        assert_eq!(clip.frame(1), &[4.0, 5.0, 6.0, 7.0]);
        let s: Vec<f64> = clip.stack_frames(&[2, 0]).unwrap();
        assert_eq!(s, vec![8.0, 9.0, 10.0, 11.0, 0.0, 1.0, 2.0, 3.0]);
        assert!(clip.stack_frames::<f64>(&[3]).is_err());
        assert!(VideoClip::new("c", Source::Ingested, [3, 1, 2, 2], vec![0.0; 12], vec![Label::Normal; 2]).is_err());
        assert!(VideoClip::new("c", Source::Ingested, [3, 1, 2, 2], vec![0.0; 11], vec![Label::Normal; 3]).is_err());
    }
}
