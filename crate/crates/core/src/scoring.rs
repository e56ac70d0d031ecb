//! PSNR, per-video regular scores, threshold decisions and ROC/AUC.
//!
//! Polarity: a low regular score means a poorly predicted frame, which is
//! flagged as anomalous. The ROC treats anomalous frames as positives.

use std::io::Write;
use std::path::Path;

use crate::data::{Label, VideoClip};
use crate::error::{usage_err, Error, Result};
use crate::predictor::PredictedClip;

/// PSNR returned for a perfect prediction.
pub const PSNR_CAP: f64 = 100.0;

/// `10·log10(1 / MSE)` for pixels in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr<T: Copy + Into<f64>>(observed: &[T], predicted: &[T]) -> Result<f64> {
    if observed.len() != predicted.len() || observed.is_empty() {
        return Err(usage_err!(
            "psnr needs equal non-empty images, got {} and {} values",
            observed.len(),
            predicted.len()
        ));
    }
    let se: f64 = observed
        .iter()
        .zip(predicted)
        .map(|(&a, &b)| {
            let d = a.into() - b.into();
            d * d
        })
        .sum();
    let mse = se / observed.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// PSNR of two frames stored in `[−1, 1]`, after mapping to `[0, 1]`.
pub fn frame_psnr(observed: &[f32], predicted: &[f32]) -> Result<f64> {
    let to_unit = |v: &[f32]| v.iter().map(|&x| (x as f64 + 1.0) * 0.5).collect::<Vec<f64>>();
    psnr(&to_unit(observed), &to_unit(predicted))
}

/// Min-max normalization of one video's PSNR series. A constant series
/// maps to 0.5 everywhere.
pub fn regular_score(psnr: &[f64]) -> Vec<f64> {
    let lo = psnr.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = psnr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    psnr.iter().map(|&x| if span > 0.0 { (x - lo) / span } else { 0.5 }).collect()
}

/// Anomalous iff `score < threshold`.
pub fn classify(scores: &[f64], threshold: f64) -> Vec<Label> {
    scores.iter().map(|&s| if s < threshold { Label::Anomalous } else { Label::Normal }).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSeries {
    pub video_id: String,
    pub frame_indices: Vec<usize>,
    pub psnr: Vec<f64>,
    pub regular_score: Vec<f64>,
    pub labels: Vec<Label>,
}

impl ScoreSeries {
    pub fn new(
        video_id: impl Into<String>,
        frame_indices: Vec<usize>,
        psnr: Vec<f64>,
        labels: Vec<Label>,
    ) -> Result<Self> {
        if psnr.len() != labels.len() || psnr.len() != frame_indices.len() || psnr.is_empty() {
            return Err(usage_err!(
                "score series needs matching non-empty lengths, got {} frames, {} psnr, {} labels",
                frame_indices.len(),
                psnr.len(),
                labels.len()
            ));
        }
        let regular_score = regular_score(&psnr);
        Ok(Self { video_id: video_id.into(), frame_indices, psnr, regular_score, labels })
    }

    pub fn has_anomaly(&self) -> bool {
        self.labels.iter().any(|l| l.is_anomalous())
    }

    pub fn mean_regular_score(&self) -> f64 {
        self.regular_score.iter().sum::<f64>() / self.regular_score.len() as f64
    }
}

/// Scores the generated frames of a prediction against the observed clip.
/// Conditioning frames are not scored.
pub fn score_clip(clip: &VideoClip, predicted: &PredictedClip) -> Result<ScoreSeries> {
    if clip.shape() != predicted.shape {
        return Err(usage_err!("prediction {:?} does not match clip {:?}", predicted.shape, clip.shape()));
    }
    let indices = predicted.generated_indices();
    let psnr = indices.iter().map(|&i| frame_psnr(clip.frame(i), predicted.frame(i))).collect::<Result<Vec<_>>>()?;
    let labels = indices.iter().map(|&i| clip.labels()[i]).collect();
    ScoreSeries::new(clip.id.clone(), indices, psnr, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocPoint {
    /// Frames with `score < threshold` are flagged.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC by sweeping the threshold over the unique scores (ascending), with
/// anomalous frames as positives. Tied scores move together, so the
/// trapezoidal area equals `P(normal > anomalous) + ½·P(tie)`.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(usage_err!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Evaluation("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|l| l.is_anomalous()).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Evaluation(format!("ROC needs both classes; got {pos} anomalous and {neg} normal frames")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area in units of 1/(pos·neg), kept exact in integers.
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let value = scores[order[i]];
        points.push(RocPoint { threshold: value, fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == value {
            if labels[order[i]].is_anomalous() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) as u128 * (tp0 + tp) as u128;
    }
    points.push(RocPoint { threshold: f64::INFINITY, fpr: 1.0, tpr: 1.0 });
    let auc = area2 as f64 / (2.0 * pos as f64 * neg as f64);
    Ok(RocCurve { points, auc })
}

/// Pooled frame-level evaluation over many videos.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub roc: RocCurve,
    /// Mean regular score over videos without / with anomalous frames.
    pub mean_score_normal_videos: Option<f64>,
    pub mean_score_anomalous_videos: Option<f64>,
}

pub fn evaluate(series: &[ScoreSeries]) -> Result<Evaluation> {
    let scores: Vec<f64> = series.iter().flat_map(|s| s.regular_score.iter().copied()).collect();
    let labels: Vec<Label> = series.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let roc = roc_auc(&scores, &labels)?;
    let mean = |anomalous: bool| {
        let picked: Vec<f64> =
            series.iter().filter(|s| s.has_anomaly() == anomalous).map(ScoreSeries::mean_regular_score).collect();
        (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
    };
    Ok(Evaluation { roc, mean_score_normal_videos: mean(false), mean_score_anomalous_videos: mean(true) })
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

/// `frame_index,psnr_db,regular_score,label,predicted_label`.
pub fn write_scores_csv(path: &Path, series: &ScoreSeries, threshold: f64) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "frame_index,psnr_db,regular_score,label,predicted_label").map_err(io)?;
    let decided = classify(&series.regular_score, threshold);
    for (i, d) in decided.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{}",
            series.frame_indices[i], series.psnr[i], series.regular_score[i], series.labels[i], d
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// `threshold,fpr,tpr` rows followed by an `AUC,<value>,` footer.
pub fn write_roc_csv(path: &Path, roc: &RocCurve) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "threshold,fpr,tpr").map_err(io)?;
    for p in &roc.points {
        writeln!(w, "{},{},{}", p.threshold, p.fpr, p.tpr).map_err(io)?;
    }
    writeln!(w, "AUC,{},", roc.auc).map_err(io)?;
    w.flush().map_err(io)
}
