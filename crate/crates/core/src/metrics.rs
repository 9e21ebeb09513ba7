//! Anticipation errors by horizon region, the Smooth steadiness metric,
//! and per-video recognition scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame counts per label region of one channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionCounts {
    pub present: usize,
    pub in_horizon: usize,
    pub out_of_horizon: usize,
    /// Labels in `(0, 0.1h]`.
    pub early: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelAnticipation {
    pub mae: f64,
    pub in_mae: Option<f64>,
    pub out_mae: Option<f64>,
    pub wmae: Option<f64>,
    pub emae: Option<f64>,
    pub counts: RegionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnticipationEval {
    pub horizon: f64,
    pub channels: Vec<ChannelAnticipation>,
    pub mae: f64,
    pub in_mae: Option<f64>,
    pub out_mae: Option<f64>,
    pub wmae: Option<f64>,
    pub emae: Option<f64>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn check_labels(labels: &[f64], h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {h}")));
    }
    if let Some(&bad) = labels.iter().find(|&&y| !(0.0..=h).contains(&y)) {
        return Err(Error::LabelOutOfRange { value: bad, horizon: h });
    }
    Ok(())
}

/// Errors of one channel. `wmae` averages the in- and out-of-horizon errors,
/// or takes whichever exists when one region is empty.
pub fn anticipation_channel(preds: &[f64], labels: &[f64], h: f64) -> Result<ChannelAnticipation> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no frames to evaluate".into()));
    }
    check_labels(labels, h)?;
    if preds.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("predictions".into()));
    }
    let pairs = || preds.iter().zip(labels).map(|(p, y)| ((p - y).abs(), *y));
    let in_mae = mean(pairs().filter(|(_, y)| *y > 0.0 && *y < h).map(|(e, _)| e));
    let out_mae = mean(pairs().filter(|(_, y)| *y == h).map(|(e, _)| e));
    let emae = mean(pairs().filter(|(_, y)| *y > 0.0 && *y <= 0.1 * h).map(|(e, _)| e));
    let wmae = match (in_mae, out_mae) {
        (Some(a), Some(b)) => Some((a + b) / 2.0),
        (a, b) => a.or(b),
    };
    let counts = RegionCounts {
        present: labels.iter().filter(|&&y| y == 0.0).count(),
        in_horizon: labels.iter().filter(|&&y| y > 0.0 && y < h).count(),
        out_of_horizon: labels.iter().filter(|&&y| y == h).count(),
        early: labels.iter().filter(|&&y| y > 0.0 && y <= 0.1 * h).count(),
    };
    Ok(ChannelAnticipation { mae: mean(pairs().map(|(e, _)| e)).unwrap_or(0.0), in_mae, out_mae, wmae, emae, counts })
}

/// Per-channel errors (frames pooled across videos by the caller), then the
/// unweighted mean over the channels where each value exists.
pub fn anticipation_metrics(preds: &[Vec<f64>], labels: &[Vec<f64>], h: f64) -> Result<AnticipationEval> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Shape("predictions and labels need the same non-zero channel count".into()));
    }
    let channels = preds
        .iter()
        .zip(labels)
        .map(|(p, y)| anticipation_channel(p, y, h))
        .collect::<Result<Vec<_>>>()?;
    let avg = |f: fn(&ChannelAnticipation) -> Option<f64>| mean(channels.iter().filter_map(f));
    Ok(AnticipationEval {
        horizon: h,
        mae: mean(channels.iter().map(|c| c.mae)).unwrap_or(0.0),
        in_mae: avg(|c| c.in_mae),
        out_mae: avg(|c| c.out_mae),
        wmae: avg(|c| c.wmae),
        emae: avg(|c| c.emae),
        channels,
    })
}

/// Mean absolute first difference of the predictions on out-of-horizon
/// frames. By default consecutive members of that set are differenced even
/// across gaps; `segment_aware` only differences adjacent frames.
pub fn smooth_metric(preds: &[f64], labels: &[f64], h: f64, segment_aware: bool) -> Result<Option<f64>> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    check_labels(labels, h)?;
    let out: Vec<usize> = (0..labels.len()).filter(|&t| labels[t] == h).collect();
    let diffs = out.windows(2).filter(|w| !segment_aware || w[1] == w[0] + 1).map(|w| (preds[w[1]] - preds[w[0]]).abs());
    Ok(mean(diffs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecognition {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionEval {
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
    pub videos: Vec<VideoRecognition>,
}

/// Scores of one video in percent. Phase-wise scores cover phases present
/// in the ground truth; a phase never predicted has precision 0.
pub fn recognition_video(preds: &[usize], labels: &[usize], num_phases: usize) -> Result<VideoRecognition> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if let Some(&p) = preds.iter().chain(labels).find(|&&p| p >= num_phases) {
        return Err(Error::UnknownPhase { phase: p, vocabulary: num_phases });
    }
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    let mut scores = Vec::new();
    for phase in 0..num_phases {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fneg = 0usize;
        for (&p, &y) in preds.iter().zip(labels) {
            match (p == phase, y == phase) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        if tp + fneg == 0 {
            continue;
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        scores.push((ratio(tp, tp + fp), ratio(tp, tp + fneg), ratio(tp, tp + fp + fneg)));
    }
    let n = scores.len() as f64;
    Ok(VideoRecognition {
        accuracy: 100.0 * correct as f64 / preds.len() as f64,
        precision: 100.0 * scores.iter().map(|s| s.0).sum::<f64>() / n,
        recall: 100.0 * scores.iter().map(|s| s.1).sum::<f64>() / n,
        jaccard: 100.0 * scores.iter().map(|s| s.2).sum::<f64>() / n,
    })
}

/// Per-video scores averaged over videos; accuracy also reports the population standard deviation.
pub fn recognition_metrics(preds: &[Vec<usize>], labels: &[Vec<usize>], num_phases: usize) -> Result<RecognitionEval> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Shape("predictions and labels need the same non-zero video count".into()));
    }
    let videos = preds
        .iter()
        .zip(labels)
        .map(|(p, y)| recognition_video(p, y, num_phases))
        .collect::<Result<Vec<_>>>()?;
    let n = videos.len() as f64;
    let acc = videos.iter().map(|v| v.accuracy).sum::<f64>() / n;
    let var = videos.iter().map(|v| (v.accuracy - acc).powi(2)).sum::<f64>() / n;
    Ok(RecognitionEval {
        accuracy_mean: acc,
        accuracy_std: var.sqrt(),
        precision: videos.iter().map(|v| v.precision).sum::<f64>() / n,
        recall: videos.iter().map(|v| v.recall).sum::<f64>() / n,
        jaccard: videos.iter().map(|v| v.jaccard).sum::<f64>() / n,
        videos,
    })
}
