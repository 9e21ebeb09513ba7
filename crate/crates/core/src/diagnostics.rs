//! Feature-space statistics, gradient-term decomposition at `c_t`, and
//! task-branch versus diffusion-branch agreement.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::Video;
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::model::CoModel;
use crate::task::TaskKind;
use crate::train::{build_clip_graph, ClipBatch, ClipNoise};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub count: usize,
    pub mean_pairwise_distance: f64,
    pub covariance_trace: f64,
    /// Mean distance between class centroids, when at least two classes are given.
    pub centroid_separation: Option<f64>,
    /// Share of total variance outside the leading `pca_components` principal directions.
    pub pca_residual_energy: f64,
    pub pca_components: usize,
}

pub fn feature_dispersion(features: &[Vec<f64>], classes: Option<&[usize]>, pca_components: usize) -> Result<FeatureStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InvalidArgument("dispersion needs at least two features".into()));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("features differ in length".into()));
    }
    let mut dist = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            dist += euclid(&features[i], &features[j]);
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let mean = centroid(features.iter());
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for f in features {
        let x = nalgebra::DVector::from_iterator(d, f.iter().zip(&mean).map(|(a, m)| a - m));
        cov += &x * x.transpose();
    }
    cov /= (n - 1) as f64;
    let trace = cov.trace();
    let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let lead: f64 = eig.iter().take(pca_components).sum();
    let total: f64 = eig.iter().sum();
    let residual = if total > 0.0 { ((total - lead) / total).max(0.0) } else { 0.0 };

    let centroid_separation = match classes {
        Some(labels) => {
            if labels.len() != n {
                return Err(Error::Shape("one class label per feature required".into()));
            }
            let mut ids: Vec<usize> = labels.to_vec();
            ids.sort_unstable();
            ids.dedup();
            let cents: Vec<Vec<f64>> = ids
                .iter()
                .map(|&c| centroid(features.iter().zip(labels).filter(|(_, &l)| l == c).map(|(f, _)| f)))
                .collect();
            (cents.len() >= 2).then(|| {
                let mut s = 0.0;
                let mut k = 0usize;
                for i in 0..cents.len() {
                    for j in i + 1..cents.len() {
                        s += euclid(&cents[i], &cents[j]);
                        k += 1;
                    }
                }
                s / k as f64
            })
        }
        None => None,
    };
    Ok(FeatureStats {
        count: n,
        mean_pairwise_distance: dist / pairs,
        covariance_trace: trace,
        centroid_separation,
        pca_residual_energy: residual,
        pca_components,
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn centroid<'a>(rows: impl Iterator<Item = &'a Vec<f64>>) -> Vec<f64> {
    let mut sum: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for r in rows {
        if sum.is_empty() {
            sum = vec![0.0; r.len()];
        }
        sum.iter_mut().zip(r).for_each(|(s, v)| *s += v);
        n += 1;
    }
    sum.iter().map(|s| s / n.max(1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradTerms {
    /// Norm of the task-loss gradient at the clip features.
    pub task_norm: f64,
    /// Norm of the denoising-loss gradient at the clip features.
    pub ddpm_norm: f64,
    /// Norm of the joint-loss gradient at the clip features.
    pub total_norm: f64,
    /// Largest deviation between the joint gradient and the sum of the two terms, at the features.
    pub feature_linearity_error: f64,
    /// Same check on the encoder parameter gradients.
    pub encoder_linearity_error: f64,
}

/// Splits the joint-loss gradient at `c_t` into its task and denoising terms
/// on a single tape. With `noise = None` the denoising term is absent.
pub fn grad_decomposition(model: &CoModel, batch: &ClipBatch, noise: Option<&ClipNoise>) -> Result<GradTerms> {
    let mut tape = Tape::new();
    let g = build_clip_graph(model, &mut tape, batch, noise, (1.0, 1.0), true)?;
    let n = tape.value(g.features).len();
    let feat = |root| tape.backward(root).get_or_zeros(g.features, n);
    let task_grads = tape.backward(g.task.expect("task term present"));
    let total_grads = tape.backward(g.total);
    let gt = task_grads.get_or_zeros(g.features, n);
    let gsum = total_grads.get_or_zeros(g.features, n);
    let gd = g.ddpm.map(feat).unwrap_or_else(|| vec![0.0; n]);

    let enc_ids: Vec<_> = model.store.ids().filter(|&id| model.store.name(id).starts_with("encoder.")).collect();
    let enc = |grads: &crate::graph::Gradients| -> Vec<f64> {
        enc_ids
            .iter()
            .flat_map(|&id| grads.get_or_zeros(g.bound.var(id), model.store.get(id).len()))
            .collect()
    };
    let et = enc(&task_grads);
    let etotal = enc(&total_grads);
    let ed = match g.ddpm {
        Some(d) => enc(&tape.backward(d)),
        None => vec![0.0; et.len()],
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let max_dev = |a: &[f64], b: &[f64], c: &[f64]| {
        a.iter().zip(b).zip(c).map(|((s, x), y)| (s - x - y).abs()).fold(0.0, f64::max)
    };
    Ok(GradTerms {
        task_norm: norm(&gt),
        ddpm_norm: norm(&gd),
        total_norm: norm(&gsum),
        feature_linearity_error: max_dev(&gsum, &gt, &gd),
        encoder_linearity_error: max_dev(&etotal, &et, &ed),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub video: String,
    pub frames: Vec<usize>,
    pub seeds: Vec<u64>,
    /// `[channel][i]` in time units.
    pub task: Vec<Vec<f64>>,
    pub d_mean: Vec<Vec<f64>>,
    pub d_min: Vec<Vec<f64>>,
    pub d_max: Vec<Vec<f64>>,
    /// Correlation between task output and diffusion mean over all channels and frames.
    pub pearson: Option<f64>,
}

/// Task-branch output next to the envelope of `seeds.len()` diffusion samples
/// at every `stride`-th frame.
pub fn branch_agreement(model: &CoModel, video: &Video, seeds: &[u64], steps: usize, stride: usize) -> Result<AgreementReport> {
    if model.kind() != TaskKind::Anticipation {
        return Err(Error::InvalidArgument("branch agreement is defined for anticipation models".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed required".into()));
    }
    let frames: Vec<usize> = (0..video.num_frames()).step_by(stride.max(1)).collect();
    let feats = model.features(&video.observations)?;
    let outputs = model.outputs(&video.observations)?;
    let all = model.decode_anticipation(&outputs);
    let task: Vec<Vec<f64>> = all.iter().map(|ch| frames.iter().map(|&f| ch[f]).collect()).collect();
    let c = model.channels();
    let m = frames.len();
    let mut sum = vec![vec![0.0; m]; c];
    let mut lo = vec![vec![f64::INFINITY; m]; c];
    let mut hi = vec![vec![f64::NEG_INFINITY; m]; c];
    for &seed in seeds {
        let d = model.d_anticipate(&feats, &frames, steps, seed)?;
        for ch in 0..c {
            for i in 0..m {
                let v = d[ch][i];
                sum[ch][i] += v;
                lo[ch][i] = lo[ch][i].min(v);
                hi[ch][i] = hi[ch][i].max(v);
            }
        }
    }
    let k = seeds.len() as f64;
    let d_mean: Vec<Vec<f64>> = sum.iter().map(|r| r.iter().map(|s| s / k).collect()).collect();
    let flat_t: Vec<f64> = task.iter().flatten().copied().collect();
    let flat_d: Vec<f64> = d_mean.iter().flatten().copied().collect();
    Ok(AgreementReport {
        video: video.id().to_string(),
        frames,
        seeds: seeds.to_vec(),
        pearson: pearson(&flat_t, &flat_d),
        task,
        d_mean,
        d_min: lo,
        d_max: hi,
    })
}

/// Sample correlation; `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn dispersion_examples() {
        let same = vec![vec![1.0, 2.0]; 5];
        let s = feature_dispersion(&same, None, 1).unwrap();
        assert_eq!((s.mean_pairwise_distance, s.covariance_trace), (0.0, 0.0));
        let two = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        assert_eq!(feature_dispersion(&two, None, 1).unwrap().mean_pairwise_distance, 5.0);
        assert!(feature_dispersion(&two[..1], None, 1).is_err());
        let sep = feature_dispersion(&two, Some(&[0, 1]), 1).unwrap();
        assert_eq!(sep.centroid_separation, Some(5.0));
    }

    #[test]
    fn gaussian_trace_and_residual_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = 64;
        let n = 1000;
        let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let s = feature_dispersion(&feats, None, 2).unwrap();
        // Var of the sample trace is about 2d/(n-1).
        let se = (2.0 * d as f64 / (n - 1) as f64).sqrt();
        assert!((s.covariance_trace - d as f64).abs() < 4.0 * se, "{}", s.covariance_trace);
        assert!(s.pca_residual_energy > 0.9);
        let line: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        assert!(feature_dispersion(&line, None, 1).unwrap().pca_residual_energy < 1e-12);
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 1.0]), None);
    }
}
