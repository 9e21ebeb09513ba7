//! Synthetic procedures drawn from a mixture of phase-order variants.
//!
//! One variant usually dominates the mixture and the rest form a long tail.
//! Observations are low-dimensional vectors: a noise-free prototype built
//! from the phase, the active tools and the elapsed time in the phase, plus
//! a per-video offset and per-frame Gaussian noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{self, DatasetManifest, DatasetMeta, ManifestVideo, Split};
use crate::error::{Error, Result};
use crate::workflow::WorkflowTimeline;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpan {
    pub phase: usize,
    pub min_frames: usize,
    pub max_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseOrderVariant {
    pub name: String,
    pub probability: f64,
    #[serde(default)]
    pub long_tail: bool,
    pub phases: Vec<PhaseSpan>,
}

/// Tool use inside a phase: starts `onset` frames after the phase begins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolTemplate {
    pub phase: usize,
    pub tool: usize,
    pub onset: (usize, usize),
    pub duration: (usize, usize),
    #[serde(default = "one")]
    pub probability: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureGrammar {
    pub phase_names: Vec<String>,
    pub tool_names: Vec<String>,
    pub variants: Vec<PhaseOrderVariant>,
    pub tool_templates: Vec<ToolTemplate>,
    pub observation_dim: usize,
    /// Per-frame Gaussian noise scale.
    pub observation_noise: f64,
    /// Minimum distance between noise-free observations of different phases.
    pub prototype_separation: f64,
    /// Scale of the constant per-video observation offset.
    pub video_jitter: f64,
}

impl ProcedureGrammar {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let p = self.phase_names.len();
        if p == 0 {
            return bad("grammar needs at least one phase".into());
        }
        if self.variants.is_empty() {
            return bad("grammar needs at least one variant".into());
        }
        let total: f64 = self.variants.iter().map(|v| v.probability).sum();
        if (total - 1.0).abs() > 1e-9 || self.variants.iter().any(|v| !(v.probability >= 0.0)) {
            return bad(format!("variant probabilities sum to {total}, expected 1"));
        }
        for v in &self.variants {
            if v.phases.is_empty() {
                return bad(format!("variant {} has no phases", v.name));
            }
            let mut seen = vec![false; p];
            for span in &v.phases {
                if span.phase >= p {
                    return bad(format!("variant {} references unknown phase {}", v.name, span.phase));
                }
                if seen[span.phase] {
                    return bad(format!("variant {} repeats phase {}", v.name, span.phase));
                }
                seen[span.phase] = true;
                if span.min_frames == 0 || span.min_frames > span.max_frames {
                    return bad(format!("variant {}: bad duration range for phase {}", v.name, span.phase));
                }
            }
        }
        for t in &self.tool_templates {
            if t.phase >= p || t.tool >= self.tool_names.len() {
                return bad(format!("tool template references unknown phase/tool ({}, {})", t.phase, t.tool));
            }
            if t.onset.0 > t.onset.1 || t.duration.0 == 0 || t.duration.0 > t.duration.1 {
                return bad("tool template ranges must be non-empty with positive duration".into());
            }
            if !(0.0..=1.0).contains(&t.probability) {
                return bad("tool template probability outside [0, 1]".into());
            }
        }
        let needed = p + self.tool_names.len() + 1;
        if self.observation_dim < needed {
            return bad(format!("observation_dim must be at least {needed}"));
        }
        if !(self.observation_noise >= 0.0) || !(self.video_jitter >= 0.0) || !(self.prototype_separation > 0.0) {
            return bad("noise, jitter and separation must be non-negative (separation positive)".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("grammar serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            phase_names: self.phase_names.clone(),
            tool_names: self.tool_names.clone(),
            observation_dim: self.observation_dim,
        }
    }

    /// Five phases, three tools; a 0.9 dominant order and a 0.1 long-tail
    /// order that swaps the middle phases and shortens the procedure.
    pub fn dominant_long_tail() -> Self {
        let span = |phase, min_frames, max_frames| PhaseSpan { phase, min_frames, max_frames };
        let tool = |phase, tool, onset, duration| ToolTemplate { phase, tool, onset, duration, probability: 1.0 };
        Self {
            phase_names: ["preparation", "dissection", "clipping", "resection", "closure"]
                .map(String::from)
                .to_vec(),
            tool_names: ["hook", "clipper", "irrigator"].map(String::from).to_vec(),
            variants: vec![
                PhaseOrderVariant {
                    name: "dominant".into(),
                    probability: 0.9,
                    long_tail: false,
                    phases: vec![span(0, 30, 50), span(1, 60, 90), span(2, 30, 50), span(3, 50, 80), span(4, 20, 40)],
                },
                PhaseOrderVariant {
                    name: "long-tail".into(),
                    probability: 0.1,
                    long_tail: true,
                    phases: vec![span(0, 30, 50), span(2, 20, 35), span(1, 40, 60), span(3, 70, 100), span(4, 20, 40)],
                },
            ],
            tool_templates: vec![
                tool(1, 0, (5, 15), (30, 50)),
                tool(2, 1, (5, 10), (10, 20)),
                tool(3, 0, (10, 20), (20, 35)),
                tool(3, 2, (25, 45), (10, 20)),
                tool(4, 2, (2, 8), (5, 12)),
            ],
            observation_dim: 16,
            observation_noise: 0.3,
            prototype_separation: 2.0,
            video_jitter: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledProcedure {
    pub timeline: WorkflowTimeline,
    pub variant: usize,
    pub long_tail: bool,
}

/// Deterministic in `(grammar, seed)`.
pub fn sample_procedure(grammar: &ProcedureGrammar, seed: u64) -> Result<SampledProcedure> {
    grammar.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut variant = grammar.variants.len() - 1;
    for (i, v) in grammar.variants.iter().enumerate() {
        acc += v.probability;
        if u < acc {
            variant = i;
            break;
        }
    }
    let chosen = &grammar.variants[variant];
    let mut phase_of = Vec::new();
    let mut starts = vec![None; grammar.phase_names.len()];
    for span in &chosen.phases {
        let d = rng.gen_range(span.min_frames..=span.max_frames);
        starts[span.phase] = Some((phase_of.len(), d));
        phase_of.extend(std::iter::repeat(span.phase).take(d));
    }
    let n = phase_of.len();
    let mut tools = vec![vec![false; n]; grammar.tool_names.len()];
    for tpl in &grammar.tool_templates {
        let Some((start, dur)) = starts[tpl.phase] else { continue };
        let used: f64 = rng.gen();
        let onset = rng.gen_range(tpl.onset.0..=tpl.onset.1);
        let length = rng.gen_range(tpl.duration.0..=tpl.duration.1);
        if used >= tpl.probability || onset >= dur {
            continue;
        }
        let from = start + onset;
        for f in tools[tpl.tool].iter_mut().take((from + length).min(n)).skip(from) {
            *f = true;
        }
    }
    let timeline = WorkflowTimeline::new(
        format!("synth-{seed:016x}"),
        grammar.phase_names.len(),
        phase_of,
        tools,
    )?;
    Ok(SampledProcedure { timeline, variant, long_tail: chosen.long_tail })
}

/// Noise-free observation for a (phase, tools, elapsed-in-phase) state.
pub fn prototype(grammar: &ProcedureGrammar, phase: usize, tools: &[bool], elapsed: usize) -> Vec<f64> {
    let p = grammar.phase_names.len();
    let axis = grammar.prototype_separation / std::f64::consts::SQRT_2;
    let mut x = vec![0.0; grammar.observation_dim];
    x[phase] = axis;
    for (i, &on) in tools.iter().enumerate() {
        if on {
            x[p + i] = axis;
        }
    }
    x[p + tools.len()] = elapsed as f64 / 60.0;
    x
}

fn video_offset(grammar: &ProcedureGrammar, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    (0..grammar.observation_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            grammar.video_jitter * z
        })
        .collect::<Vec<f64>>()
}

fn frame_noise(grammar: &ProcedureGrammar, seed: u64, t: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    (0..grammar.observation_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            grammar.observation_noise * z
        })
        .collect()
}

fn elapsed_in_phase(timeline: &WorkflowTimeline, t: usize) -> usize {
    let phases = timeline.phase_of();
    (0..=t).rev().take_while(|&s| phases[s] == phases[t]).count() - 1
}

/// Observation of frame `t` for a video rendered with `seed`.
pub fn render_observation(
    timeline: &WorkflowTimeline,
    t: usize,
    grammar: &ProcedureGrammar,
    seed: u64,
) -> Result<Vec<f64>> {
    if t >= timeline.num_frames() {
        return Err(Error::InvalidArgument(format!("frame {t} beyond {} frames", timeline.num_frames())));
    }
    if timeline.num_tools() != grammar.tool_names.len() || timeline.num_phases() != grammar.phase_names.len() {
        return Err(Error::Shape("timeline vocabulary does not match grammar".into()));
    }
    let base = prototype(grammar, timeline.phase_of()[t], &timeline.tools_at(t), elapsed_in_phase(timeline, t));
    let offset = video_offset(grammar, seed);
    let noise = frame_noise(grammar, seed, t);
    Ok(base.iter().zip(&offset).zip(&noise).map(|((b, o), n)| b + o + n).collect())
}

pub fn render_video(timeline: &WorkflowTimeline, grammar: &ProcedureGrammar, seed: u64) -> Result<Vec<Vec<f64>>> {
    (0..timeline.num_frames())
        .map(|t| render_observation(timeline, t, grammar, seed))
        .collect()
}

/// Number of videos per split by largest remainder.
pub fn split_counts(n: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    let total: f64 = ratios.iter().sum();
    if ratios.is_empty() || (total - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::InvalidArgument(format!("split ratios must be non-negative and sum to 1, got {ratios:?}")));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    Ok(counts)
}

/// Default split names for 1, 2 or 3 ratios.
pub fn default_split_names(k: usize) -> Vec<String> {
    match k {
        1 => vec!["train".into()],
        2 => vec!["train".into(), "test".into()],
        3 => vec!["train".into(), "val".into(), "test".into()],
        _ => (0..k).map(|i| format!("split{i}")).collect(),
    }
}

/// Samples `n_videos` procedures, renders their observations and writes
/// the dataset layout under `out_dir`.
pub fn emit_dataset(
    grammar: &ProcedureGrammar,
    n_videos: usize,
    splits: &[(String, f64)],
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    grammar.validate()?;
    let ratios: Vec<f64> = splits.iter().map(|s| s.1).collect();
    let counts = split_counts(n_videos, &ratios)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut videos = Vec::with_capacity(n_videos);
    let mut rendered = Vec::with_capacity(n_videos);
    for i in 0..n_videos {
        let video_seed: u64 = master.gen();
        let sampled = sample_procedure(grammar, video_seed)?;
        let id = format!("video_{i:04}");
        let timeline = sampled.timeline.with_video_id(&id);
        let obs = render_video(&timeline, grammar, video_seed)?;
        videos.push(ManifestVideo {
            id,
            seed: video_seed,
            variant: grammar.variants[sampled.variant].name.clone(),
            long_tail: sampled.long_tail,
            num_frames: timeline.num_frames(),
        });
        rendered.push((timeline, obs));
    }
    let mut next = 0;
    let split_list = splits
        .iter()
        .zip(&counts)
        .map(|((name, _), &c)| {
            let ids = videos[next..next + c].iter().map(|v| v.id.clone()).collect();
            next += c;
            Split { name: name.clone(), videos: ids }
        })
        .collect();
    let manifest = DatasetManifest {
        format_version: dataset::FORMAT_VERSION,
        grammar_hash: Some(grammar.hash()),
        seed: Some(seed),
        splits: split_list,
        videos,
    };
    dataset::write_dataset(out_dir, &grammar.meta(), &manifest, &rendered)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::{remaining_time_labels, Target};

    fn fixed_grammar() -> ProcedureGrammar {
        let mut g = ProcedureGrammar::dominant_long_tail();
        g.variants = vec![PhaseOrderVariant {
            name: "only".into(),
            probability: 1.0,
            long_tail: false,
            phases: vec![
                PhaseSpan { phase: 0, min_frames: 3, max_frames: 3 },
                PhaseSpan { phase: 1, min_frames: 2, max_frames: 2 },
            ],
        }];
        g.tool_templates = vec![ToolTemplate { phase: 1, tool: 0, onset: (1, 1), duration: (4, 4), probability: 1.0 }];
        g
    }

    #[test]
    fn deterministic_and_degenerate() {
        let g = ProcedureGrammar::dominant_long_tail();
        assert_eq!(sample_procedure(&g, 7).unwrap(), sample_procedure(&g, 7).unwrap());
        let s = sample_procedure(&fixed_grammar(), 99).unwrap();
        assert_eq!(s.timeline.phase_of(), &[0, 0, 0, 1, 1]);
        assert_eq!(s.timeline.tool_active(0), &[false, false, false, false, true]);
        assert!(s.timeline.tool_active(1).iter().all(|x| !x));
    }

    #[test]
    fn mixture_frequencies() {
        let g = ProcedureGrammar::dominant_long_tail();
        let n = 10_000;
        let tail = (0..n).filter(|&s| sample_procedure(&g, s as u64).unwrap().long_tail).count();
        let freq = tail as f64 / n as f64;
        assert!((freq - 0.1).abs() < 0.02, "long-tail frequency {freq}");
    }

    #[test]
    fn prototypes_separate_phases() {
        let mut g = ProcedureGrammar::dominant_long_tail();
        g.observation_noise = 0.0;
        let tl = sample_procedure(&g, 3).unwrap().timeline;
        // Same state: first frame of the procedure rendered twice.
        assert_eq!(render_observation(&tl, 0, &g, 5).unwrap(), render_observation(&tl, 0, &g, 5).unwrap());
        let tools_sets = [[false, false, false], [true, false, true], [true, true, true]];
        for a in 0..5 {
            for b in 0..5 {
                if a == b {
                    continue;
                }
                for ta in &tools_sets {
                    for tb in &tools_sets {
                        for (ea, eb) in [(0, 0), (3, 40), (80, 1)] {
                            let pa = prototype(&g, a, ta, ea);
                            let pb = prototype(&g, b, tb, eb);
                            let d: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                            assert!(d >= g.prototype_separation - 1e-12, "phases {a},{b}: {d}");
                        }
                    }
                }
            }
        }
        assert_ne!(prototype(&g, 1, &[true, false, false], 0), prototype(&g, 1, &[false, true, false], 0));
    }

    #[test]
    fn generated_labels_match_scan() {
        let g = ProcedureGrammar::dominant_long_tail();
        for seed in 0..50 {
            let tl = sample_procedure(&g, seed).unwrap().timeline;
            for tool in 0..3 {
                let labels = remaining_time_labels(&tl, Target::Tool(tool), 2.0, 60.0).unwrap();
                let act = tl.tool_active(tool);
                for (t, l) in labels.iter().enumerate() {
                    let expect = (t..act.len()).find(|&s| act[s]).map_or(2.0, |s| ((s - t) as f64 / 60.0).min(2.0));
                    assert_eq!(l.remaining, expect);
                }
            }
        }
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_counts(10, &[0.6, 0.4]).unwrap(), [6, 4]);
        assert_eq!(split_counts(10, &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap().iter().sum::<usize>(), 10);
        assert!(split_counts(10, &[0.6, 0.6]).is_err());
    }

    #[test]
    fn invalid_grammars() {
        let mut g = ProcedureGrammar::dominant_long_tail();
        g.variants[0].probability = 0.5;
        assert!(g.validate().is_err());
        let mut g = ProcedureGrammar::dominant_long_tail();
        g.variants[0].phases[0].min_frames = 0;
        assert!(g.validate().is_err());
        let mut g = ProcedureGrammar::dominant_long_tail();
        g.observation_dim = 4;
        assert!(g.validate().is_err());
    }
}
