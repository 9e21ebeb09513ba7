//! On-disk dataset layout and ingestion.
//!
//! ```text
//! <root>/meta.txt                      key = value vocabulary sidecar
//! <root>/manifest.json                 splits, seeds, long-tail membership
//! <root>/videos/<id>.timeline.csv      frame,phase_id,tool_0,...,tool_{M-1}
//! <root>/videos/<id>.obs.csv           one observation row per frame
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::workflow::WorkflowTimeline;

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub phase_names: Vec<String>,
    pub tool_names: Vec<String>,
    pub observation_dim: usize,
}

impl DatasetMeta {
    pub fn num_phases(&self) -> usize {
        self.phase_names.len()
    }

    pub fn num_tools(&self) -> usize {
        self.tool_names.len()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("num_phases = {}\n", self.phase_names.len());
        for (i, n) in self.phase_names.iter().enumerate() {
            s.push_str(&format!("phase_{i} = {n}\n"));
        }
        s.push_str(&format!("num_tools = {}\n", self.tool_names.len()));
        for (i, n) in self.tool_names.iter().enumerate() {
            s.push_str(&format!("tool_{i} = {n}\n"));
        }
        s.push_str(&format!("observation_dim = {}\n", self.observation_dim));
        s
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(format!("line {}: expected key = value", n + 1))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let count = |key: &str| -> std::result::Result<usize, String> {
            kv.get(key)
                .ok_or(format!("missing `{key}`"))?
                .parse()
                .map_err(|_| format!("`{key}` is not a count"))
        };
        let names = |prefix: &str, n: usize| -> std::result::Result<Vec<String>, String> {
            (0..n)
                .map(|i| kv.get(&format!("{prefix}_{i}")).cloned().ok_or(format!("missing `{prefix}_{i}`")))
                .collect()
        };
        let num_phases = count("num_phases")?;
        if num_phases == 0 {
            return Err("num_phases must be positive".into());
        }
        Ok(Self {
            phase_names: names("phase", num_phases)?,
            tool_names: names("tool", count("num_tools")?)?,
            observation_dim: count("observation_dim")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub id: String,
    pub seed: u64,
    pub variant: String,
    pub long_tail: bool,
    pub num_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub name: String,
    pub videos: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub grammar_hash: Option<String>,
    pub seed: Option<u64>,
    pub splits: Vec<Split>,
    pub videos: Vec<ManifestVideo>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Option<&[String]> {
        self.splits.iter().find(|s| s.name == name).map(|s| s.videos.as_slice())
    }

    pub fn long_tail_ids(&self) -> Vec<&str> {
        self.videos.iter().filter(|v| v.long_tail).map(|v| v.id.as_str()).collect()
    }

    pub fn is_long_tail(&self, id: &str) -> bool {
        self.videos.iter().any(|v| v.id == id && v.long_tail)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// A timeline with its aligned observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub timeline: WorkflowTimeline,
    pub observations: Vec<Vec<f64>>,
}

impl Video {
    pub fn id(&self) -> &str {
        self.timeline.video_id()
    }

    pub fn num_frames(&self) -> usize {
        self.timeline.num_frames()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub manifest: DatasetManifest,
    pub videos: BTreeMap<String, Video>,
}

impl Dataset {
    /// Videos of a split in manifest order.
    pub fn split(&self, name: &str) -> Result<Vec<&Video>> {
        let ids = self.manifest.split(name).ok_or_else(|| Error::Config(format!("dataset has no `{name}` split")))?;
        ids.iter()
            .map(|id| self.videos.get(id).ok_or_else(|| Error::data(id.clone(), "listed in manifest but not loaded")))
            .collect()
    }

    pub fn has_split(&self, name: &str) -> bool {
        self.manifest.split(name).is_some()
    }
}

pub fn video_dir(root: &Path) -> PathBuf {
    root.join("videos")
}

fn timeline_path(root: &Path, id: &str) -> PathBuf {
    video_dir(root).join(format!("{id}.timeline.csv"))
}

fn obs_path(root: &Path, id: &str) -> PathBuf {
    video_dir(root).join(format!("{id}.obs.csv"))
}

pub fn write_observations<W: std::io::Write>(obs: &[Vec<f64>], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for row in obs {
        out.write_record(row.iter().map(|v| v.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_observations<R: std::io::Read>(video: &str, dim: usize, r: R) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(video, format!("observation row {i}: {e}")))?;
        if rec.len() != dim {
            return Err(Error::data(video, format!("observation row {i} has {} values, expected {dim}", rec.len())));
        }
        let row = rec
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| Error::data(video, format!("observation row {i}: not a number")))?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(video, format!("observation row {i}: non-finite value")));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_dataset(
    root: &Path,
    meta: &DatasetMeta,
    manifest: &DatasetManifest,
    videos: &[(WorkflowTimeline, Vec<Vec<f64>>)],
) -> Result<()> {
    fs::create_dir_all(video_dir(root))?;
    fs::write(root.join(META_FILE), meta.to_text())?;
    fs::write(root.join(MANIFEST_FILE), manifest.to_json())?;
    for (tl, obs) in videos {
        tl.write_csv(fs::File::create(timeline_path(root, tl.video_id()))?)?;
        write_observations(obs, fs::File::create(obs_path(root, tl.video_id()))?)?;
    }
    Ok(())
}

/// Reads and validates every video under `root`.
///
/// Without a manifest, every video found is placed in a single `all` split.
pub fn ingest_dataset(root: &Path) -> Result<Dataset> {
    let dataset_err = |message: String| Error::Dataset { path: root.to_path_buf(), message };
    if !root.is_dir() {
        return Err(dataset_err("not a directory".into()));
    }
    let meta_text = fs::read_to_string(root.join(META_FILE)).map_err(|e| dataset_err(format!("{META_FILE}: {e}")))?;
    let meta = DatasetMeta::parse(&meta_text).map_err(|m| dataset_err(format!("{META_FILE}: {m}")))?;
    let manifest_path = root.join(MANIFEST_FILE);
    let manifest = if manifest_path.exists() {
        let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        if m.format_version != FORMAT_VERSION {
            return Err(dataset_err(format!("unsupported manifest version {}", m.format_version)));
        }
        m
    } else {
        let mut ids: Vec<String> = fs::read_dir(video_dir(root))
            .map_err(|e| dataset_err(format!("videos/: {e}")))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".timeline.csv")).map(String::from))
            .collect();
        ids.sort();
        let videos = ids
            .iter()
            .map(|id| ManifestVideo { id: id.clone(), seed: 0, variant: String::new(), long_tail: false, num_frames: 0 })
            .collect();
        DatasetManifest {
            format_version: FORMAT_VERSION,
            grammar_hash: None,
            seed: None,
            splits: vec![Split { name: "all".into(), videos: ids }],
            videos,
        }
    };
    if manifest.videos.is_empty() {
        return Err(dataset_err("no videos".into()));
    }
    let mut videos = BTreeMap::new();
    for entry in &manifest.videos {
        let id = entry.id.as_str();
        let tl_file = fs::File::open(timeline_path(root, id)).map_err(|e| Error::data(id, format!("timeline: {e}")))?;
        let timeline = WorkflowTimeline::read_csv(id, meta.num_phases(), tl_file)?;
        if timeline.num_tools() != meta.num_tools() {
            return Err(Error::data(id, format!("{} tool columns, vocabulary has {}", timeline.num_tools(), meta.num_tools())));
        }
        let obs_file = fs::File::open(obs_path(root, id)).map_err(|e| Error::data(id, format!("observations: {e}")))?;
        let observations = read_observations(id, meta.observation_dim, obs_file)?;
        if observations.len() != timeline.num_frames() {
            return Err(Error::data(
                id,
                format!("{} observation rows but {} label rows", observations.len(), timeline.num_frames()),
            ));
        }
        if entry.num_frames != 0 && entry.num_frames != timeline.num_frames() {
            return Err(Error::data(id, "frame count differs from manifest"));
        }
        videos.insert(id.to_string(), Video { timeline, observations });
    }
    for split in &manifest.splits {
        if let Some(id) = split.videos.iter().find(|id| !videos.contains_key(*id)) {
            return Err(dataset_err(format!("split `{}` lists unknown video {id}", split.name)));
        }
    }
    Ok(Dataset { meta, manifest, videos })
}
