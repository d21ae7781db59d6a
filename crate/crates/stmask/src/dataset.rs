//! On-disk synthetic datasets.
//!
//! ```text
//! <root>/manifest.json              generator config and one entry per clip
//! <root>/clips/<id>.tensor          [T,H,W,3] pixels
//! <root>/annotations/<id>.json      [{class_id, mask}] per clip
//! <root>/masks/<id>_<k>.tensor      [T,H,W] 0/1 occupancy
//! ```

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};
use stmask_core::datagen::{generate_clip, split_for_seed, GenConfig, Split};
use stmask_core::loss::GroundTruthInstance;
use stmask_core::mask::BinaryMask;
use stmask_core::trainer::LabeledClip;

use crate::checkpoint::{read_json, write_json};
use crate::tensor_io::{read_tensor, write_tensor};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: GenConfig,
    pub base_seed: u64,
    pub clips: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    /// Relative to the dataset root.
    pub frames: PathBuf,
    pub annotations: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub clip_id: String,
    pub instances: Vec<InstanceRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRef {
    pub class_id: usize,
    /// Relative to the dataset root.
    pub mask: PathBuf,
}

pub fn clip_id(seed: u64) -> String {
    format!("clip{seed:05}")
}

/// Generates clips for seeds `base_seed..base_seed + n_clips` and writes them
/// under `root`. Even seeds go to the train split, odd seeds to val.
pub fn make_dataset(root: &Path, gen: &GenConfig, n_clips: usize, base_seed: u64) -> Result<Manifest> {
    let mut clips = Vec::with_capacity(n_clips);
    for seed in base_seed..base_seed + n_clips as u64 {
        let clip = generate_clip(gen, seed).with_context(|| format!("generating clip for seed {seed}"))?;
        let id = clip_id(seed);
        let frames = PathBuf::from("clips").join(format!("{id}.tensor"));
        write_tensor(&root.join(&frames), &clip.frames)?;
        let instances = clip
            .instances
            .iter()
            .enumerate()
            .map(|(k, g)| {
                let mask = PathBuf::from("masks").join(format!("{id}_{k}.tensor"));
                write_tensor(&root.join(&mask), &g.mask.to_tensor())?;
                Ok(InstanceRef { class_id: g.class_id, mask })
            })
            .collect::<Result<Vec<_>>>()?;
        let annotations = PathBuf::from("annotations").join(format!("{id}.json"));
        write_json(&root.join(&annotations), &AnnotationFile { clip_id: id.clone(), instances })?;
        clips.push(ManifestEntry { id, seed, split: split_for_seed(seed), frames, annotations });
    }
    let manifest = Manifest { generator: gen.clone(), base_seed, clips };
    write_json(&root.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    read_json(&root.join(MANIFEST_FILE))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let t = read_tensor(path)?;
    ensure!(t.rank() == 3, "{} is not a [T,H,W] mask", path.display());
    Ok(BinaryMask::from_tensor(&t, 0.5)?)
}

pub fn load_clip(root: &Path, entry: &ManifestEntry) -> Result<LabeledClip> {
    let frames = read_tensor(&root.join(&entry.frames))?;
    ensure!(frames.rank() == 4 && frames.shape()[3] == 3, "{} is not a [T,H,W,3] clip", entry.frames.display());
    let ann: AnnotationFile = read_json(&root.join(&entry.annotations))?;
    let instances = ann
        .instances
        .iter()
        .map(|i| Ok(GroundTruthInstance { class_id: i.class_id, mask: read_mask(&root.join(&i.mask))? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledClip { id: entry.id.clone(), frames, instances })
}

/// Loads every clip of `split`, at most `limit` of them, in manifest order.
pub fn load_split(root: &Path, split: Split, limit: Option<usize>) -> Result<Vec<LabeledClip>> {
    let manifest = read_manifest(root)?;
    manifest
        .clips
        .iter()
        .filter(|e| e.split == split)
        .take(limit.unwrap_or(usize::MAX))
        .map(|e| load_clip(root, e))
        .collect()
}
