//! On-disk dataset layout: per-scene T4F images and instance JSON, plus a manifest.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/scene_00000.image.t4f
//! <dir>/scene_00000.instances.json
//! ...
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::content_hash;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::synth::{generate_scene, Instance, Scene, SynthConfig};
use crate::t4f::{decode_t4f, encode_t4f};

pub const DATASET_FORMAT: &str = "dirmask-dataset/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub label: usize,
    /// Tight box `[x0, y0, x1, y1]` in pixel-edge coordinates.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// Row run-length encoding, see [`Mask::to_rle_text`].
    pub rle: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstancesFile {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub index: usize,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub synth: SynthConfig,
    pub count: usize,
    /// SHA-256 over the names and bytes of every scene file, in scene order.
    pub content_hash: String,
}

pub fn scene_stem(index: usize) -> String {
    format!("scene_{:05}", index)
}

pub fn instances_to_json(scene: &Scene) -> Result<String> {
    let file = InstancesFile {
        height: scene.height(),
        width: scene.width(),
        num_classes: scene.num_classes,
        seed: scene.seed,
        index: scene.index,
        instances: scene
            .instances
            .iter()
            .map(|i| InstanceRecord {
                label: i.label,
                bbox: [i.bbox.x0, i.bbox.y0, i.bbox.x1, i.bbox.y1],
                rle: i.mask.to_rle_text(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)? + "\n")
}

/// Parses an instances document. Every mask must decode at the declared size, be non-empty,
/// and have the recorded box as its tight box; masks must be pairwise disjoint.
pub fn parse_instances_json(text: &str) -> Result<InstancesFile> {
    let file: InstancesFile = serde_json::from_str(text)?;
    file.to_instances()?;
    Ok(file)
}

impl InstancesFile {
    pub fn to_instances(&self) -> Result<Vec<Instance>> {
        let mut seen = Mask::new(self.height, self.width);
        let mut out = Vec::with_capacity(self.instances.len());
        for (k, rec) in self.instances.iter().enumerate() {
            let bad = |msg: String| Error::Format(format!("instance {}: {}", k, msg));
            if rec.label == 0 || rec.label >= self.num_classes {
                return Err(bad(format!("label {} outside [1, {})", rec.label, self.num_classes)));
            }
            let mask = Mask::from_rle_text(&rec.rle, self.height, self.width)?;
            let tight = mask
                .tight_box(rec.label, 1.0)
                .ok_or_else(|| bad("empty mask".into()))?;
            if [tight.x0, tight.y0, tight.x1, tight.y1] != rec.bbox {
                return Err(bad(format!("box {:?} is not the tight box of its mask", rec.bbox)));
            }
            if mask.intersects(&seen) {
                return Err(bad("mask overlaps an earlier instance".into()));
            }
            seen.union_with(&mask);
            out.push(Instance {
                label: rec.label,
                mask,
                bbox: tight,
            });
        }
        Ok(out)
    }
}

fn scene_files(scene: &Scene) -> Result<[(String, Vec<u8>); 2]> {
    let stem = scene_stem(scene.index);
    Ok([
        (format!("{}.image.t4f", stem), encode_t4f(&scene.image)),
        (format!("{}.instances.json", stem), instances_to_json(scene)?.into_bytes()),
    ])
}

/// Generates scenes `0..count` and writes them with a manifest. Rewriting the same inputs
/// produces identical files.
pub fn write_dataset(dir: &Path, synth: &SynthConfig, count: usize) -> Result<DatasetManifest> {
    synth.validate()?;
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(2 * count);
    for i in 0..count {
        let scene = generate_scene(synth, i)?;
        for (name, bytes) in scene_files(&scene)? {
            fs::write(dir.join(&name), &bytes)?;
            files.push((name, bytes));
        }
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        synth: synth.clone(),
        count,
        content_hash: content_hash(files.iter().map(|(n, b)| (n.as_str(), b.as_slice()))),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if m.format != DATASET_FORMAT {
        return Err(Error::Format(format!("unknown dataset format {:?}", m.format)));
    }
    Ok(m)
}

/// Loads every scene listed by the manifest and checks the content hash.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Scene>)> {
    let manifest = read_manifest(dir)?;
    let mut files: Vec<(String, Vec<u8>)> = Vec::with_capacity(2 * manifest.count);
    let mut scenes = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let stem = scene_stem(i);
        let img_name = format!("{}.image.t4f", stem);
        let inst_name = format!("{}.instances.json", stem);
        let img_bytes = fs::read(dir.join(&img_name))?;
        let inst_bytes = fs::read(dir.join(&inst_name))?;
        let image = decode_t4f(&img_bytes)?;
        let inst = parse_instances_json(std::str::from_utf8(&inst_bytes).map_err(|e| Error::Format(e.to_string()))?)?;
        if image.shape() != [1, 3, inst.height, inst.width] {
            return Err(Error::Format(format!(
                "{}: image {:?} does not match {}x{}",
                img_name,
                image.shape(),
                inst.height,
                inst.width
            )));
        }
        scenes.push(Scene {
            image,
            instances: inst.to_instances()?,
            seed: inst.seed,
            index: inst.index,
            num_classes: inst.num_classes,
        });
        files.push((img_name, img_bytes));
        files.push((inst_name, inst_bytes));
    }
    let actual = content_hash(files.iter().map(|(n, b)| (n.as_str(), b.as_slice())));
    if actual != manifest.content_hash {
        return Err(Error::Format(format!(
            "dataset content hash {} does not match manifest {}",
            actual, manifest.content_hash
        )));
    }
    Ok((manifest, scenes))
}

pub fn scene_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    let stem = scene_stem(index);
    (
        dir.join(format!("{}.image.t4f", stem)),
        dir.join(format!("{}.instances.json", stem)),
    )
}
