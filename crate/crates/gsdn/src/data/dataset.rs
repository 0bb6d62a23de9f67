use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::scene::{load_scene, save_scene, write, SceneBundle, POINTS_FILE};
use crate::data::synth::{scene_seed, synth_scene, SynthSpec};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
    pub points: usize,
    pub objects: usize,
}

/// Index of a generated dataset. Scene `i` uses the `i`-th SplitMix64
/// output of `master_seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub master_seed: u64,
    pub seed_rule: String,
    pub spec: SynthSpec,
    pub scenes: Vec<ManifestEntry>,
}

pub fn scene_name(i: usize) -> String {
    format!("scene_{i:04}")
}

/// Generates `count` scenes in memory, named and seeded as in the manifest.
pub fn synth_dataset(spec: &SynthSpec, count: usize) -> Result<Vec<(ManifestEntry, SceneBundle)>> {
    spec.validate()?;
    (0..count)
        .map(|i| {
            let seed = scene_seed(spec.seed, i);
            let scene = synth_scene(&SynthSpec { seed, ..spec.clone() })?;
            let entry = ManifestEntry {
                name: scene_name(i),
                seed,
                points: scene.points.len(),
                objects: scene.gt_boxes.len(),
            };
            Ok((entry, scene))
        })
        .collect()
}

/// Writes scenes as subdirectories of `dir` plus `manifest.json`.
pub fn write_dataset(dir: &Path, spec: &SynthSpec, scenes: &[(ManifestEntry, SceneBundle)]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (entry, scene) in scenes {
        save_scene(&dir.join(&entry.name), scene)?;
    }
    let manifest = Manifest {
        master_seed: spec.seed,
        seed_rule: "splitmix64".into(),
        spec: spec.clone(),
        scenes: scenes.iter().map(|(e, _)| e.clone()).collect(),
    };
    write(&dir.join(MANIFEST_FILE), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    Ok(manifest)
}

/// Scene names of a dataset directory: the manifest order when present,
/// otherwise every subdirectory holding a point file, sorted by name.
pub fn dataset_scenes(dir: &Path) -> Result<Vec<String>> {
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.exists() {
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: manifest.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        return Ok(m.scenes.into_iter().map(|e| e.name).collect());
    }
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().join(POINTS_FILE).is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Validation(format!("{} holds no scenes", dir.display())));
    }
    Ok(names)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<(String, SceneBundle)>> {
    dataset_scenes(dir)?
        .into_iter()
        .map(|n| {
            let s = load_scene(&dir.join(&n))?;
            Ok((n, s))
        })
        .collect()
}
