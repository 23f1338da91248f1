//! On-disk datasets: `images/<name>.png` paired with `labels/<name>.txt`,
//! plus a `manifest.json` for generated sets.

use super::annotation::{parse_annotation_with_bounds, serialize_annotation, LineAnnotation};
use super::synthetic::{generate_synthetic_scene, SyntheticSceneParams};
use super::DataError;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const IMAGES_DIR: &str = "images";
pub const LABELS_DIR: &str = "labels";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub image: RgbImage,
    pub annotations: Vec<LineAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub count: usize,
    /// Generator parameters; each entry overrides only the seed.
    pub params: SyntheticSceneParams,
    pub entries: Vec<ManifestEntry>,
}

/// SplitMix64 finalizer, used to derive well-spread per-image seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_name(index: usize) -> String {
    format!("{index:06}")
}

fn io_err(path: &Path, err: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source: err,
    }
}

/// Renders `count` scenes into `dir`. Image `i` uses `derive_seed(params.seed, i)`.
pub fn generate_dataset(
    dir: &Path,
    params: &SyntheticSceneParams,
    count: usize,
) -> Result<Manifest, DataError> {
    params.validate()?;
    let images = dir.join(IMAGES_DIR);
    let labels = dir.join(LABELS_DIR);
    fs::create_dir_all(&images).map_err(|e| io_err(&images, e))?;
    fs::create_dir_all(&labels).map_err(|e| io_err(&labels, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let seed = derive_seed(params.seed, i as u64);
        let scene = generate_synthetic_scene(&params.clone().with_seed(seed))?;
        let name = sample_name(i);
        write_sample(dir, &name, &scene.image, &scene.annotations)?;
        entries.push(ManifestEntry { name, seed });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        count,
        params: params.clone(),
        entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

pub fn write_sample(
    dir: &Path,
    name: &str,
    image: &RgbImage,
    annotations: &[LineAnnotation],
) -> Result<(), DataError> {
    let img_path = dir.join(IMAGES_DIR).join(format!("{name}.png"));
    image.save(&img_path).map_err(|e| DataError::Image {
        path: img_path.clone(),
        source: e,
    })?;
    let label_path = dir.join(LABELS_DIR).join(format!("{name}.txt"));
    fs::write(&label_path, serialize_annotation(annotations)).map_err(|e| io_err(&label_path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Option<Manifest>, DataError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

pub fn read_labels(path: &Path, image_size: f64) -> Result<Vec<LineAnnotation>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_annotation_with_bounds(&text, image_size).map_err(|e| DataError::Annotation {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Sample names present under `images/`, sorted.
pub fn list_samples(dir: &Path) -> Result<Vec<String>, DataError> {
    let images = dir.join(IMAGES_DIR);
    let mut names = Vec::new();
    for entry in fs::read_dir(&images).map_err(|e| io_err(&images, e))? {
        let path = entry.map_err(|e| io_err(&images, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

pub fn load_sample(dir: &Path, name: &str) -> Result<Sample, DataError> {
    let img_path: PathBuf = dir.join(IMAGES_DIR).join(format!("{name}.png"));
    let image = image::open(&img_path)
        .map_err(|e| DataError::Image {
            path: img_path.clone(),
            source: e,
        })?
        .to_rgb8();
    let label_path = dir.join(LABELS_DIR).join(format!("{name}.txt"));
    if !label_path.exists() {
        return Err(DataError::MissingLabel(label_path));
    }
    let annotations = read_labels(&label_path, image.width().max(image.height()) as f64)?;
    Ok(Sample {
        name: name.to_string(),
        image,
        annotations,
    })
}

/// Loads every image/label pair of a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>, DataError> {
    list_samples(dir)?
        .iter()
        .map(|name| load_sample(dir, name))
        .collect()
}

/// Loads only the label files of a dataset directory.
pub fn load_labels(dir: &Path) -> Result<Vec<(String, Vec<LineAnnotation>)>, DataError> {
    let labels = dir.join(LABELS_DIR);
    let mut out = Vec::new();
    for entry in fs::read_dir(&labels).map_err(|e| io_err(&labels, e))? {
        let path = entry.map_err(|e| io_err(&labels, e))?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            out.push((name, read_labels(&path, f64::INFINITY)?));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}
