//! On-disk corpus layout:
//! `<root>/<dataset>/<case_id>/<slice_index>/<MODALITY>.bin` plus one
//! `meta.json` per slice directory. Rasters are little-endian `f32`,
//! row-major `H x W`. Missing modalities have no file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_sample, DatasetRegistry, Modality, ModalityMask, MultiModalSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const META_FILE: &str = "meta.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::field("split", format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMeta {
    /// `[H, W]`.
    pub shape: [usize; 2],
    pub availability: ModalityMask,
    pub dataset: String,
    pub case_id: String,
    pub slice_index: u32,
    #[serde(default)]
    pub split: Split,
}

fn write_raster(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_raster(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Shape(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

pub fn slice_dir(root: &Path, dataset: &str, case_id: &str, slice_index: u32) -> PathBuf {
    root.join(dataset).join(case_id).join(slice_index.to_string())
}

/// Writes one slice directory; returns its path.
pub fn write_slice(
    root: &Path,
    dataset_name: &str,
    sample: &MultiModalSample,
    split: Split,
) -> Result<PathBuf> {
    let dir = slice_dir(root, dataset_name, &sample.case_id, sample.slice_index);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for m in sample.availability.modalities() {
        write_raster(&dir.join(format!("{}.bin", m.name())), sample.channel(m))?;
    }
    let meta = SliceMeta {
        shape: [sample.height(), sample.width()],
        availability: sample.availability,
        dataset: dataset_name.to_string(),
        case_id: sample.case_id.clone(),
        slice_index: sample.slice_index,
        split,
    };
    let meta_path = dir.join(META_FILE);
    let json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    Ok(dir)
}

pub fn read_meta(dir: &Path) -> Result<SliceMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        message: e.to_string(),
    })
}

/// Reads a slice directory, zero-filling missing modalities and checking
/// that raster files match the recorded availability in both directions.
pub fn read_slice(dir: &Path, registry: &DatasetRegistry) -> Result<(MultiModalSample, Split)> {
    let meta = read_meta(dir)?;
    let dataset = registry.by_name(&meta.dataset).ok_or_else(|| {
        Error::Validation(format!(
            "{}: dataset `{}` is not in the registry",
            dir.display(),
            meta.dataset
        ))
    })?;
    let [h, w] = meta.shape;
    let plane = h * w;
    let mut images = Tensor::zeros(&[6, h, w]);
    for m in Modality::ALL {
        let path = dir.join(format!("{}.bin", m.name()));
        let present = path.exists();
        if present != meta.availability.contains(m) {
            return Err(Error::Validation(format!(
                "{}: availability {} disagrees with raster files ({} {})",
                dir.display(),
                meta.availability,
                m,
                if present { "present" } else { "missing" }
            )));
        }
        if present {
            let data = read_raster(&path, plane)?;
            images.data_mut()[m.index() * plane..(m.index() + 1) * plane].copy_from_slice(&data);
        }
    }
    let sample = MultiModalSample {
        images,
        availability: meta.availability,
        dataset_id: dataset.id,
        case_id: meta.case_id,
        slice_index: meta.slice_index,
    };
    let violations = check_sample(&sample, registry);
    if !violations.is_empty() {
        return Err(Error::Validation(format!(
            "{}: {}",
            dir.display(),
            violations.join("; ")
        )));
    }
    Ok((sample, meta.split))
}

#[derive(Clone, Debug)]
pub struct CorpusEntry {
    pub sample: MultiModalSample,
    pub split: Split,
}

/// All slices of a corpus in canonical order: registry order, then case
/// directory name, then numeric slice index.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub entries: Vec<CorpusEntry>,
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}

impl Corpus {
    pub fn load(root: &Path, registry: &DatasetRegistry) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Validation(format!(
                "corpus directory {} does not exist",
                root.display()
            )));
        }
        let mut entries = Vec::new();
        for dataset in registry.datasets() {
            let ddir = root.join(&dataset.name);
            if !ddir.is_dir() {
                continue;
            }
            for case_dir in sorted_subdirs(&ddir)? {
                let mut slices: Vec<(u32, PathBuf)> = Vec::new();
                for s in sorted_subdirs(&case_dir)? {
                    let name = s.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                    let idx = name.parse().map_err(|_| {
                        Error::Validation(format!("{}: slice directory is not an index", s.display()))
                    })?;
                    slices.push((idx, s));
                }
                slices.sort();
                for (_, s) in slices {
                    let (sample, split) = read_slice(&s, registry)?;
                    if sample.dataset_id != dataset.id {
                        return Err(Error::Validation(format!(
                            "{}: meta names dataset {} but lives under `{}`",
                            s.display(),
                            sample.dataset_id,
                            dataset.name
                        )));
                    }
                    entries.push(CorpusEntry { sample, split });
                }
            }
        }
        if entries.is_empty() {
            return Err(Error::Validation(format!(
                "corpus {} contains no slices for the registry datasets",
                root.display()
            )));
        }
        Ok(Corpus {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn samples(&self, split: Split) -> impl Iterator<Item = &MultiModalSample> {
        self.entries
            .iter()
            .filter(move |e| e.split == split)
            .map(|e| &e.sample)
    }

    /// SHA-256 over every slice's key, availability and raster values.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            hasher.update(e.sample.key().as_bytes());
            hasher.update([e.sample.availability.raw(), e.split as u8]);
            for v in e.sample.images.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}
