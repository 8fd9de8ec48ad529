//! Toy dataset generation and MVTec-style folder ingestion.

mod toy;

pub use toy::{build_toy_dataset, render_pattern, ClassSpec, DatasetSpec, Pattern};

use crate::imaging::{decode_mask_png, encode_mask_png, encode_png, read_image, CodecError, Image, Mask};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("dataset config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("{0}")]
    Layout(String),
    #[error("image content appears in both train and test: {first} and {second}")]
    Duplicate { first: String, second: String },
    #[error(transparent)]
    Synthesis(#[from] crate::synthesis::SynthError),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// Index into [`Dataset::classes`].
    pub class: usize,
    pub anomalous: bool,
    /// Defect directory name for anomalies, `None` for normals.
    pub defect: Option<String>,
    /// Pixel ground truth; `None` for normals and for anomalies without one.
    pub mask: Option<Mask>,
    /// File stem used on disk.
    pub stem: String,
}

impl Sample {
    /// Anomalies that came without a ground-truth mask.
    pub fn image_level_only(&self) -> bool {
        self.anomalous && self.mask.is_none()
    }

    /// Ground truth as a mask, empty for normals.
    pub fn mask_or_empty(&self) -> Mask {
        self.mask.clone().unwrap_or_else(|| Mask::empty(self.image.width(), self.image.height()))
    }
}

/// Train split holds normals only; test holds normals and anomalies.
/// `classes` is sorted and fixes the label index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn content_hash(img: &Image) -> String {
    let mut h = Sha256::new();
    h.update((img.width() as u32).to_le_bytes());
    h.update((img.height() as u32).to_le_bytes());
    h.update(img.as_raw());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Dataset {
    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn train_of(&self, class: usize) -> impl Iterator<Item = &Sample> {
        self.train.iter().filter(move |s| s.class == class)
    }

    pub fn test_of(&self, class: usize) -> impl Iterator<Item = &Sample> {
        self.test.iter().filter(move |s| s.class == class)
    }

    /// Checks the split contract: no anomalies in train, no image content
    /// shared between train and test, class indices in range.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<String, String> = HashMap::new();
        for s in &self.train {
            if s.anomalous {
                return Err(DataError::Layout(format!("train sample {} is anomalous", s.stem)));
            }
            if s.class >= self.classes.len() {
                return Err(DataError::Layout(format!("sample {} has class {} of {}", s.stem, s.class, self.classes.len())));
            }
            seen.entry(content_hash(&s.image)).or_insert_with(|| format!("{}/train/{}", self.classes[s.class], s.stem));
        }
        for s in &self.test {
            if s.class >= self.classes.len() {
                return Err(DataError::Layout(format!("sample {} has class {} of {}", s.stem, s.class, self.classes.len())));
            }
            if let Some(first) = seen.get(&content_hash(&s.image)) {
                return Err(DataError::Duplicate {
                    first: first.clone(),
                    second: format!("{}/test/{}/{}", self.classes[s.class], s.defect.as_deref().unwrap_or("good"), s.stem),
                });
            }
        }
        Ok(())
    }

    /// Restricts to the named classes (kept in their sorted order).
    pub fn subset(&self, names: &[String]) -> Result<Dataset> {
        let mut keep: Vec<usize> = names
            .iter()
            .map(|n| self.class_index(n).ok_or_else(|| DataError::Config(format!("unknown class `{n}`"))))
            .collect::<Result<_>>()?;
        keep.sort_unstable();
        keep.dedup();
        let remap = |s: &Sample| keep.iter().position(|&k| k == s.class).map(|c| Sample { class: c, ..s.clone() });
        Ok(Dataset {
            classes: keep.iter().map(|&k| self.classes[k].clone()).collect(),
            train: self.train.iter().filter_map(remap).collect(),
            test: self.test.iter().filter_map(remap).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassManifest {
    pub name: String,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

/// Mirror of the tree written next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<DatasetSpec>,
    pub classes: Vec<ClassManifest>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn rel_paths(s: &Sample, class: &str, split: &str) -> (String, Option<String>) {
    match &s.defect {
        None => (format!("{class}/{split}/good/{}.png", s.stem), None),
        Some(d) => (
            format!("{class}/test/{d}/{}.png", s.stem),
            s.mask.as_ref().map(|_| format!("{class}/ground_truth/{d}/{}_mask.png", s.stem)),
        ),
    }
}

/// Writes the MVTec layout plus `manifest.json` under `root`.
pub fn write_dataset(ds: &Dataset, root: &Path, seed: Option<u64>, spec: Option<&DatasetSpec>) -> Result<DatasetManifest> {
    ds.validate()?;
    let mut classes = Vec::with_capacity(ds.classes.len());
    for (k, name) in ds.classes.iter().enumerate() {
        let mut cm = ClassManifest {
            name: name.clone(),
            train: vec![],
            test: vec![],
        };
        for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
            for s in samples.iter().filter(|s| s.class == k) {
                let (rel, mask_rel) = rel_paths(s, name, split);
                let path = root.join(&rel);
                std::fs::create_dir_all(path.parent().expect("file has a parent")).map_err(io_err(&path))?;
                encode_png(&s.image, &path)?;
                if let (Some(m), Some(mr)) = (&s.mask, &mask_rel) {
                    let mp = root.join(mr);
                    std::fs::create_dir_all(mp.parent().expect("file has a parent")).map_err(io_err(&mp))?;
                    encode_mask_png(m, &mp)?;
                }
                let entry = ManifestEntry {
                    path: rel,
                    sha256: content_hash(&s.image),
                    mask: mask_rel,
                };
                if split == "train" {
                    cm.train.push(entry);
                } else {
                    cm.test.push(entry);
                }
            }
        }
        classes.push(cm);
    }
    let manifest = DatasetManifest {
        schema: crate::SCHEMA.into(),
        seed,
        spec: spec.cloned(),
        classes,
    };
    let mp = root.join(MANIFEST_FILE);
    std::fs::write(&mp, serde_json::to_string_pretty(&manifest).expect("manifest serializes")).map_err(io_err(&mp))?;
    Ok(manifest)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir).map_err(io_err(dir))?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>().map_err(io_err(dir))?;
    out.sort();
    Ok(out)
}

fn pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Walks `root/<class>/{train/good, test/<defect>, ground_truth/<defect>}`.
/// Classes come back sorted by name; classes without images are skipped.
pub fn load_folder_dataset(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(DataError::Layout(format!("{} is not a directory", root.display())));
    }
    let mut class_dirs: Vec<(String, PathBuf)> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir() && (p.join("train").is_dir() || p.join("test").is_dir()))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    class_dirs.sort_by(|a, b| a.0.cmp(&b.0));

    let mut ds = Dataset {
        classes: vec![],
        train: vec![],
        test: vec![],
    };
    for (name, dir) in class_dirs {
        let k = ds.classes.len();
        let mut train = Vec::new();
        let good = dir.join("train").join("good");
        if good.is_dir() {
            for p in pngs(&good)? {
                train.push(Sample {
                    image: read_image(&p)?,
                    class: k,
                    anomalous: false,
                    defect: None,
                    mask: None,
                    stem: stem(&p),
                });
            }
        }
        let mut test = Vec::new();
        let test_dir = dir.join("test");
        if test_dir.is_dir() {
            for defect_dir in sorted_entries(&test_dir)?.into_iter().filter(|p| p.is_dir()) {
                let defect = defect_dir.file_name().unwrap().to_string_lossy().into_owned();
                let anomalous = defect != "good";
                for p in pngs(&defect_dir)? {
                    let image = read_image(&p)?;
                    let st = stem(&p);
                    let mask = if anomalous {
                        let mp = dir.join("ground_truth").join(&defect).join(format!("{st}_mask.png"));
                        if mp.is_file() {
                            let m = decode_mask_png(&mp)?;
                            if (m.width(), m.height()) != image.dims() {
                                return Err(DataError::Layout(format!("{}: mask size differs from image", mp.display())));
                            }
                            Some(m)
                        } else {
                            log::warn!("{}: no ground-truth mask, image-level only", p.display());
                            None
                        }
                    } else {
                        None
                    };
                    test.push(Sample {
                        image,
                        class: k,
                        anomalous,
                        defect: anomalous.then(|| defect.clone()),
                        mask,
                        stem: st,
                    });
                }
            }
        }
        if train.is_empty() && test.is_empty() {
            log::warn!("class `{name}` has no images, skipping");
            continue;
        }
        ds.classes.push(name);
        ds.train.extend(train);
        ds.test.extend(test);
    }
    if ds.classes.is_empty() {
        return Err(DataError::Layout(format!("no classes under {}", root.display())));
    }
    ds.validate()?;
    Ok(ds)
}

/// Builds the toy dataset and writes it under `root`.
pub fn generate_toy_dataset(spec: &DatasetSpec, seed: u64, root: &Path) -> Result<(Dataset, DatasetManifest)> {
    let ds = build_toy_dataset(spec, seed)?;
    let manifest = write_dataset(&ds, root, Some(seed), Some(spec))?;
    Ok((ds, manifest))
}
