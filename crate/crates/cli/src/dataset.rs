//! On-disk datasets: a JSON manifest naming one RTEN tensor per image.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use relcorr_core::episodic::{ClassImages, Split};
use relcorr_tensor::{rten, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    /// Paths relative to the manifest's directory.
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub image_size: usize,
    pub channels: usize,
    pub splits: BTreeMap<String, Vec<ClassEntry>>,
}

impl Manifest {
    pub fn file_count(&self) -> usize {
        self.splits.values().flatten().map(|c| c.files.len()).sum()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Dataset(format!("{}: {e}", path.display())))
    }

    /// Checks everything that does not need the tensor files.
    pub fn check_structure(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(CliError::Dataset(format!("unsupported manifest version {}", self.version)));
        }
        if self.image_size == 0 || self.channels == 0 {
            return Err(CliError::Dataset("image size and channel count must be positive".into()));
        }
        let mut owner: HashMap<&str, &str> = HashMap::new();
        for (split, classes) in &self.splits {
            if !SPLITS.contains(&split.as_str()) {
                return Err(CliError::Dataset(format!("unknown split `{split}`")));
            }
            for class in classes {
                if let Some(prev) = owner.insert(&class.name, split) {
                    return Err(if prev == split {
                        CliError::Dataset(format!("class `{}` listed twice in split `{split}`", class.name))
                    } else {
                        CliError::Dataset(format!("class `{}` appears in both `{prev}` and `{split}`", class.name))
                    });
                }
                if class.files.is_empty() {
                    return Err(CliError::Dataset(format!("class `{}` in `{split}` has no images", class.name)));
                }
            }
        }
        Ok(())
    }
}

/// A loaded dataset; class order within a split follows the manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub image_size: usize,
    pub channels: usize,
    pub splits: BTreeMap<String, Split>,
    /// Source path of every image, parallel to `splits`.
    pub files: BTreeMap<String, Vec<Vec<PathBuf>>>,
}

impl Dataset {
    /// Builds a dataset from images already in memory.
    pub fn in_memory(image_size: usize, channels: usize, splits: BTreeMap<String, Split>) -> Self {
        let files = splits
            .iter()
            .map(|(name, s)| {
                let paths = s
                    .classes
                    .iter()
                    .map(|c| (0..c.images.len()).map(|i| PathBuf::from(format!("{name}/{}/{i}", c.name))).collect())
                    .collect();
                (name.clone(), paths)
            })
            .collect();
        Dataset { image_size, channels, splits, files }
    }

    pub fn split(&self, name: &str) -> Result<&Split> {
        self.splits.get(name).filter(|s| !s.classes.is_empty()).ok_or_else(|| CliError::Dataset(format!("split `{name}` is empty")))
    }
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(manifest_path)?;
    manifest.check_structure()?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let want = [manifest.image_size, manifest.image_size, manifest.channels];
    let mut splits = BTreeMap::new();
    let mut files = BTreeMap::new();
    for (name, classes) in &manifest.splits {
        let mut split = Split { classes: Vec::with_capacity(classes.len()) };
        let mut paths = Vec::with_capacity(classes.len());
        for class in classes {
            let mut images = Vec::with_capacity(class.files.len());
            let mut class_paths = Vec::with_capacity(class.files.len());
            for f in &class.files {
                let path = root.join(f);
                if !path.is_file() {
                    return Err(CliError::Dataset(format!("missing file {}", path.display())));
                }
                let t = rten::read(&path).map_err(|e| CliError::Dataset(format!("{}: {e}", path.display())))?;
                if t.shape() != want {
                    return Err(CliError::Dataset(format!("{}: extents {:?}, expected {want:?}", path.display(), t.shape())));
                }
                images.push(t);
                class_paths.push(path);
            }
            split.classes.push(ClassImages { name: class.name.clone(), images });
            paths.push(class_paths);
        }
        splits.insert(name.clone(), split);
        files.insert(name.clone(), paths);
    }
    Ok(Dataset { image_size: manifest.image_size, channels: manifest.channels, splits, files })
}

/// Writes every image under `dir` and returns the manifest written beside them.
pub fn write_dataset(dir: &Path, image_size: usize, channels: usize, splits: &BTreeMap<String, Split>) -> Result<Manifest> {
    let mut manifest = Manifest { version: FORMAT_VERSION, image_size, channels, splits: BTreeMap::new() };
    for (name, split) in splits {
        let mut entries = Vec::new();
        for class in &split.classes {
            let class_dir = dir.join(name).join(&class.name);
            std::fs::create_dir_all(&class_dir).map_err(|e| CliError::io(&class_dir, e))?;
            let mut files = Vec::new();
            for (i, img) in class.images.iter().enumerate() {
                let rel = format!("{name}/{}/{i:04}.rten", class.name);
                let path = dir.join(&rel);
                rten::write(&path, img).map_err(|e| CliError::Dataset(format!("{}: {e}", path.display())))?;
                files.push(rel);
            }
            entries.push(ClassEntry { name: class.name.clone(), files });
        }
        manifest.splits.insert(name.clone(), entries);
    }
    manifest.check_structure()?;
    manifest.write(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Horizontal flip then a random crop from a 2-pixel zero border.
pub fn augment(img: &Tensor<f32>, flip: bool, dy: usize, dx: usize) -> Tensor<f32> {
    const PAD: usize = 2;
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    Tensor::from_fn(&[h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), i / c % w, i % c);
        let (py, px) = (y + dy, x + dx);
        if py < PAD || px < PAD || py >= h + PAD || px >= w + PAD {
            return 0.0;
        }
        let (sy, mut sx) = (py - PAD, px - PAD);
        if flip {
            sx = w - 1 - sx;
        }
        src[(sy * w + sx) * c + ch]
    })
}

/// Largest crop offset `augment` accepts.
pub const CROP_RANGE: usize = 4;
