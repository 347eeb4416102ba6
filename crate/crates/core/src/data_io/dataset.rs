use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORMAL_DIR: &str = "good";
const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn as_int(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Anomalous => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetItem {
    pub image: PathBuf,
    pub label: Label,
    /// Name of the directory the image came from (`good` for normals).
    pub defect: String,
    pub mask: Option<PathBuf>,
}

/// The images of one split of one category, sorted by path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub category: String,
    pub split: Split,
    pub items: Vec<DatasetItem>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn normals(&self) -> impl Iterator<Item = &DatasetItem> {
        self.items.iter().filter(|i| i.label == Label::Normal)
    }

    pub fn anomalous_count(&self) -> usize {
        self.items.iter().filter(|i| i.label == Label::Anomalous).count()
    }

    pub fn category_dir(&self) -> PathBuf {
        self.root.join(&self.category)
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Sorted image files directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && is_image(p))
        .collect())
}

/// Index an MVTec-style category directory:
///
/// ```text
/// <root>/<category>/train/good/*.png
/// <root>/<category>/test/<defect>/*.png          (defect "good" = normal)
/// <root>/<category>/ground_truth/<defect>/<stem>_mask.png
/// ```
///
/// Anomalous test images without a mask are kept (they still count for
/// image-level metrics) and a warning is logged.
pub fn scan_dataset(root: &Path, category: &str, split: Split) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::MissingDirectory(root.to_owned()));
    }
    let cat_dir = root.join(category);
    if !cat_dir.is_dir() {
        return Err(Error::CategoryNotFound(cat_dir));
    }
    let split_dir = cat_dir.join(split.dir_name());
    if !split_dir.is_dir() {
        return Err(Error::MissingDirectory(split_dir));
    }
    let mut items = Vec::new();
    for sub in sorted_entries(&split_dir)?.into_iter().filter(|p| p.is_dir()) {
        let defect = sub
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_owned();
        let label = if defect == NORMAL_DIR {
            Label::Normal
        } else {
            Label::Anomalous
        };
        if split == Split::Train && label == Label::Anomalous {
            return Err(Error::NonNormalTrainItem(sub));
        }
        for image in list_images(&sub)? {
            let mask = if label == Label::Anomalous {
                let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                let candidate = cat_dir
                    .join("ground_truth")
                    .join(&defect)
                    .join(format!("{stem}_mask.png"));
                if candidate.is_file() {
                    Some(candidate)
                } else {
                    log::warn!(
                        "no ground-truth mask for {}; excluded from pixel-level evaluation",
                        image.display()
                    );
                    None
                }
            } else {
                None
            };
            items.push(DatasetItem {
                image,
                label,
                defect: defect.clone(),
                mask,
            });
        }
    }
    items.sort_by(|a, b| a.image.cmp(&b.image));
    Ok(DatasetIndex {
        root: root.to_owned(),
        category: category.to_owned(),
        split,
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ::image::{GrayImage, Luma, RgbImage};

    fn touch_png(path: &Path) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        RgbImage::new(4, 4).save(path).unwrap();
    }

    #[test]
    fn single_train_image() {
        let dir = tempfile::tempdir().unwrap();
        touch_png(&dir.path().join("cat/train/good/000.png"));
        let idx = scan_dataset(dir.path(), "cat", Split::Train).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.items[0].label, Label::Normal);
    }

    #[test]
    fn test_split_counts_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let cat = dir.path().join("cat");
        for i in 0..10 {
            touch_png(&cat.join(format!("test/good/{i:03}.png")));
        }
        for i in 0..5 {
            touch_png(&cat.join(format!("test/crack/{i:03}.png")));
        }
        // masks for only three of the five cracks
        for i in 0..3 {
            let p = cat.join(format!("ground_truth/crack/{i:03}_mask.png"));
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            GrayImage::from_pixel(4, 4, Luma([255])).save(&p).unwrap();
        }
        let idx = scan_dataset(dir.path(), "cat", Split::Test).unwrap();
        assert_eq!(idx.len(), 15);
        assert_eq!(idx.anomalous_count(), 5);
        let masked = idx.items.iter().filter(|i| i.mask.is_some()).count();
        assert_eq!(masked, 3);
        let paths: Vec<_> = idx.items.iter().map(|i| i.image.clone()).collect();
        let mut sorted = paths.clone();
        sorted.sort();
        assert_eq!(paths, sorted);
    }

    #[test]
    fn missing_category_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = scan_dataset(dir.path(), "nope", Split::Train).unwrap_err();
        assert!(err.to_string().contains("category not found"));
    }

    #[test]
    fn non_image_files_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        touch_png(&dir.path().join("cat/train/good/a.PNG"));
        fs::write(dir.path().join("cat/train/good/notes.txt"), "x").unwrap();
        let idx = scan_dataset(dir.path(), "cat", Split::Train).unwrap();
        assert_eq!(idx.len(), 1);
    }

    #[test]
    fn anomalies_in_train_split_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        touch_png(&dir.path().join("cat/train/good/a.png"));
        touch_png(&dir.path().join("cat/train/scratch/b.png"));
        assert!(matches!(
            scan_dataset(dir.path(), "cat", Split::Train),
            Err(Error::NonNormalTrainItem(_))
        ));
    }
}
