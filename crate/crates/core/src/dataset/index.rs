use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// File extensions considered images when scanning a class directory.
pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl DatasetIndex {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn absolute_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.samples[i].path)
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<fs::DirEntry>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

/// Indexes `<root>/<class>/<image>`; classes are numbered in lexicographic
/// order of their directory names, files within a class likewise.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    for entry in sorted_entries(root)? {
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry
            .file_name()
            .into_string()
            .map_err(|n| Error::Data(format!("class directory name {n:?} is not valid UTF-8")))?;
        if name.starts_with('.') {
            continue;
        }
        let label = class_names.len();
        let before = samples.len();
        for file in sorted_entries(&path)? {
            let p = file.path();
            if p.is_file() && is_image(&p) {
                samples.push(Sample {
                    path: PathBuf::from(&name).join(file.file_name()),
                    label,
                });
            }
        }
        if samples.len() == before {
            return Err(Error::Data(format!("class directory {name:?} contains no images")));
        }
        class_names.push(name);
    }
    if class_names.is_empty() {
        return Err(Error::Data(format!("{} has no class subdirectories", root.display())));
    }

    // header-level decode check, so that a broken file fails here rather than mid-training
    let broken: Vec<String> = samples
        .par_iter()
        .filter_map(|s| {
            let full = root.join(&s.path);
            image::image_dimensions(&full)
                .err()
                .map(|e| format!("{} ({e})", full.display()))
        })
        .collect();
    if !broken.is_empty() {
        return Err(Error::Data(format!("undecodable images: {}", broken.join(", "))));
    }

    Ok(DatasetIndex {
        root: root.to_path_buf(),
        samples,
        class_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path) {
        image::RgbImage::from_pixel(3, 2, image::Rgb([10, 20, 30]))
            .save(path)
            .unwrap();
    }

    #[test]
    fn lexicographic_classes() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["b", "a"] {
            fs::create_dir(dir.path().join(class)).unwrap();
            write_png(&dir.path().join(class).join("x.png"));
        }
        fs::write(dir.path().join("README.txt"), "not a class").unwrap();
        let idx = scan_dataset(dir.path()).unwrap();
        assert_eq!(idx.class_names, ["a", "b"]);
        assert_eq!(idx.samples[0].path, Path::new("a/x.png"));
        assert_eq!(idx.labels(), [0, 1]);
    }

    #[test]
    fn single_class_single_image() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("a")).unwrap();
        write_png(&dir.path().join("a/1.png"));
        let idx = scan_dataset(dir.path()).unwrap();
        assert_eq!((idx.class_count(), idx.len()), (1, 1));
    }

    #[test]
    fn empty_class_is_named() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("a")).unwrap();
        write_png(&dir.path().join("a/1.png"));
        fs::create_dir(dir.path().join("empty_one")).unwrap();
        let err = scan_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("empty_one"), "{err}");
    }

    #[test]
    fn broken_file_is_listed() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("a")).unwrap();
        write_png(&dir.path().join("a/ok.png"));
        fs::write(dir.path().join("a/bad.png"), b"definitely not a png").unwrap();
        let err = scan_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("bad.png") && !err.contains("ok.png"), "{err}");
    }
}
