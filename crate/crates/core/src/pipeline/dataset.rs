use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEntry {
    pub stem: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

/// Images paired with ground-truth masks by file stem, sorted by stem.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    entries: Vec<DatasetEntry>,
    unmatched: Vec<String>,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let read = std::fs::read_dir(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    let mut out = BTreeMap::new();
    for entry in read {
        let path = entry.map_err(|source| Error::Io { path: dir.to_path_buf(), source })?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png || !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem() {
            out.insert(stem.to_string_lossy().into_owned(), path);
        }
    }
    Ok(out)
}

impl DatasetIndex {
    /// `root/images` + `root/masks` when `root/images` exists; otherwise
    /// `root` holds the images and masks sit in a sibling `masks` directory.
    pub fn discover(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let (images, masks) = if root.join("images").is_dir() {
            (root.join("images"), root.join("masks"))
        } else {
            let sibling = root.parent().unwrap_or(Path::new(".")).join("masks");
            (root.to_path_buf(), sibling)
        };
        Self::from_dirs(&images, masks.is_dir().then_some(masks.as_path()))
    }

    pub fn from_dirs(images: &Path, masks: Option<&Path>) -> Result<Self> {
        let images = png_stems(images)?;
        let mut masks = match masks {
            Some(d) => png_stems(d)?,
            None => BTreeMap::new(),
        };
        let mut unmatched = Vec::new();
        let entries = images
            .into_iter()
            .map(|(stem, image)| {
                let mask = masks.remove(&stem);
                if mask.is_none() {
                    unmatched.push(format!("image without mask: {}", image.display()));
                }
                DatasetEntry { stem, image, mask }
            })
            .collect();
        unmatched.extend(masks.values().map(|p| format!("mask without image: {}", p.display())));
        Ok(Self { entries, unmatched })
    }

    pub fn from_entries(mut entries: Vec<DatasetEntry>) -> Self {
        entries.sort_by(|a, b| a.stem.cmp(&b.stem));
        Self { entries, unmatched: Vec::new() }
    }

    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn unmatched(&self) -> &[String] {
        &self.unmatched
    }
}
