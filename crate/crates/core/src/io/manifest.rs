//! Dataset manifests: one JSON object per line.
//!
//! ```text
//! {"image_path":"p000","annotation_paths":["p000_mask"],"split":"train","author_tags":["A1"]}
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::volume_file::check_volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub annotation_paths: Vec<PathBuf>,
    pub split: Split,
    #[serde(default)]
    pub author_tags: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// Entry with its paths made absolute (or base-relative).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResolvedEntry {
    pub image: PathBuf,
    pub annotations: Vec<PathBuf>,
    pub split: Split,
    pub author_tags: Vec<String>,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// `(train, validation, test)` entry counts.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let count = |s| self.entries.iter().filter(|e| e.split == s).count();
        (count(Split::Train), count(Split::Validation), count(Split::Test))
    }

    pub fn split(&self, split: Split) -> Vec<ResolvedEntry> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| ResolvedEntry {
                image: self.resolve(&e.image_path),
                annotations: e.annotation_paths.iter().map(|a| self.resolve(a)).collect(),
                split: e.split,
                author_tags: e.author_tags.clone(),
            })
            .collect()
    }
}

/// Parses and validates a manifest: every referenced volume must exist with
/// a well-formed header and payload, and no image may appear twice.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut manifest = DatasetManifest {
        base_dir,
        entries: Vec::new(),
    };
    let mut seen: HashMap<PathBuf, (usize, Split)> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line_err = |msg: String| Error::Line {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| line_err(e.to_string()))?;
        if entry.annotation_paths.is_empty() {
            return Err(line_err("entry has no annotation_paths".into()));
        }
        for p in std::iter::once(&entry.image_path).chain(&entry.annotation_paths) {
            check_volume(&manifest.resolve(p)).map_err(|e| line_err(e.to_string()))?;
        }
        let key = normalize(&manifest.resolve(&entry.image_path));
        if let Some((first, split)) = seen.get(&key) {
            return Err(line_err(format!(
                "image {} already listed on line {first} ({split})",
                entry.image_path.display()
            )));
        }
        seen.insert(key, (lineno, entry.split));
        manifest.entries.push(entry);
    }
    Ok(manifest)
}

fn normalize(p: &Path) -> PathBuf {
    let stem = match p.extension().and_then(|e| e.to_str()) {
        Some("json" | "raw") => p.with_extension(""),
        _ => p.to_path_buf(),
    };
    fs::canonicalize(stem.with_extension("json"))
        .map(|c| c.with_extension(""))
        .unwrap_or(stem)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).expect("entry serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
