//! Dataset manifests: one `split filename seed` line per volume.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            _ => Err(format!("unknown split `{s}` (expected train or val)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub split: Split,
    /// As written in the manifest, relative to its directory.
    pub file: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<Entry>,
    /// Directory relative file names resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |why: String| Error::Config(format!("manifest line {}: {why}", i + 1));
            let [split, file, seed] = fields.as_slice() else {
                return Err(bad(format!("expected `split filename seed`, got `{line}`")));
            };
            entries.push(Entry {
                split: split.parse().map_err(bad)?,
                file: file.to_string(),
                seed: seed.parse().map_err(|e| bad(format!("seed `{seed}`: {e}")))?,
            });
        }
        Ok(Manifest {
            entries,
            root: root.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# split filename seed\n");
        for e in &self.entries {
            let _ = writeln!(s, "{} {} {}", e.split.name(), e.file, e.seed);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn path_of(&self, e: &Entry) -> PathBuf {
        self.root.join(&e.file)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}
