//! JSON-lines corpus manifest.
//!
//! The first line is a header `{"format": "pagescribe-manifest", "version": 1}`.
//! Every following non-empty line is one entry:
//!
//! | field | type | |
//! |---|---|---|
//! | `split` | `"train"`, `"validate"` or `"test"` | required |
//! | `kind` | `"line"` or `"page"` | required |
//! | `image` | path, relative to the manifest's directory | required |
//! | `transcript` | UTF-8 text | required, non-empty |
//! | `group` | string | optional; entries sharing it must share a split |
//! | `boxes` | `[{x, y, w, h, line_index}]` | optional, pages only |
//! | `line_transcripts` | `[string]` | optional, one per box |

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageprep::{BinaryImage, LineBox};

pub const MANIFEST_FORMAT: &str = "pagescribe-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validate,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validate => "validate",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validate" => Ok(Split::Validate),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Line,
    Page,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub split: Split,
    pub kind: SampleKind,
    pub image: PathBuf,
    pub transcript: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boxes: Vec<LineBox>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub line_transcripts: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory image paths are resolved against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Self {
            root: root.into(),
            entries,
        }
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.image)
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// A copy holding only `split`.
    pub fn subset(&self, split: Split) -> Manifest {
        Manifest::new(self.root.clone(), self.split(split).into_iter().cloned().collect())
    }

    pub fn transcripts(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.transcript.as_str()).collect()
    }

    pub fn load_image(&self, entry: &ManifestEntry) -> Result<BinaryImage> {
        BinaryImage::load(&self.resolve(entry))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let err = |line: usize, msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hline, htext) = lines.next().ok_or_else(|| err(1, "empty manifest".into()))?;
        let header: Header = serde_json::from_str(htext).map_err(|e| err(hline + 1, format!("header: {e}")))?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(err(
                hline + 1,
                format!("unsupported header {} v{}", header.format, header.version),
            ));
        }
        let mut entries = Vec::new();
        let mut seen: HashMap<PathBuf, (Split, usize)> = HashMap::new();
        let mut groups: HashMap<String, Split> = HashMap::new();
        for (i, l) in lines {
            let n = i + 1;
            let mut e: ManifestEntry = serde_json::from_str(l).map_err(|x| err(n, x.to_string()))?;
            if e.transcript.is_empty() {
                return Err(err(n, "empty transcript".into()));
            }
            if e.kind == SampleKind::Line && !e.boxes.is_empty() {
                return Err(err(n, "line entries carry no boxes".into()));
            }
            if !e.line_transcripts.is_empty() && e.line_transcripts.len() != e.boxes.len() {
                return Err(err(
                    n,
                    format!(
                        "{} line transcripts for {} boxes",
                        e.line_transcripts.len(),
                        e.boxes.len()
                    ),
                ));
            }
            let mut order: Vec<usize> = (0..e.boxes.len()).collect();
            order.sort_by_key(|&k| e.boxes[k].line_index);
            if !e.line_transcripts.is_empty() {
                e.line_transcripts = order.iter().map(|&k| e.line_transcripts[k].clone()).collect();
            }
            e.boxes = order.iter().map(|&k| e.boxes[k]).collect();
            for w in e.boxes.windows(2) {
                if w[0].line_index == w[1].line_index || w[0].y >= w[1].y {
                    return Err(err(n, "line_index must increase strictly with y".into()));
                }
            }
            let resolved = root.join(&e.image);
            if let Some(&(split, first)) = seen.get(&resolved) {
                if split != e.split {
                    return Err(Error::Leakage(format!(
                        "{} is listed in {split} (line {first}) and {} (line {n})",
                        e.image.display(),
                        e.split
                    )));
                }
                return Err(err(
                    n,
                    format!("duplicate entry for {} (line {first})", e.image.display()),
                ));
            }
            if let Some(g) = &e.group {
                match groups.get(g) {
                    Some(&s) if s != e.split => {
                        return Err(Error::Leakage(format!(
                            "group {g} appears in both {s} and {} (line {n})",
                            e.split
                        )))
                    }
                    _ => {
                        groups.insert(g.clone(), e.split);
                    }
                }
            }
            if !resolved.exists() {
                return Err(Error::MissingImage(resolved));
            }
            seen.insert(resolved, (e.split, n));
            entries.push(e);
        }
        Ok(Self { root, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
        };
        writeln!(out, "{}", serde_json::to_string(&header)?)?;
        for e in &self.entries {
            writeln!(out, "{}", serde_json::to_string(e)?)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Crops each boxed line out of a page together with its transcript.
pub fn segment_lines(page: &BinaryImage, entry: &ManifestEntry) -> Result<Vec<(BinaryImage, String)>> {
    if entry.line_transcripts.len() != entry.boxes.len() || entry.boxes.is_empty() {
        return Err(Error::Contract(format!(
            "{}: page has {} boxes and {} line transcripts",
            entry.image.display(),
            entry.boxes.len(),
            entry.line_transcripts.len()
        )));
    }
    entry
        .boxes
        .iter()
        .zip(&entry.line_transcripts)
        .map(|(b, t)| Ok((page.crop(b)?, t.clone())))
        .collect()
}
