//! Tab-separated dataset manifests: `path\tid\tlabel`, one image per line.
//! Paths are relative to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imageops::{load_pgm_file, GrayImage};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub id: String,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    /// Sorted distinct labels; a label's class index is its position here.
    pub labels: Vec<String>,
}

impl Manifest {
    /// Builds a manifest from records, enforcing unique ids.
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("empty manifest".into()));
        }
        let mut seen = BTreeSet::new();
        for (i, r) in records.iter().enumerate() {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Manifest {
                    line: i + 1,
                    msg: format!("duplicate id `{}`", r.id),
                });
            }
        }
        let labels: BTreeSet<&str> = records.iter().map(|r| r.label.as_str()).collect();
        let labels = labels.into_iter().map(str::to_string).collect();
        Ok(Self {
            root: root.into(),
            records,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    /// Class index per record, in record order.
    pub fn class_indices(&self) -> Vec<usize> {
        self.records
            .iter()
            .map(|r| {
                self.class_index(&r.label)
                    .expect("label index covers every record")
            })
            .collect()
    }

    pub fn resolve(&self, r: &ManifestRecord) -> PathBuf {
        self.root.join(&r.path)
    }

    pub fn load_images(&self) -> Result<Vec<GrayImage>> {
        self.records
            .iter()
            .map(|r| load_pgm_file(self.resolve(r)))
            .collect()
    }

    /// Deterministic per-class split: within each class (in record order) the
    /// last `round(n·val_fraction)` records go to validation, keeping at least
    /// one training record per class.
    pub fn split(&self, val_fraction: f64) -> Result<Vec<Split>> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::InvalidParam(format!(
                "val_fraction must be in [0, 1), got {val_fraction}"
            )));
        }
        let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            by_class.entry(&r.label).or_default().push(i);
        }
        let mut out = vec![Split::Train; self.records.len()];
        for members in by_class.values() {
            let n = members.len();
            let n_val = ((n as f64 * val_fraction).round() as usize).min(n - 1);
            for &i in &members[n - n_val..] {
                out[i] = Split::Val;
            }
        }
        Ok(out)
    }

    pub fn to_tsv(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{}\t{}\t{}\n", r.path.display(), r.id, r.label))
            .collect()
    }

    /// Map from id to class index.
    pub fn label_map(&self) -> HashMap<String, usize> {
        self.records
            .iter()
            .zip(self.class_indices())
            .map(|(r, c)| (r.id.clone(), c))
            .collect()
    }
}

/// Parses manifest text. Blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str, root: &Path) -> Result<Manifest> {
    let mut records = Vec::new();
    let mut lines_of = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Manifest {
                line: line_no,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        if let Some(empty) = ["path", "id", "label"]
            .iter()
            .zip(&fields)
            .find(|(_, f)| f.is_empty())
        {
            return Err(Error::Manifest {
                line: line_no,
                msg: format!("empty {} field", empty.0),
            });
        }
        records.push(ManifestRecord {
            path: PathBuf::from(fields[0]),
            id: fields[1].to_string(),
            label: fields[2].to_string(),
        });
        lines_of.push(line_no);
    }
    Manifest::new(root, records).map_err(|e| match e {
        // report the physical line, not the record position
        Error::Manifest { line, msg } => Error::Manifest {
            line: lines_of[line - 1],
            msg,
        },
        e => e,
    })
}

/// Loads and validates a manifest, checking that every image file exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = parse_manifest(&text, &root)?;
    for (r, line) in m.records.iter().zip(1..) {
        let p = m.resolve(r);
        if !p.is_file() {
            return Err(Error::Data(format!(
                "manifest record {line} (id `{}`): image {} not found",
                r.id,
                p.display()
            )));
        }
    }
    Ok(m)
}
