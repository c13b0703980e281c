//! Dataset manifests: one tab-separated line per image.
//!
//! ```text
//! # classes: cat,dog,bird
//! images/0001.png	train	cat,difficult:dog
//! images/0002.png	test	bird
//! ```
//!
//! Blank lines and `#` comments are skipped. Without a `# classes:` header
//! the class list is every label seen, sorted.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// As written in the manifest; relative paths resolve against the
    /// manifest's directory.
    pub path: String,
    pub split: Split,
    /// Class indices, in the order written.
    pub labels: Vec<usize>,
    /// Parallel to `labels`.
    pub difficult: Vec<bool>,
    pub line: usize,
}

impl ManifestEntry {
    /// Labels that are not marked difficult.
    pub fn positive_labels(&self) -> Vec<usize> {
        self.labels
            .iter()
            .zip(&self.difficult)
            .filter(|(_, &d)| !d)
            .map(|(&l, _)| l)
            .collect()
    }

    pub fn difficult_labels(&self) -> Vec<usize> {
        self.labels
            .iter()
            .zip(&self.difficult)
            .filter(|(_, &d)| d)
            .map(|(&l, _)| l)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Serialises with an explicit class header; `parse` of the output
    /// yields the same manifest.
    pub fn to_text(&self) -> String {
        let mut out = format!("# classes: {}\n", self.classes.join(","));
        for e in &self.entries {
            let labels: Vec<String> = e
                .labels
                .iter()
                .zip(&e.difficult)
                .map(|(&l, &d)| {
                    if d {
                        format!("difficult:{}", self.classes[l])
                    } else {
                        self.classes[l].clone()
                    }
                })
                .collect();
            out.push_str(&format!("{}\t{}\t{}\n", e.path, e.split, labels.join(",")));
        }
        out
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse(&text, path, root)
}

struct RawLine {
    line: usize,
    path: String,
    split: Split,
    labels: Vec<(String, bool)>,
}

pub fn parse(text: &str, source: &Path, root: PathBuf) -> Result<DatasetManifest> {
    let err = |line: usize, message: String| Error::Manifest {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut header: Option<(usize, Vec<String>)> = None;
    let mut raw = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let line = i + 1;
        let t = l.trim_end_matches('\r');
        if t.trim().is_empty() {
            continue;
        }
        if let Some(rest) = t.trim_start().strip_prefix('#') {
            if let Some(list) = rest.trim().strip_prefix("classes:") {
                if header.is_some() {
                    return Err(err(line, "second classes header".into()));
                }
                let names: Vec<String> = list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                let unique: BTreeSet<&String> = names.iter().collect();
                if unique.len() != names.len() {
                    return Err(err(line, "duplicate class name in header".into()));
                }
                header = Some((line, names));
            }
            continue;
        }
        let fields: Vec<&str> = t.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(line, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let split: Split = fields[1].trim().parse().map_err(|m| err(line, m))?;
        let path = fields[0].trim().to_string();
        if path.is_empty() {
            return Err(err(line, "empty path".into()));
        }
        let mut labels = Vec::new();
        for tok in fields[2].split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, difficult) = match tok.strip_prefix("difficult:") {
                Some(n) => (n.trim(), true),
                None => (tok, false),
            };
            if labels.iter().any(|(n, _): &(String, bool)| n == name) {
                return Err(err(line, format!("label {name:?} repeated")));
            }
            labels.push((name.to_string(), difficult));
        }
        raw.push(RawLine { line, path, split, labels });
    }
    if raw.is_empty() {
        return Err(err(0, "no entries".into()));
    }

    let classes = match header {
        Some((_, names)) => names,
        None => raw
            .iter()
            .flat_map(|r| r.labels.iter().map(|(n, _)| n.clone()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();

    let mut seen: HashMap<&str, (usize, Split)> = HashMap::new();
    let mut entries = Vec::with_capacity(raw.len());
    for r in &raw {
        if let Some(&(first, split)) = seen.get(r.path.as_str()) {
            let message = if split != r.split {
                format!(
                    "{} is in split {} on line {first} and split {} on line {}",
                    r.path, split, r.split, r.line
                )
            } else {
                format!("duplicate path {} (first on line {first})", r.path)
            };
            return Err(err(r.line, message));
        }
        seen.insert(&r.path, (r.line, r.split));
        let mut labels = Vec::with_capacity(r.labels.len());
        let mut difficult = Vec::with_capacity(r.labels.len());
        for (name, d) in &r.labels {
            let &c = index
                .get(name.as_str())
                .ok_or_else(|| err(r.line, format!("unknown label {name:?}")))?;
            labels.push(c);
            difficult.push(*d);
        }
        entries.push(ManifestEntry {
            path: r.path.clone(),
            split: r.split,
            labels,
            difficult,
            line: r.line,
        });
    }
    Ok(DatasetManifest { classes, entries, root })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(text: &str) -> Result<DatasetManifest> {
        parse(text, Path::new("m.tsv"), PathBuf::new())
    }

    #[test]
    fn three_lines_in_order() {
        let m = p("a.png\ttrain\tcat\nb.png\tval\tdog,difficult:cat\nc.png\ttest\t\n").unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.classes, vec!["cat", "dog"]);
        assert_eq!(m.entries[1].labels, vec![1, 0]);
        assert_eq!(m.entries[1].difficult, vec![false, true]);
        assert_eq!(m.entries[1].positive_labels(), vec![1]);
        assert!(m.entries[2].labels.is_empty());
        let again = p(&m.to_text()).unwrap();
        assert_eq!(again.classes, m.classes);
        for (a, b) in again.entries.iter().zip(&m.entries) {
            assert_eq!((&a.path, a.split, &a.labels, &a.difficult), (&b.path, b.split, &b.labels, &b.difficult));
        }
    }

    #[test]
    fn empty_is_rejected() {
        let e = p("# nothing\n\n").unwrap_err().to_string();
        assert!(e.contains("no entries"), "{e}");
    }

    #[test]
    fn two_splits_names_both_lines() {
        let e = p("a.png\ttrain\tx\nb.png\ttrain\tx\na.png\ttest\tx\n").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("line 3"), "{e}");
    }

    #[test]
    fn duplicate_and_unknown() {
        let e = p("a.png\ttrain\tx\na.png\ttrain\tx\n").unwrap_err().to_string();
        assert!(e.contains("m.tsv:2") && e.contains("duplicate"), "{e}");
        let e = p("# classes: x\na.png\ttrain\ty\n").unwrap_err().to_string();
        assert!(e.contains("m.tsv:2") && e.contains("unknown label"), "{e}");
    }
}
