//! Dataset manifests: line-delimited JSON records describing content and
//! style images and how they pair up.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingMode {
    Cartesian,
    Explicit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub path: PathBuf,
    /// Style category (the 13-style taxonomy); unused for content entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

/// One line of a manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum ManifestLine {
    Header { pairing: PairingMode },
    Content { id: String, path: PathBuf },
    Style {
        id: String,
        path: PathBuf,
        #[serde(default)]
        category: Option<String>,
    },
    Pair { content: String, style: String },
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub pairing: PairingMode,
    pub content: Vec<ImageEntry>,
    pub style: Vec<ImageEntry>,
    /// Explicit (content id, style id) pairs; empty in cartesian mode.
    pub explicit_pairs: Vec<(String, String)>,
}

impl DatasetManifest {
    /// All evaluated (content, style) pairs in manifest order.
    pub fn pairs(&self) -> Vec<(&ImageEntry, &ImageEntry)> {
        match self.pairing {
            PairingMode::Cartesian => self
                .content
                .iter()
                .flat_map(|c| self.style.iter().map(move |s| (c, s)))
                .collect(),
            PairingMode::Explicit => self
                .explicit_pairs
                .iter()
                .map(|(c, s)| {
                    (
                        self.content.iter().find(|e| &e.id == c).unwrap(),
                        self.style.iter().find(|e| &e.id == s).unwrap(),
                    )
                })
                .collect(),
        }
    }
}

/// Parse and validate a manifest. Validation is atomic: every problem in
/// the file is collected and reported together, and nothing partial loads.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Manifest(format!("cannot open `{}`: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));

    let mut pairing = PairingMode::Cartesian;
    let mut content = Vec::new();
    let mut style = Vec::new();
    let mut explicit_pairs = Vec::new();
    let mut problems: Vec<String> = Vec::new();

    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::Manifest(format!("line {lineno}: {e}")))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record: ManifestLine = match serde_json::from_str(trimmed) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("line {lineno}: {e}"));
                continue;
            }
        };
        match record {
            ManifestLine::Header { pairing: p } => pairing = p,
            ManifestLine::Content { id, path } => {
                let resolved = resolve(base, &path);
                if !resolved.exists() {
                    problems.push(format!(
                        "line {lineno}: content `{id}` path `{}` does not exist",
                        resolved.display()
                    ));
                }
                content.push(ImageEntry {
                    id,
                    path: resolved,
                    category: None,
                });
            }
            ManifestLine::Style { id, path, category } => {
                let resolved = resolve(base, &path);
                if !resolved.exists() {
                    problems.push(format!(
                        "line {lineno}: style `{id}` path `{}` does not exist",
                        resolved.display()
                    ));
                }
                style.push(ImageEntry {
                    id,
                    path: resolved,
                    category,
                });
            }
            ManifestLine::Pair { content, style } => explicit_pairs.push((content, style)),
        }
    }

    for (label, list) in [("content", &content), ("style", &style)] {
        let mut seen = BTreeSet::new();
        for e in list.iter() {
            if !seen.insert(e.id.clone()) {
                problems.push(format!("duplicate {label} id `{}`", e.id));
            }
        }
        if list.is_empty() {
            problems.push(format!("no {label} entries"));
        }
    }
    match pairing {
        PairingMode::Cartesian => {
            if !explicit_pairs.is_empty() {
                problems.push("pair records present but pairing mode is cartesian".into());
            }
        }
        PairingMode::Explicit => {
            if explicit_pairs.is_empty() {
                problems.push("explicit pairing mode but no pair records".into());
            }
            for (c, s) in &explicit_pairs {
                if !content.iter().any(|e| &e.id == c) {
                    problems.push(format!("pair references unknown content id `{c}`"));
                }
                if !style.iter().any(|e| &e.id == s) {
                    problems.push(format!("pair references unknown style id `{s}`"));
                }
            }
        }
    }

    if !problems.is_empty() {
        return Err(Error::Manifest(format!(
            "`{}` failed validation:\n  - {}",
            path.display(),
            problems.join("\n  - ")
        )));
    }
    Ok(DatasetManifest {
        pairing,
        content,
        style,
        explicit_pairs,
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, name: &str) {
        std::fs::write(dir.join(name), b"x").unwrap();
    }

    fn write_manifest(dir: &Path, lines: &[&str]) -> PathBuf {
        let path = dir.join("manifest.jsonl");
        std::fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    #[test]
    fn cartesian_mode_expands_all_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let mut lines = Vec::new();
        for i in 0..3 {
            touch(dir.path(), &format!("c{i}.png"));
            touch(dir.path(), &format!("s{i}.png"));
            lines.push(format!(
                r#"{{"kind":"content","id":"c{i}","path":"c{i}.png"}}"#
            ));
            lines.push(format!(
                r#"{{"kind":"style","id":"s{i}","path":"s{i}.png","category":"cat{i}"}}"#
            ));
        }
        let refs: Vec<&str> = lines.iter().map(|s| s.as_str()).collect();
        let path = write_manifest(dir.path(), &refs);
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.pairing, PairingMode::Cartesian);
        assert_eq!(m.pairs().len(), 9);
        assert_eq!(m.style[1].category.as_deref(), Some("cat1"));
    }

    #[test]
    fn explicit_mode_keeps_listed_pairs_only() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "c.png");
        touch(dir.path(), "s.png");
        let path = write_manifest(
            dir.path(),
            &[
                r#"{"kind":"header","pairing":"explicit"}"#,
                r#"{"kind":"content","id":"c","path":"c.png"}"#,
                r#"{"kind":"style","id":"s","path":"s.png"}"#,
                r#"{"kind":"pair","content":"c","style":"s"}"#,
            ],
        );
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.pairs().len(), 1);
        let (c, s) = m.pairs()[0];
        assert_eq!((c.id.as_str(), s.id.as_str()), ("c", "s"));
    }

    #[test]
    fn validation_is_atomic_and_lists_every_problem() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "c.png");
        let path = write_manifest(
            dir.path(),
            &[
                r#"{"kind":"content","id":"c","path":"c.png"}"#,
                r#"{"kind":"content","id":"c","path":"c.png"}"#,
                r#"{"kind":"style","id":"s","path":"missing.png"}"#,
                r#"not json"#,
            ],
        );
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("duplicate content id `c`"), "{err}");
        assert!(err.contains("missing.png"), "{err}");
        assert!(err.contains("line 4"), "{err}");
    }

    #[test]
    fn empty_content_list_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "s.png");
        let path = write_manifest(dir.path(), &[r#"{"kind":"style","id":"s","path":"s.png"}"#]);
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("no content entries"), "{err}");
    }
}
