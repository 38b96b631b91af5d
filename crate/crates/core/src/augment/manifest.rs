use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Image path relative to the manifest's directory.
    pub path: PathBuf,
    pub text: String,
}

/// `relative/path.pgm<TAB>transcription`, one record per line. Blank lines
/// are ignored; transcriptions may not contain tabs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.split('\n').enumerate() {
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::format("manifest", format!("line {}: {msg}", i + 1));
            let (path, label) = line
                .split_once('\t')
                .ok_or_else(|| bad("missing tab separator"))?;
            if path.trim().is_empty() {
                return Err(bad("empty image path"));
            }
            if label.contains('\t') {
                return Err(bad("transcription contains a tab"));
            }
            if label.contains('\r') {
                return Err(bad("transcription contains a carriage return"));
            }
            entries.push(ManifestEntry {
                path: PathBuf::from(path),
                text: label.to_string(),
            });
        }
        Ok(Self {
            entries,
            root: PathBuf::new(),
        })
    }

    pub fn render(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            let path = e
                .path
                .to_str()
                .ok_or_else(|| Error::format("manifest", "non UTF-8 path"))?;
            if path.contains(['\t', '\n']) || e.text.contains(['\t', '\n', '\r']) {
                return Err(Error::format(
                    "manifest",
                    format!("entry {path:?} contains a tab or newline"),
                ));
            }
            writeln!(out, "{path}\t{}", e.text).expect("writing to a String");
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.render()?).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.text.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let m = Manifest::parse("a/1.pgm\thello world\r\n\nb.pgm\tà é\n").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[0].text, "hello world");
        assert_eq!(m.entries[1].path, PathBuf::from("b.pgm"));
        assert_eq!(m.render().unwrap(), "a/1.pgm\thello world\nb.pgm\tà é\n");
        assert_eq!(Manifest::parse(&m.render().unwrap()).unwrap(), m);
    }

    #[test]
    fn empty_transcriptions_are_allowed() {
        assert_eq!(Manifest::parse("x.pgm\t\n").unwrap().entries[0].text, "");
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(Manifest::parse("no-tab-here\n").is_err());
        assert!(Manifest::parse("\tlabel\n").is_err());
        assert!(Manifest::parse("a.pgm\tx\ty\n").is_err());
        assert!(Manifest::parse("a.pgm\tx\r\r\n").is_err());
    }

    #[test]
    fn load_resolves_against_parent() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.tsv");
        std::fs::write(&p, "img/0.pgm\tab\n").unwrap();
        let m = Manifest::load(&p).unwrap();
        assert_eq!(m.resolve(&m.entries[0]), dir.path().join("img/0.pgm"));
    }
}
