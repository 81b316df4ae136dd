//! Tab-separated dataset lists.
//!
//! One entry per line: `image<TAB>gt` or `image<TAB>gt<TAB>mask`, with
//! paths relative to the manifest's directory. Lines starting with `#` are
//! comments, except `# name: …` and `# size: …`, which carry the dataset
//! name and its resize target.

use std::collections::HashSet;
use std::fs;
use std::path::{Component, Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub image: PathBuf,
    pub gt: PathBuf,
    pub mask: Option<PathBuf>,
}

impl Entry {
    /// File stem of the image, used to name per-image outputs.
    pub fn stem(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub name: String,
    pub size: Option<usize>,
    /// Paths resolved against the manifest's directory.
    pub entries: Vec<Entry>,
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let err = |line: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut m = Manifest {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        size: None,
        entries: Vec::new(),
    };
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once(':') {
                let value = value.trim();
                match key.trim() {
                    "name" => m.name = value.to_string(),
                    "size" => {
                        let size = value
                            .parse()
                            .ok()
                            .filter(|&s| s > 0)
                            .ok_or_else(|| err(line_no, format!("invalid size {value:?}")))?;
                        m.size = Some(size);
                    }
                    _ => {}
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&fields.len()) || fields.iter().any(|f| f.trim().is_empty()) {
            return Err(err(line_no, "expected image, tab, ground truth and an optional tab and mask".into()));
        }
        let resolve = |f: &str| base.join(f.trim());
        let entry = Entry {
            image: resolve(fields[0]),
            gt: resolve(fields[1]),
            mask: fields.get(2).map(|f| resolve(f)),
        };
        for p in [Some(&entry.image), Some(&entry.gt), entry.mask.as_ref()].into_iter().flatten() {
            if !p.is_file() {
                return Err(err(line_no, format!("missing file {}", p.display())));
            }
        }
        if !seen.insert(entry.image.clone()) {
            return Err(err(line_no, format!("duplicate image {}", entry.image.display())));
        }
        m.entries.push(entry);
    }
    Ok(m)
}

impl Manifest {
    /// Manifest text with paths relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let mut out = format!("# name: {}\n", self.name);
        if let Some(s) = self.size {
            out.push_str(&format!("# size: {s}\n"));
        }
        for e in &self.entries {
            let rel = |p: &Path| relative_path(p, base).display().to_string();
            out.push_str(&rel(&e.image));
            out.push('\t');
            out.push_str(&rel(&e.gt));
            if let Some(mask) = &e.mask {
                out.push('\t');
                out.push_str(&rel(mask));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        fs::write(path, self.to_text(base)).map_err(|e| Error::io(path, e))
    }
}

/// `path` expressed relative to `base`; `path` itself when the two share
/// no root.
pub fn relative_path(path: &Path, base: &Path) -> PathBuf {
    let (Ok(p), Ok(b)) = (std::path::absolute(path), std::path::absolute(base)) else {
        return path.to_path_buf();
    };
    fn clean(p: &Path) -> Vec<Component<'_>> {
        let mut out = Vec::new();
        for c in p.components() {
            match c {
                Component::CurDir => {}
                Component::ParentDir if matches!(out.last(), Some(Component::Normal(_))) => {
                    out.pop();
                }
                c => out.push(c),
            }
        }
        out
    }
    let (pc, bc) = (clean(&p), clean(&b));
    if pc.first() != bc.first() {
        return p;
    }
    let common = pc.iter().zip(&bc).take_while(|(a, b)| a == b).count();
    let mut rel = PathBuf::new();
    for _ in common..bc.len() {
        rel.push("..");
    }
    for c in &pc[common..] {
        rel.push(c.as_os_str());
    }
    rel
}
