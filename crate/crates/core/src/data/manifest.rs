use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ManifestEntry {
    pub ldr: PathBuf,
    pub hdr: PathBuf,
    pub exposure_tag: Option<String>,
}

impl ManifestEntry {
    /// Stable identifier used in reports.
    pub fn id(&self) -> String {
        let stem = self.hdr.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match &self.exposure_tag {
            Some(t) => format!("{stem}@{t}"),
            None => stem,
        }
    }
}

/// Text manifest: one `<ldr>\t<hdr>[\t<tag>]` line per pair, paths relative
/// to `root`. Blank lines and `#` comments are ignored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert((&e.ldr, &e.hdr)) {
                return Err(Error::Data(format!(
                    "duplicate pair ({}, {})",
                    e.ldr.display(),
                    e.hdr.display()
                )));
            }
        }
        Ok(Self { name: name.into(), root: root.into(), entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parse(text: &str, name: &str, root: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let entry = match fields.as_slice() {
                [l, h] => ManifestEntry { ldr: l.into(), hdr: h.into(), exposure_tag: None },
                [l, h, t] => ManifestEntry { ldr: l.into(), hdr: h.into(), exposure_tag: Some(t.to_string()) },
                _ => {
                    return Err(Error::Data(format!(
                        "{name}:{}: expected 2 or 3 tab-separated fields, found {}",
                        lineno + 1,
                        fields.len()
                    )))
                }
            };
            if entry.ldr.as_os_str().is_empty() || entry.hdr.as_os_str().is_empty() {
                return Err(Error::Data(format!("{name}:{}: empty path", lineno + 1)));
            }
            entries.push(entry);
        }
        Self::new(name, root, entries)
    }

    /// Loads a manifest file; paths resolve against its directory and must
    /// exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "manifest".into());
        let m = Self::parse(&text, &name, &root)?;
        m.check_paths()?;
        Ok(m)
    }

    pub fn check_paths(&self) -> Result<()> {
        for e in &self.entries {
            for p in [&e.ldr, &e.hdr] {
                let full = self.root.join(p);
                if !full.exists() {
                    return Err(Error::Data(format!("{}: missing file {}", self.name, full.display())));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&e.ldr.to_string_lossy());
            s.push('\t');
            s.push_str(&e.hdr.to_string_lossy());
            if let Some(t) = &e.exposure_tag {
                s.push('\t');
                s.push_str(t);
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub(crate) fn subset(&self, name: String, idx: &[usize]) -> Self {
        Self { name, root: self.root.clone(), entries: idx.iter().map(|&i| self.entries[i].clone()).collect() }
    }
}

/// Which exposure of a multi-exposure group is kept as the single LDR input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExposurePick {
    First,
    Middle,
    Last,
    Tag(String),
}

impl ExposurePick {
    pub fn parse(s: &str) -> Self {
        match s {
            "first" => Self::First,
            "middle" => Self::Middle,
            "last" => Self::Last,
            other => Self::Tag(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Self::First => "first",
            Self::Middle => "middle",
            Self::Last => "last",
            Self::Tag(t) => t,
        }
    }
}

/// Reduces every group of entries sharing an HDR target to one entry.
/// Tags order numerically when they parse as numbers, lexically otherwise;
/// `Middle` takes the lower middle of an even-sized group; single entries
/// are always kept.
pub fn select_single_exposure(m: &DatasetManifest, pick: &ExposurePick) -> Result<DatasetManifest> {
    let mut groups: BTreeMap<&Path, Vec<usize>> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, e) in m.entries.iter().enumerate() {
        let g = groups.entry(e.hdr.as_path()).or_default();
        if g.is_empty() {
            order.push(e.hdr.as_path());
        }
        g.push(i);
    }
    let key = |i: &usize| {
        let t = m.entries[*i].exposure_tag.clone().unwrap_or_default();
        (t.parse::<f64>().unwrap_or(f64::NAN), t)
    };
    let mut keep = Vec::new();
    for hdr in order {
        let mut g = groups[hdr].clone();
        g.sort_by(|a, b| {
            let (fa, ta) = key(a);
            let (fb, tb) = key(b);
            fa.partial_cmp(&fb).unwrap_or(std::cmp::Ordering::Equal).then(ta.cmp(&tb))
        });
        let chosen = match pick {
            _ if g.len() == 1 => g[0],
            ExposurePick::First => g[0],
            ExposurePick::Middle => g[(g.len() - 1) / 2],
            ExposurePick::Last => g[g.len() - 1],
            ExposurePick::Tag(t) => *g
                .iter()
                .find(|&&i| m.entries[i].exposure_tag.as_deref() == Some(t.as_str()))
                .ok_or_else(|| Error::Data(format!("{}: no exposure tagged `{t}` for {}", m.name, hdr.display())))?,
        };
        keep.push(chosen);
    }
    Ok(m.subset(m.name.clone(), &keep))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_serialise() {
        let text = "# comment\na.png\ta.hdr\nb.png\tb.hdr\t+1\n\n";
        let m = DatasetManifest::parse(text, "t", Path::new("/x")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[1].exposure_tag.as_deref(), Some("+1"));
        assert_eq!(m.to_text(), "a.png\ta.hdr\nb.png\tb.hdr\t+1\n");
        let again = DatasetManifest::parse(&m.to_text(), "t", Path::new("/x")).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn rejects_duplicates_and_bad_lines() {
        assert!(DatasetManifest::parse("a\tb\na\tb\n", "t", Path::new(".")).is_err());
        assert!(DatasetManifest::parse("only-one-field\n", "t", Path::new(".")).is_err());
        assert!(DatasetManifest::parse("a\tb\tc\td\n", "t", Path::new(".")).is_err());
    }

    #[test]
    fn load_requires_existing_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("m.txt"), "a.png\ta.hdr\n").unwrap();
        assert!(DatasetManifest::load(&dir.path().join("m.txt")).is_err());
        std::fs::write(dir.path().join("a.png"), b"").unwrap();
        std::fs::write(dir.path().join("a.hdr"), b"").unwrap();
        let m = DatasetManifest::load(&dir.path().join("m.txt")).unwrap();
        assert_eq!(m.name, "m");
    }

    #[test]
    fn middle_exposure_is_default_pick() {
        let text = "s1_p2.png\ts1.hdr\t2\ns1_m2.png\ts1.hdr\t-2\ns1_0.png\ts1.hdr\t0\ns2.png\ts2.hdr\n";
        let m = DatasetManifest::parse(text, "t", Path::new(".")).unwrap();
        let one = select_single_exposure(&m, &ExposurePick::Middle).unwrap();
        assert_eq!(one.len(), 2);
        assert_eq!(one.entries[0].ldr, PathBuf::from("s1_0.png"));
        let first = select_single_exposure(&m, &ExposurePick::First).unwrap();
        assert_eq!(first.entries[0].ldr, PathBuf::from("s1_m2.png"));
        let tagged = select_single_exposure(&m, &ExposurePick::Tag("2".into())).unwrap();
        assert!(tagged.entries[0].ldr.ends_with("s1_p2.png"));
    }
}
