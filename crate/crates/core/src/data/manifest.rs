use std::fs;
use std::path::{Path, PathBuf};

use super::{read_nifti, write_nifti, LabelVolume, Modality, MultiModalCase};
use crate::error::{Error, Result};

/// One case: FLAIR, T1, T1-CE and T2 paths plus optional labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub case_id: String,
    pub modalities: [PathBuf; 4],
    pub labels: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn new(modalities: [PathBuf; 4], labels: Option<PathBuf>) -> Self {
        Self {
            case_id: case_id_from_path(&modalities[0]),
            modalities,
            labels,
        }
    }
}

/// File name without `.nii`/`.nii.gz`/`.hdr` and without a trailing
/// `_flair`.
pub fn case_id_from_path(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut stem = name.as_str();
    for ext in [".nii.gz", ".nii", ".hdr.gz", ".hdr"] {
        if let Some(s) = stem.strip_suffix(ext) {
            stem = s;
            break;
        }
    }
    for suffix in ["_flair", "-flair", "_FLAIR"] {
        if let Some(s) = stem.strip_suffix(suffix) {
            stem = s;
            break;
        }
    }
    stem.to_string()
}

/// Tab-separated case list. Blank lines and lines starting with `#` are
/// skipped; relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            if !(fields.len() == 4 || fields.len() == 5) || fields.iter().any(|f| f.is_empty()) {
                return Err(Error::Parse(format!(
                    "manifest line {}: expected 4 or 5 tab-separated paths, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let resolve = |f: &str| {
                let p = PathBuf::from(f);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            let modalities = std::array::from_fn(|k| resolve(fields[k]));
            let labels = fields.get(4).map(|f| resolve(f));
            entries.push(ManifestEntry::new(modalities, labels));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.case_id.as_str()) {
                return Err(Error::Parse(format!("duplicate case id `{}`", e.case_id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::at(path))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let mut fields: Vec<String> = e
                .modalities
                .iter()
                .map(|p| p.display().to_string())
                .collect();
            if let Some(l) = &e.labels {
                fields.push(l.display().to_string());
            }
            out.push_str(&fields.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(Error::at(path))?;
        Ok(())
    }

    pub fn find(&self, case_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.case_id == case_id)
    }
}

/// Reads the volumes of one manifest entry.
pub fn load_case(entry: &ManifestEntry) -> Result<MultiModalCase> {
    let [a, b, c, d] = &entry.modalities;
    let modalities = [read_nifti(a)?, read_nifti(b)?, read_nifti(c)?, read_nifti(d)?];
    let labels = match &entry.labels {
        Some(p) => Some(LabelVolume::from_volume(&read_nifti(p)?)?),
        None => None,
    };
    MultiModalCase::new(entry.case_id.clone(), modalities, labels)
}

/// Writes `<case_id>_<modality>.nii.gz` files (plus `<case_id>_seg.nii.gz`
/// when labels are present) into `dir` and returns the matching entry with
/// bare file names.
pub fn write_case(case: &MultiModalCase, dir: &Path) -> Result<ManifestEntry> {
    let mut names = Vec::with_capacity(4);
    for (m, v) in Modality::ALL.iter().zip(&case.modalities) {
        let name = format!("{}_{}.nii.gz", case.case_id, m.suffix());
        write_nifti(v, &dir.join(&name))?;
        names.push(PathBuf::from(name));
    }
    let labels = match &case.labels {
        Some(l) => {
            let name = format!("{}_seg.nii.gz", case.case_id);
            write_nifti(&l.to_volume(), &dir.join(&name))?;
            Some(PathBuf::from(name))
        }
        None => None,
    };
    let modalities: [PathBuf; 4] = names.try_into().expect("four modalities");
    Ok(ManifestEntry {
        case_id: case.case_id.clone(),
        modalities,
        labels,
    })
}
