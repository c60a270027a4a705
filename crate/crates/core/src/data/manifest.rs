use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "path,lens_class,sensor,dataset";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Attack,
}

impl Label {
    /// Binary target with attack as the positive class.
    pub fn target(self) -> usize {
        match self {
            Label::Bonafide => 0,
            Label::Attack => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LensClass {
    Normal,
    Soft,
    Textured,
    Print,
    Scan,
}

impl LensClass {
    pub const ALL: [LensClass; 5] = [
        LensClass::Normal,
        LensClass::Soft,
        LensClass::Textured,
        LensClass::Print,
        LensClass::Scan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LensClass::Normal => "normal",
            LensClass::Soft => "soft",
            LensClass::Textured => "textured",
            LensClass::Print => "print",
            LensClass::Scan => "scan",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LensClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LensClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LensClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown lens class {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "" | "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

/// How soft contact lenses are labelled; everything else is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelabelPolicy {
    pub soft_lens_as: Label,
}

impl Default for RelabelPolicy {
    fn default() -> Self {
        RelabelPolicy { soft_lens_as: Label::Attack }
    }
}

impl RelabelPolicy {
    pub fn label(&self, class: LensClass) -> Label {
        match class {
            LensClass::Normal => Label::Bonafide,
            LensClass::Soft => self.soft_lens_as,
            LensClass::Textured | LensClass::Print | LensClass::Scan => Label::Attack,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub label: Label,
    pub lens_class: LensClass,
    pub sensor: String,
    pub dataset: String,
    pub split: Split,
}

/// Parses manifest text. Relative paths are joined onto `base`.
pub fn parse_manifest(text: &str, base: &Path, policy: RelabelPolicy) -> Result<Vec<SampleRecord>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(csv_error)?.clone();
    let columns: Vec<&str> = header.iter().collect();
    let has_split = match columns.as_slice() {
        ["path", "lens_class", "sensor", "dataset"] => false,
        ["path", "lens_class", "sensor", "dataset", "split"] => true,
        _ => return Err(Error::Data(format!("manifest header must be {MANIFEST_HEADER}[,split], got {columns:?}"))),
    };
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let fields = row.map_err(|e| Error::Data(format!("row {row_no}: {e}")))?;
        let lens_class: LensClass = fields[1]
            .parse()
            .map_err(|_| Error::Data(format!("row {row_no}: unknown lens class {:?}", &fields[1])))?;
        let split = if has_split {
            fields[4].parse().map_err(|e: Error| Error::Data(format!("row {row_no}: {e}")))?
        } else {
            Split::Unassigned
        };
        let path = Path::new(&fields[0]);
        records.push(SampleRecord {
            path: if path.is_absolute() { path.to_path_buf() } else { base.join(path) },
            label: policy.label(lens_class),
            lens_class,
            sensor: fields[2].to_string(),
            dataset: fields[3].to_string(),
            split,
        });
    }
    Ok(records)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Data(format!("manifest: {e}"))
}

/// Reads a manifest and checks that every referenced image exists.
pub fn load_manifest(path: &Path, policy: RelabelPolicy) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let records = parse_manifest(&text, base, policy)?;
    let missing: Vec<PathBuf> = records.iter().filter(|r| !r.path.is_file()).map(|r| r.path.clone()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    Ok(records)
}

/// Writes records back as manifest text, with paths relative to `base` when possible.
pub fn format_manifest(records: &[SampleRecord], base: &Path) -> String {
    let with_split = records.iter().any(|r| r.split != Split::Unassigned);
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header: Vec<&str> = MANIFEST_HEADER.split(',').collect();
    if with_split {
        header.push("split");
    }
    w.write_record(&header).expect("in-memory write");
    for r in records {
        let path = r.path.strip_prefix(base).unwrap_or(&r.path).to_string_lossy().into_owned();
        let mut row = vec![path, r.lens_class.to_string(), r.sensor.clone(), r.dataset.clone()];
        if with_split {
            row.push(
                match r.split {
                    Split::Train => "train",
                    Split::Test => "test",
                    Split::Unassigned => "unassigned",
                }
                .to_string(),
            );
        }
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "path,lens_class,sensor,dataset\na.png,soft,Cogent,cli\nb.png,normal,Vista,cli\nc.png,print,Vista,csd\n";

    #[test]
    fn soft_lens_follows_policy() {
        let attack = parse_manifest(TEXT, Path::new("/d"), RelabelPolicy { soft_lens_as: Label::Attack }).unwrap();
        let bona = parse_manifest(TEXT, Path::new("/d"), RelabelPolicy { soft_lens_as: Label::Bonafide }).unwrap();
        assert_eq!(attack[0].label, Label::Attack);
        assert_eq!(bona[0].label, Label::Bonafide);
        assert_eq!(attack[1].label, Label::Bonafide);
        assert_eq!(attack[2].label, Label::Attack);
        assert_eq!(attack[0].path, Path::new("/d/a.png"));
        assert_eq!(attack[2].split, Split::Unassigned);
    }

    #[test]
    fn empty_manifest_is_empty() {
        assert!(parse_manifest("", Path::new("."), RelabelPolicy::default()).unwrap().is_empty());
        assert!(parse_manifest("path,lens_class,sensor,dataset\n", Path::new("."), RelabelPolicy::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn unknown_class_names_row() {
        let text = "path,lens_class,sensor,dataset\na.png,normal,A,x\nb.png,cosmetic,A,x\n";
        let err = parse_manifest(text, Path::new("."), RelabelPolicy::default()).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn split_column_and_round_trip() {
        let text = "path,lens_class,sensor,dataset,split\na.png,textured,LG4000,nd,train\nb.png,normal,LG4000,nd,test\n";
        let recs = parse_manifest(text, Path::new("/r"), RelabelPolicy::default()).unwrap();
        assert_eq!(recs[0].split, Split::Train);
        assert_eq!(recs[1].split, Split::Test);
        assert_eq!(format_manifest(&recs, Path::new("/r")), text);
    }

    #[test]
    fn missing_files_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        std::fs::write(&m, TEXT).unwrap();
        match load_manifest(&m, RelabelPolicy::default()) {
            Err(Error::MissingFiles(p)) => assert_eq!(p.len(), 3),
            other => panic!("{other:?}"),
        }
    }
}
