//! JSON-lines dataset manifest: a header line followed by one annotation
//! record per line.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use miml_core::pairs::PairGroup;
use miml_core::qes::QesConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA: &str = "miml-manifest";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub schema: String,
    pub version: u32,
    pub t_high: f64,
    pub t_low: f64,
    pub keep_threshold: f64,
}

impl Header {
    pub fn new(cfg: &QesConfig) -> Self {
        Self { schema: SCHEMA.into(), version: VERSION, t_high: cfg.t_high, t_low: cfg.t_low, keep_threshold: cfg.keep_threshold }
    }

    pub fn qes_config(&self) -> QesConfig {
        QesConfig { t_high: self.t_high, t_low: self.t_low, keep_threshold: self.keep_threshold }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "SPG")]
    Spg,
    #[serde(rename = "SDG")]
    Sdg,
}

impl From<PairGroup> for Group {
    fn from(g: PairGroup) -> Self {
        match g {
            PairGroup::Spg => Group::Spg,
            PairGroup::Sdg => Group::Sdg,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub id: String,
    pub probe_path: String,
    pub reference_path: String,
    pub group: Option<Group>,
    /// Relative to the manifest's directory.
    pub mask_path: Option<String>,
    /// Rounded to four decimals.
    pub qes: f64,
    pub retained: bool,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// 32 lowercase hex digits.
    pub md5: String,
    /// 16 lowercase hex digits.
    pub phash: String,
    pub source: String,
}

pub fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn is_hex(s: &str, len: usize) -> bool {
    s.len() == len && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

impl AnnotationRecord {
    pub fn check(&self, header: &Header) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if !is_hex(&self.md5, 32) {
            return Err(format!("md5 `{}` is not 32 lowercase hex digits", self.md5));
        }
        if !is_hex(&self.phash, 16) {
            return Err(format!("phash `{}` is not 16 lowercase hex digits", self.phash));
        }
        if !(0.0..=1.0).contains(&self.qes) {
            return Err(format!("qes {} outside [0, 1]", self.qes));
        }
        if round4(self.qes) != self.qes {
            return Err(format!("qes {} has more than four decimals", self.qes));
        }
        if self.retained != (self.qes > header.keep_threshold) {
            return Err(format!("retained = {} but qes {} vs keep_threshold {}", self.retained, self.qes, header.keep_threshold));
        }
        if self.status == Status::Failed && (self.mask_path.is_some() || self.retained) {
            return Err("failed annotation must have no mask and not be retained".into());
        }
        if self.status == Status::Ok && self.group.is_none() {
            return Err("successful annotation needs a group".into());
        }
        Ok(())
    }
}

/// Appends records one line at a time, enforcing id and md5 uniqueness.
pub struct ManifestWriter {
    path: PathBuf,
    header: Header,
    file: File,
    ids: HashSet<String>,
    md5s: HashSet<String>,
}

impl ManifestWriter {
    /// Creates (truncating) a manifest with the given header.
    pub fn create(path: &Path, header: Header) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.into(), header, file, ids: HashSet::new(), md5s: HashSet::new() })
    }

    /// Opens an existing manifest for appending after validating it.
    pub fn append(path: &Path) -> Result<Self> {
        let (header, records) = load_manifest(path)?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        let ids = records.iter().map(|r| r.id.clone()).collect();
        let md5s = records.iter().map(|r| r.md5.clone()).collect();
        Ok(Self { path: path.into(), header, file, ids, md5s })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn push(&mut self, record: &AnnotationRecord) -> Result<()> {
        let bad = |message: String| Error::Manifest { path: self.path.clone(), line: self.ids.len() + 2, message };
        record.check(&self.header).map_err(bad)?;
        if self.ids.contains(&record.id) {
            return Err(bad(format!("duplicate id `{}`", record.id)));
        }
        if self.md5s.contains(&record.md5) {
            return Err(bad(format!("duplicate md5 {}", record.md5)));
        }
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.ids.insert(record.id.clone());
        self.md5s.insert(record.md5.clone());
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn write_manifest(path: &Path, header: Header, records: &[AnnotationRecord]) -> Result<()> {
    let mut w = ManifestWriter::create(path, header)?;
    for r in records {
        w.push(r)?;
    }
    w.flush()
}

/// Reads and validates a manifest. An empty file is an empty manifest with
/// the default header.
pub fn load_manifest(path: &Path) -> Result<(Header, Vec<AnnotationRecord>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let bad = |line: usize, message: String| Error::Manifest { path: path.into(), line, message };
    let header: Header = loop {
        match lines.next() {
            None => return Ok((Header::new(&QesConfig::default()), Vec::new())),
            Some((i, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| bad(i + 1, format!("bad header: {e}")))?;
            }
        }
    };
    if header.schema != SCHEMA || header.version != VERSION {
        return Err(bad(1, format!("unsupported schema {} v{}", header.schema, header.version)));
    }
    header.qes_config().validate().map_err(|e| bad(1, e.to_string()))?;
    let mut records = Vec::new();
    let (mut ids, mut md5s) = (HashSet::new(), HashSet::new());
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?;
        rec.check(&header).map_err(|m| bad(i + 1, m))?;
        if !ids.insert(rec.id.clone()) {
            return Err(bad(i + 1, format!("duplicate id `{}`", rec.id)));
        }
        if !md5s.insert(rec.md5.clone()) {
            return Err(bad(i + 1, format!("duplicate md5 {}", rec.md5)));
        }
        records.push(rec);
    }
    Ok((header, records))
}

/// Also checks that every referenced mask file exists next to the manifest.
pub fn validate_manifest(path: &Path) -> Result<(Header, Vec<AnnotationRecord>)> {
    let (header, records) = load_manifest(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    for (i, r) in records.iter().enumerate() {
        if let Some(m) = &r.mask_path {
            if !dir.join(m).is_file() {
                return Err(Error::Manifest { path: path.into(), line: i + 2, message: format!("mask file `{m}` missing") });
            }
        }
    }
    Ok((header, records))
}
