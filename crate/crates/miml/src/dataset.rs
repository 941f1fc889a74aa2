//! On-disk datasets: a directory of PNGs indexed by a JSON-lines file.
//!
//! Pair datasets use `pairs.jsonl`, single-image datasets use `samples.jsonl`.
//! Paths inside an index are relative to its directory.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use miml_core::image::{BinaryMask, ImageTensor};
use miml_core::jitter::{JitterOp, JitterRecord, TextureOp};
use miml_core::pairs::{describe, PairGroup, PairSample};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_binary, load_image, save_binary, save_image};
use crate::manifest::Group;

pub const PAIRS_INDEX: &str = "pairs.jsonl";
pub const SAMPLES_INDEX: &str = "samples.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub id: String,
    pub probe: String,
    pub reference: String,
    pub group: Group,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_mask: Option<String>,
    #[serde(default)]
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default)]
    pub source: String,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Manifest { path: path.into(), line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.into(), out: BufWriter::new(file) })
    }

    pub fn push<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value).expect("entry serializes");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Writes the images of `pair` under `dir` and returns its index entry.
pub fn store_pair(dir: &Path, id: &str, pair: &PairSample) -> Result<PairEntry> {
    let rel = |suffix: &str| format!("{id}_{suffix}.png");
    save_image(&dir.join(rel("probe")), &pair.probe)?;
    save_image(&dir.join(rel("reference")), &pair.reference)?;
    let store_mask = |m: &Option<BinaryMask>, suffix: &str| -> Result<Option<String>> {
        m.as_ref().map(|m| save_binary(&dir.join(rel(suffix)), m).map(|_| rel(suffix))).transpose()
    };
    let gt_mask = store_mask(&pair.gt_mask, "mask")?;
    let reference_mask = store_mask(&pair.reference_mask, "reference_mask")?;
    Ok(PairEntry {
        id: id.into(),
        probe: rel("probe"),
        reference: rel("reference"),
        group: pair.group.into(),
        gt_mask,
        reference_mask,
        provenance: describe(&pair.provenance),
    })
}

/// A pair read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedPair {
    pub entry: PairEntry,
    pub probe: ImageTensor,
    pub reference: ImageTensor,
    pub gt_mask: Option<BinaryMask>,
    pub reference_mask: Option<BinaryMask>,
}

impl LoadedPair {
    pub fn group(&self) -> PairGroup {
        match self.entry.group {
            Group::Spg => PairGroup::Spg,
            Group::Sdg => PairGroup::Sdg,
        }
    }
}

pub fn pair_entries(dir: &Path) -> Result<Vec<PairEntry>> {
    read_jsonl(&dir.join(PAIRS_INDEX))
}

pub fn load_pair(dir: &Path, entry: &PairEntry) -> Result<LoadedPair> {
    let mask = |m: &Option<String>| m.as_ref().map(|p| load_binary(&dir.join(p))).transpose();
    Ok(LoadedPair {
        probe: load_image(&dir.join(&entry.probe))?,
        reference: load_image(&dir.join(&entry.reference))?,
        gt_mask: mask(&entry.gt_mask)?,
        reference_mask: mask(&entry.reference_mask)?,
        entry: entry.clone(),
    })
}

pub fn load_pairs(dir: &Path) -> Result<Vec<LoadedPair>> {
    pair_entries(dir)?.iter().map(|e| load_pair(dir, e)).collect()
}

pub fn sample_entries(dir: &Path) -> Result<Vec<SampleEntry>> {
    read_jsonl(&dir.join(SAMPLES_INDEX))
}

/// Images with their optional ground-truth masks.
pub fn load_samples(dir: &Path) -> Result<Vec<(SampleEntry, ImageTensor, Option<BinaryMask>)>> {
    sample_entries(dir)?
        .into_iter()
        .map(|e| {
            let image = load_image(&dir.join(&e.image))?;
            let mask = e.mask.as_ref().map(|m| load_binary(&dir.join(m))).transpose()?;
            Ok((e, image, mask))
        })
        .collect()
}

pub fn store_sample(dir: &Path, id: &str, image: &ImageTensor, mask: Option<&BinaryMask>, source: String) -> Result<SampleEntry> {
    let image_rel = format!("{id}.png");
    save_image(&dir.join(&image_rel), image)?;
    let mask = mask
        .map(|m| {
            let rel = format!("{id}_mask.png");
            save_binary(&dir.join(&rel), m).map(|_| rel)
        })
        .transpose()?;
    Ok(SampleEntry { id: id.into(), image: image_rel, mask, source })
}

/// Human-readable summary of a jitter record's edits.
pub fn describe_jitter(record: &JitterRecord) -> String {
    let objects: Vec<String> = record
        .objects
        .iter()
        .map(|o| {
            let ops: Vec<String> = o
                .ops
                .iter()
                .map(|op| match op {
                    JitterOp::Size { scale } => format!("size x{scale:.3}"),
                    JitterOp::Exposure { gain } => format!("exposure x{gain:.3}"),
                    JitterOp::Texture { ops } => {
                        let t: Vec<String> = ops
                            .iter()
                            .map(|t| match t {
                                TextureOp::Jpeg(q) => format!("jpeg q={q}"),
                                TextureOp::ReverseJpeg => "deblock".into(),
                                TextureOp::Blur(s) => format!("blur s={s:.2}"),
                            })
                            .collect();
                        format!("texture [{}]", t.join(", "))
                    }
                })
                .collect();
            format!("{} band={}", ops.join(" + "), o.band)
        })
        .collect();
    objects.join("; ")
}
