//! Construction of the two training manifests: `dataset_1` holds the raw
//! training images, `dataset_2` additionally holds one background-removed
//! copy of every training image that passed the gate.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, SplitAssignment, SplitManifest};
use crate::error::{Error, Result};
use crate::segmenter::{segmented_file_name, GateVerdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Raw,
    BackgroundRemoved,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Raw => "raw",
            Variant::BackgroundRemoved => "background_removed",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "raw" => Ok(Variant::Raw),
            "background_removed" => Ok(Variant::BackgroundRemoved),
            other => Err(Error::InvalidInput(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Dataset1,
    Dataset2,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Dataset1 => "dataset_1",
            DatasetName::Dataset2 => "dataset_2",
        }
    }

    pub fn parse(s: &str) -> Result<DatasetName> {
        match s {
            "dataset_1" => Ok(DatasetName::Dataset1),
            "dataset_2" => Ok(DatasetName::Dataset2),
            other => Err(Error::InvalidInput(format!("unknown dataset name {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub path: PathBuf,
    pub label: Label,
    pub variant: Variant,
}

/// An ordered training manifest: raw entries first (split-manifest order),
/// then background-removed entries in image_id order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: DatasetName,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn counts(&self) -> BTreeMap<(Label, Variant), usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry((e.label, e.variant)).or_insert(0) += 1;
        }
        counts
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "# name={}", self.name.as_str()).map_err(|e| Error::io(path, e))?;
        writeln!(file, "image_id,path,label,variant").map_err(|e| Error::io(path, e))?;
        for e in &self.entries {
            let p = e.path.to_string_lossy();
            if p.contains(',') || e.image_id.contains(',') {
                return Err(Error::InvalidInput(format!("manifest fields must not contain commas: {p:?}")));
            }
            writeln!(file, "{},{},{},{}", e.image_id, p, e.label.as_str(), e.variant.as_str())
                .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut name = None;
        let mut entries = Vec::new();
        let mut saw_header = false;
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("name=") {
                    name = Some(DatasetName::parse(v)?);
                }
                continue;
            }
            if !saw_header {
                if line != "image_id,path,label,variant" {
                    return Err(Error::InvalidInput(format!("bad dataset manifest header {line:?}")));
                }
                saw_header = true;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::InvalidInput(format!("bad dataset manifest row {line:?}")));
            }
            entries.push(ManifestEntry {
                image_id: fields[0].to_string(),
                path: PathBuf::from(fields[1]),
                label: fields[2].parse()?,
                variant: Variant::parse(fields[3])?,
            });
        }
        let name = name.ok_or_else(|| {
            Error::InvalidInput(format!("dataset manifest {} lacks a # name= line", path.display()))
        })?;
        Ok(DatasetManifest { name, entries })
    }
}

/// All and only the raw training images.
pub fn build_dataset_1(split: &SplitManifest) -> Result<DatasetManifest> {
    let entries: Vec<ManifestEntry> = split
        .records_in(SplitAssignment::Train)
        .map(|r| ManifestEntry {
            image_id: r.image_id.clone(),
            path: r.path.clone(),
            label: r.label,
            variant: Variant::Raw,
        })
        .collect();
    if entries.is_empty() {
        return Err(Error::InvalidInput("train split is empty".into()));
    }
    Ok(DatasetManifest { name: DatasetName::Dataset1, entries })
}

/// Raw training images plus one background-removed copy per accepted
/// gate verdict. The copy inherits the raw image's label.
pub fn build_dataset_2(
    split: &SplitManifest,
    verdicts: &BTreeMap<String, GateVerdict>,
    seg_dir: &Path,
) -> Result<DatasetManifest> {
    let base = build_dataset_1(split)?;

    let mut removed: Vec<ManifestEntry> = Vec::new();
    for entry in &base.entries {
        let verdict = verdicts.get(&entry.image_id).ok_or_else(|| {
            Error::InvalidInput(format!("no gate verdict for training image {}", entry.image_id))
        })?;
        if !verdict.accepted {
            continue;
        }
        let seg_path = seg_dir.join(segmented_file_name(&entry.image_id));
        if !seg_path.is_file() {
            return Err(Error::MissingSegmented { image_id: entry.image_id.clone(), path: seg_path });
        }
        removed.push(ManifestEntry {
            image_id: entry.image_id.clone(),
            path: seg_path,
            label: entry.label,
            variant: Variant::BackgroundRemoved,
        });
    }
    removed.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let mut entries = base.entries;
    entries.extend(removed);
    Ok(DatasetManifest { name: DatasetName::Dataset2, entries })
}
