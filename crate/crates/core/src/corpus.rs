//! Corpus ingestion, class balancing, and the stratified 6:2:2 split.
//!
//! The corpus is the Kaggle PlantPathology 2020 layout: a one-hot label
//! table (`image_id,healthy,multiple_diseases,rust,scab`) next to a
//! directory of RGB images. The `multiple_diseases` class is dropped at
//! ingest, the remaining classes are balanced by seeded downsampling to
//! the smallest class, and the result is split per class into
//! train/val/test with the remainder of the integer division going to
//! the training partition.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::subseed;

/// The three retained classes, in the fixed order used everywhere
/// (one-hot encoding, confusion-matrix axes, softmax outputs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Healthy,
    Rust,
    Scab,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Healthy, Label::Rust, Label::Scab];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Healthy => "healthy",
            Label::Rust => "rust",
            Label::Scab => "scab",
        }
    }

    /// Index into one-hot vectors and confusion-matrix axes.
    pub fn index(self) -> usize {
        match self {
            Label::Healthy => 0,
            Label::Rust => 1,
            Label::Scab => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Label> {
        match s {
            "healthy" => Ok(Label::Healthy),
            "rust" => Ok(Label::Rust),
            "scab" => Ok(Label::Scab),
            other => Err(Error::InvalidInput(format!("unknown label {other:?}"))),
        }
    }
}

/// Which partition a record landed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitAssignment {
    Train,
    Val,
    Test,
    Unassigned,
}

impl SplitAssignment {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitAssignment::Train => "train",
            SplitAssignment::Val => "val",
            SplitAssignment::Test => "test",
            SplitAssignment::Unassigned => "unassigned",
        }
    }
}

impl FromStr for SplitAssignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<SplitAssignment> {
        match s {
            "train" => Ok(SplitAssignment::Train),
            "val" => Ok(SplitAssignment::Val),
            "test" => Ok(SplitAssignment::Test),
            "unassigned" => Ok(SplitAssignment::Unassigned),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

/// One corpus image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledImageRecord {
    pub image_id: String,
    pub path: PathBuf,
    pub label: Label,
    pub split: SplitAssignment,
}

/// Per-class record counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub healthy: usize,
    pub rust: usize,
    pub scab: usize,
}

impl ClassCounts {
    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Healthy => self.healthy,
            Label::Rust => self.rust,
            Label::Scab => self.scab,
        }
    }

    pub fn bump(&mut self, label: Label) {
        match label {
            Label::Healthy => self.healthy += 1,
            Label::Rust => self.rust += 1,
            Label::Scab => self.scab += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.healthy + self.rust + self.scab
    }

    pub fn min(&self) -> usize {
        self.healthy.min(self.rust).min(self.scab)
    }

    pub fn from_records(records: &[LabeledImageRecord]) -> ClassCounts {
        let mut c = ClassCounts::default();
        for r in records {
            c.bump(r.label);
        }
        c
    }
}

/// Summary of an ingested (or generated) corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub per_class_counts: ClassCounts,
    pub total: usize,
    /// Rows dropped because they belong to the excluded multi-disease class.
    pub dropped: usize,
    pub seed: u64,
}

/// Train/val/test proportions. Must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    /// The experiment's 6:2:2 train/val/test split.
    pub const SIX_TWO_TWO: SplitRatios = SplitRatios { train: 0.6, val: 0.2, test: 0.2 };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (self.train + self.val + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::BadRatios(parts));
        }
        Ok(())
    }
}

/// Per-class (train, val, test) counts after the split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// The persisted result of balancing + splitting a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub records: Vec<LabeledImageRecord>,
    pub ratios: SplitRatios,
    pub seed: u64,
    pub per_class_split_counts: BTreeMap<Label, SplitCounts>,
}

const LABEL_TABLE_HEADER: [&str; 5] = ["image_id", "healthy", "multiple_diseases", "rust", "scab"];

/// Read the one-hot label table and resolve each retained row to an image
/// file on disk. Rows labeled `multiple_diseases` are dropped and counted.
pub fn ingest(label_table: &Path, image_dir: &Path) -> Result<(CorpusSummary, Vec<LabeledImageRecord>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(label_table)
        .map_err(|e| Error::csv(label_table, e))?;

    let headers = reader.headers().map_err(|e| Error::csv(label_table, e))?.clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != LABEL_TABLE_HEADER {
        return Err(Error::InvalidInput(format!(
            "label table header {got:?} != {LABEL_TABLE_HEADER:?}"
        )));
    }

    let mut records = Vec::new();
    let mut dropped = 0usize;
    let mut missing = Vec::new();
    let mut seen = BTreeSet::new();

    for row in reader.records() {
        let row = row.map_err(|e| Error::csv(label_table, e))?;
        let image_id = row.get(0).unwrap_or("").to_string();
        if !seen.insert(image_id.clone()) {
            return Err(Error::InvalidInput(format!("duplicate image_id {image_id:?}")));
        }
        let mut cells = [0u8; 4];
        for (i, cell) in cells.iter_mut().enumerate() {
            let raw = row.get(i + 1).unwrap_or("");
            *cell = raw.trim().parse::<u8>().map_err(|_| {
                Error::InvalidInput(format!("row {image_id:?}: non-integer one-hot cell {raw:?}"))
            })?;
            if *cell > 1 {
                return Err(Error::InvalidInput(format!(
                    "row {image_id:?}: one-hot cell value {cell} out of range"
                )));
            }
        }
        let ones = cells.iter().filter(|&&c| c == 1).count();
        if ones != 1 {
            return Err(Error::BadLabelRow { image_id, ones });
        }
        // Column order: healthy, multiple_diseases, rust, scab.
        let label = match cells.iter().position(|&c| c == 1).unwrap() {
            0 => Label::Healthy,
            1 => {
                dropped += 1;
                continue;
            }
            2 => Label::Rust,
            _ => Label::Scab,
        };
        match resolve_image_path(image_dir, &image_id) {
            Some(path) => records.push(LabeledImageRecord {
                image_id,
                path,
                label,
                split: SplitAssignment::Unassigned,
            }),
            None => missing.push(image_id),
        }
    }

    if !missing.is_empty() {
        return Err(Error::MissingImages { ids: missing });
    }

    let per_class_counts = ClassCounts::from_records(&records);
    let summary = CorpusSummary { total: per_class_counts.total(), per_class_counts, dropped, seed: 0 };
    Ok((summary, records))
}

fn resolve_image_path(image_dir: &Path, image_id: &str) -> Option<PathBuf> {
    for ext in ["png", "jpg", "jpeg", "PNG", "JPG", "JPEG"] {
        let candidate = image_dir.join(format!("{image_id}.{ext}"));
        if candidate.is_file() {
            return Some(candidate);
        }
    }
    None
}

/// Downsample every class to the smallest class count, uniformly without
/// replacement, preserving the original record order.
pub fn balance(records: &[LabeledImageRecord], seed: u64) -> Result<Vec<LabeledImageRecord>> {
    let counts = ClassCounts::from_records(records);
    for label in Label::ALL {
        if counts.get(label) == 0 {
            return Err(Error::InvalidInput(format!("class {label} has no records; cannot balance")));
        }
    }
    let target = counts.min();

    let mut keep: BTreeSet<usize> = BTreeSet::new();
    for label in Label::ALL {
        let class_indices: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == label)
            .map(|(i, _)| i)
            .collect();
        let mut rng = ChaCha20Rng::seed_from_u64(subseed(seed, label.as_str()));
        let mut shuffled = class_indices.clone();
        shuffled.shuffle(&mut rng);
        keep.extend(shuffled.into_iter().take(target));
    }

    Ok(records
        .iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, r)| r.clone())
        .collect())
}

/// Stratified split. Per class, val and test get `floor(ratio * n)` records
/// and train takes the remainder, so 516 per class yields (310, 103, 103).
pub fn split(records: &[LabeledImageRecord], ratios: SplitRatios, seed: u64) -> Result<SplitManifest> {
    ratios.validate()?;

    let mut out: Vec<LabeledImageRecord> = records.to_vec();
    let mut per_class = BTreeMap::new();

    for label in Label::ALL {
        let class_indices: Vec<usize> = out
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == label)
            .map(|(i, _)| i)
            .collect();
        let n = class_indices.len();
        let val_n = floor_ratio(ratios.val, n);
        let test_n = floor_ratio(ratios.test, n);
        if val_n + test_n > n {
            return Err(Error::BadRatios([ratios.train, ratios.val, ratios.test]));
        }
        let train_n = n - val_n - test_n;

        let mut order = class_indices.clone();
        let mut rng = ChaCha20Rng::seed_from_u64(subseed(seed, &format!("split/{}", label.as_str())));
        order.shuffle(&mut rng);

        for (pos, &idx) in order.iter().enumerate() {
            out[idx].split = if pos < train_n {
                SplitAssignment::Train
            } else if pos < train_n + val_n {
                SplitAssignment::Val
            } else {
                SplitAssignment::Test
            };
        }
        per_class.insert(label, SplitCounts { train: train_n, val: val_n, test: test_n });
    }

    Ok(SplitManifest { records: out, ratios, seed, per_class_split_counts: per_class })
}

fn floor_ratio(ratio: f64, n: usize) -> usize {
    // The guard keeps 0.2 * 35 from flooring to 6 when the exact value is 7.
    (ratio * n as f64 + 1e-9).floor() as usize
}

impl SplitManifest {
    pub fn records_in(&self, split: SplitAssignment) -> impl Iterator<Item = &LabeledImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Persist as a diff-friendly CSV with the seed and ratios in leading
    /// comment lines. `read_csv(write_csv(m)) == m`, byte for byte on re-write.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "# seed={}", self.seed).map_err(|e| Error::io(path, e))?;
        writeln!(file, "# ratios={},{},{}", self.ratios.train, self.ratios.val, self.ratios.test)
            .map_err(|e| Error::io(path, e))?;
        writeln!(file, "image_id,path,label,split").map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            let p = r.path.to_string_lossy();
            if p.contains(',') || r.image_id.contains(',') {
                return Err(Error::InvalidInput(format!(
                    "manifest fields must not contain commas: {p:?}"
                )));
            }
            writeln!(file, "{},{},{},{}", r.image_id, p, r.label.as_str(), r.split.as_str())
                .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<SplitManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut seed = 0u64;
        let mut ratios = SplitRatios::SIX_TWO_TWO;
        let mut records = Vec::new();
        let mut saw_header = false;
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("seed=") {
                    seed = v
                        .parse()
                        .map_err(|_| Error::InvalidInput(format!("bad manifest seed line {line:?}")))?;
                } else if let Some(v) = rest.strip_prefix("ratios=") {
                    let parts: Vec<f64> = v
                        .split(',')
                        .map(|s| s.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::InvalidInput(format!("bad manifest ratio line {line:?}")))?;
                    if parts.len() != 3 {
                        return Err(Error::InvalidInput(format!("bad manifest ratio line {line:?}")));
                    }
                    ratios = SplitRatios { train: parts[0], val: parts[1], test: parts[2] };
                }
                continue;
            }
            if !saw_header {
                if line != "image_id,path,label,split" {
                    return Err(Error::InvalidInput(format!("bad manifest header {line:?}")));
                }
                saw_header = true;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::InvalidInput(format!("bad manifest row {line:?}")));
            }
            records.push(LabeledImageRecord {
                image_id: fields[0].to_string(),
                path: PathBuf::from(fields[1]),
                label: fields[2].parse()?,
                split: fields[3].parse()?,
            });
        }
        if !saw_header {
            return Err(Error::InvalidInput(format!("manifest {} has no header", path.display())));
        }

        let mut per_class = BTreeMap::new();
        for label in Label::ALL {
            let mut c = SplitCounts::default();
            for r in records.iter().filter(|r| r.label == label) {
                match r.split {
                    SplitAssignment::Train => c.train += 1,
                    SplitAssignment::Val => c.val += 1,
                    SplitAssignment::Test => c.test += 1,
                    SplitAssignment::Unassigned => {}
                }
            }
            per_class.insert(label, c);
        }
        Ok(SplitManifest { records, ratios, seed, per_class_split_counts: per_class })
    }
}
