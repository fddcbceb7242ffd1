//! Test-set evaluation: confusion matrices, the accuracy / precision /
//! recall / F1 family, and the cross-cell comparison report.
//!
//! Definitions, per class c with TP/FP/FN drawn from the 3x3 confusion
//! matrix (rows = true label, columns = predicted label):
//!
//! ```text
//! accuracy          = (sum of diagonal) / total
//! precision_c       = TP_c / (TP_c + FP_c)
//! recall_c          = TP_c / (TP_c + FN_c)
//! f1_c              = 2 * precision_c * recall_c / (precision_c + recall_c)
//! macro average     = unweighted mean over classes
//! weighted average  = sum_c support_c * metric_c / total
//! ```
//!
//! Weighted recall is computed as `trace / total`, which is algebraically
//! identical to `sum_c support_c * (TP_c / support_c) / total` and equals
//! accuracy exactly, with no intermediate rounding. Any metric whose
//! denominator is zero is defined as 0 and flagged in the report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augmenter::{DatasetName, ManifestEntry};
use crate::classifier::LeafClassifier;
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::trainer::{infer_probs, FeatureStore};

/// 3x3 confusion matrix; `counts[true][predicted]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 3]; 3],
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::default();
        for (truth, pred) in pairs {
            cm.counts[truth.index()][pred.index()] += 1;
        }
        cm
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    /// Row sum: number of test samples whose true label is `c`.
    pub fn support(&self, c: Label) -> usize {
        self.counts[c.index()].iter().sum()
    }

    /// Column sum: number of samples predicted as `c`.
    pub fn predicted(&self, c: Label) -> usize {
        (0..3).map(|i| self.counts[i][c.index()]).sum()
    }

    pub fn tp(&self, c: Label) -> usize {
        self.counts[c.index()][c.index()]
    }

    pub fn fp(&self, c: Label) -> usize {
        self.predicted(c) - self.tp(c)
    }

    pub fn fn_(&self, c: Label) -> usize {
        self.support(c) - self.tp(c)
    }

    pub fn tn(&self, c: Label) -> usize {
        self.total() - self.tp(c) - self.fp(c) - self.fn_(c)
    }
}

/// Per-class precision / recall / F1 with the sample count behind them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// True when any denominator above was zero and the metric was
    /// defined as 0.
    pub zero_division: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    /// True when any per-class metric hit a zero denominator.
    pub zero_division_flagged: bool,
}

fn ratio(num: f64, den: f64, flag: &mut bool) -> f64 {
    if den == 0.0 {
        *flag = true;
        0.0
    } else {
        num / den
    }
}

/// Compute the full metric family from a confusion matrix.
pub fn metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let total = cm.total() as f64;
    let mut flagged = false;
    let accuracy = ratio(cm.trace() as f64, total, &mut flagged);

    let mut per_class = BTreeMap::new();
    let mut weighted_precision = 0.0;
    let mut weighted_f1 = 0.0;
    let mut macro_precision = 0.0;
    let mut macro_recall = 0.0;
    let mut macro_f1 = 0.0;
    for c in Label::ALL {
        let mut zero = false;
        let tp = cm.tp(c) as f64;
        let precision = ratio(tp, (cm.tp(c) + cm.fp(c)) as f64, &mut zero);
        let recall = ratio(tp, (cm.tp(c) + cm.fn_(c)) as f64, &mut zero);
        let f1 = ratio(2.0 * precision * recall, precision + recall, &mut zero);
        let support = cm.support(c);
        per_class.insert(c.as_str().to_string(), ClassMetrics { precision, recall, f1, support, zero_division: zero });
        flagged |= zero;
        weighted_precision += support as f64 * precision;
        weighted_f1 += support as f64 * f1;
        macro_precision += precision / 3.0;
        macro_recall += recall / 3.0;
        macro_f1 += f1 / 3.0;
    }
    // trace/total, not the support-weighted sum: algebraically identical,
    // but exact where the roundabout form accumulates rounding error.
    let weighted_recall = ratio(cm.trace() as f64, total, &mut flagged);

    MetricsReport {
        accuracy,
        per_class,
        macro_precision,
        macro_recall,
        macro_f1,
        weighted_precision: ratio(weighted_precision, total, &mut flagged),
        weighted_recall,
        weighted_f1: ratio(weighted_f1, total, &mut flagged),
        zero_division_flagged: flagged,
    }
}

/// Digest of a test entry list, used to refuse cross-cell comparisons over
/// different test sets.
pub fn test_manifest_digest(entries: &[ManifestEntry]) -> String {
    let mut h = Sha256::new();
    for e in entries {
        h.update(e.image_id.as_bytes());
        h.update([0]);
        h.update(e.label.as_str().as_bytes());
        h.update([0]);
        h.update(e.path.to_string_lossy().as_bytes());
        h.update([0xff]);
    }
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One evaluated experiment cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEvaluation {
    pub cell: String,
    pub dataset: DatasetName,
    pub optimizer: OptimizerKind,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    /// Digest of the pipeline configuration the cell was trained under.
    pub config_digest: String,
    pub test_manifest_digest: String,
}

/// Run a trained model over the test entries and score it.
pub fn evaluate_cell(
    model: &mut LeafClassifier,
    store: &FeatureStore,
    test_entries: &[ManifestEntry],
    dataset: DatasetName,
    optimizer: OptimizerKind,
    batch_size: usize,
    config_digest: &str,
) -> Result<CellEvaluation> {
    if test_entries.is_empty() {
        return Err(Error::InvalidInput("test manifest must be non-empty".into()));
    }
    let refs: Vec<&ManifestEntry> = test_entries.iter().collect();
    let mut pairs = Vec::with_capacity(refs.len());
    for batch in refs.chunks(batch_size.max(1)) {
        let probs = infer_probs(model, store, batch)?;
        for (i, e) in batch.iter().enumerate() {
            let row = probs.row(i);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            pairs.push((e.label, Label::from_index(argmax).unwrap()));
        }
    }
    let confusion = ConfusionMatrix::from_pairs(pairs);
    Ok(CellEvaluation {
        cell: crate::trainer::cell_name(dataset, optimizer),
        dataset,
        optimizer,
        confusion,
        metrics: metrics(&confusion),
        config_digest: config_digest.to_string(),
        test_manifest_digest: test_manifest_digest(test_entries),
    })
}

/// Accuracy gain from training-set augmentation, per optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationDelta {
    pub optimizer: OptimizerKind,
    pub dataset_1_accuracy: f64,
    pub dataset_2_accuracy: f64,
    pub accuracy_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub cells: Vec<CellEvaluation>,
    pub augmentation_deltas: Vec<AugmentationDelta>,
    pub test_manifest_digest: String,
}

/// Assemble the cross-cell report. Every cell must have been scored on the
/// identical test manifest; anything else makes the comparison invalid and
/// is a hard error.
pub fn build_report(cells: Vec<CellEvaluation>) -> Result<Report> {
    if cells.is_empty() {
        return Err(Error::InvalidInput("report needs at least one evaluated cell".into()));
    }
    let digest = cells[0].test_manifest_digest.clone();
    for c in &cells {
        if c.test_manifest_digest != digest {
            return Err(Error::InvalidInput(format!(
                "cell {} was evaluated on a different test manifest; cross-cell comparison refused",
                c.cell
            )));
        }
    }

    let mut augmentation_deltas = Vec::new();
    for optimizer in [OptimizerKind::Adam, OptimizerKind::Rmsprop] {
        let find = |dataset: DatasetName| {
            cells
                .iter()
                .find(|c| c.dataset == dataset && c.optimizer == optimizer)
                .map(|c| c.metrics.accuracy)
        };
        if let (Some(a1), Some(a2)) = (find(DatasetName::Dataset1), find(DatasetName::Dataset2)) {
            augmentation_deltas.push(AugmentationDelta {
                optimizer,
                dataset_1_accuracy: a1,
                dataset_2_accuracy: a2,
                accuracy_delta: a2 - a1,
            });
        }
    }
    Ok(Report { cells, augmentation_deltas, test_manifest_digest: digest })
}

/// Write `report.json`, `summary.csv`, and per-cell confusion renderings
/// (`confusion_<cell>.txt` and `confusion_<cell>.png`) into `out_dir`.
pub fn write_report(report: &Report, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let json_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(report).expect("report json");
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    written.push(json_path);

    let csv_path = out_dir.join("summary.csv");
    let mut csv = String::from(
        "cell,accuracy,macro_precision,macro_recall,macro_f1,weighted_precision,weighted_recall,weighted_f1\n",
    );
    for c in &report.cells {
        let m = &c.metrics;
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            c.cell,
            m.accuracy,
            m.macro_precision,
            m.macro_recall,
            m.macro_f1,
            m.weighted_precision,
            m.weighted_recall,
            m.weighted_f1
        ));
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    written.push(csv_path);

    for c in &report.cells {
        let txt_path = out_dir.join(format!("confusion_{}.txt", c.cell));
        std::fs::write(&txt_path, render_confusion_text(&c.confusion)).map_err(|e| Error::io(&txt_path, e))?;
        written.push(txt_path);

        let png_path = out_dir.join(format!("confusion_{}.png", c.cell));
        render_confusion_png(&c.confusion, &png_path)?;
        written.push(png_path);
    }
    Ok(written)
}

/// Plain-text confusion table, rows = true labels.
pub fn render_confusion_text(cm: &ConfusionMatrix) -> String {
    let mut out = String::from("true\\pred healthy    rust    scab\n");
    for c in Label::ALL {
        out.push_str(&format!(
            "{:<9} {:>7} {:>7} {:>7}\n",
            c.as_str(),
            cm.counts[c.index()][0],
            cm.counts[c.index()][1],
            cm.counts[c.index()][2]
        ));
    }
    out
}

// --- minimal bitmap rendering for the confusion PNG ---

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

/// 5x7 glyph rows, one bitmask byte per row (bit 4 = leftmost pixel).
fn glyph(ch: char) -> [u8; GLYPH_H] {
    match ch {
        '0' => [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
        '1' => [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
        '2' => [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
        '3' => [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e],
        '4' => [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
        '5' => [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
        '6' => [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
        '7' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
        '9' => [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
        'h' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11],
        'r' => [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10],
        's' => [0x00, 0x00, 0x0f, 0x10, 0x0e, 0x01, 0x1e],
        _ => [0; GLYPH_H],
    }
}

fn draw_text(img: &mut image::RgbImage, text: &str, x0: u32, y0: u32, scale: u32, color: [u8; 3]) {
    let mut x = x0;
    for ch in text.chars() {
        let rows = glyph(ch);
        for (ry, row) in rows.iter().enumerate() {
            for rx in 0..GLYPH_W {
                if row & (1 << (GLYPH_W - 1 - rx)) != 0 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            let px = x + rx as u32 * scale + sx;
                            let py = y0 + ry as u32 * scale + sy;
                            if px < img.width() && py < img.height() {
                                img.put_pixel(px, py, image::Rgb(color));
                            }
                        }
                    }
                }
            }
        }
        x += (GLYPH_W as u32 + 1) * scale;
    }
}

/// Render the confusion matrix as a shaded 3x3 grid with count labels.
pub fn render_confusion_png(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    const CELL: u32 = 72;
    const BAND: u32 = 24;
    let side = BAND + 3 * CELL;
    let mut img = image::RgbImage::from_pixel(side, side, image::Rgb([255, 255, 255]));

    let max = cm.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    for (r, row) in cm.counts.iter().enumerate() {
        for (c, &n) in row.iter().enumerate() {
            let shade = (n as f64 / max * 200.0) as u8;
            let bg = [255 - shade, 255 - shade / 3, 255 - shade];
            let x0 = BAND + c as u32 * CELL;
            let y0 = BAND + r as u32 * CELL;
            for y in y0..y0 + CELL {
                for x in x0..x0 + CELL {
                    let border = x == x0 || y == y0 || x == x0 + CELL - 1 || y == y0 + CELL - 1;
                    img.put_pixel(x, y, image::Rgb(if border { [80, 80, 80] } else { bg }));
                }
            }
            let text = n.to_string();
            let tw = text.chars().count() as u32 * (GLYPH_W as u32 + 1) * 2;
            let fg = if shade > 120 { [255, 255, 255] } else { [20, 20, 20] };
            draw_text(&mut img, &text, x0 + (CELL.saturating_sub(tw)) / 2, y0 + CELL / 2 - GLYPH_H as u32, 2, fg);
        }
    }
    // Axis bands: column = predicted, row = true, tagged by class initial.
    for (i, c) in Label::ALL.iter().enumerate() {
        let initial = &c.as_str()[..1];
        draw_text(&mut img, initial, BAND + i as u32 * CELL + CELL / 2 - GLYPH_W as u32, 4, 2, [0, 0, 0]);
        draw_text(&mut img, initial, 4, BAND + i as u32 * CELL + CELL / 2 - GLYPH_H as u32, 2, [0, 0, 0]);
    }
    img.save(path).map_err(|e| Error::image(path, e))
}
