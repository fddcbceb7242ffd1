//! Binary foreground segmentation, background suppression, and the
//! quality gate that drops incorrectly segmented images.
//!
//! Two interchangeable backends produce masks:
//!
//! - `salient_model`: a pretrained salient-object-detection network
//!   consumed as an ONNX file (U2-Net style). The saliency map is resized
//!   back to the source dimensions and binarized at a threshold.
//! - `color_index_baseline`: excess-green index (2G - R - B), Otsu
//!   threshold, largest connected component, one pass of morphological
//!   closing. Fully deterministic and offline, used for hermetic runs.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod salient;

pub use salient::SalientModel;

/// Per-pixel binary foreground map for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    pub width: u32,
    pub height: u32,
    /// Row-major, one byte per pixel, strictly 0 or 1.
    values: Vec<u8>,
    pub foreground_fraction: f64,
    pub source_image_id: String,
}

impl ForegroundMask {
    pub fn new(width: u32, height: u32, values: Vec<u8>, source_image_id: String) -> Result<ForegroundMask> {
        if values.len() != (width as usize) * (height as usize) {
            return Err(Error::InvalidInput(format!(
                "mask buffer length {} != {width}x{height}",
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        let ones = values.iter().filter(|&&v| v == 1).count();
        let foreground_fraction = ones as f64 / values.len() as f64;
        Ok(ForegroundMask { width, height, values, foreground_fraction, source_image_id })
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.values[(y * self.width + x) as usize]
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    /// 8-bit single-channel PNG convention: 255 = foreground, 0 = background.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) == 1 { 255 } else { 0 }])
        })
    }

    pub fn from_gray(gray: &GrayImage, source_image_id: String) -> Result<ForegroundMask> {
        let values = gray.pixels().map(|p| u8::from(p.0[0] >= 128)).collect();
        ForegroundMask::new(gray.width(), gray.height(), values, source_image_id)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path).map_err(|e| Error::image(path, e))
    }

    pub fn read_png(path: &Path, source_image_id: String) -> Result<ForegroundMask> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma8();
        ForegroundMask::from_gray(&img, source_image_id)
    }

    /// Intersection over union against another mask of equal dimensions.
    pub fn iou(&self, other: &ForegroundMask) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch {
                mask_w: other.width,
                mask_h: other.height,
                img_w: self.width,
                img_h: self.height,
            });
        }
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.values.iter().zip(&other.values) {
            inter += usize::from(*a == 1 && *b == 1);
            union += usize::from(*a == 1 || *b == 1);
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }
}

/// Segmentation backend selector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmenterBackendId {
    pub kind: BackendKind,
    pub model_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    SalientModel,
    ColorIndexBaseline,
}

impl SegmenterBackendId {
    pub fn baseline() -> SegmenterBackendId {
        SegmenterBackendId { kind: BackendKind::ColorIndexBaseline, model_path: None }
    }

    pub fn salient(model_path: impl Into<PathBuf>) -> SegmenterBackendId {
        SegmenterBackendId { kind: BackendKind::SalientModel, model_path: Some(model_path.into()) }
    }
}

/// A loaded, ready-to-run backend. Load once, segment many.
pub enum Segmenter {
    Salient(SalientModel),
    Baseline,
}

impl Segmenter {
    pub fn open(backend: &SegmenterBackendId) -> Result<Segmenter> {
        match backend.kind {
            BackendKind::ColorIndexBaseline => Ok(Segmenter::Baseline),
            BackendKind::SalientModel => {
                let path = backend
                    .model_path
                    .as_ref()
                    .ok_or_else(|| Error::Model("salient_model backend requires model_path".into()))?;
                Ok(Segmenter::Salient(SalientModel::load(path)?))
            }
        }
    }

    /// Produce a binary mask of the source image's dimensions.
    pub fn segment(&self, image: &RgbImage, image_id: &str, threshold: f64) -> Result<ForegroundMask> {
        if image.width() < 8 || image.height() < 8 {
            return Err(Error::ImageTooSmall(image_id.to_string()));
        }
        if !(0.0..1.0).contains(&threshold) || threshold <= 0.0 {
            return Err(Error::InvalidInput(format!("threshold {threshold} not in (0, 1)")));
        }
        match self {
            Segmenter::Baseline => baseline_mask(image, image_id),
            Segmenter::Salient(model) => {
                let saliency = model.saliency(image)?;
                let values = saliency.iter().map(|&s| u8::from(f64::from(s) > threshold)).collect();
                ForegroundMask::new(image.width(), image.height(), values, image_id.to_string())
            }
        }
    }
}

/// Replace background pixels by `fill`, keep foreground pixels untouched.
pub fn apply_mask(image: &RgbImage, mask: &ForegroundMask, fill: [u8; 3]) -> Result<RgbImage> {
    if image.width() != mask.width || image.height() != mask.height {
        return Err(Error::DimensionMismatch {
            mask_w: mask.width,
            mask_h: mask.height,
            img_w: image.width(),
            img_h: image.height(),
        });
    }
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        if mask.get(x, y) == 1 {
            *image.get_pixel(x, y)
        } else {
            Rgb(fill)
        }
    }))
}

/// Why the gate rejected a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateReason {
    EmptyForeground,
    FullForeground,
    FractionOutOfBounds,
    ManualReject,
}

impl GateReason {
    pub fn as_str(self) -> &'static str {
        match self {
            GateReason::EmptyForeground => "empty_foreground",
            GateReason::FullForeground => "full_foreground",
            GateReason::FractionOutOfBounds => "fraction_out_of_bounds",
            GateReason::ManualReject => "manual_reject",
        }
    }

    pub fn parse(s: &str) -> Result<GateReason> {
        match s {
            "empty_foreground" => Ok(GateReason::EmptyForeground),
            "full_foreground" => Ok(GateReason::FullForeground),
            "fraction_out_of_bounds" => Ok(GateReason::FractionOutOfBounds),
            "manual_reject" => Ok(GateReason::ManualReject),
            other => Err(Error::InvalidInput(format!("unknown gate reason {other:?}"))),
        }
    }
}

/// Gate decision for one mask. `accepted` iff `reasons` is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateVerdict {
    pub accepted: bool,
    pub reasons: Vec<GateReason>,
}

/// Area-fraction bounds for the gate. Default (0.05, 0.95).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateBounds {
    pub min_frac: f64,
    pub max_frac: f64,
}

impl Default for GateBounds {
    fn default() -> Self {
        GateBounds { min_frac: 0.05, max_frac: 0.95 }
    }
}

/// Decide whether a mask counts as a correct segmentation. All triggered
/// reasons are reported, not just the first.
pub fn gate(mask: &ForegroundMask, bounds: GateBounds, manual_rejects: &BTreeSet<String>) -> Result<GateVerdict> {
    if bounds.min_frac >= bounds.max_frac {
        return Err(Error::BadGateBounds(bounds.min_frac, bounds.max_frac));
    }
    let f = mask.foreground_fraction;
    let mut reasons = Vec::new();
    if f == 0.0 {
        reasons.push(GateReason::EmptyForeground);
    }
    if f == 1.0 {
        reasons.push(GateReason::FullForeground);
    }
    if f < bounds.min_frac || f > bounds.max_frac {
        reasons.push(GateReason::FractionOutOfBounds);
    }
    if manual_rejects.contains(&mask.source_image_id) {
        reasons.push(GateReason::ManualReject);
    }
    Ok(GateVerdict { accepted: reasons.is_empty(), reasons })
}

/// One line of the persisted verdict table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub image_id: String,
    pub fraction: f64,
    pub verdict: GateVerdict,
}

pub fn write_verdicts_csv(rows: &[VerdictRow], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "image_id,fraction,accepted,reasons").map_err(|e| Error::io(path, e))?;
    for row in rows {
        let reasons: Vec<&str> = row.verdict.reasons.iter().map(|r| r.as_str()).collect();
        writeln!(
            file,
            "{},{},{},{}",
            row.image_id,
            row.fraction,
            row.verdict.accepted,
            reasons.join("|")
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_verdicts_csv(path: &Path) -> Result<Vec<VerdictRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "image_id,fraction,accepted,reasons" {
                return Err(Error::InvalidInput(format!("bad verdicts header {line:?}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::InvalidInput(format!("bad verdicts row {line:?}")));
        }
        let fraction: f64 = fields[1]
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad fraction in {line:?}")))?;
        let accepted: bool = fields[2]
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad accepted flag in {line:?}")))?;
        let reasons = if fields[3].is_empty() {
            Vec::new()
        } else {
            fields[3].split('|').map(GateReason::parse).collect::<Result<Vec<_>>>()?
        };
        rows.push(VerdictRow {
            image_id: fields[0].to_string(),
            fraction,
            verdict: GateVerdict { accepted, reasons },
        });
    }
    Ok(rows)
}

/// Plain-text manual-reject list: one image_id per line, `#` comments allowed.
pub fn read_manual_rejects(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

// ---------------------------------------------------------------------------
// Color-index baseline
// ---------------------------------------------------------------------------

fn baseline_mask(image: &RgbImage, image_id: &str) -> Result<ForegroundMask> {
    let (w, h) = (image.width() as usize, image.height() as usize);

    // Excess-green index per pixel, binned to 0..=255 for Otsu.
    let mut bins = vec![0u8; w * h];
    for (i, px) in image.pixels().enumerate() {
        let [r, g, b] = px.0;
        let exg = 2 * i32::from(g) - i32::from(r) - i32::from(b); // [-510, 510]
        bins[i] = ((exg + 510) * 255 / 1020) as u8;
    }

    let threshold = otsu_threshold(&bins);
    let mut mask: Vec<u8> = bins.iter().map(|&v| u8::from(v > threshold)).collect();

    keep_largest_component(&mut mask, w, h);
    morphological_close(&mut mask, w, h);

    ForegroundMask::new(image.width(), image.height(), mask, image_id.to_string())
}

/// Otsu's threshold over a 256-bin histogram; pixels strictly above the
/// returned bin are foreground. Ties resolve to the smallest bin, which
/// makes uniform images degenerate to an all-0 or all-1 mask.
fn otsu_threshold(bins: &[u8]) -> u8 {
    let mut hist = [0u64; 256];
    for &v in bins {
        hist[v as usize] += 1;
    }
    let total: u64 = bins.len() as u64;
    let total_sum: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();

    let mut best_t = 0u8;
    let mut best_var = -1.0f64;
    let mut w0 = 0u64;
    let mut sum0 = 0.0f64;
    for t in 0..255usize {
        w0 += hist[t];
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 / w0 as f64;
        let m1 = (total_sum - sum0) / w1 as f64;
        let var = w0 as f64 * w1 as f64 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best_t = t as u8;
        }
    }
    best_t
}

/// Zero out every foreground component except the largest (4-connectivity).
fn keep_largest_component(mask: &mut [u8], w: usize, h: usize) {
    let mut label = vec![0u32; mask.len()];
    let mut next = 0u32;
    let mut sizes: Vec<usize> = Vec::new();
    let mut stack = Vec::new();

    for start in 0..mask.len() {
        if mask[start] == 0 || label[start] != 0 {
            continue;
        }
        next += 1;
        let mut size = 0usize;
        stack.push(start);
        label[start] = next;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask[j] == 1 && label[j] == 0 {
                    label[j] = next;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        sizes.push(size);
    }

    if next <= 1 {
        return;
    }
    let largest = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i as u32 + 1)
        .unwrap();
    for (m, &l) in mask.iter_mut().zip(&label) {
        if *m == 1 && l != largest {
            *m = 0;
        }
    }
}

/// One pass of 3x3 closing: dilation followed by erosion.
fn morphological_close(mask: &mut [u8], w: usize, h: usize) {
    let dilated = morph(mask, w, h, true);
    let closed = morph(&dilated, w, h, false);
    mask.copy_from_slice(&closed);
}

fn morph(mask: &[u8], w: usize, h: usize, dilate: bool) -> Vec<u8> {
    let mut out = vec![0u8; mask.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = !dilate;
            'probe: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    // Out-of-frame neighbors are neutral: background for
                    // dilation, foreground for erosion. Closing therefore
                    // never erodes the frame border, and a degenerate all-1
                    // mask passes through unchanged.
                    let v = if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        u8::from(!dilate)
                    } else {
                        mask[ny as usize * w + nx as usize]
                    };
                    if dilate && v == 1 {
                        acc = true;
                        break 'probe;
                    }
                    if !dilate && v == 0 {
                        acc = false;
                        break 'probe;
                    }
                }
            }
            out[y * w + x] = u8::from(acc);
        }
    }
    out
}

/// File-naming conventions shared by the batch driver and the augmenter.
pub fn mask_file_name(image_id: &str) -> String {
    format!("{image_id}_mask.png")
}

pub fn segmented_file_name(image_id: &str) -> String {
    format!("{image_id}_fg.png")
}
