//! Pretrained salient-object-detection backend, consumed as an ONNX file.
//!
//! The network itself is an opaque artifact (a U2-Net style saliency
//! model); this module only handles its I/O contract: resize to the
//! model's input resolution, normalize, run, min-max normalize the
//! saliency map, and resize it back to the source dimensions.

use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use tract_onnx::prelude::*;

use crate::error::{Error, Result};

/// Input resolution expected from the saliency model.
pub const SALIENT_INPUT_SIZE: u32 = 320;

/// Channel normalization applied before inference (the convention the
/// public U2-Net checkpoints were trained with).
const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const STD: [f32; 3] = [0.229, 0.224, 0.225];

pub struct SalientModel {
    plan: Arc<TypedRunnableModel>,
}

impl SalientModel {
    pub fn load(path: &Path) -> Result<SalientModel> {
        let build = || -> TractResult<Arc<TypedRunnableModel>> {
            let size = SALIENT_INPUT_SIZE as usize;
            tract_onnx::onnx()
                .model_for_path(path)?
                .with_input_fact(0, f32::fact([1, 3, size, size]).into())?
                .into_optimized()?
                .into_runnable()
        };
        let plan = build().map_err(|e| Error::Model(format!("loading {}: {e}", path.display())))?;
        Ok(SalientModel { plan })
    }

    /// Per-pixel saliency in [0, 1], row-major at the source resolution.
    pub fn saliency(&self, image: &RgbImage) -> Result<Vec<f32>> {
        let size = SALIENT_INPUT_SIZE;
        let resized = image::imageops::resize(image, size, size, FilterType::Triangle);

        let mut input = Tensor::zero::<f32>(&[1, 3, size as usize, size as usize])
            .map_err(|e| Error::Model(e.to_string()))?;
        {
            let mut view =
                input.to_plain_array_view_mut::<f32>().map_err(|e| Error::Model(e.to_string()))?;
            for (x, y, px) in resized.enumerate_pixels() {
                for c in 0..3 {
                    view[[0, c, y as usize, x as usize]] =
                        (px.0[c] as f32 / 255.0 - MEAN[c]) / STD[c];
                }
            }
        }

        let outputs = self
            .plan
            .run(tvec!(input.into()))
            .map_err(|e| Error::Model(format!("inference failed: {e}")))?;
        let view = outputs[0].to_plain_array_view::<f32>().map_err(|e| Error::Model(e.to_string()))?;
        let map: Vec<f32> = view.iter().copied().collect();
        if map.len() != (size as usize) * (size as usize) {
            return Err(Error::Model(format!(
                "unexpected saliency output shape {:?}",
                outputs[0].shape()
            )));
        }

        // Min-max normalize, as the saliency map is not guaranteed to be
        // a calibrated probability.
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in map.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = if hi > lo { hi - lo } else { 1.0 };
        let normalized: Vec<f32> = map.iter().map(|&v| (v - lo) / range).collect();

        Ok(resize_bilinear(
            &normalized,
            size as usize,
            size as usize,
            image.width() as usize,
            image.height() as usize,
        ))
    }
}

/// Bilinear resize of a single-channel f32 buffer.
fn resize_bilinear(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; dw * dh];
    for y in 0..dh {
        let sy = (y as f32 + 0.5) * sh as f32 / dh as f32 - 0.5;
        let y0 = sy.floor().clamp(0.0, (sh - 1) as f32) as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let fy = (sy - y0 as f32).clamp(0.0, 1.0);
        for x in 0..dw {
            let sx = (x as f32 + 0.5) * sw as f32 / dw as f32 - 0.5;
            let x0 = sx.floor().clamp(0.0, (sw - 1) as f32) as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let fx = (sx - x0 as f32).clamp(0.0, 1.0);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out[y * dw + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}
