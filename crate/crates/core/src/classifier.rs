//! The classification model: a MobileNetV2-style backbone with frozen
//! early layers plus the custom head (GAP, batch norm, Dense 128/ReLU,
//! Dropout 0.5, Dense 64/ReLU, Dropout 0.5, Dense 3/softmax), and the
//! exact preprocessing contract: resize to 224x224, scale to [0, 1].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::mobilenetv2::{MobileNetV2, FEATURE_CHANNELS};
use crate::nn::{self, BatchNorm1d, Dense, Dropout, Param, Relu};

pub const INPUT_SIZE: u32 = 224;
pub const NUM_CLASSES: usize = 3;

/// Resize interpolation for preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

/// The preprocessing contract: 224x224, divide by 255 (deliberately not
/// ImageNet mean/std normalization).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub target_size: (u32, u32),
    pub interpolation: Interpolation,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec { target_size: (INPUT_SIZE, INPUT_SIZE), interpolation: Interpolation::Bilinear }
    }
}

/// Head layer stack sizes. Fixed to the published architecture; recorded in
/// sidecars for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub dense_layers: Vec<usize>,
    pub dropout_rate: f32,
    pub output_classes: usize,
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec { dense_layers: vec![128, 64], dropout_rate: 0.5, output_classes: NUM_CLASSES }
    }
}

/// Backbone configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    /// Pretrained ImageNet weights in safetensors form. `None` is only
    /// valid together with `allow_random_init`.
    pub weights_path: Option<PathBuf>,
    /// Count of trailing trainable backbone units (stem, 17 blocks, final
    /// conv = 19 units). Default 2: the last inverted-residual block plus
    /// the final 1x1 convolution.
    pub freeze_boundary: usize,
    /// Explicit opt-in for a seeded random backbone (hermetic runs).
    pub allow_random_init: bool,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec { weights_path: None, freeze_boundary: 2, allow_random_init: false }
    }
}

/// Decode an image file, requiring color data.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    if !img.color().has_color() {
        return Err(Error::InvalidInput(format!("{} is not an RGB image", path.display())));
    }
    Ok(img.into_rgb8())
}

/// Resize and scale one image to a `(3, H, W)` tensor in [0, 1].
pub fn preprocess(image: &RgbImage, spec: &PreprocessSpec) -> Array3<f32> {
    let (tw, th) = spec.target_size;
    let resized = if image.width() == tw && image.height() == th {
        image.clone()
    } else {
        let filter = match spec.interpolation {
            Interpolation::Bilinear => FilterType::Triangle,
            Interpolation::Nearest => FilterType::Nearest,
        };
        image::imageops::resize(image, tw, th, filter)
    };
    let mut out = Array3::zeros((3, th as usize, tw as usize));
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
        }
    }
    out
}

/// Stack per-image tensors into a batch.
pub fn batch_of(tensors: &[Array3<f32>]) -> Array4<f32> {
    let views: Vec<_> = tensors.iter().map(|t| t.view()).collect();
    ndarray::stack(Axis(0), &views).unwrap()
}

/// The custom head. Operates on pooled `(N, 1280)` features.
pub struct Head {
    pub bn: BatchNorm1d,
    fc1: Dense,
    relu1: Relu,
    drop1: Dropout,
    fc2: Dense,
    relu2: Relu,
    drop2: Dropout,
    fc3: Dense,
}

impl Head {
    pub fn new(spec: &HeadSpec, rng: &mut ChaCha20Rng) -> Result<Head> {
        if spec.dense_layers.len() != 2 {
            return Err(Error::InvalidInput("head requires exactly two dense layers".into()));
        }
        let (d1, d2) = (spec.dense_layers[0], spec.dense_layers[1]);
        Ok(Head {
            bn: BatchNorm1d::new("head.bn", FEATURE_CHANNELS),
            fc1: Dense::new("head.fc1", FEATURE_CHANNELS, d1, rng),
            relu1: Relu::new(),
            drop1: Dropout::new(spec.dropout_rate),
            fc2: Dense::new("head.fc2", d1, d2, rng),
            relu2: Relu::new(),
            drop2: Dropout::new(spec.dropout_rate),
            fc3: Dense::new("head.fc3", d2, spec.output_classes, rng),
        })
    }

    /// Training-mode forward: batch-stat BN, active dropout, cached
    /// activations for [`Head::backward`]. Returns logits.
    pub fn forward_train(&mut self, pooled: &Array2<f32>, rng: &mut ChaCha20Rng) -> Array2<f32> {
        let y = self.bn.forward(pooled, true);
        let y = self.fc1.forward(&y, true);
        let y = self.relu1.forward(&y, true);
        let y = self.drop1.forward(&y, true, rng);
        let y = self.fc2.forward(&y, true);
        let y = self.relu2.forward(&y, true);
        let y = self.drop2.forward(&y, true, rng);
        self.fc3.forward(&y, true)
    }

    /// Inference-mode forward: running-stat BN, dropout inactive. Bitwise
    /// repeatable. Returns logits.
    pub fn forward_infer(&mut self, pooled: &Array2<f32>) -> Array2<f32> {
        let y = self.bn.forward(pooled, false);
        let y = self.fc1.forward(&y, false);
        let y = self.relu1.forward(&y, false);
        let y = self.fc2.forward(&y, false);
        let y = self.relu2.forward(&y, false);
        self.fc3.forward(&y, false)
    }

    pub fn backward(&mut self, dlogits: &Array2<f32>) -> Array2<f32> {
        let d = self.fc3.backward(dlogits);
        let d = self.drop2.backward(&d);
        let d = self.relu2.backward(&d);
        let d = self.fc2.backward(&d);
        let d = self.drop1.backward(&d);
        let d = self.relu1.backward(&d);
        let d = self.fc1.backward(&d);
        self.bn.backward(&d)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.bn.gamma,
            &mut self.bn.beta,
            &mut self.bn.running_mean,
            &mut self.bn.running_var,
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
            &mut self.fc3.weight,
            &mut self.fc3.bias,
        ]
    }
}

/// The composed model.
pub struct LeafClassifier {
    pub backbone: MobileNetV2,
    pub head: Head,
    pub preprocess_spec: PreprocessSpec,
    pub head_spec: HeadSpec,
    pub backbone_spec: BackboneSpec,
}

impl LeafClassifier {
    /// Build the composed model. Backbone weights come from the pretrained
    /// checkpoint unless `allow_random_init` explicitly opts into a seeded
    /// random backbone.
    pub fn build(
        backbone_spec: &BackboneSpec,
        head_spec: &HeadSpec,
        preprocess_spec: &PreprocessSpec,
        init_seed: u64,
    ) -> Result<LeafClassifier> {
        let mut backbone = MobileNetV2::new(crate::seeding::subseed(init_seed, "backbone_init"));
        match &backbone_spec.weights_path {
            Some(path) => {
                if !path.is_file() {
                    return Err(Error::MissingWeights(path.clone()));
                }
                load_weights(backbone.params_mut(), path, "backbone.")?;
            }
            None => {
                if !backbone_spec.allow_random_init {
                    return Err(Error::MissingWeights(PathBuf::from("<unset backbone weights_path>")));
                }
            }
        }
        backbone.set_freeze_boundary(backbone_spec.freeze_boundary);

        let mut rng = ChaCha20Rng::seed_from_u64(crate::seeding::subseed(init_seed, "head_init"));
        let head = Head::new(head_spec, &mut rng)?;
        Ok(LeafClassifier {
            backbone,
            head,
            preprocess_spec: *preprocess_spec,
            head_spec: head_spec.clone(),
            backbone_spec: backbone_spec.clone(),
        })
    }

    /// Inference: probability rows over (healthy, rust, scab).
    pub fn predict(&mut self, batch: &Array4<f32>) -> Array2<f32> {
        let features = self.backbone.forward(batch);
        let pooled = nn::gap_forward(&features);
        let logits = self.head.forward_infer(&pooled);
        nn::softmax(&logits)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.backbone.params_mut();
        out.extend(self.head.params_mut());
        out
    }

    pub fn trainable_parameter_count(&mut self) -> usize {
        self.params_mut()
            .into_iter()
            .filter(|p| p.trainable && !p.buffer)
            .map(|p| p.len())
            .sum()
    }

    pub fn head_trainable_parameter_count(&mut self) -> usize {
        self.head
            .params_mut()
            .into_iter()
            .filter(|p| p.trainable && !p.buffer)
            .map(|p| p.len())
            .sum()
    }

    pub fn save_weights(&mut self, path: &Path) -> Result<()> {
        let params = self.params_mut();
        save_weights(params.iter().map(|p| &**p), path)
    }

    pub fn load_all_weights(&mut self, path: &Path) -> Result<()> {
        load_weights(self.params_mut(), path, "")
    }
}

/// Serialize named tensors to a safetensors file.
pub fn save_weights<'a>(params: impl Iterator<Item = &'a Param>, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    for p in params {
        let bytes: Vec<u8> = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
        tensors.push((p.name.clone(), p.value.shape().to_vec(), bytes));
    }
    let views: Vec<(String, safetensors::tensor::TensorView)> = tensors
        .iter()
        .map(|(name, shape, bytes)| {
            let view = safetensors::tensor::TensorView::new(safetensors::Dtype::F32, shape.clone(), bytes)
                .expect("tensor view");
            (name.clone(), view)
        })
        .collect();
    let data = safetensors::serialize(views, None)
        .map_err(|e| Error::BadCheckpoint { path: path.into(), reason: e.to_string() })?;
    std::fs::write(path, data).map_err(|e| Error::io(path, e))
}

/// Load tensors by exact name into params. Only params whose name starts
/// with `prefix` are required and touched.
pub fn load_weights(params: Vec<&mut Param>, path: &Path, prefix: &str) -> Result<()> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = safetensors::SafeTensors::deserialize(&data)
        .map_err(|e| Error::BadCheckpoint { path: path.into(), reason: e.to_string() })?;
    for p in params {
        if !p.name.starts_with(prefix) {
            continue;
        }
        let view = st.tensor(&p.name).map_err(|e| Error::BadCheckpoint {
            path: path.into(),
            reason: format!("missing tensor {}: {e}", p.name),
        })?;
        if view.shape() != p.value.shape() {
            return Err(Error::BadCheckpoint {
                path: path.into(),
                reason: format!("tensor {} shape {:?} != expected {:?}", p.name, view.shape(), p.value.shape()),
            });
        }
        if view.dtype() != safetensors::Dtype::F32 {
            return Err(Error::BadCheckpoint {
                path: path.into(),
                reason: format!("tensor {} dtype {:?} != F32", p.name, view.dtype()),
            });
        }
        let floats: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        p.value = ndarray::ArrayD::from_shape_vec(p.value.raw_dim(), floats).map_err(|e| {
            Error::BadCheckpoint { path: path.into(), reason: format!("tensor {}: {e}", p.name) }
        })?;
    }
    Ok(())
}

/// Read arbitrary extra tensors (e.g. optimizer slots) from a checkpoint.
pub fn load_named_tensors(path: &Path, prefix: &str) -> Result<BTreeMap<String, ndarray::ArrayD<f32>>> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = safetensors::SafeTensors::deserialize(&data)
        .map_err(|e| Error::BadCheckpoint { path: path.into(), reason: e.to_string() })?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if !name.starts_with(prefix) {
            continue;
        }
        let floats: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(view.shape()), floats)
            .map_err(|e| Error::BadCheckpoint { path: path.into(), reason: e.to_string() })?;
        out.insert(name.to_string(), arr);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn random_backbone_spec() -> BackboneSpec {
        BackboneSpec { weights_path: None, freeze_boundary: 0, allow_random_init: true }
    }

    fn build_test_model(seed: u64) -> LeafClassifier {
        LeafClassifier::build(&random_backbone_spec(), &HeadSpec::default(), &PreprocessSpec::default(), seed)
            .unwrap()
    }

    #[test]
    fn preprocess_resizes_and_scales_to_unit_range() {
        let img = RgbImage::from_pixel(50, 30, Rgb([255, 128, 0]));
        let t = preprocess(&img, &PreprocessSpec::default());
        assert_eq!(t.dim(), (3, 224, 224));
        assert!((t[[0, 0, 0]] - 1.0).abs() < 1e-6);
        assert!((t[[1, 0, 0]] - 128.0 / 255.0).abs() < 1e-6);
        assert!(t[[2, 0, 0]].abs() < 1e-6);
        assert!(t.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn preprocess_is_identity_resize_for_target_sized_input() {
        let mut img = RgbImage::new(4, 4);
        img.put_pixel(2, 1, Rgb([10, 20, 30]));
        let spec = PreprocessSpec { target_size: (4, 4), interpolation: Interpolation::Nearest };
        let t = preprocess(&img, &spec);
        assert!((t[[0, 1, 2]] - 10.0 / 255.0).abs() < 1e-6);
        assert!((t[[2, 1, 2]] - 30.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn batch_of_stacks_tensors() {
        let a = Array3::zeros((3, 8, 8));
        let b = Array3::ones((3, 8, 8));
        let batch = batch_of(&[a, b]);
        assert_eq!(batch.dim(), (2, 3, 8, 8));
        assert_eq!(batch[[1, 0, 0, 0]], 1.0);
    }

    #[test]
    fn head_trainable_parameter_count_matches_architecture() {
        let mut model = build_test_model(0);
        // Dense 1280->128 + bias, 128->64 + bias, 64->3 + bias, plus the
        // 1280-feature batch norm's gamma and beta.
        let dense = 1280 * 128 + 128 + 128 * 64 + 64 + 64 * 3 + 3;
        let bn = 2 * 1280;
        assert_eq!(model.head_trainable_parameter_count(), dense + bn);
        assert_eq!(model.head_trainable_parameter_count(), 174_979);
        // freeze_boundary 0: only the head trains.
        assert_eq!(model.trainable_parameter_count(), 174_979);
    }

    #[test]
    fn predict_outputs_probability_rows() {
        let mut model = build_test_model(1);
        let batch = Array4::from_elem((2, 3, 96, 96), 0.5f32);
        let probs = model.predict(&batch);
        assert_eq!(probs.dim(), (2, NUM_CLASSES));
        for row in probs.rows() {
            let sum: f32 = row.sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn build_requires_weights_unless_random_init_is_allowed() {
        let spec = BackboneSpec { weights_path: None, freeze_boundary: 2, allow_random_init: false };
        let err = LeafClassifier::build(&spec, &HeadSpec::default(), &PreprocessSpec::default(), 0)
            .map(|_| ())
            .unwrap_err();
        assert!(matches!(err, Error::MissingWeights(_)));

        let spec = BackboneSpec {
            weights_path: Some(PathBuf::from("/definitely/not/here.safetensors")),
            freeze_boundary: 2,
            allow_random_init: true,
        };
        let err = LeafClassifier::build(&spec, &HeadSpec::default(), &PreprocessSpec::default(), 0)
            .map(|_| ())
            .unwrap_err();
        assert!(matches!(err, Error::MissingWeights(_)));
    }

    #[test]
    fn head_rejects_wrong_layer_count() {
        let spec = HeadSpec { dense_layers: vec![128], dropout_rate: 0.5, output_classes: 3 };
        let backbone = random_backbone_spec();
        assert!(LeafClassifier::build(&backbone, &spec, &PreprocessSpec::default(), 0).is_err());
    }

    #[test]
    fn weight_save_load_roundtrip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.safetensors");
        let batch = Array4::from_elem((1, 3, 64, 64), 0.25f32);

        let mut model = build_test_model(5);
        let before = model.predict(&batch);
        model.save_weights(&path).unwrap();

        // A differently seeded model must disagree until weights are loaded.
        let mut other = build_test_model(6);
        let fresh = other.predict(&batch);
        assert_ne!(before, fresh);
        other.load_all_weights(&path).unwrap();
        let after = other.predict(&batch);
        assert_eq!(before, after, "loaded weights must reproduce predictions bitwise");
    }

    #[test]
    fn load_rejects_malformed_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("garbage.safetensors");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        let mut model = build_test_model(0);
        assert!(matches!(model.load_all_weights(&path), Err(Error::BadCheckpoint { .. })));
    }
}
