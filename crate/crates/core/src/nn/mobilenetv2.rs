//! MobileNetV2-style feature extractor: stem convolution, 17 inverted
//! residual blocks, and a final 1x1 convolution up to 1280 channels.
//! For a 224x224 input the pre-pooling feature map is 7x7x1280.
//!
//! The backbone is split into "units" (stem, each block, final conv); the
//! freeze boundary counts how many trailing units are trainable. Frozen
//! units never cache activations and never accumulate gradients.

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{BatchNorm2d, Conv2d, DepthwiseConv2d, Param, Relu6};

/// `(expansion, out_channels, repeats, first_stride)` per block group.
const BLOCK_SETTINGS: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

pub const FEATURE_CHANNELS: usize = 1280;
pub const STEM_CHANNELS: usize = 32;

struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: Relu6,
}

impl ConvBnRelu {
    fn new(name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut ChaCha20Rng) -> ConvBnRelu {
        ConvBnRelu {
            conv: Conv2d::new(&format!("{name}.conv"), c_in, c_out, kernel, stride, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), c_out),
            act: Relu6::new(),
        }
    }

    fn forward(&mut self, x: &Array4<f32>, cache: bool) -> Array4<f32> {
        let y = self.conv.forward(x, cache);
        let y = self.bn.forward(&y, cache);
        self.act.forward(&y, cache)
    }

    fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let d = self.act.backward(dy);
        let d = self.bn.backward(&d);
        self.conv.backward(&d)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.conv.weight,
            &mut self.bn.gamma,
            &mut self.bn.beta,
            &mut self.bn.running_mean,
            &mut self.bn.running_var,
        ]
    }
}

struct InvertedResidual {
    expand: Option<ConvBnRelu>,
    depthwise: DepthwiseConv2d,
    dw_bn: BatchNorm2d,
    dw_act: Relu6,
    project: Conv2d,
    project_bn: BatchNorm2d,
    use_residual: bool,
}

impl InvertedResidual {
    fn new(name: &str, c_in: usize, c_out: usize, stride: usize, expansion: usize, rng: &mut ChaCha20Rng) -> InvertedResidual {
        let c_hidden = c_in * expansion;
        let expand = if expansion != 1 {
            Some(ConvBnRelu::new(&format!("{name}.expand"), c_in, c_hidden, 1, 1, rng))
        } else {
            None
        };
        InvertedResidual {
            expand,
            depthwise: DepthwiseConv2d::new(&format!("{name}.depthwise"), c_hidden, 3, stride, rng),
            dw_bn: BatchNorm2d::new(&format!("{name}.depthwise_bn"), c_hidden),
            dw_act: Relu6::new(),
            project: Conv2d::new(&format!("{name}.project"), c_hidden, c_out, 1, 1, rng),
            project_bn: BatchNorm2d::new(&format!("{name}.project_bn"), c_out),
            use_residual: stride == 1 && c_in == c_out,
        }
    }

    fn forward(&mut self, x: &Array4<f32>, cache: bool) -> Array4<f32> {
        let mut y = match &mut self.expand {
            Some(e) => e.forward(x, cache),
            None => x.clone(),
        };
        y = self.depthwise.forward(&y, cache);
        y = self.dw_bn.forward(&y, cache);
        y = self.dw_act.forward(&y, cache);
        y = self.project.forward(&y, cache);
        y = self.project_bn.forward(&y, cache);
        if self.use_residual {
            y += x;
        }
        y
    }

    fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let d = self.project_bn.backward(dy);
        let d = self.project.backward(&d);
        let d = self.dw_act.backward(&d);
        let d = self.dw_bn.backward(&d);
        let d = self.depthwise.backward(&d);
        let mut dx = match &mut self.expand {
            Some(e) => e.backward(&d),
            None => d,
        };
        if self.use_residual {
            dx += dy;
        }
        dx
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        if let Some(e) = &mut self.expand {
            out.extend(e.params_mut());
        }
        out.push(&mut self.depthwise.weight);
        out.extend([
            &mut self.dw_bn.gamma,
            &mut self.dw_bn.beta,
            &mut self.dw_bn.running_mean,
            &mut self.dw_bn.running_var,
        ]);
        out.push(&mut self.project.weight);
        out.extend([
            &mut self.project_bn.gamma,
            &mut self.project_bn.beta,
            &mut self.project_bn.running_mean,
            &mut self.project_bn.running_var,
        ]);
        out
    }
}

enum Unit {
    Stem(ConvBnRelu),
    Block(InvertedResidual),
    FinalConv(ConvBnRelu),
}

impl Unit {
    fn forward(&mut self, x: &Array4<f32>, cache: bool) -> Array4<f32> {
        match self {
            Unit::Stem(u) | Unit::FinalConv(u) => u.forward(x, cache),
            Unit::Block(b) => b.forward(x, cache),
        }
    }

    fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        match self {
            Unit::Stem(u) | Unit::FinalConv(u) => u.backward(dy),
            Unit::Block(b) => b.backward(dy),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Unit::Stem(u) | Unit::FinalConv(u) => u.params_mut(),
            Unit::Block(b) => b.params_mut(),
        }
    }
}

pub struct MobileNetV2 {
    units: Vec<Unit>,
    /// Trailing trainable units; everything earlier is frozen.
    freeze_boundary: usize,
}

impl MobileNetV2 {
    /// Seeded random initialization. Pretrained weights are loaded on top
    /// via the checkpoint machinery.
    pub fn new(init_seed: u64) -> MobileNetV2 {
        let mut rng = ChaCha20Rng::seed_from_u64(init_seed);
        let mut units = Vec::new();
        units.push(Unit::Stem(ConvBnRelu::new("backbone.stem", 3, STEM_CHANNELS, 3, 2, &mut rng)));
        let mut c_in = STEM_CHANNELS;
        let mut block_idx = 0usize;
        for &(expansion, c_out, repeats, first_stride) in &BLOCK_SETTINGS {
            for rep in 0..repeats {
                block_idx += 1;
                let stride = if rep == 0 { first_stride } else { 1 };
                let name = format!("backbone.block{block_idx:02}");
                units.push(Unit::Block(InvertedResidual::new(&name, c_in, c_out, stride, expansion, &mut rng)));
                c_in = c_out;
            }
        }
        units.push(Unit::FinalConv(ConvBnRelu::new("backbone.final", c_in, FEATURE_CHANNELS, 1, 1, &mut rng)));
        let mut model = MobileNetV2 { units, freeze_boundary: 0 };
        model.set_freeze_boundary(0);
        model
    }

    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    /// `boundary` = number of trailing trainable units (0 = fully frozen).
    pub fn set_freeze_boundary(&mut self, boundary: usize) {
        let n = self.units.len();
        let boundary = boundary.min(n);
        self.freeze_boundary = boundary;
        for (i, unit) in self.units.iter_mut().enumerate() {
            let trainable = i >= n - boundary;
            for p in unit.params_mut() {
                if !p.buffer {
                    p.trainable = trainable;
                }
            }
        }
    }

    pub fn freeze_boundary(&self) -> usize {
        self.freeze_boundary
    }

    fn split_index(&self) -> usize {
        self.units.len() - self.freeze_boundary
    }

    /// Run the frozen prefix (no activation caching).
    pub fn forward_frozen(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let split = self.split_index();
        let mut y = x.clone();
        for unit in &mut self.units[..split] {
            y = unit.forward(&y, false);
        }
        y
    }

    /// Run the trainable tail from the frozen prefix's output. With
    /// `cache = true` the tail can be back-propagated afterwards.
    pub fn forward_tail(&mut self, boundary_activation: &Array4<f32>, cache: bool) -> Array4<f32> {
        let split = self.split_index();
        let mut y = boundary_activation.clone();
        for unit in &mut self.units[split..] {
            y = unit.forward(&y, cache);
        }
        y
    }

    /// Back-propagate through the trainable tail, accumulating gradients.
    pub fn backward_tail(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let split = self.split_index();
        let mut d = dy.clone();
        for unit in self.units[split..].iter_mut().rev() {
            d = unit.backward(&d);
        }
        d
    }

    /// Full forward pass to the 7x7x1280 feature map (inference).
    pub fn forward(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let frozen = self.forward_frozen(x);
        self.forward_tail(&frozen, false)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.units.iter_mut().flat_map(|u| u.params_mut()).collect()
    }

    pub fn trainable_parameter_count(&mut self) -> usize {
        self.params_mut()
            .into_iter()
            .filter(|p| p.trainable && !p.buffer)
            .map(|p| p.len())
            .sum()
    }
}
