//! Adam and RMSProp with the published hyperparameters.
//!
//! The per-element update rules are plain f64 functions; the tensor path
//! applies them element-wise over f32 parameters with f64 slot state, so
//! the scalar rules are exactly what the training loop executes.
//!
//! Adam (bias-corrected, epsilon outside the square root):
//!
//! ```text
//! m <- b1*m + (1-b1)*g        v <- b2*v + (1-b2)*g^2
//! m_hat = m/(1-b1^t)          v_hat = v/(1-b2^t)
//! w <- w - lr * m_hat / (sqrt(v_hat) + eps)
//! ```
//!
//! RMSProp (momentum on the scaled increment):
//!
//! ```text
//! s <- rho*s + (1-rho)*g^2
//! u <- momentum*u + lr * g / (sqrt(s) + eps)
//! w <- w - u
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Rmsprop,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Rmsprop => "rmsprop",
        }
    }

    pub fn parse(s: &str) -> Result<OptimizerKind> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::Rmsprop),
            other => Err(Error::InvalidInput(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    // Adam
    pub beta_1: f64,
    pub beta_2: f64,
    pub amsgrad: bool,
    // RMSProp
    pub rho: f64,
    pub momentum: f64,
    // Shared
    pub epsilon: f64,
}

/// Published defaults: Adam lr=2e-5, beta_1=0.9, beta_2=0.99, eps=1e-8,
/// amsgrad off; RMSProp lr=2e-5, rho=0.98, eps=1e-9, momentum=0.2.
pub fn default_optimizer(kind: OptimizerKind) -> OptimizerConfig {
    match kind {
        OptimizerKind::Adam => OptimizerConfig {
            kind,
            learning_rate: 2e-5,
            beta_1: 0.9,
            beta_2: 0.99,
            amsgrad: false,
            rho: 0.0,
            momentum: 0.0,
            epsilon: 1e-8,
        },
        OptimizerKind::Rmsprop => OptimizerConfig {
            kind,
            learning_rate: 2e-5,
            beta_1: 0.0,
            beta_2: 0.0,
            amsgrad: false,
            rho: 0.98,
            momentum: 0.2,
            epsilon: 1e-9,
        },
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.epsilon <= 0.0 {
            return Err(Error::InvalidInput("learning_rate and epsilon must be > 0".into()));
        }
        match self.kind {
            OptimizerKind::Adam => {
                if !(0.0..1.0).contains(&self.beta_1) || !(0.0..1.0).contains(&self.beta_2) {
                    return Err(Error::InvalidInput("adam betas must lie in (0, 1)".into()));
                }
            }
            OptimizerKind::Rmsprop => {
                if !(0.0..1.0).contains(&self.rho) {
                    return Err(Error::InvalidInput("rmsprop rho must lie in (0, 1)".into()));
                }
            }
        }
        Ok(())
    }
}

/// One Adam update on a single element. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    w: f64,
    g: f64,
    m: &mut f64,
    v: &mut f64,
    vhat_max: &mut f64,
    t: u64,
    cfg: &OptimizerConfig,
) -> f64 {
    *m = cfg.beta_1 * *m + (1.0 - cfg.beta_1) * g;
    *v = cfg.beta_2 * *v + (1.0 - cfg.beta_2) * g * g;
    let m_hat = *m / (1.0 - cfg.beta_1.powi(t as i32));
    let mut v_hat = *v / (1.0 - cfg.beta_2.powi(t as i32));
    if cfg.amsgrad {
        *vhat_max = vhat_max.max(v_hat);
        v_hat = *vhat_max;
    }
    w - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon)
}

/// One RMSProp update on a single element.
pub fn rmsprop_update(w: f64, g: f64, mean_square: &mut f64, momentum: &mut f64, cfg: &OptimizerConfig) -> f64 {
    *mean_square = cfg.rho * *mean_square + (1.0 - cfg.rho) * g * g;
    let increment = cfg.learning_rate * g / (mean_square.sqrt() + cfg.epsilon);
    *momentum = cfg.momentum * *momentum + increment;
    w - *momentum
}

struct Slots {
    a: ArrayD<f64>,
    b: ArrayD<f64>,
    vhat_max: ArrayD<f64>,
}

/// Stateful optimizer over a model's trainable parameters, keyed by
/// parameter name so state survives checkpoints.
pub struct Optimizer {
    pub config: OptimizerConfig,
    step: u64,
    slots: BTreeMap<String, Slots>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Optimizer> {
        config.validate()?;
        Ok(Optimizer { config, step: 0, slots: BTreeMap::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to every trainable parameter from its accumulated
    /// gradient.
    pub fn apply(&mut self, params: Vec<&mut Param>) {
        self.step += 1;
        let t = self.step;
        for p in params {
            if !p.trainable || p.buffer {
                continue;
            }
            let slots = self.slots.entry(p.name.clone()).or_insert_with(|| Slots {
                a: ArrayD::zeros(p.value.raw_dim()),
                b: ArrayD::zeros(p.value.raw_dim()),
                vhat_max: ArrayD::zeros(p.value.raw_dim()),
            });
            let cfg = &self.config;
            match cfg.kind {
                OptimizerKind::Adam => {
                    ndarray::Zip::from(&mut p.value)
                        .and(&p.grad)
                        .and(&mut slots.a)
                        .and(&mut slots.b)
                        .and(&mut slots.vhat_max)
                        .for_each(|w, &g, m, v, vm| {
                            *w = adam_update(*w as f64, g as f64, m, v, vm, t, cfg) as f32;
                        });
                }
                OptimizerKind::Rmsprop => {
                    ndarray::Zip::from(&mut p.value)
                        .and(&p.grad)
                        .and(&mut slots.a)
                        .and(&mut slots.b)
                        .for_each(|w, &g, ms, mom| {
                            *w = rmsprop_update(*w as f64, g as f64, ms, mom, cfg) as f32;
                        });
                }
            }
        }
    }

    /// Persist slot state into a safetensors file alongside given extra
    /// tensors (the caller appends model weights separately).
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, s) in &self.slots {
            for (tag, arr) in [("a", &s.a), ("b", &s.b), ("vm", &s.vhat_max)] {
                let bytes: Vec<u8> = arr.iter().flat_map(|v| v.to_le_bytes()).collect();
                buffers.push((format!("optim.{tag}.{name}"), arr.shape().to_vec(), bytes));
            }
        }
        buffers.push(("optim.step".to_string(), vec![1], (self.step as f64).to_le_bytes().to_vec()));
        let views: Vec<(String, safetensors::tensor::TensorView)> = buffers
            .iter()
            .map(|(name, shape, bytes)| {
                let view =
                    safetensors::tensor::TensorView::new(safetensors::Dtype::F64, shape.clone(), bytes)
                        .expect("tensor view");
                (name.clone(), view)
            })
            .collect();
        let data = safetensors::serialize(views, None)
            .map_err(|e| Error::BadCheckpoint { path: path.into(), reason: e.to_string() })?;
        std::fs::write(path, data).map_err(|e| Error::io(path, e))
    }

    pub fn load_state(&mut self, path: &Path) -> Result<()> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&data)
            .map_err(|e| Error::BadCheckpoint { path: path.into(), reason: e.to_string() })?;
        self.slots.clear();
        let mut grouped: BTreeMap<String, [Option<ArrayD<f64>>; 3]> = BTreeMap::new();
        for (name, view) in st.tensors() {
            let floats: Vec<f64> = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if name == "optim.step" {
                self.step = floats[0] as u64;
                continue;
            }
            let arr = ArrayD::from_shape_vec(ndarray::IxDyn(view.shape()), floats)
                .map_err(|e| Error::BadCheckpoint { path: path.into(), reason: e.to_string() })?;
            let rest = name.strip_prefix("optim.").unwrap_or(&name);
            let (tag, pname) = rest.split_once('.').ok_or_else(|| Error::BadCheckpoint {
                path: path.into(),
                reason: format!("unexpected tensor name {name}"),
            })?;
            let slot = grouped.entry(pname.to_string()).or_default();
            match tag {
                "a" => slot[0] = Some(arr),
                "b" => slot[1] = Some(arr),
                "vm" => slot[2] = Some(arr),
                _ => {
                    return Err(Error::BadCheckpoint {
                        path: path.into(),
                        reason: format!("unexpected tensor name {name}"),
                    })
                }
            }
        }
        for (pname, [a, b, vm]) in grouped {
            let (Some(a), Some(b), Some(vm)) = (a, b, vm) else {
                return Err(Error::BadCheckpoint {
                    path: path.into(),
                    reason: format!("incomplete optimizer slots for {pname}"),
                });
            };
            self.slots.insert(pname, Slots { a, b, vhat_max: vm });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    /// Independent Adam recurrence, written from the update equations with
    /// no shared code, evaluated on a scalar quadratic loss 0.5*(w - c)^2.
    fn adam_reference(cfg: &OptimizerConfig, w0: f64, c: f64, steps: u64) -> f64 {
        let (mut w, mut m, mut v) = (w0, 0.0f64, 0.0f64);
        for t in 1..=steps {
            let g = w - c;
            m = cfg.beta_1 * m + (1.0 - cfg.beta_1) * g;
            v = cfg.beta_2 * v + (1.0 - cfg.beta_2) * g * g;
            let m_hat = m / (1.0 - cfg.beta_1.powi(t as i32));
            let v_hat = v / (1.0 - cfg.beta_2.powi(t as i32));
            w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        w
    }

    /// Independent RMSProp-with-momentum recurrence.
    fn rmsprop_reference(cfg: &OptimizerConfig, w0: f64, c: f64, steps: u64) -> f64 {
        let (mut w, mut s, mut u) = (w0, 0.0f64, 0.0f64);
        for _ in 0..steps {
            let g = w - c;
            s = cfg.rho * s + (1.0 - cfg.rho) * g * g;
            u = cfg.momentum * u + cfg.learning_rate * g / (s.sqrt() + cfg.epsilon);
            w -= u;
        }
        w
    }

    #[test]
    fn adam_update_matches_hand_stepped_recurrence() {
        let cfg = default_optimizer(OptimizerKind::Adam);
        let (mut w, mut m, mut v, mut vm) = (1.5f64, 0.0, 0.0, 0.0);
        for t in 1..=25u64 {
            let g = w - 0.25;
            w = adam_update(w, g, &mut m, &mut v, &mut vm, t, &cfg);
        }
        let want = adam_reference(&cfg, 1.5, 0.25, 25);
        assert!((w - want).abs() < 1e-10, "adam {w} != reference {want}");
    }

    #[test]
    fn rmsprop_update_matches_hand_stepped_recurrence() {
        let cfg = default_optimizer(OptimizerKind::Rmsprop);
        let (mut w, mut s, mut u) = (1.5f64, 0.0, 0.0);
        for _ in 0..25 {
            let g = w - 0.25;
            w = rmsprop_update(w, g, &mut s, &mut u, &cfg);
        }
        let want = rmsprop_reference(&cfg, 1.5, 0.25, 25);
        assert!((w - want).abs() < 1e-10, "rmsprop {w} != reference {want}");
    }

    #[test]
    fn amsgrad_keeps_the_running_maximum() {
        let mut cfg = default_optimizer(OptimizerKind::Adam);
        cfg.amsgrad = true;
        let (mut m, mut v, mut vm) = (0.0, 0.0, 0.0);
        // Large gradient first, then tiny: v_hat decays but vm must not.
        adam_update(1.0, 10.0, &mut m, &mut v, &mut vm, 1, &cfg);
        let vm_after_big = vm;
        adam_update(1.0, 1e-6, &mut m, &mut v, &mut vm, 2, &cfg);
        assert_eq!(vm, vm_after_big);
    }

    fn scalar_param(name: &str, value: f32) -> Param {
        Param::weight(name, ndarray::ArrayD::from_elem(IxDyn(&[1]), value))
    }

    #[test]
    fn tensor_path_equals_scalar_path() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Rmsprop] {
            let cfg = default_optimizer(kind);
            let mut opt = Optimizer::new(cfg).unwrap();
            let mut p = scalar_param("w", 2.0);

            let (mut m, mut v, mut vm) = (0.0f64, 0.0, 0.0);
            for t in 1..=10u64 {
                p.grad[0] = (p.value[0] * 0.5 - 0.1) as f32;
                // Mirror the tensor path exactly: f32 weight and gradient,
                // f64 slot state.
                let w_prev = p.value[0] as f64;
                let g = p.grad[0] as f64;
                let want = match kind {
                    OptimizerKind::Adam => adam_update(w_prev, g, &mut m, &mut v, &mut vm, t, &cfg),
                    OptimizerKind::Rmsprop => rmsprop_update(w_prev, g, &mut m, &mut v, &cfg),
                } as f32;
                opt.apply(vec![&mut p]);
                assert_eq!(p.value[0], want, "{kind:?} step {t}");
            }
            assert_eq!(opt.step_count(), 10);
        }
    }

    #[test]
    fn frozen_params_and_buffers_are_never_updated() {
        let cfg = default_optimizer(OptimizerKind::Adam);
        let mut opt = Optimizer::new(cfg).unwrap();
        let mut frozen = scalar_param("frozen", 1.0);
        frozen.trainable = false;
        frozen.grad[0] = 5.0;
        let mut buffer = Param::buffer("stat", ndarray::ArrayD::from_elem(IxDyn(&[1]), 3.0f32));
        opt.apply(vec![&mut frozen, &mut buffer]);
        assert_eq!(frozen.value[0], 1.0);
        assert_eq!(buffer.value[0], 3.0);
    }

    #[test]
    fn optimizer_state_roundtrip_resumes_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("optim.safetensors");
        let cfg = default_optimizer(OptimizerKind::Adam);

        // Run 5 steps, checkpoint, run 5 more.
        let mut opt = Optimizer::new(cfg).unwrap();
        let mut p = scalar_param("w", 1.0);
        for _ in 0..5 {
            p.grad[0] = p.value[0] - 0.2;
            opt.apply(vec![&mut p]);
        }
        opt.save_state(&path).unwrap();
        let w_mid = p.value[0];
        for _ in 0..5 {
            p.grad[0] = p.value[0] - 0.2;
            opt.apply(vec![&mut p]);
        }
        let w_end = p.value[0];

        // Fresh optimizer, state loaded from the checkpoint.
        let mut opt2 = Optimizer::new(cfg).unwrap();
        opt2.load_state(&path).unwrap();
        assert_eq!(opt2.step_count(), 5);
        let mut q = scalar_param("w", w_mid);
        for _ in 0..5 {
            q.grad[0] = q.value[0] - 0.2;
            opt2.apply(vec![&mut q]);
        }
        assert_eq!(q.value[0], w_end, "resumed trajectory must match uninterrupted one");
    }

    #[test]
    fn config_validation_rejects_bad_hyperparameters() {
        let mut cfg = default_optimizer(OptimizerKind::Adam);
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = default_optimizer(OptimizerKind::Adam);
        cfg.beta_1 = 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = default_optimizer(OptimizerKind::Rmsprop);
        cfg.rho = 1.5;
        assert!(cfg.validate().is_err());

        assert!(default_optimizer(OptimizerKind::Adam).validate().is_ok());
        assert!(default_optimizer(OptimizerKind::Rmsprop).validate().is_ok());
    }

    #[test]
    fn published_defaults_are_frozen() {
        let adam = default_optimizer(OptimizerKind::Adam);
        assert_eq!(adam.learning_rate, 2e-5);
        assert_eq!(adam.beta_1, 0.9);
        assert_eq!(adam.beta_2, 0.99);
        assert_eq!(adam.epsilon, 1e-8);
        assert!(!adam.amsgrad);
        let rms = default_optimizer(OptimizerKind::Rmsprop);
        assert_eq!(rms.learning_rate, 2e-5);
        assert_eq!(rms.rho, 0.98);
        assert_eq!(rms.momentum, 0.2);
        assert_eq!(rms.epsilon, 1e-9);
    }
}
