// Finite-difference check of the head's analytic gradients. The loss is
// evaluated with a fixed dropout stream so both sides see the same masks.
//
// Two complementary checks:
//  - per-coordinate central differences on sampled weights. ReLU kinks can
//    make a central difference on a near-zero gradient land a factor off,
//    so tiny absolute disagreements are tolerated; any systematic backward
//    bug shows up on the large-magnitude coordinates.
//  - a directional derivative along the full gradient, which averages the
//    kink noise away and must match ||g||^2 closely.

use leafcls::classifier::{Head, HeadSpec};
use leafcls::nn;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn fresh_head() -> Head {
    let mut init = ChaCha20Rng::seed_from_u64(1);
    Head::new(&HeadSpec::default(), &mut init).unwrap()
}

fn fixture() -> (Array2<f32>, Array2<f32>) {
    let n = 4;
    let mut data_rng = ChaCha20Rng::seed_from_u64(2);
    let pooled = Array2::from_shape_fn((n, 1280), |_| data_rng.random_range(0.0..4.0f32));
    let mut targets = Array2::zeros((n, 3));
    for i in 0..n {
        targets[[i, i % 3]] = 1.0;
    }
    (pooled, targets)
}

fn loss_of(head: &mut Head, pooled: &Array2<f32>, targets: &Array2<f32>) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let logits = head.forward_train(pooled, &mut rng);
    let probs = nn::softmax(&logits);
    nn::cross_entropy(&probs, targets) as f64
}

fn analytic_gradients(head: &mut Head, pooled: &Array2<f32>, targets: &Array2<f32>) {
    for p in head.params_mut() {
        p.zero_grad();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let logits = head.forward_train(pooled, &mut rng);
    let probs = nn::softmax(&logits);
    let dlogits = nn::softmax_cce_grad(&probs, targets);
    head.backward(&dlogits);
}

#[test]
fn head_gradients_match_finite_differences_per_coordinate() {
    let (pooled, targets) = fixture();
    let mut head = fresh_head();
    analytic_gradients(&mut head, &pooled, &targets);

    let grads: Vec<(String, Vec<(usize, f32)>)> = head
        .params_mut()
        .iter()
        .filter(|p| p.trainable && !p.buffer)
        .map(|p| {
            let mut idx_rng = ChaCha20Rng::seed_from_u64(7);
            let picks: Vec<(usize, f32)> = (0..5)
                .map(|_| {
                    let i = idx_rng.random_range(0..p.grad.len());
                    (i, p.grad.as_slice().unwrap()[i])
                })
                .collect();
            (p.name.clone(), picks)
        })
        .collect();

    let eps = 1e-2f32;
    for (name, picks) in &grads {
        for &(i, g) in picks {
            let perturb = |head: &mut Head, delta: f32| {
                for p in head.params_mut() {
                    if &p.name == name {
                        p.value.as_slice_mut().unwrap()[i] += delta;
                    }
                }
            };
            perturb(&mut head, eps);
            let lp = loss_of(&mut head, &pooled, &targets);
            perturb(&mut head, -2.0 * eps);
            let lm = loss_of(&mut head, &pooled, &targets);
            perturb(&mut head, eps);
            let num = ((lp - lm) / (2.0 * eps as f64)) as f32;
            let rel = (num - g).abs() / num.abs().max(g.abs()).max(1e-4);
            let abs = (num - g).abs();
            assert!(
                rel < 0.05 || abs < 5e-3,
                "{name}[{i}]: analytic {g:.7} vs numeric {num:.7} (rel {rel:.4}, abs {abs:.6})"
            );
        }
    }
}

#[test]
fn head_gradients_match_directional_derivative() {
    let (pooled, targets) = fixture();
    let mut head = fresh_head();
    analytic_gradients(&mut head, &pooled, &targets);

    // Snapshot gradient and its squared norm.
    let grads: Vec<(String, Vec<f32>)> = head
        .params_mut()
        .iter()
        .filter(|p| p.trainable && !p.buffer)
        .map(|p| (p.name.clone(), p.grad.iter().copied().collect()))
        .collect();
    let norm_sq: f64 = grads.iter().flat_map(|(_, g)| g).map(|&v| (v as f64) * (v as f64)).sum();
    let max_abs = grads.iter().flat_map(|(_, g)| g).fold(0.0f32, |a, &v| a.max(v.abs()));
    assert!(norm_sq > 0.0);

    // Step along the gradient so the largest coordinate moves by 1e-5; a
    // bigger step flips ReLU units and visibly bends the loss.
    let eps = 1e-5 / max_abs as f64;
    let step = |head: &mut Head, sign: f64| {
        for p in head.params_mut() {
            if let Some((_, g)) = grads.iter().find(|(name, _)| name == &p.name) {
                for (w, gv) in p.value.as_slice_mut().unwrap().iter_mut().zip(g) {
                    *w += (sign * eps * (*gv as f64)) as f32;
                }
            }
        }
    };
    step(&mut head, 1.0);
    let lp = loss_of(&mut head, &pooled, &targets);
    step(&mut head, -2.0);
    let lm = loss_of(&mut head, &pooled, &targets);
    step(&mut head, 1.0);

    let directional = (lp - lm) / (2.0 * eps);
    let rel = (directional - norm_sq).abs() / norm_sq;
    assert!(
        rel < 1e-2,
        "directional derivative {directional:.8} vs ||g||^2 {norm_sq:.8} (rel {rel:.5})"
    );
}
