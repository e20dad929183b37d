//! Oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vessel_core::eval::Confusion;
use vessel_core::nn::{bce_logits, image_to_tensor, ModelConfig, NetworkCache, Tensor, TwoStage};
use vessel_core::raster::{Mask, Plane};

pub fn brute_counts(pred: &Mask, gt: &Mask) -> Confusion {
    let mut c = Confusion::default();
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            match (pred.get(x, y), gt.get(x, y)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    c
}

/// All positive/negative pairs, ties worth one half.
pub fn brute_auc(prob: &Plane, gt: &Mask) -> f64 {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            if gt.get(x, y) {
                pos.push(prob.get(x, y));
            } else {
                neg.push(prob.get(x, y));
            }
        }
    }
    let mut s = 0.0;
    for &p in &pos {
        for &n in &neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

/// Random probabilities, a third of them on a coarse grid so ties occur,
/// against a mask with about 20% foreground.
pub fn random_case(rng: &mut ChaCha8Rng, w: usize, h: usize) -> (Plane, Mask) {
    let prob = Plane::from_fn(w, h, |_, _| {
        if rng.gen_bool(0.3) {
            (rng.gen_range(0..8) as f32) / 8.0
        } else {
            rng.gen()
        }
    });
    let gt = Mask::from_fn(w, h, |_, _| rng.gen_bool(0.2));
    (prob, gt)
}

fn loss_of(net: &TwoStage<f64>, x: &Tensor<f64>, y: &[f64]) -> f64 {
    let (_, z) = net.forward(x, None);
    bce_logits(&z.data, &[(y, 1.0)]).unwrap().0
}

/// Analytic gradients against central differences on the four largest
/// gradient entries of every parameter tensor. Entries below `1e-6` sit
/// under the difference quotient's rounding floor and are skipped, as are
/// the few whose stencil crosses a non-differentiable point.
pub fn gradient_check(concat_raw: bool) -> f64 {
    let cfg = ModelConfig {
        base_channels: 4,
        seed: 11,
        concat_raw,
        ..Default::default()
    };
    let mut net = cfg.build::<f64>().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Small random biases so no unit sits exactly at a ReLU kink.
    for p in net.params_mut() {
        if p.len() <= 64 {
            p.value.iter_mut().for_each(|v| *v = rng.gen_range(-0.05..0.05));
        }
    }
    let img = vessel_core::raster::RgbImage::from_fn(16, 16, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
    let x = image_to_tensor::<f64>(&[&img]).unwrap();
    let y: Vec<f64> = (0..256).map(|_| rng.gen_bool(0.3) as u8 as f64).collect();

    let mut cache = NetworkCache::default();
    net.zero_grad();
    let (_, z) = net.forward(&x, Some(&mut cache));
    let (_, g) = bce_logits(&z.data, &[(&y, 1.0)]).unwrap();
    net.backward(&cache, &Tensor::from_vec(1, 1, 16, 16, g));
    let analytic: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();

    let mut fd = |pi: usize, j: usize, h: f64| {
        let orig = net.params()[pi].value[j];
        net.params_mut()[pi].value[j] = orig + h;
        let lp = loss_of(&net, &x, &y);
        net.params_mut()[pi].value[j] = orig - h;
        let lm = loss_of(&net, &x, &y);
        net.params_mut()[pi].value[j] = orig;
        (lp - lm) / (2.0 * h)
    };
    let mut worst = 0.0f64;
    let (mut checked, mut kinks) = (0, 0);
    for (pi, grad) in analytic.iter().enumerate() {
        let mut order: Vec<usize> = (0..grad.len()).collect();
        order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
        for &j in order.iter().take(4) {
            let a = grad[j];
            if a.abs() < 1e-6 {
                continue;
            }
            let coarse = fd(pi, j, 1e-5);
            let fine = fd(pi, j, 2.5e-6);
            checked += 1;
            let rel = |q: f64| (a - q).abs() / a.abs().max(q.abs());
            let err = rel(coarse).min(rel(fine));
            // A ReLU or max-pool switch inside the stencil shows up as a
            // step-size dependent quotient.
            if err >= 1e-4 && (coarse - fine).abs() > 1e-4 * coarse.abs().max(fine.abs()) {
                kinks += 1;
                continue;
            }
            worst = worst.max(err);
        }
    }
    assert!(checked >= 100, "only {checked} entries checked");
    assert!(kinks * 10 <= checked, "{kinks} of {checked} entries straddle a kink");
    worst
}
