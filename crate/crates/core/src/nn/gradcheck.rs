//! Central finite-difference verification of every analytic gradient in
//! the engine. All checks run in f64.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    conv2d_backward, conv2d_forward, fc_backward, fc_forward, pool2d_backward, pool2d_forward,
    relu_backward, relu_forward, softmax_cross_entropy, PoolKind,
};
use super::tensor::Tensor;
use super::train::{l2_normalize_backward, l2_normalize_with_grad, triplet_loss};

/// Relative error with a unit floor, the usual gradient-check metric.
pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Central differences of a scalar function at `x`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

/// Objective used for layers with tensor output: sum of the output
/// contracted with a fixed random cotangent.
fn contract(out: &[f64], cotangent: &[f64]) -> f64 {
    out.iter().zip(cotangent).map(|(a, b)| a * b).sum()
}

/// conv2d: checks input, filter, and bias gradients on random small
/// instances (6x5 spatial, 2 channels, 3 filters). Returns the max
/// relative error.
pub fn check_conv2d(trials: usize, h: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, ih, iw, f, k) = (2usize, 6usize, 5usize, 3usize, 3usize);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let stride = 1 + (rng.random::<u32>() % 2) as usize;
        let pad = (rng.random::<u32>() % 2) as usize;
        let x = Tensor::from_vec(&[c, ih, iw], rand_vec(&mut rng, c * ih * iw));
        let w = Tensor::from_vec(&[f, c, k, k], rand_vec(&mut rng, f * c * k * k));
        let b = rand_vec(&mut rng, f);
        let out = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
        let cot = rand_vec(&mut rng, out.len());
        let dout = Tensor::from_vec(out.shape(), cot.clone());
        let (dx, dw, db) = conv2d_backward(&x, &w, &dout, stride, pad);

        let nx = central_difference(
            &mut |v| {
                let xt = Tensor::from_vec(&[c, ih, iw], v.to_vec());
                contract(
                    conv2d_forward(&xt, &w, &b, stride, pad).unwrap().data(),
                    &cot,
                )
            },
            x.data(),
            h,
        );
        let nw = central_difference(
            &mut |v| {
                let wt = Tensor::from_vec(&[f, c, k, k], v.to_vec());
                contract(
                    conv2d_forward(&x, &wt, &b, stride, pad).unwrap().data(),
                    &cot,
                )
            },
            w.data(),
            h,
        );
        let nb = central_difference(
            &mut |v| contract(conv2d_forward(&x, &w, v, stride, pad).unwrap().data(), &cot),
            &b,
            h,
        );
        worst = worst
            .max(max_rel(dx.data(), &nx))
            .max(max_rel(dw.data(), &nw))
            .max(max_rel(&db, &nb));
    }
    worst
}

/// Pool gradients; max pooling draws inputs with comfortably distinct
/// window values so the argmax is stable under the probe step.
pub fn check_pool(kind: PoolKind, trials: usize, h: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, ih, iw, k, stride) = (2usize, 5usize, 4usize, 2usize, 2usize);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let pad = t % 2;
        let n = c * ih * iw;
        // Distinct spread values keep max-pool argmax stable under +-h.
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
        for v in vals.iter_mut() {
            *v += rng.random::<f64>() * 0.01;
        }
        let x = Tensor::from_vec(&[c, ih, iw], vals);
        let (out, argmax) = pool2d_forward(&x, kind, k, stride, pad).unwrap();
        let cot = rand_vec(&mut rng, out.len());
        let dout = Tensor::from_vec(out.shape(), cot.clone());
        let dx = pool2d_backward(x.shape(), kind, &dout, argmax.as_deref(), k, stride, pad);
        let nx = central_difference(
            &mut |v| {
                let xt = Tensor::from_vec(&[c, ih, iw], v.to_vec());
                contract(pool2d_forward(&xt, kind, k, stride, pad).unwrap().0.data(), &cot)
            },
            x.data(),
            h,
        );
        worst = worst.max(max_rel(dx.data(), &nx));
    }
    worst
}

pub fn check_fc(trials: usize, h: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (in_dim, out_dim) = (7usize, 4usize);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = rand_vec(&mut rng, in_dim);
        let w = Tensor::from_vec(&[out_dim, in_dim], rand_vec(&mut rng, in_dim * out_dim));
        let cot = rand_vec(&mut rng, out_dim);
        let (dx, dw, db) = fc_backward(&x, &w, &cot);
        let b = rand_vec(&mut rng, out_dim);
        let nx = central_difference(
            &mut |v| contract(&fc_forward(v, &w, &b).unwrap(), &cot),
            &x,
            h,
        );
        let nw = central_difference(
            &mut |v| {
                let wt = Tensor::from_vec(&[out_dim, in_dim], v.to_vec());
                contract(&fc_forward(&x, &wt, &b).unwrap(), &cot)
            },
            w.data(),
            h,
        );
        let nb = central_difference(
            &mut |v| contract(&fc_forward(&x, &w, v).unwrap(), &cot),
            &b,
            h,
        );
        worst = worst
            .max(max_rel(&dx, &nx))
            .max(max_rel(dw.data(), &nw))
            .max(max_rel(&db, &nb));
    }
    worst
}

/// ReLU gradient away from the kink at zero.
pub fn check_relu(trials: usize, h: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 20usize;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x: Vec<f64> = (0..n)
            .map(|_| {
                let v = rng.random::<f64>() * 2.0 - 1.0;
                // Keep the probe step away from the nondifferentiable point.
                if v.abs() < 0.05 {
                    v + 0.1 * v.signum().max(0.5)
                } else {
                    v
                }
            })
            .collect();
        let xt = Tensor::from_vec(&[n], x.clone());
        let cot = rand_vec(&mut rng, n);
        let dx = relu_backward(&xt, &Tensor::from_vec(&[n], cot.clone()));
        let nx = central_difference(
            &mut |v| {
                let t = Tensor::from_vec(&[n], v.to_vec());
                contract(relu_forward(&t).data(), &cot)
            },
            &x,
            h,
        );
        worst = worst.max(max_rel(dx.data(), &nx));
    }
    worst
}

pub fn check_softmax(trials: usize, h: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 11usize;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let logits = rand_vec(&mut rng, classes);
        let label = (rng.random::<u32>() as usize) % classes;
        let (_, grad) = softmax_cross_entropy(&logits, label).unwrap();
        let numeric = central_difference(
            &mut |v| softmax_cross_entropy(v, label).unwrap().0,
            &logits,
            h,
        );
        worst = worst.max(max_rel(&grad, &numeric));
    }
    worst
}

/// Active-case triplet loss on random normalized triplets.
pub fn check_triplet(trials: usize, h: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 8usize;
    let margin = 0.2f64;
    let mut worst = 0.0f64;
    let mut done = 0usize;
    while done < trials {
        let unit = |rng: &mut ChaCha8Rng| {
            let (v, _) = l2_normalize_with_grad(&rand_vec(rng, dim));
            v
        };
        let (a, p, n) = (unit(&mut rng), unit(&mut rng), unit(&mut rng));
        let (loss, da, dp, dn) = triplet_loss(&a, &p, &n, margin);
        // Stay comfortably inside the active region so the probe cannot
        // cross the hinge.
        if loss < 0.05 {
            continue;
        }
        done += 1;
        let stacked: Vec<f64> = a.iter().chain(&p).chain(&n).copied().collect();
        let numeric = central_difference(
            &mut |v| triplet_loss(&v[..dim], &v[dim..2 * dim], &v[2 * dim..], margin).0,
            &stacked,
            h,
        );
        let analytic: Vec<f64> = da.iter().chain(&dp).chain(&dn).copied().collect();
        worst = worst.max(max_rel(&analytic, &numeric));
    }
    worst
}

/// Triplet loss composed with the in-training L2 normalization, verifying
/// the stage-2 backward path end to end at the feature level.
pub fn check_normalized_triplet(trials: usize, h: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 6usize;
    let margin = 0.2f64;
    let mut worst = 0.0f64;
    let mut done = 0usize;
    let objective = |v: &[f64]| {
        let (a, _) = l2_normalize_with_grad(&v[..dim]);
        let (p, _) = l2_normalize_with_grad(&v[dim..2 * dim]);
        let (n, _) = l2_normalize_with_grad(&v[2 * dim..]);
        triplet_loss(&a, &p, &n, margin).0
    };
    while done < trials {
        let raw = rand_vec(&mut rng, 3 * dim);
        if raw.chunks(dim).any(|c| c.iter().map(|v| v * v).sum::<f64>() < 0.1) {
            continue;
        }
        let (a, na) = l2_normalize_with_grad(&raw[..dim]);
        let (p, np) = l2_normalize_with_grad(&raw[dim..2 * dim]);
        let (n, nn) = l2_normalize_with_grad(&raw[2 * dim..]);
        let (loss, da, dp, dn) = triplet_loss(&a, &p, &n, margin);
        if loss < 0.05 {
            continue;
        }
        done += 1;
        let mut analytic = l2_normalize_backward(&a, na, &da);
        analytic.extend(l2_normalize_backward(&p, np, &dp));
        analytic.extend(l2_normalize_backward(&n, nn, &dn));
        let numeric = central_difference(&mut { |v: &[f64]| objective(v) }, &raw, h);
        worst = worst.max(max_rel(&analytic, &numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-6;

    #[test]
    fn conv2d_gradients() {
        let e = check_conv2d(4, H, 101);
        assert!(e < TOL, "max rel error {e}");
    }

    #[test]
    fn maxpool_gradients() {
        let e = check_pool(PoolKind::Max, 4, H, 102);
        assert!(e < TOL, "max rel error {e}");
    }

    #[test]
    fn meanpool_gradients_are_exact() {
        let e = check_pool(PoolKind::Mean, 4, H, 103);
        assert!(e < 1e-10, "max rel error {e}");
    }

    #[test]
    fn fc_gradients() {
        let e = check_fc(4, H, 104);
        assert!(e < TOL, "max rel error {e}");
    }

    #[test]
    fn relu_gradients_away_from_zero() {
        let e = check_relu(4, H, 105);
        assert!(e < TOL, "max rel error {e}");
    }

    #[test]
    fn softmax_gradients() {
        let e = check_softmax(6, H, 106);
        assert!(e < TOL, "max rel error {e}");
    }

    #[test]
    fn triplet_gradients_active_case() {
        let e = check_triplet(6, H, 107);
        assert!(e < TOL, "max rel error {e}");
    }

    #[test]
    fn normalized_triplet_gradients() {
        let e = check_normalized_triplet(6, H, 108);
        assert!(e < TOL, "max rel error {e}");
    }
}
