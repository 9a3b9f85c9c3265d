//! Forward/backward kernels for the fixed layer vocabulary: conv,
//! max/mean pool, ReLU, fully-connected, dropout, softmax loss.
//!
//! Convolution uses the cross-correlation convention. Output extent per
//! axis is floor((in + 2*pad - k)/stride) + 1. Mean pooling counts padded
//! cells as zeros with a full-window divisor; max pooling never considers
//! padded cells.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Scalar, Tensor};
use super::NetError;

#[inline]
fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

fn check_spatial(name: &str, input: &[usize], k: usize, stride: usize, pad: usize) -> Result<(), NetError> {
    if input.len() != 3 {
        return Err(NetError::Dimension(format!(
            "{name}: expected [channels, h, w] input, got shape {input:?}"
        )));
    }
    if stride == 0 {
        return Err(NetError::Dimension(format!("{name}: zero stride")));
    }
    for &extent in &input[1..] {
        if extent + 2 * pad < k {
            return Err(NetError::Dimension(format!(
                "{name}: input extent {extent} + 2*{pad} smaller than filter {k}"
            )));
        }
    }
    Ok(())
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    w: &Tensor<T>,
    b: &[T],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, NetError> {
    let k = w.shape()[2];
    check_spatial("conv2d", input.shape(), k, stride, pad)?;
    let (c_in, h, wd) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let f = w.shape()[0];
    if w.shape() != [f, c_in, k, k] {
        return Err(NetError::Dimension(format!(
            "conv2d: filter shape {:?} does not match input channels {c_in}",
            w.shape()
        )));
    }
    let oh = out_extent(h, k, stride, pad);
    let ow = out_extent(wd, k, stride, pad);
    let mut out = Tensor::zeros(&[f, oh, ow]);
    let x = input.data();
    let wv = w.data();
    let o = out.data_mut();
    for fi in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[fi];
                for c in 0..c_in {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = (c * h + iy as usize) * wd;
                        let wrow = ((fi * c_in + c) * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += x[row + ix as usize] * wv[wrow + kx];
                        }
                    }
                }
                o[(fi * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok(out)
}

/// Gradients of conv2d w.r.t. input, filters, and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let (c_in, h, wd) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (f, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = (dout.shape()[1], dout.shape()[2]);
    let mut dinput = Tensor::zeros(input.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = vec![T::zero(); f];
    let x = input.data();
    let wv = w.data();
    let g = dout.data();
    let dx = dinput.data_mut();
    let dwv = dw.data_mut();
    for fi in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = g[(fi * oh + oy) * ow + ox];
                if go == T::zero() {
                    continue;
                }
                db[fi] += go;
                for c in 0..c_in {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = (c * h + iy as usize) * wd;
                        let wrow = ((fi * c_in + c) * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            dwv[wrow + kx] += x[row + ix as usize] * go;
                            dx[row + ix as usize] += wv[wrow + kx] * go;
                        }
                    }
                }
            }
        }
    }
    (dinput, dw, db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
}

/// Sentinel for max-pool windows with no in-bounds candidate.
const NO_ARGMAX: usize = usize::MAX;

pub fn pool2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kind: PoolKind,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Option<Vec<usize>>), NetError> {
    check_spatial("pool2d", input.shape(), k, stride, pad)?;
    let (c_in, h, wd) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let oh = out_extent(h, k, stride, pad);
    let ow = out_extent(wd, k, stride, pad);
    let mut out = Tensor::zeros(&[c_in, oh, ow]);
    let x = input.data();
    let o = out.data_mut();
    let mut argmax = if kind == PoolKind::Max {
        Some(vec![NO_ARGMAX; c_in * oh * ow])
    } else {
        None
    };
    let window_area = T::from_f64((k * k) as f64);
    for c in 0..c_in {
        for oy in 0..oh {
            for ox in 0..ow {
                let oidx = (c * oh + oy) * ow + ox;
                match kind {
                    PoolKind::Max => {
                        let mut best = T::neg_infinity();
                        let mut best_idx = NO_ARGMAX;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let idx = (c * h + iy as usize) * wd + ix as usize;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        if best_idx == NO_ARGMAX {
                            o[oidx] = T::zero();
                        } else {
                            o[oidx] = best;
                        }
                        argmax.as_mut().unwrap()[oidx] = best_idx;
                    }
                    PoolKind::Mean => {
                        let mut acc = T::zero();
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[(c * h + iy as usize) * wd + ix as usize];
                            }
                        }
                        o[oidx] = acc / window_area;
                    }
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn pool2d_backward<T: Scalar>(
    input_shape: &[usize],
    kind: PoolKind,
    dout: &Tensor<T>,
    argmax: Option<&[usize]>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let mut dinput = Tensor::zeros(input_shape);
    let (c_in, h, wd) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh, ow) = (dout.shape()[1], dout.shape()[2]);
    let g = dout.data();
    let dx = dinput.data_mut();
    match kind {
        PoolKind::Max => {
            let am = argmax.expect("max pool backward requires argmax");
            for (oidx, &src) in am.iter().enumerate() {
                if src != NO_ARGMAX {
                    dx[src] += g[oidx];
                }
            }
        }
        PoolKind::Mean => {
            let inv = T::one() / T::from_f64((k * k) as f64);
            for c in 0..c_in {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = g[(c * oh + oy) * ow + ox] * inv;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                dx[(c * h + iy as usize) * wd + ix as usize] += go;
                            }
                        }
                    }
                }
            }
        }
    }
    dinput
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(
        x.shape(),
        x.data().iter().map(|&v| v.max(T::zero())).collect(),
    )
}

/// Gradient passes where the preactivation is strictly positive
/// (subgradient 0 at exactly 0).
pub fn relu_backward<T: Scalar>(pre: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(
        pre.shape(),
        pre.data()
            .iter()
            .zip(dout.data())
            .map(|(&p, &g)| if p > T::zero() { g } else { T::zero() })
            .collect(),
    )
}

pub fn fc_forward<T: Scalar>(x: &[T], w: &Tensor<T>, b: &[T]) -> Result<Vec<T>, NetError> {
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    if x.len() != in_dim {
        return Err(NetError::Dimension(format!(
            "fully-connected: input length {} does not match weight columns {in_dim}",
            x.len()
        )));
    }
    let wv = w.data();
    Ok((0..out_dim)
        .map(|j| {
            let row = &wv[j * in_dim..(j + 1) * in_dim];
            let mut acc = b[j];
            for (wi, xi) in row.iter().zip(x) {
                acc += *wi * *xi;
            }
            acc
        })
        .collect())
}

pub fn fc_backward<T: Scalar>(
    x: &[T],
    w: &Tensor<T>,
    dout: &[T],
) -> (Vec<T>, Tensor<T>, Vec<T>) {
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    let wv = w.data();
    let mut dx = vec![T::zero(); in_dim];
    let mut dw = Tensor::zeros(&[out_dim, in_dim]);
    let dwv = dw.data_mut();
    for (j, &g) in dout.iter().enumerate().take(out_dim) {
        if g == T::zero() {
            continue;
        }
        let row = j * in_dim;
        for i in 0..in_dim {
            dx[i] += wv[row + i] * g;
            dwv[row + i] += x[i] * g;
        }
    }
    (dx, dw, dout.to_vec())
}

/// Inverted dropout: each element zeroed with probability `ratio`,
/// survivors scaled by 1/(1-ratio). Returns the multiplier mask.
pub fn dropout_forward<T: Scalar>(x: &[T], ratio: f64, rng: &mut ChaCha8Rng) -> (Vec<T>, Vec<T>) {
    debug_assert!((0.0..1.0).contains(&ratio));
    if ratio == 0.0 {
        return (x.to_vec(), vec![T::one(); x.len()]);
    }
    let keep = T::from_f64(1.0 / (1.0 - ratio));
    let mask: Vec<T> = x
        .iter()
        .map(|_| {
            if rng.random::<f64>() < ratio {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let y = x.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    (y, mask)
}

pub fn dropout_backward<T: Scalar>(dout: &[T], mask: &[T]) -> Vec<T> {
    dout.iter().zip(mask).map(|(&g, &m)| g * m).collect()
}

/// Numerically stable softmax cross-entropy; gradient is softmax minus
/// one-hot.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>), NetError> {
    if label >= logits.len() {
        return Err(NetError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let loss = total.ln() - (logits[label] - m);
    let mut grad: Vec<T> = exps.iter().map(|&e| e / total).collect();
    grad[label] -= T::one();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_output_extent_matches_table_rows() {
        // 165x120 input, 3x3 /1 /0 -> 163x118
        let input = Tensor::<f32>::zeros(&[1, 165, 120]);
        let w = Tensor::<f32>::zeros(&[4, 1, 3, 3]);
        let out = conv2d_forward(&input, &w, &[0.0; 4], 1, 0).unwrap();
        assert_eq!(out.shape(), &[4, 163, 118]);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let input = Tensor::from_fn(&[1, 5, 6], |i| (i as f32 * 0.37).sin());
        let mut w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0; // center one
        let out = conv2d_forward(&input, &w, &[0.0], 1, 1).unwrap();
        assert_eq!(out.shape(), input.shape());
        for (a, b) in out.data().iter().zip(input.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_rejects_too_small_input() {
        let input = Tensor::<f32>::zeros(&[1, 2, 2]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(matches!(
            conv2d_forward(&input, &w, &[0.0], 1, 0),
            Err(NetError::Dimension(_))
        ));
    }

    #[test]
    fn pool_window_values() {
        let input = Tensor::from_vec(&[1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]);
        let (mx, am) = pool2d_forward(&input, PoolKind::Max, 2, 2, 0).unwrap();
        assert_eq!(mx.data(), &[4.0]);
        assert_eq!(am.unwrap(), vec![3]);
        let (mn, _) = pool2d_forward(&input, PoolKind::Mean, 2, 2, 0).unwrap();
        assert_eq!(mn.data(), &[2.5]);
    }

    #[test]
    fn pool_shapes_match_table_arithmetic() {
        // Pool3 on 38x27 pad 1 -> 20x14
        let input = Tensor::<f32>::zeros(&[2, 38, 27]);
        let (out, _) = pool2d_forward(&input, PoolKind::Max, 2, 2, 1).unwrap();
        assert_eq!(out.shape(), &[2, 20, 14]);
        // Pool5 (mean, pad 1) on 10x7 -> 6x4; with 256 channels flatten 6144
        let input = Tensor::<f32>::zeros(&[256, 10, 7]);
        let (out, _) = pool2d_forward(&input, PoolKind::Mean, 2, 2, 1).unwrap();
        assert_eq!(out.shape(), &[256, 6, 4]);
        assert_eq!(out.len(), 6144);
    }

    #[test]
    fn mean_pool_counts_padding_as_zero() {
        let input = Tensor::from_vec(&[1, 1, 1], vec![4.0f32]);
        let (out, _) = pool2d_forward(&input, PoolKind::Mean, 2, 2, 1).unwrap();
        // Windows at the corners each see the single cell once.
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data()[0], 1.0);
    }

    #[test]
    fn relu_values_and_boundary() {
        let x = Tensor::from_vec(&[3], vec![-3.0f32, 0.0, 2.0]);
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let d = relu_backward(&x, &Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]));
        // Subgradient at exactly zero is zero.
        assert_eq!(d.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn fc_identity_passthrough() {
        let w = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0f32 } else { 0.0 });
        let y = fc_forward(&[1.0, 2.0, 3.0], &w, &[0.0; 3]).unwrap();
        assert_eq!(y, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn fc_rejects_length_mismatch() {
        let w = Tensor::<f32>::zeros(&[2, 3]);
        assert!(fc_forward(&[1.0, 2.0], &w, &[0.0; 2]).is_err());
    }

    #[test]
    fn dropout_eval_identity_is_callers_choice_ratio_zero() {
        let mut rng = rand::SeedableRng::seed_from_u64(1);
        let x = vec![1.0f32, -2.0, 3.0];
        let (y, mask) = dropout_forward(&x, 0.0, &mut rng);
        assert_eq!(y, x);
        assert!(mask.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = rand::SeedableRng::seed_from_u64(42);
        let n = 1_000_000;
        let x = vec![1.0f32; n];
        let (y, _) = dropout_forward(&x, 0.4, &mut rng);
        let zeros = y.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((zeros - 0.4).abs() < 0.005, "zero fraction {zeros}");
        let mean = y.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "survivor-scaled mean {mean}");
    }

    #[test]
    fn softmax_uniform_loss_is_log_class_count() {
        let logits = vec![0.25f64; 9000];
        let (loss, _) = softmax_cross_entropy(&logits, 17).unwrap();
        assert!((loss - (9000f64).ln()).abs() < 1e-9);
        assert!(((9000f64).ln() - 9.1050).abs() < 1e-4);
    }

    #[test]
    fn softmax_saturated_true_class() {
        let mut logits = vec![0.0f64; 100];
        logits[3] = 50.0;
        let (loss, _) = softmax_cross_entropy(&logits, 3).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let shifted: Vec<f64> = logits.iter().map(|v| v + 123.456).collect();
        let (l1, g1) = softmax_cross_entropy(&logits, 5).unwrap();
        let (l2, g2) = softmax_cross_entropy(&shifted, 5).unwrap();
        assert!((l1 - l2).abs() < 1e-6);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rejects_out_of_range_label() {
        assert!(matches!(
            softmax_cross_entropy(&[0.0f32, 1.0], 2),
            Err(NetError::LabelOutOfRange { .. })
        ));
    }
}
