//! Shared test oracles: straight-line f64 reference implementations of every
//! differentiable operation and a central-finite-difference gradient checker.
//!
//! Nothing here touches the library's autodiff path; forwards are written as
//! plain nested loops so they can serve as an independent ground truth.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;

// ---------------------------------------------------------------------------
// Reference forward ops (f64, no graph)
// ---------------------------------------------------------------------------

/// Same-padded convolution, direct quadruple loop.
pub fn conv2d_same_ref(
    input: &[f64],
    weights: &[f64],
    bias: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    o: usize,
    k: usize,
) -> Vec<f64> {
    let pad = k as isize / 2;
    let mut out = vec![0.0; n * o * h * w];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = x as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let iv = input
                                    [((b * c + ic) * h + sy as usize) * w + sx as usize];
                                let wv = weights[((oc * c + ic) * k + ky) * k + kx];
                                acc += iv * wv;
                            }
                        }
                    }
                    out[((b * o + oc) * h + y) * w + x] = acc;
                }
            }
        }
    }
    out
}

pub fn maxpool4_ref(input: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let (oh, ow) = (h / 4, w / 4);
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..4 {
                    for dx in 0..4 {
                        let v = input[plane * h * w + (oy * 4 + dy) * w + ox * 4 + dx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[plane * oh * ow + oy * ow + ox] = best;
            }
        }
    }
    out
}

pub fn upsample4_ref(input: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let (oh, ow) = (h * 4, w * 4);
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                out[plane * oh * ow + y * ow + x] = input[plane * h * w + (y / 4) * w + x / 4];
            }
        }
    }
    out
}

pub fn concat_ref(
    a: &[f64],
    b: &[f64],
    (n, ca, h, w): (usize, usize, usize, usize),
    cb: usize,
) -> Vec<f64> {
    let pix = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * pix);
    for batch in 0..n {
        out.extend_from_slice(&a[batch * ca * pix..(batch + 1) * ca * pix]);
        out.extend_from_slice(&b[batch * cb * pix..(batch + 1) * cb * pix]);
    }
    out
}

pub fn relu_ref(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

pub fn sigmoid_ref(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| (1.0 / (1.0 + (-v).exp())).clamp(1e-7, 1.0 - 1e-7))
        .collect()
}

pub fn mse_ref(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum()
}

pub fn bce_ref(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(p, t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
        .sum::<f64>()
        / n
}

pub fn dice_ref(pred: &[f64], target: &[f64]) -> f64 {
    let s_pt: f64 = pred.iter().zip(target).map(|(p, t)| p * t).sum();
    let denom: f64 = pred.iter().sum::<f64>() + target.iter().sum::<f64>() + 1e-7;
    1.0 - 2.0 * s_pt / denom
}

// ---------------------------------------------------------------------------
// Reference U-net forward
// ---------------------------------------------------------------------------

/// Shapes and data of a network's parameters, extracted once so the
/// reference forward can perturb individual scalars.
pub struct RefParams {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

pub fn extract_params(net: &selfmentor::unet::UNet) -> RefParams {
    let mut names = Vec::new();
    let mut shapes = Vec::new();
    let mut values = Vec::new();
    for (name, p) in net.named_params() {
        names.push(name);
        shapes.push(p.value.shape().to_vec());
        values.push(p.value.data().iter().map(|v| f64::from(*v)).collect());
    }
    RefParams {
        names,
        shapes,
        values,
    }
}

/// Forward pass of the encoder-decoder in pure f64, mirroring the published
/// architecture: conv+relu blocks, 4x4 pooling, bottleneck, nearest
/// upsampling, concat(upsampled, skip), and a 1x1 conv + sigmoid head.
/// Parameters arrive in construction order as (weight, bias) pairs.
pub fn unet_forward_ref(
    config: &selfmentor::unet::UNetConfig,
    params: &RefParams,
    x: &[f64],
    side: usize,
) -> Vec<f64> {
    let mut layer = 0usize;
    let mut take_layer = || {
        let w = params.values[2 * layer].clone();
        let b = params.values[2 * layer + 1].clone();
        let shape = params.shapes[2 * layer].clone();
        layer += 1;
        (w, b, shape)
    };

    let mut cur = x.to_vec();
    let mut cur_c = config.in_channels;
    let mut cur_side = side;
    let mut skips: Vec<(Vec<f64>, usize, usize)> = Vec::new();

    for _ in 0..config.depth {
        for _ in 0..config.convs_per_block {
            let (w, b, shape) = take_layer();
            cur = relu_ref(&conv2d_same_ref(
                &cur,
                &w,
                &b,
                (1, cur_c, cur_side, cur_side),
                shape[0],
                shape[2],
            ));
            cur_c = shape[0];
        }
        skips.push((cur.clone(), cur_c, cur_side));
        cur = maxpool4_ref(&cur, (1, cur_c, cur_side, cur_side));
        cur_side /= 4;
    }
    for _ in 0..config.convs_per_block {
        let (w, b, shape) = take_layer();
        cur = relu_ref(&conv2d_same_ref(
            &cur,
            &w,
            &b,
            (1, cur_c, cur_side, cur_side),
            shape[0],
            shape[2],
        ));
        cur_c = shape[0];
    }
    for (skip, skip_c, skip_side) in skips.iter().rev() {
        let up = upsample4_ref(&cur, (1, cur_c, cur_side, cur_side));
        cur_side *= 4;
        assert_eq!(cur_side, *skip_side);
        cur = concat_ref(&up, skip, (1, cur_c, cur_side, cur_side), *skip_c);
        cur_c += skip_c;
        for _ in 0..config.convs_per_block {
            let (w, b, shape) = take_layer();
            cur = relu_ref(&conv2d_same_ref(
                &cur,
                &w,
                &b,
                (1, cur_c, cur_side, cur_side),
                shape[0],
                shape[2],
            ));
            cur_c = shape[0];
        }
    }
    let (w, b, shape) = take_layer();
    let logits = conv2d_same_ref(
        &cur,
        &w,
        &b,
        (1, cur_c, cur_side, cur_side),
        shape[0],
        shape[2],
    );
    sigmoid_ref(&logits)
}

// ---------------------------------------------------------------------------
// Gradient check harness
// ---------------------------------------------------------------------------

/// Relative error between an analytic and a finite-difference gradient
/// element. The denominator is floored at 1e-3: below that magnitude the
/// central-difference truncation error (O(h^2) with h = 1e-3) and f32
/// rounding dominate any true discrepancy, so the comparison degrades to an
/// absolute tolerance of 1e-6 there.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / scale
}

/// Central finite differences of `f` over `values`, one element at a time.
pub fn finite_difference_grad(values: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(values.len());
    let mut work = values.to_vec();
    for i in 0..values.len() {
        let orig = work[i];
        work[i] = orig + FD_STEP;
        let plus = f(&work);
        work[i] = orig - FD_STEP;
        let minus = f(&work);
        work[i] = orig;
        grad.push((plus - minus) / (2.0 * FD_STEP));
    }
    grad
}

/// Finite differences with a non-smoothness filter for relu/maxpool
/// networks. The composed loss is piecewise quadratic, so the central
/// difference at the reference step is exact within a smooth piece; an
/// element whose reference-step estimate disagrees with a far smaller-step
/// probe therefore has a kink inside the perturbation interval, where a
/// derivative comparison at the reference step is meaningless. Returns the
/// reference-step estimates and a per-element smoothness mask.
pub fn finite_difference_grad_filtered(
    values: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
) -> (Vec<f64>, Vec<bool>) {
    const PROBE_STEP: f64 = 1e-6;
    let mut grad = Vec::with_capacity(values.len());
    let mut smooth = Vec::with_capacity(values.len());
    let mut work = values.to_vec();
    let central = |work: &mut [f64], i: usize, h: f64, f: &mut dyn FnMut(&[f64]) -> f64| {
        let orig = work[i];
        work[i] = orig + h;
        let plus = f(work);
        work[i] = orig - h;
        let minus = f(work);
        work[i] = orig;
        (plus - minus) / (2.0 * h)
    };
    for i in 0..values.len() {
        let full = central(&mut work, i, FD_STEP, &mut f);
        let probe = central(&mut work, i, PROBE_STEP, &mut f);
        grad.push(full);
        smooth.push(rel_error(full, probe) < REL_TOL);
    }
    (grad, smooth)
}

/// Asserts the analytic gradient matches finite differences elementwise.
pub fn assert_grads_close(analytic: &[f32], numeric: &[f64], what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: gradient length");
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let err = rel_error(f64::from(*a), *n);
        assert!(
            err < REL_TOL,
            "{what}: element {i}: analytic {a}, finite-difference {n}, rel error {err}"
        );
    }
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| f64::from(*x)).collect()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
