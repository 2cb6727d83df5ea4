//! Spatial operations: same-padded convolution, 4x4 max pooling, 4x nearest
//! upsampling and channel concatenation.
//!
//! Convolution runs as im2col + a small accumulating matmul. The column
//! buffer is kept alive on the backward step so training never rebuilds it.

use super::{BackwardStep, Node, Tensor};
use crate::error::{Error, Result};

pub(crate) const POOL: usize = 4;

/// `c += a * b` for row-major `a: m x k`, `b: k x n`, `c: m x n`.
///
/// The k-loop is outermost so each row of `b` streams through exactly once
/// while the whole of `c` stays cache-resident; right for the forward pass
/// and the weight gradient, where `c` is small and `b` is the column buffer.
fn matmul_acc_kij(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += av * *bj;
            }
        }
    }
}

/// Same contraction with the m-loop outermost: each row of `c` is built in
/// one pass while `b` (assumed small enough to stay cached) is re-read. Right
/// for the input gradient, where `c` is the large column-gradient buffer.
fn matmul_acc_ikj(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += av * *bj;
            }
        }
    }
}

fn transpose(src: &[f32], rows: usize, cols: usize, dst: &mut Vec<f32>) {
    dst.clear();
    dst.resize(rows * cols, 0.0);
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        for (c, v) in row.iter().enumerate() {
            dst[c * rows + r] = *v;
        }
    }
}

/// Eight-lane dot product; the fixed-width accumulator array lets the
/// compiler keep the reduction in vector registers.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ac = &a[c * 8..c * 8 + 8];
        let bc = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += ac[l] * bc[l];
        }
    }
    let mut sum = acc.iter().sum::<f32>();
    for i in chunks * 8..a.len() {
        sum += a[i] * b[i];
    }
    sum
}

/// Gathers the `ksize*ksize` shifted copies of one image into a
/// `(channels*ksize*ksize) x (h*w)` buffer, zero-padding outside the image.
fn im2col(input: &[f32], channels: usize, h: usize, w: usize, ksize: usize, cols: &mut [f32]) {
    let pad = ksize / 2;
    let pix = h * w;
    debug_assert_eq!(cols.len(), channels * ksize * ksize * pix);
    for c in 0..channels {
        let plane = &input[c * pix..(c + 1) * pix];
        for ky in 0..ksize {
            for kx in 0..ksize {
                let row = &mut cols[(c * ksize * ksize + ky * ksize + kx) * pix..][..pix];
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    // Valid destination x range for this horizontal shift.
                    let (d_lo, d_hi) = if dx < 0 {
                        ((-dx) as usize, w)
                    } else {
                        (0, w - dx as usize)
                    };
                    dst[..d_lo].fill(0.0);
                    dst[d_hi..].fill(0.0);
                    let s_lo = (d_lo as isize + dx) as usize;
                    dst[d_lo..d_hi].copy_from_slice(&src_row[s_lo..s_lo + (d_hi - d_lo)]);
                }
            }
        }
    }
}

/// Scatter-adds a column-gradient buffer back onto the input gradient.
fn col2im_acc(cols: &[f32], channels: usize, h: usize, w: usize, ksize: usize, out: &mut [f32]) {
    let pad = ksize / 2;
    let pix = h * w;
    for c in 0..channels {
        let plane_base = c * pix;
        for ky in 0..ksize {
            for kx in 0..ksize {
                let row = &cols[(c * ksize * ksize + ky * ksize + kx) * pix..][..pix];
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let (d_lo, d_hi) = if dx < 0 {
                        ((-dx) as usize, w)
                    } else {
                        (0, w - dx as usize)
                    };
                    let s_lo = (d_lo as isize + dx) as usize;
                    let dst =
                        &mut out[plane_base + sy as usize * w + s_lo..][..d_hi - d_lo];
                    let src = &row[y * w + d_lo..y * w + d_hi];
                    for (o, v) in dst.iter_mut().zip(src) {
                        *o += *v;
                    }
                }
            }
        }
    }
}

struct ConvBackward {
    batch: usize,
    in_channels: usize,
    out_channels: usize,
    h: usize,
    w: usize,
    ksize: usize,
    /// im2col buffers captured at forward time, one per batch element.
    cols: Vec<Vec<f32>>,
}

impl BackwardStep for ConvBackward {
    fn step(&self, node: &Node) {
        let g = node.grad.borrow();
        let g = g.as_ref().expect("grad present during backward");
        let (input, weights, bias) = (&node.parents[0], &node.parents[1], &node.parents[2]);
        let pix = self.h * self.w;
        let ck = self.in_channels * self.ksize * self.ksize;

        let need_dx = input.node.track.get();
        let need_dw = weights.node.track.get();
        let need_db = bias.node.track.get();

        let weights_data = weights.node.data.borrow();
        let mut wt = Vec::new();
        if need_dx {
            transpose(&weights_data, self.out_channels, ck, &mut wt);
        }
        let mut dcols = vec![0.0f32; if need_dx { ck * pix } else { 0 }];

        for n in 0..self.batch {
            let gn = &g[n * self.out_channels * pix..(n + 1) * self.out_channels * pix];
            let cols = &self.cols[n];

            if need_db {
                let mut bg = bias.node.grad_mut();
                for o in 0..self.out_channels {
                    bg[o] += gn[o * pix..(o + 1) * pix].iter().sum::<f32>();
                }
            }
            if need_dw {
                // dW[o][j] contracts g's o-th row with the j-th column-buffer
                // row; streaming the big buffer once with g rows cache-hot.
                let mut wg = weights.node.grad_mut();
                for j in 0..ck {
                    let crow = &cols[j * pix..(j + 1) * pix];
                    for o in 0..self.out_channels {
                        wg[o * ck + j] += dot(&gn[o * pix..(o + 1) * pix], crow);
                    }
                }
            }
            if need_dx {
                // dcols = W^T . g, then scatter back to image layout.
                dcols.fill(0.0);
                matmul_acc_ikj(&mut dcols, &wt, gn, ck, self.out_channels, pix);
                let mut ig = input.node.grad_mut();
                let plane = &mut ig[n * self.in_channels * pix..(n + 1) * self.in_channels * pix];
                col2im_acc(&dcols, self.in_channels, self.h, self.w, self.ksize, plane);
            }
        }
    }
}

/// Same-padded 2D convolution of an `N x C x H x W` input with `O x C x k x k`
/// weights (k = 1 or 3) and an `O`-element bias, producing `N x O x H x W`.
pub fn conv2d_same(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let ishape = input.shape();
    let wshape = weights.shape();
    if ishape.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d_same: input must be NxCxHxW, got {ishape:?}"
        )));
    }
    if wshape.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d_same: weights must be OxCxKxK, got {wshape:?}"
        )));
    }
    let (batch, in_channels, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (out_channels, wc, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    if kh != kw || (kh != 1 && kh != 3) {
        return Err(Error::Shape(format!(
            "conv2d_same: kernel must be 1x1 or 3x3, got {kh}x{kw}"
        )));
    }
    if wc != in_channels {
        return Err(Error::Shape(format!(
            "conv2d_same: input has {in_channels} channels but weights expect {wc}"
        )));
    }
    if bias.shape() != [out_channels] {
        return Err(Error::Shape(format!(
            "conv2d_same: bias shape {:?} does not match {out_channels} output channels",
            bias.shape()
        )));
    }

    let ksize = kh;
    let pix = h * w;
    let ck = in_channels * ksize * ksize;
    let idata = input.data();
    let wdata = weights.data();
    let bdata = bias.data();

    let mut out = vec![0.0f32; batch * out_channels * pix];
    let mut cols_per_batch = Vec::with_capacity(batch);
    for n in 0..batch {
        let mut cols = vec![0.0f32; ck * pix];
        im2col(
            &idata[n * in_channels * pix..(n + 1) * in_channels * pix],
            in_channels,
            h,
            w,
            ksize,
            &mut cols,
        );
        let on = &mut out[n * out_channels * pix..(n + 1) * out_channels * pix];
        for o in 0..out_channels {
            on[o * pix..(o + 1) * pix].fill(bdata[o]);
        }
        matmul_acc_kij(on, &wdata, &cols, out_channels, ck, pix);
        cols_per_batch.push(cols);
    }
    drop(idata);
    drop(wdata);
    drop(bdata);

    Ok(Tensor::from_op(
        vec![batch, out_channels, h, w],
        out,
        vec![input.clone(), weights.clone(), bias.clone()],
        Box::new(ConvBackward {
            batch,
            in_channels,
            out_channels,
            h,
            w,
            ksize,
            cols: cols_per_batch,
        }),
    ))
}

struct MaxPoolBackward {
    argmax: Vec<u32>,
    input_len: usize,
}

impl BackwardStep for MaxPoolBackward {
    fn step(&self, node: &Node) {
        let g = node.grad.borrow();
        let g = g.as_ref().expect("grad present during backward");
        let input = &node.parents[0];
        if !input.node.track.get() {
            return;
        }
        let mut ig = input.node.grad_mut();
        debug_assert_eq!(ig.len(), self.input_len);
        for (out_idx, src) in self.argmax.iter().enumerate() {
            ig[*src as usize] += g[out_idx];
        }
    }
}

/// 4x4 max pooling. Gradient flows only to the argmax of each window, ties
/// broken by the first occurrence in row-major order.
pub fn maxpool4(input: &Tensor) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "maxpool4: input must be NxCxHxW, got {shape:?}"
        )));
    }
    let (batch, channels, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h % POOL != 0 || w % POOL != 0 {
        return Err(Error::Shape(format!(
            "maxpool4: spatial dims {h}x{w} not divisible by {POOL}"
        )));
    }
    let (oh, ow) = (h / POOL, w / POOL);
    let data = input.data();
    let mut out = vec![0.0f32; batch * channels * oh * ow];
    let mut argmax = vec![0u32; out.len()];
    let mut oi = 0;
    for nc in 0..batch * channels {
        let plane = &data[nc * h * w..(nc + 1) * h * w];
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..POOL {
                    let row = (oy * POOL + dy) * w + ox * POOL;
                    for dx in 0..POOL {
                        let v = plane[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                out[oi] = best;
                argmax[oi] = (base + best_idx) as u32;
                oi += 1;
            }
        }
    }
    let input_len = data.len();
    drop(data);
    Ok(Tensor::from_op(
        vec![batch, channels, oh, ow],
        out,
        vec![input.clone()],
        Box::new(MaxPoolBackward { argmax, input_len }),
    ))
}

struct UpsampleBackward {
    h: usize,
    w: usize,
}

impl BackwardStep for UpsampleBackward {
    fn step(&self, node: &Node) {
        let g = node.grad.borrow();
        let g = g.as_ref().expect("grad present during backward");
        let input = &node.parents[0];
        if !input.node.track.get() {
            return;
        }
        let (h, w) = (self.h, self.w);
        let (gh, gw) = (h * POOL, w * POOL);
        let planes = input.node.data.borrow().len() / (h * w);
        let mut ig = input.node.grad_mut();
        for nc in 0..planes {
            let gplane = &g[nc * gh * gw..(nc + 1) * gh * gw];
            let iplane = &mut ig[nc * h * w..(nc + 1) * h * w];
            for oy in 0..gh {
                let irow = (oy / POOL) * w;
                let grow = &gplane[oy * gw..(oy + 1) * gw];
                for ox in 0..gw {
                    iplane[irow + ox / POOL] += grow[ox];
                }
            }
        }
    }
}

/// Nearest-neighbour upsampling by 4 in both spatial dimensions.
pub fn upsample_nearest4(input: &Tensor) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "upsample_nearest4: input must be NxCxHxW, got {shape:?}"
        )));
    }
    let (batch, channels, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h * POOL, w * POOL);
    let data = input.data();
    let mut out = vec![0.0f32; batch * channels * oh * ow];
    for nc in 0..batch * channels {
        let plane = &data[nc * h * w..(nc + 1) * h * w];
        let oplane = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for y in 0..h {
            // Expand one source row, then replicate it POOL times.
            let (first, rest) = oplane[y * POOL * ow..(y * POOL + POOL) * ow].split_at_mut(ow);
            for x in 0..w {
                first[x * POOL..(x + 1) * POOL].fill(plane[y * w + x]);
            }
            for r in 0..POOL - 1 {
                rest[r * ow..(r + 1) * ow].copy_from_slice(first);
            }
        }
    }
    drop(data);
    Ok(Tensor::from_op(
        vec![batch, channels, oh, ow],
        out,
        vec![input.clone()],
        Box::new(UpsampleBackward { h, w }),
    ))
}

struct ConcatBackward {
    ca: usize,
    cb: usize,
    pix: usize,
}

impl BackwardStep for ConcatBackward {
    fn step(&self, node: &Node) {
        let g = node.grad.borrow();
        let g = g.as_ref().expect("grad present during backward");
        let (a, b) = (&node.parents[0], &node.parents[1]);
        let block = (self.ca + self.cb) * self.pix;
        let batch = g.len() / block;
        if a.node.track.get() {
            let mut ag = a.node.grad_mut();
            for n in 0..batch {
                let src = &g[n * block..n * block + self.ca * self.pix];
                let dst = &mut ag[n * self.ca * self.pix..(n + 1) * self.ca * self.pix];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += *s;
                }
            }
        }
        if b.node.track.get() {
            let mut bg = b.node.grad_mut();
            for n in 0..batch {
                let src = &g[n * block + self.ca * self.pix..(n + 1) * block];
                let dst = &mut bg[n * self.cb * self.pix..(n + 1) * self.cb * self.pix];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += *s;
                }
            }
        }
    }
}

/// Concatenates two `N x C x H x W` tensors along the channel axis, channels
/// of `a` first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 {
        return Err(Error::Shape(format!(
            "concat_channels: inputs must be NxCxHxW, got {sa:?} and {sb:?}"
        )));
    }
    if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
        return Err(Error::Shape(format!(
            "concat_channels: batch/spatial dims differ: {sa:?} vs {sb:?}"
        )));
    }
    let (batch, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
    let pix = h * w;
    let da = a.data();
    let db = b.data();
    let mut out = vec![0.0f32; batch * (ca + cb) * pix];
    for n in 0..batch {
        let dst = &mut out[n * (ca + cb) * pix..(n + 1) * (ca + cb) * pix];
        dst[..ca * pix].copy_from_slice(&da[n * ca * pix..(n + 1) * ca * pix]);
        dst[ca * pix..].copy_from_slice(&db[n * cb * pix..(n + 1) * cb * pix]);
    }
    drop(da);
    drop(db);
    Ok(Tensor::from_op(
        vec![batch, ca + cb, h, w],
        out,
        vec![a.clone(), b.clone()],
        Box::new(ConcatBackward { ca, cb, pix }),
    ))
}
