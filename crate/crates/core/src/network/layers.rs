//! Dense kernels on [`TensorMap`]s: convolution, linear maps, layer norm,
//! pooling, resampling and multi-head attention.

use rayon::prelude::*;

use super::TensorMap;

/// `out[n, o] = sum_i x[n, i] * w[i, o] (+ bias[o])`.
pub(crate) fn linear(x: &TensorMap, w: &[f64], out_ch: usize, bias: Option<&[f64]>) -> TensorMap {
    let in_ch = x.channels;
    debug_assert_eq!(w.len(), in_ch * out_ch);
    let mut out = vec![0.0; x.tokens() * out_ch];
    out.par_chunks_mut(out_ch).zip(x.data.par_chunks(in_ch)).for_each(|(o, xi)| {
        if let Some(b) = bias {
            o.copy_from_slice(b);
        }
        for (i, &v) in xi.iter().enumerate() {
            if v != 0.0 {
                let row = &w[i * out_ch..(i + 1) * out_ch];
                for (acc, &wv) in o.iter_mut().zip(row) {
                    *acc += v * wv;
                }
            }
        }
    });
    TensorMap { height: x.height, width: x.width, channels: out_ch, data: out }
}

/// Zero-padded 2-D convolution, weights laid out `[kh][kw][in][out]`,
/// padding `k / 2`.
pub(crate) fn conv2d(x: &TensorMap, w: &[f64], k: usize, stride: usize, out_ch: usize) -> TensorMap {
    let pad = (k / 2) as isize;
    let oh = (x.height + 2 * pad as usize - k) / stride + 1;
    let ow = (x.width + 2 * pad as usize - k) / stride + 1;
    let in_ch = x.channels;
    let mut out = vec![0.0; oh * ow * out_ch];
    out.par_chunks_mut(ow * out_ch).enumerate().for_each(|(oy, row)| {
        for ox in 0..ow {
            let o = &mut row[ox * out_ch..(ox + 1) * out_ch];
            for ky in 0..k {
                let iy = (oy * stride) as isize + ky as isize - pad;
                if iy < 0 || iy >= x.height as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride) as isize + kx as isize - pad;
                    if ix < 0 || ix >= x.width as isize {
                        continue;
                    }
                    let xi = x.at(iy as usize, ix as usize);
                    let base = (ky * k + kx) * in_ch * out_ch;
                    for (c, &v) in xi.iter().enumerate() {
                        if v != 0.0 {
                            let wr = &w[base + c * out_ch..base + (c + 1) * out_ch];
                            for (acc, &wv) in o.iter_mut().zip(wr) {
                                *acc += v * wv;
                            }
                        }
                    }
                }
            }
        }
    });
    TensorMap { height: oh, width: ow, channels: out_ch, data: out }
}

pub(crate) fn relu(mut x: TensorMap) -> TensorMap {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

pub(crate) fn gelu(mut x: TensorMap) -> TensorMap {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    x.data.iter_mut().for_each(|v| *v = 0.5 * *v * (1.0 + (C * (*v + 0.044715 * *v * *v * *v)).tanh()));
    x
}

pub(crate) fn add(mut a: TensorMap, b: &TensorMap) -> TensorMap {
    debug_assert_eq!(a.data.len(), b.data.len());
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
    a
}

pub(crate) fn layer_norm(x: &TensorMap, gamma: &[f64], beta: &[f64]) -> TensorMap {
    const EPS: f64 = 1e-5;
    let c = x.channels;
    let mut out = x.data.clone();
    out.par_chunks_mut(c).for_each(|t| {
        let mean = t.iter().sum::<f64>() / c as f64;
        let var = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + EPS).sqrt();
        for (k, v) in t.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma[k] + beta[k];
        }
    });
    TensorMap { data: out, ..*x }
}

/// Average pooling with a square window and equal stride; edge windows
/// average whatever cells they cover. A window of 1 returns the input.
pub(crate) fn avg_pool(x: &TensorMap, window: usize) -> TensorMap {
    if window == 1 {
        return x.clone();
    }
    let oh = x.height.div_ceil(window);
    let ow = x.width.div_ceil(window);
    let c = x.channels;
    let mut data = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut data[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            let mut n = 0.0;
            for y in oy * window..((oy + 1) * window).min(x.height) {
                for xx in ox * window..((ox + 1) * window).min(x.width) {
                    for (acc, v) in o.iter_mut().zip(x.at(y, xx)) {
                        *acc += v;
                    }
                    n += 1.0;
                }
            }
            o.iter_mut().for_each(|v| *v /= n);
        }
    }
    TensorMap { height: oh, width: ow, channels: c, data }
}

/// Average-pool to an exact target grid (source sides must be multiples).
pub(crate) fn pool_to(x: &TensorMap, h: usize, w: usize) -> TensorMap {
    debug_assert!(x.height % h == 0 && x.width % w == 0 && x.height / h == x.width / w);
    avg_pool(x, x.height / h)
}

/// Bilinear resampling with corner alignment: output cell `(i, j)` samples
/// the input at `(i (H_in - 1) / (H_out - 1), j (W_in - 1) / (W_out - 1))`.
pub(crate) fn resize_bilinear(x: &TensorMap, h: usize, w: usize) -> TensorMap {
    let c = x.channels;
    let sy = if h > 1 { (x.height - 1) as f64 / (h - 1) as f64 } else { 0.0 };
    let sx = if w > 1 { (x.width - 1) as f64 / (w - 1) as f64 } else { 0.0 };
    let mut data = vec![0.0; h * w * c];
    data.par_chunks_mut(w * c).enumerate().for_each(|(i, row)| {
        let (y0, y1, fy) = split(i as f64 * sy, x.height);
        for j in 0..w {
            let (x0, x1, fx) = split(j as f64 * sx, x.width);
            let o = &mut row[j * c..(j + 1) * c];
            let (a, b, cc, d) = (x.at(y0, x0), x.at(y0, x1), x.at(y1, x0), x.at(y1, x1));
            for k in 0..c {
                o[k] = if fx == 0.0 && fy == 0.0 {
                    a[k]
                } else {
                    (a[k] * (1.0 - fx) + b[k] * fx) * (1.0 - fy) + (cc[k] * (1.0 - fx) + d[k] * fx) * fy
                };
            }
        }
    });
    TensorMap { height: h, width: w, channels: c, data }
}

fn split(p: f64, len: usize) -> (usize, usize, f64) {
    let p = p.clamp(0.0, (len - 1) as f64);
    let r = p.round();
    let p = if (p - r).abs() < 1e-9 { r } else { p };
    let i0 = p.floor() as usize;
    (i0, (i0 + 1).min(len - 1), p - i0 as f64)
}

/// Softmax attention probabilities of one layer: `probs[h][q][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    /// Grid of the (pooled) key tokens.
    pub key_grid: (usize, usize),
    pub probs: Vec<f64>,
}

impl AttentionMaps {
    /// Largest `|sum_k p - 1|` over all heads and queries.
    pub fn max_row_sum_error(&self) -> f64 {
        self.probs.chunks(self.keys).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Head-averaged attention of query `q` over the key grid.
    pub fn query_map(&self, q: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.keys];
        for h in 0..self.heads {
            let row = &self.probs[(h * self.queries + q) * self.keys..(h * self.queries + q + 1) * self.keys];
            out.iter_mut().zip(row).for_each(|(o, p)| *o += p / self.heads as f64);
        }
        out
    }
}

/// Projection weights of one attention block.
pub(crate) struct AttentionWeights<'a> {
    pub q: &'a [f64],
    pub k: &'a [f64],
    pub v: &'a [f64],
    pub o: &'a [f64],
}

/// Additive logit bias `sigma * mq[i] * mk[j]`, shared by all heads.
pub(crate) struct MaskBias<'a> {
    pub sigma: f64,
    pub query: &'a [f64],
    pub key: &'a [f64],
}

/// Multi-head attention of `queries` over `context`; the context is
/// average-pooled by `window` before the key/value projections.
/// Logits are `(q . k + bias) / sqrt(d_head)`.
pub(crate) fn attention(
    queries: &TensorMap,
    context: &TensorMap,
    w: &AttentionWeights<'_>,
    heads: usize,
    window: usize,
    bias: Option<&MaskBias<'_>>,
) -> (TensorMap, AttentionMaps) {
    let d = queries.channels;
    let dh = d / heads;
    let pooled = avg_pool(context, window);
    let q = linear(queries, w.q, d, None);
    let k = linear(&pooled, w.k, d, None);
    let v = linear(&pooled, w.v, d, None);
    let (nq, nk) = (q.tokens(), k.tokens());
    if let Some(b) = bias {
        debug_assert_eq!(b.query.len(), nq);
        debug_assert_eq!(b.key.len(), nk);
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * nq * nk];
    let mut mixed = vec![0.0; nq * d];
    for h in 0..heads {
        let ph = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        ph.par_chunks_mut(nk).zip(mixed.par_chunks_mut(d)).enumerate().for_each(|(i, (row, out))| {
            let qi = &q.data[i * d + h * dh..i * d + (h + 1) * dh];
            for (j, p) in row.iter_mut().enumerate() {
                let kj = &k.data[j * d + h * dh..j * d + (h + 1) * dh];
                let mut logit: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                if let Some(b) = bias {
                    logit += b.sigma * b.query[i] * b.key[j];
                }
                *p = logit * scale;
            }
            softmax_in_place(row);
            let o = &mut out[h * dh..(h + 1) * dh];
            for (j, &p) in row.iter().enumerate() {
                let vj = &v.data[j * d + h * dh..j * d + (h + 1) * dh];
                for (acc, &vv) in o.iter_mut().zip(vj) {
                    *acc += p * vv;
                }
            }
        });
    }
    let mixed = TensorMap { height: queries.height, width: queries.width, channels: d, data: mixed };
    let out = linear(&mixed, w.o, d, None);
    let maps = AttentionMaps { heads, queries: nq, keys: nk, key_grid: (pooled.height, pooled.width), probs };
    (out, maps)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
