//! Raw numeric routines on flat row-major buffers. The tape ops and the
//! value-level APIs both call into these, so each computation has exactly one
//! implementation.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::pdc::PixelPair;

/// Output extent of a strided window sweep: floor((n + 2p - k)/s) + 1.
pub(crate) fn out_dim(n: usize, k: usize, stride: usize, padding: usize) -> usize {
    (n + 2 * padding - k) / stride + 1
}

// ---------------------------------------------------------------------------
// Dense linear algebra
// ---------------------------------------------------------------------------

/// C[m×n] = A[m×k] · B[k×n]
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// C[m×n] = A[m×k] · B[n×k]ᵀ
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// C[k×n] = A[m×k]ᵀ · B[m×n]
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation convention, zero padding)
// ---------------------------------------------------------------------------

/// input: cin×h×w, kernel: cout×cin×k×k → (out, ho, wo) with out: cout×ho×wo.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = out_dim(h, k, stride, padding);
    let wo = out_dim(w, k, stride, padding);
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        for ci in 0..cin {
            let kbase = (o * cin + ci) * k * k;
            let ibase = ci * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for u in 0..k {
                        let yy = (i * stride + u) as isize - padding as isize;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        let irow = ibase + yy as usize * w;
                        let krow = kbase + u * k;
                        for v in 0..k {
                            let xx = (j * stride + v) as isize - padding as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            acc += kernel[krow + v] * input[irow + xx as usize];
                        }
                    }
                    out[(o * ho + i) * wo + j] += acc;
                }
            }
        }
    }
    (out, ho, wo)
}

/// Gradients of `conv2d` w.r.t. input and kernel in one sweep.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    d_out: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<f64>) {
    let ho = out_dim(h, k, stride, padding);
    let wo = out_dim(w, k, stride, padding);
    let mut d_input = vec![0.0; cin * h * w];
    let mut d_kernel = vec![0.0; cout * cin * k * k];
    for o in 0..cout {
        for i in 0..ho {
            for j in 0..wo {
                let g = d_out[(o * ho + i) * wo + j];
                if g == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    let kbase = (o * cin + ci) * k * k;
                    let ibase = ci * h * w;
                    for u in 0..k {
                        let yy = (i * stride + u) as isize - padding as isize;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        let irow = ibase + yy as usize * w;
                        let krow = kbase + u * k;
                        for v in 0..k {
                            let xx = (j * stride + v) as isize - padding as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            d_input[irow + xx as usize] += g * kernel[krow + v];
                            d_kernel[krow + v] += g * input[irow + xx as usize];
                        }
                    }
                }
            }
        }
    }
    (d_input, d_kernel)
}

// ---------------------------------------------------------------------------
// Replicate (edge) padding
// ---------------------------------------------------------------------------

/// Pads each channel by replicating border pixels. Constant inputs stay
/// constant, so pixel-difference layers annihilate them everywhere, borders
/// included.
pub(crate) fn pad_replicate(input: &[f64], c: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    let mut out = vec![0.0; c * hp * wp];
    for ci in 0..c {
        for i in 0..hp {
            let yy = i.saturating_sub(pad).min(h - 1);
            for j in 0..wp {
                let xx = j.saturating_sub(pad).min(w - 1);
                out[(ci * hp + i) * wp + j] = input[(ci * h + yy) * w + xx];
            }
        }
    }
    out
}

pub(crate) fn pad_replicate_backward(
    d_out: &[f64],
    c: usize,
    h: usize,
    w: usize,
    pad: usize,
) -> Vec<f64> {
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    let mut d_input = vec![0.0; c * h * w];
    for ci in 0..c {
        for i in 0..hp {
            let yy = i.saturating_sub(pad).min(h - 1);
            for j in 0..wp {
                let xx = j.saturating_sub(pad).min(w - 1);
                d_input[(ci * h + yy) * w + xx] += d_out[(ci * hp + i) * wp + j];
            }
        }
    }
    d_input
}

// ---------------------------------------------------------------------------
// Pixel difference convolution, direct pair-wise form
// ---------------------------------------------------------------------------

/// Direct PDC on an already-padded input: at every window position the output
/// accumulates w · (x_sampled − x_subtracted) over the pair set. Offsets are
/// relative to the window center; the window never leaves the input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pdc_direct(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    cout: usize,
    k: usize,
    pairs: &[PixelPair],
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let r = (k - 1) / 2;
    let ho = out_dim(h, k, stride, 0);
    let wo = out_dim(w, k, stride, 0);
    let np = pairs.len();
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        for ci in 0..cin {
            let wbase = (o * cin + ci) * np;
            let ibase = ci * h * w;
            for i in 0..ho {
                let cy = (i * stride + r) as isize;
                for j in 0..wo {
                    let cx = (j * stride + r) as isize;
                    let mut acc = 0.0;
                    for (p, pair) in pairs.iter().enumerate() {
                        let s = input[ibase
                            + (cy + pair.sampled.dy as isize) as usize * w
                            + (cx + pair.sampled.dx as isize) as usize];
                        let u = input[ibase
                            + (cy + pair.subtracted.dy as isize) as usize * w
                            + (cx + pair.subtracted.dx as isize) as usize];
                        acc += weights[wbase + p] * (s - u);
                    }
                    out[(o * ho + i) * wo + j] += acc;
                }
            }
        }
    }
    (out, ho, wo)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pdc_direct_backward(
    input: &[f64],
    weights: &[f64],
    d_out: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    pairs: &[PixelPair],
    stride: usize,
) -> (Vec<f64>, Vec<f64>) {
    let r = (k - 1) / 2;
    let ho = out_dim(h, k, stride, 0);
    let wo = out_dim(w, k, stride, 0);
    let np = pairs.len();
    let mut d_input = vec![0.0; cin * h * w];
    let mut d_weights = vec![0.0; cout * cin * np];
    for o in 0..cout {
        for i in 0..ho {
            let cy = (i * stride + r) as isize;
            for j in 0..wo {
                let g = d_out[(o * ho + i) * wo + j];
                if g == 0.0 {
                    continue;
                }
                let cx = (j * stride + r) as isize;
                for ci in 0..cin {
                    let wbase = (o * cin + ci) * np;
                    let ibase = ci * h * w;
                    for (p, pair) in pairs.iter().enumerate() {
                        let si = ibase
                            + (cy + pair.sampled.dy as isize) as usize * w
                            + (cx + pair.sampled.dx as isize) as usize;
                        let ui = ibase
                            + (cy + pair.subtracted.dy as isize) as usize * w
                            + (cx + pair.subtracted.dx as isize) as usize;
                        let wv = weights[wbase + p];
                        d_input[si] += g * wv;
                        d_input[ui] -= g * wv;
                        d_weights[wbase + p] += g * (input[si] - input[ui]);
                    }
                }
            }
        }
    }
    (d_input, d_weights)
}

/// Scatters pair weights into a dense k×k kernel: +w at the sampled offset,
/// −w at the subtracted offset.
pub(crate) fn scatter_pdc(
    weights: &[f64],
    cout: usize,
    cin: usize,
    k: usize,
    pairs: &[PixelPair],
) -> Vec<f64> {
    let r = ((k - 1) / 2) as isize;
    let np = pairs.len();
    let mut out = vec![0.0; cout * cin * k * k];
    for oc in 0..cout * cin {
        let wbase = oc * np;
        let kbase = oc * k * k;
        for (p, pair) in pairs.iter().enumerate() {
            let wv = weights[wbase + p];
            let si = (r + pair.sampled.dy as isize) as usize * k
                + (r + pair.sampled.dx as isize) as usize;
            let ui = (r + pair.subtracted.dy as isize) as usize * k
                + (r + pair.subtracted.dx as isize) as usize;
            out[kbase + si] += wv;
            out[kbase + ui] -= wv;
        }
    }
    out
}

/// Adjoint of `scatter_pdc`: d_w[p] = d_kernel[sampled_p] − d_kernel[subtracted_p].
pub(crate) fn scatter_pdc_backward(
    d_kernel: &[f64],
    cout: usize,
    cin: usize,
    k: usize,
    pairs: &[PixelPair],
) -> Vec<f64> {
    let r = ((k - 1) / 2) as isize;
    let np = pairs.len();
    let mut d_weights = vec![0.0; cout * cin * np];
    for oc in 0..cout * cin {
        let wbase = oc * np;
        let kbase = oc * k * k;
        for (p, pair) in pairs.iter().enumerate() {
            let si = (r + pair.sampled.dy as isize) as usize * k
                + (r + pair.sampled.dx as isize) as usize;
            let ui = (r + pair.subtracted.dy as isize) as usize * k
                + (r + pair.subtracted.dx as isize) as usize;
            d_weights[wbase + p] = d_kernel[kbase + si] - d_kernel[kbase + ui];
        }
    }
    d_weights
}

// ---------------------------------------------------------------------------
// Normalizations and activations
// ---------------------------------------------------------------------------

/// Max-subtracted softmax along the middle axis of an (outer, len, inner)
/// view of the buffer.
pub(crate) fn softmax(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for a in 0..outer {
        for b in 0..inner {
            let idx = |l: usize| (a * len + l) * inner + b;
            let mut mx = f64::NEG_INFINITY;
            for l in 0..len {
                mx = mx.max(x[idx(l)]);
            }
            let mut sum = 0.0;
            for l in 0..len {
                let e = math::exp(x[idx(l)] - mx);
                out[idx(l)] = e;
                sum += e;
            }
            for l in 0..len {
                out[idx(l)] /= sum;
            }
        }
    }
    out
}

/// dx_i = y_i (dy_i − Σ_j dy_j y_j) per slice.
pub(crate) fn softmax_backward(
    y: &[f64],
    d_out: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for a in 0..outer {
        for b in 0..inner {
            let idx = |l: usize| (a * len + l) * inner + b;
            let mut dot = 0.0;
            for l in 0..len {
                dot += d_out[idx(l)] * y[idx(l)];
            }
            for l in 0..len {
                dx[idx(l)] = y[idx(l)] * (d_out[idx(l)] - dot);
            }
        }
    }
    dx
}

/// Row-wise layer norm: y = gain ⊙ (x − μ)/√(σ² + ε) + bias, with gain/bias
/// indexed along the row.
pub(crate) fn layernorm(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    rows: usize,
    cols: usize,
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / math::sqrt(var + eps);
        let orow = &mut out[r * cols..(r + 1) * cols];
        for j in 0..cols {
            orow[j] = gain[j] * ((row[j] - mean) * inv) + bias[j];
        }
    }
    out
}

pub(crate) fn layernorm_backward(
    x: &[f64],
    gain: &[f64],
    d_out: &[f64],
    rows: usize,
    cols: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = cols as f64;
    let mut dx = vec![0.0; x.len()];
    let mut d_gain = vec![0.0; cols];
    let mut d_bias = vec![0.0; cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let drow = &d_out[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / math::sqrt(var + eps);
        // dh = gain ⊙ dy on the normalized coordinates
        let mut dh_sum = 0.0;
        let mut dh_xhat_sum = 0.0;
        for j in 0..cols {
            let xhat = (row[j] - mean) * inv;
            let dh = gain[j] * drow[j];
            dh_sum += dh;
            dh_xhat_sum += dh * xhat;
            d_gain[j] += drow[j] * xhat;
            d_bias[j] += drow[j];
        }
        let dxrow = &mut dx[r * cols..(r + 1) * cols];
        for j in 0..cols {
            let xhat = (row[j] - mean) * inv;
            let dh = gain[j] * drow[j];
            dxrow[j] = inv * (dh - dh_sum / n - xhat * dh_xhat_sum / n);
        }
    }
    (dx, d_gain, d_bias)
}

/// Per-channel standardization over the spatial extent of a c×h×w map, with
/// one gain/bias per channel.
pub(crate) fn channel_norm(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    channels: usize,
    spatial: usize,
    eps: f64,
) -> Vec<f64> {
    let n = spatial as f64;
    let mut out = vec![0.0; x.len()];
    for c in 0..channels {
        let sl = &x[c * spatial..(c + 1) * spatial];
        let mean = sl.iter().sum::<f64>() / n;
        let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / math::sqrt(var + eps);
        let (g, b) = (gain[c], bias[c]);
        let orow = &mut out[c * spatial..(c + 1) * spatial];
        for j in 0..spatial {
            orow[j] = g * ((sl[j] - mean) * inv) + b;
        }
    }
    out
}

pub(crate) fn channel_norm_backward(
    x: &[f64],
    gain: &[f64],
    d_out: &[f64],
    channels: usize,
    spatial: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = spatial as f64;
    let mut dx = vec![0.0; x.len()];
    let mut d_gain = vec![0.0; channels];
    let mut d_bias = vec![0.0; channels];
    for c in 0..channels {
        let sl = &x[c * spatial..(c + 1) * spatial];
        let dsl = &d_out[c * spatial..(c + 1) * spatial];
        let mean = sl.iter().sum::<f64>() / n;
        let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / math::sqrt(var + eps);
        let g = gain[c];
        let mut dh_sum = 0.0;
        let mut dh_xhat_sum = 0.0;
        for j in 0..spatial {
            let xhat = (sl[j] - mean) * inv;
            let dh = g * dsl[j];
            dh_sum += dh;
            dh_xhat_sum += dh * xhat;
            d_gain[c] += dsl[j] * xhat;
            d_bias[c] += dsl[j];
        }
        let dxrow = &mut dx[c * spatial..(c + 1) * spatial];
        for j in 0..spatial {
            let xhat = (sl[j] - mean) * inv;
            let dh = g * dsl[j];
            dxrow[j] = inv * (dh - dh_sum / n - xhat * dh_xhat_sum / n);
        }
    }
    (dx, d_gain, d_bias)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

/// tanh-approximation GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = math::tanh(u);
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// ---------------------------------------------------------------------------
// Cross entropy
// ---------------------------------------------------------------------------

/// Mean over the batch of −log softmax(logits)[label], computed through a
/// max-shifted log-sum-exp. Returns the loss and the softmax probabilities
/// (saved for the backward pass).
pub(crate) fn cross_entropy(
    logits: &[f64],
    rows: usize,
    cols: usize,
    labels: &[usize],
) -> (f64, Vec<f64>) {
    let mut probs = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..cols {
            let e = math::exp(row[j] - mx);
            probs[r * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            probs[r * cols + j] /= sum;
        }
        // −log p[label] = log(Σ exp(z − mx)) − (z_label − mx)
        loss += math::ln(sum) - (row[labels[r]] - mx);
    }
    (loss / rows as f64, probs)
}

pub(crate) fn cross_entropy_backward(
    probs: &[f64],
    rows: usize,
    cols: usize,
    labels: &[usize],
    upstream: f64,
) -> Vec<f64> {
    let scale = upstream / rows as f64;
    let mut d = probs.to_vec();
    for r in 0..rows {
        d[r * cols + labels[r]] -= 1.0;
        for j in 0..cols {
            d[r * cols + j] *= scale;
        }
    }
    d
}
