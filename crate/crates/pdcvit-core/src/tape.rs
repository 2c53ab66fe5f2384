//! Tape-based reverse-mode automatic differentiation.
//!
//! A `GradTape` owns an arena of tensors. Forward ops append result nodes and
//! (when recording and at least one input requires gradients) an op record.
//! `backward` replays the records in reverse, which is a reverse topological
//! order because records are appended in execution order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::kernels;
use crate::pdc::{PixelPair, PixelPairSet};
use crate::rng::Prng;
use crate::tensor::Tensor;

/// Handle to a tensor living on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Record {
    Matmul { a: Var, b: Var, out: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, out: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Scale { x: Var, out: Var, c: f64 },
    AddRowBias { x: Var, bias: Var, out: Var, rows: usize, cols: usize },
    Relu { x: Var, out: Var },
    Gelu { x: Var, out: Var },
    Dropout { x: Var, out: Var, mask: Vec<f64> },
    Softmax { x: Var, out: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, out: Var, rows: usize, cols: usize, eps: f64 },
    ChannelNorm { x: Var, gain: Var, bias: Var, out: Var, channels: usize, spatial: usize, eps: f64 },
    Conv2d { input: Var, kernel: Var, out: Var, cin: usize, h: usize, w: usize, cout: usize, k: usize, stride: usize, padding: usize },
    PadReplicate { x: Var, out: Var, c: usize, h: usize, w: usize, pad: usize },
    PdcPairs { input: Var, weights: Var, out: Var, cin: usize, h: usize, w: usize, cout: usize, k: usize, pairs: Vec<PixelPair>, stride: usize },
    ScatterPdc { weights: Var, out: Var, cout: usize, cin: usize, k: usize, pairs: Vec<PixelPair> },
    CrossEntropy { logits: Var, out: Var, rows: usize, cols: usize, labels: Vec<usize>, probs: Vec<f64> },
    ConcatRows { parts: Vec<Var>, out: Var, cols: usize, rows_each: Vec<usize> },
    SliceRows { x: Var, out: Var, start: usize, len: usize, cols: usize, total_rows: usize },
    ConcatCols { parts: Vec<Var>, out: Var, rows: usize, cols_each: Vec<usize> },
    SliceCols { x: Var, out: Var, start: usize, len: usize, rows: usize, total_cols: usize },
    Patchify { x: Var, out: Var, c: usize, h: usize, w: usize, p: usize },
    Reshape { x: Var, out: Var },
    SumAll { x: Var, out: Var },
}

pub struct GradTape {
    nodes: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    records: Vec<Record>,
    recording: bool,
    backward_done: bool,
}

impl GradTape {
    /// A tape that records backward information.
    pub fn recording() -> Self {
        GradTape { nodes: Vec::new(), grads: Vec::new(), records: Vec::new(), recording: true, backward_done: false }
    }

    /// A forward-only tape: ops compute values but record nothing.
    pub fn inference() -> Self {
        GradTape { nodes: Vec::new(), grads: Vec::new(), records: Vec::new(), recording: false, backward_done: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded ops (not nodes).
    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.records.is_empty()
    }

    /// Drops all nodes, grads, and records; the recording mode is kept.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.records.clear();
        self.backward_done = false;
    }

    /// Registers a value that does not need gradients.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_node(t, false)
    }

    /// Registers a parameter: data is copied in and marked as requiring grad.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_node(t.clone(), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0]
    }

    /// Gradient buffer of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Output vars of every recorded softmax, for diagnostics on real
    /// forward passes (e.g. checking that attention rows sum to one).
    pub fn recorded_softmax_outputs(&self) -> Vec<Var> {
        self.records
            .iter()
            .filter_map(|r| match r {
                Record::Softmax { out, .. } => Some(*out),
                _ => None,
            })
            .collect()
    }

    fn push_node(&mut self, mut t: Tensor, requires_grad: bool) -> Var {
        t.requires_grad = requires_grad;
        t.grad = None;
        self.nodes.push(t);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_result(&mut self, t: Tensor, inputs: &[Var]) -> (Var, bool) {
        let needs = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let out = self.push_node(t, needs);
        (out, needs && self.recording)
    }

    fn shape2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.nodes[v.0].shape();
        if s.len() != 2 {
            return Err(CoreError::ShapeMismatch { op, detail: format!("expected rank 2, got {s:?}") });
        }
        Ok((s[0], s[1]))
    }

    fn shape3(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.nodes[v.0].shape();
        if s.len() != 3 {
            return Err(CoreError::ShapeMismatch { op, detail: format!("expected rank 3, got {s:?}") });
        }
        Ok((s[0], s[1], s[2]))
    }

    // -- dense linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.shape2(a, "matmul")?;
        let (kb, n) = self.shape2(b, "matmul")?;
        if ka != kb {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {ka} vs {kb}"),
            });
        }
        let data = kernels::matmul(self.nodes[a.0].data(), self.nodes[b.0].data(), m, ka, n);
        let t = Tensor::from_vec(&[m, n], data)?;
        let (out, rec) = self.push_result(t, &[a, b]);
        if rec {
            self.records.push(Record::Matmul { a, b, out, m, k: ka, n });
        }
        Ok(out)
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.shape2(x, "transpose2d")?;
        let data = kernels::transpose(self.nodes[x.0].data(), rows, cols);
        let t = Tensor::from_vec(&[cols, rows], data)?;
        let (out, rec) = self.push_result(t, &[x]);
        if rec {
            self.records.push(Record::Transpose { x, out, rows, cols });
        }
        Ok(out)
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape() != self.nodes[b.0].shape() {
            return Err(CoreError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape(), self.nodes[b.0].shape()),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data()
            .iter()
            .zip(self.nodes[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.nodes[a.0].shape(), data)?;
        let (out, rec) = self.push_result(t, &[a, b]);
        if rec {
            self.records.push(Record::Add { a, b, out });
        }
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape() != self.nodes[b.0].shape() {
            return Err(CoreError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape(), self.nodes[b.0].shape()),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data()
            .iter()
            .zip(self.nodes[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.nodes[a.0].shape(), data)?;
        let (out, rec) = self.push_result(t, &[a, b]);
        if rec {
            self.records.push(Record::Mul { a, b, out });
        }
        Ok(out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.nodes[x.0].data().iter().map(|v| c * v).collect();
        let t = Tensor::from_vec(self.nodes[x.0].shape(), data)?;
        let (out, rec) = self.push_result(t, &[x]);
        if rec {
            self.records.push(Record::Scale { x, out, c });
        }
        Ok(out)
    }

    /// x: [rows, cols] plus a row-broadcast bias of length cols.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.shape2(x, "add_row_bias")?;
        if self.nodes[bias.0].shape() != [cols] {
            return Err(CoreError::ShapeMismatch {
                op: "add_row_bias",
                detail: format!("bias {:?} vs cols {cols}", self.nodes[bias.0].shape()),
            });
        }
        let b = self.nodes[bias.0].data();
        let data: Vec<f64> = self.nodes[x.0]
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % cols])
            .collect();
        let t = Tensor::from_vec(&[rows, cols], data)?;
        let (out, rec) = self.push_result(t, &[x, bias]);
        if rec {
            self.records.push(Record::AddRowBias { x, bias, out, rows, cols });
        }
        Ok(out)
    }

    // -- activations ---------------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.nodes[x.0].data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::from_vec(self.nodes[x.0].shape(), data)?;
        let (out, rec) = self.push_result(t, &[x]);
        if rec {
            self.records.push(Record::Relu { x, out });
        }
        Ok(out)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.nodes[x.0].data().iter().map(|v| kernels::gelu(*v)).collect();
        let t = Tensor::from_vec(self.nodes[x.0].shape(), data)?;
        let (out, rec) = self.push_result(t, &[x]);
        if rec {
            self.records.push(Record::Gelu { x, out });
        }
        Ok(out)
    }

    /// In training mode zeroes entries with probability p and scales
    /// survivors by 1/(1−p); in eval mode it is the identity (same Var).
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut Prng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(CoreError::InvalidParam {
                op: "dropout",
                detail: format!("p = {p}, need 0 <= p < 1"),
            });
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[x.0].numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = self.nodes[x.0].data().iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
        let t = Tensor::from_vec(self.nodes[x.0].shape(), data)?;
        let (out, rec) = self.push_result(t, &[x]);
        if rec {
            self.records.push(Record::Dropout { x, out, mask });
        }
        Ok(out)
    }

    // -- normalizations ------------------------------------------------------

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape().to_vec();
        if axis >= shape.len() {
            return Err(CoreError::InvalidParam {
                op: "softmax",
                detail: format!("axis {axis} for shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = kernels::softmax(self.nodes[x.0].data(), outer, len, inner);
        let t = Tensor::from_vec(&shape, data)?;
        let (out, rec) = self.push_result(t, &[x]);
        if rec {
            self.records.push(Record::Softmax { x, out, outer, len, inner });
        }
        Ok(out)
    }

    /// Normalizes the last axis of a [rows, cols] tensor; gain/bias have
    /// length cols.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.shape2(x, "layernorm")?;
        if self.nodes[gain.0].shape() != [cols] || self.nodes[bias.0].shape() != [cols] {
            return Err(CoreError::ShapeMismatch {
                op: "layernorm",
                detail: format!(
                    "gain {:?} / bias {:?} vs cols {cols}",
                    self.nodes[gain.0].shape(),
                    self.nodes[bias.0].shape()
                ),
            });
        }
        let data = kernels::layernorm(
            self.nodes[x.0].data(),
            self.nodes[gain.0].data(),
            self.nodes[bias.0].data(),
            rows,
            cols,
            eps,
        );
        let t = Tensor::from_vec(&[rows, cols], data)?;
        let (out, rec) = self.push_result(t, &[x, gain, bias]);
        if rec {
            self.records.push(Record::LayerNorm { x, gain, bias, out, rows, cols, eps });
        }
        Ok(out)
    }

    /// Standardizes each channel of a [c, h, w] map over its spatial extent;
    /// gain/bias have length c.
    pub fn channel_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.shape3(x, "channel_norm")?;
        if self.nodes[gain.0].shape() != [c] || self.nodes[bias.0].shape() != [c] {
            return Err(CoreError::ShapeMismatch {
                op: "channel_norm",
                detail: format!(
                    "gain {:?} / bias {:?} vs channels {c}",
                    self.nodes[gain.0].shape(),
                    self.nodes[bias.0].shape()
                ),
            });
        }
        let data = kernels::channel_norm(
            self.nodes[x.0].data(),
            self.nodes[gain.0].data(),
            self.nodes[bias.0].data(),
            c,
            h * w,
            eps,
        );
        let t = Tensor::from_vec(&[c, h, w], data)?;
        let (out, rec) = self.push_result(t, &[x, gain, bias]);
        if rec {
            self.records.push(Record::ChannelNorm { x, gain, bias, out, channels: c, spatial: h * w, eps });
        }
        Ok(out)
    }

    // -- convolution family --------------------------------------------------

    /// Cross-correlation with zero padding; input [cin,h,w], kernel
    /// [cout,cin,k,k].
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (cin, h, w) = self.shape3(input, "conv2d")?;
        let ks = self.nodes[kernel.0].shape().to_vec();
        if ks.len() != 4 || ks[1] != cin || ks[2] != ks[3] {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {ks:?} vs input channels {cin}"),
            });
        }
        let (cout, k) = (ks[0], ks[2]);
        if stride == 0 {
            return Err(CoreError::InvalidParam { op: "conv2d", detail: "stride must be positive".into() });
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {k} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            });
        }
        let (data, ho, wo) = kernels::conv2d(
            self.nodes[input.0].data(),
            cin,
            h,
            w,
            self.nodes[kernel.0].data(),
            cout,
            k,
            stride,
            padding,
        );
        let t = Tensor::from_vec(&[cout, ho, wo], data)?;
        let (out, rec) = self.push_result(t, &[input, kernel]);
        if rec {
            self.records.push(Record::Conv2d { input, kernel, out, cin, h, w, cout, k, stride, padding });
        }
        Ok(out)
    }

    /// Edge-replication padding of a [c,h,w] map.
    pub fn pad_replicate(&mut self, x: Var, pad: usize) -> Result<Var> {
        if pad == 0 {
            return Ok(x);
        }
        let (c, h, w) = self.shape3(x, "pad_replicate")?;
        let data = kernels::pad_replicate(self.nodes[x.0].data(), c, h, w, pad);
        let t = Tensor::from_vec(&[c, h + 2 * pad, w + 2 * pad], data)?;
        let (out, rec) = self.push_result(t, &[x]);
        if rec {
            self.records.push(Record::PadReplicate { x, out, c, h, w, pad });
        }
        Ok(out)
    }

    /// Direct pair-wise PDC over an already-padded [cin,h,w] input; weights
    /// [cout,cin,num_pairs].
    pub fn pdc_pairs(&mut self, input: Var, weights: Var, pair_set: &PixelPairSet, stride: usize) -> Result<Var> {
        let (cin, h, w) = self.shape3(input, "pdc_pairs")?;
        let ws = self.nodes[weights.0].shape().to_vec();
        let k = pair_set.kernel_size();
        if ws.len() != 3 || ws[1] != cin || ws[2] != pair_set.pairs().len() {
            return Err(CoreError::ShapeMismatch {
                op: "pdc_pairs",
                detail: format!("weights {ws:?} vs cin {cin}, pairs {}", pair_set.pairs().len()),
            });
        }
        if stride == 0 {
            return Err(CoreError::InvalidParam { op: "pdc_pairs", detail: "stride must be positive".into() });
        }
        if k > h || k > w {
            return Err(CoreError::ShapeMismatch {
                op: "pdc_pairs",
                detail: format!("window {k} larger than input {h}x{w}"),
            });
        }
        let cout = ws[0];
        let (data, ho, wo) = kernels::pdc_direct(
            self.nodes[input.0].data(),
            cin,
            h,
            w,
            self.nodes[weights.0].data(),
            cout,
            k,
            pair_set.pairs(),
            stride,
        );
        let t = Tensor::from_vec(&[cout, ho, wo], data)?;
        let (out, rec) = self.push_result(t, &[input, weights]);
        if rec {
            self.records.push(Record::PdcPairs {
                input,
                weights,
                out,
                cin,
                h,
                w,
                cout,
                k,
                pairs: pair_set.pairs().to_vec(),
                stride,
            });
        }
        Ok(out)
    }

    /// Converts pair weights [cout,cin,num_pairs] into a dense kernel
    /// [cout,cin,k,k] by scattering +w/−w to the paired offsets.
    pub fn scatter_pdc(&mut self, weights: Var, pair_set: &PixelPairSet) -> Result<Var> {
        let ws = self.nodes[weights.0].shape().to_vec();
        if ws.len() != 3 || ws[2] != pair_set.pairs().len() {
            return Err(CoreError::ShapeMismatch {
                op: "scatter_pdc",
                detail: format!("weights {ws:?} vs pairs {}", pair_set.pairs().len()),
            });
        }
        let (cout, cin) = (ws[0], ws[1]);
        let k = pair_set.kernel_size();
        let data = kernels::scatter_pdc(self.nodes[weights.0].data(), cout, cin, k, pair_set.pairs());
        let t = Tensor::from_vec(&[cout, cin, k, k], data)?;
        let (out, rec) = self.push_result(t, &[weights]);
        if rec {
            self.records.push(Record::ScatterPdc { weights, out, cout, cin, k, pairs: pair_set.pairs().to_vec() });
        }
        Ok(out)
    }

    // -- loss ----------------------------------------------------------------

    /// Mean batch cross entropy of [rows, cols] logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape2(logits, "cross_entropy")?;
        if labels.len() != rows {
            return Err(CoreError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{} labels for {rows} rows", labels.len()),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(CoreError::IndexOutOfRange {
                op: "cross_entropy",
                detail: format!("label {bad} with {cols} classes"),
            });
        }
        let (loss, probs) = kernels::cross_entropy(self.nodes[logits.0].data(), rows, cols, labels);
        let t = Tensor::scalar(loss);
        let (out, rec) = self.push_result(t, &[logits]);
        if rec {
            self.records.push(Record::CrossEntropy {
                logits,
                out,
                rows,
                cols,
                labels: labels.to_vec(),
                probs,
            });
        }
        Ok(out)
    }

    // -- structure ops -------------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::InvalidParam { op: "concat_rows", detail: "no parts".into() });
        }
        let (_, cols) = self.shape2(parts[0], "concat_rows")?;
        let mut rows_each = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.shape2(p, "concat_rows")?;
            if c != cols {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("cols {c} vs {cols}"),
                });
            }
            rows_each.push(r);
            data.extend_from_slice(self.nodes[p.0].data());
        }
        let total: usize = rows_each.iter().sum();
        let t = Tensor::from_vec(&[total, cols], data)?;
        let (out, rec) = self.push_result(t, parts);
        if rec {
            self.records.push(Record::ConcatRows { parts: parts.to_vec(), out, cols, rows_each });
        }
        Ok(out)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape2(x, "slice_rows")?;
        if start + len > rows {
            return Err(CoreError::IndexOutOfRange {
                op: "slice_rows",
                detail: format!("{start}+{len} > {rows}"),
            });
        }
        let data = self.nodes[x.0].data()[start * cols..(start + len) * cols].to_vec();
        let t = Tensor::from_vec(&[len, cols], data)?;
        let (out, rec) = self.push_result(t, &[x]);
        if rec {
            self.records.push(Record::SliceRows { x, out, start, len, cols, total_rows: rows });
        }
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::InvalidParam { op: "concat_cols", detail: "no parts".into() });
        }
        let (rows, _) = self.shape2(parts[0], "concat_cols")?;
        let mut cols_each = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.shape2(p, "concat_cols")?;
            if r != rows {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("rows {r} vs {rows}"),
                });
            }
            cols_each.push(c);
        }
        let total: usize = cols_each.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (idx, &p) in parts.iter().enumerate() {
            let c = cols_each[idx];
            let src = self.nodes[p.0].data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + c]
                    .copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let t = Tensor::from_vec(&[rows, total], data)?;
        let (out, rec) = self.push_result(t, parts);
        if rec {
            self.records.push(Record::ConcatCols { parts: parts.to_vec(), out, rows, cols_each });
        }
        Ok(out)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape2(x, "slice_cols")?;
        if start + len > cols {
            return Err(CoreError::IndexOutOfRange {
                op: "slice_cols",
                detail: format!("{start}+{len} > {cols}"),
            });
        }
        let src = self.nodes[x.0].data();
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len].copy_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor::from_vec(&[rows, len], data)?;
        let (out, rec) = self.push_result(t, &[x]);
        if rec {
            self.records.push(Record::SliceCols { x, out, start, len, rows, total_cols: cols });
        }
        Ok(out)
    }

    /// Splits a [c,h,w] map into non-overlapping p×p patches in row-major
    /// grid order; each patch is flattened channel-major then row-major,
    /// giving [N, c·p²] with N = (h/p)(w/p).
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let (c, h, w) = self.shape3(x, "patchify")?;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(CoreError::ShapeMismatch {
                op: "patchify",
                detail: format!("patch {p} does not divide {h}x{w}"),
            });
        }
        let (gh, gw) = (h / p, w / p);
        let n = gh * gw;
        let plen = c * p * p;
        let src = self.nodes[x.0].data();
        let mut data = vec![0.0; n * plen];
        for gy in 0..gh {
            for gx in 0..gw {
                let patch = gy * gw + gx;
                for ci in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            data[patch * plen + ci * p * p + py * p + px] =
                                src[(ci * h + gy * p + py) * w + gx * p + px];
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[n, plen], data)?;
        let (out, rec) = self.push_result(t, &[x]);
        if rec {
            self.records.push(Record::Patchify { x, out, c, h, w, p });
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].numel() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.nodes[x.0].shape()),
            });
        }
        let t = Tensor::from_vec(shape, self.nodes[x.0].data().to_vec())?;
        let (out, rec) = self.push_result(t, &[x]);
        if rec {
            self.records.push(Record::Reshape { x, out });
        }
        Ok(out)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.nodes[x.0].data().iter().sum();
        let t = Tensor::scalar(s);
        let (out, rec) = self.push_result(t, &[x]);
        if rec {
            self.records.push(Record::SumAll { x, out });
        }
        Ok(out)
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar loss. Populates gradients for every
    /// requires-grad node reachable from the loss; unreachable nodes keep
    /// `None`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(CoreError::Contract {
                op: "backward",
                detail: "tape is in inference mode".into(),
            });
        }
        if self.backward_done {
            return Err(CoreError::Contract {
                op: "backward",
                detail: "backward already ran on this tape; reset() first".into(),
            });
        }
        if self.nodes[loss.0].numel() != 1 {
            return Err(CoreError::Contract {
                op: "backward",
                detail: format!("loss must be scalar, shape is {:?}", self.nodes[loss.0].shape()),
            });
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..self.records.len()).rev() {
            let record = self.records[idx].clone();
            self.backward_record(&record);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.grads[v.0] = Some(delta.to_vec()),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_record(&mut self, record: &Record) {
        match record {
            Record::Matmul { a, b, out, m, k, n } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                if self.needs(*a) {
                    let da = kernels::matmul_nt(&d, self.nodes[b.0].data(), *m, *n, *k);
                    self.accumulate(*a, &da);
                }
                if self.needs(*b) {
                    let db = kernels::matmul_tn(self.nodes[a.0].data(), &d, *m, *k, *n);
                    self.accumulate(*b, &db);
                }
            }
            Record::Transpose { x, out, rows, cols } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                let dx = kernels::transpose(&d, *cols, *rows);
                self.accumulate(*x, &dx);
            }
            Record::Add { a, b, out } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                if self.needs(*a) {
                    self.accumulate(*a, &d);
                }
                if self.needs(*b) {
                    self.accumulate(*b, &d);
                }
            }
            Record::Mul { a, b, out } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                if self.needs(*a) {
                    let da: Vec<f64> = d.iter().zip(self.nodes[b.0].data()).map(|(g, v)| g * v).collect();
                    self.accumulate(*a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = d.iter().zip(self.nodes[a.0].data()).map(|(g, v)| g * v).collect();
                    self.accumulate(*b, &db);
                }
            }
            Record::Scale { x, out, c } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                let dx: Vec<f64> = d.iter().map(|g| g * c).collect();
                self.accumulate(*x, &dx);
            }
            Record::AddRowBias { x, bias, out, rows, cols } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                if self.needs(*x) {
                    self.accumulate(*x, &d);
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; *cols];
                    for r in 0..*rows {
                        for j in 0..*cols {
                            db[j] += d[r * cols + j];
                        }
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Record::Relu { x, out } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                let dx: Vec<f64> = d
                    .iter()
                    .zip(self.nodes[x.0].data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Record::Gelu { x, out } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                let dx: Vec<f64> = d
                    .iter()
                    .zip(self.nodes[x.0].data())
                    .map(|(g, v)| g * kernels::gelu_grad(*v))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Record::Dropout { x, out, mask } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                let dx: Vec<f64> = d.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(*x, &dx);
            }
            Record::Softmax { x, out, outer, len, inner } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                let dx = kernels::softmax_backward(self.nodes[out.0].data(), &d, *outer, *len, *inner);
                self.accumulate(*x, &dx);
            }
            Record::LayerNorm { x, gain, bias, out, rows, cols, eps } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                let (dx, dg, db) = kernels::layernorm_backward(
                    self.nodes[x.0].data(),
                    self.nodes[gain.0].data(),
                    &d,
                    *rows,
                    *cols,
                    *eps,
                );
                if self.needs(*x) {
                    self.accumulate(*x, &dx);
                }
                if self.needs(*gain) {
                    self.accumulate(*gain, &dg);
                }
                if self.needs(*bias) {
                    self.accumulate(*bias, &db);
                }
            }
            Record::ChannelNorm { x, gain, bias, out, channels, spatial, eps } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                let (dx, dg, db) = kernels::channel_norm_backward(
                    self.nodes[x.0].data(),
                    self.nodes[gain.0].data(),
                    &d,
                    *channels,
                    *spatial,
                    *eps,
                );
                if self.needs(*x) {
                    self.accumulate(*x, &dx);
                }
                if self.needs(*gain) {
                    self.accumulate(*gain, &dg);
                }
                if self.needs(*bias) {
                    self.accumulate(*bias, &db);
                }
            }
            Record::Conv2d { input, kernel, out, cin, h, w, cout, k, stride, padding } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                let (dx, dk) = kernels::conv2d_backward(
                    self.nodes[input.0].data(),
                    self.nodes[kernel.0].data(),
                    &d,
                    *cin,
                    *h,
                    *w,
                    *cout,
                    *k,
                    *stride,
                    *padding,
                );
                if self.needs(*input) {
                    self.accumulate(*input, &dx);
                }
                if self.needs(*kernel) {
                    self.accumulate(*kernel, &dk);
                }
            }
            Record::PadReplicate { x, out, c, h, w, pad } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                let dx = kernels::pad_replicate_backward(&d, *c, *h, *w, *pad);
                self.accumulate(*x, &dx);
            }
            Record::PdcPairs { input, weights, out, cin, h, w, cout, k, pairs, stride } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                let (dx, dw) = kernels::pdc_direct_backward(
                    self.nodes[input.0].data(),
                    self.nodes[weights.0].data(),
                    &d,
                    *cin,
                    *h,
                    *w,
                    *cout,
                    *k,
                    pairs,
                    *stride,
                );
                if self.needs(*input) {
                    self.accumulate(*input, &dx);
                }
                if self.needs(*weights) {
                    self.accumulate(*weights, &dw);
                }
            }
            Record::ScatterPdc { weights, out, cout, cin, k, pairs } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                let dw = kernels::scatter_pdc_backward(&d, *cout, *cin, *k, pairs);
                self.accumulate(*weights, &dw);
            }
            Record::CrossEntropy { logits, out, rows, cols, labels, probs } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                let dl = kernels::cross_entropy_backward(probs, *rows, *cols, labels, d[0]);
                self.accumulate(*logits, &dl);
            }
            Record::ConcatRows { parts, out, cols, rows_each } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                let mut offset = 0;
                for (part, r) in parts.iter().zip(rows_each) {
                    let slice = &d[offset..offset + r * cols];
                    if self.needs(*part) {
                        self.accumulate(*part, slice);
                    }
                    offset += r * cols;
                }
            }
            Record::SliceRows { x, out, start, len, cols, total_rows } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                let mut dx = vec![0.0; total_rows * cols];
                dx[start * cols..(start + len) * cols].copy_from_slice(&d);
                self.accumulate(*x, &dx);
            }
            Record::ConcatCols { parts, out, rows, cols_each } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                let total: usize = cols_each.iter().sum();
                let mut offset = 0;
                for (part, c) in parts.iter().zip(cols_each) {
                    if self.needs(*part) {
                        let mut dp = vec![0.0; rows * c];
                        for r in 0..*rows {
                            dp[r * c..(r + 1) * c]
                                .copy_from_slice(&d[r * total + offset..r * total + offset + c]);
                        }
                        self.accumulate(*part, &dp);
                    }
                    offset += c;
                }
            }
            Record::SliceCols { x, out, start, len, rows, total_cols } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                let mut dx = vec![0.0; rows * total_cols];
                for r in 0..*rows {
                    dx[r * total_cols + start..r * total_cols + start + len]
                        .copy_from_slice(&d[r * len..(r + 1) * len]);
                }
                self.accumulate(*x, &dx);
            }
            Record::Patchify { x, out, c, h, w, p } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                let (gh, gw) = (h / p, w / p);
                let plen = c * p * p;
                let mut dx = vec![0.0; c * h * w];
                for gy in 0..gh {
                    for gx in 0..gw {
                        let patch = gy * gw + gx;
                        for ci in 0..*c {
                            for py in 0..*p {
                                for px in 0..*p {
                                    dx[(ci * h + gy * p + py) * w + gx * p + px] +=
                                        d[patch * plen + ci * p * p + py * p + px];
                                }
                            }
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Record::Reshape { x, out } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                self.accumulate(*x, &d);
            }
            Record::SumAll { x, out } => {
                let Some(d) = self.grads[out.0].clone() else { return };
                let dx = vec![d[0]; self.nodes[x.0].numel()];
                self.accumulate(*x, &dx);
            }
        }
    }
}
