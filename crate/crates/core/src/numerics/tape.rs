//! Reverse-mode gradient tape.
//!
//! Values are appended to an arena as operations execute. When recording is
//! on, each operation also appends a record holding whatever it needs to
//! produce its vector-Jacobian product later; [`Tape::backward`] replays the
//! records in reverse.

use std::sync::Arc;

use super::ops::{self, gemm_into, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lists of row indices. Each inner list is one independent problem
/// (one attention sequence, or one pooling segment).
pub type RowGroups = Arc<Vec<Vec<usize>>>;

/// Deliberate backward corruption, used as a negative control by gradcheck.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    GeluBackward,
}

#[derive(Debug)]
enum Op {
    MatMul { a: usize, b: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    ScaleRows { x: usize, factors: Arc<Vec<f64>> },
    ScaleBy { x: usize, s: usize, complement: bool },
    Gelu { x: usize },
    Tanh { x: usize },
    SoftmaxRows { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows { src: usize, idx: Arc<Vec<usize>> },
    ConcatRows { parts: Vec<usize> },
    Reshape { x: usize },
    Attention { q: usize, k: usize, v: usize, groups: RowGroups, heads: usize, scale: f64, probs: Vec<f64> },
    SegmentMean { x: usize, segs: RowGroups },
    SegmentMax { x: usize, argmax: Vec<usize> },
    SegmentSoftmax { x: usize, segs: RowGroups },
    SegmentWeightedSum { x: usize, w: usize, segs: RowGroups },
    Sum { x: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Record {
    out: usize,
    op: Op,
}

/// Arena of values plus (optionally) the record of how they were produced.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    needs_grad: Vec<bool>,
    inputs: Vec<usize>,
    records: Vec<Record>,
    recording: bool,
    fault: Option<Fault>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`; panics if `v` was not a recorded input.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).expect("no gradient for this variable")
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn two_d(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    /// A tape that records operations for a later backward pass.
    pub fn new() -> Self {
        Self {
            recording: true,
            ..Self::default()
        }
    }

    /// A tape that only evaluates; its record stays empty.
    pub fn inference() -> Self {
        Self::default()
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    /// A differentiable input (parameter or data we want gradients for).
    pub fn input(&mut self, t: Tensor) -> Var {
        let id = self.values.len();
        self.values.push(t);
        self.needs_grad.push(self.recording);
        if self.recording {
            self.inputs.push(id);
        }
        Var(id)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.needs_grad.push(false);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    fn push(&mut self, value: Tensor, op: &'static str, parents: &[usize], record: impl FnOnce() -> Op) -> Result<Var> {
        let value = value.ensure_finite(op)?;
        let id = self.values.len();
        let needs = self.recording && parents.iter().any(|&p| self.needs_grad[p]);
        self.values.push(value);
        self.needs_grad.push(needs);
        if needs {
            self.records.push(Record { out: id, op: record() });
        }
        Ok(Var(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        self.push(out, "matmul", &[a.0, b.0], || Op::MatMul { a: a.0, b: b.0 })
    }

    /// `x·W (+ b)` along the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (rows, d_in) = two_d(xv);
        let [wi, d_out] = *wv.shape() else {
            return Err(Error::shape("linear", xv.shape(), wv.shape()));
        };
        if wi != d_in {
            return Err(Error::shape("linear", xv.shape(), wv.shape()));
        }
        let mut out = vec![0.0; rows * d_out];
        gemm_into(MatRef::new(xv.data(), rows, d_in), MatRef::new(wv.data(), d_in, d_out), &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [d_out] {
                return Err(Error::shape("linear", wv.shape(), bv.shape()));
            }
            ops::add_bias_rows(&mut out, bv.data());
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let value = Tensor::new(shape, out)?;
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|b| b.0));
        self.push(value, "linear", &parents, || Op::Linear { x: x.0, w: w.0, b: b.map(|b| b.0) })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, "add", &[a.0, b.0], || Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, "sub", &[a.0, b.0], || Op::Sub { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).scale(c);
        self.push(out, "scale", &[x.0], || Op::Scale { x: x.0, c })
    }

    /// Multiplies row `r` of the 2-d view by `factors[r]`.
    pub fn scale_rows(&mut self, x: Var, factors: Arc<Vec<f64>>) -> Result<Var> {
        let xv = self.value(x);
        if factors.len() != xv.rows() {
            return Err(Error::invalid(
                "scale_rows",
                format!("{} factors for {} rows", factors.len(), xv.rows()),
            ));
        }
        let mut out = xv.clone();
        let c = out.cols();
        for (row, f) in out.data_mut().chunks_mut(c).zip(factors.iter()) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        self.push(out, "scale_rows", &[x.0], || Op::ScaleRows { x: x.0, factors })
    }

    fn scale_by_impl(&mut self, x: Var, s: Var, complement: bool) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::shape("scale_by", sv.shape(), &[1]));
        }
        let f = if complement { 1.0 - sv.item() } else { sv.item() };
        let out = self.value(x).scale(f);
        self.push(out, "scale_by", &[x.0, s.0], || Op::ScaleBy { x: x.0, s: s.0, complement })
    }

    /// `s·x` for a one-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        self.scale_by_impl(x, s, false)
    }

    /// `(1 − s)·x` for a one-element `s`.
    pub fn scale_by_complement(&mut self, x: Var, s: Var) -> Result<Var> {
        self.scale_by_impl(x, s, true)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = ops::gelu(self.value(x))?;
        self.push(out, "gelu", &[x.0], || Op::Gelu { x: x.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, "tanh", &[x.0], || Op::Tanh { x: x.0 })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(x))?;
        self.push(out, "softmax_rows", &[x.0], || Op::SoftmaxRows { x: x.0 })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != [d] || b.shape() != [d] {
            return Err(Error::shape("layer_norm", xv.shape(), g.shape()));
        }
        let (xhat, inv_std) = ops::normalize_rows(xv.data(), d, eps);
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((o, gi), bi) in row.iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gi + bi;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(value, "layer_norm", &[x.0, gamma.0, beta.0], || Op::LayerNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat,
            inv_std,
        })
    }

    /// Rows `idx` of the 2-d view of `src`, as an `len(idx) × cols` tensor.
    pub fn gather_rows(&mut self, src: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let sv = self.value(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= sv.rows()) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of range for {:?}", sv.shape()),
            ));
        }
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        let out = sv.select_rows(&idx);
        self.push(out, "gather_rows", &[src.0], || Op::GatherRows { src: src.0, idx })
    }

    /// Stacks the 2-d views of `parts` vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(Error::shape("concat_rows", self.value(parts[0]).shape(), pv.shape()));
            }
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new([data.len() / cols, cols], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(value, "concat_rows", &ids.clone(), || Op::ConcatRows { parts: ids })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, "reshape", &[x.0], || Op::Reshape { x: x.0 })
    }

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `S×D`. For every group of rows and every head (a
    /// contiguous block of `D/heads` columns), the rows of the group attend
    /// to each other with `softmax(q kᵀ / scale) v`. Rows outside every group
    /// produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: RowGroups, heads: usize, scale: f64) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        let (s_total, d) = two_d(qv);
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid("attention", format!("width {d} not divisible by {heads} heads")));
        }
        if scale <= 0.0 {
            return Err(Error::invalid("attention", "scale must be positive"));
        }
        for g in groups.iter() {
            if g.is_empty() || g.iter().any(|&r| r >= s_total) {
                return Err(Error::invalid("attention", "empty group or row out of range"));
            }
        }
        let dh = d / heads;
        let mut out = vec![0.0; s_total * d];
        let prob_len: usize = groups.iter().map(|g| g.len() * g.len()).sum::<usize>() * heads;
        let mut probs = Vec::with_capacity(prob_len);
        let mut buf = AttnBuffers::default();
        for g in groups.iter() {
            let s = g.len();
            for h in 0..heads {
                let c0 = h * dh;
                gather_block(qv.data(), d, g, c0, dh, &mut buf.q);
                gather_block(kv.data(), d, g, c0, dh, &mut buf.k);
                gather_block(vv.data(), d, g, c0, dh, &mut buf.v);
                buf.p.resize(s * s, 0.0);
                gemm_into(MatRef::new(&buf.q, s, dh), MatRef::new(&buf.k, s, dh).t(), &mut buf.p, false);
                let inv = 1.0 / scale;
                for row in buf.p.chunks_mut(s) {
                    row.iter_mut().for_each(|x| *x *= inv);
                    ops::softmax_in_place(row);
                }
                buf.o.resize(s * dh, 0.0);
                gemm_into(MatRef::new(&buf.p, s, s), MatRef::new(&buf.v, s, dh), &mut buf.o, false);
                scatter_block(&mut out, d, g, c0, dh, &buf.o, false);
                probs.extend_from_slice(&buf.p);
            }
        }
        let value = Tensor::new(qv.shape().to_vec(), out)?;
        self.push(value, "attention", &[q.0, k.0, v.0], || Op::Attention {
            q: q.0,
            k: k.0,
            v: v.0,
            groups,
            heads,
            scale,
            probs,
        })
    }

    fn check_segments(&self, op: &'static str, x: Var, segs: &RowGroups) -> Result<()> {
        let rows = self.value(x).rows();
        if segs.is_empty() {
            return Err(Error::invalid(op, "no segments"));
        }
        for s in segs.iter() {
            if s.is_empty() {
                return Err(Error::invalid(op, "empty segment"));
            }
            if s.iter().any(|&r| r >= rows) {
                return Err(Error::invalid(op, "segment row out of range"));
            }
        }
        Ok(())
    }

    /// Mean of the rows in each segment; `segments × cols`.
    pub fn segment_mean(&mut self, x: Var, segs: RowGroups) -> Result<Var> {
        self.check_segments("segment_mean", x, &segs)?;
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = vec![0.0; segs.len() * d];
        for (s, rows) in segs.iter().enumerate() {
            let o = &mut out[s * d..(s + 1) * d];
            for &r in rows {
                o.iter_mut().zip(xv.row(r)).for_each(|(a, b)| *a += b);
            }
            let inv = 1.0 / rows.len() as f64;
            o.iter_mut().for_each(|a| *a *= inv);
        }
        let value = Tensor::new([segs.len(), d], out)?;
        self.push(value, "segment_mean", &[x.0], || Op::SegmentMean { x: x.0, segs })
    }

    /// Per-column maximum over the rows in each segment. Ties resolve to the
    /// first row in segment order.
    pub fn segment_max(&mut self, x: Var, segs: RowGroups) -> Result<Var> {
        self.check_segments("segment_max", x, &segs)?;
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = vec![0.0; segs.len() * d];
        let mut argmax = vec![0; segs.len() * d];
        for (s, rows) in segs.iter().enumerate() {
            for j in 0..d {
                let mut best = rows[0];
                for &r in &rows[1..] {
                    if xv.row(r)[j] > xv.row(best)[j] {
                        best = r;
                    }
                }
                out[s * d + j] = xv.row(best)[j];
                argmax[s * d + j] = best;
            }
        }
        let value = Tensor::new([segs.len(), d], out)?;
        self.push(value, "segment_max", &[x.0], || Op::SegmentMax { x: x.0, argmax })
    }

    /// Softmax of a column vector `n×1` within each segment. Rows outside
    /// every segment are zero.
    pub fn segment_softmax(&mut self, x: Var, segs: RowGroups) -> Result<Var> {
        self.check_segments("segment_softmax", x, &segs)?;
        let xv = self.value(x);
        if xv.cols() != 1 {
            return Err(Error::invalid("segment_softmax", format!("expected n×1, got {:?}", xv.shape())));
        }
        let mut out = vec![0.0; xv.rows()];
        let mut buf = Vec::new();
        for rows in segs.iter() {
            buf.clear();
            buf.extend(rows.iter().map(|&r| xv.data()[r]));
            ops::softmax_in_place(&mut buf);
            for (&r, &p) in rows.iter().zip(&buf) {
                out[r] = p;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(value, "segment_softmax", &[x.0], || Op::SegmentSoftmax { x: x.0, segs })
    }

    /// `out[s] = Σ_{r∈segment s} w[r]·x[r]` with `w` an `n×1` column.
    pub fn segment_weighted_sum(&mut self, x: Var, w: Var, segs: RowGroups) -> Result<Var> {
        self.check_segments("segment_weighted_sum", x, &segs)?;
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.cols() != 1 || wv.rows() != xv.rows() {
            return Err(Error::shape("segment_weighted_sum", xv.shape(), wv.shape()));
        }
        let d = xv.cols();
        let mut out = vec![0.0; segs.len() * d];
        for (s, rows) in segs.iter().enumerate() {
            let o = &mut out[s * d..(s + 1) * d];
            for &r in rows {
                let wr = wv.data()[r];
                o.iter_mut().zip(xv.row(r)).for_each(|(a, b)| *a += wr * b);
            }
        }
        let value = Tensor::new([segs.len(), d], out)?;
        self.push(value, "segment_weighted_sum", &[x.0, w.0], || Op::SegmentWeightedSum {
            x: x.0,
            w: w.0,
            segs,
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, "sum", &[x.0], || Op::Sum { x: x.0 })
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, k) = two_d(lv);
        if labels.len() != b {
            return Err(Error::invalid("cross_entropy", format!("{} labels for {b} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            ops::softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / b as f64);
        let labels = labels.to_vec();
        self.push(value, "cross_entropy", &[logits.0], || Op::CrossEntropy {
            logits: logits.0,
            labels,
            probs,
        })
    }

    /// Replays the record in reverse from `out`, seeded with `seed`.
    ///
    /// Every recorded input receives a gradient (zeros if `out` does not
    /// depend on it).
    pub fn backward(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::invalid("backward", "tape was not recording"));
        }
        if seed.shape() != self.value(out).shape() {
            return Err(Error::shape("backward", self.value(out).shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[out.0] = Some(seed.into_data());
        for rec in self.records.iter().rev() {
            if rec.out > out.0 {
                continue;
            }
            let Some(dy) = grads[rec.out].take() else { continue };
            self.vjp(rec, &dy, &mut grads)?;
            grads[rec.out] = Some(dy);
        }
        let mut result: Vec<Option<Tensor>> = vec![None; self.values.len()];
        for &i in &self.inputs {
            let shape = self.values[i].shape().to_vec();
            let data = grads[i].take().unwrap_or_else(|| vec![0.0; self.values[i].len()]);
            result[i] = Some(Tensor::new(shape, data)?);
        }
        Ok(Gradients { grads: result })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
        if !self.needs_grad[id] {
            return;
        }
        match &mut grads[id] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: usize) -> Option<&'a mut Vec<f64>> {
        if !self.needs_grad[id] {
            return None;
        }
        let n = self.values[id].len();
        Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
    }

    fn vjp(&self, rec: &Record, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let y = &self.values[rec.out];
        match &rec.op {
            Op::MatMul { a, b } => {
                let (av, bv) = (&self.values[*a], &self.values[*b]);
                let (m, k) = two_d(av);
                let n = bv.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_into(MatRef::new(dy, m, n), MatRef::new(bv.data(), k, n).t(), ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm_into(MatRef::new(av.data(), m, k).t(), MatRef::new(dy, m, n), gb, true);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&self.values[*x], &self.values[*w]);
                let (rows, d_in) = two_d(xv);
                let d_out = wv.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    gemm_into(MatRef::new(dy, rows, d_out), MatRef::new(wv.data(), d_in, d_out).t(), gx, true);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    gemm_into(MatRef::new(xv.data(), rows, d_in).t(), MatRef::new(dy, rows, d_out), gw, true);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for row in dy.chunks(d_out) {
                            gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.iter().map(|d| -d).collect());
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, dy.iter().map(|d| d * c).collect());
            }
            Op::ScaleRows { x, factors } => {
                let c = y.cols();
                let g = dy
                    .chunks(c)
                    .zip(factors.iter())
                    .flat_map(|(row, f)| row.iter().map(move |d| d * f))
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::ScaleBy { x, s, complement } => {
                let sv = self.values[*s].item();
                let f = if *complement { 1.0 - sv } else { sv };
                self.accumulate(grads, *x, dy.iter().map(|d| d * f).collect());
                let dot: f64 = dy.iter().zip(self.values[*x].data()).map(|(d, v)| d * v).sum();
                let ds = if *complement { -dot } else { dot };
                self.accumulate(grads, *s, vec![ds]);
            }
            Op::Gelu { x } => {
                let skew = if self.fault == Some(Fault::GeluBackward) { 1.05 } else { 1.0 };
                let g = dy
                    .iter()
                    .zip(self.values[*x].data())
                    .map(|(d, &v)| d * ops::gelu_derivative(v) * skew)
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::Tanh { x } => {
                let g = dy.iter().zip(y.data()).map(|(d, t)| d * (1.0 - t * t)).collect();
                self.accumulate(grads, *x, g);
            }
            Op::SoftmaxRows { x } => {
                let c = y.cols();
                let mut g = vec![0.0; dy.len()];
                for ((gr, dr), yr) in g.chunks_mut(c).zip(dy.chunks(c)).zip(y.data().chunks(c)) {
                    let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, d), p) in gr.iter_mut().zip(dr).zip(yr) {
                        *o = p * (d - dot);
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = y.cols();
                let gv = &self.values[*gamma];
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (dr, xr) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, a), b) in gg.iter_mut().zip(dr).zip(xr) {
                            *o += a * b;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for dr in dy.chunks(d) {
                        gb.iter_mut().zip(dr).for_each(|(o, a)| *o += a);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, (dr, xr)) in dy.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for ((o, a), g) in dxhat.iter_mut().zip(dr).zip(gv.data()) {
                            *o = a * g;
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let is = inv_std[r];
                        for ((o, a), xh) in gx[r * d..(r + 1) * d].iter_mut().zip(&dxhat).zip(xr) {
                            *o += is * (a - mean_d - xh * mean_dx);
                        }
                    }
                }
            }
            Op::GatherRows { src, idx } => {
                let c = y.cols();
                if let Some(gs) = self.slot(grads, *src) {
                    for (i, &r) in idx.iter().enumerate() {
                        for (o, d) in gs[r * c..(r + 1) * c].iter_mut().zip(&dy[i * c..(i + 1) * c]) {
                            *o += d;
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.values[p].len();
                    self.accumulate(grads, p, dy[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Reshape { x } => self.accumulate(grads, *x, dy.to_vec()),
            Op::Attention { q, k, v, groups, heads, scale, probs } => {
                self.attention_vjp(dy, grads, (*q, *k, *v), groups, *heads, *scale, probs);
            }
            Op::SegmentMean { x, segs } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let d = y.cols();
                    for (s, rows) in segs.iter().enumerate() {
                        let inv = 1.0 / rows.len() as f64;
                        for &r in rows {
                            for (o, a) in gx[r * d..(r + 1) * d].iter_mut().zip(&dy[s * d..(s + 1) * d]) {
                                *o += a * inv;
                            }
                        }
                    }
                }
            }
            Op::SegmentMax { x, argmax, .. } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let d = y.cols();
                    for (i, &r) in argmax.iter().enumerate() {
                        gx[r * d + i % d] += dy[i];
                    }
                }
            }
            Op::SegmentSoftmax { x, segs } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for rows in segs.iter() {
                        let dot: f64 = rows.iter().map(|&r| dy[r] * y.data()[r]).sum();
                        for &r in rows {
                            gx[r] += y.data()[r] * (dy[r] - dot);
                        }
                    }
                }
            }
            Op::SegmentWeightedSum { x, w, segs } => {
                let (xv, wv) = (&self.values[*x], &self.values[*w]);
                let d = xv.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (s, rows) in segs.iter().enumerate() {
                        for &r in rows {
                            let wr = wv.data()[r];
                            for (o, a) in gx[r * d..(r + 1) * d].iter_mut().zip(&dy[s * d..(s + 1) * d]) {
                                *o += wr * a;
                            }
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    for (s, rows) in segs.iter().enumerate() {
                        for &r in rows {
                            gw[r] += xv.row(r).iter().zip(&dy[s * d..(s + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
            Op::Sum { x } => {
                let n = self.values[*x].len();
                self.accumulate(grads, *x, vec![dy[0]; n]);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.values[*logits].cols();
                let scale = dy[0] / labels.len() as f64;
                let mut g = probs.clone();
                for (row, &label) in g.chunks_mut(k).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, g);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_vjp(
        &self,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (usize, usize, usize),
        groups: &RowGroups,
        heads: usize,
        scale: f64,
        probs: &[f64],
    ) {
        let (qv, kv, vv) = (&self.values[q], &self.values[k], &self.values[v]);
        let d = qv.cols();
        let n = qv.len();
        let dh = d / heads;
        let mut dq = vec![0.0; n];
        let mut dk = vec![0.0; n];
        let mut dv = vec![0.0; n];
        let mut buf = AttnBuffers::default();
        let mut offset = 0;
        let inv = 1.0 / scale;
        for g in groups.iter() {
            let s = g.len();
            for h in 0..heads {
                let c0 = h * dh;
                let p = &probs[offset..offset + s * s];
                offset += s * s;
                gather_block(qv.data(), d, g, c0, dh, &mut buf.q);
                gather_block(kv.data(), d, g, c0, dh, &mut buf.k);
                gather_block(vv.data(), d, g, c0, dh, &mut buf.v);
                gather_block(dy, d, g, c0, dh, &mut buf.o);
                // dV = Pᵀ dO
                buf.dv.resize(s * dh, 0.0);
                gemm_into(MatRef::new(p, s, s).t(), MatRef::new(&buf.o, s, dh), &mut buf.dv, false);
                // dP = dO Vᵀ, then softmax backward into dS
                buf.p.resize(s * s, 0.0);
                gemm_into(MatRef::new(&buf.o, s, dh), MatRef::new(&buf.v, s, dh).t(), &mut buf.p, false);
                for (dpr, pr) in buf.p.chunks_mut(s).zip(p.chunks(s)) {
                    let dot: f64 = dpr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (o, pv) in dpr.iter_mut().zip(pr) {
                        *o = pv * (*o - dot) * inv;
                    }
                }
                buf.dq.resize(s * dh, 0.0);
                gemm_into(MatRef::new(&buf.p, s, s), MatRef::new(&buf.k, s, dh), &mut buf.dq, false);
                buf.dk.resize(s * dh, 0.0);
                gemm_into(MatRef::new(&buf.p, s, s).t(), MatRef::new(&buf.q, s, dh), &mut buf.dk, false);
                scatter_block(&mut dq, d, g, c0, dh, &buf.dq, true);
                scatter_block(&mut dk, d, g, c0, dh, &buf.dk, true);
                scatter_block(&mut dv, d, g, c0, dh, &buf.dv, true);
            }
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}

#[derive(Default)]
struct AttnBuffers {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    p: Vec<f64>,
    o: Vec<f64>,
    dq: Vec<f64>,
    dk: Vec<f64>,
    dv: Vec<f64>,
}

/// Copies columns `c0..c0+w` of the listed rows into a dense `rows×w` buffer.
fn gather_block(src: &[f64], d: usize, rows: &[usize], c0: usize, w: usize, dst: &mut Vec<f64>) {
    dst.clear();
    for &r in rows {
        dst.extend_from_slice(&src[r * d + c0..r * d + c0 + w]);
    }
}

fn scatter_block(dst: &mut [f64], d: usize, rows: &[usize], c0: usize, w: usize, src: &[f64], add: bool) {
    for (i, &r) in rows.iter().enumerate() {
        let out = &mut dst[r * d + c0..r * d + c0 + w];
        let inp = &src[i * w..(i + 1) * w];
        if add {
            out.iter_mut().zip(inp).for_each(|(o, v)| *o += v);
        } else {
            out.copy_from_slice(inp);
        }
    }
}
