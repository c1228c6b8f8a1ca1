use rayon::prelude::*;

use crate::error::{Error, Result};

use super::params::{ParamId, ParameterStore};

/// Handle to a buffer produced by one recorded operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufId(usize);

/// Activation applied by a [`Op::Linear`] layer after the affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    Softplus,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative expressed through the activation *output*, which is all
    /// the backward pass keeps around.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            // softplus'(z) = sigmoid(z) and y = softplus(z), so
            // sigmoid(z) = 1 - exp(-y).
            Activation::Softplus => 1.0 - (-y).exp(),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(z: f64) -> f64 {
    // log(1 + exp(z)) without overflow for large |z|.
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

/// Precomputed trilinear interpolation stencil: for each query row, the
/// eight voxel indices (flat, channel-major stride) and their weights.
#[derive(Debug, Clone)]
pub struct TrilinearLookup {
    pub corners: Vec<[u32; 8]>,
    pub weights: Vec<[f64; 8]>,
}

/// Per-axis linear interpolation stencil for CP-factorized sampling:
/// for each query row and each axis, the two bracketing indices and the
/// fractional position between them.
#[derive(Debug, Clone)]
pub struct CpLookup {
    pub axes: Vec<[(u32, u32, f64); 3]>,
}

/// One recorded operation. Each op produces exactly one output buffer.
#[derive(Debug, Clone)]
enum Op {
    /// Constant leaf holding caller-supplied data.
    Input,
    /// `out = act(input * weight + bias)`, `weight: [in, out]` row-major.
    Linear { input: BufId, weight: ParamId, bias: ParamId, act: Activation },
    /// Column-wise concatenation of two buffers with equal row counts.
    Concat { left: BufId, right: BufId },
    /// Columns `[start, start + len)` of the input.
    SliceCols { input: BufId, start: usize, len: usize },
    Add { a: BufId, b: BufId },
    Sub { a: BufId, b: BufId },
    Mul { a: BufId, b: BufId },
    Scale { input: BufId, factor: f64 },
    /// Sum of all entries, `[1 x 1]`.
    Sum { input: BufId },
    /// Mean of all entries, `[1 x 1]`.
    Mean { input: BufId },
    /// Frequency encoding of `[N x 3]` directions:
    /// `(d, sin(2^k pi d), cos(2^k pi d))` for `k = 0..freqs`.
    EncodeDirs { input: BufId, freqs: usize },
    /// Trilinear gather from a dense voxel grid parameter `[voxels, channels]`.
    GatherDense { field: ParamId, channels: usize, lookup: TrilinearLookup },
    /// CP-factorized gather: per channel, sum over ranks of the product of
    /// three per-axis linearly interpolated factor vectors.
    GatherCp { factors: [ParamId; 3], rank: usize, channels: usize, lookup: CpLookup },
    /// Alpha-compositing weights `w_i = T_i * (1 - exp(-sigma_i * delta_i))`
    /// per ray. `sigma` is `[rays * samples, 1]`, ray-major.
    TransmittanceWeights { sigma: BufId, rays: usize, samples: usize, deltas: Vec<f64> },
    /// Per-ray blend `sum_i w_i c_i + (1 - sum_i w_i) * background`.
    WeightedBlend { weights: BufId, colors: BufId, rays: usize, samples: usize, background: Vec<f64> },
    /// `(1/rows) * sum_rows sum_cols (pred - target)^2` against constant data.
    MseRows { pred: BufId, target: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Buffer {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

struct Node {
    op: Op,
    out: Buffer,
}

/// Wengert tape: operations recorded in execution order, executed eagerly,
/// replayed in reverse by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

// Row-parallel dispatch only pays off for large batches.
const PAR_MIN_ROWS: usize = 2048;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_ops(&self) -> usize {
        self.nodes.len()
    }

    pub fn rows(&self, id: BufId) -> usize {
        self.nodes[id.0].out.rows
    }

    pub fn cols(&self, id: BufId) -> usize {
        self.nodes[id.0].out.cols
    }

    /// The recorded forward value of a buffer.
    pub fn value(&self, id: BufId) -> &[f64] {
        &self.nodes[id.0].out.data
    }

    /// Scalar convenience accessor for `[1 x 1]` buffers.
    pub fn scalar(&self, id: BufId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].out.data.len(), 1);
        self.nodes[id.0].out.data[0]
    }

    /// Gradient of the last backward pass with respect to a *leaf* input
    /// buffer. Interior buffers release their gradients as the reverse
    /// sweep consumes them.
    pub fn input_grad(&self, id: BufId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op: Op, out: Buffer) -> BufId {
        let id = BufId(self.nodes.len());
        self.nodes.push(Node { op, out });
        self.grads.push(None);
        id
    }

    fn buffer(&self, id: BufId) -> &Buffer {
        &self.nodes[id.0].out
    }

    // ── Recording API ────────────────────────────────────────────────

    /// Record a constant leaf buffer.
    pub fn input(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> Result<BufId> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "input buffer: {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(self.push(Op::Input, Buffer { rows, cols, data }))
    }

    pub fn linear(
        &mut self,
        store: &ParameterStore,
        input: BufId,
        weight: ParamId,
        bias: ParamId,
        act: Activation,
    ) -> Result<BufId> {
        let op = Op::Linear { input, weight, bias, act };
        let out = self.execute(&op, store)?;
        Ok(self.push(op, out))
    }

    pub fn concat(&mut self, store: &ParameterStore, left: BufId, right: BufId) -> Result<BufId> {
        let op = Op::Concat { left, right };
        let out = self.execute(&op, store)?;
        Ok(self.push(op, out))
    }

    pub fn slice_cols(
        &mut self,
        store: &ParameterStore,
        input: BufId,
        start: usize,
        len: usize,
    ) -> Result<BufId> {
        let op = Op::SliceCols { input, start, len };
        let out = self.execute(&op, store)?;
        Ok(self.push(op, out))
    }

    pub fn add(&mut self, store: &ParameterStore, a: BufId, b: BufId) -> Result<BufId> {
        let op = Op::Add { a, b };
        let out = self.execute(&op, store)?;
        Ok(self.push(op, out))
    }

    pub fn sub(&mut self, store: &ParameterStore, a: BufId, b: BufId) -> Result<BufId> {
        let op = Op::Sub { a, b };
        let out = self.execute(&op, store)?;
        Ok(self.push(op, out))
    }

    pub fn mul(&mut self, store: &ParameterStore, a: BufId, b: BufId) -> Result<BufId> {
        let op = Op::Mul { a, b };
        let out = self.execute(&op, store)?;
        Ok(self.push(op, out))
    }

    pub fn scale(&mut self, store: &ParameterStore, input: BufId, factor: f64) -> Result<BufId> {
        let op = Op::Scale { input, factor };
        let out = self.execute(&op, store)?;
        Ok(self.push(op, out))
    }

    pub fn sum(&mut self, store: &ParameterStore, input: BufId) -> Result<BufId> {
        let op = Op::Sum { input };
        let out = self.execute(&op, store)?;
        Ok(self.push(op, out))
    }

    pub fn mean(&mut self, store: &ParameterStore, input: BufId) -> Result<BufId> {
        let op = Op::Mean { input };
        let out = self.execute(&op, store)?;
        Ok(self.push(op, out))
    }

    pub fn encode_dirs(
        &mut self,
        store: &ParameterStore,
        input: BufId,
        freqs: usize,
    ) -> Result<BufId> {
        let op = Op::EncodeDirs { input, freqs };
        let out = self.execute(&op, store)?;
        Ok(self.push(op, out))
    }

    pub fn gather_dense(
        &mut self,
        store: &ParameterStore,
        field: ParamId,
        channels: usize,
        lookup: TrilinearLookup,
    ) -> Result<BufId> {
        let op = Op::GatherDense { field, channels, lookup };
        let out = self.execute(&op, store)?;
        Ok(self.push(op, out))
    }

    pub fn gather_cp(
        &mut self,
        store: &ParameterStore,
        factors: [ParamId; 3],
        rank: usize,
        channels: usize,
        lookup: CpLookup,
    ) -> Result<BufId> {
        let op = Op::GatherCp { factors, rank, channels, lookup };
        let out = self.execute(&op, store)?;
        Ok(self.push(op, out))
    }

    pub fn transmittance_weights(
        &mut self,
        store: &ParameterStore,
        sigma: BufId,
        rays: usize,
        samples: usize,
        deltas: Vec<f64>,
    ) -> Result<BufId> {
        let op = Op::TransmittanceWeights { sigma, rays, samples, deltas };
        let out = self.execute(&op, store)?;
        Ok(self.push(op, out))
    }

    pub fn weighted_blend(
        &mut self,
        store: &ParameterStore,
        weights: BufId,
        colors: BufId,
        rays: usize,
        samples: usize,
        background: Vec<f64>,
    ) -> Result<BufId> {
        let op = Op::WeightedBlend { weights, colors, rays, samples, background };
        let out = self.execute(&op, store)?;
        Ok(self.push(op, out))
    }

    pub fn mse_rows(
        &mut self,
        store: &ParameterStore,
        pred: BufId,
        target: Vec<f64>,
    ) -> Result<BufId> {
        let op = Op::MseRows { pred, target };
        let out = self.execute(&op, store)?;
        Ok(self.push(op, out))
    }

    // ── Forward execution ────────────────────────────────────────────

    /// Recompute every non-input buffer in recording order. Recorded ops are
    /// pure functions of their inputs and the store, so replaying with the
    /// same store reproduces every value bitwise.
    pub fn replay_forward(&mut self, store: &ParameterStore) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let out = self.execute(&op, store)?;
            self.nodes[i].out = out;
        }
        Ok(())
    }

    fn execute(&self, op: &Op, store: &ParameterStore) -> Result<Buffer> {
        match op {
            Op::Input => unreachable!("input buffers are materialized at record time"),
            Op::Linear { input, weight, bias, act } => {
                let x = self.buffer(*input);
                let w = store.value(*weight);
                let b = store.value(*bias);
                let (k, m) = match store.shape(*weight) {
                    [k, m] => (*k, *m),
                    s => {
                        return Err(Error::Contract(format!(
                            "linear weight must be 2-d, got shape {s:?}"
                        )))
                    }
                };
                if x.cols != k {
                    return Err(Error::Contract(format!(
                        "linear: input has {} columns, weight expects {k}",
                        x.cols
                    )));
                }
                if b.len() != m {
                    return Err(Error::Contract(format!(
                        "linear: bias has {} entries, weight produces {m}",
                        b.len()
                    )));
                }
                let mut data = vec![0.0; x.rows * m];
                let act = *act;
                let row_op = |n: usize, out_row: &mut [f64]| {
                    out_row.copy_from_slice(b);
                    let x_row = &x.data[n * k..(n + 1) * k];
                    for (kk, &a) in x_row.iter().enumerate() {
                        let w_row = &w[kk * m..(kk + 1) * m];
                        for (o, &wv) in out_row.iter_mut().zip(w_row) {
                            *o += a * wv;
                        }
                    }
                    for o in out_row.iter_mut() {
                        *o = act.apply(*o);
                    }
                };
                if x.rows >= PAR_MIN_ROWS {
                    data.par_chunks_mut(m).enumerate().for_each(|(n, row)| row_op(n, row));
                } else {
                    for (n, row) in data.chunks_mut(m).enumerate() {
                        row_op(n, row);
                    }
                }
                Ok(Buffer { rows: x.rows, cols: m, data })
            }
            Op::Concat { left, right } => {
                let l = self.buffer(*left);
                let r = self.buffer(*right);
                if l.rows != r.rows {
                    return Err(Error::Contract(format!(
                        "concat: row mismatch {} vs {}",
                        l.rows, r.rows
                    )));
                }
                let cols = l.cols + r.cols;
                let mut data = Vec::with_capacity(l.rows * cols);
                for n in 0..l.rows {
                    data.extend_from_slice(&l.data[n * l.cols..(n + 1) * l.cols]);
                    data.extend_from_slice(&r.data[n * r.cols..(n + 1) * r.cols]);
                }
                Ok(Buffer { rows: l.rows, cols, data })
            }
            Op::SliceCols { input, start, len } => {
                let x = self.buffer(*input);
                if start + len > x.cols {
                    return Err(Error::Contract(format!(
                        "slice_cols: [{start}, {}) out of {} columns",
                        start + len,
                        x.cols
                    )));
                }
                let mut data = Vec::with_capacity(x.rows * len);
                for n in 0..x.rows {
                    data.extend_from_slice(&x.data[n * x.cols + start..n * x.cols + start + len]);
                }
                Ok(Buffer { rows: x.rows, cols: *len, data })
            }
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                let x = self.buffer(*a);
                let y = self.buffer(*b);
                if x.rows != y.rows || x.cols != y.cols {
                    return Err(Error::Contract(format!(
                        "elementwise op: shape {}x{} vs {}x{}",
                        x.rows, x.cols, y.rows, y.cols
                    )));
                }
                let data = match op {
                    Op::Add { .. } => {
                        x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect()
                    }
                    Op::Sub { .. } => {
                        x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect()
                    }
                    _ => x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect(),
                };
                Ok(Buffer { rows: x.rows, cols: x.cols, data })
            }
            Op::Scale { input, factor } => {
                let x = self.buffer(*input);
                let data = x.data.iter().map(|v| v * factor).collect();
                Ok(Buffer { rows: x.rows, cols: x.cols, data })
            }
            Op::Sum { input } => {
                let x = self.buffer(*input);
                Ok(Buffer { rows: 1, cols: 1, data: vec![x.data.iter().sum()] })
            }
            Op::Mean { input } => {
                let x = self.buffer(*input);
                if x.data.is_empty() {
                    return Err(Error::Contract("mean of an empty buffer".into()));
                }
                let s: f64 = x.data.iter().sum();
                Ok(Buffer { rows: 1, cols: 1, data: vec![s / x.data.len() as f64] })
            }
            Op::EncodeDirs { input, freqs } => {
                let x = self.buffer(*input);
                if x.cols != 3 {
                    return Err(Error::Contract(format!(
                        "encode_dirs expects 3 columns, got {}",
                        x.cols
                    )));
                }
                let out_cols = 3 + 6 * freqs;
                let mut data = vec![0.0; x.rows * out_cols];
                for n in 0..x.rows {
                    let d = &x.data[n * 3..n * 3 + 3];
                    let row = &mut data[n * out_cols..(n + 1) * out_cols];
                    row[..3].copy_from_slice(d);
                    for k in 0..*freqs {
                        let f = (1u64 << k) as f64 * std::f64::consts::PI;
                        for c in 0..3 {
                            row[3 + 6 * k + c] = (f * d[c]).sin();
                            row[3 + 6 * k + 3 + c] = (f * d[c]).cos();
                        }
                    }
                }
                Ok(Buffer { rows: x.rows, cols: out_cols, data })
            }
            Op::GatherDense { field, channels, lookup } => {
                let grid = store.value(*field);
                let rows = lookup.corners.len();
                let c = *channels;
                let mut data = vec![0.0; rows * c];
                let row_op = |n: usize, out_row: &mut [f64]| {
                    let corners = &lookup.corners[n];
                    let weights = &lookup.weights[n];
                    for k in 0..8 {
                        let w = weights[k];
                        if w == 0.0 {
                            continue;
                        }
                        let base = corners[k] as usize * c;
                        let voxel = &grid[base..base + c];
                        for (o, &v) in out_row.iter_mut().zip(voxel) {
                            *o += w * v;
                        }
                    }
                };
                if rows >= PAR_MIN_ROWS {
                    data.par_chunks_mut(c).enumerate().for_each(|(n, row)| row_op(n, row));
                } else {
                    for (n, row) in data.chunks_mut(c).enumerate() {
                        row_op(n, row);
                    }
                }
                Ok(Buffer { rows, cols: c, data })
            }
            Op::GatherCp { factors, rank, channels, lookup } => {
                let fx = store.value(factors[0]);
                let fy = store.value(factors[1]);
                let fz = store.value(factors[2]);
                let rows = lookup.axes.len();
                let (r, c) = (*rank, *channels);
                let rc = r * c;
                let mut data = vec![0.0; rows * c];
                let row_op = |n: usize, out_row: &mut [f64]| {
                    let [ax, ay, az] = lookup.axes[n];
                    for rr in 0..r {
                        for cc in 0..c
                        {
                            let vx = lerp_factor(fx, rc, ax, rr * c + cc);
                            let vy = lerp_factor(fy, rc, ay, rr * c + cc);
                            let vz = lerp_factor(fz, rc, az, rr * c + cc);
                            out_row[cc] += vx * vy * vz;
                        }
                    }
                };
                if rows >= PAR_MIN_ROWS {
                    data.par_chunks_mut(c).enumerate().for_each(|(n, row)| row_op(n, row));
                } else {
                    for (n, row) in data.chunks_mut(c).enumerate() {
                        row_op(n, row);
                    }
                }
                Ok(Buffer { rows, cols: c, data })
            }
            Op::TransmittanceWeights { sigma, rays, samples, deltas } => {
                let s = self.buffer(*sigma);
                let (nr, ns) = (*rays, *samples);
                if s.rows != nr * ns || s.cols != 1 {
                    return Err(Error::Contract(format!(
                        "transmittance_weights: sigma is {}x{}, expected {}x1",
                        s.rows,
                        s.cols,
                        nr * ns
                    )));
                }
                if deltas.len() != nr * ns {
                    return Err(Error::Contract("transmittance_weights: delta count mismatch".into()));
                }
                if let Some(i) = s.data.iter().position(|v| *v < 0.0) {
                    return Err(Error::Contract(format!(
                        "transmittance_weights: negative density at sample {i}"
                    )));
                }
                let mut data = vec![0.0; nr * ns];
                for ray in 0..nr {
                    let o = ray * ns;
                    let mut transmittance = 1.0;
                    for i in 0..ns {
                        let alpha = 1.0 - (-s.data[o + i] * deltas[o + i]).exp();
                        data[o + i] = transmittance * alpha;
                        transmittance *= 1.0 - alpha;
                    }
                }
                Ok(Buffer { rows: nr * ns, cols: 1, data })
            }
            Op::WeightedBlend { weights, colors, rays, samples, background } => {
                let w = self.buffer(*weights);
                let c = self.buffer(*colors);
                let (nr, ns) = (*rays, *samples);
                let ch = c.cols;
                if w.rows != nr * ns || w.cols != 1 || c.rows != nr * ns {
                    return Err(Error::Contract(format!(
                        "weighted_blend: weights {}x{}, colors {}x{}, expected {} rows",
                        w.rows,
                        w.cols,
                        c.rows,
                        c.cols,
                        nr * ns
                    )));
                }
                if background.len() != ch {
                    return Err(Error::Contract("weighted_blend: background channel mismatch".into()));
                }
                let mut data = vec![0.0; nr * ch];
                for ray in 0..nr {
                    let out_row = &mut data[ray * ch..(ray + 1) * ch];
                    let mut acc = 0.0;
                    for i in 0..ns {
                        let idx = ray * ns + i;
                        let wi = w.data[idx];
                        acc += wi;
                        let col = &c.data[idx * ch..(idx + 1) * ch];
                        for (o, &cv) in out_row.iter_mut().zip(col) {
                            *o += wi * cv;
                        }
                    }
                    let residual = 1.0 - acc;
                    for (o, &bg) in out_row.iter_mut().zip(background.iter()) {
                        *o += residual * bg;
                    }
                }
                Ok(Buffer { rows: nr, cols: ch, data })
            }
            Op::MseRows { pred, target } => {
                let p = self.buffer(*pred);
                if p.rows == 0 {
                    return Err(Error::Contract("mse_rows: empty batch".into()));
                }
                if target.len() != p.data.len() {
                    return Err(Error::Contract(format!(
                        "mse_rows: target has {} values, prediction {}",
                        target.len(),
                        p.data.len()
                    )));
                }
                let mut s = 0.0;
                for (a, b) in p.data.iter().zip(target.iter()) {
                    let d = a - b;
                    s += d * d;
                }
                Ok(Buffer { rows: 1, cols: 1, data: vec![s / p.rows as f64] })
            }
        }
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep: seeds `output` with `output_grad`, visits ops in exact
    /// reverse execution order, and accumulates parameter gradients into the
    /// store. Gradients accumulate across calls until
    /// [`ParameterStore::zero_grads`].
    pub fn backward(
        &mut self,
        store: &mut ParameterStore,
        output: BufId,
        output_grad: &[f64],
    ) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward called on an empty tape".into()));
        }
        let out_buf = self.buffer(output);
        if output_grad.len() != out_buf.data.len() {
            return Err(Error::Contract(format!(
                "backward: output_grad has {} values, output buffer {}",
                output_grad.len(),
                out_buf.data.len()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[output.0] = Some(output_grad.to_vec());

        for i in (0..self.nodes.len()).rev() {
            let grad_out = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if matches!(self.nodes[i].op, Op::Input) {
                // Leaf: keep the gradient readable via `input_grad`.
                self.grads[i] = Some(grad_out);
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.backward_op(&op, i, &grad_out, store);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: BufId, grad: Vec<f64>) {
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(&grad) {
                    *e += g;
                }
            }
            slot => *slot = Some(grad),
        }
    }

    fn backward_op(&mut self, op: &Op, node: usize, grad_out: &[f64], store: &mut ParameterStore) {
        match op {
            Op::Input => unreachable!(),
            Op::Linear { input, weight, bias, act } => {
                let x = self.buffer(*input);
                let y = &self.nodes[node].out;
                let (k, m) = (x.cols, y.cols);
                let n_rows = x.rows;

                // z_bar = grad_out ⊙ act'(y)
                let mut zbar = vec![0.0; grad_out.len()];
                for (zb, (&g, &yv)) in zbar.iter_mut().zip(grad_out.iter().zip(&y.data)) {
                    *zb = g * act.derivative_from_output(yv);
                }

                // d_input = z_bar · W^T
                let w = store.value(*weight).to_vec();
                let mut dx = vec![0.0; n_rows * k];
                let x_data = &x.data;
                let row_op = |n: usize, dx_row: &mut [f64]| {
                    let z_row = &zbar[n * m..(n + 1) * m];
                    for (kk, d) in dx_row.iter_mut().enumerate() {
                        let w_row = &w[kk * m..(kk + 1) * m];
                        let mut s = 0.0;
                        for (zv, wv) in z_row.iter().zip(w_row) {
                            s += zv * wv;
                        }
                        *d = s;
                    }
                };
                if n_rows >= PAR_MIN_ROWS {
                    dx.par_chunks_mut(k).enumerate().for_each(|(n, row)| row_op(n, row));
                } else {
                    for (n, row) in dx.chunks_mut(k).enumerate() {
                        row_op(n, row);
                    }
                }

                // d_weight[k, :] = sum_n x[n, k] * z_bar[n, :]
                {
                    let (_, gw) = store.value_and_grad_mut(*weight);
                    let add_row = |kk: usize, gw_row: &mut [f64]| {
                        for n in 0..n_rows {
                            let a = x_data[n * k + kk];
                            if a == 0.0 {
                                continue;
                            }
                            let z_row = &zbar[n * m..(n + 1) * m];
                            for (g, &zv) in gw_row.iter_mut().zip(z_row) {
                                *g += a * zv;
                            }
                        }
                    };
                    if n_rows >= PAR_MIN_ROWS && k > 1 {
                        gw.par_chunks_mut(m).enumerate().for_each(|(kk, row)| add_row(kk, row));
                    } else {
                        for (kk, row) in gw.chunks_mut(m).enumerate() {
                            add_row(kk, row);
                        }
                    }
                }
                // d_bias = column sums of z_bar
                {
                    let (_, gb) = store.value_and_grad_mut(*bias);
                    for n in 0..n_rows {
                        let z_row = &zbar[n * m..(n + 1) * m];
                        for (g, &zv) in gb.iter_mut().zip(z_row) {
                            *g += zv;
                        }
                    }
                }
                self.accumulate(*input, dx);
            }
            Op::Concat { left, right } => {
                let (lc, rc) = (self.buffer(*left).cols, self.buffer(*right).cols);
                let rows = self.buffer(*left).rows;
                let cols = lc + rc;
                let mut dl = vec![0.0; rows * lc];
                let mut dr = vec![0.0; rows * rc];
                for n in 0..rows {
                    dl[n * lc..(n + 1) * lc].copy_from_slice(&grad_out[n * cols..n * cols + lc]);
                    dr[n * rc..(n + 1) * rc]
                        .copy_from_slice(&grad_out[n * cols + lc..(n + 1) * cols]);
                }
                self.accumulate(*left, dl);
                self.accumulate(*right, dr);
            }
            Op::SliceCols { input, start, len } => {
                let x = self.buffer(*input);
                let mut dx = vec![0.0; x.rows * x.cols];
                for n in 0..x.rows {
                    dx[n * x.cols + start..n * x.cols + start + len]
                        .copy_from_slice(&grad_out[n * len..(n + 1) * len]);
                }
                self.accumulate(*input, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, grad_out.to_vec());
                self.accumulate(*b, grad_out.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, grad_out.to_vec());
                self.accumulate(*b, grad_out.iter().map(|g| -g).collect());
            }
            Op::Mul { a, b } => {
                let av = self.buffer(*a).data.clone();
                let bv = &self.buffer(*b).data;
                let da: Vec<f64> = grad_out.iter().zip(bv).map(|(g, q)| g * q).collect();
                let db: Vec<f64> = grad_out.iter().zip(&av).map(|(g, p)| g * p).collect();
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::Scale { input, factor } => {
                self.accumulate(*input, grad_out.iter().map(|g| g * factor).collect());
            }
            Op::Sum { input } => {
                let x = self.buffer(*input);
                let g = grad_out[0];
                self.accumulate(*input, vec![g; x.data.len()]);
            }
            Op::Mean { input } => {
                let x = self.buffer(*input);
                let g = grad_out[0] / x.data.len() as f64;
                self.accumulate(*input, vec![g; x.data.len()]);
            }
            Op::EncodeDirs { input, freqs } => {
                let x = self.buffer(*input);
                let out_cols = 3 + 6 * freqs;
                let mut dx = vec![0.0; x.rows * 3];
                for n in 0..x.rows {
                    let d = &x.data[n * 3..n * 3 + 3];
                    let g_row = &grad_out[n * out_cols..(n + 1) * out_cols];
                    let dx_row = &mut dx[n * 3..n * 3 + 3];
                    dx_row.copy_from_slice(&g_row[..3]);
                    for k in 0..*freqs {
                        let f = (1u64 << k) as f64 * std::f64::consts::PI;
                        for c in 0..3 {
                            let arg = f * d[c];
                            dx_row[c] += g_row[3 + 6 * k + c] * f * arg.cos();
                            dx_row[c] -= g_row[3 + 6 * k + 3 + c] * f * arg.sin();
                        }
                    }
                }
                self.accumulate(*input, dx);
            }
            Op::GatherDense { field, channels, lookup } => {
                let c = *channels;
                let (_, grad) = store.value_and_grad_mut(*field);
                // Scatter-add runs sequentially in row order so accumulation
                // order is fixed regardless of thread count.
                for (n, (corners, weights)) in
                    lookup.corners.iter().zip(&lookup.weights).enumerate()
                {
                    let g_row = &grad_out[n * c..(n + 1) * c];
                    for k in 0..8 {
                        let w = weights[k];
                        if w == 0.0 {
                            continue;
                        }
                        let base = corners[k] as usize * c;
                        for (g, &gv) in grad[base..base + c].iter_mut().zip(g_row) {
                            *g += w * gv;
                        }
                    }
                }
            }
            Op::GatherCp { factors, rank, channels, lookup } => {
                let (r, c) = (*rank, *channels);
                let rc = r * c;
                let fx = store.value(factors[0]).to_vec();
                let fy = store.value(factors[1]).to_vec();
                let fz = store.value(factors[2]).to_vec();
                let mut gx = vec![0.0; fx.len()];
                let mut gy = vec![0.0; fy.len()];
                let mut gz = vec![0.0; fz.len()];
                for (n, axes) in lookup.axes.iter().enumerate() {
                    let [ax, ay, az] = *axes;
                    let g_row = &grad_out[n * c..(n + 1) * c];
                    for rr in 0..r {
                        for cc in 0..c {
                            let g = g_row[cc];
                            if g == 0.0 {
                                continue;
                            }
                            let col = rr * c + cc;
                            let vx = lerp_factor(&fx, rc, ax, col);
                            let vy = lerp_factor(&fy, rc, ay, col);
                            let vz = lerp_factor(&fz, rc, az, col);
                            scatter_lerp(&mut gx, rc, ax, col, g * vy * vz);
                            scatter_lerp(&mut gy, rc, ay, col, g * vx * vz);
                            scatter_lerp(&mut gz, rc, az, col, g * vx * vy);
                        }
                    }
                }
                for (dst, src) in [(factors[0], gx), (factors[1], gy), (factors[2], gz)] {
                    let (_, grad) = store.value_and_grad_mut(dst);
                    for (g, s) in grad.iter_mut().zip(src) {
                        *g += s;
                    }
                }
            }
            Op::TransmittanceWeights { sigma, rays, samples, deltas } => {
                let s = self.buffer(*sigma);
                let (nr, ns) = (*rays, *samples);
                let w = &self.nodes[node].out.data;
                let mut ds = vec![0.0; s.data.len()];
                // d w_j / d sigma_i = T_i * delta_i * (1 - alpha_i)   (j = i)
                //                   = -delta_i * w_j                  (j > i)
                for ray in 0..nr {
                    let o = ray * ns;
                    // suffix[i] = sum_{j > i} grad_out[j] * w[j]
                    let mut suffix = 0.0;
                    let mut suffixes = vec![0.0; ns];
                    for i in (0..ns).rev() {
                        suffixes[i] = suffix;
                        suffix += grad_out[o + i] * w[o + i];
                    }
                    let mut transmittance = 1.0;
                    for i in 0..ns {
                        let alpha = 1.0 - (-s.data[o + i] * deltas[o + i]).exp();
                        ds[o + i] = deltas[o + i]
                            * (grad_out[o + i] * transmittance * (1.0 - alpha) - suffixes[i]);
                        transmittance *= 1.0 - alpha;
                    }
                }
                self.accumulate(*sigma, ds);
            }
            Op::WeightedBlend { weights, colors, rays, samples, background } => {
                let w = self.buffer(*weights);
                let c = self.buffer(*colors);
                let (nr, ns) = (*rays, *samples);
                let ch = c.cols;
                let mut dw = vec![0.0; w.data.len()];
                let mut dc = vec![0.0; c.data.len()];
                for ray in 0..nr {
                    let g_row = &grad_out[ray * ch..(ray + 1) * ch];
                    for i in 0..ns {
                        let idx = ray * ns + i;
                        let col = &c.data[idx * ch..(idx + 1) * ch];
                        let mut s = 0.0;
                        for ((&g, &cv), &bg) in g_row.iter().zip(col).zip(background.iter()) {
                            s += g * (cv - bg);
                        }
                        dw[idx] = s;
                        let wi = w.data[idx];
                        for (d, &g) in dc[idx * ch..(idx + 1) * ch].iter_mut().zip(g_row) {
                            *d = wi * g;
                        }
                    }
                }
                self.accumulate(*weights, dw);
                self.accumulate(*colors, dc);
            }
            Op::MseRows { pred, target } => {
                let p = self.buffer(*pred);
                let g = grad_out[0] * 2.0 / p.rows as f64;
                let dp: Vec<f64> =
                    p.data.iter().zip(target.iter()).map(|(a, b)| g * (a - b)).collect();
                self.accumulate(*pred, dp);
            }
        }
    }
}

fn lerp_factor(f: &[f64], stride: usize, axis: (u32, u32, f64), col: usize) -> f64 {
    let (i0, i1, t) = axis;
    f[i0 as usize * stride + col] * (1.0 - t) + f[i1 as usize * stride + col] * t
}

fn scatter_lerp(g: &mut [f64], stride: usize, axis: (u32, u32, f64), col: usize, v: f64) {
    let (i0, i1, t) = axis;
    g[i0 as usize * stride + col] += v * (1.0 - t);
    g[i1 as usize * stride + col] += v * t;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, shape: &[usize], vals: Vec<f64>) -> (ParameterStore, ParamId) {
        let mut store = ParameterStore::new();
        let id = store.register(name, shape, vals).unwrap();
        (store, id)
    }

    #[test]
    fn square_gradient_at_three() {
        // f(x) = x^2 at x = 3, seed 1 -> df/dx = 6
        let mut store = ParameterStore::new();
        let mut tape = Tape::new();
        let x = tape.input(vec![3.0], 1, 1).unwrap();
        let y = tape.mul(&store, x, x).unwrap();
        assert_eq!(tape.scalar(y), 9.0);
        tape.backward(&mut store, y, &[1.0]).unwrap();
        assert_eq!(tape.input_grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_function_zero_gradients() {
        let (mut store, w) = store_with("w", &[1], vec![5.0]);
        let mut tape = Tape::new();
        let c = tape.input(vec![2.0], 1, 1).unwrap();
        let y = tape.scale(&store, c, 4.0).unwrap();
        tape.backward(&mut store, y, &[1.0]).unwrap();
        assert_eq!(store.grad(w), &[0.0]);
    }

    #[test]
    fn backward_without_tape_errors() {
        let mut store = ParameterStore::new();
        let mut tape = Tape::new();
        // No forward recorded at all.
        let err = tape.backward(&mut store, BufId(0), &[1.0]);
        assert!(err.is_err());
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let (mut store, w) = store_with("w", &[2, 1], vec![1.0, 2.0]);
        let b = store.register("b", &[1], vec![0.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(vec![1.0, 1.0], 1, 2).unwrap();
        let y = tape.linear(&store, x, w, b, Activation::Linear).unwrap();
        tape.backward(&mut store, y, &[1.0]).unwrap();
        tape.backward(&mut store, y, &[1.0]).unwrap();
        assert_eq!(store.grad(w), &[2.0, 2.0]);
        store.zero_grads();
        assert_eq!(store.grad(w), &[0.0, 0.0]);
    }

    #[test]
    fn backward_is_linear_in_seed() {
        let (mut store, w) = store_with("w", &[2, 2], vec![0.3, -0.7, 1.1, 0.2]);
        let b = store.register("b", &[2], vec![0.1, -0.2]).unwrap();
        let run = |store: &mut ParameterStore, seed: &[f64]| -> Vec<f64> {
            store.zero_grads();
            let mut tape = Tape::new();
            let x = tape.input(vec![0.5, -1.5], 1, 2).unwrap();
            let y = tape.linear(store, x, w, b, Activation::Sigmoid).unwrap();
            tape.backward(store, y, seed).unwrap();
            store.grad(w).to_vec()
        };
        let g1 = run(&mut store, &[1.0, 0.0]);
        let g2 = run(&mut store, &[0.0, 1.0]);
        let g12 = run(&mut store, &[1.0, 1.0]);
        for i in 0..4 {
            assert!((g12[i] - (g1[i] + g2[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn replay_reproduces_values_bitwise() {
        let (mut store, w) = store_with("w", &[3, 2], vec![0.1, 0.2, -0.5, 0.7, 0.0, 1.0]);
        let b = store.register("b", &[2], vec![0.05, -0.3]).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(vec![1.0, -2.0, 0.5, 0.3, 0.9, -0.1], 2, 3).unwrap();
        let h = tape.linear(&store, x, w, b, Activation::Softplus).unwrap();
        let s = tape.sum(&store, h).unwrap();
        let before: Vec<f64> = tape.value(h).to_vec();
        let total = tape.scalar(s);
        tape.replay_forward(&store).unwrap();
        assert_eq!(tape.value(h), before.as_slice());
        assert_eq!(tape.scalar(s), total);
        let _ = store.grad(w);
    }

    #[test]
    fn mse_rows_matches_hand_value() {
        let store = ParameterStore::new();
        let mut tape = Tape::new();
        let p = tape.input(vec![0.5, 0.0, 0.0, 0.0, 0.0, 0.0], 2, 3).unwrap();
        let l = tape.mse_rows(&store, p, vec![0.0; 6]).unwrap();
        // ((0.25) + 0) / 2
        assert!((tape.scalar(l) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn unsorted_negative_sigma_rejected() {
        let store = ParameterStore::new();
        let mut tape = Tape::new();
        let s = tape.input(vec![0.5, -0.1], 2, 1).unwrap();
        let err = tape.transmittance_weights(&store, s, 1, 2, vec![0.5, 0.5]);
        assert!(err.is_err());
    }
}
