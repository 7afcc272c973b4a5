//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! Operations append nodes to a [`Tape`]; node creation order is the
//! topological order, so the backward pass is a single reverse sweep that
//! visits each node exactly once. Gradients accumulate additively into
//! per-node buffers until [`Tape::reset_grads`] is called.
//!
//! Everything is single-threaded and allocation-order deterministic: the same
//! graph over the same values produces bitwise-identical forwards and
//! backwards.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Norm floor for row normalization (and hence cosine similarity).
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Conv1d { x: usize, w: usize, stride: usize, padding: usize },
    AddBias { x: usize, b: usize },
    Relu { x: usize },
    MaxPool1d { x: usize, argmax: Vec<usize> },
    GlobalMaxPool { x: usize, argmax: Vec<usize> },
    L2NormalizeRows { x: usize, inv_norm: Vec<F>, floored: Vec<bool> },
    Exp { x: usize },
    Log { x: usize },
    Affine { x: usize, mul: F },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    MulConst { x: usize, factors: Vec<F> },
    RowSum { x: usize },
    Diag { x: usize },
    PickRows { x: usize, cols: Vec<usize> },
    LogSumExpRows { x: usize },
    Sum { x: usize },
    Mean { x: usize },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Vec<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let numel = value.numel();
        self.nodes.push(Node { value, op });
        self.grads.push(vec![F::zero(); numel]);
        Var(self.nodes.len() - 1)
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient buffer of `v` (same layout as its value).
    pub fn grad(&self, v: Var) -> &[F] {
        &self.grads[v.0]
    }

    pub fn grad_tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.value(v).shape().to_vec(), self.grads[v.0].clone())
            .expect("grad buffer matches value shape")
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            for v in g.iter_mut() {
                *v = F::zero();
            }
        }
    }

    // ───────────────────────── forward operations ─────────────────────────

    /// `a (M×K) · b (K×N) -> M×N`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: {}x{} vs {}x{}",
                m, ka, kb, n
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for k in 0..ka {
                let aik = av[i * ka + k];
                let brow = &bv[k * n..(k + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose { x: x.0 }))
    }

    /// Cross-correlation (no kernel flip): `x (B×C_in×T)` with
    /// `w (C_out×C_in×K)`, zero padding. `T_out = (T + 2·padding − K)/stride + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::shape("conv1d stride must be positive"));
        }
        let (batch, c_in, t_in) = self.value(x).dims3()?;
        let (c_out, c_in_w, k) = self.value(w).dims3()?;
        if c_in != c_in_w {
            return Err(Error::shape(format!(
                "conv1d channel mismatch: input has {}, kernel expects {}",
                c_in, c_in_w
            )));
        }
        if t_in + 2 * padding < k {
            return Err(Error::shape(format!(
                "conv1d kernel ({}) wider than padded input ({} + 2*{})",
                k, t_in, padding
            )));
        }
        let t_out = (t_in + 2 * padding - k) / stride + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![F::zero(); batch * c_out * t_out];
        for b in 0..batch {
            for co in 0..c_out {
                let orow = &mut out[(b * c_out + co) * t_out..(b * c_out + co + 1) * t_out];
                for ci in 0..c_in {
                    let xrow = &xv[(b * c_in + ci) * t_in..(b * c_in + ci + 1) * t_in];
                    let wrow = &wv[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                    for (t, o) in orow.iter_mut().enumerate() {
                        let start = t * stride;
                        // valid kernel taps: 0 <= start + kk - padding < t_in
                        let k_lo = padding.saturating_sub(start);
                        let k_hi = k.min(t_in + padding - start);
                        let mut acc = F::zero();
                        for kk in k_lo..k_hi {
                            acc += xrow[start + kk - padding] * wrow[kk];
                        }
                        *o += acc;
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch, c_out, t_out], out)?;
        Ok(self.push(
            t,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                stride,
                padding,
            },
        ))
    }

    /// Add a per-channel bias: `x (B×C×T) + b (C)` or `x (B×D) + b (D)`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let bias_len = match self.value(b).shape() {
            [n] => *n,
            s => {
                return Err(Error::shape(format!(
                    "bias must be rank 1, got shape {:?}",
                    s
                )))
            }
        };
        let xt = self.value(x);
        let (chan, inner) = match xt.shape() {
            [_, c] => (*c, 1usize),
            [_, c, t] => (*c, *t),
            s => {
                return Err(Error::shape(format!(
                    "add_bias expects rank 2 or 3 input, got {:?}",
                    s
                )))
            }
        };
        if chan != bias_len {
            return Err(Error::shape(format!(
                "bias length {} does not match channel dimension {}",
                bias_len, chan
            )));
        }
        let shape = xt.shape().to_vec();
        let xv = xt.data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(xv.len());
        for (i, &v) in xv.iter().enumerate() {
            let c = (i / inner) % chan;
            out.push(v + bv[c]);
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::AddBias { x: x.0, b: b.0 }))
    }

    /// Elementwise max(x, 0). The subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let shape = xt.shape().to_vec();
        let out: Vec<F> = xt
            .data()
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Relu { x: x.0 }))
    }

    /// Max pooling along the last axis of `x (B×C×T)`. Ties route the
    /// gradient to the first attaining index.
    pub fn maxpool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        if window == 0 || stride == 0 {
            return Err(Error::shape("maxpool1d window/stride must be positive"));
        }
        let (batch, chan, t_in) = self.value(x).dims3()?;
        if window > t_in {
            return Err(Error::shape(format!(
                "maxpool1d window {} larger than length {}",
                window, t_in
            )));
        }
        let t_out = (t_in - window) / stride + 1;
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); batch * chan * t_out];
        let mut argmax = vec![0usize; batch * chan * t_out];
        for bc in 0..batch * chan {
            let xrow = &xv[bc * t_in..(bc + 1) * t_in];
            for t in 0..t_out {
                let start = t * stride;
                let mut best = xrow[start];
                let mut best_i = start;
                for j in start + 1..start + window {
                    if xrow[j] > best {
                        best = xrow[j];
                        best_i = j;
                    }
                }
                out[bc * t_out + t] = best;
                argmax[bc * t_out + t] = bc * t_in + best_i;
            }
        }
        let t = Tensor::new(vec![batch, chan, t_out], out)?;
        Ok(self.push(t, Op::MaxPool1d { x: x.0, argmax }))
    }

    /// Max over the whole time axis: `x (B×C×T) -> B×C`.
    pub fn global_maxpool(&mut self, x: Var) -> Result<Var> {
        let (batch, chan, t_in) = self.value(x).dims3()?;
        if t_in == 0 {
            return Err(Error::shape("global_maxpool over empty time axis"));
        }
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); batch * chan];
        let mut argmax = vec![0usize; batch * chan];
        for bc in 0..batch * chan {
            let xrow = &xv[bc * t_in..(bc + 1) * t_in];
            let mut best = xrow[0];
            let mut best_i = 0;
            for (j, &v) in xrow.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_i = j;
                }
            }
            out[bc] = best;
            argmax[bc] = bc * t_in + best_i;
        }
        let t = Tensor::new(vec![batch, chan], out)?;
        Ok(self.push(t, Op::GlobalMaxPool { x: x.0, argmax }))
    }

    /// Normalize each row of `x (R×D)` to unit length, flooring the norm at
    /// [`NORM_EPS`] so zero rows stay finite.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, dim) = self.value(x).dims2()?;
        let eps = F::of(NORM_EPS);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); rows * dim];
        let mut inv_norm = vec![F::zero(); rows];
        let mut floored = vec![false; rows];
        for i in 0..rows {
            let row = &xv[i * dim..(i + 1) * dim];
            let mut sq = F::zero();
            for &v in row {
                sq += v * v;
            }
            let norm = sq.sqrt();
            let (n, fl) = if norm < eps { (eps, true) } else { (norm, false) };
            let inv = F::one() / n;
            inv_norm[i] = inv;
            floored[i] = fl;
            for j in 0..dim {
                out[i * dim + j] = row[j] * inv;
            }
        }
        let t = Tensor::new(vec![rows, dim], out)?;
        Ok(self.push(
            t,
            Op::L2NormalizeRows {
                x: x.0,
                inv_norm,
                floored,
            },
        ))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let shape = xt.shape().to_vec();
        let out: Vec<F> = xt.data().iter().map(|v| v.exp()).collect();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Exp { x: x.0 }))
    }

    /// Natural log; the caller must guarantee positive inputs.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.data().iter().any(|v| *v <= F::zero()) {
            return Err(Error::Contract("log of a non-positive value".into()));
        }
        let shape = xt.shape().to_vec();
        let out: Vec<F> = xt.data().iter().map(|v| v.ln()).collect();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Log { x: x.0 }))
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, x: Var, mul: F, add: F) -> Result<Var> {
        let xt = self.value(x);
        let shape = xt.shape().to_vec();
        let out: Vec<F> = xt.data().iter().map(|&v| mul * v + add).collect();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Affine { x: x.0, mul }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, true)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, false)
    }

    fn zip(&mut self, a: Var, b: Var, is_add: bool) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let shape = self.value(a).shape().to_vec();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<F> = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| if is_add { x + y } else { x - y })
            .collect();
        let t = Tensor::new(shape, out)?;
        let op = if is_add {
            Op::Add { a: a.0, b: b.0 }
        } else {
            Op::Sub { a: a.0, b: b.0 }
        };
        Ok(self.push(t, op))
    }

    /// Elementwise multiplication by a constant tensor (no gradient flows to
    /// the factors). Used for masks and pair weights.
    pub fn mul_const(&mut self, x: Var, factors: &Tensor<F>) -> Result<Var> {
        let xt = self.value(x);
        if xt.shape() != factors.shape() {
            return Err(Error::shape(format!(
                "mul_const factor shape {:?} does not match input {:?}",
                factors.shape(),
                xt.shape()
            )));
        }
        let shape = xt.shape().to_vec();
        let out: Vec<F> = xt
            .data()
            .iter()
            .zip(factors.data())
            .map(|(&v, &f)| v * f)
            .collect();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::MulConst {
                x: x.0,
                factors: factors.data().to_vec(),
            },
        ))
    }

    /// Sum along the second axis: `x (M×N) -> M`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); m];
        for i in 0..m {
            let mut acc = F::zero();
            for j in 0..n {
                acc += xv[i * n + j];
            }
            out[i] = acc;
        }
        let t = Tensor::new(vec![m], out)?;
        Ok(self.push(t, Op::RowSum { x: x.0 }))
    }

    /// Main diagonal of a square matrix: `x (N×N) -> N`.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if m != n {
            return Err(Error::shape(format!("diag of non-square {}x{}", m, n)));
        }
        let xv = self.value(x).data();
        let out: Vec<F> = (0..n).map(|i| xv[i * n + i]).collect();
        let t = Tensor::new(vec![n], out)?;
        Ok(self.push(t, Op::Diag { x: x.0 }))
    }

    /// Per-row element pick: `out[i] = x[i, cols[i]]`.
    pub fn pick_rows(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if cols.len() != m {
            return Err(Error::shape(format!(
                "pick_rows needs {} column indices, got {}",
                m,
                cols.len()
            )));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::shape(format!(
                "pick_rows column {} out of range for width {}",
                bad, n
            )));
        }
        let xv = self.value(x).data();
        let out: Vec<F> = cols.iter().enumerate().map(|(i, &c)| xv[i * n + c]).collect();
        let t = Tensor::new(vec![m], out)?;
        Ok(self.push(
            t,
            Op::PickRows {
                x: x.0,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Row-wise `log(sum(exp(x)))` with max shift, for softmax losses on
    /// unbounded logits.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if n == 0 {
            return Err(Error::shape("log_sum_exp_rows over empty rows"));
        }
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); m];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mut mx = row[0];
            for &v in &row[1..] {
                if v > mx {
                    mx = v;
                }
            }
            let mut acc = F::zero();
            for &v in row {
                acc += (v - mx).exp();
            }
            out[i] = mx + acc.ln();
        }
        let t = Tensor::new(vec![m], out)?;
        Ok(self.push(t, Op::LogSumExpRows { x: x.0 }))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = F::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        Ok(self.push(Tensor::scalar(acc), Op::Sum { x: x.0 }))
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let numel = self.value(x).numel();
        if numel == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let mut acc = F::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let m = acc / F::of_usize(numel);
        Ok(self.push(Tensor::scalar(m), Op::Mean { x: x.0 }))
    }

    /// Cosine similarity matrix between the rows of `a (B×D)` and `b (B×D)`:
    /// entry (i, j) is `<a_i, b_j> / (max(|a_i|, ε) · max(|b_j|, ε))`.
    pub fn cosine_sim_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, da) = self.value(a).dims2()?;
        let (rb, db) = self.value(b).dims2()?;
        if da != db {
            return Err(Error::shape(format!(
                "cosine_sim_matrix dimension mismatch: {}x{} vs {}x{}",
                ra, da, rb, db
            )));
        }
        let na = self.l2_normalize_rows(a)?;
        let nb = self.l2_normalize_rows(b)?;
        let nbt = self.transpose(nb)?;
        self.matmul(na, nbt)
    }

    // ───────────────────────── backward pass ─────────────────────────

    /// Propagate d`loss`/d`node` to every node reachable from `loss`, adding
    /// the result into each node's persistent gradient buffer. Repeated calls
    /// without [`Tape::reset_grads`] accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut local: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![F::one()]);

        for id in (0..=loss.0).rev() {
            let g = match local[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut local);
            let dst = &mut self.grads[id];
            for (d, s) in dst.iter_mut().zip(&g) {
                *d += *s;
            }
        }
        Ok(())
    }

    fn ensure(
        local: &mut [Option<Vec<F>>],
        id: usize,
        numel: usize,
    ) -> &mut Vec<F> {
        local[id].get_or_insert_with(|| vec![F::zero(); numel])
    }

    fn propagate(&self, id: usize, g: &[F], local: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.nodes[*a].value.dims2().unwrap();
                let (_, n) = self.nodes[*b].value.dims2().unwrap();
                let av = self.nodes[*a].value.data().to_vec();
                let bv = self.nodes[*b].value.data().to_vec();
                {
                    // dA = g · Bᵀ
                    let da = Self::ensure(local, *a, m * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for kk in 0..k {
                                da[i * k + kk] += gij * bv[kk * n + j];
                            }
                        }
                    }
                }
                {
                    // dB = Aᵀ · g
                    let db = Self::ensure(local, *b, k * n);
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            for j in 0..n {
                                db[kk * n + j] += aik * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                let (r, c) = self.nodes[*x].value.dims2().unwrap();
                let dx = Self::ensure(local, *x, r * c);
                // output is c×r
                for i in 0..c {
                    for j in 0..r {
                        dx[j * c + i] += g[i * r + j];
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                stride,
                padding,
            } => {
                let (batch, c_in, t_in) = self.nodes[*x].value.dims3().unwrap();
                let (c_out, _, k) = self.nodes[*w].value.dims3().unwrap();
                let t_out = (t_in + 2 * padding - k) / stride + 1;
                let xv = self.nodes[*x].value.data().to_vec();
                let wv = self.nodes[*w].value.data().to_vec();
                {
                    let dx = Self::ensure(local, *x, batch * c_in * t_in);
                    for b in 0..batch {
                        for co in 0..c_out {
                            let grow = &g[(b * c_out + co) * t_out..(b * c_out + co + 1) * t_out];
                            for ci in 0..c_in {
                                let wrow = &wv[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                                let dxrow =
                                    &mut dx[(b * c_in + ci) * t_in..(b * c_in + ci + 1) * t_in];
                                for (t, &gv) in grow.iter().enumerate() {
                                    let start = t * stride;
                                    let k_lo = padding.saturating_sub(start);
                                    let k_hi = k.min(t_in + padding - start);
                                    for kk in k_lo..k_hi {
                                        let j = start + kk - padding;
                                        dxrow[j] += gv * wrow[kk];
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let dw = Self::ensure(local, *w, c_out * c_in * k);
                    for b in 0..batch {
                        for co in 0..c_out {
                            let grow = &g[(b * c_out + co) * t_out..(b * c_out + co + 1) * t_out];
                            for ci in 0..c_in {
                                let xrow = &xv[(b * c_in + ci) * t_in..(b * c_in + ci + 1) * t_in];
                                let dwrow =
                                    &mut dw[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                                for (t, &gv) in grow.iter().enumerate() {
                                    let start = t * stride;
                                    let k_lo = padding.saturating_sub(start);
                                    let k_hi = k.min(t_in + padding - start);
                                    for kk in k_lo..k_hi {
                                        dwrow[kk] += gv * xrow[start + kk - padding];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::AddBias { x, b } => {
                let xt = &self.nodes[*x].value;
                let (chan, inner) = match xt.shape() {
                    [_, c] => (*c, 1usize),
                    [_, c, t] => (*c, *t),
                    _ => unreachable!("validated at construction"),
                };
                {
                    let dx = Self::ensure(local, *x, xt.numel());
                    for (d, s) in dx.iter_mut().zip(g) {
                        *d += *s;
                    }
                }
                {
                    let db = Self::ensure(local, *b, chan);
                    for (i, &gv) in g.iter().enumerate() {
                        let c = (i / inner) % chan;
                        db[c] += gv;
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.nodes[*x].value.data();
                let dx = Self::ensure(local, *x, xv.len());
                for i in 0..xv.len() {
                    if xv[i] > F::zero() {
                        dx[i] += g[i];
                    }
                }
            }
            Op::MaxPool1d { x, argmax } | Op::GlobalMaxPool { x, argmax } => {
                let numel = self.nodes[*x].value.numel();
                let dx = Self::ensure(local, *x, numel);
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
            }
            Op::L2NormalizeRows {
                x,
                inv_norm,
                floored,
            } => {
                let (rows, dim) = self.nodes[*x].value.dims2().unwrap();
                let yv = node.value.data();
                let dx = Self::ensure(local, *x, rows * dim);
                for i in 0..rows {
                    let inv = inv_norm[i];
                    let grow = &g[i * dim..(i + 1) * dim];
                    let dxrow = &mut dx[i * dim..(i + 1) * dim];
                    if floored[i] {
                        for j in 0..dim {
                            dxrow[j] += grow[j] * inv;
                        }
                    } else {
                        let yrow = &yv[i * dim..(i + 1) * dim];
                        let mut dot = F::zero();
                        for j in 0..dim {
                            dot += grow[j] * yrow[j];
                        }
                        for j in 0..dim {
                            dxrow[j] += (grow[j] - yrow[j] * dot) * inv;
                        }
                    }
                }
            }
            Op::Exp { x } => {
                let yv = node.value.data();
                let dx = Self::ensure(local, *x, yv.len());
                for i in 0..yv.len() {
                    dx[i] += g[i] * yv[i];
                }
            }
            Op::Log { x } => {
                let xv = self.nodes[*x].value.data();
                let dx = Self::ensure(local, *x, xv.len());
                for i in 0..xv.len() {
                    dx[i] += g[i] / xv[i];
                }
            }
            Op::Affine { x, mul } => {
                let numel = node.value.numel();
                let dx = Self::ensure(local, *x, numel);
                for i in 0..numel {
                    dx[i] += g[i] * *mul;
                }
            }
            Op::Add { a, b } => {
                let numel = node.value.numel();
                {
                    let da = Self::ensure(local, *a, numel);
                    for i in 0..numel {
                        da[i] += g[i];
                    }
                }
                {
                    let db = Self::ensure(local, *b, numel);
                    for i in 0..numel {
                        db[i] += g[i];
                    }
                }
            }
            Op::Sub { a, b } => {
                let numel = node.value.numel();
                {
                    let da = Self::ensure(local, *a, numel);
                    for i in 0..numel {
                        da[i] += g[i];
                    }
                }
                {
                    let db = Self::ensure(local, *b, numel);
                    for i in 0..numel {
                        db[i] -= g[i];
                    }
                }
            }
            Op::MulConst { x, factors } => {
                let dx = Self::ensure(local, *x, factors.len());
                for i in 0..factors.len() {
                    dx[i] += g[i] * factors[i];
                }
            }
            Op::RowSum { x } => {
                let (m, n) = self.nodes[*x].value.dims2().unwrap();
                let dx = Self::ensure(local, *x, m * n);
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] += g[i];
                    }
                }
            }
            Op::Diag { x } => {
                let (n, _) = self.nodes[*x].value.dims2().unwrap();
                let dx = Self::ensure(local, *x, n * n);
                for i in 0..n {
                    dx[i * n + i] += g[i];
                }
            }
            Op::PickRows { x, cols } => {
                let (m, n) = self.nodes[*x].value.dims2().unwrap();
                let dx = Self::ensure(local, *x, m * n);
                for i in 0..m {
                    dx[i * n + cols[i]] += g[i];
                }
            }
            Op::LogSumExpRows { x } => {
                let (m, n) = self.nodes[*x].value.dims2().unwrap();
                let xv = self.nodes[*x].value.data();
                let lse = node.value.data();
                let dx = Self::ensure(local, *x, m * n);
                for i in 0..m {
                    for j in 0..n {
                        let p = (xv[i * n + j] - lse[i]).exp();
                        dx[i * n + j] += g[i] * p;
                    }
                }
            }
            Op::Sum { x } => {
                let numel = self.nodes[*x].value.numel();
                let dx = Self::ensure(local, *x, numel);
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean { x } => {
                let numel = self.nodes[*x].value.numel();
                let scale = g[0] / F::of_usize(numel);
                let dx = Self::ensure(local, *x, numel);
                for d in dx.iter_mut() {
                    *d += scale;
                }
            }
        }
    }
}
