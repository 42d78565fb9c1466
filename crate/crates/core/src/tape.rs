//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations append nodes to a [`Tape`]; leaves are registered explicitly
//! with [`Tape::leaf`]. [`Tape::backward`] runs one reverse sweep from a
//! scalar loss and returns gradients for every node, leaves included.
//! First-order only.
//!
//! The op set is exactly what the masked transformer forward needs. The
//! two normalization ops carry a [`MaskCols`] describing the old/new
//! column boundary of a growth event; with `d_old == d` and `mask == 1`
//! they reduce to the plain definitions, so grown and ungrown models share
//! one code path.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::real::Real;
use crate::tensor::{softmax_in_place, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Column-mask view for the normalization ops: columns `>= d_old` are the
/// structures added by the active growth event, scaled by `mask`.
#[derive(Debug, Clone, Copy)]
pub struct MaskCols {
    pub d_old: usize,
    pub mask: f64,
}

impl MaskCols {
    /// No growth event: all columns are old.
    pub fn full(d: usize) -> Self {
        MaskCols { d_old: d, mask: 1.0 }
    }

    /// Effective dimension `d_old + mask * (d - d_old)`; equals `d` exactly
    /// at mask 1 and `d_old` exactly at mask 0.
    fn d_eff(&self, d: usize) -> f64 {
        self.d_old as f64 + self.mask * (d - self.d_old) as f64
    }
}

#[derive(Debug, Clone)]
struct NormSpec<R: Real> {
    eps: R,
    d_old: usize,
    mask: R,
    d_eff: R,
}

#[derive(Debug)]
enum Op<R: Real> {
    Leaf,
    Add(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, R),
    ColScale {
        x: VarId,
        from_col: usize,
        factor: R,
    },
    MatMul(VarId, VarId),
    Transpose(VarId),
    SliceCols {
        x: VarId,
        from: usize,
        to: usize,
    },
    ConcatCols(Vec<VarId>),
    RowSoftmax(VarId),
    CausalRowSoftmax(VarId),
    Silu(VarId),
    Rope {
        x: VarId,
        head_dim: usize,
        base: f64,
        positions: Vec<usize>,
    },
    EmbedRows {
        table: VarId,
        ids: Vec<u32>,
    },
    RmsNorm {
        x: VarId,
        gain: VarId,
        spec: NormSpec<R>,
    },
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
        spec: NormSpec<R>,
    },
    SumNll {
        logits: VarId,
        targets: Vec<u32>,
        active: Vec<bool>,
    },
    SumScalars(Vec<VarId>),
    SumAll(VarId),
}

struct Node<R: Real> {
    value: Tensor<R>,
    op: Op<R>,
}

/// Recording tape. Create one per forward pass.
pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
}

/// Gradients produced by one backward sweep, indexed by [`VarId`].
pub struct Gradients<R: Real> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of the loss w.r.t. the given node; `None` when the node
    /// does not influence the loss.
    pub fn get(&self, id: VarId) -> Option<&Tensor<R>> {
        self.grads[id.0].as_ref()
    }
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor<R>) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: VarId) -> &Tensor<R> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(CoreError::Shape(format!(
                "add shape mismatch {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data: Vec<R> = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(CoreError::Shape(format!(
                "mul shape mismatch {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data: Vec<R> = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: VarId, factor: R) -> VarId {
        let vx = &self.nodes[x.0].value;
        let data: Vec<R> = vx.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::from_vec(vx.shape(), data).unwrap();
        self.push(value, Op::Scale(x, factor))
    }

    /// Scales columns `>= from_col` of a rank-2 tensor by `factor`.
    pub fn col_scale(&mut self, x: VarId, from_col: usize, factor: R) -> Result<VarId> {
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() != 2 || from_col > vx.cols() {
            return Err(CoreError::Shape(format!(
                "col_scale from {} on shape {:?}",
                from_col,
                vx.shape()
            )));
        }
        let cols = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for v in &mut row[from_col..] {
                *v = *v * factor;
            }
        }
        let value = Tensor::from_vec(vx.shape(), data)?;
        Ok(self.push(value, Op::ColScale { x, from_col, factor }))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: VarId) -> Result<VarId> {
        let value = self.nodes[x.0].value.transpose2()?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    /// Columns `[from, to)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: VarId, from: usize, to: usize) -> Result<VarId> {
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() != 2 || from > to || to > vx.cols() {
            return Err(CoreError::Shape(format!(
                "slice_cols [{from}, {to}) on shape {:?}",
                vx.shape()
            )));
        }
        let rows = vx.rows();
        let mut data = Vec::with_capacity(rows * (to - from));
        for i in 0..rows {
            data.extend_from_slice(&vx.row(i)[from..to]);
        }
        let value = Tensor::from_vec(&[rows, to - from], data)?;
        Ok(self.push(value, Op::SliceCols { x, from, to }))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(CoreError::Shape(String::from("concat_cols of nothing")));
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut total_cols = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(CoreError::Shape(String::from(
                    "concat_cols parts must be rank 2 with equal rows",
                )));
            }
            total_cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let value = Tensor::from_vec(&[rows, total_cols], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn row_softmax(&mut self, x: VarId) -> Result<VarId> {
        let value = self.nodes[x.0].value.softmax_rows()?;
        Ok(self.push(value, Op::RowSoftmax(x)))
    }

    /// Softmax of row `r` over columns `0..=r`; zero elsewhere. Input must
    /// be square (attention scores).
    pub fn causal_row_softmax(&mut self, x: VarId) -> Result<VarId> {
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() != 2 || vx.rows() != vx.cols() {
            return Err(CoreError::Shape(format!(
                "causal_row_softmax expects square scores, got {:?}",
                vx.shape()
            )));
        }
        let n = vx.rows();
        let mut data = vec![R::ZERO; n * n];
        for i in 0..n {
            let row = &mut data[i * n..i * n + i + 1];
            row.copy_from_slice(&vx.row(i)[..i + 1]);
            softmax_in_place(row);
        }
        let value = Tensor::from_vec(&[n, n], data)?;
        Ok(self.push(value, Op::CausalRowSoftmax(x)))
    }

    pub fn silu(&mut self, x: VarId) -> VarId {
        let vx = &self.nodes[x.0].value;
        let data: Vec<R> = vx.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::from_vec(vx.shape(), data).unwrap();
        self.push(value, Op::Silu(x))
    }

    /// Rotary embedding over every `head_dim`-wide group of columns, one
    /// position per row.
    pub fn rope(&mut self, x: VarId, head_dim: usize, base: f64, positions: &[usize]) -> Result<VarId> {
        let vx = &self.nodes[x.0].value;
        let value = rope_kernel(vx, head_dim, base, positions, false)?;
        Ok(self.push(
            value,
            Op::Rope {
                x,
                head_dim,
                base,
                positions: positions.to_vec(),
            },
        ))
    }

    /// Gathers `table` rows by id.
    pub fn embed_rows(&mut self, table: VarId, ids: &[u32]) -> Result<VarId> {
        let vt = &self.nodes[table.0].value;
        if vt.shape().len() != 2 {
            return Err(CoreError::Shape(String::from("embed_rows table must be rank 2")));
        }
        let (rows, cols) = (vt.rows(), vt.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id as usize >= rows {
                return Err(CoreError::Input(format!(
                    "row id {id} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(vt.row(id as usize));
        }
        let value = Tensor::from_vec(&[ids.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row-wise RMS normalization with learned gain.
    ///
    /// With a non-trivial mask: new columns of `x` are pre-scaled by
    /// `mask.mask` and the mean square uses the effective dimension, so the
    /// old columns' normalization is untouched at mask 0 and the plain
    /// definition is recovered at mask 1.
    pub fn rms_norm(&mut self, x: VarId, gain: VarId, eps: f64, mask: MaskCols) -> Result<VarId> {
        let (vx, vg) = (&self.nodes[x.0].value, &self.nodes[gain.0].value);
        let spec = norm_spec::<R>(vx, vg, eps, mask, "rms_norm")?;
        let mut data = Vec::with_capacity(vx.len());
        for i in 0..vx.rows() {
            let row = vx.row(i);
            let scaled = masked_row(row, spec.d_old, spec.mask);
            let mut sum_sq = R::ZERO;
            for &v in &scaled {
                sum_sq += v * v;
            }
            let denom = (sum_sq / spec.d_eff + spec.eps).sqrt();
            for (&s, &g) in scaled.iter().zip(vg.data()) {
                data.push(g * s / denom);
            }
        }
        let value = Tensor::from_vec(vx.shape(), data)?;
        Ok(self.push(value, Op::RmsNorm { x, gain, spec }))
    }

    /// Row-wise LayerNorm (mean-centered, learned gain and bias), with the
    /// same masked-column treatment as [`Tape::rms_norm`]; additionally the
    /// output's new columns are scaled by the mask so they contribute
    /// nothing downstream at mask 0.
    pub fn layer_norm(
        &mut self,
        x: VarId,
        gain: VarId,
        bias: VarId,
        eps: f64,
        mask: MaskCols,
    ) -> Result<VarId> {
        let (vx, vg, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        if vb.shape() != vg.shape() {
            return Err(CoreError::Shape(String::from("layer_norm gain/bias mismatch")));
        }
        let spec = norm_spec::<R>(vx, vg, eps, mask, "layer_norm")?;
        let mut data = Vec::with_capacity(vx.len());
        for i in 0..vx.rows() {
            let row = vx.row(i);
            let scaled = masked_row(row, spec.d_old, spec.mask);
            let mut sum = R::ZERO;
            for &v in &scaled {
                sum += v;
            }
            let mean = sum / spec.d_eff;
            // New-column squared deviations are weighted by the mask, so at
            // mask 0 the variance is exactly the old-column variance.
            let mut var_acc = R::ZERO;
            for (j, &v) in scaled.iter().enumerate() {
                let c = v - mean;
                let term = c * c;
                var_acc += if j >= spec.d_old { spec.mask * term } else { term };
            }
            let denom = (var_acc / spec.d_eff + spec.eps).sqrt();
            for (j, (&s, (&g, &b))) in scaled
                .iter()
                .zip(vg.data().iter().zip(vb.data()))
                .enumerate()
            {
                let y = g * (s - mean) / denom + b;
                data.push(if j >= spec.d_old { spec.mask * y } else { y });
            }
        }
        let value = Tensor::from_vec(vx.shape(), data)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, spec }))
    }

    /// Sum of per-row negative log-likelihoods `-log softmax(row)[target]`
    /// over rows where `active` is true. Scalar output.
    pub fn sum_nll(&mut self, logits: VarId, targets: &[u32], active: &[bool]) -> Result<VarId> {
        let vl = &self.nodes[logits.0].value;
        if vl.shape().len() != 2 || targets.len() != vl.rows() || active.len() != vl.rows() {
            return Err(CoreError::Shape(format!(
                "sum_nll: logits {:?}, {} targets, {} mask entries",
                vl.shape(),
                targets.len(),
                active.len()
            )));
        }
        if !active.iter().any(|&a| a) {
            return Err(CoreError::Contract(String::from(
                "sum_nll: no active positions",
            )));
        }
        let vocab = vl.cols();
        let mut total = R::ZERO;
        for i in 0..vl.rows() {
            if !active[i] {
                continue;
            }
            let t = targets[i] as usize;
            if t >= vocab {
                return Err(CoreError::Input(format!(
                    "target {t} out of vocab {vocab}"
                )));
            }
            total += row_nll(vl.row(i), t);
        }
        let value = Tensor::scalar(total);
        Ok(self.push(
            value,
            Op::SumNll {
                logits,
                targets: targets.to_vec(),
                active: active.to_vec(),
            },
        ))
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(CoreError::Shape(String::from("sum_scalars of nothing")));
        }
        let mut total = R::ZERO;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if !v.is_scalar() {
                return Err(CoreError::Shape(String::from(
                    "sum_scalars expects scalar nodes",
                )));
            }
            total += v.scalar_value();
        }
        Ok(self.push(Tensor::scalar(total), Op::SumScalars(parts.to_vec())))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let mut total = R::ZERO;
        for &v in self.nodes[x.0].value.data() {
            total += v;
        }
        self.push(Tensor::scalar(total), Op::SumAll(x))
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: VarId) -> Result<Gradients<R>> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(CoreError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(R::ONE));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                accumulate(grads, *a, elementwise(g, vb, |x, y| x * y));
                accumulate(grads, *b, elementwise(g, va, |x, y| x * y));
            }
            Op::Scale(x, s) => {
                let data: Vec<R> = g.data().iter().map(|&v| v * *s).collect();
                accumulate(grads, *x, Tensor::from_vec(g.shape(), data).unwrap());
            }
            Op::ColScale { x, from_col, factor } => {
                let cols = g.cols();
                let mut data = g.data().to_vec();
                for row in data.chunks_mut(cols) {
                    for v in &mut row[*from_col..] {
                        *v = *v * *factor;
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(g.shape(), data).unwrap());
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let bt = vb.transpose2().unwrap();
                accumulate(grads, *a, g.matmul(&bt).unwrap());
                let at = va.transpose2().unwrap();
                accumulate(grads, *b, at.matmul(g).unwrap());
            }
            Op::Transpose(x) => {
                accumulate(grads, *x, g.transpose2().unwrap());
            }
            Op::SliceCols { x, from, to } => {
                let vx = &self.nodes[x.0].value;
                let mut gx = Tensor::zeros(vx.shape());
                for i in 0..vx.rows() {
                    gx.row_mut(i)[*from..*to].copy_from_slice(g.row(i));
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut from = 0;
                for p in parts {
                    let cols = self.nodes[p.0].value.cols();
                    let rows = g.rows();
                    let mut data = Vec::with_capacity(rows * cols);
                    for i in 0..rows {
                        data.extend_from_slice(&g.row(i)[from..from + cols]);
                    }
                    accumulate(grads, *p, Tensor::from_vec(&[rows, cols], data).unwrap());
                    from += cols;
                }
            }
            Op::RowSoftmax(x) => {
                let y = &self.nodes[idx].value;
                let width = *y.shape().last().unwrap();
                let mut data = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(width).zip(g.data().chunks(width)) {
                    let mut dot = R::ZERO;
                    for (&yv, &gv) in yr.iter().zip(gr.iter()) {
                        dot += yv * gv;
                    }
                    for (&yv, &gv) in yr.iter().zip(gr.iter()) {
                        data.push(yv * (gv - dot));
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(y.shape(), data).unwrap());
            }
            Op::CausalRowSoftmax(x) => {
                let y = &self.nodes[idx].value;
                let n = y.rows();
                let mut gx = Tensor::zeros(y.shape());
                for i in 0..n {
                    let span = i + 1;
                    let yr = &y.row(i)[..span];
                    let gr = &g.row(i)[..span];
                    let mut dot = R::ZERO;
                    for (&yv, &gv) in yr.iter().zip(gr.iter()) {
                        dot += yv * gv;
                    }
                    let out = &mut gx.row_mut(i)[..span];
                    for (o, (&yv, &gv)) in out.iter_mut().zip(yr.iter().zip(gr.iter())) {
                        *o = yv * (gv - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Silu(x) => {
                let vx = &self.nodes[x.0].value;
                let data: Vec<R> = vx
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * s * (R::ONE + v * (R::ONE - s))
                    })
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(vx.shape(), data).unwrap());
            }
            Op::Rope {
                x,
                head_dim,
                base,
                positions,
            } => {
                // Rotations are orthogonal: the adjoint is the inverse rotation.
                let gx = rope_kernel(g, *head_dim, *base, positions, true).unwrap();
                accumulate(grads, *x, gx);
            }
            Op::EmbedRows { table, ids } => {
                let vt = &self.nodes[table.0].value;
                let mut gt = Tensor::zeros(vt.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let src = g.row(r);
                    let dst = gt.row_mut(id as usize);
                    for (d, &s) in dst.iter_mut().zip(src.iter()) {
                        *d += s;
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::RmsNorm { x, gain, spec } => {
                let (vx, vg) = (&self.nodes[x.0].value, &self.nodes[gain.0].value);
                let d = vx.cols();
                let mut gx = Tensor::zeros(vx.shape());
                let mut gg = Tensor::zeros(vg.shape());
                for i in 0..vx.rows() {
                    let row = vx.row(i);
                    let u = g.row(i);
                    let scaled = masked_row(row, spec.d_old, spec.mask);
                    let mut sum_sq = R::ZERO;
                    for &v in &scaled {
                        sum_sq += v * v;
                    }
                    let r2 = sum_sq / spec.d_eff + spec.eps;
                    let r = r2.sqrt();
                    let mut dot = R::ZERO;
                    for j in 0..d {
                        dot += u[j] * vg.data()[j] * scaled[j];
                    }
                    let gxr = gx.row_mut(i);
                    for j in 0..d {
                        let s_j = if j >= spec.d_old { spec.mask } else { R::ONE };
                        gxr[j] = s_j * (u[j] * vg.data()[j] - scaled[j] * dot / (r2 * spec.d_eff)) / r;
                    }
                    for j in 0..d {
                        gg.data_mut()[j] += u[j] * scaled[j] / r;
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gain, gg);
            }
            Op::LayerNorm { x, gain, bias, spec } => {
                let (vx, vg) = (&self.nodes[x.0].value, &self.nodes[gain.0].value);
                let d = vx.cols();
                let mut gx = Tensor::zeros(vx.shape());
                let mut gg = Tensor::zeros(vg.shape());
                let mut gb = Tensor::zeros(vg.shape());
                for i in 0..vx.rows() {
                    let row = vx.row(i);
                    let u = g.row(i);
                    let scaled = masked_row(row, spec.d_old, spec.mask);
                    let mut sum = R::ZERO;
                    for &v in &scaled {
                        sum += v;
                    }
                    let mean = sum / spec.d_eff;
                    let mut var_acc = R::ZERO;
                    let mut w_dev = R::ZERO;
                    for (j, &v) in scaled.iter().enumerate() {
                        let c = v - mean;
                        let w = if j >= spec.d_old { spec.mask } else { R::ONE };
                        var_acc += w * c * c;
                        w_dev += w * c;
                    }
                    let r2 = var_acc / spec.d_eff + spec.eps;
                    let r = r2.sqrt();
                    let mut a_sum = R::ZERO;
                    let mut b_sum = R::ZERO;
                    for j in 0..d {
                        let s_j = if j >= spec.d_old { spec.mask } else { R::ONE };
                        let us = u[j] * s_j;
                        a_sum += us * vg.data()[j];
                        b_sum += us * vg.data()[j] * (scaled[j] - mean);
                    }
                    let gxr = gx.row_mut(i);
                    for j in 0..d {
                        let s_j = if j >= spec.d_old { spec.mask } else { R::ONE };
                        let c_j = scaled[j] - mean;
                        let w_j = s_j;
                        gxr[j] = u[j] * s_j * s_j * vg.data()[j] / r
                            - a_sum * s_j / (spec.d_eff * r)
                            - b_sum * s_j * (w_j * c_j - w_dev / spec.d_eff) / (spec.d_eff * r2 * r);
                    }
                    for j in 0..d {
                        let s_j = if j >= spec.d_old { spec.mask } else { R::ONE };
                        gg.data_mut()[j] += u[j] * s_j * (scaled[j] - mean) / r;
                        gb.data_mut()[j] += u[j] * s_j;
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gain, gg);
                accumulate(grads, *bias, gb);
            }
            Op::SumNll {
                logits,
                targets,
                active,
            } => {
                let vl = &self.nodes[logits.0].value;
                let seed = g.scalar_value();
                let mut gl = Tensor::zeros(vl.shape());
                for i in 0..vl.rows() {
                    if !active[i] {
                        continue;
                    }
                    let mut probs = vl.row(i).to_vec();
                    softmax_in_place(&mut probs);
                    let out = gl.row_mut(i);
                    for (o, &p) in out.iter_mut().zip(probs.iter()) {
                        *o = seed * p;
                    }
                    out[targets[i] as usize] = out[targets[i] as usize] - seed;
                }
                accumulate(grads, *logits, gl);
            }
            Op::SumScalars(parts) => {
                for p in parts {
                    accumulate(grads, *p, g.clone());
                }
            }
            Op::SumAll(x) => {
                let vx = &self.nodes[x.0].value;
                accumulate(grads, *x, Tensor::filled(vx.shape(), g.scalar_value()));
            }
        }
    }
}

fn accumulate<R: Real>(grads: &mut [Option<Tensor<R>>], id: VarId, inc: Tensor<R>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, i) in existing.data_mut().iter_mut().zip(inc.data().iter()) {
                *e += *i;
            }
        }
        slot => *slot = Some(inc),
    }
}

fn elementwise<R: Real>(a: &Tensor<R>, b: &Tensor<R>, f: impl Fn(R, R) -> R) -> Tensor<R> {
    let data: Vec<R> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

#[inline]
fn sigmoid<R: Real>(v: R) -> R {
    R::ONE / (R::ONE + (-v).exp())
}

/// NLL of one row for the given target, max-subtracted.
pub(crate) fn row_nll<R: Real>(row: &[R], target: usize) -> R {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.maximum(v);
    }
    let mut sum = R::ZERO;
    for &v in row.iter() {
        sum += (v - max).exp();
    }
    max + sum.ln() - row[target]
}

fn masked_row<R: Real>(row: &[R], d_old: usize, mask: R) -> Vec<R> {
    let mut out = row.to_vec();
    for v in &mut out[d_old..] {
        *v = *v * mask;
    }
    out
}

fn norm_spec<R: Real>(
    x: &Tensor<R>,
    gain: &Tensor<R>,
    eps: f64,
    mask: MaskCols,
    what: &str,
) -> Result<NormSpec<R>> {
    if x.shape().len() != 2 {
        return Err(CoreError::Shape(format!("{what} expects a rank-2 input")));
    }
    let d = x.cols();
    if gain.shape() != [d] {
        return Err(CoreError::Shape(format!(
            "{what} gain shape {:?} does not match width {d}",
            gain.shape()
        )));
    }
    if mask.d_old > d {
        return Err(CoreError::Shape(format!(
            "{what} old width {} exceeds width {d}",
            mask.d_old
        )));
    }
    Ok(NormSpec {
        eps: R::from_f64(eps),
        d_old: mask.d_old,
        mask: R::from_f64(mask.mask),
        d_eff: R::from_f64(mask.d_eff(d)),
    })
}

/// Rotary-embedding kernel shared by the forward op and its adjoint.
///
/// Channel pair `(2i, 2i+1)` of each head rotates by
/// `position * base^(-2i / head_dim)`; angles and their cos/sin are
/// evaluated in f64 and cast, so both dtypes share one angle table.
pub(crate) fn rope_kernel<R: Real>(
    x: &Tensor<R>,
    head_dim: usize,
    base: f64,
    positions: &[usize],
    inverse: bool,
) -> Result<Tensor<R>> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(CoreError::Config(format!(
            "rope head dim {head_dim} must be positive and even"
        )));
    }
    if x.shape().len() != 2 || !x.cols().is_multiple_of(head_dim) {
        return Err(CoreError::Shape(format!(
            "rope input {:?} not divisible into heads of {head_dim}",
            x.shape()
        )));
    }
    if positions.len() != x.rows() {
        return Err(CoreError::Shape(format!(
            "rope got {} positions for {} rows",
            positions.len(),
            x.rows()
        )));
    }
    let half = head_dim / 2;
    // base^(-2i/head_dim) for i in 0..half.
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| libm::pow(base, -2.0 * i as f64 / head_dim as f64))
        .collect();
    let heads = x.cols() / head_dim;
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for i in 0..half {
            let theta = pos as f64 * inv_freq[i];
            let (c, s) = (R::from_f64(libm::cos(theta)), R::from_f64(libm::sin(theta)));
            let s = if inverse { -s } else { s };
            for h in 0..heads {
                let a = row[h * head_dim + 2 * i];
                let b = row[h * head_dim + 2 * i + 1];
                row[h * head_dim + 2 * i] = a * c - b * s;
                row[h * head_dim + 2 * i + 1] = a * s + b * c;
            }
        }
    }
    Ok(out)
}
