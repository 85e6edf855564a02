//! Tape-based reverse-mode differentiation over a closed set of operations.
//!
//! A [`Graph`] records every forward value. [`Graph::backward`] walks the tape in
//! reverse and returns gradients for every node plus per-parameter gradients.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeometry};
use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Conv { x: Var, w: Var, b: Var, geo: ConvGeometry, out_ch: usize, batch: usize },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Reshape(Var),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Upsample { x: Var, factor: usize },
    Tile { x: Var, height: usize, width: usize },
    MaxOverAxis { x: Var, axis: usize, argmax: Vec<usize> },
    PairwiseNegDist(Var),
    OffDiagSoftmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Column { x: Var, col: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    Bce { p: Var, targets: Vec<f64>, mean: bool },
    Triplet { anchor: Var, pos: Var, neg: Var, margin: f64 },
    Add(Var, Var),
    Scale(Var, f64),
    WeightedSum { x: Var, weights: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Probability clamp used by the binary cross-entropy operations.
pub const BCE_CLAMP: f64 = 1e-12;

/// Recorded computation.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Inference graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training graph: dropout masks are drawn from a stream seeded by `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Brings a parameter onto the tape (once per graph).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// Fully-connected layer: `x [N, in]`, `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(Error::shape(
                "fully-connected",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?}"),
            ));
        }
        let (n, din, dout) = (sx[0], sx[1], sw[0]);
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        kernels::gemm(n, din, dout, self.value(x).data(), false, self.value(w).data(), true, 1.0, &mut out);
        Ok(self.push(Tensor::new(vec![n, dout], out)?, Op::Linear { x, w, b }))
    }

    /// 2-D convolution: `x [N, C, H, W]`, `w [Cout, C, kh, kw]`, `b [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?}"),
            ));
        }
        let geo = ConvGeometry {
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            pad_h: pad,
            pad_w: pad,
        };
        if !geo.valid() {
            return Err(Error::shape("conv2d", format!("kernel {sw:?} larger than padded input {sx:?}")));
        }
        let out = kernels::conv_forward(self.value(x).data(), sx[0], &geo, self.value(w).data(), self.value(b).data(), sw[0]);
        let shape = vec![sx[0], sw[0], geo.out_height(), geo.out_width()];
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv { x, w, b, geo, out_ch: sw[0], batch: sx[0] },
        ))
    }

    /// 1-D convolution over the last axis: `x [N, C, L]`, `w [Cout, C, k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(Error::shape(
                "conv1d",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?}"),
            ));
        }
        let geo = ConvGeometry {
            in_ch: sx[1],
            height: 1,
            width: sx[2],
            kernel_h: 1,
            kernel_w: sw[2],
            stride: 1,
            pad_h: 0,
            pad_w: pad,
        };
        if !geo.valid() {
            return Err(Error::shape("conv1d", format!("kernel {sw:?} larger than padded input {sx:?}")));
        }
        let out = kernels::conv_forward(self.value(x).data(), sx[0], &geo, self.value(w).data(), self.value(b).data(), sw[0]);
        let shape = vec![sx[0], sw[0], geo.out_width()];
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv { x, w, b, geo, out_ch: sw[0], batch: sx[0] },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = *t
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax-rows", "scalar input"))?;
        let value = Tensor::new(t.shape().to_vec(), kernels::softmax_rows(t.data(), cols))?;
        Ok(self.push(value, Op::SoftmaxRows(x)))
    }

    /// Inverted dropout; the identity outside training graphs.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Dropout { x, mask })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(Error::shape("transpose", format!("{:?} is not 2-D", t.shape())));
        }
        let (r, c) = (t.dim(0), t.dim(1));
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.dim(axis) * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Nearest-neighbour spatial upsampling of `[N, C, H, W]`.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 4 || factor == 0 {
            return Err(Error::shape("upsample", format!("{:?} x{factor}", t.shape())));
        }
        let (n, c, h, w) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
        let (oh, ow) = (h * factor, w * factor);
        let mut data = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &t.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut data[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / factor) * w + xx / factor];
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], data)?;
        Ok(self.push(value, Op::Upsample { x, factor }))
    }

    /// Broadcasts `[N, C]` over a `height × width` grid: `[N, C, height, width]`.
    pub fn tile(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(Error::shape("tile", format!("{:?} is not [N, C]", t.shape())));
        }
        let (n, c) = (t.dim(0), t.dim(1));
        let plane = height * width;
        let mut data = Vec::with_capacity(n * c * plane);
        for &v in t.data() {
            data.extend(std::iter::repeat_n(v, plane));
        }
        let value = Tensor::new(vec![n, c, height, width], data)?;
        Ok(self.push(value, Op::Tile { x, height, width }))
    }

    /// Maximum over one axis (the axis is removed from the shape).
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() || t.dim(axis) == 0 {
            return Err(Error::shape("max", format!("axis {axis} of {:?}", t.shape())));
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let len = t.dim(axis);
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for l in 0..len {
                    let v = t.data()[(o * len + l) * inner + i];
                    if v > best_v {
                        best_v = v;
                        best = l;
                    }
                }
                data.push(best_v);
                argmax.push(best);
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::MaxOverAxis { x, axis, argmax }))
    }

    /// `S_ij = -‖x_i − x_j‖₂` over the rows of `x [n, k]`.
    pub fn pairwise_neg_distance(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(Error::shape("pairwise distance", format!("{:?}", t.shape())));
        }
        let (n, k) = (t.dim(0), t.dim(1));
        let value = Tensor::new(vec![n, n], kernels::pairwise_neg_distance(t.data(), n, k))?;
        Ok(self.push(value, Op::PairwiseNegDist(x)))
    }

    /// Row softmax restricted to off-diagonal entries; diagonal set to zero.
    pub fn offdiag_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 || t.dim(0) != t.dim(1) || t.dim(0) < 2 {
            return Err(Error::shape("off-diagonal softmax", format!("{:?}", t.shape())));
        }
        let n = t.dim(0);
        let value = Tensor::new(vec![n, n], kernels::offdiag_softmax(t.data(), n))?;
        Ok(self.push(value, Op::OffDiagSoftmax(x)))
    }

    /// Row lookup into `table [V, D]`, returning `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 {
            return Err(Error::shape("embedding", format!("{:?}", t.shape())));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= t.dim(0)) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                t.dim(0)
            )));
        }
        let value = t.select_leading(ids);
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Column `col` of a 2-D tensor, as a vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 || col >= t.dim(1) {
            return Err(Error::shape("column", format!("column {col} of {:?}", t.shape())));
        }
        let data = (0..t.dim(0)).map(|i| t.at(i, col)).collect();
        let value = Tensor::vector(data);
        Ok(self.push(value, Op::Column { x, col }))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 || rows.iter().any(|&r| r >= t.dim(0)) {
            return Err(Error::shape("gather rows", format!("{:?}", t.shape())));
        }
        let value = t.select_leading(rows);
        Ok(self.push(value, Op::GatherRows { x, rows: rows.to_vec() }))
    }

    /// Binary cross-entropy `-Σ [y ln p + (1-y) ln(1-p)]` (or its mean) with
    /// `p` clamped to `[1e-12, 1 - 1e-12]`.
    pub fn bce(&mut self, p: Var, targets: &[f64], mean: bool) -> Result<Var> {
        let t = self.value(p);
        if t.numel() != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "bce",
                format!("{} predictions vs {} targets", t.numel(), targets.len()),
            ));
        }
        let loss = bce_value(t.data(), targets, mean);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce { p, targets: targets.to_vec(), mean },
        ))
    }

    /// `Σ_i max(0, ‖a − p_i‖² − ‖a − n_i‖² + margin)` with `a` of `D` values and
    /// `pos`, `neg` of shape `[T, D]`.
    pub fn triplet(&mut self, anchor: Var, pos: Var, neg: Var, margin: f64) -> Result<Var> {
        let (a, p, n) = (self.value(anchor), self.value(pos), self.value(neg));
        let d = a.numel();
        if p.ndim() != 2 || p.shape() != n.shape() || p.dim(1) != d {
            return Err(Error::shape(
                "triplet",
                format!("anchor {:?}, positives {:?}, negatives {:?}", a.shape(), p.shape(), n.shape()),
            ));
        }
        let loss = triplet_value(a.data(), p.data(), n.data(), d, margin);
        Ok(self.push(Tensor::scalar(loss), Op::Triplet { anchor, pos, neg, margin }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut value = ta.clone();
        value.add_assign(tb);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v * k);
        self.push(value, Op::Scale(x, k))
    }

    /// `Σ w ⊙ x` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.numel() != weights.numel() {
            return Err(Error::shape(
                "weighted sum",
                format!("{:?} vs weights {:?}", t.shape(), weights.shape()),
            ));
        }
        let total = t.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { x, weights }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        self.weighted_sum(x, Tensor::full(&[n], 1.0))
            .expect("matching sizes")
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", root.shape())));
        }
        if !root.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = Gradients::new();
        for (&id, &v) in &self.params {
            if let Some(g) = &grads[v.0] {
                params.accumulate(id, g);
            }
        }
        Ok(Backward { grads, params })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
                let mut da = vec![0.0; m * k];
                kernels::gemm(m, n, k, g.data(), false, tb.data(), true, 0.0, &mut da);
                let mut db = vec![0.0; k * n];
                kernels::gemm(k, m, n, ta.data(), true, g.data(), false, 0.0, &mut db);
                accumulate(grads, *a, ta.shape(), da);
                accumulate(grads, *b, tb.shape(), db);
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (n, din, dout) = (tx.dim(0), tx.dim(1), tw.dim(0));
                let mut dx = vec![0.0; n * din];
                kernels::gemm(n, dout, din, g.data(), false, tw.data(), false, 0.0, &mut dx);
                let mut dw = vec![0.0; dout * din];
                kernels::gemm(dout, n, din, g.data(), true, tx.data(), false, 0.0, &mut dw);
                let mut db = vec![0.0; dout];
                for row in g.data().chunks(dout) {
                    for (d, r) in db.iter_mut().zip(row) {
                        *d += r;
                    }
                }
                accumulate(grads, *x, tx.shape(), dx);
                accumulate(grads, *w, tw.shape(), dw);
                accumulate(grads, *b, &[dout], db);
            }
            Op::Conv { x, w, b, geo, out_ch, batch } => {
                let (tx, tw) = (val(*x), val(*w));
                let mut dx = vec![0.0; tx.numel()];
                let mut dw = vec![0.0; tw.numel()];
                let mut db = vec![0.0; *out_ch];
                let needs_dx = !matches!(self.nodes[x.0].op, Op::Leaf);
                kernels::conv_backward(
                    tx.data(),
                    *batch,
                    geo,
                    tw.data(),
                    *out_ch,
                    g.data(),
                    needs_dx.then_some(dx.as_mut_slice()),
                    &mut dw,
                    &mut db,
                );
                if needs_dx {
                    accumulate(grads, *x, tx.shape(), dx);
                }
                accumulate(grads, *w, tw.shape(), dw);
                accumulate(grads, *b, &[*out_ch], db);
            }
            Op::Relu(x) => {
                let tx = val(*x);
                let dx = tx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, tx.shape(), dx);
            }
            Op::Sigmoid(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| gv * y * (1.0 - y))
                    .collect();
                accumulate(grads, *x, node.value.shape(), dx);
            }
            Op::SoftmaxRows(x) => {
                let cols = *node.value.shape().last().expect("non-scalar");
                let dx = kernels::softmax_rows_backward(node.value.data(), g.data(), cols);
                accumulate(grads, *x, node.value.shape(), dx);
            }
            Op::Dropout { x, mask } => {
                let dx = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::Reshape(x) | Op::Scale(x, _) => {
                let k = if let Op::Scale(_, k) = node.op { k } else { 1.0 };
                let dx = g.data().iter().map(|v| v * k).collect();
                accumulate(grads, *x, val(*x).shape(), dx);
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).dim(0), val(*x).dim(1));
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g.data()[j * r + i];
                    }
                }
                accumulate(grads, *x, &[r, c], dx);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let tp = val(p);
                    let block = tp.dim(*axis) * inner;
                    let mut dp = Vec::with_capacity(tp.numel());
                    for o in 0..outer {
                        let start = o * total + offset;
                        dp.extend_from_slice(&g.data()[start..start + block]);
                    }
                    accumulate(grads, p, tp.shape(), dp);
                    offset += block;
                }
            }
            Op::Upsample { x, factor } => {
                let tx = val(*x);
                let (h, w) = (tx.dim(2), tx.dim(3));
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![0.0; tx.numel()];
                for plane in 0..tx.dim(0) * tx.dim(1) {
                    let src = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[(y / factor) * w + xx / factor] += src[y * ow + xx];
                        }
                    }
                }
                accumulate(grads, *x, tx.shape(), dx);
            }
            Op::Tile { x, height, width } => {
                let plane = height * width;
                let dx = g.data().chunks(plane).map(|c| c.iter().sum()).collect();
                accumulate(grads, *x, val(*x).shape(), dx);
            }
            Op::MaxOverAxis { x, axis, argmax } => {
                let tx = val(*x);
                let len = tx.dim(*axis);
                let inner: usize = tx.shape()[axis + 1..].iter().product();
                let mut dx = vec![0.0; tx.numel()];
                for (out_idx, (&l, &gv)) in argmax.iter().zip(g.data()).enumerate() {
                    let (o, i) = (out_idx / inner, out_idx % inner);
                    dx[(o * len + l) * inner + i] += gv;
                }
                accumulate(grads, *x, tx.shape(), dx);
            }
            Op::PairwiseNegDist(x) => {
                let tx = val(*x);
                let (n, k) = (tx.dim(0), tx.dim(1));
                let xd = tx.data();
                let mut dx = vec![0.0; n * k];
                for i in 0..n {
                    for j in (i + 1)..n {
                        let dist = -node.value.data()[i * n + j];
                        if dist <= 0.0 {
                            continue;
                        }
                        let coeff = -(g.data()[i * n + j] + g.data()[j * n + i]) / dist;
                        for c in 0..k {
                            let diff = xd[i * k + c] - xd[j * k + c];
                            dx[i * k + c] += coeff * diff;
                            dx[j * k + c] -= coeff * diff;
                        }
                    }
                }
                accumulate(grads, *x, tx.shape(), dx);
            }
            Op::OffDiagSoftmax(x) => {
                let n = node.value.dim(0);
                let y = node.value.data();
                let mut dx = vec![0.0; n * n];
                for i in 0..n {
                    let row = i * n..(i + 1) * n;
                    let dot: f64 = y[row.clone()]
                        .iter()
                        .zip(&g.data()[row.clone()])
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, (a, b))| a * b)
                        .sum();
                    for j in 0..n {
                        if j != i {
                            dx[i * n + j] = y[i * n + j] * (g.data()[i * n + j] - dot);
                        }
                    }
                }
                accumulate(grads, *x, &[n, n], dx);
            }
            Op::Embedding { table, ids } => {
                let tt = val(*table);
                let d = tt.dim(1);
                let mut dt = vec![0.0; tt.numel()];
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g.data()[row * d + c];
                    }
                }
                accumulate(grads, *table, tt.shape(), dt);
            }
            Op::Column { x, col } => {
                let tx = val(*x);
                let cols = tx.dim(1);
                let mut dx = vec![0.0; tx.numel()];
                for (i, gv) in g.data().iter().enumerate() {
                    dx[i * cols + col] = *gv;
                }
                accumulate(grads, *x, tx.shape(), dx);
            }
            Op::GatherRows { x, rows } => {
                let tx = val(*x);
                let d = tx.dim(1);
                let mut dx = vec![0.0; tx.numel()];
                for (out_row, &r) in rows.iter().enumerate() {
                    for c in 0..d {
                        dx[r * d + c] += g.data()[out_row * d + c];
                    }
                }
                accumulate(grads, *x, tx.shape(), dx);
            }
            Op::Bce { p, targets, mean } => {
                let tp = val(*p);
                let upstream = g.data()[0];
                let norm = if *mean { targets.len() as f64 } else { 1.0 };
                let dx = tp
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&pv, &y)| {
                        if pv <= BCE_CLAMP || pv >= 1.0 - BCE_CLAMP {
                            0.0
                        } else {
                            upstream * (-(y / pv) + (1.0 - y) / (1.0 - pv)) / norm
                        }
                    })
                    .collect();
                accumulate(grads, *p, tp.shape(), dx);
            }
            Op::Triplet { anchor, pos, neg, margin } => {
                let (ta, tp, tn) = (val(*anchor), val(*pos), val(*neg));
                let d = ta.numel();
                let upstream = g.data()[0];
                let mut da = vec![0.0; d];
                let mut dp = vec![0.0; tp.numel()];
                let mut dn = vec![0.0; tn.numel()];
                let a = ta.data();
                for t in 0..tp.dim(0) {
                    let pr = &tp.data()[t * d..(t + 1) * d];
                    let nr = &tn.data()[t * d..(t + 1) * d];
                    if triplet_term(a, pr, nr, *margin) <= 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        da[c] += upstream * 2.0 * (nr[c] - pr[c]);
                        dp[t * d + c] += upstream * -2.0 * (a[c] - pr[c]);
                        dn[t * d + c] += upstream * 2.0 * (a[c] - nr[c]);
                    }
                }
                accumulate(grads, *anchor, ta.shape(), da);
                accumulate(grads, *pos, tp.shape(), dp);
                accumulate(grads, *neg, tn.shape(), dn);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.shape(), g.data().to_vec());
                accumulate(grads, *b, g.shape(), g.data().to_vec());
            }
            Op::WeightedSum { x, weights } => {
                let upstream = g.data()[0];
                let dx = weights.data().iter().map(|w| w * upstream).collect();
                accumulate(grads, *x, val(*x).shape(), dx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                *e += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape mirrors value"));
        }
    }
}

/// Clamped binary cross-entropy, summed (or averaged) over the batch.
pub fn bce_value(p: &[f64], targets: &[f64], mean: bool) -> f64 {
    let total: f64 = p
        .iter()
        .zip(targets)
        .map(|(&pv, &y)| {
            let pc = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
        })
        .sum();
    if mean {
        total / targets.len() as f64
    } else {
        total
    }
}

fn triplet_term(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    let dp: f64 = a.iter().zip(p).map(|(x, y)| (x - y) * (x - y)).sum();
    let dn: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum();
    let v = dp - dn + margin;
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Hinge triplet loss summed over paired rows of `pos` and `neg`.
pub fn triplet_value(anchor: &[f64], pos: &[f64], neg: &[f64], d: usize, margin: f64) -> f64 {
    pos.chunks(d)
        .zip(neg.chunks(d))
        .map(|(p, n)| triplet_term(anchor, p, n, margin))
        .sum()
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Backward {
    grads: Vec<Option<Tensor>>,
    params: Gradients,
}

impl Backward {
    /// Gradient of the loss with respect to any node (None if unreachable).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}
