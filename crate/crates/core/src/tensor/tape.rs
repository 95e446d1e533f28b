use super::ops::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Log-probability floor used by [`Tape::cross_entropy`].
pub const LOG_CLAMP: f64 = 1e-12;

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        geometry: ConvGeometry,
    },
    AddChannelBias {
        input: Var,
        bias: Var,
    },
    LinearChannels {
        input: Var,
        weight: Var,
        bias: Var,
    },
    ConcatChannels {
        inputs: Vec<Var>,
    },
    Relu {
        input: Var,
    },
    Log {
        input: Var,
    },
    Exp {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    SoftmaxChannel {
        input: Var,
    },
    MaskedMean {
        input: Var,
        mask: Vec<f64>,
        total: f64,
    },
    L2Norm {
        input: Var,
    },
    GatherPixels {
        input: Var,
        positions: Vec<usize>,
    },
    NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    RowDots {
        rows: Var,
        targets: Vec<f64>,
        per_row: usize,
    },
    NllFirstColumn {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        softmax: Vec<f64>,
        active: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Reverse-mode recording of a single forward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and `backward` only has to walk the list once in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `tensor` as a leaf, trainable when its `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let rg = tensor.requires_grad();
        let mut value = tensor.clone();
        value.zero_grad();
        self.push(value, Op::Leaf, rg)
    }

    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let mut value = tensor.clone();
        value.zero_grad();
        self.push(value.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.values()[0]
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        let geometry = ops::conv_geometry(x, w, stride, padding)?;
        let out = ops::conv2d(x, w, stride, padding)?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                geometry,
            },
            rg,
        ))
    }

    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let out = ops::add_channel_bias(self.value(input), self.value(bias))?;
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(out, Op::AddChannelBias { input, bias }, rg))
    }

    /// 1x1 convolution plus bias; `weight` is `[C_out, C_in, 1, 1]`.
    pub fn conv1x1(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.conv2d(input, weight, 1, 0)?;
        self.add_channel_bias(y, bias)
    }

    /// Channel-wise linear layer; `weight` is `[C_out, C_in]`.
    pub fn linear_channels(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::linear_channels(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(out, Op::LinearChannels { input, weight, bias }, rg))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.value(inputs[0]);
        first.expect_rank("concat_channels", 3)?;
        let (h, w) = (first.shape()[1], first.shape()[2]);
        let mut channels = 0;
        let mut values = Vec::new();
        for &v in inputs {
            let t = self.value(v);
            t.expect_rank("concat_channels", 3)?;
            if t.shape()[1] != h || t.shape()[2] != w {
                return Err(Error::shape(
                    "concat_channels",
                    format!("spatial {:?} against {h}x{w}", t.shape()),
                ));
            }
            channels += t.shape()[0];
            values.extend_from_slice(t.values());
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let out = Tensor::new(vec![channels, h, w], values)?;
        Ok(self.push(out, Op::ConcatChannels { inputs: inputs.to_vec() }, rg))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(input);
        let out = Tensor::new(t.shape().to_vec(), t.values().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        let rg = self.rg(input);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, |v| v.max(0.0), Op::Relu { input })
    }

    pub fn log(&mut self, input: Var) -> Var {
        self.unary(input, f64::ln, Op::Log { input })
    }

    pub fn exp(&mut self, input: Var) -> Var {
        self.unary(input, f64::exp, Op::Exp { input })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        self.unary(input, |v| v * factor, Op::Scale { input, factor })
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(Error::shape(name, format!("{:?} and {:?}", ta.shape(), tb.shape())));
        }
        let values = ta.values().iter().zip(tb.values()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), values)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).values().iter().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b }, rg))
    }

    pub fn softmax_channel(&mut self, input: Var) -> Result<Var> {
        let out = ops::softmax_channel(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::SoftmaxChannel { input }, rg))
    }

    /// `sum(x * mask) / sum(mask)` with a constant mask.
    pub fn masked_mean(&mut self, input: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(input);
        if mask.len() != t.numel() {
            return Err(Error::shape("masked_mean", format!("mask {} for {}", mask.len(), t.numel())));
        }
        let total: f64 = mask.iter().sum();
        if total == 0.0 {
            return Err(Error::shape("masked_mean", "empty mask"));
        }
        let s = ops::dot(t.values(), &mask) / total;
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(s), Op::MaskedMean { input, mask, total }, rg))
    }

    pub fn l2_norm(&mut self, input: Var) -> Var {
        let n = ops::l2_norm(self.value(input).values());
        let rg = self.rg(input);
        self.push(Tensor::scalar(n), Op::L2Norm { input }, rg)
    }

    /// Gathers pixel feature vectors of a `[C, H, W]` map into `[n, C]`.
    pub fn gather_pixels(&mut self, input: Var, positions: &[usize]) -> Result<Var> {
        let t = self.value(input);
        t.expect_rank("gather_pixels", 3)?;
        let (c, hw) = t.chw_split();
        if let Some(&bad) = positions.iter().find(|&&p| p >= hw) {
            return Err(Error::shape("gather_pixels", format!("position {bad} outside {hw} pixels")));
        }
        let mut values = Vec::with_capacity(positions.len() * c);
        for &p in positions {
            values.extend((0..c).map(|ch| t.values()[ch * hw + p]));
        }
        let out = Tensor::new(vec![positions.len(), c], values)?;
        let rg = self.rg(input);
        Ok(self.push(
            out,
            Op::GatherPixels {
                input,
                positions: positions.to_vec(),
            },
            rg,
        ))
    }

    /// L2-normalizes each row of an `[n, D]` matrix.
    pub fn normalize_rows(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        t.expect_rank("normalize_rows", 2)?;
        let d = t.shape()[1];
        let mut norms = Vec::with_capacity(t.shape()[0]);
        let mut values = Vec::with_capacity(t.numel());
        for row in t.values().chunks(d) {
            let n = ops::l2_norm(row);
            if n == 0.0 {
                return Err(Error::DegenerateFeature);
            }
            norms.push(n);
            values.extend(row.iter().map(|v| v / n));
        }
        let out = Tensor::new(t.shape().to_vec(), values)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::NormalizeRows { input, norms }, rg))
    }

    /// `out[p, k] = <rows[p], targets[p, k]>` for constant targets laid out
    /// as `[n, per_row, D]`.
    pub fn row_dots(&mut self, rows: Var, targets: Vec<f64>, per_row: usize) -> Result<Var> {
        let t = self.value(rows);
        t.expect_rank("row_dots", 2)?;
        let (n, d) = (t.shape()[0], t.shape()[1]);
        if targets.len() != n * per_row * d {
            return Err(Error::shape(
                "row_dots",
                format!("{} target values for {n}x{per_row}x{d}", targets.len()),
            ));
        }
        let mut out = Vec::with_capacity(n * per_row);
        for p in 0..n {
            let row = &t.values()[p * d..(p + 1) * d];
            for k in 0..per_row {
                let off = (p * per_row + k) * d;
                out.push(ops::dot(row, &targets[off..off + d]));
            }
        }
        let out = Tensor::new(vec![n, per_row], out)?;
        let rg = self.rg(rows);
        Ok(self.push(
            out,
            Op::RowDots {
                rows,
                targets,
                per_row,
            },
            rg,
        ))
    }

    /// `sum_p -log softmax(row_p)[0]` for an `[n, K]` logit matrix.
    pub fn nll_first_column(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        t.expect_rank("nll_first_column", 2)?;
        let k = t.shape()[1];
        let mut total = 0.0;
        for row in t.values().chunks(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[0];
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(total), Op::NllFirstColumn { input }, rg))
    }

    /// Summed pixel-wise cross-entropy of `[C, H, W]` logits against
    /// (one-hot or all-zero) per-pixel targets of the same layout. Log
    /// probabilities are floored at `ln(1e-12)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        let t = self.value(logits);
        if targets.len() != t.numel() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), t.shape()),
            ));
        }
        let log_sm = ops::log_softmax_channel(t)?;
        let floor = LOG_CLAMP.ln();
        let mut total = 0.0;
        let mut active = Vec::with_capacity(targets.len());
        for (&y, &l) in targets.iter().zip(log_sm.values()) {
            let unclamped = l > floor;
            active.push(unclamped);
            if y != 0.0 {
                total -= y * if unclamped { l } else { floor };
            }
        }
        let softmax = log_sm.values().iter().map(|l| l.exp()).collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets,
                softmax,
                active,
            },
            rg,
        ))
    }

    /// Propagates d`loss`/d(leaf) into every trainable leaf. Leaf gradients
    /// accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let acc = self.nodes[i].grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (a, d) in acc.iter_mut().zip(&g) {
                    *a += d;
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.values();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                geometry,
            } => {
                let mut gi = slot(nodes, grads, *input).map(std::mem::take);
                let mut gw = slot(nodes, grads, *weight).map(std::mem::take);
                ops::conv2d_backward(geometry, val(*input), val(*weight), g, gi.as_deref_mut(), gw.as_deref_mut());
                if let Some(gi) = gi {
                    *slot(nodes, grads, *input).unwrap() = gi;
                }
                if let Some(gw) = gw {
                    *slot(nodes, grads, *weight).unwrap() = gw;
                }
            }
            Op::AddChannelBias { input, bias } => {
                let hw = node.value.shape()[1] * node.value.shape()[2];
                if let Some(gi) = slot(nodes, grads, *input) {
                    add_into(gi, g);
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for (c, b) in gb.iter_mut().enumerate() {
                        *b += g[c * hw..(c + 1) * hw].iter().sum::<f64>();
                    }
                }
            }
            Op::LinearChannels { input, weight, bias } => {
                let x = &nodes[input.0].value;
                let (c_in, hw) = x.chw_split();
                let c_out = node.value.shape()[0];
                let w = val(*weight);
                if let Some(gi) = slot(nodes, grads, *input) {
                    for o in 0..c_out {
                        let go = &g[o * hw..(o + 1) * hw];
                        for ci in 0..c_in {
                            let wt = w[o * c_in + ci];
                            for (d, gv) in gi[ci * hw..(ci + 1) * hw].iter_mut().zip(go) {
                                *d += wt * gv;
                            }
                        }
                    }
                }
                if let Some(gw) = slot(nodes, grads, *weight) {
                    for o in 0..c_out {
                        let go = &g[o * hw..(o + 1) * hw];
                        for ci in 0..c_in {
                            gw[o * c_in + ci] += ops::dot(go, &x.values()[ci * hw..(ci + 1) * hw]);
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for (o, b) in gb.iter_mut().enumerate() {
                        *b += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
                    }
                }
            }
            Op::ConcatChannels { inputs } => {
                let mut off = 0;
                for &v in inputs {
                    let n = nodes[v.0].value.numel();
                    if let Some(gi) = slot(nodes, grads, v) {
                        add_into(gi, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Relu { input } => {
                let x = val(*input);
                if let Some(gi) = slot(nodes, grads, *input) {
                    for ((d, gv), xv) in gi.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Log { input } => {
                let x = val(*input);
                if let Some(gi) = slot(nodes, grads, *input) {
                    for ((d, gv), xv) in gi.iter_mut().zip(g).zip(x) {
                        *d += gv / xv;
                    }
                }
            }
            Op::Exp { input } => {
                let y = node.value.values();
                if let Some(gi) = slot(nodes, grads, *input) {
                    for ((d, gv), yv) in gi.iter_mut().zip(g).zip(y) {
                        *d += gv * yv;
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (d, gv) in gb.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, gv), y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += gv * y;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((d, gv), x) in gb.iter_mut().zip(g).zip(va) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale { input, factor } => {
                if let Some(gi) = slot(nodes, grads, *input) {
                    for (d, gv) in gi.iter_mut().zip(g) {
                        *d += gv * factor;
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(gi) = slot(nodes, grads, *input) {
                    for d in gi.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] += (0..n).map(|j| g[i * n + j] * tb.values()[p * n + j]).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for p in 0..k {
                        for j in 0..n {
                            gb[p * n + j] += (0..m).map(|i| ta.values()[i * k + p] * g[i * n + j]).sum::<f64>();
                        }
                    }
                }
            }
            Op::SoftmaxChannel { input } => {
                let (c, hw) = node.value.chw_split();
                let y = node.value.values();
                if let Some(gi) = slot(nodes, grads, *input) {
                    for p in 0..hw {
                        let inner: f64 = (0..c).map(|ch| g[ch * hw + p] * y[ch * hw + p]).sum();
                        for ch in 0..c {
                            let idx = ch * hw + p;
                            gi[idx] += y[idx] * (g[idx] - inner);
                        }
                    }
                }
            }
            Op::MaskedMean { input, mask, total } => {
                if let Some(gi) = slot(nodes, grads, *input) {
                    for (d, m) in gi.iter_mut().zip(mask) {
                        *d += g[0] * m / total;
                    }
                }
            }
            Op::L2Norm { input } => {
                let x = val(*input);
                let n = node.value.values()[0];
                if n > 0.0 {
                    if let Some(gi) = slot(nodes, grads, *input) {
                        for (d, xv) in gi.iter_mut().zip(x) {
                            *d += g[0] * xv / n;
                        }
                    }
                }
            }
            Op::GatherPixels { input, positions } => {
                let (c, hw) = nodes[input.0].value.chw_split();
                if let Some(gi) = slot(nodes, grads, *input) {
                    for (r, &p) in positions.iter().enumerate() {
                        for ch in 0..c {
                            gi[ch * hw + p] += g[r * c + ch];
                        }
                    }
                }
            }
            Op::NormalizeRows { input, norms } => {
                let d = node.value.shape()[1];
                let y = node.value.values();
                if let Some(gi) = slot(nodes, grads, *input) {
                    for (r, n) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let inner = ops::dot(yr, gr);
                        for k in 0..d {
                            gi[r * d + k] += (gr[k] - yr[k] * inner) / n;
                        }
                    }
                }
            }
            Op::RowDots {
                rows,
                targets,
                per_row,
            } => {
                let d = nodes[rows.0].value.shape()[1];
                if let Some(gr) = slot(nodes, grads, *rows) {
                    for (p, out_row) in g.chunks(*per_row).enumerate() {
                        for (k, gv) in out_row.iter().enumerate() {
                            let off = (p * per_row + k) * d;
                            for j in 0..d {
                                gr[p * d + j] += gv * targets[off + j];
                            }
                        }
                    }
                }
            }
            Op::NllFirstColumn { input } => {
                let t = &nodes[input.0].value;
                let k = t.shape()[1];
                if let Some(gi) = slot(nodes, grads, *input) {
                    for (r, row) in t.values().chunks(k).enumerate() {
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for (j, v) in row.iter().enumerate() {
                            let p = (v - max).exp() / z;
                            gi[r * k + j] += g[0] * (p - if j == 0 { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                softmax,
                active,
            } => {
                let (c, hw) = nodes[logits.0].value.chw_split();
                if let Some(gi) = slot(nodes, grads, *logits) {
                    for p in 0..hw {
                        let weight: f64 = (0..c)
                            .map(|ch| ch * hw + p)
                            .filter(|&idx| active[idx])
                            .map(|idx| targets[idx])
                            .sum();
                        if weight == 0.0 {
                            continue;
                        }
                        for ch in 0..c {
                            let idx = ch * hw + p;
                            let own = if active[idx] { targets[idx] } else { 0.0 };
                            gi[idx] += g[0] * (softmax[idx] * weight - own);
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
