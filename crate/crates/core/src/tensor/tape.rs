use super::kernels::{col2im_add, gemm, im2col, transpose_2d, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Ids increase in creation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Public view of a node's operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    AddRowBias,
    MatMul,
    Transpose,
    Relu,
    Sqrt,
    Reshape,
    Sum,
    Mean,
    Inner,
    L2NormSq,
    Sign,
    Clamp,
    RowDot,
    RowNormSq,
    RowScale,
    GatherRows,
    Conv2d,
    MaxPool2,
    CrossEntropy,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sqrt(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Inner(Var, Var),
    L2NormSq(Var),
    Sign(Var),
    Clamp(Var, f64, f64),
    RowDot(Var, Var),
    RowNormSq(Var),
    RowScale(Var, Var),
    GatherRows(Var, Vec<usize>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Relu(..) => OpKind::Relu,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Inner(..) => OpKind::Inner,
            Op::L2NormSq(..) => OpKind::L2NormSq,
            Op::Sign(..) => OpKind::Sign,
            Op::Clamp(..) => OpKind::Clamp,
            Op::RowDot(..) => OpKind::RowDot,
            Op::RowNormSq(..) => OpKind::RowNormSq,
            Op::RowScale(..) => OpKind::RowScale,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRowBias(a, b)
            | Op::MatMul(a, b)
            | Op::Inner(a, b)
            | Op::RowDot(a, b)
            | Op::RowScale(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Sqrt(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::L2NormSq(a)
            | Op::Sign(a)
            | Op::Clamp(a, ..)
            | Op::RowNormSq(a)
            | Op::GatherRows(a, _) => vec![a],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![input, weight, bias],
            Op::MaxPool2 { input, .. } => vec![input],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a computation, replayed in reverse by [`Tape::backward`].
///
/// A node requires grad when it is a grad-requiring leaf or any of its inputs
/// requires grad. Ops whose inputs are all constant are recorded as constants
/// and keep no saved buffers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn accum(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
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

    /// Registers a tensor; it requires grad iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let op = if tensor.requires_grad() {
            Op::Leaf
        } else {
            Op::Constant
        };
        self.nodes.push(Node { value: tensor, op });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Gradient of `v` as a tensor of the same shape, zeros if none was produced.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        let data = value
            .grad()
            .map_or_else(|| vec![0.0; value.numel()], <[f64]>::to_vec);
        Tensor::from_parts(value.shape().to_vec(), data, false)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.set_grad(None);
        }
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let rg = op.inputs().iter().any(|&i| self.requires_grad(i));
        let op = if rg { op } else { Op::Constant };
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data, rg),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(op, ta, tb));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.push(name, shape, data, op)
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let shape = ta.shape().to_vec();
        self.push(name, shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.map("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    /// Sign with zero gradient everywhere.
    pub fn sign(&mut self, a: Var) -> Result<Var> {
        self.map("sign", a, sign, Op::Sign(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Contract(format!("clamp with lo {lo} > hi {hi}")));
        }
        self.map("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                left: ta.shape().to_vec(),
                right: shape,
            });
        }
        let data = ta.data().to_vec();
        self.push("reshape", shape, data, Op::Reshape(a))
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = vec![t.rows(), t.row_len()];
        self.reshape(a, shape)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", vec![], vec![s], Op::Mean(a))
    }

    /// Inner product of two 1-D tensors.
    pub fn inner(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 1 || ta.shape() != tb.shape() {
            return Err(dim_err("inner", ta, tb));
        }
        let s = super::dot(ta.data(), tb.data());
        self.push("inner", vec![], vec![s], Op::Inner(a, b))
    }

    pub fn l2_norm_sq(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push("l2_norm_sq", vec![], vec![s], Op::L2NormSq(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul").map_err(|_| dim_err("matmul", ta, tb))?;
        let (k2, n) = tb.dims2("matmul").map_err(|_| dim_err("matmul", ta, tb))?;
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let data = gemm(ta.data(), tb.data(), m, k, n);
        self.push("matmul", vec![m, n], data, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2("transpose")?;
        let data = transpose_2d(ta.data(), r, c);
        self.push("transpose", vec![c, r], data, Op::Transpose(a))
    }

    /// `x[b×n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (r, c) = tx.dims2("add_row_bias")?;
        if tb.shape() != [c] {
            return Err(dim_err("add_row_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(c.max(1)).take(r) {
            row.iter_mut().zip(tb.data()).for_each(|(v, b)| *v += b);
        }
        self.push("add_row_bias", vec![r, c], data, Op::AddRowBias(x, bias))
    }

    /// Per-row inner products of two `[b×k]` tensors, giving `[b]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, _) = ta.dims2("row_dot")?;
        let data = (0..r).map(|i| super::dot(ta.row(i), tb.row(i))).collect();
        self.push("row_dot", vec![r], data, Op::RowDot(a, b))
    }

    pub fn row_norm_sq(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, _) = ta.dims2("row_norm_sq")?;
        let data = (0..r).map(|i| ta.row(i).iter().map(|x| x * x).sum()).collect();
        self.push("row_norm_sq", vec![r], data, Op::RowNormSq(a))
    }

    /// Multiplies row `i` of `z[b×k]` by `s[i]`.
    pub fn row_scale(&mut self, z: Var, s: Var) -> Result<Var> {
        let (tz, ts) = (self.value(z), self.value(s));
        let (r, c) = tz.dims2("row_scale")?;
        if ts.shape() != [r] {
            return Err(dim_err("row_scale", tz, ts));
        }
        let mut data = tz.data().to_vec();
        for (i, row) in data.chunks_exact_mut(c.max(1)).take(r).enumerate() {
            let f = ts.data()[i];
            row.iter_mut().for_each(|v| *v *= f);
        }
        self.push("row_scale", vec![r, c], data, Op::RowScale(z, s))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let out = self.value(a).select_rows(indices)?;
        let shape = out.shape().to_vec();
        self.push("gather_rows", shape, out.into_data(), Op::GatherRows(a, indices.to_vec()))
    }

    /// Valid (unpadded, stride-1) 2-D convolution.
    ///
    /// `input: [B, Cin, H, W]`, `weight: [Cout, Cin, k, k]`, `bias: [Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(input), self.value(weight), self.value(bias));
        let (&[b, cin, h, w], &[cout, cin2, k, k2]) = (tx.shape(), tw.shape()) else {
            return Err(dim_err("conv2d", tx, tw));
        };
        if cin != cin2 || k != k2 || k > h || k > w || tb.shape() != [cout] {
            return Err(dim_err("conv2d", tx, tw));
        }
        let geom = ConvGeom {
            in_channels: cin,
            height: h,
            width: w,
            kernel: k,
        };
        let (kk, p) = (geom.patch_len(), geom.positions());
        let keep_cols = tw.requires_grad();
        let mut saved = Vec::with_capacity(if keep_cols { b * kk * p } else { 0 });
        let mut out = Vec::with_capacity(b * cout * p);
        for s in 0..b {
            let cols = im2col(&tx.data()[s * geom.input_len()..(s + 1) * geom.input_len()], &geom);
            let mut y = gemm(tw.data(), &cols, cout, kk, p);
            for (c, plane) in y.chunks_exact_mut(p).enumerate() {
                let bc = tb.data()[c];
                plane.iter_mut().for_each(|v| *v += bc);
            }
            out.extend_from_slice(&y);
            if keep_cols {
                saved.extend_from_slice(&cols);
            }
        }
        let shape = vec![b, cout, geom.out_h(), geom.out_w()];
        self.push(
            "conv2d",
            shape,
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols: saved,
            },
        )
    }

    /// 2×2 max-pool with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let tx = self.value(input);
        let &[b, c, h, w] = tx.shape() else {
            return Err(Error::Dimension {
                op: "max_pool2",
                left: tx.shape().to_vec(),
                right: vec![0, 0, 0, 0],
            });
        };
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        let x = tx.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        self.push("max_pool2", vec![b, c, oh, ow], out, Op::MaxPool2 { input, argmax })
    }

    /// Mean cross-entropy of `logits: [batch×C]` against class indices.
    ///
    /// Softmax is evaluated after subtracting each row's maximum.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (b, c) = tl.dims2("cross_entropy")?;
        if c < 2 {
            return Err(Error::Arity {
                op: "cross_entropy",
                detail: format!("need at least 2 classes, got {c}"),
            });
        }
        if b == 0 || labels.len() != b {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: vec![b, c],
                right: vec![labels.len()],
            });
        }
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: y,
                    bound: c,
                });
            }
            let row = tl.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[y];
            for (p, v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - m).exp() / z;
            }
        }
        let loss = total / b as f64;
        self.push(
            "cross_entropy",
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Accumulates `∂loss/∂v` into the grad of every grad-requiring node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.requires_grad() {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            self.nodes[id].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let rg = |v: Var| self.requires_grad(v);
        let val = |v: Var| self.value(v).data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::Add(a, b) => {
                if rg(a) {
                    accum(&mut grads[a.0], g.to_vec());
                }
                if rg(b) {
                    accum(&mut grads[b.0], g.to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if rg(a) {
                    accum(&mut grads[a.0], g.to_vec());
                }
                if rg(b) {
                    accum(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            &Op::Mul(a, b) => {
                if rg(a) {
                    accum(&mut grads[a.0], g.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                }
                if rg(b) {
                    accum(&mut grads[b.0], g.iter().zip(val(a)).map(|(g, x)| g * x).collect());
                }
            }
            &Op::Div(a, b) => {
                let (xa, xb) = (val(a), val(b));
                if rg(a) {
                    accum(&mut grads[a.0], g.iter().zip(xb).map(|(g, y)| g / y).collect());
                }
                if rg(b) {
                    let d = g
                        .iter()
                        .zip(xa.iter().zip(xb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    accum(&mut grads[b.0], d);
                }
            }
            &Op::Scale(a, c) => accum(&mut grads[a.0], g.iter().map(|v| c * v).collect()),
            &Op::AddScalar(a) | &Op::Reshape(a) => accum(&mut grads[a.0], g.to_vec()),
            &Op::AddRowBias(x, bias) => {
                if rg(x) {
                    accum(&mut grads[x.0], g.to_vec());
                }
                if rg(bias) {
                    let c = self.value(bias).numel();
                    let mut d = vec![0.0; c];
                    for row in g.chunks_exact(c.max(1)) {
                        d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    accum(&mut grads[bias.0], d);
                }
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if rg(a) {
                    let bt = transpose_2d(val(b), k, n);
                    accum(&mut grads[a.0], gemm(g, &bt, m, n, k));
                }
                if rg(b) {
                    let at = transpose_2d(val(a), m, k);
                    accum(&mut grads[b.0], gemm(&at, g, k, m, n));
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                accum(&mut grads[a.0], transpose_2d(g, c, r));
            }
            &Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(out)
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                accum(&mut grads[a.0], d);
            }
            &Op::Sqrt(a) => {
                accum(&mut grads[a.0], g.iter().zip(out).map(|(g, y)| g / (2.0 * y)).collect());
            }
            &Op::Sum(a) => accum(&mut grads[a.0], vec![g[0]; self.value(a).numel()]),
            &Op::Mean(a) => {
                let n = self.value(a).numel();
                accum(&mut grads[a.0], vec![g[0] / n as f64; n]);
            }
            &Op::Inner(a, b) => {
                if rg(a) {
                    accum(&mut grads[a.0], val(b).iter().map(|y| g[0] * y).collect());
                }
                if rg(b) {
                    accum(&mut grads[b.0], val(a).iter().map(|x| g[0] * x).collect());
                }
            }
            &Op::L2NormSq(a) => {
                accum(&mut grads[a.0], val(a).iter().map(|x| 2.0 * g[0] * x).collect());
            }
            &Op::Sign(a) => accum(&mut grads[a.0], vec![0.0; g.len()]),
            &Op::Clamp(a, lo, hi) => {
                let d = g
                    .iter()
                    .zip(val(a))
                    .map(|(g, x)| if (lo..=hi).contains(x) { *g } else { 0.0 })
                    .collect();
                accum(&mut grads[a.0], d);
            }
            &Op::RowDot(a, b) => {
                let w = self.value(a).row_len();
                let spread = |other: &[f64]| -> Vec<f64> {
                    other
                        .chunks_exact(w.max(1))
                        .zip(g)
                        .flat_map(|(row, gi)| row.iter().map(move |v| gi * v))
                        .collect()
                };
                if rg(a) {
                    accum(&mut grads[a.0], spread(val(b)));
                }
                if rg(b) {
                    accum(&mut grads[b.0], spread(val(a)));
                }
            }
            &Op::RowNormSq(a) => {
                let w = self.value(a).row_len();
                let d = val(a)
                    .chunks_exact(w.max(1))
                    .zip(g)
                    .flat_map(|(row, gi)| row.iter().map(move |v| 2.0 * gi * v))
                    .collect();
                accum(&mut grads[a.0], d);
            }
            &Op::RowScale(z, s) => {
                let w = self.value(z).row_len().max(1);
                if rg(z) {
                    let d = g
                        .chunks_exact(w)
                        .zip(val(s))
                        .flat_map(|(row, si)| row.iter().map(move |v| si * v))
                        .collect();
                    accum(&mut grads[z.0], d);
                }
                if rg(s) {
                    let d = g
                        .chunks_exact(w)
                        .zip(val(z).chunks_exact(w))
                        .map(|(gr, zr)| super::dot(gr, zr))
                        .collect();
                    accum(&mut grads[s.0], d);
                }
            }
            Op::GatherRows(a, idx) => {
                let src = self.value(*a);
                let w = src.row_len();
                let mut d = vec![0.0; src.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    d[i * w..(i + 1) * w]
                        .iter_mut()
                        .zip(&g[k * w..(k + 1) * w])
                        .for_each(|(a, b)| *a += b);
                }
                accum(&mut grads[a.0], d);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let b = self.shape(*input)[0];
                let cout = self.shape(*weight)[0];
                let (kk, p) = (geom.patch_len(), geom.positions());
                if rg(*bias) {
                    let mut d = vec![0.0; cout];
                    for plane in g.chunks_exact(p).enumerate() {
                        d[plane.0 % cout] += plane.1.iter().sum::<f64>();
                    }
                    accum(&mut grads[bias.0], d);
                }
                if rg(*weight) {
                    let mut d = vec![0.0; cout * kk];
                    for s in 0..b {
                        let cols_t = transpose_2d(&cols[s * kk * p..(s + 1) * kk * p], kk, p);
                        let gs = &g[s * cout * p..(s + 1) * cout * p];
                        let dw = gemm(gs, &cols_t, cout, p, kk);
                        d.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
                    }
                    accum(&mut grads[weight.0], d);
                }
                if rg(*input) {
                    let wt = transpose_2d(val(*weight), cout, kk);
                    let il = geom.input_len();
                    let mut d = vec![0.0; b * il];
                    for s in 0..b {
                        let gs = &g[s * cout * p..(s + 1) * cout * p];
                        let dcols = gemm(&wt, gs, kk, cout, p);
                        col2im_add(&dcols, geom, &mut d[s * il..(s + 1) * il]);
                    }
                    accum(&mut grads[input.0], d);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = vec![0.0; self.value(*input).numel()];
                for (gi, &src) in g.iter().zip(argmax) {
                    d[src] += gi;
                }
                accum(&mut grads[input.0], d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * c + y] -= scale;
                }
                accum(&mut grads[logits.0], d);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
