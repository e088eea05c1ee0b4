//! Dense `f64` tensors and a reverse-mode gradient tape.
//!
//! The tape is a Wengert list: every operation appends a node holding its
//! output value plus whatever it needs for the backward pass. Node ids are
//! handed out as [`Var`] handles, so inputs always precede outputs and a
//! single reverse sweep visits nodes in a valid order.
//!
//! Only the operations needed by small plain convolutional classifiers are
//! provided. Convolutions go through an im2col lowering onto a GEMM kernel.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch on {axis}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{op}: expected rank {expected}, found rank {found}")]
    Rank {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("pool2x2: spatial extent {extent} on {axis} is odd")]
    OddSpatial { axis: &'static str, extent: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss does not depend on any tensor that requires a gradient")]
    Detached,
    #[error("backward already ran on this tape; reset gradients first")]
    BackwardTwice,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major n-dimensional array of `f64`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(TensorError::DataLength {
                    shape: self.shape.clone(),
                    len: g.len(),
                });
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Swish,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    Pool {
        input: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    Reshape {
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
    SumSquares {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Jsd {
        logits: Var,
        views: usize,
        probs: Vec<f64>,
        log_ratio: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn ck(&self) -> usize {
        self.c * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.ho * self.wo
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<&[usize]> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(TensorError::Rank {
                op,
                expected: rank,
                found: s.len(),
            });
        }
        Ok(s)
    }

    /// 2-D cross-correlation over `[N,C,H,W]` with `[F,C,K,K]` filters.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let is = self.expect_rank("conv2d", input, 4)?.to_vec();
        let ws = self.expect_rank("conv2d", weight, 4)?.to_vec();
        let bs = self.expect_rank("conv2d", bias, 1)?.to_vec();
        if ws[1] != is[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                axis: "input channels",
                expected: ws[1],
                found: is[1],
            });
        }
        if ws[2] != ws[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                axis: "kernel width",
                expected: ws[2],
                found: ws[3],
            });
        }
        if bs[0] != ws[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                axis: "bias length",
                expected: ws[0],
                found: bs[0],
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid(
                "conv2d: stride must be positive".into(),
            ));
        }
        let k = ws[2];
        if is[2] + 2 * pad < k || is[3] + 2 * pad < k {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                axis: "spatial extent",
                expected: k,
                found: is[2].min(is[3]) + 2 * pad,
            });
        }
        let geom = ConvGeom {
            n: is[0],
            c: is[1],
            h: is[2],
            w: is[3],
            f: ws[0],
            k,
            stride,
            pad,
            ho: (is[2] + 2 * pad - k) / stride + 1,
            wo: (is[3] + 2 * pad - k) / stride + 1,
        };
        let out = conv_forward(
            &geom,
            self.value(input),
            self.value(weight),
            self.value(bias),
        );
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            vec![geom.n, geom.f, geom.ho, geom.wo],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Affine map `[N,D] · [D,C] + [C]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let is = self.expect_rank("dense", input, 2)?.to_vec();
        let ws = self.expect_rank("dense", weight, 2)?.to_vec();
        let bs = self.expect_rank("dense", bias, 1)?.to_vec();
        if is[1] != ws[0] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                axis: "inner",
                expected: ws[0],
                found: is[1],
            });
        }
        if bs[0] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                axis: "bias length",
                expected: ws[1],
                found: bs[0],
            });
        }
        let (n, d, c) = (is[0], is[1], ws[1]);
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias));
        }
        gemm(
            n,
            d,
            c,
            Mat::rows(self.value(input), d),
            Mat::rows(self.value(weight), c),
            &mut out,
            1.0,
        );
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            vec![n, c],
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let out = self
            .value(input)
            .iter()
            .map(|&x| match kind {
                Activation::Relu => x.max(0.0),
                Activation::Swish => x * sigmoid(x),
            })
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(input);
        self.push(shape, out, Op::Act { input, kind }, rg)
    }

    /// Non-overlapping 2×2 pooling. Max-pool ties route to the first
    /// row-major maximum.
    pub fn pool2x2(&mut self, input: Var, kind: PoolKind) -> Result<Var> {
        let s = self.expect_rank("pool2x2", input, 4)?.to_vec();
        if s[2] % 2 != 0 {
            return Err(TensorError::OddSpatial {
                axis: "height",
                extent: s[2],
            });
        }
        if s[3] % 2 != 0 {
            return Err(TensorError::OddSpatial {
                axis: "width",
                extent: s[3],
            });
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input);
        let mut out = vec![0.0; planes * ho * wo];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax.resize(out.len(), 0);
        }
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = p * ho * wo + oy * wo + ox;
                    let idx = [
                        base + 2 * oy * w + 2 * ox,
                        base + 2 * oy * w + 2 * ox + 1,
                        base + (2 * oy + 1) * w + 2 * ox,
                        base + (2 * oy + 1) * w + 2 * ox + 1,
                    ];
                    match kind {
                        PoolKind::Max => {
                            let mut best = idx[0];
                            for &i in &idx[1..] {
                                if x[i] > x[best] {
                                    best = i;
                                }
                            }
                            out[o] = x[best];
                            argmax[o] = best;
                        }
                        PoolKind::Avg => {
                            out[o] = 0.25 * (x[idx[0]] + x[idx[1]] + x[idx[2]] + x[idx[3]]);
                        }
                    }
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            vec![s[0], s[1], ho, wo],
            out,
            Op::Pool {
                input,
                kind,
                argmax,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(input).len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: self.value(input).len(),
            });
        }
        let value = self.value(input).to_vec();
        let rg = self.rg(input);
        Ok(self.push(shape.to_vec(), value, Op::Reshape { input }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(TensorError::Rank {
                op,
                expected: sa.len(),
                found: sb.len(),
            });
        }
        for (&x, &y) in sa.iter().zip(sb) {
            if x != y {
                return Err(TensorError::ShapeMismatch {
                    op,
                    axis: "elementwise operand",
                    expected: x,
                    found: y,
                });
            }
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).iter().map(|&x| x * factor).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(input);
        self.push(shape, out, Op::Scale { input, factor }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().sum();
        let rg = self.rg(input);
        self.push(vec![], vec![s], Op::Sum { input }, rg)
    }

    /// `Σ x²`.
    pub fn sum_squares(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().map(|x| x * x).sum();
        let rg = self.rg(input);
        self.push(vec![], vec![s], Op::SumSquares { input }, rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Invalid(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() {
                return Err(TensorError::Rank {
                    op: "concat",
                    expected: base.len(),
                    found: s.len(),
                });
            }
            for (d, (&x, &y)) in base.iter().zip(s).enumerate() {
                if d != axis && x != y {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        axis: "non-concatenated axis",
                        expected: x,
                        found: y,
                    });
                }
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.is_empty() || start > end || end > s[0] {
            return Err(TensorError::Invalid(format!(
                "slice_rows {start}..{end} invalid for shape {s:?}"
            )));
        }
        let inner: usize = s[1..].iter().product();
        let value = self.value(input)[start * inner..end * inner].to_vec();
        let mut shape = s;
        shape[0] = end - start;
        let rg = self.rg(input);
        Ok(self.push(shape, value, Op::SliceRows { input, start }, rg))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self
            .expect_rank("softmax_cross_entropy", logits, 2)?
            .to_vec();
        let (n, c) = (s[0], s[1]);
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                axis: "batch",
                expected: n,
                found: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let z = self.value(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &z[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        let loss = if n == 0 { 0.0 } else { loss / n as f64 };
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Jensen–Shannon divergence between the softmax distributions of
    /// `views` stacked groups of rows, averaged over the batch.
    ///
    /// `logits` is `[views·N, C]` laid out view-major: rows `v·N..(v+1)·N`
    /// belong to view `v`.
    pub fn jsd_from_logits(&mut self, logits: Var, views: usize) -> Result<Var> {
        let s = self.expect_rank("jsd_from_logits", logits, 2)?.to_vec();
        if views == 0 || s[0] % views != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "jsd_from_logits",
                axis: "view-major rows",
                expected: views.max(1),
                found: s[0],
            });
        }
        let (rows, c) = (s[0], s[1]);
        let n = rows / views;
        let z = self.value(logits);
        let mut logp = vec![0.0; rows * c];
        for r in 0..rows {
            let row = &z[r * c..(r + 1) * c];
            let lse = log_sum_exp(row);
            for j in 0..c {
                logp[r * c + j] = row[j] - lse;
            }
        }
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let mut log_ratio = vec![0.0; rows * c];
        let ln_v = (views as f64).ln();
        let mut total = 0.0;
        let mut col = vec![0.0; views];
        for i in 0..n {
            for j in 0..c {
                for (v, slot) in col.iter_mut().enumerate() {
                    *slot = logp[(v * n + i) * c + j];
                }
                let log_mean = log_sum_exp(&col) - ln_v;
                for v in 0..views {
                    let r = (v * n + i) * c + j;
                    let d = logp[r] - log_mean;
                    log_ratio[r] = d;
                    total += probs[r] * d;
                }
            }
        }
        let value = if n == 0 {
            0.0
        } else {
            total / (views * n) as f64
        };
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![value],
            Op::Jsd {
                logits,
                views,
                probs,
                log_ratio,
            },
            rg,
        ))
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if !self.shape(loss).is_empty() && self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        if !self.rg(loss) {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (need_x, need_w, need_b) = (self.rg(*input), self.rg(*weight), self.rg(*bias));
                let (dx, dw, db) = conv_backward(
                    geom,
                    self.value(*input),
                    self.value(*weight),
                    g,
                    need_x,
                    need_w,
                );
                if need_x {
                    add_into(grads, *input, &dx);
                }
                if need_w {
                    add_into(grads, *weight, &dw);
                }
                if need_b {
                    add_into(grads, *bias, &db);
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let is = self.shape(*input);
                let (n, d) = (is[0], is[1]);
                let c = self.shape(*weight)[1];
                if self.rg(*input) {
                    let mut dx = vec![0.0; n * d];
                    gemm(
                        n,
                        c,
                        d,
                        Mat::rows(g, c),
                        Mat::cols(self.value(*weight), c),
                        &mut dx,
                        0.0,
                    );
                    add_into(grads, *input, &dx);
                }
                if self.rg(*weight) {
                    let mut dw = vec![0.0; d * c];
                    gemm(
                        d,
                        n,
                        c,
                        Mat::cols(self.value(*input), d),
                        Mat::rows(g, c),
                        &mut dw,
                        0.0,
                    );
                    add_into(grads, *weight, &dw);
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; c];
                    for row in g.chunks_exact(c) {
                        for (a, b) in db.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    add_into(grads, *bias, &db);
                }
            }
            Op::Act { input, kind } => {
                let x = self.value(*input);
                let dx: Vec<f64> = match kind {
                    Activation::Relu => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                    Activation::Swish => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| {
                            let s = sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect(),
                };
                add_into(grads, *input, &dx);
            }
            Op::Pool {
                input,
                kind,
                argmax,
            } => {
                let s = self.shape(*input);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0; planes * h * w];
                match kind {
                    PoolKind::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            dx[src] += g[o];
                        }
                    }
                    PoolKind::Avg => {
                        for p in 0..planes {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let gv = 0.25 * g[p * ho * wo + oy * wo + ox];
                                    let base = p * h * w + 2 * oy * w + 2 * ox;
                                    dx[base] += gv;
                                    dx[base + 1] += gv;
                                    dx[base + w] += gv;
                                    dx[base + w + 1] += gv;
                                }
                            }
                        }
                    }
                }
                add_into(grads, *input, &dx);
            }
            Op::Reshape { input } => add_into(grads, *input, g),
            Op::Add { a, b } => {
                if self.rg(*a) {
                    add_into(grads, *a, g);
                }
                if self.rg(*b) {
                    add_into(grads, *b, g);
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    add_into(grads, *a, g);
                }
                if self.rg(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(grads, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let da: Vec<f64> = g.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                    add_into(grads, *a, &da);
                }
                if self.rg(*b) {
                    let db: Vec<f64> = g.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                    add_into(grads, *b, &db);
                }
            }
            Op::Scale { input, factor } => {
                let dx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                add_into(grads, *input, &dx);
            }
            Op::Sum { input } => {
                let dx = vec![g[0]; self.value(*input).len()];
                add_into(grads, *input, &dx);
            }
            Op::SumSquares { input } => {
                let dx: Vec<f64> = self.value(*input).iter().map(|x| 2.0 * x * g[0]).collect();
                add_into(grads, *input, &dx);
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let row = node.shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.rg(v) {
                        let mut dv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            dv.extend_from_slice(&g[o * row + offset..o * row + offset + len]);
                        }
                        add_into(grads, v, &dv);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { input, start } => {
                let inner: usize = node.shape[1..].iter().product();
                let mut dx = vec![0.0; self.value(*input).len()];
                dx[start * inner..start * inner + g.len()].copy_from_slice(g);
                add_into(grads, *input, &dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                if n == 0 {
                    return;
                }
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dz[i * c + l] -= scale;
                }
                add_into(grads, *logits, &dz);
            }
            Op::Jsd {
                logits,
                views,
                probs,
                log_ratio,
            } => {
                let s = self.shape(*logits);
                let (rows, c) = (s[0], s[1]);
                if rows == 0 {
                    return;
                }
                let n = rows / views;
                // d/dp = (log p − log m)/(views·n); then through the softmax.
                let scale = g[0] / (*views * n) as f64;
                let mut dz = vec![0.0; rows * c];
                for r in 0..rows {
                    let p = &probs[r * c..(r + 1) * c];
                    let lr = &log_ratio[r * c..(r + 1) * c];
                    let inner: f64 = p.iter().zip(lr).map(|(p, l)| p * l).sum();
                    for j in 0..c {
                        dz[r * c + j] = scale * p[j] * (lr[j] - inner);
                    }
                }
                add_into(grads, *logits, &dz);
            }
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(buf) => {
            for (a, b) in buf.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Row-major matrix view with an optional transpose.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

impl<'a> Mat<'a> {
    /// Plain row-major matrix with `ld` columns.
    fn rows(data: &'a [f64], ld: usize) -> Self {
        Self {
            data,
            rs: ld as isize,
            cs: 1,
        }
    }

    /// Transpose of a row-major matrix with `ld` columns.
    fn cols(data: &'a [f64], ld: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: ld as isize,
        }
    }
}

/// `c ← a·b + beta·c` for an `m×k` by `k×n` product, `c` row-major.
fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, c: &mut [f64], beta: f64) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let span = |mat: &Mat<'_>, r: usize, cc: usize| {
        (r as isize - 1) * mat.rs + (cc as isize - 1) * mat.cs + 1
    };
    assert!(span(&a, m, k) as usize <= a.data.len());
    assert!(span(&b, k, n) as usize <= b.data.len());
    // SAFETY: the asserts above bound every strided access within the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lowers the batch into a `[C·K·K, N·Ho·Wo]` patch matrix.
fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let (plane, np) = (g.plane(), g.n * g.plane());
    let mut cols = vec![0.0; g.ck() * np];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let drow = &mut dst[n * plane + oy * g.wo..n * plane + (oy + 1) * g.wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(g: &ConvGeom, cols: &[f64]) -> Vec<f64> {
    let (plane, np) = (g.plane(), g.n * g.plane());
    let mut x = vec![0.0; g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[n * plane + oy * g.wo..n * plane + (oy + 1) * g.wo];
                        for (ox, s) in srow.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (plane, np, ck) = (g.plane(), g.n * g.plane(), g.ck());
    let cols = im2col(g, x);
    let mut prod = vec![0.0; g.f * np];
    gemm(
        g.f,
        ck,
        np,
        Mat::rows(w, ck),
        Mat::rows(&cols, np),
        &mut prod,
        0.0,
    );
    let mut out = vec![0.0; g.n * g.f * plane];
    for f in 0..g.f {
        for n in 0..g.n {
            let src = &prod[f * np + n * plane..f * np + (n + 1) * plane];
            let dst = &mut out[(n * g.f + f) * plane..(n * g.f + f + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b[f];
            }
        }
    }
    out
}

fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need_x: bool,
    need_w: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (plane, np, ck) = (g.plane(), g.n * g.plane(), g.ck());
    let mut dmat = vec![0.0; g.f * np];
    let mut db = vec![0.0; g.f];
    for f in 0..g.f {
        for n in 0..g.n {
            let src = &dout[(n * g.f + f) * plane..(n * g.f + f + 1) * plane];
            dmat[f * np + n * plane..f * np + (n + 1) * plane].copy_from_slice(src);
            db[f] += src.iter().sum::<f64>();
        }
    }
    let mut dw = Vec::new();
    if need_w {
        let cols = im2col(g, x);
        dw = vec![0.0; g.f * ck];
        gemm(
            g.f,
            np,
            ck,
            Mat::rows(&dmat, np),
            Mat::cols(&cols, np),
            &mut dw,
            0.0,
        );
    }
    let mut dx = Vec::new();
    if need_x {
        let mut dcols = vec![0.0; ck * np];
        gemm(
            ck,
            g.f,
            np,
            Mat::cols(w, ck),
            Mat::rows(&dmat, np),
            &mut dcols,
            0.0,
        );
        dx = col2im(g, &dcols);
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>, grad: bool) -> Var {
        let t = Tensor::new(shape.to_vec(), data).unwrap();
        tape.leaf(&if grad { t.with_grad() } else { t })
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 3, 3], vec![1.0; 9], false);
        let w = leaf(&mut tape, &[1, 1, 3, 3], vec![1.0; 9], false);
        let b = leaf(&mut tape, &[1], vec![0.0], false);
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert_eq!(tape.value(y)[4], 9.0);
        assert_eq!(tape.value(y)[0], 4.0);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 2 * 5 * 5).map(|i| (i as f64).sin()).collect();
        let x = leaf(&mut tape, &[2, 2, 5, 5], data.clone(), false);
        // Two filters, each the identity on its own channel.
        let mut wd = vec![0.0; 2 * 2 * 9];
        wd[4] = 1.0;
        wd[3 * 9 + 4] = 1.0;
        let w = leaf(&mut tape, &[2, 2, 3, 3], wd, false);
        let b = leaf(&mut tape, &[2], vec![0.0; 2], false);
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.value(y), &data[..]);
    }

    #[test]
    fn conv_names_the_offending_axis() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 3, 4, 4], vec![0.0; 48], false);
        let w = leaf(&mut tape, &[2, 2, 3, 3], vec![0.0; 36], false);
        let b = leaf(&mut tape, &[2], vec![0.0; 2], false);
        match tape.conv2d(x, w, b, 1, 1) {
            Err(TensorError::ShapeMismatch { axis, .. }) => assert_eq!(axis, "input channels"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn strided_conv_output_extent() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 8, 8], vec![1.0; 64], false);
        let w = leaf(&mut tape, &[1, 1, 3, 3], vec![1.0; 9], false);
        let b = leaf(&mut tape, &[1], vec![0.0], false);
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
    }

    #[test]
    fn dense_identity_and_bias_only() {
        let mut tape = Tape::new();
        let x = leaf(
            &mut tape,
            &[2, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            false,
        );
        let eye = leaf(
            &mut tape,
            &[3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            false,
        );
        let zero_b = leaf(&mut tape, &[3], vec![0.0; 3], false);
        let y = tape.dense(x, eye, zero_b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let zero_w = leaf(&mut tape, &[3, 2], vec![0.0; 6], false);
        let b = leaf(&mut tape, &[2], vec![0.5, -1.5], false);
        let y = tape.dense(x, zero_w, b).unwrap();
        assert_eq!(tape.value(y), &[0.5, -1.5, 0.5, -1.5]);

        let bad = leaf(&mut tape, &[4, 2], vec![0.0; 8], false);
        assert!(tape.dense(x, bad, b).is_err());
    }

    #[test]
    fn activations_pointwise() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![-2.0, 3.0, 0.0], false);
        let r = tape.activation(x, Activation::Relu);
        assert_eq!(tape.value(r), &[0.0, 3.0, 0.0]);
        let s = tape.activation(x, Activation::Swish);
        assert_eq!(tape.value(s)[2], 0.0);
    }

    #[test]
    fn pooling_windows() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], false);
        let m = tape.pool2x2(x, PoolKind::Max).unwrap();
        let a = tape.pool2x2(x, PoolKind::Avg).unwrap();
        assert_eq!(tape.value(m), &[4.0]);
        assert_eq!(tape.value(a), &[2.5]);

        let c = leaf(&mut tape, &[1, 2, 4, 4], vec![0.7; 32], false);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let p = tape.pool2x2(c, kind).unwrap();
            assert!(tape.value(p).iter().all(|&v| v == 0.7));
        }
        let odd = leaf(&mut tape, &[1, 1, 3, 2], vec![0.0; 6], false);
        assert!(matches!(
            tape.pool2x2(odd, PoolKind::Max),
            Err(TensorError::OddSpatial { .. })
        ));
    }

    #[test]
    fn max_pool_ties_route_to_first() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 2, 2], vec![5.0; 4], true);
        let m = tape.pool2x2(x, PoolKind::Max).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, &[1, 10], vec![0.3; 10], false);
        let l = tape.softmax_cross_entropy(z, &[4]).unwrap();
        assert!((tape.scalar(l) - 10f64.ln()).abs() < 1e-12);

        let mut logits = vec![0.0; 3];
        logits[1] = 1e4;
        let z = leaf(&mut tape, &[1, 3], logits, false);
        let l = tape.softmax_cross_entropy(z, &[1]).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);

        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        assert!(tape.scalar(l).is_finite());

        assert!(matches!(
            tape.softmax_cross_entropy(z, &[3]),
            Err(TensorError::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn backward_of_sum_and_half_square() {
        let mut tape = Tape::new();
        let w = leaf(
            &mut tape,
            &[2, 3],
            vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0],
            true,
        );
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let data = vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0];
        let w = leaf(&mut tape, &[2, 3], data.clone(), true);
        let sq = tape.sum_squares(w);
        let l = tape.scale(sq, 0.5);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &data[..]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let w = leaf(&mut tape, &[3], vec![1.0, 2.0, 3.0], true);
        assert!(matches!(tape.backward(w), Err(TensorError::NotScalar(_))));
        let c = leaf(&mut tape, &[3], vec![1.0, 2.0, 3.0], false);
        let s = tape.sum(c);
        assert!(matches!(tape.backward(s), Err(TensorError::Detached)));
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::BackwardTwice)));
        tape.reset_grads();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0; 3]);
    }

    #[test]
    fn unreached_leaves_get_zero_gradients() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], vec![1.0, 2.0], true);
        let b = leaf(&mut tape, &[2], vec![3.0, 4.0], true);
        let s = tape.sum(a);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0], true);
        let b = leaf(&mut tape, &[2, 1], vec![5.0, 6.0], true);
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let r = tape.slice_rows(c, 1, 2).unwrap();
        assert_eq!(tape.value(r), &[3.0, 4.0, 6.0]);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn jsd_of_identical_views_is_zero() {
        let mut tape = Tape::new();
        let row = [0.1, -0.3, 2.0];
        let data: Vec<f64> = row.iter().chain(&row).chain(&row).copied().collect();
        let z = leaf(&mut tape, &[3, 3], data, true);
        let j = tape.jsd_from_logits(z, 3).unwrap();
        assert!(tape.scalar(j).abs() < 1e-15);
    }
}
