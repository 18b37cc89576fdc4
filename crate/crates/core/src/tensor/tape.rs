use super::kernels::{self, ConvGeom, PoolGeom};
use super::Tensor;
use crate::error::{invalid, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// How [`Tape::batch_norm2d`] obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with the batch's own per-channel mean and biased variance.
    /// The statistics are kept on the tape, see [`Tape::batch_stats`].
    Train,
    /// Normalize with frozen running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// A region of one feature map, in that map's cell coordinates, to be max
/// pooled into a fixed grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiRegion {
    pub batch: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        geom: PoolGeom,
    },
    Relu(Var),
    Sigmoid {
        input: Var,
        beta: f64,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
    },
    Upsample2(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Scale(Var, f64),
    Reshape(Var),
    SigmoidBce {
        logits: Var,
        indices: Vec<usize>,
        targets: Vec<f64>,
    },
    SmoothL1 {
        input: Var,
        indices: Vec<usize>,
        targets: Vec<f64>,
        beta: f64,
        norm: f64,
    },
    RoiPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool",
            Op::AvgPool { .. } => "avg_pool",
            Op::Relu(_) => "relu",
            Op::Sigmoid { .. } => "sigmoid_scaled",
            Op::BatchNorm { .. } => "batch_norm2d",
            Op::Upsample2(_) => "upsample_nearest2",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Linear { .. } => "fully_connected",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Sum(_) => "sum",
            Op::Scale(..) => "scale",
            Op::Reshape(_) => "reshape",
            Op::SigmoidBce { .. } => "sigmoid_bce",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::RoiPool { .. } => "roi_pool",
            Op::Concat(_) => "concat",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::MaxPool { input, .. }
            | Op::AvgPool { input, .. }
            | Op::Sigmoid { input, .. }
            | Op::SmoothL1 { input, .. }
            | Op::RoiPool { input, .. } => vec![*input],
            Op::Relu(a) | Op::Upsample2(a) | Op::Sum(a) | Op::Scale(a, _) | Op::Reshape(a) => {
                vec![*a]
            }
            Op::BatchNorm {
                input,
                gamma,
                shift,
                ..
            } => vec![*input, *gamma, *shift],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Linear {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::SoftmaxCrossEntropy { logits, .. } | Op::SigmoidBce { logits, .. } => {
                vec![*logits]
            }
            Op::Concat(vs) => vs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records operations in execution order so gradients can be replayed in
/// reverse.
///
/// Gradient policy: [`Tape::backward`] clears the gradients of intermediate
/// nodes before each pass, while leaf gradients accumulate across passes
/// until [`Tape::zero_grad`] is called. The tape stays usable after a
/// backward pass; drop it to release the recorded graph.
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf that collects a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Batch mean and biased variance captured by a train-mode batch norm.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                train: true,
                batch_mean,
                batch_var,
                ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    /// First recorded value that is NaN or infinite, as `(var, element)`.
    pub fn first_non_finite(&self) -> Option<(Var, usize)> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            n.value
                .data()
                .iter()
                .position(|v| !v.is_finite())
                .map(|e| (Var(i), e))
        })
    }

    /// The node nearest the loss whose gradient holds a NaN or infinity,
    /// with the name of the op that produced it. After a backward pass
    /// this points at the op whose backward first went wrong.
    pub fn first_non_finite_grad(&self) -> Option<(Var, &'static str)> {
        let bad = |n: &Node| n.grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite()));
        // leaves are created lazily and can sit anywhere in the order
        let ops = self.nodes.iter().enumerate().rev().filter(|(_, n)| !matches!(n.op, Op::Leaf));
        let leaves = self.nodes.iter().enumerate().rev().filter(|(_, n)| matches!(n.op, Op::Leaf));
        ops.chain(leaves).find(|(_, n)| bad(n)).map(|(i, n)| (Var(i), n.op.name()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, requires_grad, op)
    }

    fn dims4(&self, v: Var, what: &str) -> Result<[usize; 4]> {
        self.value(v)
            .dims4()
            .map_err(|_| invalid!("{what} must be 4-D, got shape {:?}", self.shape(v)))
    }

    /// 2-D cross-correlation (no kernel flip) with zero padding.
    ///
    /// `input` is `[N, Cin, H, W]`, `kernel` is `[Cout, Cin, kh, kw]`, `bias`
    /// is `[Cout]`. The output is `[N, Cout, H', W']` with
    /// `H' = (H + 2·padding − kh) / stride + 1`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, cin, h, w] = self.dims4(input, "conv2d input")?;
        let [cout, kcin, kh, kw] = self.dims4(kernel, "conv2d kernel")?;
        if stride == 0 {
            return Err(invalid!("conv2d stride must be at least 1"));
        }
        if cout == 0 || kh == 0 || kw == 0 {
            return Err(invalid!(
                "conv2d kernel is empty: shape {:?}",
                self.shape(kernel)
            ));
        }
        if kcin != cin {
            return Err(invalid!(
                "conv2d channel mismatch: input has Cin={cin} but kernel expects Cin={kcin}"
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(invalid!(
                    "conv2d bias must have shape [{cout}] (Cout), got {:?}",
                    self.shape(b)
                ));
            }
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(invalid!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{} (H x W)",
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![n, cout, geom.ho, geom.wo], out)?;
        Ok(self.push_op(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Max or average pooling over `kh × kw` windows. Padding cells never win
    /// a max and are excluded from an average.
    pub fn pool2d(
        &mut self,
        input: Var,
        kind: PoolKind,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = self.dims4(input, "pool2d input")?;
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(invalid!("pool2d needs stride, kh, kw >= 1"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(invalid!(
                "pool2d window {kh}x{kw} larger than input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        if padding >= kh || padding >= kw {
            return Err(invalid!("pool2d padding must be smaller than the window"));
        }
        let geom = PoolGeom {
            planes: n * c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let shape = vec![n, c, geom.ho, geom.wo];
        let x = self.value(input).data();
        Ok(match kind {
            PoolKind::Max => {
                let (out, argmax) = kernels::max_pool_forward(x, &geom);
                self.push_op(Tensor::new(shape, out)?, Op::MaxPool { input, argmax })
            }
            PoolKind::Avg => {
                let out = kernels::avg_pool_forward(x, &geom);
                self.push_op(Tensor::new(shape, out)?, Op::AvgPool { input, geom })
            }
        })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i].max(0.0));
        self.push_op(out, Op::Relu(input))
    }

    /// `1 / (1 + exp(−beta·x))` elementwise. Outputs are strictly inside
    /// (0, 1) while `|beta·x| < 36`; past that `f64` saturates.
    pub fn sigmoid_scaled(&mut self, input: Var, beta: f64) -> Result<Var> {
        if !beta.is_finite() {
            return Err(invalid!("sigmoid beta must be finite, got {beta}"));
        }
        let x = self.value(input);
        let out = Tensor::from_fn(x.shape(), |i| sigmoid(beta * x.data()[i]));
        Ok(self.push_op(out, Op::Sigmoid { input, beta }))
    }

    /// Per-channel batch normalization of a `[N, C, H, W]` tensor followed by
    /// the affine map `gamma · x̂ + shift`.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        shift: Var,
        eps: f64,
        mode: BatchNormMode<'_>,
    ) -> Result<Var> {
        let [n, c, h, w] = self.dims4(input, "batch_norm2d input")?;
        if !(eps > 0.0) {
            return Err(invalid!("batch_norm2d eps must be positive, got {eps}"));
        }
        for (what, v) in [("gamma", gamma), ("shift", shift)] {
            if self.shape(v) != [c] {
                return Err(invalid!(
                    "batch_norm2d {what} must have shape [{c}] (C), got {:?}",
                    self.shape(v)
                ));
            }
        }
        let plane = h * w;
        let count = n * plane;
        if count == 0 {
            return Err(invalid!("batch_norm2d needs N·H·W >= 1"));
        }
        let x = self.value(input).data();
        let (mean, var, train) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        acc += x[base..base + plane].iter().sum::<f64>();
                    }
                    let m = acc / count as f64;
                    let mut sq = 0.0;
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        sq += x[base..base + plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count as f64;
                }
                (mean, var, true)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(invalid!(
                        "batch_norm2d running stats must have {c} channels, got {} and {}",
                        mean.len(),
                        var.len()
                    ));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(shift).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push_op(
            value,
            Op::BatchNorm {
                input,
                gamma,
                shift,
                xhat,
                inv_std,
                train,
                batch_mean: if train { mean } else { Vec::new() },
                batch_var: if train { var } else { Vec::new() },
            },
        ))
    }

    /// Nearest-neighbour ×2 upsampling: every pixel becomes a 2×2 block.
    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(input, "upsample input")?;
        let x = self.value(input).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            for y in 0..h2 {
                let src = &x[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
                let dst = &mut out[(p * h2 + y) * w2..(p * h2 + y + 1) * w2];
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = src[xo / 2];
                }
            }
        }
        Ok(self.push_op(Tensor::new(vec![n, c, h2, w2], out)?, Op::Upsample2(input)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(invalid!(
                "{what} needs identical shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] + y.data()[i]);
        Ok(self.push_op(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] * y.data()[i]);
        Ok(self.push_op(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] * factor);
        self.push_op(out, Op::Scale(input, factor))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        self.push_op(Tensor::scalar(total), Op::Sum(input))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push_op(value, Op::Reshape(input)))
    }

    /// Concatenates along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid!("concat of zero tensors"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(invalid!(
                    "concat shape mismatch: {:?} vs {:?}",
                    self.shape(first),
                    s
                ));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push_op(Tensor::new(shape, data)?, Op::Concat(parts.to_vec())))
    }

    /// Affine map `input · weight + bias` for `input [N, D]`, `weight [D, K]`,
    /// `bias [K]`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, d) = match self.shape(input) {
            &[n, d] => (n, d),
            s => return Err(invalid!("fully_connected input must be [N, D], got {s:?}")),
        };
        let k = match self.shape(weight) {
            &[wd, k] if wd == d => k,
            s => {
                return Err(invalid!(
                    "fully_connected weight must be [{d}, K] to match input D={d}, got {s:?}"
                ))
            }
        };
        if self.shape(bias) != [k] {
            return Err(invalid!(
                "fully_connected bias must be [{k}], got {:?}",
                self.shape(bias)
            ));
        }
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(b);
        }
        kernels::gemm(
            n,
            d,
            k,
            self.value(input).data(),
            (d, 1),
            self.value(weight).data(),
            (k, 1),
            1.0,
            &mut out,
            (k, 1),
        );
        Ok(self.push_op(
            Tensor::new(vec![n, k], out)?,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match self.shape(logits) {
            &[n, k] => (n, k),
            s => return Err(invalid!("softmax_cross_entropy logits must be [N, K], got {s:?}")),
        };
        if labels.len() != n {
            return Err(invalid!("{} labels for {n} rows", labels.len()));
        }
        if n == 0 {
            return Err(invalid!("softmax_cross_entropy needs at least one row"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid!("label {bad} out of range [0, {k})"));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &z[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - max).exp() / denom;
            }
            loss += denom.ln() - (row[labels[r]] - max);
        }
        Ok(self.push_op(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits[i])` against `targets`
    /// over the selected flat `indices`. An empty selection yields 0.
    pub fn sigmoid_bce(&mut self, logits: Var, indices: &[usize], targets: &[f64]) -> Result<Var> {
        if indices.len() != targets.len() {
            return Err(invalid!("{} indices but {} targets", indices.len(), targets.len()));
        }
        let z = self.value(logits).data();
        if let Some(bad) = indices.iter().find(|&&i| i >= z.len()) {
            return Err(invalid!("index {bad} out of range for {} logits", z.len()));
        }
        let mut loss = 0.0;
        for (&i, &t) in indices.iter().zip(targets) {
            let x = z[i];
            loss += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        }
        let m = indices.len().max(1) as f64;
        Ok(self.push_op(
            Tensor::scalar(loss / m),
            Op::SigmoidBce {
                logits,
                indices: indices.to_vec(),
                targets: targets.to_vec(),
            },
        ))
    }

    /// `Σ smooth_l1(input[i] − target)` over the selected flat indices,
    /// divided by `norm`. An empty selection yields 0.
    pub fn smooth_l1(
        &mut self,
        input: Var,
        indices: &[usize],
        targets: &[f64],
        beta: f64,
        norm: f64,
    ) -> Result<Var> {
        if indices.len() != targets.len() {
            return Err(invalid!("{} indices but {} targets", indices.len(), targets.len()));
        }
        if !(beta > 0.0) || !(norm > 0.0) {
            return Err(invalid!("smooth_l1 needs beta > 0 and norm > 0"));
        }
        let x = self.value(input).data();
        if let Some(bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(invalid!("index {bad} out of range for {} values", x.len()));
        }
        let loss: f64 = indices
            .iter()
            .zip(targets)
            .map(|(&i, &t)| {
                let d = (x[i] - t).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum();
        Ok(self.push_op(
            Tensor::scalar(loss / norm),
            Op::SmoothL1 {
                input,
                indices: indices.to_vec(),
                targets: targets.to_vec(),
                beta,
                norm,
            },
        ))
    }

    /// Max-pools each region of a `[N, C, H, W]` map into a `size × size`
    /// grid, giving `[R, C, size, size]`.
    ///
    /// Region coordinates are continuous cell coordinates (cell `j` spans
    /// `[j, j+1)`). Each bin covers every cell its interval touches; a bin
    /// that falls entirely outside the map takes the nearest cell.
    pub fn roi_pool(&mut self, input: Var, regions: &[RoiRegion], size: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims4(input, "roi_pool input")?;
        if size == 0 {
            return Err(invalid!("roi_pool output size must be positive"));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(regions.len() * c * size * size);
        let mut argmax = Vec::with_capacity(out.capacity());
        for r in regions {
            if r.batch >= n {
                return Err(invalid!("roi batch index {} out of range for N={n}", r.batch));
            }
            if !(r.x2 > r.x1 && r.y2 > r.y1) || ![r.x1, r.y1, r.x2, r.y2].iter().all(|v| v.is_finite()) {
                return Err(invalid!("degenerate roi {:?}", r));
            }
            let ys: Vec<(usize, usize)> = (0..size).map(|b| bin_cells(r.y1, r.y2, b, size, h)).collect();
            let xs: Vec<(usize, usize)> = (0..size).map(|b| bin_cells(r.x1, r.x2, b, size, w)).collect();
            for ch in 0..c {
                let base = (r.batch * c + ch) * h * w;
                for &(y0, y1) in &ys {
                    for &(x0, x1) in &xs {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = usize::MAX;
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                let idx = base + yy * w + xx;
                                if best_idx == usize::MAX || x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let value = Tensor::new(vec![regions.len(), c, size, size], out)?;
        Ok(self.push_op(value, Op::RoiPool { input, argmax }))
    }

    /// Runs reverse-mode differentiation from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(invalid!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(grad) = node.grad.as_deref() else {
                continue;
            };
            backward_node(before, node, grad);
        }
        Ok(())
    }
}

/// Cell range `[lo, hi)` touched by bin `b` of `bins` equal slices of
/// `[start, end)`, clipped to `[0, extent)`.
fn bin_cells(start: f64, end: f64, b: usize, bins: usize, extent: usize) -> (usize, usize) {
    let width = (end - start) / bins as f64;
    let s = start + b as f64 * width;
    let e = start + (b + 1) as f64 * width;
    let lo = s.floor().max(0.0);
    let hi = e.ceil().min(extent as f64);
    if hi > lo {
        (lo as usize, hi as usize)
    } else {
        let centre = ((s + e) * 0.5).floor().clamp(0.0, (extent - 1) as f64) as usize;
        (centre, centre + 1)
    }
}

/// The logistic function, evaluated without overflow for any finite `x`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(nodes: &mut [Node], v: Var, f: impl FnOnce(&mut [f64])) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let n = node.value.numel();
    let g = node.grad.get_or_insert_with(|| vec![0.0; n]);
    f(g);
}

fn add_into(nodes: &mut [Node], v: Var, delta: &[f64]) {
    accumulate(nodes, v, |g| {
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    });
}

fn needs(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backward_node(nodes: &mut [Node], node: &Node, dy: &[f64]) {
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
        } => {
            let need = (
                needs(nodes, *input),
                needs(nodes, *kernel),
                bias.is_some_and(|b| needs(nodes, b)),
            );
            let grads = kernels::conv2d_backward(
                nodes[input.0].value.data(),
                nodes[kernel.0].value.data(),
                dy,
                geom,
                need,
            );
            if let Some(dx) = grads.input {
                add_into(nodes, *input, &dx);
            }
            if let Some(dk) = grads.kernel {
                add_into(nodes, *kernel, &dk);
            }
            if let (Some(b), Some(db)) = (bias, grads.bias) {
                add_into(nodes, *b, &db);
            }
        }
        Op::MaxPool { input, argmax } | Op::RoiPool { input, argmax } => {
            accumulate(nodes, *input, |g| {
                for (&src, &d) in argmax.iter().zip(dy) {
                    g[src] += d;
                }
            });
        }
        Op::AvgPool { input, geom } => {
            let dx = kernels::avg_pool_backward(dy, geom);
            add_into(nodes, *input, &dx);
        }
        Op::Relu(input) => {
            let x = nodes[input.0].value.data().to_vec();
            accumulate(nodes, *input, |g| {
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        g[i] += dy[i];
                    }
                }
            });
        }
        Op::Sigmoid { input, beta } => {
            let y = node.value.data();
            accumulate(nodes, *input, |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * beta * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::BatchNorm {
            input,
            gamma,
            shift,
            xhat,
            inv_std,
            train,
            ..
        } => {
            let [n, c, h, w] = nodes[input.0].value.dims4().expect("checked at forward");
            let plane = h * w;
            let count = (n * plane) as f64;
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * plane;
                    for i in base..base + plane {
                        sum_dy[ch] += dy[i];
                        sum_dy_xhat[ch] += dy[i] * xhat[i];
                    }
                }
            }
            if needs(nodes, *input) {
                let g = nodes[gamma.0].value.data().to_vec();
                let mut dx = vec![0.0; dy.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        let k = g[ch] * inv_std[ch];
                        for i in base..base + plane {
                            dx[i] = if *train {
                                k * (dy[i] - sum_dy[ch] / count - xhat[i] * sum_dy_xhat[ch] / count)
                            } else {
                                k * dy[i]
                            };
                        }
                    }
                }
                add_into(nodes, *input, &dx);
            }
            add_into(nodes, *gamma, &sum_dy_xhat);
            add_into(nodes, *shift, &sum_dy);
        }
        Op::Upsample2(input) => {
            let [n, c, h, w] = nodes[input.0].value.dims4().expect("checked at forward");
            let w2 = 2 * w;
            accumulate(nodes, *input, |g| {
                for p in 0..n * c {
                    for y in 0..2 * h {
                        for x in 0..w2 {
                            g[(p * h + y / 2) * w + x / 2] += dy[(p * 2 * h + y) * w2 + x];
                        }
                    }
                }
            });
        }
        Op::Add(a, b) => {
            add_into(nodes, *a, dy);
            add_into(nodes, *b, dy);
        }
        Op::Mul(a, b) => {
            if needs(nodes, *a) {
                let y = nodes[b.0].value.data();
                let d: Vec<f64> = dy.iter().zip(y).map(|(d, y)| d * y).collect();
                add_into(nodes, *a, &d);
            }
            if needs(nodes, *b) {
                let x = nodes[a.0].value.data();
                let d: Vec<f64> = dy.iter().zip(x).map(|(d, x)| d * x).collect();
                add_into(nodes, *b, &d);
            }
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let (n, d) = match nodes[input.0].value.shape() {
                &[n, d] => (n, d),
                _ => unreachable!("checked at forward"),
            };
            let k = nodes[bias.0].value.numel();
            if needs(nodes, *input) {
                let mut dx = vec![0.0; n * d];
                // dx[n, d] = dy[n, k] · Wᵀ[k, d]
                kernels::gemm(
                    n,
                    k,
                    d,
                    dy,
                    (k, 1),
                    nodes[weight.0].value.data(),
                    (1, k),
                    0.0,
                    &mut dx,
                    (d, 1),
                );
                add_into(nodes, *input, &dx);
            }
            if needs(nodes, *weight) {
                let mut dw = vec![0.0; d * k];
                // dW[d, k] = xᵀ[d, n] · dy[n, k]
                kernels::gemm(
                    d,
                    n,
                    k,
                    nodes[input.0].value.data(),
                    (1, d),
                    dy,
                    (k, 1),
                    0.0,
                    &mut dw,
                    (k, 1),
                );
                add_into(nodes, *weight, &dw);
            }
            accumulate(nodes, *bias, |g| {
                for row in dy.chunks_exact(k) {
                    for (a, b) in g.iter_mut().zip(row) {
                        *a += b;
                    }
                }
            });
        }
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let n = labels.len();
            let k = probs.len() / n;
            let scale = dy[0] / n as f64;
            accumulate(nodes, *logits, |g| {
                for r in 0..n {
                    for j in 0..k {
                        let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                        g[r * k + j] += scale * (probs[r * k + j] - onehot);
                    }
                }
            });
        }
        Op::Sum(input) => {
            let d = dy[0];
            accumulate(nodes, *input, |g| g.iter_mut().for_each(|v| *v += d));
        }
        Op::Scale(input, factor) => {
            accumulate(nodes, *input, |g| {
                for (a, d) in g.iter_mut().zip(dy) {
                    *a += factor * d;
                }
            });
        }
        Op::Reshape(input) => add_into(nodes, *input, dy),
        Op::SigmoidBce {
            logits,
            indices,
            targets,
        } => {
            let z = nodes[logits.0].value.data().to_vec();
            let scale = dy[0] / indices.len().max(1) as f64;
            accumulate(nodes, *logits, |g| {
                for (&i, &t) in indices.iter().zip(targets) {
                    g[i] += scale * (sigmoid(z[i]) - t);
                }
            });
        }
        Op::SmoothL1 {
            input,
            indices,
            targets,
            beta,
            norm,
        } => {
            let x = nodes[input.0].value.data().to_vec();
            let scale = dy[0] / norm;
            accumulate(nodes, *input, |g| {
                for (&i, &t) in indices.iter().zip(targets) {
                    let d = x[i] - t;
                    let slope = if d.abs() < *beta { d / beta } else { d.signum() };
                    g[i] += scale * slope;
                }
            });
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.numel();
                add_into(nodes, p, &dy[offset..offset + len]);
                offset += len;
            }
        }
    }
}
