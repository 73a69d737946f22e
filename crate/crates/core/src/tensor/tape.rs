use super::kernels::{self, ConvGeom, PoolGeom};
use super::{strides, Tensor};
use crate::error::{ensure, Result};

/// Added under the square root of [`Unary::SqrtEps`] so its derivative stays
/// finite at zero.
pub const SQRT_EPS: f64 = 1e-12;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    Exp,
    /// `sqrt(x + SQRT_EPS)`; inputs must be non-negative.
    SqrtEps,
    Negate,
    AddScalar(f64),
    MulScalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    Add,
    ConcatChannels,
    UpsampleNearest(usize),
}

/// Per-channel running statistics carried by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    MaxPool { input: Var, argmax: Vec<usize> },
    AvgPool { input: Var, geom: PoolGeom },
    /// `index[i]` is the output element that input element `i` folds into.
    ReduceMean { input: Var, index: Vec<usize>, count: usize },
    /// `index[j]` is the input element that output element `j` copies.
    Broadcast { input: Var, index: Vec<usize> },
    Sum { input: Var },
    Reshape { input: Var },
    Unary { input: Var, f: Unary },
    Add { lhs: Var, rhs: Var },
    Sub { lhs: Var, rhs: Var },
    Mul { lhs: Var, rhs: Var },
    Linear { input: Var, weight: Var, bias: Var, batch: usize, features: usize, outputs: usize },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
        dims: [usize; 3],
    },
    Concat { inputs: Vec<(Var, usize)>, batch: usize, plane: usize },
    Upsample { input: Var, factor: usize, dims: [usize; 3] },
    Pad { input: Var, pad: usize, dims: [usize; 3] },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation and differentiates it in reverse.
///
/// A tape is built for one forward pass and then dropped; it never outlives
/// a training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Records `tensor` as a leaf; it collects gradients iff `requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, tensor.requires_grad)
    }

    /// Records a leaf that takes ownership of its values.
    pub fn leaf_from(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        ensure!(numel == data.len(), "shape {shape:?} does not hold {} values", data.len());
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Smallest `|x|` over every input of every relu on the tape, or `None`
    /// without relus. Finite-difference checks are only meaningful when this
    /// comfortably exceeds the step size.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Unary { input, f: Unary::Relu } => {
                    Some(self.nodes[input.0].value.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())))
                }
                _ => None,
            })
            .reduce(f64::min)
    }

    /// Copies a node out as a standalone tensor, including its gradient.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor {
            shape: node.shape.clone(),
            data: node.value.clone(),
            requires_grad: node.requires_grad,
            grad: self.grad(v).map(<[f64]>::to_vec),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        ensure!(xs.len() == 4, "conv2d input must be [B,C,H,W], got {xs:?}");
        ensure!(ws.len() == 4, "conv2d weight must be [Cout,Cin/groups,kh,kw], got {ws:?}");
        ensure!(stride >= 1 && groups >= 1, "conv2d stride and groups must be positive");
        let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        ensure!(cin % groups == 0, "in channels {cin} not divisible by groups {groups}");
        ensure!(cout % groups == 0, "out channels {cout} not divisible by groups {groups}");
        ensure!(cin_g * groups == cin, "weight expects {} input channels, input has {cin}", cin_g * groups);
        ensure!(
            kh >= 1 && kw >= 1 && kh <= h + 2 * padding && kw <= w + 2 * padding,
            "kernel {kh}x{kw} does not fit {h}x{w} input with padding {padding}"
        );
        if let Some(b) = bias {
            ensure!(self.shape(b) == [cout], "conv2d bias must be [{cout}], got {:?}", self.shape(b));
        }
        let geom = ConvGeom {
            batch,
            in_channels: cin,
            height: h,
            width: w,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            groups,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            vec![batch, cout, geom.out_h, geom.out_w],
            out,
            Op::Conv2d { input, weight, bias, geom },
            rg,
        ))
    }

    pub fn pool2d(&mut self, input: Var, kind: PoolKind, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(input);
        ensure!(xs.len() == 4, "pool2d input must be [B,C,H,W], got {xs:?}");
        ensure!(kernel >= 1 && stride >= 1, "pool2d kernel and stride must be positive");
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        ensure!(kernel <= h && kernel <= w, "pool kernel {kernel} larger than {h}x{w} input");
        let geom = PoolGeom {
            planes: b * c,
            height: h,
            width: w,
            kernel,
            stride,
            out_h: (h - kernel) / stride + 1,
            out_w: (w - kernel) / stride + 1,
        };
        let shape = vec![b, c, geom.out_h, geom.out_w];
        let rg = self.any_grad(&[input]);
        Ok(match kind {
            PoolKind::Max => {
                let (out, argmax) = kernels::max_pool_forward(&geom, self.value(input));
                self.push(shape, out, Op::MaxPool { input, argmax }, rg)
            }
            PoolKind::Avg => {
                let out = kernels::avg_pool_forward(&geom, self.value(input));
                self.push(shape, out, Op::AvgPool { input, geom }, rg)
            }
        })
    }

    /// Mean over `axes`, which are removed from the shape.
    pub fn reduce_mean(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            ensure!(a < shape.len(), "axis {a} out of range for shape {shape:?}");
            reduced[a] = true;
        }
        let out_shape: Vec<usize> =
            shape.iter().zip(&reduced).filter(|(_, r)| !**r).map(|(d, _)| *d).collect();
        let count: usize = shape.iter().zip(&reduced).filter(|(_, r)| **r).map(|(d, _)| *d).product();
        ensure!(count > 0 || self.value(input).is_empty(), "mean over an empty extent");
        let index = fold_index(&shape, &reduced);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&o, &v) in index.iter().zip(self.value(input)) {
            out[o] += v;
        }
        let inv = 1.0 / count.max(1) as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.any_grad(&[input]);
        Ok(self.push(out_shape, out, Op::ReduceMean { input, index, count }, rg))
    }

    /// Repeats size-1 axes of `input` to match `shape` (same rank).
    pub fn broadcast_to(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(input).to_vec();
        ensure!(from.len() == shape.len(), "cannot broadcast {from:?} to {shape:?}");
        for (f, t) in from.iter().zip(shape) {
            ensure!(f == t || *f == 1, "cannot broadcast {from:?} to {shape:?}");
        }
        let in_strides = strides(&from);
        let out_strides = strides(shape);
        let numel: usize = shape.iter().product();
        let index: Vec<usize> = (0..numel)
            .map(|j| {
                (0..shape.len())
                    .map(|a| if from[a] == 1 { 0 } else { (j / out_strides[a]) % shape[a] * in_strides[a] })
                    .sum()
            })
            .collect();
        let src = self.value(input);
        let out = index.iter().map(|&i| src[i]).collect();
        let rg = self.any_grad(&[input]);
        Ok(self.push(shape.to_vec(), out, Op::Broadcast { input, index }, rg))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().sum();
        let rg = self.any_grad(&[input]);
        self.push(Vec::new(), vec![s], Op::Sum { input }, rg)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        ensure!(
            numel == self.value(input).len(),
            "cannot reshape {:?} into {shape:?}",
            self.shape(input)
        );
        let out = self.value(input).to_vec();
        let rg = self.any_grad(&[input]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { input }, rg))
    }

    pub fn elementwise(&mut self, input: Var, f: Unary) -> Result<Var> {
        let x = self.value(input);
        let out: Vec<f64> = match f {
            // NaN passes through so non-finite values are not masked
            Unary::Relu => x.iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect(),
            Unary::Exp => x.iter().map(|&v| v.exp()).collect(),
            Unary::SqrtEps => {
                ensure!(!x.iter().any(|&v| v < 0.0), "sqrt_eps of a negative value");
                x.iter().map(|&v| (v + SQRT_EPS).sqrt()).collect()
            }
            Unary::Negate => x.iter().map(|&v| -v).collect(),
            Unary::AddScalar(s) => x.iter().map(|&v| v + s).collect(),
            Unary::MulScalar(s) => x.iter().map(|&v| v * s).collect(),
        };
        let shape = self.shape(input).to_vec();
        let rg = self.any_grad(&[input]);
        Ok(self.push(shape, out, Op::Unary { input, f }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.elementwise(input, Unary::Relu).expect("relu is total")
    }

    pub fn exp(&mut self, input: Var) -> Var {
        self.elementwise(input, Unary::Exp).expect("exp is total")
    }

    pub fn negate(&mut self, input: Var) -> Var {
        self.elementwise(input, Unary::Negate).expect("negate is total")
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        self.elementwise(input, Unary::MulScalar(factor)).expect("scaling is total")
    }

    fn binary_shapes(&self, lhs: Var, rhs: Var, what: &str) -> Result<Vec<usize>> {
        ensure!(
            self.shape(lhs) == self.shape(rhs),
            "{what} needs identical shapes, got {:?} and {:?}",
            self.shape(lhs),
            self.shape(rhs)
        );
        Ok(self.shape(lhs).to_vec())
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let shape = self.binary_shapes(lhs, rhs, "add")?;
        let out = self.value(lhs).iter().zip(self.value(rhs)).map(|(a, b)| a + b).collect();
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(shape, out, Op::Add { lhs, rhs }, rg))
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let shape = self.binary_shapes(lhs, rhs, "sub")?;
        let out = self.value(lhs).iter().zip(self.value(rhs)).map(|(a, b)| a - b).collect();
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(shape, out, Op::Sub { lhs, rhs }, rg))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let shape = self.binary_shapes(lhs, rhs, "mul")?;
        let out = self.value(lhs).iter().zip(self.value(rhs)).map(|(a, b)| a * b).collect();
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(shape, out, Op::Mul { lhs, rhs }, rg))
    }

    /// `input [B,F] · weightᵀ [F,O] + bias [O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        ensure!(xs.len() == 2 && ws.len() == 2, "linear expects [B,F] input and [O,F] weight");
        ensure!(xs[1] == ws[1], "linear: input has {} features, weight expects {}", xs[1], ws[1]);
        ensure!(bs == [ws[0]], "linear bias must be [{}], got {bs:?}", ws[0]);
        let (batch, features, outputs) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(batch * outputs);
        for _ in 0..batch {
            out.extend_from_slice(self.value(bias));
        }
        kernels::gemm(
            batch,
            features,
            outputs,
            self.value(input),
            (features, 1),
            self.value(weight),
            (1, features),
            1.0,
            &mut out,
            (outputs, 1),
        );
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            vec![batch, outputs],
            out,
            Op::Linear { input, weight, bias, batch, features, outputs },
            rg,
        ))
    }

    /// Per-channel batch normalization. In training mode the batch statistics
    /// normalize the input and are folded into `stats`; otherwise `stats` is
    /// used as-is.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        training: bool,
    ) -> Result<Var> {
        let xs = self.shape(input);
        ensure!(xs.len() == 4, "batch_norm2d input must be [B,C,H,W], got {xs:?}");
        let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        ensure!(b * plane >= 1, "batch_norm2d needs at least one value per channel");
        ensure!(self.shape(gamma) == [c] && self.shape(beta) == [c], "batch_norm2d affine must be [{c}]");
        ensure!(stats.mean.len() == c && stats.var.len() == c, "running stats do not match {c} channels");
        let x = self.value(input);
        let n = (b * plane) as f64;
        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    mean[ci] += x[(bi * c + ci) * plane..][..plane].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            for bi in 0..b {
                for ci in 0..c {
                    let m = mean[ci];
                    var[ci] += x[(bi * c + ci) * plane..][..plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            // running variance tracks the unbiased estimate
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for ci in 0..c {
                stats.mean[ci] = (1.0 - BN_MOMENTUM) * stats.mean[ci] + BN_MOMENTUM * mean[ci];
                stats.var[ci] = (1.0 - BN_MOMENTUM) * stats.var[ci] + BN_MOMENTUM * var[ci] * unbias;
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut normalized = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                for i in off..off + plane {
                    let xh = (x[i] - mean[ci]) * inv_std[ci];
                    normalized[i] = xh;
                    out[i] = g[ci] * xh + bt[ci];
                }
            }
        }
        let shape = self.shape(input).to_vec();
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            Op::BatchNorm { input, gamma, beta, normalized, inv_std, training, dims: [b, c, plane] },
            rg,
        ))
    }

    pub fn combine(&mut self, inputs: &[Var], kind: Combine) -> Result<Var> {
        match kind {
            Combine::Add => {
                ensure!(inputs.len() == 2, "add combines exactly two tensors");
                self.add(inputs[0], inputs[1])
            }
            Combine::ConcatChannels => self.concat_channels(inputs),
            Combine::UpsampleNearest(factor) => {
                ensure!(inputs.len() == 1, "upsample takes exactly one tensor");
                self.upsample_nearest(inputs[0], factor)
            }
        }
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        ensure!(!inputs.is_empty(), "concat of zero tensors");
        let first = self.shape(inputs[0]).to_vec();
        ensure!(first.len() == 4, "concat_channels expects [B,C,H,W] tensors");
        let mut parts = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            ensure!(
                s.len() == 4 && s[0] == first[0] && s[2] == first[2] && s[3] == first[3],
                "concat_channels shape mismatch: {first:?} vs {s:?}"
            );
            parts.push((v, s[1]));
        }
        let (batch, plane) = (first[0], first[2] * first[3]);
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut out = Vec::with_capacity(batch * total * plane);
        for b in 0..batch {
            for &(v, c) in &parts {
                out.extend_from_slice(&self.value(v)[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            vec![batch, total, first[2], first[3]],
            out,
            Op::Concat { inputs: parts, batch, plane },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling: each pixel becomes a `factor×factor` block.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let s = self.shape(input);
        ensure!(s.len() == 4, "upsample expects [B,C,H,W], got {s:?}");
        ensure!(factor >= 1, "upsample factor must be positive");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let shape = vec![s[0], s[1], h * factor, w * factor];
        let x = self.value(input);
        let ow = w * factor;
        let mut out = vec![0.0; planes * h * w * factor * factor];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h * w * factor * factor..(p + 1) * h * w * factor * factor];
            for y in 0..h * factor {
                for xo in 0..ow {
                    dst[y * ow + xo] = src[(y / factor) * w + xo / factor];
                }
            }
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(shape, out, Op::Upsample { input, factor, dims: [planes, h, w] }, rg))
    }

    /// Zero padding on both spatial axes.
    pub fn pad2d(&mut self, input: Var, pad: usize) -> Result<Var> {
        let s = self.shape(input);
        ensure!(s.len() == 4, "pad2d expects [B,C,H,W], got {s:?}");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let shape = vec![s[0], s[1], ph, pw];
        let x = self.value(input);
        let mut out = vec![0.0; planes * ph * pw];
        for p in 0..planes {
            for y in 0..h {
                let dst = (p * ph + y + pad) * pw + pad;
                out[dst..dst + w].copy_from_slice(&x[(p * h + y) * w..][..w]);
            }
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(shape, out, Op::Pad { input, pad, dims: [planes, h, w] }, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        ensure!(s.len() == 2, "logits must be [B,K], got {s:?}");
        let (batch, classes) = (s[0], s[1]);
        ensure!(batch >= 1, "cross entropy over an empty batch");
        ensure!(labels.len() == batch, "{} labels for a batch of {batch}", labels.len());
        for &l in labels {
            ensure!(l < classes, "label {l} out of range for {classes} classes");
        }
        let z = self.value(logits);
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for b in 0..batch {
            let row = &z[b * classes..(b + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_norm = max + sum_exp.ln();
            loss += log_norm - row[labels[b]];
            for k in 0..classes {
                probs[b * classes + k] = (row[k] - log_norm).exp();
            }
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss / batch as f64],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Afterwards every leaf that requires
    /// a gradient and feeds `loss` has one via [`Tape::grad`]; leaves that do
    /// not feed it report `None`. Intermediate gradients are released.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(
            self.nodes[loss.0].value.len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.nodes[loss.0].shape
        );
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_node(i, &g);
        }
        Ok(())
    }

    fn take_slot(&mut self, v: Var) -> Option<Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[v.0].take().unwrap_or_else(|| vec![0.0; len]))
    }

    fn put_slot(&mut self, v: Var, buf: Option<Vec<f64>>) {
        if let Some(buf) = buf {
            self.grads[v.0] = Some(buf);
        }
    }

    /// Applies `f` to the gradient buffer of `v` if it participates.
    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[f64])) {
        if let Some(mut buf) = self.take_slot(v) {
            f(&mut buf, &self.nodes[v.0].value);
            self.grads[v.0] = Some(buf);
        }
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        // Ops are moved out temporarily so their saved buffers can be read
        // while gradient slots are mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let mut gx = self.take_slot(*input);
                let mut gw = self.take_slot(*weight);
                let mut gb = bias.and_then(|b| self.take_slot(b));
                kernels::conv2d_backward(
                    geom,
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.put_slot(*input, gx);
                self.put_slot(*weight, gw);
                if let Some(b) = bias {
                    self.put_slot(*b, gb);
                }
            }
            Op::MaxPool { input, argmax, .. } => self.accumulate(*input, |gx, _| {
                for (&src, &d) in argmax.iter().zip(g) {
                    gx[src] += d;
                }
            }),
            Op::AvgPool { input, geom } => {
                self.accumulate(*input, |gx, _| kernels::avg_pool_backward(geom, g, gx))
            }
            Op::ReduceMean { input, index, count } => {
                let inv = 1.0 / (*count).max(1) as f64;
                self.accumulate(*input, |gx, _| {
                    for (dst, &o) in gx.iter_mut().zip(index) {
                        *dst += g[o] * inv;
                    }
                })
            }
            Op::Broadcast { input, index } => self.accumulate(*input, |gx, _| {
                for (&src, &d) in index.iter().zip(g) {
                    gx[src] += d;
                }
            }),
            Op::Sum { input } => self.accumulate(*input, |gx, _| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Reshape { input } => self.accumulate(*input, |gx, _| add_into(gx, g)),
            Op::Unary { input, f } => {
                let out = std::mem::take(&mut self.nodes[i].value);
                self.accumulate(*input, |gx, x| match *f {
                    Unary::Relu => {
                        for ((d, &xv), &gv) in gx.iter_mut().zip(x).zip(g) {
                            if xv > 0.0 {
                                *d += gv;
                            }
                        }
                    }
                    Unary::Exp => {
                        for ((d, &y), &gv) in gx.iter_mut().zip(&out).zip(g) {
                            *d += gv * y;
                        }
                    }
                    Unary::SqrtEps => {
                        for ((d, &y), &gv) in gx.iter_mut().zip(&out).zip(g) {
                            *d += gv * 0.5 / y;
                        }
                    }
                    Unary::Negate => gx.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv),
                    Unary::AddScalar(_) => add_into(gx, g),
                    Unary::MulScalar(s) => gx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * s),
                });
                self.nodes[i].value = out;
            }
            Op::Add { lhs, rhs } => {
                self.accumulate(*lhs, |gx, _| add_into(gx, g));
                self.accumulate(*rhs, |gx, _| add_into(gx, g));
            }
            Op::Sub { lhs, rhs } => {
                self.accumulate(*lhs, |gx, _| add_into(gx, g));
                self.accumulate(*rhs, |gx, _| gx.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv));
            }
            Op::Mul { lhs, rhs } => {
                let rv = self.nodes[rhs.0].value.clone();
                self.accumulate(*lhs, |gx, _| {
                    for ((d, &r), &gv) in gx.iter_mut().zip(&rv).zip(g) {
                        *d += gv * r;
                    }
                });
                let lv = self.nodes[lhs.0].value.clone();
                self.accumulate(*rhs, |gx, _| {
                    for ((d, &l), &gv) in gx.iter_mut().zip(&lv).zip(g) {
                        *d += gv * l;
                    }
                });
            }
            Op::Linear { input, weight, bias, batch, features, outputs } => {
                let (b, f, o) = (*batch, *features, *outputs);
                let mut gx = self.take_slot(*input);
                let mut gw = self.take_slot(*weight);
                if let Some(gx) = gx.as_deref_mut() {
                    kernels::gemm(b, o, f, g, (o, 1), &self.nodes[weight.0].value, (f, 1), 1.0, gx, (f, 1));
                }
                if let Some(gw) = gw.as_deref_mut() {
                    kernels::gemm(o, b, f, g, (1, o), &self.nodes[input.0].value, (f, 1), 1.0, gw, (f, 1));
                }
                self.put_slot(*input, gx);
                self.put_slot(*weight, gw);
                self.accumulate(*bias, |gb, _| {
                    for row in g.chunks(o) {
                        add_into(gb, row);
                    }
                });
            }
            Op::BatchNorm { input, gamma, beta, normalized, inv_std, training, dims } => {
                let [b, c, plane] = *dims;
                let n = (b * plane) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * plane;
                        for k in off..off + plane {
                            dgamma[ci] += g[k] * normalized[k];
                            dbeta[ci] += g[k];
                        }
                    }
                }
                let gamma_v = self.nodes[gamma.0].value.clone();
                self.accumulate(*input, |gx, _| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * plane;
                            let scale = gamma_v[ci] * inv_std[ci];
                            for k in off..off + plane {
                                gx[k] += if *training {
                                    // dx̂ = g·γ; dx = (N·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂))·inv_std / N
                                    scale * (g[k] - (dbeta[ci] + normalized[k] * dgamma[ci]) / n)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                });
                self.accumulate(*gamma, |gg, _| add_into(gg, &dgamma));
                self.accumulate(*beta, |gb, _| add_into(gb, &dbeta));
            }
            Op::Concat { inputs, batch, plane } => {
                let total: usize = inputs.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(v, c) in inputs {
                    self.accumulate(v, |gx, _| {
                        for b in 0..*batch {
                            let src = &g[(b * total + offset) * plane..][..c * plane];
                            add_into(&mut gx[b * c * plane..(b + 1) * c * plane], src);
                        }
                    });
                    offset += c;
                }
            }
            Op::Upsample { input, factor, dims } => {
                let [planes, h, w] = *dims;
                let f = *factor;
                let ow = w * f;
                self.accumulate(*input, |gx, _| {
                    for p in 0..planes {
                        let src = &g[p * h * w * f * f..(p + 1) * h * w * f * f];
                        let dst = &mut gx[p * h * w..(p + 1) * h * w];
                        for y in 0..h * f {
                            for xo in 0..ow {
                                dst[(y / f) * w + xo / f] += src[y * ow + xo];
                            }
                        }
                    }
                })
            }
            Op::Pad { input, pad, dims } => {
                let [planes, h, w] = *dims;
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                self.accumulate(*input, |gx, _| {
                    for p in 0..planes {
                        for y in 0..h {
                            let src = (p * ph + y + pad) * pw + pad;
                            add_into(&mut gx[(p * h + y) * w..][..w], &g[src..src + w]);
                        }
                    }
                })
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / batch as f64;
                self.accumulate(*logits, |gx, _| {
                    for (b, &label) in labels.iter().enumerate() {
                        for k in 0..classes {
                            let target = if k == label { 1.0 } else { 0.0 };
                            gx[b * classes + k] += scale * (probs[b * classes + k] - target);
                        }
                    }
                })
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// For each flat index of `shape`, the flat index it maps to once the axes
/// flagged in `reduced` are dropped.
fn fold_index(shape: &[usize], reduced: &[bool]) -> Vec<usize> {
    let in_strides = strides(shape);
    let kept: Vec<usize> = shape.iter().zip(reduced).filter(|(_, r)| !**r).map(|(d, _)| *d).collect();
    let kept_strides = strides(&kept);
    let numel: usize = shape.iter().product();
    (0..numel)
        .map(|i| {
            let mut k = 0;
            let mut out = 0;
            for a in 0..shape.len() {
                if !reduced[a] {
                    out += (i / in_strides[a]) % shape[a] * kept_strides[k];
                    k += 1;
                }
            }
            out
        })
        .collect()
}
