//! Dense NCHW tensors with reverse-mode automatic differentiation.
//!
//! The engine is a Wengert tape: forward ops append nodes in creation order
//! (which is therefore topological), backward walks the list in reverse and
//! applies each op's adjoint. Node values are held behind `Arc` so a graph's
//! parameter buffers can be registered on a tape without copying; later
//! parameter updates copy-on-write and leave live tapes intact.
//!
//! Everything is f64. The op set is exactly what the encoder-decoder
//! networks and the receptive-field probe need, plus a few scalar helpers
//! for composing losses.

mod kernels;

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

/// NCHW extents. Kernel tensors reuse this as (Cout, Cin, k, k).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// A plain tensor value detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn zeros(shape: Shape) -> Self {
        TensorData {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn filled(shape: Shape, v: f64) -> Self {
        TensorData {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::BadOperand {
                op: "from_vec",
                msg: format!("data length {} != numel of {}", data.len(), shape),
            });
        }
        Ok(TensorData { shape, data })
    }

    /// Unit-Gaussian noise, deterministic per rng state.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let dist = rand_distr::StandardNormal;
        TensorData {
            shape,
            data: (0..shape.numel())
                .map(|_| rand::Rng::sample(rng, dist))
                .collect(),
        }
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.at(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.shape.at(n, c, y, x);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a tape. Cheap to copy; the data lives on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Tensor {
    pub id: usize,
    pub shape: Shape,
}

/// Forward execution mode. Train uses batch statistics and active dropout;
/// eval uses running statistics and identity dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel normalization statistics carried across forward passes.
#[derive(Clone, Debug)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn identity(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }
}

const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
struct BnSaved {
    mode: Mode,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { stride: usize, padding: usize },
    MaxPool2d { argmax: Vec<u32> },
    AvgPool2d,
    Upsample2x,
    BatchNorm(BnSaved),
    Relu,
    Dropout { mask: Arc<Vec<f64>> },
    Add,
    ConcatChannels { widths: Vec<usize> },
    Sigmoid,
    SoftmaxChannels,
    Sum,
    WeightedSum { weights: Arc<Vec<f64>> },
    Affine { a: f64 },
    Div,
    LnClamped { floor: f64 },
    SquareSum,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    shape: Shape,
    value: Arc<Vec<f64>>,
    grad: Option<Vec<f64>>,
    is_param: bool,
}

/// Gradient tape. Owns every value produced during one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, shape: Shape, value: Vec<f64>) -> Tensor {
        self.push_arc(op, inputs, shape, Arc::new(value), false)
    }

    fn push_arc(
        &mut self,
        op: Op,
        inputs: Vec<usize>,
        shape: Shape,
        value: Arc<Vec<f64>>,
        is_param: bool,
    ) -> Tensor {
        debug_assert_eq!(value.len(), shape.numel());
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
            grad: None,
            is_param,
        });
        Tensor { id, shape }
    }

    /// Register an owned value as a leaf (an input or a constant).
    pub fn leaf(&mut self, data: TensorData) -> Tensor {
        self.push(Op::Leaf, vec![], data.shape, data.data)
    }

    /// Register a shared buffer as a leaf. `is_param` marks trainable
    /// parameters; probe backward passes skip gradient accumulation there.
    pub fn leaf_shared(&mut self, shape: Shape, data: Arc<Vec<f64>>, is_param: bool) -> Tensor {
        self.push_arc(Op::Leaf, vec![], shape, data, is_param)
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].value
    }

    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.nodes[t.id].grad.as_deref()
    }

    pub fn to_data(&self, t: Tensor) -> TensorData {
        TensorData {
            shape: t.shape,
            data: self.nodes[t.id].value.as_ref().clone(),
        }
    }

    /// The value of a scalar (1x1x1x1) node.
    pub fn scalar_value(&self, t: Tensor) -> f64 {
        debug_assert_eq!(t.shape.numel(), 1);
        self.nodes[t.id].value[0]
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// Cross-correlation with square odd kernel; weight shape (Cout, Cin, k, k),
    /// bias shape (1, Cout, 1, 1).
    pub fn conv2d(
        &mut self,
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let xs = input.shape;
        let ws = weight.shape;
        if ws.h != ws.w || ws.h % 2 == 0 {
            return Err(Error::BadOperand {
                op: "conv2d",
                msg: format!("kernel must be square with odd side, got {}x{}", ws.h, ws.w),
            });
        }
        if xs.c != ws.c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                axis: "input channels",
                expected: ws.c,
                got: xs.c,
            });
        }
        if bias.shape.c != ws.n || bias.shape.numel() != ws.n {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                axis: "bias channels",
                expected: ws.n,
                got: bias.shape.c,
            });
        }
        if stride == 0 {
            return Err(Error::BadOperand {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let k = ws.h;
        let oh = (xs.h + 2 * padding).checked_sub(k).map(|v| v / stride + 1);
        let ow = (xs.w + 2 * padding).checked_sub(k).map(|v| v / stride + 1);
        let (oh, ow) = match (oh, ow) {
            (Some(h), Some(w)) if h >= 1 && w >= 1 => (h, w),
            _ => {
                return Err(Error::BadOperand {
                    op: "conv2d",
                    msg: format!("kernel {k} exceeds padded input {}x{}", xs.h, xs.w),
                })
            }
        };
        let os = Shape::new(xs.n, ws.n, oh, ow);
        let mut out = vec![0.0; os.numel()];
        kernels::conv2d_forward(
            self.value(input),
            xs,
            self.value(weight),
            ws,
            self.value(bias),
            stride,
            padding,
            &mut out,
            os,
        );
        Ok(self.push(
            Op::Conv2d { stride, padding },
            vec![input.id, weight.id, bias.id],
            os,
            out,
        ))
    }

    /// 2x2 max pooling with stride 2. Ties go to the first element in scan
    /// order so backward routing is deterministic.
    pub fn max_pool2d(&mut self, input: Tensor) -> Result<Tensor> {
        let xs = input.shape;
        if xs.h % 2 != 0 || xs.w % 2 != 0 {
            return Err(Error::BadOperand {
                op: "max_pool2d",
                msg: format!("spatial dims {}x{} must be even; pad the input first", xs.h, xs.w),
            });
        }
        let os = Shape::new(xs.n, xs.c, xs.h / 2, xs.w / 2);
        debug_assert!(xs.numel() < u32::MAX as usize);
        let x = self.value(input);
        let mut out = vec![0.0; os.numel()];
        let mut argmax = vec![0u32; os.numel()];
        let plane = xs.h * xs.w;
        for nc in 0..xs.n * xs.c {
            let src = &x[nc * plane..(nc + 1) * plane];
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best_idx = (2 * oy) * xs.w + 2 * ox;
                    let mut best = src[best_idx];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * xs.w + 2 * ox + dx;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                    let o = (nc * os.h + oy) * os.w + ox;
                    out[o] = best;
                    argmax[o] = (nc * plane + best_idx) as u32;
                }
            }
        }
        Ok(self.push(Op::MaxPool2d { argmax }, vec![input.id], os, out))
    }

    /// 2x2 average pooling with stride 2. Linear; stands in for max pooling
    /// in linearized probe copies of a network.
    pub fn avg_pool2d(&mut self, input: Tensor) -> Result<Tensor> {
        let xs = input.shape;
        if xs.h % 2 != 0 || xs.w % 2 != 0 {
            return Err(Error::BadOperand {
                op: "avg_pool2d",
                msg: format!("spatial dims {}x{} must be even; pad the input first", xs.h, xs.w),
            });
        }
        let os = Shape::new(xs.n, xs.c, xs.h / 2, xs.w / 2);
        let x = self.value(input);
        let mut out = vec![0.0; os.numel()];
        let plane = xs.h * xs.w;
        for nc in 0..xs.n * xs.c {
            let src = &x[nc * plane..(nc + 1) * plane];
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let base = (2 * oy) * xs.w + 2 * ox;
                    let s = src[base] + src[base + 1] + src[base + xs.w] + src[base + xs.w + 1];
                    out[(nc * os.h + oy) * os.w + ox] = 0.25 * s;
                }
            }
        }
        Ok(self.push(Op::AvgPool2d, vec![input.id], os, out))
    }

    /// Bilinear 2x upsampling, align_corners = false. Linear, exact adjoint.
    pub fn upsample_bilinear2x(&mut self, input: Tensor) -> Tensor {
        let xs = input.shape;
        let os = Shape::new(xs.n, xs.c, xs.h * 2, xs.w * 2);
        let mut out = vec![0.0; os.numel()];
        kernels::upsample2x_forward(self.value(input), xs, &mut out, os);
        self.push(Op::Upsample2x, vec![input.id], os, out)
    }

    /// Batch normalization over (N, H, W) per channel. Train mode normalizes
    /// by batch statistics and folds them into `running` (momentum update,
    /// unbiased variance); eval mode normalizes by `running`.
    pub fn batch_norm2d(
        &mut self,
        input: Tensor,
        gamma: Tensor,
        beta: Tensor,
        running: &mut RunningStats,
        mode: Mode,
    ) -> Result<Tensor> {
        let xs = input.shape;
        let c = xs.c;
        for (t, name) in [(gamma, "gamma channels"), (beta, "beta channels")] {
            if t.shape.c != c || t.shape.numel() != c {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm2d",
                    axis: name,
                    expected: c,
                    got: t.shape.c,
                });
            }
        }
        let m = xs.n * xs.h * xs.w;
        if mode == Mode::Train && m < 2 {
            return Err(Error::BadOperand {
                op: "batch_norm2d",
                msg: format!("train mode needs N*H*W >= 2 per channel, got {m}"),
            });
        }
        let x = self.value(input);
        let (mean, var) = match mode {
            Mode::Train => kernels::bn_moments(x, xs),
            Mode::Eval => (running.mean.clone(), running.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        if mode == Mode::Train {
            let unbias = m as f64 / (m as f64 - 1.0);
            let mom = running.momentum;
            for ch in 0..c {
                running.mean[ch] = (1.0 - mom) * running.mean[ch] + mom * mean[ch];
                running.var[ch] = (1.0 - mom) * running.var[ch] + mom * var[ch] * unbias;
            }
        }
        let mut out = vec![0.0; xs.numel()];
        kernels::bn_normalize(
            self.value(input),
            xs,
            &mean,
            &inv_std,
            self.value(gamma),
            self.value(beta),
            &mut out,
        );
        Ok(self.push(
            Op::BatchNorm(BnSaved { mode, mean, inv_std }),
            vec![input.id, gamma.id, beta.id],
            xs,
            out,
        ))
    }

    pub fn relu(&mut self, input: Tensor) -> Tensor {
        let out: Vec<f64> = self.value(input).iter().map(|v| v.max(0.0)).collect();
        self.push(Op::Relu, vec![input.id], input.shape, out)
    }

    /// Inverted dropout: train mode zeroes each element with probability
    /// `rate` and scales survivors by 1/(1-rate); eval mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Tensor,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::BadOperand {
                op: "dropout",
                msg: format!("rate must be in [0, 1), got {rate}"),
            });
        }
        if mode == Mode::Eval || rate == 0.0 {
            let value = self.nodes[input.id].value.clone();
            let mask = Arc::new(vec![1.0; input.shape.numel()]);
            return Ok(self.push_arc(Op::Dropout { mask }, vec![input.id], input.shape, value, false));
        }
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..input.shape.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let out: Vec<f64> = self
            .value(input)
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        Ok(self.push(
            Op::Dropout { mask: Arc::new(mask) },
            vec![input.id],
            input.shape,
            out,
        ))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::BadOperand {
                op: "add",
                msg: format!("shapes differ: {} vs {}", a.shape, b.shape),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add, vec![a.id, b.id], a.shape, out))
    }

    pub fn concat_channels(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::BadOperand {
            op: "concat_channels",
            msg: "empty part list".into(),
        })?;
        let (n, h, w) = (first.shape.n, first.shape.h, first.shape.w);
        for (axis, get) in [("batch", 0usize), ("height", 2), ("width", 3)] {
            for p in parts {
                let v = [p.shape.n, p.shape.c, p.shape.h, p.shape.w][get];
                let e = [n, 0, h, w][get];
                if v != e {
                    return Err(Error::ShapeMismatch {
                        op: "concat_channels",
                        axis,
                        expected: e,
                        got: v,
                    });
                }
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.shape.c).collect();
        let c_total: usize = widths.iter().sum();
        let os = Shape::new(n, c_total, h, w);
        let plane = h * w;
        let mut out = vec![0.0; os.numel()];
        for nb in 0..n {
            let mut c_off = 0;
            for p in parts {
                let pc = p.shape.c;
                let src = &self.value(*p)[nb * pc * plane..(nb + 1) * pc * plane];
                out[(nb * c_total + c_off) * plane..(nb * c_total + c_off + pc) * plane]
                    .copy_from_slice(src);
                c_off += pc;
            }
        }
        Ok(self.push(
            Op::ConcatChannels { widths },
            parts.iter().map(|p| p.id).collect(),
            os,
            out,
        ))
    }

    pub fn sigmoid(&mut self, input: Tensor) -> Tensor {
        let out: Vec<f64> = self
            .value(input)
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.push(Op::Sigmoid, vec![input.id], input.shape, out)
    }

    /// Softmax over the channel axis at every (n, h, w).
    pub fn softmax_channels(&mut self, input: Tensor) -> Tensor {
        let xs = input.shape;
        let x = self.value(input);
        let mut out = vec![0.0; xs.numel()];
        let plane = xs.h * xs.w;
        for n in 0..xs.n {
            for p in 0..plane {
                let mut mx = f64::NEG_INFINITY;
                for c in 0..xs.c {
                    mx = mx.max(x[(n * xs.c + c) * plane + p]);
                }
                let mut z = 0.0;
                for c in 0..xs.c {
                    let e = (x[(n * xs.c + c) * plane + p] - mx).exp();
                    out[(n * xs.c + c) * plane + p] = e;
                    z += e;
                }
                for c in 0..xs.c {
                    out[(n * xs.c + c) * plane + p] /= z;
                }
            }
        }
        self.push(Op::SoftmaxChannels, vec![input.id], xs, out)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: Tensor) -> Tensor {
        let s = self.value(input).iter().sum();
        self.push(Op::Sum, vec![input.id], Shape::scalar(), vec![s])
    }

    /// Fixed-coefficient inner product: scalar Σ wᵢ·xᵢ. The coefficients are
    /// constants, not tape nodes.
    pub fn weighted_sum(&mut self, input: Tensor, weights: Arc<Vec<f64>>) -> Result<Tensor> {
        if weights.len() != input.shape.numel() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                axis: "weights length",
                expected: input.shape.numel(),
                got: weights.len(),
            });
        }
        let s = self
            .value(input)
            .iter()
            .zip(weights.iter())
            .map(|(x, w)| x * w)
            .sum();
        Ok(self.push(
            Op::WeightedSum { weights },
            vec![input.id],
            Shape::scalar(),
            vec![s],
        ))
    }

    /// Elementwise a·x + b.
    pub fn affine(&mut self, input: Tensor, a: f64, b: f64) -> Tensor {
        let out: Vec<f64> = self.value(input).iter().map(|v| a * v + b).collect();
        self.push(Op::Affine { a }, vec![input.id], input.shape, out)
    }

    /// Elementwise quotient (used on scalar nodes when composing losses).
    pub fn div(&mut self, num: Tensor, den: Tensor) -> Result<Tensor> {
        if num.shape != den.shape {
            return Err(Error::BadOperand {
                op: "div",
                msg: format!("shapes differ: {} vs {}", num.shape, den.shape),
            });
        }
        let out: Vec<f64> = self
            .value(num)
            .iter()
            .zip(self.value(den).iter())
            .map(|(a, b)| a / b)
            .collect();
        Ok(self.push(Op::Div, vec![num.id, den.id], num.shape, out))
    }

    /// ln(max(x, floor)); the clamp keeps log losses finite at p = 0.
    pub fn ln_clamped(&mut self, input: Tensor, floor: f64) -> Tensor {
        let out: Vec<f64> = self.value(input).iter().map(|v| v.max(floor).ln()).collect();
        self.push(Op::LnClamped { floor }, vec![input.id], input.shape, out)
    }

    /// Scalar Σ xᵢ² (L2 regularization term).
    pub fn square_sum(&mut self, input: Tensor) -> Tensor {
        let s = self.value(input).iter().map(|v| v * v).sum();
        self.push(Op::SquareSum, vec![input.id], Shape::scalar(), vec![s])
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Fills `grad` on every node that the
    /// loss depends on, parameters included; unreachable nodes stay untouched.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if loss.shape.numel() != 1 {
            return Err(Error::BadOperand {
                op: "backward",
                msg: format!(
                    "root must be a 1x1x1x1 scalar, got {}: gradient seed is ambiguous",
                    loss.shape
                ),
            });
        }
        self.run_backward(loss.id, vec![1.0], false);
        Ok(())
    }

    /// Reverse pass seeded with a one-hot upstream gradient at (c, i, j) of
    /// an arbitrary node: afterwards the input leaf's grad holds
    /// ∂node[c,i,j]/∂input. Parameter leaves are skipped — this entry point
    /// exists for influence probing, which only reads activations' gradients.
    pub fn seed_gradient_at(&mut self, t: Tensor, c: usize, i: usize, j: usize) -> Result<()> {
        let s = t.shape;
        if c >= s.c || i >= s.h || j >= s.w {
            return Err(Error::IndexOutOfRange {
                op: "seed_gradient_at",
                c,
                i,
                j,
                shape: s.to_string(),
            });
        }
        let mut seed = vec![0.0; s.numel()];
        seed[s.at(0, c, i, j)] = 1.0;
        self.run_backward(t.id, seed, true);
        Ok(())
    }

    fn run_backward(&mut self, root: usize, seed: Vec<f64>, data_only: bool) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root].grad = Some(seed);
        for id in (0..=root).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            self.propagate(id, data_only);
        }
    }

    fn propagate(&mut self, id: usize, data_only: bool) {
        let (before, rest) = self.nodes.split_at_mut(id);
        let node = &rest[0];
        let dout = node.grad.as_ref().expect("propagate on grad-less node");
        let inputs = node.inputs.clone();
        let want: Vec<bool> = inputs
            .iter()
            .map(|&i| !(data_only && before[i].is_param))
            .collect();
        let wants = |idx: usize| -> bool { want[idx] };

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { stride, padding } => {
                let xs = before[inputs[0]].shape;
                let ws = before[inputs[1]].shape;
                if wants(0) {
                    let mut dx = take_or_zeros(&mut before[inputs[0]].grad, xs.numel());
                    kernels::conv2d_backward_data(
                        dout,
                        node.shape,
                        &rest_value(before, inputs[1]),
                        ws,
                        *stride,
                        *padding,
                        &mut dx,
                        xs,
                    );
                    before[inputs[0]].grad = Some(dx);
                }
                if wants(1) || wants(2) {
                    let mut dw = take_or_zeros(&mut before[inputs[1]].grad, ws.numel());
                    let mut db =
                        take_or_zeros(&mut before[inputs[2]].grad, before[inputs[2]].shape.numel());
                    kernels::conv2d_backward_filter(
                        &rest_value(before, inputs[0]),
                        xs,
                        dout,
                        node.shape,
                        *stride,
                        *padding,
                        &mut dw,
                        ws,
                        &mut db,
                    );
                    before[inputs[1]].grad = Some(dw);
                    before[inputs[2]].grad = Some(db);
                }
            }
            Op::MaxPool2d { argmax } => {
                let xs = before[inputs[0]].shape;
                let mut dx = take_or_zeros(&mut before[inputs[0]].grad, xs.numel());
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src as usize] += dout[o];
                }
                before[inputs[0]].grad = Some(dx);
            }
            Op::AvgPool2d => {
                let xs = before[inputs[0]].shape;
                let os = node.shape;
                let mut dx = take_or_zeros(&mut before[inputs[0]].grad, xs.numel());
                let plane = xs.h * xs.w;
                for nc in 0..xs.n * xs.c {
                    for oy in 0..os.h {
                        for ox in 0..os.w {
                            let g = 0.25 * dout[(nc * os.h + oy) * os.w + ox];
                            let base = nc * plane + (2 * oy) * xs.w + 2 * ox;
                            dx[base] += g;
                            dx[base + 1] += g;
                            dx[base + xs.w] += g;
                            dx[base + xs.w + 1] += g;
                        }
                    }
                }
                before[inputs[0]].grad = Some(dx);
            }
            Op::Upsample2x => {
                let xs = before[inputs[0]].shape;
                let mut dx = take_or_zeros(&mut before[inputs[0]].grad, xs.numel());
                kernels::upsample2x_backward(dout, node.shape, &mut dx, xs);
                before[inputs[0]].grad = Some(dx);
            }
            Op::BatchNorm(saved) => {
                let xs = before[inputs[0]].shape;
                let x = rest_value(before, inputs[0]);
                let gamma = rest_value(before, inputs[1]);
                let (c, plane) = (xs.c, xs.h * xs.w);
                let (sum_dy, sum_dy_xhat) =
                    kernels::bn_backward_sums(&x, dout, xs, &saved.mean, &saved.inv_std);
                if wants(0) {
                    let mut dx = take_or_zeros(&mut before[inputs[0]].grad, xs.numel());
                    match saved.mode {
                        Mode::Train => kernels::bn_backward_dx_train(
                            &x,
                            dout,
                            xs,
                            &saved.mean,
                            &saved.inv_std,
                            &gamma,
                            &sum_dy,
                            &sum_dy_xhat,
                            &mut dx,
                        ),
                        Mode::Eval => {
                            for n in 0..xs.n {
                                for ch in 0..c {
                                    let base = (n * c + ch) * plane;
                                    let k1 = gamma[ch] * saved.inv_std[ch];
                                    for i in base..base + plane {
                                        dx[i] += k1 * dout[i];
                                    }
                                }
                            }
                        }
                    }
                    before[inputs[0]].grad = Some(dx);
                }
                if wants(1) {
                    let mut dg = take_or_zeros(&mut before[inputs[1]].grad, c);
                    for ch in 0..c {
                        dg[ch] += sum_dy_xhat[ch];
                    }
                    before[inputs[1]].grad = Some(dg);
                }
                if wants(2) {
                    let mut db = take_or_zeros(&mut before[inputs[2]].grad, c);
                    for ch in 0..c {
                        db[ch] += sum_dy[ch];
                    }
                    before[inputs[2]].grad = Some(db);
                }
            }
            Op::Relu => {
                let x = rest_value(before, inputs[0]);
                let mut dx = take_or_zeros(&mut before[inputs[0]].grad, x.len());
                for i in 0..x.len() {
                    if x[i] > 0.0 {
                        dx[i] += dout[i];
                    }
                }
                before[inputs[0]].grad = Some(dx);
            }
            Op::Dropout { mask } => {
                let mask = mask.clone();
                let mut dx = take_or_zeros(&mut before[inputs[0]].grad, mask.len());
                for i in 0..mask.len() {
                    dx[i] += dout[i] * mask[i];
                }
                before[inputs[0]].grad = Some(dx);
            }
            Op::Add => {
                for slot in 0..2 {
                    let len = before[inputs[slot]].shape.numel();
                    let mut dx = take_or_zeros(&mut before[inputs[slot]].grad, len);
                    for i in 0..len {
                        dx[i] += dout[i];
                    }
                    before[inputs[slot]].grad = Some(dx);
                }
            }
            Op::ConcatChannels { widths } => {
                let widths = widths.clone();
                let os = node.shape;
                let plane = os.h * os.w;
                let mut c_off = 0;
                for (slot, pc) in widths.iter().enumerate() {
                    let xs = before[inputs[slot]].shape;
                    let mut dx = take_or_zeros(&mut before[inputs[slot]].grad, xs.numel());
                    for n in 0..os.n {
                        let src = &dout[(n * os.c + c_off) * plane..(n * os.c + c_off + pc) * plane];
                        let dst = &mut dx[n * pc * plane..(n + 1) * pc * plane];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    before[inputs[slot]].grad = Some(dx);
                    c_off += pc;
                }
            }
            Op::Sigmoid => {
                let y = &node.value;
                let mut dx = take_or_zeros(&mut before[inputs[0]].grad, y.len());
                for i in 0..y.len() {
                    dx[i] += dout[i] * y[i] * (1.0 - y[i]);
                }
                before[inputs[0]].grad = Some(dx);
            }
            Op::SoftmaxChannels => {
                let y = &node.value;
                let os = node.shape;
                let plane = os.h * os.w;
                let mut dx = take_or_zeros(&mut before[inputs[0]].grad, y.len());
                for n in 0..os.n {
                    for p in 0..plane {
                        let mut dot = 0.0;
                        for c in 0..os.c {
                            let i = (n * os.c + c) * plane + p;
                            dot += dout[i] * y[i];
                        }
                        for c in 0..os.c {
                            let i = (n * os.c + c) * plane + p;
                            dx[i] += y[i] * (dout[i] - dot);
                        }
                    }
                }
                before[inputs[0]].grad = Some(dx);
            }
            Op::Sum => {
                let g = dout[0];
                let len = before[inputs[0]].shape.numel();
                let mut dx = take_or_zeros(&mut before[inputs[0]].grad, len);
                for d in dx.iter_mut() {
                    *d += g;
                }
                before[inputs[0]].grad = Some(dx);
            }
            Op::WeightedSum { weights } => {
                let g = dout[0];
                let weights = weights.clone();
                let mut dx = take_or_zeros(&mut before[inputs[0]].grad, weights.len());
                for i in 0..weights.len() {
                    dx[i] += g * weights[i];
                }
                before[inputs[0]].grad = Some(dx);
            }
            Op::Affine { a } => {
                let a = *a;
                let len = before[inputs[0]].shape.numel();
                let mut dx = take_or_zeros(&mut before[inputs[0]].grad, len);
                for i in 0..len {
                    dx[i] += a * dout[i];
                }
                before[inputs[0]].grad = Some(dx);
            }
            Op::Div => {
                let num = rest_value(before, inputs[0]);
                let den = rest_value(before, inputs[1]);
                if wants(0) {
                    let mut dn = take_or_zeros(&mut before[inputs[0]].grad, num.len());
                    for i in 0..num.len() {
                        dn[i] += dout[i] / den[i];
                    }
                    before[inputs[0]].grad = Some(dn);
                }
                if wants(1) {
                    let mut dd = take_or_zeros(&mut before[inputs[1]].grad, den.len());
                    for i in 0..den.len() {
                        dd[i] -= dout[i] * num[i] / (den[i] * den[i]);
                    }
                    before[inputs[1]].grad = Some(dd);
                }
            }
            Op::LnClamped { floor } => {
                let floor = *floor;
                let x = rest_value(before, inputs[0]);
                let mut dx = take_or_zeros(&mut before[inputs[0]].grad, x.len());
                for i in 0..x.len() {
                    if x[i] > floor {
                        dx[i] += dout[i] / x[i];
                    }
                }
                before[inputs[0]].grad = Some(dx);
            }
            Op::SquareSum => {
                let g = dout[0];
                let x = rest_value(before, inputs[0]);
                let mut dx = take_or_zeros(&mut before[inputs[0]].grad, x.len());
                for i in 0..x.len() {
                    dx[i] += 2.0 * g * x[i];
                }
                before[inputs[0]].grad = Some(dx);
            }
        }
    }
}

fn take_or_zeros(slot: &mut Option<Vec<f64>>, len: usize) -> Vec<f64> {
    slot.take().unwrap_or_else(|| vec![0.0; len])
}

fn rest_value(nodes: &[Node], id: usize) -> Arc<Vec<f64>> {
    nodes[id].value.clone()
}

#[cfg(test)]
pub(crate) mod tests;
