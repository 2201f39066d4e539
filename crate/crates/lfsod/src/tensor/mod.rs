//! Dense f64 tensors and reverse-mode automatic differentiation.
//!
//! The engine is a Wengert tape: every operation appends a node holding the
//! result value and the ids of its inputs, and [`GradientTape::backward`]
//! walks the arena once in reverse, accumulating adjoints. Ids index into the
//! arena, so a tape is cheap to build and trivially deterministic: the same
//! program produces the same node order, the same loop order, and the same
//! floating-point results, bit for bit.
//!
//! Only what the saliency network needs is implemented. Binary pointwise ops
//! accept equal shapes or a one-element tensor on either side (scalar
//! broadcast); there is no general broadcasting.

mod adam;
mod gradcheck;
mod kernels;
mod params;

pub use adam::AdamState;
pub use gradcheck::{grad_check, grad_check_directional, GradCheckReport};
pub use params::ParamSet;

use std::fmt;

/// Errors from tensor construction, tape ops, and the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes are incompatible for the named op.
    ShapeMismatch { op: &'static str, detail: String },
    /// Constructor data length does not match the shape product.
    DataLength { expected: usize, got: usize },
    /// Axis out of range for the operand rank.
    BadAxis { axis: usize, rank: usize },
    /// A convolution or similar op would produce an empty output.
    EmptyOutput { op: &'static str, detail: String },
    /// `backward` called on a tensor that is not a single scalar.
    NonScalarLoss { numel: usize },
    /// `backward` called twice on the same tape.
    TapeSpent,
    /// A non-finite value where one is not allowed (optimizer input, log domain).
    NonFinite { what: String },
    /// Parameter registered twice under one name.
    DuplicateParam { name: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch ({detail})"),
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::BadAxis { axis, rank } => write!(f, "axis {axis} out of range for rank {rank}"),
            TensorError::EmptyOutput { op, detail } => write!(f, "{op}: empty output ({detail})"),
            TensorError::NonScalarLoss { numel } => {
                write!(f, "backward needs a scalar loss, got {numel} elements")
            }
            TensorError::TapeSpent => write!(f, "backward already ran on this tape"),
            TensorError::NonFinite { what } => write!(f, "non-finite value in {what}"),
            TensorError::DuplicateParam { name } => write!(f, "duplicate parameter name {name:?}"),
        }
    }
}

impl std::error::Error for TensorError {}

/// Interpolation used by `upsample2x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    /// Half-pixel-center bilinear (corners not aligned).
    Bilinear,
}

impl std::str::FromStr for UpsampleMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nearest" => Ok(UpsampleMode::Nearest),
            "bilinear" => Ok(UpsampleMode::Bilinear),
            other => Err(format!("unknown upsample mode {other:?} (expected nearest|bilinear)")),
        }
    }
}

/// A dense row-major f64 tensor. Plain value type; autodiff state lives on
/// the tape, except for the requires-grad flag which marks leaves whose
/// gradient should be materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength { expected, got: data.len() });
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()], requires_grad: false }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()], requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Plain-text form `"2x3; v v v v v v"` for golden-file comparisons.
    pub fn dump(&self) -> String {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        let vals: Vec<String> = self.data.iter().map(|v| format!("{v}")).collect();
        format!("{}; {}", dims.join("x"), vals.join(" "))
    }
}

/// Handle to a node on a [`GradientTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    SoftmaxAxis { x: TensorId, axis: usize },
    Sigmoid { x: TensorId },
    Relu { x: TensorId },
    Ln { x: TensorId },
    Clamp { x: TensorId, lo: f64, hi: f64 },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f64 },
    AddConst { x: TensorId },
    Conv2d { x: TensorId, w: TensorId, stride: usize, pad: usize, dilation: usize },
    Conv3d { x: TensorId, w: TensorId, stride: (usize, usize), pad: (usize, usize) },
    ConvTranspose2d { x: TensorId, w: TensorId, stride: usize, pad: usize },
    GlobalMaxPool { x: TensorId },
    FullyConnected { x: TensorId, w: TensorId, b: TensorId },
    Upsample2x { x: TensorId, mode: UpsampleMode },
    ConcatChannels { xs: Vec<TensorId> },
    Reshape { x: TensorId },
    Permute { x: TensorId, perm: Vec<usize> },
    MeanAxis { x: TensorId, axis: usize },
    MaxAxis { x: TensorId, axis: usize },
    MeanAll { x: TensorId },
    SumAll { x: TensorId },
    ExpandChannel { x: TensorId, channels: usize },
    ExpandSpatial { x: TensorId, h: usize, w: usize },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// How a binary pointwise op pairs its operands.
#[derive(Clone, Copy)]
enum Pairing {
    Same,
    LeftScalar,
    RightScalar,
}

/// Arena of tape nodes. Build the graph through the op methods, call
/// [`backward`](GradientTape::backward) once, read leaf gradients with
/// [`grad`](GradientTape::grad). A tape is single-use: rebuild it for the
/// next step.
#[derive(Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
    spent: bool,
}

impl GradientTape {
    pub fn new() -> Self {
        GradientTape { nodes: Vec::new(), spent: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Its `requires_grad` flag decides whether a
    /// gradient is materialized for it.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> TensorId {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    /// Gradient of the last `backward` loss w.r.t. this node, if one was
    /// materialized (leaves with `requires_grad`, plus any reached node).
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn pairing(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(Pairing, Vec<usize>), TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok((Pairing::Same, sa.to_vec()));
        }
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        if na == 1 {
            return Ok((Pairing::LeftScalar, sb.to_vec()));
        }
        if nb == 1 {
            return Ok((Pairing::RightScalar, sa.to_vec()));
        }
        Err(TensorError::ShapeMismatch { op, detail: format!("{sa:?} vs {sb:?}") })
    }

    fn binary(
        &mut self,
        opname: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(TensorId, TensorId) -> Op,
    ) -> Result<TensorId, TensorError> {
        let (pairing, shape) = self.pairing(opname, a, b)?;
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let data: Vec<f64> = match pairing {
            Pairing::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Pairing::LeftScalar => bv.iter().map(|&y| f(av[0], y)).collect(),
            Pairing::RightScalar => av.iter().map(|&x| f(x, bv[0])).collect(),
        };
        let needs = self.needs(a) || self.needs(b);
        let t = Tensor { shape, data, requires_grad: false };
        Ok(self.push(t, make(a, b), needs))
    }

    /// Matrix product of `[m,k]` and `[k,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", detail: format!("{sa:?} x {sb:?}") });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            for t in 0..k {
                let x = av[i * k + t];
                for j in 0..n {
                    y[i * n + j] += x * bv[t * n + j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let t = Tensor { shape: vec![m, n], data: y, requires_grad: false };
        Ok(self.push(t, Op::Matmul { a, b }, needs))
    }

    pub fn softmax_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis { axis, rank: shape.len() });
        }
        let y = kernels::softmax_fwd(&self.nodes[x.0].value.data, &shape, axis);
        let needs = self.needs(x);
        let t = Tensor { shape, data: y, requires_grad: false };
        Ok(self.push(t, Op::SoftmaxAxis { x, axis }, needs))
    }

    fn unary(&mut self, x: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let shape = self.shape(x).to_vec();
        let data: Vec<f64> = self.nodes[x.0].value.data.iter().map(|&v| f(v)).collect();
        let needs = self.needs(x);
        self.push(Tensor { shape, data, requires_grad: false }, op, needs)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        Ok(self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { x }))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        Ok(self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu { x }))
    }

    /// Natural log. The domain is enforced: any element `<= 0` is an error,
    /// so callers clamp first.
    pub fn ln(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        if self.nodes[x.0].value.data.iter().any(|&v| v <= 0.0) {
            return Err(TensorError::NonFinite { what: "ln of a non-positive value".into() });
        }
        Ok(self.unary(x, f64::ln, Op::Ln { x }))
    }

    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> Result<TensorId, TensorError> {
        Ok(self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    /// Hadamard (or scalar-broadcast) product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("div", a, b, |x, y| x / y, |a, b| Op::Div { a, b })
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId, TensorError> {
        Ok(self.unary(x, |v| v * c, Op::Scale { x, c }))
    }

    pub fn add_const(&mut self, x: TensorId, c: f64) -> Result<TensorId, TensorError> {
        Ok(self.unary(x, |v| v + c, Op::AddConst { x }))
    }

    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> Result<TensorId, TensorError> {
        self.conv2d_dilated(x, w, stride, pad, 1)
    }

    /// 2D cross-correlation of `[C_in,H,W]` with `[C_out,C_in,Kh,Kw]`.
    pub fn conv2d_dilated(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", detail: format!("x {xs:?}, w {ws:?}") });
        }
        let oh = kernels::conv_out_extent(xs[1], ws[2], stride, pad, dilation);
        let ow = kernels::conv_out_extent(xs[2], ws[3], stride, pad, dilation);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(TensorError::EmptyOutput {
                    op: "conv2d",
                    detail: format!("input {xs:?} too small for kernel {ws:?} at pad {pad}"),
                })
            }
        };
        let y = kernels::conv2d_fwd(
            &self.nodes[x.0].value.data,
            [xs[0], xs[1], xs[2]],
            &self.nodes[w.0].value.data,
            [ws[0], ws[1], ws[2], ws[3]],
            stride,
            pad,
            dilation,
            [oh, ow],
        );
        let needs = self.needs(x) || self.needs(w);
        let t = Tensor { shape: vec![ws[0], oh, ow], data: y, requires_grad: false };
        Ok(self.push(t, Op::Conv2d { x, w, stride, pad, dilation }, needs))
    }

    /// 3D cross-correlation of `[C_in,T,H,W]` with `[C_out,C_in,Kt,Kh,Kw]`.
    /// `stride` and `pad` are (temporal, spatial).
    pub fn conv3d(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 5 || xs[0] != ws[1] {
            return Err(TensorError::ShapeMismatch { op: "conv3d", detail: format!("x {xs:?}, w {ws:?}") });
        }
        let ot = kernels::conv_out_extent(xs[1], ws[2], stride.0, pad.0, 1);
        let oh = kernels::conv_out_extent(xs[2], ws[3], stride.1, pad.1, 1);
        let ow = kernels::conv_out_extent(xs[3], ws[4], stride.1, pad.1, 1);
        let (ot, oh, ow) = match (ot, oh, ow) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(TensorError::EmptyOutput {
                    op: "conv3d",
                    detail: format!("input {xs:?} too small for kernel {ws:?}"),
                })
            }
        };
        let y = kernels::conv3d_fwd(
            &self.nodes[x.0].value.data,
            [xs[0], xs[1], xs[2], xs[3]],
            &self.nodes[w.0].value.data,
            [ws[0], ws[1], ws[2], ws[3], ws[4]],
            stride,
            pad,
            [ot, oh, ow],
        );
        let needs = self.needs(x) || self.needs(w);
        let t = Tensor { shape: vec![ws[0], ot, oh, ow], data: y, requires_grad: false };
        Ok(self.push(t, Op::Conv3d { x, w, stride, pad }, needs))
    }

    /// Transposed convolution (adjoint of stride-`s` conv2d). `x` is
    /// `[C_a,H,W]`, `w` is `[C_a,C_b,Kh,Kw]`; output extent `s*(H-1)+Kh-2p`.
    pub fn conv_transpose2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("x {xs:?}, w {ws:?}"),
            });
        }
        let oh = (stride * (xs[1] - 1) + ws[2]) as isize - 2 * pad as isize;
        let ow = (stride * (xs[2] - 1) + ws[3]) as isize - 2 * pad as isize;
        if oh < 1 || ow < 1 {
            return Err(TensorError::EmptyOutput {
                op: "conv_transpose2d",
                detail: format!("output extent {oh}x{ow}"),
            });
        }
        let (oh, ow) = (oh as usize, ow as usize);
        let y = kernels::convt2d_fwd(
            &self.nodes[x.0].value.data,
            [xs[0], xs[1], xs[2]],
            &self.nodes[w.0].value.data,
            [ws[0], ws[1], ws[2], ws[3]],
            stride,
            pad,
            [oh, ow],
        );
        let needs = self.needs(x) || self.needs(w);
        let t = Tensor { shape: vec![ws[1], oh, ow], data: y, requires_grad: false };
        Ok(self.push(t, Op::ConvTranspose2d { x, w, stride, pad }, needs))
    }

    /// Per-channel max over the spatial extent: `[C,H,W] -> [C]`. On ties the
    /// first element in row-major order receives the gradient.
    pub fn global_max_pool(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(TensorError::ShapeMismatch { op: "global_max_pool", detail: format!("x {xs:?}") });
        }
        let (c_n, hw) = (xs[0], xs[1] * xs[2]);
        let xv = &self.nodes[x.0].value.data;
        let mut y = vec![0.0; c_n];
        for c in 0..c_n {
            let mut m = f64::NEG_INFINITY;
            for i in 0..hw {
                let v = xv[c * hw + i];
                if v > m {
                    m = v;
                }
            }
            y[c] = m;
        }
        let needs = self.needs(x);
        let t = Tensor { shape: vec![c_n], data: y, requires_grad: false };
        Ok(self.push(t, Op::GlobalMaxPool { x }, needs))
    }

    /// Affine map of a vector: `y = w x + b` with `x: [C_in]`,
    /// `w: [C_out,C_in]`, `b: [C_out]`.
    pub fn fully_connected(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "fully_connected",
                detail: format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            });
        }
        let (co, ci) = (ws[0], ws[1]);
        let xv = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut y = vec![0.0; co];
        for o in 0..co {
            let mut acc = bv[o];
            for i in 0..ci {
                acc += wv[o * ci + i] * xv[i];
            }
            y[o] = acc;
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let t = Tensor { shape: vec![co], data: y, requires_grad: false };
        Ok(self.push(t, Op::FullyConnected { x, w, b }, needs))
    }

    /// Doubles both spatial extents of `[C,H,W]`.
    pub fn upsample2x(&mut self, x: TensorId, mode: UpsampleMode) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(TensorError::ShapeMismatch { op: "upsample2x", detail: format!("x {xs:?}") });
        }
        let [c_n, h, w] = [xs[0], xs[1], xs[2]];
        let y = match mode {
            UpsampleMode::Nearest => {
                let xv = &self.nodes[x.0].value.data;
                let (oh, ow) = (2 * h, 2 * w);
                let mut y = vec![0.0; c_n * oh * ow];
                for c in 0..c_n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            y[(c * oh + oy) * ow + ox] = xv[(c * h + oy / 2) * w + ox / 2];
                        }
                    }
                }
                y
            }
            UpsampleMode::Bilinear => kernels::up2x_bilinear_fwd(&self.nodes[x.0].value.data, [c_n, h, w]),
        };
        let needs = self.needs(x);
        let t = Tensor { shape: vec![c_n, 2 * h, 2 * w], data: y, requires_grad: false };
        Ok(self.push(t, Op::Upsample2x { x, mode }, needs))
    }

    /// Concatenates `[C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[TensorId]) -> Result<TensorId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::ShapeMismatch { op: "concat_channels", detail: "no inputs".into() });
        }
        let first = self.shape(xs[0]).to_vec();
        if first.len() != 3 {
            return Err(TensorError::ShapeMismatch { op: "concat_channels", detail: format!("x {first:?}") });
        }
        let (h, w) = (first[1], first[2]);
        let mut c_total = 0;
        for &id in xs {
            let s = self.shape(id);
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    detail: format!("{first:?} vs {s:?}"),
                });
            }
            c_total += s[0];
        }
        let mut data = Vec::with_capacity(c_total * h * w);
        for &id in xs {
            data.extend_from_slice(&self.nodes[id.0].value.data);
        }
        let needs = xs.iter().any(|&id| self.needs(id));
        let t = Tensor { shape: vec![c_total, h, w], data, requires_grad: false };
        Ok(self.push(t, Op::ConcatChannels { xs: xs.to_vec() }, needs))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId, TensorError> {
        let n: usize = shape.iter().product();
        let xn = self.nodes[x.0].value.numel();
        if n != xn {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape(x)),
            });
        }
        let data = self.nodes[x.0].value.data.clone();
        let needs = self.needs(x);
        let t = Tensor { shape: shape.to_vec(), data, requires_grad: false };
        Ok(self.push(t, Op::Reshape { x }, needs))
    }

    /// Axis permutation; output axis `k` is input axis `perm[k]`.
    pub fn permute(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::ShapeMismatch {
                op: "permute",
                detail: format!("perm {perm:?} for rank {rank}"),
            });
        }
        // permute_fwd scatters input axis perm[k] to output axis k
        let data = {
            let xv = &self.nodes[x.0].value.data;
            kernels::permute_fwd(xv, &shape, perm)
        };
        let out_shape: Vec<usize> = perm.iter().map(|&a| shape[a]).collect();
        let needs = self.needs(x);
        let t = Tensor { shape: out_shape, data, requires_grad: false };
        Ok(self.push(t, Op::Permute { x, perm: perm.to_vec() }, needs))
    }

    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis { axis, rank: shape.len() });
        }
        let (outer, n, inner) = kernels::axis_split(&shape, axis);
        let xv = &self.nodes[x.0].value.data;
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += xv[o * n * inner + k * inner + i];
                }
                y[o * inner + i] = acc / n as f64;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let needs = self.needs(x);
        let t = Tensor { shape: out_shape, data: y, requires_grad: false };
        Ok(self.push(t, Op::MeanAxis { x, axis }, needs))
    }

    /// Max over one axis (ties: first index along the axis gets the gradient).
    pub fn max_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis { axis, rank: shape.len() });
        }
        let (outer, n, inner) = kernels::axis_split(&shape, axis);
        let xv = &self.nodes[x.0].value.data;
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut m = f64::NEG_INFINITY;
                for k in 0..n {
                    let v = xv[o * n * inner + k * inner + i];
                    if v > m {
                        m = v;
                    }
                }
                y[o * inner + i] = m;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let needs = self.needs(x);
        let t = Tensor { shape: out_shape, data: y, requires_grad: false };
        Ok(self.push(t, Op::MaxAxis { x, axis }, needs))
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let n = self.nodes[x.0].value.numel();
        let s: f64 = self.nodes[x.0].value.data.iter().sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s / n as f64), Op::MeanAll { x }, needs))
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let s: f64 = self.nodes[x.0].value.data.iter().sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::SumAll { x }, needs))
    }

    /// Broadcasts `[1,H,W]` to `[C,H,W]`.
    pub fn expand_channel(&mut self, x: TensorId, channels: usize) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[0] != 1 {
            return Err(TensorError::ShapeMismatch { op: "expand_channel", detail: format!("x {xs:?}") });
        }
        let plane = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(channels * plane.len());
        for _ in 0..channels {
            data.extend_from_slice(plane);
        }
        let needs = self.needs(x);
        let t = Tensor { shape: vec![channels, xs[1], xs[2]], data, requires_grad: false };
        Ok(self.push(t, Op::ExpandChannel { x, channels }, needs))
    }

    /// Broadcasts a channel vector `[C]` to `[C,H,W]`.
    pub fn expand_spatial(&mut self, x: TensorId, h: usize, w: usize) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 1 {
            return Err(TensorError::ShapeMismatch { op: "expand_spatial", detail: format!("x {xs:?}") });
        }
        let xv = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(xs[0] * h * w);
        for c in 0..xs[0] {
            data.extend(std::iter::repeat(xv[c]).take(h * w));
        }
        let needs = self.needs(x);
        let t = Tensor { shape: vec![xs[0], h, w], data, requires_grad: false };
        Ok(self.push(t, Op::ExpandSpatial { x, h, w }, needs))
    }

    fn accum(&mut self, id: TensorId, add: &[f64]) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        let g = node.grad.get_or_insert_with(|| vec![0.0; node.value.numel()]);
        for (a, b) in g.iter_mut().zip(add) {
            *a += *b;
        }
    }

    fn val(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value.data
    }

    /// Reverse sweep from a scalar loss. Every leaf with `requires_grad` ends
    /// up with a materialized gradient (zero if the loss does not depend on
    /// it). A tape can only run backward once.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.spent {
            return Err(TensorError::TapeSpent);
        }
        self.spent = true;
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(TensorError::NonScalarLoss { numel });
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        {
            let node = &mut self.nodes[loss.0];
            if node.needs_grad {
                node.grad = Some(vec![1.0]);
            }
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let sa = self.shape(a).to_vec();
                    let sb = self.shape(b).to_vec();
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (ga, gb) = {
                        let av = self.val(a);
                        let bv = self.val(b);
                        let mut ga = vec![0.0; m * k];
                        let mut gb = vec![0.0; k * n];
                        for i2 in 0..m {
                            for j in 0..k {
                                let mut s = 0.0;
                                for t in 0..n {
                                    s += g[i2 * n + t] * bv[j * n + t];
                                }
                                ga[i2 * k + j] = s;
                            }
                        }
                        for j in 0..k {
                            for t in 0..n {
                                let mut s = 0.0;
                                for i2 in 0..m {
                                    s += av[i2 * k + j] * g[i2 * n + t];
                                }
                                gb[j * n + t] = s;
                            }
                        }
                        (ga, gb)
                    };
                    self.accum(a, &ga);
                    self.accum(b, &gb);
                }
                Op::SoftmaxAxis { x, axis } => {
                    let shape = self.shape(TensorId(i)).to_vec();
                    let gx = kernels::softmax_bwd(&self.nodes[i].value.data, &shape, axis, &g);
                    self.accum(x, &gx);
                }
                Op::Sigmoid { x } => {
                    let gx: Vec<f64> = self.nodes[i].value.data.iter().zip(&g).map(|(&s, &gy)| gy * s * (1.0 - s)).collect();
                    self.accum(x, &gx);
                }
                Op::Relu { x } => {
                    let gx: Vec<f64> = self.val(x).iter().zip(&g).map(|(&v, &gy)| if v > 0.0 { gy } else { 0.0 }).collect();
                    self.accum(x, &gx);
                }
                Op::Ln { x } => {
                    let gx: Vec<f64> = self.val(x).iter().zip(&g).map(|(&v, &gy)| gy / v).collect();
                    self.accum(x, &gx);
                }
                Op::Clamp { x, lo, hi } => {
                    let gx: Vec<f64> = self
                        .val(x)
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gy)| if v >= lo && v <= hi { gy } else { 0.0 })
                        .collect();
                    self.accum(x, &gx);
                }
                Op::Add { a, b } => {
                    let (ga, gb) = self.pair_grads(a, b, &g, |_, _, gy| (gy, gy));
                    self.accum(a, &ga);
                    self.accum(b, &gb);
                }
                Op::Sub { a, b } => {
                    let (ga, gb) = self.pair_grads(a, b, &g, |_, _, gy| (gy, -gy));
                    self.accum(a, &ga);
                    self.accum(b, &gb);
                }
                Op::Mul { a, b } => {
                    let (ga, gb) = self.pair_grads(a, b, &g, |x, y, gy| (gy * y, gy * x));
                    self.accum(a, &ga);
                    self.accum(b, &gb);
                }
                Op::Div { a, b } => {
                    let (ga, gb) = self.pair_grads(a, b, &g, |x, y, gy| (gy / y, -gy * x / (y * y)));
                    self.accum(a, &ga);
                    self.accum(b, &gb);
                }
                Op::Scale { x, c } => {
                    let gx: Vec<f64> = g.iter().map(|&gy| gy * c).collect();
                    self.accum(x, &gx);
                }
                Op::AddConst { x } => {
                    self.accum(x, &g);
                }
                Op::Conv2d { x, w, stride, pad, dilation } => {
                    let xs = self.shape(x).to_vec();
                    let ws = self.shape(w).to_vec();
                    let os = self.shape(TensorId(i)).to_vec();
                    let (gx, gw) = kernels::conv2d_bwd(
                        self.val(x),
                        [xs[0], xs[1], xs[2]],
                        self.val(w),
                        [ws[0], ws[1], ws[2], ws[3]],
                        stride,
                        pad,
                        dilation,
                        [os[1], os[2]],
                        &g,
                    );
                    self.accum(x, &gx);
                    self.accum(w, &gw);
                }
                Op::Conv3d { x, w, stride, pad } => {
                    let xs = self.shape(x).to_vec();
                    let ws = self.shape(w).to_vec();
                    let os = self.shape(TensorId(i)).to_vec();
                    let (gx, gw) = kernels::conv3d_bwd(
                        self.val(x),
                        [xs[0], xs[1], xs[2], xs[3]],
                        self.val(w),
                        [ws[0], ws[1], ws[2], ws[3], ws[4]],
                        stride,
                        pad,
                        [os[1], os[2], os[3]],
                        &g,
                    );
                    self.accum(x, &gx);
                    self.accum(w, &gw);
                }
                Op::ConvTranspose2d { x, w, stride, pad } => {
                    let xs = self.shape(x).to_vec();
                    let ws = self.shape(w).to_vec();
                    let os = self.shape(TensorId(i)).to_vec();
                    let (gx, gw) = kernels::convt2d_bwd(
                        self.val(x),
                        [xs[0], xs[1], xs[2]],
                        self.val(w),
                        [ws[0], ws[1], ws[2], ws[3]],
                        stride,
                        pad,
                        [os[1], os[2]],
                        &g,
                    );
                    self.accum(x, &gx);
                    self.accum(w, &gw);
                }
                Op::GlobalMaxPool { x } => {
                    let xs = self.shape(x).to_vec();
                    let (c_n, hw) = (xs[0], xs[1] * xs[2]);
                    let gx = {
                        let xv = self.val(x);
                        let mut gx = vec![0.0; xv.len()];
                        for c in 0..c_n {
                            let mut best = 0;
                            for idx in 1..hw {
                                if xv[c * hw + idx] > xv[c * hw + best] {
                                    best = idx;
                                }
                            }
                            gx[c * hw + best] = g[c];
                        }
                        gx
                    };
                    self.accum(x, &gx);
                }
                Op::FullyConnected { x, w, b } => {
                    let ws = self.shape(w).to_vec();
                    let (co, ci) = (ws[0], ws[1]);
                    let (gx, gw) = {
                        let xv = self.val(x);
                        let wv = self.val(w);
                        let mut gx = vec![0.0; ci];
                        let mut gw = vec![0.0; co * ci];
                        for o in 0..co {
                            for i2 in 0..ci {
                                gx[i2] += g[o] * wv[o * ci + i2];
                                gw[o * ci + i2] = g[o] * xv[i2];
                            }
                        }
                        (gx, gw)
                    };
                    self.accum(x, &gx);
                    self.accum(w, &gw);
                    self.accum(b, &g);
                }
                Op::Upsample2x { x, mode } => {
                    let xs = self.shape(x).to_vec();
                    let [c_n, h, w] = [xs[0], xs[1], xs[2]];
                    let gx = match mode {
                        UpsampleMode::Nearest => {
                            let (oh, ow) = (2 * h, 2 * w);
                            let mut gx = vec![0.0; c_n * h * w];
                            for c in 0..c_n {
                                for oy in 0..oh {
                                    for ox in 0..ow {
                                        gx[(c * h + oy / 2) * w + ox / 2] += g[(c * oh + oy) * ow + ox];
                                    }
                                }
                            }
                            gx
                        }
                        UpsampleMode::Bilinear => kernels::up2x_bilinear_bwd([c_n, h, w], &g),
                    };
                    self.accum(x, &gx);
                }
                Op::ConcatChannels { xs } => {
                    let mut offset = 0;
                    for &id in &xs {
                        let n = self.nodes[id.0].value.numel();
                        let part = g[offset..offset + n].to_vec();
                        self.accum(id, &part);
                        offset += n;
                    }
                }
                Op::Reshape { x } => {
                    self.accum(x, &g);
                }
                Op::Permute { x, perm } => {
                    // adjoint of a permutation is its inverse
                    let rank = perm.len();
                    let mut inv = vec![0usize; rank];
                    for (k, &a) in perm.iter().enumerate() {
                        inv[a] = k;
                    }
                    let out_shape = self.shape(TensorId(i)).to_vec();
                    let gx = kernels::permute_fwd(&g, &out_shape, &inv);
                    self.accum(x, &gx);
                }
                Op::MeanAxis { x, axis } => {
                    let shape = self.shape(x).to_vec();
                    let (outer, n, inner) = kernels::axis_split(&shape, axis);
                    let mut gx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        for k in 0..n {
                            for i2 in 0..inner {
                                gx[o * n * inner + k * inner + i2] = g[o * inner + i2] / n as f64;
                            }
                        }
                    }
                    self.accum(x, &gx);
                }
                Op::MaxAxis { x, axis } => {
                    let shape = self.shape(x).to_vec();
                    let (outer, n, inner) = kernels::axis_split(&shape, axis);
                    let gx = {
                        let xv = self.val(x);
                        let mut gx = vec![0.0; outer * n * inner];
                        for o in 0..outer {
                            for i2 in 0..inner {
                                let mut best = 0;
                                for k in 1..n {
                                    if xv[o * n * inner + k * inner + i2] > xv[o * n * inner + best * inner + i2] {
                                        best = k;
                                    }
                                }
                                gx[o * n * inner + best * inner + i2] = g[o * inner + i2];
                            }
                        }
                        gx
                    };
                    self.accum(x, &gx);
                }
                Op::MeanAll { x } => {
                    let n = self.nodes[x.0].value.numel();
                    let gx = vec![g[0] / n as f64; n];
                    self.accum(x, &gx);
                }
                Op::SumAll { x } => {
                    let n = self.nodes[x.0].value.numel();
                    let gx = vec![g[0]; n];
                    self.accum(x, &gx);
                }
                Op::ExpandChannel { x, channels } => {
                    let plane = self.nodes[x.0].value.numel();
                    let mut gx = vec![0.0; plane];
                    for c in 0..channels {
                        for p in 0..plane {
                            gx[p] += g[c * plane + p];
                        }
                    }
                    self.accum(x, &gx);
                }
                Op::ExpandSpatial { x, h, w } => {
                    let c_n = self.nodes[x.0].value.numel();
                    let hw = h * w;
                    let mut gx = vec![0.0; c_n];
                    for c in 0..c_n {
                        for p in 0..hw {
                            gx[c] += g[c * hw + p];
                        }
                    }
                    self.accum(x, &gx);
                }
            }
        }
        Ok(())
    }

    /// Shared gradient plumbing for binary pointwise ops with scalar
    /// broadcast: `per` maps (a, b, gy) to the two local derivatives.
    fn pair_grads(
        &self,
        a: TensorId,
        b: TensorId,
        g: &[f64],
        per: impl Fn(f64, f64, f64) -> (f64, f64),
    ) -> (Vec<f64>, Vec<f64>) {
        let av = self.val(a);
        let bv = self.val(b);
        let (na, nb) = (av.len(), bv.len());
        if na == nb {
            let mut ga = vec![0.0; na];
            let mut gb = vec![0.0; nb];
            for i in 0..na {
                let (da, db) = per(av[i], bv[i], g[i]);
                ga[i] = da;
                gb[i] = db;
            }
            (ga, gb)
        } else if na == 1 {
            let mut ga = vec![0.0; 1];
            let mut gb = vec![0.0; nb];
            for i in 0..nb {
                let (da, db) = per(av[0], bv[i], g[i]);
                ga[0] += da;
                gb[i] = db;
            }
            (ga, gb)
        } else {
            let mut ga = vec![0.0; na];
            let mut gb = vec![0.0; 1];
            for i in 0..na {
                let (da, db) = per(av[i], bv[0], g[i]);
                ga[i] = da;
                gb[0] += db;
            }
            (ga, gb)
        }
    }
}
