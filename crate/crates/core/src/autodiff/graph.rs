use std::fmt;
use std::ops::Range;

use thiserror::Error;

use super::kernels;
use super::tensor::{numel, pairwise_sum, spatial, voxels, Shape4, Tensor, SCALAR};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape4,
        right: Shape4,
    },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("root node {0} is not scalar (shape {1:?})")]
    NotScalar(usize, Shape4),
    #[error("node {0} has not been evaluated; run forward first")]
    NotEvaluated(usize),
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
}

type GResult<T> = Result<T, GraphError>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis-aligned crop: channel range plus one range per spatial axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub c: Range<usize>,
    pub x: Range<usize>,
    pub y: Range<usize>,
    pub z: Range<usize>,
}

impl Region {
    pub fn shape(&self) -> Shape4 {
        [self.c.len(), self.x.len(), self.y.len(), self.z.len()]
    }

    /// All channels, spatial extent shrunk by `margin` on every face.
    pub fn interior(shape: Shape4, margin: usize) -> Region {
        Region {
            c: 0..shape[0],
            x: margin..shape[1].saturating_sub(margin),
            y: margin..shape[2].saturating_sub(margin),
            z: margin..shape[3].saturating_sub(margin),
        }
    }

    pub fn channels(shape: Shape4, c: Range<usize>) -> Region {
        Region {
            c,
            x: 0..shape[1],
            y: 0..shape[2],
            z: 0..shape[3],
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    Square(Var),
    SqrtEps(Var, f64),
    DivEps(Var, Var, f64),
    SpatialGradient(Var, usize),
    BoxMean(Var, usize),
    WarpLinear { image: Var, disp: Var },
    ReduceMean(Var),
    ReduceSum(Var),
    Stack(Vec<Var>),
    Slice(Var, Region),
    Conv3d { input: Var, weight: Var, bias: Var },
    LeakyRelu(Var, f64),
    AvgPool2(Var),
    Upsample(Var, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScalarMul(..) => "scalar_mul",
            Op::Square(..) => "square",
            Op::SqrtEps(..) => "sqrt_eps",
            Op::DivEps(..) => "div_eps",
            Op::SpatialGradient(..) => "spatial_gradient",
            Op::BoxMean(..) => "box_mean",
            Op::WarpLinear { .. } => "warp_linear",
            Op::ReduceMean(..) => "reduce_mean",
            Op::ReduceSum(..) => "reduce_sum",
            Op::Stack(..) => "stack",
            Op::Slice(..) => "slice",
            Op::Conv3d { .. } => "conv3d",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::AvgPool2(..) => "avg_pool2",
            Op::Upsample(..) => "upsample_linear",
        }
    }
}

struct Node {
    op: Op,
    shape: Shape4,
    value: Option<Tensor>,
    needs_grad: bool,
}

/// Define-then-run computation graph over dense grids.
///
/// Nodes are appended in topological order. Construction checks shapes;
/// [`Graph::forward`] evaluates every pending node up to the requested root
/// and [`Graph::backward`] propagates adjoints from a scalar root back to the
/// differentiable leaves.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    evaluated: usize,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("evaluated", &self.evaluated)
            .finish()
    }
}

/// Adjoints of a scalar root with respect to every differentiable node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].shape
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Number of nodes of the given primitive kind.
    pub fn count_op(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == name).count()
    }

    fn push(&mut self, op: Op, shape: Shape4) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            value: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::DivEps(a, b, _) => vec![*a, *b],
            Op::ScalarMul(a, _)
            | Op::Square(a)
            | Op::SqrtEps(a, _)
            | Op::SpatialGradient(a, _)
            | Op::BoxMean(a, _)
            | Op::ReduceMean(a)
            | Op::ReduceSum(a)
            | Op::Slice(a, _)
            | Op::LeakyRelu(a, _)
            | Op::AvgPool2(a)
            | Op::Upsample(a, _) => vec![*a],
            Op::WarpLinear { image, disp } => vec![*image, *disp],
            Op::Stack(vs) => vs.clone(),
            Op::Conv3d {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
        }
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        let shape = value.shape;
        self.nodes.push(Node {
            op: Op::Leaf,
            shape,
            value: Some(value),
            needs_grad,
        });
        if self.evaluated == self.nodes.len() - 1 {
            self.evaluated += 1;
        }
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> GResult<Shape4> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(GraphError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> GResult<Var> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> GResult<Var> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> GResult<Var> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn scalar_mul(&mut self, a: Var, k: f64) -> Var {
        let s = self.shape(a);
        self.push(Op::ScalarMul(a, k), s)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        self.push(Op::Square(a), s)
    }

    /// `sqrt(a + eps)`.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let s = self.shape(a);
        self.push(Op::SqrtEps(a, eps), s)
    }

    /// `a / (b + eps)`.
    pub fn div_eps(&mut self, a: Var, b: Var, eps: f64) -> GResult<Var> {
        let s = self.same_shape("div_eps", a, b)?;
        Ok(self.push(Op::DivEps(a, b, eps), s))
    }

    /// Derivative of every channel along spatial `axis` (0 = x).
    pub fn spatial_gradient(&mut self, a: Var, axis: usize) -> GResult<Var> {
        if axis > 2 {
            return Err(GraphError::Invalid {
                op: "spatial_gradient",
                reason: format!("axis {axis} out of range"),
            });
        }
        let s = self.shape(a);
        Ok(self.push(Op::SpatialGradient(a, axis), s))
    }

    pub fn box_mean(&mut self, a: Var, radius: usize) -> Var {
        let s = self.shape(a);
        self.push(Op::BoxMean(a, radius), s)
    }

    /// Pull-back of every channel of `image` through the 3-channel
    /// displacement `disp`; the result lives on `disp`'s grid.
    pub fn warp_linear(&mut self, image: Var, disp: Var) -> GResult<Var> {
        let (si, sd) = (self.shape(image), self.shape(disp));
        if sd[0] != 3 {
            return Err(GraphError::Invalid {
                op: "warp_linear",
                reason: format!("displacement must have 3 channels, shape {sd:?}"),
            });
        }
        Ok(self.push(Op::WarpLinear { image, disp }, [si[0], sd[1], sd[2], sd[3]]))
    }

    pub fn reduce_mean(&mut self, a: Var) -> Var {
        self.push(Op::ReduceMean(a), SCALAR)
    }

    pub fn reduce_sum(&mut self, a: Var) -> Var {
        self.push(Op::ReduceSum(a), SCALAR)
    }

    /// Concatenates along the channel axis.
    pub fn stack(&mut self, parts: &[Var]) -> GResult<Var> {
        let first = *parts.first().ok_or_else(|| GraphError::Invalid {
            op: "stack",
            reason: "no inputs".into(),
        })?;
        let s0 = self.shape(first);
        let mut c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != s0[1..] {
                return Err(GraphError::ShapeMismatch {
                    op: "stack",
                    left: s0,
                    right: s,
                });
            }
            c += s[0];
        }
        Ok(self.push(Op::Stack(parts.to_vec()), [c, s0[1], s0[2], s0[3]]))
    }

    pub fn slice(&mut self, a: Var, region: Region) -> GResult<Var> {
        let s = self.shape(a);
        let ok = [&region.c, &region.x, &region.y, &region.z]
            .iter()
            .zip(s)
            .all(|(r, n)| r.start < r.end && r.end <= n);
        if !ok {
            return Err(GraphError::Invalid {
                op: "slice",
                reason: format!("region {region:?} outside shape {s:?}"),
            });
        }
        let shape = region.shape();
        Ok(self.push(Op::Slice(a, region), shape))
    }

    /// Same-padded convolution; `weight` has shape `[cout*cin, k, k, k]`,
    /// `bias` has shape `[cout, 1, 1, 1]`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var) -> GResult<Var> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        let cout = sb[0];
        let k = sw[1];
        if sb[1..] != [1, 1, 1] || sw[0] != cout * si[0] || sw[2] != k || sw[3] != k || k % 2 == 0 {
            return Err(GraphError::Invalid {
                op: "conv3d",
                reason: format!("input {si:?}, weight {sw:?}, bias {sb:?} are inconsistent"),
            });
        }
        Ok(self.push(
            Op::Conv3d {
                input,
                weight,
                bias,
            },
            [cout, si[1], si[2], si[3]],
        ))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = self.shape(a);
        self.push(Op::LeakyRelu(a, slope), s)
    }

    pub fn avg_pool2(&mut self, a: Var) -> GResult<Var> {
        let s = self.shape(a);
        if s[1..].iter().any(|n| n % 2 != 0) {
            return Err(GraphError::Invalid {
                op: "avg_pool2",
                reason: format!("spatial shape {s:?} is not even"),
            });
        }
        Ok(self.push(Op::AvgPool2(a), [s[0], s[1] / 2, s[2] / 2, s[3] / 2]))
    }

    pub fn upsample_linear(&mut self, a: Var, factor: usize) -> GResult<Var> {
        if factor == 0 {
            return Err(GraphError::Invalid {
                op: "upsample_linear",
                reason: "factor must be positive".into(),
            });
        }
        let s = self.shape(a);
        Ok(self.push(
            Op::Upsample(a, factor),
            [s[0], s[1] * factor, s[2] * factor, s[3] * factor],
        ))
    }

    /// Evaluated value of `v`.
    pub fn value(&self, v: Var) -> GResult<&Tensor> {
        self.nodes[v.0]
            .value
            .as_ref()
            .ok_or(GraphError::NotEvaluated(v.0))
    }

    /// Evaluates all pending nodes up to and including `root`. Returns the
    /// root's value when it is scalar.
    pub fn forward(&mut self, root: Var) -> GResult<f64> {
        self.evaluate(root)?;
        let node = &self.nodes[root.0];
        if node.shape != SCALAR {
            return Err(GraphError::NotScalar(root.0, node.shape));
        }
        Ok(node.value.as_ref().unwrap().item())
    }

    /// Like [`Graph::forward`] but for roots of any shape.
    pub fn evaluate(&mut self, root: Var) -> GResult<()> {
        while self.evaluated <= root.0 {
            let i = self.evaluated;
            if self.nodes[i].value.is_none() {
                let value = self.compute(i);
                if value.data.iter().any(|v| !v.is_finite()) {
                    return Err(GraphError::NonFinite {
                        node: i,
                        op: self.nodes[i].op.name(),
                    });
                }
                self.nodes[i].value = Some(value);
            }
            self.evaluated += 1;
        }
        Ok(())
    }

    fn val(&self, v: Var) -> &Tensor {
        self.nodes[v.0]
            .value
            .as_ref()
            .expect("inputs are evaluated before their consumers")
    }

    fn compute(&self, i: usize) -> Tensor {
        let node = &self.nodes[i];
        let shape = node.shape;
        let unary = |a: Var, f: &dyn Fn(f64) -> f64| Tensor {
            shape,
            data: self.val(a).data.iter().map(|&x| f(x)).collect(),
        };
        let binary = |a: Var, b: Var, f: &dyn Fn(f64, f64) -> f64| Tensor {
            shape,
            data: self
                .val(a)
                .data
                .iter()
                .zip(&self.val(b).data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        };
        match &node.op {
            Op::Leaf => unreachable!("leaves carry their value"),
            Op::Add(a, b) => binary(*a, *b, &|x, y| x + y),
            Op::Sub(a, b) => binary(*a, *b, &|x, y| x - y),
            Op::Mul(a, b) => binary(*a, *b, &|x, y| x * y),
            Op::ScalarMul(a, k) => unary(*a, &|x| k * x),
            Op::Square(a) => unary(*a, &|x| x * x),
            Op::SqrtEps(a, eps) => unary(*a, &|x| (x + eps).sqrt()),
            Op::DivEps(a, b, eps) => binary(*a, *b, &|x, y| x / (y + eps)),
            Op::LeakyRelu(a, s) => unary(*a, &|x| if x > 0.0 { x } else { s * x }),
            Op::SpatialGradient(a, axis) => {
                let src = self.val(*a);
                let mut out = Tensor::zeros(shape);
                for c in 0..shape[0] {
                    kernels::spatial_gradient(src.channel(c), out.channel_mut(c), spatial(shape), *axis);
                }
                out
            }
            Op::BoxMean(a, r) => {
                let src = self.val(*a);
                let mut out = Tensor::zeros(shape);
                for c in 0..shape[0] {
                    kernels::box_mean(src.channel(c), out.channel_mut(c), spatial(shape), *r);
                }
                out
            }
            Op::WarpLinear { image, disp } => {
                let (img, d) = (self.val(*image), self.val(*disp));
                let mut out = Tensor::zeros(shape);
                kernels::warp_linear(
                    &img.data,
                    img.spatial(),
                    img.channels(),
                    &d.data,
                    d.spatial(),
                    &mut out.data,
                );
                out
            }
            Op::ReduceMean(a) => {
                let x = self.val(*a);
                Tensor::scalar(pairwise_sum(&x.data) / x.numel() as f64)
            }
            Op::ReduceSum(a) => Tensor::scalar(pairwise_sum(&self.val(*a).data)),
            Op::Stack(parts) => {
                let mut data = Vec::with_capacity(numel(shape));
                for p in parts {
                    data.extend_from_slice(&self.val(*p).data);
                }
                Tensor { shape, data }
            }
            Op::Slice(a, region) => {
                let src = self.val(*a);
                let mut data = Vec::with_capacity(numel(shape));
                for_region(src.shape, region, |off, len| {
                    data.extend_from_slice(&src.data[off..off + len])
                });
                Tensor { shape, data }
            }
            Op::Conv3d {
                input,
                weight,
                bias,
            } => {
                let (x, w, b) = (self.val(*input), self.val(*weight), self.val(*bias));
                let mut out = Tensor::zeros(shape);
                kernels::conv3d(
                    &x.data,
                    x.channels(),
                    x.spatial(),
                    &w.data,
                    &b.data,
                    shape[0],
                    w.shape[1],
                    &mut out.data,
                );
                out
            }
            Op::AvgPool2(a) => {
                let src = self.val(*a);
                let mut out = Tensor::zeros(shape);
                for c in 0..shape[0] {
                    kernels::avg_pool2(src.channel(c), src.spatial(), out.channel_mut(c));
                }
                out
            }
            Op::Upsample(a, f) => {
                let src = self.val(*a);
                let mut out = Tensor::zeros(shape);
                for c in 0..shape[0] {
                    kernels::upsample_linear(src.channel(c), src.spatial(), *f, out.channel_mut(c));
                }
                out
            }
        }
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> GResult<Gradients> {
        let node = &self.nodes[root.0];
        if node.shape != SCALAR {
            return Err(GraphError::NotScalar(root.0, node.shape));
        }
        if node.value.is_none() {
            return Err(GraphError::NotEvaluated(root.0));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            // Only leaf and root adjoints are reported; intermediates are freed.
            if matches!(self.nodes[i].op, Op::Leaf) || i == root.0 {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let shape = self.nodes[v.0].shape;
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (o, v) in gb.data.iter_mut().zip(&g.data) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), y) in ga.data.iter_mut().zip(&g.data).zip(&vb.data) {
                        *o += gv * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, gv), x) in gb.data.iter_mut().zip(&g.data).zip(&va.data) {
                        *o += gv * x;
                    }
                }
            }
            Op::ScalarMul(a, k) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, gv) in ga.data.iter_mut().zip(&g.data) {
                        *o += k * gv;
                    }
                }
            }
            Op::Square(a) => {
                let va = self.val(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), x) in ga.data.iter_mut().zip(&g.data).zip(&va.data) {
                        *o += 2.0 * x * gv;
                    }
                }
            }
            Op::SqrtEps(a, _) => {
                let out = node.value.as_ref().unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), y) in ga.data.iter_mut().zip(&g.data).zip(&out.data) {
                        *o += gv / (2.0 * y);
                    }
                }
            }
            Op::DivEps(a, b, eps) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), y) in ga.data.iter_mut().zip(&g.data).zip(&vb.data) {
                        *o += gv / (y + eps);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (((o, gv), x), y) in
                        gb.data.iter_mut().zip(&g.data).zip(&va.data).zip(&vb.data)
                    {
                        let d = y + eps;
                        *o -= gv * x / (d * d);
                    }
                }
            }
            Op::LeakyRelu(a, s) => {
                let va = self.val(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), x) in ga.data.iter_mut().zip(&g.data).zip(&va.data) {
                        *o += if *x > 0.0 { *gv } else { s * gv };
                    }
                }
            }
            Op::SpatialGradient(a, axis) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let dims = spatial(node.shape);
                    for c in 0..node.shape[0] {
                        kernels::spatial_gradient_adjoint(g.channel(c), ga.channel_mut(c), dims, *axis);
                    }
                }
            }
            Op::BoxMean(a, r) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let dims = spatial(node.shape);
                    for c in 0..node.shape[0] {
                        kernels::box_mean_adjoint(g.channel(c), ga.channel_mut(c), dims, *r);
                    }
                }
            }
            Op::WarpLinear { image, disp } => {
                let (img, d) = (self.val(*image), self.val(*disp));
                let need_img = self.nodes[image.0].needs_grad;
                let need_disp = self.nodes[disp.0].needs_grad;
                let mut gi = need_img.then(|| Tensor::zeros(img.shape));
                let mut gd = need_disp.then(|| Tensor::zeros(d.shape));
                kernels::warp_linear_adjoint(
                    &img.data,
                    img.spatial(),
                    img.channels(),
                    &d.data,
                    d.spatial(),
                    &g.data,
                    gi.as_mut().map(|t| t.data.as_mut_slice()),
                    gd.as_mut().map(|t| t.data.as_mut_slice()),
                );
                if let (Some(t), Some(acc)) = (gi, self.acc(grads, *image)) {
                    acc.add_assign(&t);
                }
                if let (Some(t), Some(acc)) = (gd, self.acc(grads, *disp)) {
                    acc.add_assign(&t);
                }
            }
            Op::ReduceMean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g.item() / ga.numel() as f64;
                    for o in ga.data.iter_mut() {
                        *o += s;
                    }
                }
            }
            Op::ReduceSum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g.item();
                    for o in ga.data.iter_mut() {
                        *o += s;
                    }
                }
            }
            Op::Stack(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = numel(self.shape(*p));
                    if let Some(gp) = self.acc(grads, *p) {
                        for (o, v) in gp.data.iter_mut().zip(&g.data[off..off + n]) {
                            *o += v;
                        }
                    }
                    off += n;
                }
            }
            Op::Slice(a, region) => {
                let src_shape = self.shape(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    let mut k = 0;
                    for_region(src_shape, region, |off, len| {
                        for (o, v) in ga.data[off..off + len].iter_mut().zip(&g.data[k..k + len]) {
                            *o += v;
                        }
                        k += len;
                    });
                }
            }
            Op::Conv3d {
                input,
                weight,
                bias,
            } => {
                let (x, w) = (self.val(*input), self.val(*weight));
                let mut gx = self.nodes[input.0].needs_grad.then(|| Tensor::zeros(x.shape));
                let mut gw = self.nodes[weight.0].needs_grad.then(|| Tensor::zeros(w.shape));
                let mut gb = self.nodes[bias.0]
                    .needs_grad
                    .then(|| Tensor::zeros(self.shape(*bias)));
                kernels::conv3d_adjoint(
                    &x.data,
                    x.channels(),
                    x.spatial(),
                    &w.data,
                    node.shape[0],
                    w.shape[1],
                    &g.data,
                    gx.as_mut().map(|t| t.data.as_mut_slice()),
                    gw.as_mut().map(|t| t.data.as_mut_slice()),
                    gb.as_mut().map(|t| t.data.as_mut_slice()),
                );
                for (t, v) in [(gx, *input), (gw, *weight), (gb, *bias)] {
                    if let (Some(t), Some(acc)) = (t, self.acc(grads, v)) {
                        acc.add_assign(&t);
                    }
                }
            }
            Op::AvgPool2(a) => {
                let src_shape = self.shape(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for c in 0..src_shape[0] {
                        kernels::avg_pool2_adjoint(g.channel(c), spatial(src_shape), ga.channel_mut(c));
                    }
                }
            }
            Op::Upsample(a, f) => {
                let src_shape = self.shape(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for c in 0..src_shape[0] {
                        kernels::upsample_linear_adjoint(
                            g.channel(c),
                            spatial(src_shape),
                            *f,
                            ga.channel_mut(c),
                        );
                    }
                }
            }
        }
    }
}

/// Visits the contiguous x-runs of `region` inside a tensor of `shape`, in
/// storage order.
fn for_region(shape: Shape4, region: &Region, mut f: impl FnMut(usize, usize)) {
    let n = voxels(shape);
    let (nx, ny) = (shape[1], shape[2]);
    let len = region.x.len();
    for c in region.c.clone() {
        for z in region.z.clone() {
            for y in region.y.clone() {
                f(c * n + region.x.start + nx * (y + ny * z), len);
            }
        }
    }
}
