//! Static computation graph with reverse-mode differentiation.
//!
//! Nodes are appended to an arena; a node's shape is fixed at construction
//! from its parents' shapes. Evaluation binds placeholders to tensors and
//! computes requested outputs in topological (id) order, freeing
//! intermediates as soon as their last consumer has run.
//!
//! `gradient` does not produce detached arrays: it appends new nodes that
//! compute the adjoints, so gradients can be differentiated again. That is
//! what makes backpropagation *through* an attack (and hence the mixed
//! second-order terms) work without special cases.

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{matmul, standard_normal, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Operation tag. Parents are stored inside the variants.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Placeholder { name: String },
    Variable { name: String },
    Constant,
    // elementwise binary, with limited broadcasting
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    // elementwise unary
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    // 0.5/sqrt(x) for x>0, 0 at x<=0; the guarded derivative of sqrt
    Rsqrt0(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Clamp(NodeId, f64, f64),
    Sign(NodeId),
    // piecewise-constant masks (zero gradient)
    GtZeroMask(NodeId),
    GeMask(NodeId, NodeId),
    RangeMask(NodeId, f64, f64),
    // linear / structural
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Transpose(NodeId),
    Reshape(NodeId, Vec<usize>),
    BroadcastTo(NodeId, Vec<usize>),
    SumTo(NodeId, Vec<usize>),
    SumAll(NodeId),
    MeanAll(NodeId),
    RowSum(NodeId),
    RowMax(NodeId),
    RowMaxMask(NodeId),
    // fused classifier head
    LogSoftmax(NodeId),
    TakePerRow { values: NodeId, index: NodeId },
    ScatterPerRow { grad: NodeId, index: NodeId, width: usize },
    // convolution trio (NCHW, stride 1, valid) and 2x2 pooling
    Conv2d { x: NodeId, w: NodeId },
    Conv2dBackInput { g: NodeId, w: NodeId, hw: (usize, usize) },
    Conv2dBackWeight { x: NodeId, g: NodeId, khw: (usize, usize) },
    MaxPool2(NodeId),
    MaxPoolMask(NodeId),
    Upsample2(NodeId),
    SumPool2(NodeId),
    // stochastic / gradient control
    GaussianNoise { x: NodeId, std: f64 },
    StraightThrough { primary: NodeId, surrogate: NodeId },
    StopGradient(NodeId),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Placeholder { .. } => "placeholder",
            Variable { .. } => "variable",
            Constant => "constant",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            Maximum(..) => "maximum",
            Minimum(..) => "minimum",
            Neg(..) => "neg",
            Exp(..) => "exp",
            Log(..) => "log",
            Sqrt(..) => "sqrt",
            Rsqrt0(..) => "rsqrt0",
            Sigmoid(..) => "sigmoid",
            Softplus(..) => "softplus",
            Relu(..) => "relu",
            LeakyRelu(..) => "leaky_relu",
            Clamp(..) => "clamp",
            Sign(..) => "sign",
            GtZeroMask(..) => "gt_zero_mask",
            GeMask(..) => "ge_mask",
            RangeMask(..) => "range_mask",
            MatMul { .. } => "matmul",
            Transpose(..) => "transpose",
            Reshape(..) => "reshape",
            BroadcastTo(..) => "broadcast_to",
            SumTo(..) => "sum_to",
            SumAll(..) => "sum_all",
            MeanAll(..) => "mean_all",
            RowSum(..) => "row_sum",
            RowMax(..) => "row_max",
            RowMaxMask(..) => "row_max_mask",
            LogSoftmax(..) => "log_softmax",
            TakePerRow { .. } => "take_per_row",
            ScatterPerRow { .. } => "scatter_per_row",
            Conv2d { .. } => "conv2d",
            Conv2dBackInput { .. } => "conv2d_back_input",
            Conv2dBackWeight { .. } => "conv2d_back_weight",
            MaxPool2(..) => "max_pool2",
            MaxPoolMask(..) => "max_pool_mask",
            Upsample2(..) => "upsample2",
            SumPool2(..) => "sum_pool2",
            GaussianNoise { .. } => "gaussian_noise",
            StraightThrough { .. } => "straight_through",
            StopGradient(..) => "stop_gradient",
        }
    }

    pub(crate) fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Placeholder { .. } | Variable { .. } | Constant => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Maximum(a, b) | Minimum(a, b)
            | GeMask(a, b) => vec![*a, *b],
            Neg(a) | Exp(a) | Log(a) | Sqrt(a) | Rsqrt0(a) | Sigmoid(a) | Softplus(a)
            | Relu(a) | LeakyRelu(a, _) | Clamp(a, _, _) | Sign(a) | GtZeroMask(a)
            | RangeMask(a, _, _) | Transpose(a) | Reshape(a, _) | BroadcastTo(a, _)
            | SumTo(a, _) | SumAll(a) | MeanAll(a) | RowSum(a) | RowMax(a) | RowMaxMask(a)
            | LogSoftmax(a) | MaxPool2(a) | MaxPoolMask(a) | Upsample2(a) | SumPool2(a)
            | StopGradient(a) => vec![*a],
            MatMul { a, b, .. } => vec![*a, *b],
            TakePerRow { values, index } => vec![*values, *index],
            ScatterPerRow { grad, index, .. } => vec![*grad, *index],
            Conv2d { x, w } => vec![*x, *w],
            Conv2dBackInput { g, w, .. } => vec![*g, *w],
            Conv2dBackWeight { x, g, .. } => vec![*x, *g],
            GaussianNoise { x, .. } => vec![*x],
            StraightThrough { primary, surrogate } => vec![*primary, *surrogate],
        }
    }
}

pub(crate) struct NodeData {
    pub(crate) op: Op,
    pub(crate) shape: Vec<usize>,
    pub(crate) requires_grad: bool,
}

/// Evaluation mode: training activates noise nodes, evaluation silences them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Placeholder bindings for one evaluation.
#[derive(Default)]
pub struct Bindings {
    map: HashMap<NodeId, Rc<Tensor>>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, ph: NodeId, value: Tensor) -> Self {
        self.map.insert(ph, Rc::new(value));
        self
    }

    pub fn set(&mut self, ph: NodeId, value: Tensor) {
        self.map.insert(ph, Rc::new(value));
    }

    pub fn set_rc(&mut self, ph: NodeId, value: Rc<Tensor>) {
        self.map.insert(ph, value);
    }

    fn get(&self, ph: NodeId) -> Option<&Rc<Tensor>> {
        self.map.get(&ph)
    }
}

/// Append-only computation graph.
pub struct Graph {
    pub(crate) nodes: Vec<NodeData>,
    values: Vec<Option<Rc<Tensor>>>, // variables and constants only
    seed: u64,
    noise_runs: Cell<u64>,
}

impl Graph {
    pub fn new(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            values: Vec::new(),
            seed,
            noise_runs: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.index()].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.index()].requires_grad
    }

    /// Reset the noise-draw counter so a fresh evaluation sequence replays.
    pub fn reset_noise(&self) {
        self.noise_runs.set(0);
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(NodeData {
            op,
            shape,
            requires_grad,
        });
        self.values.push(None);
        id
    }

    fn child(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let rg = op.parents().iter().any(|p| self.requires_grad(*p));
        self.push(op, shape, rg)
    }

    /// Child whose gradient never flows (masks, sign, stop-gradient).
    fn child_nograd(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.push(op, shape, false)
    }

    // ---- leaf constructors ----

    pub fn placeholder(&mut self, name: &str, shape: &[usize], requires_grad: bool) -> NodeId {
        self.push(
            Op::Placeholder {
                name: name.to_string(),
            },
            shape.to_vec(),
            requires_grad,
        )
    }

    pub fn variable(&mut self, name: &str, value: Tensor) -> NodeId {
        debug_assert!(value.all_finite(), "variable `{name}` holds non-finite values");
        let shape = value.shape().to_vec();
        let id = self.push(
            Op::Variable {
                name: name.to_string(),
            },
            shape,
            true,
        );
        self.values[id.index()] = Some(Rc::new(value));
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        debug_assert!(value.all_finite(), "constant holds non-finite values");
        let shape = value.shape().to_vec();
        let id = self.push(Op::Constant, shape, false);
        self.values[id.index()] = Some(Rc::new(value));
        id
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn set_variable(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        if !matches!(self.nodes[id.index()].op, Op::Variable { .. }) {
            return Err(Error::Shape("set_variable on a non-variable node".into()));
        }
        if self.nodes[id.index()].shape != value.shape() {
            return Err(Error::Shape(format!(
                "variable shape {:?}, new value {:?}",
                self.nodes[id.index()].shape,
                value.shape()
            )));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: "set_variable".to_string(),
                node: id.index(),
            });
        }
        self.values[id.index()] = Some(Rc::new(value));
        Ok(())
    }

    pub fn variable_value(&self, id: NodeId) -> Rc<Tensor> {
        self.values[id.index()]
            .clone()
            .expect("variable holds a value")
    }

    /// Mutable access to a variable's tensor; clones only if a previous
    /// evaluation still shares the buffer.
    pub fn variable_value_mut(&mut self, id: NodeId) -> &mut Tensor {
        debug_assert!(matches!(self.nodes[id.index()].op, Op::Variable { .. }));
        Rc::make_mut(
            self.values[id.index()]
                .as_mut()
                .expect("variable holds a value"),
        )
    }

    // ---- elementwise binary with broadcasting ----

    fn broadcast_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        broadcast_out_shape(sa, sb).ok_or_else(|| {
            Error::Shape(format!("{what}: incompatible shapes {sa:?} vs {sb:?}"))
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.broadcast_shape(a, b, "add")?;
        Ok(self.child(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.broadcast_shape(a, b, "sub")?;
        Ok(self.child(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.broadcast_shape(a, b, "mul")?;
        Ok(self.child(Op::Mul(a, b), s))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.broadcast_shape(a, b, "div")?;
        Ok(self.child(Op::Div(a, b), s))
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.broadcast_shape(a, b, "maximum")?;
        Ok(self.child(Op::Maximum(a, b), s))
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.broadcast_shape(a, b, "minimum")?;
        Ok(self.child(Op::Minimum(a, b), s))
    }

    pub fn ge_mask(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.broadcast_shape(a, b, "ge_mask")?;
        Ok(self.child_nograd(Op::GeMask(a, b), s))
    }

    // ---- elementwise unary ----

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.child(Op::Neg(a), s)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.child(Op::Exp(a), s)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.child(Op::Log(a), s)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.child(Op::Sqrt(a), s)
    }

    pub fn rsqrt0(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.child(Op::Rsqrt0(a), s)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.child(Op::Sigmoid(a), s)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.child(Op::Softplus(a), s)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.child(Op::Relu(a), s)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.child(Op::LeakyRelu(a, slope), s)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.child(Op::Clamp(a, lo, hi), s)
    }

    pub fn sign(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.child_nograd(Op::Sign(a), s)
    }

    pub fn gt_zero_mask(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.child_nograd(Op::GtZeroMask(a), s)
    }

    pub fn range_mask(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.child_nograd(Op::RangeMask(a, lo, hi), s)
    }

    // ---- linear / structural ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_ex(a, b, false, false)
    }

    pub fn matmul_ex(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs 2-D operands, got {sa:?} and {sb:?}"
            )));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims {ka} vs {kb} ({sa:?}/{sb:?}, ta={ta}, tb={tb})"
            )));
        }
        Ok(self.child(Op::MatMul { a, b, ta, tb }, vec![m, n]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::Shape(format!("transpose needs 2-D, got {sa:?}")));
        }
        let s = vec![sa[1], sa[0]];
        Ok(self.child(Op::Transpose(a), s))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let na: usize = self.shape(a).iter().product();
        let n: usize = shape.iter().product();
        if na != n {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?}",
                self.shape(a),
                shape
            )));
        }
        Ok(self.child(Op::Reshape(a, shape.to_vec()), shape.to_vec()))
    }

    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if !broadcast_compatible(self.shape(a), shape) {
            return Err(Error::Shape(format!(
                "cannot broadcast {:?} to {:?}",
                self.shape(a),
                shape
            )));
        }
        Ok(self.child(Op::BroadcastTo(a, shape.to_vec()), shape.to_vec()))
    }

    pub fn sum_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        if !broadcast_compatible(shape, self.shape(a)) {
            return Err(Error::Shape(format!(
                "cannot sum {:?} to {:?}",
                self.shape(a),
                shape
            )));
        }
        Ok(self.child(Op::SumTo(a, shape.to_vec()), shape.to_vec()))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.child(Op::SumAll(a), vec![])
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        self.child(Op::MeanAll(a), vec![])
    }

    /// [B,N] -> [B,1] sum over each row.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::Shape(format!("row_sum needs 2-D, got {sa:?}")));
        }
        let s = vec![sa[0], 1];
        Ok(self.child(Op::RowSum(a), s))
    }

    /// [B,N] -> [B,1] max over each row.
    pub fn row_max(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::Shape(format!("row_max needs 2-D, got {sa:?}")));
        }
        let s = vec![sa[0], 1];
        Ok(self.child(Op::RowMax(a), s))
    }

    fn row_max_mask(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.child_nograd(Op::RowMaxMask(a), s)
    }

    // ---- classifier head ----

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::Shape(format!("log_softmax needs 2-D, got {sa:?}")));
        }
        let s = sa.to_vec();
        Ok(self.child(Op::LogSoftmax(a), s))
    }

    /// Select `values[i, index[i]]` -> [B,1]. `index` carries integral values.
    pub fn take_per_row(&mut self, values: NodeId, index: NodeId) -> Result<NodeId> {
        let sv = self.shape(values);
        let si = self.shape(index);
        if sv.len() != 2 || si.len() != 1 || si[0] != sv[0] {
            return Err(Error::Shape(format!(
                "take_per_row: values {sv:?}, index {si:?}"
            )));
        }
        let s = vec![sv[0], 1];
        Ok(self.child(Op::TakePerRow { values, index }, s))
    }

    fn scatter_per_row(&mut self, grad: NodeId, index: NodeId, width: usize) -> NodeId {
        let b = self.shape(grad)[0];
        self.child(Op::ScatterPerRow { grad, index, width }, vec![b, width])
    }

    // ---- convolution / pooling ----

    /// NCHW valid convolution, stride 1. x: [b,c,h,w], w: [oc,c,kh,kw].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sx[2] < sw[2] || sx[3] < sw[3] {
            return Err(Error::Shape(format!("conv2d: x {sx:?}, w {sw:?}")));
        }
        let s = vec![sx[0], sw[0], sx[2] - sw[2] + 1, sx[3] - sw[3] + 1];
        Ok(self.child(Op::Conv2d { x, w }, s))
    }

    fn conv2d_back_input(&mut self, g: NodeId, w: NodeId, hw: (usize, usize)) -> NodeId {
        let sg = self.shape(g).to_vec();
        let sw = self.shape(w).to_vec();
        let s = vec![sg[0], sw[1], hw.0, hw.1];
        self.child(Op::Conv2dBackInput { g, w, hw }, s)
    }

    fn conv2d_back_weight(&mut self, x: NodeId, g: NodeId, khw: (usize, usize)) -> NodeId {
        let sx = self.shape(x).to_vec();
        let sg = self.shape(g).to_vec();
        let s = vec![sg[1], sx[1], khw.0, khw.1];
        self.child(Op::Conv2dBackWeight { x, g, khw }, s)
    }

    /// 2x2 max pooling, stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 4 || sa[2] % 2 != 0 || sa[3] % 2 != 0 {
            return Err(Error::Shape(format!("max_pool2 needs even NCHW, got {sa:?}")));
        }
        let s = vec![sa[0], sa[1], sa[2] / 2, sa[3] / 2];
        Ok(self.child(Op::MaxPool2(a), s))
    }

    fn max_pool_mask(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.child_nograd(Op::MaxPoolMask(a), s)
    }

    fn upsample2(&mut self, a: NodeId) -> NodeId {
        let sa = self.shape(a);
        let s = vec![sa[0], sa[1], sa[2] * 2, sa[3] * 2];
        self.child(Op::Upsample2(a), s)
    }

    fn sum_pool2(&mut self, a: NodeId) -> NodeId {
        let sa = self.shape(a);
        let s = vec![sa[0], sa[1], sa[2] / 2, sa[3] / 2];
        self.child(Op::SumPool2(a), s)
    }

    // ---- stochastic / gradient control ----

    /// Adds N(0, std^2) noise in train mode; identity in eval mode.
    pub fn gaussian_noise(&mut self, x: NodeId, std: f64) -> NodeId {
        let s = self.shape(x).to_vec();
        self.child(Op::GaussianNoise { x, std }, s)
    }

    /// Forward takes `primary`'s value; backward flows through `surrogate` only.
    pub fn straight_through(&mut self, primary: NodeId, surrogate: NodeId) -> Result<NodeId> {
        if self.shape(primary) != self.shape(surrogate) {
            return Err(Error::Shape(format!(
                "straight_through: {:?} vs {:?}",
                self.shape(primary),
                self.shape(surrogate)
            )));
        }
        let s = self.shape(primary).to_vec();
        let rg = self.requires_grad(surrogate);
        Ok(self.push(Op::StraightThrough { primary, surrogate }, s, rg))
    }

    /// Forward identity; gradient does not flow through to the parent.
    /// The node itself remains a legal `wrt` leaf (needed to evaluate
    /// gradients *at* detached points).
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::StopGradient(a), s, true)
    }

    /// Forward passes `node`'s value; backward uses the surrogate's
    /// derivative, or is zero when no surrogate is given.
    pub fn stop_or_reroute_gradient(
        &mut self,
        node: NodeId,
        surrogate: Option<NodeId>,
    ) -> Result<NodeId> {
        match surrogate {
            Some(s) => self.straight_through(node, s),
            None => Ok(self.stop_gradient(node)),
        }
    }

    // ---- composite helpers ----

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = self.scalar(c);
        self.mul(a, k).expect("scalar broadcast")
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = self.scalar(c);
        self.add(a, k).expect("scalar broadcast")
    }

    /// sqrt(sum(x^2)) over the whole tensor.
    pub fn l2_norm(&mut self, a: NodeId) -> NodeId {
        let sq = self.mul(a, a).expect("same shape");
        let s = self.sum_all(sq);
        self.sqrt(s)
    }

    /// Per-row l2 norm of a 2-D tensor -> [B,1].
    pub fn row_l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let sq = self.mul(a, a)?;
        let s = self.row_sum(sq)?;
        Ok(self.sqrt(s))
    }

    pub fn softmax(&mut self, logits: NodeId) -> Result<NodeId> {
        let ls = self.log_softmax(logits)?;
        Ok(self.exp(ls))
    }

    // ---- evaluation ----

    /// Evaluate `outputs` under `bindings`. Deterministic given bindings,
    /// the graph seed and the noise-run counter.
    pub fn eval(
        &self,
        outputs: &[NodeId],
        bindings: &Bindings,
        mode: Mode,
    ) -> Result<Vec<Rc<Tensor>>> {
        let n = self.nodes.len();
        let mut vals: Vec<Option<Rc<Tensor>>> = vec![None; n];
        self.eval_into(outputs, bindings, mode, &mut vals, &[])?;
        Ok(outputs
            .iter()
            .map(|o| vals[o.index()].clone().expect("output computed"))
            .collect())
    }

    /// Two evaluations sharing one value cache. Phase one runs, `between`
    /// mutates the listed variables, then phase two runs with every value
    /// not downstream of those variables reused instead of recomputed.
    #[allow(clippy::type_complexity)]
    pub fn eval_two_phase(
        &mut self,
        phase1: &[NodeId],
        phase2: &[NodeId],
        changed_vars: &[NodeId],
        bindings: &Bindings,
        mode: Mode,
        between: impl FnOnce(&mut Graph, &[Rc<Tensor>]) -> Result<()>,
    ) -> Result<(Vec<Rc<Tensor>>, Vec<Rc<Tensor>>)> {
        let n = self.nodes.len();
        // downstream closure of the variables phase two must not reuse
        let mut dirty = vec![false; n];
        for v in changed_vars {
            dirty[v.index()] = true;
        }
        for i in 0..n {
            if !dirty[i] {
                dirty[i] = self.nodes[i].op.parents().iter().any(|p| dirty[p.index()]);
            }
        }
        // what phase two needs
        let mut needed2 = vec![false; n];
        let mut stack: Vec<usize> = phase2.iter().map(|o| o.index()).collect();
        while let Some(i) = stack.pop() {
            if needed2[i] {
                continue;
            }
            needed2[i] = true;
            for p in self.nodes[i].op.parents() {
                if !needed2[p.index()] {
                    stack.push(p.index());
                }
            }
        }
        let carry: Vec<NodeId> = (0..n)
            .filter(|&i| needed2[i] && !dirty[i])
            .map(|i| NodeId(i as u32))
            .collect();

        let mut vals: Vec<Option<Rc<Tensor>>> = vec![None; n];
        self.eval_into(phase1, bindings, mode, &mut vals, &carry)?;
        let out1: Vec<Rc<Tensor>> = phase1
            .iter()
            .map(|o| vals[o.index()].clone().expect("phase-1 output computed"))
            .collect();
        // drop cached values phase two cannot reuse
        for i in 0..n {
            if vals[i].is_some() && !(needed2[i] && !dirty[i]) {
                vals[i] = None;
            }
        }
        between(self, &out1)?;
        self.eval_into(phase2, bindings, mode, &mut vals, &[])?;
        let out2 = phase2
            .iter()
            .map(|o| vals[o.index()].clone().expect("phase-2 output computed"))
            .collect();
        Ok((out1, out2))
    }

    /// Core evaluation pass. Values already present in `vals` are reused;
    /// `carry` nodes survive liveness freeing for a later pass.
    fn eval_into(
        &self,
        outputs: &[NodeId],
        bindings: &Bindings,
        mode: Mode,
        vals: &mut Vec<Option<Rc<Tensor>>>,
        carry: &[NodeId],
    ) -> Result<()> {
        let run = self.noise_runs.get();
        self.noise_runs.set(run + 1);

        let n = self.nodes.len();
        let mut needed = vec![false; n];
        let mut stack: Vec<usize> = outputs.iter().map(|o| o.index()).collect();
        while let Some(i) = stack.pop() {
            if needed[i] {
                continue;
            }
            needed[i] = true;
            if vals[i].is_some() {
                continue; // cached subtree
            }
            for p in self.nodes[i].op.parents() {
                if !needed[p.index()] {
                    stack.push(p.index());
                }
            }
        }
        let mut last_use = vec![0usize; n];
        for i in 0..n {
            if needed[i] && vals[i].is_none() {
                for p in self.nodes[i].op.parents() {
                    last_use[p.index()] = i;
                }
            }
        }
        let mut keep = vec![false; n];
        for o in outputs {
            keep[o.index()] = true;
        }
        for c in carry {
            keep[c.index()] = true;
        }

        let profile = std::env::var_os("ADVCRITIC_PROFILE").is_some();
        let mut op_time: HashMap<&'static str, (f64, u64)> = HashMap::new();
        let mut evaluated = 0u64;
        for i in 0..n {
            if !needed[i] || vals[i].is_some() {
                continue;
            }
            let t0 = if profile {
                Some(std::time::Instant::now())
            } else {
                None
            };
            // in-place fast path: reuse a dying parent buffer
            let t = match self.try_eval_in_place(i, vals, &last_use, &keep, bindings, mode, run) {
                Some(t) => t?,
                None => self.eval_node(i, vals, bindings, mode, run)?,
            };
            if !t.all_finite() {
                return Err(Error::NonFinite {
                    op: self.nodes[i].op.name().to_string(),
                    node: i,
                });
            }
            if let Some(t0) = t0 {
                let e = op_time.entry(self.nodes[i].op.name()).or_insert((0.0, 0));
                e.0 += t0.elapsed().as_secs_f64();
                e.1 += 1;
            }
            evaluated += 1;
            vals[i] = Some(t);
            for p in self.nodes[i].op.parents() {
                let pi = p.index();
                if last_use[pi] == i && !keep[pi] {
                    vals[pi] = None;
                }
            }
        }
        if profile {
            let mut rows: Vec<_> = op_time.into_iter().collect();
            rows.sort_by(|a, b| b.1 .0.partial_cmp(&a.1 .0).unwrap());
            let total: f64 = rows.iter().map(|(_, (t, _))| t).sum();
            eprintln!("eval profile: {total:.3}s over {evaluated} evaluated nodes");
            for (name, (t, c)) in rows.iter().take(12) {
                eprintln!("  {name:<18} {t:>8.3}s  x{c}");
            }
        }
        Ok(())
    }

    /// Elementwise ops whose output shape matches a dying parent can
    /// mutate that parent's buffer instead of allocating. Returns None
    /// when the general path must run.
    #[allow(clippy::too_many_arguments)]
    fn try_eval_in_place(
        &self,
        i: usize,
        vals: &mut [Option<Rc<Tensor>>],
        last_use: &[usize],
        keep: &[bool],
        _bindings: &Bindings,
        _mode: Mode,
        _run: u64,
    ) -> Option<Result<Rc<Tensor>>> {
        use Op::*;
        let node = &self.nodes[i];
        let stealable = |p: NodeId| -> bool {
            let pi = p.index();
            last_use[pi] == i
                && !keep[pi]
                && self.shape(p) == node.shape
                && vals[pi]
                    .as_ref()
                    .map_or(false, |rc| Rc::strong_count(rc) == 1)
                && !matches!(
                    self.nodes[pi].op,
                    Variable { .. } | Constant | Placeholder { .. }
                )
        };
        let steal = |vals: &mut [Option<Rc<Tensor>>], p: NodeId| -> Tensor {
            let rc = vals[p.index()].take().expect("stealable value present");
            Rc::try_unwrap(rc).expect("sole owner")
        };

        // unary maps
        let unary: Option<(NodeId, fn(f64) -> f64)> = match node.op {
            Neg(a) => Some((a, |v| -v)),
            Exp(a) => Some((a, f64::exp)),
            Log(a) => Some((a, f64::ln)),
            Sqrt(a) => Some((a, f64::sqrt)),
            Rsqrt0(a) => Some((a, |v| if v > 0.0 { 0.5 / v.sqrt() } else { 0.0 })),
            Sigmoid(a) => Some((a, sigmoid)),
            Softplus(a) => Some((a, softplus)),
            Relu(a) => Some((a, |v| v.max(0.0))),
            GtZeroMask(a) => Some((a, |v| if v > 0.0 { 1.0 } else { 0.0 })),
            Sign(a) => Some((a, |v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })),
            _ => None,
        };
        if let Some((a, f)) = unary {
            if stealable(a) {
                let mut t = steal(vals, a);
                for v in t.data_mut() {
                    *v = f(*v);
                }
                return Some(Ok(Rc::new(t)));
            }
            return None;
        }
        match node.op {
            LeakyRelu(a, slope) if stealable(a) => {
                let mut t = steal(vals, a);
                for v in t.data_mut() {
                    if *v <= 0.0 {
                        *v *= slope;
                    }
                }
                Some(Ok(Rc::new(t)))
            }
            Clamp(a, lo, hi) if stealable(a) => {
                let mut t = steal(vals, a);
                for v in t.data_mut() {
                    *v = v.clamp(lo, hi);
                }
                Some(Ok(Rc::new(t)))
            }
            RangeMask(a, lo, hi) if stealable(a) => {
                let mut t = steal(vals, a);
                for v in t.data_mut() {
                    *v = if *v > lo && *v < hi { 1.0 } else { 0.0 };
                }
                Some(Ok(Rc::new(t)))
            }
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Maximum(a, b) | Minimum(a, b) => {
                let f: fn(f64, f64) -> f64 = match node.op {
                    Add(..) => |x, y| x + y,
                    Sub(..) => |x, y| x - y,
                    Mul(..) => |x, y| x * y,
                    Div(..) => |x, y| x / y,
                    Maximum(..) => f64::max,
                    _ => f64::min,
                };
                // steal the full-shaped side; broadcast the other in
                if stealable(a) {
                    let bv = vals[b.index()].clone().expect("parent computed");
                    let mut t = steal(vals, a);
                    if zip_into(&mut t, &bv, false, f) {
                        return Some(Ok(Rc::new(t)));
                    }
                    vals[a.index()] = Some(Rc::new(t)); // put it back
                    return None;
                }
                if stealable(b) {
                    let av = vals[a.index()].clone().expect("parent computed");
                    let mut t = steal(vals, b);
                    if zip_into(&mut t, &av, true, f) {
                        return Some(Ok(Rc::new(t)));
                    }
                    vals[b.index()] = Some(Rc::new(t));
                    return None;
                }
                None
            }
            _ => None,
        }
    }

    /// Convenience: evaluate a single node.
    pub fn eval_one(&self, output: NodeId, bindings: &Bindings, mode: Mode) -> Result<Rc<Tensor>> {
        Ok(self.eval(&[output], bindings, mode)?.pop().unwrap())
    }

    fn eval_node(
        &self,
        i: usize,
        vals: &[Option<Rc<Tensor>>],
        bindings: &Bindings,
        mode: Mode,
        run: u64,
    ) -> Result<Rc<Tensor>> {
        use Op::*;
        let val = |id: NodeId| -> &Tensor { vals[id.index()].as_deref().expect("parent computed") };
        let node = &self.nodes[i];
        let out = match &node.op {
            Placeholder { name } => {
                let t = bindings
                    .get(NodeId(i as u32))
                    .ok_or_else(|| Error::UnboundPlaceholder(name.clone()))?;
                if t.shape() != node.shape {
                    return Err(Error::Shape(format!(
                        "placeholder `{name}` bound with {:?}, declared {:?}",
                        t.shape(),
                        node.shape
                    )));
                }
                if !t.all_finite() {
                    return Err(Error::NonFinite {
                        op: format!("placeholder `{name}`"),
                        node: i,
                    });
                }
                return Ok(t.clone());
            }
            Variable { name } => {
                return self.values[i]
                    .clone()
                    .ok_or_else(|| Error::UnboundPlaceholder(name.clone()))
            }
            Constant => return Ok(self.values[i].clone().expect("constant value")),
            Add(a, b) => broadcast_zip(val(*a), val(*b), &node.shape, |x, y| x + y),
            Sub(a, b) => broadcast_zip(val(*a), val(*b), &node.shape, |x, y| x - y),
            Mul(a, b) => broadcast_zip(val(*a), val(*b), &node.shape, |x, y| x * y),
            Div(a, b) => broadcast_zip(val(*a), val(*b), &node.shape, |x, y| x / y),
            Maximum(a, b) => broadcast_zip(val(*a), val(*b), &node.shape, f64::max),
            Minimum(a, b) => broadcast_zip(val(*a), val(*b), &node.shape, f64::min),
            GeMask(a, b) => broadcast_zip(val(*a), val(*b), &node.shape, |x, y| {
                if x >= y {
                    1.0
                } else {
                    0.0
                }
            }),
            Neg(a) => val(*a).map(|v| -v),
            Exp(a) => val(*a).map(f64::exp),
            Log(a) => val(*a).map(f64::ln),
            Sqrt(a) => val(*a).map(f64::sqrt),
            Rsqrt0(a) => val(*a).map(|v| if v > 0.0 { 0.5 / v.sqrt() } else { 0.0 }),
            Sigmoid(a) => val(*a).map(sigmoid),
            Softplus(a) => val(*a).map(softplus),
            Relu(a) => val(*a).map(|v| v.max(0.0)),
            LeakyRelu(a, slope) => {
                let s = *slope;
                val(*a).map(|v| if v > 0.0 { v } else { s * v })
            }
            Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                val(*a).map(|v| v.clamp(lo, hi))
            }
            Sign(a) => val(*a).map(|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            GtZeroMask(a) => val(*a).map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            RangeMask(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                val(*a).map(|v| if v > lo && v < hi { 1.0 } else { 0.0 })
            }
            MatMul { a, b, ta, tb } => matmul(val(*a), *ta, val(*b), *tb)?,
            Transpose(a) => val(*a).transposed()?,
            Reshape(a, shape) => val(*a).reshaped(shape)?,
            BroadcastTo(a, shape) => broadcast_to(val(*a), shape),
            SumTo(a, shape) => sum_to(val(*a), shape),
            SumAll(a) => Tensor::scalar(val(*a).data().iter().sum()),
            MeanAll(a) => {
                let t = val(*a);
                Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
            }
            RowSum(a) => {
                let t = val(*a);
                let b = t.shape()[0];
                let mut out = Vec::with_capacity(b);
                for r in 0..b {
                    out.push(t.row(r).iter().sum());
                }
                Tensor::new(vec![b, 1], out)?
            }
            RowMax(a) => {
                let t = val(*a);
                let b = t.shape()[0];
                let mut out = Vec::with_capacity(b);
                for r in 0..b {
                    out.push(t.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max));
                }
                Tensor::new(vec![b, 1], out)?
            }
            RowMaxMask(a) => {
                let t = val(*a);
                let (b, n) = (t.shape()[0], t.shape()[1]);
                let mut out = vec![0.0; b * n];
                for r in 0..b {
                    let row = t.row(r);
                    let mut best = 0usize;
                    for j in 1..n {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    out[r * n + best] = 1.0;
                }
                Tensor::new(vec![b, n], out)?
            }
            LogSoftmax(a) => log_softmax_rows(val(*a)),
            TakePerRow { values, index } => {
                let v = val(*values);
                let idx = val(*index);
                let (b, k) = (v.shape()[0], v.shape()[1]);
                let mut out = Vec::with_capacity(b);
                for r in 0..b {
                    let j = idx.data()[r] as usize;
                    if j >= k {
                        return Err(Error::LabelRange { label: j, k });
                    }
                    out.push(v.data()[r * k + j]);
                }
                Tensor::new(vec![b, 1], out)?
            }
            ScatterPerRow { grad, index, width } => {
                let gsrc = val(*grad);
                let idx = val(*index);
                let b = gsrc.shape()[0];
                let mut out = vec![0.0; b * width];
                for r in 0..b {
                    let j = idx.data()[r] as usize;
                    if j >= *width {
                        return Err(Error::LabelRange { label: j, k: *width });
                    }
                    out[r * width + j] = gsrc.data()[r];
                }
                Tensor::new(vec![b, *width], out)?
            }
            Conv2d { x, w } => conv2d(val(*x), val(*w))?,
            Conv2dBackInput { g, w, hw } => conv2d_back_input(val(*g), val(*w), *hw)?,
            Conv2dBackWeight { x, g, khw } => conv2d_back_weight(val(*x), val(*g), *khw)?,
            MaxPool2(a) => max_pool2(val(*a)),
            MaxPoolMask(a) => max_pool_mask(val(*a)),
            Upsample2(a) => upsample2(val(*a)),
            SumPool2(a) => sum_pool2(val(*a)),
            GaussianNoise { x, std } => {
                let t = val(*x);
                match mode {
                    Mode::Eval => t.clone(),
                    Mode::Train => {
                        let mut rng = self.noise_rng(i as u64, run);
                        let s = *std;
                        let data = t
                            .data()
                            .iter()
                            .map(|&v| v + s * standard_normal(&mut rng))
                            .collect();
                        Tensor::new(t.shape().to_vec(), data)?
                    }
                }
            }
            StraightThrough { primary, .. } => val(*primary).clone(),
            StopGradient(a) => val(*a).clone(),
        };
        Ok(Rc::new(out))
    }

    fn noise_rng(&self, node: u64, run: u64) -> ChaCha8Rng {
        // splitmix-style mixing of (seed, node, run) into one stream seed
        let mut z = self
            .seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(node.wrapping_mul(0xbf58476d1ce4e5b9))
            .wrapping_add(run.wrapping_mul(0x94d049bb133111eb));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
        ChaCha8Rng::seed_from_u64(z)
    }
}

/// Right-aligned broadcast result of two shapes, if compatible.
fn broadcast_out_shape(sa: &[usize], sb: &[usize]) -> Option<Vec<usize>> {
    let nd = sa.len().max(sb.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - sa.len() { 1 } else { sa[i - (nd - sa.len())] };
        let db = if i < nd - sb.len() { 1 } else { sb[i - (nd - sb.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

/// Can `from` broadcast to `to` (right-aligned, no shrinking)?
fn broadcast_compatible(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let off = to.len() - from.len();
    from.iter()
        .enumerate()
        .all(|(i, &d)| d == to[off + i] || d == 1)
}

/// Row-major strides, with 0 for broadcast (size-1 or missing) dims.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; out.len()];
    let off = out.len() - shape.len();
    let mut s = 1usize;
    for i in (0..shape.len()).rev() {
        strides[off + i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// In-place combine: `out` already holds the full-shaped operand, and
/// `other` broadcasts into it. `swap` means `out` is the second operand.
/// Returns false when the pattern needs the general allocating path.
fn zip_into(out: &mut Tensor, other: &Tensor, swap: bool, f: fn(f64, f64) -> f64) -> bool {
    let comb = |o: f64, v: f64| if swap { f(v, o) } else { f(o, v) };
    if other.shape() == out.shape() {
        for (o, &v) in out.data_mut().iter_mut().zip(other.data()) {
            *o = comb(*o, v);
        }
        return true;
    }
    if other.numel() == 1 {
        let v = other.data()[0];
        for o in out.data_mut() {
            *o = comb(*o, v);
        }
        return true;
    }
    if out.shape().len() == 2
        && other.shape().len() == 2
        && other.shape() == [out.shape()[0], 1]
    {
        let ncol = out.shape()[1];
        for (r, chunk) in out.data_mut().chunks_exact_mut(ncol).enumerate() {
            let v = other.data()[r];
            for o in chunk {
                *o = comb(*o, v);
            }
        }
        return true;
    }
    if out.shape().len() > other.shape().len() && out.shape().ends_with(other.shape()) {
        let block = other.numel();
        for chunk in out.data_mut().chunks_exact_mut(block) {
            for (o, &v) in chunk.iter_mut().zip(other.data()) {
                *o = comb(*o, v);
            }
        }
        return true;
    }
    false
}

/// Elementwise combine under right-aligned broadcasting.
fn broadcast_zip(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(out_shape.to_vec(), data).expect("same-shape zip");
    }
    // fast path: b is a scalar
    if b.numel() == 1 && b.shape().iter().all(|&d| d == 1) {
        let y = b.data()[0];
        return Tensor::new(out_shape.to_vec(), a.data().iter().map(|&x| f(x, y)).collect())
            .expect("scalar rhs zip");
    }
    if a.numel() == 1 && a.shape().iter().all(|&d| d == 1) {
        let x = a.data()[0];
        return Tensor::new(out_shape.to_vec(), b.data().iter().map(|&y| f(x, y)).collect())
            .expect("scalar lhs zip");
    }
    // fast path: 2-D row broadcast [B,N] op [B,1]
    if a.shape().len() == 2
        && b.shape().len() == 2
        && a.shape() == out_shape
        && b.shape() == [a.shape()[0], 1]
    {
        let (bn, n) = (a.shape()[0], a.shape()[1]);
        let mut data = Vec::with_capacity(bn * n);
        for r in 0..bn {
            let y = b.data()[r];
            data.extend(a.row(r).iter().map(|&x| f(x, y)));
        }
        return Tensor::new(out_shape.to_vec(), data).expect("row rhs zip");
    }
    // fast path: suffix broadcast [.., N] op [N]
    if a.shape() == out_shape && a.shape().len() > b.shape().len() && a.shape().ends_with(b.shape())
    {
        let block = b.numel();
        let mut data = Vec::with_capacity(a.numel());
        for chunk in a.data().chunks_exact(block) {
            data.extend(chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
        }
        return Tensor::new(out_shape.to_vec(), data).expect("suffix rhs zip");
    }
    // general strided walk
    let n: usize = out_shape.iter().product();
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    let mut data = Vec::with_capacity(n);
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        data.push(f(a.data()[oa], b.data()[ob]));
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape.to_vec(), data).expect("strided zip")
}

fn broadcast_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    if t.numel() == 1 {
        return Tensor::full(shape, t.data()[0]);
    }
    // suffix: repeat the whole block
    if shape.len() > t.shape().len() && shape.ends_with(t.shape()) {
        let n: usize = shape.iter().product();
        let block = t.numel();
        let reps = n / block;
        let mut data = Vec::with_capacity(n);
        for _ in 0..reps {
            data.extend_from_slice(t.data());
        }
        return Tensor::new(shape.to_vec(), data).expect("suffix broadcast");
    }
    // [B,1] -> [B,N]
    if shape.len() == 2 && t.shape() == [shape[0], 1] {
        let (b, ncol) = (shape[0], shape[1]);
        let mut data = Vec::with_capacity(b * ncol);
        for r in 0..b {
            data.extend(std::iter::repeat(t.data()[r]).take(ncol));
        }
        return Tensor::new(shape.to_vec(), data).expect("row broadcast");
    }
    // general strided walk
    let n: usize = shape.iter().product();
    let st = broadcast_strides(t.shape(), shape);
    let mut idx = vec![0usize; shape.len()];
    let mut data = Vec::with_capacity(n);
    let mut off = 0usize;
    for _ in 0..n {
        data.push(t.data()[off]);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            off += st[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= st[d] * shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(shape.to_vec(), data).expect("strided broadcast")
}

fn sum_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    if shape.is_empty() {
        return Tensor::scalar(t.data().iter().sum());
    }
    if t.shape().len() > shape.len() && t.shape().ends_with(shape) {
        let block: usize = shape.iter().product();
        let mut out = vec![0.0; block];
        for chunk in t.data().chunks_exact(block) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        return Tensor::new(shape.to_vec(), out).expect("suffix sum");
    }
    if shape.len() == 2 && t.shape().len() == 2 && shape == [t.shape()[0], 1] {
        let b = t.shape()[0];
        let mut out = Vec::with_capacity(b);
        for r in 0..b {
            out.push(t.row(r).iter().sum());
        }
        return Tensor::new(shape.to_vec(), out).expect("row sum_to");
    }
    // general: accumulate along broadcast dims
    let src_shape = t.shape();
    let st = broadcast_strides(shape, src_shape);
    let n = t.numel();
    let mut out = vec![0.0; shape.iter().product::<usize>().max(1)];
    let mut idx = vec![0usize; src_shape.len()];
    let mut off = 0usize;
    for i in 0..n {
        out[off] += t.data()[i];
        for d in (0..src_shape.len()).rev() {
            idx[d] += 1;
            off += st[d];
            if idx[d] < src_shape[d] {
                break;
            }
            off -= st[d] * src_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("strided sum_to")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn log_softmax_rows(z: &Tensor) -> Tensor {
    let (b, k) = (z.shape()[0], z.shape()[1]);
    let mut out = vec![0.0; b * k];
    for r in 0..b {
        let row = z.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for j in 0..k {
            out[r * k + j] = row[j] - lse;
        }
    }
    Tensor::new(vec![b, k], out).expect("log_softmax shape")
}

// ---- convolution kernels (NCHW, stride 1, valid) ----

fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, col: &mut [f64]) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    // col layout: [c*kh*kw, oh*ow]
    let ocol = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let crow = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let src = ci * h * w + (oi + ki) * w + kj;
                    let dst = crow * ocol + oi * ow;
                    col[dst..dst + ow].copy_from_slice(&x[src..src + ow]);
                }
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, x: &mut [f64]) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let ocol = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let crow = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let dst = ci * h * w + (oi + ki) * w + kj;
                    let src = crow * ocol + oi * ow;
                    for j in 0..ow {
                        x[dst + j] += col[src + j];
                    }
                }
            }
        }
    }
}

fn conv2d(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, _ic, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (h - kh + 1, wd - kw + 1);
    let mut out = vec![0.0; b * oc * oh * ow];
    let mut col = vec![0.0; c * kh * kw * oh * ow];
    let wm = Tensor::new(vec![oc, c * kh * kw], w.data().to_vec())?;
    for bi in 0..b {
        im2col(
            &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd],
            c,
            h,
            wd,
            kh,
            kw,
            &mut col,
        );
        let colt = Tensor::new(vec![c * kh * kw, oh * ow], col.clone())?;
        let y = matmul(&wm, false, &colt, false)?;
        out[bi * oc * oh * ow..(bi + 1) * oc * oh * ow].copy_from_slice(y.data());
    }
    Tensor::new(vec![b, oc, oh, ow], out)
}

fn conv2d_back_input(g: &Tensor, w: &Tensor, hw: (usize, usize)) -> Result<Tensor> {
    let (b, oc, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let (_oc, c, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (h, wd) = hw;
    let mut out = vec![0.0; b * c * h * wd];
    let wm = Tensor::new(vec![oc, c * kh * kw], w.data().to_vec())?;
    for bi in 0..b {
        let gm = Tensor::new(
            vec![oc, oh * ow],
            g.data()[bi * oc * oh * ow..(bi + 1) * oc * oh * ow].to_vec(),
        )?;
        // col = W^T @ g  -> [c*kh*kw, oh*ow]
        let col = matmul(&wm, true, &gm, false)?;
        col2im(
            col.data(),
            c,
            h,
            wd,
            kh,
            kw,
            &mut out[bi * c * h * wd..(bi + 1) * c * h * wd],
        );
    }
    Tensor::new(vec![b, c, h, wd], out)
}

fn conv2d_back_weight(x: &Tensor, g: &Tensor, khw: (usize, usize)) -> Result<Tensor> {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (_b, oc, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let (kh, kw) = khw;
    let mut acc = Tensor::zeros(&[oc, c * kh * kw]);
    let mut col = vec![0.0; c * kh * kw * oh * ow];
    for bi in 0..b {
        im2col(
            &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd],
            c,
            h,
            wd,
            kh,
            kw,
            &mut col,
        );
        let colt = Tensor::new(vec![c * kh * kw, oh * ow], col.clone())?;
        let gm = Tensor::new(
            vec![oc, oh * ow],
            g.data()[bi * oc * oh * ow..(bi + 1) * oc * oh * ow].to_vec(),
        )?;
        // dW += g @ col^T
        let dw = matmul(&gm, false, &colt, true)?;
        for (a, &v) in acc.data_mut().iter_mut().zip(dw.data()) {
            *a += v;
        }
    }
    Tensor::new(vec![oc, c, kh, kw], acc.into_data())
}

fn max_pool2(x: &Tensor) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; b * c * oh * ow];
    for bc in 0..b * c {
        let src = &x.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let base = 2 * i * w + 2 * j;
                dst[i * ow + j] = src[base]
                    .max(src[base + 1])
                    .max(src[base + w])
                    .max(src[base + w + 1]);
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out).expect("pool shape")
}

/// 1.0 at the first maximum of each 2x2 window (row-major scan), else 0.0.
fn max_pool_mask(x: &Tensor) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = vec![0.0; x.numel()];
    for bc in 0..b * c {
        let src = &x.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * h * w..(bc + 1) * h * w];
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let base = 2 * i * w + 2 * j;
                let idxs = [base, base + 1, base + w, base + w + 1];
                let mut best = idxs[0];
                for &ix in &idxs[1..] {
                    if src[ix] > src[best] {
                        best = ix;
                    }
                }
                dst[best] = 1.0;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("mask shape")
}

fn upsample2(x: &Tensor) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0; b * c * oh * ow];
    for bc in 0..b * c {
        let src = &x.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for i in 0..h {
            for j in 0..w {
                let v = src[i * w + j];
                let base = 2 * i * ow + 2 * j;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + ow] = v;
                dst[base + ow + 1] = v;
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out).expect("upsample shape")
}

fn sum_pool2(x: &Tensor) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; b * c * oh * ow];
    for bc in 0..b * c {
        let src = &x.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let base = 2 * i * w + 2 * j;
                dst[i * ow + j] = src[base] + src[base + 1] + src[base + w] + src[base + w + 1];
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out).expect("sum pool shape")
}

pub use grad_impl::{gradient, GradEntry, GradientMap};

mod grad_impl {
    use super::*;

    /// A gradient node per requested `wrt`, itself differentiable.
    #[derive(Debug, Clone)]
    pub struct GradientMap {
        entries: Vec<(NodeId, GradEntry)>,
    }

    #[derive(Debug, Clone, Copy)]
    pub struct GradEntry {
        pub node: NodeId,
        /// False when `wrt` was unreachable from the scalar (gradient is a
        /// zero tensor in that case).
        pub reached: bool,
    }

    impl GradientMap {
        pub fn get(&self, wrt: NodeId) -> Option<GradEntry> {
            self.entries
                .iter()
                .find(|(id, _)| *id == wrt)
                .map(|(_, e)| *e)
        }

        /// Gradient node for `wrt`; panics if it was not requested.
        pub fn grad(&self, wrt: NodeId) -> NodeId {
            self.get(wrt).expect("wrt was requested").node
        }
    }

    /// Append adjoint nodes computing d(scalar)/d(wrt) for every `wrt`.
    pub fn gradient(g: &mut Graph, scalar: NodeId, wrt: &[NodeId]) -> Result<GradientMap> {
        if !g.shape(scalar).is_empty() {
            return Err(Error::NotScalar(g.shape(scalar).to_vec()));
        }
        for &w in wrt {
            if !g.requires_grad(w) {
                return Err(Error::NoGrad);
            }
        }

        let n = scalar.index() + 1;
        // reaches_wrt[i]: node i depends on some wrt (through parents)
        let mut reaches_wrt = vec![false; g.len()];
        for &w in wrt {
            reaches_wrt[w.index()] = true;
        }
        for i in 0..n {
            if reaches_wrt[i] {
                continue;
            }
            // gradient flows through differentiable edges only
            let node = &g.nodes[i];
            if !node.requires_grad {
                continue;
            }
            reaches_wrt[i] = diff_parents(&node.op)
                .iter()
                .any(|p| reaches_wrt[p.index()]);
        }

        // ancestors of scalar
        let mut active = vec![false; n];
        let mut stack = vec![scalar.index()];
        let mut seen = vec![false; n];
        while let Some(i) = stack.pop() {
            if seen[i] {
                continue;
            }
            seen[i] = true;
            if reaches_wrt[i] && g.nodes[i].requires_grad {
                active[i] = true;
            }
            for p in g.nodes[i].op.parents() {
                if !seen[p.index()] {
                    stack.push(p.index());
                }
            }
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; n];
        if active[scalar.index()] {
            adjoint[scalar.index()] = Some(g.scalar(1.0));
        }

        for i in (0..n).rev() {
            if !active[i] {
                continue;
            }
            let Some(gi) = adjoint[i] else { continue };
            let op = g.nodes[i].op.clone();
            let contribs = vjp(g, &op, NodeId(i as u32), gi)?;
            for (parent, contrib) in contribs {
                let pi = parent.index();
                if pi >= n || !active[pi] {
                    continue;
                }
                adjoint[pi] = Some(match adjoint[pi] {
                    None => contrib,
                    Some(acc) => g.add(acc, contrib)?,
                });
            }
        }

        let mut entries = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match adjoint[w.index()] {
                Some(node) => {
                    debug_assert_eq!(g.shape(node), g.shape(w), "adjoint shape");
                    entries.push((w, GradEntry { node, reached: true }))
                }
                None => {
                    let z = g.constant(Tensor::zeros(g.shape(w).to_vec().as_slice()));
                    entries.push((w, GradEntry { node: z, reached: false }));
                }
            }
        }
        Ok(GradientMap { entries })
    }

    /// Parents through which gradient flows (excludes mask/index/primary edges).
    fn diff_parents(op: &Op) -> Vec<NodeId> {
        use Op::*;
        match op {
            Sign(_) | GtZeroMask(_) | GeMask(..) | RangeMask(..) | MaxPoolMask(_)
            | RowMaxMask(_) | StopGradient(_) => vec![],
            StraightThrough { surrogate, .. } => vec![*surrogate],
            TakePerRow { values, .. } => vec![*values],
            ScatterPerRow { grad, .. } => vec![*grad],
            other => other.parents(),
        }
    }

    /// Per-op adjoint contributions to each parent.
    fn vjp(g: &mut Graph, op: &Op, out: NodeId, gi: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        use Op::*;
        let r = match *op {
            Placeholder { .. } | Variable { .. } | Constant | Sign(_) | GtZeroMask(_)
            | GeMask(..) | RangeMask(..) | MaxPoolMask(_) | RowMaxMask(_) | StopGradient(_) => {
                vec![]
            }
            Add(a, b) => {
                let da = g.sum_to(gi, g.shape(a).to_vec().as_slice())?;
                let db = g.sum_to(gi, g.shape(b).to_vec().as_slice())?;
                vec![(a, da), (b, db)]
            }
            Sub(a, b) => {
                let da = g.sum_to(gi, g.shape(a).to_vec().as_slice())?;
                let nb = g.neg(gi);
                let db = g.sum_to(nb, g.shape(b).to_vec().as_slice())?;
                vec![(a, da), (b, db)]
            }
            Mul(a, b) => {
                let gb = g.mul(gi, b)?;
                let da = g.sum_to(gb, g.shape(a).to_vec().as_slice())?;
                let ga = g.mul(gi, a)?;
                let db = g.sum_to(ga, g.shape(b).to_vec().as_slice())?;
                vec![(a, da), (b, db)]
            }
            Div(a, b) => {
                let gb = g.div(gi, b)?;
                let da = g.sum_to(gb, g.shape(a).to_vec().as_slice())?;
                // d/db (a/b) = -out/b
                let ob = g.div(out, b)?;
                let gob = g.mul(gi, ob)?;
                let ngob = g.neg(gob);
                let db = g.sum_to(ngob, g.shape(b).to_vec().as_slice())?;
                vec![(a, da), (b, db)]
            }
            Maximum(a, b) => {
                let m = g.ge_mask(a, b)?;
                let gm = g.mul(gi, m)?;
                let da = g.sum_to(gm, g.shape(a).to_vec().as_slice())?;
                let one = g.scalar(1.0);
                let inv = g.sub(one, m)?;
                let gn = g.mul(gi, inv)?;
                let db = g.sum_to(gn, g.shape(b).to_vec().as_slice())?;
                vec![(a, da), (b, db)]
            }
            Minimum(a, b) => {
                let m = g.ge_mask(b, a)?; // 1 where a is the min
                let gm = g.mul(gi, m)?;
                let da = g.sum_to(gm, g.shape(a).to_vec().as_slice())?;
                let one = g.scalar(1.0);
                let inv = g.sub(one, m)?;
                let gn = g.mul(gi, inv)?;
                let db = g.sum_to(gn, g.shape(b).to_vec().as_slice())?;
                vec![(a, da), (b, db)]
            }
            Neg(a) => vec![(a, g.neg(gi))],
            Exp(a) => vec![(a, g.mul(gi, out)?)],
            Log(a) => vec![(a, g.div(gi, a)?)],
            Sqrt(a) => {
                let d = g.rsqrt0(a);
                vec![(a, g.mul(gi, d)?)]
            }
            Rsqrt0(a) => {
                // d/dx [x>0: 0.5 x^-1/2] = -0.25 x^-3/2 = -2 * out^3
                let o2 = g.mul(out, out)?;
                let o3 = g.mul(o2, out)?;
                let s = g.scale(o3, -2.0);
                vec![(a, g.mul(gi, s)?)]
            }
            Sigmoid(a) => {
                let one = g.scalar(1.0);
                let om = g.sub(one, out)?;
                let d = g.mul(out, om)?;
                vec![(a, g.mul(gi, d)?)]
            }
            Softplus(a) => {
                let d = g.sigmoid(a);
                vec![(a, g.mul(gi, d)?)]
            }
            Relu(a) => {
                let m = g.gt_zero_mask(a);
                vec![(a, g.mul(gi, m)?)]
            }
            LeakyRelu(a, slope) => {
                let m = g.gt_zero_mask(a);
                let one = g.scalar(1.0);
                let inv = g.sub(one, m)?;
                let si = g.scale(inv, slope);
                let d = g.add(m, si)?;
                vec![(a, g.mul(gi, d)?)]
            }
            Clamp(a, lo, hi) => {
                let m = g.range_mask(a, lo, hi);
                vec![(a, g.mul(gi, m)?)]
            }
            MatMul { a, b, ta, tb } => {
                let da = if ta {
                    g.matmul_ex(b, gi, tb, true)?
                } else {
                    g.matmul_ex(gi, b, false, !tb)?
                };
                let db = if tb {
                    g.matmul_ex(gi, a, true, ta)?
                } else {
                    g.matmul_ex(a, gi, !ta, false)?
                };
                vec![(a, da), (b, db)]
            }
            Transpose(a) => vec![(a, g.transpose(gi)?)],
            Reshape(a, _) => {
                let sa = g.shape(a).to_vec();
                vec![(a, g.reshape(gi, &sa)?)]
            }
            BroadcastTo(a, _) => {
                let sa = g.shape(a).to_vec();
                vec![(a, g.sum_to(gi, &sa)?)]
            }
            SumTo(a, _) => {
                let sa = g.shape(a).to_vec();
                vec![(a, g.broadcast_to(gi, &sa)?)]
            }
            SumAll(a) => {
                let sa = g.shape(a).to_vec();
                vec![(a, g.broadcast_to(gi, &sa)?)]
            }
            MeanAll(a) => {
                let sa = g.shape(a).to_vec();
                let num: usize = sa.iter().product();
                let gs = g.scale(gi, 1.0 / num as f64);
                vec![(a, g.broadcast_to(gs, &sa)?)]
            }
            RowSum(a) => {
                let sa = g.shape(a).to_vec();
                vec![(a, g.broadcast_to(gi, &sa)?)]
            }
            RowMax(a) => {
                let sa = g.shape(a).to_vec();
                let m = g.row_max_mask(a);
                let gb = g.broadcast_to(gi, &sa)?;
                vec![(a, g.mul(gb, m)?)]
            }
            LogSoftmax(a) => {
                // dz = g - softmax(z) * rowsum(g)
                let p = g.exp(out);
                let rs = g.row_sum(gi)?;
                let prs = g.mul(p, rs)?;
                vec![(a, g.sub(gi, prs)?)]
            }
            TakePerRow { values, index } => {
                let k = g.shape(values)[1];
                vec![(values, g.scatter_per_row(gi, index, k))]
            }
            ScatterPerRow { grad, index, .. } => {
                vec![(grad, g.take_per_row(gi, index)?)]
            }
            Conv2d { x, w } => {
                let sx = g.shape(x).to_vec();
                let sw = g.shape(w).to_vec();
                let dx = g.conv2d_back_input(gi, w, (sx[2], sx[3]));
                let dw = g.conv2d_back_weight(x, gi, (sw[2], sw[3]));
                vec![(x, dx), (w, dw)]
            }
            Conv2dBackInput { g: gg, w, .. } => {
                // out = I(gg, w); <h, I(gg,w)> = <gg, C(h,w)> = <W(h,gg), w>
                let sw = g.shape(w).to_vec();
                let dg = g.conv2d(gi, w)?;
                let dw = g.conv2d_back_weight(gi, gg, (sw[2], sw[3]));
                vec![(gg, dg), (w, dw)]
            }
            Conv2dBackWeight { x, g: gg, .. } => {
                // out = W(x, gg); <u, W(x,gg)> = <gg, C(x,u)> = <I(gg,u), x>
                let sx = g.shape(x).to_vec();
                let dx = g.conv2d_back_input(gg, gi, (sx[2], sx[3]));
                let dg = g.conv2d(x, gi)?;
                vec![(x, dx), (gg, dg)]
            }
            MaxPool2(a) => {
                let m = g.max_pool_mask(a);
                let up = g.upsample2(gi);
                vec![(a, g.mul(m, up)?)]
            }
            Upsample2(a) => vec![(a, g.sum_pool2(gi))],
            SumPool2(a) => vec![(a, g.upsample2(gi))],
            GaussianNoise { x, .. } => vec![(x, gi)],
            StraightThrough { surrogate, .. } => vec![(surrogate, gi)],
        };
        Ok(r)
    }
}

/// Differentiate a contraction of the first gradient once more.
///
/// Returns a node whose value is d/d(second_wrt) of sum(probe * d(scalar)/d(first_wrt)).
/// With a ones probe on a scalar first gradient this is the plain second
/// derivative; with a basis-vector probe it extracts one mixed-partial row.
pub fn second_gradient(
    g: &mut Graph,
    scalar: NodeId,
    first_wrt: NodeId,
    second_wrt: NodeId,
    probe: Option<Tensor>,
) -> Result<NodeId> {
    let gm = gradient(g, scalar, &[first_wrt])?;
    let g1 = gm.grad(first_wrt);
    let contracted = match probe {
        Some(p) => {
            if p.shape() != g.shape(g1) {
                return Err(Error::Shape(format!(
                    "probe {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape(g1)
                )));
            }
            let pc = g.constant(p);
            let prod = g.mul(g1, pc)?;
            g.sum_all(prod)
        }
        None => g.sum_all(g1),
    };
    let gm2 = gradient(g, contracted, &[second_wrt])?;
    Ok(gm2.grad(second_wrt))
}
