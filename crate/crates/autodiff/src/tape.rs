//! Operation tape with reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node holding its value
//! and the inputs it was computed from. [`Tape::backward`] replays the
//! nodes in reverse and returns numeric gradients; [`Tape::grad_graph`]
//! instead records the gradient computation on the same tape so that it
//! can be differentiated again.

use std::cell::{Ref, RefCell};

use crate::error::{AutodiffError, Result};
use crate::kernels;
use crate::tensor::{broadcast_index_map, broadcast_shape, Tensor};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise functions with known derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Softplus,
    LeakyRelu(f64),
    Exp,
    Ln,
    Sqrt,
    Square,
    Abs,
    NormCdf,
    ClampMin(f64),
}

impl Unary {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => kernels::sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Softplus => kernels::softplus(x),
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::NormCdf => kernels::norm_cdf(x),
            Unary::ClampMin(floor) => x.max(floor),
        }
    }

    /// Derivative at input `x` with output `y`.
    pub(crate) fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Softplus => kernels::sigmoid(x),
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Abs => sign(x),
            Unary::NormCdf => kernels::norm_pdf(x),
            Unary::ClampMin(floor) => {
                if x >= floor {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    BroadcastTo(Var),
    SumTo(Var),
    SumAll(Var),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Pad {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: usize,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Unary(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::BroadcastTo(a)
            | Op::SumTo(a)
            | Op::SumAll(a) => vec![*a],
            Op::Slice { input, .. } | Op::Pad { input, .. } | Op::Softmax { input, .. } => {
                vec![*input]
            }
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Conv2d {
                input, kernel, bias, ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias.iter().copied());
                v
            }
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
///
/// Interior mutability lets operations take `&self`, so expressions can
/// nest freely. A tape is confined to the thread that created it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A value treated as fixed by differentiation.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub(crate) fn op(&self, v: Var) -> Op {
        self.nodes.borrow()[v.0].op.clone()
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Record an op; subgraphs that do not depend on any leaf collapse to
    /// constants.
    fn push(&self, value: Tensor, op: Op) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|v| nodes[v.0].requires_grad)
        };
        if requires_grad {
            self.push_raw(value, op, true)
        } else {
            self.push_raw(value, Op::Constant, false)
        }
    }

    // ---- elementwise binary ------------------------------------------------

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() == tb.shape() {
                ta.zip_map(tb, f)?
            } else {
                let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
                    AutodiffError::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape()))
                })?;
                let ma = broadcast_index_map(ta.shape(), &shape);
                let mb = broadcast_index_map(tb.shape(), &shape);
                let (da, db) = (ta.data(), tb.data());
                let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
                Tensor::new(&shape, data)?
            }
        };
        Ok(self.push(value, op))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ---- elementwise unary -------------------------------------------------

    pub fn neg(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|x| -x);
        self.push(value, Op::Neg(a))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// `a + shift` for a fixed scalar.
    pub fn offset(&self, a: Var, shift: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|x| x + shift);
        self.push(value, Op::Offset(a))
    }

    pub fn unary(&self, a: Var, f: Unary) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|x| f.apply(x));
        self.push(value, Op::Unary(a, f))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    /// Standard normal cumulative distribution function.
    pub fn norm_cdf(&self, a: Var) -> Var {
        self.unary(a, Unary::NormCdf)
    }

    /// Standard normal density, built from differentiable primitives.
    pub fn norm_pdf(&self, a: Var) -> Var {
        let e = self.exp(self.scale(self.square(a), -0.5));
        self.scale(e, kernels::INV_SQRT_2PI)
    }

    pub fn clamp_min(&self, a: Var, floor: f64) -> Var {
        self.unary(a, Unary::ClampMin(floor))
    }

    // ---- shape and reductions ----------------------------------------------

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.nodes.borrow()[a.0].value.sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.nodes.borrow()[a.0].value.len();
        self.scale(self.sum(a), 1.0 / n as f64)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            match broadcast_shape(t.shape(), shape) {
                Some(s) if s == shape => {
                    let map = broadcast_index_map(t.shape(), shape);
                    Tensor::new(shape, map.iter().map(|&i| t.data()[i]).collect())?
                }
                _ => {
                    return Err(AutodiffError::shape(
                        "broadcast_to",
                        format!("{:?} -> {:?}", t.shape(), shape),
                    ))
                }
            }
        };
        Ok(self.push(value, Op::BroadcastTo(a)))
    }

    /// Sum a tensor down to a shape it broadcasts from.
    pub fn sum_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            reduce_to_shape(&nodes[a.0].value, shape)?
        };
        Ok(self.push(value, Op::SumTo(a)))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(AutodiffError::shape(
                    "matmul",
                    format!("{:?} x {:?}", ta.shape(), tb.shape()),
                ));
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            Tensor::new(&[m, n], kernels::matmul(ta.data(), tb.data(), m, k, n))?
        };
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.rank() != 2 {
                return Err(AutodiffError::shape(
                    "transpose",
                    format!("expected rank 2, got {:?}", t.shape()),
                ));
            }
            let (r, c) = (t.shape()[0], t.shape()[1]);
            Tensor::new(&[c, r], kernels::transpose(t.data(), r, c))?
        };
        Ok(self.push(value, Op::Transpose(a)))
    }

    /// `len` entries of `a` along `axis` starting at `start`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            slice_tensor(&nodes[a.0].value, axis, start, len)?
        };
        Ok(self.push(value, Op::Slice { input: a, axis, start }))
    }

    /// Embed `a` into zeros of extent `full_len` along `axis` at `start`.
    pub fn pad(&self, a: Var, axis: usize, start: usize, full_len: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            pad_tensor(&nodes[a.0].value, axis, start, full_len)?
        };
        Ok(self.push(value, Op::Pad { input: a, axis, start }))
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let parts: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            concat_tensors(&parts, axis)?
        };
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// 2-D convolution of a `[c_in, h, w]` map with a `[c_out, c_in, k, k]`
    /// kernel and optional `[c_out]` bias, zero-padded by `padding`.
    pub fn conv2d(&self, input: Var, kernel: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let k = &nodes[kernel.0].value;
            let b = bias.map(|b| &nodes[b.0].value);
            check_conv_shapes(x, k, b, padding)?;
            kernels::conv2d_forward(x, k, b, padding)
        };
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            },
        ))
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if axis >= t.rank() || t.shape()[axis] == 0 {
                return Err(AutodiffError::EmptyAxis {
                    op: "softmax",
                    axis,
                    shape: t.shape().to_vec(),
                });
            }
            kernels::softmax_forward(t, axis)
        };
        Ok(self.push(value, Op::Softmax { input: a, axis }))
    }

    // ---- differentiation ---------------------------------------------------

    /// Numeric reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(AutodiffError::NonScalar {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.requires_grad {
                for (input, contribution) in vjp_numeric(&nodes, i, &g) {
                    if !nodes[input.0].requires_grad {
                        continue;
                    }
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&contribution),
                        slot @ None => *slot = Some(contribution),
                    }
                }
            }
            // Intermediate gradients are dropped as soon as they are propagated.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for the leaf `v`, or `None` when the root does not depend
    /// on it or `v` is not a leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn vjp_numeric(nodes: &[Node], i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add(a, b) => vec![
            (*a, reduce_to_shape(g, val(*a).shape()).unwrap()),
            (*b, reduce_to_shape(g, val(*b).shape()).unwrap()),
        ],
        Op::Sub(a, b) => vec![
            (*a, reduce_to_shape(g, val(*a).shape()).unwrap()),
            (*b, reduce_to_shape(&g.map(|x| -x), val(*b).shape()).unwrap()),
        ],
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let ga = broadcast_zip(g, tb, |gv, bv| gv * bv);
            let gb = broadcast_zip(g, ta, |gv, av| gv * av);
            vec![
                (*a, reduce_to_shape(&ga, ta.shape()).unwrap()),
                (*b, reduce_to_shape(&gb, tb.shape()).unwrap()),
            ]
        }
        Op::Div(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let ga = broadcast_zip(g, tb, |gv, bv| gv / bv);
            // d(a/b)/db = -y / b with y the output.
            let gy = g.zip_map(&node.value, |gv, y| gv * y).unwrap();
            let gb = broadcast_zip(&gy, tb, |gyv, bv| -gyv / bv);
            vec![
                (*a, reduce_to_shape(&ga, ta.shape()).unwrap()),
                (*b, reduce_to_shape(&gb, tb.shape()).unwrap()),
            ]
        }
        Op::Neg(a) => vec![(*a, g.map(|x| -x))],
        Op::Scale(a, c) => {
            let c = *c;
            vec![(*a, g.map(|x| x * c))]
        }
        Op::Offset(a) => vec![(*a, g.clone())],
        Op::Unary(a, f) => {
            let x = val(*a).data();
            let y = node.value.data();
            let data = g
                .data()
                .iter()
                .enumerate()
                .map(|(k, gv)| gv * f.derivative(x[k], y[k]))
                .collect();
            vec![(*a, Tensor::new(g.shape(), data).unwrap())]
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let ga = kernels::matmul_nt(g.data(), tb.data(), m, n, k);
            let gb = kernels::matmul_tn(ta.data(), g.data(), m, k, n);
            vec![
                (*a, Tensor::new(&[m, k], ga).unwrap()),
                (*b, Tensor::new(&[k, n], gb).unwrap()),
            ]
        }
        Op::Transpose(a) => {
            let (r, c) = (g.shape()[0], g.shape()[1]);
            vec![(*a, Tensor::new(&[c, r], kernels::transpose(g.data(), r, c)).unwrap())]
        }
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape()).unwrap())],
        Op::BroadcastTo(a) => vec![(*a, reduce_to_shape(g, val(*a).shape()).unwrap())],
        Op::SumTo(a) => {
            let shape = val(*a).shape();
            let map = broadcast_index_map(g.shape(), shape);
            let data = map.iter().map(|&k| g.data()[k]).collect();
            vec![(*a, Tensor::new(shape, data).unwrap())]
        }
        Op::SumAll(a) => vec![(*a, Tensor::full(val(*a).shape(), g.data()[0]))],
        Op::Slice { input, axis, start } => {
            let full = val(*input).shape()[*axis];
            vec![(*input, pad_tensor(g, *axis, *start, full).unwrap())]
        }
        Op::Pad { input, axis, start } => {
            let len = val(*input).shape()[*axis];
            vec![(*input, slice_tensor(g, *axis, *start, len).unwrap())]
        }
        Op::Concat { inputs, axis } => {
            let mut offset = 0;
            inputs
                .iter()
                .map(|v| {
                    let len = val(*v).shape()[*axis];
                    let part = slice_tensor(g, *axis, offset, len).unwrap();
                    offset += len;
                    (*v, part)
                })
                .collect()
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            padding,
        } => {
            let (gx, gk, gb) = kernels::conv2d_backward(val(*input), val(*kernel), *padding, g);
            let mut out = vec![(*input, gx), (*kernel, gk)];
            if let Some(b) = bias {
                out.push((*b, gb));
            }
            out
        }
        Op::Softmax { input, axis } => {
            vec![(*input, kernels::softmax_backward(&node.value, g, *axis))]
        }
    }
}

/// `f(g[i], other[broadcast(i)])` where `other` broadcasts onto `g`.
fn broadcast_zip(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if g.shape() == other.shape() {
        return g.zip_map(other, f).unwrap();
    }
    let map = broadcast_index_map(other.shape(), g.shape());
    let data = g
        .data()
        .iter()
        .zip(&map)
        .map(|(&gv, &k)| f(gv, other.data()[k]))
        .collect();
    Tensor::new(g.shape(), data).unwrap()
}

pub(crate) fn reduce_to_shape(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if t.shape() == shape {
        return Ok(t.clone());
    }
    match broadcast_shape(shape, t.shape()) {
        Some(s) if s == t.shape() => {}
        _ => {
            return Err(AutodiffError::shape(
                "sum_to",
                format!("{:?} does not broadcast to {:?}", shape, t.shape()),
            ))
        }
    }
    let map = broadcast_index_map(shape, t.shape());
    let mut out = Tensor::zeros(shape);
    let dst = out.data_mut();
    for (k, v) in map.iter().zip(t.data()) {
        dst[*k] += v;
    }
    Ok(out)
}

pub(crate) fn slice_tensor(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= t.rank() || start + len > t.shape()[axis] {
        return Err(AutodiffError::shape(
            "slice",
            format!("[{start}, {}) on axis {axis} of {:?}", start + len, t.shape()),
        ));
    }
    let (outer, full, inner) = kernels::axis_split(t.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full * inner + start * inner;
        data.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, data)
}

pub(crate) fn pad_tensor(t: &Tensor, axis: usize, start: usize, full_len: usize) -> Result<Tensor> {
    if axis >= t.rank() || start + t.shape()[axis] > full_len {
        return Err(AutodiffError::shape(
            "pad",
            format!("{:?} at {start} into length {full_len} on axis {axis}", t.shape()),
        ));
    }
    let (outer, len, inner) = kernels::axis_split(t.shape(), axis);
    let mut shape = t.shape().to_vec();
    shape[axis] = full_len;
    let mut out = Tensor::zeros(&shape);
    let dst = out.data_mut();
    for o in 0..outer {
        let src = &t.data()[o * len * inner..(o + 1) * len * inner];
        let base = o * full_len * inner + start * inner;
        dst[base..base + len * inner].copy_from_slice(src);
    }
    Ok(out)
}

fn concat_tensors(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| AutodiffError::InvalidArgument("concat of zero tensors".into()))?;
    if axis >= first.rank() {
        return Err(AutodiffError::shape(
            "concat",
            format!("axis {axis} out of range for {:?}", first.shape()),
        ));
    }
    for p in parts {
        let same_rank = p.rank() == first.rank();
        if !same_rank || (0..p.rank()).any(|d| d != axis && p.shape()[d] != first.shape()[d]) {
            return Err(AutodiffError::shape(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", p.shape(), first.shape()),
            ));
        }
    }
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let (outer, _, inner) = kernels::axis_split(first.shape(), axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis];
            data.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(&shape, data)
}

fn check_conv_shapes(x: &Tensor, k: &Tensor, b: Option<&Tensor>, padding: usize) -> Result<()> {
    if x.rank() != 3 {
        return Err(AutodiffError::shape(
            "conv2d",
            format!("input must be [channels, height, width], got {:?}", x.shape()),
        ));
    }
    if k.rank() != 4 {
        return Err(AutodiffError::shape(
            "conv2d",
            format!("kernel must be [out, in, kh, kw], got {:?}", k.shape()),
        ));
    }
    if k.shape()[1] != x.shape()[0] {
        return Err(AutodiffError::shape(
            "conv2d",
            format!(
                "kernel expects {} input channels, input has {}",
                k.shape()[1],
                x.shape()[0]
            ),
        ));
    }
    let (kh, kw) = (k.shape()[2], k.shape()[3]);
    if padding != 0 && (padding != kh / 2 || padding != kw / 2) {
        return Err(AutodiffError::shape(
            "conv2d",
            format!("padding {padding} must be 0 or half the kernel size {kh}x{kw}"),
        ));
    }
    if x.shape()[1] + 2 * padding < kh || x.shape()[2] + 2 * padding < kw {
        return Err(AutodiffError::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {:?}", x.shape()),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [k.shape()[0]] {
            return Err(AutodiffError::shape(
                "conv2d",
                format!("bias shape {:?} for {} output channels", b.shape(), k.shape()[0]),
            ));
        }
    }
    Ok(())
}
