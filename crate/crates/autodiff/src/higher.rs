//! Differentiable gradients: the reverse sweep is itself recorded.

use crate::error::{AutodiffError, Result};
use crate::tape::{sign, Op, Tape, Unary, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Gradient of the one-element `root` with respect to each of `wrt`,
    /// expressed as new nodes on this tape so it can be differentiated
    /// again. Inputs the root does not depend on get a zero constant.
    ///
    /// Convolution and softmax nodes on the differentiated path are
    /// rejected with [`AutodiffError::HigherOrderUnsupported`].
    pub fn grad_graph(&self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let root_shape = self.shape(root);
        if root_shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalar { shape: root_shape });
        }

        // Nodes that lie on some path from a `wrt` var up to the root.
        let mut depends = vec![false; root.0 + 1];
        for v in wrt {
            if v.0 <= root.0 {
                depends[v.0] = true;
            }
        }
        for i in 0..=root.0 {
            if !depends[i] {
                depends[i] = self.op(Var(i)).inputs().iter().any(|v| depends[v.0]);
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; root.0 + 1];
        grads[root.0] = Some(self.constant(Tensor::full(&root_shape, 1.0)));

        for i in (0..=root.0).rev() {
            if !depends[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.op(Var(i));
            for (input, contribution) in self.vjp_graph(Var(i), &op, g, &depends)? {
                grads[input.0] = Some(match grads[input.0] {
                    Some(acc) => self.add(acc, contribution)?,
                    None => contribution,
                });
            }
        }

        wrt.iter()
            .map(|v| match grads.get(v.0).copied().flatten() {
                Some(g) => Ok(g),
                None => Ok(self.constant(Tensor::zeros(&self.shape(*v)))),
            })
            .collect()
    }

    fn vjp_graph(&self, out: Var, op: &Op, g: Var, depends: &[bool]) -> Result<Vec<(Var, Var)>> {
        let needs = |v: &Var| depends[v.0];
        let mut res = Vec::new();
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if needs(a) {
                    res.push((*a, self.sum_to(g, &self.shape(*a))?));
                }
                if needs(b) {
                    res.push((*b, self.sum_to(g, &self.shape(*b))?));
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    res.push((*a, self.sum_to(g, &self.shape(*a))?));
                }
                if needs(b) {
                    res.push((*b, self.sum_to(self.neg(g), &self.shape(*b))?));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    res.push((*a, self.sum_to(self.mul(g, *b)?, &self.shape(*a))?));
                }
                if needs(b) {
                    res.push((*b, self.sum_to(self.mul(g, *a)?, &self.shape(*b))?));
                }
            }
            Op::Div(a, b) => {
                if needs(a) {
                    res.push((*a, self.sum_to(self.div(g, *b)?, &self.shape(*a))?));
                }
                if needs(b) {
                    let gy = self.mul(g, out)?;
                    let gb = self.neg(self.div(gy, *b)?);
                    res.push((*b, self.sum_to(gb, &self.shape(*b))?));
                }
            }
            Op::Neg(a) => res.push((*a, self.neg(g))),
            Op::Scale(a, c) => res.push((*a, self.scale(g, *c))),
            Op::Offset(a) => res.push((*a, g)),
            Op::Unary(a, f) => {
                let local = match f {
                    Unary::Sigmoid => {
                        let one_minus = self.offset(self.neg(out), 1.0);
                        self.mul(out, one_minus)?
                    }
                    Unary::Tanh => self.offset(self.neg(self.square(out)), 1.0),
                    Unary::Softplus => self.sigmoid(*a),
                    Unary::Exp => out,
                    Unary::Ln => {
                        res.push((*a, self.div(g, *a)?));
                        return Ok(res);
                    }
                    Unary::Sqrt => {
                        res.push((*a, self.div(self.scale(g, 0.5), out)?));
                        return Ok(res);
                    }
                    Unary::Square => self.scale(*a, 2.0),
                    Unary::NormCdf => self.norm_pdf(*a),
                    Unary::Abs => {
                        let s = self.value(*a).map(sign);
                        self.constant(s)
                    }
                    Unary::LeakyRelu(slope) => {
                        let slope = *slope;
                        let m = self.value(*a).map(|x| if x > 0.0 { 1.0 } else { slope });
                        self.constant(m)
                    }
                    Unary::ClampMin(floor) => {
                        let floor = *floor;
                        let m = self.value(*a).map(|x| if x >= floor { 1.0 } else { 0.0 });
                        self.constant(m)
                    }
                };
                res.push((*a, self.mul(g, local)?));
            }
            Op::MatMul(a, b) => {
                if needs(a) {
                    res.push((*a, self.matmul(g, self.transpose(*b)?)?));
                }
                if needs(b) {
                    res.push((*b, self.matmul(self.transpose(*a)?, g)?));
                }
            }
            Op::Transpose(a) => res.push((*a, self.transpose(g)?)),
            Op::Reshape(a) => res.push((*a, self.reshape(g, &self.shape(*a))?)),
            Op::BroadcastTo(a) => res.push((*a, self.sum_to(g, &self.shape(*a))?)),
            Op::SumTo(a) | Op::SumAll(a) => res.push((*a, self.broadcast_to(g, &self.shape(*a))?)),
            Op::Slice { input, axis, start } => {
                let full = self.shape(*input)[*axis];
                res.push((*input, self.pad(g, *axis, *start, full)?));
            }
            Op::Pad { input, axis, start } => {
                let len = self.shape(*input)[*axis];
                res.push((*input, self.slice(g, *axis, *start, len)?));
            }
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if needs(v) {
                        res.push((*v, self.slice(g, *axis, offset, len)?));
                    }
                    offset += len;
                }
            }
            Op::Conv2d { .. } => return Err(AutodiffError::HigherOrderUnsupported { op: "conv2d" }),
            Op::Softmax { .. } => {
                return Err(AutodiffError::HigherOrderUnsupported { op: "softmax" })
            }
        }
        Ok(res)
    }
}
