use super::kernels;
use super::params::{ParamId, ParameterSet};
use super::{AutodiffError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations. Unary tags take one operand, binary tags two
/// operands of identical shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Neg,
    Add,
    Sub,
    Mul,
}

impl ElementwiseOp {
    pub fn arity(self) -> usize {
        match self {
            Self::Add | Self::Sub | Self::Mul => 2,
            _ => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Tanh => "tanh",
            Self::Sigmoid => "sigmoid",
            Self::Relu => "relu",
            Self::Exp => "exp",
            Self::Log => "log",
            Self::Neg => "neg",
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    Affine { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    MatMulTransB { a: Var, b: Var },
    Unary { x: Var, op: ElementwiseOp },
    Binary { a: Var, b: Var, op: ElementwiseOp },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    LogSumExp { x: Var },
    Rows { x: Var, start: usize },
    SelectRows { x: Var, indices: Vec<usize> },
    Element { x: Var, index: usize },
    ConcatRows { parts: Vec<Var> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation as it runs and differentiates it in reverse.
///
/// Nodes are appended in evaluation order, so every input index is smaller
/// than its consumer's and reverse index order is a valid topological order.
/// A tape is built fresh for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn dims(t: &Tensor, op: &'static str) -> Result<(usize, usize), AutodiffError> {
    t.dims2().ok_or_else(|| AutodiffError::Shape {
        op,
        left: t.shape().to_vec(),
        right: vec![],
    })
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Number of parameter leaves bound on this tape.
    pub fn param_leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Param(_)))
            .count()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf that receives a gradient but is not tied to a parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Binds every parameter of `params` as a gradient-carrying leaf,
    /// returning handles in the set's iteration order.
    pub fn bind(&mut self, params: &ParameterSet) -> Vec<Var> {
        params
            .iter()
            .map(|(id, p)| self.push(p.value.clone(), Op::Param(id), true))
            .collect()
    }

    /// Binds parameters as constants (inference only).
    pub fn bind_frozen(&mut self, params: &ParameterSet) -> Vec<Var> {
        params
            .iter()
            .map(|(_, p)| self.constant(p.value.clone()))
            .collect()
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (batch, d_in) = dims(xv, "affine")?;
        let (w_in, d_out) = match wv.shape() {
            [r, c] => (*r, *c),
            _ => (usize::MAX, 0),
        };
        if w_in != d_in || xv.shape().len() != 2 {
            return Err(AutodiffError::Shape {
                op: "affine",
                left: xv.shape().to_vec(),
                right: wv.shape().to_vec(),
            });
        }
        if bv.shape() != [d_out] {
            return Err(AutodiffError::Shape {
                op: "affine bias",
                left: wv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let out = kernels::affine(xv.data(), wv.data(), bv.data(), batch, d_in);
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, d_out], out),
            Op::Affine { x, w, b },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        match (av.shape(), bv.shape()) {
            ([p, q], [q2, r]) if q == q2 => {
                let (p, q, r) = (*p, *q, *r);
                let out = kernels::matmul(av.data(), bv.data(), p, q, r);
                let rg = self.needs(&[a, b]);
                Ok(self.push(
                    Tensor::from_parts(vec![p, r], out),
                    Op::MatMul { a, b },
                    rg,
                ))
            }
            (l, r) => Err(AutodiffError::Shape {
                op: "matmul",
                left: l.to_vec(),
                right: r.to_vec(),
            }),
        }
    }

    /// `a · bᵀ` for `a: [p×n]`, `b: [q×n]`; the row-wise dot products.
    pub fn matmul_transpose_b(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        match (av.shape(), bv.shape()) {
            ([p, n], [q, n2]) if n == n2 => {
                let (p, q, n) = (*p, *q, *n);
                let out = kernels::matmul_transpose_b(av.data(), bv.data(), p, q, n);
                let rg = self.needs(&[a, b]);
                Ok(self.push(
                    Tensor::from_parts(vec![p, q], out),
                    Op::MatMulTransB { a, b },
                    rg,
                ))
            }
            (l, r) => Err(AutodiffError::Shape {
                op: "matmul_transpose_b",
                left: l.to_vec(),
                right: r.to_vec(),
            }),
        }
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, operands: &[Var]) -> Result<Var, AutodiffError> {
        if operands.len() != op.arity() {
            return Err(AutodiffError::Arity {
                op: op.name(),
                expected: op.arity(),
                got: operands.len(),
            });
        }
        match operands {
            [x] => self.unary(*x, op),
            [a, b] => self.binary(*a, *b, op),
            _ => unreachable!(),
        }
    }

    fn unary(&mut self, x: Var, op: ElementwiseOp) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let f: fn(f64) -> f64 = match op {
            ElementwiseOp::Tanh => f64::tanh,
            ElementwiseOp::Sigmoid => kernels::sigmoid,
            ElementwiseOp::Relu => |v| if v > 0.0 { v } else { 0.0 },
            ElementwiseOp::Exp => f64::exp,
            ElementwiseOp::Log => {
                if let Some(&bad) = xv.data().iter().find(|v| !(**v > 0.0)) {
                    return Err(AutodiffError::Domain {
                        op: "log",
                        value: bad,
                    });
                }
                f64::ln
            }
            ElementwiseOp::Neg => |v| -v,
            _ => unreachable!("binary op routed to unary"),
        };
        let out = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| f(v)).collect(),
        );
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Unary { x, op }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, op: ElementwiseOp) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(AutodiffError::Shape {
                op: op.name(),
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let f: fn(f64, f64) -> f64 = match op {
            ElementwiseOp::Add => |x, y| x + y,
            ElementwiseOp::Sub => |x, y| x - y,
            ElementwiseOp::Mul => |x, y| x * y,
            _ => unreachable!("unary op routed to binary"),
        };
        let out = Tensor::from_parts(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Binary { a, b, op }, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, ElementwiseOp::Tanh).expect("tanh is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, ElementwiseOp::Sigmoid).expect("sigmoid is total")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, ElementwiseOp::Relu).expect("relu is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, ElementwiseOp::Exp).expect("exp is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(x, ElementwiseOp::Log)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, ElementwiseOp::Neg).expect("neg is total")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, ElementwiseOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, ElementwiseOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, ElementwiseOp::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| v * factor).collect(),
        );
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(AutodiffError::Empty { op: "mean" });
        }
        let s = self.sum(x);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// `log Σ exp(x)` over every element; the gradient is `softmax(x)`.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(AutodiffError::Empty { op: "log_sum_exp" });
        }
        let out = kernels::log_sum_exp(xv.data());
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(out), Op::LogSumExp { x }, rg))
    }

    /// Rows `[start, start + len)` of a matrix.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let (r, _) = dims(xv, "rows")?;
        if xv.shape().len() != 2 || start + len > r {
            return Err(AutodiffError::Index {
                op: "rows",
                index: start + len,
                bound: r,
            });
        }
        let out = xv.slice_rows(start, len);
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Rows { x, start }, rg))
    }

    /// Gathers matrix rows in the given order; indices may repeat.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let (r, c) = dims(xv, "select_rows")?;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(AutodiffError::Index {
                    op: "select_rows",
                    index: i,
                    bound: r,
                });
            }
            data.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::from_parts(vec![indices.len(), c], data);
        let rg = self.needs(&[x]);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// One element (flat index) as a scalar.
    pub fn element(&mut self, x: Var, index: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let Some(&v) = xv.data().get(index) else {
            return Err(AutodiffError::Index {
                op: "element",
                index,
                bound: xv.len(),
            });
        };
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Element { x, index }, rg))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let Some(first) = parts.first() else {
            return Err(AutodiffError::Empty { op: "concat_rows" });
        };
        let cols = dims(self.value(*first), "concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            let (r, c) = dims(pv, "concat_rows")?;
            if c != cols {
                return Err(AutodiffError::Shape {
                    op: "concat_rows",
                    left: self.value(*first).shape().to_vec(),
                    right: pv.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(pv.data());
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Returns the gradient of every node that requires one. Parameter leaves
    /// are reported through [`Gradients`] only; use [`Tape::backward_into`]
    /// to accumulate them into a [`ParameterSet`].
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds the gradient of every bound parameter
    /// into `params`. Repeated calls accumulate.
    pub fn backward_into(&self, loss: Var, params: &mut ParameterSet) -> Result<Gradients, AutodiffError> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = grads.grads[i].as_deref() {
                    params.accumulate(id, g)?;
                }
            }
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            contrib(slot);
        };
        let add_into = |slot: &mut [f64], d: &[f64]| {
            for (s, v) in slot.iter_mut().zip(d) {
                *s += v;
            }
        };

        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (batch, d_in) = xv.dims2().unwrap();
                let d_out = self.value(*b).len();
                send(*x, &|s| {
                    add_into(s, &kernels::matmul_transpose_b(g, wv.data(), batch, d_in, d_out))
                });
                send(*w, &|s| {
                    add_into(s, &kernels::matmul_transpose_a(xv.data(), g, batch, d_in, d_out))
                });
                send(*b, &|s| {
                    for row in g.chunks(d_out) {
                        add_into(s, row);
                    }
                });
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (p, q) = av.dims2().unwrap();
                let r = bv.cols();
                send(*a, &|s| add_into(s, &kernels::matmul_transpose_b(g, bv.data(), p, q, r)));
                send(*b, &|s| add_into(s, &kernels::matmul_transpose_a(av.data(), g, p, q, r)));
            }
            Op::MatMulTransB { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (p, n) = av.dims2().unwrap();
                let q = bv.rows();
                // out = a bᵀ: da = g b, db = gᵀ a
                send(*a, &|s| add_into(s, &kernels::matmul(g, bv.data(), p, q, n)));
                send(*b, &|s| add_into(s, &kernels::matmul_transpose_a(g, av.data(), p, q, n)));
            }
            Op::Unary { x, op } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                send(*x, &|s| {
                    for (k, sk) in s.iter_mut().enumerate() {
                        let d = match op {
                            ElementwiseOp::Tanh => 1.0 - yv[k] * yv[k],
                            ElementwiseOp::Sigmoid => yv[k] * (1.0 - yv[k]),
                            ElementwiseOp::Relu => {
                                if xv[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            ElementwiseOp::Exp => yv[k],
                            ElementwiseOp::Log => 1.0 / xv[k],
                            ElementwiseOp::Neg => -1.0,
                            _ => unreachable!(),
                        };
                        *sk += g[k] * d;
                    }
                });
            }
            Op::Binary { a, b, op } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                match op {
                    ElementwiseOp::Add => {
                        send(*a, &|s| add_into(s, g));
                        send(*b, &|s| add_into(s, g));
                    }
                    ElementwiseOp::Sub => {
                        send(*a, &|s| add_into(s, g));
                        send(*b, &|s| {
                            for (sk, gk) in s.iter_mut().zip(g) {
                                *sk -= gk;
                            }
                        });
                    }
                    ElementwiseOp::Mul => {
                        send(*a, &|s| {
                            for k in 0..s.len() {
                                s[k] += g[k] * bv[k];
                            }
                        });
                        send(*b, &|s| {
                            for k in 0..s.len() {
                                s[k] += g[k] * av[k];
                            }
                        });
                    }
                    _ => unreachable!(),
                }
            }
            Op::Scale { x, factor } => {
                send(*x, &|s| {
                    for (sk, gk) in s.iter_mut().zip(g) {
                        *sk += gk * factor;
                    }
                });
            }
            Op::Sum { x } => {
                send(*x, &|s| {
                    for sk in s.iter_mut() {
                        *sk += g[0];
                    }
                });
            }
            Op::LogSumExp { x } => {
                let xv = self.value(*x).data();
                let y = node.value.data()[0];
                send(*x, &|s| {
                    for (sk, &xk) in s.iter_mut().zip(xv) {
                        *sk += g[0] * (xk - y).exp();
                    }
                });
            }
            Op::Rows { x, start } => {
                let cols = node.value.cols();
                send(*x, &|s| add_into(&mut s[start * cols..start * cols + g.len()], g));
            }
            Op::SelectRows { x, indices } => {
                let cols = node.value.cols();
                send(*x, &|s| {
                    for (k, &row) in indices.iter().enumerate() {
                        add_into(&mut s[row * cols..(row + 1) * cols], &g[k * cols..(k + 1) * cols]);
                    }
                });
            }
            Op::Element { x, index } => {
                send(*x, &|s| s[*index] += g[0]);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let chunk = &g[offset..offset + len];
                    send(p, &|s| add_into(s, chunk));
                    offset += len;
                }
            }
        }
    }
}
