use super::tensor::{dims2, matmul_nt_into, matmul_tn_into};
use super::{GradError, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    LogSigmoid,
    Softplus,
    Silu,
    Square,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    SumAxis { arg: usize, axis: usize },
    LogSoftmax(usize),
    Take { arg: usize, indices: Vec<usize> },
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run recording of a computation. Nodes are appended in
/// evaluation order, so parents always precede children.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the output with respect to every leaf that influenced it.
/// Intermediate accumulators are released during the sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like it when `v` did not influence the output.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (ra, ca) = dims2(a);
    let (rb, cb) = dims2(b);
    let fits = |x: usize, y: usize| x == y || x == 1 || y == 1;
    if !fits(ra, rb) || !fits(ca, cb) {
        return Err(GradError::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    let (r, c) = (ra.max(rb), ca.max(cb));
    if (r, c) == (ra, ca) {
        Ok(a.to_vec())
    } else if (r, c) == (rb, cb) {
        Ok(b.to_vec())
    } else {
        Ok(vec![r, c])
    }
}

/// Sums a gradient of broadcast shape `(r, c)` back down to `target`.
fn reduce_to(grad: &[f64], r: usize, c: usize, target: &[usize]) -> Tensor {
    let (tr, tc) = dims2(target);
    if (tr, tc) == (r, c) {
        return Tensor::new(target.to_vec(), grad.to_vec()).expect("shape checked");
    }
    let mut out = vec![0.0; tr * tc];
    for i in 0..r {
        for j in 0..c {
            out[(i % tr) * tc + (j % tc)] += grad[i * c + j];
        }
    }
    Tensor::new(target.to_vec(), out).expect("shape checked")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable `ln(sigmoid(x)) = -softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

fn unary_name(u: Unary) -> &'static str {
    match u {
        Unary::Neg => "neg",
        Unary::Exp => "exp",
        Unary::Ln => "ln",
        Unary::Tanh => "tanh",
        Unary::Sigmoid => "sigmoid",
        Unary::LogSigmoid => "log_sigmoid",
        Unary::Softplus => "softplus",
        Unary::Silu => "silu",
        Unary::Square => "square",
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(GradError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.leaf(Tensor::scalar(value))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(name, va.shape(), vb.shape())?;
        let (r, c) = dims2(&shape);
        let (ra, ca) = va.dims2();
        let (rb, cb) = vb.dims2();
        let (da, db) = (va.data(), vb.data());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let x = da[(i % ra) * ca + (j % ca)];
                let y = db[(i % rb) * cb + (j % cb)];
                out.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                });
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(name, value, Op::Binary(kind, a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |x| -x,
            Unary::Exp => f64::exp,
            Unary::Ln => f64::ln,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::LogSigmoid => log_sigmoid,
            Unary::Softplus => softplus,
            Unary::Silu => |x| x * sigmoid(x),
            Unary::Square => |x| x * x,
        };
        let value = self.nodes[a.0].value.map(f);
        self.push(unary_name(kind), value, Op::Unary(kind, a.0))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Ln, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::LogSigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Silu, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| x * factor);
        self.push("scale", value, Op::Scale(a.0, factor))
    }

    pub fn shift(&mut self, a: Var, offset: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| x + offset);
        self.push("shift", value, Op::Shift(a.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        self.push("matmul", value, Op::MatMul(a.0, b.0))
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push("sum", value, Op::SumAll(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.is_empty() {
            return Err(GradError::EmptyReduction { op: "mean" });
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", value, Op::MeanAll(a.0))
    }

    /// Sum of a rank-2 tensor along `axis`, producing a rank-1 tensor.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.shape().len() != 2 || axis > 1 {
            return Err(GradError::InvalidAxis {
                shape: t.shape().to_vec(),
                axis,
            });
        }
        let (r, c) = t.dims2();
        let d = t.data();
        let out = if axis == 1 {
            (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect()
        } else {
            (0..c).map(|j| (0..r).map(|i| d[i * c + j]).sum()).collect()
        };
        self.push("sum_axis", Tensor::vector(out), Op::SumAxis { arg: a.0, axis })
    }

    /// Row-wise `‖a - b‖²`, shape `[n]` for `[n, m]` operands.
    pub fn squared_error_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.sub(a, b)?;
        let sq = self.square(diff)?;
        self.sum_axis(sq, 1)
    }

    /// Log-softmax over the last axis (each row of a rank-2 tensor).
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (r, c) = t.dims2();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&x| x - lse));
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax(a.0))
    }

    /// Gathers flat elements: `out[i] = a.flat[indices[i]]`.
    pub fn take(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let d = t.data();
        let mut out = Vec::with_capacity(indices.len());
        for &ix in indices {
            match d.get(ix) {
                Some(&v) => out.push(v),
                None => {
                    return Err(GradError::IndexOutOfRange {
                        op: "take",
                        index: ix,
                        len: d.len(),
                    })
                }
            }
        }
        self.push(
            "take",
            Tensor::vector(out),
            Op::Take {
                arg: a.0,
                indices: indices.to_vec(),
            },
        )
    }

    /// Picks `a[i, columns[i]]` from each row of a rank-2 tensor.
    pub fn gather_rows(&mut self, a: Var, columns: &[usize]) -> Result<Var> {
        let (r, c) = self.nodes[a.0].value.dims2();
        if columns.len() != r {
            return Err(GradError::ShapeMismatch {
                op: "gather_rows",
                left: self.nodes[a.0].value.shape().to_vec(),
                right: vec![columns.len()],
            });
        }
        let mut flat = Vec::with_capacity(r);
        for (i, &j) in columns.iter().enumerate() {
            if j >= c {
                return Err(GradError::IndexOutOfRange {
                    op: "gather_rows",
                    index: j,
                    len: c,
                });
            }
            flat.push(i * c + j);
        }
        self.take(a, &flat)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a.0))
    }

    /// Reverse sweep from a scalar output. Each node is visited once, in
    /// reverse recording order.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(GradError::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::Binary(kind, a, b) => {
                    let (r, c) = dims2(node.value.shape());
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    let (ra, ca) = va.dims2();
                    let (rb, cb) = vb.dims2();
                    let gd = g.data();
                    let mut ga = vec![0.0; r * c];
                    let mut gb = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let k = i * c + j;
                            let x = va.data()[(i % ra) * ca + (j % ca)];
                            let y = vb.data()[(i % rb) * cb + (j % cb)];
                            match kind {
                                Binary::Add => {
                                    ga[k] = gd[k];
                                    gb[k] = gd[k];
                                }
                                Binary::Sub => {
                                    ga[k] = gd[k];
                                    gb[k] = -gd[k];
                                }
                                Binary::Mul => {
                                    ga[k] = gd[k] * y;
                                    gb[k] = gd[k] * x;
                                }
                                Binary::Div => {
                                    ga[k] = gd[k] / y;
                                    gb[k] = -gd[k] * x / (y * y);
                                }
                            }
                        }
                    }
                    let ta = reduce_to(&ga, r, c, va.shape());
                    let tb = reduce_to(&gb, r, c, vb.shape());
                    accumulate(&mut grads, *a, ta);
                    accumulate(&mut grads, *b, tb);
                }
                Op::Unary(kind, a) => {
                    let x = &self.nodes[*a].value;
                    let y = &node.value;
                    let data: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(x.data().iter().zip(y.data()))
                        .map(|(&gi, (&xi, &yi))| {
                            gi * match kind {
                                Unary::Neg => -1.0,
                                Unary::Exp => yi,
                                Unary::Ln => 1.0 / xi,
                                Unary::Tanh => 1.0 - yi * yi,
                                Unary::Sigmoid => yi * (1.0 - yi),
                                Unary::LogSigmoid => sigmoid(-xi),
                                Unary::Softplus => sigmoid(xi),
                                Unary::Silu => {
                                    let s = sigmoid(xi);
                                    s * (1.0 + xi * (1.0 - s))
                                }
                                Unary::Square => 2.0 * xi,
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::Scale(a, f) => {
                    accumulate(&mut grads, *a, g.map(|v| v * f));
                }
                Op::Shift(a) => accumulate(&mut grads, *a, g),
                Op::MatMul(a, b) => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    let (n, k) = va.dims2();
                    let m = vb.dims2().1;
                    let mut ga = vec![0.0; n * k];
                    matmul_nt_into(g.data(), vb.data(), &mut ga, n, m, k);
                    let mut gb = vec![0.0; k * m];
                    matmul_tn_into(va.data(), g.data(), &mut gb, n, k, m);
                    accumulate(&mut grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
                    accumulate(&mut grads, *b, Tensor::new(vb.shape().to_vec(), gb)?);
                }
                Op::SumAll(a) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(self.nodes[*a].value.shape(), gv));
                }
                Op::MeanAll(a) => {
                    let x = &self.nodes[*a].value;
                    let gv = g.data()[0] / x.len() as f64;
                    accumulate(&mut grads, *a, Tensor::full(x.shape(), gv));
                }
                Op::SumAxis { arg, axis } => {
                    let x = &self.nodes[*arg].value;
                    let (r, c) = x.dims2();
                    let gd = g.data();
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[i * c + j] = if *axis == 1 { gd[i] } else { gd[j] };
                        }
                    }
                    accumulate(&mut grads, *arg, Tensor::new(x.shape().to_vec(), out)?);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let (r, c) = y.dims2();
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        let gs: f64 = g.row(i).iter().sum();
                        for j in 0..c {
                            let k = i * c + j;
                            out[k] = g.data()[k] - y.data()[k].exp() * gs;
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(y.shape().to_vec(), out)?);
                }
                Op::Take { arg, indices } => {
                    let x = &self.nodes[*arg].value;
                    let mut out = vec![0.0; x.len()];
                    for (&ix, &gi) in indices.iter().zip(g.data()) {
                        out[ix] += gi;
                    }
                    accumulate(&mut grads, *arg, Tensor::new(x.shape().to_vec(), out)?);
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[*a].value.shape().to_vec();
                    accumulate(&mut grads, *a, g.reshape(&shape)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
