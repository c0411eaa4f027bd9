use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations the tape knows how to differentiate.
///
/// Matrix-valued primitives treat rank-1 operands as single-row matrices.
/// `LogSoftmax` normalizes each row independently.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `a · b`
    MatMul,
    /// `a · bᵀ`, the dense-layer product with weights stored `out×in`.
    MatMulTransposed,
    /// Elementwise sum; the right operand may be a single row broadcast
    /// over the rows of the left operand.
    Add,
    /// Elementwise difference with the same broadcasting rule as `Add`.
    Sub,
    Mul,
    Scale(f64),
    Offset(f64),
    Sin,
    Relu,
    Sigmoid,
    Log,
    Clamp { lo: f64, hi: f64 },
    LogSoftmax,
    /// Concatenation along `axis` (0 = rows, 1 = columns). Rank-1 inputs
    /// concatenate end to end.
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Sum,
    SquaredNorm,
    /// Identity forward; multiplies the upstream gradient by `-lambda`.
    GradReversal { lambda: f64 },
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::MatMulTransposed => "matmul_transposed",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::Offset(_) => "offset",
            Primitive::Sin => "sin",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Log => "log",
            Primitive::Clamp { .. } => "clamp",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Sum => "sum",
            Primitive::SquaredNorm => "squared_norm",
            Primitive::GradReversal { .. } => "grad_reversal",
        }
    }
}

#[derive(Debug)]
enum Kind {
    Leaf,
    Op(Primitive),
}

#[derive(Debug)]
struct Node {
    kind: Kind,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Reverse-mode recording of a computation.
///
/// Nodes are appended in evaluation order, so parents always precede
/// children and a single reverse pass suffices.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    records_visited: usize,
}

impl Gradients {
    /// Gradient with respect to `var`; exactly zero when `var` does not
    /// influence the output.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    /// Number of tape records processed by the sweep that produced these
    /// gradients.
    pub fn records_visited(&self) -> usize {
        self.records_visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape that rejects any primitive producing NaN or infinity.
    pub fn with_finite_checks() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
        }
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

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Leaf whose gradient is tracked.
    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf treated as a constant by the reverse sweep.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            kind: Kind::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Apply `op` to `inputs` and append the result to the tape.
    pub fn record(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        let value = self.forward(&op, inputs)?;
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} produced a non-finite value (record {})",
                op.name(),
                self.nodes.len()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            kind: Kind::Op(op),
            inputs: inputs.iter().map(|v| v.0).collect(),
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::MatMul, &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::MatMulTransposed, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.record(Primitive::Scale(factor), &[a])
    }

    pub fn offset(&mut self, a: Var, shift: f64) -> Result<Var> {
        self.record(Primitive::Offset(shift), &[a])
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Sin, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Sigmoid, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Log, &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.record(Primitive::Clamp { lo, hi }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::LogSoftmax, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.record(Primitive::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.record(Primitive::Slice { axis, start, len }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Sum, &[a])
    }

    pub fn squared_norm(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::SquaredNorm, &[a])
    }

    pub fn grad_reversal(&mut self, a: Var, lambda: f64) -> Result<Var> {
        self.record(Primitive::GradReversal { lambda }, &[a])
    }

    fn forward(&self, op: &Primitive, inputs: &[Var]) -> Result<Tensor> {
        let name = op.name();
        let arity = match op {
            Primitive::MatMul
            | Primitive::MatMulTransposed
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        };
        match arity {
            Some(n) if inputs.len() != n => {
                return Err(Error::shape(
                    name,
                    format!("expected {n} inputs, got {}", inputs.len()),
                ))
            }
            None if inputs.is_empty() => return Err(Error::shape(name, "no inputs")),
            _ => {}
        }
        let x = &self.nodes[inputs[0].0].value;
        let out = match op {
            Primitive::MatMul => {
                let y = &self.nodes[inputs[1].0].value;
                let (r, k) = x.dims2();
                let (k2, c) = y.dims2();
                if k != k2 || y.rank() == 1 {
                    return Err(Error::shape(
                        name,
                        format!("{:?} · {:?}", x.shape(), y.shape()),
                    ));
                }
                let shape = if x.rank() == 1 { vec![c] } else { vec![r, c] };
                Tensor::from_parts(shape, matmul(x.data(), y.data(), r, k, c))
            }
            Primitive::MatMulTransposed => {
                let y = &self.nodes[inputs[1].0].value;
                let (r, k) = x.dims2();
                let (c, k2) = y.dims2();
                if k != k2 || y.rank() != 2 {
                    return Err(Error::shape(
                        name,
                        format!("{:?} · {:?}ᵀ", x.shape(), y.shape()),
                    ));
                }
                let shape = if x.rank() == 1 { vec![c] } else { vec![r, c] };
                Tensor::from_parts(shape, matmul_nt(x.data(), y.data(), r, k, c))
            }
            Primitive::Add | Primitive::Sub => {
                let y = &self.nodes[inputs[1].0].value;
                let sign = if matches!(op, Primitive::Add) { 1.0 } else { -1.0 };
                let broadcast = broadcast_mode(name, x, y)?;
                let c = x.cols();
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| {
                        let b = if broadcast { y.data()[i % c] } else { y.data()[i] };
                        a + sign * b
                    })
                    .collect();
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Primitive::Mul => {
                let y = &self.nodes[inputs[1].0].value;
                if x.shape() != y.shape() {
                    return Err(Error::shape(
                        name,
                        format!("{:?} vs {:?}", x.shape(), y.shape()),
                    ));
                }
                let data = x.data().iter().zip(y.data()).map(|(a, b)| a * b).collect();
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Primitive::Scale(k) => x.map(|v| k * v),
            Primitive::Offset(k) => x.map(|v| v + k),
            Primitive::Sin => x.map(f64::sin),
            Primitive::Relu => x.map(|v| v.max(0.0)),
            Primitive::Sigmoid => x.map(sigmoid),
            Primitive::Log => x.map(f64::ln),
            Primitive::Clamp { lo, hi } => {
                if lo > hi {
                    return Err(Error::shape(name, format!("empty interval [{lo}, {hi}]")));
                }
                x.map(|v| v.clamp(*lo, *hi))
            }
            Primitive::LogSoftmax => {
                let (r, c) = x.dims2();
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    let row = x.row(i);
                    let lse = log_sum_exp(row);
                    data.extend(row.iter().map(|v| v - lse));
                }
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Primitive::Concat { axis } => self.concat_forward(inputs, *axis)?,
            Primitive::Slice { axis, start, len } => slice_forward(x, *axis, *start, *len)?,
            Primitive::Sum => Tensor::scalar(x.data().iter().sum()),
            Primitive::SquaredNorm => Tensor::scalar(x.data().iter().map(|v| v * v).sum()),
            Primitive::GradReversal { lambda } => {
                if *lambda < 0.0 {
                    return Err(Error::shape(name, format!("negative lambda {lambda}")));
                }
                x.clone()
            }
        };
        Ok(out)
    }

    fn concat_forward(&self, inputs: &[Var], axis: usize) -> Result<Tensor> {
        let parts: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let rank = parts[0].rank();
        if parts.iter().any(|p| p.rank() != rank) || rank == 0 {
            return Err(Error::shape("concat", "inputs must share a nonzero rank"));
        }
        if rank == 1 {
            if axis != 0 && axis != 1 {
                return Err(Error::shape("concat", format!("bad axis {axis}")));
            }
            let data: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
            let n = data.len();
            return Ok(Tensor::from_parts(vec![n], data));
        }
        match axis {
            0 => {
                let c = parts[0].cols();
                if parts.iter().any(|p| p.cols() != c) {
                    return Err(Error::shape("concat", "column counts differ"));
                }
                let rows: usize = parts.iter().map(|p| p.rows()).sum();
                let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
                Ok(Tensor::from_parts(vec![rows, c], data))
            }
            1 => {
                let r = parts[0].rows();
                if parts.iter().any(|p| p.rows() != r) {
                    return Err(Error::shape("concat", "row counts differ"));
                }
                let cols: usize = parts.iter().map(|p| p.cols()).sum();
                let mut data = Vec::with_capacity(r * cols);
                for i in 0..r {
                    for p in &parts {
                        data.extend_from_slice(p.row(i));
                    }
                }
                Ok(Tensor::from_parts(vec![r, cols], data))
            }
            _ => Err(Error::shape("concat", format!("bad axis {axis}"))),
        }
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, has shape {:?}", out.value.shape()),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Kind::Op(op) = &node.kind else { continue };
            let Some(upstream) = grads[idx].take() else { continue };
            visited += 1;
            self.propagate(op, node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, nd)| g.map(|d| Tensor::from_parts(nd.value.shape().to_vec(), d)))
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            records_visited: visited,
        })
    }

    fn propagate(&self, op: &Primitive, node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let inputs = &node.inputs;
        let val = |i: usize| &self.nodes[inputs[i]].value;
        let wants = |i: usize| self.nodes[inputs[i]].requires_grad;
        let mut emit = |i: usize, g: Vec<f64>| accumulate(grads, inputs[i], g);
        match op {
            Primitive::MatMul => {
                let (a, b) = (val(0), val(1));
                let (r, k) = a.dims2();
                let c = b.cols();
                if wants(0) {
                    emit(0, matmul_nt(up, b.data(), r, c, k));
                }
                if wants(1) {
                    emit(1, matmul_tn(a.data(), up, r, k, c));
                }
            }
            Primitive::MatMulTransposed => {
                let (a, b) = (val(0), val(1));
                let (r, k) = a.dims2();
                let c = b.rows();
                if wants(0) {
                    emit(0, matmul(up, b.data(), r, c, k));
                }
                if wants(1) {
                    emit(1, matmul_tn(up, a.data(), r, c, k));
                }
            }
            Primitive::Add | Primitive::Sub => {
                let sign = if matches!(op, Primitive::Add) { 1.0 } else { -1.0 };
                if wants(0) {
                    emit(0, up.to_vec());
                }
                if wants(1) {
                    let (a, b) = (val(0), val(1));
                    if b.len() == a.len() {
                        emit(1, up.iter().map(|g| sign * g).collect());
                    } else {
                        let c = a.cols();
                        let mut g = vec![0.0; c];
                        for (i, u) in up.iter().enumerate() {
                            g[i % c] += sign * u;
                        }
                        emit(1, g);
                    }
                }
            }
            Primitive::Mul => {
                if wants(0) {
                    emit(0, up.iter().zip(val(1).data()).map(|(g, b)| g * b).collect());
                }
                if wants(1) {
                    emit(1, up.iter().zip(val(0).data()).map(|(g, a)| g * a).collect());
                }
            }
            Primitive::Scale(k) => emit(0, up.iter().map(|g| k * g).collect()),
            Primitive::Offset(_) => emit(0, up.to_vec()),
            Primitive::Sin => emit(
                0,
                up.iter().zip(val(0).data()).map(|(g, x)| g * x.cos()).collect(),
            ),
            Primitive::Relu => emit(
                0,
                up.iter()
                    .zip(val(0).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Primitive::Sigmoid => emit(
                0,
                up.iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect(),
            ),
            Primitive::Log => emit(
                0,
                up.iter().zip(val(0).data()).map(|(g, x)| g / x).collect(),
            ),
            Primitive::Clamp { lo, hi } => emit(
                0,
                up.iter()
                    .zip(val(0).data())
                    .map(|(g, x)| if x >= lo && x <= hi { *g } else { 0.0 })
                    .collect(),
            ),
            Primitive::LogSoftmax => {
                let (r, c) = node.value.dims2();
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    let y = node.value.row(i);
                    let u = &up[i * c..(i + 1) * c];
                    let total: f64 = u.iter().sum();
                    for j in 0..c {
                        g[i * c + j] = u[j] - y[j].exp() * total;
                    }
                }
                emit(0, g);
            }
            Primitive::Concat { axis } => {
                let rank = node.value.rank();
                let (r, cols) = node.value.dims2();
                let mut row_offset = 0;
                let mut col_offset = 0;
                for i in 0..inputs.len() {
                    let part = val(i);
                    let (pr, pc) = part.dims2();
                    if wants(i) {
                        let g = if rank == 1 || *axis == 0 {
                            let start = if rank == 1 { col_offset } else { row_offset * cols };
                            up[start..start + part.len()].to_vec()
                        } else {
                            let mut g = Vec::with_capacity(part.len());
                            for row in 0..r {
                                let s = row * cols + col_offset;
                                g.extend_from_slice(&up[s..s + pc]);
                            }
                            g
                        };
                        emit(i, g);
                    }
                    row_offset += pr;
                    col_offset += pc;
                }
            }
            Primitive::Slice { axis, start, len } => {
                let x = val(0);
                let mut g = vec![0.0; x.len()];
                let (r, c) = x.dims2();
                if x.rank() == 1 {
                    g[*start..start + len].copy_from_slice(up);
                } else if *axis == 0 {
                    g[start * c..(start + len) * c].copy_from_slice(up);
                } else {
                    for row in 0..r {
                        g[row * c + start..row * c + start + len]
                            .copy_from_slice(&up[row * len..(row + 1) * len]);
                    }
                }
                emit(0, g);
            }
            Primitive::Sum => emit(0, vec![up[0]; val(0).len()]),
            Primitive::SquaredNorm => {
                emit(0, val(0).data().iter().map(|x| 2.0 * x * up[0]).collect())
            }
            Primitive::GradReversal { lambda } => emit(0, up.iter().map(|g| -lambda * g).collect()),
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: Vec<f64>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn broadcast_mode(op: &'static str, x: &Tensor, y: &Tensor) -> Result<bool> {
    if x.shape() == y.shape() {
        return Ok(false);
    }
    let row_like = y.rank() == 1 || (y.rank() == 2 && y.rows() == 1);
    if x.rank() == 2 && row_like && y.cols() == x.cols() {
        return Ok(true);
    }
    Err(Error::shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())))
}

fn slice_forward(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = x.dims2();
    let extent = if x.rank() == 1 {
        c
    } else if axis == 0 {
        r
    } else if axis == 1 {
        c
    } else {
        return Err(Error::shape("slice", format!("bad axis {axis}")));
    };
    if x.rank() == 0 || len == 0 || start + len > extent {
        return Err(Error::shape(
            "slice",
            format!("[{start}, {}) out of extent {extent}", start + len),
        ));
    }
    Ok(if x.rank() == 1 {
        Tensor::from_parts(vec![len], x.data()[start..start + len].to_vec())
    } else if axis == 0 {
        Tensor::from_parts(vec![len, c], x.data()[start * c..(start + len) * c].to_vec())
    } else {
        let mut data = Vec::with_capacity(r * len);
        for row in 0..r {
            data.extend_from_slice(&x.row(row)[start..start + len]);
        }
        Tensor::from_parts(vec![r, len], data)
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_gradient;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn sine_of_zero() {
        let mut tape = Tape::new();
        let x = tape.parameter(Tensor::scalar(0.0));
        let y = tape.sin(x).unwrap();
        assert_eq!(tape.value(y).item(), Some(0.0));
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), Some(1.0));
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.parameter(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), Some(6.0));
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut tape = Tape::new();
        let a = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.25, -1.0]).unwrap();
        let x = tape.constant(a.clone());
        let id = tape.constant(Tensor::identity(3));
        let y = tape.matmul(x, id).unwrap();
        assert_eq!(tape.value(y), &a);
    }

    #[test]
    fn concat_of_vectors() {
        let mut tape = Tape::new();
        let a = tape.constant(vec_t(&[1.0, 2.0]));
        let b = tape.constant(vec_t(&[3.0, 4.0, 5.0]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).shape(), &[5]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.matmul(a, b).is_err());
        let v = tape_vec(&mut tape);
        assert!(tape.mul(a, v).is_err());
        assert!(tape.slice(a, 1, 2, 2).is_err());
        assert!(tape.backward(a).is_err());
    }

    fn tape_vec(tape: &mut Tape) -> Var {
        tape.constant(Tensor::zeros(&[3]))
    }

    #[test]
    fn finite_checks_catch_log_of_zero() {
        let mut tape = Tape::with_finite_checks();
        let a = tape.constant(Tensor::scalar(0.0));
        assert!(matches!(tape.log(a), Err(Error::NonFinite(_))));
        // unchecked tapes let the value through
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.0));
        let y = tape.log(a).unwrap();
        assert!(!tape.value(y).is_finite());
    }

    #[test]
    fn disconnected_parameter_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.parameter(vec_t(&[1.0, 2.0]));
        let unused = tape.parameter(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let y = tape.squared_norm(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn grad_reversal_contract() {
        let mut tape = Tape::new();
        let x = tape.parameter(vec_t(&[1.5, -2.0]));
        let r = tape.grad_reversal(x, 2.0).unwrap();
        assert_eq!(tape.value(r).data(), &[1.5, -2.0]);
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[-2.0, -2.0]);
    }

    #[test]
    fn sweep_is_linear_in_records() {
        for depth in [10usize, 100, 1000] {
            let mut tape = Tape::new();
            let x = tape.parameter(Tensor::scalar(0.3));
            let mut y = x;
            for _ in 0..depth {
                y = tape.sin(y).unwrap();
            }
            let g = tape.backward(y).unwrap();
            assert_eq!(g.records_visited(), depth);
        }
    }

    /// Each primitive checked against central differences on random inputs.
    #[test]
    fn every_primitive_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut sample = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let weights = sample(12);
        let other = sample(6);
        let row = sample(3);

        type Build = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;
        let w = weights.clone();
        let o = other.clone();
        let o2 = other.clone();
        let rw = row.clone();
        let cases: Vec<(&str, Build)> = vec![
            ("matmul", Box::new(move |t, x| {
                let b = t.constant(Tensor::matrix(3, 4, w.clone()).unwrap());
                t.matmul(x, b)
            })),
            ("matmul_t", Box::new(move |t, x| {
                let b = t.constant(Tensor::matrix(4, 3, weights.clone()).unwrap());
                t.matmul_t(x, b)
            })),
            ("add_broadcast", Box::new(move |t, x| {
                let b = t.constant(Tensor::vector(rw.clone()).unwrap());
                t.add(x, b)
            })),
            ("sub", Box::new(move |t, x| {
                let b = t.constant(Tensor::matrix(2, 3, o.clone()).unwrap());
                t.sub(b, x)
            })),
            ("mul", Box::new(move |t, x| {
                let b = t.constant(Tensor::matrix(2, 3, o2.clone()).unwrap());
                t.mul(x, b)
            })),
            ("self_mul", Box::new(|t, x| t.mul(x, x))),
            ("scale", Box::new(|t, x| t.scale(x, -1.7))),
            ("offset", Box::new(|t, x| t.offset(x, 0.4))),
            ("sin", Box::new(|t, x| t.sin(x))),
            ("relu", Box::new(|t, x| t.relu(x))),
            ("sigmoid", Box::new(|t, x| t.sigmoid(x))),
            ("log", Box::new(|t, x| { let y = t.offset(x, 2.0)?; t.log(y) })),
            ("clamp", Box::new(|t, x| t.clamp(x, -0.5, 0.5))),
            ("log_softmax", Box::new(|t, x| t.log_softmax(x))),
            ("concat_cols", Box::new(|t, x| { let y = t.sin(x)?; t.concat(&[x, y], 1) })),
            ("concat_rows", Box::new(|t, x| { let y = t.sin(x)?; t.concat(&[y, x], 0) })),
            ("slice_rows", Box::new(|t, x| t.slice(x, 0, 1, 1))),
            ("slice_cols", Box::new(|t, x| t.slice(x, 1, 1, 2))),
            ("squared_norm", Box::new(|t, x| t.squared_norm(x))),
            ("grad_reversal", Box::new(|t, x| t.grad_reversal(x, 0.7))),
        ];
        let x0 = sample(6);
        // weighting keeps the scalar reduction from hiding sign errors
        let probe_weights: Vec<f64> = (0..24).map(|i| 0.3 + 0.1 * i as f64).collect();
        for (name, build) in &cases {
            let eval = |xs: &[f64], tape: &mut Tape| -> Result<(Var, Var)> {
                let x = tape.parameter(Tensor::matrix(2, 3, xs.to_vec()).unwrap());
                let y = build(tape, x)?;
                let n = tape.value(y).len();
                let shape = tape.value(y).shape().to_vec();
                let p = tape.constant(Tensor::new(shape, probe_weights[..n].to_vec()).unwrap());
                let weighted = tape.mul(y, p)?;
                Ok((x, tape.sum(weighted)?))
            };
            let mut tape = Tape::new();
            let (x, out) = eval(&x0, &mut tape).unwrap();
            let analytic = tape.backward(out).unwrap().wrt(x);
            let reversal = if *name == "grad_reversal" { -0.7 } else { 1.0 };
            let numeric = finite_difference_gradient(
                |xs| {
                    let mut t = Tape::new();
                    let (_, out) = eval(xs, &mut t)?;
                    Ok(t.value(out).data()[0])
                },
                &x0,
                1e-5,
            )
            .unwrap();
            for (a, n) in analytic.data().iter().zip(&numeric) {
                let n = reversal * n;
                let rel = (a - n).abs() / n.abs().max(1.0);
                assert!(rel < 1e-6, "{name}: autodiff {a} vs fd {n}");
            }
        }
    }
}
