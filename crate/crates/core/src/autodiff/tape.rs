use super::tensor::{gemm_acc, gemm_tn_acc, Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::math;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    StopGradient,
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run recording of a computation over 2-D `f64` matrices.
///
/// Nodes are appended in evaluation order, so the node list is already a topological
/// order and [`Tape::gradients`] sweeps it once in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node adjoints produced by a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when no path reached it.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn check_finite(m: &Matrix, op: &'static str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that takes no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// A free-standing leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf { param: None }, true)
    }

    /// Binds a stored parameter. Its gradient is added to the store by [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let (r, c) = t.matrix_shape();
        let value = Matrix::from_vec(r, c, t.values.clone()).expect("param shape is validated");
        self.push(value, Op::Leaf { param: Some(id) }, t.requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: (m, k),
                right: (k2, n),
            });
        }
        let mut out = Matrix::zeros(m, n);
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            m,
            k,
            n,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(Matrix::from_vec(r, c, data).unwrap(), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds the `1 x n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(bias) != (1, c) {
            return Err(Error::Shape {
                op: "add_row",
                left: (r, c),
                right: self.shape(bias),
            });
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_exact_mut(c.max(1)) {
            add_into(row, &b);
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(out, Op::AddRow(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Elementwise `max(x, slope * x)`; the derivative at exactly zero is `slope`.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::domain(format!("leaky slope {slope} outside (0, 1)")));
        }
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = if *v > 0.0 { *v } else { slope * *v });
        let ng = self.needs(a);
        Ok(self.push(out, Op::LeakyRelu(a, slope), ng))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    /// Row-wise log-softmax, `l - max(l) - ln sum exp(l - max(l))`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = log_softmax_rows(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::LogSoftmax(a), ng))
    }

    /// Column-wise concatenation of equally tall matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Matrix::from_vec(rows, cols, out).unwrap(),
            Op::Concat(parts.to_vec()),
            ng,
        ))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return Err(Error::Shape {
                op: "slice_cols",
                left: (r, c),
                right: (start, end),
            });
        }
        let mut out = Vec::with_capacity(r * (end - start));
        for row in 0..r {
            out.extend_from_slice(&self.value(a).row(row)[start..end]);
        }
        let ng = self.needs(a);
        Ok(self.push(
            Matrix::from_vec(r, end - start, out).unwrap(),
            Op::Slice(a, start, end),
            ng,
        ))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Matrix::from_vec(1, 1, vec![s]).unwrap(), Op::Sum(a), ng)
    }

    /// Mean of all entries, as a `1 x 1` node.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let s: f64 = m.data().iter().sum::<f64>() / m.data().len() as f64;
        let ng = self.needs(a);
        self.push(Matrix::from_vec(1, 1, vec![s]).unwrap(), Op::Mean(a), ng)
    }

    /// Per-row sums, as an `r x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data: Vec<f64> = (0..m.rows()).map(|r| m.row(r).iter().sum()).collect();
        let ng = self.needs(a);
        self.push(Matrix::column(data), Op::SumRows(a), ng)
    }

    /// Forward identity that blocks every gradient path through it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGradient, false)
    }

    /// Reverse sweep from the scalar `loss`; returns the adjoint of every node reached.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.needs(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let acc = |grads: &mut Vec<Option<Vec<f64>>>, v: Var, f: &dyn Fn(&mut [f64])| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                let slot =
                    grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.data().len()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf { .. } => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = node.value.cols();
                    acc(&mut grads, *a, &|ga| {
                        let bt = self.value(*b).transpose();
                        gemm_acc(&g, bt.data(), ga, m, n, k);
                    });
                    acc(&mut grads, *b, &|gb| {
                        gemm_tn_acc(self.value(*a).data(), &g, gb, m, k, n);
                    });
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &|ga| add_into(ga, &g));
                    acc(&mut grads, *b, &|gb| add_into(gb, &g));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, &|ga| add_into(ga, &g));
                    acc(&mut grads, *b, &|gb| {
                        for (d, s) in gb.iter_mut().zip(&g) {
                            *d -= s;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    acc(&mut grads, *a, &|ga| {
                        for ((d, s), y) in ga.iter_mut().zip(&g).zip(bv) {
                            *d += s * y;
                        }
                    });
                    acc(&mut grads, *b, &|gb| {
                        for ((d, s), x) in gb.iter_mut().zip(&g).zip(av) {
                            *d += s * x;
                        }
                    });
                }
                Op::AddRow(a, bias) => {
                    let c = node.value.cols();
                    acc(&mut grads, *a, &|ga| add_into(ga, &g));
                    acc(&mut grads, *bias, &|gb| {
                        for row in g.chunks_exact(c.max(1)) {
                            add_into(gb, row);
                        }
                    });
                }
                Op::Scale(a, s) => {
                    acc(&mut grads, *a, &|ga| {
                        for (d, v) in ga.iter_mut().zip(&g) {
                            *d += s * v;
                        }
                    });
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a).data();
                    acc(&mut grads, *a, &|ga| {
                        for ((d, v), &xi) in ga.iter_mut().zip(&g).zip(x) {
                            *d += if xi > 0.0 { *v } else { slope * v };
                        }
                    });
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, &|ga| {
                        let c = y.cols();
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = &g[r * c..(r + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for j in 0..c {
                                ga[r * c + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, &|ga| {
                        let c = y.cols();
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = &g[r * c..(r + 1) * c];
                            let total: f64 = gr.iter().sum();
                            for j in 0..c {
                                ga[r * c + j] += gr[j] - math::exp(yr[j]) * total;
                            }
                        }
                    });
                }
                Op::Concat(parts) => {
                    let cols = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.shape(p).1;
                        acc(&mut grads, p, &|gp| {
                            for r in 0..node.value.rows() {
                                add_into(
                                    &mut gp[r * pc..(r + 1) * pc],
                                    &g[r * cols + offset..r * cols + offset + pc],
                                );
                            }
                        });
                        offset += pc;
                    }
                }
                Op::Slice(a, start, end) => {
                    let (rows, cols) = self.shape(*a);
                    let w = end - start;
                    acc(&mut grads, *a, &|ga| {
                        for r in 0..rows {
                            add_into(
                                &mut ga[r * cols + start..r * cols + end],
                                &g[r * w..(r + 1) * w],
                            );
                        }
                    });
                }
                Op::Sum(a) => {
                    acc(&mut grads, *a, &|ga| ga.iter_mut().for_each(|d| *d += g[0]));
                }
                Op::Mean(a) => {
                    let n = self.value(*a).data().len() as f64;
                    acc(&mut grads, *a, &|ga| {
                        ga.iter_mut().for_each(|d| *d += g[0] / n)
                    });
                }
                Op::SumRows(a) => {
                    let cols = self.shape(*a).1;
                    acc(&mut grads, *a, &|ga| {
                        for (r, row) in ga.chunks_exact_mut(cols.max(1)).enumerate() {
                            row.iter_mut().for_each(|d| *d += g[r]);
                        }
                    });
                }
                Op::StopGradient => {}
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::gradients`] and adds each bound parameter's adjoint into its
    /// `grad` buffer (`+=`, so callers zero the store between steps).
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = grads.grads[idx].as_deref() {
                    add_into(&mut store.get_mut(id).grad, g);
                }
            }
        }
        Ok(grads)
    }
}

pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    check_finite(m, "softmax")?;
    let mut out = m.clone();
    let c = m.cols();
    for row in out.data_mut().chunks_exact_mut(c.max(1)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = math::exp(*v - max);
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

pub fn log_softmax_rows(m: &Matrix) -> Result<Matrix> {
    check_finite(m, "log_softmax")?;
    let mut out = m.clone();
    let c = m.cols();
    for row in out.data_mut().chunks_exact_mut(c.max(1)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|v| math::exp(v - max)).sum();
        let lse = max + math::ln(total);
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Ok(out)
}
