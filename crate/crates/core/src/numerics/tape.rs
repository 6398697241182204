//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Tape`] is a flat arena of nodes. Each node owns the forward value of
//! one operation plus enough metadata to replay its gradient rule. Recording
//! an operation validates shapes, computes the forward value eagerly, and
//! returns a [`VarId`] handle. [`Tape::backward`] seeds the (scalar) loss
//! with gradient 1 and walks the arena in reverse, accumulating
//! vector-Jacobian products into every node that requires a gradient.
//!
//! A tape belongs to exactly one forward/backward pass: `backward` consumes
//! it, and any further recording (or a second `backward`) is an error. Build
//! a fresh tape per step; leaf tensors are cheap to re-register.
//!
//! Leaves come in two flavors. [`Tape::var`] registers a tensor that should
//! receive a gradient (adapter matrices, gate weights); [`Tape::constant`]
//! registers one that never does (frozen base weights, targets, masks,
//! queue entries). Gradients are simply absent for constants, which is how
//! frozen parameters are kept frozen.

use crate::scalar::{cast, Scalar};

use super::{NumericsError, SeededRng, Tensor2D};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(usize);

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    ScalarMul {
        a: usize,
        c: F,
    },
    SoftmaxRows {
        a: usize,
    },
    /// `mask` holds 0 for dropped entries and `1/(1-p)` for kept ones, so
    /// the same tensor serves the forward scaling and the backward rule.
    Dropout {
        a: usize,
        mask: Tensor2D<F>,
    },
    L2NormalizeRows {
        a: usize,
    },
    Log {
        a: usize,
    },
    Exp {
        a: usize,
    },
    Tanh {
        a: usize,
    },
    GatherRows {
        a: usize,
        indices: Vec<usize>,
    },
    ScatterRows {
        a: usize,
        indices: Vec<usize>,
    },
    MeanAll {
        a: usize,
    },
    SumAll {
        a: usize,
    },
    MeanRows {
        a: usize,
    },
    RowSum {
        a: usize,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    ScaleRows {
        a: usize,
        s: usize,
    },
    DivRows {
        a: usize,
        s: usize,
    },
    LogSumExpRows {
        a: usize,
    },
}

#[derive(Clone, Debug)]
struct Node<F> {
    value: Tensor2D<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`VarId`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor2D<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// The gradient of the loss with respect to `id`, if one was computed.
    ///
    /// Constants and variables the loss does not depend on have no entry.
    pub fn get(&self, id: VarId) -> Option<&Tensor2D<F>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor2D<F>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

/// Arena-style gradient tape. See the module docs for the lifecycle.
#[derive(Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Registers a leaf that should receive a gradient.
    pub fn var(&mut self, value: Tensor2D<F>) -> VarId {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor2D<F>) -> VarId {
        self.push(value, Op::Leaf, false)
    }

    /// The forward value of a recorded node. Valid after `backward` too.
    pub fn value(&self, id: VarId) -> &Tensor2D<F> {
        &self.nodes[id.0].value
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor2D<F>, op: Op<F>, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn check_open(&self) -> Result<(), NumericsError> {
        if self.consumed {
            Err(NumericsError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// `a @ b` for `m x k` and `k x n` operands.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.check_open()?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let out = matmul_nn(va, vb);
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(out, Op::MatMul { a: a.0, b: b.0 }, rg))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.check_open()?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor2D::from_vec(va.rows(), va.cols(), data)?;
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }, rg))
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.check_open()?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "mul",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor2D::from_vec(va.rows(), va.cols(), data)?;
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    /// Multiplies every entry by a fixed scalar.
    pub fn scalar_mul(&mut self, a: VarId, c: F) -> Result<VarId, NumericsError> {
        self.check_open()?;
        let out = self.nodes[a.0].value.map(|x| x * c);
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(out, Op::ScalarMul { a: a.0, c }, rg))
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.check_open()?;
        let va = &self.nodes[a.0].value;
        if va.cols() == 0 {
            return Err(NumericsError::EmptyInput { op: "softmax_rows" });
        }
        let mut out = Tensor2D::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let row = va.row(r);
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            let out_row = out.row_mut(r);
            for (o, &x) in out_row.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in out_row.iter_mut() {
                *o /= sum;
            }
        }
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(out, Op::SoftmaxRows { a: a.0 }, rg))
    }

    /// Inverted dropout. Keeps each entry with probability `1 - p` and
    /// scales survivors by `1/(1 - p)`, so the expected value is unchanged
    /// and evaluation needs no rescaling. With `training == false` or
    /// `p == 0` the input is returned untouched.
    pub fn dropout(
        &mut self,
        a: VarId,
        p: f64,
        rng: &mut SeededRng,
        training: bool,
    ) -> Result<VarId, NumericsError> {
        self.check_open()?;
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::InvalidProbability { p });
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let va = &self.nodes[a.0].value;
        let scale: F = cast(1.0 / (1.0 - p));
        let mask_data: Vec<F> = (0..va.len())
            .map(|_| {
                let u: f64 = rng.uniform();
                if u < p {
                    F::zero()
                } else {
                    scale
                }
            })
            .collect();
        let mask = Tensor2D::from_vec(va.rows(), va.cols(), mask_data)?;
        let data = va
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&x, &m)| x * m)
            .collect();
        let out = Tensor2D::from_vec(va.rows(), va.cols(), data)?;
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(out, Op::Dropout { a: a.0, mask }, rg))
    }

    /// Scales every row to unit L2 norm. Rows with zero norm are an error;
    /// callers filter them out beforehand.
    pub fn l2_normalize_rows(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.check_open()?;
        let va = &self.nodes[a.0].value;
        let mut out = Tensor2D::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let norm = row_norm(va.row(r));
            if norm == F::zero() {
                return Err(NumericsError::ZeroNormRow { row: r });
            }
            for (o, &x) in out.row_mut(r).iter_mut().zip(va.row(r)) {
                *o = x / norm;
            }
        }
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(out, Op::L2NormalizeRows { a: a.0 }, rg))
    }

    /// Elementwise natural logarithm. Inputs must be positive.
    pub fn log(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.check_open()?;
        let out = self.nodes[a.0].value.map(F::ln);
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(out, Op::Log { a: a.0 }, rg))
    }

    /// Elementwise exponential.
    pub fn exp(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.check_open()?;
        let out = self.nodes[a.0].value.map(F::exp);
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(out, Op::Exp { a: a.0 }, rg))
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.check_open()?;
        let out = self.nodes[a.0].value.map(F::tanh);
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(out, Op::Tanh { a: a.0 }, rg))
    }

    /// Copies the listed rows into a new tensor, in list order. Indices may
    /// repeat; the gradient scatter-adds back accordingly.
    pub fn gather_rows(&mut self, a: VarId, indices: &[usize]) -> Result<VarId, NumericsError> {
        self.check_open()?;
        let va = &self.nodes[a.0].value;
        let mut out = Tensor2D::zeros(indices.len(), va.cols());
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= va.rows() {
                return Err(NumericsError::RowOutOfBounds {
                    index: idx,
                    rows: va.rows(),
                });
            }
            out.row_mut(i).copy_from_slice(va.row(idx));
        }
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(
            out,
            Op::GatherRows {
                a: a.0,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Adds row `i` of the input into row `indices[i]` of a fresh
    /// `out_rows x cols` zero tensor. The inverse of [`Tape::gather_rows`].
    pub fn scatter_rows(
        &mut self,
        a: VarId,
        indices: &[usize],
        out_rows: usize,
    ) -> Result<VarId, NumericsError> {
        self.check_open()?;
        let va = &self.nodes[a.0].value;
        if indices.len() != va.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "scatter_rows",
                left: va.shape(),
                right: (indices.len(), va.cols()),
            });
        }
        let mut out = Tensor2D::zeros(out_rows, va.cols());
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= out_rows {
                return Err(NumericsError::RowOutOfBounds {
                    index: idx,
                    rows: out_rows,
                });
            }
            for (o, &x) in out.row_mut(idx).iter_mut().zip(va.row(i)) {
                *o += x;
            }
        }
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(
            out,
            Op::ScatterRows {
                a: a.0,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over all entries, as a 1x1 tensor.
    pub fn mean_all(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.check_open()?;
        let va = &self.nodes[a.0].value;
        if va.is_empty() {
            return Err(NumericsError::EmptyInput { op: "mean_all" });
        }
        let sum: F = va.data().iter().cloned().sum();
        let out = Tensor2D::scalar(sum / cast(va.len() as f64));
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(out, Op::MeanAll { a: a.0 }, rg))
    }

    /// Sum over all entries, as a 1x1 tensor.
    pub fn sum_all(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.check_open()?;
        let va = &self.nodes[a.0].value;
        let sum: F = va.data().iter().cloned().sum();
        let out = Tensor2D::scalar(sum);
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(out, Op::SumAll { a: a.0 }, rg))
    }

    /// Column means: `T x n` reduces to `1 x n`.
    pub fn mean_rows(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.check_open()?;
        let va = &self.nodes[a.0].value;
        if va.rows() == 0 {
            return Err(NumericsError::EmptyInput { op: "mean_rows" });
        }
        let count: F = cast(va.rows() as f64);
        let mut out = Tensor2D::zeros(1, va.cols());
        for r in 0..va.rows() {
            for (o, &x) in out.row_mut(0).iter_mut().zip(va.row(r)) {
                *o += x;
            }
        }
        for o in out.data_mut() {
            *o /= count;
        }
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(out, Op::MeanRows { a: a.0 }, rg))
    }

    /// Row sums: `T x n` reduces to `T x 1`.
    pub fn row_sum(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.check_open()?;
        let va = &self.nodes[a.0].value;
        let mut out = Tensor2D::zeros(va.rows(), 1);
        for r in 0..va.rows() {
            out.set(r, 0, va.row(r).iter().cloned().sum());
        }
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(out, Op::RowSum { a: a.0 }, rg))
    }

    /// Stacks tensors with equal column counts, top to bottom.
    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId, NumericsError> {
        self.check_open()?;
        let first = parts
            .first()
            .ok_or(NumericsError::EmptyInput { op: "concat_rows" })?;
        let cols = self.nodes[first.0].value.cols();
        let mut rows = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.cols() != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    left: (rows, cols),
                    right: v.shape(),
                });
            }
            rows += v.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let out = Tensor2D::from_vec(rows, cols, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs_grad(&ids);
        Ok(self.push(out, Op::ConcatRows { parts: ids }, rg))
    }

    /// Multiplies row `t` of `a` by the scalar `s[t, 0]`.
    pub fn scale_rows(&mut self, a: VarId, s: VarId) -> Result<VarId, NumericsError> {
        self.check_open()?;
        let (va, vs) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        if vs.cols() != 1 || vs.rows() != va.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "scale_rows",
                left: va.shape(),
                right: vs.shape(),
            });
        }
        let mut out = Tensor2D::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let w = vs.get(r, 0);
            for (o, &x) in out.row_mut(r).iter_mut().zip(va.row(r)) {
                *o = x * w;
            }
        }
        let rg = self.needs_grad(&[a.0, s.0]);
        Ok(self.push(out, Op::ScaleRows { a: a.0, s: s.0 }, rg))
    }

    /// Divides row `t` of `a` by the scalar `s[t, 0]`.
    pub fn div_rows(&mut self, a: VarId, s: VarId) -> Result<VarId, NumericsError> {
        self.check_open()?;
        let (va, vs) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        if vs.cols() != 1 || vs.rows() != va.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "div_rows",
                left: va.shape(),
                right: vs.shape(),
            });
        }
        let mut out = Tensor2D::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let w = vs.get(r, 0);
            for (o, &x) in out.row_mut(r).iter_mut().zip(va.row(r)) {
                *o = x / w;
            }
        }
        let rg = self.needs_grad(&[a.0, s.0]);
        Ok(self.push(out, Op::DivRows { a: a.0, s: s.0 }, rg))
    }

    /// Row-wise `log(sum(exp(x)))` with max subtraction, `T x n` to `T x 1`.
    pub fn logsumexp_rows(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.check_open()?;
        let va = &self.nodes[a.0].value;
        if va.cols() == 0 {
            return Err(NumericsError::EmptyInput {
                op: "logsumexp_rows",
            });
        }
        let mut out = Tensor2D::zeros(va.rows(), 1);
        for r in 0..va.rows() {
            let row = va.row(r);
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let sum: F = row.iter().map(|&x| (x - max).exp()).sum();
            out.set(r, 0, max + sum.ln());
        }
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(out, Op::LogSumExpRows { a: a.0 }, rg))
    }

    /// Runs reverse accumulation from a scalar loss and returns the
    /// gradient of every node that required one. Consumes the tape: any
    /// later operation, including a second `backward`, fails with
    /// [`NumericsError::TapeConsumed`].
    pub fn backward(&mut self, loss: VarId) -> Result<Gradients<F>, NumericsError> {
        self.check_open()?;
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(NumericsError::NotScalar {
                rows: loss_value.rows(),
                cols: loss_value.cols(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor2D<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor2D::scalar(F::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || grads[i].is_none() {
                continue;
            }
            let g = grads[i].clone().expect("checked above");
            self.apply_vjp(i, &g, &mut grads);
        }

        Ok(Gradients { grads })
    }

    fn apply_vjp(&self, node: usize, g: &Tensor2D<F>, grads: &mut [Option<Tensor2D<F>>]) {
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    accumulate(&mut grads[*a], matmul_nt(g, vb));
                }
                if self.nodes[*b].requires_grad {
                    accumulate(&mut grads[*b], matmul_tn(va, g));
                }
            }
            Op::Add { a, b } => {
                if self.nodes[*a].requires_grad {
                    accumulate(&mut grads[*a], g.clone());
                }
                if self.nodes[*b].requires_grad {
                    accumulate(&mut grads[*b], g.clone());
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    accumulate(&mut grads[*a], hadamard(g, vb));
                }
                if self.nodes[*b].requires_grad {
                    accumulate(&mut grads[*b], hadamard(g, va));
                }
            }
            Op::ScalarMul { a, c } => {
                if self.nodes[*a].requires_grad {
                    accumulate(&mut grads[*a], g.map(|x| x * *c));
                }
            }
            Op::SoftmaxRows { a } => {
                if !self.nodes[*a].requires_grad {
                    return;
                }
                let y = &self.nodes[node].value;
                let mut da = Tensor2D::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let mut dot = F::zero();
                    for (&gy, &yy) in g.row(r).iter().zip(y.row(r)) {
                        dot += gy * yy;
                    }
                    for ((o, &gy), &yy) in da.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yy * (gy - dot);
                    }
                }
                accumulate(&mut grads[*a], da);
            }
            Op::Dropout { a, mask } => {
                if self.nodes[*a].requires_grad {
                    accumulate(&mut grads[*a], hadamard(g, mask));
                }
            }
            Op::L2NormalizeRows { a } => {
                if !self.nodes[*a].requires_grad {
                    return;
                }
                let x = &self.nodes[*a].value;
                let y = &self.nodes[node].value;
                let mut da = Tensor2D::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = row_norm(x.row(r));
                    let mut dot = F::zero();
                    for (&gy, &yy) in g.row(r).iter().zip(y.row(r)) {
                        dot += gy * yy;
                    }
                    for ((o, &gy), &yy) in da.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = (gy - yy * dot) / norm;
                    }
                }
                accumulate(&mut grads[*a], da);
            }
            Op::Log { a } => {
                if self.nodes[*a].requires_grad {
                    let x = &self.nodes[*a].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gy, &xx)| gy / xx)
                        .collect();
                    let da = Tensor2D::from_vec(x.rows(), x.cols(), data)
                        .expect("gradient shape matches input");
                    accumulate(&mut grads[*a], da);
                }
            }
            Op::Exp { a } => {
                if self.nodes[*a].requires_grad {
                    accumulate(&mut grads[*a], hadamard(g, &self.nodes[node].value));
                }
            }
            Op::Tanh { a } => {
                if self.nodes[*a].requires_grad {
                    let y = &self.nodes[node].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gy, &yy)| gy * (F::one() - yy * yy))
                        .collect();
                    let da = Tensor2D::from_vec(y.rows(), y.cols(), data)
                        .expect("gradient shape matches output");
                    accumulate(&mut grads[*a], da);
                }
            }
            Op::GatherRows { a, indices } => {
                if self.nodes[*a].requires_grad {
                    let x = &self.nodes[*a].value;
                    let mut da = Tensor2D::zeros(x.rows(), x.cols());
                    for (i, &idx) in indices.iter().enumerate() {
                        for (o, &gy) in da.row_mut(idx).iter_mut().zip(g.row(i)) {
                            *o += gy;
                        }
                    }
                    accumulate(&mut grads[*a], da);
                }
            }
            Op::ScatterRows { a, indices } => {
                if self.nodes[*a].requires_grad {
                    let x = &self.nodes[*a].value;
                    let mut da = Tensor2D::zeros(x.rows(), x.cols());
                    for (i, &idx) in indices.iter().enumerate() {
                        da.row_mut(i).copy_from_slice(g.row(idx));
                    }
                    accumulate(&mut grads[*a], da);
                }
            }
            Op::MeanAll { a } => {
                if self.nodes[*a].requires_grad {
                    let x = &self.nodes[*a].value;
                    let scale = g.get(0, 0) / cast(x.len() as f64);
                    accumulate(&mut grads[*a], Tensor2D::filled(x.rows(), x.cols(), scale));
                }
            }
            Op::SumAll { a } => {
                if self.nodes[*a].requires_grad {
                    let x = &self.nodes[*a].value;
                    accumulate(
                        &mut grads[*a],
                        Tensor2D::filled(x.rows(), x.cols(), g.get(0, 0)),
                    );
                }
            }
            Op::MeanRows { a } => {
                if self.nodes[*a].requires_grad {
                    let x = &self.nodes[*a].value;
                    let inv: F = cast(1.0 / x.rows() as f64);
                    let mut da = Tensor2D::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        for (o, &gy) in da.row_mut(r).iter_mut().zip(g.row(0)) {
                            *o = gy * inv;
                        }
                    }
                    accumulate(&mut grads[*a], da);
                }
            }
            Op::RowSum { a } => {
                if self.nodes[*a].requires_grad {
                    let x = &self.nodes[*a].value;
                    let mut da = Tensor2D::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let gy = g.get(r, 0);
                        for o in da.row_mut(r) {
                            *o = gy;
                        }
                    }
                    accumulate(&mut grads[*a], da);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.rows();
                    if self.nodes[p].requires_grad {
                        let cols = self.nodes[p].value.cols();
                        let mut dp = Tensor2D::zeros(rows, cols);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(g.row(offset + r));
                        }
                        accumulate(&mut grads[p], dp);
                    }
                    offset += rows;
                }
            }
            Op::ScaleRows { a, s } => {
                let (va, vs) = (&self.nodes[*a].value, &self.nodes[*s].value);
                if self.nodes[*a].requires_grad {
                    let mut da = Tensor2D::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        let w = vs.get(r, 0);
                        for (o, &gy) in da.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o = gy * w;
                        }
                    }
                    accumulate(&mut grads[*a], da);
                }
                if self.nodes[*s].requires_grad {
                    let mut ds = Tensor2D::zeros(vs.rows(), 1);
                    for r in 0..va.rows() {
                        let mut dot = F::zero();
                        for (&gy, &x) in g.row(r).iter().zip(va.row(r)) {
                            dot += gy * x;
                        }
                        ds.set(r, 0, dot);
                    }
                    accumulate(&mut grads[*s], ds);
                }
            }
            Op::DivRows { a, s } => {
                let (va, vs) = (&self.nodes[*a].value, &self.nodes[*s].value);
                if self.nodes[*a].requires_grad {
                    let mut da = Tensor2D::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        let w = vs.get(r, 0);
                        for (o, &gy) in da.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o = gy / w;
                        }
                    }
                    accumulate(&mut grads[*a], da);
                }
                if self.nodes[*s].requires_grad {
                    let mut ds = Tensor2D::zeros(vs.rows(), 1);
                    for r in 0..va.rows() {
                        let w = vs.get(r, 0);
                        let mut dot = F::zero();
                        for (&gy, &x) in g.row(r).iter().zip(va.row(r)) {
                            dot += gy * x;
                        }
                        ds.set(r, 0, -dot / (w * w));
                    }
                    accumulate(&mut grads[*s], ds);
                }
            }
            Op::LogSumExpRows { a } => {
                if self.nodes[*a].requires_grad {
                    let x = &self.nodes[*a].value;
                    let mut da = Tensor2D::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let row = x.row(r);
                        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
                        let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
                        let gy = g.get(r, 0);
                        for (o, &v) in da.row_mut(r).iter_mut().zip(row) {
                            *o = gy * (v - max).exp() / sum;
                        }
                    }
                    accumulate(&mut grads[*a], da);
                }
            }
        }
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Tensor2D<F>>, delta: Tensor2D<F>) {
    match slot {
        None => *slot = Some(delta),
        Some(acc) => {
            debug_assert_eq!(acc.shape(), delta.shape());
            for (a, &d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
    }
}

fn row_norm<F: Scalar>(row: &[F]) -> F {
    row.iter().map(|&x| x * x).sum::<F>().sqrt()
}

fn hadamard<F: Scalar>(a: &Tensor2D<F>, b: &Tensor2D<F>) -> Tensor2D<F> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor2D::from_vec(a.rows(), a.cols(), data).expect("shapes already equal")
}

/// `a @ b`, accumulating each output entry over `k` in ascending order.
fn matmul_nn<F: Scalar>(a: &Tensor2D<F>, b: &Tensor2D<F>) -> Tensor2D<F> {
    let (m, k) = a.shape();
    let n = b.cols();
    let mut out = Tensor2D::zeros(m, n);
    for i in 0..m {
        for kk in 0..k {
            let aik = a.get(i, kk);
            if aik == F::zero() {
                continue;
            }
            let brow = b.row(kk);
            for (o, &bv) in out.row_mut(i).iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `a @ b^T` without materializing the transpose.
fn matmul_nt<F: Scalar>(a: &Tensor2D<F>, b: &Tensor2D<F>) -> Tensor2D<F> {
    let m = a.rows();
    let n = b.rows();
    debug_assert_eq!(a.cols(), b.cols());
    let mut out = Tensor2D::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(b.row(j)) {
                acc += x * y;
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// `a^T @ b` without materializing the transpose.
fn matmul_tn<F: Scalar>(a: &Tensor2D<F>, b: &Tensor2D<F>) -> Tensor2D<F> {
    let (m, k) = a.shape(); // out is k x n
    let n = b.cols();
    debug_assert_eq!(m, b.rows());
    let mut out = Tensor2D::zeros(k, n);
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (kk, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            for (o, &bv) in out.row_mut(kk).iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor2D<f64> {
        Tensor2D::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_matches_hand_computed_product() {
        let mut tape = Tape::new();
        let a = tape.var(t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.var(t(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_inner_dimension_mismatch() {
        let mut tape = Tape::new();
        let a = tape.var(Tensor2D::<f64>::zeros(2, 3));
        let b = tape.var(Tensor2D::<f64>::zeros(4, 2));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            NumericsError::ShapeMismatch {
                op: "matmul",
                left: (2, 3),
                right: (4, 2),
            }
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = SeededRng::new(0);
        let mut tape = Tape::new();
        let x = tape.var(rng.uniform_tensor::<f64>(6, 5, -4.0, 4.0));
        let y = tape.softmax_rows(x).unwrap();
        for r in 0..6 {
            let sum: f64 = tape.value(y).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor2D::filled(2, 4, 3.5));
        let y = tape.softmax_rows(x).unwrap();
        for &p in tape.value(y).data() {
            assert_eq!(p, 0.25);
        }
    }

    #[test]
    fn softmax_survives_extreme_logits() {
        let mut tape = Tape::new();
        let x = tape.var(t(1, 3, &[1e3, -1e3, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        assert!(tape.value(y).all_finite());
        let sum: f64 = tape.value(y).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let mut rng = SeededRng::new(0);
        let mut tape = Tape::<f64>::new();
        let x = tape.var(Tensor2D::zeros(2, 2));
        for p in [1.0, 1.5, -0.1] {
            let err = tape.dropout(x, p, &mut rng, true).unwrap_err();
            assert_eq!(err, NumericsError::InvalidProbability { p });
        }
    }

    #[test]
    fn dropout_is_identity_when_eval_or_zero() {
        let mut rng = SeededRng::new(0);
        let mut tape = Tape::new();
        let x = tape.var(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(tape.dropout(x, 0.5, &mut rng, false).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.0, &mut rng, true).unwrap(), x);
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut rng = SeededRng::new(9);
        let mut tape = Tape::new();
        let x = tape.var(Tensor2D::filled(20, 20, 1.0));
        let y = tape.dropout(x, 0.5, &mut rng, true).unwrap();
        let mut kept = 0usize;
        for &v in tape.value(y).data() {
            assert!(
                v == 0.0 || v == 2.0,
                "entry {v} is neither dropped nor scaled"
            );
            kept += (v == 2.0) as usize;
        }
        // Loose bounds: 400 Bernoulli(0.5) draws.
        assert!((120..280).contains(&kept), "kept {kept} of 400");
    }

    #[test]
    fn gather_then_scatter_restores_selected_rows() {
        let mut tape = Tape::new();
        let x = tape.var(t(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let g = tape.gather_rows(x, &[2, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[5.0, 6.0, 1.0, 2.0]);
        let s = tape.scatter_rows(g, &[2, 0], 4).unwrap();
        assert_eq!(
            tape.value(s).data(),
            &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0, 0.0, 0.0]
        );
    }

    #[test]
    fn gather_rejects_out_of_bounds() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(Tensor2D::zeros(3, 2));
        let err = tape.gather_rows(x, &[0, 3]).unwrap_err();
        assert_eq!(err, NumericsError::RowOutOfBounds { index: 3, rows: 3 });
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(Tensor2D::zeros(2, 3));
        let err = tape.backward(x).unwrap_err();
        assert_eq!(err, NumericsError::NotScalar { rows: 2, cols: 3 });
    }

    #[test]
    fn second_backward_fails() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor2D::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.backward(y).unwrap_err(), NumericsError::TapeConsumed);
        // Recording after backward is also rejected.
        assert_eq!(tape.mul(x, x).unwrap_err(), NumericsError::TapeConsumed);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor2D::scalar(3.0));
        let c = tape.constant(Tensor2D::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
        assert!(grads.get(c).is_none(), "constant must have no gradient");
    }

    #[test]
    fn gradient_accumulates_across_reuse() {
        // y = x * x, dy/dx = 2x: the same leaf feeds both inputs.
        let mut tape = Tape::new();
        let x = tape.var(Tensor2D::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    /// Central-difference gradient of a scalar function of a flat buffer.
    fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut grad = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            grad[i] = (up - down) / (2.0 * h);
        }
        grad
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-12)
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(21);
        let a0 = rng.uniform_tensor::<f64>(5, 4, -1.0, 1.0);
        let b0 = rng.uniform_tensor::<f64>(4, 3, -1.0, 1.0);
        let w = rng.uniform_tensor::<f64>(5, 3, -1.0, 1.0);

        let eval = |av: &Tensor2D<f64>, bv: &Tensor2D<f64>| -> f64 {
            let mut tape = Tape::new();
            let a = tape.var(av.clone());
            let b = tape.var(bv.clone());
            let wc = tape.constant(w.clone());
            let c = tape.matmul(a, b).unwrap();
            let m = tape.mul(c, wc).unwrap();
            let l = tape.sum_all(m).unwrap();
            tape.value(l).scalar_value().unwrap()
        };

        let mut tape = Tape::new();
        let a = tape.var(a0.clone());
        let b = tape.var(b0.clone());
        let wc = tape.constant(w.clone());
        let c = tape.matmul(a, b).unwrap();
        let m = tape.mul(c, wc).unwrap();
        let l = tape.sum_all(m).unwrap();
        let grads = tape.backward(l).unwrap();

        let fd_a = fd_grad(
            |buf| eval(&Tensor2D::from_vec(5, 4, buf.to_vec()).unwrap(), &b0),
            a0.data(),
            1e-5,
        );
        let fd_b = fd_grad(
            |buf| eval(&a0, &Tensor2D::from_vec(4, 3, buf.to_vec()).unwrap()),
            b0.data(),
            1e-5,
        );
        assert!(rel_err(grads.get(a).unwrap().data(), &fd_a) < 1e-7);
        assert!(rel_err(grads.get(b).unwrap().data(), &fd_b) < 1e-7);
    }

    #[test]
    fn softmax_chain_gradient_matches_finite_differences() {
        // loss = mean(softmax(x @ w)) exercises matmul, softmax, and mean
        // through a two-op chain for both leaf tensors.
        let mut rng = SeededRng::new(33);
        let x0 = rng.uniform_tensor::<f64>(4, 3, -1.0, 1.0);
        let w0 = rng.uniform_tensor::<f64>(3, 5, -1.0, 1.0);
        let probe = rng.uniform_tensor::<f64>(4, 5, -1.0, 1.0);

        let eval = |xv: &Tensor2D<f64>, wv: &Tensor2D<f64>| -> f64 {
            let mut tape = Tape::new();
            let x = tape.var(xv.clone());
            let w = tape.var(wv.clone());
            let pc = tape.constant(probe.clone());
            let z = tape.matmul(x, w).unwrap();
            let p = tape.softmax_rows(z).unwrap();
            let m = tape.mul(p, pc).unwrap();
            let l = tape.mean_all(m).unwrap();
            tape.value(l).scalar_value().unwrap()
        };

        let mut tape = Tape::new();
        let x = tape.var(x0.clone());
        let w = tape.var(w0.clone());
        let pc = tape.constant(probe.clone());
        let z = tape.matmul(x, w).unwrap();
        let p = tape.softmax_rows(z).unwrap();
        let m = tape.mul(p, pc).unwrap();
        let l = tape.mean_all(m).unwrap();
        let grads = tape.backward(l).unwrap();

        let fd_x = fd_grad(
            |buf| eval(&Tensor2D::from_vec(4, 3, buf.to_vec()).unwrap(), &w0),
            x0.data(),
            1e-5,
        );
        let fd_w = fd_grad(
            |buf| eval(&x0, &Tensor2D::from_vec(3, 5, buf.to_vec()).unwrap()),
            w0.data(),
            1e-5,
        );
        assert!(rel_err(grads.get(x).unwrap().data(), &fd_x) < 1e-7);
        assert!(rel_err(grads.get(w).unwrap().data(), &fd_w) < 1e-7);
    }

    #[test]
    fn l2_normalize_rejects_zero_rows() {
        let mut tape = Tape::new();
        let x = tape.var(t(2, 3, &[1.0, 2.0, 2.0, 0.0, 0.0, 0.0]));
        let err = tape.l2_normalize_rows(x).unwrap_err();
        assert_eq!(err, NumericsError::ZeroNormRow { row: 1 });
    }

    #[test]
    fn l2_normalize_produces_unit_rows() {
        let mut rng = SeededRng::new(4);
        let mut tape = Tape::new();
        let x = tape.var(rng.uniform_tensor::<f64>(5, 7, -2.0, 2.0));
        let y = tape.l2_normalize_rows(x).unwrap();
        for r in 0..5 {
            let norm: f64 = tape
                .value(y)
                .row(r)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-12, "row {r} norm {norm}");
        }
    }

    #[test]
    fn concat_rows_stacks_and_splits() {
        let mut tape = Tape::new();
        let a = tape.var(t(1, 2, &[1.0, 2.0]));
        let b = tape.var(t(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), (3, 2));
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        // Gradient splits back to the parts: weight the concat rows
        // differently so the split is observable.
        let w = tape.constant(t(3, 2, &[1.0, 1.0, 10.0, 10.0, 100.0, 100.0]));
        let m = tape.mul(c, w).unwrap();
        let l = tape.sum_all(m).unwrap();
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[10.0, 10.0, 100.0, 100.0]);
    }

    #[test]
    fn f32_tape_runs_the_same_graph() {
        let mut tape = Tape::<f32>::new();
        let x = tape.var(Tensor2D::from_vec(1, 2, vec![0.5f32, -0.5]).unwrap());
        let y = tape.tanh(x).unwrap();
        let l = tape.mean_all(y).unwrap();
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().shape(), (1, 2));
    }
}
