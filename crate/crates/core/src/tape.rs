//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as model code executes, so the
//! recorded program *is* the forward pass: control flow needs no special
//! casing and the tape is simply rebuilt on the next pass.
//! [`Tape::backward`] replays the record once in reverse, accumulating
//! vector-Jacobian products into gradient slots for every tensor on the
//! path to a leaf created with `requires_grad = true`.
//!
//! Conventions baked in here and relied on elsewhere:
//!
//! * scalars are rank-1 tensors of length one;
//! * `matmul` promotes rank-1 operands NumPy-style (left becomes a row,
//!   right becomes a column, promoted axes are squeezed from the result);
//! * `add`/`sub`/`mul` broadcast only when one operand is a scalar;
//! * `softmax` subtracts the row maximum before exponentiating;
//! * `relu` takes derivative 0 at the kink;
//! * all accumulation runs in recording order, so identical graphs
//!   produce bitwise-identical values and gradients.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: domain violation: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward called twice on the same tape without reset_grads")]
    BackwardTwice,
    #[error("{op}: variable was recorded on a different tape")]
    ForeignVar { op: &'static str },
    #[error("grad_check step h={h:e} outside [1e-7, 1e-3]")]
    BadStep { h: f64 },
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var {
    tape_id: u64,
    index: usize,
}

enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    ScalarMul { x: usize, c: f64 },
    Relu { x: usize },
    Tanh { x: usize },
    Exp { x: usize },
    Neg { x: usize },
    Log { x: usize },
    Recip { x: usize },
    Sigmoid { x: usize },
    MeanAll { x: usize },
    MeanAxis { x: usize, axis: usize },
    Concat { xs: Vec<usize> },
    SoftmaxLast { x: usize },
    StopGrad,
    SelectMask { x: usize, mask: Vec<f64> },
    StraightThrough { soft: usize },
    BceLogit { logit: usize, label: f64 },
}

struct TapeInner {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// A recording of one forward pass.
pub struct Tape {
    id: u64,
    inner: RefCell<TapeInner>,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(TapeInner {
                ops: Vec::new(),
                values: Vec::new(),
                requires: Vec::new(),
                grads: Vec::new(),
                backward_done: false,
            }),
        }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.inner.borrow().ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input tensor. Gradients accumulate into it only when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Record a non-trainable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Convenience: record a non-trainable scalar.
    pub fn constant_scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Clone out the forward value of a variable.
    pub fn value(&self, v: Var) -> Tensor {
        assert_eq!(v.tape_id, self.id, "value: var from a different tape");
        self.inner.borrow().values[v.index].clone()
    }

    /// Forward value of a scalar variable.
    pub fn value_scalar(&self, v: Var) -> f64 {
        assert_eq!(v.tape_id, self.id, "value_scalar: var from a different tape");
        self.inner.borrow().values[v.index].scalar_value()
    }

    /// Gradient of the last `backward` pass with respect to `v`, if one
    /// was accumulated.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        assert_eq!(v.tape_id, self.id, "grad: var from a different tape");
        let inner = self.inner.borrow();
        inner.grads[v.index].as_ref().map(|g| {
            Tensor::new(inner.values[v.index].shape().to_vec(), g.clone())
                .expect("gradient buffer matches value shape")
        })
    }

    /// Clear accumulated gradients so `backward` may run again.
    pub fn reset_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        for g in inner.grads.iter_mut() {
            *g = None;
        }
        inner.backward_done = false;
    }

    fn push(&self, op: Op, value: Tensor, requires: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let index = inner.ops.len();
        inner.ops.push(op);
        inner.values.push(value);
        inner.requires.push(requires);
        inner.grads.push(None);
        Var {
            tape_id: self.id,
            index,
        }
    }

    fn check(&self, op: &'static str, v: Var) -> Result<usize, TapeError> {
        if v.tape_id != self.id {
            return Err(TapeError::ForeignVar { op });
        }
        Ok(v.index)
    }

    // ---- binary ops ----------------------------------------------------

    /// Matrix product with NumPy-style rank-1 promotion.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (ai, bi) = (self.check("matmul", a)?, self.check("matmul", b)?);
        let (value, requires) = {
            let inner = self.inner.borrow();
            let (va, vb) = (&inner.values[ai], &inner.values[bi]);
            let dims = matmul_dims(va.shape(), vb.shape()).ok_or_else(|| {
                TapeError::ShapeMismatch {
                    op: "matmul",
                    detail: format!("cannot multiply {:?} by {:?}", va.shape(), vb.shape()),
                }
            })?;
            let MatmulDims { m, k, n, out_shape } = dims;
            let mut out = vec![0.0; m * n];
            mm_nn(va.data(), vb.data(), m, k, n, &mut out);
            (
                Tensor::new(out_shape, out).expect("matmul output shape consistent"),
                inner.requires[ai] || inner.requires[bi],
            )
        };
        Ok(self.push(Op::Matmul { a: ai, b: bi }, value, requires))
    }

    /// Elementwise sum; one operand may be a scalar.
    pub fn add(&self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add {
            a: usize::MAX,
            b: usize::MAX,
        })
    }

    /// Elementwise difference; one operand may be a scalar.
    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub {
            a: usize::MAX,
            b: usize::MAX,
        })
    }

    /// Elementwise (Hadamard) product; one operand may be a scalar.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul {
            a: usize::MAX,
            b: usize::MAX,
        })
    }

    fn zip(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        template: Op,
    ) -> Result<Var, TapeError> {
        let (ai, bi) = (self.check(name, a)?, self.check(name, b)?);
        let (value, requires) = {
            let inner = self.inner.borrow();
            let (va, vb) = (&inner.values[ai], &inner.values[bi]);
            let value = if va.shape() == vb.shape() {
                let data = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                Tensor::new(va.shape().to_vec(), data).expect("same-shape zip")
            } else if vb.is_scalar() {
                let s = vb.scalar_value();
                let data = va.data().iter().map(|&x| f(x, s)).collect();
                Tensor::new(va.shape().to_vec(), data).expect("scalar rhs zip")
            } else if va.is_scalar() {
                let s = va.scalar_value();
                let data = vb.data().iter().map(|&y| f(s, y)).collect();
                Tensor::new(vb.shape().to_vec(), data).expect("scalar lhs zip")
            } else {
                return Err(TapeError::ShapeMismatch {
                    op: name,
                    detail: format!(
                        "shapes {:?} and {:?} differ and neither is a scalar",
                        va.shape(),
                        vb.shape()
                    ),
                });
            };
            (value, inner.requires[ai] || inner.requires[bi])
        };
        let op = match template {
            Op::Add { .. } => Op::Add { a: ai, b: bi },
            Op::Sub { .. } => Op::Sub { a: ai, b: bi },
            Op::Mul { .. } => Op::Mul { a: ai, b: bi },
            _ => unreachable!("zip used with a non-binary template"),
        };
        Ok(self.push(op, value, requires))
    }

    /// Multiply every element by a compile-time-known constant.
    pub fn scalar_mul(&self, x: Var, c: f64) -> Result<Var, TapeError> {
        let xi = self.check("scalar_mul", x)?;
        let (value, requires) = {
            let inner = self.inner.borrow();
            let vx = &inner.values[xi];
            let data = vx.data().iter().map(|&v| v * c).collect();
            (
                Tensor::new(vx.shape().to_vec(), data).expect("scalar_mul shape"),
                inner.requires[xi],
            )
        };
        Ok(self.push(Op::ScalarMul { x: xi, c }, value, requires))
    }

    // ---- elementwise unary ops ----------------------------------------

    pub fn relu(&self, x: Var) -> Result<Var, TapeError> {
        self.unary("relu", x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu { x: 0 })
    }

    pub fn tanh(&self, x: Var) -> Result<Var, TapeError> {
        self.unary("tanh", x, f64::tanh, Op::Tanh { x: 0 })
    }

    pub fn exp(&self, x: Var) -> Result<Var, TapeError> {
        self.unary("exp", x, f64::exp, Op::Exp { x: 0 })
    }

    pub fn neg(&self, x: Var) -> Result<Var, TapeError> {
        self.unary("neg", x, |v| -v, Op::Neg { x: 0 })
    }

    /// Natural log; defined on strictly positive inputs only.
    pub fn log(&self, x: Var) -> Result<Var, TapeError> {
        let xi = self.check("log", x)?;
        {
            let inner = self.inner.borrow();
            if let Some(bad) = inner.values[xi].data().iter().find(|v| **v <= 0.0) {
                return Err(TapeError::Domain {
                    op: "log",
                    detail: format!("input element {bad} is not strictly positive"),
                });
            }
        }
        self.unary("log", x, f64::ln, Op::Log { x: 0 })
    }

    /// Elementwise reciprocal; defined on nonzero inputs only.
    pub fn recip(&self, x: Var) -> Result<Var, TapeError> {
        let xi = self.check("recip", x)?;
        {
            let inner = self.inner.borrow();
            if inner.values[xi].data().iter().any(|v| *v == 0.0) {
                return Err(TapeError::Domain {
                    op: "recip",
                    detail: "input contains a zero element".to_string(),
                });
            }
        }
        self.unary("recip", x, |v| 1.0 / v, Op::Recip { x: 0 })
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var, TapeError> {
        self.unary("sigmoid", x, stable_sigmoid, Op::Sigmoid { x: 0 })
    }

    fn unary(
        &self,
        name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        template: Op,
    ) -> Result<Var, TapeError> {
        let xi = self.check(name, x)?;
        let (value, requires) = {
            let inner = self.inner.borrow();
            let vx = &inner.values[xi];
            let data = vx.data().iter().map(|&v| f(v)).collect();
            (
                Tensor::new(vx.shape().to_vec(), data).expect("unary shape"),
                inner.requires[xi],
            )
        };
        let op = match template {
            Op::Relu { .. } => Op::Relu { x: xi },
            Op::Tanh { .. } => Op::Tanh { x: xi },
            Op::Exp { .. } => Op::Exp { x: xi },
            Op::Neg { .. } => Op::Neg { x: xi },
            Op::Log { .. } => Op::Log { x: xi },
            Op::Recip { .. } => Op::Recip { x: xi },
            Op::Sigmoid { .. } => Op::Sigmoid { x: xi },
            _ => unreachable!("unary used with a non-unary template"),
        };
        Ok(self.push(op, value, requires))
    }

    // ---- reductions and reshaping -------------------------------------

    /// Mean over every element; yields a scalar.
    pub fn mean_all(&self, x: Var) -> Result<Var, TapeError> {
        let xi = self.check("mean_all", x)?;
        let (value, requires) = {
            let inner = self.inner.borrow();
            let vx = &inner.values[xi];
            if vx.is_empty() {
                return Err(TapeError::ShapeMismatch {
                    op: "mean_all",
                    detail: "mean of an empty tensor".to_string(),
                });
            }
            let mean = vx.data().iter().sum::<f64>() / vx.len() as f64;
            (Tensor::scalar(mean), inner.requires[xi])
        };
        Ok(self.push(Op::MeanAll { x: xi }, value, requires))
    }

    /// Mean along one axis of a rank-2 tensor.
    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var, TapeError> {
        let xi = self.check("mean_axis", x)?;
        let (value, requires) = {
            let inner = self.inner.borrow();
            let vx = &inner.values[xi];
            let [r, c]: [usize; 2] = match vx.shape() {
                [r, c] => [*r, *c],
                other => {
                    return Err(TapeError::ShapeMismatch {
                        op: "mean_axis",
                        detail: format!("expected rank-2 input, got shape {other:?}"),
                    })
                }
            };
            if axis > 1 {
                return Err(TapeError::ShapeMismatch {
                    op: "mean_axis",
                    detail: format!("axis {axis} out of range for rank-2 input"),
                });
            }
            let data = vx.data();
            let out = if axis == 0 {
                // column means
                let mut out = vec![0.0; c];
                for row in data.chunks_exact(c) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= r as f64);
                out
            } else {
                data.chunks_exact(c)
                    .map(|row| row.iter().sum::<f64>() / c as f64)
                    .collect()
            };
            (Tensor::vector(out), inner.requires[xi])
        };
        Ok(self.push(Op::MeanAxis { x: xi, axis }, value, requires))
    }

    /// Concatenate rank-1 tensors into one rank-1 tensor.
    pub fn concat(&self, parts: &[Var]) -> Result<Var, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::ShapeMismatch {
                op: "concat",
                detail: "no inputs".to_string(),
            });
        }
        let mut xs = Vec::with_capacity(parts.len());
        for p in parts {
            xs.push(self.check("concat", *p)?);
        }
        let (value, requires) = {
            let inner = self.inner.borrow();
            let mut data = Vec::new();
            let mut requires = false;
            for &i in &xs {
                let v = &inner.values[i];
                if v.shape().len() != 1 {
                    return Err(TapeError::ShapeMismatch {
                        op: "concat",
                        detail: format!("expected rank-1 inputs, got shape {:?}", v.shape()),
                    });
                }
                data.extend_from_slice(v.data());
                requires |= inner.requires[i];
            }
            (Tensor::vector(data), requires)
        };
        Ok(self.push(Op::Concat { xs }, value, requires))
    }

    /// Row-wise softmax over the last axis (rank 1 or 2), computed with
    /// the max-subtraction trick.
    pub fn softmax(&self, x: Var) -> Result<Var, TapeError> {
        let xi = self.check("softmax", x)?;
        let (value, requires) = {
            let inner = self.inner.borrow();
            let vx = &inner.values[xi];
            let cols = match vx.shape() {
                [n] => *n,
                [_, c] => *c,
                other => {
                    return Err(TapeError::ShapeMismatch {
                        op: "softmax",
                        detail: format!("expected rank-1 or rank-2 input, got {other:?}"),
                    })
                }
            };
            if cols == 0 {
                return Err(TapeError::ShapeMismatch {
                    op: "softmax",
                    detail: "softmax over an empty axis".to_string(),
                });
            }
            let mut data = vec![0.0; vx.len()];
            for (out_row, in_row) in data.chunks_exact_mut(cols).zip(vx.data().chunks_exact(cols))
            {
                let max = in_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (o, &v) in out_row.iter_mut().zip(in_row) {
                    *o = (v - max).exp();
                    sum += *o;
                }
                out_row.iter_mut().for_each(|o| *o /= sum);
            }
            (
                Tensor::new(vx.shape().to_vec(), data).expect("softmax shape"),
                inner.requires[xi],
            )
        };
        Ok(self.push(Op::SoftmaxLast { x: xi }, value, requires))
    }

    // ---- gradient-shaping ops -----------------------------------------

    /// Identity in value; blocks gradient flow entirely.
    pub fn stopgrad(&self, x: Var) -> Result<Var, TapeError> {
        let xi = self.check("stopgrad", x)?;
        let value = self.inner.borrow().values[xi].clone();
        Ok(self.push(Op::StopGrad, value, false))
    }

    /// Masked sum: `Σ mask[i]·x[i]`, a scalar. The mask is a fixed
    /// constant, so the gradient into `x` is the mask itself.
    pub fn select_mask(&self, x: Var, mask: &[f64]) -> Result<Var, TapeError> {
        let xi = self.check("select_mask", x)?;
        let (value, requires) = {
            let inner = self.inner.borrow();
            let vx = &inner.values[xi];
            if vx.len() != mask.len() {
                return Err(TapeError::ShapeMismatch {
                    op: "select_mask",
                    detail: format!(
                        "mask length {} does not match input of {} elements",
                        mask.len(),
                        vx.len()
                    ),
                });
            }
            let sum = vx.data().iter().zip(mask).map(|(&v, &m)| v * m).sum();
            (Tensor::scalar(sum), inner.requires[xi])
        };
        Ok(self.push(
            Op::SelectMask {
                x: xi,
                mask: mask.to_vec(),
            },
            value,
            requires,
        ))
    }

    /// Straight-through gate: the forward value is exactly `hard`
    /// (0.0 or 1.0); the backward pass hands the upstream gradient to
    /// `soft` with unit weight, as if the node were `soft` itself.
    ///
    /// Equivalent to `stopgrad(hard − soft) + soft`, but written
    /// atomically so the forward value is the hard decision bit for bit
    /// rather than a rounded reconstruction of it.
    pub fn straight_through(&self, hard: bool, soft: Var) -> Result<Var, TapeError> {
        let si = self.check("straight_through", soft)?;
        {
            let inner = self.inner.borrow();
            if !inner.values[si].is_scalar() {
                return Err(TapeError::ShapeMismatch {
                    op: "straight_through",
                    detail: format!(
                        "soft input must be a scalar, got shape {:?}",
                        inner.values[si].shape()
                    ),
                });
            }
        }
        let requires = self.inner.borrow().requires[si];
        Ok(self.push(
            Op::StraightThrough { soft: si },
            Tensor::scalar(if hard { 1.0 } else { 0.0 }),
            requires,
        ))
    }

    /// Binary cross-entropy against a fixed label, taking a logit.
    ///
    /// Computed as `max(z,0) − z·y + ln(1+e^{−|z|})`, which never
    /// overflows; the gradient is `σ(z) − y`.
    pub fn bce_logit(&self, logit: Var, label: f64) -> Result<Var, TapeError> {
        let li = self.check("bce_logit", logit)?;
        {
            let inner = self.inner.borrow();
            if !inner.values[li].is_scalar() {
                return Err(TapeError::ShapeMismatch {
                    op: "bce_logit",
                    detail: format!(
                        "logit must be a scalar, got shape {:?}",
                        inner.values[li].shape()
                    ),
                });
            }
        }
        if !(0.0..=1.0).contains(&label) {
            return Err(TapeError::Domain {
                op: "bce_logit",
                detail: format!("label {label} outside [0, 1]"),
            });
        }
        let z = self.inner.borrow().values[li].scalar_value();
        let value = z.max(0.0) - z * label + (-z.abs()).exp().ln_1p();
        let requires = self.inner.borrow().requires[li];
        Ok(self.push(Op::BceLogit { logit: li, label }, Tensor::scalar(value), requires))
    }

    // ---- backward ------------------------------------------------------

    /// Accumulate `d loss / d v` for every `requires_grad` tensor on the
    /// path to `loss`. `loss` must be a scalar; call [`Tape::reset_grads`]
    /// before running backward a second time.
    pub fn backward(&self, loss: Var) -> Result<(), TapeError> {
        let li = self.check("backward", loss)?;
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            return Err(TapeError::BackwardTwice);
        }
        if !inner.values[li].is_scalar() {
            return Err(TapeError::NonScalarLoss {
                shape: inner.values[li].shape().to_vec(),
            });
        }
        inner.backward_done = true;
        if !inner.requires[li] {
            // Loss does not depend on any trainable leaf; all gradients
            // are identically zero and stay unset.
            return Ok(());
        }
        inner.grads[li] = Some(vec![1.0]);
        for idx in (0..inner.ops.len()).rev() {
            if !inner.requires[idx] {
                continue;
            }
            let Some(go) = inner.grads[idx].take() else {
                continue;
            };
            inner.propagate(idx, &go);
            inner.grads[idx] = Some(go);
        }
        Ok(())
    }
}

impl TapeInner {
    fn grad_slot(&mut self, index: usize) -> &mut Vec<f64> {
        let len = self.values[index].len();
        self.grads[index].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&mut self, idx: usize, go: &[f64]) {
        // Self-index never appears among inputs, so taking `go` out by
        // value in `backward` keeps borrows disjoint here.
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let dims = matmul_dims(self.values[a].shape(), self.values[b].shape())
                    .expect("shapes validated at record time");
                let MatmulDims { m, k, n, .. } = dims;
                if self.requires[a] {
                    let bv = self.values[b].data().to_vec();
                    mm_nt(go, &bv, m, n, k, self.grad_slot(a));
                }
                if self.requires[b] {
                    let av = self.values[a].data().to_vec();
                    mm_tn(&av, go, m, k, n, self.grad_slot(b));
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.spread(a, go, 1.0);
                self.spread(b, go, 1.0);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.spread(a, go, 1.0);
                self.spread(b, go, -1.0);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires[a] {
                    let other = self.broadcast_read(b, go.len());
                    let slot = self.grad_slot(a);
                    if slot.len() == go.len() {
                        for ((s, &g), o) in slot.iter_mut().zip(go).zip(other) {
                            *s += g * o;
                        }
                    } else {
                        // `a` is the scalar side.
                        slot[0] += go.iter().zip(other).map(|(&g, o)| g * o).sum::<f64>();
                    }
                }
                if self.requires[b] {
                    let other = self.broadcast_read(a, go.len());
                    let slot = self.grad_slot(b);
                    if slot.len() == go.len() {
                        for ((s, &g), o) in slot.iter_mut().zip(go).zip(other) {
                            *s += g * o;
                        }
                    } else {
                        slot[0] += go.iter().zip(other).map(|(&g, o)| g * o).sum::<f64>();
                    }
                }
            }
            Op::ScalarMul { x, c } => {
                let (x, c) = (*x, *c);
                if self.requires[x] {
                    let slot = self.grad_slot(x);
                    for (s, &g) in slot.iter_mut().zip(go) {
                        *s += c * g;
                    }
                }
            }
            Op::Relu { x } => {
                let x = *x;
                if self.requires[x] {
                    let xs = self.values[x].data().to_vec();
                    let slot = self.grad_slot(x);
                    for ((s, &g), &v) in slot.iter_mut().zip(go).zip(&xs) {
                        if v > 0.0 {
                            *s += g;
                        }
                    }
                }
            }
            Op::Tanh { x } => {
                let x = *x;
                if self.requires[x] {
                    let ys = self.values[idx].data().to_vec();
                    let slot = self.grad_slot(x);
                    for ((s, &g), &y) in slot.iter_mut().zip(go).zip(&ys) {
                        *s += g * (1.0 - y * y);
                    }
                }
            }
            Op::Exp { x } => {
                let x = *x;
                if self.requires[x] {
                    let ys = self.values[idx].data().to_vec();
                    let slot = self.grad_slot(x);
                    for ((s, &g), &y) in slot.iter_mut().zip(go).zip(&ys) {
                        *s += g * y;
                    }
                }
            }
            Op::Neg { x } => {
                let x = *x;
                self.spread(x, go, -1.0);
            }
            Op::Log { x } => {
                let x = *x;
                if self.requires[x] {
                    let xs = self.values[x].data().to_vec();
                    let slot = self.grad_slot(x);
                    for ((s, &g), &v) in slot.iter_mut().zip(go).zip(&xs) {
                        *s += g / v;
                    }
                }
            }
            Op::Recip { x } => {
                let x = *x;
                if self.requires[x] {
                    let ys = self.values[idx].data().to_vec();
                    let slot = self.grad_slot(x);
                    for ((s, &g), &y) in slot.iter_mut().zip(go).zip(&ys) {
                        *s -= g * y * y;
                    }
                }
            }
            Op::Sigmoid { x } => {
                let x = *x;
                if self.requires[x] {
                    let ys = self.values[idx].data().to_vec();
                    let slot = self.grad_slot(x);
                    for ((s, &g), &y) in slot.iter_mut().zip(go).zip(&ys) {
                        *s += g * y * (1.0 - y);
                    }
                }
            }
            Op::MeanAll { x } => {
                let x = *x;
                if self.requires[x] {
                    let n = self.values[x].len() as f64;
                    let g = go[0] / n;
                    let slot = self.grad_slot(x);
                    for s in slot.iter_mut() {
                        *s += g;
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let (x, axis) = (*x, *axis);
                if self.requires[x] {
                    let [r, c] = match self.values[x].shape() {
                        [r, c] => [*r, *c],
                        _ => unreachable!("validated at record time"),
                    };
                    let slot = self.grad_slot(x);
                    if axis == 0 {
                        let inv = 1.0 / r as f64;
                        for row in slot.chunks_exact_mut(c) {
                            for (s, &g) in row.iter_mut().zip(go) {
                                *s += g * inv;
                            }
                        }
                    } else {
                        let inv = 1.0 / c as f64;
                        for (row, &g) in slot.chunks_exact_mut(c).zip(go) {
                            for s in row.iter_mut() {
                                *s += g * inv;
                            }
                        }
                    }
                }
            }
            Op::Concat { xs } => {
                let xs = xs.clone();
                let mut offset = 0;
                for x in xs {
                    let len = self.values[x].len();
                    if self.requires[x] {
                        let piece = &go[offset..offset + len];
                        let slot = self.grad_slot(x);
                        for (s, &g) in slot.iter_mut().zip(piece) {
                            *s += g;
                        }
                    }
                    offset += len;
                }
            }
            Op::SoftmaxLast { x } => {
                let x = *x;
                if self.requires[x] {
                    let ys = self.values[idx].data().to_vec();
                    let cols = *self.values[idx].shape().last().expect("non-empty shape");
                    let slot = self.grad_slot(x);
                    for ((srow, grow), yrow) in slot
                        .chunks_exact_mut(cols)
                        .zip(go.chunks_exact(cols))
                        .zip(ys.chunks_exact(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                        for ((s, &g), &y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += y * (g - dot);
                        }
                    }
                }
            }
            Op::StopGrad => {
                unreachable!("stopgrad output never requires grad");
            }
            Op::SelectMask { x, mask } => {
                let x = *x;
                let mask = mask.clone();
                if self.requires[x] {
                    let g = go[0];
                    let slot = self.grad_slot(x);
                    for (s, &m) in slot.iter_mut().zip(&mask) {
                        *s += g * m;
                    }
                }
            }
            Op::StraightThrough { soft } => {
                let soft = *soft;
                if self.requires[soft] {
                    self.grad_slot(soft)[0] += go[0];
                }
            }
            Op::BceLogit { logit, label } => {
                let (logit, label) = (*logit, *label);
                if self.requires[logit] {
                    let z = self.values[logit].scalar_value();
                    self.grad_slot(logit)[0] += go[0] * (stable_sigmoid(z) - label);
                }
            }
        }
    }

    /// Accumulate `scale·go` into the grad of `index`, summing when the
    /// target is the scalar side of a broadcast.
    fn spread(&mut self, index: usize, go: &[f64], scale: f64) {
        if !self.requires[index] {
            return;
        }
        let slot = self.grad_slot(index);
        if slot.len() == go.len() {
            for (s, &g) in slot.iter_mut().zip(go) {
                *s += scale * g;
            }
        } else {
            slot[0] += scale * go.iter().sum::<f64>();
        }
    }

    /// Read a value for the `mul` backward, broadcasting scalars.
    fn broadcast_read(&self, index: usize, len: usize) -> Vec<f64> {
        let v = self.values[index].data();
        if v.len() == len {
            v.to_vec()
        } else {
            vec![v[0]; len]
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct MatmulDims {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Option<MatmulDims> {
    let (m, ka, a_vec) = match a {
        [k] => (1, *k, true),
        [m, k] => (*m, *k, false),
        _ => return None,
    };
    let (kb, n, b_vec) = match b {
        [k] => (*k, 1, true),
        [k, n] => (*k, *n, false),
        _ => return None,
    };
    if ka != kb {
        return None;
    }
    let out_shape = match (a_vec, b_vec) {
        (false, false) => vec![m, n],
        (true, false) => vec![n],
        (false, true) => vec![m],
        (true, true) => vec![1],
    };
    Some(MatmulDims {
        m,
        k: ka,
        n,
        out_shape,
    })
}

/// `out += A·B` for row-major (m,k)·(k,n).
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += A·Bᵀ` for row-major A (m,k), B (n,k); out is (m,n).
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o += arow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<f64>();
        }
    }
}

/// `out += Aᵀ·B` for row-major A (m,k), B (m,n); out is (k,n).
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Compare reverse-mode gradients against central finite differences.
///
/// `f` must build a scalar from its input using tape ops only (no
/// stopgrad on the path, or the comparison is meaningless). Returns the
/// maximum over coordinates of `|g_ad − g_fd| / max(|g_ad|, |g_fd|, 1)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TapeError>
where
    F: Fn(&Tape, Var) -> Result<Var, TapeError>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(TapeError::BadStep { h });
    }
    let analytic = {
        let tape = Tape::new();
        let vx = tape.leaf(x.clone(), true);
        let y = f(&tape, vx)?;
        if !tape.value(y).is_scalar() {
            return Err(TapeError::NonScalarLoss {
                shape: tape.value(y).shape().to_vec(),
            });
        }
        tape.backward(y)?;
        tape.grad(vx)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; x.len()])
    };

    let eval = |probe: &Tensor| -> Result<f64, TapeError> {
        let tape = Tape::new();
        let vx = tape.leaf(probe.clone(), false);
        let y = f(&tape, vx)?;
        Ok(tape.value_scalar(y))
    };

    let mut worst = 0.0_f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
