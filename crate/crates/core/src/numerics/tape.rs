//! Computation record with reverse-mode accumulation.
//!
//! Every primitive applied through a [`Tape`] appends one node holding its output
//! value and references to its input slots. Leaves are either borrowed (model
//! parameters) or owned (activations, masks, constants). Reverse accumulation walks
//! the nodes in strict reverse creation order, so gradient sums always happen in the
//! same order and repeated runs agree bit for bit.

use std::borrow::Cow;

use super::kernels;
use super::{NumericsError, Scalar, Tensor};

/// Handle to a value stored in a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot(usize);

impl Slot {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    MatMul(Slot, Slot),
    MatMulNt(Slot, Slot),
    Add(Slot, Slot),
    Mul(Slot, Slot),
    Relu(Slot),
    Gather {
        table: Slot,
        ids: Vec<usize>,
        ids_shape: Vec<usize>,
    },
    RmsNorm {
        x: Slot,
        gain: Slot,
        eps: T,
    },
    Softmax(Slot),
    LogSoftmax(Slot),
    Sum(Slot),
    Scale(Slot, T),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Slot> {
        match self {
            Op::Input => vec![],
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Relu(x) | Op::Softmax(x) | Op::LogSoftmax(x) | Op::Sum(x) | Op::Scale(x, _) => {
                vec![*x]
            }
            Op::Gather { table, .. } => vec![*table],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
        }
    }
}

struct Node<'a, T: Scalar> {
    op: Op<T>,
    value: Cow<'a, Tensor<T>>,
}

/// Ordered log of primitive operations for one forward pass.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a borrowed input (typically a parameter tensor).
    pub fn input_ref(&mut self, value: &'a Tensor<T>) -> Slot {
        self.push(Op::Input, Cow::Borrowed(value))
    }

    /// Registers an owned input.
    pub fn input(&mut self, value: Tensor<T>) -> Slot {
        self.push(Op::Input, Cow::Owned(value))
    }

    fn push(&mut self, op: Op<T>, value: Cow<'a, Tensor<T>>) -> Slot {
        self.nodes.push(Node { op, value });
        Slot(self.nodes.len() - 1)
    }

    fn check(&self, slot: Slot) -> Result<(), NumericsError> {
        if slot.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(NumericsError::UnknownSlot(slot.0))
        }
    }

    pub fn value(&self, slot: Slot) -> Result<&Tensor<T>, NumericsError> {
        self.check(slot)?;
        Ok(&self.nodes[slot.0].value)
    }

    fn val(&self, slot: Slot) -> &Tensor<T> {
        &self.nodes[slot.0].value
    }

    fn record(&mut self, op: Op<T>) -> Result<Slot, NumericsError> {
        for s in op.inputs() {
            self.check(s)?;
        }
        let value = self.evaluate(&op, |s| self.val(s))?;
        Ok(self.push(op, Cow::Owned(value)))
    }

    fn evaluate<'v>(
        &self,
        op: &Op<T>,
        get: impl Fn(Slot) -> &'v Tensor<T>,
    ) -> Result<Tensor<T>, NumericsError>
    where
        T: 'v,
    {
        let out = match op {
            Op::Input => unreachable!("inputs are not evaluated"),
            Op::MatMul(a, b) => kernels::matmul(get(*a), get(*b))?,
            Op::MatMulNt(a, b) => kernels::matmul_nt(get(*a), get(*b))?,
            Op::Add(a, b) => kernels::add(get(*a), get(*b))?,
            Op::Mul(a, b) => kernels::mul(get(*a), get(*b))?,
            Op::Relu(x) => kernels::relu(get(*x)),
            Op::Gather {
                table,
                ids,
                ids_shape,
            } => kernels::gather(get(*table), ids, ids_shape)?,
            Op::RmsNorm { x, gain, eps } => kernels::rms_norm(get(*x), get(*gain), *eps)?,
            Op::Softmax(x) => kernels::softmax(get(*x))?,
            Op::LogSoftmax(x) => kernels::log_softmax(get(*x))?,
            Op::Sum(x) => kernels::sum(get(*x)),
            Op::Scale(x, c) => kernels::scale(get(*x), *c),
        };
        Ok(out)
    }

    pub fn matmul(&mut self, a: Slot, b: Slot) -> Result<Slot, NumericsError> {
        self.record(Op::MatMul(a, b))
    }

    /// `a · bᵀ`; the transposed-operand form of `matmul`.
    pub fn matmul_nt(&mut self, a: Slot, b: Slot) -> Result<Slot, NumericsError> {
        self.record(Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Slot, b: Slot) -> Result<Slot, NumericsError> {
        self.record(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Slot, b: Slot) -> Result<Slot, NumericsError> {
        self.record(Op::Mul(a, b))
    }

    pub fn relu(&mut self, x: Slot) -> Result<Slot, NumericsError> {
        self.record(Op::Relu(x))
    }

    pub fn gather(
        &mut self,
        table: Slot,
        ids: Vec<usize>,
        ids_shape: Vec<usize>,
    ) -> Result<Slot, NumericsError> {
        self.record(Op::Gather {
            table,
            ids,
            ids_shape,
        })
    }

    pub fn rms_norm(&mut self, x: Slot, gain: Slot, eps: T) -> Result<Slot, NumericsError> {
        self.record(Op::RmsNorm { x, gain, eps })
    }

    pub fn softmax(&mut self, x: Slot) -> Result<Slot, NumericsError> {
        self.record(Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Slot) -> Result<Slot, NumericsError> {
        self.record(Op::LogSoftmax(x))
    }

    pub fn sum(&mut self, x: Slot) -> Result<Slot, NumericsError> {
        self.record(Op::Sum(x))
    }

    pub fn scale(&mut self, x: Slot, factor: T) -> Result<Slot, NumericsError> {
        self.record(Op::Scale(x, factor))
    }

    /// Re-executes every recorded operation from the stored inputs and returns the
    /// recomputed value of each slot.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>, NumericsError> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Input => node.value.clone().into_owned(),
                _ => self.evaluate(&node.op, |s| &values[s.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse accumulation from the scalar `loss` into every slot in `targets`.
    ///
    /// Only nodes that lie downstream of some target are differentiated through.
    pub fn backward(&self, loss: Slot, targets: &[Slot]) -> Result<Gradients<T>, NumericsError> {
        self.check(loss)?;
        for &t in targets {
            self.check(t)?;
        }
        let loss_value = self.val(loss);
        if loss_value.len() != 1 {
            return Err(NumericsError::NotScalar(loss_value.shape().to_vec()));
        }

        let n = loss.0 + 1;
        let mut relevant = vec![false; self.nodes.len()];
        for &t in targets {
            relevant[t.0] = true;
        }
        for i in 0..n {
            if !relevant[i] && self.nodes[i].op.inputs().iter().any(|s| relevant[s.0]) {
                relevant[i] = true;
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));
        for i in (0..n).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &upstream, &relevant, &mut grads)?;
            grads[i] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    /// `∂loss/∂target`, zero when the target does not influence the loss.
    pub fn grad_wrt(&self, loss: Slot, target: Slot) -> Result<Tensor<T>, NumericsError> {
        let grads = self.backward(loss, &[target])?;
        Ok(grads
            .get(target)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.val(target).shape())))
    }

    fn propagate(
        &self,
        i: usize,
        dy: &Tensor<T>,
        relevant: &[bool],
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), NumericsError> {
        let node = &self.nodes[i];
        let want = |s: &Slot| relevant[s.0];
        match &node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                if want(a) {
                    let da = kernels::matmul_nt(dy, self.val(*b))?;
                    accumulate(grads, *a, da, self.val(*a).shape())?;
                }
                if want(b) {
                    let buf = grad_buffer(grads, *b, self.val(*b).shape());
                    kernels::matmul_tn_into(self.val(*a), dy, buf)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if want(a) {
                    let da = kernels::matmul(dy, self.val(*b))?;
                    accumulate(grads, *a, da, self.val(*a).shape())?;
                }
                if want(b) {
                    let buf = grad_buffer(grads, *b, self.val(*b).shape());
                    kernels::matmul_tn_into(dy, self.val(*a), buf)?;
                }
            }
            Op::Add(a, b) => {
                if want(a) {
                    accumulate(grads, *a, dy.clone(), dy.shape())?;
                }
                if want(b) {
                    accumulate(grads, *b, dy.clone(), dy.shape())?;
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    let da = kernels::mul(dy, self.val(*b))?;
                    accumulate(grads, *a, da, dy.shape())?;
                }
                if want(b) {
                    let db = kernels::mul(dy, self.val(*a))?;
                    accumulate(grads, *b, db, dy.shape())?;
                }
            }
            Op::Relu(x) => {
                if want(x) {
                    let xv = self.val(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?, xv.shape())?;
                }
            }
            Op::Gather { table, ids, .. } => {
                if want(table) {
                    let tv = self.val(*table);
                    let width = tv.len() / tv.shape()[0];
                    let dt = grad_buffer(grads, *table, tv.shape());
                    for (k, &id) in ids.iter().enumerate() {
                        let src = &dy.data()[k * width..(k + 1) * width];
                        for (d, &g) in dt[id * width..(id + 1) * width].iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, eps } => {
                let xv = self.val(*x);
                let gv = self.val(*gain).data();
                let d = xv.cols();
                let dn = T::lit(d as f64);
                let mut dx = Vec::with_capacity(if want(x) { xv.len() } else { 0 });
                let mut dg = vec![T::zero(); d];
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let g_row = dy.row(r);
                    let inv = kernels::inv_rms(row, *eps);
                    if want(gain) {
                        for k in 0..d {
                            dg[k] += g_row[k] * row[k] * inv;
                        }
                    }
                    if want(x) {
                        let mut dot = T::zero();
                        for k in 0..d {
                            dot += g_row[k] * gv[k] * row[k];
                        }
                        let coef = inv * inv * inv * dot / dn;
                        for k in 0..d {
                            dx.push(inv * gv[k] * g_row[k] - row[k] * coef);
                        }
                    }
                }
                if want(x) {
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?, xv.shape())?;
                }
                if want(gain) {
                    let shape = self.val(*gain).shape().to_vec();
                    accumulate(grads, *gain, Tensor::new(shape.clone(), dg)?, &shape)?;
                }
            }
            Op::Softmax(x) => {
                if want(x) {
                    let y = &node.value;
                    let mut dx = Vec::with_capacity(y.len());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = dy.row(r);
                        let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                        dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                    }
                    accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?, y.shape())?;
                }
            }
            Op::LogSoftmax(x) => {
                if want(x) {
                    let y = &node.value;
                    let mut dx = Vec::with_capacity(y.len());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = dy.row(r);
                        let total = gr.iter().fold(T::zero(), |acc, &g| acc + g);
                        dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| gv - yv.exp() * total));
                    }
                    accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?, y.shape())?;
                }
            }
            Op::Sum(x) => {
                if want(x) {
                    let shape = self.val(*x).shape().to_vec();
                    accumulate(grads, *x, Tensor::filled(&shape, dy.data()[0]), &shape)?;
                }
            }
            Op::Scale(x, c) => {
                if want(x) {
                    accumulate(grads, *x, kernels::scale(dy, *c), dy.shape())?;
                }
            }
        }
        Ok(())
    }
}

/// Gradient storage for `slot`, created as zeros on first use.
fn grad_buffer<'g, T: Scalar>(
    grads: &'g mut [Option<Tensor<T>>],
    slot: Slot,
    shape: &[usize],
) -> &'g mut [T] {
    grads[slot.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    slot: Slot,
    contribution: Tensor<T>,
    shape: &[usize],
) -> Result<(), NumericsError> {
    // matmul outputs may come back with a flattened leading shape
    let contribution = if contribution.shape() == shape {
        contribution
    } else {
        contribution.reshape(shape.to_vec())?
    };
    match &mut grads[slot.0] {
        Some(existing) => existing.add_assign(&contribution)?,
        empty => *empty = Some(contribution),
    }
    Ok(())
}

/// Result of reverse accumulation: one optional gradient per slot.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, slot: Slot) -> Option<&Tensor<T>> {
        self.grads.get(slot.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, slot: Slot) -> Option<Tensor<T>> {
        self.grads.get_mut(slot.0).and_then(Option::take)
    }
}
