//! Define-by-run tape: forward evaluation is eager, each operation is
//! recorded, and `backward` replays the record in reverse to accumulate
//! gradients.
//!
//! The tape is rebuilt for every inference step. That is what makes
//! stochastic control flow work: host-language `if`/`while` on already
//! evaluated values simply records whichever branch ran. Mutable state lives
//! only in [`ParamStore`]; tapes themselves are throwaway.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_shapes, matmul, reduced_shape, transpose2, BroadcastMap, ReduceMap, Tensor,
};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Value {
    tape: u64,
    index: usize,
}

/// Handle to a named tensor in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Param(pub(crate) usize);

#[derive(Clone)]
struct Slot {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// The only mutable state in the system: named tensors updated between tapes.
#[derive(Clone, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    names: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Names are unique per store.
    pub fn create(&mut self, name: &str, value: Tensor) -> Result<Param> {
        self.create_with(name, value, true)
    }

    pub fn create_with(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<Param> {
        if self.names.contains_key(name) {
            return Err(Error::DuplicateName(format!("parameter {:?}", name)));
        }
        let id = self.slots.len();
        self.slots.push(Slot { name: name.to_string(), value, trainable });
        self.names.insert(name.to_string(), id);
        Ok(Param(id))
    }

    pub fn get(&self, p: Param) -> &Tensor {
        &self.slots[p.0].value
    }

    /// Assigns a new tensor; the shape is fixed at creation.
    pub fn set(&mut self, p: Param, value: Tensor) -> Result<()> {
        let slot = &mut self.slots[p.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {:?} has shape {:?}, assigned {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn name(&self, p: Param) -> &str {
        &self.slots[p.0].name
    }

    pub fn trainable(&self, p: Param) -> bool {
        self.slots[p.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<Param> {
        self.names.get(name).copied().map(Param)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total stored elements across all parameters.
    pub fn total_elements(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Sigmoid,
    Softplus,
    Lgamma,
    PowConst(f64),
    MaxConst(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum NodeOp {
    Const,
    Param { param: Param, trainable: bool },
    Unary { kind: Unary, a: usize },
    Binary { kind: Binary, a: usize, b: usize },
    Matmul { a: usize, b: usize },
    Sum { a: usize, axes: Vec<usize> },
    Mean { a: usize, axes: Vec<usize> },
    LogSumExp { a: usize, axis: usize },
    Gather { a: usize, index: usize },
    Reshape { a: usize },
    BroadcastTo { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
}

struct Node {
    op: NodeOp,
    out: Tensor,
}

/// One recorded forward execution.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// max(x, 0) + log1p(exp(-|x|)): overflow-safe for large |x|
pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// FNV-1a hash over every cached output's bits; two tapes recording the
    /// same computation on the same inputs hash identically.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            for &x in node.out.data() {
                h ^= x.to_bits();
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        }
        h
    }

    fn push(&mut self, op: NodeOp, out: Tensor) -> Value {
        let index = self.nodes.len();
        self.nodes.push(Node { op, out });
        Value { tape: self.id, index }
    }

    fn check(&self, v: Value) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::TapeMismatch);
        }
        Ok(v.index)
    }

    /// Cached output of a node. Panics if `v` belongs to another tape.
    pub fn value(&self, v: Value) -> &Tensor {
        assert_eq!(v.tape, self.id, "value from a different tape");
        &self.nodes[v.index].out
    }

    pub fn shape_of(&self, v: Value) -> &[usize] {
        self.value(v).shape()
    }

    // ---- leaves ------------------------------------------------------

    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(NodeOp::Const, t)
    }

    pub fn scalar(&mut self, x: f64) -> Value {
        self.constant(Tensor::scalar(x))
    }

    /// Reads the parameter's current tensor onto the tape; gradients flow to
    /// the parameter if it is trainable.
    pub fn param(&mut self, store: &ParamStore, p: Param) -> Value {
        let t = store.get(p).clone();
        let trainable = store.trainable(p);
        self.push(NodeOp::Param { param: p, trainable }, t)
    }

    /// Reads the parameter as a plain constant: no gradient is recorded.
    pub fn param_detached(&mut self, store: &ParamStore, p: Param) -> Value {
        self.constant(store.get(p).clone())
    }

    // ---- elementwise binary ------------------------------------------

    fn binary(&mut self, kind: Binary, a: Value, b: Value) -> Result<Value> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let out = self.nodes[ia].out.zip_broadcast(&self.nodes[ib].out, f)?;
        Ok(self.push(NodeOp::Binary { kind, a: ia, b: ib }, out))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(Binary::Div, a, b)
    }

    pub fn add_c(&mut self, a: Value, c: f64) -> Result<Value> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    pub fn sub_c(&mut self, a: Value, c: f64) -> Result<Value> {
        let s = self.scalar(c);
        self.sub(a, s)
    }

    pub fn mul_c(&mut self, a: Value, c: f64) -> Result<Value> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    // ---- elementwise unary -------------------------------------------

    fn unary(&mut self, kind: Unary, a: Value) -> Result<Value> {
        let ia = self.check(a)?;
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            Unary::Neg => Box::new(|x| -x),
            Unary::Exp => Box::new(f64::exp),
            Unary::Log => Box::new(f64::ln),
            Unary::Sqrt => Box::new(f64::sqrt),
            Unary::Tanh => Box::new(f64::tanh),
            Unary::Sigmoid => Box::new(sigmoid_scalar),
            Unary::Softplus => Box::new(softplus_scalar),
            Unary::Lgamma => Box::new(statrs::function::gamma::ln_gamma),
            Unary::PowConst(c) => Box::new(move |x| x.powf(c)),
            Unary::MaxConst(c) => Box::new(move |x| x.max(c)),
        };
        let out = self.nodes[ia].out.map(&*f);
        Ok(self.push(NodeOp::Unary { kind, a: ia }, out))
    }

    pub fn neg(&mut self, a: Value) -> Result<Value> {
        self.unary(Unary::Neg, a)
    }

    pub fn exp(&mut self, a: Value) -> Result<Value> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Value) -> Result<Value> {
        self.unary(Unary::Log, a)
    }

    pub fn sqrt(&mut self, a: Value) -> Result<Value> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn tanh(&mut self, a: Value) -> Result<Value> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Value) -> Result<Value> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Value) -> Result<Value> {
        self.unary(Unary::Softplus, a)
    }

    pub fn lgamma(&mut self, a: Value) -> Result<Value> {
        self.unary(Unary::Lgamma, a)
    }

    /// Elementwise `x^c` for a fixed exponent.
    pub fn powc(&mut self, a: Value, c: f64) -> Result<Value> {
        self.unary(Unary::PowConst(c), a)
    }

    /// Elementwise `max(x, c)` for a fixed threshold.
    pub fn maxc(&mut self, a: Value, c: f64) -> Result<Value> {
        self.unary(Unary::MaxConst(c), a)
    }

    // ---- structural ops ----------------------------------------------

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        let out = matmul(&self.nodes[ia].out, &self.nodes[ib].out)?;
        Ok(self.push(NodeOp::Matmul { a: ia, b: ib }, out))
    }

    /// Sum over `axes`, dropping them from the shape.
    pub fn sum(&mut self, a: Value, axes: &[usize]) -> Result<Value> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].out.sum_axes(axes)?;
        Ok(self.push(NodeOp::Sum { a: ia, axes: axes.to_vec() }, out))
    }

    /// Sum over every axis, yielding a scalar.
    pub fn sum_all(&mut self, a: Value) -> Result<Value> {
        let rank = self.value(a).rank();
        let axes: Vec<usize> = (0..rank).collect();
        self.sum(a, &axes)
    }

    pub fn mean(&mut self, a: Value, axes: &[usize]) -> Result<Value> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].out;
        let count: usize = axes
            .iter()
            .map(|&ax| t.shape().get(ax).copied().unwrap_or(0))
            .product();
        if count == 0 {
            return Err(Error::ShapeMismatch(format!(
                "mean over axes {:?} of shape {:?}",
                axes,
                t.shape()
            )));
        }
        let out = t.sum_axes(axes)?.map(|x| x / count as f64);
        Ok(self.push(NodeOp::Mean { a: ia, axes: axes.to_vec() }, out))
    }

    pub fn mean_all(&mut self, a: Value) -> Result<Value> {
        let rank = self.value(a).rank();
        let axes: Vec<usize> = (0..rank).collect();
        self.mean(a, &axes)
    }

    /// Overflow-safe `log(sum(exp(x)))` along one axis (axis is dropped).
    pub fn logsumexp(&mut self, a: Value, axis: usize) -> Result<Value> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].out;
        let out_shape = reduced_shape(t.shape(), &[axis])?;
        let map = ReduceMap::new(t.shape(), &[axis]);
        let numel: usize = out_shape.iter().product();
        let mut maxes = vec![f64::NEG_INFINITY; numel];
        for (i, &x) in t.data().iter().enumerate() {
            let j = map.map(i);
            if x > maxes[j] {
                maxes[j] = x;
            }
        }
        let mut sums = vec![0.0f64; numel];
        for (i, &x) in t.data().iter().enumerate() {
            let j = map.map(i);
            if maxes[j].is_finite() {
                sums[j] += (x - maxes[j]).exp();
            }
        }
        let data: Vec<f64> = maxes
            .iter()
            .zip(sums.iter())
            .map(|(&m, &s)| if m.is_finite() { m + s.ln() } else { m })
            .collect();
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(NodeOp::LogSumExp { a: ia, axis }, out))
    }

    /// Selects rows of `a` (leading axis) by a 1-D integer index tensor.
    pub fn gather(&mut self, a: Value, index: Value) -> Result<Value> {
        let ia = self.check(a)?;
        let ii = self.check(index)?;
        let t = &self.nodes[ia].out;
        let idx = &self.nodes[ii].out;
        if t.rank() == 0 {
            return Err(Error::ShapeMismatch("gather from a scalar".into()));
        }
        if idx.rank() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "gather index must be 1-D, got {:?}",
                idx.shape()
            )));
        }
        let rows = t.shape()[0];
        let rest: Vec<usize> = t.shape()[1..].to_vec();
        let stride: usize = rest.iter().product();
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &raw in idx.data() {
            let r = int_index(raw, rows)?;
            data.extend_from_slice(&t.data()[r * stride..(r + 1) * stride]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&rest);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(NodeOp::Gather { a: ia, index: ii }, out))
    }

    pub fn reshape(&mut self, a: Value, shape: &[usize]) -> Result<Value> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].out.reshaped(shape)?;
        Ok(self.push(NodeOp::Reshape { a: ia }, out))
    }

    /// Materializes `a` at a broadcast-compatible target shape.
    pub fn broadcast_to(&mut self, a: Value, shape: &[usize]) -> Result<Value> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].out;
        let combined = broadcast_shapes(t.shape(), shape)?;
        if combined != shape {
            return Err(Error::ShapeMismatch(format!(
                "cannot broadcast {:?} to {:?}",
                t.shape(),
                shape
            )));
        }
        let map = BroadcastMap::new(t.shape(), shape);
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            data.push(t.data()[map.map(i)]);
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(NodeOp::BroadcastTo { a: ia }, out))
    }

    pub fn concat(&mut self, parts: &[Value], axis: usize) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat of zero tensors".into()));
        }
        let idxs: Vec<usize> = parts.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let first = self.nodes[idxs[0]].out.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::ShapeMismatch(format!(
                "concat axis {} out of range for shape {:?}",
                axis, first
            )));
        }
        let mut axis_total = 0usize;
        for &i in &idxs {
            let s = self.nodes[i].out.shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(k, &d)| k != axis && d != first[k])
            {
                return Err(Error::ShapeMismatch(format!(
                    "concat of {:?} with {:?} along axis {}",
                    first, s, axis
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        // copy block-wise: outer = product of axes before `axis`
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        let mut offset = 0usize;
        for &i in &idxs {
            let t = &self.nodes[i].out;
            let extent = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * extent * inner..(o + 1) * extent * inner];
                let dst_start = o * axis_total * inner + offset * inner;
                data[dst_start..dst_start + extent * inner].copy_from_slice(src);
            }
            offset += extent;
        }
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(NodeOp::Concat { parts: idxs, axis }, out))
    }

    // ---- reverse pass -------------------------------------------------

    /// Reverse-mode gradients of a scalar `root` with respect to every node
    /// and every trainable parameter reachable from it. Contributions from
    /// multiple uses accumulate by summation; broadcasts reduce-sum back.
    pub fn backward(&self, root: Value) -> Result<Grads> {
        let ir = self.check(root)?;
        if !self.nodes[ir].out.is_scalar() {
            return Err(Error::ShapeMismatch(format!(
                "backward root must be scalar, got {:?}",
                self.nodes[ir].out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(ir + 1);
        grads.resize_with(ir + 1, || None);
        grads[ir] = Some(Tensor::scalar(1.0));
        for i in (0..=ir).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.nodes[i].op {
                NodeOp::Const | NodeOp::Param { .. } => {}
                NodeOp::Unary { kind, a } => {
                    let x = &self.nodes[*a].out;
                    let y = &self.nodes[i].out;
                    let mut ga = Tensor::zeros(x.shape());
                    let (gd, xd, yd, gad) = (g.data(), x.data(), y.data(), ga.data_mut());
                    match kind {
                        Unary::Neg => {
                            for j in 0..gd.len() {
                                gad[j] = -gd[j];
                            }
                        }
                        Unary::Exp => {
                            for j in 0..gd.len() {
                                gad[j] = gd[j] * yd[j];
                            }
                        }
                        Unary::Log => {
                            for j in 0..gd.len() {
                                gad[j] = gd[j] / xd[j];
                            }
                        }
                        Unary::Sqrt => {
                            for j in 0..gd.len() {
                                gad[j] = gd[j] / (2.0 * yd[j]);
                            }
                        }
                        Unary::Tanh => {
                            for j in 0..gd.len() {
                                gad[j] = gd[j] * (1.0 - yd[j] * yd[j]);
                            }
                        }
                        Unary::Sigmoid => {
                            for j in 0..gd.len() {
                                gad[j] = gd[j] * yd[j] * (1.0 - yd[j]);
                            }
                        }
                        Unary::Softplus => {
                            for j in 0..gd.len() {
                                gad[j] = gd[j] * sigmoid_scalar(xd[j]);
                            }
                        }
                        Unary::Lgamma => {
                            for j in 0..gd.len() {
                                gad[j] = gd[j] * statrs::function::gamma::digamma(xd[j]);
                            }
                        }
                        Unary::PowConst(c) => {
                            for j in 0..gd.len() {
                                gad[j] = gd[j] * c * xd[j].powf(c - 1.0);
                            }
                        }
                        // subgradient 0 at the kink
                        Unary::MaxConst(c) => {
                            for j in 0..gd.len() {
                                gad[j] = if xd[j] > *c { gd[j] } else { 0.0 };
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                NodeOp::Binary { kind, a, b } => {
                    let (ga, gb) =
                        binary_backward(*kind, &self.nodes[*a].out, &self.nodes[*b].out, &g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                NodeOp::Matmul { a, b } => {
                    let (ga, gb) =
                        matmul_backward(&self.nodes[*a].out, &self.nodes[*b].out, &g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                NodeOp::Sum { a, axes } => {
                    let x = &self.nodes[*a].out;
                    let map = ReduceMap::new(x.shape(), axes);
                    let mut ga = Tensor::zeros(x.shape());
                    for j in 0..x.len() {
                        ga.data_mut()[j] = g.data()[map.map(j)];
                    }
                    accumulate(&mut grads, *a, ga);
                }
                NodeOp::Mean { a, axes } => {
                    let x = &self.nodes[*a].out;
                    let count: usize =
                        axes.iter().map(|&ax| x.shape()[ax]).product();
                    let map = ReduceMap::new(x.shape(), axes);
                    let mut ga = Tensor::zeros(x.shape());
                    for j in 0..x.len() {
                        ga.data_mut()[j] = g.data()[map.map(j)] / count as f64;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                NodeOp::LogSumExp { a, axis } => {
                    let x = &self.nodes[*a].out;
                    let y = &self.nodes[i].out;
                    let map = ReduceMap::new(x.shape(), &[*axis]);
                    let mut ga = Tensor::zeros(x.shape());
                    for j in 0..x.len() {
                        let k = map.map(j);
                        let out = y.data()[k];
                        ga.data_mut()[j] = if out.is_finite() {
                            g.data()[k] * (x.data()[j] - out).exp()
                        } else {
                            0.0
                        };
                    }
                    accumulate(&mut grads, *a, ga);
                }
                NodeOp::Gather { a, index } => {
                    let x = &self.nodes[*a].out;
                    let idx = &self.nodes[*index].out;
                    let stride: usize = x.shape()[1..].iter().product();
                    let mut ga = Tensor::zeros(x.shape());
                    for (r, &raw) in idx.data().iter().enumerate() {
                        let row = raw as usize; // validated at forward time
                        for j in 0..stride {
                            ga.data_mut()[row * stride + j] += g.data()[r * stride + j];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                NodeOp::Reshape { a } => {
                    let x = &self.nodes[*a].out;
                    let ga = g.reshaped(x.shape())?;
                    accumulate(&mut grads, *a, ga);
                }
                NodeOp::BroadcastTo { a } => {
                    let x = &self.nodes[*a].out;
                    let ga = g.reduce_to_shape(x.shape())?;
                    accumulate(&mut grads, *a, ga);
                }
                NodeOp::Concat { parts, axis } => {
                    let out_shape = self.nodes[i].out.shape();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[*axis + 1..].iter().product();
                    let axis_total = out_shape[*axis];
                    let mut offset = 0usize;
                    for &p in parts {
                        let shape = self.nodes[p].out.shape().to_vec();
                        let extent = shape[*axis];
                        let mut gp = Tensor::zeros(&shape);
                        for o in 0..outer {
                            let src_start = o * axis_total * inner + offset * inner;
                            gp.data_mut()[o * extent * inner..(o + 1) * extent * inner]
                                .copy_from_slice(
                                    &g.data()[src_start..src_start + extent * inner],
                                );
                        }
                        accumulate(&mut grads, p, gp);
                        offset += extent;
                    }
                }
            }
        }
        let mut params: BTreeMap<Param, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(ir + 1) {
            if let NodeOp::Param { param, trainable: true } = node.op {
                if let Some(g) = &grads[i] {
                    match params.get_mut(&param) {
                        Some(acc) => {
                            for (dst, src) in acc.data_mut().iter_mut().zip(g.data()) {
                                *dst += src;
                            }
                        }
                        None => {
                            params.insert(param, g.clone());
                        }
                    }
                }
            }
        }
        Ok(Grads { tape: self.id, node_grads: grads, params })
    }
}

fn int_index(raw: f64, bound: usize) -> Result<usize> {
    let rounded = raw.round();
    if (raw - rounded).abs() > 1e-9 {
        return Err(Error::IndexOutOfRange(format!("non-integer index {}", raw)));
    }
    if rounded < 0.0 || rounded >= bound as f64 {
        return Err(Error::IndexOutOfRange(format!(
            "index {} out of range 0..{}",
            rounded, bound
        )));
    }
    Ok(rounded as usize)
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, t: Tensor) {
    match &mut grads[idx] {
        Some(acc) => {
            for (dst, src) in acc.data_mut().iter_mut().zip(t.data()) {
                *dst += src;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

fn binary_backward(kind: Binary, a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let ma = BroadcastMap::new(a.shape(), g.shape());
    let mb = BroadcastMap::new(b.shape(), g.shape());
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    for (i, &gi) in g.data().iter().enumerate() {
        let ia = ma.map(i);
        let ib = mb.map(i);
        let (da, db) = match kind {
            Binary::Add => (1.0, 1.0),
            Binary::Sub => (1.0, -1.0),
            Binary::Mul => (b.data()[ib], a.data()[ia]),
            Binary::Div => {
                let bv = b.data()[ib];
                (1.0 / bv, -a.data()[ia] / (bv * bv))
            }
        };
        ga.data_mut()[ia] += gi * da;
        gb.data_mut()[ib] += gi * db;
    }
    (ga, gb)
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (a2, b2) = (promote(a, true)?, promote(b, false)?);
    let (m, n) = (a2.shape()[0], b2.shape()[1]);
    let g2 = g.reshaped(&[m, n])?;
    let ga = matmul(&g2, &transpose2(&b2)?)?.reshaped(a.shape())?;
    let gb = matmul(&transpose2(&a2)?, &g2)?.reshaped(b.shape())?;
    Ok((ga, gb))
}

fn promote(t: &Tensor, lhs: bool) -> Result<Tensor> {
    match t.rank() {
        2 => Ok(t.clone()),
        1 if lhs => t.reshaped(&[1, t.len()]),
        1 => t.reshaped(&[t.len(), 1]),
        r => Err(Error::ShapeMismatch(format!("matmul rank {}", r))),
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    tape: u64,
    node_grads: Vec<Option<Tensor>>,
    params: BTreeMap<Param, Tensor>,
}

impl Grads {
    /// Gradient of the root with respect to the node behind `v`.
    pub fn wrt(&self, v: Value) -> Option<&Tensor> {
        if v.tape != self.tape || v.index >= self.node_grads.len() {
            return None;
        }
        self.node_grads[v.index].as_ref()
    }

    /// Gradient accumulated for a trainable parameter (summed across every
    /// occurrence on the tape).
    pub fn param(&self, p: Param) -> Option<&Tensor> {
        self.params.get(&p)
    }

    pub fn params(&self) -> &BTreeMap<Param, Tensor> {
        &self.params
    }
}

/// Result of [`grad_check`]: worst relative error per parameter.
#[derive(Debug)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compares `backward` against central finite differences for every element
/// of the listed parameters. The builder must be deterministic given the
/// store contents; this is probed with two forward evaluations.
pub fn grad_check<F>(
    builder: F,
    store: &mut ParamStore,
    params: &[Param],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Value>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::Config(format!("grad_check step h={} outside (0, 1e-2]", h)));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let root = builder(&mut tape, store)?;
        tape.value(root).item()
    };
    let probe1 = eval(store)?;
    let probe2 = eval(store)?;
    if probe1.to_bits() != probe2.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut tape = Tape::new();
    let root = builder(&mut tape, store)?;
    let grads = tape.backward(root)?;

    let mut per_param = BTreeMap::new();
    let mut max_rel_err = 0.0f64;
    for &p in params {
        let base = store.get(p).clone();
        let analytic = match grads.param(p) {
            Some(t) => t.clone(),
            None => Tensor::zeros(base.shape()),
        };
        let mut worst = 0.0f64;
        for j in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[j] += h;
            store.set(p, plus)?;
            let fp = eval(store)?;
            let mut minus = base.clone();
            minus.data_mut()[j] -= h;
            store.set(p, minus)?;
            let fm = eval(store)?;
            store.set(p, base.clone())?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
        max_rel_err = max_rel_err.max(worst);
        per_param.insert(store.name(p).to_string(), worst);
    }
    Ok(GradCheckReport { per_param, max_rel_err, tol })
}
