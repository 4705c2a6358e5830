//! Dense row-major `f64` tensors with trailing-axis broadcasting.
//!
//! A scalar is a tensor with an empty shape and a single element. Broadcasting
//! aligns trailing axes and stretches extent-1 axes, so `[2, 3] * [3]` and
//! `[2, 3] * []` are both valid elementwise combinations.

use crate::error::{Error, Result};

/// Dense multi-dimensional array of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len() == product(shape)`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![], data: vec![x] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], x: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![x; numel] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::ShapeMismatch(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elementwise binary combination under the broadcasting rule.
    pub fn zip_broadcast(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let out_shape = broadcast_shapes(&self.shape, &other.shape)?;
        if self.shape == other.shape {
            // fast path: identical layouts
            let data = self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor { shape: out_shape, data });
        }
        let ma = BroadcastMap::new(&self.shape, &out_shape);
        let mb = BroadcastMap::new(&other.shape, &out_shape);
        let numel: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            data.push(f(self.data[ma.map(i)], other.data[mb.map(i)]));
        }
        Ok(Tensor { shape: out_shape, data })
    }

    /// Sums this tensor down to `target`, undoing a broadcast (leading axes
    /// collapse, stretched extent-1 axes reduce).
    pub fn reduce_to_shape(&self, target: &[usize]) -> Result<Tensor> {
        if self.shape == target {
            return Ok(self.clone());
        }
        // target must be broadcastable to self.shape
        let check = broadcast_shapes(target, &self.shape)?;
        if check != self.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} does not reduce to {:?}",
                self.shape, target
            )));
        }
        let map = BroadcastMap::new(target, &self.shape);
        let mut out = Tensor::zeros(target);
        for (i, &x) in self.data.iter().enumerate() {
            out.data[map.map(i)] += x;
        }
        Ok(out)
    }

    /// Sum over the given axes, dropping them from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor> {
        let reduced = reduced_shape(&self.shape, axes)?;
        let map = ReduceMap::new(&self.shape, axes);
        let mut out = Tensor::zeros(&reduced);
        for (i, &x) in self.data.iter().enumerate() {
            out.data[map.map(i)] += x;
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Row `i` of a tensor whose leading axis indexes rows.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        if self.shape.is_empty() {
            return Err(Error::ShapeMismatch("row() on a scalar".into()));
        }
        let rows = self.shape[0];
        if i >= rows {
            return Err(Error::IndexOutOfRange(format!("row {} of {}", i, rows)));
        }
        let rest: Vec<usize> = self.shape[1..].to_vec();
        let stride: usize = rest.iter().product();
        let data = self.data[i * stride..(i + 1) * stride].to_vec();
        Ok(Tensor { shape: rest, data })
    }

    /// Overwrites row `i` with `value` (shape must equal the row shape).
    pub fn set_row(&mut self, i: usize, value: &Tensor) -> Result<()> {
        if self.shape.is_empty() {
            return Err(Error::ShapeMismatch("set_row() on a scalar".into()));
        }
        let rows = self.shape[0];
        if i >= rows {
            return Err(Error::IndexOutOfRange(format!("row {} of {}", i, rows)));
        }
        let rest = &self.shape[1..];
        if value.shape() != rest {
            return Err(Error::ShapeMismatch(format!(
                "row shape {:?}, got {:?}",
                rest,
                value.shape()
            )));
        }
        let stride: usize = rest.iter().product();
        self.data[i * stride..(i + 1) * stride].copy_from_slice(&value.data);
        Ok(())
    }
}

/// Shape of the broadcast combination of `a` and `b` (trailing-axis
/// alignment, extent-1 stretching).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::ShapeMismatch(format!(
                "cannot broadcast {:?} with {:?}",
                a, b
            )));
        };
    }
    Ok(out)
}

pub(crate) fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps flat indices of a broadcast output back to flat indices of an input.
pub(crate) struct BroadcastMap {
    out_shape: Vec<usize>,
    out_strides: Vec<usize>,
    // stride per output axis into the input; 0 where the input is stretched
    in_strides: Vec<usize>,
}

impl BroadcastMap {
    pub fn new(in_shape: &[usize], out_shape: &[usize]) -> Self {
        let rank = out_shape.len();
        let offset = rank - in_shape.len();
        let in_strides_nat = strides_for(in_shape);
        let mut in_strides = vec![0usize; rank];
        for i in 0..rank {
            if i >= offset {
                let j = i - offset;
                in_strides[i] = if in_shape[j] == 1 { 0 } else { in_strides_nat[j] };
            }
        }
        BroadcastMap {
            out_shape: out_shape.to_vec(),
            out_strides: strides_for(out_shape),
            in_strides,
        }
    }

    #[inline]
    pub fn map(&self, flat: usize) -> usize {
        let mut idx = 0usize;
        for i in 0..self.out_shape.len() {
            let coord = flat / self.out_strides[i] % self.out_shape[i];
            idx += coord * self.in_strides[i];
        }
        idx
    }
}

/// Maps flat indices of an input to flat indices of its reduction (given
/// axes dropped).
pub(crate) struct ReduceMap {
    in_shape: Vec<usize>,
    in_strides: Vec<usize>,
    // stride per input axis into the output; 0 on reduced axes
    out_strides: Vec<usize>,
}

impl ReduceMap {
    pub fn new(in_shape: &[usize], axes: &[usize]) -> Self {
        let reduced: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let reduced_strides = strides_for(&reduced);
        let mut out_strides = vec![0usize; in_shape.len()];
        let mut k = 0;
        for i in 0..in_shape.len() {
            if !axes.contains(&i) {
                out_strides[i] = reduced_strides[k];
                k += 1;
            }
        }
        ReduceMap {
            in_shape: in_shape.to_vec(),
            in_strides: strides_for(in_shape),
            out_strides,
        }
    }

    #[inline]
    pub fn map(&self, flat: usize) -> usize {
        let mut idx = 0usize;
        for i in 0..self.in_shape.len() {
            let coord = flat / self.in_strides[i] % self.in_shape[i];
            idx += coord * self.out_strides[i];
        }
        idx
    }
}

pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "axis {} out of range for shape {:?}",
                a, shape
            )));
        }
    }
    let mut seen = vec![false; shape.len()];
    for &a in axes {
        if seen[a] {
            return Err(Error::ShapeMismatch(format!("duplicate axis {}", a)));
        }
        seen[a] = true;
    }
    Ok(shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect())
}

/// 2-D (or promoted 1-D) matrix product following `matmul` semantics.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (a2, a_was_vec) = promote_lhs(a)?;
    let (b2, b_was_vec) = promote_rhs(b)?;
    let (m, k) = (a2.shape[0], a2.shape[1]);
    let (k2, n) = (b2.shape[0], b2.shape[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dimensions: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a2.data[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b2.data[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    let shape = match (a_was_vec, b_was_vec) {
        (false, false) => vec![m, n],
        (false, true) => vec![m],
        (true, false) => vec![n],
        (true, true) => vec![],
    };
    Ok(Tensor { shape, data: out })
}

fn promote_lhs(a: &Tensor) -> Result<(Tensor, bool)> {
    match a.rank() {
        2 => Ok((a.clone(), false)),
        1 => Ok((a.reshaped(&[1, a.len()])?, true)),
        r => Err(Error::ShapeMismatch(format!("matmul lhs rank {} unsupported", r))),
    }
}

fn promote_rhs(b: &Tensor) -> Result<(Tensor, bool)> {
    match b.rank() {
        2 => Ok((b.clone(), false)),
        1 => Ok((b.reshaped(&[b.len(), 1])?, true)),
        r => Err(Error::ShapeMismatch(format!("matmul rhs rank {} unsupported", r))),
    }
}

/// Transpose of a 2-D tensor.
pub fn transpose2(t: &Tensor) -> Result<Tensor> {
    if t.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "transpose of rank-{} tensor",
            t.rank()
        )));
    }
    let (r, c) = (t.shape[0], t.shape[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data[i * c + j];
        }
    }
    Ok(Tensor { shape: vec![c, r], data })
}
