//! Layout operations: permutation, cyclic shift, concatenation, gathers and
//! broadcasting.

use crate::error::{invalid, Result, TensorError};
use crate::real::Real;
use crate::tensor::{strides_of, Tensor};

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Real>(input: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = input.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(invalid("permute", format!("{perm:?} is not a permutation of rank {rank}")));
    }
    let in_strides = strides_of(input.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| input.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = input.data();
    let mut out = Vec::with_capacity(input.numel());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let last = rank.saturating_sub(1);
    loop {
        if rank == 0 {
            out.push(src[0]);
            break;
        }
        // innermost axis as a strided run
        let (n, s) = (out_shape[last], src_strides[last]);
        for i in 0..n {
            out.push(src[off + i * s]);
        }
        // advance the outer axes
        let mut ax = last;
        loop {
            if ax == 0 {
                return Ok(Tensor::from_parts(out_shape, out));
            }
            ax -= 1;
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Cyclic shift: element at index `i` along axis `a` moves to `(i + shift[a]) mod n`.
pub fn roll<T: Real>(input: &Tensor<T>, shifts: &[isize]) -> Result<Tensor<T>> {
    if shifts.len() != input.rank() {
        return Err(invalid("roll", format!("{} shifts for rank {}", shifts.len(), input.rank())));
    }
    let shape = input.shape();
    let strides = strides_of(shape);
    let mut out = vec![T::zero(); input.numel()];
    for (flat, &v) in input.data().iter().enumerate() {
        let mut dst = 0;
        for a in 0..shape.len() {
            let i = (flat / strides[a]) % shape[a];
            let n = shape[a] as isize;
            let j = ((i as isize + shifts[a]) % n + n) % n;
            dst += j as usize * strides[a];
        }
        out[dst] = v;
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<T: Real>(inputs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(invalid("concat", format!("axis {axis} out of range for rank {rank}")));
    }
    for t in inputs {
        if t.rank() != rank
            || t.shape().iter().zip(first.shape()).enumerate().any(|(a, (x, y))| a != axis && x != y)
        {
            return Err(TensorError::ShapeMismatch { op: "concat", lhs: first.shape().to_vec(), rhs: t.shape().to_vec() });
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let run = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * run..(o + 1) * run]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

/// Splits a concatenation gradient back into per-input pieces.
pub(crate) fn split<T: Real>(grad: &Tensor<T>, axis: usize, sizes: &[usize]) -> Vec<Tensor<T>> {
    let outer: usize = grad.shape()[..axis].iter().product();
    let inner: usize = grad.shape()[axis + 1..].iter().product();
    let total: usize = sizes.iter().sum();
    sizes
        .iter()
        .scan(0usize, |start, &sz| {
            let mut data = Vec::with_capacity(outer * sz * inner);
            for o in 0..outer {
                let base = (o * total + *start) * inner;
                data.extend_from_slice(&grad.data()[base..base + sz * inner]);
            }
            *start += sz;
            let mut shape = grad.shape().to_vec();
            shape[axis] = sz;
            Some(Tensor::from_parts(shape, data))
        })
        .collect()
}

/// `out[i] = input.flat[index[i]]`, reshaped to `shape`.
pub fn gather<T: Real>(input: &Tensor<T>, index: &[usize], shape: Vec<usize>) -> Result<Tensor<T>> {
    if index.iter().any(|&i| i >= input.numel()) {
        return Err(invalid("gather", "index out of bounds"));
    }
    let data = index.iter().map(|&i| input.data()[i]).collect();
    Tensor::new(shape, data)
}

/// Elementwise binary operators supporting same-rank broadcasting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Flat source offset in `src_shape` for every element of `out_shape`.
fn broadcast_index(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let src_strides = strides_of(src_shape);
    let out_strides = strides_of(out_shape);
    let n: usize = out_shape.iter().product();
    (0..n)
        .map(|flat| {
            let mut off = 0;
            for a in 0..out_shape.len() {
                if src_shape[a] != 1 {
                    off += ((flat / out_strides[a]) % out_shape[a]) * src_strides[a];
                }
            }
            off
        })
        .collect()
}

pub fn broadcast_to<T: Real>(input: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if input.shape() == shape {
        return input.clone();
    }
    let idx = broadcast_index(input.shape(), shape);
    Tensor::from_parts(shape.to_vec(), idx.iter().map(|&i| input.data()[i]).collect())
}

/// Sums a broadcast result back down to `shape`.
pub fn sum_to<T: Real>(input: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if input.shape() == shape {
        return input.clone();
    }
    let idx = broadcast_index(shape, input.shape());
    let mut out = vec![T::zero(); shape.iter().product()];
    for (&i, &v) in idx.iter().zip(input.data()) {
        out[i] += v;
    }
    Tensor::from_parts(shape.to_vec(), out)
}

pub fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
    let f = |x: T, y: T| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
    };
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| TensorError::ShapeMismatch { op: "broadcast", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() })?;
    let ia = broadcast_index(a.shape(), &shape);
    let ib = broadcast_index(b.shape(), &shape);
    let data = ia.iter().zip(&ib).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect();
    Ok(Tensor::from_parts(shape, data))
}
