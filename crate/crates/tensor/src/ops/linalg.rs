use crate::error::{Result, TensorError};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::{debug_check_finite, Tensor};

/// Affine map over the last axis: `[..., D] x [D, E] + [E] -> [..., E]`.
pub fn linear<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let d = *input.shape().last().ok_or(TensorError::Rank { op: "linear", expected: 1, shape: vec![] })?;
    let (wd, e) = match weight.shape() {
        &[a, b] => (a, b),
        s => return Err(TensorError::Rank { op: "linear", expected: 2, shape: s.to_vec() }),
    };
    if wd != d {
        return Err(TensorError::DimMismatch { op: "linear", dim: "input features", expected: wd, actual: d });
    }
    if let Some(b) = bias {
        if b.numel() != e {
            return Err(TensorError::DimMismatch { op: "linear", dim: "bias length", expected: e, actual: b.numel() });
        }
    }
    let rows = input.numel() / d;
    let mut out = vec![T::zero(); rows * e];
    if let Some(b) = bias {
        for row in out.chunks_mut(e) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    gemm(MatRef::new(input.data(), rows, d), MatRef::new(weight.data(), d, e), beta, &mut out);
    debug_check_finite("linear", input.all_finite() && weight.all_finite(), &out);
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = e;
    Ok(Tensor::from_parts(shape, out))
}

/// Batched matrix product `[..., M, K] x [..., K, N] -> [..., M, N]` with
/// identical leading extents.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, k, n) = matmul_dims(a, b)?;
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        gemm(
            MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k),
            MatRef::new(&b.data()[i * k * n..(i + 1) * k * n], k, n),
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn matmul_dims<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || ra != rb || a.shape()[..ra - 2] != b.shape()[..rb - 2] {
        return Err(TensorError::ShapeMismatch { op: "matmul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != k2 {
        return Err(TensorError::DimMismatch { op: "matmul", dim: "inner", expected: k, actual: k2 });
    }
    let batch = a.shape()[..ra - 2].iter().product();
    Ok((batch, m, k, n))
}

/// Gradients of `a x b` for batched operands.
pub(crate) fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
    need: [bool; 2],
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (batch, m, k, n) = matmul_dims(a, b).expect("validated in forward");
    let mut da = need[0].then(|| vec![T::zero(); a.numel()]);
    let mut db = need[1].then(|| vec![T::zero(); b.numel()]);
    for i in 0..batch {
        let g = MatRef::new(&grad.data()[i * m * n..(i + 1) * m * n], m, n);
        if let Some(da) = da.as_mut() {
            let bm = MatRef::new(&b.data()[i * k * n..(i + 1) * k * n], k, n);
            gemm(g, bm.t(), T::zero(), &mut da[i * m * k..(i + 1) * m * k]);
        }
        if let Some(db) = db.as_mut() {
            let am = MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k);
            gemm(am.t(), g, T::zero(), &mut db[i * k * n..(i + 1) * k * n]);
        }
    }
    (
        da.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
        db.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
    )
}

/// Numerically stable softmax over the last axis.
pub fn softmax_lastdim<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let d = input.shape().last().copied().unwrap_or(1);
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(d) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::from_parts(input.shape().to_vec(), out)
}

pub(crate) fn softmax_backward<T: Real>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let d = y.shape().last().copied().unwrap_or(1);
    let mut dx = vec![T::zero(); y.numel()];
    for ((yr, gr), dr) in y.data().chunks(d).zip(grad.data().chunks(d)).zip(dx.chunks_mut(d)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for i in 0..d {
            dr[i] = yr[i] * (gr[i] - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}
