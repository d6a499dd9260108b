//! 2D cross-correlation with stride, per-axis zero padding, dilation and groups.
//!
//! Each group is lowered to a single matrix product over an im2col buffer.

use crate::error::{invalid, Result, TensorError};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::{debug_check_finite, Tensor};

/// Geometry of a 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Square kernel, stride 1, no padding, no dilation, one group.
    pub fn new(kernel_h: usize, kernel_w: usize) -> Self {
        Self { kernel_h, kernel_w, stride: 1, pad_h: 0, pad_w: 0, dilation: 1, groups: 1 }
    }

    pub fn pointwise() -> Self {
        Self::new(1, 1)
    }

    /// Stride-1 convolution whose output keeps the input's spatial size.
    pub fn same(kernel_h: usize, kernel_w: usize, dilation: usize) -> Self {
        Self {
            pad_h: dilation * (kernel_h - 1) / 2,
            pad_w: dilation * (kernel_w - 1) / 2,
            dilation,
            ..Self::new(kernel_h, kernel_w)
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, pad_h: usize, pad_w: usize) -> Self {
        self.pad_h = pad_h;
        self.pad_w = pad_w;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Output extent along one axis, or `None` when the window does not fit.
    pub fn out_dim(input: usize, kernel: usize, pad: usize, stride: usize, dilation: usize) -> Option<usize> {
        let span = dilation * (kernel - 1) + 1;
        let padded = input + 2 * pad;
        if padded < span || stride == 0 {
            return None;
        }
        Some((padded - span) / stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            Self::out_dim(h, self.kernel_h, self.pad_h, self.stride, self.dilation)?,
            Self::out_dim(w, self.kernel_w, self.pad_w, self.stride, self.dilation)?,
        ))
    }

    fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(invalid("conv2d", format!("degenerate spec {self:?}")));
        }
        Ok(())
    }
}

/// Validated dimensions of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.spec.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.spec.groups
    }

    fn k_g(&self) -> usize {
        self.cin_g() * self.spec.kernel_h * self.spec.kernel_w
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn conv_geom<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<ConvGeom> {
    spec.validate()?;
    let (cin, h, w) = input.dims3("conv2d")?;
    let [cout, cin_g, kh, kw] = match weight.shape() {
        &[a, b, c, d] => [a, b, c, d],
        s => return Err(TensorError::Rank { op: "conv2d", expected: 4, shape: s.to_vec() }),
    };
    let groups = spec.groups;
    if cin % groups != 0 {
        return Err(invalid("conv2d", format!("groups {groups} does not divide in_channels {cin}")));
    }
    if cout % groups != 0 {
        return Err(invalid("conv2d", format!("groups {groups} does not divide out_channels {cout}")));
    }
    if cin_g != cin / groups {
        return Err(TensorError::DimMismatch {
            op: "conv2d",
            dim: "in_channels per group",
            expected: cin / groups,
            actual: cin_g,
        });
    }
    if kh != spec.kernel_h {
        return Err(TensorError::DimMismatch { op: "conv2d", dim: "kernel_h", expected: spec.kernel_h, actual: kh });
    }
    if kw != spec.kernel_w {
        return Err(TensorError::DimMismatch { op: "conv2d", dim: "kernel_w", expected: spec.kernel_w, actual: kw });
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                dim: "bias length",
                expected: cout,
                actual: b.numel(),
            });
        }
    }
    let (ho, wo) = spec
        .output_hw(h, w)
        .ok_or_else(|| invalid("conv2d", format!("kernel does not fit input {h}x{w} under {spec:?}")))?;
    Ok(ConvGeom { cin, h, w, cout, ho, wo, spec: *spec })
}

/// Unfolds the channels of group `g` into a `[k_g, p]` row-major buffer.
fn im2col<T: Real>(x: &[T], geo: &ConvGeom, g: usize, col: &mut [T]) {
    let s = &geo.spec;
    let (h, w, ho, wo) = (geo.h as isize, geo.w as isize, geo.ho, geo.wo);
    let p = geo.p();
    let mut row = 0;
    for ci in 0..geo.cin_g() {
        let plane = &x[(g * geo.cin_g() + ci) * geo.h * geo.w..][..geo.h * geo.w];
        for i in 0..s.kernel_h {
            for j in 0..s.kernel_w {
                let dst = &mut col[row * p..(row + 1) * p];
                let dy = (i * s.dilation) as isize - s.pad_h as isize;
                let dx = (j * s.dilation) as isize - s.pad_w as isize;
                for oy in 0..ho {
                    let iy = (oy * s.stride) as isize + dy;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * geo.w..][..geo.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s.stride) as isize + dx;
                        *v = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adds a `[k_g, p]` column buffer back into the input gradient of group `g`.
fn col2im<T: Real>(col: &[T], geo: &ConvGeom, g: usize, dx_buf: &mut [T]) {
    let s = &geo.spec;
    let (h, w, ho, wo) = (geo.h as isize, geo.w as isize, geo.ho, geo.wo);
    let p = geo.p();
    let mut row = 0;
    for ci in 0..geo.cin_g() {
        let plane = &mut dx_buf[(g * geo.cin_g() + ci) * geo.h * geo.w..][..geo.h * geo.w];
        for i in 0..s.kernel_h {
            for j in 0..s.kernel_w {
                let src = &col[row * p..(row + 1) * p];
                let dy = (i * s.dilation) as isize - s.pad_h as isize;
                let dxo = (j * s.dilation) as isize - s.pad_w as isize;
                for oy in 0..ho {
                    let iy = (oy * s.stride) as isize + dy;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * geo.w..][..geo.w];
                    for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * s.stride) as isize + dxo;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation of a `[Cin, H, W]` map with a `[Cout, Cin/groups, kh, kw]` kernel.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let geo = conv_geom(input, weight, bias, spec)?;
    let p = geo.p();
    let (cout_g, k_g) = (geo.cout_g(), geo.k_g());
    let mut out = vec![T::zero(); geo.cout * p];
    let mut col = vec![T::zero(); k_g * p];
    for g in 0..spec.groups {
        im2col(input.data(), &geo, g, &mut col);
        let wg = MatRef::new(&weight.data()[g * cout_g * k_g..(g + 1) * cout_g * k_g], cout_g, k_g);
        gemm(wg, MatRef::new(&col, k_g, p), T::zero(), &mut out[g * cout_g * p..(g + 1) * cout_g * p]);
    }
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(p).enumerate() {
            let bv = b.data()[co];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    debug_check_finite("conv2d", input.all_finite() && weight.all_finite(), &out);
    Ok(Tensor::from_parts(vec![geo.cout, geo.ho, geo.wo], out))
}

/// Gradients of [`conv2d`] given the upstream gradient `grad_out`.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let geo = conv_geom(input, weight, None, spec)?;
    if grad_out.shape() != [geo.cout, geo.ho, geo.wo] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward",
            lhs: vec![geo.cout, geo.ho, geo.wo],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let p = geo.p();
    let (cout_g, k_g) = (geo.cout_g(), geo.k_g());
    let go = grad_out.data();
    let mut dx = need[0].then(|| vec![T::zero(); input.numel()]);
    let mut dw = need[1].then(|| vec![T::zero(); weight.numel()]);
    let mut col = vec![T::zero(); k_g * p];
    for g in 0..spec.groups {
        let go_g = MatRef::new(&go[g * cout_g * p..(g + 1) * cout_g * p], cout_g, p);
        if let Some(dw) = dw.as_mut() {
            im2col(input.data(), &geo, g, &mut col);
            gemm(go_g, MatRef::new(&col, k_g, p).t(), T::zero(), &mut dw[g * cout_g * k_g..(g + 1) * cout_g * k_g]);
        }
        if let Some(dx) = dx.as_mut() {
            let wg = MatRef::new(&weight.data()[g * cout_g * k_g..(g + 1) * cout_g * k_g], cout_g, k_g);
            gemm(wg.t(), go_g, T::zero(), &mut col);
            col2im(&col, &geo, g, dx);
        }
    }
    let db = (has_bias && need[2]).then(|| {
        let sums = go.chunks(p).map(|c| c.iter().copied().sum()).collect();
        Tensor::from_parts(vec![geo.cout], sums)
    });
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        weight: dw.map(|d| Tensor::from_parts(weight.shape().to_vec(), d)),
        bias: db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_copies_input() {
        let x = Tensor::<f64>::from_f64(vec![1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::ones(vec![1, 1, 1, 1]);
        let y = conv2d(&x, &w, None, &ConvSpec::pointwise()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::<f64>::from_f64(vec![1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::ones(vec![1, 1, 2, 2]);
        let y = conv2d(&x, &w, None, &ConvSpec::new(2, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn dilated_row_kernel() {
        // Hand-evaluated: each output sums x[i-2], x[i], x[i+2] with zero padding.
        let x = Tensor::<f64>::from_f64(vec![1, 1, 5], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let w = Tensor::ones(vec![1, 1, 1, 3]);
        let spec = ConvSpec::new(1, 3).with_padding(0, 2).with_dilation(2);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 9.0, 6.0, 8.0]);
    }

    #[test]
    fn mismatch_names_dimension() {
        let x = Tensor::<f32>::zeros(vec![3, 4, 4]);
        let w = Tensor::<f32>::zeros(vec![2, 2, 3, 3]);
        let err = conv2d(&x, &w, None, &ConvSpec::same(3, 3, 1)).unwrap_err();
        assert!(err.to_string().contains("in_channels"), "{err}");
        let w = Tensor::<f32>::zeros(vec![2, 3, 3, 1]);
        let err = conv2d(&x, &w, None, &ConvSpec::same(3, 3, 1)).unwrap_err();
        assert!(err.to_string().contains("kernel_w"), "{err}");
    }

    #[test]
    fn groups_must_divide_channels() {
        let x = Tensor::<f32>::zeros(vec![3, 4, 4]);
        let w = Tensor::<f32>::zeros(vec![3, 1, 3, 3]);
        assert!(conv2d(&x, &w, None, &ConvSpec::same(3, 3, 1).with_groups(2)).is_err());
        assert!(conv2d(&x, &w, None, &ConvSpec::same(3, 3, 1).with_groups(3)).is_ok());
    }

    #[test]
    fn out_dim_formula() {
        assert_eq!(ConvSpec::out_dim(32, 3, 1, 2, 1), Some(16));
        assert_eq!(ConvSpec::out_dim(5, 3, 2, 1, 2), Some(5));
        assert_eq!(ConvSpec::out_dim(2, 5, 0, 1, 1), None);
    }
}
