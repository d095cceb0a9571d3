//! Dense tensors and the differentiable primitive layers.
//!
//! Every layer here works on a single image in channels x height x width
//! layout and comes with a hand-written backward function. Convolutions are
//! lowered to a matrix product through an explicit `im2col` / `col2im` pair.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

/// Floating point element type of a [`Tensor`].
///
/// Training runs in `f32`; gradient checking runs in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// Dtype code used by the checkpoint format.
    const DTYPE_CODE: u8;
    const BYTES: usize;

    /// `c = a * b (+ c)` where `a` is m x k and `b` is k x n, both given by
    /// row and column strides. `c` is row-major m x n.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        accumulate: bool,
    );

    fn extend_le(self, out: &mut Vec<u8>);
    fn from_le(bytes: &[u8]) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $code:expr, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE_CODE: u8 = $code;
            const BYTES: usize = std::mem::size_of::<$t>();

            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert_eq!(c.len(), m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let span = |r: isize, cs: isize, rows: usize, cols: usize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (r as usize) * (rows - 1) + (cs as usize) * (cols - 1) + 1
                    }
                };
                assert!(a.len() >= span(rsa, csa, m, k));
                assert!(b.len() >= span(rsb, csb, k, n));
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above bound every index the kernel reads
                // or writes inside the three slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn extend_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn from_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

impl_scalar!(f32, 0, matrixmultiply::sgemm);
impl_scalar!(f64, 1, matrixmultiply::dgemm);

/// `c = op(a) * op(b)`, with `a` logically m x k and `b` logically k x n.
///
/// `a_t` means `a` is stored as k x m row-major, `b_t` means `b` is stored as
/// n x k row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    T::gemm_raw(m, k, n, a, rsa, csa, b, rsb, csb, c, accumulate);
}

/// Dense row-major tensor, width fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            shape.iter().all(|&d| d >= 1),
            "tensor extents must be >= 1, got {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(
                "Tensor::from_vec",
                format!("extents must be >= 1, got {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::from_vec",
                expected: shape.to_vec(),
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "Tensor::reshape",
                expected: shape.to_vec(),
                got: self.shape,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::invalid(
                "Tensor::chw",
                format!("expected a CxHxW tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn at3(&self, c: usize, i: usize, j: usize) -> T {
        let (_, h, w) = self.chw().expect("rank-3 tensor");
        self.data[(c * h + i) * w + j]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a = *a + b);
    }

    /// Converts element type, e.g. `f32` parameters to `f64` for checking.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}

/// Kernel, bias and geometry of a convolution layer.
///
/// For [`conv2d_forward`] the kernel is `outC x inC x k x k`. For the
/// transposed convolution the kernel keeps the layout of the convolution it
/// is the adjoint of, so it reads `inC x outC x k x k`; in both cases the
/// bias has one entry per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let p = ConvParams {
            kernel,
            bias,
            stride,
            padding,
        };
        p.geometry("ConvParams::new")?;
        Ok(p)
    }

    /// Zero-bias parameters with the given kernel.
    pub fn with_kernel(kernel: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let bias = Tensor::zeros(&[kernel.shape()[0]]);
        Self::new(kernel, bias, stride, padding)
    }

    /// `(dim0, dim1, k)` of the kernel.
    fn geometry(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        let (d0, d1, k) = match self.kernel.shape()[..] {
            [d0, d1, kh, kw] if kh == kw => (d0, d1, kh),
            _ => {
                return Err(Error::invalid(
                    op,
                    format!(
                        "kernel must be 4-d with square spatial extents, got {:?}",
                        self.kernel.shape()
                    ),
                ))
            }
        };
        if self.stride == 0 {
            return Err(Error::invalid(op, "stride must be positive"));
        }
        if self.bias.rank() != 1 {
            return Err(Error::invalid(op, "bias must be 1-d"));
        }
        Ok((d0, d1, k))
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }
}

/// Output extent of a strided, padded convolution along one axis.
pub fn conv_out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

/// Geometry shared by `im2col` and `col2im`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Input coordinate touched by output position `(oi, oj)` and kernel tap
    /// `(a, b)`, or `None` if it falls in the zero padding.
    #[inline]
    pub fn source(&self, oi: usize, oj: usize, a: usize, b: usize) -> Option<(usize, usize)> {
        let i = (oi * self.stride + a) as isize - self.pad as isize;
        let j = (oj * self.stride + b) as isize - self.pad as isize;
        (i >= 0 && j >= 0 && (i as usize) < self.h && (j as usize) < self.w)
            .then_some((i as usize, j as usize))
    }
}

/// Unfolds `x` into a `(c*k*k) x (ho*wo)` column matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &Window) -> Vec<T> {
    let n = g.cols();
    let mut cols = vec![T::zero(); g.rows() * n];
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for a in 0..g.k {
            for b in 0..g.k {
                let row = (c * g.k + a) * g.k + b;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oi in 0..g.ho {
                    let i = (oi * g.stride + a) as isize - g.pad as isize;
                    if i < 0 || i as usize >= g.h {
                        continue;
                    }
                    let src_row = &plane[i as usize * g.w..(i as usize + 1) * g.w];
                    let dst_row = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    for (oj, d) in dst_row.iter_mut().enumerate() {
                        let j = (oj * g.stride + b) as isize - g.pad as isize;
                        if j >= 0 && (j as usize) < g.w {
                            *d = src_row[j as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back onto `out`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Window, out: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for a in 0..g.k {
            for b in 0..g.k {
                let row = (c * g.k + a) * g.k + b;
                let src = &cols[row * n..(row + 1) * n];
                for oi in 0..g.ho {
                    let i = (oi * g.stride + a) as isize - g.pad as isize;
                    if i < 0 || i as usize >= g.h {
                        continue;
                    }
                    let dst_row = &mut plane[i as usize * g.w..(i as usize + 1) * g.w];
                    let src_row = &src[oi * g.wo..(oi + 1) * g.wo];
                    for (oj, &s) in src_row.iter().enumerate() {
                        let j = (oj * g.stride + b) as isize - g.pad as isize;
                        if j >= 0 && (j as usize) < g.w {
                            dst_row[j as usize] = dst_row[j as usize] + s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_window<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    p: &ConvParams<T>,
) -> Result<(Window, usize)> {
    let (out_c, in_c, k) = p.geometry(op)?;
    let (c, h, w) = x.chw()?;
    if c != in_c {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![in_c, h, w],
            got: x.shape().to_vec(),
        });
    }
    if p.bias.len() != out_c {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![out_c],
            got: p.bias.shape().to_vec(),
        });
    }
    let (ho, wo) = match (
        conv_out_extent(h, k, p.stride, p.padding),
        conv_out_extent(w, k, p.stride, p.padding),
    ) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::invalid(
                op,
                format!(
                    "input {:?} with padding {} is smaller than kernel {:?}",
                    x.shape(),
                    p.padding,
                    p.kernel.shape()
                ),
            ))
        }
    };
    let g = Window {
        c,
        h,
        w,
        k,
        stride: p.stride,
        pad: p.padding,
        ho,
        wo,
    };
    Ok((g, out_c))
}

/// `1x1`, stride 1, no padding: the column matrix is the input itself.
fn is_pointwise(g: &Window) -> bool {
    g.k == 1 && g.stride == 1 && g.pad == 0
}

/// Output extents `(outC, Ho, Wo)` of [`conv2d_forward`].
pub fn conv2d_output_shape<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<[usize; 3]> {
    let (g, out_c) = conv_window("conv2d", x, p)?;
    Ok([out_c, g.ho, g.wo])
}

/// Zero-padded, strided cross-correlation plus per-channel bias.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let (g, out_c) = conv_window("conv2d_forward", x, p)?;
    let n = g.cols();
    let mut out = vec![T::zero(); out_c * n];
    let cols;
    let cols_ref = if is_pointwise(&g) {
        x.data()
    } else {
        cols = im2col(x.data(), &g);
        &cols
    };
    gemm(
        out_c,
        g.rows(),
        n,
        p.kernel.data(),
        false,
        cols_ref,
        false,
        &mut out,
        false,
    );
    for (row, &b) in out.chunks_mut(n).zip(p.bias.data()) {
        row.iter_mut().for_each(|v| *v = *v + b);
    }
    Tensor::from_vec(&[out_c, g.ho, g.wo], out)
}

/// Gradients of a convolution layer with respect to its input, kernel and
/// bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dkernel: Tensor<T>,
    pub dbias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (g, out_c) = conv_window("conv2d_backward", x, p)?;
    if dy.shape() != [out_c, g.ho, g.wo] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            expected: vec![out_c, g.ho, g.wo],
            got: dy.shape().to_vec(),
        });
    }
    let n = g.cols();
    let rows = g.rows();
    let cols;
    let cols_ref = if is_pointwise(&g) {
        x.data()
    } else {
        cols = im2col(x.data(), &g);
        &cols
    };

    let mut dk = vec![T::zero(); out_c * rows];
    gemm(
        out_c,
        n,
        rows,
        dy.data(),
        false,
        cols_ref,
        true,
        &mut dk,
        false,
    );

    let db: Vec<T> = dy
        .data()
        .chunks(n)
        .map(|r| r.iter().copied().sum())
        .collect();

    let mut dx = vec![T::zero(); x.len()];
    if is_pointwise(&g) {
        gemm(
            rows,
            out_c,
            n,
            p.kernel.data(),
            true,
            dy.data(),
            false,
            &mut dx,
            false,
        );
    } else {
        let mut dcols = vec![T::zero(); rows * n];
        gemm(
            rows,
            out_c,
            n,
            p.kernel.data(),
            true,
            dy.data(),
            false,
            &mut dcols,
            false,
        );
        col2im(&dcols, &g, &mut dx);
    }

    Ok(ConvGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dkernel: Tensor::from_vec(p.kernel.shape(), dk)?,
        dbias: Tensor::from_vec(&[out_c], db)?,
    })
}

/// Geometry of a transposed convolution: the window of the adjoint
/// convolution, seen from the output side.
fn transpose_window<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    p: &ConvParams<T>,
) -> Result<(Window, usize)> {
    let (in_c, out_c, k) = p.geometry(op)?;
    let (c, h, w) = x.chw()?;
    if c != in_c {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![in_c, h, w],
            got: x.shape().to_vec(),
        });
    }
    if p.bias.len() != out_c {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![out_c],
            got: p.bias.shape().to_vec(),
        });
    }
    let full = |len: usize| ((len - 1) * p.stride + k).checked_sub(2 * p.padding);
    let (oh, ow) = match (full(h), full(w)) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
        _ => return Err(Error::invalid(op, "padding exceeds the transposed output")),
    };
    let g = Window {
        c: out_c,
        h: oh,
        w: ow,
        k,
        stride: p.stride,
        pad: p.padding,
        ho: h,
        wo: w,
    };
    // The adjoint convolution must map the output grid back onto exactly
    // the input grid.
    if conv_out_extent(oh, k, p.stride, p.padding) != Some(h)
        || conv_out_extent(ow, k, p.stride, p.padding) != Some(w)
    {
        return Err(Error::invalid(op, "inconsistent transposed geometry"));
    }
    Ok((g, in_c))
}

/// Adjoint of the strided convolution with the same kernel, plus bias.
///
/// Output extent per axis is `(len - 1) * stride + k - 2 * padding`; with
/// `k = 2 * stride` and `padding = stride / 2` this is exactly
/// `stride * len`.
pub fn conv_transpose2d_forward<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let (g, in_c) = transpose_window("conv_transpose2d_forward", x, p)?;
    let n = g.cols();
    let rows = g.rows();
    let mut cols = vec![T::zero(); rows * n];
    gemm(
        rows,
        in_c,
        n,
        p.kernel.data(),
        true,
        x.data(),
        false,
        &mut cols,
        false,
    );
    let mut out = vec![T::zero(); g.c * g.h * g.w];
    col2im(&cols, &g, &mut out);
    let plane = g.h * g.w;
    for (chunk, &b) in out.chunks_mut(plane).zip(p.bias.data()) {
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
    Tensor::from_vec(&[g.c, g.h, g.w], out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (g, in_c) = transpose_window("conv_transpose2d_backward", x, p)?;
    if dy.shape() != [g.c, g.h, g.w] {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose2d_backward",
            expected: vec![g.c, g.h, g.w],
            got: dy.shape().to_vec(),
        });
    }
    let n = g.cols();
    let rows = g.rows();
    let cols = im2col(dy.data(), &g);

    let mut dx = vec![T::zero(); in_c * n];
    gemm(
        in_c,
        rows,
        n,
        p.kernel.data(),
        false,
        &cols,
        false,
        &mut dx,
        false,
    );

    let mut dk = vec![T::zero(); in_c * rows];
    gemm(in_c, n, rows, x.data(), false, &cols, true, &mut dk, false);

    let plane = g.h * g.w;
    let db: Vec<T> = dy
        .data()
        .chunks(plane)
        .map(|r| r.iter().copied().sum())
        .collect();

    Ok(ConvGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dkernel: Tensor::from_vec(p.kernel.shape(), dk)?,
        dbias: Tensor::from_vec(&[g.c], db)?,
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `dy` where `x > 0`, zero elsewhere.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != dy.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            expected: x.shape().to_vec(),
            got: dy.shape().to_vec(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Argmax bookkeeping of a 2x2 max-pool, needed by its backward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    /// Linear index into the input for every output element.
    pub argmax: Vec<usize>,
}

/// 2x2 max-pool with stride 2. Ties go to the smallest linear index.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "maxpool2",
            format!("spatial extents must be even, got {h}x{w}"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oi in 0..ho {
            for oj in 0..wo {
                let base = (ch * h + 2 * oi) * w + 2 * oj;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if xs[idx] > xs[best] {
                        best = idx;
                    }
                }
                out.push(xs[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::from_vec(&[c, ho, wo], out)?,
        PoolIndices {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward<T: Scalar>(idx: &PoolIndices, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if dy.len() != idx.argmax.len() {
        return Err(Error::ShapeMismatch {
            op: "maxpool2_backward",
            expected: vec![idx.argmax.len()],
            got: dy.shape().to_vec(),
        });
    }
    let mut dx = Tensor::zeros(&idx.input_shape);
    let d = dx.data_mut();
    for (&i, &g) in idx.argmax.iter().zip(dy.data()) {
        d[i] = d[i] + g;
    }
    Ok(dx)
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))` for a conv kernel
/// of shape `outC x inC x k x k`.
pub fn glorot_bound(out_c: usize, in_c: usize, k: usize) -> f64 {
    let fan_in = in_c * k * k;
    let fan_out = out_c * k * k;
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Bilinear upsampling kernel for a transposed convolution with the given
/// stride (kernel side `2 * stride`). Channel `c` of the input feeds channel
/// `c` of the output; off-diagonal channel pairs are zero.
pub fn bilinear_kernel<T: Scalar>(in_c: usize, out_c: usize, stride: usize) -> Tensor<T> {
    let k = 2 * stride;
    let factor = k.div_ceil(2);
    let center = if k % 2 == 1 {
        factor as f64 - 1.0
    } else {
        factor as f64 - 0.5
    };
    let tap = |i: usize| 1.0 - (i as f64 - center).abs() / factor as f64;
    let mut t = Tensor::zeros(&[in_c, out_c, k, k]);
    let d = t.data_mut();
    for c in 0..in_c.min(out_c) {
        for a in 0..k {
            for b in 0..k {
                d[((c * out_c + c) * k + a) * k + b] = T::lit(tap(a) * tap(b));
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_conv() {
        let x = t64(&[1, 1, 1], &[1.0]);
        let p = ConvParams::with_kernel(t64(&[1, 1, 1, 1], &[1.0]), 1, 0).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap().data(), &[1.0]);
    }

    #[test]
    fn all_ones_3x3_sums_to_nine() {
        let x = Tensor::<f64>::full(&[1, 3, 3], 1.0);
        let p = ConvParams::with_kernel(Tensor::full(&[1, 1, 3, 3], 1.0), 1, 0).unwrap();
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(&[2, 5, 5], 1.0, &mut rng);
        let p = ConvParams::with_kernel(Tensor::zeros(&[3, 2, 3, 3]), 1, 1).unwrap();
        assert!(conv2d_forward(&x, &p)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn output_extent_formula() {
        let x = Tensor::<f32>::zeros(&[1, 7, 9]);
        let p = ConvParams::with_kernel(Tensor::zeros(&[2, 1, 3, 3]), 2, 1).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap().shape(), &[2, 4, 5]);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::<f32>::zeros(&[2, 4, 4]);
        let p = ConvParams::with_kernel(Tensor::zeros(&[1, 3, 3, 3]), 1, 0).unwrap();
        let msg = conv2d_forward(&x, &p).unwrap_err().to_string();
        assert!(
            msg.contains("[3, 4, 4]") && msg.contains("[2, 4, 4]"),
            "{msg}"
        );
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2]);
        let p = ConvParams::with_kernel(Tensor::zeros(&[1, 1, 3, 3]), 1, 0).unwrap();
        assert!(conv2d_forward(&x, &p).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::uniform(&[2, 4, 4], 1.0, &mut rng);
        let p = ConvParams::new(
            Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut rng),
            Tensor::uniform(&[3], 1.0, &mut rng),
            1,
            1,
        )
        .unwrap();
        let g = conv2d_backward(&x, &p, &Tensor::zeros(&[3, 4, 4])).unwrap();
        assert_eq!(g.dx.max_abs(), 0.0);
        assert_eq!(g.dkernel.max_abs(), 0.0);
        assert_eq!(g.dbias.max_abs(), 0.0);
    }

    #[test]
    fn backward_rejects_bad_upstream_shape() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4]);
        let p = ConvParams::with_kernel(Tensor::zeros(&[1, 1, 3, 3]), 1, 0).unwrap();
        assert!(conv2d_backward(&x, &p, &Tensor::zeros(&[1, 4, 4])).is_err());
    }

    #[test]
    fn pointwise_identity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::uniform(&[3, 5, 6], 2.0, &mut rng);
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        let p = ConvParams::with_kernel(k, 1, 0).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn transposed_scatter_of_single_scalar() {
        let x = t64(&[1, 1, 1], &[1.0]);
        let p = ConvParams::with_kernel(Tensor::full(&[1, 1, 2, 2], 1.0), 2, 0).unwrap();
        let y = conv_transpose2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.0; 4]);
    }

    #[test]
    fn transposed_zero_kernel_gives_bias() {
        let x = Tensor::<f64>::full(&[2, 3, 3], 5.0);
        let p = ConvParams::new(
            Tensor::zeros(&[2, 3, 4, 4]),
            t64(&[3], &[0.5, -1.0, 2.0]),
            2,
            1,
        )
        .unwrap();
        let y = conv_transpose2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[3, 6, 6]);
        for c in 0..3 {
            for i in 0..6 {
                for j in 0..6 {
                    assert_eq!(y.at3(c, i, j), p.bias.data()[c]);
                }
            }
        }
    }

    #[test]
    fn transposed_upsamples_by_stride() {
        for s in [2usize, 4] {
            let x = Tensor::<f32>::zeros(&[2, 5, 3]);
            let p = ConvParams::with_kernel(bilinear_kernel(2, 2, s), s, s / 2).unwrap();
            assert_eq!(
                conv_transpose2d_forward(&x, &p).unwrap().shape(),
                &[2, 5 * s, 3 * s]
            );
        }
    }

    #[test]
    fn bilinear_kernel_reproduces_constants_in_interior() {
        let x = Tensor::<f64>::full(&[1, 4, 4], 1.0);
        let p = ConvParams::with_kernel(bilinear_kernel(1, 1, 2), 2, 1).unwrap();
        let y = conv_transpose2d_forward(&x, &p).unwrap();
        for i in 1..7 {
            for j in 1..7 {
                assert!((y.at3(0, i, j) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relu_cases() {
        let x = t64(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&relu(&x)), relu(&x));
        let dx = relu_backward(&t64(&[2], &[-1.0, 2.0]), &t64(&[2], &[5.0, 5.0])).unwrap();
        assert_eq!(dx.data(), &[0.0, 5.0]);
    }

    #[test]
    fn maxpool_cases() {
        let x = t64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (y, idx) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx.argmax, vec![3]);
        let dx = maxpool2_backward(&idx, &t64(&[1, 1, 1], &[7.0])).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 7.0]);

        let (y, idx) = maxpool2(&Tensor::<f64>::full(&[1, 4, 4], 3.0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        assert_eq!(idx.argmax, vec![0, 2, 8, 10]);

        assert!(maxpool2(&Tensor::<f64>::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::uniform(&[3, 9, 9], 1.0, &mut rng);
        let p = ConvParams::new(
            Tensor::uniform(&[4, 3, 3, 3], 1.0, &mut rng),
            Tensor::uniform(&[4], 1.0, &mut rng),
            1,
            1,
        )
        .unwrap();
        let a = conv2d_forward(&x, &p).unwrap();
        let b = conv2d_forward(&x, &p).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}
