//! Layer primitives with explicit forward and gradient rules.
//!
//! Every `*_backward` takes the upstream gradient of the op's output and
//! returns gradients for the op's inputs and parameters. Nothing is cached
//! implicitly; callers keep whatever forward values the backward rule needs.

use crate::error::{Error, Result};
use crate::scalar::{Mat, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        input.expect_rank(3, "conv2d")?;
        weight.expect_rank(4, "conv2d")?;
        let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let ws = weight.shape();
        let (cout, wcin, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {cin} but weight expects {wcin} (weight {ws:?})"),
            ));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be odd and square, got {k}x{k2}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{w} (padding {padding})"),
            ));
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        Ok(Self { cin, h, w, cout, k, stride, pad: padding, oh, ow })
    }

    /// Output column range `[lo, hi)` whose input column `ox*stride + kw - pad` is in bounds.
    #[inline]
    fn col_range(&self, kw: usize) -> (usize, usize) {
        Self::valid_range(kw, self.pad, self.stride, self.w, self.ow)
    }

    #[inline]
    fn row_range(&self, kh: usize) -> (usize, usize) {
        Self::valid_range(kh, self.pad, self.stride, self.h, self.oh)
    }

    #[inline]
    fn valid_range(kk: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
        // need 0 <= o*stride + kk - pad <= len - 1
        let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
        let hi = if len + pad < kk + 1 { 0 } else { (len - 1 + pad - kk) / stride + 1 };
        (lo.min(out_len), hi.min(out_len))
    }
}

impl ConvGeom {
    /// Unfolds the input into `[cin*k*k, oh*ow]` patch columns; padding reads as zero.
    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let plane = self.oh * self.ow;
        let mut cols = vec![T::zero(); self.cin * self.k * self.k * plane];
        for ci in 0..self.cin {
            let xin = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for kh in 0..self.k {
                let (ylo, yhi) = self.row_range(kh);
                for kw in 0..self.k {
                    let (xlo, xhi) = self.col_range(kw);
                    let r = (ci * self.k + kh) * self.k + kw;
                    let dst = &mut cols[r * plane..(r + 1) * plane];
                    for oy in ylo..yhi {
                        let row = &xin[(oy * self.stride + kh - self.pad) * self.w..][..self.w];
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        for ox in xlo..xhi {
                            drow[ox] = row[ox * self.stride + kw - self.pad];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters patch columns back onto the input.
    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let plane = self.oh * self.ow;
        let mut dx = vec![T::zero(); self.cin * self.h * self.w];
        for ci in 0..self.cin {
            let xin = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for kh in 0..self.k {
                let (ylo, yhi) = self.row_range(kh);
                for kw in 0..self.k {
                    let (xlo, xhi) = self.col_range(kw);
                    let r = (ci * self.k + kh) * self.k + kw;
                    let src = &cols[r * plane..(r + 1) * plane];
                    for oy in ylo..yhi {
                        let row = &mut xin[(oy * self.stride + kh - self.pad) * self.w..][..self.w];
                        let srow = &src[oy * self.ow..(oy + 1) * self.ow];
                        for ox in xlo..xhi {
                            row[ox * self.stride + kw - self.pad] += srow[ox];
                        }
                    }
                }
            }
        }
        dx
    }
}

/// 2-D cross-correlation of a `[C_in, H, W]` map with a `[C_out, C_in, k, k]`
/// kernel plus per-channel bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weight, stride, padding)?;
    bias.expect_shape(&[g.cout], "conv2d bias")?;
    let plane = g.oh * g.ow;
    let red = g.cin * g.k * g.k;
    let cols = g.im2col(input.data());
    let mut out = vec![T::zero(); g.cout * plane];
    for (o, &b) in out.chunks_mut(plane.max(1)).zip(bias.data()) {
        o.fill(b);
    }
    T::gemm(g.cout, red, plane, Mat::rows(weight.data(), red), Mat::rows(&cols, plane), T::one(), &mut out, plane);
    Tensor::new(vec![g.cout, g.oh, g.ow], out)?.finite_or("conv2d")
}

/// Gradients of [`conv2d`].
#[derive(Clone, Debug)]
pub struct Conv2dGrads<T> {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<Conv2dGrads<T>> {
    let g = ConvGeom::new(input, weight, stride, padding)?;
    grad_out.expect_shape(&[g.cout, g.oh, g.ow], "conv2d_backward")?;
    let go = grad_out.data();
    let plane = g.oh * g.ow;
    let red = g.cin * g.k * g.k;
    let cols = g.im2col(input.data());

    let db: Vec<T> = (0..g.cout).map(|co| go[co * plane..(co + 1) * plane].iter().copied().sum()).collect();
    let mut dw = vec![T::zero(); weight.numel()];
    T::gemm(g.cout, plane, red, Mat::rows(go, plane), Mat::transposed(&cols, plane), T::zero(), &mut dw, red);

    let input_grad = if want_input {
        let mut dcols = vec![T::zero(); red * plane];
        T::gemm(red, g.cout, plane, Mat::transposed(weight.data(), red), Mat::rows(go, plane), T::zero(), &mut dcols, plane);
        Some(Tensor::new(input.shape().to_vec(), g.col2im(&dcols))?)
    } else {
        None
    };
    Ok(Conv2dGrads {
        input: input_grad,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![g.cout], db)?,
    })
}

fn linear_dims<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize)> {
    weight.expect_rank(2, "linear")?;
    let (cout, cin) = (weight.shape()[0], weight.shape()[1]);
    let last = *input.shape().last().ok_or_else(|| Error::shape("linear", "rank-0 input"))?;
    if last != cin {
        return Err(Error::shape(
            "linear",
            format!("input last axis {last} but weight is {cout}x{cin}"),
        ));
    }
    bias.expect_shape(&[cout], "linear bias")?;
    Ok((input.numel() / cin, cin, cout))
}

/// Affine map along the last axis, broadcast over leading axes.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cin, cout) = linear_dims(input, weight, bias)?;
    let (x, w, b) = (input.data(), weight.data(), bias.data());
    let mut out = Vec::with_capacity(rows * cout);
    for r in 0..rows {
        let xr = &x[r * cin..(r + 1) * cin];
        for o in 0..cout {
            let wr = &w[o * cin..(o + 1) * cin];
            let mut acc = b[o];
            for (&wi, &xi) in wr.iter().zip(xr) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::new(shape, out)?.finite_or("linear")
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let cout = weight.shape()[0];
    let (rows, cin, _) = linear_dims(input, weight, &Tensor::zeros(&[cout]))?;
    if grad_out.numel() != rows * cout {
        return Err(Error::shape("linear_backward", format!("grad {:?}", grad_out.shape())));
    }
    let (x, w, g) = (input.data(), weight.data(), grad_out.data());
    let mut dx = vec![T::zero(); rows * cin];
    let mut dw = vec![T::zero(); cout * cin];
    let mut db = vec![T::zero(); cout];
    for r in 0..rows {
        let xr = &x[r * cin..(r + 1) * cin];
        let dxr = &mut dx[r * cin..(r + 1) * cin];
        for o in 0..cout {
            let go = g[r * cout + o];
            db[o] += go;
            let wr = &w[o * cin..(o + 1) * cin];
            let dwr = &mut dw[o * cin..(o + 1) * cin];
            for i in 0..cin {
                dxr[i] += go * wr[i];
                dwr[i] += go * xr[i];
            }
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![cout], db)?,
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient passes where `x > 0`; the subgradient at exactly 0 is 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad_out, "relu_backward", |v, g| if v > T::zero() { g } else { T::zero() })
}

fn check_scale_shift<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<(usize, usize, usize)> {
    x.expect_rank(4, "scale_shift")?;
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let plane = x.shape()[2] * x.shape()[3];
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::shape(
            "scale_shift",
            format!(
                "feature has {c} channels, scale {:?}, shift {:?}",
                scale.shape(),
                shift.shape()
            ),
        ));
    }
    Ok((n, c, plane))
}

/// Per-channel affine transform `scale[c] * x[n,c,h,w] + shift[c]`.
pub fn scale_shift<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, plane) = check_scale_shift(x, scale, shift)?;
    let (s, b) = (scale.data(), shift.data());
    let mut out = x.clone();
    for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = idx % c;
        for v in chunk {
            *v = s[ch] * *v + b[ch];
        }
    }
    debug_assert_eq!(out.numel(), n * c * plane);
    out.finite_or("scale_shift")
}

#[derive(Clone, Debug)]
pub struct ScaleShiftGrads<T> {
    pub input: Tensor<T>,
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

pub fn scale_shift_backward<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ScaleShiftGrads<T>> {
    let c = scale.numel();
    let (_, _, plane) = check_scale_shift(x, scale, &Tensor::zeros(&[c]))?;
    grad_out.expect_shape(x.shape(), "scale_shift_backward")?;
    let s = scale.data();
    let mut dx = grad_out.clone();
    let mut ds = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    for (idx, (gchunk, xchunk)) in dx.data_mut().chunks_mut(plane).zip(x.data().chunks(plane)).enumerate() {
        let ch = idx % c;
        for (g, &xv) in gchunk.iter_mut().zip(xchunk) {
            ds[ch] += *g * xv;
            db[ch] += *g;
            *g *= s[ch];
        }
    }
    Ok(ScaleShiftGrads {
        input: dx,
        scale: Tensor::new(vec![c], ds)?,
        shift: Tensor::new(vec![c], db)?,
    })
}

/// Winning agent per output element of [`agent_max_pool`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolArgmax {
    pub agents: usize,
    pub index: Vec<usize>,
}

/// Elementwise maximum over the leading (agent) axis of `[N, C, H, W]`.
/// Ties resolve to the lowest agent index.
pub fn agent_max_pool<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolArgmax)> {
    x.expect_rank(4, "agent_max_pool")?;
    let n = x.shape()[0];
    if n == 0 {
        return Err(Error::EmptyStack);
    }
    let row = x.numel() / n;
    let d = x.data();
    let mut out = d[..row].to_vec();
    let mut arg = vec![0usize; row];
    for a in 1..n {
        let r = &d[a * row..(a + 1) * row];
        for i in 0..row {
            if r[i] > out[i] {
                out[i] = r[i];
                arg[i] = a;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = 1;
    Ok((Tensor::new(shape, out)?, PoolArgmax { agents: n, index: arg }))
}

/// Routes the pooled gradient back to the argmax agent of each element.
pub fn agent_max_pool_backward<T: Scalar>(arg: &PoolArgmax, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_rank(4, "agent_max_pool_backward")?;
    let row = grad_out.numel();
    if row != arg.index.len() || grad_out.shape()[0] != 1 {
        return Err(Error::shape("agent_max_pool_backward", format!("grad {:?}", grad_out.shape())));
    }
    let mut dx = vec![T::zero(); row * arg.agents];
    for (i, (&a, &g)) in arg.index.iter().zip(grad_out.data()).enumerate() {
        dx[a * row + i] = g;
    }
    let mut shape = grad_out.shape().to_vec();
    shape[0] = arg.agents;
    Tensor::new(shape, dx)
}
