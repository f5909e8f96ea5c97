//! Conversions between the agent-major `[M, C, H, W]` layout used by the
//! convolutional parts and the cell-major `[H*W, M, C]` layout used by the
//! per-cell attention and linear maps.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn to_cell_major<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank(4, "to_cell_major")?;
    let s = x.shape();
    let (m, c, p) = (s[0], s[1], s[2] * s[3]);
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for a in 0..m {
        for ch in 0..c {
            let plane = &src[(a * c + ch) * p..(a * c + ch + 1) * p];
            for (cell, &v) in plane.iter().enumerate() {
                out[(cell * m + a) * c + ch] = v;
            }
        }
    }
    Tensor::new(vec![p, m, c], out)
}

pub fn from_cell_major<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    x.expect_rank(3, "from_cell_major")?;
    let s = x.shape();
    let (p, m, c) = (s[0], s[1], s[2]);
    x.expect_shape(&[h * w, m, c], "from_cell_major")?;
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for cell in 0..p {
        for a in 0..m {
            for ch in 0..c {
                out[(a * c + ch) * p + cell] = src[(cell * m + a) * c + ch];
            }
        }
    }
    Tensor::new(vec![m, c, h, w], out)
}
