//! Training targets and the detection loss.
//!
//! Classification is a positive-weighted binary cross-entropy with logits over
//! every feature cell; regression is smooth-L1 on positive cells only. Both are
//! normalised by `max(1, #positives)`.

use crate::error::Result;
use crate::geometry::{BoxAA, GridGeometry};
use crate::pipeline::heads::HeadOutputs;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Upper bound on the positive-class weight.
pub const MAX_POS_WEIGHT: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTargets<T> {
    /// Row-major `[H*W]` positive-cell mask.
    pub positive: Vec<bool>,
    /// `[4, H, W]`; only positive cells are meaningful.
    pub reg: Tensor<T>,
}

impl<T: Scalar> DetectionTargets<T> {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

/// Encodes `(dx, dy, log w, log l)` of `b` relative to the centre of cell `(row, col)`.
pub fn encode_box(b: &BoxAA, geom: &GridGeometry, row: usize, col: usize) -> [f64; 4] {
    let (x, y) = geom.cell_center(row, col);
    let s = geom.cell_size;
    [(b.cx - x) / s, (b.cy - y) / s, (b.w / s).ln(), (b.l / s).ln()]
}

/// The cell containing each box centre is positive. When two centres share
/// a cell the first box keeps it.
pub fn build_targets<T: Scalar>(boxes: &[BoxAA], geom: &GridGeometry) -> DetectionTargets<T> {
    let (h, w) = (geom.rows, geom.cols);
    let mut positive = vec![false; h * w];
    let mut reg = Tensor::zeros(&[4, h, w]);
    for b in boxes {
        let Some((r, c)) = geom.locate(b.cx, b.cy) else { continue };
        let cell = r * w + c;
        if positive[cell] {
            continue;
        }
        positive[cell] = true;
        for (ch, v) in encode_box(b, geom, r, c).into_iter().enumerate() {
            reg.data_mut()[ch * h * w + cell] = T::of(v);
        }
    }
    DetectionTargets { positive, reg }
}

fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts<T> {
    pub total: T,
    pub classification: T,
    pub regression: T,
}

/// Loss value and its gradient w.r.t. both head outputs.
pub fn detection_loss<T: Scalar>(
    heads: &HeadOutputs<T>,
    targets: &DetectionTargets<T>,
) -> Result<(LossParts<T>, HeadOutputs<T>)> {
    let cells = targets.positive.len();
    heads.reg.expect_shape(targets.reg.shape(), "detection_loss")?;
    let ts = targets.reg.shape();
    heads.cls_logits.expect_shape(&[1, ts[1], ts[2]], "detection_loss")?;
    if cells != ts[1] * ts[2] {
        return Err(crate::error::Error::shape("detection_loss", format!("mask has {cells} cells for grid {ts:?}")));
    }

    let npos = targets.num_positive();
    let nneg = cells - npos;
    let pos_weight = if npos > 0 { T::of((nneg as f64 / npos as f64).min(MAX_POS_WEIGHT)) } else { T::one() };
    let norm = T::of(npos.max(1) as f64);

    let z = heads.cls_logits.data();
    let mut dz = vec![T::zero(); cells];
    let mut cls = T::zero();
    for i in 0..cells {
        if targets.positive[i] {
            cls += pos_weight * softplus(-z[i]);
            dz[i] = pos_weight * (sigmoid(z[i]) - T::one()) / norm;
        } else {
            cls += softplus(z[i]);
            dz[i] = sigmoid(z[i]) / norm;
        }
    }

    let r = heads.reg.data();
    let t = targets.reg.data();
    let mut dr = vec![T::zero(); r.len()];
    let mut regl = T::zero();
    let half = T::of(0.5);
    for ch in 0..4 {
        for i in 0..cells {
            if !targets.positive[i] {
                continue;
            }
            let k = ch * cells + i;
            let diff = r[k] - t[k];
            if diff.abs() < T::one() {
                regl += half * diff * diff;
                dr[k] = diff / norm;
            } else {
                regl += diff.abs() - half;
                dr[k] = diff.signum() / norm;
            }
        }
    }
    let parts = LossParts { total: (cls + regl) / norm, classification: cls / norm, regression: regl / norm };
    let grad = HeadOutputs {
        cls_logits: Tensor::new(heads.cls_logits.shape().to_vec(), dz)?,
        reg: Tensor::new(heads.reg.shape().to_vec(), dr)?,
    };
    Ok((parts, grad))
}
