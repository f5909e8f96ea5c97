//! Detection heads: parallel 1x1 convolutions for objectness and box regression.

use crate::error::Result;
use crate::nn::{conv2d, conv2d_backward, GradMap, ParamRegistry};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CLS_W: &str = "decoder.cls.w";
pub const CLS_B: &str = "decoder.cls.b";
pub const REG_W: &str = "decoder.reg.w";
pub const REG_B: &str = "decoder.reg.b";

/// Raw head outputs on the feature grid.
///
/// `reg` channels are `(dx, dy, log w, log l)` in feature-cell units.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs<T> {
    pub cls_logits: Tensor<T>,
    pub reg: Tensor<T>,
}

impl<T: Scalar> HeadOutputs<T> {
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.cls_logits.bits_eq(&other.cls_logits) && self.reg.bits_eq(&other.reg)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self.cls_logits.max_abs_diff(&other.cls_logits)?.max(self.reg.max_abs_diff(&other.reg)?))
    }
}

pub fn decode_heads<T: Scalar>(fused: &Tensor<T>, reg: &ParamRegistry<T>) -> Result<HeadOutputs<T>> {
    Ok(HeadOutputs {
        cls_logits: conv2d(fused, reg.get(CLS_W)?, reg.get(CLS_B)?, 1, 0)?,
        reg: conv2d(fused, reg.get(REG_W)?, reg.get(REG_B)?, 1, 0)?,
    })
}

/// Accumulates head parameter gradients and returns the gradient w.r.t. `fused`.
pub fn decode_heads_backward<T: Scalar>(
    fused: &Tensor<T>,
    reg: &ParamRegistry<T>,
    grad: &HeadOutputs<T>,
    grads: &mut GradMap<T>,
    want_input: bool,
) -> Result<Option<Tensor<T>>> {
    let gc = conv2d_backward(fused, reg.get(CLS_W)?, 1, 0, &grad.cls_logits, want_input)?;
    let gr = conv2d_backward(fused, reg.get(REG_W)?, 1, 0, &grad.reg, want_input)?;
    for (name, g) in [(CLS_W, gc.weight), (CLS_B, gc.bias), (REG_W, gr.weight), (REG_B, gr.bias)] {
        if reg.is_trainable(name) {
            grads.accumulate(name, g)?;
        }
    }
    match (gc.input, gr.input) {
        (Some(mut a), Some(b)) => {
            a.add_assign(&b)?;
            Ok(Some(a))
        }
        _ => Ok(None),
    }
}
