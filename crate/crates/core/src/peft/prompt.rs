//! Agent prompt: a virtual agent row built from the adapted feature stack.
//!
//! ```text
//! E = scale * F_hat + shift        (per channel)
//! P = linear(max_over_agents(E))   (per cell, along channels)
//! ```
//!
//! `P` has the shape of one agent row and is appended to the fusion input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{
    agent_max_pool, agent_max_pool_backward, linear, linear_backward, scale_shift, scale_shift_backward,
    GradMap, ParamRegistry, PoolArgmax,
};
use crate::pipeline::layout::{from_cell_major, to_cell_major};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SCALE: &str = "prompt.scale";
pub const SHIFT: &str = "prompt.shift";
pub const LINEAR_W: &str = "prompt.linear.w";
pub const LINEAR_B: &str = "prompt.linear.b";
/// Free prompt token used when the prompt is not instance-aware.
pub const TOKEN: &str = "prompt.token";

/// Ablation switches of the agent prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFlags {
    /// Derive the prompt from the adapted features; otherwise from a free
    /// learnable `[1, C, H, W]` token.
    pub instance_aware: bool,
    /// Max-pool over agents; otherwise use the ego row.
    pub collaborative_filter: bool,
}

impl Default for PromptFlags {
    fn default() -> Self {
        Self { instance_aware: true, collaborative_filter: true }
    }
}

pub fn prompt_param_shapes(channels: usize, h: usize, w: usize, flags: &PromptFlags) -> Vec<(String, Vec<usize>)> {
    let c = channels;
    let mut out = vec![
        (SCALE.to_string(), vec![c]),
        (SHIFT.to_string(), vec![c]),
        (LINEAR_W.to_string(), vec![c, c]),
        (LINEAR_B.to_string(), vec![c]),
    ];
    if !flags.instance_aware {
        out.push((TOKEN.to_string(), vec![1, c, h, w]));
    }
    out
}

/// Scale = 1, shift = 0, linear weight uniform in [-0.01, 0.01], bias 0;
/// the free token (if any) is uniform in [-0.1, 0.1].
pub fn init_prompt<T: Scalar, R: Rng + ?Sized>(
    reg: &mut ParamRegistry<T>,
    channels: usize,
    h: usize,
    w: usize,
    flags: &PromptFlags,
    rng: &mut R,
) -> Result<()> {
    for (name, shape) in prompt_param_shapes(channels, h, w, flags) {
        let t = match name.as_str() {
            SCALE => Tensor::ones(&shape),
            LINEAR_W => Tensor::from_fn(&shape, |_| T::of(rng.random_range(-0.01..0.01))),
            TOKEN => Tensor::from_fn(&shape, |_| T::of(rng.random_range(-0.1..0.1))),
            _ => Tensor::zeros(&shape),
        };
        reg.insert(name, t)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PromptCache<T> {
    src: Tensor<T>,
    pool_arg: Option<PoolArgmax>,
    rows: usize,
    pooled_cm: Tensor<T>,
}

/// Builds the `[1, C, H, W]` prompt from an `[N, C, H, W]` adapted stack.
pub fn agent_prompt<T: Scalar>(
    f_hat: &Tensor<T>,
    reg: &ParamRegistry<T>,
    flags: &PromptFlags,
) -> Result<(Tensor<T>, PromptCache<T>)> {
    f_hat.expect_rank(4, "agent_prompt")?;
    let (h, w) = (f_hat.shape()[2], f_hat.shape()[3]);
    let src = if flags.instance_aware { f_hat.clone() } else { reg.get(TOKEN)?.clone() };
    let e = scale_shift(&src, reg.get(SCALE)?, reg.get(SHIFT)?)?;
    let (pooled, pool_arg) = if flags.collaborative_filter {
        let (p, arg) = agent_max_pool(&e)?;
        (p, Some(arg))
    } else {
        (e.row(0)?, None)
    };
    let pooled_cm = to_cell_major(&pooled)?;
    let y = linear(&pooled_cm, reg.get(LINEAR_W)?, reg.get(LINEAR_B)?)?;
    let p = from_cell_major(&y, h, w)?;
    let rows = src.shape()[0];
    Ok((p, PromptCache { src, pool_arg, rows, pooled_cm }))
}

/// Backward of [`agent_prompt`]. Returns the gradient w.r.t. `f_hat` when the
/// prompt is instance-aware.
pub fn agent_prompt_backward<T: Scalar>(
    cache: &PromptCache<T>,
    grad_out: &Tensor<T>,
    reg: &ParamRegistry<T>,
    flags: &PromptFlags,
    grads: &mut GradMap<T>,
) -> Result<Option<Tensor<T>>> {
    grad_out.expect_rank(4, "agent_prompt_backward")?;
    let (h, w) = (grad_out.shape()[2], grad_out.shape()[3]);
    let dy = to_cell_major(grad_out)?;
    let lg = linear_backward(&cache.pooled_cm, reg.get(LINEAR_W)?, &dy)?;
    let d_pooled = from_cell_major(&lg.input, h, w)?;
    let d_e = match &cache.pool_arg {
        Some(arg) => agent_max_pool_backward(arg, &d_pooled)?,
        None => {
            let mut shape = d_pooled.shape().to_vec();
            shape[0] = cache.rows;
            let mut d = Tensor::zeros(&shape);
            d.data_mut()[..d_pooled.numel()].copy_from_slice(d_pooled.data());
            d
        }
    };
    let sg = scale_shift_backward(&cache.src, reg.get(SCALE)?, &d_e)?;
    for (name, g) in [(LINEAR_W, lg.weight), (LINEAR_B, lg.bias), (SCALE, sg.scale), (SHIFT, sg.shift)] {
        if reg.is_trainable(name) {
            grads.accumulate(name, g)?;
        }
    }
    if flags.instance_aware {
        Ok(Some(sg.input))
    } else {
        if reg.is_trainable(TOKEN) {
            grads.accumulate(TOKEN, sg.input)?;
        }
        Ok(None)
    }
}
