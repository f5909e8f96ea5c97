//! Per-agent BEV encoder: a stack of 3x3 conv + ReLU blocks.

use crate::error::Result;
use crate::nn::{conv2d, conv2d_backward, relu, relu_backward, GradMap, ParamRegistry};
use crate::pipeline::config::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn weight_name(layer: usize) -> String {
    format!("encoder.conv{layer}.w")
}

pub(crate) fn bias_name(layer: usize) -> String {
    format!("encoder.conv{layer}.b")
}

/// `(in, out)` channels of each encoder conv.
pub fn layer_channels(cfg: &ModelConfig) -> Vec<(usize, usize)> {
    let n = cfg.encoder_strides.len();
    (0..n)
        .map(|i| {
            let cin = if i == 0 { cfg.in_channels } else { cfg.encoder_width };
            let cout = if i + 1 == n { cfg.channels } else { cfg.encoder_width };
            (cin, cout)
        })
        .collect()
}

/// Values retained for the backward pass of one agent.
#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    inputs: Vec<Tensor<T>>,
    pre_act: Vec<Tensor<T>>,
}

pub fn encode<T: Scalar>(obs: &Tensor<T>, reg: &ParamRegistry<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    encode_with_cache(obs, reg, cfg).map(|(f, _)| f)
}

pub fn encode_with_cache<T: Scalar>(
    obs: &Tensor<T>,
    reg: &ParamRegistry<T>,
    cfg: &ModelConfig,
) -> Result<(Tensor<T>, EncoderCache<T>)> {
    obs.expect_shape(&[cfg.in_channels, cfg.grid.rows, cfg.grid.cols], "encode")?;
    let mut x = obs.clone();
    let mut cache = EncoderCache { inputs: Vec::new(), pre_act: Vec::new() };
    for (i, &stride) in cfg.encoder_strides.iter().enumerate() {
        let pre = conv2d(&x, reg.get(&weight_name(i))?, reg.get(&bias_name(i))?, stride, 1)?;
        let out = relu(&pre);
        cache.inputs.push(std::mem::replace(&mut x, out));
        cache.pre_act.push(pre);
    }
    Ok((x, cache))
}

/// Accumulates parameter gradients for the trainable encoder entries.
pub fn encode_backward<T: Scalar>(
    cache: &EncoderCache<T>,
    grad_out: &Tensor<T>,
    reg: &ParamRegistry<T>,
    cfg: &ModelConfig,
    grads: &mut GradMap<T>,
) -> Result<()> {
    let mut g = grad_out.clone();
    for i in (0..cfg.encoder_strides.len()).rev() {
        let g_pre = relu_backward(&cache.pre_act[i], &g)?;
        let (wn, bn) = (weight_name(i), bias_name(i));
        let want_input = i > 0;
        let cg = conv2d_backward(&cache.inputs[i], reg.get(&wn)?, cfg.encoder_strides[i], 1, &g_pre, want_input)?;
        if reg.is_trainable(&wn) {
            grads.accumulate(&wn, cg.weight)?;
        }
        if reg.is_trainable(&bn) {
            grads.accumulate(&bn, cg.bias)?;
        }
        match cg.input {
            Some(gi) => g = gi,
            None => break,
        }
    }
    Ok(())
}
