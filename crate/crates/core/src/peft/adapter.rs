//! Collaboration adapter.
//!
//! A convolutional bottleneck (`down` 3x3, ReLU, `up` 3x3) whose output is
//! modulated by a score map before being added back to the input:
//!
//! ```text
//! S     = act(score_1x1(max_over_agents(F)))
//! F_hat = F + S * up(relu(down(F)))
//! ```
//!
//! The bottleneck runs on every agent row independently. With the agent max
//! pool enabled, `S` is a single row shared by all agents.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    agent_max_pool, agent_max_pool_backward, conv2d, conv2d_backward, relu, relu_backward, GradMap,
    ParamRegistry, PoolArgmax,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Squashing applied to the modulation score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreActivation {
    #[default]
    Identity,
    Sigmoid,
}

/// Ablation switches of the collaboration adapter.
///
/// * `conv_branch = false` drops the modulation branch entirely (`S = 1`), which
///   is the plain bottleneck adapter.
/// * `collaborative_filter = false` feeds every agent row to the score conv
///   separately, so `S` becomes per-row.
/// * `score_generator = false` skips the 1x1 conv, using the (pooled) features
///   as the score directly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterFlags {
    pub conv_branch: bool,
    pub collaborative_filter: bool,
    pub score_generator: bool,
    #[serde(default)]
    pub score_activation: ScoreActivation,
}

impl AdapterFlags {
    pub const FULL: AdapterFlags = AdapterFlags {
        conv_branch: true,
        collaborative_filter: true,
        score_generator: true,
        score_activation: ScoreActivation::Identity,
    };

    pub const PLAIN: AdapterFlags = AdapterFlags {
        conv_branch: false,
        collaborative_filter: false,
        score_generator: false,
        score_activation: ScoreActivation::Identity,
    };

    pub fn has_score_params(&self) -> bool {
        self.conv_branch && self.score_generator
    }
}

impl Default for AdapterFlags {
    fn default() -> Self {
        Self::FULL
    }
}

pub(crate) struct AdapterNames {
    down_w: String,
    down_b: String,
    up_w: String,
    up_b: String,
    score_w: String,
    score_b: String,
}

impl AdapterNames {
    fn new(prefix: &str) -> Self {
        Self {
            down_w: format!("{prefix}.down.w"),
            down_b: format!("{prefix}.down.b"),
            up_w: format!("{prefix}.up.w"),
            up_b: format!("{prefix}.up.b"),
            score_w: format!("{prefix}.score.w"),
            score_b: format!("{prefix}.score.b"),
        }
    }
}

/// Names and shapes of the parameters an adapter with these flags owns.
pub fn adapter_param_shapes(
    prefix: &str,
    channels: usize,
    rate: usize,
    flags: &AdapterFlags,
) -> Result<Vec<(String, Vec<usize>)>> {
    if rate == 0 || !channels.is_multiple_of(rate) {
        return Err(Error::Config(format!("bottleneck rate {rate} does not divide {channels} channels")));
    }
    let (c, b) = (channels, channels / rate);
    let n = AdapterNames::new(prefix);
    let mut out = vec![
        (n.down_w, vec![b, c, 3, 3]),
        (n.down_b, vec![b]),
        (n.up_w, vec![c, b, 3, 3]),
        (n.up_b, vec![c]),
    ];
    if flags.has_score_params() {
        out.push((n.score_w, vec![c, c, 1, 1]));
        out.push((n.score_b, vec![c]));
    }
    Ok(out)
}

/// Registers adapter parameters.
///
/// `down` is He-uniform, `up` is zero (identity start), the score conv has a
/// small uniform weight and unit bias so that `S` starts near 1.
pub fn init_adapter<T: Scalar, R: Rng + ?Sized>(
    reg: &mut ParamRegistry<T>,
    prefix: &str,
    channels: usize,
    rate: usize,
    flags: &AdapterFlags,
    rng: &mut R,
) -> Result<()> {
    for (name, shape) in adapter_param_shapes(prefix, channels, rate, flags)? {
        let t = if name.ends_with(".down.w") {
            let bound = (6.0 / (channels * 9) as f64).sqrt();
            Tensor::from_fn(&shape, |_| T::of(rng.random_range(-bound..bound)))
        } else if name.ends_with(".score.w") {
            Tensor::from_fn(&shape, |_| T::of(rng.random_range(-0.01..0.01)))
        } else if name.ends_with(".score.b") {
            Tensor::ones(&shape)
        } else {
            Tensor::zeros(&shape)
        };
        reg.insert(name, t)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AdapterCache<T> {
    input: Tensor<T>,
    down_pre: Vec<Tensor<T>>,
    hidden: Vec<Tensor<T>>,
    up: Tensor<T>,
    /// `None` when `S = 1`.
    score: Option<Tensor<T>>,
    score_src: Option<Tensor<T>>,
    pool_arg: Option<PoolArgmax>,
}

impl<T: Scalar> AdapterCache<T> {
    /// Modulation score as applied (absent when fixed to 1).
    pub fn score(&self) -> Option<&Tensor<T>> {
        self.score.as_ref()
    }

    /// Output of the bottleneck branch before modulation.
    pub fn bottleneck(&self) -> &Tensor<T> {
        &self.up
    }
}

fn plane_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    x.expect_rank(4, "collaboration_adapter")?;
    let s = x.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

/// Applies the adapter to an `[N, C, H, W]` stack.
pub fn collaboration_adapter<T: Scalar>(
    f: &Tensor<T>,
    reg: &ParamRegistry<T>,
    prefix: &str,
    flags: &AdapterFlags,
) -> Result<(Tensor<T>, AdapterCache<T>)> {
    let (n, c, h, w) = plane_dims(f)?;
    let names = AdapterNames::new(prefix);
    let (dw, db, uw, ub) = (reg.get(&names.down_w)?, reg.get(&names.down_b)?, reg.get(&names.up_w)?, reg.get(&names.up_b)?);
    if dw.shape()[1] != c || c % dw.shape()[0] != 0 {
        return Err(Error::Config(format!(
            "adapter `{prefix}` expects {} channels with bottleneck {}, got {c}",
            dw.shape()[1],
            dw.shape()[0]
        )));
    }

    let row = c * h * w;
    let mut down_pre = Vec::with_capacity(n);
    let mut hidden = Vec::with_capacity(n);
    let mut up = Vec::with_capacity(n * row);
    for a in 0..n {
        let x = f.row(a)?.reshape(&[c, h, w])?;
        let pre = conv2d(&x, dw, db, 1, 1)?;
        let hid = relu(&pre);
        up.extend_from_slice(conv2d(&hid, uw, ub, 1, 1)?.data());
        down_pre.push(pre);
        hidden.push(hid);
    }
    let up = Tensor::new(vec![n, c, h, w], up)?;

    let (score, score_src, pool_arg) = if flags.conv_branch {
        let (src, arg) = if flags.collaborative_filter {
            let (p, arg) = agent_max_pool(f)?;
            (p, Some(arg))
        } else {
            (f.clone(), None)
        };
        let pre = if flags.score_generator {
            let (sw, sb) = (reg.get(&names.score_w)?, reg.get(&names.score_b)?);
            let rows = src.shape()[0];
            let mut data = Vec::with_capacity(rows * row);
            for r in 0..rows {
                let x = src.row(r)?.reshape(&[c, h, w])?;
                data.extend_from_slice(conv2d(&x, sw, sb, 1, 0)?.data());
            }
            Tensor::new(vec![rows, c, h, w], data)?
        } else {
            src.clone()
        };
        let s = match flags.score_activation {
            ScoreActivation::Identity => pre,
            ScoreActivation::Sigmoid => pre.map(|v| T::one() / (T::one() + (-v).exp())),
        };
        (Some(s), Some(src), arg)
    } else {
        (None, None, None)
    };

    let mut out = f.clone();
    {
        let o = out.data_mut();
        let u = up.data();
        match &score {
            Some(s) => {
                let sd = s.data();
                let shared = s.shape()[0] == 1;
                for i in 0..o.len() {
                    let si = if shared { sd[i % row] } else { sd[i] };
                    o[i] += si * u[i];
                }
            }
            None => {
                for (oi, &ui) in o.iter_mut().zip(u) {
                    *oi += ui;
                }
            }
        }
    }
    let out = out.finite_or("collaboration_adapter")?;
    Ok((out, AdapterCache { input: f.clone(), down_pre, hidden, up, score, score_src, pool_arg }))
}

/// Backward of [`collaboration_adapter`]; returns the input gradient.
pub fn collaboration_adapter_backward<T: Scalar>(
    cache: &AdapterCache<T>,
    grad_out: &Tensor<T>,
    reg: &ParamRegistry<T>,
    prefix: &str,
    flags: &AdapterFlags,
    grads: &mut GradMap<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = plane_dims(&cache.input)?;
    grad_out.expect_shape(cache.input.shape(), "collaboration_adapter_backward")?;
    let names = AdapterNames::new(prefix);
    let row = c * h * w;
    let g = grad_out.data();
    let mut d_in = grad_out.clone();

    let d_up: Tensor<T> = match &cache.score {
        None => grad_out.clone(),
        Some(s) => {
            let sd = s.data();
            let shared = s.shape()[0] == 1;
            let u = cache.up.data();
            let mut du = vec![T::zero(); n * row];
            let mut ds = vec![T::zero(); s.numel()];
            for i in 0..n * row {
                let si = if shared { i % row } else { i };
                du[i] = g[i] * sd[si];
                ds[si] += g[i] * u[i];
            }
            if flags.score_activation == ScoreActivation::Sigmoid {
                for (d, &sv) in ds.iter_mut().zip(sd) {
                    *d *= sv * (T::one() - sv);
                }
            }
            let ds = Tensor::new(s.shape().to_vec(), ds)?;
            let src = cache.score_src.as_ref().expect("score source cached with score");
            let d_src = if flags.score_generator {
                let sw = reg.get(&names.score_w)?;
                let rows = src.shape()[0];
                let mut d_src = Vec::with_capacity(rows * row);
                for r in 0..rows {
                    let x = src.row(r)?.reshape(&[c, h, w])?;
                    let gr = ds.row(r)?.reshape(&[c, h, w])?;
                    let cg = conv2d_backward(&x, sw, 1, 0, &gr, true)?;
                    if reg.is_trainable(&names.score_w) {
                        grads.accumulate(&names.score_w, cg.weight)?;
                    }
                    if reg.is_trainable(&names.score_b) {
                        grads.accumulate(&names.score_b, cg.bias)?;
                    }
                    d_src.extend_from_slice(cg.input.expect("requested").data());
                }
                Tensor::new(src.shape().to_vec(), d_src)?
            } else {
                ds
            };
            match &cache.pool_arg {
                Some(arg) => d_in.add_assign(&agent_max_pool_backward(arg, &d_src)?)?,
                None => d_in.add_assign(&d_src)?,
            }
            Tensor::new(vec![n, c, h, w], du)?
        }
    };

    let (dw, uw) = (reg.get(&names.down_w)?, reg.get(&names.up_w)?);
    let train = |name: &str| reg.is_trainable(name);
    for a in 0..n {
        let gu = d_up.row(a)?.reshape(&[c, h, w])?;
        let cu = conv2d_backward(&cache.hidden[a], uw, 1, 1, &gu, true)?;
        let d_pre = relu_backward(&cache.down_pre[a], &cu.input.expect("requested"))?;
        let x = cache.input.row(a)?.reshape(&[c, h, w])?;
        let cd = conv2d_backward(&x, dw, 1, 1, &d_pre, true)?;
        let dst = &mut d_in.data_mut()[a * row..(a + 1) * row];
        for (d, &v) in dst.iter_mut().zip(cd.input.expect("requested").data()) {
            *d += v;
        }
        if train(&names.up_w) {
            grads.accumulate(&names.up_w, cu.weight)?;
        }
        if train(&names.up_b) {
            grads.accumulate(&names.up_b, cu.bias)?;
        }
        if train(&names.down_w) {
            grads.accumulate(&names.down_w, cd.weight)?;
        }
        if train(&names.down_b) {
            grads.accumulate(&names.down_b, cd.bias)?;
        }
    }
    Ok(d_in)
}
