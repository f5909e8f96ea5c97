//! The collaborative detection pipeline.
//!
//! ```text
//! F_i   = encode(O_i)                      every agent
//! F_hat = adapter1(F),  P = prompt(F_hat)  optional
//! H     = fuse([F_hat; P])                 ego row of the fused stack
//! H_hat = adapter2(H)                      optional
//! Y     = heads(H_hat)
//! ```
//!
//! With no insertions the pipeline is the plain intermediate-collaboration
//! detector, evaluated by exactly the same code path as the base model.

pub mod config;
pub mod encoder;
pub mod fusion;
pub mod heads;
pub mod layout;
pub mod loss;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{scale_shift, scale_shift_backward, GradMap, ParamRegistry};
use crate::peft::adapter::{collaboration_adapter, collaboration_adapter_backward, AdapterCache};
use crate::peft::method::{ForwardPlan, Method, POST_FUSION_ADAPTER, PRE_FUSION_ADAPTER, SSF_POST, SSF_PRE};
use crate::peft::prompt::{agent_prompt, agent_prompt_backward, PromptCache};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use config::ModelConfig;
pub use encoder::{encode, encode_backward, encode_with_cache, EncoderCache};
pub use fusion::{attention_fuse, attention_fuse_backward, FusionCache};
pub use heads::{decode_heads, decode_heads_backward, HeadOutputs};
pub use loss::{build_targets, detection_loss, DetectionTargets, LossParts};

/// Registers freshly initialised base-model parameters.
///
/// Convolutions are He-uniform with zero bias; attention projections are
/// uniform in `±1/sqrt(C)`; head weights are small with an objectness prior
/// bias of -2.
pub fn init_base_params<T: Scalar, R: Rng + ?Sized>(
    reg: &mut ParamRegistry<T>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let mut uniform = |shape: &[usize], bound: f64| Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)));
    for (i, (cin, cout)) in encoder::layer_channels(cfg).into_iter().enumerate() {
        let bound = (6.0 / (cin * 9) as f64).sqrt();
        reg.insert(encoder::weight_name(i), uniform(&[cout, cin, 3, 3], bound))?;
        reg.insert(encoder::bias_name(i), Tensor::zeros(&[cout]))?;
    }
    let c = cfg.channels;
    let bound = 1.0 / (c as f64).sqrt();
    for l in 0..cfg.fusion_layers {
        for (proj, width) in [("q", cfg.head_dim), ("k", cfg.head_dim), ("v", c)] {
            let (wn, bn) = fusion::proj_names(l, proj);
            reg.insert(wn, uniform(&[width, c], bound))?;
            if let Some(bn) = bn {
                reg.insert(bn, Tensor::zeros(&[width]))?;
            }
        }
    }
    reg.insert(heads::CLS_W, uniform(&[1, c, 1, 1], 0.01))?;
    reg.insert(heads::CLS_B, Tensor::full(&[1], T::of(-2.0)))?;
    reg.insert(heads::REG_W, uniform(&[4, c, 1, 1], 0.01))?;
    reg.insert(heads::REG_B, Tensor::zeros(&[4]))?;
    Ok(())
}

/// Builds a registry holding the base model plus the parameters of `method`.
pub fn build_registry<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, method: &Method, rng: &mut R) -> Result<ParamRegistry<T>> {
    let mut reg = ParamRegistry::new();
    init_base_params(&mut reg, cfg, rng)?;
    crate::peft::init_method_params(&mut reg, cfg, method, rng)?;
    Ok(reg)
}

/// Per-agent input to the pipeline.
#[derive(Clone, Copy, Debug)]
pub enum AgentInput<'a, T> {
    /// Raw `[C_in, H0, W0]` observations, agent 0 is the ego.
    Observations(&'a [Tensor<T>]),
    /// Precomputed encoder output `[N, C, H, W]` (frozen-encoder fast path).
    Features(&'a Tensor<T>),
}

/// Values retained for [`Pipeline::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    encoders: Vec<EncoderCache<T>>,
    features: Tensor<T>,
    adapter1: Option<AdapterCache<T>>,
    adapted: Tensor<T>,
    prompt: Option<PromptCache<T>>,
    fusion_input_rows: usize,
    fusion: FusionCache<T>,
    fused: Tensor<T>,
    adapter2: Option<AdapterCache<T>>,
    head_in: Tensor<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Encoder output `F` (`[N, C, H, W]`).
    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    /// Number of rows entering fusion (`N`, or `N + 1` with a prompt).
    pub fn fusion_rows(&self) -> usize {
        self.fusion_input_rows
    }

    /// Fusion output before post-fusion adaptation (`[C, H, W]`).
    pub fn fused(&self) -> &Tensor<T> {
        &self.fused
    }

    /// Feature fed to the heads (`[C, H, W]`).
    pub fn head_input(&self) -> &Tensor<T> {
        &self.head_in
    }
}

/// Coarse position of a parameter in the forward graph.
pub(crate) fn stage_of(name: &str) -> usize {
    if name.starts_with("encoder.") {
        0
    } else if name.starts_with(PRE_FUSION_ADAPTER) || name.starts_with(SSF_PRE) || name.starts_with("prompt.") {
        1
    } else if name.starts_with("fusion") {
        2
    } else if name.starts_with(POST_FUSION_ADAPTER) || name.starts_with(SSF_POST) {
        3
    } else if name.starts_with("decoder.") {
        4
    } else {
        0
    }
}

/// The fixed architecture together with an insertion plan.
#[derive(Clone, Copy, Debug)]
pub struct Pipeline<'a> {
    config: &'a ModelConfig,
    plan: ForwardPlan,
}

impl<'a> Pipeline<'a> {
    pub fn new(config: &'a ModelConfig, method: &Method) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, plan: method.forward_plan() })
    }

    pub fn with_plan(config: &'a ModelConfig, plan: ForwardPlan) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, plan })
    }

    pub fn base(config: &'a ModelConfig) -> Result<Self> {
        Self::with_plan(config, ForwardPlan::base())
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    pub fn plan(&self) -> &ForwardPlan {
        &self.plan
    }

    /// Encodes every agent and stacks the features as `[N, C, H, W]`.
    pub fn encode_agents<T: Scalar>(
        &self,
        reg: &ParamRegistry<T>,
        obs: &[Tensor<T>],
    ) -> Result<(Tensor<T>, Vec<EncoderCache<T>>)> {
        if obs.is_empty() {
            return Err(Error::EmptyStack);
        }
        let mut feats = Vec::with_capacity(obs.len());
        let mut caches = Vec::with_capacity(obs.len());
        for o in obs {
            let (f, c) = encode_with_cache(o, reg, self.config)?;
            feats.push(f);
            caches.push(c);
        }
        Ok((Tensor::stack(&feats)?, caches))
    }

    pub fn forward<T: Scalar>(
        &self,
        reg: &ParamRegistry<T>,
        input: AgentInput<'_, T>,
    ) -> Result<(HeadOutputs<T>, ForwardCache<T>)> {
        let (features, encoders) = match input {
            AgentInput::Observations(obs) => self.encode_agents(reg, obs)?,
            AgentInput::Features(f) => {
                let fg = self.config.feature_grid();
                f.expect_rank(4, "pipeline_forward")?;
                if f.shape()[1..] != [self.config.channels, fg.rows, fg.cols] {
                    return Err(Error::shape("pipeline_forward", format!("features {:?}", f.shape())));
                }
                (f.clone(), Vec::new())
            }
        };
        let v = &self.plan.variant;
        let c = self.config.channels;
        let fg = self.config.feature_grid();
        let (h, w) = (fg.rows, fg.cols);

        let mut x = features.clone();
        if self.plan.ssf {
            x = scale_shift(&x, reg.get(&format!("{SSF_PRE}.scale"))?, reg.get(&format!("{SSF_PRE}.shift"))?)?;
        }
        let mut adapter1 = None;
        if v.sites.pre_fusion {
            let (out, cache) = collaboration_adapter(&x, reg, PRE_FUSION_ADAPTER, &v.adapter)?;
            x = out;
            adapter1 = Some(cache);
        }
        let adapted = x;

        let mut prompt = None;
        let fusion_input = if v.prompt_enabled {
            let (p, cache) = agent_prompt(&adapted, reg, &v.prompt)?;
            prompt = Some(cache);
            Tensor::concat_rows(&[&adapted, &p])?
        } else {
            adapted.clone()
        };
        let fusion_input_rows = fusion_input.shape()[0];
        let layer_adapter = v.sites.per_fusion_layer.then_some(&v.adapter);
        let (fused, fusion) = attention_fuse(&fusion_input, reg, self.config, layer_adapter)?;

        let mut y = fused.clone().reshape(&[1, c, h, w])?;
        if self.plan.ssf {
            y = scale_shift(&y, reg.get(&format!("{SSF_POST}.scale"))?, reg.get(&format!("{SSF_POST}.shift"))?)?;
        }
        let mut adapter2 = None;
        if v.sites.post_fusion {
            let (out, cache) = collaboration_adapter(&y, reg, POST_FUSION_ADAPTER, &v.adapter)?;
            y = out;
            adapter2 = Some(cache);
        }
        let head_in = y.reshape(&[c, h, w])?;
        let heads = decode_heads(&head_in, reg)?;
        let cache = ForwardCache {
            encoders,
            features,
            adapter1,
            adapted,
            prompt,
            fusion_input_rows,
            fusion,
            fused,
            adapter2,
            head_in,
        };
        Ok((heads, cache))
    }

    /// Accumulates gradients for every trainable parameter of `reg`.
    ///
    /// Backpropagation stops at the earliest stage that holds a trainable
    /// parameter, so a frozen encoder is never differentiated.
    pub fn backward<T: Scalar>(
        &self,
        reg: &ParamRegistry<T>,
        cache: &ForwardCache<T>,
        grad_heads: &HeadOutputs<T>,
        grads: &mut GradMap<T>,
    ) -> Result<()> {
        let Some(min_stage) = reg.trainable_names().map(stage_of).min() else {
            return Ok(());
        };
        let v = &self.plan.variant;
        let c = self.config.channels;
        let fg = self.config.feature_grid();
        let (h, w) = (fg.rows, fg.cols);

        let d_head_in = decode_heads_backward(&cache.head_in, reg, grad_heads, grads, min_stage < 4)?;
        let Some(d_head_in) = d_head_in else { return Ok(()) };

        let mut dy = d_head_in.reshape(&[1, c, h, w])?;
        if let Some(ac) = &cache.adapter2 {
            dy = collaboration_adapter_backward(ac, &dy, reg, POST_FUSION_ADAPTER, &v.adapter, grads)?;
        }
        if self.plan.ssf {
            let sg = scale_shift_backward(&cache.fused.clone().reshape(&[1, c, h, w])?, reg.get(&format!("{SSF_POST}.scale"))?, &dy)?;
            accumulate_ssf(reg, grads, SSF_POST, sg.scale, sg.shift)?;
            dy = sg.input;
        }
        if min_stage >= 3 {
            return Ok(());
        }

        let layer_adapter = v.sites.per_fusion_layer.then_some(&v.adapter);
        let d_fusion_in =
            attention_fuse_backward(&cache.fusion, &dy.reshape(&[c, h, w])?, reg, self.config, layer_adapter, grads)?;
        if min_stage >= 2 {
            return Ok(());
        }

        let n = cache.adapted.shape()[0];
        let row = c * h * w;
        let mut dx = Tensor::new(vec![n, c, h, w], d_fusion_in.data()[..n * row].to_vec())?;
        if let Some(pc) = &cache.prompt {
            let dp = Tensor::new(vec![1, c, h, w], d_fusion_in.data()[n * row..].to_vec())?;
            if let Some(d) = agent_prompt_backward(pc, &dp, reg, &v.prompt, grads)? {
                dx.add_assign(&d)?;
            }
        }
        if let Some(ac) = &cache.adapter1 {
            dx = collaboration_adapter_backward(ac, &dx, reg, PRE_FUSION_ADAPTER, &v.adapter, grads)?;
        }
        if self.plan.ssf {
            let sg = scale_shift_backward(&cache.features, reg.get(&format!("{SSF_PRE}.scale"))?, &dx)?;
            accumulate_ssf(reg, grads, SSF_PRE, sg.scale, sg.shift)?;
            dx = sg.input;
        }
        if min_stage >= 1 {
            return Ok(());
        }

        if cache.encoders.len() != n {
            return Err(Error::Config("encoder is trainable but the forward pass used precomputed features".into()));
        }
        for (a, ec) in cache.encoders.iter().enumerate() {
            let g = dx.row(a)?.reshape(&[c, h, w])?;
            encode_backward(ec, &g, reg, self.config, grads)?;
        }
        Ok(())
    }

    /// Loss and gradients of every trainable parameter for one sample.
    pub fn loss_and_grads<T: Scalar>(
        &self,
        reg: &ParamRegistry<T>,
        input: AgentInput<'_, T>,
        targets: &DetectionTargets<T>,
    ) -> Result<(LossParts<T>, GradMap<T>)> {
        let (heads, cache) = self.forward(reg, input)?;
        let (loss, dheads) = detection_loss(&heads, targets)?;
        let mut grads = GradMap::new();
        self.backward(reg, &cache, &dheads, &mut grads)?;
        Ok((loss, grads))
    }
}

fn accumulate_ssf<T: Scalar>(
    reg: &ParamRegistry<T>,
    grads: &mut GradMap<T>,
    prefix: &str,
    scale: Tensor<T>,
    shift: Tensor<T>,
) -> Result<()> {
    let (sn, bn) = (format!("{prefix}.scale"), format!("{prefix}.shift"));
    if reg.is_trainable(&sn) {
        grads.accumulate(&sn, scale)?;
    }
    if reg.is_trainable(&bn) {
        grads.accumulate(&bn, shift)?;
    }
    Ok(())
}
