//! Adaptation methods, insertion plans, freeze masks and parameter accounting.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamRegistry;
use crate::peft::adapter::{adapter_param_shapes, init_adapter, AdapterFlags};
use crate::peft::prompt::{init_prompt, prompt_param_shapes, PromptFlags};
use crate::pipeline::config::ModelConfig;
use crate::pipeline::fusion::layer_adapter_prefix;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PRE_FUSION_ADAPTER: &str = "adapter1";
pub const POST_FUSION_ADAPTER: &str = "adapter2";
pub const SSF_PRE: &str = "ssf1";
pub const SSF_POST: &str = "ssf2";
pub const DECODER_PREFIX: &str = "decoder.";

/// Where collaboration adapters are inserted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertionSites {
    pub pre_fusion: bool,
    pub post_fusion: bool,
    pub per_fusion_layer: bool,
}

/// Full description of how the base pipeline is augmented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantPlan {
    pub sites: InsertionSites,
    pub prompt_enabled: bool,
    pub adapter: AdapterFlags,
    pub prompt: PromptFlags,
}

impl VariantPlan {
    /// No insertions: the plain intermediate-collaboration pipeline.
    pub fn base() -> Self {
        Self {
            sites: InsertionSites::default(),
            prompt_enabled: false,
            adapter: AdapterFlags::FULL,
            prompt: PromptFlags::default(),
        }
    }

    pub fn is_base(&self) -> bool {
        self.sites == InsertionSites::default() && !self.prompt_enabled
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Adapters before and after fusion, plus the prompt.
    Standard,
    /// Pre-fusion adapter and prompt only.
    S,
    /// Standard plus one adapter after every fusion layer.
    D,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standard" => Ok(Variant::Standard),
            "s" => Ok(Variant::S),
            "d" => Ok(Variant::D),
            _ => Err(Error::UnknownVariant(s.to_string())),
        }
    }
}

pub fn variant_plan(variant: Variant) -> VariantPlan {
    let sites = match variant {
        Variant::Standard => InsertionSites { pre_fusion: true, post_fusion: true, per_fusion_layer: false },
        Variant::S => InsertionSites { pre_fusion: true, post_fusion: false, per_fusion_layer: false },
        Variant::D => InsertionSites { pre_fusion: true, post_fusion: true, per_fusion_layer: true },
    };
    VariantPlan { sites, prompt_enabled: true, adapter: AdapterFlags::FULL, prompt: PromptFlags::default() }
}

/// Adaptation method applied to a trained base model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Direct deployment, no training.
    None,
    /// Fresh initialisation, every parameter trained on the budgeted data.
    Scratch,
    DecoderOnly,
    /// Per-channel scale/shift after the encoder and after fusion.
    Ssf,
    /// Plain bottleneck adapters before and after fusion.
    Adapter,
    Copeft { variant: Variant, plan: VariantPlan },
}

/// What the pipeline executes for a method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardPlan {
    pub ssf: bool,
    pub variant: VariantPlan,
}

impl ForwardPlan {
    pub fn base() -> Self {
        Self { ssf: false, variant: VariantPlan::base() }
    }
}

const MODIFIERS: [&str; 8] =
    ["no_prompt", "no_adapter", "no_conv", "no_colf", "no_scog", "no_inst", "no_prompt_colf", "sigmoid_score"];

impl Method {
    pub fn copeft(variant: Variant) -> Self {
        Method::Copeft { variant, plan: variant_plan(variant) }
    }

    pub fn forward_plan(&self) -> ForwardPlan {
        match self {
            Method::None | Method::Scratch | Method::DecoderOnly => ForwardPlan::base(),
            Method::Ssf => ForwardPlan { ssf: true, variant: VariantPlan::base() },
            Method::Adapter => ForwardPlan {
                ssf: false,
                variant: VariantPlan {
                    sites: InsertionSites { pre_fusion: true, post_fusion: true, per_fusion_layer: false },
                    prompt_enabled: false,
                    adapter: AdapterFlags::PLAIN,
                    prompt: PromptFlags::default(),
                },
            },
            Method::Copeft { plan, .. } => ForwardPlan { ssf: false, variant: *plan },
        }
    }

    /// Whether adaptation runs the optimizer at all.
    pub fn trains(&self) -> bool {
        !matches!(self, Method::None)
    }

    /// Names and shapes of the parameters this method adds to a base model.
    pub fn extra_param_shapes(&self, cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
        let plan = self.forward_plan();
        let (c, r) = (cfg.channels, cfg.bottleneck_rate);
        let fg = cfg.feature_grid();
        let mut out = Vec::new();
        if plan.ssf {
            for p in [SSF_PRE, SSF_POST] {
                out.push((format!("{p}.scale"), vec![c]));
                out.push((format!("{p}.shift"), vec![c]));
            }
        }
        let v = plan.variant;
        if v.sites.pre_fusion {
            out.extend(adapter_param_shapes(PRE_FUSION_ADAPTER, c, r, &v.adapter)?);
        }
        if v.prompt_enabled {
            out.extend(prompt_param_shapes(c, fg.rows, fg.cols, &v.prompt));
        }
        if v.sites.per_fusion_layer {
            for l in 0..cfg.fusion_layers {
                out.extend(adapter_param_shapes(&layer_adapter_prefix(l), c, r, &v.adapter)?);
            }
        }
        if v.sites.post_fusion {
            out.extend(adapter_param_shapes(POST_FUSION_ADAPTER, c, r, &v.adapter)?);
        }
        Ok(out)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split('+');
        let head = parts.next().unwrap_or_default().to_ascii_lowercase().replace('-', "_");
        let mut method = match head.as_str() {
            "none" => Method::None,
            "scratch" => Method::Scratch,
            "decoder_only" | "decoder" => Method::DecoderOnly,
            "ssf" => Method::Ssf,
            "adapter" => Method::Adapter,
            "copeft" => Method::copeft(Variant::Standard),
            "copeft_s" => Method::copeft(Variant::S),
            "copeft_d" => Method::copeft(Variant::D),
            _ => return Err(Error::UnknownMethod(s.to_string())),
        };
        for m in parts {
            let Method::Copeft { plan, .. } = &mut method else {
                return Err(Error::UnknownMethod(s.to_string()));
            };
            match m {
                "no_prompt" => plan.prompt_enabled = false,
                "no_adapter" => plan.sites = InsertionSites::default(),
                "no_conv" => plan.adapter.conv_branch = false,
                "no_colf" => plan.adapter.collaborative_filter = false,
                "no_scog" => plan.adapter.score_generator = false,
                "no_inst" => plan.prompt.instance_aware = false,
                "no_prompt_colf" => plan.prompt.collaborative_filter = false,
                "sigmoid_score" => plan.adapter.score_activation = crate::peft::ScoreActivation::Sigmoid,
                _ => return Err(Error::UnknownMethod(s.to_string())),
            }
        }
        Ok(method)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::None => write!(f, "none"),
            Method::Scratch => write!(f, "scratch"),
            Method::DecoderOnly => write!(f, "decoder_only"),
            Method::Ssf => write!(f, "ssf"),
            Method::Adapter => write!(f, "adapter"),
            Method::Copeft { variant, plan } => {
                let base = variant_plan(*variant);
                f.write_str(match variant {
                    Variant::Standard => "copeft",
                    Variant::S => "copeft_s",
                    Variant::D => "copeft_d",
                })?;
                let on = [
                    base.prompt_enabled && !plan.prompt_enabled,
                    base.sites != InsertionSites::default() && plan.sites == InsertionSites::default(),
                    !plan.adapter.conv_branch,
                    !plan.adapter.collaborative_filter,
                    !plan.adapter.score_generator,
                    !plan.prompt.instance_aware,
                    !plan.prompt.collaborative_filter,
                    plan.adapter.score_activation == crate::peft::ScoreActivation::Sigmoid,
                ];
                for (name, set) in MODIFIERS.iter().zip(on) {
                    if set {
                        write!(f, "+{name}")?;
                    }
                }
                Ok(())
            }
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Adds the parameters `method` needs on top of a base registry.
pub fn init_method_params<T: Scalar, R: Rng + ?Sized>(
    reg: &mut ParamRegistry<T>,
    cfg: &ModelConfig,
    method: &Method,
    rng: &mut R,
) -> Result<()> {
    let plan = method.forward_plan();
    let (c, r) = (cfg.channels, cfg.bottleneck_rate);
    if plan.ssf {
        for p in [SSF_PRE, SSF_POST] {
            reg.insert(format!("{p}.scale"), Tensor::ones(&[c]))?;
            reg.insert(format!("{p}.shift"), Tensor::zeros(&[c]))?;
        }
    }
    let v = plan.variant;
    if v.sites.pre_fusion {
        init_adapter(reg, PRE_FUSION_ADAPTER, c, r, &v.adapter, rng)?;
    }
    if v.prompt_enabled {
        let fg = cfg.feature_grid();
        init_prompt(reg, c, fg.rows, fg.cols, &v.prompt, rng)?;
    }
    if v.sites.per_fusion_layer {
        for l in 0..cfg.fusion_layers {
            init_adapter(reg, &layer_adapter_prefix(l), c, r, &v.adapter, rng)?;
        }
    }
    if v.sites.post_fusion {
        init_adapter(reg, POST_FUSION_ADAPTER, c, r, &v.adapter, rng)?;
    }
    Ok(())
}

/// Names updated during adaptation, in registry order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    names: Vec<String>,
}

impl FreezeMask {
    pub fn from_names(names: Vec<String>) -> Self {
        Self { names }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    /// Sets the registry's trainable flags to exactly this mask.
    pub fn apply<T: Scalar>(&self, reg: &mut ParamRegistry<T>) -> Result<()> {
        reg.set_trainable(self.names.iter().map(String::as_str))
    }
}

pub fn build_freeze_mask<T: Scalar>(reg: &ParamRegistry<T>, method: &Method, cfg: &ModelConfig) -> Result<FreezeMask> {
    let decoder = || reg.names().filter(|n| n.starts_with(DECODER_PREFIX)).map(str::to_string);
    let names: Vec<String> = match method {
        Method::None => Vec::new(),
        Method::Scratch => reg.names().map(str::to_string).collect(),
        Method::DecoderOnly => decoder().collect(),
        Method::Ssf | Method::Adapter | Method::Copeft { .. } => {
            let extra: Vec<String> = method.extra_param_shapes(cfg)?.into_iter().map(|(n, _)| n).collect();
            for n in &extra {
                if !reg.contains(n) {
                    return Err(Error::UnknownParam(n.clone()));
                }
            }
            let mut names: Vec<String> = reg
                .names()
                .filter(|n| n.starts_with(DECODER_PREFIX) || extra.iter().any(|e| e == n))
                .map(str::to_string)
                .collect();
            names.dedup();
            names
        }
    };
    if names.is_empty() && !matches!(method, Method::None) {
        return Err(Error::Config(format!("method `{method}` selects no parameters in this registry")));
    }
    Ok(FreezeMask { names })
}

/// Exact element counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
    pub ratio: f64,
}

pub fn count_params<T: Scalar>(reg: &ParamRegistry<T>, mask: &FreezeMask) -> Result<ParamCount> {
    let total = reg.total_elements();
    let mut trainable = 0;
    for n in mask.names() {
        trainable += reg.get(n)?.numel();
    }
    let ratio = if total == 0 { 0.0 } else { trainable as f64 / total as f64 };
    Ok(ParamCount { trainable, total, ratio })
}
