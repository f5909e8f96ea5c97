#![allow(dead_code)]

pub mod oracle;
pub mod refs;

use copeft::geometry::{BoxAA, GridGeometry};
use copeft::nn::{
    agent_max_pool, agent_max_pool_backward, conv2d, conv2d_backward, finite_diff_check, linear, linear_backward,
    relu, relu_backward, scale_shift, scale_shift_backward, CoordSample, GradMap, ParamRegistry,
};
use copeft::peft::adapter::{collaboration_adapter, collaboration_adapter_backward, AdapterFlags, ScoreActivation};
use copeft::peft::prompt::{agent_prompt, agent_prompt_backward, PromptFlags};
use copeft::peft::{Method, Variant};
use copeft::pipeline::{
    attention_fuse, attention_fuse_backward, build_registry, build_targets, decode_heads, decode_heads_backward,
    detection_loss, encode_backward, encode_with_cache, AgentInput, HeadOutputs, ModelConfig, Pipeline,
};
use copeft::{Registry, Result, TensorF};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> TensorF {
    TensorF::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for ReLU kinks.
pub fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> TensorF {
    TensorF::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { v } else { -v }
    })
}

/// Random stack whose values along every agent column are well separated,
/// so max pooling has no near-ties.
pub fn separated_stack(shape: &[usize], rng: &mut impl Rng) -> TensorF {
    let n = shape[0];
    let plane: usize = shape[1..].iter().product();
    let mut t = TensorF::zeros(shape);
    for i in 0..plane {
        let mut order: Vec<usize> = (0..n).collect();
        for k in (1..n).rev() {
            order.swap(k, rng.random_range(0..=k));
        }
        let base: f64 = rng.random_range(-1.0..1.0);
        for (rank, &a) in order.iter().enumerate() {
            t.data_mut()[a * plane + i] = base + 0.3 * rank as f64 + rng.random_range(0.0..0.1);
        }
    }
    t
}

fn registry(entries: Vec<(&str, TensorF)>) -> Registry {
    let mut r = ParamRegistry::new();
    let names: Vec<String> = entries.iter().map(|(n, _)| n.to_string()).collect();
    for (n, t) in entries {
        r.insert(n, t).unwrap();
    }
    r.set_trainable(names.iter().map(String::as_str)).unwrap();
    r
}

fn probe_loss(out: &TensorF, probe: &TensorF) -> Result<TensorF> {
    Ok(TensorF::scalar(out.mul(probe)?.sum()))
}

fn check(reg: &Registry, grads: &GradMap<f64>, loss: impl FnMut(&Registry) -> Result<TensorF>) -> f64 {
    finite_diff_check(reg, grads, EPS, CoordSample::All, loss).unwrap().max_rel_error
}

pub struct ConvCase {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
}

pub fn conv_error(case: &ConvCase, seed: u64) -> f64 {
    let mut g = rng(seed);
    let x = uniform(&[case.cin, case.h, case.w], -1.0, 1.0, &mut g);
    let reg = registry(vec![
        ("x", x),
        ("w", uniform(&[case.cout, case.cin, case.k, case.k], -1.0, 1.0, &mut g)),
        ("b", uniform(&[case.cout], -1.0, 1.0, &mut g)),
    ]);
    let f = |r: &Registry| conv2d(r.get("x")?, r.get("w")?, r.get("b")?, case.stride, case.pad);
    let out = f(&reg).unwrap();
    let probe = uniform(out.shape(), 0.5, 1.5, &mut g);
    let cg = conv2d_backward(reg.get("x").unwrap(), reg.get("w").unwrap(), case.stride, case.pad, &probe, true).unwrap();
    let mut grads = GradMap::new();
    grads.accumulate("x", cg.input.unwrap()).unwrap();
    grads.accumulate("w", cg.weight).unwrap();
    grads.accumulate("b", cg.bias).unwrap();
    check(&reg, &grads, |r| probe_loss(&f(r)?, &probe))
}

pub fn linear_error(rows: usize, cin: usize, cout: usize, seed: u64) -> f64 {
    let mut g = rng(seed);
    let reg = registry(vec![
        ("x", uniform(&[rows, cin], -1.0, 1.0, &mut g)),
        ("w", uniform(&[cout, cin], -1.0, 1.0, &mut g)),
        ("b", uniform(&[cout], -1.0, 1.0, &mut g)),
    ]);
    let probe = uniform(&[rows, cout], 0.5, 1.5, &mut g);
    let lg = linear_backward(reg.get("x").unwrap(), reg.get("w").unwrap(), &probe).unwrap();
    let mut grads = GradMap::new();
    grads.accumulate("x", lg.input).unwrap();
    grads.accumulate("w", lg.weight).unwrap();
    grads.accumulate("b", lg.bias).unwrap();
    check(&reg, &grads, |r| probe_loss(&linear(r.get("x")?, r.get("w")?, r.get("b")?)?, &probe))
}

pub fn relu_error(shape: &[usize], seed: u64) -> f64 {
    let mut g = rng(seed);
    let reg = registry(vec![("x", away_from_zero(shape, &mut g))]);
    let probe = uniform(shape, 0.5, 1.5, &mut g);
    let mut grads = GradMap::new();
    grads.accumulate("x", relu_backward(reg.get("x").unwrap(), &probe).unwrap()).unwrap();
    check(&reg, &grads, |r| probe_loss(&relu(r.get("x")?), &probe))
}

pub fn scale_shift_error(shape: &[usize], seed: u64) -> f64 {
    let mut g = rng(seed);
    let c = shape[1];
    let reg = registry(vec![
        ("x", uniform(shape, -1.0, 1.0, &mut g)),
        ("scale", uniform(&[c], -1.5, 1.5, &mut g)),
        ("shift", uniform(&[c], -1.0, 1.0, &mut g)),
    ]);
    let probe = uniform(shape, 0.5, 1.5, &mut g);
    let sg = scale_shift_backward(reg.get("x").unwrap(), reg.get("scale").unwrap(), &probe).unwrap();
    let mut grads = GradMap::new();
    grads.accumulate("x", sg.input).unwrap();
    grads.accumulate("scale", sg.scale).unwrap();
    grads.accumulate("shift", sg.shift).unwrap();
    check(&reg, &grads, |r| probe_loss(&scale_shift(r.get("x")?, r.get("scale")?, r.get("shift")?)?, &probe))
}

pub fn max_pool_error(shape: &[usize], seed: u64) -> f64 {
    let mut g = rng(seed);
    let reg = registry(vec![("x", separated_stack(shape, &mut g))]);
    let mut out_shape = shape.to_vec();
    out_shape[0] = 1;
    let probe = uniform(&out_shape, 0.5, 1.5, &mut g);
    let (_, arg) = agent_max_pool(reg.get("x").unwrap()).unwrap();
    let mut grads = GradMap::new();
    grads.accumulate("x", agent_max_pool_backward(&arg, &probe).unwrap()).unwrap();
    check(&reg, &grads, |r| probe_loss(&agent_max_pool(r.get("x")?)?.0, &probe))
}

/// Random boxes on a feature grid, with at least one centre inside.
pub fn random_boxes(geom: &GridGeometry, count: usize, rng: &mut impl Rng) -> Vec<BoxAA> {
    (0..count)
        .map(|_| {
            BoxAA::new(
                rng.random_range(geom.x_min..geom.x_max()),
                rng.random_range(geom.y_min..geom.y_max()),
                rng.random_range(0.5..3.0) * geom.cell_size,
                rng.random_range(0.5..3.0) * geom.cell_size,
            )
        })
        .collect()
}

pub fn loss_error(h: usize, w: usize, seed: u64) -> f64 {
    let mut g = rng(seed);
    let geom = GridGeometry { x_min: 0.0, y_min: 0.0, cell_size: 1.0, rows: h, cols: w };
    let nbox = g.random_range(0..=(h * w).min(4));
    let targets = build_targets::<f64>(&random_boxes(&geom, nbox, &mut g), &geom);
    // Regression residuals kept away from the smooth-L1 switch at |d| = 1.
    let mut reg_out = targets.reg.clone();
    for v in reg_out.data_mut() {
        let d: f64 = g.random_range(0.05..0.9);
        *v += if g.random_bool(0.3) { d + 1.1 } else if g.random_bool(0.5) { d } else { -d };
    }
    let reg = registry(vec![("cls", uniform(&[1, h, w], -3.0, 3.0, &mut g)), ("reg", reg_out)]);
    let heads = |r: &Registry| -> Result<HeadOutputs<f64>> {
        Ok(HeadOutputs { cls_logits: r.get("cls")?.clone(), reg: r.get("reg")?.clone() })
    };
    let (_, dh) = detection_loss(&heads(&reg).unwrap(), &targets).unwrap();
    let mut grads = GradMap::new();
    grads.accumulate("cls", dh.cls_logits).unwrap();
    grads.accumulate("reg", dh.reg).unwrap();
    check(&reg, &grads, |r| Ok(TensorF::scalar(detection_loss(&heads(r)?, &targets)?.0.total)))
}

/// Small architecture for gradient and property tests: a 32x32 observation
/// grid encoded to an 8x8 feature grid.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        in_channels: 2,
        channels: 4,
        encoder_width: 4,
        encoder_strides: vec![2, 2, 1],
        fusion_layers: 1,
        head_dim: 3,
        residual: true,
        grid: GridGeometry { x_min: -16.0, y_min: -16.0, cell_size: 1.0, rows: 32, cols: 32 },
        bottleneck_rate: 2,
    }
}

/// Replaces every registry value by a random draw of the same shape, so that
/// no gradient path is trivially zero.
pub fn randomize(reg: &mut Registry, scale: f64, rng: &mut impl Rng) {
    let names: Vec<String> = reg.names().map(str::to_string).collect();
    for n in names {
        let shape = reg.get(&n).unwrap().shape().to_vec();
        let mut t = uniform(&shape, -scale, scale, rng);
        if n.ends_with(".score.b") || n.ends_with(".scale") {
            t = t.map(|v| 1.0 + v);
        }
        reg.set_value(&n, t).unwrap();
    }
}

pub fn all_trainable(reg: &mut Registry) {
    let names: Vec<String> = reg.names().map(str::to_string).collect();
    reg.set_trainable(names.iter().map(String::as_str)).unwrap();
}

pub fn adapter_error(flags: AdapterFlags, n: usize, seed: u64) -> f64 {
    let mut g = rng(seed);
    let cfg = tiny_config();
    let (c, h, w) = (4, 3, 3);
    let mut reg: Registry = ParamRegistry::new();
    copeft::peft::adapter::init_adapter(&mut reg, "ad", c, cfg.bottleneck_rate, &flags, &mut g).unwrap();
    randomize(&mut reg, 0.5, &mut g);
    reg.insert("x", separated_stack(&[n, c, h, w], &mut g)).unwrap();
    all_trainable(&mut reg);
    let probe = uniform(&[n, c, h, w], 0.5, 1.5, &mut g);
    let (_, cache) = collaboration_adapter(reg.get("x").unwrap(), &reg, "ad", &flags).unwrap();
    let mut grads = GradMap::new();
    let dx = collaboration_adapter_backward(&cache, &probe, &reg, "ad", &flags, &mut grads).unwrap();
    grads.accumulate("x", dx).unwrap();
    check(&reg, &grads, |r| probe_loss(&collaboration_adapter(r.get("x")?, r, "ad", &flags)?.0, &probe))
}

pub fn prompt_error(flags: PromptFlags, n: usize, seed: u64) -> f64 {
    let mut g = rng(seed);
    let (c, h, w) = (4, 3, 3);
    let mut reg: Registry = ParamRegistry::new();
    copeft::peft::prompt::init_prompt(&mut reg, c, h, w, &flags, &mut g).unwrap();
    randomize(&mut reg, 0.8, &mut g);
    // Positive scales keep the pooled argmax where the separation put it.
    let scale = reg.get(copeft::peft::prompt::SCALE).unwrap().map(f64::abs);
    reg.set_value(copeft::peft::prompt::SCALE, scale).unwrap();
    reg.insert("x", separated_stack(&[n, c, h, w], &mut g)).unwrap();
    all_trainable(&mut reg);
    let probe = uniform(&[1, c, h, w], 0.5, 1.5, &mut g);
    let (_, cache) = agent_prompt(reg.get("x").unwrap(), &reg, &flags).unwrap();
    let mut grads = GradMap::new();
    let dx = agent_prompt_backward(&cache, &probe, &reg, &flags, &mut grads).unwrap();
    grads.accumulate("x", dx.unwrap_or_else(|| TensorF::zeros(&[n, c, h, w]))).unwrap();
    check(&reg, &grads, |r| probe_loss(&agent_prompt(r.get("x")?, r, &flags)?.0, &probe))
}

pub fn fusion_error(m: usize, layers: usize, residual: bool, with_adapter: bool, seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut cfg = tiny_config();
    cfg.fusion_layers = layers;
    cfg.residual = residual;
    let method = if with_adapter { Method::copeft(Variant::D) } else { Method::None };
    let mut reg: Registry = build_registry(&cfg, &method, &mut g).unwrap();
    randomize(&mut reg, 0.8, &mut g);
    let (c, h, w) = (cfg.channels, 3, 2);
    // The tiny config's feature grid is 8x8; fusion itself is shape-agnostic.
    reg.insert("x", separated_stack(&[m, c, h, w], &mut g)).unwrap();
    let keep: Vec<String> = reg
        .names()
        .filter(|n| *n == "x" || n.starts_with("fusion"))
        .map(str::to_string)
        .collect();
    reg.set_trainable(keep.iter().map(String::as_str)).unwrap();
    let flags = AdapterFlags::FULL;
    let la = with_adapter.then_some(&flags);
    let probe = uniform(&[c, h, w], 0.5, 1.5, &mut g);
    let (_, cache) = attention_fuse(reg.get("x").unwrap(), &reg, &cfg, la).unwrap();
    let mut grads = GradMap::new();
    let dx = attention_fuse_backward(&cache, &probe, &reg, &cfg, la, &mut grads).unwrap();
    grads.accumulate("x", dx).unwrap();
    check(&reg, &grads, |r| probe_loss(&attention_fuse(r.get("x")?, r, &cfg, la)?.0, &probe))
}

pub fn encoder_error(seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut cfg = tiny_config();
    cfg.grid.rows = 8;
    cfg.grid.cols = 12;
    let mut reg: Registry = build_registry(&cfg, &Method::None, &mut g).unwrap();
    randomize(&mut reg, 0.8, &mut g);
    let obs = uniform(&[cfg.in_channels, 8, 12], 0.0, 1.0, &mut g);
    let keep: Vec<String> = reg.names().filter(|n| n.starts_with("encoder")).map(str::to_string).collect();
    reg.set_trainable(keep.iter().map(String::as_str)).unwrap();
    let (f, cache) = encode_with_cache(&obs, &reg, &cfg).unwrap();
    let probe = uniform(f.shape(), 0.5, 1.5, &mut g);
    let mut grads = GradMap::new();
    encode_backward(&cache, &probe, &reg, &cfg, &mut grads).unwrap();
    check(&reg, &grads, |r| probe_loss(&copeft::pipeline::encode(&obs, r, &cfg)?, &probe))
}

pub fn heads_error(seed: u64) -> f64 {
    let mut g = rng(seed);
    let cfg = tiny_config();
    let mut reg: Registry = build_registry(&cfg, &Method::None, &mut g).unwrap();
    randomize(&mut reg, 0.8, &mut g);
    reg.insert("x", uniform(&[cfg.channels, 3, 4], -1.0, 1.0, &mut g)).unwrap();
    let keep: Vec<String> = reg.names().filter(|n| *n == "x" || n.starts_with("decoder")).map(str::to_string).collect();
    reg.set_trainable(keep.iter().map(String::as_str)).unwrap();
    let pc = uniform(&[1, 3, 4], 0.5, 1.5, &mut g);
    let pr = uniform(&[4, 3, 4], 0.5, 1.5, &mut g);
    let mut grads = GradMap::new();
    let probe = HeadOutputs { cls_logits: pc.clone(), reg: pr.clone() };
    let dx = decode_heads_backward(reg.get("x").unwrap(), &reg, &probe, &mut grads, true).unwrap().unwrap();
    grads.accumulate("x", dx).unwrap();
    check(&reg, &grads, |r| {
        let out = decode_heads(r.get("x")?, r)?;
        Ok(TensorF::scalar(out.cls_logits.mul(&pc)?.sum() + out.reg.mul(&pr)?.sum()))
    })
}

/// A generic point for an end-to-end check.
///
/// Weights feeding ReLUs, values and heads are positive, so every unit is
/// active and per-cell gradient contributions share a sign instead of
/// cancelling; query/key weights and shifts keep small random signs so the
/// softmax stays far from saturation.
pub fn condition_for_gradcheck(reg: &mut Registry, rng: &mut impl Rng) {
    let names: Vec<String> = reg.names().map(str::to_string).collect();
    for n in names {
        let shape = reg.get(&n).unwrap().shape().to_vec();
        let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
        let pos = 2.0 / fan_in as f64;
        let t = if n == copeft::peft::prompt::TOKEN {
            uniform(&shape, 0.0, 2.0, rng)
        } else if n.starts_with("decoder.") && n.ends_with(".w") {
            uniform(&shape, 0.0, 0.3 * pos, rng)
        } else if n.ends_with(".q.w") || n.ends_with(".k.w") {
            uniform(&shape, -0.3, 0.3, rng)
        } else if n.ends_with(".score.b") || n.ends_with(".scale") {
            uniform(&shape, 0.8, 1.2, rng)
        } else if n.ends_with(".shift") || n.ends_with(".q.b") {
            uniform(&shape, -0.1, 0.1, rng)
        } else if n.ends_with(".b") {
            uniform(&shape, 0.05, 0.15, rng)
        } else if n.ends_with(".up.w") || n.ends_with(".score.w") {
            uniform(&shape, 0.0, 0.5 * pos, rng)
        } else {
            uniform(&shape, 0.0, pos, rng)
        };
        reg.set_value(&n, t).unwrap();
    }
    if reg.contains(copeft::pipeline::heads::CLS_B) {
        reg.set_value(copeft::pipeline::heads::CLS_B, TensorF::full(&[1], -1.0)).unwrap();
    }
    all_trainable(reg);
}

/// End-to-end detection loss on a 2-agent instance of [`tiny_config`] with
/// every parameter of `method` trainable.
pub fn end_to_end_error(method: &Method, seed: u64) -> (f64, usize) {
    let mut g = rng(seed);
    let cfg = tiny_config();
    let mut reg: Registry = build_registry(&cfg, method, &mut g).unwrap();
    condition_for_gradcheck(&mut reg, &mut g);
    all_trainable(&mut reg);
    // Agents observe at different intensities so attention has distinct
    // values to weigh.
    let obs: Vec<TensorF> = (0..2).map(|a| uniform(&[cfg.in_channels, 32, 32], 0.0, 1.0 + 3.0 * a as f64, &mut g)).collect();
    let fg = cfg.feature_grid();
    // Many positives keep the class-balancing weight, and with it the loss
    // magnitude, close to one.
    let targets = build_targets::<f64>(&random_boxes(&fg, 24, &mut g), &fg);
    let pipe = Pipeline::new(&cfg, method).unwrap();
    let (_, grads) = pipe.loss_and_grads(&reg, AgentInput::Observations(&obs), &targets).unwrap();
    let report = finite_diff_check(&reg, &grads, EPS, CoordSample::All, |r| {
        let (heads, _) = pipe.forward(r, AgentInput::Observations(&obs))?;
        Ok(TensorF::scalar(detection_loss(&heads, &targets)?.0.total))
    })
    .unwrap();
    (report.max_rel_error, report.coords_checked)
}

pub fn adapter_flag_grid() -> Vec<AdapterFlags> {
    let mut out = Vec::new();
    for conv_branch in [true, false] {
        for collaborative_filter in [true, false] {
            for score_generator in [true, false] {
                for score_activation in [ScoreActivation::Identity, ScoreActivation::Sigmoid] {
                    out.push(AdapterFlags { conv_branch, collaborative_filter, score_generator, score_activation });
                }
            }
        }
    }
    out
}

pub fn prompt_flag_grid() -> Vec<PromptFlags> {
    let mut out = Vec::new();
    for instance_aware in [true, false] {
        for collaborative_filter in [true, false] {
            out.push(PromptFlags { instance_aware, collaborative_filter });
        }
    }
    out
}
