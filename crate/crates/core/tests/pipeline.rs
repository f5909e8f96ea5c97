mod common;

use common::oracle::{self, flat_planes};
use common::*;
use copeft::nn::ParamRegistry;
use copeft::peft::{Method, Variant};
use copeft::pipeline::heads::{CLS_B, CLS_W, REG_B, REG_W};
use copeft::pipeline::{attention_fuse, build_registry, decode_heads, encode, AgentInput, ModelConfig, Pipeline};
use copeft::{Registry, TensorF};
use proptest::prelude::*;

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

fn base_registry(cfg: &ModelConfig, seed: u64) -> Registry {
    build_registry(cfg, &Method::None, &mut rng(seed)).unwrap()
}

fn obs(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<TensorF> {
    let mut g = rng(seed);
    (0..n).map(|_| uniform(&[cfg.in_channels, cfg.grid.rows, cfg.grid.cols], 0.0, 2.0, &mut g)).collect()
}

#[test]
fn encoder_zero_input_zero_bias_gives_zero() {
    let cfg = tiny_config();
    let reg = base_registry(&cfg, 1);
    let f = encode(&TensorF::zeros(&[2, 32, 32]), &reg, &cfg).unwrap();
    assert!(f.data().iter().all(|&v| v == 0.0));
}

#[test]
fn encoder_quarter_resolution() {
    let mut cfg = tiny_config();
    cfg.grid.rows = 64;
    cfg.grid.cols = 32;
    let reg = base_registry(&cfg, 2);
    let f = encode(&TensorF::ones(&[2, 64, 32]), &reg, &cfg).unwrap();
    assert_eq!(f.shape(), &[cfg.channels, 16, 8]);
}

#[test]
fn encoder_matches_composed_conv_relu_oracle() {
    let cfg = tiny_config();
    let mut reg = base_registry(&cfg, 3);
    randomize(&mut reg, 0.5, &mut rng(4));
    let x = &obs(&cfg, 1, 5)[0];
    let got = encode(x, &reg, &cfg).unwrap();
    let mut planes = oracle::to_planes(x);
    for (i, &s) in cfg.encoder_strides.iter().enumerate() {
        let w = reg.get(&format!("encoder.conv{i}.w")).unwrap();
        let b = reg.get(&format!("encoder.conv{i}.b")).unwrap();
        planes = oracle::relu(&oracle::conv(&planes, w, b, s, 1));
    }
    assert_close(got.data(), &flat_planes(&planes), 1e-12);
}

fn fusion_setup(m: usize, seed: u64) -> (ModelConfig, Registry, TensorF) {
    let cfg = tiny_config();
    let mut reg = base_registry(&cfg, seed);
    randomize(&mut reg, 0.8, &mut rng(seed + 1));
    let stack = uniform(&[m, cfg.channels, 3, 2], -1.0, 1.0, &mut rng(seed + 2));
    (cfg, reg, stack)
}

#[test]
fn fusion_single_agent_identity_value_is_ego() {
    let (mut cfg, mut reg, stack) = fusion_setup(1, 10);
    cfg.residual = false;
    let c = cfg.channels;
    reg.set_value("fusion.layer0.v.w", TensorF::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 }))
        .unwrap();
    reg.set_value("fusion.layer0.v.b", TensorF::zeros(&[c])).unwrap();
    let (out, _) = attention_fuse(&stack, &reg, &cfg, None).unwrap();
    assert_eq!(out.data(), stack.data());
}

#[test]
fn fusion_equal_rows_match_single_agent() {
    let (cfg, reg, stack) = fusion_setup(1, 20);
    let doubled = TensorF::concat_rows(&[&stack, &stack]).unwrap();
    let (one, _) = attention_fuse(&stack, &reg, &cfg, None).unwrap();
    let (two, _) = attention_fuse(&doubled, &reg, &cfg, None).unwrap();
    assert_close(one.data(), two.data(), 1e-12);
}

#[test]
fn fusion_matches_per_cell_softmax_oracle() {
    for seed in 0..5 {
        let (cfg, reg, stack) = fusion_setup(3, 30 + seed);
        let (got, _) = attention_fuse(&stack, &reg, &cfg, None).unwrap();
        let g = |n: &str| reg.get(n).unwrap();
        let rows = oracle::attention_layer(
            &oracle::to_stack(&stack),
            g("fusion.layer0.q.w"),
            g("fusion.layer0.q.b"),
            g("fusion.layer0.k.w"),
            g("fusion.layer0.v.w"),
            g("fusion.layer0.v.b"),
            true,
        );
        assert_close(got.data(), &flat_planes(&rows[0]), 1e-12);
    }
}

#[test]
fn fusion_two_layers_match_oracle_applied_twice() {
    let (mut cfg, _, stack) = fusion_setup(3, 40);
    cfg.fusion_layers = 2;
    let mut reg = base_registry(&cfg, 41);
    randomize(&mut reg, 0.8, &mut rng(42));
    let (got, _) = attention_fuse(&stack, &reg, &cfg, None).unwrap();
    let mut s = oracle::to_stack(&stack);
    for l in 0..2 {
        let g = |p: &str| reg.get(&format!("fusion.layer{l}.{p}")).unwrap();
        s = oracle::attention_layer(&s, g("q.w"), g("q.b"), g("k.w"), g("v.w"), g("v.b"), true);
    }
    assert_close(got.data(), &flat_planes(&s[0]), 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fusion_invariant_to_collaborator_order(m in 2usize..=5, seed in any::<u64>(), perm_seed in any::<u64>()) {
        let (cfg, reg, stack) = fusion_setup(m, seed % 1000);
        let mut order: Vec<usize> = (1..m).collect();
        let mut g = rng(perm_seed);
        for k in (1..order.len()).rev() {
            order.swap(k, rand::Rng::random_range(&mut g, 0..=k));
        }
        let rows: Vec<TensorF> = std::iter::once(0).chain(order).map(|a| stack.row(a).unwrap()).collect();
        let refs: Vec<&TensorF> = rows.iter().collect();
        let permuted = TensorF::concat_rows(&refs).unwrap();
        let (a, _) = attention_fuse(&stack, &reg, &cfg, None).unwrap();
        let (b, _) = attention_fuse(&permuted, &reg, &cfg, None).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn fusion_rejects_empty_stack() {
    let cfg = tiny_config();
    let reg = base_registry(&cfg, 50);
    assert!(attention_fuse(&TensorF::zeros(&[0, cfg.channels, 2, 2]), &reg, &cfg, None).is_err());
}

#[test]
fn heads_zero_params_give_zero_outputs() {
    let cfg = tiny_config();
    let mut reg = base_registry(&cfg, 60);
    for n in [CLS_W, CLS_B, REG_W, REG_B] {
        let s = reg.get(n).unwrap().shape().to_vec();
        reg.set_value(n, TensorF::zeros(&s)).unwrap();
    }
    let out = decode_heads(&uniform(&[cfg.channels, 3, 5], -1.0, 1.0, &mut rng(61)), &reg).unwrap();
    assert_eq!(out.cls_logits.shape(), &[1, 3, 5]);
    assert_eq!(out.reg.shape(), &[4, 3, 5]);
    assert!(out.cls_logits.data().iter().chain(out.reg.data()).all(|&v| v == 0.0));
}

#[test]
fn heads_match_pointwise_conv_oracle() {
    let cfg = tiny_config();
    let mut reg = base_registry(&cfg, 70);
    randomize(&mut reg, 1.0, &mut rng(71));
    let x = uniform(&[cfg.channels, 4, 3], -1.0, 1.0, &mut rng(72));
    let out = decode_heads(&x, &reg).unwrap();
    let p = oracle::to_planes(&x);
    let cls = oracle::conv(&p, reg.get(CLS_W).unwrap(), reg.get(CLS_B).unwrap(), 1, 0);
    let rg = oracle::conv(&p, reg.get(REG_W).unwrap(), reg.get(REG_B).unwrap(), 1, 0);
    assert_close(out.cls_logits.data(), &flat_planes(&cls), 1e-12);
    assert_close(out.reg.data(), &flat_planes(&rg), 1e-12);
}

#[test]
fn method_none_is_bitwise_base_forward() {
    let cfg = tiny_config();
    let reg = base_registry(&cfg, 80);
    let o = obs(&cfg, 3, 81);
    let (base, _) = Pipeline::base(&cfg).unwrap().forward(&reg, AgentInput::Observations(&o)).unwrap();
    let (none, _) = Pipeline::new(&cfg, &Method::None).unwrap().forward(&reg, AgentInput::Observations(&o)).unwrap();
    assert!(base.bits_eq(&none));
}

#[test]
fn zero_up_projection_without_prompt_is_identity() {
    let cfg = tiny_config();
    let base = base_registry(&cfg, 90);
    for variant in [Variant::Standard, Variant::S, Variant::D] {
        let method: Method = format!("{}+no_prompt", Method::copeft(variant)).parse().unwrap();
        let reg: Registry = build_registry(&cfg, &method, &mut rng(90)).unwrap();
        let o = obs(&cfg, 2, 91);
        let (a, _) = Pipeline::base(&cfg).unwrap().forward(&base, AgentInput::Observations(&o)).unwrap();
        let (b, _) = Pipeline::new(&cfg, &method).unwrap().forward(&reg, AgentInput::Observations(&o)).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12, "{method}");
    }
}

#[test]
fn prompt_adds_one_fusion_row_without_changing_head_shapes() {
    let cfg = tiny_config();
    let method = Method::copeft(Variant::Standard);
    let reg: Registry = build_registry(&cfg, &method, &mut rng(100)).unwrap();
    for n in 1..=3 {
        let o = obs(&cfg, n, 101);
        let (heads, cache) = Pipeline::new(&cfg, &method).unwrap().forward(&reg, AgentInput::Observations(&o)).unwrap();
        assert_eq!(cache.fusion_rows(), n + 1);
        let fg = cfg.feature_grid();
        assert_eq!(heads.cls_logits.shape(), &[1, fg.rows, fg.cols]);
        assert_eq!(heads.reg.shape(), &[4, fg.rows, fg.cols]);
    }
}

#[test]
fn precomputed_features_match_observations() {
    let cfg = tiny_config();
    let method = Method::copeft(Variant::D);
    let mut reg: Registry = build_registry(&cfg, &method, &mut rng(110)).unwrap();
    randomize(&mut reg, 0.3, &mut rng(111));
    let o = obs(&cfg, 2, 112);
    let pipe = Pipeline::new(&cfg, &method).unwrap();
    let (feats, _) = pipe.encode_agents(&reg, &o).unwrap();
    let (a, _) = pipe.forward(&reg, AgentInput::Observations(&o)).unwrap();
    let (b, _) = pipe.forward(&reg, AgentInput::Features(&feats)).unwrap();
    assert!(a.bits_eq(&b));
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny_config();
    let method = Method::copeft(Variant::Standard);
    let mut reg: Registry = build_registry(&cfg, &method, &mut rng(120)).unwrap();
    randomize(&mut reg, 0.3, &mut rng(121));
    let o = obs(&cfg, 3, 122);
    let pipe = Pipeline::new(&cfg, &method).unwrap();
    let (a, _) = pipe.forward(&reg, AgentInput::Observations(&o)).unwrap();
    let (b, _) = pipe.forward(&reg, AgentInput::Observations(&o)).unwrap();
    assert!(a.bits_eq(&b));
}

#[test]
fn missing_method_parameters_are_reported() {
    let cfg = tiny_config();
    let reg: Registry = base_registry(&cfg, 130);
    let o = obs(&cfg, 2, 131);
    let err = Pipeline::new(&cfg, &Method::copeft(Variant::Standard))
        .unwrap()
        .forward(&reg, AgentInput::Observations(&o))
        .unwrap_err();
    assert_eq!(err.kind(), "unknown_param");
}

#[test]
fn empty_agent_list_is_rejected() {
    let cfg = tiny_config();
    let reg: Registry = ParamRegistry::new();
    let r = Pipeline::base(&cfg).unwrap().forward(&reg, AgentInput::Observations(&[]));
    assert_eq!(r.unwrap_err().kind(), "empty_stack");
}
