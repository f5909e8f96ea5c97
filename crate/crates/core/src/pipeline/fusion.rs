//! Per-cell multi-agent self-attention fusion.
//!
//! At every BEV cell the `M` agent vectors attend to each other through
//! learned query/key/value projections. Layers are stacked with an optional
//! residual connection; the ego row (index 0) of the last layer is returned.

use crate::error::{Error, Result};
use crate::nn::{linear, linear_backward, GradMap, ParamRegistry};
use crate::peft::adapter::{collaboration_adapter, collaboration_adapter_backward, AdapterCache, AdapterFlags};
use crate::pipeline::config::ModelConfig;
use crate::pipeline::layout::{from_cell_major, to_cell_major};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weight and bias names of a projection. Keys carry no bias: a shared
/// offset on every key shifts all logits of a query equally and cancels in
/// the softmax.
pub(crate) fn proj_names(layer: usize, proj: &str) -> (String, Option<String>) {
    let bias = (proj != "k").then(|| format!("fusion.layer{layer}.{proj}.b"));
    (format!("fusion.layer{layer}.{proj}.w"), bias)
}

/// Adapter prefix hosted after fusion layer `layer`.
pub fn layer_adapter_prefix(layer: usize) -> String {
    format!("fusion_adapter{layer}")
}

#[derive(Clone, Debug)]
struct LayerCache<T> {
    z_in: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    attn: Vec<T>,
    adapter: Option<AdapterCache<T>>,
}

#[derive(Clone, Debug)]
pub struct FusionCache<T> {
    agents: usize,
    h: usize,
    w: usize,
    layers: Vec<LayerCache<T>>,
}

impl<T> FusionCache<T> {
    pub fn agents(&self) -> usize {
        self.agents
    }
}

/// Fuses an `[M, C, H, W]` stack into the ego feature `[C, H, W]`.
///
/// `layer_adapter` inserts a collaboration adapter after every layer.
pub fn attention_fuse<T: Scalar>(
    stack: &Tensor<T>,
    reg: &ParamRegistry<T>,
    cfg: &ModelConfig,
    layer_adapter: Option<&AdapterFlags>,
) -> Result<(Tensor<T>, FusionCache<T>)> {
    stack.expect_rank(4, "attention_fuse")?;
    let s = stack.shape();
    let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
    if m == 0 {
        return Err(Error::EmptyStack);
    }
    if cfg.fusion_layers == 0 {
        return Err(Error::Config("fusion needs at least one layer".into()));
    }
    if c != cfg.channels {
        return Err(Error::shape("attention_fuse", format!("stack has {c} channels, model {}", cfg.channels)));
    }
    let mut z = to_cell_major(stack)?;
    let mut layers = Vec::with_capacity(cfg.fusion_layers);
    for l in 0..cfg.fusion_layers {
        let (z_mid, mut lc) = attention_layer(&z, reg, cfg, l)?;
        z = match layer_adapter {
            Some(flags) => {
                let st = from_cell_major(&z_mid, h, w)?;
                let (out, ac) = collaboration_adapter(&st, reg, &layer_adapter_prefix(l), flags)?;
                lc.adapter = Some(ac);
                to_cell_major(&out)?
            }
            None => z_mid,
        };
        layers.push(lc);
    }
    let ego = from_cell_major(&z, h, w)?.row(0)?.reshape(&[c, h, w])?;
    Ok((ego, FusionCache { agents: m, h, w, layers }))
}

fn attention_layer<T: Scalar>(
    z: &Tensor<T>,
    reg: &ParamRegistry<T>,
    cfg: &ModelConfig,
    layer: usize,
) -> Result<(Tensor<T>, LayerCache<T>)> {
    let (p, m, c) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let proj = |name: &str| -> Result<Tensor<T>> {
        let (wn, bn) = proj_names(layer, name);
        let w = reg.get(&wn)?;
        match bn {
            Some(bn) => linear(z, w, reg.get(&bn)?),
            None => linear(z, w, &Tensor::zeros(&[w.shape()[0]])),
        }
    };
    let (q, k, v) = (proj("q")?, proj("k")?, proj("v")?);
    let d = q.shape()[2];
    if k.shape()[2] != d || v.shape()[2] != c {
        return Err(Error::shape(
            "attention_fuse",
            format!("q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let inv_sqrt_d = T::one() / T::of(d as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut attn = vec![T::zero(); p * m * m];
    let mut out = if cfg.residual { z.data().to_vec() } else { vec![T::zero(); p * m * c] };
    let mut logits = vec![T::zero(); m];
    for cell in 0..p {
        for a in 0..m {
            let qa = &qd[(cell * m + a) * d..(cell * m + a + 1) * d];
            let mut mx = T::neg_infinity();
            for b in 0..m {
                let kb = &kd[(cell * m + b) * d..(cell * m + b + 1) * d];
                let dot: T = qa.iter().zip(kb).map(|(&x, &y)| x * y).sum();
                logits[b] = dot * inv_sqrt_d;
                mx = mx.max(logits[b]);
            }
            let mut denom = T::zero();
            for lg in logits.iter_mut() {
                *lg = (*lg - mx).exp();
                denom += *lg;
            }
            let arow = &mut attn[(cell * m + a) * m..(cell * m + a + 1) * m];
            for (dst, &e) in arow.iter_mut().zip(&logits) {
                *dst = e / denom;
            }
            let orow = &mut out[(cell * m + a) * c..(cell * m + a + 1) * c];
            for b in 0..m {
                let wgt = arow[b];
                let vb = &vd[(cell * m + b) * c..(cell * m + b + 1) * c];
                for (o, &vv) in orow.iter_mut().zip(vb) {
                    *o += wgt * vv;
                }
            }
        }
    }
    let z_mid = Tensor::new(vec![p, m, c], out)?.finite_or("attention_fuse")?;
    Ok((z_mid, LayerCache { z_in: z.clone(), q, k, v, attn, adapter: None }))
}

/// Backward of [`attention_fuse`]; returns the gradient w.r.t. the input
/// stack and accumulates gradients of trainable fusion/adapter parameters.
pub fn attention_fuse_backward<T: Scalar>(
    cache: &FusionCache<T>,
    grad_out: &Tensor<T>,
    reg: &ParamRegistry<T>,
    cfg: &ModelConfig,
    layer_adapter: Option<&AdapterFlags>,
    grads: &mut GradMap<T>,
) -> Result<Tensor<T>> {
    let (m, h, w) = (cache.agents, cache.h, cache.w);
    let c = cfg.channels;
    grad_out.expect_shape(&[c, h, w], "attention_fuse_backward")?;
    let mut full = Tensor::zeros(&[m, c, h, w]);
    full.data_mut()[..c * h * w].copy_from_slice(grad_out.data());
    let mut dz = to_cell_major(&full)?;
    for (l, lc) in cache.layers.iter().enumerate().rev() {
        if let (Some(flags), Some(ac)) = (layer_adapter, lc.adapter.as_ref()) {
            let ds = from_cell_major(&dz, h, w)?;
            let din = collaboration_adapter_backward(ac, &ds, reg, &layer_adapter_prefix(l), flags, grads)?;
            dz = to_cell_major(&din)?;
        }
        dz = attention_layer_backward(lc, &dz, reg, cfg, l, grads)?;
    }
    from_cell_major(&dz, h, w)
}

fn attention_layer_backward<T: Scalar>(
    lc: &LayerCache<T>,
    dz_out: &Tensor<T>,
    reg: &ParamRegistry<T>,
    cfg: &ModelConfig,
    layer: usize,
    grads: &mut GradMap<T>,
) -> Result<Tensor<T>> {
    let (p, m, c) = (lc.z_in.shape()[0], lc.z_in.shape()[1], lc.z_in.shape()[2]);
    let d = lc.q.shape()[2];
    let inv_sqrt_d = T::one() / T::of(d as f64).sqrt();
    let (qd, kd, vd, go) = (lc.q.data(), lc.k.data(), lc.v.data(), dz_out.data());
    let mut dq = vec![T::zero(); p * m * d];
    let mut dk = vec![T::zero(); p * m * d];
    let mut dv = vec![T::zero(); p * m * c];
    let mut da = vec![T::zero(); m];
    for cell in 0..p {
        for a in 0..m {
            let g = &go[(cell * m + a) * c..(cell * m + a + 1) * c];
            let arow = &lc.attn[(cell * m + a) * m..(cell * m + a + 1) * m];
            for b in 0..m {
                let vb = &vd[(cell * m + b) * c..(cell * m + b + 1) * c];
                da[b] = g.iter().zip(vb).map(|(&x, &y)| x * y).sum();
                let dvb = &mut dv[(cell * m + b) * c..(cell * m + b + 1) * c];
                for (dst, &gg) in dvb.iter_mut().zip(g) {
                    *dst += arow[b] * gg;
                }
            }
            let dot: T = arow.iter().zip(&da).map(|(&x, &y)| x * y).sum();
            let qa = &qd[(cell * m + a) * d..(cell * m + a + 1) * d];
            for b in 0..m {
                let dlogit = arow[b] * (da[b] - dot) * inv_sqrt_d;
                let kb = &kd[(cell * m + b) * d..(cell * m + b + 1) * d];
                let dqa = &mut dq[(cell * m + a) * d..(cell * m + a + 1) * d];
                for (dst, &kk) in dqa.iter_mut().zip(kb) {
                    *dst += dlogit * kk;
                }
                let dkb = &mut dk[(cell * m + b) * d..(cell * m + b + 1) * d];
                for (dst, &qq) in dkb.iter_mut().zip(qa) {
                    *dst += dlogit * qq;
                }
            }
        }
    }
    let mut dz = if cfg.residual { dz_out.clone() } else { Tensor::zeros(&[p, m, c]) };
    for (name, gtensor) in [("q", dq), ("k", dk), ("v", dv)] {
        let (wn, bn) = proj_names(layer, name);
        let width = gtensor.len() / (p * m);
        let gt = Tensor::new(vec![p, m, width], gtensor)?;
        let lg = linear_backward(&lc.z_in, reg.get(&wn)?, &gt)?;
        dz.add_assign(&lg.input)?;
        if reg.is_trainable(&wn) {
            grads.accumulate(&wn, lg.weight)?;
        }
        if let Some(bn) = bn.filter(|b| reg.is_trainable(b)) {
            grads.accumulate(&bn, lg.bias)?;
        }
    }
    Ok(dz)
}
