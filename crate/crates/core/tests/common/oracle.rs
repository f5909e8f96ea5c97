//! Straightforward nested-loop references, written independently of the
//! library's layout helpers.

use copeft::TensorF;

/// `x[a][c][i][j]` view of a rank-4 tensor as nested vectors.
pub type Stack = Vec<Vec<Vec<Vec<f64>>>>;
pub type Planes = Vec<Vec<Vec<f64>>>;

pub fn to_planes(t: &TensorF) -> Planes {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    (0..c)
        .map(|k| (0..h).map(|i| (0..w).map(|j| t.data()[(k * h + i) * w + j]).collect()).collect())
        .collect()
}

pub fn to_stack(t: &TensorF) -> Stack {
    let s = t.shape();
    let plane: usize = s[1..].iter().product();
    (0..s[0])
        .map(|a| to_planes(&TensorF::new(s[1..].to_vec(), t.data()[a * plane..(a + 1) * plane].to_vec()).unwrap()))
        .collect()
}

pub fn flat_planes(p: &Planes) -> Vec<f64> {
    p.iter().flatten().flatten().copied().collect()
}

pub fn flat_stack(s: &Stack) -> Vec<f64> {
    s.iter().flat_map(flat_planes).collect()
}

pub fn conv(x: &Planes, w: &TensorF, b: &TensorF, stride: usize, pad: usize) -> Planes {
    let (cout, cin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let (h, wd) = (x[0].len(), x[0][0].len());
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![vec![vec![0.0; wo]; ho]; cout];
    for o in 0..cout {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = b.data()[o];
                for c in 0..cin {
                    for u in 0..k {
                        for v in 0..k {
                            let y = (i * stride + u) as isize - pad as isize;
                            let xx = (j * stride + v) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                continue;
                            }
                            acc += w.data()[((o * cin + c) * k + u) * k + v] * x[c][y as usize][xx as usize];
                        }
                    }
                }
                out[o][i][j] = acc;
            }
        }
    }
    out
}

pub fn relu(x: &Planes) -> Planes {
    x.iter().map(|p| p.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()).collect()
}

pub fn max_over_agents(s: &Stack) -> Planes {
    let mut out = s[0].clone();
    for a in &s[1..] {
        for (c, p) in a.iter().enumerate() {
            for (i, r) in p.iter().enumerate() {
                for (j, &v) in r.iter().enumerate() {
                    if v > out[c][i][j] {
                        out[c][i][j] = v;
                    }
                }
            }
        }
    }
    out
}

/// One attention layer evaluated cell by cell; returns all agent rows.
pub fn attention_layer(
    s: &Stack,
    wq: &TensorF,
    bq: &TensorF,
    wk: &TensorF,
    wv: &TensorF,
    bv: &TensorF,
    residual: bool,
) -> Stack {
    let m = s.len();
    let c = s[0].len();
    let (h, w) = (s[0][0].len(), s[0][0][0].len());
    let d = wq.shape()[0];
    let mut out = s.clone();
    for i in 0..h {
        for j in 0..w {
            let vecs: Vec<Vec<f64>> = (0..m).map(|a| (0..c).map(|k| s[a][k][i][j]).collect()).collect();
            let lin = |wt: &TensorF, b: Option<&TensorF>, x: &[f64]| -> Vec<f64> {
                let rows = wt.shape()[0];
                (0..rows)
                    .map(|r| b.map_or(0.0, |b| b.data()[r]) + (0..c).map(|k| wt.data()[r * c + k] * x[k]).sum::<f64>())
                    .collect()
            };
            let q: Vec<_> = vecs.iter().map(|x| lin(wq, Some(bq), x)).collect();
            let kk: Vec<_> = vecs.iter().map(|x| lin(wk, None, x)).collect();
            let v: Vec<_> = vecs.iter().map(|x| lin(wv, Some(bv), x)).collect();
            for a in 0..m {
                let logits: Vec<f64> =
                    (0..m).map(|b| (0..d).map(|t| q[a][t] * kk[b][t]).sum::<f64>() / (d as f64).sqrt()).collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for k in 0..c {
                    let mix: f64 = (0..m).map(|b| e[b] / z * v[b][k]).sum();
                    out[a][k][i][j] = if residual { vecs[a][k] + mix } else { mix };
                }
            }
        }
    }
    out
}

/// Full collaboration adapter with a shared score row.
pub fn adapter(s: &Stack, dw: &TensorF, db: &TensorF, uw: &TensorF, ub: &TensorF, sw: &TensorF, sb: &TensorF) -> Stack {
    let score = conv(&max_over_agents(s), sw, sb, 1, 0);
    s.iter()
        .map(|row| {
            let up = conv(&relu(&conv(row, dw, db, 1, 1)), uw, ub, 1, 1);
            row.iter()
                .enumerate()
                .map(|(c, p)| {
                    p.iter()
                        .enumerate()
                        .map(|(i, r)| r.iter().enumerate().map(|(j, &v)| v + score[c][i][j] * up[c][i][j]).collect())
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Agent prompt: per-channel affine, agent max, per-cell channel mixing.
pub fn prompt(s: &Stack, scale: &TensorF, shift: &TensorF, lw: &TensorF, lb: &TensorF) -> Planes {
    let e: Stack = s
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(c, p)| {
                    p.iter().map(|r| r.iter().map(|&v| scale.data()[c] * v + shift.data()[c]).collect()).collect()
                })
                .collect()
        })
        .collect();
    let pooled = max_over_agents(&e);
    let c = pooled.len();
    let (h, w) = (pooled[0].len(), pooled[0][0].len());
    let mut out = vec![vec![vec![0.0; w]; h]; c];
    for o in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[o][i][j] = lb.data()[o] + (0..c).map(|k| lw.data()[o * c + k] * pooled[k][i][j]).sum::<f64>();
            }
        }
    }
    out
}
