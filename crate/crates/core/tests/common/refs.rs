//! Brute-force references for box overlap, suppression and precision.

use copeft::eval::{iou_aa, Candidate, Detection};
use copeft::geometry::BoxAA;
use rand::Rng;

/// Overlap of two intervals from their sorted endpoints.
pub fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    if a1 <= b0 || b1 <= a0 {
        return 0.0;
    }
    let mut e = [a0, a1, b0, b1];
    e.sort_by(f64::total_cmp);
    e[2] - e[1]
}

pub fn iou_ref(a: &BoxAA, b: &BoxAA) -> f64 {
    let i = overlap(a.cx - a.w / 2.0, a.cx + a.w / 2.0, b.cx - b.w / 2.0, b.cx + b.w / 2.0)
        * overlap(a.cy - a.l / 2.0, a.cy + a.l / 2.0, b.cy - b.l / 2.0, b.cy + b.l / 2.0);
    i / (a.w * a.l + b.w * b.l - i)
}

/// Quantised coordinates make touching, nested and identical boxes common.
pub fn quantised_box(rng: &mut impl Rng) -> BoxAA {
    let q = |rng: &mut dyn rand::RngCore, lo: i32, hi: i32| rng.random_range(lo..=hi) as f64 * 0.25;
    BoxAA::new(q(rng, -8, 8), q(rng, -8, 8), q(rng, 1, 12), q(rng, 1, 12))
}

/// Repeatedly take the best remaining candidate and delete everything it
/// overlaps.
pub fn nms_ref(cands: &[Candidate], thr: f64) -> Vec<usize> {
    let mut left: Vec<&Candidate> = cands.iter().collect();
    let mut kept = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for (i, c) in left.iter().enumerate() {
            let b = left[best];
            if c.det.score > b.det.score || (c.det.score == b.det.score && c.cell < b.cell) {
                best = i;
            }
        }
        let top = *left[best];
        kept.push(top.cell);
        left.retain(|c| c.cell != top.cell && iou_aa(&c.det.bbox, &top.det.bbox) < thr);
    }
    kept.sort();
    kept
}

pub fn random_candidates(rng: &mut impl Rng) -> Vec<Candidate> {
    let n = rng.random_range(0..12);
    (0..n)
        .map(|cell| Candidate {
            det: Detection { bbox: quantised_box(rng), score: rng.random_range(0..5) as f64 * 0.2 + 0.1 },
            cell,
        })
        .collect()
}

/// Recomputes matches from scratch at every distinct score threshold and
/// integrates the interpolated precision over recall.
pub fn ap_ref(dets: &[Vec<Detection>], gts: &[Vec<BoxAA>], thr: f64) -> f64 {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut levels: Vec<f64> = dets.iter().flatten().map(|d| d.score).collect();
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();
    let mut curve = Vec::new();
    for &t in &levels {
        let (mut tp, mut n) = (0, 0);
        for (fd, fg) in dets.iter().zip(gts) {
            let mut kept: Vec<(usize, &Detection)> = fd.iter().enumerate().filter(|(_, d)| d.score >= t).collect();
            kept.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
            let mut used = vec![false; fg.len()];
            for (_, d) in kept {
                n += 1;
                let mut best: Option<usize> = None;
                for (gi, gt) in fg.iter().enumerate() {
                    let v = iou_ref(&d.bbox, gt);
                    if !used[gi] && v >= thr && best.is_none_or(|b| v > iou_ref(&d.bbox, &fg[b])) {
                        best = Some(gi);
                    }
                }
                if let Some(b) = best {
                    used[b] = true;
                    tp += 1;
                }
            }
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / n as f64));
    }
    let mut area = 0.0;
    let mut prev = 0.0;
    for &(r, _) in &curve {
        let p = curve.iter().filter(|(r2, _)| *r2 >= r).map(|c| c.1).fold(0.0, f64::max);
        area += (r - prev) * p;
        prev = r;
    }
    area
}

pub fn random_instance(rng: &mut impl Rng) -> (Vec<Vec<Detection>>, Vec<Vec<BoxAA>>) {
    let frames = rng.random_range(1..4);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..frames {
        let gt: Vec<BoxAA> = (0..rng.random_range(0..4)).map(|_| quantised_box(rng)).collect();
        let mut d = Vec::new();
        for _ in 0..rng.random_range(0..6) {
            let bbox = if !gt.is_empty() && rng.random_bool(0.6) {
                let t = gt[rng.random_range(0..gt.len())];
                BoxAA::new(t.cx + rng.random_range(-0.5..0.5), t.cy + rng.random_range(-0.5..0.5), t.w, t.l)
            } else {
                quantised_box(rng)
            };
            d.push(Detection { bbox, score: rng.random_range(1..8) as f64 / 8.0 });
        }
        dets.push(d);
        gts.push(gt);
    }
    (dets, gts)
}
