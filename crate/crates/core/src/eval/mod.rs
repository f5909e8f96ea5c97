//! Box decoding, non-maximum suppression, IoU and average precision.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxAA, GridGeometry};
use crate::pipeline::{AgentInput, HeadOutputs, Pipeline};
use crate::scenes::SceneSample;
use crate::Registry;

pub const DEFAULT_SCORE_THR: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.2;

/// Intersection over union of two axis-aligned boxes.
pub fn iou_aa(a: &BoxAA, b: &BoxAA) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoxAA,
    pub score: f64,
}

/// A detection before suppression, tagged with the cell it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub det: Detection,
    pub cell: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Cells whose objectness reaches `score_thr`, decoded to world boxes.
pub fn candidates(heads: &HeadOutputs<f64>, score_thr: f64, geom: &GridGeometry) -> Result<Vec<Candidate>> {
    let (h, w) = (geom.rows, geom.cols);
    heads.cls_logits.expect_shape(&[1, h, w], "decode_boxes")?;
    heads.reg.expect_shape(&[4, h, w], "decode_boxes")?;
    let (cls, reg) = (heads.cls_logits.data(), heads.reg.data());
    let plane = h * w;
    let s = geom.cell_size;
    let mut out = Vec::new();
    for cell in 0..plane {
        let score = sigmoid(cls[cell]);
        if score < score_thr {
            continue;
        }
        let (x, y) = geom.cell_center(cell / w, cell % w);
        let bbox = BoxAA::new(
            x + reg[cell] * s,
            y + reg[plane + cell] * s,
            s * reg[2 * plane + cell].exp(),
            s * reg[3 * plane + cell].exp(),
        );
        if bbox.cx.is_finite() && bbox.cy.is_finite() && bbox.w > 0.0 && bbox.l > 0.0 && bbox.area().is_finite() {
            out.push(Candidate { det: Detection { bbox, score }, cell });
        }
    }
    Ok(out)
}

/// Greedy suppression by descending score; equal scores are visited in
/// ascending cell order. A candidate is dropped when its IoU with any kept
/// box is at least `nms_iou`.
pub fn nms(mut cands: Vec<Candidate>, nms_iou: f64) -> Vec<Candidate> {
    cands.sort_by(|a, b| b.det.score.total_cmp(&a.det.score).then(a.cell.cmp(&b.cell)));
    let mut kept: Vec<Candidate> = Vec::new();
    for c in cands {
        if kept.iter().all(|k| iou_aa(&k.det.bbox, &c.det.bbox) < nms_iou) {
            kept.push(c);
        }
    }
    kept
}

/// Thresholded, suppressed detections from raw head outputs.
pub fn decode_boxes(heads: &HeadOutputs<f64>, score_thr: f64, nms_iou: f64, geom: &GridGeometry) -> Result<Vec<Detection>> {
    Ok(nms(candidates(heads, score_thr, geom)?, nms_iou).into_iter().map(|c| c.det).collect())
}

/// Average precision and the counts it was computed from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub detections: usize,
    pub ground_truth: usize,
    /// No ground truth at all: `ap` is reported as 0.
    pub no_ground_truth: bool,
}

/// All-point interpolated AP over pooled detections.
///
/// Each frame matches its detections greedily in descending score order to
/// the unmatched ground truth of highest IoU (at least `iou_thr`, ties to the
/// lower index). Precision/recall points are taken after each group of
/// equal scores, so the result depends only on the score ranking.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<BoxAA>], iou_thr: f64) -> Result<ApResult> {
    if dets.len() != gts.len() {
        return Err(Error::Config(format!("{} detection frames vs {} ground-truth frames", dets.len(), gts.len())));
    }
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for (fd, fg) in dets.iter().zip(gts) {
        let mut order: Vec<usize> = (0..fd.len()).collect();
        order.sort_by(|&a, &b| fd[b].score.total_cmp(&fd[a].score).then(a.cmp(&b)));
        let mut taken = vec![false; fg.len()];
        for i in order {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in fg.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = iou_aa(&fd[i].bbox, gt);
                if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            scored.push((fd[i].score, best.is_some()));
        }
    }
    let n_det = scored.len();
    if n_gt == 0 {
        return Ok(ApResult { ap: 0.0, detections: n_det, ground_truth: 0, no_ground_truth: true });
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));

    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, hit)) in scored.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_ends = scored.get(i + 1).is_none_or(|next| next.0 != score);
        if group_ends {
            points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    for k in (0..points.len()).rev() {
        envelope = envelope.max(points[k].1);
        let prev_recall = if k == 0 { 0.0 } else { points[k - 1].0 };
        ap += (points[k].0 - prev_recall) * envelope;
    }
    Ok(ApResult { ap, detections: n_det, ground_truth: n_gt, no_ground_truth: false })
}

/// Rectangle in which boxes are scored; centres outside are ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalArea {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl EvalArea {
    pub fn of_grid(g: &GridGeometry) -> Self {
        Self { x_min: g.x_min, x_max: g.x_max(), y_min: g.y_min, y_max: g.y_max() }
    }

    pub fn contains(&self, b: &BoxAA) -> bool {
        (self.x_min..=self.x_max).contains(&b.cx) && (self.y_min..=self.y_max).contains(&b.cy)
    }
}

/// Evaluation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub score_thr: f64,
    pub nms_iou: f64,
    /// `None` evaluates the whole observation grid.
    pub area: Option<EvalArea>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { score_thr: DEFAULT_SCORE_THR, nms_iou: DEFAULT_NMS_IOU, area: None }
    }
}

/// One evaluated (method, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub ap50: f64,
    pub ap70: f64,
    pub detections: usize,
    pub ground_truth: usize,
    pub no_ground_truth: bool,
    pub params_trainable: usize,
    pub params_total: usize,
    pub seconds: f64,
}

impl MetricsReport {
    pub fn ratio(&self) -> f64 {
        if self.params_total == 0 {
            0.0
        } else {
            self.params_trainable as f64 / self.params_total as f64
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Detections and ground truth of every frame, restricted to the area.
pub fn collect_frames(
    pipe: &Pipeline<'_>,
    reg: &Registry,
    frames: &[SceneSample],
    cfg: &EvalConfig,
) -> Result<(Vec<Vec<Detection>>, Vec<Vec<BoxAA>>)> {
    let model = pipe.config();
    let fg = model.feature_grid();
    let area = cfg.area.unwrap_or_else(|| EvalArea::of_grid(&model.grid));
    let mut dets = Vec::with_capacity(frames.len());
    let mut gts = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        for g in &f.grids {
            if g.shape() != [model.in_channels, model.grid.rows, model.grid.cols] {
                return Err(Error::Geometry(format!(
                    "frame {i} observation {:?} vs model input [{}, {}, {}]",
                    g.shape(),
                    model.in_channels,
                    model.grid.rows,
                    model.grid.cols
                )));
            }
        }
        let (heads, _) = pipe.forward(reg, AgentInput::Observations(&f.grids))?;
        let d = decode_boxes(&heads, cfg.score_thr, cfg.nms_iou, &fg)?;
        dets.push(d.into_iter().filter(|d| area.contains(&d.bbox)).collect());
        gts.push(f.boxes.iter().copied().filter(|b| area.contains(b)).collect());
    }
    Ok((dets, gts))
}

/// AP@50 and AP@70 of a model on a dataset. Parameter counts and timing are
/// left at zero for the caller to fill.
pub fn evaluate_model(
    pipe: &Pipeline<'_>,
    reg: &Registry,
    frames: &[SceneSample],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let (dets, gts) = collect_frames(pipe, reg, frames, cfg)?;
    let a50 = average_precision(&dets, &gts, 0.5)?;
    let a70 = average_precision(&dets, &gts, 0.7)?;
    Ok(MetricsReport {
        method: String::new(),
        seed: 0,
        ap50: a50.ap,
        ap70: a70.ap,
        detections: a50.detections,
        ground_truth: a50.ground_truth,
        no_ground_truth: a50.no_ground_truth,
        params_trainable: 0,
        params_total: 0,
        seconds: 0.0,
    })
}
