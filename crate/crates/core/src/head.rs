//! Detection head, bipartite matching and the training losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{declare_linear, linear};
use crate::ops::FocalSpec;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Floor applied to every box area inside GIoU.
pub const AREA_FLOOR: f64 = 1e-12;

/// Weights of the matching cost and box loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Normalized `(cx, cy, w, h)` box.
pub type Box4 = [f64; 4];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub cls: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GroundTruth {
    pub fn bbox(&self) -> Box4 {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0;
        if !ok {
            return Err(Error::Dataset(format!(
                "box {:?} is outside the unit square",
                self.bbox()
            )));
        }
        if self.cls >= classes {
            return Err(Error::Dataset(format!(
                "class {} out of range for {classes} classes",
                self.cls
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cls: usize,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

pub fn declare(store: &mut ParamStore, dim: usize, classes: usize) -> Result<()> {
    declare_linear(store, "head.cls", dim, classes, true)
}

/// Class logits `[N, K, C]` for the final query contents.
pub fn class_logits(tape: &mut Tape, store: &ParamStore, content: Var) -> Result<Var> {
    linear(tape, store, "head.cls", content)
}

/// One detection per query of sample `b`: best class by confidence (lowest
/// class id on ties), box taken from the refined anchor. Sorted by descending
/// score, ties by query index.
pub fn detections(logits: &Tensor, anchors: &Tensor, b: usize) -> Vec<Detection> {
    let (k, c) = (logits.shape()[1], logits.shape()[2]);
    let mut out: Vec<(usize, Detection)> = (0..k)
        .map(|q| {
            let row = &logits.data()[(b * k + q) * c..][..c];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            let a = &anchors.data()[(b * k + q) * 4..][..4];
            let det = Detection {
                cls: best,
                score: crate::ops::sigmoid(row[best]),
                cx: a[0],
                cy: a[1],
                w: a[2],
                h: a[3],
            };
            (q, det)
        })
        .collect();
    out.sort_by(|(qa, a), (qb, b)| b.score.total_cmp(&a.score).then(qa.cmp(qb)));
    out.into_iter().map(|(_, d)| d).collect()
}

fn corners(b: &Box4) -> Box4 {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

/// Generalized IoU of two corner-form `(x1, y1, x2, y2)` boxes.
pub fn giou_xyxy(a: &Box4, b: &Box4) -> f64 {
    let area = |r: &Box4| ((r[2] - r[0]) * (r[3] - r[1])).max(AREA_FLOOR);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let encl =
        ((a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]))).max(AREA_FLOOR);
    inter / union - (encl - union) / encl
}

/// Generalized IoU of two `(cx, cy, w, h)` boxes.
pub fn giou(a: &Box4, b: &Box4) -> f64 {
    giou_xyxy(&corners(a), &corners(b))
}

/// Row-wise GIoU of `[G, 4]` predicted and target boxes in `(cx, cy, w, h)`,
/// returning `[G, 1]`.
pub fn giou_tape(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let g = tape.value(pred).shape()[0];
    let col = |tape: &mut Tape, v: Var, i: usize| tape.slice(v, 1, i, i + 1);
    let xyxy = |tape: &mut Tape, v: Var| -> Result<[Var; 4]> {
        let (cx, cy, w, h) = (
            col(tape, v, 0)?,
            col(tape, v, 1)?,
            col(tape, v, 2)?,
            col(tape, v, 3)?,
        );
        let hw = tape.scale(w, 0.5)?;
        let hh = tape.scale(h, 0.5)?;
        Ok([
            tape.sub(cx, hw)?,
            tape.sub(cy, hh)?,
            tape.add(cx, hw)?,
            tape.add(cy, hh)?,
        ])
    };
    let a = xyxy(tape, pred)?;
    let b = xyxy(tape, target)?;
    let floor = tape.leaf(Tensor::full(&[g, 1], AREA_FLOOR));
    let zero = tape.leaf(Tensor::zeros(&[g, 1]));
    let area = |tape: &mut Tape, r: &[Var; 4]| -> Result<Var> {
        let w = tape.sub(r[2], r[0])?;
        let h = tape.sub(r[3], r[1])?;
        let a = tape.mul(w, h)?;
        tape.maximum(a, floor)
    };
    let ix2 = tape.minimum(a[2], b[2])?;
    let ix1 = tape.maximum(a[0], b[0])?;
    let iy2 = tape.minimum(a[3], b[3])?;
    let iy1 = tape.maximum(a[1], b[1])?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.maximum(iw, zero)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.maximum(ih, zero)?;
    let inter = tape.mul(iw, ih)?;
    let aa = area(tape, &a)?;
    let ab = area(tape, &b)?;
    let sum = tape.add(aa, ab)?;
    let union = tape.sub(sum, inter)?;
    let ex2 = tape.maximum(a[2], b[2])?;
    let ex1 = tape.minimum(a[0], b[0])?;
    let ey2 = tape.maximum(a[3], b[3])?;
    let ey1 = tape.minimum(a[1], b[1])?;
    let ew = tape.sub(ex2, ex1)?;
    let eh = tape.sub(ey2, ey1)?;
    let encl = tape.mul(ew, eh)?;
    let encl = tape.maximum(encl, floor)?;
    let iou = tape.div(inter, union)?;
    let gap = tape.sub(encl, union)?;
    let pen = tape.div(gap, encl)?;
    tape.sub(iou, pen)
}

/// Minimum-cost assignment of each ground truth (column) to a distinct query
/// (row) of a `[Q, G]` cost matrix. Returns the query for every ground truth.
///
/// Among optimal assignments the lexicographically smallest vector is chosen.
pub fn hungarian_match(cost: &Tensor) -> Result<Vec<usize>> {
    let (q, g) = match cost.shape() {
        &[q, g] => (q, g),
        s => {
            return Err(Error::dim(
                "hungarian_match",
                "rank",
                format!("cost must be [Q, G], got {s:?}"),
            ))
        }
    };
    if g > q {
        return Err(Error::Infeasible { gts: g, queries: q });
    }
    if g == 0 {
        return Ok(Vec::new());
    }
    let at = |gt: usize, qi: usize| cost.data()[qi * g + gt];
    let all_gts: Vec<usize> = (0..g).collect();
    let all_qs: Vec<usize> = (0..q).collect();
    let (best, _) = solve(&at, &all_gts, &all_qs);
    let tol = 1e-9 * (1.0 + best.abs());

    // Fix ground truths in order to the smallest query that keeps the optimum.
    let mut fixed = Vec::with_capacity(g);
    let mut spent = 0.0;
    for gt in 0..g {
        let rest: Vec<usize> = (gt + 1..g).collect();
        for qi in 0..q {
            if fixed.contains(&qi) {
                continue;
            }
            let free: Vec<usize> = (0..q).filter(|x| *x != qi && !fixed.contains(x)).collect();
            let (tail, _) = solve(&at, &rest, &free);
            if spent + at(gt, qi) + tail <= best + tol {
                fixed.push(qi);
                spent += at(gt, qi);
                break;
            }
        }
        if fixed.len() != gt + 1 {
            return Err(Error::Numeric(
                "matching lost its optimum while fixing ties".into(),
            ));
        }
    }
    Ok(fixed)
}

/// Shortest augmenting path assignment of `rows` onto a subset of `cols`.
/// Returns the optimal total and the chosen column per row.
fn solve(at: &dyn Fn(usize, usize) -> f64, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let (n, m) = (rows.len(), cols.len());
    if n == 0 {
        return (0.0, Vec::new());
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = at(rows[i0 - 1], cols[j - 1]) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = cols[j - 1];
        }
    }
    let total = assign
        .iter()
        .enumerate()
        .map(|(i, &c)| at(rows[i], c))
        .sum();
    (total, assign)
}

/// Matching cost `[K, G]` from current logits `[K, C]` and boxes `[K, 4]`.
pub fn matching_cost(
    logits: &[f64],
    boxes: &[f64],
    classes: usize,
    gts: &[GroundTruth],
    lw: &LossWeights,
) -> Tensor {
    let k = boxes.len() / 4;
    Tensor::from_fn(&[k, gts.len()], |i| {
        let (q, gi) = (i / gts.len(), i % gts.len());
        let gt = &gts[gi];
        let conf = crate::ops::sigmoid(logits[q * classes + gt.cls]);
        let b = &boxes[q * 4..q * 4 + 4];
        let pb = [b[0], b[1], b[2], b[3]];
        let l1: f64 = pb.iter().zip(gt.bbox()).map(|(x, y)| (x - y).abs()).sum();
        lw.cls * (1.0 - conf) + lw.l1 * l1 + lw.giou * (1.0 - giou(&pb, &gt.bbox()))
    })
}

/// Box and classification losses of one sample.
pub struct DetectionLoss {
    pub boxes: Var,
    pub cls: Var,
    /// Query matched to each ground truth.
    pub matched: Vec<usize>,
}

/// `L_box` and `L_cls` for logits `[1, K, C]` and anchors `[1, K, 4]`.
///
/// `L_box` averages `λ_L1·‖b − b̂‖₁ + λ_giou·(1 − GIoU)` over ground truths.
/// `L_cls` sums the focal loss over every query and class and divides by the
/// number of ground truths (at least one).
pub fn detection_loss(
    tape: &mut Tape,
    logits: Var,
    anchors: Var,
    gts: &[GroundTruth],
    lw: &LossWeights,
) -> Result<DetectionLoss> {
    let &[1, k, c] = tape.value(logits).shape() else {
        return Err(Error::dim(
            "detection_loss",
            "batch",
            "expects one sample [1, K, C]",
        ));
    };
    if tape.value(anchors).shape() != [1, k, 4] {
        return Err(Error::dim(
            "detection_loss",
            "anchors",
            "anchors must be [1, K, 4]",
        ));
    }
    for gt in gts {
        gt.validate(c)?;
    }
    let cost = matching_cost(
        tape.value(logits).data(),
        tape.value(anchors).data(),
        c,
        gts,
        lw,
    );
    let matched = hungarian_match(&cost)?;

    let mut targets = Tensor::zeros(&[1, k, c]);
    for (gt, &q) in gts.iter().zip(&matched) {
        targets.data_mut()[q * c + gt.cls] = 1.0;
    }
    let focal = tape.sigmoid_focal(
        logits,
        FocalSpec {
            targets,
            alpha: FOCAL_ALPHA,
            gamma: FOCAL_GAMMA,
        },
    )?;
    let focal = tape.sum(focal)?;
    let cls = tape.scale(focal, 1.0 / gts.len().max(1) as f64)?;

    let boxes = if gts.is_empty() {
        tape.leaf(Tensor::scalar(0.0))
    } else {
        let g = gts.len();
        let flat = tape.reshape(anchors, &[k, 4])?;
        let pred = tape.index_select(flat, 0, matched.clone())?;
        let target = tape.leaf(Tensor::from_fn(&[g, 4], |i| gts[i / 4].bbox()[i % 4]));
        let diff = tape.sub(pred, target)?;
        let l1 = tape.abs(diff)?;
        let l1 = tape.sum(l1)?;
        let gi = giou_tape(tape, pred, target)?;
        let gi = tape.sum(gi)?;
        let l1 = tape.scale(l1, lw.l1 / g as f64)?;
        // λ_giou · (1 − mean GIoU)
        let gi = tape.scale(gi, -lw.giou / g as f64)?;
        let gi = tape.add_scalar(gi, lw.giou)?;
        tape.add(l1, gi)?
    };
    Ok(DetectionLoss {
        boxes,
        cls,
        matched,
    })
}

/// `L_box + L_cls + L_grad`.
pub fn total_loss(tape: &mut Tape, boxes: Var, cls: Var, grad: Var) -> Result<Var> {
    let bc = tape.add(boxes, cls)?;
    tape.add(bc, grad)
}
