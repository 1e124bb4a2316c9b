//! Training losses: focal, GIoU, coordinate, relation classification and the weighted total.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{focal_value, Graph, Var};
use crate::boxes::BBox;
use crate::graph::NUM_PREDICATES;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("zero-area box {0:?}")]
    DegenerateBox([f64; 4]),
    #[error("non-finite {component} loss: {value}")]
    NonFinite { component: &'static str, value: f64 },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_t: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub w_l1: f64,
    pub w_giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_t: 0.1,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            w_l1: 5.0,
            w_giou: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [
            self.lambda_c,
            self.lambda_t,
            self.focal_alpha,
            self.focal_gamma,
            self.w_l1,
            self.w_giou,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(LossError::InvalidWeights("non-finite weight".into()));
        }
        if self.lambda_c < 0.0 || self.lambda_t < 0.0 {
            return Err(LossError::InvalidWeights("lambda_c and lambda_t must be >= 0".into()));
        }
        Ok(())
    }
}

/// `y = 1`: `-a (1-p)^g log p`; `y = 0`: `-(1-a) p^g log(1-p)`, with `p` clamped to `[1e-6, 1-1e-6]`.
pub fn focal_loss(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    focal_value(p, y, alpha, gamma)
}

/// `1 - GIoU(a, b)`.
pub fn giou_loss(a: &BBox, b: &BBox) -> Result<f64, LossError> {
    for bx in [a, b] {
        if !(bx.width() > 0.0 && bx.height() > 0.0) {
            return Err(LossError::DegenerateBox(bx.to_array()));
        }
    }
    Ok(1.0 - a.giou(b))
}

/// Sum of `1 - GIoU` between predicted `[n, 4]` xyxy boxes and fixed targets.
pub fn giou_loss_sum(g: &mut Graph, pred: Var, targets: &[BBox]) -> Var {
    let n = targets.len();
    assert_eq!(g.shape(pred), &[n, 4], "giou: prediction shape");
    let col = |g: &mut Graph, k: usize| g.slice(pred, 1, k, 1);
    let (px1, py1, px2, py2) = (col(g, 0), col(g, 1), col(g, 2), col(g, 3));
    let tcol = |g: &mut Graph, f: fn(&BBox) -> f64| {
        g.constant(Tensor::new(&[n, 1], targets.iter().map(f).collect()))
    };
    let tx1 = tcol(g, |b| b.x1);
    let ty1 = tcol(g, |b| b.y1);
    let tx2 = tcol(g, |b| b.x2);
    let ty2 = tcol(g, |b| b.y2);
    let t_area = g.constant(Tensor::new(&[n, 1], targets.iter().map(BBox::area).collect()));

    let pw = g.sub(px2, px1);
    let ph = g.sub(py2, py1);
    let p_area = g.mul(pw, ph);

    let ix2 = g.minimum(px2, tx2);
    let ix1 = g.maximum(px1, tx1);
    let iw = g.sub(ix2, ix1);
    let iw = g.relu(iw);
    let iy2 = g.minimum(py2, ty2);
    let iy1 = g.maximum(py1, ty1);
    let ih = g.sub(iy2, iy1);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih);

    let areas = g.add(p_area, t_area);
    let union = g.sub(areas, inter);
    let iou = g.div(inter, union);

    let hx2 = g.maximum(px2, tx2);
    let hx1 = g.minimum(px1, tx1);
    let hw = g.sub(hx2, hx1);
    let hy2 = g.maximum(py2, ty2);
    let hy1 = g.minimum(py1, ty1);
    let hh = g.sub(hy2, hy1);
    let hull = g.mul(hw, hh);
    let empty = g.sub(hull, union);
    let frac = g.div(empty, hull);
    let giou = g.sub(iou, frac);
    let s = g.sum(giou);
    let neg = g.scale(s, -1.0);
    g.add_scalar(neg, n as f64)
}

/// Fixed targets for one ground-truth subject-object pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTarget {
    pub subject: u32,
    pub object: u32,
    /// Per view (model view order): `[subject box, object box]`; `None` when not visible.
    pub boxes: Vec<[Option<BBox>; 2]>,
    pub labels: [f64; NUM_PREDICATES],
}

/// Coordinate loss over matched queries plus presence focal over all queries.
///
/// `boxes` is `[Q, V, 2, 4]` (xyxy), `scores` is `[Q, 2]` probabilities,
/// `assignment` pairs query indices with target indices.
pub fn coord_loss(
    g: &mut Graph,
    boxes: Var,
    scores: Var,
    assignment: &[(usize, usize)],
    targets: &[PairTarget],
    w: &LossWeights,
) -> Var {
    let shape = g.shape(boxes).to_vec();
    let (q, v) = (shape[0], shape[1]);
    let rows = g.reshape(boxes, &[q * v * 2, 4]);
    let mut idx = Vec::new();
    let mut tgt = Vec::new();
    for &(qi, ti) in assignment {
        for (vi, pair) in targets[ti].boxes.iter().enumerate() {
            for (role, b) in pair.iter().enumerate() {
                if let Some(b) = b {
                    idx.push((qi * v + vi) * 2 + role);
                    tgt.push(*b);
                }
            }
        }
    }
    let mut presence = vec![0.0; q * 2];
    for &(qi, _) in assignment {
        presence[qi * 2] = 1.0;
        presence[qi * 2 + 1] = 1.0;
    }
    let f = g.focal(scores, &presence, w.focal_alpha, w.focal_gamma);
    let mut total = g.sum(f);
    if !idx.is_empty() {
        let pred = g.gather_rows(rows, &idx);
        let t = g.constant(Tensor::new(
            &[tgt.len(), 4],
            tgt.iter().flat_map(|b| b.to_array()).collect(),
        ));
        let d = g.sub(pred, t);
        let a = g.abs(d);
        let l1 = g.sum(a);
        let l1 = g.scale(l1, w.w_l1 / 4.0);
        let gi = giou_loss_sum(g, pred, &tgt);
        let gi = g.scale(gi, w.w_giou);
        total = g.add(total, l1);
        total = g.add(total, gi);
    }
    let norm = assignment.len().max(1) as f64;
    g.scale(total, 1.0 / norm)
}

/// Focal loss summed over all `N x Z` terms, divided by the number of positive labels (at least 1).
pub fn relation_cls_loss(
    g: &mut Graph,
    scores: Var,
    labels: &[[f64; NUM_PREDICATES]],
    w: &LossWeights,
) -> Var {
    let flat: Vec<f64> = labels.iter().flat_map(|l| l.iter().copied()).collect();
    let positives = flat.iter().filter(|y| **y > 0.5).count();
    let f = g.focal(scores, &flat, w.focal_alpha, w.focal_gamma);
    let s = g.sum(f);
    g.scale(s, 1.0 / positives.max(1) as f64)
}

/// Scalar form of the cls loss (reference for tests and evaluation logs).
pub fn relation_cls_loss_value(scores: &[f64], labels: &[f64], w: &LossWeights) -> f64 {
    let positives = labels.iter().filter(|y| **y > 0.5).count();
    let s: f64 = scores
        .iter()
        .zip(labels)
        .map(|(p, y)| focal_loss(*p, *y, w.focal_alpha, w.focal_gamma))
        .sum();
    s / positives.max(1) as f64
}

/// `coord + lambda_c * cls + lambda_t * text`.
pub fn total_loss_value(coord: f64, cls: f64, text: f64, w: &LossWeights) -> Result<f64, LossError> {
    check_finite(coord, cls, text)?;
    Ok(coord + w.lambda_c * cls + w.lambda_t * text)
}

fn check_finite(coord: f64, cls: f64, text: f64) -> Result<(), LossError> {
    for (component, value) in [("coord", coord), ("cls", cls), ("text", text)] {
        if !value.is_finite() {
            return Err(LossError::NonFinite { component, value });
        }
    }
    Ok(())
}

/// Differentiable total loss; errors if any component is non-finite.
pub fn total_loss(
    g: &mut Graph,
    coord: Var,
    cls: Var,
    text: Var,
    w: &LossWeights,
) -> Result<Var, LossError> {
    check_finite(g.value(coord).item(), g.value(cls).item(), g.value(text).item())?;
    let c = g.scale(cls, w.lambda_c);
    let t = g.scale(text, w.lambda_t);
    let s = g.add(coord, c);
    Ok(g.add(s, t))
}
