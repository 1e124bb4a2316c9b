//! Per-predicate precision / recall / F1 over predicted and ground-truth scene graphs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::BBox;
use crate::graph::{Predicate, SceneGraph, NUM_PREDICATES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("prediction stream has {pred} frames but ground truth has {gt}")]
    Length { pred: usize, gt: usize },
    #[error("frame {position}: prediction is for {pred}, ground truth is {gt}")]
    Misaligned { position: usize, pred: String, gt: String },
    #[error("invalid threshold {0}; expected a value in (0, 1]")]
    Threshold(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub iou_thresh: f64,
    pub score_thresh: f64,
    pub reference_view: String,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            score_thresh: 0.5,
            reference_view: "view1".into(),
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        for t in [self.iou_thresh, self.score_thresh] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(MetricsError::Threshold(t));
            }
        }
        Ok(())
    }
}

/// One predicted relation with per-view subject/object boxes and scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedTriplet {
    pub query: usize,
    pub predicate: Predicate,
    pub score: f64,
    pub subject_score: f64,
    pub object_score: f64,
    pub subject_boxes: BTreeMap<String, BBox>,
    pub object_boxes: BTreeMap<String, BBox>,
}

/// Predictions for one frame of one take.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub take: String,
    pub frame_index: u64,
    pub triplets: Vec<PredictedTriplet>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Predictions passing the presence and relation score thresholds, in greedy order
/// (descending relation score, ties by lower query index, then predicate order).
pub fn ranked_predictions<'a>(preds: &'a [PredictedTriplet], cfg: &MatchConfig) -> Vec<&'a PredictedTriplet> {
    let t = cfg.score_thresh;
    let mut kept: Vec<&PredictedTriplet> = preds
        .iter()
        .filter(|p| p.subject_score >= t && p.object_score >= t && p.score >= t)
        .collect();
    kept.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.query.cmp(&b.query))
            .then(a.predicate.index().cmp(&b.predicate.index()))
    });
    kept
}

/// Whether prediction `p` may be matched with the ground-truth triplet `gi`; returns the
/// smaller of the two reference-view IoUs.
pub fn match_quality(p: &PredictedTriplet, gt: &SceneGraph, gi: usize, cfg: &MatchConfig) -> Option<f64> {
    let t = &gt.triplets()[gi];
    if t.predicate != p.predicate {
        return None;
    }
    let v = &cfg.reference_view;
    let gs = gt.entity(t.subject)?.boxes.get(v)?;
    let go = gt.entity(t.object)?.boxes.get(v)?;
    let ps = p.subject_boxes.get(v)?;
    let po = p.object_boxes.get(v)?;
    let (is, io) = (ps.iou(gs), po.iou(go));
    (is >= cfg.iou_thresh && io >= cfg.iou_thresh).then_some(is.min(io))
}

/// Greedy one-to-one matching of one frame; counts per predicate in taxonomy order.
pub fn match_triplets(preds: &[PredictedTriplet], gt: &SceneGraph, cfg: &MatchConfig) -> [Counts; NUM_PREDICATES] {
    let mut counts = [Counts::default(); NUM_PREDICATES];
    let mut used = vec![false; gt.triplets().len()];
    for p in ranked_predictions(preds, cfg) {
        let mut best: Option<(usize, f64)> = None;
        for gi in 0..used.len() {
            if used[gi] {
                continue;
            }
            if let Some(q) = match_quality(p, gt, gi, cfg) {
                if best.map_or(true, |(_, b)| q > b) {
                    best = Some((gi, q));
                }
            }
        }
        let c = &mut counts[p.predicate.index()];
        match best {
            Some((gi, _)) => {
                used[gi] = true;
                c.tp += 1;
            }
            None => c.fp += 1,
        }
    }
    for (gi, t) in gt.triplets().iter().enumerate() {
        if !used[gi] {
            counts[t.predicate.index()].fn_ += 1;
        }
    }
    counts
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

pub fn macro_average(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub predicate: Predicate,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub per_predicate: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
}

impl EvalReport {
    pub fn from_counts(counts: &[Counts; NUM_PREDICATES], frames: usize) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let per_predicate: Vec<ClassMetrics> = Predicate::ALL
            .iter()
            .zip(counts)
            .map(|(&predicate, c)| {
                let precision = ratio(c.tp, c.tp + c.fp);
                let recall = ratio(c.tp, c.tp + c.fn_);
                ClassMetrics {
                    predicate,
                    precision,
                    recall,
                    f1: f1(precision, recall),
                    tp: c.tp,
                    fp: c.fp,
                    fn_: c.fn_,
                }
            })
            .collect();
        let col = |f: fn(&ClassMetrics) -> f64| macro_average(&per_predicate.iter().map(f).collect::<Vec<_>>());
        let macro_avg = MacroMetrics {
            precision: col(|c| c.precision),
            recall: col(|c| c.recall),
            f1: col(|c| c.f1),
        };
        Self {
            frames,
            per_predicate,
            macro_avg,
        }
    }

    pub fn class(&self, p: Predicate) -> &ClassMetrics {
        &self.per_predicate[p.index()]
    }
}

/// Ground truth for one frame of one take.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTruth {
    pub take: String,
    pub graph: SceneGraph,
}

/// Accumulates counts over aligned prediction and ground-truth streams.
pub fn evaluate(preds: &[FramePrediction], gts: &[FrameTruth], cfg: &MatchConfig) -> Result<EvalReport, MetricsError> {
    cfg.validate()?;
    if preds.len() != gts.len() {
        return Err(MetricsError::Length {
            pred: preds.len(),
            gt: gts.len(),
        });
    }
    let mut total = [Counts::default(); NUM_PREDICATES];
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.take != g.take || p.frame_index != g.graph.frame_index() {
            return Err(MetricsError::Misaligned {
                position: i,
                pred: format!("{}#{}", p.take, p.frame_index),
                gt: format!("{}#{}", g.take, g.graph.frame_index()),
            });
        }
        let c = match_triplets(&p.triplets, &g.graph, cfg);
        for (t, x) in total.iter_mut().zip(c) {
            *t += x;
        }
    }
    Ok(EvalReport::from_counts(&total, preds.len()))
}
