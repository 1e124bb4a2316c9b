//! The full tri-modal pipeline: image and point branches, pair decoding, set
//! matching, feature unification, knowledge transfer and relation classification.

use std::collections::BTreeMap;

use image::RgbImage;
use thiserror::Error;

use crate::autograd::{Graph, RowTaps, Var};
use crate::boxes::BBox;
use crate::camera::CameraModel;
use crate::config::{BoxSource, ConfigError, EmbeddingProvider, RunConfig};
use crate::graph::{enumerate_pairs, EntityTaxonomy, Predicate, SceneGraph, NUM_PREDICATES};
use crate::losses::{coord_loss, relation_cls_loss, total_loss, LossError, PairTarget};
use crate::metrics::PredictedTriplet;
use crate::pair_decoder::roi_align::roi_align_taps;
use crate::pair_decoder::{hungarian, matching_cost, DecoderOutput, MatchError, PairDecoder};
use crate::params::{Init, ParamStore};
use crate::pointtemp::{PointSequence, PointTemp, PointTempError, PointTempOutput};
use crate::synth::{FrameSample, VIEWS};
use crate::tensor::Tensor;
use crate::unify::{align_loss, frustum_select_multi, init_classifier, EmbeddingTable, RelationClassifier, Unifier, UnifyError};
use crate::viewtemp::{PatchBackbone, ViewTempBranch, ViewTempError};

/// Per-point attributes fed to the point branch (RGB).
pub const POINT_ATTRS: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    ViewTemp(#[from] ViewTempError),
    #[error(transparent)]
    PointTemp(#[from] PointTempError),
    #[error(transparent)]
    Unify(#[from] UnifyError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("window is empty")]
    EmptyWindow,
    #[error("frame {frame} has no {what} for {view}")]
    MissingView { frame: u64, view: String, what: &'static str },
    #[error("entity {0} is missing from the graph")]
    Label(u32),
    #[error("text.provider needs an embedding table")]
    NoEmbeddings,
}

/// `[H, W, 3]` tensor with values in `[0, 1]`.
pub fn image_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    Tensor::new(
        &[h as usize, w as usize, 3],
        img.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
    )
}

/// Loss components of one window.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub coord: f64,
    pub cls: f64,
    pub text: f64,
    pub total: f64,
}

/// Encoder and decoder outputs for one window.
pub struct Encoded {
    /// Per view (in [`VIEWS`] order), `[h, w, D]`.
    pub fused: Vec<Var>,
    /// All fused tokens of all views, `[V * h * w, D]`.
    pub memory: Var,
    pub hw: (usize, usize),
    pub points: Option<PointTempOutput>,
    pub decoder: DecoderOutput,
}

/// Per-view `[subject, object]` boxes of the pairs handed to the relation head.
pub type PairBoxes = Vec<[Option<BBox>; 2]>;

pub struct TriTempModel {
    pub config: RunConfig,
    pub taxonomy: EntityTaxonomy,
    pub embeddings: Option<EmbeddingTable>,
    pub store: ParamStore,
    pub embed_dim: usize,
    backbone: PatchBackbone,
    branches: Vec<ViewTempBranch>,
    pointtemp: Option<PointTemp>,
    decoder: PairDecoder,
    unifier: Unifier,
    classifier: RelationClassifier,
}

impl TriTempModel {
    /// Builds and initialises the model. `embeddings` must be present unless the provider is `none`.
    pub fn new(config: &RunConfig, embeddings: Option<EmbeddingTable>) -> Result<Self, ModelError> {
        config.validate()?;
        let taxonomy = config.taxonomy()?;
        let embeddings = match config.text.provider {
            EmbeddingProvider::None => None,
            _ => {
                let t = embeddings.ok_or(ModelError::NoEmbeddings)?;
                t.check_complete(&taxonomy)?;
                Some(t)
            }
        };
        let embed_dim = embeddings.as_ref().map_or(config.text.dim, |t| t.dim);
        if embed_dim % config.unify.heads != 0 {
            return Err(ConfigError::Invalid {
                key: "unify.heads",
                message: format!("{} heads do not divide embedding width {embed_dim}", config.unify.heads),
            }
            .into());
        }
        let d = config.model.width;
        let mut store = ParamStore::new();
        let mut init = Init::new(config.seed);
        let backbone = PatchBackbone::new(&mut store, &mut init, &config.backbone, d)?;
        let mut branches = Vec::new();
        if config.viewtemp.enabled {
            for v in VIEWS {
                branches.push(ViewTempBranch::new(
                    &mut store,
                    &mut init,
                    &format!("viewtemp.{v}"),
                    config.kernel_set(v)?,
                    &config.viewtemp,
                    d,
                    config.temporal.l,
                )?);
            }
        }
        let pointtemp = if config.pointtemp.enabled {
            Some(PointTemp::new(&mut store, &mut init, &config.pointtemp, POINT_ATTRS, d)?)
        } else {
            None
        };
        let decoder = PairDecoder::new(&mut store, &mut init, "decoder", config.decoder.clone(), d, VIEWS.len());
        let unifier = Unifier::new(&mut store, &mut init, d, embed_dim);
        let classifier = RelationClassifier::new(&mut store, &mut init, d, embed_dim, config.unify.heads);
        if let Some(t) = &embeddings {
            init_classifier(&mut store, &classifier, t)?;
        }
        Ok(Self {
            config: config.clone(),
            taxonomy,
            embeddings,
            store,
            embed_dim,
            backbone,
            branches,
            pointtemp,
            decoder,
            unifier,
            classifier,
        })
    }

    pub fn classifier(&self) -> &RelationClassifier {
        &self.classifier
    }

    /// Runs both encoders and the pair decoder on a window (oldest frame first).
    pub fn encode(&self, g: &mut Graph, window: &[FrameSample]) -> Result<Encoded, ModelError> {
        if window.is_empty() {
            return Err(ModelError::EmptyWindow);
        }
        let mut images = Vec::with_capacity(VIEWS.len());
        for v in VIEWS {
            let frames = window
                .iter()
                .map(|f| {
                    f.images.get(v).map(image_tensor).ok_or_else(|| ModelError::MissingView {
                        frame: f.frame_index,
                        view: v.into(),
                        what: "image",
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            images.push((v.to_string(), frames));
        }
        let blocks = self.backbone.extract_features(g, &images)?;
        let fused = if self.branches.is_empty() {
            blocks.iter().map(|b| b.current()).collect::<Vec<_>>()
        } else {
            self.branches
                .iter()
                .zip(&blocks)
                .map(|(br, b)| br.forward(g, b))
                .collect::<Result<Vec<_>, _>>()?
        };
        let (h, w) = (blocks[0].h, blocks[0].w);
        let d = self.config.model.width;
        let flat: Vec<Var> = fused.iter().map(|&f| g.reshape(f, &[h * w, d])).collect();
        let memory = g.concat(&flat, 0);
        let points = match &self.pointtemp {
            Some(pt) => {
                let seq = PointSequence::new(window.iter().map(|f| f.points.clone()).collect());
                Some(pt.forward(g, &seq)?)
            }
            None => None,
        };
        let decoder = self.decoder.forward(g, &fused);
        Ok(Encoded {
            fused,
            memory,
            hw: (h, w),
            points,
            decoder,
        })
    }

    /// Spatially averaged RoI features (views averaged) for one role of every pair, `[N, D]`.
    fn roi_features(&self, g: &mut Graph, enc: &Encoded, pairs: &[PairBoxes], role: usize) -> Var {
        let (h, w) = enc.hw;
        let out = self.config.roi.output_size;
        let bins = (out * out) as f64;
        let taps: RowTaps = pairs
            .iter()
            .map(|views| {
                let usable: Vec<(usize, BBox)> = views
                    .iter()
                    .enumerate()
                    .filter_map(|(vi, b)| b[role].map(|b| (vi, b.clamped())))
                    .filter(|(_, b)| b.width() > 0.0 && b.height() > 0.0)
                    .collect();
                let n = usable.len() as f64;
                let mut row = Vec::new();
                for (vi, b) in usable {
                    let t = roi_align_taps(h, w, &b, out).expect("non-degenerate box");
                    row.extend(t.into_iter().flatten().map(|(i, wt)| (vi * h * w + i, wt / (bins * n))));
                }
                row
            })
            .collect();
        g.sparse_rows(enc.memory, taps)
    }

    /// Max-pooled point-token features of one role of every pair plus validity flags.
    fn point_features(
        &self,
        g: &mut Graph,
        enc: &Encoded,
        pairs: &[PairBoxes],
        role: usize,
        frame: &FrameSample,
    ) -> Result<(Var, Vec<bool>), ModelError> {
        let d = self.config.model.width;
        let Some(pt) = &enc.points else {
            return Ok((g.constant(Tensor::zeros(&[pairs.len(), d])), vec![false; pairs.len()]));
        };
        let mut groups = Vec::with_capacity(pairs.len());
        for views in pairs {
            let mut sel: Vec<(&BBox, &CameraModel)> = Vec::new();
            let clamped: Vec<Option<BBox>> = views.iter().map(|b| b[role].map(|b| b.clamped())).collect();
            for (vi, b) in clamped.iter().enumerate() {
                if let Some(b) = b {
                    let cam = frame.cameras.get(VIEWS[vi]).ok_or_else(|| ModelError::MissingView {
                        frame: frame.frame_index,
                        view: VIEWS[vi].into(),
                        what: "camera",
                    })?;
                    sel.push((b, cam));
                }
            }
            let idx = frustum_select_multi(&sel, &frame.points.xyz);
            let mut rows: Vec<usize> = idx.iter().map(|&i| pt.final_offset + pt.assignment[i]).collect();
            rows.sort_unstable();
            rows.dedup();
            groups.push(rows);
        }
        let flags = groups.iter().map(|g| !g.is_empty()).collect();
        Ok((g.segment_max(pt.tokens, &groups), flags))
    }

    /// Unified pair vectors `[N, E]` and relation scores `[N, Z]`.
    pub fn relation_head(
        &self,
        g: &mut Graph,
        enc: &Encoded,
        pairs: &[PairBoxes],
        frame: &FrameSample,
    ) -> Result<(Var, Var), ModelError> {
        let s2 = self.roi_features(g, enc, pairs, 0);
        let o2 = self.roi_features(g, enc, pairs, 1);
        let (s3, fs) = self.point_features(g, enc, pairs, 0, frame)?;
        let (o3, fo) = self.point_features(g, enc, pairs, 1, frame)?;
        let flags: Vec<(bool, bool)> = fs.into_iter().zip(fo).collect();
        let unified = self.unifier.forward(g, s2, o2, s3, o3, &flags);
        let cls = self.classifier.forward(g, unified, enc.memory);
        Ok((unified, cls.scores))
    }

    /// Ground-truth pair targets of a graph in model view order.
    pub fn pair_targets(graph: &SceneGraph) -> Vec<PairTarget> {
        enumerate_pairs(graph)
            .into_iter()
            .map(|p| {
                let boxes = |id: u32, v: &str| graph.entity(id).and_then(|e| e.boxes.get(v).copied());
                PairTarget {
                    subject: p.subject,
                    object: p.object,
                    boxes: VIEWS.iter().map(|v| [boxes(p.subject, v), boxes(p.object, v)]).collect(),
                    labels: p.labels,
                }
            })
            .collect()
    }

    /// Differentiable total loss of one window, with its components.
    pub fn loss(&self, g: &mut Graph, window: &[FrameSample]) -> Result<(Var, LossParts), ModelError> {
        let frame = window.last().ok_or(ModelError::EmptyWindow)?;
        let enc = self.encode(g, window)?;
        let targets = Self::pair_targets(&frame.graph);
        let assignment = if targets.is_empty() {
            Vec::new()
        } else {
            let preds = enc.decoder.query_predictions(g);
            let cost = matching_cost(&preds, &targets, &self.config.matcher, &self.config.loss);
            hungarian(&cost)?.assignment
        };
        let w = &self.config.loss;
        let coord = coord_loss(g, enc.decoder.boxes, enc.decoder.scores, &assignment, &targets, w);
        let (cls, text) = if assignment.is_empty() {
            (g.constant(Tensor::scalar(0.0)), g.constant(Tensor::scalar(0.0)))
        } else {
            let pairs: Vec<PairBoxes> = match self.config.unify.train_boxes {
                BoxSource::GroundTruth => assignment.iter().map(|&(_, t)| targets[t].boxes.clone()).collect(),
                BoxSource::Predicted => {
                    let props = enc.decoder.proposals(g);
                    assignment
                        .iter()
                        .map(|&(q, _)| props[q].boxes.iter().map(|[s, o]| [Some(*s), Some(*o)]).collect())
                        .collect()
                }
            };
            let (unified, scores) = self.relation_head(g, &enc, &pairs, frame)?;
            let labels: Vec<[f64; NUM_PREDICATES]> = assignment.iter().map(|&(_, t)| targets[t].labels).collect();
            let cls = relation_cls_loss(g, scores, &labels, w);
            let text = match &self.embeddings {
                None => g.constant(Tensor::scalar(0.0)),
                Some(table) => {
                    let mut tgt = Vec::with_capacity(assignment.len());
                    for &(_, t) in &assignment {
                        let pt = &targets[t];
                        let label = |id: u32| {
                            frame
                                .graph
                                .entity(id)
                                .map(|e| e.label.clone())
                                .ok_or(ModelError::Label(id))
                        };
                        let preds: Vec<Predicate> = pt
                            .labels
                            .iter()
                            .enumerate()
                            .filter(|(_, y)| **y > 0.5)
                            .map(|(i, _)| Predicate::ALL[i])
                            .collect();
                        tgt.push(table.triplet_target(&label(pt.subject)?, &label(pt.object)?, &preds)?);
                    }
                    align_loss(g, Some(unified), &tgt)
                }
            };
            (cls, text)
        };
        let total = total_loss(g, coord, cls, text, w)?;
        let parts = LossParts {
            coord: g.value(coord).item(),
            cls: g.value(cls).item(),
            text: g.value(text).item(),
            total: g.value(total).item(),
        };
        Ok((total, parts))
    }

    /// Relation predictions of every query for the newest frame of `window`.
    pub fn predict(&self, window: &[FrameSample], min_score: f64) -> Result<Vec<PredictedTriplet>, ModelError> {
        let frame = window.last().ok_or(ModelError::EmptyWindow)?;
        let mut g = Graph::inference(&self.store);
        let enc = self.encode(&mut g, window)?;
        let props = enc.decoder.proposals(&g);
        let pairs: Vec<PairBoxes> = props
            .iter()
            .map(|p| p.boxes.iter().map(|[s, o]| [Some(*s), Some(*o)]).collect())
            .collect();
        let (_, scores) = self.relation_head(&mut g, &enc, &pairs, frame)?;
        let s = g.value(scores);
        let mut out = Vec::new();
        for p in &props {
            let view_map = |role: usize| -> BTreeMap<String, BBox> {
                VIEWS
                    .iter()
                    .zip(&p.boxes)
                    .map(|(v, b)| (v.to_string(), b[role].clamped()))
                    .collect()
            };
            for (z, &score) in s.row(p.query_index).iter().enumerate() {
                if score >= min_score {
                    out.push(PredictedTriplet {
                        query: p.query_index,
                        predicate: Predicate::ALL[z],
                        score,
                        subject_score: p.subject_score,
                        object_score: p.object_score,
                        subject_boxes: view_map(0),
                        object_boxes: view_map(1),
                    });
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_clip, ClipSpec};

    fn tiny() -> RunConfig {
        let mut c = RunConfig::overfit();
        c.model.width = 16;
        c.backbone.hidden = 16;
        c.decoder.queries = 4;
        c.decoder.heads = 4;
        c.decoder.ffn_dim = 16;
        c.decoder.layers = 1;
        c.pointtemp.anchors = 8;
        c.pointtemp.hidden = 8;
        c.text.dim = 8;
        c
    }

    fn clip() -> Vec<FrameSample> {
        generate_clip(&ClipSpec {
            num_frames: 3,
            image_size: (64, 96),
            points_per_frame: 256,
            ..ClipSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn loss_and_predict_are_finite() {
        let c = tiny();
        let tax = c.taxonomy().unwrap();
        let table = EmbeddingTable::pseudo(&tax, 1, 8, 0.3);
        let m = TriTempModel::new(&c, Some(table)).unwrap();
        let frames = clip();
        let mut g = Graph::with_params(&m.store);
        let (total, parts) = m.loss(&mut g, &frames).unwrap();
        assert!(parts.total.is_finite() && parts.total > 0.0);
        let grads = g.backward(total);
        assert!(!grads.params().is_empty());
        let preds = m.predict(&frames, 0.0).unwrap();
        assert_eq!(preds.len(), 4 * NUM_PREDICATES);
    }

    #[test]
    fn ablated_components_still_run() {
        let mut c = tiny();
        c.viewtemp.enabled = false;
        c.pointtemp.enabled = false;
        c.text.provider = EmbeddingProvider::None;
        let m = TriTempModel::new(&c, None).unwrap();
        let frames = clip();
        let mut g = Graph::with_params(&m.store);
        let (_, parts) = m.loss(&mut g, &frames).unwrap();
        assert_eq!(parts.text, 0.0);
        assert!(parts.total.is_finite());
    }
}
