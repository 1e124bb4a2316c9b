//! Relation-aware pair decoder: learned pair queries attend to the fused
//! multi-view feature tokens and regress per-view subject/object boxes and
//! presence scores.

pub mod matcher;
pub mod roi_align;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::boxes::BBox;
use crate::nn::{LayerNorm, Linear, Mlp2, MultiHeadAttention};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub use matcher::{hungarian, matching_cost, CostWeights, MatchError, MatchResult, QueryPrediction};
pub use roi_align::{roi_align, RoiError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub queries: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            queries: 20,
            layers: 3,
            heads: 8,
            ffn_dim: 512,
        }
    }
}

/// 2-D sine positional encoding for an `h x w` grid, `[h * w, dim]`.
///
/// The first half of the channels encodes the row, the second half the column.
pub fn sine_position_encoding(h: usize, w: usize, dim: usize) -> Tensor {
    assert!(dim % 4 == 0, "positional encoding width must be divisible by 4");
    let half = dim / 2;
    let mut out = vec![0.0; h * w * dim];
    let scale = 2.0 * std::f64::consts::PI;
    for i in 0..h {
        for j in 0..w {
            let y = (i as f64 + 0.5) / h as f64 * scale;
            let x = (j as f64 + 0.5) / w as f64 * scale;
            let row = &mut out[(i * w + j) * dim..][..dim];
            for k in 0..half / 2 {
                let freq = 10000f64.powf(2.0 * k as f64 / half as f64);
                row[2 * k] = (y / freq).sin();
                row[2 * k + 1] = (y / freq).cos();
                row[half + 2 * k] = (x / freq).sin();
                row[half + 2 * k + 1] = (x / freq).cos();
            }
        }
    }
    Tensor::new(&[h * w, dim], out)
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: Mlp2,
    norm3: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct PairDecoder {
    pub config: DecoderConfig,
    pub dim: usize,
    pub num_views: usize,
    query_content: ParamId,
    query_pos: ParamId,
    view_embed: ParamId,
    layers: Vec<DecoderLayer>,
    box_head: Mlp2,
    score_head: Linear,
}

/// Differentiable decoder outputs for all queries.
pub struct DecoderOutput {
    /// `[Q, V, 2, 4]` xyxy boxes (subject, object per view).
    pub boxes: Var,
    /// `[Q, 2]` subject/object presence probabilities.
    pub scores: Var,
    /// `[Q, D]` final query embeddings.
    pub embeddings: Var,
}

/// Plain-value view of one query's prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct PairProposal {
    pub query_index: usize,
    /// Per view: `[subject, object]` in normalised xyxy.
    pub boxes: Vec<[BBox; 2]>,
    pub subject_score: f64,
    pub object_score: f64,
    pub embedding: Vec<f64>,
}

impl PairDecoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        config: DecoderConfig,
        dim: usize,
        num_views: usize,
    ) -> Self {
        let q = config.queries;
        let query_content = store.add(format!("{name}.query_content"), init.normal(&[q, dim], 0.1));
        let query_pos = store.add(format!("{name}.query_pos"), init.normal(&[q, dim], 1.0));
        let view_embed = store.add(format!("{name}.view_embed"), init.normal(&[num_views, dim], 0.1));
        let layers = (0..config.layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(store, init, &format!("{p}.self_attn"), dim, config.heads),
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), dim),
                    cross_attn: MultiHeadAttention::new(store, init, &format!("{p}.cross_attn"), dim, config.heads),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), dim),
                    ffn: Mlp2::new(store, init, &format!("{p}.ffn"), dim, config.ffn_dim, dim),
                    norm3: LayerNorm::new(store, &format!("{p}.norm3"), dim),
                }
            })
            .collect();
        let box_head = Mlp2::new(store, init, &format!("{name}.box_head"), dim, dim, num_views * 2 * 4);
        let score_head = Linear::new(store, init, &format!("{name}.score_head"), dim, 2, true);
        Self {
            config,
            dim,
            num_views,
            query_content,
            query_pos,
            view_embed,
            layers,
            box_head,
            score_head,
        }
    }

    /// Decodes `Q` pair proposals from per-view fused maps (`[h, w, D]` each).
    pub fn forward(&self, g: &mut Graph, fused: &[Var]) -> DecoderOutput {
        assert_eq!(fused.len(), self.num_views, "decoder expects one fused map per view");
        let d = self.dim;
        let view_embed = g.param(self.view_embed);
        let mut mem_parts = Vec::new();
        let mut key_parts = Vec::new();
        for (vi, &f) in fused.iter().enumerate() {
            let s = g.shape(f).to_vec();
            let (h, w) = (s[0], s[1]);
            let tokens = g.reshape(f, &[h * w, d]);
            let pe = g.constant(sine_position_encoding(h, w, d));
            let ve = g.slice(view_embed, 0, vi, 1);
            let ve = g.reshape(ve, &[d]);
            let pos = g.add_row(pe, ve);
            let key = g.add(tokens, pos);
            mem_parts.push(tokens);
            key_parts.push(key);
        }
        let memory = g.concat(&mem_parts, 0);
        let mem_keys = g.concat(&key_parts, 0);
        let qpos = g.param(self.query_pos);
        let mut tgt = g.param(self.query_content);
        for layer in &self.layers {
            let q = g.add(tgt, qpos);
            let sa = layer.self_attn.forward(g, q, q, tgt).output;
            let x = g.add(tgt, sa);
            tgt = layer.norm1.forward(g, x);
            let q = g.add(tgt, qpos);
            let ca = layer.cross_attn.forward(g, q, mem_keys, memory).output;
            let x = g.add(tgt, ca);
            tgt = layer.norm2.forward(g, x);
            let ff = layer.ffn.forward(g, tgt);
            let x = g.add(tgt, ff);
            tgt = layer.norm3.forward(g, x);
        }
        let q = self.config.queries;
        let raw = self.box_head.forward(g, tgt);
        let cxcywh = g.sigmoid(raw);
        let rows = g.reshape(cxcywh, &[q * self.num_views * 2, 4]);
        let conv = g.constant(cxcywh_to_xyxy_matrix());
        let xyxy = g.matmul(rows, conv);
        let boxes = g.reshape(xyxy, &[q, self.num_views, 2, 4]);
        let logits = self.score_head.forward(g, tgt);
        let scores = g.sigmoid(logits);
        DecoderOutput {
            boxes,
            scores,
            embeddings: tgt,
        }
    }
}

/// Right-multiplying `[cx, cy, w, h]` rows gives `[x1, y1, x2, y2]`.
fn cxcywh_to_xyxy_matrix() -> Tensor {
    Tensor::new(
        &[4, 4],
        vec![
            1.0, 0.0, 1.0, 0.0, //
            0.0, 1.0, 0.0, 1.0, //
            -0.5, 0.0, 0.5, 0.0, //
            0.0, -0.5, 0.0, 0.5,
        ],
    )
}

impl DecoderOutput {
    /// Extracts plain-value proposals (boxes left unclamped).
    pub fn proposals(&self, g: &Graph) -> Vec<PairProposal> {
        let b = g.value(self.boxes);
        let (q, v) = (b.shape()[0], b.shape()[1]);
        let s = g.value(self.scores).data();
        let e = g.value(self.embeddings);
        (0..q)
            .map(|qi| {
                let boxes = (0..v)
                    .map(|vi| {
                        let at = |role: usize| {
                            let o = ((qi * v + vi) * 2 + role) * 4;
                            let d = &b.data()[o..o + 4];
                            BBox::new(d[0], d[1], d[2], d[3])
                        };
                        [at(0), at(1)]
                    })
                    .collect();
                PairProposal {
                    query_index: qi,
                    boxes,
                    subject_score: s[qi * 2],
                    object_score: s[qi * 2 + 1],
                    embedding: e.row(qi).to_vec(),
                }
            })
            .collect()
    }

    pub fn query_predictions(&self, g: &Graph) -> Vec<QueryPrediction> {
        self.proposals(g)
            .into_iter()
            .map(|p| QueryPrediction {
                boxes: p.boxes,
                scores: [p.subject_score, p.object_score],
            })
            .collect()
    }
}
