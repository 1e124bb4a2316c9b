//! Geometric-temporal point aggregation: point 4D convolution over
//! spatio-temporal neighbourhoods followed by global self-attention over the
//! resulting anchor tokens.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::nn::{LayerNorm, Linear, Mlp2, MultiHeadAttention};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PointTempError {
    #[error("radius must be positive, got {0}")]
    Radius(f64),
    #[error("temporal window must be odd, got {0}")]
    Window(usize),
    #[error("{anchors} anchors requested but frame {frame} has only {points} points")]
    TooFewPoints {
        frame: usize,
        points: usize,
        anchors: usize,
    },
    #[error("empty point sequence")]
    Empty,
    #[error("non-finite coordinate in frame {0}")]
    NonFinite(usize),
    #[error("frame {frame} attribute width {got}, expected {expected}")]
    Attributes {
        frame: usize,
        got: usize,
        expected: usize,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointFrame {
    pub xyz: Vec<[f64; 3]>,
    /// One attribute vector (e.g. colour) per point.
    pub attrs: Vec<Vec<f64>>,
}

impl PointFrame {
    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSequence {
    pub frames: Vec<PointFrame>,
    pub timestamps: Vec<i64>,
}

impl PointSequence {
    pub fn new(frames: Vec<PointFrame>) -> Self {
        let timestamps = (0..frames.len() as i64).collect();
        Self { frames, timestamps }
    }

    pub fn validate(&self, attr_dim: usize) -> Result<(), PointTempError> {
        if self.frames.is_empty() {
            return Err(PointTempError::Empty);
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.xyz.iter().flatten().any(|v| !v.is_finite()) {
                return Err(PointTempError::NonFinite(i));
            }
            if let Some(a) = f.attrs.iter().find(|a| a.len() != attr_dim) {
                return Err(PointTempError::Attributes {
                    frame: i,
                    got: a.len(),
                    expected: attr_dim,
                });
            }
            if f.attrs.len() != f.xyz.len() {
                return Err(PointTempError::Attributes {
                    frame: i,
                    got: f.attrs.len(),
                    expected: f.xyz.len(),
                });
            }
        }
        Ok(())
    }

    /// Centres on the centroid of all points and scales into the unit sphere.
    pub fn normalized(&self) -> Self {
        let all: Vec<&[f64; 3]> = self.frames.iter().flat_map(|f| &f.xyz).collect();
        if all.is_empty() {
            return self.clone();
        }
        let n = all.len() as f64;
        let c = [0, 1, 2].map(|k| all.iter().map(|p| p[k]).sum::<f64>() / n);
        let r = all.iter().map(|p| dist2(p, &c).sqrt()).fold(0.0, f64::max);
        let s = if r > 0.0 { 1.0 / r } else { 1.0 };
        let frames = self
            .frames
            .iter()
            .map(|f| PointFrame {
                xyz: f.xyz.iter().map(|p| [0, 1, 2].map(|k| (p[k] - c[k]) * s)).collect(),
                attrs: f.attrs.clone(),
            })
            .collect();
        Self {
            frames,
            timestamps: self.timestamps.clone(),
        }
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Lexicographic coordinate order, used to break ties independently of storage order.
fn coord_less(a: &[f64; 3], b: &[f64; 3]) -> bool {
    a.partial_cmp(b) == Some(std::cmp::Ordering::Less)
}

/// Farthest-point sampling of `count` indices. The first pick is the point
/// closest to the centroid; ties are broken by coordinates, not storage order.
pub fn farthest_point_sampling(xyz: &[[f64; 3]], count: usize) -> Vec<usize> {
    let n = xyz.len();
    if n == 0 || count == 0 {
        return vec![];
    }
    let c = [0, 1, 2].map(|k| xyz.iter().map(|p| p[k]).sum::<f64>() / n as f64);
    let pick = |score: &dyn Fn(usize) -> f64, prefer_high: bool| {
        let mut best = 0;
        for i in 1..n {
            let (s, b) = (score(i), score(best));
            let better = if prefer_high { s > b } else { s < b };
            if better || (s == b && coord_less(&xyz[i], &xyz[best])) {
                best = i;
            }
        }
        best
    };
    let first = pick(&|i| dist2(&xyz[i], &c), false);
    let mut chosen = vec![first];
    let mut mind: Vec<f64> = xyz.iter().map(|p| dist2(p, &xyz[first])).collect();
    while chosen.len() < count.min(n) {
        let next = pick(&|i| mind[i], true);
        chosen.push(next);
        for (i, p) in xyz.iter().enumerate() {
            mind[i] = mind[i].min(dist2(p, &xyz[next]));
        }
    }
    chosen
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointTempConfig {
    pub enabled: bool,
    pub anchors: usize,
    pub radius: f64,
    pub temporal_window: usize,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub normalize: bool,
    pub position_encoding: bool,
}

impl Default for PointTempConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            anchors: 64,
            radius: 0.2,
            temporal_window: 3,
            layers: 2,
            hidden: 64,
            heads: 4,
            normalize: true,
            position_encoding: true,
        }
    }
}

impl PointTempConfig {
    pub fn validate(&self) -> Result<(), PointTempError> {
        if !(self.radius > 0.0) {
            return Err(PointTempError::Radius(self.radius));
        }
        if self.temporal_window % 2 == 0 {
            return Err(PointTempError::Window(self.temporal_window));
        }
        Ok(())
    }
}

/// Anchor positions and tokens for the `l` frames of a window.
#[derive(Clone, Debug)]
pub struct AnchorTokenSet {
    /// Per frame, `A` anchor coordinates.
    pub anchors: Vec<Vec<[f64; 3]>>,
    /// `[l * A, D]`, frame-major.
    pub tokens: Var,
    pub frame_index: Vec<usize>,
    /// Per token: no neighbour fell within the radius.
    pub empty: Vec<bool>,
}

/// Neighbour lists of every anchor: points of frames `t - w/2 ..= t + w/2` within radius `r`.
///
/// `points[f]` are the candidate coordinates of frame `f`; returned indices are into
/// the frame-major concatenation of `points`.
pub fn neighborhoods(points: &[Vec<[f64; 3]>], anchors: &[Vec<[f64; 3]>], radius: f64, window: usize) -> Vec<Vec<usize>> {
    let l = points.len();
    let half = window / 2;
    let mut offsets = Vec::with_capacity(l);
    let mut acc = 0;
    for p in points {
        offsets.push(acc);
        acc += p.len();
    }
    let r2 = radius * radius;
    let mut out = Vec::new();
    for (t, frame_anchors) in anchors.iter().enumerate() {
        let lo = t.saturating_sub(half);
        let hi = (t + half).min(l - 1);
        for a in frame_anchors {
            let mut nb = Vec::new();
            for f in lo..=hi {
                for (i, p) in points[f].iter().enumerate() {
                    if dist2(p, a) <= r2 {
                        nb.push(offsets[f] + i);
                    }
                }
            }
            out.push(nb);
        }
    }
    out
}

/// One point 4D convolution layer.
#[derive(Clone, Debug)]
pub struct Point4dLayer {
    feat: Linear,
    disp: Linear,
    proj: Linear,
    empty_embed: ParamId,
    pub radius: f64,
    pub window: usize,
}

impl Point4dLayer {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        radius: f64,
        window: usize,
    ) -> Self {
        Self {
            feat: Linear::new(store, init, &format!("{name}.feat"), in_dim, hidden, true),
            disp: Linear::new(store, init, &format!("{name}.disp"), 4, hidden, false),
            proj: Linear::new(store, init, &format!("{name}.proj"), hidden, out_dim, true),
            empty_embed: store.add(format!("{name}.empty"), init.normal(&[1, out_dim], 0.02)),
            radius,
            window,
        }
    }

    /// `feats` holds one row per point of `points` (frame-major).
    pub fn forward(
        &self,
        g: &mut Graph,
        points: &[Vec<[f64; 3]>],
        feats: Var,
        anchors: &[Vec<[f64; 3]>],
    ) -> AnchorTokenSet {
        let nbs = neighborhoods(points, anchors, self.radius, self.window);
        let flat: Vec<([f64; 3], usize)> = points
            .iter()
            .enumerate()
            .flat_map(|(f, ps)| ps.iter().map(move |p| (*p, f)))
            .collect();
        let mut edge_src = Vec::new();
        let mut disp = Vec::new();
        let mut groups = Vec::with_capacity(nbs.len());
        let mut anchor_frame = Vec::with_capacity(nbs.len());
        for (t, fa) in anchors.iter().enumerate() {
            for a in fa {
                anchor_frame.push((t, *a));
            }
        }
        for (ai, nb) in nbs.iter().enumerate() {
            let (t, a) = anchor_frame[ai];
            let mut grp = Vec::with_capacity(nb.len());
            for &j in nb {
                let (p, f) = flat[j];
                grp.push(edge_src.len());
                edge_src.push(j);
                disp.extend([p[0] - a[0], p[1] - a[1], p[2] - a[2], f as f64 - t as f64]);
            }
            groups.push(grp);
        }
        let hidden = self.feat.out_dim;
        let fproj = self.feat.forward(g, feats);
        let pooled = if edge_src.is_empty() {
            g.constant(Tensor::zeros(&[groups.len(), hidden]))
        } else {
            let e = g.gather_rows(fproj, &edge_src);
            let d = g.constant(Tensor::new(&[edge_src.len(), 4], disp));
            let d = self.disp.forward(g, d);
            let h = g.add(e, d);
            let h = g.relu(h);
            g.segment_max(h, &groups)
        };
        let tok = self.proj.forward(g, pooled);
        let empty: Vec<bool> = groups.iter().map(Vec::is_empty).collect();
        let tokens = if empty.iter().any(|e| *e) {
            let emb = g.param(self.empty_embed);
            let all = g.concat(&[tok, emb], 0);
            let n = groups.len();
            let idx: Vec<usize> = (0..n).map(|i| if empty[i] { n } else { i }).collect();
            g.gather_rows(all, &idx)
        } else {
            tok
        };
        AnchorTokenSet {
            anchors: anchors.to_vec(),
            tokens,
            frame_index: anchor_frame.iter().map(|(t, _)| *t).collect(),
            empty,
        }
    }
}

/// Self-attention over all anchor tokens with a learned encoding of `(x, y, z, frame)`.
#[derive(Clone, Debug)]
pub struct GlobalTemporalAggregation {
    pos: Linear,
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp2,
    pub position_encoding: bool,
}

impl GlobalTemporalAggregation {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize, position_encoding: bool) -> Self {
        Self {
            pos: Linear::new(store, init, &format!("{name}.pos"), 4, dim, true),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp2::new(store, init, &format!("{name}.mlp"), dim, 2 * dim, dim),
            position_encoding,
        }
    }

    /// Returns updated tokens `[n, D]` and attention weights `[heads, n, n]`.
    pub fn forward(&self, g: &mut Graph, tokens: Var, xyz: &[[f64; 3]], frame: &[usize]) -> (Var, Var) {
        let x = if self.position_encoding {
            let l = frame.iter().max().map_or(1, |m| m + 1) as f64;
            let pe: Vec<f64> = xyz
                .iter()
                .zip(frame)
                .flat_map(|(p, &t)| [p[0], p[1], p[2], t as f64 / l])
                .collect();
            let pe = g.constant(Tensor::new(&[xyz.len(), 4], pe));
            let pe = self.pos.forward(g, pe);
            g.add(tokens, pe)
        } else {
            tokens
        };
        let h = self.norm1.forward(g, x);
        let a = self.attn.forward(g, h, h, h);
        let x = g.add(x, a.output);
        let h = self.norm2.forward(g, x);
        let m = self.mlp.forward(g, h);
        (g.add(x, m), a.weights)
    }
}

/// Output of the full point branch.
#[derive(Clone, Debug)]
pub struct PointTempOutput {
    /// `[l * A, D]` geometric-temporal tokens.
    pub tokens: Var,
    pub anchors: Vec<Vec<[f64; 3]>>,
    pub empty: Vec<bool>,
    /// Row offset of the final frame's tokens.
    pub final_offset: usize,
    /// For every final-frame point, the index of its nearest final-frame anchor.
    pub assignment: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PointTemp {
    pub config: PointTempConfig,
    layers: Vec<Point4dLayer>,
    global: GlobalTemporalAggregation,
}

impl PointTemp {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &PointTempConfig, attr_dim: usize, dim: usize) -> Result<Self, PointTempError> {
        cfg.validate()?;
        let layers = (0..cfg.layers.max(1))
            .map(|i| {
                let in_dim = if i == 0 { attr_dim } else { dim };
                let r = cfg.radius * (1 << i) as f64;
                Point4dLayer::new(store, init, &format!("pointtemp.layer{i}"), in_dim, cfg.hidden, dim, r, cfg.temporal_window)
            })
            .collect();
        let global = GlobalTemporalAggregation::new(store, init, "pointtemp.global", dim, cfg.heads, cfg.position_encoding);
        Ok(Self {
            config: cfg.clone(),
            layers,
            global,
        })
    }

    pub fn forward(&self, g: &mut Graph, seq: &PointSequence) -> Result<PointTempOutput, PointTempError> {
        let attr_dim = self.layers[0].feat.in_dim;
        seq.validate(attr_dim)?;
        let seq = if self.config.normalize { seq.normalized() } else { seq.clone() };
        let a = self.config.anchors;
        for (i, f) in seq.frames.iter().enumerate() {
            if f.len() < a {
                return Err(PointTempError::TooFewPoints {
                    frame: i,
                    points: f.len(),
                    anchors: a,
                });
            }
        }
        let anchors: Vec<Vec<[f64; 3]>> = seq
            .frames
            .iter()
            .map(|f| farthest_point_sampling(&f.xyz, a).into_iter().map(|i| f.xyz[i]).collect())
            .collect();
        let points: Vec<Vec<[f64; 3]>> = seq.frames.iter().map(|f| f.xyz.clone()).collect();
        let feats: Vec<f64> = seq.frames.iter().flat_map(|f| f.attrs.iter().flatten().copied()).collect();
        let total: usize = points.iter().map(Vec::len).sum();
        let feats = g.constant(Tensor::new(&[total, attr_dim], feats));
        let first = self.layers[0].forward(g, &points, feats, &anchors);
        let empty = first.empty.clone();
        let mut tokens = first.tokens;
        for layer in &self.layers[1..] {
            tokens = layer.forward(g, &anchors, tokens, &anchors).tokens;
        }
        let xyz: Vec<[f64; 3]> = anchors.iter().flatten().copied().collect();
        let frame: Vec<usize> = (0..anchors.len()).flat_map(|t| std::iter::repeat(t).take(a)).collect();
        let (tokens, _) = self.global.forward(g, tokens, &xyz, &frame);
        let last = anchors.len() - 1;
        let assignment = nearest_anchor(&seq.frames[last].xyz, &anchors[last]);
        Ok(PointTempOutput {
            tokens,
            anchors,
            empty,
            final_offset: last * a,
            assignment,
        })
    }
}

/// Nearest anchor per point; ties go to the lowest anchor index.
pub fn nearest_anchor(points: &[[f64; 3]], anchors: &[[f64; 3]]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (i, a) in anchors.iter().enumerate() {
                let d = dist2(p, a);
                if d < bd {
                    bd = d;
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Per-point features of the final frame, `[P, D]`.
pub fn per_point_features(g: &mut Graph, out: &PointTempOutput) -> Var {
    let idx: Vec<usize> = out.assignment.iter().map(|a| out.final_offset + a).collect();
    g.gather_rows(out.tokens, &idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointFrame {
        PointFrame {
            xyz: (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect(),
            attrs: (0..n).map(|_| vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect(),
        }
    }

    fn model(cfg: &PointTempConfig) -> (ParamStore, PointTemp) {
        let mut store = ParamStore::new();
        let mut init = Init::new(3);
        let pt = PointTemp::new(&mut store, &mut init, cfg, 3, 8).unwrap();
        (store, pt)
    }

    #[test]
    fn fps_is_deterministic_and_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = cloud(&mut rng, 100);
        let a = farthest_point_sampling(&f.xyz, 10);
        assert_eq!(a, farthest_point_sampling(&f.xyz, 10));
        let mut s = a.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 10);
    }

    #[test]
    fn token_count() {
        let cfg = PointTempConfig {
            anchors: 8,
            radius: 0.5,
            ..Default::default()
        };
        let (store, pt) = model(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = PointSequence::new(vec![cloud(&mut rng, 40), cloud(&mut rng, 50)]);
        let mut g = Graph::with_params(&store);
        let out = pt.forward(&mut g, &seq).unwrap();
        assert_eq!(g.shape(out.tokens), &[16, 8]);
        assert_eq!(out.assignment.len(), 50);
        let f = per_point_features(&mut g, &out);
        assert_eq!(g.shape(f), &[50, 8]);
    }

    #[test]
    fn too_few_points() {
        let cfg = PointTempConfig {
            anchors: 8,
            ..Default::default()
        };
        let (store, pt) = model(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = PointSequence::new(vec![cloud(&mut rng, 5)]);
        let mut g = Graph::with_params(&store);
        assert!(matches!(pt.forward(&mut g, &seq), Err(PointTempError::TooFewPoints { .. })));
    }

    #[test]
    fn config_errors() {
        let bad = PointTempConfig {
            temporal_window: 2,
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(PointTempError::Window(2)));
        let bad = PointTempConfig {
            radius: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn nearest_anchor_ties_and_coincidence() {
        let anchors = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(nearest_anchor(&[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [-5.0, 0.0, 0.0]], &anchors), vec![0, 1, 0]);
        assert_eq!(nearest_anchor(&[[7.0, 1.0, 0.0]], &anchors[..1]), vec![0]);
    }
}
