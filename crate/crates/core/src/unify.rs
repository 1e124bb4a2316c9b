//! Relation-aware feature unification and knowledge transfer from offline text embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::boxes::BBox;
use crate::camera::CameraModel;
use crate::graph::{EntityTaxonomy, Predicate, NUM_PREDICATES};
use crate::nn::{Linear, Mlp2, MultiHeadAttention};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const EMBEDDING_MAGIC: &str = "TRITEMP-EMB";
pub const EMBEDDING_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum UnifyError {
    #[error("unknown entity label {0:?}")]
    UnknownEntity(String),
    #[error("unknown predicate {0:?}")]
    UnknownPredicate(String),
    #[error("embedding table is missing {} prompt(s): {}", .0.len(), .0.join("; "))]
    MissingPrompts(Vec<String>),
    #[error("embedding for {prompt:?} has width {got}, expected {expected}")]
    Width { prompt: String, got: usize, expected: usize },
    #[error("embedding file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("non-finite value in embedding for {0:?}")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `"A scene of a/an {subject} {predicate} a/an {object}"`.
pub fn triplet_prompt(tax: &EntityTaxonomy, subject: &str, predicate: &str, object: &str) -> Result<String, UnifyError> {
    for e in [subject, object] {
        if !tax.contains(e) {
            return Err(UnifyError::UnknownEntity(e.to_string()));
        }
    }
    let p: Predicate = predicate
        .parse()
        .map_err(|_| UnifyError::UnknownPredicate(predicate.to_string()))?;
    Ok(format!("A scene of a/an {subject} {} a/an {object}", p.name()))
}

/// `"A scene of {predicate}"`.
pub fn predicate_prompt(predicate: &str) -> Result<String, UnifyError> {
    let p: Predicate = predicate
        .parse()
        .map_err(|_| UnifyError::UnknownPredicate(predicate.to_string()))?;
    Ok(format!("A scene of {}", p.name()))
}

/// Every prompt an embedding table must contain for `tax`: all predicate
/// prompts, then all (subject, predicate, object) label combinations.
pub fn required_prompts(tax: &EntityTaxonomy) -> Vec<String> {
    let mut out: Vec<String> = Predicate::ALL.iter().map(|p| format!("A scene of {}", p.name())).collect();
    for s in tax.labels() {
        for p in Predicate::ALL {
            for o in tax.labels() {
                out.push(format!("A scene of a/an {s} {} a/an {o}", p.name()));
            }
        }
    }
    out
}

/// Prompt-keyed text embeddings of width `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub source: String,
    entries: BTreeMap<String, Vec<f64>>,
}

fn unit_gaussian(seed: u64, key: &str, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalized(v)
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        v
    }
}

impl EmbeddingTable {
    pub fn new(dim: usize, source: impl Into<String>) -> Self {
        Self {
            dim,
            source: source.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, prompt: impl Into<String>, v: Vec<f64>) -> Result<(), UnifyError> {
        let prompt = prompt.into();
        if v.len() != self.dim {
            return Err(UnifyError::Width {
                prompt,
                got: v.len(),
                expected: self.dim,
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(UnifyError::NonFinite(prompt));
        }
        self.entries.insert(prompt, v);
        Ok(())
    }

    pub fn get(&self, prompt: &str) -> Option<&[f64]> {
        self.entries.get(prompt).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Seeded pseudo-embeddings: prompt hash -> standard normal -> unit L2 norm.
    ///
    /// With `correlation > 0`, each triplet vector is mixed with its predicate's
    /// vector before normalisation so that embeddings carry predicate identity.
    pub fn pseudo(tax: &EntityTaxonomy, seed: u64, dim: usize, correlation: f64) -> Self {
        let mut t = Self::new(dim, format!("pseudo-seed{seed}"));
        let pred_vecs: Vec<Vec<f64>> = Predicate::ALL
            .iter()
            .map(|p| unit_gaussian(seed, &format!("A scene of {}", p.name()), dim))
            .collect();
        for p in Predicate::ALL {
            t.entries.insert(format!("A scene of {}", p.name()), pred_vecs[p.index()].clone());
        }
        for s in tax.labels() {
            for p in Predicate::ALL {
                for o in tax.labels() {
                    let prompt = format!("A scene of a/an {s} {} a/an {o}", p.name());
                    let noise = unit_gaussian(seed, &prompt, dim);
                    let v = if correlation > 0.0 {
                        normalized(
                            noise
                                .iter()
                                .zip(&pred_vecs[p.index()])
                                .map(|(n, q)| (1.0 - correlation) * n + correlation * q)
                                .collect(),
                        )
                    } else {
                        noise
                    };
                    t.entries.insert(prompt, v);
                }
            }
        }
        t
    }

    pub fn check_complete(&self, tax: &EntityTaxonomy) -> Result<(), UnifyError> {
        let missing: Vec<String> = required_prompts(tax)
            .into_iter()
            .filter(|p| !self.entries.contains_key(p))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(UnifyError::MissingPrompts(missing))
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{EMBEDDING_MAGIC} {EMBEDDING_VERSION} {} {} {}\n",
            self.dim,
            self.entries.len(),
            self.source
        );
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push('\n');
            let nums: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
            s.push_str(&nums.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, UnifyError> {
        let mut lines = text.lines();
        let fmt = |line: usize, message: String| UnifyError::Format { line, message };
        let header = lines.next().ok_or_else(|| fmt(1, "empty file".into()))?;
        let mut parts = header.splitn(5, ' ');
        if parts.next() != Some(EMBEDDING_MAGIC) || parts.next() != Some(EMBEDDING_VERSION) {
            return Err(fmt(1, format!("expected header \"{EMBEDDING_MAGIC} {EMBEDDING_VERSION} <E> <count> <source>\"")));
        }
        let dim: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt(1, "invalid width".into()))?;
        let count: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt(1, "invalid entry count".into()))?;
        let source = parts.next().unwrap_or("").to_string();
        let mut t = Self::new(dim, source);
        for i in 0..count {
            let pline = 2 + 2 * i;
            let prompt = lines.next().ok_or_else(|| fmt(pline, format!("expected {count} entries, found {i}")))?;
            let vals = lines.next().ok_or_else(|| fmt(pline + 1, format!("missing vector for {prompt:?}")))?;
            let v: Vec<f64> = vals
                .split_whitespace()
                .map(|x| x.parse::<f64>().map_err(|e| fmt(pline + 1, format!("{x:?}: {e}"))))
                .collect::<Result<_, _>>()?;
            t.insert(prompt, v)?;
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, UnifyError> {
        let text = std::fs::read_to_string(path).map_err(|source| UnifyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), UnifyError> {
        std::fs::write(path, self.to_text()).map_err(|source| UnifyError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Predicate prompt embeddings in taxonomy order, `[Z, E]`.
    pub fn predicate_matrix(&self) -> Result<Tensor, UnifyError> {
        let mut data = Vec::with_capacity(NUM_PREDICATES * self.dim);
        let mut missing = Vec::new();
        for p in Predicate::ALL {
            let key = format!("A scene of {}", p.name());
            match self.get(&key) {
                Some(v) => data.extend_from_slice(v),
                None => missing.push(key),
            }
        }
        if !missing.is_empty() {
            return Err(UnifyError::MissingPrompts(missing));
        }
        Ok(Tensor::new(&[NUM_PREDICATES, self.dim], data))
    }

    /// Mean embedding of the triplets `(subject, p, object)` for every `p` in `predicates`.
    pub fn triplet_target(&self, subject: &str, object: &str, predicates: &[Predicate]) -> Result<Vec<f64>, UnifyError> {
        let mut acc = vec![0.0; self.dim];
        for p in predicates {
            let key = format!("A scene of a/an {subject} {} a/an {object}", p.name());
            let v = self.get(&key).ok_or_else(|| UnifyError::MissingPrompts(vec![key.clone()]))?;
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        let n = predicates.len().max(1) as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }
}

/// Indices of points in front of `cam` whose pixel projection lies inside `b` (scaled to the image).
pub fn frustum_select(b: &BBox, cam: &CameraModel, points: &[[f64; 3]]) -> Vec<usize> {
    let (h, w) = cam.image_size;
    let (x1, x2) = (b.x1 * w as f64, b.x2 * w as f64);
    let (y1, y2) = (b.y1 * h as f64, b.y2 * h as f64);
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| match cam.project(**p) {
            Some([u, v]) => u >= x1 && u <= x2 && v >= y1 && v <= y2,
            None => false,
        })
        .map(|(i, _)| i)
        .collect()
}

/// Union of per-view selections, sorted.
pub fn frustum_select_multi(boxes: &[(&BBox, &CameraModel)], points: &[[f64; 3]]) -> Vec<usize> {
    let mut all: Vec<usize> = boxes.iter().flat_map(|(b, c)| frustum_select(b, c, points)).collect();
    all.sort_unstable();
    all.dedup();
    all
}

/// Coordinate-wise max over the selected rows of `feats` (`[P, D]`), as `[1, D]`.
/// An empty selection gives zeros and `false`.
pub fn pool_point_features(g: &mut Graph, feats: Var, indices: &[usize]) -> (Var, bool) {
    if indices.is_empty() {
        let d = g.shape(feats)[1];
        (g.constant(Tensor::zeros(&[1, d])), false)
    } else {
        (g.segment_max(feats, &[indices.to_vec()]), true)
    }
}

/// Projects `[sub2d, obj2d, sub3d, obj3d, flag_s, flag_o]` to the embedding width.
#[derive(Clone, Debug)]
pub struct Unifier {
    pub mlp: Mlp2,
    pub dim: usize,
    pub embed_dim: usize,
}

impl Unifier {
    pub fn new(store: &mut ParamStore, init: &mut Init, dim: usize, embed_dim: usize) -> Self {
        Self {
            mlp: Mlp2::new(store, init, "unify.mlp", 4 * dim + 2, 2 * embed_dim, embed_dim),
            dim,
            embed_dim,
        }
    }

    /// All inputs are `[N, D]`; flags are per row. Returns `[N, E]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        sub2d: Var,
        obj2d: Var,
        sub3d: Var,
        obj3d: Var,
        flags: &[(bool, bool)],
    ) -> Var {
        let f: Vec<f64> = flags
            .iter()
            .flat_map(|(s, o)| [*s as u8 as f64, *o as u8 as f64])
            .collect();
        let f = g.constant(Tensor::new(&[flags.len(), 2], f));
        let x = g.concat(&[sub2d, obj2d, sub3d, obj3d, f], 1);
        self.mlp.forward(g, x)
    }
}

/// Mean absolute difference between `unified` (`[N, E]`) and per-row targets; zero for `N = 0`.
pub fn align_loss(g: &mut Graph, unified: Option<Var>, targets: &[Vec<f64>]) -> Var {
    match unified {
        Some(u) if !targets.is_empty() => {
            let e = g.shape(u)[1];
            let t = g.constant(Tensor::new(&[targets.len(), e], targets.concat()));
            let d = g.sub(u, t);
            let d = g.abs(d);
            g.mean(d)
        }
        _ => g.constant(Tensor::scalar(0.0)),
    }
}

/// Plain-value reference of [`align_loss`].
pub fn align_loss_value(unified: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    if unified.is_empty() {
        return 0.0;
    }
    let n: usize = unified.iter().map(Vec::len).sum();
    unified
        .iter()
        .zip(targets)
        .flat_map(|(u, t)| u.iter().zip(t).map(|(a, b)| (a - b).abs()))
        .sum::<f64>()
        / n as f64
}

/// Cross-attention of unified pair vectors over scene context, then a per-predicate sigmoid classifier.
#[derive(Clone, Debug)]
pub struct RelationClassifier {
    pub context_proj: Linear,
    pub attn: MultiHeadAttention,
    /// `[Z, E]`
    pub weight: ParamId,
    /// `[Z]`
    pub bias: ParamId,
}

/// Output of [`RelationClassifier::forward`].
pub struct Classification {
    /// `[N, Z]` in (0, 1).
    pub scores: Var,
    /// `[heads, N, M]`
    pub attention: Var,
}

impl RelationClassifier {
    pub fn new(store: &mut ParamStore, init: &mut Init, dim: usize, embed_dim: usize, heads: usize) -> Self {
        Self {
            context_proj: Linear::new(store, init, "cls.context_proj", dim, embed_dim, true),
            attn: MultiHeadAttention::new(store, init, "cls.attn", embed_dim, heads),
            weight: store.add("cls.weight", init.xavier(&[NUM_PREDICATES, embed_dim], embed_dim, NUM_PREDICATES)),
            bias: store.add("cls.bias", Tensor::zeros(&[NUM_PREDICATES])),
        }
    }

    /// `unified` is `[N, E]`; `context` is `[M, D]` (flattened fused tokens).
    pub fn forward(&self, g: &mut Graph, unified: Var, context: Var) -> Classification {
        let ctx = self.context_proj.forward(g, context);
        let a = self.attn.forward(g, unified, ctx, ctx);
        let x = g.add(unified, a.output);
        let w = g.param(self.weight);
        let wt = g.permute(w, &[1, 0]);
        let logits = g.matmul(x, wt);
        let b = g.param(self.bias);
        let logits = g.add_row(logits, b);
        Classification {
            scores: g.sigmoid(logits),
            attention: a.weights,
        }
    }
}

/// Copies the predicate embeddings into the classifier rows and zeroes the bias.
pub fn init_classifier(store: &mut ParamStore, cls: &RelationClassifier, table: &EmbeddingTable) -> Result<(), UnifyError> {
    let m = table.predicate_matrix()?;
    let want = store.get(cls.weight).shape().to_vec();
    if m.shape() != want.as_slice() {
        return Err(UnifyError::Width {
            prompt: "A scene of <predicate>".into(),
            got: m.shape()[1],
            expected: want[1],
        });
    }
    *store.get_mut(cls.weight) = m;
    *store.get_mut(cls.bias) = Tensor::zeros(&[NUM_PREDICATES]);
    Ok(())
}
