//! Scene-graph data model, taxonomies and the canonical JSON encoding.
//!
//! A [`SceneGraph`] holds the entities visible in one frame and the directed
//! relation triplets between them. Graphs are validated on construction and
//! kept in canonical order (entities by id, triplets by subject, object,
//! predicate index), so equal graphs always serialise to identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::boxes::BBox;

/// Relation predicates in their fixed taxonomy order. Class index `z` of every
/// relation score vector refers to this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Predicate {
    Assist,
    Cement,
    Clean,
    CloseTo,
    Cut,
    Drill,
    Hammer,
    Hold,
    LyingOn,
    Operate,
    Prepare,
    Saw,
    Suture,
    Touch,
}

pub const NUM_PREDICATES: usize = 14;

impl Predicate {
    pub const ALL: [Predicate; NUM_PREDICATES] = [
        Predicate::Assist,
        Predicate::Cement,
        Predicate::Clean,
        Predicate::CloseTo,
        Predicate::Cut,
        Predicate::Drill,
        Predicate::Hammer,
        Predicate::Hold,
        Predicate::LyingOn,
        Predicate::Operate,
        Predicate::Prepare,
        Predicate::Saw,
        Predicate::Suture,
        Predicate::Touch,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Predicate> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Predicate::Assist => "Assist",
            Predicate::Cement => "Cement",
            Predicate::Clean => "Clean",
            Predicate::CloseTo => "CloseTo",
            Predicate::Cut => "Cut",
            Predicate::Drill => "Drill",
            Predicate::Hammer => "Hammer",
            Predicate::Hold => "Hold",
            Predicate::LyingOn => "LyingOn",
            Predicate::Operate => "Operate",
            Predicate::Prepare => "Prepare",
            Predicate::Saw => "Saw",
            Predicate::Suture => "Suture",
            Predicate::Touch => "Touch",
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Predicate {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Predicate::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| GraphError::UnknownPredicate(s.to_string()))
    }
}

impl Serialize for Predicate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Predicate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub const DEFAULT_ENTITY_COUNT: usize = 12;

/// Subject/object class names. The defaults are placeholders; real label
/// names are supplied through a taxonomy file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityTaxonomy {
    labels: Vec<String>,
}

impl Default for EntityTaxonomy {
    fn default() -> Self {
        Self {
            labels: (0..DEFAULT_ENTITY_COUNT).map(|i| format!("role_{i:02}")).collect(),
        }
    }
}

impl EntityTaxonomy {
    /// Builds a taxonomy; a count other than 12 requires `allow_custom_count`.
    pub fn new(labels: Vec<String>, allow_custom_count: bool) -> Result<Self, GraphError> {
        if labels.is_empty() {
            return Err(GraphError::Taxonomy("entity taxonomy is empty".into()));
        }
        if labels.len() != DEFAULT_ENTITY_COUNT && !allow_custom_count {
            return Err(GraphError::Taxonomy(format!(
                "expected {DEFAULT_ENTITY_COUNT} entity labels, got {} (set allow_custom_count to override)",
                labels.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for l in &labels {
            if l.is_empty() || l.contains('\n') {
                return Err(GraphError::Taxonomy(format!("invalid entity label {l:?}")));
            }
            if !seen.insert(l) {
                return Err(GraphError::Taxonomy(format!("duplicate entity label {l:?}")));
            }
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index(label).is_some()
    }
}

/// On-disk taxonomy file: `{"entities": [...], "allow_custom_count": false}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaxonomyFile {
    pub entities: Vec<String>,
    #[serde(default)]
    pub allow_custom_count: bool,
}

impl TaxonomyFile {
    pub fn into_taxonomy(self) -> Result<EntityTaxonomy, GraphError> {
        EntityTaxonomy::new(self.entities, self.allow_custom_count)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub id: u32,
    pub label: String,
    /// Per-view boxes in normalised xyxy image coordinates.
    pub boxes: BTreeMap<String, BBox>,
}

impl Entity {
    pub fn new(id: u32, label: impl Into<String>) -> Self {
        Self {
            id,
            label: label.into(),
            boxes: BTreeMap::new(),
        }
    }

    pub fn with_box(mut self, view: impl Into<String>, b: BBox) -> Self {
        self.boxes.insert(view.into(), b);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub subject: u32,
    pub predicate: Predicate,
    pub object: u32,
}

impl Triplet {
    pub fn new(subject: u32, predicate: Predicate, object: u32) -> Self {
        Self {
            subject,
            predicate,
            object,
        }
    }

    fn key(&self) -> (u32, u32, usize) {
        (self.subject, self.object, self.predicate.index())
    }
}

impl PartialOrd for Triplet {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Triplet {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("scene graph has no entities")]
    NoEntities,
    #[error("duplicate entity id {0}")]
    DuplicateEntity(u32),
    #[error("dangling id {0}")]
    DanglingId(u32),
    #[error("self-loop on entity {0}")]
    SelfLoop(u32),
    #[error("unknown predicate {0:?}")]
    UnknownPredicate(String),
    #[error("invalid box at {path}: {reason}")]
    InvalidBox { path: String, reason: String },
    #[error("malformed JSON at line {line}, column {column}: {message}")]
    Json {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("taxonomy error: {0}")]
    Taxonomy(String),
}

/// One frame's validated scene graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraph {
    frame_index: u64,
    entities: Vec<Entity>,
    triplets: Vec<Triplet>,
}

impl SceneGraph {
    pub fn frame_index(&self) -> u64 {
        self.frame_index
    }

    pub fn set_frame_index(&mut self, idx: u64) {
        self.frame_index = idx;
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn entity(&self, id: u32) -> Option<&Entity> {
        self.entities
            .binary_search_by_key(&id, |e| e.id)
            .ok()
            .map(|i| &self.entities[i])
    }

    /// Rewrites every entity box; the closure must keep boxes valid.
    pub fn map_boxes(&mut self, mut f: impl FnMut(&str, BBox) -> BBox) {
        for e in &mut self.entities {
            for (view, b) in e.boxes.iter_mut() {
                *b = f(view, *b);
            }
        }
    }

    /// Rewrites every entity box, dropping those mapped to `None`.
    pub fn retain_boxes(&mut self, mut f: impl FnMut(BBox) -> Option<BBox>) {
        for e in &mut self.entities {
            e.boxes = std::mem::take(&mut e.boxes)
                .into_iter()
                .filter_map(|(view, b)| f(b).map(|b| (view, b)))
                .collect();
        }
    }
}

/// Validates entities and triplets and returns the canonical graph.
pub fn build_graph(
    frame_index: u64,
    entities: Vec<Entity>,
    triplets: Vec<Triplet>,
) -> Result<SceneGraph, GraphError> {
    if entities.is_empty() {
        return Err(GraphError::NoEntities);
    }
    let mut entities = entities;
    entities.sort_by_key(|e| e.id);
    for w in entities.windows(2) {
        if w[0].id == w[1].id {
            return Err(GraphError::DuplicateEntity(w[0].id));
        }
    }
    for e in &entities {
        for (view, b) in &e.boxes {
            b.validate().map_err(|reason| GraphError::InvalidBox {
                path: format!("entity {} view {view}", e.id),
                reason,
            })?;
        }
    }
    let known = |id: u32| entities.binary_search_by_key(&id, |e| e.id).is_ok();
    let mut set = BTreeSet::new();
    for t in triplets {
        if t.subject == t.object {
            return Err(GraphError::SelfLoop(t.subject));
        }
        for id in [t.subject, t.object] {
            if !known(id) {
                return Err(GraphError::DanglingId(id));
            }
        }
        set.insert(t);
    }
    Ok(SceneGraph {
        frame_index,
        entities,
        triplets: set.into_iter().collect(),
    })
}

fn fmt_f6(v: f64) -> String {
    let v = if v == 0.0 { 0.0 } else { v };
    format!("{v:.6}")
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialisation cannot fail")
}

/// Canonical JSON: sorted keys, no whitespace, floats with 6 decimals.
pub fn serialize(graph: &SceneGraph) -> String {
    let mut out = String::new();
    out.push_str("{\"entities\":[");
    for (i, e) in graph.entities.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str("{\"boxes\":{");
        for (j, (view, b)) in e.boxes.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&json_str(view));
            out.push_str(&format!(
                ":[{},{},{},{}]",
                fmt_f6(b.x1),
                fmt_f6(b.y1),
                fmt_f6(b.x2),
                fmt_f6(b.y2)
            ));
        }
        out.push_str(&format!("}},\"id\":{},\"label\":{}}}", e.id, json_str(&e.label)));
    }
    out.push_str(&format!("],\"frame_index\":{},\"triplets\":[", graph.frame_index));
    for (i, t) in graph.triplets.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format!("[{},{},{}]", t.subject, json_str(t.predicate.name()), t.object));
    }
    out.push_str("]}");
    out
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> GraphError {
    GraphError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

fn as_u32(v: &Value, path: &str) -> Result<u32, GraphError> {
    v.as_u64()
        .and_then(|x| u32::try_from(x).ok())
        .ok_or_else(|| schema(path, "expected a non-negative integer"))
}

/// Parses and validates a graph document.
pub fn parse(text: &str) -> Result<SceneGraph, GraphError> {
    let root: Value = serde_json::from_str(text).map_err(|e| GraphError::Json {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let obj = root.as_object().ok_or_else(|| schema("$", "expected an object"))?;
    let frame_index = obj
        .get("frame_index")
        .ok_or_else(|| schema("$.frame_index", "missing"))?
        .as_u64()
        .ok_or_else(|| schema("$.frame_index", "expected a non-negative integer"))?;
    let ents = obj
        .get("entities")
        .ok_or_else(|| schema("$.entities", "missing"))?
        .as_array()
        .ok_or_else(|| schema("$.entities", "expected an array"))?;
    let mut entities = Vec::with_capacity(ents.len());
    for (i, ev) in ents.iter().enumerate() {
        let p = format!("$.entities[{i}]");
        let eo = ev.as_object().ok_or_else(|| schema(&p, "expected an object"))?;
        let id = as_u32(
            eo.get("id").ok_or_else(|| schema(format!("{p}.id"), "missing"))?,
            &format!("{p}.id"),
        )?;
        let label = eo
            .get("label")
            .and_then(Value::as_str)
            .ok_or_else(|| schema(format!("{p}.label"), "expected a string"))?;
        let mut entity = Entity::new(id, label);
        if let Some(bv) = eo.get("boxes") {
            let bo = bv
                .as_object()
                .ok_or_else(|| schema(format!("{p}.boxes"), "expected an object"))?;
            for (view, arr) in bo {
                let bp = format!("{p}.boxes.{view}");
                let coords = arr
                    .as_array()
                    .filter(|a| a.len() == 4)
                    .ok_or_else(|| schema(&bp, "expected an array of 4 numbers"))?;
                let mut c = [0.0; 4];
                for (k, x) in coords.iter().enumerate() {
                    c[k] = x
                        .as_f64()
                        .ok_or_else(|| schema(format!("{bp}[{k}]"), "expected a number"))?;
                }
                let b = BBox::new(c[0], c[1], c[2], c[3]);
                b.validate().map_err(|reason| GraphError::InvalidBox {
                    path: bp.clone(),
                    reason,
                })?;
                entity.boxes.insert(view.clone(), b);
            }
        }
        entities.push(entity);
    }
    let trips = obj
        .get("triplets")
        .ok_or_else(|| schema("$.triplets", "missing"))?
        .as_array()
        .ok_or_else(|| schema("$.triplets", "expected an array"))?;
    let mut triplets = Vec::with_capacity(trips.len());
    for (i, tv) in trips.iter().enumerate() {
        let p = format!("$.triplets[{i}]");
        let ta = tv
            .as_array()
            .filter(|a| a.len() == 3)
            .ok_or_else(|| schema(&p, "expected [subject_id, predicate, object_id]"))?;
        let s = as_u32(&ta[0], &format!("{p}[0]"))?;
        let pname = ta[1]
            .as_str()
            .ok_or_else(|| schema(format!("{p}[1]"), "expected a predicate name"))?;
        let pred: Predicate = pname.parse()?;
        let o = as_u32(&ta[2], &format!("{p}[2]"))?;
        triplets.push(Triplet::new(s, pred, o));
    }
    build_graph(frame_index, entities, triplets)
}

/// Ground-truth labels of one ordered subject-object pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLabels {
    pub subject: u32,
    pub object: u32,
    /// Multi-hot over [`Predicate::ALL`].
    pub labels: [f64; NUM_PREDICATES],
}

impl PairLabels {
    pub fn predicates(&self) -> impl Iterator<Item = Predicate> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.5)
            .map(|(i, _)| Predicate::ALL[i])
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|v| **v > 0.5).count()
    }
}

/// One entry per ordered pair with at least one triplet, sorted by (subject, object).
pub fn enumerate_pairs(graph: &SceneGraph) -> Vec<PairLabels> {
    let mut map: BTreeMap<(u32, u32), [f64; NUM_PREDICATES]> = BTreeMap::new();
    for t in &graph.triplets {
        map.entry((t.subject, t.object)).or_insert([0.0; NUM_PREDICATES])[t.predicate.index()] =
            1.0;
    }
    map.into_iter()
        .map(|((subject, object), labels)| PairLabels {
            subject,
            object,
            labels,
        })
        .collect()
}
