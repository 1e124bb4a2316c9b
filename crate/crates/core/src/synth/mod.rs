//! Deterministic synthetic OR scenes: cuboid entities on a floor seen by two
//! pinhole cameras, a coloured point cloud per frame and analytically derived
//! scene graphs.

mod augment;
mod dataset;
mod render;

use std::collections::BTreeMap;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::BBox;
use crate::camera::CameraModel;
use crate::graph::{build_graph, Entity, EntityTaxonomy, GraphError, Predicate, SceneGraph, Triplet};
use crate::pointtemp::PointFrame;

pub use augment::{augment, AugmentPolicy};
pub use dataset::{
    read_ply, sliding_windows, write_corpus, write_ply, write_take, CorpusSpec, Dataset, DatasetError, TakeIndex,
    TakeSpec,
};
pub use render::{convex_hull, entity_mask, fill_convex};

pub const VIEWS: [&str; 2] = ["view1", "view6"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid clip spec: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Static description and motion of one cuboid entity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntitySpec {
    /// Extent along x, y, z in metres.
    pub size: [f64; 3],
    /// Bottom-centre position at rest.
    pub base: [f64; 3],
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "default_period")]
    pub period: f64,
    #[serde(default)]
    pub phase: f64,
    /// Direction of the oscillation in the floor plane (radians).
    #[serde(default)]
    pub heading: f64,
}

fn default_period() -> f64 {
    24.0
}

impl EntitySpec {
    pub fn base_at(&self, t: usize) -> [f64; 3] {
        let s = self.amplitude * (2.0 * std::f64::consts::PI * t as f64 / self.period + self.phase).sin();
        [
            self.base[0] + s * self.heading.cos(),
            self.base[1] + s * self.heading.sin(),
            self.base[2],
        ]
    }
}

/// `actor` performs `predicate` on `target` during frames `start..end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionPhase {
    pub actor: u32,
    pub predicate: Predicate,
    pub target: u32,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipSpec {
    pub num_frames: usize,
    pub seed: u64,
    pub entity_count: usize,
    /// Centroid distance below which two entities are close.
    pub closeto_distance: f64,
    /// Vertical gap tolerated between a resting entity's bottom and its support's top.
    pub lying_tolerance: f64,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub points_per_frame: usize,
    /// Entity labels, indexed by entity id; defaults to the standard taxonomy.
    pub labels: Option<Vec<String>>,
    /// Explicit entities; generated from the seed when empty.
    pub entities: Vec<EntitySpec>,
    /// Explicit action schedule; generated from the seed when empty and `auto_phases` is set.
    pub phases: Vec<ActionPhase>,
    pub auto_phases: bool,
    /// Edge length (metres) of the predicate-coloured tool cube carried during actions.
    pub tool_size: f64,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self {
            num_frames: 20,
            seed: 0,
            entity_count: 4,
            closeto_distance: 1.2,
            lying_tolerance: 0.02,
            image_size: (192, 256),
            points_per_frame: 2048,
            labels: None,
            entities: Vec::new(),
            phases: Vec::new(),
            auto_phases: true,
            tool_size: 0.3,
        }
    }
}

/// Predicates that are only produced by scripted phases.
pub const ACTION_PREDICATES: [Predicate; 12] = [
    Predicate::Assist,
    Predicate::Cement,
    Predicate::Clean,
    Predicate::Cut,
    Predicate::Drill,
    Predicate::Hammer,
    Predicate::Hold,
    Predicate::Operate,
    Predicate::Prepare,
    Predicate::Saw,
    Predicate::Suture,
    Predicate::Touch,
];

const PALETTE: [[u8; 3]; 12] = [
    [200, 200, 210],
    [230, 170, 140],
    [40, 110, 200],
    [60, 170, 80],
    [200, 60, 60],
    [150, 80, 190],
    [220, 200, 50],
    [40, 190, 190],
    [240, 130, 30],
    [120, 120, 40],
    [200, 90, 150],
    [90, 60, 30],
];

pub const FLOOR_COLOR: [u8; 3] = [95, 95, 100];
pub const BACKGROUND_COLOR: [u8; 3] = [35, 35, 40];

/// Colour of the tool glyph carried by an actor during a phase.
pub fn predicate_color(p: Predicate) -> [u8; 3] {
    let h = p.index() as f64 / 14.0;
    let (r, g, b) = hsv(h, 0.9, 1.0);
    [r, g, b]
}

fn hsv(h: f64, s: f64, v: f64) -> (u8, u8, u8) {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    let c = |x: f64| (x * 255.0).round() as u8;
    (c(r), c(g), c(b))
}

pub fn entity_color(id: u32) -> [u8; 3] {
    PALETTE[id as usize % PALETTE.len()]
}

/// Pose of one entity at one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityState {
    pub id: u32,
    pub label: String,
    pub size: [f64; 3],
    /// Bottom-centre position.
    pub base: [f64; 3],
}

impl EntityState {
    pub fn centroid(&self) -> [f64; 3] {
        [self.base[0], self.base[1], self.base[2] + self.size[2] / 2.0]
    }

    pub fn top(&self) -> f64 {
        self.base[2] + self.size[2]
    }

    pub fn corners(&self) -> [[f64; 3]; 8] {
        let [sx, sy, sz] = self.size;
        let [x, y, z] = self.base;
        let mut out = [[0.0; 3]; 8];
        for (i, c) in out.iter_mut().enumerate() {
            *c = [
                x + if i & 1 == 0 { -sx / 2.0 } else { sx / 2.0 },
                y + if i & 2 == 0 { -sy / 2.0 } else { sy / 2.0 },
                z + if i & 4 == 0 { 0.0 } else { sz },
            ];
        }
        out
    }

    fn footprint_overlap(&self, other: &EntityState) -> f64 {
        let ov = |a: f64, sa: f64, b: f64, sb: f64| {
            ((a + sa / 2.0).min(b + sb / 2.0) - (a - sa / 2.0).max(b - sb / 2.0)).max(0.0)
        };
        ov(self.base[0], self.size[0], other.base[0], other.size[0]) * ov(self.base[1], self.size[1], other.base[1], other.size[1])
    }
}

/// World state of one frame, sufficient to re-derive its relations.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneState {
    pub frame: usize,
    pub entities: Vec<EntityState>,
    /// Phases active at this frame.
    pub active: Vec<ActionPhase>,
    pub tool_size: f64,
}

/// Relation thresholds used by [`derive_relations`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelationRules {
    pub closeto_distance: f64,
    pub lying_tolerance: f64,
}

impl From<&ClipSpec> for RelationRules {
    fn from(s: &ClipSpec) -> Self {
        Self {
            closeto_distance: s.closeto_distance,
            lying_tolerance: s.lying_tolerance,
        }
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Rule-based triplets: centroid distance, vertical stacking with footprint overlap, active phases.
pub fn derive_relations(state: &SceneState, rules: &RelationRules) -> Vec<Triplet> {
    let mut out = Vec::new();
    for a in &state.entities {
        for b in &state.entities {
            if a.id == b.id {
                continue;
            }
            if dist(a.centroid(), b.centroid()) < rules.closeto_distance {
                out.push(Triplet::new(a.id, Predicate::CloseTo, b.id));
            }
            if (a.base[2] - b.top()).abs() <= rules.lying_tolerance && a.footprint_overlap(b) > 0.0 {
                out.push(Triplet::new(a.id, Predicate::LyingOn, b.id));
            }
        }
    }
    for p in &state.active {
        out.push(Triplet::new(p.actor, p.predicate, p.target));
    }
    out.sort();
    out.dedup();
    out
}

/// One synchronized multi-view sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSample {
    pub frame_index: u64,
    pub images: BTreeMap<String, RgbImage>,
    /// World coordinates (metres) with RGB attributes in `[0, 1]`.
    pub points: PointFrame,
    pub cameras: BTreeMap<String, CameraModel>,
    pub graph: SceneGraph,
}

#[derive(Clone, Debug)]
pub struct GeneratedClip {
    pub frames: Vec<FrameSample>,
    pub states: Vec<SceneState>,
}

/// The fixed two-camera rig: a far, wide `view1` and a near `view6`.
pub fn default_cameras(image_size: (usize, usize)) -> BTreeMap<String, CameraModel> {
    let (_, w) = image_size;
    let s = w as f64 / 256.0;
    let mut m = BTreeMap::new();
    m.insert(
        "view1".to_string(),
        CameraModel::look_at("view1", [-3.4, -3.1, 2.9], [0.0, 0.0, 0.5], [0.0, 0.0, 1.0], 175.0 * s, image_size),
    );
    m.insert(
        "view6".to_string(),
        CameraModel::look_at("view6", [2.4, -2.6, 2.6], [0.0, 0.0, 0.6], [0.0, 0.0, 1.0], 216.0 * s, image_size),
    );
    m
}

fn auto_entities(count: usize, rng: &mut ChaCha8Rng) -> Vec<EntitySpec> {
    let mut out = Vec::with_capacity(count);
    if count >= 1 {
        out.push(EntitySpec {
            size: [1.8, 0.7, 0.8],
            base: [0.0, 0.0, 0.0],
            amplitude: 0.0,
            period: default_period(),
            phase: 0.0,
            heading: 0.0,
        });
    }
    if count >= 2 {
        out.push(EntitySpec {
            size: [1.5, 0.45, 0.25],
            base: [0.0, 0.0, 0.8],
            amplitude: 0.0,
            period: default_period(),
            phase: 0.0,
            heading: 0.0,
        });
    }
    let standing = count.saturating_sub(2);
    for k in 0..standing {
        let theta = 2.0 * std::f64::consts::PI * (k as f64 + rng.gen_range(0.2..0.8)) / standing as f64 - 1.3;
        let (x, y) = (1.5 * theta.cos(), 1.0 * theta.sin());
        out.push(EntitySpec {
            size: [0.45, 0.45, rng.gen_range(1.55..1.85)],
            base: [x, y, 0.0],
            amplitude: rng.gen_range(0.15..0.35),
            period: rng.gen_range(14.0..30.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            heading: theta + std::f64::consts::FRAC_PI_2,
        });
    }
    out
}

fn auto_phases(count: usize, num_frames: usize, rng: &mut ChaCha8Rng) -> Vec<ActionPhase> {
    let mut out = Vec::new();
    if count < 3 || num_frames == 0 {
        return out;
    }
    for actor in 2..count as u32 {
        let target = 1;
        let mut t = rng.gen_range(0..=num_frames / 4);
        while t < num_frames {
            let len = rng.gen_range((num_frames / 4).max(2)..=(num_frames / 2).max(3));
            let end = (t + len).min(num_frames);
            let predicate = ACTION_PREDICATES[rng.gen_range(0..ACTION_PREDICATES.len())];
            out.push(ActionPhase {
                actor,
                predicate,
                target,
                start: t,
                end,
            });
            t = end + rng.gen_range((num_frames / 6).max(1)..=(num_frames / 3).max(2));
        }
    }
    out
}

impl ClipSpec {
    /// A 20-frame, 4-entity clip whose scripted phases cover all twelve action predicates:
    /// entities 2 and 3 each act on entity 1 with six predicates in turn.
    pub fn full_coverage(seed: u64) -> Self {
        let bounds = [0, 3, 6, 10, 13, 16, 20];
        let mut phases = Vec::with_capacity(ACTION_PREDICATES.len());
        for (a, actor) in [2u32, 3].into_iter().enumerate() {
            for k in 0..6 {
                phases.push(ActionPhase {
                    actor,
                    predicate: ACTION_PREDICATES[a * 6 + k],
                    target: 1,
                    start: bounds[k],
                    end: bounds[k + 1],
                });
            }
        }
        Self {
            num_frames: 20,
            entity_count: 4,
            seed,
            phases,
            auto_phases: false,
            ..Self::default()
        }
    }

    pub fn labels(&self) -> Vec<String> {
        self.labels
            .clone()
            .unwrap_or_else(|| EntityTaxonomy::default().labels().to_vec())
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let labels = self.labels();
        let err = |m: String| Err(SynthError::Config(m));
        if self.entity_count == 0 {
            return err("entity_count must be at least 1".into());
        }
        if self.entity_count > labels.len() {
            return err(format!(
                "entity_count {} exceeds the {} taxonomy labels",
                self.entity_count,
                labels.len()
            ));
        }
        if self.num_frames == 0 {
            return err("num_frames must be at least 1".into());
        }
        if !self.entities.is_empty() && self.entities.len() != self.entity_count {
            return err(format!(
                "{} explicit entities given for entity_count {}",
                self.entities.len(),
                self.entity_count
            ));
        }
        if self.points_per_frame < 64 {
            return err("points_per_frame must be at least 64".into());
        }
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return err("image_size must be non-zero".into());
        }
        if !(self.tool_size > 0.0 && self.tool_size <= 1.0) {
            return err(format!("tool_size {} must lie in (0, 1]", self.tool_size));
        }
        for p in &self.phases {
            if p.actor == p.target || p.actor as usize >= self.entity_count || p.target as usize >= self.entity_count {
                return err(format!("phase {p:?} references invalid entities"));
            }
            if p.start >= p.end || p.end > self.num_frames {
                return err(format!("phase {p:?} has an invalid frame interval"));
            }
            if !ACTION_PREDICATES.contains(&p.predicate) {
                return err(format!("{} is derived geometrically and cannot be scripted", p.predicate));
            }
        }
        Ok(())
    }

    pub fn resolved_entities(&self) -> Vec<EntitySpec> {
        if self.entities.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            auto_entities(self.entity_count, &mut rng)
        } else {
            self.entities.clone()
        }
    }

    pub fn resolved_phases(&self) -> Vec<ActionPhase> {
        if self.phases.is_empty() && self.auto_phases {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9E37_79B9_7F4A_7C15);
            auto_phases(self.entity_count, self.num_frames, &mut rng)
        } else {
            self.phases.clone()
        }
    }

    pub fn states(&self) -> Vec<SceneState> {
        let labels = self.labels();
        let ents = self.resolved_entities();
        let phases = self.resolved_phases();
        (0..self.num_frames)
            .map(|t| SceneState {
                frame: t,
                entities: ents
                    .iter()
                    .enumerate()
                    .map(|(i, e)| {
                        let b = e.base_at(t);
                        EntityState {
                            id: i as u32,
                            label: labels[i].clone(),
                            size: e.size,
                            base: [0, 1, 2].map(|k| round6(b[k])),
                        }
                    })
                    .collect(),
                active: phases.iter().filter(|p| p.start <= t && t < p.end).cloned().collect(),
                tool_size: self.tool_size,
            })
            .collect()
    }
}

pub(crate) fn round6(v: f64) -> f64 {
    let r = (v * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Tool glyph carried by an actor: a small cube on the actor's side facing its target.
pub fn tool_glyph(actor: &EntityState, target: &EntityState, s: f64) -> EntityState {
    let (dx, dy) = (target.base[0] - actor.base[0], target.base[1] - actor.base[1]);
    let n = (dx * dx + dy * dy).sqrt().max(1e-9);
    let off = actor.size[0].max(actor.size[1]) / 2.0 + s / 2.0 - 0.02;
    EntityState {
        id: u32::MAX,
        label: String::new(),
        size: [s, s, s],
        base: [
            actor.base[0] + dx / n * off,
            actor.base[1] + dy / n * off,
            actor.base[2] + actor.size[2] * 0.6,
        ],
    }
}

/// Per-view box of an entity: 2-D extent of its projected corners, clipped to the
/// image and normalised. `None` when any corner is behind the camera or nothing is visible.
pub fn entity_box(e: &EntityState, cam: &CameraModel) -> Option<BBox> {
    let (h, w) = cam.image_size;
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for c in e.corners() {
        let [u, v] = cam.project(c)?;
        lo = [lo[0].min(u), lo[1].min(v)];
        hi = [hi[0].max(u), hi[1].max(v)];
    }
    let b = BBox::new(lo[0] / w as f64, lo[1] / h as f64, hi[0] / w as f64, hi[1] / h as f64)
        .clamped()
        .rounded6();
    (b.width() > 0.0 && b.height() > 0.0).then_some(b)
}

fn sample_points(state: &SceneState, spec: &ClipSpec, rng: &mut ChaCha8Rng) -> PointFrame {
    let total = spec.points_per_frame;
    let tools: Vec<(EntityState, [u8; 3])> = state
        .active
        .iter()
        .map(|p| {
            (
                tool_glyph(&state.entities[p.actor as usize], &state.entities[p.target as usize], state.tool_size),
                predicate_color(p.predicate),
            )
        })
        .collect();
    let per_tool = 32.min(total / 8 / tools.len().max(1));
    let floor_n = total / 4;
    let ent_n = total - floor_n - per_tool * tools.len();
    let areas: Vec<f64> = state
        .entities
        .iter()
        .map(|e| {
            let [x, y, z] = e.size;
            x * y + 2.0 * (x * z + y * z)
        })
        .collect();
    let sum: f64 = areas.iter().sum();
    let mut counts: Vec<usize> = areas.iter().map(|a| (a / sum * ent_n as f64).floor() as usize).collect();
    let mut rem = ent_n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = areas[a] / sum * ent_n as f64 - counts[a] as f64;
        let fb = areas[b] / sum * ent_n as f64 - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rem == 0 {
            break;
        }
        counts[i] += 1;
        rem -= 1;
    }
    let mut xyz = Vec::with_capacity(total);
    let mut attrs = Vec::with_capacity(total);
    let col = |c: [u8; 3]| c.iter().map(|v| *v as f64 / 255.0).collect::<Vec<f64>>();
    for _ in 0..floor_n {
        xyz.push([round6(rng.gen_range(-2.5..2.5)), round6(rng.gen_range(-2.5..2.5)), 0.0]);
        attrs.push(col(FLOOR_COLOR));
    }
    let mut surface = |e: &EntityState, n: usize, c: [u8; 3], xyz: &mut Vec<[f64; 3]>, attrs: &mut Vec<Vec<f64>>| {
        let [sx, sy, sz] = e.size;
        let faces = [sx * sy, sx * sz, sx * sz, sy * sz, sy * sz];
        let fsum: f64 = faces.iter().sum();
        for _ in 0..n {
            let mut r = rng.gen_range(0.0..fsum);
            let mut f = 0;
            while f < 4 && r >= faces[f] {
                r -= faces[f];
                f += 1;
            }
            let (a, b): (f64, f64) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            let local = match f {
                0 => [a * sx, b * sy, sz],
                1 => [a * sx, -sy / 2.0, (b + 0.5) * sz],
                2 => [a * sx, sy / 2.0, (b + 0.5) * sz],
                3 => [-sx / 2.0, a * sy, (b + 0.5) * sz],
                _ => [sx / 2.0, a * sy, (b + 0.5) * sz],
            };
            xyz.push([0, 1, 2].map(|k| round6(e.base[k] + local[k])));
            attrs.push(col(c));
        }
    };
    for (e, &n) in state.entities.iter().zip(&counts) {
        surface(e, n, entity_color(e.id), &mut xyz, &mut attrs);
    }
    for (t, c) in &tools {
        surface(t, per_tool, *c, &mut xyz, &mut attrs);
    }
    PointFrame { xyz, attrs }
}

/// Generates `spec.num_frames` samples together with the world states they were derived from.
pub fn generate_clip_with_states(spec: &ClipSpec) -> Result<GeneratedClip, SynthError> {
    spec.validate()?;
    let cameras = default_cameras(spec.image_size);
    let states = spec.states();
    let rules = RelationRules::from(spec);
    let mut frames = Vec::with_capacity(states.len());
    for st in &states {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(st.frame as u64));
        let mut images = BTreeMap::new();
        for (view, cam) in &cameras {
            images.insert(view.clone(), render::render_view(st, cam));
        }
        let entities = st
            .entities
            .iter()
            .map(|e| {
                let mut ent = Entity::new(e.id, e.label.clone());
                for (view, cam) in &cameras {
                    if let Some(b) = entity_box(e, cam) {
                        ent = ent.with_box(view.clone(), b);
                    }
                }
                ent
            })
            .collect();
        let graph = build_graph(st.frame as u64, entities, derive_relations(st, &rules))?;
        frames.push(FrameSample {
            frame_index: st.frame as u64,
            images,
            points: sample_points(st, spec, &mut rng),
            cameras: cameras.clone(),
            graph,
        });
    }
    Ok(GeneratedClip { frames, states })
}

pub fn generate_clip(spec: &ClipSpec) -> Result<Vec<FrameSample>, SynthError> {
    Ok(generate_clip_with_states(spec)?.frames)
}
