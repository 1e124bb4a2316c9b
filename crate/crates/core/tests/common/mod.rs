//! Independent oracles shared by the property tests and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tritemp_core::autograd::{Graph, Var};
use tritemp_core::boxes::BBox;
use tritemp_core::camera::CameraModel;
use tritemp_core::config::RunConfig;
use tritemp_core::graph::NUM_PREDICATES;
use tritemp_core::losses::{self, LossWeights, PairTarget};
use tritemp_core::metrics::macro_average;
use tritemp_core::pair_decoder::matcher::hungarian;
use tritemp_core::params::{Init, ParamStore};
use tritemp_core::synth::{generate_clip, ClipSpec};
use tritemp_core::tensor::Tensor;
use tritemp_core::train::{ablate, evaluate_model, load_embeddings, AblationAxis, AblationRow, TakeFrames, Trainer};
use tritemp_core::unify::{align_loss, frustum_select, EmbeddingTable};
use tritemp_core::viewtemp::LocalTemporalAttention;
use tritemp_core::TriTempModel;

pub const PUBLISHED_CLASS_F1: [f64; NUM_PREDICATES] =
    [0.76, 0.97, 0.89, 0.95, 0.85, 0.96, 0.95, 0.83, 1.00, 0.92, 0.87, 0.97, 0.95, 0.77];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_tensor(r: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let (u1, u2): (f64, f64) = (r.gen_range(1e-12..1.0), r.gen());
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape, data)
}

pub fn random_box(r: &mut ChaCha8Rng) -> BBox {
    let x1 = r.gen_range(0.0..0.6);
    let y1 = r.gen_range(0.0..0.6);
    BBox::new(x1, y1, x1 + r.gen_range(0.1..0.4), y1 + r.gen_range(0.1..0.4))
}

// ---------------------------------------------------------------- macro average

pub fn published_macro_f1() -> f64 {
    macro_average(&PUBLISHED_CLASS_F1)
}

// ---------------------------------------------------------------- gradients

/// `||a - n|| / max(||a||, ||n||)`, with 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub const FD_STEP: f64 = 1e-4;

type Loss = dyn for<'a> Fn(&mut Graph<'a>, &[Var]) -> Var;

/// Relative error of reverse-mode gradients against central differences over every input element.
pub fn grad_check(inputs: &[Tensor], f: &Loss) -> f64 {
    grad_check_in(&ParamStore::new(), inputs, f)
}

/// As [`grad_check`], with frozen parameters from `store` available to `f`.
pub fn grad_check_in(store: &ParamStore, inputs: &[Tensor], f: &Loss) -> f64 {
    let mut g = Graph::inference(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let analytic: Vec<f64> = vars
        .iter()
        .zip(inputs)
        .flat_map(|(v, t)| grads.get_or_zeros(*v, t.shape()).into_data())
        .collect();
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::inference(store);
        let vs: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let o = f(&mut g, &vs);
        g.value(o).item()
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + FD_STEP;
            let plus = eval(&work);
            work[i].data_mut()[j] = x - FD_STEP;
            let minus = eval(&work);
            work[i].data_mut()[j] = x;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
    }
    relative_error(&analytic, &numeric)
}

fn probs(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(0.05..0.95)).collect())
}

fn boxes_tensor(r: &mut ChaCha8Rng, n: usize) -> (Tensor, Vec<BBox>) {
    let b: Vec<BBox> = (0..n).map(|_| random_box(r)).collect();
    (Tensor::new(&[n, 4], b.iter().flat_map(|x| x.to_array()).collect()), b)
}

pub fn focal_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let p = probs(&mut r, &[8]);
    let y: Vec<f64> = (0..8).map(|_| if r.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
    let alpha = r.gen_range(0.1..0.9);
    let gamma = r.gen_range(0.0..3.0);
    grad_check(&[p], &move |g, v| {
        let f = g.focal(v[0], &y, alpha, gamma);
        g.sum(f)
    })
}

pub fn giou_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (pred, _) = boxes_tensor(&mut r, 4);
    let (_, targets) = boxes_tensor(&mut r, 4);
    grad_check(&[pred], &move |g, v| losses::giou_loss_sum(g, v[0], &targets))
}

pub fn coord_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (q, views) = (4, 2);
    let (b, _) = boxes_tensor(&mut r, q * views * 2);
    let boxes = b.reshaped(&[q, views, 2, 4]);
    let scores = probs(&mut r, &[q, 2]);
    let targets: Vec<PairTarget> = (0..2)
        .map(|k| PairTarget {
            subject: k,
            object: k + 1,
            boxes: (0..views)
                .map(|_| {
                    let s = r.gen_bool(0.8).then(|| random_box(&mut r));
                    let o = r.gen_bool(0.8).then(|| random_box(&mut r));
                    [s, o]
                })
                .collect(),
            labels: [0.0; NUM_PREDICATES],
        })
        .collect();
    let a = r.gen_range(0..q);
    let assignment = vec![(a, 0), ((a + 1 + r.gen_range(0..q - 1)) % q, 1)];
    let w = LossWeights::default();
    grad_check(&[boxes, scores], &move |g, v| losses::coord_loss(g, v[0], v[1], &assignment, &targets, &w))
}

pub fn relation_cls_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = 3;
    let scores = probs(&mut r, &[n, NUM_PREDICATES]);
    let labels: Vec<[f64; NUM_PREDICATES]> = (0..n)
        .map(|_| std::array::from_fn(|_| if r.gen_bool(0.2) { 1.0 } else { 0.0 }))
        .collect();
    let w = LossWeights {
        focal_alpha: r.gen_range(0.1..0.9),
        ..LossWeights::default()
    };
    grad_check(&[scores], &move |g, v| losses::relation_cls_loss(g, v[0], &labels, &w))
}

pub fn align_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, e) = (3, 8);
    let u = normal_tensor(&mut r, &[n, e], 1.0);
    let targets: Vec<Vec<f64>> = (0..n).map(|_| normal_tensor(&mut r, &[e], 1.0).into_data()).collect();
    grad_check(&[u], &move |g, v| align_loss(g, Some(v[0]), &targets))
}

fn attention_module(seed: u64, dim: usize, heads: usize, l: usize) -> (ParamStore, LocalTemporalAttention) {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let attn = LocalTemporalAttention::new(&mut store, &mut init, "lta", dim, heads, l);
    let mut r = rng(seed ^ 0xA5A5);
    *store.get_mut(attn.offset_embed) = normal_tensor(&mut r, &[l, dim], 0.5);
    (store, attn)
}

fn attention_output(store: &ParamStore, attn: &LocalTemporalAttention, frames: &[Tensor]) -> Tensor {
    let mut g = Graph::inference(store);
    let vs: Vec<Var> = frames.iter().map(|t| g.constant(t.clone())).collect();
    let (out, _) = attn.forward(&mut g, vs[vs.len() - 1], &vs).expect("attention forward");
    g.value(out).clone()
}

/// Gradient check of local temporal attention (C=4, 3x3, l=3) over inputs and parameters.
pub fn attention_instance(seed: u64) -> f64 {
    let (c, h, w, l) = (4, 3, 3, 3);
    let (mut store, attn) = attention_module(seed, c, 2, l);
    let mut r = rng(seed);
    let frames: Vec<Tensor> = (0..l).map(|_| normal_tensor(&mut r, &[h, w, c], 1.0)).collect();
    let weights = normal_tensor(&mut r, &[h, w, c], 1.0);
    let loss = |store: &ParamStore, frames: &[Tensor]| -> (f64, Vec<f64>) {
        let mut g = Graph::with_params(store);
        let vs: Vec<Var> = frames.iter().map(|t| g.input(t.clone())).collect();
        let (out, _) = attn.forward(&mut g, vs[l - 1], &vs).expect("attention forward");
        let wv = g.constant(weights.clone());
        let m = g.mul(out, wv);
        let s = g.sum(m);
        let grads = g.backward(s);
        let mut flat: Vec<f64> = vs.iter().flat_map(|v| grads.get_or_zeros(*v, &[h, w, c]).into_data()).collect();
        let by_id: std::collections::HashMap<_, _> = grads.params().iter().cloned().collect();
        for (id, _, t) in store.iter() {
            match by_id.get(&id) {
                Some(gt) => flat.extend_from_slice(gt.data()),
                None => flat.extend(std::iter::repeat(0.0).take(t.numel())),
            }
        }
        (g.value(s).item(), flat)
    };
    let (_, analytic) = loss(&store, &frames);
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = frames.clone();
    for i in 0..l {
        for j in 0..work[i].numel() {
            let x = work[i].data()[j];
            work[i].data_mut()[j] = x + FD_STEP;
            let plus = loss(&store, &work).0;
            work[i].data_mut()[j] = x - FD_STEP;
            let minus = loss(&store, &work).0;
            work[i].data_mut()[j] = x;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for j in 0..store.get(id).numel() {
            let x = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = x + FD_STEP;
            let plus = loss(&store, &frames).0;
            store.get_mut(id).data_mut()[j] = x - FD_STEP;
            let minus = loss(&store, &frames).0;
            store.get_mut(id).data_mut()[j] = x;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
    }
    relative_error(&analytic, &numeric)
}

pub type GradInstance = fn(u64) -> f64;

pub const GRADIENT_ORACLES: [(&str, GradInstance); 6] = [
    ("focal", focal_instance),
    ("giou", giou_instance),
    ("coord", coord_instance),
    ("relation-cls", relation_cls_instance),
    ("align", align_instance),
    ("local_temporal_attention", attention_instance),
];

/// Worst relative error over `n` seeded instances.
pub fn worst_gradient_error(f: GradInstance, n: u64) -> f64 {
    (0..n).map(|s| f(1000 + s)).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- ViewTemp locality

/// Perturbs one location of one frame and checks every other location's output is bit-identical.
pub fn viewtemp_locality_trial(seed: u64) -> Result<(), String> {
    let (c, h, w, l) = (4, 8, 8, 3);
    let (store, attn) = attention_module(seed, c, 2, l);
    let mut r = rng(seed);
    let frames: Vec<Tensor> = (0..l).map(|_| normal_tensor(&mut r, &[h, w, c], 1.0)).collect();
    let base = attention_output(&store, &attn, &frames);
    let (t, ph, pw) = (r.gen_range(0..l), r.gen_range(0..h), r.gen_range(0..w));
    let mut moved = frames.clone();
    for k in 0..c {
        moved[t].data_mut()[(ph * w + pw) * c + k] += r.gen_range(-3.0..3.0);
    }
    let out = attention_output(&store, &attn, &moved);
    for y in 0..h {
        for x in 0..w {
            if (y, x) == (ph, pw) {
                continue;
            }
            for k in 0..c {
                let i = (y * w + x) * c + k;
                if base.data()[i].to_bits() != out.data()[i].to_bits() {
                    return Err(format!(
                        "trial {seed}: perturbing frame {t} at ({ph},{pw}) changed ({y},{x}) channel {k}"
                    ));
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- Hungarian

/// Minimum total cost over all matchings of size `min(rows, cols)`, summed in ascending row order.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost[0].len();
    let need = rows.min(cols);
    fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, taken: usize, need: usize, acc: f64, best: &mut f64) {
        if taken == need {
            *best = best.min(acc);
            return;
        }
        if row == cost.len() || cost.len() - row < need - taken {
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                rec(cost, row + 1, used, taken + 1, need, acc + cost[row][c], best);
                used[c] = false;
            }
        }
        rec(cost, row + 1, used, taken, need, acc, best);
    }
    let mut best = f64::INFINITY;
    rec(cost, 0, &mut vec![false; cols], 0, need, 0.0, &mut best);
    best
}

pub fn random_cost(r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let rows = r.gen_range(1..=6);
    let cols = r.gen_range(1..=6);
    let integral = r.gen_bool(0.5);
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| if integral { r.gen_range(0..20) as f64 } else { r.gen_range(0.0..10.0) })
                .collect()
        })
        .collect()
}

pub fn hungarian_trial(r: &mut ChaCha8Rng) -> Result<(), String> {
    let cost = random_cost(r);
    let m = hungarian(&cost).map_err(|e| e.to_string())?;
    let need = cost.len().min(cost[0].len());
    let mut rows: Vec<usize> = m.assignment.iter().map(|a| a.0).collect();
    let mut cols: Vec<usize> = m.assignment.iter().map(|a| a.1).collect();
    rows.dedup();
    cols.sort_unstable();
    cols.dedup();
    if rows.len() != need || cols.len() != need {
        return Err(format!("{cost:?}: assignment {:?} is not a full matching", m.assignment));
    }
    let brute = brute_force_assignment(&cost);
    if m.total_cost != brute {
        return Err(format!("{cost:?}: hungarian {} vs brute force {brute}", m.total_cost));
    }
    Ok(())
}

// ---------------------------------------------------------------- frustum selection

pub fn random_camera(r: &mut ChaCha8Rng) -> CameraModel {
    let az: f64 = r.gen_range(0.0..std::f64::consts::TAU);
    let el: f64 = r.gen_range(0.2..1.2);
    let d = r.gen_range(3.0..7.0);
    let eye = [d * el.cos() * az.cos(), d * el.cos() * az.sin(), d * el.sin()];
    let target = [r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5), r.gen_range(0.0..1.0)];
    CameraModel::look_at("cam", eye, target, [0.0, 0.0, 1.0], r.gen_range(150.0..400.0), (192, 256))
}

/// Per-point check: homogeneous projection, positive depth, pixel inside the scaled box.
pub fn brute_force_frustum(b: &BBox, cam: &CameraModel, points: &[[f64; 3]]) -> Vec<usize> {
    let p = &cam.projection;
    let (h, w) = (cam.image_size.0 as f64, cam.image_size.1 as f64);
    let mut out = Vec::new();
    for (i, x) in points.iter().enumerate() {
        let row = |k: usize| p[k][0] * x[0] + p[k][1] * x[1] + p[k][2] * x[2] + p[k][3];
        let depth = row(2);
        if depth <= 0.0 {
            continue;
        }
        let (u, v) = (row(0) / depth, row(1) / depth);
        if u >= b.x1 * w && u <= b.x2 * w && v >= b.y1 * h && v <= b.y2 * h {
            out.push(i);
        }
    }
    out
}

/// Returns the number of selected points on success.
pub fn frustum_trial(seed: u64, n_points: usize) -> Result<usize, String> {
    let mut r = rng(seed);
    let cam = random_camera(&mut r);
    let b = random_box(&mut r);
    let points: Vec<[f64; 3]> = (0..n_points)
        .map(|_| [r.gen_range(-4.0..4.0), r.gen_range(-4.0..4.0), r.gen_range(-1.0..3.0)])
        .collect();
    let got = frustum_select(&b, &cam, &points);
    let want = brute_force_frustum(&b, &cam, &points);
    if got != want {
        return Err(format!("scene {seed}: {} selected vs {} by brute force", got.len(), want.len()));
    }
    Ok(got.len())
}

// ---------------------------------------------------------------- hand-computed losses

/// `(name, computed, expected)`.
pub fn hand_loss_values() -> Vec<(&'static str, f64, f64)> {
    let w = LossWeights::default();
    let unit = BBox::new(0.0, 0.0, 1.0, 1.0);
    vec![
        ("focal(0.5, y=1)", losses::focal_loss(0.5, 1.0, w.focal_alpha, w.focal_gamma), 0.043321),
        ("focal(0.9, y=0)", losses::focal_loss(0.9, 0.0, w.focal_alpha, w.focal_gamma), 1.398821),
        (
            "giou corner",
            losses::giou_loss(&unit, &BBox::new(1.0, 1.0, 2.0, 2.0)).expect("valid boxes"),
            1.5,
        ),
        (
            "giou containment",
            losses::giou_loss(&BBox::new(0.0, 0.0, 2.0, 2.0), &unit).expect("valid boxes"),
            0.75,
        ),
        ("total(2, 1, 0.5)", losses::total_loss_value(2.0, 1.0, 0.5, &w).expect("finite"), 3.05),
    ]
}

// ---------------------------------------------------------------- classifier init

pub fn classifier_init_diff() -> f64 {
    let cfg = RunConfig::overfit();
    let table = load_embeddings(&cfg).expect("embeddings").expect("pseudo provider");
    let m = table.predicate_matrix().expect("predicate matrix");
    let model = TriTempModel::new(&cfg, Some(table)).expect("model");
    let w = model.store.get(model.classifier().weight);
    assert_eq!(w.shape(), m.shape());
    w.max_abs_diff(&m)
}

pub fn pseudo_table(dim: usize, seed: u64) -> EmbeddingTable {
    EmbeddingTable::pseudo(&Default::default(), seed, dim, 0.5)
}

// ---------------------------------------------------------------- training runs

pub fn coverage_take(seed: u64) -> TakeFrames {
    TakeFrames {
        name: "take_1".into(),
        frames: generate_clip(&ClipSpec::full_coverage(seed)).expect("clip"),
    }
}

pub struct OverfitOutcome {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub macro_f1: f64,
    pub non_increasing_after_50: bool,
}

/// Trains the overfit profile on one full-coverage clip and scores the training set.
pub fn overfit_run(cfg: &RunConfig) -> OverfitOutcome {
    let data = vec![coverage_take(1)];
    let mut t = Trainer::new(cfg, load_embeddings(cfg).expect("embeddings")).expect("trainer");
    t.run(&data, None).expect("training");
    let (report, _) = evaluate_model(&t.model, &data).expect("evaluation");
    let totals: Vec<f64> = t.log.iter().map(|r| r.total).collect();
    let avg: Vec<f64> = totals.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    let non_increasing_after_50 = avg.iter().skip(50).zip(avg.iter().skip(51)).all(|(a, b)| b <= a);
    OverfitOutcome {
        steps: t.step,
        initial_loss: totals[0],
        final_loss: *totals.last().expect("at least one step"),
        macro_f1: report.macro_avg.f1,
        non_increasing_after_50,
    }
}

/// Component ablation on a fixed 3-take corpus (two training takes, one validation take).
pub fn ablation_direction(cfg: &RunConfig) -> Vec<AblationRow> {
    let take = |k: u64| TakeFrames {
        name: format!("take_{k}"),
        frames: generate_clip(&ClipSpec {
            seed: 40 + k,
            ..ClipSpec::default()
        })
        .expect("clip"),
    };
    let train = vec![take(1), take(2)];
    let val = vec![take(3)];
    ablate(cfg, AblationAxis::Components, &train, &val, None).expect("ablation")
}
