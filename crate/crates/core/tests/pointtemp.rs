mod common;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tritemp_core::autograd::Graph;
use tritemp_core::params::{Init, ParamStore};
use tritemp_core::pointtemp::{farthest_point_sampling, neighborhoods, PointFrame, PointSequence, PointTemp, PointTempConfig};

fn cloud(r: &mut ChaCha8Rng, n: usize, spread: f64) -> PointFrame {
    PointFrame {
        xyz: (0..n)
            .map(|_| [r.gen_range(-spread..spread), r.gen_range(-spread..spread), r.gen_range(-spread..spread)])
            .collect(),
        attrs: (0..n).map(|_| vec![r.gen(), r.gen(), r.gen()]).collect(),
    }
}

fn model(cfg: &PointTempConfig, seed: u64) -> (ParamStore, PointTemp) {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let pt = PointTemp::new(&mut store, &mut init, cfg, 3, 8).unwrap();
    (store, pt)
}

fn small_cfg() -> PointTempConfig {
    PointTempConfig {
        anchors: 8,
        hidden: 8,
        heads: 2,
        ..PointTempConfig::default()
    }
}

#[test]
fn tokens_do_not_depend_on_point_storage_order() {
    let cfg = small_cfg();
    for seed in 0..10 {
        let (store, pt) = model(&cfg, seed);
        let mut r = common::rng(seed);
        let frames: Vec<PointFrame> = (0..3).map(|_| cloud(&mut r, 60, 1.0)).collect();
        let mut shuffled = frames.clone();
        for f in &mut shuffled {
            let mut order: Vec<usize> = (0..f.len()).collect();
            order.shuffle(&mut r);
            *f = PointFrame {
                xyz: order.iter().map(|&i| f.xyz[i]).collect(),
                attrs: order.iter().map(|&i| f.attrs[i].clone()).collect(),
            };
        }
        let run = |frames: Vec<PointFrame>| {
            let mut g = Graph::inference(&store);
            let out = pt.forward(&mut g, &PointSequence::new(frames)).unwrap();
            (g.value(out.tokens).clone(), out.anchors, out.empty)
        };
        let (a, anchors_a, empty_a) = run(frames);
        let (b, anchors_b, empty_b) = run(shuffled);
        assert_eq!(empty_a, empty_b);
        for (fa, fb) in anchors_a.iter().zip(&anchors_b) {
            for (x, y) in fa.iter().zip(fb) {
                for k in 0..3 {
                    assert!((x[k] - y[k]).abs() < 1e-12);
                }
            }
        }
        assert!(a.max_abs_diff(&b) < 1e-9, "seed {seed}: {}", a.max_abs_diff(&b));
    }
}

#[test]
fn neighbourhoods_match_brute_force_radius_search() {
    let mut emptied = 0;
    for seed in 0..20 {
        let mut r = common::rng(100 + seed);
        let l = 4;
        let window = 3;
        let radius = 0.3;
        let points: Vec<Vec<[f64; 3]>> = (0..l)
            .map(|_| {
                let n = r.gen_range(5..30);
                cloud(&mut r, n, 1.0).xyz
            })
            .collect();
        let anchors: Vec<Vec<[f64; 3]>> = (0..l).map(|_| cloud(&mut r, 6, 1.5).xyz).collect();
        let nb = neighborhoods(&points, &anchors, radius, window);
        let offsets: Vec<usize> = points
            .iter()
            .scan(0, |acc, p| {
                let o = *acc;
                *acc += p.len();
                Some(o)
            })
            .collect();
        for t in 0..l {
            for (k, a) in anchors[t].iter().enumerate() {
                let mut want = Vec::new();
                for f in t.saturating_sub(window / 2)..=(t + window / 2).min(l - 1) {
                    for (i, p) in points[f].iter().enumerate() {
                        let d2: f64 = (0..3).map(|c| (p[c] - a[c]).powi(2)).sum();
                        if d2 <= radius * radius {
                            want.push(offsets[f] + i);
                        }
                    }
                }
                emptied += usize::from(want.is_empty());
                assert_eq!(nb[t * 6 + k], want, "seed {seed} frame {t} anchor {k}");
            }
        }
    }
    assert!(emptied > 0, "fixture never produced an empty neighbourhood");
}

#[test]
fn model_flags_follow_neighbourhoods() {
    let cfg = small_cfg();
    let (store, pt) = model(&cfg, 4);
    let mut r = common::rng(4);
    let seq = PointSequence::new((0..3).map(|_| cloud(&mut r, 50, 1.0)).collect());
    let mut g = Graph::inference(&store);
    let out = pt.forward(&mut g, &seq).unwrap();
    let norm = seq.normalized();
    let points: Vec<Vec<[f64; 3]>> = norm.frames.iter().map(|f| f.xyz.clone()).collect();
    let nb = neighborhoods(&points, &out.anchors, cfg.radius, cfg.temporal_window);
    let want: Vec<bool> = nb.iter().map(Vec::is_empty).collect();
    assert_eq!(out.empty, want);
}

#[test]
fn fps_starts_at_the_point_closest_to_the_centroid() {
    for seed in 0..50 {
        let mut r = common::rng(seed);
        let n = r.gen_range(5..80);
        let f = cloud(&mut r, n, 1.0);
        let n = f.len() as f64;
        let c: Vec<f64> = (0..3).map(|k| f.xyz.iter().map(|p| p[k]).sum::<f64>() / n).collect();
        let d = |p: &[f64; 3]| (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>();
        let best = (0..f.len()).min_by(|&a, &b| d(&f.xyz[a]).partial_cmp(&d(&f.xyz[b])).unwrap()).unwrap();
        let picks = farthest_point_sampling(&f.xyz, 4.min(f.len()));
        assert_eq!(picks[0], best);
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), picks.len());
    }
}
