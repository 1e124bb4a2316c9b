mod common;

use tritemp_core::autograd::Graph;
use tritemp_core::checkpoint::Checkpoint;
use tritemp_core::config::{EmbeddingProvider, RunConfig};
use tritemp_core::graph::NUM_PREDICATES;
use tritemp_core::train::{
    evaluate_dump, evaluate_model, load_embeddings, model_from_checkpoint, read_predictions, write_predictions, StepRecord,
    TakeFrames, TrainError, Trainer,
};
use tritemp_core::unify::EmbeddingTable;

fn short(steps: usize) -> RunConfig {
    let mut c = RunConfig::overfit();
    c.train.batch_size = 2;
    c.train.max_steps = Some(steps);
    c
}

fn data() -> Vec<TakeFrames> {
    vec![common::coverage_take(1)]
}

fn trained(cfg: &RunConfig, data: &[TakeFrames]) -> Trainer {
    let mut t = Trainer::new(cfg, load_embeddings(cfg).unwrap()).unwrap();
    t.run(data, None).unwrap();
    t
}

#[test]
fn two_step_dry_run_logs_two_finite_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short(2);
    let mut t = Trainer::new(&cfg, load_embeddings(&cfg).unwrap()).unwrap();
    t.run(&data(), Some(dir.path())).unwrap();
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    let recs: Vec<StepRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 2);
    for r in &recs {
        assert!([r.coord, r.cls, r.text, r.total].iter().all(|v| v.is_finite()));
    }
    assert_eq!(recs[1].step, 2);
    assert!(dir.path().join("e1.ckpt").exists());
    let saved = RunConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn identical_seeds_give_identical_checkpoints_and_logs() {
    let cfg = short(3);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let mut t = Trainer::new(&cfg, load_embeddings(&cfg).unwrap()).unwrap();
        t.run(&data(), Some(d.path())).unwrap();
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&a, "log.jsonl"), read(&b, "log.jsonl"));
    assert_eq!(read(&a, "e1.ckpt"), read(&b, "e1.ckpt"));

    let mut other = cfg.clone();
    other.seed += 1;
    let c = tempfile::tempdir().unwrap();
    Trainer::new(&other, load_embeddings(&other).unwrap()).unwrap().run(&data(), Some(c.path())).unwrap();
    assert_ne!(read(&a, "e1.ckpt"), read(&c, "e1.ckpt"));
}

#[test]
fn checkpoint_round_trip_reproduces_forward_bit_exactly() {
    let data = data();
    let cfg = short(2);
    let t = trained(&cfg, &data);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    t.checkpoint().save(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    let (model, mismatch) = model_from_checkpoint(&ckpt, &cfg).unwrap();
    assert!(!mismatch);
    assert_eq!(model.store.max_abs_diff(&t.model.store), 0.0);
    let window = &data[0].frames[5..8];
    assert_eq!(model.predict(window, 0.0).unwrap(), t.model.predict(window, 0.0).unwrap());
    let loss = |m: &tritemp_core::TriTempModel| {
        let mut g = Graph::with_params(&m.store);
        let (v, _) = m.loss(&mut g, window).unwrap();
        g.value(v).item().to_bits()
    };
    assert_eq!(loss(&model), loss(&t.model));

    let resumed = Trainer::from_checkpoint(&ckpt, load_embeddings(&cfg).unwrap()).unwrap();
    assert_eq!(resumed.step, 2);
    assert_eq!(resumed.optimizer, t.optimizer);
}

#[test]
fn config_hash_mismatch_is_reported_not_fatal() {
    let cfg = short(1);
    let t = trained(&cfg, &data());
    let mut other = cfg.clone();
    other.eval.dump_min_score = 0.2;
    let (_, mismatch) = model_from_checkpoint(&t.checkpoint(), &other).unwrap();
    assert!(mismatch);
}

#[test]
fn evaluation_matches_logged_training_f1() {
    let data = data();
    let mut cfg = short(20);
    cfg.train.eval_train = true;
    let t = trained(&cfg, &data);
    let logged = t.history.last().unwrap().train_f1.unwrap();
    let (model, _) = model_from_checkpoint(&t.checkpoint(), &cfg).unwrap();
    let (report, _) = evaluate_model(&model, &data).unwrap();
    assert!((report.macro_avg.f1 - logged).abs() <= 0.01, "{} vs {logged}", report.macro_avg.f1);
}

#[test]
fn untrained_model_report_is_well_formed_and_dump_round_trips() {
    let data = data();
    let cfg = RunConfig::overfit();
    let t = Trainer::new(&cfg, load_embeddings(&cfg).unwrap()).unwrap();
    let (report, preds) = evaluate_model(&t.model, &data).unwrap();
    assert_eq!(report.per_predicate.len(), NUM_PREDICATES);
    assert_eq!(report.frames, data[0].frames.len());
    for c in &report.per_predicate {
        assert!((0.0..=1.0).contains(&c.f1));
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("preds.jsonl");
    write_predictions(&p, &preds).unwrap();
    let back = read_predictions(&p).unwrap();
    assert_eq!(back, preds);
    assert_eq!(evaluate_dump(&back, &data, &cfg).unwrap(), report);
}

#[test]
fn non_finite_loss_aborts_with_step_dump() {
    let mut cfg = short(10);
    cfg.optimizer.lr = 1e300;
    cfg.optimizer.max_grad_norm = None;
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(&cfg, load_embeddings(&cfg).unwrap()).unwrap();
    match t.run(&data(), Some(dir.path())) {
        Err(TrainError::NonFinite { step, .. }) => {
            let dump = dir.path().join(format!("abort-step{step}.json"));
            let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dump).unwrap()).unwrap();
            assert_eq!(v["step"], step);
        }
        other => panic!("expected a non-finite abort, got {:?}", other.map(|_| t.step)),
    }
}

#[test]
fn missing_embedding_keys_fail_at_startup() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.txt");
    let full = common::pseudo_table(16, 3);
    let mut partial = EmbeddingTable::new(16, "partial");
    for (k, v) in full.iter().skip(1) {
        partial.insert(k, v.to_vec()).unwrap();
    }
    partial.save(&path).unwrap();
    let mut cfg = RunConfig::overfit();
    cfg.text.provider = EmbeddingProvider::File;
    cfg.text.path = Some(path);
    assert!(load_embeddings(&cfg).is_err());
    assert!(Trainer::new(&cfg, Some(partial)).is_err());
}
