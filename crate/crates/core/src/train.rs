//! Training loop, sliding-window evaluation, prediction dumps and ablation sweeps.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, CheckpointError, EpochRecord};
use crate::config::{ConfigError, EmbeddingProvider, LrSchedule, RunConfig};
use crate::pair_decoder::MatchError;
use crate::metrics::{evaluate, EvalReport, FramePrediction, FrameTruth, MetricsError};
use crate::model::{LossParts, ModelError, TriTempModel};
use crate::nn::{accumulate_grads, AdamW, AdamWConfig};
use crate::params::ParamId;
use crate::synth::{augment, sliding_windows, Dataset, DatasetError, FrameSample};
use crate::tensor::Tensor;
use crate::unify::{EmbeddingTable, UnifyError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Embeddings(#[from] UnifyError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("prediction dump line {line}: {message}")]
    Dump { line: usize, message: String },
    #[error("non-finite values at step {step} (take {take}, frames {frames:?}): {source}")]
    NonFinite {
        step: usize,
        take: String,
        frames: Vec<u64>,
        source: Box<ModelError>,
    },
    #[error("split {0} has no usable windows")]
    NoWindows(String),
    #[error("unknown ablation axis `{0}` (expected kernels, components or embeddings)")]
    UnknownAxis(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// All frames of one take, in temporal order.
#[derive(Clone, Debug)]
pub struct TakeFrames {
    pub name: String,
    pub frames: Vec<FrameSample>,
}

pub fn load_split(root: &Path, split: &str) -> Result<Vec<TakeFrames>, TrainError> {
    let ds = Dataset::open(root)?;
    ds.takes(split)?
        .into_iter()
        .map(|t| {
            Ok(TakeFrames {
                name: t.name.clone(),
                frames: t.load_all()?,
            })
        })
        .collect()
}

/// The embedding table selected by `text.provider`.
pub fn load_embeddings(cfg: &RunConfig) -> Result<Option<EmbeddingTable>, TrainError> {
    let tax = cfg.taxonomy()?;
    Ok(match cfg.text.provider {
        EmbeddingProvider::None => None,
        EmbeddingProvider::Pseudo => Some(EmbeddingTable::pseudo(
            &tax,
            cfg.text.pseudo_seed,
            cfg.text.dim,
            cfg.text.pseudo_correlation,
        )),
        EmbeddingProvider::File => {
            let path = cfg.text.path.as_ref().ok_or(ConfigError::Invalid {
                key: "text.path",
                message: "the file provider needs an embedding file".into(),
            })?;
            let t = EmbeddingTable::load(path)?;
            t.check_complete(&tax)?;
            Some(t)
        }
    })
}

/// One JSONL record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub coord: f64,
    pub cls: f64,
    pub text: f64,
    pub total: f64,
}

fn window_frames(take: &TakeFrames, idx: &[usize]) -> Vec<FrameSample> {
    idx.iter().map(|&i| take.frames[i].clone()).collect()
}

pub struct Trainer {
    pub model: TriTempModel,
    pub optimizer: AdamW,
    pub epoch: usize,
    pub step: usize,
    pub history: Vec<EpochRecord>,
    pub log: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, embeddings: Option<EmbeddingTable>) -> Result<Self, TrainError> {
        let model = TriTempModel::new(cfg, embeddings)?;
        let o = &cfg.optimizer;
        let optimizer = AdamW::new(
            AdamWConfig {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                max_grad_norm: o.max_grad_norm,
            },
            &model.store,
        );
        Ok(Self {
            model,
            optimizer,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            log: Vec::new(),
        })
    }

    /// Resumes from a checkpoint (parameters, optimizer state, counters).
    pub fn from_checkpoint(ckpt: &Checkpoint, embeddings: Option<EmbeddingTable>) -> Result<Self, TrainError> {
        let mut t = Self::new(&ckpt.config, embeddings)?;
        ckpt.restore_params(&mut t.model.store)?;
        t.optimizer = ckpt.optimizer.clone();
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        t.history = ckpt.history.clone();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model.config, &self.model.store, &self.optimizer, self.epoch, self.step, &self.history)
    }

    fn lr_at(&self, total_steps: usize) -> f64 {
        let base = self.model.config.optimizer.lr;
        match self.model.config.optimizer.schedule {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = self.step as f64 / total_steps.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }

    /// One optimizer step over a batch of `(take, window)` examples with per-example augmentation seeds.
    pub fn train_step(
        &mut self,
        data: &[TakeFrames],
        batch: &[(usize, Vec<usize>, u64)],
        lr: f64,
        dump_dir: Option<&Path>,
    ) -> Result<LossParts, TrainError> {
        let cfg = &self.model.config;
        let scale = 1.0 / batch.len() as f64;
        let mut acc: Vec<(ParamId, Tensor)> = Vec::new();
        let mut mean = LossParts::default();
        for (take, idx, seed) in batch {
            let t = &data[*take];
            let mut window = window_frames(t, idx);
            if cfg.train.augment {
                window = window.iter().map(|f| augment(f, &cfg.train.augmentation, *seed)).collect();
            }
            let mut g = Graph::with_params(&self.model.store);
            let (total, parts) = match self.model.loss(&mut g, &window) {
                Err(source @ (ModelError::Loss(_) | ModelError::Match(MatchError::NonFinite { .. }))) => {
                    let frames: Vec<u64> = window.iter().map(|f| f.frame_index).collect();
                    if let Some(dir) = dump_dir {
                        let dump = serde_json::json!({
                            "step": self.step,
                            "epoch": self.epoch,
                            "take": t.name,
                            "frames": frames,
                            "error": source.to_string(),
                        });
                        let p = dir.join(format!("abort-step{}.json", self.step));
                        std::fs::write(&p, dump.to_string()).map_err(io_err(&p))?;
                    }
                    return Err(TrainError::NonFinite {
                        step: self.step,
                        take: t.name.clone(),
                        frames,
                        source: Box::new(source),
                    });
                }
                other => other?,
            };
            let grads = g.backward(total).into_params();
            accumulate_grads(&mut acc, grads, scale);
            mean.coord += parts.coord * scale;
            mean.cls += parts.cls * scale;
            mean.text += parts.text * scale;
            mean.total += parts.total * scale;
        }
        self.optimizer.config.lr = lr;
        self.optimizer.step(&mut self.model.store, &acc);
        self.step += 1;
        Ok(mean)
    }

    /// Runs the configured epochs. With `out_dir`, writes `log.jsonl`, `config.json` and `e<N>.ckpt`.
    pub fn run(&mut self, data: &[TakeFrames], out_dir: Option<&Path>) -> Result<(), TrainError> {
        let cfg = self.model.config.clone();
        let mut examples = Vec::new();
        for (ti, t) in data.iter().enumerate() {
            for w in sliding_windows(t.frames.len(), cfg.temporal.l, cfg.dataset.padded_windows) {
                examples.push((ti, w));
            }
        }
        if examples.is_empty() {
            return Err(TrainError::NoWindows(cfg.dataset.train_split.clone()));
        }
        let mut log_file = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(io_err(dir))?;
                let cp = dir.join("config.json");
                std::fs::write(&cp, cfg.to_json()).map_err(io_err(&cp))?;
                let lp = dir.join("log.jsonl");
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&lp)
                    .map_err(io_err(&lp))?;
                Some((f, lp))
            }
            None => None,
        };
        let bs = cfg.train.batch_size;
        let per_epoch = examples.len().div_ceil(bs);
        let planned = cfg.train.max_steps.unwrap_or(usize::MAX).min(per_epoch * cfg.train.epochs);
        while self.epoch < cfg.train.epochs && self.step < planned {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (self.epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut order = examples.clone();
            order.shuffle(&mut rng);
            let seeded: Vec<(usize, Vec<usize>, u64)> = order.into_iter().map(|(t, w)| (t, w, rng.gen())).collect();
            let mut sum = 0.0;
            let mut steps = 0;
            for batch in seeded.chunks(bs) {
                if self.step >= planned {
                    break;
                }
                let lr = self.lr_at(planned);
                let parts = self.train_step(data, batch, lr, out_dir)?;
                let rec = StepRecord {
                    step: self.step,
                    epoch: self.epoch,
                    lr,
                    coord: parts.coord,
                    cls: parts.cls,
                    text: parts.text,
                    total: parts.total,
                };
                if let Some((f, p)) = log_file.as_mut() {
                    let line = serde_json::to_string(&rec).expect("log record");
                    writeln!(f, "{line}").map_err(io_err(p))?;
                }
                sum += parts.total;
                steps += 1;
                self.log.push(rec);
            }
            self.epoch += 1;
            let train_f1 = if cfg.train.eval_train {
                Some(evaluate_model(&self.model, data)?.0.macro_avg.f1)
            } else {
                None
            };
            self.history.push(EpochRecord {
                epoch: self.epoch,
                steps,
                mean_total: sum / steps.max(1) as f64,
                train_f1,
            });
            if let Some(dir) = out_dir {
                let p = dir.join(format!("e{}.ckpt", self.epoch));
                self.checkpoint().save(&p)?;
            }
        }
        Ok(())
    }
}

/// Sliding-window predictions for every take; one entry per window (its newest frame).
pub fn predict_takes(model: &TriTempModel, data: &[TakeFrames]) -> Result<(Vec<FramePrediction>, Vec<FrameTruth>), TrainError> {
    let cfg = &model.config;
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for t in data {
        for w in sliding_windows(t.frames.len(), cfg.temporal.l, cfg.dataset.padded_windows) {
            let window = window_frames(t, &w);
            let current = window.last().expect("non-empty window");
            preds.push(FramePrediction {
                take: t.name.clone(),
                frame_index: current.frame_index,
                triplets: model.predict(&window, cfg.eval.dump_min_score)?,
            });
            truths.push(FrameTruth {
                take: t.name.clone(),
                graph: current.graph.clone(),
            });
        }
    }
    Ok((preds, truths))
}

pub fn evaluate_model(model: &TriTempModel, data: &[TakeFrames]) -> Result<(EvalReport, Vec<FramePrediction>), TrainError> {
    let (preds, truths) = predict_takes(model, data)?;
    let report = evaluate(&preds, &truths, &model.config.eval.matching)?;
    Ok((report, preds))
}

/// Rebuilds a model from a checkpoint. Evaluation and dataset settings come from `cfg`;
/// the returned flag is true when the checkpoint was trained with a different config.
pub fn model_from_checkpoint(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<(TriTempModel, bool), TrainError> {
    let mut arch = ckpt.config.clone();
    arch.eval = cfg.eval.clone();
    arch.dataset = cfg.dataset.clone();
    let emb = load_embeddings(&arch)?;
    let mut model = TriTempModel::new(&arch, emb)?;
    ckpt.restore_params(&mut model.store)?;
    Ok((model, ckpt.config_hash != cfg.hash()))
}

pub fn write_predictions(path: &Path, preds: &[FramePrediction]) -> Result<(), TrainError> {
    let mut s = String::new();
    for p in preds {
        s.push_str(&serde_json::to_string(p).expect("prediction record"));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(io_err(path))
}

pub fn read_predictions(path: &Path) -> Result<Vec<FramePrediction>, TrainError> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TrainError::Dump {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Scores a prediction dump against the frames it names in `data`.
pub fn evaluate_dump(preds: &[FramePrediction], data: &[TakeFrames], cfg: &RunConfig) -> Result<EvalReport, TrainError> {
    let mut truths = Vec::with_capacity(preds.len());
    for (i, p) in preds.iter().enumerate() {
        let graph = data
            .iter()
            .find(|t| t.name == p.take)
            .and_then(|t| t.frames.iter().find(|f| f.frame_index == p.frame_index))
            .map(|f| f.graph.clone())
            .ok_or_else(|| TrainError::Dump {
                line: i + 1,
                message: format!("no ground truth for {}#{}", p.take, p.frame_index),
            })?;
        truths.push(FrameTruth {
            take: p.take.clone(),
            graph,
        });
    }
    Ok(evaluate(preds, &truths, &cfg.eval.matching)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Kernels,
    Components,
    Embeddings,
}

impl std::str::FromStr for AblationAxis {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kernels" => Ok(Self::Kernels),
            "components" => Ok(Self::Components),
            "embeddings" => Ok(Self::Embeddings),
            other => Err(TrainError::UnknownAxis(other.into())),
        }
    }
}

/// View1/view6 kernel combinations of the kernel-size study.
pub const KERNEL_COMBINATIONS: [([usize; 4], [usize; 4]); 6] = [
    ([1, 3, 5, 7], [1, 3, 5, 7]),
    ([1, 3, 5, 7], [3, 5, 7, 9]),
    ([1, 3, 5, 7], [5, 7, 9, 9]),
    ([3, 5, 7, 9], [3, 5, 7, 9]),
    ([5, 7, 9, 9], [3, 5, 7, 9]),
    ([3, 3, 3, 3], [3, 3, 3, 3]),
];

fn set_label(k: &[usize]) -> String {
    let parts: Vec<String> = k.iter().map(|v| v.to_string()).collect();
    format!("{{{}}}", parts.join(","))
}

/// Named configurations of one ablation axis, derived from `base`.
pub fn ablation_variants(base: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig)> {
    match axis {
        AblationAxis::Kernels => KERNEL_COMBINATIONS
            .iter()
            .map(|(a, b)| {
                let mut c = base.clone();
                c.viewtemp.kernels.insert("view1".into(), a.to_vec());
                c.viewtemp.kernels.insert("view6".into(), b.to_vec());
                (format!("{}/{}", set_label(a), set_label(b)), c)
            })
            .collect(),
        AblationAxis::Components => {
            let mut full = base.clone();
            full.viewtemp.enabled = true;
            full.pointtemp.enabled = true;
            if full.text.provider == EmbeddingProvider::None {
                full.text.provider = EmbeddingProvider::Pseudo;
            }
            let mut no_view = full.clone();
            no_view.viewtemp.enabled = false;
            let mut no_point = full.clone();
            no_point.pointtemp.enabled = false;
            let mut no_text = full.clone();
            no_text.text.provider = EmbeddingProvider::None;
            vec![
                ("full".into(), full),
                ("-ViewTemp".into(), no_view),
                ("-PointTemp".into(), no_point),
                ("-text".into(), no_text),
            ]
        }
        AblationAxis::Embeddings => {
            let mut out = Vec::new();
            let mut none = base.clone();
            none.text.provider = EmbeddingProvider::None;
            out.push(("none".into(), none));
            let mut pseudo = base.clone();
            pseudo.text.provider = EmbeddingProvider::Pseudo;
            out.push(("pseudo".into(), pseudo));
            if base.text.path.is_some() {
                let mut file = base.clone();
                file.text.provider = EmbeddingProvider::File;
                out.push(("file".into(), file));
            }
            out
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Trains every variant on `train` and scores it on `eval`.
pub fn ablate(
    base: &RunConfig,
    axis: AblationAxis,
    train: &[TakeFrames],
    eval: &[TakeFrames],
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::new();
    for (i, (name, cfg)) in ablation_variants(base, axis).into_iter().enumerate() {
        let mut t = Trainer::new(&cfg, load_embeddings(&cfg)?)?;
        let dir = out_dir.map(|d| d.join(format!("variant{i}")));
        t.run(train, dir.as_deref())?;
        let (report, _) = evaluate_model(&t.model, eval)?;
        rows.push(AblationRow {
            variant: name,
            precision: report.macro_avg.precision,
            recall: report.macro_avg.recall,
            f1: report.macro_avg.f1,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,precision,recall,f1\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.4},{:.4},{:.4}", r.variant, r.precision, r.recall, r.f1);
    }
    s
}
