use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tritemp_core::checkpoint::Checkpoint;
use tritemp_core::config::RunConfig;
use tritemp_core::graph::TaxonomyFile;
use tritemp_core::metrics::EvalReport;
use tritemp_core::report::write_report;
use tritemp_core::train::{
    ablate, ablation_csv, evaluate_dump, evaluate_model, load_embeddings, load_split, model_from_checkpoint,
    read_predictions, write_predictions, AblationAxis, Trainer,
};
use tritemp_core::unify::EmbeddingTable;
use tritemp_cli::{ensure_parent, out_dir, resolve_config, resolve_unchecked};

#[derive(Parser)]
#[command(name = "tritemp", version, about = "Train, evaluate and ablate tri-modal scene-graph models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; missing keys take the `full` defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in profile instead of a file: full, desk or overfit.
    #[arg(long)]
    profile: Option<String>,
    /// Dotted override, e.g. `--set optimizer.lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        resolve_config(self.config.as_deref(), self.profile.as_deref(), &self.sets)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on `dataset.train_split`, writing log.jsonl and one checkpoint per epoch.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overrides `train.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a split, or a prediction dump against a dataset root.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, conflicts_with_all = ["pred", "gt"])]
        ckpt: Option<PathBuf>,
        /// Split to evaluate with `--ckpt` (default: `dataset.eval_split`).
        #[arg(long)]
        split: Option<String>,
        /// Where to write the prediction dump when evaluating a checkpoint.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// JSONL prediction dump.
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        /// Dataset root holding the ground-truth graphs.
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        /// Report path; a .csv and .png are written next to it.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and score every variant along one ablation axis.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the fully resolved configuration as JSON.
    ShowConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a deterministic pseudo-embedding file covering a taxonomy.
    EmbedPseudo {
        /// Taxonomy JSON; the built-in twelve-entity taxonomy when omitted.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Share of each triplet vector drawn from its predicate vector, in [0, 1].
        #[arg(long, default_value_t = 0.0)]
        correlation: f64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { cfg, out, resume } => train(cfg.resolve()?, out, resume.as_deref()),
        Command::Eval {
            cfg,
            ckpt,
            split,
            dump,
            pred,
            gt,
            report,
        } => {
            match (ckpt, pred, gt) {
                (Some(ckpt), None, None) => eval_checkpoint(cfg.resolve()?, &ckpt, split, dump, report),
                (None, Some(pred), Some(gt)) => {
                    let config = resolve_unchecked(cfg.config.as_deref(), cfg.profile.as_deref(), &cfg.sets)?;
                    config.eval.matching.validate()?;
                    eval_dump(config, &pred, &gt, report)
                }
                _ => bail!("eval needs either --ckpt or both --pred and --gt"),
            }
        }
        Command::Ablate { cfg, axis, out } => {
            let config = cfg.resolve()?;
            let axis: AblationAxis = axis.parse()?;
            let dir = out.unwrap_or_else(|| config.train.out_dir.join("ablation"));
            run_ablation(config, axis, &dir)
        }
        Command::ShowConfig { cfg } => {
            let config = resolve_unchecked(cfg.config.as_deref(), cfg.profile.as_deref(), &cfg.sets)?;
            println!("{}", serde_json::to_string_pretty(&config)?);
            Ok(())
        }
        Command::EmbedPseudo {
            taxonomy,
            out,
            seed,
            dim,
            correlation,
        } => {
            let tax = match taxonomy {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    let file: TaxonomyFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
                    file.into_taxonomy()?
                }
                None => Default::default(),
            };
            if !(0.0..=1.0).contains(&correlation) {
                bail!("--correlation must lie in [0, 1]");
            }
            ensure_parent(&out)?;
            let table = EmbeddingTable::pseudo(&tax, seed, dim, correlation);
            table.save(&out)?;
            eprintln!("wrote {} embeddings ({dim}-d) to {}", table.len(), out.display());
            Ok(())
        }
    }
}

fn train(cfg: RunConfig, out: Option<PathBuf>, resume: Option<&Path>) -> Result<()> {
    let dir = out_dir(out, &cfg);
    let data = load_split(&cfg.dataset.root, &cfg.dataset.train_split)
        .with_context(|| format!("loading split {} from {}", cfg.dataset.train_split, cfg.dataset.root.display()))?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.config_hash != cfg.hash() {
                eprintln!("warning: {} was written with a different config; resuming with its own", p.display());
            }
            Trainer::from_checkpoint(&ckpt, load_embeddings(&ckpt.config)?)?
        }
        None => Trainer::new(&cfg, load_embeddings(&cfg)?)?,
    };
    let frames: usize = data.iter().map(|t| t.frames.len()).sum();
    eprintln!("training on {} takes / {frames} frames -> {}", data.len(), dir.display());
    trainer.run(&data, Some(&dir)).context("training aborted")?;
    for e in &trainer.history {
        match e.train_f1 {
            Some(f1) => eprintln!("epoch {:>3}  steps {:>5}  loss {:.5}  train F1 {:.4}", e.epoch, e.steps, e.mean_total, f1),
            None => eprintln!("epoch {:>3}  steps {:>5}  loss {:.5}", e.epoch, e.steps, e.mean_total),
        }
    }
    Ok(())
}

fn eval_checkpoint(cfg: RunConfig, ckpt_path: &Path, split: Option<String>, dump: Option<PathBuf>, report: Option<PathBuf>) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (model, mismatch) = model_from_checkpoint(&ckpt, &cfg)?;
    if mismatch {
        eprintln!(
            "warning: config hash {} differs from the checkpoint's {}; using the checkpoint architecture",
            &cfg.hash()[..12],
            &ckpt.config_hash[..12]
        );
    }
    let split = split.unwrap_or_else(|| cfg.dataset.eval_split.clone());
    let data = load_split(&cfg.dataset.root, &split)
        .with_context(|| format!("loading split {split} from {}", cfg.dataset.root.display()))?;
    let (rep, preds) = evaluate_model(&model, &data)?;
    let base = ckpt_path.parent().unwrap_or(Path::new("."));
    let dump = dump.unwrap_or_else(|| base.join("preds.jsonl"));
    ensure_parent(&dump)?;
    write_predictions(&dump, &preds)?;
    finish_report(&rep, report.unwrap_or_else(|| base.join("report.json")))
}

fn eval_dump(cfg: RunConfig, pred: &Path, gt: &Path, report: Option<PathBuf>) -> Result<()> {
    let preds = read_predictions(pred)?;
    let mut takes: Vec<String> = preds.iter().map(|p| p.take.clone()).collect();
    takes.sort();
    takes.dedup();
    let ds = tritemp_core::synth::Dataset::open(gt)?;
    let mut data = Vec::new();
    for split in ds.splits.keys() {
        for t in load_split(gt, split)? {
            if takes.contains(&t.name) && !data.iter().any(|d: &tritemp_core::train::TakeFrames| d.name == t.name) {
                data.push(t);
            }
        }
    }
    let rep = evaluate_dump(&preds, &data, &cfg)?;
    finish_report(&rep, report.unwrap_or_else(|| pred.with_extension("report.json")))
}

fn finish_report(rep: &EvalReport, path: PathBuf) -> Result<()> {
    write_report(&path, rep).with_context(|| format!("writing {}", path.display()))?;
    println!("{:<22} {:>9} {:>9} {:>9}", "predicate", "precision", "recall", "f1");
    for c in &rep.per_predicate {
        println!("{:<22} {:>9.4} {:>9.4} {:>9.4}", c.predicate, c.precision, c.recall, c.f1);
    }
    let m = &rep.macro_avg;
    println!("{:<22} {:>9.4} {:>9.4} {:>9.4}", "Avg", m.precision, m.recall, m.f1);
    eprintln!("report written to {}", path.display());
    Ok(())
}

fn run_ablation(cfg: RunConfig, axis: AblationAxis, dir: &Path) -> Result<()> {
    let train = load_split(&cfg.dataset.root, &cfg.dataset.train_split)?;
    let eval = load_split(&cfg.dataset.root, &cfg.dataset.eval_split)?;
    let rows = ablate(&cfg, axis, &train, &eval, Some(dir))?;
    let csv = ablation_csv(&rows);
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("ablation.csv"), &csv)?;
    std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    print!("{csv}");
    Ok(())
}
