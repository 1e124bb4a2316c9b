use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tritemp_core::synth::{write_corpus, ClipSpec, CorpusSpec};

#[derive(Parser)]
#[command(name = "synth-or", version, about = "Generate synthetic operating-room corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a corpus (images, point clouds, graphs, splits.json) under `--out`.
    Generate {
        /// Corpus spec JSON (`{"takes": [{"name", "spec"}], "splits": {...}}`).
        #[arg(long, conflicts_with = "takes")]
        spec: Option<PathBuf>,
        /// Without `--spec`: number of default takes to generate (last one is `val`).
        #[arg(long)]
        takes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let Command::Generate { spec, takes, seed, out } = Cli::parse().command;
    let corpus = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<CorpusSpec>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => CorpusSpec::uniform(
            &ClipSpec {
                seed,
                ..ClipSpec::default()
            },
            takes.unwrap_or(3),
        ),
    };
    for t in &corpus.takes {
        t.spec.validate().with_context(|| format!("take {}", t.name))?;
    }
    write_corpus(&out, &corpus)?;
    let frames: usize = corpus.takes.iter().map(|t| t.spec.num_frames).sum();
    eprintln!("wrote {} takes / {frames} frames to {}", corpus.takes.len(), out.display());
    Ok(())
}
