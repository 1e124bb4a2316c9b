//! Shared plumbing for the `tritemp` and `synth-or` binaries.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tritemp_core::config::RunConfig;

/// Loads `--config` (or a named `--profile`) and applies `--set` overrides.
pub fn resolve_config(config: Option<&Path>, profile: Option<&str>, sets: &[String]) -> Result<RunConfig> {
    let cfg = resolve_unchecked(config, profile, sets)?;
    cfg.validate()?;
    Ok(cfg)
}

/// As [`resolve_config`] without model validation, for commands that only read evaluation settings.
pub fn resolve_unchecked(config: Option<&Path>, profile: Option<&str>, sets: &[String]) -> Result<RunConfig> {
    let base = match (config, profile) {
        (Some(_), Some(_)) => bail!("--config and --profile are mutually exclusive"),
        (Some(p), None) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        (None, Some(name)) => RunConfig::profile(name)?,
        (None, None) => RunConfig::default(),
    };
    Ok(base.with_overrides(sets)?)
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// Output directory: `--out` if given, else `train.out_dir`.
pub fn out_dir(cli: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    cli.unwrap_or_else(|| cfg.train.out_dir.clone())
}
