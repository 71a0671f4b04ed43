//! Run directories: every artifact of one command lives under
//! `output_dir/<name>-YYYYmmdd-HHMMSS`, next to a copy of the resolved config.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::Local;
use ibt_core::{IbtError, Result};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.cfg";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Creates a fresh run directory, or uses `explicit` when given. A numeric
/// suffix avoids clobbering a directory created within the same second.
pub fn create(cfg: &RunConfig, default_name: &str, explicit: Option<&Path>) -> Result<PathBuf> {
    let dir = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let name = cfg.name.as_deref().unwrap_or(default_name);
            let stem = format!("{name}-{}", Local::now().format("%Y%m%d-%H%M%S"));
            let mut dir = cfg.output_dir.join(&stem);
            let mut n = 1;
            while dir.exists() {
                dir = cfg.output_dir.join(format!("{stem}-{n}"));
                n += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir).map_err(|e| IbtError::io(&dir, e))?;
    write(&dir.join(CONFIG_FILE), &cfg.to_text())?;
    Ok(dir)
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| IbtError::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| IbtError::Contract(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    write(path, &text)
}

/// The run config saved next to a checkpoint, if the checkpoint sits in
/// `<run>/checkpoints/`.
pub fn config_for_checkpoint(checkpoint: &Path) -> Option<PathBuf> {
    let parent = checkpoint.parent()?;
    let run = if parent.file_name()? == CHECKPOINT_DIR { parent.parent()? } else { parent };
    let cfg = run.join(CONFIG_FILE);
    cfg.is_file().then_some(cfg)
}
