//! Training orchestration, evaluation, metrics, checkpoints and run
//! configuration.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod train;

pub use checkpoint::{Checkpoint, DType};
pub use config::{Preset, TrackerConfig, TrainConfig};
pub use eval::{evaluate, ClipEval};
pub use metrics::{Report, Tally};
pub use train::{finetune, pretrain, FreezeAudit, TrainLog};

use std::path::Path;

use crate::autodiff::{ParamDecl, ParamStore};
use crate::error::{Error, Result};
use crate::model::{FoundationTracker, PromptTracker, Tracker};

/// Byte size a checkpoint of `decls` would encode to at `dtype`.
pub fn checkpoint_size<'a>(decls: impl IntoIterator<Item = &'a ParamDecl>, dtype: DType, extra: usize) -> usize {
    let entries: usize =
        decls.into_iter().map(|d| 4 + d.name.len() + 1 + 4 + 4 * d.shape.len() + d.numel() * dtype.width()).sum();
    12 + entries + extra + 4
}

/// Encoded size of the foundation-hash entry of a delta checkpoint.
pub fn hash_entry_size() -> usize {
    4 + checkpoint::FOUNDATION_HASH_KEY.len() + 1 + 4 + 4 + 32 * DType::F32.width()
}

/// Writes every foundation parameter. Returns the file's SHA-256.
pub fn save_foundation(store: &ParamStore, path: &Path, dtype: DType) -> Result<[u8; 32]> {
    let bytes = Checkpoint::from_store(store, dtype, |_, _| true).save(path)?;
    Ok(checkpoint::sha256(&bytes))
}

/// Rebuilds a foundation tracker from a checkpoint. Every parameter must be
/// present. Returns the file's SHA-256 too.
pub fn load_foundation(cfg: &TrackerConfig, path: &Path) -> Result<(FoundationTracker, ParamStore, [u8; 32])> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let model = FoundationTracker::new(&cfg.foundation)?;
    let mut store = ParamStore::materialize(model.registry(), cfg.seed);
    let n = ckpt.apply_to(&mut store)?;
    if n != store.len() {
        return Err(Error::Checkpoint(format!(
            "{}: holds {n} of the model's {} parameters",
            path.display(),
            store.len()
        )));
    }
    Ok((model, store, checkpoint::sha256(&bytes)))
}

/// Delta checkpoint: trainable parameters plus the foundation hash.
pub fn delta_checkpoint(store: &ParamStore, foundation_hash: &[u8; 32], dtype: DType) -> Checkpoint {
    let mut c = Checkpoint::from_store(store, dtype, |_, frozen| !frozen);
    c.set_foundation_hash(foundation_hash);
    c
}

/// Rebuilds a prompt tracker from a delta checkpoint and its foundation.
pub fn load_prompt(cfg: &TrackerConfig, delta: &Path, foundation: &Path) -> Result<(PromptTracker, ParamStore)> {
    let modality = cfg
        .task
        .modality()
        .ok_or_else(|| Error::Config(format!("task: a delta checkpoint needs an RGB+X task, got {}", cfg.task)))?;
    let ckpt = Checkpoint::load(delta)?;
    let expected = ckpt
        .foundation_hash()
        .ok_or_else(|| Error::Checkpoint(format!("{}: not a delta checkpoint", delta.display())))?;
    let (_, fstore, digest) = load_foundation(cfg, foundation)?;
    let found = hex::encode(digest);
    if found != expected {
        return Err(Error::FoundationMismatch { expected, found });
    }
    let model = PromptTracker::new(&cfg.foundation, &cfg.prompt, modality)?;
    let mut store = train::prompt_store(&model, &fstore, cfg.seed)?;
    let n = ckpt.apply_to(&mut store)?;
    let trainable = store.iter().filter(|(_, p)| !p.frozen).count();
    if n != trainable {
        return Err(Error::Checkpoint(format!(
            "{}: holds {n} of the model's {trainable} trainable parameters",
            delta.display()
        )));
    }
    Ok((model, store))
}
