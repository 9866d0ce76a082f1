//! Dataset evaluation. Clips are tracked in parallel with a shared
//! read-only model; per-clip tallies are merged in clip order.

use rayon::prelude::*;

use super::metrics::{tally_boxes, Report, Tally};
use crate::autodiff::ParamStore;
use crate::data::Clip;
use crate::error::{Error, Result};
use crate::inference::{track_clip, track_clip_mask, TrackConfig, TrackResult};
use crate::model::Tracker;

#[derive(Clone, Debug)]
pub struct ClipEval {
    pub id: String,
    pub result: TrackResult,
    pub tally: Tally,
}

/// Tallies a tracking result against the clip annotations. The
/// initialization frame is excluded.
pub fn score_clip(clip: &Clip, result: &TrackResult) -> Result<Tally> {
    if result.len() != clip.len() {
        return Err(Error::InvalidInput(format!(
            "clip {}: {} predicted frames for {} annotated",
            clip.id,
            result.len(),
            clip.len()
        )));
    }
    let mut tally = tally_boxes(&result.boxes, &clip.boxes, 1..clip.len())?;
    if let Some(masks) = &result.masks {
        for t in 1..clip.len() {
            tally.add_mask(&masks[t], &clip.masks[t])?;
        }
    }
    Ok(tally)
}

pub fn track(model: &dyn Tracker, store: &ParamStore, clip: &Clip, cfg: &TrackConfig) -> Result<TrackResult> {
    if model.task().is_mask() {
        track_clip_mask(model, store, clip)
    } else {
        track_clip(model, store, clip, cfg)
    }
}

pub fn evaluate(
    model: &dyn Tracker,
    store: &ParamStore,
    clips: &[Clip],
    cfg: &TrackConfig,
) -> Result<(Report, Vec<ClipEval>)> {
    let per_clip = clips
        .par_iter()
        .map(|clip| {
            let result = track(model, store, clip, cfg)?;
            let tally = score_clip(clip, &result)?;
            Ok(ClipEval { id: clip.id.clone(), result, tally })
        })
        .collect::<Result<Vec<_>>>()?;
    let total = per_clip.iter().fold(Tally::default(), |acc, c| acc.merge(&c.tally));
    Ok((total.report(), per_clip))
}
