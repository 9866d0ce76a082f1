//! Frame-by-frame tracking.
//!
//! Box tasks crop a template around the first-frame box once, then crop
//! each search region around the previous prediction and decode the box
//! head under a Hanning penalty. Mask-prompted tracking runs without crops
//! on whole frames, using the first frame with its annotation and the
//! previous frame with its predicted mask as the two templates.

mod crop;

pub use crop::{crop_region, CropWindow};

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::bbox::BBox;
use crate::data::{mask_box, tokenize, Clip, Vocabulary};
use crate::error::{Error, Result};
use crate::heads::{decode_box, BoxMaps};
use crate::model::{Tracker, TrackerInputs};
use crate::peft::PromptInput;
use crate::task::{Modality, Task};

/// `w[i] = 0.5·(1 − cos(2πi/(n−1)))`.
pub fn hanning_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("hanning window needs n >= 2, got {n}")));
    }
    let d = (n - 1) as f64;
    Ok((0..n).map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / d).cos())).collect())
}

/// Outer product of two length-`n` Hanning windows, shaped `(n, n)`.
pub fn hanning_2d(n: usize) -> Result<Tensor> {
    let w = hanning_window(n)?;
    let data = w.iter().flat_map(|a| w.iter().map(move |b| a * b)).collect();
    Ok(Tensor::new(vec![n, n], data)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackConfig {
    /// Template window side in units of `√(w·h)` of the first box.
    pub template_factor: f64,
    /// Search window side in units of `√(w·h)` of the previous box.
    pub search_factor: f64,
    pub hanning: bool,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self { template_factor: 2.0, search_factor: 4.0, hanning: true }
    }
}

/// Per-frame output of a tracking run. Frame 0 holds the initialization.
#[derive(Clone, Debug)]
pub struct TrackResult {
    /// Boxes in frame pixels.
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    /// `(1, S, S)` binary masks at frame resolution (mask tracking only).
    pub masks: Option<Vec<Tensor>>,
    /// Frames whose previous-frame mask prompt was empty.
    pub empty_prompt_frames: Vec<usize>,
    pub elapsed: Duration,
}

impl TrackResult {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Bit-exact equality of boxes, scores and masks; timing is ignored.
    pub fn same_trajectory(&self, other: &TrackResult) -> bool {
        let bits = |b: &BBox| [b.cx, b.cy, b.w, b.h].map(f64::to_bits);
        self.boxes.iter().map(bits).eq(other.boxes.iter().map(bits))
            && self.scores.iter().map(|s| s.to_bits()).eq(other.scores.iter().map(|s| s.to_bits()))
            && match (&self.masks, &other.masks) {
                (Some(a), Some(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y)),
                (None, None) => true,
                _ => false,
            }
    }
}

/// Per-frame `(1, S, S)` maps of a map modality.
pub fn modality_maps(clip: &Clip, m: Modality) -> Option<&[Tensor]> {
    match m {
        Modality::Depth => Some(&clip.depth),
        Modality::Thermal => Some(&clip.thermal),
        Modality::Event => Some(&clip.event),
        Modality::Language | Modality::Mask => None,
    }
}

/// Token ids of the clip description under the model's vocabulary.
pub fn text_tokens(model: &dyn Tracker, clip: &Clip) -> Vec<usize> {
    let size = model.prompt_config().map(|c| c.vocab_size).unwrap_or(64);
    tokenize(&clip.text, &Vocabulary::with_size(size))
}

fn check_clip(clip: &Clip, task: Task) -> Result<()> {
    if clip.is_empty() {
        return Err(Error::InvalidInput(format!("clip {} has no frames", clip.id)));
    }
    let n = clip.len();
    let lens = [clip.boxes.len(), clip.masks.len(), clip.depth.len(), clip.thermal.len(), clip.event.len()];
    if let Some(m) = task.modality() {
        let have = match m {
            Modality::Language => n,
            Modality::Mask => lens[1],
            Modality::Depth => lens[2],
            Modality::Thermal => lens[3],
            Modality::Event => lens[4],
        };
        if have < n {
            return Err(Error::InvalidInput(format!("clip {}: {m:?} payload covers {have} of {n} frames", clip.id)));
        }
    }
    if !task.is_mask() && clip.boxes.is_empty() {
        return Err(Error::InvalidInput(format!("clip {} has no first-frame box", clip.id)));
    }
    Ok(())
}

/// Crop-based tracking for RGB and RGB+N/D/T/E. The template is cropped
/// once from frame 0 around the annotated box and never updated.
pub fn track_clip(model: &dyn Tracker, store: &ParamStore, clip: &Clip, cfg: &TrackConfig) -> Result<TrackResult> {
    let task = model.task();
    if task.is_mask() {
        return Err(Error::InvalidInput("mask-prompted models track with track_clip_mask".into()));
    }
    check_clip(clip, task)?;
    let start = Instant::now();
    let b = &model.foundation().config.backbone;
    let size = clip.size as f64;
    let init = clip.boxes[0];
    let (template, zwin) = crop_region(&clip.frames[0], init, cfg.template_factor, b.template_size)?;
    let maps = task.modality().and_then(|m| modality_maps(clip, m));
    let template_map = maps.map(|m| zwin.sample(&m[0])).transpose()?;
    let text = (task == Task::RgbX(Modality::Language)).then(|| text_tokens(model, clip));
    let penalty = if cfg.hanning { Some(hanning_2d(b.grid(b.search_size))?) } else { None };

    let mut boxes = vec![init];
    let mut scores = vec![1.0];
    let mut prev = init;
    for t in 1..clip.len() {
        let swin = CropWindow::around(prev, cfg.search_factor, b.search_size)?;
        let search = swin.sample(&clip.frames[t])?;
        let prompt = match (&text, maps, &template_map) {
            (Some(ids), _, _) => Some(PromptInput::Text(ids.clone())),
            (None, Some(m), Some(zm)) => {
                Some(PromptInput::Maps { templates: vec![zm.clone()], search: swin.sample(&m[t])? })
            }
            _ => None,
        };
        let mut tape = Tape::new();
        let inputs =
            TrackerInputs { templates: std::slice::from_ref(&template), search: &search, prompt: prompt.as_ref() };
        let out = model.forward(&mut tape, store, &inputs, false)?;
        let (nb, score) = decode_box(&BoxMaps::from_tape(&tape, &out.maps), penalty.as_ref());
        let fb = swin.box_to_frame(nb).clamp_to_frame(size, size, 1.0);
        if fb.is_degenerate() {
            return Err(Error::InvalidInput(format!("clip {} frame {t}: degenerate box {fb:?}", clip.id)));
        }
        boxes.push(fb);
        scores.push(score);
        prev = fb;
    }
    Ok(TrackResult { boxes, scores, masks: None, empty_prompt_frames: Vec::new(), elapsed: start.elapsed() })
}

fn binarize(t: &Tensor) -> Tensor {
    t.map(|v| if v > 0.5 { 1.0 } else { 0.0 })
}

fn sigmoid(t: &Tensor) -> Tensor {
    t.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// One object tracked through `frames` from its first-frame mask.
/// Returns the result and per-frame foreground probabilities at frame
/// resolution (frame 0 holds the annotation).
pub fn track_object_mask(
    model: &dyn Tracker,
    store: &ParamStore,
    frames: &[Tensor],
    first_mask: &Tensor,
) -> Result<(TrackResult, Vec<Tensor>)> {
    let start = Instant::now();
    let Some(&[_, size, w]) = frames.first().map(Tensor::shape) else {
        return Err(Error::InvalidInput("mask tracking needs at least one (3, S, S) frame".into()));
    };
    if size != w {
        return Err(Error::Shape(format!("mask tracking expects square frames, got {size}x{w}")));
    }
    let init_box = mask_box(first_mask).ok_or_else(|| Error::InvalidInput("empty first-frame mask".into()))?;
    let b = &model.foundation().config.backbone;
    let win = CropWindow::full(size, b.search_size);
    let first = win.sample(&frames[0])?;
    let first_prompt = binarize(&win.sample(first_mask)?);
    let use_prompt = model.task().is_mask();

    let mut boxes = vec![init_box];
    let mut scores = vec![1.0];
    let mut masks = vec![binarize(first_mask)];
    let mut probs = vec![first_mask.clone()];
    let mut flagged = Vec::new();
    let mut prev_frame = first.clone();
    let mut prev_mask = first_prompt.clone();
    let mut prev_box = init_box;
    for (t, frame) in frames.iter().enumerate().skip(1) {
        let search = win.sample(frame)?;
        if prev_mask.data().iter().all(|&v| v == 0.0) {
            flagged.push(t);
        }
        let prompt = use_prompt.then(|| PromptInput::Masks(vec![first_prompt.clone(), prev_mask.clone()]));
        let templates = [first.clone(), prev_frame];
        let mut tape = Tape::new();
        let inputs = TrackerInputs { templates: &templates, search: &search, prompt: prompt.as_ref() };
        let out = model.forward(&mut tape, store, &inputs, true)?;
        let logits = out.mask_logits.expect("mask requested");
        let p = sigmoid(tape.value(logits));
        let (_, score) = decode_box(&BoxMaps::from_tape(&tape, &out.maps), None);
        let full = win.paste(&p, size, 0.0)?;
        let mask = binarize(&full);
        prev_box = mask_box(&mask).unwrap_or(prev_box);
        boxes.push(prev_box);
        scores.push(score);
        masks.push(mask);
        probs.push(full);
        prev_mask = binarize(&p).reshape(vec![1, b.search_size, b.search_size])?;
        prev_frame = search;
    }
    let result =
        TrackResult { boxes, scores, masks: Some(masks), empty_prompt_frames: flagged, elapsed: start.elapsed() };
    Ok((result, probs))
}

/// No-crop mask tracking of the clip target from its first-frame mask.
pub fn track_clip_mask(model: &dyn Tracker, store: &ParamStore, clip: &Clip) -> Result<TrackResult> {
    check_clip(clip, Task::RgbX(Modality::Mask))?;
    let first = clip.masks.first().ok_or_else(|| Error::InvalidInput(format!("clip {} has no mask", clip.id)))?;
    Ok(track_object_mask(model, store, &clip.frames, first)?.0)
}

/// Per-pixel label map from per-object foreground probabilities: 0 is
/// background, `k + 1` the most probable object `k` among those above 0.5.
/// Ties go to the lower object index.
pub fn merge_object_masks(probs: &[Tensor]) -> Result<Vec<usize>> {
    let Some(first) = probs.first() else {
        return Ok(Vec::new());
    };
    let n = first.numel();
    if probs.iter().any(|p| p.numel() != n) {
        return Err(Error::Shape("object probability maps differ in size".into()));
    }
    let mut labels = vec![0; n];
    for (i, label) in labels.iter_mut().enumerate() {
        let mut best = 0.5;
        for (k, p) in probs.iter().enumerate() {
            let v = p.data()[i];
            if v > best {
                best = v;
                *label = k + 1;
            }
        }
    }
    Ok(labels)
}

/// Independent per-object passes merged into one label map per frame.
pub fn track_objects_mask(
    model: &dyn Tracker,
    store: &ParamStore,
    frames: &[Tensor],
    first_masks: &[Tensor],
) -> Result<Vec<Vec<usize>>> {
    let per_object = first_masks
        .iter()
        .map(|m| track_object_mask(model, store, frames, m).map(|(_, p)| p))
        .collect::<Result<Vec<_>>>()?;
    (0..frames.len())
        .map(|t| {
            let maps: Vec<Tensor> = per_object.iter().map(|p| p[t].clone()).collect();
            merge_object_masks(&maps)
        })
        .collect()
}
