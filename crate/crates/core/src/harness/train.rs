//! Two-stage training.
//!
//! Stage 1 trains every foundation parameter on RGB template/search pairs
//! with the box-projection mask term. Stage 2 freezes the foundation and
//! trains adapters, prompters and the prompt embedding on one RGB+X task;
//! mask-prompted training switches to whole-frame inputs and supervised
//! mask loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::TrackerConfig;
use crate::autodiff::{AdamW, AdamWConfig, ParamStore, Parameter, Tape, Tensor, Var};
use crate::bbox::BBox;
use crate::data::{mask_box, Clip};
use crate::error::{Error, Result};
use crate::inference::{modality_maps, text_tokens, CropWindow};
use crate::losses::{stage_loss, LossBreakdown, MaskTerm};
use crate::model::{FoundationTracker, PromptTracker, Tracker, TrackerInputs};
use crate::peft::PromptInput;
use crate::task::{Modality, Task};

/// One training example in model input space.
#[derive(Clone, Debug)]
pub struct Sample {
    pub templates: Vec<Tensor>,
    pub search: Tensor,
    pub prompt: Option<PromptInput>,
    /// Ground truth in normalized search coordinates.
    pub gt: BBox,
    /// `(S, S)` binary target mask for supervised mask training.
    pub gt_mask: Option<Tensor>,
}

fn binarize(t: &Tensor) -> Tensor {
    t.map(|v| if v > 0.5 { 1.0 } else { 0.0 })
}

/// Template crop of frame `ti` and a search crop of frame `si` whose
/// window is jittered in center and scale per the training config.
pub fn crop_sample(
    model: &dyn Tracker,
    clip: &Clip,
    ti: usize,
    si: usize,
    cfg: &TrackerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let b = &model.foundation().config.backbone;
    let task = model.task();
    let zwin = CropWindow::around(clip.boxes[ti], cfg.track.template_factor, b.template_size)?;
    let target = clip.boxes[si];
    let side = (target.w * target.h).sqrt();
    let (cj, sj) = (cfg.train.center_jitter, cfg.train.scale_jitter);
    let mut u = |a: f64| if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
    let (dx, dy, ds) = (u(cj) * side, u(cj) * side, u(sj).exp());
    let anchor = BBox::new(target.cx + dx, target.cy + dy, target.w * ds, target.h * ds);
    let swin = CropWindow::around(anchor, cfg.track.search_factor, b.search_size)?;
    let prompt = match task.modality() {
        None => None,
        Some(Modality::Language) => Some(PromptInput::Text(text_tokens(model, clip))),
        Some(Modality::Mask) => {
            return Err(Error::InvalidInput("mask-prompted training uses whole-frame samples".into()))
        }
        Some(m) => {
            let maps = modality_maps(clip, m).expect("map modality");
            Some(PromptInput::Maps { templates: vec![zwin.sample(&maps[ti])?], search: swin.sample(&maps[si])? })
        }
    };
    Ok(Sample {
        templates: vec![zwin.sample(&clip.frames[ti])?],
        search: swin.sample(&clip.frames[si])?,
        prompt,
        gt: swin.box_to_crop(target),
        gt_mask: None,
    })
}

/// Whole-frame sample for frame `si ≥ 1`: templates are frame 0 and frame
/// `si − 1` with their annotated masks as prompts.
pub fn mask_sample(model: &dyn Tracker, clip: &Clip, si: usize) -> Result<Sample> {
    if si == 0 || si >= clip.len() {
        return Err(Error::InvalidInput(format!("mask sample frame {si} outside 1..{}", clip.len())));
    }
    let s = model.foundation().config.backbone.search_size;
    let win = CropWindow::full(clip.size, s);
    let m0 = binarize(&win.sample(&clip.masks[0])?);
    let mp = binarize(&win.sample(&clip.masks[si - 1])?);
    let gt_mask = binarize(&win.sample(&clip.masks[si])?).reshape(vec![s, s])?;
    let gt = mask_box(&clip.masks[si])
        .ok_or_else(|| Error::InvalidInput(format!("clip {}: empty mask at {si}", clip.id)))?;
    Ok(Sample {
        templates: vec![win.sample(&clip.frames[0])?, win.sample(&clip.frames[si - 1])?],
        search: win.sample(&clip.frames[si])?,
        prompt: model.task().is_mask().then_some(PromptInput::Masks(vec![m0, mp])),
        gt: win.box_to_crop(gt),
        gt_mask: Some(gt_mask),
    })
}

/// Draws one random sample for the model's task.
pub fn draw_sample(model: &dyn Tracker, clips: &[Clip], cfg: &TrackerConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let clip = &clips[rng.gen_range(0..clips.len())];
    let n = clip.len();
    if model.task().is_mask() {
        if n < 2 {
            return Err(Error::InvalidInput(format!("clip {} is too short for mask training", clip.id)));
        }
        return mask_sample(model, clip, rng.gen_range(1..n));
    }
    let si = rng.gen_range(0..n);
    let gap = cfg.train.max_gap;
    let ti = rng.gen_range(si.saturating_sub(gap)..=(si + gap).min(n - 1));
    crop_sample(model, clip, ti, si, cfg, rng)
}

/// Builds the training loss of one sample on `tape`.
pub fn sample_objective(
    tape: &mut Tape,
    model: &dyn Tracker,
    store: &ParamStore,
    sample: &Sample,
    cfg: &TrackerConfig,
) -> Result<(Var, LossBreakdown)> {
    let inputs = TrackerInputs { templates: &sample.templates, search: &sample.search, prompt: sample.prompt.as_ref() };
    let out = model.forward(tape, store, &inputs, true)?;
    let term = match &sample.gt_mask {
        Some(m) => MaskTerm::GroundTruth(m),
        None => MaskTerm::BoxProjection,
    };
    stage_loss(tape, &out.maps, out.mask_logits, sample.gt, term, &cfg.weights)
}

/// Loss and gradients of one sample on a fresh tape, scaled by `weight`.
pub fn sample_loss(
    model: &dyn Tracker,
    store: &ParamStore,
    sample: &Sample,
    cfg: &TrackerConfig,
    weight: f64,
) -> Result<(Tape, LossBreakdown)> {
    let mut tape = Tape::new();
    let (loss, breakdown) = sample_objective(&mut tape, model, store, sample, cfg)?;
    let scaled = tape.scale(loss, weight);
    tape.backward(scaled)?;
    Ok((tape, breakdown))
}

/// Per-step mean loss components.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub steps: Vec<LossBreakdown>,
}

impl TrainLog {
    fn window_mean(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.steps[range];
        s.iter().map(|b| b.total).sum::<f64>() / s.len().max(1) as f64
    }

    /// Mean total loss over the first `k` steps.
    pub fn head_loss(&self, k: usize) -> f64 {
        self.window_mean(0..k.min(self.steps.len()))
    }

    /// Mean total loss over the last `k` steps.
    pub fn tail_loss(&self, k: usize) -> f64 {
        let n = self.steps.len();
        self.window_mean(n.saturating_sub(k)..n)
    }
}

/// Runs `steps` AdamW steps on batches drawn from `clips`. Gradients of a
/// batch are computed in parallel and summed in sample order, so runs are
/// deterministic for a fixed seed.
pub fn train_steps(
    model: &dyn Tracker,
    store: &mut ParamStore,
    clips: &[Clip],
    cfg: &TrackerConfig,
    steps: usize,
    lr_of: impl Fn(&Parameter) -> f64,
    stage: &str,
) -> Result<TrainLog> {
    if clips.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let t = &cfg.train;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: t.weight_decay, ..AdamWConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let decay_step = (t.decay_at * steps as f64).floor() as usize;
    let weight = 1.0 / t.batch_size as f64;
    let mut log = TrainLog::default();
    for step in 0..steps {
        let batch = (0..t.batch_size).map(|_| draw_sample(model, clips, cfg, &mut rng)).collect::<Result<Vec<_>>>()?;
        let results = {
            let frozen: &ParamStore = store;
            batch.par_iter().map(|s| sample_loss(model, frozen, s, cfg, weight)).collect::<Result<Vec<_>>>()?
        };
        store.zero_grads();
        let mut mean = LossBreakdown::default();
        for (tape, b) in &results {
            store.accumulate_grads(tape);
            mean.cls += b.cls * weight;
            mean.iou += b.iou * weight;
            mean.l1 += b.l1 * weight;
            mean.mask += b.mask * weight;
            mean.total += b.total * weight;
        }
        drop(results);
        if !mean.total.is_finite() {
            return Err(Error::Diverged { step, loss: mean.total });
        }
        let decay = if step >= decay_step { 0.1 } else { 1.0 };
        opt.step_with(store, |p| lr_of(p) * decay)?;
        if t.log_every > 0 && (step % t.log_every == 0 || step + 1 == steps) {
            log::info!(
                "{stage} step {step}: loss {:.5} (cls {:.4}, giou {:.4}, l1 {:.4}, mask {:.4})",
                mean.total,
                mean.cls,
                mean.iou,
                mean.l1,
                mean.mask
            );
        }
        log.steps.push(mean);
    }
    Ok(log)
}

/// Stage 1: a fresh foundation tracker trained on RGB clips.
pub fn pretrain(cfg: &TrackerConfig, clips: &[Clip]) -> Result<(FoundationTracker, ParamStore, TrainLog)> {
    let model = FoundationTracker::new(&cfg.foundation)?;
    let mut store = ParamStore::materialize(model.registry(), cfg.seed);
    let (lb, lh) = (cfg.train.lr_backbone, cfg.train.lr_heads);
    let log = train_steps(
        &model,
        &mut store,
        clips,
        cfg,
        cfg.train.steps,
        |p| if p.group.is_head() { lh } else { lb },
        "pretrain",
    )?;
    Ok((model, store, log))
}

/// Prompt-tracker parameters: fresh prompt parts, foundation values
/// copied by name from `foundation`.
pub fn prompt_store(model: &PromptTracker, foundation: &ParamStore, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::materialize(model.registry(), seed);
    let decls = &model.registry().decls()[..model.foundation_len()];
    for d in decls {
        let src = foundation
            .by_name(&d.name)
            .ok_or_else(|| Error::Checkpoint(format!("foundation has no parameter {:?}", d.name)))?;
        let id = store.id_of(&d.name).expect("declared");
        store.set(id, src.value.clone()).map_err(|e| Error::Checkpoint(format!("{}: {e}", d.name)))?;
    }
    Ok(store)
}

/// Checks that a dataset carries the payload a task needs.
pub fn check_task_payload(clips: &[Clip], task: Task) -> Result<()> {
    for c in clips {
        let missing = match task.modality() {
            Some(Modality::Language) => c.text.trim().is_empty(),
            Some(Modality::Mask) => c.masks.len() != c.len(),
            Some(m) => modality_maps(c, m).is_none_or(|v| v.len() != c.len()),
            None => false,
        };
        if missing || c.boxes.len() != c.len() {
            return Err(Error::InvalidInput(format!("clip {} lacks the payload for task {task}", c.id)));
        }
    }
    Ok(())
}

/// Outcome of the post-finetune comparison of frozen parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreezeAudit {
    pub checked: usize,
    pub changed: usize,
}

/// Counts frozen parameters of `after` that differ bitwise from `before`.
pub fn freeze_audit(before: &ParamStore, after: &ParamStore) -> FreezeAudit {
    let mut audit = FreezeAudit { checked: 0, changed: 0 };
    for ((_, a), (_, b)) in before.iter().zip(after.iter()) {
        if a.frozen {
            audit.checked += 1;
            if !a.value.bit_eq(&b.value) {
                audit.changed += 1;
            }
        }
    }
    audit
}

/// Stage 2 for `cfg.task`. Fails if any frozen parameter moved.
pub fn finetune(
    cfg: &TrackerConfig,
    foundation: &ParamStore,
    clips: &[Clip],
) -> Result<(PromptTracker, ParamStore, TrainLog, FreezeAudit)> {
    let modality = cfg
        .task
        .modality()
        .ok_or_else(|| Error::Config(format!("task: finetuning needs an RGB+X task, got {}", cfg.task)))?;
    check_task_payload(clips, cfg.task)?;
    let model = PromptTracker::new(&cfg.foundation, &cfg.prompt, modality)?;
    let mut store = prompt_store(&model, foundation, cfg.seed)?;
    let before = store.clone();
    let lr = cfg.train.lr_prompt;
    let log = train_steps(&model, &mut store, clips, cfg, cfg.train.finetune_steps, |_| lr, "finetune")?;
    let audit = freeze_audit(&before, &store);
    if audit.changed > 0 {
        return Err(Error::InvalidInput(format!(
            "freeze audit: {} of {} frozen parameters changed",
            audit.changed, audit.checked
        )));
    }
    log::info!("freeze audit: {} frozen parameters unchanged", audit.checked);
    Ok((model, store, log, audit))
}
