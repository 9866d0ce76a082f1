//! `key=value` run configuration.
//!
//! One pair per line, `#` starts a comment. `preset=toy|vit_b` is applied
//! before every other key regardless of where it appears. Unknown keys are
//! errors.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::inference::TrackConfig;
use crate::losses::LossWeights;
use crate::model::{FoundationConfig, PromptConfig};
use crate::peft::Schedule;
use crate::task::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    VitB,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "vit_b" => Ok(Preset::VitB),
            other => Err(Error::Config(format!("preset: unknown preset {other:?} (toy, vit_b)"))),
        }
    }
}

/// Optimization settings shared by both training stages.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Stage-1 optimizer steps.
    pub steps: usize,
    /// Stage-2 optimizer steps.
    pub finetune_steps: usize,
    /// Samples per step.
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    /// Adapters, prompters, prompt embedding (and the mask-task seg head).
    pub lr_prompt: f64,
    pub weight_decay: f64,
    /// Fraction of the run after which learning rates drop tenfold.
    pub decay_at: f64,
    /// Search-window center jitter in units of `√(w·h)`.
    pub center_jitter: f64,
    /// Search-window log-scale jitter half-width.
    pub scale_jitter: f64,
    /// Largest template/search frame distance in a training pair.
    pub max_gap: usize,
    pub log_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    pub preset: Preset,
    pub foundation: FoundationConfig,
    pub prompt: PromptConfig,
    /// `None` until [`TrackerConfig::finish`]; then reflected in `prompt.schedule`.
    every_k: Option<usize>,
    positions: Option<Vec<usize>>,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub track: TrackConfig,
    pub gen: GenConfig,
    /// Clips written by `gen-data`.
    pub clips: usize,
    pub seed: u64,
    pub task: Task,
}

impl TrackerConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Toy => {
                let foundation = FoundationConfig::toy();
                let mut prompt = PromptConfig::vit_b(foundation.backbone.depth);
                prompt.rank = 4;
                prompt.latent = 8;
                Self {
                    preset,
                    foundation,
                    prompt,
                    every_k: Some(1),
                    positions: None,
                    weights: LossWeights::default(),
                    train: TrainConfig {
                        steps: 1000,
                        finetune_steps: 300,
                        batch_size: 8,
                        lr_backbone: 1e-3,
                        lr_heads: 3e-3,
                        lr_prompt: 4e-3,
                        weight_decay: 1e-4,
                        decay_at: 0.8,
                        center_jitter: 0.5,
                        scale_jitter: 0.2,
                        max_gap: 4,
                        log_every: 50,
                    },
                    track: TrackConfig::default(),
                    gen: GenConfig::default(),
                    clips: 8,
                    seed: 0,
                    task: Task::Rgb,
                }
            }
            Preset::VitB => {
                let foundation = FoundationConfig::vit_base();
                let prompt = PromptConfig::vit_b(foundation.backbone.depth);
                Self {
                    preset,
                    foundation,
                    prompt,
                    every_k: Some(1),
                    positions: None,
                    weights: LossWeights::default(),
                    train: TrainConfig {
                        steps: 1000,
                        finetune_steps: 1000,
                        batch_size: 32,
                        lr_backbone: 4e-5,
                        lr_heads: 4e-4,
                        lr_prompt: 4e-5,
                        weight_decay: 1e-4,
                        decay_at: 0.8,
                        center_jitter: 0.5,
                        scale_jitter: 0.2,
                        max_gap: 4,
                        log_every: 50,
                    },
                    track: TrackConfig::default(),
                    gen: GenConfig { size: 384, ..GenConfig::default() },
                    clips: 8,
                    seed: 0,
                    task: Task::Rgb,
                }
            }
        }
    }

    pub fn toy() -> Self {
        Self::preset(Preset::Toy).finish().expect("toy preset is valid")
    }

    pub fn vit_b() -> Self {
        Self::preset(Preset::VitB).finish().expect("vit_b preset is valid")
    }

    /// Parses `key=value` lines; `origin` names the source in errors.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key=value, found {line:?}", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies `preset` first, then every other pair in order.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut preset = Preset::Toy;
        for (k, v) in pairs {
            if k == "preset" {
                preset = v.parse()?;
            }
        }
        let mut cfg = Self::preset(preset);
        for (k, v) in pairs {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.finish()
    }

    /// Sets one key. The configuration must be [`finish`](Self::finish)ed
    /// again before use.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: Display,
        {
            v.parse::<T>().map_err(|e| Error::Config(format!("{key}: invalid value {v:?} ({e})")))
        }
        let b = &mut self.foundation.backbone;
        let t = &mut self.train;
        match key {
            "preset" => return Err(Error::Config("preset: must be set before other keys are applied".into())),
            "dim" => b.dim = num(key, value)?,
            "depth" => b.depth = num(key, value)?,
            "heads" => b.heads = num(key, value)?,
            "patch_size" => b.patch_size = num(key, value)?,
            "template_size" => b.template_size = num(key, value)?,
            "search_size" => b.search_size = num(key, value)?,
            "mlp_ratio" => b.mlp_ratio = num(key, value)?,
            "head_channels" => self.foundation.head_channels = num(key, value)?,
            "rank" => self.prompt.rank = num(key, value)?,
            "adapter_scale" => self.prompt.adapter_scale = num(key, value)?,
            "latent" => self.prompt.latent = num(key, value)?,
            "vocab_size" => self.prompt.vocab_size = num(key, value)?,
            "train_seg_head" => self.prompt.train_seg_head = num(key, value)?,
            "every_k" => {
                self.every_k = Some(num(key, value)?);
                self.positions = None;
            }
            "prompter_positions" => {
                let p = value.split(',').map(|s| num::<usize>(key, s.trim())).collect::<Result<Vec<_>>>()?;
                self.positions = Some(p);
                self.every_k = None;
            }
            "lambda_iou" => self.weights.iou = num(key, value)?,
            "lambda_l1" => self.weights.l1 = num(key, value)?,
            "lambda_mask" => self.weights.mask = num(key, value)?,
            "steps" => t.steps = num(key, value)?,
            "finetune_steps" => t.finetune_steps = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "lr_backbone" => t.lr_backbone = num(key, value)?,
            "lr_heads" => t.lr_heads = num(key, value)?,
            "lr_prompt" => t.lr_prompt = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "decay_at" => t.decay_at = num(key, value)?,
            "center_jitter" => t.center_jitter = num(key, value)?,
            "scale_jitter" => t.scale_jitter = num(key, value)?,
            "max_gap" => t.max_gap = num(key, value)?,
            "log_every" => t.log_every = num(key, value)?,
            "template_factor" => self.track.template_factor = num(key, value)?,
            "search_factor" => self.track.search_factor = num(key, value)?,
            "hanning" => self.track.hanning = num(key, value)?,
            "clips" => self.clips = num(key, value)?,
            "frame_size" => self.gen.size = num(key, value)?,
            "clip_length" => self.gen.length = num(key, value)?,
            "distractors" => self.gen.distractors = num(key, value)?,
            "speed" => self.gen.speed = num(key, value)?,
            "jitter" => self.gen.jitter = num(key, value)?,
            "min_object" => self.gen.min_object = num(key, value)?,
            "max_object" => self.gen.max_object = num(key, value)?,
            "static_target" => self.gen.static_target = num(key, value)?,
            "occluder_noise" => self.gen.occluder_noise = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "task" => self.task = value.parse()?,
            other => return Err(Error::Config(format!("{other}: unknown config key"))),
        }
        Ok(())
    }

    /// Resolves the prompter schedule and validates every section.
    pub fn finish(mut self) -> Result<Self> {
        let depth = self.foundation.backbone.depth;
        self.foundation.backbone.validate()?;
        if self.foundation.head_channels == 0 {
            return Err(Error::Config("head_channels: must be positive".into()));
        }
        self.prompt.schedule = match (&self.positions, self.every_k) {
            (Some(p), _) => Schedule::positions(p.clone(), depth)?,
            (None, Some(k)) => Schedule::every_k(k, depth)?,
            (None, None) => Schedule::every_k(1, depth)?,
        };
        let d = self.foundation.backbone.dim;
        let hidden = self.foundation.backbone.mlp_hidden();
        if self.prompt.rank == 0 || self.prompt.rank > d.min(hidden) {
            return Err(Error::Config(format!("rank: {} is outside 1..={}", self.prompt.rank, d.min(hidden))));
        }
        if self.prompt.latent == 0 {
            return Err(Error::Config("latent: must be positive".into()));
        }
        let min_vocab = crate::data::Vocabulary::min_size();
        if self.prompt.vocab_size < min_vocab {
            return Err(Error::Config(format!("vocab_size: {} is below {min_vocab}", self.prompt.vocab_size)));
        }
        for (k, v) in
            [("lambda_iou", self.weights.iou), ("lambda_l1", self.weights.l1), ("lambda_mask", self.weights.mask)]
        {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k}: {v} must be non-negative")));
            }
        }
        let t = &self.train;
        for (k, v) in [
            ("lr_backbone", t.lr_backbone),
            ("lr_heads", t.lr_heads),
            ("lr_prompt", t.lr_prompt),
            ("weight_decay", t.weight_decay),
            ("center_jitter", t.center_jitter),
            ("scale_jitter", t.scale_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k}: {v} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&t.decay_at) {
            return Err(Error::Config(format!("decay_at: {} is outside [0, 1]", t.decay_at)));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size: must be positive".into()));
        }
        if !(self.track.template_factor > 0.0 && self.track.search_factor > 0.0) {
            return Err(Error::Config("template_factor/search_factor: must be positive".into()));
        }
        self.gen.validate()?;
        Ok(self)
    }

    /// Every key with its current value, in a stable order; parsing the
    /// output reproduces this configuration.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let b = &self.foundation.backbone;
        let t = &self.train;
        let g = &self.gen;
        let schedule = match &self.prompt.schedule {
            Schedule::Direct => ("every_k".to_string(), "0".to_string()),
            Schedule::Positions(p) => match self.every_k {
                Some(k) if self.positions.is_none() => ("every_k".to_string(), k.to_string()),
                _ => ("prompter_positions".to_string(), p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")),
            },
        };
        let preset = match self.preset {
            Preset::Toy => "toy",
            Preset::VitB => "vit_b",
        };
        let mut out: Vec<(String, String)> = vec![
            ("preset".into(), preset.into()),
            ("dim".into(), b.dim.to_string()),
            ("depth".into(), b.depth.to_string()),
            ("heads".into(), b.heads.to_string()),
            ("patch_size".into(), b.patch_size.to_string()),
            ("template_size".into(), b.template_size.to_string()),
            ("search_size".into(), b.search_size.to_string()),
            ("mlp_ratio".into(), b.mlp_ratio.to_string()),
            ("head_channels".into(), self.foundation.head_channels.to_string()),
            ("rank".into(), self.prompt.rank.to_string()),
            ("adapter_scale".into(), self.prompt.adapter_scale.to_string()),
            ("latent".into(), self.prompt.latent.to_string()),
            ("vocab_size".into(), self.prompt.vocab_size.to_string()),
            ("train_seg_head".into(), self.prompt.train_seg_head.to_string()),
        ];
        out.push(schedule);
        let rest = [
            ("lambda_iou", self.weights.iou.to_string()),
            ("lambda_l1", self.weights.l1.to_string()),
            ("lambda_mask", self.weights.mask.to_string()),
            ("steps", t.steps.to_string()),
            ("finetune_steps", t.finetune_steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr_backbone", t.lr_backbone.to_string()),
            ("lr_heads", t.lr_heads.to_string()),
            ("lr_prompt", t.lr_prompt.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("decay_at", t.decay_at.to_string()),
            ("center_jitter", t.center_jitter.to_string()),
            ("scale_jitter", t.scale_jitter.to_string()),
            ("max_gap", t.max_gap.to_string()),
            ("log_every", t.log_every.to_string()),
            ("template_factor", self.track.template_factor.to_string()),
            ("search_factor", self.track.search_factor.to_string()),
            ("hanning", self.track.hanning.to_string()),
            ("clips", self.clips.to_string()),
            ("frame_size", g.size.to_string()),
            ("clip_length", g.length.to_string()),
            ("distractors", g.distractors.to_string()),
            ("speed", g.speed.to_string()),
            ("jitter", g.jitter.to_string()),
            ("min_object", g.min_object.to_string()),
            ("max_object", g.max_object.to_string()),
            ("static_target", g.static_target.to_string()),
            ("occluder_noise", g.occluder_noise.to_string()),
            ("seed", self.seed.to_string()),
            ("task", self.task.to_string()),
        ];
        out.extend(rest.into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self::toy()
    }
}
