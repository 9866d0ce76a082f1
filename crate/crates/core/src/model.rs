//! The RGB foundation tracker and the prompt-tuned multimodal tracker
//! built on top of it.

use crate::autodiff::{ParamGroup, ParamId, ParamStore, Registry, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::heads::{BoxHead, BoxMapVars, SegHead};
use crate::nn::LayerNorm;
use crate::peft::census::{self, Census};
use crate::peft::{inject_ttp, Alignment, CmtPrompter, EmbedDims, PromptEmbed, PromptInput, PromptTokens, Schedule};
use crate::task::{Modality, Task};
use crate::vit::{BackboneConfig, Role, TokenState, VitBackbone};

#[derive(Clone, Debug, PartialEq)]
pub struct FoundationConfig {
    pub backbone: BackboneConfig,
    /// Hidden channels of each box-head branch; the seg head uses half
    /// and a quarter of this.
    pub head_channels: usize,
}

impl FoundationConfig {
    pub fn vit_base() -> Self {
        Self { backbone: BackboneConfig::vit_base(), head_channels: 256 }
    }

    pub fn toy() -> Self {
        Self { backbone: BackboneConfig::toy(), head_channels: 16 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptConfig {
    pub rank: usize,
    pub adapter_scale: f64,
    pub latent: usize,
    pub schedule: Schedule,
    pub vocab_size: usize,
    /// Keep the segmentation head trainable for mask-prompted tracking.
    pub train_seg_head: bool,
}

impl PromptConfig {
    pub fn vit_b(depth: usize) -> Self {
        Self {
            rank: 16,
            adapter_scale: 0.1,
            latent: 64,
            schedule: Schedule::every_k(1, depth).expect("depth >= 1"),
            vocab_size: 64,
            train_seg_head: true,
        }
    }
}

/// Images and prompt payload for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TrackerInputs<'a> {
    /// `(3, S, S)` template images, embedded in order.
    pub templates: &'a [Tensor],
    pub search: &'a Tensor,
    pub prompt: Option<&'a PromptInput>,
}

#[derive(Clone, Copy, Debug)]
pub struct TrackerOutput {
    pub maps: BoxMapVars,
    /// `(S, S)` logits over the search image, when requested.
    pub mask_logits: Option<Var>,
    pub tokens: TokenState,
}

/// Common surface of both trackers.
pub trait Tracker: Sync {
    fn registry(&self) -> &Registry;
    fn foundation(&self) -> &FoundationTracker;
    fn task(&self) -> Task;
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &TrackerInputs<'_>,
        want_mask: bool,
    ) -> Result<TrackerOutput>;

    /// Prompt-tuning settings, `None` for the plain foundation tracker.
    fn prompt_config(&self) -> Option<&PromptConfig> {
        None
    }

    fn census(&self) -> Census {
        Census::from_registry(self.registry())
    }
}

#[derive(Clone, Debug)]
pub struct FoundationTracker {
    pub config: FoundationConfig,
    pub backbone: VitBackbone,
    pub norm: LayerNorm,
    pub box_head: BoxHead,
    pub seg_head: SegHead,
    registry: Registry,
}

impl FoundationTracker {
    pub fn new(config: &FoundationConfig) -> Result<Self> {
        let mut reg = Registry::new();
        let (backbone, norm, box_head, seg_head) = Self::declare_parts(&mut reg, config)?;
        Ok(Self { config: config.clone(), backbone, norm, box_head, seg_head, registry: reg })
    }

    fn declare_parts(
        reg: &mut Registry,
        config: &FoundationConfig,
    ) -> Result<(VitBackbone, LayerNorm, BoxHead, SegHead)> {
        if config.head_channels == 0 {
            return Err(Error::Config("head_channels: must be positive".into()));
        }
        let b = &config.backbone;
        let backbone = VitBackbone::declare(reg, b)?;
        let norm = LayerNorm::declare(reg, "backbone.norm", b.dim, ParamGroup::Backbone)?;
        let box_head = BoxHead::declare(reg, b.dim, config.head_channels)?;
        let seg_head = SegHead::declare(reg, b.dim, b.patch_size, config.head_channels)?;
        Ok((backbone, norm, box_head, seg_head))
    }

    /// Closed-form parameter count.
    pub fn param_count(config: &FoundationConfig) -> usize {
        let b = &config.backbone;
        let d = b.dim;
        let patch = b.in_channels * b.patch_size * b.patch_size * d + d;
        let pos = (b.template_tokens() + b.search_tokens()) * d;
        let layers = b.depth * census::encoder_layer_count(d, b.mlp_hidden());
        patch
            + pos
            + layers
            + 2 * d
            + BoxHead::param_count(d, config.head_channels)
            + SegHead::param_count(d, b.patch_size, config.head_channels)
    }

    fn embed_images(&self, tape: &mut Tape, store: &ParamStore, inputs: &TrackerInputs<'_>) -> Result<(Var, Var)> {
        if inputs.templates.is_empty() {
            return Err(Error::InvalidInput("at least one template image is required".into()));
        }
        let parts = inputs
            .templates
            .iter()
            .map(|t| self.backbone.embed(tape, store, t, Role::Template))
            .collect::<Result<Vec<_>>>()?;
        let z = tape.concat_firstdim(&parts)?;
        let s = self.backbone.embed(tape, store, inputs.search, Role::Search)?;
        Ok((z, s))
    }

    fn heads(&self, tape: &mut Tape, store: &ParamStore, tokens: TokenState, want_mask: bool) -> Result<TrackerOutput> {
        let search = tokens.search_tokens(tape)?;
        let search = self.norm.forward(tape, store, search)?;
        let maps = self.box_head.forward(tape, store, search)?;
        let mask_logits = if want_mask { Some(self.seg_head.forward(tape, store, search)?) } else { None };
        Ok(TrackerOutput { maps, mask_logits, tokens })
    }
}

impl Tracker for FoundationTracker {
    fn registry(&self) -> &Registry {
        &self.registry
    }

    fn foundation(&self) -> &FoundationTracker {
        self
    }

    fn task(&self) -> Task {
        Task::Rgb
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &TrackerInputs<'_>,
        want_mask: bool,
    ) -> Result<TrackerOutput> {
        let (z, s) = self.embed_images(tape, store, inputs)?;
        let tokens = self.backbone.encode(tape, store, z, s, None)?;
        self.heads(tape, store, tokens, want_mask)
    }
}

/// Foundation tracker with adapters, prompters and a prompt embedding.
/// Foundation parameters keep their names and ids and are frozen.
#[derive(Clone, Debug)]
pub struct PromptTracker {
    pub base: FoundationTracker,
    pub config: PromptConfig,
    pub modality: Modality,
    pub prompters: Vec<CmtPrompter>,
    pub embed: PromptEmbed,
    registry: Registry,
    foundation_len: usize,
}

impl PromptTracker {
    pub fn new(foundation: &FoundationConfig, config: &PromptConfig, modality: Modality) -> Result<Self> {
        let mut reg = Registry::new();
        let (mut backbone, norm, box_head, seg_head) = FoundationTracker::declare_parts(&mut reg, foundation)?;
        let foundation_len = reg.len();
        let base_registry = reg.clone();
        let b = &foundation.backbone;
        if let Schedule::Positions(p) = &config.schedule {
            if let Some(&bad) = p.iter().find(|&&l| l >= b.depth) {
                return Err(Error::Config(format!("prompter_positions: {bad} is outside 0..{}", b.depth)));
            }
        }
        inject_ttp(&mut reg, &mut backbone, config.rank, config.adapter_scale)?;
        let prompters = config
            .schedule
            .layers()
            .iter()
            .map(|l| CmtPrompter::declare(&mut reg, &format!("prompters.{l}"), b.dim, config.latent, modality))
            .collect::<Result<Vec<_>>>()?;
        let dims = EmbedDims {
            dim: b.dim,
            patch: b.patch_size,
            heads: b.heads,
            mlp_hidden: b.mlp_hidden(),
            vocab: config.vocab_size,
        };
        let embed = PromptEmbed::declare(&mut reg, modality, dims, config.schedule == Schedule::Direct)?;
        if modality == Modality::Mask && config.train_seg_head {
            for i in 0..reg.len() {
                let id = ParamId(i);
                if reg.decl(id).group == ParamGroup::SegHead {
                    reg.set_frozen(id, false);
                }
            }
        }
        let base = FoundationTracker {
            config: foundation.clone(),
            backbone,
            norm,
            box_head,
            seg_head,
            registry: base_registry,
        };
        Ok(Self { base, config: config.clone(), modality, prompters, embed, registry: reg, foundation_len })
    }

    /// Number of leading registry entries that belong to the foundation.
    pub fn foundation_len(&self) -> usize {
        self.foundation_len
    }

    /// Closed-form census of this configuration.
    pub fn closed_form_census(foundation: &FoundationConfig, config: &PromptConfig, modality: Modality) -> Census {
        let b = &foundation.backbone;
        let hidden = b.mlp_hidden();
        let seg = if modality == Modality::Mask && config.train_seg_head {
            SegHead::param_count(b.dim, b.patch_size, foundation.head_channels)
        } else {
            0
        };
        Census {
            adapters: census::adapter_count(b.dim, hidden, b.depth, config.rank),
            prompters: census::prompter_count(b.dim, config.latent, config.schedule.count(), modality),
            prompt_embed: census::prompt_embed_count(modality, b.dim, b.patch_size, hidden, config.vocab_size),
            foundation: seg,
            frozen: FoundationTracker::param_count(foundation) - seg,
        }
    }

    fn initial_prompt(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &TrackerInputs<'_>,
        n_template: usize,
        n_search: usize,
    ) -> Result<PromptTokens> {
        let input =
            inputs.prompt.ok_or_else(|| Error::InvalidInput(format!("task {} needs a prompt payload", self.task())))?;
        let p = self.embed.forward(tape, store, self.modality, input)?;
        p.check(tape, n_template, n_search, self.base.config.backbone.dim)?;
        Ok(p)
    }
}

impl Tracker for PromptTracker {
    fn registry(&self) -> &Registry {
        &self.registry
    }

    fn foundation(&self) -> &FoundationTracker {
        &self.base
    }

    fn task(&self) -> Task {
        Task::RgbX(self.modality)
    }

    fn prompt_config(&self) -> Option<&PromptConfig> {
        Some(&self.config)
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &TrackerInputs<'_>,
        want_mask: bool,
    ) -> Result<TrackerOutput> {
        let (z, s) = self.base.embed_images(tape, store, inputs)?;
        let nz = tape.shape(z)[0];
        let ns = tape.shape(s)[0];
        let dim = self.base.config.backbone.dim;
        let p0 = self.initial_prompt(tape, store, inputs, nz, ns)?;

        let tokens = match &self.config.schedule {
            Schedule::Direct => {
                let p = match p0.alignment {
                    Alignment::Full => p0.tokens,
                    Alignment::Template => {
                        let pad = tape.constant(Tensor::zeros(&[ns, dim]));
                        tape.concat_firstdim(&[p0.tokens, pad])?
                    }
                    Alignment::Free => {
                        return Err(Error::Config("every_k: 0 is not available for text prompts".into()))
                    }
                };
                let mut hook = |tape: &mut Tape, _: &ParamStore, h: Var, l: usize| -> Result<Var> {
                    if l == 0 {
                        Ok(tape.add(h, p)?)
                    } else {
                        Ok(h)
                    }
                };
                self.base.backbone.encode(tape, store, z, s, Some(&mut hook))?
            }
            Schedule::Positions(positions) => {
                let mut state = p0;
                let mut next = 0;
                let mut hook = |tape: &mut Tape, store: &ParamStore, h: Var, l: usize| -> Result<Var> {
                    if positions.get(next) != Some(&l) {
                        return Ok(h);
                    }
                    let prompter = &self.prompters[next];
                    next += 1;
                    let p_next = prompter.forward(tape, store, h, &state, nz)?;
                    state = PromptTokens { tokens: p_next, modality: self.modality, alignment: Alignment::Full };
                    Ok(tape.add(h, p_next)?)
                };
                self.base.backbone.encode(tape, store, z, s, Some(&mut hook))?
            }
        };
        self.base.heads(tape, store, tokens, want_mask)
    }
}
