//! Maps each auxiliary modality into prompt tokens of width `D`.

use crate::autodiff::{Init, ParamGroup, ParamId, ParamStore, Registry, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::fan_in_bound;
use crate::peft::prompter::{Alignment, PromptTokens};
use crate::task::Modality;
use crate::vit::{EncoderLayer, PatchEmbed};

/// Maximum number of text tokens fed to the text encoder.
pub const MAX_TEXT_TOKENS: usize = 16;

/// Raw auxiliary input for one forward pass.
#[derive(Clone, Debug)]
pub enum PromptInput {
    /// Token ids, at most [`MAX_TEXT_TOKENS`].
    Text(Vec<usize>),
    /// One `(1, S, S)` mask per template image.
    Masks(Vec<Tensor>),
    /// `(1, S, S)` maps for each template and for the search image.
    Maps { templates: Vec<Tensor>, search: Tensor },
}

impl PromptInput {
    pub fn kind(&self) -> &'static str {
        match self {
            PromptInput::Text(_) => "text",
            PromptInput::Masks(_) => "mask",
            PromptInput::Maps { .. } => "map",
        }
    }
}

/// Small learned stand-in for a pretrained language encoder.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub table: ParamId,
    pub pos: ParamId,
    pub layer: EncoderLayer,
    pub vocab: usize,
}

impl TextEncoder {
    pub fn declare(
        reg: &mut Registry,
        name: &str,
        vocab: usize,
        dim: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        let g = ParamGroup::PromptEmbed;
        let init = Init::Uniform(0.02 * 3f64.sqrt());
        Ok(Self {
            table: reg.declare(format!("{name}.token_table"), &[vocab, dim], init, g)?,
            pos: reg.declare(format!("{name}.pos"), &[MAX_TEXT_TOKENS, dim], init, g)?,
            layer: EncoderLayer::declare(reg, &format!("{name}.layer"), dim, heads, hidden, g)?,
            vocab,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() || ids.len() > MAX_TEXT_TOKENS {
            return Err(Error::InvalidInput(format!(
                "text prompt needs 1..={MAX_TEXT_TOKENS} tokens, got {}",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::InvalidInput(format!("token id {bad} outside vocabulary of {}", self.vocab)));
        }
        let table = tape.param(store, self.table);
        let tok = tape.gather_rows(table, ids)?;
        let pos = tape.param(store, self.pos);
        let pos = tape.slice_firstdim(pos, 0, ids.len())?;
        let x = tape.add(tok, pos)?;
        self.layer.forward(tape, store, x)
    }
}

/// Modality-specific prompt embedding.
#[derive(Clone, Debug)]
pub enum PromptEmbed {
    Text(TextEncoder),
    Mask(PatchEmbed),
    Map(PatchEmbed),
}

/// Shape parameters needed to build a prompt embedding.
#[derive(Clone, Copy, Debug)]
pub struct EmbedDims {
    pub dim: usize,
    pub patch: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
}

impl PromptEmbed {
    /// `zero_init` zeroes the patch projection so the first prompt is
    /// all zeros; used when prompts are added straight onto the input tokens.
    pub fn declare(reg: &mut Registry, modality: Modality, dims: EmbedDims, zero_init: bool) -> Result<Self> {
        let g = ParamGroup::PromptEmbed;
        let init = if zero_init { Init::Zeros } else { Init::Uniform(fan_in_bound(dims.patch * dims.patch)) };
        Ok(match modality {
            Modality::Language => {
                if zero_init {
                    return Err(Error::Config(
                        "every_k: 0 (direct prompt addition) needs token-aligned prompts; not available for rgb_n"
                            .into(),
                    ));
                }
                PromptEmbed::Text(TextEncoder::declare(
                    reg,
                    "prompt_embed.text",
                    dims.vocab,
                    dims.dim,
                    dims.heads,
                    dims.mlp_hidden,
                )?)
            }
            Modality::Mask => {
                PromptEmbed::Mask(PatchEmbed::declare(reg, "prompt_embed.mask", 1, dims.patch, dims.dim, g, init)?)
            }
            _ => PromptEmbed::Map(PatchEmbed::declare(reg, "prompt_embed.map", 1, dims.patch, dims.dim, g, init)?),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        modality: Modality,
        input: &PromptInput,
    ) -> Result<PromptTokens> {
        let (tokens, alignment) = match (self, input) {
            (PromptEmbed::Text(enc), PromptInput::Text(ids)) => (enc.forward(tape, store, ids)?, Alignment::Free),
            (PromptEmbed::Mask(pe), PromptInput::Masks(masks)) => {
                if masks.is_empty() {
                    return Err(Error::InvalidInput("mask prompt needs at least one mask".into()));
                }
                let parts = masks.iter().map(|m| pe.forward(tape, store, m)).collect::<Result<Vec<_>>>()?;
                (tape.concat_firstdim(&parts)?, Alignment::Template)
            }
            (PromptEmbed::Map(pe), PromptInput::Maps { templates, search }) => {
                let mut parts = templates.iter().map(|m| pe.forward(tape, store, m)).collect::<Result<Vec<_>>>()?;
                parts.push(pe.forward(tape, store, search)?);
                (tape.concat_firstdim(&parts)?, Alignment::Full)
            }
            (_, other) => {
                return Err(Error::InvalidInput(format!(
                    "{modality:?} prompt embedding cannot take a {} input",
                    other.kind()
                )))
            }
        };
        Ok(PromptTokens { tokens, modality, alignment })
    }
}
