//! Prompt-tuning machinery: low-rank adapters, cross-modal prompters,
//! modality prompt embeddings and parameter accounting.

pub mod adapter;
pub mod census;
pub mod embed;
pub mod prompter;

pub use adapter::{inject_ttp, Adapter};
pub use census::Census;
pub use embed::{EmbedDims, PromptEmbed, PromptInput, TextEncoder, MAX_TEXT_TOKENS};
pub use prompter::{Alignment, CmtPrompter, Fusion, PromptTokens};

use crate::error::{Error, Result};

/// Where prompters sit in the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// No prompters; the prompt embedding is added to the input tokens.
    Direct,
    /// Sorted, distinct layer indices, each hosting one prompter.
    Positions(Vec<usize>),
}

impl Schedule {
    /// One prompter every `k` layers starting at layer 0; `k = 0` selects
    /// [`Schedule::Direct`].
    pub fn every_k(k: usize, depth: usize) -> Result<Self> {
        if k == 0 {
            return Ok(Schedule::Direct);
        }
        if k > depth {
            return Err(Error::Config(format!("every_k: {k} exceeds encoder depth {depth}")));
        }
        Ok(Schedule::Positions((0..depth).step_by(k).collect()))
    }

    pub fn positions(mut positions: Vec<usize>, depth: usize) -> Result<Self> {
        positions.sort_unstable();
        positions.dedup();
        if positions.is_empty() {
            return Err(Error::Config("prompter_positions: empty (use every_k = 0 for direct addition)".into()));
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= depth) {
            return Err(Error::Config(format!("prompter_positions: {bad} is outside 0..{depth}")));
        }
        Ok(Schedule::Positions(positions))
    }

    pub fn layers(&self) -> &[usize] {
        match self {
            Schedule::Direct => &[],
            Schedule::Positions(p) => p,
        }
    }

    pub fn count(&self) -> usize {
        self.layers().len()
    }
}
