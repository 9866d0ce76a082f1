//! Parameter accounting by group, plus closed-form counts for the
//! prompt-tuning parts.

use std::fmt;

use crate::autodiff::{ParamGroup, Registry};
use crate::peft::embed::MAX_TEXT_TOKENS;
use crate::task::Modality;

/// Parameter counts by role. Trainable groups count only non-frozen
/// parameters; `frozen` counts every frozen parameter regardless of group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Census {
    pub adapters: usize,
    pub prompters: usize,
    pub prompt_embed: usize,
    /// Trainable backbone and head parameters.
    pub foundation: usize,
    pub frozen: usize,
}

impl Census {
    pub fn from_registry(reg: &Registry) -> Self {
        let mut c = Census::default();
        for d in reg.decls() {
            let n = d.numel();
            if d.frozen {
                c.frozen += n;
                continue;
            }
            match d.group {
                ParamGroup::Adapter => c.adapters += n,
                ParamGroup::Prompter => c.prompters += n,
                ParamGroup::PromptEmbed => c.prompt_embed += n,
                ParamGroup::Backbone | ParamGroup::BoxHead | ParamGroup::SegHead => c.foundation += n,
            }
        }
        c
    }

    pub fn trainable(&self) -> usize {
        self.adapters + self.prompters + self.prompt_embed + self.foundation
    }

    pub fn total(&self) -> usize {
        self.trainable() + self.frozen
    }
}

impl fmt::Display for Census {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "adapters      {:>12}", self.adapters)?;
        writeln!(f, "prompters     {:>12}", self.prompters)?;
        writeln!(f, "prompt_embed  {:>12}", self.prompt_embed)?;
        writeln!(f, "foundation    {:>12}", self.foundation)?;
        writeln!(f, "frozen        {:>12}", self.frozen)?;
        writeln!(f, "trainable     {:>12}", self.trainable())?;
        write!(f, "total         {:>12}", self.total())
    }
}

/// One pre-norm encoder layer with biases on every linear.
pub fn encoder_layer_count(dim: usize, hidden: usize) -> usize {
    2 * 2 * dim + 4 * (dim * dim + dim) + (dim * hidden + hidden) + (hidden * dim + dim)
}

/// Adapters on Q, K, V (`D -> D`) and FFN output (`hidden -> D`) per layer.
pub fn adapter_count(dim: usize, hidden: usize, depth: usize, rank: usize) -> usize {
    depth * (3 * rank * (dim + dim) + rank * (hidden + dim))
}

/// `n_prompters` prompters of latent width `m`.
pub fn prompter_count(dim: usize, latent: usize, n_prompters: usize, modality: Modality) -> usize {
    let m = latent;
    let fusion = if modality == Modality::Language { 3 * (m * m + m) } else { m * m + m };
    n_prompters * (2 * (dim * m + m) + fusion + (m * dim + dim))
}

pub fn prompt_embed_count(modality: Modality, dim: usize, patch: usize, hidden: usize, vocab: usize) -> usize {
    match modality {
        Modality::Language => vocab * dim + MAX_TEXT_TOKENS * dim + encoder_layer_count(dim, hidden),
        _ => patch * patch * dim + dim,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peft::adapter::inject_ttp;
    use crate::vit::{BackboneConfig, VitBackbone};

    #[test]
    fn vit_base_adapter_count() {
        assert_eq!(adapter_count(768, 3072, 12, 16), 1_622_016);
        assert_eq!(prompter_count(768, 64, 12, Modality::Thermal), 1_830_144);
    }

    #[test]
    fn registry_census_matches_formula_at_vit_base() {
        let cfg = BackboneConfig::vit_base();
        let mut reg = Registry::new();
        let mut b = VitBackbone::declare(&mut reg, &cfg).unwrap();
        let before = Census::from_registry(&reg);
        assert_eq!(before.frozen, 0);
        inject_ttp(&mut reg, &mut b, 16, 0.1).unwrap();
        let c = Census::from_registry(&reg);
        assert_eq!(c.adapters, adapter_count(768, 3072, 12, 16));
        assert_eq!(c.frozen, before.total());
        assert_eq!(c.total(), reg.decls().iter().map(|d| d.numel()).sum::<usize>());
    }
}
