//! Patch embedding and the joint template/search transformer encoder.
//!
//! Template and search tokens are concatenated, template first, and every
//! encoder layer runs full self-attention over the joint sequence.

use crate::autodiff::{Init, ParamGroup, ParamId, ParamStore, Registry, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub mlp_ratio: f64,
    pub in_channels: usize,
}

impl BackboneConfig {
    /// ViT-B/16 encoder at 192/384 template/search resolution.
    pub fn vit_base() -> Self {
        Self {
            dim: 768,
            depth: 12,
            heads: 12,
            patch_size: 16,
            template_size: 192,
            search_size: 384,
            mlp_ratio: 4.0,
            in_channels: 3,
        }
    }

    /// Desk-scale configuration used by tests and toy training runs.
    pub fn toy() -> Self {
        Self {
            dim: 16,
            depth: 2,
            heads: 2,
            patch_size: 8,
            template_size: 32,
            search_size: 64,
            mlp_ratio: 4.0,
            in_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: String| Err(Error::Config(format!("{k}: {why}")));
        if self.dim == 0 || self.depth == 0 || self.heads == 0 || self.patch_size == 0 {
            return bad("dim/depth/heads/patch_size", "must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad("heads", format!("{} does not divide dim {}", self.heads, self.dim));
        }
        for (k, s) in [("template_size", self.template_size), ("search_size", self.search_size)] {
            if s == 0 || s % self.patch_size != 0 {
                return bad(k, format!("{s} is not a positive multiple of patch_size {}", self.patch_size));
            }
        }
        if !(self.mlp_ratio > 0.0) {
            return bad("mlp_ratio", format!("{} must be positive", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn grid(&self, size: usize) -> usize {
        size / self.patch_size
    }

    pub fn template_tokens(&self) -> usize {
        self.grid(self.template_size).pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        self.grid(self.search_size).pow(2)
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Splits a `(C, S, S)` image into row-major non-overlapping patches,
/// returning `((S/p)², C·p·p)` with each row laid out channel-major.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Shape(format!("patchify expects (C, H, W), got {:?}", image.shape())));
    };
    if h != w || h % patch != 0 {
        return Err(Error::Shape(format!("image {h}x{w} is not square with a side divisible by patch size {patch}")));
    }
    let g = h / patch;
    let row = c * patch * patch;
    let src = image.data();
    let mut out = vec![0.0; g * g * row];
    for gy in 0..g {
        for gx in 0..g {
            let base = (gy * g + gx) * row;
            for ch in 0..c {
                for py in 0..patch {
                    let y = gy * patch + py;
                    let s = (ch * h + y) * w + gx * patch;
                    let d = base + (ch * patch + py) * patch;
                    out[d..d + patch].copy_from_slice(&src[s..s + patch]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![g * g, row], out)?)
}

/// Learned linear projection of flattened patches.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub channels: usize,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn declare(
        reg: &mut Registry,
        name: &str,
        channels: usize,
        patch: usize,
        dim: usize,
        group: ParamGroup,
        init: Init,
    ) -> Result<Self> {
        let proj = Linear::declare_with(reg, name, channels * patch * patch, dim, true, group, init)?;
        Ok(Self { proj, channels, patch })
    }

    /// `(C, S, S)` image to `((S/p)², D)` tokens.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor) -> Result<Var> {
        if image.shape().first() != Some(&self.channels) {
            return Err(Error::Shape(format!(
                "{}: expected {} input channel(s), got image {:?}",
                self.proj.name,
                self.channels,
                image.shape()
            )));
        }
        let patches = tape.constant(patchify(image, self.patch)?);
        self.proj.forward(tape, store, patches)
    }
}

/// Pre-norm transformer encoder layer with separate Q/K/V projections.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub dim: usize,
    pub heads: usize,
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderLayer {
    pub fn declare(
        reg: &mut Registry,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        Ok(Self {
            dim,
            heads,
            norm1: LayerNorm::declare(reg, &format!("{name}.norm1"), dim, group)?,
            q: Linear::declare(reg, &format!("{name}.attn.q"), dim, dim, true, group)?,
            k: Linear::declare(reg, &format!("{name}.attn.k"), dim, dim, true, group)?,
            v: Linear::declare(reg, &format!("{name}.attn.v"), dim, dim, true, group)?,
            proj: Linear::declare(reg, &format!("{name}.attn.proj"), dim, dim, true, group)?,
            norm2: LayerNorm::declare(reg, &format!("{name}.norm2"), dim, group)?,
            fc1: Linear::declare(reg, &format!("{name}.mlp.fc1"), dim, hidden, true, group)?,
            fc2: Linear::declare(reg, &format!("{name}.mlp.fc2"), hidden, dim, true, group)?,
        })
    }

    /// `(t, D)` -> `(t, D)` split into heads -> `(heads, t, D/heads)`.
    fn split_heads(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let t = tape.shape(x)[0];
        let r = tape.reshape(x, &[t, self.heads, self.dim / self.heads])?;
        Ok(tape.permute(r, &[1, 0, 2])?)
    }

    pub fn attention(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let t = tape.shape(x)[0];
        let dh = self.dim / self.heads;
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        let q = self.split_heads(tape, q)?;
        let k = self.split_heads(tape, k)?;
        let v = self.split_heads(tape, v)?;
        let kt = tape.transpose_last2(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_lastdim(scores);
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.permute(ctx, &[1, 0, 2])?;
        let ctx = tape.reshape(ctx, &[t, self.dim])?;
        self.proj.forward(tape, store, ctx)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let shape = tape.shape(h);
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::Shape(format!("encoder layer expects (N, {}) tokens, got {:?}", self.dim, shape)));
        }
        let x = self.norm1.forward(tape, store, h)?;
        let a = self.attention(tape, store, x)?;
        let h = tape.add(h, a)?;
        let x = self.norm2.forward(tape, store, h)?;
        let f = self.fc1.forward(tape, store, x)?;
        let f = tape.gelu(f);
        let f = self.fc2.forward(tape, store, f)?;
        Ok(tape.add(h, f)?)
    }

    /// The linear layers of this block, in a fixed order.
    pub fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.proj, &mut self.fc1, &mut self.fc2]
    }
}

/// Matching tokens flowing through the encoder; the first `n_template`
/// rows are template tokens and the last `n_search` rows search tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenState {
    pub h: Var,
    pub n_template: usize,
    pub n_search: usize,
    pub layer: usize,
}

impl TokenState {
    pub fn search_tokens(&self, tape: &mut Tape) -> Result<Var> {
        Ok(tape.slice_firstdim(self.h, self.n_template, self.n_template + self.n_search)?)
    }
}

/// Callback that may rewrite the matching tokens before an encoder layer.
pub trait PromptHook {
    /// Receives `H^l` before layer `l` (0-based) and returns its replacement.
    fn before_layer(&mut self, tape: &mut Tape, store: &ParamStore, h: Var, layer: usize) -> Result<Var>;
}

impl<F> PromptHook for F
where
    F: FnMut(&mut Tape, &ParamStore, Var, usize) -> Result<Var>,
{
    fn before_layer(&mut self, tape: &mut Tape, store: &ParamStore, h: Var, layer: usize) -> Result<Var> {
        self(tape, store, h, layer)
    }
}

/// Which positional table a patch grid uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Template,
    Search,
}

#[derive(Clone, Debug)]
pub struct VitBackbone {
    pub config: BackboneConfig,
    pub patch_embed: PatchEmbed,
    pub pos_template: ParamId,
    pub pos_search: ParamId,
    pub layers: Vec<EncoderLayer>,
}

impl VitBackbone {
    pub fn declare(reg: &mut Registry, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::Backbone;
        let d = config.dim;
        let patch_embed = PatchEmbed::declare(
            reg,
            "backbone.patch_embed",
            config.in_channels,
            config.patch_size,
            d,
            g,
            Init::Uniform(crate::nn::fan_in_bound(config.in_channels * config.patch_size.pow(2))),
        )?;
        let pos_init = Init::Uniform(0.02 * 3f64.sqrt());
        let pos_template = reg.declare("backbone.pos_template", &[config.template_tokens(), d], pos_init, g)?;
        let pos_search = reg.declare("backbone.pos_search", &[config.search_tokens(), d], pos_init, g)?;
        let layers = (0..config.depth)
            .map(|l| {
                EncoderLayer::declare(reg, &format!("backbone.blocks.{l}"), d, config.heads, config.mlp_hidden(), g)
            })
            .collect::<Result<_>>()?;
        Ok(Self { config: config.clone(), patch_embed, pos_template, pos_search, layers })
    }

    /// Patch tokens plus positional embedding. Template-role images at
    /// search resolution (used by the no-crop mask protocol) take the
    /// search table.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor, role: Role) -> Result<Var> {
        let size = image.shape().get(1).copied().unwrap_or(0);
        let pos = match role {
            Role::Template if size == self.config.template_size => self.pos_template,
            Role::Template | Role::Search if size == self.config.search_size => self.pos_search,
            _ => {
                return Err(Error::Shape(format!(
                    "{role:?} image of size {size} matches neither template ({}) nor search ({}) resolution",
                    self.config.template_size, self.config.search_size
                )))
            }
        };
        let tokens = self.patch_embed.forward(tape, store, image)?;
        let pos = tape.param(store, pos);
        Ok(tape.add(tokens, pos)?)
    }

    /// Runs the encoder over `[template; search]`, calling `hook` before each layer.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        template: Var,
        search: Var,
        mut hook: Option<&mut dyn PromptHook>,
    ) -> Result<TokenState> {
        let d = self.config.dim;
        for (what, v) in [("template", template), ("search", search)] {
            let s = tape.shape(v);
            if s.len() != 2 || s[1] != d {
                return Err(Error::Shape(format!("{what} tokens must be (N, {d}), got {s:?}")));
            }
        }
        let n_template = tape.shape(template)[0];
        let n_search = tape.shape(search)[0];
        let mut h = tape.concat_firstdim(&[template, search])?;
        let expected = vec![n_template + n_search, d];
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(hook) = hook.as_deref_mut() {
                h = hook.before_layer(tape, store, h, l)?;
                if tape.shape(h) != expected.as_slice() {
                    return Err(Error::HookShape { layer: l, expected, got: tape.shape(h).to_vec() });
                }
            }
            h = layer.forward(tape, store, h)?;
            debug_assert_eq!(tape.shape(h), expected.as_slice());
        }
        Ok(TokenState { h, n_template, n_search, layer: self.layers.len() })
    }
}
