//! Named parameters.
//!
//! Models first declare their parameters on a [`Registry`] (names, shapes,
//! initializers, groups). Declarations alone are enough for parameter
//! accounting at any scale; [`ParamStore::materialize`] allocates values.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::Tape;
use super::tensor::{numel, Tensor};
use super::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Functional role of a parameter, used for learning-rate splits and census.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Backbone,
    BoxHead,
    SegHead,
    Adapter,
    Prompter,
    PromptEmbed,
}

impl ParamGroup {
    pub fn is_head(self) -> bool {
        matches!(self, ParamGroup::BoxHead | ParamGroup::SegHead)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::BoxHead => "box_head",
            ParamGroup::SegHead => "seg_head",
            ParamGroup::Adapter => "adapters",
            ParamGroup::Prompter => "prompters",
            ParamGroup::PromptEmbed => "prompt_embed",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub group: ParamGroup,
    pub frozen: bool,
}

impl ParamDecl {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Registry {
    decls: Vec<ParamDecl>,
    index: HashMap<String, ParamId>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        group: ParamGroup,
    ) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateName(name));
        }
        if shape.contains(&0) {
            return Err(TensorError::Invalid(format!("parameter `{name}` has an empty extent in {shape:?}")));
        }
        let id = ParamId(self.decls.len());
        self.index.insert(name.clone(), id);
        self.decls.push(ParamDecl { name, shape: shape.to_vec(), init, group, frozen: false });
        Ok(id)
    }

    pub fn decls(&self) -> &[ParamDecl] {
        &self.decls
    }

    pub fn decl(&self, id: ParamId) -> &ParamDecl {
        &self.decls[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.decls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decls.is_empty()
    }

    /// Marks every parameter declared so far as frozen.
    pub fn freeze_all(&mut self) {
        for d in &mut self.decls {
            d.frozen = true;
        }
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.decls[id.0].frozen = frozen;
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub frozen: bool,
    pub group: ParamGroup,
}

#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    /// Allocates and initializes every declared parameter in declaration order
    /// from a single seeded stream.
    pub fn materialize(registry: &Registry, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = registry
            .decls
            .iter()
            .map(|d| {
                let n = d.numel();
                let data = match d.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Uniform(b) => (0..n).map(|_| rng.gen_range(-b..=b)).collect(),
                };
                Parameter {
                    name: d.name.clone(),
                    value: Tensor::from_parts(d.shape.clone(), data),
                    grad: None,
                    frozen: d.frozen,
                    group: d.group,
                }
            })
            .collect();
        Self { params, index: registry.index.clone() }
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the parameter gradients recorded on `tape` into each `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (id, g) in tape.param_grads() {
            let p = &mut self.params[id.0];
            let shape = p.value.shape().to_vec();
            let acc = p.grad.get_or_insert_with(|| Tensor::zeros(&shape));
            for (a, b) in acc.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    /// Overwrites the value of `name`, checking the shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        let id = self.id_of(name).ok_or_else(|| TensorError::Invalid(format!("no parameter named `{name}`")))?;
        self.set(id, value)
    }

    /// Overwrites the value of `id`, checking the shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<(), TensorError> {
        let p = &mut self.params[id.0];
        let name = &p.name;
        if p.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_value",
                detail: format!("`{name}` has shape {:?}, got {:?}", p.value.shape(), value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.numel()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}
