//! Parameterized building blocks shared by the backbone, heads and prompt modules.

use crate::autodiff::{Init, ParamGroup, ParamId, ParamStore, Registry, Tape, Var};
use crate::error::{Error, Result};
use crate::peft::Adapter;

/// Uniform bound used for fan-in scaled initialization.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Row-token linear map: `(t, in) -> (t, out)` computing `x·W + b`,
/// plus an optional low-rank adapter branch.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub adapter: Option<Adapter>,
}

impl Linear {
    pub fn declare(
        reg: &mut Registry,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: ParamGroup,
    ) -> Result<Self> {
        Self::declare_with(reg, name, in_dim, out_dim, bias, group, Init::Uniform(fan_in_bound(in_dim)))
    }

    pub fn declare_with(
        reg: &mut Registry,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: ParamGroup,
        init: Init,
    ) -> Result<Self> {
        let weight = reg.declare(format!("{name}.weight"), &[in_dim, out_dim], init, group)?;
        let bias = if bias { Some(reg.declare(format!("{name}.bias"), &[out_dim], Init::Zeros, group)?) } else { None };
        Ok(Self { name: name.to_string(), weight, bias, in_dim, out_dim, adapter: None })
    }

    /// The frozen-base path `x·W + b` without any adapter.
    pub fn forward_base(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::Shape(format!("{}: expected (t, {}) input, got {:?}", self.name, self.in_dim, shape)));
        }
        let w = tape.param(store, self.weight);
        let mut y = tape.matmul(x, w)?;
        if let Some(b) = self.bias {
            let b = tape.param(store, b);
            y = tape.add(y, b)?;
        }
        Ok(y)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let base = self.forward_base(tape, store, x)?;
        match &self.adapter {
            Some(a) => {
                let delta = a.forward(tape, store, x)?;
                Ok(tape.add(base, delta)?)
            }
            None => Ok(base),
        }
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn declare(reg: &mut Registry, name: &str, dim: usize, group: ParamGroup) -> Result<Self> {
        Ok(Self {
            gamma: reg.declare(format!("{name}.gamma"), &[dim], Init::Ones, group)?,
            beta: reg.declare(format!("{name}.beta"), &[dim], Init::Zeros, group)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layernorm_lastdim(x);
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let y = tape.mul(n, g)?;
        Ok(tape.add(y, b)?)
    }
}

/// 2-D convolution layer over `(1, C, H, W)` feature maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn declare(
        reg: &mut Registry,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        let bound = fan_in_bound(cin * kernel * kernel);
        Ok(Self {
            weight: reg.declare(format!("{name}.weight"), &[cout, cin, kernel, kernel], Init::Uniform(bound), group)?,
            bias: reg.declare(format!("{name}.bias"), &[cout], Init::Zeros, group)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        Ok(tape.conv2d(x, w, Some(b), self.stride, self.padding)?)
    }
}
