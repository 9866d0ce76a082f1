//! Low-rank residual adapters attached to frozen linear layers.

use crate::autodiff::{Init, ParamGroup, ParamId, ParamStore, Registry, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{fan_in_bound, Linear};
use crate::vit::VitBackbone;

/// Bottleneck branch `s·relu(x·W_down)·W_up` added to a base linear.
///
/// Row-token layout: `W_down` is `(k, r)` and `W_up` is `(r, d)` for a
/// base map from `k` input to `d` output features.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: ParamId,
    pub up: ParamId,
    pub scale: f64,
    pub rank: usize,
}

impl Adapter {
    pub fn declare(reg: &mut Registry, name: &str, k: usize, d: usize, rank: usize, scale: f64) -> Result<Self> {
        if rank == 0 || rank > k.min(d) {
            return Err(Error::Config(format!(
                "rank: {rank} must be in 1..={} for a {k}->{d} linear ({name})",
                k.min(d)
            )));
        }
        let g = ParamGroup::Adapter;
        let down = reg.declare(format!("{name}.down"), &[k, rank], Init::Uniform(fan_in_bound(k)), g)?;
        let up = reg.declare(format!("{name}.up"), &[rank, d], Init::Zeros, g)?;
        Ok(Self { down, up, scale, rank })
    }

    /// The residual branch alone, `(t, k) -> (t, d)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let down = tape.param(store, self.down);
        let up = tape.param(store, self.up);
        let z = tape.matmul(x, down)?;
        let z = tape.relu(z);
        let z = tape.matmul(z, up)?;
        Ok(tape.scale(z, self.scale))
    }
}

/// Attaches an adapter to `linear`, rejecting a second injection.
pub fn attach(reg: &mut Registry, linear: &mut Linear, rank: usize, scale: f64) -> Result<()> {
    if linear.adapter.is_some() {
        return Err(Error::Config(format!("{}: adapter already injected", linear.name)));
    }
    let name = format!("{}.adapter", linear.name);
    linear.adapter = Some(Adapter::declare(reg, &name, linear.in_dim, linear.out_dim, rank, scale)?);
    Ok(())
}

/// Freezes every parameter declared so far and adds one adapter to the
/// Q, K, V and second FFN linear of every encoder layer. Returns the
/// number of adapters created.
pub fn inject_ttp(reg: &mut Registry, backbone: &mut VitBackbone, rank: usize, scale: f64) -> Result<usize> {
    for layer in &backbone.layers {
        for lin in [&layer.q, &layer.k, &layer.v, &layer.fc2] {
            if lin.adapter.is_some() {
                return Err(Error::Config(format!("{}: adapter already injected", lin.name)));
            }
        }
    }
    reg.freeze_all();
    let mut n = 0;
    for layer in &mut backbone.layers {
        for lin in [&mut layer.q, &mut layer.k, &mut layer.v, &mut layer.fc2] {
            attach(reg, lin, rank, scale)?;
            n += 1;
        }
    }
    Ok(n)
}
