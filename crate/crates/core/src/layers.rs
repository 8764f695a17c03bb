//! Small building blocks over the tape: affine layers and parameter setup.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParameterStore, Tape, Var, WeightInit};

/// Registers `{path}.weight` (`fan_in×fan_out`, Glorot) and `{path}.bias` (zeros).
pub(crate) fn init_linear(
    store: &mut ParameterStore,
    path: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.init(&format!("{path}.weight"), fan_in, fan_out, WeightInit::Glorot, rng)?;
    store.init(&format!("{path}.bias"), 1, fan_out, WeightInit::Constant(0.0), rng)
}

/// Registers a bias-free `fan_in×fan_out` projection at `path`.
pub(crate) fn init_projection(
    store: &mut ParameterStore,
    path: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.init(path, fan_in, fan_out, WeightInit::Glorot, rng)
}

/// Like [`init_projection`] with the Glorot bound scaled by `gain`.
pub(crate) fn init_scaled_projection(
    store: &mut ParameterStore,
    path: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    store.init(path, fan_in, fan_out, WeightInit::ScaledGlorot(gain), rng)
}

/// `x·W + b`.
pub(crate) fn linear<'t>(tape: &'t Tape, store: &ParameterStore, path: &str, x: Var<'t>) -> Result<Var<'t>> {
    let w = tape.param(store, &format!("{path}.weight"))?;
    let b = tape.param(store, &format!("{path}.bias"))?;
    x.matmul(w)?.add(b)
}
