//! Neural building blocks: fully connected layers, normalization, (B)LSTM,
//! the equilibrium core and the baseline recurrent sequence model.
//!
//! Layers are descriptors. They own a parameter path prefix and their
//! shapes; the values live in a [`ParamSet`]. To run a layer, bind the
//! parameter set to a tape with [`Bound`] and call the layer's `apply`.

mod fc;
mod ftheta;
mod lstm;
mod norm;
mod umx;

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamSet, Tensor};

pub use fc::Fc;
pub use ftheta::FThetaCore;
pub use lstm::{Blstm, LstmDirection};
pub use norm::{BatchNorm, GroupNorm1};
pub use umx::UmxSequenceModel;

/// Uniform initialization bound for a layer with `fan_in` inputs.
pub fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Parameters of a [`ParamSet`] recorded on one tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Bind every parameter as a differentiable leaf.
    pub fn leaves(tape: &'t Tape, params: &ParamSet) -> Self {
        let vars = params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect();
        Self { tape, vars }
    }

    /// Bind every parameter as a constant.
    pub fn constants(tape: &'t Tape, params: &ParamSet) -> Self {
        let vars = params.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect();
        Self { tape, vars }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, path: &str) -> Result<Var<'t>> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    /// Bound variables under `prefix.`, in path order.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Var<'t>)> {
        let dotted = format!("{prefix}.");
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(&dotted))
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }

    /// Gradients of all bound parameters after [`Tape::backward`].
    pub fn grads(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, v) in &self.vars {
            let g = v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()));
            out.insert(k.clone(), g).expect("unique paths");
        }
        out
    }
}

/// Running batch statistics collected by [`BatchNorm`] in training mode.
#[derive(Default)]
pub struct BatchStats {
    entries: RefCell<BTreeMap<String, (Vec<f64>, Vec<f64>)>>,
}

impl BatchStats {
    pub fn record(&self, path: &str, mean: Vec<f64>, var: Vec<f64>) {
        self.entries.borrow_mut().insert(path.to_string(), (mean, var));
    }

    pub fn take(&self) -> BTreeMap<String, (Vec<f64>, Vec<f64>)> {
        std::mem::take(&mut *self.entries.borrow_mut())
    }
}

/// Evaluation context for layers that behave differently in training and
/// evaluation (batch normalization).
pub struct Ctx<'a, 't> {
    pub params: &'a Bound<'t>,
    /// Non-trainable running statistics.
    pub buffers: &'a ParamSet,
    pub train: bool,
    pub stats: BatchStats,
}

impl<'a, 't> Ctx<'a, 't> {
    pub fn new(params: &'a Bound<'t>, buffers: &'a ParamSet, train: bool) -> Self {
        Self {
            params,
            buffers,
            train,
            stats: BatchStats::default(),
        }
    }
}

/// Largest singular value of a 2-D tensor by power iteration.
pub fn spectral_norm(m: &Tensor) -> Result<f64> {
    let (r, c) = m.dims2()?;
    if r == 0 || c == 0 {
        return Ok(0.0);
    }
    let mt = m.transpose()?;
    let mut v = Tensor::new(vec![c, 1], vec![1.0 / (c as f64).sqrt(); c])?;
    let mut sigma = 0.0;
    for _ in 0..500 {
        let u = m.matmul(&v)?;
        let w = mt.matmul(&u)?;
        let n = w.norm_l2();
        if n == 0.0 {
            return Ok(0.0);
        }
        let next = n.sqrt();
        v = w.scale(1.0 / n);
        if (next - sigma).abs() <= 1e-13 * next {
            return Ok(next);
        }
        sigma = next;
    }
    Ok(sigma)
}

/// Rescale every 2-D parameter under `prefix` to the given spectral norm.
pub fn rescale_spectral(params: &mut ParamSet, prefix: &str, target: f64) -> Result<()> {
    let dotted = format!("{prefix}.");
    for (name, value) in params.iter_mut() {
        if !name.starts_with(&dotted) || value.ndim() != 2 {
            continue;
        }
        let s = spectral_norm(value)?;
        if s > 0.0 {
            *value = value.scale(target / s);
        }
    }
    Ok(())
}
