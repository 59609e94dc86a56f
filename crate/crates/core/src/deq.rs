//! The deep-equilibrium layer.
//!
//! In weight-tied mode the core is unrolled a fixed number of times from a
//! zero state and differentiated by ordinary backpropagation. In equilibrium
//! mode the fixed point `z* = f(z*; x)` is found by a root solver outside
//! the tape and recorded as a single opaque node whose inputs are `x` and
//! the core parameters; its reverse pass is either the implicit-function
//! gradient or the Jacobian-free approximation.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::seqcore::{Bound, FThetaCore};
use crate::solvers::{broyden_solve, fixed_point_iterate, linear_solve_matfree, SolverConfig, SolverTrace};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamSet, Tensor};

/// A shape-preserving map `f(z; x)` whose parameters live under one prefix.
pub trait EquilibriumCore: Send + Sync + 'static {
    /// Parameter path prefix; every parameter of the core is `prefix.*`.
    fn prefix(&self) -> &str;

    fn apply<'t>(&self, params: &Bound<'t>, z: Var<'t>, x: Var<'t>) -> Result<Var<'t>>;
}

impl EquilibriumCore for FThetaCore {
    fn prefix(&self) -> &str {
        &self.path
    }

    fn apply<'t>(&self, params: &Bound<'t>, z: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        FThetaCore::apply(self, params, z, x)
    }
}

/// Evaluate a core on plain values.
pub fn core_eval(core: &dyn EquilibriumCore, params: &ParamSet, z: &Tensor, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let b = Bound::constants(&tape, params);
    Ok(core.apply(&b, tape.constant(z.clone()), tape.constant(x.clone()))?.value())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardSolver {
    Broyden,
    /// Plain iteration `z ← f(z)`.
    FixedPoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardMode {
    Implicit,
    Jfb,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DeqMode {
    WeightTied {
        unroll: usize,
    },
    Equilibrium {
        solver: ForwardSolver,
        config: SolverConfig,
        backward: BackwardMode,
        /// Linear-solve settings of the implicit backward pass.
        backward_config: SolverConfig,
    },
}

/// Deliberate defects used to check that the gradient suites catch them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Negate the right-hand side of the backward linear system.
    FlipRhsSign,
}

pub struct DeqOutput<'t> {
    pub z_star: Var<'t>,
    pub trace: SolverTrace,
}

/// Gradients produced by one DEQ backward pass.
#[derive(Clone, Debug)]
pub struct DeqGrads {
    pub params: ParamSet,
    pub x: Tensor,
    /// Nodes recorded on the backward pass's private tape.
    pub tape_nodes: usize,
}

#[derive(Clone)]
pub struct DeqLayer {
    core: Arc<dyn EquilibriumCore>,
    mode: DeqMode,
    fault: Fault,
}

impl std::fmt::Debug for DeqLayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeqLayer")
            .field("core", &self.core.prefix())
            .field("mode", &self.mode)
            .field("fault", &self.fault)
            .finish()
    }
}

impl DeqLayer {
    pub fn new(core: Arc<dyn EquilibriumCore>, mode: DeqMode) -> Result<Self> {
        match mode {
            DeqMode::WeightTied { .. } => {}
            DeqMode::Equilibrium {
                config, backward_config, ..
            } => {
                config.validate()?;
                backward_config.validate()?;
            }
        }
        Ok(Self {
            core,
            mode,
            fault: Fault::None,
        })
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = fault;
        self
    }

    pub fn mode(&self) -> DeqMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: DeqMode) -> Result<()> {
        *self = Self::new(Arc::clone(&self.core), mode)?.with_fault(self.fault);
        Ok(())
    }

    pub fn core(&self) -> &dyn EquilibriumCore {
        self.core.as_ref()
    }

    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<DeqOutput<'t>> {
        match self.mode {
            DeqMode::WeightTied { unroll } => weight_tied_forward(self.core(), params, x, unroll),
            DeqMode::Equilibrium { .. } => self.deq_forward(params, x),
        }
    }

    /// Equilibrium solve from `z = 0` on plain values.
    pub fn solve(&self, params: &ParamSet, x: &Tensor) -> Result<(Tensor, SolverTrace)> {
        let DeqMode::Equilibrium { solver, config, .. } = self.mode else {
            return Err(Error::invalid("deq_forward", "layer is in weight-tied mode"));
        };
        solve_with(self.core(), solver, &config, params, x)
    }

    /// Equilibrium forward recorded as one opaque tape node.
    pub fn deq_forward<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<DeqOutput<'t>> {
        let DeqMode::Equilibrium {
            backward,
            backward_config,
            ..
        } = self.mode
        else {
            return Err(Error::invalid("deq_forward", "layer is in weight-tied mode"));
        };
        let bound = params.with_prefix(self.core.prefix());
        let names: Vec<String> = bound.iter().map(|(k, _)| k.clone()).collect();
        let mut own = ParamSet::new();
        for (k, v) in &bound {
            own.insert(k.clone(), v.value())?;
        }
        let (z_star, trace) = self.solve(&own, &x.value())?;

        let core = Arc::clone(&self.core);
        let fault = self.fault;
        let rule = move |inputs: &[&Tensor], out: &Tensor, upstream: &Tensor| -> Result<Vec<Tensor>> {
            let mut ps = ParamSet::new();
            for (name, value) in names.iter().zip(&inputs[1..]) {
                ps.insert(name.clone(), (*value).clone())?;
            }
            let g = match backward {
                BackwardMode::Jfb => backward_jfb(core.as_ref(), &ps, out, inputs[0], upstream)?,
                BackwardMode::Implicit => {
                    backward_implicit_with(core.as_ref(), &ps, out, inputs[0], upstream, &backward_config, fault)?
                }
            };
            let mut grads = Vec::with_capacity(inputs.len());
            grads.push(g.x);
            for name in &names {
                grads.push(g.params.get(name)?.clone());
            }
            Ok(grads)
        };
        let mut inputs = vec![x];
        inputs.extend(bound.iter().map(|(_, v)| *v));
        let z_star = x.tape().custom(&inputs, z_star, Box::new(rule))?;
        Ok(DeqOutput { z_star, trace })
    }
}

fn solve_with(
    core: &dyn EquilibriumCore,
    solver: ForwardSolver,
    config: &SolverConfig,
    params: &ParamSet,
    x: &Tensor,
) -> Result<(Tensor, SolverTrace)> {
    let z0 = Tensor::zeros(x.shape().to_vec());
    match solver {
        ForwardSolver::Broyden => broyden_solve(|z| core_eval(core, params, z, x)?.sub(z), &z0, config),
        ForwardSolver::FixedPoint => fixed_point_iterate(|z| core_eval(core, params, z, x), &z0, config),
    }
}

/// Apply the core `unroll` times from the zero state, recording every step.
///
/// The trace holds `‖z^[i+1] − z^[i]‖` per step; it never signals
/// convergence and never stops early.
pub fn weight_tied_forward<'t>(
    core: &dyn EquilibriumCore,
    params: &Bound<'t>,
    x: Var<'t>,
    unroll: usize,
) -> Result<DeqOutput<'t>> {
    let tape = x.tape();
    let mut z = tape.constant(Tensor::zeros(x.shape()));
    let mut trace = SolverTrace::default();
    let mut prev = z.value();
    for _ in 0..unroll {
        z = core.apply(params, z, x)?;
        let cur = z.value();
        trace.residual_norms.push(cur.sub(&prev)?.norm_l2());
        prev = cur;
    }
    trace.l_stop = unroll;
    trace.returned = unroll.saturating_sub(1);
    Ok(DeqOutput { z_star: z, trace })
}

fn record_core<'t>(
    tape: &'t Tape,
    core: &dyn EquilibriumCore,
    params: &ParamSet,
    z: &Tensor,
    x: &Tensor,
) -> Result<(Var<'t>, Var<'t>, Bound<'t>, Var<'t>)> {
    let b = Bound::leaves(tape, params);
    let zv = tape.leaf(z.clone());
    let xv = tape.leaf(x.clone());
    let out = core.apply(&b, zv, xv)?;
    Ok((zv, xv, b, out))
}

fn propagate(tape: &Tape, out: Var<'_>, seed: &Tensor, xv: Var<'_>, b: &Bound<'_>, prefix: &str) -> Result<DeqGrads> {
    let bound = b.with_prefix(prefix);
    let mut wrt = vec![xv];
    wrt.extend(bound.iter().map(|(_, v)| *v));
    let mut grads = tape.vjp_of(out, seed, &wrt)?.into_iter();
    let x = grads.next().expect("x gradient");
    let mut params = ParamSet::new();
    for ((name, _), g) in bound.iter().zip(grads) {
        params.insert(name.clone(), g)?;
    }
    Ok(DeqGrads {
        params,
        x,
        tape_nodes: tape.len(),
    })
}

/// Jacobian-free backward: the upstream gradient pushed through one
/// evaluation of the core at the equilibrium.
pub fn backward_jfb(
    core: &dyn EquilibriumCore,
    params: &ParamSet,
    z_star: &Tensor,
    x: &Tensor,
    upstream: &Tensor,
) -> Result<DeqGrads> {
    let tape = Tape::new();
    let (_, xv, b, out) = record_core(&tape, core, params, z_star, x)?;
    propagate(&tape, out, upstream, xv, &b, core.prefix())
}

/// Implicit-function backward.
///
/// Solves `(J_fᵀ − I) y + u = 0` at the equilibrium matrix-free, with
/// `J_fᵀ v` obtained by reverse mode through one recorded evaluation of the
/// core, then pushes `y` through that same evaluation to the parameters and
/// the input.
pub fn backward_implicit(
    core: &dyn EquilibriumCore,
    params: &ParamSet,
    z_star: &Tensor,
    x: &Tensor,
    upstream: &Tensor,
    config: &SolverConfig,
) -> Result<DeqGrads> {
    backward_implicit_with(core, params, z_star, x, upstream, config, Fault::None)
}

pub fn backward_implicit_with(
    core: &dyn EquilibriumCore,
    params: &ParamSet,
    z_star: &Tensor,
    x: &Tensor,
    upstream: &Tensor,
    config: &SolverConfig,
    fault: Fault,
) -> Result<DeqGrads> {
    if upstream.shape() != z_star.shape() {
        return Err(Error::shape("backward_implicit", z_star.shape(), upstream.shape()));
    }
    let tape = Tape::new();
    let (zv, xv, b, out) = record_core(&tape, core, params, z_star, x)?;
    let rhs = match fault {
        Fault::None => upstream.clone(),
        Fault::FlipRhsSign => upstream.scale(-1.0),
    };
    let apply_at = |v: &Tensor| -> Result<Tensor> {
        let jv = tape.vjp_of(out, v, &[zv])?.pop().expect("one input");
        jv.sub(v)
    };
    let y = linear_solve_matfree(apply_at, &rhs, config)?;
    propagate(&tape, out, &y, xv, &b, core.prefix())
}
