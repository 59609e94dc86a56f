//! Randomized oracle suites for the equilibrium layer and its solvers.
//!
//! Each suite draws its instances from a seeded generator, compares against
//! an independent oracle (long unrolls, finite differences, dense solves,
//! closed forms) and reports the worst instance so it can be replayed.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deq::{
    backward_implicit_with, backward_jfb, core_eval, EquilibriumCore, Fault, ForwardSolver,
};
use crate::error::Result;
use crate::seqcore::{Bound, FThetaCore};
use crate::solvers::{broyden_solve, dense_solve, fixed_point_iterate, SolverConfig};
use crate::tape::Var;
use crate::tensor::{ParamSet, Tensor};

/// Spectral scale of every weight matrix in a contractive test core.
pub const CONTRACTIVE_SCALE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub passed: usize,
    pub total: usize,
    /// Instances that must pass for the suite to pass.
    pub required: usize,
    /// Worst value of the suite's error measure.
    pub worst: f64,
    /// Description of the worst instance, sufficient to replay it.
    pub worst_instance: String,
}

impl SuiteReport {
    fn new(name: &str, required: usize) -> Self {
        Self {
            name: name.to_string(),
            passed: 0,
            total: 0,
            required,
            worst: f64::NEG_INFINITY,
            worst_instance: String::new(),
        }
    }

    fn record(&mut self, ok: bool, err: f64, instance: impl FnOnce() -> String) {
        self.total += 1;
        if ok {
            self.passed += 1;
        }
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if err > self.worst {
            self.worst = err;
            self.worst_instance = instance();
        }
    }

    pub fn ok(&self) -> bool {
        self.passed >= self.required
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {}/{} (need {}), worst {:.3e} [{}]",
            if self.ok() { "PASS" } else { "FAIL" },
            self.name,
            self.passed,
            self.total,
            self.required,
            self.worst,
            self.worst_instance
        )
    }
}

/// A random core with every weight matrix at spectral norm
/// [`CONTRACTIVE_SCALE`], plus a random input sequence.
#[derive(Clone, Debug)]
pub struct Instance {
    pub seed: u64,
    pub core: FThetaCore,
    pub params: ParamSet,
    pub x: Tensor,
}

impl Instance {
    pub fn random(seed: u64, max_width: usize, max_frames: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Width 2 is excluded: one-group normalization of two features is a
        // sign function and the core is then not a contraction.
        let width = 2 * rng.random_range(2..=(max_width / 2).max(2));
        let frames = rng.random_range(1..=max_frames);
        Self::with_shape(seed, width, frames)
    }

    pub fn with_shape(seed: u64, width: usize, frames: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let core = FThetaCore::new("core", width)?;
        let mut params = ParamSet::new();
        core.init_scaled(&mut params, &mut rng, CONTRACTIVE_SCALE)?;
        let x = Tensor::randn(vec![frames, width], &mut rng);
        Ok(Self { seed, core, params, x })
    }

    pub fn describe(&self) -> String {
        format!("seed={} p={} T={}", self.seed, self.core.width, self.x.shape()[0])
    }

    pub fn eval(&self, params: &ParamSet, z: &Tensor) -> Result<Tensor> {
        core_eval(&self.core, params, z, &self.x)
    }

    pub fn solve(&self, params: &ParamSet, config: &SolverConfig) -> Result<Tensor> {
        let z0 = Tensor::zeros(self.x.shape().to_vec());
        Ok(broyden_solve(|z| self.eval(params, z)?.sub(z), &z0, config)?.0)
    }
}

/// `f(z; x) = tanh(z·w + x)` on `(1 × 1)` states.
#[derive(Clone, Copy, Debug, Default)]
pub struct TanhScalar;

impl EquilibriumCore for TanhScalar {
    fn prefix(&self) -> &str {
        "s"
    }

    fn apply<'t>(&self, params: &Bound<'t>, z: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        z.matmul(params.get("s.w")?)?.add(x)?.tanh()
    }
}

/// Broyden with a tight tolerance against a 1000-step plain iteration.
pub fn equilibrium_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("equilibrium vs 1000-step unroll", instances);
    let long = SolverConfig {
        epsilon: f64::MIN_POSITIVE,
        l_max: 1000,
        alpha: 1.0,
    };
    for i in 0..instances as u64 {
        let inst = Instance::random(seed + i, 16, 12)?;
        let z0 = Tensor::zeros(inst.x.shape().to_vec());
        let (z_deq, _) = crate::deq::DeqLayer::new(
            std::sync::Arc::new(inst.core.clone()),
            crate::deq::DeqMode::Equilibrium {
                solver: ForwardSolver::Broyden,
                config: SolverConfig::tight(),
                backward: crate::deq::BackwardMode::Implicit,
                backward_config: SolverConfig::tight(),
            },
        )?
        .solve(&inst.params, &inst.x)?;
        let (z_fp, _) = fixed_point_iterate(|z| inst.eval(&inst.params, z), &z0, &long)?;
        let d = z_deq.max_abs_diff(&z_fp)?;
        rep.record(d < 1e-6, d, || inst.describe());
    }
    Ok(rep)
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Settings for the finite-difference comparison.
#[derive(Clone, Copy, Debug)]
pub struct FdSettings {
    pub step: f64,
    /// Solver used for each perturbed forward.
    pub solve: SolverConfig,
    /// Linear-solve settings of the implicit backward.
    pub backward: SolverConfig,
    /// Parameter entries probed per instance.
    pub probes: usize,
    pub tolerance: f64,
}

impl Default for FdSettings {
    fn default() -> Self {
        Self {
            step: 1e-5,
            solve: SolverConfig {
                alpha: 1.0,
                epsilon: 1e-13,
                l_max: 400,
            },
            backward: SolverConfig {
                alpha: 1.0,
                epsilon: 1e-12,
                l_max: 400,
            },
            probes: 10,
            tolerance: 1e-5,
        }
    }
}

/// Implicit gradients of `⟨c, z*⟩` against central finite differences
/// through a tight solve, on randomly chosen parameter entries.
pub fn implicit_fd_suite(instances: usize, seed: u64, settings: &FdSettings, fault: Fault) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("implicit gradient vs finite differences", instances);
    for i in 0..instances as u64 {
        let inst = Instance::random(seed + i, 16, 12)?;
        let err = implicit_fd_error(&inst, settings, fault)?;
        rep.record(err < settings.tolerance, err, || inst.describe());
    }
    Ok(rep)
}

/// Relative error of one instance; see [`implicit_fd_suite`].
pub fn implicit_fd_error(inst: &Instance, settings: &FdSettings, fault: Fault) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(inst.seed.wrapping_mul(31).wrapping_add(7));
    let c = Tensor::randn(inst.x.shape().to_vec(), &mut rng);
    let z = inst.solve(&inst.params, &settings.solve)?;
    let g = backward_implicit_with(&inst.core, &inst.params, &z, &inst.x, &c, &settings.backward, fault)?;
    let names: Vec<String> = inst.params.names().cloned().collect();
    let mut analytic = Vec::with_capacity(settings.probes);
    let mut numeric = Vec::with_capacity(settings.probes);
    for _ in 0..settings.probes {
        let name = &names[rng.random_range(0..names.len())];
        let len = inst.params.get(name)?.len();
        let k = rng.random_range(0..len);
        analytic.push(g.params.get(name)?.data()[k]);
        let eval_at = |delta: f64| -> Result<f64> {
            let mut p = inst.params.clone();
            let mut t = p.get(name)?.clone();
            t.data_mut()[k] += delta;
            p.set(name, t)?;
            inst.solve(&p, &settings.solve)?.dot(&c)
        };
        let (hi, lo) = (eval_at(settings.step)?, eval_at(-settings.step)?);
        numeric.push((hi - lo) / (2.0 * settings.step));
    }
    Ok(relative_error(&analytic, &numeric))
}

/// `z* = tanh(w z* + x)`: implicit gradient against the closed form
/// `dz*/dw = z* s / (1 − w s)`, `s = 1 − z*²`.
pub fn scalar_closed_form(w: f64, x: f64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("scalar tanh fixed point closed form", 1);
    let mut ps = ParamSet::new();
    ps.insert("s.w", Tensor::matrix(1, 1, vec![w])?)?;
    let xt = Tensor::matrix(1, 1, vec![x])?;
    let z0 = Tensor::zeros(vec![1, 1]);
    let cfg = SolverConfig {
        alpha: 1.0,
        epsilon: 1e-15,
        l_max: 200,
    };
    let (z, _) = broyden_solve(|z| core_eval(&TanhScalar, &ps, z, &xt)?.sub(z), &z0, &cfg)?;
    let zs = z.data()[0];
    let s = 1.0 - zs * zs;
    let expected_w = zs * s / (1.0 - w * s);
    let expected_x = s / (1.0 - w * s);
    let g = backward_implicit_with(
        &TanhScalar,
        &ps,
        &z,
        &xt,
        &Tensor::matrix(1, 1, vec![1.0])?,
        &SolverConfig::tight(),
        Fault::None,
    )?;
    let err_w = (g.params.get("s.w")?.data()[0] - expected_w).abs();
    let err_x = (g.x.data()[0] - expected_x).abs();
    let err = err_w.max(err_x);
    rep.record(err < 1e-8, err, || format!("w={w} x={x}"));
    Ok(rep)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn flatten(ps: &ParamSet) -> Vec<f64> {
    ps.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
}

/// Cosine similarity between Jacobian-free and implicit parameter gradients.
pub fn jfb_descent_suite(instances: usize, seed: u64, fraction: f64) -> Result<SuiteReport> {
    let required = (fraction * instances as f64).ceil() as usize;
    let mut rep = SuiteReport::new("JFB descent direction", required);
    for i in 0..instances as u64 {
        let inst = Instance::random(seed + i, 16, 12)?;
        let mut rng = ChaCha8Rng::seed_from_u64(inst.seed.wrapping_mul(131).wrapping_add(3));
        let c = Tensor::randn(inst.x.shape().to_vec(), &mut rng);
        let z = inst.solve(&inst.params, &SolverConfig::tight())?;
        let jfb = backward_jfb(&inst.core, &inst.params, &z, &inst.x, &c)?;
        let imp = backward_implicit_with(&inst.core, &inst.params, &z, &inst.x, &c, &SolverConfig::tight(), Fault::None)?;
        let cos = cosine(&flatten(&jfb.params), &flatten(&imp.params));
        // Error measure: how far below the threshold the cosine falls.
        rep.record(cos > 0.0, -cos, || format!("{} cos={cos:.4}", inst.describe()));
    }
    Ok(rep)
}

/// Random symmetric positive-definite `A` with eigenvalues in `[0.5, 2]`.
pub fn random_spd<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let g = Tensor::randn(vec![n, n], rng);
    let q = nalgebra::DMatrix::from_row_slice(n, n, g.data()).qr().q();
    let lambda: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).map(|k| q[(i, k)] * lambda[k] * q[(j, k)]).sum())
                .collect()
        })
        .collect()
}

/// Broyden on `g(z) = A z − b` with SPD `A`: residual below `1e-9` within
/// `2n` Broyden steps, i.e. `2n + 1` evaluations counting the one at `z0`.
pub fn broyden_affine_suite(instances: usize, seed: u64, fraction: f64) -> Result<SuiteReport> {
    let required = (fraction * instances as f64).ceil() as usize;
    let mut rep = SuiteReport::new("Broyden on affine systems", required);
    for i in 0..instances as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + i);
        let n = rng.random_range(1..=32);
        let a = random_spd(n, &mut rng);
        let b = Tensor::randn(vec![n], &mut rng);
        let cfg = SolverConfig {
            alpha: 1.0,
            epsilon: 1e-9,
            l_max: 2 * n + 1,
        };
        let g = |z: &Tensor| -> Result<Tensor> {
            let az: Vec<f64> = a.iter().map(|row| row.iter().zip(z.data()).map(|(x, y)| x * y).sum()).collect();
            Tensor::vector(az).sub(&b)
        };
        let res = match broyden_solve(g, &Tensor::zeros(vec![n]), &cfg) {
            Ok((_, trace)) => trace.min_residual(),
            Err(_) => f64::INFINITY,
        };
        rep.record(res < 1e-9, res, || format!("seed={} n={n}", seed + i));
    }
    Ok(rep)
}

/// Implicit backward's matrix-free solution against a dense solve of
/// `(I − J_fᵀ) y = u` with the Jacobian assembled column by column.
pub fn dense_oracle_suite(instances: usize, seed: u64, dim: usize, fault: Fault) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("implicit backward vs dense solve", instances);
    let width = (dim.max(2) / 2) * 2;
    for i in 0..instances as u64 {
        let inst = Instance::with_shape(seed + i, width, 1.max(dim / width))?;
        let z = inst.solve(&inst.params, &SolverConfig::tight())?;
        let n = z.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + i);
        let u = Tensor::randn(z.shape().to_vec(), &mut rng);
        // Rows of J_f by reverse mode on unit seeds.
        let mut jf = vec![vec![0.0; n]; n];
        for r in 0..n {
            let mut e = Tensor::zeros(z.shape().to_vec());
            e.data_mut()[r] = 1.0;
            let row = crate::tape::vjp(|zv| inst.core.apply_const(&inst.params, zv, &inst.x), &z, &e)?;
            jf[r].copy_from_slice(row.data());
        }
        let m: Vec<Vec<f64>> = (0..n)
            .map(|r| (0..n).map(|c| f64::from(u8::from(r == c)) - jf[c][r]).collect())
            .collect();
        let y_dense = dense_solve(&m, u.data())?;
        let g_dense = backward_jfb(&inst.core, &inst.params, &z, &inst.x, &Tensor::new(z.shape().to_vec(), y_dense)?)?;
        let g = backward_implicit_with(&inst.core, &inst.params, &z, &inst.x, &u, &SolverConfig::tight(), fault)?;
        let err = relative_error(&flatten(&g.params), &flatten(&g_dense.params));
        rep.record(err < 1e-6, err, || inst.describe());
    }
    Ok(rep)
}

impl FThetaCore {
    fn apply_const<'t>(&self, params: &ParamSet, z: Var<'t>, x: &Tensor) -> Result<Var<'t>> {
        let tape = z.tape();
        let b = Bound::constants(tape, params);
        self.apply(&b, z, tape.constant(x.clone()))
    }
}
