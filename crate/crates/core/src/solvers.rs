//! Fixed-point and root-finding solvers.
//!
//! All solvers count function evaluations against [`SolverConfig::l_max`]
//! and record one residual norm per evaluation in a [`SolverTrace`]. The
//! residual norm is the global L2 norm over every element of the state and
//! the tolerance is absolute.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Residual growth, relative to the first residual, treated as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// Broyden updates whose denominator `|dzᵀ B dg|` is below this multiple
/// of `‖dz‖ · ‖B dg‖` are skipped.
pub const BROYDEN_DENOMINATOR_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    /// Step size of the quasi-Newton update.
    pub alpha: f64,
    /// Absolute tolerance on the residual norm.
    pub epsilon: f64,
    /// Maximum number of function evaluations.
    pub l_max: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            epsilon: 1e-3,
            l_max: 6,
        }
    }
}

impl SolverConfig {
    pub fn new(alpha: f64, epsilon: f64, l_max: usize) -> Result<Self> {
        let c = Self { alpha, epsilon, l_max };
        c.validate()?;
        Ok(c)
    }

    /// Tight settings used wherever a test needs a true equilibrium.
    pub fn tight() -> Self {
        Self {
            alpha: 1.0,
            epsilon: 1e-10,
            l_max: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::SolverConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::SolverConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.l_max < 1 {
            return Err(Error::SolverConfig("l_max must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolverTrace {
    /// One residual norm per function evaluation.
    pub residual_norms: Vec<f64>,
    /// Function evaluations performed.
    pub l_stop: usize,
    pub converged: bool,
    /// Evaluation numbers (1-based) after which a Broyden update was skipped.
    pub skipped_updates: Vec<usize>,
    /// Index into `residual_norms` of the returned iterate.
    pub returned: usize,
}

impl SolverTrace {
    fn push(&mut self, r: f64) {
        self.residual_norms.push(r);
        self.l_stop = self.residual_norms.len();
    }

    /// Residual attributed to the returned iterate.
    pub fn final_residual(&self) -> f64 {
        self.residual_norms.get(self.returned).copied().unwrap_or(f64::NAN)
    }

    pub fn min_residual(&self) -> f64 {
        self.residual_norms.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn diverged(r: f64, r0: f64) -> bool {
    !r.is_finite() || r > DIVERGENCE_FACTOR * r0
}

/// Plain iteration `z ← f(z)`.
///
/// Returns `z^[L]` after `L = min(l_max, first step whose residual
/// ‖f(z) − z‖ is within tolerance)` applications of `f`.
pub fn fixed_point_iterate<F>(mut f: F, z0: &Tensor, config: &SolverConfig) -> Result<(Tensor, SolverTrace)>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    config.validate()?;
    let mut trace = SolverTrace::default();
    let mut z = z0.clone();
    let mut r0 = None;
    for _ in 0..config.l_max {
        let fz = f(&z)?;
        let r = fz.sub(&z)?.norm_l2();
        trace.push(r);
        z = fz;
        let first = *r0.get_or_insert(r);
        if r <= config.epsilon {
            trace.converged = true;
            break;
        }
        if diverged(r, first) {
            trace.returned = trace.l_stop - 1;
            return Err(Error::Diverged { trace });
        }
    }
    trace.returned = trace.l_stop - 1;
    Ok((z, trace))
}

/// Low-rank inverse-Jacobian estimate `B = −I + Σ uₖ vₖᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct BroydenState {
    dim: usize,
    us: Vec<Vec<f64>>,
    vs: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl BroydenState {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            us: Vec::new(),
            vs: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.us.len()
    }

    /// `B · x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = x.iter().map(|v| -v).collect();
        for (u, v) in self.us.iter().zip(&self.vs) {
            let c = dot(v, x);
            for (o, ui) in out.iter_mut().zip(u) {
                *o += c * ui;
            }
        }
        out
    }

    /// `Bᵀ · x`.
    pub fn apply_t(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = x.iter().map(|v| -v).collect();
        for (u, v) in self.us.iter().zip(&self.vs) {
            let c = dot(u, x);
            for (o, vi) in out.iter_mut().zip(v) {
                *o += c * vi;
            }
        }
        out
    }

    /// Good-Broyden rank-one update from a step `dz` and the matching change
    /// in residual `dg`. Returns `false` (and leaves `B` alone) when the
    /// update denominator `dzᵀ B dg` is negligible relative to
    /// `‖dz‖ · ‖B dg‖`.
    pub fn update(&mut self, dz: &[f64], dg: &[f64]) -> bool {
        let b_dg = self.apply(dg);
        let denom = dot(dz, &b_dg);
        let scale = dot(dz, dz).sqrt() * dot(&b_dg, &b_dg).sqrt();
        if denom.abs() <= BROYDEN_DENOMINATOR_FLOOR * scale || !denom.is_finite() {
            return false;
        }
        let u: Vec<f64> = dz.iter().zip(&b_dg).map(|(a, b)| (a - b) / denom).collect();
        let v = self.apply_t(dz);
        self.us.push(u);
        self.vs.push(v);
        true
    }

    /// Densely accumulated `B`, row-major. Intended for small dimensions.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim;
        let mut b = vec![vec![0.0; n]; n];
        for (i, row) in b.iter_mut().enumerate() {
            row[i] = -1.0;
        }
        for (u, v) in self.us.iter().zip(&self.vs) {
            for i in 0..n {
                for j in 0..n {
                    b[i][j] += u[i] * v[j];
                }
            }
        }
        b
    }
}

/// Broyden's method for `g(z) = 0`: `z ← z − α B g(z)` with good-Broyden
/// rank-one updates of `B`, starting from `B = −I`.
///
/// Every evaluation of `g`, including the one at `z0`, counts toward
/// `l_max`. The iterate with the smallest residual seen is returned.
pub fn broyden_solve<G>(mut g: G, z0: &Tensor, config: &SolverConfig) -> Result<(Tensor, SolverTrace)>
where
    G: FnMut(&Tensor) -> Result<Tensor>,
{
    config.validate()?;
    let shape = z0.shape().to_vec();
    let mut trace = SolverTrace::default();
    let mut z = z0.data().to_vec();
    let gz = g(z0)?;
    if gz.shape() != z0.shape() {
        return Err(Error::shape("broyden_solve", z0.shape(), gz.shape()));
    }
    let r0 = gz.norm_l2();
    trace.push(r0);
    if !r0.is_finite() {
        return Err(Error::Diverged { trace });
    }
    let mut best = (z.clone(), r0);
    if r0 <= config.epsilon {
        trace.converged = true;
        return Ok((z0.clone(), trace));
    }
    let mut state = BroydenState::new(z.len());
    let mut gz = gz.into_data();
    while trace.l_stop < config.l_max {
        let step = state.apply(&gz);
        let dz: Vec<f64> = step.iter().map(|s| -config.alpha * s).collect();
        let z_new: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + b).collect();
        let g_new = g(&Tensor::from_parts(shape.clone(), z_new.clone()))?;
        if g_new.shape() != shape.as_slice() {
            return Err(Error::shape("broyden_solve", &shape, g_new.shape()));
        }
        let g_new = g_new.into_data();
        let r = dot(&g_new, &g_new).sqrt();
        trace.push(r);
        if diverged(r, r0) {
            trace.returned = trace.l_stop - 1;
            return Err(Error::Diverged { trace });
        }
        if r < best.1 {
            best = (z_new.clone(), r);
            trace.returned = trace.l_stop - 1;
        }
        if r <= config.epsilon {
            trace.converged = true;
            break;
        }
        let dg: Vec<f64> = g_new.iter().zip(&gz).map(|(a, b)| a - b).collect();
        if !state.update(&dz, &dg) {
            trace.skipped_updates.push(trace.l_stop);
        }
        z = z_new;
        gz = g_new;
    }
    Ok((Tensor::from_parts(shape, best.0), trace))
}

/// Solve `Aᵀ y + rhs = 0` given only the map `v ↦ Aᵀ v`.
///
/// Runs [`broyden_solve`] on the affine residual `y ↦ Aᵀ y + rhs` from
/// `y = 0`, to tolerance `ε · max(1, ‖rhs‖)`.
pub fn linear_solve_matfree<F>(mut apply_at: F, rhs: &Tensor, config: &SolverConfig) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let tol = config.epsilon * rhs.norm_l2().max(1.0);
    let inner = SolverConfig {
        epsilon: tol,
        ..*config
    };
    let y0 = Tensor::zeros(rhs.shape().to_vec());
    let (y, trace) = match broyden_solve(|y| apply_at(y)?.add(rhs), &y0, &inner) {
        Ok(v) => v,
        Err(Error::Diverged { trace }) => {
            return Err(Error::LinearSolveNotConverged {
                residual: trace.min_residual(),
                evaluations: trace.l_stop,
            })
        }
        Err(e) => return Err(e),
    };
    if !trace.converged {
        return Err(Error::LinearSolveNotConverged {
            residual: trace.final_residual(),
            evaluations: trace.l_stop,
        });
    }
    Ok(y)
}

/// Largest deviation from additivity, `‖A(u+v) − A(u) − A(v)‖∞`, over
/// `probes` random pairs.
pub fn check_linearity<F, R>(mut apply: F, shape: &[usize], probes: usize, rng: &mut R) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
    R: Rng + ?Sized,
{
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let u = Tensor::randn(shape.to_vec(), rng);
        let v = Tensor::randn(shape.to_vec(), rng);
        let lhs = apply(&u.add(&v)?)?;
        let rhs = apply(&u)?.add(&apply(&v)?)?;
        worst = worst.max(lhs.max_abs_diff(&rhs)?);
    }
    Ok(worst)
}

/// Dense LU solve `A x = b` used as an independent reference at small sizes.
pub fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    if a.len() != n || a.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("dense_solve", "matrix must be square and match rhs"));
    }
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[i][j]);
    let rhs = nalgebra::DVector::from_column_slice(b);
    m.lu()
        .solve(&rhs)
        .map(|x| x.as_slice().to_vec())
        .ok_or_else(|| Error::invalid("dense_solve", "singular matrix"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Tensor {
        Tensor::vector(vec![v])
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::new(0.0, 1e-3, 6).is_err());
        assert!(SolverConfig::new(1.0, 0.0, 6).is_err());
        assert!(SolverConfig::new(1.0, 1e-3, 0).is_err());
        assert!(SolverConfig::new(1.0, 1e-3, 1).is_ok());
    }

    #[test]
    fn affine_contraction_fixed_point() {
        let cfg = SolverConfig::new(1.0, 1e-9, 30).unwrap();
        let (z, trace) = fixed_point_iterate(|z| Ok(z.map(|v| 0.5 * v + 1.0)), &scalar(0.0), &cfg).unwrap();
        // 30 halvings from residual 1 fall to ~1.9e-9 > 1e-9, so l_max is hit.
        assert_eq!(trace.l_stop, 30);
        assert!((z.data()[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn identity_converges_immediately() {
        let cfg = SolverConfig::new(1.0, 1e-9, 30).unwrap();
        let z0 = Tensor::vector(vec![0.3, -1.0]);
        let (z, trace) = fixed_point_iterate(|z| Ok(z.clone()), &z0, &cfg).unwrap();
        assert_eq!(trace.l_stop, 1);
        assert!(trace.converged);
        assert_eq!(trace.residual_norms, vec![0.0]);
        assert_eq!(z, z0);
    }

    #[test]
    fn fixed_point_divergence_carries_trace() {
        let cfg = SolverConfig::new(1.0, 1e-9, 100).unwrap();
        let err = fixed_point_iterate(|z| Ok(z.map(|v| 3.0 * v + 1.0)), &scalar(0.0), &cfg).unwrap_err();
        match err {
            Error::Diverged { trace } => assert!(trace.l_stop > 1 && trace.l_stop < 100),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn broyden_exact_for_negative_identity_jacobian() {
        // g(z) = b − z has Jacobian −I, which is exactly the initial B.
        let b = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let cfg = SolverConfig::new(1.0, 1e-12, 10).unwrap();
        let bb = b.clone();
        let (z, trace) = broyden_solve(move |z| bb.sub(z), &Tensor::zeros(vec![3]), &cfg).unwrap();
        assert_eq!(z, b);
        assert!(trace.converged);
        // one evaluation at z0, one after the single update step
        assert_eq!(trace.l_stop, 2);
    }

    #[test]
    fn broyden_positive_identity_jacobian() {
        let b = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let cfg = SolverConfig::new(1.0, 1e-10, 7).unwrap();
        let bb = b.clone();
        let (z, trace) = broyden_solve(move |z| z.sub(&bb), &Tensor::zeros(vec![3]), &cfg).unwrap();
        assert!(trace.converged, "{trace:?}");
        assert!(z.max_abs_diff(&b).unwrap() < 1e-9);
    }

    #[test]
    fn broyden_returns_best_iterate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let a: Vec<f64> = (0..n * n)
            .map(|i| if i % (n + 1) == 0 { 2.0 } else { rng.random_range(-0.4..0.4) })
            .collect();
        let a = Tensor::matrix(n, n, a).unwrap();
        let b = Tensor::randn(vec![n, 1], &mut rng);
        let cfg = SolverConfig::new(1.0, 1e-14, 5).unwrap();
        let (z, trace) = broyden_solve(|z| a.matmul(z)?.sub(&b), &Tensor::zeros(vec![n, 1]), &cfg).unwrap();
        assert_eq!(trace.final_residual(), trace.min_residual());
        let r = a.matmul(&z).unwrap().sub(&b).unwrap().norm_l2();
        assert!((r - trace.min_residual()).abs() < 1e-12);
        assert!(trace.l_stop <= 5);
    }

    #[test]
    fn low_rank_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 16;
        let mut state = BroydenState::new(n);
        let mut dense = state.dense();
        for _ in 0..8 {
            let dz: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dg: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            // dense good-Broyden update
            let b_dg: Vec<f64> = (0..n).map(|i| dot(&dense[i], &dg)).collect();
            let denom = dot(&dz, &b_dg);
            let dz_b: Vec<f64> = (0..n).map(|j| (0..n).map(|i| dz[i] * dense[i][j]).sum()).collect();
            for i in 0..n {
                for j in 0..n {
                    dense[i][j] += (dz[i] - b_dg[i]) * dz_b[j] / denom;
                }
            }
            assert!(state.update(&dz, &dg));
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fact = state.apply(&x);
            for i in 0..n {
                assert!((fact[i] - dot(&dense[i], &x)).abs() < 1e-9);
            }
            let acc = state.dense();
            for i in 0..n {
                for j in 0..n {
                    assert!((acc[i][j] - dense[i][j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn degenerate_update_is_skipped() {
        let mut state = BroydenState::new(2);
        assert!(!state.update(&[0.0, 0.0], &[1.0, 1.0]));
        assert_eq!(state.rank(), 0);
    }

    #[test]
    fn matfree_identity_and_diagonal() {
        let cfg = SolverConfig::new(1.0, 1e-12, 50).unwrap();
        let rhs = Tensor::vector(vec![1.0, -3.0, 2.0]);
        let y = linear_solve_matfree(|v| Ok(v.clone()), &rhs, &cfg).unwrap();
        assert!(y.max_abs_diff(&rhs.scale(-1.0)).unwrap() < 1e-10);

        let rhs = Tensor::vector(vec![2.0, 4.0]);
        let y = linear_solve_matfree(
            |v| Ok(Tensor::vector(vec![2.0 * v.data()[0], 4.0 * v.data()[1]])),
            &rhs,
            &cfg,
        )
        .unwrap();
        assert!(y.max_abs_diff(&Tensor::vector(vec![-1.0, -1.0])).unwrap() < 1e-10);
    }

    #[test]
    fn matfree_reports_nonconvergence() {
        let cfg = SolverConfig::new(1.0, 1e-12, 2).unwrap();
        let rhs = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let err = linear_solve_matfree(|v| Ok(v.scale(3.0)), &rhs, &cfg).unwrap_err();
        assert!(matches!(err, Error::LinearSolveNotConverged { evaluations: 2, .. }));
    }

    #[test]
    fn linearity_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = check_linearity(|v| Ok(v.scale(2.0)), &[4], 3, &mut rng).unwrap();
        assert!(lin < 1e-12);
        let nonlin = check_linearity(|v| Ok(v.map(f64::tanh)), &[4], 3, &mut rng).unwrap();
        assert!(nonlin > 1e-3);
    }

    #[test]
    fn dense_solve_small() {
        let x = dense_solve(&[vec![2.0, 0.0], vec![0.0, 4.0]], &[2.0, 4.0]).unwrap();
        assert_eq!(x, vec![1.0, 1.0]);
    }
}
