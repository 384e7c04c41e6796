//! Implicit Euler time stepping with Newton iteration and consistent
//! initialization for the index-2 network differential-algebraic system.
//!
//! One fixed step size, plain Newton with the analytic Jacobian (an optional
//! Armijo backtracking fallback is available behind a flag), max-norm
//! residual tolerance, and snapshots stored at every accepted step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linsolve::{self, LinearBackend};
use crate::network::{EffortMaps, NetworkSystem, NetworkUnknowns};

/// Time-integration and Newton parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Time step.
    pub tau: f64,
    /// Final time.
    pub t_f: f64,
    /// Newton tolerance on the max-norm of the full residual.
    pub newton_tol: f64,
    /// Maximum Newton iterations per step.
    pub newton_max_iter: usize,
    /// Linear-solver backend.
    pub backend: LinearBackend,
    /// Enables Armijo backtracking on the Newton corrections (off by
    /// default: plain Newton).
    pub line_search: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tau: 0.1,
            t_f: 30.0,
            newton_tol: 1e-10,
            newton_max_iter: 20,
            backend: LinearBackend::Auto,
            line_search: false,
        }
    }
}

impl SolverConfig {
    /// Validates the configuration.
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("time step must be positive, got {}", self.tau)));
        }
        if !(self.t_f >= 0.0) {
            return Err(Error::InvalidConfig(format!("final time must be non-negative, got {}", self.t_f)));
        }
        if !(self.newton_tol > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "Newton tolerance must be positive, got {}",
                self.newton_tol
            )));
        }
        if self.newton_max_iter == 0 {
            return Err(Error::InvalidConfig("Newton iteration cap must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of time steps (`t_f/tau`, rounded to the nearest integer).
    #[must_use]
    pub fn n_steps(&self) -> usize {
        (self.t_f / self.tau).round() as usize
    }
}

/// A nonlinear implicit system `r(y, ẏ, t) = 0` that the Euler/Newton loop
/// can integrate. Implemented by the full-order network and by reduced
/// models.
pub trait ImplicitSystem {
    /// Number of unknowns.
    fn dim(&self) -> usize;

    /// Residual and (optionally) Jacobian triplets of
    /// `∂r/∂y + shift·∂r/∂ẏ` at `(y, ẏ, t)`.
    fn assemble_system(
        &self,
        y: &DVector<f64>,
        ydot: &DVector<f64>,
        t: f64,
        shift: f64,
        want_jac: bool,
    ) -> Result<(DVector<f64>, Vec<(usize, usize, f64)>)>;
}

impl ImplicitSystem for NetworkSystem {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn assemble_system(
        &self,
        y: &DVector<f64>,
        ydot: &DVector<f64>,
        t: f64,
        shift: f64,
        want_jac: bool,
    ) -> Result<(DVector<f64>, Vec<(usize, usize, f64)>)> {
        let asm = self.assemble(y, ydot, t, shift, want_jac, &EffortMaps::identity(), None)?;
        Ok((asm.res, asm.jac))
    }
}

/// Trajectory of a simulation: one state column per accepted step, including
/// the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    /// Snapshot times `t_0 … t_{n_t}`.
    pub times: Vec<f64>,
    /// State matrix, one column per snapshot.
    pub states: DMatrix<f64>,
    /// Newton iteration count of each accepted step (length `n_t`).
    pub newton_iters: Vec<usize>,
}

impl SnapshotSet {
    /// Number of snapshot columns.
    #[must_use]
    pub fn n_snapshots(&self) -> usize {
        self.times.len()
    }

    /// The last state column.
    #[must_use]
    pub fn final_state(&self) -> DVector<f64> {
        self.states.column(self.states.ncols() - 1).into_owned()
    }
}

/// Builds a full unknown vector from initial state fields: copies the fields,
/// fills the multipliers with their closed forms, then polishes them with a
/// Gauss–Newton least-squares sweep over the algebraic rows.
///
/// The algebraic rows can over-determine the multipliers when the initial
/// fields are not themselves consistent (the system has differentiation
/// index two); the least-squares polish then yields the best consistent
/// guess, and the first implicit step enforces the constraints exactly.
pub fn consistent_init(
    sys: &NetworkSystem,
    states: &[crate::pipe::PipeState],
    t0: f64,
) -> Result<NetworkUnknowns> {
    if states.len() != sys.n_pipes() {
        return Err(Error::DimensionMismatch(format!(
            "got initial states for {} pipes, network has {}",
            states.len(),
            sys.n_pipes()
        )));
    }
    for (z, mesh) in states.iter().zip(&sys.meshes) {
        z.check_valid(mesh)?;
    }
    let mut y = DVector::zeros(sys.layout.dim);
    sys.merge_state(states, &mut y);
    sys.fill_closed_form_multipliers(&mut y)?;
    polish_multipliers(sys, &mut y, t0)?;
    Ok(y)
}

/// Gauss–Newton least squares of the algebraic rows over the multiplier
/// unknowns (state fields held fixed).
fn polish_multipliers(sys: &NetworkSystem, y: &mut DVector<f64>, t0: f64) -> Result<()> {
    let l = &sys.layout;
    let base = l.base_lm;
    let n_alg = l.dim - base;
    if n_alg == 0 {
        return Ok(());
    }
    let ydot = DVector::zeros(l.dim);
    for _ in 0..10 {
        let (res, jac) = sys.assemble_system(y, &ydot, t0, 0.0, true)?;
        let mut g = DMatrix::zeros(n_alg, n_alg);
        for &(i, j, v) in &jac {
            if i >= base && j >= base {
                g[(i - base, j - base)] += v;
            }
        }
        if g.amax() == 0.0 {
            // No multiplier enters any algebraic row (e.g. a single pipe
            // with prescribed flows); the closed forms are final.
            return Ok(());
        }
        let r_alg = DVector::from_fn(n_alg, |i, _| res[base + i]);
        let svd = g.svd(true, true);
        let delta = svd
            .solve(&r_alg, 1e-10 * svd.singular_values.max())
            .map_err(|e| Error::InconsistentInitialData(e.to_string()))?;
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InconsistentInitialData(
                "multiplier polish produced non-finite values".into(),
            ));
        }
        for i in 0..n_alg {
            y[base + i] -= delta[i];
        }
        if delta.amax() < 1e-12 {
            break;
        }
    }
    Ok(())
}

/// Recursion depth of the sub-step warm-start fallback: a failing step is
/// retried with a predictor obtained from two half steps, at most this many
/// halvings deep.
const MAX_SUBSTEP_DEPTH: usize = 5;

/// One implicit Euler step: Newton on `r(y, (y − y_k)/τ, t_{k+1}) = 0`.
/// Returns the new state and the number of Newton iterations taken.
///
/// Reduced models can put the full step outside the Newton basin even
/// though the step equation has a solution (their corrections act globally,
/// so boundary traces react stiffly). When the plain iteration fails, the
/// step is retried from a predictor built by two recursive half steps; the
/// equation finally solved is still the unmodified full-step one, so the
/// discrete trajectory is independent of whether the fallback fired.
pub fn step<S: ImplicitSystem>(
    sys: &S,
    y_k: &DVector<f64>,
    t_next: f64,
    config: &SolverConfig,
) -> Result<(DVector<f64>, usize)> {
    config.validate()?;
    step_recursive(sys, y_k, t_next, config.tau, config, MAX_SUBSTEP_DEPTH)
}

/// Newton solve of one implicit Euler step with an explicit predictor and
/// step size (the step size may differ from `config.tau` inside the
/// sub-step fallback).
///
/// The convergence test applies `newton_tol` to the increment form of the
/// step equation, `E(z)(y − y_k) − τ((J−R)ẽ + Bu) = 0`, i.e. to τ times
/// the assembled rate-form residual. The rate form divides the state
/// difference by τ, so its round-off floor grows like 1/τ and a fixed
/// unscaled threshold becomes unreachable for small (sub-)steps; the
/// increment form keeps the test meaningful at every step size.
fn newton_solve<S: ImplicitSystem>(
    sys: &S,
    y_k: &DVector<f64>,
    guess: DVector<f64>,
    t_next: f64,
    tau: f64,
    config: &SolverConfig,
) -> Result<(DVector<f64>, usize)> {
    let shift = 1.0 / tau;
    let mut y = guess;
    let mut ydot = DVector::zeros(sys.dim());
    let mut res_norm = f64::INFINITY;
    // Last committed update `y = base − α·δ`, kept so an iterate that lands
    // outside the physical region (positive density/energy) can be walked
    // back toward the previous, feasible iterate instead of aborting.
    let mut last_update: Option<(DVector<f64>, DVector<f64>, f64)> = None;
    let mut backtracks = 0usize;
    let mut it = 0usize;
    loop {
        ydot.copy_from(&y);
        ydot -= y_k;
        ydot /= tau;
        let want_jac = it < config.newton_max_iter;
        let (res, jac) = match sys.assemble_system(&y, &ydot, t_next, shift, want_jac) {
            Ok(pair) => pair,
            Err(Error::NonPhysicalState(_)) if last_update.is_some() && backtracks < 60 => {
                let (base, delta, alpha) = last_update.take().unwrap();
                let alpha = alpha * 0.5;
                if alpha < 1e-12 {
                    return Err(Error::NewtonDivergence {
                        t: t_next,
                        residual: res_norm,
                        iterations: it,
                    });
                }
                y = &base - alpha * &delta;
                last_update = Some((base, delta, alpha));
                backtracks += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        res_norm = res.amax();
        if res_norm * tau <= config.newton_tol {
            return Ok((y, it));
        }
        if it == config.newton_max_iter {
            break;
        }
        let delta = linsolve::solve_triplets(sys.dim(), &jac, &res, config.backend)?;
        if config.line_search {
            // Armijo backtracking on the residual norm; if no tested step
            // qualifies, the shortest feasible one is taken anyway so the
            // iteration cannot stall in place.
            let mut alpha = 1.0;
            let mut moved = false;
            for _ in 0..30 {
                let y_trial = &y - alpha * &delta;
                let mut yd = y_trial.clone();
                yd -= y_k;
                yd /= tau;
                if let Ok((r, _)) = sys.assemble_system(&y_trial, &yd, t_next, shift, false) {
                    if r.amax() <= (1.0 - 1e-4 * alpha) * res_norm {
                        last_update = Some((y.clone(), delta.clone(), alpha));
                        y = y_trial;
                        moved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !moved {
                last_update = Some((y.clone(), delta.clone(), alpha));
                y -= alpha * &delta;
            }
        } else {
            last_update = Some((y.clone(), delta.clone(), 1.0));
            y -= &delta;
        }
        it += 1;
    }
    Err(Error::NewtonDivergence {
        t: t_next,
        residual: res_norm,
        iterations: config.newton_max_iter,
    })
}

/// Full step with the sub-step warm-start fallback (see [`step`]).
fn step_recursive<S: ImplicitSystem>(
    sys: &S,
    y_k: &DVector<f64>,
    t_next: f64,
    tau: f64,
    config: &SolverConfig,
    depth: usize,
) -> Result<(DVector<f64>, usize)> {
    let plain = newton_solve(sys, y_k, y_k.clone(), t_next, tau, config);
    let recoverable = matches!(
        plain,
        Err(Error::NewtonDivergence { .. })
            | Err(Error::NonPhysicalState(_))
            | Err(Error::LinearSolve(_))
    );
    if !recoverable || depth == 0 {
        return plain;
    }
    // Predictor: two half steps to t_next, each itself retried recursively.
    let half = tau / 2.0;
    let (y_mid, it_a) = step_recursive(sys, y_k, t_next - half, half, config, depth - 1)?;
    let (y_pred, it_b) = step_recursive(sys, &y_mid, t_next, half, config, depth - 1)?;
    // Re-solve the unmodified full-step equation from the predictor so the
    // trajectory is usually independent of whether the fallback fired. If
    // even the warm start fails, the full-step equation may have no root in
    // the physical region; the (more accurate) sub-stepped state is accepted.
    match newton_solve(sys, y_k, y_pred.clone(), t_next, tau, config) {
        Ok((y, it_c)) => Ok((y, it_a + it_b + it_c)),
        Err(Error::NewtonDivergence { .. })
        | Err(Error::NonPhysicalState(_))
        | Err(Error::LinearSolve(_)) => Ok((y_pred, it_a + it_b)),
        Err(e) => Err(e),
    }
}

/// Integrates from `y0` at `t = 0` to `t_f`, storing every accepted step.
pub fn simulate<S: ImplicitSystem>(
    sys: &S,
    y0: &DVector<f64>,
    config: &SolverConfig,
) -> Result<SnapshotSet> {
    config.validate()?;
    let n_t = config.n_steps();
    let dim = sys.dim();
    if y0.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "initial state length {} does not match system dimension {dim}",
            y0.len()
        )));
    }
    let mut states = DMatrix::zeros(dim, n_t + 1);
    let mut times = Vec::with_capacity(n_t + 1);
    let mut newton_iters = Vec::with_capacity(n_t);
    states.column_mut(0).copy_from(y0);
    times.push(0.0);
    let mut y = y0.clone();
    for k in 0..n_t {
        let t_next = (k + 1) as f64 * config.tau;
        let (y_next, iters) = step(sys, &y, t_next, config)?;
        states.column_mut(k + 1).copy_from(&y_next);
        times.push(t_next);
        newton_iters.push(iters);
        y = y_next;
    }
    Ok(SnapshotSet { times, states, newton_iters })
}
