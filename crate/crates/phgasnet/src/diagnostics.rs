//! Trajectory, structure, and balance diagnostics.
//!
//! All state comparisons use the energy-consistent weighted norm built from
//! the area-weighted mass matrices of the three state blocks (density, mass
//! flux, internal energy), so errors are mesh- and unit-independent. The
//! structural checks certify what the construction promises: the
//! interconnection operator stays skew-symmetric, the dissipation operator
//! positive semi-definite, and the storage pairing reproduces the gradient
//! of the Hamiltonian (full order exactly; reduced order after projection
//! onto the reduced test space). The balance checks track the telescoping
//! mass identity and the power budget step by step.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mor::{check_compatibility, space_ops, CompatibilityReport, ReducedModel, ReductionBasis};
use crate::network::{EffortMaps, NetworkSystem, QuadratureRule};
use crate::solver::SnapshotSet;

/// Format tag written as the first comment line of every balance CSV.
pub const CSV_FORMAT: &str = "phgasnet-balance-v1";

/// Weighted norm of the state block (density/flux/energy) of one unknown
/// vector; multipliers and promoted boundary flows are ignored.
pub fn state_norm(sys: &NetworkSystem, y: &DVector<f64>) -> f64 {
    let l = &sys.layout;
    let ops = space_ops(sys, &(0..sys.n_pipes()).collect::<Vec<_>>());
    let rho = y.rows(0, l.n_rho).into_owned();
    let m = y.rows(l.base_m, l.n_node).into_owned();
    let e = y.rows(l.base_e, l.n_node).into_owned();
    let mut s = 0.0;
    for j in 0..l.n_rho {
        s += ops.m_rho_diag[j] * rho[j] * rho[j];
    }
    s += (m.transpose() * &ops.m_m * &m)[(0, 0)];
    s += (e.transpose() * &ops.m_e * &e)[(0, 0)];
    s.max(0.0).sqrt()
}

/// Per-step relative state errors between two trajectories and their
/// maximum over the run.
#[derive(Debug, Clone)]
pub struct TrajectoryError {
    /// Relative weighted state error at each shared time step.
    pub per_step: Vec<f64>,
    /// Maximum over the run.
    pub max: f64,
}

/// Relative trajectory error: at every step, the weighted norm of the
/// state-block difference over the weighted norm of the reference state,
/// maximized over the run. Both trajectories must share the time grid.
pub fn trajectory_error(
    sys: &NetworkSystem,
    reference: &SnapshotSet,
    approx: &SnapshotSet,
) -> Result<TrajectoryError> {
    if reference.times.len() != approx.times.len() {
        return Err(Error::DimensionMismatch(format!(
            "trajectories have {} and {} steps",
            reference.times.len(),
            approx.times.len()
        )));
    }
    let mut per_step = Vec::with_capacity(reference.times.len());
    for k in 0..reference.times.len() {
        let r = reference.states.column(k).into_owned();
        let a = approx.states.column(k).into_owned();
        let denom = state_norm(sys, &r).max(f64::MIN_POSITIVE);
        per_step.push(state_norm(sys, &(&r - &a)) / denom);
    }
    let max = per_step.iter().cloned().fold(0.0, f64::max);
    Ok(TrajectoryError { per_step, max })
}

/// Best-approximation error of the reduced space: the reference trajectory
/// against its own projection/lift through the reduced model. Lower-bounds
/// the trajectory error of any reduced run in the same space.
pub fn projection_error(rom: &ReducedModel<'_>, reference: &SnapshotSet) -> Result<TrajectoryError> {
    let mut projected = reference.clone();
    for k in 0..reference.times.len() {
        let y = reference.states.column(k).into_owned();
        let lifted = rom.lift_state(&rom.project_state(&y));
        projected.states.column_mut(k).copy_from(&lifted);
    }
    trajectory_error(rom.sys, reference, &projected)
}

/// Defect of the storage/gradient identity `E(z)ᵀẽ = ∇H(z)` at one state.
/// With identity effort maps the identity is exact up to round-off; with
/// reduced effort maps it holds after multiplying by the reduced test
/// space, which `test_space` supplies (pass the lift matrix of the reduced
/// model). The rule, when given, weighs both sides consistently.
pub fn ph_condition_defect(
    sys: &NetworkSystem,
    y: &DVector<f64>,
    t: f64,
    maps: &EffortMaps,
    rule: Option<&QuadratureRule>,
    test_space: Option<&DMatrix<f64>>,
) -> Result<f64> {
    let l = &sys.layout;
    let parts = sys.ph_parts(y, t, maps, rule)?;
    let grad = sys.grad_hamiltonian(y, rule)?;
    let mut d = parts.e_mat.transpose() * &parts.efforts;
    for i in 0..l.n_states {
        d[i] -= grad[i];
    }
    match test_space {
        Some(p) => {
            if p.nrows() < parts.dim_ph {
                return Err(Error::DimensionMismatch(
                    "test space has fewer rows than the dynamic unknowns".into(),
                ));
            }
            let pt = p.rows(0, parts.dim_ph).transpose();
            Ok((pt * d).norm())
        }
        None => Ok(d.norm()),
    }
}

/// Maximum storage/gradient defect along a trajectory.
pub fn ph_condition_error(
    sys: &NetworkSystem,
    snaps: &SnapshotSet,
    maps: &EffortMaps,
    rule: Option<&QuadratureRule>,
    test_space: Option<&DMatrix<f64>>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for k in 0..snaps.times.len() {
        let y = snaps.states.column(k).into_owned();
        let d = ph_condition_defect(sys, &y, snaps.times[k], maps, rule, test_space)?;
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Structural health of the operators at one state.
#[derive(Debug, Clone)]
pub struct StructureReport {
    /// Largest entry of `J + Jᵀ` (must vanish).
    pub skew_defect: f64,
    /// Smallest eigenvalue of the symmetrized dissipation operator (must be
    /// non-negative).
    pub min_dissipation_eig: f64,
    /// Norm of the divergence operator applied to the constant nodal
    /// function (telescopes to zero on every pipe).
    pub divergence_ones_defect: f64,
    /// Storage/gradient defect at the state.
    pub gradient_defect: f64,
    /// Subspace-compatibility report of the reduction basis, when one is
    /// under inspection.
    pub compatibility: Option<CompatibilityReport>,
}

impl StructureReport {
    /// All hard structural requirements within tolerance.
    #[must_use]
    pub fn ok(&self, tol: f64) -> bool {
        self.skew_defect <= tol
            && self.min_dissipation_eig >= -tol
            && self.divergence_ones_defect <= tol
            && self.compatibility.as_ref().is_none_or(CompatibilityReport::ok)
    }
}

/// Assembles the operator blocks at a state and measures their structural
/// defects; optionally also re-checks a reduction basis for compatibility.
pub fn structure_report(
    sys: &NetworkSystem,
    y: &DVector<f64>,
    t: f64,
    maps: &EffortMaps,
    rule: Option<&QuadratureRule>,
    basis: Option<&ReductionBasis>,
) -> Result<StructureReport> {
    let l = &sys.layout;
    let parts = sys.ph_parts(y, t, maps, rule)?;
    let skew_defect = (&parts.j_mat + parts.j_mat.transpose()).amax();
    let sym = (&parts.r_mat + parts.r_mat.transpose()) * 0.5;
    let min_dissipation_eig = sym.symmetric_eigenvalues().min();
    // Divergence rows against the constant flux: ±A per element cancels.
    let mut ones = DVector::zeros(parts.dim_ph);
    for w in 0..sys.n_pipes() {
        for i in 0..=sys.meshes[w].n {
            ones[l.idx_m(w, i)] = 1.0;
        }
    }
    let div = parts.j_mat.rows(0, l.n_rho) * ones;
    let divergence_ones_defect = div.norm();
    let gradient_defect = ph_condition_defect(sys, y, t, maps, rule, None)?;
    let compatibility = match basis {
        Some(b) => Some(check_compatibility(b, sys)),
        None => None,
    };
    Ok(StructureReport {
        skew_defect,
        min_dissipation_eig,
        divergence_ones_defect,
        gradient_defect,
        compatibility,
    })
}

/// Per-step conservation/dissipation bookkeeping.
#[derive(Debug, Clone)]
pub struct BalanceRow {
    /// Time at the end of the step.
    pub time: f64,
    /// Newton iterations the step took.
    pub newton_iters: usize,
    /// Total network mass.
    pub mass: f64,
    /// `M(t_{k+1}) − M(t_k) − τ·(boundary inflow)` — the implicit step
    /// conserves mass exactly, so this is round-off only.
    pub mass_defect: f64,
    /// Hamiltonian at the end of the step.
    pub hamiltonian: f64,
    /// Power supplied through the ports, `ẽᵀB·u`.
    pub power_supplied: f64,
    /// Power lost to friction and cooling, `ẽᵀR·ẽ` (non-negative).
    pub power_dissipated: f64,
    /// Signed residual of the power budget,
    /// `ΔH/τ − (supplied − dissipated)`; first-order in the step size, so it
    /// is reported but not gated.
    pub power_defect: f64,
}

/// Balance diagnostics of a whole run.
#[derive(Debug, Clone)]
pub struct RunReport {
    /// One row per time step.
    pub rows: Vec<BalanceRow>,
    /// Largest absolute mass defect.
    pub max_mass_defect: f64,
    /// Largest absolute power defect.
    pub max_power_defect: f64,
    /// Most negative per-step dissipation (non-negative means the
    /// dissipation inequality held throughout).
    pub min_dissipation: f64,
}

/// Walks a trajectory and tallies the mass and power balances per step.
/// Pass the rule of a complexity-reduced run so the Hamiltonian and the
/// operator blocks are weighed consistently.
pub fn balance_report(
    sys: &NetworkSystem,
    snaps: &SnapshotSet,
    maps: &EffortMaps,
    rule: Option<&QuadratureRule>,
) -> Result<RunReport> {
    if snaps.times.len() < 2 {
        return Err(Error::InvalidConfig(
            "balance report needs at least one time step".into(),
        ));
    }
    let ham = |y: &DVector<f64>| -> Result<f64> {
        match rule {
            Some(r) => sys.network_hamiltonian_weighted(y, r),
            None => sys.network_hamiltonian(y),
        }
    };
    let mut rows = Vec::with_capacity(snaps.times.len() - 1);
    let mut mass_prev = sys.network_total_mass(&snaps.states.column(0).into_owned());
    let mut ham_prev = ham(&snaps.states.column(0).into_owned())?;
    for k in 1..snaps.times.len() {
        let t = snaps.times[k];
        let tau = t - snaps.times[k - 1];
        let y = snaps.states.column(k).into_owned();
        let mass = sys.network_total_mass(&y);
        let mass_defect = mass - mass_prev - tau * sys.boundary_inflow(&y, t);
        let h = ham(&y)?;
        let parts = sys.ph_parts(&y, t, maps, rule)?;
        let power_supplied = parts.efforts.dot(&parts.b_u);
        let power_dissipated =
            (parts.efforts.transpose() * &parts.r_mat * &parts.efforts)[(0, 0)];
        let power_defect = (h - ham_prev) / tau - (power_supplied - power_dissipated);
        rows.push(BalanceRow {
            time: t,
            newton_iters: snaps.newton_iters.get(k - 1).copied().unwrap_or(0),
            mass,
            mass_defect,
            hamiltonian: h,
            power_supplied,
            power_dissipated,
            power_defect,
        });
        mass_prev = mass;
        ham_prev = h;
    }
    let max_mass_defect = rows.iter().map(|r| r.mass_defect.abs()).fold(0.0, f64::max);
    let max_power_defect = rows.iter().map(|r| r.power_defect.abs()).fold(0.0, f64::max);
    let min_dissipation = rows
        .iter()
        .map(|r| r.power_dissipated)
        .fold(f64::INFINITY, f64::min);
    Ok(RunReport { rows, max_mass_defect, max_power_defect, min_dissipation })
}

/// Writes a balance report as CSV: a versioned comment line, a header, one
/// row per step, and a trailing summary row with the run maxima.
pub fn write_balance_csv<W: Write>(report: &RunReport, mut out: W) -> std::io::Result<()> {
    writeln!(out, "# {CSV_FORMAT}")?;
    writeln!(
        out,
        "step,time,newton_iters,mass,mass_defect,hamiltonian,power_supplied,power_dissipated,power_defect"
    )?;
    for (k, r) in report.rows.iter().enumerate() {
        writeln!(
            out,
            "{},{:.12e},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            k + 1,
            r.time,
            r.newton_iters,
            r.mass,
            r.mass_defect,
            r.hamiltonian,
            r.power_supplied,
            r.power_dissipated,
            r.power_defect
        )?;
    }
    writeln!(
        out,
        "summary,,,,{:.12e},,,{:.12e},{:.12e}",
        report.max_mass_defect, report.min_dissipation, report.max_power_defect
    )?;
    Ok(())
}
