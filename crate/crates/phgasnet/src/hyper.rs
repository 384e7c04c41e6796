//! Complexity reduction of the nonlinear terms: learned empirical
//! quadrature rules (non-negative per-element weights) and a discrete
//! empirical interpolation baseline.
//!
//! A quadrature rule replaces the exact element sums inside the nonlinear
//! operator blocks (flux mass matrices, convective/pressure coupling,
//! friction, cooling, and the kinetic effort) by weighted sums over a small
//! element subset; the linear mass rows, the energy time term, and all
//! boundary/input terms keep their exact products. Because the weights stay
//! positive, the weighted blocks keep their symmetry/definiteness and the
//! complexity-reduced model remains port-Hamiltonian with an exactly
//! conserved mass.
//!
//! The weights are learned by non-negative least squares on training
//! integrals: for every training snapshot and every retained reduced test
//! function, one row per term family (friction, pressure work, convective
//! energy, cooling, kinetic), plus per-pipe element-measure anchor rows.
//! The unit-weight rule solves this system exactly, so the fit degrades
//! gracefully as the element budget shrinks; if the best achievable
//! residual exceeds the accuracy target the learning fails loudly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mor::{galerkin_reduce, ReducedModel, ReductionBasis};
use crate::network::{NetworkSystem, QuadratureRule};
use crate::nnls::nnls_gram;
use crate::pipe::{element_kernel, ElementKernelParams, ElementLocalState, GAUSS_PTS, GAUSS_WTS};
use crate::solver::ImplicitSystem;

/// Cap on the number of training snapshots entering the weight learning;
/// longer runs are subsampled evenly.
pub const MAX_TRAINING_SNAPSHOTS: usize = 40;

/// Element budget for the learned quadrature rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuadBudget {
    /// One global budget; the solver allocates elements across pipes by
    /// pruning the smallest contributions network-wide.
    Network(usize),
    /// One budget per pipe, solved independently per pipe.
    PerPipe(Vec<usize>),
}

/// Weighted inner product of two piecewise-linear nodal functions over the
/// whole network: `Σ_j w_j ∫_{ω_j} a b`, area-weighted per pipe. The
/// unit-weight rule reproduces the exact flux mass-matrix product.
pub fn reduced_inner_product(
    sys: &NetworkSystem,
    rule: &QuadratureRule,
    a_nodal: &DVector<f64>,
    b_nodal: &DVector<f64>,
) -> Result<f64> {
    let l = &sys.layout;
    if a_nodal.len() != l.n_node || b_nodal.len() != l.n_node || rule.weights.len() != l.n_rho {
        return Err(Error::DimensionMismatch(
            "nodal vectors or rule do not match the network layout".into(),
        ));
    }
    let mut s = 0.0;
    for (w, mesh) in sys.meshes.iter().enumerate() {
        let area = sys.graph.pipes[w].params.area;
        let dx = mesh.dx;
        for j in 0..mesh.n {
            let wq = rule.weights[l.rho_off[w] + j];
            if wq == 0.0 {
                continue;
            }
            let (a0, a1) = (a_nodal[l.node_off[w] + j], a_nodal[l.node_off[w] + j + 1]);
            let (b0, b1) = (b_nodal[l.node_off[w] + j], b_nodal[l.node_off[w] + j + 1]);
            // Exact product of two linear functions on the element.
            s += area * wq * dx * (2.0 * a0 * b0 + a0 * b1 + a1 * b0 + 2.0 * a1 * b1) / 6.0;
        }
    }
    Ok(s)
}

/// Per-element training contributions of the five nonlinear term families
/// at one state, tested against the nodal hat functions of the element:
/// `(friction[2], pressure_work[2], convective_energy[2], cooling[2],
/// kinetic)`. Mirrors the quadrature of the state-dependent assembly.
#[allow(clippy::type_complexity)]
fn element_families(
    dx: f64,
    rp: f64,
    c_v: f64,
    fric: f64,
    fric_e: f64,
    cool: f64,
    rho: f64,
    m_n: [f64; 2],
    e_n: [f64; 2],
) -> ([f64; 2], [f64; 2], [f64; 2], [f64; 2], f64) {
    let mut f1 = [0.0; 2];
    let mut f2 = [0.0; 2];
    let mut f3 = [0.0; 2];
    let mut f4 = [0.0; 2];
    let mut f5 = 0.0;
    let ep = (e_n[1] - e_n[0]) / dx;
    for (gp, gw) in GAUSS_PTS.iter().zip(GAUSS_WTS.iter()) {
        let nb = [1.0 - gp, *gp];
        let dnb = [-1.0 / dx, 1.0 / dx];
        let m = m_n[0] * nb[0] + m_n[1] * nb[1];
        let e = e_n[0] * nb[0] + e_n[1] * nb[1];
        let p = rp * e;
        let scale = gw * dx;
        let drag = -m * m.abs() / (rho * rho);
        for a in 0..2 {
            // Friction force tested with the hat function (the constant sums
            // the trial hats to one).
            f1[a] += scale * fric * drag * nb[a];
            // Pressure-work force: the trial-hat sum leaves the gradient of p.
            f2[a] += scale * (-(rp * ep) / rho) * nb[a];
            // Convective energy flux (plus friction heating) against the hat.
            f3[a] += scale
                * ((-(e * dnb[a] + rp * ep * nb[a] + p * dnb[a]) / rho) + fric_e * drag * nb[a])
                * m;
            // Cooling exchange against the hat.
            f4[a] += scale * cool * (e / (c_v * rho)) * nb[a];
        }
        // Kinetic element integral that defines the density effort.
        f5 += scale * m * m / (2.0 * rho * rho);
    }
    (f1, f2, f3, f4, f5)
}

/// Columns of a basis block with support on the given rows.
fn active_columns(v: &DMatrix<f64>, row_off: usize, rows: usize) -> Vec<usize> {
    (0..v.ncols())
        .filter(|&c| (0..rows).any(|i| v[(row_off + i, c)] != 0.0))
        .collect()
}

/// Builds the training system for a pipe subset: one column per local
/// element, rows as documented on the module. The exact right-hand side is
/// the unit-weight row sum.
fn training_system(
    sys: &NetworkSystem,
    basis: &ReductionBasis,
    snaps: &DMatrix<f64>,
    pipes: &[usize],
) -> (DMatrix<f64>, DVector<f64>) {
    let l = &sys.layout;
    let g = &sys.gas;
    let rp = g.r / g.c_v;
    let n_local: usize = pipes.iter().map(|&w| sys.meshes[w].n).sum();
    let mut col_off = vec![0usize; pipes.len()];
    {
        let mut off = 0;
        for (k, &w) in pipes.iter().enumerate() {
            col_off[k] = off;
            off += sys.meshes[w].n;
        }
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for s in 0..snaps.ncols() {
        let y = snaps.column(s);
        for (k, &w) in pipes.iter().enumerate() {
            let mesh = &sys.meshes[w];
            let p = &sys.graph.pipes[w].params;
            let area = p.area;
            let fric = p.lambda_f / (2.0 * p.diameter);
            let fric_e = if p.friction_in_energy { fric } else { 0.0 };
            let cool = p.k_omega / p.diameter;
            let act_m = active_columns(&basis.v_m, l.node_off[w], mesh.n + 1);
            let act_e = active_columns(&basis.v_e, l.node_off[w], mesh.n + 1);
            let act_rho = active_columns(&basis.v_rho, l.rho_off[w], mesh.n);
            let n_fam_rows = 2 * act_m.len() + 2 * act_e.len() + act_rho.len();
            let base = rows.len();
            rows.extend(std::iter::repeat_with(|| vec![0.0; n_local]).take(n_fam_rows));
            for j in 0..mesh.n {
                let rho = y[l.idx_rho(w, j)];
                let m_n = [y[l.idx_m(w, j)], y[l.idx_m(w, j + 1)]];
                let e_n = [y[l.idx_e(w, j)], y[l.idx_e(w, j + 1)]];
                let (f1, f2, f3, f4, f5) =
                    element_families(mesh.dx, rp, g.c_v, fric, fric_e, cool, rho, m_n, e_n);
                let col = col_off[k] + j;
                let mut r = base;
                for fam in [&f1, &f2] {
                    for &q in &act_m {
                        let v0 = basis.v_m[(l.node_off[w] + j, q)];
                        let v1 = basis.v_m[(l.node_off[w] + j + 1, q)];
                        rows[r][col] += area * (fam[0] * v0 + fam[1] * v1);
                        r += 1;
                    }
                }
                for fam in [&f3, &f4] {
                    for &q in &act_e {
                        let v0 = basis.v_e[(l.node_off[w] + j, q)];
                        let v1 = basis.v_e[(l.node_off[w] + j + 1, q)];
                        rows[r][col] += area * (fam[0] * v0 + fam[1] * v1);
                        r += 1;
                    }
                }
                for &q in &act_rho {
                    rows[r][col] += area * f5 * basis.v_rho[(l.rho_off[w] + j, q)];
                    r += 1;
                }
            }
        }
    }
    // Element-measure anchors: the rule must integrate constants exactly per
    // pipe, which pins total mass and the constant cooling input.
    for (k, &w) in pipes.iter().enumerate() {
        let mesh = &sys.meshes[w];
        let area = sys.graph.pipes[w].params.area;
        let mut row = vec![0.0; n_local];
        for j in 0..mesh.n {
            row[col_off[k] + j] = area * mesh.dx;
        }
        rows.push(row);
    }
    let m = rows.len();
    let mut a = DMatrix::zeros(m, n_local);
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            a[(i, j)] = v;
        }
    }
    let b = &a * DVector::from_element(n_local, 1.0);
    (a, b)
}

/// Learns the non-negative weights of one pipe subset under an element
/// budget by non-negative least squares with greedy support pruning.
fn solve_block(
    sys: &NetworkSystem,
    basis: &ReductionBasis,
    snaps: &DMatrix<f64>,
    pipes: &[usize],
    n_c: usize,
    delta: f64,
) -> Result<Vec<f64>> {
    let n_local: usize = pipes.iter().map(|&w| sys.meshes[w].n).sum();
    if n_c == 0 || n_c > n_local {
        return Err(Error::InvalidConfig(format!(
            "element budget {n_c} must lie in 1..={n_local}"
        )));
    }
    let (a, b) = training_system(sys, basis, snaps, pipes);
    let gram = a.transpose() * &a;
    let c = a.transpose() * &b;
    let btb = b.dot(&b);
    let b_norm = btb.sqrt().max(f64::MIN_POSITIVE);
    let col_norm: Vec<f64> = (0..n_local).map(|j| gram[(j, j)].sqrt()).collect();
    let mut allowed = vec![true; n_local];
    let (mut x, _) = nnls_gram(&gram, &c, btb, &allowed)?;
    loop {
        let support: Vec<usize> = (0..n_local).filter(|&j| x[j] > 0.0).collect();
        if support.len() <= n_c {
            break;
        }
        // Drop the smallest-contribution elements, a few at a time, and
        // refit the remaining weights.
        let mut scored: Vec<(f64, usize)> =
            support.iter().map(|&j| (x[j] * col_norm[j], j)).collect();
        scored.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        let excess = support.len() - n_c;
        let k = excess.div_ceil(8).max(1);
        for &(_, j) in scored.iter().take(k) {
            allowed[j] = false;
        }
        (x, _) = nnls_gram(&gram, &c, btb, &allowed)?;
    }
    // The Gram-form residual loses half the digits to cancellation near an
    // exact fit; recompute it from the original system.
    let res = (&a * &x - &b).norm();
    let rel = res / b_norm;
    if rel > delta {
        return Err(Error::AccuracyInfeasible { best: rel, target: delta, budget: n_c });
    }
    Ok(x.iter().copied().collect())
}

/// Learns a network-wide quadrature rule from full-state training
/// snapshots. `delta` is the relative training-residual target; the budget
/// selects global or per-pipe solves. The returned rule passes the
/// norm-equivalence screen of [`norm_equivalence_ratios`].
pub fn learn_weights(
    sys: &NetworkSystem,
    basis: &ReductionBasis,
    snapshots: &DMatrix<f64>,
    delta: f64,
    budget: &QuadBudget,
) -> Result<QuadratureRule> {
    let l = &sys.layout;
    if snapshots.nrows() != l.dim {
        return Err(Error::DimensionMismatch(format!(
            "snapshot rows {} do not match the unknown count {}",
            snapshots.nrows(),
            l.dim
        )));
    }
    let snaps = subsample_columns(snapshots, MAX_TRAINING_SNAPSHOTS);
    let mut weights = DVector::zeros(l.n_rho);
    match budget {
        QuadBudget::Network(n_c) => {
            let pipes: Vec<usize> = (0..sys.n_pipes()).collect();
            let x = solve_block(sys, basis, &snaps, &pipes, *n_c, delta)?;
            let mut off = 0;
            for &w in &pipes {
                for j in 0..sys.meshes[w].n {
                    weights[l.rho_off[w] + j] = x[off + j];
                }
                off += sys.meshes[w].n;
            }
        }
        QuadBudget::PerPipe(ncs) => {
            if ncs.len() != sys.n_pipes() {
                return Err(Error::InvalidConfig(format!(
                    "per-pipe budgets: got {}, network has {} pipes",
                    ncs.len(),
                    sys.n_pipes()
                )));
            }
            for (w, &n_c) in ncs.iter().enumerate() {
                let x = solve_block(sys, basis, &snaps, &[w], n_c, delta)?;
                for j in 0..sys.meshes[w].n {
                    weights[l.rho_off[w] + j] = x[j];
                }
            }
        }
    }
    let rule = QuadratureRule { weights };
    norm_equivalence_ratios(sys, basis, &rule)?;
    Ok(rule)
}

/// Evenly subsamples snapshot columns down to `max` (keeps first and last).
fn subsample_columns(snapshots: &DMatrix<f64>, max: usize) -> DMatrix<f64> {
    let n = snapshots.ncols();
    if n <= max {
        return snapshots.clone();
    }
    let mut out = DMatrix::zeros(snapshots.nrows(), max);
    for k in 0..max {
        let src = k * (n - 1) / (max - 1);
        out.column_mut(k).copy_from(&snapshots.column(src));
    }
    out
}

/// Norm-equivalence screen: the rule-weighted norm of every basis column
/// (density, flux, energy) must be positive wherever the exact norm is.
/// Returns the per-column ratios `‖b‖ / ‖b‖_c` for diagnostics.
pub fn norm_equivalence_ratios(
    sys: &NetworkSystem,
    basis: &ReductionBasis,
    rule: &QuadratureRule,
) -> Result<Vec<f64>> {
    let l = &sys.layout;
    let full = QuadratureRule { weights: DVector::from_element(l.n_rho, 1.0) };
    let mut ratios = Vec::new();
    let mut push = |exact: f64, reduced: f64, what: &str, col: usize| -> Result<()> {
        if reduced <= 0.0 && exact > 0.0 {
            return Err(Error::StructureViolation(format!(
                "quadrature rule annihilates {what} basis column {col}; the weighted norm \
                 is no longer equivalent to the exact one"
            )));
        }
        ratios.push(if reduced > 0.0 { (exact / reduced).sqrt() } else { 1.0 });
        Ok(())
    };
    for c in 0..basis.v_rho.ncols() {
        let mut exact = 0.0;
        let mut red = 0.0;
        for (w, mesh) in sys.meshes.iter().enumerate() {
            let area = sys.graph.pipes[w].params.area;
            for j in 0..mesh.n {
                let v = basis.v_rho[(l.rho_off[w] + j, c)];
                exact += area * mesh.dx * v * v;
                red += rule.weights[l.rho_off[w] + j] * area * mesh.dx * v * v;
            }
        }
        push(exact, red, "density", c)?;
    }
    for (v, what) in [(&basis.v_m, "flux"), (&basis.v_e, "energy")] {
        for c in 0..v.ncols() {
            let col = v.column(c).into_owned();
            let exact = reduced_inner_product(sys, &full, &col, &col)?;
            let red = reduced_inner_product(sys, rule, &col, &col)?;
            push(exact, red, what, c)?;
        }
    }
    Ok(ratios)
}

/// Weighted cooling dissipation `1ᵀR_{e,e}^c 1` at a state — the quantity
/// whose positivity underpins the dissipation inequality of the
/// complexity-reduced model. Reported per step by the diagnostics; positive
/// weights and positive temperatures make it non-negative automatically.
pub fn cooling_dissipation(
    sys: &NetworkSystem,
    y: &DVector<f64>,
    rule: Option<&QuadratureRule>,
) -> Result<f64> {
    let states = sys.split_state(y);
    let mut s = 0.0;
    for (w, z) in states.iter().enumerate() {
        let mesh = &sys.meshes[w];
        let p = &sys.graph.pipes[w].params;
        let wslice: Option<Vec<f64>> = rule.map(|r| {
            (0..mesh.n)
                .map(|j| r.weights[sys.layout.rho_off[w] + j])
                .collect()
        });
        let ops = crate::pipe::assemble_state(mesh, p, &sys.gas, z, wslice.as_deref())?;
        let ones = DVector::from_element(mesh.n + 1, 1.0);
        s += p.area * (ones.transpose() * &ops.r_ee * &ones)[(0, 0)];
    }
    Ok(s)
}

/// Attaches a learned rule to a freshly built compatible reduced model.
pub fn assemble_complexity_reduced<'a>(
    sys: &'a NetworkSystem,
    basis: ReductionBasis,
    rule: QuadratureRule,
) -> Result<ReducedModel<'a>> {
    let mut rom = galerkin_reduce(sys, basis)?;
    rom.set_rule(rule)?;
    Ok(rom)
}

/// Discrete empirical interpolation operator for one nonlinearity block.
#[derive(Debug, Clone)]
pub struct DeimOperator {
    /// Orthonormal nonlinearity basis U.
    pub basis: DMatrix<f64>,
    /// Greedily selected interpolation rows.
    pub indices: Vec<usize>,
    /// Precomputed `U (PᵀU)⁻¹`.
    pub lift: DMatrix<f64>,
}

/// Builds a discrete empirical interpolation operator from nonlinearity
/// snapshots: the basis is the dominant left singular space, the
/// interpolation rows are chosen greedily by largest residual magnitude
/// (ties break toward the lowest row).
pub fn deim_build(snapshots: &DMatrix<f64>, r: usize) -> Result<DeimOperator> {
    if r == 0 {
        return Err(Error::InvalidConfig("interpolation rank must be positive".into()));
    }
    let svd = snapshots.clone().svd(true, false);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let rank = if smax > 0.0 {
        sv.iter().filter(|&&s| s >= 1e-12 * smax).count()
    } else {
        0
    };
    if r > rank {
        return Err(Error::RankDeficiency(format!(
            "requested {r} interpolation modes but the nonlinearity snapshots support {rank}"
        )));
    }
    let u = svd.u.expect("u requested").columns(0, r).into_owned();
    let argmax = |v: &DVector<f64>| -> usize {
        let mut best = 0;
        for i in 1..v.len() {
            if v[i].abs() > v[best].abs() {
                best = i;
            }
        }
        best
    };
    let mut indices = vec![argmax(&u.column(0).into_owned())];
    for k in 1..r {
        // Residual of the next mode after interpolation on the current rows.
        let uk = u.columns(0, k).into_owned();
        let mut pu = DMatrix::zeros(k, k);
        let mut pb = DVector::zeros(k);
        for (row, &i) in indices.iter().enumerate() {
            for col in 0..k {
                pu[(row, col)] = uk[(i, col)];
            }
            pb[row] = u[(i, k)];
        }
        let coeff = pu.lu().solve(&pb).ok_or_else(|| {
            Error::LinearSolve("interpolation matrix became singular during the greedy build".into())
        })?;
        let resid = u.column(k).into_owned() - &uk * coeff;
        indices.push(argmax(&resid));
    }
    let mut pu = DMatrix::zeros(r, r);
    for (row, &i) in indices.iter().enumerate() {
        for col in 0..r {
            pu[(row, col)] = u[(i, col)];
        }
    }
    let pu_inv = pu.lu().try_inverse().ok_or_else(|| {
        Error::LinearSolve("interpolation matrix is singular".into())
    })?;
    let lift = &u * pu_inv;
    Ok(DeimOperator { basis: u, indices, lift })
}

/// Applies the interpolation: reconstructs the full nonlinearity vector
/// from its values at the interpolation rows.
pub fn deim_apply(op: &DeimOperator, values_at_indices: &DVector<f64>) -> Result<DVector<f64>> {
    if values_at_indices.len() != op.indices.len() {
        return Err(Error::DimensionMismatch(format!(
            "got {} sampled values for {} interpolation rows",
            values_at_indices.len(),
            op.indices.len()
        )));
    }
    // lift = U(PᵀU)⁻¹ maps sampled values directly.
    let mut sel = DMatrix::zeros(op.indices.len(), 1);
    for (k, _) in op.indices.iter().enumerate() {
        sel[(k, 0)] = values_at_indices[k];
    }
    Ok((&op.lift * sel).column(0).into_owned())
}

/// Reduced model whose nonlinear momentum/energy residual blocks are
/// replaced by discrete empirical interpolation (the comparison baseline
/// for the learned quadrature rules).
#[derive(Debug, Clone)]
pub struct DeimRom<'a> {
    /// Underlying Galerkin-reduced model (exact nonlinear terms).
    pub rom: ReducedModel<'a>,
    /// Interpolation operator of the momentum nonlinearity block.
    pub op_m: DeimOperator,
    /// Interpolation operator of the energy nonlinearity block.
    pub op_e: DeimOperator,
    corr: DMatrix<f64>,
    kinmap: DMatrix<f64>,
}

/// Nonlinear interior residual blocks at a full state: the state-dependent
/// momentum terms (kinetic coupling, pressure work, friction) and energy
/// terms (convection, friction heating, cooling), stacked `[g_m; g_e]` over
/// the nodal spaces, with the same effort substitutions as the reduced
/// model. Returns the block vector and, on request, its Jacobian triplets
/// `(local row, full-state column, value)`.
#[allow(clippy::type_complexity)]
fn nonlinear_blocks(
    rom: &ReducedModel<'_>,
    y: &DVector<f64>,
    kinmap: &DMatrix<f64>,
    want_jac: bool,
) -> Result<(DVector<f64>, Vec<(usize, usize, f64)>)> {
    let sys = rom.sys;
    let l = &sys.layout;
    let maps = rom.effort_maps();
    let g = &sys.gas;
    let rp = g.r / g.c_v;
    let mut out = DVector::zeros(2 * l.n_node);
    let mut trips: Vec<(usize, usize, f64)> = Vec::new();
    let mut eps = DVector::zeros(l.n_rho);
    let mut d_eps: Vec<(usize, usize, f64)> = Vec::new();
    for (w, mesh) in sys.meshes.iter().enumerate() {
        let p = &sys.graph.pipes[w].params;
        let a = p.area;
        let kp = ElementKernelParams {
            dx: mesh.dx,
            rp,
            c_v: g.c_v,
            fric: p.lambda_f / (2.0 * p.diameter),
            fric_e: if p.friction_in_energy {
                p.lambda_f / (2.0 * p.diameter)
            } else {
                0.0
            },
            cool: p.k_omega / p.diameter,
        };
        for j in 0..mesh.n {
            let ge = l.idx_rho(w, j);
            let rho = y[ge];
            if !(rho > 0.0) {
                return Err(Error::NonPhysicalState(format!(
                    "density must be positive on pipe '{}', element {j}: {rho}",
                    sys.graph.pipes[w].id
                )));
            }
            let nodes = [l.idx_m(w, j), l.idx_m(w, j + 1)];
            let enodes = [l.idx_e(w, j), l.idx_e(w, j + 1)];
            let gn = [l.node_off[w] + j, l.node_off[w] + j + 1];
            let ones = match &maps.ones {
                Some(o) => [o[gn[0]], o[gn[1]]],
                None => [1.0, 1.0],
            };
            let st = ElementLocalState {
                rho,
                rho_dot: 0.0,
                m: [y[nodes[0]], y[nodes[1]]],
                m_dot: [0.0, 0.0],
                e: [y[enodes[0]], y[enodes[1]]],
                ones,
            };
            let k_out = element_kernel(&kp, &st, 1.0, 0.0, want_jac);
            eps[ge] = k_out.f / mesh.dx;
            let cols = [ge, nodes[0], nodes[1], enodes[0], enodes[1]];
            for aa in 0..2 {
                out[gn[aa]] += a * k_out.r_m[aa];
                out[l.n_node + gn[aa]] += a * k_out.r_e[aa];
                if want_jac {
                    for (q, &col) in cols.iter().enumerate() {
                        if k_out.dr_m[aa][q] != 0.0 {
                            trips.push((gn[aa], col, a * k_out.dr_m[aa][q]));
                        }
                        if k_out.dr_e[aa][q] != 0.0 {
                            trips.push((l.n_node + gn[aa], col, a * k_out.dr_e[aa][q]));
                        }
                    }
                }
            }
            if want_jac {
                let dcols = [ge, nodes[0], nodes[1]];
                for (q, &col) in dcols.iter().enumerate() {
                    let v = k_out.df[q] / mesh.dx;
                    if v != 0.0 {
                        d_eps.push((ge, col, v));
                    }
                }
            }
        }
    }
    // Kinetic coupling through the effort projector: rows of the momentum
    // block gain (G·Π)·ε.
    let kin = kinmap * &eps;
    for i in 0..l.n_node {
        out[i] += kin[i];
    }
    if want_jac {
        for &(elem, col, v) in &d_eps {
            for i in 0..l.n_node {
                let kv = kinmap[(i, elem)];
                if kv != 0.0 {
                    trips.push((i, col, kv * v));
                }
            }
        }
    }
    Ok((out, trips))
}

/// Builds the interpolation baseline: evaluates the nonlinear blocks at the
/// lift-projected training states, builds one interpolation operator per
/// block of rank `r`, and wires the correction into the reduced model.
pub fn deim_reduce<'a>(
    sys: &'a NetworkSystem,
    basis: ReductionBasis,
    snapshots: &DMatrix<f64>,
    r: usize,
) -> Result<DeimRom<'a>> {
    let rom = galerkin_reduce(sys, basis)?;
    let l = &sys.layout;
    // Momentum-row kinetic scatter composed with the effort projector.
    let pi = rom
        .effort_maps()
        .pi_rho
        .as_ref()
        .expect("reduced models always carry an effort projector")
        .clone();
    let mut kinmap = DMatrix::zeros(l.n_node, l.n_rho);
    for (row, elem, val) in sys.kinetic_rows() {
        let local = row - l.base_m;
        for c in 0..l.n_rho {
            kinmap[(local, c)] += val * pi[(elem, c)];
        }
    }
    let snaps = subsample_columns(snapshots, MAX_TRAINING_SNAPSHOTS);
    let mut g_snaps = DMatrix::zeros(2 * l.n_node, snaps.ncols());
    for c in 0..snaps.ncols() {
        let y = rom.lift_state(&rom.project_state(&snaps.column(c).into_owned()));
        let (g, _) = nonlinear_blocks(&rom, &y, &kinmap, false)?;
        g_snaps.column_mut(c).copy_from(&g);
    }
    let op_m = deim_build(&g_snaps.rows(0, l.n_node).into_owned(), r)?;
    let op_e = deim_build(&g_snaps.rows(l.n_node, l.n_node).into_owned(), r)?;
    // Correction map: replace the exact blocks by their interpolants,
    // projected onto the reduced test space. D = blockdiag(U(PᵀU)⁻¹S − I).
    let mut d = DMatrix::zeros(2 * l.n_node, 2 * l.n_node);
    for (off, op) in [(0, &op_m), (l.n_node, &op_e)] {
        for i in 0..l.n_node {
            for (k, &pi_row) in op.indices.iter().enumerate() {
                d[(off + i, off + pi_row)] += op.lift[(i, k)];
            }
            d[(off + i, off + i)] -= 1.0;
        }
    }
    let lift_me = rom.lift_matrix().rows(l.base_m, 2 * l.n_node).into_owned();
    let corr = lift_me.transpose() * d;
    Ok(DeimRom { rom, op_m, op_e, corr, kinmap })
}

impl ImplicitSystem for DeimRom<'_> {
    fn dim(&self) -> usize {
        self.rom.dim_reduced()
    }

    fn assemble_system(
        &self,
        y: &DVector<f64>,
        ydot: &DVector<f64>,
        t: f64,
        shift: f64,
        want_jac: bool,
    ) -> Result<(DVector<f64>, Vec<(usize, usize, f64)>)> {
        let (mut res, mut trips) = self.rom.assemble_system(y, ydot, t, shift, want_jac)?;
        let y_full = self.rom.lift_state(y);
        let (g, dg) = nonlinear_blocks(&self.rom, &y_full, &self.kinmap, want_jac)?;
        res += &self.corr * &g;
        if want_jac {
            let dim_red = self.rom.dim_reduced();
            let lift = self.rom.lift_matrix();
            let mut dg_p = DMatrix::zeros(2 * self.rom.sys.layout.n_node, dim_red);
            for &(i, j, v) in &dg {
                for c in 0..dim_red {
                    dg_p[(i, c)] += v * lift[(j, c)];
                }
            }
            let extra = &self.corr * dg_p;
            for i in 0..dim_red {
                for j in 0..dim_red {
                    let v = extra[(i, j)];
                    if v != 0.0 {
                        trips.push((i, j, v));
                    }
                }
            }
        }
        Ok((res, trips))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mor::{reduce_network, RankSpec};
    use crate::network::test_systems::single_pipe;
    use crate::pipe::PipeState;
    use crate::solver::{consistent_init, simulate, SnapshotSet, SolverConfig};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn run_single_pipe(n: usize, t_f: f64) -> (crate::network::NetworkSystem, SnapshotSet) {
        let sys = single_pipe(n, 4.0, 0.5);
        let z0 = PipeState::uniform(&sys.meshes[0], 3.0, 0.3, 9.0);
        let y0 = consistent_init(&sys, &[z0], 0.0).unwrap();
        let config = SolverConfig { t_f, ..SolverConfig::default() };
        let snaps = simulate(&sys, &y0, &config).unwrap();
        (sys, snaps)
    }

    fn smooth_nodal(n_node: usize, seed: f64) -> DVector<f64> {
        DVector::from_fn(n_node, |i, _| 1.0 + ((i as f64) * seed).sin())
    }

    #[test]
    fn unit_rule_reproduces_the_exact_inner_product() {
        let sys = single_pipe(12, 4.0, 0.5);
        let l = &sys.layout;
        let full = QuadratureRule { weights: DVector::from_element(l.n_rho, 1.0) };
        let a = smooth_nodal(l.n_node, 0.37);
        let b = smooth_nodal(l.n_node, 0.81);
        let got = reduced_inner_product(&sys, &full, &a, &b).unwrap();
        let ops = crate::mor::space_ops(&sys, &[0]);
        let exact = (a.transpose() * &ops.m_m * &b)[(0, 0)];
        assert_relative_eq!(got, exact, epsilon = 1e-12);
        // Empty rule gives zero; halving the weights halves the value.
        let empty = QuadratureRule { weights: DVector::zeros(l.n_rho) };
        assert_eq!(reduced_inner_product(&sys, &empty, &a, &b).unwrap(), 0.0);
        let half = QuadratureRule { weights: DVector::from_element(l.n_rho, 0.5) };
        assert_relative_eq!(
            reduced_inner_product(&sys, &half, &a, &b).unwrap(),
            exact / 2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn full_budget_recovers_unit_weights() {
        let (sys, snaps) = run_single_pipe(10, 1.0);
        let (basis, _) = reduce_network(&sys, &snaps.states, &RankSpec::Network(3), true).unwrap();
        let rule =
            learn_weights(&sys, &basis, &snaps.states, 1e-8, &QuadBudget::Network(10)).unwrap();
        assert_eq!(rule.active_elements(), 10);
        for j in 0..10 {
            assert_relative_eq!(rule.weights[j], 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn pruned_rule_respects_the_budget_and_positivity() {
        let (sys, snaps) = run_single_pipe(20, 2.0);
        let (basis, _) = reduce_network(&sys, &snaps.states, &RankSpec::Network(5), true).unwrap();
        let rule =
            learn_weights(&sys, &basis, &snaps.states, 0.5, &QuadBudget::Network(12)).unwrap();
        assert!(rule.active_elements() <= 12);
        assert!(rule.weights.iter().all(|&w| w >= 0.0));
        // The screen must pass (it ran inside learn_weights); the ratios are
        // finite and positive.
        let ratios = norm_equivalence_ratios(&sys, &basis, &rule).unwrap();
        assert!(ratios.iter().all(|r| r.is_finite() && *r > 0.0));
    }

    #[test]
    fn impossible_accuracy_target_fails_loudly() {
        let (sys, snaps) = run_single_pipe(10, 1.0);
        let (basis, _) = reduce_network(&sys, &snaps.states, &RankSpec::Network(3), true).unwrap();
        match learn_weights(&sys, &basis, &snaps.states, 1e-12, &QuadBudget::Network(1)) {
            Err(Error::AccuracyInfeasible { best, target, budget }) => {
                assert!(best > target);
                assert_eq!(budget, 1);
            }
            other => panic!("expected accuracy failure, got {other:?}"),
        }
    }

    #[test]
    fn unit_rule_model_matches_the_plain_reduced_model() {
        let (sys, snaps) = run_single_pipe(10, 1.0);
        let (_, rom) = reduce_network(&sys, &snaps.states, &RankSpec::Network(3), true).unwrap();
        let mut crom = rom.clone();
        crom.set_rule(QuadratureRule {
            weights: DVector::from_element(sys.layout.n_rho, 1.0),
        })
        .unwrap();
        let y_r = rom.project_state(&snaps.states.column(5).into_owned());
        let mut ydot_r = DVector::zeros(rom.dim_reduced());
        for i in 0..ydot_r.len() {
            ydot_r[i] = 0.1 * ((i as f64) * 0.9).cos();
        }
        let (r0, j0) = rom.assemble_system(&y_r, &ydot_r, 0.4, 10.0, true).unwrap();
        let (r1, j1) = crom.assemble_system(&y_r, &ydot_r, 0.4, 10.0, true).unwrap();
        assert_relative_eq!(r0, r1, epsilon = 1e-12);
        let dense = |t: &[(usize, usize, f64)]| {
            let mut m = DMatrix::<f64>::zeros(rom.dim_reduced(), rom.dim_reduced());
            for &(i, j, v) in t {
                m[(i, j)] += v;
            }
            m
        };
        assert_abs_diff_eq!((dense(&j0) - dense(&j1)).amax(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn learned_rule_keeps_structure_and_exact_mass_rows() {
        let (sys, snaps) = run_single_pipe(20, 2.0);
        let (basis, rom) =
            reduce_network(&sys, &snaps.states, &RankSpec::Network(5), true).unwrap();
        let rule =
            learn_weights(&sys, &basis, &snaps.states, 0.5, &QuadBudget::Network(12)).unwrap();
        let crom = assemble_complexity_reduced(&sys, basis.clone(), rule.clone()).unwrap();
        let y_r = rom.project_state(&snaps.states.column(10).into_owned());
        let y = rom.lift_state(&y_r);
        // Weighted operator blocks keep skewness and dissipativity.
        let parts = sys.ph_parts(&y, 1.0, rom.effort_maps(), Some(&rule)).unwrap();
        assert!((&parts.j_mat + parts.j_mat.transpose()).amax() <= 1e-12);
        let eig = parts.r_mat.clone().symmetric_eigenvalues();
        assert!(eig.iter().all(|&l| l >= -1e-10));
        assert!(cooling_dissipation(&sys, &y, Some(&rule)).unwrap() >= 0.0);
        // The continuity rows are untouched by the rule.
        let ydot_r = DVector::zeros(rom.dim_reduced());
        let (r_plain, _) = rom.assemble_system(&y_r, &ydot_r, 1.0, 0.0, false).unwrap();
        let (r_rule, _) = crom.assemble_system(&y_r, &ydot_r, 1.0, 0.0, false).unwrap();
        let r_rho = basis.r_rho();
        for i in 0..r_rho {
            assert_relative_eq!(r_plain[i], r_rule[i], epsilon = 1e-13);
        }
    }

    #[test]
    fn interpolation_build_is_greedy_and_exact_in_span() {
        // Rank-2 snapshots: reconstruction of any in-span vector is exact.
        let u1 = DVector::from_vec(vec![0.1, -0.9, 0.3, 0.2]);
        let u2 = DVector::from_vec(vec![0.5, 0.1, -0.2, 0.7]);
        let mut snaps = DMatrix::zeros(4, 3);
        snaps.column_mut(0).copy_from(&(2.0 * &u1 + &u2));
        snaps.column_mut(1).copy_from(&(&u1 - 3.0 * &u2));
        snaps.column_mut(2).copy_from(&(0.5 * &u1));
        let op = deim_build(&snaps, 2).unwrap();
        assert_eq!(op.indices.len(), 2);
        let probe: DVector<f64> = 1.7 * &u1 - 0.4 * &u2;
        let sampled = DVector::from_fn(2, |k, _| probe[op.indices[k]]);
        let rec = deim_apply(&op, &sampled).unwrap();
        assert_relative_eq!(rec, probe, epsilon = 1e-10);
        // First greedy row is the largest entry of the dominant mode.
        let op1 = deim_build(&snaps, 1).unwrap();
        let u = op1.basis.column(0);
        let mut amax = 0;
        for i in 1..4 {
            if u[i].abs() > u[amax].abs() {
                amax = i;
            }
        }
        assert_eq!(op1.indices[0], amax);
        // Rank excess fails.
        assert!(matches!(deim_build(&snaps, 3), Err(Error::RankDeficiency(_))));
    }

    #[test]
    fn full_rank_interpolation_matches_the_reduced_model_on_training_states() {
        let (sys, snaps) = run_single_pipe(10, 1.0);
        let (basis, rom) =
            reduce_network(&sys, &snaps.states, &RankSpec::Network(3), true).unwrap();
        // The highest rank both nonlinearity blocks support spans the
        // training nonlinearity exactly, so the correction vanishes there.
        let deim = (1..=snaps.states.ncols())
            .rev()
            .find_map(|r| deim_reduce(&sys, basis.clone(), &snaps.states, r).ok())
            .unwrap();
        let y_r = rom.project_state(&snaps.states.column(4).into_owned());
        let ydot_r = DVector::zeros(rom.dim_reduced());
        let (r_rom, _) = rom.assemble_system(&y_r, &ydot_r, 0.4, 0.0, false).unwrap();
        let (r_deim, _) = deim.assemble_system(&y_r, &ydot_r, 0.4, 0.0, false).unwrap();
        assert_relative_eq!(r_rom, r_deim, epsilon = 1e-9);
    }
}
