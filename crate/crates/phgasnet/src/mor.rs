//! Snapshot-based Galerkin model reduction that preserves the
//! port-Hamiltonian structure of the network model.
//!
//! The density basis comes from a weighted proper orthogonal decomposition
//! of the density snapshots augmented with the divergence images of the
//! mass-flux (and optionally energy) snapshots. The mass-flux basis is then
//! derived from the density basis through the discrete divergence operator
//! so that three compatibility conditions hold:
//!
//! 1. the weighted density image equals the divergence image of the flux
//!    basis (reduced continuity rows close exactly),
//! 2. the divergence kernel — one constant per pipe — is contained in the
//!    flux basis, and
//! 3. the discrete constant function is exactly representable in the energy
//!    basis (the energy rows can still be tested against 1).
//!
//! The energy basis is set equal to the flux basis, which keeps the reduced
//! friction coupling an exact skew-symmetric pair. Bases can be built over
//! the whole network (dense blocks) or pipe by pipe (block-diagonal).
//!
//! Reduced models are formed by Galerkin projection: state-dependent
//! operator blocks are re-assembled at the lifted state on every residual
//! evaluation and projected; Lagrange-multiplier unknowns and algebraic rows
//! stay unreduced. The constant function and the kinetic effort are replaced
//! by their oblique projections onto the reduced spaces, which is what makes
//! the reduced model exactly mass-conservative and keeps its discrete energy
//! balance.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::network::{EffortMaps, NetworkSystem, QuadratureRule};
use crate::solver::{ImplicitSystem, SnapshotSet};

/// Relative singular-value cutoff: modes below `RANK_TOL·σ_max` are treated
/// as numerical noise when validating a requested basis width.
pub const RANK_TOL: f64 = 1e-12;

/// Angle threshold for dropping (near-)duplicate columns during the
/// flux-basis orthogonalization.
pub const DEDUP_TOL: f64 = 1e-8;

/// Defect threshold of the compatibility checks (subspace angles and
/// orthonormality residuals).
pub const COMPAT_TOL: f64 = 1e-10;

/// How the reduction basis is organized over the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReductionMode {
    /// One dense basis block over all pipes.
    Network,
    /// Independent bases per pipe, concatenated block-diagonally.
    PerPipe,
}

/// Requested density-basis width: one global width or one width per pipe
/// (which selects the block-diagonal mode).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RankSpec {
    /// Network-wide density basis of this width.
    Network(usize),
    /// Per-pipe density-basis widths (length = number of pipes).
    PerPipe(Vec<usize>),
}

/// Projection matrices of a reduced model. The multiplier unknowns are
/// never reduced and carry no block here.
#[derive(Debug, Clone)]
pub struct ReductionBasis {
    /// Density basis (elements × r_ρ), orthonormal in the density mass
    /// matrix.
    pub v_rho: DMatrix<f64>,
    /// Mass-flux basis (nodes × r_m), orthonormal in the flux mass matrix;
    /// contains the per-pipe constants.
    pub v_m: DMatrix<f64>,
    /// Energy basis (nodes × r_e). Compatible construction sets it equal to
    /// `v_m`.
    pub v_e: DMatrix<f64>,
    /// Block organization.
    pub mode: ReductionMode,
    /// Singular-value spectrum of the augmented density snapshots (per pipe
    /// in block-diagonal mode, concatenated), for decay diagnostics.
    pub singular_values: Vec<f64>,
}

impl ReductionBasis {
    /// Density-basis width.
    #[must_use]
    pub fn r_rho(&self) -> usize {
        self.v_rho.ncols()
    }
    /// Flux-basis width.
    #[must_use]
    pub fn r_m(&self) -> usize {
        self.v_m.ncols()
    }
    /// Energy-basis width.
    #[must_use]
    pub fn r_e(&self) -> usize {
        self.v_e.ncols()
    }
}

/// Constant weighted operators of a pipe subset: diagonal density mass
/// matrix, nodal mass matrices, the discrete divergence, and its kernel
/// (one constant column per pipe). All blocks carry the cross-section
/// weights so the induced norms are the physical, area-weighted ones.
#[derive(Debug, Clone)]
pub struct SpaceOps {
    /// Diagonal of the density mass matrix (A·Δx per element).
    pub m_rho_diag: DVector<f64>,
    /// Flux mass matrix (block-diagonal over the subset).
    pub m_m: DMatrix<f64>,
    /// Energy mass matrix (numerically equal to `m_m`).
    pub m_e: DMatrix<f64>,
    /// Discrete divergence (elements × nodes).
    pub j: DMatrix<f64>,
    /// Kernel of the divergence: indicator of each pipe's nodes.
    pub kernel: DMatrix<f64>,
}

/// Assembles the constant weighted operators of a pipe subset (pass all
/// pipe indices for the whole network).
#[must_use]
pub fn space_ops(sys: &NetworkSystem, pipes: &[usize]) -> SpaceOps {
    let n1: usize = pipes.iter().map(|&w| sys.meshes[w].n).sum();
    let n2: usize = pipes.iter().map(|&w| sys.meshes[w].n + 1).sum();
    let mut m_rho_diag = DVector::zeros(n1);
    let mut m_m = DMatrix::zeros(n2, n2);
    let mut m_e = DMatrix::zeros(n2, n2);
    let mut j = DMatrix::zeros(n1, n2);
    let mut kernel = DMatrix::zeros(n2, pipes.len());
    let (mut off1, mut off2) = (0usize, 0usize);
    for (b, &w) in pipes.iter().enumerate() {
        let mesh = &sys.meshes[w];
        let a = sys.graph.pipes[w].params.area;
        let c = &sys.consts[w];
        for jj in 0..mesh.n {
            m_rho_diag[off1 + jj] = a * mesh.dx;
        }
        for i in 0..=mesh.n {
            kernel[(off2 + i, b)] = 1.0;
            for ii in 0..=mesh.n {
                m_m[(off2 + i, off2 + ii)] = a * c.m_m[(i, ii)];
                m_e[(off2 + i, off2 + ii)] = a * c.m_e[(i, ii)];
            }
        }
        for jj in 0..mesh.n {
            for i in 0..=mesh.n {
                j[(off1 + jj, off2 + i)] = a * c.j_rho_m[(jj, i)];
            }
        }
        off1 += mesh.n;
        off2 += mesh.n + 1;
    }
    SpaceOps { m_rho_diag, m_m, m_e, j, kernel }
}

/// Weighted proper orthogonal decomposition: returns the basis of the `r`
/// dominant modes of the snapshot columns in the inner product induced by
/// the symmetric positive definite matrix `m`, together with the full
/// singular-value spectrum for decay diagnostics.
///
/// The weight is applied through a Cholesky factor `M = L·Lᵀ`
/// (`Y = Lᵀ·S`, basis = `L⁻ᵀ·U_r`), which induces the same geometry as a
/// symmetric square root. Singular values below [`RANK_TOL`]·σ_max count as
/// zero; requesting more modes than that rank is an error naming the
/// achievable maximum.
pub fn pod(
    s: &DMatrix<f64>,
    m: &DMatrix<f64>,
    r: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = s.nrows();
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "weight matrix is {}×{}, snapshots have {n} rows",
            m.nrows(),
            m.ncols()
        )));
    }
    let chol = Cholesky::new(m.clone()).ok_or_else(|| {
        Error::InvalidConfig("POD weight matrix is not symmetric positive definite".into())
    })?;
    if s.ncols() == 0 || r == 0 {
        if r > 0 {
            return Err(Error::RankDeficiency(format!(
                "requested {r} modes from an empty snapshot set (achievable: 0)"
            )));
        }
        return Ok((DMatrix::zeros(n, 0), DVector::zeros(0)));
    }
    let lt = chol.l().transpose();
    let y = &lt * s;
    let svd = y.svd(true, false);
    let sv = svd.singular_values.clone();
    let smax = sv.max();
    let rank = if smax > 0.0 {
        sv.iter().filter(|&&x| x >= RANK_TOL * smax).count()
    } else {
        0
    };
    if r > rank {
        return Err(Error::RankDeficiency(format!(
            "requested {r} modes but the snapshot set supports at most {rank}"
        )));
    }
    let u_r = svd
        .u
        .as_ref()
        .expect("u requested")
        .columns(0, r)
        .into_owned();
    let v = lt
        .solve_upper_triangular(&u_r)
        .ok_or_else(|| Error::LinearSolve("Cholesky back-substitution failed in POD".into()))?;
    Ok((v, sv))
}

/// Applies a `[1, 2, 1]/4` moving average to the element values of each
/// pipe segment (segments are read off the kernel indicator columns). The
/// filter annihilates the grid-scale checkerboard component exactly while
/// perturbing smooth fields only at second order in the mesh width.
///
/// The central discretization carries a checkerboard null mode whose trace
/// in the divergence images of the nodal snapshots is amplified by the
/// inverse mesh width. Left in, it seeds the density basis with
/// checkerboard modes scattered through the spectrum; truncating such a
/// mode halfway destabilizes the reduced dynamics at the affected widths.
fn filter_checkerboard(s: &mut DMatrix<f64>, ops: &SpaceOps) {
    let mut off = 0usize;
    for b in 0..ops.kernel.ncols() {
        let nodes = ops.kernel.column(b).iter().filter(|&&x| x != 0.0).count();
        let n = nodes - 1;
        for c in 0..s.ncols() {
            let seg: Vec<f64> = (0..n).map(|i| s[(off + i, c)]).collect();
            for i in 0..n {
                let l = seg[i.saturating_sub(1)];
                let r = seg[(i + 1).min(n - 1)];
                s[(off + i, c)] = 0.25 * l + 0.5 * seg[i] + 0.25 * r;
            }
        }
        off += n;
    }
}

/// Builds the density basis from the density snapshots augmented with the
/// divergence images of the flux snapshots (the discrete density rates) and
/// optionally of the energy snapshots. The divergence images pass through
/// [`filter_checkerboard`] so the stationary checkerboard component of the
/// nodal fields cannot leak into the density modes. The POD weight is the
/// diagonal density mass matrix.
pub fn build_rho_basis(
    s_rho: &DMatrix<f64>,
    s_m: &DMatrix<f64>,
    s_e: Option<&DMatrix<f64>>,
    ops: &SpaceOps,
    r: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n1 = ops.m_rho_diag.len();
    if s_rho.nrows() != n1 || s_m.nrows() != ops.j.ncols() {
        return Err(Error::DimensionMismatch(
            "snapshot blocks do not match the operator dimensions".into(),
        ));
    }
    if r >= n1 {
        return Err(Error::RankDeficiency(format!(
            "density basis width {r} must stay below the element count {n1}"
        )));
    }
    let mut cols: Vec<DMatrix<f64>> = vec![s_rho.clone()];
    let mut push_rate = |s: &DMatrix<f64>| {
        let mut img = &ops.j * s;
        for i in 0..n1 {
            let scale = 1.0 / ops.m_rho_diag[i];
            for c in 0..img.ncols() {
                img[(i, c)] *= scale;
            }
        }
        filter_checkerboard(&mut img, ops);
        cols.push(img);
    };
    push_rate(s_m);
    if let Some(se) = s_e {
        push_rate(se);
    }
    let n_cols: usize = cols.iter().map(nalgebra::DMatrix::ncols).sum();
    let mut aug = DMatrix::zeros(n1, n_cols);
    let mut off = 0;
    for c in &cols {
        aug.columns_mut(off, c.ncols()).copy_from(c);
        off += c.ncols();
    }
    pod(&aug, &DMatrix::from_diagonal(&ops.m_rho_diag), r)
}

/// Numerical rank of the augmented density snapshot matrix over the whole
/// network — the maximum admissible network-wide density-basis width.
pub fn achievable_rho_rank(
    sys: &NetworkSystem,
    snapshots: &DMatrix<f64>,
    augment_energy: bool,
) -> Result<usize> {
    let all: Vec<usize> = (0..sys.n_pipes()).collect();
    let ops = space_ops(sys, &all);
    let (s_rho, s_m, s_e) = split_blocks(sys, snapshots)?;
    let mut cols = vec![s_rho.clone()];
    let scale_img = |s: &DMatrix<f64>| {
        let mut img = &ops.j * s;
        for i in 0..img.nrows() {
            let sc = 1.0 / ops.m_rho_diag[i];
            for c in 0..img.ncols() {
                img[(i, c)] *= sc;
            }
        }
        filter_checkerboard(&mut img, &ops);
        img
    };
    cols.push(scale_img(&s_m));
    if augment_energy {
        cols.push(scale_img(&s_e));
    }
    let n1 = s_rho.nrows();
    let total: usize = cols.iter().map(nalgebra::DMatrix::ncols).sum();
    let mut aug = DMatrix::zeros(n1, total);
    let mut off = 0;
    for c in &cols {
        aug.columns_mut(off, c.ncols()).copy_from(c);
        off += c.ncols();
    }
    // Weighted rank: scale rows by the square root of the density mass.
    for i in 0..n1 {
        let sc = ops.m_rho_diag[i].sqrt();
        for c in 0..total {
            aug[(i, c)] *= sc;
        }
    }
    let sv = aug.singular_values();
    let smax = sv.max();
    Ok(if smax > 0.0 {
        sv.iter().filter(|&&x| x >= RANK_TOL * smax).count()
    } else {
        0
    })
}

/// Derives the mass-flux basis from a density basis: lifts each density
/// mode through the weighted divergence (`W = M_m⁻¹Jᵀ(J M_m⁻¹Jᵀ)⁻¹M_ρV_ρ`),
/// appends the divergence-kernel constants last, and orthonormalizes the
/// collection by modified Gram–Schmidt (one reorthogonalization pass) in
/// the flux mass-matrix inner product. Near-duplicate columns are dropped
/// by the [`DEDUP_TOL`] angle threshold.
pub fn compatible_basis(v_rho: &DMatrix<f64>, ops: &SpaceOps) -> Result<DMatrix<f64>> {
    let n2 = ops.m_m.nrows();
    let chol_mm = Cholesky::new(ops.m_m.clone()).ok_or_else(|| {
        Error::InvalidConfig("flux mass matrix is not symmetric positive definite".into())
    })?;
    let x = chol_mm.solve(&ops.j.transpose()); // M_m⁻¹ Jᵀ
    let gram = &ops.j * &x; // J M_m⁻¹ Jᵀ, SPD because J has full row rank
    let chol_g = Cholesky::new(gram).ok_or_else(|| {
        Error::StructureViolation(
            "weighted divergence Gram matrix is numerically singular".into(),
        )
    })?;
    let mut mv = v_rho.clone();
    for i in 0..mv.nrows() {
        let s = ops.m_rho_diag[i];
        for c in 0..mv.ncols() {
            mv[(i, c)] *= s;
        }
    }
    let w = &x * chol_g.solve(&mv); // density lifts
    let r = w.ncols();
    let mut candidates: Vec<(DVector<f64>, bool)> = Vec::with_capacity(r + ops.kernel.ncols());
    for c in 0..r {
        candidates.push((w.column(c).into_owned(), false));
    }
    for c in 0..ops.kernel.ncols() {
        candidates.push((ops.kernel.column(c).into_owned(), true));
    }
    let m_dot = |a: &DVector<f64>, b: &DVector<f64>| (a.transpose() * &ops.m_m * b)[(0, 0)];
    let mut accepted: Vec<DVector<f64>> = Vec::new();
    for (mut v, is_kernel) in candidates {
        let orig = m_dot(&v, &v).sqrt();
        for _pass in 0..2 {
            for q in &accepted {
                let c = m_dot(q, &v);
                v -= q * c;
            }
        }
        let nrm = m_dot(&v, &v).sqrt();
        if nrm <= DEDUP_TOL * orig.max(f64::MIN_POSITIVE) {
            if is_kernel {
                continue; // duplicate constant direction
            }
            return Err(Error::StructureViolation(
                "a lifted density mode became linearly dependent; the density basis is \
                 rank-deficient"
                    .into(),
            ));
        }
        accepted.push(v / nrm);
    }
    let mut v_m = DMatrix::zeros(n2, accepted.len());
    for (c, q) in accepted.iter().enumerate() {
        v_m.column_mut(c).copy_from(q);
    }
    Ok(v_m)
}

/// Defects of the basis invariants; all must stay below [`COMPAT_TOL`] for
/// a basis to qualify as compatible.
#[derive(Debug, Clone)]
pub struct CompatibilityReport {
    /// ‖V_ρᵀM_ρV_ρ − I‖_max.
    pub ortho_rho: f64,
    /// ‖V_mᵀM_mV_m − I‖_max.
    pub ortho_m: f64,
    /// ‖V_eᵀM_eV_e − I‖_max.
    pub ortho_e: f64,
    /// Subspace-angle defect of image(M_ρV_ρ) = image(J V_m).
    pub image_match: f64,
    /// Containment defect of kernel(J) ⊆ image(V_m).
    pub kernel_containment: f64,
    /// Containment defect of the constant function in image(V_e).
    pub ones_containment: f64,
    /// ‖V_e − V_m‖_max (∞ if the shapes differ).
    pub ve_equals_vm: f64,
}

impl CompatibilityReport {
    /// Largest defect over all checks.
    #[must_use]
    pub fn max_defect(&self) -> f64 {
        [
            self.ortho_rho,
            self.ortho_m,
            self.ortho_e,
            self.image_match,
            self.kernel_containment,
            self.ones_containment,
            self.ve_equals_vm,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    /// Whether every defect is below [`COMPAT_TOL`].
    #[must_use]
    pub fn ok(&self) -> bool {
        self.max_defect() <= COMPAT_TOL
    }
}

/// Euclidean-orthonormal basis of the column space (rank-revealing).
fn orth(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.ncols() == 0 {
        return DMatrix::zeros(a.nrows(), 0);
    }
    let svd = a.clone().svd(true, false);
    let sv = &svd.singular_values;
    let smax = sv.max();
    if smax <= 0.0 {
        return DMatrix::zeros(a.nrows(), 0);
    }
    let rank = sv.iter().filter(|&&s| s > 1e-10 * smax).count();
    svd.u.expect("u requested").columns(0, rank).into_owned()
}

/// Largest sine of the principal angles by which columns of the orthonormal
/// `probe` leave the span of the orthonormal `space`.
fn containment_defect(space: &DMatrix<f64>, probe: &DMatrix<f64>) -> f64 {
    if probe.ncols() == 0 {
        return 0.0;
    }
    let resid = probe - space * (space.transpose() * probe);
    (0..probe.ncols())
        .map(|c| resid.column(c).norm())
        .fold(0.0, f64::max)
}

/// Evaluates all basis invariants against the network operators.
#[must_use]
pub fn check_compatibility(basis: &ReductionBasis, sys: &NetworkSystem) -> CompatibilityReport {
    let all: Vec<usize> = (0..sys.n_pipes()).collect();
    let ops = space_ops(sys, &all);
    let eye = |k: usize| DMatrix::<f64>::identity(k, k);
    let ortho = |v: &DMatrix<f64>, m: &DMatrix<f64>| {
        if v.ncols() == 0 {
            return 0.0;
        }
        ((v.transpose() * m * v) - eye(v.ncols())).amax()
    };
    let m_rho = DMatrix::from_diagonal(&ops.m_rho_diag);
    let mut mv = basis.v_rho.clone();
    for i in 0..mv.nrows() {
        let s = ops.m_rho_diag[i];
        for c in 0..mv.ncols() {
            mv[(i, c)] *= s;
        }
    }
    let q_mrho = orth(&mv);
    let q_jvm = orth(&(&ops.j * &basis.v_m));
    let image_match = containment_defect(&q_mrho, &q_jvm).max(containment_defect(&q_jvm, &q_mrho));
    let q_vm = orth(&basis.v_m);
    let kernel_containment = containment_defect(&q_vm, &orth(&ops.kernel));
    let q_ve = orth(&basis.v_e);
    let n2 = basis.v_e.nrows();
    let ones = DMatrix::from_element(n2, 1, 1.0 / (n2 as f64).sqrt());
    let ones_containment = containment_defect(&q_ve, &ones);
    let ve_equals_vm = if basis.v_e.shape() == basis.v_m.shape() {
        (&basis.v_e - &basis.v_m).amax()
    } else {
        f64::INFINITY
    };
    CompatibilityReport {
        ortho_rho: ortho(&basis.v_rho, &m_rho),
        ortho_m: ortho(&basis.v_m, &ops.m_m),
        ortho_e: ortho(&basis.v_e, &ops.m_e),
        image_match,
        kernel_containment,
        ones_containment,
        ve_equals_vm,
    }
}

/// Splits full unknown snapshots into the (ρ, m, e) block matrices.
fn split_blocks(
    sys: &NetworkSystem,
    snapshots: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let l = &sys.layout;
    if snapshots.nrows() != l.dim {
        return Err(Error::DimensionMismatch(format!(
            "snapshot rows {} do not match the unknown count {}",
            snapshots.nrows(),
            l.dim
        )));
    }
    Ok((
        snapshots.rows(0, l.n_rho).into_owned(),
        snapshots.rows(l.base_m, l.n_node).into_owned(),
        snapshots.rows(l.base_e, l.n_node).into_owned(),
    ))
}

/// Builds a compatible reduction basis from full-state snapshots, either
/// network-wide or pipe-by-pipe, and wraps the system into a reduced model.
///
/// `augment_energy` controls whether the divergence images of the energy
/// snapshots enter the density POD (kept on by default; off only for
/// ablation studies).
pub fn reduce_network<'a>(
    sys: &'a NetworkSystem,
    snapshots: &DMatrix<f64>,
    spec: &RankSpec,
    augment_energy: bool,
) -> Result<(ReductionBasis, ReducedModel<'a>)> {
    let basis = build_basis(sys, snapshots, spec, augment_energy)?;
    let model = galerkin_reduce(sys, basis.clone())?;
    Ok((basis, model))
}

/// Builds the compatible reduction basis only (see [`reduce_network`]).
pub fn build_basis(
    sys: &NetworkSystem,
    snapshots: &DMatrix<f64>,
    spec: &RankSpec,
    augment_energy: bool,
) -> Result<ReductionBasis> {
    let (s_rho, s_m, s_e) = split_blocks(sys, snapshots)?;
    let l = &sys.layout;
    match spec {
        RankSpec::Network(r) => {
            let all: Vec<usize> = (0..sys.n_pipes()).collect();
            let ops = space_ops(sys, &all);
            let (v_rho, sv) =
                build_rho_basis(&s_rho, &s_m, augment_energy.then_some(&s_e), &ops, *r)?;
            let v_m = compatible_basis(&v_rho, &ops)?;
            Ok(ReductionBasis {
                v_rho,
                v_e: v_m.clone(),
                v_m,
                mode: ReductionMode::Network,
                singular_values: sv.iter().copied().collect(),
            })
        }
        RankSpec::PerPipe(rs) => {
            if rs.len() != sys.n_pipes() {
                return Err(Error::InvalidConfig(format!(
                    "per-pipe widths: got {}, network has {} pipes",
                    rs.len(),
                    sys.n_pipes()
                )));
            }
            let r_total: usize = rs.iter().sum();
            let mut v_rho = DMatrix::zeros(l.n_rho, r_total);
            let mut v_m = DMatrix::zeros(l.n_node, r_total + sys.n_pipes());
            let mut sv_all = Vec::new();
            let (mut col_r, mut col_m) = (0usize, 0usize);
            for (w, &r_w) in rs.iter().enumerate() {
                let n = sys.meshes[w].n;
                let ops = space_ops(sys, &[w]);
                let sr = s_rho.rows(l.rho_off[w], n).into_owned();
                let sm = s_m.rows(l.node_off[w], n + 1).into_owned();
                let se = s_e.rows(l.node_off[w], n + 1).into_owned();
                let (vr, sv) = build_rho_basis(
                    &sr,
                    &sm,
                    augment_energy.then_some(&se),
                    &ops,
                    r_w,
                )
                .map_err(|e| match e {
                    Error::RankDeficiency(msg) => {
                        Error::RankDeficiency(format!("pipe '{}': {msg}", sys.graph.pipes[w].id))
                    }
                    other => other,
                })?;
                let vm = compatible_basis(&vr, &ops)?;
                v_rho
                    .view_mut((l.rho_off[w], col_r), (n, r_w))
                    .copy_from(&vr);
                v_m.view_mut((l.node_off[w], col_m), (n + 1, vm.ncols()))
                    .copy_from(&vm);
                col_r += r_w;
                col_m += vm.ncols();
                sv_all.extend(sv.iter().copied());
            }
            let v_m = v_m.columns(0, col_m).into_owned();
            Ok(ReductionBasis {
                v_rho,
                v_e: v_m.clone(),
                v_m,
                mode: ReductionMode::PerPipe,
                singular_values: sv_all,
            })
        }
    }
}

/// Plain block-wise POD basis without the compatibility construction:
/// independent bases per variable in the respective mass-matrix inner
/// products. Serves as the comparison baseline; it generally violates the
/// compatibility invariants and must be wrapped with
/// [`galerkin_reduce_unchecked`].
pub fn naive_basis(
    sys: &NetworkSystem,
    snapshots: &DMatrix<f64>,
    r_rho: usize,
    r_m: usize,
    r_e: usize,
) -> Result<ReductionBasis> {
    let (s_rho, s_m, s_e) = split_blocks(sys, snapshots)?;
    let all: Vec<usize> = (0..sys.n_pipes()).collect();
    let ops = space_ops(sys, &all);
    let (v_rho, sv) = pod(&s_rho, &DMatrix::from_diagonal(&ops.m_rho_diag), r_rho)?;
    let (v_m, _) = pod(&s_m, &ops.m_m, r_m)?;
    let (v_e, _) = pod(&s_e, &ops.m_e, r_e)?;
    Ok(ReductionBasis {
        v_rho,
        v_m,
        v_e,
        mode: ReductionMode::Network,
        singular_values: sv.iter().copied().collect(),
    })
}

/// Warnings about basis widths whose parity differs from the element-count
/// parity of their block. Mixed parity excites an element-scale zig-zag in
/// the reconstructed density and typically worsens the trajectory error;
/// it is legal, hence a warning rather than an error.
#[must_use]
pub fn parity_warnings(sys: &NetworkSystem, spec: &RankSpec) -> Vec<String> {
    let mut out = Vec::new();
    let mut check = |w: usize, r: usize| {
        let n = sys.meshes[w].n;
        if r % 2 != n % 2 {
            out.push(format!(
                "pipe '{}': density width {r} and element count {n} have different parity; \
                 expect an element-scale zig-zag in the reconstructed density",
                sys.graph.pipes[w].id
            ));
        }
    };
    match spec {
        RankSpec::Network(r) => {
            for w in 0..sys.n_pipes() {
                check(w, *r);
            }
        }
        RankSpec::PerPipe(rs) => {
            for (w, &r) in rs.iter().enumerate() {
                check(w, r);
            }
        }
    }
    out
}

/// Galerkin-reduced network model. Implements the same implicit-system
/// interface as the full model, so the time integrator runs it unchanged.
///
/// The reduced unknown vector is `[ρ_r | m_r | e_r | multipliers]` with the
/// multiplier block copied verbatim from the full layout.
#[derive(Debug, Clone)]
pub struct ReducedModel<'a> {
    /// Underlying full-order system.
    pub sys: &'a NetworkSystem,
    /// Projection basis.
    pub basis: ReductionBasis,
    /// Optional learned quadrature rule for the nonlinear terms.
    pub rule: Option<QuadratureRule>,
    maps: EffortMaps,
    lift: DMatrix<f64>,
    proj_t: DMatrix<f64>,
    kin_red: DMatrix<f64>,
    pinv_rho: DMatrix<f64>,
    pinv_m: DMatrix<f64>,
    pinv_e: DMatrix<f64>,
    dim_red: usize,
}

impl<'a> ReducedModel<'a> {
    /// Builds the reduced model from a basis, without compatibility
    /// validation (see [`galerkin_reduce`]).
    pub fn new(sys: &'a NetworkSystem, basis: ReductionBasis) -> Result<Self> {
        let l = &sys.layout;
        if basis.v_rho.nrows() != l.n_rho
            || basis.v_m.nrows() != l.n_node
            || basis.v_e.nrows() != l.n_node
        {
            return Err(Error::DimensionMismatch(
                "basis row counts do not match the network layout".into(),
            ));
        }
        let all: Vec<usize> = (0..sys.n_pipes()).collect();
        let ops = space_ops(sys, &all);
        let m_rho = DMatrix::from_diagonal(&ops.m_rho_diag);
        let pinv = |v: &DMatrix<f64>, m: &DMatrix<f64>| -> Result<DMatrix<f64>> {
            // (VᵀMV)⁻¹VᵀM; reduces to VᵀM for orthonormal bases.
            let vtm = v.transpose() * m;
            let gram = &vtm * v;
            gram.lu().solve(&vtm).ok_or_else(|| {
                Error::RankDeficiency("basis block is rank-deficient in its mass norm".into())
            })
        };
        let pinv_rho = pinv(&basis.v_rho, &m_rho)?;
        let pinv_m = pinv(&basis.v_m, &ops.m_m)?;
        let pinv_e = pinv(&basis.v_e, &ops.m_e)?;
        // Effort substitutions: projected constant function and kinetic
        // effort projector.
        let ones = DVector::from_element(l.n_node, 1.0);
        let ones_red = &basis.v_e * (&pinv_e * &ones);
        let pi_rho = &basis.v_rho * &pinv_rho;
        let maps = EffortMaps { ones: Some(ones_red), pi_rho: Some(pi_rho.clone()) };
        // Lift matrix: basis blocks on the states, identity on multipliers.
        let (r1, r2, r3) = (basis.r_rho(), basis.r_m(), basis.r_e());
        let n_mult = l.dim - l.n_states;
        let dim_red = r1 + r2 + r3 + n_mult;
        let mut lift = DMatrix::zeros(l.dim, dim_red);
        lift.view_mut((0, 0), (l.n_rho, r1)).copy_from(&basis.v_rho);
        lift.view_mut((l.base_m, r1), (l.n_node, r2))
            .copy_from(&basis.v_m);
        lift.view_mut((l.base_e, r1 + r2), (l.n_node, r3))
            .copy_from(&basis.v_e);
        for k in 0..n_mult {
            lift[(l.n_states + k, r1 + r2 + r3 + k)] = 1.0;
        }
        let proj_t = lift.transpose();
        // Projected kinetic scatter: (lift)ᵀ·G·Π with G the fixed
        // element-to-momentum-row coupling.
        let mut kin_red = DMatrix::zeros(dim_red, l.n_rho);
        for (row, elem, val) in sys.kinetic_rows() {
            let x = proj_t.column(row).into_owned();
            let y = pi_rho.row(elem).transpose();
            kin_red.ger(val, &x, &y, 1.0);
        }
        Ok(Self {
            sys,
            basis,
            rule: None,
            maps,
            lift,
            proj_t,
            kin_red,
            pinv_rho,
            pinv_m,
            pinv_e,
            dim_red,
        })
    }

    /// Attaches a learned quadrature rule for the nonlinear terms.
    pub fn set_rule(&mut self, rule: QuadratureRule) -> Result<()> {
        if rule.weights.len() != self.sys.layout.n_rho {
            return Err(Error::DimensionMismatch(format!(
                "quadrature rule has {} weights, network has {} elements",
                rule.weights.len(),
                self.sys.layout.n_rho
            )));
        }
        self.rule = Some(rule);
        Ok(())
    }

    /// Reduced unknown count.
    #[must_use]
    pub fn dim_reduced(&self) -> usize {
        self.dim_red
    }

    /// Effort substitutions of this model (for structure diagnostics).
    #[must_use]
    pub fn effort_maps(&self) -> &EffortMaps {
        &self.maps
    }

    /// Lift matrix (full dimension × reduced dimension).
    #[must_use]
    pub fn lift_matrix(&self) -> &DMatrix<f64> {
        &self.lift
    }

    /// Lifts a reduced state to the full unknown vector.
    #[must_use]
    pub fn lift_state(&self, y_r: &DVector<f64>) -> DVector<f64> {
        &self.lift * y_r
    }

    /// Projects a full unknown vector onto the reduced coordinates
    /// (mass-weighted least squares per block; multipliers pass through).
    #[must_use]
    pub fn project_state(&self, y: &DVector<f64>) -> DVector<f64> {
        let l = &self.sys.layout;
        let (r1, r2, r3) = (self.basis.r_rho(), self.basis.r_m(), self.basis.r_e());
        let mut y_r = DVector::zeros(self.dim_red);
        let rho = y.rows(0, l.n_rho);
        let m = y.rows(l.base_m, l.n_node);
        let e = y.rows(l.base_e, l.n_node);
        y_r.rows_mut(0, r1).copy_from(&(&self.pinv_rho * rho));
        y_r.rows_mut(r1, r2).copy_from(&(&self.pinv_m * m));
        y_r.rows_mut(r1 + r2, r3).copy_from(&(&self.pinv_e * e));
        let n_mult = l.dim - l.n_states;
        y_r.rows_mut(r1 + r2 + r3, n_mult)
            .copy_from(&y.rows(l.n_states, n_mult));
        y_r
    }

    /// Lifts every snapshot of a reduced trajectory to full coordinates.
    #[must_use]
    pub fn lift_snapshots(&self, snaps: &SnapshotSet) -> SnapshotSet {
        SnapshotSet {
            times: snaps.times.clone(),
            states: &self.lift * &snaps.states,
            newton_iters: snaps.newton_iters.clone(),
        }
    }

    /// Hamiltonian of the reduced model at a reduced state (evaluated at the
    /// lifted state; kinetic part quadrature-weighted when a rule is set).
    pub fn hamiltonian(&self, y_r: &DVector<f64>) -> Result<f64> {
        let y = self.lift_state(y_r);
        match &self.rule {
            Some(rule) => self.sys.network_hamiltonian_weighted(&y, rule),
            None => self.sys.network_hamiltonian(&y),
        }
    }
}

impl ImplicitSystem for ReducedModel<'_> {
    fn dim(&self) -> usize {
        self.dim_red
    }

    fn assemble_system(
        &self,
        y: &DVector<f64>,
        ydot: &DVector<f64>,
        t: f64,
        shift: f64,
        want_jac: bool,
    ) -> Result<(DVector<f64>, Vec<(usize, usize, f64)>)> {
        let y_full = &self.lift * y;
        let ydot_full = &self.lift * ydot;
        let asm = self.sys.assemble(
            &y_full,
            &ydot_full,
            t,
            shift,
            want_jac,
            &self.maps,
            self.rule.as_ref(),
        )?;
        let res = &self.proj_t * &asm.res;
        let mut triplets = Vec::new();
        if want_jac {
            let l = &self.sys.layout;
            // Scatter the full-order triplets against the lift columns, then
            // project the rows: jac_r = Pᵀ·(J_full·P).
            let mut scat = DMatrix::zeros(l.dim, self.dim_red);
            for &(i, j, v) in &asm.jac {
                for c in 0..self.dim_red {
                    scat[(i, c)] += v * self.lift[(j, c)];
                }
            }
            let mut jac_r = &self.proj_t * scat;
            // Kinetic chain through the effort projector:
            // Pᵀ·G·Π·(∂ε/∂y)·P.
            let mut deps_p = DMatrix::zeros(l.n_rho, self.dim_red);
            for &(i, j, v) in &asm.d_eps {
                for c in 0..self.dim_red {
                    deps_p[(i, c)] += v * self.lift[(j, c)];
                }
            }
            jac_r += &self.kin_red * deps_p;
            for i in 0..self.dim_red {
                for j in 0..self.dim_red {
                    let v = jac_r[(i, j)];
                    if v != 0.0 {
                        triplets.push((i, j, v));
                    }
                }
            }
        }
        Ok((res, triplets))
    }
}

/// Validates the compatibility invariants and wraps the system into a
/// reduced model; rejects bases whose defects exceed [`COMPAT_TOL`].
pub fn galerkin_reduce<'a>(
    sys: &'a NetworkSystem,
    basis: ReductionBasis,
) -> Result<ReducedModel<'a>> {
    let rep = check_compatibility(&basis, sys);
    if !rep.ok() {
        return Err(Error::StructureViolation(format!(
            "reduction basis violates the compatibility conditions (max defect {:.3e}): {rep:?}",
            rep.max_defect()
        )));
    }
    ReducedModel::new(sys, basis)
}

/// Wraps a basis without compatibility validation (for baselines that
/// deliberately break the structure).
pub fn galerkin_reduce_unchecked<'a>(
    sys: &'a NetworkSystem,
    basis: ReductionBasis,
) -> Result<ReducedModel<'a>> {
    ReducedModel::new(sys, basis)
}
