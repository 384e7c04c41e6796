//! P0/P1 finite elements on a single pipe.
//!
//! Density is approximated by piecewise constants (P0, one coefficient per
//! element), mass flow and internal energy density by piecewise linears (P1,
//! nodal). This module provides the uniform mesh, the constant operator
//! blocks, the state-dependent operator blocks, and the per-element residual
//! and Jacobian kernels used by the network assembly.
//!
//! All state-dependent integrals use 3-point Gauss–Legendre quadrature per
//! element, which is exact (with margin) for every integrand arising from a
//! P0 density paired with P1 flux/energy fields.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gas::{GasConstants, PipeParams};

/// Gauss–Legendre points on the unit interval (3-point rule).
pub const GAUSS_PTS: [f64; 3] = [
    0.112_701_665_379_258_3, // (1 − √(3/5)) / 2
    0.5,
    0.887_298_334_620_741_7, // (1 + √(3/5)) / 2
];
/// Gauss–Legendre weights on the unit interval (sum = 1).
pub const GAUSS_WTS: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];

/// Uniform mesh on one pipe.
#[derive(Debug, Clone, PartialEq)]
pub struct PipeMesh {
    /// Number of elements.
    pub n: usize,
    /// Pipe length.
    pub length: f64,
    /// Element width Δx = L/n.
    pub dx: f64,
}

/// Builds a uniform mesh with `n ≥ 2` elements.
pub fn build_mesh(length: f64, n: usize) -> Result<PipeMesh> {
    if !(length > 0.0) {
        return Err(Error::InvalidConfig(format!("pipe length must be positive: {length}")));
    }
    if n < 2 {
        return Err(Error::InvalidConfig(format!("mesh needs at least 2 elements, got {n}")));
    }
    Ok(PipeMesh { n, length, dx: length / n as f64 })
}

impl PipeMesh {
    /// Grid points x_1..x_{n+1}.
    #[must_use]
    pub fn grid(&self) -> Vec<f64> {
        (0..=self.n).map(|i| i as f64 * self.dx).collect()
    }
}

/// Coefficients of one pipe's fields: ρ (P0), m and e (P1).
#[derive(Debug, Clone, PartialEq)]
pub struct PipeState {
    /// Density coefficients, one per element.
    pub rho: DVector<f64>,
    /// Mass-flow nodal coefficients.
    pub m: DVector<f64>,
    /// Internal-energy-density nodal coefficients.
    pub e: DVector<f64>,
}

impl PipeState {
    /// Uniform state with constant fields.
    #[must_use]
    pub fn uniform(mesh: &PipeMesh, rho: f64, m: f64, e: f64) -> Self {
        Self {
            rho: DVector::from_element(mesh.n, rho),
            m: DVector::from_element(mesh.n + 1, m),
            e: DVector::from_element(mesh.n + 1, e),
        }
    }

    /// Validates positivity of ρ on every element.
    pub fn check_valid(&self, mesh: &PipeMesh) -> Result<()> {
        if self.rho.len() != mesh.n || self.m.len() != mesh.n + 1 || self.e.len() != mesh.n + 1 {
            return Err(Error::DimensionMismatch(format!(
                "pipe state sizes ({}, {}, {}) do not match mesh with n={}",
                self.rho.len(),
                self.m.len(),
                self.e.len(),
                mesh.n
            )));
        }
        for (j, &r) in self.rho.iter().enumerate() {
            if !(r > 0.0) {
                return Err(Error::NonPhysicalState(format!(
                    "density must be positive: rho[{j}]={r}"
                )));
            }
        }
        Ok(())
    }
}

/// State-independent operator blocks of one pipe (without the A^ω weight).
#[derive(Debug, Clone)]
pub struct PipeConstantOps {
    /// P0 mass matrix, diagonal Δx·I stored as its diagonal.
    pub m_rho: DVector<f64>,
    /// P1 mass matrix (n+1 × n+1), tridiagonal.
    pub m_m: DMatrix<f64>,
    /// P1 mass matrix of the energy space (identical to `m_m`).
    pub m_e: DMatrix<f64>,
    /// Divergence block J_{ρ,m} (n × n+1): row j is (…, +1, −1, …).
    pub j_rho_m: DMatrix<f64>,
    /// Boundary-trace block T_m ((n+1) × 2) with rows (−φ_i|_L, φ_i|_0).
    pub t_m: DMatrix<f64>,
    /// Ambient-temperature input vector b_i = (k_ω/d)·(φ_i, 1).
    pub b: DVector<f64>,
}

/// Assembles the constant blocks from closed-form element integrals.
pub fn assemble_constant(mesh: &PipeMesh, params: &PipeParams) -> PipeConstantOps {
    let n = mesh.n;
    let dx = mesh.dx;
    let m_rho = DVector::from_element(n, dx);
    let mut m_m = DMatrix::zeros(n + 1, n + 1);
    for j in 0..n {
        m_m[(j, j)] += dx / 3.0;
        m_m[(j + 1, j + 1)] += dx / 3.0;
        m_m[(j, j + 1)] += dx / 6.0;
        m_m[(j + 1, j)] += dx / 6.0;
    }
    let mut j_rho_m = DMatrix::zeros(n, n + 1);
    for j in 0..n {
        j_rho_m[(j, j)] = 1.0;
        j_rho_m[(j, j + 1)] = -1.0;
    }
    let mut t_m = DMatrix::zeros(n + 1, 2);
    t_m[(n, 0)] = -1.0;
    t_m[(0, 1)] = 1.0;
    let cool = params.k_omega / params.diameter;
    let mut b = DVector::from_element(n + 1, cool * dx);
    b[0] = cool * dx / 2.0;
    b[n] = cool * dx / 2.0;
    PipeConstantOps { m_rho, m_e: m_m.clone(), m_m, j_rho_m, t_m, b }
}

/// State-dependent operator blocks of one pipe (without the A^ω weight).
///
/// The vectors `t_e` and `b_e` each have a single nonzero entry and are
/// therefore stored as scalars: `t_e` carries the state's inflow nodal
/// energy `e_h(0)` at the first node; `b_e` carries `(e+p)/ρ|_L` at the
/// last node.
#[derive(Debug, Clone)]
pub struct PipeStateOps {
    /// M_{m,ρ} ((n+1) × n): −(m_h/ρ_h² ψ_j, φ_i).
    pub m_m_rho: DMatrix<f64>,
    /// M_{m,m} ((n+1) × (n+1)): (φ_ι/ρ_h, φ_i), symmetric positive definite.
    pub m_mm: DMatrix<f64>,
    /// J_{m,e}: ((−e_h ∂_xφ_ι − ∂_x(p_h φ_ι))/ρ_h, φ_i).
    pub j_me: DMatrix<f64>,
    /// Friction block J̃_{m,e}: −(λ/(2d)·m_h|m_h|/ρ_h²·φ_ι, φ_i).
    pub jt_me: DMatrix<f64>,
    /// Friction block of the energy row (zero when friction heating is off).
    pub jt_me_energy: DMatrix<f64>,
    /// Friction as a resistive block on the flow space:
    /// R_{m,m} = (λ/(2d)·|m_h|/ρ_h²·φ_ι, φ_i), symmetric PSD, satisfying
    /// R_{m,m}·m = −J̃_{m,e}·1.
    pub r_mm: DMatrix<f64>,
    /// Cooling block R_{e,e}: (k_ω/d·T_h·φ_ι, φ_i), symmetric PSD.
    pub r_ee: DMatrix<f64>,
    /// Outflow boundary effort (e+p)/ρ|_L (single nonzero of b_e).
    pub b_e: f64,
    /// Inflow energy trace e_h(0) (single nonzero of t_e).
    pub t_e: f64,
    /// Kinetic element integrals f_j = ∫_{ω_j} m_h²/(2ρ_h²).
    pub f: DVector<f64>,
    /// Riesz vector ε = M_ρ⁻¹ f (element-wise since M_ρ is diagonal).
    pub eps: DVector<f64>,
}

/// Assembles the state-dependent blocks with optional per-element quadrature
/// weights (`weights[j] = 0` excludes element j; `None` means exact
/// quadrature with unit weights).
pub fn assemble_state(
    mesh: &PipeMesh,
    params: &PipeParams,
    g: &GasConstants,
    z: &PipeState,
    weights: Option<&[f64]>,
) -> Result<PipeStateOps> {
    z.check_valid(mesh)?;
    let n = mesh.n;
    let dx = mesh.dx;
    let rp = g.r / g.c_v;
    let fric = params.lambda_f / (2.0 * params.diameter);
    let fric_e = if params.friction_in_energy { fric } else { 0.0 };
    let cool = params.k_omega / params.diameter;

    let mut m_m_rho = DMatrix::zeros(n + 1, n);
    let mut m_mm = DMatrix::zeros(n + 1, n + 1);
    let mut j_me = DMatrix::zeros(n + 1, n + 1);
    let mut jt_me = DMatrix::zeros(n + 1, n + 1);
    let mut jt_me_energy = DMatrix::zeros(n + 1, n + 1);
    let mut r_mm = DMatrix::zeros(n + 1, n + 1);
    let mut r_ee = DMatrix::zeros(n + 1, n + 1);
    let mut f = DVector::zeros(n);

    for j in 0..n {
        let w_c = weights.map_or(1.0, |w| w[j]);
        if w_c == 0.0 {
            continue;
        }
        let rho = z.rho[j];
        let (m1, m2) = (z.m[j], z.m[j + 1]);
        let (e1, e2) = (z.e[j], z.e[j + 1]);
        let ep = (e2 - e1) / dx;
        for (gp, gw) in GAUSS_PTS.iter().zip(GAUSS_WTS.iter()) {
            let nb = [1.0 - gp, *gp];
            let dnb = [-1.0 / dx, 1.0 / dx];
            let m = m1 * nb[0] + m2 * nb[1];
            let e = e1 * nb[0] + e2 * nb[1];
            let p = rp * e;
            let scale = w_c * gw * dx;
            let local = [j, j + 1];
            for (a, &ia) in local.iter().enumerate() {
                // P0 trial column is the element index j.
                m_m_rho[(ia, j)] += scale * (-m / (rho * rho)) * nb[a];
                f[j] += 0.0; // accumulated once below, outside the test-function loop
                for (bq, &ib) in local.iter().enumerate() {
                    m_mm[(ia, ib)] += scale * nb[a] * nb[bq] / rho;
                    j_me[(ia, ib)] +=
                        scale * (-(e * dnb[bq] + rp * ep * nb[bq] + p * dnb[bq]) / rho) * nb[a];
                    let fr = -m * m.abs() / (rho * rho) * nb[a] * nb[bq];
                    jt_me[(ia, ib)] += scale * fric * fr;
                    jt_me_energy[(ia, ib)] += scale * fric_e * fr;
                    r_mm[(ia, ib)] += scale * fric * m.abs() / (rho * rho) * nb[a] * nb[bq];
                    r_ee[(ia, ib)] += scale * cool * (e / (g.c_v * rho)) * nb[a] * nb[bq];
                }
            }
            f[j] += scale * m * m / (2.0 * rho * rho);
        }
    }
    let eps = f.map(|fj| fj / dx);
    let b_e = (1.0 + rp) * z.e[n] / z.rho[n - 1];
    let t_e = z.e[0];
    Ok(PipeStateOps {
        m_m_rho,
        m_mm,
        j_me,
        jt_me,
        jt_me_energy,
        r_mm,
        r_ee,
        b_e,
        t_e,
        f,
        eps,
    })
}

/// Boundary port of one pipe at a state: flows `f_B = (A·m|_0, −A·m|_L)`
/// and efforts `e_B` (total specific enthalpy) at both ends.
pub fn boundary_port(
    z: &PipeState,
    mesh: &PipeMesh,
    params: &PipeParams,
    g: &GasConstants,
) -> Result<(f64, f64, f64, f64)> {
    z.check_valid(mesh)?;
    let n = mesh.n;
    let f_b_0 = params.area * z.m[0];
    let f_b_l = -params.area * z.m[n];
    let e_b_0 = crate::gas::total_specific_enthalpy(z.rho[0], z.m[0], z.e[0], g)?;
    let e_b_l = crate::gas::total_specific_enthalpy(z.rho[n - 1], z.m[n], z.e[n], g)?;
    Ok((f_b_0, f_b_l, e_b_0, e_b_l))
}

/// Pipe Hamiltonian `A^ω·(½ m^T M_{m,m}(z) m + 1^T M_e e)`, i.e. the exact
/// integral of `m²/(2ρ) + e`.
pub fn hamiltonian(z: &PipeState, mesh: &PipeMesh, params: &PipeParams) -> Result<f64> {
    z.check_valid(mesh)?;
    Ok(params.area * (kinetic_energy(z, mesh, None) + internal_energy(z, mesh)))
}

/// Kinetic part `∫ m²/(2ρ)` with optional per-element quadrature weights.
pub(crate) fn kinetic_energy(z: &PipeState, mesh: &PipeMesh, weights: Option<&[f64]>) -> f64 {
    let dx = mesh.dx;
    (0..mesh.n)
        .map(|j| {
            let w = weights.map_or(1.0, |w| w[j]);
            let (m1, m2) = (z.m[j], z.m[j + 1]);
            w * dx * (m1 * m1 + m1 * m2 + m2 * m2) / (6.0 * z.rho[j])
        })
        .sum()
}

/// Internal part `∫ e = 1^T M_e e` (trapezoidal, exact for P1).
pub(crate) fn internal_energy(z: &PipeState, mesh: &PipeMesh) -> f64 {
    let dx = mesh.dx;
    let n = mesh.n;
    let mut s = (z.e[0] + z.e[n]) / 2.0;
    for i in 1..n {
        s += z.e[i];
    }
    s * dx
}

/// Total mass `A^ω·1^T M_ρ ρ = A^ω·Δx·Σ ρ_j`.
pub fn total_mass(z: &PipeState, mesh: &PipeMesh, params: &PipeParams) -> f64 {
    params.area * mesh.dx * z.rho.sum()
}

/// Per-element residual and Jacobian kernel.
///
/// Computes the contributions of one element to the m-row and e-row
/// residuals (all terms that are state-dependent integrals: the m-row time
/// terms, pressure/effort terms, friction, and the e-row convective,
/// pressure-work, friction-heating, and cooling terms), plus the kinetic
/// element integral `f_j` that defines ε. The ρ-row, the constant e-row
/// mass-matrix time term, boundary traces, and the ε-coupling are handled
/// globally by the network assembly.
#[derive(Debug, Clone, Copy)]
pub struct ElementKernelParams {
    /// Element width.
    pub dx: f64,
    /// R/c_v.
    pub rp: f64,
    /// c_v.
    pub c_v: f64,
    /// λ/(2d) for the momentum row.
    pub fric: f64,
    /// λ/(2d) for the energy row (0 when friction heating is disabled).
    pub fric_e: f64,
    /// k_ω/d.
    pub cool: f64,
}

/// Output of [`element_kernel`]: local residual contributions, the kinetic
/// integral, and (optionally) analytic derivatives.
#[derive(Debug, Clone, Default)]
pub struct ElementKernelOut {
    /// m-row contributions at local nodes (j, j+1).
    pub r_m: [f64; 2],
    /// e-row contributions at local nodes (j, j+1).
    pub r_e: [f64; 2],
    /// Kinetic element integral f_j (no quadrature weight applied).
    pub f: f64,
    /// d r_m / d(ρ_j, m1, m2, e1, e2), including the Newton shift times the
    /// time-derivative sensitivities.
    pub dr_m: [[f64; 5]; 2],
    /// d r_e / d(ρ_j, m1, m2, e1, e2).
    pub dr_e: [[f64; 5]; 2],
    /// d f / d(ρ_j, m1, m2).
    pub df: [f64; 3],
}

/// Local state handed to the element kernel.
#[derive(Debug, Clone, Copy)]
pub struct ElementLocalState {
    /// ρ on this element.
    pub rho: f64,
    /// ρ̇ on this element.
    pub rho_dot: f64,
    /// Nodal m values.
    pub m: [f64; 2],
    /// Nodal ṁ values.
    pub m_dot: [f64; 2],
    /// Nodal e values.
    pub e: [f64; 2],
    /// Nodal values of the discrete effort-one function 1̂ (all ones for the
    /// full-order model; the projected constant for reduced models).
    pub ones: [f64; 2],
}

/// Evaluates the element kernel.
///
/// `w_c` is the quadrature weight of the element (1 for exact quadrature);
/// all returned m-row/e-row contributions and derivatives are scaled by
/// `w_c` while `f` and `df` are returned unweighted. `shift` folds the
/// time-derivative sensitivities into the state columns (implicit Euler uses
/// `shift = 1/τ`). Derivatives are only computed when `want_jac` is set.
pub fn element_kernel(
    kp: &ElementKernelParams,
    st: &ElementLocalState,
    w_c: f64,
    shift: f64,
    want_jac: bool,
) -> ElementKernelOut {
    let mut out = ElementKernelOut::default();
    let dx = kp.dx;
    let rho = st.rho;
    let rho2 = rho * rho;
    let op = (st.ones[1] - st.ones[0]) / dx;
    let ep = (st.e[1] - st.e[0]) / dx;
    let dep = [-1.0 / dx, 1.0 / dx];
    for (gp, gw) in GAUSS_PTS.iter().zip(GAUSS_WTS.iter()) {
        let nb = [1.0 - gp, *gp];
        let dnb = [-1.0 / dx, 1.0 / dx];
        let m = st.m[0] * nb[0] + st.m[1] * nb[1];
        let e = st.e[0] * nb[0] + st.e[1] * nb[1];
        let o = st.ones[0] * nb[0] + st.ones[1] * nb[1];
        let mdot = st.m_dot[0] * nb[0] + st.m_dot[1] * nb[1];
        let p = kp.rp * e;
        // m-row integrands.
        let ti = -m * st.rho_dot / rho2 + mdot / rho;
        let pi_ = (e * op * (1.0 + kp.rp) + kp.rp * ep * o) / rho;
        let fi = kp.fric * m.abs() * m / rho2 * o;
        // e-row integrands.
        let c1 = (e + p) * m / rho;
        let c2 = m / rho * kp.rp * ep;
        let c3 = kp.fric_e * m.abs() * m * m / rho2;
        let c4 = kp.cool * e / (kp.c_v * rho) * o;
        let fk = m * m / (2.0 * rho2);
        let scale = w_c * gw * dx;
        let uscale = gw * dx;
        out.f += uscale * fk;
        for a in 0..2 {
            out.r_m[a] += scale * (ti + pi_ + fi) * nb[a];
            out.r_e[a] += scale * ((-c2 - c3 + c4) * nb[a] - c1 * dnb[a]);
        }
        if !want_jac {
            continue;
        }
        // Derivative components at this Gauss point.
        let dti_drho = 2.0 * m * st.rho_dot / (rho2 * rho) - mdot / rho2 - shift * m / rho2;
        let dpi_drho = -pi_ / rho;
        let dfi_drho = -2.0 * fi / rho;
        let dc1_drho = -c1 / rho;
        let dc2_drho = -c2 / rho;
        let dc3_drho = -2.0 * c3 / rho;
        let dc4_drho = -c4 / rho;
        for a in 0..2 {
            out.dr_m[a][0] += scale * (dti_drho + dpi_drho + dfi_drho) * nb[a];
            out.dr_e[a][0] +=
                scale * ((-dc2_drho - dc3_drho + dc4_drho) * nb[a] - dc1_drho * dnb[a]);
            for k in 0..2 {
                // m-columns (indices 1, 2).
                let dti_dm = -nb[k] * st.rho_dot / rho2 + shift * nb[k] / rho;
                let dfi_dm = kp.fric * 2.0 * m.abs() * nb[k] / rho2 * o;
                let dc1_dm = (1.0 + kp.rp) * e * nb[k] / rho;
                let dc2_dm = nb[k] / rho * kp.rp * ep;
                let dc3_dm = kp.fric_e * 3.0 * m.abs() * m * nb[k] / rho2;
                out.dr_m[a][1 + k] += scale * (dti_dm + dfi_dm) * nb[a];
                out.dr_e[a][1 + k] += scale * ((-dc2_dm - dc3_dm) * nb[a] - dc1_dm * dnb[a]);
                // e-columns (indices 3, 4).
                let dpi_de = (nb[k] * op * (1.0 + kp.rp) + kp.rp * dep[k] * o) / rho;
                let dc1_de = (1.0 + kp.rp) * nb[k] * m / rho;
                let dc2_de = m / rho * kp.rp * dep[k];
                let dc4_de = kp.cool * nb[k] / (kp.c_v * rho) * o;
                out.dr_m[a][3 + k] += scale * dpi_de * nb[a];
                out.dr_e[a][3 + k] += scale * ((-dc2_de + dc4_de) * nb[a] - dc1_de * dnb[a]);
            }
        }
        if want_jac {
            out.df[0] += uscale * (-m * m / (rho2 * rho));
            out.df[1] += uscale * m * nb[0] / rho2;
            out.df[2] += uscale * m * nb[1] / rho2;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::prelude::*;

    fn gas() -> GasConstants {
        GasConstants::new(1.0, 2.5).unwrap()
    }

    fn params() -> PipeParams {
        PipeParams {
            length: 1.0,
            diameter: 0.1,
            lambda_f: 4.0,
            k_omega: 0.5,
            t_inf: 1.0,
            area: 1.0,
            friction_in_energy: true,
        }
    }

    fn random_state(mesh: &PipeMesh, seed: u64) -> PipeState {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        PipeState {
            rho: DVector::from_fn(mesh.n, |_, _| rng.gen_range(1.0..5.0)),
            m: DVector::from_fn(mesh.n + 1, |_, _| rng.gen_range(-1.0..1.0)),
            e: DVector::from_fn(mesh.n + 1, |_, _| rng.gen_range(4.0..12.0)),
        }
    }

    #[test]
    fn mesh_examples() {
        assert_relative_eq!(build_mesh(1.0, 100).unwrap().dx, 0.01);
        assert_eq!(build_mesh(1.0, 2).unwrap().grid(), vec![0.0, 0.5, 1.0]);
        assert_relative_eq!(build_mesh(0.55, 55).unwrap().dx, 0.01);
        assert!(build_mesh(1.0, 1).is_err());
    }

    #[test]
    fn constant_blocks_n2() {
        let mesh = build_mesh(1.0, 2).unwrap();
        let ops = assemble_constant(&mesh, &params());
        assert_relative_eq!(ops.m_rho[0], 0.5);
        assert_relative_eq!(ops.m_rho[1], 0.5);
        let j_expect = DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 0.0, 0.0, 1.0, -1.0]);
        assert_relative_eq!(ops.j_rho_m, j_expect);
        let t_expect = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 0.0, 0.0, -1.0, 0.0]);
        assert_relative_eq!(ops.t_m, t_expect);
        // Kernel of J_{ρ,m} is the constant vector, exactly.
        let ones = DVector::from_element(3, 1.0);
        assert_eq!((&ops.j_rho_m * &ones).amax(), 0.0);
    }

    #[test]
    fn mass_matrix_spd_and_rowsum() {
        let mesh = build_mesh(1.0, 7).unwrap();
        let ops = assemble_constant(&mesh, &params());
        // Row sums of a P1 mass matrix integrate the basis: Δx/2 at ends.
        let ones = DVector::from_element(8, 1.0);
        let sums = &ops.m_m * &ones;
        assert_relative_eq!(sums[0], mesh.dx / 2.0, epsilon = 1e-14);
        assert_relative_eq!(sums[3], mesh.dx, epsilon = 1e-14);
        assert!(ops.m_m.clone().cholesky().is_some());
    }

    #[test]
    fn state_blocks_uniform_eps() {
        let mesh = build_mesh(1.0, 2).unwrap();
        let z = PipeState::uniform(&mesh, 3.0, 0.3, 9.0);
        let ops = assemble_state(&mesh, &params(), &gas(), &z, None).unwrap();
        assert_relative_eq!(ops.eps[0], 0.005, epsilon = 1e-14);
        assert_relative_eq!(ops.eps[1], 0.005, epsilon = 1e-14);
        assert_relative_eq!(ops.t_e, 9.0);
        assert_relative_eq!(ops.b_e, 1.4 * 9.0 / 3.0);
    }

    #[test]
    fn friction_block_vanishes_without_friction() {
        let mesh = build_mesh(1.0, 4).unwrap();
        let mut p = params();
        p.lambda_f = 0.0;
        let z = random_state(&mesh, 3);
        let ops = assemble_state(&mesh, &p, &gas(), &z, None).unwrap();
        assert_eq!(ops.jt_me.amax(), 0.0);
    }

    #[test]
    fn state_blocks_structure() {
        let mesh = build_mesh(1.0, 9).unwrap();
        let z = random_state(&mesh, 11);
        let ops = assemble_state(&mesh, &params(), &gas(), &z, None).unwrap();
        // M_mm symmetric positive definite.
        assert_abs_diff_eq!((&ops.m_mm - ops.m_mm.transpose()).amax(), 0.0, epsilon = 1e-14);
        assert!(ops.m_mm.clone().cholesky().is_some());
        // R_ee symmetric PSD (eigenvalues ≥ −1e−12).
        assert_abs_diff_eq!((&ops.r_ee - ops.r_ee.transpose()).amax(), 0.0, epsilon = 1e-14);
        let eig = ops.r_ee.clone().symmetric_eigenvalues();
        assert!(eig.iter().all(|&l| l >= -1e-12));
        // J̃ blocks are symmetric in themselves (they appear with opposite
        // signs in the m- and e-rows, giving the antisymmetric placement).
        assert_abs_diff_eq!((&ops.jt_me - ops.jt_me.transpose()).amax(), 0.0, epsilon = 1e-13);
        // Resistive form of friction: R_mm·m = −J̃_me·1, R_mm PSD.
        let ones = DVector::from_element(10, 1.0);
        assert_abs_diff_eq!((&ops.r_mm * &z.m + &ops.jt_me * &ones).amax(), 0.0, epsilon = 1e-13);
        let eig_f = ops.r_mm.clone().symmetric_eigenvalues();
        assert!(eig_f.iter().all(|&l| l >= -1e-12));
    }

    #[test]
    fn quadrature_matches_analytic_integrals() {
        // For P0 density the M_{m,ρ}, M_{m,m}, f integrands are polynomials
        // of degree ≤ 2 per element; verify 3-point Gauss against closed
        // forms on random states.
        let mesh = build_mesh(2.0, 5).unwrap();
        let z = random_state(&mesh, 21);
        let ops = assemble_state(&mesh, &params(), &gas(), &z, None).unwrap();
        let dx = mesh.dx;
        for j in 0..mesh.n {
            let (m1, m2) = (z.m[j], z.m[j + 1]);
            let rho = z.rho[j];
            // f_j = ∫ m²/(2ρ²) = Δx (m1²+m1m2+m2²)/(6ρ²).
            let f_exact = dx * (m1 * m1 + m1 * m2 + m2 * m2) / (6.0 * rho * rho);
            assert_relative_eq!(ops.f[j], f_exact, epsilon = 1e-14);
            // M_mm element block: Δx/(3ρ), Δx/(6ρ) pattern on the element.
            let mut diag = dx / (3.0 * rho);
            if j > 0 {
                diag += dx / (3.0 * z.rho[j - 1]);
            }
            assert_relative_eq!(ops.m_mm[(j, j)], diag, epsilon = 1e-13);
            assert_relative_eq!(ops.m_mm[(j, j + 1)], dx / (6.0 * rho), epsilon = 1e-13);
            // M_{m,ρ} column j: −(m_h/ρ²)·∫ N_a = −(2m1+m2)Δx/(6ρ²) at node j.
            let exp_a = -(2.0 * m1 + m2) * dx / (6.0 * rho * rho);
            let exp_b = -(m1 + 2.0 * m2) * dx / (6.0 * rho * rho);
            assert_relative_eq!(ops.m_m_rho[(j, j)], exp_a, epsilon = 1e-13);
            assert_relative_eq!(ops.m_m_rho[(j + 1, j)], exp_b, epsilon = 1e-13);
        }
    }

    #[test]
    fn boundary_port_uniform() {
        let mesh = build_mesh(1.0, 4).unwrap();
        let z = PipeState::uniform(&mesh, 3.0, 0.3, 9.0);
        let (f0, fl, e0, el) = boundary_port(&z, &mesh, &params(), &gas()).unwrap();
        assert_relative_eq!(f0, 0.3);
        assert_relative_eq!(fl, -0.3);
        assert_relative_eq!(e0, 4.205);
        assert_relative_eq!(el, 4.205);
        let z0 = PipeState::uniform(&mesh, 3.0, 0.0, 9.0);
        let (f0, fl, _, _) = boundary_port(&z0, &mesh, &params(), &gas()).unwrap();
        assert_eq!((f0, fl), (0.0, 0.0));
    }

    #[test]
    fn hamiltonian_and_mass_uniform() {
        let mesh = build_mesh(1.0, 10).unwrap();
        let z = PipeState::uniform(&mesh, 3.0, 0.3, 9.0);
        let p = params();
        assert_relative_eq!(hamiltonian(&z, &mesh, &p).unwrap(), 9.015, epsilon = 1e-13);
        assert_relative_eq!(total_mass(&z, &mesh, &p), 3.0, epsilon = 1e-13);
        // Doubling m quadruples the kinetic part only.
        let mut z2 = z.clone();
        z2.m *= 2.0;
        let h2 = hamiltonian(&z2, &mesh, &p).unwrap();
        assert_relative_eq!(h2 - 9.0, 4.0 * 0.015, epsilon = 1e-13);
        // n=2 with rho=(2,4): mass = 0.5·2+0.5·4 = 3.
        let mesh2 = build_mesh(1.0, 2).unwrap();
        let mut z3 = PipeState::uniform(&mesh2, 1.0, 0.0, 9.0);
        z3.rho[0] = 2.0;
        z3.rho[1] = 4.0;
        assert_relative_eq!(total_mass(&z3, &mesh2, &p), 3.0);
    }

    #[test]
    fn kernel_matches_assembled_blocks() {
        // The element kernel must reproduce the residual formed from the
        // assembled operator blocks:
        //   r_m = M_mρ ρ̇ + M_mm ṁ − (J_me + J̃_me)·1
        //   r_e = (J_me + J̃_me,energy)^T m − R_ee·1   (sign: r -= RHS)
        let mesh = build_mesh(1.3, 6).unwrap();
        let p = params();
        let g = gas();
        let z = random_state(&mesh, 5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let rho_dot = DVector::from_fn(mesh.n, |_, _| rng.gen_range(-1.0..1.0));
        let m_dot = DVector::from_fn(mesh.n + 1, |_, _| rng.gen_range(-1.0..1.0));
        let ops = assemble_state(&mesh, &p, &g, &z, None).unwrap();
        let ones = DVector::from_element(mesh.n + 1, 1.0);
        let r_m_blocks = &ops.m_m_rho * &rho_dot + &ops.m_mm * &m_dot - (&ops.j_me + &ops.jt_me) * &ones;
        let r_e_blocks = (&ops.j_me + &ops.jt_me_energy).transpose() * &z.m + &ops.r_ee * &ones;

        let kp = ElementKernelParams {
            dx: mesh.dx,
            rp: g.r / g.c_v,
            c_v: g.c_v,
            fric: p.lambda_f / (2.0 * p.diameter),
            fric_e: p.lambda_f / (2.0 * p.diameter),
            cool: p.k_omega / p.diameter,
        };
        let mut r_m = DVector::zeros(mesh.n + 1);
        let mut r_e = DVector::zeros(mesh.n + 1);
        for j in 0..mesh.n {
            let st = ElementLocalState {
                rho: z.rho[j],
                rho_dot: rho_dot[j],
                m: [z.m[j], z.m[j + 1]],
                m_dot: [m_dot[j], m_dot[j + 1]],
                e: [z.e[j], z.e[j + 1]],
                ones: [1.0, 1.0],
            };
            let out = element_kernel(&kp, &st, 1.0, 0.0, false);
            for a in 0..2 {
                r_m[j + a] += out.r_m[a];
                r_e[j + a] += out.r_e[a];
            }
        }
        assert_abs_diff_eq!((&r_m - &r_m_blocks).amax(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!((&r_e - &r_e_blocks).amax(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kernel_jacobian_matches_finite_differences() {
        let kp = ElementKernelParams {
            dx: 0.02,
            rp: 0.4,
            c_v: 2.5,
            fric: 20.0,
            fric_e: 20.0,
            cool: 5.0,
        };
        let base = ElementLocalState {
            rho: 2.7,
            rho_dot: 0.3,
            m: [0.31, -0.22],
            m_dot: [0.1, -0.2],
            e: [8.5, 9.5],
            ones: [0.9, 1.1],
        };
        let shift = 10.0;
        let out = element_kernel(&kp, &base, 1.0, shift, true);
        let h = 1e-6;
        // Perturb each of the five state slots; time slots move with the
        // shift, mirroring the implicit-Euler coupling ẏ = (y − y_k)/τ.
        for q in 0..5 {
            let mut plus = base;
            let mut minus = base;
            match q {
                0 => {
                    plus.rho += h;
                    minus.rho -= h;
                    plus.rho_dot += shift * h;
                    minus.rho_dot -= shift * h;
                }
                1 | 2 => {
                    plus.m[q - 1] += h;
                    minus.m[q - 1] -= h;
                    plus.m_dot[q - 1] += shift * h;
                    minus.m_dot[q - 1] -= shift * h;
                }
                _ => {
                    plus.e[q - 3] += h;
                    minus.e[q - 3] -= h;
                }
            }
            let op = element_kernel(&kp, &plus, 1.0, shift, false);
            let om = element_kernel(&kp, &minus, 1.0, shift, false);
            for a in 0..2 {
                let fd_m = (op.r_m[a] - om.r_m[a]) / (2.0 * h);
                let fd_e = (op.r_e[a] - om.r_e[a]) / (2.0 * h);
                assert_abs_diff_eq!(out.dr_m[a][q], fd_m, epsilon = 1e-6);
                assert_abs_diff_eq!(out.dr_e[a][q], fd_e, epsilon = 1e-6);
            }
            if q < 3 {
                let fd_f = (op.f - om.f) / (2.0 * h);
                assert_abs_diff_eq!(out.df[q], fd_f, epsilon = 1e-6);
            }
        }
    }
}
