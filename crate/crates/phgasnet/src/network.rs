//! Coupled network system: unknown layout, residual, and analytic Jacobian
//! of the semi-discrete differential-algebraic equation.
//!
//! Unknowns are ordered in variable-major blocks so that model reduction can
//! act on whole variable blocks:
//! `[ρ (all pipes) | m | e | λ_m (2 per pipe) | λ_e (1 per pipe) | u_0 |
//! λ_H | promoted boundary flows]`.
//!
//! Per pipe the dynamic rows are the P0 continuity rows, the P1 momentum
//! rows, and the P1 energy rows; the algebraic rows are the boundary-flow
//! rows `0 = −T_m^T m + f_B`, the inflow-energy row
//! `0 = −t_e^T 1̂ + A·e_target`, the node rows `0 = −B_0^T ẽ + C^T λ_H`
//! (enthalpy equality) and `0 = −C·u_0` (node mass balance), plus one row
//! `ρ_1 = ρ^{bc}(t)` per prescribed-density boundary node whose boundary
//! flow is promoted to an unknown.
//!
//! All per-pipe operators carry the cross-section weight `A^ω`; boundary
//! flows are `f_B = ±A^ω·m|_end` while the multipliers stay intensive.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gas::{self, GasConstants};
use crate::graph::{NetworkGraph, NodeFlowSets};
use crate::pipe::{
    self, assemble_constant, assemble_state, build_mesh, element_kernel, ElementKernelParams,
    ElementLocalState, PipeConstantOps, PipeMesh, PipeState,
};
use crate::signals::Signal;

/// Flow boundary condition at a boundary node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowBc {
    /// Prescribed mass flow m(t) at the node; the boundary flow becomes the
    /// input `±A·m(t)`.
    MassFlow {
        /// Mass-flow signal.
        signal: Signal,
    },
    /// Prescribed density ρ(t) at an inflow node; the boundary flow is
    /// promoted to an unknown closed by the row `ρ_1 = ρ(t)`.
    Density {
        /// Density signal.
        signal: Signal,
    },
}

/// Boundary conditions of one boundary node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeBc {
    /// Node identifier.
    pub node: String,
    /// Flow condition (mass flow or density).
    pub flow: FlowBc,
    /// Prescribed internal energy density at an inflow node; must be absent
    /// at outflow nodes.
    pub energy: Option<Signal>,
}

/// All time-dependent boundary data of a network run. Ambient temperatures
/// live in the per-pipe parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NetworkInputs {
    /// One entry per boundary node.
    pub bcs: Vec<NodeBc>,
}

/// Unknown vector of the network DAE; interpreted through [`Layout`].
pub type NetworkUnknowns = DVector<f64>;

/// Where the boundary flow of a pipe end comes from.
#[derive(Debug, Clone, Copy)]
enum FbSource {
    /// Boundary node with prescribed mass flow: value = `sign·A·m(t)`.
    Input { bc: usize, sign: f64, area: f64 },
    /// Interior node: entry of `u_0` (global unknown index).
    Unknown(usize),
    /// Boundary node with prescribed density: promoted unknown (global index).
    Promoted(usize),
}

/// Where a pipe's inflow-energy target comes from.
#[derive(Debug, Clone, Copy)]
enum EnergySource {
    /// Boundary node: prescribed signal (index into `inputs.bcs`).
    Boundary(usize),
    /// Interior node: isentropic mixing of the incoming pipes
    /// (position in `interior_nodes`).
    Coupling(usize),
}

/// Index layout of the unknown vector.
#[derive(Debug, Clone)]
pub struct Layout {
    /// Total number of density coefficients (elements over all pipes).
    pub n_rho: usize,
    /// Total number of P1 nodal coefficients over all pipes.
    pub n_node: usize,
    /// Per-pipe offset into the ρ block.
    pub rho_off: Vec<usize>,
    /// Per-pipe offset into the nodal (m and e) blocks.
    pub node_off: Vec<usize>,
    /// Start of the m block.
    pub base_m: usize,
    /// Start of the e block.
    pub base_e: usize,
    /// Start of the λ_m block (two entries per pipe: (x=L, x=0)).
    pub base_lm: usize,
    /// Start of the λ_e block (one entry per pipe).
    pub base_le: usize,
    /// Start of the u_0 block.
    pub base_u0: usize,
    /// Start of the λ_H block (one entry per interior node).
    pub base_lh: usize,
    /// Start of the promoted boundary-flow block.
    pub base_fb: usize,
    /// Total unknown count.
    pub dim: usize,
    /// u_0 ordering: (node, edge, end_is_tail) per entry.
    pub u0_order: Vec<(usize, usize, bool)>,
    /// Number of dynamic rows (= ρ, m, e blocks).
    pub n_states: usize,
}

impl Layout {
    /// Global index of ρ_j on pipe `w`.
    #[must_use]
    pub fn idx_rho(&self, w: usize, j: usize) -> usize {
        self.rho_off[w] + j
    }
    /// Global index of m_i on pipe `w`.
    #[must_use]
    pub fn idx_m(&self, w: usize, i: usize) -> usize {
        self.base_m + self.node_off[w] + i
    }
    /// Global index of e_i on pipe `w`.
    #[must_use]
    pub fn idx_e(&self, w: usize, i: usize) -> usize {
        self.base_e + self.node_off[w] + i
    }
    /// Global index of λ_m on pipe `w`; `end` = 0 for x=L, 1 for x=0.
    #[must_use]
    pub fn idx_lm(&self, w: usize, end: usize) -> usize {
        self.base_lm + 2 * w + end
    }
    /// Global index of λ_e on pipe `w`.
    #[must_use]
    pub fn idx_le(&self, w: usize) -> usize {
        self.base_le + w
    }
    /// Global index of the k-th u_0 entry.
    #[must_use]
    pub fn idx_u0(&self, k: usize) -> usize {
        self.base_u0 + k
    }
    /// Global index of λ_H at the l-th interior node.
    #[must_use]
    pub fn idx_lh(&self, l: usize) -> usize {
        self.base_lh + l
    }
}

/// Effort substitutions used by reduced models: the discrete constant
/// function `1̂` on the energy space and the oblique projector applied to
/// the kinetic effort ε. `None` means the exact full-order choice.
#[derive(Debug, Clone, Default)]
pub struct EffortMaps {
    /// Nodal values of 1̂ = V_e V_e^† 1 (length `n_node`); `None` = all ones.
    pub ones: Option<DVector<f64>>,
    /// ε-projector Π_ρ = V_ρ (V_ρ^T M_ρ V_ρ)⁻¹ V_ρ^T M_ρ; `None` = identity.
    pub pi_rho: Option<DMatrix<f64>>,
}

impl EffortMaps {
    /// Full-order maps (identity).
    #[must_use]
    pub fn identity() -> Self {
        Self::default()
    }
}

/// Learned empirical quadrature rule: non-negative per-element weights over
/// the global element ordering; weight zero excludes the element from all
/// nonlinear terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    /// One weight per element (length `n_rho`).
    pub weights: DVector<f64>,
}

impl QuadratureRule {
    /// Number of elements with nonzero weight.
    #[must_use]
    pub fn active_elements(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }
}

/// Assembled residual (and optional Jacobian pieces) of the network DAE.
#[derive(Debug, Clone)]
pub struct Assembly {
    /// Residual vector.
    pub res: DVector<f64>,
    /// Jacobian triplets `(row, col, value)` of
    /// ∂r/∂y + shift·∂r/∂ẏ. When an ε-projector is active the kinetic-term
    /// derivatives are *not* included here; they are returned through
    /// `d_eps` for the reduced-model wrapper to compose with the projector.
    pub jac: Vec<(usize, usize, f64)>,
    /// Triplets of ∂ε/∂y (row = element index, col = global unknown); only
    /// filled when a Jacobian is requested and an ε-projector is active.
    pub d_eps: Vec<(usize, usize, f64)>,
    /// Quadrature-weighted kinetic effort ε before projection.
    pub eps: DVector<f64>,
}

/// pH building blocks of the assembled system at a state, over the rows and
/// columns `[states | λ_m | λ_e | u_0 | λ_H]` (promoted boundary flows are
/// treated as inputs here). Satisfies `r = E·ẏ − (J − R)·ẽ − b_u` on those
/// rows.
#[derive(Debug, Clone)]
pub struct PhParts {
    /// Storage matrix E (nonzero only on the dynamic rows/columns).
    pub e_mat: DMatrix<f64>,
    /// Skew-symmetric interconnection matrix.
    pub j_mat: DMatrix<f64>,
    /// Symmetric positive semi-definite dissipation matrix.
    pub r_mat: DMatrix<f64>,
    /// Input contribution B·u(t) (ambient temperatures, boundary flows,
    /// prescribed inflow energies).
    pub b_u: DVector<f64>,
    /// Effort vector ẽ = [ε̂, m, 1̂, λ_m, λ_e, u_0, λ_H].
    pub efforts: DVector<f64>,
    /// Number of pH rows (`layout.base_fb`).
    pub dim_ph: usize,
}

/// The assembled network DAE: topology, meshes, constant operators, unknown
/// layout, and boundary-condition routing.
#[derive(Debug, Clone)]
pub struct NetworkSystem {
    /// Network topology.
    pub graph: NetworkGraph,
    /// Gas constants.
    pub gas: GasConstants,
    /// Per-pipe meshes.
    pub meshes: Vec<PipeMesh>,
    /// Per-pipe constant operator blocks.
    pub consts: Vec<PipeConstantOps>,
    /// Unknown layout.
    pub layout: Layout,
    /// Boundary data.
    pub inputs: NetworkInputs,
    /// Flow-orientation sets of the interior nodes.
    pub flow_sets: NodeFlowSets,
    /// Boundary-flow source per pipe: [x=0 end, x=L end].
    fb_src: Vec<[FbSource; 2]>,
    /// Inflow-energy source per pipe.
    energy_src: Vec<EnergySource>,
    /// Position of each node in `interior_nodes` (if interior).
    interior_pos: Vec<Option<usize>>,
}

impl NetworkSystem {
    /// Convenience: number of pipes.
    #[must_use]
    pub fn n_pipes(&self) -> usize {
        self.graph.pipes.len()
    }

    /// Extracts the per-pipe field coefficients from an unknown vector.
    #[must_use]
    pub fn split_state(&self, y: &DVector<f64>) -> Vec<PipeState> {
        let l = &self.layout;
        (0..self.n_pipes())
            .map(|w| {
                let n = self.meshes[w].n;
                PipeState {
                    rho: DVector::from_fn(n, |j, _| y[l.idx_rho(w, j)]),
                    m: DVector::from_fn(n + 1, |i, _| y[l.idx_m(w, i)]),
                    e: DVector::from_fn(n + 1, |i, _| y[l.idx_e(w, i)]),
                }
            })
            .collect()
    }

    /// Writes per-pipe field coefficients into the state block of `y`.
    pub fn merge_state(&self, states: &[PipeState], y: &mut DVector<f64>) {
        let l = &self.layout;
        for (w, z) in states.iter().enumerate() {
            for j in 0..z.rho.len() {
                y[l.idx_rho(w, j)] = z.rho[j];
            }
            for i in 0..z.m.len() {
                y[l.idx_m(w, i)] = z.m[i];
                y[l.idx_e(w, i)] = z.e[i];
            }
        }
    }

    /// Network Hamiltonian Σ_ω A^ω ∫ (m²/2ρ + e).
    pub fn network_hamiltonian(&self, y: &DVector<f64>) -> Result<f64> {
        let states = self.split_state(y);
        let mut h = 0.0;
        for (w, z) in states.iter().enumerate() {
            h += pipe::hamiltonian(z, &self.meshes[w], &self.graph.pipes[w].params)?;
        }
        Ok(h)
    }

    /// Quadrature-weighted Hamiltonian of a complexity-reduced model: the
    /// kinetic part uses the learned rule, the internal part stays exact.
    pub fn network_hamiltonian_weighted(
        &self,
        y: &DVector<f64>,
        rule: &QuadratureRule,
    ) -> Result<f64> {
        let states = self.split_state(y);
        let mut h = 0.0;
        for (w, z) in states.iter().enumerate() {
            let mesh = &self.meshes[w];
            z.check_valid(mesh)?;
            let a = self.graph.pipes[w].params.area;
            let wslice = &self.rule_slice(rule, w);
            h += a * (pipe::kinetic_energy(z, mesh, Some(wslice))
                + pipe::internal_energy(z, mesh));
        }
        Ok(h)
    }

    /// Total network mass Σ_ω A^ω Δx^ω Σ_j ρ_j.
    #[must_use]
    pub fn network_total_mass(&self, y: &DVector<f64>) -> f64 {
        let states = self.split_state(y);
        states
            .iter()
            .enumerate()
            .map(|(w, z)| pipe::total_mass(z, &self.meshes[w], &self.graph.pipes[w].params))
            .sum()
    }

    /// Sum of boundary-node boundary flows at a state/time (the mass inflow
    /// rate of the whole network).
    pub fn boundary_inflow(&self, y: &DVector<f64>, t: f64) -> f64 {
        let mut s = 0.0;
        for w in 0..self.n_pipes() {
            for end in 0..2 {
                match self.fb_src[w][end] {
                    FbSource::Input { bc, sign, area } => {
                        if let FlowBc::MassFlow { signal } = &self.inputs.bcs[bc].flow {
                            s += sign * area * signal.eval(t);
                        }
                    }
                    FbSource::Promoted(idx) => s += y[idx],
                    FbSource::Unknown(_) => {}
                }
            }
        }
        s
    }

    /// Per-pipe slice of a global quadrature rule.
    fn rule_slice(&self, rule: &QuadratureRule, w: usize) -> Vec<f64> {
        let off = self.layout.rho_off[w];
        let n = self.meshes[w].n;
        (0..n).map(|j| rule.weights[off + j]).collect()
    }

    /// Boundary flow at a pipe end: `(value, unknown column if any)`.
    /// `end` = 0 for x=0, 1 for x=L.
    fn fb_value(&self, w: usize, end: usize, y: &DVector<f64>, t: f64) -> (f64, Option<usize>) {
        match self.fb_src[w][end] {
            FbSource::Input { bc, sign, area } => {
                let v = match &self.inputs.bcs[bc].flow {
                    FlowBc::MassFlow { signal } => sign * area * signal.eval(t),
                    // Promoted handles the density case; unreachable here.
                    FlowBc::Density { .. } => unreachable!("density BC is promoted"),
                };
                (v, None)
            }
            FbSource::Unknown(idx) | FbSource::Promoted(idx) => (y[idx], Some(idx)),
        }
    }

    /// Inflow-energy target of pipe `w`: prescribed signal at a boundary
    /// node, or the isentropically mixed value at a coupling node. Returns
    /// the value and its derivative triplets `(column, ∂e_t/∂y_col)`.
    fn energy_target(
        &self,
        w: usize,
        y: &DVector<f64>,
        t: f64,
        want_jac: bool,
    ) -> Result<(f64, Vec<(usize, f64)>)> {
        let l = &self.layout;
        let g = &self.gas;
        match self.energy_src[w] {
            EnergySource::Boundary(bc) => {
                let sig = self.inputs.bcs[bc]
                    .energy
                    .as_ref()
                    .expect("validated at assembly: inflow BC has energy signal");
                Ok((sig.eval(t), Vec::new()))
            }
            EnergySource::Coupling(pos) => {
                let incoming = &self.flow_sets.incoming[pos];
                // Flow-weighted entropy mix over the incoming pipes' x=L
                // traces (incoming pipes reach the node with their head).
                let mut pairs = Vec::with_capacity(incoming.len());
                let mut traces = Vec::with_capacity(incoming.len());
                for &wi in incoming {
                    let n = self.meshes[wi].n;
                    let a = self.graph.pipes[wi].params.area;
                    let rho = y[l.idx_rho(wi, n - 1)];
                    let m = y[l.idx_m(wi, n)];
                    let e = y[l.idx_e(wi, n)];
                    let s = gas::specific_entropy(rho, e, g)?;
                    pairs.push((a * m, s));
                    traces.push((wi, n, a, rho, e, s));
                }
                let s_star = gas::entropy_mix(&pairs)?;
                let rho_in = y[l.idx_rho(w, 0)];
                let e_t = gas::energy_from_entropy(rho_in, s_star, g)?;
                let mut derivs = Vec::new();
                if want_jac {
                    let gamma = g.gamma();
                    derivs.push((l.idx_rho(w, 0), gamma * e_t / rho_in));
                    let total: f64 = pairs.iter().map(|(wt, _)| wt).sum();
                    let de_ds = e_t / g.c_v;
                    for &(wi, n, a, rho, e, s) in &traces {
                        let wt = a * y[l.idx_m(wi, n)];
                        // ∂s*/∂m via the mixing weight; ∂s*/∂(ρ,e) via the
                        // pipe entropy s_i = c_v ln((R/c_v) e / ρ^γ).
                        derivs.push((l.idx_m(wi, n), de_ds * a * (s - s_star) / total));
                        derivs.push((l.idx_e(wi, n), de_ds * (wt / total) * g.c_v / e));
                        derivs.push((
                            l.idx_rho(wi, n - 1),
                            de_ds * (wt / total) * (-gamma * g.c_v / rho),
                        ));
                    }
                }
                Ok((e_t, derivs))
            }
        }
    }

    /// Rows of the kinetic coupling operator: triplets
    /// `(momentum row, element index, ±A^ω)` such that the kinetic residual
    /// contribution is `Σ value·ε̂[element]`.
    #[must_use]
    pub fn kinetic_rows(&self) -> Vec<(usize, usize, f64)> {
        let l = &self.layout;
        let mut rows = Vec::new();
        for (w, mesh) in self.meshes.iter().enumerate() {
            let a = self.graph.pipes[w].params.area;
            for j in 0..mesh.n {
                rows.push((l.idx_m(w, j), l.idx_rho(w, j), a));
                rows.push((l.idx_m(w, j + 1), l.idx_rho(w, j), -a));
            }
        }
        rows
    }

    /// Assembles the residual and (optionally) the Jacobian triplets of
    /// ∂r/∂y + shift·∂r/∂ẏ at `(y, ẏ, t)`, with effort substitutions and an
    /// optional empirical quadrature rule.
    pub fn assemble(
        &self,
        y: &DVector<f64>,
        ydot: &DVector<f64>,
        t: f64,
        shift: f64,
        want_jac: bool,
        maps: &EffortMaps,
        rule: Option<&QuadratureRule>,
    ) -> Result<Assembly> {
        let l = &self.layout;
        if y.len() != l.dim || ydot.len() != l.dim {
            return Err(Error::DimensionMismatch(format!(
                "unknown vector length {} (ẏ: {}) does not match layout dimension {}",
                y.len(),
                ydot.len(),
                l.dim
            )));
        }
        let mut res = DVector::zeros(l.dim);
        let mut jac: Vec<(usize, usize, f64)> = Vec::new();
        let mut d_eps: Vec<(usize, usize, f64)> = Vec::new();
        let mut eps = DVector::zeros(l.n_rho);
        let project_eps = maps.pi_rho.is_some();
        let g = &self.gas;
        let rp = g.r / g.c_v;

        // Pass 1: per-pipe rows (continuity, element kernels, time terms,
        // boundary traces, algebraic pipe rows) and the kinetic integrals.
        for (w, mesh) in self.meshes.iter().enumerate() {
            let pipe = &self.graph.pipes[w];
            let p = &pipe.params;
            let a = p.area;
            let n = mesh.n;
            let dx = mesh.dx;
            // Continuity rows: A(Δx ρ̇_j − m_j + m_{j+1}).
            for j in 0..n {
                let r_row = l.idx_rho(w, j);
                res[r_row] += a * (dx * ydot[r_row] - y[l.idx_m(w, j)] + y[l.idx_m(w, j + 1)]);
                if want_jac {
                    jac.push((r_row, r_row, shift * a * dx));
                    jac.push((r_row, l.idx_m(w, j), -a));
                    jac.push((r_row, l.idx_m(w, j + 1), a));
                }
            }
            // Element kernels for the nonlinear m-row/e-row terms.
            let kp = ElementKernelParams {
                dx,
                rp,
                c_v: g.c_v,
                fric: p.lambda_f / (2.0 * p.diameter),
                fric_e: if p.friction_in_energy { p.lambda_f / (2.0 * p.diameter) } else { 0.0 },
                cool: p.k_omega / p.diameter,
            };
            for j in 0..n {
                let ge = l.idx_rho(w, j);
                let rho = y[ge];
                if !(rho > 0.0) {
                    return Err(Error::NonPhysicalState(format!(
                        "density must be positive on pipe '{}', element {j}: {rho}",
                        pipe.id
                    )));
                }
                let w_c = rule.map_or(1.0, |r| r.weights[ge]);
                let nodes = [l.idx_m(w, j), l.idx_m(w, j + 1)];
                let enodes = [l.idx_e(w, j), l.idx_e(w, j + 1)];
                let gn = [self.layout.node_off[w] + j, self.layout.node_off[w] + j + 1];
                let ones = match &maps.ones {
                    Some(o) => [o[gn[0]], o[gn[1]]],
                    None => [1.0, 1.0],
                };
                let st = ElementLocalState {
                    rho,
                    rho_dot: ydot[ge],
                    m: [y[nodes[0]], y[nodes[1]]],
                    m_dot: [ydot[nodes[0]], ydot[nodes[1]]],
                    e: [y[enodes[0]], y[enodes[1]]],
                    ones,
                };
                let need_df = want_jac;
                let out = element_kernel(&kp, &st, w_c, shift, need_df);
                eps[ge] = w_c * out.f / dx;
                let cols = [ge, nodes[0], nodes[1], enodes[0], enodes[1]];
                for aa in 0..2 {
                    res[nodes[aa]] += a * out.r_m[aa];
                    res[enodes[aa]] += a * out.r_e[aa];
                    if want_jac {
                        for (q, &col) in cols.iter().enumerate() {
                            if out.dr_m[aa][q] != 0.0 {
                                jac.push((nodes[aa], col, a * out.dr_m[aa][q]));
                            }
                            if out.dr_e[aa][q] != 0.0 {
                                jac.push((enodes[aa], col, a * out.dr_e[aa][q]));
                            }
                        }
                    }
                }
                if want_jac {
                    // ∂ε_j/∂(ρ_j, m_j, m_{j+1}); ε_j = w_c·f_j/Δx.
                    let dcols = [ge, nodes[0], nodes[1]];
                    for (q, &col) in dcols.iter().enumerate() {
                        let v = w_c * out.df[q] / dx;
                        if v == 0.0 {
                            continue;
                        }
                        if project_eps {
                            d_eps.push((ge, col, v));
                        } else {
                            // Kinetic rows directly: +A at node j, −A at j+1.
                            jac.push((nodes[0], col, a * v));
                            jac.push((nodes[1], col, -a * v));
                        }
                    }
                }
            }
            // Energy time term A·M_e·ė (constant tridiagonal blocks).
            for j in 0..n {
                let (i0, i1) = (l.idx_e(w, j), l.idx_e(w, j + 1));
                res[i0] += a * dx * (ydot[i0] / 3.0 + ydot[i1] / 6.0);
                res[i1] += a * dx * (ydot[i0] / 6.0 + ydot[i1] / 3.0);
                if want_jac {
                    jac.push((i0, i0, shift * a * dx / 3.0));
                    jac.push((i0, i1, shift * a * dx / 6.0));
                    jac.push((i1, i0, shift * a * dx / 6.0));
                    jac.push((i1, i1, shift * a * dx / 3.0));
                }
            }
            // Ambient-temperature input: r_e −= A·b·T_∞.
            for i in 0..=n {
                res[l.idx_e(w, i)] -= a * self.consts[w].b[i] * p.t_inf;
            }
            // Momentum boundary traces: r_m −= A·T_m·λ_m.
            let (lm_l, lm_0) = (l.idx_lm(w, 0), l.idx_lm(w, 1));
            res[l.idx_m(w, 0)] -= a * y[lm_0];
            res[l.idx_m(w, n)] += a * y[lm_l];
            if want_jac {
                jac.push((l.idx_m(w, 0), lm_0, -a));
                jac.push((l.idx_m(w, n), lm_l, a));
            }
            // Energy inflow trace: r_e[0] −= t_e·λ_e with t_e = A·e_1.
            let le = l.idx_le(w);
            let e0 = l.idx_e(w, 0);
            res[e0] -= a * y[e0] * y[le];
            if want_jac {
                jac.push((e0, le, -a * y[e0]));
                jac.push((e0, e0, -a * y[le]));
            }
            // Energy outflow term: r_e[n] −= b_e·f_B|_L.
            let rho_last = y[l.idx_rho(w, n - 1)];
            let e_last = y[l.idx_e(w, n)];
            let b_e = (1.0 + rp) * e_last / rho_last;
            let (fb_l, fb_l_col) = self.fb_value(w, 1, y, t);
            res[l.idx_e(w, n)] -= b_e * fb_l;
            if want_jac {
                jac.push((l.idx_e(w, n), l.idx_e(w, n), -(1.0 + rp) / rho_last * fb_l));
                jac.push((l.idx_e(w, n), l.idx_rho(w, n - 1), b_e / rho_last * fb_l));
                if let Some(col) = fb_l_col {
                    jac.push((l.idx_e(w, n), col, -b_e));
                }
            }
            // Boundary-flow rows (0 = −T_m^T·m + f_B, as r = −RHS):
            // r = −A·m|_L − f_B|_L and r = A·m|_0 − f_B|_0.
            let (fb_0, fb_0_col) = self.fb_value(w, 0, y, t);
            res[lm_l] += -a * y[l.idx_m(w, n)] - fb_l;
            res[lm_0] += a * y[l.idx_m(w, 0)] - fb_0;
            if want_jac {
                jac.push((lm_l, l.idx_m(w, n), -a));
                jac.push((lm_0, l.idx_m(w, 0), a));
                if let Some(col) = fb_l_col {
                    jac.push((lm_l, col, -1.0));
                }
                if let Some(col) = fb_0_col {
                    jac.push((lm_0, col, -1.0));
                }
            }
            // Inflow-energy row (0 = −t_e^T·1̂ + A·e_target, as r = −RHS):
            // r = A·e_1·1̂_1 − A·e_target.
            let ones_first = maps.ones.as_ref().map_or(1.0, |o| o[self.layout.node_off[w]]);
            let (e_t, e_t_derivs) = self.energy_target(w, y, t, want_jac)?;
            res[le] += a * y[e0] * ones_first - a * e_t;
            if want_jac {
                jac.push((le, e0, a * ones_first));
                for &(col, d) in &e_t_derivs {
                    jac.push((le, col, -a * d));
                }
            }
        }

        // Kinetic coupling r_m += A·J_{ρ,m}^T ε̂ with ε̂ the (optionally
        // projected) weighted kinetic effort.
        let eps_hat = match &maps.pi_rho {
            Some(pi) => pi * &eps,
            None => eps.clone(),
        };
        for (w, mesh) in self.meshes.iter().enumerate() {
            let a = self.graph.pipes[w].params.area;
            for j in 0..mesh.n {
                let v = a * eps_hat[l.idx_rho(w, j)];
                res[l.idx_m(w, j)] += v;
                res[l.idx_m(w, j + 1)] -= v;
            }
        }

        // Node rows: enthalpy equality (u_0 rows) and mass balance (λ_H rows).
        for (k, &(node, edge, end_is_tail)) in l.u0_order.iter().enumerate() {
            let row = l.idx_u0(k);
            let w = edge;
            let pos = self.interior_pos[node].expect("u_0 entries live at interior nodes");
            let lh = l.idx_lh(pos);
            // Enthalpy rows (0 = −B_0^T ẽ + C^T λ_H, as r = B_0^T ẽ − C^T λ_H).
            res[row] -= y[lh];
            if want_jac {
                jac.push((row, lh, -1.0));
            }
            if end_is_tail {
                // Inflow end: the boundary effort is λ_m|_0 + (A·e_t/f_B|_0)·λ_e.
                let a = self.graph.pipes[w].params.area;
                let fb = y[row];
                if fb == 0.0 {
                    return Err(Error::BoundaryDegeneracy(format!(
                        "boundary flow of pipe '{}' at node '{}' is zero; the outflow-entropy \
                         coupling divides by it",
                        self.graph.pipes[w].id, self.graph.node_ids[node]
                    )));
                }
                let (e_t, e_t_derivs) = self.energy_target(w, y, t, want_jac)?;
                let le = l.idx_le(w);
                res[row] += y[l.idx_lm(w, 1)] + a * e_t / fb * y[le];
                if want_jac {
                    jac.push((row, l.idx_lm(w, 1), 1.0));
                    jac.push((row, le, a * e_t / fb));
                    jac.push((row, row, -a * e_t * y[le] / (fb * fb)));
                    for &(col, d) in &e_t_derivs {
                        jac.push((row, col, a * y[le] / fb * d));
                    }
                }
            } else {
                // Outflow end: the boundary effort is λ_m|_L + b_e·1̂_last.
                let n = self.meshes[w].n;
                let rho_last = y[l.idx_rho(w, n - 1)];
                let e_last = y[l.idx_e(w, n)];
                let ones_last =
                    maps.ones.as_ref().map_or(1.0, |o| o[self.layout.node_off[w] + n]);
                let b_e = (1.0 + rp) * e_last / rho_last;
                res[row] += y[l.idx_lm(w, 0)] + b_e * ones_last;
                if want_jac {
                    jac.push((row, l.idx_lm(w, 0), 1.0));
                    jac.push((row, l.idx_e(w, n), ones_last * (1.0 + rp) / rho_last));
                    jac.push((row, l.idx_rho(w, n - 1), -ones_last * b_e / rho_last));
                }
            }
        }
        // Node mass-balance rows (0 = −C·u_0, as r = C·u_0 = Σ f_B at ν).
        for (pos, _) in self.graph.interior_nodes.iter().enumerate() {
            let row = l.idx_lh(pos);
            for (k, &(node, _, _)) in l.u0_order.iter().enumerate() {
                if self.interior_pos[node] == Some(pos) {
                    res[row] += y[l.idx_u0(k)];
                    if want_jac {
                        jac.push((row, l.idx_u0(k), 1.0));
                    }
                }
            }
        }

        // Promoted-density rows: ρ_1 − ρ^{bc}(t) = 0.
        for (w, _) in self.meshes.iter().enumerate() {
            if let FbSource::Promoted(idx) = self.fb_src[w][0] {
                let row = idx;
                let bc = self.bc_of_node(self.graph.pipes[w].tail).expect("promoted end has BC");
                let sig = match &self.inputs.bcs[bc].flow {
                    FlowBc::Density { signal } => signal,
                    FlowBc::MassFlow { .. } => unreachable!("promotion only for density BCs"),
                };
                res[row] += y[l.idx_rho(w, 0)] - sig.eval(t);
                if want_jac {
                    jac.push((row, l.idx_rho(w, 0), 1.0));
                }
            }
        }

        Ok(Assembly { res, jac, d_eps, eps })
    }

    /// Fills the multiplier and boundary-flow unknowns of `y` with
    /// closed-form consistent values derived from the state fields:
    /// λ_m from the kinetic-energy traces, λ_e from the inflow enthalpy-flux
    /// factor, node flows from the momentum traces, and λ_H from the total
    /// specific enthalpy at each interior node.
    pub fn fill_closed_form_multipliers(&self, y: &mut DVector<f64>) -> Result<()> {
        let l = &self.layout;
        let rp = self.gas.r / self.gas.c_v;
        for w in 0..self.n_pipes() {
            let n = self.meshes[w].n;
            let rho0 = y[l.idx_rho(w, 0)];
            let rho_l = y[l.idx_rho(w, n - 1)];
            if rho0 <= 0.0 || rho_l <= 0.0 {
                return Err(Error::NonPhysicalState(format!(
                    "non-positive boundary density on pipe {w}"
                )));
            }
            let m0 = y[l.idx_m(w, 0)];
            let m_l = y[l.idx_m(w, n)];
            y[l.idx_lm(w, 0)] = m_l * m_l / (2.0 * rho_l * rho_l);
            y[l.idx_lm(w, 1)] = m0 * m0 / (2.0 * rho0 * rho0);
            y[l.idx_le(w)] = m0 * (1.0 + rp) / rho0;
            if let FbSource::Promoted(idx) = self.fb_src[w][0] {
                y[idx] = self.graph.pipes[w].params.area * m0;
            }
        }
        for (k, &(_, edge, end_is_tail)) in l.u0_order.iter().enumerate() {
            let a = self.graph.pipes[edge].params.area;
            let n = self.meshes[edge].n;
            y[l.idx_u0(k)] = if end_is_tail {
                a * y[l.idx_m(edge, 0)]
            } else {
                -a * y[l.idx_m(edge, n)]
            };
        }
        for (pos, &v) in self.graph.interior_nodes.iter().enumerate() {
            let (edge, is_tail) = self.graph.adjacency[v][0];
            let n = self.meshes[edge].n;
            let (rho, m, e) = if is_tail {
                (y[l.idx_rho(edge, 0)], y[l.idx_m(edge, 0)], y[l.idx_e(edge, 0)])
            } else {
                (y[l.idx_rho(edge, n - 1)], y[l.idx_m(edge, n)], y[l.idx_e(edge, n)])
            };
            y[l.idx_lh(pos)] = gas::total_specific_enthalpy(rho, m, e, &self.gas)?;
        }
        Ok(())
    }

    /// Full-order residual.
    pub fn residual(&self, y: &DVector<f64>, ydot: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        Ok(self
            .assemble(y, ydot, t, 0.0, false, &EffortMaps::identity(), None)?
            .res)
    }

    /// Full-order dense Jacobian ∂r/∂y + shift·∂r/∂ẏ.
    pub fn jacobian(
        &self,
        y: &DVector<f64>,
        ydot: &DVector<f64>,
        t: f64,
        shift: f64,
    ) -> Result<DMatrix<f64>> {
        let asm = self.assemble(y, ydot, t, shift, true, &EffortMaps::identity(), None)?;
        let mut m = DMatrix::zeros(self.layout.dim, self.layout.dim);
        for &(i, j, v) in &asm.jac {
            m[(i, j)] += v;
        }
        Ok(m)
    }

    /// Gradient of the (optionally quadrature-weighted) Hamiltonian with
    /// respect to the state block: ∇_ρ H = −A·w_j·f_j, ∇_m H = A·M_mm^c·m,
    /// ∇_e H = A·M_e^T·1.
    pub fn grad_hamiltonian(
        &self,
        y: &DVector<f64>,
        rule: Option<&QuadratureRule>,
    ) -> Result<DVector<f64>> {
        let l = &self.layout;
        let states = self.split_state(y);
        let mut grad = DVector::zeros(l.n_states);
        for (w, z) in states.iter().enumerate() {
            let mesh = &self.meshes[w];
            let p = &self.graph.pipes[w].params;
            let wslice = rule.map(|r| self.rule_slice(r, w));
            let ops = assemble_state(mesh, p, &self.gas, z, wslice.as_deref())?;
            let a = p.area;
            for j in 0..mesh.n {
                grad[l.idx_rho(w, j)] = -a * ops.f[j];
            }
            let mm = &ops.m_mm * &z.m;
            for i in 0..=mesh.n {
                grad[l.idx_m(w, i)] = a * mm[i];
                // M_e row sums: Δx at interior nodes, Δx/2 at the ends.
                let row_sum = if i == 0 || i == mesh.n { mesh.dx / 2.0 } else { mesh.dx };
                grad[l.idx_e(w, i)] = a * row_sum;
            }
        }
        Ok(grad)
    }

    /// Assembles the dense pH building blocks at a state (see [`PhParts`]).
    pub fn ph_parts(
        &self,
        y: &DVector<f64>,
        t: f64,
        maps: &EffortMaps,
        rule: Option<&QuadratureRule>,
    ) -> Result<PhParts> {
        let l = &self.layout;
        let dim_ph = l.base_fb;
        let mut e_mat = DMatrix::zeros(dim_ph, dim_ph);
        let mut j_mat = DMatrix::zeros(dim_ph, dim_ph);
        let mut r_mat = DMatrix::zeros(dim_ph, dim_ph);
        let mut b_u = DVector::zeros(dim_ph);
        let mut efforts = DVector::zeros(dim_ph);
        let states = self.split_state(y);
        let rp = self.gas.r / self.gas.c_v;

        // Effort vector: [ε̂ | m | 1̂ | λ_m | λ_e | u_0 | λ_H].
        let mut eps = DVector::zeros(l.n_rho);
        for (w, z) in states.iter().enumerate() {
            let mesh = &self.meshes[w];
            let wslice = rule.map(|r| self.rule_slice(r, w));
            let ops =
                assemble_state(mesh, &self.graph.pipes[w].params, &self.gas, z, wslice.as_deref())?;
            for j in 0..mesh.n {
                eps[l.idx_rho(w, j)] = ops.eps[j];
            }
        }
        let eps_hat = match &maps.pi_rho {
            Some(pi) => pi * &eps,
            None => eps,
        };
        for i in 0..l.n_rho {
            efforts[i] = eps_hat[i];
        }
        for (w, z) in states.iter().enumerate() {
            for i in 0..=self.meshes[w].n {
                efforts[l.idx_m(w, i)] = z.m[i];
                efforts[l.idx_e(w, i)] =
                    maps.ones.as_ref().map_or(1.0, |o| o[l.node_off[w] + i]);
            }
        }
        for i in l.base_lm..dim_ph {
            efforts[i] = y[i];
        }

        for (w, z) in states.iter().enumerate() {
            let mesh = &self.meshes[w];
            let p = &self.graph.pipes[w].params;
            let a = p.area;
            let n = mesh.n;
            let wslice = rule.map(|r| self.rule_slice(r, w));
            let ops = assemble_state(mesh, p, &self.gas, z, wslice.as_deref())?;
            // Storage matrix.
            for j in 0..n {
                e_mat[(l.idx_rho(w, j), l.idx_rho(w, j))] = a * mesh.dx;
            }
            for i in 0..=n {
                for j in 0..n {
                    e_mat[(l.idx_m(w, i), l.idx_rho(w, j))] = a * ops.m_m_rho[(i, j)];
                }
                for ii in 0..=n {
                    e_mat[(l.idx_m(w, i), l.idx_m(w, ii))] = a * ops.m_mm[(i, ii)];
                    e_mat[(l.idx_e(w, i), l.idx_e(w, ii))] = a * self.consts[w].m_e[(i, ii)];
                }
            }
            // Interconnection: divergence pair.
            for j in 0..n {
                for (i, s) in [(j, 1.0), (j + 1, -1.0)] {
                    j_mat[(l.idx_rho(w, j), l.idx_m(w, i))] += a * s;
                    j_mat[(l.idx_m(w, i), l.idx_rho(w, j))] -= a * s;
                }
            }
            // Pressure/internal-energy pair and friction.
            for i in 0..=n {
                for ii in 0..=n {
                    j_mat[(l.idx_m(w, i), l.idx_e(w, ii))] += a * ops.j_me[(i, ii)];
                    j_mat[(l.idx_e(w, ii), l.idx_m(w, i))] -= a * ops.j_me[(i, ii)];
                    if p.friction_in_energy {
                        j_mat[(l.idx_m(w, i), l.idx_e(w, ii))] += a * ops.jt_me[(i, ii)];
                        j_mat[(l.idx_e(w, ii), l.idx_m(w, i))] -= a * ops.jt_me[(i, ii)];
                    } else {
                        r_mat[(l.idx_m(w, i), l.idx_m(w, ii))] += a * ops.r_mm[(i, ii)];
                    }
                    r_mat[(l.idx_e(w, i), l.idx_e(w, ii))] += a * ops.r_ee[(i, ii)];
                }
            }
            // Momentum traces.
            let (lm_l, lm_0) = (l.idx_lm(w, 0), l.idx_lm(w, 1));
            j_mat[(l.idx_m(w, 0), lm_0)] += a;
            j_mat[(lm_0, l.idx_m(w, 0))] -= a;
            j_mat[(l.idx_m(w, n), lm_l)] -= a;
            j_mat[(lm_l, l.idx_m(w, n))] += a;
            // Energy inflow trace t_e = A·e_1·δ_1.
            let le = l.idx_le(w);
            j_mat[(l.idx_e(w, 0), le)] += a * z.e[0];
            j_mat[(le, l.idx_e(w, 0))] -= a * z.e[0];
            // Inputs: ambient temperature and boundary flows.
            for i in 0..=n {
                b_u[l.idx_e(w, i)] += a * self.consts[w].b[i] * p.t_inf;
            }
            let b_e = (1.0 + rp) * z.e[n] / z.rho[n - 1];
            let (fb_l, fb_l_col) = self.fb_value(w, 1, y, t);
            match fb_l_col {
                Some(col) if col < dim_ph => {
                    // Interior head: b_e couples the e-row to the u_0 entry.
                    j_mat[(l.idx_e(w, n), col)] += b_e;
                    j_mat[(col, l.idx_e(w, n))] -= b_e;
                    j_mat[(lm_l, col)] += 1.0;
                    j_mat[(col, lm_l)] -= 1.0;
                }
                _ => {
                    // Boundary head (input or promoted): B·u contributions.
                    b_u[l.idx_e(w, n)] += b_e * fb_l;
                    b_u[lm_l] += fb_l;
                }
            }
            let (fb_0, fb_0_col) = self.fb_value(w, 0, y, t);
            let (e_t, _) = self.energy_target(w, y, t, false)?;
            match fb_0_col {
                Some(col) if col < dim_ph => {
                    j_mat[(lm_0, col)] += 1.0;
                    j_mat[(col, lm_0)] -= 1.0;
                    // Entropy-coupling entry A·e_t/f_B (frozen at the state).
                    let v = a * e_t / fb_0;
                    j_mat[(le, col)] += v;
                    j_mat[(col, le)] -= v;
                }
                _ => {
                    b_u[lm_0] += fb_0;
                    b_u[le] += a * e_t;
                }
            }
        }
        // Node coupling C between u_0 and λ_H.
        for (k, &(node, _, _)) in l.u0_order.iter().enumerate() {
            let pos = self.interior_pos[node].expect("interior");
            j_mat[(l.idx_u0(k), l.idx_lh(pos))] += 1.0;
            j_mat[(l.idx_lh(pos), l.idx_u0(k))] -= 1.0;
        }
        Ok(PhParts { e_mat, j_mat, r_mat, b_u, efforts, dim_ph })
    }

    /// Index of the boundary condition attached to `node`, if any.
    fn bc_of_node(&self, node: usize) -> Option<usize> {
        self.inputs
            .bcs
            .iter()
            .position(|bc| self.graph.node_index(&bc.node).ok() == Some(node))
    }
}

/// Builds the coupled network system: validates the boundary-condition
/// rules, assembles per-pipe constant operators, and lays out the unknowns.
pub fn assemble_network(
    graph: NetworkGraph,
    gas: GasConstants,
    inputs: NetworkInputs,
) -> Result<NetworkSystem> {
    for p in &graph.pipes {
        if p.flow_hint != 1 {
            return Err(Error::InvalidConfig(format!(
                "pipe '{}' declares reversed nominal flow; orient the edge along the flow \
                 (x=0 at the inflow end) instead",
                p.id
            )));
        }
    }
    let flow_sets = graph.flow_sets()?;
    let meshes: Vec<PipeMesh> = graph
        .pipes
        .iter()
        .map(|p| build_mesh(p.params.length, p.n_elements))
        .collect::<Result<_>>()?;
    let consts: Vec<PipeConstantOps> = graph
        .pipes
        .iter()
        .zip(&meshes)
        .map(|(p, m)| assemble_constant(m, &p.params))
        .collect();

    // Validate boundary conditions: exactly one entry per boundary node;
    // inflow nodes (pipe tails) carry a flow condition plus the energy
    // value, outflow nodes (pipe heads) carry exactly a mass-flow condition.
    let mut bc_of_node: Vec<Option<usize>> = vec![None; graph.node_ids.len()];
    for (i, bc) in inputs.bcs.iter().enumerate() {
        let v = graph.node_index(&bc.node)?;
        if !graph.is_boundary(v) {
            return Err(Error::InvalidConfig(format!(
                "node '{}' is interior; boundary conditions apply to boundary nodes only",
                bc.node
            )));
        }
        if bc_of_node[v].is_some() {
            return Err(Error::InvalidConfig(format!(
                "node '{}' has more than one boundary condition",
                bc.node
            )));
        }
        match &bc.flow {
            FlowBc::MassFlow { signal } | FlowBc::Density { signal } => signal.validate()?,
        }
        if let Some(sig) = &bc.energy {
            sig.validate()?;
        }
        bc_of_node[v] = Some(i);
    }
    for &v in &graph.boundary_nodes {
        let Some(bc_idx) = bc_of_node[v] else {
            return Err(Error::InvalidConfig(format!(
                "boundary node '{}' has no boundary condition",
                graph.node_ids[v]
            )));
        };
        let (edge, is_tail) = graph.adjacency[v][0];
        let bc = &inputs.bcs[bc_idx];
        if is_tail {
            if bc.energy.is_none() {
                return Err(Error::InvalidConfig(format!(
                    "inflow boundary node '{}' needs two conditions: a flow condition and \
                     the inflow energy density",
                    graph.node_ids[v]
                )));
            }
        } else {
            if bc.energy.is_some() {
                return Err(Error::InvalidConfig(format!(
                    "outflow boundary node '{}' takes exactly one condition (mass flow); \
                     an energy condition is over-determined",
                    graph.node_ids[v]
                )));
            }
            if matches!(bc.flow, FlowBc::Density { .. }) {
                return Err(Error::InvalidConfig(format!(
                    "outflow boundary node '{}' cannot prescribe density (pipe '{}' flows \
                     out there)",
                    graph.node_ids[v], graph.pipes[edge].id
                )));
            }
        }
    }

    // Layout.
    let k = graph.pipes.len();
    let mut rho_off = Vec::with_capacity(k);
    let mut node_off = Vec::with_capacity(k);
    let (mut n_rho, mut n_node) = (0usize, 0usize);
    for m in &meshes {
        rho_off.push(n_rho);
        node_off.push(n_node);
        n_rho += m.n;
        n_node += m.n + 1;
    }
    let base_m = n_rho;
    let base_e = base_m + n_node;
    let n_states = base_e + n_node;
    let base_lm = n_states;
    let base_le = base_lm + 2 * k;
    let base_u0 = base_le + k;
    let u0_order = graph.u0_ordering();
    let base_lh = base_u0 + u0_order.len();
    let base_fb = base_lh + graph.interior_nodes.len();
    // Promoted boundary flows: one per density-BC inflow node.
    let mut n_promoted = 0usize;
    let mut promoted_of_node: Vec<Option<usize>> = vec![None; graph.node_ids.len()];
    for &v in &graph.boundary_nodes {
        if let Some(i) = bc_of_node[v] {
            if matches!(inputs.bcs[i].flow, FlowBc::Density { .. }) {
                promoted_of_node[v] = Some(base_fb + n_promoted);
                n_promoted += 1;
            }
        }
    }
    let dim = base_fb + n_promoted;
    let layout = Layout {
        n_rho,
        n_node,
        rho_off,
        node_off,
        base_m,
        base_e,
        base_lm,
        base_le,
        base_u0,
        base_lh,
        base_fb,
        dim,
        u0_order: u0_order.clone(),
        n_states,
    };

    let mut interior_pos: Vec<Option<usize>> = vec![None; graph.node_ids.len()];
    for (pos, &v) in graph.interior_nodes.iter().enumerate() {
        interior_pos[v] = Some(pos);
    }
    // u_0 lookup per (edge, end).
    let mut u0_of: Vec<[Option<usize>; 2]> = vec![[None, None]; k];
    for (kk, &(_, edge, end_is_tail)) in u0_order.iter().enumerate() {
        u0_of[edge][usize::from(!end_is_tail)] = Some(layout.idx_u0(kk));
    }
    let mut fb_src = Vec::with_capacity(k);
    let mut energy_src = Vec::with_capacity(k);
    for (w, p) in graph.pipes.iter().enumerate() {
        let mut ends = [FbSource::Unknown(0); 2];
        for (end, &node) in [p.tail, p.head].iter().enumerate() {
            ends[end] = if let Some(idx) = u0_of[w][end] {
                FbSource::Unknown(idx)
            } else if let Some(idx) = promoted_of_node[node] {
                FbSource::Promoted(idx)
            } else {
                let bc = bc_of_node[node].expect("validated above");
                let sign = if end == 0 { 1.0 } else { -1.0 };
                FbSource::Input { bc, sign, area: p.params.area }
            };
        }
        fb_src.push(ends);
        energy_src.push(match interior_pos[p.tail] {
            Some(pos) => EnergySource::Coupling(pos),
            None => EnergySource::Boundary(bc_of_node[p.tail].expect("validated above")),
        });
    }

    Ok(NetworkSystem {
        graph,
        gas,
        meshes,
        consts,
        layout,
        inputs,
        flow_sets,
        fb_src,
        energy_src,
        interior_pos,
    })
}


#[cfg(test)]
mod tests {
    use super::test_systems::*;
    use super::*;
    use crate::graph::test_graphs;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::prelude::*;

    fn perturbed_diamond_state(sys: &NetworkSystem) -> (DVector<f64>, DVector<f64>) {
        let l = &sys.layout;
        let base = uniform_unknowns(
            sys,
            &[
                (3.0, 0.3, 9.0),
                (3.0, 0.15, 9.0),
                (3.0, 0.15, 9.0),
                (3.0, 0.15, 9.0),
                (3.0, 0.15, 9.0),
                (3.0, 0.3, 9.0),
            ],
        );
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut y = base;
        for w in 0..sys.n_pipes() {
            let n = sys.meshes[w].n;
            for j in 0..n {
                y[l.idx_rho(w, j)] *= 1.0 + 0.05 * rng.gen_range(-1.0..1.0);
            }
            for i in 0..=n {
                y[l.idx_m(w, i)] += 0.03 * rng.gen_range(-1.0..1.0);
                y[l.idx_e(w, i)] *= 1.0 + 0.05 * rng.gen_range(-1.0..1.0);
            }
            y[l.idx_lm(w, 0)] += 0.002 * rng.gen_range(-1.0..1.0);
            y[l.idx_lm(w, 1)] += 0.002 * rng.gen_range(-1.0..1.0);
            y[l.idx_le(w)] += 0.01 * rng.gen_range(-1.0..1.0);
        }
        for k in 0..l.u0_order.len() {
            y[l.idx_u0(k)] += 0.02 * rng.gen_range(-1.0..1.0);
        }
        for pos in 0..sys.graph.interior_nodes.len() {
            y[l.idx_lh(pos)] += 0.05 * rng.gen_range(-1.0..1.0);
        }
        let ydot = DVector::from_fn(l.dim, |_, _| 0.3 * rng.gen_range(-1.0..1.0));
        (y, ydot)
    }

    #[test]
    fn unknown_counts() {
        let sys = single_pipe(100, 4.0, 0.5);
        assert_eq!(sys.layout.dim, 305);
        assert_eq!(sys.layout.n_states, 302);
        let d = diamond([55, 50, 50, 50, 50, 55]);
        assert_eq!(d.layout.n_rho, 310);
        assert_eq!(d.layout.n_node, 316);
        // 942 states + 12 λ_m + 6 λ_e + 10 u_0 + 4 λ_H + 1 promoted flow.
        assert_eq!(d.layout.dim, 975);
    }

    #[test]
    fn uncoupled_pipes_rejected() {
        let nodes = vec!["a".into(), "b".into(), "c".into(), "d".into()];
        let mk = |id: &str, tail, head| crate::graph::Pipe {
            id: id.into(),
            tail,
            head,
            params: test_graphs::default_params(1.0),
            n_elements: 4,
            flow_hint: 1,
        };
        assert!(NetworkGraph::new(nodes, vec![mk("p1", 0, 1), mk("p2", 2, 3)]).is_err());
    }

    #[test]
    fn bc_validation() {
        let graph = test_graphs::diamond([4, 4, 4, 4, 4, 4]);
        // Missing BC at v6.
        let inputs = NetworkInputs {
            bcs: vec![NodeBc {
                node: "v1".into(),
                flow: FlowBc::MassFlow { signal: Signal::Constant { value: 0.3 } },
                energy: Some(Signal::Constant { value: 9.0 }),
            }],
        };
        assert!(assemble_network(graph.clone(), gas(), inputs).is_err());
        // Energy condition at the outflow node is over-determined.
        let inputs = NetworkInputs {
            bcs: vec![
                NodeBc {
                    node: "v1".into(),
                    flow: FlowBc::MassFlow { signal: Signal::Constant { value: 0.3 } },
                    energy: Some(Signal::Constant { value: 9.0 }),
                },
                NodeBc {
                    node: "v6".into(),
                    flow: FlowBc::MassFlow { signal: Signal::Constant { value: 0.3 } },
                    energy: Some(Signal::Constant { value: 9.0 }),
                },
            ],
        };
        assert!(assemble_network(graph.clone(), gas(), inputs).is_err());
        // Density BC at the outflow node is unsupported.
        let inputs = NetworkInputs {
            bcs: vec![
                NodeBc {
                    node: "v1".into(),
                    flow: FlowBc::MassFlow { signal: Signal::Constant { value: 0.3 } },
                    energy: Some(Signal::Constant { value: 9.0 }),
                },
                NodeBc {
                    node: "v6".into(),
                    flow: FlowBc::Density { signal: Signal::Constant { value: 3.0 } },
                    energy: None,
                },
            ],
        };
        assert!(assemble_network(graph.clone(), gas(), inputs).is_err());
        // Interior-node BC rejected.
        let inputs = NetworkInputs {
            bcs: vec![NodeBc {
                node: "v2".into(),
                flow: FlowBc::MassFlow { signal: Signal::Constant { value: 0.3 } },
                energy: None,
            }],
        };
        assert!(assemble_network(graph, gas(), inputs).is_err());
    }

    #[test]
    fn stationary_state_residual_vanishes() {
        // Without friction and cooling, the uniform state with matching
        // boundary data is an equilibrium of the DAE.
        let sys = single_pipe(10, 0.0, 0.0);
        let y = uniform_unknowns(&sys, &[(3.0, 0.3, 9.0)]);
        let ydot = DVector::zeros(sys.layout.dim);
        let r = sys.residual(&y, &ydot, 0.0).unwrap();
        assert_abs_diff_eq!(r.amax(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn mass_rows_are_linear_divergence() {
        let sys = diamond([6, 5, 5, 5, 5, 6]);
        let (y, ydot) = perturbed_diamond_state(&sys);
        let r = sys.residual(&y, &ydot, 0.0).unwrap();
        let l = &sys.layout;
        for w in 0..sys.n_pipes() {
            let dx = sys.meshes[w].dx;
            for j in 0..sys.meshes[w].n {
                let row = l.idx_rho(w, j);
                let expect =
                    dx * ydot[row] - y[l.idx_m(w, j)] + y[l.idx_m(w, j + 1)];
                assert_relative_eq!(r[row], expect, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let sys = diamond([6, 5, 5, 5, 5, 6]);
        let (y, ydot) = perturbed_diamond_state(&sys);
        let shift = 10.0;
        let jac = sys.jacobian(&y, &ydot, 0.5, shift).unwrap();
        let dim = sys.layout.dim;
        let h = 1e-6;
        let mut worst = 0.0f64;
        for c in 0..dim {
            let mut yp = y.clone();
            let mut ym = y.clone();
            let mut ydp = ydot.clone();
            let mut ydm = ydot.clone();
            yp[c] += h;
            ym[c] -= h;
            ydp[c] += shift * h;
            ydm[c] -= shift * h;
            let rp = sys.residual(&yp, &ydp, 0.5).unwrap();
            let rm = sys.residual(&ym, &ydm, 0.5).unwrap();
            for rrow in 0..dim {
                let fd = (rp[rrow] - rm[rrow]) / (2.0 * h);
                worst = worst.max((jac[(rrow, c)] - fd).abs());
            }
        }
        let scale = 1.0 + jac.amax();
        assert!(worst / scale <= 1e-6, "max Jacobian defect {worst:.3e}");
    }

    #[test]
    fn residual_matches_dense_ph_form() {
        // r = E·ẏ − (J−R)·ẽ − B·u on all pH rows, with E, J, R, B·u and the
        // effort vector assembled independently from the operator blocks.
        let sys = diamond([6, 5, 5, 5, 5, 6]);
        let (y, ydot) = perturbed_diamond_state(&sys);
        let t = 0.25;
        let r = sys.residual(&y, &ydot, t).unwrap();
        let parts = sys.ph_parts(&y, t, &EffortMaps::identity(), None).unwrap();
        let n = parts.dim_ph;
        let ydot_ph = ydot.rows(0, n).into_owned();
        let jr = &parts.j_mat - &parts.r_mat;
        let expect = &parts.e_mat * &ydot_ph - &jr * &parts.efforts - &parts.b_u;
        let defect = (r.rows(0, n) - expect).amax();
        assert_abs_diff_eq!(defect, 0.0, epsilon = 1e-11);
    }

    #[test]
    fn interconnection_skew_and_dissipation_psd() {
        // Include a pipe without friction heating: its friction moves from
        // the skew pair into the resistive block.
        let mut graph = test_graphs::diamond([6, 5, 5, 5, 5, 6]);
        graph.pipes[1].params.friction_in_energy = false;
        graph.pipes[2].params.friction_in_energy = false;
        let inputs = NetworkInputs {
            bcs: vec![
                NodeBc {
                    node: "v1".into(),
                    flow: FlowBc::Density { signal: Signal::Constant { value: 3.0 } },
                    energy: Some(Signal::Constant { value: 9.0 }),
                },
                NodeBc {
                    node: "v6".into(),
                    flow: FlowBc::MassFlow { signal: Signal::Constant { value: 0.3 } },
                    energy: None,
                },
            ],
        };
        let sys = assemble_network(graph, gas(), inputs).unwrap();
        let (y, _) = perturbed_diamond_state(&sys);
        let parts = sys.ph_parts(&y, 0.0, &EffortMaps::identity(), None).unwrap();
        let skew = (&parts.j_mat + parts.j_mat.transpose()).amax();
        assert!(skew <= 1e-12, "skew defect {skew:.3e}");
        let sym = (&parts.r_mat - parts.r_mat.transpose()).amax();
        assert!(sym <= 1e-12);
        let eig = parts.r_mat.clone().symmetric_eigenvalues();
        assert!(eig.iter().all(|&l| l >= -1e-10), "R not PSD");
    }

    #[test]
    fn gradient_condition() {
        // (E^E)^T ẽ^E = ∇H on the state block, with ∇H cross-checked by
        // central finite differences of the Hamiltonian.
        let sys = diamond([6, 5, 5, 5, 5, 6]);
        let (y, _) = perturbed_diamond_state(&sys);
        let parts = sys.ph_parts(&y, 0.0, &EffortMaps::identity(), None).unwrap();
        let lhs = parts.e_mat.transpose() * &parts.efforts;
        let grad = sys.grad_hamiltonian(&y, None).unwrap();
        let ns = sys.layout.n_states;
        let defect = (lhs.rows(0, ns) - &grad).amax();
        assert!(defect <= 1e-10, "gradient-condition defect {defect:.3e}");
        let h = 1e-6;
        let mut worst = 0.0f64;
        for c in 0..ns {
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[c] += h;
            ym[c] -= h;
            let fd = (sys.network_hamiltonian(&yp).unwrap()
                - sys.network_hamiltonian(&ym).unwrap())
                / (2.0 * h);
            worst = worst.max((grad[c] - fd).abs());
        }
        assert!(worst <= 1e-6, "∇H finite-difference defect {worst:.3e}");
    }

    #[test]
    fn enthalpy_rows_vanish_at_equal_enthalpies() {
        let sys = diamond([6, 5, 5, 5, 5, 6]);
        // Uniform (ρ, e) everywhere and per-pipe m chosen so that the node
        // rows balance is irrelevant; enthalpy differences only come from
        // the kinetic part, which is tiny but nonzero across 0.3 vs 0.15.
        // Use equal m so all enthalpies agree exactly.
        let y = uniform_unknowns(&sys, &[(3.0, 0.3, 9.0); 6]);
        let ydot = DVector::zeros(sys.layout.dim);
        let r = sys.residual(&y, &ydot, 0.0).unwrap();
        let l = &sys.layout;
        for k in 0..l.u0_order.len() {
            assert_abs_diff_eq!(r[l.idx_u0(k)], 0.0, epsilon = 1e-12);
        }
        // λ_H equals the common total specific enthalpy 4.205.
        for pos in 0..sys.graph.interior_nodes.len() {
            assert_relative_eq!(y[l.idx_lh(pos)], 4.205, epsilon = 1e-12);
        }
    }

    #[test]
    fn mass_and_hamiltonian_sums() {
        let sys = diamond([55, 50, 50, 50, 50, 55]);
        let y = uniform_unknowns(&sys, &[(3.0, 0.3, 9.0); 6]);
        assert_relative_eq!(sys.network_total_mass(&y), 9.3, epsilon = 1e-12);
        let single = single_pipe(10, 4.0, 0.5);
        let ys = uniform_unknowns(&single, &[(3.0, 0.3, 9.0)]);
        assert_relative_eq!(single.network_hamiltonian(&ys).unwrap(), 9.015, epsilon = 1e-12);
        // Doubling every cross-section doubles both quantities.
        let mut graph2 = test_graphs::diamond([55, 50, 50, 50, 50, 55]);
        for p in &mut graph2.pipes {
            p.params.area = 2.0;
        }
        let sys2 = assemble_network(graph2, gas(), sys.inputs.clone()).unwrap();
        let y2 = uniform_unknowns(&sys2, &[(3.0, 0.3, 9.0); 6]);
        assert_relative_eq!(sys2.network_total_mass(&y2), 18.6, epsilon = 1e-12);
        assert_relative_eq!(
            sys2.network_hamiltonian(&y2).unwrap(),
            2.0 * sys.network_hamiltonian(&y).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn zero_coupling_flow_is_degenerate() {
        let sys = diamond([6, 5, 5, 5, 5, 6]);
        let mut y = uniform_unknowns(&sys, &[(3.0, 0.3, 9.0); 6]);
        // Zero out the first tail-end u_0 entry (an (S_out) division site).
        let l = &sys.layout;
        let k = l
            .u0_order
            .iter()
            .position(|&(_, _, end_is_tail)| end_is_tail)
            .unwrap();
        y[l.idx_u0(k)] = 0.0;
        let ydot = DVector::zeros(l.dim);
        assert!(matches!(
            sys.residual(&y, &ydot, 0.0),
            Err(Error::BoundaryDegeneracy(_))
        ));
    }
}
