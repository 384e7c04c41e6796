//! Ideal-gas closure relations and the coupling-node entropy algebra.
//!
//! All relations follow from the ideal-gas law `p = R·T·ρ` together with the
//! caloric closure `ε = c_v·T` (internal energy density `e = ρ·ε`), which
//! combine to the convenient form `p = (R/c_v)·e`. Entropy is
//! `s = c_v·ln(p/ρ^γ)` with `γ = c_p/c_v` and `c_p = R + c_v`.
//!
//! States with `ρ ≤ 0` or `e ≤ 0` are rejected: the formulas below involve
//! logarithms and divisions that are undefined there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical constants of the (single) gas flowing in the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GasConstants {
    /// Specific gas constant R [J/K].
    pub r: f64,
    /// Heat capacity at constant volume c_v [J/K].
    pub c_v: f64,
}

impl GasConstants {
    /// Creates validated gas constants.
    pub fn new(r: f64, c_v: f64) -> Result<Self> {
        if !(r > 0.0) || !(c_v > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gas constants must be positive: R={r}, c_v={c_v}"
            )));
        }
        Ok(Self { r, c_v })
    }

    /// Heat capacity at constant pressure, `c_p = R + c_v`.
    #[must_use]
    pub fn c_p(&self) -> f64 {
        self.r + self.c_v
    }

    /// Adiabatic index `γ = c_p / c_v`.
    #[must_use]
    pub fn gamma(&self) -> f64 {
        self.c_p() / self.c_v
    }
}

/// Per-pipe geometry, friction, and heat-exchange data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipeParams {
    /// Pipe length L [m].
    pub length: f64,
    /// Pipe diameter d [m].
    pub diameter: f64,
    /// Friction factor λ [-] (named to avoid clashing with Lagrange multipliers).
    pub lambda_f: f64,
    /// Heat-transfer coefficient k_ω [W/(m²K)].
    pub k_omega: f64,
    /// Ambient temperature T_∞ [K].
    pub t_inf: f64,
    /// Cross-sectional area A [m²].
    pub area: f64,
    /// Whether the friction term also acts in the energy equation.
    ///
    /// Mixed-model networks switch friction heating off on selected pipes
    /// while keeping the momentum friction force; this is realized as
    /// coefficient zeroing in the energy row only.
    pub friction_in_energy: bool,
}

impl PipeParams {
    /// Validates the parameter set.
    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0) {
            return Err(Error::InvalidConfig(format!("pipe length must be positive: {}", self.length)));
        }
        if !(self.diameter > 0.0) {
            return Err(Error::InvalidConfig(format!("pipe diameter must be positive: {}", self.diameter)));
        }
        if self.lambda_f < 0.0 || self.k_omega < 0.0 || self.t_inf < 0.0 {
            return Err(Error::InvalidConfig(
                "friction factor, heat-transfer coefficient, and ambient temperature must be nonnegative".into(),
            ));
        }
        if !(self.area > 0.0) {
            return Err(Error::InvalidConfig(format!("pipe area must be positive: {}", self.area)));
        }
        Ok(())
    }
}

fn check_state(rho: f64, e: f64) -> Result<()> {
    if !(rho > 0.0) {
        return Err(Error::NonPhysicalState(format!("density must be positive: rho={rho}")));
    }
    if !(e > 0.0) {
        return Err(Error::NonPhysicalState(format!("internal energy density must be positive: e={e}")));
    }
    Ok(())
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0) {
        return Err(Error::NonPhysicalState(format!("density must be positive: rho={rho}")));
    }
    Ok(())
}

/// Pressure `p = (R/c_v)·e` from density and internal energy density.
pub fn pressure(rho: f64, e: f64, g: &GasConstants) -> Result<f64> {
    check_state(rho, e)?;
    Ok(g.r / g.c_v * e)
}

/// Temperature `T = e/(c_v·ρ)`.
pub fn temperature(rho: f64, e: f64, g: &GasConstants) -> Result<f64> {
    check_rho(rho)?;
    Ok(e / (g.c_v * rho))
}

/// Specific entropy `s = c_v·ln(p/ρ^γ)`.
pub fn specific_entropy(rho: f64, e: f64, g: &GasConstants) -> Result<f64> {
    check_state(rho, e)?;
    let p = g.r / g.c_v * e;
    Ok(g.c_v * (p.ln() - g.gamma() * rho.ln()))
}

/// Internal energy density from entropy: `e = (c_v/R)·ρ^γ·exp(s/c_v)`.
///
/// This inverts [`specific_entropy`] at fixed density and is the closure used
/// to impose entropy equality on outgoing pipes at coupling nodes.
pub fn energy_from_entropy(rho: f64, s_star: f64, g: &GasConstants) -> Result<f64> {
    check_rho(rho)?;
    Ok(g.c_v / g.r * rho.powf(g.gamma()) * (s_star / g.c_v).exp())
}

/// Total specific enthalpy `h = m²/(2ρ²) + (e+p)/ρ`.
///
/// This is the boundary effort paired with the boundary mass flow.
pub fn total_specific_enthalpy(rho: f64, m: f64, e: f64, g: &GasConstants) -> Result<f64> {
    check_rho(rho)?;
    let p = g.r / g.c_v * e;
    Ok(m * m / (2.0 * rho * rho) + (e + p) / rho)
}

/// Speed of sound `c = sqrt(γ·p/ρ)`.
pub fn speed_of_sound(rho: f64, e: f64, g: &GasConstants) -> Result<f64> {
    check_state(rho, e)?;
    let p = g.r / g.c_v * e;
    Ok((g.gamma() * p / rho).sqrt())
}

/// Whether `|m/ρ| < c` holds strictly (subsonic flow).
pub fn is_subsonic(rho: f64, m: f64, e: f64, g: &GasConstants) -> Result<bool> {
    let c = speed_of_sound(rho, e, g)?;
    Ok((m / rho).abs() < c)
}

/// Flow-weighted entropy mix at a coupling node.
///
/// `incoming` holds pairs of (signed incoming mass flow `n^ω[ν]·m^ω|_ν`,
/// entropy `s^ω|_ν`) over the incoming pipes; the result is the flow-weighted
/// average `s* = Σ w·s / Σ w`. The flows must already carry the node
/// orientation sign so that this module stays free of topology logic.
pub fn entropy_mix(incoming: &[(f64, f64)]) -> Result<f64> {
    let total: f64 = incoming.iter().map(|(w, _)| w).sum();
    if total == 0.0 || incoming.is_empty() {
        return Err(Error::BoundaryDegeneracy(
            "entropy mix undefined: total incoming mass flow is zero".into(),
        ));
    }
    let weighted: f64 = incoming.iter().map(|(w, s)| w * s).sum();
    Ok(weighted / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn setup() -> GasConstants {
        GasConstants::new(1.0, 2.5).unwrap()
    }

    #[test]
    fn derived_constants() {
        let g = setup();
        assert_eq!(g.c_p(), 3.5);
        assert_relative_eq!(g.gamma(), 1.4);
    }

    #[test]
    fn pressure_reference_state() {
        let g = setup();
        assert_relative_eq!(pressure(3.0, 9.0, &g).unwrap(), 3.6);
        assert!(pressure(1.0, 0.0, &g).is_err());
        let t = temperature(3.0, 9.0, &g).unwrap();
        assert_relative_eq!(t * g.r * 3.0, pressure(3.0, 9.0, &g).unwrap());
    }

    #[test]
    fn temperature_reference_state() {
        let g = setup();
        assert_relative_eq!(temperature(3.0, 9.0, &g).unwrap(), 1.2);
        assert_relative_eq!(temperature(1.0, g.c_v, &g).unwrap(), 1.0);
        assert!(temperature(-1.0, 9.0, &g).is_err());
    }

    #[test]
    fn entropy_reference_state() {
        let g = setup();
        // Frozen oracle: c_v·ln(3.6/3^1.4) evaluated independently.
        let s = specific_entropy(3.0, 9.0, &g).unwrap();
        assert_relative_eq!(s, 2.5 * (3.6f64 / 3.0f64.powf(1.4)).ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(s, -0.642_808_396_683_223_1, epsilon = 1e-12);
        // p/ρ^γ = 1 ⇒ s = 0.
        assert_abs_diff_eq!(specific_entropy(1.0, g.c_v / g.r, &g).unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn entropy_energy_roundtrip() {
        let g = setup();
        let s = specific_entropy(3.0, 9.0, &g).unwrap();
        assert_relative_eq!(energy_from_entropy(3.0, s, &g).unwrap(), 9.0, epsilon = 1e-12);
        assert_relative_eq!(energy_from_entropy(1.0, 0.0, &g).unwrap(), 2.5, epsilon = 1e-14);
    }

    #[test]
    fn enthalpy_reference_state() {
        let g = setup();
        assert_relative_eq!(total_specific_enthalpy(3.0, 0.3, 9.0, &g).unwrap(), 4.205);
        assert_relative_eq!(total_specific_enthalpy(3.0, 0.0, 9.0, &g).unwrap(), 12.6 / 3.0);
    }

    #[test]
    fn sound_speed_and_subsonic() {
        let g = setup();
        let c = speed_of_sound(3.0, 9.0, &g).unwrap();
        assert_relative_eq!(c, 1.68f64.sqrt());
        assert!(is_subsonic(3.0, 0.3, 9.0, &g).unwrap());
        assert!(is_subsonic(3.0, 0.0, 9.0, &g).unwrap());
        // Exactly sonic flow is not subsonic (strict inequality).
        assert!(!is_subsonic(3.0, 3.0 * c, 9.0, &g).unwrap());
    }

    #[test]
    fn entropy_mix_examples() {
        assert_relative_eq!(entropy_mix(&[(0.3, 7.25)]).unwrap(), 7.25);
        assert_relative_eq!(entropy_mix(&[(0.1, 1.0), (0.1, 3.0)]).unwrap(), 2.0);
        assert_relative_eq!(entropy_mix(&[(0.1, 4.0), (0.3, 0.0)]).unwrap(), 1.0);
        assert!(entropy_mix(&[]).is_err());
        assert!(entropy_mix(&[(0.2, 1.0), (-0.2, 3.0)]).is_err());
    }

    proptest! {
        #[test]
        fn closure_consistency(rho in 0.1f64..50.0, e in 0.1f64..100.0) {
            let g = setup();
            let p = pressure(rho, e, &g).unwrap();
            let t = temperature(rho, e, &g).unwrap();
            prop_assert!((p - g.r * t * rho).abs() <= 1e-12 * p.abs().max(1.0));
            let s = specific_entropy(rho, e, &g).unwrap();
            let e_back = energy_from_entropy(rho, s, &g).unwrap();
            prop_assert!((e_back - e).abs() <= 1e-12 * e);
        }

        #[test]
        fn entropy_mix_scaling_and_reproduction(
            alpha in 0.1f64..10.0,
            w1 in 0.01f64..1.0,
            w2 in 0.01f64..1.0,
            s1 in -2.0f64..2.0,
            s2 in -2.0f64..2.0,
        ) {
            let base = entropy_mix(&[(w1, s1), (w2, s2)]).unwrap();
            let scaled = entropy_mix(&[(alpha * w1, s1), (alpha * w2, s2)]).unwrap();
            prop_assert!((base - scaled).abs() <= 1e-12 * base.abs().max(1.0));
            let common = entropy_mix(&[(w1, s1), (w2, s1)]).unwrap();
            prop_assert!((common - s1).abs() <= 1e-12 * s1.abs().max(1.0));
        }

        #[test]
        fn enthalpy_scale_invariance(
            rho in 0.1f64..10.0,
            m in -5.0f64..5.0,
            e in 0.1f64..20.0,
            alpha in 0.1f64..10.0,
        ) {
            let g = setup();
            let h = total_specific_enthalpy(rho, m, e, &g).unwrap();
            let h_scaled = total_specific_enthalpy(alpha * rho, alpha * m, alpha * e, &g).unwrap();
            prop_assert!((h - h_scaled).abs() <= 1e-10 * h.abs().max(1.0));
        }
    }
}
