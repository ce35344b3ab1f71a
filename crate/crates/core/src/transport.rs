//! Scalar physics kernels: temperature ramp, lattice diffusivity, trapping
//! kinetics and local-equilibrium relations.
//!
//! Every energy is in J/mol, every concentration in mol/m³ and every site
//! density in sites/m³. Conversions happen at the configuration boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TdsError};

/// Physical constants shared by every kernel.
pub mod constants {
    /// Universal gas constant, J/(mol·K).
    pub const R: f64 = 8.314;
    /// Avogadro's number, 1/mol.
    pub const N_A: f64 = 6.022e23;
    /// Molar mass of hydrogen, g/mol.
    pub const M_H: f64 = 1.008;
}

use constants::{M_H, N_A, R};

/// Lattice properties of the host metal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    /// Pre-exponential lattice diffusivity, m²/s.
    pub d0: f64,
    /// Lattice diffusion activation energy, J/mol.
    pub e_lattice: f64,
    /// Interstitial lattice site density, sites/m³.
    pub n_lattice: f64,
    /// Initial (charged) lattice hydrogen concentration, mol/m³.
    pub c_lattice0: f64,
    /// Molar mass of the metal, g/mol. Kept for provenance only.
    pub molar_mass_metal: f64,
    /// Metal density, g/cm³.
    pub density_metal: f64,
    /// Attempt frequency for trapping and de-trapping, 1/s.
    pub nu: f64,
}

impl MaterialParams {
    /// Body-centred cubic iron lattice values.
    pub fn bcc_iron() -> Self {
        Self {
            d0: 7.23e-8,
            e_lattice: 5690.0,
            n_lattice: 5.1e29,
            c_lattice0: 0.06,
            molar_mass_metal: 55.847,
            density_metal: 7.847,
            nu: 1e13,
        }
    }

    /// Lattice site density expressed as a concentration, mol/m³.
    pub fn lattice_sites_mol(&self) -> f64 {
        self.n_lattice / N_A
    }

    /// Initial lattice occupancy.
    pub fn initial_occupancy(&self) -> f64 {
        self.c_lattice0 / self.lattice_sites_mol()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d0", self.d0),
            ("n_lattice", self.n_lattice),
            ("molar_mass_metal", self.molar_mass_metal),
            ("density_metal", self.density_metal),
            ("nu", self.nu),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(TdsError::invalid(name, format!("must be positive, got {value}")));
            }
        }
        if !(self.e_lattice >= 0.0 && self.e_lattice.is_finite()) {
            return Err(TdsError::invalid(
                "e_lattice",
                format!("must be non-negative, got {}", self.e_lattice),
            ));
        }
        if !(self.c_lattice0 >= 0.0 && self.c_lattice0.is_finite()) {
            return Err(TdsError::invalid(
                "c_lattice0",
                format!("must be non-negative, got {}", self.c_lattice0),
            ));
        }
        let theta = self.initial_occupancy();
        if theta >= 1.0 {
            return Err(TdsError::invalid(
                "c_lattice0",
                format!("initial lattice occupancy {theta:.3e} is not below saturation"),
            ));
        }
        Ok(())
    }
}

/// One trap type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapSpec {
    /// Binding energy ΔH = E_t − E_d, J/mol (negative).
    pub delta_h: f64,
    /// Trap site density, sites/m³.
    pub density: f64,
    /// Trapping activation energy, J/mol.
    pub e_trap: f64,
    /// Trapping attempt frequency, 1/s.
    pub nu_trap: f64,
    /// De-trapping attempt frequency, 1/s.
    pub nu_detrap: f64,
}

impl TrapSpec {
    /// Trap with E_t = E_L and both attempt frequencies equal to the
    /// material's `nu`.
    pub fn new(delta_h: f64, density: f64, material: &MaterialParams) -> Self {
        Self {
            delta_h,
            density,
            e_trap: material.e_lattice,
            nu_trap: material.nu,
            nu_detrap: material.nu,
        }
    }

    /// De-trapping activation energy E_d = E_t − ΔH.
    pub fn e_detrap(&self) -> f64 {
        self.e_trap - self.delta_h
    }

    /// Trap site density expressed as a concentration, mol/m³.
    pub fn sites_mol(&self) -> f64 {
        self.density / N_A
    }

    pub fn binding_energy_abs(&self) -> f64 {
        self.delta_h.abs()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_h < 0.0 && self.delta_h.is_finite()) {
            return Err(TdsError::invalid(
                "delta_h",
                format!("binding energy must be negative, got {}", self.delta_h),
            ));
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(TdsError::invalid(
                "density",
                format!("trap density must be positive, got {}", self.density),
            ));
        }
        if !(self.nu_trap > 0.0 && self.nu_detrap > 0.0) {
            return Err(TdsError::invalid("nu", "attempt frequencies must be positive"));
        }
        Ok(())
    }
}

/// TDS protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestParams {
    /// Sample thickness, m.
    pub thickness: f64,
    /// Hold time at `t_min` before the ramp starts, s.
    pub t_rest: f64,
    /// Heating rate, K/s.
    pub heating_rate: f64,
    /// Ramp start temperature, K.
    pub t_min: f64,
    /// Ramp end temperature, K.
    pub t_max: f64,
}

impl TestParams {
    /// Duration of the heating ramp, s.
    pub fn ramp_duration(&self) -> f64 {
        (self.t_max - self.t_min) / self.heating_rate
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.thickness > 0.0) {
            return Err(TdsError::invalid("thickness", "must be positive"));
        }
        if !(self.t_rest >= 0.0) {
            return Err(TdsError::invalid("t_rest", "must be non-negative"));
        }
        if !(self.heating_rate > 0.0) {
            return Err(TdsError::invalid("heating_rate", "must be positive"));
        }
        if !(self.t_min > 0.0 && self.t_max > self.t_min) {
            return Err(TdsError::invalid(
                "t_max",
                format!("need 0 < t_min < t_max, got [{}, {}]", self.t_min, self.t_max),
            ));
        }
        Ok(())
    }
}

/// Ramp temperature at time `t`: constant during the rest period, then
/// linear at `heating_rate`, clamped at `t_max`.
pub fn temperature_at(t: f64, test: &TestParams) -> f64 {
    let ramp = (t - test.t_rest).max(0.0);
    (test.t_min + test.heating_rate * ramp).min(test.t_max)
}

/// Arrhenius lattice diffusivity, m²/s.
pub fn lattice_diffusivity(temperature: f64, material: &MaterialParams) -> f64 {
    material.d0 * (-material.e_lattice / (R * temperature)).exp()
}

/// Trapping rate k, 1/s.
pub fn trap_rate_k(temperature: f64, trap: &TrapSpec) -> f64 {
    trap.nu_trap * (-trap.e_trap / (R * temperature)).exp()
}

/// De-trapping rate p, 1/s.
pub fn trap_rate_p(temperature: f64, trap: &TrapSpec) -> f64 {
    trap.nu_detrap * (-trap.e_detrap() / (R * temperature)).exp()
}

/// Equilibrium constant K_T = (ν_t/ν_d)·exp(−ΔH/RT).
pub fn equilibrium_constant(temperature: f64, trap: &TrapSpec) -> f64 {
    (trap.nu_trap / trap.nu_detrap) * (-trap.delta_h / (R * temperature)).exp()
}

/// Trap occupancy in local equilibrium with lattice occupancy `theta_l`.
pub fn equilibrium_trap_occupancy(theta_l: f64, k_t: f64) -> f64 {
    theta_l * k_t / (1.0 + (k_t - 1.0) * theta_l)
}

/// Derivative of [`equilibrium_trap_occupancy`] with respect to `theta_l`.
pub fn equilibrium_trap_occupancy_slope(theta_l: f64, k_t: f64) -> f64 {
    let denom = 1.0 + (k_t - 1.0) * theta_l;
    k_t / (denom * denom)
}

/// Hydrogen concentration (mol/m³) to weight parts per million.
pub fn concentration_to_wppm(concentration: f64, material: &MaterialParams) -> f64 {
    // g H per m³ over g metal per m³, times 1e6.
    concentration * M_H / (material.density_metal * 1e6) * 1e6
}

pub fn wppm_to_concentration(wppm: f64, material: &MaterialParams) -> f64 {
    wppm / 1e6 * (material.density_metal * 1e6) / M_H
}
