//! The spectrum exchange type and its CSV form.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TdsError};

/// Hydrogen inventory bookkeeping for one simulation, all in mol/m² of one
/// half-domain surface.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MassLedger {
    pub initial: f64,
    /// Time integral of the boundary flux over rest and ramp.
    pub desorbed: f64,
    /// Inventory left in the sample at `t_max`.
    pub residual: f64,
    /// Number of nodal occupancies clipped back into [0, 1].
    pub clipped: usize,
}

/// Desorption flux against temperature.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Spectrum {
    /// Temperatures, K, strictly increasing.
    pub temperatures: Vec<f64>,
    /// Boundary flux, mol/(m²·s).
    pub fluxes: Vec<f64>,
    /// Per-trap release rates, mol/(m²·s), one inner vector per trap.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trap_contributions: Vec<Vec<f64>>,
    /// Release rate of lattice hydrogen, mol/(m²·s); flux equals this plus
    /// the trap contributions.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lattice_release: Vec<f64>,
    /// `(time, flux)` during the rest period, only when requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rest_trace: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger: Option<MassLedger>,
}

impl Spectrum {
    pub fn new(temperatures: Vec<f64>, fluxes: Vec<f64>) -> Result<Self> {
        if temperatures.len() != fluxes.len() {
            return Err(TdsError::ShapeMismatch {
                expected: format!("{} fluxes", temperatures.len()),
                got: format!("{}", fluxes.len()),
            });
        }
        Ok(Self {
            temperatures,
            fluxes,
            ..Default::default()
        })
    }

    pub fn len(&self) -> usize {
        self.temperatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.temperatures.is_empty()
    }

    pub fn peak_flux(&self) -> f64 {
        self.fluxes.iter().copied().fold(0.0, f64::max)
    }

    /// Largest pointwise flux difference relative to this spectrum's peak.
    pub fn max_deviation_of_peak(&self, other: &Spectrum) -> f64 {
        let peak = self.peak_flux();
        self.fluxes
            .iter()
            .zip(&other.fluxes)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / peak
    }

    /// Every flux (and contribution) scaled by two, for whole-sample
    /// reporting from both faces.
    pub fn doubled(&self) -> Self {
        let twice = |v: &Vec<f64>| v.iter().map(|x| 2.0 * x).collect::<Vec<_>>();
        Self {
            temperatures: self.temperatures.clone(),
            fluxes: twice(&self.fluxes),
            trap_contributions: self.trap_contributions.iter().map(twice).collect(),
            lattice_release: twice(&self.lattice_release),
            rest_trace: self.rest_trace.iter().map(|&(t, j)| (t, 2.0 * j)).collect(),
            ledger: self.ledger,
        }
    }

    /// Writes `temperature_K,flux_mol_m2_s[,J_T_1,...]` rows.
    pub fn write_csv<W: Write>(&self, mut out: W, with_contributions: bool) -> Result<()> {
        let extra = if with_contributions {
            self.trap_contributions.len()
        } else {
            0
        };
        write!(out, "temperature_K,flux_mol_m2_s")?;
        for i in 1..=extra {
            write!(out, ",J_T_{i}")?;
        }
        writeln!(out)?;
        for (row, (t, j)) in self.temperatures.iter().zip(&self.fluxes).enumerate() {
            write!(out, "{t:?},{j:?}")?;
            for contribution in self.trap_contributions.iter().take(extra) {
                write!(out, ",{:?}", contribution[row])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Reads the first two columns of a spectrum CSV. A header line and
    /// lines starting with `#` are skipped.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut temperatures = Vec::new();
        let mut fluxes = Vec::new();
        let mut offset = 0usize;
        for line in input.lines() {
            let line = line?;
            let start = offset;
            offset += line.len() + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut cols = trimmed.split(',').map(str::trim);
            let (Some(a), Some(b)) = (cols.next(), cols.next()) else {
                return Err(TdsError::Parse {
                    offset: start,
                    message: "expected at least two columns".into(),
                });
            };
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(t), Ok(j)) => {
                    temperatures.push(t);
                    fluxes.push(j);
                }
                _ if temperatures.is_empty() => continue,
                _ => {
                    return Err(TdsError::Parse {
                        offset: start,
                        message: format!("non-numeric row `{trimmed}`"),
                    })
                }
            }
        }
        Spectrum::new(temperatures, fluxes)
    }
}
