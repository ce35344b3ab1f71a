//! Input and target transformations shared by training and inference.
//!
//! Fluxes become features through a floored base-10 logarithm followed by a
//! per-feature z-score. Targets are mapped to the unit interval by two
//! independent min-max scalers, one for absolute binding energies and one
//! for trap densities in log10 space.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TdsError};
use crate::transport::TrapSpec;

/// Smallest flux, mol/(m²·s), kept distinct before taking logarithms.
pub const FLUX_FLOOR: f64 = 1e-10;

/// Replacement standard deviation for constant features.
pub const STD_GUARD: f64 = 1e-8;

/// `log10(max(J, floor))` for every flux.
pub fn log_floor(fluxes: &[f64]) -> Result<Array1<f64>> {
    fluxes
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            if j.is_nan() || j < 0.0 {
                Err(TdsError::invalid(
                    "flux",
                    format!("entry {i} is {j}; fluxes must be finite and non-negative"),
                ))
            } else {
                Ok(j.max(FLUX_FLOOR).log10())
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(Array1::from)
}

/// Stacks the log-floored fluxes of several spectra into one row each.
pub fn log_floor_rows<'a, I>(rows: I, width: usize) -> Result<Array2<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut data = Vec::new();
    let mut n = 0;
    for row in rows {
        if row.len() != width {
            return Err(TdsError::ShapeMismatch {
                expected: format!("{width} fluxes"),
                got: format!("{}", row.len()),
            });
        }
        data.extend(log_floor(row)?);
        n += 1;
    }
    Ok(Array2::from_shape_vec((n, width), data).expect("row lengths checked"))
}

/// Frozen z-score parameters of the log features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputTransform {
    pub floor: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Feature indices whose spread fell below the guard.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub guarded: Vec<usize>,
}

impl InputTransform {
    /// Population statistics of the training features (rows are samples).
    pub fn fit(features: &Array2<f64>) -> Result<Self> {
        if features.nrows() < 2 {
            return Err(TdsError::invalid(
                "features",
                format!("need at least 2 training rows, got {}", features.nrows()),
            ));
        }
        let mean = features.mean_axis(Axis(0)).expect("non-empty");
        let var = features.var_axis(Axis(0), 0.0);
        let mut guarded = Vec::new();
        let std = var
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let s = v.sqrt();
                if s < STD_GUARD {
                    guarded.push(i);
                    STD_GUARD
                } else {
                    s
                }
            })
            .collect();
        if !guarded.is_empty() {
            log::warn!("{} constant feature(s) standardised with the guard value", guarded.len());
        }
        Ok(Self {
            floor: FLUX_FLOOR,
            mean: mean.to_vec(),
            std,
            guarded,
        })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    fn check_width(&self, got: usize) -> Result<()> {
        if got != self.width() {
            return Err(TdsError::ShapeMismatch {
                expected: format!("{} features", self.width()),
                got: format!("{got}"),
            });
        }
        Ok(())
    }

    /// Standardises log features row by row.
    pub fn apply(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_width(features.ncols())?;
        let mean = ArrayView1::from(&self.mean);
        let std = ArrayView1::from(&self.std);
        Ok((features - &mean) / std)
    }

    /// Log-floors and standardises one raw flux vector.
    pub fn transform_fluxes(&self, fluxes: &[f64]) -> Result<Array1<f64>> {
        self.check_width(fluxes.len())?;
        let logs = log_floor(fluxes)?;
        Ok(logs
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Standard deviation in standardised feature units.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma: 0.05,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(TdsError::invalid("sigma", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Adds zero-mean Gaussian noise of standard deviation `sigma` to every entry.
pub fn add_noise<R: Rng + ?Sized>(features: &mut Array2<f64>, sigma: f64, rng: &mut R) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| TdsError::invalid("sigma", e.to_string()))?;
    features.mapv_inplace(|x| x + normal.sample(rng));
    Ok(())
}

/// Affine map of `[min, max]` onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: f64,
    pub max: f64,
}

impl MinMaxScaler {
    pub fn fit<I: IntoIterator<Item = f64>>(values: I, name: &'static str) -> Result<Self> {
        let (min, max) = values
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !(max > min) || !min.is_finite() || !max.is_finite() {
            return Err(TdsError::invalid(
                name,
                format!("targets must span a non-degenerate finite range, got [{min}, {max}]"),
            ));
        }
        Ok(Self { min, max })
    }

    pub fn scale(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    pub fn unscale(&self, y: f64) -> f64 {
        self.min + y * (self.max - self.min)
    }
}

/// Energy and density scalers of one regressor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputScalers {
    /// Over absolute binding energies, J/mol.
    pub energy: MinMaxScaler,
    /// Over log10 of trap densities in sites/m³.
    pub log_density: MinMaxScaler,
}

/// Inverse-scaled regressor output.
#[derive(Debug, Clone, PartialEq)]
pub struct UnscaledTargets {
    /// `(|ΔH| in J/mol, N_T in sites/m³)` per trap, in output order.
    pub traps: Vec<(f64, f64)>,
    /// Some scaled coordinate fell outside `[0, 1]`.
    pub extrapolated: bool,
}

impl OutputScalers {
    pub fn fit(trap_sets: &[Vec<TrapSpec>]) -> Result<Self> {
        let all = || trap_sets.iter().flatten();
        Ok(Self {
            energy: MinMaxScaler::fit(all().map(TrapSpec::binding_energy_abs), "energy targets")?,
            log_density: MinMaxScaler::fit(all().map(|t| t.density.log10()), "density targets")?,
        })
    }

    /// `k` scaled energies followed by `k` scaled densities.
    pub fn scale_targets(&self, traps: &[TrapSpec]) -> Vec<f64> {
        let energies = traps.iter().map(|t| self.energy.scale(t.binding_energy_abs()));
        let densities = traps.iter().map(|t| self.log_density.scale(t.density.log10()));
        energies.chain(densities).collect()
    }

    pub fn unscale_targets(&self, scaled: &[f64]) -> Result<UnscaledTargets> {
        if !scaled.len().is_multiple_of(2) {
            return Err(TdsError::ShapeMismatch {
                expected: "an even number of outputs".into(),
                got: format!("{}", scaled.len()),
            });
        }
        let k = scaled.len() / 2;
        let extrapolated = scaled.iter().any(|y| !(0.0..=1.0).contains(y));
        let traps = (0..k)
            .map(|i| {
                let energy = self.energy.unscale(scaled[i]);
                let density = 10f64.powf(self.log_density.unscale(scaled[k + i]));
                (energy, density)
            })
            .collect();
        Ok(UnscaledTargets { traps, extrapolated })
    }
}
