//! Global-best particle swarm fitting of trap parameters to a spectrum.
//!
//! Particles move in `(|ΔH| in J/mol, log10 N_T in sites/m³)` coordinates
//! with `k` energies followed by `k` log-densities. Every candidate is
//! scored by simulating it and comparing log-floored fluxes to the target.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Protocol;
use crate::error::{Result, TdsError};
use crate::preprocess::log_floor;
use crate::spectrum::Spectrum;
use crate::transport::{constants::N_A, MaterialParams, TrapSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsoConfig {
    pub swarm_size: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    /// Absolute binding energy bounds, J/mol.
    pub energy_bounds: [f64; 2],
    /// Trap density bounds, sites/m³.
    pub density_bounds: [f64; 2],
    pub seed: u64,
    /// Start positions for the first particles, each a list of
    /// `(|ΔH|, N_T)` pairs in J/mol and sites/m³.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub initial_positions: Vec<Vec<(f64, f64)>>,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            swarm_size: 40,
            iterations: 200,
            inertia: 0.729,
            cognitive: 1.49445,
            social: 1.49445,
            energy_bounds: [10e3, 150e3],
            density_bounds: [0.1 * N_A, 1e5 * N_A],
            seed: 0,
            initial_positions: Vec::new(),
        }
    }
}

impl PsoConfig {
    pub fn validate(&self, n_traps: usize) -> Result<()> {
        if self.swarm_size < 2 {
            return Err(TdsError::invalid("swarm_size", "must be at least 2"));
        }
        if n_traps < 1 {
            return Err(TdsError::invalid("n_traps", "must be at least 1"));
        }
        let ordered = |b: [f64; 2]| b[0] > 0.0 && b[1] > b[0] && b[1].is_finite();
        if !ordered(self.energy_bounds) {
            return Err(TdsError::invalid("energy_bounds", "must be positive and increasing"));
        }
        if !ordered(self.density_bounds) {
            return Err(TdsError::invalid("density_bounds", "must be positive and increasing"));
        }
        if self.initial_positions.len() > self.swarm_size {
            return Err(TdsError::invalid(
                "initial_positions",
                format!("{} positions exceed the swarm of {}", self.initial_positions.len(), self.swarm_size),
            ));
        }
        if let Some(p) = self.initial_positions.iter().find(|p| p.len() != n_traps) {
            return Err(TdsError::invalid(
                "initial_positions",
                format!("each position needs {n_traps} traps, got {}", p.len()),
            ));
        }
        Ok(())
    }

    fn lower(&self, n_traps: usize) -> Vec<f64> {
        let mut v = vec![self.energy_bounds[0]; n_traps];
        v.extend(std::iter::repeat_n(self.density_bounds[0].log10(), n_traps));
        v
    }

    fn upper(&self, n_traps: usize) -> Vec<f64> {
        let mut v = vec![self.energy_bounds[1]; n_traps];
        v.extend(std::iter::repeat_n(self.density_bounds[1].log10(), n_traps));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub n_traps: usize,
    /// Best trap set, sorted by ascending |ΔH|.
    pub traps: Vec<TrapSpec>,
    pub objective: f64,
    /// Global-best objective after initialisation and after every iteration.
    pub trace: Vec<f64>,
    /// Candidates whose simulation failed and scored as infinite.
    pub failed_evaluations: usize,
}

/// Mean squared difference of log-floored fluxes.
pub fn log_flux_mse(simulated: &Spectrum, target: &Spectrum) -> Result<f64> {
    if simulated.len() != target.len() {
        return Err(TdsError::ShapeMismatch {
            expected: format!("{} flux values", target.len()),
            got: format!("{}", simulated.len()),
        });
    }
    let a = log_floor(&simulated.fluxes)?;
    let b = log_floor(&target.fluxes)?;
    Ok((&a - &b).mapv(|d| d * d).mean().unwrap_or(0.0))
}

fn decode(position: &[f64], material: &MaterialParams) -> Vec<TrapSpec> {
    let k = position.len() / 2;
    let mut traps: Vec<TrapSpec> = (0..k)
        .map(|i| TrapSpec::new(-position[i], 10f64.powf(position[k + i]), material))
        .collect();
    traps.sort_by(|a, b| a.binding_energy_abs().total_cmp(&b.binding_energy_abs()));
    traps
}

/// Simulates `traps` and scores them against `target`.
pub fn objective(traps: &[TrapSpec], target: &Spectrum, protocol: &Protocol<'_>) -> Result<f64> {
    let simulated = protocol.simulate(traps)?;
    log_flux_mse(&simulated, target)
}

fn check_target(target: &Spectrum, protocol: &Protocol<'_>) -> Result<()> {
    let expected = protocol.numerical.ntp;
    let grid_min = protocol.test.t_min + (protocol.test.t_max - protocol.test.t_min) / expected as f64;
    let grid_max = protocol.test.t_max;
    let lo = target.temperatures.first().copied().unwrap_or(f64::NAN);
    let hi = target.temperatures.last().copied().unwrap_or(f64::NAN);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * b.abs();
    if target.len() != expected || !close(lo, grid_min) || !close(hi, grid_max) {
        return Err(TdsError::RangeMismatch {
            spectrum_min: lo,
            spectrum_max: hi,
            grid_min,
            grid_max,
        });
    }
    Ok(())
}

fn evaluate(position: &[f64], target: &Spectrum, protocol: &Protocol<'_>) -> (f64, bool) {
    let traps = decode(position, protocol.material);
    match objective(&traps, target, protocol) {
        Ok(v) => (v, false),
        Err(err) => {
            log::warn!("candidate scored as infinite: {err}");
            (f64::INFINITY, true)
        }
    }
}

/// Fits `n_traps` traps to `target`, which must lie on the protocol's grid.
pub fn fit(target: &Spectrum, n_traps: usize, cfg: &PsoConfig, protocol: &Protocol<'_>) -> Result<FitResult> {
    cfg.validate(n_traps)?;
    check_target(target, protocol)?;
    let lower = cfg.lower(n_traps);
    let upper = cfg.upper(n_traps);
    let dims = lower.len();
    let vmax: Vec<f64> = lower.iter().zip(&upper).map(|(l, u)| 0.5 * (u - l)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut positions: Vec<Vec<f64>> = (0..cfg.swarm_size)
        .map(|p| match cfg.initial_positions.get(p) {
            Some(pinned) => {
                let mut x: Vec<f64> = pinned.iter().map(|&(e, _)| e).collect();
                x.extend(pinned.iter().map(|&(_, n)| n.log10()));
                x.iter()
                    .zip(lower.iter().zip(&upper))
                    .map(|(&v, (&l, &u))| v.clamp(l, u))
                    .collect()
            }
            None => (0..dims).map(|d| rng.random_range(lower[d]..=upper[d])).collect(),
        })
        .collect();
    let mut velocities: Vec<Vec<f64>> = (0..cfg.swarm_size)
        .map(|_| (0..dims).map(|d| rng.random_range(-vmax[d]..=vmax[d])).collect())
        .collect();

    let score = |positions: &[Vec<f64>]| -> Vec<(f64, bool)> {
        positions.par_iter().map(|x| evaluate(x, target, protocol)).collect()
    };

    let mut failed = 0;
    let initial = score(&positions);
    failed += initial.iter().filter(|(_, f)| *f).count();
    let mut personal_best = positions.clone();
    let mut personal_value: Vec<f64> = initial.iter().map(|(v, _)| *v).collect();
    let mut best_index = 0;
    for (i, &v) in personal_value.iter().enumerate() {
        if v < personal_value[best_index] {
            best_index = i;
        }
    }
    let mut global_best = personal_best[best_index].clone();
    let mut global_value = personal_value[best_index];
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    trace.push(global_value);

    for iteration in 0..cfg.iterations {
        for p in 0..cfg.swarm_size {
            for d in 0..dims {
                let r1: f64 = rng.random();
                let r2: f64 = rng.random();
                let v = cfg.inertia * velocities[p][d]
                    + cfg.cognitive * r1 * (personal_best[p][d] - positions[p][d])
                    + cfg.social * r2 * (global_best[d] - positions[p][d]);
                velocities[p][d] = v.clamp(-vmax[d], vmax[d]);
                positions[p][d] = (positions[p][d] + velocities[p][d]).clamp(lower[d], upper[d]);
            }
        }
        let scores = score(&positions);
        for (p, &(value, fail)) in scores.iter().enumerate() {
            failed += usize::from(fail);
            if value < personal_value[p] {
                personal_value[p] = value;
                personal_best[p] = positions[p].clone();
            }
            if value < global_value {
                global_value = value;
                global_best = positions[p].clone();
            }
        }
        trace.push(global_value);
        if iteration % 20 == 0 {
            log::debug!("pso iteration {}: best objective {global_value:.4e}", iteration + 1);
        }
    }

    Ok(FitResult {
        n_traps,
        traps: decode(&global_best, protocol.material),
        objective: global_value,
        trace,
        failed_evaluations: failed,
    })
}
