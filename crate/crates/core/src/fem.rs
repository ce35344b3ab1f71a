//! One-dimensional finite-element TDS solver.
//!
//! The half sample `[0, L/2]` is discretised with linear elements. Lattice
//! hydrogen uses a consistent mass matrix (exact two-point Gauss), trapping
//! terms are lumped onto the nodes, time integration is backward Euler and
//! every step is a Newton solve. The outer face carries a penalty outflux
//! `j = k·θ_L·exp(−E_bc/RT)`; the inner face is a symmetry plane.
//!
//! With lumped trapping the trap balance at each node only involves that
//! node's own lattice concentration, so trapped concentrations are
//! eliminated node by node and Newton iterates on a tridiagonal system in
//! the lattice unknowns alone.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TdsError};
use crate::spectrum::{MassLedger, Spectrum};
use crate::transport::{
    constants::R, equilibrium_constant, equilibrium_trap_occupancy,
    equilibrium_trap_occupancy_slope, lattice_diffusivity, temperature_at, trap_rate_k,
    trap_rate_p, MaterialParams, TestParams, TrapSpec,
};

/// Discretisation and solver controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericalParams {
    /// Elements on the half domain.
    pub n_elements: usize,
    /// Number of recorded temperatures.
    pub ntp: usize,
    /// Time steps per recorded point.
    pub sample_frequency: usize,
    /// Boundary penalty rate, mol/(m²·s).
    pub penalty_k: f64,
    /// Penalty scaling energy, J/mol.
    pub e_bc: f64,
    /// Newton residual tolerance relative to the first residual of a step.
    pub newton_rel_tol: f64,
    /// Absolute residual floor, mol/(m²·s).
    pub newton_abs_tol: f64,
    pub newton_max_iter: usize,
    /// Number of times a failing step is retried with half the time step.
    pub max_halvings: u32,
    /// Record the boundary flux during the rest period as well.
    #[serde(default)]
    pub record_rest: bool,
}

impl Default for NumericalParams {
    fn default() -> Self {
        Self {
            n_elements: 25,
            ntp: 64,
            sample_frequency: 10,
            penalty_k: 8e5,
            e_bc: 1.71e4,
            newton_rel_tol: 1e-10,
            newton_abs_tol: 1e-14,
            newton_max_iter: 25,
            max_halvings: 5,
            record_rest: false,
        }
    }
}

impl NumericalParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_elements < 2 {
            return Err(TdsError::invalid("n_elements", "need at least 2 elements"));
        }
        if self.ntp < 2 {
            return Err(TdsError::invalid("ntp", "need at least 2 recorded points"));
        }
        if self.sample_frequency < 1 {
            return Err(TdsError::invalid("sample_frequency", "must be at least 1"));
        }
        if !(self.penalty_k > 0.0) {
            return Err(TdsError::invalid("penalty_k", "must be positive"));
        }
        if self.newton_max_iter < 1 {
            return Err(TdsError::invalid("newton_max_iter", "must be at least 1"));
        }
        Ok(())
    }

    /// Time step of the ramp, `t_test / (ntp·f)`.
    pub fn time_step(&self, test: &TestParams) -> f64 {
        test.ramp_duration() / (self.ntp * self.sample_frequency) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    /// Kinetic trapping with explicit trapped concentrations.
    #[default]
    #[serde(rename = "mcnabb-foster")]
    McNabbFoster,
    /// Local equilibrium between lattice and traps.
    Oriani,
}

/// Nodal solution at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    /// Lattice concentration, mol/m³, one per node.
    pub c_lattice: Vec<f64>,
    /// Trapped concentration per trap per node, mol/m³ (kinetic model only).
    pub c_trapped: Vec<Vec<f64>>,
    pub time: f64,
}

/// Boundary outflux through the penalty condition, mol/(m²·s).
pub fn boundary_flux(theta_boundary: f64, temperature: f64, numerical: &NumericalParams) -> f64 {
    numerical.penalty_k * theta_boundary * (-numerical.e_bc / (R * temperature)).exp()
}

/// Uniformly charged initial state, traps in equilibrium at `t_min`.
pub fn initialize_state(
    material: &MaterialParams,
    traps: &[TrapSpec],
    test: &TestParams,
    numerical: &NumericalParams,
    variant: ModelVariant,
) -> Result<SolverState> {
    material.validate()?;
    let nodes = numerical.n_elements + 1;
    let theta0 = material.initial_occupancy();
    let c_trapped = match variant {
        ModelVariant::Oriani => Vec::new(),
        ModelVariant::McNabbFoster => traps
            .iter()
            .map(|trap| {
                let k_t = equilibrium_constant(test.t_min, trap);
                vec![trap.sites_mol() * equilibrium_trap_occupancy(theta0, k_t); nodes]
            })
            .collect(),
    };
    Ok(SolverState {
        c_lattice: vec![material.c_lattice0; nodes],
        c_trapped,
        time: 0.0,
    })
}

/// Result of advancing the state over one time interval.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: SolverState,
    /// Boundary flux at the end of the interval.
    pub flux: f64,
    /// Per-trap release rate over the interval, mol/(m²·s).
    pub trap_release: Vec<f64>,
    /// Lattice release rate over the interval, mol/(m²·s).
    pub lattice_release: f64,
    /// `∫ j dt` over the interval.
    pub desorbed: f64,
    pub iterations: usize,
    pub clipped: usize,
}

/// A solver bound to one material, trap set and protocol.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    material: &'a MaterialParams,
    traps: &'a [TrapSpec],
    test: &'a TestParams,
    numerical: &'a NumericalParams,
    variant: ModelVariant,
    h: f64,
    /// Lumped nodal weights (row sums of the mass matrix).
    weights: Vec<f64>,
    n_lattice: f64,
}

struct TrapRates {
    sites: f64,
    k: f64,
    p: f64,
    k_eq: f64,
}

impl<'a> Simulator<'a> {
    pub fn new(
        material: &'a MaterialParams,
        traps: &'a [TrapSpec],
        test: &'a TestParams,
        numerical: &'a NumericalParams,
        variant: ModelVariant,
    ) -> Result<Self> {
        material.validate()?;
        test.validate()?;
        numerical.validate()?;
        for trap in traps {
            trap.validate()?;
        }
        let n = numerical.n_elements;
        let h = 0.5 * test.thickness / n as f64;
        let mut weights = vec![h; n + 1];
        weights[0] = 0.5 * h;
        weights[n] = 0.5 * h;
        Ok(Self {
            material,
            traps,
            test,
            numerical,
            variant,
            h,
            weights,
            n_lattice: material.lattice_sites_mol(),
        })
    }

    pub fn initial_state(&self) -> Result<SolverState> {
        initialize_state(self.material, self.traps, self.test, self.numerical, self.variant)
    }

    /// Trapped concentrations per trap and node. For the equilibrium model
    /// they are evaluated from the lattice state.
    pub fn trapped(&self, state: &SolverState) -> Vec<Vec<f64>> {
        match self.variant {
            ModelVariant::McNabbFoster => state.c_trapped.clone(),
            ModelVariant::Oriani => {
                let temperature = temperature_at(state.time, self.test);
                self.traps
                    .iter()
                    .map(|trap| {
                        let k_t = equilibrium_constant(temperature, trap);
                        state
                            .c_lattice
                            .iter()
                            .map(|&c| {
                                let theta = (c / self.n_lattice).clamp(0.0, 1.0);
                                trap.sites_mol() * equilibrium_trap_occupancy(theta, k_t)
                            })
                            .collect()
                    })
                    .collect()
            }
        }
    }

    /// Total hydrogen on the half domain, mol/m².
    pub fn inventory(&self, state: &SolverState) -> f64 {
        let lattice: f64 = self.integrate(&state.c_lattice);
        let trapped: f64 = self.trapped(state).iter().map(|c| self.integrate(c)).sum();
        lattice + trapped
    }

    fn integrate(&self, nodal: &[f64]) -> f64 {
        nodal.iter().zip(&self.weights).map(|(c, w)| c * w).sum()
    }

    fn rates(&self, temperature: f64) -> Vec<TrapRates> {
        self.traps
            .iter()
            .map(|trap| TrapRates {
                sites: trap.sites_mol(),
                k: trap_rate_k(temperature, trap),
                p: trap_rate_p(temperature, trap),
                k_eq: equilibrium_constant(temperature, trap),
            })
            .collect()
    }

    /// One backward-Euler step of size `dt` from `state`, solved by Newton
    /// iteration. Fails with [`TdsError::NonConvergence`] when the residual
    /// does not drop below tolerance within `newton_max_iter` iterations.
    pub fn step(&self, state: &SolverState, dt: f64, step_index: usize) -> Result<StepOutcome> {
        let nodes = state.c_lattice.len();
        let t_new = state.time + dt;
        let temp_new = temperature_at(t_new, self.test);
        let diffusivity = lattice_diffusivity(temp_new, self.material);
        let rates = self.rates(temp_new);
        let h_bc = boundary_flux(1.0, temp_new, self.numerical) / self.n_lattice;
        let trapped_old = self.trapped(state);

        let mass_diag = 2.0 * self.h / (3.0 * dt);
        let mass_off = self.h / (6.0 * dt);
        let stiff = diffusivity / self.h;

        let c_old = &state.c_lattice;
        let mut c = c_old.clone();
        let mut residual = vec![0.0; nodes];
        let mut diag = vec![0.0; nodes];
        let mut off = vec![0.0; nodes - 1];
        let mut trapped_new = vec![vec![0.0; nodes]; self.traps.len()];

        let mut first_norm = None;
        let mut iterations = 0;
        loop {
            // Residual and Jacobian at the current iterate.
            for i in 0..nodes {
                let w = self.weights[i];
                let edge = i == 0 || i == nodes - 1;
                let m_diag = if edge { mass_diag * 0.5 } else { mass_diag };
                let k_diag = if edge { stiff } else { 2.0 * stiff };
                let mut r = m_diag * (c[i] - c_old[i]) + k_diag * c[i];
                let mut d = m_diag + k_diag;
                if i > 0 {
                    r += mass_off * (c[i - 1] - c_old[i - 1]) - stiff * c[i - 1];
                }
                if i + 1 < nodes {
                    r += mass_off * (c[i + 1] - c_old[i + 1]) - stiff * c[i + 1];
                }
                let (theta, dtheta) = {
                    let raw = c[i] / self.n_lattice;
                    if raw <= 0.0 {
                        (0.0, 0.0)
                    } else if raw >= 1.0 {
                        (1.0, 0.0)
                    } else {
                        (raw, 1.0 / self.n_lattice)
                    }
                };
                for (j, tr) in rates.iter().enumerate() {
                    let (ct, slope) =
                        self.trapped_response(tr, theta, trapped_old[j][i], dt);
                    trapped_new[j][i] = ct;
                    r += w * (ct - trapped_old[j][i]) / dt;
                    d += w * slope * dtheta / dt;
                }
                if i == nodes - 1 {
                    r += h_bc * c[i];
                    d += h_bc;
                }
                residual[i] = r;
                diag[i] = d;
            }
            off.iter_mut().for_each(|o| *o = mass_off - stiff);

            let norm = residual.iter().map(|r| r * r).sum::<f64>().sqrt();
            let reference = *first_norm.get_or_insert(norm);
            if norm <= (self.numerical.newton_rel_tol * reference).max(self.numerical.newton_abs_tol)
            {
                break;
            }
            if iterations >= self.numerical.newton_max_iter || !norm.is_finite() {
                return Err(TdsError::NonConvergence {
                    step: step_index,
                    time: t_new,
                    iterations,
                    residual: norm,
                });
            }
            let delta = solve_symmetric_tridiagonal(&diag, &off, &residual);
            for (ci, di) in c.iter_mut().zip(&delta) {
                *ci = (*ci - di).clamp(0.0, self.n_lattice);
            }
            iterations += 1;
        }

        let mut clipped = 0;
        for ci in c.iter_mut() {
            if *ci < 0.0 || *ci > self.n_lattice {
                *ci = ci.clamp(0.0, self.n_lattice);
                clipped += 1;
            }
        }
        let c_trapped = match self.variant {
            ModelVariant::Oriani => Vec::new(),
            ModelVariant::McNabbFoster => {
                for (trap_values, tr) in trapped_new.iter_mut().zip(&rates) {
                    for v in trap_values.iter_mut() {
                        if *v < 0.0 || *v > tr.sites {
                            *v = v.clamp(0.0, tr.sites);
                            clipped += 1;
                        }
                    }
                }
                trapped_new.clone()
            }
        };
        let trap_release = trapped_new
            .iter()
            .zip(&trapped_old)
            .map(|(new, old)| {
                -new.iter()
                    .zip(old)
                    .zip(&self.weights)
                    .map(|((a, b), w)| w * (a - b))
                    .sum::<f64>()
                    / dt
            })
            .collect();
        let lattice_release = -c
            .iter()
            .zip(c_old)
            .zip(&self.weights)
            .map(|((a, b), w)| w * (a - b))
            .sum::<f64>()
            / dt;
        let flux = h_bc * c[nodes - 1];
        Ok(StepOutcome {
            state: SolverState {
                c_lattice: c,
                c_trapped,
                time: t_new,
            },
            flux,
            trap_release,
            lattice_release,
            desorbed: flux * dt,
            iterations,
            clipped,
        })
    }

    /// Trapped concentration after a step and its derivative with respect
    /// to lattice occupancy, for one node.
    fn trapped_response(&self, tr: &TrapRates, theta: f64, c_old: f64, dt: f64) -> (f64, f64) {
        match self.variant {
            ModelVariant::McNabbFoster => {
                // (c_T − c_T⁰)/dt = N_T·k·θ_L − c_T·(k·θ_L + p·(1 − θ_L))
                let a = c_old / dt + tr.sites * tr.k * theta;
                let b = 1.0 / dt + tr.k * theta + tr.p * (1.0 - theta);
                let ct = a / b;
                let slope = (tr.sites * tr.k * b - a * (tr.k - tr.p)) / (b * b);
                (ct, slope)
            }
            ModelVariant::Oriani => (
                tr.sites * equilibrium_trap_occupancy(theta, tr.k_eq),
                tr.sites * equilibrium_trap_occupancy_slope(theta, tr.k_eq),
            ),
        }
    }

    /// Advances over `dt`, halving the step up to `max_halvings` times when
    /// Newton fails.
    pub fn advance(&self, state: &SolverState, dt: f64, step_index: usize) -> Result<StepOutcome> {
        let mut last_err = None;
        for level in 0..=self.numerical.max_halvings {
            let substeps = 1usize << level;
            let sub_dt = dt / substeps as f64;
            match self.substeps(state, sub_dt, substeps, step_index) {
                Ok(outcome) => {
                    if level > 0 {
                        log::debug!("step {step_index} converged with {substeps} substeps");
                    }
                    return Ok(outcome);
                }
                Err(err @ TdsError::NonConvergence { .. }) => last_err = Some(err),
                Err(err) => return Err(err),
            }
        }
        Err(last_err.expect("at least one attempt"))
    }

    fn substeps(
        &self,
        state: &SolverState,
        sub_dt: f64,
        count: usize,
        step_index: usize,
    ) -> Result<StepOutcome> {
        let start = state.time;
        let mut current = self.step(state, sub_dt, step_index)?;
        if count == 1 {
            return Ok(current);
        }
        let trapped_start = self.trapped(state);
        let mut desorbed = current.desorbed;
        let mut iterations = current.iterations;
        let mut clipped = current.clipped;
        for _ in 1..count {
            let next = self.step(&current.state, sub_dt, step_index)?;
            desorbed += next.desorbed;
            iterations += next.iterations;
            clipped += next.clipped;
            current = next;
        }
        let dt = current.state.time - start;
        let trapped_end = self.trapped(&current.state);
        current.trap_release = trapped_end
            .iter()
            .zip(&trapped_start)
            .map(|(new, old)| {
                -new.iter()
                    .zip(old)
                    .zip(&self.weights)
                    .map(|((a, b), w)| w * (a - b))
                    .sum::<f64>()
                    / dt
            })
            .collect();
        current.lattice_release = -current
            .state
            .c_lattice
            .iter()
            .zip(&state.c_lattice)
            .zip(&self.weights)
            .map(|((a, b), w)| w * (a - b))
            .sum::<f64>()
            / dt;
        current.desorbed = desorbed;
        current.iterations = iterations;
        current.clipped = clipped;
        Ok(current)
    }

    /// Rest period followed by the ramp, recording `ntp` points.
    pub fn run(&self) -> Result<Spectrum> {
        let np = self.numerical;
        let dt = np.time_step(self.test);
        let mut state = self.initial_state()?;
        let initial = self.inventory(&state);
        let mut ledger = MassLedger {
            initial,
            ..Default::default()
        };
        let mut spectrum = Spectrum::default();
        let mut step_index = 0;

        if self.test.t_rest > 0.0 {
            let n_rest = (self.test.t_rest / dt).ceil().max(1.0) as usize;
            let dt_rest = self.test.t_rest / n_rest as f64;
            for i in 1..=n_rest {
                let mut outcome = self.advance(&state, dt_rest, step_index)?;
                // Land exactly on the ramp start.
                outcome.state.time = dt_rest * i as f64;
                ledger.desorbed += outcome.desorbed;
                ledger.clipped += outcome.clipped;
                if np.record_rest && i % np.sample_frequency == 0 || np.record_rest && i == n_rest {
                    spectrum.rest_trace.push((outcome.state.time, outcome.flux));
                }
                state = outcome.state;
                step_index += 1;
            }
            state.time = self.test.t_rest;
        }

        let n_ramp = np.ntp * np.sample_frequency;
        spectrum.trap_contributions = vec![Vec::with_capacity(np.ntp); self.traps.len()];
        for i in 1..=n_ramp {
            let mut outcome = self.advance(&state, dt, step_index)?;
            outcome.state.time = self.test.t_rest + dt * i as f64;
            ledger.desorbed += outcome.desorbed;
            ledger.clipped += outcome.clipped;
            if i % np.sample_frequency == 0 {
                spectrum
                    .temperatures
                    .push(temperature_at(outcome.state.time, self.test));
                spectrum.fluxes.push(outcome.flux);
                spectrum.lattice_release.push(outcome.lattice_release);
                for (series, value) in spectrum
                    .trap_contributions
                    .iter_mut()
                    .zip(&outcome.trap_release)
                {
                    series.push(*value);
                }
            }
            state = outcome.state;
            step_index += 1;
        }
        if ledger.clipped > 0 {
            log::warn!("{} nodal occupancies clipped into [0, 1]", ledger.clipped);
        }
        ledger.residual = self.inventory(&state);
        spectrum.ledger = Some(ledger);
        Ok(spectrum)
    }
}

/// Simulates a complete TDS test.
pub fn simulate_tds(
    material: &MaterialParams,
    traps: &[TrapSpec],
    test: &TestParams,
    numerical: &NumericalParams,
    variant: ModelVariant,
) -> Result<Spectrum> {
    Simulator::new(material, traps, test, numerical, variant)?.run()
}

/// Relative hydrogen imbalance `|initial − (desorbed + residual)| / initial`
/// from the spectrum's ledger. Zero when the sample starts empty.
pub fn mass_audit(spectrum: &Spectrum) -> f64 {
    let Some(ledger) = spectrum.ledger else {
        return f64::NAN;
    };
    if ledger.initial == 0.0 {
        return 0.0;
    }
    (ledger.initial - (ledger.desorbed + ledger.residual)).abs() / ledger.initial
}

/// Thomas algorithm for a symmetric tridiagonal system `A x = b` with
/// diagonal `diag` and off-diagonal `off`.
fn solve_symmetric_tridiagonal(diag: &[f64], off: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c_prime = vec![0.0; n];
    let mut d_prime = vec![0.0; n];
    c_prime[0] = if n > 1 { off[0] / diag[0] } else { 0.0 };
    d_prime[0] = rhs[0] / diag[0];
    for i in 1..n {
        let denom = diag[i] - off[i - 1] * c_prime[i - 1];
        if i < n - 1 {
            c_prime[i] = off[i] / denom;
        }
        d_prime[i] = (rhs[i] - off[i - 1] * d_prime[i - 1]) / denom;
    }
    let mut x = d_prime;
    for i in (0..n - 1).rev() {
        x[i] -= c_prime[i] * x[i + 1];
    }
    x
}
