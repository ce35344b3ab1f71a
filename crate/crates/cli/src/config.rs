//! Run configuration files: JSON with unit-suffixed keys, resolved into the
//! SI parameter structs of `tds_core`.

#![allow(non_snake_case)]

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tds_core::datagen::DEFAULT_TEST_POINTS;
use tds_core::nn::AdamaxConfig;
use tds_core::preprocess::NoiseConfig;
use tds_core::transport::constants::N_A;
use tds_core::{
    GenerationConfig, MaterialParams, ModelVariant, NumericalParams, PsoConfig, TestParams, TrainingSettings,
    TrapRanges, TrapSpec,
};

use crate::error::CliError;

const KJ: f64 = 1e3;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub material: MaterialSection,
    pub test: Option<TestSection>,
    #[serde(default)]
    pub numerical: NumericalSection,
    #[serde(default)]
    pub variant: ModelVariant,
    #[serde(default)]
    pub traps: Vec<TrapEntry>,
    pub generation: Option<GenerationSection>,
    #[serde(default)]
    pub training: TrainingSection,
    pub pso: Option<PsoSection>,
    #[serde(default)]
    pub paths: PathsSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSection {
    #[serde(rename = "D0_m2_s")]
    pub d0: Option<f64>,
    #[serde(rename = "EL_kJ_mol")]
    pub e_lattice_kj: Option<f64>,
    #[serde(rename = "EL_J_mol")]
    pub e_lattice_j: Option<f64>,
    #[serde(rename = "NL_sites_m3")]
    pub n_lattice: Option<f64>,
    #[serde(rename = "CL0_mol_m3")]
    pub c_lattice0: Option<f64>,
    #[serde(rename = "molar_mass_g_mol")]
    pub molar_mass: Option<f64>,
    #[serde(rename = "density_g_cm3")]
    pub density: Option<f64>,
    #[serde(rename = "nu_per_s")]
    pub nu: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSection {
    pub thickness_m: f64,
    #[serde(default)]
    pub t_rest_s: f64,
    pub phi_K_per_s: Option<f64>,
    pub phi_C_per_h: Option<f64>,
    pub T_min_K: f64,
    pub T_max_K: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericalSection {
    pub n_elements: Option<usize>,
    pub ntp: Option<usize>,
    pub sample_frequency: Option<usize>,
    pub penalty_k_mol_m2_s: Option<f64>,
    pub E_bc_kJ_mol: Option<f64>,
    pub newton_rel_tol: Option<f64>,
    pub newton_abs_tol_mol_m2_s: Option<f64>,
    pub newton_max_iter: Option<usize>,
    pub max_halvings: Option<u32>,
    pub record_rest: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrapEntry {
    pub dH_kJ_mol: Option<f64>,
    pub dH_J_mol: Option<f64>,
    pub NT_mol_m3: Option<f64>,
    pub NT_sites_m3: Option<f64>,
    pub Et_kJ_mol: Option<f64>,
    pub nu_trap_per_s: Option<f64>,
    pub nu_detrap_per_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeSection {
    pub energy_kJ_mol: [f64; 2],
    pub density_mol_m3: [f64; 2],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    pub max_traps: usize,
    pub energy_kJ_mol: [f64; 2],
    pub density_mol_m3: [f64; 2],
    pub min_separation_kJ_mol: f64,
    pub first_trap: Option<RangeSection>,
    pub points_per_count: usize,
    pub test_points: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub noise_sigma: Option<f64>,
    pub classifier_epochs: Option<usize>,
    pub regressor_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub validation_fraction: Option<f64>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsoSection {
    pub n_traps: usize,
    pub swarm_size: Option<usize>,
    pub iterations: Option<usize>,
    pub inertia: Option<f64>,
    pub cognitive: Option<f64>,
    pub social: Option<f64>,
    pub energy_kJ_mol: [f64; 2],
    pub density_mol_m3: [f64; 2],
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub datasets_dir: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub spectrum: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// Generation settings plus dataset sizes.
#[derive(Debug, Clone, Serialize)]
pub struct GenerationPlan {
    pub config: GenerationConfig,
    pub points_per_count: usize,
    pub test_points: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PsoPlan {
    pub config: PsoConfig,
    pub n_traps: usize,
}

/// A configuration in SI units with command-line overrides applied.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub seed: u64,
    pub material: MaterialParams,
    pub test: Option<TestParams>,
    pub numerical: NumericalParams,
    pub variant: ModelVariant,
    pub traps: Vec<TrapSpec>,
    pub generation: Option<GenerationPlan>,
    pub training: TrainingSettings,
    pub pso: Option<PsoPlan>,
    #[serde(skip)]
    pub paths: PathsSection,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<ModelVariant>,
}

fn config_error(key: &str, unit: &str, message: impl Into<String>) -> CliError {
    let key = if unit.is_empty() {
        key.to_string()
    } else {
        format!("{key} [{unit}]")
    };
    CliError::Config {
        key,
        message: message.into(),
    }
}

fn positive(value: f64, key: &str, unit: &str) -> Result<f64, CliError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(config_error(key, unit, format!("must be positive and finite, got {value}")))
    }
}

fn range(values: [f64; 2], key: &str, unit: &str) -> Result<[f64; 2], CliError> {
    if values[0] > 0.0 && values[1] >= values[0] && values[1].is_finite() {
        Ok(values)
    } else {
        Err(config_error(key, unit, format!("must be positive with min <= max, got {values:?}")))
    }
}

fn one_of(a: Option<f64>, b: Option<f64>, key_a: &str, key_b: &str) -> Result<Option<(f64, bool)>, CliError> {
    match (a, b) {
        (Some(_), Some(_)) => Err(config_error(key_a, "", format!("give either `{key_a}` or `{key_b}`, not both"))),
        (Some(x), None) => Ok(Some((x, true))),
        (None, Some(y)) => Ok(Some((y, false))),
        (None, None) => Ok(None),
    }
}

impl MaterialSection {
    fn resolve(&self) -> Result<MaterialParams, CliError> {
        let base = MaterialParams::bcc_iron();
        let e_lattice = match one_of(self.e_lattice_kj, self.e_lattice_j, "material.EL_kJ_mol", "material.EL_J_mol")? {
            Some((v, true)) => positive(v, "material.EL_kJ_mol", "kJ/mol")? * KJ,
            Some((v, false)) => positive(v, "material.EL_J_mol", "J/mol")?,
            None => base.e_lattice,
        };
        let pick = |v: Option<f64>, default: f64, key: &str, unit: &str| match v {
            Some(x) => positive(x, key, unit),
            None => Ok(default),
        };
        Ok(MaterialParams {
            d0: pick(self.d0, base.d0, "material.D0_m2_s", "m²/s")?,
            e_lattice,
            n_lattice: pick(self.n_lattice, base.n_lattice, "material.NL_sites_m3", "sites/m³")?,
            c_lattice0: pick(self.c_lattice0, base.c_lattice0, "material.CL0_mol_m3", "mol/m³")?,
            molar_mass_metal: pick(self.molar_mass, base.molar_mass_metal, "material.molar_mass_g_mol", "g/mol")?,
            density_metal: pick(self.density, base.density_metal, "material.density_g_cm3", "g/cm³")?,
            nu: pick(self.nu, base.nu, "material.nu_per_s", "1/s")?,
        })
    }
}

impl TestSection {
    fn resolve(&self) -> Result<TestParams, CliError> {
        let heating_rate = match one_of(self.phi_K_per_s, self.phi_C_per_h, "test.phi_K_per_s", "test.phi_C_per_h")? {
            Some((v, true)) => positive(v, "test.phi_K_per_s", "K/s")?,
            Some((v, false)) => positive(v, "test.phi_C_per_h", "°C/h")? / 3600.0,
            None => return Err(config_error("test.phi_K_per_s", "K/s", "a heating rate is required")),
        };
        if !(self.t_rest_s >= 0.0 && self.t_rest_s.is_finite()) {
            return Err(config_error("test.t_rest_s", "s", "must be non-negative"));
        }
        let t_min = positive(self.T_min_K, "test.T_min_K", "K")?;
        if !(self.T_max_K > t_min && self.T_max_K.is_finite()) {
            return Err(config_error("test.T_max_K", "K", format!("must exceed T_min_K = {t_min}")));
        }
        Ok(TestParams {
            thickness: positive(self.thickness_m, "test.thickness_m", "m")?,
            t_rest: self.t_rest_s,
            heating_rate,
            t_min,
            t_max: self.T_max_K,
        })
    }
}

impl NumericalSection {
    fn resolve(&self) -> Result<NumericalParams, CliError> {
        let d = NumericalParams::default();
        let np = NumericalParams {
            n_elements: self.n_elements.unwrap_or(d.n_elements),
            ntp: self.ntp.unwrap_or(d.ntp),
            sample_frequency: self.sample_frequency.unwrap_or(d.sample_frequency),
            penalty_k: self.penalty_k_mol_m2_s.unwrap_or(d.penalty_k),
            e_bc: self.E_bc_kJ_mol.map_or(d.e_bc, |v| v * KJ),
            newton_rel_tol: self.newton_rel_tol.unwrap_or(d.newton_rel_tol),
            newton_abs_tol: self.newton_abs_tol_mol_m2_s.unwrap_or(d.newton_abs_tol),
            newton_max_iter: self.newton_max_iter.unwrap_or(d.newton_max_iter),
            max_halvings: self.max_halvings.unwrap_or(d.max_halvings),
            record_rest: self.record_rest.unwrap_or(d.record_rest),
        };
        np.validate().map_err(|e| numerical_key_error(&e))?;
        Ok(np)
    }
}

fn numerical_key_error(err: &tds_core::TdsError) -> CliError {
    match err {
        tds_core::TdsError::InvalidParameter { name, reason } => {
            let (key, unit) = match *name {
                "penalty_k" => ("numerical.penalty_k_mol_m2_s", "mol/(m²·s)"),
                "e_bc" => ("numerical.E_bc_kJ_mol", "kJ/mol"),
                "newton_abs_tol" => ("numerical.newton_abs_tol_mol_m2_s", "mol/(m²·s)"),
                other => (other, ""),
            };
            let key = if unit.is_empty() {
                format!("numerical.{key}")
            } else {
                key.to_string()
            };
            config_error(&key, unit, reason.clone())
        }
        other => config_error("numerical", "", other.to_string()),
    }
}

impl TrapEntry {
    fn resolve(&self, index: usize, material: &MaterialParams) -> Result<TrapSpec, CliError> {
        let key = |name: &str| format!("traps[{index}].{name}");
        let delta_h = match one_of(self.dH_kJ_mol, self.dH_J_mol, &key("dH_kJ_mol"), &key("dH_J_mol"))? {
            Some((v, true)) => v * KJ,
            Some((v, false)) => v,
            None => return Err(config_error(&key("dH_kJ_mol"), "kJ/mol", "a binding energy is required")),
        };
        if !(delta_h < 0.0 && delta_h.is_finite()) {
            return Err(config_error(&key("dH_kJ_mol"), "kJ/mol", format!("must be negative, got {}", delta_h / KJ)));
        }
        let density = match one_of(self.NT_mol_m3, self.NT_sites_m3, &key("NT_mol_m3"), &key("NT_sites_m3"))? {
            Some((v, true)) => positive(v, &key("NT_mol_m3"), "mol/m³")? * N_A,
            Some((v, false)) => positive(v, &key("NT_sites_m3"), "sites/m³")?,
            None => return Err(config_error(&key("NT_mol_m3"), "mol/m³", "a trap density is required")),
        };
        let mut trap = TrapSpec::new(delta_h, density, material);
        if let Some(e) = self.Et_kJ_mol {
            trap.e_trap = e * KJ;
        }
        if let Some(v) = self.nu_trap_per_s {
            trap.nu_trap = positive(v, &key("nu_trap_per_s"), "1/s")?;
        }
        if let Some(v) = self.nu_detrap_per_s {
            trap.nu_detrap = positive(v, &key("nu_detrap_per_s"), "1/s")?;
        }
        Ok(trap)
    }
}

fn trap_ranges(energy: [f64; 2], density: [f64; 2], prefix: &str) -> Result<TrapRanges, CliError> {
    let energy = range(energy, &format!("{prefix}.energy_kJ_mol"), "kJ/mol")?;
    let density = range(density, &format!("{prefix}.density_mol_m3"), "mol/m³")?;
    Ok(TrapRanges {
        energy: [energy[0] * KJ, energy[1] * KJ],
        density,
    })
}

impl GenerationSection {
    fn resolve(&self, seed: u64) -> Result<GenerationPlan, CliError> {
        let first_trap = self
            .first_trap
            .map(|r| trap_ranges(r.energy_kJ_mol, r.density_mol_m3, "generation.first_trap"))
            .transpose()?;
        let config = GenerationConfig {
            max_traps: self.max_traps,
            ranges: trap_ranges(self.energy_kJ_mol, self.density_mol_m3, "generation")?,
            min_separation: self.min_separation_kJ_mol * KJ,
            first_trap,
            seed,
        };
        config.validate().map_err(|e| match e {
            tds_core::TdsError::InvalidParameter { name: "min_separation", reason } => {
                config_error("generation.min_separation_kJ_mol", "kJ/mol", reason)
            }
            tds_core::TdsError::InvalidParameter { name: "max_traps", reason } => {
                config_error("generation.max_traps", "", reason)
            }
            other => config_error("generation", "", other.to_string()),
        })?;
        if self.points_per_count < 2 {
            return Err(config_error("generation.points_per_count", "", "must be at least 2"));
        }
        Ok(GenerationPlan {
            config,
            points_per_count: self.points_per_count,
            test_points: self.test_points.unwrap_or(DEFAULT_TEST_POINTS),
        })
    }
}

impl TrainingSection {
    fn resolve(&self, seed: u64) -> Result<TrainingSettings, CliError> {
        let d = TrainingSettings::default();
        let sigma = self.noise_sigma.unwrap_or(d.noise.sigma);
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(config_error("training.noise_sigma", "standardised units", "must be non-negative"));
        }
        let fraction = self.validation_fraction.unwrap_or(d.validation_fraction);
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(config_error("training.validation_fraction", "", "must lie strictly between 0 and 1"));
        }
        let batch_size = self.batch_size.unwrap_or(d.batch_size);
        if batch_size < 1 {
            return Err(config_error("training.batch_size", "", "must be at least 1"));
        }
        let optimizer = AdamaxConfig {
            learning_rate: self.learning_rate.unwrap_or(d.optimizer.learning_rate),
            weight_decay: self.weight_decay.unwrap_or(d.optimizer.weight_decay),
            ..d.optimizer
        };
        Ok(TrainingSettings {
            seed,
            noise: NoiseConfig { sigma, seed },
            batch_size,
            validation_fraction: fraction,
            classifier_epochs: self.classifier_epochs,
            regressor_epochs: self.regressor_epochs,
            optimizer,
        })
    }
}

impl PsoSection {
    fn resolve(&self, seed: u64) -> Result<PsoPlan, CliError> {
        let d = PsoConfig::default();
        let energy = range(self.energy_kJ_mol, "pso.energy_kJ_mol", "kJ/mol")?;
        let density = range(self.density_mol_m3, "pso.density_mol_m3", "mol/m³")?;
        let config = PsoConfig {
            swarm_size: self.swarm_size.unwrap_or(d.swarm_size),
            iterations: self.iterations.unwrap_or(d.iterations),
            inertia: self.inertia.unwrap_or(d.inertia),
            cognitive: self.cognitive.unwrap_or(d.cognitive),
            social: self.social.unwrap_or(d.social),
            energy_bounds: [energy[0] * KJ, energy[1] * KJ],
            density_bounds: [density[0] * N_A, density[1] * N_A],
            seed,
            initial_positions: Vec::new(),
        };
        config.validate(self.n_traps).map_err(|e| match e {
            tds_core::TdsError::InvalidParameter { name, reason } => config_error(&format!("pso.{name}"), "", reason),
            other => config_error("pso", "", other.to_string()),
        })?;
        Ok(PsoPlan {
            config,
            n_traps: self.n_traps,
        })
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| {
            let offset = match tds_core::TdsError::from_json_error(&e, text) {
                tds_core::TdsError::Parse { offset, .. } => offset,
                _ => 0,
            };
            CliError::Config {
                key: format!("byte {offset}"),
                message: e.to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let anchor = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        anchor(&mut config.paths.datasets_dir);
        anchor(&mut config.paths.bundle);
        anchor(&mut config.paths.spectrum);
        anchor(&mut config.paths.output);
        Ok(config)
    }

    pub fn resolve(self, overrides: Overrides) -> Result<Resolved, CliError> {
        let seed = overrides.seed.unwrap_or(self.seed);
        let material = self.material.resolve()?;
        let traps = self
            .traps
            .iter()
            .enumerate()
            .map(|(i, t)| t.resolve(i, &material))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Resolved {
            seed,
            material,
            test: self.test.as_ref().map(TestSection::resolve).transpose()?,
            numerical: self.numerical.resolve()?,
            variant: overrides.variant.unwrap_or(self.variant),
            traps,
            generation: self.generation.as_ref().map(|g| g.resolve(seed)).transpose()?,
            training: self.training.resolve(seed)?,
            pso: self.pso.as_ref().map(|p| p.resolve(seed)).transpose()?,
            paths: self.paths,
        })
    }
}

impl Resolved {
    /// Hex SHA-256 of the canonical JSON form of this configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("configuration serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn test(&self) -> Result<&TestParams, CliError> {
        self.test
            .as_ref()
            .ok_or_else(|| config_error("test", "", "this command needs a `test` section"))
    }

    pub fn generation(&self) -> Result<&GenerationPlan, CliError> {
        self.generation
            .as_ref()
            .ok_or_else(|| config_error("generation", "", "this command needs a `generation` section"))
    }

    pub fn pso(&self) -> Result<&PsoPlan, CliError> {
        self.pso
            .as_ref()
            .ok_or_else(|| config_error("pso", "", "this command needs a `pso` section"))
    }

    /// Temperatures at which simulated spectra are recorded.
    pub fn temperature_grid(&self) -> Result<Vec<f64>, CliError> {
        let test = self.test()?;
        let n = self.numerical.ntp;
        Ok((1..=n)
            .map(|i| test.t_min + (test.t_max - test.t_min) * i as f64 / n as f64)
            .collect())
    }
}
