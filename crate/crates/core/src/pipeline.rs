//! Two-stage identification: a classifier picks the trap count, then the
//! regressor trained for that count predicts binding energies and
//! densities. Also bundle persistence and resampling of measured spectra.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{Array2, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, GenerationConfig, Provenance};
use crate::error::{Result, TdsError};
use crate::fem::{ModelVariant, NumericalParams};
use crate::nn::{
    classifier_widths, one_hot, regressor_widths, split_indices, train_with_validation, AdamaxConfig, Head,
    History, Mlp, TrainConfig,
};
use crate::preprocess::{log_floor_rows, InputTransform, NoiseConfig, OutputScalers, FLUX_FLOOR};
use crate::spectrum::Spectrum;
use crate::transport::{MaterialParams, TestParams};

pub const BUNDLE_FORMAT_VERSION: &str = "tds-bundle/1";

/// Predictions whose top class probability falls below this are flagged.
pub const LOW_CONFIDENCE_THRESHOLD: f64 = 0.5;

/// Relative tolerance when matching a spectrum to the bundle grid.
const GRID_MATCH_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingSettings {
    pub seed: u64,
    pub noise: NoiseConfig,
    pub batch_size: usize,
    pub validation_fraction: f64,
    /// Overrides the classifier epoch rule when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_epochs: Option<usize>,
    /// Overrides the regressor epoch rule when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regressor_epochs: Option<usize>,
    pub optimizer: AdamaxConfig,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            noise: NoiseConfig::default(),
            batch_size: 32,
            validation_fraction: 0.2,
            classifier_epochs: None,
            regressor_epochs: None,
            optimizer: AdamaxConfig::default(),
        }
    }
}

/// Provenance of a trained bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMetadata {
    pub generation: GenerationConfig,
    pub material: MaterialParams,
    pub test: TestParams,
    pub numerical: NumericalParams,
    pub variant: ModelVariant,
    pub training: TrainingSettings,
    /// Temperatures, K, at which network inputs are sampled.
    pub temperature_grid: Vec<f64>,
    /// Unix seconds taken from `SOURCE_DATE_EPOCH`, if set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
    /// Loss curves keyed `classifier` and `regressor-<k>`.
    pub histories: BTreeMap<String, History>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format_version: String,
    pub metadata: BundleMetadata,
    pub input_transform: InputTransform,
    pub classifier: Mlp,
    /// Keyed by trap count.
    pub regressors: BTreeMap<String, Mlp>,
    /// Keyed by trap count.
    pub output_scalers: BTreeMap<String, OutputScalers>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedTrap {
    /// Negative binding enthalpy, J/mol.
    pub delta_h: f64,
    /// Sites/m³.
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapPrediction {
    pub n_traps: usize,
    /// Sorted by ascending |ΔH|.
    pub traps: Vec<PredictedTrap>,
    /// Probability of each count `1..=K`.
    pub probabilities: Vec<f64>,
    pub low_confidence: bool,
    /// Some regressor output fell outside its training range.
    pub extrapolated: bool,
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn check_suite(suite: &[Dataset]) -> Result<Vec<f64>> {
    let first = suite
        .first()
        .ok_or_else(|| TdsError::InconsistentData("no datasets supplied".into()))?;
    for (i, ds) in suite.iter().enumerate() {
        if ds.header.n_traps != Some(i + 1) {
            return Err(TdsError::InconsistentData(format!(
                "dataset {} must hold {}-trap samples, found {:?}",
                i + 1,
                i + 1,
                ds.header.n_traps
            )));
        }
        if !ds.header.same_protocol(&first.header) {
            return Err(TdsError::InconsistentData(format!(
                "dataset {} was simulated under a different protocol than dataset 1",
                i + 1
            )));
        }
        if ds.len() < 2 {
            return Err(TdsError::InconsistentData(format!(
                "dataset {} needs at least 2 samples, has {}",
                i + 1,
                ds.len()
            )));
        }
    }
    let grid = first.points[0].spectrum.temperatures.clone();
    for (i, ds) in suite.iter().enumerate() {
        if let Some(p) = ds.points.iter().find(|p| p.spectrum.temperatures != grid) {
            return Err(TdsError::InconsistentData(format!(
                "dataset {} contains a spectrum with {} points on a different temperature grid",
                i + 1,
                p.spectrum.len()
            )));
        }
    }
    Ok(grid)
}

fn dataset_features(ds: &Dataset, width: usize) -> Result<Array2<f64>> {
    log_floor_rows(ds.points.iter().map(|p| p.spectrum.fluxes.as_slice()), width)
}

struct Split {
    train: Vec<usize>,
    validation: Vec<usize>,
}

enum Job {
    Classifier,
    Regressor(usize),
}

/// Fits the input transform, the classifier and one regressor per count.
pub fn train_bundle(suite: &[Dataset], settings: &TrainingSettings) -> Result<ModelBundle> {
    settings.noise.validate()?;
    let grid = check_suite(suite)?;
    let width = grid.len();
    let k_max = suite.len();
    let header = &suite[0].header;

    let features: Vec<Array2<f64>> = suite
        .iter()
        .map(|ds| dataset_features(ds, width))
        .collect::<Result<_>>()?;
    let splits: Vec<Split> = suite
        .iter()
        .enumerate()
        .map(|(i, ds)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, 100 + i as u64));
            let (train, validation) = split_indices(ds.len(), settings.validation_fraction, &mut rng);
            Split { train, validation }
        })
        .collect();

    let stack = |pick: &dyn Fn(&Split) -> &Vec<usize>| -> Array2<f64> {
        let parts: Vec<Array2<f64>> = features
            .iter()
            .zip(&splits)
            .map(|(f, s)| f.select(Axis(0), pick(s)))
            .collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("equal widths")
    };
    let combined_train = stack(&|s| &s.train);
    let transform = InputTransform::fit(&combined_train)?;
    let standardised: Vec<Array2<f64>> = features
        .iter()
        .map(|f| transform.apply(f))
        .collect::<Result<_>>()?;

    let scalers: Vec<OutputScalers> = suite
        .iter()
        .zip(&splits)
        .map(|(ds, s)| {
            let sets: Vec<_> = s.train.iter().map(|&i| ds.points[i].traps.clone()).collect();
            OutputScalers::fit(&sets)
        })
        .collect::<Result<_>>()?;

    let train_config = |n_out: usize, tag: u64, classify: bool| {
        let seed = derive_seed(settings.seed, tag);
        let base = if classify {
            TrainConfig::classifier(n_out, seed)
        } else {
            TrainConfig::regressor(n_out, seed)
        };
        let epochs = if classify {
            settings.classifier_epochs.unwrap_or(base.epochs)
        } else {
            settings.regressor_epochs.unwrap_or(base.epochs)
        };
        TrainConfig {
            batch_size: settings.batch_size,
            validation_fraction: settings.validation_fraction,
            epochs,
            noise: NoiseConfig {
                sigma: settings.noise.sigma,
                seed: derive_seed(settings.noise.seed, tag),
            },
            optimizer: settings.optimizer,
            ..base
        }
    };

    let jobs: Vec<Job> = std::iter::once(Job::Classifier)
        .chain((1..=k_max).map(Job::Regressor))
        .collect();
    let trained: Vec<(Mlp, History)> = jobs
        .par_iter()
        .map(|job| -> Result<(Mlp, History)> {
            match *job {
                Job::Classifier => {
                    let mut init = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, 0));
                    let mut mlp = Mlp::new(&classifier_widths(width, k_max), Head::Softmax, &mut init)?;
                    let gather = |pick: &dyn Fn(&Split) -> &Vec<usize>| {
                        let xs: Vec<Array2<f64>> = standardised
                            .iter()
                            .zip(&splits)
                            .map(|(f, s)| f.select(Axis(0), pick(s)))
                            .collect();
                        let views: Vec<_> = xs.iter().map(|p| p.view()).collect();
                        let labels: Vec<usize> = splits
                            .iter()
                            .enumerate()
                            .flat_map(|(k, s)| std::iter::repeat_n(k, pick(s).len()))
                            .collect();
                        (
                            ndarray::concatenate(Axis(0), &views).expect("equal widths"),
                            one_hot(&labels, k_max),
                        )
                    };
                    let (xt, yt) = gather(&|s| &s.train);
                    let (xv, yv) = gather(&|s| &s.validation);
                    let mut cfg = train_config(k_max, 0, true);
                    if k_max == 1 {
                        cfg.epochs = 0;
                    }
                    log::info!("training classifier on {} samples for {} epochs", xt.nrows(), cfg.epochs);
                    let history = train_with_validation(&mut mlp, (&xt, &yt), (&xv, &yv), &cfg)?;
                    Ok((mlp, history))
                }
                Job::Regressor(k) => {
                    let ds = &suite[k - 1];
                    let split = &splits[k - 1];
                    let targets = |idx: &[usize]| {
                        let rows: Vec<f64> = idx
                            .iter()
                            .flat_map(|&i| scalers[k - 1].scale_targets(&ds.points[i].traps))
                            .collect();
                        Array2::from_shape_vec((idx.len(), 2 * k), rows).expect("2k targets per sample")
                    };
                    let x = &standardised[k - 1];
                    let (xt, yt) = (x.select(Axis(0), &split.train), targets(&split.train));
                    let (xv, yv) = (x.select(Axis(0), &split.validation), targets(&split.validation));
                    let mut init = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, k as u64));
                    let mut mlp = Mlp::new(&regressor_widths(width, 2 * k), Head::Identity, &mut init)?;
                    let cfg = train_config(2 * k, k as u64, false);
                    log::info!("training {k}-trap regressor on {} samples for {} epochs", xt.nrows(), cfg.epochs);
                    let history = train_with_validation(&mut mlp, (&xt, &yt), (&xv, &yv), &cfg)?;
                    Ok((mlp, history))
                }
            }
        })
        .collect::<Result<_>>()?;

    let mut trained = trained.into_iter();
    let (classifier, classifier_history) = trained.next().expect("classifier job");
    let mut histories = BTreeMap::from([("classifier".to_string(), classifier_history)]);
    let mut regressors = BTreeMap::new();
    let mut output_scalers = BTreeMap::new();
    for (k, ((mlp, history), scaler)) in trained.zip(scalers).enumerate() {
        let key = (k + 1).to_string();
        histories.insert(format!("regressor-{key}"), history);
        regressors.insert(key.clone(), mlp);
        output_scalers.insert(key, scaler);
    }

    let bundle = ModelBundle {
        format_version: BUNDLE_FORMAT_VERSION.to_string(),
        metadata: BundleMetadata {
            generation: header.generation,
            material: header.material,
            test: header.test,
            numerical: header.numerical,
            variant: header.variant,
            training: *settings,
            temperature_grid: grid,
            created_unix: source_date_epoch(),
            histories,
            provenance: None,
        },
        input_transform: transform,
        classifier,
        regressors,
        output_scalers,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn source_date_epoch() -> Option<u64> {
    std::env::var("SOURCE_DATE_EPOCH").ok()?.trim().parse().ok()
}

impl ModelBundle {
    pub fn max_traps(&self) -> usize {
        self.classifier.n_outputs()
    }

    pub fn regressor(&self, k: usize) -> Result<(&Mlp, &OutputScalers)> {
        let key = k.to_string();
        match (self.regressors.get(&key), self.output_scalers.get(&key)) {
            (Some(m), Some(s)) => Ok((m, s)),
            _ => Err(TdsError::InconsistentData(format!("bundle lacks a {k}-trap regressor or scaler"))),
        }
    }

    /// Checks the structural invariants of a trained bundle.
    pub fn validate(&self) -> Result<()> {
        let width = self.metadata.temperature_grid.len();
        if self.input_transform.width() != width {
            return Err(TdsError::ShapeMismatch {
                expected: format!("input transform of width {width}"),
                got: format!("{}", self.input_transform.width()),
            });
        }
        self.classifier.validate()?;
        if self.classifier.n_inputs() != width || self.classifier.head != Head::Softmax {
            return Err(TdsError::InconsistentData("classifier does not match the input grid".into()));
        }
        let k_max = self.max_traps();
        if self.regressors.len() != k_max || self.output_scalers.len() != k_max {
            return Err(TdsError::InconsistentData(format!(
                "classifier covers {k_max} counts but bundle holds {} regressors and {} scalers",
                self.regressors.len(),
                self.output_scalers.len()
            )));
        }
        for k in 1..=k_max {
            let (mlp, _) = self.regressor(k)?;
            mlp.validate()?;
            if mlp.n_inputs() != width || mlp.n_outputs() != 2 * k {
                return Err(TdsError::ShapeMismatch {
                    expected: format!("{k}-trap regressor mapping {width} inputs to {} outputs", 2 * k),
                    got: format!("{} inputs to {} outputs", mlp.n_inputs(), mlp.n_outputs()),
                });
            }
        }
        Ok(())
    }

    fn check_grid(&self, spectrum: &Spectrum) -> Result<()> {
        let grid = &self.metadata.temperature_grid;
        let matches = spectrum.len() == grid.len()
            && spectrum
                .temperatures
                .iter()
                .zip(grid)
                .all(|(a, b)| (a - b).abs() <= GRID_MATCH_TOLERANCE * b.abs());
        if matches {
            return Ok(());
        }
        let bounds = |v: &[f64]| {
            (
                v.first().copied().unwrap_or(f64::NAN),
                v.last().copied().unwrap_or(f64::NAN),
            )
        };
        let (spectrum_min, spectrum_max) = bounds(&spectrum.temperatures);
        let (grid_min, grid_max) = bounds(grid);
        Err(TdsError::RangeMismatch {
            spectrum_min,
            spectrum_max,
            grid_min,
            grid_max,
        })
    }

    /// Classifies the trap count, then regresses that many traps.
    pub fn infer(&self, spectrum: &Spectrum) -> Result<TrapPrediction> {
        self.check_grid(spectrum)?;
        let x = self.input_transform.transform_fluxes(&spectrum.fluxes)?;
        let x = x.as_slice().expect("contiguous");
        let probabilities = self.classifier.forward(x)?.to_vec();
        let (best, p_best) = probabilities
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bp), (i, &p)| if p > bp { (i, p) } else { (bi, bp) });
        let n_traps = best + 1;
        let (traps, extrapolated) = self.regress_features(x, n_traps)?;
        Ok(TrapPrediction {
            n_traps,
            traps,
            probabilities,
            low_confidence: p_best < LOW_CONFIDENCE_THRESHOLD,
            extrapolated,
        })
    }

    /// Applies the `n_traps` regressor regardless of the classifier.
    /// Returns the traps sorted by ascending |ΔH| and the extrapolation flag.
    pub fn regress(&self, spectrum: &Spectrum, n_traps: usize) -> Result<(Vec<PredictedTrap>, bool)> {
        self.check_grid(spectrum)?;
        let x = self.input_transform.transform_fluxes(&spectrum.fluxes)?;
        self.regress_features(x.as_slice().expect("contiguous"), n_traps)
    }

    fn regress_features(&self, x: &[f64], n_traps: usize) -> Result<(Vec<PredictedTrap>, bool)> {
        let (regressor, scaler) = self.regressor(n_traps)?;
        let output = regressor.forward(x)?;
        let unscaled = scaler.unscale_targets(output.as_slice().expect("contiguous"))?;
        let mut traps: Vec<PredictedTrap> = unscaled
            .traps
            .iter()
            .map(|&(energy, density)| PredictedTrap {
                delta_h: -energy,
                density,
            })
            .collect();
        traps.sort_by(|a, b| a.delta_h.abs().total_cmp(&b.delta_h.abs()));
        Ok((traps, unscaled.extrapolated))
    }

    /// Resamples a measured spectrum onto the bundle grid, then infers.
    pub fn infer_raw(&self, raw: &Spectrum) -> Result<(TrapPrediction, Option<String>)> {
        let resampled = resample_spectrum(raw, &self.metadata.temperature_grid)?;
        if let Some(warning) = &resampled.coverage_warning {
            log::warn!("{warning}");
        }
        Ok((self.infer(&resampled.spectrum)?, resampled.coverage_warning))
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(mut input: R) -> Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| TdsError::from_json_error(&e, &text))?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_str())
            .unwrap_or("<missing>");
        if found != BUNDLE_FORMAT_VERSION {
            return Err(TdsError::VersionMismatch {
                found: found.to_string(),
                expected: BUNDLE_FORMAT_VERSION.to_string(),
            });
        }
        let bundle: ModelBundle = serde_json::from_str(&text).map_err(|e| TdsError::from_json_error(&e, &text))?;
        bundle.validate()?;
        Ok(bundle)
    }
}

pub fn save_bundle(bundle: &ModelBundle, path: &std::path::Path) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    bundle.write_json(file)
}

pub fn load_bundle(path: &std::path::Path) -> Result<ModelBundle> {
    ModelBundle::read_json(std::fs::File::open(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resampled {
    pub spectrum: Spectrum,
    /// Set when part of the grid lies outside the measured range.
    pub coverage_warning: Option<String>,
}

/// Linear interpolation of `raw` onto `grid`. Repeated temperatures are
/// merged by averaging their fluxes; grid points outside the measured range
/// receive the flux floor.
pub fn resample_spectrum(raw: &Spectrum, grid: &[f64]) -> Result<Resampled> {
    let mut temps: Vec<f64> = Vec::with_capacity(raw.len());
    let mut fluxes: Vec<f64> = Vec::with_capacity(raw.len());
    let mut counts: Vec<usize> = Vec::with_capacity(raw.len());
    for (&t, &j) in raw.temperatures.iter().zip(&raw.fluxes) {
        if !t.is_finite() || !j.is_finite() {
            return Err(TdsError::invalid("spectrum", format!("non-finite entry ({t}, {j})")));
        }
        match temps.last() {
            Some(&last) if t == last => {
                let n = counts.last_mut().expect("parallel vectors");
                let f = fluxes.last_mut().expect("parallel vectors");
                *f = (*f * *n as f64 + j) / (*n + 1) as f64;
                *n += 1;
            }
            Some(&last) if t < last => {
                return Err(TdsError::invalid(
                    "spectrum",
                    format!("temperatures must increase, found {t} K after {last} K"),
                ))
            }
            _ => {
                temps.push(t);
                fluxes.push(j);
                counts.push(1);
            }
        }
    }
    if temps.len() < 2 {
        return Err(TdsError::invalid(
            "spectrum",
            format!("need at least 2 distinct temperatures, got {}", temps.len()),
        ));
    }
    let (lo, hi) = (temps[0], temps[temps.len() - 1]);
    let (grid_min, grid_max) = (grid[0], grid[grid.len() - 1]);
    if hi < grid_min || lo > grid_max {
        return Err(TdsError::RangeMismatch {
            spectrum_min: lo,
            spectrum_max: hi,
            grid_min,
            grid_max,
        });
    }
    let mut uncovered = 0;
    let values: Vec<f64> = grid
        .iter()
        .map(|&t| {
            if t < lo || t > hi {
                uncovered += 1;
                return FLUX_FLOOR;
            }
            let i = temps.partition_point(|&x| x <= t).clamp(1, temps.len() - 1);
            let (t0, t1) = (temps[i - 1], temps[i]);
            let w = (t - t0) / (t1 - t0);
            (1.0 - w) * fluxes[i - 1] + w * fluxes[i]
        })
        .collect();
    let coverage_warning = (uncovered > 0).then(|| {
        format!(
            "{uncovered} of {} grid temperatures lie outside the measured range [{lo:.2}, {hi:.2}] K and were set to the flux floor",
            grid.len()
        )
    });
    Ok(Resampled {
        spectrum: Spectrum::new(grid.to_vec(), values)?,
        coverage_warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, Protocol, TrapRanges};
    use approx::assert_abs_diff_eq;

    #[test]
    fn midpoint_interpolation() {
        let raw = Spectrum::new(vec![300.0, 400.0], vec![1e-8, 3e-8]).unwrap();
        let r = resample_spectrum(&raw, &[300.0, 350.0, 400.0]).unwrap();
        assert_abs_diff_eq!(r.spectrum.fluxes[1], 2e-8, epsilon = 1e-22);
        assert!(r.coverage_warning.is_none());
    }

    #[test]
    fn resampling_on_grid_is_identity() {
        let grid: Vec<f64> = (0..64).map(|i| 300.0 + 9.0 * i as f64).collect();
        let fluxes: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin().abs() * 1e-7).collect();
        let raw = Spectrum::new(grid.clone(), fluxes.clone()).unwrap();
        let r = resample_spectrum(&raw, &grid).unwrap();
        assert_eq!(r.spectrum.fluxes, fluxes);
    }

    #[test]
    fn partial_coverage_floors_and_warns() {
        let raw = Spectrum::new(vec![350.0, 400.0, 400.0], vec![1e-8, 3e-8, 5e-8]).unwrap();
        let r = resample_spectrum(&raw, &[300.0, 375.0, 400.0, 450.0]).unwrap();
        assert_eq!(r.spectrum.fluxes[0], FLUX_FLOOR);
        assert_eq!(r.spectrum.fluxes[3], FLUX_FLOOR);
        assert_abs_diff_eq!(r.spectrum.fluxes[2], 4e-8, epsilon = 1e-22);
        assert!(r.coverage_warning.unwrap().starts_with("2 of 4"));
    }

    #[test]
    fn resampling_rejects_bad_input() {
        let one = Spectrum::new(vec![300.0], vec![1e-8]).unwrap();
        assert!(resample_spectrum(&one, &[300.0, 310.0]).is_err());
        let disjoint = Spectrum::new(vec![100.0, 200.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            resample_spectrum(&disjoint, &[300.0, 310.0]),
            Err(TdsError::RangeMismatch { .. })
        ));
        let backwards = Spectrum::new(vec![310.0, 300.0], vec![1.0, 1.0]).unwrap();
        assert!(resample_spectrum(&backwards, &[300.0, 310.0]).is_err());
    }

    pub(crate) fn tiny_suite(k_max: usize, n: usize) -> Vec<Dataset> {
        let mat = MaterialParams::bcc_iron();
        let test = TestParams {
            thickness: 0.001,
            t_rest: 600.0,
            heating_rate: 600.0 / 3600.0,
            t_min: 293.15,
            t_max: 873.15,
        };
        let np = NumericalParams {
            n_elements: 8,
            ntp: 16,
            sample_frequency: 2,
            ..Default::default()
        };
        let cfg = GenerationConfig {
            max_traps: k_max,
            ranges: TrapRanges {
                energy: [40e3, 80e3],
                density: [0.5, 5.0],
            },
            min_separation: 15e3,
            first_trap: None,
            seed: 3,
        };
        let protocol = Protocol {
            material: &mat,
            test: &test,
            numerical: &np,
            variant: ModelVariant::Oriani,
        };
        (1..=k_max)
            .map(|k| generate_dataset(n, k, &cfg, &protocol).unwrap())
            .collect()
    }

    fn quick_settings() -> TrainingSettings {
        TrainingSettings {
            seed: 5,
            classifier_epochs: Some(3),
            regressor_epochs: Some(3),
            ..Default::default()
        }
    }

    #[test]
    fn single_count_bundle_is_saturated() {
        let suite = tiny_suite(1, 10);
        let bundle = train_bundle(&suite, &quick_settings()).unwrap();
        assert_eq!(bundle.regressors.len(), 1);
        let p = bundle.infer(&suite[0].points[0].spectrum).unwrap();
        assert_eq!(p.n_traps, 1);
        assert_eq!(p.probabilities, vec![1.0]);
        assert!(!p.low_confidence);
    }

    #[test]
    fn bundle_structure_metadata_and_round_trip() {
        let suite = tiny_suite(2, 12);
        let settings = quick_settings();
        let bundle = train_bundle(&suite, &settings).unwrap();
        assert_eq!(bundle.metadata.training, settings);
        assert_eq!(bundle.metadata.generation.seed, 3);
        assert_eq!(bundle.regressor(2).unwrap().0.n_outputs(), 4);
        assert_eq!(bundle.metadata.histories["regressor-2"].validation_loss.len(), 3);

        let mut buf = Vec::new();
        bundle.write_json(&mut buf).unwrap();
        let value: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        let keys: Vec<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
        for key in ["format_version", "metadata", "input_transform", "classifier", "regressors", "output_scalers"] {
            assert!(keys.contains(&key), "missing {key}");
        }
        assert!(value["regressors"].get("2").is_some());
        let back = ModelBundle::read_json(buf.as_slice()).unwrap();
        assert_eq!(back, bundle);

        let p1 = bundle.infer(&suite[1].points[0].spectrum).unwrap();
        let p2 = back.infer(&suite[1].points[0].spectrum).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.traps.len(), p1.n_traps);
        assert!(p1.traps.windows(2).all(|w| w[0].delta_h.abs() <= w[1].delta_h.abs()));
        assert!(p1.traps.iter().all(|t| t.delta_h < 0.0));
    }

    #[test]
    fn truncated_and_foreign_bundles_rejected() {
        let suite = tiny_suite(1, 6);
        let bundle = train_bundle(&suite, &quick_settings()).unwrap();
        let mut buf = Vec::new();
        bundle.write_json(&mut buf).unwrap();
        let cut = buf.len() / 2;
        match ModelBundle::read_json(&buf[..cut]) {
            Err(TdsError::Parse { offset, .. }) => assert!(offset + 1 >= cut && offset <= cut),
            other => panic!("unexpected {other:?}"),
        }
        let text = String::from_utf8(buf).unwrap().replace(BUNDLE_FORMAT_VERSION, "tds-bundle/2");
        assert!(matches!(
            ModelBundle::read_json(text.as_bytes()),
            Err(TdsError::VersionMismatch { .. })
        ));
    }

    #[test]
    fn mismatched_grid_names_both_ranges() {
        let suite = tiny_suite(1, 6);
        let bundle = train_bundle(&suite, &quick_settings()).unwrap();
        let off = Spectrum::new(vec![400.0, 500.0], vec![1e-8, 1e-8]).unwrap();
        let err = bundle.infer(&off).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("400.00") && msg.contains("873.15"), "{msg}");
    }

    #[test]
    fn suites_must_be_ordered_and_consistent() {
        let mut suite = tiny_suite(2, 4);
        suite.swap(0, 1);
        assert!(matches!(
            train_bundle(&suite, &quick_settings()),
            Err(TdsError::InconsistentData(_))
        ));
        let mut suite = tiny_suite(2, 4);
        suite[1].header.test.heating_rate *= 2.0;
        assert!(matches!(
            train_bundle(&suite, &quick_settings()),
            Err(TdsError::InconsistentData(_))
        ));
        assert!(train_bundle(&[], &quick_settings()).is_err());
    }

    #[test]
    fn ties_go_to_the_smaller_count() {
        let suite = tiny_suite(2, 6);
        let mut bundle = train_bundle(&suite, &quick_settings()).unwrap();
        let last = bundle.classifier.layers.last_mut().unwrap();
        last.weights.fill(0.0);
        last.bias.fill(0.0);
        let p = bundle.infer(&suite[1].points[0].spectrum).unwrap();
        assert_eq!(p.probabilities, vec![0.5, 0.5]);
        assert_eq!(p.n_traps, 1);
        assert!(!p.low_confidence);
    }

    #[test]
    fn training_is_reproducible_across_thread_counts() {
        let suite = tiny_suite(2, 8);
        let a = train_bundle(&suite, &quick_settings()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| train_bundle(&suite, &quick_settings())).unwrap();
        assert_eq!(a, b);
    }
}
