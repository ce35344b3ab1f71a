//! Randomised generation of labelled synthetic TDS datasets.
//!
//! Each data point draws a trap set (binding energies with a minimum
//! separation, then densities), sorts it by binding energy and simulates
//! its spectrum. Every point owns a counter-based RNG substream keyed by
//! `(seed, dataset tag, index)`, so results do not depend on how the
//! simulations are scheduled across threads.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TdsError};
use crate::fem::{simulate_tds, ModelVariant, NumericalParams};
use crate::spectrum::Spectrum;
use crate::transport::{constants::N_A, MaterialParams, TestParams, TrapSpec};

pub const DATASET_FORMAT_VERSION: &str = "tds-dataset/1";

/// Attempts per trap before the energy rejection loop gives up.
pub const MAX_ENERGY_ATTEMPTS: usize = 1000;

/// Stream tag of the held-out test set; training datasets use their trap count.
pub const TEST_SET_TAG: u64 = 0xFFFF;

/// Closed sampling ranges for one group of traps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapRanges {
    /// Absolute binding energy range, J/mol.
    pub energy: [f64; 2],
    /// Trap density range, mol/m³.
    pub density: [f64; 2],
}

impl TrapRanges {
    fn validate(&self, name: &'static str) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite();
        if !ordered(self.energy) || !ordered(self.density) {
            return Err(TdsError::invalid(
                name,
                format!("ranges must be positive and ordered, got {self:?}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_traps: usize,
    pub ranges: TrapRanges,
    /// Minimum gap between absolute binding energies in one sample, J/mol.
    pub min_separation: f64,
    /// Separate ranges for the first (shallow, dense) trap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_trap: Option<TrapRanges>,
    pub seed: u64,
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_traps < 1 {
            return Err(TdsError::invalid("max_traps", "must be at least 1"));
        }
        self.ranges.validate("ranges")?;
        if let Some(first) = &self.first_trap {
            first.validate("first_trap")?;
        }
        if !(self.min_separation >= 0.0) {
            return Err(TdsError::invalid("min_separation", "must be non-negative"));
        }
        let base_traps = if self.first_trap.is_some() {
            self.max_traps - 1
        } else {
            self.max_traps
        };
        let width = self.ranges.energy[1] - self.ranges.energy[0];
        let needed = base_traps.saturating_sub(1) as f64 * self.min_separation;
        if width < needed {
            return Err(TdsError::invalid(
                "min_separation",
                format!(
                    "{} traps need an energy range of at least {needed} J/mol, got {width}",
                    base_traps
                ),
            ));
        }
        Ok(())
    }
}

/// Whether `candidate` keeps at least `min_separation` from every accepted energy.
pub fn is_separated(candidate: f64, accepted: &[f64], min_separation: f64) -> bool {
    accepted
        .iter()
        .all(|e| (candidate - e).abs() >= min_separation)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..=range[1])
    } else {
        range[0]
    }
}

/// Draws `k` traps sorted by ascending absolute binding energy.
pub fn generate_trap_set<R: Rng + ?Sized>(
    k: usize,
    cfg: &GenerationConfig,
    material: &MaterialParams,
    rng: &mut R,
) -> Result<Vec<TrapSpec>> {
    if k < 1 || k > cfg.max_traps {
        return Err(TdsError::invalid(
            "n_traps",
            format!("must lie in 1..={}, got {k}", cfg.max_traps),
        ));
    }
    let mut energies: Vec<f64> = Vec::with_capacity(k);
    let mut traps = Vec::with_capacity(k);
    for index in 0..k {
        let ranges = match (&cfg.first_trap, index) {
            (Some(first), 0) => first,
            _ => &cfg.ranges,
        };
        let mut accepted = None;
        for _ in 0..MAX_ENERGY_ATTEMPTS {
            let candidate = uniform(rng, ranges.energy);
            if is_separated(candidate, &energies, cfg.min_separation) {
                accepted = Some(candidate);
                break;
            }
        }
        let energy = accepted.ok_or(TdsError::ExhaustedRetries {
            trap_index: index,
            attempts: MAX_ENERGY_ATTEMPTS,
        })?;
        energies.push(energy);
        let density_mol = uniform(rng, ranges.density);
        traps.push(TrapSpec::new(-energy, density_mol * N_A, material));
    }
    traps.sort_by(|a, b| a.binding_energy_abs().total_cmp(&b.binding_energy_abs()));
    Ok(traps)
}

/// RNG substream of one data point.
pub fn point_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 40) | index);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub n_traps: usize,
    /// Sorted by ascending |ΔH|.
    pub traps: Vec<TrapSpec>,
    pub spectrum: Spectrum,
}

/// Identifies the run configuration that produced an artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Hex SHA-256 of the resolved run configuration.
    pub config_sha256: String,
    pub seed: u64,
}

/// Everything needed to reproduce a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: String,
    pub generation: GenerationConfig,
    pub material: MaterialParams,
    pub test: TestParams,
    pub numerical: NumericalParams,
    pub variant: ModelVariant,
    /// Trap count of every point, or `None` for a mixed (test) set.
    pub n_traps: Option<usize>,
    pub stream_tag: u64,
    pub n_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl DatasetHeader {
    /// True when two datasets were simulated under the same protocol.
    pub fn same_protocol(&self, other: &DatasetHeader) -> bool {
        self.material == other.material
            && self.test == other.test
            && self.numerical == other.numerical
            && self.variant == other.variant
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub points: Vec<DataPoint>,
}

#[derive(Serialize, Deserialize)]
struct PointRecord {
    n_traps: usize,
    #[serde(rename = "dH_J_mol")]
    delta_h: Vec<f64>,
    #[serde(rename = "NT_sites_m3")]
    density: Vec<f64>,
    flux: Vec<f64>,
    #[serde(rename = "temp_K")]
    temperatures: Vec<f64>,
}

/// Shared simulation context of a generation run.
#[derive(Debug, Clone, Copy)]
pub struct Protocol<'a> {
    pub material: &'a MaterialParams,
    pub test: &'a TestParams,
    pub numerical: &'a NumericalParams,
    pub variant: ModelVariant,
}

impl Protocol<'_> {
    pub fn simulate(&self, traps: &[TrapSpec]) -> Result<Spectrum> {
        simulate_tds(self.material, traps, self.test, self.numerical, self.variant).map_err(
            |err| TdsError::SimulationFailed {
                traps: traps.to_vec(),
                source: Box::new(err),
            },
        )
    }
}

fn simulate_point(
    k: usize,
    cfg: &GenerationConfig,
    protocol: &Protocol<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<DataPoint> {
    let traps = generate_trap_set(k, cfg, protocol.material, rng)?;
    let full = protocol.simulate(&traps)?;
    Ok(DataPoint {
        n_traps: k,
        traps,
        spectrum: Spectrum::new(full.temperatures, full.fluxes)?,
    })
}

fn header(
    cfg: &GenerationConfig,
    protocol: &Protocol<'_>,
    n_traps: Option<usize>,
    stream_tag: u64,
    n_points: usize,
) -> DatasetHeader {
    DatasetHeader {
        format_version: DATASET_FORMAT_VERSION.to_string(),
        generation: *cfg,
        material: *protocol.material,
        test: *protocol.test,
        numerical: *protocol.numerical,
        variant: protocol.variant,
        n_traps,
        stream_tag,
        n_points,
        provenance: None,
    }
}

/// `n_points` simulated samples with exactly `k` traps each.
pub fn generate_dataset(
    n_points: usize,
    k: usize,
    cfg: &GenerationConfig,
    protocol: &Protocol<'_>,
) -> Result<Dataset> {
    cfg.validate()?;
    let tag = k as u64;
    let points = (0..n_points)
        .into_par_iter()
        .map(|index| {
            let mut rng = point_rng(cfg.seed, tag, index as u64);
            simulate_point(k, cfg, protocol, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        header: header(cfg, protocol, Some(k), tag, n_points),
        points,
    })
}

/// Held-out samples whose trap count is drawn uniformly from `1..=max_traps`.
pub fn generate_test_set(
    n_points: usize,
    cfg: &GenerationConfig,
    protocol: &Protocol<'_>,
) -> Result<Dataset> {
    cfg.validate()?;
    let points = (0..n_points)
        .into_par_iter()
        .map(|index| {
            let mut rng = point_rng(cfg.seed, TEST_SET_TAG, index as u64);
            let k = rng.random_range(1..=cfg.max_traps);
            simulate_point(k, cfg, protocol, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        header: header(cfg, protocol, None, TEST_SET_TAG, n_points),
        points,
    })
}

/// Training datasets for every trap count plus a held-out test set.
#[derive(Debug, Clone)]
pub struct Suite {
    /// `datasets[k - 1]` holds the `k`-trap samples.
    pub datasets: Vec<Dataset>,
    pub test_set: Dataset,
}

pub const DEFAULT_TEST_POINTS: usize = 500;

pub fn generate_suite(
    points_per_count: usize,
    test_points: usize,
    cfg: &GenerationConfig,
    protocol: &Protocol<'_>,
) -> Result<Suite> {
    cfg.validate()?;
    let datasets = (1..=cfg.max_traps)
        .map(|k| {
            log::info!("generating {points_per_count} samples with {k} trap(s)");
            generate_dataset(points_per_count, k, cfg, protocol)
        })
        .collect::<Result<Vec<_>>>()?;
    log::info!("generating {test_points} held-out samples");
    let test_set = generate_test_set(test_points, cfg, protocol)?;
    Ok(Suite { datasets, test_set })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// JSON lines: one header line, then one line per point.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, &self.header)?;
        writeln!(out)?;
        for point in &self.points {
            let record = PointRecord {
                n_traps: point.n_traps,
                delta_h: point.traps.iter().map(|t| t.delta_h).collect(),
                density: point.traps.iter().map(|t| t.density).collect(),
                flux: point.spectrum.fluxes.clone(),
                temperatures: point.spectrum.temperatures.clone(),
            };
            serde_json::to_writer(&mut out, &record)?;
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let mut offset = 0usize;
        let first = lines.next().ok_or(TdsError::Parse {
            offset: 0,
            message: "empty dataset file".into(),
        })??;
        let header: DatasetHeader = parse_line(&first, offset)?;
        if header.format_version != DATASET_FORMAT_VERSION {
            return Err(TdsError::VersionMismatch {
                found: header.format_version,
                expected: DATASET_FORMAT_VERSION.into(),
            });
        }
        offset += first.len() + 1;
        let mut points = Vec::with_capacity(header.n_points);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                offset += line.len() + 1;
                continue;
            }
            let record: PointRecord = parse_line(&line, offset)?;
            offset += line.len() + 1;
            if record.delta_h.len() != record.n_traps || record.density.len() != record.n_traps {
                return Err(TdsError::InconsistentData(format!(
                    "point declares {} traps but lists {} energies and {} densities",
                    record.n_traps,
                    record.delta_h.len(),
                    record.density.len()
                )));
            }
            let traps = record
                .delta_h
                .iter()
                .zip(&record.density)
                .map(|(&dh, &nt)| TrapSpec::new(dh, nt, &header.material))
                .collect();
            points.push(DataPoint {
                n_traps: record.n_traps,
                traps,
                spectrum: Spectrum::new(record.temperatures, record.flux)?,
            });
        }
        if points.len() != header.n_points {
            return Err(TdsError::InconsistentData(format!(
                "header announces {} points, file holds {}",
                header.n_points,
                points.len()
            )));
        }
        Ok(Dataset { header, points })
    }
}

fn parse_line<T: serde::de::DeserializeOwned>(line: &str, offset: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|err| match TdsError::from_json_error(&err, line) {
        TdsError::Parse { offset: inner, message } => TdsError::Parse {
            offset: offset + inner,
            message,
        },
        other => other,
    })
}
