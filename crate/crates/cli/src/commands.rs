//! One function per subcommand; each loads its configuration, calls into
//! `tds_core` and writes artifacts.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use tds_core::datagen::{generate_dataset, generate_test_set};
use tds_core::pipeline::{load_bundle, resample_spectrum, save_bundle, train_bundle};
use tds_core::psofit;
use tds_core::{Dataset, FitResult, Protocol, Provenance, Spectrum, TrapPrediction};

use crate::config::{Overrides, Resolved, RunConfig};
use crate::error::CliError;

pub const TEST_SET_FILE: &str = "test_set.jsonl";

pub fn dataset_file(k: usize) -> String {
    format!("dataset_k{k}.jsonl")
}

fn load(path: &Path, overrides: Overrides) -> Result<Resolved, CliError> {
    let resolved = RunConfig::load(path)?.resolve(overrides)?;
    log::debug!("configuration {} hashes to {}", path.display(), resolved.hash());
    Ok(resolved)
}

fn provenance(resolved: &Resolved) -> Provenance {
    Provenance {
        config_sha256: resolved.hash(),
        seed: resolved.seed,
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_error(parent))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_error(path))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(io_error(path))
}

fn required(value: Option<PathBuf>, fallback: &Option<PathBuf>, key: &str, flag: &str) -> Result<PathBuf, CliError> {
    value.or_else(|| fallback.clone()).ok_or_else(|| CliError::Config {
        key: format!("paths.{key}"),
        message: format!("no path given; pass {flag} or set `paths.{key}`"),
    })
}

/// Writes `value` as pretty JSON to `path`, or to standard output.
fn emit_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("output serialises");
    match path {
        Some(p) => {
            let mut out = create(p)?;
            writeln!(out, "{text}").and_then(|_| out.flush()).map_err(io_error(p))?;
            log::info!("wrote {}", p.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn protocol(resolved: &Resolved) -> Result<Protocol<'_>, CliError> {
    Ok(Protocol {
        material: &resolved.material,
        test: resolved.test()?,
        numerical: &resolved.numerical,
        variant: resolved.variant,
    })
}

fn read_spectrum(path: &Path) -> Result<Spectrum, CliError> {
    Spectrum::read_csv(open(path)?).map_err(CliError::core(format!("reading {}", path.display())))
}

#[derive(Serialize)]
struct SimulationMetadata<'a> {
    provenance: Provenance,
    variant: tds_core::ModelVariant,
    double_sided: bool,
    ledger: Option<tds_core::spectrum::MassLedger>,
    traps: &'a [tds_core::TrapSpec],
}

pub fn simulate(
    config: &Path,
    overrides: Overrides,
    output: Option<PathBuf>,
    double_sided: bool,
    contributions: bool,
) -> Result<(), CliError> {
    let resolved = load(config, overrides)?;
    let protocol = protocol(&resolved)?;
    log::info!(
        "simulating {} trap(s) with the {:?} model",
        resolved.traps.len(),
        resolved.variant
    );
    let mut spectrum = tds_core::simulate_tds(
        protocol.material,
        &resolved.traps,
        protocol.test,
        protocol.numerical,
        protocol.variant,
    )
    .map_err(CliError::core("simulation failed"))?;
    if double_sided {
        spectrum = spectrum.doubled();
    }
    match output.or(resolved.paths.output.clone()) {
        Some(path) => {
            let mut out = create(&path)?;
            spectrum
                .write_csv(&mut out, contributions)
                .map_err(CliError::core(format!("writing {}", path.display())))?;
            out.flush().map_err(io_error(&path))?;
            let meta_path = PathBuf::from(format!("{}.meta.json", path.display()));
            emit_json(
                &SimulationMetadata {
                    provenance: provenance(&resolved),
                    variant: resolved.variant,
                    double_sided,
                    ledger: spectrum.ledger,
                    traps: &resolved.traps,
                },
                Some(&meta_path),
            )?;
            log::info!("wrote {}", path.display());
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            spectrum
                .write_csv(&mut lock, contributions)
                .map_err(CliError::core("writing to standard output"))?;
        }
    }
    Ok(())
}

fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), CliError> {
    let mut out = create(path)?;
    ds.write_jsonl(&mut out)
        .map_err(CliError::core(format!("writing {}", path.display())))?;
    out.flush().map_err(io_error(path))?;
    log::info!("wrote {} samples to {}", ds.len(), path.display());
    Ok(())
}

pub fn generate(config: &Path, overrides: Overrides, out_dir: Option<PathBuf>) -> Result<(), CliError> {
    let resolved = load(config, overrides)?;
    let plan = resolved.generation()?;
    let protocol = protocol(&resolved)?;
    let dir = required(out_dir, &resolved.paths.datasets_dir, "datasets_dir", "--out-dir")?;
    std::fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    let stamp = provenance(&resolved);
    for k in 1..=plan.config.max_traps {
        log::info!("generating {} samples with {k} trap(s)", plan.points_per_count);
        let mut ds = generate_dataset(plan.points_per_count, k, &plan.config, &protocol)
            .map_err(CliError::core(format!("generating the {k}-trap dataset")))?;
        ds.header.provenance = Some(stamp.clone());
        write_dataset(&ds, &dir.join(dataset_file(k)))?;
    }
    log::info!("generating {} held-out samples", plan.test_points);
    let mut test = generate_test_set(plan.test_points, &plan.config, &protocol)
        .map_err(CliError::core("generating the held-out set"))?;
    test.header.provenance = Some(stamp);
    write_dataset(&test, &dir.join(TEST_SET_FILE))
}

pub fn train(
    config: &Path,
    overrides: Overrides,
    datasets: Option<PathBuf>,
    output: Option<PathBuf>,
) -> Result<(), CliError> {
    let resolved = load(config, overrides)?;
    let dir = required(datasets, &resolved.paths.datasets_dir, "datasets_dir", "--datasets")?;
    let bundle_path = required(output, &resolved.paths.bundle, "bundle", "--output")?;
    let max_traps = resolved.generation()?.config.max_traps;
    let suite = (1..=max_traps)
        .map(|k| {
            let path = dir.join(dataset_file(k));
            Dataset::read_jsonl(open(&path)?).map_err(CliError::core(format!("reading {}", path.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut bundle = train_bundle(&suite, &resolved.training).map_err(CliError::core("training failed"))?;
    bundle.metadata.provenance = Some(provenance(&resolved));
    save_bundle(&bundle, &bundle_path).map_err(CliError::core(format!("writing {}", bundle_path.display())))?;
    for (name, history) in &bundle.metadata.histories {
        if let Some(loss) = history.final_validation_loss() {
            log::info!("{name}: final validation loss {loss:.4e}");
        }
    }
    log::info!("wrote {}", bundle_path.display());
    Ok(())
}

#[derive(Serialize)]
struct PredictionReport {
    provenance: Option<Provenance>,
    bundle_provenance: Option<Provenance>,
    spectrum: PathBuf,
    coverage_warning: Option<String>,
    prediction: TrapPrediction,
}

pub fn infer(
    config: Option<&Path>,
    overrides: Overrides,
    bundle: Option<PathBuf>,
    spectrum: Option<PathBuf>,
    output: Option<PathBuf>,
) -> Result<(), CliError> {
    let resolved = config.map(|c| load(c, overrides)).transpose()?;
    let paths = resolved.as_ref().map(|r| &r.paths);
    let pick = |flag: Option<PathBuf>, from: fn(&crate::config::PathsSection) -> &Option<PathBuf>, key: &str, name: &str| {
        required(flag, paths.map_or(&None, from), key, name)
    };
    let bundle_path = pick(bundle, |p| &p.bundle, "bundle", "--bundle")?;
    let spectrum_path = pick(spectrum, |p| &p.spectrum, "spectrum", "--spectrum")?;
    let output = output.or_else(|| paths.and_then(|p| p.output.clone()));

    let bundle = load_bundle(&bundle_path).map_err(CliError::core(format!("loading {}", bundle_path.display())))?;
    let raw = read_spectrum(&spectrum_path)?;
    let (prediction, coverage_warning) = bundle
        .infer_raw(&raw)
        .map_err(CliError::core(format!("inferring traps of {}", spectrum_path.display())))?;
    if prediction.low_confidence {
        log::warn!(
            "low-confidence trap count: top class probability {:.3}",
            prediction.probabilities.iter().copied().fold(0.0, f64::max)
        );
    }
    emit_json(
        &PredictionReport {
            provenance: resolved.as_ref().map(provenance),
            bundle_provenance: bundle.metadata.provenance.clone(),
            spectrum: spectrum_path,
            coverage_warning,
            prediction,
        },
        output.as_deref(),
    )
}

#[derive(Serialize)]
struct FitReport {
    provenance: Provenance,
    spectrum: PathBuf,
    coverage_warning: Option<String>,
    result: FitResult,
}

pub fn fit(
    config: &Path,
    overrides: Overrides,
    spectrum: Option<PathBuf>,
    n_traps: Option<usize>,
    output: Option<PathBuf>,
) -> Result<(), CliError> {
    let resolved = load(config, overrides)?;
    let plan = resolved.pso()?;
    let protocol = protocol(&resolved)?;
    let spectrum_path = required(spectrum, &resolved.paths.spectrum, "spectrum", "--spectrum")?;
    let raw = read_spectrum(&spectrum_path)?;
    let grid = resolved.temperature_grid()?;
    let resampled =
        resample_spectrum(&raw, &grid).map_err(CliError::core(format!("resampling {}", spectrum_path.display())))?;
    if let Some(w) = &resampled.coverage_warning {
        log::warn!("{w}");
    }
    let n_traps = n_traps.unwrap_or(plan.n_traps);
    plan.config.validate(n_traps).map_err(CliError::core("--n-traps"))?;
    log::info!(
        "fitting {n_traps} trap(s) with {} particles for {} iterations",
        plan.config.swarm_size,
        plan.config.iterations
    );
    let result =
        psofit::fit(&resampled.spectrum, n_traps, &plan.config, &protocol).map_err(CliError::core("fit failed"))?;
    log::info!("best objective {:.4e}", result.objective);
    emit_json(
        &FitReport {
            provenance: provenance(&resolved),
            spectrum: spectrum_path,
            coverage_warning: resampled.coverage_warning,
            result,
        },
        output.or(resolved.paths.output.clone()).as_deref(),
    )
}
