//! Data generation, training, inference and swarm fitting through the
//! public library interface.

use tds_core::datagen::{generate_dataset, generate_test_set};
use tds_core::pipeline::{resample_spectrum, train_bundle};
use tds_core::transport::constants::N_A;
use tds_core::{
    psofit, Dataset, GenerationConfig, MaterialParams, ModelBundle, ModelVariant, NumericalParams, Protocol, PsoConfig,
    Spectrum, TdsError, TestParams, TrainingSettings, TrapRanges, TrapSpec,
};

struct Setup {
    material: MaterialParams,
    test: TestParams,
    numerical: NumericalParams,
    generation: GenerationConfig,
}

impl Setup {
    fn new() -> Self {
        Self {
            material: MaterialParams::bcc_iron(),
            test: TestParams {
                thickness: 0.001,
                t_rest: 600.0,
                heating_rate: 600.0 / 3600.0,
                t_min: 293.15,
                t_max: 873.15,
            },
            numerical: NumericalParams {
                n_elements: 10,
                ntp: 32,
                sample_frequency: 4,
                ..Default::default()
            },
            generation: GenerationConfig {
                max_traps: 2,
                ranges: TrapRanges {
                    energy: [40e3, 100e3],
                    density: [0.5, 5.0],
                },
                min_separation: 20e3,
                first_trap: None,
                seed: 42,
            },
        }
    }

    fn protocol(&self) -> Protocol<'_> {
        Protocol {
            material: &self.material,
            test: &self.test,
            numerical: &self.numerical,
            variant: ModelVariant::Oriani,
        }
    }

    fn suite(&self, n: usize) -> Vec<Dataset> {
        (1..=2)
            .map(|k| generate_dataset(n, k, &self.generation, &self.protocol()).unwrap())
            .collect()
    }
}

fn settings(epochs: usize) -> TrainingSettings {
    TrainingSettings {
        seed: 5,
        classifier_epochs: Some(epochs),
        regressor_epochs: Some(epochs),
        ..TrainingSettings::default()
    }
}

#[test]
fn datasets_round_trip_through_jsonl() {
    let setup = Setup::new();
    let ds = generate_dataset(12, 2, &setup.generation, &setup.protocol()).unwrap();
    let mut bytes = Vec::new();
    ds.write_jsonl(&mut bytes).unwrap();
    let back = Dataset::read_jsonl(bytes.as_slice()).unwrap();
    assert_eq!(back, ds);
    let mut again = Vec::new();
    back.write_jsonl(&mut again).unwrap();
    assert_eq!(bytes, again);
}

#[test]
fn held_out_set_uses_its_own_stream() {
    let setup = Setup::new();
    let train = generate_dataset(20, 1, &setup.generation, &setup.protocol()).unwrap();
    let test = generate_test_set(20, &setup.generation, &setup.protocol()).unwrap();
    for t in test.points.iter().filter(|p| p.n_traps == 1) {
        assert!(train.points.iter().all(|p| p.traps != t.traps));
    }
}

#[test]
fn trained_bundle_recovers_held_out_samples() {
    let setup = Setup::new();
    let suite = setup.suite(300);
    let bundle = train_bundle(&suite, &settings(150)).unwrap();
    let held_out = generate_test_set(40, &setup.generation, &setup.protocol()).unwrap();
    let mut correct = 0;
    let mut errors = Vec::new();
    for p in &held_out.points {
        let prediction = bundle.infer(&p.spectrum).unwrap();
        correct += usize::from(prediction.n_traps == p.n_traps);
        let (traps, _) = bundle.regress(&p.spectrum, p.n_traps).unwrap();
        for (a, b) in traps.iter().zip(&p.traps) {
            errors.push((a.delta_h - b.delta_h).abs());
        }
    }
    let accuracy = correct as f64 / held_out.len() as f64;
    let mae = errors.iter().sum::<f64>() / errors.len() as f64;
    assert!(accuracy >= 0.8, "accuracy {accuracy}");
    assert!(mae < 8e3, "energy MAE {mae} J/mol");
}

#[test]
fn bundle_serialisation_is_lossless_and_deterministic() {
    let setup = Setup::new();
    let suite = setup.suite(30);
    let a = train_bundle(&suite, &settings(3)).unwrap();
    let b = train_bundle(&suite, &settings(3)).unwrap();
    let (mut ja, mut jb) = (Vec::new(), Vec::new());
    a.write_json(&mut ja).unwrap();
    b.write_json(&mut jb).unwrap();
    assert_eq!(ja, jb);
    let back = ModelBundle::read_json(ja.as_slice()).unwrap();
    let probe = &suite[1].points[0].spectrum;
    assert_eq!(back.infer(probe).unwrap(), a.infer(probe).unwrap());
}

#[test]
fn inference_on_a_foreign_grid_is_a_range_error() {
    let setup = Setup::new();
    let bundle = train_bundle(&setup.suite(20), &settings(2)).unwrap();
    let far = Spectrum::new(vec![1500.0, 1600.0, 1700.0], vec![1e-7, 2e-7, 1e-7]).unwrap();
    assert!(matches!(bundle.infer_raw(&far), Err(TdsError::RangeMismatch { .. })));
}

#[test]
fn partially_covering_spectrum_is_padded_with_a_warning() {
    let setup = Setup::new();
    let bundle = train_bundle(&setup.suite(20), &settings(2)).unwrap();
    let grid = &bundle.metadata.temperature_grid;
    let half: Vec<f64> = grid[..grid.len() / 2].to_vec();
    let raw = Spectrum::new(half.clone(), vec![1e-7; half.len()]).unwrap();
    let resampled = resample_spectrum(&raw, grid).unwrap();
    assert!(resampled.coverage_warning.is_some());
    assert_eq!(resampled.spectrum.fluxes[grid.len() - 1], 1e-10);
    let (_, warning) = bundle.infer_raw(&raw).unwrap();
    assert!(warning.is_some());
}

#[test]
fn swarm_recovers_a_single_trap() {
    let setup = Setup::new();
    let protocol = setup.protocol();
    let truth = [TrapSpec::new(-70e3, 2.0 * N_A, &setup.material)];
    let target = protocol.simulate(&truth).unwrap();
    let cfg = PsoConfig {
        swarm_size: 20,
        iterations: 60,
        energy_bounds: [40e3, 100e3],
        density_bounds: [0.5 * N_A, 5.0 * N_A],
        seed: 1,
        ..PsoConfig::default()
    };
    let fit = psofit::fit(&target, 1, &cfg, &protocol).unwrap();
    let found = &fit.traps[0];
    assert!((found.delta_h - truth[0].delta_h).abs() < 2e3, "{}", found.delta_h);
    let ratio = found.density / truth[0].density;
    assert!((1.0 / 1.5..1.5).contains(&ratio), "{ratio}");
    assert_eq!(fit.trace.len(), cfg.iterations + 1);
    assert!(fit.trace.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn objective_grows_when_an_energy_is_perturbed() {
    let setup = Setup::new();
    let protocol = setup.protocol();
    let truth = vec![
        TrapSpec::new(-55e3, 2.0 * N_A, &setup.material),
        TrapSpec::new(-85e3, 1.0 * N_A, &setup.material),
    ];
    let target = protocol.simulate(&truth).unwrap();
    let at_truth = psofit::objective(&truth, &target, &protocol).unwrap();
    let mut shifted = truth.clone();
    shifted[1] = TrapSpec::new(-95e3, 1.0 * N_A, &setup.material);
    let off = psofit::objective(&shifted, &target, &protocol).unwrap();
    assert!(at_truth < 1e-12, "{at_truth}");
    assert!(off > 100.0 * at_truth.max(1e-12));
    let swapped = [truth[1], truth[0]];
    assert!((psofit::objective(&swapped, &target, &protocol).unwrap() - at_truth).abs() < 1e-12);
}
