use approx::assert_relative_eq;
use echo4_core::detection::{extract_echo, heterodyne, HeterodyneConfig};
use echo4_core::dynamics::RelaxationSpec;
use echo4_core::ensemble::{run_experiment, EmissionMetadata, EmissionRecord, EnsembleSpec, Sampling, WindowField};
use echo4_core::level::build_default_system;
use echo4_core::sequence::{parse_sequence, predict_pathway};
use echo4_core::{Complex64, DetuningModel, Distribution, Error, Transition};

fn constant_record(value: Complex64, rate: f64, n: usize) -> EmissionRecord {
    EmissionRecord {
        transitions: vec![Transition::new(3, 4)],
        windows: vec![WindowField {
            start: 0.0,
            rate,
            n_samples: n,
            emitted: vec![value; n],
            drive: vec![Complex64::new(0.0, 0.0); n],
        }],
        metadata: EmissionMetadata {
            seed: None,
            n_classes: 1,
            n_area_factors: 1,
            timeline_hash: 0,
            alpha_l: 0.0,
            reference_rabi: 1.0,
            propagated: false,
            phase_cycled: false,
            max_step_error: 0.0,
            verified_classes: 0,
        },
    }
}

#[test]
fn constant_field_is_a_pure_beat() {
    let ls = build_default_system();
    let rec = constant_record(Complex64::from_polar(0.7, 0.3), 200e6, 400);
    let tr = heterodyne(&rec, 0, &ls, &HeterodyneConfig::default()).unwrap();
    assert_eq!(tr.beats.len(), 1);
    assert_relative_eq!(tr.beats[0].1, 12.5e6, epsilon = 1e-3);
    for (k, t) in tr.times().iter().enumerate() {
        let expected = 0.7 * (0.3 - std::f64::consts::TAU * 12.5e6 * t).cos();
        assert!((tr.samples[k] - expected).abs() < 1e-12);
    }
}

#[test]
fn noise_passes_through() {
    let ls = build_default_system();
    let rec = constant_record(Complex64::new(0.0, 0.0), 200e6, 100_000);
    let cfg = HeterodyneConfig { noise_sigma: 0.25, seed: 9, ..Default::default() };
    let tr = heterodyne(&rec, 0, &ls, &cfg).unwrap();
    let n = tr.samples.len() as f64;
    let mean = tr.samples.iter().sum::<f64>() / n;
    let sd = (tr.samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((sd / 0.25 - 1.0).abs() < 0.02);
    assert_eq!(tr, heterodyne(&rec, 0, &ls, &cfg).unwrap());
}

#[test]
fn undersampling_is_rejected() {
    let ls = build_default_system();
    let rec = constant_record(Complex64::new(1.0, 0.0), 20e6, 10);
    assert!(matches!(heterodyne(&rec, 0, &ls, &HeterodyneConfig::default()), Err(Error::Aliasing { .. })));
}

fn four_level_text(input: bool) -> String {
    let area = if input { "0.05pi" } else { "0pi" };
    format!(
        "let ta = 6us\nlet tb = 2us\n\
         pulse at=1us trans=w25 area={area} env=gauss(fwhm=0.2us)\n\
         pulse at=1us+ta trans=w35 area=1pi env=gauss(fwhm=0.2us)\n\
         pulse at=1us+ta+tb trans=w24 area=1pi env=gauss(fwhm=0.2us)\n\
         observe from=0us to=16us rate=200MHz\n"
    )
}

fn spec(sampling: Sampling) -> EnsembleSpec {
    EnsembleSpec {
        detuning: DetuningModel { optical: Distribution::gaussian(150e3), ground: Distribution::point(), excited: Distribution::point() },
        n_classes: 32,
        sampling,
        ..EnsembleSpec::default()
    }
}

#[test]
fn four_level_echo_is_gated_and_offset() {
    let ls = build_default_system();
    let r = RelaxationSpec::from_system(&ls);
    let tl = parse_sequence(&four_level_text(true), &ls).unwrap();
    let pred = predict_pathway(&tl, &ls).unwrap();
    assert_eq!(pred.echo_transition, Transition::new(3, 4));
    let rec = run_experiment(&tl, &ls, &spec(Sampling::GaussQuadrature), &r).unwrap();
    let echo = extract_echo(&rec, &pred, 0.6e-6, 1e-9).unwrap();
    assert!((echo.time - 15e-6).abs() <= 0.2e-6);
    let (t_peak, mag) = rec.peak(0, Transition::new(3, 4));
    assert_eq!(echo.time, t_peak);
    assert_relative_eq!(echo.magnitude(), mag, max_relative = 1e-12);
    // direct recomputation at the peak sample
    let k = rec.windows[0].times().iter().position(|&t| t == echo.time).unwrap();
    assert_eq!(echo.value, rec.emitted(0, Transition::new(3, 4))[k]);

    let tr = heterodyne(&rec, 0, &ls, &HeterodyneConfig::default()).unwrap();
    let beat = |t: Transition| tr.beats.iter().find(|b| b.0 == t).unwrap().1;
    assert_relative_eq!(beat(Transition::new(2, 5)) - beat(Transition::new(3, 4)), 14.8e6, epsilon = 1e-3);

    let off = echo4_core::sequence::PathwayPrediction { echo_transition: Transition::new(1, 4), ..pred.clone() };
    assert!(matches!(extract_echo(&rec, &off, 0.6e-6, 1e-9), Err(Error::NoEcho { .. })));
}

#[test]
fn no_input_gives_no_echo() {
    let ls = build_default_system();
    let r = RelaxationSpec::from_system(&ls);
    let with_input = parse_sequence(&four_level_text(true), &ls).unwrap();
    let pred = predict_pathway(&with_input, &ls).unwrap();
    let tl = parse_sequence(&four_level_text(false), &ls).unwrap();
    for seed in [1, 2, 3] {
        let rec = run_experiment(&tl, &ls, &spec(Sampling::MonteCarlo { seed }), &r).unwrap();
        assert!(matches!(extract_echo(&rec, &pred, 0.6e-6, 1e-12), Err(Error::NoEcho { .. })));
    }
}
