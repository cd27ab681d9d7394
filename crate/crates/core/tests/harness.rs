use ewsg::harness::{
    build_model, parse_json, render_csv, render_json, run_config, run_experiment, run_sweep, ExperimentConfig,
    ModelName, MseReference, ObservableKind, SweepParameter, SweepSpec, CSV_HEADER,
};
use ewsg::samplers::{SamplerKind, ThetaInit};
use ewsg::Error;

fn quick(kind: SamplerKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.model.n = 30;
    c.sampler.name = kind;
    c.sampler.data_passes = 10;
    c.sampler.seed = 42;
    c.run.chains = 64;
    c
}

#[test]
fn full_gradient_with_tiny_step_matches_target() {
    let mut c = quick(SamplerKind::FullGradient);
    c.sampler.h = 0.005;
    c.sampler.data_passes = 3000;
    c.sampler.init_theta = ThetaInit::Target;
    c.run.chains = 4000;
    let r = run_experiment(&c).unwrap();
    let kl = r.metric("kl").unwrap();
    assert!(kl < 0.01, "kl {kl}");
}

#[test]
fn reruns_give_identical_csv() {
    let c = quick(SamplerKind::Ewsg);
    let a = render_csv(&run_experiment(&c).unwrap()).unwrap();
    let b = render_csv(&run_experiment(&c).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn config_echo_reproduces_metrics() {
    let r = run_experiment(&quick(SamplerKind::Sghmc)).unwrap();
    let again = run_experiment(&r.config).unwrap();
    assert_eq!(r.metrics, again.metrics);
    assert_eq!(r.run_id, again.run_id);
}

#[test]
fn zero_length_index_chain_reports_sghmc_metrics() {
    let mut e = quick(SamplerKind::Ewsg);
    e.sampler.index_chain_len = 0;
    let ewsg = run_experiment(&e).unwrap();
    let sghmc = run_experiment(&quick(SamplerKind::Sghmc)).unwrap();
    for m in &sghmc.metrics {
        assert_eq!(ewsg.metric(&m.name), Some(m.value), "{}", m.name);
    }
}

#[test]
fn json_round_trip_is_byte_identical() {
    let mut c = quick(SamplerKind::Ewsg);
    c.run.observable = Some(ObservableKind::Variance);
    c.run.index_tv_steps = Some(1000);
    let text = render_json(&run_experiment(&c).unwrap()).unwrap();
    let back = parse_json(&text).unwrap();
    assert_eq!(render_json(&back).unwrap(), text);
}

#[test]
fn csv_has_fixed_header_and_full_precision() {
    let r = run_experiment(&quick(SamplerKind::Ewsg)).unwrap();
    let text = render_csv(&r).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER);
    for row in reader.records() {
        let row = row.unwrap();
        let value: f64 = row[11].parse().unwrap();
        assert_eq!(Some(value), r.metric(&row[10]), "{}", &row[10]);
    }
}

#[test]
fn sweep_emits_one_row_per_point_and_metric() {
    let mut c = quick(SamplerKind::Ewsg);
    c.run.observable = Some(ObservableKind::Variance);
    c.sampler.init_theta = ThetaInit::Target;
    c.run.time = Some(2.0);
    c.sweep = Some(SweepSpec {
        parameter: SweepParameter::H,
        values: vec![0.01, 0.02, 0.04],
    });
    let r = run_sweep(&c).unwrap();
    let sweep = r.sweep.as_ref().unwrap();
    assert_eq!(sweep.points.len(), 3);
    assert!(sweep.fits.iter().any(|f| f.metric == "mse" && f.series.slope.is_some()));
    let rows = render_csv(&r).unwrap().lines().count() - 1;
    let point_rows: usize = sweep.points.iter().map(|p| p.metrics.len()).sum();
    assert_eq!(rows, point_rows + 2 * sweep.fits.len());
    // Fixed time: the step count follows h.
    let steps: Vec<f64> = sweep.points.iter().map(|p| p.metric("outer_steps").unwrap()).collect();
    assert!(steps[0] > steps[1] && steps[1] > steps[2]);
}

#[test]
fn coupled_reference_runs_without_analytic_target() {
    let mut c = quick(SamplerKind::Sghmc);
    c.model.name = ModelName::Misspecified;
    c.model.n = 40;
    c.sampler.h = 0.01;
    c.run.observable = Some(ObservableKind::Mean);
    c.run.mse_reference = MseReference::Coupled;
    let r = run_config(&c).unwrap();
    assert!(r.metric("mse").unwrap() >= 0.0);
    c.run.mse_reference = MseReference::Truth;
    assert!(matches!(run_config(&c), Err(Error::Config { .. })));
}

#[test]
fn synthetic_logistic_model_reports_predictive_scores() {
    let mut c = quick(SamplerKind::Ewsg);
    c.model.name = ModelName::Blr;
    c.model.n = 400;
    c.model.dim = 3;
    c.sampler.batch = 10;
    c.sampler.h = 0.01;
    c.sampler.gamma = 20.0;
    let r = run_experiment(&c).unwrap();
    let acc = r.metric("test_accuracy").unwrap();
    assert!(acc > 0.5, "accuracy {acc}");
    assert!(r.metric("test_log_lik").unwrap() < 0.0);
    assert!(r.metric("kl").is_none());
}

#[test]
fn variance_reduced_run_reports_friction_health() {
    let mut c = quick(SamplerKind::EwsgVr);
    c.sampler.h = 0.02;
    let r = run_experiment(&c).unwrap();
    assert!(r.metric("friction_min_eigenvalue").unwrap() > 0.0);
    assert_eq!(r.metric("friction_clamped"), Some(0.0));
}

#[test]
fn divergence_beyond_threshold_fails_the_run() {
    let mut c = quick(SamplerKind::Sghmc);
    c.sampler.h = 2.0;
    c.sampler.data_passes = 200;
    let err = run_experiment(&c).unwrap_err();
    assert!(matches!(err, Error::DivergenceThreshold { .. }));
    assert_eq!(ewsg::harness::exit_code(&err), 3);
    c.run.divergence_threshold = 1.0;
    assert_eq!(run_experiment(&c).unwrap().metric("diverged"), Some(64.0));
}

#[test]
fn quadratic_scalar_offsets_are_used() {
    let mut c = quick(SamplerKind::Sghmc);
    c.model.name = ModelName::QuadraticScalar;
    c.model.offsets = Some(vec![1.0, -1.0, 3.0, -3.0]);
    let built = build_model(&c.model).unwrap();
    assert_eq!(built.as_model().n_terms(), 4);
    let r = run_experiment(&c).unwrap();
    assert!(r.metric("kl").is_some());
}
