use std::cell::RefCell;
use std::process::Command;

use perturbed_sde::brownian::{sample_lattice, IncrementLattice, IncrementSource};
use perturbed_sde::cli::{compute_experiment, parse_config, run_experiment, ExperimentConfig, ExperimentKind, CSV_HEADER};
use perturbed_sde::mlmc::{run_mlmc, AllocationRule, Estimator, LevelSpec, MlmcProblem, MlmcSettings};
use perturbed_sde::models::{gbm_call_price, gbm_exact_path, PerturbedGbm};
use perturbed_sde::payoffs::european_call;
use perturbed_sde::schemes::{accelerated_em, euler_maruyama};

struct Counting<'a> {
    inner: &'a IncrementLattice,
    reads: RefCell<Vec<usize>>,
}

impl<'a> Counting<'a> {
    fn new(inner: &'a IncrementLattice) -> Self {
        Self {
            inner,
            reads: RefCell::new(vec![0; inner.n_steps()]),
        }
    }
}

impl IncrementSource for Counting<'_> {
    fn n_steps(&self) -> usize {
        self.inner.n_steps()
    }
    fn n_factors(&self) -> usize {
        self.inner.n_factors()
    }
    fn total_time(&self) -> f64 {
        self.inner.total_time()
    }
    fn increment(&self, step: usize) -> &[f64] {
        self.reads.borrow_mut()[step] += 1;
        self.inner.increment(step)
    }
}

#[test]
fn both_runs_read_every_increment_of_one_lattice() {
    let model = PerturbedGbm::new(0.4, 1.0);
    let lattice = sample_lattice(21, 0, 32, 1, 1.0).unwrap();
    let base = gbm_exact_path(&lattice, 0.4, 1.0).unwrap();

    let counting = Counting::new(&lattice);
    let plain = euler_maruyama(&model, 0.1, &counting, &[1.0]).unwrap();
    assert_eq!(*counting.reads.borrow(), vec![1; 32]);

    let counting = Counting::new(&lattice);
    let acc = accelerated_em(&model, 0.1, &counting, &[1.0], &base).unwrap();
    assert_eq!(*counting.reads.borrow(), vec![2; 32]);

    let zero = euler_maruyama(&model, 0.0, &lattice, &[1.0]).unwrap();
    for i in 0..=32 {
        let expect = (plain.value(i)[0] - zero.value(i)[0]) + base.value(i)[0];
        assert_eq!(acc.value(i)[0].to_bits(), expect.to_bits());
    }
}

fn combined(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).abs() / (a.1 * a.1 + b.1 * b.1).sqrt()
}

#[test]
fn mlmc_telescopes_to_the_finest_level() {
    let model = PerturbedGbm::new(0.3, 1.0);
    let c = gbm_call_price(1.0, 1.0, 0.3, 1.0);
    let problem = MlmcProblem::new(&model, 0.1, european_call(1.0)).with_base_expectation(c);
    let spec = LevelSpec::new(2, 3, 1.0).unwrap();
    let wanted = [Estimator::Standard, Estimator::Accelerated];
    let single = problem.single_level_stats(8, 1.0, 77, 0..100_000, &wanted).unwrap();
    for est in wanted {
        let settings = MlmcSettings {
            target_rmse: 0.004,
            estimator: est,
            seed: 5,
            pilot_size: 1000,
            rule: AllocationRule::CostOptimal,
        };
        let report = run_mlmc(&problem, &spec, &settings).unwrap();
        let s = &single[est as usize];
        let z = combined((report.total_estimate, report.total_std_error), (s.mean(), s.std_error()));
        assert!(z < 4.0, "{}: mlmc {} vs single level {} (z = {z})", est.label(), report.total_estimate, s.mean());
        assert!(report.realized_variance() <= 0.004f64.powi(2) / 2.0 * 1.5);
    }
}

#[test]
fn accelerated_level_zero_is_unbiased_for_the_base() {
    // with eps = 0 every draw of the accelerated estimator collapses to the constant
    let model = PerturbedGbm::new(0.3, 1.0);
    let c = gbm_call_price(1.0, 1.0, 0.3, 1.0);
    let problem = MlmcProblem::new(&model, 0.0, european_call(1.0)).with_base_expectation(c);
    let spec = LevelSpec::new(4, 2, 1.0).unwrap();
    let stats = problem.level_stats(&spec, 0, 1, 0..200, &[Estimator::Accelerated]).unwrap();
    let s = &stats[Estimator::Accelerated as usize];
    assert_eq!(s.mean(), c);
    assert_eq!(s.variance(), 0.0);
    for l in 1..=2 {
        let s = problem.level_stats(&spec, l, 1, 0..200, &[Estimator::Accelerated]).unwrap()[Estimator::Accelerated as usize];
        assert_eq!((s.mean(), s.variance()), (0.0, 0.0));
    }
}

#[test]
fn level_variance_decays_like_the_strong_rate() {
    let model = PerturbedGbm::new(0.3, 1.0);
    let problem = MlmcProblem::new(&model, 0.1, european_call(1.0));
    let spec = LevelSpec::new(4, 3, 1.0).unwrap();
    let v: Vec<f64> = (2..=3)
        .map(|l| problem.level_stats(&spec, l, 9, 0..20_000, &[Estimator::Standard]).unwrap()[0].variance())
        .collect();
    let slope = (v[1] / v[0]).ln() / 4f64.ln();
    assert!((-1.3..=-0.7).contains(&slope), "log4 variance slope {slope}");
}

fn small(kind: ExperimentKind) -> ExperimentConfig {
    let raw = match kind {
        ExperimentKind::StrongError => "seed = 12\nsamples = 300\n[grid]\nn = [4, 8, 16]\nn_ref = 64\n",
        _ => "seed = 12\nsamples = 1000\n[levels]\nbase = 2\nmax_level = 2\n",
    };
    parse_config(raw, Some(kind)).unwrap()
}

#[test]
fn experiments_write_manifested_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(ExperimentKind::StrongError);
    let summary = run_experiment(&config, dir.path()).unwrap();
    assert_eq!(summary.excluded_paths, 0);
    assert!(!summary.files.is_empty());
    for file in &summary.files {
        let text = std::fs::read_to_string(file).unwrap();
        let mut lines = text.lines();
        let manifest = lines.next().unwrap();
        assert!(manifest.starts_with("# perturbed-sde"), "{manifest}");
        assert!(manifest.contains(&format!("config_sha256={}", config.hash())));
        assert!(manifest.contains("seed=12"));
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert!(lines.count() > 0);
    }
}

#[test]
fn experiments_are_reproducible() {
    for kind in [ExperimentKind::StrongError, ExperimentKind::MlmcDiagnostics] {
        let config = small(kind);
        let a = compute_experiment(&config).unwrap();
        let b = compute_experiment(&config).unwrap();
        let body = |s: &perturbed_sde::cli::RunSummary| {
            s.tables.iter().map(|t| t.body(kind, config.seed)).collect::<Vec<_>>()
        };
        assert_eq!(body(&a), body(&b));
        let other = compute_experiment(&config.clone().with_seed(13)).unwrap();
        assert_ne!(body(&a), body(&other));
    }
}

fn sabr_lab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sabr-lab")).args(args).output().unwrap()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[grid]\nn = [16, 8]\nbogus = 1\n").unwrap();
    let run = sabr_lab(&["strong_error", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(run.status.code(), Some(2));
    let err = String::from_utf8_lossy(&run.stderr);
    assert!(err.contains("grid.n:") && err.contains("grid.bogus"), "{err}");

    assert_eq!(sabr_lab(&["strong_error", "--samples", "0", "--out", out]).status.code(), Some(2));

    let good = dir.path().join("good.toml");
    std::fs::write(&good, "[grid]\nn = [4, 8]\nn_ref = 32\n").unwrap();
    let run = sabr_lab(&["strong_error", "--config", good.to_str().unwrap(), "--samples", "50", "--seed", "4", "--out", out]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let csv = std::fs::read_to_string(dir.path().join("strong_error.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("seed=4 seed_source=flag"));
}
