//! Strong convergence of the accelerated Euler and Milstein schemes on the
//! perturbed GBM `dX = (0.4 + eps) X dB`, against its exact solution.

use perturbed_sde::cli::{strong_error_study, ModelConfig, StrongEstimator};
use perturbed_sde::errorlab::fit_rate;
use perturbed_sde::schemes::Scheme;

fn main() -> perturbed_sde::error::Result<()> {
    let samples = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let grids = [8, 16, 32, 64, 128, 256];
    for scheme in [Scheme::EulerMaruyama, Scheme::Milstein] {
        for eps in [0.05, 0.025] {
            let model = ModelConfig::PerturbedGbm {
                base_vol: 0.4,
                x0: 1.0,
                eps,
                horizon: 1.0,
            };
            let estimators = [StrongEstimator::Standard, StrongEstimator::Accelerated];
            let study = strong_error_study(&model, scheme, &estimators, &grids, 256, samples, 2.0, 1)?;
            println!("{} eps={eps}", scheme.label());
            for est in estimators {
                let table = study.terminal.filter(est.label());
                let errors: Vec<String> = table.rows().iter().map(|r| format!("{:.2e}", r.error)).collect();
                let slope = fit_rate(&table)?.slope;
                println!("  {:<12} slope {slope:+.3}  {}", est.label(), errors.join(" "));
            }
        }
    }
    Ok(())
}
