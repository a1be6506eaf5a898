//! Standard versus accelerated MLMC price of an at-the-money call under
//! beta = 1 SABR at the same target RMSE.

use perturbed_sde::mlmc::{run_mlmc, AllocationRule, Estimator, LevelSpec, MlmcProblem, MlmcSettings};
use perturbed_sde::models::{sabr_logvol_model, SabrParams};
use perturbed_sde::payoffs::european_call;

fn main() -> perturbed_sde::error::Result<()> {
    let target = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let params = SabrParams::new(100.0, 1.0, 0.16, 0.1, -0.6, 1.0)?;
    let model = sabr_logvol_model(params);
    let f = european_call(100.0);
    let problem = MlmcProblem::new(&model, params.nu, f.clone()).with_base_expectation(params.base_expectation(&f)?);
    let spec = LevelSpec::new(4, 5, params.horizon)?;

    for estimator in [Estimator::Standard, Estimator::Accelerated] {
        let settings = MlmcSettings {
            target_rmse: target,
            estimator,
            seed: 42,
            pilot_size: 1000,
            rule: AllocationRule::CostOptimal,
        };
        let report = run_mlmc(&problem, &spec, &settings)?;
        println!(
            "{:<12} estimate {:.4} +- {:.4}  cost {:.3e}",
            report.estimator_label, report.total_estimate, report.total_std_error, report.total_cost
        );
        for l in &report.levels {
            println!("  l={} N={:<8} mean {:+.4e} var {:.3e}", l.level, l.samples, l.mean_delta, l.var_delta);
        }
    }
    Ok(())
}
