//! Per-level mean and standard deviation of the standard, accelerated and
//! localized MLMC corrections for beta = 1 SABR, call and digital payoffs.

use perturbed_sde::mlmc::{level_diagnostics, LevelSpec, MlmcProblem};
use perturbed_sde::models::{sabr_logvol_model, SabrParams};
use perturbed_sde::payoffs::{digital, european_call, localize, smoothed_digital};

fn main() -> perturbed_sde::error::Result<()> {
    let m = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let params = SabrParams::new(100.0, 1.0, 0.16, 0.1, -0.6, 1.0)?;
    let model = sabr_logvol_model(params);
    let spec = LevelSpec::new(4, 4, params.horizon)?;

    let call = european_call(100.0);
    let call_problem =
        MlmcProblem::new(&model, params.nu, call.clone()).with_base_expectation(params.base_expectation(&call)?);

    let loc = localize(digital(100.0), smoothed_digital(100.0, 1.0)?);
    let digital_problem = MlmcProblem::new(&model, params.nu, digital(100.0))
        .with_base_expectation(params.base_expectation(&loc.original)?)
        .with_localization(&loc, params.base_expectation(&loc.smooth_part)?);

    for (name, rows) in [
        ("call", level_diagnostics(&call_problem, &spec, m, 1)?),
        ("digital", level_diagnostics(&digital_problem, &spec, m, 1)?),
    ] {
        println!("{name}");
        for r in rows {
            println!(
                "  l={} n={:<4} {:<16} |mean| {:.3e}  std {:.3e}",
                r.level,
                r.n,
                r.estimator.label(),
                r.abs_mean,
                r.std_dev
            );
        }
    }
    Ok(())
}
