//! L2 strong errors of plain Euler and the CEV-based hybrid for SABR
//! (beta = 0.9, nu = 0.1), terminal and sup over the scheme grid.

use perturbed_sde::cli::{strong_error_study, ModelConfig, StrongEstimator};
use perturbed_sde::models::SabrParams;
use perturbed_sde::schemes::Scheme;

fn main() -> perturbed_sde::error::Result<()> {
    let samples = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2_000);
    let params = SabrParams::with_scaled_alpha(100.0, 0.9, 0.16, 0.1, -0.6, 1.0)?;
    let study = strong_error_study(
        &ModelConfig::Sabr(params),
        Scheme::EulerMaruyama,
        &[StrongEstimator::Standard, StrongEstimator::Accelerated],
        &[8, 16, 32, 64, 128, 256],
        1 << 14,
        samples,
        2.0,
        2024,
    )?;
    println!("{:>5} {:>22} {:>22}", "n", "terminal euler/tilde", "sup euler/tilde");
    for n in [8, 16, 32, 64, 128, 256] {
        let get = |t: &perturbed_sde::errorlab::ErrorTable, label| t.filter(label).get(n).map(|r| r.error).unwrap_or(f64::NAN);
        println!(
            "{n:>5} {:>10.4} {:>10.4}  {:>10.4} {:>10.4}",
            get(&study.terminal, "standard"),
            get(&study.terminal, "accelerated"),
            get(&study.sup, "standard"),
            get(&study.sup, "accelerated")
        );
    }
    println!("paths used {}, excluded {}", study.samples, study.excluded);
    Ok(())
}
