//! Single-level Monte Carlo price of an at-the-money call under beta = 1
//! SABR, Euler-Maruyama on 4^5 steps. This is the reference value the MLMC
//! acceptance check compares against.
//!
//! ```text
//! cargo run --release --example brute_force_reference -- [paths] [seed]
//! ```

use std::time::Instant;

use perturbed_sde::mlmc::{Estimator, MlmcProblem};
use perturbed_sde::models::{sabr_logvol_model, SabrParams};
use perturbed_sde::payoffs::european_call;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let paths: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10_000_000);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0x5ab7_2e4f);

    let params = SabrParams::new(100.0, 1.0, 0.16, 0.1, -0.6, 1.0)?;
    let model = sabr_logvol_model(params);
    let problem = MlmcProblem::new(&model, params.nu, european_call(100.0));

    let start = Instant::now();
    let stats = problem.single_level_stats(1024, params.horizon, seed, 0..paths, &[Estimator::Standard])?[0];
    println!("paths      {}", stats.count());
    println!("seed       {seed}");
    println!("estimate   {:.17e}", stats.mean());
    println!("std_error  {:.17e}", stats.std_error());
    println!("elapsed_s  {:.1}", start.elapsed().as_secs_f64());
    Ok(())
}
