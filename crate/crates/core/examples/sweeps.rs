//! Error ratios of the hybrid schemes across vol-of-vol and CEV exponent,
//! through the experiment runner.

use perturbed_sde::cli::{compute_experiment, parse_config, ExperimentKind};

fn main() -> perturbed_sde::error::Result<()> {
    let raw = "samples = 1000\nseed = 3\n[grid]\nn = [16, 64]\nn_ref = 4096\n";
    for kind in [ExperimentKind::NuSweep, ExperimentKind::BetaSweep] {
        let config = parse_config(raw, Some(kind))?;
        let summary = compute_experiment(&config)?;
        for table in &summary.tables {
            for row in table.rows.iter().filter(|r| r.label.contains("ratio")) {
                println!("{kind:<10} {:<36} n={:<4} {:>6.1}% +- {:.1}", row.label, row.n_or_level, row.value, row.std_error);
            }
        }
    }
    Ok(())
}
