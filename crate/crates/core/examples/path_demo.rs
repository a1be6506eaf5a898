//! One SABR path: the fine Euler reference, plain Euler on 16 steps and the
//! two hybrid schemes on the same Brownian increments.

use perturbed_sde::brownian::sample_lattice;
use perturbed_sde::models::{sabr_logvol_model, SabrParams, SdeModel};
use perturbed_sde::schemes::{euler_maruyama, sabr_hybrid_check, sabr_hybrid_tilde};

fn main() -> perturbed_sde::error::Result<()> {
    let params = SabrParams::with_scaled_alpha(100.0, 0.9, 0.16, 0.1, -0.6, 1.0)?;
    let model = sabr_logvol_model(params);
    let x0 = model.initial_state();
    let n = 16;
    let lattice = sample_lattice(7, 0, 1 << 14, 2, params.horizon)?;

    let reference = euler_maruyama(&model, params.nu, &lattice, &x0)?.restrict(n)?;
    let standard = euler_maruyama(&model, params.nu, &lattice.coarsen((1 << 14) / n)?, &x0)?;
    let tilde = sabr_hybrid_tilde(&params, &lattice, n)?;
    let check = sabr_hybrid_check(&params, &lattice, n)?;

    println!("{:>6} {:>11} {:>11} {:>11} {:>11}", "t", "reference", "euler", "tilde", "check");
    for (i, t) in reference.grid_times().iter().enumerate() {
        println!(
            "{t:>6.3} {:>11.5} {:>11.5} {:>11.5} {:>11.5}",
            reference.value(i)[0],
            standard.value(i)[0],
            tilde.value(i)[0],
            check.value(i)[0]
        );
    }
    Ok(())
}
