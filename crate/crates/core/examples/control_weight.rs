//! Empirical L2-optimal weight on the base-model correction for the
//! perturbed GBM, estimated on a pilot set and applied to fresh paths.

use perturbed_sde::brownian::sample_lattice;
use perturbed_sde::errorlab::{rho_l2, weighted_estimate, RhoSample};
use perturbed_sde::models::{gbm_exact_path, PerturbedGbm};
use perturbed_sde::schemes::euler_maruyama;

fn sample(model: &PerturbedGbm, eps: f64, n: usize, j: u64) -> perturbed_sde::error::Result<RhoSample> {
    let lattice = sample_lattice(17, j, 256, 1, 1.0)?;
    let coarse = lattice.coarsen(256 / n)?;
    Ok(RhoSample {
        f_eps_ref: gbm_exact_path(&lattice, model.vol(eps), 1.0)?.terminal()[0],
        f_eps_bar: euler_maruyama(model, eps, &coarse, &[1.0])?.terminal()[0],
        f0: gbm_exact_path(&lattice, model.base_vol, 1.0)?.terminal()[0],
        f0_bar: euler_maruyama(model, 0.0, &coarse, &[1.0])?.terminal()[0],
    })
}

fn main() -> perturbed_sde::error::Result<()> {
    let model = PerturbedGbm::new(0.4, 1.0);
    for eps in [0.05, 0.2, 0.6] {
        let pilot = (0..2000).map(|j| sample(&model, eps, 16, j)).collect::<Result<Vec<_>, _>>()?;
        let rho = rho_l2(&pilot)?;
        let fresh = (2000..12000).map(|j| sample(&model, eps, 16, j)).collect::<Result<Vec<_>, _>>()?;
        let rmse = |w: f64| {
            let s: f64 = fresh.iter().map(|x| (x.f_eps_ref - weighted_estimate(x, w)).powi(2)).sum();
            (s / fresh.len() as f64).sqrt()
        };
        println!(
            "eps={eps:<5} rho={:.3}  rmse plain {:.4e}  rho=1 {:.4e}  rho=fit {:.4e}",
            rho.value,
            rmse(0.0),
            rmse(1.0),
            rmse(rho.value)
        );
    }
    Ok(())
}
