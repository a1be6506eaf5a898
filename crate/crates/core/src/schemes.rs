//! Time-stepping schemes and their accelerated variants.
//!
//! An accelerated path is `X^eps_n - X^0_n + X^0`: the discretization at
//! `eps`, minus the same discretization at `eps = 0` on the same increments,
//! plus an accurate path of the `eps = 0` model. The caller supplies that
//! base path; it may live on any grid that contains the scheme grid.

use crate::brownian::{FactorView, IncrementLattice, IncrementSource};
use crate::error::{Error, Result};
use crate::models::{sabr_logvol_model, scaled_base_model, Cev, SabrParams, SdeModel};
use crate::models::gbm_exact_path;
use crate::path::SchemePath;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    EulerMaruyama,
    Milstein,
}

impl Scheme {
    pub fn label(self) -> &'static str {
        match self {
            Scheme::EulerMaruyama => "euler_maruyama",
            Scheme::Milstein => "milstein",
        }
    }
}

fn step_through<M, S>(
    model: &M,
    eps: f64,
    source: &S,
    x0: &[f64],
    scheme: Scheme,
) -> Result<SchemePath>
where
    M: SdeModel + ?Sized,
    S: IncrementSource + ?Sized,
{
    let dim = model.state_dim();
    let d = model.factor_dim();
    if source.n_factors() != d {
        return Err(Error::Shape(format!(
            "model `{}` has {d} factors, lattice has {}",
            model.label(),
            source.n_factors()
        )));
    }
    if x0.len() != dim {
        return Err(Error::Shape(format!(
            "initial state has {} entries, model `{}` has dimension {dim}",
            x0.len(),
            model.label()
        )));
    }
    let milstein = scheme == Scheme::Milstein;
    if milstein {
        if d != 1 {
            return Err(Error::Domain(format!(
                "Milstein stepping needs a single-factor model, `{}` has {d}",
                model.label()
            )));
        }
        if !model.has_milstein_correction() {
            return Err(Error::Domain(format!(
                "model `{}` has no Milstein correction",
                model.label()
            )));
        }
    }

    let n = source.n_steps();
    let dt = source.dt();
    let mut values = Vec::with_capacity((n + 1) * dim);
    values.extend_from_slice(x0);
    let mut state = x0.to_vec();
    let mut next = vec![0.0; dim];
    let mut b = vec![0.0; dim];
    let mut sigma = vec![0.0; dim * d];
    let mut corr = vec![0.0; dim];

    for i in 0..n {
        let dw = source.increment(i);
        model.drift(&state, eps, &mut b);
        model.diffusion(&state, eps, &mut sigma);
        if milstein {
            model.milstein_correction(&state, eps, &mut corr);
        }
        for r in 0..dim {
            let mut x = state[r] + b[r] * dt;
            for (s, w) in sigma[r * d..(r + 1) * d].iter().zip(dw) {
                x += s * w;
            }
            if milstein && corr[r] != 0.0 {
                x += 0.5 * corr[r] * (dw[0] * dw[0] - dt);
            }
            next[r] = x;
        }
        model.absorb(&mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Explosion {
                scheme: scheme.label().to_string(),
                step: i + 1,
            });
        }
        std::mem::swap(&mut state, &mut next);
        values.extend_from_slice(&state);
    }
    SchemePath::new(scheme.label(), eps, source.total_time(), dim, values)
}

/// `X_{i+1} = X_i + b(X_i, eps) dt + sigma(X_i, eps) dB_i`.
pub fn euler_maruyama<M, S>(model: &M, eps: f64, source: &S, x0: &[f64]) -> Result<SchemePath>
where
    M: SdeModel + ?Sized,
    S: IncrementSource + ?Sized,
{
    step_through(model, eps, source, x0, Scheme::EulerMaruyama)
}

/// Euler-Maruyama plus `sigma sigma'(X_i, eps) (dB_i^2 - dt) / 2`; single
/// factor models only.
pub fn milstein<M, S>(model: &M, eps: f64, source: &S, x0: &[f64]) -> Result<SchemePath>
where
    M: SdeModel + ?Sized,
    S: IncrementSource + ?Sized,
{
    step_through(model, eps, source, x0, Scheme::Milstein)
}

/// Runs `scheme` with the given stepping rule.
pub fn run_scheme<M, S>(
    scheme: Scheme,
    model: &M,
    eps: f64,
    source: &S,
    x0: &[f64],
) -> Result<SchemePath>
where
    M: SdeModel + ?Sized,
    S: IncrementSource + ?Sized,
{
    step_through(model, eps, source, x0, scheme)
}

/// `perturbed - unperturbed + base` pointwise on the scheme grid, with `base`
/// sampled at the shared grid points.
fn combine(
    label: String,
    eps: f64,
    perturbed: &SchemePath,
    unperturbed: &SchemePath,
    base: &SchemePath,
) -> Result<SchemePath> {
    let n = perturbed.n_steps();
    let dim = perturbed.state_dim();
    if base.state_dim() != dim {
        return Err(Error::Shape(format!(
            "base path has dimension {}, scheme has {dim}",
            base.state_dim()
        )));
    }
    let stride = base.stride_to(n, perturbed.total_time())?;
    let mut values = Vec::with_capacity((n + 1) * dim);
    for i in 0..=n {
        let (xe, x0, xb) = (perturbed.value(i), unperturbed.value(i), base.value(i * stride));
        values.extend((0..dim).map(|r| (xe[r] - x0[r]) + xb[r]));
    }
    SchemePath::new(label, eps, perturbed.total_time(), dim, values)
}

fn accelerated<M, S>(
    scheme: Scheme,
    model: &M,
    eps: f64,
    source: &S,
    x0: &[f64],
    base_exact: &SchemePath,
) -> Result<SchemePath>
where
    M: SdeModel + ?Sized,
    S: IncrementSource + ?Sized,
{
    // fail on grid mismatch before doing any stepping
    base_exact.stride_to(source.n_steps(), source.total_time())?;
    let perturbed = step_through(model, eps, source, x0, scheme)?;
    let unperturbed = step_through(model, 0.0, source, x0, scheme)?;
    combine(
        format!("accelerated_{}", scheme.label()),
        eps,
        &perturbed,
        &unperturbed,
        base_exact,
    )
}

/// `EM(eps) - EM(0) + base_exact` on the lattice grid.
pub fn accelerated_em<M, S>(
    model: &M,
    eps: f64,
    source: &S,
    x0: &[f64],
    base_exact: &SchemePath,
) -> Result<SchemePath>
where
    M: SdeModel + ?Sized,
    S: IncrementSource + ?Sized,
{
    accelerated(Scheme::EulerMaruyama, model, eps, source, x0, base_exact)
}

/// `Milstein(eps) - Milstein(0) + base_exact` on the lattice grid.
pub fn accelerated_milstein<M, S>(
    model: &M,
    eps: f64,
    source: &S,
    x0: &[f64],
    base_exact: &SchemePath,
) -> Result<SchemePath>
where
    M: SdeModel + ?Sized,
    S: IncrementSource + ?Sized,
{
    accelerated(Scheme::Milstein, model, eps, source, x0, base_exact)
}

/// Plain or accelerated run, depending on whether a base path is given.
pub fn run_with_base<M, S>(
    scheme: Scheme,
    model: &M,
    eps: f64,
    source: &S,
    x0: &[f64],
    base: Option<&SchemePath>,
) -> Result<SchemePath>
where
    M: SdeModel + ?Sized,
    S: IncrementSource + ?Sized,
{
    match base {
        Some(base) => accelerated(scheme, model, eps, source, x0, base),
        None => step_through(model, eps, source, x0, scheme),
    }
}

/// Grid on which the Milstein base of the SABR hybrid runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaseGrid {
    /// The scheme's own `n`-step grid.
    #[default]
    Scheme,
    /// The full lattice grid, restricted afterwards.
    Lattice,
}

fn coarse_lattice(lattice: &IncrementLattice, n: usize) -> Result<IncrementLattice> {
    if lattice.n_factors() != 2 {
        return Err(Error::Shape(format!(
            "SABR schemes need a 2-factor lattice, got {}",
            lattice.n_factors()
        )));
    }
    if n == 0 || lattice.n_steps() % n != 0 {
        return Err(Error::GridMismatch(format!(
            "{n} steps do not divide the {}-step lattice",
            lattice.n_steps()
        )));
    }
    lattice.coarsen(lattice.n_steps() / n)
}

/// `S_EM(nu) - S_EM(0) + S_Milstein(0)`, the price component of SABR.
pub fn sabr_hybrid_tilde(params: &SabrParams, lattice: &IncrementLattice, n: usize) -> Result<SchemePath> {
    sabr_hybrid_tilde_with(params, lattice, n, BaseGrid::Scheme)
}

pub fn sabr_hybrid_tilde_with(
    params: &SabrParams,
    lattice: &IncrementLattice,
    n: usize,
    base_grid: BaseGrid,
) -> Result<SchemePath> {
    let coarse = coarse_lattice(lattice, n)?;
    let model = sabr_logvol_model(*params);
    let x0 = model.initial_state();
    let perturbed = euler_maruyama(&model, params.nu, &coarse, &x0)?.project(0)?;
    let unperturbed = euler_maruyama(&model, 0.0, &coarse, &x0)?.project(0)?;
    let cev = Cev::sabr_base(params);
    let base = match base_grid {
        BaseGrid::Scheme => milstein(&cev, 0.0, &FactorView::new(&coarse, 0)?, &[params.s0])?,
        BaseGrid::Lattice => milstein(&cev, 0.0, &FactorView::new(lattice, 0)?, &[params.s0])?,
    };
    combine("sabr_tilde".into(), params.nu, &perturbed, &unperturbed, &base)
}

/// `S_EM(nu) - S0 (L_EM - L)`, where `L` is the scaled log-normal base and
/// `L_EM` its Euler-Maruyama discretization.
pub fn sabr_hybrid_check(params: &SabrParams, lattice: &IncrementLattice, n: usize) -> Result<SchemePath> {
    let coarse = coarse_lattice(lattice, n)?;
    let model = sabr_logvol_model(*params);
    let perturbed = euler_maruyama(&model, params.nu, &coarse, &model.initial_state())?;
    let base_model = scaled_base_model(params);
    let driver = FactorView::new(&coarse, 0)?;
    let base_em = euler_maruyama(&base_model, 0.0, &driver, &[1.0])?;
    let base_exact = gbm_exact_path(&driver, base_model.vol, 1.0)?;
    let values = (0..=n)
        .map(|i| perturbed.value(i)[0] - params.s0 * (base_em.value(i)[0] - base_exact.value(i)[0]))
        .collect();
    SchemePath::new("sabr_check", params.nu, lattice.total_time(), 1, values)
}

/// Fine path on `fine` and coarse path on `fine.coarsen(k)`, driven by the
/// same Brownian path. With `base` both are accelerated against it.
pub fn coupled_pair<M>(
    model: &M,
    eps: f64,
    fine: &IncrementLattice,
    k: usize,
    scheme: Scheme,
    base: Option<&SchemePath>,
) -> Result<(SchemePath, SchemePath)>
where
    M: SdeModel + ?Sized,
{
    let coarse = fine.coarsen(k)?;
    let x0 = model.initial_state();
    let fine_path = run_with_base(scheme, model, eps, fine, &x0, base)?;
    let coarse_path = run_with_base(scheme, model, eps, &coarse, &x0, base)?;
    Ok((fine_path, coarse_path))
}
