//! Multi-level Monte Carlo with standard, accelerated and localized level
//! samplers.
//!
//! Level `l` runs on `n_l = k^l` steps. A level-`l` draw for path index `j`
//! uses the lattice `sample_lattice(derive_seed(seed, l), j, n_l, d, T)`; the
//! coarse path of that draw runs on the same lattice coarsened by `k`. The
//! accelerated sampler evaluates both the `eps` scheme and the `eps = 0`
//! scheme on each lattice.
//!
//! Sample statistics are reduced over fixed blocks of path indices and the
//! block results are folded in index order, so every report is independent
//! of the number of worker threads.

use std::ops::Range;

use rayon::prelude::*;

use crate::brownian::{derive_seed, sample_lattice, IncrementLattice};
use crate::error::{Error, Result};
use crate::models::SdeModel;
use crate::payoffs::{LocalizedPayoff, Payoff};
use crate::schemes::{run_scheme, Scheme};

const BLOCK: u64 = 1024;

/// Geometric level structure `n_l = k^l`, `l = 0..=L`, on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelSpec {
    base: usize,
    max_level: usize,
    horizon: f64,
}

impl LevelSpec {
    pub fn new(base: usize, max_level: usize, horizon: f64) -> Result<Self> {
        if base < 2 {
            return Err(Error::Domain(format!("refinement factor must be >= 2, got {base}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        let spec = Self {
            base,
            max_level,
            horizon,
        };
        spec.grid_size(max_level)?;
        Ok(spec)
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn grid_size(&self, level: usize) -> Result<usize> {
        if level > self.max_level {
            return Err(Error::Domain(format!(
                "level {level} exceeds the maximum level {}",
                self.max_level
            )));
        }
        u32::try_from(level)
            .ok()
            .and_then(|l| self.base.checked_pow(l))
            .ok_or_else(|| Error::Domain(format!("{}^{level} steps overflow", self.base)))
    }

    pub fn grid_sizes(&self) -> Vec<usize> {
        (0..=self.max_level)
            .map(|l| self.base.pow(l as u32))
            .collect()
    }
}

/// `L = ceil(log(1/target) / log k)`, the textbook level count with its
/// additive constant set to zero.
pub fn asymptotic_max_level(target_rmse: f64, base: usize) -> Result<usize> {
    if !(target_rmse > 0.0 && target_rmse.is_finite()) {
        return Err(Error::Domain(format!("target RMSE must be positive, got {target_rmse}")));
    }
    if base < 2 {
        return Err(Error::Domain(format!("refinement factor must be >= 2, got {base}")));
    }
    Ok(((1.0 / target_rmse).ln() / (base as f64).ln()).ceil().max(0.0) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Estimator {
    Standard,
    Accelerated,
    Localized,
}

impl Estimator {
    pub fn label(self) -> &'static str {
        match self {
            Estimator::Standard => "standard",
            Estimator::Accelerated => "accelerated",
            Estimator::Localized => "accelerated_loc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AllocationRule {
    /// `N_l = ceil(2 (L+1) g^-2 V n_l^-1)` with `V = max_m V_m n_m`.
    Balanced,
    /// `N_l = ceil(2 g^-2 sqrt(V_l / n_l) sum_m sqrt(V_m n_m))`.
    #[default]
    CostOptimal,
}

/// A model, a perturbation size and the payoffs the samplers need.
pub struct MlmcProblem<'a, M: SdeModel + ?Sized> {
    model: &'a M,
    eps: f64,
    payoff: Payoff,
    scheme: Scheme,
    base_expectation: Option<f64>,
    smooth: Option<(Payoff, f64)>,
}

impl<'a, M: SdeModel + ?Sized> MlmcProblem<'a, M> {
    pub fn new(model: &'a M, eps: f64, payoff: Payoff) -> Self {
        Self {
            model,
            eps,
            payoff,
            scheme: Scheme::EulerMaruyama,
            base_expectation: None,
            smooth: None,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    /// `E[f(X^0_T)]`; enables the accelerated estimator.
    pub fn with_base_expectation(mut self, value: f64) -> Self {
        self.base_expectation = Some(value);
        self
    }

    /// Smooth part `f_s` and `E[f_s(X^0_T)]`; enables the localized estimator.
    pub fn with_localization(mut self, localized: &LocalizedPayoff, smooth_expectation: f64) -> Self {
        self.payoff = localized.original.clone();
        self.smooth = Some((localized.smooth_part.clone(), smooth_expectation));
        self
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn payoff(&self) -> &Payoff {
        &self.payoff
    }

    /// Estimators this problem has enough information for.
    pub fn estimators(&self) -> Vec<Estimator> {
        let mut out = vec![Estimator::Standard];
        if self.base_expectation.is_some() {
            out.push(Estimator::Accelerated);
        }
        if self.smooth.is_some() {
            out.push(Estimator::Localized);
        }
        out
    }

    fn check(&self, estimator: Estimator) -> Result<()> {
        match estimator {
            Estimator::Accelerated if self.base_expectation.is_none() => Err(Error::Domain(
                "accelerated estimator needs the base expectation E[f(X^0_T)]".into(),
            )),
            Estimator::Localized if self.smooth.is_none() => Err(Error::Domain(
                "localized estimator needs a smooth part and its base expectation".into(),
            )),
            _ => Ok(()),
        }
    }

    fn lattice(&self, spec: &LevelSpec, level: usize, seed: u64, path_index: u64) -> Result<IncrementLattice> {
        sample_lattice(
            derive_seed(seed, level as u64),
            path_index,
            spec.grid_size(level)?,
            self.model.factor_dim(),
            spec.horizon,
        )
    }

    /// Terminal first components on the fine grid and, for `level >= 1`, the
    /// coarse grid.
    fn terminals(&self, eps: f64, fine: &IncrementLattice, coarse: Option<&IncrementLattice>) -> Result<(f64, f64)> {
        let x0 = self.model.initial_state();
        let f = run_scheme(self.scheme, self.model, eps, fine, &x0)?.terminal()[0];
        let c = match coarse {
            Some(coarse) => run_scheme(self.scheme, self.model, eps, coarse, &x0)?.terminal()[0],
            None => f64::NAN,
        };
        Ok((f, c))
    }

    /// One level-`l` draw of every estimator in `wanted`, on a shared lattice.
    fn draw(
        &self,
        spec: &LevelSpec,
        level: usize,
        seed: u64,
        path_index: u64,
        wanted: &[Estimator],
    ) -> Result<[f64; 3]> {
        let fine = self.lattice(spec, level, seed, path_index)?;
        let coarse = if level > 0 {
            Some(fine.coarsen(spec.base)?)
        } else {
            None
        };
        self.draw_on(&fine, coarse.as_ref(), wanted)
    }

    /// Estimator values on a fine lattice and an optional coarsening of it;
    /// without a coarse lattice these are single-level values.
    fn draw_on(
        &self,
        fine: &IncrementLattice,
        coarse: Option<&IncrementLattice>,
        wanted: &[Estimator],
    ) -> Result<[f64; 3]> {
        let (ef, ec) = self.terminals(self.eps, fine, coarse)?;
        let f = &self.payoff;
        let single = coarse.is_none();
        let mut out = [f64::NAN; 3];
        out[0] = if single {
            f.evaluate(ef)
        } else {
            f.evaluate(ef) - f.evaluate(ec)
        };
        if wanted.iter().all(|e| *e == Estimator::Standard) {
            return Ok(out);
        }
        let (bf, bc) = self.terminals(0.0, fine, coarse)?;
        let controlled = |g: &Payoff, c: f64| {
            if single {
                f.evaluate(ef) - g.evaluate(bf) + c
            } else {
                (f.evaluate(ef) - g.evaluate(bf)) - (f.evaluate(ec) - g.evaluate(bc))
            }
        };
        if let Some(c) = self.base_expectation {
            out[1] = controlled(f, c);
        }
        if let Some((g, c)) = &self.smooth {
            out[2] = controlled(g, *c);
        }
        Ok(out)
    }

    fn draw_one(&self, spec: &LevelSpec, level: usize, seed: u64, path_index: u64, estimator: Estimator) -> Result<f64> {
        self.check(estimator)?;
        let slot = estimator as usize;
        Ok(self.draw(spec, level, seed, path_index, &[estimator])?[slot])
    }

    /// Sample statistics of each estimator in `wanted` over `indices`.
    pub fn level_stats(
        &self,
        spec: &LevelSpec,
        level: usize,
        seed: u64,
        indices: Range<u64>,
        wanted: &[Estimator],
    ) -> Result<[SampleStats; 3]> {
        spec.grid_size(level)?;
        self.reduce(indices, wanted, |j| self.draw(spec, level, seed, j, wanted))
    }

    /// Plain Monte Carlo statistics of `P = f(X^eps_n)` and its controlled
    /// variants on an `n`-step grid, path `j` driven by
    /// `sample_lattice(seed, j, n, d, horizon)`.
    pub fn single_level_stats(
        &self,
        n: usize,
        horizon: f64,
        seed: u64,
        indices: Range<u64>,
        wanted: &[Estimator],
    ) -> Result<[SampleStats; 3]> {
        self.reduce(indices, wanted, |j| {
            let lattice = sample_lattice(seed, j, n, self.model.factor_dim(), horizon)?;
            self.draw_on(&lattice, None, wanted)
        })
    }

    fn reduce<F>(&self, indices: Range<u64>, wanted: &[Estimator], draw: F) -> Result<[SampleStats; 3]>
    where
        F: Fn(u64) -> Result<[f64; 3]> + Sync,
    {
        for &e in wanted {
            self.check(e)?;
        }
        let start = indices.start;
        let len = indices.end.saturating_sub(start);
        let blocks: Vec<Result<[SampleStats; 3]>> = (0..len.div_ceil(BLOCK))
            .into_par_iter()
            .map(|b| {
                let lo = start + b * BLOCK;
                let hi = (lo + BLOCK).min(start + len);
                let mut acc = [SampleStats::default(); 3];
                for j in lo..hi {
                    let values = draw(j)?;
                    for &e in wanted {
                        acc[e as usize].push(values[e as usize]);
                    }
                }
                Ok(acc)
            })
            .collect();
        let mut total = [SampleStats::default(); 3];
        for block in blocks {
            let block = block?;
            for (t, b) in total.iter_mut().zip(&block) {
                t.merge(b);
            }
        }
        Ok(total)
    }
}

/// One draw of `P_l - P_{l-1}` (`P_0` at level 0) with `P_l = f(X^eps_{n_l})`.
pub fn sample_level_standard<M: SdeModel + ?Sized>(
    model: &M,
    eps: f64,
    payoff: &Payoff,
    level: usize,
    spec: &LevelSpec,
    seed: u64,
    path_index: u64,
) -> Result<f64> {
    MlmcProblem::new(model, eps, payoff.clone()).draw_one(spec, level, seed, path_index, Estimator::Standard)
}

/// One draw of `P^new_l - P^new_{l-1}` with
/// `P^new_l = f(X^eps_{n_l}) - f(X^0_{n_l}) + E[f(X^0_T)]`.
#[allow(clippy::too_many_arguments)]
pub fn sample_level_new<M: SdeModel + ?Sized>(
    model: &M,
    eps: f64,
    payoff: &Payoff,
    base_expectation: f64,
    level: usize,
    spec: &LevelSpec,
    seed: u64,
    path_index: u64,
) -> Result<f64> {
    MlmcProblem::new(model, eps, payoff.clone())
        .with_base_expectation(base_expectation)
        .draw_one(spec, level, seed, path_index, Estimator::Accelerated)
}

/// As [`sample_level_new`] with the control applied to the smooth part only:
/// `P_l = f(X^eps_{n_l}) - f_s(X^0_{n_l}) + E[f_s(X^0_T)]`.
#[allow(clippy::too_many_arguments)]
pub fn sample_level_localized<M: SdeModel + ?Sized>(
    model: &M,
    eps: f64,
    localized: &LocalizedPayoff,
    base_expectation_smooth: f64,
    level: usize,
    spec: &LevelSpec,
    seed: u64,
    path_index: u64,
) -> Result<f64> {
    MlmcProblem::new(model, eps, localized.original.clone())
        .with_localization(localized, base_expectation_smooth)
        .draw_one(spec, level, seed, path_index, Estimator::Localized)
}

/// Count, mean and centred second moment, merged with Chan's update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl SampleStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Self) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = other.mean - self.mean;
        self.mean += delta * nb / n;
        self.m2 += other.m2 + delta * delta * na * nb / n;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero below two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// Sample counts meeting `sum_l V_l / N_l <= target^2 / 2`, at least 2 each.
pub fn allocate_samples(
    level_variances: &[f64],
    spec: &LevelSpec,
    target_rmse: f64,
    rule: AllocationRule,
) -> Result<Vec<u64>> {
    if !(target_rmse > 0.0 && target_rmse.is_finite()) {
        return Err(Error::Domain(format!("target RMSE must be positive, got {target_rmse}")));
    }
    if level_variances.len() != spec.max_level + 1 {
        return Err(Error::Shape(format!(
            "{} variances for {} levels",
            level_variances.len(),
            spec.max_level + 1
        )));
    }
    if let Some(v) = level_variances.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!("level variance must be finite and >= 0, got {v}")));
    }
    let sizes: Vec<f64> = spec.grid_sizes().iter().map(|&n| n as f64).collect();
    let inv_g2 = 1.0 / (target_rmse * target_rmse);
    let raw: Vec<f64> = match rule {
        AllocationRule::Balanced => {
            let scale = level_variances
                .iter()
                .zip(&sizes)
                .map(|(v, n)| v * n)
                .fold(0.0, f64::max);
            let levels = level_variances.len() as f64;
            sizes.iter().map(|n| 2.0 * levels * inv_g2 * scale / n).collect()
        }
        AllocationRule::CostOptimal => {
            let total: f64 = level_variances.iter().zip(&sizes).map(|(v, n)| (v * n).sqrt()).sum();
            level_variances
                .iter()
                .zip(&sizes)
                .map(|(v, n)| 2.0 * inv_g2 * (v / n).sqrt() * total)
                .collect()
        }
    };
    raw.into_iter()
        .map(|x| {
            let x = x.ceil().max(2.0);
            if x > 1e15 {
                Err(Error::Domain(format!("sample allocation {x:e} is infeasible")))
            } else {
                Ok(x as u64)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelReport {
    pub level: usize,
    pub n: usize,
    pub mean_delta: f64,
    pub var_delta: f64,
    pub samples: u64,
    pub cost: f64,
    pub pilot_variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmcReport {
    pub levels: Vec<LevelReport>,
    pub total_estimate: f64,
    pub total_std_error: f64,
    pub total_cost: f64,
    pub estimator_label: String,
}

impl MlmcReport {
    /// `sum_l V_l / N_l` from the main pass.
    pub fn realized_variance(&self) -> f64 {
        self.levels.iter().map(|l| l.var_delta / l.samples as f64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmcSettings {
    pub target_rmse: f64,
    pub estimator: Estimator,
    pub seed: u64,
    pub pilot_size: u64,
    pub rule: AllocationRule,
}

/// Pilot pass on path indices `0..pilot`, allocation, then a main pass on
/// `pilot..pilot + N_l`. The report uses main-pass samples only.
pub fn run_mlmc<M: SdeModel + ?Sized>(
    problem: &MlmcProblem<'_, M>,
    spec: &LevelSpec,
    settings: &MlmcSettings,
) -> Result<MlmcReport> {
    if settings.pilot_size < 100 {
        return Err(Error::Domain(format!(
            "pilot needs at least 100 samples, got {}",
            settings.pilot_size
        )));
    }
    let estimator = settings.estimator;
    problem.check(estimator)?;
    let slot = estimator as usize;
    let pilot = settings.pilot_size;
    let pilot_vars = (0..=spec.max_level)
        .map(|l| Ok(problem.level_stats(spec, l, settings.seed, 0..pilot, &[estimator])?[slot].variance()))
        .collect::<Result<Vec<f64>>>()?;
    let samples = allocate_samples(&pilot_vars, spec, settings.target_rmse, settings.rule)?;
    let mut levels = Vec::with_capacity(spec.max_level + 1);
    for (l, (&n_l, &pilot_variance)) in samples.iter().zip(&pilot_vars).enumerate() {
        let stats = problem.level_stats(spec, l, settings.seed, pilot..pilot + n_l, &[estimator])?[slot];
        let n = spec.grid_size(l)?;
        levels.push(LevelReport {
            level: l,
            n,
            mean_delta: stats.mean(),
            var_delta: stats.variance(),
            samples: n_l,
            cost: n_l as f64 * n as f64,
            pilot_variance,
        });
    }
    Ok(MlmcReport {
        total_estimate: levels.iter().map(|l| l.mean_delta).sum(),
        total_std_error: levels
            .iter()
            .map(|l| l.var_delta / l.samples as f64)
            .sum::<f64>()
            .sqrt(),
        total_cost: levels.iter().map(|l| l.cost).sum(),
        estimator_label: estimator.label().to_string(),
        levels,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub level: usize,
    pub n: usize,
    pub estimator: Estimator,
    pub mean: f64,
    pub abs_mean: f64,
    pub std_dev: f64,
    pub std_error: f64,
    pub samples: u64,
}

/// Per-level mean and standard deviation of every available estimator,
/// computed from the same `m` coupled draws per level.
pub fn level_diagnostics<M: SdeModel + ?Sized>(
    problem: &MlmcProblem<'_, M>,
    spec: &LevelSpec,
    m: u64,
    seed: u64,
) -> Result<Vec<DiagnosticRow>> {
    if m < 1000 {
        return Err(Error::Domain(format!("diagnostics need at least 1000 samples, got {m}")));
    }
    let wanted = problem.estimators();
    let mut rows = Vec::new();
    for l in 0..=spec.max_level {
        let stats = problem.level_stats(spec, l, seed, 0..m, &wanted)?;
        for &e in &wanted {
            let s = stats[e as usize];
            rows.push(DiagnosticRow {
                level: l,
                n: spec.grid_size(l)?,
                estimator: e,
                mean: s.mean(),
                abs_mean: s.mean().abs(),
                std_dev: s.std_dev(),
                std_error: s.std_error(),
                samples: s.count(),
            });
        }
    }
    Ok(rows)
}
