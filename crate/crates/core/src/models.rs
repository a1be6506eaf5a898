//! Perturbed SDE models `dX = b(X, eps) dt + sigma(X, eps) dB` and the
//! log-normal pricing formulas of their `eps = 0` limits.

use crate::brownian::IncrementSource;
use crate::error::{Error, Result};
use crate::normal;
use crate::path::SchemePath;
use crate::payoffs::{Payoff, PayoffShape};

/// Coefficients of a perturbed SDE.
///
/// `diffusion` writes an `N x d` matrix in row-major order. Models with an
/// absorbing boundary implement [`SdeModel::absorb`], which schemes apply
/// after every step.
pub trait SdeModel: Send + Sync {
    fn label(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn factor_dim(&self) -> usize;
    fn initial_state(&self) -> Vec<f64>;
    fn drift(&self, state: &[f64], eps: f64, out: &mut [f64]);
    fn diffusion(&self, state: &[f64], eps: f64, out: &mut [f64]);

    fn has_milstein_correction(&self) -> bool {
        false
    }

    /// `sigma * d(sigma)/dx`, only meaningful for single-factor models.
    fn milstein_correction(&self, _state: &[f64], _eps: f64, _out: &mut [f64]) {}

    fn absorb(&self, _state: &mut [f64]) {}
}

/// `max(s, 0)^beta`, the CEV local volatility factor.
#[inline]
fn cev_power(s: f64, beta: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if beta == 1.0 {
        s
    } else {
        s.powf(beta)
    }
}

/// Parameters of the SABR model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SabrParams {
    pub s0: f64,
    pub beta: f64,
    /// Initial variance level.
    pub alpha0: f64,
    /// Vol-of-vol; this is the perturbation parameter.
    pub nu: f64,
    pub rho: f64,
    pub horizon: f64,
}

impl SabrParams {
    pub fn new(s0: f64, beta: f64, alpha0: f64, nu: f64, rho: f64, horizon: f64) -> Result<Self> {
        let mut problems = Vec::new();
        if !(s0 > 0.0 && s0.is_finite()) {
            problems.push(format!("s0 must be positive, got {s0}"));
        }
        if !(beta > 0.0 && beta <= 1.0) {
            problems.push(format!("beta must lie in (0, 1], got {beta}"));
        }
        if !(alpha0 > 0.0 && alpha0.is_finite()) {
            problems.push(format!("alpha0 must be positive, got {alpha0}"));
        }
        if !(nu >= 0.0 && nu.is_finite()) {
            problems.push(format!("nu must be non-negative, got {nu}"));
        }
        if !(-1.0..=1.0).contains(&rho) {
            problems.push(format!("rho must lie in [-1, 1], got {rho}"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            problems.push(format!("horizon must be positive, got {horizon}"));
        }
        if problems.is_empty() {
            Ok(Self {
                s0,
                beta,
                alpha0,
                nu,
                rho,
                horizon,
            })
        } else {
            Err(Error::Domain(problems.join("; ")))
        }
    }

    /// Sets `alpha0 = base_variance * s0^(2 (1 - beta))`, which keeps the
    /// effective log-volatility near `sqrt(base_variance)` across `beta`.
    pub fn with_scaled_alpha(
        s0: f64,
        beta: f64,
        base_variance: f64,
        nu: f64,
        rho: f64,
        horizon: f64,
    ) -> Result<Self> {
        Self::new(s0, beta, base_variance * s0.powf(2.0 * (1.0 - beta)), nu, rho, horizon)
    }

    /// Volatility `sqrt(alpha0) * s0^(beta - 1)` of the scaled log-normal base.
    pub fn base_lognormal_vol(&self) -> f64 {
        self.alpha0.sqrt() * self.s0.powf(self.beta - 1.0)
    }

    /// `E[f(S_T)]` under the `nu = 0` model when it is log-normal (`beta = 1`).
    pub fn base_expectation(&self, payoff: &Payoff) -> Result<f64> {
        if self.beta != 1.0 {
            return Err(Error::Domain(format!(
                "no closed-form base expectation for beta = {}; supply it explicitly",
                self.beta
            )));
        }
        Ok(lognormal_expectation(payoff, self.s0, self.alpha0.sqrt(), self.horizon))
    }
}

/// SABR with log-transformed variance: state `(S, a)` with
/// `dS = sqrt(alpha0 e^a) S^beta dB1` and
/// `da = -eps^2/2 dt + eps (rho dB1 + sqrt(1 - rho^2) dB2)`, `eps = nu`.
///
/// The lattice factors are independent; the correlation lives in the
/// diffusion matrix. `S` is absorbed at zero.
#[derive(Debug, Clone)]
pub struct SabrLogVol {
    params: SabrParams,
    rho_orth: f64,
    label: String,
}

pub fn sabr_logvol_model(params: SabrParams) -> SabrLogVol {
    SabrLogVol {
        rho_orth: (1.0 - params.rho * params.rho).sqrt(),
        label: format!("sabr(beta={},nu={},rho={})", params.beta, params.nu, params.rho),
        params,
    }
}

impl SabrLogVol {
    pub fn params(&self) -> &SabrParams {
        &self.params
    }
}

impl SdeModel for SabrLogVol {
    fn label(&self) -> &str {
        &self.label
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn factor_dim(&self) -> usize {
        2
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![self.params.s0, 0.0]
    }

    #[inline]
    fn drift(&self, _state: &[f64], eps: f64, out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = -0.5 * eps * eps;
    }

    #[inline]
    fn diffusion(&self, state: &[f64], eps: f64, out: &mut [f64]) {
        let vol = (self.params.alpha0 * state[1].exp()).sqrt();
        out[0] = vol * cev_power(state[0], self.params.beta);
        out[1] = 0.0;
        out[2] = eps * self.params.rho;
        out[3] = eps * self.rho_orth;
    }

    #[inline]
    fn absorb(&self, state: &mut [f64]) {
        if state[0] <= 0.0 {
            state[0] = 0.0;
        }
    }
}

/// CEV model `dS = sigma max(S, 0)^beta dB`, absorbed at zero. This is the
/// `nu = 0` limit of the SABR price equation and does not depend on `eps`.
#[derive(Debug, Clone)]
pub struct Cev {
    pub sigma: f64,
    pub beta: f64,
    pub s0: f64,
    label: String,
}

impl Cev {
    pub fn new(sigma: f64, beta: f64, s0: f64) -> Self {
        Self {
            sigma,
            beta,
            s0,
            label: format!("cev(sigma={sigma},beta={beta})"),
        }
    }

    /// The `nu = 0` price dynamics of a SABR parameter set.
    pub fn sabr_base(params: &SabrParams) -> Self {
        Self::new(params.alpha0.sqrt(), params.beta, params.s0)
    }
}

impl SdeModel for Cev {
    fn label(&self) -> &str {
        &self.label
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn factor_dim(&self) -> usize {
        1
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![self.s0]
    }

    fn drift(&self, _state: &[f64], _eps: f64, out: &mut [f64]) {
        out[0] = 0.0;
    }

    #[inline]
    fn diffusion(&self, state: &[f64], _eps: f64, out: &mut [f64]) {
        out[0] = self.sigma * cev_power(state[0], self.beta);
    }

    fn has_milstein_correction(&self) -> bool {
        true
    }

    #[inline]
    fn milstein_correction(&self, state: &[f64], _eps: f64, out: &mut [f64]) {
        let s = state[0];
        out[0] = if s <= 0.0 {
            0.0
        } else {
            self.sigma * self.sigma * self.beta * cev_power(s, 2.0 * self.beta - 1.0)
        };
    }

    fn absorb(&self, state: &mut [f64]) {
        if state[0] <= 0.0 {
            state[0] = 0.0;
        }
    }
}

/// Driftless geometric Brownian motion `dX = vol X dB`.
#[derive(Debug, Clone)]
pub struct Gbm {
    pub vol: f64,
    pub x0: f64,
    label: String,
}

impl Gbm {
    pub fn new(vol: f64, x0: f64) -> Self {
        Self {
            vol,
            x0,
            label: format!("gbm(vol={vol})"),
        }
    }
}

impl SdeModel for Gbm {
    fn label(&self) -> &str {
        &self.label
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn factor_dim(&self) -> usize {
        1
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![self.x0]
    }

    fn drift(&self, _state: &[f64], _eps: f64, out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn diffusion(&self, state: &[f64], _eps: f64, out: &mut [f64]) {
        out[0] = self.vol * state[0];
    }

    fn has_milstein_correction(&self) -> bool {
        true
    }

    fn milstein_correction(&self, state: &[f64], _eps: f64, out: &mut [f64]) {
        out[0] = self.vol * self.vol * state[0];
    }
}

/// Scaled `nu = 0` model `L = S / S0` with the scaling constant
/// `S0^(beta - 1)` kept: `dL = sqrt(alpha0) S0^(beta-1) L dB1`, `L_0 = 1`.
pub fn scaled_base_model(params: &SabrParams) -> Gbm {
    let mut model = Gbm::new(params.base_lognormal_vol(), 1.0);
    model.label = format!("scaled_base(vol={})", model.vol);
    model
}

/// Perturbed driftless GBM `dX = (base_vol + eps) X dB`. Its coefficients
/// are linear in `x` and affine in `eps`, and `X^eps` is log-normal for every
/// `eps`, so it serves as an exactly solvable test model.
#[derive(Debug, Clone)]
pub struct PerturbedGbm {
    pub base_vol: f64,
    pub x0: f64,
    label: String,
}

impl PerturbedGbm {
    pub fn new(base_vol: f64, x0: f64) -> Self {
        Self {
            base_vol,
            x0,
            label: format!("perturbed_gbm(vol={base_vol}+eps)"),
        }
    }

    pub fn vol(&self, eps: f64) -> f64 {
        self.base_vol + eps
    }
}

impl SdeModel for PerturbedGbm {
    fn label(&self) -> &str {
        &self.label
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn factor_dim(&self) -> usize {
        1
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![self.x0]
    }

    fn drift(&self, _state: &[f64], _eps: f64, out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn diffusion(&self, state: &[f64], eps: f64, out: &mut [f64]) {
        out[0] = (self.base_vol + eps) * state[0];
    }

    fn has_milstein_correction(&self) -> bool {
        true
    }

    fn milstein_correction(&self, state: &[f64], eps: f64, out: &mut [f64]) {
        let v = self.base_vol + eps;
        out[0] = v * v * state[0];
    }
}

type VecFn = Box<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>;

/// A model assembled from closures, for ad-hoc and test dynamics.
pub struct FnModel {
    label: String,
    initial: Vec<f64>,
    factor_dim: usize,
    drift: VecFn,
    diffusion: VecFn,
    correction: Option<VecFn>,
}

impl FnModel {
    pub fn new<B, S>(
        label: impl Into<String>,
        initial: Vec<f64>,
        factor_dim: usize,
        drift: B,
        diffusion: S,
    ) -> Self
    where
        B: Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static,
        S: Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            label: label.into(),
            initial,
            factor_dim,
            drift: Box::new(drift),
            diffusion: Box::new(diffusion),
            correction: None,
        }
    }

    pub fn with_milstein_correction<C>(mut self, correction: C) -> Self
    where
        C: Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static,
    {
        self.correction = Some(Box::new(correction));
        self
    }
}

impl SdeModel for FnModel {
    fn label(&self) -> &str {
        &self.label
    }

    fn state_dim(&self) -> usize {
        self.initial.len()
    }

    fn factor_dim(&self) -> usize {
        self.factor_dim
    }

    fn initial_state(&self) -> Vec<f64> {
        self.initial.clone()
    }

    fn drift(&self, state: &[f64], eps: f64, out: &mut [f64]) {
        (self.drift)(state, eps, out)
    }

    fn diffusion(&self, state: &[f64], eps: f64, out: &mut [f64]) {
        (self.diffusion)(state, eps, out)
    }

    fn has_milstein_correction(&self) -> bool {
        self.correction.is_some()
    }

    fn milstein_correction(&self, state: &[f64], eps: f64, out: &mut [f64]) {
        if let Some(c) = &self.correction {
            c(state, eps, out)
        }
    }
}

/// Exact driftless GBM `x0 exp(vol W_t - vol^2 t / 2)` on the grid of a
/// single-factor increment source.
pub fn gbm_exact_path<S: IncrementSource + ?Sized>(
    source: &S,
    vol: f64,
    x0: f64,
) -> Result<SchemePath> {
    if source.n_factors() != 1 {
        return Err(Error::Shape(format!(
            "exact GBM needs a single-factor lattice, got {} factors",
            source.n_factors()
        )));
    }
    let n = source.n_steps();
    let total = source.total_time();
    let mut values = Vec::with_capacity(n + 1);
    values.push(x0);
    let mut w = 0.0;
    for i in 0..n {
        w += source.increment(i)[0];
        let t = (i + 1) as f64 * total / n as f64;
        values.push(x0 * (vol * w - 0.5 * vol * vol * t).exp());
    }
    SchemePath::new(format!("exact_gbm(vol={vol})"), 0.0, total, 1, values)
}

/// Driftless Black-Scholes call `E[max(S_T - K, 0)]`.
pub fn gbm_call_price(s0: f64, strike: f64, vol: f64, maturity: f64) -> f64 {
    if strike <= 0.0 {
        return s0 - strike;
    }
    let sd = vol * maturity.sqrt();
    if sd <= 0.0 {
        return (s0 - strike).max(0.0);
    }
    let d1 = ((s0 / strike).ln() + 0.5 * sd * sd) / sd;
    let d2 = d1 - sd;
    s0 * normal::cdf(d1) - strike * normal::cdf(d2)
}

/// `P(S_T >= K)` for driftless log-normal `S_T`.
pub fn gbm_digital_price(s0: f64, strike: f64, vol: f64, maturity: f64) -> f64 {
    if strike <= 0.0 {
        return 1.0;
    }
    let sd = vol * maturity.sqrt();
    if sd <= 0.0 {
        return if s0 >= strike { 1.0 } else { 0.0 };
    }
    let d2 = ((s0 / strike).ln() - 0.5 * sd * sd) / sd;
    normal::cdf(d2)
}

/// Expectation of the ramp `(max(x-K+h,0) - max(x-K-h,0)) / 2h`, which is
/// exactly a call spread.
pub fn gbm_smoothed_digital_price(s0: f64, strike: f64, h: f64, vol: f64, maturity: f64) -> f64 {
    (gbm_call_price(s0, strike - h, vol, maturity) - gbm_call_price(s0, strike + h, vol, maturity))
        / (2.0 * h)
}

const QUAD_HALF_WIDTH: f64 = 12.0;
const QUAD_INTERVALS: usize = 12_000;

/// `E[f(S_T)]` for driftless log-normal `S_T`. Uses closed forms for calls,
/// digitals, ramps and their differences; other payoffs are integrated with
/// composite Simpson in the Gaussian variable over `[-12, 12]`.
pub fn lognormal_expectation(payoff: &Payoff, s0: f64, vol: f64, maturity: f64) -> f64 {
    match payoff.shape() {
        PayoffShape::Call(k) => gbm_call_price(s0, k, vol, maturity),
        PayoffShape::Digital(k) => gbm_digital_price(s0, k, vol, maturity),
        PayoffShape::SmoothedDigital(k, h) => gbm_smoothed_digital_price(s0, k, h, vol, maturity),
        PayoffShape::Zero => 0.0,
        PayoffShape::Difference(a, b) => {
            lognormal_expectation(a, s0, vol, maturity) - lognormal_expectation(b, s0, vol, maturity)
        }
        PayoffShape::Other => {
            let sd = vol * maturity.sqrt();
            let h = 2.0 * QUAD_HALF_WIDTH / QUAD_INTERVALS as f64;
            let g = |z: f64| payoff.evaluate(s0 * (sd * z - 0.5 * sd * sd).exp()) * normal::pdf(z);
            let mut acc = g(-QUAD_HALF_WIDTH) + g(QUAD_HALF_WIDTH);
            for i in 1..QUAD_INTERVALS {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * g(-QUAD_HALF_WIDTH + i as f64 * h);
            }
            acc * h / 3.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::{sample_lattice, IncrementLattice};
    use crate::payoffs;

    fn sec51() -> SabrParams {
        SabrParams::with_scaled_alpha(100.0, 0.9, 0.16, 0.1, -0.6, 1.0).unwrap()
    }

    #[test]
    fn sabr_coefficients() {
        let p = sec51();
        let m = sabr_logvol_model(p);
        let mut b = [0.0; 2];
        m.drift(&[100.0, 0.0], 0.1, &mut b);
        assert!((b[1] + 0.005).abs() < 1e-15);
        assert_eq!(b[0], 0.0);
        let mut s = [0.0; 4];
        m.diffusion(&[100.0, 0.0], 0.37, &mut s);
        assert!((s[0] - p.alpha0.sqrt() * 100f64.powf(0.9)).abs() < 1e-12);
        assert_eq!(s[1], 0.0);
        m.diffusion(&[100.0, 0.0], 0.0, &mut s);
        assert_eq!(&s[2..], &[0.0, 0.0]);
        m.drift(&[100.0, 0.0], 0.0, &mut b);
        assert_eq!(b[1], 0.0);
    }

    #[test]
    fn sabr_params_validation() {
        assert!(SabrParams::new(100.0, 0.9, 0.16, 0.1, 1.5, 1.0).is_err());
        assert!(SabrParams::new(100.0, 0.0, 0.16, 0.1, 0.0, 1.0).is_err());
        assert!(SabrParams::new(100.0, 1.2, 0.16, 0.1, 0.0, 1.0).is_err());
        assert!(SabrParams::new(-1.0, 0.9, 0.16, 0.1, 0.0, 1.0).is_err());
        assert!(SabrParams::new(100.0, 0.9, 0.16, -0.1, 0.0, 1.0).is_err());
        assert!(SabrParams::new(100.0, 0.9, 0.16, 0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn scaled_base_volatility() {
        let p = SabrParams::new(100.0, 1.0, 0.16, 0.1, -0.6, 1.0).unwrap();
        assert_eq!(scaled_base_model(&p).vol, 0.4);
        let p = sec51();
        let expected = (0.16 * 100f64.powf(0.2)).sqrt() * 100f64.powf(-0.1);
        assert!((scaled_base_model(&p).vol - expected).abs() < 1e-14);
        // the alpha scaling cancels the power of s0
        assert!((expected - 0.4).abs() < 1e-14);
        let m = scaled_base_model(&p);
        let mut b = [1.0];
        for x in [0.5, 1.0, 3.0] {
            m.drift(&[x], 0.0, &mut b);
            assert_eq!(b[0], 0.0);
        }
        assert_eq!(m.initial_state(), vec![1.0]);
    }

    fn fd_correction(model: &dyn SdeModel, x: f64, eps: f64) -> f64 {
        let h = 1e-6 * x.abs().max(1.0);
        let mut s = [0.0];
        model.diffusion(&[x], eps, &mut s);
        let sig = s[0];
        model.diffusion(&[x + h], eps, &mut s);
        let up = s[0];
        model.diffusion(&[x - h], eps, &mut s);
        let down = s[0];
        sig * (up - down) / (2.0 * h)
    }

    #[test]
    fn milstein_corrections_match_finite_differences() {
        let models: Vec<Box<dyn SdeModel>> = vec![
            Box::new(Gbm::new(0.4, 1.0)),
            Box::new(PerturbedGbm::new(0.4, 1.0)),
            Box::new(Cev::new(0.4 * 10f64.powf(0.1), 0.9, 100.0)),
            Box::new(Cev::new(0.3, 0.6, 1.0)),
        ];
        let mut state = 0x1234_5678u64;
        for m in &models {
            for _ in 0..200 {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let x = 0.1 + 150.0 * ((state >> 11) as f64 / (1u64 << 53) as f64);
                let eps = 0.2 * ((state >> 20) as f64 / (1u64 << 44) as f64);
                let mut c = [0.0];
                m.milstein_correction(&[x], eps, &mut c);
                let fd = fd_correction(m.as_ref(), x, eps);
                assert!((c[0] - fd).abs() <= 1e-6 * fd.abs().max(1e-12), "{} x={x}", m.label());
            }
        }
    }

    #[test]
    fn cev_absorbs() {
        let m = Cev::new(0.4, 0.7, 1.0);
        let mut s = [-0.2];
        m.absorb(&mut s);
        assert_eq!(s[0], 0.0);
        let mut sig = [1.0];
        m.diffusion(&s, 0.0, &mut sig);
        assert_eq!(sig[0], 0.0);
    }

    #[test]
    fn exact_gbm_edge_cases() {
        let lat = sample_lattice(1, 0, 8, 1, 1.0).unwrap();
        let p = gbm_exact_path(&lat, 0.0, 2.5).unwrap();
        assert!(p.values().iter().all(|&v| v == 2.5));
        let zero = IncrementLattice::from_increments(1, 1.0, vec![0.0; 4]).unwrap();
        let p = gbm_exact_path(&zero, 0.4, 1.0).unwrap();
        for (i, &v) in p.values().iter().enumerate() {
            let t = i as f64 / 4.0;
            assert!((v - (-0.08 * t).exp()).abs() < 1e-15);
        }
        let two = sample_lattice(1, 0, 8, 2, 1.0).unwrap();
        assert!(gbm_exact_path(&two, 0.4, 1.0).is_err());
    }

    #[test]
    fn call_price_limits() {
        assert_eq!(gbm_call_price(100.0, 0.0, 0.4, 1.0), 100.0);
        assert!((gbm_call_price(110.0, 100.0, 1e-9, 1.0) - 10.0).abs() < 1e-9);
        // at the money: s0 (2 Phi(sd/2) - 1)
        let atm = gbm_call_price(100.0, 100.0, 0.4, 1.0);
        assert!((atm - 100.0 * (2.0 * normal::cdf(0.2) - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn digital_price_limits() {
        assert_eq!(gbm_digital_price(100.0, 0.0, 0.4, 1.0), 1.0);
        let p = gbm_digital_price(100.0, 100.0, 0.05, 1.0);
        assert!((p - normal::cdf(-0.025)).abs() < 1e-15);
        assert!(p < 0.5);
    }

    #[test]
    fn quadrature_agrees_with_closed_forms() {
        let call = payoffs::custom("call", |x| (x - 100.0f64).max(0.0), payoffs::Regularity::Lipschitz, Some(1.0), None);
        let q = lognormal_expectation(&call, 100.0, 0.4, 1.0);
        assert!((q - gbm_call_price(100.0, 100.0, 0.4, 1.0)).abs() < 1e-5);
        let t = payoffs::tanh_payoff(0.0, 1.0).unwrap();
        // degenerate law: E[f(S_T)] -> f(s0)
        let q = lognormal_expectation(&t, 1.0, 1e-8, 1.0);
        assert!((q - 1f64.tanh()).abs() < 1e-9);
    }
}
