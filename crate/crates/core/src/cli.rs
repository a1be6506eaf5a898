//! Experiment configuration, the experiment runner and CSV emission.
//!
//! A configuration is a TOML document. Every table and key is checked
//! against an allowlist and all violations are reported together, each
//! anchored to the line it comes from when that line can be located.
//!
//! Every CSV file starts with one `#` manifest line followed by the header
//!
//! ```text
//! experiment,label,n_or_level,value,std_error,samples,seed,wall_time_ms
//! ```
//!
//! Rows are sorted by `(label, n_or_level)`. For a fixed configuration and
//! seed the body is byte-identical across runs and thread counts;
//! `wall_time_ms` is zero unless `record_timing = true`.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::brownian::{sample_lattice, IncrementLattice, IncrementSource};
use crate::error::{Error, Result};
use crate::errorlab::{error_ratio, path_distance, Component, ErrorMode, ErrorRow, ErrorTable, LpAccumulator};
use crate::mlmc::{level_diagnostics, run_mlmc, AllocationRule, Estimator, LevelSpec, MlmcProblem, MlmcSettings};
use crate::models::{gbm_exact_path, lognormal_expectation, sabr_logvol_model, PerturbedGbm, SabrParams, SdeModel};
use crate::path::SchemePath;
use crate::payoffs::{self, localize, Payoff};
use crate::schemes::{euler_maruyama, run_with_base, sabr_hybrid_check, sabr_hybrid_tilde, Scheme};

pub const CSV_HEADER: &str = "experiment,label,n_or_level,value,std_error,samples,seed,wall_time_ms";

/// Share of excluded (exploded) paths above which a run counts as failed.
pub const EXCLUSION_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    PathDemo,
    StrongError,
    NuSweep,
    BetaSweep,
    MlmcDiagnostics,
    MlmcPrice,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::PathDemo,
        ExperimentKind::StrongError,
        ExperimentKind::NuSweep,
        ExperimentKind::BetaSweep,
        ExperimentKind::MlmcDiagnostics,
        ExperimentKind::MlmcPrice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::PathDemo => "path_demo",
            ExperimentKind::StrongError => "strong_error",
            ExperimentKind::NuSweep => "nu_sweep",
            ExperimentKind::BetaSweep => "beta_sweep",
            ExperimentKind::MlmcDiagnostics => "mlmc_diagnostics",
            ExperimentKind::MlmcPrice => "mlmc_price",
        }
    }

    fn is_mlmc(self) -> bool {
        matches!(self, ExperimentKind::MlmcDiagnostics | ExperimentKind::MlmcPrice)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown experiment `{s}`")))
    }
}

/// The simulated model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelConfig {
    Sabr(SabrParams),
    /// `dX = (base_vol + eps) X dB`, exactly solvable for every `eps`.
    PerturbedGbm {
        base_vol: f64,
        x0: f64,
        eps: f64,
        horizon: f64,
    },
}

impl ModelConfig {
    pub fn horizon(&self) -> f64 {
        match self {
            ModelConfig::Sabr(p) => p.horizon,
            ModelConfig::PerturbedGbm { horizon, .. } => *horizon,
        }
    }

    pub fn eps(&self) -> f64 {
        match self {
            ModelConfig::Sabr(p) => p.nu,
            ModelConfig::PerturbedGbm { eps, .. } => *eps,
        }
    }

    fn spot(&self) -> f64 {
        match self {
            ModelConfig::Sabr(p) => p.s0,
            ModelConfig::PerturbedGbm { x0, .. } => *x0,
        }
    }

    fn factors(&self) -> usize {
        match self {
            ModelConfig::Sabr(_) => 2,
            ModelConfig::PerturbedGbm { .. } => 1,
        }
    }

    /// `E[f(X^0_T)]` when the base law is log-normal.
    fn base_expectation(&self, payoff: &Payoff) -> Option<f64> {
        match self {
            ModelConfig::Sabr(p) => p.base_expectation(payoff).ok(),
            ModelConfig::PerturbedGbm {
                base_vol, x0, horizon, ..
            } => Some(lognormal_expectation(payoff, *x0, *base_vol, *horizon)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PayoffConfig {
    Call { strike: f64 },
    Digital { strike: f64 },
    SmoothedDigital { strike: f64, h: f64 },
    Tanh { center: f64, scale: f64 },
    Sine,
}

impl PayoffConfig {
    pub fn build(&self) -> Result<Payoff> {
        match *self {
            PayoffConfig::Call { strike } => Ok(payoffs::european_call(strike)),
            PayoffConfig::Digital { strike } => Ok(payoffs::digital(strike)),
            PayoffConfig::SmoothedDigital { strike, h } => payoffs::smoothed_digital(strike, h),
            PayoffConfig::Tanh { center, scale } => payoffs::tanh_payoff(center, scale),
            PayoffConfig::Sine => Ok(payoffs::sine()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmcConfig {
    pub target_rmse: f64,
    pub pilot_size: u64,
    pub rule: AllocationRule,
    pub estimators: Vec<Estimator>,
    /// `E[f(X^0_T)]`, required when the base law has no closed form.
    pub base_expectation: Option<f64>,
    /// `E[f_s(X^0_T)]` for the localized estimator.
    pub smooth_expectation: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedSource {
    Config,
    Default,
    Override,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub model: ModelConfig,
    pub scheme: Scheme,
    /// Scheme grid sizes, strictly increasing, each dividing `n_ref`.
    pub grids: Vec<usize>,
    pub n_ref: usize,
    pub levels: LevelSpec,
    pub samples: u64,
    pub p: f64,
    pub payoff: PayoffConfig,
    /// Ramp half-width of the smooth part used by the localized estimator.
    pub localization: Option<f64>,
    pub seed: u64,
    pub seed_source: SeedSource,
    pub output: Option<PathBuf>,
    pub record_timing: bool,
    pub nu_values: Vec<f64>,
    pub beta_values: Vec<f64>,
    pub mlmc: MlmcConfig,
}

fn desk_sabr(kind: ExperimentKind) -> SabrParams {
    if kind.is_mlmc() {
        SabrParams::new(100.0, 1.0, 0.16, 0.1, -0.6, 1.0).expect("valid defaults")
    } else {
        SabrParams::with_scaled_alpha(100.0, 0.9, 0.16, 0.1, -0.6, 1.0).expect("valid defaults")
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults for `kind`.
    pub fn defaults(kind: ExperimentKind) -> Self {
        let samples = match kind {
            ExperimentKind::PathDemo => 1,
            ExperimentKind::MlmcDiagnostics => 100_000,
            _ => 10_000,
        };
        let max_level = if kind == ExperimentKind::MlmcPrice { 5 } else { 4 };
        Self {
            experiment: kind,
            model: ModelConfig::Sabr(desk_sabr(kind)),
            scheme: Scheme::EulerMaruyama,
            grids: vec![8, 16, 32, 64, 128, 256],
            n_ref: 1 << 14,
            levels: LevelSpec::new(4, max_level, 1.0).expect("valid defaults"),
            samples,
            p: 2.0,
            payoff: PayoffConfig::Call { strike: 100.0 },
            localization: None,
            seed: 0,
            seed_source: SeedSource::Default,
            output: None,
            record_timing: false,
            nu_values: vec![0.1, 0.3, 0.5, 0.7],
            beta_values: vec![0.999, 0.99, 0.95, 0.9],
            mlmc: MlmcConfig {
                target_rmse: 0.1,
                pilot_size: 1000,
                rule: AllocationRule::CostOptimal,
                estimators: vec![Estimator::Standard, Estimator::Accelerated],
                base_expectation: None,
                smooth_expectation: None,
            },
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.seed_source = SeedSource::Override;
        self
    }

    pub fn with_samples(mut self, samples: u64) -> Result<Self> {
        if samples == 0 {
            return Err(Error::Config(vec!["samples must be at least 1, got 0".into()]));
        }
        self.samples = samples;
        Ok(self)
    }

    /// SHA-256 of the canonical form of the validated configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(format!("{self:?}").as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Parses and validates a configuration that names its experiment.
pub fn validate_config(raw: &str) -> Result<ExperimentConfig> {
    parse_config(raw, None)
}

/// As [`validate_config`]; `kind` is used when the document has no
/// `experiment` key and must match it when it does.
pub fn parse_config(raw: &str, kind: Option<ExperimentKind>) -> Result<ExperimentConfig> {
    let table: Table = raw.parse().map_err(|e: toml::de::Error| {
        let msg = e.message().to_string();
        let line = e.span().map(|s| raw[..s.start].lines().count().max(1));
        Error::Config(vec![match line {
            Some(l) => format!("line {l}: {msg}"),
            None => msg,
        }])
    })?;
    let mut r = Reader { raw, errors: Vec::new() };
    let config = r.config(&table, kind);
    match config {
        Some(c) if r.errors.is_empty() => Ok(c),
        _ => Err(Error::Config(r.errors)),
    }
}

const TOP_KEYS: &[&str] = &[
    "experiment", "seed", "samples", "p", "scheme", "output", "record_timing", "model", "grid", "levels", "payoff",
    "localization", "sweep", "mlmc",
];
const MODEL_KEYS: &[&str] = &[
    "kind", "s0", "beta", "alpha0", "base_variance", "nu", "rho", "horizon", "base_vol", "x0", "eps",
];
const GRID_KEYS: &[&str] = &["n", "n_ref"];
const LEVEL_KEYS: &[&str] = &["base", "max_level"];
const PAYOFF_KEYS: &[&str] = &["kind", "strike", "h", "center", "scale"];
const LOCALIZATION_KEYS: &[&str] = &["h"];
const SWEEP_KEYS: &[&str] = &["nu", "beta"];
const MLMC_KEYS: &[&str] = &[
    "target_rmse", "pilot_size", "rule", "estimators", "base_expectation", "smooth_expectation",
];

struct Reader<'a> {
    raw: &'a str,
    errors: Vec<String>,
}

impl Reader<'_> {
    /// 1-based line of `key` inside `[section]`, or of the section header.
    fn line_of(&self, section: Option<&str>, key: &str) -> Option<usize> {
        let mut current: Option<String> = None;
        for (i, line) in self.raw.lines().enumerate() {
            let t = line.trim();
            if let Some(name) = t.strip_prefix('[').and_then(|t| t.split(']').next()) {
                current = Some(name.trim().to_string());
                if key.is_empty() && section == Some(name.trim()) {
                    return Some(i + 1);
                }
                continue;
            }
            if current.as_deref() == section {
                if let Some(rest) = t.strip_prefix(key) {
                    if rest.trim_start().starts_with('=') {
                        return Some(i + 1);
                    }
                }
            }
        }
        None
    }

    fn error(&mut self, section: Option<&str>, key: &str, msg: impl fmt::Display) {
        let name = match section {
            Some(s) if key.is_empty() => format!("[{s}]"),
            Some(s) => format!("{s}.{key}"),
            None => key.to_string(),
        };
        let text = match self.line_of(section, key) {
            Some(l) => format!("line {l}: {name}: {msg}"),
            None => format!("{name}: {msg}"),
        };
        self.errors.push(text);
    }

    fn unknown_keys(&mut self, table: &Table, section: Option<&str>, allowed: &[&str]) {
        for key in table.keys() {
            if !allowed.contains(&key.as_str()) {
                self.error(section, key, "unknown key");
            }
        }
    }

    fn section<'t>(&mut self, table: &'t Table, name: &str, allowed: &[&str]) -> Option<&'t Table> {
        match table.get(name) {
            None => None,
            Some(Value::Table(t)) => {
                self.unknown_keys(t, Some(name), allowed);
                Some(t)
            }
            Some(_) => {
                self.error(None, name, "expected a table");
                None
            }
        }
    }

    fn f64(&mut self, table: Option<&Table>, section: Option<&str>, key: &str) -> Option<f64> {
        match table?.get(key)? {
            Value::Float(x) => Some(*x),
            Value::Integer(i) => Some(*i as f64),
            _ => {
                self.error(section, key, "expected a number");
                None
            }
        }
    }

    fn u64(&mut self, table: Option<&Table>, section: Option<&str>, key: &str) -> Option<u64> {
        match table?.get(key)? {
            Value::Integer(i) if *i >= 0 => Some(*i as u64),
            Value::Integer(i) => {
                self.error(section, key, format!("must be non-negative, got {i}"));
                None
            }
            _ => {
                self.error(section, key, "expected an integer");
                None
            }
        }
    }

    fn str<'t>(&mut self, table: Option<&'t Table>, section: Option<&str>, key: &str) -> Option<&'t str> {
        match table?.get(key)? {
            Value::String(s) => Some(s),
            _ => {
                self.error(section, key, "expected a string");
                None
            }
        }
    }

    fn bool(&mut self, table: Option<&Table>, section: Option<&str>, key: &str) -> Option<bool> {
        match table?.get(key)? {
            Value::Boolean(b) => Some(*b),
            _ => {
                self.error(section, key, "expected true or false");
                None
            }
        }
    }

    fn list<T>(
        &mut self,
        table: Option<&Table>,
        section: Option<&str>,
        key: &str,
        item: impl Fn(&Value) -> Option<T>,
    ) -> Option<Vec<T>> {
        match table?.get(key)? {
            Value::Array(items) => {
                let parsed: Option<Vec<T>> = items.iter().map(item).collect();
                if parsed.is_none() {
                    self.error(section, key, "list has entries of the wrong type");
                }
                parsed
            }
            _ => {
                self.error(section, key, "expected a list");
                None
            }
        }
    }

    fn config(&mut self, top: &Table, kind: Option<ExperimentKind>) -> Option<ExperimentConfig> {
        self.unknown_keys(top, None, TOP_KEYS);
        let top_ref = Some(top);
        let named = self.str(top_ref, None, "experiment").and_then(|s| match s.parse::<ExperimentKind>() {
            Ok(k) => Some(k),
            Err(e) => {
                self.error(None, "experiment", e);
                None
            }
        });
        let kind = match (named, kind) {
            (Some(a), Some(b)) if a != b => {
                self.error(None, "experiment", format!("config is for `{a}`, but `{b}` was requested"));
                b
            }
            (Some(a), _) => a,
            (None, Some(b)) => b,
            (None, None) => {
                if !top.contains_key("experiment") {
                    self.errors.push("experiment: missing; one of path_demo, strong_error, nu_sweep, beta_sweep, mlmc_diagnostics, mlmc_price".into());
                }
                return None;
            }
        };
        let mut c = ExperimentConfig::defaults(kind);

        if let Some(seed) = self.u64(top_ref, None, "seed") {
            c.seed = seed;
            c.seed_source = SeedSource::Config;
        }
        if let Some(m) = self.u64(top_ref, None, "samples") {
            if m == 0 {
                self.error(None, "samples", "must be at least 1, got 0");
            }
            c.samples = m;
        }
        if let Some(p) = self.f64(top_ref, None, "p") {
            if !(p >= 1.0 && p.is_finite()) {
                self.error(None, "p", format!("norm exponent must be >= 1, got {p}"));
            }
            c.p = p;
        }
        if let Some(s) = self.str(top_ref, None, "scheme") {
            match s {
                "euler_maruyama" | "em" => c.scheme = Scheme::EulerMaruyama,
                "milstein" => c.scheme = Scheme::Milstein,
                other => self.error(None, "scheme", format!("unknown scheme `{other}`; use euler_maruyama or milstein")),
            }
        }
        if let Some(out) = self.str(top_ref, None, "output") {
            c.output = Some(PathBuf::from(out));
        }
        if let Some(b) = self.bool(top_ref, None, "record_timing") {
            c.record_timing = b;
        }

        self.model(top, &mut c);
        self.grid(top, &mut c);
        self.payoff(top, &mut c);
        self.sweep(top, &mut c);
        self.mlmc(top, &mut c);

        if c.scheme == Scheme::Milstein && c.model.factors() != 1 {
            self.error(None, "scheme", "milstein needs a single-factor model; SABR is run with euler_maruyama");
        }
        if matches!(kind, ExperimentKind::NuSweep | ExperimentKind::BetaSweep)
            && !matches!(c.model, ModelConfig::Sabr(_))
        {
            self.error(Some("model"), "kind", format!("{kind} needs the sabr model"));
        }
        Some(c)
    }

    fn model(&mut self, top: &Table, c: &mut ExperimentConfig) {
        const S: Option<&str> = Some("model");
        let t = self.section(top, "model", MODEL_KEYS);
        let kind = self.str(t, S, "kind").unwrap_or("sabr");
        match kind {
            "sabr" => {
                for key in ["base_vol", "x0", "eps"] {
                    if t.is_some_and(|t| t.contains_key(key)) {
                        self.error(S, key, "not a sabr parameter");
                    }
                }
                let d = desk_sabr(c.experiment);
                let s0 = self.f64(t, S, "s0").unwrap_or(d.s0);
                let beta = self.f64(t, S, "beta").unwrap_or(d.beta);
                let nu = self.f64(t, S, "nu").unwrap_or(d.nu);
                let rho = self.f64(t, S, "rho").unwrap_or(d.rho);
                let horizon = self.f64(t, S, "horizon").unwrap_or(d.horizon);
                let alpha0 = self.f64(t, S, "alpha0");
                let base_variance = self.f64(t, S, "base_variance");
                let params = match (alpha0, base_variance) {
                    (Some(_), Some(_)) => {
                        self.error(S, "base_variance", "give alpha0 or base_variance, not both");
                        return;
                    }
                    (Some(a), None) => SabrParams::new(s0, beta, a, nu, rho, horizon),
                    (None, Some(v)) => SabrParams::with_scaled_alpha(s0, beta, v, nu, rho, horizon),
                    (None, None) if c.experiment.is_mlmc() => SabrParams::new(s0, beta, 0.16, nu, rho, horizon),
                    (None, None) => SabrParams::with_scaled_alpha(s0, beta, 0.16, nu, rho, horizon),
                };
                match params {
                    Ok(p) => c.model = ModelConfig::Sabr(p),
                    Err(e) => self.range_errors(S, e),
                }
            }
            "perturbed_gbm" => {
                for key in ["s0", "beta", "alpha0", "base_variance", "nu", "rho"] {
                    if t.is_some_and(|t| t.contains_key(key)) {
                        self.error(S, key, "not a perturbed_gbm parameter");
                    }
                }
                let base_vol = self.f64(t, S, "base_vol").unwrap_or(0.4);
                let x0 = self.f64(t, S, "x0").unwrap_or(100.0);
                let eps = self.f64(t, S, "eps").unwrap_or(0.05);
                let horizon = self.f64(t, S, "horizon").unwrap_or(1.0);
                if !(base_vol >= 0.0 && base_vol.is_finite()) {
                    self.error(S, "base_vol", format!("must be >= 0, got {base_vol}"));
                }
                if !(x0 > 0.0 && x0.is_finite()) {
                    self.error(S, "x0", format!("must be positive, got {x0}"));
                }
                if !(eps >= 0.0 && eps.is_finite()) {
                    self.error(S, "eps", format!("must be >= 0, got {eps}"));
                }
                if !(horizon > 0.0 && horizon.is_finite()) {
                    self.error(S, "horizon", format!("must be positive, got {horizon}"));
                }
                c.model = ModelConfig::PerturbedGbm {
                    base_vol,
                    x0,
                    eps,
                    horizon,
                };
                c.payoff = PayoffConfig::Call { strike: x0 };
            }
            other => self.error(S, "kind", format!("unknown model `{other}`; use sabr or perturbed_gbm")),
        }
    }

    /// Splits an aggregated parameter error into per-key messages.
    fn range_errors(&mut self, section: Option<&str>, e: Error) {
        let lines: Vec<String> = match e {
            Error::Config(lines) => lines,
            Error::Domain(msg) => msg.split("; ").map(str::to_string).collect(),
            other => vec![other.to_string()],
        };
        for msg in lines {
            let key = MODEL_KEYS
                .iter()
                .find(|k| msg.starts_with(&format!("{k} ")) || msg.starts_with(&format!("{k}:")))
                .copied()
                .unwrap_or("");
            self.error(section, key, msg.trim_start_matches(key).trim_start_matches(':').trim());
        }
    }

    fn grid(&mut self, top: &Table, c: &mut ExperimentConfig) {
        const G: Option<&str> = Some("grid");
        const L: Option<&str> = Some("levels");
        let g = self.section(top, "grid", GRID_KEYS);
        let as_usize = |v: &Value| v.as_integer().filter(|i| *i >= 1).map(|i| i as usize);
        if let Some(grids) = self.list(g, G, "n", as_usize) {
            if grids.is_empty() {
                self.error(G, "n", "needs at least one grid size");
            }
            if grids.windows(2).any(|w| w[0] >= w[1]) {
                self.error(G, "n", "grid sizes must be strictly increasing");
            }
            c.grids = grids;
        }
        if let Some(n_ref) = self.u64(g, G, "n_ref") {
            if n_ref == 0 {
                self.error(G, "n_ref", "must be at least 1");
            }
            c.n_ref = n_ref as usize;
        }
        if c.n_ref > 0 {
            for &n in &c.grids {
                if c.n_ref % n != 0 {
                    self.error(G, "n", format!("grid size {n} does not divide n_ref = {}", c.n_ref));
                }
            }
        }
        let l = self.section(top, "levels", LEVEL_KEYS);
        let base = self.u64(l, L, "base").map_or(c.levels.base(), |b| b as usize);
        let max_level = self.u64(l, L, "max_level").map_or(c.levels.max_level(), |m| m as usize);
        match LevelSpec::new(base, max_level, c.model.horizon()) {
            Ok(spec) => {
                c.levels = spec;
                let explicit_grid = g.is_some_and(|g| g.contains_key("n_ref"));
                if l.is_some() && explicit_grid && c.n_ref > 0 {
                    let finest = spec.grid_size(max_level).unwrap_or(usize::MAX);
                    if c.n_ref % finest != 0 {
                        self.error(
                            L,
                            "base",
                            format!(
                                "finest level {base}^{max_level} = {finest} does not divide n_ref = {}",
                                c.n_ref
                            ),
                        );
                    }
                }
            }
            Err(e) => self.error(L, "base", e),
        }
    }

    fn payoff(&mut self, top: &Table, c: &mut ExperimentConfig) {
        const P: Option<&str> = Some("payoff");
        let t = self.section(top, "payoff", PAYOFF_KEYS);
        let spot = c.model.spot();
        if let Some(t) = t {
            let kind = self.str(Some(t), P, "kind").unwrap_or("call");
            let strike = self.f64(Some(t), P, "strike").unwrap_or(spot);
            let payoff = match kind {
                "call" => PayoffConfig::Call { strike },
                "digital" => PayoffConfig::Digital { strike },
                "smoothed_digital" => PayoffConfig::SmoothedDigital {
                    strike,
                    h: self.f64(Some(t), P, "h").unwrap_or(1.0),
                },
                "tanh" => PayoffConfig::Tanh {
                    center: self.f64(Some(t), P, "center").unwrap_or(spot),
                    scale: self.f64(Some(t), P, "scale").unwrap_or(1.0),
                },
                "sine" => PayoffConfig::Sine,
                other => {
                    self.error(P, "kind", format!("unknown payoff `{other}`"));
                    return;
                }
            };
            if let Err(e) = payoff.build() {
                self.error(P, "kind", e);
            }
            c.payoff = payoff;
        }
        let loc = self.section(top, "localization", LOCALIZATION_KEYS);
        let is_digital = matches!(c.payoff, PayoffConfig::Digital { .. });
        match self.f64(loc, Some("localization"), "h") {
            Some(h) if !(h > 0.0 && h.is_finite()) => {
                self.error(Some("localization"), "h", format!("must be positive, got {h}"))
            }
            Some(_) if !is_digital => self.error(Some("localization"), "h", "localization needs a digital payoff"),
            Some(h) => c.localization = Some(h),
            None if is_digital && c.experiment.is_mlmc() => c.localization = Some(1.0),
            None => {}
        }
    }

    fn sweep(&mut self, top: &Table, c: &mut ExperimentConfig) {
        const W: Option<&str> = Some("sweep");
        let t = self.section(top, "sweep", SWEEP_KEYS);
        if let Some(nu) = self.list(t, W, "nu", Value::as_float) {
            if nu.is_empty() || nu.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                self.error(W, "nu", "needs at least one value, each >= 0");
            }
            c.nu_values = nu;
        }
        if let Some(beta) = self.list(t, W, "beta", Value::as_float) {
            if beta.is_empty() || beta.iter().any(|b| !(0.0..=1.0).contains(b)) {
                self.error(W, "beta", "needs at least one value, each in [0, 1]");
            }
            c.beta_values = beta;
        }
    }

    fn mlmc(&mut self, top: &Table, c: &mut ExperimentConfig) {
        const M: Option<&str> = Some("mlmc");
        let t = self.section(top, "mlmc", MLMC_KEYS);
        if let Some(g) = self.f64(t, M, "target_rmse") {
            if !(g > 0.0 && g.is_finite()) {
                self.error(M, "target_rmse", format!("must be positive, got {g}"));
            }
            c.mlmc.target_rmse = g;
        }
        if let Some(p) = self.u64(t, M, "pilot_size") {
            if p < 100 {
                self.error(M, "pilot_size", format!("must be at least 100, got {p}"));
            }
            c.mlmc.pilot_size = p;
        }
        if let Some(rule) = self.str(t, M, "rule") {
            match rule {
                "balanced" => c.mlmc.rule = AllocationRule::Balanced,
                "cost_optimal" => c.mlmc.rule = AllocationRule::CostOptimal,
                other => self.error(M, "rule", format!("unknown rule `{other}`; use balanced or cost_optimal")),
            }
        }
        let names = self.list(t, M, "estimators", |v| v.as_str().map(str::to_string));
        if let Some(names) = names {
            let mut estimators = Vec::new();
            for name in names {
                match [Estimator::Standard, Estimator::Accelerated, Estimator::Localized]
                    .into_iter()
                    .find(|e| e.label() == name || (name == "localized" && *e == Estimator::Localized))
                {
                    Some(e) if !estimators.contains(&e) => estimators.push(e),
                    Some(_) => self.error(M, "estimators", format!("`{name}` listed twice")),
                    None => self.error(M, "estimators", format!("unknown estimator `{name}`")),
                }
            }
            if estimators.is_empty() {
                self.error(M, "estimators", "needs at least one estimator");
            }
            c.mlmc.estimators = estimators;
        }
        c.mlmc.base_expectation = self.f64(t, M, "base_expectation");
        c.mlmc.smooth_expectation = self.f64(t, M, "smooth_expectation");
        if !c.experiment.is_mlmc() {
            return;
        }
        if c.localization.is_some() && !c.mlmc.estimators.contains(&Estimator::Localized) && names_absent(t) {
            c.mlmc.estimators.push(Estimator::Localized);
        }
        let payoff = c.payoff.build().ok();
        let wants_base = c.experiment == ExperimentKind::MlmcDiagnostics
            || c.mlmc.estimators.contains(&Estimator::Accelerated);
        if wants_base && c.mlmc.base_expectation.is_none() {
            if payoff.as_ref().and_then(|f| c.model.base_expectation(f)).is_none() {
                self.error(M, "base_expectation", "required: the base model has no closed-form expectation");
            }
        }
        if c.mlmc.estimators.contains(&Estimator::Localized) {
            if c.localization.is_none() {
                self.error(M, "estimators", "accelerated_loc needs a digital payoff with [localization]");
            } else if c.mlmc.smooth_expectation.is_none() {
                let smooth = match c.payoff {
                    PayoffConfig::Digital { strike } => payoffs::smoothed_digital(strike, c.localization.unwrap_or(1.0)).ok(),
                    _ => None,
                };
                if smooth.and_then(|f| c.model.base_expectation(&f)).is_none() {
                    self.error(M, "smooth_expectation", "required: the base model has no closed-form expectation");
                }
            }
        }
    }
}

fn names_absent(t: Option<&Table>) -> bool {
    !t.is_some_and(|t| t.contains_key("estimators"))
}

/// One output row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub label: String,
    pub n_or_level: usize,
    pub value: f64,
    pub std_error: f64,
    pub samples: u64,
    pub wall_time_ms: u64,
}

/// One output file.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub name: String,
    pub rows: Vec<CsvRow>,
}

impl CsvTable {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, label: impl Into<String>, n: usize, value: f64, std_error: f64, samples: u64, wall: u64) {
        self.rows.push(CsvRow {
            label: label.into(),
            n_or_level: n,
            value,
            std_error,
            samples,
            wall_time_ms: wall,
        });
    }

    /// Header line plus sorted rows.
    pub fn body(&self, experiment: ExperimentKind, seed: u64) -> String {
        let mut rows: Vec<&CsvRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| (&a.label, a.n_or_level).cmp(&(&b.label, b.n_or_level)));
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in rows {
            let _ = writeln!(
                out,
                "{experiment},{},{},{},{},{},{seed},{}",
                r.label, r.n_or_level, r.value, r.std_error, r.samples, r.wall_time_ms
            );
        }
        out
    }
}

/// Outcome of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub tables: Vec<CsvTable>,
    pub files: Vec<PathBuf>,
    /// Paths requested over all sweep points.
    pub configured_paths: u64,
    /// Paths dropped because a scheme produced a non-finite state.
    pub excluded_paths: u64,
}

impl RunSummary {
    pub fn exclusion_rate(&self) -> f64 {
        if self.configured_paths == 0 {
            0.0
        } else {
            self.excluded_paths as f64 / self.configured_paths as f64
        }
    }

    pub fn exceeds_exclusion_threshold(&self) -> bool {
        self.exclusion_rate() > EXCLUSION_THRESHOLD
    }
}

fn manifest(config: &ExperimentConfig, summary_excluded: u64, configured: u64) -> String {
    let source = match config.seed_source {
        SeedSource::Config => "config",
        SeedSource::Default => "default",
        SeedSource::Override => "flag",
    };
    format!(
        "# {} {} experiment={} config_sha256={} seed={} seed_source={} samples={} effective={} excluded={}\n",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        config.experiment,
        config.hash(),
        config.seed,
        source,
        configured,
        configured - summary_excluded,
        summary_excluded
    )
}

/// Runs the configured experiment and writes one CSV per table into
/// `out_dir` (created if missing).
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    let mut summary = compute_experiment(config)?;
    fs::create_dir_all(out_dir)?;
    let head = manifest(config, summary.excluded_paths, summary.configured_paths);
    for table in &summary.tables {
        let path = out_dir.join(format!("{}.csv", table.name));
        fs::write(&path, format!("{head}{}", table.body(config.experiment, config.seed)))?;
        summary.files.push(path);
    }
    Ok(summary)
}

/// Runs the configured experiment without touching the file system.
pub fn compute_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    let start = Instant::now();
    let (mut tables, configured, excluded) = match config.experiment {
        ExperimentKind::PathDemo => (vec![path_demo(config)?], 1, 0),
        ExperimentKind::StrongError => strong_error_tables(config)?,
        ExperimentKind::NuSweep | ExperimentKind::BetaSweep => sweep_table(config)?,
        ExperimentKind::MlmcDiagnostics => (vec![mlmc_diagnostics(config)?], config.samples, 0),
        ExperimentKind::MlmcPrice => (vec![mlmc_price(config)?], 0, 0),
    };
    if config.record_timing {
        let ms = start.elapsed().as_millis() as u64;
        tables.iter_mut().flat_map(|t| t.rows.iter_mut()).for_each(|r| r.wall_time_ms = ms);
    }
    Ok(RunSummary {
        tables,
        files: Vec::new(),
        configured_paths: configured,
        excluded_paths: excluded,
    })
}

/// Estimators compared in a strong-error study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrongEstimator {
    /// The plain scheme at `eps`.
    Standard,
    /// The accelerated scheme; for SABR the hybrid with a CEV Milstein base.
    Accelerated,
    /// SABR only: the hybrid with the scaled log-normal base.
    Check,
}

impl StrongEstimator {
    pub fn label(self) -> &'static str {
        match self {
            StrongEstimator::Standard => "standard",
            StrongEstimator::Accelerated => "accelerated",
            StrongEstimator::Check => "accelerated_check",
        }
    }
}

/// Terminal and sup-on-grid strong errors of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct StrongStudy {
    pub terminal: ErrorTable,
    pub sup: ErrorTable,
    pub samples: u64,
    pub excluded: u64,
}

/// Strong errors of each estimator at each grid size against a reference
/// on the `n_ref` lattice. Path `j` uses `sample_lattice(seed, j, n_ref, ..)`.
/// Paths on which any scheme explodes are excluded and counted.
#[allow(clippy::too_many_arguments)]
pub fn strong_error_study(
    model: &ModelConfig,
    scheme: Scheme,
    estimators: &[StrongEstimator],
    grids: &[usize],
    n_ref: usize,
    samples: u64,
    p: f64,
    seed: u64,
) -> Result<StrongStudy> {
    if estimators.contains(&StrongEstimator::Check) && !matches!(model, ModelConfig::Sabr(_)) {
        return Err(Error::Domain("the check estimator is defined for SABR only".into()));
    }
    if let Some(n) = grids.iter().find(|n| **n == 0 || n_ref % **n != 0) {
        return Err(Error::GridMismatch(format!("grid size {n} does not divide n_ref = {n_ref}")));
    }
    let width = estimators.len() * grids.len();
    let fresh = LpAccumulator::new(p)?;
    let blocks: Vec<Result<(Vec<LpAccumulator>, Vec<LpAccumulator>, u64)>> = (0..samples.div_ceil(1024))
        .into_par_iter()
        .map(|b| {
            let mut term = vec![fresh; width];
            let mut sup = vec![fresh; width];
            let mut excluded = 0;
            for j in b * 1024..((b + 1) * 1024).min(samples) {
                match strong_path(model, scheme, estimators, grids, n_ref, seed, j) {
                    Ok(d) => {
                        for (i, (t, s)) in d.into_iter().enumerate() {
                            term[i].push(t);
                            sup[i].push(s);
                        }
                    }
                    Err(Error::Explosion { .. }) => excluded += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok((term, sup, excluded))
        })
        .collect();
    let mut term = vec![fresh; width];
    let mut sup = vec![fresh; width];
    let mut excluded = 0;
    for block in blocks {
        let (t, s, x) = block?;
        term.iter_mut().zip(&t).for_each(|(a, b)| a.merge(b));
        sup.iter_mut().zip(&s).for_each(|(a, b)| a.merge(b));
        excluded += x;
    }
    let effective = samples - excluded;
    if effective == 0 {
        return Err(Error::Empty("every path exploded".into()));
    }
    let table = |accs: &[LpAccumulator]| -> Result<ErrorTable> {
        let mut t = ErrorTable::new();
        for (e, est) in estimators.iter().enumerate() {
            for (g, &n) in grids.iter().enumerate() {
                let (error, std_error) = accs[e * grids.len() + g].estimate()?;
                t.push(ErrorRow {
                    n,
                    estimator_label: est.label().into(),
                    error,
                    std_error,
                    samples: effective,
                    wall_time_ms: 0,
                })?;
            }
        }
        Ok(t)
    };
    Ok(StrongStudy {
        terminal: table(&term)?,
        sup: table(&sup)?,
        samples: effective,
        excluded,
    })
}

/// `(terminal, sup)` distances for every (estimator, grid) pair of path `j`.
fn strong_path(
    model: &ModelConfig,
    scheme: Scheme,
    estimators: &[StrongEstimator],
    grids: &[usize],
    n_ref: usize,
    seed: u64,
    j: u64,
) -> Result<Vec<(f64, f64)>> {
    let lattice = sample_lattice(seed, j, n_ref, model.factors(), model.horizon())?;
    let paths = study_paths(model, scheme, estimators, grids, &lattice)?;
    let reference = &paths.reference;
    paths
        .approximations
        .iter()
        .map(|a| {
            Ok((
                path_distance(reference, a, ErrorMode::Terminal, Component::First)?,
                path_distance(reference, a, ErrorMode::SupOnGrid, Component::First)?,
            ))
        })
        .collect()
}

struct StudyPaths {
    reference: SchemePath,
    /// Estimator-major, then grid.
    approximations: Vec<SchemePath>,
}

fn study_paths(
    model: &ModelConfig,
    scheme: Scheme,
    estimators: &[StrongEstimator],
    grids: &[usize],
    lattice: &IncrementLattice,
) -> Result<StudyPaths> {
    let n_ref = lattice.n_steps();
    let mut approximations = Vec::with_capacity(estimators.len() * grids.len());
    match model {
        ModelConfig::Sabr(params) => {
            let m = sabr_logvol_model(*params);
            let x0 = m.initial_state();
            let reference = euler_maruyama(&m, params.nu, lattice, &x0)?;
            for est in estimators {
                for &n in grids {
                    approximations.push(match est {
                        StrongEstimator::Standard => {
                            euler_maruyama(&m, params.nu, &lattice.coarsen(n_ref / n)?, &x0)?
                        }
                        StrongEstimator::Accelerated => sabr_hybrid_tilde(params, lattice, n)?,
                        StrongEstimator::Check => sabr_hybrid_check(params, lattice, n)?,
                    });
                }
            }
            Ok(StudyPaths {
                reference,
                approximations,
            })
        }
        ModelConfig::PerturbedGbm {
            base_vol, x0, eps, ..
        } => {
            let m = PerturbedGbm::new(*base_vol, *x0);
            let reference = gbm_exact_path(lattice, m.vol(*eps), *x0)?;
            let base = gbm_exact_path(lattice, *base_vol, *x0)?;
            for est in estimators {
                for &n in grids {
                    let coarse = lattice.coarsen(n_ref / n)?;
                    let with_base = (*est == StrongEstimator::Accelerated).then_some(&base);
                    approximations.push(run_with_base(scheme, &m, *eps, &coarse, &[*x0], with_base)?);
                }
            }
            Ok(StudyPaths {
                reference,
                approximations,
            })
        }
    }
}

fn table_rows(out: &mut CsvTable, table: &ErrorTable) {
    for r in table.rows() {
        out.push(r.estimator_label.clone(), r.n, r.error, r.std_error, r.samples, r.wall_time_ms);
    }
}

fn path_demo(config: &ExperimentConfig) -> Result<CsvTable> {
    let model = &config.model;
    let lattice = sample_lattice(config.seed, 0, config.n_ref, model.factors(), model.horizon())?;
    let estimators = demo_estimators(model);
    let paths = study_paths(model, config.scheme, &estimators, &config.grids, &lattice)?;
    let mut table = CsvTable::new("path_demo");
    let finest = *config.grids.last().expect("validated grid list");
    let reference = paths.reference.restrict(finest)?;
    for i in 0..=finest {
        table.push(format!("reference(n={finest})"), i, reference.value(i)[0], 0.0, 1, 0);
    }
    for (k, path) in paths.approximations.iter().enumerate() {
        let est = estimators[k / config.grids.len()];
        let n = config.grids[k % config.grids.len()];
        for i in 0..=n {
            table.push(format!("{}(n={n})", est.label()), i, path.value(i)[0], 0.0, 1, 0);
        }
    }
    Ok(table)
}

fn demo_estimators(model: &ModelConfig) -> Vec<StrongEstimator> {
    match model {
        ModelConfig::Sabr(_) => vec![StrongEstimator::Standard, StrongEstimator::Accelerated, StrongEstimator::Check],
        ModelConfig::PerturbedGbm { .. } => vec![StrongEstimator::Standard, StrongEstimator::Accelerated],
    }
}

type Tables = (Vec<CsvTable>, u64, u64);

fn strong_error_tables(config: &ExperimentConfig) -> Result<Tables> {
    let study = strong_error_study(
        &config.model,
        config.scheme,
        &[StrongEstimator::Standard, StrongEstimator::Accelerated],
        &config.grids,
        config.n_ref,
        config.samples,
        config.p,
        config.seed,
    )?;
    let mut terminal = CsvTable::new("strong_error");
    table_rows(&mut terminal, &study.terminal);
    let mut sup = CsvTable::new("strong_error_sup");
    table_rows(&mut sup, &study.sup);
    Ok((vec![terminal, sup], config.samples, study.excluded))
}

fn sweep_table(config: &ExperimentConfig) -> Result<Tables> {
    let ModelConfig::Sabr(base) = config.model else {
        return Err(Error::Config(vec![format!("{} needs the sabr model", config.experiment)]));
    };
    let (name, points, estimators): (&str, Vec<(String, SabrParams)>, Vec<StrongEstimator>) = match config.experiment {
        ExperimentKind::NuSweep => (
            "nu",
            config
                .nu_values
                .iter()
                .map(|&nu| Ok((format!("nu={nu}"), SabrParams { nu, ..base })))
                .collect::<Result<_>>()?,
            vec![StrongEstimator::Standard, StrongEstimator::Accelerated],
        ),
        _ => {
            let base_variance = base.alpha0 * base.s0.powf(-2.0 * (1.0 - base.beta));
            (
                "beta",
                config
                    .beta_values
                    .iter()
                    .map(|&beta| {
                        let p = SabrParams::with_scaled_alpha(base.s0, beta, base_variance, base.nu, base.rho, base.horizon)?;
                        Ok((format!("beta={beta}"), p))
                    })
                    .collect::<Result<_>>()?,
                vec![StrongEstimator::Standard, StrongEstimator::Accelerated, StrongEstimator::Check],
            )
        }
    };
    let mut table = CsvTable::new(format!("{name}_sweep"));
    let mut excluded = 0;
    for (tag, params) in &points {
        let study = strong_error_study(
            &ModelConfig::Sabr(*params),
            Scheme::EulerMaruyama,
            &estimators,
            &config.grids,
            config.n_ref,
            config.samples,
            config.p,
            config.seed,
        )?;
        excluded += study.excluded;
        let standard = study.terminal.filter(StrongEstimator::Standard.label());
        for est in &estimators {
            let rows = study.terminal.filter(est.label());
            for r in rows.rows() {
                table.push(format!("{}({tag})", est.label()), r.n, r.error, r.std_error, r.samples, 0);
            }
            if *est != StrongEstimator::Standard {
                for r in error_ratio(&standard, &rows)? {
                    table.push(format!("{}_ratio({tag})", est.label()), r.n, r.percent, r.std_error, study.samples, 0);
                }
            }
        }
    }
    Ok((vec![table], config.samples * points.len() as u64, excluded))
}

/// Payoff, and the localized split when configured.
struct MlmcInputs {
    payoff: Payoff,
    base_expectation: Option<f64>,
    localized: Option<(payoffs::LocalizedPayoff, f64)>,
}

fn mlmc_inputs(config: &ExperimentConfig) -> Result<MlmcInputs> {
    let payoff = config.payoff.build()?;
    let base_expectation = config
        .mlmc
        .base_expectation
        .or_else(|| config.model.base_expectation(&payoff));
    let localized = match (config.localization, config.payoff) {
        (Some(h), PayoffConfig::Digital { strike }) => {
            let smooth = payoffs::smoothed_digital(strike, h)?;
            let c = config
                .mlmc
                .smooth_expectation
                .or_else(|| config.model.base_expectation(&smooth))
                .ok_or_else(|| Error::Config(vec!["mlmc.smooth_expectation: required".into()]))?;
            Some((localize(payoff.clone(), smooth), c))
        }
        _ => None,
    };
    Ok(MlmcInputs {
        payoff,
        base_expectation,
        localized,
    })
}

fn with_model<T>(
    config: &ExperimentConfig,
    run: impl FnOnce(&dyn SdeModel, f64) -> Result<T>,
) -> Result<T> {
    match config.model {
        ModelConfig::Sabr(p) => run(&sabr_logvol_model(p), p.nu),
        ModelConfig::PerturbedGbm { base_vol, x0, eps, .. } => run(&PerturbedGbm::new(base_vol, x0), eps),
    }
}

fn build_problem<'a>(
    model: &'a dyn SdeModel,
    eps: f64,
    scheme: Scheme,
    inputs: &MlmcInputs,
) -> MlmcProblem<'a, dyn SdeModel + 'a> {
    let mut problem = MlmcProblem::new(model, eps, inputs.payoff.clone()).with_scheme(scheme);
    if let Some(c) = inputs.base_expectation {
        problem = problem.with_base_expectation(c);
    }
    if let Some((loc, c)) = &inputs.localized {
        problem = problem.with_localization(loc, *c);
    }
    problem
}

fn mlmc_diagnostics(config: &ExperimentConfig) -> Result<CsvTable> {
    let inputs = mlmc_inputs(config)?;
    let spec = LevelSpec::new(config.levels.base(), config.levels.max_level(), config.model.horizon())?;
    let rows = with_model(config, |model, eps| {
        level_diagnostics(&build_problem(model, eps, config.scheme, &inputs), &spec, config.samples, config.seed)
    })?;
    let mut table = CsvTable::new("mlmc_diagnostics");
    for r in rows {
        let label = r.estimator.label();
        let m = r.samples as f64;
        table.push(format!("{label}_mean"), r.level, r.mean, r.std_error, r.samples, 0);
        // normal-theory standard error of a sample standard deviation
        let sd_se = r.std_dev / (2.0 * (m - 1.0)).sqrt();
        table.push(format!("{label}_std"), r.level, r.std_dev, sd_se, r.samples, 0);
    }
    Ok(table)
}

fn mlmc_price(config: &ExperimentConfig) -> Result<CsvTable> {
    let inputs = mlmc_inputs(config)?;
    let spec = LevelSpec::new(config.levels.base(), config.levels.max_level(), config.model.horizon())?;
    let mut table = CsvTable::new("mlmc_price");
    let max_level = spec.max_level();
    for &estimator in &config.mlmc.estimators {
        let settings = MlmcSettings {
            target_rmse: config.mlmc.target_rmse,
            estimator,
            // one seed for every estimator so their levels share draws
            seed: config.seed,
            pilot_size: config.mlmc.pilot_size,
            rule: config.mlmc.rule,
        };
        let report = with_model(config, |model, eps| {
            run_mlmc(&build_problem(model, eps, config.scheme, &inputs), &spec, &settings)
        })?;
        let label = estimator.label();
        for l in &report.levels {
            let se = (l.var_delta / l.samples as f64).sqrt();
            table.push(format!("{label}_level_mean"), l.level, l.mean_delta, se, l.samples, 0);
            table.push(format!("{label}_level_variance"), l.level, l.var_delta, 0.0, l.samples, 0);
            table.push(format!("{label}_level_cost"), l.level, l.cost, 0.0, l.samples, 0);
        }
        let total: u64 = report.levels.iter().map(|l| l.samples).sum();
        table.push(format!("{label}_total"), max_level, report.total_estimate, report.total_std_error, total, 0);
        table.push(format!("{label}_total_cost"), max_level, report.total_cost, 0.0, total, 0);
    }
    Ok(table)
}
