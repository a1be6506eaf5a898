//! Strong and weak error estimators, log-log rate fitting, the L2 error
//! ratio and the empirical optimal control weight.

use crate::error::{Error, Result};
use crate::path::SchemePath;

/// How two paths are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorMode {
    /// Difference of terminal values.
    #[default]
    Terminal,
    /// Maximum difference over the approximation's own grid points, compared
    /// with the reference at the same times.
    SupOnGrid,
}

/// Which state components enter the distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Component {
    #[default]
    First,
    /// Euclidean norm over all components.
    Full,
}

fn state_distance(a: &[f64], b: &[f64], component: Component) -> f64 {
    match component {
        Component::First => (a[0] - b[0]).abs(),
        Component::Full => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
    }
}

/// Distance between a reference path and an approximation whose grid is
/// contained in the reference grid.
pub fn path_distance(
    reference: &SchemePath,
    approx: &SchemePath,
    mode: ErrorMode,
    component: Component,
) -> Result<f64> {
    if component == Component::Full && reference.state_dim() != approx.state_dim() {
        return Err(Error::Shape(format!(
            "reference dimension {} differs from approximation dimension {}",
            reference.state_dim(),
            approx.state_dim()
        )));
    }
    let n = approx.n_steps();
    let stride = reference.stride_to(n, approx.total_time())?;
    Ok(match mode {
        ErrorMode::Terminal => state_distance(reference.terminal(), approx.terminal(), component),
        ErrorMode::SupOnGrid => (0..=n)
            .map(|i| state_distance(reference.value(i * stride), approx.value(i), component))
            .fold(0.0, f64::max),
    })
}

/// Streaming estimator of `E[|D|^p]^{1/p}` from samples of `|D|`.
///
/// Accumulation is a sum, so partial accumulators over disjoint sample
/// blocks can be merged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpAccumulator {
    p: f64,
    count: u64,
    sum: f64,
    sum_sq: f64,
}

impl LpAccumulator {
    pub fn new(p: f64) -> Result<Self> {
        if !(p >= 1.0 && p.is_finite()) {
            return Err(Error::Domain(format!("norm exponent must be >= 1, got {p}")));
        }
        Ok(Self {
            p,
            count: 0,
            sum: 0.0,
            sum_sq: 0.0,
        })
    }

    pub fn push(&mut self, distance: f64) {
        let m = distance.abs().powf(self.p);
        self.count += 1;
        self.sum += m;
        self.sum_sq += m * m;
    }

    pub fn merge(&mut self, other: &Self) {
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Mean of `|D|^p` and its standard error.
    pub fn moment(&self) -> Result<(f64, f64)> {
        if self.count == 0 {
            return Err(Error::Empty("no samples for the strong error".into()));
        }
        let n = self.count as f64;
        let mean = self.sum / n;
        let var = if self.count > 1 {
            ((self.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        Ok((mean, (var / n).sqrt()))
    }

    /// `(E[|D|^p]^{1/p}, std error)`, the latter by the delta method.
    pub fn estimate(&self) -> Result<(f64, f64)> {
        let (m, se) = self.moment()?;
        if m == 0.0 {
            return Ok((0.0, 0.0));
        }
        let err = m.powf(1.0 / self.p);
        Ok((err, err / (self.p * m) * se))
    }
}

/// Monte Carlo estimate of `E[|reference - approx|^p]^{1/p}` over sample
/// pairs, with its standard error.
pub fn strong_error(
    pairs: &[(SchemePath, SchemePath)],
    p: f64,
    mode: ErrorMode,
    component: Component,
) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Empty("strong error needs at least one pair".into()));
    }
    let mut acc = LpAccumulator::new(p)?;
    for (reference, approx) in pairs {
        acc.push(path_distance(reference, approx, mode, component)?);
    }
    acc.estimate()
}

/// Terminal-value version of [`strong_error`] for scalar samples.
pub fn strong_error_scalar(pairs: &[(f64, f64)], p: f64) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Empty("strong error needs at least one pair".into()));
    }
    let mut acc = LpAccumulator::new(p)?;
    for (r, a) in pairs {
        acc.push(r - a);
    }
    acc.estimate()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub n: usize,
    pub estimator_label: String,
    pub error: f64,
    pub std_error: f64,
    pub samples: u64,
    pub wall_time_ms: u64,
}

/// Error estimates per grid size, kept sorted by `(estimator_label, n)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorTable {
    rows: Vec<ErrorRow>,
}

impl ErrorTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: ErrorRow) -> Result<()> {
        if !(row.error >= 0.0 && row.std_error >= 0.0) {
            return Err(Error::Domain(format!(
                "error {} and std error {} must be non-negative",
                row.error, row.std_error
            )));
        }
        let pos = self
            .rows
            .partition_point(|r| (&r.estimator_label, r.n) <= (&row.estimator_label, row.n));
        self.rows.insert(pos, row);
        Ok(())
    }

    pub fn rows(&self) -> &[ErrorRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows of one estimator.
    pub fn filter(&self, label: &str) -> ErrorTable {
        ErrorTable {
            rows: self
                .rows
                .iter()
                .filter(|r| r.estimator_label == label)
                .cloned()
                .collect(),
        }
    }

    pub fn get(&self, n: usize) -> Option<&ErrorRow> {
        self.rows.iter().find(|r| r.n == n)
    }
}

impl FromIterator<ErrorRow> for ErrorTable {
    fn from_iter<I: IntoIterator<Item = ErrorRow>>(iter: I) -> Self {
        let mut t = ErrorTable::new();
        for row in iter {
            t.push(row).expect("valid error row");
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioRow {
    pub n: usize,
    pub percent: f64,
    pub std_error: f64,
}

/// `100 * candidate / reference` per grid size.
///
/// The standard error treats the two estimates as independent, which
/// overstates it for positively correlated paired runs.
pub fn error_ratio(reference: &ErrorTable, candidate: &ErrorTable) -> Result<Vec<RatioRow>> {
    candidate
        .rows()
        .iter()
        .map(|c| {
            let r = reference
                .get(c.n)
                .ok_or_else(|| Error::Shape(format!("reference table has no row for n = {}", c.n)))?;
            if r.error == 0.0 {
                return Err(Error::Degenerate(format!("reference error is zero at n = {}", c.n)));
            }
            let ratio = c.error / r.error;
            let rel_c = if c.error > 0.0 { c.std_error / c.error } else { 0.0 };
            let rel_r = r.std_error / r.error;
            Ok(RatioRow {
                n: c.n,
                percent: 100.0 * ratio,
                std_error: 100.0 * ratio * (rel_c * rel_c + rel_r * rel_r).sqrt(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = slope x + intercept`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} abscissae vs {} ordinates", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Domain(format!("need at least 3 points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LineFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Least-squares fit of `log2(error)` against `log2(n)`.
pub fn fit_rate(table: &ErrorTable) -> Result<LineFit> {
    let mut ns: Vec<usize> = table.rows().iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 3 || ns.len() != table.len() {
        return Err(Error::Domain(format!(
            "rate fit needs at least 3 rows with distinct n, got {} rows / {} distinct",
            table.len(),
            ns.len()
        )));
    }
    if table.rows().iter().any(|r| r.error <= 0.0) {
        return Err(Error::Degenerate("cannot take log of a zero error".into()));
    }
    let x: Vec<f64> = table.rows().iter().map(|r| (r.n as f64).log2()).collect();
    let y: Vec<f64> = table.rows().iter().map(|r| r.error.log2()).collect();
    fit_line(&x, &y)
}

/// Accelerated mean `mean(a - b) + known_constant` from paired samples, with
/// its paired standard error.
pub fn weak_error(samples_a: &[f64], samples_b: &[f64], known_constant: f64) -> Result<(f64, f64)> {
    if samples_a.len() != samples_b.len() {
        return Err(Error::Shape(format!(
            "{} vs {} paired samples",
            samples_a.len(),
            samples_b.len()
        )));
    }
    if samples_a.is_empty() {
        return Err(Error::Empty("no paired samples".into()));
    }
    let n = samples_a.len() as f64;
    let diffs: Vec<f64> = samples_a.iter().zip(samples_b).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = if diffs.len() > 1 {
        diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok((mean + known_constant, (var / n).sqrt()))
}

/// One pilot observation for the optimal weight: the fine-reference proxy of
/// `F^eps`, its discretization `F_bar^eps`, the accurate base `F^0` and its
/// discretization `F_bar^0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoSample {
    pub f_eps_ref: f64,
    pub f_eps_bar: f64,
    pub f0: f64,
    pub f0_bar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoEstimate {
    /// Estimate clamped to `[0, 2]`.
    pub value: f64,
    pub unclamped: f64,
    pub clamped: bool,
}

/// Empirical minimizer of `E[(F^eps - F_bar^eps + rho (F_bar^0 - F^0))^2]`:
/// `E[(F^eps - F_bar^eps)(F^0 - F_bar^0)] / E[(F_bar^0 - F^0)^2]`.
pub fn rho_l2(samples: &[RhoSample]) -> Result<RhoEstimate> {
    if samples.is_empty() {
        return Err(Error::Empty("no pilot samples for rho".into()));
    }
    let (num, den) = samples.iter().fold((0.0, 0.0), |(num, den), s| {
        let a = s.f_eps_ref - s.f_eps_bar;
        let b = s.f0 - s.f0_bar;
        (num + a * b, den + b * b)
    });
    if den == 0.0 {
        return Err(Error::Degenerate(
            "base discretization error vanishes on every pilot sample".into(),
        ));
    }
    let unclamped = num / den;
    let value = unclamped.clamp(0.0, 2.0);
    Ok(RhoEstimate {
        value,
        unclamped,
        clamped: value != unclamped,
    })
}

/// `F_bar^eps - rho (F_bar^0 - F^0)` for one sample.
pub fn weighted_estimate(sample: &RhoSample, rho: f64) -> f64 {
    sample.f_eps_bar - rho * (sample.f0_bar - sample.f0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(label: &str, n: usize, error: f64) -> ErrorRow {
        ErrorRow {
            n,
            estimator_label: label.into(),
            error,
            std_error: 0.01 * error,
            samples: 100,
            wall_time_ms: 0,
        }
    }

    #[test]
    fn strong_error_hand_values() {
        assert_eq!(strong_error_scalar(&[(0.0, 1.0), (0.0, -1.0)], 2.0).unwrap().0, 1.0);
        assert_eq!(strong_error_scalar(&[(3.0, 3.0), (1.0, 1.0)], 2.0).unwrap(), (0.0, 0.0));
        assert!(matches!(strong_error_scalar(&[], 2.0), Err(Error::Empty(_))));
        // p = 4: (mean of d^4)^(1/4) for d = 1, 2
        let e = strong_error_scalar(&[(0.0, 1.0), (0.0, 2.0)], 4.0).unwrap().0;
        assert!((e - 8.5f64.powf(0.25)).abs() < 1e-15);
    }

    #[test]
    fn strong_error_paths_and_modes() {
        let reference = SchemePath::new("r", 0.0, 1.0, 1, vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let approx = SchemePath::new("a", 0.0, 1.0, 1, vec![0.0, 3.0, 4.5]).unwrap();
        let pairs = vec![(reference.clone(), approx.clone())];
        let term = strong_error(&pairs, 2.0, ErrorMode::Terminal, Component::First).unwrap();
        let sup = strong_error(&pairs, 2.0, ErrorMode::SupOnGrid, Component::First).unwrap();
        assert!((term.0 - 0.5).abs() < 1e-15);
        assert!((sup.0 - 1.0).abs() < 1e-15);
        let bad = SchemePath::new("a", 0.0, 1.0, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(strong_error(&[(reference, bad)], 2.0, ErrorMode::Terminal, Component::First).is_err());
    }

    #[test]
    fn full_component_norm() {
        let r = SchemePath::new("r", 0.0, 1.0, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let a = SchemePath::new("a", 0.0, 1.0, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        assert_eq!(path_distance(&r, &a, ErrorMode::Terminal, Component::Full).unwrap(), 5.0);
        assert_eq!(path_distance(&r, &a, ErrorMode::Terminal, Component::First).unwrap(), 3.0);
    }

    #[test]
    fn accumulator_merge_matches_sequential() {
        let data: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut all = LpAccumulator::new(2.0).unwrap();
        data.iter().for_each(|&d| all.push(d));
        let mut a = LpAccumulator::new(2.0).unwrap();
        let mut b = LpAccumulator::new(2.0).unwrap();
        data[..40].iter().for_each(|&d| a.push(d));
        data[40..].iter().for_each(|&d| b.push(d));
        a.merge(&b);
        let (e1, s1) = all.estimate().unwrap();
        let (e2, s2) = a.estimate().unwrap();
        assert!((e1 - e2).abs() < 1e-14 && (s1 - s2).abs() < 1e-14);
        assert!(LpAccumulator::new(0.5).is_err());
    }

    #[test]
    fn table_sorted_and_validated() {
        let mut t = ErrorTable::new();
        t.push(row("b", 16, 1.0)).unwrap();
        t.push(row("a", 32, 1.0)).unwrap();
        t.push(row("a", 8, 1.0)).unwrap();
        let keys: Vec<_> = t.rows().iter().map(|r| (r.estimator_label.clone(), r.n)).collect();
        assert_eq!(keys, vec![("a".into(), 8), ("a".into(), 32), ("b".into(), 16)]);
        assert!(t.push(row("a", 4, -1.0)).is_err());
    }

    #[test]
    fn ratio_edge_cases() {
        let std: ErrorTable = [8, 16, 32].iter().map(|&n| row("em", n, 1.0 / n as f64)).collect();
        let same = error_ratio(&std, &std).unwrap();
        assert!(same.iter().all(|r| r.percent == 100.0));
        let zero: ErrorTable = [8, 16, 32]
            .iter()
            .map(|&n| ErrorRow { error: 0.0, std_error: 0.0, ..row("ref", n, 1.0) })
            .collect();
        assert!(error_ratio(&std, &zero).unwrap().iter().all(|r| r.percent == 0.0));
        assert!(matches!(error_ratio(&zero, &std), Err(Error::Degenerate(_))));
        let other: ErrorTable = [64].iter().map(|&n| row("x", n, 1.0)).collect();
        assert!(error_ratio(&std, &other).is_err());
    }

    #[test]
    fn fit_recovers_planted_slopes() {
        let half: ErrorTable = [8, 16, 32, 64].iter().map(|&n| row("a", n, (n as f64).powf(-0.5))).collect();
        let f = fit_rate(&half).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12 && (f.r_squared - 1.0).abs() < 1e-12);
        let one: ErrorTable = [8, 16, 32].iter().map(|&n| row("a", n, 3.0 / n as f64)).collect();
        let f = fit_rate(&one).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12);
        assert!((f.intercept - 3f64.log2()).abs() < 1e-12);
        let short: ErrorTable = [8, 16].iter().map(|&n| row("a", n, 1.0)).collect();
        assert!(fit_rate(&short).is_err());
    }

    #[test]
    fn weak_error_cases() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(weak_error(&a, &a, 2.5).unwrap(), (2.5, 0.0));
        let b = [0.0, 1.0, 2.0];
        assert_eq!(weak_error(&a, &b, 0.0).unwrap(), (1.0, 0.0));
        assert!(matches!(weak_error(&a, &b[..2], 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn rho_cases() {
        let perfect: Vec<RhoSample> = (0..50)
            .map(|i| {
                let e = (i as f64 * 0.7).cos();
                RhoSample { f_eps_ref: 1.0 + e, f_eps_bar: 1.0, f0: 2.0 + e, f0_bar: 2.0 }
            })
            .collect();
        let r = rho_l2(&perfect).unwrap();
        assert!((r.value - 1.0).abs() < 1e-14 && !r.clamped);
        let degenerate = vec![RhoSample { f_eps_ref: 1.0, f_eps_bar: 0.5, f0: 2.0, f0_bar: 2.0 }];
        assert!(matches!(rho_l2(&degenerate), Err(Error::Degenerate(_))));
        let big = vec![RhoSample { f_eps_ref: 5.0, f_eps_bar: 0.0, f0: 1.0, f0_bar: 0.0 }];
        let r = rho_l2(&big).unwrap();
        assert_eq!((r.value, r.unclamped, r.clamped), (2.0, 5.0, true));
    }
}
