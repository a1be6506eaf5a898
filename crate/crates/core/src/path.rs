use crate::error::{Error, Result};

/// A discretized path on the equidistant grid `t_i = i T / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemePath {
    grid_times: Vec<f64>,
    values: Vec<f64>,
    state_dim: usize,
    label: String,
    eps: f64,
}

impl SchemePath {
    /// `values` holds `n_steps + 1` states of `state_dim` entries each.
    pub fn new(
        label: impl Into<String>,
        eps: f64,
        total_time: f64,
        state_dim: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if state_dim == 0 || values.len() < 2 * state_dim || values.len() % state_dim != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form a path of dimension {state_dim}",
                values.len()
            )));
        }
        let n = values.len() / state_dim - 1;
        let grid_times = (0..=n)
            .map(|i| i as f64 * total_time / n as f64)
            .collect();
        Ok(Self {
            grid_times,
            values,
            state_dim,
            label: label.into(),
            eps,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn n_steps(&self) -> usize {
        self.grid_times.len() - 1
    }

    pub fn total_time(&self) -> f64 {
        *self.grid_times.last().expect("non-empty grid")
    }

    pub fn grid_times(&self) -> &[f64] {
        &self.grid_times
    }

    /// State at grid point `i`.
    #[inline]
    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn initial(&self) -> &[f64] {
        self.value(0)
    }

    pub fn terminal(&self) -> &[f64] {
        self.value(self.n_steps())
    }

    /// Flat `(n + 1) x state_dim` value array.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// One state component along the whole grid.
    pub fn component(&self, c: usize) -> Vec<f64> {
        self.values
            .iter()
            .skip(c)
            .step_by(self.state_dim)
            .copied()
            .collect()
    }

    /// Stride between this path's grid and a coarser grid with `n` steps on
    /// the same horizon.
    pub fn stride_to(&self, n: usize, total_time: f64) -> Result<usize> {
        let own = self.n_steps();
        let rel = (self.total_time() - total_time).abs() / total_time.abs().max(f64::MIN_POSITIVE);
        if n == 0 || own % n != 0 || rel > 1e-12 {
            return Err(Error::GridMismatch(format!(
                "path `{}` with {own} steps on [0, {}] does not contain a {n}-step grid on [0, {total_time}]",
                self.label,
                self.total_time()
            )));
        }
        Ok(own / n)
    }

    /// Restriction of this path to the coarser `n`-step grid.
    pub fn restrict(&self, n: usize) -> Result<SchemePath> {
        let stride = self.stride_to(n, self.total_time())?;
        let values = (0..=n)
            .flat_map(|i| self.value(i * stride).iter().copied())
            .collect();
        SchemePath::new(self.label.clone(), self.eps, self.total_time(), self.state_dim, values)
    }

    /// Keeps a single component.
    pub fn project(&self, c: usize) -> Result<SchemePath> {
        if c >= self.state_dim {
            return Err(Error::Shape(format!(
                "component {c} out of range for dimension {}",
                self.state_dim
            )));
        }
        SchemePath::new(self.label.clone(), self.eps, self.total_time(), 1, self.component(c))
    }
}
