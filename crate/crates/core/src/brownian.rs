//! Brownian increment lattices.
//!
//! Every lattice is a pure function of `(seed, path_index, n_steps,
//! n_factors, total_time)`. Entry `(step, factor)` is the inverse normal CDF
//! of the `step * n_factors + factor`-th 64-bit word of a ChaCha8 stream keyed
//! by `seed` and selected by `path_index`, scaled by `sqrt(dt)`. Any path can
//! therefore be regenerated in isolation and paths can be produced by any
//! number of workers without shared state.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::normal;

/// Read access to a grid of Brownian increments.
///
/// The schemes are generic over this trait so that a lattice, a single-factor
/// view of a lattice, or an instrumented wrapper can drive them.
pub trait IncrementSource {
    fn n_steps(&self) -> usize;
    fn n_factors(&self) -> usize;
    fn total_time(&self) -> f64;
    /// Increments `B_{t_{i+1}} - B_{t_i}` of every factor for step `i`.
    fn increment(&self, step: usize) -> &[f64];

    fn dt(&self) -> f64 {
        self.total_time() / self.n_steps() as f64
    }
}

/// A seeded `n_steps x n_factors` grid of Brownian increments on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementLattice {
    seed: u64,
    path_index: u64,
    n_steps: usize,
    n_factors: usize,
    total_time: f64,
    increments: Vec<f64>,
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent child seed from `seed` and a tag (level number,
/// sweep index, ...).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix64(mix64(seed) ^ mix64(tag.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

fn chacha_for(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = seed;
    for chunk in key.chunks_exact_mut(8) {
        state = mix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(path_index);
    rng
}

/// Pairwise sum of factor `f` over steps `lo..hi` of a step-major block.
pub(crate) fn block_sum(block: &[f64], d: usize, f: usize, lo: usize, hi: usize) -> f64 {
    match hi - lo {
        1 => block[lo * d + f],
        len => {
            let mid = lo + len / 2;
            block_sum(block, d, f, lo, mid) + block_sum(block, d, f, mid, hi)
        }
    }
}

/// Maps a 64-bit word to the open interval (0, 1) using its top 53 bits.
#[inline]
fn open_unit(word: u64) -> f64 {
    ((word >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Draws the lattice for `(seed, path_index)`.
pub fn sample_lattice(
    seed: u64,
    path_index: u64,
    n_steps: usize,
    n_factors: usize,
    total_time: f64,
) -> Result<IncrementLattice> {
    if n_steps == 0 {
        return Err(Error::Domain("lattice needs at least one step".into()));
    }
    if n_factors == 0 {
        return Err(Error::Domain("lattice needs at least one factor".into()));
    }
    if !(total_time > 0.0 && total_time.is_finite()) {
        return Err(Error::Domain(format!(
            "total time must be positive and finite, got {total_time}"
        )));
    }
    let scale = (total_time / n_steps as f64).sqrt();
    let mut rng = chacha_for(seed, path_index);
    let increments = (0..n_steps * n_factors)
        .map(|_| scale * normal::inverse_cdf(open_unit(rng.next_u64())))
        .collect();
    Ok(IncrementLattice {
        seed,
        path_index,
        n_steps,
        n_factors,
        total_time,
        increments,
    })
}

impl IncrementLattice {
    /// Builds a lattice from explicit increments laid out step-major.
    pub fn from_increments(
        n_factors: usize,
        total_time: f64,
        increments: Vec<f64>,
    ) -> Result<Self> {
        if n_factors == 0 || increments.is_empty() || increments.len() % n_factors != 0 {
            return Err(Error::Shape(format!(
                "{} increments cannot form a lattice with {n_factors} factors",
                increments.len()
            )));
        }
        if !(total_time > 0.0 && total_time.is_finite()) {
            return Err(Error::Domain(format!(
                "total time must be positive and finite, got {total_time}"
            )));
        }
        Ok(Self {
            seed: 0,
            path_index: 0,
            n_steps: increments.len() / n_factors,
            n_factors,
            total_time,
            increments,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    /// All increments, step-major.
    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Increments of one factor, in time order.
    pub fn column(&self, factor: usize) -> Vec<f64> {
        self.increments
            .iter()
            .skip(factor)
            .step_by(self.n_factors)
            .copied()
            .collect()
    }

    /// Single-factor view of this lattice.
    pub fn factor(&self, factor: usize) -> Result<FactorView<'_, Self>> {
        FactorView::new(self, factor)
    }

    /// Sums each block of `k` consecutive steps, giving the increments of the
    /// same Brownian path on a grid `k` times coarser.
    ///
    /// Blocks are summed pairwise, so for power-of-two factors repeated
    /// coarsening reproduces a single coarsening bit for bit.
    pub fn coarsen(&self, k: usize) -> Result<Self> {
        if k == 0 || self.n_steps % k != 0 {
            return Err(Error::Domain(format!(
                "coarsening factor {k} does not divide {} steps",
                self.n_steps
            )));
        }
        let d = self.n_factors;
        let coarse_steps = self.n_steps / k;
        let mut increments = Vec::with_capacity(coarse_steps * d);
        for block in self.increments.chunks_exact(k * d) {
            increments.extend((0..d).map(|f| block_sum(block, d, f, 0, k)));
        }
        Ok(Self {
            seed: self.seed,
            path_index: self.path_index,
            n_steps: coarse_steps,
            n_factors: d,
            total_time: self.total_time,
            increments,
        })
    }

    /// Replaces the second factor by `rho * dB1 + sqrt(1 - rho^2) * dB2`.
    pub fn mix_correlated(&self, rho: f64) -> Result<Self> {
        if self.n_factors != 2 {
            return Err(Error::Shape(format!(
                "correlation mixing needs 2 factors, lattice has {}",
                self.n_factors
            )));
        }
        if !(-1.0..=1.0).contains(&rho) {
            return Err(Error::Domain(format!("correlation {rho} outside [-1, 1]")));
        }
        let orth = (1.0 - rho * rho).sqrt();
        let mut out = self.clone();
        for row in out.increments.chunks_exact_mut(2) {
            row[1] = rho * row[0] + orth * row[1];
        }
        Ok(out)
    }
}

impl IncrementSource for IncrementLattice {
    fn n_steps(&self) -> usize {
        self.n_steps
    }

    fn n_factors(&self) -> usize {
        self.n_factors
    }

    fn total_time(&self) -> f64 {
        self.total_time
    }

    #[inline]
    fn increment(&self, step: usize) -> &[f64] {
        let d = self.n_factors;
        &self.increments[step * d..(step + 1) * d]
    }
}

/// One factor of a multi-factor source, seen as a single-factor source.
#[derive(Debug, Clone, Copy)]
pub struct FactorView<'a, S: ?Sized> {
    source: &'a S,
    factor: usize,
}

impl<'a, S: IncrementSource + ?Sized> FactorView<'a, S> {
    pub fn new(source: &'a S, factor: usize) -> Result<Self> {
        if factor >= source.n_factors() {
            return Err(Error::Shape(format!(
                "factor {factor} out of range for {} factors",
                source.n_factors()
            )));
        }
        Ok(Self { source, factor })
    }
}

impl<S: IncrementSource + ?Sized> IncrementSource for FactorView<'_, S> {
    fn n_steps(&self) -> usize {
        self.source.n_steps()
    }

    fn n_factors(&self) -> usize {
        1
    }

    fn total_time(&self) -> f64 {
        self.source.total_time()
    }

    #[inline]
    fn increment(&self, step: usize) -> &[f64] {
        &self.source.increment(step)[self.factor..self.factor + 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice(values: &[f64], d: usize) -> IncrementLattice {
        IncrementLattice::from_increments(d, 1.0, values.to_vec()).unwrap()
    }

    #[test]
    fn deterministic_and_stream_separated() {
        let a = sample_lattice(42, 0, 4, 1, 1.0).unwrap();
        let b = sample_lattice(42, 0, 4, 1, 1.0).unwrap();
        let c = sample_lattice(42, 1, 4, 1, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(a.increments().iter().zip(c.increments()).any(|(x, y)| x != y));
        assert_eq!(a.increments().len(), 4);
    }

    #[test]
    fn prefix_is_counter_based() {
        // entry (step, factor) depends only on its flat position
        let short = sample_lattice(9, 3, 8, 2, 1.0).unwrap();
        let long = sample_lattice(9, 3, 32, 2, 4.0).unwrap();
        for (x, y) in short.increments().iter().zip(long.increments()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(sample_lattice(1, 0, 0, 1, 1.0), Err(Error::Domain(_))));
        assert!(matches!(sample_lattice(1, 0, 4, 1, 0.0), Err(Error::Domain(_))));
        assert!(matches!(sample_lattice(1, 0, 4, 1, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn column_variance_matches_dt() {
        let n = 1 << 14;
        let lat = sample_lattice(7, 0, n, 1, 1.0).unwrap();
        let dt = lat.dt();
        let col = lat.column(0);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(var >= 0.9 * dt && var <= 1.1 * dt, "var={var} dt={dt}");
        assert!(mean.abs() < 4.0 * (dt / n as f64).sqrt());
    }

    #[test]
    fn coarsen_sums_blocks() {
        let lat = lattice(&[1.0, 2.0, 3.0, 4.0], 1);
        assert_eq!(lat.coarsen(4).unwrap().increments(), &[10.0]);
        assert_eq!(lat.coarsen(2).unwrap().increments(), &[3.0, 7.0]);
        assert_eq!(lat.coarsen(1).unwrap(), lat);
        assert!(lat.coarsen(3).is_err());
        assert!(lat.coarsen(0).is_err());
    }

    #[test]
    fn coarsen_is_associative_and_keeps_metadata() {
        let lat = sample_lattice(11, 5, 64, 2, 2.0).unwrap();
        let twice = lat.coarsen(2).unwrap().coarsen(2).unwrap();
        let once = lat.coarsen(4).unwrap();
        assert_eq!(twice.increments(), once.increments());
        assert_eq!(once.seed(), 11);
        assert_eq!(once.path_index(), 5);
        assert_eq!(once.n_steps(), 16);
        assert!((once.dt() - 4.0 * lat.dt()).abs() < 1e-15);
    }

    #[test]
    fn mixing_edge_cases() {
        let lat = sample_lattice(3, 0, 16, 2, 1.0).unwrap();
        let zero = lat.mix_correlated(0.0).unwrap();
        assert_eq!(zero.column(1), lat.column(1));
        assert_eq!(zero.column(0), lat.column(0));
        let one = lat.mix_correlated(1.0).unwrap();
        assert_eq!(one.column(1), lat.column(0));
        assert!(lat.mix_correlated(1.5).is_err());
        let single = sample_lattice(3, 0, 16, 1, 1.0).unwrap();
        assert!(matches!(single.mix_correlated(0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn mixed_correlation_matches_rho() {
        let n = 1 << 14;
        let lat = sample_lattice(21, 0, n, 2, 1.0)
            .unwrap()
            .mix_correlated(-0.6)
            .unwrap();
        let a = lat.column(0);
        let b = lat.column(1);
        let ma = a.iter().sum::<f64>() / n as f64;
        let mb = b.iter().sum::<f64>() / n as f64;
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        let corr = cov / (va * vb).sqrt();
        assert!((-0.65..=-0.55).contains(&corr), "corr={corr}");
        let dt = lat.dt();
        assert!((vb / (n - 1) as f64 - dt).abs() < 0.1 * dt);
    }

    #[test]
    fn factor_view_selects_column() {
        let lat = lattice(&[1.0, 10.0, 2.0, 20.0], 2);
        let view = lat.factor(1).unwrap();
        assert_eq!(view.n_factors(), 1);
        assert_eq!(view.increment(0), &[10.0]);
        assert_eq!(view.increment(1), &[20.0]);
        assert!(lat.factor(2).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..100).map(|l| derive_seed(1, l)).collect();
        assert_eq!(s.len(), 100);
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }
}
