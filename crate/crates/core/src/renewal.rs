//! Tabulated renewal function of the strict descending ladder process.
//!
//! `h1(u)` is the expected number of strict descending ladder epochs of a
//! walk started at 0 whose ladder height stays at or above `-u`, counting the
//! epoch at time 0. It is estimated from independent sequences of cumulative
//! ladder depths `0 < H_1 < H_2 < ...` as the mean of `#{k >= 0 : H_k <= u}`.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::stats::{linear_fit, LinearFit};

/// `h1` on the grid `u = 0, step, 2·step, …` with linear interpolation and
/// linear extrapolation beyond the last node using the fitted slope.
#[derive(Debug)]
pub struct H1Table {
    step: f64,
    values: Vec<f64>,
    se: Vec<f64>,
    fit: LinearFit,
    extrapolations: AtomicU64,
}

impl Clone for H1Table {
    fn clone(&self) -> Self {
        Self {
            step: self.step,
            values: self.values.clone(),
            se: self.se.clone(),
            fit: self.fit,
            extrapolations: AtomicU64::new(self.extrapolations.load(Ordering::Relaxed)),
        }
    }
}

impl H1Table {
    /// Builds the table from renewal sequences. Each sequence must hold
    /// increasing cumulative ladder depths that pass `u_max`. The slope is
    /// fitted by least squares on the grid nodes inside `fit_range`.
    pub fn from_sequences(sequences: &[Vec<f64>], step: f64, u_max: f64, fit_range: (f64, f64)) -> Result<Self> {
        if sequences.len() < 2 {
            return Err(Error::Domain("need at least two renewal sequences".into()));
        }
        if !(step > 0.0) || u_max < step {
            return Err(Error::Domain(format!("bad grid: step {step}, u_max {u_max}")));
        }
        let nodes = (u_max / step).round() as usize + 1;
        let mut sum = vec![0.0; nodes];
        let mut sum_sq = vec![0.0; nodes];
        for seq in sequences {
            match seq.last() {
                Some(&last) if last > u_max => {}
                _ => return Err(Error::Assertion("renewal sequence stops before the end of the grid".into())),
            }
            for i in 0..nodes {
                let u = i as f64 * step;
                let count = 1.0 + seq.partition_point(|&h| h <= u) as f64;
                sum[i] += count;
                sum_sq[i] += count * count;
            }
        }
        let n = sequences.len() as f64;
        let values: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let se = sum_sq
            .iter()
            .zip(&values)
            .map(|(sq, m)| ((sq / n - m * m).max(0.0) * n / (n - 1.0) / n).sqrt())
            .collect();
        Self::from_values(step, values, se, fit_range)
    }

    /// Builds the table from already tabulated values.
    pub fn from_values(step: f64, values: Vec<f64>, se: Vec<f64>, fit_range: (f64, f64)) -> Result<Self> {
        if values.len() != se.len() || values.len() < 3 {
            return Err(Error::Domain("table needs at least three nodes with matching errors".into()));
        }
        if values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Assertion("renewal table is not nondecreasing".into()));
        }
        let (us, hs): (Vec<f64>, Vec<f64>) = values
            .iter()
            .enumerate()
            .map(|(i, &h)| (i as f64 * step, h))
            .filter(|(u, _)| *u >= fit_range.0 - 1e-12 && *u <= fit_range.1 + 1e-12)
            .unzip();
        if us.len() < 3 {
            return Err(Error::Domain(format!("fit range {fit_range:?} holds fewer than three nodes")));
        }
        let fit = linear_fit(&us, &hs);
        Ok(Self { step, values, se, fit, extrapolations: AtomicU64::new(0) })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn u_max(&self) -> f64 {
        (self.values.len() - 1) as f64 * self.step
    }

    pub fn u_grid(&self) -> Vec<f64> {
        (0..self.values.len()).map(|i| i as f64 * self.step).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn standard_errors(&self) -> &[f64] {
        &self.se
    }

    /// Slope `c0` of the linear regime.
    pub fn c0(&self) -> f64 {
        self.fit.slope
    }

    pub fn fit(&self) -> LinearFit {
        self.fit
    }

    /// Number of evaluations that fell beyond the tabulated range.
    pub fn extrapolations(&self) -> u64 {
        self.extrapolations.load(Ordering::Relaxed)
    }

    /// `h1(u)`; zero for `u < 0`.
    pub fn eval(&self, u: f64) -> f64 {
        if u < 0.0 {
            return 0.0;
        }
        let x = u / self.step;
        let i = x.floor() as usize;
        if i + 1 >= self.values.len() {
            let last = *self.values.last().unwrap();
            if u > self.u_max() {
                self.extrapolations.fetch_add(1, Ordering::Relaxed);
            }
            return last + self.c0() * (u - self.u_max());
        }
        let frac = x - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }

    /// Standard error at `u`, interpolated like the values and held constant
    /// past the grid.
    pub fn se_at(&self, u: f64) -> f64 {
        if u < 0.0 {
            return 0.0;
        }
        let x = u / self.step;
        let i = x.floor() as usize;
        if i + 1 >= self.se.len() {
            return *self.se.last().unwrap();
        }
        let frac = x - i as f64;
        self.se[i] * (1.0 - frac) + self.se[i + 1] * frac
    }

    /// The tightest `R <= R'` with `R(1+u) <= h1(u) <= R'(1+u)` on the grid.
    pub fn linear_bounds(&self) -> (f64, f64) {
        self.values
            .iter()
            .enumerate()
            .map(|(i, h)| h / (1.0 + i as f64 * self.step))
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), r| (lo.min(r), hi.max(r)))
    }

    /// Checks `h1(0) = 1`, monotonicity and the linear bounds.
    pub fn check(&self) -> Result<()> {
        if self.values[0] != 1.0 {
            return Err(Error::Assertion(format!("h1(0) = {} instead of 1", self.values[0])));
        }
        let (lo, hi) = self.linear_bounds();
        if !(lo > 0.0) {
            return Err(Error::Assertion("h1 lower linear bound is not positive".into()));
        }
        for (i, h) in self.values.iter().enumerate() {
            let u = i as f64 * self.step;
            if h < &(lo * (1.0 + u) * (1.0 - 1e-12)) || h > &(hi * (1.0 + u) * (1.0 + 1e-12)) {
                return Err(Error::Assertion(format!("h1({u}) = {h} outside the linear bounds")));
            }
        }
        if self.c0() <= 0.0 {
            return Err(Error::Assertion("fitted slope is not positive".into()));
        }
        Ok(())
    }

    /// `sup_{y >= -shift} h1(y + shift) / (y + offset)` for `offset > shift`.
    /// The ratio of two linear pieces is monotone on each grid cell, so the
    /// supremum is reached at a node or in the linear tail.
    pub fn sup_ratio_to_line(&self, shift: f64, offset: f64) -> f64 {
        let tail = if self.c0() > 0.0 { self.c0() } else { 0.0 };
        self.values
            .iter()
            .enumerate()
            .map(|(i, h)| h / (i as f64 * self.step - shift + offset))
            .fold(tail, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Deterministic ladders with unit spacing: h1(u) = 1 + floor(u).
    fn unit_sequences() -> Vec<Vec<f64>> {
        vec![(1..=60).map(f64::from).collect(); 4]
    }

    #[test]
    fn counts_ladder_epochs() {
        let t = H1Table::from_sequences(&unit_sequences(), 0.5, 50.0, (5.0, 50.0)).unwrap();
        assert_eq!(t.values()[0], 1.0);
        assert!((t.eval(0.9) - 1.8).abs() < 1e-12);
        assert_eq!(t.values()[2], 2.0);
        assert_eq!(t.values()[3], 2.0);
        assert!(t.standard_errors().iter().all(|&s| s == 0.0));
        assert!((t.c0() - 1.0).abs() < 0.02);
        t.check().unwrap();
    }

    #[test]
    fn interpolation_and_extrapolation() {
        let values: Vec<f64> = (0..=10).map(|i| 1.0 + 0.5 * i as f64).collect();
        let t = H1Table::from_values(1.0, values, vec![0.0; 11], (2.0, 10.0)).unwrap();
        assert!((t.eval(2.5) - 2.25).abs() < 1e-15);
        assert_eq!(t.eval(-0.1), 0.0);
        assert_eq!(t.extrapolations(), 0);
        assert!((t.eval(12.0) - 7.0).abs() < 1e-12);
        assert_eq!(t.extrapolations(), 1);
        let (lo, hi) = t.linear_bounds();
        assert!((hi - 1.0).abs() < 1e-15 && (lo - 6.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_short_sequences() {
        let seqs = vec![vec![1.0, 2.0]; 3];
        assert!(matches!(H1Table::from_sequences(&seqs, 0.5, 50.0, (5.0, 50.0)), Err(Error::Assertion(_))));
    }

    #[test]
    fn sup_ratio_matches_dense_scan() {
        let values: Vec<f64> = (0..=20).map(|i| 1.0 + (i as f64).sqrt() + 0.3 * i as f64).collect();
        let t = H1Table::from_values(0.5, values, vec![0.0; 21], (2.0, 10.0)).unwrap();
        let (shift, offset) = (1.0, 12.0);
        let sup = t.sup_ratio_to_line(shift, offset);
        let scan = (0..200_000)
            .map(|k| -shift + k as f64 * 1e-3)
            .chain((0..400).map(|k| 200.0 * 1.05f64.powi(k)))
            .map(|y| t.eval(y + shift) / (y + offset))
            .fold(0.0, f64::max);
        assert!(sup >= scan - 1e-12 && sup - scan < 1e-6, "{sup} vs {scan}");
    }
}
