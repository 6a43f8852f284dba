//! Joint sampling of circle averages of the free field on a point grid.
//!
//! The covariance of `(Γ_ε(z_i))` is assembled from
//! [`circle_average_cov`](crate::geometry::circle_average_cov) and factorised
//! once. Several scales can be sampled jointly on the same grid; the joint law
//! is again Gaussian with covariances given by circle averages of different
//! radii, so the scales are coupled exactly as they are for one realisation of
//! the field.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{circle_average_cov, conformal_radius, CircleKernel, DiskPoint};
use crate::rng::StreamKey;
use crate::stats::Estimate;

/// Largest number of grid points accepted by the dense factorisation.
pub const MAX_POINTS: usize = 8192;

/// Relative tolerance below which negative eigenvalues are clipped to zero.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Replicas per matrix–matrix product.
const BATCH: usize = 64;

/// Lattice points of spacing `2/N` with `|z| < 1 - margin`, sampled at scale
/// `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub resolution: usize,
    pub margin: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::Config(format!("grid resolution must be at least 2, got {}", self.resolution)));
        }
        if !(self.margin >= 0.0 && self.margin < 1.0) {
            return Err(Error::Config(format!("margin must lie in [0, 1), got {}", self.margin)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= self.margin) {
            return Err(Error::Config(format!(
                "epsilon = {} must be positive and at most the margin {}",
                self.epsilon, self.margin
            )));
        }
        let n = grid_points(self.resolution, self.margin).len();
        if n > MAX_POINTS {
            return Err(Error::Config(format!("{n} grid points exceed the budget of {MAX_POINTS}")));
        }
        if n == 0 {
            return Err(Error::Config("grid has no interior points".into()));
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<DiskPoint> {
        grid_points(self.resolution, self.margin)
    }

    /// Area of the lattice cell each point stands for.
    pub fn cell_area(&self) -> f64 {
        cell_area(self.resolution)
    }
}

/// Vertices `-1 + k·2/N` of the lattice, row by row, kept when
/// `|z| < 1 - margin`.
pub fn grid_points(resolution: usize, margin: f64) -> Vec<DiskPoint> {
    let h = 2.0 / resolution as f64;
    let rmax = 1.0 - margin;
    let mut points = Vec::new();
    for j in 0..=resolution {
        let im = -1.0 + j as f64 * h;
        for i in 0..=resolution {
            let re = -1.0 + i as f64 * h;
            if re.hypot(im) < rmax {
                points.push(DiskPoint { re, im });
            }
        }
    }
    points
}

pub fn cell_area(resolution: usize) -> f64 {
    let h = 2.0 / resolution as f64;
    h * h
}

/// One realisation of the circle-average field at a single scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub points: Vec<DiskPoint>,
    pub values: Vec<f64>,
    /// Exact variances `log(1/ε) + log CR(z)`.
    pub variances: Vec<f64>,
    pub spec: GridSpec,
}

/// A factorised covariance for one grid and one or more scales.
#[derive(Debug, Clone)]
pub struct FieldSampler {
    points: Vec<DiskPoint>,
    scales: Vec<f64>,
    resolution: usize,
    margin: f64,
    variances: Vec<f64>,
    factor: DMatrix<f64>,
}

impl FieldSampler {
    /// Single-scale sampler for `spec`.
    pub fn new(spec: &GridSpec) -> Result<Self> {
        Self::multi_scale(spec.resolution, spec.margin, &[spec.epsilon])
    }

    /// Joint sampler for the scales in `scales`. Sample vectors are laid out
    /// scale-major: entry `k·n + i` is scale `k` at point `i`.
    pub fn multi_scale(resolution: usize, margin: f64, scales: &[f64]) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Config("at least one scale is required".into()));
        }
        for &eps in scales {
            GridSpec { resolution, margin, epsilon: eps, seed: 0 }.validate()?;
        }
        let points = grid_points(resolution, margin);
        let n = points.len();
        let mut kernels = Vec::with_capacity(n * scales.len());
        for &eps in scales {
            for z in &points {
                kernels.push(CircleKernel::new(*z, eps)?);
            }
        }
        let dim = kernels.len();
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..=i {
                let c = circle_average_cov(&kernels[i], &kernels[j]);
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        let variances = cov.diagonal().iter().copied().collect();
        let factor = factorize(cov)?;
        Ok(Self { points, scales: scales.to_vec(), resolution, margin, variances, factor })
    }

    pub fn points(&self) -> &[DiskPoint] {
        &self.points
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    /// Exact variances, scale-major like the samples.
    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn spec(&self, scale_index: usize, seed: u64) -> GridSpec {
        GridSpec { resolution: self.resolution, margin: self.margin, epsilon: self.scales[scale_index], seed }
    }

    /// Samples replicas `replicas` and maps each sample vector through `f`,
    /// returning results in replica order. Replica `r` uses stream `r` of
    /// `key`, so the output is independent of scheduling.
    pub fn sample_map<T, F>(&self, key: &StreamKey, replicas: std::ops::Range<u64>, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(u64, &[f64]) -> T + Sync,
    {
        let start = replicas.start;
        let count = (replicas.end - replicas.start) as usize;
        let batches: Vec<(u64, usize)> = (0..count)
            .step_by(BATCH)
            .map(|off| (start + off as u64, BATCH.min(count - off)))
            .collect();
        let dim = self.dim();
        batches
            .par_iter()
            .flat_map_iter(|&(first, width)| {
                let mut noise = DMatrix::<f64>::zeros(dim, width);
                for c in 0..width {
                    let mut rng = key.stream(first + c as u64);
                    for r in 0..dim {
                        noise[(r, c)] = StandardNormal.sample(&mut rng);
                    }
                }
                let values = &self.factor * noise;
                (0..width)
                    .map(|c| f(first + c as u64, values.column(c).as_slice()))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Splits a scale-major sample vector into one [`FieldSample`] per scale.
    pub fn split(&self, values: &[f64], seed: u64) -> Vec<FieldSample> {
        let n = self.points.len();
        (0..self.scales.len())
            .map(|k| FieldSample {
                points: self.points.clone(),
                values: values[k * n..(k + 1) * n].to_vec(),
                variances: self.variances[k * n..(k + 1) * n].to_vec(),
                spec: self.spec(k, seed),
            })
            .collect()
    }
}

/// Cholesky factor when the matrix is positive definite; otherwise a
/// symmetric square root with small negative eigenvalues clipped.
fn factorize(cov: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(chol) = Cholesky::new(cov.clone()) {
        return Ok(chol.l());
    }
    let tolerance = PSD_TOLERANCE * cov.trace();
    let eig = SymmetricEigen::new(cov);
    let min = eig.eigenvalues.min();
    if min < -tolerance {
        return Err(Error::Factorization { eigenvalue: min, tolerance });
    }
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let mut factor = eig.eigenvectors;
    for (j, s) in sqrt.iter().enumerate() {
        factor.column_mut(j).scale_mut(*s);
    }
    Ok(factor)
}

/// One realisation of the field for `spec`, using stream 0 of the seed.
pub fn sample_field(spec: &GridSpec) -> Result<FieldSample> {
    spec.validate()?;
    let sampler = FieldSampler::new(spec)?;
    let key = field_key(spec.seed);
    let values = sampler.sample_map(&key, 0..1, |_, v| v.to_vec()).pop().expect("one replica");
    Ok(sampler.split(&values, spec.seed).pop().expect("one scale"))
}

/// Stream family used for field replicas of a given seed.
pub fn field_key(seed: u64) -> StreamKey {
    StreamKey::new(seed, "gff")
}

/// Monte Carlo check of `E[ε^{γ²/2} e^{γΓ_ε(z)}] = CR(z)^{γ²/2}` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMoment {
    pub point: DiskPoint,
    pub estimate: Estimate,
    pub target: f64,
    /// More than `k` standard errors away from the target.
    pub deviates: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub gamma: f64,
    pub rows: Vec<PointMoment>,
}

impl MomentReport {
    pub fn flagged(&self) -> usize {
        self.rows.iter().filter(|r| r.deviates).count()
    }
}

/// Exponential-moment identity at every grid point, for several `γ` on the
/// same replicas. Points are flagged beyond `k_se` standard errors.
pub fn exponential_moment_check_multi(
    spec: &GridSpec,
    gammas: &[f64],
    replicas: u64,
    key: &StreamKey,
    k_se: f64,
) -> Result<Vec<MomentReport>> {
    spec.validate()?;
    for &g in gammas {
        if !(0.0..=2.5).contains(&g) {
            return Err(Error::Config(format!("gamma must lie in [0, 2.5], got {g}")));
        }
    }
    let sampler = FieldSampler::new(spec)?;
    let n = sampler.points().len();
    let eps = spec.epsilon;
    // Per replica: γ-major vector of ε^{γ²/2} e^{γ v}.
    let per_replica = sampler.sample_map(key, 0..replicas, |_, v| {
        let mut out = Vec::with_capacity(gammas.len() * n);
        for &g in gammas {
            let norm = eps.powf(0.5 * g * g);
            out.extend(v.iter().map(|x| norm * (g * x).exp()));
        }
        out
    });
    let mut reports = Vec::with_capacity(gammas.len());
    let mut column = vec![0.0; replicas as usize];
    for (gi, &g) in gammas.iter().enumerate() {
        let mut rows = Vec::with_capacity(n);
        for (i, z) in sampler.points().iter().enumerate() {
            for (r, sample) in per_replica.iter().enumerate() {
                column[r] = sample[gi * n + i];
            }
            let estimate = Estimate::from_samples(&column);
            let target = conformal_radius(z).powf(0.5 * g * g);
            let deviates = if estimate.se > 0.0 {
                (estimate.mean - target).abs() > k_se * estimate.se
            } else {
                (estimate.mean - target).abs() > 1e-12
            };
            rows.push(PointMoment { point: *z, estimate, target, deviates });
        }
        reports.push(MomentReport { gamma: g, rows });
    }
    Ok(reports)
}

/// Single-γ form of [`exponential_moment_check_multi`] with the default 4 SE
/// flag.
pub fn exponential_moment_check(spec: &GridSpec, gamma: f64, replicas: u64) -> Result<MomentReport> {
    let key = field_key(spec.seed);
    Ok(exponential_moment_check_multi(spec, &[gamma], replicas, &key, 4.0)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::green_disk;
    use crate::stats::skew_kurtosis;

    fn spec16() -> GridSpec {
        GridSpec { resolution: 16, margin: 0.05, epsilon: 0.05, seed: 3 }
    }

    fn index_of(points: &[DiskPoint], re: f64, im: f64) -> usize {
        points.iter().position(|p| (p.re - re).abs() < 1e-12 && (p.im - im).abs() < 1e-12).unwrap()
    }

    #[test]
    fn grid_contains_origin_and_half() {
        let pts = spec16().points();
        index_of(&pts, 0.0, 0.0);
        index_of(&pts, 0.5, 0.0);
        assert!(pts.iter().all(|p| p.norm() < 0.95));
    }

    #[test]
    fn spec_validation() {
        let mut s = spec16();
        s.epsilon = 0.1;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let big = GridSpec { resolution: 200, margin: 0.0, epsilon: 0.0, seed: 0 };
        assert!(big.validate().is_err());
        let huge = GridSpec { resolution: 200, margin: 0.01, epsilon: 0.01, seed: 0 };
        assert!(matches!(huge.validate(), Err(Error::Config(m)) if m.contains("budget")));
    }

    #[test]
    fn variances_match_closed_form() {
        let sample = sample_field(&spec16()).unwrap();
        for (z, v) in sample.points.iter().zip(&sample.variances) {
            let expected = (1.0 / 0.05f64).ln() + conformal_radius(z).ln();
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn seed_determinism() {
        let a = sample_field(&spec16()).unwrap();
        let b = sample_field(&spec16()).unwrap();
        assert_eq!(a, b);
        let mut other = spec16();
        other.seed = 4;
        assert_ne!(a.values, sample_field(&other).unwrap().values);
    }

    #[test]
    fn empirical_moments_and_gaussianity() {
        let spec = spec16();
        let sampler = FieldSampler::new(&spec).unwrap();
        let pts = sampler.points().to_vec();
        let i0 = index_of(&pts, 0.0, 0.0);
        let i5 = index_of(&pts, 0.5, 0.0);
        let reps = 10_000;
        let samples = sampler.sample_map(&field_key(9), 0..reps, |_, v| v.to_vec());
        let col = |i: usize| samples.iter().map(|s| s[i]).collect::<Vec<f64>>();
        for i in 0..pts.len() {
            let c = col(i);
            let est = Estimate::from_samples(&c);
            assert!(est.mean.abs() <= 4.5 * est.se, "point {i}: mean {}", est.mean);
            let (skew, kurt) = skew_kurtosis(&c);
            assert!(skew.abs() < 0.1 && kurt.abs() < 0.2, "point {i}: {skew} {kurt}");
        }
        let x0 = col(i0);
        let x5 = col(i5);
        // Var(X) has SE ≈ σ²·sqrt(2/n).
        let var0 = crate::stats::variance(&x0);
        let target0 = 20f64.ln();
        assert!((var0 - target0).abs() < 4.0 * target0 * (2.0 / reps as f64).sqrt());
        let prod: Vec<f64> = x0.iter().zip(&x5).map(|(a, b)| a * b).collect();
        let cov = Estimate::from_samples(&prod);
        let g = green_disk(&DiskPoint::ORIGIN, &DiskPoint { re: 0.5, im: 0.0 }).unwrap();
        assert!((cov.mean - g).abs() < 4.0 * cov.se, "cov {} vs {g}", cov.mean);
    }

    #[test]
    fn gamma_zero_moment_is_exactly_one() {
        let report = exponential_moment_check(&spec16(), 0.0, 50).unwrap();
        assert!(report.rows.iter().all(|r| r.estimate.mean == 1.0 && !r.deviates));
    }

    #[test]
    fn moment_targets() {
        let spec = GridSpec { resolution: 10, margin: 0.1, epsilon: 0.05, seed: 1 };
        let report = exponential_moment_check(&spec, 1.0, 10).unwrap();
        let origin = report.rows.iter().find(|r| r.point.norm() == 0.0).unwrap();
        assert_eq!(origin.target, 1.0);
        let at06 = report.rows.iter().find(|r| (r.point.re - 0.6).abs() < 1e-12 && r.point.im == 0.0).unwrap();
        assert!((at06.target - 0.8).abs() < 1e-12);
    }

    #[test]
    fn rejects_gamma_out_of_range() {
        assert!(exponential_moment_check(&spec16(), 2.6, 10).is_err());
    }

    #[test]
    fn multi_scale_cross_covariance() {
        let sampler = FieldSampler::multi_scale(8, 0.2, &[0.2, 0.1]).unwrap();
        let n = sampler.points().len();
        let i0 = index_of(sampler.points(), 0.0, 0.0);
        let samples = sampler.sample_map(&field_key(2), 0..20_000, |_, v| v[i0] * v[n + i0]);
        let est = Estimate::from_samples(&samples);
        // Concentric circles: covariance is log(1/max radius).
        assert!((est.mean - 5f64.ln()).abs() < 4.0 * est.se);
    }
}
