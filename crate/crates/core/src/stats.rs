//! Estimators and pass/fail gates shared by the experiments.

use serde::{Deserialize, Serialize};
use statrs::function::erf;

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = mean(xs);
        let se = if n > 1 { (variance(xs) / n as f64).sqrt() } else { f64::NAN };
        Self { mean, se, n }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Sample skewness and excess kurtosis (moment estimators).
pub fn skew_kurtosis(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = mean(xs);
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in xs {
        let d = x - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Fraction of entries strictly below zero.
pub fn negative_fraction(xs: &[f64]) -> f64 {
    xs.iter().filter(|&&x| x < 0.0).count() as f64 / xs.len() as f64
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// CDF of the Rayleigh law with unit scale, the endpoint of a Brownian meander.
pub fn rayleigh_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        1.0 - (-0.5 * x * x).exp()
    }
}

/// CDF of the first hitting time of `level > 0` by standard Brownian motion,
/// i.e. of `level^2 / Z^2`.
pub fn hitting_time_cdf(level: f64, t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        erf::erfc(level / (2.0 * t).sqrt())
    }
}

/// One-sample Kolmogorov–Smirnov statistic. `+inf` entries are allowed and
/// count as mass beyond every finite point.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v: Vec<f64> = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in v.iter().enumerate() {
        if !x.is_finite() {
            break;
        }
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < x.len() && j < y.len() {
        let t = x[i].min(y[j]);
        while i < x.len() && x[i] <= t {
            i += 1;
        }
        while j < y.len() && y[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let mx = mean(x);
    let my = mean(y);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    let slope = sxy / sxx;
    LinearFit { slope, intercept: my - slope * mx, r_squared: sxy * sxy / (sxx * syy) }
}

/// Self-normalised importance estimate `Σ w g / Σ w` with a delta-method
/// standard error.
pub fn weighted_ratio(values: &[f64], weights: &[f64]) -> Estimate {
    let n = values.len() as f64;
    let wsum: f64 = weights.iter().sum();
    let r = values.iter().zip(weights).map(|(g, w)| g * w).sum::<f64>() / wsum;
    let wbar = wsum / n;
    let resid: Vec<f64> = values.iter().zip(weights).map(|(g, w)| w * (g - r)).collect();
    let var = resid.iter().map(|e| e * e).sum::<f64>() / (n - 1.0);
    Estimate { mean: r, se: (var / n).sqrt() / wbar, n: values.len() }
}

/// Passes iff `|estimate - target| <= k·se`.
pub fn z_gate(estimate: f64, se: f64, target: f64, k: f64) -> bool {
    (estimate - target).abs() <= k * se
}

/// Passes iff the KS distance between `sample` and `cdf` is below `threshold`.
pub fn ks_gate(sample: &[f64], cdf: impl Fn(f64) -> f64, threshold: f64) -> (f64, bool) {
    let d = ks_statistic(sample, cdf);
    (d, d < threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Increasing,
    Decreasing,
}

/// Strict monotonicity of a series of at least three points.
pub fn trend_gate(series: &[f64], direction: Direction) -> bool {
    series.len() >= 3
        && series.windows(2).all(|w| match direction {
            Direction::Increasing => w[1] > w[0],
            Direction::Decreasing => w[1] < w[0],
        })
}
