//! Approximate chaos measures built from a sampled field, aggregated on
//! dyadic boxes of the square `[-1, 1]^2`.
//!
//! Each grid point stands for a lattice cell of area `(2/N)^2`. Integrals
//! against `dz` are Riemann sums over those cells.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::gff::FieldSample;
use crate::geometry::DiskPoint;
use crate::stats::{median, quantile_sorted};

/// Default dyadic level (256 boxes).
pub const DEFAULT_LEVEL: u32 = 4;

/// Masses on the `4^level` dyadic boxes. Box `iy·2^level + ix` covers
/// `[-1 + ix·w, -1 + (ix+1)·w) × [-1 + iy·w, -1 + (iy+1)·w)` with
/// `w = 2^{1-level}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxMeasure {
    pub level: u32,
    pub masses: Vec<f64>,
    pub total: f64,
}

impl BoxMeasure {
    pub fn zero(level: u32) -> Self {
        Self { level, masses: vec![0.0; 1 << (2 * level)], total: 0.0 }
    }

    pub fn side(&self) -> usize {
        1 << self.level
    }

    pub fn box_index(level: u32, z: &DiskPoint) -> usize {
        let side = 1usize << level;
        let cell = |x: f64| (((x + 1.0) * 0.5 * side as f64).floor() as usize).min(side - 1);
        cell(z.im) * side + cell(z.re)
    }

    pub fn add(&mut self, z: &DiskPoint, mass: f64) {
        self.masses[Self::box_index(self.level, z)] += mass;
        self.total += mass;
    }

    /// Sums groups of four boxes into the parent level.
    pub fn coarsen(&self) -> Result<BoxMeasure> {
        if self.level == 0 {
            return Err(Error::Domain("level 0 has no parent level".into()));
        }
        let side = self.side();
        let mut parent = BoxMeasure::zero(self.level - 1);
        let pside = side / 2;
        for iy in 0..side {
            for ix in 0..side {
                parent.masses[(iy / 2) * pside + ix / 2] += self.masses[iy * side + ix];
            }
        }
        parent.total = parent.masses.iter().sum();
        Ok(parent)
    }

    /// Adds another measure on the same level box by box.
    pub fn merge(&mut self, other: &BoxMeasure) -> Result<()> {
        if self.level != other.level {
            return Err(Error::Domain(format!("cannot merge level {} into level {}", other.level, self.level)));
        }
        for (a, b) in self.masses.iter_mut().zip(&other.masses) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }

    fn from_weights(field: &FieldSample, level: u32, weight: impl Fn(f64) -> f64) -> BoxMeasure {
        let cell = field.spec.cell_area();
        let mut m = BoxMeasure::zero(level);
        for (z, &v) in field.points.iter().zip(&field.values) {
            m.add(z, cell * weight(v));
        }
        m
    }
}

/// The measures of one replica across a decreasing schedule of scales.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureFamily {
    pub scales: Vec<f64>,
    pub measures: Vec<BoxMeasure>,
    pub gamma: f64,
}

impl MeasureFamily {
    pub fn new(scales: Vec<f64>, measures: Vec<BoxMeasure>, gamma: f64) -> Result<Self> {
        if scales.len() != measures.len() {
            return Err(Error::Domain("one measure per scale is required".into()));
        }
        if scales.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Domain("scales must be strictly decreasing".into()));
        }
        Ok(Self { scales, measures, gamma })
    }
}

/// `ε^{γ²/2} exp(γ Γ_ε(z)) dz` for `0 ≤ γ < 2`.
pub fn subcritical_measure(field: &FieldSample, gamma: f64, level: u32) -> Result<BoxMeasure> {
    if !(0.0..2.0).contains(&gamma) {
        return Err(Error::Domain(format!(
            "subcritical measure needs 0 <= gamma < 2, got {gamma}; use the derivative or Seneta-Heyde measure at criticality"
        )));
    }
    let norm = field.spec.epsilon.powf(0.5 * gamma * gamma);
    Ok(BoxMeasure::from_weights(field, level, |v| norm * (gamma * v).exp()))
}

/// `(-Γ_ε(z) + 2 log(1/ε)) ε² exp(2 Γ_ε(z)) dz`. Masses may be negative.
pub fn derivative_measure(field: &FieldSample, level: u32) -> BoxMeasure {
    let eps = field.spec.epsilon;
    let shift = 2.0 * (1.0 / eps).ln();
    let eps2 = eps * eps;
    BoxMeasure::from_weights(field, level, |v| (shift - v) * eps2 * (2.0 * v).exp())
}

/// `sqrt(log(1/ε)) ε² exp(2 Γ_ε(z)) dz`.
pub fn seneta_heyde_measure(field: &FieldSample, level: u32) -> BoxMeasure {
    let eps = field.spec.epsilon;
    let norm = (1.0 / eps).ln().sqrt() * eps * eps;
    BoxMeasure::from_weights(field, level, |v| norm * (2.0 * v).exp())
}

/// Successive-scale differences `|m_{k+1}(B) - m_k(B)|` pooled over boxes
/// and replicas.
#[derive(Debug, Clone, PartialEq)]
pub struct CauchyStep {
    /// Index `k` of the coarser scale.
    pub step: usize,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CauchyReport {
    pub steps: Vec<CauchyStep>,
    /// Boxes whose replica-median difference does not shrink from one step
    /// to the next.
    pub non_contracting: Vec<usize>,
    /// Replica medians of the totals, one per scale.
    pub median_totals: Vec<f64>,
}

impl CauchyReport {
    pub fn medians(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.median).collect()
    }
}

/// Cauchy-type contraction diagnostic over replicas of a measure family.
/// Boxes that never receive mass are skipped.
pub fn cauchy_diagnostic(families: &[MeasureFamily]) -> Result<CauchyReport> {
    let first = families.first().ok_or_else(|| Error::Domain("no replicas".into()))?;
    let nscales = first.scales.len();
    if nscales < 3 {
        return Err(Error::Domain(format!("need at least 3 scales, got {nscales}")));
    }
    let nboxes = first.measures[0].masses.len();
    let active: Vec<usize> = (0..nboxes).filter(|&b| families.iter().any(|f| f.measures[0].masses[b] != 0.0)).collect();
    let mut steps = Vec::with_capacity(nscales - 1);
    let mut per_box_medians = vec![Vec::with_capacity(nscales - 1); nboxes];
    for k in 0..nscales - 1 {
        let mut pooled = Vec::with_capacity(families.len() * active.len());
        for &b in &active {
            let diffs: Vec<f64> = families
                .iter()
                .map(|f| (f.measures[k + 1].masses[b] - f.measures[k].masses[b]).abs())
                .collect();
            per_box_medians[b].push(median(&diffs));
            pooled.extend(diffs);
        }
        pooled.sort_by(f64::total_cmp);
        steps.push(CauchyStep {
            step: k,
            q25: quantile_sorted(&pooled, 0.25),
            median: quantile_sorted(&pooled, 0.5),
            q75: quantile_sorted(&pooled, 0.75),
        });
    }
    let non_contracting = active
        .iter()
        .copied()
        .filter(|&b| per_box_medians[b].windows(2).any(|w| w[1] > w[0]))
        .collect();
    let median_totals = (0..nscales)
        .map(|k| median(&families.iter().map(|f| f.measures[k].total).collect::<Vec<_>>()))
        .collect();
    Ok(CauchyReport { steps, non_contracting, median_totals })
}

/// Radius of the disk whose area equals that of the cells of `count` grid
/// points: the region a Riemann sum over the grid stands for.
pub fn covered_radius(count: usize, cell_area: f64) -> f64 {
    (count as f64 * cell_area / PI).sqrt()
}

/// `∫_{r0 < |z| < r1} CR(z)^p dz` with `CR(z) = 1 - |z|^2`.
pub fn cr_power_integral(p: f64, r0: f64, r1: f64) -> f64 {
    let u0 = 1.0 - r0 * r0;
    let u1 = 1.0 - r1 * r1;
    PI * (u0.powf(p + 1.0) - u1.powf(p + 1.0)) / (p + 1.0)
}

/// `∫_{r0 < |z| < r1} 2 CR(z)^2 log(1/CR(z)) dz`, the first moment density
/// of the derivative measure.
pub fn derivative_density_integral(r0: f64, r1: f64) -> f64 {
    // ∫ u^2 log(1/u) du = u^3/9 - u^3 log(u)/3
    let anti = |u: f64| if u <= 0.0 { 0.0 } else { u.powi(3) / 9.0 - u.powi(3) * u.ln() / 3.0 };
    let u0 = 1.0 - r0 * r0;
    let u1 = 1.0 - r1 * r1;
    2.0 * PI * (anti(u0) - anti(u1))
}

/// `E[μ^γ(𝔻)] = π / (1 + γ²/2)`.
pub fn subcritical_total_target(gamma: f64) -> f64 {
    PI / (1.0 + 0.5 * gamma * gamma)
}

/// `E[ν(𝔻)] = 2π/9`.
pub fn derivative_total_target() -> f64 {
    2.0 * PI / 9.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gff::{sample_field, GridSpec};
    use crate::quad::integrate;
    use proptest::prelude::*;

    fn field() -> FieldSample {
        sample_field(&GridSpec { resolution: 16, margin: 0.1, epsilon: 0.05, seed: 5 }).unwrap()
    }

    fn zero_field() -> FieldSample {
        let mut f = field();
        f.values.iter_mut().for_each(|v| *v = 0.0);
        f
    }

    #[test]
    fn gamma_zero_is_lebesgue() {
        let f = field();
        let m = subcritical_measure(&f, 0.0, 4).unwrap();
        let area = f.points.len() as f64 * f.spec.cell_area();
        assert!((m.total - area).abs() < 1e-12);
        let rc = covered_radius(f.points.len(), f.spec.cell_area());
        assert!((PI * rc * rc - area).abs() < 1e-12);
        assert!((area - PI * 0.81).abs() < 0.1);
    }

    #[test]
    fn rejects_critical_gamma() {
        assert!(subcritical_measure(&field(), 2.0, 4).is_err());
    }

    #[test]
    fn degenerate_field_totals() {
        let f = zero_field();
        let area = f.points.len() as f64 * f.spec.cell_area();
        let eps: f64 = 0.05;
        let d = derivative_measure(&f, 4);
        assert!((d.total - 2.0 * (1.0 / eps).ln() * eps * eps * area).abs() < 1e-12);
        let sh = seneta_heyde_measure(&f, 4);
        assert!((sh.total - (1.0 / eps).ln().sqrt() * eps * eps * area).abs() < 1e-12);
    }

    #[test]
    fn seneta_heyde_is_rescaled_critical_mass() {
        let f = field();
        let sh = seneta_heyde_measure(&f, 3);
        let cell = f.spec.cell_area();
        let raw: f64 = f.values.iter().map(|v| cell * 0.05f64.powi(2) * (2.0 * v).exp()).sum();
        assert!((sh.total - 20f64.ln().sqrt() * raw).abs() < 1e-10 * sh.total);
    }

    #[test]
    fn masses_nonnegative_and_total_consistent() {
        let f = field();
        for m in [subcritical_measure(&f, 1.5, 4).unwrap(), seneta_heyde_measure(&f, 4)] {
            assert!(m.masses.iter().all(|&x| x >= 0.0));
            assert!((m.masses.iter().sum::<f64>() - m.total).abs() < 1e-12 * m.total.abs().max(1.0));
        }
    }

    #[test]
    fn coarsening_reproduces_parent_level() {
        let f = field();
        for level in 1..=5 {
            let fine = subcritical_measure(&f, 1.0, level).unwrap();
            let coarse = subcritical_measure(&f, 1.0, level - 1).unwrap();
            let rebuilt = fine.coarsen().unwrap();
            for (a, b) in rebuilt.masses.iter().zip(&coarse.masses) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn analytic_integrals_match_quadrature() {
        for p in [0.125, 0.5, 1.125] {
            assert!((cr_power_integral(p, 0.0, 1.0) - PI / (p + 1.0)).abs() < 1e-14);
            let q = integrate(|r| 2.0 * PI * r * (1.0 - r * r).powf(p), 0.3, 0.9, 16, 16);
            assert!((cr_power_integral(p, 0.3, 0.9) - q).abs() < 1e-12);
        }
        assert!((derivative_density_integral(0.0, 1.0) - 2.0 * PI / 9.0).abs() < 1e-14);
        let q = integrate(|r| 2.0 * PI * r * 2.0 * (1.0 - r * r).powi(2) * (1.0 / (1.0 - r * r)).ln(), 0.2, 0.95, 32, 16);
        assert!((derivative_density_integral(0.2, 0.95) - q).abs() < 1e-10);
        assert!((subcritical_total_target(1.0) - 2.0 * PI / 3.0).abs() < 1e-15);
        assert!((subcritical_total_target(1.5) - 1.478_3).abs() < 1e-4);
    }

    #[test]
    fn constant_family_has_zero_differences() {
        let m = subcritical_measure(&field(), 1.0, 4).unwrap();
        let fam = MeasureFamily::new(vec![0.1, 0.05, 0.025], vec![m.clone(), m.clone(), m], 1.0).unwrap();
        let report = cauchy_diagnostic(&[fam.clone(), fam]).unwrap();
        assert!(report.steps.iter().all(|s| s.median == 0.0 && s.q75 == 0.0));
        assert!(report.non_contracting.is_empty());
    }

    #[test]
    fn cauchy_needs_three_scales() {
        let m = subcritical_measure(&field(), 1.0, 4).unwrap();
        let fam = MeasureFamily::new(vec![0.1, 0.05], vec![m.clone(), m], 1.0).unwrap();
        assert!(cauchy_diagnostic(&[fam]).is_err());
        assert!(MeasureFamily::new(vec![0.05, 0.1], vec![], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn box_index_nests(re in -0.99f64..0.99, im in -0.99f64..0.99, level in 1u32..8) {
            let z = DiskPoint { re, im };
            let fine = BoxMeasure::box_index(level, &z);
            let coarse = BoxMeasure::box_index(level - 1, &z);
            let side = 1usize << level;
            let (fy, fx) = (fine / side, fine % side);
            prop_assert_eq!(coarse, (fy / 2) * (side / 2) + fx / 2);
        }

        #[test]
        fn merge_is_associative(a in prop::collection::vec(-5.0f64..5.0, 16),
                                b in prop::collection::vec(-5.0f64..5.0, 16),
                                c in prop::collection::vec(-5.0f64..5.0, 16)) {
            let mk = |v: &Vec<f64>| BoxMeasure { level: 2, total: v.iter().sum(), masses: v.clone() };
            let (ma, mb, mc) = (mk(&a), mk(&b), mk(&c));
            let mut left = ma.clone();
            left.merge(&mb).unwrap();
            left.merge(&mc).unwrap();
            let mut bc = mb.clone();
            bc.merge(&mc).unwrap();
            let mut right = ma.clone();
            right.merge(&bc).unwrap();
            for (x, y) in left.masses.iter().zip(&right.masses) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
