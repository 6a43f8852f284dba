//! Analytic geometry of the unit disk.
//!
//! The Dirichlet Green's function of the disk, normalised so that
//! `G(x, y) ~ log(1/|x - y|)` on the diagonal, is
//!
//! ```text
//! G(x, y) = log |1 - x·conj(y)| - log |x - y|
//! ```
//!
//! The first term is the harmonic part `H(x, y)`. On the diagonal it gives the
//! conformal radius, `CR(z) = exp(H(z, z)) = 1 - |z|^2`.
//!
//! Circle averages of `G` are computed from the mean-value property: the
//! harmonic part averages to its value at the centres, and the logarithmic
//! part reduces to a one-dimensional integral over the second circle which is
//! evaluated piecewise on the arcs inside and outside the first circle.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::quad::gauss_legendre;

/// Separation below which two points are treated as coincident.
pub const COINCIDENCE_CUTOFF: f64 = 1e-12;

/// Node count of the Gauss–Legendre rule used on the arc of one circle lying
/// outside the other when two circle kernels overlap.
pub const OVERLAP_NODES: usize = 64;

/// A point strictly inside the unit disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiskPoint {
    pub re: f64,
    pub im: f64,
}

impl DiskPoint {
    pub fn new(re: f64, im: f64) -> Result<Self> {
        let r2 = re * re + im * im;
        if !(r2 < 1.0) {
            return Err(Error::Domain(format!("({re}, {im}) is not inside the unit disk")));
        }
        Ok(Self { re, im })
    }

    pub const ORIGIN: DiskPoint = DiskPoint { re: 0.0, im: 0.0 };

    pub fn norm(&self) -> f64 {
        self.re.hypot(self.im)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.re * self.re + self.im * self.im
    }

    /// Euclidean distance to the unit circle.
    pub fn boundary_distance(&self) -> f64 {
        1.0 - self.norm()
    }

    pub fn distance(&self, other: &DiskPoint) -> f64 {
        (self.re - other.re).hypot(self.im - other.im)
    }
}

/// Dirichlet Green's function of the unit disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreenKernel {
    pub cutoff: f64,
}

impl Default for GreenKernel {
    fn default() -> Self {
        Self { cutoff: COINCIDENCE_CUTOFF }
    }
}

impl GreenKernel {
    pub fn eval(&self, x: &DiskPoint, y: &DiskPoint) -> Result<f64> {
        let d = x.distance(y);
        if d < self.cutoff {
            return Err(Error::Domain(format!(
                "Green's function evaluated at coincident points (separation {d:.3e}); use a mollified covariance"
            )));
        }
        Ok(harmonic_part(x, y) - d.ln())
    }
}

/// `log |1 - x·conj(y)|`, the harmonic correction to `-log|x - y|`.
pub fn harmonic_part(x: &DiskPoint, y: &DiskPoint) -> f64 {
    // 1 - x·conj(y)
    let re = 1.0 - (x.re * y.re + x.im * y.im);
    let im = -(x.im * y.re - x.re * y.im);
    re.hypot(im).ln()
}

/// Green's function with the default coincidence cutoff.
pub fn green_disk(x: &DiskPoint, y: &DiskPoint) -> Result<f64> {
    GreenKernel::default().eval(x, y)
}

/// Conformal radius of the unit disk seen from `z`.
pub fn conformal_radius(z: &DiskPoint) -> f64 {
    1.0 - z.norm_sqr()
}

/// The uniform probability measure on the circle of radius `radius` around
/// `center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleKernel {
    pub center: DiskPoint,
    pub radius: f64,
}

impl CircleKernel {
    pub fn new(center: DiskPoint, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::Domain(format!("circle radius must be positive, got {radius}")));
        }
        if !(radius < center.boundary_distance()) {
            return Err(Error::Domain(format!(
                "circle of radius {radius} around ({}, {}) leaves the disk",
                center.re, center.im
            )));
        }
        Ok(Self { center, radius })
    }

    fn order_key(&self) -> (f64, f64, f64) {
        (self.radius, self.center.re, self.center.im)
    }
}

/// Covariance of the circle averages `(Γ, ρ_a)` and `(Γ, ρ_b)` of the free
/// field, i.e. the double circle average of [`green_disk`].
pub fn circle_average_cov(a: &CircleKernel, b: &CircleKernel) -> f64 {
    // Evaluate in a canonical order so the result is bitwise symmetric.
    let (a, b) = if a.order_key() <= b.order_key() { (a, b) } else { (b, a) };
    harmonic_part(&a.center, &b.center) + log_kernel_average(a, b)
}

/// Average over `y` on circle `b` of `log(1 / max(|y - c_a|, r_a))`, which is
/// the circle average over circle `a` of `log(1/|x - y|)` (mean-value
/// property), averaged again over circle `b`.
fn log_kernel_average(a: &CircleKernel, b: &CircleKernel) -> f64 {
    let d = a.center.distance(&b.center);
    let (ra, rb) = (a.radius, b.radius);
    if d >= ra + rb {
        // Circle b lies outside disc a: log(1/|y - c_a|) is averaged over a
        // circle whose disc excludes c_a.
        return -d.ln();
    }
    if d + rb <= ra {
        // Circle b inside disc a.
        return -ra.ln();
    }
    if d + ra <= rb {
        // Disc a inside circle b: the average of log(1/|y - c_a|) over
        // circle b is -log(rb) when c_a is enclosed.
        return -rb.ln();
    }
    // Partial overlap. With y = c_b + rb·e^{iψ} measured from the direction
    // c_b - c_a, |y - c_a|^2 = d^2 + rb^2 + 2 d rb cos ψ decreases on [0, π]
    // and crosses ra^2 at ψ*.
    let cos_star = ((ra * ra - d * d - rb * rb) / (2.0 * d * rb)).clamp(-1.0, 1.0);
    let psi_star = cos_star.acos();
    let (x, w) = overlap_rule();
    let half = 0.5 * psi_star;
    let mut outside = 0.0;
    for (xi, wi) in x.iter().zip(w) {
        let psi = half * (1.0 + xi);
        let dist2 = d * d + rb * rb + 2.0 * d * rb * psi.cos();
        outside += wi * (-0.5 * dist2.ln());
    }
    outside *= half;
    let inside = (std::f64::consts::PI - psi_star) * (-ra.ln());
    (outside + inside) / std::f64::consts::PI
}

fn overlap_rule() -> (&'static [f64], &'static [f64]) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    let (x, w) = RULE.get_or_init(|| gauss_legendre(OVERLAP_NODES));
    (x, w)
}
