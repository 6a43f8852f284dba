//! Experiment registry and runner behind the `gmc` binary.
//!
//! Each experiment reads its parameters from a [`Params`] set, rejects keys
//! it does not know, draws from streams keyed by `(seed, experiment id)` and
//! returns report rows plus CSV tables. Parameters are parsed for every
//! experiment of an invocation before anything runs.

use std::f64::consts::PI;
use std::time::Instant;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cascade::{
    fps_second_moment, fps_via_tvs_embedding, run_cascade_multi, sample_fps_time, sample_tvs_exit, CascadeConfig,
    CascadeStats, IncrementLaw, TestFunction, Truncation,
};
use crate::cells;
use crate::chaos::{
    cauchy_diagnostic, covered_radius, cr_power_integral, derivative_density_integral, derivative_measure,
    derivative_total_target, seneta_heyde_measure, subcritical_measure, subcritical_total_target, BoxMeasure,
    MeasureFamily,
};
use crate::config::Params;
use crate::error::{Error, Result};
use crate::geometry::{conformal_radius, green_disk};
use crate::gff::{exponential_moment_check_multi, sample_field, FieldSampler, GridSpec};
use crate::report::{Provenance, Report, Row, RunReport, Table};
use crate::rng::StreamKey;
use crate::spine::{
    estimate_h1, meander_test, persistence_check, renewal_identity, sample_tilted_increment, simulate_spine,
    spine_endpoints, LadderSettings, SpinalSampler, SpineStepper,
};
use crate::stats::{
    hitting_time_cdf, ks_statistic, ks_two_sample, median, negative_fraction, skew_kurtosis, Direction, Estimate,
};

use Provenance::{Derived, Paper, Trivial};

/// Master seed used when neither the file nor the command line gives one.
pub const DEFAULT_SEED: u64 = 20_240_601;

/// Every experiment id the runner accepts.
pub const EXPERIMENTS: &[&str] = &[
    "eq2-moment",
    "chaos-mass",
    "cascade-mean",
    "cascade-second-moment",
    "criticality",
    "fps-embedding",
    "spine-calculus",
    "renewal",
    "meander",
    "seneta-heyde",
    "spinal-consistency",
    "field-sample",
    "battery",
];

/// Members of the `battery` meta-experiment, in run order.
pub const BATTERY: &[&str] = &[
    "eq2-moment",
    "chaos-mass",
    "cascade-mean",
    "cascade-second-moment",
    "criticality",
    "fps-embedding",
    "spine-calculus",
    "renewal",
    "meander",
    "seneta-heyde",
    "spinal-consistency",
];

/// Rows and tables produced by one experiment.
pub struct Output {
    pub rows: Vec<Row>,
    pub tables: Vec<Table>,
}

trait Experiment: Send + Sync {
    fn run(&self, key: &StreamKey) -> Result<Output>;
}

/// Exit status for an error: 2 for bad input, 3 for a failed internal check.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Schema(_)
        | Error::Config(_)
        | Error::Domain(_)
        | Error::UnknownTestFunction(_)
        | Error::Factorization { .. } => 2,
        Error::Assertion(_) | Error::IterationCap { .. } | Error::AcceptanceTooLow { .. } | Error::Io(_) | Error::Json(_) => 3,
    }
}

fn parse_one(id: &str, p: &mut Params) -> Result<Box<dyn Experiment>> {
    Ok(match id {
        "eq2-moment" => Box::new(Eq2Moment::parse(p)?),
        "chaos-mass" => Box::new(ChaosMass::parse(p)?),
        "cascade-mean" => Box::new(CascadeMean::parse(p)?),
        "cascade-second-moment" => Box::new(SecondMoment::parse(p)?),
        "criticality" => Box::new(Criticality::parse(p)?),
        "fps-embedding" => Box::new(FpsEmbedding::parse(p)?),
        "spine-calculus" => Box::new(SpineCalculus::parse(p)?),
        "renewal" => Box::new(Renewal::parse(p)?),
        "meander" => Box::new(Meander::parse(p)?),
        "seneta-heyde" => Box::new(SenetaHeyde::parse(p)?),
        "spinal-consistency" => Box::new(SpinalConsistency::parse(p)?),
        "field-sample" => Box::new(FieldDump::parse(p)?),
        _ => return Err(Error::Schema(format!("unknown experiment `{id}`"))),
    })
}

/// A validated invocation, ready to run.
pub struct Plan {
    pub experiment: String,
    pub seed: u64,
    members: Vec<(&'static str, Box<dyn Experiment>)>,
}

impl Plan {
    /// Checks the id and every parameter. `seed` and `replicas` override the
    /// file; for the battery, `replicas` applies to every member.
    pub fn new(id: &str, mut params: Params, seed: Option<u64>, replicas: Option<u64>) -> Result<Self> {
        let Some(&id) = EXPERIMENTS.iter().find(|&&e| e == id) else {
            return Err(Error::Schema(format!("unknown experiment `{id}`; known: {}", EXPERIMENTS.join(", "))));
        };
        let file_seed = params.take("seed", DEFAULT_SEED)?;
        let seed = seed.unwrap_or(file_seed);
        let ids: Vec<&'static str> = if id == "battery" { BATTERY.to_vec() } else { vec![id] };
        let mut members = Vec::with_capacity(ids.len());
        for member in ids {
            let mut section = if id == "battery" { params.section(member) } else { std::mem::take(&mut params) };
            if let Some(r) = replicas {
                section.set("replicas", r);
            }
            let exp = parse_one(member, &mut section)?;
            section.finish().map_err(|e| match e {
                Error::Schema(m) => Error::Schema(format!("{member}: {m}")),
                other => other,
            })?;
            members.push((member, exp));
        }
        params.finish()?;
        Ok(Self { experiment: id.to_string(), seed, members })
    }

    /// Runs every member in order. `progress` sees each finished run.
    pub fn run_with(&self, mut progress: impl FnMut(&RunReport)) -> Result<Report> {
        let start = Instant::now();
        let mut runs = Vec::with_capacity(self.members.len());
        for (id, exp) in &self.members {
            let t = Instant::now();
            let out = exp.run(&StreamKey::new(self.seed, id))?;
            let run = RunReport::new(id, self.seed, out.rows, out.tables, t.elapsed().as_secs_f64());
            progress(&run);
            runs.push(run);
        }
        Ok(Report::new(&self.experiment, self.seed, runs, start.elapsed().as_secs_f64()))
    }

    pub fn run(&self) -> Result<Report> {
        self.run_with(|_| {})
    }
}

fn positive_count(p: &mut Params, key: &str, default: u64) -> Result<u64> {
    let v = p.take(key, default)?;
    if v < 2 {
        return Err(Error::Schema(format!("`{key}` must be at least 2, got {v}")));
    }
    Ok(v)
}

fn floor_param(p: &mut Params, key: &str, default: f64) -> Result<Option<f64>> {
    let v: f64 = p.take(key, default)?;
    if v < 0.0 || !v.is_finite() {
        return Err(Error::Schema(format!("`{key}` must be a nonnegative number, got {v}")));
    }
    Ok((v > 0.0).then_some(v))
}

fn depths_param(p: &mut Params, default: &[u32]) -> Result<Vec<u32>> {
    let d = p.take_list("depths", default)?;
    if d.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Schema("`depths` must be strictly increasing".into()));
    }
    Ok(d)
}

fn replicate<T: Send>(replicas: u64, key: &StreamKey, f: impl Fn(&mut crate::rng::Rng) -> Result<T> + Sync) -> Result<Vec<T>> {
    (0..replicas).into_par_iter().map(|r| f(&mut key.stream(r))).collect()
}

/// Trees from streams `0..replicas` of `key`, indexed `[replica][depth][gamma]`.
fn cascade_runs(
    config: &CascadeConfig,
    depths: &[u32],
    gammas: &[f64],
    replicas: u64,
    key: &StreamKey,
) -> Result<Vec<Vec<Vec<CascadeStats>>>> {
    let mut deepest = config.clone();
    deepest.depth = *depths.iter().max().unwrap();
    deepest.validate()?;
    replicate(replicas, key, |rng| run_cascade_multi(config, depths, gammas, rng))
}

const CASCADE_COLUMNS: &[&str] =
    &["law", "replica", "depth", "gamma", "M", "D", "K_F", "D_trunc", "K_trunc", "leaf_count"];

fn cascade_table(name: &str, law: IncrementLaw, runs: &[Vec<Vec<CascadeStats>>], table: Option<Table>) -> Table {
    let mut t = table.unwrap_or_else(|| Table::new(name, CASCADE_COLUMNS));
    for (r, per_depth) in runs.iter().enumerate() {
        for s in per_depth.iter().flatten() {
            t.push(cells![law.name(), r, s.depth, s.gamma, s.m, s.d, s.k_f, s.d_trunc, s.k_trunc, s.leaf_count]);
        }
    }
    t
}

fn column(runs: &[Vec<Vec<CascadeStats>>], di: usize, gi: usize, f: impl Fn(&CascadeStats) -> f64) -> Vec<f64> {
    runs.iter().map(|r| f(&r[di][gi])).collect()
}

fn estimate(xs: &[f64]) -> Estimate {
    Estimate::from_samples(xs)
}

// ---------------------------------------------------------------------------
// Free field

struct Eq2Moment {
    spec: GridSpec,
    gammas: Vec<f64>,
    replicas: u64,
    k: f64,
}

impl Eq2Moment {
    fn parse(p: &mut Params) -> Result<Self> {
        let spec = GridSpec {
            resolution: p.take("resolution", 16)?,
            margin: p.take("margin", 0.05)?,
            epsilon: p.take("epsilon", 0.05)?,
            seed: 0,
        };
        spec.validate()?;
        let gammas = p.take_list("gammas", &[0.5, 1.0, 1.5])?;
        Ok(Self { spec, gammas, replicas: positive_count(p, "replicas", 10_000)?, k: p.take("k", 4.0)? })
    }
}

impl Experiment for Eq2Moment {
    fn run(&self, key: &StreamKey) -> Result<Output> {
        let reports = exponential_moment_check_multi(&self.spec, &self.gammas, self.replicas, key, self.k)?;
        let mut rows = Vec::new();
        let mut table = Table::new("points", &["gamma", "re", "im", "estimate", "se", "target"]);
        for rep in &reports {
            let max_z = rep
                .rows
                .iter()
                .map(|r| (r.estimate.mean - r.target).abs() / r.estimate.se)
                .fold(0.0, f64::max);
            rows.push(
                Row::below(format!("gamma={}: largest |z| over {} points", rep.gamma, rep.rows.len()), max_z, self.k, Paper)
                    .with_target(0.0),
            );
            if let Some(origin) = rep.rows.iter().find(|r| r.point.norm() == 0.0) {
                rows.push(Row::z(format!("gamma={}: moment at z=0", rep.gamma), origin.estimate, 1.0, self.k, Paper));
            }
            for r in &rep.rows {
                table.push(cells![rep.gamma, r.point.re, r.point.im, r.estimate.mean, r.estimate.se, r.target]);
            }
        }

        // The same replicas again, for the Gaussian structure of the field.
        let sampler = FieldSampler::new(&self.spec)?;
        let samples = sampler.sample_map(key, 0..self.replicas, |_, v| v.to_vec());
        let pts = sampler.points();
        let n = pts.len();
        let col = |i: usize| samples.iter().map(|s| s[i]).collect::<Vec<f64>>();
        let mut max_mean_z = 0.0f64;
        let (mut max_skew, mut max_kurt) = (0.0f64, 0.0f64);
        for i in 0..n {
            let xs = col(i);
            let e = estimate(&xs);
            max_mean_z = max_mean_z.max(e.mean.abs() / e.se);
            let (sk, ku) = skew_kurtosis(&xs);
            max_skew = max_skew.max(sk.abs());
            max_kurt = max_kurt.max(ku.abs());
        }
        rows.push(Row::below("field mean: largest |z| over points", max_mean_z, self.k, Trivial).with_target(0.0));
        rows.push(Row::below("largest |skewness| over points", max_skew, 0.1, Derived).with_target(0.0));
        rows.push(Row::below("largest |excess kurtosis| over points", max_kurt, 0.2, Derived).with_target(0.0));
        let find = |re: f64, im: f64| pts.iter().position(|z| (z.re - re).abs() < 1e-12 && (z.im - im).abs() < 1e-12);
        if let (Some(o), Some(h)) = (find(0.0, 0.0), find(0.5, 0.0)) {
            let (x0, xh) = (col(o), col(h));
            let var = estimate(&x0.iter().map(|x| x * x).collect::<Vec<_>>());
            rows.push(Row::z("Var field(0)", var, (1.0 / self.spec.epsilon).ln(), self.k, Derived));
            let cov = estimate(&x0.iter().zip(&xh).map(|(a, b)| a * b).collect::<Vec<_>>());
            let g = green_disk(&pts[o], &pts[h])?;
            rows.push(Row::z("Cov field(0), field(0.5)", cov, g, self.k, Derived));
        }
        Ok(Output { rows, tables: vec![table] })
    }
}

struct FieldDump {
    spec: GridSpec,
    /// Taken from the master seed when absent.
    field_seed: Option<u64>,
}

impl FieldDump {
    fn parse(p: &mut Params) -> Result<Self> {
        let spec = GridSpec {
            resolution: p.take("resolution", 16)?,
            margin: p.take("margin", 0.05)?,
            epsilon: p.take("epsilon", 0.05)?,
            seed: 0,
        };
        let field_seed = if p.contains("field_seed") { Some(p.take("field_seed", 0)?) } else { None };
        p.take("replicas", 1u64)?;
        spec.validate()?;
        Ok(Self { spec, field_seed })
    }
}

impl Experiment for FieldDump {
    fn run(&self, key: &StreamKey) -> Result<Output> {
        let spec = GridSpec { seed: self.field_seed.unwrap_or_else(|| seed_of(key, "field")), ..self.spec };
        let f = sample_field(&spec)?;
        let mut t = Table::new("field", &["re", "im", "value", "variance"]);
        let mut worst = 0.0f64;
        for ((z, v), var) in f.points.iter().zip(&f.values).zip(&f.variances) {
            t.push(cells![z.re, z.im, v, var]);
            worst = worst.max((var - ((1.0 / self.spec.epsilon).ln() + conformal_radius(z).ln())).abs());
        }
        let rows = vec![
            Row::below("largest variance deviation from log(1/eps) + log CR", worst, 1e-9, Derived),
            Row::info("points", f.points.len() as f64, Trivial),
        ];
        Ok(Output { rows, tables: vec![t] })
    }
}

// ---------------------------------------------------------------------------
// Chaos measures

struct ChaosMass {
    resolution: usize,
    margin: f64,
    scales: Vec<f64>,
    gammas: Vec<f64>,
    level: u32,
    replicas: u64,
    k: f64,
}

impl ChaosMass {
    fn parse(p: &mut Params) -> Result<Self> {
        let s = Self {
            resolution: p.take("resolution", 32)?,
            margin: p.take("margin", 0.1)?,
            scales: p.take_list("scales", &[0.1, 0.05, 0.025])?,
            gammas: p.take_list("gammas", &[0.5, 1.0, 1.5])?,
            level: p.take("level", crate::chaos::DEFAULT_LEVEL)?,
            replicas: positive_count(p, "replicas", 100_000)?,
            k: p.take("k", 4.0)?,
        };
        if s.scales.len() < 3 || s.scales.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Schema("`scales` needs at least three strictly decreasing values".into()));
        }
        if s.gammas.iter().any(|g| !(0.0..2.0).contains(g)) {
            return Err(Error::Schema("`gammas` must lie in [0, 2)".into()));
        }
        for &eps in &s.scales {
            GridSpec { resolution: s.resolution, margin: s.margin, epsilon: eps, seed: 0 }.validate()?;
        }
        Ok(s)
    }
}

/// Per replica and scale: subcritical totals, derivative, SH and plain
/// critical totals, and the box masses at the first `γ`.
struct ChaosReplica {
    totals: Vec<Vec<f64>>,
    boxes: Vec<BoxMeasure>,
}

impl Experiment for ChaosMass {
    fn run(&self, key: &StreamKey) -> Result<Output> {
        let sampler = FieldSampler::multi_scale(self.resolution, self.margin, &self.scales)?;
        let ng = self.gammas.len();
        let cauchy_gamma = self.gammas.iter().position(|&g| g == 1.0).unwrap_or(0);
        let reps: Vec<Result<ChaosReplica>> = sampler.sample_map(key, 0..self.replicas, |r, v| {
            let fields = sampler.split(v, r);
            let mut totals = Vec::with_capacity(fields.len());
            let mut boxes = Vec::with_capacity(fields.len());
            for f in &fields {
                let mut row = Vec::with_capacity(ng + 3);
                for (gi, &g) in self.gammas.iter().enumerate() {
                    let m = subcritical_measure(f, g, self.level)?;
                    row.push(m.total);
                    if gi == cauchy_gamma {
                        boxes.push(m);
                    }
                }
                row.push(derivative_measure(f, self.level).total);
                let sh = seneta_heyde_measure(f, self.level).total;
                row.push(sh);
                row.push(sh / (1.0 / f.spec.epsilon).ln().sqrt());
                totals.push(row);
            }
            Ok(ChaosReplica { totals, boxes })
        });
        let reps: Vec<ChaosReplica> = reps.into_iter().collect::<Result<_>>()?;

        let n_points = sampler.points().len();
        let cell = crate::gff::cell_area(self.resolution);
        let rc = covered_radius(n_points, cell);
        let names: Vec<String> = self
            .gammas
            .iter()
            .map(|g| format!("gamma={g}"))
            .chain(["derivative".to_string(), "seneta_heyde".into(), "critical".into()])
            .collect();
        let col = |si: usize, mi: usize| reps.iter().map(|r| r.totals[si][mi]).collect::<Vec<f64>>();

        let mut rows = Vec::new();
        for (si, &eps) in self.scales.iter().enumerate() {
            for (gi, &g) in self.gammas.iter().enumerate() {
                let p = 0.5 * g * g;
                let e = estimate(&col(si, gi));
                let total = Estimate { mean: e.mean + cr_power_integral(p, rc, 1.0), ..e };
                rows.push(Row::z(format!("E total, gamma={g}, eps={eps}"), total, subcritical_total_target(g), self.k, Derived));
            }
            let e = estimate(&col(si, ng));
            let total = Estimate { mean: e.mean + derivative_density_integral(rc, 1.0), ..e };
            rows.push(Row::z(format!("E derivative total, eps={eps}"), total, derivative_total_target(), self.k, Derived));
        }
        let neg: Vec<f64> = (0..self.scales.len()).map(|si| negative_fraction(&col(si, ng))).collect();
        let non_increasing = neg.windows(2).all(|w| w[1] <= w[0]);
        rows.push(
            Row::custom(
                "fraction of negative derivative totals along scales",
                *neg.last().unwrap(),
                Paper,
                non_increasing,
                format!("non-increasing: {neg:?}"),
            ),
        );
        let critical: Vec<f64> = (0..self.scales.len()).map(|si| median(&col(si, ng + 2))).collect();
        rows.push(Row::trend("median critical total along scales", &critical, Direction::Decreasing, Paper));
        for (si, &eps) in self.scales.iter().enumerate() {
            let ratio = crate::stats::mean(&col(si, ng + 1)) / crate::stats::mean(&col(si, ng));
            rows.push(Row::info(format!("E SH total / E derivative total, eps={eps}"), ratio, Paper).with_target((2.0 / PI).sqrt()));
        }
        let families: Vec<MeasureFamily> = reps
            .iter()
            .map(|r| MeasureFamily::new(self.scales.clone(), r.boxes.clone(), self.gammas[cauchy_gamma]))
            .collect::<Result<_>>()?;
        let cauchy = cauchy_diagnostic(&families)?;
        let steps = cauchy.medians();
        rows.push(Row::custom(
            format!("median per-box successive difference, gamma={}", self.gammas[cauchy_gamma]),
            *steps.last().unwrap(),
            Derived,
            steps.windows(2).all(|w| w[1] < w[0]),
            format!("strictly decreasing: {steps:?}"),
        ));
        rows.push(Row::info("boxes flagged non-contracting", cauchy.non_contracting.len() as f64, Derived));

        let mut totals = Table::new("totals", &["replica", "scale", "measure", "total"]);
        for (r, rep) in reps.iter().enumerate() {
            for (si, &eps) in self.scales.iter().enumerate() {
                for (mi, name) in names.iter().enumerate() {
                    totals.push(cells![r, eps, name, rep.totals[si][mi]]);
                }
            }
        }
        let mut boxes = Table::new("boxes", &["scale", "box_index", "mass"]);
        for (si, &eps) in self.scales.iter().enumerate() {
            for (i, m) in reps[0].boxes[si].masses.iter().enumerate() {
                boxes.push(cells![eps, i, m]);
            }
        }
        Ok(Output { rows, tables: vec![totals, boxes] })
    }
}

// ---------------------------------------------------------------------------
// Cascades

fn cascade_base(p: &mut Params, floor_default: f64) -> Result<CascadeConfig> {
    let b = p.take("branching", 2u32)?;
    let mut c = CascadeConfig::new(b, 0, 2.0, 0);
    c.a = p.take("a", c.a)?;
    c.prune_floor = floor_param(p, "floor", floor_default)?;
    c.leaf_cap = p.take("leaf_cap", c.leaf_cap)?;
    c.validate()?;
    Ok(c)
}

struct CascadeMean {
    base: CascadeConfig,
    depths: Vec<u32>,
    gammas: Vec<f64>,
    laws: Vec<IncrementLaw>,
    replicas: u64,
    k: f64,
}

impl CascadeMean {
    fn parse(p: &mut Params) -> Result<Self> {
        let base = cascade_base(p, 1e-3)?;
        let laws = p
            .take_list::<String>("laws", &["fps".into(), "tvs".into()])?
            .iter()
            .map(|l| IncrementLaw::parse(l).map_err(|e| Error::Schema(e.to_string())))
            .collect::<Result<_>>()?;
        Ok(Self {
            base,
            depths: depths_param(p, &[8, 16])?,
            gammas: p.take_list("gammas", &[0.5, 1.0, 1.5, 2.0])?,
            laws,
            replicas: positive_count(p, "replicas", 10_000)?,
            k: p.take("k", 4.0)?,
        })
    }
}

impl Experiment for CascadeMean {
    fn run(&self, key: &StreamKey) -> Result<Output> {
        let mut rows = Vec::new();
        let mut table = None;
        for &law in &self.laws {
            let mut config = self.base.clone();
            config.law = law;
            let runs = cascade_runs(&config, &self.depths, &self.gammas, self.replicas, &key.child(law.name()))?;
            for (di, &d) in self.depths.iter().enumerate() {
                for (gi, &g) in self.gammas.iter().enumerate() {
                    let m = estimate(&column(&runs, di, gi, |s| s.m));
                    rows.push(Row::z(format!("{}: E M, depth {d}, gamma={g}", law.name()), m, 1.0, self.k, Derived));
                }
                let dm = estimate(&column(&runs, di, 0, |s| s.d));
                rows.push(Row::z(format!("{}: E D, depth {d}", law.name()), dm, 0.0, self.k, Derived));
            }
            table = Some(cascade_table("replicas", law, &runs, table));
        }
        Ok(Output { rows, tables: table.into_iter().collect() })
    }
}

struct SecondMoment {
    base: CascadeConfig,
    gamma: f64,
    depths: Vec<u32>,
    replicas: u64,
    tolerance: f64,
}

impl SecondMoment {
    fn parse(p: &mut Params) -> Result<Self> {
        let base = cascade_base(p, 1e-4)?;
        Ok(Self {
            base,
            gamma: p.take("gamma", 1.0)?,
            depths: depths_param(p, &[8, 16, 32])?,
            replicas: positive_count(p, "replicas", 12_000)?,
            tolerance: p.take("tolerance", 0.05)?,
        })
    }
}

impl Experiment for SecondMoment {
    fn run(&self, key: &StreamKey) -> Result<Output> {
        let runs = cascade_runs(&self.base, &self.depths, &[self.gamma], self.replicas, key)?;
        let b = self.base.branching;
        let coupled = self.base.is_critical_coupling() && self.base.law == IncrementLaw::Fps;
        let mut rows = Vec::new();
        for (di, &d) in self.depths.iter().enumerate() {
            let m = column(&runs, di, 0, |s| s.m);
            rows.push(Row::z(format!("E M, depth {d}"), estimate(&m), 1.0, 4.0, Derived));
            let m2 = estimate(&m.iter().map(|x| x * x).collect::<Vec<_>>());
            if coupled {
                rows.push(Row::z(format!("E M^2, depth {d} vs finite-depth recursion"), m2, fps_second_moment(b, self.gamma, Some(d)), 4.0, Derived).ungated());
            }
            if di + 1 == self.depths.len() {
                if coupled {
                    rows.push(Row::relative(
                        format!("E M^2, depth {d} vs fixed point"),
                        m2,
                        fps_second_moment(b, self.gamma, None),
                        self.tolerance,
                        Derived,
                    ));
                } else {
                    rows.push(Row::info(format!("E M^2, depth {d}"), m2.mean, Derived).with_se(m2.se));
                }
            }
        }
        if let Some(f) = self.base.prune_floor {
            rows.push(Row::info("weight floor", f, Trivial));
        }
        Ok(Output { rows, tables: vec![cascade_table("replicas", self.base.law, &runs, None)] })
    }
}

struct Criticality {
    base: CascadeConfig,
    depths: Vec<u32>,
    replicas: u64,
    floor_gamma1: Option<f64>,
    replicas_gamma1: u64,
    threshold: f64,
}

impl Criticality {
    fn parse(p: &mut Params) -> Result<Self> {
        let base = cascade_base(p, 1e-6)?;
        let depths = depths_param(p, &[8, 16, 32])?;
        if depths.len() < 3 {
            return Err(Error::Schema("`depths` needs at least three values".into()));
        }
        Ok(Self {
            base,
            depths,
            replicas: positive_count(p, "replicas", 4000)?,
            floor_gamma1: floor_param(p, "floor_gamma1", 1e-3)?,
            replicas_gamma1: positive_count(p, "replicas_gamma1", 2000)?,
            threshold: p.take("threshold", 0.2)?,
        })
    }
}

impl Experiment for Criticality {
    fn run(&self, key: &StreamKey) -> Result<Output> {
        let critical = cascade_runs(&self.base, &self.depths, &[2.0], self.replicas, &key.child("gamma=2"))?;
        let mut sub = self.base.clone();
        sub.prune_floor = self.floor_gamma1;
        let subcritical = cascade_runs(&sub, &self.depths, &[1.0], self.replicas_gamma1, &key.child("gamma=1"))?;
        let mut rows = Vec::new();
        let mut med2 = Vec::new();
        let mut med1 = Vec::new();
        let mut neg = Vec::new();
        for (di, &d) in self.depths.iter().enumerate() {
            med2.push(median(&column(&critical, di, 0, |s| s.m)));
            med1.push(median(&column(&subcritical, di, 0, |s| s.m)));
            neg.push(negative_fraction(&column(&critical, di, 0, |s| s.d)));
            rows.push(Row::info(format!("median M, gamma=2, depth {d}"), med2[di], Paper));
            rows.push(Row::info(format!("median M, gamma=1, depth {d}"), med1[di], Paper));
            rows.push(Row::info(format!("fraction D < 0, depth {d}"), neg[di], Paper));
        }
        let last = *self.depths.last().unwrap();
        rows.push(Row::trend("median M, gamma=2, over depths", &med2, Direction::Decreasing, Paper));
        rows.push(Row::below(format!("median M, gamma=2, depth {last}"), *med2.last().unwrap(), self.threshold, Paper));
        rows.push(Row::above("smallest median M, gamma=1, over depths", med1.iter().copied().fold(f64::INFINITY, f64::min), self.threshold, Paper));
        rows.push(Row::trend("fraction D < 0 over depths", &neg, Direction::Decreasing, Paper));
        let table = cascade_table("replicas", self.base.law, &critical, None);
        let table = cascade_table("replicas", sub.law, &subcritical, Some(table));
        Ok(Output { rows, tables: vec![table] })
    }
}

struct SenetaHeyde {
    base: CascadeConfig,
    depths: Vec<u32>,
    replicas: u64,
    window: (f64, f64),
}

impl SenetaHeyde {
    fn parse(p: &mut Params) -> Result<Self> {
        let base = cascade_base(p, 1e-6)?;
        let depths = depths_param(p, &[16, 32, 64])?;
        if depths.len() < 3 {
            return Err(Error::Schema("`depths` needs at least three values".into()));
        }
        let window = p.take_list("window", &[0.45, 0.90])?;
        if window.len() != 2 || window[0] > window[1] {
            return Err(Error::Schema("`window` is `lo, hi`".into()));
        }
        Ok(Self { base, depths, replicas: positive_count(p, "replicas", 4000)?, window: (window[0], window[1]) })
    }
}

impl Experiment for SenetaHeyde {
    fn run(&self, key: &StreamKey) -> Result<Output> {
        let runs = cascade_runs(&self.base, &self.depths, &[2.0], self.replicas, key)?;
        let a = self.base.a;
        let target = TestFunction::One.seneta_heyde_limit(a);
        let mut rows = Vec::new();
        let mut medians = Vec::new();
        for (di, &d) in self.depths.iter().enumerate() {
            for f in TestFunction::ALL {
                let med = median(&column(&runs, di, 0, |s| s.seneta_heyde_ratio(f)));
                rows.push(
                    Row::info(format!("median sqrt(n) K_{}/D_n, depth {d}", f.name()), med, Derived)
                        .with_target(f.seneta_heyde_limit(a)),
                );
                if f == TestFunction::One {
                    medians.push(med);
                }
            }
            let plain = median(&column(&runs, di, 0, |s| (d as f64).sqrt() * s.k_all[0] / s.d));
            rows.push(Row::info(format!("median sqrt(n) K_one/D, depth {d}"), plain, Derived).with_target(2.0 * target));
        }
        let distance: Vec<f64> = medians.iter().map(|m| (m - target).abs()).collect();
        rows.push(Row::trend("distance of median to the limit over depths", &distance, Direction::Decreasing, Paper).with_target(0.0));
        rows.push(
            Row::window(
                format!("median sqrt(n) K_one/D_n, depth {}", self.depths.last().unwrap()),
                *medians.last().unwrap(),
                self.window.0,
                self.window.1,
                Paper,
            )
            .with_target(target),
        );
        Ok(Output { rows, tables: vec![cascade_table("replicas", self.base.law, &runs, None)] })
    }
}

// ---------------------------------------------------------------------------
// Increment laws

struct FpsEmbedding {
    levels: Vec<f64>,
    ks: Vec<u32>,
    samples: u64,
    tvs_samples: u64,
    dump: usize,
}

impl FpsEmbedding {
    fn parse(p: &mut Params) -> Result<Self> {
        let levels = p.take_list("levels", &[1.0, PI])?;
        if levels.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::Schema("`levels` must be positive".into()));
        }
        let ks = p.take_list("k", &[1u32, 2])?;
        if ks.contains(&0) {
            return Err(Error::Schema("`k` must be at least 1".into()));
        }
        Ok(Self {
            levels,
            ks,
            samples: positive_count(p, "replicas", 100_000)?,
            tvs_samples: positive_count(p, "tvs_samples", 1_000_000)?,
            dump: p.take("dump", 10_000)?,
        })
    }
}

impl Experiment for FpsEmbedding {
    fn run(&self, key: &StreamKey) -> Result<Output> {
        let mut rows = Vec::new();
        let mut table = Table::new("hitting", &["a", "k", "replica", "embedded", "direct"]);
        for &a in &self.levels {
            for &k in &self.ks {
                let label = format!("a={a}, k={k}");
                let level = a * k as f64;
                let pairs = replicate(self.samples, &key.child(&label), |rng| {
                    let embedded = match fps_via_tvs_embedding(a, k, rng) {
                        Ok((h, s)) => Some((h, s)),
                        Err(Error::IterationCap { .. }) => None,
                        Err(e) => return Err(e),
                    };
                    Ok((embedded, sample_fps_time(level, rng)))
                })?;
                let capped = pairs.iter().filter(|p| p.0.is_none()).count();
                let wrong_h = pairs.iter().filter(|p| matches!(p.0, Some((h, _)) if h != level)).count();
                let emb: Vec<f64> = pairs.iter().map(|p| p.0.map_or(f64::INFINITY, |x| x.1)).collect();
                let direct: Vec<f64> = pairs.iter().map(|p| p.1).collect();
                let lap = estimate(&emb.iter().map(|s| (-2.0 * s / (level * level)).exp()).collect::<Vec<_>>());
                rows.push(Row::below(format!("{label}: KS embedded vs law"), ks_statistic(&emb, |t| hitting_time_cdf(level, t)), 0.01, Derived));
                rows.push(Row::below(format!("{label}: two-sample KS embedded vs direct"), ks_two_sample(&emb, &direct), 0.01, Derived));
                rows.push(Row::z(format!("{label}: E exp(-2s/(ak)^2)"), lap, (-2.0f64).exp(), 4.0, Derived));
                rows.push(Row::exact(format!("{label}: returned heights off a*k"), wrong_h as f64, 0.0, Trivial));
                rows.push(Row::info(format!("{label}: draws stopped at the iteration cap"), capped as f64, Derived));
                for (r, (e, d)) in emb.iter().zip(&direct).enumerate().take(self.dump) {
                    table.push(cells![a, k, r, e, d]);
                }
            }
        }

        // The direct sampler and the exit-time law of [-1, 1].
        let direct = replicate(self.tvs_samples, &key.child("direct"), |rng| Ok(sample_fps_time(1.0, rng)))?;
        // Median of 1/Z² is 1/q² with q the upper quartile of |Z|.
        let q = 1.0 / Normal::standard().inverse_cdf(0.75).powi(2);
        let med = median(&direct);
        rows.push(Row::custom("median hitting time of 1", med, Derived, (med / q - 1.0).abs() <= 0.01, "within 1% of target".into()).with_target(q));
        let lap = estimate(&direct.iter().map(|s| (-2.0 * s).exp()).collect::<Vec<_>>());
        rows.push(Row::z("direct E exp(-2 tau)", lap, (-2.0f64).exp(), 4.0, Derived));
        let two = replicate(self.samples, &key.child("direct a=2"), |rng| Ok(sample_fps_time(2.0, rng)))?;
        let lap2 = estimate(&two.iter().map(|s| (-0.5 * s).exp()).collect::<Vec<_>>());
        rows.push(Row::z("direct a=2: E exp(-tau/2)", lap2, (-2.0f64).exp(), 4.0, Derived));

        let exits = replicate(self.tvs_samples, &key.child("tvs"), |rng| sample_tvs_exit(1.0, rng))?;
        let t = estimate(&exits.iter().map(|e| e.1).collect::<Vec<_>>());
        let t2 = estimate(&exits.iter().map(|e| e.1 * e.1).collect::<Vec<_>>());
        let g = 1.3;
        let expo = estimate(&exits.iter().map(|e| (g * e.0 - 0.5 * g * g * e.1).exp()).collect::<Vec<_>>());
        rows.push(Row::z("tvs a=1: E T", t, 1.0, 4.0, Derived));
        rows.push(Row::z("tvs a=1: E T^2", t2, 5.0 / 3.0, 4.0, Derived));
        rows.push(Row::z("tvs a=1: E exp(1.3 sign - 1.3^2 T/2)", expo, 1.0, 4.0, Derived));
        let prod = estimate(&exits.iter().map(|e| e.0 * (e.1 - t.mean)).collect::<Vec<_>>());
        rows.push(Row::z("tvs a=1: E sign (T - E T)", prod, 0.0, 3.0, Trivial));
        Ok(Output { rows, tables: vec![table] })
    }
}

// ---------------------------------------------------------------------------
// Spine

struct SpineCalculus {
    a: f64,
    gamma: f64,
    samples: u64,
    n: usize,
    walks: u64,
    dump_walks: usize,
    dump_steps: usize,
}

impl SpineCalculus {
    fn parse(p: &mut Params) -> Result<Self> {
        Ok(Self {
            a: p.take("a", 1.0)?,
            gamma: p.take("gamma", 2.0)?,
            samples: positive_count(p, "replicas", 400_000)?,
            n: p.take("n", 10_000)?,
            walks: positive_count(p, "walks", 4000)?,
            dump_walks: p.take("dump_walks", 10)?,
            dump_steps: p.take("dump_steps", 1000)?,
        })
    }
}

impl Experiment for SpineCalculus {
    fn run(&self, key: &StreamKey) -> Result<Output> {
        let (a, g) = (self.a, self.gamma);
        let mut rows = Vec::new();
        let taus = replicate(self.samples, &key.child("tilted"), |rng| sample_tilted_increment(a, g, rng))?;
        let mean = a / g;
        rows.push(Row::z("tilted increment mean", estimate(&taus), mean, 4.0, Derived));
        let var = estimate(&taus.iter().map(|t| (t - mean).powi(2)).collect::<Vec<_>>());
        rows.push(Row::z("tilted increment variance", var, mean.powi(3) / (a * a), 4.0, Derived));
        let steps: Vec<f64> = taus.iter().map(|t| -g * a + g * g * t).collect();
        let step_var = estimate(&steps.iter().map(|s| s * s).collect::<Vec<_>>());
        let sigma2 = if g == 2.0 { 2.0 * a } else { 4.0 * a / g };
        rows.push(Row::z("variance of S-increments", step_var, sigma2, 4.0, if a == 1.0 && g == 2.0 { Paper } else { Derived }));

        // Change of measure: E_tilted[e^{−γa + γ²τ/2} g(τ)] = E[g(τ)] under the hitting-time law.
        let laplace = |l: f64| (-a * (2.0 * l).sqrt()).exp();
        let checks: [(&str, Box<dyn Fn(f64) -> f64 + Sync>, f64); 5] = [
            ("1{tau <= 1}", Box::new(|t| f64::from(u8::from(t <= 1.0))), hitting_time_cdf(a, 1.0)),
            ("1{tau <= 1/4}", Box::new(|t| f64::from(u8::from(t <= 0.25))), hitting_time_cdf(a, 0.25)),
            ("exp(-tau)", Box::new(|t: f64| (-t).exp()), laplace(1.0)),
            ("exp(-3 tau)", Box::new(|t: f64| (-3.0 * t).exp()), laplace(3.0)),
            ("tau exp(-2 tau)", Box::new(|t: f64| t * (-2.0 * t).exp()), 0.5 * a * laplace(2.0)),
        ];
        for (name, f, target) in &checks {
            let w: Vec<f64> = taus.iter().map(|&t| (-g * a + 0.5 * g * g * t).exp() * f(t)).collect();
            rows.push(Row::z(format!("change of measure, g = {name}"), estimate(&w), *target, 4.0, Derived));
        }

        let stepper = SpineStepper::new(a, g)?;
        let ends = spine_endpoints(&stepper, self.n, self.walks, &key.child("walks"));
        let n = self.n as f64;
        rows.push(Row::z("S_n / n", estimate(&ends.iter().map(|s| s / n).collect::<Vec<_>>()), 0.0, 4.0, Trivial));
        let v = estimate(&ends.iter().map(|s| s * s / n).collect::<Vec<_>>());
        rows.push(Row::z("Var(S_n) / n", v, sigma2, 4.0, Derived));
        let q4 = estimate(&ends.iter().map(|s| s.powi(4) / (3.0 * (sigma2 * n).powi(2))).collect::<Vec<_>>());
        rows.push(Row::relative("E S_n^4 / (3 (2an)^2)", q4, 1.0, 0.05, Derived).ungated());

        let walk = simulate_spine(self.dump_steps, a, self.dump_walks, seed_of(key, "dump"))?;
        let mut table = Table::new("spine", &["replica", "step", "S"]);
        for (r, path) in walk.paths.iter().enumerate() {
            for (i, s) in path.iter().enumerate() {
                table.push(cells![r, i, s]);
            }
        }
        Ok(Output { rows, tables: vec![table] })
    }
}

/// A 64-bit seed drawn from a labelled stream, for operations that take one.
fn seed_of(key: &StreamKey, label: &str) -> u64 {
    use rand::Rng as _;
    key.child(label).stream(0).random()
}

struct Renewal {
    settings: LadderSettings,
    identity: Vec<(f64, usize)>,
    walks: u64,
    persistence_u: Vec<f64>,
    persistence_n: usize,
    persistence_reps: u64,
}

impl Renewal {
    fn parse(p: &mut Params) -> Result<Self> {
        let mut settings = LadderSettings::new(p.take("a", 1.0)?);
        settings.sequences = p.take("sequences", settings.sequences)?;
        let us = p.take_list("identity_u", &[2.0, 5.0, 10.0])?;
        let ns = p.take_list("identity_n", &[10usize, 10, 10])?;
        if us.len() != ns.len() {
            return Err(Error::Schema("`identity_u` and `identity_n` must have the same length".into()));
        }
        Ok(Self {
            settings,
            identity: us.into_iter().zip(ns).collect(),
            walks: positive_count(p, "replicas", 100_000)?,
            persistence_u: p.take_list("persistence_u", &[1.0, 5.0, 10.0])?,
            persistence_n: p.take("persistence_n", 10_000)?,
            persistence_reps: positive_count(p, "persistence_reps", 400_000)?,
        })
    }
}

impl Experiment for Renewal {
    fn run(&self, key: &StreamKey) -> Result<Output> {
        let est = estimate_h1(&self.settings, &key.child("h1"))?;
        let t = &est.table;
        let mut rows = vec![Row::exact("h1(0)", t.values()[0], 1.0, Derived)];
        for &(u, n) in &self.identity {
            let id = renewal_identity(&est, u, n, self.walks, &key.child(&format!("identity u={u} n={n}")))?;
            rows.push(Row::z_raw(format!("renewal identity, u={u}, n={n}"), id.rhs, id.se, id.lhs, 4.0, Paper));
            rows.push(Row::z_raw(format!("endpoint-only form, u={u}, n={n}"), id.endpoint_only, id.endpoint_only_se, id.lhs, 4.0, Derived).ungated());
        }
        let fit = t.fit();
        rows.push(Row::above("R^2 of the linear fit on [5, 50]", fit.r_squared, 0.99, Paper));
        rows.push(Row::info("c0", est.c0_hat, Derived));
        rows.push(Row::info("theta", est.theta_hat, Derived));
        let (lo, hi) = t.linear_bounds();
        rows.push(Row::info("R (lower linear bound)", lo, Paper));
        rows.push(Row::info("R' (upper linear bound)", hi, Paper));
        rows.push(Row::info("excursions cut at the step cap", est.censored as f64, Derived));
        if let Some(shift) = est.horizon_shift {
            rows.push(Row::below("change with a doubled cap, in standard errors", shift, 0.5, Derived));
        }
        rows.push(Row::z("step variance", est.step_variance, 2.0 * est.a, 5.0, Derived));

        let pers = persistence_check(&est, &self.persistence_u, self.persistence_n, self.persistence_reps, &key.child("persistence"))?;
        let mut ptable = Table::new("persistence", &["u", "n", "probability", "se", "predicted"]);
        for row in &pers {
            rows.push(
                Row::window(format!("persistence ratio, u={}, n={}", row.u, row.n), row.ratio(), 0.9, 1.1, Paper)
                    .with_target(1.0)
                    .with_se(row.probability.se / row.predicted),
            );
            ptable.push(cells![row.u, row.n, row.probability.mean, row.probability.se, row.predicted]);
        }
        let probs: Vec<f64> = pers.iter().map(|r| r.probability.mean).collect();
        if probs.len() >= 3 {
            rows.push(Row::trend("persistence over u", &probs, Direction::Increasing, Trivial));
        }

        let mut h1 = Table::new("h1", &["u", "h1_hat", "se"]);
        for ((u, h), se) in t.u_grid().iter().zip(t.values()).zip(t.standard_errors()) {
            h1.push(cells![u, h, se]);
        }
        Ok(Output { rows, tables: vec![h1, ptable] })
    }
}

struct Meander {
    a: f64,
    n: usize,
    eta: f64,
    accepted: usize,
}

impl Meander {
    fn parse(p: &mut Params) -> Result<Self> {
        Ok(Self {
            a: p.take("a", 1.0)?,
            n: p.take("n", 4096)?,
            eta: p.take("eta", 1.0)?,
            accepted: positive_count(p, "replicas", 100_000)? as usize,
        })
    }
}

impl Experiment for Meander {
    fn run(&self, key: &StreamKey) -> Result<Output> {
        let rep = meander_test(self.n, self.a, self.eta, self.accepted, key)?;
        let f_one = rep.endpoints.iter().map(|x| TestFunction::One.eval(2f64.sqrt() * x)).sum::<f64>() / rep.endpoints.len() as f64;
        let rows = vec![
            Row::below("KS endpoint vs Rayleigh", rep.ks, 0.03, Derived),
            Row::exact("E F(sqrt2 endpoint), F = one", f_one, 1.0, Trivial),
            Row::z("E endpoint", rep.mean, (PI / 2.0).sqrt(), 4.0, Derived).ungated(),
            Row::info("acceptance rate", rep.acceptance_rate, Derived),
        ];
        let mut t = Table::new("endpoints", &["replica", "endpoint"]);
        for (i, x) in rep.endpoints.iter().enumerate() {
            t.push(cells![i, x]);
        }
        Ok(Output { rows, tables: vec![t] })
    }
}

struct SpinalConsistency {
    branching: u32,
    depths: Vec<u32>,
    eta: f64,
    replicas: u64,
    oracle_replicas: u64,
    sequences: usize,
    dump: usize,
}

impl SpinalConsistency {
    fn parse(p: &mut Params) -> Result<Self> {
        let depths = depths_param(p, &[4, 8])?;
        if depths.iter().any(|&d| d == 0 || d > 12) {
            return Err(Error::Schema("`depths` must lie in 1..=12 for brute-force trees".into()));
        }
        Ok(Self {
            branching: p.take("branching", 2)?,
            depths,
            eta: p.take("eta", 1.0)?,
            replicas: positive_count(p, "replicas", 20_000)?,
            oracle_replicas: positive_count(p, "oracle_replicas", 200_000)?,
            sequences: p.take("sequences", 2000)?,
            dump: p.take("dump", 1000)?,
        })
    }
}

type Functional = Box<dyn Fn(&CascadeStats) -> f64 + Sync>;

impl Experiment for SpinalConsistency {
    fn run(&self, key: &StreamKey) -> Result<Output> {
        let a = (self.branching as f64).ln();
        let mut settings = LadderSettings::new(a);
        settings.sequences = self.sequences;
        let est = estimate_h1(&settings, &key.child("h1"))?;
        let norm = est.table.eval(2.0 * self.eta);
        let functionals: Vec<(&str, Functional)> = vec![
            ("1{D_trunc <= h1(2 eta)}", Box::new(move |s| f64::from(u8::from(s.d_trunc <= norm)))),
            ("exp(-M)", Box::new(|s| (-s.m).exp())),
            ("1{D > 0}", Box::new(|s| f64::from(u8::from(s.d > 0.0)))),
        ];
        let refs: Vec<&(dyn Fn(&CascadeStats) -> f64 + Sync)> = functionals.iter().map(|(_, f)| f.as_ref()).collect();
        let mut rows = Vec::new();
        let mut table = Table::new("spine", &["replica", "step", "S"]);
        for &d in &self.depths {
            let mut config = CascadeConfig::new(self.branching, d, 2.0, 0);
            config.truncation = Some(Truncation { eta: self.eta, h1: est.table.clone() });
            let (oracle, normalisation) =
                crate::spine::importance_oracle(&config, &refs, self.oracle_replicas, &key.child(&format!("oracle {d}")))?;
            let sampler = SpinalSampler::new(&config, self.eta)?;
            let samples = replicate(self.replicas, &key.child(&format!("spinal {d}")), |rng| sampler.sample(rng))?;
            let floor = -2.0 * self.eta;
            let violations = samples.iter().filter(|s| s.spine.iter().any(|&x| x < floor)).count();
            rows.push(Row::exact(format!("depth {d}: spine below -2 eta"), violations as f64, 0.0, Trivial));
            for ((name, f), o) in functionals.iter().zip(&oracle) {
                let e = estimate(&samples.iter().map(|s| f(&s.stats)).collect::<Vec<_>>());
                let se = (e.se * e.se + o.se * o.se).sqrt();
                rows.push(Row::z_raw(format!("depth {d}: E_Q {name}"), e.mean, se, o.mean, 4.0, Derived));
            }
            rows.push(Row::z(format!("depth {d}: E D_trunc / h1(2 eta)"), normalisation, 1.0, 4.0, Derived).ungated());
            let proposals: u64 = samples.iter().map(|s| s.proposals).sum();
            rows.push(Row::info(format!("depth {d}: acceptance rate"), samples.len() as f64 / proposals as f64, Derived));
            if d == *self.depths.last().unwrap() {
                for (r, s) in samples.iter().enumerate().take(self.dump) {
                    for (i, x) in s.spine.iter().enumerate() {
                        table.push(cells![r, i, x]);
                    }
                }
            }
        }
        Ok(Output { rows, tables: vec![table] })
    }
}
