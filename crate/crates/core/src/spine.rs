//! The distinguished line of the size-biased cascade.
//!
//! Tilting an FPS child by its own weight `e^{γΔh − (γ²/2)Δs}` turns the
//! hitting time `a²/Z²` into an inverse-Gaussian time with mean `a/γ` and
//! shape `a²`. Along the line the coordinate `S = −2(h − γs)` then moves by
//! `−2a + 2γτ`, a zero-mean step with variance `4a/γ` (`2a` at `γ = 2`).
//!
//! At `γ = 2` this module also estimates the renewal function of the strict
//! descending ladder process, checks persistence and meander asymptotics and
//! samples trees under the truncated derivative measure.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, InverseGaussian};
use rayon::prelude::*;

use crate::cascade::{run_cascade_multi, Accumulator, CascadeConfig, CascadeStats, Engine, IncrementLaw, Node};
use crate::error::{Error, Result};
use crate::renewal::H1Table;
use crate::rng::{from_seed, Rng, StreamKey};
use crate::stats::{ks_statistic, mean, rayleigh_cdf, weighted_ratio, Estimate};

/// Step budget of [`simulate_spine`].
pub const SPINE_STEP_BUDGET: u64 = 1_000_000_000;

/// Acceptance rates below this abort conditioned sampling.
pub const ACCEPTANCE_FLOOR: f64 = 1e-4;

fn inverse_gaussian(mean: f64, shape: f64) -> Result<InverseGaussian<f64>> {
    InverseGaussian::new(mean, shape).map_err(|e| Error::Domain(format!("inverse Gaussian({mean}, {shape}): {e}")))
}

/// Tilted decrement `Δs`: inverse Gaussian with mean `a/γ`, shape `a²`.
pub fn sample_tilted_increment(a: f64, gamma: f64, rng: &mut Rng) -> Result<f64> {
    if !(a > 0.0 && gamma > 0.0) {
        return Err(Error::Domain(format!("need a, gamma > 0, got a = {a}, gamma = {gamma}")));
    }
    Ok(inverse_gaussian(a / gamma, a * a)?.sample(rng))
}

/// Steps of the line coordinate `S` at a fixed `a` and `γ`.
#[derive(Debug, Clone, Copy)]
pub struct SpineStepper {
    pub a: f64,
    pub gamma: f64,
    law: InverseGaussian<f64>,
}

impl SpineStepper {
    pub fn new(a: f64, gamma: f64) -> Result<Self> {
        if !(a > 0.0 && gamma > 0.0) {
            return Err(Error::Domain(format!("need a, gamma > 0, got a = {a}, gamma = {gamma}")));
        }
        Ok(Self { a, gamma, law: inverse_gaussian(a / gamma, a * a)? })
    }

    pub fn critical(a: f64) -> Result<Self> {
        Self::new(a, 2.0)
    }

    pub fn tilted_time(&self, rng: &mut Rng) -> f64 {
        self.law.sample(rng)
    }

    /// `−2a + 2γτ`.
    pub fn step(&self, rng: &mut Rng) -> f64 {
        -2.0 * self.a + 2.0 * self.gamma * self.law.sample(rng)
    }

    /// `4a/γ`.
    pub fn variance(&self) -> f64 {
        4.0 * self.a / self.gamma
    }
}

/// Recorded walks: `paths[r][k] = S_k` of replica `r`, with `S_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpineWalk {
    pub a: f64,
    pub gamma: f64,
    pub seed: u64,
    pub paths: Vec<Vec<f64>>,
}

/// `reps` walks of `n` steps at `γ = 2`.
pub fn simulate_spine(n: usize, a: f64, reps: usize, seed: u64) -> Result<SpineWalk> {
    if (n as u64).saturating_mul(reps as u64) > SPINE_STEP_BUDGET {
        return Err(Error::Config(format!("{n} steps x {reps} walks exceeds the budget of {SPINE_STEP_BUDGET} steps")));
    }
    let stepper = SpineStepper::critical(a)?;
    let key = StreamKey::new(seed, "spine");
    let paths = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = key.stream(r);
            let mut s = 0.0;
            let mut path = Vec::with_capacity(n + 1);
            path.push(0.0);
            for _ in 0..n {
                s += stepper.step(&mut rng);
                path.push(s);
            }
            path
        })
        .collect();
    Ok(SpineWalk { a, gamma: 2.0, seed, paths })
}

/// Endpoints `S_n` of `reps` walks, without storing paths.
pub fn spine_endpoints(stepper: &SpineStepper, n: usize, reps: u64, key: &StreamKey) -> Vec<f64> {
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = key.stream(r);
            (0..n).map(|_| stepper.step(&mut rng)).sum()
        })
        .collect()
}

/// Settings of the ladder-height estimate of `h1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderSettings {
    pub a: f64,
    pub u_step: f64,
    pub u_max: f64,
    pub fit_range: (f64, f64),
    /// Steps after which one excursion above the running minimum is cut.
    pub excursion_cap: u64,
    pub sequences: usize,
    /// Excursions in the pool used to complete cut excursions.
    pub pool_size: usize,
    /// Repeat with twice the cap on the same streams and bound the change.
    pub horizon_control: bool,
}

impl LadderSettings {
    pub fn new(a: f64) -> Self {
        Self {
            a,
            u_step: 0.5,
            u_max: 50.0,
            fit_range: (5.0, 50.0),
            excursion_cap: 1_000_000,
            sequences: 2000,
            pool_size: 20_000,
            horizon_control: true,
        }
    }
}

/// Ladder-height estimate of `h1` with its fitted constants.
#[derive(Debug, Clone)]
pub struct RenewalEstimate {
    pub a: f64,
    pub table: Arc<H1Table>,
    /// Cumulative ladder depths of every sequence.
    pub sequences: Vec<Vec<f64>>,
    pub c0_hat: f64,
    /// `1 / (c0 √(πa))`, the persistence constant for step variance `2a`.
    pub theta_hat: f64,
    pub excursions: u64,
    pub censored: u64,
    /// Largest change of the table when the cap is doubled, in standard
    /// errors of the table.
    pub horizon_shift: Option<f64>,
    /// Empirical step variance, checked against `2a`.
    pub step_variance: Estimate,
    merged: Vec<f64>,
}

impl RenewalEstimate {
    /// Mean count `1 + #{H_k <= x}` over the sequences, without interpolation.
    pub fn exact(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        1.0 + self.merged.partition_point(|&h| h <= x) as f64 / self.sequences.len() as f64
    }
}

/// Weighted pool for the stationary excess of the ladder height: pick a
/// height with probability proportional to its size, then a uniform
/// fraction of it.
#[derive(Debug, Clone)]
struct ExcessPool {
    heights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl ExcessPool {
    fn new(heights: Vec<f64>) -> Result<Self> {
        if heights.is_empty() {
            return Err(Error::Assertion("empty ladder-height pool".into()));
        }
        let mut acc = 0.0;
        let cumulative = heights
            .iter()
            .map(|h| {
                acc += h;
                acc
            })
            .collect();
        Ok(Self { heights, cumulative })
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        let total = *self.cumulative.last().unwrap();
        let x = rng.random::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= x).min(self.heights.len() - 1);
        self.heights[i] * rng.random::<f64>()
    }
}

/// One excursion from the running minimum: steps until the walk first goes
/// strictly below its start. Returns the depth below the start, or `None`
/// when `cap` steps pass first.
fn ladder_height(stepper: &SpineStepper, cap: u64, rng: &mut Rng) -> Option<f64> {
    let mut s = 0.0;
    for _ in 0..cap {
        s += stepper.step(rng);
        if s < 0.0 {
            return Some(-s);
        }
    }
    None
}

fn ladder_sequence(
    stepper: &SpineStepper,
    settings: &LadderSettings,
    cap: u64,
    pool: &ExcessPool,
    key: &StreamKey,
) -> (Vec<f64>, u64, u64) {
    let mut depth = 0.0;
    let mut seq = Vec::new();
    let mut censored = 0;
    let mut j = 0u64;
    while depth <= settings.u_max {
        let mut rng = key.stream(j);
        let h = match ladder_height(stepper, cap, &mut rng) {
            Some(h) => h,
            None => {
                censored += 1;
                pool.sample(&mut rng)
            }
        };
        depth += h;
        seq.push(depth);
        j += 1;
    }
    (seq, j, censored)
}

/// Estimates `h1` at `γ = 2` from independent ladder sequences.
pub fn estimate_h1(settings: &LadderSettings, key: &StreamKey) -> Result<RenewalEstimate> {
    let stepper = SpineStepper::critical(settings.a)?;
    let pool_key = key.child("pool");
    let heights: Vec<f64> = (0..settings.pool_size as u64)
        .into_par_iter()
        .filter_map(|j| ladder_height(&stepper, settings.excursion_cap, &mut pool_key.stream(j)))
        .collect();
    let pool = ExcessPool::new(heights)?;

    let run = |cap: u64| {
        (0..settings.sequences)
            .into_par_iter()
            .map(|i| ladder_sequence(&stepper, settings, cap, &pool, &key.child(&format!("sequence {i}"))))
            .collect::<Vec<_>>()
    };
    let results = run(settings.excursion_cap);
    let excursions = results.iter().map(|r| r.1).sum();
    let censored = results.iter().map(|r| r.2).sum();
    let sequences: Vec<Vec<f64>> = results.into_iter().map(|r| r.0).collect();
    let table = H1Table::from_sequences(&sequences, settings.u_step, settings.u_max, settings.fit_range)?;
    table.check()?;

    let horizon_shift = if settings.horizon_control {
        let doubled: Vec<Vec<f64>> = run(2 * settings.excursion_cap).into_iter().map(|r| r.0).collect();
        let control = H1Table::from_sequences(&doubled, settings.u_step, settings.u_max, settings.fit_range)?;
        let shift = table
            .values()
            .iter()
            .zip(control.values())
            .zip(table.standard_errors())
            .filter(|(_, &se)| se > 0.0)
            .map(|((x, y), se)| (x - y).abs() / se)
            .fold(0.0, f64::max);
        if shift >= 0.5 {
            return Err(Error::Assertion(format!(
                "doubling the excursion cap moves h1 by {shift:.2} standard errors; raise the cap"
            )));
        }
        Some(shift)
    } else {
        None
    };

    let step_variance = {
        let mut rng = key.child("variance").stream(0);
        let sq: Vec<f64> = (0..200_000).map(|_| stepper.step(&mut rng).powi(2)).collect();
        Estimate::from_samples(&sq)
    };
    let sigma2 = stepper.variance();
    if (step_variance.mean - sigma2).abs() > 5.0 * step_variance.se {
        return Err(Error::Assertion(format!(
            "empirical step variance {:.4} ± {:.4} disagrees with 2a = {sigma2}",
            step_variance.mean, step_variance.se
        )));
    }

    let c0_hat = table.c0();
    let mut merged: Vec<f64> = sequences.iter().flatten().copied().collect();
    merged.sort_by(f64::total_cmp);
    Ok(RenewalEstimate {
        merged,
        a: settings.a,
        theta_hat: 1.0 / (c0_hat * (PI * settings.a).sqrt()),
        c0_hat,
        table: Arc::new(table),
        sequences,
        excursions,
        censored,
        horizon_shift,
        step_variance,
    })
}

/// Both sides of the one-step-harmonic identity iterated `n` times.
#[derive(Debug, Clone, PartialEq)]
pub struct RenewalIdentity {
    pub u: f64,
    pub n: usize,
    pub lhs: f64,
    /// `E[h1(S_n + u) 1{S_k + u >= 0 for all k <= n}]`.
    pub rhs: f64,
    pub se: f64,
    /// `E[h1(S_n + u) 1{S_n + u >= 0}]`, without the running minimum.
    pub endpoint_only: f64,
    pub endpoint_only_se: f64,
}

/// Checks `h1(u) = E[h1(S_n+u); walk stays above −u]` with independent
/// walks. The error combines the walk noise with the sequence noise of the
/// difference, paired sequence by sequence.
pub fn renewal_identity(est: &RenewalEstimate, u: f64, n: usize, walks: u64, key: &StreamKey) -> Result<RenewalIdentity> {
    let stepper = SpineStepper::critical(est.a)?;
    let ends: Vec<(f64, bool)> = (0..walks)
        .into_par_iter()
        .map(|r| {
            let mut rng = key.stream(r);
            let mut s = u;
            let mut alive = true;
            for _ in 0..n {
                s += stepper.step(&mut rng);
                alive &= s >= 0.0;
            }
            (s, alive)
        })
        .collect();
    let killed: Vec<f64> = ends.iter().map(|&(x, alive)| if alive { est.exact(x) } else { 0.0 }).collect();
    let endpoint: Vec<f64> = ends.iter().map(|&(x, _)| est.exact(x)).collect();
    let walk_k = Estimate::from_samples(&killed);
    let walk_e = Estimate::from_samples(&endpoint);

    // Sequence noise: d_i = N_i(u) − mean over walks of N_i(X), on a subsample of walks.
    let sub: Vec<(f64, bool)> = ends.iter().copied().take(2000).collect();
    let count = |seq: &Vec<f64>, x: f64| if x < 0.0 { 0.0 } else { 1.0 + seq.partition_point(|&h| h <= x) as f64 };
    let (dk, de): (Vec<f64>, Vec<f64>) = est
        .sequences
        .par_iter()
        .map(|seq| {
            let own = count(seq, u);
            let gk = mean(&sub.iter().map(|&(x, alive)| if alive { count(seq, x) } else { 0.0 }).collect::<Vec<_>>());
            let ge = mean(&sub.iter().map(|&(x, _)| count(seq, x)).collect::<Vec<_>>());
            (own - gk, own - ge)
        })
        .unzip();
    let seq_k = Estimate::from_samples(&dk).se;
    let seq_e = Estimate::from_samples(&de).se;
    Ok(RenewalIdentity {
        u,
        n,
        lhs: est.exact(u),
        rhs: walk_k.mean,
        se: (walk_k.se.powi(2) + seq_k.powi(2)).sqrt(),
        endpoint_only: walk_e.mean,
        endpoint_only_se: (walk_e.se.powi(2) + seq_e.powi(2)).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceRow {
    pub u: f64,
    pub n: usize,
    pub probability: Estimate,
    /// `θ̂ h1(u) / √n`.
    pub predicted: f64,
}

impl PersistenceRow {
    pub fn ratio(&self) -> f64 {
        self.probability.mean / self.predicted
    }
}

/// Monte Carlo `P(min_{1≤i≤n} S_i ≥ −u)` for every `u` in `us`, all from
/// the same walks. Walks stop once below `−max(us)`.
pub fn persistence_check(est: &RenewalEstimate, us: &[f64], n: usize, reps: u64, key: &StreamKey) -> Result<Vec<PersistenceRow>> {
    if us.iter().any(|&u| u < 0.0) || us.is_empty() {
        return Err(Error::Domain("persistence levels must be nonnegative".into()));
    }
    let stepper = SpineStepper::critical(est.a)?;
    let floor = -us.iter().copied().fold(0.0, f64::max);
    let minima: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = key.stream(r);
            let mut s = 0.0;
            let mut min = f64::INFINITY;
            for _ in 0..n {
                s += stepper.step(&mut rng);
                min = min.min(s);
                if min < floor {
                    break;
                }
            }
            min
        })
        .collect();
    Ok(us
        .iter()
        .map(|&u| {
            let hits: Vec<f64> = minima.iter().map(|&m| if m >= -u { 1.0 } else { 0.0 }).collect();
            PersistenceRow {
                u,
                n,
                probability: Estimate::from_samples(&hits),
                predicted: est.theta_hat * est.table.eval(u) / (n as f64).sqrt(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanderReport {
    pub n: usize,
    pub eta: f64,
    /// `S_n / √(2an)` of the accepted walks.
    pub endpoints: Vec<f64>,
    pub ks: f64,
    pub mean: Estimate,
    pub acceptance_rate: f64,
}

/// Walks of `n` steps conditioned on `min S ≥ −2η` by rejection, until
/// `accepted` endpoints are collected.
pub fn meander_test(n: usize, a: f64, eta: f64, accepted: usize, key: &StreamKey) -> Result<MeanderReport> {
    if !(eta > 0.0) || n == 0 || accepted == 0 {
        return Err(Error::Domain("need eta > 0, n >= 1 and accepted >= 1".into()));
    }
    let stepper = SpineStepper::critical(a)?;
    let floor = -2.0 * eta;
    let batch = 4096u64;
    let mut endpoints = Vec::with_capacity(accepted);
    let mut tried = 0u64;
    let mut next = 0u64;
    while endpoints.len() < accepted {
        let ends: Vec<Option<f64>> = (next..next + batch)
            .into_par_iter()
            .map(|r| {
                let mut rng = key.stream(r);
                let mut s = 0.0;
                for _ in 0..n {
                    s += stepper.step(&mut rng);
                    if s < floor {
                        return None;
                    }
                }
                Some(s)
            })
            .collect();
        for e in ends {
            if endpoints.len() == accepted {
                break;
            }
            tried += 1;
            if let Some(s) = e {
                endpoints.push(s / (2.0 * a * n as f64).sqrt());
            }
        }
        next += batch;
        let rate = endpoints.len() as f64 / tried as f64;
        if tried >= 1_000_000 && rate < ACCEPTANCE_FLOOR {
            return Err(Error::AcceptanceTooLow { rate, floor: ACCEPTANCE_FLOOR });
        }
    }
    Ok(MeanderReport {
        n,
        eta,
        ks: ks_statistic(&endpoints, rayleigh_cdf),
        mean: Estimate::from_samples(&endpoints),
        acceptance_rate: endpoints.len() as f64 / tried as f64,
        endpoints,
    })
}

/// A tree drawn under the truncated derivative measure, with its line.
#[derive(Debug, Clone)]
pub struct SpinalSample {
    pub stats: CascadeStats,
    /// `S_0, …, S_n` along the distinguished line.
    pub spine: Vec<f64>,
    /// Proposals drawn before this one was accepted, itself included.
    pub proposals: u64,
}

/// Sampler of trees whose law is the cascade law reweighted by
/// `D_trunc / h1(2η)`.
///
/// The line is proposed from the Doob transform of the tilted walk by the
/// linear function `ℓ(y) = y + 2an + 1`, harmonic for a zero-mean walk and
/// positive on every reachable position. A proposal is accepted with
/// probability `h1(S_n + 2η) 1{min S ≥ −2η} / (B ℓ(S_n))` with `B` the
/// supremum of that ratio, so the accepted line has exactly the law of the
/// tilted walk reweighted by `h1(S_n + 2η) 1{min S ≥ −2η}`. Each node of the
/// line gets `b − 1` siblings carrying untilted subtrees.
#[derive(Debug, Clone)]
pub struct SpinalSampler {
    config: CascadeConfig,
    eta: f64,
    table: Arc<H1Table>,
    stepper: SpineStepper,
    offset: f64,
    bound: f64,
}

impl SpinalSampler {
    pub fn new(config: &CascadeConfig, eta: f64) -> Result<Self> {
        config.validate()?;
        if config.law != IncrementLaw::Fps || config.gamma != 2.0 || !config.is_critical_coupling() {
            return Err(Error::Config("the spinal sampler needs an FPS cascade at gamma = 2 with a = log b".into()));
        }
        let Some(trunc) = &config.truncation else {
            return Err(Error::Config("the spinal sampler needs an h1 table".into()));
        };
        if !(eta > 0.0) {
            return Err(Error::Config("eta must be positive".into()));
        }
        let mut config = config.clone();
        config.truncation = Some(crate::cascade::Truncation { eta, h1: trunc.h1.clone() });
        let a = config.a;
        let offset = 2.0 * a * config.depth as f64 + 1.0;
        let bound = trunc.h1.sup_ratio_to_line(2.0 * eta, offset);
        Ok(Self { table: trunc.h1.clone(), stepper: SpineStepper::critical(a)?, eta, offset, bound, config })
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.config
    }

    fn propose_line(&self, rng: &mut Rng) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
        let a = self.config.a;
        let n = self.config.depth as usize;
        let mu = 0.5 * a;
        let floor = -2.0 * self.eta;
        let mut s = 0.0;
        let mut line = Vec::with_capacity(n + 1);
        let mut times = Vec::with_capacity(n);
        line.push(0.0);
        for _ in 0..n {
            // Step density ∝ f(τ)(c + 4τ), a mixture of f and its size-biased
            // version, which is the law of μ²/τ.
            let c = s + self.offset - 2.0 * a;
            let tau = self.stepper.tilted_time(rng);
            let tau = if rng.random::<f64>() * (c + 4.0 * mu) < c { tau } else { mu * mu / tau };
            times.push(tau);
            s += -2.0 * a + 4.0 * tau;
            line.push(s);
            if s < floor {
                return Ok(None);
            }
        }
        let accept = self.table.eval(s + 2.0 * self.eta) / ((s + self.offset) * self.bound);
        if accept > 1.0 + 1e-12 {
            return Err(Error::Assertion(format!("line acceptance ratio {accept} above one")));
        }
        Ok((rng.random::<f64>() < accept).then_some((line, times)))
    }

    /// One tree. Errors if the acceptance rate falls below
    /// [`ACCEPTANCE_FLOOR`] after a million proposals.
    pub fn sample(&self, rng: &mut Rng) -> Result<SpinalSample> {
        let mut proposals = 0u64;
        let (line, times) = loop {
            proposals += 1;
            if let Some(found) = self.propose_line(rng)? {
                break found;
            }
            if proposals >= 1_000_000 {
                return Err(Error::AcceptanceTooLow { rate: 1.0 / proposals as f64, floor: ACCEPTANCE_FLOOR });
            }
        };
        let floor = -2.0 * self.eta;
        if line.iter().any(|&s| s < floor) {
            return Err(Error::Assertion("accepted line goes below -2 eta".into()));
        }
        let c = &self.config;
        let n = c.depth;
        let mut acc = Accumulator::new(&[n], &[2.0]);
        let mut engine = Engine::new(c, &[2.0]);
        let mut node = Node::ROOT;
        for &tau in &times {
            for _ in 1..c.branching {
                let sibling = node.child(c.a, crate::cascade::sample_fps_time(c.a, rng));
                engine.grow(sibling, &mut acc, rng)?;
            }
            node = node.child(c.a, tau);
        }
        engine.visit(&node, &mut acc);
        let stats = acc.finish(c).remove(0).remove(0);
        Ok(SpinalSample { stats, spine: line, proposals })
    }
}

/// One tree from the spinal sampler, with `config.seed` as seed.
pub fn q_eta_spinal_sampler(config: &CascadeConfig, eta: f64, rng: &mut Rng) -> Result<SpinalSample> {
    SpinalSampler::new(config, eta)?.sample(rng)
}

/// Seeded single draw.
pub fn q_eta_spinal_sample_seeded(config: &CascadeConfig, eta: f64) -> Result<SpinalSample> {
    q_eta_spinal_sampler(config, eta, &mut from_seed(config.seed))
}

/// Cascade-law estimate of `E_Q[g]` as `E[g D_trunc] / E[D_trunc]`, for
/// several functionals at once, plus `E[D_trunc] / h1(2η)`.
pub fn importance_oracle(
    config: &CascadeConfig,
    functionals: &[&(dyn Fn(&CascadeStats) -> f64 + Sync)],
    replicas: u64,
    key: &StreamKey,
) -> Result<(Vec<Estimate>, Estimate)> {
    let Some(trunc) = &config.truncation else {
        return Err(Error::Config("the importance oracle needs an h1 table".into()));
    };
    let rows: Vec<CascadeStats> = (0..replicas)
        .into_par_iter()
        .map(|r| Ok(run_cascade_multi(config, &[config.depth], &[2.0], &mut key.stream(r))?.remove(0).remove(0)))
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = rows.iter().map(|s| s.d_trunc).collect();
    let estimates = functionals
        .iter()
        .map(|g| weighted_ratio(&rows.iter().map(|s| g(s)).collect::<Vec<_>>(), &weights))
        .collect();
    let norm = trunc.h1.eval(2.0 * trunc.eta);
    let normalisation = Estimate::from_samples(&weights.iter().map(|w| w / norm).collect::<Vec<_>>());
    Ok((estimates, normalisation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{sample_fps_time, Truncation};
    use crate::stats::{z_gate, hitting_time_cdf};

    #[test]
    fn tilted_increment_moments() {
        let mut rng = StreamKey::new(1, "ig").stream(0);
        let xs: Vec<f64> = (0..200_000).map(|_| sample_tilted_increment(1.0, 2.0, &mut rng).unwrap()).collect();
        let m = Estimate::from_samples(&xs);
        assert!(z_gate(m.mean, m.se, 0.5, 4.0), "{m:?}");
        let v = Estimate::from_samples(&xs.iter().map(|x| (x - 0.5).powi(2)).collect::<Vec<_>>());
        assert!(z_gate(v.mean, v.se, 0.125, 4.0), "{v:?}");
        let ys: Vec<f64> = (0..200_000).map(|_| sample_tilted_increment(1.0, 1.0, &mut rng).unwrap()).collect();
        let m1 = Estimate::from_samples(&ys);
        assert!(z_gate(m1.mean, m1.se, 1.0, 4.0));
        assert!(sample_tilted_increment(0.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn tilt_reweights_hitting_time() {
        let (a, g) = (1.0, 2.0);
        let mut rng = StreamKey::new(2, "com").stream(0);
        let tilted: Vec<f64> = (0..400_000)
            .map(|_| {
                let t = sample_tilted_increment(a, g, &mut rng).unwrap();
                (-g * a + 0.5 * g * g * t).exp() * f64::from(u8::from(t <= 1.0))
            })
            .collect();
        let e = Estimate::from_samples(&tilted);
        assert!(z_gate(e.mean, e.se, hitting_time_cdf(a, 1.0), 4.0), "{e:?}");
        let direct: Vec<f64> = (0..400_000).map(|_| f64::from(u8::from(sample_fps_time(a, &mut rng) <= 1.0))).collect();
        let d = Estimate::from_samples(&direct);
        assert!((e.mean - d.mean).abs() < 4.0 * (e.se.powi(2) + d.se.powi(2)).sqrt());
    }

    #[test]
    fn reciprocal_is_size_biased() {
        // μ²/X for X ~ IG(μ, λ) has density τ f(τ) / μ.
        let (mu, lambda) = (0.5, 1.0);
        let law = inverse_gaussian(mu, lambda).unwrap();
        let mut rng = StreamKey::new(3, "sb").stream(0);
        let n = 400_000;
        let recip: Vec<f64> = (0..n).map(|_| mu * mu / law.sample(&mut rng)).collect();
        let plain: Vec<f64> = (0..n).map(|_| law.sample(&mut rng)).collect();
        for x in [0.2, 0.5, 1.0] {
            let r = Estimate::from_samples(&recip.iter().map(|&t| f64::from(u8::from(t <= x))).collect::<Vec<_>>());
            let w = Estimate::from_samples(&plain.iter().map(|&t| t / mu * f64::from(u8::from(t <= x))).collect::<Vec<_>>());
            assert!((r.mean - w.mean).abs() < 4.0 * (r.se.powi(2) + w.se.powi(2)).sqrt(), "{x}: {r:?} {w:?}");
        }
    }

    #[test]
    fn walk_moments_and_budget() {
        let walk = simulate_spine(50, 1.0, 4000, 9).unwrap();
        assert_eq!(walk.paths.len(), 4000);
        assert!(walk.paths.iter().all(|p| p.len() == 51 && p[0] == 0.0));
        let ends: Vec<f64> = walk.paths.iter().map(|p| p[50] / 50.0).collect();
        let e = Estimate::from_samples(&ends);
        assert!(e.mean.abs() < 4.0 * e.se);
        let v = Estimate::from_samples(&walk.paths.iter().map(|p| p[50] * p[50] / 50.0).collect::<Vec<_>>());
        assert!(z_gate(v.mean, v.se, 2.0, 4.0), "{v:?}");
        assert_eq!(simulate_spine(50, 1.0, 4000, 9).unwrap(), walk);
        assert!(matches!(simulate_spine(1_000_000, 1.0, 2000, 0), Err(Error::Config(_))));
        let s = SpineStepper::new(1.0, 1.0).unwrap();
        assert_eq!(s.variance(), 4.0);
    }

    fn small_estimate(a: f64) -> RenewalEstimate {
        let settings = LadderSettings {
            sequences: 400,
            excursion_cap: 1 << 14,
            pool_size: 2000,
            horizon_control: false,
            ..LadderSettings::new(a)
        };
        estimate_h1(&settings, &StreamKey::new(4, "h1")).unwrap()
    }

    #[test]
    fn renewal_table_shape() {
        let est = small_estimate(1.0);
        assert_eq!(est.table.values()[0], 1.0);
        assert!(est.table.values().windows(2).all(|w| w[1] >= w[0]));
        assert!(est.table.fit().r_squared > 0.99);
        assert!(est.sequences.iter().all(|s| s.windows(2).all(|w| w[1] > w[0]) && s[0] <= 2.0));
        assert!((est.exact(0.0) - 1.0).abs() < 1e-15);
        assert!(est.theta_hat > 0.0);
    }

    #[test]
    fn renewal_identity_holds_with_running_minimum() {
        let est = small_estimate(1.0);
        for u in [2.0, 5.0] {
            let r = renewal_identity(&est, u, 10, 20_000, &StreamKey::new(5, "rid")).unwrap();
            assert!((r.lhs - r.rhs).abs() < 4.0 * r.se, "{r:?}");
        }
    }

    #[test]
    fn meander_rejects_tiny_rates() {
        let err = meander_test(4096, 1.0, 1e-9, 10, &StreamKey::new(6, "m"));
        // A tiny eta still accepts at rate ~ h1(0)θ/√n, well above the floor.
        assert!(err.is_ok());
        assert!(meander_test(4096, 1.0, 0.0, 10, &StreamKey::new(6, "m")).is_err());
    }

    #[test]
    fn spinal_lines_respect_the_floor() {
        let est = small_estimate(2f64.ln());
        let config = CascadeConfig {
            truncation: Some(Truncation { eta: 0.5, h1: est.table.clone() }),
            ..CascadeConfig::new(2, 6, 2.0, 1)
        };
        let sampler = SpinalSampler::new(&config, 0.5).unwrap();
        let mut rng = StreamKey::new(7, "q").stream(0);
        for _ in 0..200 {
            let s = sampler.sample(&mut rng).unwrap();
            assert!(s.spine.iter().all(|&x| x >= -1.0));
            assert_eq!(s.spine.len(), 7);
            assert!(s.stats.d_trunc > 0.0);
            assert_eq!(s.stats.leaf_count, 64);
        }
        let bad = CascadeConfig { gamma: 1.0, ..config };
        assert!(SpinalSampler::new(&bad, 0.5).is_err());
    }
}
