//! Multiplicative cascades on a `b`-ary tree.
//!
//! Every child receives an independent increment `(Δh, Δs)`: a height step
//! and a log-conformal-radius decrement. Leaves at depth `n` carry area
//! `root_mass · b^{-n}` and the functionals below are sums over leaves.
//!
//! Trees are traversed depth first with an explicit stack, so memory is
//! `O(depth · b)`. Deep trees are made tractable with an optional weight
//! floor (Russian roulette): a node whose weight falls below the floor is
//! kept with probability `weight / floor` and reweighted by the inverse of
//! that probability. Every leaf sum keeps its expectation.

use std::f64::consts::{FRAC_2_PI, PI};
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::error::{Error, Result};
use crate::quad::integrate;
use crate::renewal::H1Table;
use crate::rng::{from_seed, Rng};

/// Iteration guard of [`fps_via_tvs_embedding`].
pub const EMBEDDING_CAP: u64 = 1_000_000;

/// Default guard on the number of leaves of one tree.
pub const DEFAULT_LEAF_CAP: u64 = 1 << 26;

/// Switch point of the two series for the exit time of `[-1, 1]`. Both
/// series alternate with strictly decreasing terms on their side of it.
pub const EXIT_SERIES_SWITCH: f64 = FRAC_2_PI;

/// Law of one child increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IncrementLaw {
    /// `Δh = a`, `Δs` the first hitting time of `a` by Brownian motion.
    Fps,
    /// `Δh = ±a`, `Δs` the exit time of `[-a, a]`.
    Tvs,
}

impl IncrementLaw {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "fps" => Ok(Self::Fps),
            "tvs" => Ok(Self::Tvs),
            _ => Err(Error::Config(format!("unknown increment law `{name}` (expected fps or tvs)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Fps => "fps",
            Self::Tvs => "tvs",
        }
    }

    /// One draw of `(Δh, Δs)`.
    pub fn sample(self, a: f64, rng: &mut Rng) -> Result<(f64, f64)> {
        match self {
            Self::Fps => Ok((a, sample_fps_time(a, rng))),
            Self::Tvs => {
                let (sign, t) = sample_tvs_exit(a, rng)?;
                Ok((sign * a, t))
            }
        }
    }
}

/// First hitting time of `a > 0` by standard Brownian motion: `a² / Z²`.
pub fn sample_fps_time(a: f64, rng: &mut Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    a * a / (z * z)
}

/// Exit side and exit time of `[-a, a]` by standard Brownian motion.
pub fn sample_tvs_exit(a: f64, rng: &mut Rng) -> Result<(f64, f64)> {
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    Ok((sign, a * a * sample_unit_exit(rng)?))
}

const SMALL_ENVELOPE_MASS: f64 = 0.420_182_810_887_874_5;
const LARGE_ENVELOPE_MASS: f64 = 0.580_518_454_224_179_5;

fn small_term(k: usize, t: f64) -> f64 {
    let m = (2 * k + 1) as f64;
    2.0 * m / (2.0 * PI * t * t * t).sqrt() * (-m * m / (2.0 * t)).exp()
}

fn large_term(k: usize, t: f64) -> f64 {
    let m = (2 * k + 1) as f64;
    0.5 * PI * m * (-m * m * PI * PI * t / 8.0).exp()
}

/// Exit time of `[-1, 1]` by the alternating-series method. The envelope
/// is the leading term of the small-time series below the switch and of the
/// large-time series above it.
fn sample_unit_exit(rng: &mut Rng) -> Result<f64> {
    let cut = 1.0 / EXIT_SERIES_SWITCH.sqrt();
    let tail = Exp::new(PI * PI / 8.0).expect("positive rate");
    let p_small = SMALL_ENVELOPE_MASS / (SMALL_ENVELOPE_MASS + LARGE_ENVELOPE_MASS);
    loop {
        let small = rng.random::<f64>() < p_small;
        let t = if small {
            let z = normal_tail(cut, rng);
            1.0 / (z * z)
        } else {
            EXIT_SERIES_SWITCH + tail.sample(rng)
        };
        let term = |k| if small { small_term(k, t) } else { large_term(k, t) };
        let envelope = term(0);
        let y = rng.random::<f64>() * envelope;
        let mut partial = envelope;
        let mut previous = envelope;
        let mut k = 1;
        let accepted = loop {
            let next = term(k);
            if next >= previous {
                return Err(Error::Assertion(format!("exit-time series not decreasing at t = {t}, term {k}")));
            }
            if k % 2 == 1 {
                partial -= next;
                if y < partial {
                    break true;
                }
            } else {
                partial += next;
                if y > partial {
                    break false;
                }
            }
            previous = next;
            k += 1;
            if k > 64 {
                return Err(Error::Assertion(format!("exit-time series did not settle at t = {t}")));
            }
        };
        if accepted {
            return Ok(t);
        }
    }
}

/// `|Z|` conditioned on `|Z| > c` for `c > 0` (Marsaglia's tail method).
fn normal_tail(c: f64, rng: &mut Rng) -> f64 {
    loop {
        let x = -(1.0 - rng.random::<f64>()).ln() / c;
        let y = -(1.0 - rng.random::<f64>()).ln();
        if 2.0 * y > x * x {
            return c + x;
        }
    }
}

/// Runs two-sided steps of size `a` along one line until the height first
/// reaches `a · target_k`. Returns `(h, s)` with `s` the accumulated time.
pub fn fps_via_tvs_embedding(a: f64, target_k: u32, rng: &mut Rng) -> Result<(f64, f64)> {
    if !(a > 0.0) || target_k == 0 {
        return Err(Error::Domain(format!("need a > 0 and target_k >= 1, got a = {a}, k = {target_k}")));
    }
    let mut level: i64 = 0;
    let mut s = 0.0;
    for _ in 0..EMBEDDING_CAP {
        let (sign, t) = sample_tvs_exit(a, rng)?;
        level += sign as i64;
        s += t;
        if level == target_k as i64 {
            return Ok((a * target_k as f64, s));
        }
    }
    Err(Error::IterationCap { cap: EMBEDDING_CAP, h: a * level as f64, s })
}

/// Registered test functions `F` of the normalised spine position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestFunction {
    One,
    ExpNeg,
    Bump,
}

impl TestFunction {
    pub const ALL: [TestFunction; 3] = [Self::One, Self::ExpNeg, Self::Bump];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "one" => Ok(Self::One),
            "exp_neg" => Ok(Self::ExpNeg),
            "bump" => Ok(Self::Bump),
            _ => Err(Error::UnknownTestFunction(name.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::One => "one",
            Self::ExpNeg => "exp_neg",
            Self::Bump => "bump",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Self::One => 1.0,
            Self::ExpNeg => (-x.abs()).exp(),
            Self::Bump => (-(x - 1.0) * (x - 1.0)).exp(),
        }
    }

    /// Limit of `√n · K_F / D_S` for step variance `2a`, where `D_S` is the
    /// derivative martingale of the spine coordinate:
    /// `(πa)^{-1/2} ∫_0^∞ F(√(2a) x) x e^{-x²/2} dx`.
    pub fn seneta_heyde_limit(self, a: f64) -> f64 {
        let c = (2.0 * a).sqrt();
        let integral = integrate(|x| self.eval(c * x) * x * (-0.5 * x * x).exp(), 0.0, 12.0, 48, 16);
        integral / (PI * a).sqrt()
    }
}

/// Indicator-weighted variants use `h1(S + 2η)` on lines whose spine
/// coordinate never went below `-2η`.
#[derive(Debug, Clone)]
pub struct Truncation {
    pub eta: f64,
    pub h1: Arc<H1Table>,
}

#[derive(Debug, Clone)]
pub struct CascadeConfig {
    pub branching: u32,
    pub a: f64,
    pub depth: u32,
    pub gamma: f64,
    pub seed: u64,
    /// Without a weight floor: bound on `b^depth`, checked up front. With a
    /// floor: bound on the number of visited nodes, checked while running.
    pub leaf_cap: u64,
    pub root_mass: f64,
    pub law: IncrementLaw,
    pub prune_floor: Option<f64>,
    pub test_function: TestFunction,
    pub truncation: Option<Truncation>,
}

impl CascadeConfig {
    /// FPS cascade with `a = log b`, unit root mass and no pruning.
    pub fn new(branching: u32, depth: u32, gamma: f64, seed: u64) -> Self {
        Self {
            branching,
            a: (branching as f64).ln(),
            depth,
            gamma,
            seed,
            leaf_cap: DEFAULT_LEAF_CAP,
            root_mass: 1.0,
            law: IncrementLaw::Fps,
            prune_floor: None,
            test_function: TestFunction::One,
            truncation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branching < 2 {
            return Err(Error::Config(format!("branching must be at least 2, got {}", self.branching)));
        }
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::Config(format!("a must be positive, got {}", self.a)));
        }
        if !(self.root_mass > 0.0) {
            return Err(Error::Config("root_mass must be positive".into()));
        }
        if !self.gamma.is_finite() {
            return Err(Error::Config("gamma must be finite".into()));
        }
        match self.prune_floor {
            Some(f) if !(f > 0.0) => return Err(Error::Config("prune floor must be positive".into())),
            Some(_) => {}
            None => {
                let leaves = (self.branching as f64).powi(self.depth as i32);
                if leaves > self.leaf_cap as f64 {
                    return Err(Error::Config(format!(
                        "{}^{} leaves exceed leaf_cap {}; lower the depth or set a prune floor",
                        self.branching, self.depth, self.leaf_cap
                    )));
                }
            }
        }
        if let Some(t) = &self.truncation {
            if !(t.eta > 0.0) {
                return Err(Error::Config("eta must be positive".into()));
            }
        }
        Ok(())
    }

    /// Whether `a = log b`, the balance that puts the critical point at
    /// `γ = 2`.
    pub fn is_critical_coupling(&self) -> bool {
        (self.a - (self.branching as f64).ln()).abs() < 1e-12
    }
}

/// Leaf sums of one tree at one depth and one `γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeStats {
    pub depth: u32,
    pub gamma: f64,
    /// `Σ area · e^{γh − (γ²/2)s}`.
    pub m: f64,
    /// `Σ area · (−h + 2s) · e^{2h − 2s}`.
    pub d: f64,
    /// `Σ area · e^{2h − 2s} · F(S/√n)` for the configured `F`, `S = −2h + 4s`.
    pub k_f: f64,
    /// The same sum for every registered `F`, in [`TestFunction::ALL`] order.
    pub k_all: [f64; 3],
    /// `Σ area · e^{2h − 2s} · h1(S + 2η) · 1{min S ≥ −2η}`; NaN without truncation.
    pub d_trunc: f64,
    /// `Σ area · e^{2h − 2s} · F(S/√n) · 1{min S ≥ −2η}`; NaN without truncation.
    pub k_trunc: f64,
    pub leaf_count: u64,
}

impl CascadeStats {
    pub fn additive_martingale(&self) -> f64 {
        self.m
    }

    pub fn derivative_martingale(&self) -> f64 {
        self.d
    }

    /// `√n · K_F / (2D)`. `2D = Σ area · S · e^{2h−2s}` is the derivative
    /// martingale written in the spine coordinate, whose steps have variance
    /// `2a`.
    pub fn seneta_heyde_ratio(&self, f: TestFunction) -> f64 {
        (self.depth as f64).sqrt() * self.k_all[f.index()] / (2.0 * self.d)
    }
}

pub fn additive_martingale(stats: &CascadeStats) -> f64 {
    stats.m
}

pub fn derivative_martingale(stats: &CascadeStats) -> f64 {
    stats.d
}

/// `K_F` for a registered test function name.
pub fn kf_functional(stats: &CascadeStats, f: &str) -> Result<f64> {
    Ok(stats.k_all[TestFunction::parse(f)?.index()])
}

/// State of one tree node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Node {
    pub depth: u32,
    pub h: f64,
    pub s: f64,
    /// Running minimum of `S = −2h + 4s` along the line, `S_0 = 0` included.
    pub min_spine: f64,
    /// Roulette reweighting carried by the subtree.
    pub mult: f64,
}

impl Node {
    pub const ROOT: Node = Node { depth: 0, h: 0.0, s: 0.0, min_spine: 0.0, mult: 1.0 };

    pub fn spine(&self) -> f64 {
        -2.0 * self.h + 4.0 * self.s
    }

    pub fn child(&self, dh: f64, ds: f64) -> Node {
        let h = self.h + dh;
        let s = self.s + ds;
        Node { depth: self.depth + 1, h, s, min_spine: self.min_spine.min(-2.0 * h + 4.0 * s), mult: self.mult }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    d: f64,
    k: [f64; 3],
    d_trunc: f64,
    k_trunc: f64,
    leaves: u64,
}

/// Leaf sums at several depths and several `γ`, filled by one traversal.
#[derive(Debug, Clone)]
pub(crate) struct Accumulator {
    depths: Vec<u32>,
    gammas: Vec<f64>,
    slot_of_depth: Vec<Option<usize>>,
    slots: Vec<Slot>,
}

impl Accumulator {
    pub fn new(depths: &[u32], gammas: &[f64]) -> Self {
        let max = depths.iter().copied().max().unwrap_or(0) as usize;
        let mut slot_of_depth = vec![None; max + 1];
        for (i, &d) in depths.iter().enumerate() {
            slot_of_depth[d as usize] = Some(i);
        }
        let slot = Slot { m: vec![0.0; gammas.len()], d: 0.0, k: [0.0; 3], d_trunc: 0.0, k_trunc: 0.0, leaves: 0 };
        Self { depths: depths.to_vec(), gammas: gammas.to_vec(), slot_of_depth, slots: vec![slot; depths.len()] }
    }

    pub fn max_depth(&self) -> u32 {
        (self.slot_of_depth.len() - 1) as u32
    }

    /// Rows ordered by depth, then `γ`, in the order they were requested.
    pub fn finish(&self, config: &CascadeConfig) -> Vec<Vec<CascadeStats>> {
        let truncated = config.truncation.is_some();
        self.depths
            .iter()
            .zip(&self.slots)
            .map(|(&depth, slot)| {
                self.gammas
                    .iter()
                    .zip(&slot.m)
                    .map(|(&gamma, &m)| CascadeStats {
                        depth,
                        gamma,
                        m,
                        d: slot.d,
                        k_f: slot.k[config.test_function.index()],
                        k_all: slot.k,
                        d_trunc: if truncated { slot.d_trunc } else { f64::NAN },
                        k_trunc: if truncated { slot.k_trunc } else { f64::NAN },
                        leaf_count: slot.leaves,
                    })
                    .collect()
            })
            .collect()
    }
}

/// Depth-first evaluation of trees for one configuration.
pub(crate) struct Engine<'a> {
    config: &'a CascadeConfig,
    log_b: f64,
    log_root: f64,
    gammas: Vec<f64>,
    visited: u64,
    stack: Vec<Node>,
}

impl<'a> Engine<'a> {
    pub fn new(config: &'a CascadeConfig, gammas: &[f64]) -> Self {
        Self {
            config,
            log_b: (config.branching as f64).ln(),
            log_root: config.root_mass.ln(),
            gammas: gammas.to_vec(),
            visited: 0,
            stack: Vec::new(),
        }
    }

    fn log_area(&self, depth: u32) -> f64 {
        self.log_root - depth as f64 * self.log_b
    }

    /// Applies the weight floor. Returns `false` if the node is dropped.
    fn roulette(&self, node: &mut Node, rng: &mut Rng) -> bool {
        let Some(floor) = self.config.prune_floor else { return true };
        let la = self.log_area(node.depth);
        let log_w = self
            .gammas
            .iter()
            .map(|g| la + g * node.h - 0.5 * g * g * node.s)
            .fold(f64::NEG_INFINITY, f64::max);
        let w = node.mult * log_w.exp();
        if w >= floor {
            return true;
        }
        if rng.random::<f64>() * floor < w {
            node.mult = floor / log_w.exp();
            true
        } else {
            false
        }
    }

    fn record(&self, node: &Node, acc: &mut Accumulator) {
        let Some(Some(i)) = acc.slot_of_depth.get(node.depth as usize).copied() else { return };
        let la = self.log_area(node.depth);
        let slot = &mut acc.slots[i];
        for (m, g) in slot.m.iter_mut().zip(&self.gammas) {
            *m += node.mult * (la + g * node.h - 0.5 * g * g * node.s).exp();
        }
        let crit = node.mult * (la + 2.0 * node.h - 2.0 * node.s).exp();
        slot.d += (-node.h + 2.0 * node.s) * crit;
        let spine = node.spine();
        let x = if node.depth == 0 { 0.0 } else { spine / (node.depth as f64).sqrt() };
        let fx = TestFunction::ALL.map(|f| f.eval(x));
        for (k, v) in slot.k.iter_mut().zip(fx) {
            *k += crit * v;
        }
        if let Some(t) = &self.config.truncation {
            if node.min_spine >= -2.0 * t.eta {
                slot.d_trunc += crit * t.h1.eval(spine + 2.0 * t.eta);
                slot.k_trunc += crit * fx[self.config.test_function.index()];
            }
        }
        slot.leaves += 1;
    }

    /// Adds `node` alone to `acc`.
    pub fn visit(&self, node: &Node, acc: &mut Accumulator) {
        self.record(node, acc);
    }

    /// Adds the subtree rooted at `node` (the node included) to `acc`.
    pub fn grow(&mut self, node: Node, acc: &mut Accumulator, rng: &mut Rng) -> Result<()> {
        let max_depth = acc.max_depth();
        self.stack.push(node);
        while let Some(mut node) = self.stack.pop() {
            if !self.roulette(&mut node, rng) {
                continue;
            }
            self.visited += 1;
            if self.config.prune_floor.is_some() && self.visited > self.config.leaf_cap {
                return Err(Error::Config(format!(
                    "node budget {} exhausted; raise the prune floor or leaf_cap",
                    self.config.leaf_cap
                )));
            }
            self.record(&node, acc);
            if node.depth < max_depth {
                for _ in 0..self.config.branching {
                    let (dh, ds) = self.config.law.sample(self.config.a, rng)?;
                    self.stack.push(node.child(dh, ds));
                }
            }
        }
        Ok(())
    }
}

/// One tree at `config.depth` and `config.gamma`, seeded by `config.seed`.
pub fn run_cascade(config: &CascadeConfig) -> Result<CascadeStats> {
    let mut rng = from_seed(config.seed);
    let rows = run_cascade_multi(config, &[config.depth], &[config.gamma], &mut rng)?;
    Ok(rows.into_iter().next().unwrap().into_iter().next().unwrap())
}

/// One tree evaluated at every depth in `depths` and every `γ` in `gammas`.
/// The tree is grown to the largest depth; shallower rows are partial sums
/// of the same tree. The weight floor, if any, acts on the largest of the
/// requested `γ` weights. `config.depth` and `config.gamma` are ignored.
pub fn run_cascade_multi(
    config: &CascadeConfig,
    depths: &[u32],
    gammas: &[f64],
    rng: &mut Rng,
) -> Result<Vec<Vec<CascadeStats>>> {
    if depths.is_empty() || gammas.is_empty() {
        return Err(Error::Config("need at least one depth and one gamma".into()));
    }
    let mut deepest = config.clone();
    deepest.depth = depths.iter().copied().max().unwrap();
    deepest.validate()?;
    let mut acc = Accumulator::new(depths, gammas);
    let mut engine = Engine::new(config, gammas);
    engine.grow(Node::ROOT, &mut acc, rng)?;
    Ok(acc.finish(config))
}

/// `E[M_n²]` of the FPS cascade with `a = log b` from the recursion
/// `m_n = (q/b) m_{n-1} + (1 − 1/b)`, `m_0 = 1`, `q = b^{2γ − γ√2}`.
/// `None` gives the fixed point.
pub fn fps_second_moment(branching: u32, gamma: f64, depth: Option<u32>) -> f64 {
    let b = branching as f64;
    let ratio = b.powf(2.0 * gamma - gamma * 2f64.sqrt()) / b;
    let fixed = (1.0 - 1.0 / b) / (1.0 - ratio);
    match depth {
        None => fixed,
        Some(n) => fixed + (1.0 - fixed) * ratio.powi(n as i32),
    }
}
