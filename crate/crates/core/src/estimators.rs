//! Streaming overload-probability estimators with relative-error stopping.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::demand::{demand_into, impact, PreparedAsset, TimeSample};
use crate::sampling::{
    log_importance_weight, sample_assignment, sample_profiles, sample_times, sample_uniform_selection, ISParams,
    RngStream,
};
use crate::{Direction, Error, Result};

/// Single-pass mean and sum of squared deviations (Welford), mergeable with
/// Chan's parallel update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StreamStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl StreamStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, value: f64) {
        self.n += 1;
        let delta = value - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (value - self.mean);
    }

    pub fn merge(&self, other: &StreamStats) -> StreamStats {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.n as f64 / n as f64;
        let m2 = self.m2 + other.m2 + delta * delta * (self.n as f64 * other.n as f64) / n as f64;
        StreamStats { n, mean, m2 }
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn m2(&self) -> f64 {
        self.m2
    }

    /// Sample variance (n − 1 denominator); zero below two observations.
    pub fn variance(&self) -> f64 {
        if self.n > 1 {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        } else {
            0.0
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }
}

impl FromIterator<f64> for StreamStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = StreamStats::new();
        for v in iter {
            s.push(v);
        }
        s
    }
}

/// `σ̂ / (r̂ √n)`; `None` when undefined (fewer than two samples or a zero
/// estimate), which callers treat as not converged.
pub fn relative_error(stats: &StreamStats) -> Option<f64> {
    if stats.n < 2 || !(stats.mean > 0.0) {
        return None;
    }
    Some(stats.std_dev() / (stats.mean * (stats.n as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ref")]
    Ref,
    #[serde(rename = "mc")]
    Mc,
    #[serde(rename = "ce-is")]
    CeIs,
    #[serde(rename = "gen-is")]
    GenIs,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ref, Method::Mc, Method::CeIs, Method::GenIs];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ref => "ref",
            Method::Mc => "mc",
            Method::CeIs => "ce-is",
            Method::GenIs => "gen-is",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Time steps sampled per trace.
    pub m: usize,
    pub beta_target: f64,
    pub n_max: u64,
    /// Traces per convergence check.
    pub batch: usize,
    /// Evaluate every step instead of `m` sampled ones.
    pub full_year: bool,
    /// Evaluate the traces of a batch on the rayon pool. Results do not
    /// depend on this flag.
    pub parallel: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { m: 2_000, beta_target: 0.1, n_max: 20_000, batch: 50, full_year: false, parallel: true }
    }
}

impl EstimatorConfig {
    pub fn validate(&self, t_len: usize) -> Result<()> {
        if !self.full_year && (self.m < 1 || self.m > t_len) {
            return Err(Error::Config(format!("m = {} outside 1..={t_len}", self.m)));
        }
        if !(self.beta_target > 0.0) {
            return Err(Error::Config("beta_target must be positive".into()));
        }
        if self.n_max < 1 || self.batch < 1 {
            return Err(Error::Config("n_max and batch must be at least 1".into()));
        }
        Ok(())
    }

    pub(crate) fn draw_times<R: rand::Rng + ?Sized>(&self, t_len: usize, rng: &mut R) -> Result<TimeSample> {
        if self.full_year {
            Ok(TimeSample::Full(t_len))
        } else {
            sample_times(self.m, t_len, rng)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub method: Method,
    pub direction: Direction,
    pub r_hat: f64,
    /// Relative error; `None` while the estimate is zero.
    pub beta: Option<f64>,
    pub beta_target: f64,
    /// Traces in the final estimate.
    pub n: u64,
    /// All traces evaluated, including any optimization stage.
    pub evaluations: u64,
    /// Wall-clock seconds of the estimator call.
    pub elapsed: f64,
    pub converged: bool,
    pub zero_flagged: bool,
    /// Effective sample size `(ΣW)² / ΣW²` for weighted estimators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ess: Option<f64>,
    /// Cross-entropy iterations used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
}

impl RiskEstimate {
    /// Half-width `k·β·r̂` of the relative-error interval (zero when β is undefined).
    pub fn half_width(&self, k: f64) -> f64 {
        self.beta.map_or(0.0, |b| k * b * self.r_hat)
    }

    /// Whether `value` lies within `k·β·r̂` of the estimate.
    pub fn covers(&self, value: f64, k: f64) -> bool {
        (self.r_hat - value).abs() <= self.half_width(k)
    }
}

#[derive(Default)]
pub(crate) struct Scratch {
    pub demand: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Budget {
    /// Stop once `n >= max`, shortening the final batch to land on `max`.
    UpTo(u64),
    /// Stop once `n > limit`; batches are never shortened.
    Exceeding(u64),
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct WeightSums {
    pub sum: f64,
    pub sum_sq: f64,
}

impl WeightSums {
    pub fn push(&mut self, w: f64) {
        self.sum += w;
        self.sum_sq += w * w;
    }

    pub fn ess(&self) -> Option<f64> {
        (self.sum_sq > 0.0).then(|| self.sum * self.sum / self.sum_sq)
    }
}

pub(crate) struct BatchRun {
    pub stats: StreamStats,
    pub weights: WeightSums,
    pub converged: bool,
}

/// Evaluate traces in batches until the relative error drops below the
/// target or the budget runs out. `trace(j)` returns `(H·W, W)` for trace
/// counter `j`; per-batch results are folded in counter order, so parallel
/// and serial runs agree bit for bit.
pub(crate) fn run_batches<F>(
    batch: usize,
    beta_target: f64,
    budget: Budget,
    parallel: bool,
    trace: F,
) -> Result<BatchRun>
where
    F: Fn(u64, &mut Scratch) -> Result<(f64, f64)> + Sync,
{
    let mut stats = StreamStats::new();
    let mut weights = WeightSums::default();
    loop {
        let n = stats.n();
        let size = match budget {
            Budget::UpTo(max) => (batch as u64).min(max.saturating_sub(n)),
            Budget::Exceeding(_) => batch as u64,
        };
        let range = n..n + size;
        let results: Vec<(f64, f64)> = if parallel {
            range
                .into_par_iter()
                .map_init(Scratch::default, |s, j| trace(j, s))
                .collect::<Result<_>>()?
        } else {
            let mut s = Scratch::default();
            range.map(|j| trace(j, &mut s)).collect::<Result<_>>()?
        };
        for (value, w) in results {
            stats.push(value);
            weights.push(w);
        }

        if relative_error(&stats).is_some_and(|b| b < beta_target) {
            return Ok(BatchRun { stats, weights, converged: true });
        }
        let exhausted = match budget {
            Budget::UpTo(max) => stats.n() >= max,
            Budget::Exceeding(limit) => stats.n() > limit,
        };
        if exhausted {
            return Ok(BatchRun { stats, weights, converged: false });
        }
    }
}

pub(crate) fn finish(
    method: Method,
    direction: Direction,
    beta_target: f64,
    run: &BatchRun,
    evaluations: u64,
    started: Instant,
    weighted: bool,
) -> RiskEstimate {
    let r_hat = run.stats.mean().max(0.0);
    RiskEstimate {
        method,
        direction,
        r_hat,
        beta: relative_error(&run.stats),
        beta_target,
        n: run.stats.n(),
        evaluations,
        elapsed: started.elapsed().as_secs_f64(),
        converged: run.converged,
        zero_flagged: r_hat == 0.0,
        ess: if weighted { run.weights.ess() } else { None },
        iterations: None,
    }
}

fn run_plain(
    method: Method,
    asset: &PreparedAsset,
    corpus: &Corpus,
    direction: Direction,
    cfg: &EstimatorConfig,
    stream: &RngStream,
) -> Result<RiskEstimate> {
    let started = Instant::now();
    let t_len = corpus.t_len();
    cfg.validate(t_len)?;
    let run = run_batches(cfg.batch, cfg.beta_target, Budget::UpTo(cfg.n_max), cfg.parallel, |j, s| {
        let mut rng = stream.at(j);
        let pi = sample_uniform_selection(asset, corpus, &mut rng);
        let theta = cfg.draw_times(t_len, &mut rng)?;
        demand_into(asset, corpus, &pi.0, &theta, &mut s.demand);
        Ok((impact(&s.demand, asset.d_cap, direction), 1.0))
    })?;
    Ok(finish(method, direction, cfg.beta_target, &run, run.stats.n(), started, false))
}

/// Full-trace estimator: every trace is evaluated at all `T` steps.
pub fn run_reference(
    asset: &PreparedAsset,
    corpus: &Corpus,
    direction: Direction,
    cfg: &EstimatorConfig,
    stream: &RngStream,
) -> Result<RiskEstimate> {
    let cfg = EstimatorConfig { full_year: true, ..cfg.clone() };
    run_plain(Method::Ref, asset, corpus, direction, &cfg, stream)
}

/// Hierarchical Monte Carlo: uniform profile selections, `m` sampled steps.
pub fn run_mc(
    asset: &PreparedAsset,
    corpus: &Corpus,
    direction: Direction,
    cfg: &EstimatorConfig,
    stream: &RngStream,
) -> Result<RiskEstimate> {
    run_plain(Method::Mc, asset, corpus, direction, cfg, stream)
}

/// Evaluate one importance-sampled trace: `(H, W, x)` at threshold `d_cap`.
pub(crate) fn is_trace<R: rand::Rng + ?Sized>(
    asset: &PreparedAsset,
    corpus: &Corpus,
    params: &ISParams,
    cfg: &EstimatorConfig,
    rng: &mut R,
    scratch: &mut Scratch,
) -> Result<(crate::sampling::CategoryAssignment, f64)> {
    let x = sample_assignment(params, true, rng);
    let pi = sample_profiles(asset, corpus, &x, params.direction(), rng)?;
    let theta = cfg.draw_times(corpus.t_len(), rng)?;
    demand_into(asset, corpus, &pi.0, &theta, &mut scratch.demand);
    let w = log_importance_weight(&x, params).exp();
    Ok((x, w))
}

/// Importance-sampling estimator with fixed biased probabilities.
pub fn run_is(
    asset: &PreparedAsset,
    corpus: &Corpus,
    params: &ISParams,
    cfg: &EstimatorConfig,
    method: Method,
    stream: &RngStream,
) -> Result<RiskEstimate> {
    let started = Instant::now();
    cfg.validate(corpus.t_len())?;
    if params.len() != asset.n_s() {
        return Err(Error::Contract(format!(
            "{} IS parameters for {} group-1 customers",
            params.len(),
            asset.n_s()
        )));
    }
    let direction = params.direction();
    let run = run_batches(cfg.batch, cfg.beta_target, Budget::UpTo(cfg.n_max), cfg.parallel, |j, s| {
        let (_, w) = is_trace(asset, corpus, params, cfg, &mut stream.at(j), s)?;
        let h = impact(&s.demand, asset.d_cap, direction);
        Ok((h * w, w))
    })?;
    Ok(finish(method, direction, cfg.beta_target, &run, run.stats.n(), started, true))
}
