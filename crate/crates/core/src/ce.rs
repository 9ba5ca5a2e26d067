//! Sequential cross-entropy optimization of the spiky-category probabilities,
//! followed by batched importance-sampling estimation.
//!
//! Each optimization iteration draws `n_opt` traces under the current biased
//! probabilities, raises an intermediate threshold `d_opt` to the `(1 − ρ)`
//! quantile of the per-trace maximum loads, and re-estimates the Bernoulli
//! parameters from the weighted elite traces (those loading the asset at or
//! above `d_opt`, or strictly above `d_cap` once `d_opt` reaches it). The
//! update is smoothed with weight `α` and clamped to `[1 − q_spiky, 0.9]`.
//! Once `d_opt > d_cap` the parameters are frozen and the estimator runs
//! batches until the relative error target or the sample budget is reached.

use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::demand::PreparedAsset;
use crate::estimators::{
    finish, is_trace, relative_error, run_batches, Budget, EstimatorConfig, Method, RiskEstimate, Scratch,
    StreamStats, WeightSums,
};
use crate::sampling::{initial_u, pin_degenerate, CategoryAssignment, ISParams, RngStream};
use crate::{Direction, Error, Result};

/// Upper bound on any biased spiky probability.
pub const V_MAX: f64 = 0.9;

/// Group-1 customer count above which the optimizer is known to produce
/// unstable weights at the default `n_opt`.
pub const LARGE_ASSET_CUSTOMERS: usize = 80;

const OPT_TAG: u64 = 0x4f50_5449_4d00_0000;
const EST_TAG: u64 = 0x4553_5449_4d00_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CeConfig {
    /// Traces per optimization iteration.
    pub n_opt: usize,
    /// Elite fraction for the intermediate threshold.
    pub rho: f64,
    /// Smoothing weight of the new parameter estimate.
    pub alpha: f64,
    pub q_spiky: f64,
    pub beta_target: f64,
    pub n_max: u64,
    /// Optimization traces after which an asset that never exceeded its
    /// rating is reported as zero risk.
    pub n_max_zero: u64,
    pub m: usize,
    /// Traces per estimation batch.
    pub batch: usize,
    /// Initial `d_opt` as a fraction of `d_cap`.
    pub d_opt_init: f64,
    /// Never let `d_opt` decrease between iterations.
    pub monotone_threshold: bool,
    /// Evaluate all steps instead of `m` sampled ones.
    pub full_year: bool,
    pub parallel: bool,
}

impl Default for CeConfig {
    fn default() -> Self {
        Self {
            n_opt: 500,
            rho: 0.05,
            alpha: 0.6,
            q_spiky: 0.95,
            beta_target: 0.1,
            n_max: 20_000,
            n_max_zero: 10_000,
            m: 2_000,
            batch: 50,
            d_opt_init: 0.5,
            monotone_threshold: true,
            full_year: false,
            parallel: true,
        }
    }
}

impl CeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(self.q_spiky > 0.0 && self.q_spiky < 1.0) {
            return bad("q_spiky must lie in (0, 1)");
        }
        if 1.0 - self.q_spiky > V_MAX {
            return bad("q_spiky leaves an empty bound interval [1 - q_spiky, 0.9]");
        }
        if !(self.beta_target > 0.0) {
            return bad("beta_target must be positive");
        }
        if self.n_opt < 1 || self.n_max < 1 || self.n_max_zero < 1 || self.m < 1 || self.batch < 1 {
            return bad("all counts must be at least 1");
        }
        if !(self.d_opt_init > 0.0) {
            return bad("d_opt_init must be positive");
        }
        Ok(())
    }

    /// Settings shared with the plain and IS estimators.
    pub fn estimator(&self) -> EstimatorConfig {
        EstimatorConfig {
            m: self.m,
            beta_target: self.beta_target,
            n_max: self.n_max,
            batch: self.batch,
            full_year: self.full_year,
            parallel: self.parallel,
        }
    }
}

/// One weighted optimization sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CeSample {
    pub x: CategoryAssignment,
    /// Overload fraction against the elite threshold.
    pub h: f64,
    pub w: f64,
}

/// Weighted elite fraction `Σ h·w·x_i / Σ h·w` per customer.
pub fn ce_update(samples: &[CeSample]) -> Result<Vec<f64>> {
    let n_s = samples.first().map(|s| s.x.len()).unwrap_or(0);
    let mut num = vec![0.0; n_s];
    let mut den = 0.0;
    for s in samples {
        if s.x.len() != n_s {
            return Err(Error::Contract("samples have differing assignment lengths".into()));
        }
        let hw = s.h * s.w;
        if hw == 0.0 {
            continue;
        }
        den += hw;
        for (acc, &xi) in num.iter_mut().zip(&s.x.0) {
            if xi {
                *acc += hw;
            }
        }
    }
    if !(den > 0.0) {
        return Err(Error::EliteEmpty(format!(
            "no sample with positive weighted impact among {}",
            samples.len()
        )));
    }
    Ok(num.into_iter().map(|a| (a / den).clamp(0.0, 1.0)).collect())
}

/// `α·v' + (1 − α)·v_prev`, componentwise.
pub fn smooth(v_new: &[f64], v_prev: &[f64], alpha: f64) -> Vec<f64> {
    v_new.iter().zip(v_prev).map(|(n, p)| alpha * n + (1.0 - alpha) * p).collect()
}

/// Smoothed update clamped to `[1 − q_spiky, 0.9]`.
pub fn smooth_and_bound(v_new: &[f64], v_prev: &[f64], alpha: f64, q_spiky: f64) -> Vec<f64> {
    let lo = 1.0 - q_spiky;
    smooth(v_new, v_prev, alpha).into_iter().map(|v| v.clamp(lo, V_MAX)).collect()
}

/// Sample `p`-quantile: the sorted value at one-based position `⌈p·n⌉`.
pub fn empirical_quantile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // tolerance absorbs representation error, e.g. (1 - 0.05) * 100
    let k = ((p * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Intermediate threshold: the `(1 − ρ)` quantile of the per-trace maximum loads.
pub fn update_threshold(max_loads: &[f64], rho: f64) -> f64 {
    empirical_quantile(max_loads, 1.0 - rho)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeIteration {
    pub k: usize,
    /// `(1 − ρ)` quantile of this iteration's maximum loads.
    pub quantile: f64,
    pub d_opt: f64,
    /// Elite threshold actually applied, `min(d_opt, d_cap)`.
    pub threshold: f64,
    /// Parameters after this iteration's update.
    pub v: Vec<f64>,
    /// Weighted estimate at `d_cap` from this iteration's samples.
    pub r_hat: f64,
    pub beta: Option<f64>,
    /// Traces drawn so far in the optimization stage.
    pub consumed: u64,
    /// Samples with positive weighted impact at the elite threshold.
    pub elite: usize,
    pub ess: Option<f64>,
    pub retried: bool,
    pub elite_empty: bool,
}

/// Final optimized parameters for one asset, as consumed by the
/// generalization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeResult {
    pub asset_id: String,
    pub direction: Direction,
    /// Bin of each group-1 customer, aligned with `v`.
    pub bins: Vec<usize>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl CeResult {
    pub fn n_s(&self) -> usize {
        self.bins.len()
    }
}

/// One line of a `--trace` JSONL dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CeTraceLine {
    Iteration(CeIteration),
    Result(CeResult),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeOutcome {
    pub estimate: RiskEstimate,
    pub iterations: Vec<CeIteration>,
    pub result: CeResult,
}

impl CeOutcome {
    pub fn trace_lines(&self) -> Vec<CeTraceLine> {
        self.iterations
            .iter()
            .cloned()
            .map(CeTraceLine::Iteration)
            .chain(std::iter::once(CeTraceLine::Result(self.result.clone())))
            .collect()
    }
}

struct OptSample {
    x: CategoryAssignment,
    w: f64,
    lmax: f64,
    /// Severities `sign·D` over the sampled steps, ascending.
    sev: Vec<f64>,
}

impl OptSample {
    fn frac_at_least(&self, thr: f64) -> f64 {
        let below = self.sev.partition_point(|&s| s < thr);
        (self.sev.len() - below) as f64 / self.sev.len() as f64
    }

    fn frac_above(&self, thr: f64) -> f64 {
        let at_or_below = self.sev.partition_point(|&s| s <= thr);
        (self.sev.len() - at_or_below) as f64 / self.sev.len() as f64
    }
}

fn draw_samples(
    asset: &PreparedAsset,
    corpus: &Corpus,
    params: &ISParams,
    cfg: &EstimatorConfig,
    n_opt: usize,
    stream: RngStream,
) -> Result<Vec<OptSample>> {
    let sign = params.direction().sign();
    let one = |j: u64, s: &mut Scratch| -> Result<OptSample> {
        let (x, w) = is_trace(asset, corpus, params, cfg, &mut stream.at(j), s)?;
        let mut sev: Vec<f64> = s.demand.iter().map(|d| sign * d).collect();
        sev.sort_by(f64::total_cmp);
        let lmax = sev.last().copied().unwrap_or(f64::NEG_INFINITY);
        Ok(OptSample { x, w, lmax, sev })
    };
    let range = 0..n_opt as u64;
    if cfg.parallel {
        range.into_par_iter().map_init(Scratch::default, |s, j| one(j, s)).collect()
    } else {
        let mut s = Scratch::default();
        range.map(|j| one(j, &mut s)).collect()
    }
}

/// Elite threshold semantics: at or above an intermediate level, strictly
/// above the rating (matching the overload indicator).
fn elite_fraction(sample: &OptSample, threshold: f64, d_cap: f64) -> f64 {
    if threshold < d_cap {
        sample.frac_at_least(threshold)
    } else {
        sample.frac_above(d_cap)
    }
}

/// Run the cross-entropy optimizer and the subsequent IS estimation.
pub fn ce_estimate(
    asset: &PreparedAsset,
    corpus: &Corpus,
    direction: Direction,
    config: &CeConfig,
    stream: &RngStream,
) -> Result<CeOutcome> {
    let started = Instant::now();
    config.validate()?;
    let est_cfg = config.estimator();
    est_cfg.validate(corpus.t_len())?;
    if !corpus.is_classified(direction) {
        return Err(Error::State(format!("corpus is not classified for direction {direction}")));
    }
    let n_s = asset.n_s();
    if n_s > LARGE_ASSET_CUSTOMERS {
        warn!(
            "asset `{}` has {n_s} sampled customers; cross-entropy estimates are unreliable above {LARGE_ASSET_CUSTOMERS} at n_opt = {}",
            asset.id, config.n_opt
        );
    }

    let u = initial_u(asset, corpus, direction)?;
    let d_cap = asset.d_cap;
    let mut v = u.clone();
    let mut d_opt = config.d_opt_init * d_cap;
    let mut consumed = 0u64;
    let mut exceeded = false;
    let mut iterations: Vec<CeIteration> = Vec::new();
    let opt_stream = stream.derive(OPT_TAG);
    let n_opt = config.n_opt as u64;

    let result = |v: &[f64]| CeResult {
        asset_id: asset.id.clone(),
        direction,
        bins: asset.member_bins(),
        u: u.clone(),
        v: v.to_vec(),
    };

    for k in 1.. {
        let params = ISParams::new(u.clone(), v.clone(), direction)?;
        let mut attempt = 0u64;
        let (samples, quantile, new_d_opt, update) = loop {
            let samples = draw_samples(asset, corpus, &params, &est_cfg, config.n_opt, opt_stream.derive((k as u64) << 1 | attempt))?;
            consumed += n_opt;
            exceeded |= samples.iter().any(|s| s.lmax > d_cap);

            let lmax: Vec<f64> = samples.iter().map(|s| s.lmax).collect();
            let quantile = update_threshold(&lmax, config.rho);
            let new_d_opt = if config.monotone_threshold { d_opt.max(quantile) } else { quantile };
            let threshold = new_d_opt.min(d_cap);
            let elite: Vec<CeSample> = samples
                .iter()
                .map(|s| CeSample { x: s.x.clone(), h: elite_fraction(s, threshold, d_cap), w: s.w })
                .collect();
            let update = ce_update(&elite);

            let budget = if exceeded { config.n_max } else { config.n_max_zero };
            let may_retry = attempt == 0 && consumed + n_opt <= budget;
            match update {
                Err(Error::EliteEmpty(_)) if may_retry => attempt += 1,
                other => break (samples, quantile, new_d_opt, other),
            }
        };
        d_opt = new_d_opt;
        let threshold = d_opt.min(d_cap);
        let (elite_empty, elite_count) = match update {
            Ok(v_new) => {
                v = pin_degenerate(&u, &smooth_and_bound(&v_new, &v, config.alpha, config.q_spiky));
                let count = samples.iter().filter(|s| elite_fraction(s, threshold, d_cap) > 0.0).count();
                (false, count)
            }
            Err(Error::EliteEmpty(msg)) => {
                info!("asset `{}` iteration {k}: {msg}; keeping previous parameters", asset.id);
                (true, 0)
            }
            Err(e) => return Err(e),
        };

        // running weighted estimate at the rating from this iteration's samples
        let mut stats = StreamStats::new();
        let mut weights = WeightSums::default();
        for s in &samples {
            stats.push(s.frac_above(d_cap) * s.w);
            weights.push(s.w);
        }
        let beta = relative_error(&stats);
        iterations.push(CeIteration {
            k,
            quantile,
            d_opt,
            threshold,
            v: v.clone(),
            r_hat: stats.mean(),
            beta,
            consumed,
            elite: elite_count,
            ess: weights.ess(),
            retried: attempt > 0,
            elite_empty,
        });

        let running = |converged: bool| RiskEstimate {
            method: Method::CeIs,
            direction,
            r_hat: stats.mean().max(0.0),
            beta,
            beta_target: config.beta_target,
            n: stats.n(),
            evaluations: consumed,
            elapsed: started.elapsed().as_secs_f64(),
            converged,
            zero_flagged: stats.mean() <= 0.0,
            ess: weights.ess(),
            iterations: Some(k),
        };

        if beta.is_some_and(|b| b < config.beta_target) {
            return Ok(CeOutcome { estimate: running(true), result: result(&v), iterations });
        }
        if !exceeded && consumed > config.n_max_zero {
            let estimate = RiskEstimate {
                r_hat: 0.0,
                beta: None,
                zero_flagged: true,
                ess: None,
                ..running(false)
            };
            return Ok(CeOutcome { estimate, result: result(&v), iterations });
        }
        if d_opt > d_cap {
            break;
        }
        if consumed >= config.n_max {
            warn!("asset `{}`: optimization budget exhausted before d_opt reached d_cap", asset.id);
            return Ok(CeOutcome { estimate: running(false), result: result(&v), iterations });
        }
    }

    let params = ISParams::new(u.clone(), v.clone(), direction)?;
    let est_stream = stream.derive(EST_TAG);
    let limit = config.n_max.saturating_sub(consumed);
    let run = run_batches(config.batch, config.beta_target, Budget::Exceeding(limit), config.parallel, |j, s| {
        let (_, w) = is_trace(asset, corpus, &params, &est_cfg, &mut est_stream.at(j), s)?;
        let h = crate::demand::impact(&s.demand, d_cap, direction);
        Ok((h * w, w))
    })?;
    let mut estimate = finish(Method::CeIs, direction, config.beta_target, &run, consumed + run.stats.n(), started, true);
    estimate.iterations = Some(iterations.len());
    Ok(CeOutcome { estimate, result: result(&v), iterations })
}
