//! Replicated estimator campaigns and speedup reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::ce::{ce_estimate, CeConfig};
use crate::corpus::Corpus;
use crate::demand::PreparedAsset;
use crate::estimators::{run_is, run_mc, run_reference, EstimatorConfig, Method, RiskEstimate, StreamStats};
use crate::generalize::{apply_generalized, GeneralizedBinProbs};
use crate::sampling::{splitmix64, RngStream};
use crate::{Direction, Error, Result};

pub const RUN_SCHEMA_VERSION: u32 = 1;

/// Default significance level of the accuracy filter.
pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub asset_id: String,
    pub n_s: usize,
    pub n_customers: usize,
    pub method: Method,
    pub direction: Direction,
    pub replicate: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<RiskEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    /// Wall-clock time, extrapolated to the relative-error target when the
    /// run stopped short of it.
    pub fn effective_time(&self) -> Option<f64> {
        let e = self.estimate.as_ref()?;
        Some(match e.beta {
            Some(beta) if !e.converged => extrapolate_time(e.elapsed, beta, e.beta_target),
            _ => e.elapsed,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub methods: Vec<Method>,
    pub directions: Vec<Direction>,
    pub replicates: usize,
    pub seed: u64,
    pub estimator: EstimatorConfig,
    pub ce: CeConfig,
    /// Generalized tables, one per direction, required by `gen-is` cells.
    pub gen_probs: Vec<GeneralizedBinProbs>,
    /// Cells evaluated concurrently.
    pub workers: usize,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            directions: Direction::BOTH.to_vec(),
            replicates: 9,
            seed: 0,
            estimator: EstimatorConfig::default(),
            ce: CeConfig::default(),
            gen_probs: Vec::new(),
            workers: 1,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of one campaign cell, a pure function of its coordinates.
pub fn cell_seed(campaign_seed: u64, asset_id: &str, method: Method, direction: Direction, replicate: usize) -> u64 {
    let mut h = splitmix64(campaign_seed ^ fnv1a(asset_id.as_bytes()));
    h = splitmix64(h ^ fnv1a(method.as_str().as_bytes()));
    h = splitmix64(h ^ fnv1a(direction.as_str().as_bytes()));
    splitmix64(h ^ replicate as u64)
}

/// Run a single estimator the way a campaign cell does.
pub fn run_method(
    method: Method,
    asset: &PreparedAsset,
    corpus: &Corpus,
    direction: Direction,
    config: &CampaignConfig,
    seed: u64,
) -> Result<RiskEstimate> {
    let stream = RngStream::new(seed, 0);
    match method {
        Method::Ref => run_reference(asset, corpus, direction, &config.estimator, &stream),
        Method::Mc => run_mc(asset, corpus, direction, &config.estimator, &stream),
        Method::CeIs => Ok(ce_estimate(asset, corpus, direction, &config.ce, &stream)?.estimate),
        Method::GenIs => {
            let probs = config
                .gen_probs
                .iter()
                .find(|g| g.direction == direction)
                .ok_or_else(|| Error::Config(format!("no generalized bin probabilities for direction {direction}")))?;
            let params = apply_generalized(probs, asset, corpus)?;
            run_is(asset, corpus, &params, &config.estimator, Method::GenIs, &stream)
        }
    }
}

/// Execute every (asset, direction, method, replicate) cell.
///
/// Cells are spread over `config.workers` threads; finished records are
/// handed to `sink` one at a time on the calling thread in completion order.
/// The returned list is in cell order. Estimator failures become records
/// with `error` set; an error from `sink` aborts the campaign.
pub fn run_campaign<F>(
    assets: &[PreparedAsset],
    corpus: &Corpus,
    config: &CampaignConfig,
    mut sink: F,
) -> Result<Vec<RunRecord>>
where
    F: FnMut(&RunRecord) -> Result<()>,
{
    if config.replicates == 0 || config.methods.is_empty() || config.directions.is_empty() {
        return Err(Error::Config("campaign needs at least one method, direction and replicate".into()));
    }
    let mut cells = Vec::new();
    for asset in assets {
        for &direction in &config.directions {
            for &method in &config.methods {
                for replicate in 0..config.replicates {
                    cells.push((asset, direction, method, replicate));
                }
            }
        }
    }

    let run_cell = |&(asset, direction, method, replicate): &(&PreparedAsset, Direction, Method, usize)| {
        let seed = cell_seed(config.seed, &asset.id, method, direction, replicate);
        let outcome = run_method(method, asset, corpus, direction, config, seed);
        RunRecord {
            schema_version: RUN_SCHEMA_VERSION,
            asset_id: asset.id.clone(),
            n_s: asset.n_s(),
            n_customers: asset.n_customers(),
            method,
            direction,
            replicate,
            seed,
            error: outcome.as_ref().err().map(ToString::to_string),
            estimate: outcome.ok(),
        }
    };

    let mut out: Vec<Option<RunRecord>> = vec![None; cells.len()];
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..config.workers.max(1) {
            let tx = tx.clone();
            let (next, cells, run_cell) = (&next, &cells, &run_cell);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() || tx.send((i, run_cell(&cells[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, record) in rx {
            if let Err(e) = sink(&record) {
                // stop handing out work; running cells finish and are dropped
                next.store(cells.len(), Ordering::Relaxed);
                return Err(e);
            }
            out[i] = Some(record);
        }
        Ok(())
    })?;
    Ok(out.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Two-sided Welch's unequal-variance t-test.
pub fn welch_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Contract("Welch's test needs at least two values per sample".into()));
    }
    let (sa, sb): (StreamStats, StreamStats) = (a.iter().copied().collect(), b.iter().copied().collect());
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (qa, qb) = (sa.variance() / na, sb.variance() / nb);
    let se2 = qa + qb;
    let diff = sa.mean() - sb.mean();
    if se2 == 0.0 {
        let (t, p_value) = if diff == 0.0 { (0.0, 1.0) } else { (diff.signum() * f64::INFINITY, 0.0) };
        return Ok(WelchTest { t, df: na + nb - 2.0, p_value });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Contract(e.to_string()))?;
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(WelchTest { t, df, p_value })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accurate,
    Inaccurate,
    /// Fewer than two successful replicates on one side.
    Untested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyVerdict {
    pub asset_id: String,
    pub direction: Direction,
    pub method: Method,
    pub p_value: Option<f64>,
    pub verdict: Verdict,
}

fn estimates_by_cell(records: &[RunRecord]) -> BTreeMap<(String, Direction, Method), Vec<f64>> {
    let mut cells: BTreeMap<_, Vec<f64>> = BTreeMap::new();
    for r in records {
        let entry = cells.entry((r.asset_id.clone(), r.direction, r.method)).or_default();
        if let Some(e) = &r.estimate {
            entry.push(e.r_hat);
        }
    }
    cells
}

/// Compare each (asset, direction, method) cell's replicate estimates with
/// the reference cell of the same asset and direction.
pub fn welch_filter(method_records: &[RunRecord], ref_records: &[RunRecord], significance: f64) -> Vec<AccuracyVerdict> {
    let refs: BTreeMap<(String, Direction), Vec<f64>> = estimates_by_cell(ref_records)
        .into_iter()
        .map(|((asset, dir, _), v)| ((asset, dir), v))
        .fold(BTreeMap::new(), |mut acc, (k, v)| {
            acc.entry(k).or_insert_with(Vec::new).extend(v);
            acc
        });
    estimates_by_cell(method_records)
        .into_iter()
        .map(|((asset_id, direction, method), values)| {
            let reference = refs.get(&(asset_id.clone(), direction));
            let test = reference.and_then(|r| welch_test(&values, r).ok());
            let verdict = match test {
                None => Verdict::Untested,
                Some(t) if t.p_value < significance => Verdict::Inaccurate,
                Some(_) => Verdict::Accurate,
            };
            AccuracyVerdict { asset_id, direction, method, p_value: test.map(|t| t.p_value), verdict }
        })
        .collect()
}

/// Time to reach `beta_target` from a run that stopped at `beta_current`,
/// assuming relative error falls as `n^(-1/2)` and time grows linearly in `n`.
pub fn extrapolate_time(elapsed: f64, beta_current: f64, beta_target: f64) -> f64 {
    if beta_current <= beta_target {
        return elapsed;
    }
    let ratio = beta_current / beta_target;
    elapsed * ratio * ratio
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SpeedupConvention {
    /// Mean over assets of per-asset time ratios.
    #[default]
    PerAsset,
    /// Ratio of the mean reference time to the mean method time.
    GrandMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub significance: f64,
    pub convention: SpeedupConvention,
    /// Apply the Welch accuracy filter to importance-sampling methods.
    pub welch: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { significance: SIGNIFICANCE, convention: SpeedupConvention::PerAsset, welch: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    /// `floor(log10 r̂)`.
    pub magnitude: i32,
    pub method: Method,
    /// Asset-direction cells in this bin.
    pub cells: usize,
    /// Individual replicate estimates in this bin.
    pub estimates: usize,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub cells: usize,
    pub speedup: f64,
    pub mean_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Exclusions {
    pub zero_flagged: usize,
    pub inaccurate: usize,
    pub failed: usize,
    pub missing_reference: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupTable {
    pub convention: SpeedupConvention,
    pub significance: f64,
    pub rows: Vec<SpeedupRow>,
    pub summary: Vec<MethodSummary>,
    /// Excluded records per method.
    pub exclusions: BTreeMap<Method, Exclusions>,
    pub verdicts: Vec<AccuracyVerdict>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

struct Cell {
    magnitude: i32,
    ref_time: f64,
    time: f64,
    estimates: usize,
}

fn aggregate(cells: &[&Cell], convention: SpeedupConvention) -> f64 {
    match convention {
        SpeedupConvention::PerAsset => cells.iter().map(|c| c.ref_time / c.time).sum::<f64>() / cells.len() as f64,
        SpeedupConvention::GrandMean => {
            cells.iter().map(|c| c.ref_time).sum::<f64>() / cells.iter().map(|c| c.time).sum::<f64>()
        }
    }
}

/// Speedup relative to the reference method per order of magnitude of the
/// estimated risk.
pub fn speedup_report(records: &[RunRecord], options: &ReportOptions) -> Result<SpeedupTable> {
    let (refs, others): (Vec<RunRecord>, Vec<RunRecord>) =
        records.iter().cloned().partition(|r| r.method == Method::Ref);
    if refs.is_empty() {
        return Err(Error::Data("run records include no reference runs".into()));
    }

    let is_methods: Vec<RunRecord> =
        others.iter().filter(|r| matches!(r.method, Method::CeIs | Method::GenIs)).cloned().collect();
    let verdicts = if options.welch { welch_filter(&is_methods, &refs, options.significance) } else { Vec::new() };
    let inaccurate: std::collections::BTreeSet<(String, Direction, Method)> = verdicts
        .iter()
        .filter(|v| v.verdict == Verdict::Inaccurate)
        .map(|v| (v.asset_id.clone(), v.direction, v.method))
        .collect();

    // reference timing and magnitude per (asset, direction)
    let mut ref_cells: BTreeMap<(String, Direction), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &refs {
        if let (Some(e), Some(t)) = (&r.estimate, r.effective_time()) {
            let entry = ref_cells.entry((r.asset_id.clone(), r.direction)).or_default();
            entry.0.push(t);
            entry.1.push(e.r_hat);
        }
    }

    let mut exclusions: BTreeMap<Method, Exclusions> = BTreeMap::new();
    let mut grouped: BTreeMap<(String, Direction, Method), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        exclusions.entry(r.method).or_default();
        grouped.entry((r.asset_id.clone(), r.direction, r.method)).or_default().push(r);
    }

    let mut cells: BTreeMap<Method, Vec<Cell>> = BTreeMap::new();
    for ((asset, direction, method), group) in grouped {
        let ex = exclusions.entry(method).or_default();
        if inaccurate.contains(&(asset.clone(), direction, method)) {
            ex.inaccurate += group.len();
            continue;
        }
        let mut times = Vec::new();
        let mut r_hats = Vec::new();
        for r in group {
            match &r.estimate {
                None => ex.failed += 1,
                Some(e) if e.zero_flagged || e.r_hat <= 0.0 => ex.zero_flagged += 1,
                Some(e) => {
                    times.push(r.effective_time().unwrap_or(e.elapsed));
                    r_hats.push(e.r_hat);
                }
            }
        }
        if times.is_empty() {
            continue;
        }
        let Some((ref_times, ref_r)) = ref_cells.get(&(asset, direction)).filter(|(t, _)| !t.is_empty()) else {
            ex.missing_reference += times.len();
            continue;
        };
        let ref_mean_r = mean(ref_r);
        let basis = if ref_mean_r > 0.0 { ref_mean_r } else { mean(&r_hats) };
        cells.entry(method).or_default().push(Cell {
            magnitude: basis.log10().floor() as i32,
            ref_time: mean(ref_times),
            time: mean(&times),
            estimates: times.len(),
        });
    }

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (&method, method_cells) in &cells {
        let mut by_mag: BTreeMap<i32, Vec<&Cell>> = BTreeMap::new();
        for c in method_cells {
            by_mag.entry(c.magnitude).or_default().push(c);
        }
        for (magnitude, group) in by_mag {
            rows.push(SpeedupRow {
                magnitude,
                method,
                cells: group.len(),
                estimates: group.iter().map(|c| c.estimates).sum(),
                speedup: aggregate(&group, options.convention),
            });
        }
        let all: Vec<&Cell> = method_cells.iter().collect();
        summary.push(MethodSummary {
            method,
            cells: all.len(),
            speedup: aggregate(&all, options.convention),
            mean_time: all.iter().map(|c| c.time).sum::<f64>() / all.len() as f64,
        });
    }
    rows.sort_by_key(|r| (r.magnitude, r.method));

    Ok(SpeedupTable {
        convention: options.convention,
        significance: options.significance,
        rows,
        summary,
        exclusions,
        verdicts,
    })
}

impl SpeedupTable {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>9}  {:<7} {:>6} {:>9} {:>10}", "magnitude", "method", "cells", "estimates", "speedup");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>9}  {:<7} {:>6} {:>9} {:>10.2}",
                format!("1e{}", r.magnitude),
                r.method.as_str(),
                r.cells,
                r.estimates,
                r.speedup
            );
        }
        let _ = writeln!(s, "\n{:<7} {:>6} {:>10} {:>12}", "method", "cells", "speedup", "mean time s");
        for m in &self.summary {
            let _ = writeln!(s, "{:<7} {:>6} {:>10.2} {:>12.4}", m.method.as_str(), m.cells, m.speedup, m.mean_time);
        }
        let _ = writeln!(s, "\nexcluded records");
        let _ = writeln!(s, "{:<7} {:>6} {:>10} {:>6} {:>9}", "method", "zero", "inaccurate", "failed", "no-ref");
        for (method, e) in &self.exclusions {
            let _ = writeln!(
                s,
                "{:<7} {:>6} {:>10} {:>6} {:>9}",
                method.as_str(),
                e.zero_flagged,
                e.inaccurate,
                e.failed,
                e.missing_reference
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("magnitude,method,cells,estimates,speedup\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.magnitude, r.method.as_str(), r.cells, r.estimates, r.speedup);
        }
        s
    }
}
