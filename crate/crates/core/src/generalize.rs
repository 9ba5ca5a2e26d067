//! Bin-level spiky probabilities pooled from cross-entropy results.
//!
//! Optimized probabilities from a set of training assets are averaged per
//! bin. Bins whose mean exceeds a threshold keep that mean; the rest fall
//! back to their nominal spiky fraction. The resulting table turns any asset
//! into IS parameters without running the optimizer.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::ce::{CeResult, CeTraceLine, LARGE_ASSET_CUSTOMERS, V_MAX};
use crate::corpus::Corpus;
use crate::demand::PreparedAsset;
use crate::sampling::{initial_u, pin_degenerate, ISParams};
use crate::{Direction, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Every (asset, customer) pair counts once.
    #[default]
    Flat,
    /// Customers are averaged within each asset first.
    PerAsset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneralizeConfig {
    /// Results from assets with this many sampled customers or more are ignored.
    pub max_customers: usize,
    /// Minimum mean probability for a bin to be treated as risk-relevant.
    pub threshold: f64,
    pub averaging: Averaging,
}

impl Default for GeneralizeConfig {
    fn default() -> Self {
        Self { max_customers: LARGE_ASSET_CUSTOMERS, threshold: 0.15, averaging: Averaging::Flat }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbSource {
    Mean,
    Initial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinProb {
    pub bin: usize,
    pub prob: f64,
    pub source: ProbSource,
    /// Customer entries averaged for this bin.
    pub contributors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedBinProbs {
    pub direction: Direction,
    pub threshold: f64,
    pub q_spiky: f64,
    pub max_customers: usize,
    pub averaging: Averaging,
    /// Asset ids whose results were used.
    pub sources: Vec<String>,
    pub probs: Vec<BinProb>,
}

impl GeneralizedBinProbs {
    pub fn prob(&self, bin: usize) -> Option<f64> {
        self.probs.iter().find(|p| p.bin == bin).map(|p| p.prob)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

fn sorted_mean(mut values: Vec<f64>) -> f64 {
    // summing in sorted order makes the mean independent of input order
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn derive_bin_probs(
    results: &[CeResult],
    corpus: &Corpus,
    direction: Direction,
    config: &GeneralizeConfig,
) -> Result<GeneralizedBinProbs> {
    let q_spiky = corpus
        .q_spiky()
        .filter(|_| corpus.is_classified(direction))
        .ok_or_else(|| Error::State(format!("corpus is not classified for direction {direction}")))?;
    if !(config.threshold >= 0.0 && config.threshold <= 1.0) {
        return Err(Error::Config("threshold must lie in [0, 1]".into()));
    }

    // bin -> asset -> optimized probabilities
    let mut by_bin: BTreeMap<usize, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    let mut sources = Vec::new();
    for r in results.iter().filter(|r| r.direction == direction) {
        if r.bins.len() != r.v.len() {
            return Err(Error::Data(format!("result for `{}` has mismatched bins and v", r.asset_id)));
        }
        if r.n_s() >= config.max_customers {
            continue;
        }
        sources.push(r.asset_id.clone());
        for (&bin, &v) in r.bins.iter().zip(&r.v) {
            if corpus.bin(bin).is_none() {
                return Err(Error::Data(format!("result for `{}` references unknown bin {bin}", r.asset_id)));
            }
            by_bin.entry(bin).or_default().entry(r.asset_id.as_str()).or_default().push(v);
        }
    }
    sources.sort();

    let lo = 1.0 - q_spiky;
    let mut probs = Vec::with_capacity(corpus.bins().len());
    for bin in corpus.bins() {
        let initial = bin
            .partition(direction)
            .map(|p| p.spiky_fraction())
            .ok_or_else(|| Error::State(format!("bin {} is not classified", bin.id)))?;
        let entries = by_bin.get(&bin.id);
        let contributors = entries.map_or(0, |m| m.values().map(Vec::len).sum());
        let mean = entries.map(|m| match config.averaging {
            Averaging::Flat => sorted_mean(m.values().flatten().copied().collect()),
            Averaging::PerAsset => sorted_mean(m.values().map(|v| sorted_mean(v.clone())).collect()),
        });
        let (prob, source) = match mean {
            Some(mean) if mean > config.threshold => (mean.clamp(lo, V_MAX), ProbSource::Mean),
            Some(_) => (initial, ProbSource::Initial),
            None => {
                warn!("bin {} has no training customers; using its nominal spiky fraction", bin.id);
                (initial, ProbSource::Initial)
            }
        };
        probs.push(BinProb { bin: bin.id, prob, source, contributors });
    }

    Ok(GeneralizedBinProbs {
        direction,
        threshold: config.threshold,
        q_spiky,
        max_customers: config.max_customers,
        averaging: config.averaging,
        sources,
        probs,
    })
}

/// IS parameters for `asset` from a generalized bin table.
pub fn apply_generalized(probs: &GeneralizedBinProbs, asset: &PreparedAsset, corpus: &Corpus) -> Result<ISParams> {
    let u = initial_u(asset, corpus, probs.direction)?;
    let v = asset
        .members()
        .iter()
        .map(|m| {
            probs
                .prob(m.bin)
                .ok_or_else(|| Error::Data(format!("generalized table has no entry for bin {}", m.bin)))
        })
        .collect::<Result<Vec<_>>>()?;
    let v = pin_degenerate(&u, &v);
    ISParams::new(u, v, probs.direction)
}

/// Collect result records from a cross-entropy output directory.
///
/// Every `*.jsonl` and `*.json` file is scanned; lines that hold a trace
/// `result` record or a bare result object are kept, anything else is skipped.
pub fn read_ce_results(dir: &Path) -> Result<Vec<CeResult>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("jsonl" | "json")));
    paths.sort();

    let mut results = Vec::new();
    for path in paths {
        for line in BufReader::new(fs::File::open(&path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if let Ok(CeTraceLine::Result(r)) = serde_json::from_str::<CeTraceLine>(&line) {
                results.push(r);
            } else if let Ok(r) = serde_json::from_str::<CeResult>(&line) {
                results.push(r);
            }
        }
    }
    Ok(results)
}
