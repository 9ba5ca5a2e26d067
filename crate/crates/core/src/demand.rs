//! Bottom-up asset demand: scaled smart-meter profiles of group-1 customers
//! plus fixed telemetry (group 2) and average-category (group 3) traces.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::{Direction, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "group", rename_all = "snake_case", deny_unknown_fields)]
pub enum Customer {
    /// Group 1: draws a random profile from its consumption bin.
    SmartMeter { gamma: f64, bin: usize },
    /// Group 2: measured trace used as is (kW).
    Telemetry { profile: String },
    /// Group 3: scaled average profile of a category.
    Average { gamma: f64, category: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Asset {
    pub id: String,
    /// Rated capacity in kW.
    pub d_cap: f64,
    pub customers: Vec<Customer>,
}

impl Asset {
    /// `(n_s, n_l, n_a)`: group-1, group-2 and group-3 customer counts.
    pub fn group_counts(&self) -> (usize, usize, usize) {
        self.customers.iter().fold((0, 0, 0), |(s, l, a), c| match c {
            Customer::SmartMeter { .. } => (s + 1, l, a),
            Customer::Telemetry { .. } => (s, l + 1, a),
            Customer::Average { .. } => (s, l, a + 1),
        })
    }

    /// Check references against the corpus and precompute the fixed part
    /// of the demand (groups 2 and 3).
    pub fn prepare(&self, corpus: &Corpus) -> Result<PreparedAsset> {
        if !(self.d_cap > 0.0 && self.d_cap.is_finite()) {
            return Err(Error::Data(format!("asset `{}`: d_cap must be positive", self.id)));
        }
        let t_len = corpus.t_len();
        let mut fixed = vec![0f64; t_len];
        let mut members = Vec::new();
        let (mut n_l, mut n_a) = (0, 0);
        for (k, c) in self.customers.iter().enumerate() {
            match c {
                Customer::SmartMeter { gamma, bin } => {
                    check_gamma(&self.id, k, *gamma)?;
                    let b = corpus.bin(*bin).ok_or_else(|| {
                        Error::Data(format!("asset `{}`: customer {k} references unknown bin {bin}", self.id))
                    })?;
                    if b.is_empty() {
                        return Err(Error::Data(format!("bin {bin} is empty")));
                    }
                    members.push(Member { bin: *bin, gamma: *gamma });
                }
                Customer::Telemetry { profile } => {
                    let p = corpus.telemetry_profile(profile).ok_or_else(|| {
                        Error::Data(format!(
                            "asset `{}`: customer {k} references unknown telemetry profile `{profile}`",
                            self.id
                        ))
                    })?;
                    for (f, &v) in fixed.iter_mut().zip(&p.values) {
                        *f += v as f64;
                    }
                    n_l += 1;
                }
                Customer::Average { gamma, category } => {
                    check_gamma(&self.id, k, *gamma)?;
                    let p = corpus.average_profile(category).ok_or_else(|| {
                        Error::Data(format!(
                            "asset `{}`: customer {k} references unknown average category `{category}`",
                            self.id
                        ))
                    })?;
                    for (f, &v) in fixed.iter_mut().zip(&p.values) {
                        *f += gamma * v as f64;
                    }
                    n_a += 1;
                }
            }
        }
        Ok(PreparedAsset { id: self.id.clone(), d_cap: self.d_cap, members, fixed, n_l, n_a })
    }
}

fn check_gamma(asset: &str, k: usize, gamma: f64) -> Result<()> {
    if gamma >= 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::Data(format!("asset `{asset}`: customer {k} has invalid consumption {gamma}")))
    }
}

/// Group-1 customer reduced to what the sampling loop needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Member {
    pub bin: usize,
    pub gamma: f64,
}

/// An asset validated against a corpus, with groups 2 and 3 folded into one
/// cached trace so each Monte Carlo sample only sums group-1 profiles.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedAsset {
    pub id: String,
    pub d_cap: f64,
    members: Vec<Member>,
    fixed: Vec<f64>,
    n_l: usize,
    n_a: usize,
}

impl PreparedAsset {
    pub fn members(&self) -> &[Member] {
        &self.members
    }

    /// Number of group-1 (randomly sampled) customers.
    pub fn n_s(&self) -> usize {
        self.members.len()
    }

    pub fn n_l(&self) -> usize {
        self.n_l
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn n_customers(&self) -> usize {
        self.members.len() + self.n_l + self.n_a
    }

    pub fn fixed_trace(&self) -> &[f64] {
        &self.fixed
    }

    pub fn member_bins(&self) -> Vec<usize> {
        self.members.iter().map(|m| m.bin).collect()
    }
}

/// Profile index within each group-1 customer's bin (zero-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileSelection(pub Vec<usize>);

/// Time steps at which a trace is evaluated (zero-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimeSample {
    /// Every step `0..T`.
    Full(usize),
    Sampled(Vec<usize>),
}

impl TimeSample {
    pub fn len(&self) -> usize {
        match self {
            TimeSample::Full(t) => *t,
            TimeSample::Sampled(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<usize> {
        match self {
            TimeSample::Full(t) => (0..*t).collect(),
            TimeSample::Sampled(v) => v.clone(),
        }
    }
}

fn validate(asset: &PreparedAsset, corpus: &Corpus, pi: &ProfileSelection, theta: &TimeSample) -> Result<()> {
    if pi.0.len() != asset.n_s() {
        return Err(Error::Contract(format!(
            "selection has {} entries for {} group-1 customers",
            pi.0.len(),
            asset.n_s()
        )));
    }
    for (m, &p) in asset.members.iter().zip(&pi.0) {
        let n = corpus.bin(m.bin).map(|b| b.len()).unwrap_or(0);
        if p >= n {
            return Err(Error::Contract(format!("profile index {p} out of range for bin {}", m.bin)));
        }
    }
    let t_len = corpus.t_len();
    match theta {
        TimeSample::Full(t) if *t != t_len => {
            return Err(Error::Contract(format!("full sample of {t} steps, corpus has {t_len}")))
        }
        TimeSample::Sampled(v) if v.iter().any(|&t| t >= t_len) => {
            return Err(Error::Contract("time step out of range".into()))
        }
        _ => {}
    }
    if asset.fixed.len() != t_len {
        return Err(Error::Contract("asset was prepared against a different corpus".into()));
    }
    Ok(())
}

/// Demand (kW) at each step of `theta`.
pub fn evaluate_demand(
    asset: &PreparedAsset,
    corpus: &Corpus,
    pi: &ProfileSelection,
    theta: &TimeSample,
) -> Result<Vec<f64>> {
    validate(asset, corpus, pi, theta)?;
    let mut out = Vec::with_capacity(theta.len());
    demand_into(asset, corpus, &pi.0, theta, &mut out);
    Ok(out)
}

/// Unchecked hot-path variant of [`evaluate_demand`] writing into `out`.
pub(crate) fn demand_into(
    asset: &PreparedAsset,
    corpus: &Corpus,
    pi: &[usize],
    theta: &TimeSample,
    out: &mut Vec<f64>,
) {
    out.clear();
    match theta {
        TimeSample::Full(_) => {
            out.extend_from_slice(&asset.fixed);
            for (m, &p) in asset.members.iter().zip(pi) {
                let row = corpus.bins()[m.bin].profile(p);
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += m.gamma * v as f64;
                }
            }
        }
        TimeSample::Sampled(steps) => {
            out.extend(steps.iter().map(|&t| asset.fixed[t]));
            for (m, &p) in asset.members.iter().zip(pi) {
                let row = corpus.bins()[m.bin].profile(p);
                for (o, &t) in out.iter_mut().zip(steps) {
                    *o += m.gamma * row[t] as f64;
                }
            }
        }
    }
}

/// Largest severity `sign·D` in a demand sample; for `Neg` this is the
/// largest net export.
pub fn max_load(demand: &[f64], direction: Direction) -> f64 {
    let s = direction.sign();
    demand.iter().fold(f64::NEG_INFINITY, |acc, &d| acc.max(s * d))
}

/// Fraction of steps in overload against `threshold`: `D > threshold` for
/// `Pos`, `D < -threshold` for `Neg`.
pub fn impact(demand: &[f64], threshold: f64, direction: Direction) -> f64 {
    if demand.is_empty() {
        return 0.0;
    }
    let s = direction.sign();
    demand.iter().filter(|&&d| s * d > threshold).count() as f64 / demand.len() as f64
}

/// Convenience wrapper: evaluate the demand and its impact in one call.
pub fn impact_of(
    asset: &PreparedAsset,
    corpus: &Corpus,
    pi: &ProfileSelection,
    theta: &TimeSample,
    threshold: f64,
    direction: Direction,
) -> Result<f64> {
    Ok(impact(&evaluate_demand(asset, corpus, pi, theta)?, threshold, direction))
}

/// On-disk list of asset definitions: `{"assets": [...]}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetFile {
    pub assets: Vec<Asset>,
}

impl AssetFile {
    pub fn load(path: &Path) -> Result<Self> {
        let file: AssetFile = serde_json::from_slice(&fs::read(path)?)?;
        let mut ids: Vec<&str> = file.assets.iter().map(|a| a.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Data(format!("duplicate asset id `{}`", w[0])));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Asset> {
        self.assets.iter().find(|a| a.id == id)
    }

    /// Validate every asset against `corpus`.
    pub fn prepare(&self, corpus: &Corpus) -> Result<Vec<PreparedAsset>> {
        self.assets.iter().map(|a| a.prepare(corpus)).collect()
    }
}

/// Knobs for [`synthesize_assets`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssetSynthSpec {
    pub min_customers: usize,
    pub max_customers: usize,
    /// Range of the rating offset `z` in `d_cap = μ + z·σ`.
    pub z_range: [f64; 2],
    /// Random (selection, step) draws used to estimate `μ` and `σ`.
    pub pilot_samples: usize,
    pub telemetry_probability: f64,
    pub average_probability: f64,
}

impl Default for AssetSynthSpec {
    fn default() -> Self {
        Self {
            min_customers: 5,
            max_customers: 120,
            z_range: [1.5, 6.0],
            pilot_samples: 400,
            telemetry_probability: 0.3,
            average_probability: 0.5,
        }
    }
}

/// Synthetic assets whose group-1 customer counts spread geometrically over
/// `[min_customers, max_customers]`. Each rating sits `z` pilot standard
/// deviations above the pilot mean demand, with `z` drawn uniformly from
/// `z_range`, so the set covers a wide range of overload probabilities.
pub fn synthesize_assets(corpus: &Corpus, n: usize, seed: u64, spec: &AssetSynthSpec) -> Result<Vec<Asset>> {
    if corpus.bins().is_empty() {
        return Err(Error::Data("corpus has no bins".into()));
    }
    if spec.min_customers == 0 || spec.min_customers > spec.max_customers {
        return Err(Error::Config("need 0 < min_customers <= max_customers".into()));
    }
    if !(spec.z_range[0] <= spec.z_range[1]) || spec.pilot_samples < 2 {
        return Err(Error::Config("invalid z_range or pilot_samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let telemetry: Vec<&str> = corpus.telemetry_profiles().map(|p| p.id.as_str()).collect();
    let averages: Vec<&str> = corpus.average_profiles().map(|p| p.id.as_str()).collect();
    let (lo, hi) = (spec.min_customers as f64, spec.max_customers as f64);

    let mut assets = Vec::with_capacity(n);
    for k in 0..n {
        let frac = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
        let n_s = (lo * (hi / lo).powf(frac)).round() as usize;
        let mut customers: Vec<Customer> = (0..n_s)
            .map(|_| {
                let bin = &corpus.bins()[rng.random_range(0..corpus.bins().len())];
                let [a, b] = bin.consumption_range;
                let gamma = if b > a && a >= 0.0 { rng.random_range(a..b) } else { 1.0 };
                Customer::SmartMeter { gamma, bin: bin.id }
            })
            .collect();
        if !telemetry.is_empty() && rng.random::<f64>() < spec.telemetry_probability {
            let profile = telemetry[rng.random_range(0..telemetry.len())].to_string();
            customers.push(Customer::Telemetry { profile });
        }
        if !averages.is_empty() && rng.random::<f64>() < spec.average_probability {
            let category = averages[rng.random_range(0..averages.len())].to_string();
            customers.push(Customer::Average { gamma: rng.random_range(2_000.0..20_000.0), category });
        }

        let mut asset = Asset { id: format!("asset-{k:03}"), d_cap: 1.0, customers };
        let prepared = asset.prepare(corpus)?;
        let pilot: Vec<f64> = (0..spec.pilot_samples)
            .map(|_| {
                let pi = ProfileSelection(
                    prepared.members().iter().map(|m| rng.random_range(0..corpus.bins()[m.bin].len())).collect(),
                );
                let t = rng.random_range(0..corpus.t_len());
                let mut out = Vec::with_capacity(1);
                demand_into(&prepared, corpus, &pi.0, &TimeSample::Sampled(vec![t]), &mut out);
                out[0]
            })
            .collect();
        let mean = pilot.iter().sum::<f64>() / pilot.len() as f64;
        let var = pilot.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (pilot.len() - 1) as f64;
        let z = rng.random_range(spec.z_range[0]..=spec.z_range[1]);
        asset.d_cap = (mean + z * var.sqrt()).max(f64::MIN_POSITIVE.sqrt());
        assets.push(asset);
    }
    Ok(assets)
}
