//! Smart-meter profile corpus: bins of normalized profiles, median-deviation
//! metrics, and the spiky/smooth partition used by importance sampling.

mod store;
mod synth;

pub use store::{read_corpus, write_corpus, CORPUS_FORMAT_VERSION};
pub use synth::{synthesize_corpus, CategorySpec, CorpusSpec};

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::{Direction, Error, Result, STEP_HOURS};

/// A quarter-hourly power series.
///
/// Smart-meter and average-category profiles are stored normalized to unit
/// energy (1 kWh over the trace); telemetry profiles are absolute kW.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub id: String,
    pub values: Vec<f32>,
}

impl Profile {
    pub fn new(id: impl Into<String>, values: Vec<f32>) -> Self {
        Self { id: id.into(), values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Energy over the trace in kWh.
    pub fn energy(&self) -> f64 {
        energy(&self.values)
    }
}

fn energy(values: &[f32]) -> f64 {
    values.iter().map(|&v| v as f64).sum::<f64>() * STEP_HOURS
}

/// Spiky/smooth split of a bin for one overload direction. Both lists hold
/// profile indices in ascending order and together cover the bin exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub spiky: Vec<usize>,
    pub smooth: Vec<usize>,
}

impl Partition {
    pub fn from_spiky(spiky: Vec<usize>, n_profiles: usize) -> Result<Self> {
        let mut is_spiky = vec![false; n_profiles];
        for &i in &spiky {
            if i >= n_profiles {
                return Err(Error::Data(format!(
                    "spiky index {i} out of range for bin of {n_profiles} profiles"
                )));
            }
            if is_spiky[i] {
                return Err(Error::Data(format!("duplicate spiky index {i}")));
            }
            is_spiky[i] = true;
        }
        let spiky: Vec<usize> = (0..n_profiles).filter(|&i| is_spiky[i]).collect();
        let smooth = (0..n_profiles).filter(|&i| !is_spiky[i]).collect();
        Ok(Self { spiky, smooth })
    }

    /// Share of the bin in the spiky set.
    pub fn spiky_fraction(&self) -> f64 {
        self.spiky.len() as f64 / (self.spiky.len() + self.smooth.len()) as f64
    }

    pub fn set(&self, spiky: bool) -> &[usize] {
        if spiky {
            &self.spiky
        } else {
            &self.smooth
        }
    }
}

/// Profiles of one consumption bin, stored row-major as `n_profiles × t_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bin {
    pub id: usize,
    pub category: usize,
    /// Yearly consumption range `[low, high]` in kWh covered by the bin.
    pub consumption_range: [f64; 2],
    ids: Vec<String>,
    data: Vec<f32>,
    t_len: usize,
    spiky_plus: Option<Partition>,
    spiky_minus: Option<Partition>,
    /// Profiles that received spike injections during synthesis (empty for
    /// corpora not produced by the generator).
    pub injected_spiky: Vec<usize>,
}

impl Bin {
    pub fn new(
        id: usize,
        category: usize,
        consumption_range: [f64; 2],
        profiles: Vec<Profile>,
    ) -> Result<Self> {
        let t_len = profiles.first().map(Profile::len).unwrap_or(0);
        let mut ids = Vec::with_capacity(profiles.len());
        let mut data = Vec::with_capacity(profiles.len() * t_len);
        for p in profiles {
            if p.len() != t_len {
                return Err(Error::Data(format!(
                    "bin {id}: profile `{}` has length {}, expected {t_len}",
                    p.id,
                    p.len()
                )));
            }
            ids.push(p.id);
            data.extend_from_slice(&p.values);
        }
        Self::from_raw(id, category, consumption_range, ids, data, t_len)
    }

    pub(crate) fn from_raw(
        id: usize,
        category: usize,
        consumption_range: [f64; 2],
        ids: Vec<String>,
        data: Vec<f32>,
        t_len: usize,
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Data(format!("bin {id} has no profiles")));
        }
        if data.len() != ids.len() * t_len {
            return Err(Error::Data(format!(
                "bin {id}: {} values for {} profiles of length {t_len}",
                data.len(),
                ids.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "bin {id}: non-finite value in profile `{}`",
                ids[pos / t_len]
            )));
        }
        Ok(Self {
            id,
            category,
            consumption_range,
            ids,
            data,
            t_len,
            spiky_plus: None,
            spiky_minus: None,
            injected_spiky: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    #[inline]
    pub fn profile(&self, i: usize) -> &[f32] {
        &self.data[i * self.t_len..(i + 1) * self.t_len]
    }

    pub fn profile_id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn profile_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn to_profile(&self, i: usize) -> Profile {
        Profile::new(self.ids[i].clone(), self.profile(i).to_vec())
    }

    pub(crate) fn raw_data(&self) -> &[f32] {
        &self.data
    }

    pub fn partition(&self, direction: Direction) -> Option<&Partition> {
        match direction {
            Direction::Pos => self.spiky_plus.as_ref(),
            Direction::Neg => self.spiky_minus.as_ref(),
        }
    }

    pub fn set_partition(&mut self, direction: Direction, partition: Partition) -> Result<()> {
        if partition.spiky.len() + partition.smooth.len() != self.len() {
            return Err(Error::Data(format!(
                "bin {}: partition covers {} of {} profiles",
                self.id,
                partition.spiky.len() + partition.smooth.len(),
                self.len()
            )));
        }
        match direction {
            Direction::Pos => self.spiky_plus = Some(partition),
            Direction::Neg => self.spiky_minus = Some(partition),
        }
        Ok(())
    }

    /// Classify and store the spiky set for `direction`.
    pub fn classify(&mut self, q_spiky: f64, direction: Direction) -> Result<()> {
        let spiky = classify_spiky(self, q_spiky, direction)?;
        let partition = Partition::from_spiky(spiky, self.len())?;
        self.set_partition(direction, partition)
    }
}

/// Energy-behavioural category grouping one or more bins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
    pub bins: Vec<usize>,
}

/// Immutable once built; shared read-only across estimator workers.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    t_len: usize,
    seed: Option<u64>,
    categories: Vec<Category>,
    bins: Vec<Bin>,
    average_profiles: BTreeMap<String, Profile>,
    telemetry: BTreeMap<String, Profile>,
    q_spiky: Option<f64>,
}

impl Corpus {
    /// Assemble a corpus. Bin ids must equal their position in `bins`.
    pub fn new(
        t_len: usize,
        categories: Vec<Category>,
        bins: Vec<Bin>,
        average_profiles: Vec<Profile>,
        telemetry: Vec<Profile>,
    ) -> Result<Self> {
        if t_len == 0 {
            return Err(Error::Config("corpus needs at least one time step".into()));
        }
        for (pos, bin) in bins.iter().enumerate() {
            if bin.id != pos {
                return Err(Error::Data(format!("bin at position {pos} has id {}", bin.id)));
            }
            if bin.t_len != t_len {
                return Err(Error::Data(format!(
                    "bin {} has profile length {}, corpus uses {t_len}",
                    bin.id, bin.t_len
                )));
            }
            if !categories.iter().any(|c| c.id == bin.category && c.bins.contains(&bin.id)) {
                return Err(Error::Data(format!(
                    "bin {} is not listed by category {}",
                    bin.id, bin.category
                )));
            }
        }
        for c in &categories {
            if let Some(&b) = c.bins.iter().find(|&&b| b >= bins.len()) {
                return Err(Error::Data(format!("category `{}` lists unknown bin {b}", c.name)));
            }
        }
        let keyed = |profiles: Vec<Profile>, what: &str| -> Result<BTreeMap<String, Profile>> {
            let mut map = BTreeMap::new();
            for p in profiles {
                if p.len() != t_len {
                    return Err(Error::Data(format!(
                        "{what} profile `{}` has length {}, expected {t_len}",
                        p.id,
                        p.len()
                    )));
                }
                if p.values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!("{what} profile `{}` is not finite", p.id)));
                }
                let id = p.id.clone();
                if map.insert(id.clone(), p).is_some() {
                    return Err(Error::Data(format!("duplicate {what} profile `{id}`")));
                }
            }
            Ok(map)
        };
        Ok(Self {
            t_len,
            seed: None,
            categories,
            bins,
            average_profiles: keyed(average_profiles, "average")?,
            telemetry: keyed(telemetry, "telemetry")?,
            q_spiky: None,
        })
    }

    /// Corpus with a single category holding all `bins`; convenient for
    /// hand-built test instances.
    pub fn from_bins(t_len: usize, bins: Vec<Vec<Profile>>) -> Result<Self> {
        let n = bins.len();
        let bins = bins
            .into_iter()
            .enumerate()
            .map(|(id, profiles)| Bin::new(id, 0, [0.0, 0.0], profiles))
            .collect::<Result<Vec<_>>>()?;
        let categories = vec![Category { id: 0, name: "default".into(), bins: (0..n).collect() }];
        Self::new(t_len, categories, bins, Vec::new(), Vec::new())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn bins(&self) -> &[Bin] {
        &self.bins
    }

    pub fn bin(&self, id: usize) -> Option<&Bin> {
        self.bins.get(id)
    }

    pub fn bins_mut(&mut self) -> &mut [Bin] {
        &mut self.bins
    }

    pub fn average_profile(&self, category: &str) -> Option<&Profile> {
        self.average_profiles.get(category)
    }

    pub fn average_profiles(&self) -> impl Iterator<Item = &Profile> {
        self.average_profiles.values()
    }

    pub fn telemetry_profile(&self, id: &str) -> Option<&Profile> {
        self.telemetry.get(id)
    }

    pub fn telemetry_profiles(&self) -> impl Iterator<Item = &Profile> {
        self.telemetry.values()
    }

    /// The `q_spiky` used for the stored classification, if every bin has
    /// been classified in both directions.
    pub fn q_spiky(&self) -> Option<f64> {
        self.q_spiky
    }

    pub fn is_classified(&self, direction: Direction) -> bool {
        self.bins.iter().all(|b| b.partition(direction).is_some())
    }

    /// Classify every bin in both directions.
    pub fn classify(&mut self, q_spiky: f64) -> Result<()> {
        for bin in &mut self.bins {
            for direction in Direction::BOTH {
                bin.classify(q_spiky, direction)?;
            }
        }
        self.q_spiky = Some(q_spiky);
        Ok(())
    }

    pub(crate) fn set_q_spiky(&mut self, q: Option<f64>) {
        self.q_spiky = q;
    }
}

/// Quantile binning: assignment of each value to one of `n_bins` bins of
/// (almost) equal size, monotone in the value.
///
/// Values are ranked by a stable sort (ties keep input order) and rank `r`
/// of `n` goes to bin `floor(r * n_bins / n)`, so lower bins receive the
/// extra element when `n` is not divisible.
pub fn quantile_bin(consumptions: &[f64], n_bins: usize) -> Result<Vec<usize>> {
    let n = consumptions.len();
    if n == 0 {
        return Err(Error::Config("quantile binning needs at least one value".into()));
    }
    if n_bins == 0 || n_bins > n {
        return Err(Error::Config(format!("cannot split {n} values into {n_bins} bins")));
    }
    if consumptions.iter().any(|v| v.is_nan()) {
        return Err(Error::Data("NaN consumption".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| consumptions[a].total_cmp(&consumptions[b]));
    let mut assignment = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        assignment[i] = rank * n_bins / n;
    }
    Ok(assignment)
}

/// Per-step median over the bin's profiles; even counts average the two
/// middle values.
pub fn median_profile(bin: &Bin) -> Profile {
    let n = bin.len();
    let mut column = vec![0f32; n];
    let values = (0..bin.t_len)
        .map(|t| {
            for (i, c) in column.iter_mut().enumerate() {
                *c = bin.profile(i)[t];
            }
            column.sort_by(f32::total_cmp);
            if n % 2 == 1 {
                column[n / 2]
            } else {
                ((column[n / 2 - 1] as f64 + column[n / 2] as f64) / 2.0) as f32
            }
        })
        .collect();
    Profile::new(format!("median-bin-{}", bin.id), values)
}

fn check_lengths(profile: &[f32], median: &[f32]) -> Result<()> {
    if profile.len() != median.len() {
        return Err(Error::Contract(format!(
            "profile length {} differs from median length {}",
            profile.len(),
            median.len()
        )));
    }
    Ok(())
}

/// Sum of squared deviations over the steps where the profile lies strictly
/// above the median.
pub fn delta_plus(profile: &[f32], median: &[f32]) -> Result<f64> {
    check_lengths(profile, median)?;
    Ok(profile
        .iter()
        .zip(median)
        .filter(|(s, m)| s > m)
        .map(|(&s, &m)| (s as f64 - m as f64).powi(2))
        .sum())
}

/// Sum of squared deviations over the steps where the profile lies strictly
/// below the median.
pub fn delta_minus(profile: &[f32], median: &[f32]) -> Result<f64> {
    check_lengths(profile, median)?;
    Ok(profile
        .iter()
        .zip(median)
        .filter(|(s, m)| s < m)
        .map(|(&s, &m)| (s as f64 - m as f64).powi(2))
        .sum())
}

/// Number of profiles a `q_spiky` split selects before ties: `ceil((1-q)·n)`,
/// at least one.
pub fn spiky_count(n: usize, q_spiky: f64) -> usize {
    // The tolerance absorbs representation error, e.g. (1 - 0.95) * 100.
    let k = ((1.0 - q_spiky) * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

/// Indices of the profiles whose median-deviation metric is at or above the
/// bin's empirical `q_spiky` quantile.
///
/// The quantile is the sorted value at zero-based position
/// `n - spiky_count(n, q)`; everything tied with it is spiky as well. A bin
/// in which every metric is equal comes back entirely spiky (with a warning).
pub fn classify_spiky(bin: &Bin, q_spiky: f64, direction: Direction) -> Result<Vec<usize>> {
    if !(q_spiky > 0.0 && q_spiky < 1.0) {
        return Err(Error::Config(format!("q_spiky must lie in (0, 1), got {q_spiky}")));
    }
    if bin.is_empty() {
        return Err(Error::Data(format!("bin {} is empty", bin.id)));
    }
    let median = median_profile(bin);
    let metric = match direction {
        Direction::Pos => delta_plus,
        Direction::Neg => delta_minus,
    };
    let deltas = (0..bin.len())
        .map(|i| metric(bin.profile(i), &median.values))
        .collect::<Result<Vec<f64>>>()?;

    let n = deltas.len();
    let mut sorted = deltas.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[n - spiky_count(n, q_spiky)];
    if sorted[0] == sorted[n - 1] {
        warn!(
            "bin {}: all {direction} deviation metrics equal; classifying the whole bin as spiky",
            bin.id
        );
    }
    Ok((0..n).filter(|&i| deltas[i] >= threshold).collect())
}

/// Scale a unit-energy profile to a yearly consumption of `gamma` kWh.
pub fn scale_profile(profile: &Profile, gamma: f64) -> Vec<f64> {
    profile.values.iter().map(|&v| gamma * v as f64).collect()
}
