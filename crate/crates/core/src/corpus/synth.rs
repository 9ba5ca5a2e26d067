//! Parametric generator for smart-meter style corpora.
//!
//! Profiles combine a daily/weekly/seasonal base shape with multiplicative
//! noise, Pareto-sized spike bursts for a configurable share of profiles, and
//! an optional rooftop-PV export term. Every profile is normalized to unit
//! energy and rounded to `f32`, so a corpus survives the binary file format
//! unchanged.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Pareto, Poisson};
use serde::{Deserialize, Serialize};

use super::{quantile_bin, Bin, Category, Corpus, Profile};
use crate::{Error, Result, STEP_HOURS};

const STEPS_PER_DAY: usize = 96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// Number of quarter-hour steps per profile (35,040 for a full year).
    pub t_len: usize,
    pub categories: Vec<CategorySpec>,
    /// Names of the average-profile (group 3) categories.
    pub average_categories: Vec<String>,
    /// Number of telemetry (group 2) profiles, ids `tel-0`, `tel-1`, ...
    pub telemetry_profiles: usize,
    pub min_bins_per_category: usize,
    pub max_bins_per_category: usize,
    pub min_profiles_per_bin: usize,
    /// Classification threshold applied after synthesis.
    pub q_spiky: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            t_len: 35_040,
            categories: vec![CategorySpec::default()],
            average_categories: vec!["avg-commercial".into()],
            telemetry_profiles: 2,
            min_bins_per_category: 2,
            max_bins_per_category: 4,
            min_profiles_per_bin: 50,
            q_spiky: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategorySpec {
    pub name: String,
    pub bins: usize,
    pub profiles_per_bin: usize,
    /// Median yearly consumption (kWh) of the category.
    pub median_consumption_kwh: f64,
    /// Log-normal sigma of yearly consumption across customers.
    pub consumption_sigma: f64,
    /// Share of profiles per bin that receive spike injections.
    pub spike_fraction: f64,
    /// Expected spike bursts per day for a spiky profile.
    pub spike_rate_per_day: f64,
    /// Pareto tail index of burst magnitudes (smaller is heavier).
    pub spike_shape: f64,
    /// Share of profiles with rooftop PV.
    pub pv_fraction: f64,
    /// Relative weight of the evening/morning peaks in the daily shape.
    pub daily_amplitude: f64,
    pub seasonal_amplitude: f64,
    /// Standard deviation of the multiplicative per-step noise.
    pub noise: f64,
}

impl Default for CategorySpec {
    fn default() -> Self {
        Self {
            name: "household".into(),
            bins: 2,
            profiles_per_bin: 60,
            median_consumption_kwh: 3_000.0,
            consumption_sigma: 0.4,
            spike_fraction: 0.1,
            spike_rate_per_day: 0.5,
            spike_shape: 1.8,
            pv_fraction: 0.2,
            daily_amplitude: 0.7,
            seasonal_amplitude: 0.25,
            noise: 0.3,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.t_len < 1 {
            return bad("t_len must be at least 1".into());
        }
        if self.categories.is_empty() {
            return bad("at least one smart-meter category is required".into());
        }
        if self.min_bins_per_category < 1 || self.min_bins_per_category > self.max_bins_per_category {
            return bad(format!(
                "invalid bins-per-category range [{}, {}]",
                self.min_bins_per_category, self.max_bins_per_category
            ));
        }
        if !(self.q_spiky > 0.0 && self.q_spiky < 1.0) {
            return bad(format!("q_spiky must lie in (0, 1), got {}", self.q_spiky));
        }
        for c in &self.categories {
            if c.bins < self.min_bins_per_category || c.bins > self.max_bins_per_category {
                return bad(format!(
                    "category `{}` has {} bins, allowed {}..={}",
                    c.name, c.bins, self.min_bins_per_category, self.max_bins_per_category
                ));
            }
            if c.profiles_per_bin == 0 {
                return bad(format!("category `{}` has zero profiles per bin", c.name));
            }
            if c.profiles_per_bin < self.min_profiles_per_bin {
                return bad(format!(
                    "category `{}` has {} profiles per bin, minimum is {}",
                    c.name, c.profiles_per_bin, self.min_profiles_per_bin
                ));
            }
            for (what, v) in [("spike_fraction", c.spike_fraction), ("pv_fraction", c.pv_fraction)] {
                if !(0.0..=1.0).contains(&v) {
                    return bad(format!("category `{}`: {what} must lie in [0, 1]", c.name));
                }
            }
            if !(c.median_consumption_kwh > 0.0)
                || !(c.consumption_sigma >= 0.0)
                || !(c.spike_rate_per_day > 0.0)
                || !(c.spike_shape > 0.0)
                || !(c.noise >= 0.0)
            {
                return bad(format!("category `{}` has non-positive shape parameters", c.name));
            }
        }
        Ok(())
    }
}

/// Generate a classified corpus. A pure function of `(spec, seed)`.
pub fn synthesize_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = spec.t_len;

    let mut categories = Vec::with_capacity(spec.categories.len());
    let mut bins = Vec::new();
    for (cat_id, cat) in spec.categories.iter().enumerate() {
        let n = cat.bins * cat.profiles_per_bin;
        let consumption = LogNormal::new(cat.median_consumption_kwh.ln(), cat.consumption_sigma)
            .map_err(|e| Error::Config(format!("category `{}`: {e}", cat.name)))?;
        let gammas: Vec<f64> = (0..n).map(|_| consumption.sample(&mut rng)).collect();
        let assignment = quantile_bin(&gammas, cat.bins)?;

        let mut bin_ids = Vec::with_capacity(cat.bins);
        for local in 0..cat.bins {
            let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == local).collect();
            let range = members.iter().fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], &i| {
                [lo.min(gammas[i]), hi.max(gammas[i])]
            });
            let n_b = members.len();
            let n_spiky = (cat.spike_fraction * n_b as f64).round() as usize;
            let injected = choose_subset(&mut rng, n_b, n_spiky);
            let mut is_spiky = vec![false; n_b];
            for &i in &injected {
                is_spiky[i] = true;
            }

            let bin_id = bins.len();
            let profiles = (0..n_b)
                .map(|k| {
                    let values = household_profile(&mut rng, cat, t_len, is_spiky[k])?;
                    Ok(Profile::new(format!("c{cat_id}-b{bin_id}-p{k}"), values))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut bin = Bin::new(bin_id, cat_id, range, profiles)?;
            bin.injected_spiky = injected;
            bins.push(bin);
            bin_ids.push(bin_id);
        }
        categories.push(Category { id: cat_id, name: cat.name.clone(), bins: bin_ids });
    }

    let average = spec
        .average_categories
        .iter()
        .enumerate()
        .map(|(k, name)| Profile::new(name.clone(), average_profile(t_len, k)))
        .collect();
    let telemetry = (0..spec.telemetry_profiles)
        .map(|k| Ok(Profile::new(format!("tel-{k}"), telemetry_profile(&mut rng, t_len)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut corpus = Corpus::new(t_len, categories, bins, average, telemetry)?.with_seed(seed);
    corpus.classify(spec.q_spiky)?;
    Ok(corpus)
}

fn choose_subset(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut chosen = rand::seq::index::sample(rng, n, k.min(n)).into_vec();
    chosen.sort_unstable();
    chosen
}

fn hour_and_day(t: usize) -> (f64, usize) {
    let h = (t % STEPS_PER_DAY) as f64 * STEP_HOURS + STEP_HOURS / 2.0;
    (h, t / STEPS_PER_DAY)
}

fn bump(h: f64, centre: f64, width: f64) -> f64 {
    (-((h - centre) / width).powi(2)).exp()
}

fn solar(h: f64, day: usize) -> f64 {
    let diurnal = (PI * (h - 6.0) / 14.0).sin().max(0.0);
    let season = 0.65 + 0.35 * (2.0 * PI * (day as f64 - 172.0) / 365.0).cos();
    if (6.0..20.0).contains(&h) {
        diurnal * season
    } else {
        0.0
    }
}

fn household_profile(
    rng: &mut ChaCha8Rng,
    cat: &CategorySpec,
    t_len: usize,
    spiky: bool,
) -> Result<Vec<f32>> {
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let evening = 19.0 + 0.8 * gauss.sample(rng);
    let morning = 7.5 + 0.6 * gauss.sample(rng);
    let weekend_boost = 1.0 + 0.15 * rng.random::<f64>();

    let mut values: Vec<f64> = (0..t_len)
        .map(|t| {
            let (h, day) = hour_and_day(t);
            let peaks = 0.6 * bump(h, evening, 2.2) + 0.35 * bump(h, morning, 1.3);
            let shape = (1.0 - cat.daily_amplitude) * 0.6 + cat.daily_amplitude * (0.3 + peaks);
            let season =
                1.0 + cat.seasonal_amplitude * (2.0 * PI * (day as f64 - 15.0) / 365.0).cos();
            let week = if day % 7 >= 5 { weekend_boost } else { 1.0 };
            let jitter = (1.0 + cat.noise * gauss.sample(rng)).max(0.0);
            shape * season * week * jitter
        })
        .collect();
    let mean_base = values.iter().sum::<f64>() / t_len as f64;

    if spiky {
        let days = (t_len as f64 / STEPS_PER_DAY as f64).max(1.0);
        let bursts = Poisson::new(cat.spike_rate_per_day * days)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(rng)
            .max(1.0) as usize;
        let size = Pareto::new(3.0 * mean_base.max(1e-12), cat.spike_shape)
            .map_err(|e| Error::Config(e.to_string()))?;
        for _ in 0..bursts {
            let start = rng.random_range(0..t_len);
            let duration = rng.random_range(1..=8usize);
            let magnitude = size.sample(rng).min(40.0 * mean_base);
            for v in values.iter_mut().skip(start).take(duration) {
                *v += magnitude;
            }
        }
    }

    if rng.random::<f64>() < cat.pv_fraction {
        let capacity = 1.5 * mean_base * LogNormal::new(0.0, 0.5).expect("valid").sample(rng);
        let clouds: Vec<f64> =
            (0..t_len.div_ceil(STEPS_PER_DAY)).map(|_| rng.random_range(0.3..1.0)).collect();
        let pv: Vec<f64> = (0..t_len)
            .map(|t| {
                let (h, day) = hour_and_day(t);
                capacity * solar(h, day) * clouds[day]
            })
            .collect();
        let gross: f64 = values.iter().sum();
        let export: f64 = pv.iter().sum();
        // keep net consumption clearly positive so unit-energy scaling is meaningful
        let damp = if export > 0.4 * gross { 0.4 * gross / export } else { 1.0 };
        for (v, p) in values.iter_mut().zip(&pv) {
            *v -= damp * p;
        }
    }

    Ok(normalize(&values))
}

fn normalize(values: &[f64]) -> Vec<f32> {
    let energy = values.iter().sum::<f64>() * STEP_HOURS;
    values.iter().map(|v| (v / energy) as f32).collect()
}

fn average_profile(t_len: usize, variant: usize) -> Vec<f32> {
    let opening = 8.0 + (variant % 3) as f64;
    let values: Vec<f64> = (0..t_len)
        .map(|t| {
            let (h, day) = hour_and_day(t);
            let open = if day % 7 < 5 && h >= opening && h < opening + 9.0 { 1.0 } else { 0.35 };
            let season = 1.0 + 0.15 * (2.0 * PI * (day as f64 - 15.0) / 365.0).cos();
            open * season
        })
        .collect();
    normalize(&values)
}

fn telemetry_profile(rng: &mut ChaCha8Rng, t_len: usize) -> Result<Vec<f32>> {
    let level = rng.random_range(20.0..200.0);
    let noise = Normal::new(0.0f64, 0.08).map_err(|e| Error::Config(e.to_string()))?;
    Ok((0..t_len)
        .map(|t| {
            let (h, day) = hour_and_day(t);
            let open = if day % 7 < 5 && (7.0..18.0).contains(&h) { 1.0 } else { 0.4 };
            (level * open * (1.0 + noise.sample(rng)).max(0.0)) as f32
        })
        .collect())
}
