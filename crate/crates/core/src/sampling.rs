//! Nominal and biased profile-selection distributions.
//!
//! A selection is drawn in two stages: a Bernoulli spiky/smooth category per
//! group-1 customer, then a uniform profile from that category of the
//! customer's bin. Under the nominal probabilities `u` (spiky share of each
//! bin) this reproduces a plain uniform draw over the bin; under biased
//! probabilities `v` the likelihood ratio [`importance_weight`] corrects the
//! estimator.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;
use crate::demand::{PreparedAsset, ProfileSelection, TimeSample};
use crate::{Direction, Error, Result};

/// Replayable random stream keyed by `(seed, stream_id)`.
///
/// [`RngStream::at`] positions a ChaCha8 generator at a per-counter offset,
/// so the draws for trace `j` do not depend on how many other traces were
/// evaluated, or in which order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

/// Words reserved per counter value (2^36 u32 words, far above any trace).
const WORDS_PER_COUNTER: u32 = 36;

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Independent child stream, e.g. one per CE iteration.
    pub fn derive(&self, tag: u64) -> Self {
        Self { seed: self.seed, stream_id: splitmix64(self.stream_id ^ splitmix64(tag)) }
    }

    pub fn at(&self, counter: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng.set_word_pos((counter as u128) << WORDS_PER_COUNTER);
        rng
    }
}

/// SplitMix64 finalizer, used to spread structured ids over 64 bits.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Spiky-category indicator per group-1 customer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryAssignment(pub Vec<bool>);

impl CategoryAssignment {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Nominal (`u`) and biased (`v`) spiky probabilities for one asset.
#[derive(Debug, Clone, PartialEq)]
pub struct ISParams {
    u: Vec<f64>,
    v: Vec<f64>,
    direction: Direction,
    log_spiky: Vec<f64>,
    log_smooth: Vec<f64>,
}

impl ISParams {
    /// Every `v_i` must lie strictly inside (0, 1), except for customers
    /// whose bin is degenerate (`u_i` of exactly 0 or 1): those must keep
    /// `v_i = u_i`, draw the only available category and contribute a factor
    /// of one to the weight.
    pub fn new(u: Vec<f64>, v: Vec<f64>, direction: Direction) -> Result<Self> {
        if u.len() != v.len() {
            return Err(Error::Contract(format!("|u| = {} but |v| = {}", u.len(), v.len())));
        }
        if let Some((i, &p)) = u.iter().enumerate().find(|(_, &p)| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Contract(format!("u[{i}] = {p} is not a probability")));
        }
        let pinned = |i: usize| is_degenerate(u[i]) && v[i] == u[i];
        if let Some((i, &p)) = v.iter().enumerate().find(|&(i, &p)| !(p > 0.0 && p < 1.0) && !pinned(i)) {
            return Err(Error::DegenerateDistribution(format!("v[{i}] = {p} is not in (0, 1)")));
        }
        let ratio = |a: f64, b: f64| if a == b { 0.0 } else { (a / b).ln() };
        let log_spiky = u.iter().zip(&v).map(|(&u, &v)| ratio(u, v)).collect();
        let log_smooth = u.iter().zip(&v).map(|(&u, &v)| ratio(1.0 - u, 1.0 - v)).collect();
        Ok(Self { u, v, direction, log_spiky, log_smooth })
    }

    /// `v = u`: importance sampling that reduces to plain Monte Carlo.
    pub fn nominal(u: Vec<f64>, direction: Direction) -> Result<Self> {
        Self::new(u.clone(), u, direction)
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn with_v(&self, v: Vec<f64>) -> Result<Self> {
        Self::new(self.u.clone(), v, self.direction)
    }
}

/// A nominal probability that leaves no choice of category.
pub fn is_degenerate(u: f64) -> bool {
    u == 0.0 || u == 1.0
}

/// Copy of `v` with every degenerate coordinate reset to its `u`.
pub fn pin_degenerate(u: &[f64], v: &[f64]) -> Vec<f64> {
    u.iter().zip(v).map(|(&u, &v)| if is_degenerate(u) { u } else { v }).collect()
}

/// Spiky share of each group-1 customer's bin.
pub fn initial_u(asset: &PreparedAsset, corpus: &Corpus, direction: Direction) -> Result<Vec<f64>> {
    asset
        .members()
        .iter()
        .map(|m| {
            let bin = corpus
                .bin(m.bin)
                .ok_or_else(|| Error::Data(format!("unknown bin {}", m.bin)))?;
            let partition = bin.partition(direction).ok_or_else(|| {
                Error::State(format!("bin {} is not classified for direction {direction}", m.bin))
            })?;
            let u = partition.spiky_fraction();
            if !(u > 0.0 && u < 1.0) {
                warn!("bin {}: degenerate spiky share {u} for direction {direction}", m.bin);
            }
            Ok(u)
        })
        .collect()
}

/// Independent Bernoulli draws with probability `v_i` (or `u_i`).
pub fn sample_assignment<R: Rng + ?Sized>(params: &ISParams, use_biased: bool, rng: &mut R) -> CategoryAssignment {
    let p = if use_biased { &params.v } else { &params.u };
    CategoryAssignment(p.iter().map(|&p| rng.random::<f64>() < p).collect())
}

/// Uniform draw from the spiky or smooth set of each customer's bin.
pub fn sample_profiles<R: Rng + ?Sized>(
    asset: &PreparedAsset,
    corpus: &Corpus,
    x: &CategoryAssignment,
    direction: Direction,
    rng: &mut R,
) -> Result<ProfileSelection> {
    if x.len() != asset.n_s() {
        return Err(Error::Contract(format!(
            "assignment of length {} for {} customers",
            x.len(),
            asset.n_s()
        )));
    }
    let mut out = Vec::with_capacity(x.len());
    for (m, &spiky) in asset.members().iter().zip(&x.0) {
        let bin = &corpus.bins()[m.bin];
        let set = bin
            .partition(direction)
            .ok_or_else(|| Error::State(format!("bin {} is not classified", m.bin)))?
            .set(spiky);
        if set.is_empty() {
            return Err(Error::State(format!(
                "bin {} has an empty {} set",
                m.bin,
                if spiky { "spiky" } else { "smooth" }
            )));
        }
        out.push(set[rng.random_range(0..set.len())]);
    }
    Ok(ProfileSelection(out))
}

/// Plain uniform draw over each customer's whole bin.
pub fn sample_uniform_selection<R: Rng + ?Sized>(
    asset: &PreparedAsset,
    corpus: &Corpus,
    rng: &mut R,
) -> ProfileSelection {
    ProfileSelection(
        asset
            .members()
            .iter()
            .map(|m| rng.random_range(0..corpus.bins()[m.bin].len()))
            .collect(),
    )
}

/// `m` steps drawn uniformly from `0..t_len`, with replacement.
pub fn sample_times<R: Rng + ?Sized>(m: usize, t_len: usize, rng: &mut R) -> Result<TimeSample> {
    if m < 1 || m > t_len {
        return Err(Error::Config(format!("need 1 <= m <= T, got m = {m}, T = {t_len}")));
    }
    Ok(TimeSample::Sampled((0..m).map(|_| rng.random_range(0..t_len)).collect()))
}

/// `ln W(x; u, v)`.
pub fn log_importance_weight(x: &CategoryAssignment, params: &ISParams) -> f64 {
    x.0.iter()
        .enumerate()
        .map(|(i, &s)| if s { params.log_spiky[i] } else { params.log_smooth[i] })
        .sum()
}

/// Likelihood ratio `f(x; u) / g(x; v)`, accumulated in log space.
pub fn importance_weight(x: &CategoryAssignment, params: &ISParams) -> f64 {
    log_importance_weight(x, params).exp()
}

/// `Π p_i^{x_i} (1-p_i)^{1-x_i}`.
pub fn bernoulli_pmf(x: &CategoryAssignment, p: &[f64]) -> f64 {
    x.0.iter().zip(p).map(|(&s, &p)| if s { p } else { 1.0 - p }).product()
}
