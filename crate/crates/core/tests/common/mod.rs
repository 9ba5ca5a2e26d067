//! Toy instances and a brute-force risk oracle shared by integration tests.
//!
//! The oracle enumerates every profile selection and every time step, so it
//! is only usable for a handful of customers with small bins and short
//! horizons. It reads profile values straight from the corpus and does not
//! go through the library's demand or sampling code.

#![allow(dead_code)]

use gridrisk::corpus::Category;
use gridrisk::{Asset, Corpus, Customer, Direction, Profile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Toy {
    pub corpus: Corpus,
    pub asset: Asset,
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; keeps this module free of distribution crates
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Scaled group-1 rows and the fixed trace of an asset, recomputed from
/// the raw corpus.
fn decompose(corpus: &Corpus, asset: &Asset) -> (Vec<Vec<Vec<f64>>>, Vec<f64>) {
    let t_len = corpus.t_len();
    let mut fixed = vec![0.0; t_len];
    let mut members = Vec::new();
    for c in &asset.customers {
        match c {
            Customer::SmartMeter { gamma, bin } => {
                let b = corpus.bin(*bin).expect("bin");
                members.push((0..b.len()).map(|k| b.profile(k).iter().map(|&v| gamma * f64::from(v)).collect()).collect());
            }
            Customer::Telemetry { profile } => {
                let p = corpus.telemetry_profile(profile).expect("telemetry");
                for (f, &v) in fixed.iter_mut().zip(&p.values) {
                    *f += f64::from(v);
                }
            }
            Customer::Average { gamma, category } => {
                let p = corpus.average_profile(category).expect("average");
                for (f, &v) in fixed.iter_mut().zip(&p.values) {
                    *f += gamma * f64::from(v);
                }
            }
        }
    }
    (members, fixed)
}

/// Call `f(d)` for the demand at every (selection, step) pair, each pair
/// carrying equal probability.
pub fn for_each_demand(corpus: &Corpus, asset: &Asset, mut f: impl FnMut(f64)) {
    let (members, fixed) = decompose(corpus, asset);
    let mut idx = vec![0usize; members.len()];
    loop {
        for (t, &base) in fixed.iter().enumerate() {
            let mut d = base;
            for (rows, &k) in members.iter().zip(&idx) {
                d += rows[k][t];
            }
            f(d);
        }
        // odometer over the selection
        let mut i = 0;
        loop {
            if i == idx.len() {
                return;
            }
            idx[i] += 1;
            if idx[i] < members[i].len() {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
    }
}

/// Exact overload probability `P(sign·D > d_cap)` under uniform profile
/// selection and a uniform time step.
pub fn exact_risk(corpus: &Corpus, asset: &Asset, direction: Direction) -> f64 {
    let s = direction.sign();
    let (mut hits, mut total) = (0u64, 0u64);
    for_each_demand(corpus, asset, |d| {
        total += 1;
        if s * d > asset.d_cap {
            hits += 1;
        }
    });
    hits as f64 / total as f64
}

/// A rating halfway between two adjacent distinct values of `|D|`, placed so
/// that roughly a fraction `1 - q` of the enumerated `|D|` values exceed it.
pub fn cap_at_quantile(corpus: &Corpus, asset: &Asset, q: f64) -> f64 {
    let mut values = Vec::new();
    for_each_demand(corpus, asset, |d| values.push(d.abs()));
    values.sort_by(f64::total_cmp);
    values.dedup();
    let k = ((q * values.len() as f64) as usize).clamp(0, values.len() - 2);
    0.5 * (values[k] + values[k + 1])
}

/// Random instance with `n_s` customers spread over up to three bins of two
/// to four standard-normal profiles, rated at the 90th percentile of `|D|`.
pub fn random_toy(seed: u64, n_s: usize, t_len: usize) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_bins = rng.random_range(1..=3usize);
    let bins: Vec<Vec<Profile>> = (0..n_bins)
        .map(|b| {
            let n = rng.random_range(2..=4usize);
            (0..n)
                .map(|k| {
                    let values = (0..t_len).map(|_| std_normal(&mut rng) as f32).collect();
                    Profile::new(format!("b{b}-p{k}"), values)
                })
                .collect()
        })
        .collect();
    let mut corpus = Corpus::from_bins(t_len, bins).expect("toy corpus");
    corpus.classify(0.95).expect("classify");
    let customers = (0..n_s)
        .map(|_| Customer::SmartMeter { gamma: rng.random_range(0.5..2.0), bin: rng.random_range(0..n_bins) })
        .collect();
    let mut asset = Asset { id: format!("toy-{seed}"), d_cap: 1.0, customers };
    asset.d_cap = cap_at_quantile(&corpus, &asset, 0.9);
    Toy { corpus, asset }
}

/// Customers whose bins hold one profile that peaks at a single step and
/// `profiles_per_bin - 1` identical flat profiles. The rating is exceeded
/// only when at least `need` customers draw their peaked profile, so the
/// risk is a binomial tail divided by `t_len`.
pub fn peaked_toy(n_customers: usize, profiles_per_bin: usize, t_len: usize, need: usize) -> Toy {
    let (base, peak, step) = (0.1f32, 1.0f32, t_len / 2);
    let bins: Vec<Vec<Profile>> = (0..n_customers)
        .map(|b| {
            (0..profiles_per_bin)
                .map(|k| {
                    let mut values = vec![base; t_len];
                    if k == 0 {
                        values[step] = peak;
                    }
                    Profile::new(format!("b{b}-p{k}"), values)
                })
                .collect()
        })
        .collect();
    let mut corpus = Corpus::from_bins(t_len, bins).expect("peaked corpus");
    corpus.classify(0.95).expect("classify");
    let jump = f64::from(peak - base);
    let floor = n_customers as f64 * f64::from(base);
    let d_cap = floor + jump * (need as f64 - 0.5);
    let customers = (0..n_customers).map(|b| Customer::SmartMeter { gamma: 1.0, bin: b }).collect();
    Toy { corpus, asset: Asset { id: format!("peaked-{n_customers}-{need}"), d_cap, customers } }
}

/// `P(Binomial(n, p) >= k)`.
pub fn binomial_tail(n: usize, p: f64, k: usize) -> f64 {
    let choose = |n: usize, k: usize| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (k..=n).map(|j| choose(n, j) * p.powi(j as i32) * (1.0 - p).powi((n - j) as i32)).sum()
}

/// Corpus with one category, a telemetry trace and an average profile, for
/// checking that fixed demand is accounted for.
pub fn toy_with_fixed_groups(seed: u64) -> Toy {
    let base = random_toy(seed, 3, 6);
    let t_len = base.corpus.t_len();
    let bins: Vec<_> = base.corpus.bins().to_vec();
    let categories = vec![Category { id: 0, name: "default".into(), bins: (0..bins.len()).collect() }];
    let tel = Profile::new("tel-0", (0..t_len).map(|t| 0.3 * t as f32).collect());
    let avg = Profile::new("avg", (0..t_len).map(|t| if t % 2 == 0 { 1.0 } else { -0.5 }).collect());
    let mut corpus = Corpus::new(t_len, categories, bins, vec![avg], vec![tel]).expect("corpus");
    corpus.classify(0.95).expect("classify");
    let mut asset = base.asset;
    asset.customers.push(Customer::Telemetry { profile: "tel-0".into() });
    asset.customers.push(Customer::Average { gamma: 0.7, category: "avg".into() });
    asset.d_cap = cap_at_quantile(&corpus, &asset, 0.85);
    Toy { corpus, asset }
}
