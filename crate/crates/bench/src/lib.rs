//! Shared fixtures for the criterion benches.

use gridrisk::corpus::{synthesize_corpus, CategorySpec};
use gridrisk::demand::{synthesize_assets, AssetSynthSpec};
use gridrisk::{Corpus, CorpusSpec, PreparedAsset};

/// A four-week corpus and assets of roughly `customers` smart-meter
/// customers each, seeded so every bench run sees the same data.
pub struct Fixture {
    pub corpus: Corpus,
    pub assets: Vec<PreparedAsset>,
}

impl Fixture {
    pub fn new(customers: usize, n_assets: usize) -> Self {
        let spec = CorpusSpec {
            t_len: 96 * 28,
            categories: vec![CategorySpec { bins: 3, profiles_per_bin: 60, ..Default::default() }],
            ..Default::default()
        };
        let corpus = synthesize_corpus(&spec, 7).expect("fixture corpus");
        let synth = AssetSynthSpec { min_customers: customers, max_customers: customers, ..Default::default() };
        let assets = synthesize_assets(&corpus, n_assets, 7, &synth)
            .expect("fixture assets")
            .iter()
            .map(|a| a.prepare(&corpus).expect("fixture asset is valid"))
            .collect();
        Fixture { corpus, assets }
    }

    pub fn asset(&self) -> &PreparedAsset {
        &self.assets[0]
    }
}
