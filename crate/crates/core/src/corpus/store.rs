//! On-disk corpus layout.
//!
//! ```text
//! <dir>/corpus.json      metadata (T, seed, categories, bins, spiky sets, ranges)
//! <dir>/bin-0000.f32     |profiles| × T little-endian f32, row-major
//! <dir>/average.f32      average-category profiles, same layout
//! <dir>/telemetry.f32    telemetry profiles, same layout
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Bin, Category, Corpus, Partition, Profile};
use crate::{Direction, Error, Result};

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CorpusMeta {
    format_version: u32,
    t_len: usize,
    seed: Option<u64>,
    q_spiky: Option<f64>,
    categories: Vec<Category>,
    bins: Vec<BinMeta>,
    average_profiles: ProfileSetMeta,
    telemetry: ProfileSetMeta,
}

#[derive(Serialize, Deserialize)]
struct BinMeta {
    id: usize,
    category: usize,
    file: String,
    consumption_range: [f64; 2],
    profile_ids: Vec<String>,
    spiky_plus: Option<Vec<usize>>,
    spiky_minus: Option<Vec<usize>>,
    #[serde(default)]
    injected_spiky: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ProfileSetMeta {
    file: String,
    ids: Vec<String>,
}

fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 4 {
        return Err(Error::Data(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bins = Vec::with_capacity(corpus.bins().len());
    for bin in corpus.bins() {
        let file = format!("bin-{:04}.f32", bin.id);
        write_f32(&dir.join(&file), bin.raw_data().iter().copied())?;
        bins.push(BinMeta {
            id: bin.id,
            category: bin.category,
            file,
            consumption_range: bin.consumption_range,
            profile_ids: bin.profile_ids().to_vec(),
            spiky_plus: bin.partition(Direction::Pos).map(|p| p.spiky.clone()),
            spiky_minus: bin.partition(Direction::Neg).map(|p| p.spiky.clone()),
            injected_spiky: bin.injected_spiky.clone(),
        });
    }

    let profile_set = |file: &str, profiles: Vec<&Profile>| -> Result<ProfileSetMeta> {
        write_f32(&dir.join(file), profiles.iter().flat_map(|p| p.values.iter().copied()))?;
        Ok(ProfileSetMeta {
            file: file.to_string(),
            ids: profiles.iter().map(|p| p.id.clone()).collect(),
        })
    };
    let average_profiles = profile_set("average.f32", corpus.average_profiles().collect())?;
    let telemetry = profile_set("telemetry.f32", corpus.telemetry_profiles().collect())?;

    let meta = CorpusMeta {
        format_version: CORPUS_FORMAT_VERSION,
        t_len: corpus.t_len(),
        seed: corpus.seed(),
        q_spiky: corpus.q_spiky(),
        categories: corpus.categories().to_vec(),
        bins,
        average_profiles,
        telemetry,
    };
    fs::write(dir.join("corpus.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let meta: CorpusMeta = serde_json::from_slice(&fs::read(dir.join("corpus.json"))?)?;
    if meta.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported corpus format version {}",
            meta.format_version
        )));
    }
    let t_len = meta.t_len;

    let mut bins = Vec::with_capacity(meta.bins.len());
    for b in meta.bins {
        let data = read_f32(&dir.join(&b.file), b.profile_ids.len() * t_len)?;
        let n = b.profile_ids.len();
        let mut bin = Bin::from_raw(b.id, b.category, b.consumption_range, b.profile_ids, data, t_len)?;
        if let Some(spiky) = b.spiky_plus {
            bin.set_partition(Direction::Pos, Partition::from_spiky(spiky, n)?)?;
        }
        if let Some(spiky) = b.spiky_minus {
            bin.set_partition(Direction::Neg, Partition::from_spiky(spiky, n)?)?;
        }
        bin.injected_spiky = b.injected_spiky;
        bins.push(bin);
    }

    let profile_set = |set: ProfileSetMeta| -> Result<Vec<Profile>> {
        let data = read_f32(&dir.join(&set.file), set.ids.len() * t_len)?;
        Ok(set
            .ids
            .into_iter()
            .zip(data.chunks_exact(t_len.max(1)))
            .map(|(id, values)| Profile::new(id, values.to_vec()))
            .collect())
    };
    let average = profile_set(meta.average_profiles)?;
    let telemetry = profile_set(meta.telemetry)?;

    let mut corpus = Corpus::new(t_len, meta.categories, bins, average, telemetry)?;
    if let Some(seed) = meta.seed {
        corpus = corpus.with_seed(seed);
    }
    let classified = Direction::BOTH.iter().all(|&d| corpus.is_classified(d));
    corpus.set_q_spiky(meta.q_spiky.filter(|_| classified));
    Ok(corpus)
}
