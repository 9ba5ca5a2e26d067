use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;
use serde::Serialize;

use gridrisk::bench::{
    run_campaign, run_method, speedup_report, CampaignConfig, ReportOptions, RunRecord, SpeedupConvention,
};
use gridrisk::corpus::{read_corpus, synthesize_corpus, write_corpus};
use gridrisk::demand::{synthesize_assets, AssetSynthSpec};
use gridrisk::generalize::{derive_bin_probs, read_ce_results, Averaging, GeneralizeConfig};
use gridrisk::{
    ce_estimate, AssetFile, CeConfig, Corpus, CorpusSpec, Direction, EstimatorConfig, GeneralizedBinProbs, Method,
    RiskEstimate, RngStream,
};

#[derive(Parser)]
#[command(name = "gridrisk", version, about = "Overload probability estimation for distribution assets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic profile corpus.
    GenCorpus(GenCorpusArgs),
    /// Validate an asset file against a corpus, or synthesize one.
    DefineAssets(DefineAssetsArgs),
    /// Estimate the overload probability of one asset.
    Estimate(EstimateArgs),
    /// Pool cross-entropy results into bin-level probabilities.
    Generalize(GeneralizeArgs),
    /// Run a replicated estimator campaign.
    Bench(BenchArgs),
    /// Summarize campaign records as speed-up tables.
    Report(ReportArgs),
}

fn parse<T>(s: &str) -> Result<T, String>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Generator settings (JSON); defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DefineAssetsArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Asset file to validate.
    #[arg(long, required_unless_present = "synthesize")]
    assets: Option<PathBuf>,
    /// Generate this many synthetic assets instead of validating.
    #[arg(long, requires = "out")]
    synthesize: Option<usize>,
    /// Asset generator settings (JSON).
    #[arg(long)]
    synth_spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SamplingArgs {
    /// Stop once the relative error drops below this value.
    #[arg(long, default_value_t = 0.1)]
    beta_target: f64,
    /// Time steps sampled per trace.
    #[arg(long, default_value_t = 2000)]
    m: usize,
    /// Trace budget.
    #[arg(long, default_value_t = 20_000)]
    n_max: u64,
    /// Traces per convergence check.
    #[arg(long, default_value_t = 50)]
    batch: usize,
    /// Evaluate every time step instead of `m` sampled ones.
    #[arg(long)]
    full_year: bool,
    /// Evaluate traces on a single thread.
    #[arg(long)]
    serial: bool,
}

#[derive(Args, Clone)]
struct CeArgs {
    #[arg(long, default_value_t = 500)]
    n_opt: usize,
    #[arg(long, default_value_t = 0.05)]
    rho: f64,
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    /// Spiky quantile; the corpus is reclassified when this differs from its own.
    #[arg(long)]
    q_spiky: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    n_max_zero: u64,
    /// Let the intermediate threshold decrease between iterations.
    #[arg(long)]
    no_monotone_threshold: bool,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    assets: PathBuf,
    #[arg(long)]
    asset: String,
    #[arg(long, value_parser = parse::<Method>)]
    method: Method,
    #[arg(long, value_parser = parse::<Direction>, default_value = "pos")]
    direction: Direction,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[command(flatten)]
    ce: CeArgs,
    /// Write the cross-entropy iterations and final parameters as JSONL.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Generalized bin probabilities for `gen-is`.
    #[arg(long)]
    gen_probs: Option<PathBuf>,
}

#[derive(Args)]
struct GeneralizeArgs {
    /// Directory of cross-entropy trace files.
    #[arg(long)]
    ce_results: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_parser = parse::<Direction>, default_value = "pos")]
    direction: Direction,
    #[arg(long, default_value_t = 80)]
    max_customers: usize,
    #[arg(long, default_value_t = 0.15)]
    threshold: f64,
    /// Average within each asset before averaging across assets.
    #[arg(long)]
    per_asset: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    assets: PathBuf,
    /// Restrict the campaign to these asset ids.
    #[arg(long, value_delimiter = ',')]
    asset_ids: Vec<String>,
    #[arg(long, value_delimiter = ',', value_parser = parse::<Method>, default_value = "ref,mc,ce-is,gen-is")]
    methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', value_parser = parse::<Direction>, default_value = "pos,neg")]
    directions: Vec<Direction>,
    #[arg(long, default_value_t = 9)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cells evaluated concurrently.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Generalized tables for `gen-is`, one per direction.
    #[arg(long)]
    gen_probs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[command(flatten)]
    ce: CeArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    PerAsset,
    GrandMean,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    runs: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[arg(long, value_enum, default_value_t = Convention::PerAsset)]
    convention: Convention,
    #[arg(long, default_value_t = gridrisk::bench::SIGNIFICANCE)]
    significance: f64,
    /// Keep importance-sampling results that differ significantly from the reference.
    #[arg(long)]
    no_welch: bool,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::DefineAssets(a) => define_assets(a),
        Command::Estimate(a) => estimate(a),
        Command::Generalize(a) => generalize(a),
        Command::Bench(a) => bench(a),
        Command::Report(a) => report(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    read_corpus(path).with_context(|| format!("loading corpus from {}", path.display()))
}

fn load_assets(path: &Path) -> Result<AssetFile> {
    AssetFile::load(path).with_context(|| format!("loading assets from {}", path.display()))
}

/// Classify the corpus with `q_spiky` unless it already is; returns the
/// quantile in effect.
fn ensure_classified(corpus: &mut Corpus, q_spiky: Option<f64>) -> Result<f64> {
    let classified = Direction::BOTH.iter().all(|&d| corpus.is_classified(d));
    let q = q_spiky.or(corpus.q_spiky()).unwrap_or(CeConfig::default().q_spiky);
    if !classified || corpus.q_spiky() != Some(q) {
        corpus.classify(q)?;
    }
    Ok(q)
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let spec: CorpusSpec = match &a.spec {
        Some(path) => read_json(path)?,
        None => CorpusSpec::default(),
    };
    let corpus = synthesize_corpus(&spec, a.seed)?;
    write_corpus(&corpus, &a.out)?;
    let profiles: usize = corpus.bins().iter().map(|b| b.len()).sum();
    eprintln!(
        "wrote {} bins, {profiles} profiles of {} steps to {}",
        corpus.bins().len(),
        corpus.t_len(),
        a.out.display()
    );
    Ok(())
}

fn define_assets(a: DefineAssetsArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let file = match a.synthesize {
        Some(n) => {
            let spec: AssetSynthSpec = match &a.synth_spec {
                Some(path) => read_json(path)?,
                None => AssetSynthSpec::default(),
            };
            let file = AssetFile { assets: synthesize_assets(&corpus, n, a.seed, &spec)? };
            let out = a.out.as_deref().expect("clap enforces --out");
            file.save(out)?;
            eprintln!("wrote {n} assets to {}", out.display());
            file
        }
        None => load_assets(a.assets.as_deref().expect("clap enforces --assets"))?,
    };

    let mut failures = 0;
    println!("{:<16} {:>5} {:>5} {:>5} {:>14}", "asset", "n_s", "n_l", "n_a", "d_cap kW");
    for asset in &file.assets {
        match asset.prepare(&corpus) {
            Ok(p) => println!("{:<16} {:>5} {:>5} {:>5} {:>14.3}", p.id, p.n_s(), p.n_l(), p.n_a(), p.d_cap),
            Err(e) => {
                failures += 1;
                println!("{:<16} invalid: {e}", asset.id);
            }
        }
    }
    if failures > 0 {
        bail!("{failures} of {} assets failed validation", file.assets.len());
    }
    Ok(())
}

fn estimator_config(s: &SamplingArgs) -> EstimatorConfig {
    EstimatorConfig {
        m: s.m,
        beta_target: s.beta_target,
        n_max: s.n_max,
        batch: s.batch,
        full_year: s.full_year,
        parallel: !s.serial,
    }
}

fn ce_config(s: &SamplingArgs, c: &CeArgs, q_spiky: f64) -> CeConfig {
    CeConfig {
        n_opt: c.n_opt,
        rho: c.rho,
        alpha: c.alpha,
        q_spiky,
        beta_target: s.beta_target,
        n_max: s.n_max,
        n_max_zero: c.n_max_zero,
        m: s.m,
        batch: s.batch,
        monotone_threshold: !c.no_monotone_threshold,
        full_year: s.full_year,
        parallel: !s.serial,
        ..CeConfig::default()
    }
}

#[derive(Serialize)]
struct EstimateLine<'a> {
    asset_id: &'a str,
    seed: u64,
    #[serde(flatten)]
    estimate: &'a RiskEstimate,
}

fn write_jsonl<T: Serialize>(path: &Path, lines: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for line in lines {
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let mut corpus = load_corpus(&a.corpus)?;
    let q_spiky = ensure_classified(&mut corpus, a.ce.q_spiky)?;
    let assets = load_assets(&a.assets)?;
    let asset = assets
        .get(&a.asset)
        .ok_or_else(|| anyhow!("asset `{}` not found in {}", a.asset, a.assets.display()))?
        .prepare(&corpus)?;
    if a.trace.is_some() && a.method != Method::CeIs {
        warn!("--trace only applies to ce-is");
    }

    let campaign = CampaignConfig {
        estimator: estimator_config(&a.sampling),
        ce: ce_config(&a.sampling, &a.ce, q_spiky),
        gen_probs: match (&a.gen_probs, a.method) {
            (Some(path), _) => vec![GeneralizedBinProbs::load(path)
                .with_context(|| format!("loading {}", path.display()))?],
            (None, Method::GenIs) => bail!("gen-is needs --gen-probs"),
            (None, _) => Vec::new(),
        },
        ..Default::default()
    };
    if let Some(g) = campaign.gen_probs.first() {
        if g.direction != a.direction {
            bail!("generalized table is for direction {}, estimating {}", g.direction, a.direction);
        }
    }

    let estimate = match (a.method, &a.trace) {
        (Method::CeIs, Some(trace)) => {
            let out = ce_estimate(&asset, &corpus, a.direction, &campaign.ce, &RngStream::new(a.seed, 0))?;
            write_jsonl(trace, out.trace_lines())?;
            out.estimate
        }
        (method, _) => run_method(method, &asset, &corpus, a.direction, &campaign, a.seed)?,
    };
    let line = EstimateLine { asset_id: &asset.id, seed: a.seed, estimate: &estimate };
    println!("{}", serde_json::to_string(&line)?);
    Ok(())
}

fn generalize(a: GeneralizeArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let results = read_ce_results(&a.ce_results)
        .with_context(|| format!("reading results from {}", a.ce_results.display()))?;
    if results.is_empty() {
        bail!("no cross-entropy results found in {}", a.ce_results.display());
    }
    let config = GeneralizeConfig {
        max_customers: a.max_customers,
        threshold: a.threshold,
        averaging: if a.per_asset { Averaging::PerAsset } else { Averaging::Flat },
    };
    let table = derive_bin_probs(&results, &corpus, a.direction, &config)?;
    table.save(&a.out)?;
    let raised = table.probs.iter().filter(|p| p.source == gridrisk::generalize::ProbSource::Mean).count();
    eprintln!(
        "{} results from {} assets; {raised} of {} bins above threshold; wrote {}",
        results.len(),
        table.sources.len(),
        table.probs.len(),
        a.out.display()
    );
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut corpus = load_corpus(&a.corpus)?;
    let q_spiky = ensure_classified(&mut corpus, a.ce.q_spiky)?;
    let mut file = load_assets(&a.assets)?;
    if !a.asset_ids.is_empty() {
        if let Some(missing) = a.asset_ids.iter().find(|id| file.get(id).is_none()) {
            bail!("asset `{missing}` not found in {}", a.assets.display());
        }
        file.assets.retain(|x| a.asset_ids.contains(&x.id));
    }
    let assets = file.prepare(&corpus)?;

    let gen_probs = a
        .gen_probs
        .iter()
        .map(|p| GeneralizedBinProbs::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    if a.methods.contains(&Method::GenIs) {
        for d in &a.directions {
            if !gen_probs.iter().any(|g| g.direction == *d) {
                warn!("no --gen-probs table for direction {d}; gen-is cells will fail");
            }
        }
    }
    let config = CampaignConfig {
        methods: a.methods.clone(),
        directions: a.directions.clone(),
        replicates: a.replicates,
        seed: a.seed,
        estimator: estimator_config(&a.sampling),
        ce: ce_config(&a.sampling, &a.ce, q_spiky),
        gen_probs,
        workers: a.workers,
    };

    let mut out = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    let mut failed = 0;
    let records = run_campaign(&assets, &corpus, &config, |r| {
        if let Some(e) = &r.error {
            failed += 1;
            warn!("{} {} {} #{}: {e}", r.asset_id, r.method.as_str(), r.direction, r.replicate);
        }
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    })?;
    eprintln!("{} runs ({failed} failed) written to {}", records.len(), a.out.display());
    Ok(())
}

fn read_runs(path: &Path) -> Result<Vec<RunRecord>> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut records = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RunRecord =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), k + 1))?;
        if r.schema_version != gridrisk::bench::RUN_SCHEMA_VERSION {
            bail!("{}:{}: unsupported schema version {}", path.display(), k + 1, r.schema_version);
        }
        records.push(r);
    }
    Ok(records)
}

fn report(a: ReportArgs) -> Result<()> {
    let records = read_runs(&a.runs)?;
    let options = ReportOptions {
        significance: a.significance,
        convention: match a.convention {
            Convention::PerAsset => SpeedupConvention::PerAsset,
            Convention::GrandMean => SpeedupConvention::GrandMean,
        },
        welch: !a.no_welch,
    };
    let table = speedup_report(&records, &options)?;
    let stdout = io::stdout();
    let mut w = stdout.lock();
    match a.format {
        Format::Table => write!(w, "{}", table.to_table())?,
        Format::Csv => write!(w, "{}", table.to_csv())?,
        Format::Json => writeln!(w, "{}", serde_json::to_string_pretty(&table)?)?,
    }
    Ok(())
}
