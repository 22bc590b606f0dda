// SPDX-License-Identifier: Apache-2.0

//! `fknn`: build token-type caches, quantize them, index them, and decode
//! with per-sentence kNN datastores.

mod config;
mod pipeline;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

use fknn::annindex::{IndexConfig, IndexKind, IndexSet};
use fknn::bench::{render_table, run_bench, to_csv, to_jsonl, BenchCell, BenchInput, BenchOptions};
use fknn::corpus::{Loc, ParallelCorpus, TokenId};
use fknn::datastore::{build_caches, index_dir, CacheConfig, PqConfigSer, SRC_VOCAB_FILE, TGT_VOCAB_FILE};
use fknn::decode::{DecodeConfig, DecodeMode, SourceEncoder, Translator};
use fknn::pq::PqConfig;
use fknn::repr::{
    load_representations, synthetic_embed, BaseModel, LexicalConfig, OutputLayerModel, ReprMatrix, SyntheticEmbedder,
};
use fknn::retrieval::{assemble_target_datastore, select_source_neighbors, RetrievalConfig, TargetDatastore};
use fknn::synth::{disambiguation_task, zipf_task, DisambiguationConfig, SyntheticTask, ZipfConfig};
use fknn::{Exec, Metric};

use pipeline::{hash_parts, index_hash_prefix, read_bytes, read_lines, Cache, Pipeline, ReprSpec};

#[derive(Parser)]
#[command(name = "fknn", version, about = "Token-restricted kNN retrieval for translation decoding")]
struct Cli {
    /// Worker threads; defaults to all cores. Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// File of `key=value` settings named like the long flags; flags given
    /// on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the five-sentence walkthrough corpus with representations.
    WriteToy(WriteToyArgs),
    /// Group aligned source occurrences into per-token caches.
    BuildCache(BuildCacheArgs),
    /// Replace cached keys with product-quantization codes.
    TrainPq(TrainPqArgs),
    /// Build a flat or IVF index per cached token type.
    BuildIndex(BuildIndexArgs),
    /// Write the per-sentence target datastores for an input file.
    MakeDatastore(MakeDatastoreArgs),
    /// Translate an input file.
    Decode(DecodeArgs),
    /// Compare decoding modes over a grid of settings.
    Bench(BenchArgs),
    /// Print cache statistics, optionally with one sentence's datastore.
    Inspect(InspectArgs),
}

#[derive(Args)]
#[command(args_override_self = true)]
struct WriteToyArgs {
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct BuildCacheArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    /// Pharaoh alignments, one line per sentence pair.
    #[arg(long)]
    align: PathBuf,
    /// Source representations, one row per source token.
    #[arg(long, requires = "tgt_repr", conflicts_with = "synthetic_dim")]
    src_repr: Option<PathBuf>,
    /// Target (decoder state) representations, one row per target token.
    #[arg(long, requires = "src_repr")]
    tgt_repr: Option<PathBuf>,
    /// Generate seeded context-window representations of this dimension.
    #[arg(long, required_unless_present = "src_repr")]
    synthetic_dim: Option<usize>,
    #[arg(long, default_value_t = pipeline::DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = Metric::Cosine)]
    metric: Metric,
    /// Cache directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct TrainPqArgs {
    #[arg(long)]
    cache: PathBuf,
    /// Sub-quantizers, i.e. bytes per code.
    #[arg(long, default_value_t = 128)]
    pq_m: usize,
    #[arg(long, default_value_t = 256)]
    pq_codewords: usize,
    #[arg(long, default_value_t = 25)]
    pq_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Quantize the target keys as well.
    #[arg(long)]
    quantize_target: bool,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct BuildIndexArgs {
    #[arg(long)]
    cache: PathBuf,
    /// Token types with more entries than this are clustered.
    #[arg(long, default_value_t = 30_000)]
    freq_threshold: usize,
    /// Keys used to train each type's centroids.
    #[arg(long, default_value_t = 5_000_000)]
    train_cap: usize,
    #[arg(long, default_value_t = 25)]
    kmeans_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct InputArgs {
    /// Source sentences, one per line.
    #[arg(long)]
    input: PathBuf,
    /// Source representations for the input; needed when the cache was
    /// built from representation files.
    #[arg(long)]
    input_repr: Option<PathBuf>,
}

#[derive(Args, Clone, Copy)]
struct RetrievalArgs {
    /// Neighbors kept per source token.
    #[arg(long, default_value_t = 512)]
    c: usize,
    /// Clusters probed in IVF indexes.
    #[arg(long, default_value_t = 32)]
    nprobe: usize,
    /// Keep duplicate target positions reached from several source tokens.
    #[arg(long)]
    no_dedupe: bool,
}

impl RetrievalArgs {
    fn config(self) -> RetrievalConfig {
        RetrievalConfig {
            c: self.c,
            nprobe: self.nprobe,
            dedupe: !self.no_dedupe,
            exec: Exec::default(),
        }
    }
}

#[derive(Args)]
#[command(args_override_self = true)]
struct MakeDatastoreArgs {
    #[arg(long)]
    cache: PathBuf,
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    retrieval: RetrievalArgs,
    /// Output directory for `<line>.tds` files and `datastores.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Copy)]
struct DecodeSettings {
    #[arg(long, default_value_t = DecodeMode::Fast)]
    mode: DecodeMode,
    /// Weight of the kNN distribution.
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Neighbors per decoding step.
    #[arg(long, default_value_t = 512)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 2.0)]
    max_len_ratio: f64,
    #[arg(long, default_value_t = 10)]
    max_len_extra: usize,
    /// Spread the base model's mass evenly over observed translations.
    #[arg(long)]
    flat_lexicon: bool,
    #[arg(long, default_value_t = 0.0)]
    bigram_weight: f64,
}

impl DecodeSettings {
    fn config(self) -> DecodeConfig {
        DecodeConfig {
            mode: self.mode,
            lambda: self.lambda,
            temperature: self.temperature,
            k: self.k,
            beam: self.beam,
            max_len_ratio: self.max_len_ratio,
            max_len_extra: self.max_len_extra,
            exec: Exec::default(),
        }
    }

    fn lexical(self) -> LexicalConfig {
        LexicalConfig {
            flat: self.flat_lexicon,
            bigram_weight: self.bigram_weight,
        }
    }
}

#[derive(Args)]
#[command(args_override_self = true)]
struct DecodeArgs {
    #[arg(long)]
    cache: PathBuf,
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    decode: DecodeSettings,
    #[command(flatten)]
    retrieval: RetrievalArgs,
    /// Hypotheses, one per line; stdout if omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Per-sentence metrics as JSON lines; defaults to `<output>.metrics.jsonl`.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Disambiguation,
    Zipf,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct BenchArgs {
    /// Generate a synthetic task instead of using a cache directory.
    #[arg(long, value_enum, conflicts_with = "cache")]
    task: Option<Task>,
    /// Cache directory whose corpus and representations are benchmarked.
    #[arg(long, requires_all = ["input", "reference"])]
    cache: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [DecodeMode::Base, DecodeMode::Fast, DecodeMode::Vanilla])]
    modes: Vec<DecodeMode>,
    #[arg(long, value_delimiter = ',', default_values_t = [512])]
    c_values: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [512])]
    k_values: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [Metric::Cosine])]
    metrics: Vec<Metric>,
    #[arg(long, value_delimiter = ',', default_values_t = [false])]
    quantize: Vec<bool>,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 32)]
    nprobe: usize,
    #[arg(long, default_value_t = 30_000)]
    freq_threshold: usize,
    #[arg(long, default_value_t = 16)]
    pq_m: usize,
    #[arg(long, default_value_t = 256)]
    pq_codewords: usize,
    /// Representation dimension for synthetic tasks.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    window: usize,
    #[arg(long, default_value_t = 5)]
    seed: u64,
    /// Training sentences for synthetic tasks (task default if omitted).
    #[arg(long)]
    train_sentences: Option<usize>,
    #[arg(long)]
    test_sentences: Option<usize>,
    #[arg(long)]
    flat_lexicon: bool,
    /// Add a dense output layer over the target vocabulary with this mixing
    /// weight, giving the base model a realistic per-step cost.
    #[arg(long)]
    output_layer_mix: Option<f64>,
    #[arg(long)]
    jsonl: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct InspectArgs {
    #[arg(long)]
    cache: PathBuf,
    /// Dump the target datastore of this sentence.
    #[arg(long, conflicts_with = "input")]
    sentence: Option<String>,
    /// Dump the target datastore of a line of this file.
    #[arg(long, requires = "line")]
    input: Option<PathBuf>,
    /// Zero-based line of `--input`.
    #[arg(long)]
    line: Option<usize>,
    #[arg(long)]
    input_repr: Option<PathBuf>,
    #[command(flatten)]
    retrieval: RetrievalArgs,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let args = config::expand_args(&Cli::command(), std::env::args_os().collect())?;
    let cli = Cli::parse_from(args);
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.cmd {
        Cmd::WriteToy(a) => write_toy(a),
        Cmd::BuildCache(a) => build_cache(a),
        Cmd::TrainPq(a) => train_pq(a),
        Cmd::BuildIndex(a) => build_index(a),
        Cmd::MakeDatastore(a) => make_datastore(a),
        Cmd::Decode(a) => decode(a),
        Cmd::Bench(a) => bench(a),
        Cmd::Inspect(a) => inspect(a),
    }
}

fn write_toy(a: WriteToyArgs) -> Result<()> {
    fknn::toy::write_toy(&a.out)?;
    println!("wrote toy corpus to {}", a.out.display());
    Ok(())
}

fn build_cache(a: BuildCacheArgs) -> Result<()> {
    let corpus = pipeline::load_corpus_files(&a.src, &a.tgt, &a.align)?;
    let mut hashed = vec![read_bytes(&a.src)?, read_bytes(&a.tgt)?, read_bytes(&a.align)?];
    let (spec, src, tgt) = match (&a.src_repr, &a.tgt_repr, a.synthetic_dim) {
        (Some(sp), Some(tp), _) => {
            let src = load_representations(sp, &corpus, fknn::corpus::Side::Source)
                .with_context(|| format!("loading {}", sp.display()))?;
            let tgt = load_representations(tp, &corpus, fknn::corpus::Side::Target)
                .with_context(|| format!("loading {}", tp.display()))?;
            hashed.push(read_bytes(sp)?);
            hashed.push(read_bytes(tp)?);
            let abs = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
            (
                ReprSpec::Files {
                    src: abs(sp),
                    tgt: abs(tp),
                },
                src,
                tgt,
            )
        }
        (_, _, Some(dim)) => {
            let exec = Exec::default();
            let src = synthetic_embed(&corpus, fknn::corpus::Side::Source, dim, a.window, a.seed, exec)?;
            let tgt = synthetic_embed(&corpus, fknn::corpus::Side::Target, dim, a.window, a.seed, exec)?;
            let spec = ReprSpec::Synthetic {
                dim,
                window: a.window,
                seed: a.seed,
            };
            (spec, src, tgt)
        }
        _ => bail!("pass --src-repr and --tgt-repr, or --synthetic-dim"),
    };
    let cfg = CacheConfig {
        metric: a.metric,
        ..CacheConfig::default()
    };
    let set = build_caches(&corpus, &src, &tgt, &cfg)?;
    let settings = match &spec {
        ReprSpec::Files { .. } => json!({"stage": "build-cache", "metric": a.metric, "reprs": "files"}),
        ReprSpec::Synthetic { .. } => json!({"stage": "build-cache", "metric": a.metric, "reprs": spec}),
    };
    let settings = settings.to_string();
    let hash = hash_parts(std::iter::once(settings.as_bytes()).chain(hashed.iter().map(Vec::as_slice)));

    let out = &a.out;
    set.save(out, Some(hash.clone()))?;
    std::fs::copy(&a.src, out.join(pipeline::CORPUS_SRC))?;
    std::fs::copy(&a.tgt, out.join(pipeline::CORPUS_TGT))?;
    std::fs::copy(&a.align, out.join(pipeline::CORPUS_ALIGN))?;
    corpus.vocab_src.write_tsv(&out.join(SRC_VOCAB_FILE))?;
    corpus.vocab_tgt.write_tsv(&out.join(TGT_VOCAB_FILE))?;
    Pipeline {
        reprs: spec,
        cache_hash: hash.clone(),
    }
    .save(out)?;
    let m = set.manifest();
    println!(
        "cached {} entries over {} source types ({} unaligned source positions), {} target rows, dim {}, config {}",
        m.entries,
        m.token_types,
        m.unaligned_source_positions,
        m.target_rows,
        m.dim,
        &hash[..12]
    );
    Ok(())
}

fn train_pq(a: TrainPqArgs) -> Result<()> {
    let cache = Cache::load(&a.cache)?;
    if cache.set.is_quantized() {
        bail!(
            "cache {} is already quantized; rebuild it with `fknn build-cache` to change PQ settings",
            a.cache.display()
        );
    }
    let pq = PqConfig {
        m: a.pq_m,
        n_codewords: a.pq_codewords,
        iters: a.pq_iters,
        seed: a.seed,
        ..PqConfig::default()
    };
    let q = cache.set.quantized(&pq, a.quantize_target)?;
    let settings = json!({"stage": "train-pq", "m": a.pq_m, "codewords": a.pq_codewords,
        "iters": a.pq_iters, "seed": a.seed, "target": a.quantize_target})
    .to_string();
    let hash = hash_parts([cache.pipeline.cache_hash.as_bytes(), settings.as_bytes()]);
    q.save(&a.cache, Some(hash.clone()))?;
    Pipeline {
        cache_hash: hash,
        ..cache.pipeline
    }
    .save(&a.cache)?;
    let (sb, tb) = q.key_bytes();
    let (fs, ft) = q.full_precision_key_bytes();
    println!(
        "quantized source keys {fs} -> {sb} bytes ({:.1}x), target keys {ft} -> {tb} bytes ({:.1}x)",
        fs as f64 / sb.max(1) as f64,
        ft as f64 / tb.max(1) as f64
    );
    println!("existing indexes are now stale; run `fknn build-index --cache {}`", a.cache.display());
    Ok(())
}

fn build_index(a: BuildIndexArgs) -> Result<()> {
    let cache = Cache::load(&a.cache)?;
    let cfg = IndexConfig {
        freq_threshold: a.freq_threshold,
        train_cap: a.train_cap,
        kmeans_iters: a.kmeans_iters,
        seed: a.seed,
        metric: cache.set.metric,
        ..IndexConfig::default()
    };
    let idx = IndexSet::build(&cache.set, &cfg)?;
    let settings = serde_json::to_string(&cfg)?;
    let hash = format!(
        "{}{}",
        index_hash_prefix(&cache.pipeline.cache_hash),
        hash_parts([settings.as_bytes()])
    );
    idx.save(&index_dir(&a.cache), Some(hash))?;
    let ivf = idx.indexes.values().filter(|i| i.is_ivf()).count();
    println!(
        "indexed {} token types ({} flat, {ivf} IVF) into {}",
        idx.indexes.len(),
        idx.indexes.len() - ivf,
        index_dir(&a.cache).display()
    );
    Ok(())
}

fn encode_lines(corpus: &ParallelCorpus, lines: &[String]) -> Result<Vec<Vec<TokenId>>> {
    let out: Vec<Vec<TokenId>> = lines.iter().map(|l| corpus.vocab_src.encode(l)).collect();
    if let Some(i) = out.iter().position(Vec::is_empty) {
        bail!("input line {} is empty", i + 1);
    }
    Ok(out)
}

fn make_datastore(a: MakeDatastoreArgs) -> Result<()> {
    let cache = Cache::load(&a.cache)?;
    let idx = cache.indexes()?;
    let lines = read_lines(&a.input.input)?;
    let sentences = encode_lines(&cache.corpus, &lines)?;
    let reprs = cache.source_reprs(&sentences, a.input.input_repr.as_deref())?;
    let cfg = a.retrieval.config();
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut records = String::new();
    for (i, (src, q)) in sentences.iter().zip(&reprs).enumerate() {
        let neighbors = select_source_neighbors(src, q, &cache.set, &idx, &cfg)?;
        let ds = assemble_target_datastore(&neighbors, &cache.set, cfg.dedupe)?;
        ds.save(&a.out.join(format!("{i}.tds")))?;
        let ops: u64 = neighbors.iter().map(|n| n.stats.total()).sum();
        let rec = json!({
            "line": i,
            "source_len": src.len(),
            "size": ds.len(),
            "bound": cfg.c * src.len(),
            "search_ops": ops,
            "locs": ds.locs.iter().map(|l| [l.sent, l.pos]).collect::<Vec<_>>(),
            "tokens": ds.tokens.iter().map(|&t| cache.corpus.vocab_tgt.token(t)).collect::<Vec<_>>(),
        });
        records.push_str(&rec.to_string());
        records.push('\n');
    }
    let p = a.out.join("datastores.jsonl");
    std::fs::write(&p, records).with_context(|| format!("writing {}", p.display()))?;
    println!("wrote {} datastores to {}", sentences.len(), a.out.display());
    Ok(())
}

/// Encoder returning precomputed vectors for one sentence.
struct Fixed<'a>(&'a [f32]);

impl SourceEncoder for Fixed<'_> {
    fn encode(&self, _source: &[TokenId]) -> fknn::Result<Vec<f32>> {
        Ok(self.0.to_vec())
    }
}

fn decode(a: DecodeArgs) -> Result<()> {
    let cache = Cache::load(&a.cache)?;
    let cfg = a.decode.config();
    cfg.validate()?;
    let idx = match cfg.mode {
        DecodeMode::Fast => Some(cache.indexes()?),
        _ => None,
    };
    let global = match cfg.mode {
        DecodeMode::Vanilla => Some(TargetDatastore::global(&cache.set)?),
        _ => None,
    };
    let model = cache.base_model(a.decode.lexical())?;
    let lines = read_lines(&a.input.input)?;
    let sentences = encode_lines(&cache.corpus, &lines)?;
    let reprs = match cfg.mode {
        DecodeMode::Fast => cache.source_reprs(&sentences, a.input.input_repr.as_deref())?,
        _ => vec![Vec::new(); sentences.len()],
    };
    let mut hyps = String::new();
    let mut metrics = String::new();
    for (i, (src, q)) in sentences.iter().zip(&reprs).enumerate() {
        let encoder = Fixed(q);
        let t = Translator {
            model: &model,
            encoder: &encoder,
            caches: Some(&cache.set),
            indexes: idx.as_ref(),
            global: global.as_ref(),
            decode: cfg,
            retrieval: a.retrieval.config(),
        }
        .translate(src)
        .with_context(|| format!("decoding line {}", i + 1))?;
        hyps.push_str(&cache.corpus.vocab_tgt.decode(&t.tokens));
        hyps.push('\n');
        let best = t.hypotheses.first();
        let rec = json!({
            "line": i,
            "mode": cfg.mode,
            "tokens": t.tokens.len(),
            "log_prob": best.map(|h| h.log_prob),
            "finished": best.map(|h| h.finished),
            "steps": t.decode.steps,
            "knn_searches": t.decode.knn_searches,
            "knn_scanned": t.decode.knn_scanned,
            "max_scanned_per_step": t.decode.max_scanned_per_search,
            "per_step_ops": best.map(|h| h.per_step_ops.clone()),
            "datastore_size": t.retrieval.as_ref().map(|r| r.datastore_size),
            "retrieval_ops": t.retrieval.as_ref().map(|r| r.search.total()),
            "retrieval_secs": t.retrieval_secs,
            "decode_secs": t.decode_secs,
        });
        metrics.push_str(&rec.to_string());
        metrics.push('\n');
    }
    let metrics_path = a
        .metrics
        .clone()
        .or_else(|| a.output.as_ref().map(|o| PathBuf::from(format!("{}.metrics.jsonl", o.display()))));
    match &a.output {
        Some(p) => std::fs::write(p, &hyps).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{hyps}"),
    }
    if let Some(p) = metrics_path {
        std::fs::write(&p, metrics).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

/// Corpus, representations and test set for a bench run.
struct BenchData {
    corpus: ParallelCorpus,
    src: ReprMatrix,
    tgt: ReprMatrix,
    sources: Vec<String>,
    references: Vec<String>,
    encoder: Box<dyn SourceEncoder>,
    window: usize,
    seed: u64,
}

fn bench(a: BenchArgs) -> Result<()> {
    let exec = Exec::default();
    let data = match (a.task, &a.cache) {
        (Some(task), _) => {
            let SyntheticTask { train, test } = match task {
                Task::Disambiguation => {
                    let d = DisambiguationConfig::default();
                    disambiguation_task(&DisambiguationConfig {
                        train_sentences: a.train_sentences.unwrap_or(d.train_sentences),
                        test_sentences: a.test_sentences.unwrap_or(d.test_sentences),
                        ..d
                    })?
                }
                Task::Zipf => {
                    let d = ZipfConfig::default();
                    zipf_task(&ZipfConfig {
                        train_sentences: a.train_sentences.unwrap_or(d.train_sentences),
                        test_sentences: a.test_sentences.unwrap_or(d.test_sentences),
                        ..d
                    })?
                }
            };
            let src = synthetic_embed(&train, fknn::corpus::Side::Source, a.dim, a.window, a.seed, exec)?;
            let tgt = synthetic_embed(&train, fknn::corpus::Side::Target, a.dim, a.window, a.seed, exec)?;
            let enc = SyntheticEmbedder::new(a.dim, a.window, a.seed, train.vocab_src.len())?;
            BenchData {
                corpus: train,
                src,
                tgt,
                sources: test.sources,
                references: test.references,
                encoder: Box::new(enc),
                window: a.window,
                seed: a.seed,
            }
        }
        (None, Some(dir)) => {
            let cache = Cache::load(dir)?;
            let (src, tgt) = cache.training_reprs(exec)?;
            let sources = read_lines(a.input.as_ref().expect("required by clap"))?;
            let references = read_lines(a.reference.as_ref().expect("required by clap"))?;
            let enc: Box<dyn SourceEncoder> = match cache.pipeline.reprs {
                ReprSpec::Synthetic { dim, window, seed } => {
                    Box::new(SyntheticEmbedder::new(dim, window, seed, cache.corpus.vocab_src.len())?)
                }
                ReprSpec::Files { .. } => bail!("bench needs synthetic representations to encode test sentences"),
            };
            let (window, seed) = cache.pipeline.decoder_settings();
            BenchData {
                corpus: cache.corpus,
                src,
                tgt,
                sources,
                references,
                encoder: enc,
                window,
                seed,
            }
        }
        (None, None) => bail!("pass --task or --cache with --input and --reference"),
    };
    let BenchData {
        corpus,
        src,
        tgt,
        sources,
        references,
        encoder,
        window,
        seed,
    } = data;
    let dec = fknn::repr::SyntheticDecoder::for_corpus(&corpus, tgt.dim(), window, seed)?;
    let lexical = fknn::repr::LexicalModel::from_corpus(
        &corpus,
        dec,
        LexicalConfig {
            flat: a.flat_lexicon,
            bigram_weight: 0.0,
        },
    )?;
    let model: Box<dyn BaseModel> = match a.output_layer_mix {
        Some(mix) => Box::new(OutputLayerModel::new(lexical, corpus.vocab_tgt.len(), mix, seed)),
        None => Box::new(lexical),
    };
    let input = BenchInput {
        corpus: &corpus,
        src_reprs: &src,
        tgt_reprs: &tgt,
        model: model.as_ref(),
        encoder: encoder.as_ref(),
        sources: sources.iter().map(|s| corpus.vocab_src.encode(s)).collect(),
        references: references.iter().map(|s| corpus.vocab_tgt.encode(s)).collect(),
    };
    let mut grid = Vec::new();
    for &metric in &a.metrics {
        for &quantize in &a.quantize {
            for &mode in &a.modes {
                for &k in &a.k_values {
                    let cs: &[usize] = if mode == DecodeMode::Fast { &a.c_values } else { &a.c_values[..1] };
                    for &c in cs {
                        grid.push(BenchCell {
                            mode,
                            c,
                            k,
                            metric,
                            quantize,
                        });
                    }
                }
            }
        }
    }
    let opts = BenchOptions {
        decode: DecodeConfig {
            lambda: a.lambda,
            temperature: a.temperature,
            beam: a.beam,
            ..DecodeConfig::default()
        },
        index: IndexConfig {
            freq_threshold: a.freq_threshold,
            ..IndexConfig::default()
        },
        pq: PqConfigSer {
            m: a.pq_m,
            n_codewords: a.pq_codewords,
            ..PqConfigSer::default()
        },
        nprobe: a.nprobe,
        ..BenchOptions::default()
    };
    let reports = run_bench(&input, &grid, &opts)?;
    print!("{}", render_table(&reports));
    if let Some(p) = &a.jsonl {
        std::fs::write(p, to_jsonl(&reports)?).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.csv {
        std::fs::write(p, to_csv(&reports)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let cache = Cache::load(&a.cache)?;
    let m = &cache.manifest;
    let idx = match cache.indexes() {
        Ok(i) => Some(i),
        Err(_) if a.sentence.is_none() && a.input.is_none() => None,
        Err(e) => return Err(e),
    };
    let mut out = String::new();
    writeln!(
        out,
        "cache {}: metric {}, dim {}, target dim {}, quantized {}, {} entries, {} token types, {} target rows, {} unaligned source positions",
        a.cache.display(),
        m.metric,
        m.dim,
        m.tgt_dim,
        if m.quantized { "yes" } else { "no" },
        m.entries,
        m.token_types,
        m.target_rows,
        m.unaligned_source_positions
    )?;
    writeln!(out, "token\tentries\tindex\tnlist")?;
    for (t, c) in &cache.set.caches {
        let (kind, nlist) = match idx.as_ref().and_then(|i| i.get(*t)) {
            Some(i) => match i.kind {
                IndexKind::Flat => ("flat", 0),
                IndexKind::Ivf { .. } => ("ivf", i.nlist()),
            },
            None => ("-", 0),
        };
        writeln!(out, "{}\t{}\t{kind}\t{nlist}", cache.corpus.vocab_src.token(*t), c.len())?;
    }
    let line = match (&a.sentence, &a.input, a.line) {
        (Some(s), _, _) => Some(s.clone()),
        (None, Some(p), Some(n)) => {
            let lines = read_lines(p)?;
            Some(
                lines
                    .get(n)
                    .cloned()
                    .with_context(|| format!("{} has {} lines", p.display(), lines.len()))?,
            )
        }
        _ => None,
    };
    if let (Some(line), Some(idx)) = (line, idx) {
        let src = encode_lines(&cache.corpus, std::slice::from_ref(&line))?.remove(0);
        let q = if let (Some(p), Some(n)) = (&a.input_repr, a.line) {
            let lines = read_lines(a.input.as_ref().expect("checked above"))?;
            let all = encode_lines(&cache.corpus, &lines)?;
            cache.source_reprs(&all, Some(p))?.swap_remove(n)
        } else {
            cache.source_reprs(std::slice::from_ref(&src), a.input_repr.as_deref())?.remove(0)
        };
        let cfg = a.retrieval.config();
        let neighbors = select_source_neighbors(&src, &q, &cache.set, &idx, &cfg)?;
        let ds = assemble_target_datastore(&neighbors, &cache.set, cfg.dedupe)?;
        let vs = &cache.corpus.vocab_src;
        let vt = &cache.corpus.vocab_tgt;
        writeln!(out, "sentence: {line}")?;
        let mut origin: HashMap<Loc, Vec<String>> = HashMap::new();
        for n in &neighbors {
            writeln!(out, "position {} {}: {} neighbors", n.pos, vs.token(n.token), n.hits.len())?;
            for (e, d) in &n.hits {
                writeln!(out, "  src {} -> tgt {} {} distance {d:.6}", e.src, e.tgt, vt.token(e.tgt_token))?;
                origin
                    .entry(e.tgt)
                    .or_default()
                    .push(format!("pos {} {} via src {}", n.pos, vs.token(n.token), e.src));
            }
        }
        writeln!(out, "target datastore: {} entries (bound c*n = {})", ds.len(), cfg.c * src.len())?;
        for (loc, tok) in ds.locs.iter().zip(&ds.tokens) {
            let from = origin.get(loc).map(|v| v.join("; ")).unwrap_or_default();
            writeln!(out, "  tgt {loc} {}\tfrom {from}", vt.token(*tok))?;
        }
    }
    print!("{out}");
    Ok(())
}
