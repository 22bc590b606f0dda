// SPDX-License-Identifier: Apache-2.0

//! Quality metrics and the mode/parameter benchmark grid.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::annindex::{IndexConfig, IndexSet};
use crate::corpus::{ParallelCorpus, TokenId};
use crate::datastore::{build_caches, CacheConfig, CacheSet, PqConfigSer};
use crate::decode::{DecodeConfig, DecodeMode, SourceEncoder, Translator};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metric::Metric;
use crate::repr::{BaseModel, ReprMatrix};
use crate::retrieval::{RetrievalConfig, TargetDatastore};

const MAX_ORDER: usize = 4;

fn ngram_counts<T: Eq + Hash + Clone>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level 4-gram BLEU on a 0-100 scale.
///
/// Clipped n-gram counts are pooled over the corpus. An order with matches
/// but zero total count is skipped; an order with zero matches contributes
/// `1 / (2^j * total)`, where `j` counts zero-match orders so far. Without any
/// unigram match the score is zero.
pub fn corpus_bleu<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidConfig(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if refs.is_empty() || ref_len == 0 {
        return Err(Error::EmptyReference);
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    let mut zero_run = 1.0;
    for n in 0..MAX_ORDER {
        if totals[n] == 0 {
            continue;
        }
        orders += 1;
        let p = if matches[n] == 0 {
            zero_run *= 2.0;
            1.0 / (zero_run * totals[n] as f64)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

/// Fraction of reference positions whose token the hypothesis reproduces at
/// the same position.
pub fn token_accuracy<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidConfig(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::EmptyReference);
    }
    let hit: usize = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| h.iter().zip(r).filter(|(a, b)| a == b).count())
        .sum();
    Ok(hit as f64 / total as f64)
}

/// Key-storage accounting for a cache set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub entries: usize,
    pub stored_bytes: usize,
    pub full_precision_bytes: usize,
    pub ratio: f64,
}

/// Bytes for `entries` keys of dimension `dim`, stored as `m`-byte codes
/// versus `f32` vectors.
pub fn memory_accounting(entries: usize, dim: usize, m: usize) -> MemoryReport {
    let stored = entries * m;
    let full = entries * dim * 4;
    MemoryReport {
        entries,
        stored_bytes: stored,
        full_precision_bytes: full,
        ratio: full as f64 / stored.max(1) as f64,
    }
}

impl MemoryReport {
    pub fn of_source_keys(cs: &CacheSet) -> Self {
        let (stored, _) = cs.key_bytes();
        let (full, _) = cs.full_precision_key_bytes();
        MemoryReport {
            entries: cs.entry_count(),
            stored_bytes: stored,
            full_precision_bytes: full,
            ratio: full as f64 / stored.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub mode: DecodeMode,
    pub c: usize,
    pub k: usize,
    pub metric: Metric,
    pub quantize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: DecodeMode,
    pub c: usize,
    pub k: usize,
    pub metric: Metric,
    pub quantize: bool,
    pub sentences: usize,
    pub steps: u64,
    /// Source-side index work plus target-side kNN scans.
    pub total_distance_ops: u64,
    pub retrieval_ops: u64,
    pub knn_scanned: u64,
    pub max_scanned_per_step: u64,
    /// Keys scanned per kNN search, bucketed by powers of two.
    pub per_step_ops: BTreeMap<u64, u64>,
    pub mean_datastore_size: f64,
    pub wall_ms: f64,
    pub tokens_per_sec: f64,
    pub speedup_vs_vanilla: Option<f64>,
    pub token_accuracy: f64,
    pub bleu: f64,
}

/// Inputs shared by every cell.
pub struct BenchInput<'a, M: BaseModel + ?Sized, E: SourceEncoder + ?Sized> {
    pub corpus: &'a ParallelCorpus,
    pub src_reprs: &'a ReprMatrix,
    pub tgt_reprs: &'a ReprMatrix,
    pub model: &'a M,
    pub encoder: &'a E,
    pub sources: Vec<Vec<TokenId>>,
    pub references: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub decode: DecodeConfig,
    pub index: IndexConfig,
    pub pq: PqConfigSer,
    pub nprobe: usize,
    /// Schedule for decoding; sequential keeps timings comparable.
    pub exec: Exec,
    /// Schedule for building caches and indexes.
    pub build_exec: Exec,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            decode: DecodeConfig::default(),
            index: IndexConfig::default(),
            pq: PqConfigSer::default(),
            nprobe: 32,
            exec: Exec::Sequential,
            build_exec: Exec::default(),
        }
    }
}

fn bucket(x: u64) -> u64 {
    if x == 0 {
        0
    } else {
        x.next_power_of_two()
    }
}

/// Runs every cell of `grid`, building caches once per `(metric, quantize)`.
pub fn run_bench<M: BaseModel + ?Sized, E: SourceEncoder + ?Sized>(
    input: &BenchInput<'_, M, E>,
    grid: &[BenchCell],
    opts: &BenchOptions,
) -> Result<Vec<BenchReport>> {
    if input.sources.len() != input.references.len() {
        return Err(Error::InvalidConfig("sources and references differ in count".into()));
    }
    let mut built: HashMap<(Metric, bool), (CacheSet, IndexSet, Option<TargetDatastore>)> = HashMap::new();
    let mut reports = Vec::with_capacity(grid.len());
    for cell in grid {
        let key = (cell.metric, cell.quantize);
        if let std::collections::hash_map::Entry::Vacant(e) = built.entry(key) {
            let cs = build_caches(
                input.corpus,
                input.src_reprs,
                input.tgt_reprs,
                &CacheConfig {
                    quantize: cell.quantize,
                    quantize_target: cell.quantize,
                    pq: opts.pq,
                    metric: cell.metric,
                    exec: opts.build_exec,
                },
            )?;
            let idx = IndexSet::build(
                &cs,
                &IndexConfig {
                    metric: cell.metric,
                    exec: opts.build_exec,
                    ..opts.index
                },
            )?;
            e.insert((cs, idx, None));
        }
        if cell.mode == DecodeMode::Vanilla {
            let entry = built.get_mut(&key).expect("built above");
            if entry.2.is_none() {
                entry.2 = Some(TargetDatastore::global(&entry.0)?);
            }
        }
        let (cs, idx, global) = &built[&key];
        let translator = Translator {
            model: input.model,
            encoder: input.encoder,
            caches: Some(cs),
            indexes: Some(idx),
            global: global.as_ref(),
            decode: DecodeConfig {
                mode: cell.mode,
                k: cell.k,
                exec: opts.exec,
                ..opts.decode
            },
            retrieval: RetrievalConfig {
                c: cell.c,
                nprobe: opts.nprobe,
                dedupe: true,
                exec: opts.exec,
            },
        };
        let mut report = BenchReport {
            mode: cell.mode,
            c: cell.c,
            k: cell.k,
            metric: cell.metric,
            quantize: cell.quantize,
            sentences: input.sources.len(),
            steps: 0,
            total_distance_ops: 0,
            retrieval_ops: 0,
            knn_scanned: 0,
            max_scanned_per_step: 0,
            per_step_ops: BTreeMap::new(),
            mean_datastore_size: 0.0,
            wall_ms: 0.0,
            tokens_per_sec: 0.0,
            speedup_vs_vanilla: None,
            token_accuracy: 0.0,
            bleu: 0.0,
        };
        let mut outputs = Vec::with_capacity(input.sources.len());
        let mut ds_sizes = 0usize;
        let start = Instant::now();
        for src in &input.sources {
            let t = translator.translate(src)?;
            report.steps += t.decode.steps;
            report.knn_scanned += t.decode.knn_scanned;
            report.max_scanned_per_step = report.max_scanned_per_step.max(t.decode.max_scanned_per_search);
            if let Some(r) = t.retrieval {
                report.retrieval_ops += r.search.total();
                ds_sizes += r.datastore_size;
            }
            for h in t.hypotheses.iter().take(1) {
                for &ops in &h.per_step_ops {
                    *report.per_step_ops.entry(bucket(ops)).or_insert(0) += 1;
                }
            }
            outputs.push(t.tokens);
        }
        report.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let out_tokens: usize = outputs.iter().map(Vec::len).sum();
        report.tokens_per_sec = out_tokens as f64 / (report.wall_ms / 1e3).max(1e-9);
        report.total_distance_ops = report.retrieval_ops + report.knn_scanned;
        report.mean_datastore_size = ds_sizes as f64 / input.sources.len().max(1) as f64;
        report.token_accuracy = token_accuracy(&outputs, &input.references)?;
        report.bleu = corpus_bleu(&outputs, &input.references)?;
        reports.push(report);
    }
    fill_speedups(&mut reports);
    Ok(reports)
}

/// Wall-time ratio against the vanilla cell sharing `(k, metric, quantize)`.
fn fill_speedups(reports: &mut [BenchReport]) {
    let vanilla: Vec<((usize, Metric, bool), f64)> = reports
        .iter()
        .filter(|r| r.mode == DecodeMode::Vanilla)
        .map(|r| ((r.k, r.metric, r.quantize), r.wall_ms))
        .collect();
    for r in reports.iter_mut() {
        r.speedup_vs_vanilla = vanilla
            .iter()
            .find(|(k, _)| *k == (r.k, r.metric, r.quantize))
            .map(|(_, w)| w / r.wall_ms.max(1e-9));
    }
}

pub fn to_jsonl(reports: &[BenchReport]) -> Result<String> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn render_table(reports: &[BenchReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} {:>5} {:>5} {:<7} {:>5} {:>14} {:>12} {:>10} {:>9} {:>7} {:>7}",
        "mode", "c", "k", "metric", "pq", "distance_ops", "max/step", "wall_ms", "speedup", "acc", "bleu"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<8} {:>5} {:>5} {:<7} {:>5} {:>14} {:>12} {:>10.1} {:>9} {:>7.3} {:>7.2}",
            r.mode.to_string(),
            r.c,
            r.k,
            r.metric.to_string(),
            r.quantize,
            r.total_distance_ops,
            r.max_scanned_per_step,
            r.wall_ms,
            r.speedup_vs_vanilla.map_or("-".into(), |s| format!("{s:.1}x")),
            r.token_accuracy,
            r.bleu
        );
    }
    out
}

pub fn to_csv(reports: &[BenchReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "mode",
        "c",
        "k",
        "metric",
        "quantize",
        "sentences",
        "steps",
        "total_distance_ops",
        "retrieval_ops",
        "knn_scanned",
        "max_scanned_per_step",
        "mean_datastore_size",
        "wall_ms",
        "tokens_per_sec",
        "speedup_vs_vanilla",
        "token_accuracy",
        "bleu",
    ])?;
    for r in reports {
        w.write_record([
            r.mode.to_string(),
            r.c.to_string(),
            r.k.to_string(),
            r.metric.to_string(),
            r.quantize.to_string(),
            r.sentences.to_string(),
            r.steps.to_string(),
            r.total_distance_ops.to_string(),
            r.retrieval_ops.to_string(),
            r.knn_scanned.to_string(),
            r.max_scanned_per_step.to_string(),
            r.mean_datastore_size.to_string(),
            r.wall_ms.to_string(),
            r.tokens_per_sec.to_string(),
            r.speedup_vs_vanilla.map_or(String::new(), |s| s.to_string()),
            r.token_accuracy.to_string(),
            r.bleu.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Side;
    use crate::repr::{synthetic_embed, LexicalConfig, LexicalModel, SyntheticDecoder, SyntheticEmbedder};

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let r = vec![w("the cat sat on the mat")];
        assert!((corpus_bleu(&r, &r).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(corpus_bleu(&[w("a b c d e f")], &r).unwrap(), 0.0);
        assert!(matches!(corpus_bleu::<String>(&[], &[]), Err(Error::EmptyReference)));
        assert!(corpus_bleu(&r, &[]).is_err());
    }

    #[test]
    fn bleu_unigram_only_overlap() {
        // One unigram match out of five, no higher-order matches, equal lengths.
        let got = corpus_bleu(&[w("a b c d e")], &[w("a f g h i")]).unwrap();
        let p = [1.0 / 5.0, 1.0 / (2.0 * 4.0), 1.0 / (4.0 * 3.0), 1.0 / (8.0 * 2.0)];
        let expect = 100.0 * (p.iter().map(|x: &f64| x.ln()).sum::<f64>() / 4.0).exp();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert!((got - 10.6823).abs() < 1e-3);
    }

    #[test]
    fn bleu_brevity_penalty() {
        // All n-grams match; only the length penalty exp(1 - 8/4) applies.
        let got = corpus_bleu(&[w("a b c d")], &[w("a b c d e f g h")]).unwrap();
        assert!((got - 100.0 * (-1.0f64).exp()).abs() < 1e-9, "{got}");
    }

    #[test]
    fn accuracy() {
        let h = vec![vec![1, 2, 3], vec![4]];
        let r = vec![vec![1, 0, 3], vec![4, 5]];
        assert!((token_accuracy(&h, &r).unwrap() - 3.0 / 5.0).abs() < 1e-12);
        assert!(token_accuracy::<u8>(&[vec![]], &[vec![]]).is_err());
    }

    #[test]
    fn memory_ratio() {
        let m = memory_accounting(1000, 1024, 128);
        assert_eq!(m.stored_bytes, 128_000);
        assert_eq!(m.ratio, 32.0);
    }

    #[test]
    fn bench_counts_are_deterministic_and_bounded() {
        let c = ParallelCorpus::from_lines(
            &["a b c", "b c a", "c a b", "a a b", "b b c"],
            &["x y z", "y z x", "z x y", "x x y", "y y z"],
        )
        .unwrap()
        .with_alignments(vec![vec![(0, 0), (1, 1), (2, 2)]; 5])
        .unwrap();
        let s = synthetic_embed(&c, Side::Source, 8, 1, 1, Exec::Sequential).unwrap();
        let t = synthetic_embed(&c, Side::Target, 8, 1, 1, Exec::Sequential).unwrap();
        let dec = SyntheticDecoder::for_corpus(&c, 8, 1, 1).unwrap();
        let model = LexicalModel::from_corpus(&c, dec, LexicalConfig::default()).unwrap();
        let enc = SyntheticEmbedder::new(8, 1, 1, c.vocab_src.len()).unwrap();
        let input = BenchInput {
            corpus: &c,
            src_reprs: &s,
            tgt_reprs: &t,
            model: &model,
            encoder: &enc,
            sources: vec![c.pairs[0].src.clone(), c.pairs[3].src.clone()],
            references: vec![c.pairs[0].tgt.clone(), c.pairs[3].tgt.clone()],
        };
        let grid: Vec<BenchCell> = [DecodeMode::Base, DecodeMode::Fast, DecodeMode::Vanilla]
            .iter()
            .map(|&mode| BenchCell { mode, c: 1, k: 2, metric: Metric::Cosine, quantize: false })
            .collect();
        let a = run_bench(&input, &grid, &BenchOptions::default()).unwrap();
        let b = run_bench(&input, &grid, &BenchOptions::default()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.total_distance_ops, y.total_distance_ops);
        }
        assert_eq!(a[0].total_distance_ops, 0);
        assert!(a[1].max_scanned_per_step <= 3);
        assert_eq!(a[2].max_scanned_per_step, 15);
        assert!(a[1].total_distance_ops < a[2].total_distance_ops);
        assert!(render_table(&a).lines().count() == 4);
        assert_eq!(to_jsonl(&a).unwrap().lines().count(), 3);
        assert_eq!(to_csv(&a).unwrap().lines().count(), 4);
    }
}
