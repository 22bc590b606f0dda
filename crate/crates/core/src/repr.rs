// SPDX-License-Identifier: Apache-2.0

//! Per-token contextual representations and the base translation model
//! interface.
//!
//! Real-model representations come from `FKNNREPR` dumps. For tests and desk
//! experiments a deterministic hashing embedder stands in for the encoder
//! ([`SyntheticEmbedder`]) and a hashing "decoder state" stands in for the
//! decoder ([`SyntheticDecoder`]). Target-side rows are decoder states under
//! teacher forcing, so they live in the same space as decoding-time queries.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio;
use crate::corpus::{Loc, ParallelCorpus, Side, TokenId};
use crate::decode::SparseDistribution;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metric::{dot, normalize};

pub const REPR_MAGIC: &[u8; 8] = b"FKNNREPR";
const DTYPE_F32: u8 = 0;

/// Row-major `count x dim` matrix with one row per token of one corpus side.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprMatrix {
    side: Side,
    dim: usize,
    data: Vec<f32>,
    /// Sentence start rows, plus the total row count at the end.
    offsets: Vec<usize>,
}

impl ReprMatrix {
    /// Wraps `data`, checking shape against `lengths` and finiteness.
    pub fn new(side: Side, dim: usize, data: Vec<f32>, lengths: &[usize]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("representation dim must be positive".into()));
        }
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        for l in lengths {
            offsets.push(offsets.last().unwrap() + l);
        }
        let expected = *offsets.last().unwrap();
        if data.len() != expected * dim {
            return Err(Error::RowCountMismatch {
                expected,
                found: data.len() / dim,
            });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                row: i / dim,
                col: i % dim,
            });
        }
        Ok(ReprMatrix {
            side,
            dim,
            data,
            offsets,
        })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn sentences(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn row_at(&self, loc: Loc) -> &[f32] {
        self.row(self.offsets[loc.sent as usize] + loc.pos as usize)
    }

    /// All rows of one sentence, contiguous.
    pub fn sentence(&self, sent: usize) -> &[f32] {
        &self.data[self.offsets[sent] * self.dim..self.offsets[sent + 1] * self.dim]
    }

    pub fn loc(&self, row: usize) -> Loc {
        let sent = self.offsets.partition_point(|&o| o <= row) - 1;
        Loc::new(sent, row - self.offsets[sent])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_repr_file(path, self.dim, &self.data)
    }
}

pub fn write_repr_file(path: &Path, dim: usize, data: &[f32]) -> Result<()> {
    let mut w = binio::create(path)?;
    w.write_all(REPR_MAGIC)?;
    w.write_u8(DTYPE_F32)?;
    w.write_u32::<LittleEndian>(dim as u32)?;
    w.write_u64::<LittleEndian>((data.len() / dim) as u64)?;
    binio::write_f32s(&mut w, data)?;
    w.flush()?;
    Ok(())
}

/// Reads a representation file without shape checks: `(dim, rows)`.
pub fn read_repr_file(path: &Path) -> Result<(usize, Vec<f32>)> {
    let mut r = binio::open(path)?;
    binio::read_magic(&mut r, REPR_MAGIC, "representation file")?;
    let what = "representation header";
    let dtype = r.read_u8().map_err(|e| binio::truncated(what, e))?;
    if dtype != DTYPE_F32 {
        return Err(Error::BadHeader {
            what: "representation file",
            detail: format!("unsupported dtype code {dtype}"),
        });
    }
    let dim = r.read_u32::<LittleEndian>().map_err(|e| binio::truncated(what, e))? as usize;
    let rows = r.read_u64::<LittleEndian>().map_err(|e| binio::truncated(what, e))? as usize;
    if dim == 0 {
        return Err(Error::BadHeader {
            what: "representation file",
            detail: "dim is zero".into(),
        });
    }
    let data = binio::read_f32s(&mut r, rows * dim, "representation payload")?;
    binio::expect_eof(&mut r, "representation file")?;
    Ok((dim, data))
}

/// Loads the dumped representations of one corpus side.
pub fn load_representations(path: &Path, corpus: &ParallelCorpus, side: Side) -> Result<ReprMatrix> {
    let (dim, data) = read_repr_file(path)?;
    ReprMatrix::new(side, dim, data, &corpus.sentence_lengths(side))
}

/// Loads representations for sentences of known lengths (e.g. a test set).
pub fn load_representations_for(path: &Path, side: Side, lengths: &[usize]) -> Result<ReprMatrix> {
    let (dim, data) = read_repr_file(path)?;
    ReprMatrix::new(side, dim, data, lengths)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded unit-norm Gaussian vector for `(seed, role, id)`.
pub fn hashed_unit_vector(seed: u64, role: u64, id: u32, dim: usize) -> Vec<f32> {
    let key = mix64(mix64(seed ^ mix64(role)) ^ id as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let mut v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    v
}

/// Hashed vectors for one role, precomputed for the dense vocabulary range.
#[derive(Debug, Clone)]
struct VectorTable {
    seed: u64,
    role: u64,
    dim: usize,
    dense: Vec<f32>,
    special: HashMap<u32, Vec<f32>>,
}

impl VectorTable {
    fn new(seed: u64, role: u64, dim: usize, vocab: usize) -> Self {
        let mut dense = Vec::with_capacity(vocab * dim);
        for id in 0..vocab as u32 {
            dense.extend(hashed_unit_vector(seed, role, id, dim));
        }
        let special = [TokenId::UNK, TokenId::EOS, TokenId::BOS]
            .into_iter()
            .map(|t| (t.0, hashed_unit_vector(seed, role, t.0, dim)))
            .collect();
        VectorTable {
            seed,
            role,
            dim,
            dense,
            special,
        }
    }

    fn add_to(&self, id: TokenId, weight: f32, out: &mut [f32]) {
        let i = id.index();
        let owned;
        let v: &[f32] = if (i + 1) * self.dim <= self.dense.len() {
            &self.dense[i * self.dim..(i + 1) * self.dim]
        } else if let Some(v) = self.special.get(&id.0) {
            v
        } else {
            owned = hashed_unit_vector(self.seed, self.role, id.0, self.dim);
            &owned
        };
        for (o, x) in out.iter_mut().zip(v) {
            *o += weight * x;
        }
    }
}

const ROLE_SRC_CENTER: u64 = 1;
const ROLE_SRC_CONTEXT: u64 = 2;
const ROLE_DEC_CENTER: u64 = 11;
const ROLE_DEC_CONTEXT: u64 = 12;
const ROLE_DEC_PREV: u64 = 13;

/// Context weight applied to each neighbor vector.
pub const DEFAULT_CONTEXT_WEIGHT: f32 = 0.5;
pub const DEFAULT_WINDOW: usize = 2;

fn check_dim(dim: usize) -> Result<()> {
    if dim < 8 {
        return Err(Error::InvalidConfig(format!("synthetic dim must be >= 8, got {dim}")));
    }
    Ok(())
}

/// Hashing stand-in for an encoder.
///
/// Position `p` maps to `normalize(center(x_p) + w * sum(context(x_q)))` over
/// the neighbors within `window`, with boundary padding. Same token and same
/// neighbor multiset give the same vector; shared neighbors raise similarity.
#[derive(Debug, Clone)]
pub struct SyntheticEmbedder {
    pub dim: usize,
    pub window: usize,
    pub seed: u64,
    center: VectorTable,
    context: VectorTable,
}

impl SyntheticEmbedder {
    pub fn new(dim: usize, window: usize, seed: u64, vocab: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(SyntheticEmbedder {
            dim,
            window,
            seed,
            center: VectorTable::new(seed, ROLE_SRC_CENTER, dim, vocab),
            context: VectorTable::new(seed, ROLE_SRC_CONTEXT, dim, vocab),
        })
    }

    pub fn embed_position(&self, tokens: &[TokenId], p: usize, out: &mut [f32]) {
        out.fill(0.0);
        self.center.add_to(tokens[p], 1.0, out);
        add_window(&self.context, tokens, p, self.window, DEFAULT_CONTEXT_WEIGHT, out);
        normalize(out);
    }

    pub fn embed_sentence(&self, tokens: &[TokenId]) -> Vec<f32> {
        let mut out = vec![0.0; tokens.len() * self.dim];
        for (p, row) in out.chunks_mut(self.dim).enumerate() {
            self.embed_position(tokens, p, row);
        }
        out
    }
}

fn add_window(table: &VectorTable, tokens: &[TokenId], center: usize, window: usize, w: f32, out: &mut [f32]) {
    let n = tokens.len() as isize;
    let c = center as isize;
    let mut ids: Vec<TokenId> = (c - window as isize..=c + window as isize)
        .filter(|&q| q != c)
        .map(|q| {
            if q < 0 {
                TokenId::BOS
            } else if q >= n {
                TokenId::EOS
            } else {
                tokens[q as usize]
            }
        })
        .collect();
    // Fixed summation order keeps the result a function of the multiset.
    ids.sort_unstable();
    for id in ids {
        table.add_to(id, w, out);
    }
}

/// Hashing stand-in for a decoder with monotone attention.
///
/// The state for prefix length `i` attends to source position
/// `min(floor(i / ratio), n - 1)` and mixes that token, its source window and
/// the last `window` target tokens. It is a pure function of
/// `(source, prefix)`, which makes teacher-forced target keys and
/// decoding-time queries directly comparable.
#[derive(Debug, Clone)]
pub struct SyntheticDecoder {
    pub dim: usize,
    pub window: usize,
    pub seed: u64,
    /// Expected target/source length ratio.
    pub length_ratio: f64,
    center: VectorTable,
    context: VectorTable,
    prev: VectorTable,
}

impl SyntheticDecoder {
    pub fn new(dim: usize, window: usize, seed: u64, length_ratio: f64, src_vocab: usize, tgt_vocab: usize) -> Result<Self> {
        check_dim(dim)?;
        if !(length_ratio > 0.0 && length_ratio.is_finite()) {
            return Err(Error::InvalidConfig(format!("length ratio must be positive, got {length_ratio}")));
        }
        Ok(SyntheticDecoder {
            dim,
            window,
            seed,
            length_ratio,
            center: VectorTable::new(seed, ROLE_DEC_CENTER, dim, src_vocab),
            context: VectorTable::new(seed, ROLE_DEC_CONTEXT, dim, src_vocab),
            prev: VectorTable::new(seed, ROLE_DEC_PREV, dim, tgt_vocab),
        })
    }

    pub fn for_corpus(corpus: &ParallelCorpus, dim: usize, window: usize, seed: u64) -> Result<Self> {
        Self::new(
            dim,
            window,
            seed,
            corpus_length_ratio(corpus),
            corpus.vocab_src.len(),
            corpus.vocab_tgt.len(),
        )
    }

    /// Source position attended at prefix length `i`.
    pub fn attended_position(&self, src_len: usize, i: usize) -> usize {
        ((i as f64 / self.length_ratio).floor() as usize).min(src_len.saturating_sub(1))
    }

    pub fn state_into(&self, source: &[TokenId], prefix: &[TokenId], out: &mut [f32]) {
        out.fill(0.0);
        let a = self.attended_position(source.len(), prefix.len());
        self.center.add_to(source[a], 1.0, out);
        add_window(&self.context, source, a, self.window, DEFAULT_CONTEXT_WEIGHT, out);
        for j in 1..=self.window.max(1) {
            let id = if prefix.len() >= j {
                prefix[prefix.len() - j]
            } else {
                TokenId::BOS
            };
            self.prev.add_to(id, DEFAULT_CONTEXT_WEIGHT, out);
        }
        normalize(out);
    }

    pub fn state(&self, source: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f32>> {
        if source.is_empty() {
            return Err(Error::EmptySource);
        }
        let mut out = vec![0.0; self.dim];
        self.state_into(source, prefix, &mut out);
        Ok(out)
    }
}

pub fn corpus_length_ratio(corpus: &ParallelCorpus) -> f64 {
    corpus.target_token_count() as f64 / corpus.source_token_count().max(1) as f64
}

/// Deterministic representations for one side of `corpus`.
///
/// Source rows come from [`SyntheticEmbedder`]; target rows are teacher-forced
/// [`SyntheticDecoder`] states, one per target position.
pub fn synthetic_embed(
    corpus: &ParallelCorpus,
    side: Side,
    dim: usize,
    window: usize,
    seed: u64,
    exec: Exec,
) -> Result<ReprMatrix> {
    let lengths = corpus.sentence_lengths(side);
    let mut data = vec![0f32; corpus.token_count(side) * dim];
    let offsets = corpus.offsets(side);
    match side {
        Side::Source => {
            let emb = SyntheticEmbedder::new(dim, window, seed, corpus.vocab_src.len())?;
            let rows = exec.map_range(corpus.len(), |s| emb.embed_sentence(&corpus.pairs[s].src));
            for (s, r) in rows.into_iter().enumerate() {
                data[offsets[s] * dim..offsets[s + 1] * dim].copy_from_slice(&r);
            }
        }
        Side::Target => {
            let dec = SyntheticDecoder::for_corpus(corpus, dim, window, seed)?;
            let rows = exec.map_range(corpus.len(), |s| {
                let pair = &corpus.pairs[s];
                let mut out = vec![0f32; pair.tgt.len() * dim];
                for (k, row) in out.chunks_mut(dim).enumerate() {
                    dec.state_into(&pair.src, &pair.tgt[..k], row);
                }
                out
            });
            for (s, r) in rows.into_iter().enumerate() {
                data[offsets[s] * dim..offsets[s + 1] * dim].copy_from_slice(&r);
            }
        }
    }
    ReprMatrix::new(side, dim, data, &lengths)
}

/// One decoder step of a base translation model.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModelStep {
    pub p_mt: SparseDistribution,
    /// Decoder state used as the kNN query.
    pub hidden: Vec<f32>,
}

/// A base translation model driven one step at a time.
pub trait BaseModel: Sync {
    fn step(&self, source: &[TokenId], prefix: &[TokenId]) -> Result<BaseModelStep>;

    fn hidden_dim(&self) -> usize;
}

impl<M: BaseModel + ?Sized> BaseModel for &M {
    fn step(&self, source: &[TokenId], prefix: &[TokenId]) -> Result<BaseModelStep> {
        (**self).step(source, prefix)
    }

    fn hidden_dim(&self) -> usize {
        (**self).hidden_dim()
    }
}

/// Uniform over the whole target vocabulary; never ends a sentence.
#[derive(Debug, Clone)]
pub struct UniformModel {
    pub vocab_size: usize,
    pub decoder: SyntheticDecoder,
}

impl BaseModel for UniformModel {
    fn step(&self, source: &[TokenId], prefix: &[TokenId]) -> Result<BaseModelStep> {
        let hidden = self.decoder.state(source, prefix)?;
        Ok(BaseModelStep {
            p_mt: SparseDistribution::uniform((0..self.vocab_size as u32).map(TokenId)),
            hidden,
        })
    }

    fn hidden_dim(&self) -> usize {
        self.decoder.dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LexicalConfig {
    /// Spread mass evenly over a source token's observed translations
    /// instead of weighting by alignment counts.
    pub flat: bool,
    /// Weight of the target bigram model in `[0, 1]`.
    pub bigram_weight: f64,
}

impl Default for LexicalConfig {
    fn default() -> Self {
        LexicalConfig {
            flat: false,
            bigram_weight: 0.0,
        }
    }
}

/// Count-based copy/bigram model estimated from an aligned corpus.
///
/// Step `i` translates the monotonically attended source token with the
/// alignment-count table, optionally mixed with a target bigram, and emits
/// end-of-sentence once the expected length `round(n * ratio)` is reached.
#[derive(Debug, Clone)]
pub struct LexicalModel {
    pub decoder: SyntheticDecoder,
    pub config: LexicalConfig,
    translations: Vec<SparseDistribution>,
    bigrams: HashMap<TokenId, SparseDistribution>,
    tgt_vocab: usize,
}

impl LexicalModel {
    pub fn from_corpus(corpus: &ParallelCorpus, decoder: SyntheticDecoder, config: LexicalConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.bigram_weight) {
            return Err(Error::InvalidConfig("bigram weight must lie in [0, 1]".into()));
        }
        let mut counts: Vec<HashMap<TokenId, f64>> = vec![HashMap::new(); corpus.vocab_src.len()];
        let mut bigram_counts: HashMap<TokenId, HashMap<TokenId, f64>> = HashMap::new();
        for pair in &corpus.pairs {
            for &(s, t) in &pair.alignment {
                *counts[pair.src[s as usize].index()]
                    .entry(pair.tgt[t as usize])
                    .or_default() += 1.0;
            }
            let mut prev = TokenId::BOS;
            for &y in pair.tgt.iter().chain(std::iter::once(&TokenId::EOS)) {
                *bigram_counts.entry(prev).or_default().entry(y).or_default() += 1.0;
                prev = y;
            }
        }
        let translations = counts
            .into_iter()
            .map(|m| {
                if config.flat {
                    SparseDistribution::uniform(m.into_keys())
                } else {
                    SparseDistribution::normalized(m)
                }
            })
            .collect();
        let bigrams = bigram_counts
            .into_iter()
            .map(|(k, m)| (k, SparseDistribution::normalized(m)))
            .collect();
        Ok(LexicalModel {
            decoder,
            config,
            translations,
            bigrams,
            tgt_vocab: corpus.vocab_tgt.len(),
        })
    }

    pub fn expected_length(&self, src_len: usize) -> usize {
        ((src_len as f64 * self.decoder.length_ratio).round() as usize).max(1)
    }

    fn lexical(&self, token: TokenId) -> SparseDistribution {
        match self.translations.get(token.index()) {
            Some(d) if !d.is_empty() => d.clone(),
            _ => SparseDistribution::uniform((0..self.tgt_vocab as u32).map(TokenId)),
        }
    }
}

impl BaseModel for LexicalModel {
    fn step(&self, source: &[TokenId], prefix: &[TokenId]) -> Result<BaseModelStep> {
        let hidden = self.decoder.state(source, prefix)?;
        let i = prefix.len();
        if i >= self.expected_length(source.len()) {
            return Ok(BaseModelStep {
                p_mt: SparseDistribution::point(TokenId::EOS),
                hidden,
            });
        }
        let a = self.decoder.attended_position(source.len(), i);
        let lex = self.lexical(source[a]);
        let w = self.config.bigram_weight;
        let p_mt = if w > 0.0 {
            let prev = prefix.last().copied().unwrap_or(TokenId::BOS);
            match self.bigrams.get(&prev) {
                Some(bi) => {
                    // End of sentence is decided by length, not by the bigram.
                    let bi = SparseDistribution::normalized(bi.iter().filter(|t| t.0 != TokenId::EOS));
                    crate::decode::interpolate(&lex, &bi, w)?
                }
                None => lex,
            }
        } else {
            lex
        };
        Ok(BaseModelStep { p_mt, hidden })
    }

    fn hidden_dim(&self) -> usize {
        self.decoder.dim
    }
}

/// Wraps a model with a dense output layer over `rows` vocabulary entries.
///
/// The layer computes `softmax(W h)` for every step and mixes it in with
/// weight `mix`. It reproduces the per-step cost profile of a neural decoder,
/// whose vocabulary projection dominates the step time.
#[derive(Debug, Clone)]
pub struct OutputLayerModel<M> {
    pub inner: M,
    pub mix: f64,
    rows: usize,
    weights: Vec<f32>,
}

impl<M: BaseModel> OutputLayerModel<M> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn new(inner: M, rows: usize, mix: f64, seed: u64) -> Self {
        let dim = inner.hidden_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x5eed));
        let scale = 1.0 / (dim as f32).sqrt();
        let weights = (0..rows * dim)
            .map(|_| {
                let x: f32 = StandardNormal.sample(&mut rng);
                scale * x
            })
            .collect();
        OutputLayerModel {
            inner,
            mix,
            rows,
            weights,
        }
    }
}

impl<M: BaseModel> BaseModel for OutputLayerModel<M> {
    fn step(&self, source: &[TokenId], prefix: &[TokenId]) -> Result<BaseModelStep> {
        let step = self.inner.step(source, prefix)?;
        let dim = step.hidden.len();
        let logits: Vec<f32> = self
            .weights
            .chunks_exact(dim)
            .map(|w| dot(w, &step.hidden))
            .collect();
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) as f64).exp()).collect();
        let z: f64 = exps.iter().sum();
        let dense = SparseDistribution::from_masses(
            exps.iter()
                .enumerate()
                .map(|(i, &e)| (TokenId(i as u32), self.mix * e / z)),
        );
        let mut p_mt = SparseDistribution::from_masses(
            step.p_mt
                .iter()
                .map(|(t, p)| (t, (1.0 - self.mix) * p))
                .chain(dense.iter()),
        );
        if p_mt.is_empty() {
            p_mt = step.p_mt;
        }
        Ok(BaseModelStep {
            p_mt,
            hidden: step.hidden,
        })
    }

    fn hidden_dim(&self) -> usize {
        self.inner.hidden_dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::dot;

    fn toy3() -> ParallelCorpus {
        ParallelCorpus::from_lines(&["a b c a", "c b a", "a b c"], &["x y z x", "z y x", "x y z"])
            .unwrap()
            .with_alignments(vec![
                vec![(0, 0), (1, 1), (2, 2), (3, 3)],
                vec![(0, 0), (1, 1), (2, 2)],
                vec![(0, 0), (1, 1), (2, 2)],
            ])
            .unwrap()
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let c = ParallelCorpus::from_lines(&["A B C D"], &["b c d a"]).unwrap();
        let data: Vec<f32> = (0..16).map(|i| i as f32 * 0.1 - 0.7).collect();
        let m = ReprMatrix::new(Side::Source, 4, data, &c.sentence_lengths(Side::Source)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.bin");
        m.save(&path).unwrap();
        let back = load_representations(&path, &c, Side::Source).unwrap();
        assert_eq!(back.dim(), 4);
        assert_eq!(back.rows(), 4);
        assert!(back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn row_count_mismatch_and_bad_header() {
        let c = ParallelCorpus::from_lines(&["A B C D"], &["b c d a"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.bin");
        write_repr_file(&path, 4, &[0.0; 20]).unwrap();
        assert!(matches!(
            load_representations(&path, &c, Side::Source),
            Err(Error::RowCountMismatch { expected: 4, found: 5 })
        ));
        std::fs::write(&path, b"NOTAREPRxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(read_repr_file(&path), Err(Error::BadHeader { .. })));
        write_repr_file(&path, 4, &[f32::NAN; 16]).unwrap();
        assert!(matches!(
            load_representations(&path, &c, Side::Source),
            Err(Error::NonFinite { row: 0, col: 0 })
        ));
    }

    #[test]
    fn synthetic_embedding_contract() {
        let c = toy3();
        let m = synthetic_embed(&c, Side::Source, 16, 1, 7, Exec::Sequential).unwrap();
        // Positions 0 and 1 of "a b c a" and "a b c" share token and neighbors.
        for p in 0..2 {
            assert_eq!(m.row_at(Loc::new(0, p)), m.row_at(Loc::new(2, p)));
        }
        assert_ne!(m.row_at(Loc::new(0, 2)), m.row_at(Loc::new(2, 2)));
        // Token b with neighbors {a, c} vs {c, a}: same multiset.
        assert_eq!(m.row_at(Loc::new(0, 1)), m.row_at(Loc::new(1, 1)));
        // Token a at different contexts differs.
        let cos = dot(m.row_at(Loc::new(0, 0)), m.row_at(Loc::new(0, 3)));
        assert!(cos < 1.0 - 1e-4, "cos = {cos}");
        for r in 0..m.rows() {
            assert!((dot(m.row(r), m.row(r)) - 1.0).abs() < 1e-5);
        }
        let other = synthetic_embed(&c, Side::Source, 16, 1, 8, Exec::Sequential).unwrap();
        assert_ne!(m.row(0), other.row(0));
        let par = synthetic_embed(&c, Side::Source, 16, 1, 7, Exec::Parallel).unwrap();
        assert_eq!(m, par);
        assert!(synthetic_embed(&c, Side::Source, 4, 1, 7, Exec::Sequential).is_err());
    }

    #[test]
    fn target_rows_are_teacher_forced_decoder_states() {
        let c = toy3();
        let m = synthetic_embed(&c, Side::Target, 16, 2, 3, Exec::Sequential).unwrap();
        let dec = SyntheticDecoder::for_corpus(&c, 16, 2, 3).unwrap();
        let p = &c.pairs[1];
        for k in 0..p.tgt.len() {
            assert_eq!(m.row_at(Loc::new(1, k)), dec.state(&p.src, &p.tgt[..k]).unwrap().as_slice());
        }
    }

    #[test]
    fn hidden_state_depends_on_prefix() {
        let c = toy3();
        let dec = SyntheticDecoder::for_corpus(&c, 16, 2, 3).unwrap();
        let src = &c.pairs[0].src;
        let a = dec.state(src, &[c.pairs[0].tgt[0]]).unwrap();
        let b = dec.state(src, &[c.pairs[0].tgt[1]]).unwrap();
        assert_ne!(a, b);
        assert!(dec.state(&[], &[]).is_err());
    }

    #[test]
    fn uniform_model_is_uniform() {
        let c = toy3();
        let dec = SyntheticDecoder::for_corpus(&c, 16, 2, 3).unwrap();
        let m = UniformModel { vocab_size: 3, decoder: dec };
        let step = m.step(&c.pairs[0].src, &[]).unwrap();
        for t in 0..3 {
            assert!((step.p_mt.get(TokenId(t)) - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(m.step(&[], &[]).is_err());
    }

    #[test]
    fn lexical_model_follows_alignment_counts() {
        let c = toy3();
        let dec = SyntheticDecoder::for_corpus(&c, 16, 2, 3).unwrap();
        let m = LexicalModel::from_corpus(&c, dec, LexicalConfig::default()).unwrap();
        let src = &c.pairs[2].src;
        let s0 = m.step(src, &[]).unwrap();
        assert_eq!(s0.p_mt.argmax(), Some(c.vocab_tgt.id("x").unwrap()));
        assert!((s0.p_mt.total() - 1.0).abs() < 1e-9);
        let end = m.step(src, &c.pairs[2].tgt).unwrap();
        assert_eq!(end.p_mt, SparseDistribution::point(TokenId::EOS));
    }

    #[test]
    fn output_layer_keeps_a_distribution() {
        let c = toy3();
        let dec = SyntheticDecoder::for_corpus(&c, 16, 2, 3).unwrap();
        let inner = LexicalModel::from_corpus(&c, dec, LexicalConfig::default()).unwrap();
        let m = OutputLayerModel::new(inner, 50, 0.1, 1);
        let s = m.step(&c.pairs[0].src, &[]).unwrap();
        assert!((s.p_mt.total() - 1.0).abs() < 1e-9);
        assert!(s.p_mt.len() >= 50);
    }
}
