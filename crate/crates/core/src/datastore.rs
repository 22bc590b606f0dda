// SPDX-License-Identifier: Apache-2.0

//! Per-source-token-type caches.
//!
//! Every alignment pair `(i, j)` of a training sentence becomes one entry in
//! the cache of source token `x_i`: the source representation of position `i`
//! plus a pointer to target position `j`. Target representations and target
//! tokens live in a shared pool indexed by target row, so a target position
//! aligned to several source positions is stored once.
//!
//! Either side can be held as raw `f32` vectors or as PQ codes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::corpus::{Loc, ParallelCorpus, Side, TokenId};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metric::Metric;
use crate::pq::{train_pq, PQCodebook, PqConfig};
use crate::repr::ReprMatrix;

pub const CACHE_MAGIC: &[u8; 8] = b"FKNNCACH";
pub const POOL_MAGIC: &[u8; 8] = b"FKNNPOOL";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CACHE_FILE: &str = "caches.bin";
pub const POOL_FILE: &str = "pool.bin";
pub const SRC_CODEBOOK_FILE: &str = "src_codebook.bin";
pub const TGT_CODEBOOK_FILE: &str = "tgt_codebook.bin";
pub const SRC_VOCAB_FILE: &str = "vocab.src.tsv";
pub const TGT_VOCAB_FILE: &str = "vocab.tgt.tsv";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CacheEntry {
    pub src: Loc,
    pub tgt: Loc,
    pub tgt_token: TokenId,
}

/// Row-major key storage, raw or PQ-coded with the owning set's codebook.
#[derive(Debug, Clone, PartialEq)]
pub enum KeyBlock {
    Raw(Vec<f32>),
    Codes(Vec<u8>),
}

impl KeyBlock {
    pub fn bytes(&self) -> usize {
        match self {
            KeyBlock::Raw(v) => v.len() * 4,
            KeyBlock::Codes(c) => c.len(),
        }
    }

    fn format(&self) -> u8 {
        match self {
            KeyBlock::Raw(_) => 0,
            KeyBlock::Codes(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenCache {
    pub token: TokenId,
    /// Sorted by `(src, tgt)`.
    pub entries: Vec<CacheEntry>,
    /// Source key of each entry, in entry order.
    pub keys: KeyBlock,
}

impl TokenCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Target keys and tokens for every target position of the training corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPool {
    pub dim: usize,
    pub keys: KeyBlock,
    pub tokens: Vec<TokenId>,
    /// Per-sentence row offsets, `sentences + 1` long.
    pub offsets: Vec<usize>,
}

impl TargetPool {
    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn row(&self, loc: Loc) -> usize {
        self.offsets[loc.sent as usize] + loc.pos as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    /// Store source keys as PQ codes.
    pub quantize: bool,
    /// Store target keys as PQ codes.
    pub quantize_target: bool,
    pub pq: PqConfigSer,
    pub metric: Metric,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            quantize: false,
            quantize_target: false,
            pq: PqConfigSer::default(),
            metric: Metric::Cosine,
            exec: Exec::default(),
        }
    }
}

/// Serializable subset of [`PqConfig`]; metric and schedule come from the
/// enclosing config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PqConfigSer {
    pub m: usize,
    pub n_codewords: usize,
    pub iters: usize,
    pub seed: u64,
    pub max_train: usize,
}

impl Default for PqConfigSer {
    fn default() -> Self {
        let d = PqConfig::default();
        PqConfigSer {
            m: d.m,
            n_codewords: d.n_codewords,
            iters: d.iters,
            seed: d.seed,
            max_train: d.max_train,
        }
    }
}

impl PqConfigSer {
    pub fn to_pq(self, metric: Metric, exec: Exec) -> PqConfig {
        PqConfig {
            m: self.m,
            n_codewords: self.n_codewords,
            iters: self.iters,
            seed: self.seed,
            max_train: self.max_train,
            metric,
            exec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub format_version: u32,
    pub dim: usize,
    pub tgt_dim: usize,
    pub metric: Metric,
    pub quantized: bool,
    pub quantize_target: bool,
    pub token_types: usize,
    pub entries: usize,
    pub target_rows: usize,
    pub unaligned_source_positions: usize,
    /// Hex SHA-256 of the producing configuration, if recorded by the caller.
    #[serde(default)]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheSet {
    pub dim: usize,
    pub metric: Metric,
    pub caches: BTreeMap<TokenId, TokenCache>,
    pub pool: TargetPool,
    pub src_codebook: Option<Arc<PQCodebook>>,
    pub tgt_codebook: Option<Arc<PQCodebook>>,
    /// Source positions without any alignment pair.
    pub unaligned_source_positions: usize,
}

impl CacheSet {
    pub fn get(&self, token: TokenId) -> Option<&TokenCache> {
        self.caches.get(&token)
    }

    pub fn entry_count(&self) -> usize {
        self.caches.values().map(TokenCache::len).sum()
    }

    pub fn is_quantized(&self) -> bool {
        self.src_codebook.is_some()
    }

    /// Bytes held by source keys and target keys.
    pub fn key_bytes(&self) -> (usize, usize) {
        (
            self.caches.values().map(|c| c.keys.bytes()).sum(),
            self.pool.keys.bytes(),
        )
    }

    /// Key bytes the same set would need at full `f32` precision.
    pub fn full_precision_key_bytes(&self) -> (usize, usize) {
        (self.entry_count() * self.dim * 4, self.pool.rows() * self.pool.dim * 4)
    }

    pub fn manifest(&self) -> CacheManifest {
        CacheManifest {
            format_version: FORMAT_VERSION,
            dim: self.dim,
            tgt_dim: self.pool.dim,
            metric: self.metric,
            quantized: self.src_codebook.is_some(),
            quantize_target: self.tgt_codebook.is_some(),
            token_types: self.caches.len(),
            entries: self.entry_count(),
            target_rows: self.pool.rows(),
            unaligned_source_positions: self.unaligned_source_positions,
            config_hash: None,
        }
    }

    /// Writes the set into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path, config_hash: Option<String>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Some(cb) = &self.src_codebook {
            cb.save(&dir.join(SRC_CODEBOOK_FILE))?;
        }
        if let Some(cb) = &self.tgt_codebook {
            cb.save(&dir.join(TGT_CODEBOOK_FILE))?;
        }
        self.write_caches(&dir.join(CACHE_FILE))?;
        self.write_pool(&dir.join(POOL_FILE))?;
        let mut manifest = self.manifest();
        manifest.config_hash = config_hash;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn read_manifest(dir: &Path) -> Result<CacheManifest> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingManifest(dir.to_path_buf()));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: CacheManifest = serde_json::from_str(&text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::BadHeader {
                what: "cache manifest",
                detail: format!("format version {} (expected {FORMAT_VERSION})", m.format_version),
            });
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Self::read_manifest(dir)?;
        let load_cb = |name: &str, wanted: bool| -> Result<Option<Arc<PQCodebook>>> {
            if !wanted {
                return Ok(None);
            }
            let p = dir.join(name);
            if !p.exists() {
                return Err(Error::MissingManifest(p));
            }
            Ok(Some(Arc::new(PQCodebook::load(&p)?)))
        };
        let src_codebook = load_cb(SRC_CODEBOOK_FILE, manifest.quantized)?;
        let tgt_codebook = load_cb(TGT_CODEBOOK_FILE, manifest.quantize_target)?;
        let caches = read_caches(&dir.join(CACHE_FILE), manifest.dim, src_codebook.as_deref())?;
        let pool = read_pool(&dir.join(POOL_FILE), tgt_codebook.as_deref())?;
        let set = CacheSet {
            dim: manifest.dim,
            metric: manifest.metric,
            caches,
            pool,
            src_codebook,
            tgt_codebook,
            unaligned_source_positions: manifest.unaligned_source_positions,
        };
        if set.entry_count() != manifest.entries || set.pool.rows() != manifest.target_rows {
            return Err(Error::BadHeader {
                what: "cache set",
                detail: "entry counts disagree with manifest".into(),
            });
        }
        Ok(set)
    }

    /// A copy of this full-precision set with PQ codes in place of raw keys.
    /// The source codebook is trained on the cached source keys, the target
    /// codebook (when `target` is set) on the pooled target keys.
    pub fn quantized(&self, pq: &PqConfig, target: bool) -> Result<CacheSet> {
        if self.is_quantized() || self.tgt_codebook.is_some() {
            return Err(Error::InvalidConfig("cache set is already quantized".into()));
        }
        let pq = PqConfig { metric: self.metric, ..*pq };
        let mut train_src = Vec::with_capacity(self.entry_count() * self.dim);
        for c in self.caches.values() {
            if let KeyBlock::Raw(k) = &c.keys {
                train_src.extend_from_slice(k);
            }
        }
        let src_cb = Arc::new(train_pq(&train_src, self.dim, &pq)?);
        drop(train_src);
        let mut caches = BTreeMap::new();
        for (t, c) in &self.caches {
            let KeyBlock::Raw(raw) = &c.keys else {
                return Err(Error::InvalidConfig("mixed raw and quantized caches".into()));
            };
            let codes = src_cb.encode_with(raw, pq.exec)?.codes;
            caches.insert(
                *t,
                TokenCache {
                    token: *t,
                    entries: c.entries.clone(),
                    keys: KeyBlock::Codes(codes),
                },
            );
        }
        let (pool_keys, tgt_codebook) = match (&self.pool.keys, target) {
            (KeyBlock::Raw(raw), true) => {
                let cb = Arc::new(train_pq(raw, self.pool.dim, &pq)?);
                (KeyBlock::Codes(cb.encode_with(raw, pq.exec)?.codes), Some(cb))
            }
            (keys, _) => (keys.clone(), None),
        };
        Ok(CacheSet {
            dim: self.dim,
            metric: self.metric,
            caches,
            pool: TargetPool {
                dim: self.pool.dim,
                keys: pool_keys,
                tokens: self.pool.tokens.clone(),
                offsets: self.pool.offsets.clone(),
            },
            src_codebook: Some(src_cb),
            tgt_codebook,
            unaligned_source_positions: self.unaligned_source_positions,
        })
    }

    fn write_caches(&self, path: &Path) -> Result<()> {
        let mut w = binio::create(path)?;
        w.write_all(CACHE_MAGIC)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u64::<LittleEndian>(self.caches.len() as u64)?;
        for cache in self.caches.values() {
            w.write_u32::<LittleEndian>(cache.token.0)?;
            w.write_u64::<LittleEndian>(cache.len() as u64)?;
            w.write_u8(cache.keys.format())?;
            let mut flat = Vec::with_capacity(cache.len() * 5);
            for e in &cache.entries {
                flat.extend_from_slice(&[e.src.sent, e.src.pos, e.tgt.sent, e.tgt.pos, e.tgt_token.0]);
            }
            binio::write_u32s(&mut w, &flat)?;
            write_block(&mut w, &cache.keys)?;
        }
        w.flush()?;
        Ok(())
    }

    fn write_pool(&self, path: &Path) -> Result<()> {
        let mut w = binio::create(path)?;
        w.write_all(POOL_MAGIC)?;
        w.write_u32::<LittleEndian>(self.pool.dim as u32)?;
        w.write_u64::<LittleEndian>(self.pool.rows() as u64)?;
        w.write_u64::<LittleEndian>(self.pool.offsets.len() as u64 - 1)?;
        w.write_u8(self.pool.keys.format())?;
        for &o in &self.pool.offsets {
            w.write_u64::<LittleEndian>(o as u64)?;
        }
        let toks: Vec<u32> = self.pool.tokens.iter().map(|t| t.0).collect();
        binio::write_u32s(&mut w, &toks)?;
        write_block(&mut w, &self.pool.keys)?;
        w.flush()?;
        Ok(())
    }
}

fn write_block<W: Write>(w: &mut W, block: &KeyBlock) -> Result<()> {
    match block {
        KeyBlock::Raw(v) => binio::write_f32s(w, v),
        KeyBlock::Codes(c) => Ok(w.write_all(c)?),
    }
}

fn read_block<R: Read>(r: &mut R, format: u8, n: usize, dim: usize, codebook: Option<&PQCodebook>, what: &'static str) -> Result<KeyBlock> {
    match (format, codebook) {
        (0, _) => Ok(KeyBlock::Raw(binio::read_f32s(r, n * dim, what)?)),
        (1, Some(cb)) => Ok(KeyBlock::Codes(binio::read_bytes(r, n * cb.m, what)?)),
        (1, None) => Err(Error::BadHeader {
            what,
            detail: "coded keys without a codebook".into(),
        }),
        (f, _) => Err(Error::BadHeader {
            what,
            detail: format!("unknown key format {f}"),
        }),
    }
}

fn read_caches(path: &Path, dim: usize, codebook: Option<&PQCodebook>) -> Result<BTreeMap<TokenId, TokenCache>> {
    let mut r = binio::open(path)?;
    binio::read_magic(&mut r, CACHE_MAGIC, "cache file")?;
    let t = |e| binio::truncated("cache file", e);
    let file_dim = r.read_u32::<LittleEndian>().map_err(t)? as usize;
    if file_dim != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: file_dim,
        });
    }
    let types = r.read_u64::<LittleEndian>().map_err(t)?;
    let mut caches = BTreeMap::new();
    for _ in 0..types {
        let token = TokenId(r.read_u32::<LittleEndian>().map_err(t)?);
        let n = r.read_u64::<LittleEndian>().map_err(t)? as usize;
        let format = r.read_u8().map_err(t)?;
        let flat = binio::read_u32s(&mut r, n * 5, "cache entries")?;
        let entries = flat
            .chunks_exact(5)
            .map(|e| CacheEntry {
                src: Loc { sent: e[0], pos: e[1] },
                tgt: Loc { sent: e[2], pos: e[3] },
                tgt_token: TokenId(e[4]),
            })
            .collect();
        let keys = read_block(&mut r, format, n, dim, codebook, "cache keys")?;
        caches.insert(token, TokenCache { token, entries, keys });
    }
    binio::expect_eof(&mut r, "cache file")?;
    Ok(caches)
}

fn read_pool(path: &Path, codebook: Option<&PQCodebook>) -> Result<TargetPool> {
    let mut r = binio::open(path)?;
    binio::read_magic(&mut r, POOL_MAGIC, "target pool")?;
    let t = |e| binio::truncated("target pool", e);
    let dim = r.read_u32::<LittleEndian>().map_err(t)? as usize;
    let rows = r.read_u64::<LittleEndian>().map_err(t)? as usize;
    let sents = r.read_u64::<LittleEndian>().map_err(t)? as usize;
    let format = r.read_u8().map_err(t)?;
    let mut offsets = Vec::with_capacity(sents + 1);
    for _ in 0..=sents {
        offsets.push(r.read_u64::<LittleEndian>().map_err(t)? as usize);
    }
    let tokens = binio::read_u32s(&mut r, rows, "target pool tokens")?
        .into_iter()
        .map(TokenId)
        .collect();
    let keys = read_block(&mut r, format, rows, dim, codebook, "target pool keys")?;
    binio::expect_eof(&mut r, "target pool")?;
    Ok(TargetPool {
        dim,
        keys,
        tokens,
        offsets,
    })
}

/// Default location of a cache set's search indexes.
pub fn index_dir(cache_dir: &Path) -> PathBuf {
    cache_dir.join("index")
}

/// Groups every alignment pair by source token type.
pub fn build_caches(corpus: &ParallelCorpus, src: &ReprMatrix, tgt: &ReprMatrix, cfg: &CacheConfig) -> Result<CacheSet> {
    for (m, side) in [(src, Side::Source), (tgt, Side::Target)] {
        if m.side() != side {
            return Err(Error::InvalidConfig(format!("expected {side} representations, got {}", m.side())));
        }
        if m.rows() != corpus.token_count(side) {
            return Err(Error::RowCountMismatch {
                expected: corpus.token_count(side),
                found: m.rows(),
            });
        }
    }
    let dim = src.dim();

    let mut grouped: BTreeMap<TokenId, Vec<CacheEntry>> = BTreeMap::new();
    let mut unaligned = 0;
    for (s, pair) in corpus.pairs.iter().enumerate() {
        unaligned += pair.unaligned_source_positions().len();
        for &(i, j) in &pair.alignment {
            grouped.entry(pair.src[i as usize]).or_default().push(CacheEntry {
                src: Loc::new(s, i as usize),
                tgt: Loc::new(s, j as usize),
                tgt_token: pair.tgt[j as usize],
            });
        }
    }

    let train = |m: &ReprMatrix| -> Result<Arc<PQCodebook>> {
        let pq = cfg.pq.to_pq(cfg.metric, cfg.exec);
        Ok(Arc::new(train_pq(m.data(), m.dim(), &pq)?))
    };
    let src_codebook = if cfg.quantize { Some(train(src)?) } else { None };
    let tgt_codebook = if cfg.quantize_target { Some(train(tgt)?) } else { None };

    let groups: Vec<(TokenId, Vec<CacheEntry>)> = grouped.into_iter().collect();
    let built = cfg.exec.map(&groups, |(token, entries)| -> Result<TokenCache> {
        let mut raw = Vec::with_capacity(entries.len() * dim);
        for e in entries {
            raw.extend_from_slice(src.row_at(e.src));
        }
        let keys = match &src_codebook {
            Some(cb) => KeyBlock::Codes(cb.encode_with(&raw, Exec::Sequential)?.codes),
            None => KeyBlock::Raw(raw),
        };
        Ok(TokenCache {
            token: *token,
            entries: entries.clone(),
            keys,
        })
    });
    let mut caches = BTreeMap::new();
    for c in built {
        let c = c?;
        caches.insert(c.token, c);
    }

    let pool_keys = match &tgt_codebook {
        Some(cb) => KeyBlock::Codes(cb.encode_with(tgt.data(), cfg.exec)?.codes),
        None => KeyBlock::Raw(tgt.data().to_vec()),
    };
    let pool = TargetPool {
        dim: tgt.dim(),
        keys: pool_keys,
        tokens: corpus.pairs.iter().flat_map(|p| p.tgt.iter().copied()).collect(),
        offsets: corpus.offsets(Side::Target).to_vec(),
    };
    Ok(CacheSet {
        dim,
        metric: cfg.metric,
        caches,
        pool,
        src_codebook,
        tgt_codebook,
        unaligned_source_positions: unaligned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repr::synthetic_embed;
    use proptest::prelude::*;

    fn corpus() -> ParallelCorpus {
        ParallelCorpus::from_lines(&["a b c a", "c b", "a d"], &["x y z x", "z y", "x w q"])
            .unwrap()
            .with_alignments(vec![
                vec![(0, 0), (1, 1), (2, 2), (3, 3)],
                vec![(0, 0), (0, 1)],
                vec![(0, 0), (0, 2)],
            ])
            .unwrap()
    }

    fn reprs(c: &ParallelCorpus) -> (ReprMatrix, ReprMatrix) {
        (
            synthetic_embed(c, Side::Source, 8, 1, 1, Exec::Sequential).unwrap(),
            synthetic_embed(c, Side::Target, 8, 1, 1, Exec::Sequential).unwrap(),
        )
    }

    #[test]
    fn entries_follow_alignments() {
        let c = corpus();
        let (s, t) = reprs(&c);
        let set = build_caches(&c, &s, &t, &CacheConfig::default()).unwrap();
        let a = c.vocab_src.id("a").unwrap();
        assert_eq!(set.get(a).unwrap().len(), 4);
        assert_eq!(set.get(c.vocab_src.id("c").unwrap()).unwrap().len(), 3);
        assert!(set.get(c.vocab_src.id("d").unwrap()).is_none());
        assert_eq!(set.entry_count(), c.alignment_pair_count());
        // "b" in sentence 1 and "d" in sentence 2 are unaligned.
        assert_eq!(set.unaligned_source_positions, 2);
        let KeyBlock::Raw(keys) = &set.get(a).unwrap().keys else { panic!() };
        for (e, k) in set.get(a).unwrap().entries.iter().zip(keys.chunks(8)) {
            assert_eq!(k, s.row_at(e.src));
            assert_eq!(e.tgt_token, c.token_at(Side::Target, e.tgt));
        }
        assert_eq!(set.pool.rows(), c.target_token_count());
    }

    #[test]
    fn save_load_round_trip() {
        let c = corpus();
        let (s, t) = reprs(&c);
        let dir = tempfile::tempdir().unwrap();
        for (q, qt) in [(false, false), (true, true), (true, false)] {
            let cfg = CacheConfig {
                quantize: q,
                quantize_target: qt,
                pq: PqConfigSer { m: 4, n_codewords: 8, ..PqConfigSer::default() },
                ..CacheConfig::default()
            };
            let set = build_caches(&c, &s, &t, &cfg).unwrap();
            let d = dir.path().join(format!("{q}{qt}"));
            set.save(&d, Some("abc".into())).unwrap();
            assert_eq!(CacheSet::load(&d).unwrap(), set);
            assert_eq!(CacheSet::read_manifest(&d).unwrap().config_hash.as_deref(), Some("abc"));
        }
        assert!(matches!(CacheSet::load(&dir.path().join("none")), Err(Error::MissingManifest(_))));
    }

    #[test]
    fn quantized_keys_are_m_bytes() {
        let c = corpus();
        let (s, t) = reprs(&c);
        let cfg = CacheConfig {
            quantize: true,
            quantize_target: true,
            pq: PqConfigSer { m: 2, n_codewords: 4, ..PqConfigSer::default() },
            ..CacheConfig::default()
        };
        let set = build_caches(&c, &s, &t, &cfg).unwrap();
        let (sb, tb) = set.key_bytes();
        let (fs, ft) = set.full_precision_key_bytes();
        assert_eq!(sb, set.entry_count() * 2);
        assert_eq!(tb, c.target_token_count() * 2);
        assert_eq!(fs / sb, 16);
        assert_eq!(ft / tb, 16);
    }

    #[test]
    fn quantizing_a_saved_set_keeps_entries() {
        let c = corpus();
        let (s, t) = reprs(&c);
        let set = build_caches(&c, &s, &t, &CacheConfig::default()).unwrap();
        let pq = PqConfig {
            m: 2,
            n_codewords: 4,
            ..PqConfig::default()
        };
        let q = set.quantized(&pq, true).unwrap();
        assert!(q.is_quantized() && q.tgt_codebook.is_some());
        assert_eq!(q.key_bytes(), (set.entry_count() * 2, c.target_token_count() * 2));
        for (a, b) in set.caches.values().zip(q.caches.values()) {
            assert_eq!(a.entries, b.entries);
        }
        assert_eq!(q.pool.tokens, set.pool.tokens);
        assert!(q.quantized(&pq, false).is_err());
    }

    proptest! {
        #[test]
        fn every_alignment_pair_is_cached_once(
            lens in prop::collection::vec((1usize..6, 1usize..6), 1..6),
            seed in 0u64..100,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut src = Vec::new();
            let mut tgt = Vec::new();
            let mut aligns = Vec::new();
            for &(ls, lt) in &lens {
                src.push((0..ls).map(|_| format!("s{}", rng.random_range(0..4))).collect::<Vec<_>>().join(" "));
                tgt.push((0..lt).map(|_| format!("t{}", rng.random_range(0..4))).collect::<Vec<_>>().join(" "));
                let mut a = Vec::new();
                for i in 0..ls {
                    for j in 0..lt {
                        if rng.random_bool(0.3) {
                            a.push((i as u32, j as u32));
                        }
                    }
                }
                aligns.push(a);
            }
            let c = ParallelCorpus::from_lines(&src, &tgt).unwrap().with_alignments(aligns).unwrap();
            let (s, t) = reprs(&c);
            let set = build_caches(&c, &s, &t, &CacheConfig { exec: Exec::Sequential, ..CacheConfig::default() }).unwrap();
            let mut seen: Vec<(Loc, Loc)> = set.caches.values().flat_map(|cache| {
                cache.entries.iter().map(|e| {
                    assert_eq!(c.token_at(Side::Source, e.src), cache.token);
                    (e.src, e.tgt)
                }).collect::<Vec<_>>()
            }).collect();
            let mut expect: Vec<(Loc, Loc)> = c.pairs.iter().enumerate().flat_map(|(si, p)| {
                p.alignment.iter().map(move |&(i, j)| (Loc::new(si, i as usize), Loc::new(si, j as usize)))
            }).collect();
            seen.sort();
            expect.sort();
            prop_assert_eq!(seen, expect);
        }
    }
}
