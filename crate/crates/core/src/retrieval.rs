// SPDX-License-Identifier: Apache-2.0

//! Test-time neighbor selection and target datastore assembly.
//!
//! For each position of a test source sentence, the `c` nearest cached
//! entries of the same source token type are retrieved. Their aligned target
//! positions, with target keys and tokens, form a small datastore for decoding
//! that sentence. Source tokens without a cache contribute nothing.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::annindex::{IndexSet, KeyStore, Scorer, SearchHit, SearchStats, TopK};
use crate::binio;
use crate::corpus::{Loc, TokenId};
use crate::datastore::{CacheEntry, CacheSet, KeyBlock};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metric::Metric;
use crate::pq::{PQCodebook, PQCodes};

pub const TDS_MAGIC: &[u8; 8] = b"FKNNTDS1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Neighbors kept per source position.
    pub c: usize,
    pub nprobe: usize,
    /// Keep a target position once even if several source neighbors map to it.
    pub dedupe: bool,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            c: 512,
            nprobe: 32,
            dedupe: true,
            exec: Exec::default(),
        }
    }
}

/// Neighbors retrieved for one test source position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionNeighbors {
    pub pos: usize,
    pub token: TokenId,
    /// Nearest first.
    pub hits: Vec<(CacheEntry, f32)>,
    pub stats: SearchStats,
}

/// Per-position top-`c` search in the cache of each position's token type.
pub fn select_source_neighbors(
    source: &[TokenId],
    source_reprs: &[f32],
    caches: &CacheSet,
    indexes: &IndexSet,
    cfg: &RetrievalConfig,
) -> Result<Vec<PositionNeighbors>> {
    if source.is_empty() {
        return Err(Error::EmptySource);
    }
    let dim = caches.dim;
    if source_reprs.len() != source.len() * dim {
        return Err(Error::DimMismatch {
            expected: source.len() * dim,
            got: source_reprs.len(),
        });
    }
    let out = cfg.exec.map_range(source.len(), |pos| -> Result<PositionNeighbors> {
        let token = source[pos];
        let mut result = PositionNeighbors {
            pos,
            token,
            hits: Vec::new(),
            stats: SearchStats::default(),
        };
        if let (Some(cache), Some(index)) = (caches.get(token), indexes.get(token)) {
            let query = &source_reprs[pos * dim..(pos + 1) * dim];
            let (hits, stats) = index.search_counted(query, cfg.c, cfg.nprobe)?;
            result.hits = hits
                .into_iter()
                .map(|h| (cache.entries[h.entry_id as usize], h.distance))
                .collect();
            result.stats = stats;
        }
        Ok(result)
    });
    out.into_iter().collect()
}

/// Searchable set of target keys with their tokens and corpus locations.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDatastore {
    pub metric: Metric,
    pub locs: Vec<Loc>,
    pub tokens: Vec<TokenId>,
    pub keys: KeyStore,
}

/// One retrieved target-side neighbor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnHit {
    pub token: TokenId,
    pub distance: f32,
    pub loc: Loc,
}

impl TargetDatastore {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.keys.dim()
    }

    /// Every target position of the training corpus.
    pub fn global(caches: &CacheSet) -> Result<Self> {
        let rows = caches.pool.rows();
        let mut locs = Vec::with_capacity(rows);
        for s in 0..caches.pool.offsets.len() - 1 {
            for p in 0..caches.pool.offsets[s + 1] - caches.pool.offsets[s] {
                locs.push(Loc::new(s, p));
            }
        }
        let keys = pool_store(caches, caches.pool.keys.clone())?;
        Ok(TargetDatastore {
            metric: caches.metric,
            locs,
            tokens: caches.pool.tokens.clone(),
            keys,
        })
    }

    /// The `k` nearest target keys, ties by datastore order, plus keys scanned.
    pub fn search(&self, query: &[f32], k: usize, exec: Exec) -> Result<(Vec<KnnHit>, u64)> {
        if self.is_empty() {
            return Ok((Vec::new(), 0));
        }
        let scorer = Scorer::new(&self.keys, self.metric, query)?;
        let n = self.len();
        const CHUNK: usize = 32_768;
        let hits: Vec<SearchHit> = if exec.is_parallel() && n > CHUNK {
            let parts = exec.map_range(n.div_ceil(CHUNK), |c| {
                let mut top = TopK::new(k);
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    top.push(i as u32, scorer.distance(i));
                }
                top.into_sorted()
            });
            let mut top = TopK::new(k);
            for h in parts.into_iter().flatten() {
                top.push(h.entry_id, h.distance);
            }
            top.into_sorted()
        } else {
            let mut top = TopK::new(k);
            for i in 0..n {
                top.push(i as u32, scorer.distance(i));
            }
            top.into_sorted()
        };
        let hits = hits
            .into_iter()
            .map(|h| KnnHit {
                token: self.tokens[h.entry_id as usize],
                distance: h.distance,
                loc: self.locs[h.entry_id as usize],
            })
            .collect();
        Ok((hits, n as u64))
    }

    pub fn key_bytes(&self) -> usize {
        match &self.keys {
            KeyStore::Raw { data, .. } => data.len() * 4,
            KeyStore::Pq { codes, .. } => codes.codes.len(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = binio::create(path)?;
        w.write_all(TDS_MAGIC)?;
        w.write_u32::<LittleEndian>(self.dim() as u32)?;
        w.write_u8(self.metric.code())?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        let mut flat = Vec::with_capacity(self.len() * 3);
        for (l, t) in self.locs.iter().zip(&self.tokens) {
            flat.extend_from_slice(&[l.sent, l.pos, t.0]);
        }
        binio::write_u32s(&mut w, &flat)?;
        match &self.keys {
            KeyStore::Raw { data, .. } => {
                w.write_u8(0)?;
                w.write_u32::<LittleEndian>(0)?;
                binio::write_f32s(&mut w, data)?;
            }
            KeyStore::Pq { codes, .. } => {
                w.write_u8(1)?;
                w.write_u32::<LittleEndian>(codes.m as u32)?;
                w.write_all(&codes.codes)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, codebook: Option<Arc<PQCodebook>>) -> Result<Self> {
        let mut r = binio::open(path)?;
        read_tds(&mut r, codebook)
    }
}

fn read_tds<R: Read>(r: &mut R, codebook: Option<Arc<PQCodebook>>) -> Result<TargetDatastore> {
    binio::read_magic(r, TDS_MAGIC, "target datastore")?;
    let t = |e| binio::truncated("target datastore", e);
    let dim = r.read_u32::<LittleEndian>().map_err(t)? as usize;
    let metric = Metric::from_code(r.read_u8().map_err(t)?)?;
    let n = r.read_u64::<LittleEndian>().map_err(t)? as usize;
    let flat = binio::read_u32s(r, n * 3, "target datastore entries")?;
    let format = r.read_u8().map_err(t)?;
    let m = r.read_u32::<LittleEndian>().map_err(t)? as usize;
    let keys = match (format, codebook) {
        (0, _) => KeyStore::Raw {
            dim,
            data: binio::read_f32s(r, n * dim, "target datastore keys")?,
        },
        (1, Some(codebook)) if codebook.m == m && codebook.dim == dim => KeyStore::Pq {
            codes: PQCodes {
                m,
                codes: binio::read_bytes(r, n * m, "target datastore codes")?,
            },
            codebook,
        },
        _ => {
            return Err(Error::BadHeader {
                what: "target datastore",
                detail: "key format needs a matching target codebook".into(),
            })
        }
    };
    binio::expect_eof(r, "target datastore")?;
    Ok(TargetDatastore {
        metric,
        locs: flat.chunks_exact(3).map(|e| Loc { sent: e[0], pos: e[1] }).collect(),
        tokens: flat.chunks_exact(3).map(|e| TokenId(e[2])).collect(),
        keys,
    })
}

fn pool_store(caches: &CacheSet, block: KeyBlock) -> Result<KeyStore> {
    let dim = caches.pool.dim;
    match block {
        KeyBlock::Raw(data) => KeyStore::raw(&data, dim, caches.metric),
        KeyBlock::Codes(codes) => {
            let codebook = caches
                .tgt_codebook
                .clone()
                .ok_or_else(|| Error::InvalidConfig("coded target pool without a codebook".into()))?;
            Ok(KeyStore::Pq {
                codes: PQCodes { m: codebook.m, codes },
                codebook,
            })
        }
    }
}

/// Maps retrieved source neighbors to their aligned target positions.
///
/// Order follows source position, then neighbor rank. With `dedupe`, a target
/// position appears once, at its first occurrence; the result then has at most
/// `c * n` entries for an `n`-token source.
pub fn assemble_target_datastore(neighbors: &[PositionNeighbors], caches: &CacheSet, dedupe: bool) -> Result<TargetDatastore> {
    let mut seen = HashSet::new();
    let mut locs = Vec::new();
    let mut tokens = Vec::new();
    for pn in neighbors {
        for (e, _) in &pn.hits {
            if dedupe && !seen.insert(e.tgt) {
                continue;
            }
            locs.push(e.tgt);
            tokens.push(e.tgt_token);
        }
    }
    let pool = &caches.pool;
    let block = match &pool.keys {
        KeyBlock::Raw(data) => {
            let d = pool.dim;
            let mut out = Vec::with_capacity(locs.len() * d);
            for &l in &locs {
                let r = pool.row(l);
                out.extend_from_slice(&data[r * d..(r + 1) * d]);
            }
            KeyBlock::Raw(out)
        }
        KeyBlock::Codes(codes) => {
            let m = caches.tgt_codebook.as_ref().map_or(0, |c| c.m);
            let mut out = Vec::with_capacity(locs.len() * m);
            for &l in &locs {
                let r = pool.row(l);
                out.extend_from_slice(&codes[r * m..(r + 1) * m]);
            }
            KeyBlock::Codes(out)
        }
    };
    Ok(TargetDatastore {
        metric: caches.metric,
        locs,
        tokens,
        keys: pool_store(caches, block)?,
    })
}

/// Retrieval statistics for one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RetrievalStats {
    pub source_len: usize,
    /// Source positions whose token type has a cache.
    pub covered_positions: usize,
    pub neighbors: usize,
    pub datastore_size: usize,
    pub search: SearchStats,
}

/// Caches plus their indexes, ready to build per-sentence datastores.
pub struct Retriever<'a> {
    pub caches: &'a CacheSet,
    pub indexes: &'a IndexSet,
    pub config: RetrievalConfig,
}

impl Retriever<'_> {
    pub fn target_datastore(&self, source: &[TokenId], source_reprs: &[f32]) -> Result<(TargetDatastore, RetrievalStats)> {
        let neighbors = select_source_neighbors(source, source_reprs, self.caches, self.indexes, &self.config)?;
        let ds = assemble_target_datastore(&neighbors, self.caches, self.config.dedupe)?;
        let mut stats = RetrievalStats {
            source_len: source.len(),
            datastore_size: ds.len(),
            ..RetrievalStats::default()
        };
        for pn in &neighbors {
            stats.covered_positions += usize::from(self.caches.get(pn.token).is_some());
            stats.neighbors += pn.hits.len();
            stats.search += pn.stats;
        }
        Ok((ds, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annindex::IndexConfig;
    use crate::corpus::{ParallelCorpus, Side};
    use crate::datastore::{build_caches, CacheConfig, PqConfigSer};
    use crate::repr::{synthetic_embed, SyntheticEmbedder};
    use proptest::prelude::*;

    fn corpus() -> ParallelCorpus {
        ParallelCorpus::from_lines(
            &["a b c", "b a", "c c a", "a b", "b c a b"],
            &["x y z", "y x", "z z x", "x y", "y z x y"],
        )
        .unwrap()
        .with_alignments(vec![
            vec![(0, 0), (1, 1), (2, 2)],
            vec![(0, 0), (0, 1), (1, 1)],
            vec![(0, 0), (1, 1), (2, 2)],
            vec![(0, 0), (1, 1)],
            vec![(0, 0), (1, 1), (2, 2), (3, 3)],
        ])
        .unwrap()
    }

    fn setup(quantize: bool) -> (ParallelCorpus, CacheSet, IndexSet, SyntheticEmbedder) {
        let c = corpus();
        let s = synthetic_embed(&c, Side::Source, 8, 1, 5, Exec::Sequential).unwrap();
        let t = synthetic_embed(&c, Side::Target, 8, 1, 5, Exec::Sequential).unwrap();
        let cfg = CacheConfig {
            quantize,
            quantize_target: quantize,
            pq: PqConfigSer { m: 4, n_codewords: 4, ..PqConfigSer::default() },
            ..CacheConfig::default()
        };
        let cs = build_caches(&c, &s, &t, &cfg).unwrap();
        let idx = IndexSet::build(&cs, &IndexConfig::default()).unwrap();
        let emb = SyntheticEmbedder::new(8, 1, 5, c.vocab_src.len()).unwrap();
        (c, cs, idx, emb)
    }

    #[test]
    fn datastore_bounded_and_mapped_through_alignments() {
        let (c, cs, idx, emb) = setup(false);
        let src = c.vocab_src.encode("b a c zzz");
        let reprs = emb.embed_sentence(&src);
        for cap in [1, 2, 100] {
            let r = Retriever {
                caches: &cs,
                indexes: &idx,
                config: RetrievalConfig { c: cap, ..RetrievalConfig::default() },
            };
            let (ds, stats) = r.target_datastore(&src, &reprs).unwrap();
            assert!(ds.len() <= cap * src.len());
            assert_eq!(stats.covered_positions, 3);
            let mut uniq = ds.locs.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), ds.len());
            for (l, t) in ds.locs.iter().zip(&ds.tokens) {
                assert_eq!(c.token_at(Side::Target, *l), *t);
            }
        }
        // Large c returns every aligned target position of the covered types.
        let r = Retriever { caches: &cs, indexes: &idx, config: RetrievalConfig { c: 100, ..RetrievalConfig::default() } };
        let (ds, _) = r.target_datastore(&src, &reprs).unwrap();
        let expect: HashSet<Loc> = cs.caches.values().flat_map(|cache| cache.entries.iter().map(|e| e.tgt)).collect();
        assert_eq!(ds.locs.iter().copied().collect::<HashSet<_>>(), expect);
    }

    #[test]
    fn neighbors_are_same_type_and_sorted() {
        let (c, cs, idx, emb) = setup(false);
        let src = c.vocab_src.encode("c a b");
        let reprs = emb.embed_sentence(&src);
        let cfg = RetrievalConfig { c: 3, ..RetrievalConfig::default() };
        let n = select_source_neighbors(&src, &reprs, &cs, &idx, &cfg).unwrap();
        for pn in &n {
            assert!(pn.hits.len() <= 3);
            for (e, _) in &pn.hits {
                assert_eq!(c.token_at(Side::Source, e.src), pn.token);
            }
            assert!(pn.hits.windows(2).all(|w| w[0].1 <= w[1].1));
        }
        assert!(matches!(select_source_neighbors(&[], &[], &cs, &idx, &cfg), Err(Error::EmptySource)));
    }

    #[test]
    fn dedupe_off_keeps_duplicates() {
        let (c, cs, idx, emb) = setup(false);
        // "a" of sentence 1 maps to two target positions, and "b" of sentence 1
        // shares target position 1.
        let src = c.vocab_src.encode("b a");
        let reprs = emb.embed_sentence(&src);
        let cfg = RetrievalConfig { c: 100, dedupe: false, ..RetrievalConfig::default() };
        let n = select_source_neighbors(&src, &reprs, &cs, &idx, &cfg).unwrap();
        let all = assemble_target_datastore(&n, &cs, false).unwrap();
        let dd = assemble_target_datastore(&n, &cs, true).unwrap();
        assert_eq!(all.len(), n.iter().map(|p| p.hits.len()).sum::<usize>());
        assert!(dd.len() < all.len());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for q in [false, true] {
            let (c, cs, idx, emb) = setup(q);
            let src = c.vocab_src.encode("a b c");
            let r = Retriever { caches: &cs, indexes: &idx, config: RetrievalConfig::default() };
            let (ds, _) = r.target_datastore(&src, &emb.embed_sentence(&src)).unwrap();
            let p = dir.path().join(format!("{q}.tds"));
            ds.save(&p).unwrap();
            assert_eq!(TargetDatastore::load(&p, cs.tgt_codebook.clone()).unwrap(), ds);
        }
    }

    #[test]
    fn global_covers_all_target_positions() {
        let (c, cs, _, _) = setup(false);
        let g = TargetDatastore::global(&cs).unwrap();
        assert_eq!(g.len(), c.target_token_count());
        for (l, t) in g.locs.iter().zip(&g.tokens) {
            assert_eq!(c.token_at(Side::Target, *l), *t);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn chunked_search_matches_sequential(n in 1usize..70_000, k in 1usize..40, seed in 0u64..10) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n * 2).map(|_| rng.random_range(-3..3) as f32).collect();
            let ds = TargetDatastore {
                metric: Metric::L2,
                locs: (0..n).map(|i| Loc::new(0, i)).collect(),
                tokens: (0..n).map(|i| TokenId((i % 7) as u32)).collect(),
                keys: KeyStore::raw(&data, 2, Metric::L2).unwrap(),
            };
            let q = [0.5f32, -0.5];
            let a = ds.search(&q, k, Exec::Sequential).unwrap();
            let b = ds.search(&q, k, Exec::Parallel).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
