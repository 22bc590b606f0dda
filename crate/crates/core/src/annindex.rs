// SPDX-License-Identifier: Apache-2.0

//! Per-token-type search over cached keys.
//!
//! Token types with at most `freq_threshold` entries get an exact flat index.
//! More frequent types get an inverted file: keys are clustered into
//! `min(floor(4 * sqrt(n)), floor(n / 30))` lists (at least one) and a query
//! scans only the lists of its `nprobe` nearest centroids. Keys may be raw
//! vectors or PQ codes; codes are scored with asymmetric distances.
//!
//! Every result list is sorted by `(distance, entry_id)`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::corpus::TokenId;
use crate::datastore::{CacheSet, KeyBlock};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::kmeans::{self, KMeansConfig};
use crate::metric::{squared_l2, Metric};
use crate::pq::{PQCodebook, PQCodes};

pub const INDEX_MAGIC: &[u8; 8] = b"FKNNIDX1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    /// Types with more entries than this get an IVF index.
    pub freq_threshold: usize,
    pub nprobe: usize,
    /// At most this many keys train the IVF centroids.
    pub train_cap: usize,
    pub metric: Metric,
    pub kmeans_iters: usize,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            freq_threshold: 30_000,
            nprobe: 32,
            train_cap: 5_000_000,
            metric: Metric::Cosine,
            kmeans_iters: 25,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

/// IVF list count for a type with `n` entries.
pub fn ivf_nlist(n: usize) -> usize {
    let by_sqrt = (4.0 * (n as f64).sqrt()).floor() as usize;
    by_sqrt.min(n / 30).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    /// Index into the owning cache's entry list.
    pub entry_id: u32,
    pub distance: f32,
}

fn hit_order(a: &SearchHit, b: &SearchHit) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.entry_id.cmp(&b.entry_id))
}

/// Work done by one search, for cost accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SearchStats {
    /// Keys whose distance to the query was computed.
    pub scanned: u64,
    /// Coarse centroid comparisons (IVF only).
    pub centroid_ops: u64,
}

impl SearchStats {
    pub fn total(&self) -> u64 {
        self.scanned + self.centroid_ops
    }
}

impl std::ops::AddAssign for SearchStats {
    fn add_assign(&mut self, o: Self) {
        self.scanned += o.scanned;
        self.centroid_ops += o.centroid_ops;
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Ranked(SearchHit);

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        hit_order(&self.0, &other.0)
    }
}

/// Bounded selection of the `k` best hits.
pub struct TopK {
    k: usize,
    heap: BinaryHeap<Ranked>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    pub fn push(&mut self, entry_id: u32, distance: f32) {
        let hit = Ranked(SearchHit { entry_id, distance });
        if self.heap.len() < self.k {
            self.heap.push(hit);
        } else if let Some(worst) = self.heap.peek() {
            if hit < *worst {
                self.heap.pop();
                self.heap.push(hit);
            }
        }
    }

    pub fn into_sorted(self) -> Vec<SearchHit> {
        self.heap.into_sorted_vec().into_iter().map(|r| r.0).collect()
    }
}

/// Keys held by an index.
#[derive(Debug, Clone, PartialEq)]
pub enum KeyStore {
    /// Row-major vectors, already prepared for the metric.
    Raw { dim: usize, data: Vec<f32> },
    Pq { codes: PQCodes, codebook: Arc<PQCodebook> },
}

impl KeyStore {
    /// Raw keys, prepared for `metric`.
    pub fn raw(data: &[f32], dim: usize, metric: Metric) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                got: data.len(),
            });
        }
        let mut data = data.to_vec();
        for row in data.chunks_mut(dim) {
            metric.prepare_in_place(row);
        }
        Ok(KeyStore::Raw { dim, data })
    }

    pub fn len(&self) -> usize {
        match self {
            KeyStore::Raw { dim, data } => data.len() / dim,
            KeyStore::Pq { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            KeyStore::Raw { dim, .. } => *dim,
            KeyStore::Pq { codebook, .. } => codebook.dim,
        }
    }

    /// Vectors used for coarse clustering: prepared raw keys or reconstructions.
    fn clustering_view(&self) -> Result<std::borrow::Cow<'_, [f32]>> {
        Ok(match self {
            KeyStore::Raw { data, .. } => std::borrow::Cow::Borrowed(&data[..]),
            KeyStore::Pq { codes, codebook } => std::borrow::Cow::Owned(codebook.decode(codes)?),
        })
    }
}

/// Query-side scorer bound to one key store.
pub(crate) enum Scorer<'a> {
    Raw {
        query: Vec<f32>,
        metric: Metric,
        dim: usize,
        data: &'a [f32],
    },
    Pq {
        table: crate::pq::AdcTable,
        codes: &'a PQCodes,
    },
}

impl<'a> Scorer<'a> {
    pub(crate) fn new(keys: &'a KeyStore, metric: Metric, query: &[f32]) -> Result<Self> {
        if query.len() != keys.dim() {
            return Err(Error::DimMismatch {
                expected: keys.dim(),
                got: query.len(),
            });
        }
        Ok(match keys {
            KeyStore::Raw { dim, data } => Scorer::Raw {
                query: metric.prepare(query),
                metric,
                dim: *dim,
                data,
            },
            KeyStore::Pq { codes, codebook } => Scorer::Pq {
                table: codebook.adc_table(query)?,
                codes,
            },
        })
    }

    #[inline]
    pub(crate) fn distance(&self, i: usize) -> f32 {
        match self {
            Scorer::Raw {
                query,
                metric,
                dim,
                data,
            } => metric.distance(query, &data[i * dim..(i + 1) * dim]),
            Scorer::Pq { table, codes } => table.distance(codes.row(i)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IndexKind {
    Flat,
    Ivf {
        /// `nlist x dim` coarse centroids.
        centroids: Vec<f32>,
        /// `nlist + 1` offsets into `list_ids`.
        list_offsets: Vec<usize>,
        /// Entry ids grouped by list, ascending within each list.
        list_ids: Vec<u32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenIndex {
    pub kind: IndexKind,
    pub metric: Metric,
    pub keys: KeyStore,
}

impl TokenIndex {
    pub fn entry_count(&self) -> usize {
        self.keys.len()
    }

    pub fn dim(&self) -> usize {
        self.keys.dim()
    }

    pub fn nlist(&self) -> usize {
        match &self.kind {
            IndexKind::Flat => 0,
            IndexKind::Ivf { list_offsets, .. } => list_offsets.len() - 1,
        }
    }

    pub fn is_ivf(&self) -> bool {
        matches!(self.kind, IndexKind::Ivf { .. })
    }

    pub fn search(&self, query: &[f32], k: usize, nprobe: usize) -> Result<Vec<SearchHit>> {
        self.search_counted(query, k, nprobe).map(|(h, _)| h)
    }

    /// Top-`k` hits plus the number of distance computations performed.
    pub fn search_counted(&self, query: &[f32], k: usize, nprobe: usize) -> Result<(Vec<SearchHit>, SearchStats)> {
        let scorer = Scorer::new(&self.keys, self.metric, query)?;
        let mut top = TopK::new(k.max(1));
        let mut stats = SearchStats::default();
        match &self.kind {
            IndexKind::Flat => {
                for i in 0..self.keys.len() {
                    top.push(i as u32, scorer.distance(i));
                }
                stats.scanned = self.keys.len() as u64;
            }
            IndexKind::Ivf {
                centroids,
                list_offsets,
                list_ids,
            } => {
                let dim = self.dim();
                let coarse_q = match &self.keys {
                    KeyStore::Raw { .. } => self.metric.prepare(query),
                    KeyStore::Pq { codebook, .. } => codebook.metric.prepare(query),
                };
                let nlist = list_offsets.len() - 1;
                let mut probe = TopK::new(nprobe.clamp(1, nlist));
                for (c, cent) in centroids.chunks_exact(dim).enumerate() {
                    probe.push(c as u32, squared_l2(&coarse_q, cent));
                }
                stats.centroid_ops = nlist as u64;
                for p in probe.into_sorted() {
                    let c = p.entry_id as usize;
                    for &id in &list_ids[list_offsets[c]..list_offsets[c + 1]] {
                        top.push(id, scorer.distance(id as usize));
                        stats.scanned += 1;
                    }
                }
            }
        }
        Ok((top.into_sorted(), stats))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = binio::create(path)?;
        w.write_all(INDEX_MAGIC)?;
        w.write_u8(u8::from(self.is_ivf()))?;
        w.write_u64::<LittleEndian>(self.entry_count() as u64)?;
        w.write_u32::<LittleEndian>(self.dim() as u32)?;
        w.write_u32::<LittleEndian>(self.nlist() as u32)?;
        w.write_u8(self.metric.code())?;
        match &self.keys {
            KeyStore::Raw { .. } => {
                w.write_u8(0)?;
                w.write_u32::<LittleEndian>(0)?;
            }
            KeyStore::Pq { codes, .. } => {
                w.write_u8(1)?;
                w.write_u32::<LittleEndian>(codes.m as u32)?;
            }
        }
        if let IndexKind::Ivf {
            centroids,
            list_offsets,
            list_ids,
        } = &self.kind
        {
            binio::write_f32s(&mut w, centroids)?;
            for &o in list_offsets {
                w.write_u64::<LittleEndian>(o as u64)?;
            }
            binio::write_u32s(&mut w, list_ids)?;
        }
        match &self.keys {
            KeyStore::Raw { data, .. } => binio::write_f32s(&mut w, data)?,
            KeyStore::Pq { codes, .. } => w.write_all(&codes.codes)?,
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an index file; PQ-keyed indexes need the codebook they were built with.
    pub fn load(path: &Path, codebook: Option<Arc<PQCodebook>>) -> Result<Self> {
        let mut r = binio::open(path)?;
        Self::read_from(&mut r, codebook)
    }

    fn read_from<R: Read>(r: &mut R, codebook: Option<Arc<PQCodebook>>) -> Result<Self> {
        binio::read_magic(r, INDEX_MAGIC, "index file")?;
        let t = |e| binio::truncated("index header", e);
        let kind = r.read_u8().map_err(t)?;
        let n = r.read_u64::<LittleEndian>().map_err(t)? as usize;
        let dim = r.read_u32::<LittleEndian>().map_err(t)? as usize;
        let nlist = r.read_u32::<LittleEndian>().map_err(t)? as usize;
        let metric = Metric::from_code(r.read_u8().map_err(t)?)?;
        let key_format = r.read_u8().map_err(t)?;
        let code_size = r.read_u32::<LittleEndian>().map_err(t)? as usize;
        if kind > 1 || (kind == 1) != (nlist > 0) {
            return Err(Error::BadHeader {
                what: "index file",
                detail: format!("kind {kind} with nlist {nlist}"),
            });
        }
        let kind = if nlist > 0 {
            let centroids = binio::read_f32s(r, nlist * dim, "index centroids")?;
            let mut list_offsets = Vec::with_capacity(nlist + 1);
            for _ in 0..=nlist {
                list_offsets.push(r.read_u64::<LittleEndian>().map_err(|e| binio::truncated("index offsets", e))? as usize);
            }
            let list_ids = binio::read_u32s(r, n, "index entry ids")?;
            if list_offsets.last() != Some(&n) {
                return Err(Error::BadHeader {
                    what: "index file",
                    detail: "list offsets do not cover all entries".into(),
                });
            }
            IndexKind::Ivf {
                centroids,
                list_offsets,
                list_ids,
            }
        } else {
            IndexKind::Flat
        };
        let keys = match key_format {
            0 => KeyStore::Raw {
                dim,
                data: binio::read_f32s(r, n * dim, "index keys")?,
            },
            1 => {
                let codebook = codebook.ok_or_else(|| Error::InvalidConfig("quantized index needs its codebook".into()))?;
                if codebook.dim != dim || codebook.m != code_size {
                    return Err(Error::DimMismatch {
                        expected: codebook.m,
                        got: code_size,
                    });
                }
                KeyStore::Pq {
                    codes: PQCodes {
                        m: code_size,
                        codes: binio::read_bytes(r, n * code_size, "index codes")?,
                    },
                    codebook,
                }
            }
            f => {
                return Err(Error::BadHeader {
                    what: "index file",
                    detail: format!("unknown key format {f}"),
                })
            }
        };
        binio::expect_eof(r, "index file")?;
        Ok(TokenIndex { kind, metric, keys })
    }
}

/// Builds a flat or IVF index over `keys` depending on their count.
pub fn build_token_index(keys: KeyStore, metric: Metric, cfg: &IndexConfig) -> Result<TokenIndex> {
    let n = keys.len();
    if n == 0 {
        return Err(Error::InvalidConfig("cannot index an empty key set".into()));
    }
    if n <= cfg.freq_threshold {
        return Ok(TokenIndex {
            kind: IndexKind::Flat,
            metric,
            keys,
        });
    }
    let nlist = ivf_nlist(n);
    let dim = keys.dim();
    let view = keys.clustering_view()?;
    let km = kmeans::train(
        &view,
        dim,
        &KMeansConfig {
            k: nlist,
            iters: cfg.kmeans_iters,
            seed: cfg.seed,
            max_points: cfg.train_cap,
            exec: cfg.exec,
        },
    )?;
    let labels = km.assign(&view, cfg.exec);
    drop(view);
    let mut counts = vec![0usize; nlist];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    let mut list_offsets = vec![0usize; nlist + 1];
    for c in 0..nlist {
        list_offsets[c + 1] = list_offsets[c] + counts[c];
    }
    let mut fill = list_offsets.clone();
    let mut list_ids = vec![0u32; n];
    for (i, &l) in labels.iter().enumerate() {
        list_ids[fill[l as usize]] = i as u32;
        fill[l as usize] += 1;
    }
    Ok(TokenIndex {
        kind: IndexKind::Ivf {
            centroids: km.centroids,
            list_offsets,
            list_ids,
        },
        metric,
        keys,
    })
}

/// Exhaustive reference search: every distance computed, fully sorted.
pub fn brute_force_search(keys: &[f32], dim: usize, query: &[f32], k: usize, metric: Metric) -> Result<Vec<SearchHit>> {
    if query.len() != dim || dim == 0 || !keys.len().is_multiple_of(dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            got: query.len(),
        });
    }
    let q = metric.prepare(query);
    let mut all: Vec<SearchHit> = keys
        .chunks_exact(dim)
        .enumerate()
        .map(|(i, key)| SearchHit {
            entry_id: i as u32,
            distance: metric.distance(&q, &metric.prepare(key)),
        })
        .collect();
    all.sort_by(hit_order);
    all.truncate(k);
    Ok(all)
}

/// Source-key indexes for every cache in a [`CacheSet`].
#[derive(Debug, Clone, Default)]
pub struct IndexSet {
    pub config: Option<IndexConfig>,
    pub indexes: BTreeMap<TokenId, TokenIndex>,
}

impl IndexSet {
    /// Builds one index per token type, in parallel across types.
    pub fn build(caches: &CacheSet, cfg: &IndexConfig) -> Result<Self> {
        let tokens: Vec<TokenId> = caches.caches.keys().copied().collect();
        // Large types parallelize internally; small ones across types.
        let inner = IndexConfig {
            exec: Exec::Sequential,
            ..*cfg
        };
        let built = cfg.exec.map(&tokens, |t| {
            let cache = &caches.caches[t];
            let c = if cache.len() > cfg.freq_threshold { cfg } else { &inner };
            let keys = caches.key_store(&cache.keys, cfg.metric)?;
            build_token_index(keys, cfg.metric, c).map(|i| (*t, i))
        });
        let indexes = built.into_iter().collect::<Result<BTreeMap<_, _>>>()?;
        Ok(IndexSet {
            config: Some(*cfg),
            indexes,
        })
    }

    pub fn get(&self, token: TokenId) -> Option<&TokenIndex> {
        self.indexes.get(&token)
    }

    /// Writes `<token id>.idx` per type plus a JSON manifest into `dir`.
    pub fn save(&self, dir: &Path, config_hash: Option<String>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (t, idx) in &self.indexes {
            idx.save(&dir.join(format!("{}.idx", t.0)))?;
        }
        let manifest = IndexManifest {
            config: self.config,
            tokens: self.indexes.keys().map(|t| t.0).collect(),
            config_hash,
        };
        let path = dir.join(INDEX_MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn read_manifest(dir: &Path) -> Result<IndexManifest> {
        let path = dir.join(INDEX_MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingManifest(dir.to_path_buf()));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads the indexes saved for `caches`, checking that every cache has
    /// an index of matching size.
    pub fn load(dir: &Path, caches: &CacheSet) -> Result<Self> {
        let manifest = Self::read_manifest(dir)?;
        let mut indexes = BTreeMap::new();
        for &t in &manifest.tokens {
            let idx = TokenIndex::load(&dir.join(format!("{t}.idx")), caches.src_codebook.clone())?;
            indexes.insert(TokenId(t), idx);
        }
        let consistent = indexes.len() == caches.caches.len()
            && caches
                .caches
                .iter()
                .all(|(t, c)| indexes.get(t).is_some_and(|i| i.entry_count() == c.len()));
        if !consistent {
            return Err(Error::BadHeader {
                what: "index set",
                detail: "indexes do not match the cache set; rebuild them".into(),
            });
        }
        Ok(IndexSet {
            config: manifest.config,
            indexes,
        })
    }
}

pub const INDEX_MANIFEST_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub config: Option<IndexConfig>,
    pub tokens: Vec<u32>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

impl CacheSet {
    /// Wraps one of this set's key blocks for searching.
    pub fn key_store(&self, block: &KeyBlock, metric: Metric) -> Result<KeyStore> {
        match block {
            KeyBlock::Raw(data) => KeyStore::raw(data, self.dim, metric),
            KeyBlock::Codes(codes) => {
                let codebook = self
                    .src_codebook
                    .clone()
                    .ok_or_else(|| Error::InvalidConfig("quantized cache set without a source codebook".into()))?;
                if codebook.metric != metric {
                    return Err(Error::InvalidConfig(format!(
                        "codebook trained for {} but index metric is {metric}",
                        codebook.metric
                    )));
                }
                Ok(KeyStore::Pq {
                    codes: PQCodes {
                        m: codebook.m,
                        codes: codes.clone(),
                    },
                    codebook,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pq::{train_pq, PqConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian(n: usize, dim: usize, seed: u64) -> Vec<f32> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn nlist_formula() {
        assert_eq!(ivf_nlist(40_000), 800);
        assert_eq!(ivf_nlist(36_000_000), 24_000);
        assert_eq!(ivf_nlist(100_000), 1264);
        assert_eq!(ivf_nlist(10), 1);
    }

    #[test]
    fn flat_below_threshold() {
        let keys = KeyStore::raw(&gaussian(900, 4, 1), 4, Metric::L2).unwrap();
        let idx = build_token_index(keys, Metric::L2, &IndexConfig::default()).unwrap();
        assert!(!idx.is_ivf());
        assert_eq!(idx.nlist(), 0);
    }

    #[test]
    fn three_point_example() {
        let keys = [0.0, 0.0, 3.0, 4.0, 6.0, 8.0];
        let idx = build_token_index(KeyStore::raw(&keys, 2, Metric::L2).unwrap(), Metric::L2, &IndexConfig::default()).unwrap();
        let hits = idx.search(&[0.0, 0.0], 2, 32).unwrap();
        assert_eq!(hits.iter().map(|h| h.entry_id).collect::<Vec<_>>(), vec![0, 1]);
        // Squared L2: Euclidean distances 0 and 5.
        assert_eq!(hits[0].distance, 0.0);
        assert_eq!(hits[1].distance.sqrt(), 5.0);
        let all = idx.search(&[0.0, 0.0], 10, 32).unwrap();
        assert_eq!(all.len(), 3);
        assert!(matches!(idx.search(&[0.0], 1, 1), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn single_key_oracle() {
        let hits = brute_force_search(&[1.0, 2.0], 2, &[0.0, 0.0], 3, Metric::L2).unwrap();
        assert_eq!(hits, vec![SearchHit { entry_id: 0, distance: 5.0 }]);
    }

    #[test]
    fn ties_break_by_entry_id() {
        let keys = [1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0];
        let idx = build_token_index(KeyStore::raw(&keys, 2, Metric::L2).unwrap(), Metric::L2, &IndexConfig::default()).unwrap();
        let hits = idx.search(&[0.0, 0.0], 3, 1).unwrap();
        assert_eq!(hits.iter().map(|h| h.entry_id).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    fn small_ivf(data: &[f32], dim: usize, metric: Metric) -> TokenIndex {
        let cfg = IndexConfig {
            freq_threshold: 100,
            metric,
            ..IndexConfig::default()
        };
        build_token_index(KeyStore::raw(data, dim, metric).unwrap(), metric, &cfg).unwrap()
    }

    #[test]
    fn ivf_lists_partition_entries() {
        let data = gaussian(3000, 8, 2);
        let idx = small_ivf(&data, 8, Metric::L2);
        assert_eq!(idx.nlist(), ivf_nlist(3000));
        let IndexKind::Ivf { list_ids, list_offsets, .. } = &idx.kind else { panic!() };
        let mut ids = list_ids.clone();
        ids.sort_unstable();
        assert_eq!(ids, (0..3000).collect::<Vec<u32>>());
        assert_eq!(*list_offsets.last().unwrap(), 3000);
    }

    #[test]
    fn exhaustive_probe_equals_flat_for_every_metric() {
        let data = gaussian(2000, 8, 3);
        for metric in Metric::ALL {
            let ivf = small_ivf(&data, 8, metric);
            let flat = build_token_index(KeyStore::raw(&data, 8, metric).unwrap(), metric, &IndexConfig::default()).unwrap();
            for q in gaussian(20, 8, 4).chunks(8) {
                assert_eq!(ivf.search(q, 10, ivf.nlist()).unwrap(), flat.search(q, 10, 1).unwrap());
            }
        }
    }

    #[test]
    fn recall_grows_with_nprobe() {
        let data = gaussian(5000, 8, 5);
        let idx = small_ivf(&data, 8, Metric::L2);
        let queries = gaussian(100, 8, 6);
        let mut last = 0.0;
        for nprobe in [1, 4, 16, idx.nlist()] {
            let mut found = 0;
            for q in queries.chunks(8) {
                let truth: Vec<u32> = brute_force_search(&data, 8, q, 10, Metric::L2).unwrap().iter().map(|h| h.entry_id).collect();
                let got: Vec<u32> = idx.search(q, 10, nprobe).unwrap().iter().map(|h| h.entry_id).collect();
                found += truth.iter().filter(|t| got.contains(t)).count();
            }
            let recall = found as f64 / 1000.0;
            assert!(recall >= last, "nprobe {nprobe}: {recall} < {last}");
            last = recall;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn quantized_distances_are_adc_distances() {
        let data = gaussian(500, 8, 7);
        let cb = Arc::new(
            train_pq(&data, 8, &PqConfig { m: 4, n_codewords: 16, metric: Metric::L2, ..PqConfig::default() }).unwrap(),
        );
        let codes = cb.encode(&data).unwrap();
        let idx = build_token_index(
            KeyStore::Pq { codes: codes.clone(), codebook: cb.clone() },
            Metric::L2,
            &IndexConfig::default(),
        )
        .unwrap();
        let q = &gaussian(1, 8, 8)[..];
        let table = cb.adc_table(q).unwrap();
        for h in idx.search(q, 20, 1).unwrap() {
            assert_eq!(h.distance, table.distance(codes.row(h.entry_id as usize)));
        }
    }

    #[test]
    fn index_file_round_trip() {
        let data = gaussian(400, 4, 9);
        let dir = tempfile::tempdir().unwrap();
        let ivf = small_ivf(&data, 4, Metric::Cosine);
        ivf.save(&dir.path().join("a")).unwrap();
        assert_eq!(TokenIndex::load(&dir.path().join("a"), None).unwrap(), ivf);

        let cb = Arc::new(train_pq(&data, 4, &PqConfig { m: 2, n_codewords: 8, metric: Metric::Cosine, ..PqConfig::default() }).unwrap());
        let pq = build_token_index(KeyStore::Pq { codes: cb.encode(&data).unwrap(), codebook: cb.clone() }, Metric::Cosine, &IndexConfig::default()).unwrap();
        pq.save(&dir.path().join("b")).unwrap();
        assert!(TokenIndex::load(&dir.path().join("b"), None).is_err());
        assert_eq!(TokenIndex::load(&dir.path().join("b"), Some(cb)).unwrap(), pq);
    }

    #[test]
    fn index_set_directory_round_trip() {
        use crate::datastore::{build_caches, CacheConfig};
        use crate::toy::{toy_corpus, toy_source_reprs, toy_target_reprs};
        let c = toy_corpus();
        let cs = build_caches(&c, &toy_source_reprs(&c), &toy_target_reprs(&c), &CacheConfig::default()).unwrap();
        let set = IndexSet::build(&cs, &IndexConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(IndexSet::load(dir.path(), &cs), Err(Error::MissingManifest(_))));
        set.save(dir.path(), None).unwrap();
        let back = IndexSet::load(dir.path(), &cs).unwrap();
        assert_eq!(back.indexes, set.indexes);

        let fewer = crate::datastore::CacheSet {
            caches: cs.caches.iter().take(2).map(|(t, c)| (*t, c.clone())).collect(),
            ..cs.clone()
        };
        assert!(IndexSet::load(dir.path(), &fewer).is_err());
    }

    proptest! {
        #[test]
        fn flat_equals_brute_force(
            n in 1usize..60,
            k in 1usize..20,
            seed in 0u64..1000,
            metric_code in 0u8..3,
        ) {
            let metric = Metric::from_code(metric_code).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Coarse grid values force plenty of distance ties.
            let data: Vec<f32> = (0..n * 3).map(|_| rng.random_range(-2..3) as f32).collect();
            let q: Vec<f32> = (0..3).map(|_| rng.random_range(-2..3) as f32).collect();
            let idx = build_token_index(KeyStore::raw(&data, 3, metric).unwrap(), metric, &IndexConfig::default()).unwrap();
            prop_assert_eq!(idx.search(&q, k, 1).unwrap(), brute_force_search(&data, 3, &q, k, metric).unwrap());
        }
    }
}
