// SPDX-License-Identifier: Apache-2.0

//! Product quantization.
//!
//! A `D`-dim vector is split into `M` contiguous subvectors of `D / M` dims,
//! each replaced by the index of its nearest codeword in a per-subspace
//! codebook. With at most 256 codewords a code is exactly `M` bytes.
//!
//! Distances between a full-precision query and a code use a per-query
//! lookup table ([`AdcTable`]); they equal the metric distance between the
//! query and the code's reconstruction, because squared L2 and dot products
//! both decompose over subspaces. Cosine codebooks are trained on and encode
//! normalized vectors, and their distance is half the squared L2 between the
//! normalized query and the reconstruction (`1 - cos` for unit vectors).

use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::binio;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::kmeans::{self, KMeansConfig};
use crate::metric::{dot, squared_l2, Metric};

pub const CODEBOOK_MAGIC: &[u8; 8] = b"FKNNPQCB";
pub const CODES_MAGIC: &[u8; 8] = b"FKNNPQCD";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PqConfig {
    pub m: usize,
    pub n_codewords: usize,
    pub iters: usize,
    pub seed: u64,
    /// At most this many vectors are used to train each codebook.
    pub max_train: usize,
    pub metric: Metric,
    pub exec: Exec,
}

impl Default for PqConfig {
    fn default() -> Self {
        PqConfig {
            m: 128,
            n_codewords: 256,
            iters: 25,
            seed: 0,
            max_train: 5_000_000,
            metric: Metric::Cosine,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PQCodebook {
    pub dim: usize,
    pub m: usize,
    pub n_codewords: usize,
    pub metric: Metric,
    /// `m x n_codewords x (dim / m)`, row-major.
    codewords: Vec<f32>,
}

/// Row-major `count x m` code bytes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PQCodes {
    pub m: usize,
    pub codes: Vec<u8>,
}

impl PQCodes {
    pub fn len(&self) -> usize {
        self.codes.len().checked_div(self.m).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.codes[i * self.m..(i + 1) * self.m]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = binio::create(path)?;
        w.write_all(CODES_MAGIC)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u32::<LittleEndian>(self.m as u32)?;
        w.write_all(&self.codes)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = binio::open(path)?;
        binio::read_magic(&mut r, CODES_MAGIC, "pq codes")?;
        let t = |e| binio::truncated("pq codes header", e);
        let count = r.read_u64::<LittleEndian>().map_err(t)? as usize;
        let m = r.read_u32::<LittleEndian>().map_err(t)? as usize;
        let codes = binio::read_bytes(&mut r, count * m, "pq codes payload")?;
        binio::expect_eof(&mut r, "pq codes")?;
        Ok(PQCodes { m, codes })
    }
}

/// Trains one k-means codebook per subspace.
pub fn train_pq(vectors: &[f32], dim: usize, cfg: &PqConfig) -> Result<PQCodebook> {
    train_pq_traced(vectors, dim, cfg).map(|(cb, _)| cb)
}

/// Like [`train_pq`], also returning each subspace's k-means objective trace.
pub fn train_pq_traced(vectors: &[f32], dim: usize, cfg: &PqConfig) -> Result<(PQCodebook, Vec<Vec<f64>>)> {
    if cfg.m == 0 || !dim.is_multiple_of(cfg.m) {
        return Err(Error::InvalidConfig(format!(
            "dim {dim} is not divisible by M = {}",
            cfg.m
        )));
    }
    if cfg.n_codewords == 0 || cfg.n_codewords > 256 {
        return Err(Error::InvalidConfig(format!(
            "n_codewords must be in 1..=256, got {}",
            cfg.n_codewords
        )));
    }
    if vectors.is_empty() || !vectors.len().is_multiple_of(dim) {
        return Err(Error::InvalidConfig("need at least one training vector of the right dim".into()));
    }
    let n = vectors.len() / dim;
    let dsub = dim / cfg.m;

    let mut prepared = vectors.to_vec();
    for row in prepared.chunks_mut(dim) {
        cfg.metric.prepare_in_place(row);
    }

    let results = cfg.exec.map_range(cfg.m, |sub| {
        let mut sv = Vec::with_capacity(n * dsub);
        for row in prepared.chunks(dim) {
            sv.extend_from_slice(&row[sub * dsub..(sub + 1) * dsub]);
        }
        let kcfg = KMeansConfig {
            k: cfg.n_codewords,
            iters: cfg.iters,
            seed: cfg.seed.wrapping_add(sub as u64),
            max_points: cfg.max_train,
            exec: cfg.exec,
        };
        kmeans::train(&sv, dsub, &kcfg)
    });

    let mut codewords = Vec::with_capacity(cfg.m * cfg.n_codewords * dsub);
    let mut traces = Vec::with_capacity(cfg.m);
    for r in results {
        let km = r?;
        codewords.extend_from_slice(&km.centroids);
        traces.push(km.trace);
    }
    Ok((
        PQCodebook {
            dim,
            m: cfg.m,
            n_codewords: cfg.n_codewords,
            metric: cfg.metric,
            codewords,
        },
        traces,
    ))
}

impl PQCodebook {
    pub fn from_codewords(dim: usize, m: usize, n_codewords: usize, metric: Metric, codewords: Vec<f32>) -> Result<Self> {
        if m == 0 || !dim.is_multiple_of(m) || n_codewords == 0 || n_codewords > 256 {
            return Err(Error::InvalidConfig(format!(
                "bad codebook shape D={dim} M={m} n={n_codewords}"
            )));
        }
        if codewords.len() != dim * n_codewords {
            return Err(Error::InvalidConfig("codeword count does not match shape".into()));
        }
        if codewords.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig("non-finite codeword".into()));
        }
        Ok(PQCodebook {
            dim,
            m,
            n_codewords,
            metric,
            codewords,
        })
    }

    pub fn dsub(&self) -> usize {
        self.dim / self.m
    }

    /// Bytes per encoded vector.
    pub fn code_size(&self) -> usize {
        self.m
    }

    pub fn codeword(&self, sub: usize, j: usize) -> &[f32] {
        let d = self.dsub();
        let start = (sub * self.n_codewords + j) * d;
        &self.codewords[start..start + d]
    }

    fn subspace(&self, sub: usize) -> &[f32] {
        let len = self.n_codewords * self.dsub();
        &self.codewords[sub * len..(sub + 1) * len]
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if !len.is_multiple_of(self.dim) {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: len,
            });
        }
        Ok(())
    }

    pub fn encode_one(&self, v: &[f32], out: &mut [u8]) {
        let d = self.dsub();
        let prepared;
        let v = if self.metric == Metric::Cosine {
            prepared = self.metric.prepare(v);
            &prepared[..]
        } else {
            v
        };
        for (sub, o) in out.iter_mut().enumerate() {
            let (j, _) = kmeans::nearest(self.subspace(sub), d, &v[sub * d..(sub + 1) * d]);
            *o = j as u8;
        }
    }

    /// Encodes row-major vectors; ties go to the lowest codeword index.
    pub fn encode(&self, vectors: &[f32]) -> Result<PQCodes> {
        self.encode_with(vectors, Exec::default())
    }

    pub fn encode_with(&self, vectors: &[f32], exec: Exec) -> Result<PQCodes> {
        self.check_dim(vectors.len())?;
        let mut codes = vec![0u8; vectors.len() / self.dim * self.m];
        const ROWS: usize = 256;
        exec.for_each_chunk_mut(&mut codes, ROWS * self.m, |ci, chunk| {
            for (j, out) in chunk.chunks_mut(self.m).enumerate() {
                let i = ci * ROWS + j;
                self.encode_one(&vectors[i * self.dim..(i + 1) * self.dim], out);
            }
        });
        Ok(PQCodes { m: self.m, codes })
    }

    pub fn decode_one(&self, code: &[u8], out: &mut [f32]) {
        let d = self.dsub();
        for (sub, &c) in code.iter().enumerate() {
            out[sub * d..(sub + 1) * d].copy_from_slice(self.codeword(sub, c as usize));
        }
    }

    /// Concatenates the selected codewords of every code.
    pub fn decode(&self, codes: &PQCodes) -> Result<Vec<f32>> {
        if codes.m != self.m {
            return Err(Error::DimMismatch {
                expected: self.m,
                got: codes.m,
            });
        }
        let mut out = vec![0f32; codes.len() * self.dim];
        for (i, row) in out.chunks_mut(self.dim).enumerate() {
            self.decode_one(codes.row(i), row);
        }
        Ok(out)
    }

    /// Per-query lookup table for asymmetric distances.
    pub fn adc_table(&self, query: &[f32]) -> Result<AdcTable> {
        if query.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let q = self.metric.prepare(query);
        let d = self.dsub();
        let mut table = Vec::with_capacity(self.m * self.n_codewords);
        for sub in 0..self.m {
            let qs = &q[sub * d..(sub + 1) * d];
            for c in self.subspace(sub).chunks_exact(d) {
                table.push(match self.metric {
                    Metric::L2 => squared_l2(qs, c),
                    Metric::Cosine => 0.5 * squared_l2(qs, c),
                    Metric::Ip => -dot(qs, c),
                });
            }
        }
        Ok(AdcTable {
            m: self.m,
            n_codewords: self.n_codewords,
            table,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = binio::create(path)?;
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u32::<LittleEndian>(self.m as u32)?;
        w.write_u32::<LittleEndian>(self.n_codewords as u32)?;
        w.write_u8(self.metric.code())?;
        binio::write_f32s(&mut w, &self.codewords)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = binio::open(path)?;
        binio::read_magic(&mut r, CODEBOOK_MAGIC, "pq codebook")?;
        let t = |e| binio::truncated("pq codebook header", e);
        let dim = r.read_u32::<LittleEndian>().map_err(t)? as usize;
        let m = r.read_u32::<LittleEndian>().map_err(t)? as usize;
        let n = r.read_u32::<LittleEndian>().map_err(t)? as usize;
        let metric = Metric::from_code(r.read_u8().map_err(t)?)?;
        let codewords = binio::read_f32s(&mut r, dim * n, "pq codewords")?;
        binio::expect_eof(&mut r, "pq codebook")?;
        Self::from_codewords(dim, m, n, metric, codewords)
    }
}

/// `m x n_codewords` table of per-subspace partial distances for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct AdcTable {
    m: usize,
    n_codewords: usize,
    table: Vec<f32>,
}

impl AdcTable {
    #[inline]
    pub fn distance(&self, code: &[u8]) -> f32 {
        debug_assert_eq!(code.len(), self.m);
        let mut s = 0.0f32;
        for (sub, &c) in code.iter().enumerate() {
            s += self.table[sub * self.n_codewords + c as usize];
        }
        s
    }
}
