// SPDX-License-Identifier: Apache-2.0

//! Artifacts shared between stages: the pipeline record kept in a cache
//! directory, loaders that name the missing stage, and config hashing.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fknn::annindex::IndexSet;
use fknn::corpus::{load_alignments, load_parallel_corpus, ParallelCorpus, Side, TokenId};
use fknn::datastore::{index_dir, CacheManifest, CacheSet, MANIFEST_FILE};
use fknn::repr::{
    load_representations, load_representations_for, synthetic_embed, LexicalConfig, LexicalModel, ReprMatrix,
    SyntheticDecoder, SyntheticEmbedder,
};
use fknn::Exec;

pub const PIPELINE_FILE: &str = "pipeline.json";
pub const CORPUS_SRC: &str = "corpus.src";
pub const CORPUS_TGT: &str = "corpus.tgt";
pub const CORPUS_ALIGN: &str = "corpus.align";

/// Where training representations came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ReprSpec {
    Files { src: PathBuf, tgt: PathBuf },
    Synthetic { dim: usize, window: usize, seed: u64 },
}

/// Settings of the synthetic decoder used as the base model.
pub const DEFAULT_WINDOW: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub reprs: ReprSpec,
    /// Hash of the newest stage written into the cache directory.
    pub cache_hash: String,
}

impl Pipeline {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let p = dir.join(PIPELINE_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", p.display()))
    }

    /// Decoder window and seed: the synthetic settings if any, else defaults.
    pub fn decoder_settings(&self) -> (usize, u64) {
        match self.reprs {
            ReprSpec::Synthetic { window, seed, .. } => (window, seed),
            ReprSpec::Files { .. } => (DEFAULT_WINDOW, 0),
        }
    }
}

/// Hex SHA-256 over length-prefixed parts.
pub fn hash_parts<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

/// A loaded cache directory.
pub struct Cache {
    pub dir: PathBuf,
    pub set: CacheSet,
    pub manifest: CacheManifest,
    pub pipeline: Pipeline,
    pub corpus: ParallelCorpus,
}

pub fn require_cache(dir: &Path) -> Result<()> {
    if !dir.join(MANIFEST_FILE).exists() || !dir.join(PIPELINE_FILE).exists() {
        bail!(
            "no cache in {}; run `fknn build-cache --out {}` first",
            dir.display(),
            dir.display()
        );
    }
    Ok(())
}

pub fn read_pipeline(dir: &Path) -> Result<Pipeline> {
    require_cache(dir)?;
    let p = dir.join(PIPELINE_FILE);
    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_corpus_files(src: &Path, tgt: &Path, align: &Path) -> Result<ParallelCorpus> {
    let c = load_parallel_corpus(src, tgt).with_context(|| format!("loading {} / {}", src.display(), tgt.display()))?;
    load_alignments(align, c).with_context(|| format!("loading alignments {}", align.display()))
}

impl Cache {
    pub fn load(dir: &Path) -> Result<Cache> {
        let pipeline = read_pipeline(dir)?;
        let set = CacheSet::load(dir).with_context(|| format!("loading cache {}", dir.display()))?;
        let manifest = CacheSet::read_manifest(dir)?;
        let corpus = load_corpus_files(&dir.join(CORPUS_SRC), &dir.join(CORPUS_TGT), &dir.join(CORPUS_ALIGN))?;
        Ok(Cache {
            dir: dir.to_path_buf(),
            set,
            manifest,
            pipeline,
            corpus,
        })
    }

    /// Loads the indexes, insisting they were built from this cache.
    pub fn indexes(&self) -> Result<IndexSet> {
        let dir = index_dir(&self.dir);
        let rerun = format!("run `fknn build-index --cache {}`", self.dir.display());
        let manifest = match IndexSet::read_manifest(&dir) {
            Ok(m) => m,
            Err(fknn::Error::MissingManifest(_)) => bail!("no index for cache {}; {rerun} first", self.dir.display()),
            Err(e) => return Err(e.into()),
        };
        let prefix = index_hash_prefix(&self.pipeline.cache_hash);
        if !manifest.config_hash.as_deref().is_some_and(|h| h.starts_with(&prefix)) {
            bail!("index in {} is stale (the cache changed since it was built); {rerun} again", dir.display());
        }
        IndexSet::load(&dir, &self.set).with_context(|| format!("loading indexes from {}", dir.display()))
    }

    /// Lexical base model whose hidden states live in the target key space.
    pub fn base_model(&self, lexical: LexicalConfig) -> Result<LexicalModel> {
        let (window, seed) = self.pipeline.decoder_settings();
        let dec = SyntheticDecoder::for_corpus(&self.corpus, self.manifest.tgt_dim, window, seed)?;
        Ok(LexicalModel::from_corpus(&self.corpus, dec, lexical)?)
    }

    /// Training representations for both sides.
    pub fn training_reprs(&self, exec: Exec) -> Result<(ReprMatrix, ReprMatrix)> {
        Ok(match &self.pipeline.reprs {
            ReprSpec::Files { src, tgt } => (
                load_representations(src, &self.corpus, Side::Source)?,
                load_representations(tgt, &self.corpus, Side::Target)?,
            ),
            ReprSpec::Synthetic { dim, window, seed } => (
                synthetic_embed(&self.corpus, Side::Source, *dim, *window, *seed, exec)?,
                synthetic_embed(&self.corpus, Side::Target, *dim, *window, *seed, exec)?,
            ),
        })
    }

    /// Query vectors for each input sentence, from a file or the synthetic
    /// embedder the cache was built with.
    pub fn source_reprs(&self, sentences: &[Vec<TokenId>], input_repr: Option<&Path>) -> Result<Vec<Vec<f32>>> {
        if let Some(path) = input_repr {
            let lengths: Vec<usize> = sentences.iter().map(Vec::len).collect();
            let m = load_representations_for(path, Side::Source, &lengths)
                .with_context(|| format!("loading input representations {}", path.display()))?;
            if m.dim() != self.set.dim {
                bail!("{} has dim {}, the cache has dim {}", path.display(), m.dim(), self.set.dim);
            }
            return Ok((0..sentences.len()).map(|s| m.sentence(s).to_vec()).collect());
        }
        match self.pipeline.reprs {
            ReprSpec::Synthetic { dim, window, seed } => {
                let e = SyntheticEmbedder::new(dim, window, seed, self.corpus.vocab_src.len())?;
                Ok(sentences.iter().map(|s| e.embed_sentence(s)).collect())
            }
            ReprSpec::Files { .. } => bail!(
                "the cache was built from representation files; pass --input-repr with the input's source representations"
            ),
        }
    }
}

/// The index hash embeds the cache hash it was built from.
pub fn index_hash_prefix(cache_hash: &str) -> String {
    format!("{cache_hash}:")
}

/// Reads non-empty lines of a text file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}
