// SPDX-License-Identifier: Apache-2.0

//! Seeded synthetic corpora for quality and cost experiments.

use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Zipf;
use serde::{Deserialize, Serialize};

use crate::annindex::KeyStore;
use crate::corpus::{Loc, ParallelCorpus, TokenId};
use crate::error::{Error, Result};
use crate::metric::Metric;
use crate::repr::mix64;
use crate::retrieval::TargetDatastore;

/// Source sentences with reference translations, as text.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub sources: Vec<String>,
    pub references: Vec<String>,
}

impl TestSet {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub train: ParallelCorpus,
    pub test: TestSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisambiguationConfig {
    pub source_types: usize,
    pub sentence_len: usize,
    pub train_sentences: usize,
    pub test_sentences: usize,
    pub seed: u64,
}

impl Default for DisambiguationConfig {
    fn default() -> Self {
        DisambiguationConfig {
            source_types: 20,
            sentence_len: 10,
            train_sentences: 2000,
            test_sentences: 100,
            seed: 7,
        }
    }
}

/// Which of the two translations of `token` follows `left` (`None` at the
/// sentence start).
pub fn disambiguation_choice(token: usize, left: Option<usize>, seed: u64) -> usize {
    let l = left.map_or(u64::MAX, |l| l as u64);
    (mix64(seed ^ mix64(token as u64 ^ mix64(l))) & 1) as usize
}

/// Each source type `s<i>` has two translations `t<i>a` and `t<i>b`; which one
/// appears is fixed by the left neighbor. Alignments are monotone one-to-one.
pub fn disambiguation_task(cfg: &DisambiguationConfig) -> Result<SyntheticTask> {
    if cfg.source_types < 2 || cfg.sentence_len == 0 || cfg.train_sentences == 0 {
        return Err(Error::InvalidConfig("disambiguation task needs >= 2 types, nonempty sentences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sentence = |rng: &mut ChaCha8Rng| {
        let src: Vec<usize> = (0..cfg.sentence_len).map(|_| rng.random_range(0..cfg.source_types)).collect();
        let tgt: Vec<String> = src
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let left = i.checked_sub(1).map(|j| src[j]);
                let which = ["a", "b"][disambiguation_choice(t, left, cfg.seed)];
                format!("t{t}{which}")
            })
            .collect();
        let src: Vec<String> = src.iter().map(|t| format!("s{t}")).collect();
        (src.join(" "), tgt.join(" "))
    };
    let (mut srcs, mut tgts) = (Vec::new(), Vec::new());
    for _ in 0..cfg.train_sentences {
        let (s, t) = sentence(&mut rng);
        srcs.push(s);
        tgts.push(t);
    }
    let mut test = TestSet {
        sources: Vec::new(),
        references: Vec::new(),
    };
    for _ in 0..cfg.test_sentences {
        let (s, t) = sentence(&mut rng);
        test.sources.push(s);
        test.references.push(t);
    }
    let align: Vec<_> = (0..cfg.train_sentences)
        .map(|_| (0..cfg.sentence_len as u32).map(|i| (i, i)).collect())
        .collect();
    let train = ParallelCorpus::from_lines(&srcs, &tgts)?.with_alignments(align)?;
    Ok(SyntheticTask { train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZipfConfig {
    pub vocab: usize,
    pub exponent: f64,
    pub sentence_len: usize,
    pub train_sentences: usize,
    pub test_sentences: usize,
    /// Probability that a target token deviates from its source's usual translation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ZipfConfig {
    fn default() -> Self {
        ZipfConfig {
            vocab: 16_000,
            exponent: 0.7,
            sentence_len: 20,
            train_sentences: 50_000,
            test_sentences: 8,
            noise: 0.1,
            seed: 11,
        }
    }
}

/// Zipf-distributed token streams with a mostly one-to-one lexical mapping
/// and monotone alignments; the target side has exactly
/// `train_sentences * sentence_len` tokens.
pub fn zipf_task(cfg: &ZipfConfig) -> Result<SyntheticTask> {
    if cfg.vocab < 2 || cfg.sentence_len == 0 || cfg.train_sentences == 0 || !(0.0..=1.0).contains(&cfg.noise) {
        return Err(Error::InvalidConfig("invalid zipf corpus config".into()));
    }
    let zipf = Zipf::new(cfg.vocab as f64, cfg.exponent).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sentence = |rng: &mut ChaCha8Rng| {
        let mut src = String::new();
        let mut tgt = String::new();
        for i in 0..cfg.sentence_len {
            let t = zipf.sample(rng) as usize - 1;
            let y = if rng.random_bool(cfg.noise) { rng.random_range(0..cfg.vocab) } else { t };
            if i > 0 {
                src.push(' ');
                tgt.push(' ');
            }
            src.push_str(&format!("w{t}"));
            tgt.push_str(&format!("v{y}"));
        }
        (src, tgt)
    };
    let (mut srcs, mut tgts) = (Vec::with_capacity(cfg.train_sentences), Vec::with_capacity(cfg.train_sentences));
    for _ in 0..cfg.train_sentences {
        let (s, t) = sentence(&mut rng);
        srcs.push(s);
        tgts.push(t);
    }
    let mut test = TestSet {
        sources: Vec::new(),
        references: Vec::new(),
    };
    for _ in 0..cfg.test_sentences {
        let (s, t) = sentence(&mut rng);
        test.sources.push(s);
        test.references.push(t);
    }
    let diag: Vec<(u32, u32)> = (0..cfg.sentence_len as u32).map(|i| (i, i)).collect();
    let train = ParallelCorpus::from_lines(&srcs, &tgts)?.with_alignments(vec![diag; cfg.train_sentences])?;
    Ok(SyntheticTask { train, test })
}

/// One decoding step with a hand-built retrieval set.
#[derive(Debug, Clone)]
pub struct KSweepStep {
    pub query: Vec<f32>,
    pub datastore: TargetDatastore,
    pub answer: TokenId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KSweepConfig {
    pub steps: usize,
    pub dim: usize,
    /// Far entries per step, all carrying the decoy token.
    pub noise_entries: usize,
    pub seed: u64,
}

impl Default for KSweepConfig {
    fn default() -> Self {
        KSweepConfig {
            steps: 200,
            dim: 8,
            noise_entries: 60,
            seed: 3,
        }
    }
}

/// Steps with exactly four relevant neighbors (three with the answer, one
/// decoy) near the query and many far entries carrying the decoy.
pub fn k_sweep_steps(cfg: &KSweepConfig) -> Vec<KSweepStep> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let answer = TokenId(1);
    let decoy = TokenId(2);
    let point_at = |rng: &mut ChaCha8Rng, q: &[f32], radius: f32| -> Vec<f32> {
        let mut dir: Vec<f32> = (0..q.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        crate::metric::normalize(&mut dir);
        q.iter().zip(&dir).map(|(a, d)| a + radius * d).collect()
    };
    (0..cfg.steps)
        .map(|_| {
            let query: Vec<f32> = (0..cfg.dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let mut keys = Vec::new();
            let mut tokens = Vec::new();
            for j in 0..4 {
                let r = rng.random_range(0.5f32..1.0);
                keys.extend(point_at(&mut rng, &query, r));
                tokens.push(if j == 3 { decoy } else { answer });
            }
            for _ in 0..cfg.noise_entries {
                let r = rng.random_range(1.2f32..1.5);
                keys.extend(point_at(&mut rng, &query, r));
                tokens.push(decoy);
            }
            KSweepStep {
                query,
                datastore: TargetDatastore {
                    metric: Metric::L2,
                    locs: (0..tokens.len()).map(|i| Loc::new(0, i)).collect(),
                    tokens,
                    keys: KeyStore::raw(&keys, cfg.dim, Metric::L2).expect("consistent dims"),
                },
                answer,
            }
        })
        .collect()
}
