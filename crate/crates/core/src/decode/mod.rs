// SPDX-License-Identifier: Apache-2.0

//! kNN-augmented beam search.
//!
//! At each step the base model's distribution is interpolated with a kNN
//! distribution built from the `k` nearest target keys of a datastore:
//! the per-sentence datastore in fast mode, or every target position of the
//! training corpus in vanilla mode. Base mode skips retrieval entirely.

mod dist;
mod knn;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use dist::{interpolate, SparseDistribution};
pub use knn::{knn_distribution, knn_from_hits, vanilla_global_search};

use crate::annindex::IndexSet;
use crate::corpus::TokenId;
use crate::datastore::CacheSet;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::repr::{BaseModel, SyntheticEmbedder};
use crate::retrieval::{RetrievalConfig, RetrievalStats, Retriever, TargetDatastore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Base,
    #[default]
    Fast,
    Vanilla,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Base => "base",
            DecodeMode::Fast => "fast",
            DecodeMode::Vanilla => "vanilla",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(DecodeMode::Base),
            "fast" => Ok(DecodeMode::Fast),
            "vanilla" => Ok(DecodeMode::Vanilla),
            _ => Err(Error::InvalidConfig(format!(
                "unknown decode mode {s:?} (expected base, fast or vanilla)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub lambda: f64,
    pub temperature: f64,
    /// Neighbors used for the kNN distribution.
    pub k: usize,
    pub beam: usize,
    /// Output length cap: `max_len_ratio * source_len + max_len_extra`.
    pub max_len_ratio: f64,
    pub max_len_extra: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Fast,
            lambda: 0.5,
            temperature: 1.0,
            k: 512,
            beam: 1,
            max_len_ratio: 2.0,
            max_len_extra: 10,
            exec: Exec::default(),
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.k == 0 || self.beam == 0 {
            return Err(Error::InvalidConfig("k and beam must be at least 1".into()));
        }
        Ok(())
    }

    pub fn max_len(&self, source_len: usize) -> usize {
        (self.max_len_ratio * source_len as f64).floor() as usize + self.max_len_extra
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Output tokens, without the end-of-sentence token.
    pub tokens: Vec<TokenId>,
    /// Sum of log-probabilities, including the end token when finished.
    pub log_prob: f64,
    pub finished: bool,
    /// Keys scored at each step along this hypothesis' path.
    pub per_step_ops: Vec<u64>,
}

impl Hypothesis {
    /// Log-probability per scored step.
    pub fn normalized_score(&self) -> f64 {
        let steps = self.tokens.len() + usize::from(self.finished);
        self.log_prob / steps.max(1) as f64
    }
}

/// Work counters for one decoded sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DecodeStats {
    pub steps: u64,
    pub model_calls: u64,
    pub knn_searches: u64,
    /// Target keys scored across all kNN searches.
    pub knn_scanned: u64,
    /// Largest number of keys scored by a single search.
    pub max_scanned_per_search: u64,
}

/// One expanded step for a hypothesis.
struct Expansion {
    dist: SparseDistribution,
    scanned: Option<u64>,
}

fn step_distribution<M: BaseModel + ?Sized>(
    model: &M,
    source: &[TokenId],
    prefix: &[TokenId],
    datastore: Option<&TargetDatastore>,
    cfg: &DecodeConfig,
    inner: Exec,
) -> Result<Expansion> {
    let step = model.step(source, prefix)?;
    let Some(ds) = datastore.filter(|d| !d.is_empty()) else {
        // No datastore: the interpolation weight is effectively zero.
        return Ok(Expansion {
            dist: step.p_mt,
            scanned: None,
        });
    };
    let (hits, scanned) = ds.search(&step.hidden, cfg.k, inner)?;
    let p_knn = knn_from_hits(&hits, cfg.temperature)?;
    Ok(Expansion {
        dist: interpolate(&step.p_mt, &p_knn, cfg.lambda)?,
        scanned: Some(scanned),
    })
}

/// Best normalized score first; ties go to the earlier completion.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.normalized_score()
        .total_cmp(&a.normalized_score())
        .then_with(|| b.finished.cmp(&a.finished))
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over `model`, optionally interpolated with `datastore`.
///
/// Returns finished hypotheses (or the survivors at the length cap), best
/// first by length-normalized log-probability.
pub fn beam_decode<M: BaseModel + ?Sized>(
    model: &M,
    source: &[TokenId],
    datastore: Option<&TargetDatastore>,
    cfg: &DecodeConfig,
) -> Result<(Vec<Hypothesis>, DecodeStats)> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::EmptySource);
    }
    let datastore = if cfg.mode == DecodeMode::Base { None } else { datastore };
    let max_len = cfg.max_len(source.len()).max(1);
    let mut stats = DecodeStats::default();
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
        per_step_ops: Vec::new(),
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    // Parallelize across beams when there are several; otherwise inside the search.
    let (outer, inner) = if cfg.beam > 1 { (cfg.exec, Exec::Sequential) } else { (Exec::Sequential, cfg.exec) };

    for t in 0..max_len {
        stats.steps += 1;
        let expansions = outer.map(&live, |h| step_distribution(model, source, &h.tokens, datastore, cfg, inner));
        let mut cands: Vec<Hypothesis> = Vec::new();
        for (h, e) in live.iter().zip(expansions) {
            let e = e?;
            stats.model_calls += 1;
            if let Some(s) = e.scanned {
                stats.knn_searches += 1;
                stats.knn_scanned += s;
                stats.max_scanned_per_search = stats.max_scanned_per_search.max(s);
            }
            for (tok, p) in e.dist.top(cfg.beam) {
                let mut tokens = h.tokens.clone();
                let finished = tok == TokenId::EOS;
                if !finished {
                    tokens.push(tok);
                }
                let mut per_step_ops = h.per_step_ops.clone();
                per_step_ops.push(e.scanned.unwrap_or(0));
                cands.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + p.ln(),
                    finished,
                    per_step_ops,
                });
            }
        }
        cands.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens)));
        live.clear();
        // Finished candidates among the top `beam` leave the beam.
        for c in cands.into_iter().take(cfg.beam) {
            if c.finished {
                done.push(c);
            } else {
                live.push(c);
            }
        }
        if done.len() >= cfg.beam || live.is_empty() || t + 1 == max_len {
            break;
        }
    }
    if done.len() < cfg.beam {
        done.extend(live);
    }
    done.sort_by(rank);
    done.truncate(cfg.beam);
    Ok((done, stats))
}

/// Produces source-side query vectors for a test sentence.
pub trait SourceEncoder: Sync {
    fn encode(&self, source: &[TokenId]) -> Result<Vec<f32>>;
}

impl SourceEncoder for SyntheticEmbedder {
    fn encode(&self, source: &[TokenId]) -> Result<Vec<f32>> {
        Ok(self.embed_sentence(source))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    pub tokens: Vec<TokenId>,
    pub hypotheses: Vec<Hypothesis>,
    pub decode: DecodeStats,
    pub retrieval: Option<RetrievalStats>,
    pub retrieval_secs: f64,
    pub decode_secs: f64,
}

/// Everything needed to translate in any of the three modes.
pub struct Translator<'a, M: BaseModel + ?Sized, E: SourceEncoder + ?Sized> {
    pub model: &'a M,
    pub encoder: &'a E,
    pub caches: Option<&'a CacheSet>,
    pub indexes: Option<&'a IndexSet>,
    /// All target positions, for vanilla mode.
    pub global: Option<&'a TargetDatastore>,
    pub decode: DecodeConfig,
    pub retrieval: RetrievalConfig,
}

impl<M: BaseModel + ?Sized, E: SourceEncoder + ?Sized> Translator<'_, M, E> {
    /// Per-sentence target datastore and its statistics.
    pub fn fast_datastore(&self, source: &[TokenId]) -> Result<(TargetDatastore, RetrievalStats)> {
        let (Some(caches), Some(indexes)) = (self.caches, self.indexes) else {
            return Err(Error::InvalidConfig("fast mode needs caches and indexes".into()));
        };
        let reprs = self.encoder.encode(source)?;
        Retriever {
            caches,
            indexes,
            config: self.retrieval,
        }
        .target_datastore(source, &reprs)
    }

    pub fn translate(&self, source: &[TokenId]) -> Result<Translation> {
        if source.is_empty() {
            return Err(Error::EmptySource);
        }
        let t0 = Instant::now();
        let (local, retrieval) = match self.decode.mode {
            DecodeMode::Fast => {
                let (ds, st) = self.fast_datastore(source)?;
                (Some(ds), Some(st))
            }
            _ => (None, None),
        };
        let retrieval_secs = t0.elapsed().as_secs_f64();
        let datastore = match self.decode.mode {
            DecodeMode::Base => None,
            DecodeMode::Fast => local.as_ref(),
            DecodeMode::Vanilla => Some(
                self.global
                    .ok_or_else(|| Error::InvalidConfig("vanilla mode needs the global datastore".into()))?,
            ),
        };
        let t1 = Instant::now();
        let (hypotheses, decode) = beam_decode(self.model, source, datastore, &self.decode)?;
        Ok(Translation {
            tokens: hypotheses.first().map(|h| h.tokens.clone()).unwrap_or_default(),
            hypotheses,
            decode,
            retrieval,
            retrieval_secs,
            decode_secs: t1.elapsed().as_secs_f64(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annindex::KeyStore;
    use crate::corpus::Loc;
    use crate::metric::Metric;
    use crate::repr::BaseModelStep;

    /// Fixed distribution per prefix length; hidden state is a one-hot of the
    /// prefix length.
    struct Scripted(Vec<Vec<(u32, f64)>>);

    impl BaseModel for Scripted {
        fn step(&self, _: &[TokenId], prefix: &[TokenId]) -> Result<BaseModelStep> {
            let i = prefix.len().min(self.0.len() - 1);
            let mut hidden = vec![0.0; 4];
            hidden[i.min(3)] = 1.0;
            Ok(BaseModelStep {
                p_mt: SparseDistribution::normalized(self.0[i].iter().map(|&(t, p)| (TokenId(t), p))),
                hidden,
            })
        }

        fn hidden_dim(&self) -> usize {
            4
        }
    }

    const EOS: u32 = TokenId::EOS.0;

    fn cfg(mode: DecodeMode, beam: usize) -> DecodeConfig {
        DecodeConfig {
            mode,
            beam,
            lambda: 0.5,
            temperature: 1.0,
            k: 4,
            ..DecodeConfig::default()
        }
    }

    #[test]
    fn greedy_follows_argmax() {
        let m = Scripted(vec![vec![(1, 0.6), (2, 0.4)], vec![(3, 0.9), (EOS, 0.1)], vec![(EOS, 1.0)]]);
        let (h, stats) = beam_decode(&m, &[TokenId(0)], None, &cfg(DecodeMode::Base, 1)).unwrap();
        assert_eq!(h[0].tokens, vec![TokenId(1), TokenId(3)]);
        assert!(h[0].finished);
        assert_eq!(stats.steps, 3);
        assert_eq!(stats.knn_searches, 0);
    }

    #[test]
    fn beam_finds_better_sequence_than_greedy() {
        // Greedy takes 1 (0.5) then 0.3 max; beam finds 2 (0.4) then 1.0.
        struct Branch;
        impl BaseModel for Branch {
            fn step(&self, _: &[TokenId], prefix: &[TokenId]) -> Result<BaseModelStep> {
                let p = match prefix {
                    [] => vec![(1, 0.5), (2, 0.4), (3, 0.1)],
                    [TokenId(1)] => vec![(4, 0.3), (5, 0.3), (6, 0.4)],
                    [TokenId(2)] => vec![(7, 1.0)],
                    _ => vec![(EOS, 1.0)],
                };
                Ok(BaseModelStep {
                    p_mt: SparseDistribution::normalized(p.into_iter().map(|(t, v)| (TokenId(t), v))),
                    hidden: vec![0.0; 4],
                })
            }
            fn hidden_dim(&self) -> usize {
                4
            }
        }
        let (g, _) = beam_decode(&Branch, &[TokenId(0)], None, &cfg(DecodeMode::Base, 1)).unwrap();
        assert_eq!(g[0].tokens, vec![TokenId(1), TokenId(6)]);
        let (b, _) = beam_decode(&Branch, &[TokenId(0)], None, &cfg(DecodeMode::Base, 3)).unwrap();
        assert_eq!(b[0].tokens, vec![TokenId(2), TokenId(7)]);
        assert!(b.windows(2).all(|w| w[0].normalized_score() >= w[1].normalized_score()));
    }

    fn one_hot_store(tokens: &[u32]) -> TargetDatastore {
        let mut data = Vec::new();
        for i in 0..tokens.len() {
            let mut v = vec![0.0f32; 4];
            v[i % 4] = 1.0;
            data.extend(v);
        }
        TargetDatastore {
            metric: Metric::L2,
            locs: (0..tokens.len()).map(|i| Loc::new(0, i)).collect(),
            tokens: tokens.iter().map(|&t| TokenId(t)).collect(),
            keys: KeyStore::raw(&data, 4, Metric::L2).unwrap(),
        }
    }

    #[test]
    fn knn_shifts_choice_and_lambda_zero_is_base() {
        let m = Scripted(vec![vec![(1, 0.6), (2, 0.4)], vec![(EOS, 1.0)]]);
        // The step-0 query is e0, nearest key carries token 2.
        let ds = one_hot_store(&[2, EOS, EOS, EOS]);
        let mut c = cfg(DecodeMode::Fast, 1);
        c.k = 1;
        let (h, stats) = beam_decode(&m, &[TokenId(0)], Some(&ds), &c).unwrap();
        assert_eq!(h[0].tokens, vec![TokenId(2)]);
        assert_eq!(stats.knn_searches, 2);
        assert_eq!(stats.max_scanned_per_search, 4);

        c.lambda = 0.0;
        let (fast0, _) = beam_decode(&m, &[TokenId(0)], Some(&ds), &c).unwrap();
        let (base, _) = beam_decode(&m, &[TokenId(0)], None, &cfg(DecodeMode::Base, 1)).unwrap();
        assert_eq!(fast0[0].tokens, base[0].tokens);
        assert_eq!(fast0[0].log_prob, base[0].log_prob);
    }

    #[test]
    fn empty_datastore_falls_back_to_base() {
        let m = Scripted(vec![vec![(1, 0.6), (2, 0.4)], vec![(EOS, 1.0)]]);
        let ds = one_hot_store(&[]);
        let (a, s) = beam_decode(&m, &[TokenId(0)], Some(&ds), &cfg(DecodeMode::Fast, 2)).unwrap();
        let (b, _) = beam_decode(&m, &[TokenId(0)], None, &cfg(DecodeMode::Base, 2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.knn_searches, 0);
    }

    #[test]
    fn length_cap_and_errors() {
        let m = Scripted(vec![vec![(1, 1.0)]]);
        let mut c = cfg(DecodeMode::Base, 1);
        c.max_len_ratio = 1.0;
        c.max_len_extra = 2;
        let (h, _) = beam_decode(&m, &[TokenId(0); 3], None, &c).unwrap();
        assert_eq!(h[0].tokens.len(), 5);
        assert!(!h[0].finished);
        assert!(matches!(beam_decode(&m, &[], None, &c), Err(Error::EmptySource)));
        c.temperature = 0.0;
        assert!(beam_decode(&m, &[TokenId(0)], None, &c).is_err());
    }

    #[test]
    fn schedules_agree() {
        let m = Scripted(vec![vec![(1, 0.5), (2, 0.3), (3, 0.2)], vec![(4, 0.5), (EOS, 0.5)], vec![(EOS, 1.0)]]);
        let ds = one_hot_store(&[1, 2, 3, 4, 2, 2, 3, 1]);
        for beam in [1, 3] {
            let mut c = cfg(DecodeMode::Fast, beam);
            c.exec = Exec::Sequential;
            let a = beam_decode(&m, &[TokenId(0)], Some(&ds), &c).unwrap();
            c.exec = Exec::Parallel;
            assert_eq!(a, beam_decode(&m, &[TokenId(0)], Some(&ds), &c).unwrap());
        }
    }

    #[test]
    fn mode_parsing() {
        for m in [DecodeMode::Base, DecodeMode::Fast, DecodeMode::Vanilla] {
            assert_eq!(m.to_string().parse::<DecodeMode>().unwrap(), m);
        }
        assert!("quick".parse::<DecodeMode>().is_err());
    }
}
