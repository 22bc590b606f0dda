// SPDX-License-Identifier: Apache-2.0

use crate::corpus::TokenId;
use crate::error::{Error, Result};

/// Token probabilities stored sparsely, sorted by token id. Absent tokens
/// have probability zero and stored values are strictly positive.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseDistribution {
    probs: Vec<(TokenId, f64)>,
}

impl SparseDistribution {
    /// Aggregates `(token, mass)` pairs by token, dropping non-positive mass.
    /// The result is not renormalized.
    pub fn from_masses(pairs: impl IntoIterator<Item = (TokenId, f64)>) -> Self {
        let mut probs: Vec<(TokenId, f64)> = pairs.into_iter().filter(|p| p.1 > 0.0).collect();
        if !probs.is_sorted_by_key(|p| p.0) {
            probs.sort_by_key(|p| p.0);
        }
        probs.dedup_by(|later, earlier| {
            if later.0 == earlier.0 {
                earlier.1 += later.1;
                true
            } else {
                false
            }
        });
        SparseDistribution { probs }
    }

    /// Aggregates and normalizes masses to sum to one.
    pub fn normalized(pairs: impl IntoIterator<Item = (TokenId, f64)>) -> Self {
        let mut d = Self::from_masses(pairs);
        let z = d.total();
        if z > 0.0 {
            d.probs.iter_mut().for_each(|p| p.1 /= z);
        }
        d
    }

    pub fn uniform(tokens: impl IntoIterator<Item = TokenId>) -> Self {
        Self::normalized(tokens.into_iter().map(|t| (t, 1.0)))
    }

    pub fn point(token: TokenId) -> Self {
        SparseDistribution {
            probs: vec![(token, 1.0)],
        }
    }

    pub fn get(&self, token: TokenId) -> f64 {
        self.probs
            .binary_search_by_key(&token, |p| p.0)
            .map_or(0.0, |i| self.probs[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, f64)> + '_ {
        self.probs.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().map(|p| p.1).sum()
    }

    /// Most probable token; ties go to the lower id.
    pub fn argmax(&self) -> Option<TokenId> {
        let mut best: Option<(TokenId, f64)> = None;
        for &(t, p) in &self.probs {
            if best.is_none_or(|b| p > b.1) {
                best = Some((t, p));
            }
        }
        best.map(|b| b.0)
    }

    /// The `n` most probable entries, highest first, ties by lower id.
    pub fn top(&self, n: usize) -> Vec<(TokenId, f64)> {
        let order = |a: &(TokenId, f64), b: &(TokenId, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if n == 0 {
            return Vec::new();
        }
        let mut v = self.probs.clone();
        if n < v.len() {
            v.select_nth_unstable_by(n - 1, order);
            v.truncate(n);
        }
        v.sort_by(order);
        v
    }
}

/// `lambda * p_knn + (1 - lambda) * p_mt`, merged over the union of supports.
pub fn interpolate(
    p_mt: &SparseDistribution,
    p_knn: &SparseDistribution,
    lambda: f64,
) -> Result<SparseDistribution> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let w_mt = 1.0 - lambda;
    let (a, b) = (&p_mt.probs, &p_knn.probs);
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let (t, v) = match (a.get(i), b.get(j)) {
            (Some(&(ta, pa)), Some(&(tb, pb))) if ta == tb => {
                i += 1;
                j += 1;
                (ta, w_mt * pa + lambda * pb)
            }
            (Some(&(ta, pa)), Some(&(tb, _))) if ta < tb => {
                i += 1;
                (ta, w_mt * pa)
            }
            (Some(&(ta, pa)), None) => {
                i += 1;
                (ta, w_mt * pa)
            }
            (_, Some(&(tb, pb))) => {
                j += 1;
                (tb, lambda * pb)
            }
            (None, None) => unreachable!(),
        };
        if v > 0.0 {
            out.push((t, v));
        }
    }
    Ok(SparseDistribution { probs: out })
}
