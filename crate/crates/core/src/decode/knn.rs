// SPDX-License-Identifier: Apache-2.0

use crate::decode::SparseDistribution;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::retrieval::{KnnHit, TargetDatastore};

/// kNN distribution from the `k` nearest entries of `ds` to `query`.
pub fn knn_distribution(query: &[f32], ds: &TargetDatastore, k: usize, temperature: f64) -> Result<SparseDistribution> {
    if ds.is_empty() {
        return Err(Error::EmptyDatastore);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let (hits, _) = ds.search(query, k, Exec::Sequential)?;
    knn_from_hits(&hits, temperature)
}

/// Same computation over a store of every target position; the scan cost is
/// the whole corpus, which is what the vanilla mode pays each step.
pub fn vanilla_global_search(query: &[f32], global: &TargetDatastore, k: usize, temperature: f64, exec: Exec) -> Result<(SparseDistribution, u64)> {
    if global.is_empty() {
        return Err(Error::EmptyDatastore);
    }
    let (hits, scanned) = global.search(query, k.max(1), exec)?;
    Ok((knn_from_hits(&hits, temperature)?, scanned))
}

/// Softmax over negated distances scaled by `1 / temperature`, summed per
/// token. `hits` should already be the top-`k` neighbors.
///
/// The minimum distance is subtracted before exponentiating, which leaves the
/// normalized result unchanged. No hits yields an empty distribution.
pub fn knn_from_hits(hits: &[KnnHit], temperature: f64) -> Result<SparseDistribution> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let Some(d_min) = hits.iter().map(|h| h.distance as f64).min_by(f64::total_cmp) else {
        return Ok(SparseDistribution::default());
    };
    Ok(SparseDistribution::normalized(hits.iter().map(|h| {
        (h.token, (-(h.distance as f64 - d_min) / temperature).exp())
    })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Loc, TokenId};
    use proptest::prelude::*;

    fn hit(t: u32, d: f32) -> KnnHit {
        KnnHit {
            token: TokenId(t),
            distance: d,
            loc: Loc::new(0, 0),
        }
    }

    /// Direct evaluation without the max shift.
    fn oracle(hits: &[KnnHit], temp: f64) -> Vec<(TokenId, f64)> {
        let z: f64 = hits.iter().map(|h| (-(h.distance as f64) / temp).exp()).sum();
        let mut toks: Vec<TokenId> = hits.iter().map(|h| h.token).collect();
        toks.sort();
        toks.dedup();
        toks.into_iter()
            .map(|t| {
                let m: f64 = hits
                    .iter()
                    .filter(|h| h.token == t)
                    .map(|h| (-(h.distance as f64) / temp).exp())
                    .sum();
                (t, m / z)
            })
            .collect()
    }

    #[test]
    fn equal_distances_give_uniform() {
        let hits = [hit(1, 2.0), hit(2, 2.0), hit(3, 2.0)];
        let p = knn_from_hits(&hits, 1.0).unwrap();
        for t in 1..=3 {
            assert!((p.get(TokenId(t)) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_entry_example() {
        let hits = [hit(0, 0.0), hit(1, std::f32::consts::LN_2)];
        let p = knn_from_hits(&hits, 1.0).unwrap();
        assert!((p.get(TokenId(0)) - 2.0 / 3.0).abs() < 1e-7);
        assert!((p.get(TokenId(1)) - 1.0 / 3.0).abs() < 1e-7);
        assert_eq!(knn_from_hits(&[hit(4, 9.0)], 1.0).unwrap().get(TokenId(4)), 1.0);
        assert_eq!(knn_from_hits(&[hit(4, 0.0), hit(4, 1.0)], 1.0).unwrap().get(TokenId(4)), 1.0);
    }

    #[test]
    fn datastore_wrappers() {
        use crate::annindex::KeyStore;
        use crate::metric::Metric;
        let ds = TargetDatastore {
            metric: Metric::L2,
            locs: vec![Loc::new(0, 0), Loc::new(0, 1)],
            tokens: vec![TokenId(3), TokenId(5)],
            keys: KeyStore::raw(&[0.0, 0.0, 1.0, 0.0], 2, Metric::L2).unwrap(),
        };
        let p = knn_distribution(&[0.0, 0.0], &ds, 2, 1.0).unwrap();
        let e = (-1.0f64).exp();
        assert!((p.get(TokenId(3)) - 1.0 / (1.0 + e)).abs() < 1e-12);
        let (g, scanned) = vanilla_global_search(&[0.0, 0.0], &ds, 2, 1.0, Exec::Parallel).unwrap();
        assert_eq!((g, scanned), (p, 2));
        assert_eq!(knn_distribution(&[0.0, 0.0], &ds, 1, 1.0).unwrap().get(TokenId(3)), 1.0);
        let empty = TargetDatastore {
            metric: Metric::L2,
            locs: vec![],
            tokens: vec![],
            keys: KeyStore::raw(&[], 2, Metric::L2).unwrap(),
        };
        assert!(matches!(knn_distribution(&[0.0, 0.0], &empty, 1, 1.0), Err(Error::EmptyDatastore)));
        assert!(knn_distribution(&[0.0, 0.0], &ds, 0, 1.0).is_err());
    }

    #[test]
    fn worked_example_and_aggregation() {
        // Distances 0, 1, 1 with tokens a, b, b at T = 1.
        let hits = [hit(0, 0.0), hit(1, 1.0), hit(1, 1.0)];
        let p = knn_from_hits(&hits, 1.0).unwrap();
        let e = (-1.0f64).exp();
        assert!((p.get(TokenId(0)) - 1.0 / (1.0 + 2.0 * e)).abs() < 1e-12);
        assert!((p.get(TokenId(1)) - 2.0 * e / (1.0 + 2.0 * e)).abs() < 1e-12);
    }

    #[test]
    fn extreme_distances_stay_finite() {
        let hits = [hit(0, 1e6), hit(1, 1e6 + 1.0)];
        let p = knn_from_hits(&hits, 1e-3).unwrap();
        assert!((p.total() - 1.0).abs() < 1e-12);
        assert_eq!(p.argmax(), Some(TokenId(0)));
    }

    #[test]
    fn invalid_temperature_and_empty() {
        assert!(knn_from_hits(&[hit(0, 1.0)], 0.0).is_err());
        assert!(knn_from_hits(&[hit(0, 1.0)], -1.0).is_err());
        assert!(knn_from_hits(&[], 1.0).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn matches_direct_formula(
            raw in prop::collection::vec((0u32..6, 0.0f32..20.0), 1..40),
            temp in 0.5f64..50.0,
        ) {
            let hits: Vec<KnnHit> = raw.iter().map(|&(t, d)| hit(t, d)).collect();
            let p = knn_from_hits(&hits, temp).unwrap();
            prop_assert!((p.total() - 1.0).abs() < 1e-9);
            for (t, v) in oracle(&hits, temp) {
                prop_assert!((p.get(t) - v).abs() < 1e-9 * (1.0 + v));
            }
        }

        #[test]
        fn duplicate_never_lowers_its_token(
            raw in prop::collection::vec((0u32..6, 0.0f32..5.0), 1..20),
            pick in 0usize..20,
            temp in 0.1f64..5.0,
        ) {
            let mut hits: Vec<KnnHit> = raw.iter().map(|&(t, d)| hit(t, d)).collect();
            let dup = hits[pick % hits.len()];
            let before = knn_from_hits(&hits, temp).unwrap().get(dup.token);
            hits.push(dup);
            let after = knn_from_hits(&hits, temp).unwrap().get(dup.token);
            prop_assert!(after >= before - 1e-12);
        }

        #[test]
        fn low_temperature_argmax_is_nearest(
            dists in prop::collection::hash_set(0u32..10_000, 1..20),
        ) {
            // Distinct tokens with distances at least 0.01 apart.
            let hits: Vec<KnnHit> = dists.iter().enumerate().map(|(i, &d)| hit(i as u32, d as f32 * 0.01)).collect();
            let nearest = hits.iter().min_by(|a, b| a.distance.total_cmp(&b.distance)).unwrap().token;
            prop_assert_eq!(knn_from_hits(&hits, 1e-3).unwrap().argmax(), Some(nearest));
        }
    }
}
