//! Trajectory similarity kernels and the embedding-provider interface.
//!
//! All kernels are pure functions over slices so they can run in parallel
//! across (task, candidate) pairs.

pub mod embedding;

use thiserror::Error;

use crate::dataset::{GeoPoint, PoiId};

pub use embedding::{
    EmbedKey, Embedder, EmbeddingCache, EmbeddingError, EmbeddingProvider, HashEmbeddingProvider,
    RemoteEmbeddingProvider, HASH_EMBEDDING_DIM,
};

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("sequence must be non-empty")]
    EmptySequence,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
}

/// Great-circle distance in kilometres.
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Unconstrained DTW with haversine local cost. Returns the raw cumulative
/// cost of the optimal warping path (no window, no length normalisation).
pub fn dtw_distance(a: &[GeoPoint], b: &[GeoPoint]) -> Result<f64, SimilarityError> {
    if a.is_empty() || b.is_empty() {
        return Err(SimilarityError::EmptySequence);
    }
    // Iterate over the longer sequence so the rows are as short as possible.
    let (outer, inner) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut prev = vec![f64::INFINITY; inner.len() + 1];
    let mut curr = vec![f64::INFINITY; inner.len() + 1];
    prev[0] = 0.0;
    for &p in outer {
        curr[0] = f64::INFINITY;
        for (j, &q) in inner.iter().enumerate() {
            let best = prev[j].min(prev[j + 1]).min(curr[j]);
            curr[j + 1] = haversine(p, q) + best;
        }
        std::mem::swap(&mut prev, &mut curr);
        prev[0] = f64::INFINITY;
    }
    Ok(prev[inner.len()])
}

/// Jaccard coefficient of the POI-id sets.
pub fn jaccard_similarity(a: &[PoiId], b: &[PoiId]) -> Result<f64, SimilarityError> {
    if a.is_empty() || b.is_empty() {
        return Err(SimilarityError::EmptySequence);
    }
    Ok(jaccard_sorted(&sorted_set(a), &sorted_set(b)))
}

/// Sorted, deduplicated copy of `ids`.
pub fn sorted_set(ids: &[PoiId]) -> Vec<PoiId> {
    let mut set = ids.to_vec();
    set.sort_unstable();
    set.dedup();
    set
}

/// Jaccard over two sets already in [`sorted_set`] form. Linear merge.
pub fn jaccard_sorted(a: &[PoiId], b: &[PoiId]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Length of the longest common subsequence of two POI-id sequences.
pub fn lcs_length(a: &[PoiId], b: &[PoiId]) -> Result<usize, SimilarityError> {
    if a.is_empty() || b.is_empty() {
        return Err(SimilarityError::EmptySequence);
    }
    let (outer, inner) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut row = vec![0usize; inner.len() + 1];
    for &x in outer {
        // `diag` holds the previous row's value at j before it is overwritten.
        let mut diag = 0;
        for (j, &y) in inner.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    Ok(row[inner.len()])
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, SimilarityError> {
    if u.len() != v.len() {
        return Err(SimilarityError::DimensionMismatch(u.len(), v.len()));
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (&x, &y) in u.iter().zip(v) {
        dot += x * y;
        nu += x * x;
        nv += y * y;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(SimilarityError::ZeroNorm);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::{HashMap, HashSet};
    use std::f64::consts::PI;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint { lat, lon }
    }

    fn ids(v: &[u32]) -> Vec<PoiId> {
        v.iter().copied().map(PoiId).collect()
    }

    #[test]
    fn haversine_reference_distances() {
        let x = pt(35.68, 139.76);
        assert_eq!(haversine(x, x), 0.0);
        assert!((haversine(pt(0.0, 0.0), pt(0.0, 180.0)) - PI * EARTH_RADIUS_KM).abs() < 1e-6);
        assert!((haversine(pt(0.0, 0.0), pt(90.0, 0.0)) - PI / 2.0 * EARTH_RADIUS_KM).abs() < 1e-6);
        assert!((PI * EARTH_RADIUS_KM - 20015.087).abs() < 1e-3);
    }

    #[test]
    fn dtw_base_cases() {
        let a = vec![pt(40.0, -74.0), pt(40.1, -74.1), pt(40.2, -73.9)];
        assert_eq!(dtw_distance(&a, &a).unwrap(), 0.0);
        let (p, q) = (pt(40.0, -74.0), pt(41.0, -73.0));
        assert_eq!(dtw_distance(&[p], &[q]).unwrap(), haversine(p, q));
        assert_eq!(dtw_distance(&[], &a), Err(SimilarityError::EmptySequence));
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard_similarity(&ids(&[1, 2, 2]), &ids(&[2, 1])).unwrap(), 1.0);
        assert_eq!(jaccard_similarity(&ids(&[1, 2]), &ids(&[3, 4])).unwrap(), 0.0);
        assert_eq!(jaccard_similarity(&ids(&[1, 2, 3]), &ids(&[2, 3, 4])).unwrap(), 0.5);
        assert!(jaccard_similarity(&[], &ids(&[1])).is_err());
    }

    #[test]
    fn lcs_examples() {
        let a = ids(&[5, 1, 5, 9]);
        assert_eq!(lcs_length(&a, &a).unwrap(), 4);
        assert_eq!(lcs_length(&ids(&[1, 2]), &ids(&[3, 4])).unwrap(), 0);
        assert_eq!(lcs_length(&ids(&[1, 2, 3, 4]), &ids(&[2, 4, 3])).unwrap(), 2);
        assert_eq!(lcs_length(&ids(&[7]), &ids(&[1, 7])).unwrap(), 1);
        assert!(lcs_length(&a, &[]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[0.3, -2.0, 1.0], &[0.3, -2.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(SimilarityError::DimensionMismatch(1, 2))
        );
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), Err(SimilarityError::ZeroNorm));
    }

    /// Memoised top-down DTW recursion, independent of the rolling-row kernel.
    fn dtw_oracle(a: &[GeoPoint], b: &[GeoPoint]) -> f64 {
        fn go(i: usize, j: usize, a: &[GeoPoint], b: &[GeoPoint], memo: &mut HashMap<(usize, usize), f64>) -> f64 {
            if let Some(&v) = memo.get(&(i, j)) {
                return v;
            }
            let cost = haversine(a[i], b[j]);
            let v = match (i, j) {
                (0, 0) => cost,
                (0, _) => cost + go(0, j - 1, a, b, memo),
                (_, 0) => cost + go(i - 1, 0, a, b, memo),
                _ => {
                    cost + go(i - 1, j, a, b, memo)
                        .min(go(i, j - 1, a, b, memo))
                        .min(go(i - 1, j - 1, a, b, memo))
                }
            };
            memo.insert((i, j), v);
            v
        }
        go(a.len() - 1, b.len() - 1, a, b, &mut HashMap::new())
    }

    /// Longest common subsequence by enumerating every subsequence of `a`.
    fn lcs_oracle(a: &[PoiId], b: &[PoiId]) -> usize {
        fn is_subsequence(sub: &[PoiId], of: &[PoiId]) -> bool {
            let mut it = of.iter();
            sub.iter().all(|x| it.any(|y| y == x))
        }
        (0u32..1 << a.len())
            .filter_map(|mask| {
                let sub: Vec<PoiId> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
                is_subsequence(&sub, b).then_some(sub.len())
            })
            .max()
            .unwrap_or(0)
    }

    fn geo_seq(max: usize) -> impl Strategy<Value = Vec<GeoPoint>> {
        prop::collection::vec((-90.0f64..=90.0, -180.0f64..=180.0).prop_map(|(lat, lon)| pt(lat, lon)), 1..=max)
    }

    fn poi_seq(max: usize) -> impl Strategy<Value = Vec<PoiId>> {
        prop::collection::vec((0u32..6).prop_map(PoiId), 1..=max)
    }

    proptest! {
        #[test]
        fn dtw_matches_memoised_recursion(a in geo_seq(10), b in geo_seq(10)) {
            let fast = dtw_distance(&a, &b).unwrap();
            prop_assert!((fast - dtw_oracle(&a, &b)).abs() <= 1e-9);
            prop_assert!((fast - dtw_distance(&b, &a).unwrap()).abs() <= 1e-9);
        }

        #[test]
        fn lcs_matches_enumeration(a in poi_seq(8), b in poi_seq(8)) {
            let l = lcs_length(&a, &b).unwrap();
            prop_assert_eq!(l, lcs_oracle(&a, &b));
            prop_assert_eq!(l, lcs_length(&b, &a).unwrap());
        }

        #[test]
        fn jaccard_matches_hash_sets(a in poi_seq(12), b in poi_seq(12)) {
            let sa: HashSet<_> = a.iter().collect();
            let sb: HashSet<_> = b.iter().collect();
            let expected = sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64;
            prop_assert_eq!(jaccard_similarity(&a, &b).unwrap(), expected);
            prop_assert_eq!(jaccard_similarity(&b, &a).unwrap(), expected);
        }

        #[test]
        fn single_point_lcs(x in 0u32..4, y in 0u32..4) {
            prop_assert_eq!(lcs_length(&[PoiId(x)], &[PoiId(y)]).unwrap(), usize::from(x == y));
        }
    }

    /// Best-of-N wall time, to damp scheduler noise.
    fn best_time(mut f: impl FnMut()) -> f64 {
        (0..15)
            .map(|_| {
                let t = std::time::Instant::now();
                for _ in 0..20 {
                    f();
                }
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn runtime_scaling() {
        let geo = |n: usize| (0..n).map(|i| pt(40.0 + i as f64 * 1e-3, -74.0 + (i % 17) as f64 * 1e-3)).collect::<Vec<_>>();
        let poi = |n: usize, salt: u32| (0..n as u32).map(|i| PoiId((i * 7 + salt) % 301)).collect::<Vec<_>>();
        let (g128a, g128b, g256a, g256b) = (geo(128), geo(128), geo(256), geo(256));
        let (p128a, p128b, p256a, p256b) = (poi(128, 1), poi(128, 3), poi(256, 1), poi(256, 3));

        let dtw = best_time(|| { std::hint::black_box(dtw_distance(&g256a, &g256b).unwrap()); })
            / best_time(|| { std::hint::black_box(dtw_distance(&g128a, &g128b).unwrap()); });
        let lcs = best_time(|| { std::hint::black_box(lcs_length(&p256a, &p256b).unwrap()); })
            / best_time(|| { std::hint::black_box(lcs_length(&p128a, &p128b).unwrap()); });
        // Jaccard is n log n; compare a 4x size step so the gap to quadratic (16x) is wide.
        let wide = |n: usize, salt: u32| (0..n as u32).map(|i| PoiId((i * 7919 + salt) % 100_003)).collect::<Vec<_>>();
        let (w1a, w1b, w4a, w4b) = (wide(1024, 1), wide(1024, 3), wide(4096, 1), wide(4096, 3));
        let jac = best_time(|| { std::hint::black_box(jaccard_similarity(&w4a, &w4b).unwrap()); })
            / best_time(|| { std::hint::black_box(jaccard_similarity(&w1a, &w1b).unwrap()); });
        assert!((2.5..=6.0).contains(&dtw), "dtw ratio {dtw}");
        assert!((2.5..=6.0).contains(&lcs), "lcs ratio {lcs}");
        assert!((3.0..=9.0).contains(&jac), "jaccard ratio {jac}");
    }
}
