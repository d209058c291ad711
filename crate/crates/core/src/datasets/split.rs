//! Country / dependent / invariant feature split by mean pairwise
//! cross-region distribution distance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DataError, QueryGroup};

/// Regions with fewer samples are left out of distance estimation.
pub const MIN_REGION_SAMPLES: usize = 30;
pub const DEFAULT_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// Two-sample Kolmogorov-Smirnov statistic.
    #[default]
    Ks,
    /// 1-Wasserstein (earth mover's) distance between empirical CDFs.
    Wasserstein,
}

impl DistanceMetric {
    /// Distance between two samples; both must be sorted ascending.
    pub fn distance_sorted(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DistanceMetric::Ks => ks_statistic_sorted(a, b),
            DistanceMetric::Wasserstein => wasserstein_sorted(a, b),
        }
    }

    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        self.distance_sorted(&a, &b)
    }
}

/// Walks the merged order of two sorted samples, calling `f` with the two
/// ECDF values on each interval `[x, next)` between distinct values.
fn walk_ecdfs(a: &[f64], b: &[f64], mut f: impl FnMut(f64, f64, f64, f64)) {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        let next = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => x,
        };
        f(x, next, i as f64 / na, j as f64 / nb);
    }
}

pub fn ks_statistic_sorted(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut d: f64 = 0.0;
    walk_ecdfs(a, b, |_, _, fa, fb| d = d.max((fa - fb).abs()));
    d
}

pub fn wasserstein_sorted(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut w = 0.0;
    walk_ecdfs(a, b, |x, next, fa, fb| w += (fa - fb).abs() * (next - x));
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSplit {
    pub country_idx: Vec<usize>,
    pub dependent_idx: Vec<usize>,
    pub invariant_idx: Vec<usize>,
    pub threshold: f64,
    pub metric: DistanceMetric,
    /// Mean pairwise cross-region distance per feature; `None` for
    /// country columns.
    pub mean_distance: Vec<Option<f64>>,
    /// Regions dropped for having fewer than [`MIN_REGION_SAMPLES`] rows.
    pub excluded_regions: Vec<u32>,
}

impl FeatureSplit {
    pub fn feature_dim(&self) -> usize {
        self.mean_distance.len()
    }

    /// Checks the three index sets partition `0..feature_dim`.
    pub fn is_partition(&self) -> bool {
        let mut seen = vec![0u8; self.feature_dim()];
        for &i in self
            .country_idx
            .iter()
            .chain(&self.dependent_idx)
            .chain(&self.invariant_idx)
        {
            match seen.get_mut(i) {
                Some(s) => *s += 1,
                None => return false,
            }
        }
        seen.iter().all(|&s| s == 1)
    }
}

/// Splits feature columns of `groups` into country / dependent / invariant.
///
/// `country_idx` is chosen by hand. Every other column is dependent iff
/// the mean over region pairs of `metric` between its per-region
/// empirical distributions exceeds `threshold`.
pub fn split_features(
    groups: &[QueryGroup],
    country_idx: &[usize],
    threshold: f64,
    metric: DistanceMetric,
) -> Result<FeatureSplit, DataError> {
    let dim = groups
        .first()
        .and_then(|g| g.records.first())
        .map(|r| r.feature_dim())
        .ok_or_else(|| DataError::InvalidConfig("no records to split".into()))?;
    if let Some(&bad) = country_idx.iter().find(|&&c| c >= dim) {
        return Err(DataError::InvalidConfig(format!(
            "country column {bad} out of range for {dim} features"
        )));
    }
    let mut per_region: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
    for g in groups {
        let cols = per_region
            .entry(g.region)
            .or_insert_with(|| vec![Vec::new(); dim]);
        for r in &g.records {
            if r.feature_dim() != dim {
                return Err(DataError::InvalidConfig(format!(
                    "record in {} has {} features, expected {dim}",
                    r.query_id,
                    r.feature_dim()
                )));
            }
            for (j, v) in r.x_user.iter().chain(&r.x_listing).enumerate() {
                cols[j].push(*v);
            }
        }
    }
    let mut excluded_regions = Vec::new();
    per_region.retain(|&region, cols| {
        let n = cols[0].len();
        if n < MIN_REGION_SAMPLES {
            log::warn!(
                "region {region} has {n} samples (< {MIN_REGION_SAMPLES}); excluded from distance estimation"
            );
            excluded_regions.push(region);
            false
        } else {
            true
        }
    });
    if per_region.len() < 2 {
        return Err(DataError::TooFewRegions(per_region.len()));
    }
    let mut regions: Vec<Vec<Vec<f64>>> = per_region.into_values().collect();
    for cols in &mut regions {
        for c in cols.iter_mut() {
            c.sort_by(f64::total_cmp);
        }
    }

    let mut mean_distance = vec![None; dim];
    let mut dependent_idx = Vec::new();
    let mut invariant_idx = Vec::new();
    for (j, slot) in mean_distance.iter_mut().enumerate() {
        if country_idx.contains(&j) {
            continue;
        }
        let mut total = 0.0;
        let mut pairs = 0usize;
        for a in 0..regions.len() {
            for b in a + 1..regions.len() {
                total += metric.distance_sorted(&regions[a][j], &regions[b][j]);
                pairs += 1;
            }
        }
        let mean = total / pairs as f64;
        *slot = Some(mean);
        if mean > threshold {
            dependent_idx.push(j);
        } else {
            invariant_idx.push(j);
        }
    }
    let mut country_idx = country_idx.to_vec();
    country_idx.sort_unstable();
    country_idx.dedup();
    Ok(FeatureSplit {
        country_idx,
        dependent_idx,
        invariant_idx,
        threshold,
        metric,
        mean_distance,
        excluded_regions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{FunnelLabels, InteractionRecord, Platform};

    fn groups_from(rows: &[(u32, Vec<f64>)]) -> Vec<QueryGroup> {
        rows.iter()
            .enumerate()
            .map(|(i, (region, x))| {
                let id = format!("q{i}");
                let rec = InteractionRecord {
                    query_id: id.clone(),
                    region: *region,
                    platform: Platform::Web,
                    listing_region: *region,
                    x_user: x.clone(),
                    x_listing: vec![],
                    labels: FunnelLabels::default(),
                };
                QueryGroup::new(id, *region, Platform::Web, vec![rec]).unwrap()
            })
            .collect()
    }

    #[test]
    fn ks_known_values() {
        assert_eq!(DistanceMetric::Ks.distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(DistanceMetric::Ks.distance(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
        // F_a jumps to 0.5 at 1, F_b stays 0 until 1.5
        assert_eq!(DistanceMetric::Ks.distance(&[1.0, 2.0], &[1.5, 2.0]), 0.5);
        // ties across samples move both ECDFs together
        assert_eq!(DistanceMetric::Ks.distance(&[0.0, 0.0, 1.0], &[0.0, 1.0, 1.0]), 1.0 / 3.0);
    }

    #[test]
    fn wasserstein_known_values() {
        assert!((DistanceMetric::Wasserstein.distance(&[0.0, 1.0], &[2.0, 3.0]) - 2.0).abs() < 1e-12);
        assert_eq!(DistanceMetric::Wasserstein.distance(&[5.0], &[5.0]), 0.0);
    }

    #[test]
    fn identical_regions_are_invariant_and_separated_ones_dependent() {
        let mut rows = Vec::new();
        for region in 0..3u32 {
            for i in 0..40 {
                let same = i as f64;
                let separated = region as f64 * 1000.0 + i as f64;
                let onehot = (0..3).map(|r| f64::from(r == region)).collect::<Vec<_>>();
                let mut x = vec![same, separated];
                x.extend(onehot);
                rows.push((region, x));
            }
        }
        let split = split_features(&groups_from(&rows), &[2, 3, 4], 0.1, DistanceMetric::Ks).unwrap();
        assert_eq!(split.invariant_idx, vec![0]);
        assert_eq!(split.dependent_idx, vec![1]);
        assert_eq!(split.mean_distance[0], Some(0.0));
        assert_eq!(split.mean_distance[1], Some(1.0));
        assert!(split.is_partition());
    }

    #[test]
    fn sparse_region_excluded() {
        let mut rows = Vec::new();
        for region in 0..3u32 {
            let n = if region == 2 { 5 } else { 40 };
            for i in 0..n {
                rows.push((region, vec![i as f64]));
            }
        }
        let split = split_features(&groups_from(&rows), &[], 0.1, DistanceMetric::Ks).unwrap();
        assert_eq!(split.excluded_regions, vec![2]);
        assert_eq!(split.mean_distance[0], Some(0.0));
    }

    #[test]
    fn needs_two_regions() {
        let rows: Vec<_> = (0..40).map(|i| (0u32, vec![i as f64])).collect();
        assert!(matches!(
            split_features(&groups_from(&rows), &[], 0.1, DistanceMetric::Ks),
            Err(DataError::TooFewRegions(1))
        ));
    }
}
