//! Sequence and dataset dissimilarities used to monitor generation quality.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SequenceSet;
use crate::error::{Error, Result};

/// Dynamic time warping cost with squared pointwise cost and no band.
pub fn dtw_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    dtw_distance_banded(x, y, None)
}

/// Dynamic time warping with an optional Sakoe-Chiba band: cell `(i, j)` is
/// admissible when `|i - j| <= max(band, |m - n|)`, which keeps the end cell reachable.
///
/// `D[i][j] = (x_i - y_j)^2 + min(D[i][j-1], D[i-1][j], D[i-1][j-1])`, starting
/// from `D[0][0] = (x_0 - y_0)^2`; returns the last cell. Two rows of storage.
pub fn dtw_distance_banded(x: &[f64], y: &[f64], band: Option<usize>) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptySequence);
    }
    let (m, n) = (x.len(), y.len());
    let width = band.map(|w| w.max(m.abs_diff(n)));
    let inside = |i: usize, j: usize| width.is_none_or(|w| i.abs_diff(j) <= w);

    let mut prev = vec![f64::INFINITY; n];
    let mut cur = vec![f64::INFINITY; n];
    for i in 0..m {
        for j in 0..n {
            if !inside(i, j) {
                cur[j] = f64::INFINITY;
                continue;
            }
            let cost = (x[i] - y[j]) * (x[i] - y[j]);
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => cur[j - 1].min(prev[j]).min(prev[j - 1]),
            };
            cur[j] = cost + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[n - 1])
}

/// Per-pair distance inside the dataset dissimilarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseMetric {
    #[default]
    Dtw,
    Euclidean,
}

impl BaseMetric {
    pub fn distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            BaseMetric::Dtw => dtw_distance(x, y),
            BaseMetric::Euclidean => {
                if x.len() != y.len() {
                    return Err(Error::WindowMismatch {
                        expected: x.len(),
                        got: y.len(),
                    });
                }
                Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            }
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BaseMetric::Dtw => "dtw",
            BaseMetric::Euclidean => "euclidean",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DedimsConfig {
    /// Subsample size drawn from each set.
    pub n: usize,
    pub seed: u64,
    pub base_metric: BaseMetric,
}

impl DedimsConfig {
    pub const DEFAULT_N: usize = 64;

    pub fn dtw(n: usize, seed: u64) -> Self {
        DedimsConfig {
            n,
            seed,
            base_metric: BaseMetric::Dtw,
        }
    }
}

/// `n` distinct indices out of `len`, drawn from a fresh stream seeded with `seed`.
fn subsample(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    index::sample(&mut rng, len, n).into_vec()
}

/// Dataset dissimilarity of `b` from `a`.
///
/// Both sets are subsampled to `n` (same seed for each). For every subsampled
/// `s_i` from `a`, the distance to its nearest neighbour in `b`'s subsample is
/// compared with the distance to its nearest *other* member of `a`'s
/// subsample; the result is the mean absolute difference. Pairwise distances
/// are evaluated in parallel and reduced in a fixed order.
pub fn dedims_slices(a: &[&[f64]], b: &[&[f64]], cfg: &DedimsConfig) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    if cfg.n < 2 {
        return Err(Error::SingletonReference);
    }
    let available = a.len().min(b.len());
    if cfg.n > available {
        return Err(Error::SubsampleTooLarge { n: cfg.n, available });
    }
    let sa: Vec<&[f64]> = subsample(a.len(), cfg.n, cfg.seed).into_iter().map(|i| a[i]).collect();
    let sb: Vec<&[f64]> = subsample(b.len(), cfg.n, cfg.seed).into_iter().map(|i| b[i]).collect();

    let rows: Vec<Result<(f64, f64)>> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut cross = f64::INFINITY;
            for s in &sb {
                cross = cross.min(cfg.base_metric.distance(sa[i], s)?);
            }
            let mut reference = f64::INFINITY;
            for (j, s) in sa.iter().enumerate() {
                if j != i {
                    reference = reference.min(cfg.base_metric.distance(sa[i], s)?);
                }
            }
            Ok((cross, reference))
        })
        .collect();

    let mut total = 0.0;
    for r in rows {
        let (cross, reference) = r?;
        total += (cross - reference).abs();
    }
    Ok(total / cfg.n as f64)
}

pub fn dedims(set_a: &SequenceSet, set_b: &SequenceSet, cfg: &DedimsConfig) -> Result<f64> {
    let a: Vec<&[f64]> = set_a.samples.iter().map(|s| s.values.as_slice()).collect();
    let b: Vec<&[f64]> = set_b.samples.iter().map(|s| s.values.as_slice()).collect();
    dedims_slices(&a, &b, cfg)
}

/// Dataset dissimilarity with DTW as the per-pair distance.
pub fn dtw_dedims(set_a: &SequenceSet, set_b: &SequenceSet, n: usize, seed: u64) -> Result<f64> {
    dedims(set_a, set_b, &DedimsConfig::dtw(n, seed))
}

/// Order-1 Wasserstein distance between two empirical distributions with
/// equal weight on every value.
///
/// Integrates `|F_a^{-1}(u) - F_b^{-1}(u)|` over `u` exactly by walking the
/// merged breakpoints of the two step quantile functions.
pub fn wasserstein_1d_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len() as u128, xb.len() as u128);

    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0.0f64;
    let mut total = 0.0f64;
    while i < xa.len() && j < xb.len() {
        // breakpoints (i+1)/na and (j+1)/nb compared exactly in integers
        let ea = (i as u128 + 1) * nb;
        let eb = (j as u128 + 1) * na;
        let next = if ea <= eb {
            (i + 1) as f64 / na as f64
        } else {
            (j + 1) as f64 / nb as f64
        };
        total += (next - prev) * (xa[i] - xb[j]).abs();
        prev = next;
        if ea <= eb {
            i += 1;
        }
        if eb <= ea {
            j += 1;
        }
    }
    Ok(total)
}

/// Wasserstein distance between the pooled values of every sequence in each set.
pub fn wasserstein_1d(set_a: &SequenceSet, set_b: &SequenceSet) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::EmptySet);
    }
    let pool = |s: &SequenceSet| s.samples.iter().flat_map(|x| x.values.iter().copied()).collect::<Vec<_>>();
    wasserstein_1d_values(&pool(set_a), &pool(set_b))
}

/// Quality summary of a generated set against a real one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub wasserstein: f64,
    pub dtw_dedims: f64,
    pub n_used: usize,
    pub seed: u64,
    pub base_metric: BaseMetric,
}

/// Both monitoring metrics. `n` defaults to `min(64, |a|, |b|)`.
pub fn compare(real: &SequenceSet, generated: &SequenceSet, n: Option<usize>, seed: u64) -> Result<MetricReport> {
    let n = n.unwrap_or_else(|| DedimsConfig::DEFAULT_N.min(real.len()).min(generated.len()));
    Ok(MetricReport {
        wasserstein: wasserstein_1d(real, generated)?,
        dtw_dedims: dtw_dedims(real, generated, n, seed)?,
        n_used: n,
        seed,
        base_metric: BaseMetric::Dtw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SequenceSample, SplitTag, WindowSpec};
    use proptest::prelude::*;

    fn set(rows: &[&[f64]]) -> SequenceSet {
        let k = rows[0].len();
        SequenceSet::new(
            rows.iter().map(|r| SequenceSample::real(r.to_vec())).collect(),
            WindowSpec::new(k - 1, 1, 1).unwrap(),
            SplitTag::Unsplit,
        )
        .unwrap()
    }

    #[test]
    fn dtw_small_cases() {
        assert_eq!(dtw_distance(&[0.0, 1.0, 2.0], &[0.0, 2.0]).unwrap(), 1.0);
        assert_eq!(dtw_distance(&[1.5], &[-0.5]).unwrap(), 4.0);
        assert_eq!(dtw_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(matches!(dtw_distance(&[], &[1.0]), Err(Error::EmptySequence)));
    }

    #[test]
    fn band_never_beats_unconstrained() {
        let x = [0.0, 1.0, 3.0, 1.0, 0.0, 2.0];
        let y = [1.0, 3.0, 1.0, 0.0, 0.0, 0.0];
        let free = dtw_distance(&x, &y).unwrap();
        for w in 0..6 {
            let banded = dtw_distance_banded(&x, &y, Some(w)).unwrap();
            assert!(banded >= free);
            assert!(banded.is_finite());
        }
        assert_eq!(dtw_distance_banded(&x, &y, Some(10)).unwrap(), free);
        // band 0 on equal lengths is the pointwise squared distance
        let euclid: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        assert_eq!(dtw_distance_banded(&x, &y, Some(0)).unwrap(), euclid);
    }

    #[test]
    fn dedims_identical_sets() {
        let a = set(&[&[0.0, 0.0, 1.0], &[0.0, 1.0, 1.0], &[2.0, 2.0, 2.0]]);
        let cfg = DedimsConfig::dtw(3, 5);
        // cross distances are all zero, so the value is the mean nearest-other distance
        let d01 = dtw_distance(&a.samples[0].values, &a.samples[1].values).unwrap();
        let d02 = dtw_distance(&a.samples[0].values, &a.samples[2].values).unwrap();
        let d12 = dtw_distance(&a.samples[1].values, &a.samples[2].values).unwrap();
        let expected = (d01.min(d02) + d01.min(d12) + d02.min(d12)) / 3.0;
        assert!((dedims(&a, &a, &cfg).unwrap() - expected).abs() < 1e-12);

        let same = set(&[&[0.3, 0.4], &[0.3, 0.4], &[0.3, 0.4]]);
        assert_eq!(dedims(&same, &same, &DedimsConfig::dtw(3, 1)).unwrap(), 0.0);
    }

    #[test]
    fn dedims_errors() {
        let a = set(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert!(matches!(dedims(&a, &a, &DedimsConfig::dtw(1, 0)), Err(Error::SingletonReference)));
        assert!(matches!(
            dedims(&a, &a, &DedimsConfig::dtw(3, 0)),
            Err(Error::SubsampleTooLarge { n: 3, available: 2 })
        ));
    }

    #[test]
    fn euclidean_base_metric() {
        let a = set(&[&[0.0, 0.0], &[3.0, 4.0]]);
        let b = set(&[&[0.0, 1.0], &[3.0, 4.0]]);
        let cfg = DedimsConfig {
            n: 2,
            seed: 0,
            base_metric: BaseMetric::Euclidean,
        };
        // a0: cross 1, ref 5; a1: cross 0, ref 5
        assert!((dedims(&a, &b, &cfg).unwrap() - 4.5).abs() < 1e-12);
    }

    #[test]
    fn wasserstein_cases() {
        assert_eq!(wasserstein_1d_values(&[0.0, 0.0], &[-2.5]).unwrap(), 2.5);
        assert_eq!(wasserstein_1d_values(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap(), 0.0);
        // half the mass moves by 1
        assert!((wasserstein_1d_values(&[0.0, 1.0], &[1.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        // thirds against halves
        let w = wasserstein_1d_values(&[0.0, 1.0, 2.0], &[0.0, 2.0]).unwrap();
        assert!((w - 1.0 / 3.0).abs() < 1e-15, "{w}");
        assert!(matches!(wasserstein_1d_values(&[], &[1.0]), Err(Error::EmptySet)));
    }

    #[test]
    fn report_defaults_subsample() {
        let a = set(&[&[0.0, 1.0], &[1.0, 0.0], &[0.5, 0.5]]);
        let r = compare(&a, &a, None, 3).unwrap();
        assert_eq!(r.n_used, 3);
        assert_eq!(r.wasserstein, 0.0);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["base_metric"], "dtw");
    }

    proptest! {
        #[test]
        fn dtw_symmetric_and_bounded_below(
            x in prop::collection::vec(-5.0f64..5.0, 1..12),
            y in prop::collection::vec(-5.0f64..5.0, 1..12),
        ) {
            let d = dtw_distance(&x, &y).unwrap();
            prop_assert_eq!(d, dtw_distance(&y, &x).unwrap());
            prop_assert!(d >= (x[0] - y[0]).powi(2));
            prop_assert!(d >= (x[x.len() - 1] - y[y.len() - 1]).powi(2));
            prop_assert_eq!(dtw_distance(&x, &x).unwrap(), 0.0);
        }

        #[test]
        fn wasserstein_symmetric_and_shift_equivariant(
            a in prop::collection::vec(-5.0f64..5.0, 1..20),
            b in prop::collection::vec(-5.0f64..5.0, 1..20),
            c in -3.0f64..3.0,
        ) {
            let ab = wasserstein_1d_values(&a, &b).unwrap();
            prop_assert!((ab - wasserstein_1d_values(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(ab >= 0.0);
            let shifted: Vec<f64> = a.iter().map(|v| v + c).collect();
            prop_assert!((wasserstein_1d_values(&a, &shifted).unwrap() - c.abs()).abs() < 1e-9);
        }

        #[test]
        fn dedims_deterministic_nonnegative(seed in any::<u64>(), rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 4..9)) {
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let cfg = DedimsConfig::dtw(3, seed);
            let v = dedims_slices(&refs, &refs[1..], &cfg).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v, dedims_slices(&refs, &refs[1..], &cfg).unwrap());
        }
    }
}
