//! Exact k-nearest-neighbor search and neighbor weighting for NCP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::{squared_distance, Points};

/// Lower bound applied to every neighbor weight.
pub const WEIGHT_FLOOR: f64 = 1e-12;
/// Lower bound for the per-query median-distance bandwidth.
pub const MEDIAN_BANDWIDTH_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// Brute-force Euclidean index over calibration embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborIndex {
    points: Points,
}

impl NeighborIndex {
    pub fn new(points: Points) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.dim()
    }

    /// The `k` closest points, nearest first; equal distances resolve to the
    /// lower index.
    pub fn knn(&self, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        let n = self.points.len();
        if k == 0 || k > n {
            return Err(Error::InvalidK { k, n });
        }
        self.points.check_dim(query)?;
        let mut all: Vec<(f64, usize)> = self
            .points
            .rows()
            .enumerate()
            .map(|(i, p)| (squared_distance(p, query), i))
            .collect();
        let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            all.select_nth_unstable_by(k - 1, by_distance);
            all.truncate(k);
        }
        all.sort_unstable_by(by_distance);
        Ok(all
            .into_iter()
            .map(|(d2, index)| Neighbor { index, distance: d2.sqrt() })
            .collect())
    }
}

pub fn knn(index: &NeighborIndex, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
    index.knn(query, k)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightKind {
    #[default]
    UniformKnn,
    GaussianKernelKnn,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelBandwidth {
    /// Median of the query's `k` neighbor distances.
    #[default]
    MedianDistance,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightScheme {
    pub kind: WeightKind,
    pub k: usize,
    #[serde(default)]
    pub bandwidth: KernelBandwidth,
}

impl WeightScheme {
    pub fn uniform(k: usize) -> Self {
        Self { kind: WeightKind::UniformKnn, k, bandwidth: KernelBandwidth::MedianDistance }
    }

    pub fn gaussian(k: usize, bandwidth: KernelBandwidth) -> Self {
        Self { kind: WeightKind::GaussianKernelKnn, k, bandwidth }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("NCP neighbor count k must be positive".into()));
        }
        if let KernelBandwidth::Fixed(b) = self.bandwidth {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::Config(format!("kernel bandwidth must be positive, got {b}")));
            }
        }
        Ok(())
    }

    fn resolve_bandwidth(&self, neighbors: &[Neighbor]) -> Result<f64> {
        match self.bandwidth {
            KernelBandwidth::Fixed(b) if b.is_finite() && b > 0.0 => Ok(b),
            KernelBandwidth::Fixed(b) => Err(Error::Config(format!("unresolved kernel bandwidth {b}"))),
            KernelBandwidth::MedianDistance => {
                let mut d: Vec<f64> = neighbors.iter().map(|n| n.distance).collect();
                d.sort_by(f64::total_cmp);
                let m = d.len();
                let median = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
                Ok(median.max(MEDIAN_BANDWIDTH_FLOOR))
            }
        }
    }
}

/// Non-negative similarity weights for a query's neighbors.
pub fn neighbor_weights(neighbors: &[Neighbor], scheme: &WeightScheme) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    match scheme.kind {
        WeightKind::UniformKnn => Ok(vec![1.0; neighbors.len()]),
        WeightKind::GaussianKernelKnn => {
            let b = scheme.resolve_bandwidth(neighbors)?;
            Ok(neighbors
                .iter()
                .map(|n| (-(n.distance * n.distance) / (2.0 * b * b)).exp().max(WEIGHT_FLOOR))
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn index_1d(values: &[f64]) -> NeighborIndex {
        NeighborIndex::new(Points::from_flat(1, values.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn self_query() {
        let idx = index_1d(&[3.0, -1.0, 7.5]);
        assert_eq!(idx.knn(&[-1.0], 1).unwrap(), vec![Neighbor { index: 1, distance: 0.0 }]);
    }

    #[test]
    fn hand_computed_1d() {
        let idx = index_1d(&[0.0, 1.0, 4.0]);
        let nn = idx.knn(&[0.6], 2).unwrap();
        assert_eq!(nn.iter().map(|n| n.index).collect::<Vec<_>>(), vec![1, 0]);
        assert!((nn[0].distance - 0.4).abs() < 1e-15);
        assert!((nn[1].distance - 0.6).abs() < 1e-15);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let idx = index_1d(&[5.0, 1.0, -1.0, 1.0]);
        let nn = idx.knn(&[0.0], 3).unwrap();
        assert_eq!(nn.iter().map(|n| n.index).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn errors() {
        let idx = index_1d(&[0.0, 1.0]);
        assert!(matches!(idx.knn(&[0.0], 3), Err(Error::InvalidK { k: 3, n: 2 })));
        assert!(matches!(idx.knn(&[0.0], 0), Err(Error::InvalidK { .. })));
        assert!(matches!(idx.knn(&[0.0, 1.0], 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn weight_examples() {
        let nn = [Neighbor { index: 0, distance: 0.0 }, Neighbor { index: 1, distance: 2.0 }];
        assert_eq!(neighbor_weights(&nn, &WeightScheme::uniform(2)).unwrap(), vec![1.0, 1.0]);
        let w = neighbor_weights(&nn, &WeightScheme::gaussian(2, KernelBandwidth::Fixed(2.0))).unwrap();
        assert_eq!(w[0], 1.0);
        assert!((w[1] - (-0.5f64).exp()).abs() < 1e-15);
        let zeros = [Neighbor { index: 0, distance: 0.0 }, Neighbor { index: 3, distance: 0.0 }];
        let w = neighbor_weights(&zeros, &WeightScheme::gaussian(2, KernelBandwidth::MedianDistance)).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
    }

    #[test]
    fn unresolved_bandwidth_is_config_error() {
        let nn = [Neighbor { index: 0, distance: 1.0 }];
        let scheme = WeightScheme::gaussian(1, KernelBandwidth::Fixed(0.0));
        assert!(matches!(neighbor_weights(&nn, &scheme), Err(Error::Config(_))));
        assert!(scheme.validate().is_err());
    }

    #[test]
    fn weights_never_vanish() {
        let nn = [Neighbor { index: 0, distance: 1e3 }];
        let w = neighbor_weights(&nn, &WeightScheme::gaussian(1, KernelBandwidth::Fixed(1e-3))).unwrap();
        assert_eq!(w, vec![WEIGHT_FLOOR]);
    }

    #[test]
    fn matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..300 {
            let n = rng.gen_range(1..=200);
            let d = rng.gen_range(1..=5);
            // coarse grid produces plenty of exact ties
            let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-4..=4) as f64 * 0.5).collect();
            let points = Points::from_flat(d, data).unwrap();
            let query: Vec<f64> = (0..d).map(|_| rng.gen_range(-4..=4) as f64 * 0.5).collect();
            let k = rng.gen_range(1..=n);
            let mut expected: Vec<(f64, usize)> =
                points.rows().enumerate().map(|(i, p)| (squared_distance(p, &query), i)).collect();
            expected.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let got = NeighborIndex::new(points).unwrap().knn(&query, k).unwrap();
            let got: Vec<usize> = got.iter().map(|n| n.index).collect();
            let want: Vec<usize> = expected[..k].iter().map(|e| e.1).collect();
            assert_eq!(got, want);
        }
    }

    proptest! {
        #[test]
        fn gaussian_weights_non_increasing(mut dists in prop::collection::vec(0.0f64..10.0, 1..20)) {
            dists.sort_by(f64::total_cmp);
            let nn: Vec<Neighbor> = dists.iter().enumerate().map(|(index, &distance)| Neighbor { index, distance }).collect();
            let w = neighbor_weights(&nn, &WeightScheme::gaussian(nn.len(), KernelBandwidth::MedianDistance)).unwrap();
            prop_assert!(w.windows(2).all(|p| p[0] >= p[1]));
        }

        #[test]
        fn translation_invariance(
            data in prop::collection::vec(-8i32..8, 2..60),
            shift in prop::collection::vec(-100i32..100, 2),
            q in prop::collection::vec(-8i32..8, 2),
            k in 1usize..10,
        ) {
            // integer coordinates keep the translated distances exact
            let n = data.len() / 2;
            prop_assume!(n >= 1);
            let k = k.min(n);
            let base: Vec<f64> = data[..2 * n].iter().map(|&v| v as f64).collect();
            let moved: Vec<f64> = base.chunks(2).flat_map(|p| [p[0] + shift[0] as f64, p[1] + shift[1] as f64]).collect();
            let query: Vec<f64> = q.iter().map(|&v| v as f64).collect();
            let moved_query = vec![query[0] + shift[0] as f64, query[1] + shift[1] as f64];
            let a = NeighborIndex::new(Points::from_flat(2, base).unwrap()).unwrap().knn(&query, k).unwrap();
            let b = NeighborIndex::new(Points::from_flat(2, moved).unwrap()).unwrap().knn(&moved_query, k).unwrap();
            prop_assert_eq!(&a, &b);
            let scheme = WeightScheme::gaussian(k, KernelBandwidth::MedianDistance);
            prop_assert_eq!(neighbor_weights(&a, &scheme).unwrap(), neighbor_weights(&b, &scheme).unwrap());
        }
    }
}
