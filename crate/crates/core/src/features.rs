//! Fixed-length distribution features of uncertainty maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncertainty::UncertaintyBundle;

pub const PERCENTILES: usize = 99;
pub const HIST_BINS: usize = 13;
pub const MOMENTS: usize = 4;
/// Features contributed by one map.
pub const MAP_BLOCK: usize = PERCENTILES + HIST_BINS + MOMENTS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    EOnly,
    AOnly,
    Both,
}

impl FeatureMode {
    pub const ALL: [FeatureMode; 3] = [FeatureMode::EOnly, FeatureMode::AOnly, FeatureMode::Both];

    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::EOnly => "e_only",
            FeatureMode::AOnly => "a_only",
            FeatureMode::Both => "both",
        }
    }

    pub fn uses_e(self) -> bool {
        self != FeatureMode::AOnly
    }

    pub fn uses_a(self) -> bool {
        self != FeatureMode::EOnly
    }

    pub fn len(self, markers: usize) -> usize {
        let maps = self.uses_e() as usize + self.uses_a() as usize;
        maps * MAP_BLOCK + (1 << markers) - 1
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FeatureMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown feature mode {s:?}")))
    }
}

fn check(map: &[f64]) -> Result<()> {
    if map.is_empty() {
        return Err(Error::arg("empty uncertainty map"));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("uncertainty map".into()));
    }
    Ok(())
}

fn sorted(map: &[f64]) -> Vec<f64> {
    let mut s = map.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn percentiles_sorted(s: &[f64]) -> Vec<f64> {
    let last = (s.len() - 1) as f64;
    (1..=PERCENTILES)
        .map(|p| {
            let rank = p as f64 / 100.0 * last;
            let lo = rank.floor() as usize;
            let hi = rank.ceil() as usize;
            s[lo] + (rank - lo as f64) * (s[hi] - s[lo])
        })
        .collect()
}

/// Threshold of cumulative bin `i` (1-based): `0.05 * i`.
pub fn hist_threshold(i: usize) -> f64 {
    0.05 * i as f64
}

fn hist_sorted(s: &[f64]) -> Vec<f64> {
    let n = s.len() as f64;
    (1..=HIST_BINS)
        .map(|i| {
            let t = hist_threshold(i);
            s.partition_point(|&v| v <= t) as f64 / n
        })
        .collect()
}

/// 1st..99th percentiles, linear interpolation at rank `(p/100)(n-1)`.
pub fn percentiles(map: &[f64]) -> Result<Vec<f64>> {
    check(map)?;
    Ok(percentiles_sorted(&sorted(map)))
}

/// Fraction of pixels `<= 0.05 i` for `i = 1..=13`.
pub fn cumulative_hist(map: &[f64]) -> Result<Vec<f64>> {
    check(map)?;
    Ok(hist_sorted(&sorted(map)))
}

/// Mean, population variance, skewness and (non-excess) kurtosis. The last
/// two are 0 when the variance is below 1e-24.
pub fn moments(map: &[f64]) -> Result<[f64; MOMENTS]> {
    check(map)?;
    if map.iter().all(|&v| v == map[0]) {
        return Ok([map[0], 0.0, 0.0, 0.0]);
    }
    let n = map.len() as f64;
    let mean = map.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in map {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    if m2 < 1e-24 {
        return Ok([mean, m2, 0.0, 0.0]);
    }
    Ok([mean, m2, m3 / m2.powf(1.5), m4 / (m2 * m2)])
}

/// Percentiles, cumulative histogram and moments of one map.
pub fn map_block(map: &[f64]) -> Result<Vec<f64>> {
    check(map)?;
    let s = sorted(map);
    let mut out = percentiles_sorted(&s);
    out.extend(hist_sorted(&s));
    out.extend(moments(map)?);
    Ok(out)
}

/// `[u_e block][u_a block][combination one-hot]`, absent blocks omitted.
pub fn assemble_features(bundle: &UncertaintyBundle, mode: FeatureMode, markers: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(mode.len(markers));
    if mode.uses_e() {
        out.extend(map_block(bundle.u_e.data())?);
    }
    if mode.uses_a() {
        let ua = bundle
            .u_a
            .as_ref()
            .ok_or_else(|| Error::arg(format!("feature mode {} needs u_a", mode.name())))?;
        out.extend(map_block(ua.data())?);
    }
    let combos = (1usize << markers) - 1;
    let a = bundle.availability;
    if a.is_empty() || a.highest_marker() > markers {
        return Err(Error::arg(format!("availability {a} invalid for {markers} markers")));
    }
    let mut onehot = vec![0.0; combos];
    onehot[a.combination_index()] = 1.0;
    out.extend(onehot);
    Ok(out)
}

fn block_names(prefix: &str) -> Vec<String> {
    let mut v: Vec<String> = (1..=PERCENTILES).map(|p| format!("{prefix}_p{p:02}")).collect();
    v.extend((1..=HIST_BINS).map(|i| format!("{prefix}_ch{i:02}")));
    v.extend((1..=MOMENTS).map(|i| format!("{prefix}_m{i}")));
    v
}

/// Column names in feature order.
pub fn feature_names(mode: FeatureMode, markers: usize) -> Vec<String> {
    let mut v = Vec::with_capacity(mode.len(markers));
    if mode.uses_e() {
        v.extend(block_names("u_e"));
    }
    if mode.uses_a() {
        v.extend(block_names("u_a"));
    }
    v.extend((0..(1usize << markers) - 1).map(|i| format!("combo_{i:02}")));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use crate::oracle;
    use crate::segnet::MarkerSet;
    use proptest::prelude::*;

    #[test]
    fn percentile_examples() {
        assert!(percentiles(&[0.3; 10]).unwrap().iter().all(|&v| v == 0.3));
        assert_eq!(percentiles(&[1.0, 0.0]).unwrap()[49], 0.5);
        let ramp: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        for (i, v) in percentiles(&ramp).unwrap().iter().enumerate() {
            assert!((v - (i + 1) as f64 / 100.0).abs() < 1e-15, "{i} {v}");
        }
        assert!(percentiles(&[]).is_err());
    }

    #[test]
    fn histogram_examples() {
        assert_eq!(cumulative_hist(&[0.0; 7]).unwrap(), vec![1.0; 13]);
        assert_eq!(cumulative_hist(&[1.0; 7]).unwrap(), vec![0.0; 13]);
        let ramp: Vec<f64> = (0..10_000).map(|i| i as f64 / 9_999.0).collect();
        for (i, v) in cumulative_hist(&ramp).unwrap().iter().enumerate() {
            assert!((v - hist_threshold(i + 1)).abs() < 0.01);
        }
        assert!(cumulative_hist(&[]).is_err());
    }

    #[test]
    fn moment_examples() {
        assert_eq!(moments(&[0.7; 9]).unwrap(), [0.7, 0.0, 0.0, 0.0]);
        let half: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
        let m = moments(&half).unwrap();
        assert_eq!(m, [0.5, 0.25, 0.0, 1.0]);
        let mut rng = crate::StreamKey::new(1).rng();
        let normal: Vec<f64> = (0..1_000_000)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let m = moments(&normal).unwrap();
        for (got, want) in m.iter().zip([0.0, 1.0, 0.0, 3.0]) {
            assert!((got - want).abs() < 0.05, "{m:?}");
        }
    }

    #[test]
    fn features_match_brute_force_oracles() {
        let mut rng = crate::StreamKey::new(2).rng();
        for _ in 0..20 {
            let n = rng.random_range(1..300);
            let map: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 0.7).collect();
            for (p, v) in percentiles(&map).unwrap().iter().enumerate() {
                assert!((v - oracle::naive_percentile(&map, (p + 1) as f64)).abs() <= 1e-12);
            }
            for (i, v) in cumulative_hist(&map).unwrap().iter().enumerate() {
                assert_eq!(*v, oracle::naive_fraction_at_most(&map, hist_threshold(i + 1)));
            }
            for (a, b) in moments(&map).unwrap().iter().zip(oracle::naive_moments(&map)) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    fn bundle(avail: MarkerSet, ua: bool) -> UncertaintyBundle {
        let t = Tensor::new(vec![4, 4], (0..16).map(|i| i as f64 / 40.0).collect()).unwrap();
        UncertaintyBundle {
            patch_id: "x".into(),
            availability: avail,
            samples: 3,
            mean_prob: t.clone(),
            u_e: t.clone(),
            u_a: ua.then_some(t),
        }
    }

    #[test]
    fn assembled_lengths_and_onehot() {
        let b = bundle(MarkerSet::from_markers(&[1]).unwrap(), true);
        let both = assemble_features(&b, FeatureMode::Both, 5).unwrap();
        assert_eq!(both.len(), 263);
        assert_eq!(both[232], 1.0);
        assert_eq!(both[232..].iter().sum::<f64>(), 1.0);
        assert_eq!(assemble_features(&b, FeatureMode::EOnly, 5).unwrap().len(), 147);
        assert_eq!(assemble_features(&b, FeatureMode::AOnly, 5).unwrap().len(), 147);
        let no_a = bundle(MarkerSet::all(5), false);
        assert!(assemble_features(&no_a, FeatureMode::Both, 5).is_err());
        let v = assemble_features(&no_a, FeatureMode::EOnly, 5).unwrap();
        assert_eq!(v[146], 1.0);
        assert_eq!(feature_names(FeatureMode::Both, 5).len(), 263);
        assert_eq!(feature_names(FeatureMode::EOnly, 5)[0], "u_e_p01");
    }

    proptest! {
        #[test]
        fn block_is_ordered_and_permutation_invariant(
            mut map in proptest::collection::vec(0.0f64..1.0, 1..64),
            seed in 0u64..1000,
        ) {
            let f = map_block(&map).unwrap();
            prop_assert!(f[..PERCENTILES].windows(2).all(|w| w[0] <= w[1]));
            let h = &f[PERCENTILES..PERCENTILES + HIST_BINS];
            prop_assert!(h.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(h.iter().all(|v| (0.0..=1.0).contains(v)));
            use rand::seq::SliceRandom;
            map.shuffle(&mut crate::StreamKey::new(seed).rng());
            let g = map_block(&map).unwrap();
            for (a, b) in f.iter().zip(&g) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}
