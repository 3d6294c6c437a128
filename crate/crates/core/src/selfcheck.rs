//! The verification run behind `markerq selfcheck`: gradient checks plus
//! the brute-force oracles for features, splits and F1.

use rand::Rng as _;
use serde::Serialize;

use crate::error::Result;
use crate::features::{cumulative_hist, hist_threshold, moments, percentiles};
use crate::forest::best_split;
use crate::metrics::f1_from_masks;
use crate::oracle;
use crate::rng::StreamKey;

/// Largest accepted relative finite-difference error.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: impl Into<String>, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

/// Worst gradient error per case over `seeds` seeds.
pub fn gradient_checks(seeds: u64) -> Result<Vec<Check>> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..seeds {
        for (i, case) in oracle::gradient_suite(seed)?.into_iter().enumerate() {
            if worst.len() <= i {
                worst.push((case.name, 0.0));
            }
            worst[i].1 = worst[i].1.max(case.max_rel_error);
        }
    }
    Ok(worst
        .into_iter()
        .map(|(name, e)| {
            check(
                format!("gradient/{name}"),
                e < GRADIENT_TOLERANCE,
                format!("max relative error {e:.2e} over {seeds} seeds"),
            )
        })
        .collect())
}

/// Percentiles, histogram and moments against the naive references on
/// `maps` random maps.
pub fn feature_oracle(maps: usize, seed: u64) -> Result<Check> {
    let mut rng = StreamKey::new(seed).named("feature-oracle").rng();
    let mut worst: f64 = 0.0;
    let mut hist_ok = true;
    for _ in 0..maps {
        let n = rng.random_range(1..400);
        let scale = rng.random_range(0.1..1.0);
        let map: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * scale).collect();
        for (i, v) in percentiles(&map)?.iter().enumerate() {
            worst = worst.max((v - oracle::naive_percentile(&map, (i + 1) as f64)).abs());
        }
        for (i, v) in cumulative_hist(&map)?.iter().enumerate() {
            hist_ok &= *v == oracle::naive_fraction_at_most(&map, hist_threshold(i + 1));
        }
        for (a, b) in moments(&map)?.iter().zip(oracle::naive_moments(&map)) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    let constant = moments(&[0.37; 50])? == [0.37, 0.0, 0.0, 0.0] && percentiles(&[0.37; 50])?.iter().all(|&v| v == 0.37);
    Ok(check(
        "oracle/features",
        worst <= ORACLE_TOLERANCE && hist_ok && constant,
        format!("{maps} maps, worst deviation {worst:.1e}, histograms exact {hist_ok}, constant map exact {constant}"),
    ))
}

/// `best_split` against exhaustive search on instances of at most 8 rows
/// and 3 features.
pub fn split_oracle(instances: usize, seed: u64) -> Check {
    let mut rng = StreamKey::new(seed).named("split-oracle").rng();
    let mut mismatches = 0;
    for _ in 0..instances {
        let n = rng.random_range(2..=8);
        let p = rng.random_range(1..=3);
        let levels = rng.random_range(2..=6);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.random_range(0..levels) as f64 / (levels - 1) as f64).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let rows: Vec<usize> = (0..n).collect();
        let feats: Vec<usize> = (0..p).collect();
        if best_split(&x, &y, &rows, &feats, 1) != oracle::brute_force_split(&x, &y) {
            mismatches += 1;
        }
    }
    check(
        "oracle/best_split",
        mismatches == 0,
        format!("{mismatches} of {instances} instances differ"),
    )
}

/// F1 against pixel counting on random 16×16 mask pairs.
pub fn f1_oracle(pairs: usize, seed: u64) -> Result<Check> {
    let mut rng = StreamKey::new(seed).named("f1-oracle").rng();
    let mut mismatches = 0;
    for _ in 0..pairs {
        let density = rng.random::<f64>();
        let a: Vec<bool> = (0..256).map(|_| rng.random::<f64>() < density).collect();
        let b: Vec<bool> = (0..256).map(|_| rng.random::<f64>() < density).collect();
        if f1_from_masks(&a, &b)? != oracle::naive_f1(&a, &b) {
            mismatches += 1;
        }
    }
    let mut y = vec![false; 10];
    let mut p = vec![false; 10];
    y[..4].iter_mut().for_each(|v| *v = true);
    p[1..6].iter_mut().for_each(|v| *v = true);
    let worked = f1_from_masks(&y, &p)? == 6.0 / 9.0;
    Ok(check(
        "oracle/f1",
        mismatches == 0 && worked,
        format!("{mismatches} of {pairs} pairs differ, worked example {worked}"),
    ))
}

/// Everything, with the sizes used by the command line.
pub fn run_all(seeds: u64) -> Result<Vec<Check>> {
    let mut out = gradient_checks(seeds)?;
    out.push(feature_oracle(100, 0)?);
    out.push(split_oracle(1000, 0));
    out.push(f1_oracle(1000, 0)?);
    Ok(out)
}
