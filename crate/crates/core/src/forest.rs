//! Regression random forest with exhaustive midpoint splits.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamKey;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features tried per node; `None` means `max(1, p / 3)`.
    pub mtry: Option<usize>,
    pub min_samples_split: usize,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    /// Draw `n` rows with replacement per tree. Disabling it is meant for
    /// small deterministic tests.
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 128,
            mtry: None,
            min_samples_split: 2,
            min_leaf: 1,
            max_depth: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn mtry_for(&self, p: usize) -> usize {
        self.mtry.unwrap_or((p / 3).max(1)).clamp(1, p.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "snake_case")]
pub enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

/// Best (feature, midpoint threshold) over `features` for the rows `rows`,
/// maximizing the reduction in squared error. Among equal scores the first
/// feature in `features` order, then the lowest threshold, wins. `None` when
/// no split reduces the error.
pub fn best_split(x: &[Vec<f64>], y: &[f64], rows: &[usize], features: &[usize], min_leaf: usize) -> Option<(usize, f64)> {
    let n = rows.len();
    if n < 2 {
        return None;
    }
    let total: f64 = rows.iter().map(|&r| y[r]).sum();
    let sum_sq: f64 = rows.iter().map(|&r| y[r] * y[r]).sum();
    let base = total * total / n as f64;
    let parent_sse = sum_sq - base;
    let min_leaf = min_leaf.max(1);
    let mut best: Option<(usize, f64, f64)> = None;
    let mut order: Vec<usize> = rows.to_vec();
    for &f in features {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
        let mut left = 0.0;
        for i in 0..n - 1 {
            left += y[order[i]];
            let (a, b) = (x[order[i]][f], x[order[i + 1]][f]);
            let nl = i + 1;
            if a == b || nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let right = total - left;
            let score = left * left / nl as f64 + right * right / (n - nl) as f64;
            let better = match best {
                None => true,
                Some((_, _, s)) => score > s + 1e-12 * s.abs(),
            };
            if better {
                let mut thr = (a + b) / 2.0;
                if !thr.is_finite() {
                    thr = a + (b - a) / 2.0;
                }
                if thr >= b {
                    thr = a;
                }
                best = Some((f, thr, score));
            }
        }
    }
    let (f, thr, score) = best?;
    let gain = score - base;
    (gain > 0.0 && gain > 1e-12 * parent_sse.abs()).then_some((f, thr))
}

fn leaf_value(y: &[f64], rows: &[usize]) -> f64 {
    let first = y[rows[0]];
    if rows.iter().all(|&r| y[r] == first) {
        return first;
    }
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &r in rows {
        lo = lo.min(y[r]);
        hi = hi.max(y[r]);
        sum += y[r];
    }
    (sum / rows.len() as f64).clamp(lo, hi)
}

fn grow_tree(x: &[Vec<f64>], y: &[f64], params: &ForestParams, key: StreamKey) -> Tree {
    let n = y.len();
    let p = x[0].len();
    let mtry = params.mtry_for(p);
    let mut rng = key.rng();
    let rows: Vec<usize> = if params.bootstrap {
        (0..n).map(|_| rng.random_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut stack = vec![(0usize, rows, 0usize)];
    while let Some((slot, rows, depth)) = stack.pop() {
        let first = y[rows[0]];
        let pure = rows.iter().all(|&r| y[r] == first);
        let deep = params.max_depth.is_some_and(|d| depth >= d);
        let split = if pure || deep || rows.len() < params.min_samples_split.max(2) {
            None
        } else {
            let mut feats: Vec<usize> = sample(&mut rng, p, mtry).into_vec();
            feats.sort_unstable();
            best_split(x, y, &rows, &feats, params.min_leaf)
        };
        match split {
            None => nodes[slot] = Node::Leaf { value: leaf_value(y, &rows) },
            Some((feature, threshold)) => {
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[i][feature] <= threshold);
                let left = nodes.len();
                nodes.push(Node::Leaf { value: 0.0 });
                let right = nodes.len();
                nodes.push(Node::Leaf { value: 0.0 });
                nodes[slot] = Node::Split { feature, threshold, left, right };
                stack.push((right, r, depth + 1));
                stack.push((left, l, depth + 1));
            }
        }
    }
    Tree { nodes }
}

impl Forest {
    /// Trees grow in parallel; tree `t` draws from substream `t` of `seed`.
    pub fn fit(x: &[Vec<f64>], y: &[f64], params: &ForestParams) -> Result<Forest> {
        if y.len() < 2 || x.len() != y.len() {
            return Err(Error::arg(format!("need n >= 2 matching rows, got {} x / {} y", x.len(), y.len())));
        }
        if params.n_trees == 0 {
            return Err(Error::config("n_trees must be at least 1"));
        }
        let p = x[0].len();
        if p == 0 || x.iter().any(|r| r.len() != p) {
            return Err(Error::shape("feature rows must share one nonzero length"));
        }
        if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forest training data".into()));
        }
        let key = StreamKey::new(params.seed).named("forest");
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| grow_tree(x, y, params, key.child(t as u64)))
            .collect();
        Ok(Forest { n_features: p, trees })
    }

    /// Mean of the per-tree predictions, summed in tree order.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::shape(format!(
                "forest expects {} features, got {}",
                self.n_features,
                x.len()
            )));
        }
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        Ok(sum / self.trees.len() as f64)
    }

    pub fn predict_many(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        rows.par_iter().map(|r| self.predict(r)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            fs::create_dir_all(d)?;
        }
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Forest> {
        let bytes = fs::read(path).map_err(|e| Error::MissingInput {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn single(seed: u64) -> ForestParams {
        ForestParams {
            n_trees: 1,
            mtry: Some(1),
            bootstrap: false,
            seed,
            ..ForestParams::default()
        }
    }

    #[test]
    fn constant_targets_give_single_leaves() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * 7 % 3) as f64]).collect();
        let y = vec![0.42; 10];
        let f = Forest::fit(&x, &y, &ForestParams { n_trees: 8, ..Default::default() }).unwrap();
        assert!(f.trees.iter().all(|t| t.nodes.len() == 1));
        assert_eq!(f.predict(&[3.0, 1.0]).unwrap(), 0.42);
    }

    #[test]
    fn binary_feature_splits_at_half() {
        let x = vec![vec![0.0], vec![1.0], vec![0.0], vec![1.0]];
        let y = vec![0.0, 1.0, 0.0, 1.0];
        let f = Forest::fit(&x, &y, &single(0)).unwrap();
        match f.trees[0].nodes[0] {
            Node::Split { feature, threshold, .. } => assert_eq!((feature, threshold), (0, 0.5)),
            ref n => panic!("{n:?}"),
        }
        for (r, t) in x.iter().zip(&y) {
            assert_eq!(f.predict(r).unwrap(), *t);
        }
    }

    #[test]
    fn best_split_matches_brute_force() {
        let mut rng = StreamKey::new(5).rng();
        for _ in 0..300 {
            let n = rng.random_range(2..=8);
            let p = rng.random_range(1..=3);
            let x: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..p).map(|_| (rng.random_range(0..5) as f64) / 4.0).collect())
                .collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let rows: Vec<usize> = (0..n).collect();
            let feats: Vec<usize> = (0..p).collect();
            assert_eq!(best_split(&x, &y, &rows, &feats, 1), oracle::brute_force_split(&x, &y), "{x:?} {y:?}");
        }
    }

    #[test]
    fn unpruned_tree_reproduces_training_targets() {
        let mut rng = StreamKey::new(6).rng();
        let x: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let y: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let params = ForestParams { mtry: Some(4), ..single(1) };
        let f = Forest::fit(&x, &y, &params).unwrap();
        for (r, t) in x.iter().zip(&y) {
            assert_eq!(f.predict(r).unwrap(), *t);
        }
    }

    #[test]
    fn forest_is_mean_of_trees_bounded_and_persisted() {
        let mut rng = StreamKey::new(7).rng();
        let x: Vec<Vec<f64>> = (0..60).map(|_| (0..6).map(|_| rng.random::<f64>()).collect()).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0] * 2.0 - r[3] + 0.1 * r[5]).collect();
        let f = Forest::fit(&x, &y, &ForestParams { n_trees: 16, seed: 3, ..Default::default() }).unwrap();
        let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        for _ in 0..20 {
            let q: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 3.0 - 1.0).collect();
            let mean = f.trees.iter().map(|t| t.predict(&q)).sum::<f64>() / 16.0;
            let got = f.predict(&q).unwrap();
            assert_eq!(got, mean);
            assert!((lo..=hi).contains(&got));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rf.json");
        f.save(&path).unwrap();
        let back = Forest::load(&path).unwrap();
        assert_eq!(back, f);
        assert!(f.predict(&[0.0; 5]).is_err());
    }

    #[test]
    fn more_trees_fit_no_worse() {
        let mut rng = StreamKey::new(8).rng();
        let x: Vec<Vec<f64>> = (0..80).map(|_| (0..5).map(|_| rng.random::<f64>()).collect()).collect();
        let y: Vec<f64> = x.iter().map(|r| (r[1] * 6.0).sin() + r[2]).collect();
        let rmse = |trees| {
            let f = Forest::fit(&x, &y, &ForestParams { n_trees: trees, seed: 1, ..Default::default() }).unwrap();
            let se: f64 = x.iter().zip(&y).map(|(r, t)| (f.predict(r).unwrap() - t).powi(2)).sum();
            (se / 80.0).sqrt()
        };
        assert!(rmse(128) <= rmse(1));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(Forest::fit(&[vec![1.0]], &[1.0], &ForestParams::default()).is_err());
        assert!(Forest::fit(&[vec![1.0], vec![f64::NAN]], &[1.0, 2.0], &ForestParams::default()).is_err());
        assert!(Forest::fit(&[vec![1.0], vec![2.0]], &[1.0, 2.0], &ForestParams { n_trees: 0, ..Default::default() }).is_err());
    }
}
