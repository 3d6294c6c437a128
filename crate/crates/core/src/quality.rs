//! Quality regression: turning uncertainty maps of every marker
//! combination into (features, F1) examples, and fitting the forest and the
//! small CNN baseline on them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::features::{assemble_features, map_block, FeatureMode};
use crate::forest::{Forest, ForestParams};
use crate::metrics::{f1_from_foreground, mean_sd, r2, rmse};
use crate::nn::checkpoint::{round_to_f32, Container};
use crate::nn::{AdamState, Graph, ParamId, ParamSet, Tensor, Var};
use crate::rng::StreamKey;
use crate::segnet::{MarkerSet, SegModel};
use crate::synth::{enumerate_combinations, MarkerPatch};
use crate::uncertainty::{combined_predict, UncertaintyBundle};

#[derive(Clone, Debug, PartialEq)]
pub struct QualityExample {
    pub patch_id: String,
    pub availability: MarkerSet,
    pub fold: usize,
    /// F1 of the MC-averaged prediction against the mask.
    pub target: f64,
    /// `[2, H, W]`: u_e, then u_a (values rounded to `f32`).
    pub maps: Tensor,
    e_block: Vec<f64>,
    a_block: Vec<f64>,
}

impl QualityExample {
    pub fn new(patch_id: String, availability: MarkerSet, fold: usize, target: f64, mut maps: Tensor) -> Result<Self> {
        if maps.rank() != 3 || maps.shape()[0] != 2 {
            return Err(Error::shape(format!("quality maps {:?}", maps.shape())));
        }
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::arg(format!("target {target} outside [0, 1]")));
        }
        round_to_f32(&mut maps);
        let e_block = map_block(maps.plane(0))?;
        let a_block = map_block(maps.plane(1))?;
        Ok(QualityExample {
            patch_id,
            availability,
            fold,
            target,
            maps,
            e_block,
            a_block,
        })
    }

    /// Feature vector of `mode`, in the order of [`assemble_features`].
    pub fn features(&self, mode: FeatureMode, markers: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(mode.len(markers));
        if mode.uses_e() {
            v.extend_from_slice(&self.e_block);
        }
        if mode.uses_a() {
            v.extend_from_slice(&self.a_block);
        }
        let mut onehot = vec![0.0; (1 << markers) - 1];
        onehot[self.availability.combination_index()] = 1.0;
        v.extend(onehot);
        v
    }

    pub fn bundle(&self) -> UncertaintyBundle {
        let [_, h, w] = self.maps.shape()[..] else { unreachable!() };
        let plane = |c: usize| Tensor::new(vec![h, w], self.maps.plane(c).to_vec()).expect("plane shape");
        UncertaintyBundle {
            patch_id: self.patch_id.clone(),
            availability: self.availability,
            samples: 0,
            mean_prob: Tensor::zeros(&[h, w]),
            u_e: plane(0),
            u_a: Some(plane(1)),
        }
    }
}

/// Every patch × every marker combination: mask the missing channels, run
/// the combined model with `samples` MC passes, and record the F1 of the
/// averaged prediction together with both uncertainty maps.
pub fn build_quality_dataset(
    model: &SegModel,
    patches: &[&MarkerPatch],
    fold: usize,
    samples: usize,
    key: StreamKey,
) -> Result<Vec<QualityExample>> {
    if !(model.variant.dropout_p().is_some() && model.variant.has_variance_head()) {
        return Err(Error::arg("quality examples need the combined model"));
    }
    let k = model.cfg.markers;
    let full = MarkerSet::all(k);
    if let Some(p) = patches.iter().find(|p| p.availability != full) {
        return Err(Error::arg(format!("patch {} lacks full channels ({})", p.id, p.availability)));
    }
    let combos = enumerate_combinations(k)?;
    let jobs: Vec<(&MarkerPatch, MarkerSet)> = patches
        .iter()
        .flat_map(|&p| combos.iter().map(move |&c| (p, c)))
        .collect();
    jobs.par_iter()
        .map(|&(p, c)| {
            let x = p.masked(c);
            let b = combined_predict(model, &p.id, &x, c, samples, key.named(&p.id).child(c.bits() as u64))?;
            let q = f1_from_foreground(&p.mask, b.mean_prob.data())?;
            let ua = b.u_a.expect("combined model yields u_a");
            let [h, w] = b.u_e.shape()[..] else { unreachable!() };
            let mut maps = b.u_e.into_data();
            maps.extend(ua.into_data());
            QualityExample::new(p.id.clone(), c, fold, q, Tensor::new(vec![2, h, w], maps)?)
        })
        .collect()
}

/// A persisted list of quality examples (maps plus metadata).
#[derive(Clone, Debug, PartialEq)]
pub struct QualitySet {
    pub markers: usize,
    pub examples: Vec<QualityExample>,
}

impl QualitySet {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta: Vec<_> = self
            .examples
            .iter()
            .map(|e| json!({"patch_id": e.patch_id, "availability": e.availability, "fold": e.fold, "target": e.target}))
            .collect();
        let mut c = Container::new(json!({"kind": "quality_set", "markers": self.markers, "examples": meta}));
        for (i, e) in self.examples.iter().enumerate() {
            c.push(format!("maps{i}"), e.maps.clone());
        }
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let bad = |why: String| Error::format(path, why);
        if c.meta["kind"] != "quality_set" {
            return Err(bad("not a quality set".into()));
        }
        let markers = c.meta["markers"].as_u64().ok_or_else(|| bad("markers".into()))? as usize;
        let metas = c.meta["examples"].as_array().ok_or_else(|| bad("examples".into()))?;
        if metas.len() != c.tensors.len() {
            return Err(bad("example count mismatch".into()));
        }
        let examples = metas
            .iter()
            .zip(c.tensors)
            .map(|(m, (_, maps))| {
                let id = m["patch_id"].as_str().ok_or_else(|| bad("patch_id".into()))?;
                let avail: MarkerSet = m["availability"].as_str().ok_or_else(|| bad("availability".into()))?.parse()?;
                let fold = m["fold"].as_u64().ok_or_else(|| bad("fold".into()))? as usize;
                let target = m["target"].as_f64().ok_or_else(|| bad("target".into()))?;
                QualityExample::new(id.into(), avail, fold, target, maps)
            })
            .collect::<Result<_>>()?;
        Ok(QualitySet { markers, examples })
    }
}

pub fn train_quality_rf(examples: &[QualityExample], mode: FeatureMode, markers: usize, params: &ForestParams) -> Result<Forest> {
    if examples.len() < 2 {
        return Err(Error::arg("need at least two quality examples"));
    }
    let x: Vec<Vec<f64>> = examples.iter().map(|e| e.features(mode, markers)).collect();
    let y: Vec<f64> = examples.iter().map(|e| e.target).collect();
    Forest::fit(&x, &y, params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QNetConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Maps are resized (nearest neighbour) to this square extent.
    pub input_extent: usize,
}

impl Default for QNetConfig {
    fn default() -> Self {
        QNetConfig {
            epochs: 100,
            batch_size: 2,
            lr: 1e-3,
            input_extent: 64,
        }
    }
}

const QNET_CONVS: [usize; 5] = [4, 8, 16, 32, 64];
const QNET_HIDDEN: usize = 128;
const QNET_POOL: usize = 3;

/// C(4)-MP-C(8)-MP-C(16)-MP-C(32)-MP-C(64)-FC(128)-FC(1) on the stacked
/// (u_e, u_a) maps. ReLU follows every layer except the output.
#[derive(Clone, Debug)]
pub struct QNet {
    pub input_extent: usize,
    pub params: ParamSet,
    layers: Vec<(ParamId, ParamId)>,
}

fn pooled(mut e: usize, times: usize) -> usize {
    for _ in 0..times {
        e = if e <= QNET_POOL { 1 } else { (e - QNET_POOL).div_ceil(QNET_POOL) + 1 };
    }
    e
}

impl QNet {
    pub fn new(input_extent: usize, seed: u64) -> Result<Self> {
        if input_extent < QNET_POOL {
            return Err(Error::config("qnet input extent must be at least 3"));
        }
        let mut rng = StreamKey::new(seed).named("qnet-init").rng();
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let mut cin = 2;
        for (i, &c) in QNET_CONVS.iter().enumerate() {
            layers.push(params.add_layer(&format!("conv{i}"), &[c, cin, 3, 3], &mut rng));
            cin = c;
        }
        let e = pooled(input_extent, QNET_CONVS.len() - 1);
        layers.push(params.add_layer("fc0", &[QNET_HIDDEN, cin * e * e], &mut rng));
        layers.push(params.add_layer("fc1", &[1, QNET_HIDDEN], &mut rng));
        Ok(QNet {
            input_extent,
            params,
            layers,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Nearest-neighbour resize of `[2, H, W]` maps to the input extent,
    /// compressed with `ln(1 + u)` since `u_a` is unbounded.
    pub fn prepare(&self, maps: &Tensor) -> Result<Tensor> {
        let [c, h, w] = maps.shape()[..] else {
            return Err(Error::shape(format!("maps {:?}", maps.shape())));
        };
        if c != 2 {
            return Err(Error::shape("qnet expects two maps"));
        }
        let e = self.input_extent;
        let mut out = Vec::with_capacity(2 * e * e);
        for ch in 0..2 {
            let plane = maps.plane(ch);
            for y in 0..e {
                let sy = y * h / e;
                for x in 0..e {
                    out.push(plane[sy * w + x * w / e].ln_1p());
                }
            }
        }
        Tensor::new(vec![2, e, e], out)
    }

    fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        let mut h = x;
        let last_conv = QNET_CONVS.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = (g.param(&self.params, w), g.param(&self.params, b));
            if i <= last_conv {
                h = g.conv2d(h, wv, Some(bv))?;
                h = g.relu(h)?;
                if i < last_conv {
                    h = g.max_pool(h, QNET_POOL, QNET_POOL)?;
                }
            } else {
                h = g.dense(h, wv, Some(bv))?;
                if i + 1 < self.layers.len() {
                    h = g.relu(h)?;
                }
            }
        }
        Ok(h)
    }

    pub fn predict(&self, maps: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(self.prepare(maps)?, false);
        let y = self.forward(&mut g, x)?;
        g.value(y).item()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(json!({"model": "qnet", "input_extent": self.input_extent}));
        for (n, t) in self.params.iter() {
            c.push(n, t.clone());
        }
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        if c.meta["model"] != "qnet" {
            return Err(Error::format(path, "not a qnet checkpoint"));
        }
        let e = c.meta["input_extent"]
            .as_u64()
            .ok_or_else(|| Error::format(path, "input_extent"))? as usize;
        let mut net = QNet::new(e, 0)?;
        net.params.load_values(c.tensors)?;
        Ok(net)
    }
}

/// Minibatch Adam on squared error; examples are reshuffled every epoch.
/// Returns the network and the mean training loss of each epoch.
pub fn train_quality_cnn(examples: &[QualityExample], cfg: &QNetConfig, seed: u64) -> Result<(QNet, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::arg("no quality examples"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("qnet epochs, batch size and lr must be positive"));
    }
    let mut net = QNet::new(cfg.input_extent, seed)?;
    let inputs: Vec<Tensor> = examples.iter().map(|e| net.prepare(&e.maps)).collect::<Result<_>>()?;
    let key = StreamKey::new(seed).named("qnet-train");
    let mut adam = AdamState::new(cfg.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut key.child(epoch as u64).rng());
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let frozen = &net;
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = Graph::new();
                    let x = g.input(inputs[i].clone(), false);
                    let y = frozen.forward(&mut g, x)?;
                    let l = g.mse(y, &[examples[i].target])?;
                    let v = g.value(l).item()?;
                    Ok((v, g.backward(l)?))
                })
                .collect::<Result<_>>()
                .map_err(|e: Error| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("qnet epoch {epoch}: {m}")),
                    other => other,
                })?;
            net.params.zero_grad();
            for (v, grads) in &results {
                total += v;
                net.params.accumulate(grads, 1.0 / batch.len() as f64)?;
            }
            adam.step(&mut net.params)?;
        }
        let mean = total / examples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("qnet loss at epoch {epoch}")));
        }
        losses.push(mean);
    }
    Ok((net, losses))
}

/// A trained quality regressor.
#[derive(Clone, Debug)]
pub enum Regressor {
    Forest { mode: FeatureMode, markers: usize, forest: Forest },
    Cnn(QNet),
}

impl Regressor {
    pub fn name(&self) -> String {
        match self {
            Regressor::Forest { mode, .. } => format!("rf_{}", mode.name()),
            Regressor::Cnn(_) => "cnn".into(),
        }
    }

    pub fn predict(&self, e: &QualityExample) -> Result<f64> {
        match self {
            Regressor::Forest { mode, markers, forest } => forest.predict(&e.features(*mode, *markers)),
            Regressor::Cnn(net) => net.predict(&e.maps),
        }
    }

    /// Predictions for every example, in input order.
    pub fn predict_all(&self, examples: &[QualityExample]) -> Result<Vec<PredictionRecord>> {
        let name = self.name();
        examples
            .par_iter()
            .map(|e| {
                Ok(PredictionRecord {
                    patch_id: e.patch_id.clone(),
                    availability: e.availability,
                    fold: e.fold,
                    q_true: e.target,
                    q_pred: self.predict(e)?,
                    regressor: name.clone(),
                })
            })
            .collect()
    }
}

/// Features recomputed from the stored maps through [`assemble_features`].
pub fn features_of_bundle(e: &QualityExample, mode: FeatureMode, markers: usize) -> Result<Vec<f64>> {
    assemble_features(&e.bundle(), mode, markers)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub patch_id: String,
    pub availability: MarkerSet,
    pub fold: usize,
    pub q_true: f64,
    pub q_pred: f64,
    pub regressor: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComboStat {
    pub combination: MarkerSet,
    pub folds: usize,
    pub mean_pred: f64,
    pub sd_pred: f64,
    pub mean_true: f64,
    pub sd_true: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityEval {
    pub n: usize,
    pub rmse: f64,
    pub per_combination: Vec<ComboStat>,
    pub r2_of_means: f64,
}

/// RMSE over all records; per combination, the per-fold mean of q̂ and q
/// aggregated as mean and population SD over folds; R² between the
/// per-combination means.
pub fn evaluate_quality(records: &[PredictionRecord]) -> Result<QualityEval> {
    if records.is_empty() {
        return Err(Error::arg("no predictions to evaluate"));
    }
    let pred: Vec<f64> = records.iter().map(|r| r.q_pred).collect();
    let truth: Vec<f64> = records.iter().map(|r| r.q_true).collect();
    let mut groups: BTreeMap<MarkerSet, BTreeMap<usize, (f64, f64, usize)>> = BTreeMap::new();
    for r in records {
        let g = groups.entry(r.availability).or_default().entry(r.fold).or_insert((0.0, 0.0, 0));
        g.0 += r.q_pred;
        g.1 += r.q_true;
        g.2 += 1;
    }
    let per_combination: Vec<ComboStat> = groups
        .into_iter()
        .map(|(combination, folds)| {
            let p: Vec<f64> = folds.values().map(|(s, _, n)| s / *n as f64).collect();
            let t: Vec<f64> = folds.values().map(|(_, s, n)| s / *n as f64).collect();
            let (mean_pred, sd_pred) = mean_sd(&p);
            let (mean_true, sd_true) = mean_sd(&t);
            ComboStat {
                combination,
                folds: p.len(),
                mean_pred,
                sd_pred,
                mean_true,
                sd_true,
            }
        })
        .collect();
    let mp: Vec<f64> = per_combination.iter().map(|c| c.mean_pred).collect();
    let mt: Vec<f64> = per_combination.iter().map(|c| c.mean_true).collect();
    Ok(QualityEval {
        n: records.len(),
        rmse: rmse(&pred, &truth)?,
        r2_of_means: r2(&mp, &mt)?,
        per_combination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::{build_model, ArchConfig, Variant};
    use crate::synth::{generate_dataset, DatasetSpec, Split};

    fn example(i: usize, target: f64) -> QualityExample {
        let maps: Vec<f64> = (0..2 * 64).map(|j| ((i * 31 + j * 7) % 17) as f64 / 40.0).collect();
        let avail = MarkerSet::from_bits((i % 31 + 1) as u32);
        QualityExample::new(format!("p{i}"), avail, 0, target, Tensor::new(vec![2, 8, 8], maps).unwrap()).unwrap()
    }

    #[test]
    fn cached_features_equal_assembled_features() {
        let e = example(3, 0.4);
        for mode in FeatureMode::ALL {
            assert_eq!(e.features(mode, 5), features_of_bundle(&e, mode, 5).unwrap());
        }
        assert_eq!(e.features(FeatureMode::Both, 5).len(), 263);
    }

    #[test]
    fn constant_targets_give_constant_forest() {
        let ex: Vec<_> = (0..12).map(|i| example(i, 0.5)).collect();
        let f = train_quality_rf(&ex, FeatureMode::Both, 5, &ForestParams::default()).unwrap();
        for e in &ex {
            assert_eq!(f.predict(&e.features(FeatureMode::Both, 5)).unwrap(), 0.5);
        }
        let g = train_quality_rf(&ex, FeatureMode::Both, 5, &ForestParams::default()).unwrap();
        assert_eq!(serde_json::to_string(&f).unwrap(), serde_json::to_string(&g).unwrap());
        assert!(train_quality_rf(&ex[..1], FeatureMode::Both, 5, &ForestParams::default()).is_err());
    }

    #[test]
    fn qnet_pools_to_one_pixel_and_is_small() {
        assert_eq!(pooled(64, 4), 1);
        let net = QNet::new(64, 0).unwrap();
        let n = net.parameter_count();
        assert!(n > 10_000 && n < 200_000, "{n}");
        let y = net.predict(&example(0, 0.1).maps).unwrap();
        assert!(y.is_finite());
    }

    #[test]
    fn qnet_learns_a_constant_and_is_reproducible() {
        let ex: Vec<_> = (0..8).map(|i| example(i, 0.5)).collect();
        let cfg = QNetConfig {
            epochs: 60,
            input_extent: 16,
            ..QNetConfig::default()
        };
        let (net, losses) = train_quality_cnn(&ex, &cfg, 1).unwrap();
        assert!(*losses.last().unwrap() < 0.01, "{losses:?}");
        let (_, again) = train_quality_cnn(&ex, &cfg, 1).unwrap();
        assert_eq!(losses, again);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.bin");
        net.save(&p).unwrap();
        let back = QNet::load(&p).unwrap();
        let e = &ex[0];
        assert!((back.predict(&e.maps).unwrap() - net.predict(&e.maps).unwrap()).abs() < 1e-5);
    }

    fn rec(avail: u32, fold: usize, q: f64, qh: f64) -> PredictionRecord {
        PredictionRecord {
            patch_id: format!("p{avail}{fold}"),
            availability: MarkerSet::from_bits(avail),
            fold,
            q_true: q,
            q_pred: qh,
            regressor: "r".into(),
        }
    }

    #[test]
    fn evaluation_examples() {
        let q = [0.2, 0.4, 0.6, 0.8];
        let recs: Vec<_> = q.iter().enumerate().map(|(i, &v)| rec(i as u32 + 1, 0, v, v)).collect();
        let e = evaluate_quality(&recs).unwrap();
        assert_eq!((e.rmse, e.r2_of_means), (0.0, 1.0));
        let mean = 0.5;
        let recs: Vec<_> = q.iter().enumerate().map(|(i, &v)| rec(i as u32 + 1, 0, v, mean)).collect();
        assert!(evaluate_quality(&recs).unwrap().r2_of_means.abs() < 1e-12);
        let qh = [0.3, 0.3, 0.7, 0.7];
        let recs: Vec<_> = (0..4).map(|i| rec(i as u32 + 1, 0, q[i], qh[i])).collect();
        assert!((evaluate_quality(&recs).unwrap().rmse - 0.1).abs() < 1e-15);
        assert!(evaluate_quality(&[]).is_err());
        let folds: Vec<_> = (0..4).map(|f| rec(1, f, 0.5, 0.4 + 0.1 * (f % 2) as f64)).collect();
        let e = evaluate_quality(&folds).unwrap();
        assert_eq!(e.per_combination[0].folds, 4);
        assert!((e.per_combination[0].sd_pred - 0.05).abs() < 1e-12);
    }

    #[test]
    fn quality_dataset_counts_order_and_determinism() {
        let spec = DatasetSpec {
            patches_per_sample: vec![2; 8],
            patch_extent: 16,
            ..DatasetSpec::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        let cfg = ArchConfig {
            depth: 2,
            base_width: 4,
            patch_extent: 16,
            ..ArchConfig::default()
        };
        let model = build_model(&cfg, Variant::Combined { p: 0.2, last_only: false }, 0).unwrap();
        let val: Vec<&MarkerPatch> = ds.of_split(Split::Validation).collect();
        let a = build_quality_dataset(&model, &val, 0, 3, StreamKey::new(1)).unwrap();
        assert_eq!(a.len(), 2 * 31);
        assert_eq!(a[30].availability, MarkerSet::all(5));
        assert_eq!(a[30].features(FeatureMode::Both, 5)[232 + 30], 1.0);
        assert!(a.iter().all(|e| (0.0..=1.0).contains(&e.target)));
        let b = build_quality_dataset(&model, &val, 0, 3, StreamKey::new(1)).unwrap();
        assert_eq!(a, b);
        let plain = build_model(&cfg, Variant::Plain, 0).unwrap();
        assert!(build_quality_dataset(&plain, &val, 0, 3, StreamKey::new(1)).is_err());
        let mut partial = val[0].clone();
        partial.availability = "m12".parse().unwrap();
        assert!(build_quality_dataset(&model, &[&partial], 0, 3, StreamKey::new(1)).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.bin");
        let set = QualitySet { markers: 5, examples: a };
        set.save(&path).unwrap();
        assert_eq!(QualitySet::load(&path).unwrap(), set);
    }
}
