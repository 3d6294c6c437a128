//! The k-fold experiment: per fold, train the segmentation model on the
//! scenario-ablated training samples, build quality examples on the
//! validation sample, fit the regressors and evaluate them on the test
//! samples across all marker combinations.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{feature_names, FeatureMode};
use crate::forest::ForestParams;
use crate::metrics::{f1_from_foreground, relative_f1, EvalRecord, RelativeF1};
use crate::quality::{
    build_quality_dataset, evaluate_quality, train_quality_cnn, train_quality_rf, PredictionRecord, QNetConfig,
    QualityEval, QualityExample, Regressor,
};
use crate::rng::StreamKey;
use crate::segnet::{build_model, train_segmentation, ArchConfig, MarkerSet, SegModel, TrainConfig, TrainItem, Variant};
use crate::synth::{apply_scenario, enumerate_combinations, generate_dataset, DatasetSpec, MarkerPatch, Scenario, Split};
use crate::table;
use crate::uncertainty::{deterministic_predict, estimate};

pub const MC_MODEL: &str = "mc_dropout";
pub const STANDARD_MODEL: &str = "standard_dropout";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossvalConfig {
    pub dataset: DatasetSpec,
    pub scenario: String,
    pub arch: ArchConfig,
    pub variant: Variant,
    pub train: TrainConfig,
    /// MC samples per uncertainty estimate.
    pub samples: usize,
    pub forest: ForestParams,
    /// `None` skips the CNN baseline.
    pub qnet: Option<QNetConfig>,
    /// Folds to run; empty means all.
    pub folds: Vec<usize>,
    pub seed: u64,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        CrossvalConfig {
            dataset: DatasetSpec::default(),
            scenario: "case6".into(),
            arch: ArchConfig::default(),
            variant: Variant::Combined { p: 0.2, last_only: false },
            train: TrainConfig::default(),
            samples: 50,
            forest: ForestParams::default(),
            qnet: Some(QNetConfig::default()),
            folds: Vec::new(),
            seed: 0,
        }
    }
}

impl CrossvalConfig {
    /// A reduced setting sized for a single desktop core: 32 px patches,
    /// 20 patches per sample, a two-level UNet and 20 MC samples.
    pub fn desk() -> Self {
        CrossvalConfig {
            dataset: DatasetSpec {
                patches_per_sample: vec![20; 8],
                patch_extent: 32,
                ..DatasetSpec::default()
            },
            arch: ArchConfig {
                depth: 2,
                base_width: 8,
                patch_extent: 32,
                ..ArchConfig::default()
            },
            train: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            samples: 20,
            qnet: Some(QNetConfig {
                epochs: 30,
                ..QNetConfig::default()
            }),
            ..CrossvalConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        if self.arch.markers != self.dataset.markers || self.arch.patch_extent != self.dataset.patch_extent {
            return Err(Error::config("architecture markers/extent must match the dataset"));
        }
        if self.samples == 0 {
            return Err(Error::config("samples must be at least 1"));
        }
        if !(self.variant.dropout_p().is_some() && self.variant.has_variance_head()) {
            return Err(Error::config("the experiment needs the combined variant"));
        }
        if let Some(&f) = self.folds.iter().find(|&&f| f >= self.dataset.folds) {
            return Err(Error::config(format!("fold {f} out of range")));
        }
        Ok(())
    }

    pub fn fold_list(&self) -> Vec<usize> {
        if self.folds.is_empty() {
            (0..self.dataset.folds).collect()
        } else {
            self.folds.clone()
        }
    }
}

/// One row of the feature tables.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub values: Vec<f64>,
    pub target: f64,
    pub patch_id: String,
    pub fold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub validation_sample: usize,
    pub train_samples: Vec<usize>,
    pub seg_epoch_losses: Vec<f64>,
    pub validation_examples: usize,
    pub test_examples: usize,
    /// RMSE on the test examples of this fold, per regressor.
    pub rmse: BTreeMap<String, f64>,
    pub mean_test_f1_full: f64,
}

#[derive(Clone, Debug)]
pub struct CrossvalResult {
    pub config: CrossvalConfig,
    pub folds: Vec<FoldSummary>,
    pub eval_records: Vec<EvalRecord>,
    pub predictions: Vec<PredictionRecord>,
    pub features_val: Vec<FeatureRow>,
    pub features_test: Vec<FeatureRow>,
    pub evaluation: BTreeMap<String, QualityEval>,
    pub relative_f1: RelativeF1,
    pub models: Vec<SegModel>,
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a CrossvalConfig,
    folds: &'a [FoldSummary],
    evaluation: &'a BTreeMap<String, QualityEval>,
    relative_f1: RelativeF1Summary,
}

#[derive(Serialize)]
struct RelativeF1Summary {
    n: usize,
    median: f64,
    mean: f64,
    fraction_positive: f64,
}

fn eval_test_f1(
    model: &SegModel,
    test: &[&MarkerPatch],
    examples: &[QualityExample],
    fold: usize,
) -> Result<Vec<EvalRecord>> {
    let combos = enumerate_combinations(model.cfg.markers)?;
    let jobs: Vec<(&MarkerPatch, MarkerSet)> =
        test.iter().flat_map(|&p| combos.iter().map(move |&c| (p, c))).collect();
    let standard: Vec<EvalRecord> = jobs
        .par_iter()
        .map(|&(p, c)| {
            let b = deterministic_predict(model, &p.id, &p.masked(c), c)?;
            Ok(EvalRecord {
                patch_id: p.id.clone(),
                availability: c,
                fold,
                model: STANDARD_MODEL.into(),
                f1: f1_from_foreground(&p.mask, b.mean_prob.data())?,
            })
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<EvalRecord> = examples
        .iter()
        .map(|e| EvalRecord {
            patch_id: e.patch_id.clone(),
            availability: e.availability,
            fold,
            model: MC_MODEL.into(),
            f1: e.target,
        })
        .collect();
    out.extend(standard);
    Ok(out)
}

fn feature_rows(examples: &[QualityExample], markers: usize) -> Vec<FeatureRow> {
    examples
        .iter()
        .map(|e| FeatureRow {
            values: e.features(FeatureMode::Both, markers),
            target: e.target,
            patch_id: e.patch_id.clone(),
            fold: e.fold,
        })
        .collect()
}

/// Runs every configured fold in order. With `log`, prints one progress
/// line per stage to stderr.
pub fn run_crossval(cfg: &CrossvalConfig, log: bool) -> Result<CrossvalResult> {
    cfg.validate()?;
    let note = |msg: String| {
        if log {
            eprintln!("{msg}");
        }
    };
    let master = StreamKey::new(cfg.seed);
    let mut base = generate_dataset(&cfg.dataset)?;
    let k = cfg.dataset.markers;
    let mut result = CrossvalResult {
        config: cfg.clone(),
        folds: Vec::new(),
        eval_records: Vec::new(),
        predictions: Vec::new(),
        features_val: Vec::new(),
        features_test: Vec::new(),
        evaluation: BTreeMap::new(),
        relative_f1: RelativeF1 {
            deltas: Vec::new(),
            median: f64::NAN,
            mean: f64::NAN,
            fraction_positive: f64::NAN,
        },
        models: Vec::new(),
    };
    for fold in cfg.fold_list() {
        let fkey = master.named("fold").child(fold as u64);
        base.set_fold(fold)?;
        let scenario = Scenario::parse(&cfg.scenario, k, base.split.train.len())?;
        let ds = apply_scenario(&base, &scenario)?;
        let train: Vec<&MarkerPatch> = ds.of_split(Split::Train).collect();
        let labels: Vec<_> = train.iter().map(|p| p.labels()).collect();
        let items: Vec<TrainItem> = train
            .iter()
            .zip(&labels)
            .map(|(p, y)| TrainItem {
                channels: &p.channels,
                labels: y,
                availability: p.availability,
            })
            .collect();
        let mut model = build_model(&cfg.arch, cfg.variant, fkey.named("init").raw())?;
        note(format!("fold {fold}: training on samples {:?} ({} patches)", ds.split.train, items.len()));
        let report = train_segmentation(&mut model, &items, &cfg.train, fkey.named("seg-train"))?;
        let val: Vec<&MarkerPatch> = ds.of_split(Split::Validation).collect();
        let test: Vec<&MarkerPatch> = ds.of_split(Split::Test).collect();
        note(format!("fold {fold}: uncertainty on validation sample {}", ds.split.validation));
        let val_ex = build_quality_dataset(&model, &val, fold, cfg.samples, fkey.named("mc-val"))?;
        note(format!("fold {fold}: uncertainty on test samples {:?}", ds.split.test));
        let test_ex = build_quality_dataset(&model, &test, fold, cfg.samples, fkey.named("mc-test"))?;
        let mut regressors = Vec::new();
        for mode in FeatureMode::ALL {
            let params = ForestParams {
                seed: fkey.named("forest").named(mode.name()).raw(),
                ..cfg.forest.clone()
            };
            let forest = train_quality_rf(&val_ex, mode, k, &params)?;
            regressors.push(Regressor::Forest { mode, markers: k, forest });
        }
        if let Some(q) = &cfg.qnet {
            note(format!("fold {fold}: training the CNN baseline"));
            let (net, _) = train_quality_cnn(&val_ex, q, fkey.named("qnet").raw())?;
            regressors.push(Regressor::Cnn(net));
        }
        let mut rmse_by = BTreeMap::new();
        for r in &regressors {
            let preds = r.predict_all(&test_ex)?;
            rmse_by.insert(r.name(), evaluate_quality(&preds)?.rmse);
            result.predictions.extend(preds);
        }
        let records = eval_test_f1(&model, &test, &test_ex, fold)?;
        let full = MarkerSet::all(k);
        let full_f1: Vec<f64> = records
            .iter()
            .filter(|r| r.model == MC_MODEL && r.availability == full)
            .map(|r| r.f1)
            .collect();
        let summary = FoldSummary {
            fold,
            validation_sample: ds.split.validation,
            train_samples: ds.split.train.clone(),
            seg_epoch_losses: report.epoch_losses,
            validation_examples: val_ex.len(),
            test_examples: test_ex.len(),
            rmse: rmse_by,
            mean_test_f1_full: full_f1.iter().sum::<f64>() / full_f1.len() as f64,
        };
        note(format!("fold {fold}: rmse {:?}, full-marker F1 {:.4}", summary.rmse, summary.mean_test_f1_full));
        result.eval_records.extend(records);
        result.features_val.extend(feature_rows(&val_ex, k));
        result.features_test.extend(feature_rows(&test_ex, k));
        result.folds.push(summary);
        result.models.push(model);
    }
    let mut by_regressor: BTreeMap<String, Vec<PredictionRecord>> = BTreeMap::new();
    for p in &result.predictions {
        by_regressor.entry(p.regressor.clone()).or_default().push(p.clone());
    }
    for (name, preds) in by_regressor {
        result.evaluation.insert(name, evaluate_quality(&preds)?);
    }
    let (mc, standard): (Vec<EvalRecord>, Vec<EvalRecord>) =
        result.eval_records.iter().cloned().partition(|r| r.model == MC_MODEL);
    result.relative_f1 = relative_f1(&mc, &standard)?;
    Ok(result)
}

/// Settings for a single-fold segmentation check at full scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SanityConfig {
    pub dataset: DatasetSpec,
    pub scenario: String,
    pub arch: ArchConfig,
    pub variant: Variant,
    pub train: TrainConfig,
    pub samples: usize,
    pub fold: usize,
    pub seed: u64,
}

impl Default for SanityConfig {
    fn default() -> Self {
        SanityConfig {
            dataset: DatasetSpec::default(),
            scenario: "full".into(),
            arch: ArchConfig::default(),
            variant: Variant::Combined { p: 0.2, last_only: false },
            train: TrainConfig::default(),
            samples: 50,
            fold: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub config: SanityConfig,
    pub epoch_losses: Vec<f64>,
    /// Test F1 with every marker available, MC-averaged prediction.
    pub mc_f1: Vec<EvalRecord>,
    /// Same patches, dropout off at inference.
    pub standard_f1: Vec<EvalRecord>,
    pub mean_mc_f1: f64,
    pub mean_standard_f1: f64,
    /// `mc - standard`, per patch.
    pub relative_f1: RelativeF1,
}

/// Trains one model and scores the full-marker test patches both with MC
/// averaging and with dropout disabled.
pub fn segmentation_sanity(cfg: &SanityConfig, log: bool) -> Result<SanityReport> {
    cfg.dataset.validate()?;
    cfg.arch.validate()?;
    cfg.train.validate()?;
    if cfg.samples == 0 {
        return Err(Error::config("samples must be at least 1"));
    }
    let key = StreamKey::new(cfg.seed).named("sanity");
    let mut ds = generate_dataset(&cfg.dataset)?;
    ds.set_fold(cfg.fold)?;
    let k = cfg.dataset.markers;
    let scenario = Scenario::parse(&cfg.scenario, k, ds.split.train.len())?;
    let ds = apply_scenario(&ds, &scenario)?;
    let train: Vec<&MarkerPatch> = ds.of_split(Split::Train).collect();
    let labels: Vec<_> = train.iter().map(|p| p.labels()).collect();
    let items: Vec<TrainItem> = train
        .iter()
        .zip(&labels)
        .map(|(p, y)| TrainItem {
            channels: &p.channels,
            labels: y,
            availability: p.availability,
        })
        .collect();
    let mut model = build_model(&cfg.arch, cfg.variant, key.named("init").raw())?;
    if log {
        eprintln!("sanity: training on {} patches", items.len());
    }
    let report = train_segmentation(&mut model, &items, &cfg.train, key.named("seg-train"))?;
    let full = MarkerSet::all(k);
    let test: Vec<&MarkerPatch> = ds.of_split(Split::Test).collect();
    let scored: Vec<(EvalRecord, EvalRecord)> = test
        .par_iter()
        .map(|p| {
            let x = p.masked(full);
            let mc = estimate(&model, &p.id, &x, full, cfg.samples, key.named("mc").named(&p.id))?;
            let det = deterministic_predict(&model, &p.id, &x, full)?;
            let rec = |model: &str, prob: &[f64]| -> Result<EvalRecord> {
                Ok(EvalRecord {
                    patch_id: p.id.clone(),
                    availability: full,
                    fold: cfg.fold,
                    model: model.into(),
                    f1: f1_from_foreground(&p.mask, prob)?,
                })
            };
            Ok((rec(MC_MODEL, mc.mean_prob.data())?, rec(STANDARD_MODEL, det.mean_prob.data())?))
        })
        .collect::<Result<_>>()?;
    let (mc_f1, standard_f1): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
    let mean = |r: &[EvalRecord]| r.iter().map(|r| r.f1).sum::<f64>() / r.len() as f64;
    Ok(SanityReport {
        config: cfg.clone(),
        epoch_losses: report.epoch_losses,
        mean_mc_f1: mean(&mc_f1),
        mean_standard_f1: mean(&standard_f1),
        relative_f1: relative_f1(&mc_f1, &standard_f1)?,
        mc_f1,
        standard_f1,
    })
}

pub const EVAL_RECORDS_CSV: &str = "eval_records.csv";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const FEATURES_VAL_CSV: &str = "features_val.csv";
pub const FEATURES_TEST_CSV: &str = "features_test.csv";
pub const DELTA_F1_CSV: &str = "delta_f1.csv";
pub const PER_COMBINATION_CSV: &str = "per_combination.csv";
pub const SUMMARY_JSON: &str = "summary.json";

impl CrossvalResult {
    /// Names of the CSV tables written by [`CrossvalResult::write`].
    pub fn csv_files() -> [&'static str; 6] {
        [
            EVAL_RECORDS_CSV,
            PREDICTIONS_CSV,
            FEATURES_VAL_CSV,
            FEATURES_TEST_CSV,
            DELTA_F1_CSV,
            PER_COMBINATION_CSV,
        ]
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let k = self.config.dataset.markers;
        table::write_eval_records(&dir.join(EVAL_RECORDS_CSV), &self.eval_records)?;
        table::write_predictions(&dir.join(PREDICTIONS_CSV), &self.predictions)?;
        let names = feature_names(FeatureMode::Both, k);
        table::write_features(&dir.join(FEATURES_VAL_CSV), &names, &self.features_val)?;
        table::write_features(&dir.join(FEATURES_TEST_CSV), &names, &self.features_test)?;
        table::write_deltas(&dir.join(DELTA_F1_CSV), &self.relative_f1)?;
        table::write_per_combination(&dir.join(PER_COMBINATION_CSV), &self.evaluation)?;
        let summary = Summary {
            config: &self.config,
            folds: &self.folds,
            evaluation: &self.evaluation,
            relative_f1: RelativeF1Summary {
                n: self.relative_f1.deltas.len(),
                median: self.relative_f1.median,
                mean: self.relative_f1.mean,
                fraction_positive: self.relative_f1.fraction_positive,
            },
        };
        std::fs::write(dir.join(SUMMARY_JSON), serde_json::to_vec_pretty(&summary)?)?;
        Ok(())
    }
}
