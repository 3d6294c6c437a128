//! `markerq`: data generation, training, uncertainty inference, quality
//! regression and reporting, one subcommand per stage.

mod manifest;
mod svg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use markerq::crossval::{run_crossval, CrossvalConfig, FeatureRow, MC_MODEL, STANDARD_MODEL};
use markerq::features::{feature_names, FeatureMode};
use markerq::forest::{Forest, ForestParams};
use markerq::metrics::{f1_from_foreground, mean_sd, relative_f1, rmse};
use markerq::quality::{
    build_quality_dataset, evaluate_quality, train_quality_cnn, train_quality_rf, PredictionRecord, QNet, QNetConfig,
    QualityEval, QualitySet, Regressor,
};
use markerq::segnet::{build_model, train_segmentation, MarkerSet, SegModel, TrainItem, Variant};
use markerq::synth::{apply_scenario, enumerate_combinations, generate_dataset, read_dataset, write_dataset, DatasetSpec, Scenario, Split};
use markerq::uncertainty::{estimate, UncertaintyBundle, DEFAULT_SAMPLES};
use markerq::{table, StreamKey};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Overrides the default output root (`markerq-out`).
pub const OUT_ENV: &str = "MARKERQ_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] markerq::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input artifact {}", .0.display())]
    Missing(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("selfcheck failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(path.to_path_buf())
        } else {
            CliError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    /// 1 invalid configuration, 2 missing or unreadable input, 3 numerical failure.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(e) if e.is_missing_input() => 2,
            CliError::Core(markerq::Error::Format { .. }) => 2,
            CliError::Missing(_) | CliError::Io { .. } => 2,
            CliError::CheckFailed(_) => 3,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "markerq", version, about = "Missing-marker segmentation, uncertainty maps and quality regression")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset to disk.
    GenData(GenData),
    /// Train a segmentation model on one fold.
    TrainSeg(TrainSeg),
    /// Uncertainty maps for patches under chosen marker combinations.
    Infer(Infer),
    /// Quality examples (every combination) for the validation or test split.
    BuildQualitySet(BuildQualitySet),
    /// Fit a quality regressor on a quality set.
    TrainQuality(TrainQuality),
    /// Predict and score quality on a quality set.
    Evaluate(Evaluate),
    /// Draw an SVG figure from stage outputs.
    Report(Report),
    /// Gradient checks and oracle comparisons.
    Selfcheck(Selfcheck),
    /// The complete k-fold experiment.
    Crossval(Crossval),
}

#[derive(Args)]
struct OutArg {
    /// Output directory [default: $MARKERQ_OUT/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutArg {
    fn resolve(&self, command: &str) -> Result<PathBuf> {
        let dir = match &self.out {
            Some(p) => p.clone(),
            None => PathBuf::from(std::env::var_os(OUT_ENV).unwrap_or_else(|| "markerq-out".into())).join(command),
        };
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(dir)
    }
}

#[derive(Args)]
struct RunConfigArgs {
    /// Run configuration (JSON); unspecified fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the reduced desk-scale configuration.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunConfigArgs {
    fn load(&self) -> Result<(CrossvalConfig, Vec<PathBuf>)> {
        match (&self.config, self.desk) {
            (Some(_), true) => Err(CliError::Config("--config and --desk are exclusive".into())),
            (Some(p), false) => {
                let mut cfg: CrossvalConfig = read_json(p)?;
                if let Some(s) = self.seed {
                    cfg.seed = s;
                }
                Ok((cfg, vec![p.clone()]))
            }
            (None, desk) => {
                let mut cfg = if desk { CrossvalConfig::desk() } else { CrossvalConfig::default() };
                if let Some(s) = self.seed {
                    cfg.seed = s;
                }
                Ok((cfg, Vec::new()))
            }
        }
    }
}

#[derive(Args)]
struct GenData {
    /// Dataset spec (JSON); defaults to the built-in spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Use the desk-scale dataset spec.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantKind {
    Plain,
    Epistemic,
    Aleatoric,
    Combined,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct TrainSeg {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    run: RunConfigArgs,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Training scenario: full, case6 or a comma list like m12,m1345.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, value_enum)]
    variant: Option<VariantKind>,
    /// Dropout probability.
    #[arg(long)]
    p: Option<f64>,
    /// Dropout only before the output heads.
    #[arg(long)]
    last_only: bool,
    /// Noise samples of the aleatoric loss (also recorded as the inference T).
    #[arg(long = "T")]
    t: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct Infer {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Fold whose split assignment is used.
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// A single patch id instead of a whole split.
    #[arg(long)]
    patch: Option<String>,
    /// Marker combination like m135, or "all" for every combination.
    #[arg(long, default_value = "full")]
    availability: String,
    #[arg(long = "T", default_value_t = DEFAULT_SAMPLES)]
    t: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct BuildQualitySet {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long, value_enum, default_value = "validation")]
    split: SplitArg,
    #[arg(long = "T", default_value_t = DEFAULT_SAMPLES)]
    t: usize,
    /// Master seed; the streams match the crossval command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct TrainQuality {
    /// Quality set written by build-quality-set.
    #[arg(long)]
    set: PathBuf,
    /// rf_e_only, rf_a_only, rf_both or cnn.
    #[arg(long, default_value = "rf_both")]
    regressor: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    trees: Option<usize>,
    /// CNN epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct Evaluate {
    /// Regressor files from train-quality; repeatable.
    #[arg(long, required = true)]
    regressor: Vec<PathBuf>,
    #[arg(long)]
    set: PathBuf,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Figure {
    QualityScatter,
    Rmse,
    DeltaF1,
    UncertaintyMaps,
}

#[derive(Args)]
struct Report {
    #[arg(long, value_enum)]
    fig: Figure,
    /// predictions.csv (quality-scatter, rmse), eval_records.csv (delta-f1),
    /// a bundle file (uncertainty-maps), or a directory holding them.
    #[arg(long)]
    input: PathBuf,
    /// Regressor shown by quality-scatter.
    #[arg(long, default_value = "rf_both")]
    regressor: String,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct Selfcheck {
    /// Gradient-suite seeds.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct Crossval {
    #[command(flatten)]
    run: RunConfigArgs,
    /// Folds to run (default all).
    #[arg(long, value_delimiter = ',')]
    folds: Vec<usize>,
    #[command(flatten)]
    out: OutArg,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

fn pick_variant(current: Variant, kind: Option<VariantKind>, p: Option<f64>, last_only: bool) -> Variant {
    let p = p.or(current.dropout_p()).unwrap_or(0.2);
    let last_only = last_only || current.last_only();
    let kind = kind.unwrap_or(match current {
        Variant::Plain => VariantKind::Plain,
        Variant::Epistemic { .. } => VariantKind::Epistemic,
        Variant::Aleatoric => VariantKind::Aleatoric,
        Variant::Combined { .. } => VariantKind::Combined,
    });
    match kind {
        VariantKind::Plain => Variant::Plain,
        VariantKind::Epistemic => Variant::Epistemic { p, last_only },
        VariantKind::Aleatoric => Variant::Aleatoric,
        VariantKind::Combined => Variant::Combined { p, last_only },
    }
}

fn gen_data(a: &GenData) -> Result<()> {
    let mut inputs = Vec::new();
    let mut spec = match (&a.spec, a.desk) {
        (Some(_), true) => return Err(CliError::Config("--spec and --desk are exclusive".into())),
        (Some(p), false) => {
            inputs.push(p.clone());
            read_json::<DatasetSpec>(p)?
        }
        (None, true) => CrossvalConfig::desk().dataset,
        (None, false) => DatasetSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let out = a.out.resolve("gen-data")?;
    let ds = generate_dataset(&spec)?;
    write_dataset(&ds, &out)?;
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    manifest::write(&out, "gen-data", serde_json::to_value(&spec)?, &refs)?;
    println!("wrote {} patches to {}", ds.patches.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSegReport<'a> {
    fold: usize,
    train_samples: &'a [usize],
    patches: usize,
    parameter_count: usize,
    epoch_losses: &'a [f64],
    steps: u64,
}

fn train_seg(a: &TrainSeg) -> Result<()> {
    let (mut cfg, mut inputs) = a.run.load()?;
    require(&a.data)?;
    let mut ds = read_dataset(&a.data)?;
    inputs.push(a.data.clone());
    cfg.dataset = ds.spec.clone();
    cfg.arch.markers = ds.spec.markers;
    cfg.arch.patch_extent = ds.spec.patch_extent;
    if let Some(s) = &a.scenario {
        cfg.scenario = s.clone();
    }
    cfg.variant = pick_variant(cfg.variant, a.variant, a.p, a.last_only);
    if let Some(t) = a.t {
        cfg.train.loss_samples = t;
        cfg.samples = t;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.folds = vec![a.fold];
    cfg.arch.validate()?;
    cfg.train.validate()?;
    if a.fold >= cfg.dataset.folds {
        return Err(CliError::Config(format!("fold {} out of range", a.fold)));
    }
    ds.set_fold(a.fold)?;
    let scenario = Scenario::parse(&cfg.scenario, cfg.arch.markers, ds.split.train.len())?;
    let ds = apply_scenario(&ds, &scenario)?;
    let train: Vec<_> = ds.of_split(Split::Train).collect();
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
    let fkey = StreamKey::new(cfg.seed).named("fold").child(a.fold as u64);
    let mut model = build_model(&cfg.arch, cfg.variant, fkey.named("init").raw())?;
    let out = a.out.resolve("train-seg")?;
    eprintln!("training {} on {} patches", cfg.variant.name(), items.len());
    let report = train_segmentation(&mut model, &items, &cfg.train, fkey.named("seg-train"))?;
    model.save(&out.join("model.bin"))?;
    write_json(
        &out.join("train_report.json"),
        &TrainSegReport {
            fold: a.fold,
            train_samples: &ds.split.train,
            patches: items.len(),
            parameter_count: model.parameter_count(),
            epoch_losses: &report.epoch_losses,
            steps: report.steps,
        },
    )?;
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    manifest::write(&out, "train-seg", serde_json::to_value(&cfg)?, &refs)?;
    println!(
        "final loss {:.5}, model in {}",
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn parse_availability(s: &str, k: usize) -> Result<Vec<MarkerSet>> {
    match s {
        "all" => Ok(enumerate_combinations(k)?),
        "full" => Ok(vec![MarkerSet::all(k)]),
        other => {
            let m: MarkerSet = other.parse()?;
            if m.is_empty() || m.highest_marker() > k {
                return Err(CliError::Config(format!("availability {other} invalid for {k} markers")));
            }
            Ok(vec![m])
        }
    }
}

fn load_model_and_data(model: &Path, data: &Path, fold: usize) -> Result<(SegModel, markerq::synth::Dataset)> {
    require(model)?;
    require(data)?;
    let m = SegModel::load(model)?;
    let mut ds = read_dataset(data)?;
    if ds.spec.markers != m.cfg.markers || ds.spec.patch_extent != m.cfg.patch_extent {
        return Err(CliError::Config("model and dataset disagree on markers or patch extent".into()));
    }
    if fold >= ds.spec.folds {
        return Err(CliError::Config(format!("fold {fold} out of range")));
    }
    ds.set_fold(fold)?;
    Ok((m, ds))
}

fn infer(a: &Infer) -> Result<()> {
    let (model, ds) = load_model_and_data(&a.model, &a.data, a.fold)?;
    if a.t == 0 {
        return Err(CliError::Config("T must be at least 1".into()));
    }
    let combos = parse_availability(&a.availability, model.cfg.markers)?;
    let patches: Vec<_> = match &a.patch {
        Some(id) => {
            let p = ds
                .patches
                .iter()
                .find(|p| &p.id == id)
                .ok_or_else(|| CliError::Config(format!("no patch {id}")))?;
            vec![p]
        }
        None => ds.of_split(a.split.into()).collect(),
    };
    let out = a.out.resolve("infer")?;
    let mut w = csv::Writer::from_path(out.join("bundles.csv")).map_err(|e| markerq::Error::from(e))?;
    w.write_record(["file", "patch_id", "availability", "f1", "mean_u_e", "mean_u_a"])
        .map_err(markerq::Error::from)?;
    let key = StreamKey::new(a.seed).named("infer");
    for p in &patches {
        for &c in &combos {
            let b = estimate(&model, &p.id, &p.masked(c), c, a.t, key.named(&p.id).child(c.bits() as u64))?;
            let file = format!("{}_{c}.bin", p.id);
            b.save(&out.join(&file))?;
            let mean = |t: &markerq::nn::Tensor| t.data().iter().sum::<f64>() / t.len() as f64;
            w.write_record([
                file,
                p.id.clone(),
                c.to_string(),
                f1_from_foreground(&p.mask, b.mean_prob.data())?.to_string(),
                mean(&b.u_e).to_string(),
                b.u_a.as_ref().map_or(String::new(), |u| mean(u).to_string()),
            ])
            .map_err(markerq::Error::from)?;
        }
    }
    w.flush().map_err(|e| CliError::io(&out, e))?;
    let config = json!({"fold": a.fold, "split": format!("{:?}", Split::from(a.split)), "patch": a.patch,
        "availability": a.availability, "T": a.t, "seed": a.seed});
    manifest::write(&out, "infer", config, &[a.model.as_path(), a.data.as_path()])?;
    println!("{} bundles in {}", patches.len() * combos.len(), out.display());
    Ok(())
}

fn feature_rows(set: &QualitySet) -> Vec<FeatureRow> {
    set.examples
        .iter()
        .map(|e| FeatureRow {
            values: e.features(FeatureMode::Both, set.markers),
            target: e.target,
            patch_id: e.patch_id.clone(),
            fold: e.fold,
        })
        .collect()
}

fn build_quality_set(a: &BuildQualitySet) -> Result<()> {
    let (model, ds) = load_model_and_data(&a.model, &a.data, a.fold)?;
    let (split, stream) = match a.split {
        SplitArg::Validation => (Split::Validation, "mc-val"),
        SplitArg::Test => (Split::Test, "mc-test"),
        SplitArg::Train => return Err(CliError::Config("quality sets come from validation or test".into())),
    };
    let patches: Vec<_> = ds.of_split(split).collect();
    let key = StreamKey::new(a.seed).named("fold").child(a.fold as u64).named(stream);
    let examples = build_quality_dataset(&model, &patches, a.fold, a.t, key)?;
    let set = QualitySet {
        markers: model.cfg.markers,
        examples,
    };
    let out = a.out.resolve("build-quality-set")?;
    set.save(&out.join("quality_set.bin"))?;
    table::write_features(&out.join("features.csv"), &feature_names(FeatureMode::Both, set.markers), &feature_rows(&set))?;
    let config = json!({"fold": a.fold, "split": format!("{split:?}"), "T": a.t, "seed": a.seed});
    manifest::write(&out, "build-quality-set", config, &[a.model.as_path(), a.data.as_path()])?;
    println!("{} quality examples in {}", set.examples.len(), out.display());
    Ok(())
}

/// On-disk form of a random-forest quality regressor.
#[derive(Serialize, Deserialize)]
struct ForestFile {
    mode: FeatureMode,
    markers: usize,
    forest: Forest,
}

fn load_set(path: &Path) -> Result<QualitySet> {
    require(path)?;
    let set = QualitySet::load(path)?;
    if set.examples.is_empty() {
        return Err(CliError::Config(format!("{} holds no examples", path.display())));
    }
    Ok(set)
}

fn train_quality(a: &TrainQuality) -> Result<()> {
    let set = load_set(&a.set)?;
    let fold = set.examples[0].fold;
    let fkey = StreamKey::new(a.seed).named("fold").child(fold as u64);
    let out = a.out.resolve("train-quality")?;
    let config;
    if a.regressor == "cnn" {
        let mut q = QNetConfig::default();
        if let Some(e) = a.epochs {
            q.epochs = e;
        }
        let (net, losses) = train_quality_cnn(&set.examples, &q, fkey.named("qnet").raw())?;
        net.save(&out.join("cnn.bin"))?;
        write_json(&out.join("cnn_losses.json"), &losses)?;
        config = json!({"regressor": "cnn", "qnet": q, "seed": a.seed, "fold": fold});
    } else {
        let mode: FeatureMode = a
            .regressor
            .strip_prefix("rf_")
            .ok_or_else(|| CliError::Config(format!("unknown regressor {}", a.regressor)))?
            .parse()?;
        let mut params = ForestParams {
            seed: fkey.named("forest").named(mode.name()).raw(),
            ..ForestParams::default()
        };
        if let Some(t) = a.trees {
            params.n_trees = t;
        }
        let forest = train_quality_rf(&set.examples, mode, set.markers, &params)?;
        write_json(
            &out.join(format!("{}.json", a.regressor)),
            &ForestFile {
                mode,
                markers: set.markers,
                forest,
            },
        )?;
        config = json!({"regressor": a.regressor, "forest": params, "seed": a.seed, "fold": fold});
    }
    manifest::write(&out, "train-quality", config, &[a.set.as_path()])?;
    println!("{} trained on {} examples, in {}", a.regressor, set.examples.len(), out.display());
    Ok(())
}

fn load_regressor(path: &Path) -> Result<Regressor> {
    require(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        let f: ForestFile = read_json(path)?;
        Ok(Regressor::Forest {
            mode: f.mode,
            markers: f.markers,
            forest: f.forest,
        })
    } else {
        Ok(Regressor::Cnn(QNet::load(path)?))
    }
}

fn evaluate(a: &Evaluate) -> Result<()> {
    let set = load_set(&a.set)?;
    let mut preds = Vec::new();
    let mut evals = BTreeMap::new();
    for path in &a.regressor {
        let r = load_regressor(path)?;
        let p = r.predict_all(&set.examples)?;
        evals.insert(r.name(), evaluate_quality(&p)?);
        preds.extend(p);
    }
    let out = a.out.resolve("evaluate")?;
    table::write_predictions(&out.join("predictions.csv"), &preds)?;
    table::write_per_combination(&out.join("per_combination.csv"), &evals)?;
    write_json(&out.join("evaluation.json"), &evals)?;
    let mut inputs: Vec<&Path> = a.regressor.iter().map(PathBuf::as_path).collect();
    inputs.push(&a.set);
    manifest::write(&out, "evaluate", json!({"regressors": evals.keys().collect::<Vec<_>>()}), &inputs)?;
    for (name, e) in &evals {
        println!("{name}: rmse {:.4}, R² of combination means {:.4}", e.rmse, e.r2_of_means);
    }
    Ok(())
}

fn input_file(input: &Path, default_name: &str) -> Result<PathBuf> {
    let p = if input.is_dir() { input.join(default_name) } else { input.to_path_buf() };
    require(&p)?;
    Ok(p)
}

/// Mean and SD over folds of the per-fold RMSE of each regressor.
fn rmse_bars(preds: &[PredictionRecord]) -> Result<Vec<(String, f64, f64)>> {
    let mut groups: BTreeMap<&str, BTreeMap<usize, (Vec<f64>, Vec<f64>)>> = BTreeMap::new();
    for p in preds {
        let g = groups.entry(&p.regressor).or_default().entry(p.fold).or_default();
        g.0.push(p.q_pred);
        g.1.push(p.q_true);
    }
    groups
        .into_iter()
        .map(|(name, folds)| {
            let per_fold: Vec<f64> = folds.values().map(|(p, t)| rmse(p, t)).collect::<markerq::Result<_>>()?;
            let (m, s) = mean_sd(&per_fold);
            Ok((name.to_string(), m, s))
        })
        .collect()
}

fn scatter_figure(preds: &[PredictionRecord], regressor: &str) -> Result<String> {
    let mine: Vec<PredictionRecord> = preds.iter().filter(|p| p.regressor == regressor).cloned().collect();
    if mine.is_empty() {
        return Err(CliError::Config(format!("no predictions from {regressor}")));
    }
    let e: QualityEval = evaluate_quality(&mine)?;
    Ok(svg::quality_scatter(
        &format!("{regressor}: per-combination quality, R² {:.3}", e.r2_of_means),
        &e.per_combination,
    ))
}

fn delta_figure(records: &[markerq::metrics::EvalRecord]) -> Result<String> {
    let (mc, standard): (Vec<_>, Vec<_>) = records.iter().cloned().partition(|r| r.model == MC_MODEL);
    if standard.iter().any(|r| r.model != STANDARD_MODEL) {
        return Err(CliError::Config("unexpected model names in evaluation records".into()));
    }
    let rel = relative_f1(&mc, &standard)?;
    let values: Vec<f64> = rel.deltas.iter().map(|d| d.3).collect();
    Ok(svg::histogram(
        &format!("ΔF1 MC dropout vs standard dropout ({} pairs)", values.len()),
        "ΔF1",
        &values,
        40,
        rel.median,
    ))
}

fn report(a: &Report) -> Result<()> {
    let (name, text, input) = match a.fig {
        Figure::QualityScatter => {
            let p = input_file(&a.input, "predictions.csv")?;
            let preds = table::read_predictions(&p)?;
            ("quality_scatter.svg", scatter_figure(&preds, &a.regressor)?, p)
        }
        Figure::Rmse => {
            let p = input_file(&a.input, "predictions.csv")?;
            let bars = rmse_bars(&table::read_predictions(&p)?)?;
            ("rmse.svg", svg::bars("Quality RMSE per regressor (mean ± SD over folds)", "RMSE", &bars), p)
        }
        Figure::DeltaF1 => {
            let p = input_file(&a.input, "eval_records.csv")?;
            ("delta_f1.svg", delta_figure(&table::read_eval_records(&p)?)?, p)
        }
        Figure::UncertaintyMaps => {
            let p = input_file(&a.input, "bundle.bin")?;
            let b = UncertaintyBundle::load(&p)?;
            let mut maps = vec![("foreground probability", &b.mean_prob), ("u_e", &b.u_e)];
            if let Some(u) = &b.u_a {
                maps.push(("u_a", u));
            }
            let title = format!("{} with {}", b.patch_id, b.availability);
            ("uncertainty_maps.svg", svg::heatmaps(&title, &maps), p)
        }
    };
    let out = a.out.resolve("report")?;
    write_text(&out.join(name), &text)?;
    manifest::write(&out, "report", json!({"figure": name, "regressor": a.regressor}), &[input.as_path()])?;
    println!("wrote {}", out.join(name).display());
    Ok(())
}

fn selfcheck(a: &Selfcheck) -> Result<()> {
    let checks = markerq::selfcheck::run_all(a.seeds)?;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let out = a.out.resolve("selfcheck")?;
    write_json(&out.join("selfcheck.json"), &checks)?;
    manifest::write(&out, "selfcheck", json!({"seeds": a.seeds}), &[])?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(failed.join(", ")))
    }
}

fn crossval(a: &Crossval) -> Result<()> {
    let (mut cfg, inputs) = a.run.load()?;
    if !a.folds.is_empty() {
        cfg.folds = a.folds.clone();
    }
    cfg.validate()?;
    let out = a.out.resolve("crossval")?;
    let result = run_crossval(&cfg, true)?;
    result.write(&out)?;
    write_text(&out.join("quality_scatter.svg"), &scatter_figure(&result.predictions, "rf_both")?)?;
    write_text(
        &out.join("rmse.svg"),
        &svg::bars("Quality RMSE per regressor (mean ± SD over folds)", "RMSE", &rmse_bars(&result.predictions)?),
    )?;
    write_text(&out.join("delta_f1.svg"), &delta_figure(&result.eval_records)?)?;
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    manifest::write(&out, "crossval", serde_json::to_value(&cfg)?, &refs)?;
    for (name, e) in &result.evaluation {
        println!("{name}: rmse {:.4}, R² of combination means {:.4}", e.rmse, e.r2_of_means);
    }
    println!(
        "ΔF1 (MC minus standard dropout): median {:.4}, positive in {:.1}% of pairs",
        result.relative_f1.median,
        100.0 * result.relative_f1.fraction_positive
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainSeg(a) => train_seg(a),
        Command::Infer(a) => infer(a),
        Command::BuildQualitySet(a) => build_quality_set(a),
        Command::TrainQuality(a) => train_quality(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::Selfcheck(a) => selfcheck(a),
        Command::Crossval(a) => crossval(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
