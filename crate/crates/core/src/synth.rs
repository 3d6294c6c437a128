//! Synthetic multi-marker fluorescence patches with tube-shaped foreground,
//! confounder structures and blob texture, plus fold and scenario handling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::{Rng, StreamKey};
use crate::segnet::{mask_channels, MarkerSet};

/// Structure types a marker can render: target tubes, confounder tubes,
/// and blob texture.
pub const STRUCTURES: usize = 3;

const MAX_RETRIES: usize = 100;
const MAX_TUBES: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub markers: usize,
    /// Patch count of each sample; samples are numbered from 1.
    pub patches_per_sample: Vec<usize>,
    pub patch_extent: usize,
    /// Mean foreground fraction; each patch draws its own target within
    /// `foreground_target ± foreground_jitter`.
    pub foreground_target: f64,
    pub foreground_jitter: f64,
    /// Per marker: weights for (target tubes, confounder tubes, blobs).
    pub visibility: Vec<[f64; STRUCTURES]>,
    /// Per marker additive Gaussian noise SD.
    pub noise: Vec<f64>,
    pub confounder_tubes: usize,
    pub blobs: usize,
    /// The last `test_samples` samples form the test split.
    pub test_samples: usize,
    pub folds: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            markers: 5,
            patches_per_sample: vec![29, 29, 29, 29, 29, 29, 28, 28],
            patch_extent: 64,
            foreground_target: 0.114,
            foreground_jitter: 0.025,
            visibility: vec![
                [0.9, 0.0, 0.1],
                [0.6, 0.0, 0.3],
                [0.5, 0.0, 0.0],
                [0.4, 0.9, 0.0],
                [0.25, 0.0, 0.4],
            ],
            noise: vec![0.10, 0.15, 0.20, 0.12, 0.25],
            confounder_tubes: 2,
            blobs: 6,
            test_samples: 2,
            folds: 4,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn samples(&self) -> usize {
        self.patches_per_sample.len()
    }

    pub fn total_patches(&self) -> usize {
        self.patches_per_sample.iter().sum()
    }

    /// Samples eligible for training/validation (all but the test samples).
    pub fn pool(&self) -> Vec<usize> {
        (1..=self.samples() - self.test_samples).collect()
    }

    pub fn test_ids(&self) -> Vec<usize> {
        (self.samples() - self.test_samples + 1..=self.samples()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.markers;
        if k == 0 || k > 9 {
            return Err(Error::config("marker count must be in 1..=9"));
        }
        if self.visibility.len() != k || self.noise.len() != k {
            return Err(Error::config("visibility and noise need one row per marker"));
        }
        if self.visibility.iter().flatten().chain(&self.noise).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("visibility and noise must be finite and non-negative"));
        }
        if self.patch_extent < 8 {
            return Err(Error::config("patch extent must be at least 8"));
        }
        if self.patches_per_sample.contains(&0) {
            return Err(Error::config("every sample needs at least one patch"));
        }
        if self.test_samples == 0 || self.samples() < self.test_samples + 2 {
            return Err(Error::config("need test samples plus at least two pool samples"));
        }
        if self.folds == 0 || self.folds > self.pool().len() {
            return Err(Error::config(format!(
                "folds must be in 1..={}",
                self.pool().len()
            )));
        }
        let lo = self.foreground_target - self.foreground_jitter;
        let hi = self.foreground_target + self.foreground_jitter;
        if !(lo > 0.0 && hi < 1.0 && self.foreground_jitter >= 0.0) {
            return Err(Error::config("foreground target range must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Validation sample of each fold: a seeded permutation of the pool,
    /// truncated to `folds` entries, so folds have disjoint validation samples.
    pub fn validation_samples(&self) -> Vec<usize> {
        let mut pool = self.pool();
        pool.shuffle(&mut StreamKey::new(self.seed).named("folds").rng());
        pool.truncate(self.folds);
        pool
    }

    pub fn fold_split(&self, fold: usize) -> Result<FoldSplit> {
        let vals = self.validation_samples();
        let val = *vals
            .get(fold)
            .ok_or_else(|| Error::arg(format!("fold {fold} out of range 0..{}", vals.len())))?;
        Ok(FoldSplit {
            fold,
            train: self.pool().into_iter().filter(|&s| s != val).collect(),
            validation: val,
            test: self.test_ids(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    /// Ascending sample ids.
    pub train: Vec<usize>,
    pub validation: usize,
    pub test: Vec<usize>,
}

impl FoldSplit {
    pub fn split_of(&self, sample: usize) -> Option<Split> {
        if self.train.contains(&sample) {
            Some(Split::Train)
        } else if self.validation == sample {
            Some(Split::Validation)
        } else if self.test.contains(&sample) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerPatch {
    pub id: String,
    pub sample: usize,
    pub index: usize,
    pub split: Split,
    pub availability: MarkerSet,
    /// `[K, H, W]`, values in `[0, 1]`, exactly 0 outside `availability`.
    pub channels: Tensor,
    /// Row-major `H * W` foreground mask.
    pub mask: Vec<bool>,
}

impl MarkerPatch {
    pub fn extent(&self) -> usize {
        self.channels.shape()[1]
    }

    /// One-hot `[2, H, W]` (background, foreground).
    pub fn labels(&self) -> Tensor {
        let n = self.mask.len();
        let e = self.extent();
        let mut t = Tensor::zeros(&[2, e, e]);
        for (i, &m) in self.mask.iter().enumerate() {
            t.data_mut()[if m { n + i } else { i }] = 1.0;
        }
        t
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    /// Channels with every marker outside `keep` zeroed.
    pub fn masked(&self, keep: MarkerSet) -> Tensor {
        mask_channels(&self.channels, keep)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Availability of the i-th training sample of a fold (ascending id).
    pub availability: Vec<MarkerSet>,
}

impl Scenario {
    pub fn full(markers: usize, train_samples: usize) -> Self {
        Scenario {
            name: "full".into(),
            availability: vec![MarkerSet::all(markers); train_samples],
        }
    }

    pub fn case6() -> Self {
        let sets = ["m135", "m124", "m35", "m23", "m45"];
        Scenario {
            name: "case6".into(),
            availability: sets.iter().map(|s| s.parse().expect("literal marker set")).collect(),
        }
    }

    /// `full`, `case6`, or a comma-separated list such as `m12,m345,m1,m2,m5`.
    pub fn parse(name: &str, markers: usize, train_samples: usize) -> Result<Self> {
        match name {
            "full" => Ok(Self::full(markers, train_samples)),
            "case6" => Ok(Self::case6()),
            list => Ok(Scenario {
                name: list.into(),
                availability: list.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub split: FoldSplit,
    pub patches: Vec<MarkerPatch>,
}

impl Dataset {
    pub fn of_split(&self, split: Split) -> impl Iterator<Item = &MarkerPatch> {
        self.patches.iter().filter(move |p| p.split == split)
    }

    /// Re-tags every patch for `fold` and restores full availability.
    pub fn set_fold(&mut self, fold: usize) -> Result<()> {
        self.split = self.spec.fold_split(fold)?;
        for p in &mut self.patches {
            p.split = self.split.split_of(p.sample).expect("every sample is in a split");
        }
        Ok(())
    }
}

/// All `2^K - 1` nonempty subsets in ascending canonical order.
pub fn enumerate_combinations(k: usize) -> Result<Vec<MarkerSet>> {
    if k == 0 || k > 16 {
        return Err(Error::arg("K must be in 1..=16"));
    }
    Ok((1u32..(1 << k)).map(MarkerSet::from_bits).collect())
}

/// Gives each training patch its sample's availability and zeroes the
/// missing channels. Validation and test patches are left alone.
pub fn apply_scenario(dataset: &Dataset, scenario: &Scenario) -> Result<Dataset> {
    let train = &dataset.split.train;
    if scenario.availability.len() != train.len() {
        return Err(Error::config(format!(
            "scenario {} lists {} availabilities for {} training samples",
            scenario.name,
            scenario.availability.len(),
            train.len()
        )));
    }
    let k = dataset.spec.markers;
    for a in &scenario.availability {
        if a.is_empty() || a.highest_marker() > k {
            return Err(Error::config(format!("availability {a} invalid for {k} markers")));
        }
    }
    let mut out = dataset.clone();
    for p in out.patches.iter_mut().filter(|p| p.split == Split::Train) {
        let pos = train
            .iter()
            .position(|&s| s == p.sample)
            .ok_or_else(|| Error::arg(format!("unknown sample id {}", p.sample)))?;
        let a = scenario.availability[pos];
        p.availability = a;
        p.channels = mask_channels(&p.channels, a);
    }
    Ok(out)
}

struct Canvas {
    e: usize,
    px: Vec<bool>,
    count: usize,
}

impl Canvas {
    fn new(e: usize) -> Self {
        Canvas {
            e,
            px: vec![false; e * e],
            count: 0,
        }
    }

    fn disk(&mut self, cx: f64, cy: f64, r: f64) {
        let e = self.e as isize;
        let (x0, x1) = ((cx - r).floor() as isize, (cx + r).ceil() as isize);
        let (y0, y1) = ((cy - r).floor() as isize, (cy + r).ceil() as isize);
        for y in y0.max(0)..=y1.min(e - 1) {
            for x in x0.max(0)..=x1.min(e - 1) {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    let i = y as usize * self.e + x as usize;
                    if !self.px[i] {
                        self.px[i] = true;
                        self.count += 1;
                    }
                }
            }
        }
    }
}

/// Entry point on a random edge, heading inward.
fn edge_start(e: f64, rng: &mut Rng) -> (f64, f64, f64) {
    use std::f64::consts::{FRAC_PI_2, PI};
    let t = rng.random_range(0.0..e);
    let side = rng.random_range(0..4);
    let (x, y, inward) = match side {
        0 => (t, 0.0, FRAC_PI_2),
        1 => (e, t, PI),
        2 => (t, e, -FRAC_PI_2),
        _ => (0.0, t, 0.0),
    };
    (x, y, inward + rng.random_range(-0.8..0.8))
}

/// Paints a meandering tube. Stops early once `canvas.count` reaches
/// `stop_at`.
fn paint_tube(canvas: &mut Canvas, rng: &mut Rng, sinuous: bool, stop_at: usize) {
    let e = canvas.e as f64;
    let (mut x, mut y, heading) = edge_start(e, rng);
    let r = rng.random_range(1.0..2.5);
    let amp = if sinuous { rng.random_range(0.4..1.0) } else { 0.0 };
    let freq = rng.random_range(0.08..0.2);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let drift = Normal::new(0.0, 0.03).expect("valid sd");
    let mut base = heading;
    for step in 0..(8 * canvas.e) {
        let theta = base + amp * (freq * step as f64 + phase).sin();
        x += theta.cos();
        y += theta.sin();
        base += drift.sample(rng);
        if x < -r || y < -r || x > e + r || y > e + r {
            break;
        }
        canvas.disk(x, y, r);
        if canvas.count >= stop_at {
            break;
        }
    }
}

fn blob_field(e: usize, n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut f = vec![0.0; e * e];
    for _ in 0..n {
        let cx = rng.random_range(0.0..e as f64);
        let cy = rng.random_range(0.0..e as f64);
        let s: f64 = rng.random_range(3.0..8.0);
        let a = rng.random_range(0.3..1.0);
        for y in 0..e {
            for x in 0..e {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                f[y * e + x] += a * (-d2 / (2.0 * s * s)).exp();
            }
        }
    }
    f.iter_mut().for_each(|v| *v = v.min(1.0));
    f
}

/// Separable Gaussian blur with σ = 1 px, replicated borders.
fn blur(img: &[f64], e: usize) -> Vec<f64> {
    let k: Vec<f64> = (-3i32..=3).map(|d| (-(d * d) as f64 / 2.0).exp()).collect();
    let norm: f64 = k.iter().sum();
    let at = |i: isize| i.clamp(0, e as isize - 1) as usize;
    let mut tmp = vec![0.0; e * e];
    for y in 0..e {
        for x in 0..e {
            tmp[y * e + x] = (0..7).map(|j| k[j] * img[y * e + at(x as isize + j as isize - 3)]).sum::<f64>() / norm;
        }
    }
    let mut out = vec![0.0; e * e];
    for y in 0..e {
        for x in 0..e {
            out[y * e + x] = (0..7).map(|j| k[j] * tmp[at(y as isize + j as isize - 3) * e + x]).sum::<f64>() / norm;
        }
    }
    out
}

fn foreground_mask(spec: &DatasetSpec, rng: &mut Rng) -> Result<Vec<bool>> {
    let e = spec.patch_extent;
    let n = (e * e) as f64;
    let lo = spec.foreground_target - spec.foreground_jitter;
    let hi = spec.foreground_target + spec.foreground_jitter;
    for _ in 0..MAX_RETRIES {
        let target = rng.random_range(lo..=hi);
        let want = (target * n).round() as usize;
        let mut c = Canvas::new(e);
        for _ in 0..MAX_TUBES {
            paint_tube(&mut c, rng, true, want);
            if c.count >= want {
                break;
            }
        }
        let frac = c.count as f64 / n;
        if (lo..=hi + 0.01).contains(&frac) {
            return Ok(c.px);
        }
    }
    Err(Error::config(format!(
        "foreground fraction {lo:.3}..{hi:.3} infeasible after {MAX_RETRIES} retries"
    )))
}

fn render_patch(spec: &DatasetSpec, sample: usize, index: usize, split: Split) -> Result<MarkerPatch> {
    let e = spec.patch_extent;
    let key = StreamKey::new(spec.seed).named("patch").child(sample as u64).child(index as u64);
    let mut rng = key.named("shapes").rng();
    let mask = foreground_mask(spec, &mut rng)?;
    let mut conf = Canvas::new(e);
    for _ in 0..spec.confounder_tubes {
        paint_tube(&mut conf, &mut rng, false, usize::MAX);
    }
    let blobs = blob_field(e, spec.blobs, &mut rng);
    let planes: [Vec<f64>; STRUCTURES] = [
        mask.iter().map(|&m| m as u8 as f64).collect(),
        conf.px.iter().map(|&m| m as u8 as f64).collect(),
        blobs,
    ];
    let mut data = Vec::with_capacity(spec.markers * e * e);
    for (k, v) in spec.visibility.iter().enumerate() {
        let raw: Vec<f64> = (0..e * e)
            .map(|i| (0..STRUCTURES).map(|s| v[s] * planes[s][i]).sum())
            .collect();
        let mut noise_rng = key.named("noise").child(k as u64).rng();
        let noise = Normal::new(0.0, spec.noise[k]).map_err(|e| Error::config(e.to_string()))?;
        data.extend(
            blur(&raw, e)
                .into_iter()
                .map(|v| ((v + noise.sample(&mut noise_rng)).clamp(0.0, 1.0) as f32) as f64),
        );
    }
    Ok(MarkerPatch {
        id: format!("s{sample}_p{index:03}"),
        sample,
        index,
        split,
        availability: MarkerSet::all(spec.markers),
        channels: Tensor::new(vec![spec.markers, e, e], data)?,
        mask,
    })
}

/// Generates every patch of every sample, tagged with the splits of fold 0.
/// A pure function of `spec`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let split = spec.fold_split(0)?;
    let jobs: Vec<(usize, usize)> = spec
        .patches_per_sample
        .iter()
        .enumerate()
        .flat_map(|(s, &n)| (0..n).map(move |i| (s + 1, i)))
        .collect();
    let patches = jobs
        .par_iter()
        .map(|&(s, i)| render_patch(spec, s, i, split.split_of(s).expect("sample in split")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        split,
        patches,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PatchSidecar {
    id: String,
    sample: usize,
    index: usize,
    split: Split,
    availability: MarkerSet,
    markers: usize,
    extent: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub sidecar: String,
    pub planes: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub fold: usize,
    pub patches: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_planes(p: &MarkerPatch) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * (p.channels.len() + p.mask.len()));
    for &v in p.channels.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &m in &p.mask {
        out.extend_from_slice(&(m as u8 as f32).to_le_bytes());
    }
    out
}

/// One directory per sample with a JSON sidecar and a raw little-endian
/// `f32` plane file (K channels, then the mask) per patch, plus a manifest
/// with content hashes.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<DatasetManifest> {
    let mut entries = Vec::with_capacity(ds.patches.len());
    for p in &ds.patches {
        let rel_dir = format!("sample_{}", p.sample);
        fs::create_dir_all(root.join(&rel_dir))?;
        let sidecar = format!("{rel_dir}/p{:03}.json", p.index);
        let planes = format!("{rel_dir}/p{:03}.f32", p.index);
        let meta = PatchSidecar {
            id: p.id.clone(),
            sample: p.sample,
            index: p.index,
            split: p.split,
            availability: p.availability,
            markers: p.channels.shape()[0],
            extent: p.extent(),
        };
        fs::write(root.join(&sidecar), serde_json::to_vec_pretty(&meta)?)?;
        let bytes = encode_planes(p);
        fs::write(root.join(&planes), &bytes)?;
        entries.push(ManifestEntry {
            id: p.id.clone(),
            sidecar,
            planes,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = DatasetManifest {
        spec: ds.spec.clone(),
        fold: ds.split.fold,
        patches: entries,
    };
    fs::write(root.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

fn read_file(path: PathBuf) -> Result<Vec<u8>> {
    fs::read(&path).map_err(|e| Error::MissingInput {
        path,
        reason: e.to_string(),
    })
}

/// Loads a dataset written by [`write_dataset`], verifying every hash.
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let mpath = root.join(MANIFEST_FILE);
    let manifest: DatasetManifest = serde_json::from_slice(&read_file(mpath.clone())?)
        .map_err(|e| Error::format(&mpath, e.to_string()))?;
    manifest.spec.validate()?;
    let split = manifest.spec.fold_split(manifest.fold)?;
    let mut patches = Vec::with_capacity(manifest.patches.len());
    for entry in &manifest.patches {
        let spath = root.join(&entry.sidecar);
        let meta: PatchSidecar = serde_json::from_slice(&read_file(spath.clone())?)
            .map_err(|e| Error::format(&spath, e.to_string()))?;
        let ppath = root.join(&entry.planes);
        let bytes = read_file(ppath.clone())?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::format(&ppath, "content hash mismatch"));
        }
        let (k, e) = (meta.markers, meta.extent);
        if bytes.len() != 4 * (k + 1) * e * e {
            return Err(Error::format(&ppath, "unexpected plane size"));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let (chan, mask) = values.split_at(k * e * e);
        patches.push(MarkerPatch {
            id: meta.id,
            sample: meta.sample,
            index: meta.index,
            split: meta.split,
            availability: meta.availability,
            channels: Tensor::new(vec![k, e, e], chan.to_vec())?,
            mask: mask.iter().map(|&m| m > 0.5).collect(),
        });
    }
    Ok(Dataset {
        spec: manifest.spec,
        split,
        patches,
    })
}
