//! Per-patch uncertainty maps from MC-dropout sampling and the log-variance
//! head.

use std::path::Path;

use rayon::prelude::*;
use serde_json::json;

use crate::error::{Error, Result};
use crate::nn::checkpoint::Container;
use crate::nn::{Graph, Mode, Tensor};
use crate::rng::{Rng, StreamKey};
use crate::segnet::{MarkerSet, SegModel, SegPrediction};

/// Default number of MC samples.
pub const DEFAULT_SAMPLES: usize = 50;

/// Anything that maps a `[K, H, W]` patch to 2-class logits (and optionally a
/// log-variance plane).
pub trait Segmenter: Sync {
    fn has_dropout(&self) -> bool;
    fn has_variance_head(&self) -> bool;
    fn predict(&self, patch: &Tensor, availability: MarkerSet, mode: Mode, rng: &mut Rng) -> Result<SegPrediction>;
}

impl Segmenter for SegModel {
    fn has_dropout(&self) -> bool {
        self.variant.dropout_p().is_some()
    }

    fn has_variance_head(&self) -> bool {
        self.variant.has_variance_head()
    }

    fn predict(&self, patch: &Tensor, availability: MarkerSet, mode: Mode, rng: &mut Rng) -> Result<SegPrediction> {
        self.seg_forward(patch, availability, mode, rng)
    }
}

/// A single linear unit followed by dropout: background logit 0, foreground
/// logit `dropout(w * x)` per pixel of channel 0. Its foreground probability
/// takes the two values `sigmoid(0)` and `sigmoid(w x / (1 - p))`.
#[derive(Clone, Debug)]
pub struct SingleUnit {
    pub weight: f64,
    pub p: f64,
}

impl Segmenter for SingleUnit {
    fn has_dropout(&self) -> bool {
        true
    }

    fn has_variance_head(&self) -> bool {
        false
    }

    fn predict(&self, patch: &Tensor, _: MarkerSet, mode: Mode, rng: &mut Rng) -> Result<SegPrediction> {
        let [_, h, w] = patch.shape()[..] else {
            return Err(Error::shape("patch must be [K, H, W]"));
        };
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, h, w], patch.plane(0).to_vec())?, false);
        let wv = g.constant(Tensor::full(&[1, h, w], self.weight));
        let z = g.mul(x, wv)?;
        let z = g.dropout(z, self.p, mode.stochastic(), rng)?;
        let bg = g.constant(Tensor::zeros(&[1, h, w]));
        let logits = g.concat(bg, z)?;
        Ok(SegPrediction {
            logits: g.value(logits).clone(),
            log_var: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyBundle {
    pub patch_id: String,
    pub availability: MarkerSet,
    pub samples: usize,
    /// `[H, W]` mean foreground probability.
    pub mean_prob: Tensor,
    /// `[H, W]` population SD of the foreground probability.
    pub u_e: Tensor,
    /// `[H, W]` predicted aleatoric scale, when the model has a variance head.
    pub u_a: Option<Tensor>,
}

fn foreground_prob(logits: &Tensor) -> Vec<f64> {
    let (bg, fg) = (logits.plane(0), logits.plane(1));
    bg.iter().zip(fg).map(|(&b, &f)| 1.0 / (1.0 + (b - f).exp())).collect()
}

fn scale_map(log_var: &Tensor) -> Vec<f64> {
    log_var
        .data()
        .iter()
        .map(|&s| (s.clamp(crate::nn::graph::LOG_VAR_MIN, crate::nn::graph::LOG_VAR_MAX) / 2.0).exp())
        .collect()
}

fn plane_shape(patch: &Tensor) -> Result<Vec<usize>> {
    match patch.shape() {
        [_, h, w] => Ok(vec![*h, *w]),
        s => Err(Error::shape(format!("patch shape {s:?}"))),
    }
}

/// Runs `samples` MC passes (pass `t` uses substream `key.child(t)`) and
/// accumulates per-pixel mean and population SD of the foreground
/// probability, plus the mean aleatoric scale when `with_u_a`.
fn sample_passes<M: Segmenter + ?Sized>(
    model: &M,
    patch: &Tensor,
    availability: MarkerSet,
    samples: usize,
    key: StreamKey,
    with_u_a: bool,
) -> Result<(Vec<f64>, Vec<f64>, Option<Vec<f64>>)> {
    let passes: Vec<SegPrediction> = (0..samples as u64)
        .into_par_iter()
        .map(|t| model.predict(patch, availability, Mode::McInfer, &mut key.child(t).rng()))
        .collect::<Result<_>>()?;
    let n = patch.plane(0).len();
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut ua = with_u_a.then(|| vec![0.0; n]);
    for (t, pass) in passes.iter().enumerate() {
        let k = (t + 1) as f64;
        for (i, p) in foreground_prob(&pass.logits).into_iter().enumerate() {
            let d = p - mean[i];
            mean[i] += d / k;
            m2[i] += d * (p - mean[i]);
        }
        if let Some(acc) = ua.as_mut() {
            let s = pass
                .log_var
                .as_ref()
                .ok_or_else(|| Error::arg("model produced no log-variance"))?;
            for (a, u) in acc.iter_mut().zip(scale_map(s)) {
                *a += u;
            }
        }
    }
    let sd = m2.iter().map(|&v| (v / samples as f64).max(0.0).sqrt()).collect();
    if let Some(acc) = ua.as_mut() {
        acc.iter_mut().for_each(|a| *a /= samples as f64);
    }
    Ok((mean, sd, ua))
}

fn check_samples(samples: usize) -> Result<()> {
    if samples == 0 {
        return Err(Error::arg("number of MC samples must be at least 1"));
    }
    Ok(())
}

/// Epistemic uncertainty by MC dropout; `u_a` is absent.
pub fn mc_epistemic<M: Segmenter + ?Sized>(
    model: &M,
    patch_id: &str,
    patch: &Tensor,
    availability: MarkerSet,
    samples: usize,
    key: StreamKey,
) -> Result<UncertaintyBundle> {
    check_samples(samples)?;
    if !model.has_dropout() {
        return Err(Error::arg("mc_epistemic needs a model with dropout"));
    }
    let shape = plane_shape(patch)?;
    let (mean, sd, _) = sample_passes(model, patch, availability, samples, key, false)?;
    Ok(UncertaintyBundle {
        patch_id: patch_id.into(),
        availability,
        samples,
        mean_prob: Tensor::new(shape.clone(), mean)?,
        u_e: Tensor::new(shape, sd)?,
        u_a: None,
    })
}

/// Single deterministic pass of a model with a variance head; `u_e` is zero.
pub fn aleatoric_infer<M: Segmenter + ?Sized>(
    model: &M,
    patch_id: &str,
    patch: &Tensor,
    availability: MarkerSet,
) -> Result<UncertaintyBundle> {
    if !model.has_variance_head() {
        return Err(Error::arg("aleatoric_infer needs a model with a variance head"));
    }
    let shape = plane_shape(patch)?;
    let mut rng = StreamKey::new(0).rng();
    let out = model.predict(patch, availability, Mode::DetInfer, &mut rng)?;
    let s = out
        .log_var
        .as_ref()
        .ok_or_else(|| Error::arg("model produced no log-variance"))?;
    Ok(UncertaintyBundle {
        patch_id: patch_id.into(),
        availability,
        samples: 1,
        mean_prob: Tensor::new(shape.clone(), foreground_prob(&out.logits))?,
        u_e: Tensor::zeros(&shape),
        u_a: Some(Tensor::new(shape, scale_map(s))?),
    })
}

/// Both maps from one model with dropout and a variance head.
pub fn combined_predict<M: Segmenter + ?Sized>(
    model: &M,
    patch_id: &str,
    patch: &Tensor,
    availability: MarkerSet,
    samples: usize,
    key: StreamKey,
) -> Result<UncertaintyBundle> {
    check_samples(samples)?;
    if !(model.has_dropout() && model.has_variance_head()) {
        return Err(Error::arg("combined_predict needs dropout and a variance head"));
    }
    let shape = plane_shape(patch)?;
    let (mean, sd, ua) = sample_passes(model, patch, availability, samples, key, true)?;
    Ok(UncertaintyBundle {
        patch_id: patch_id.into(),
        availability,
        samples,
        mean_prob: Tensor::new(shape.clone(), mean)?,
        u_e: Tensor::new(shape.clone(), sd)?,
        u_a: ua.map(|v| Tensor::new(shape, v)).transpose()?,
    })
}

/// Deterministic prediction with dropout disabled (used as the
/// standard-dropout baseline and for the plain variant).
pub fn deterministic_predict<M: Segmenter + ?Sized>(
    model: &M,
    patch_id: &str,
    patch: &Tensor,
    availability: MarkerSet,
) -> Result<UncertaintyBundle> {
    let shape = plane_shape(patch)?;
    let out = model.predict(patch, availability, Mode::DetInfer, &mut StreamKey::new(0).rng())?;
    Ok(UncertaintyBundle {
        patch_id: patch_id.into(),
        availability,
        samples: 1,
        mean_prob: Tensor::new(shape.clone(), foreground_prob(&out.logits))?,
        u_e: Tensor::zeros(&shape),
        u_a: out.log_var.as_ref().map(|s| Tensor::new(shape, scale_map(s))).transpose()?,
    })
}

/// Picks the estimator matching the model's capabilities.
pub fn estimate<M: Segmenter + ?Sized>(
    model: &M,
    patch_id: &str,
    patch: &Tensor,
    availability: MarkerSet,
    samples: usize,
    key: StreamKey,
) -> Result<UncertaintyBundle> {
    match (model.has_dropout(), model.has_variance_head()) {
        (true, true) => combined_predict(model, patch_id, patch, availability, samples, key),
        (true, false) => mc_epistemic(model, patch_id, patch, availability, samples, key),
        (false, true) => aleatoric_infer(model, patch_id, patch, availability),
        (false, false) => deterministic_predict(model, patch_id, patch, availability),
    }
}

impl UncertaintyBundle {
    pub fn check(&self) -> Result<()> {
        let shape = self.mean_prob.shape();
        if self.u_e.shape() != shape || self.u_a.as_ref().is_some_and(|u| u.shape() != shape) {
            return Err(Error::shape("uncertainty maps differ in shape"));
        }
        self.mean_prob.check_finite("mean_prob")?;
        self.u_e.check_finite("u_e")?;
        if let Some(u) = &self.u_a {
            u.check_finite("u_a")?;
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({
            "kind": "uncertainty",
            "patch_id": self.patch_id,
            "availability": self.availability,
            "samples": self.samples,
        }));
        c.push("mean_prob", self.mean_prob.clone());
        c.push("u_e", self.u_e.clone());
        if let Some(u) = &self.u_a {
            c.push("u_a", u.clone());
        }
        c
    }

    pub fn from_container(c: &Container, origin: &Path) -> Result<Self> {
        let bad = |why: &str| Error::format(origin, why.to_string());
        if c.meta.get("kind").and_then(|v| v.as_str()) != Some("uncertainty") {
            return Err(bad("not an uncertainty bundle"));
        }
        let patch_id = c.meta["patch_id"].as_str().ok_or_else(|| bad("patch_id"))?.to_string();
        let availability = c.meta["availability"]
            .as_str()
            .ok_or_else(|| bad("availability"))?
            .parse()?;
        let samples = c.meta["samples"].as_u64().ok_or_else(|| bad("samples"))? as usize;
        let get = |n: &str| c.get(n).cloned().ok_or_else(|| bad(&format!("missing plane {n}")));
        let b = UncertaintyBundle {
            patch_id,
            availability,
            samples,
            mean_prob: get("mean_prob")?,
            u_e: get("u_e")?,
            u_a: c.get("u_a").cloned(),
        };
        b.check()?;
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::{build_model, ArchConfig, Variant};

    fn small() -> ArchConfig {
        ArchConfig {
            depth: 2,
            base_width: 4,
            patch_extent: 8,
            markers: 5,
            reduction: 2,
        }
    }

    fn patch(seed: u64) -> Tensor {
        use rand::Rng as _;
        let mut r = StreamKey::new(seed).rng();
        Tensor::new(vec![5, 8, 8], (0..320).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    fn all() -> MarkerSet {
        MarkerSet::all(5)
    }

    #[test]
    fn zero_dropout_gives_exactly_zero_epistemic_map() {
        let m = build_model(&small(), Variant::Epistemic { p: 0.0, last_only: false }, 1).unwrap();
        let x = patch(1);
        let b = mc_epistemic(&m, "p", &x, all(), 20, StreamKey::new(2)).unwrap();
        assert!(b.u_e.data().iter().all(|&v| v == 0.0));
        let det = deterministic_predict(&m, "p", &x, all()).unwrap();
        assert_eq!(b.mean_prob, det.mean_prob);
    }

    #[test]
    fn single_unit_sd_matches_bernoulli_closed_form() {
        let (w, p, a) = (1.5, 0.3, 0.8);
        let unit = SingleUnit { weight: w, p };
        let x = Tensor::full(&[1, 1, 1], a);
        let b = mc_epistemic(&unit, "u", &x, MarkerSet::all(1), 10_000, StreamKey::new(4)).unwrap();
        let hi = 1.0 / (1.0 + (-w * a / (1.0 - p)).exp());
        let expected = (p * (1.0 - p)).sqrt() * (hi - 0.5);
        let got = b.u_e.data()[0];
        assert!((got - expected).abs() / expected < 0.03, "{got} vs {expected}");
    }

    #[test]
    fn bundles_are_reproducible() {
        let m = build_model(&small(), Variant::Combined { p: 0.2, last_only: false }, 1).unwrap();
        let x = patch(3);
        let a = combined_predict(&m, "p", &x, all(), 50, StreamKey::new(9)).unwrap();
        let b = combined_predict(&m, "p", &x, all(), 50, StreamKey::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples, 50);
        assert!(a.u_e.data().iter().all(|&v| (0.0..=0.5).contains(&v)));
        assert!(a.mean_prob.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_ne!(a.u_e.data(), a.u_a.as_ref().unwrap().data());
    }

    #[test]
    fn constant_variance_head_gives_constant_scale() {
        let mut m = build_model(&small(), Variant::Aleatoric, 1).unwrap();
        let c = 0.7;
        let n = m.params.len();
        // last two tensors are the log-variance head weight and bias
        m.params.tensors_mut()[n - 2].data_mut().iter_mut().for_each(|v| *v = 0.0);
        m.params.tensors_mut()[n - 1].data_mut()[0] = c;
        let b = aleatoric_infer(&m, "p", &patch(5), all()).unwrap();
        let expected = (c / 2.0f64).exp();
        assert!(b.u_a.as_ref().unwrap().data().iter().all(|&v| (v - expected).abs() < 1e-15));
        assert!(b.u_e.data().iter().all(|&v| v == 0.0));
        assert_eq!(b, aleatoric_infer(&m, "p", &patch(5), all()).unwrap());
    }

    #[test]
    fn degenerate_combined_matches_single_pass() {
        let m = build_model(&small(), Variant::Combined { p: 0.0, last_only: false }, 2).unwrap();
        let x = patch(6);
        let c = combined_predict(&m, "p", &x, all(), 10, StreamKey::new(1)).unwrap();
        let d = deterministic_predict(&m, "p", &x, all()).unwrap();
        assert!(c.u_e.data().iter().all(|&v| v == 0.0));
        let (cu, du) = (c.u_a.unwrap(), d.u_a.unwrap());
        for (a, b) in cu.data().iter().zip(du.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn fuzzed_scales_are_positive_and_finite() {
        let m = build_model(&small(), Variant::Aleatoric, 3).unwrap();
        for s in 0..20 {
            let b = aleatoric_infer(&m, "p", &patch(100 + s), all()).unwrap();
            assert!(b.u_a.unwrap().data().iter().all(|&v| v > 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn wrong_capabilities_and_zero_samples_are_errors() {
        let plain = build_model(&small(), Variant::Plain, 0).unwrap();
        let x = patch(0);
        assert!(mc_epistemic(&plain, "p", &x, all(), 5, StreamKey::new(0)).is_err());
        assert!(aleatoric_infer(&plain, "p", &x, all()).is_err());
        let ep = build_model(&small(), Variant::Epistemic { p: 0.2, last_only: false }, 0).unwrap();
        assert!(mc_epistemic(&ep, "p", &x, all(), 0, StreamKey::new(0)).is_err());
        assert!(combined_predict(&ep, "p", &x, all(), 5, StreamKey::new(0)).is_err());
    }

    #[test]
    fn single_sample_has_zero_sd_and_doubling_t_moves_mean_little() {
        let m = build_model(&small(), Variant::Epistemic { p: 0.3, last_only: false }, 4).unwrap();
        let x = patch(7);
        let one = mc_epistemic(&m, "p", &x, all(), 1, StreamKey::new(3)).unwrap();
        assert!(one.u_e.data().iter().all(|&v| v == 0.0));
        let a = mc_epistemic(&m, "p", &x, all(), 200, StreamKey::new(3)).unwrap();
        let b = mc_epistemic(&m, "p", &x, all(), 400, StreamKey::new(3)).unwrap();
        let worst = a
            .mean_prob
            .data()
            .iter()
            .zip(b.mean_prob.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(worst < 4.0 * 0.5 / (200f64).sqrt(), "{worst}");
    }

    #[test]
    fn bundle_file_round_trip() {
        let m = build_model(&small(), Variant::Combined { p: 0.2, last_only: false }, 1).unwrap();
        let mut b = combined_predict(&m, "s1_p003", &patch(2), all(), 5, StreamKey::new(1)).unwrap();
        for t in [&mut b.mean_prob, &mut b.u_e, b.u_a.as_mut().unwrap()] {
            crate::nn::checkpoint::round_to_f32(t);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        b.save(&path).unwrap();
        assert_eq!(UncertaintyBundle::load(&path).unwrap(), b);
    }
}
