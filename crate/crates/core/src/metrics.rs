//! Segmentation and regression metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::segnet::MarkerSet;

pub use crate::crossval::{run_crossval, CrossvalConfig, CrossvalResult};

/// `2|y ∩ ŷ| / (|y| + |ŷ|)`; 1 when both are empty.
pub fn f1_from_masks(truth: &[bool], predicted: &[bool]) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(Error::shape(format!(
            "mask of {} pixels vs prediction of {}",
            truth.len(),
            predicted.len()
        )));
    }
    let (mut tp, mut nt, mut np) = (0usize, 0usize, 0usize);
    for (&t, &p) in truth.iter().zip(predicted) {
        nt += t as usize;
        np += p as usize;
        tp += (t && p) as usize;
    }
    if nt + np == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (nt + np) as f64)
}

/// F1 of the class-axis argmax of a `[2, H, W]` probability tensor
/// (foreground wins only when strictly more probable).
pub fn f1_score(mask: &[bool], prob: &Tensor) -> Result<f64> {
    let n = mask.len();
    if prob.rank() != 3 || prob.shape()[0] != 2 || prob.len() != 2 * n {
        return Err(Error::shape(format!(
            "probabilities {:?} vs mask of {n} pixels",
            prob.shape()
        )));
    }
    let pred: Vec<bool> = prob.plane(0).iter().zip(prob.plane(1)).map(|(b, f)| f > b).collect();
    f1_from_masks(mask, &pred)
}

/// F1 from a foreground-probability plane, thresholded as `p > 0.5`.
pub fn f1_from_foreground(mask: &[bool], fg_prob: &[f64]) -> Result<f64> {
    let pred: Vec<bool> = fg_prob.iter().map(|&p| p > 1.0 - p).collect();
    f1_from_masks(mask, &pred)
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::arg(format!(
            "need equal nonempty lengths, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let se: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((se / pred.len() as f64).sqrt())
}

/// `1 - SS_res / SS_tot`; 1 when both are zero, 0 when only `SS_tot` is.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(match (ss_res == 0.0, ss_tot == 0.0) {
        (true, true) => 1.0,
        (false, true) => 0.0,
        _ => 1.0 - ss_res / ss_tot,
    })
}

/// Mean and population SD.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => s[n / 2],
        _ => (s[n / 2 - 1] + s[n / 2]) / 2.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub patch_id: String,
    pub availability: MarkerSet,
    pub fold: usize,
    pub model: String,
    pub f1: f64,
}

impl EvalRecord {
    pub fn key(&self) -> (String, u32, usize) {
        (self.patch_id.clone(), self.availability.bits(), self.fold)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeF1 {
    /// (patch id, availability, fold, model − reference), key-sorted.
    pub deltas: Vec<(String, MarkerSet, usize, f64)>,
    pub median: f64,
    pub mean: f64,
    pub fraction_positive: f64,
}

/// Paired per-key F1 differences `model - reference`.
pub fn relative_f1(model: &[EvalRecord], reference: &[EvalRecord]) -> Result<RelativeF1> {
    let index = |rs: &[EvalRecord]| -> Result<BTreeMap<(String, u32, usize), f64>> {
        let mut m = BTreeMap::new();
        for r in rs {
            if m.insert(r.key(), r.f1).is_some() {
                return Err(Error::arg(format!("duplicate record for {}", r.patch_id)));
            }
        }
        Ok(m)
    };
    let (a, b) = (index(model)?, index(reference)?);
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::arg("model and reference records cover different keys"));
    }
    if a.is_empty() {
        return Err(Error::arg("no records to compare"));
    }
    let deltas: Vec<_> = a
        .iter()
        .map(|((id, bits, fold), f)| (id.clone(), MarkerSet::from_bits(*bits), *fold, f - b[&(id.clone(), *bits, *fold)]))
        .collect();
    let d: Vec<f64> = deltas.iter().map(|x| x.3).collect();
    Ok(RelativeF1 {
        median: median(&d),
        mean: d.iter().sum::<f64>() / d.len() as f64,
        fraction_positive: d.iter().filter(|&&v| v > 0.0).count() as f64 / d.len() as f64,
        deltas,
    })
}
