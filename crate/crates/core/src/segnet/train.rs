use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mask_channels, sample_marker_subset, MarkerSet, SegModel};
use crate::error::{Error, Result};
use crate::nn::{AdamState, Gradients, Graph, Mode, Tensor};
use crate::rng::StreamKey;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Noise samples per pixel in the aleatoric loss.
    pub loss_samples: usize,
    /// Optional (background, foreground) weights for the loss.
    pub class_weights: Option<[f64; 2]>,
    pub marker_sampling: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            lr: 1e-3,
            loss_samples: 10,
            class_weights: None,
            marker_sampling: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.loss_samples == 0 {
            return Err(Error::config("loss_samples must be positive"));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::config("class weights must be positive"));
            }
        }
        Ok(())
    }
}

/// One training patch: `[K, H, W]` channels, one-hot `[2, H, W]` labels and
/// the markers actually acquired for it.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub channels: &'a Tensor,
    pub labels: &'a Tensor,
    pub availability: MarkerSet,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

fn item_gradients(
    model: &SegModel,
    item: &TrainItem<'_>,
    cfg: &TrainConfig,
    key: StreamKey,
) -> Result<(f64, Gradients)> {
    let mut rng = key.rng();
    let avail = if cfg.marker_sampling {
        sample_marker_subset(item.availability, &mut rng)?
    } else {
        item.availability
    };
    let mut g = Graph::new();
    let x = g.input(mask_channels(item.channels, avail), false);
    let (z, s) = model.forward(&mut g, x, avail, Mode::Train, &mut rng)?;
    let weights = cfg.class_weights.as_ref().map(|w| &w[..]);
    let loss = match s {
        Some(s) => g.aleatoric_loss(z, s, item.labels, cfg.loss_samples, &mut rng, weights)?,
        None => {
            let p = g.softmax(z)?;
            g.cross_entropy(p, item.labels, weights)?
        }
    };
    let value = g.value(loss).item()?;
    Ok((value, g.backward(loss)?))
}

/// Mini-batch Adam on cross-entropy (or the aleatoric loss for variants with
/// a variance head). Each patch draws its own marker subset when Marker
/// Sampling is on. Per-patch gradients run in parallel and are summed in
/// batch order, so the result does not depend on the thread count.
pub fn train_segmentation(
    model: &mut SegModel,
    items: &[TrainItem<'_>],
    cfg: &TrainConfig,
    key: StreamKey,
) -> Result<TrainReport> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::arg("no training patches"));
    }
    for it in items {
        model.check_input(it.channels, it.availability)?;
        let [_, h, w] = it.channels.shape()[..] else { unreachable!() };
        if it.labels.shape() != [2, h, w] {
            return Err(Error::shape(format!("labels shape {:?}", it.labels.shape())));
        }
    }
    let mut adam = AdamState::new(cfg.lr);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..cfg.epochs {
        let ekey = key.named("epoch").child(epoch as u64);
        order.shuffle(&mut ekey.named("shuffle").rng());
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let bkey = ekey.child(b as u64);
            let frozen: &SegModel = model;
            let results: Vec<(f64, Gradients)> = batch
                .par_iter()
                .map(|&i| item_gradients(frozen, &items[i], cfg, bkey.child(i as u64)))
                .collect::<Result<_>>()?;
            model.params.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for (loss, grads) in &results {
                total += loss;
                model.params.accumulate(grads, scale)?;
            }
            drop(results);
            adam.step(&mut model.params)?;
            report.steps += 1;
        }
        report.epoch_losses.push(total / items.len() as f64);
    }
    Ok(report)
}
