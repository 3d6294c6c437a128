//! Marker-sampling / marker-excite UNet with optional MC dropout and an
//! aleatoric log-variance head.

mod train;

use std::fmt;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nn::checkpoint::Container;
use crate::nn::{Graph, Mode, ParamId, ParamSet, Tensor, Var};
use crate::rng::{Rng, StreamKey};

pub use train::{train_segmentation, TrainConfig, TrainItem, TrainReport};

/// Subset of markers `1..=K`, stored as a bitmask where marker `k` is bit
/// `k - 1`. The bitmask value is the canonical integer encoding.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct MarkerSet(u32);

impl MarkerSet {
    pub const EMPTY: MarkerSet = MarkerSet(0);

    pub fn from_bits(bits: u32) -> Self {
        MarkerSet(bits)
    }

    /// `MarkerSet::all(5)` is `m12345`.
    pub fn all(k: usize) -> Self {
        MarkerSet(((1u64 << k) - 1) as u32)
    }

    /// Builds from 1-based marker indices.
    pub fn from_markers(markers: &[usize]) -> Result<Self> {
        let mut bits = 0u32;
        for &m in markers {
            if m == 0 || m > 31 {
                return Err(Error::arg(format!("marker index {m} out of range")));
            }
            bits |= 1 << (m - 1);
        }
        Ok(MarkerSet(bits))
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn contains(self, marker: usize) -> bool {
        marker >= 1 && marker <= 32 && self.0 & (1 << (marker - 1)) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset_of(self, other: MarkerSet) -> bool {
        self.0 & !other.0 == 0
    }

    /// 1-based marker indices in ascending order.
    pub fn markers(self) -> Vec<usize> {
        (1..=32).filter(|&m| self.contains(m)).collect()
    }

    /// K-length binary availability vector.
    pub fn indicator(self, k: usize) -> Vec<f64> {
        (1..=k).map(|m| if self.contains(m) { 1.0 } else { 0.0 }).collect()
    }

    /// Position in the ascending enumeration of nonempty subsets of `1..=K`.
    pub fn combination_index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn highest_marker(self) -> usize {
        32 - self.0.leading_zeros() as usize
    }
}

impl fmt::Display for MarkerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m")?;
        for m in self.markers() {
            write!(f, "{m}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for MarkerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl std::str::FromStr for MarkerSet {
    type Err = Error;

    /// Parses `m135` (single-digit markers).
    fn from_str(s: &str) -> Result<Self> {
        let digits = s
            .strip_prefix('m')
            .ok_or_else(|| Error::arg(format!("marker set {s:?} must start with 'm'")))?;
        let markers = digits
            .chars()
            .map(|c| {
                c.to_digit(10)
                    .map(|d| d as usize)
                    .ok_or_else(|| Error::arg(format!("bad marker digit in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        MarkerSet::from_markers(&markers)
    }
}

impl From<MarkerSet> for String {
    fn from(m: MarkerSet) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for MarkerSet {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Uniform draw over the `2^|available| - 1` nonempty subsets.
pub fn sample_marker_subset(available: MarkerSet, rng: &mut Rng) -> Result<MarkerSet> {
    if available.is_empty() {
        return Err(Error::arg("cannot sample from an empty marker set"));
    }
    let members = available.markers();
    let n = members.len() as u32;
    let code = rng.random_range(1..(1u64 << n)) as u32;
    let mut bits = 0;
    for (i, m) in members.iter().enumerate() {
        if code & (1 << i) != 0 {
            bits |= 1 << (m - 1);
        }
    }
    Ok(MarkerSet(bits))
}

/// Zeroes every channel of `[K, H, W]` not in `keep`.
pub fn mask_channels(channels: &Tensor, keep: MarkerSet) -> Tensor {
    let mut out = channels.clone();
    for c in 0..out.shape()[0] {
        if !keep.contains(c + 1) {
            out.plane_mut(c).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Number of 2×2 down-sampling steps.
    pub depth: usize,
    pub base_width: usize,
    pub patch_extent: usize,
    pub markers: usize,
    /// Hidden width of the gate's first FC layer is `channels / reduction`.
    pub reduction: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            depth: 3,
            base_width: 16,
            patch_extent: 64,
            markers: 5,
            reduction: 2,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.base_width < 4 {
            return Err(Error::config("base width must be at least 4"));
        }
        if self.patch_extent == 0 || self.patch_extent % (1 << self.depth) != 0 {
            return Err(Error::config(format!(
                "patch extent {} not divisible by 2^{}",
                self.patch_extent, self.depth
            )));
        }
        if self.markers == 0 || self.markers > 16 {
            return Err(Error::config("marker count must be in 1..=16"));
        }
        if self.reduction == 0 {
            return Err(Error::config("reduction ratio must be positive"));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    Plain,
    Epistemic {
        p: f64,
        #[serde(default)]
        last_only: bool,
    },
    Aleatoric,
    Combined {
        p: f64,
        #[serde(default)]
        last_only: bool,
    },
}

impl Variant {
    pub fn dropout_p(&self) -> Option<f64> {
        match *self {
            Variant::Epistemic { p, .. } | Variant::Combined { p, .. } => Some(p),
            _ => None,
        }
    }

    pub fn last_only(&self) -> bool {
        matches!(
            *self,
            Variant::Epistemic { last_only: true, .. } | Variant::Combined { last_only: true, .. }
        )
    }

    pub fn has_variance_head(&self) -> bool {
        matches!(self, Variant::Aleatoric | Variant::Combined { .. })
    }

    pub fn name(&self) -> String {
        match *self {
            Variant::Plain => "plain".into(),
            Variant::Epistemic { p, last_only } => {
                format!("epistemic_p{p}{}", if last_only { "_last" } else { "" })
            }
            Variant::Aleatoric => "aleatoric".into(),
            Variant::Combined { p, last_only } => {
                format!("combined_p{p}{}", if last_only { "_last" } else { "" })
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(p) = self.dropout_p() {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("dropout p={p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerIds {
    w: ParamId,
    b: ParamId,
}

/// Parameters of one marker-excite gate: K -> hidden -> C.
#[derive(Clone, Copy, Debug)]
pub struct GateIds {
    fc1: LayerIds,
    fc2: LayerIds,
}

#[derive(Clone, Debug)]
struct EncoderStage {
    convs: [LayerIds; 2],
    gate: GateIds,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: LayerIds,
    convs: [LayerIds; 2],
    gate: GateIds,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<EncoderStage>,
    decoder: Vec<DecoderStage>,
    head: LayerIds,
    var_head: Option<LayerIds>,
}

/// Output of one forward pass.
#[derive(Clone, Debug)]
pub struct SegPrediction {
    /// `[2, H, W]`
    pub logits: Tensor,
    /// `[1, H, W]`, present for variants with a variance head.
    pub log_var: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub cfg: ArchConfig,
    pub variant: Variant,
    pub params: ParamSet,
    layout: Layout,
}

/// Number of output classes (background, foreground).
pub const CLASSES: usize = 2;

fn add_conv(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize, rng: &mut Rng) -> LayerIds {
    let (w, b) = ps.add_layer(name, &[cout, cin, k, k], rng);
    LayerIds { w, b }
}

fn add_gate(ps: &mut ParamSet, name: &str, markers: usize, channels: usize, r: usize, rng: &mut Rng) -> GateIds {
    let hidden = (channels / r).max(1);
    let (w1, b1) = ps.add_layer(&format!("{name}.fc1"), &[hidden, markers], rng);
    let (w2, b2) = ps.add_layer(&format!("{name}.fc2"), &[channels, hidden], rng);
    GateIds {
        fc1: LayerIds { w: w1, b: b1 },
        fc2: LayerIds { w: w2, b: b2 },
    }
}

/// Builds a model with Kaiming-uniform weights and zero biases drawn from
/// `seed`.
pub fn build_model(cfg: &ArchConfig, variant: Variant, seed: u64) -> Result<SegModel> {
    cfg.validate()?;
    variant.validate()?;
    let mut rng = StreamKey::new(seed).named("seg-init").rng();
    let mut ps = ParamSet::new();
    let k = cfg.markers;
    let mut encoder = Vec::new();
    let mut cin = k;
    for level in 0..=cfg.depth {
        let c = cfg.width(level);
        let convs = [
            add_conv(&mut ps, &format!("enc{level}.conv1"), cin, c, 3, &mut rng),
            add_conv(&mut ps, &format!("enc{level}.conv2"), c, c, 3, &mut rng),
        ];
        let gate = add_gate(&mut ps, &format!("enc{level}.gate"), k, c, cfg.reduction, &mut rng);
        encoder.push(EncoderStage { convs, gate });
        cin = c;
    }
    let mut decoder = Vec::new();
    for level in (0..cfg.depth).rev() {
        let c = cfg.width(level);
        let up = add_conv(&mut ps, &format!("dec{level}.up"), cin, c, 3, &mut rng);
        let convs = [
            add_conv(&mut ps, &format!("dec{level}.conv1"), 2 * c, c, 3, &mut rng),
            add_conv(&mut ps, &format!("dec{level}.conv2"), c, c, 3, &mut rng),
        ];
        let gate = add_gate(&mut ps, &format!("dec{level}.gate"), k, c, cfg.reduction, &mut rng);
        decoder.push(DecoderStage { up, convs, gate });
        cin = c;
    }
    let head = add_conv(&mut ps, "head", cin, CLASSES, 1, &mut rng);
    let var_head = variant
        .has_variance_head()
        .then(|| add_conv(&mut ps, "log_var_head", cin, 1, 1, &mut rng));
    Ok(SegModel {
        cfg: cfg.clone(),
        variant,
        params: ps,
        layout: Layout {
            encoder,
            decoder,
            head,
            var_head,
        },
    })
}

/// Feature-wise gate conditioned on marker availability:
/// `features * sigmoid(FC2(relu(FC1(indicator))))`, one gate value per channel.
pub fn marker_excite<'a>(
    g: &mut Graph<'a>,
    params: &'a ParamSet,
    features: Var,
    availability: Var,
    gate: &GateIds,
) -> Result<Var> {
    let c = g.value(features).shape()[0];
    let out_width = params.get(gate.fc2.w).shape()[0];
    if out_width != c {
        return Err(Error::shape(format!(
            "gate for {out_width} channels applied to {c} channels"
        )));
    }
    let w1 = g.param(params, gate.fc1.w);
    let b1 = g.param(params, gate.fc1.b);
    let w2 = g.param(params, gate.fc2.w);
    let b2 = g.param(params, gate.fc2.b);
    let h = g.dense(availability, w1, Some(b1))?;
    let h = g.relu(h)?;
    let h = g.dense(h, w2, Some(b2))?;
    let gv = g.sigmoid(h)?;
    g.channel_scale(features, gv)
}

impl SegModel {
    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Gate parameters of every stage in forward order (encoder, then decoder).
    pub fn gates(&self) -> Vec<GateIds> {
        self.layout
            .encoder
            .iter()
            .map(|s| s.gate)
            .chain(self.layout.decoder.iter().map(|s| s.gate))
            .collect()
    }

    pub fn has_dropout(&self) -> bool {
        self.variant.dropout_p().is_some()
    }

    fn conv<'a>(&'a self, g: &mut Graph<'a>, x: Var, ids: LayerIds) -> Result<Var> {
        let w = g.param(&self.params, ids.w);
        let b = g.param(&self.params, ids.b);
        g.conv2d(x, w, Some(b))
    }

    fn conv_block<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x: Var,
        ids: LayerIds,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let y = self.conv(g, x, ids)?;
        let y = g.relu(y)?;
        match self.variant.dropout_p() {
            Some(p) if !self.variant.last_only() => g.dropout(y, p, mode.stochastic(), rng),
            _ => Ok(y),
        }
    }

    pub fn check_input(&self, patch: &Tensor, availability: MarkerSet) -> Result<()> {
        let [k, h, w] = patch.shape()[..] else {
            return Err(Error::shape(format!("patch shape {:?}", patch.shape())));
        };
        if k != self.cfg.markers {
            return Err(Error::shape(format!(
                "patch has {k} channels, model expects {}",
                self.cfg.markers
            )));
        }
        let step = 1 << self.cfg.depth;
        if h == 0 || w == 0 || h % step != 0 || w % step != 0 {
            return Err(Error::shape(format!(
                "patch extent {h}x{w} incompatible with depth {}",
                self.cfg.depth
            )));
        }
        if availability.is_empty() || availability.highest_marker() > k {
            return Err(Error::arg(format!(
                "availability {availability} invalid for {k} markers"
            )));
        }
        Ok(())
    }

    /// Records a forward pass on `g`. Returns (logits, log-variance).
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x: Var,
        availability: MarkerSet,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Var, Option<Var>)> {
        self.check_input(g.value(x), availability)?;
        let a = g.constant(Tensor::new(
            vec![self.cfg.markers],
            availability.indicator(self.cfg.markers),
        )?);
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for (level, stage) in self.layout.encoder.iter().enumerate() {
            if level > 0 {
                h = g.max_pool(h, 2, 2)?;
            }
            h = self.conv_block(g, h, stage.convs[0], mode, rng)?;
            h = self.conv_block(g, h, stage.convs[1], mode, rng)?;
            h = marker_excite(g, &self.params, h, a, &stage.gate)?;
            if level < self.cfg.depth {
                skips.push(h);
            }
        }
        for stage in &self.layout.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            h = g.upsample_nearest(h, 2)?;
            h = self.conv_block(g, h, stage.up, mode, rng)?;
            h = g.concat(h, skip)?;
            h = self.conv_block(g, h, stage.convs[0], mode, rng)?;
            h = self.conv_block(g, h, stage.convs[1], mode, rng)?;
            h = marker_excite(g, &self.params, h, a, &stage.gate)?;
        }
        if let Some(p) = self.variant.dropout_p() {
            if self.variant.last_only() {
                h = g.dropout(h, p, mode.stochastic(), rng)?;
            }
        }
        let logits = self.conv(g, h, self.layout.head)?;
        let log_var = match self.layout.var_head {
            Some(ids) => Some(self.conv(g, h, ids)?),
            None => None,
        };
        Ok((logits, log_var))
    }

    /// Forward pass without gradient bookkeeping. Channels outside
    /// `availability` are expected to be zero already.
    pub fn seg_forward(
        &self,
        patch: &Tensor,
        availability: MarkerSet,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<SegPrediction> {
        let mut g = Graph::new();
        let x = g.input(patch.clone(), false);
        let (z, s) = self.forward(&mut g, x, availability, mode, rng)?;
        Ok(SegPrediction {
            logits: g.value(z).clone(),
            log_var: s.map(|s| g.value(s).clone()),
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({
            "model": "msme_unet",
            "arch": self.cfg,
            "variant": self.variant,
            "parameter_count": self.parameter_count(),
        }));
        for (name, t) in self.params.iter() {
            c.push(name, t.clone());
        }
        c
    }

    pub fn from_container(c: Container, origin: &Path) -> Result<Self> {
        if c.meta.get("model").and_then(|v| v.as_str()) != Some("msme_unet") {
            return Err(Error::format(origin, "not a segmentation checkpoint"));
        }
        let cfg: ArchConfig = serde_json::from_value(c.meta["arch"].clone())
            .map_err(|e| Error::format(origin, e.to_string()))?;
        let variant: Variant = serde_json::from_value(c.meta["variant"].clone())
            .map_err(|e| Error::format(origin, e.to_string()))?;
        let mut model = build_model(&cfg, variant, 0)?;
        model.params.load_values(c.tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?, path)
    }
}

#[cfg(test)]
mod tests;
