use super::*;
use crate::nn::Tensor;

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

#[test]
fn marker_set_encoding_and_names() {
    let m = MarkerSet::from_markers(&[2, 4]).unwrap();
    assert_eq!(m.bits(), 0b1010);
    assert_eq!(m.to_string(), "m24");
    assert_eq!("m24".parse::<MarkerSet>().unwrap(), m);
    assert_eq!(m.indicator(5), vec![0.0, 1.0, 0.0, 1.0, 0.0]);
    assert_eq!(MarkerSet::all(5).bits(), 31);
    assert_eq!(MarkerSet::from_markers(&[1]).unwrap().combination_index(), 0);
    assert!("135".parse::<MarkerSet>().is_err());
    let json = serde_json::to_string(&m).unwrap();
    assert_eq!(json, "\"m24\"");
}

#[test]
fn same_seed_gives_identical_parameters() {
    let a = build_model(&small(), Variant::Plain, 7).unwrap();
    let b = build_model(&small(), Variant::Plain, 7).unwrap();
    let c = build_model(&small(), Variant::Plain, 8).unwrap();
    let flat = |m: &SegModel| m.params.iter().flat_map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
    assert!(a.parameter_count() > 0);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = small();
    cfg.patch_extent = 10;
    assert!(build_model(&cfg, Variant::Plain, 0).is_err());
    let mut cfg = small();
    cfg.base_width = 3;
    assert!(build_model(&cfg, Variant::Plain, 0).is_err());
    assert!(build_model(&small(), Variant::Epistemic { p: 1.0, last_only: false }, 0).is_err());
}

#[test]
fn first_conv_consumes_all_markers() {
    let m = build_model(&ArchConfig::default(), Variant::Plain, 0).unwrap();
    let (_, first) = m.params.iter().next().unwrap();
    assert_eq!(first.shape(), &[16, 5, 3, 3]);
}

#[test]
fn aleatoric_variant_emits_two_outputs() {
    let mut rng = StreamKey::new(0).rng();
    let all = MarkerSet::all(5);
    for variant in [Variant::Aleatoric, Variant::Combined { p: 0.2, last_only: false }] {
        let m = build_model(&small(), variant, 1).unwrap();
        let out = m.seg_forward(&patch(1), all, Mode::DetInfer, &mut rng).unwrap();
        assert_eq!(out.logits.shape(), &[2, 8, 8]);
        assert_eq!(out.log_var.unwrap().shape(), &[1, 8, 8]);
    }
    let m = build_model(&small(), Variant::Plain, 1).unwrap();
    let out = m.seg_forward(&patch(1), all, Mode::DetInfer, &mut rng).unwrap();
    assert!(out.log_var.is_none());
}

#[test]
fn det_infer_is_deterministic() {
    let m = build_model(&small(), Variant::Epistemic { p: 0.2, last_only: false }, 3).unwrap();
    let all = MarkerSet::all(5);
    let a = m.seg_forward(&patch(2), all, Mode::DetInfer, &mut StreamKey::new(1).rng()).unwrap();
    let b = m.seg_forward(&patch(2), all, Mode::DetInfer, &mut StreamKey::new(2).rng()).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn mc_infer_varies_with_substream() {
    for last_only in [false, true] {
        let m = build_model(&small(), Variant::Epistemic { p: 0.2, last_only }, 3).unwrap();
        let all = MarkerSet::all(5);
        let a = m.seg_forward(&patch(2), all, Mode::McInfer, &mut StreamKey::new(1).rng()).unwrap();
        let b = m.seg_forward(&patch(2), all, Mode::McInfer, &mut StreamKey::new(2).rng()).unwrap();
        assert_ne!(a.logits, b.logits);
    }
}

#[test]
fn availability_changes_output_through_gates() {
    let m = build_model(&small(), Variant::Plain, 4).unwrap();
    let mut x = patch(3);
    x.plane_mut(4).iter_mut().for_each(|v| *v = 0.0);
    let with = MarkerSet::all(5);
    let without = MarkerSet::from_markers(&[1, 2, 3, 4]).unwrap();
    let mut rng = StreamKey::new(0).rng();
    let a = m.seg_forward(&x, with, Mode::DetInfer, &mut rng).unwrap();
    let b = m.seg_forward(&x, without, Mode::DetInfer, &mut rng).unwrap();
    assert_ne!(a.logits, b.logits);
}

#[test]
fn incompatible_extent_is_rejected() {
    let m = build_model(&small(), Variant::Plain, 0).unwrap();
    let x = Tensor::zeros(&[5, 6, 6]);
    let err = m.seg_forward(&x, MarkerSet::all(5), Mode::DetInfer, &mut StreamKey::new(0).rng());
    assert!(matches!(err, Err(Error::Shape(_))));
    let x = Tensor::zeros(&[4, 8, 8]);
    assert!(m.seg_forward(&x, MarkerSet::all(5), Mode::DetInfer, &mut StreamKey::new(0).rng()).is_err());
}

fn gate_values(params: &ParamSet, gate: &GateIds, avail: MarkerSet, channels: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let f = g.input(Tensor::full(&[channels, 1, 1], 1.0), false);
    let a = g.constant(Tensor::new(vec![5], avail.indicator(5)).unwrap());
    let out = marker_excite(&mut g, params, f, a, gate).unwrap();
    g.value(out).data().to_vec()
}

#[test]
fn zero_gate_halves_features() {
    let mut m = build_model(&small(), Variant::Plain, 0).unwrap();
    m.params.tensors_mut().iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
    let gate = m.gates()[0];
    let v = gate_values(&m.params, &gate, MarkerSet::all(5), 4);
    assert_eq!(v, vec![0.5; 4]);
}

#[test]
fn gates_differ_between_availabilities_and_stay_in_unit_interval() {
    let m = build_model(&small(), Variant::Plain, 9).unwrap();
    let gate = m.gates()[1];
    let a = gate_values(&m.params, &gate, MarkerSet::from_markers(&[1, 3]).unwrap(), 8);
    let b = gate_values(&m.params, &gate, MarkerSet::from_markers(&[2, 5]).unwrap(), 8);
    assert_ne!(a, b);
    assert!(a.iter().chain(&b).all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn gate_channel_mismatch_is_an_error() {
    let m = build_model(&small(), Variant::Plain, 9).unwrap();
    let gate = m.gates()[0];
    let mut g = Graph::new();
    let f = g.input(Tensor::zeros(&[7, 1, 1]), false);
    let a = g.constant(Tensor::zeros(&[5]));
    assert!(marker_excite(&mut g, &m.params, f, a, &gate).is_err());
}

#[test]
fn subset_sampling_is_uniform_and_nonempty() {
    let mut rng = StreamKey::new(42).rng();
    let single = MarkerSet::from_markers(&[3]).unwrap();
    for _ in 0..100 {
        assert_eq!(sample_marker_subset(single, &mut rng).unwrap(), single);
    }
    let pair = MarkerSet::from_markers(&[1, 2]).unwrap();
    let mut counts = [0usize; 4];
    let n = 30_000;
    for _ in 0..n {
        let s = sample_marker_subset(pair, &mut rng).unwrap();
        assert!(!s.is_empty() && s.is_subset_of(pair));
        counts[s.bits() as usize] += 1;
    }
    for c in &counts[1..] {
        let f = *c as f64 / n as f64;
        assert!((f - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
    }
    assert!(sample_marker_subset(MarkerSet::EMPTY, &mut rng).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let m = build_model(&small(), Variant::Combined { p: 0.2, last_only: true }, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seg.bin");
    m.save(&path).unwrap();
    let back = SegModel::load(&path).unwrap();
    assert_eq!(back.variant, m.variant);
    assert_eq!(back.cfg, m.cfg);
    let bytes = std::fs::read(&path).unwrap();
    back.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert!(SegModel::load(&dir.path().join("missing.bin")).unwrap_err().is_missing_input());
}

fn toy_items() -> (Vec<Tensor>, Vec<Tensor>) {
    // foreground where marker 1 is bright
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in 0..4 {
        let x = patch(100 + s);
        let mut y = Tensor::zeros(&[2, 8, 8]);
        for i in 0..64 {
            let fg = x.plane(0)[i] > 0.5;
            y.data_mut()[if fg { 64 + i } else { i }] = 1.0;
        }
        xs.push(x);
        ys.push(y);
    }
    (xs, ys)
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let (xs, ys) = toy_items();
    let items: Vec<TrainItem> = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| TrainItem {
            channels: x,
            labels: y,
            availability: MarkerSet::all(5),
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 15,
        batch_size: 2,
        marker_sampling: false,
        loss_samples: 4,
        ..TrainConfig::default()
    };
    let run = |variant| {
        let mut m = build_model(&small(), variant, 11).unwrap();
        let r = train_segmentation(&mut m, &items, &cfg, StreamKey::new(3)).unwrap();
        (r, m.params.iter().map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>())
    };
    let (r1, p1) = run(Variant::Plain);
    assert!(r1.epoch_losses.last().unwrap() < &r1.epoch_losses[0], "{:?}", r1.epoch_losses);
    assert_eq!(r1.steps, 30);
    let (_, p2) = run(Variant::Plain);
    assert_eq!(p1, p2);
    let (r3, _) = run(Variant::Combined { p: 0.2, last_only: false });
    assert!(r3.epoch_losses.iter().all(|l| l.is_finite()));
}
