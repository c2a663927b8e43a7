use evtex_core::attack::{adv_loss, attack_loss, attack_mask, run_attack, AttackConfig};
use evtex_core::autodiff::{finite_diff_check, Tape, Tensor};
use evtex_core::detector::{DetectorParams, RawGrid};
use evtex_core::geometry::BBox;
use evtex_core::pipeline::SceneSetup;
use evtex_core::render::Sensor;
use evtex_core::scenarios::generate_split;
use evtex_core::texture::{BodyRegion, Binarization, LatentGrid, TextureGeometry};
use evtex_core::v2e::{Quantization, V2eConfig};

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A 2x2 grid whose every box covers the whole 16x16 input.
fn grid(tape: &mut Tape, obj: [f64; 4], cls: [f64; 4]) -> RawGrid {
    let o = tape.constant(Tensor::new([4], obj.map(logit).to_vec()).unwrap());
    let c = tape.constant(Tensor::new([4], cls.map(logit).to_vec()).unwrap());
    let b = tape.constant(Tensor::full([16], 0.7));
    RawGrid { obj: o, cls: c, boxes: b, gh: 2, gw: 2, stride: 8 }
}

fn small_setup() -> SceneSetup {
    SceneSetup::standard(Sensor::new(16, 16).unwrap(), TextureGeometry::new(4, 8).unwrap(), V2eConfig::default())
}

fn small_cfg(iterations: usize) -> AttackConfig {
    AttackConfig { iterations, lr: 0.05, replicates: 2, snapshot_every: 2, ..AttackConfig::default() }
}

fn frozen_detector(setup: &SceneSetup) -> DetectorParams {
    let mut d = DetectorParams::init(2 * setup.v2e.bins, 3);
    d.freeze();
    d
}

#[test]
fn loss_weights_the_target_maxima() {
    let mut tape = Tape::new();
    let g = grid(&mut tape, [0.8, 0.1, 0.2, 0.3], [0.6, 0.5, 0.1, 0.1]);
    let gt = Some(BBox::new(2.0, 2.0, 12.0, 12.0));
    let l = adv_loss(&mut tape, &[g], &[gt], 10_000.0, 10_000.0).unwrap();
    assert!((tape.value(l.adv).item() - 14_000.0).abs() < 1e-8);
}

#[test]
fn loss_averages_over_sequences() {
    let mut tape = Tape::new();
    let a = grid(&mut tape, [0.4, 0.1, 0.1, 0.1], [0.5; 4]);
    let b = grid(&mut tape, [0.8, 0.1, 0.1, 0.1], [0.5; 4]);
    let l = adv_loss(&mut tape, &[a, b], &[None, None], 1.0, 1.0).unwrap();
    assert!((tape.value(l.obj).item() - 0.6).abs() < 1e-12);
    assert!((tape.value(l.cls).item() - 0.5).abs() < 1e-12);
}

#[test]
fn loss_vanishes_with_zero_probabilities() {
    let mut tape = Tape::new();
    let o = tape.constant(Tensor::full([4], -2000.0));
    let b = tape.constant(Tensor::zeros([16]));
    let g = RawGrid { obj: o, cls: o, boxes: b, gh: 2, gw: 2, stride: 8 };
    let l = adv_loss(&mut tape, &[g], &[None], 10_000.0, 10_000.0).unwrap();
    assert_eq!(tape.value(l.adv).item(), 0.0);
    assert!(adv_loss(&mut tape, &[], &[], 1.0, 1.0).is_err());
}

#[test]
fn zero_weights_leave_latent_unchanged() {
    let setup = small_setup();
    let det = frozen_detector(&setup);
    let scenes = generate_split(3, 1, 5, 3).unwrap();
    let cfg = AttackConfig { lambda_obj: 0.0, lambda_cls: 0.0, ..small_cfg(4) };
    let r = run_attack(&cfg, &det, &setup, &scenes).unwrap();
    assert_eq!(r.latent, LatentGrid::white(4));
    assert_eq!(r.trace.records.len(), 4);
}

#[test]
fn attack_is_deterministic_and_leaves_detector_untouched() {
    let setup = small_setup();
    let det = frozen_detector(&setup);
    let before = det.hash();
    let scenes = generate_split(3, 1, 5, 3).unwrap();
    let a = run_attack(&small_cfg(6), &det, &setup, &scenes).unwrap();
    let b = run_attack(&small_cfg(6), &det, &setup, &scenes).unwrap();
    assert_eq!(a.latent, b.latent);
    assert_eq!(a.texture, b.texture);
    assert_eq!(a.trace.to_csv(), b.trace.to_csv());
    assert_eq!(a.trace.snapshots.len(), 3);
    assert_eq!(det.hash(), before);
    assert!(a.texture.pixels.iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn attack_requires_frozen_detector() {
    let setup = small_setup();
    let det = DetectorParams::init(2 * setup.v2e.bins, 3);
    let scenes = generate_split(3, 1, 5, 3).unwrap();
    assert!(run_attack(&small_cfg(1), &det, &setup, &scenes).is_err());
    let bad = AttackConfig { lr: 0.0, ..small_cfg(1) };
    let mut frozen = det;
    frozen.freeze();
    assert!(run_attack(&bad, &frozen, &setup, &scenes).is_err());
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let setup = SceneSetup::standard(Sensor::new(8, 8).unwrap(), TextureGeometry::new(4, 8).unwrap(), V2eConfig::default());
    let det = frozen_detector(&setup);
    let scenes = generate_split(2, 1, 9, 3).unwrap();
    let mask = attack_mask(&setup, &BodyRegion::ALL).unwrap();
    let mode = Binarization::Soft { temperature: 1.0 };
    let z0 = Tensor::new([4, 4], (0..16).map(|i| 0.3 * ((i * 7 % 11) as f64 - 5.0)).collect()).unwrap();
    let draws = [(&scenes[0], 0u64)];
    let check = finite_diff_check(
        |tape, z| {
            let l = attack_loss(tape, z, mode, &mask, &det, &setup, &draws, (1.0, 1.0), Quantization::Smooth)?;
            Ok(l.adv)
        },
        &z0,
        1e-5,
    )
    .unwrap();
    assert!(check.max_rel_error < 1e-3, "{check:?}");
    assert!(check.analytic.iter().any(|g| g.abs() > 1e-9));
}
