//! Fast oracle and gradient checks runnable from a release binary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::{attack_loss, attack_mask, decode_latent, encode_latent};
use crate::autodiff::{finite_diff_check, Conv2dSpec, Tape, Tensor, Var};
use crate::detector::DetectorParams;
use crate::error::Result;
use crate::eval::{compute_ap, compute_seqasr, ScoredBox, MATCH_IOU};
use crate::events::{read_events_binary, write_events_binary};
use crate::geometry::BBox;
use crate::pipeline::SceneSetup;
use crate::render::{FrameSequence, Sensor};
use crate::scenarios::generate_split;
use crate::texture::{binarize, Binarization, BodyRegion, LatentGrid, TextureGeometry};
use crate::v2e::{convert, v2e_oracle, v2e_oracle_counts, v2e_sequence, Quantization, V2eConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Suite = fn() -> Result<(bool, String)>;

pub fn run_all() -> Vec<SuiteResult> {
    let suites: [(&'static str, Suite); 6] = [
        ("v2e-oracle", v2e_oracle_suite),
        ("event-conservation", conservation_suite),
        ("ste-contract", ste_suite),
        ("gradients", gradient_suite),
        ("metrics", metrics_suite),
        ("containers", container_suite),
    ];
    suites
        .iter()
        .map(|(name, f)| match f() {
            Ok((passed, detail)) => SuiteResult { name, passed, detail },
            Err(e) => SuiteResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

fn random_sequence(rng: &mut ChaCha8Rng, w: usize, h: usize, n: usize) -> Result<FrameSequence> {
    let frames = (0..n).map(|_| (0..w * h).map(|_| rng.gen_range(0.01..1.0)).collect()).collect();
    FrameSequence::new(Sensor::new(w, h)?, frames, (1..=n as u64).map(|k| 20_000 * k).collect())
}

fn v2e_oracle_suite() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = V2eConfig::default();
    let cases = 20;
    for case in 0..cases {
        let seq = random_sequence(&mut rng, 16, 16, 10)?;
        let mut tape = Tape::new();
        let frames: Vec<Var> = seq
            .frames
            .iter()
            .map(|f| Tensor::new([16, 16], f.clone()).map(|t| tape.constant(t)))
            .collect::<Result<_>>()?;
        let out = v2e_sequence(&mut tape, &frames, &seq.times, seq.sensor, &cfg, Quantization::Quantized)?;
        let slow = v2e_oracle_counts(&seq, cfg.theta)?;
        for (fast, s) in out.intervals.iter().zip(&slow) {
            let same = |v: Var, o: &[u32]| tape.value(v).data().iter().zip(o).all(|(a, b)| *a == *b as f64);
            if !same(fast.pos, &s.pos) || !same(fast.neg, &s.neg) {
                return Ok((false, format!("count mismatch in case {case}")));
            }
        }
        if convert(&seq, &cfg)?.1 != v2e_oracle(&seq, cfg.theta)? {
            return Ok((false, format!("stream mismatch in case {case}")));
        }
    }
    Ok((true, format!("{cases} sequences of 16x16x10 equal")))
}

fn conservation_suite() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let theta = V2eConfig::default().theta;
    for case in 0..20 {
        let seq = random_sequence(&mut rng, 8, 8, 6)?;
        let counts = v2e_oracle_counts(&seq, theta)?;
        let last = seq.frames.len() - 1;
        for i in 0..64 {
            let net: i64 = counts.iter().map(|c| c.pos[i] as i64 - c.neg[i] as i64).sum();
            let change = ((seq.frames[last][i].ln() - seq.frames[0][i].ln()) / theta).floor() as i64;
            if net != change {
                return Ok((false, format!("pixel {i} of case {case}: net {net} vs {change}")));
            }
        }
    }
    Ok((true, "net events equal the quantized log change on 20 sequences".into()))
}

fn ste_suite() -> Result<(bool, String)> {
    let values = vec![0.0, 0.25, 0.5, 0.5 + 1e-12, 0.75, 1.0];
    let mut tape = Tape::new();
    let u = tape.leaf(Tensor::new([values.len()], values)?);
    let b = binarize(&mut tape, u, Binarization::Hard)?;
    let out = tape.value(b).data().to_vec();
    let total = tape.sum(b);
    let grad = tape.backward(total)?.wrt(&tape, u).into_data();

    let mut t2 = Tape::new();
    let x = t2.leaf(Tensor::new([3], vec![-1.3, 0.2, 2.7])?);
    let f = t2.ste_floor(x);
    let s = t2.sum(f);
    let floor_grad = t2.backward(s)?.wrt(&t2, x).into_data();

    let ok = out == [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        && grad.iter().all(|&g| g == 1.0)
        && floor_grad.iter().all(|&g| g == 1.0)
        && t2.value(f).data() == [-2.0, 0.0, 2.0];
    Ok((ok, "hard binarize in {0,1}, u = 0.5 maps to 0, identity backward".into()))
}

fn gradient_suite() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut rand_tensor = |shape: &[usize], lo: f64, hi: f64| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
    };
    let x = rand_tensor(&[12], 0.2, 2.0)?;
    let img = rand_tensor(&[5, 5], 0.0, 1.0)?;
    let input = rand_tensor(&[2, 6, 6], -1.0, 1.0)?;
    let weight = rand_tensor(&[3, 2, 3, 3], -1.0, 1.0)?;

    let mut worst = 0.0f64;
    let checks: Vec<Box<dyn Fn(&mut Tape, Var) -> Result<Var>>> = vec![
        Box::new(|t, v| {
            let s = t.sigmoid(v);
            Ok(t.sum(s))
        }),
        Box::new(|t, v| {
            let l = t.log(v)?;
            let sq = t.mul(l, l)?;
            Ok(t.sum(sq))
        }),
        Box::new(|t, v| {
            let e = t.exp(v);
            Ok(t.mean(e))
        }),
    ];
    for f in &checks {
        worst = worst.max(finite_diff_check(f, &x, 1e-6)?.max_rel_error);
    }
    let coords = vec![[0.7, 1.2], [2.3, 3.9], [3.5, 0.4]];
    worst = worst.max(
        finite_diff_check(
            |t, v| {
                let s = t.bilinear_sample(v, coords.clone(), &[3])?;
                let sq = t.mul(s, s)?;
                Ok(t.sum(sq))
            },
            &img,
            1e-6,
        )?
        .max_rel_error,
    );
    let spec = Conv2dSpec { stride: 2, padding: 1 };
    worst = worst.max(
        finite_diff_check(
            |t, v| {
                let w = t.constant(weight.clone());
                let y = t.conv2d(v, w, None, spec)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &input,
            1e-6,
        )?
        .max_rel_error,
    );
    let primitives_ok = worst < 1e-6;

    let setup = SceneSetup::standard(Sensor::new(8, 8)?, TextureGeometry::new(4, 8)?, V2eConfig::default());
    let mut det = DetectorParams::init(2 * setup.v2e.bins, 3);
    det.freeze();
    let scenes = generate_split(2, 1, 9, 3)?;
    let mask = attack_mask(&setup, &BodyRegion::ALL)?;
    let z0 = Tensor::new([4, 4], (0..16).map(|i| 0.3 * ((i * 7 % 11) as f64 - 5.0)).collect())?;
    let draws = [(&scenes[0], 0u64)];
    let mode = Binarization::Soft { temperature: 1.0 };
    let e2e = finite_diff_check(
        |t, z| Ok(attack_loss(t, z, mode, &mask, &det, &setup, &draws, (1.0, 1.0), Quantization::Smooth)?.adv),
        &z0,
        1e-5,
    )?;
    Ok((
        primitives_ok && e2e.max_rel_error < 1e-3,
        format!("primitives max rel err {worst:.2e}, end-to-end {:.2e}", e2e.max_rel_error),
    ))
}

fn metrics_suite() -> Result<(bool, String)> {
    let g = BBox::new(0.0, 0.0, 10.0, 10.0);
    let fp = ScoredBox {
        sequence: 0,
        bbox: BBox::new(30.0, 30.0, 40.0, 40.0),
        conf: 0.9,
    };
    let tp = ScoredBox { sequence: 0, bbox: g, conf: 0.5 };
    let tp2 = ScoredBox { sequence: 1, bbox: g, conf: 0.8 };
    let ap = compute_ap(&[fp, tp, tp2], &[Some(g), Some(g)], MATCH_IOU).unwrap_or(f64::NAN);
    let expected = 2.0 / 3.0;
    let mut flags = vec![true; 4];
    flags.extend([false; 6]);
    let ok = (ap - expected).abs() < 1e-12
        && compute_ap(&[tp], &[None], MATCH_IOU).is_none()
        && (compute_seqasr(&flags)? - 0.6).abs() < 1e-15
        && compute_seqasr(&[]).is_err();
    Ok((ok, format!("AP {ap:.6} (expected {expected:.6}), SeqASR examples")))
}

fn container_suite() -> Result<(bool, String)> {
    let det = DetectorParams::init(4, 5);
    let back = DetectorParams::from_bytes(&det.to_bytes())?;
    let latent = LatentGrid {
        n: 3,
        z: (0..9).map(|i| i as f64 - 4.5).collect(),
    };
    let seq = random_sequence(&mut ChaCha8Rng::seed_from_u64(14), 6, 5, 4)?;
    let (_, stream) = convert(&seq, &V2eConfig::default())?;
    let ok = back.tensors() == det.tensors()
        && back.hash() == det.hash()
        && decode_latent(&encode_latent(&latent))? == latent
        && read_events_binary(&write_events_binary(&stream)?)?.events == stream.events;
    Ok((ok, "EVDT, latent and EVTX round trips".into()))
}
