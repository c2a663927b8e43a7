//! Adversarial texture optimization through the full render, V2E and
//! detector chain.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::container;
use crate::detector::{forward, DetectorParams, RawGrid};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::pipeline::{simulate_on_tape, SceneSetup};
use crate::scenarios::SceneSpec;
use crate::texture::{
    realize_texture, texture_from_latent, Binarization, BodyMask, BodyRegion, LatentGrid, TemperatureSchedule,
    TextureMap,
};
use crate::v2e::Quantization;

pub const LATENT_MAGIC: &[u8; 4] = b"EVLG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub lambda_obj: f64,
    pub lambda_cls: f64,
    pub lr: f64,
    pub iterations: usize,
    /// Sequences per loss evaluation (`M`).
    pub batch: usize,
    /// Loss evaluations whose gradients are averaged before each step.
    pub accumulate: usize,
    pub schedule: TemperatureSchedule,
    pub seed: u64,
    pub regions: Vec<BodyRegion>,
    /// Texture snapshot period in iterations; 0 disables snapshots.
    pub snapshot_every: usize,
    /// Pose-jittered instances drawn per training scene.
    pub replicates: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            lambda_obj: 10_000.0,
            lambda_cls: 10_000.0,
            lr: 1e-4,
            iterations: 11_500,
            batch: 1,
            accumulate: 1,
            schedule: TemperatureSchedule::default(),
            seed: 0,
            regions: BodyRegion::ALL.to_vec(),
            snapshot_every: 0,
            replicates: 16,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_obj >= 0.0 && self.lambda_cls >= 0.0) {
            return Err(Error::Config("attack.lambda_obj and attack.lambda_cls must be >= 0".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("attack.lr must be positive, got {}", self.lr)));
        }
        if self.iterations == 0 || self.batch == 0 || self.accumulate == 0 || self.replicates == 0 {
            return Err(Error::Config("attack.iterations, batch, accumulate and replicates must be >= 1".into()));
        }
        let s = self.schedule;
        if !(s.start > 0.0 && s.end > 0.0 && (0.0..=1.0).contains(&s.anneal_fraction)) {
            return Err(Error::Config("attack.schedule needs positive temperatures and anneal_fraction in [0, 1]".into()));
        }
        Ok(())
    }
}

pub struct AdvLoss {
    pub obj: Var,
    pub cls: Var,
    pub adv: Var,
}

/// Cells whose decoded box overlaps `gt`; every cell when none does.
pub fn target_cells(tape: &Tape, grid: &RawGrid, gt: Option<BBox>) -> Vec<usize> {
    let out = grid.read(tape);
    let hits: Vec<usize> = match gt {
        Some(g) => (0..grid.cells()).filter(|&i| iou(&out.boxes[i], &g) > 0.0).collect(),
        None => Vec::new(),
    };
    if hits.is_empty() {
        (0..grid.cells()).collect()
    } else {
        hits
    }
}

/// Mean over sequences of the strongest objectness and class probability on the target.
pub fn adv_loss(tape: &mut Tape, grids: &[RawGrid], gts: &[Option<BBox>], lambda_obj: f64, lambda_cls: f64) -> Result<AdvLoss> {
    if grids.is_empty() || grids.len() != gts.len() {
        return Err(Error::Contract(format!(
            "adversarial loss needs M >= 1 grids with labels, got {} grids and {} labels",
            grids.len(),
            gts.len()
        )));
    }
    let mut objs = Vec::with_capacity(grids.len());
    let mut clss = Vec::with_capacity(grids.len());
    for (g, gt) in grids.iter().zip(gts) {
        let cells = target_cells(tape, g, *gt);
        for (logits, acc) in [(g.obj, &mut objs), (g.cls, &mut clss)] {
            let picked = tape.gather(logits, &cells)?;
            let p = tape.sigmoid(picked);
            acc.push(tape.max(p)?);
        }
    }
    let so = tape.stack(&objs)?;
    let obj = tape.mean(so);
    let sc = tape.stack(&clss)?;
    let cls = tape.mean(sc);
    let wo = tape.scale(obj, lambda_obj);
    let wc = tape.scale(cls, lambda_cls);
    let adv = tape.add(wo, wc)?;
    Ok(AdvLoss { obj, cls, adv })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub l_obj: f64,
    pub l_cls: f64,
    pub l_adv: f64,
    /// `None` once binarization is hard.
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttackTrace {
    pub records: Vec<TraceRecord>,
    pub snapshots: Vec<(usize, TextureMap)>,
}

impl AttackTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,l_obj,l_cls,l_adv,temperature\n");
        for r in &self.records {
            let t = r.temperature.map_or_else(|| "hard".to_string(), |t| format!("{t:e}"));
            let _ = writeln!(out, "{},{:e},{:e},{:e},{}", r.iteration, r.l_obj, r.l_cls, r.l_adv, t);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub latent: LatentGrid,
    /// Hard-binarized, masked.
    pub texture: TextureMap,
    pub trace: AttackTrace,
}

pub fn encode_latent(latent: &LatentGrid) -> Vec<u8> {
    container::encode(LATENT_MAGIC, &[latent.to_tensor()])
}

pub fn decode_latent(bytes: &[u8]) -> Result<LatentGrid> {
    let t = container::decode(LATENT_MAGIC, bytes)?;
    match t.as_slice() {
        [g] if g.shape().len() == 2 && g.shape()[0] == g.shape()[1] => Ok(LatentGrid {
            n: g.shape()[0],
            z: g.data().to_vec(),
        }),
        _ => Err(Error::format(8, "latent container must hold one square grid")),
    }
}

pub fn attack_mask(setup: &SceneSetup, regions: &[BodyRegion]) -> Result<BodyMask> {
    BodyMask::from_regions(setup.geometry.size, &setup.layout, regions)
}

/// Builds the full chain from a latent grid already on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn attack_loss(
    tape: &mut Tape,
    z: Var,
    mode: Binarization,
    mask: &BodyMask,
    detector: &DetectorParams,
    setup: &SceneSetup,
    draws: &[(&SceneSpec, u64)],
    lambdas: (f64, f64),
    quantization: Quantization,
) -> Result<AdvLoss> {
    let texture = texture_from_latent(tape, z, mode, setup.geometry.block(), mask)?;
    let params = detector.on_tape(tape, false);
    let mut grids = Vec::with_capacity(draws.len());
    let mut gts = Vec::with_capacity(draws.len());
    for (spec, rep) in draws {
        let (input, gt) = simulate_on_tape(tape, setup, texture, spec, *rep, quantization)?;
        grids.push(forward(tape, input, &params)?);
        gts.push(gt);
    }
    adv_loss(tape, &grids, &gts, lambdas.0, lambdas.1)
}

fn loss_and_grad(
    latent: &LatentGrid,
    mode: Binarization,
    mask: &BodyMask,
    detector: &DetectorParams,
    setup: &SceneSetup,
    draws: &[(&SceneSpec, u64)],
    cfg: &AttackConfig,
) -> Result<(TraceRecord, Vec<f64>)> {
    let mut tape = Tape::new();
    let z = tape.leaf(latent.to_tensor());
    let lambdas = (cfg.lambda_obj, cfg.lambda_cls);
    let loss = attack_loss(&mut tape, z, mode, mask, detector, setup, draws, lambdas, Quantization::Quantized)?;
    let grad = tape.backward(loss.adv)?.wrt(&tape, z).into_data();
    let record = TraceRecord {
        iteration: 0,
        l_obj: tape.value(loss.obj).item(),
        l_cls: tape.value(loss.cls).item(),
        l_adv: tape.value(loss.adv).item(),
        temperature: match mode {
            Binarization::Hard => None,
            Binarization::Soft { temperature } => Some(temperature),
        },
    };
    Ok((record, grad))
}

/// Runs the optimization over `scenes` (typically the train split).
pub fn run_attack(cfg: &AttackConfig, detector: &DetectorParams, setup: &SceneSetup, scenes: &[SceneSpec]) -> Result<AttackResult> {
    run_attack_with_progress(cfg, detector, setup, scenes, &mut |_| {})
}

pub fn run_attack_with_progress(
    cfg: &AttackConfig,
    detector: &DetectorParams,
    setup: &SceneSetup,
    scenes: &[SceneSpec],
    progress: &mut dyn FnMut(&TraceRecord),
) -> Result<AttackResult> {
    cfg.validate()?;
    if !detector.is_frozen() {
        return Err(Error::Contract("the attack requires frozen detector parameters".into()));
    }
    if scenes.is_empty() {
        return Err(Error::Contract("the attack needs at least one scene".into()));
    }
    let mask = attack_mask(setup, &cfg.regions)?;
    let mut latent = LatentGrid::white(setup.geometry.grid);
    let mut adam = crate::optim::AdamState::new(latent.z.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = AttackTrace::default();

    for it in 0..cfg.iterations {
        let mode = cfg.schedule.at(it, cfg.iterations);
        let mut grad = vec![0.0; latent.z.len()];
        let mut rec = TraceRecord {
            iteration: it,
            l_obj: 0.0,
            l_cls: 0.0,
            l_adv: 0.0,
            temperature: None,
        };
        for _ in 0..cfg.accumulate {
            let draws: Vec<(&SceneSpec, u64)> = (0..cfg.batch)
                .map(|_| (&scenes[rng.gen_range(0..scenes.len())], rng.gen_range(0..cfg.replicates)))
                .collect();
            let (r, g) = loss_and_grad(&latent, mode, &mask, detector, setup, &draws, cfg)
                .map_err(|e| match e {
                    Error::Numeric { reason, .. } => Error::Numeric { iteration: it, reason },
                    other => other,
                })?;
            let k = cfg.accumulate as f64;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b / k;
            }
            rec.l_obj += r.l_obj / k;
            rec.l_cls += r.l_cls / k;
            rec.l_adv += r.l_adv / k;
            rec.temperature = r.temperature;
        }
        if !rec.l_adv.is_finite() {
            return Err(Error::Numeric {
                iteration: it,
                reason: format!("adversarial loss is {}", rec.l_adv),
            });
        }
        crate::optim::adam_step(&mut latent.z, &grad, &mut adam, cfg.lr, it)?;
        progress(&rec);
        trace.records.push(rec);
        if cfg.snapshot_every > 0 && (it + 1) % cfg.snapshot_every == 0 {
            trace.snapshots.push((it + 1, realize_texture(&latent, setup.geometry, &mask)?));
        }
    }
    let texture = realize_texture(&latent, setup.geometry, &mask)?;
    Ok(AttackResult { latent, texture, trace })
}

/// Mean adversarial loss of a fixed texture over `draws`, one sequence at a time.
pub fn mean_adv_loss(
    texture: &TextureMap,
    detector: &DetectorParams,
    setup: &SceneSetup,
    draws: &[(SceneSpec, u64)],
    lambda_obj: f64,
    lambda_cls: f64,
) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Contract("mean adversarial loss needs at least one sequence".into()));
    }
    let mut total = 0.0;
    for (spec, rep) in draws {
        let mut tape = Tape::new();
        let t = tape.constant(texture.to_tensor());
        let params = detector.on_tape(&mut tape, false);
        let (input, gt) = simulate_on_tape(&mut tape, setup, t, spec, *rep, Quantization::Quantized)?;
        let grid = forward(&mut tape, input, &params)?;
        let l = adv_loss(&mut tape, &[grid], &[gt], lambda_obj, lambda_cls)?;
        total += tape.value(l.adv).item();
    }
    Ok(total / draws.len() as f64)
}
