use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{decode, forward, predict, DetectorParams, RawGrid};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::{compute_ap, ScoredBox, MATCH_IOU};
use crate::geometry::BBox;
use crate::optim::{adam_step, AdamState};
use crate::pipeline::{simulate, Sample, SceneSetup};
use crate::render::{Background, TrajectoryKind};
use crate::scenarios::{random_texture, ScaleClass, SceneSpec, Split};
use crate::texture::{TextureGeometry, TextureMap};

/// Synthetic data mix for the surrogate detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    /// Held-out scenes per texture kind (white, black, random).
    pub val_per_kind: usize,
    pub val_empty: usize,
    pub empty_fraction: f64,
    pub stripes_fraction: f64,
    /// Grid sizes for random training textures; each must divide the texture size.
    pub random_grids: Vec<usize>,
    pub frames: usize,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        TrainingSpec {
            val_per_kind: 30,
            val_empty: 40,
            empty_fraction: 0.15,
            stripes_fraction: 0.3,
            random_grids: vec![2, 3],
            frames: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub batch: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub ap_gate: f64,
    pub max_false_positive_rate: f64,
    pub conf_threshold: f64,
    pub pos_weight: f64,
    pub box_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            lr: 2e-3,
            batch: 8,
            max_steps: 3000,
            eval_every: 100,
            ap_gate: 0.9,
            max_false_positive_rate: 0.05,
            conf_threshold: 0.25,
            pos_weight: 2.0,
            box_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f64,
    pub val_ap: Option<f64>,
    pub false_positive_rate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DetectorParams,
    pub log: Vec<TrainLogEntry>,
    pub val_ap: f64,
    pub false_positive_rate: f64,
    pub steps: usize,
}

pub struct TrainingData {
    pub val: Vec<Sample>,
    pub val_empty: Vec<Sample>,
}

#[derive(Clone, Copy)]
enum TextureKind {
    White,
    Black,
    Random,
}

fn texture_of(kind: TextureKind, geometry: TextureGeometry, grids: &[usize], rng: &mut ChaCha8Rng) -> Result<TextureMap> {
    Ok(match kind {
        TextureKind::White => TextureMap::constant(geometry.size, 1.0),
        TextureKind::Black => TextureMap::constant(geometry.size, 0.0),
        TextureKind::Random => {
            let n = *grids.choose(rng).ok_or_else(|| Error::Config("training.random_grids is empty".into()))?;
            random_texture(TextureGeometry::new(n, geometry.size)?, rng.gen())
        }
    })
}

fn random_scene(spec: &TrainingSpec, rng: &mut ChaCha8Rng) -> SceneSpec {
    SceneSpec {
        id: 0,
        trajectory: TrajectoryKind::ALL[rng.gen_range(0..3)],
        seed: rng.gen(),
        background: if rng.gen_bool(spec.stripes_fraction) { Background::stripes() } else { Background::default() },
        scale: ScaleClass::ALL[rng.gen_range(0..3)],
        frames: spec.frames,
        split: Split::Train,
    }
}

fn draw_sample(setup: &SceneSetup, spec: &TrainingSpec, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let scene = random_scene(spec, rng);
    if rng.gen_bool(spec.empty_fraction) {
        return simulate(setup, None, &scene, 0);
    }
    let kind = [TextureKind::White, TextureKind::Black, TextureKind::Random][rng.gen_range(0..3)];
    let tex = texture_of(kind, setup.geometry, &spec.random_grids, rng)?;
    simulate(setup, Some(&tex), &scene, 0)
}

/// Held-out scenes from a seed stream separate from training.
pub fn build_training_data(setup: &SceneSetup, spec: &TrainingSpec, seed: u64) -> Result<TrainingData> {
    for &n in &spec.random_grids {
        TextureGeometry::new(n, setup.geometry.size)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0a11_da7a);
    let mut val = Vec::new();
    for kind in [TextureKind::White, TextureKind::Black, TextureKind::Random] {
        for _ in 0..spec.val_per_kind {
            let scene = random_scene(spec, &mut rng);
            let tex = texture_of(kind, setup.geometry, &spec.random_grids, &mut rng)?;
            val.push(simulate(setup, Some(&tex), &scene, 0)?);
        }
    }
    let val_empty = (0..spec.val_empty)
        .map(|_| {
            let scene = random_scene(spec, &mut rng);
            simulate(setup, None, &scene, 0)
        })
        .collect::<Result<_>>()?;
    Ok(TrainingData { val, val_empty })
}

/// Positive cells: centers strictly inside the box, or the cell under the box
/// center when none is.
pub fn positive_cells(raw: &RawGrid, gt: Option<BBox>) -> Vec<usize> {
    let Some(g) = gt else { return Vec::new() };
    let mut cells: Vec<usize> = (0..raw.cells()).filter(|&i| g.contains(raw.cell_center(i))).collect();
    if cells.is_empty() {
        let c = g.center();
        let gx = ((c[0] / raw.stride as f64) as usize).min(raw.gw - 1);
        let gy = ((c[1] / raw.stride as f64) as usize).min(raw.gh - 1);
        cells.push(gy * raw.gw + gx);
    }
    cells
}

fn weighted_bce(tape: &mut Tape, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
    let n = targets.len();
    let total: f64 = weights.iter().sum();
    let sp = tape.softplus(logits);
    let y = tape.constant(Tensor::new(vec![n], targets.to_vec())?);
    let yx = tape.mul(y, logits)?;
    let per = tape.sub(sp, yx)?;
    let w = tape.constant(Tensor::new(vec![n], weights.iter().map(|w| w / total).collect())?);
    let weighted = tape.mul(per, w)?;
    Ok(tape.sum(weighted))
}

fn iou_loss(tape: &mut Tape, raw: &RawGrid, cells: &[usize], g: BBox) -> Result<Var> {
    let n = raw.cells();
    let k = cells.len();
    let s = raw.stride as f64;
    let mut side = |plane: usize| -> Var {
        let idx: Vec<usize> = cells.iter().map(|&c| plane * n + c).collect();
        let v = tape.gather(raw.boxes, &idx).expect("box plane indices");
        let e = tape.exp(v);
        tape.scale(e, s)
    };
    let (l, t, r, b) = (side(0), side(1), side(2), side(3));
    let centers: Vec<[f64; 2]> = cells.iter().map(|&c| raw.cell_center(c)).collect();
    let cx = tape.constant(Tensor::new(vec![k], centers.iter().map(|c| c[0]).collect())?);
    let cy = tape.constant(Tensor::new(vec![k], centers.iter().map(|c| c[1]).collect())?);
    let x1 = tape.sub(cx, l)?;
    let y1 = tape.sub(cy, t)?;
    let x2 = tape.add(cx, r)?;
    let y2 = tape.add(cy, b)?;
    let gs = |tape: &mut Tape, v: f64| tape.constant(Tensor::scalar(v));
    let (gx1, gy1, gx2, gy2) = (gs(tape, g.x_min), gs(tape, g.y_min), gs(tape, g.x_max), gs(tape, g.y_max));
    let ix1 = tape.maximum(x1, gx1)?;
    let iy1 = tape.maximum(y1, gy1)?;
    let ix2 = tape.minimum(x2, gx2)?;
    let iy2 = tape.minimum(y2, gy2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.half_rectify(iw);
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.half_rectify(ih);
    let inter = tape.mul(iw, ih)?;
    let pw = tape.add(l, r)?;
    let ph = tape.add(t, b)?;
    let area = tape.mul(pw, ph)?;
    let area = tape.shift(area, g.area());
    let union = tape.sub(area, inter)?;
    let iou = tape.div(inter, union)?;
    let m = tape.mean(iou);
    let neg = tape.neg(m);
    Ok(tape.shift(neg, 1.0))
}

fn sample_loss(tape: &mut Tape, raw: &RawGrid, gt: Option<BBox>, cfg: &TrainConfig) -> Result<Var> {
    let cells = positive_cells(raw, gt);
    let mut targets = vec![0.0; raw.cells()];
    for &c in &cells {
        targets[c] = 1.0;
    }
    let weights: Vec<f64> = targets.iter().map(|&y| if y > 0.0 { cfg.pos_weight } else { 1.0 }).collect();
    let lo = weighted_bce(tape, raw.obj, &targets, &weights)?;
    let lc = weighted_bce(tape, raw.cls, &targets, &weights)?;
    let mut loss = tape.add(lo, lc)?;
    if let Some(g) = gt {
        let li = iou_loss(tape, raw, &cells, g)?;
        let li = tape.scale(li, cfg.box_weight);
        loss = tape.add(loss, li)?;
    }
    Ok(loss)
}

/// AP over held-out body scenes (empty scenes contribute false positives) and
/// the fraction of empty scenes with any detection.
pub fn validation_ap(params: &DetectorParams, data: &TrainingData, conf_threshold: f64) -> Result<(f64, f64)> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut fp_scenes = 0usize;
    for (seq, s) in data.val.iter().chain(&data.val_empty).enumerate() {
        let found = decode(&predict(params, &s.input)?, conf_threshold);
        if s.gt.is_none() && !found.is_empty() {
            fp_scenes += 1;
        }
        dets.extend(found.into_iter().map(|d| ScoredBox {
            sequence: seq,
            bbox: d.bbox,
            conf: d.conf,
        }));
        gts.push(s.gt);
    }
    let ap = compute_ap(&dets, &gts, MATCH_IOU).unwrap_or(0.0);
    let fpr = if data.val_empty.is_empty() { 0.0 } else { fp_scenes as f64 / data.val_empty.len() as f64 };
    Ok((ap, fpr))
}

/// Trains until the held-out gate passes or `max_steps` is reached. The result is frozen.
pub fn train_surrogate(setup: &SceneSetup, spec: &TrainingSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(setup, spec, cfg, &mut |_| {})
}

pub fn train_with_progress(
    setup: &SceneSetup,
    spec: &TrainingSpec,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&TrainLogEntry),
) -> Result<TrainOutcome> {
    if cfg.batch == 0 || cfg.max_steps == 0 || cfg.eval_every == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("detector training needs batch, max_steps, eval_every >= 1 and lr > 0".into()));
    }
    let data = build_training_data(setup, spec, cfg.seed)?;
    let mut params = DetectorParams::init(2 * setup.v2e.bins, cfg.seed);
    let mut states: Vec<AdamState> = params.tensors().iter().map(|t| AdamState::new(t.len())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7ea1_0000);
    let mut log = Vec::new();
    let mut last = (0.0, 1.0);
    let mut running = 0.0;

    for step in 1..=cfg.max_steps {
        let mut grads: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            let sample = draw_sample(setup, spec, &mut rng)?;
            let mut tape = Tape::new();
            let vars = params.on_tape(&mut tape, true);
            let x = tape.constant(sample.input);
            let raw = forward(&mut tape, x, &vars)?;
            let loss = sample_loss(&mut tape, &raw, sample.gt, cfg)?;
            batch_loss += tape.value(loss).item();
            let g = tape.backward(loss)?;
            for (acc, v) in grads.iter_mut().zip(&vars.0) {
                if let Some(gv) = g.get(*v) {
                    for (a, b) in acc.iter_mut().zip(gv) {
                        *a += b / cfg.batch as f64;
                    }
                }
            }
        }
        let tensors = params.tensors_mut()?;
        for ((t, g), s) in tensors.iter_mut().zip(&grads).zip(states.iter_mut()) {
            adam_step(t.data_mut(), g, s, cfg.lr, step)?;
        }
        batch_loss /= cfg.batch as f64;
        running = if step == 1 { batch_loss } else { 0.95 * running + 0.05 * batch_loss };

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let (ap, fpr) = validation_ap(&params, &data, cfg.conf_threshold)?;
            last = (ap, fpr);
            let entry = TrainLogEntry {
                step,
                loss: running,
                val_ap: Some(ap),
                false_positive_rate: Some(fpr),
            };
            progress(&entry);
            log.push(entry);
            if ap >= cfg.ap_gate && fpr <= cfg.max_false_positive_rate {
                params.freeze();
                return Ok(TrainOutcome {
                    params,
                    log,
                    val_ap: ap,
                    false_positive_rate: fpr,
                    steps: step,
                });
            }
        }
    }
    Err(Error::TrainingFailed {
        achieved_ap: last.0,
        iterations: cfg.max_steps,
    })
}
