use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use evtex_core::attack::{
    attack_mask, decode_latent, encode_latent, run_attack_with_progress, AttackConfig, AttackResult, AttackTrace,
};
use evtex_core::autodiff::Tensor;
use evtex_core::config::ExperimentConfig;
use evtex_core::detector::{decode, predict, train_with_progress, DetectorParams};
use evtex_core::eval::{eval_sequences, evaluate_texture, reports_csv, reports_table, EvalReport};
use evtex_core::events::{read_events, write_events_binary, write_events_text, EventFormat, EventTensor, Polarity};
use evtex_core::pgm::GrayImage;
use evtex_core::pipeline::SceneSetup;
use evtex_core::render::{ground_truth_boxes, render_sequence, Background, FrameSequence, Trajectory, EPS_LUM};
use evtex_core::scenarios::{baseline_textures, SceneSpec, Split};
use evtex_core::selftest;
use evtex_core::texture::{mask_combinations, BodyRegion, TextureMap};
use evtex_core::v2e::convert;
use evtex_core::viz::{draw_boxes, event_bin_images, event_image};
use rayon::prelude::*;

use crate::error::{io_err, CliError, Result};
use crate::manifest::Manifest;
use crate::Common;

/// Loaded config plus the manifest every command fills in.
struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn start(cmd: &str, common: &Common) -> Result<Self> {
        let mut cfg = ExperimentConfig::load(&common.config, common.preset)?;
        if let Some(seed) = common.seed {
            cfg.attack.seed = seed;
            cfg.detector.train.seed = seed;
        }
        let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        let mut manifest = Manifest::new(cmd, cfg.preset.to_string(), cfg.hash()?, cfg.attack.seed);
        manifest.input(&common.config)?;
        manifest.write(&out.join("config.resolved.toml"), cfg.to_toml()?.as_bytes())?;
        Ok(Run { cfg, out, manifest })
    }

    fn finish(self) -> Result<()> {
        let path = self.out.join(format!("manifest-{}.json", self.manifest.command));
        self.manifest.save(path)
    }

    fn detector(&mut self, flag: Option<&Path>) -> Result<DetectorParams> {
        let path = flag
            .map(Path::to_path_buf)
            .or_else(|| self.cfg.detector.params.clone())
            .ok_or_else(|| CliError::Usage("no detector given: pass --detector or set detector.params".into()))?;
        let mut det = DetectorParams::load(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        det.freeze();
        if det.in_channels() != 2 * self.cfg.v2e.bins {
            return Err(CliError::Usage(format!(
                "detector {} expects {} input channels but v2e.bins = {} gives {}",
                path.display(),
                det.in_channels(),
                self.cfg.v2e.bins,
                2 * self.cfg.v2e.bins
            )));
        }
        self.manifest.input(&path)?;
        self.manifest.note("detector_hash", det.hash());
        Ok(det)
    }
}

fn invalid(path: &Path, reason: impl Into<String>) -> CliError {
    CliError::Validation {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn save_image(m: &mut Manifest, path: &Path, img: &GrayImage) -> Result<()> {
    m.write(path, &img.to_bytes())?;
    let back = GrayImage::load(path)?;
    if (back.width, back.height) != (img.width, img.height) {
        return Err(invalid(path, "image dimensions changed on read-back"));
    }
    Ok(())
}

fn load_texture(path: &Path, size: usize) -> Result<TextureMap> {
    let img = GrayImage::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if img.width != size || img.height != size {
        return Err(CliError::Usage(format!(
            "{}: texture is {}x{}, config expects {size}x{size}",
            path.display(),
            img.width,
            img.height
        )));
    }
    Ok(TextureMap { size, pixels: img.pixels })
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

#[derive(Args)]
pub struct RenderArgs {
    #[command(flatten)]
    common: Common,
    /// Index into the generated scene list (train split first).
    #[arg(long, default_value_t = 0)]
    scene: usize,
    #[arg(long, default_value_t = 0)]
    replicate: u64,
    /// Texture map PGM; white when omitted.
    #[arg(long)]
    texture: Option<PathBuf>,
    /// Hold the first pose on a constant background.
    #[arg(long = "static")]
    stationary: bool,
}

pub fn render(a: RenderArgs) -> Result<()> {
    let mut run = Run::start("render", &a.common)?;
    let setup = run.cfg.setup();
    let scenes = run.cfg.scenes()?;
    let spec = scenes
        .get(a.scene)
        .ok_or_else(|| CliError::Usage(format!("--scene {} out of range (have {})", a.scene, scenes.len())))?;
    let texture = match &a.texture {
        Some(p) => {
            run.manifest.input(p)?;
            load_texture(p, setup.geometry.size)?
        }
        None => TextureMap::constant(setup.geometry.size, 1.0),
    };
    let mut traj = setup.trajectory(spec, a.replicate)?;
    let mut background = spec.background;
    if a.stationary {
        traj = Trajectory::stationary(traj.poses[0], traj.len(), setup.frame_interval_us)?;
        background = Background::default();
    }
    let seq = render_sequence(&texture.to_tensor(), &setup.body, &traj, &background, setup.sensor)?;

    let dir = run.out.join("frames");
    let mut times = String::from("frame,t_us\n");
    for k in 0..seq.len() {
        save_image(&mut run.manifest, &dir.join(format!("frame_{k:03}.pgm")), &seq.image(k))?;
        let _ = writeln!(times, "{k},{}", seq.times[k]);
    }
    run.manifest.write(&dir.join("times.csv"), times.as_bytes())?;

    let mut gt = String::from("frame,x_min,y_min,x_max,y_max\n");
    for (k, b) in ground_truth_boxes(&setup.body, &traj, setup.sensor).iter().enumerate() {
        match b {
            Some(b) => {
                let _ = writeln!(gt, "{k},{},{},{},{}", b.x_min, b.y_min, b.x_max, b.y_max);
            }
            None => {
                let _ = writeln!(gt, "{k},,,,");
            }
        }
    }
    run.manifest.write(&run.out.join("gt_boxes.csv"), gt.as_bytes())?;
    run.manifest.note("scene", format!("{} ({:?}, {:?})", spec.id, spec.trajectory, spec.split));
    eprintln!("rendered {} frames to {}", seq.len(), dir.display());
    run.finish()
}

#[derive(Args)]
pub struct V2eArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of frame_*.pgm files, with optional times.csv.
    #[arg(long)]
    frames: PathBuf,
}

/// `--out` naming an event file (`.evtx`, `.txt`, `.csv`) selects that file;
/// a directory gets `events.evtx`.
fn split_event_path(out: Option<&Path>) -> (Option<PathBuf>, Option<PathBuf>) {
    match out {
        Some(p) if p.extension().is_some_and(|e| e == "evtx" || e == "txt" || e == "csv") => {
            let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            (Some(dir.to_path_buf()), Some(p.to_path_buf()))
        }
        other => (other.map(Path::to_path_buf), None),
    }
}

fn read_times(dir: &Path, n: usize, interval: u64) -> Result<Vec<u64>> {
    let path = dir.join("times.csv");
    if !path.exists() {
        return Ok((0..n as u64).map(|k| k * interval).collect());
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let times: Vec<u64> = text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|t| t.trim().parse().ok())
                .ok_or_else(|| CliError::Usage(format!("{}: malformed line {l:?}", path.display())))
        })
        .collect::<Result<_>>()?;
    if times.len() != n {
        return Err(CliError::Usage(format!("{}: {} times for {n} frames", path.display(), times.len())));
    }
    Ok(times)
}

fn load_frames(dir: &Path, cfg: &ExperimentConfig) -> Result<FrameSequence> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "pgm")
                && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("frame_"))
        })
        .collect();
    paths.sort();
    if paths.len() < 2 {
        return Err(CliError::Usage(format!("{}: need at least 2 frame_*.pgm files", dir.display())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = GrayImage::load(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        if img.width != cfg.sensor.width || img.height != cfg.sensor.height {
            return Err(CliError::Usage(format!(
                "{}: frame is {}x{}, sensor is {}x{}",
                p.display(),
                img.width,
                img.height,
                cfg.sensor.width,
                cfg.sensor.height
            )));
        }
        frames.push(img.pixels.into_iter().map(|v| v.max(EPS_LUM)).collect());
    }
    let times = read_times(dir, frames.len(), cfg.scenes.frame_interval_us)?;
    Ok(FrameSequence::new(cfg.sensor, frames, times)?)
}

fn counts_csv(t: &EventTensor) -> String {
    let mut out = String::from("bin,polarity,y,x,count\n");
    for (p, name) in [(Polarity::Positive, "pos"), (Polarity::Negative, "neg")] {
        for b in 0..t.bins() {
            for y in 0..t.height() {
                for x in 0..t.width() {
                    let c = t.get(p, b, y, x);
                    if c > 0 {
                        let _ = writeln!(out, "{b},{name},{y},{x},{c}");
                    }
                }
            }
        }
    }
    out
}

pub fn v2e(a: V2eArgs) -> Result<()> {
    let (dir, file) = split_event_path(a.common.out.as_deref());
    let common = Common { out: dir, ..a.common.clone() };
    let mut run = Run::start("v2e", &common)?;
    let seq = load_frames(&a.frames, &run.cfg)?;
    for p in fs::read_dir(&a.frames).map_err(io_err(&a.frames))?.flatten() {
        if p.path().extension().is_some_and(|e| e == "pgm" || e == "csv") {
            run.manifest.input(&p.path())?;
        }
    }
    let (tensor, stream) = convert(&seq, &run.cfg.v2e)?;
    let path = file.unwrap_or_else(|| run.out.join("events.evtx"));
    let bytes = match EventFormat::from_path(&path) {
        EventFormat::Binary => write_events_binary(&stream)?,
        EventFormat::Text => write_events_text(&stream)?.into_bytes(),
    };
    run.manifest.write(&path, &bytes)?;
    if read_events(&path)?.events != stream.events {
        return Err(invalid(&path, "events differ on read-back"));
    }
    let counts = path.with_extension("counts.csv");
    run.manifest.write(&counts, counts_csv(&tensor).as_bytes())?;
    run.manifest.note("events", stream.len());
    eprintln!("{} events from {} frames written to {}", stream.len(), seq.len(), path.display());
    run.finish()
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
}

pub fn train_detector(a: TrainArgs) -> Result<()> {
    let mut run = Run::start("train-detector", &a.common)?;
    let setup = run.cfg.setup();
    let outcome = train_with_progress(&setup, &run.cfg.detector.data, &run.cfg.detector.train, &mut |e| {
        eprintln!(
            "step {:>5}  loss {:.4}  val AP {:.4}  empty FPR {:.4}",
            e.step,
            e.loss,
            e.val_ap.unwrap_or(f64::NAN),
            e.false_positive_rate.unwrap_or(f64::NAN)
        );
    })?;
    let path = run.out.join("detector.evdt");
    run.manifest.write(&path, &outcome.params.to_bytes())?;
    if DetectorParams::load(&path)?.hash() != outcome.params.hash() {
        return Err(invalid(&path, "parameter hash differs on read-back"));
    }
    let mut log = String::from("step,loss,val_ap,false_positive_rate\n");
    for e in &outcome.log {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
        let _ = writeln!(log, "{},{:.6},{},{}", e.step, e.loss, opt(e.val_ap), opt(e.false_positive_rate));
    }
    run.manifest.write(&run.out.join("train_log.csv"), log.as_bytes())?;
    run.manifest.note("detector_hash", outcome.params.hash());
    run.manifest.note("val_ap", outcome.val_ap);
    run.manifest.note("false_positive_rate", outcome.false_positive_rate);
    eprintln!(
        "gate passed at step {}: AP {:.4}, FPR {:.4}; wrote {}",
        outcome.steps,
        outcome.val_ap,
        outcome.false_positive_rate,
        path.display()
    );
    run.finish()
}

#[derive(Args)]
pub struct AttackArgs {
    #[command(flatten)]
    common: Common,
    /// Detector parameters; defaults to detector.params.
    #[arg(long)]
    detector: Option<PathBuf>,
}

fn train_scenes(cfg: &ExperimentConfig) -> Result<Vec<SceneSpec>> {
    Ok(cfg.scenes()?.into_iter().filter(|s| s.split == Split::Train).collect())
}

/// Runs one attack, writing the partial trace if it fails numerically.
fn attack_into(
    dir: &Path,
    cfg: &AttackConfig,
    det: &DetectorParams,
    setup: &SceneSetup,
    scenes: &[SceneSpec],
    verbose: bool,
) -> Result<AttackResult> {
    let total = cfg.iterations;
    let mut partial = AttackTrace::default();
    let outcome = run_attack_with_progress(cfg, det, setup, scenes, &mut |r| {
        if verbose && (r.iteration % 100 == 0 || r.iteration + 1 == total) {
            eprintln!("iter {:>5}  L_adv {:.3}  L_obj {:.5}  L_cls {:.5}", r.iteration, r.l_adv, r.l_obj, r.l_cls);
        }
        partial.records.push(r.clone());
    });
    match outcome {
        Ok(r) => Ok(r),
        Err(e @ evtex_core::Error::Numeric { .. }) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let trace = dir.join("trace_failed.csv");
            fs::write(&trace, partial.to_csv()).map_err(io_err(&trace))?;
            Err(CliError::Numeric { source: e, trace })
        }
        Err(e) => Err(e.into()),
    }
}

fn save_attack(m: &mut Manifest, dir: &Path, result: &AttackResult) -> Result<()> {
    let tex = dir.join("texture.pgm");
    save_image(m, &tex, &result.texture.to_image())?;
    let back = GrayImage::load(&tex)?;
    if back.pixels != result.texture.pixels {
        return Err(invalid(&tex, "texture is not binary on read-back"));
    }
    let latent = dir.join("latent.evlg");
    m.write(&latent, &encode_latent(&result.latent))?;
    if decode_latent(&fs::read(&latent).map_err(io_err(&latent))?)? != result.latent {
        return Err(invalid(&latent, "latent differs on read-back"));
    }
    m.write(&dir.join("trace.csv"), result.trace.to_csv().as_bytes())?;
    for (it, snap) in &result.trace.snapshots {
        save_image(m, &dir.join("snapshots").join(format!("texture_{it:06}.pgm")), &snap.to_image())?;
    }
    Ok(())
}

pub fn attack(a: AttackArgs) -> Result<()> {
    let mut run = Run::start("attack", &a.common)?;
    let det = run.detector(a.detector.as_deref())?;
    let before = det.hash();
    let setup = run.cfg.setup();
    let scenes = train_scenes(&run.cfg)?;
    let result = attack_into(&run.out, &run.cfg.attack, &det, &setup, &scenes, true)?;
    if det.hash() != before {
        return Err(CliError::Usage("detector parameters changed during the attack".into()));
    }
    let out = run.out.clone();
    save_attack(&mut run.manifest, &out, &result)?;
    if let (Some(first), Some(last)) = (result.trace.records.first(), result.trace.records.last()) {
        run.manifest.note("initial_l_adv", first.l_adv);
        run.manifest.note("final_l_adv", last.l_adv);
    }
    eprintln!("wrote {}", out.join("texture.pgm").display());
    run.finish()
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    detector: Option<PathBuf>,
    /// Extra texture to evaluate, as `ID=PATH` (repeatable).
    #[arg(long = "texture", value_parser = parse_texture_arg)]
    textures: Vec<(String, PathBuf)>,
    /// Also attack and evaluate each of the seven body-region masks.
    #[arg(long)]
    ablation: bool,
}

fn parse_texture_arg(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (id, path) = s.split_once('=').ok_or_else(|| format!("expected ID=PATH, got {s:?}"))?;
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || "-_+.".contains(c)) {
        return Err(format!("texture id {id:?} must be non-empty and use [A-Za-z0-9-_+.]"));
    }
    Ok((id.to_string(), PathBuf::from(path)))
}

fn mask_id(regions: &[BodyRegion]) -> String {
    let mut names: Vec<&str> = regions.iter().map(|r| r.name()).collect();
    names.sort();
    format!("mask-{}", names.join("+"))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut run = Run::start("eval", &a.common)?;
    let det = run.detector(a.detector.as_deref())?;
    let setup = run.cfg.setup();
    let base = baseline_textures(setup.geometry, run.cfg.eval.random_seed);
    let mut textures = vec![
        ("white".to_string(), base.white),
        ("black".to_string(), base.black),
        ("random".to_string(), base.random),
    ];
    for (id, path) in &a.textures {
        if textures.iter().any(|(t, _)| t == id) {
            return Err(CliError::Usage(format!("texture id {id:?} given twice")));
        }
        run.manifest.input(path)?;
        textures.push((id.clone(), load_texture(path, setup.geometry.size)?));
    }

    if a.ablation {
        let scenes = train_scenes(&run.cfg)?;
        let combos = mask_combinations();
        eprintln!("running {} mask attacks", combos.len());
        let results: Vec<(String, AttackResult)> = combos
            .par_iter()
            .map(|regions| {
                let id = mask_id(regions);
                let cfg = AttackConfig {
                    regions: regions.clone(),
                    ..run.cfg.attack.clone()
                };
                attack_mask(&setup, regions)?;
                let dir = run.out.join("ablation").join(&id);
                attack_into(&dir, &cfg, &det, &setup, &scenes, false).map(|r| (id, r))
            })
            .collect::<Result<_>>()?;
        for (id, r) in results {
            let dir = run.out.join("ablation").join(&id);
            save_attack(&mut run.manifest, &dir, &r)?;
            textures.push((id, r.texture));
        }
    }

    let draws = eval_sequences(&run.cfg.scenes()?, run.cfg.scenes.eval_replicates);
    let thresholds = run.cfg.eval.thresholds.clone();
    let reports: Vec<EvalReport> = textures
        .par_iter()
        .map(|(id, t)| evaluate_texture(id, t, &det, &setup, &draws, &thresholds))
        .collect::<evtex_core::Result<_>>()?;

    let tag = format!("{}-{}", short(&det.hash()), short(&run.manifest.config_hash));
    for r in &reports {
        let path = run.out.join(format!("eval-{}-{tag}.csv", r.texture_id));
        write_report(&mut run.manifest, &path, std::slice::from_ref(r), thresholds.len())?;
    }
    let all = run.out.join(format!("report-{tag}.csv"));
    write_report(&mut run.manifest, &all, &reports, thresholds.len())?;
    let table = reports_table(&reports);
    run.manifest.write(&run.out.join(format!("report-{tag}.txt")), table.as_bytes())?;
    run.manifest.note("sequences", draws.len());
    println!("{table}");
    run.finish()
}

fn write_report(m: &mut Manifest, path: &Path, reports: &[EvalReport], thresholds: usize) -> Result<()> {
    m.write(path, reports_csv(reports).as_bytes())?;
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let rows = text.lines().filter(|l| !l.starts_with('#')).count();
    if rows != 1 + reports.len() * thresholds {
        return Err(invalid(path, format!("expected {} data rows, found {}", reports.len() * thresholds, rows - 1)));
    }
    Ok(())
}

#[derive(Args)]
pub struct VisualizeArgs {
    #[command(flatten)]
    common: Common,
    /// Event file to render as one image per time bin.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Frame directory to convert and overlay with detections.
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long)]
    detector: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    threshold: f64,
}

pub fn visualize(a: VisualizeArgs) -> Result<()> {
    if a.events.is_none() && a.frames.is_none() {
        return Err(CliError::Usage("visualize needs --events or --frames".into()));
    }
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(CliError::Usage(format!("--threshold must lie in (0, 1), got {}", a.threshold)));
    }
    let mut run = Run::start("visualize", &a.common)?;
    let dir = run.out.join("viz");
    if let Some(path) = &a.events {
        run.manifest.input(path)?;
        let stream = read_events(path)?;
        let tensor = evtex_core::events::bin_events(&stream, run.cfg.v2e.bins)?;
        for (b, img) in event_bin_images(&tensor).iter().enumerate() {
            save_image(&mut run.manifest, &dir.join(format!("events_bin_{b:02}.pgm")), img)?;
        }
    }
    if let Some(frames) = &a.frames {
        let det = run.detector(a.detector.as_deref())?;
        let seq = load_frames(frames, &run.cfg)?;
        let (tensor, _) = convert(&seq, &run.cfg.v2e)?;
        let (h, w) = (tensor.height(), tensor.width());
        let input = Tensor::new([2 * tensor.bins(), h, w], tensor.to_channels())?;
        let dets = decode(&predict(&det, &input)?, a.threshold);
        let boxes: Vec<_> = dets.iter().map(|d| d.bbox).collect();
        let mut ev = event_image(&tensor);
        draw_boxes(&mut ev, &boxes, 1.0);
        save_image(&mut run.manifest, &dir.join("overlay_events.pgm"), &ev)?;
        let mut last = seq.image(seq.len() - 1);
        draw_boxes(&mut last, &boxes, 1.0);
        save_image(&mut run.manifest, &dir.join("overlay_frame.pgm"), &last)?;
        let mut listing = String::from("x_min,y_min,x_max,y_max,obj,cls,conf\n");
        for d in &dets {
            let b = d.bbox;
            let _ = writeln!(listing, "{},{},{},{},{:.6},{:.6},{:.6}", b.x_min, b.y_min, b.x_max, b.y_max, d.obj, d.cls, d.conf);
        }
        run.manifest.write(&dir.join("detections.csv"), listing.as_bytes())?;
        eprintln!("{} detections at threshold {}", dets.len(), a.threshold);
    }
    run.finish()
}

pub fn selftest() -> bool {
    let results = selftest::run_all();
    for r in &results {
        println!("{} {:<20} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let ok = results.iter().all(|r| r.passed);
    println!("{}/{} suites passed", results.iter().filter(|r| r.passed).count(), results.len());
    ok
}
