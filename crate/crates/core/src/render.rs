//! Differentiable 2-D billboard renderer: an articulated figure of textured
//! rectangles moving over a background.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::pgm::GrayImage;
use crate::texture::{MaskLayout, Rect, TextureGeometry};

/// Lowest rendered intensity, keeps `log` finite.
pub const EPS_LUM: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sensor {
    pub width: usize,
    pub height: usize,
}

impl Sensor {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || width > u16::MAX as usize || height > u16::MAX as usize {
            return Err(Error::InvalidGeometry(format!("sensor {width}x{height}")));
        }
        Ok(Sensor { width, height })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartKind {
    Head,
    UpperBody,
    LeftArm,
    RightArm,
    LeftLeg,
    RightLeg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Articulation {
    Rigid,
    /// Swings by `side * pose.arm_swing` about the pivot.
    Arm,
    Leg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub kind: PartKind,
    /// Rest rectangle in body-local pixels, origin at the body center, y down.
    pub rect: BBox,
    pub pivot: [f64; 2],
    pub articulation: Articulation,
    pub side: f64,
    /// Source region in the texture map; `None` renders white.
    pub uv: Option<Rect>,
    /// Maps the part's vertical axis onto the region's horizontal axis.
    pub transpose_uv: bool,
}

/// Parts in painter's order (first drawn first).
#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    pub parts: Vec<Part>,
}

impl BodyModel {
    /// A 36 px tall figure at scale 1 with UV regions taken from `layout`.
    pub fn standard(geometry: TextureGeometry, layout: &MaskLayout) -> Self {
        let c = geometry.block();
        let (left_arm, right_arm) = layout.arms.split_columns(c);
        let (left_leg, right_leg) = layout.legs.split_columns(c);
        let leg = |kind, x0: f64, side, uv| Part {
            kind,
            rect: BBox::new(x0, 2.0, x0 + 5.0, 18.0),
            pivot: [x0 + 2.5, 2.0],
            articulation: Articulation::Leg,
            side,
            uv: Some(uv),
            transpose_uv: true,
        };
        let arm = |kind, x0: f64, side, uv| Part {
            kind,
            rect: BBox::new(x0, -12.0, x0 + 3.0, 1.0),
            pivot: [x0 + 1.5, -11.0],
            articulation: Articulation::Arm,
            side,
            uv: Some(uv),
            transpose_uv: false,
        };
        BodyModel {
            parts: vec![
                leg(PartKind::LeftLeg, -5.5, 1.0, left_leg),
                leg(PartKind::RightLeg, 0.5, -1.0, right_leg),
                Part {
                    kind: PartKind::UpperBody,
                    rect: BBox::new(-6.0, -12.0, 6.0, 2.0),
                    pivot: [0.0, 0.0],
                    articulation: Articulation::Rigid,
                    side: 1.0,
                    uv: Some(layout.upper_body),
                    transpose_uv: false,
                },
                arm(PartKind::LeftArm, -9.5, -1.0, left_arm),
                arm(PartKind::RightArm, 6.5, 1.0, right_arm),
                Part {
                    kind: PartKind::Head,
                    rect: BBox::new(-3.0, -18.0, 3.0, -12.0),
                    pivot: [0.0, 0.0],
                    articulation: Articulation::Rigid,
                    side: 1.0,
                    uv: None,
                    transpose_uv: false,
                },
            ],
        }
    }

    pub fn validate(&self, texture_size: usize) -> Result<()> {
        for (i, a) in self.parts.iter().enumerate() {
            if !a.rect.is_valid() {
                return Err(Error::InvalidGeometry(format!("part {:?} has an empty rectangle", a.kind)));
            }
            if let Some(uv) = a.uv {
                if uv.x0 >= uv.x1 || uv.y0 >= uv.y1 || uv.x1 > texture_size || uv.y1 > texture_size {
                    return Err(Error::InvalidGeometry(format!("part {:?} maps outside the texture", a.kind)));
                }
            }
            for b in &self.parts[i + 1..] {
                if a.rect.intersection_area(&b.rect) > 0.0 {
                    return Err(Error::InvalidGeometry(format!("parts {:?} and {:?} overlap", a.kind, b.kind)));
                }
            }
        }
        Ok(())
    }

    /// Union of the rest rectangles.
    pub fn rest_bounds(&self) -> BBox {
        self.parts.iter().skip(1).fold(self.parts[0].rect, |acc, p| acc.union(&p.rect))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Image position of the body origin.
    pub tx: f64,
    pub ty: f64,
    pub rotation: f64,
    pub scale: f64,
    pub leg_swing: f64,
    pub arm_swing: f64,
}

impl Pose {
    pub fn at(tx: f64, ty: f64, scale: f64) -> Self {
        Pose {
            tx,
            ty,
            rotation: 0.0,
            scale,
            leg_swing: 0.0,
            arm_swing: 0.0,
        }
    }

    fn articulation_angle(&self, part: &Part) -> f64 {
        part.side
            * match part.articulation {
                Articulation::Rigid => 0.0,
                Articulation::Arm => self.arm_swing,
                Articulation::Leg => self.leg_swing,
            }
    }

    /// Part rest coordinates to image coordinates.
    pub fn to_image(&self, part: &Part, p: [f64; 2]) -> [f64; 2] {
        let q = rotate_about(p, part.pivot, self.articulation_angle(part));
        let (s, c) = self.rotation.sin_cos();
        [
            self.tx + self.scale * (c * q[0] - s * q[1]),
            self.ty + self.scale * (s * q[0] + c * q[1]),
        ]
    }

    /// Image coordinates to part rest coordinates.
    pub fn to_part(&self, part: &Part, p: [f64; 2]) -> [f64; 2] {
        let (dx, dy) = ((p[0] - self.tx) / self.scale, (p[1] - self.ty) / self.scale);
        let (s, c) = self.rotation.sin_cos();
        let q = [c * dx + s * dy, -s * dx + c * dy];
        rotate_about(q, part.pivot, -self.articulation_angle(part))
    }
}

fn rotate_about(p: [f64; 2], pivot: [f64; 2], angle: f64) -> [f64; 2] {
    if angle == 0.0 {
        return p;
    }
    let (s, c) = angle.sin_cos();
    let (dx, dy) = (p[0] - pivot[0], p[1] - pivot[1]);
    [pivot[0] + c * dx - s * dy, pivot[1] + s * dx + c * dy]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    WalkAcross,
    Bob,
    Approach,
}

impl TrajectoryKind {
    pub const ALL: [TrajectoryKind; 3] = [TrajectoryKind::WalkAcross, TrajectoryKind::Bob, TrajectoryKind::Approach];

    pub fn name(self) -> &'static str {
        match self {
            TrajectoryKind::WalkAcross => "walk_across",
            TrajectoryKind::Bob => "bob",
            TrajectoryKind::Approach => "approach",
        }
    }
}

impl FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown trajectory preset {s:?}")))
    }
}

/// Body scale classes and the approach ramp endpoints.
pub const SCALE_PRESETS: [f64; 3] = [0.5, 1.0, 1.5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseJitter {
    /// Relative scale jitter, uniform in `1 ± scale`.
    pub scale: f64,
    /// Translation jitter in pixels.
    pub translate: f64,
    pub rotation: f64,
}

impl Default for PoseJitter {
    fn default() -> Self {
        PoseJitter {
            scale: 0.1,
            translate: 5.0,
            rotation: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySetup {
    pub sensor: Sensor,
    pub scale: f64,
    pub jitter: PoseJitter,
    pub frame_interval_us: u64,
}

impl TrajectorySetup {
    pub fn new(sensor: Sensor, scale: f64) -> Self {
        TrajectorySetup {
            sensor,
            scale,
            jitter: PoseJitter::default(),
            frame_interval_us: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    /// Microseconds, strictly increasing.
    pub times: Vec<u64>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>, times: Vec<u64>) -> Result<Self> {
        if poses.len() < 2 || poses.len() != times.len() {
            return Err(Error::Contract(format!(
                "trajectory needs at least 2 frames with matching times, got {} poses and {} times",
                poses.len(),
                times.len()
            )));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract("trajectory times must be strictly increasing".into()));
        }
        if let Some(p) = poses.iter().find(|p| !(p.scale > 0.0)) {
            return Err(Error::InvalidGeometry(format!("pose scale must be positive, got {}", p.scale)));
        }
        Ok(Trajectory { poses, times })
    }

    /// A motionless trajectory.
    pub fn stationary(pose: Pose, n: usize, interval_us: u64) -> Result<Self> {
        Self::new(vec![pose; n], (0..n as u64).map(|k| k * interval_us).collect())
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let poses = self
            .poses
            .iter()
            .map(|p| Pose {
                tx: p.tx + dx,
                ty: p.ty + dy,
                ..*p
            })
            .collect();
        Trajectory {
            poses,
            times: self.times.clone(),
        }
    }
}

pub fn make_trajectory(kind: TrajectoryKind, n: usize, seed: u64, setup: &TrajectorySetup) -> Result<Trajectory> {
    if n < 2 {
        return Err(Error::Contract(format!("trajectory needs N >= 2 frames, got {n}")));
    }
    if !(setup.scale > 0.0) {
        return Err(Error::InvalidGeometry(format!("body scale must be positive, got {}", setup.scale)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = setup.jitter;
    let mut sym = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let scale = setup.scale * (1.0 + sym(j.scale));
    let (cx, cy) = (setup.sensor.width as f64 / 2.0 + sym(j.translate), setup.sensor.height as f64 / 2.0 + sym(j.translate));
    let rotation = sym(j.rotation);
    let phase0 = sym(std::f64::consts::PI);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a11);
    let last = (n - 1) as f64;

    let poses = (0..n)
        .map(|k| {
            let kf = k as f64;
            let phase = phase0 + 0.5 * kf;
            match kind {
                TrajectoryKind::WalkAcross => Pose {
                    tx: 0.0,
                    ty: cy,
                    rotation,
                    scale,
                    leg_swing: 0.35 * phase.sin(),
                    arm_swing: -0.3 * phase.sin(),
                },
                TrajectoryKind::Bob => Pose {
                    tx: cx,
                    ty: cy + 2.5 * scale * (phase * 2.0).sin(),
                    rotation,
                    scale,
                    leg_swing: 0.1 * phase.sin(),
                    arm_swing: 0.15 * phase.sin(),
                },
                TrajectoryKind::Approach => Pose {
                    tx: cx,
                    ty: cy,
                    rotation,
                    scale: SCALE_PRESETS[0] + (SCALE_PRESETS[2] - SCALE_PRESETS[0]) * kf / last,
                    leg_swing: 0.2 * phase.sin(),
                    arm_swing: -0.2 * phase.sin(),
                },
            }
        })
        .collect::<Vec<_>>();

    let poses = if kind == TrajectoryKind::WalkAcross {
        let speed = rng.gen_range(2.0..3.5) * scale.max(0.5);
        let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let x0 = cx - dir * speed * last / 2.0;
        poses
            .into_iter()
            .enumerate()
            .map(|(k, p)| Pose {
                tx: x0 + dir * speed * k as f64,
                ..p
            })
            .collect()
    } else {
        poses
    };
    let times = (1..=n as u64).map(|k| k * setup.frame_interval_us).collect();
    Trajectory::new(poses, times)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Background {
    Constant { level: f64 },
    /// Vertical sinusoidal stripes scrolling horizontally.
    Stripes { mean: f64, amplitude: f64, period: f64, speed: f64 },
}

impl Default for Background {
    fn default() -> Self {
        Background::Constant { level: 0.5 }
    }
}

impl Background {
    pub fn stripes() -> Self {
        Background::Stripes {
            mean: 0.5,
            amplitude: 0.25,
            period: 16.0,
            speed: 2.0,
        }
    }

    pub fn frame(&self, sensor: Sensor, k: usize) -> Vec<f64> {
        match *self {
            Background::Constant { level } => vec![level.clamp(EPS_LUM, 1.0); sensor.pixels()],
            Background::Stripes { mean, amplitude, period, speed } => {
                let row: Vec<f64> = (0..sensor.width)
                    .map(|x| {
                        let phase = (x as f64 + 0.5 - speed * k as f64) / period;
                        (mean + amplitude * (std::f64::consts::TAU * phase).sin()).clamp(EPS_LUM, 1.0)
                    })
                    .collect();
                row.repeat(sensor.height)
            }
        }
    }
}

/// Per-pixel coverage and texture coordinates of one part in one frame.
pub struct PartRaster {
    pub alpha: Vec<f64>,
    pub coords: Vec<[f64; 2]>,
}

pub fn rasterize_part(part: &Part, pose: &Pose, sensor: Sensor) -> PartRaster {
    let n = sensor.pixels();
    let mut alpha = vec![0.0; n];
    let fallback = part.uv.map(|r| [r.x0 as f64, r.y0 as f64]).unwrap_or([0.0, 0.0]);
    let mut coords = vec![fallback; n];
    let r = part.rect;
    let (w, h) = (r.width(), r.height());

    let corners = [[r.x_min, r.y_min], [r.x_max, r.y_min], [r.x_min, r.y_max], [r.x_max, r.y_max]];
    let img: Vec<[f64; 2]> = corners.iter().map(|&c| pose.to_image(part, c)).collect();
    let lo_x = img.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min) - 1.0;
    let hi_x = img.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let lo_y = img.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min) - 1.0;
    let hi_y = img.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let clamp_px = |v: f64, n: usize| v.max(0.0).min(n as f64) as usize;
    let (x0, x1) = (clamp_px(lo_x.floor(), sensor.width), clamp_px(hi_x.ceil(), sensor.width));
    let (y0, y1) = (clamp_px(lo_y.floor(), sensor.height), clamp_px(hi_y.ceil(), sensor.height));

    for i in y0..y1 {
        for j in x0..x1 {
            let l = pose.to_part(part, [j as f64 + 0.5, i as f64 + 0.5]);
            let sd = (r.x_min - l[0]).max(l[0] - r.x_max).max((r.y_min - l[1]).max(l[1] - r.y_max));
            let a = (0.5 - sd * pose.scale).clamp(0.0, 1.0);
            if a == 0.0 {
                continue;
            }
            let idx = i * sensor.width + j;
            alpha[idx] = a;
            if let Some(uv) = part.uv {
                let fu = ((l[0] - r.x_min) / w).clamp(0.0, 1.0);
                let fv = ((l[1] - r.y_min) / h).clamp(0.0, 1.0);
                let (fa, fb) = if part.transpose_uv { (fv, fu) } else { (fu, fv) };
                let tx = (uv.x0 as f64 + fa * uv.width() as f64 - 0.5).clamp(uv.x0 as f64, (uv.x1 - 1) as f64);
                let ty = (uv.y0 as f64 + fb * uv.height() as f64 - 0.5).clamp(uv.y0 as f64, (uv.y1 - 1) as f64);
                coords[idx] = [tx, ty];
            }
        }
    }
    PartRaster { alpha, coords }
}

/// Renders every frame of `traj` onto the tape. `texture` is an `[H, H]` map in `[0, 1]`.
pub fn render_frames(
    tape: &mut Tape,
    texture: Var,
    body: &BodyModel,
    traj: &Trajectory,
    background: &Background,
    sensor: Sensor,
) -> Result<Vec<Var>> {
    let ts = tape.value(texture).shape().to_vec();
    if ts.len() != 2 || ts[0] != ts[1] {
        return Err(Error::shape("render_frames", "[H, H] texture", format!("{ts:?}")));
    }
    body.validate(ts[0])?;
    if let Some(p) = traj.poses.iter().find(|p| !(p.scale > 0.0)) {
        return Err(Error::InvalidGeometry(format!("pose scale must be positive, got {}", p.scale)));
    }
    let shape = [sensor.height, sensor.width];
    let lum = tape.scale(texture, 1.0 - EPS_LUM);
    let lum = tape.shift(lum, EPS_LUM);
    let lo = tape.constant(Tensor::scalar(EPS_LUM));
    let hi = tape.constant(Tensor::scalar(1.0));

    let mut frames = Vec::with_capacity(traj.len());
    for (k, pose) in traj.poses.iter().enumerate() {
        let mut canvas = tape.constant(Tensor::new(shape.to_vec(), background.frame(sensor, k))?);
        for part in &body.parts {
            let raster = rasterize_part(part, pose, sensor);
            if raster.alpha.iter().all(|&a| a == 0.0) {
                continue;
            }
            let keep = tape.constant(Tensor::new(shape.to_vec(), raster.alpha.iter().map(|a| 1.0 - a).collect())?);
            let behind = tape.mul(canvas, keep)?;
            let alpha = Tensor::new(shape.to_vec(), raster.alpha)?;
            let front = match part.uv {
                Some(_) => {
                    let texel = tape.bilinear_sample(lum, raster.coords, &shape)?;
                    let a = tape.constant(alpha);
                    tape.mul(texel, a)?
                }
                None => tape.constant(alpha),
            };
            canvas = tape.add(behind, front)?;
        }
        let c = tape.maximum(canvas, lo)?;
        frames.push(tape.minimum(c, hi)?);
    }
    Ok(frames)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub sensor: Sensor,
    /// Row-major `[H, W]` intensities in `[EPS_LUM, 1]`.
    pub frames: Vec<Vec<f64>>,
    pub times: Vec<u64>,
}

impl FrameSequence {
    pub fn new(sensor: Sensor, frames: Vec<Vec<f64>>, times: Vec<u64>) -> Result<Self> {
        if frames.len() != times.len() {
            return Err(Error::Contract(format!("{} frames but {} times", frames.len(), times.len())));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract("frame times must be strictly increasing".into()));
        }
        for (k, f) in frames.iter().enumerate() {
            if f.len() != sensor.pixels() {
                return Err(Error::shape("FrameSequence", sensor.pixels(), f.len()));
            }
            if let Some(v) = f.iter().find(|v| !(**v >= EPS_LUM && **v <= 1.0)) {
                return Err(Error::Domain {
                    op: "FrameSequence",
                    reason: format!("frame {k} has intensity {v} outside [{EPS_LUM}, 1]"),
                });
            }
        }
        Ok(FrameSequence { sensor, frames, times })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn image(&self, k: usize) -> GrayImage {
        GrayImage::new(self.sensor.width, self.sensor.height, self.frames[k].clone()).expect("frame geometry")
    }
}

/// Non-differentiable convenience wrapper around [`render_frames`].
pub fn render_sequence(
    texture: &Tensor,
    body: &BodyModel,
    traj: &Trajectory,
    background: &Background,
    sensor: Sensor,
) -> Result<FrameSequence> {
    let mut tape = Tape::new();
    let t = tape.constant(texture.clone());
    let frames = render_frames(&mut tape, t, body, traj, background, sensor)?;
    let frames = frames.iter().map(|&f| tape.value(f).data().to_vec()).collect();
    FrameSequence::new(sensor, frames, traj.times.clone())
}

/// Tight box around all transformed part rectangles, clipped to the sensor.
pub fn ground_truth_box(body: &BodyModel, pose: &Pose, sensor: Sensor) -> Option<BBox> {
    let mut b: Option<BBox> = None;
    for part in &body.parts {
        let r = part.rect;
        for c in [[r.x_min, r.y_min], [r.x_max, r.y_min], [r.x_min, r.y_max], [r.x_max, r.y_max]] {
            let p = pose.to_image(part, c);
            let pt = BBox::new(p[0], p[1], p[0], p[1]);
            b = Some(b.map_or(pt, |acc| acc.union(&pt)));
        }
    }
    b?.clip(sensor.width as f64, sensor.height as f64)
}

pub fn ground_truth_boxes(body: &BodyModel, traj: &Trajectory, sensor: Sensor) -> Vec<Option<BBox>> {
    traj.poses.iter().map(|p| ground_truth_box(body, p, sensor)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::texture::TextureMap;

    fn setup() -> (TextureGeometry, BodyModel, Sensor) {
        let g = TextureGeometry::new(10, 60).unwrap();
        let body = BodyModel::standard(g, &MaskLayout::standard(g));
        (g, body, Sensor::new(64, 64).unwrap())
    }

    #[test]
    fn standard_body_is_valid() {
        let (g, body, _) = setup();
        body.validate(g.size).unwrap();
        assert_eq!(body.rest_bounds(), BBox::new(-9.5, -18.0, 9.5, 18.0));
    }

    #[test]
    fn trajectories_are_deterministic() {
        let s = TrajectorySetup::new(Sensor::new(64, 64).unwrap(), 1.0);
        for kind in TrajectoryKind::ALL {
            let a = make_trajectory(kind, 10, 7, &s).unwrap();
            assert_eq!(a, make_trajectory(kind, 10, 7, &s).unwrap());
            assert_ne!(a, make_trajectory(kind, 10, 8, &s).unwrap());
        }
        assert!(make_trajectory(TrajectoryKind::Bob, 1, 7, &s).is_err());
        assert!("moonwalk".parse::<TrajectoryKind>().is_err());
        assert_eq!("walk_across".parse::<TrajectoryKind>().unwrap(), TrajectoryKind::WalkAcross);
    }

    #[test]
    fn approach_spans_scale_presets() {
        let s = TrajectorySetup::new(Sensor::new(64, 64).unwrap(), 1.0);
        let t = make_trajectory(TrajectoryKind::Approach, 5, 3, &s).unwrap();
        let scales: Vec<f64> = t.poses.iter().map(|p| p.scale).collect();
        assert_eq!(scales, vec![0.5, 0.75, 1.0, 1.25, 1.5]);
    }

    #[test]
    fn white_texture_on_gray_is_two_valued_inside() {
        let (g, body, sensor) = setup();
        let traj = Trajectory::stationary(Pose::at(32.0, 32.0, 1.0), 2, 1000).unwrap();
        let tex = TextureMap::constant(g.size, 1.0).to_tensor();
        let seq = render_sequence(&tex, &body, &traj, &Background::default(), sensor).unwrap();
        for f in &seq.frames {
            for &v in f {
                assert!((0.5..=1.0).contains(&v));
            }
            // a torso pixel and a far background pixel
            assert_eq!(f[30 * 64 + 32], 1.0);
            assert_eq!(f[2 * 64 + 2], 0.5);
        }
    }

    #[test]
    fn static_trajectory_gives_identical_frames() {
        let (_, body, sensor) = setup();
        let traj = Trajectory::stationary(Pose::at(30.3, 33.1, 1.2), 4, 1000).unwrap();
        let tex = TextureMap::from_grid(&(0..100).map(|i| (i % 2) as f64).collect::<Vec<_>>(), 10, 6).to_tensor();
        let seq = render_sequence(&tex, &body, &traj, &Background::default(), sensor).unwrap();
        assert!(seq.frames.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn gt_box_examples() {
        let (_, body, sensor) = setup();
        let b = ground_truth_box(&body, &Pose::at(32.0, 32.0, 1.0), sensor).unwrap();
        assert_eq!(b, BBox::new(22.5, 14.0, 41.5, 50.0));
        let moved = ground_truth_box(&body, &Pose::at(35.0, 30.0, 1.0), sensor).unwrap();
        assert_eq!(moved, b.translate(3.0, -2.0));
        let big = ground_truth_box(&body, &Pose::at(32.0, 32.0, 0.5), sensor).unwrap();
        assert!((b.width() - 2.0 * big.width()).abs() < 1e-12);
        assert!((b.height() - 2.0 * big.height()).abs() < 1e-12);
        assert!(ground_truth_box(&body, &Pose::at(500.0, 32.0, 1.0), sensor).is_none());
    }

    #[test]
    fn degenerate_scale_is_rejected() {
        let (g, body, sensor) = setup();
        let traj = Trajectory {
            poses: vec![Pose::at(32.0, 32.0, 0.0); 2],
            times: vec![0, 1],
        };
        let tex = TextureMap::constant(g.size, 1.0).to_tensor();
        assert!(matches!(
            render_sequence(&tex, &body, &traj, &Background::default(), sensor),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn stripes_scroll() {
        let s = Sensor::new(32, 2).unwrap();
        let bg = Background::stripes();
        let (a, b) = (bg.frame(s, 0), bg.frame(s, 1));
        assert!((a[5] - b[7]).abs() < 1e-12);
        assert!(a.iter().all(|v| (0.25..=0.75).contains(v)));
    }
}
