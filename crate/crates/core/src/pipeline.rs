//! Scene simulation: texture to rendered frames to event tensor, with labels.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::geometry::BBox;
use crate::render::{
    ground_truth_boxes, make_trajectory, render_frames, BodyModel, PoseJitter, Sensor, Trajectory, TrajectorySetup,
};
use crate::scenarios::SceneSpec;
use crate::texture::{MaskLayout, TextureGeometry, TextureMap};
use crate::v2e::{v2e_sequence, Quantization, V2eConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSetup {
    pub sensor: Sensor,
    pub geometry: TextureGeometry,
    pub layout: MaskLayout,
    pub body: BodyModel,
    pub v2e: V2eConfig,
    pub jitter: PoseJitter,
    pub frame_interval_us: u64,
}

impl SceneSetup {
    pub fn standard(sensor: Sensor, geometry: TextureGeometry, v2e: V2eConfig) -> Self {
        Self::with_layout(sensor, geometry, MaskLayout::standard(geometry), v2e)
    }

    /// Body UVs and attack mask regions both follow `layout`.
    pub fn with_layout(sensor: Sensor, geometry: TextureGeometry, layout: MaskLayout, v2e: V2eConfig) -> Self {
        SceneSetup {
            sensor,
            geometry,
            layout,
            body: BodyModel::standard(geometry, &layout),
            v2e,
            jitter: PoseJitter::default(),
            frame_interval_us: 20_000,
        }
    }

    pub fn trajectory(&self, spec: &SceneSpec, replicate: u64) -> Result<Trajectory> {
        let setup = TrajectorySetup {
            sensor: self.sensor,
            scale: spec.scale.factor(),
            jitter: self.jitter,
            frame_interval_us: self.frame_interval_us,
        };
        make_trajectory(spec.trajectory, spec.frames, spec.instance_seed(replicate), &setup)
    }

    /// Union of the per-frame boxes; `None` when the body never enters the frame.
    pub fn sequence_box(&self, traj: &Trajectory) -> Option<BBox> {
        ground_truth_boxes(&self.body, traj, self.sensor)
            .into_iter()
            .flatten()
            .reduce(|a, b| a.union(&b))
    }
}

/// One detector input with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[2B, H, W]` event counts.
    pub input: Tensor,
    pub gt: Option<BBox>,
}

/// Builds the event tensor on `tape` so gradients reach `texture`.
pub fn simulate_on_tape(
    tape: &mut Tape,
    setup: &SceneSetup,
    texture: Var,
    spec: &SceneSpec,
    replicate: u64,
    mode: Quantization,
) -> Result<(Var, Option<BBox>)> {
    let traj = setup.trajectory(spec, replicate)?;
    let frames = render_frames(tape, texture, &setup.body, &traj, &spec.background, setup.sensor)?;
    let out = v2e_sequence(tape, &frames, &traj.times, setup.sensor, &setup.v2e, mode)?;
    Ok((out.tensor, setup.sequence_box(&traj)))
}

/// Renders and converts one scene. `None` renders the background alone.
pub fn simulate(setup: &SceneSetup, texture: Option<&TextureMap>, spec: &SceneSpec, replicate: u64) -> Result<Sample> {
    let mut tape = Tape::new();
    match texture {
        Some(tex) => {
            let t = tape.constant(tex.to_tensor());
            let (input, gt) = simulate_on_tape(&mut tape, setup, t, spec, replicate, Quantization::Quantized)?;
            Ok(Sample {
                input: tape.value(input).clone(),
                gt,
            })
        }
        None => {
            let traj = setup.trajectory(spec, replicate)?;
            let t = tape.constant(Tensor::ones(vec![setup.geometry.size, setup.geometry.size]));
            let empty = BodyModel { parts: Vec::new() };
            let frames = render_frames(&mut tape, t, &empty, &traj, &spec.background, setup.sensor)?;
            let out = v2e_sequence(&mut tape, &frames, &traj.times, setup.sensor, &setup.v2e, Quantization::Quantized)?;
            Ok(Sample {
                input: tape.value(out.tensor).clone(),
                gt: None,
            })
        }
    }
}
