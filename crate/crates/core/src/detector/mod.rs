//! Single-class anchor-free event detector: three stride-2 conv stages and
//! objectness, class and box heads on a stride-8 grid.

mod train;

pub use train::{build_training_data, positive_cells, train_surrogate, train_with_progress, validation_ap, TrainConfig, TrainLogEntry, TrainOutcome, TrainingData, TrainingSpec};

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, Conv2dSpec, Tape, Tensor, Var};
use crate::container;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const STRIDE: usize = 8;
pub const WIDTHS: [usize; 3] = [16, 32, 64];
/// Backbone kernel sides; with the 3x3 heads the receptive field is 45 px.
pub const KERNELS: [usize; 3] = [5, 5, 5];
pub const HEAD_KERNEL: usize = 3;
pub const MAGIC: &[u8; 4] = b"EVDT";
/// Multiplier on the raw event counts.
pub const INPUT_SCALE: f64 = 0.25;
/// Box logits are capped so `exp` stays well inside the sensor scale.
pub const BOX_LOGIT_MAX: f64 = 3.0;
pub const NMS_IOU: f64 = 0.5;

/// Initial objectness/class bias, a low prior for the rare positive cells.
const PRIOR_LOGIT: f64 = -2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    /// conv1 w, b, conv2 w, b, conv3 w, b, obj w, b, cls w, b, box w, b.
    tensors: Vec<Tensor>,
    frozen: bool,
}

impl DetectorParams {
    /// He-uniform initialization.
    pub fn init(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = |o: usize, c: usize, k: usize, bias: f64| {
            let bound = (6.0 / (c * k * k) as f64).sqrt();
            let w = (0..o * c * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
            [Tensor::new(vec![o, c, k, k], w).unwrap(), Tensor::full(vec![o], bias)]
        };
        let mut tensors = Vec::new();
        tensors.extend(conv(WIDTHS[0], in_channels, KERNELS[0], 0.0));
        tensors.extend(conv(WIDTHS[1], WIDTHS[0], KERNELS[1], 0.0));
        tensors.extend(conv(WIDTHS[2], WIDTHS[1], KERNELS[2], 0.0));
        tensors.extend(conv(1, WIDTHS[2], HEAD_KERNEL, PRIOR_LOGIT));
        tensors.extend(conv(1, WIDTHS[2], HEAD_KERNEL, PRIOR_LOGIT));
        let [w, b] = conv(4, WIDTHS[2], HEAD_KERNEL, 0.0);
        tensors.push(w.map(|v| 0.1 * v));
        tensors.push(b);
        DetectorParams { tensors, frozen: false }
    }

    pub fn in_channels(&self) -> usize {
        self.tensors[0].shape()[1]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn tensors_mut(&mut self) -> Result<&mut [Tensor]> {
        if self.frozen {
            return Err(Error::Contract("detector parameters are frozen".into()));
        }
        Ok(&mut self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        container::encode(MAGIC, &self.tensors)
    }

    /// Loaded parameters are frozen.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let tensors = container::decode(MAGIC, bytes)?;
        let expected = Self::init(tensors.first().map_or(0, |t| t.shape().get(1).copied().unwrap_or(0)), 0);
        if tensors.len() != expected.tensors.len() || tensors.iter().zip(&expected.tensors).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::format(8, "layer shapes do not match the detector architecture"));
        }
        Ok(DetectorParams { tensors, frozen: true })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized parameters, hex encoded.
    pub fn hash(&self) -> String {
        container::sha256_hex(&self.to_bytes())
    }

    /// Places the parameters on `tape`, as leaves when `trainable`.
    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        ParamVars(
            self.tensors
                .iter()
                .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
                .collect(),
        )
    }
}

pub struct ParamVars(pub Vec<Var>);

/// Undecoded detector output; `obj` and `cls` are flat `[gh * gw]` logits,
/// `boxes` is flat `[4 * gh * gw]` (left, top, right, bottom planes).
#[derive(Debug, Clone, Copy)]
pub struct RawGrid {
    pub obj: Var,
    pub cls: Var,
    pub boxes: Var,
    pub gh: usize,
    pub gw: usize,
    pub stride: usize,
}

impl RawGrid {
    pub fn cells(&self) -> usize {
        self.gh * self.gw
    }

    pub fn cell_center(&self, cell: usize) -> [f64; 2] {
        let (gy, gx) = (cell / self.gw, cell % self.gw);
        [(gx as f64 + 0.5) * self.stride as f64, (gy as f64 + 0.5) * self.stride as f64]
    }

    pub fn read(&self, tape: &Tape) -> GridOutput {
        let n = self.cells();
        let b = tape.value(self.boxes).data();
        let boxes = (0..n)
            .map(|i| {
                let c = self.cell_center(i);
                let s = self.stride as f64;
                BBox::new(c[0] - s * b[i].exp(), c[1] - s * b[n + i].exp(), c[0] + s * b[2 * n + i].exp(), c[1] + s * b[3 * n + i].exp())
            })
            .collect();
        GridOutput {
            obj: tape.value(self.obj).data().iter().map(|&v| sigmoid(v)).collect(),
            cls: tape.value(self.cls).data().iter().map(|&v| sigmoid(v)).collect(),
            boxes,
        }
    }
}

/// Output grid probabilities and decoded per-cell boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridOutput {
    pub obj: Vec<f64>,
    pub cls: Vec<f64>,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub obj: f64,
    pub cls: f64,
    pub conf: f64,
}

/// `input` is a `[2B, H, W]` tensor of event counts.
pub fn forward(tape: &mut Tape, input: Var, params: &ParamVars) -> Result<RawGrid> {
    let shape = tape.value(input).shape().to_vec();
    let p = &params.0;
    let expected = tape.value(p[0]).shape()[1];
    if shape.len() != 3 || shape[0] != expected {
        return Err(Error::shape("detector forward", format!("[{expected}, H, W]"), format!("{shape:?}")));
    }
    // Raw counts, brought to roughly unit scale.
    let mut x = tape.scale(input, INPUT_SCALE);
    for stage in 0..3 {
        let spec = Conv2dSpec {
            stride: 2,
            padding: KERNELS[stage] / 2,
        };
        let y = tape.conv2d(x, p[2 * stage], Some(p[2 * stage + 1]), spec)?;
        x = tape.half_rectify(y);
    }
    let (gh, gw) = {
        let s = tape.value(x).shape();
        (s[1], s[2])
    };
    const HEAD: Conv2dSpec = Conv2dSpec {
        stride: 1,
        padding: HEAD_KERNEL / 2,
    };
    let obj = tape.conv2d(x, p[6], Some(p[7]), HEAD)?;
    let cls = tape.conv2d(x, p[8], Some(p[9]), HEAD)?;
    let boxes = tape.conv2d(x, p[10], Some(p[11]), HEAD)?;
    let cap = tape.constant(Tensor::scalar(BOX_LOGIT_MAX));
    let boxes = tape.minimum(boxes, cap)?;
    Ok(RawGrid {
        obj: tape.reshape(obj, &[gh * gw])?,
        cls: tape.reshape(cls, &[gh * gw])?,
        boxes: tape.reshape(boxes, &[4 * gh * gw])?,
        gh,
        gw,
        stride: STRIDE,
    })
}

/// Forward pass without gradients.
pub fn predict(params: &DetectorParams, input: &Tensor) -> Result<GridOutput> {
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape, false);
    let x = tape.constant(input.clone());
    let raw = forward(&mut tape, x, &vars)?;
    Ok(raw.read(&tape))
}

/// Thresholds `obj * cls`, then greedy NMS.
pub fn decode(grid: &GridOutput, conf_threshold: f64) -> Vec<Detection> {
    let mut cands: Vec<Detection> = (0..grid.obj.len())
        .filter_map(|i| {
            let conf = grid.obj[i] * grid.cls[i];
            (conf > conf_threshold && grid.boxes[i].is_valid()).then_some(Detection {
                bbox: grid.boxes[i],
                obj: grid.obj[i],
                cls: grid.cls[i],
                conf,
            })
        })
        .collect();
    cands.sort_by(|a, b| b.conf.total_cmp(&a.conf));
    nms(cands, NMS_IOU)
}

/// Greedy suppression of boxes overlapping a kept, higher-ranked box by more than `threshold`.
pub fn nms(sorted: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= threshold) {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, conf: f64) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
            obj: conf,
            cls: 1.0,
            conf,
        }
    }

    #[test]
    fn zero_input_gives_finite_logits_and_input_matters() {
        let p = DetectorParams::init(4, 1);
        let zero = Tensor::zeros(vec![4, 16, 16]);
        let g = predict(&p, &zero).unwrap();
        assert_eq!(g.obj.len(), 4);
        assert!(g.obj.iter().chain(&g.cls).all(|v| v.is_finite()));
        let ones = Tensor::new(vec![4, 16, 16], (0..1024).map(|i| (i % 7) as f64).collect()).unwrap();
        let doubled = ones.map(|v| 2.0 * v);
        assert_ne!(predict(&p, &ones).unwrap(), predict(&p, &doubled).unwrap());
        assert!(predict(&p, &Tensor::zeros(vec![3, 16, 16])).is_err());
    }

    #[test]
    fn grid_is_ceil_of_input_over_stride() {
        let p = DetectorParams::init(2, 1);
        let g = predict(&p, &Tensor::zeros(vec![2, 20, 13])).unwrap();
        assert_eq!(g.obj.len(), 3 * 2);
    }

    #[test]
    fn decode_threshold_semantics() {
        let grid = GridOutput {
            obj: vec![0.0, 0.6, 0.0],
            cls: vec![0.0, 0.5, 0.0],
            boxes: vec![BBox::new(0.0, 0.0, 1.0, 1.0); 3],
        };
        assert_eq!(decode(&grid, 0.25).len(), 1);
        assert_eq!(decode(&grid, 0.35).len(), 0);
        let none = GridOutput {
            obj: vec![0.0; 3],
            cls: vec![0.0; 3],
            boxes: grid.boxes.clone(),
        };
        assert!(decode(&none, 0.001).is_empty());
    }

    #[test]
    fn nms_keeps_the_stronger_overlap() {
        // shift 10/9 gives IoU 0.8 for 10x10 boxes
        let a = det(0.0, 0.9);
        let b = det(10.0 / 9.0, 0.7);
        assert!((iou(&a.bbox, &b.bbox) - 0.8).abs() < 1e-12);
        let kept = nms(vec![a, b], NMS_IOU);
        assert_eq!(kept, vec![a]);
        let far = det(50.0, 0.5);
        assert_eq!(nms(vec![a, far], NMS_IOU).len(), 2);
    }

    #[test]
    fn frozen_params_refuse_mutation_and_round_trip() {
        let mut p = DetectorParams::init(20, 3);
        let bytes = p.to_bytes();
        let back = DetectorParams::from_bytes(&bytes).unwrap();
        assert!(back.is_frozen());
        assert_eq!(back.tensors(), p.tensors());
        assert_eq!(back.hash(), p.hash());
        p.freeze();
        assert!(p.tensors_mut().is_err());
        assert!(DetectorParams::from_bytes(&bytes[..100]).is_err());
    }
}
