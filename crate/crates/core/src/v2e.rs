//! Differentiable video-to-event conversion.
//!
//! Per pixel, with reference `L_1 = log I_1`:
//!
//! ```text
//! Ŝ_k = (log I_k - L_1) / θ
//! S_k = floor(Ŝ_k),  r_k = Ŝ_k - S_k  (r_1 = 0, r in [0, 1))
//! D_k = S_k - S_{k-1},  N⁺ = h(D_k),  N⁻ = h(-D_k)
//! ```
//!
//! Quantizing the cumulative change rather than each increment keeps the
//! residual bounded and makes `Σ D = S_N - S_1` exact. Carrying the residual
//! into the next floor and quantizing per-interval increments gives the same
//! counts; the other reading (`S = floor(Ŝ) + r` with `r` tracked separately)
//! re-adds the fractional part every step and emits events for static input,
//! so it is not implemented.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::events::{bin_events, time_bin, Event, EventStream, EventTensor, Polarity};
use crate::render::{FrameSequence, Sensor, EPS_LUM};

pub const DEFAULT_THETA: f64 = 0.2;
pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct V2eConfig {
    pub theta: f64,
    pub bins: usize,
}

impl Default for V2eConfig {
    fn default() -> Self {
        V2eConfig {
            theta: DEFAULT_THETA,
            bins: DEFAULT_BINS,
        }
    }
}

impl V2eConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0) || !self.theta.is_finite() {
            return Err(Error::Config(format!("v2e.theta must be positive, got {}", self.theta)));
        }
        if self.bins == 0 {
            return Err(Error::Config("v2e.bins must be at least 1".into()));
        }
        Ok(())
    }
}

/// `Quantized` floors with a straight-through gradient; `Smooth` drops the floor
/// entirely so finite differences can check the same gradient path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantization {
    Quantized,
    Smooth,
}

pub fn to_log_luma(tape: &mut Tape, frame: Var) -> Result<Var> {
    if let Some(v) = tape.value(frame).data().iter().find(|v| !(**v >= EPS_LUM)) {
        return Err(Error::Domain {
            op: "to_log_luma",
            reason: format!("intensity {v} below {EPS_LUM}"),
        });
    }
    tape.log(frame)
}

pub struct V2eState {
    pub reference: Var,
    pub s_prev: Var,
    pub residual: Var,
    theta: Var,
}

impl V2eState {
    pub fn new(tape: &mut Tape, reference: Var, theta: f64) -> Result<Self> {
        if !(theta > 0.0) {
            return Err(Error::Contract(format!("contrast threshold must be positive, got {theta}")));
        }
        let shape = tape.value(reference).shape().to_vec();
        Ok(V2eState {
            reference,
            s_prev: tape.constant(Tensor::zeros(shape.clone())),
            residual: tape.constant(Tensor::zeros(shape)),
            theta: tape.constant(Tensor::scalar(theta)),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CountMaps {
    pub pos: Var,
    pub neg: Var,
}

pub fn v2e_step(tape: &mut Tape, state: V2eState, frame: Var, mode: Quantization) -> Result<(CountMaps, V2eState)> {
    let (rs, fs) = (tape.value(state.reference).shape(), tape.value(frame).shape());
    if rs != fs {
        return Err(Error::shape("v2e_step", format!("{rs:?}"), format!("{fs:?}")));
    }
    let delta = tape.sub(frame, state.reference)?;
    let s_hat = tape.div(delta, state.theta)?;
    let s = match mode {
        Quantization::Quantized => tape.ste_floor(s_hat),
        Quantization::Smooth => s_hat,
    };
    let residual = tape.sub(s_hat, s)?;
    let d = tape.sub(s, state.s_prev)?;
    let pos = tape.half_rectify(d);
    let nd = tape.neg(d);
    let neg = tape.half_rectify(nd);
    Ok((
        CountMaps { pos, neg },
        V2eState {
            s_prev: s,
            residual,
            ..state
        },
    ))
}

pub struct V2eOutput {
    /// `[2B, H, W]`, channel `p * B + bin` with positive polarity first.
    pub tensor: Var,
    pub intervals: Vec<CountMaps>,
    /// Present for [`Quantization::Quantized`] only.
    pub stream: Option<EventStream>,
}

/// Bin of each interval's events, which are stamped at the interval's end time.
pub fn interval_bins(times: &[u64], bins: usize) -> Vec<usize> {
    let (t0, t_end) = (times[0], times[times.len() - 1] + 1);
    times[1..].iter().map(|&t| time_bin(t, t0, t_end, bins)).collect()
}

pub fn v2e_sequence(
    tape: &mut Tape,
    frames: &[Var],
    times: &[u64],
    sensor: Sensor,
    cfg: &V2eConfig,
    mode: Quantization,
) -> Result<V2eOutput> {
    if frames.len() < 2 || frames.len() != times.len() {
        return Err(Error::Contract(format!(
            "v2e needs at least 2 frames with matching times, got {} frames and {} times",
            frames.len(),
            times.len()
        )));
    }
    cfg.validate()?;
    let reference = to_log_luma(tape, frames[0])?;
    let mut state = V2eState::new(tape, reference, cfg.theta)?;
    let mut intervals = Vec::with_capacity(frames.len() - 1);
    for &f in &frames[1..] {
        let l = to_log_luma(tape, f)?;
        let (counts, next) = v2e_step(tape, state, l, mode)?;
        intervals.push(counts);
        state = next;
    }

    let bins = interval_bins(times, cfg.bins);
    let zero = tape.constant(Tensor::zeros(vec![sensor.height, sensor.width]));
    let mut channels = Vec::with_capacity(2 * cfg.bins);
    for p in 0..2 {
        for b in 0..cfg.bins {
            let mut acc: Option<Var> = None;
            for (c, &ib) in intervals.iter().zip(&bins) {
                if ib == b {
                    let m = if p == 0 { c.pos } else { c.neg };
                    acc = Some(match acc {
                        None => m,
                        Some(a) => tape.add(a, m)?,
                    });
                }
            }
            channels.push(acc.unwrap_or(zero));
        }
    }
    let tensor = tape.stack(&channels)?;

    let stream = match mode {
        Quantization::Smooth => None,
        Quantization::Quantized => {
            let counts: Vec<(Vec<f64>, Vec<f64>)> = intervals
                .iter()
                .map(|c| (tape.value(c.pos).data().to_vec(), tape.value(c.neg).data().to_vec()))
                .collect();
            Some(emit_stream(&counts, times, sensor)?)
        }
    };
    Ok(V2eOutput { tensor, intervals, stream })
}

fn emit_stream(intervals: &[(Vec<f64>, Vec<f64>)], times: &[u64], sensor: Sensor) -> Result<EventStream> {
    let mut events = Vec::new();
    for (k, (pos, neg)) in intervals.iter().enumerate() {
        let t = times[k + 1];
        for y in 0..sensor.height {
            for x in 0..sensor.width {
                let i = y * sensor.width + x;
                for (p, n) in [(Polarity::Positive, pos[i]), (Polarity::Negative, neg[i])] {
                    for _ in 0..n as u64 {
                        events.push(Event::new(x as u16, y as u16, t, p));
                    }
                }
            }
        }
    }
    EventStream::new(
        events,
        sensor.width as u16,
        sensor.height as u16,
        times[0],
        times[times.len() - 1] + 1,
    )
}

/// Converts a finished frame sequence without gradients.
pub fn convert(seq: &FrameSequence, cfg: &V2eConfig) -> Result<(EventTensor, EventStream)> {
    let mut tape = Tape::new();
    let frames: Vec<Var> = seq
        .frames
        .iter()
        .map(|f| Tensor::new(vec![seq.sensor.height, seq.sensor.width], f.clone()).map(|t| tape.constant(t)))
        .collect::<Result<_>>()?;
    let out = v2e_sequence(&mut tape, &frames, &seq.times, seq.sensor, cfg, Quantization::Quantized)?;
    let stream = out.stream.expect("quantized conversion yields a stream");
    Ok((bin_events(&stream, cfg.bins)?, stream))
}

/// Integer counts of one interval from the reference implementation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntervalCounts {
    pub pos: Vec<u32>,
    pub neg: Vec<u32>,
}

/// Slow per-pixel sequential reference, counts per interval.
pub fn v2e_oracle_counts(seq: &FrameSequence, theta: f64) -> Result<Vec<IntervalCounts>> {
    if seq.len() < 2 {
        return Err(Error::Contract(format!("v2e needs at least 2 frames, got {}", seq.len())));
    }
    if !(theta > 0.0) {
        return Err(Error::Contract(format!("contrast threshold must be positive, got {theta}")));
    }
    let n = seq.sensor.pixels();
    let mut out = vec![
        IntervalCounts {
            pos: vec![0; n],
            neg: vec![0; n],
        };
        seq.len() - 1
    ];
    for i in 0..n {
        let reference = seq.frames[0][i].ln();
        let mut s_prev = 0.0f64;
        for k in 1..seq.len() {
            let s_hat = (seq.frames[k][i].ln() - reference) / theta;
            let s = s_hat.floor();
            let d = s - s_prev;
            if d > 0.0 {
                out[k - 1].pos[i] = d as u32;
            } else if d < 0.0 {
                out[k - 1].neg[i] = (-d) as u32;
            }
            s_prev = s;
        }
    }
    Ok(out)
}

pub fn v2e_oracle(seq: &FrameSequence, theta: f64) -> Result<EventStream> {
    let counts = v2e_oracle_counts(seq, theta)?;
    let as_f64: Vec<(Vec<f64>, Vec<f64>)> = counts
        .iter()
        .map(|c| (c.pos.iter().map(|&v| v as f64).collect(), c.neg.iter().map(|&v| v as f64).collect()))
        .collect();
    emit_stream(&as_f64, &seq.times, seq.sensor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_from(values: &[&[f64]], w: usize, h: usize) -> FrameSequence {
        FrameSequence::new(
            Sensor::new(w, h).unwrap(),
            values.iter().map(|v| v.to_vec()).collect(),
            (0..values.len() as u64).map(|k| 1000 * k).collect(),
        )
        .unwrap()
    }

    fn counts(seq: &FrameSequence, theta: f64) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let frames: Vec<Var> = seq
            .frames
            .iter()
            .map(|f| tape.constant(Tensor::new(vec![seq.sensor.height, seq.sensor.width], f.clone()).unwrap()))
            .collect();
        let cfg = V2eConfig { theta, bins: 4 };
        let out = v2e_sequence(&mut tape, &frames, &seq.times, seq.sensor, &cfg, Quantization::Quantized).unwrap();
        out.intervals
            .iter()
            .map(|c| (tape.value(c.pos).data().to_vec(), tape.value(c.neg).data().to_vec()))
            .collect()
    }

    #[test]
    fn log_luma_examples() {
        let mut t = Tape::new();
        let f = t.leaf(Tensor::new(vec![3], vec![1.0, (-1.0f64).exp(), 0.5]).unwrap());
        let l = to_log_luma(&mut t, f).unwrap();
        assert_eq!(t.value(l).data()[0], 0.0);
        assert!((t.value(l).data()[1] + 1.0).abs() < 1e-15);
        let s = t.sum(l);
        assert_eq!(t.backward(s).unwrap().get(f).unwrap()[2], 2.0);
        let bad = t.constant(Tensor::full(vec![1], 1e-4));
        assert!(matches!(to_log_luma(&mut t, bad), Err(Error::Domain { .. })));
    }

    #[test]
    fn identical_frames_emit_nothing() {
        let seq = seq_from(&[&[0.3, 0.7], &[0.3, 0.7], &[0.3, 0.7]], 2, 1);
        for (p, n) in counts(&seq, 0.2) {
            assert_eq!(p, vec![0.0; 2]);
            assert_eq!(n, vec![0.0; 2]);
        }
    }

    #[test]
    fn step_examples() {
        // one step up by θ and one down by 2θ; the 1e-12 nudges keep float
        // rounding of exp/ln on the intended side of each integer
        let base = 0.5f64;
        let up = (base.ln() + 0.2 + 1e-12).exp();
        let down = (base.ln() - 0.4 + 1e-12).exp();
        let seq = seq_from(&[&[base, base], &[up, down]], 2, 1);
        let c = counts(&seq, 0.2);
        assert_eq!(c[0].0, vec![1.0, 0.0]);
        assert_eq!(c[0].1, vec![0.0, 2.0]);
    }

    #[test]
    fn ramp_and_reversal() {
        let base = 0.2f64;
        let ramp: Vec<Vec<f64>> = (0..10).map(|k| vec![(base.ln() + 0.05 * k as f64).exp()]).collect();
        let refs: Vec<&[f64]> = ramp.iter().map(|v| v.as_slice()).collect();
        let seq = seq_from(&refs, 1, 1);
        let total: f64 = counts(&seq, 0.2).iter().map(|(p, _)| p[0]).sum();
        assert_eq!(total, 2.0);

        let hi = (base.ln() + 0.3).exp();
        let seq = seq_from(&[&[base], &[hi], &[base]], 1, 1);
        let c = counts(&seq, 0.2);
        assert_eq!((c[0].0[0], c[0].1[0]), (1.0, 0.0));
        assert_eq!((c[1].0[0], c[1].1[0]), (0.0, 1.0));
    }

    #[test]
    fn static_sequence_gives_empty_stream_and_tensor() {
        let seq = seq_from(&[&[0.5; 4], &[0.5; 4]], 2, 2);
        let (tensor, stream) = convert(&seq, &V2eConfig::default()).unwrap();
        assert!(stream.is_empty());
        assert_eq!(tensor.total(), 0);
        assert!(convert(&seq_from(&[&[0.5; 4]], 2, 2), &V2eConfig::default()).is_err());
    }

    #[test]
    fn interval_bins_stamp_at_end() {
        assert_eq!(interval_bins(&[20_000, 40_000, 60_000, 80_000], 10), vec![3, 6, 9]);
        assert_eq!(interval_bins(&[0, 10], 10), vec![9]);
    }
}
