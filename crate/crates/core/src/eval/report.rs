use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{compute_ap, compute_seqasr, sequence_detected, ScoredBox, MATCH_IOU};
use crate::detector::{decode, predict, DetectorParams};
use crate::error::{Error, Result};
use crate::pipeline::{simulate, SceneSetup};
use crate::scenarios::{SceneSpec, Split};
use crate::texture::TextureMap;

pub const THRESHOLDS: [f64; 4] = [0.001, 0.01, 0.1, 0.25];

/// Convention line written at the top of every report.
pub const AP_CONVENTION: &str = "AP: single IoU 0.5, all-point interpolation; a sequence counts as detected when a decoded box matches its ground truth at IoU >= 0.5";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub ap: Option<f64>,
    pub seqasr: f64,
    pub m: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub texture_id: String,
    pub detector_hash: String,
    pub rows: Vec<ThresholdRow>,
}

impl EvalReport {
    pub fn row(&self, threshold: f64) -> Option<&ThresholdRow> {
        self.rows.iter().find(|r| r.threshold == threshold)
    }
}

/// Every test-split spec crossed with `replicates` pose-jittered instances.
pub fn eval_sequences(specs: &[SceneSpec], replicates: u64) -> Vec<(SceneSpec, u64)> {
    specs
        .iter()
        .filter(|s| s.split == Split::Test)
        .flat_map(|s| (0..replicates).map(move |r| (s.clone(), r)))
        .collect()
}

pub fn evaluate_texture(
    texture_id: &str,
    texture: &TextureMap,
    detector: &DetectorParams,
    setup: &SceneSetup,
    draws: &[(SceneSpec, u64)],
    thresholds: &[f64],
) -> Result<EvalReport> {
    if draws.is_empty() {
        return Err(Error::Contract("evaluation needs at least one sequence".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::Config(format!("confidence thresholds must lie in (0, 1), got {t}")));
    }
    let mut grids = Vec::with_capacity(draws.len());
    let mut gts = Vec::with_capacity(draws.len());
    for (spec, rep) in draws {
        let s = simulate(setup, Some(texture), spec, *rep)?;
        grids.push(predict(detector, &s.input)?);
        gts.push(s.gt);
    }
    let mut rows = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let mut scored = Vec::new();
        let mut detected = Vec::with_capacity(draws.len());
        for (i, g) in grids.iter().enumerate() {
            let dets = decode(g, threshold);
            let boxes: Vec<_> = dets.iter().map(|d| d.bbox).collect();
            detected.push(sequence_detected(&boxes, gts[i], MATCH_IOU));
            scored.extend(dets.iter().map(|d| ScoredBox {
                sequence: i,
                bbox: d.bbox,
                conf: d.conf,
            }));
        }
        rows.push(ThresholdRow {
            threshold,
            ap: compute_ap(&scored, &gts, MATCH_IOU),
            seqasr: compute_seqasr(&detected)?,
            m: detected.len(),
            n: detected.iter().filter(|&&d| d).count(),
        });
    }
    Ok(EvalReport {
        texture_id: texture_id.to_string(),
        detector_hash: detector.hash(),
        rows,
    })
}

/// Evaluates every texture; the second value lists missing baselines.
pub fn sweep(
    textures: &[(String, TextureMap)],
    detector: &DetectorParams,
    setup: &SceneSetup,
    draws: &[(SceneSpec, u64)],
    thresholds: &[f64],
) -> Result<(Vec<EvalReport>, Vec<String>)> {
    let warnings = ["white", "black", "random"]
        .iter()
        .filter(|b| !textures.iter().any(|(id, _)| id == *b))
        .map(|b| format!("baseline texture {b:?} missing from the sweep"))
        .collect();
    let reports = textures
        .iter()
        .map(|(id, t)| evaluate_texture(id, t, detector, setup, draws, thresholds))
        .collect::<Result<_>>()?;
    Ok((reports, warnings))
}

fn fmt_ap(ap: Option<f64>) -> String {
    ap.map_or_else(|| "undefined".into(), |v| format!("{v:.6}"))
}

pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("# {AP_CONVENTION}\ntexture,detector_hash,threshold,ap,seqasr,m,n\n");
    for r in reports {
        for row in &r.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{},{}",
                r.texture_id,
                r.detector_hash,
                row.threshold,
                fmt_ap(row.ap),
                row.seqasr,
                row.m,
                row.n
            );
        }
    }
    out
}

pub fn reports_table(reports: &[EvalReport]) -> String {
    let mut out = format!("{AP_CONVENTION}\n");
    if let Some(r) = reports.first() {
        let _ = writeln!(out, "detector {}", r.detector_hash);
    }
    let _ = writeln!(out, "{:<28} {:>9} {:>10} {:>8} {:>5} {:>5}", "texture", "threshold", "AP", "SeqASR", "M", "N");
    for r in reports {
        for row in &r.rows {
            let _ = writeln!(
                out,
                "{:<28} {:>9} {:>10} {:>7.1}% {:>5} {:>5}",
                r.texture_id,
                row.threshold,
                fmt_ap(row.ap),
                100.0 * row.seqasr,
                row.m,
                row.n
            );
        }
    }
    out
}
