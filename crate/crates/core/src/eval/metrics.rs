use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const MATCH_IOU: f64 = 0.5;

/// A detection tagged with the sequence it was made on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub sequence: usize,
    pub bbox: BBox,
    pub conf: f64,
}

/// Per-detection true-positive flags after greedy confidence-ordered matching,
/// returned in ranked order along with the number of ground-truth boxes.
pub fn match_detections(dets: &[ScoredBox], gt: &[Option<BBox>], iou_threshold: f64) -> (Vec<bool>, usize) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].conf.total_cmp(&dets[a].conf).then(a.cmp(&b)));
    let mut taken = vec![false; gt.len()];
    let flags = order
        .iter()
        .map(|&i| {
            let d = &dets[i];
            match gt.get(d.sequence).copied().flatten() {
                Some(g) if !taken[d.sequence] && iou(&d.bbox, &g) >= iou_threshold => {
                    taken[d.sequence] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    (flags, gt.iter().filter(|g| g.is_some()).count())
}

/// All-point interpolated AP. `None` when there is no ground truth at all.
pub fn compute_ap(dets: &[ScoredBox], gt: &[Option<BBox>], iou_threshold: f64) -> Option<f64> {
    let (flags, n_gt) = match_detections(dets, gt, iou_threshold);
    if n_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..recall.len() {
        ap += (recall[k] - prev) * precision[k];
        prev = recall[k];
    }
    Some(ap)
}

/// `1 - N / M` with `N` the number of detected sequences.
pub fn compute_seqasr(detected: &[bool]) -> Result<f64> {
    if detected.is_empty() {
        return Err(Error::Contract("SeqASR needs at least one sequence".into()));
    }
    let n = detected.iter().filter(|&&d| d).count();
    Ok(1.0 - n as f64 / detected.len() as f64)
}

/// Whether any box matches `gt` at the matching IoU.
pub fn sequence_detected(boxes: &[BBox], gt: Option<BBox>, iou_threshold: f64) -> bool {
    gt.is_some_and(|g| boxes.iter().any(|b| iou(b, &g) >= iou_threshold))
}
