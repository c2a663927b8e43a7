use evtex_core::eval::ScoredBox;
use evtex_core::geometry::{iou, BBox};

/// Precision-recall oracle: rank by confidence, match greedily, then average
/// the interpolated precision at every true positive.
pub fn brute_force_ap(dets: &[ScoredBox], gt: &[Option<BBox>]) -> Option<f64> {
    let n_gt = gt.iter().flatten().count();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<&ScoredBox> = dets.iter().collect();
    ranked.sort_by(|a, b| b.conf.partial_cmp(&a.conf).unwrap());
    let mut used = vec![false; gt.len()];
    let mut hits = Vec::new();
    for d in &ranked {
        let hit = match gt[d.sequence] {
            Some(g) if !used[d.sequence] && iou(&d.bbox, &g) >= 0.5 => {
                used[d.sequence] = true;
                true
            }
            _ => false,
        };
        hits.push(hit);
    }
    let precision_at = |k: usize| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64;
    let mut total = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            total += (k..hits.len()).map(precision_at).fold(0.0, f64::max);
        }
    }
    Some(total / n_gt as f64)
}
