//! Exhaustive average-precision reference and random small instances.

use estf_core::detector::{ActionInstance, GroundTruthInstance};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn pred(s: f64, e: f64, label: usize, score: f64) -> ActionInstance {
    ActionInstance {
        t_start: s,
        t_end: e,
        label,
        score,
    }
}

pub fn gt(s: f64, e: f64, label: usize) -> GroundTruthInstance {
    GroundTruthInstance {
        t_start: s,
        t_end: e,
        label,
    }
}

/// Exhaustive AP: full tIoU validity table, greedy assignment over the
/// documented ranking, and precision envelope by brute-force suffix max.
pub fn oracle_ap(preds: &[ActionInstance], gts: &[GroundTruthInstance], threshold: f64) -> Option<f64> {
    if gts.is_empty() {
        return if preds.is_empty() { None } else { Some(0.0) };
    }
    let mut rank: Vec<(f64, f64, usize)> = preds.iter().enumerate().map(|(i, p)| (p.score, p.t_start, i)).collect();
    rank.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    let iou = |p: &ActionInstance, g: &GroundTruthInstance| {
        let inter = (p.t_end.min(g.t_end) - p.t_start.max(g.t_start)).max(0.0);
        inter / ((p.t_end - p.t_start) + (g.t_end - g.t_start) - inter)
    };
    let valid: Vec<Vec<Option<f64>>> = preds
        .iter()
        .map(|p| gts.iter().map(|g| Some(iou(p, g)).filter(|&v| v >= threshold)).collect())
        .collect();
    let mut taken = vec![false; gts.len()];
    let mut hits = Vec::new();
    for &(_, _, i) in &rank {
        let mut choice: Option<usize> = None;
        for j in 0..gts.len() {
            if let (false, Some(v)) = (taken[j], valid[i][j]) {
                if choice.is_none_or(|c| v > valid[i][c].unwrap()) {
                    choice = Some(j);
                }
            }
        }
        if let Some(j) = choice {
            taken[j] = true;
        }
        hits.push(choice.is_some());
    }
    let precision: Vec<f64> = (0..hits.len())
        .map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .collect();
    let mut sum = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            sum += precision[k..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    Some(sum / gts.len() as f64)
}

pub fn random_case(rng: &mut ChaCha8Rng) -> (Vec<ActionInstance>, Vec<GroundTruthInstance>) {
    let seg = |rng: &mut ChaCha8Rng| {
        let s = rng.random_range(0..16) as f64 * 0.5;
        (s, s + rng.random_range(1..8) as f64 * 0.5)
    };
    let n_pred = rng.random_range(0..=6);
    let n_gt = rng.random_range(0..=4);
    let preds = (0..n_pred)
        .map(|_| {
            let (s, e) = seg(rng);
            // coarse scores so ties happen
            pred(s, e, 0, rng.random_range(0..5) as f64 / 4.0)
        })
        .collect();
    let gts = (0..n_gt)
        .map(|_| {
            let (s, e) = seg(rng);
            gt(s, e, 0)
        })
        .collect();
    (preds, gts)
}

