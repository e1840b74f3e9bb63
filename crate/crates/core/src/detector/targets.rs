use super::{GroundTruthInstance, LevelGeom};

/// Per-step training targets, steps of all levels stacked in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// Foreground class, `None` for background.
    pub labels: Vec<Option<usize>>,
    /// `(start, end)` distances from the step centre in stride units; zero
    /// for background steps.
    pub offsets: Vec<[f64; 2]>,
}

impl Targets {
    pub fn positives(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i].is_some()).collect()
    }
}

/// Level 0 takes offsets in `[0, 4)`, middle levels `[2, 4)`, the last
/// level `[2, inf)`; in level-0 units the ranges tile `[0, inf)`.
pub fn default_ranges(levels: usize) -> Vec<(f64, f64)> {
    (0..levels)
        .map(|i| {
            let lo = if i == 0 { 0.0 } else { 2.0 };
            let hi = if i + 1 == levels { f64::INFINITY } else { 4.0 };
            (lo, hi)
        })
        .collect()
}

/// A step is positive for the ground truths that contain its centre and
/// whose larger boundary distance (in stride units) falls in the level's
/// range; among those the shortest wins, then the earliest listed.
pub fn assign_targets(
    gts: &[GroundTruthInstance],
    levels: &[LevelGeom],
    fps: f64,
    ranges: &[(f64, f64)],
) -> Targets {
    let total: usize = levels.iter().map(|l| l.len).sum();
    let mut labels = Vec::with_capacity(total);
    let mut offsets = Vec::with_capacity(total);
    for (lv, &(lo, hi)) in levels.iter().zip(ranges) {
        let stride = lv.stride(fps);
        for t in 0..lv.len {
            let tau = lv.center(t, fps);
            let mut best: Option<(usize, [f64; 2])> = None;
            for (g, gt) in gts.iter().enumerate() {
                if tau < gt.t_start || tau > gt.t_end {
                    continue;
                }
                let off = [(tau - gt.t_start) / stride, (gt.t_end - tau) / stride];
                let reach = off[0].max(off[1]);
                if reach < lo || reach >= hi {
                    continue;
                }
                if best.is_none_or(|(b, _)| gt.duration() < gts[b].duration()) {
                    best = Some((g, off));
                }
            }
            match best {
                Some((g, off)) => {
                    labels.push(Some(gts[g].label));
                    offsets.push(off);
                }
                None => {
                    labels.push(None);
                    offsets.push([0.0; 2]);
                }
            }
        }
    }
    Targets { labels, offsets }
}
