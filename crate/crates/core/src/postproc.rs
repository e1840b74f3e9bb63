//! Temporal IoU and Soft-NMS over decoded segments.

use serde::{Deserialize, Serialize};

use crate::detector::ActionInstance;

/// Intersection over union of two `(start, end)` segments. Segments of
/// zero total length have no overlap by definition.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmsMethod {
    /// `s *= exp(-iou^2 / sigma)`
    #[default]
    Gaussian,
    /// `s *= 1 - iou` when `iou >= iou_threshold`
    Linear,
    /// drop when `iou >= iou_threshold`
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsConfig {
    pub method: NmsMethod,
    pub sigma: f64,
    pub score_floor: f64,
    pub iou_threshold: f64,
    /// Let instances of different labels suppress each other.
    pub cross_class: bool,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            method: NmsMethod::Gaussian,
            sigma: 0.5,
            score_floor: 0.001,
            iou_threshold: 0.5,
            cross_class: false,
        }
    }
}

/// Soft-NMS. Repeatedly keeps the highest-scoring remaining instance (ties
/// go to the earlier input) and decays the others of its class. Instances
/// whose score falls below the floor are dropped. Output is sorted by final
/// score, descending.
pub fn soft_nms(instances: &[ActionInstance], cfg: &NmsConfig) -> Vec<ActionInstance> {
    let mut pool: Vec<ActionInstance> = instances
        .iter()
        .filter(|a| a.score >= cfg.score_floor)
        .cloned()
        .collect();
    let mut kept = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let mut best = 0;
        for (i, a) in pool.iter().enumerate().skip(1) {
            if a.score > pool[best].score {
                best = i;
            }
        }
        let top = pool.remove(best);
        for a in pool.iter_mut() {
            if !cfg.cross_class && a.label != top.label {
                continue;
            }
            let iou = tiou((top.t_start, top.t_end), (a.t_start, a.t_end));
            match cfg.method {
                NmsMethod::Gaussian => a.score *= (-iou * iou / cfg.sigma).exp(),
                NmsMethod::Linear if iou >= cfg.iou_threshold => a.score *= 1.0 - iou,
                NmsMethod::Hard if iou >= cfg.iou_threshold => a.score = 0.0,
                _ => {}
            }
        }
        pool.retain(|a| a.score >= cfg.score_floor);
        kept.push(top);
    }
    // selection order is already non-increasing; the stable sort only
    // guards the contract
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    kept
}
