//! Temporal detector on top of the adapted backbone: a max-pooled feature
//! pyramid, a shared anchor-free head, target assignment, losses, and the
//! training loop.

mod check;
mod loss;
mod model;
mod optim;
mod targets;
mod train;

use serde::{Deserialize, Serialize};

pub use check::{module_gradchecks, ModuleCheck, CHECK_MODULES};
pub use loss::{detection_loss, diou_1d, LossConfig, LossParts};
pub use model::{
    build_pyramid, decode, detector_forward, DecodeConfig, Detector, HeadConfig, HeadOutput, HeadParams, LevelGeom,
    ModelConfig,
};
pub use optim::{AdamW, LrSchedule};
pub use targets::{assign_targets, default_ranges, Targets};
pub use train::{
    collect_grads, embed_video, evaluate_model, predict_video, train, Dataset, EpochLog, TrainConfig, TrainOutcome, Video,
};

/// One predicted segment, times in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionInstance {
    pub t_start: f64,
    pub t_end: f64,
    pub label: usize,
    pub score: f64,
}

/// One annotated segment, times in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub t_start: f64,
    pub t_end: f64,
    pub label: usize,
}

impl ActionInstance {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

impl GroundTruthInstance {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}
