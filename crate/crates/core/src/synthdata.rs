//! Deterministic synthetic untrimmed clips with exactly known action
//! boundaries.
//!
//! Each action paints a class-specific drifting grating whose amplitude
//! ramps up at the start and down at the end with independently chosen
//! sharpness. Background is Gaussian noise. Every video draws from two
//! ChaCha streams derived from `(seed, index)`: one for placement, one for
//! noise, so changing only the ramp knobs leaves the noise bit-identical.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{Dataset, GroundTruthInstance, Video};
use crate::error::{Error, Result};
use crate::estf::FULL_SCALE_FRAMES;
use crate::metrics::{annotations_to_json, read_annotations, write_text, VideoAnnotation};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    #[default]
    Easy,
    Hard,
}

impl Difficulty {
    /// `(signal amplitude, noise standard deviation)`
    fn levels(self) -> (f64, f64) {
        match self {
            Difficulty::Easy => (1.0, 0.1),
            Difficulty::Hard => (0.6, 0.6),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub fps: f64,
    /// Inclusive range of actions per video.
    pub actions_per_video: (usize, usize),
    /// Inclusive range of action lengths in frames.
    pub duration_frames: (usize, usize),
    /// Minimum number of background frames between two actions.
    pub min_gap: usize,
    pub difficulty: Difficulty,
    /// Ramp slopes in amplitude per frame; 2 or more reaches full amplitude
    /// on the first (last) frame.
    pub onset_sharpness: f64,
    pub offset_sharpness: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            n_videos: 64,
            frames: 64,
            height: 16,
            width: 16,
            channels: 3,
            n_classes: 4,
            fps: 4.0,
            actions_per_video: (1, 3),
            duration_frames: (6, 16),
            min_gap: 2,
            difficulty: Difficulty::Easy,
            onset_sharpness: 1.0,
            offset_sharpness: 1.0,
        }
    }
}

impl SynthSpec {
    pub fn hard() -> Self {
        SynthSpec {
            difficulty: Difficulty::Hard,
            ..SynthSpec::default()
        }
    }

    /// Full-resolution clip shape (768 frames of 224x224). Only for shape
    /// checks; rendering it would take close to a gigabyte per clip.
    pub fn full_scale() -> Self {
        SynthSpec {
            n_videos: 1,
            frames: FULL_SCALE_FRAMES,
            height: 224,
            width: 224,
            duration_frames: (32, 240),
            ..SynthSpec::default()
        }
    }

    pub fn video_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn duration(&self) -> f64 {
        self.frames as f64 / self.fps
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.n_classes).map(|c| format!("class_{c}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, msg: String| Err(Error::invalid(path, msg));
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return fail("/frames", "clip extents must be positive".into());
        }
        if self.n_classes == 0 {
            return fail("/n_classes", "must be positive".into());
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return fail("/fps", "must be positive".into());
        }
        let (a_lo, a_hi) = self.actions_per_video;
        if a_lo > a_hi {
            return fail("/actions_per_video", format!("empty range ({a_lo}, {a_hi})"));
        }
        let (d_lo, d_hi) = self.duration_frames;
        if d_lo == 0 || d_lo > d_hi {
            return fail("/duration_frames", format!("need 0 < lo <= hi, got ({d_lo}, {d_hi})"));
        }
        let worst = a_hi * d_hi + a_hi.saturating_sub(1) * self.min_gap;
        if worst > self.frames {
            return fail(
                "/actions_per_video",
                format!(
                    "{a_hi} actions of up to {d_hi} frames with gaps of {} need {worst} frames, clip has {}",
                    self.min_gap, self.frames
                ),
            );
        }
        for (path, v) in [("/onset_sharpness", self.onset_sharpness), ("/offset_sharpness", self.offset_sharpness)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(path, format!("must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

/// Amplitude envelope over `frames` for an action on frames `[s, e)`,
/// evaluated at frame centres.
pub fn ramp_profile(frames: usize, s: usize, e: usize, onset: f64, offset: f64) -> Vec<f64> {
    (0..frames)
        .map(|t| {
            if t < s || t >= e {
                return 0.0;
            }
            let c = t as f64 + 0.5;
            ((c - s as f64) * onset).min(1.0) * ((e as f64 - c) * offset).min(1.0)
        })
        .collect()
}

fn class_color(c: usize, n_classes: usize, ch: usize, channels: usize) -> f64 {
    0.5 + 0.5 * (2.0 * PI * (c as f64 / n_classes as f64 + ch as f64 / channels as f64)).cos()
}

/// Non-negative drifting grating in `[0, 1]`; orientation, frequency and
/// drift direction depend on the class.
fn class_pattern(c: usize, n_classes: usize, t: usize, y: usize, x: usize, h: usize, w: usize) -> f64 {
    let theta = PI * c as f64 / n_classes as f64;
    let freq = 1.0 + (c % 2) as f64;
    let drift = if c.is_multiple_of(2) { 0.1 } else { -0.1 };
    let u = theta.cos() * x as f64 / w as f64 + theta.sin() * y as f64 / h as f64;
    0.5 + 0.5 * (2.0 * PI * (freq * u + drift * t as f64)).sin()
}

/// Frame-level placement `(start, end, label)` for video `index`.
fn place(spec: &SynthSpec, index: usize) -> Vec<(usize, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2 * index as u64);
    let k = rng.random_range(spec.actions_per_video.0..=spec.actions_per_video.1);
    let durations: Vec<usize> = (0..k)
        .map(|_| rng.random_range(spec.duration_frames.0..=spec.duration_frames.1))
        .collect();
    let labels: Vec<usize> = (0..k).map(|_| rng.random_range(0..spec.n_classes)).collect();
    let used = durations.iter().sum::<usize>() + k.saturating_sub(1) * spec.min_gap;
    let slack = spec.frames - used;
    // split the slack into k + 1 gaps at sorted cut points
    let mut cuts: Vec<usize> = (0..k).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(k);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for i in 0..k {
        cursor += cuts[i] - prev_cut;
        prev_cut = cuts[i];
        out.push((cursor, cursor + durations[i], labels[i]));
        cursor += durations[i] + spec.min_gap;
    }
    out
}

fn render(spec: &SynthSpec, index: usize, actions: &[(usize, usize, usize)]) -> Tensor {
    let [t_n, h, w, ch] = spec.video_shape();
    let (amp, noise_std) = spec.difficulty.levels();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2 * index as u64 + 1);
    let normal = Normal::new(0.0, noise_std).expect("positive std");
    let mut data: Vec<f64> = (0..t_n * h * w * ch).map(|_| normal.sample(&mut rng)).collect();
    for &(s, e, c) in actions {
        let ramp = ramp_profile(t_n, s, e, spec.onset_sharpness, spec.offset_sharpness);
        for t in s..e {
            for y in 0..h {
                for x in 0..w {
                    let p = amp * ramp[t] * class_pattern(c, spec.n_classes, t, y, x, h, w);
                    let base = ((t * h + y) * w + x) * ch;
                    for k in 0..ch {
                        data[base + k] += p * class_color(c, spec.n_classes, k, ch);
                    }
                }
            }
        }
    }
    Tensor::new(&[t_n, h, w, ch], data).expect("shape matches data")
}

pub fn video_id(index: usize) -> String {
    format!("video_{index:04}")
}

/// Renders the whole dataset; videos are generated in parallel, each from
/// its own streams, so the result does not depend on scheduling.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let videos = (0..spec.n_videos)
        .into_par_iter()
        .map(|i| {
            let actions = place(spec, i);
            let frames = render(spec, i, &actions);
            let annotations = actions
                .iter()
                .map(|&(s, e, label)| GroundTruthInstance {
                    t_start: s as f64 / spec.fps,
                    t_end: e as f64 / spec.fps,
                    label,
                })
                .collect();
            Video {
                annotation: VideoAnnotation {
                    id: video_id(i),
                    duration: spec.duration(),
                    fps: spec.fps,
                    annotations,
                },
                frames,
            }
        })
        .collect();
    Ok(Dataset {
        labels: spec.labels(),
        videos,
    })
}

/// Symmetric and asymmetric variants of `spec`: the first ramps both ends
/// at the onset sharpness, the second keeps that onset but ends with a slow
/// offset. Everything else, including the noise, is shared.
pub fn asymmetry_suite(spec: &SynthSpec) -> (SynthSpec, SynthSpec) {
    let symmetric = SynthSpec {
        onset_sharpness: 2.0,
        offset_sharpness: 2.0,
        ..spec.clone()
    };
    let asymmetric = SynthSpec {
        onset_sharpness: 2.0,
        offset_sharpness: 0.25,
        ..spec.clone()
    };
    (symmetric, asymmetric)
}

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const SPEC_FILE: &str = "spec.json";
pub const VIDEO_DIR: &str = "videos";

/// Writes `annotations.json`, `spec.json` and one tensor file per video.
pub fn write_dataset(dir: &Path, data: &Dataset, spec: Option<&SynthSpec>) -> Result<()> {
    let videos = dir.join(VIDEO_DIR);
    std::fs::create_dir_all(&videos).map_err(|e| Error::io(&videos, e))?;
    for v in &data.videos {
        v.frames.save(&videos.join(format!("{}.tensor", v.annotation.id)))?;
    }
    write_text(&dir.join(ANNOTATION_FILE), &annotations_to_json(&data.annotations()))?;
    if let Some(spec) = spec {
        let text = serde_json::to_string_pretty(spec).expect("spec serializes");
        write_text(&dir.join(SPEC_FILE), &text)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let annos = read_annotations(&dir.join(ANNOTATION_FILE))?;
    let videos = annos
        .videos
        .into_iter()
        .map(|annotation| {
            let frames = Tensor::load(&dir.join(VIDEO_DIR).join(format!("{}.tensor", annotation.id)))?;
            if frames.rank() != 4 {
                return Err(Error::Format {
                    path: dir.join(VIDEO_DIR).join(&annotation.id),
                    message: format!("expected a [T, H, W, C] tensor, got shape {:?}", frames.shape()),
                });
            }
            Ok(Video { annotation, frames })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        labels: annos.labels,
        videos,
    })
}
