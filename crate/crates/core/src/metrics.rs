//! Average precision over tIoU thresholds, plus the JSON annotation and
//! prediction formats.
//!
//! Matching is greedy in score order (ties: earlier start, then input
//! order); each prediction takes the unmatched ground truth of the same
//! video with the highest tIoU at or above the threshold. Precision/recall
//! is integrated with all-point interpolation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{ActionInstance, GroundTruthInstance};
use crate::error::{Error, Result};
use crate::postproc::tiou;

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

#[derive(Clone, Debug, PartialEq)]
pub struct VideoAnnotation {
    pub id: String,
    pub duration: f64,
    pub fps: f64,
    pub annotations: Vec<GroundTruthInstance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub labels: Vec<String>,
    pub videos: Vec<VideoAnnotation>,
}

impl AnnotationSet {
    pub fn video(&self, id: &str) -> Option<&VideoAnnotation> {
        self.videos.iter().find(|v| v.id == id)
    }
}

/// Predicted instances keyed by video id.
pub type Predictions = BTreeMap<String, Vec<ActionInstance>>;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub thresholds: Vec<f64>,
    pub labels: Vec<String>,
    /// `[class][threshold]`; `None` where a class has neither ground truth
    /// nor predictions, which leaves it out of the class mean.
    pub ap: Vec<Vec<Option<f64>>>,
    pub map_per_threshold: Vec<f64>,
    pub average_map: f64,
}

impl MetricReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-12)
            .map(|i| self.map_per_threshold[i])
    }

    /// Plain-text table: one row per class, a mAP row, and an `Avg` column.
    pub fn table(&self) -> String {
        let width = self.labels.iter().map(|l| l.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = write!(out, "{:<width$}", "class");
        for t in &self.thresholds {
            let _ = write!(out, "  {:>6}", format!("{t:.2}"));
        }
        let _ = writeln!(out, "  {:>6}", "Avg");
        for (label, row) in self.labels.iter().zip(&self.ap) {
            let _ = write!(out, "{label:<width$}");
            for ap in row {
                match ap {
                    Some(v) => {
                        let _ = write!(out, "  {v:>6.4}");
                    }
                    None => {
                        let _ = write!(out, "  {:>6}", "-");
                    }
                }
            }
            let defined: Vec<f64> = row.iter().flatten().copied().collect();
            if defined.is_empty() {
                let _ = writeln!(out, "  {:>6}", "-");
            } else {
                let _ = writeln!(out, "  {:>6.4}", defined.iter().sum::<f64>() / defined.len() as f64);
            }
        }
        let _ = write!(out, "{:<width$}", "mAP");
        for m in &self.map_per_threshold {
            let _ = write!(out, "  {m:>6.4}");
        }
        let _ = writeln!(out, "  {:>6.4}", self.average_map);
        out
    }
}

/// AP of one class within a single video; labels are not consulted.
pub fn average_precision(preds: &[ActionInstance], gts: &[GroundTruthInstance], threshold: f64) -> Option<f64> {
    let preds: Vec<(usize, &ActionInstance)> = preds.iter().map(|p| (0, p)).collect();
    let gts: Vec<(usize, &GroundTruthInstance)> = gts.iter().map(|g| (0, g)).collect();
    class_average_precision(&preds, &gts, threshold)
}

/// AP of one class over many videos; entries are tagged with a video index
/// and only match within the same video.
pub fn class_average_precision(
    preds: &[(usize, &ActionInstance)],
    gts: &[(usize, &GroundTruthInstance)],
    threshold: f64,
) -> Option<f64> {
    if gts.is_empty() {
        return if preds.is_empty() { None } else { Some(0.0) };
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (preds[a].1, preds[b].1);
        pb.score.total_cmp(&pa.score).then(pa.t_start.total_cmp(&pb.t_start))
    });
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(order.len());
    for &i in &order {
        let (video, p) = preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, &(gv, g)) in gts.iter().enumerate() {
            if gv != video || used[j] {
                continue;
            }
            let iou = tiou((p.t_start, p.t_end), (g.t_start, g.t_end));
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
        }
        hits.push(best.is_some());
    }
    Some(pr_area(&hits, gts.len()))
}

/// All-point interpolated area under the precision/recall curve of a
/// ranked hit list: every hit contributes `1 / n_gt` times the best
/// precision at or after its rank.
pub(crate) fn pr_area(hits: &[bool], n_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut precision: Vec<f64> = hits
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            tp += h as usize;
            tp as f64 / (k + 1) as f64
        })
        .collect();
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            sum += precision[k];
        }
    }
    sum / n_gt as f64
}

/// AP per class and threshold, mAP per threshold, and their mean.
pub fn evaluate(preds: &Predictions, annos: &AnnotationSet, thresholds: &[f64]) -> Result<MetricReport> {
    if thresholds.is_empty() || thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(Error::config(format!("thresholds must be non-empty and in (0, 1], got {thresholds:?}")));
    }
    let index: HashMap<&str, usize> = annos.videos.iter().enumerate().map(|(i, v)| (v.id.as_str(), i)).collect();
    let n_classes = annos.labels.len();
    let mut by_class_pred: Vec<Vec<(usize, &ActionInstance)>> = vec![Vec::new(); n_classes];
    for (id, list) in preds {
        let &v = index
            .get(id.as_str())
            .ok_or_else(|| Error::invalid(format!("/results/{id}"), "video not in the annotation set"))?;
        for (k, p) in list.iter().enumerate() {
            if p.label >= n_classes {
                return Err(Error::invalid(
                    format!("/results/{id}/{k}/label"),
                    format!("label {} outside the {n_classes}-class vocabulary", p.label),
                ));
            }
            by_class_pred[p.label].push((v, p));
        }
    }
    let mut by_class_gt: Vec<Vec<(usize, &GroundTruthInstance)>> = vec![Vec::new(); n_classes];
    for (v, video) in annos.videos.iter().enumerate() {
        for g in &video.annotations {
            by_class_gt[g.label].push((v, g));
        }
    }
    let ap: Vec<Vec<Option<f64>>> = (0..n_classes)
        .into_par_iter()
        .map(|c| {
            thresholds
                .iter()
                .map(|&t| class_average_precision(&by_class_pred[c], &by_class_gt[c], t))
                .collect()
        })
        .collect();
    let map_per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|t| {
            let defined: Vec<f64> = ap.iter().filter_map(|row| row[t]).collect();
            if defined.is_empty() {
                0.0
            } else {
                defined.iter().sum::<f64>() / defined.len() as f64
            }
        })
        .collect();
    let average_map = map_per_threshold.iter().sum::<f64>() / thresholds.len() as f64;
    Ok(MetricReport {
        thresholds: thresholds.to_vec(),
        labels: annos.labels.clone(),
        ap,
        map_per_threshold,
        average_map,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    version: u32,
    labels: Vec<String>,
    videos: Vec<VideoEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoEntry {
    id: String,
    duration: f64,
    fps: f64,
    annotations: Vec<SegmentEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentEntry {
    start: f64,
    end: f64,
    label: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionFile {
    results: BTreeMap<String, Vec<PredictionEntry>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionEntry {
    start: f64,
    end: f64,
    label: String,
    score: f64,
}

/// Deserializes JSON, reporting failures with a JSON pointer into the
/// document.
pub fn from_json_str<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let mut pointer = String::new();
        for seg in e.path().iter() {
            use serde_path_to_error::Segment;
            match seg {
                Segment::Seq { index } => write!(pointer, "/{index}"),
                Segment::Map { key } => write!(pointer, "/{key}"),
                Segment::Enum { variant } => write!(pointer, "/{variant}"),
                Segment::Unknown => write!(pointer, "/?"),
            }
            .expect("write to String");
        }
        if pointer.is_empty() {
            pointer.push('/');
        }
        Error::invalid(pointer, e.into_inner().to_string())
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads and deserializes a JSON file, then runs `check` on the value.
/// Errors from either step point into the file as `file#/pointer`.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, check: impl FnOnce(&T) -> Result<()>) -> Result<T> {
    let value = from_json_str(&read_text(path)?).map_err(|e| in_file(path, e))?;
    check(&value).map_err(|e| in_file(path, e))?;
    Ok(value)
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Invalid { path: pointer, message } => Error::invalid(format!("{}#{pointer}", path.display()), message),
        other => other,
    }
}

fn check_segment(at: &str, start: f64, end: f64, duration: f64) -> Result<()> {
    if !(start.is_finite() && end.is_finite()) {
        return Err(Error::invalid(at, "segment bounds must be finite"));
    }
    if start >= end {
        return Err(Error::invalid(at, format!("start {start} is not before end {end}")));
    }
    if start < 0.0 || end > duration {
        return Err(Error::invalid(at, format!("[{start}, {end}] lies outside [0, {duration}]")));
    }
    Ok(())
}

pub fn parse_annotations(text: &str) -> Result<AnnotationSet> {
    let file: AnnotationFile = from_json_str(text)?;
    if file.version != 1 {
        return Err(Error::invalid("/version", format!("unsupported version {}", file.version)));
    }
    let vocab: HashMap<&str, usize> = file.labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    if vocab.len() != file.labels.len() {
        return Err(Error::invalid("/labels", "duplicate label names"));
    }
    let mut seen = HashMap::new();
    let mut videos = Vec::with_capacity(file.videos.len());
    for (v, entry) in file.videos.iter().enumerate() {
        if let Some(first) = seen.insert(entry.id.as_str(), v) {
            return Err(Error::invalid(
                format!("/videos/{v}/id"),
                format!("id {:?} already used by /videos/{first}", entry.id),
            ));
        }
        if !(entry.duration > 0.0 && entry.duration.is_finite()) {
            return Err(Error::invalid(format!("/videos/{v}/duration"), "must be positive"));
        }
        if !(entry.fps > 0.0 && entry.fps.is_finite()) {
            return Err(Error::invalid(format!("/videos/{v}/fps"), "must be positive"));
        }
        let mut annotations = Vec::with_capacity(entry.annotations.len());
        for (k, seg) in entry.annotations.iter().enumerate() {
            let at = format!("/videos/{v}/annotations/{k}");
            check_segment(&at, seg.start, seg.end, entry.duration)?;
            let &label = vocab
                .get(seg.label.as_str())
                .ok_or_else(|| Error::invalid(format!("{at}/label"), format!("unknown label {:?}", seg.label)))?;
            annotations.push(GroundTruthInstance {
                t_start: seg.start,
                t_end: seg.end,
                label,
            });
        }
        videos.push(VideoAnnotation {
            id: entry.id.clone(),
            duration: entry.duration,
            fps: entry.fps,
            annotations,
        });
    }
    Ok(AnnotationSet {
        labels: file.labels,
        videos,
    })
}

/// Predictions are validated against the annotation set: video ids and
/// labels must exist and segments must lie inside the video.
pub fn parse_predictions(text: &str, annos: &AnnotationSet) -> Result<Predictions> {
    let file: PredictionFile = from_json_str(text)?;
    let vocab: HashMap<&str, usize> = annos.labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut out = Predictions::new();
    for (id, list) in file.results {
        let video = annos
            .video(&id)
            .ok_or_else(|| Error::invalid(format!("/results/{id}"), "video not in the annotation set"))?;
        let mut preds = Vec::with_capacity(list.len());
        for (k, p) in list.iter().enumerate() {
            let at = format!("/results/{id}/{k}");
            check_segment(&at, p.start, p.end, video.duration)?;
            if !(0.0..=1.0).contains(&p.score) {
                return Err(Error::invalid(format!("{at}/score"), format!("{} is outside [0, 1]", p.score)));
            }
            let &label = vocab
                .get(p.label.as_str())
                .ok_or_else(|| Error::invalid(format!("{at}/label"), format!("unknown label {:?}", p.label)))?;
            preds.push(ActionInstance {
                t_start: p.start,
                t_end: p.end,
                label,
                score: p.score,
            });
        }
        out.insert(id, preds);
    }
    Ok(out)
}

pub fn read_annotations(path: &Path) -> Result<AnnotationSet> {
    parse_annotations(&read_text(path)?).map_err(|e| in_file(path, e))
}

pub fn read_predictions(path: &Path, annos: &AnnotationSet) -> Result<Predictions> {
    parse_predictions(&read_text(path)?, annos).map_err(|e| in_file(path, e))
}

pub fn annotations_to_json(annos: &AnnotationSet) -> String {
    let file = AnnotationFile {
        version: 1,
        labels: annos.labels.clone(),
        videos: annos
            .videos
            .iter()
            .map(|v| VideoEntry {
                id: v.id.clone(),
                duration: v.duration,
                fps: v.fps,
                annotations: v
                    .annotations
                    .iter()
                    .map(|g| SegmentEntry {
                        start: g.t_start,
                        end: g.t_end,
                        label: annos.labels[g.label].clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("annotations serialize")
}

pub fn predictions_to_json(preds: &Predictions, labels: &[String]) -> String {
    let file = PredictionFile {
        results: preds
            .iter()
            .map(|(id, list)| {
                let entries = list
                    .iter()
                    .map(|p| PredictionEntry {
                        start: p.t_start,
                        end: p.t_end,
                        label: labels[p.label].clone(),
                        score: p.score,
                    })
                    .collect();
                (id.clone(), entries)
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("predictions serialize")
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
