//! Scaling measurements of the TB-SSM block against the attention baseline,
//! and the ablation runner.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{embed_video, evaluate_model, train, TrainConfig};
use crate::error::{Error, Result};
use crate::estf::{FusionMode, TemporalStrategy};
use crate::metrics::{evaluate, AnnotationSet, Predictions, VideoAnnotation};
use crate::numerics::{Tape, Tensor};
use crate::ssm::{attention_baseline, tb_ssm_forward, AttentionParams, SsmConfig, SsmParams};
use crate::synthdata::{asymmetry_suite, generate, SynthSpec};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static INSTALLED: AtomicBool = AtomicBool::new(false);

/// System allocator that tracks live and peak bytes. Binaries that want
/// peak-memory numbers install it with `#[global_allocator]`.
pub struct CountingAlloc;

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            INSTALLED.store(true, Ordering::Relaxed);
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

/// Peak bytes allocated on top of what was live when `f` started, or
/// `None` without [`CountingAlloc`] installed.
pub fn measure_peak<T>(f: impl FnOnce() -> T) -> (T, Option<usize>) {
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let out = f();
    let peak = PEAK.load(Ordering::Relaxed).saturating_sub(base);
    (out, INSTALLED.load(Ordering::Relaxed).then_some(peak))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub lengths: Vec<usize>,
    pub repetitions: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            lengths: (10..=15).map(|k| 1 << k).collect(),
            repetitions: 5,
            d_model: 8,
            d_state: 8,
            seed: 0,
        }
    }
}

/// Runs shorter than this are flagged as below timer resolution.
pub const MIN_RELIABLE_MS: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub module: &'static str,
    pub t: usize,
    pub median_ms: f64,
    pub peak_bytes: Option<usize>,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
}

pub const SSM_MODULE: &str = "tb_ssm_forward";
pub const ATTENTION_MODULE: &str = "attention_baseline";

impl ScalingReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("module,T,median_ms,peak_bytes,flagged\n");
        for r in &self.rows {
            let peak = r.peak_bytes.map_or(String::new(), |p| p.to_string());
            let _ = writeln!(out, "{},{},{:.6},{},{}", r.module, r.t, r.median_ms, peak, r.flagged);
        }
        out
    }

    /// Least-squares slope of `ln(median_ms)` against `ln(T)`.
    pub fn slope(&self, module: &str) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.module == module && r.median_ms > 0.0)
            .map(|r| ((r.t as f64).ln(), r.median_ms.ln()))
            .collect();
        fit_slope(&pts)
    }

    /// Largest `peak(2T) / peak(T)` over consecutive doublings.
    pub fn peak_doubling_ratio(&self, module: &str) -> Option<f64> {
        let rows: Vec<&ScalingRow> = self.rows.iter().filter(|r| r.module == module).collect();
        rows.windows(2)
            .filter(|w| w[1].t == 2 * w[0].t)
            .filter_map(|w| Some(w[1].peak_bytes? as f64 / w[0].peak_bytes?.max(1) as f64))
            .reduce(f64::max)
    }
}

pub fn fit_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times forward passes (no gradient history) of both modules on one
/// sequence per length. Inputs and parameters are built before the clock
/// starts and every timed region runs on a single thread.
pub fn scan_scaling(cfg: &ScalingConfig) -> Result<ScalingReport> {
    if cfg.repetitions == 0 || cfg.lengths.is_empty() {
        return Err(Error::config("scan_scaling needs at least one length and one repetition"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ssm_cfg = SsmConfig {
        d_state: cfg.d_state,
        ..SsmConfig::default()
    };
    let ssm = SsmParams::init(cfg.d_model, &ssm_cfg, &mut rng);
    let attn = AttentionParams::init(cfg.d_model, &mut rng);
    let mut rows = Vec::new();
    for module in [SSM_MODULE, ATTENTION_MODULE] {
        for &t in &cfg.lengths {
            let x = Tensor::uniform(&[1, t, cfg.d_model], 1.0, &mut rng);
            let mut times = Vec::with_capacity(cfg.repetitions);
            let mut peak = None;
            for _ in 0..cfg.repetitions {
                let input = x.clone();
                let (ssm, attn) = (&ssm, &attn);
                let ((out, ms), p) = measure_peak(|| {
                    pool.install(move || {
                        let mut tape = Tape::inference();
                        let xv = tape.constant(input);
                        let start = Instant::now();
                        let y = if module == SSM_MODULE {
                            tb_ssm_forward(&mut tape, xv, ssm)
                        } else {
                            attention_baseline(&mut tape, xv, attn)
                        };
                        (y.map(|_| ()), start.elapsed().as_secs_f64() * 1e3)
                    })
                });
                out?;
                times.push(ms);
                peak = peak.max(p);
            }
            let median_ms = median(times);
            rows.push(ScalingRow {
                module,
                t,
                median_ms,
                peak_bytes: peak,
                flagged: median_ms < MIN_RELIABLE_MS,
            });
        }
    }
    Ok(ScalingReport { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub data: SynthSpec,
    pub train: TrainConfig,
    /// Also compare tied and independent transitions on the asymmetric
    /// dataset pair.
    pub asymmetry: bool,
    pub bootstrap_samples: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            data: SynthSpec::default(),
            train: TrainConfig::default(),
            asymmetry: true,
            bootstrap_samples: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum RowStatus {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    /// `component` or `strategy`.
    pub group: &'static str,
    pub name: &'static str,
    pub spatial: bool,
    pub temporal: bool,
    pub fusion: bool,
    pub independent_a: bool,
    pub map_per_threshold: Vec<f64>,
    pub average_map: f64,
    pub status: RowStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AsymmetryGap {
    pub independent: f64,
    pub tied: f64,
    /// `independent - tied`, average mAP.
    pub gap: f64,
    /// 95% percentile bootstrap interval of the gap over validation videos.
    pub interval: (f64, f64),
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub thresholds: Vec<f64>,
    pub rows: Vec<AblationRow>,
    pub asymmetry: Option<AsymmetryGap>,
}

/// `(group, name, config tweak)` for every grid row.
type Variant = (&'static str, &'static str, fn(&mut TrainConfig));

pub const VARIANTS: [Variant; 8] = [
    ("component", "full", |_| {}),
    ("component", "no_spatial", |c| c.model.adapter.spatial_branch = false),
    ("component", "no_temporal", |c| c.model.adapter.temporal_branch = false),
    ("component", "no_fusion", |c| c.model.adapter.fusion = FusionMode::Parallel),
    ("component", "tied_a", |c| c.model.adapter.ssm.tied_a = true),
    ("strategy", "none", |c| c.model.adapter.temporal = TemporalStrategy::None),
    ("strategy", "attention", |c| c.model.adapter.temporal = TemporalStrategy::Attention),
    ("strategy", "tb_ssm", |c| c.model.adapter.temporal = TemporalStrategy::TbSsm),
];

pub fn variant_config(base: &TrainConfig, name: &str) -> Option<TrainConfig> {
    VARIANTS.iter().find(|v| v.1 == name).map(|v| {
        let mut cfg = base.clone();
        (v.2)(&mut cfg);
        cfg
    })
}

/// Trains every variant of the grid on the synthetic suite, sequentially.
/// Variants whose configuration equals an earlier one reuse its result,
/// which training determinism makes identical. A variant that fails is
/// marked in its row and the run goes on.
pub fn ablation_run(cfg: &AblationConfig, on_row: &mut dyn FnMut(&AblationRow)) -> Result<AblationReport> {
    cfg.train.validate()?;
    let data = generate(&cfg.data)?;
    let thresholds = cfg.train.thresholds.clone();
    let mut done: Vec<(TrainConfig, AblationRow)> = Vec::new();
    for &(group, name, tweak) in &VARIANTS {
        let mut tc = cfg.train.clone();
        tweak(&mut tc);
        let a = &tc.model.adapter;
        let mut row = AblationRow {
            group,
            name,
            spatial: a.spatial_branch,
            temporal: a.temporal_branch && a.temporal != TemporalStrategy::None,
            fusion: a.fusion != FusionMode::Parallel,
            independent_a: !a.ssm.tied_a,
            map_per_threshold: vec![f64::NAN; thresholds.len()],
            average_map: f64::NAN,
            status: RowStatus::Ok,
        };
        if let Some((_, prev)) = done.iter().find(|(c, _)| *c == tc) {
            row.map_per_threshold = prev.map_per_threshold.clone();
            row.average_map = prev.average_map;
            row.status = prev.status.clone();
        } else {
            match train(&data, &tc, None, &mut |_| {}) {
                Ok(out) => {
                    row.map_per_threshold = out.report.map_per_threshold.clone();
                    row.average_map = out.report.average_map;
                }
                Err(e) => row.status = RowStatus::Failed(e.to_string()),
            }
        }
        on_row(&row);
        done.push((tc, row));
    }
    let asymmetry = if cfg.asymmetry {
        Some(asymmetry_gap(cfg)?)
    } else {
        None
    };
    Ok(AblationReport {
        thresholds,
        rows: done.into_iter().map(|(_, r)| r).collect(),
        asymmetry,
    })
}

fn asymmetry_gap(cfg: &AblationConfig) -> Result<AsymmetryGap> {
    let (_, asym) = asymmetry_suite(&cfg.data);
    let data = generate(&asym)?;
    let (_, val) = data.split(cfg.train.val_fraction);
    let val = if val.videos.is_empty() { data.clone() } else { val };
    let mut per_model = Vec::new();
    for tied in [false, true] {
        let mut tc = cfg.train.clone();
        tc.model.adapter.ssm.tied_a = tied;
        let out = train(&data, &tc, None, &mut |_| {})?;
        let tokens: Vec<Tensor> = val
            .videos
            .iter()
            .map(|v| embed_video(&out.model, &v.frames))
            .collect::<Result<_>>()?;
        let (preds, report) = evaluate_model(&out.model, &tokens, &val, &tc.decode, &tc.thresholds)?;
        per_model.push((preds, report.average_map));
    }
    let annos = val.annotations();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xB007);
    let n = annos.videos.len();
    let mut gaps = Vec::with_capacity(cfg.bootstrap_samples);
    for _ in 0..cfg.bootstrap_samples {
        let pick: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let a = resampled_map(&per_model[0].0, &annos, &pick, &cfg.train.thresholds)?;
        let b = resampled_map(&per_model[1].0, &annos, &pick, &cfg.train.thresholds)?;
        gaps.push(a - b);
    }
    gaps.sort_by(f64::total_cmp);
    let q = |p: f64| {
        if gaps.is_empty() {
            f64::NAN
        } else {
            gaps[((gaps.len() - 1) as f64 * p).round() as usize]
        }
    };
    Ok(AsymmetryGap {
        independent: per_model[0].1,
        tied: per_model[1].1,
        gap: per_model[0].1 - per_model[1].1,
        interval: (q(0.025), q(0.975)),
        samples: cfg.bootstrap_samples,
    })
}

fn resampled_map(preds: &Predictions, annos: &AnnotationSet, pick: &[usize], thresholds: &[f64]) -> Result<f64> {
    let mut videos = Vec::with_capacity(pick.len());
    let mut sampled = Predictions::new();
    for (k, &i) in pick.iter().enumerate() {
        let v = &annos.videos[i];
        let id = format!("{}#{k}", v.id);
        sampled.insert(id.clone(), preds.get(&v.id).cloned().unwrap_or_default());
        videos.push(VideoAnnotation { id, ..v.clone() });
    }
    let set = AnnotationSet {
        labels: annos.labels.clone(),
        videos,
    };
    Ok(evaluate(&sampled, &set, thresholds)?.average_map)
}

impl AblationReport {
    fn cell(v: f64) -> String {
        if v.is_nan() {
            "failed".into()
        } else {
            format!("{:.2}", 100.0 * v)
        }
    }

    pub fn markdown(&self) -> String {
        let mut out = String::new();
        let th: Vec<String> = self.thresholds.iter().map(|t| format!("{t:.2}")).collect();
        for (group, title) in [("component", "Component ablation"), ("strategy", "Temporal modeling strategy")] {
            let _ = writeln!(out, "### {title}\n");
            if group == "component" {
                let _ = write!(out, "| variant | spatial | temporal | fusion | independent A |");
            } else {
                let _ = write!(out, "| strategy |");
            }
            for t in &th {
                let _ = write!(out, " {t} |");
            }
            let _ = writeln!(out, " Avg. |");
            let cols = if group == "component" { 5 } else { 1 } + th.len() + 1;
            let _ = writeln!(out, "|{}", "---|".repeat(cols));
            for r in self.rows.iter().filter(|r| r.group == group) {
                let mark = |b: bool| if b { "x" } else { "" };
                if group == "component" {
                    let _ = write!(
                        out,
                        "| {} | {} | {} | {} | {} |",
                        r.name,
                        mark(r.spatial),
                        mark(r.temporal),
                        mark(r.fusion),
                        mark(r.independent_a)
                    );
                } else {
                    let _ = write!(out, "| {} |", r.name);
                }
                for m in &r.map_per_threshold {
                    let _ = write!(out, " {} |", Self::cell(*m));
                }
                let _ = writeln!(out, " {} |", Self::cell(r.average_map));
            }
            let _ = writeln!(out);
        }
        if let Some(g) = &self.asymmetry {
            let _ = writeln!(
                out,
                "Asymmetric ramps: independent A {:.2}, tied A {:.2}, gap {:+.2} (95% bootstrap interval {:+.2} to {:+.2}, {} resamples)",
                100.0 * g.independent,
                100.0 * g.tied,
                100.0 * g.gap,
                100.0 * g.interval.0,
                100.0 * g.interval.1,
                g.samples
            );
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("group,variant");
        for t in &self.thresholds {
            let _ = write!(out, ",mAP@{t:.2}");
        }
        out.push_str(",avg_mAP,status\n");
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.group, r.name);
            for m in &r.map_per_threshold {
                let _ = write!(out, ",{m}");
            }
            let status = match &r.status {
                RowStatus::Ok => "ok".to_string(),
                RowStatus::Failed(m) => format!("\"failed: {}\"", m.replace('"', "'")),
            };
            let _ = writeln!(out, ",{},{status}", r.average_map);
        }
        out
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}
