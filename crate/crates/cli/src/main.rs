//! `estf`: synthesize data, train, evaluate, check gradients, benchmark and
//! run the ablation grid.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors, 2 when the
//! numerics fail (non-finite values, divergence, failed gradient checks).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use estf_core::bench::{
    ablation_run, scan_scaling, AblationConfig, CountingAlloc, RowStatus, ScalingConfig, ATTENTION_MODULE, SSM_MODULE,
};
use estf_core::detector::{embed_video, evaluate_model, module_gradchecks, train, TrainConfig};
use estf_core::metrics::{
    annotations_to_json, evaluate, predictions_to_json, read_annotations, read_json, read_predictions, write_text,
    DEFAULT_THRESHOLDS,
};
use estf_core::synthdata::{generate, read_dataset, write_dataset, SynthSpec};
use estf_core::{Error, Result};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

/// Environment variable holding the worker thread count.
const THREADS_VAR: &str = "ESTF_THREADS";

#[derive(Parser)]
#[command(name = "estf", version, about = "Temporal action detection with spatial-temporal adapters")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Synth {
        /// SynthSpec JSON; defaults to the easy preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a detector; writes checkpoints, the epoch log and validation
    /// predictions to --out.
    Train {
        /// TrainConfig JSON; every field has a default.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory from `synth`; defaults to generating the easy set.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "estf-train")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score predictions against annotations.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        annos: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS)]
        thresholds: Vec<f64>,
        /// Accepted for uniformity; evaluation draws no random numbers.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Central-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all", value_parser = ["ssm", "estf", "head", "all"])]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Runtime and peak memory of TB-SSM against attention over lengths.
    Bench {
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        repetitions: Option<usize>,
        /// CSV destination; without it the CSV goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the variant grid and print the ablation tables.
    Ablate {
        /// AblationConfig JSON; every field has a default.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_md: Option<PathBuf>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match setup_threads().and_then(|_| run(cli.cmd)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}

fn setup_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::invalid(THREADS_VAR, format!("expected a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(e.to_string()))
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Synth { spec, out, seed } => {
            let mut spec: SynthSpec = load_or_default(spec.as_deref(), SynthSpec::validate)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let data = generate(&spec)?;
            write_dataset(&out, &data, Some(&spec))?;
            let n: usize = data.videos.iter().map(|v| v.annotation.annotations.len()).sum();
            println!("wrote {} videos with {n} actions to {}", data.videos.len(), out.display());
        }
        Cmd::Train { config, data, out, seed } => {
            let mut cfg: TrainConfig = load_or_default(config.as_deref(), TrainConfig::validate)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = match &data {
                Some(dir) => read_dataset(dir)?,
                None => generate(&SynthSpec::default())?,
            };
            cfg.check_data(&data)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_text(&out.join("config.json"), &serde_json::to_string_pretty(&cfg).expect("config serializes"))?;
            let outcome = train(&data, &cfg, Some(&out), &mut |log| {
                let m50 = log.map_50.map_or("-".into(), |m| format!("{m:.4}"));
                println!(
                    "epoch {:3}  loss_cls {:.5}  loss_reg {:.5}  mAP {:.4}  mAP@0.5 {m50}",
                    log.epoch, log.loss_cls, log.loss_reg, log.map
                );
            })?;
            let (_, val) = data.split(cfg.val_fraction);
            let val = if val.videos.is_empty() { data.clone() } else { val };
            let tokens = val
                .videos
                .iter()
                .map(|v| embed_video(&outcome.model, &v.frames))
                .collect::<Result<Vec<_>>>()?;
            let (preds, _) = evaluate_model(&outcome.model, &tokens, &val, &cfg.decode, &cfg.thresholds)?;
            write_text(&out.join("predictions.json"), &predictions_to_json(&preds, &val.labels))?;
            write_text(&out.join("val_annotations.json"), &annotations_to_json(&val.annotations()))?;
            print!("{}", outcome.report.table());
        }
        Cmd::Eval {
            preds,
            annos,
            thresholds,
            seed: _,
        } => {
            let annos = read_annotations(&annos)?;
            let preds = read_predictions(&preds, &annos)?;
            print!("{}", evaluate(&preds, &annos, &thresholds)?.table());
        }
        Cmd::Gradcheck { module, seed } => {
            let checks = module_gradchecks(&module, seed)?;
            let mut ok = true;
            for c in &checks {
                let pass = c.report.passed();
                ok &= pass;
                println!(
                    "{:5} {:45} max_rel_err {:.3e} over {} entries  {}",
                    c.module,
                    c.case,
                    c.report.max_rel_error,
                    c.report.entries_checked,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            let mut seen: Vec<&str> = checks.iter().map(|c| c.module).collect();
            seen.dedup();
            for m in seen {
                let worst = checks
                    .iter()
                    .filter(|c| c.module == m)
                    .map(|c| c.report.max_rel_error)
                    .fold(0.0, f64::max);
                println!("{m}: max relative error {worst:.3e}");
            }
            if !ok {
                eprintln!("error: gradient check above tolerance");
                return Ok(ExitCode::from(2));
            }
        }
        Cmd::Bench {
            lengths,
            repetitions,
            out,
            seed,
        } => {
            let defaults = ScalingConfig::default();
            let cfg = ScalingConfig {
                lengths: lengths.unwrap_or(defaults.lengths),
                repetitions: repetitions.unwrap_or(defaults.repetitions),
                seed: seed.unwrap_or(defaults.seed),
                ..defaults
            };
            if cfg.lengths.contains(&0) {
                return Err(Error::invalid("/lengths", "lengths must be positive"));
            }
            let report = scan_scaling(&cfg)?;
            let summary = |m: &str| {
                let slope = report.slope(m).map_or("-".into(), |s| format!("{s:.3}"));
                let ratio = report.peak_doubling_ratio(m).map_or("-".into(), |r| format!("{r:.3}"));
                format!("{m}: log-log slope {slope}, peak bytes ratio per doubling {ratio}")
            };
            match out {
                Some(path) => {
                    write_text(&path, &report.csv())?;
                    for m in [SSM_MODULE, ATTENTION_MODULE] {
                        println!("{}", summary(m));
                    }
                }
                None => {
                    print!("{}", report.csv());
                    for m in [SSM_MODULE, ATTENTION_MODULE] {
                        eprintln!("{}", summary(m));
                    }
                }
            }
        }
        Cmd::Ablate {
            config,
            out_md,
            out_csv,
            seed,
        } => {
            let mut cfg: AblationConfig = load_or_default(config.as_deref(), |c: &AblationConfig| {
                c.data.validate().map_err(|e| e.under("/data"))?;
                c.train.validate().map_err(|e| e.under("/train"))
            })?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let report = ablation_run(&cfg, &mut |row| match &row.status {
                RowStatus::Ok => eprintln!("{:10} {:12} avg mAP {:.4}", row.group, row.name, row.average_map),
                RowStatus::Failed(m) => eprintln!("{:10} {:12} failed: {m}", row.group, row.name),
            })?;
            let md = report.markdown();
            print!("{md}");
            if let Some(p) = out_md {
                write_text(&p, &md)?;
            }
            if let Some(p) = out_csv {
                write_text(&p, &report.csv())?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_or_default<T>(path: Option<&Path>, check: impl FnOnce(&T) -> Result<()>) -> Result<T>
where
    T: Default + serde::de::DeserializeOwned,
{
    match path {
        Some(p) => read_json(p, check),
        None => {
            let value = T::default();
            check(&value)?;
            Ok(value)
        }
    }
}
