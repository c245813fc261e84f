//! Command-line entry points: dataset synthesis, training, evaluation,
//! gradient checking, and ablation sweeps. All numerics live in the
//! library; this module only wires configs, paths, and output files.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::datagen::{self, stratified_split, DatasetReader, SplitTag, SynthConfig};
use crate::trainer::{
    evaluate, fit, load_checkpoint, EvalReport, FrameDump, TrainConfig, TrainError,
};

pub const CONFIG_ECHO_FILE: &str = "config.echo.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const FRAMES_DUMP_FILE: &str = "frames.jsonl";
pub const ABLATION_FILE: &str = "ablation.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: {0}")]
    GradCheckFailed(String),
    #[error(transparent)]
    Dataset(#[from] datagen::DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "mvasl", version, about = "Multi-view action selection learning on synthetic video")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-view dataset with planted action segments.
    Synth {
        /// Generator config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for dataset.masl + manifest.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train end-to-end and write the best-epoch checkpoint.
    Train {
        /// Training config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint.bin, state.bin, train.log.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Resume from a state.bin written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write metrics.json (and frames.jsonl with --dump-frames).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dump per-frame actionness and pseudo-positive sets as JSON lines.
        #[arg(long)]
        dump_frames: bool,
    },
    /// Finite-difference gradient checks for every loss and the full stack.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random probes per check.
        #[arg(long, default_value_t = 120)]
        probes: usize,
    },
    /// Loss-component and view-subset ablation sweeps.
    Ablate {
        /// Base training config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Optional directory for ablation.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_json_config<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?)
        }
    }
}

fn echo_config<T: Serialize>(cfg: &T, out: Option<&Path>) -> Result<()> {
    let pretty = serde_json::to_string_pretty(cfg)?;
    println!("{pretty}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_ECHO_FILE), pretty.as_bytes())?;
    }
    Ok(())
}

fn write_metrics(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(report)?.as_bytes())?;
    Ok(())
}

fn run_synth(config: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let cfg: SynthConfig = load_json_config(&config)?;
    echo_config(&cfg, Some(&out))?;
    let videos = datagen::generate(&cfg)?;
    let labels: Vec<Vec<bool>> = videos.iter().map(|v| v.labels.clone()).collect();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed ^ 0x5157);
    let splits = stratified_split(&labels, cfg.train_ratio, &mut rng)?;
    datagen::write_dataset(&videos, &splits, &out)?;
    let train = splits.iter().filter(|&&s| s == SplitTag::Train).count();
    log::info!("wrote {} videos ({} train / {} test) to {}", videos.len(), train, videos.len() - train, out.display());
    Ok(())
}

fn run_train(
    config: Option<PathBuf>,
    data: PathBuf,
    out: PathBuf,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut cfg: TrainConfig = load_json_config(&config)?;
    cfg.data_dir = Some(data.clone());
    echo_config(&cfg, Some(&out))?;
    let outcome = fit(&cfg, &data, Some(&out), resume.as_deref())?;
    log::info!(
        "trained {} epochs; best mAP_C {:.4} at epoch {}",
        cfg.epochs,
        outcome.best_map_c,
        outcome.best_epoch
    );
    Ok(())
}

fn run_eval(checkpoint: PathBuf, data: PathBuf, out: Option<PathBuf>, dump_frames: bool) -> Result<()> {
    if dump_frames && out.is_none() {
        return Err(CliError::Usage("--dump-frames requires --out".into()));
    }
    let reader = DatasetReader::open(&data)?;
    let (cfg, model, views) = load_checkpoint(&checkpoint, &reader)?;
    echo_config(&cfg, out.as_deref())?;
    let test_idx = reader.indices_for(SplitTag::Test);
    let mut dumps: Vec<FrameDump> = Vec::new();
    let report = evaluate(
        &model,
        &reader,
        &test_idx,
        &cfg,
        &views,
        if dump_frames { Some(&mut dumps) } else { None },
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(dir) = &out {
        write_metrics(&report, dir)?;
        if dump_frames {
            let mut file = std::fs::File::create(dir.join(FRAMES_DUMP_FILE))?;
            for dump in &dumps {
                serde_json::to_writer(&mut file, dump)?;
                file.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

fn run_gradcheck(seed: u64, probes: usize) -> Result<()> {
    let reports = crate::gradcheck::run_suite(seed, probes)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<20} probes={:<4} max_rel_err={:.3e}  {}",
            r.name,
            r.probes,
            r.max_rel_err,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all checks passed");
        Ok(())
    } else {
        Err(CliError::GradCheckFailed(failed.join(", ")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossAblationRow {
    pub view_loss: bool,
    pub frame_loss: bool,
    pub actionness_loss: bool,
    pub map_c: f64,
    pub map_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ViewAblationRow {
    pub setting: String,
    pub map_c: f64,
    pub map_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub loss_components: Vec<LossAblationRow>,
    pub view_subsets: Vec<ViewAblationRow>,
}

/// Run the loss-component rows (all five combinations used in practice)
/// and the view-subset rows (each single view plus all views).
pub fn run_ablation(base: &TrainConfig, data: &Path) -> Result<AblationReport> {
    let reader = DatasetReader::open(data)?;
    if reader.is_empty() {
        return Err(CliError::Usage("dataset has no records".into()));
    }
    let num_views = reader.read_meta(0)?.views;
    drop(reader);

    let combos: [(bool, f64, f64); 5] =
        [(true, 1.0, 1.0), (true, 1.0, 0.0), (true, 0.0, 0.0), (false, 1.0, 1.0), (false, 1.0, 0.0)];
    let mut loss_components = Vec::new();
    for (view, beta1, beta2) in combos {
        let cfg = TrainConfig {
            use_view_loss: view,
            loss: crate::losses::LossConfig { beta1, beta2, ..base.loss.clone() },
            ..base.clone()
        };
        let outcome = fit(&cfg, data, None, None)?;
        log::info!(
            "ablation view={} b1={} b2={}: mAP_C {:.4}",
            view,
            beta1,
            beta2,
            outcome.best_eval.map_c
        );
        loss_components.push(LossAblationRow {
            view_loss: view,
            frame_loss: beta1 != 0.0,
            actionness_loss: beta2 != 0.0,
            map_c: outcome.best_eval.map_c,
            map_s: outcome.best_eval.map_s,
        });
    }

    let mut view_subsets = Vec::new();
    let all = fit(base, data, None, None)?;
    view_subsets.push(ViewAblationRow {
        setting: "all views".into(),
        map_c: all.best_eval.map_c,
        map_s: all.best_eval.map_s,
    });
    for v in 0..num_views {
        let cfg = TrainConfig { views: Some(vec![v]), ..base.clone() };
        let outcome = fit(&cfg, data, None, None)?;
        log::info!("ablation view {}: mAP_C {:.4}", v + 1, outcome.best_eval.map_c);
        view_subsets.push(ViewAblationRow {
            setting: format!("view {}", v + 1),
            map_c: outcome.best_eval.map_c,
            map_s: outcome.best_eval.map_s,
        });
    }

    Ok(AblationReport { loss_components, view_subsets })
}

fn run_ablate(config: Option<PathBuf>, data: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let cfg: TrainConfig = load_json_config(&config)?;
    echo_config(&cfg, out.as_deref())?;
    let report = run_ablation(&cfg, &data)?;

    println!("loss components (view / frame / actionness -> mAP_C, mAP_S):");
    for row in &report.loss_components {
        let mark = |b: bool| if b { "x" } else { " " };
        println!(
            "  [{}] [{}] [{}]  {:.4}  {:.4}",
            mark(row.view_loss),
            mark(row.frame_loss),
            mark(row.actionness_loss),
            row.map_c,
            row.map_s
        );
    }
    println!("view subsets:");
    for row in &report.view_subsets {
        println!("  {:<10} {:.4}  {:.4}", row.setting, row.map_c, row.map_s);
    }
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(ABLATION_FILE), serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok(())
}

/// Dispatch a parsed command; errors bubble up for `main` to report as JSON.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => run_synth(config, out),
        Command::Train { config, data, out, resume } => run_train(config, data, out, resume),
        Command::Eval { checkpoint, data, out, dump_frames } => {
            run_eval(checkpoint, data, out, dump_frames)
        }
        Command::Gradcheck { seed, probes } => run_gradcheck(seed, probes),
        Command::Ablate { config, data, out } => run_ablate(config, data, out),
    }
}

/// Exit code for an error (usage errors and runtime failures both map to 1;
/// clap handles its own usage exits with code 2).
pub fn report_error(err: &CliError) -> i32 {
    let payload = serde_json::json!({ "error": err.to_string() });
    eprintln!("{payload}");
    1
}
