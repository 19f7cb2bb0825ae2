//! Command-line orchestration: argument parsing, run directories, and
//! artifact emission.
//!
//! Each command reads one configuration document, creates a fresh run
//! directory, writes its artifacts plus a manifest listing them with
//! hashes, and finishes with a self-audit. Exit code 0 means every
//! artifact was written and re-verified; configuration problems exit
//! with 2 and anything else with 1, both after printing a JSON error
//! record to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{
    load_config, resolved_json, AblateConfig, CorpusConfig, DefendConfig, GenerateConfig,
    InvertConfig, ReportConfig, SimulateConfig,
};
use crate::defenses::{benign_ap, defense_sweep, evaluate_defended, standard_grid, sweep_csv};
use crate::detection::{DetectorBackend, TemplateDetector};
use crate::diffusion::{ddim_invert, generate, DiffusionBackend, NullSchedule, ToyDiffusion};
use crate::embedding::{HashedProjectionEmbedder, SimilarityBackend};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::manifest::{audit_run_dir, RunManifest, MANIFEST_FILE};
use crate::optimizer::{run_attack, AttackConfig, InitStrategy, IterationRecord};
use crate::simulate::{
    evaluate_verdicts, is_image_file, load_backgrounds, make_cases, synthesize_backgrounds,
    synthesize_benign_set, CompositeCase, JudgeParams,
};

/// Appearance-attack generation and evaluation against sliding-window
/// sign detectors.
#[derive(Debug, Parser)]
#[command(name = "signforge", version, about)]
pub struct Cli {
    /// Worker threads for parallel evaluation; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the attack and emit the best patch.
    Generate { config: PathBuf },
    /// Evaluate a patch under the randomized placement protocol.
    Simulate { config: PathBuf },
    /// Sweep input-transform defenses over a patch.
    Defend { config: PathBuf },
    /// Rerun the attack with components removed or customizations added.
    Ablate { config: PathBuf },
    /// Recover the latent and null texts reproducing an image.
    Invert { config: PathBuf },
    /// Audit run directories and combine their tables.
    Report { config: PathBuf },
}

/// Parses arguments, runs one command, and reports the run directory on
/// stdout or a JSON error record on stderr. Returns the process exit
/// code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    run_command(&cli)
}

pub fn run_command(cli: &Cli) -> i32 {
    if cli.jobs > 0 {
        // Ignores failure: the global pool can only be set once.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global();
    }
    let result = match &cli.command {
        Command::Generate { config } => cmd_generate(config),
        Command::Simulate { config } => cmd_simulate(config),
        Command::Defend { config } => cmd_defend(config),
        Command::Ablate { config } => cmd_ablate(config),
        Command::Invert { config } => cmd_invert(config),
        Command::Report { config } => cmd_report(config),
    };
    match result {
        Ok(run_dir) => {
            println!("{}", run_dir.display());
            0
        }
        Err(err) => {
            let code = err.exit_code();
            let record =
                serde_json::json!({ "error": { "message": err.to_string(), "exit_code": code } });
            eprintln!("{record}");
            code
        }
    }
}

/// Creates the run directory, refusing one that already holds a
/// finished run.
fn prepare_run_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    if path.join(MANIFEST_FILE).exists() {
        return Err(Error::Config(format!(
            "run directory {} already contains a manifest; pick a fresh directory",
            path.display()
        )));
    }
    Ok(())
}

fn backend_ids(
    backend: &ToyDiffusion,
    detector: &TemplateDetector,
    embedder: &HashedProjectionEmbedder,
) -> Vec<String> {
    let (h, w, c) = backend.latent_shape();
    vec![
        format!("toy-diffusion steps={} latent={h}x{w}x{c}", backend.schedule().steps()),
        format!("{} stride={}", detector.name(), detector.stride()),
        format!("hashed-projection dim={}", embedder.dim()),
    ]
}

/// Loads the background corpus a config names, recording seeds and
/// input hashes in the manifest. Directory corpora are optionally
/// filtered by every supplied detector so no background pre-fires.
fn load_corpus(
    corpus: &CorpusConfig,
    detectors: &[&TemplateDetector],
    judge: &JudgeParams,
    manifest: &mut RunManifest,
) -> Result<Vec<ImageTensor>> {
    corpus.validate()?;
    if let Some(synth) = &corpus.synthesize {
        manifest.seed("corpus_synthesize", synth.seed);
        return synthesize_backgrounds(synth.count, synth.height, synth.width, synth.seed);
    }
    let dir = corpus.dir.as_ref().unwrap();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| is_image_file(p))
        .collect();
    files.sort();
    for file in &files {
        manifest.record_input(file)?;
    }
    let filter = corpus.filter.then_some((detectors[0] as &dyn DetectorBackend, judge));
    let loaded = load_backgrounds(dir, filter)?;
    if !corpus.filter || detectors.len() == 1 {
        return Ok(loaded);
    }
    let mut kept = Vec::new();
    for img in loaded {
        let mut clean = true;
        for det in &detectors[1..] {
            let found = det.detect_nms(&img, judge.score_thresh, judge.iou_thresh)?;
            if !found.proposals.is_empty() {
                clean = false;
                break;
            }
        }
        if clean {
            kept.push(img);
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(kept)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_history_csv(path: &Path, history: &[IterationRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for record in history {
        writer.serialize(record)?;
    }
    writer.flush()?;
    Ok(())
}

fn write_cases_csv(
    path: &Path,
    cases: &[CompositeCase],
    detector_names: &[String],
    per_case: &[Vec<bool>],
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec![
        "case".to_string(),
        "background".to_string(),
        "scale".to_string(),
        "rotation_deg".to_string(),
    ];
    for (i, name) in detector_names.iter().enumerate() {
        header.push(format!("success_{i}_{name}"));
    }
    writer.write_record(&header)?;
    for (i, (case, verdicts)) in cases.iter().zip(per_case).enumerate() {
        let mut row = vec![
            i.to_string(),
            case.background_index.to_string(),
            case.placement.scale.to_string(),
            case.placement.rotation_deg.to_string(),
        ];
        for &v in verdicts {
            row.push(v.to_string());
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn cmd_generate(config_path: &Path) -> Result<PathBuf> {
    let start = Instant::now();
    let cfg: GenerateConfig = load_config(config_path)?;
    let run_dir = cfg.output_dir.clone();
    prepare_run_dir(&run_dir)?;

    let mut manifest = RunManifest::new("generate", resolved_json(&cfg)?);
    manifest.record_input(config_path)?;
    manifest.seed("attack", cfg.attack.seed);

    let backend = ToyDiffusion::default();
    let detector = cfg.detector.build()?;
    let embedder = HashedProjectionEmbedder::default();
    manifest.backends = backend_ids(&backend, &detector, &embedder);

    let judge = JudgeParams {
        target_class: cfg.attack.target_class,
        score_thresh: cfg.attack.score_thresh,
        iou_thresh: cfg.attack.iou_thresh,
    };
    let backgrounds = load_corpus(&cfg.corpus, &[&detector], &judge, &mut manifest)?;
    let attack_config = cfg.attack.to_attack_config(&cfg.prompt)?;
    let run = run_attack(&backend, &detector, &embedder, &backgrounds, &attack_config)?;

    run.best_image.write_png(&run_dir.join("best_image.png"))?;
    run.final_image.write_png(&run_dir.join("final_image.png"))?;
    write_history_csv(&run_dir.join("history.csv"), &run.history)?;
    for name in ["best_image.png", "final_image.png", "history.csv"] {
        manifest.record_artifact(&run_dir, name)?;
    }
    manifest.duration_seconds = start.elapsed().as_secs_f64();
    manifest.write(&run_dir)?;
    audit_run_dir(&run_dir)?;
    Ok(run_dir)
}

pub fn cmd_simulate(config_path: &Path) -> Result<PathBuf> {
    let start = Instant::now();
    let cfg: SimulateConfig = load_config(config_path)?;
    let run_dir = cfg.output_dir.clone();
    prepare_run_dir(&run_dir)?;

    let mut manifest = RunManifest::new("simulate", resolved_json(&cfg)?);
    manifest.record_input(config_path)?;
    manifest.record_input(&cfg.patch)?;
    manifest.seed("cases", cfg.cases.seed);

    let backend = ToyDiffusion::default();
    let detectors: Vec<TemplateDetector> =
        cfg.detectors.iter().map(|d| d.build()).collect::<Result<_>>()?;
    let embedder = HashedProjectionEmbedder::default();
    manifest.backends = backend_ids(&backend, &detectors[0], &embedder);

    let judge = cfg.judge.to_params();
    let detector_refs: Vec<&TemplateDetector> = detectors.iter().collect();
    let backgrounds = load_corpus(&cfg.corpus, &detector_refs, &judge, &mut manifest)?;
    let patch = ImageTensor::read(&cfg.patch)?;
    let cases = make_cases(
        &backgrounds,
        patch.height(),
        patch.width(),
        cfg.cases.count,
        cfg.cases.scale_range,
        cfg.cases.rotation_range_deg,
        cfg.cases.seed,
    )?;
    let dyn_refs: Vec<&dyn DetectorBackend> =
        detectors.iter().map(|d| d as &dyn DetectorBackend).collect();
    let verdicts =
        evaluate_verdicts(&patch, &backgrounds, &cases, &dyn_refs, &judge, &|_, img| Ok(img))?;

    write_json(&run_dir.join("report.json"), &verdicts.report)?;
    let mut writer = csv::Writer::from_path(run_dir.join("report.csv"))?;
    writer.write_record(["detector", "total", "successes", "asr"])?;
    for row in &verdicts.report.per_detector {
        writer.write_record(&[
            row.detector.clone(),
            row.total.to_string(),
            row.successes.to_string(),
            row.asr.to_string(),
        ])?;
    }
    writer.write_record(["aasr", "", "", &verdicts.report.aasr.to_string()])?;
    writer.flush()?;
    drop(writer);
    let names: Vec<String> = detectors.iter().map(|d| d.name().to_string()).collect();
    write_cases_csv(&run_dir.join("cases.csv"), &cases, &names, &verdicts.per_case)?;

    for name in ["report.json", "report.csv", "cases.csv"] {
        manifest.record_artifact(&run_dir, name)?;
    }
    manifest.duration_seconds = start.elapsed().as_secs_f64();
    manifest.write(&run_dir)?;
    audit_run_dir(&run_dir)?;
    Ok(run_dir)
}

/// Undefended reference row plus the swept table.
#[derive(Debug, Serialize)]
struct DefendReport {
    baseline_asr: f64,
    baseline_ap: f64,
    rows: Vec<crate::defenses::DefenseRow>,
}

pub fn cmd_defend(config_path: &Path) -> Result<PathBuf> {
    let start = Instant::now();
    let cfg: DefendConfig = load_config(config_path)?;
    let specs = match &cfg.defenses {
        Some(s) if s.is_empty() => {
            return Err(Error::Config("defense sweep needs at least one spec".into()))
        }
        Some(s) => s.clone(),
        None => standard_grid(),
    };
    for spec in &specs {
        spec.validate()?;
    }
    let run_dir = cfg.output_dir.clone();
    prepare_run_dir(&run_dir)?;

    let mut manifest = RunManifest::new("defend", resolved_json(&cfg)?);
    manifest.record_input(config_path)?;
    manifest.record_input(&cfg.patch)?;
    manifest.seed("cases", cfg.cases.seed);
    manifest.seed("benign", cfg.benign.seed);
    manifest.seed("defense_noise", cfg.seed);

    let backend = ToyDiffusion::default();
    let detector = cfg.detector.build()?;
    let embedder = HashedProjectionEmbedder::default();
    manifest.backends = backend_ids(&backend, &detector, &embedder);

    let judge = cfg.judge.to_params();
    let backgrounds = load_corpus(&cfg.corpus, &[&detector], &judge, &mut manifest)?;
    let patch = ImageTensor::read(&cfg.patch)?;
    let cases = make_cases(
        &backgrounds,
        patch.height(),
        patch.width(),
        cfg.cases.count,
        cfg.cases.scale_range,
        cfg.cases.rotation_range_deg,
        cfg.cases.seed,
    )?;
    let benign = synthesize_benign_set(
        &backgrounds,
        detector.class_count(),
        cfg.benign.sign_size,
        cfg.benign.count,
        cfg.benign.scale_range,
        cfg.benign.rotation_range_deg,
        cfg.benign.align,
        cfg.benign.seed,
    )?;
    let rows = defense_sweep(
        &patch,
        &backgrounds,
        &cases,
        &detector,
        &judge,
        &specs,
        &benign,
        cfg.map_iou,
        cfg.seed,
    )?;
    let baseline =
        evaluate_defended(&patch, &backgrounds, &cases, &detector, &judge, None, cfg.seed)?;
    let baseline_ap = benign_ap(&detector, &benign, &judge, cfg.map_iou, None, cfg.seed)?;

    fs::write(run_dir.join("sweep.csv"), sweep_csv(&rows))?;
    write_json(
        &run_dir.join("report.json"),
        &DefendReport { baseline_asr: baseline.per_detector[0].asr, baseline_ap, rows },
    )?;
    for name in ["sweep.csv", "report.json"] {
        manifest.record_artifact(&run_dir, name)?;
    }
    manifest.duration_seconds = start.elapsed().as_secs_f64();
    manifest.write(&run_dir)?;
    audit_run_dir(&run_dir)?;
    Ok(run_dir)
}

/// One ablation outcome.
#[derive(Debug, Serialize)]
struct AblationRow {
    variant: String,
    asr: f64,
    best_loss: f64,
    best_iteration: usize,
}

pub fn cmd_ablate(config_path: &Path) -> Result<PathBuf> {
    let start = Instant::now();
    let cfg: AblateConfig = load_config(config_path)?;
    let run_dir = cfg.output_dir.clone();
    prepare_run_dir(&run_dir)?;

    let mut manifest = RunManifest::new("ablate", resolved_json(&cfg)?);
    manifest.record_input(config_path)?;
    manifest.seed("attack", cfg.attack.seed);
    manifest.seed("cases", cfg.cases.seed);

    let backend = ToyDiffusion::default();
    let detector = cfg.detector.build()?;
    let embedder = HashedProjectionEmbedder::default();
    manifest.backends = backend_ids(&backend, &detector, &embedder);

    let judge = JudgeParams {
        target_class: cfg.attack.target_class,
        score_thresh: cfg.attack.score_thresh,
        iou_thresh: cfg.attack.iou_thresh,
    };
    let backgrounds = load_corpus(&cfg.corpus, &[&detector], &judge, &mut manifest)?;
    let base = cfg.attack.to_attack_config(&cfg.prompt)?;
    let cases = make_cases(
        &backgrounds,
        48,
        48,
        cfg.cases.count,
        cfg.cases.scale_range,
        cfg.cases.rotation_range_deg,
        cfg.cases.seed,
    )?;

    let mut variants: Vec<(String, AttackConfig)> = vec![
        ("full".into(), base.clone()),
        ("no_detection_loss".into(), {
            let mut c = base.clone();
            c.use_detection_loss = false;
            c
        }),
        ("no_similarity_loss".into(), {
            let mut c = base.clone();
            c.use_similarity_loss = false;
            c
        }),
        ("no_bbox_filter".into(), {
            let mut c = base.clone();
            c.use_bbox_filter = false;
            c
        }),
    ];
    if cfg.prompt_customization {
        let mut c = base.clone();
        c.init = InitStrategy::FromPrompt;
        variants.push(("prompt_customization".into(), c));
    }
    if let Some(path) = &cfg.customization_image {
        manifest.record_input(path)?;
        let mut c = base.clone();
        c.init = InitStrategy::FromImage(ImageTensor::read(path)?);
        variants.push(("image_customization".into(), c));
    }

    let dets: Vec<&dyn DetectorBackend> = vec![&detector];
    let mut rows = Vec::new();
    for (variant, attack_config) in &variants {
        let run = run_attack(&backend, &detector, &embedder, &backgrounds, attack_config)?;
        let verdicts = evaluate_verdicts(
            &run.best_image,
            &backgrounds,
            &cases,
            &dets,
            &judge,
            &|_, img| Ok(img),
        )?;
        run.best_image.write_png(&run_dir.join(format!("best_{variant}.png")))?;
        rows.push(AblationRow {
            variant: variant.clone(),
            asr: verdicts.report.per_detector[0].asr,
            best_loss: run.best_loss,
            best_iteration: run.best_iteration,
        });
    }

    let mut writer = csv::Writer::from_path(run_dir.join("ablation.csv"))?;
    writer.write_record(["variant", "asr", "best_loss", "best_iteration"])?;
    for row in &rows {
        writer.write_record(&[
            row.variant.clone(),
            row.asr.to_string(),
            row.best_loss.to_string(),
            row.best_iteration.to_string(),
        ])?;
    }
    writer.flush()?;
    drop(writer);
    write_json(&run_dir.join("ablation.json"), &rows)?;

    manifest.record_artifact(&run_dir, "ablation.csv")?;
    manifest.record_artifact(&run_dir, "ablation.json")?;
    for (variant, _) in &variants {
        manifest.record_artifact(&run_dir, &format!("best_{variant}.png"))?;
    }
    manifest.duration_seconds = start.elapsed().as_secs_f64();
    manifest.write(&run_dir)?;
    audit_run_dir(&run_dir)?;
    Ok(run_dir)
}

/// Inversion outputs besides the reconstruction image.
#[derive(Debug, Serialize)]
struct InversionReport {
    recon_mse: f64,
    null_opt_iters: Vec<usize>,
    null_texts: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct LatentDump {
    shape: (usize, usize, usize),
    data: Vec<f64>,
}

pub fn cmd_invert(config_path: &Path) -> Result<PathBuf> {
    let start = Instant::now();
    let cfg: InvertConfig = load_config(config_path)?;
    let run_dir = cfg.output_dir.clone();
    prepare_run_dir(&run_dir)?;

    let mut manifest = RunManifest::new("invert", resolved_json(&cfg)?);
    manifest.record_input(config_path)?;
    manifest.record_input(&cfg.image)?;

    let backend = ToyDiffusion::default();
    let detector = TemplateDetector::default();
    let embedder = HashedProjectionEmbedder::default();
    manifest.backends = backend_ids(&backend, &detector, &embedder);

    let image = ImageTensor::read(&cfg.image)?;
    let cond = backend.prompt_embedding(&cfg.prompt.render())?;
    let inversion = ddim_invert(&backend, &image, &cond, &cfg.inversion.to_inversion_config())?;
    let reconstructed = generate(
        &backend,
        &inversion.x_big_t,
        &cond,
        &NullSchedule::PerStep(inversion.null_texts.clone()),
    )?;

    reconstructed.image.write_png(&run_dir.join("reconstruction.png"))?;
    write_json(
        &run_dir.join("inversion.json"),
        &InversionReport {
            recon_mse: inversion.recon_mse,
            null_opt_iters: inversion.null_opt_iters.clone(),
            null_texts: inversion.null_texts.iter().map(|p| p.to_vec()).collect(),
        },
    )?;
    write_json(
        &run_dir.join("latent.json"),
        &LatentDump {
            shape: inversion.x_big_t.dim(),
            data: inversion.x_big_t.iter().copied().collect(),
        },
    )?;
    for name in ["reconstruction.png", "inversion.json", "latent.json"] {
        manifest.record_artifact(&run_dir, name)?;
    }
    manifest.duration_seconds = start.elapsed().as_secs_f64();
    manifest.write(&run_dir)?;
    audit_run_dir(&run_dir)?;
    Ok(run_dir)
}

/// One audited run in a combined report.
#[derive(Debug, Serialize)]
struct SummaryRow {
    run: String,
    command: String,
    duration_seconds: f64,
    artifacts: Vec<String>,
    /// Contents of the run's primary JSON report, when it has one.
    report: Option<serde_json::Value>,
}

pub fn cmd_report(config_path: &Path) -> Result<PathBuf> {
    let start = Instant::now();
    let cfg: ReportConfig = load_config(config_path)?;
    let run_dir = cfg.output_dir.clone();
    prepare_run_dir(&run_dir)?;

    let mut manifest = RunManifest::new("report", resolved_json(&cfg)?);
    manifest.record_input(config_path)?;

    let mut rows = Vec::new();
    for run in &cfg.runs {
        let audited = audit_run_dir(run)?;
        let report_name = audited
            .artifacts
            .iter()
            .map(|a| a.path.as_str())
            .find(|p| *p == "report.json" || *p == "ablation.json" || *p == "inversion.json");
        let report = match report_name {
            Some(name) => Some(serde_json::from_str(&fs::read_to_string(run.join(name))?)?),
            None => None,
        };
        rows.push(SummaryRow {
            run: run.display().to_string(),
            command: audited.command.clone(),
            duration_seconds: audited.duration_seconds,
            artifacts: audited.artifacts.iter().map(|a| a.path.clone()).collect(),
            report,
        });
    }

    let mut writer = csv::Writer::from_path(run_dir.join("summary.csv"))?;
    writer.write_record(["run", "command", "duration_seconds", "artifacts"])?;
    for row in &rows {
        writer.write_record(&[
            row.run.clone(),
            row.command.clone(),
            row.duration_seconds.to_string(),
            row.artifacts.join(" "),
        ])?;
    }
    writer.flush()?;
    drop(writer);
    write_json(&run_dir.join("summary.json"), &rows)?;

    manifest.record_artifact(&run_dir, "summary.csv")?;
    manifest.record_artifact(&run_dir, "summary.json")?;
    manifest.duration_seconds = start.elapsed().as_secs_f64();
    manifest.write(&run_dir)?;
    audit_run_dir(&run_dir)?;
    Ok(run_dir)
}
