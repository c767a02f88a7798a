//! Batch command-line front end.
//!
//! Subcommands cover the whole experiment cycle: `generate` synthetic scenes,
//! `train` the unmixing model, `unmix` with a trained checkpoint, run the
//! FCLS `baseline`, `evaluate` estimates against ground truth,
//! `verify-theorems`, `export-maps`, and the end-to-end `pipeline`.
//!
//! Every command writes a `RunManifest` JSON (atomically, next to its
//! outputs) recording the arguments, derived seeds, a config hash, and wall
//! time — enough to re-run the command identically. Exit codes are a stable
//! contract: `0` success, `1` runtime failure, `2` usage error.
//!
//! All randomness flows from the single `--seed`: subcomponents derive their
//! streams by tagged hashing inside [`crate::rng`], so equal seeds mean
//! byte-identical cubes, checkpoints, and metric tables on one platform.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::{load_checkpoint, save_checkpoint};
use crate::dyncheck;
use crate::hsidata::{
    read_abundance, read_cube, read_endmember_csv, write_abundance, write_cube,
    write_endmember_csv, EndmemberSet, SequenceCube,
};
use crate::initbase::{fcls_stack, vca};
use crate::metrics::{evaluate, export_maps, EvalReport};
use crate::mild::{train_with_init, MildModel, TrainConfig};
use crate::synthgen::{generate, synth1_spec, synth2_spec, Preset, SynthSpec};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Hsi(#[from] crate::hsidata::HsiError),
    #[error(transparent)]
    Synth(#[from] crate::synthgen::SynthError),
    #[error(transparent)]
    Init(#[from] crate::initbase::InitError),
    #[error(transparent)]
    Diff(#[from] crate::diffkit::DiffError),
    #[error(transparent)]
    Mild(#[from] crate::mild::MildError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Dyn(#[from] dyncheck::DynError),
    #[error("{0}")]
    Other(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(name = "mild", version, about = "Multitemporal hyperspectral unmixing toolbox")]
pub struct Cli {
    /// Worker threads (0 uses all cores).
    #[arg(long, global = true, env = "MILD_THREADS", default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Synth1,
    Synth2,
}

#[derive(Args, Debug, Clone)]
pub struct TrainOverrides {
    /// Training configuration JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub batch_pixels: Option<usize>,
}

impl TrainOverrides {
    fn resolve(&self, seed: Option<u64>) -> Result<TrainConfig, CliError> {
        let mut config: TrainConfig = match &self.config {
            Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.lr {
            config.lr = v;
        }
        if let Some(v) = self.alpha {
            config.alpha = v;
        }
        if let Some(v) = self.beta {
            config.beta = v;
        }
        if let Some(v) = self.k {
            config.k = v;
        }
        if let Some(v) = self.batch_pixels {
            config.batch_pixels = Some(v);
        }
        if let Some(v) = seed {
            config.seed = v;
        }
        Ok(config)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene: cube, ground truth, endmembers, sidecar.
    Generate {
        #[arg(long, value_enum, conflicts_with = "spec")]
        preset: Option<PresetArg>,
        /// Custom scene spec JSON (alternative to --preset).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the unmixing model on a cube.
    Train {
        #[arg(long)]
        cube: PathBuf,
        /// Number of materials to unmix.
        #[arg(long)]
        endmembers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint output path (sidecar JSON lands next to it).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Infer abundances (and endmembers) from a trained checkpoint.
    Unmix {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cube: PathBuf,
        /// Abundance output (.hsa).
        #[arg(long)]
        out: PathBuf,
        /// Endmember CSV output; per-frame matrices land next to it.
        #[arg(long)]
        endmembers_out: Option<PathBuf>,
    },
    /// Classical baselines.
    Baseline {
        #[command(subcommand)]
        method: BaselineMethod,
    },
    /// Score an estimate against ground truth; emits one CSV row.
    Evaluate {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        truth_abundances: PathBuf,
        #[arg(long)]
        truth_endmembers: PathBuf,
        #[arg(long)]
        est_abundances: PathBuf,
        #[arg(long)]
        est_endmembers: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the consistency, convergence, and stability checks.
    VerifyTheorems {
        /// Optional trained checkpoint to include in the stability checks.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Optional cube to probe the model with (a deterministic synthetic
        /// probe is generated otherwise).
        #[arg(long)]
        cube: Option<PathBuf>,
        /// Report JSON path.
        #[arg(long, default_value = "verify-report.json")]
        report: PathBuf,
    },
    /// Full experiment: generate, train, unmix, baseline, evaluate.
    Pipeline {
        #[arg(long, value_enum)]
        preset: PresetArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Render abundance maps as portable graymaps.
    ExportMaps {
        #[arg(long)]
        abundances: PathBuf,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum BaselineMethod {
    /// Fully constrained least squares against fixed endmembers.
    Fcls {
        #[arg(long)]
        cube: PathBuf,
        /// Endmember CSV (used for every frame).
        #[arg(long)]
        endmembers: PathBuf,
        /// Abundance output (.hsa).
        #[arg(long)]
        out: PathBuf,
    },
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub wall_time_s: f64,
}

/// FNV-1a over the canonical JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let encoded = serde_json::to_string(value).unwrap_or_default();
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in encoded.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    format!("{hash:016x}")
}

/// Write JSON atomically: temp file in the same directory, then rename.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(value)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_manifest(dir_or_file: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let path = if dir_or_file.is_dir() {
        dir_or_file.join("manifest.json")
    } else {
        let mut name = dir_or_file
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| "output".to_string());
        name.push_str(".manifest.json");
        dir_or_file.with_file_name(name)
    };
    write_json_atomic(&path, manifest)
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().to_string()
}

// ---------------------------------------------------------------------------
// Model sidecar
// ---------------------------------------------------------------------------

/// Checkpoint sidecar: everything needed to rebuild the model around the
/// flat parameters.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub t_count: usize,
    pub bands: usize,
    pub endmember_count: usize,
    pub k: usize,
    pub height: usize,
    pub width: usize,
    pub config: TrainConfig,
}

fn sidecar_path(model_path: &Path) -> PathBuf {
    let mut name = model_path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "model".to_string());
    name.push_str(".json");
    model_path.with_file_name(name)
}

pub fn save_model(path: &Path, model: &MildModel, meta: &ModelMeta) -> Result<(), CliError> {
    save_checkpoint(path, model.params())?;
    write_json_atomic(&sidecar_path(path), meta)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(MildModel, ModelMeta), CliError> {
    let meta: ModelMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let params = load_checkpoint(path)?;
    let model = MildModel::from_params(
        params,
        meta.t_count,
        meta.bands,
        meta.endmember_count,
        meta.k,
    )?;
    Ok((model, meta))
}

// ---------------------------------------------------------------------------
// Command implementations
// ---------------------------------------------------------------------------

fn spec_for(preset: PresetArg, seed: u64) -> SynthSpec {
    match preset {
        PresetArg::Synth1 => synth1_spec(seed),
        PresetArg::Synth2 => synth2_spec(seed),
    }
}

/// Scene files written by `generate` (and reused by `pipeline`).
struct SceneFiles {
    cube: PathBuf,
    truth_abundances: PathBuf,
    endmembers: PathBuf,
    spec: PathBuf,
}

fn write_scene(out: &Path, spec: &SynthSpec) -> Result<(SceneFiles, SequenceCube, crate::synthgen::GroundTruth), CliError> {
    std::fs::create_dir_all(out)?;
    let (cube, truth) = generate(spec)?;
    let files = SceneFiles {
        cube: out.join("cube.hsc"),
        truth_abundances: out.join("truth.hsa"),
        endmembers: out.join("endmembers.csv"),
        spec: out.join("spec.json"),
    };
    write_cube(&files.cube, &cube)?;
    write_abundance(&files.truth_abundances, &truth.abundances)?;
    write_endmember_csv(&files.endmembers, truth.endmembers.reference(), spec.bands)?;
    write_json_atomic(&files.spec, spec)?;
    Ok((files, cube, truth))
}

fn cmd_generate(
    preset: Option<PresetArg>,
    spec_path: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let start = Instant::now();
    let spec = match (preset, spec_path) {
        (Some(p), None) => spec_for(p, seed),
        (None, Some(path)) => {
            let mut spec: SynthSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            spec.seed = seed;
            spec
        }
        _ => {
            return Err(CliError::Other(
                "exactly one of --preset or --spec is required".into(),
            ))
        }
    };
    let (files, _, _) = write_scene(out, &spec)?;
    write_manifest(
        out,
        &RunManifest {
            command: format!("generate --seed {seed}"),
            config_hash: config_hash(&spec),
            seeds: vec![seed],
            inputs: vec![],
            outputs: vec![
                path_str(&files.cube),
                path_str(&files.truth_abundances),
                path_str(&files.endmembers),
                path_str(&files.spec),
            ],
            tool_version: TOOL_VERSION.to_string(),
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(())
}

fn cmd_train(
    cube_path: &Path,
    endmembers: usize,
    seed: u64,
    out: &Path,
    overrides: &TrainOverrides,
) -> Result<(), CliError> {
    let start = Instant::now();
    let config = overrides.resolve(Some(seed))?;
    let cube = read_cube(cube_path)?;
    let (model, log) = crate::mild::train(&cube, endmembers, &config)?;
    let meta = ModelMeta {
        t_count: cube.t_count(),
        bands: cube.bands(),
        endmember_count: endmembers,
        k: config.k,
        height: cube.height(),
        width: cube.width(),
        config: config.clone(),
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_model(out, &model, &meta)?;
    eprintln!(
        "trained {} epochs: loss {:.6} -> {:.6}",
        config.epochs,
        log.per_epoch_loss.first().unwrap_or(&f64::NAN),
        log.per_epoch_loss.last().unwrap_or(&f64::NAN)
    );
    write_manifest(
        out,
        &RunManifest {
            command: format!("train --endmembers {endmembers} --seed {seed}"),
            config_hash: config_hash(&config),
            seeds: vec![config.seed],
            inputs: vec![path_str(cube_path)],
            outputs: vec![path_str(out), path_str(&sidecar_path(out))],
            tool_version: TOOL_VERSION.to_string(),
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(())
}

fn write_endmember_outputs(
    base: &Path,
    set: &EndmemberSet,
) -> Result<Vec<PathBuf>, CliError> {
    let mut written = vec![base.to_path_buf()];
    write_endmember_csv(base, set.reference(), set.bands())?;
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "endmembers".to_string());
    for t in 0..set.t_count() {
        let path = base.with_file_name(format!("{stem}.t{:02}.csv", t + 1));
        write_endmember_csv(&path, set.at_time(t), set.bands())?;
        written.push(path);
    }
    Ok(written)
}

fn cmd_unmix(
    model_path: &Path,
    cube_path: &Path,
    out: &Path,
    endmembers_out: Option<&Path>,
) -> Result<(), CliError> {
    let start = Instant::now();
    let (model, _) = load_model(model_path)?;
    let cube = read_cube(cube_path)?;
    let abundances = model.infer_abundance(&cube)?;
    write_abundance(out, &abundances)?;
    let mut outputs = vec![path_str(out)];
    if let Some(e_path) = endmembers_out {
        for p in write_endmember_outputs(e_path, &model.endmembers())? {
            outputs.push(path_str(&p));
        }
    }
    write_manifest(
        out,
        &RunManifest {
            command: "unmix".to_string(),
            config_hash: config_hash(&path_str(model_path)),
            seeds: vec![],
            inputs: vec![path_str(model_path), path_str(cube_path)],
            outputs,
            tool_version: TOOL_VERSION.to_string(),
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(())
}

fn cmd_baseline_fcls(cube_path: &Path, endmembers: &Path, out: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    let cube = read_cube(cube_path)?;
    let (values, rows, bands) = read_endmember_csv(endmembers)?;
    if bands != cube.bands() {
        return Err(CliError::Other(format!(
            "endmember CSV has {bands} bands, cube has {}",
            cube.bands()
        )));
    }
    let set = EndmemberSet::constant(rows, bands, values, cube.t_count())?;
    let abundances = fcls_stack(&cube, &set)?;
    write_abundance(out, &abundances)?;
    write_manifest(
        out,
        &RunManifest {
            command: "baseline fcls".to_string(),
            config_hash: config_hash(&(path_str(cube_path), path_str(endmembers))),
            seeds: vec![],
            inputs: vec![path_str(cube_path), path_str(endmembers)],
            outputs: vec![path_str(out)],
            tool_version: TOOL_VERSION.to_string(),
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(())
}

/// CSV row block for evaluation results. `wall_time_s = None` keeps the file
/// free of timing noise (used by `pipeline`, whose outputs must be
/// byte-identical across reruns).
fn eval_csv(rows: &[(String, String, u64, &EvalReport)], wall_time_s: Option<f64>) -> String {
    let mut out = String::new();
    if wall_time_s.is_some() {
        out.push_str("dataset,method,seed,nrmse_a,nrmse_y,wall_time_s\n");
    } else {
        out.push_str("dataset,method,seed,nrmse_a,nrmse_y\n");
    }
    for (dataset, method, seed, report) in rows {
        match wall_time_s {
            Some(w) => out.push_str(&format!(
                "{dataset},{method},{seed},{:.9},{:.9},{w:.3}\n",
                report.nrmse_a, report.nrmse_y
            )),
            None => out.push_str(&format!(
                "{dataset},{method},{seed},{:.9},{:.9}\n",
                report.nrmse_a, report.nrmse_y
            )),
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    cube_path: &Path,
    truth_a_path: &Path,
    truth_e_path: &Path,
    est_a_path: &Path,
    est_e_path: &Path,
    dataset: &str,
    method: &str,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let start = Instant::now();
    let cube = read_cube(cube_path)?;
    let truth_a = read_abundance(truth_a_path)?;
    let est_a = read_abundance(est_a_path)?;
    let (tv, tr, tb) = read_endmember_csv(truth_e_path)?;
    let truth_e = EndmemberSet::constant(tr, tb, tv, cube.t_count())?;
    let (ev, er, eb) = read_endmember_csv(est_e_path)?;
    let est_e = EndmemberSet::constant(er, eb, ev, cube.t_count())?;
    let report = evaluate(&truth_a, &truth_e, &est_a, &est_e, &cube)?;
    let csv = eval_csv(
        &[(dataset.to_string(), method.to_string(), seed, &report)],
        Some(start.elapsed().as_secs_f64()),
    );
    std::fs::write(out, csv)?;
    write_manifest(
        out,
        &RunManifest {
            command: format!("evaluate --dataset {dataset} --method {method}"),
            config_hash: config_hash(&(dataset, method, seed)),
            seeds: vec![seed],
            inputs: vec![
                path_str(cube_path),
                path_str(truth_a_path),
                path_str(truth_e_path),
                path_str(est_a_path),
                path_str(est_e_path),
            ],
            outputs: vec![path_str(out)],
            tool_version: TOOL_VERSION.to_string(),
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(())
}

fn cmd_export_maps(
    abundances: &Path,
    height: usize,
    width: usize,
    out: &Path,
) -> Result<(), CliError> {
    let start = Instant::now();
    let a = read_abundance(abundances)?;
    let paths = export_maps(&a, height, width, out)?;
    write_manifest(
        out,
        &RunManifest {
            command: format!("export-maps --height {height} --width {width}"),
            config_hash: config_hash(&(height, width)),
            seeds: vec![],
            inputs: vec![path_str(abundances)],
            outputs: paths.iter().map(|p| path_str(p)).collect(),
            tool_version: TOOL_VERSION.to_string(),
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(())
}

/// Exit status plus whether every theorem check passed.
fn cmd_verify(
    model_path: Option<&Path>,
    cube_path: Option<&Path>,
    report_path: &Path,
) -> Result<bool, CliError> {
    let start = Instant::now();
    // A model failure must not suppress the analytic checks or the report.
    let mut load_error: Option<CliError> = None;
    let trained: Option<(MildModel, SequenceCube)> = match model_path {
        None => None,
        Some(path) => match load_model(path) {
            Err(e) => {
                load_error = Some(e);
                None
            }
            Ok((model, meta)) => {
                let cube = match cube_path {
                    Some(c) => read_cube(c)?,
                    None => {
                        // deterministic probe scene matching the model dims
                        let spec = SynthSpec {
                            preset: Preset::Custom,
                            t_count: meta.t_count,
                            height: 8,
                            width: 8,
                            bands: meta.bands,
                            endmember_count: meta.endmember_count,
                            snr_db: Some(30.0),
                            scale_range: (0.9, 1.1),
                            mutation_times: vec![],
                            seed: 0,
                        };
                        generate(&spec)?.0
                    }
                };
                Some((model, cube))
            }
        },
    };
    let report = dyncheck::verify_all(trained.as_ref().map(|(m, c)| (m, c)))?;
    write_json_atomic(report_path, &report)?;
    for check in &report.truncation {
        println!(
            "truncation {}: {} ({:?})",
            check.problem,
            if check.pass { "pass" } else { "FAIL" },
            check.slope
        );
    }
    for check in &report.convergence {
        println!(
            "convergence {}: {} (gaps {:?})",
            check.problem,
            if check.pass { "pass" } else { "FAIL" },
            check.gaps
        );
    }
    for check in &report.stability {
        println!(
            "stability {}: {} (ratio {:.6} <= bound {:.6})",
            check.label,
            if check.pass { "pass" } else { "FAIL" },
            check.ratio,
            check.bound
        );
    }
    write_manifest(
        report_path,
        &RunManifest {
            command: "verify-theorems".to_string(),
            config_hash: config_hash(&"verify-theorems"),
            seeds: vec![],
            inputs: model_path.map(|p| vec![path_str(p)]).unwrap_or_default(),
            outputs: vec![path_str(report_path)],
            tool_version: TOOL_VERSION.to_string(),
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    )?;
    if let Some(e) = load_error {
        return Err(e);
    }
    Ok(report.pass)
}

/// Everything `pipeline` produces, for callers that want the numbers too.
pub struct PipelineOutcome {
    pub fcls: EvalReport,
    pub mild: EvalReport,
    pub metrics_csv: PathBuf,
    pub checkpoint: PathBuf,
}

/// End-to-end experiment on one preset and seed. Training and the baseline
/// consume the f32-quantized cube, exactly as a staged `generate`-then-`train`
/// run would read it back from disk.
pub fn run_pipeline(
    preset: PresetArg,
    seed: u64,
    out: &Path,
    overrides: &TrainOverrides,
) -> Result<PipelineOutcome, CliError> {
    let start = Instant::now();
    let spec = spec_for(preset, seed);
    let dataset = match preset {
        PresetArg::Synth1 => "synth1",
        PresetArg::Synth2 => "synth2",
    };
    let (files, cube, truth) = write_scene(out, &spec)?;
    let cube = cube.quantized();
    let config = overrides.resolve(Some(seed))?;

    // Shared VCA initialization: the baseline solves against exactly the
    // endmembers the model starts from.
    let p = spec.endmember_count;
    let init = vca(&cube, p, config.seed)?;
    let vca_set = EndmemberSet::constant(p, cube.bands(), init.endmembers.clone(), cube.t_count())?;

    let fcls_abundances = fcls_stack(&cube, &vca_set)?;
    let fcls_a_path = out.join("fcls.hsa");
    write_abundance(&fcls_a_path, &fcls_abundances)?;

    let mut model = MildModel::new(cube.t_count(), cube.bands(), p, config.k, config.seed)?;
    model.set_reference_endmembers(&init.endmembers)?;
    let log = train_with_init(&cube, &config, &mut model)?;
    eprintln!(
        "{dataset} seed {seed}: trained {} epochs, loss {:.6} -> {:.6}",
        config.epochs,
        log.per_epoch_loss.first().unwrap_or(&f64::NAN),
        log.per_epoch_loss.last().unwrap_or(&f64::NAN)
    );

    let checkpoint = out.join("model.mldp");
    save_model(
        &checkpoint,
        &model,
        &ModelMeta {
            t_count: cube.t_count(),
            bands: cube.bands(),
            endmember_count: p,
            k: config.k,
            height: cube.height(),
            width: cube.width(),
            config: config.clone(),
        },
    )?;

    let mild_abundances = model.infer_abundance(&cube)?;
    let mild_a_path = out.join("mild.hsa");
    write_abundance(&mild_a_path, &mild_abundances)?;
    let mild_endmembers = model.endmembers();
    write_endmember_outputs(&out.join("mild_endmembers.csv"), &mild_endmembers)?;

    let fcls_report = evaluate(
        &truth.abundances,
        &truth.endmembers,
        &fcls_abundances,
        &vca_set,
        &cube,
    )?;
    let mild_report = evaluate(
        &truth.abundances,
        &truth.endmembers,
        &mild_abundances,
        &mild_endmembers,
        &cube,
    )?;

    let metrics_csv = out.join("metrics.csv");
    let csv = eval_csv(
        &[
            (dataset.to_string(), "fcls".to_string(), seed, &fcls_report),
            (dataset.to_string(), "mild".to_string(), seed, &mild_report),
        ],
        None,
    );
    std::fs::write(&metrics_csv, csv)?;

    export_maps(
        &truth.abundances,
        cube.height(),
        cube.width(),
        &out.join("maps").join("truth"),
    )?;
    export_maps(
        &fcls_abundances,
        cube.height(),
        cube.width(),
        &out.join("maps").join("fcls"),
    )?;
    export_maps(
        &mild_abundances,
        cube.height(),
        cube.width(),
        &out.join("maps").join("mild"),
    )?;

    println!(
        "{dataset},fcls,{seed},{:.6},{:.6}",
        fcls_report.nrmse_a, fcls_report.nrmse_y
    );
    println!(
        "{dataset},mild,{seed},{:.6},{:.6}",
        mild_report.nrmse_a, mild_report.nrmse_y
    );

    write_manifest(
        out,
        &RunManifest {
            command: format!("pipeline --preset {dataset} --seed {seed}"),
            config_hash: config_hash(&(&spec, &config)),
            seeds: vec![seed],
            inputs: vec![],
            outputs: vec![
                path_str(&files.cube),
                path_str(&files.truth_abundances),
                path_str(&files.endmembers),
                path_str(&files.spec),
                path_str(&fcls_a_path),
                path_str(&mild_a_path),
                path_str(&checkpoint),
                path_str(&metrics_csv),
            ],
            tool_version: TOOL_VERSION.to_string(),
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(PipelineOutcome {
        fcls: fcls_report,
        mild: mild_report,
        metrics_csv,
        checkpoint,
    })
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Run a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    if cli.threads > 0 {
        // ignore failure: the global pool may already exist in-process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let outcome: Result<bool, CliError> = match &cli.command {
        Command::Generate {
            preset,
            spec,
            seed,
            out,
        } => cmd_generate(*preset, spec.as_deref(), *seed, out).map(|_| true),
        Command::Train {
            cube,
            endmembers,
            seed,
            out,
            overrides,
        } => cmd_train(cube, *endmembers, *seed, out, overrides).map(|_| true),
        Command::Unmix {
            model,
            cube,
            out,
            endmembers_out,
        } => cmd_unmix(model, cube, out, endmembers_out.as_deref()).map(|_| true),
        Command::Baseline { method } => match method {
            BaselineMethod::Fcls {
                cube,
                endmembers,
                out,
            } => cmd_baseline_fcls(cube, endmembers, out).map(|_| true),
        },
        Command::Evaluate {
            cube,
            truth_abundances,
            truth_endmembers,
            est_abundances,
            est_endmembers,
            dataset,
            method,
            seed,
            out,
        } => cmd_evaluate(
            cube,
            truth_abundances,
            truth_endmembers,
            est_abundances,
            est_endmembers,
            dataset,
            method,
            *seed,
            out,
        )
        .map(|_| true),
        Command::VerifyTheorems {
            model,
            cube,
            report,
        } => cmd_verify(model.as_deref(), cube.as_deref(), report),
        Command::Pipeline {
            preset,
            seed,
            out,
            overrides,
        } => run_pipeline(*preset, *seed, out, overrides).map(|_| true),
        Command::ExportMaps {
            abundances,
            height,
            width,
            out,
        } => cmd_export_maps(abundances, *height, *width, out).map(|_| true),
    };
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = TrainConfig::default();
        let mut b = TrainConfig::default();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.lr = 2e-3;
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn overrides_beat_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"epochs": 17, "lr": 0.5}"#).unwrap();
        let overrides = TrainOverrides {
            config: Some(path),
            epochs: Some(3),
            lr: None,
            alpha: None,
            beta: None,
            k: None,
            batch_pixels: None,
        };
        let config = overrides.resolve(Some(9)).unwrap();
        assert_eq!(config.epochs, 3); // flag wins
        assert_eq!(config.lr, 0.5); // file survives where no flag given
        assert_eq!(config.seed, 9);
        assert_eq!(config.k, 2); // default fills the rest
    }

    #[test]
    fn eval_csv_layouts() {
        let report = EvalReport {
            nrmse_a: 0.25,
            nrmse_y: 0.0625,
            per_time_a: vec![],
            per_time_y: vec![],
            alignment: vec![0, 1],
        };
        let deterministic = eval_csv(&[("d".into(), "m".into(), 7, &report)], None);
        assert_eq!(
            deterministic,
            "dataset,method,seed,nrmse_a,nrmse_y\nd,m,7,0.250000000,0.062500000\n"
        );
        let timed = eval_csv(&[("d".into(), "m".into(), 7, &report)], Some(1.5));
        assert!(timed.starts_with("dataset,method,seed,nrmse_a,nrmse_y,wall_time_s\n"));
        assert!(timed.contains(",1.500\n"));
    }

    #[test]
    fn manifest_lands_next_to_file_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("result.hsa");
        std::fs::write(&target, b"x").unwrap();
        let manifest = RunManifest {
            command: "test".into(),
            config_hash: "0".into(),
            seeds: vec![1],
            inputs: vec![],
            outputs: vec![],
            tool_version: TOOL_VERSION.into(),
            wall_time_s: 0.0,
        };
        write_manifest(&target, &manifest).unwrap();
        assert!(dir.path().join("result.hsa.manifest.json").exists());
        write_manifest(dir.path(), &manifest).unwrap();
        assert!(dir.path().join("manifest.json").exists());
    }
}
