//! Subcommand bodies. Each returns what it wrote so callers (and tests) can
//! inspect results without re-reading files.

use std::fs;
use std::path::{Path, PathBuf};

use fedre_core::attack::{assess, invert_gradient, AttackResult};
use fedre_core::datagen::{generate, Sample};
use fedre_core::federation::{run_training_on, simulate_upload, RoundRecord};
use fedre_core::io::{
    load_dataset, load_gradients, load_model, save_dataset, save_gradients, save_model,
};
use fedre_core::rng::derive_seed;
use fedre_core::sensitivity::psi_scores_for_model;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const HISTORY_CSV: &str = "history.csv";
pub const HISTORY_JSON: &str = "history.json";
pub const MODEL_FILE: &str = "model.fedre";
pub const TEST_FILE: &str = "test.fedre";
pub const PSI_CSV: &str = "psi.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const ATTACK_JSON: &str = "attack.json";
pub const RECON_FILE: &str = "recon.fedre";
pub const UPLOAD_FILE: &str = "upload.fedre";
pub const DATASET_FILE: &str = "dataset.fedre";

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.16e}")
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes the corpus a `train` run with the same config would generate.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: Option<&Path>) -> CliResult<PathBuf> {
    let samples = generate(&cfg.dataset, derive_seed(cfg.seed, 1))?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = cfg.output_dir();
            ensure_dir(&dir)?;
            dir.join(DATASET_FILE)
        }
    };
    save_dataset(&samples, &path)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub rounds: usize,
    pub final_iou: Option<f64>,
    pub final_precision: Option<f64>,
    pub final_recall: Option<f64>,
    pub final_f_score: Option<f64>,
    pub final_loss: Option<f64>,
    /// Mean per-layer PSI score of the final model on the public set.
    pub psi: Vec<f64>,
    pub output_dir: PathBuf,
}

pub fn history_csv(history: &[RoundRecord]) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record([
        "round",
        "clients",
        "loss",
        "iou",
        "precision",
        "recall",
        "f_score",
    ])?;
    for r in history {
        let ids: Vec<String> = r.selected.iter().map(|i| i.to_string()).collect();
        w.write_record([
            r.round.to_string(),
            ids.join(";"),
            fmt_f64(r.train_loss),
            fmt_f64(r.metrics.iou),
            fmt_f64(r.metrics.precision),
            fmt_f64(r.metrics.recall),
            fmt_f64(r.metrics.f_score),
        ])?;
    }
    w.into_inner().map_err(|e| CliError::Format(e.to_string()))
}

pub fn psi_csv(scores: &[f64]) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(["layer", "s_l"])?;
    for (l, s) in scores.iter().enumerate() {
        w.write_record([l.to_string(), fmt_f64(*s)])?;
    }
    w.into_inner().map_err(|e| CliError::Format(e.to_string()))
}

fn load_or_generate(cfg: &ExperimentConfig) -> CliResult<Vec<Sample>> {
    Ok(match &cfg.dataset_path {
        Some(p) => load_dataset(p)?,
        None => generate(&cfg.dataset, derive_seed(cfg.seed, 1))?,
    })
}

/// Trains and writes the history (CSV and JSON), the final checkpoint, the
/// held-out samples, per-layer PSI scores and a summary into `dir`.
pub fn cmd_train_into(cfg: &ExperimentConfig, dir: &Path) -> CliResult<TrainSummary> {
    let tc = cfg.train_config();
    let out = run_training_on(&tc, load_or_generate(cfg)?)?;
    ensure_dir(dir)?;
    write_file(&dir.join(HISTORY_CSV), history_csv(&out.history)?)?;
    write_file(
        &dir.join(HISTORY_JSON),
        serde_json::to_vec_pretty(&out.history)?,
    )?;
    save_model(&out.model, dir.join(MODEL_FILE))?;
    save_dataset(&out.federation.test, dir.join(TEST_FILE))?;
    let psi = psi_scores_for_model(
        &out.model,
        &out.federation.public,
        cfg.psi.max_samples,
        cfg.psi.fd_step,
        derive_seed(cfg.seed, 0x951),
    )?
    .per_layer;
    write_file(&dir.join(PSI_CSV), psi_csv(&psi)?)?;
    let last = out.history.last();
    let summary = TrainSummary {
        rounds: out.history.len(),
        final_iou: last.map(|r| r.metrics.iou),
        final_precision: last.map(|r| r.metrics.precision),
        final_recall: last.map(|r| r.metrics.recall),
        final_f_score: last.map(|r| r.metrics.f_score),
        final_loss: last.map(|r| r.train_loss),
        psi,
        output_dir: dir.to_path_buf(),
    };
    write_file(
        &dir.join(SUMMARY_JSON),
        serde_json::to_vec_pretty(&summary)?,
    )?;
    Ok(summary)
}

pub fn cmd_train(cfg: &ExperimentConfig) -> CliResult<TrainSummary> {
    cmd_train_into(cfg, &cfg.output_dir())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub epsilon: f64,
    /// Whether the target gradient was simulated rather than read from a file.
    pub simulated_upload: bool,
    pub sample: usize,
    #[serde(flatten)]
    pub result: AttackResult,
}

/// Inverts an upload of sample `cfg.attack.sample` against `model_path`.
/// Without `gradients`, the protected upload is simulated under the
/// configured privacy settings and saved next to the results.
pub fn cmd_attack_into(
    cfg: &ExperimentConfig,
    model_path: &Path,
    samples_path: &Path,
    gradients: Option<&Path>,
    dir: &Path,
) -> CliResult<AttackReport> {
    let model = load_model(model_path)?;
    let samples = load_dataset(samples_path)?;
    let sample = samples.get(cfg.attack.sample).ok_or_else(|| {
        CliError::Validation(format!(
            "attack_sample {} out of range for {} samples",
            cfg.attack.sample,
            samples.len()
        ))
    })?;
    if sample.psi_regions.is_empty() {
        return Err(CliError::Validation(format!(
            "sample {} has no sensitive regions to score",
            cfg.attack.sample
        )));
    }
    let mut attack = cfg.attack_config();
    if let Some(c) = &attack.clip {
        if c.len() != model.layer_count() {
            attack.clip = Some(vec![c[0]; model.layer_count()]);
        }
    }
    ensure_dir(dir)?;
    let target = match gradients {
        Some(p) => load_gradients(p)?,
        None => {
            let mut spec = cfg.privacy_spec();
            spec.clip = attack
                .clip
                .clone()
                .unwrap_or_else(|| vec![spec.clip[0]; model.layer_count()]);
            let up = simulate_upload(
                &model,
                sample,
                &spec,
                cfg.allocation,
                &cfg.psi,
                derive_seed(cfg.seed, 0xA77A),
            )?;
            save_gradients(&up.gradients, dir.join(UPLOAD_FILE))?;
            up.gradients
        }
    };
    let recon = invert_gradient(&model, &target, &sample.tamper_mask, &attack)?;
    let result = assess(&recon, &sample.image, &sample.psi_regions)?;
    let dump = Sample {
        image: result.reconstructed.clone(),
        ..sample.clone()
    };
    save_dataset(&[dump], dir.join(RECON_FILE))?;
    let report = AttackReport {
        epsilon: cfg.epsilon,
        simulated_upload: gradients.is_none(),
        sample: cfg.attack.sample,
        result,
    };
    write_file(&dir.join(ATTACK_JSON), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

pub fn cmd_attack(
    cfg: &ExperimentConfig,
    model_path: &Path,
    samples_path: &Path,
    gradients: Option<&Path>,
) -> CliResult<AttackReport> {
    cmd_attack_into(cfg, model_path, samples_path, gradients, &cfg.output_dir())
}
