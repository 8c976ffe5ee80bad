//! Experiment configuration: `key = value` text with optional `[section]`
//! headers, overridden by command-line flags.
//!
//! Every key has one home section. Keys may appear before any header, or
//! under their own section; a key under a foreign section is rejected.

use std::path::{Path, PathBuf};

use fedre_core::attack::AttackConfig;
use fedre_core::datagen::DatasetSpec;
use fedre_core::federation::{
    Aggregation, PsiSettings, ServerScoring, TrainConfig, DEFAULT_ALPHA_FLOOR,
};
use fedre_core::nn::{Architecture, DEFAULT_FD_STEP};
use fedre_core::privacy::{Allocation, PrivacySpec, DEFAULT_S_FLOOR};
use fedre_core::sensitivity::DEFAULT_MAX_SAMPLES;
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// The only environment variable consulted: default output directory.
pub const OUTPUT_DIR_ENV: &str = "FEDRE_OUTPUT_DIR";

/// `(section, key)` for every accepted key. The empty section is "general".
pub const KEYS: &[(&str, &str)] = &[
    ("", "seed"),
    ("", "output_dir"),
    ("dataset", "dataset"),
    ("dataset", "n_samples"),
    ("dataset", "height"),
    ("dataset", "width"),
    ("dataset", "tamper_size"),
    ("dataset", "psi_count"),
    ("dataset", "psi_size"),
    ("dataset", "noise_amplitude"),
    ("dataset", "texture_seed"),
    ("federation", "architecture"),
    ("federation", "clients"),
    ("federation", "client_fraction"),
    ("federation", "rounds"),
    ("federation", "lr"),
    ("federation", "aggregation"),
    ("federation", "server_scoring"),
    ("federation", "public_per_format"),
    ("federation", "test_fraction"),
    ("federation", "alpha_floor"),
    ("privacy", "epsilon"),
    ("privacy", "delta"),
    ("privacy", "clip"),
    ("privacy", "s_floor"),
    ("privacy", "allocation"),
    ("psi", "max_samples"),
    ("psi", "psi_fd_step"),
    ("attack", "attack_iterations"),
    ("attack", "attack_step"),
    ("attack", "attack_seed"),
    ("attack", "attack_fd_step"),
    ("attack", "attack_clip"),
    ("attack", "attack_box"),
    ("attack", "attack_sample"),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackSettings {
    pub iterations: usize,
    pub step_size: f64,
    pub seed: u64,
    pub fd_step: f64,
    /// The attacker mirrors the client's per-layer clipping.
    pub mirror_clip: bool,
    pub box_constraint: bool,
    /// Index of the attacked sample in the sample file.
    pub sample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Explicit `output_dir`; see [`ExperimentConfig::output_dir`].
    pub output_dir: Option<PathBuf>,
    /// Dataset file to train on instead of generating one.
    pub dataset_path: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub model: Architecture,
    pub clients: usize,
    pub client_fraction: f64,
    pub rounds: usize,
    pub lr: f64,
    pub aggregation: Aggregation,
    pub server_scoring: ServerScoring,
    pub public_per_format: usize,
    pub test_fraction: f64,
    pub alpha_floor: f64,
    pub epsilon: f64,
    pub delta: f64,
    /// One shared threshold, or one per parameterized layer.
    pub clip: Vec<f64>,
    pub s_floor: f64,
    pub allocation: Allocation,
    pub psi: PsiSettings,
    pub attack: AttackSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let attack = AttackConfig::default();
        ExperimentConfig {
            seed: 0,
            output_dir: None,
            dataset_path: None,
            dataset: DatasetSpec::default(),
            model: Architecture::Segmentation,
            clients: 4,
            client_fraction: 1.0,
            rounds: 15,
            lr: fedre_core::federation::DEFAULT_LR,
            aggregation: Aggregation::Pda,
            server_scoring: ServerScoring::Public,
            public_per_format: 5,
            test_fraction: 0.2,
            alpha_floor: DEFAULT_ALPHA_FLOOR,
            epsilon: 10.0,
            delta: 1e-5,
            clip: vec![fedre_core::federation::DEFAULT_CLIP],
            s_floor: DEFAULT_S_FLOOR,
            allocation: Allocation::Psi,
            psi: PsiSettings {
                max_samples: DEFAULT_MAX_SAMPLES,
                fd_step: DEFAULT_FD_STEP,
            },
            attack: AttackSettings {
                iterations: attack.iterations,
                step_size: attack.step_size,
                seed: attack.seed,
                fd_step: attack.fd_step,
                mirror_clip: true,
                box_constraint: attack.box_constraint,
                sample: 0,
            },
        }
    }
}

/// One `key = value` assignment and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub key: String,
    pub value: String,
    /// 1-based line in the config file; `None` for flags.
    pub line: Option<usize>,
}

impl Assignment {
    pub fn flag(key: &str, value: impl Into<String>) -> Self {
        Assignment {
            key: key.to_string(),
            value: value.into(),
            line: None,
        }
    }

    fn err(&self, message: impl Into<String>) -> CliError {
        CliError::Config {
            line: self.line,
            key: self.key.clone(),
            message: message.into(),
        }
    }
}

fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(_, k)| *k == key).map(|(s, _)| *s)
}

/// Splits config text into assignments. Comments start with `#` or `;`.
pub fn parse_text(text: &str) -> CliResult<Vec<Assignment>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let syntax = |m: String| CliError::Config {
            line: Some(line_no),
            key: String::new(),
            message: m,
        };
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| syntax(format!("unterminated section header {line:?}")))?
                .trim();
            if !KEYS.iter().any(|(s, _)| !s.is_empty() && *s == name) {
                return Err(syntax(format!("unknown section [{name}]")));
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| syntax(format!("expected key = value, got {line:?}")))?;
        let key = key.trim().replace('-', "_");
        let a = Assignment {
            key: key.clone(),
            value: value.trim().to_string(),
            line: Some(line_no),
        };
        match section_of(&key) {
            None => return Err(a.err("unknown key")),
            Some(home) if !section.is_empty() && home != section => {
                let home = if home.is_empty() { "general" } else { home };
                return Err(a.err(format!("belongs to [{home}], found under [{section}]")));
            }
            Some(_) => out.push(a),
        }
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(a: &Assignment) -> CliResult<T> {
    a.value.parse().map_err(|_| {
        a.err(format!(
            "cannot parse {:?} as a {}",
            a.value,
            short_type::<T>()
        ))
    })
}

fn short_type<T>() -> &'static str {
    let name = std::any::type_name::<T>();
    match name {
        "f64" => "number",
        "bool" => "boolean",
        _ => "non-negative integer",
    }
}

/// Accepts `inf` / `infinity` as well as ordinary numbers.
fn real(a: &Assignment) -> CliResult<f64> {
    match a.value.to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "+inf" => Ok(f64::INFINITY),
        _ => {
            let v: f64 = num(a)?;
            if v.is_nan() {
                return Err(a.err("NaN is not allowed"));
            }
            Ok(v)
        }
    }
}

fn range(a: &Assignment) -> CliResult<(usize, usize)> {
    let parts: Vec<&str> = a.value.split(',').map(str::trim).collect();
    let p = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| a.err(format!("cannot parse {s:?} as a non-negative integer")))
    };
    match parts.as_slice() {
        [v] => p(v).map(|v| (v, v)),
        [lo, hi] => Ok((p(lo)?, p(hi)?)),
        _ => Err(a.err("expected `n` or `lo,hi`")),
    }
}

fn parsed<T: std::str::FromStr<Err = String>>(a: &Assignment) -> CliResult<T> {
    a.value.parse().map_err(|e: String| a.err(e))
}

impl ExperimentConfig {
    /// Applies assignments in order; later ones win.
    pub fn apply(&mut self, assignments: &[Assignment]) -> CliResult<()> {
        for a in assignments {
            self.set(a)?;
        }
        Ok(())
    }

    fn set(&mut self, a: &Assignment) -> CliResult<()> {
        let d = &mut self.dataset;
        match a.key.as_str() {
            "seed" => self.seed = num(a)?,
            "output_dir" => self.output_dir = Some(PathBuf::from(&a.value)),
            "dataset" => {
                self.dataset_path = if a.value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(&a.value))
                }
            }
            "n_samples" => d.n_samples = num(a)?,
            "height" => d.height = num(a)?,
            "width" => d.width = num(a)?,
            "tamper_size" => d.tamper_size = range(a)?,
            "psi_count" => d.psi_count = range(a)?,
            "psi_size" => d.psi_size = range(a)?,
            "noise_amplitude" => d.noise_amplitude = real(a)?,
            "texture_seed" => d.texture_seed = num(a)?,
            "architecture" => self.model = parsed(a)?,
            "clients" => self.clients = num(a)?,
            "client_fraction" => self.client_fraction = real(a)?,
            "rounds" => self.rounds = num(a)?,
            "lr" => self.lr = real(a)?,
            "aggregation" => self.aggregation = parsed(a)?,
            "server_scoring" => {
                self.server_scoring = match a.value.as_str() {
                    "public" => ServerScoring::Public,
                    "uniform" => ServerScoring::Uniform,
                    v => {
                        return Err(
                            a.err(format!("unknown scoring {v:?}, expected public or uniform"))
                        )
                    }
                }
            }
            "public_per_format" => self.public_per_format = num(a)?,
            "test_fraction" => self.test_fraction = real(a)?,
            "alpha_floor" => self.alpha_floor = real(a)?,
            "epsilon" => self.epsilon = real(a)?,
            "delta" => self.delta = real(a)?,
            "clip" => {
                self.clip = a
                    .value
                    .split(',')
                    .map(|v| {
                        let one = Assignment {
                            value: v.trim().to_string(),
                            ..a.clone()
                        };
                        real(&one)
                    })
                    .collect::<CliResult<_>>()?
            }
            "s_floor" => self.s_floor = real(a)?,
            "allocation" => self.allocation = parsed(a)?,
            "max_samples" => self.psi.max_samples = num(a)?,
            "psi_fd_step" => self.psi.fd_step = real(a)?,
            "attack_iterations" => self.attack.iterations = num(a)?,
            "attack_step" => self.attack.step_size = real(a)?,
            "attack_seed" => self.attack.seed = num(a)?,
            "attack_fd_step" => self.attack.fd_step = real(a)?,
            "attack_clip" => self.attack.mirror_clip = num(a)?,
            "attack_box" => self.attack.box_constraint = num(a)?,
            "attack_sample" => self.attack.sample = num(a)?,
            _ => return Err(a.err("unknown key")),
        }
        Ok(())
    }

    /// Layer count of the configured architecture.
    pub fn layer_count(&self) -> usize {
        // Both architectures have two parameterized layers, but ask the model
        // so a new architecture cannot silently disagree.
        self.model
            .build(self.dataset.height.max(1), self.dataset.width.max(1), 0)
            .map(|m| m.layer_count())
            .unwrap_or(2)
    }

    /// Per-layer thresholds, expanding a single shared value.
    pub fn clip_per_layer(&self) -> Vec<f64> {
        if self.clip.len() == 1 {
            vec![self.clip[0]; self.layer_count()]
        } else {
            self.clip.clone()
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Validation(m));
        if self.dataset_path.is_none() {
            self.dataset
                .validate()
                .map_err(|e| CliError::Validation(e.to_string()))?;
        }
        let layers = self.layer_count();
        if self.clip.is_empty() || (self.clip.len() != 1 && self.clip.len() != layers) {
            return bad(format!(
                "clip has {} thresholds but the {} model has {layers} parameterized layers",
                self.clip.len(),
                self.model
            ));
        }
        if self.clients == 0 {
            return bad("clients must be at least 1".into());
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return bad(format!(
                "client_fraction {} outside (0, 1]",
                self.client_fraction
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive and finite", self.lr));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!(
                "test_fraction {} outside (0, 1)",
                self.test_fraction
            ));
        }
        if !(self.alpha_floor > 0.0 && self.alpha_floor <= 1.0) {
            return bad(format!("alpha_floor {} outside (0, 1]", self.alpha_floor));
        }
        if self.psi.max_samples == 0 {
            return bad("max_samples must be at least 1".into());
        }
        if !(self.psi.fd_step > 0.0 && self.psi.fd_step.is_finite()) {
            return bad(format!("psi_fd_step {} must be positive", self.psi.fd_step));
        }
        self.privacy_spec()
            .validate(layers)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.attack_config()
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        if let Some(p) = &self.dataset_path {
            if !p.is_file() {
                return bad(format!("dataset file {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    pub fn privacy_spec(&self) -> PrivacySpec {
        PrivacySpec {
            epsilon: self.epsilon,
            delta: self.delta,
            rounds: self.rounds.max(1),
            clip: self.clip_per_layer(),
            s_floor: self.s_floor,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            dataset: self.dataset.clone(),
            model: self.model,
            clients: self.clients,
            client_fraction: self.client_fraction,
            rounds: self.rounds,
            lr: self.lr,
            epsilon: self.epsilon,
            delta: self.delta,
            clip: self.clip_per_layer(),
            s_floor: self.s_floor,
            allocation: self.allocation,
            aggregation: self.aggregation,
            server_scoring: self.server_scoring,
            psi: self.psi,
            public_per_format: self.public_per_format,
            test_fraction: self.test_fraction,
            alpha_floor: self.alpha_floor,
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            iterations: self.attack.iterations,
            step_size: self.attack.step_size,
            seed: self.attack.seed,
            fd_step: self.attack.fd_step,
            clip: self.attack.mirror_clip.then(|| self.clip_per_layer()),
            box_constraint: self.attack.box_constraint,
        }
    }

    /// `output_dir` if set, else `$FEDRE_OUTPUT_DIR`, else `./fedre-out`.
    pub fn output_dir(&self) -> PathBuf {
        if let Some(p) = &self.output_dir {
            return p.clone();
        }
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from("fedre-out"),
        }
    }
}

/// Defaults, then the file (if any), then flag overrides; validated.
pub fn parse_config(path: Option<&Path>, overrides: &[Assignment]) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
        cfg.apply(&parse_text(&text)?)?;
    }
    cfg.apply(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}
