//! Sweep reports: one run directory per cell, comparison tables across cells.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fedre_core::federation::Aggregation;
use serde::Deserialize;

use crate::commands::{
    cmd_attack_into, cmd_train_into, ensure_dir, fmt_f64, io_err, write_file, ATTACK_JSON,
    HISTORY_CSV, MODEL_FILE, PSI_CSV, TEST_FILE,
};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const UTILITY_CSV: &str = "utility_vs_epsilon.csv";
pub const DEFENSE_CSV: &str = "defense_vs_epsilon.csv";
pub const GAIN_CSV: &str = "pda_gain_vs_k.csv";
pub const CLIP_CSV: &str = "iou_vs_clip.csv";
pub const REPORT_PSI_CSV: &str = "psi.csv";

/// Axes of a sweep. Every combination is one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub epsilons: Vec<f64>,
    pub clients: Vec<usize>,
    pub aggregations: Vec<Aggregation>,
    /// Shared per-layer thresholds.
    pub clips: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Also require (or run) an attack per cell.
    pub attack: bool,
}

impl Sweep {
    /// The single cell described by `cfg` itself.
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Sweep {
            epsilons: vec![cfg.epsilon],
            clients: vec![cfg.clients],
            aggregations: vec![cfg.aggregation],
            clips: vec![cfg.clip[0]],
            seeds: vec![cfg.seed],
            attack: false,
        }
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &epsilon in &self.epsilons {
            for &clients in &self.clients {
                for &aggregation in &self.aggregations {
                    for &clip in &self.clips {
                        for &seed in &self.seeds {
                            out.push(Cell {
                                epsilon,
                                clients,
                                aggregation,
                                clip,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub epsilon: f64,
    pub clients: usize,
    pub aggregation: Aggregation,
    pub clip: f64,
    pub seed: u64,
}

fn label(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!(
            "eps-{}_k-{}_{}_clip-{}_seed-{}",
            label(self.epsilon),
            self.clients,
            self.aggregation,
            label(self.clip),
            self.seed
        )
    }

    pub fn config(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.epsilon = self.epsilon;
        cfg.clients = self.clients;
        cfg.aggregation = self.aggregation;
        cfg.clip = vec![self.clip];
        cfg.seed = self.seed;
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellResult {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub attack: Option<(f64, f64, f64)>,
}

#[derive(Debug, Deserialize)]
struct HistoryRow {
    iou: f64,
    precision: f64,
    recall: f64,
    f_score: f64,
}

#[derive(Debug, Deserialize)]
struct PsiRow {
    layer: usize,
    s_l: f64,
}

#[derive(Debug, Deserialize)]
struct AttackRow {
    mse: f64,
    psnr: f64,
    ssim: f64,
}

fn read_last_row(path: &Path) -> CliResult<HistoryRow> {
    let mut r = csv::Reader::from_path(path)?;
    let mut last = None;
    for row in r.deserialize() {
        last = Some(row?);
    }
    last.ok_or_else(|| CliError::Format(format!("{} has no rounds", path.display())))
}

fn read_psi(path: &Path) -> CliResult<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: PsiRow = row?;
        if row.layer != out.len() {
            return Err(CliError::Format(format!(
                "{}: layers out of order",
                path.display()
            )));
        }
        out.push(row.s_l);
    }
    Ok(out)
}

fn read_attack(path: &Path) -> CliResult<(f64, f64, f64)> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let a: AttackRow = serde_json::from_str(&text)?;
    Ok((a.mse, a.ssim, a.psnr))
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| CliError::Format(e.to_string()))
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Total order on configuration values so they can key a `BTreeMap`.
fn key(v: f64) -> u64 {
    let b = v.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub cells: Vec<(Cell, CellResult)>,
}

/// Runs the cells of `sweep` that have no results yet under `runs`.
pub fn execute_sweep(base: &ExperimentConfig, sweep: &Sweep, runs: &Path) -> CliResult<()> {
    for cell in sweep.cells() {
        let dir = runs.join(cell.dir_name());
        let cfg = cell.config(base);
        cfg.validate()?;
        if !dir.join(HISTORY_CSV).is_file() {
            cmd_train_into(&cfg, &dir)?;
        }
        if sweep.attack && !dir.join(ATTACK_JSON).is_file() {
            cmd_attack_into(
                &cfg,
                &dir.join(MODEL_FILE),
                &dir.join(TEST_FILE),
                None,
                &dir,
            )?;
        }
    }
    Ok(())
}

/// Reads every cell under `runs` and writes the comparison tables to `out`.
/// Fails listing every absent cell if the sweep is incomplete.
pub fn cmd_report(sweep: &Sweep, runs: &Path, out: &Path) -> CliResult<Report> {
    let cells = sweep.cells();
    if cells.is_empty() {
        return Err(CliError::Validation("sweep has no cells".into()));
    }
    let mut missing = Vec::new();
    for c in &cells {
        let dir = runs.join(c.dir_name());
        if !dir.join(HISTORY_CSV).is_file() {
            missing.push(format!("{} ({HISTORY_CSV})", c.dir_name()));
        }
        if sweep.attack && !dir.join(ATTACK_JSON).is_file() {
            missing.push(format!("{} ({ATTACK_JSON})", c.dir_name()));
        }
    }
    if !missing.is_empty() {
        return Err(CliError::MissingCells(missing));
    }

    let mut results = Vec::with_capacity(cells.len());
    let mut psi_sum: Vec<f64> = Vec::new();
    let mut psi_n = 0usize;
    for c in &cells {
        let dir = runs.join(c.dir_name());
        let h = read_last_row(&dir.join(HISTORY_CSV))?;
        let attack = if sweep.attack {
            Some(read_attack(&dir.join(ATTACK_JSON))?)
        } else {
            None
        };
        if dir.join(PSI_CSV).is_file() {
            let s = read_psi(&dir.join(PSI_CSV))?;
            if psi_sum.is_empty() {
                psi_sum = vec![0.0; s.len()];
            }
            if s.len() == psi_sum.len() {
                for (a, b) in psi_sum.iter_mut().zip(&s) {
                    *a += b;
                }
                psi_n += 1;
            }
        }
        results.push((
            *c,
            CellResult {
                iou: h.iou,
                precision: h.precision,
                recall: h.recall,
                f_score: h.f_score,
                attack,
            },
        ));
    }

    ensure_dir(out)?;
    let mut files = Vec::new();
    let mut emit = |name: &str, bytes: Vec<u8>| -> CliResult<()> {
        let p = out.join(name);
        write_file(&p, bytes)?;
        files.push(p);
        Ok(())
    };

    // Group over seeds, keyed by (epsilon, aggregation, clients, clip).
    type Group = Vec<CellResult>;
    let mut groups: BTreeMap<(u64, String, usize, u64), (Cell, Group)> = BTreeMap::new();
    for (c, r) in &results {
        groups
            .entry((
                key(c.epsilon),
                c.aggregation.to_string(),
                c.clients,
                key(c.clip),
            ))
            .or_insert_with(|| (*c, Vec::new()))
            .1
            .push(*r);
    }
    let stat =
        |g: &Group, f: &dyn Fn(&CellResult) -> f64| mean_se(&g.iter().map(f).collect::<Vec<_>>());

    let rows = groups
        .values()
        .map(|(c, g)| {
            let (iou, se) = stat(g, &|r| r.iou);
            vec![
                label(c.epsilon),
                c.aggregation.to_string(),
                c.clients.to_string(),
                fmt_f64(c.clip),
                g.len().to_string(),
                fmt_f64(iou),
                fmt_f64(se),
                fmt_f64(stat(g, &|r| r.precision).0),
                fmt_f64(stat(g, &|r| r.recall).0),
                fmt_f64(stat(g, &|r| r.f_score).0),
            ]
        })
        .collect();
    emit(
        UTILITY_CSV,
        csv_bytes(
            &[
                "epsilon",
                "aggregation",
                "clients",
                "clip",
                "seeds",
                "iou",
                "iou_stderr",
                "precision",
                "recall",
                "f_score",
            ],
            rows,
        )?,
    )?;

    let mut by_clip: Vec<&(Cell, Group)> = groups.values().collect();
    by_clip.sort_by_key(|(c, _)| {
        (
            key(c.clip),
            key(c.epsilon),
            c.aggregation.to_string(),
            c.clients,
        )
    });
    let rows = by_clip
        .iter()
        .map(|(c, g)| {
            let (iou, se) = stat(g, &|r| r.iou);
            vec![
                fmt_f64(c.clip),
                label(c.epsilon),
                c.aggregation.to_string(),
                c.clients.to_string(),
                g.len().to_string(),
                fmt_f64(iou),
                fmt_f64(se),
            ]
        })
        .collect();
    emit(
        CLIP_CSV,
        csv_bytes(
            &[
                "clip",
                "epsilon",
                "aggregation",
                "clients",
                "seeds",
                "iou",
                "iou_stderr",
            ],
            rows,
        )?,
    )?;

    if sweep.aggregations.contains(&Aggregation::FedAvg)
        && sweep.aggregations.contains(&Aggregation::Pda)
    {
        let mut rows = Vec::new();
        for (k, (c, g)) in &groups {
            if k.1 != "pda" {
                continue;
            }
            let other = (k.0, "fedavg".to_string(), k.2, k.3);
            let (_, base) = &groups[&other];
            let pda = stat(g, &|r| r.iou).0;
            let avg = stat(base, &|r| r.iou).0;
            rows.push(vec![
                label(c.epsilon),
                fmt_f64(c.clip),
                c.clients.to_string(),
                fmt_f64(avg),
                fmt_f64(pda),
                fmt_f64(pda - avg),
            ]);
        }
        emit(
            GAIN_CSV,
            csv_bytes(
                &[
                    "epsilon",
                    "clip",
                    "clients",
                    "iou_fedavg",
                    "iou_pda",
                    "gain",
                ],
                rows,
            )?,
        )?;
    }

    if sweep.attack {
        let rows = groups
            .values()
            .map(|(c, g)| {
                let a: Vec<(f64, f64, f64)> = g.iter().filter_map(|r| r.attack).collect();
                let mse = mean_se(&a.iter().map(|v| v.0).collect::<Vec<_>>());
                let ssim = mean_se(&a.iter().map(|v| v.1).collect::<Vec<_>>());
                let psnr = mean_se(&a.iter().map(|v| v.2).collect::<Vec<_>>());
                vec![
                    label(c.epsilon),
                    c.aggregation.to_string(),
                    c.clients.to_string(),
                    fmt_f64(c.clip),
                    a.len().to_string(),
                    fmt_f64(mse.0),
                    fmt_f64(mse.1),
                    fmt_f64(ssim.0),
                    fmt_f64(psnr.0),
                ]
            })
            .collect();
        emit(
            DEFENSE_CSV,
            csv_bytes(
                &[
                    "epsilon",
                    "aggregation",
                    "clients",
                    "clip",
                    "seeds",
                    "mse",
                    "mse_stderr",
                    "ssim",
                    "psnr",
                ],
                rows,
            )?,
        )?;
    }

    if psi_n > 0 {
        let rows = psi_sum
            .iter()
            .enumerate()
            .map(|(l, s)| vec![l.to_string(), fmt_f64(s / psi_n as f64)])
            .collect();
        emit(REPORT_PSI_CSV, csv_bytes(&["layer", "s_l"], rows)?)?;
    }

    Ok(Report {
        dir: out.to_path_buf(),
        files,
        cells: results,
    })
}
