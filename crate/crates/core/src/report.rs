//! Aggregation of several training runs into phase tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::checkpoint::{put_backbone, put_head, Checkpoint};
use crate::error::{Error, Result};
use crate::ppo::{EvalRecord, TrainRun, UpdateMetrics};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVALS_FILE: &str = "evals.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.btrl";

/// Training windows as fractions of the update sequence.
pub const PHASES: [(&str, f64, f64); 3] = [
    ("initial (0-20%)", 0.0, 0.2),
    ("middle (40-60%)", 0.4, 0.6),
    ("final (80-100%)", 0.8, 1.0),
];

/// Logged history of one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunRecord {
    pub name: String,
    pub metrics: Vec<UpdateMetrics>,
    pub evals: Vec<EvalRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation; zero for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> MeanStd {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanStd {
            mean,
            std: var.sqrt(),
        }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let p = f.precision().unwrap_or(3);
        write!(f, "{:.p$} ± {:.p$}", self.mean, self.std)
    }
}

/// Per-run statistics of one window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseStats {
    pub entropy: f64,
    pub value_loss: f64,
    /// Variance of the pre-clip gradient norm over the window.
    pub grad_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseRow {
    pub phase: String,
    pub entropy: MeanStd,
    pub value_loss: MeanStd,
    pub grad_variance: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub runs: usize,
    pub final_return: MeanStd,
    pub best_return: MeanStd,
    pub phases: Vec<PhaseRow>,
}

/// Backbone, policy head and critic heads of a finished run.
pub fn run_checkpoint(run: &TrainRun) -> Checkpoint {
    let mut ck = Checkpoint::default();
    put_backbone(&mut ck, &run.model);
    put_head(&mut ck, "policy", &run.policy);
    for (i, head) in run.critic.heads.iter().enumerate() {
        put_head(&mut ck, &format!("critic{i}"), head);
    }
    ck.meta.insert("env".into(), run.env.name().into());
    ck.meta
        .insert("critic_mode".into(), run.config.critic_mode.to_string());
    ck.meta.insert("seed".into(), run.config.seed.to_string());
    ck
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

/// Writes the metric logs and checkpoint of `run` into `dir`.
pub fn write_run(dir: &Path, run: &TrainRun) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(METRICS_FILE), jsonl(&run.metrics))?;
    fs::write(dir.join(EVALS_FILE), jsonl(&run.evals))?;
    run_checkpoint(run).save(&dir.join(CHECKPOINT_FILE))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

/// Reads the logs written by [`write_run`].
pub fn read_run(dir: &Path) -> Result<RunRecord> {
    Ok(RunRecord {
        name: dir.display().to_string(),
        metrics: read_jsonl(&dir.join(METRICS_FILE))?,
        evals: read_jsonl(&dir.join(EVALS_FILE))?,
    })
}

/// Update indices covered by the window `[lo, hi]`; never empty.
pub fn window(n: usize, lo: f64, hi: f64) -> std::ops::Range<usize> {
    let start = ((lo * n as f64).floor() as usize).min(n.saturating_sub(1));
    let end = ((hi * n as f64).ceil() as usize).clamp(start + 1, n.max(1));
    start..end
}

pub fn phase_stats(metrics: &[UpdateMetrics], lo: f64, hi: f64) -> PhaseStats {
    let w = &metrics[window(metrics.len(), lo, hi)];
    let col = |f: fn(&UpdateMetrics) -> f64| w.iter().map(f).collect::<Vec<_>>();
    let g = MeanStd::of(&col(|m| m.grad_norm));
    PhaseStats {
        entropy: MeanStd::of(&col(|m| m.entropy)).mean,
        value_loss: MeanStd::of(&col(|m| m.value_loss)).mean,
        grad_variance: g.std * g.std,
    }
}

pub fn summarize(runs: &[RunRecord]) -> Result<Summary> {
    if runs.is_empty() {
        return Err(Error::Invalid("no runs to summarize".into()));
    }
    for r in runs {
        if r.metrics.is_empty() || r.evals.is_empty() {
            return Err(Error::Invalid(format!(
                "run `{}` has no updates or evaluations",
                r.name
            )));
        }
    }
    let finals: Vec<f64> = runs
        .iter()
        .map(|r| r.evals.last().unwrap().mean_return)
        .collect();
    let bests: Vec<f64> = runs
        .iter()
        .map(|r| {
            r.evals
                .iter()
                .map(|e| e.mean_return)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let phases = PHASES
        .iter()
        .map(|&(name, lo, hi)| {
            let stats: Vec<PhaseStats> = runs
                .iter()
                .map(|r| phase_stats(&r.metrics, lo, hi))
                .collect();
            let col =
                |f: fn(&PhaseStats) -> f64| MeanStd::of(&stats.iter().map(f).collect::<Vec<_>>());
            PhaseRow {
                phase: name.to_string(),
                entropy: col(|s| s.entropy),
                value_loss: col(|s| s.value_loss),
                grad_variance: col(|s| s.grad_variance),
            }
        })
        .collect();
    Ok(Summary {
        runs: runs.len(),
        final_return: MeanStd::of(&finals),
        best_return: MeanStd::of(&bests),
        phases,
    })
}

impl Summary {
    /// Plain-text table, one row per phase.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "runs: {}", self.runs);
        let _ = writeln!(out, "final return: {:.1}", self.final_return);
        let _ = writeln!(out, "best return: {:.1}", self.best_return);
        let _ = writeln!(
            out,
            "{:<18} {:>22} {:>22} {:>22}",
            "phase", "entropy", "value loss", "grad variance"
        );
        for row in &self.phases {
            let _ = writeln!(
                out,
                "{:<18} {:>22} {:>22} {:>22}",
                row.phase,
                format!("{:.4}", row.entropy),
                format!("{:.4}", row.value_loss),
                format!("{:.4}", row.grad_variance),
            );
        }
        out
    }
}
