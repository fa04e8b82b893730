//! Ablation sweeps: the fusion/variant table and the input-pattern table.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use radar_depth::dataio::PatternKind;
use radar_depth::datamodel::FusionSample;
use radar_depth::evaluation::MetricsReport;
use radar_depth::network::Variant;
use serde::{Deserialize, Serialize};

use crate::commands::{load_splits, prepare_dir, train_on, DirMode, RunSummary};
use crate::config::RunConfig;
use crate::error::{io_err, CliError, CliResult};

/// Model rows of the variant table, in display order.
pub const VARIANT_ROWS: [&str; 7] = [
    "rgb_only",
    "early",
    "mid",
    "late",
    "multilayer",
    "two_stage_no_smooth",
    "two_stage_smooth",
];

/// Metric columns, in display order.
pub const METRIC_COLUMNS: [&str; 7] = ["delta1", "delta2", "delta3", "rmse", "mae", "rel", "mae_log"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// One row per model variant, all fed the configured input pattern.
    Variants,
    /// One row per input pattern, all using the configured model.
    Patterns,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub method: String,
    pub input: String,
    /// Per-seed validation metrics of the selected checkpoint.
    pub per_seed: Vec<MetricsReport>,
    /// Per-column median over seeds, in [`METRIC_COLUMNS`] order.
    pub median: [f64; 7],
}

impl Row {
    pub fn value(&self, column: &str) -> f64 {
        let i = METRIC_COLUMNS.iter().position(|c| *c == column).expect("known column");
        self.median[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub mode: SweepMode,
    pub seeds: usize,
    pub rows: Vec<Row>,
}

fn columns(m: &MetricsReport) -> [f64; 7] {
    [m.delta1, m.delta2, m.delta3, m.rmse, m.mae, m.rel, m.mae_log]
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AblationTable {
    pub fn row(&self, method: &str, input: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.method == method && r.input == input)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Method | Depth input | δ1 ↑ | δ2 ↑ | δ3 ↑ | RMSE ↓ | MAE ↓ | REL ↓ | MAE_log ↓ |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!("| {} | {} |", r.method, r.input));
            for v in r.median {
                s.push_str(&format!(" {v:.3} |"));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("method,input,{}\n", METRIC_COLUMNS.join(","));
        for r in &self.rows {
            let vals: Vec<String> = r.median.iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&format!("{},{},{}\n", r.method, r.input, vals.join(",")));
        }
        s
    }
}

/// One training run of the sweep.
struct Job {
    row: usize,
    cfg: RunConfig,
    dir: PathBuf,
}

fn row_specs(cfg: &RunConfig, mode: SweepMode) -> CliResult<Vec<(String, String, RunConfig)>> {
    let mut out = Vec::new();
    match mode {
        SweepMode::Variants => {
            for name in VARIANT_ROWS {
                let mut c = cfg.clone();
                c.model.variant = name.to_string();
                c.loss.smoothness = None;
                let v: Variant = name.parse()?;
                let input = if v == Variant::RgbOnly {
                    "none".to_string()
                } else {
                    cfg.data.input_pattern.as_str().to_string()
                };
                out.push((v.label(), input, c));
            }
        }
        SweepMode::Patterns => {
            let v = cfg.variant()?;
            if v == Variant::RgbOnly {
                return Err(CliError::config("the pattern sweep needs a model with a depth input"));
            }
            for kind in PatternKind::ALL {
                let mut c = cfg.clone();
                c.data.input_pattern = kind;
                out.push((v.label(), kind.as_str().to_string(), c));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct AblateOptions {
    pub mode: SweepMode,
    pub seeds: usize,
    /// Concurrent training runs.
    pub jobs: usize,
    /// Restricts the sweep to rows whose method label or input name is
    /// listed; empty runs every row.
    pub rows: Vec<String>,
    /// Print per-epoch log lines.
    pub echo: bool,
}

impl Default for AblateOptions {
    fn default() -> Self {
        Self {
            mode: SweepMode::Variants,
            seeds: 1,
            jobs: 1,
            rows: Vec::new(),
            echo: false,
        }
    }
}

/// Runs every row for `seeds` seeds (offsets added to both the model and
/// training seeds) and tabulates per-column medians of validation metrics.
/// Writes `table.md`, `table.csv` and `results.json` into `out`.
pub fn ablate(cfg: &RunConfig, out: &Path, opts: &AblateOptions, dir_mode: DirMode) -> CliResult<AblationTable> {
    let AblateOptions { mode, seeds, jobs, echo, .. } = *opts;
    if seeds == 0 || jobs == 0 {
        return Err(CliError::config("seeds and jobs must be positive"));
    }
    cfg.validate()?;
    let mut specs = row_specs(cfg, mode)?;
    if !opts.rows.is_empty() {
        if let Some(bad) = opts.rows.iter().find(|r| !specs.iter().any(|(m, i, _)| m == *r || i == *r)) {
            return Err(CliError::config(format!("ablation row {bad:?} is not part of the {mode:?} sweep")));
        }
        specs.retain(|(m, i, _)| opts.rows.iter().any(|r| r == m || r == i));
    }
    let root = cfg.data_root()?;
    let resuming = prepare_dir(out, dir_mode)?;
    let (train, val) = load_splits(cfg)?;
    let val = val.ok_or_else(|| CliError::config(format!("{} has no validation split to compare on", root.display())))?;

    let mut work = Vec::new();
    for (row, (method, input, c)) in specs.iter().enumerate() {
        for s in 0..seeds {
            let mut c = c.clone();
            c.model.seed += s as u64;
            c.train.seed += s as u64;
            let dir = out.join(format!("{method}__{input}")).join(format!("seed{s}"));
            work.push(Job { row, cfg: c, dir });
        }
    }
    let sub_mode = if resuming { DirMode::Resume } else { DirMode::Fresh };
    let results = run_jobs(&work, &train, &val, sub_mode, jobs, echo)?;

    let mut rows: Vec<Row> = specs
        .iter()
        .map(|(m, i, _)| Row {
            method: m.clone(),
            input: i.clone(),
            per_seed: Vec::new(),
            median: [0.0; 7],
        })
        .collect();
    for (job, summary) in work.iter().zip(results) {
        let report = summary
            .val
            .ok_or_else(|| CliError::config("run finished without validation metrics"))?;
        rows[job.row].per_seed.push(report.final_depth.all);
    }
    for r in &mut rows {
        let cols: Vec<[f64; 7]> = r.per_seed.iter().map(columns).collect();
        for (i, m) in r.median.iter_mut().enumerate() {
            *m = median(&cols.iter().map(|c| c[i]).collect::<Vec<_>>());
        }
    }
    let table = AblationTable { mode, seeds, rows };
    for (name, text) in [("table.md", table.to_markdown()), ("table.csv", table.to_csv())] {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| io_err(&p, e))?;
    }
    let p = out.join("results.json");
    fs::write(&p, serde_json::to_string_pretty(&table).map_err(radar_depth::Error::from)?).map_err(|e| io_err(&p, e))?;
    Ok(table)
}

fn run_jobs(work: &[Job], train: &[FusionSample], val: &[FusionSample], mode: DirMode, jobs: usize, echo: bool) -> CliResult<Vec<RunSummary>> {
    if jobs == 1 {
        return work.iter().map(|j| train_on(&j.cfg, train, Some(val), &j.dir, mode, echo)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CliResult<RunSummary>>>> = Mutex::new((0..work.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(work.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(j) = work.get(i) else { break };
                let r = train_on(&j.cfg, train, Some(val), &j.dir, mode, echo);
                slots.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}
