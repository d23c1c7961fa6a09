//! Result files. Column order and headers are part of the interface, and
//! every file is a pure function of its input so re-emission is byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use fbsde::conditions::ConditionReport;
use fbsde::problem::{LipschitzBundle, ProblemKind};
use fbsde::riccati::RiccatiSolution;
use fbsde::solver::{LossRecord, StudyTable, Verdict};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CONVERGENCE_HEADER: [&str; 12] = [
    "N",
    "h",
    "err_x_mean",
    "err_x_std",
    "err_y_mean",
    "err_y_std",
    "err_z_mean",
    "err_z_std",
    "total_mean",
    "total_std",
    "loss_mean",
    "diverged_frac",
];
pub const LOGLOG_HEADER: [&str; 2] = ["log10_h", "log10_total_mean"];
pub const CONDITIONS_HEADER: [&str; 13] = [
    "b_lower",
    "b_lower_branch",
    "b_bar",
    "a_bar",
    "max",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "feasible",
    "short_circuit",
    "grid_evaluations",
    "refine_evaluations",
];
pub const SWEEP_HEADER: [&str; 3] = ["lambda1", "b_bar", "a_bar"];
pub const LOSS_HEADER: [&str; 3] = ["iteration", "loss", "lr"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSeeds {
    pub n: usize,
    pub run: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
}

/// Everything a study produced, with enough provenance to rerun it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyResult {
    pub code_version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub problem: ProblemKind,
    pub horizon: f64,
    pub reference_steps: usize,
    pub seeds: Vec<RunSeeds>,
    pub table: StudyTable,
    pub bundle: Option<LipschitzBundle>,
    pub conditions: Option<ConditionReport>,
}

impl StudyResult {
    pub fn verdict(&self) -> Verdict {
        self.table.verdict
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[&str], rows: &[Vec<S>]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|s| s.as_ref()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn convergence_rows(table: &StudyTable) -> Vec<Vec<String>> {
    table
        .rows
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                num(r.h),
                num(r.err_x.0),
                num(r.err_x.1),
                num(r.err_y.0),
                num(r.err_y.1),
                num(r.err_z.0),
                num(r.err_z.1),
                num(r.total.0),
                num(r.total.1),
                num(r.loss_mean),
                num(r.diverged_frac),
            ]
        })
        .collect()
}

pub fn loglog_rows(table: &StudyTable) -> Vec<Vec<String>> {
    table.rows.iter().map(|r| vec![num(r.h.log10()), num(r.total.0.log10())]).collect()
}

pub fn condition_rows(report: Option<&ConditionReport>) -> Vec<Vec<String>> {
    let Some(c) = report else { return Vec::new() };
    let branch = match c.b_lower.branch {
        fbsde::conditions::LowerBoundBranch::Stationary => "stationary",
        fbsde::conditions::LowerBoundBranch::Boundary => "boundary",
    };
    let best = |f: fn(&fbsde::conditions::Candidate) -> f64| c.best.as_ref().map_or(String::new(), |b| num(f(b)));
    vec![vec![
        num(c.b_lower.value),
        branch.to_string(),
        best(|b| b.b_bar),
        best(|b| b.a_bar),
        best(|b| b.max()),
        best(|b| b.lambda.l1),
        best(|b| b.lambda.l2),
        best(|b| b.lambda.l3),
        best(|b| b.lambda.l4),
        c.feasible.to_string(),
        c.short_circuit.to_string(),
        c.grid_evaluations.to_string(),
        c.refine_evaluations.to_string(),
    ]]
}

pub fn sweep_rows(sweep: &[(f64, f64, f64)]) -> Vec<Vec<String>> {
    sweep.iter().map(|&(l1, b, a)| vec![num(l1), num(b), num(a)]).collect()
}

pub fn loss_rows(history: &[LossRecord]) -> Vec<Vec<String>> {
    history.iter().map(|r| vec![r.iteration.to_string(), num(r.loss), num(r.lr)]).collect()
}

/// Writes `study.json`, `convergence.csv`, `loglog.csv` and `conditions.csv`.
pub fn emit_results(result: &StudyResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let files = ["study.json", "convergence.csv", "loglog.csv", "conditions.csv"].map(|f| dir.join(f));
    write_json(&files[0], result)?;
    write_csv(&files[1], &CONVERGENCE_HEADER, &convergence_rows(&result.table))?;
    write_csv(&files[2], &LOGLOG_HEADER, &loglog_rows(&result.table))?;
    write_csv(&files[3], &CONDITIONS_HEADER, &condition_rows(result.conditions.as_ref()))?;
    Ok(files.to_vec())
}

/// `t, c, p_i_j` for every `every`-th mesh node plus the terminal one.
pub fn riccati_mesh(path: &Path, sol: &RiccatiSolution, every: usize) -> Result<()> {
    let d = sol.dim();
    let mut header = vec!["t".to_string(), "c".to_string()];
    for i in 0..d {
        for j in 0..d {
            header.push(format!("p_{i}_{j}"));
        }
    }
    let every = every.max(1);
    let mut nodes: Vec<usize> = (0..=sol.steps()).step_by(every).collect();
    if nodes.last() != Some(&sol.steps()) {
        nodes.push(sol.steps());
    }
    let rows: Vec<Vec<String>> = nodes
        .iter()
        .map(|&i| {
            let mut row = vec![num(sol.node_time(i)), num(sol.node_c(i))];
            row.extend(sol.node_p(i).data().iter().map(|&v| num(v)));
            row
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(path, &header, &rows)
}
