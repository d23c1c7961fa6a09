//! The four subcommands on a validated [`RunConfig`].

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fbsde::conditions::{feasibility_search, lambda1_sweep, ConditionReport};
use fbsde::problem::{lipschitz_constants, FbsdeProblem, LipschitzBundle, ProblemParams};
use fbsde::riccati::solve_riccati;
use fbsde::solver::{self, ErrorReport, RunRecord, StudyRow, StudyTable, Verdict};
use fbsde::{Precision, Real};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::emit::{self, RunSeeds, StudyResult};
use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Diverged,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Self::Success => 0,
            Self::Diverged => 2,
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub problem: fbsde::problem::ProblemKind,
    pub horizon: f64,
    pub m: usize,
    pub config_hash: String,
    pub bundle: LipschitzBundle,
    #[serde(flatten)]
    pub report: ConditionReport,
}

fn bundle_for(config: &RunConfig, params: &ProblemParams) -> Result<Option<LipschitzBundle>> {
    Ok(lipschitz_constants(config.problem, params)?)
}

/// Condition search plus a λ₁ sweep through the best point found.
pub fn check(config: &RunConfig, out: &Path) -> Result<(CheckReport, Outcome)> {
    let params = config.problem_params()?;
    let bundle = bundle_for(config, &params)?
        .ok_or_else(|| CliError::config("problem", format!("`{}` has no Lipschitz bundle to check", config.problem)))?;
    let (m, horizon) = (params.noise_dim(), params.horizon());
    let report = feasibility_search(&bundle, m, horizon, &config.search_config());
    let fixed = match &report.best {
        Some(b) => (b.lambda.l2, b.lambda.l3, b.lambda.l4),
        None => (bundle.lf_z + 1.0, 2.0 * m as f64 * bundle.lf_z + 1.0, 1.0),
    };
    let c = &config.conditions;
    let sweep = lambda1_sweep(&bundle, m, horizon, fixed, (c.log10_min, c.log10_max), c.sweep_points)?;
    create_dir(out)?;
    let result = CheckReport { problem: config.problem, horizon, m, config_hash: config.hash(), bundle, report };
    emit::write_json(&out.join("config.json"), config)?;
    emit::write_json(&out.join("conditions.json"), &result)?;
    emit::write_csv(
        &out.join("conditions.csv"),
        &emit::CONDITIONS_HEADER,
        &emit::condition_rows(Some(&result.report)),
    )?;
    emit::write_csv(&out.join("lambda1_sweep.csv"), &emit::SWEEP_HEADER, &emit::sweep_rows(&sweep))?;
    Ok((result, Outcome::Success))
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub problem: fbsde::problem::ProblemKind,
    pub steps: usize,
    pub config_hash: String,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub iterations_run: usize,
    pub train_diverged: bool,
    pub final_train_loss: f64,
    pub evaluation: ErrorReport,
}

impl TrainReport {
    pub fn diverged(&self) -> bool {
        self.train_diverged || self.evaluation.diverged_fraction > 0.1 || !self.evaluation.total.is_finite()
    }
}

/// Trains run 0 for the single configured `N`, writes the checkpoint and
/// loss history, then evaluates against the reference solution.
pub fn train(config: &RunConfig, out: &Path) -> Result<(TrainReport, Outcome)> {
    let [n] = config.steps[..] else {
        return Err(CliError::config("N", format!("train takes exactly one N, got {:?}", config.steps)));
    };
    let problem = config.build_problem()?;
    match config.precision {
        Precision::F32 => train_as::<f32>(config, &problem, n, out),
        Precision::F64 => train_as::<f64>(config, &problem, n, out),
    }
}

fn train_as<T: Real>(
    config: &RunConfig,
    problem: &FbsdeProblem,
    n: usize,
    out: &Path,
) -> Result<(TrainReport, Outcome)> {
    let study = config.study_config();
    let training = study.training(n, 0);
    let eval = study.evaluation(n, 0)?;
    let outcome = solver::train::<T>(problem, &training)?;
    create_dir(out)?;
    let hash = config.hash();
    let ck = Checkpoint::new(
        config.problem,
        problem.horizon(),
        config.precision,
        training.seed,
        hash.clone(),
        &outcome.stack,
    );
    emit::write_json(&out.join("config.json"), config)?;
    emit::write_json(&out.join("checkpoint.json"), &ck)?;
    emit::write_csv(&out.join("loss.csv"), &emit::LOSS_HEADER, &emit::loss_rows(&outcome.history))?;
    let evaluation = solver::evaluate(problem, &outcome.stack.cast::<f64>(), &eval)?;
    let report = TrainReport {
        problem: config.problem,
        steps: n,
        config_hash: hash,
        train_seed: training.seed,
        eval_seed: eval.seed,
        iterations_run: outcome.history.len(),
        train_diverged: outcome.diverged,
        final_train_loss: outcome.final_loss(64),
        evaluation,
    };
    emit::write_json(&out.join("report.json"), &report)?;
    let verdict = if report.diverged() { Outcome::Diverged } else { Outcome::Success };
    Ok((report, verdict))
}

/// Runs every `(N, run)` pair, `parallel_runs` at a time, in a fixed order
/// of results regardless of scheduling.
pub fn run_study(
    config: &RunConfig,
    problem: &FbsdeProblem,
    progress: &(dyn Fn(usize, &RunRecord) + Sync),
) -> Result<StudyTable> {
    let study = config.study_config();
    let jobs: Vec<(usize, usize)> = config.steps.iter().flat_map(|&n| (0..config.runs).map(move |r| (n, r))).collect();
    let results: Mutex<Vec<Option<Result<RunRecord>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let k = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(n, run)) = jobs.get(k) else { break };
        let record = match config.precision {
            Precision::F32 => solver::run_once::<f32>(problem, &study, n, run),
            Precision::F64 => solver::run_once::<f64>(problem, &study, n, run),
        }
        .map_err(CliError::from);
        if let Ok(r) = &record {
            progress(n, r);
        }
        results.lock().expect("no worker panicked")[k] = Some(record);
    };
    std::thread::scope(|s| {
        for _ in 1..config.parallel_runs.min(jobs.len().max(1)) {
            s.spawn(worker);
        }
        worker();
    });
    let mut records = results.into_inner().expect("no worker panicked").into_iter();
    let mut rows = Vec::with_capacity(config.steps.len());
    for &n in &config.steps {
        let runs = records.by_ref().take(config.runs).map(|r| r.expect("every job ran")).collect::<Result<Vec<_>>>()?;
        rows.push(StudyRow::from_runs(n, problem.horizon() / n as f64, runs));
    }
    Ok(StudyTable::from_rows(rows))
}

/// Convergence study plus the condition report, emitted to `out`.
pub fn study(
    config: &RunConfig,
    out: &Path,
    progress: &(dyn Fn(usize, &RunRecord) + Sync),
) -> Result<(StudyResult, Outcome)> {
    let params = config.problem_params()?;
    let problem = config.build_problem()?;
    let table = run_study(config, &problem, progress)?;
    let bundle = bundle_for(config, &params)?;
    let conditions =
        bundle.map(|b| feasibility_search(&b, params.noise_dim(), params.horizon(), &config.search_config()));
    let seeds = table
        .rows
        .iter()
        .flat_map(|row| {
            row.runs.iter().map(move |r| RunSeeds {
                n: row.n,
                run: r.run,
                train_seed: r.train_seed,
                eval_seed: r.eval_seed,
            })
        })
        .collect();
    let result = StudyResult {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.hash(),
        config: config.clone(),
        problem: config.problem,
        horizon: params.horizon(),
        reference_steps: config.reference_steps(),
        seeds,
        table,
        bundle,
        conditions,
    };
    emit::emit_results(&result, out)?;
    emit::write_json(&out.join("config.json"), config)?;
    let outcome = if result.verdict() == Verdict::Diverged { Outcome::Diverged } else { Outcome::Success };
    Ok((result, outcome))
}

/// Dumps `P(t)` and `c(t)` on the Riccati mesh.
pub fn riccati(config: &RunConfig, out: &Path, every: usize) -> Result<Outcome> {
    let ProblemParams::Lq(p) = config.problem_params()? else {
        return Err(CliError::config("problem", format!("`{}` has no Riccati equation", config.problem)));
    };
    let sol = solve_riccati(&p, p.horizon, p.riccati_steps)?;
    create_dir(out)?;
    emit::write_json(&out.join("config.json"), config)?;
    emit::riccati_mesh(&out.join("riccati.csv"), &sol, every)?;
    Ok(Outcome::Success)
}
