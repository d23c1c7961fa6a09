use std::fs;

use fbsde::problem::ProblemKind;
use fbsde::solver::StudyTable;
use fbsde_cli::commands;
use fbsde_cli::emit::{self, StudyResult};
use fbsde_cli::RunConfig;
use tempfile::TempDir;

fn tiny() -> RunConfig {
    let mut c = RunConfig::minimal(ProblemKind::Example1);
    c.params.d = Some(2);
    c.steps = vec![2, 4];
    c.training.iterations = 20;
    c.training.batch = 8;
    c.evaluation.paths = 32;
    c.evaluation.chunk = 16;
    c.evaluation.reference_steps = Some(8);
    c.runs = 1;
    c
}

#[test]
fn re_emission_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let (result, _) = commands::study(&tiny(), &tmp.path().join("a"), &|_, _| {}).unwrap();
    let files = emit::emit_results(&result, &tmp.path().join("b")).unwrap();
    assert_eq!(files.len(), 4);
    for f in &files {
        let name = f.file_name().unwrap();
        assert_eq!(fs::read(f).unwrap(), fs::read(tmp.path().join("a").join(name)).unwrap(), "{name:?}");
    }
}

#[test]
fn empty_study_emits_headers_only() {
    let tmp = TempDir::new().unwrap();
    let mut config = tiny();
    config.steps.clear();
    let result = StudyResult {
        code_version: "0".into(),
        config_hash: config.hash(),
        config,
        problem: ProblemKind::Example1,
        horizon: 0.25,
        reference_steps: 0,
        seeds: Vec::new(),
        table: StudyTable::from_rows(Vec::new()),
        bundle: None,
        conditions: None,
    };
    emit::emit_results(&result, tmp.path()).unwrap();
    for (file, header) in [
        ("convergence.csv", emit::CONVERGENCE_HEADER.join(",")),
        ("loglog.csv", emit::LOGLOG_HEADER.join(",")),
        ("conditions.csv", emit::CONDITIONS_HEADER.join(",")),
    ] {
        assert_eq!(fs::read_to_string(tmp.path().join(file)).unwrap(), header + "\n", "{file}");
    }
}

#[test]
fn study_records_every_seed_and_the_config_hash() {
    let tmp = TempDir::new().unwrap();
    let mut config = tiny();
    config.runs = 2;
    let (result, _) = commands::study(&config, tmp.path(), &|_, _| {}).unwrap();
    assert_eq!(result.seeds.len(), 4);
    let train: Vec<u64> = result.seeds.iter().map(|s| s.train_seed).collect();
    let eval: Vec<u64> = result.seeds.iter().map(|s| s.eval_seed).collect();
    assert!(train.iter().all(|s| !eval.contains(s)));
    assert_ne!(train[0], train[1]);
    for row in &result.table.rows {
        let totals: Vec<f64> = row.runs.iter().map(|r| r.report.total).collect();
        assert_eq!(row.total, fbsde::solver::mean_std(&totals));
    }
    assert_eq!(result.config_hash, config.hash());
    let saved = fbsde_cli::load_config(&tmp.path().join("config.json")).unwrap();
    assert_eq!(saved, config);
}
