//! JSON run configuration. Unknown keys are rejected and every validation
//! error names the offending field.

use std::path::{Path, PathBuf};

use fbsde::conditions::SearchConfig;
use fbsde::nn::AdamConfig;
use fbsde::problem::{make_problem, FbsdeProblem, LqParams, ProblemKind, ProblemParams};
use fbsde::solver::StudyConfig;
use fbsde::Precision;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Reference mesh used when the config does not pin one.
pub const DEFAULT_REFERENCE_STEPS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemKind,
    #[serde(default)]
    pub params: ParamOverrides,
    #[serde(rename = "N", default)]
    pub steps: Vec<usize>,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub conditions: ConditionSection,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default = "one")]
    pub parallel_runs: usize,
}

fn default_runs() -> usize {
    3
}

fn one() -> usize {
    1
}

/// Optional changes to the built-in problem parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_z: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<f64>,
    /// Multiplies `M_u`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub riccati_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_z: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub iterations: usize,
    pub batch: usize,
    pub initial_lr: f64,
    pub decay_rate: f64,
    pub divergence_window: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            iterations: 4096,
            batch: 512,
            initial_lr: adam.initial_lr,
            decay_rate: adam.decay_rate,
            divergence_window: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub paths: usize,
    pub chunk: usize,
    /// `N'`; when absent the smallest common multiple of all `N` that
    /// reaches [`DEFAULT_REFERENCE_STEPS`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_steps: Option<usize>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { paths: 4096, chunk: 512, reference_steps: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionSection {
    pub log10_min: f64,
    pub log10_max: f64,
    pub points_per_axis: usize,
    pub refine_evals: usize,
    pub starts: usize,
    pub sweep_points: usize,
}

impl Default for ConditionSection {
    fn default() -> Self {
        let s = SearchConfig::default();
        Self {
            log10_min: s.log10_min,
            log10_max: s.log10_max,
            points_per_axis: s.points_per_axis,
            refine_evals: s.refine_evals,
            starts: s.starts,
            sweep_points: 121,
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(path, e.into_inner().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

impl RunConfig {
    pub fn minimal(problem: ProblemKind) -> Self {
        Self {
            problem,
            params: ParamOverrides::default(),
            steps: Vec::new(),
            horizon: None,
            training: TrainingSection::default(),
            evaluation: EvaluationSection::default(),
            conditions: ConditionSection::default(),
            runs: default_runs(),
            seed: 0,
            precision: Precision::F64,
            out: None,
            parallel_runs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |path: &str, v: usize| {
            if v == 0 {
                Err(CliError::config(path, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        for (i, &n) in self.steps.iter().enumerate() {
            positive(&format!("N[{i}]"), n)?;
            if i > 0 && n <= self.steps[i - 1] {
                return Err(CliError::config(format!("N[{i}]"), "N values must be strictly ascending"));
            }
        }
        if let Some(t) = self.horizon {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CliError::config("T", format!("must be positive and finite, got {t}")));
            }
        }
        positive("training.iterations", self.training.iterations)?;
        positive("training.batch", self.training.batch)?;
        positive("training.divergence_window", self.training.divergence_window)?;
        for (path, v) in
            [("training.initial_lr", self.training.initial_lr), ("training.decay_rate", self.training.decay_rate)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::config(path, format!("must be positive, got {v}")));
            }
        }
        positive("evaluation.paths", self.evaluation.paths)?;
        positive("evaluation.chunk", self.evaluation.chunk)?;
        if let Some(r) = self.evaluation.reference_steps {
            positive("evaluation.reference_steps", r)?;
            if let Some(n) = self.steps.iter().find(|&&n| r % n != 0) {
                return Err(CliError::config(
                    "evaluation.reference_steps",
                    format!("{r} is not a multiple of N = {n}"),
                ));
            }
        }
        positive("conditions.points_per_axis", self.conditions.points_per_axis)?;
        positive("conditions.starts", self.conditions.starts)?;
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.conditions.log10_min < self.conditions.log10_max) {
            return Err(CliError::config("conditions.log10_min", "must be below conditions.log10_max"));
        }
        positive("runs", self.runs)?;
        positive("parallel_runs", self.parallel_runs)?;
        self.check_overrides()?;
        self.problem_params().map(drop)
    }

    fn check_overrides(&self) -> Result<()> {
        let p = &self.params;
        let example1_only = [
            ("d", p.d.is_some()),
            ("r", p.r.is_some()),
            ("sigma", p.sigma.is_some()),
            ("kappa_y", p.kappa_y.is_some()),
            ("kappa_z", p.kappa_z.is_some()),
        ];
        let lq_only = [
            ("control_scale", p.control_scale.is_some()),
            ("riccati_steps", p.riccati_steps.is_some()),
            ("r_x", p.r_x.is_some()),
            ("r_z", p.r_z.is_some()),
        ];
        let foreign = if self.problem.is_lq() { &example1_only[..] } else { &lq_only[..] };
        if let Some((name, _)) = foreign.iter().find(|(_, set)| *set) {
            return Err(CliError::config(format!("params.{name}"), format!("does not apply to `{}`", self.problem)));
        }
        Ok(())
    }

    /// Built-in parameters with the overrides and `T` applied.
    pub fn problem_params(&self) -> Result<ProblemParams> {
        let o = &self.params;
        let mut params = match self.problem.default_params() {
            ProblemParams::Example1(mut p) => {
                p.d = o.d.unwrap_or(p.d);
                p.r = o.r.unwrap_or(p.r);
                p.sigma = o.sigma.unwrap_or(p.sigma);
                p.kappa_y = o.kappa_y.unwrap_or(p.kappa_y);
                p.kappa_z = o.kappa_z.unwrap_or(p.kappa_z);
                p.x0 = o.x0.unwrap_or(p.x0);
                ProblemParams::Example1(p)
            }
            ProblemParams::Lq(p) => {
                let mut p = match o.control_scale {
                    Some(s) => p.with_control_scale(s),
                    None => p,
                };
                p.x0 = o.x0.unwrap_or(p.x0);
                p.riccati_steps = o.riccati_steps.unwrap_or(p.riccati_steps);
                p.r_x = o.r_x.unwrap_or(p.r_x);
                p.r_z = o.r_z.unwrap_or(p.r_z);
                ProblemParams::Lq(LqParams { ..p })
            }
        };
        if let Some(t) = self.horizon {
            params.set_horizon(t);
        }
        let check = match &params {
            ProblemParams::Example1(p) => p.validate(),
            ProblemParams::Lq(p) => p.validate(),
        };
        check.map_err(|e| CliError::config("params", e.to_string()))?;
        Ok(params)
    }

    pub fn build_problem(&self) -> Result<FbsdeProblem> {
        Ok(make_problem(self.problem, &self.problem_params()?)?)
    }

    pub fn horizon(&self) -> Result<f64> {
        Ok(self.problem_params()?.horizon())
    }

    pub fn reference_steps(&self) -> usize {
        if let Some(r) = self.evaluation.reference_steps {
            return r;
        }
        let base = self.steps.iter().fold(1, |acc, &n| lcm(acc, n));
        base * DEFAULT_REFERENCE_STEPS.div_ceil(base)
    }

    pub fn study_config(&self) -> StudyConfig {
        let t = &self.training;
        StudyConfig {
            runs: self.runs,
            seed: self.seed,
            batch: t.batch,
            iterations: t.iterations,
            adam: AdamConfig {
                initial_lr: t.initial_lr,
                decay_rate: t.decay_rate,
                horizon: t.iterations,
                ..AdamConfig::default()
            },
            eval_paths: self.evaluation.paths,
            eval_chunk: self.evaluation.chunk,
            reference_steps: self.reference_steps(),
            divergence_window: t.divergence_window,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        let c = &self.conditions;
        SearchConfig {
            log10_min: c.log10_min,
            log10_max: c.log10_max,
            points_per_axis: c.points_per_axis,
            refine_evals: c.refine_evals,
            starts: c.starts,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&compact).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(r#"{"problem": "example1", "N": [20]}"#).unwrap();
        assert_eq!(c.training.iterations, 4096);
        assert_eq!(c.training.batch, 512);
        assert_eq!(c.evaluation.paths, 4096);
        assert_eq!(c.runs, 3);
        assert_eq!(c.precision, Precision::F64);
        assert_eq!(c.steps, vec![20]);
        assert_eq!(c.reference_steps(), 10_000);
    }

    #[test]
    fn negative_horizon_names_the_field() {
        match parse_config(r#"{"problem": "example1", "N": [20], "T": -1.0}"#) {
            Err(CliError::Config { path, .. }) => assert_eq!(path, "T"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        match parse_config(r#"{"problem": "example1", "training": {"iters": 5}}"#) {
            Err(CliError::Config { path, message }) => {
                assert_eq!(path, "training.iters");
                assert!(message.contains("iters"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_problem_is_rejected() {
        assert!(matches!(parse_config(r#"{"problem": "heat"}"#), Err(CliError::Config { .. })));
    }

    #[test]
    fn nested_type_errors_carry_the_path() {
        match parse_config(r#"{"problem": "lq_dp", "N": [5, "ten"]}"#) {
            Err(CliError::Config { path, .. }) => assert_eq!(path, "N[1]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn foreign_overrides_are_rejected() {
        match parse_config(r#"{"problem": "example1", "params": {"control_scale": 0.5}}"#) {
            Err(CliError::Config { path, .. }) => assert_eq!(path, "params.control_scale"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip_is_idempotent() {
        let c = parse_config(r#"{"problem": "lq_smp", "N": [5, 10], "T": 0.001, "params": {"riccati_steps": 200}}"#)
            .unwrap();
        let once = c.to_json();
        let again = parse_config(&once).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_json(), once);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn reference_steps_cover_every_n() {
        let mut c = RunConfig::minimal(ProblemKind::Example1);
        c.steps = vec![3, 7];
        assert_eq!(c.reference_steps() % 21, 0);
        assert!(c.reference_steps() >= DEFAULT_REFERENCE_STEPS);
        c.evaluation.reference_steps = Some(20);
        assert!(matches!(c.validate(), Err(CliError::Config { .. })));
    }

    #[test]
    fn overrides_reach_the_problem() {
        let c =
            parse_config(r#"{"problem": "lq_dp", "T": 0.25, "params": {"control_scale": 0.5, "riccati_steps": 100}}"#)
                .unwrap();
        match c.problem_params().unwrap() {
            ProblemParams::Lq(p) => {
                assert_eq!(p.horizon, 0.25);
                assert_eq!(p.riccati_steps, 100);
                assert_eq!(p.mu.data()[0], 0.5);
            }
            other => panic!("{other:?}"),
        }
    }
}
