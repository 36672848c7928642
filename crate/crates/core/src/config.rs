//! Experiment configuration files (TOML, `schema_version = 1`).
//!
//! ```toml
//! schema_version = 1
//! method = "wpcgrad"          # sum | pcgrad | wpcgrad
//! epochs = 20
//! lr = 0.05
//! seed = 0                    # first run seed; repeat r uses seed + r
//! repeats = 1
//! scope = "shared_only"       # shared_only | full
//! output = "results/run"
//!
//! [policy]
//! kind = "dtp"                # uniform | static | handoff | dtp
//! gamma = 2.0
//!
//! [problem]
//! kind = "conflicting_quadratics"
//! task_count = 2
//! input_dim = 8
//! conflict_angle = 170.0
//! ```
//!
//! Unknown keys are rejected at every level.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::harness::{Method, TrainOptions};
use crate::model::Scope;
use crate::problem::ProblemSpec;
use crate::weighting::{
    DtpState, Phase, StaticSchedule, TaskDistribution, WeightPolicy, DEFAULT_FAVORED_MASS, DEFAULT_GAMMA,
};
use crate::{Error, Result, TaskId};

pub const SCHEMA_VERSION: u32 = 1;

fn default_repeats() -> usize {
    1
}
fn default_output() -> PathBuf {
    PathBuf::from("results")
}
fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}
fn default_favored_mass() -> f64 {
    DEFAULT_FAVORED_MASS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub start: usize,
    pub end: usize,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyConfig {
    Uniform,
    /// Explicit piecewise-constant schedule.
    Static {
        phases: Vec<PhaseConfig>,
    },
    /// Favor `first`, hand over through `uniform_len` uniform epochs, then
    /// favor `second` until the last epoch.
    Handoff {
        first: TaskId,
        second: TaskId,
        first_end: usize,
        #[serde(default)]
        uniform_len: usize,
        #[serde(default = "default_favored_mass")]
        favored_mass: f64,
    },
    Dtp {
        #[serde(default = "default_gamma")]
        gamma: f64,
        /// Fixed per-task loss scales; automatic when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scales: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub method: Method,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub scope: Scope,
    #[serde(default)]
    pub momentum: f64,
    /// Write elapsed seconds into the CSV. Off by default so that reruns are
    /// byte-identical.
    #[serde(default)]
    pub record_wallclock: bool,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyConfig>,
    pub problem: ProblemSpec,
}

/// A config that passed validation, plus any non-fatal remarks.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub config: ExperimentConfig,
    pub warnings: Vec<String>,
}

/// Parses and validates; the error lists every violation found.
pub fn parse_config(text: &str) -> Result<Parsed> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
    config.validate()?;
    let warnings = config.warnings();
    Ok(Parsed { config, warnings })
}

pub fn render(config: &ExperimentConfig) -> Result<String> {
    toml::to_string(config).map_err(|e| Error::ConfigParse(e.to_string()))
}

impl ExperimentConfig {
    pub fn new(method: Method, epochs: usize, lr: f64, problem: ProblemSpec) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            method,
            epochs,
            lr,
            seed: 0,
            repeats: 1,
            scope: Scope::default(),
            momentum: 0.0,
            record_wallclock: false,
            output: default_output(),
            policy: None,
            problem,
        }
    }

    pub fn with_policy(mut self, policy: PolicyConfig) -> Self {
        self.policy = Some(policy);
        self
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            v.push(format!("schema_version must be {SCHEMA_VERSION}, got {}", self.schema_version));
        }
        if self.epochs == 0 {
            v.push("epochs must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            v.push(format!("lr must be positive and finite, got {}", self.lr));
        }
        if self.repeats == 0 {
            v.push("repeats must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        // TOML integers are signed 64-bit.
        let last_seed = self.seed.checked_add(self.repeats.saturating_sub(1) as u64);
        if last_seed.is_none_or(|s| s > i64::MAX as u64) {
            v.push(format!("seed {} with {} repeats exceeds {}", self.seed, self.repeats, i64::MAX));
        }
        if self.problem.seed > i64::MAX as u64 {
            v.push(format!("problem.seed must be at most {}", i64::MAX));
        }
        v.extend(self.problem.violations());
        if self.method == Method::Wpcgrad && self.policy.is_none() {
            v.push("method wpcgrad requires a [policy] table".into());
        }
        if let Some(policy) = &self.policy {
            if let Err(e) = self.policy_for(policy) {
                v.push(format!("policy: {e}"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    pub fn warnings(&self) -> Vec<String> {
        match (&self.policy, self.method) {
            (Some(_), Method::Sum | Method::Pcgrad) => {
                vec![format!("method {:?} ignores the [policy] table", self.method).to_lowercase()]
            }
            _ => Vec::new(),
        }
    }

    /// A fresh policy for one run. Methods that ignore the policy get uniform.
    pub fn build_policy(&self) -> Result<WeightPolicy> {
        let k = self.problem.task_count;
        match (&self.policy, self.method) {
            (Some(p), Method::Wpcgrad) => self.policy_for(p),
            _ => Ok(WeightPolicy::Uniform { task_count: k }),
        }
    }

    fn policy_for(&self, policy: &PolicyConfig) -> Result<WeightPolicy> {
        let k = self.problem.task_count;
        match policy {
            PolicyConfig::Uniform => Ok(WeightPolicy::Uniform { task_count: k }),
            PolicyConfig::Static { phases } => {
                let phases = phases
                    .iter()
                    .map(|p| Ok(Phase { start: p.start, end: p.end, dist: TaskDistribution::new(p.probs.clone())? }))
                    .collect::<Result<Vec<_>>>()?;
                let schedule = StaticSchedule::new(phases)?;
                self.check_schedule(&schedule)?;
                Ok(WeightPolicy::Static(schedule))
            }
            &PolicyConfig::Handoff { first, second, first_end, uniform_len, favored_mass } => {
                let schedule =
                    StaticSchedule::handoff(k, first, second, favored_mass, first_end, uniform_len, self.epochs)?;
                self.check_schedule(&schedule)?;
                Ok(WeightPolicy::Static(schedule))
            }
            PolicyConfig::Dtp { gamma, scales: None } => Ok(WeightPolicy::Dtp(DtpState::new(k, *gamma)?)),
            PolicyConfig::Dtp { gamma, scales: Some(s) } => {
                if s.len() != k {
                    return Err(Error::DimensionMismatch { expected: k, got: s.len() });
                }
                Ok(WeightPolicy::Dtp(DtpState::with_scales(*gamma, s.clone())?))
            }
        }
    }

    fn check_schedule(&self, schedule: &StaticSchedule) -> Result<()> {
        if schedule.task_count() != self.problem.task_count {
            return Err(Error::DimensionMismatch { expected: self.problem.task_count, got: schedule.task_count() });
        }
        if schedule.end_epoch() < self.epochs {
            return Err(Error::InvalidSchedule(format!(
                "schedule ends at epoch {} but training runs {} epochs",
                schedule.end_epoch(),
                self.epochs
            )));
        }
        Ok(())
    }

    pub fn run_seeds(&self) -> impl Iterator<Item = u64> {
        let seed = self.seed;
        (0..self.repeats as u64).map(move |r| seed + r)
    }

    pub fn train_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            method: self.method,
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            scope: self.scope,
            seed,
            record_wallclock: self.record_wallclock,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::ProblemKind;
    use proptest::prelude::*;

    const MINIMAL: &str = r#"
schema_version = 1
method = "wpcgrad"
epochs = 5
lr = 0.1

[policy]
kind = "dtp"

[problem]
kind = "conflicting_quadratics"
task_count = 2
input_dim = 4
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let parsed = parse_config(MINIMAL).unwrap();
        let c = parsed.config;
        assert_eq!(c.policy, Some(PolicyConfig::Dtp { gamma: 2.0, scales: None }));
        assert_eq!(c.scope, Scope::SharedOnly);
        assert_eq!(c.repeats, 1);
        assert_eq!(c.seed, 0);
        assert!(parsed.warnings.is_empty());
        assert!(matches!(c.build_policy().unwrap(), WeightPolicy::Dtp(d) if d.gamma() == 2.0));
    }

    #[test]
    fn pcgrad_with_policy_warns() {
        let text = MINIMAL.replace("\"wpcgrad\"", "\"pcgrad\"");
        let parsed = parse_config(&text).unwrap();
        assert_eq!(parsed.warnings.len(), 1);
        assert!(matches!(parsed.config.build_policy().unwrap(), WeightPolicy::Uniform { task_count: 2 }));
    }

    #[test]
    fn every_violation_is_listed() {
        let text = MINIMAL.replace("lr = 0.1", "lr = -0.1\nrepeats = 0").replace("task_count = 2", "task_count = 1");
        match parse_config(&text) {
            Err(Error::InvalidConfig(v)) => {
                assert!(v.iter().any(|m| m.contains("lr")), "{v:?}");
                assert!(v.iter().any(|m| m.contains("repeats")), "{v:?}");
                assert!(v.iter().any(|m| m.contains("task_count")), "{v:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_and_missing_keys_are_rejected() {
        let typo = MINIMAL.replace("kind = \"dtp\"", "kind = \"dtp\"\ngama = 3.0");
        assert!(matches!(parse_config(&typo), Err(Error::ConfigParse(_))));
        let top = MINIMAL.replace("epochs = 5", "epochs = 5\nepoch = 5");
        assert!(matches!(parse_config(&top), Err(Error::ConfigParse(_))));
        let nested = MINIMAL.replace("input_dim = 4", "input_dim = 4\nnoise = 0.1");
        assert!(matches!(parse_config(&nested), Err(Error::ConfigParse(_))));
        let missing = MINIMAL.replace("lr = 0.1\n", "");
        assert!(matches!(parse_config(&missing), Err(Error::ConfigParse(_))));
    }

    #[test]
    fn wpcgrad_needs_a_policy() {
        let text = MINIMAL.replace("[policy]\nkind = \"dtp\"\n", "");
        assert!(matches!(parse_config(&text), Err(Error::InvalidConfig(v)) if v[0].contains("policy")));
    }

    #[test]
    fn schedules_are_checked_against_the_run() {
        let short = MINIMAL
            .replace("kind = \"dtp\"", "kind = \"static\"\nphases = [{ start = 0, end = 3, probs = [0.9, 0.1] }]");
        assert!(matches!(parse_config(&short), Err(Error::InvalidConfig(_))));

        let ok = short.replace("end = 3", "end = 5");
        let c = parse_config(&ok).unwrap().config;
        assert!(matches!(c.build_policy().unwrap(), WeightPolicy::Static(_)));

        let bad_probs = ok.replace("[0.9, 0.1]", "[0.9, 0.2]");
        assert!(matches!(parse_config(&bad_probs), Err(Error::InvalidConfig(_))));

        let handoff = MINIMAL
            .replace("kind = \"dtp\"", "kind = \"handoff\"\nfirst = 0\nsecond = 1\nfirst_end = 2\nuniform_len = 1");
        let c = parse_config(&handoff).unwrap().config;
        let WeightPolicy::Static(s) = c.build_policy().unwrap() else { panic!() };
        assert_eq!(s.end_epoch(), 5);
        assert!((s.dist_at(0).unwrap().prob(0) - 0.91).abs() < 1e-12);
        assert!((s.dist_at(4).unwrap().prob(1) - 0.91).abs() < 1e-12);
    }

    #[test]
    fn dtp_scales_must_match_task_count() {
        let text = MINIMAL.replace("kind = \"dtp\"", "kind = \"dtp\"\nscales = [1.0, 2.0, 3.0]");
        assert!(matches!(parse_config(&text), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn render_example_round_trips() {
        let c = parse_config(MINIMAL).unwrap().config;
        assert_eq!(parse_config(&render(&c).unwrap()).unwrap().config, c);
    }

    fn finite(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
        lo..hi
    }

    fn policy(k: usize, epochs: usize) -> impl Strategy<Value = Option<PolicyConfig>> {
        let dtp = (finite(0.0, 5.0), prop::option::of(prop::collection::vec(finite(0.01, 10.0), k)))
            .prop_map(|(gamma, scales)| PolicyConfig::Dtp { gamma, scales });
        let fixed = prop::collection::vec(finite(0.01, 1.0), k).prop_map(move |w| {
            let total: f64 = w.iter().sum();
            let mut probs: Vec<f64> = w.iter().map(|x| x / total).collect();
            let rest: f64 = probs[1..].iter().sum();
            probs[0] = 1.0 - rest;
            PolicyConfig::Static { phases: vec![PhaseConfig { start: 0, end: epochs, probs }] }
        });
        prop_oneof![Just(None), Just(Some(PolicyConfig::Uniform)), dtp.prop_map(Some), fixed.prop_map(Some)]
    }

    fn config() -> impl Strategy<Value = ExperimentConfig> {
        (2usize..5, 1usize..30).prop_flat_map(|(k, epochs)| {
            (
                policy(k, epochs),
                prop_oneof![Just(Method::Sum), Just(Method::Pcgrad)],
                finite(1e-4, 1.0),
                0u64..1 << 40,
                1usize..4,
                finite(0.0, 0.99),
                any::<bool>(),
                prop_oneof![Just(ProblemKind::ConflictingQuadratics), Just(ProblemKind::SharedFeatureRegression)],
                5usize..10,
                prop::option::of(finite(90.5, 95.0)),
                finite(0.0, 1.0),
            )
                .prop_map(
                    move |(policy, fallback, lr, seed, repeats, momentum, wall, kind, dim, angle, noise)| {
                        let method = if policy.is_some() { Method::Wpcgrad } else { fallback };
                        let mut problem = ProblemSpec::new(kind, k, dim).with_noise(noise);
                        problem.conflict_angle = angle;
                        problem.seed = seed / 3;
                        ExperimentConfig {
                            seed,
                            repeats,
                            momentum,
                            record_wallclock: wall,
                            scope: if wall { Scope::Full } else { Scope::SharedOnly },
                            output: PathBuf::from(format!("out/{seed}")),
                            policy,
                            ..ExperimentConfig::new(method, epochs, lr, problem)
                        }
                    },
                )
        })
    }

    proptest! {
        #[test]
        fn parse_render_round_trip(c in config()) {
            prop_assert!(c.violations().is_empty(), "{:?}", c.violations());
            let text = render(&c).unwrap();
            prop_assert_eq!(parse_config(&text).unwrap().config, c);
        }
    }
}
