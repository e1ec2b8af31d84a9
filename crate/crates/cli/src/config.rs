//! Experiment configuration files.
//!
//! A config is a single JSON document. Every field has a default, unknown keys
//! are rejected, and [`ExperimentConfig::to_json`] writes every field back out
//! so a resolved config can be stored next to its results.

use std::path::Path;

use noisyfed::data::{
    generate_classification, generate_regression, partition_iid, partition_label_shard, SyntheticRegressionSpec,
};
use noisyfed::model::smoothness_constant;
use noisyfed::{
    ClientPartition, Dataset, Direction, FedAvgConfig, LossModel, NoiseSchedule, ScheduleKind, UplinkMessage,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Linear regression with unit Hessian norm.
    RegressionV5a,
    /// Softmax regression on Gaussian clusters.
    ClassificationSynth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fedavg,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    LabelShard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    #[serde(rename = "r")]
    Participants,
    #[serde(rename = "E")]
    LocalSteps,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Participants => "r",
            Axis::LocalSteps => "E",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "r" => Ok(Axis::Participants),
            "E" | "e" => Ok(Axis::LocalSteps),
            other => Err(format!("unknown sweep axis '{other}' (expected r or E)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub m: usize,
    pub d: usize,
    pub label_noise_variance: f64,
    pub normalize_hessian: bool,
    pub classes: usize,
    pub cluster_separation: f64,
    pub partition: PartitionKind,
    pub labels_per_client: usize,
    /// Seeds dataset generation and partitioning; fixed across repeat seeds.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            m: 15_000,
            d: 60,
            label_noise_variance: 0.05,
            normalize_hessian: true,
            classes: 10,
            cluster_separation: 3.0,
            partition: PartitionKind::Iid,
            labels_per_client: 2,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedAvgSection {
    pub clients: usize,
    pub participants: usize,
    pub local_steps: usize,
    pub rounds: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub learning_rate_override: Option<f64>,
    pub uplink_message: UplinkMessage,
}

impl Default for FedAvgSection {
    fn default() -> Self {
        Self {
            clients: 50,
            participants: 10,
            local_steps: 5,
            rounds: 100,
            gamma: 18.0,
            batch_size: 16,
            learning_rate_override: None,
            uplink_message: UplinkMessage::Formula,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdSection {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
}

impl Default for SgdSection {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            iterations: 500,
            batch_size: 16,
        }
    }
}

/// One link's schedule; the direction comes from where it sits in the file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub base_std: f64,
    pub decay_exponent: f64,
    pub e_squared_scaling: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Off,
            base_std: 0.0,
            decay_exponent: 0.0,
            e_squared_scaling: false,
        }
    }
}

impl ScheduleConfig {
    pub fn schedule(&self, direction: Direction) -> NoiseSchedule {
        NoiseSchedule {
            direction,
            kind: self.kind,
            base_std: self.base_std,
            decay_exponent: self.decay_exponent,
            e_squared_scaling: self.e_squared_scaling,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: Axis,
    pub values: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: Axis::Participants,
            values: vec![5, 10, 20, 40],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    /// Fixed `σ²`; estimated by Monte Carlo when absent.
    pub sigma2: Option<f64>,
    pub sigma2_trials: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            sigma2: None,
            sigma2_trials: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub mode: Mode,
    pub data: DataConfig,
    pub fedavg: FedAvgSection,
    pub sgd: SgdSection,
    pub uplink: ScheduleConfig,
    pub downlink: ScheduleConfig,
    pub repeat_seeds: Vec<u64>,
    pub output_prefix: String,
    pub sweep: SweepConfig,
    pub theory: TheoryConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::RegressionV5a,
            mode: Mode::Fedavg,
            data: DataConfig::default(),
            fedavg: FedAvgSection::default(),
            sgd: SgdSection::default(),
            uplink: ScheduleConfig::default(),
            downlink: ScheduleConfig::default(),
            repeat_seeds: vec![0, 1, 2],
            output_prefix: "noisyfed".into(),
            sweep: SweepConfig::default(),
            theory: TheoryConfig::default(),
        }
    }
}

/// A dataset with its partition and model, shared by every seed of a config.
pub struct Workload {
    pub dataset: Dataset,
    pub partition: ClientPartition,
    pub model: LossModel,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses and validates `text`. `origin` names the source in messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let config: Self = serde_json::from_str(text).map_err(|e| CliError::Config {
            origin: origin.into(),
            line: Some(e.line()),
            message: e.to_string(),
        })?;
        config.validate().map_err(|(key, message)| CliError::Config {
            origin: origin.into(),
            line: line_of_path(text, key),
            message,
        })?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn uplink_schedule(&self) -> NoiseSchedule {
        self.uplink.schedule(Direction::Uplink)
    }

    pub fn downlink_schedule(&self) -> NoiseSchedule {
        self.downlink.schedule(Direction::Downlink)
    }

    pub fn fedavg_config(&self, seed: u64) -> FedAvgConfig {
        let f = &self.fedavg;
        FedAvgConfig {
            clients: f.clients,
            participants: f.participants,
            local_steps: f.local_steps,
            rounds: f.rounds,
            gamma: f.gamma,
            batch_size: f.batch_size,
            seed,
            learning_rate_override: f.learning_rate_override,
            uplink: self.uplink_schedule(),
            downlink: self.downlink_schedule(),
            uplink_message: f.uplink_message,
        }
    }

    /// Semantic checks. Errors carry the offending key so that the caller
    /// can point at its line.
    pub fn validate(&self) -> Result<(), (&'static [&'static str], String)> {
        let fail = |path: &'static [&'static str], msg: String| Err((path, msg));
        let d = &self.data;
        if d.d == 0 {
            return fail(&["data", "d"], "data.d must be at least 1".into());
        }
        match self.task {
            Task::RegressionV5a => {
                if d.m < d.d {
                    return fail(
                        &["data", "m"],
                        format!("data.m ({}) must be at least data.d ({})", d.m, d.d),
                    );
                }
                if !(d.label_noise_variance >= 0.0 && d.label_noise_variance.is_finite()) {
                    return fail(
                        &["data", "label_noise_variance"],
                        "data.label_noise_variance must be non-negative".into(),
                    );
                }
                if d.partition == PartitionKind::LabelShard {
                    return fail(
                        &["data", "partition"],
                        "label_shard partitioning needs the classification task".into(),
                    );
                }
            }
            Task::ClassificationSynth => {
                if d.classes < 2 {
                    return fail(&["data", "classes"], "data.classes must be at least 2".into());
                }
                if d.m < d.classes {
                    return fail(
                        &["data", "m"],
                        format!("data.m ({}) must be at least data.classes ({})", d.m, d.classes),
                    );
                }
                if !(d.cluster_separation >= 0.0 && d.cluster_separation.is_finite()) {
                    return fail(
                        &["data", "cluster_separation"],
                        "data.cluster_separation must be non-negative".into(),
                    );
                }
            }
        }
        if self.repeat_seeds.is_empty() {
            return fail(&["repeat_seeds"], "repeat_seeds must list at least one seed".into());
        }
        for (key, s) in [
            (&["uplink", "base_std"], &self.uplink),
            (&["downlink", "base_std"], &self.downlink),
        ] {
            if !(s.base_std >= 0.0 && s.base_std.is_finite()) {
                return fail(key, format!("{}.base_std must be finite and non-negative", key[0]));
            }
            if !(s.decay_exponent >= 0.0 && s.decay_exponent.is_finite()) {
                let path: &'static [&'static str] = if key[0] == "uplink" {
                    &["uplink", "decay_exponent"]
                } else {
                    &["downlink", "decay_exponent"]
                };
                return fail(
                    path,
                    format!("{}.decay_exponent must be finite and non-negative", key[0]),
                );
            }
        }
        match self.mode {
            Mode::Fedavg => {
                let f = &self.fedavg;
                if f.clients == 0 {
                    return fail(&["fedavg", "clients"], "fedavg.clients must be at least 1".into());
                }
                if f.clients > d.m {
                    return fail(
                        &["fedavg", "clients"],
                        format!("fedavg.clients ({}) exceeds data.m ({})", f.clients, d.m),
                    );
                }
                if f.participants == 0 || f.participants > f.clients {
                    return fail(
                        &["fedavg", "participants"],
                        format!("fedavg.participants ({}) must lie in 1..={}", f.participants, f.clients),
                    );
                }
                if f.local_steps == 0 {
                    return fail(
                        &["fedavg", "local_steps"],
                        "fedavg.local_steps must be at least 1".into(),
                    );
                }
                if f.rounds == 0 {
                    return fail(&["fedavg", "rounds"], "fedavg.rounds must be at least 1".into());
                }
                if !(f.gamma > 4.0) {
                    return fail(
                        &["fedavg", "gamma"],
                        format!("fedavg.gamma must exceed 4, got {}", f.gamma),
                    );
                }
                if f.batch_size == 0 || f.batch_size > d.m / f.clients {
                    return fail(
                        &["fedavg", "batch_size"],
                        format!(
                            "fedavg.batch_size ({}) must lie in 1..={} (smallest shard)",
                            f.batch_size,
                            d.m / f.clients
                        ),
                    );
                }
                if let Some(eta) = f.learning_rate_override {
                    if !(eta > 0.0 && eta.is_finite()) {
                        return fail(
                            &["fedavg", "learning_rate_override"],
                            "fedavg.learning_rate_override must be positive".into(),
                        );
                    }
                }
                if d.partition == PartitionKind::LabelShard {
                    if !(1..=2).contains(&d.labels_per_client) {
                        return fail(
                            &["data", "labels_per_client"],
                            "data.labels_per_client must be 1 or 2".into(),
                        );
                    }
                    if f.clients * d.labels_per_client < d.classes {
                        return fail(
                            &["data", "labels_per_client"],
                            "fedavg.clients × data.labels_per_client must cover every class".into(),
                        );
                    }
                }
            }
            Mode::Sgd => {
                let s = &self.sgd;
                if !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
                    return fail(&["sgd", "learning_rate"], "sgd.learning_rate must be positive".into());
                }
                if s.iterations == 0 {
                    return fail(&["sgd", "iterations"], "sgd.iterations must be at least 1".into());
                }
                if s.batch_size == 0 || s.batch_size > d.m {
                    return fail(
                        &["sgd", "batch_size"],
                        format!("sgd.batch_size must lie in 1..={}", d.m),
                    );
                }
            }
        }
        if self.theory.sigma2_trials == 0 {
            return fail(
                &["theory", "sigma2_trials"],
                "theory.sigma2_trials must be at least 1".into(),
            );
        }
        if let Some(s) = self.theory.sigma2 {
            if !(s >= 0.0 && s.is_finite()) {
                return fail(&["theory", "sigma2"], "theory.sigma2 must be non-negative".into());
            }
        }
        Ok(())
    }

    /// Generates the dataset and partition and measures `L`.
    pub fn workload(&self) -> Result<Workload, CliError> {
        let d = &self.data;
        let clients = match self.mode {
            Mode::Fedavg => self.fedavg.clients,
            Mode::Sgd => 1,
        };
        let (dataset, model) = match self.task {
            Task::RegressionV5a => {
                let spec = SyntheticRegressionSpec {
                    m: d.m,
                    d: d.d,
                    theta_star: None,
                    label_noise_variance: d.label_noise_variance,
                    normalize_hessian: d.normalize_hessian,
                };
                (generate_regression(&spec, d.seed)?, LossModel::mse_linear(d.d)?)
            }
            Task::ClassificationSynth => (
                generate_classification(d.m, d.d, d.classes, d.cluster_separation, d.seed)?,
                LossModel::softmax_linear(d.d, d.classes)?,
            ),
        };
        let partition = match d.partition {
            PartitionKind::Iid => partition_iid(dataset.len(), clients, d.seed)?,
            PartitionKind::LabelShard => partition_label_shard(&dataset, clients, d.labels_per_client, d.seed)?,
        };
        let smoothness = smoothness_constant(&model, &dataset)?;
        Ok(Workload {
            model: model.with_smoothness(smoothness),
            dataset,
            partition,
        })
    }
}

/// 1-based line of a nested key such as `["fedavg", "rounds"]`, found by
/// scanning for each component after the previous one. Falls back to the
/// deepest component present, so a bad default still points at its section.
pub fn line_of_path(text: &str, path: &[&str]) -> Option<usize> {
    let lines: Vec<&str> = text.lines().collect();
    let mut from = 0;
    let mut found = None;
    for key in path {
        let needle = format!("\"{key}\"");
        match lines[from..].iter().position(|l| l.contains(&needle)) {
            Some(i) => {
                found = Some(from + i + 1);
                from += i;
            }
            None => break,
        }
    }
    found
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let c = ExperimentConfig::parse("{}", "inline").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let text = r#"{ "fedavg": { "participants": 5 }, "uplink": { "kind": "constant", "base_std": 0.2 } }"#;
        let c = ExperimentConfig::parse(text, "inline").unwrap();
        let again = ExperimentConfig::parse(&c.to_json(), "inline").unwrap();
        assert_eq!(c, again);
        assert!(c.to_json().contains("\"learning_rate_override\": null"));
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let text = "{\n  \"fedavg\": {\n    \"rounds\": 10,\n    \"roundz\": 3\n  }\n}";
        match ExperimentConfig::parse(text, "inline") {
            Err(CliError::Config {
                line: Some(4), message, ..
            }) => assert!(message.contains("roundz")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn semantic_errors_point_at_the_key() {
        let text = "{\n  \"sgd\": { \"batch_size\": 4 },\n  \"fedavg\": {\n    \"clients\": 5,\n    \"participants\": 9,\n    \"batch_size\": 0\n  }\n}";
        match ExperimentConfig::parse(text, "inline") {
            Err(CliError::Config {
                line: Some(5), message, ..
            }) => assert!(message.contains("participants")),
            other => panic!("unexpected {other:?}"),
        }
        let text = "{\n  \"sgd\": { \"batch_size\": 4 },\n  \"fedavg\": {\n    \"batch_size\": 0\n  }\n}";
        match ExperimentConfig::parse(text, "inline") {
            Err(CliError::Config { line: Some(4), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let text = "{\n  \"fedavg\": {\n    \"clients\": 5\n  }\n}";
        match ExperimentConfig::parse(text, "inline") {
            Err(CliError::Config { line: Some(2), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sweep_axis_spelling() {
        assert_eq!("r".parse::<Axis>().unwrap(), Axis::Participants);
        assert_eq!("E".parse::<Axis>().unwrap(), Axis::LocalSteps);
        assert!("k".parse::<Axis>().is_err());
        let c = ExperimentConfig::parse(r#"{"sweep": {"axis": "E", "values": [1, 2]}}"#, "x").unwrap();
        assert_eq!(c.sweep.axis, Axis::LocalSteps);
    }
}
