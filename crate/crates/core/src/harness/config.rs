use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::Method;
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::trainer::{PretrainConfig, TrainConfig};
use crate::worldgen::{SuiteConfig, WorldConfig};

/// Environment variable naming the output directory when neither the
/// command line nor the config does.
pub const OUTPUT_ENV: &str = "GIFT_BENCH_OUT";
pub const DEFAULT_OUTPUT: &str = "gift-bench-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed of the first replicate.
    pub seed: u64,
    /// Replicate `r` uses master seed `seed + r`.
    pub replicates: usize,
    pub methods: Vec<Method>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub parallel: bool,
    /// Write per-task model snapshots next to the traces.
    pub save_snapshots: bool,
    pub world: WorldConfig,
    pub suite: SuiteConfig,
    pub model: Architecture,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            replicates: 1,
            methods: vec![Method::Zeroshot, Method::Finetune, Method::L2, Method::GiftFull],
            output: None,
            parallel: false,
            save_snapshots: true,
            world: WorldConfig::default(),
            suite: SuiteConfig::default(),
            model: Architecture::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        let mut names: Vec<String> = self.methods.iter().map(Method::to_string).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("methods are listed more than once".into()));
        }
        if self.model.d_img != self.world.d_img || self.model.d_txt != self.world.d_txt {
            return Err(Error::Config(format!(
                "model input widths ({}, {}) differ from the world's ({}, {})",
                self.model.d_img, self.model.d_txt, self.world.d_img, self.world.d_txt
            )));
        }
        if self.model.hidden == 0 || self.model.d_emb == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        self.world.validate()?;
        self.suite.validate()?;
        let needed = self.suite.base_classes + self.suite.n_tasks * self.suite.classes_per_task;
        if needed > self.world.num_classes {
            return Err(Error::Config(format!(
                "suite needs {needed} classes, world has {}",
                self.world.num_classes
            )));
        }
        self.pretrain.validate()?;
        self.train.validate()
    }

    /// A few-second configuration for checks and examples: three short
    /// tasks and a brief pretraining phase.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.pretrain.steps = 400;
        c.suite.n_tasks = 3;
        c.suite.train_per_class = 30;
        c.suite.test_per_class = 20;
        c.suite.synthetic_per_task = 64;
        c.train.iterations = 30;
        c
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.replicates as u64).map(|r| self.seed + r).collect()
    }

    /// Command-line override first, then the config file, then the
    /// environment, then [`DEFAULT_OUTPUT`].
    pub fn resolve_output(&self, cli: Option<&Path>) -> PathBuf {
        cli.map(Path::to_path_buf)
            .or_else(|| self.output.clone())
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TeacherMode;
    use crate::worldgen::ShiftSchedule;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        let text = c.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(ExperimentConfig::from_toml(&back.to_toml()).unwrap(), back);
    }

    #[test]
    fn non_default_variants_round_trip() {
        let mut c = ExperimentConfig::default();
        c.methods = vec![Method::WiseTeacher(0.25), Method::EwcStatic];
        c.train.teacher = TeacherMode::Wise(0.4);
        c.suite.shift = ShiftSchedule::Explicit { severities: vec![0.1, 0.2, 0.3, 0.4, 0.5] };
        c.suite.generator.sigma_gen = Some(0.1);
        c.output = Some("out".into());
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = ExperimentConfig::from_toml("seed = 1\n[train]\nlearning_rate = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("learning_rate"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        for text in [
            "methods = []",
            "methods = [\"lwf\"]",
            "methods = [\"l2\", \"l2\"]",
            "[train]\nbatch_size = 1",
            "[suite]\nclasses_per_task = 20",
            "[model]\nd_img = 5",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn output_precedence() {
        let c = ExperimentConfig { output: Some("from-config".into()), ..Default::default() };
        assert_eq!(c.resolve_output(Some(Path::new("cli"))), PathBuf::from("cli"));
        assert_eq!(c.resolve_output(None), PathBuf::from("from-config"));
    }
}
