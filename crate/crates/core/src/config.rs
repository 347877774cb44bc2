//! Run configuration files.
//!
//! A config is a sectioned TOML document. Every section has defaults, so a
//! minimal file only names the run directory and the teacher. The snapshot
//! written into a run directory is the fully materialized form.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{builtin, ArchitectureSpec};
use crate::data::{self, BaseDataset, SubsetSpec};
use crate::distill::{DistillConfig, DistillMode, LatencySettings};
use crate::reinforce::{PolicySettings, SearchSettings};
use crate::reward::Thresholds;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub iterations: usize,
    pub students_per_iteration: usize,
    pub parallel_workers: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection { iterations: 100, students_per_iteration: 5, parallel_workers: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherTraining {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub augment: bool,
}

impl Default for TeacherTraining {
    fn default() -> Self {
        TeacherTraining {
            epochs: 30,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            augment: true,
        }
    }
}

impl TeacherTraining {
    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            augment: self.augment,
            mode: DistillMode::HardOnly,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    /// Built-in family name or path to an architecture JSON file.
    pub arch: String,
    /// Subset the teacher is trained on; defaults to the data subset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub weights: PathBuf,
    #[serde(default)]
    pub training: TeacherTraining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Built-in subset name, or the name of the custom subset in `classes`.
    pub subset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base: Option<BaseDataset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
    /// Keep only the first N examples of each class.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_per_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_per_class: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: None,
            subset: "cifar10".into(),
            base: None,
            classes: None,
            train_per_class: None,
            test_per_class: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub rounds: usize,
    pub filters_per_round: usize,
    pub finetune_epochs: usize,
    pub ranking_examples: usize,
    /// Filters removed from the searched best model after compression;
    /// 0 disables the stage.
    pub stage2_filters: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection {
            rounds: 5,
            filters_per_round: 512,
            finetune_epochs: 10,
            ranking_examples: 1024,
            stage2_filters: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub iterations: usize,
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection { iterations: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub run_dir: PathBuf,
    #[serde(default)]
    pub search: SearchSection,
    pub teacher: TeacherSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub reward: Thresholds,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub policy: PolicySettings,
    #[serde(default)]
    pub latency: LatencySettings,
    #[serde(default)]
    pub prune: PruneSection,
    #[serde(default)]
    pub transfer: TransferSection,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// The materialized configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = ConfigError::Invalid;
        self.reward.check().map_err(bad)?;
        self.distill.check().map_err(bad)?;
        self.teacher.training.distill_config().check().map_err(bad)?;
        let p = &self.policy;
        if p.hidden_width == 0 {
            return Err(bad("policy.hidden_width must be ≥ 1".into()));
        }
        if !(p.learning_rate.is_finite() && p.learning_rate >= 0.0) {
            return Err(bad(format!("policy.learning_rate must be ≥ 0, got {}", p.learning_rate)));
        }
        if !(0.0..1.0).contains(&p.momentum) {
            return Err(bad(format!("policy.momentum must lie in [0, 1), got {}", p.momentum)));
        }
        if !(p.baseline_decay > 0.0 && p.baseline_decay < 1.0) {
            return Err(bad(format!("policy.baseline_decay must lie in (0, 1), got {}", p.baseline_decay)));
        }
        if self.search.students_per_iteration == 0 {
            return Err(bad("search.students_per_iteration must be ≥ 1".into()));
        }
        if self.search.parallel_workers == 0 {
            return Err(bad("search.parallel_workers must be ≥ 1".into()));
        }
        if self.latency.warmup < 1 || self.latency.samples < 5 {
            return Err(bad("latency needs warmup ≥ 1 and samples ≥ 5".into()));
        }
        if self.prune.filters_per_round == 0 {
            return Err(bad("prune.filters_per_round must be ≥ 1".into()));
        }
        let data = self.data_subset()?;
        let teacher_data = self.teacher_subset()?;
        if data != teacher_data {
            data.columns_in(&teacher_data).map_err(|e| bad(e.to_string()))?;
        }
        self.teacher_arch()?;
        Ok(())
    }

    pub fn data_subset(&self) -> Result<SubsetSpec, ConfigError> {
        subset_from(&self.data.subset, self.data.base, self.data.classes.as_deref())
    }

    pub fn teacher_subset(&self) -> Result<SubsetSpec, ConfigError> {
        match &self.teacher.dataset {
            Some(name) if *name != self.data.subset => subset_from(name, None, None),
            _ => self.data_subset(),
        }
    }

    /// Teacher architecture with the head sized for the teacher's dataset.
    pub fn teacher_arch(&self) -> Result<ArchitectureSpec, ConfigError> {
        let classes = self.teacher_subset()?.num_classes();
        let spec = if self.teacher.arch.ends_with(".json") {
            ArchitectureSpec::load(Path::new(&self.teacher.arch))
                .map_err(|e| ConfigError::Invalid(format!("teacher.arch: {e}")))?
                .with_num_classes(classes)
        } else {
            builtin::by_name(&self.teacher.arch, classes).map_err(|e| ConfigError::Invalid(format!("teacher.arch: {e}")))?
        };
        let report = crate::arch::validate(&spec);
        if !report.passed() {
            return Err(ConfigError::Invalid(format!("teacher.arch: {report}")));
        }
        Ok(spec)
    }

    pub fn data_root(&self) -> PathBuf {
        data::resolve_root(self.data.root.as_deref())
    }

    pub fn search_settings(&self, iterations: usize) -> SearchSettings {
        SearchSettings {
            iterations,
            students_per_iteration: self.search.students_per_iteration,
            seed: self.seed,
            thresholds: self.reward,
            policy: self.policy,
        }
    }
}

fn subset_from(name: &str, base: Option<BaseDataset>, classes: Option<&[String]>) -> Result<SubsetSpec, ConfigError> {
    match classes {
        Some(list) => {
            let base = base.ok_or_else(|| ConfigError::Invalid("data.classes requires data.base".into()))?;
            let refs: Vec<&str> = list.iter().map(String::as_str).collect();
            SubsetSpec::new(base, name, &refs).map_err(|e| ConfigError::Invalid(e.to_string()))
        }
        None => data::subset_by_name(name).map_err(|e| ConfigError::Invalid(e.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
run_dir = "runs/x"
[teacher]
arch = "desk"
weights = "teacher/model_weights"
"#;

    #[test]
    fn defaults_materialize() {
        let c = RunConfig::from_toml(MINIMAL, "inline").unwrap();
        assert_eq!(c.search.iterations, 100);
        assert_eq!(c.search.students_per_iteration, 5);
        assert_eq!(c.distill.epochs, 20);
        assert_eq!(c.distill.lambda_soft, 0.7);
        assert_eq!(c.policy.learning_rate, 0.001);
        assert_eq!(c.transfer.iterations, 20);
        assert_eq!(c.reward, Thresholds::default());
        c.validate().unwrap();
        let snap = c.to_toml();
        let again = RunConfig::from_toml(&snap, "snapshot").unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_toml(), snap);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(RunConfig::from_toml(&format!("{MINIMAL}\n[reward]\nbogus = 1\n"), "x").is_err());
        let c = RunConfig::from_toml(&format!("{MINIMAL}\n[reward]\na_th = -1.0\n"), "x").unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::from_toml(&format!("{MINIMAL}\n[distill]\nlambda_soft = 2.0\n"), "x").unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::from_toml(&format!("{MINIMAL}\n[data]\nsubset = \"nowhere\"\n"), "x").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn custom_subsets_and_teacher_columns() {
        let text = format!(
            "{MINIMAL}\n[data]\nsubset = \"pair\"\nbase = \"cifar10\"\nclasses = [\"ship\", \"airplane\"]\n"
        )
        .replace("arch = \"desk\"", "arch = \"desk\"\ndataset = \"vehicles10\"");
        let c = RunConfig::from_toml(&text, "x").unwrap();
        c.validate().unwrap();
        assert_eq!(c.data_subset().unwrap().num_classes(), 2);
        assert_eq!(c.teacher_subset().unwrap().name, "vehicles10");
        assert_eq!(c.teacher_arch().unwrap().num_classes, 4);
        let snap = c.to_toml();
        assert_eq!(RunConfig::from_toml(&snap, "s").unwrap(), c);
    }
}
