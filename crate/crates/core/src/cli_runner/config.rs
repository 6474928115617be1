//! Experiment configuration: a strict JSON document describing the dataset,
//! the annotator population, the methods to compare, and the sweep axes.
//! Unknown keys are rejected everywhere so sweep typos fail fast.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Synthetic Gaussian blobs. Each cell generates
/// `(train_per_class + test_per_class) * num_classes` examples with the
/// cell's seed; the first `train_per_class` repetitions of every class form
/// the training pool, the remainder the clean held-out test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

/// IDX image/label file pairs (MNIST layout). Optional subsets keep runs
/// desk-scale by taking the first `n` examples of each split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs(BlobSpec),
    Idx(IdxSpec),
}

fn default_skill_noise() -> f64 {
    0.1
}

/// Who labels the data. The parametric kinds sweep over `mean_skills`;
/// explicit populations load fixed matrices from CSV files and contribute a
/// single sweep point at their actual mean skill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PopulationSpec {
    PairwiseFlipper {
        num_annotators: usize,
        mean_skills: Vec<f64>,
        #[serde(default = "default_skill_noise")]
        skill_noise_std: f64,
    },
    HammerSpammer {
        num_annotators: usize,
        mean_skills: Vec<f64>,
        #[serde(default = "default_skill_noise")]
        skill_noise_std: f64,
    },
    Explicit { files: Vec<PathBuf> },
}

impl PopulationSpec {
    pub fn num_annotators(&self) -> usize {
        match self {
            PopulationSpec::PairwiseFlipper { num_annotators, .. }
            | PopulationSpec::HammerSpammer { num_annotators, .. } => *num_annotators,
            PopulationSpec::Explicit { files } => files.len(),
        }
    }

    /// The sweep axis over mean skill; None for explicit populations, whose
    /// single point is computed from the loaded matrices at run time.
    pub fn mean_skills(&self) -> Option<&[f64]> {
        match self {
            PopulationSpec::PairwiseFlipper { mean_skills, .. }
            | PopulationSpec::HammerSpammer { mean_skills, .. } => Some(mean_skills),
            PopulationSpec::Explicit { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Joint training with the trace penalty.
    Ours,
    /// Same code path with lambda pinned to 0.
    OursNoTrace,
    Gem,
    Mbem,
    /// Classifier trained on majority-vote labels, no confusion layer.
    VanillaMv,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::OursNoTrace => "ours_no_trace",
            Method::Gem => "gem",
            Method::Mbem => "mbem",
            Method::VanillaMv => "vanilla_mv",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Method::Ours),
            "ours_no_trace" => Ok(Method::OursNoTrace),
            "gem" => Ok(Method::Gem),
            "mbem" => Ok(Method::Mbem),
            "vanilla_mv" => Ok(Method::VanillaMv),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// EM schedule: `rounds * epochs_per_round` must equal the trainer's epoch
/// count so every method spends the same gradient budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmSchedule {
    pub rounds: usize,
    pub epochs_per_round: usize,
}

fn default_cell_time_limit() -> f64 {
    600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub population: PopulationSpec,
    /// k distinct annotators label each training example.
    pub labels_per_example: usize,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Required when methods include gem or mbem.
    #[serde(default)]
    pub em: Option<EmSchedule>,
    pub seeds: Vec<u64>,
    /// Default output directory; the CLI's --out overrides it.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Wall-clock budget per sweep cell; methods that would start past it
    /// are recorded as capped, not failed.
    #[serde(default = "default_cell_time_limit")]
    pub cell_time_limit_secs: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSpec::Blobs(spec) => {
                if spec.train_per_class == 0 || spec.test_per_class == 0 {
                    return Err(Error::Config(
                        "dataset.blobs: train_per_class and test_per_class must be positive"
                            .to_string(),
                    ));
                }
                // Delegate geometry checks to the generator's config.
                crate::datasets::BlobConfig {
                    num_classes: spec.num_classes,
                    dim: spec.dim,
                    separation: spec.separation,
                    std: spec.std,
                    examples_per_class: spec.train_per_class + spec.test_per_class,
                    seed: 0,
                }
                .validate()
                .map_err(|e| Error::Config(format!("dataset.blobs: {e}")))?;
            }
            DatasetSpec::Idx(_) => {}
        }
        let r = self.population.num_annotators();
        if r == 0 {
            return Err(Error::Config(
                "population: at least one annotator required".to_string(),
            ));
        }
        if let Some(skills) = self.population.mean_skills() {
            if skills.is_empty() {
                return Err(Error::Config(
                    "population.mean_skills must be nonempty".to_string(),
                ));
            }
            if let Some(bad) = skills.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::Config(format!(
                    "population.mean_skills: {bad} outside [0, 1]"
                )));
            }
        }
        if self.labels_per_example == 0 || self.labels_per_example > r {
            return Err(Error::Config(format!(
                "labels_per_example {} outside [1, {r}]",
                self.labels_per_example
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must be nonempty".to_string()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::Config(format!("methods: duplicate entry `{m}`")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".to_string()));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::Config(format!("seeds: duplicate entry {s}")));
            }
        }
        self.train
            .validate()
            .map_err(|e| Error::Config(format!("train: {e}")))?;
        let needs_em = self
            .methods
            .iter()
            .any(|m| matches!(m, Method::Gem | Method::Mbem));
        match (&self.em, needs_em) {
            (None, true) => {
                return Err(Error::Config(
                    "em schedule required when methods include gem or mbem".to_string(),
                ));
            }
            (Some(em), _) => {
                if em.rounds == 0 || em.epochs_per_round == 0 {
                    return Err(Error::Config(
                        "em: rounds and epochs_per_round must be positive".to_string(),
                    ));
                }
                if needs_em && em.rounds * em.epochs_per_round != self.train.epochs {
                    return Err(Error::Config(format!(
                        "em: rounds * epochs_per_round = {} must equal train.epochs = {} \
                         so all methods share one gradient budget",
                        em.rounds * em.epochs_per_round,
                        self.train.epochs
                    )));
                }
            }
            (None, false) => {}
        }
        if !(self.cell_time_limit_secs > 0.0) {
            return Err(Error::Config(
                "cell_time_limit_secs must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Reads and fully validates a config file. Parse errors name the offending
/// key via the JSON deserializer's path reporting.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}
