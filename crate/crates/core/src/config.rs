//! Declarative experiment files: one TOML document names the data, the
//! models, the objective, and the run plan. Every tunable in the crate is
//! reachable from here; validation is side-effect free and reports every
//! violation with its field path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_cifar10_binary, load_idx, synth_blobs, Dataset};
use crate::error::{Error, Result};
use crate::layers::{InputShape, ModelSpec};
use crate::losses::LossSpec;
use crate::sampling::SamplingConfig;
use crate::trainer::OptimConfig;

/// Where the training and test samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Deterministic Gaussian class clusters, split into train and test.
    SynthBlobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        /// Data seed, independent of the run seeds.
        seed: u64,
        /// Samples per class kept for training; the rest become the test
        /// split.
        train_per_class: usize,
        #[serde(default)]
        normalize: bool,
    },
    /// CIFAR-10 binary batches (3073-byte records).
    Cifar10Binary {
        train_paths: Vec<PathBuf>,
        #[serde(default)]
        test_paths: Vec<PathBuf>,
        #[serde(default)]
        normalize: bool,
    },
    /// IDX image/label file pairs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        #[serde(default)]
        normalize: bool,
    },
}

impl DatasetConfig {
    fn normalize(&self) -> bool {
        match self {
            DatasetConfig::SynthBlobs { normalize, .. }
            | DatasetConfig::Cifar10Binary { normalize, .. }
            | DatasetConfig::Idx { normalize, .. } => *normalize,
        }
    }

    /// Class count when it is knowable without reading files.
    pub fn static_classes(&self) -> Option<usize> {
        match self {
            DatasetConfig::SynthBlobs { classes, .. } => Some(*classes),
            DatasetConfig::Cifar10Binary { .. } => Some(10),
            DatasetConfig::Idx { .. } => None,
        }
    }

    /// Per-sample input shape when it is knowable without reading files.
    pub fn static_input(&self) -> Option<InputShape> {
        match self {
            DatasetConfig::SynthBlobs { dim, .. } => Some(InputShape::Flat(*dim)),
            DatasetConfig::Cifar10Binary { .. } => Some(InputShape::Image([3, 32, 32])),
            DatasetConfig::Idx { .. } => None,
        }
    }

    fn violations(&self, out: &mut Vec<String>) {
        match self {
            DatasetConfig::SynthBlobs {
                classes,
                per_class,
                dim,
                spread,
                train_per_class,
                ..
            } => {
                if *classes < 2 {
                    out.push("dataset.classes: need >= 2".into());
                }
                if *dim < 2 {
                    out.push("dataset.dim: need >= 2".into());
                }
                if !(*spread > 0.0 && spread.is_finite()) {
                    out.push(format!("dataset.spread: must be > 0, got {}", spread));
                }
                if *train_per_class == 0 {
                    out.push("dataset.train_per_class: need >= 1".into());
                }
                if *per_class <= *train_per_class {
                    out.push(format!(
                        "dataset.per_class: must exceed train_per_class ({} vs {}) so a test \
                         split remains",
                        per_class, train_per_class
                    ));
                }
            }
            DatasetConfig::Cifar10Binary { train_paths, .. } => {
                if train_paths.is_empty() {
                    out.push("dataset.train_paths: need at least one file".into());
                }
            }
            DatasetConfig::Idx {
                test_images,
                test_labels,
                ..
            } => {
                if test_images.is_some() != test_labels.is_some() {
                    out.push("dataset.test_images/test_labels: both or neither must be set".into());
                }
            }
        }
    }

    fn missing_files(&self, out: &mut Vec<String>) {
        let mut check = |field: &str, p: &PathBuf| {
            if !p.exists() {
                out.push(format!(
                    "dataset.{}: file not found: {}",
                    field,
                    p.display()
                ));
            }
        };
        match self {
            DatasetConfig::SynthBlobs { .. } => {}
            DatasetConfig::Cifar10Binary {
                train_paths,
                test_paths,
                ..
            } => {
                for p in train_paths {
                    check("train_paths", p);
                }
                for p in test_paths {
                    check("test_paths", p);
                }
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                check("train_images", train_images);
                check("train_labels", train_labels);
                if let Some(p) = test_images {
                    check("test_images", p);
                }
                if let Some(p) = test_labels {
                    check("test_labels", p);
                }
            }
        }
    }

    /// Materialize (train, test) per this section. Normalization uses
    /// training-split channel statistics for both splits.
    pub fn load(&self) -> Result<(Dataset, Option<Dataset>)> {
        let (train, test) = match self {
            DatasetConfig::SynthBlobs {
                classes,
                per_class,
                dim,
                spread,
                seed,
                train_per_class,
                ..
            } => {
                let all = synth_blobs(*classes, *per_class, *dim, *spread, *seed)?;
                let (train, test) = all.stratified_split(*train_per_class)?;
                (train, Some(test))
            }
            DatasetConfig::Cifar10Binary {
                train_paths,
                test_paths,
                ..
            } => {
                let train = load_cifar10_binary(train_paths)?;
                let test = if test_paths.is_empty() {
                    None
                } else {
                    Some(load_cifar10_binary(test_paths)?)
                };
                (train, test)
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                let train = load_idx(train_images, train_labels, "train")?;
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => Some(load_idx(i, l, "test")?),
                    _ => None,
                };
                (train, test)
            }
        };
        if !self.normalize() {
            return Ok((train, test));
        }
        let (mean, std) = train.channel_stats();
        let test = match test {
            Some(t) => Some(t.standardized(&mean, &std)?),
            None => None,
        };
        Ok((train.standardized(&mean, &std)?, test))
    }
}

fn default_epochs() -> usize {
    30
}

fn default_batch_size() -> usize {
    128
}

/// One experiment: data, models, objective, optimization, and run plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory receiving checkpoints and metrics files.
    pub output_dir: PathBuf,
    /// One full run per seed.
    pub seeds: Vec<u64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Row label in comparison tables; derived from the loss when absent.
    #[serde(default)]
    pub method: Option<String>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub teacher: Option<ModelSpec>,
    #[serde(default)]
    pub student: Option<ModelSpec>,
    /// Trained teacher weights consumed by distill/eval.
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    /// Trained student weights consumed by eval.
    #[serde(default)]
    pub student_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default)]
    pub sampling: SamplingConfig,
}

/// Lifecycle stage a config is validated for; stages differ in which
/// sections and files must exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    TrainTeacher,
    Distill,
    EvalTeacher,
    EvalStudent,
    CountParams,
    Gradcheck,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {}", e)))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Row label for tables and metrics files.
    pub fn method_label(&self) -> String {
        if let Some(m) = &self.method {
            return m.clone();
        }
        let active: Vec<&str> = self
            .loss
            .soft
            .iter()
            .filter(|t| t.lambda > 0.0)
            .map(|t| t.kind.name())
            .collect();
        if active.is_empty() {
            "student".to_string()
        } else {
            active.join("+")
        }
    }

    fn model_violations(
        &self,
        role: &str,
        spec: Option<&ModelSpec>,
        against_dataset: bool,
        out: &mut Vec<String>,
    ) {
        let Some(spec) = spec else {
            out.push(format!("{}: section is required for this command", role));
            return;
        };
        if let Err(e) = spec.shape_chain() {
            out.push(format!("{}.layers: {}", role, e));
        }
        if !against_dataset {
            return;
        }
        if let Some(classes) = self.dataset.static_classes() {
            if spec.classes != classes {
                out.push(format!(
                    "{}.classes: {} does not match the dataset's {}",
                    role, spec.classes, classes
                ));
            }
        }
        if let Some(input) = self.dataset.static_input() {
            if spec.input != input {
                out.push(format!(
                    "{}.input: {:?} does not match the dataset's {:?}",
                    role, spec.input, input
                ));
            }
        }
    }

    fn checkpoint_violation(role: &str, path: &Option<PathBuf>, out: &mut Vec<String>) {
        match path {
            None => out.push(format!("{}: path is required for this command", role)),
            Some(p) if !p.exists() => {
                out.push(format!("{}: file not found: {}", role, p.display()))
            }
            Some(_) => {}
        }
    }

    /// Every violation for running `stage`, with field paths. Empty means
    /// valid. Reads nothing but file metadata.
    pub fn violations(&self, stage: Stage) -> Vec<String> {
        let mut out = Vec::new();
        if self.seeds.is_empty() {
            out.push("seeds: need at least one seed".into());
        }
        if self.batch_size == 0 {
            out.push("batch_size: must be >= 1".into());
        }
        self.dataset.violations(&mut out);
        out.extend(self.optimizer.violations("optimizer."));
        out.extend(self.loss.violations("loss."));
        out.extend(self.sampling.violations("sampling."));
        if let (Some(t), Some(s)) = (&self.teacher, &self.student) {
            if t.classes != s.classes {
                out.push(format!(
                    "student.classes: {} does not match teacher.classes {}",
                    s.classes, t.classes
                ));
            }
        }

        let needs_data_files = matches!(
            stage,
            Stage::TrainTeacher | Stage::Distill | Stage::EvalTeacher | Stage::EvalStudent
        );
        if needs_data_files {
            self.dataset.missing_files(&mut out);
        }
        match stage {
            Stage::TrainTeacher => {
                self.model_violations("teacher", self.teacher.as_ref(), true, &mut out);
            }
            Stage::Distill => {
                self.model_violations("teacher", self.teacher.as_ref(), true, &mut out);
                self.model_violations("student", self.student.as_ref(), true, &mut out);
                Self::checkpoint_violation(
                    "teacher_checkpoint",
                    &self.teacher_checkpoint,
                    &mut out,
                );
            }
            Stage::EvalTeacher => {
                self.model_violations("teacher", self.teacher.as_ref(), true, &mut out);
                Self::checkpoint_violation(
                    "teacher_checkpoint",
                    &self.teacher_checkpoint,
                    &mut out,
                );
            }
            Stage::EvalStudent => {
                self.model_violations("student", self.student.as_ref(), true, &mut out);
                Self::checkpoint_violation(
                    "student_checkpoint",
                    &self.student_checkpoint,
                    &mut out,
                );
            }
            // Counting does not touch the dataset, so models are only checked
            // for internal shape consistency here.
            Stage::CountParams => {
                if self.teacher.is_none() && self.student.is_none() {
                    out.push("teacher/student: at least one model section is required".into());
                } else {
                    if let Some(t) = &self.teacher {
                        self.model_violations("teacher", Some(t), false, &mut out);
                    }
                    if let Some(s) = &self.student {
                        self.model_violations("student", Some(s), false, &mut out);
                    }
                }
            }
            Stage::Gradcheck => {}
        }
        out
    }

    pub fn validate(&self, stage: Stage) -> Result<()> {
        let v = self.violations(stage);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("\n")))
        }
    }
}
