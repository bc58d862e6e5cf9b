//! Command implementations behind the CLI: train a teacher, distill a
//! student, evaluate checkpoints, count parameters, gradient-check the
//! whole loss and layer surface, and assemble comparison tables from
//! metrics files. Each command validates its config before touching the
//! filesystem, so invalid configs produce no output.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, restore_into, save_checkpoint};
use crate::config::{ExperimentConfig, Stage};
use crate::error::{Error, Result};
use crate::gradcheck::gradient_check;
use crate::graph::{Graph, NodeId};
use crate::layers::{dropout_mask, init_params, ModelSpec, ParamStore};
use crate::losses::{
    bkd_loss, combined_loss, contrastive_loss, cross_entropy_loss, hkd_loss, rkd_a_loss,
    rkd_d_loss, rkd_da_loss, triplet_kd_loss, triplet_metric_loss, BatchOutputs, LossSpec, PsiNorm,
    SoftKind, SoftTerm,
};
use crate::metrics::{read_metrics, write_metrics};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;
use crate::trainer::{distill_student, evaluate_accuracy, train_teacher};

/// Files produced by one seeded run.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Last epoch's test accuracy, when the config provided a test split.
    pub final_accuracy: Option<f64>,
}

/// Result of a training command across all configured seeds.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Row label the metrics files carry ("teacher" or the method name).
    pub label: String,
    /// Trainable parameters of the model that was trained.
    pub param_count: u64,
    pub runs: Vec<RunArtifact>,
}

impl fmt::Display for TrainOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}: {} parameters", self.label, self.param_count)?;
        for run in &self.runs {
            write!(f, "seed {}: ", run.seed)?;
            if let Some(acc) = run.final_accuracy {
                write!(f, "test accuracy {:.4}, ", acc)?;
            }
            writeln!(
                f,
                "wrote {} and {}",
                run.checkpoint.display(),
                run.metrics.display()
            )?;
        }
        Ok(())
    }
}

/// Label mapped onto the filename-safe alphabet.
fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '+' | '.') {
                c
            } else {
                '-'
            }
        })
        .collect()
}

fn artifact_paths(dir: &Path, label: &str, seed: u64) -> (PathBuf, PathBuf) {
    let stem = format!("{}_seed{}", file_label(label), seed);
    (
        dir.join(format!("{}.ckpt", stem)),
        dir.join(format!("{}.tsv", stem)),
    )
}

/// Shared artifact plumbing: run `train` once per seed and persist a
/// checkpoint plus a metrics file for each run.
fn run_seeds(
    cfg: &ExperimentConfig,
    label: &str,
    mut train: impl FnMut(u64) -> Result<(ParamStore, crate::trainer::TrainLog)>,
) -> Result<Vec<RunArtifact>> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (store, log) = train(seed)?;
        let (ckpt, tsv) = artifact_paths(&cfg.output_dir, label, seed);
        save_checkpoint(&store, &ckpt)?;
        write_metrics(&tsv, label, seed, &log)?;
        runs.push(RunArtifact {
            seed,
            checkpoint: ckpt,
            metrics: tsv,
            final_accuracy: log.epochs.last().and_then(|e| e.test_accuracy),
        });
    }
    Ok(runs)
}

/// Train the teacher from scratch once per configured seed. Artifacts are
/// named `teacher_seed<N>` under the output directory.
pub fn cmd_train_teacher(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate(Stage::TrainTeacher)?;
    let spec = cfg.teacher.as_ref().expect("validated");
    let param_count = spec.count_params()?;
    let (train, test) = cfg.dataset.load()?;
    let runs = run_seeds(cfg, "teacher", |seed| {
        train_teacher(
            spec,
            &train,
            test.as_ref(),
            &cfg.optimizer,
            cfg.epochs,
            cfg.batch_size,
            seed,
        )
    })?;
    Ok(TrainOutcome {
        label: "teacher".into(),
        param_count,
        runs,
    })
}

/// A model spec's parameters restored from a checkpoint file.
fn load_model(spec: &ModelSpec, ckpt: &Path) -> Result<ParamStore> {
    // The seed only shapes initial values, which the restore overwrites.
    let mut store = init_params(spec, &mut stream_rng(0, Stream::Init, &[]))?;
    restore_into(&mut store, load_checkpoint(ckpt)?)?;
    Ok(store)
}

/// Distill the student against the frozen teacher checkpoint, once per
/// configured seed. Artifacts are named `<label>_seed<N>` where the label
/// is the config's method name (or the active soft-term kinds).
pub fn cmd_distill(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate(Stage::Distill)?;
    let teacher = cfg.teacher.as_ref().expect("validated");
    let student = cfg.student.as_ref().expect("validated");
    let ckpt = cfg.teacher_checkpoint.as_ref().expect("validated");
    let teacher_params = load_model(teacher, ckpt)?;
    let param_count = student.count_params()?;
    let (train, test) = cfg.dataset.load()?;
    let label = cfg.method_label();
    let runs = run_seeds(cfg, &label, |seed| {
        distill_student(
            student,
            teacher,
            &teacher_params,
            &train,
            test.as_ref(),
            &cfg.loss,
            &cfg.sampling,
            &cfg.optimizer,
            cfg.epochs,
            cfg.batch_size,
            seed,
        )
    })?;
    Ok(TrainOutcome {
        label,
        param_count,
        runs,
    })
}

/// Which checkpoint an eval run scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTarget {
    Teacher,
    Student,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub role: &'static str,
    /// Which split was scored: "test" when the dataset has one, else
    /// "train".
    pub split: &'static str,
    pub accuracy: f64,
}

impl fmt::Display for EvalOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} accuracy on the {} split: {:.4}",
            self.role, self.split, self.accuracy
        )
    }
}

/// Score a saved checkpoint on the dataset's test split (train split when
/// no test data is configured).
pub fn cmd_eval(cfg: &ExperimentConfig, target: EvalTarget) -> Result<EvalOutcome> {
    let (stage, role) = match target {
        EvalTarget::Teacher => (Stage::EvalTeacher, "teacher"),
        EvalTarget::Student => (Stage::EvalStudent, "student"),
    };
    cfg.validate(stage)?;
    let (spec, ckpt) = match target {
        EvalTarget::Teacher => (
            cfg.teacher.as_ref().expect("validated"),
            cfg.teacher_checkpoint.as_ref().expect("validated"),
        ),
        EvalTarget::Student => (
            cfg.student.as_ref().expect("validated"),
            cfg.student_checkpoint.as_ref().expect("validated"),
        ),
    };
    let store = load_model(spec, ckpt)?;
    let (train, test) = cfg.dataset.load()?;
    let (data, split) = match &test {
        Some(t) => (t, "test"),
        None => (&train, "train"),
    };
    let accuracy = evaluate_accuracy(spec, &store, data)?;
    Ok(EvalOutcome {
        role,
        split,
        accuracy,
    })
}

/// Trainable-parameter counts for the configured models.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountReport {
    pub teacher: Option<u64>,
    pub student: Option<u64>,
}

impl CountReport {
    /// Student size as a percentage of the teacher's, when both exist.
    pub fn ratio_percent(&self) -> Option<f64> {
        match (self.teacher, self.student) {
            (Some(t), Some(s)) if t > 0 => Some(100.0 * s as f64 / t as f64),
            _ => None,
        }
    }
}

impl fmt::Display for CountReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(t) = self.teacher {
            writeln!(f, "teacher: {} parameters", t)?;
        }
        if let Some(s) = self.student {
            writeln!(f, "student: {} parameters", s)?;
        }
        if let Some(r) = self.ratio_percent() {
            writeln!(f, "student/teacher ratio: {:.2}%", r)?;
        }
        Ok(())
    }
}

/// Count trainable parameters of the configured model sections.
pub fn cmd_count_params(cfg: &ExperimentConfig) -> Result<CountReport> {
    cfg.validate(Stage::CountParams)?;
    let count = |spec: &Option<ModelSpec>| -> Result<Option<u64>> {
        spec.as_ref().map(|s| s.count_params()).transpose()
    };
    Ok(CountReport {
        teacher: count(&cfg.teacher)?,
        student: count(&cfg.student)?,
    })
}

/// Tolerance every gradient check must meet.
pub const GRADCHECK_TOL: f64 = 1e-5;

/// One gradient-checked surface (a loss, a layer, or the self-test).
#[derive(Debug, Clone)]
pub struct GradcheckRow {
    pub name: &'static str,
    /// Self-test rows carry a deliberately wrong gradient; they count as
    /// healthy only when every check catches it.
    pub expect_fail: bool,
    /// Individual gradient_check invocations (rounds × variants).
    pub checks: usize,
    pub failures: usize,
    /// Coordinates excluded for sitting on a data-dependent branch.
    pub skipped: usize,
    /// Worst relative error over all passing-relevant coordinates.
    pub max_rel_error: f64,
}

impl GradcheckRow {
    pub fn ok(&self) -> bool {
        if self.expect_fail {
            self.checks > 0 && self.failures == self.checks
        } else {
            self.checks > 0 && self.failures == 0
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub tol: f64,
    pub rounds: usize,
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(GradcheckRow::ok)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradient check: {} rounds per surface, tolerance {:e}",
            self.rounds, self.tol
        )?;
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
        for row in &self.rows {
            let status = match (row.expect_fail, row.ok()) {
                (false, true) => "PASS",
                (false, false) => "FAIL",
                (true, true) => "DETECTED",
                (true, false) => "MISSED",
            };
            writeln!(
                f,
                "  {:<width$}  max rel err {:>9.2e}  skipped {:>3}  {}",
                row.name,
                row.max_rel_error,
                row.skipped,
                status,
                width = width
            )?;
        }
        write!(
            f,
            "overall: {}",
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Builds the checked scalar node from a graph and its input node.
type BuildFn = Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId>>;
/// Draws the seeded input variants of one checked surface.
type MakeFn = Box<dyn Fn(&mut ChaCha8Rng) -> Result<Vec<Variant>>>;

/// A differentiated input plus the scalar function built on it.
struct Variant {
    x: Tensor,
    build: BuildFn,
}

struct RowDef {
    name: &'static str,
    expect_fail: bool,
    make: MakeFn,
}

fn rand_tensor(shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
        .collect();
    Tensor::new(shape, data).expect("data sized to shape")
}

/// Reduce a non-scalar output to a scalar with a fixed random weighting,
/// so every output coordinate influences the gradient. A plain sum would
/// make normalized outputs (softmax rows) vacuously constant.
fn weighted_sum(g: &mut Graph, out: NodeId, weights: &Tensor) -> NodeId {
    let w = g.leaf(weights.clone());
    let p = g.mul(out, w);
    g.sum(p)
}

fn loss_rows() -> Vec<RowDef> {
    // Index sets reference rows of a 4×3 logit batch.
    const PAIRS: [(usize, usize); 4] = [(0, 1), (0, 2), (1, 3), (2, 3)];
    const TRIPLETS: [(usize, usize, usize); 3] = [(0, 1, 2), (1, 2, 3), (0, 2, 3)];
    const ANCHOR_NEG: [(usize, usize); 4] = [(0, 1), (1, 2), (2, 3), (3, 0)];
    const LABELS: [usize; 4] = [0, 1, 2, 0];

    let logits = |rng: &mut ChaCha8Rng| rand_tensor(vec![4, 3], 1.5, rng);

    vec![
        RowDef {
            name: "contrastive",
            expect_fail: false,
            make: Box::new(move |rng| {
                let x = logits(rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(|g, x| {
                        contrastive_loss(
                            g,
                            x,
                            &[(0, 1, true), (1, 2, false), (2, 3, false), (0, 3, true)],
                            1.0,
                        )
                    }),
                }])
            }),
        },
        RowDef {
            name: "triplet_metric",
            expect_fail: false,
            make: Box::new(move |rng| {
                let x = logits(rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(|g, x| {
                        triplet_metric_loss(g, x, &[(0, 1, 2), (1, 0, 3), (2, 3, 0)], 1.0)
                    }),
                }])
            }),
        },
        RowDef {
            name: "bkd",
            expect_fail: false,
            make: Box::new(move |rng| {
                let t = logits(rng);
                let x = logits(rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(move |g, x| {
                        let tn = g.leaf(t.clone());
                        bkd_loss(g, tn, x)
                    }),
                }])
            }),
        },
        RowDef {
            name: "hkd",
            expect_fail: false,
            make: Box::new(move |rng| {
                // Both published temperatures, with the T² compensation
                // exercised on the softened one.
                let mut variants = Vec::new();
                for (temp, t2) in [(1.0, false), (4.0, true)] {
                    let t = logits(rng);
                    let x = logits(rng);
                    variants.push(Variant {
                        x,
                        build: Box::new(move |g, x| {
                            let tn = g.leaf(t.clone());
                            hkd_loss(g, tn, x, temp, t2)
                        }),
                    });
                }
                Ok(variants)
            }),
        },
        RowDef {
            name: "rkd_d",
            expect_fail: false,
            make: Box::new(move |rng| {
                let t = logits(rng);
                let x = logits(rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(move |g, x| {
                        let tn = g.leaf(t.clone());
                        rkd_d_loss(g, tn, x, &PAIRS, PsiNorm::Sum)
                    }),
                }])
            }),
        },
        RowDef {
            name: "rkd_a",
            expect_fail: false,
            make: Box::new(move |rng| {
                let t = logits(rng);
                let x = logits(rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(move |g, x| {
                        let tn = g.leaf(t.clone());
                        rkd_a_loss(g, tn, x, &TRIPLETS)
                    }),
                }])
            }),
        },
        RowDef {
            name: "rkd_da",
            expect_fail: false,
            make: Box::new(move |rng| {
                let t = logits(rng);
                let x = logits(rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(move |g, x| {
                        let tn = g.leaf(t.clone());
                        rkd_da_loss(g, tn, x, &PAIRS, &TRIPLETS, 1.0, 2.0, PsiNorm::Sum)
                    }),
                }])
            }),
        },
        RowDef {
            name: "triplet_kd",
            expect_fail: false,
            make: Box::new(move |rng| {
                let t = logits(rng);
                let x = logits(rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(move |g, x| {
                        let tn = g.leaf(t.clone());
                        triplet_kd_loss(g, tn, x, &ANCHOR_NEG, 5.0)
                    }),
                }])
            }),
        },
        RowDef {
            name: "cross_entropy",
            expect_fail: false,
            make: Box::new(move |rng| {
                let x = logits(rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(|g, x| cross_entropy_loss(g, x, &LABELS)),
                }])
            }),
        },
        RowDef {
            name: "combined",
            expect_fail: false,
            make: Box::new(move |rng| {
                let t = logits(rng);
                let x = logits(rng);
                // The published weights, all terms live at once.
                let spec = LossSpec {
                    hard: true,
                    soft: vec![
                        SoftTerm {
                            kind: SoftKind::Bkd,
                            lambda: 2.0,
                        },
                        SoftTerm {
                            kind: SoftKind::Hkd,
                            lambda: 16.0,
                        },
                        SoftTerm {
                            kind: SoftKind::RkdD,
                            lambda: 10.0,
                        },
                        SoftTerm {
                            kind: SoftKind::RkdA,
                            lambda: 20.0,
                        },
                        SoftTerm {
                            kind: SoftKind::TripletKd,
                            lambda: 2.0,
                        },
                    ],
                    temperature: 4.0,
                    margin: 5.0,
                    hkd_t2_scale: false,
                    psi_norm: PsiNorm::Sum,
                    kd_on_probs: false,
                };
                Ok(vec![Variant {
                    x,
                    build: Box::new(move |g, x| {
                        let tn = g.leaf(t.clone());
                        let batch = BatchOutputs {
                            teacher_logits: tn,
                            student_logits: x,
                            labels: LABELS.to_vec(),
                            pairs: PAIRS.to_vec(),
                            triplets: TRIPLETS.to_vec(),
                            anchor_negatives: ANCHOR_NEG.to_vec(),
                        };
                        combined_loss(g, &spec, &batch).map(|(node, _)| node)
                    }),
                }])
            }),
        },
    ]
}

fn layer_rows() -> Vec<RowDef> {
    vec![
        RowDef {
            name: "linear/input",
            expect_fail: false,
            make: Box::new(|rng| {
                let x = rand_tensor(vec![2, 4], 1.0, rng);
                let w = rand_tensor(vec![3, 4], 0.7, rng);
                let b = rand_tensor(vec![3], 0.5, rng);
                let red = rand_tensor(vec![2, 3], 1.0, rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(move |g, x| {
                        let wn = g.leaf(w.clone());
                        let bn = g.leaf(b.clone());
                        let y = g.linear(x, wn, bn);
                        Ok(weighted_sum(g, y, &red))
                    }),
                }])
            }),
        },
        RowDef {
            name: "linear/weights",
            expect_fail: false,
            make: Box::new(|rng| {
                let input = rand_tensor(vec![2, 4], 1.0, rng);
                let x = rand_tensor(vec![3, 4], 0.7, rng);
                let b = rand_tensor(vec![3], 0.5, rng);
                let red = rand_tensor(vec![2, 3], 1.0, rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(move |g, x| {
                        let xn = g.leaf(input.clone());
                        let bn = g.leaf(b.clone());
                        let y = g.linear(xn, x, bn);
                        Ok(weighted_sum(g, y, &red))
                    }),
                }])
            }),
        },
        RowDef {
            name: "linear/bias",
            expect_fail: false,
            make: Box::new(|rng| {
                let input = rand_tensor(vec![2, 4], 1.0, rng);
                let w = rand_tensor(vec![3, 4], 0.7, rng);
                let x = rand_tensor(vec![3], 0.5, rng);
                let red = rand_tensor(vec![2, 3], 1.0, rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(move |g, x| {
                        let xn = g.leaf(input.clone());
                        let wn = g.leaf(w.clone());
                        let y = g.linear(xn, wn, x);
                        Ok(weighted_sum(g, y, &red))
                    }),
                }])
            }),
        },
        RowDef {
            name: "conv2d/input",
            expect_fail: false,
            make: Box::new(|rng| {
                let x = rand_tensor(vec![1, 2, 4, 4], 1.0, rng);
                let w = rand_tensor(vec![2, 2, 3, 3], 0.5, rng);
                let b = rand_tensor(vec![2], 0.5, rng);
                let red = rand_tensor(vec![1, 2, 4, 4], 1.0, rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(move |g, x| {
                        let wn = g.leaf(w.clone());
                        let bn = g.leaf(b.clone());
                        let y = g.conv2d(x, wn, bn, 1);
                        Ok(weighted_sum(g, y, &red))
                    }),
                }])
            }),
        },
        RowDef {
            name: "conv2d/weights",
            expect_fail: false,
            make: Box::new(|rng| {
                let input = rand_tensor(vec![1, 2, 4, 4], 1.0, rng);
                let x = rand_tensor(vec![2, 2, 3, 3], 0.5, rng);
                let b = rand_tensor(vec![2], 0.5, rng);
                let red = rand_tensor(vec![1, 2, 4, 4], 1.0, rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(move |g, x| {
                        let xn = g.leaf(input.clone());
                        let bn = g.leaf(b.clone());
                        let y = g.conv2d(xn, x, bn, 1);
                        Ok(weighted_sum(g, y, &red))
                    }),
                }])
            }),
        },
        RowDef {
            name: "relu",
            expect_fail: false,
            make: Box::new(|rng| {
                let x = rand_tensor(vec![2, 5], 1.0, rng);
                let red = rand_tensor(vec![2, 5], 1.0, rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(move |g, x| {
                        let y = g.relu(x);
                        Ok(weighted_sum(g, y, &red))
                    }),
                }])
            }),
        },
        RowDef {
            name: "maxpool2x2",
            expect_fail: false,
            make: Box::new(|rng| {
                let x = rand_tensor(vec![1, 2, 4, 4], 1.0, rng);
                let red = rand_tensor(vec![1, 2, 2, 2], 1.0, rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(move |g, x| {
                        let y = g.maxpool2x2(x);
                        Ok(weighted_sum(g, y, &red))
                    }),
                }])
            }),
        },
        RowDef {
            name: "batchnorm2d/input",
            expect_fail: false,
            make: Box::new(|rng| {
                let x = rand_tensor(vec![2, 2, 2, 2], 1.0, rng);
                let gamma = positive_tensor(vec![2], rng);
                let beta = rand_tensor(vec![2], 0.5, rng);
                let red = rand_tensor(vec![2, 2, 2, 2], 1.0, rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(move |g, x| {
                        let gn = g.leaf(gamma.clone());
                        let bn = g.leaf(beta.clone());
                        let (y, _) = g.batchnorm2d_train(x, gn, bn, 1e-5)?;
                        Ok(weighted_sum(g, y, &red))
                    }),
                }])
            }),
        },
        RowDef {
            name: "batchnorm2d/gamma",
            expect_fail: false,
            make: Box::new(|rng| {
                let input = rand_tensor(vec![2, 2, 2, 2], 1.0, rng);
                let x = positive_tensor(vec![2], rng);
                let beta = rand_tensor(vec![2], 0.5, rng);
                let red = rand_tensor(vec![2, 2, 2, 2], 1.0, rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(move |g, x| {
                        let xn = g.leaf(input.clone());
                        let bn = g.leaf(beta.clone());
                        let (y, _) = g.batchnorm2d_train(xn, x, bn, 1e-5)?;
                        Ok(weighted_sum(g, y, &red))
                    }),
                }])
            }),
        },
        RowDef {
            name: "batchnorm2d/beta",
            expect_fail: false,
            make: Box::new(|rng| {
                let input = rand_tensor(vec![2, 2, 2, 2], 1.0, rng);
                let gamma = positive_tensor(vec![2], rng);
                let x = rand_tensor(vec![2], 0.5, rng);
                let red = rand_tensor(vec![2, 2, 2, 2], 1.0, rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(move |g, x| {
                        let xn = g.leaf(input.clone());
                        let gn = g.leaf(gamma.clone());
                        let (y, _) = g.batchnorm2d_train(xn, gn, x, 1e-5)?;
                        Ok(weighted_sum(g, y, &red))
                    }),
                }])
            }),
        },
        RowDef {
            name: "softmax",
            expect_fail: false,
            make: Box::new(|rng| {
                let x = rand_tensor(vec![3, 4], 1.5, rng);
                let red = rand_tensor(vec![3, 4], 1.0, rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(move |g, x| {
                        let y = g.softmax(x);
                        Ok(weighted_sum(g, y, &red))
                    }),
                }])
            }),
        },
        RowDef {
            name: "dropout",
            expect_fail: false,
            make: Box::new(|rng| {
                let x = rand_tensor(vec![2, 6], 1.0, rng);
                // The layer applies a fixed scaled keep-mask; gradients
                // must flow through the kept coordinates only.
                let mask = dropout_mask(vec![2, 6], 0.3, rng);
                let red = rand_tensor(vec![2, 6], 1.0, rng);
                Ok(vec![Variant {
                    x,
                    build: Box::new(move |g, x| {
                        let mn = g.leaf(mask.clone());
                        let y = g.mul(x, mn);
                        Ok(weighted_sum(g, y, &red))
                    }),
                }])
            }),
        },
    ]
}

/// Entries bounded away from zero, for scale parameters.
fn positive_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = rand_tensor(shape, 0.5, rng);
    for v in t.data_mut() {
        *v += 1.0;
    }
    t
}

/// The planted-bug fixture: the function re-reads the input as a detached
/// constant, so the true derivative of Σx·x is 2x but the tape reports x.
/// Every check must flag it, proving the harness can see a wrong gradient.
fn self_test_row() -> RowDef {
    RowDef {
        name: "self-test/stale-constant",
        expect_fail: true,
        make: Box::new(|rng| {
            let mut x = rand_tensor(vec![2, 3], 1.0, rng);
            for v in x.data_mut() {
                // Bound entries away from zero so the relative error is
                // 0.5 at every coordinate.
                *v += 0.5 * v.signum() + if *v == 0.0 { 0.5 } else { 0.0 };
            }
            Ok(vec![Variant {
                x,
                build: Box::new(|g, x| {
                    let frozen = g.leaf(g.value(x).clone());
                    let p = g.mul(x, frozen);
                    Ok(g.sum(p))
                }),
            }])
        }),
    }
}

fn run_row(row: &RowDef, row_idx: u64, seed: u64, rounds: usize) -> Result<GradcheckRow> {
    let mut out = GradcheckRow {
        name: row.name,
        expect_fail: row.expect_fail,
        checks: 0,
        failures: 0,
        skipped: 0,
        max_rel_error: 0.0,
    };
    for round in 0..rounds {
        let mut rng = stream_rng(seed, Stream::Sample, &[row_idx, round as u64]);
        for variant in (row.make)(&mut rng)? {
            let report = gradient_check(variant.build.as_ref(), &variant.x, GRADCHECK_TOL)?;
            out.checks += 1;
            out.skipped += report.skipped.len();
            out.max_rel_error = out.max_rel_error.max(report.max_rel_error);
            if !report.passed {
                out.failures += 1;
            }
        }
    }
    Ok(out)
}

/// Gradient-check every loss kind, every layer primitive, and one planted
/// wrong-gradient fixture, over `rounds` seeded random inputs each.
pub fn cmd_gradcheck(seed: u64, rounds: usize) -> Result<GradcheckReport> {
    if rounds == 0 {
        return Err(Error::Config("gradcheck needs at least one round".into()));
    }
    let mut rows = loss_rows();
    rows.extend(layer_rows());
    rows.push(self_test_row());
    let results = rows
        .iter()
        .enumerate()
        .map(|(i, row)| run_row(row, i as u64, seed, rounds))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        tol: GRADCHECK_TOL,
        rounds,
        rows: results,
    })
}

/// One method's accuracy statistics across seeds.
#[derive(Debug, Clone)]
pub struct CompareRow {
    pub method: String,
    pub seeds: Vec<u64>,
    /// Final test accuracies, aligned with `seeds`.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub stddev: f64,
}

/// Accuracy table built from the metrics files in a directory.
#[derive(Debug, Clone)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    /// Expected runs with no usable metrics, and other integrity notes.
    pub missing: Vec<String>,
}

impl CompareReport {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }

    /// Machine-readable form: one tab-separated line per method.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("method\truns\tmean_accuracy\tstddev\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                row.method,
                row.seeds.len(),
                row.mean,
                row.stddev
            ));
        }
        out
    }
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .rows
            .iter()
            .map(|r| r.method.len())
            .max()
            .unwrap_or(6)
            .max("method".len());
        writeln!(f, "{:<width$}  runs  accuracy", "method", width = width)?;
        for row in &self.rows {
            writeln!(
                f,
                "{:<width$}  {:>4}  {:.4} ± {:.4}",
                row.method,
                row.seeds.len(),
                row.mean,
                row.stddev,
                width = width
            )?;
        }
        for m in &self.missing {
            writeln!(f, "missing: {}", m)?;
        }
        Ok(())
    }
}

/// Table order: the plain student baseline first, distillation methods
/// alphabetically, the teacher reference last.
fn method_order(name: &str) -> (u8, String) {
    let rank = match name {
        "student" => 0,
        "teacher" => 2,
        _ => 1,
    };
    (rank, name.to_string())
}

/// Build a comparison table from every metrics file under `dir`.
/// `expected` lists (method, seeds) pairs that must be present; anything
/// listed but absent is reported and flags the table as incomplete.
pub fn cmd_compare(dir: &Path, expected: &[(String, Vec<u64>)]) -> Result<CompareReport> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "tsv").unwrap_or(false))
        .collect();
    files.sort();

    let mut missing = Vec::new();
    let mut by_method: BTreeMap<String, BTreeMap<u64, f64>> = BTreeMap::new();
    for file in &files {
        let parsed = read_metrics(file)?;
        let name = file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match parsed.final_accuracy() {
            None => missing.push(format!(
                "{} seed {}: no accuracy recorded in {}",
                parsed.method, parsed.seed, name
            )),
            Some(acc) => {
                let prev = by_method
                    .entry(parsed.method.clone())
                    .or_default()
                    .insert(parsed.seed, acc);
                if prev.is_some() {
                    missing.push(format!(
                        "{} seed {}: duplicate metrics files (kept {})",
                        parsed.method, parsed.seed, name
                    ));
                }
            }
        }
    }
    for (method, seeds) in expected {
        for &seed in seeds {
            let found = by_method
                .get(method)
                .map(|m| m.contains_key(&seed))
                .unwrap_or(false);
            if !found {
                missing.push(format!("{} seed {}: metrics file not found", method, seed));
            }
        }
    }
    if by_method.is_empty() {
        return Err(Error::CheckFailed(format!(
            "no usable metrics files in {}",
            dir.display()
        )));
    }

    let mut rows: Vec<CompareRow> = by_method
        .into_iter()
        .map(|(method, runs)| {
            let seeds: Vec<u64> = runs.keys().copied().collect();
            let accuracies: Vec<f64> = runs.values().copied().collect();
            let n = accuracies.len() as f64;
            let mean = accuracies.iter().sum::<f64>() / n;
            let stddev = if accuracies.len() > 1 {
                (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            CompareRow {
                method,
                seeds,
                accuracies,
                mean,
                stddev,
            }
        })
        .collect();
    rows.sort_by_key(|r| method_order(&r.method));
    Ok(CompareReport { rows, missing })
}
