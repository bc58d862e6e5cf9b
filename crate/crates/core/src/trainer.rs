//! SGD training loops: plain cross-entropy runs and frozen-teacher
//! distillation runs share one engine, so a distillation run with every
//! soft weight at zero replays the plain trajectory bit for bit.

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::layers::{forward_train, init_params, predict, ForwardPass, ModelSpec, ParamStore};
use crate::losses::{combined_loss, BatchOutputs, LossSpec, SoftKind};
use crate::rng::{stream_rng, Stream};
use crate::sampling::{sample_kd_negatives, sample_pairs, sample_triplets, SamplingConfig};
use crate::tensor::Tensor;

/// Learning-rate decay policy.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    None,
    /// lr · factor^⌊epoch/period⌋.
    StepDecay { factor: f64, period: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: Schedule,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::None,
        }
    }
}

impl OptimConfig {
    /// 0.01 decayed by 0.1 every 100 epochs.
    pub fn cifar10_preset() -> Self {
        OptimConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::StepDecay {
                factor: 0.1,
                period: 100,
            },
        }
    }

    /// 0.001 decayed by 0.9 every 3 epochs.
    pub fn tiny_imagenet_preset() -> Self {
        OptimConfig {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::StepDecay {
                factor: 0.9,
                period: 3,
            },
        }
    }

    /// All violations, one message per offending field.
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        if self.lr <= 0.0 || !self.lr.is_finite() {
            v.push(format!("{}lr: must be > 0, got {}", prefix, self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!(
                "{}momentum: must be in [0, 1), got {}",
                prefix, self.momentum
            ));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            v.push(format!(
                "{}weight_decay: must be >= 0, got {}",
                prefix, self.weight_decay
            ));
        }
        if let Schedule::StepDecay { factor, period } = self.schedule {
            if factor <= 0.0 || !factor.is_finite() {
                v.push(format!(
                    "{}schedule.factor: must be > 0, got {}",
                    prefix, factor
                ));
            }
            if period == 0 {
                v.push(format!("{}schedule.period: must be >= 1", prefix));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("optimizer.");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

/// The shortest decimal form of `x` as (mantissa, power of ten), or None
/// when it is not a short positive decimal.
fn decimal_parts(x: f64) -> Option<(u128, i32)> {
    let s = format!("{}", x);
    if s.contains(['e', 'E', '-', 'i', 'N']) {
        return None;
    }
    let (int_part, frac_part) = match s.split_once('.') {
        Some((a, b)) => (a, b),
        None => (s.as_str(), ""),
    };
    let digits = format!("{}{}", int_part, frac_part);
    let mantissa: u128 = digits.parse().ok()?;
    Some((mantissa, -(frac_part.len() as i32)))
}

/// lr · factor^k evaluated in decimal integer space so that published
/// schedule tables are matched digit for digit (a single final rounding).
/// None when the operands are not short decimals or the result would lose
/// exactness; callers then fall back to float powering.
fn decimal_pow_scale(lr: f64, factor: f64, k: u32) -> Option<f64> {
    const EXACT_MANTISSA: u128 = 1 << 53;
    let (m_lr, e_lr) = decimal_parts(lr)?;
    let (m_f, e_f) = decimal_parts(factor)?;
    let mut m = m_lr;
    for _ in 0..k {
        m = m.checked_mul(m_f)?;
        if m > EXACT_MANTISSA {
            return None;
        }
    }
    if m > EXACT_MANTISSA {
        return None;
    }
    let e = e_lr.checked_add(e_f.checked_mul(k as i32)?)?;
    if e.abs() > 22 {
        return None;
    }
    let m = m as f64;
    Some(if e >= 0 {
        m * 10f64.powi(e)
    } else {
        m / 10f64.powi(-e)
    })
}

pub fn lr_at_epoch(cfg: &OptimConfig, epoch: usize) -> f64 {
    match cfg.schedule {
        Schedule::None => cfg.lr,
        Schedule::StepDecay { factor, period } => {
            let k = (epoch / period.max(1)) as u32;
            decimal_pow_scale(cfg.lr, factor, k).unwrap_or_else(|| cfg.lr * factor.powi(k as i32))
        }
    }
}

/// One line of the per-epoch history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean unweighted cross-entropy over the epoch's steps.
    pub hard: Option<f64>,
    /// Mean unweighted value per active soft term, in spec order.
    pub soft: Vec<(SoftKind, f64)>,
    /// Mean combined loss.
    pub total: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Combined loss of every optimizer step, across all epochs.
    pub step_totals: Vec<f64>,
    /// Batches whose triplet term saw no valid anchor/negative pair.
    pub empty_anchor_batches: usize,
}

/// Mutable optimizer state threaded through a run.
pub struct TrainState {
    pub epoch: usize,
    pub seed: u64,
    velocity: Vec<Tensor>,
    pub log: TrainLog,
}

impl TrainState {
    pub fn new(store: &ParamStore, seed: u64) -> Self {
        TrainState {
            epoch: 0,
            seed,
            velocity: store
                .items()
                .iter()
                .map(|item| Tensor::zeros(item.value.shape().to_vec()))
                .collect(),
            log: TrainLog::default(),
        }
    }
}

/// Gradient tensors for every differentiable leaf of a recorded pass,
/// keyed by store index. Leaves the loss never touched get zeros so the
/// momentum and decay updates still apply to them.
pub fn collect_gradients(g: &Graph, pass: &ForwardPass, grads: &Gradients) -> Vec<(usize, Tensor)> {
    pass.params
        .iter()
        .map(|&(idx, node)| (idx, grads.get_or_zeros(node, g)))
        .collect()
}

/// One SGD-with-momentum update: g' = g + wd·w, v ← μ·v + g', w ← w − lr·v.
/// Weight decay touches only items flagged for it.
pub fn sgd_step(
    store: &mut ParamStore,
    state: &mut TrainState,
    grads: &[(usize, Tensor)],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (idx, grad) in grads {
        if *idx >= store.items().len() {
            return Err(Error::Contract(format!(
                "gradient for parameter index {} but the store holds {}",
                idx,
                store.items().len()
            )));
        }
        let item = &mut store.items_mut()[*idx];
        if !item.trainable {
            return Err(Error::Contract(format!(
                "gradient supplied for non-trainable entry '{}'",
                item.name
            )));
        }
        if grad.shape() != item.value.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} does not match parameter '{}' of shape {:?}",
                grad.shape(),
                item.name,
                item.value.shape()
            )));
        }
        let wd = if item.decay { weight_decay } else { 0.0 };
        let v = state.velocity[*idx].data_mut();
        let w = item.value.data_mut();
        let mut finite = true;
        for ((w_i, v_i), &g_i) in w.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
            let g_eff = g_i + wd * *w_i;
            *v_i = momentum * *v_i + g_eff;
            *w_i -= lr * *v_i;
            finite &= w_i.is_finite();
        }
        // A saturated loss can mask corrupt weights (rectifiers map NaN
        // to zero), so divergence is caught at the parameters too.
        if !finite {
            return Err(Error::Numeric(format!(
                "parameter '{}' became non-finite after an update",
                item.name
            )));
        }
    }
    Ok(())
}

/// Fraction of samples whose argmax logit matches the label, in inference
/// mode (running batchnorm statistics, dropout off). Argmax ties resolve
/// to the lowest class index.
pub fn evaluate_accuracy(spec: &ModelSpec, store: &ParamStore, data: &Dataset) -> Result<f64> {
    const EVAL_BATCH: usize = 256;
    if data.is_empty() {
        return Err(Error::Contract(
            "cannot evaluate accuracy on an empty dataset".into(),
        ));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in order.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk);
        let logits = predict(spec, store, &x)?;
        let k = logits.shape()[1];
        for (row, &label) in labels.iter().enumerate() {
            let scores = &logits.data()[row * k..(row + 1) * k];
            let pred = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Less))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Plain cross-entropy training from a fresh seeded initialization.
/// Records per-epoch mean train loss and, when a test set is given, test
/// accuracy. A non-finite loss aborts with the offending epoch and step.
pub fn train_teacher(
    spec: &ModelSpec,
    train: &Dataset,
    test: Option<&Dataset>,
    optim: &OptimConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(ParamStore, TrainLog)> {
    run_training(
        spec,
        None,
        &LossSpec::hard_only(),
        &SamplingConfig::default(),
        train,
        test,
        optim,
        epochs,
        batch_size,
        seed,
    )
}

/// Distillation: the teacher runs in inference mode and enters the graph
/// as a constant, the student trains against the combined objective, and
/// only student parameters are updated.
#[allow(clippy::too_many_arguments)]
pub fn distill_student(
    student: &ModelSpec,
    teacher: &ModelSpec,
    teacher_params: &ParamStore,
    train: &Dataset,
    test: Option<&Dataset>,
    loss: &LossSpec,
    sampling: &SamplingConfig,
    optim: &OptimConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(ParamStore, TrainLog)> {
    if student.classes != teacher.classes {
        return Err(Error::Contract(format!(
            "student and teacher output widths differ: {} vs {}",
            student.classes, teacher.classes
        )));
    }
    run_training(
        student,
        Some((teacher, teacher_params)),
        loss,
        sampling,
        train,
        test,
        optim,
        epochs,
        batch_size,
        seed,
    )
}

struct EpochSums {
    kinds: Vec<SoftKind>,
    hard: f64,
    saw_hard: bool,
    soft: Vec<f64>,
    total: f64,
    steps: usize,
}

impl EpochSums {
    fn new(kinds: &[SoftKind]) -> Self {
        EpochSums {
            kinds: kinds.to_vec(),
            hard: 0.0,
            saw_hard: false,
            soft: vec![0.0; kinds.len()],
            total: 0.0,
            steps: 0,
        }
    }

    fn add(&mut self, hard: Option<f64>, soft: &[(SoftKind, f64, f64)], total: f64) {
        if let Some(h) = hard {
            self.hard += h;
            self.saw_hard = true;
        }
        debug_assert_eq!(soft.len(), self.soft.len());
        for (slot, (_, value, _)) in self.soft.iter_mut().zip(soft) {
            *slot += value;
        }
        self.total += total;
        self.steps += 1;
    }

    fn record(self, epoch: usize, lr: f64, test_accuracy: Option<f64>) -> EpochRecord {
        let n = self.steps.max(1) as f64;
        EpochRecord {
            epoch,
            lr,
            hard: self.saw_hard.then_some(self.hard / n),
            soft: self
                .kinds
                .iter()
                .zip(&self.soft)
                .map(|(&k, &s)| (k, s / n))
                .collect(),
            total: self.total / n,
            test_accuracy,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    spec: &ModelSpec,
    teacher: Option<(&ModelSpec, &ParamStore)>,
    loss: &LossSpec,
    sampling: &SamplingConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    optim: &OptimConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(ParamStore, TrainLog)> {
    optim.validate()?;
    loss.validate()?;
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if train.is_empty() {
        return Err(Error::Contract("training dataset is empty".into()));
    }
    if spec.classes != train.classes {
        return Err(Error::Contract(format!(
            "model emits {} classes but the dataset declares {}",
            spec.classes, train.classes
        )));
    }
    let soft_active: Vec<SoftKind> = loss
        .soft
        .iter()
        .filter(|t| t.lambda > 0.0)
        .map(|t| t.kind)
        .collect();
    if teacher.is_none() && !soft_active.is_empty() {
        return Err(Error::Contract(
            "soft loss terms need a teacher model".into(),
        ));
    }
    let needs = |k: SoftKind| soft_active.contains(&k);
    let sole_triplet = soft_active == [SoftKind::TripletKd];

    let mut store = init_params(spec, &mut stream_rng(seed, Stream::Init, &[]))?;
    let mut state = TrainState::new(&store, seed);

    for epoch in 0..epochs {
        state.epoch = epoch;
        let lr = lr_at_epoch(optim, epoch);
        let plan = batches(train.len(), batch_size, seed, epoch as u64);
        let mut sums = EpochSums::new(&soft_active);
        let mut triplet_fired = false;

        for (step, indices) in plan.iter().enumerate() {
            let (x, labels) = train.batch(indices);
            let n = labels.len();
            let mut g = Graph::new();
            // The teacher pass runs on its own graph; only its values
            // enter this one, as a constant leaf.
            let teacher_logits = match teacher {
                Some((t_spec, t_params)) => g.leaf(predict(t_spec, t_params, &x)?),
                None => g.leaf(Tensor::zeros(vec![n, spec.classes])),
            };
            let mut drop_rng = stream_rng(seed, Stream::Dropout, &[epoch as u64, step as u64]);
            let pass = forward_train(&mut g, spec, &mut store, &x, &mut drop_rng)?;

            let mut sample_rng = stream_rng(seed, Stream::Sample, &[epoch as u64, step as u64]);
            let pairs = if needs(SoftKind::RkdD) {
                sample_pairs(n, sampling.pairs.unwrap_or(n), &mut sample_rng)?
            } else {
                Vec::new()
            };
            let triplets = if needs(SoftKind::RkdA) {
                sample_triplets(n, sampling.triplets.unwrap_or(n), &mut sample_rng)?
            } else {
                Vec::new()
            };
            let anchor_negatives = if needs(SoftKind::TripletKd) {
                sample_kd_negatives(
                    g.value(teacher_logits),
                    Some(g.value(pass.output)),
                    Some(&labels),
                    sampling.per_anchor,
                    sampling.strategy,
                    sampling.negative_by,
                    &mut sample_rng,
                )?
            } else {
                Vec::new()
            };

            let outs = BatchOutputs {
                teacher_logits,
                student_logits: pass.output,
                labels: labels.clone(),
                pairs,
                triplets,
                anchor_negatives,
            };
            let (total, breakdown) = combined_loss(&mut g, loss, &outs)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became non-finite ({}) at epoch {} step {}; lower the learning rate",
                    breakdown.total, epoch, step
                )));
            }
            let grads = g.backward(total)?;
            let updates = collect_gradients(&g, &pass, &grads);
            sgd_step(
                &mut store,
                &mut state,
                &updates,
                lr,
                optim.momentum,
                optim.weight_decay,
            )
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!(
                    "{} at epoch {} step {}; lower the learning rate",
                    m, epoch, step
                )),
                other => other,
            })?;

            if breakdown.empty_anchor_set {
                state.log.empty_anchor_batches += 1;
            } else if needs(SoftKind::TripletKd) {
                triplet_fired = true;
            }
            sums.add(breakdown.hard, &breakdown.soft, breakdown.total);
            state.log.step_totals.push(breakdown.total);
        }

        if sole_triplet && !triplet_fired {
            return Err(Error::Contract(format!(
                "the triplet distillation term never fired in epoch {}: every batch produced \
                 an empty anchor/negative set. The batches are class-homogeneous; raise the \
                 batch size or use data with more class mixing",
                epoch
            )));
        }
        let test_accuracy = match test {
            Some(d) => Some(evaluate_accuracy(spec, &store, d)?),
            None => None,
        };
        state.log.epochs.push(sums.record(epoch, lr, test_accuracy));
    }
    Ok((store, state.log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::mlp;
    use crate::checkpoint::checkpoint_bytes;
    use crate::data::synth_blobs;
    use crate::losses::SoftTerm;

    fn scalar_store(values: &[(f64, bool)]) -> ParamStore {
        let mut store = ParamStore::default();
        for (i, &(w, decay)) in values.iter().enumerate() {
            store.push(crate::layers::ParamItem {
                name: format!("p{}", i),
                value: Tensor::new(vec![1], vec![w]).unwrap(),
                trainable: true,
                decay,
            });
        }
        store
    }

    #[test]
    fn schedule_matches_published_tables() {
        let cifar = OptimConfig::cifar10_preset();
        assert_eq!(lr_at_epoch(&cifar, 0), 0.01);
        assert_eq!(lr_at_epoch(&cifar, 99), 0.01);
        assert_eq!(lr_at_epoch(&cifar, 100), 0.001);
        assert_eq!(lr_at_epoch(&cifar, 200), 1e-4);

        let tin = OptimConfig::tiny_imagenet_preset();
        assert_eq!(lr_at_epoch(&tin, 0), 0.001);
        assert_eq!(lr_at_epoch(&tin, 2), 0.001);
        assert_eq!(lr_at_epoch(&tin, 3), 0.0009);
        assert_eq!(lr_at_epoch(&tin, 6), 0.00081);

        let flat = OptimConfig {
            lr: 0.3,
            momentum: 0.0,
            weight_decay: 0.0,
            schedule: Schedule::None,
        };
        assert_eq!(lr_at_epoch(&flat, 12345), 0.3);
    }

    #[test]
    fn decimal_scaling_falls_back_gracefully() {
        use std::hint::black_box;
        // An awkward factor forces the float path, which must agree with
        // direct powering. black_box keeps the reference expressions from
        // being folded at compile time with different rounding.
        let factor = black_box(1.0f64 / 3.0);
        let cfg = OptimConfig {
            lr: 0.007,
            momentum: 0.0,
            weight_decay: 0.0,
            schedule: Schedule::StepDecay { factor, period: 1 },
        };
        let expected = black_box(0.007f64) * factor.powi(5);
        assert_eq!(lr_at_epoch(&cfg, 5), expected);
        // Deep decay overflows the decimal mantissa and falls back too.
        let tin = OptimConfig::tiny_imagenet_preset();
        let deep = lr_at_epoch(&tin, 300);
        let expected_deep = black_box(0.001f64) * black_box(0.9f64).powi(100);
        assert_eq!(deep, expected_deep);
    }

    #[test]
    fn sgd_null_update_and_plain_descent() {
        let mut store = scalar_store(&[(2.0, false)]);
        let mut state = TrainState::new(&store, 0);
        let zero = vec![(0usize, Tensor::new(vec![1], vec![0.0]).unwrap())];
        sgd_step(&mut store, &mut state, &zero, 0.5, 0.9, 0.0).unwrap();
        assert_eq!(store.items()[0].value.data(), &[2.0]);

        let g = vec![(0usize, Tensor::new(vec![1], vec![3.0]).unwrap())];
        let mut store = scalar_store(&[(2.0, false)]);
        let mut state = TrainState::new(&store, 0);
        sgd_step(&mut store, &mut state, &g, 0.1, 0.0, 0.0).unwrap();
        assert!((store.items()[0].value.data()[0] - 1.7).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_recursion_two_steps() {
        let mut store = scalar_store(&[(0.0, false)]);
        let mut state = TrainState::new(&store, 0);
        let g = vec![(0usize, Tensor::new(vec![1], vec![1.0]).unwrap())];
        sgd_step(&mut store, &mut state, &g, 0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut store, &mut state, &g, 0.1, 0.9, 0.0).unwrap();
        assert!((store.items()[0].value.data()[0] - (-0.29)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_only_touches_flagged_items() {
        let mut store = scalar_store(&[(1.0, true), (1.0, false)]);
        let mut state = TrainState::new(&store, 0);
        let zero = Tensor::new(vec![1], vec![0.0]).unwrap();
        let grads = vec![(0usize, zero.clone()), (1usize, zero)];
        sgd_step(&mut store, &mut state, &grads, 1.0, 0.0, 0.5).unwrap();
        assert!((store.items()[0].value.data()[0] - 0.5).abs() < 1e-15);
        assert_eq!(store.items()[1].value.data(), &[1.0]);
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let mut store = scalar_store(&[(1.0, false)]);
        let mut state = TrainState::new(&store, 0);
        let bad = vec![(0usize, Tensor::new(vec![2], vec![1.0, 1.0]).unwrap())];
        let err = sgd_step(&mut store, &mut state, &bad, 0.1, 0.9, 0.0).unwrap_err();
        assert!(err.to_string().contains("shape"));
    }

    #[test]
    fn zero_epochs_returns_untouched_initialization() {
        let spec = mlp(4, &[8], 3);
        let data = synth_blobs(3, 5, 4, 0.1, 9).unwrap();
        let (store, log) = train_teacher(&spec, &data, None, &flat_optim(0.1), 0, 5, 77).unwrap();
        let fresh = init_params(&spec, &mut stream_rng(77, Stream::Init, &[])).unwrap();
        assert_eq!(
            checkpoint_bytes(&store).unwrap(),
            checkpoint_bytes(&fresh).unwrap()
        );
        assert!(log.epochs.is_empty());
        assert!(log.step_totals.is_empty());
    }

    fn flat_optim(lr: f64) -> OptimConfig {
        OptimConfig {
            lr,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: Schedule::None,
        }
    }

    #[test]
    fn teacher_separates_synthetic_blobs() {
        let spec = mlp(4, &[], 3);
        let data = synth_blobs(3, 40, 4, 0.1, 5).unwrap();
        let (train, test) = data.stratified_split(30).unwrap();
        let (_, log) =
            train_teacher(&spec, &train, Some(&test), &flat_optim(0.5), 40, 15, 3).unwrap();
        let final_acc = log.epochs.last().unwrap().test_accuracy.unwrap();
        assert!(final_acc >= 0.95, "accuracy {}", final_acc);
        // Loss should have dropped substantially from the first epoch.
        assert!(log.epochs.last().unwrap().total < log.epochs[0].total);

        let (_, again) =
            train_teacher(&spec, &train, Some(&test), &flat_optim(0.5), 40, 15, 3).unwrap();
        assert_eq!(log.step_totals, again.step_totals);
        assert_eq!(
            log.epochs.last().unwrap().test_accuracy,
            again.epochs.last().unwrap().test_accuracy
        );
    }

    #[test]
    fn divergence_aborts_with_location() {
        // A step size this large overflows the second-layer matmul on the
        // next forward pass (inf − inf), which must abort, not propagate.
        let spec = mlp(4, &[8], 3);
        let data = synth_blobs(3, 10, 4, 0.1, 5).unwrap();
        let err = train_teacher(&spec, &data, None, &flat_optim(1e300), 3, 10, 3).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epoch") && msg.contains("step"), "{}", msg);
    }

    fn trained_teacher(seed: u64) -> (ModelSpec, ParamStore, Dataset, Dataset) {
        let spec = mlp(4, &[16], 3);
        let data = synth_blobs(3, 40, 4, 0.25, seed).unwrap();
        let (train, test) = data.stratified_split(30).unwrap();
        let (params, _) =
            train_teacher(&spec, &train, None, &flat_optim(0.3), 25, 15, seed).unwrap();
        (spec, params, train, test)
    }

    #[test]
    fn all_zero_lambdas_replay_plain_training_exactly() {
        let (t_spec, t_params, train, _) = trained_teacher(21);
        let student = mlp(4, &[], 3);
        let loss = LossSpec {
            soft: vec![SoftTerm {
                kind: SoftKind::Bkd,
                lambda: 0.0,
            }],
            ..LossSpec::hard_only()
        };
        let before = checkpoint_bytes(&t_params).unwrap();
        let (plain_store, plain_log) =
            train_teacher(&student, &train, None, &flat_optim(0.2), 6, 15, 4).unwrap();
        let (dist_store, dist_log) = distill_student(
            &student,
            &t_spec,
            &t_params,
            &train,
            None,
            &loss,
            &SamplingConfig::default(),
            &flat_optim(0.2),
            6,
            15,
            4,
        )
        .unwrap();
        assert_eq!(plain_log.step_totals, dist_log.step_totals);
        assert_eq!(
            checkpoint_bytes(&plain_store).unwrap(),
            checkpoint_bytes(&dist_store).unwrap()
        );
        assert_eq!(before, checkpoint_bytes(&t_params).unwrap());
    }

    #[test]
    fn full_soft_stack_trains_and_logs_every_term() {
        let (t_spec, t_params, train, test) = trained_teacher(31);
        let student = mlp(4, &[], 3);
        let loss = LossSpec {
            soft: vec![
                SoftTerm {
                    kind: SoftKind::Bkd,
                    lambda: 0.5,
                },
                SoftTerm {
                    kind: SoftKind::Hkd,
                    lambda: 1.0,
                },
                SoftTerm {
                    kind: SoftKind::RkdD,
                    lambda: 1.0,
                },
                SoftTerm {
                    kind: SoftKind::RkdA,
                    lambda: 1.0,
                },
                SoftTerm {
                    kind: SoftKind::TripletKd,
                    lambda: 2.0,
                },
            ],
            temperature: 4.0,
            margin: 5.0,
            ..LossSpec::hard_only()
        };
        let (_, log) = distill_student(
            &student,
            &t_spec,
            &t_params,
            &train,
            Some(&test),
            &loss,
            &SamplingConfig::default(),
            &flat_optim(0.1),
            2,
            15,
            8,
        )
        .unwrap();
        assert_eq!(log.epochs.len(), 2);
        for record in &log.epochs {
            assert!(record.hard.is_some());
            assert_eq!(record.soft.len(), 5);
            assert!(record.soft.iter().all(|(_, v)| v.is_finite()));
            assert!(record.test_accuracy.is_some());
        }
    }

    #[test]
    fn homogeneous_batches_abort_triplet_only_distillation() {
        let (t_spec, t_params, _, _) = trained_teacher(41);
        let student = mlp(4, &[], 3);
        // Every label identical: no anchor ever finds a negative.
        let samples = Tensor::new(vec![6, 4], vec![0.1; 24]).unwrap();
        let flat = Dataset::new(samples, vec![0; 6], 3, "train").unwrap();
        let loss = LossSpec {
            soft: vec![SoftTerm {
                kind: SoftKind::TripletKd,
                lambda: 2.0,
            }],
            margin: 5.0,
            ..LossSpec::hard_only()
        };
        let sampling = SamplingConfig {
            negative_by: crate::sampling::NegativeBy::GroundTruth,
            ..SamplingConfig::default()
        };
        let err = distill_student(
            &student,
            &t_spec,
            &t_params,
            &flat,
            None,
            &loss,
            &sampling,
            &flat_optim(0.1),
            2,
            3,
            8,
        )
        .unwrap_err();
        assert!(err.to_string().contains("anchor"), "{}", err);
    }

    #[test]
    fn distill_rejects_width_mismatch() {
        let (t_spec, t_params, train, _) = trained_teacher(51);
        let student = mlp(4, &[], 5);
        let err = distill_student(
            &student,
            &t_spec,
            &t_params,
            &train,
            None,
            &LossSpec::hard_only(),
            &SamplingConfig::default(),
            &flat_optim(0.1),
            1,
            15,
            8,
        )
        .unwrap_err();
        assert!(err.to_string().contains("width"));
    }

    #[test]
    fn accuracy_of_constant_and_perfect_models() {
        // Constant model: zero weights, bias pinning class 1.
        let spec = mlp(3, &[], 3);
        let mut store = init_params(&spec, &mut stream_rng(0, Stream::Init, &[])).unwrap();
        for item in store.items_mut() {
            let v = item.value.data_mut();
            v.iter_mut().for_each(|x| *x = 0.0);
            if item.name.ends_with("bias") {
                v[1] = 1.0;
            }
        }
        let samples = Tensor::new(vec![3, 3], vec![0.5; 9]).unwrap();
        let balanced = Dataset::new(samples, vec![0, 1, 2], 3, "test").unwrap();
        let acc = evaluate_accuracy(&spec, &store, &balanced).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 1e-15);

        // Identity weights turn one-hot inputs into their own logits.
        let mut perfect = init_params(&spec, &mut stream_rng(0, Stream::Init, &[])).unwrap();
        for item in perfect.items_mut() {
            let shape = item.value.shape().to_vec();
            let v = item.value.data_mut();
            v.iter_mut().for_each(|x| *x = 0.0);
            if shape.len() == 2 {
                for i in 0..shape[0].min(shape[1]) {
                    v[i * shape[1] + i] = 1.0;
                }
            }
        }
        let onehot = Tensor::new(
            vec![3, 3],
            vec![5.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 5.0],
        )
        .unwrap();
        let lookup = Dataset::new(onehot, vec![0, 1, 2], 3, "test").unwrap();
        assert_eq!(evaluate_accuracy(&spec, &perfect, &lookup).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_matches_per_sample_recount() {
        let spec = mlp(4, &[6], 3);
        let store = init_params(&spec, &mut stream_rng(123, Stream::Init, &[])).unwrap();
        let data = synth_blobs(3, 20, 4, 0.4, 9).unwrap();
        let fast = evaluate_accuracy(&spec, &store, &data).unwrap();
        let mut correct = 0usize;
        for i in 0..data.len() {
            let (x, labels) = data.batch(&[i]);
            let logits = predict(&spec, &store, &x).unwrap();
            let row = logits.data();
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == labels[0] {
                correct += 1;
            }
        }
        assert_eq!(fast, correct as f64 / data.len() as f64);
    }
}
