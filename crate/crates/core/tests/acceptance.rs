//! Acceptance gate. Each test checks one published claim end to end and
//! prints a single verdict line (visible with --nocapture, or on failure).
//! Tolerances are pinned as constants next to the checks that use them.

use std::fs;
use std::path::Path;

use tridistill::arch::{cifar_student, cifar_teacher, mlp, vgg11, vgg19_bn};
use tridistill::config::{DatasetConfig, ExperimentConfig};
use tridistill::graph::{Graph, NodeId};
use tridistill::harness::{cmd_distill, cmd_gradcheck, cmd_train_teacher};
use tridistill::losses::{
    bkd_loss, combined_loss, contrastive_loss, cross_entropy_loss, hkd_loss, huber, kl_divergence,
    pairwise_distance, psi_angle, psi_distance, rkd_a_loss, rkd_d_loss, rkd_da_loss,
    triplet_kd_loss, triplet_metric_loss, BatchOutputs, LossSpec, PsiNorm, SoftKind, SoftTerm,
};
use tridistill::sampling::SamplingConfig;
use tridistill::tensor::Tensor;
use tridistill::trainer::{
    distill_student, evaluate_accuracy, lr_at_epoch, train_teacher, OptimConfig, Schedule,
};

fn verdict(criterion: usize, ok: bool, detail: &str) {
    let word = if ok { "PASS" } else { "FAIL" };
    println!("criterion {}: {} - {}", criterion, word, detail);
    assert!(ok, "criterion {} failed: {}", criterion, detail);
}

fn matrix(g: &mut Graph, rows: &[&[f64]], constant: bool) -> NodeId {
    let k = rows[0].len();
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    let t = Tensor::new(vec![rows.len(), k], flat).unwrap();
    if constant {
        g.leaf(t)
    } else {
        g.param(t)
    }
}

// ---------------------------------------------------------------------
// 1. Published parameter counts and size ratios.

#[test]
fn criterion_1_parameter_counts() {
    const RATIO_TOL: f64 = 0.05;

    let student = cifar_student().count_params().unwrap();
    let teacher = cifar_teacher(0.5).count_params().unwrap();
    let pair_ratio = 100.0 * student as f64 / teacher as f64;

    let v11 = vgg11(64, 200).count_params().unwrap();
    let v19 = vgg19_bn(64, 200).count_params().unwrap();
    let vgg_ratio = 100.0 * v11 as f64 / v19 as f64;

    let ok = student == 161_130
        && teacher == 1_256_106
        && (pair_ratio - 12.8).abs() <= RATIO_TOL
        && v11 == 35_213_896
        && v19 == 46_028_808
        && (vgg_ratio - 76.5).abs() <= RATIO_TOL;
    verdict(
        1,
        ok,
        &format!(
            "student {} / teacher {} ({:.2}%), vgg11 {} / vgg19-bn {} ({:.2}%)",
            student, teacher, pair_ratio, v11, v19, vgg_ratio
        ),
    );
}

// ---------------------------------------------------------------------
// 2. Finite-difference agreement across every loss and layer.

#[test]
fn criterion_2_gradient_suite() {
    const ROUNDS: usize = 20;

    let report = cmd_gradcheck(0, ROUNDS).unwrap();
    let worst = report
        .rows
        .iter()
        .filter(|r| !r.expect_fail)
        .map(|r| r.max_rel_error)
        .fold(0.0f64, f64::max);
    verdict(
        2,
        report.passed(),
        &format!(
            "{} surfaces x {} rounds, tol {:.0e}, worst rel err {:.2e}, planted bug detected",
            report.rows.len(),
            report.rounds,
            report.tol,
            worst
        ),
    );
}

// ---------------------------------------------------------------------
// 3. Worked loss examples recomputed by straight-line scalar code.

/// Independent scalar reimplementation of every loss. No graph, no
/// shared helpers; each function is plain f64 arithmetic over slices.
mod oracle {
    pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    pub fn dist(a: &[f64], b: &[f64]) -> f64 {
        dist_sq(a, b).sqrt()
    }

    pub fn softmax(x: &[f64]) -> Vec<f64> {
        let total: f64 = x.iter().map(|v| v.exp()).sum();
        x.iter().map(|v| v.exp() / total).collect()
    }

    pub fn kl(p: &[f64], q: &[f64]) -> f64 {
        p.iter()
            .zip(q)
            .map(|(&pi, &qi)| pi * (pi.max(1e-12).ln() - qi.max(1e-12).ln()))
            .sum()
    }

    pub fn huber(p: f64, q: f64) -> f64 {
        let d = p - q;
        if d.abs() <= 1.0 {
            0.5 * d * d
        } else {
            d.abs() - 0.5
        }
    }

    pub fn contrastive(rows: &[&[f64]], pairs: &[(usize, usize, bool)], m: f64) -> f64 {
        let mut total = 0.0;
        for &(i, j, same) in pairs {
            if same {
                total += dist_sq(rows[i], rows[j]);
            } else {
                let gap = (m - dist(rows[i], rows[j])).max(0.0);
                total += gap * gap;
            }
        }
        total / (2.0 * pairs.len() as f64)
    }

    pub fn triplet_metric(rows: &[&[f64]], triplets: &[(usize, usize, usize)], m: f64) -> f64 {
        triplets
            .iter()
            .map(|&(a, p, n)| (m + dist_sq(rows[a], rows[p]) - dist_sq(rows[a], rows[n])).max(0.0))
            .sum()
    }

    pub fn bkd(t: &[&[f64]], s: &[&[f64]]) -> f64 {
        0.5 * t.iter().zip(s).map(|(tr, sr)| dist_sq(tr, sr)).sum::<f64>()
    }

    pub fn hkd(t: &[&[f64]], s: &[&[f64]], temp: f64, t2: bool) -> f64 {
        let total: f64 = t
            .iter()
            .zip(s)
            .map(|(tr, sr)| {
                let pt: Vec<f64> = tr.iter().map(|v| v / temp).collect();
                let ps: Vec<f64> = sr.iter().map(|v| v / temp).collect();
                kl(&softmax(&pt), &softmax(&ps))
            })
            .sum();
        if t2 {
            total * temp * temp
        } else {
            total
        }
    }

    pub fn psi_d(rows: &[&[f64]], pairs: &[(usize, usize)]) -> Vec<f64> {
        let dists: Vec<f64> = pairs.iter().map(|&(i, j)| dist(rows[i], rows[j])).collect();
        let total: f64 = dists.iter().sum();
        dists.iter().map(|d| d / total).collect()
    }

    pub fn rkd_d(t: &[&[f64]], s: &[&[f64]], pairs: &[(usize, usize)]) -> f64 {
        let pt = psi_d(t, pairs);
        let ps = psi_d(s, pairs);
        pt.iter().zip(&ps).map(|(&a, &b)| huber(a, b)).sum()
    }

    pub fn cos_at(rows: &[&[f64]], i: usize, j: usize, k: usize) -> f64 {
        let dij = dist(rows[i], rows[j]);
        let dkj = dist(rows[k], rows[j]);
        rows[i]
            .iter()
            .zip(rows[j])
            .zip(rows[k])
            .map(|((&a, &b), &c)| ((a - b) / dij) * ((c - b) / dkj))
            .sum()
    }

    pub fn rkd_a(t: &[&[f64]], s: &[&[f64]], triplets: &[(usize, usize, usize)]) -> f64 {
        triplets
            .iter()
            .map(|&(i, j, k)| huber(cos_at(t, i, j, k), cos_at(s, i, j, k)))
            .sum()
    }

    pub fn rkd_da(
        t: &[&[f64]],
        s: &[&[f64]],
        pairs: &[(usize, usize)],
        triplets: &[(usize, usize, usize)],
        ld: f64,
        la: f64,
    ) -> f64 {
        ld * rkd_d(t, s, pairs) + la * rkd_a(t, s, triplets)
    }

    pub fn triplet_kd(t: &[&[f64]], s: &[&[f64]], omega: &[(usize, usize)], m: f64) -> f64 {
        omega
            .iter()
            .map(|&(a, n)| (m + dist_sq(t[a], s[a]) - dist_sq(t[a], s[n])).max(0.0))
            .sum()
    }

    pub fn cross_entropy(logits: &[&[f64]], labels: &[usize]) -> f64 {
        let total: f64 = logits
            .iter()
            .zip(labels)
            .map(|(row, &y)| -softmax(row)[y].max(1e-12).ln())
            .sum();
        total / logits.len() as f64
    }
}

#[test]
fn criterion_3_loss_oracles() {
    const ORACLE_TOL: f64 = 1e-9;

    let mut worst = 0.0f64;
    let mut check = |name: &str, module: f64, oracle: f64, literal: Option<(f64, f64)>| {
        let dev = (module - oracle).abs();
        assert!(
            dev <= ORACLE_TOL,
            "{}: module {} vs oracle {} (dev {:.3e})",
            name,
            module,
            oracle,
            dev
        );
        if let Some((want, tol)) = literal {
            assert!(
                (module - want).abs() <= tol,
                "{}: module {} vs published {} (tol {})",
                name,
                module,
                want,
                tol
            );
        }
        worst = worst.max(dev);
    };

    // Euclidean distance: the 3-4-5 triangle.
    {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![0.0, 0.0]));
        let b = g.leaf(Tensor::from_vec(vec![3.0, 4.0]));
        let d = pairwise_distance(&mut g, a, b).unwrap();
        check(
            "pairwise_distance",
            g.value(d).item(),
            oracle::dist(&[0.0, 0.0], &[3.0, 4.0]),
            Some((5.0, 0.0)),
        );
    }

    // Contrastive: one similar pair at distance 2, then one dissimilar
    // pair inside the margin.
    {
        let rows: &[&[f64]] = &[&[0.0, 0.0], &[2.0, 0.0]];
        let mut g = Graph::new();
        let e = matrix(&mut g, rows, false);
        let same = contrastive_loss(&mut g, e, &[(0, 1, true)], 1.0).unwrap();
        check(
            "contrastive/similar",
            g.value(same).item(),
            oracle::contrastive(rows, &[(0, 1, true)], 1.0),
            Some((2.0, 0.0)),
        );
        let diff = contrastive_loss(&mut g, e, &[(0, 1, false)], 3.0).unwrap();
        check(
            "contrastive/dissimilar",
            g.value(diff).item(),
            oracle::contrastive(rows, &[(0, 1, false)], 3.0),
            Some((0.5, 0.0)),
        );
    }

    // Metric triplet: m=1, positive gap 1, negative gap 1.5.
    {
        let rows: &[&[f64]] = &[&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[0.5, 0.5, 1.0]];
        let mut g = Graph::new();
        let e = matrix(&mut g, rows, false);
        let v = triplet_metric_loss(&mut g, e, &[(0, 1, 2)], 1.0).unwrap();
        check(
            "triplet_metric",
            g.value(v).item(),
            oracle::triplet_metric(rows, &[(0, 1, 2)], 1.0),
            Some((0.5, 0.0)),
        );
    }

    // BKD: unit squared distance on both coordinates.
    {
        let t: &[&[f64]] = &[&[1.0, 0.0]];
        let s: &[&[f64]] = &[&[0.0, 1.0]];
        let mut g = Graph::new();
        let tn = matrix(&mut g, t, true);
        let sn = matrix(&mut g, s, false);
        let v = bkd_loss(&mut g, tn, sn).unwrap();
        check(
            "bkd",
            g.value(v).item(),
            oracle::bkd(t, s),
            Some((1.0, 0.0)),
        );
    }

    // KL of a point mass against the uniform pair.
    {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::from_vec(vec![1.0, 0.0]));
        let q = g.leaf(Tensor::from_vec(vec![0.5, 0.5]));
        let v = kl_divergence(&mut g, p, q).unwrap();
        check(
            "kl_divergence",
            g.value(v).item(),
            oracle::kl(&[1.0, 0.0], &[0.5, 0.5]),
            Some((std::f64::consts::LN_2, 1e-12)),
        );
    }

    // HKD at T=1 on swapped confident logits; the closed form is twice
    // the softmax gap.
    {
        let t: &[&[f64]] = &[&[2.0, 0.0]];
        let s: &[&[f64]] = &[&[0.0, 2.0]];
        let mut g = Graph::new();
        let tn = matrix(&mut g, t, true);
        let sn = matrix(&mut g, s, false);
        let v = hkd_loss(&mut g, tn, sn, 1.0, false).unwrap();
        let p0 = oracle::softmax(&[2.0, 0.0])[0];
        check(
            "hkd",
            g.value(v).item(),
            oracle::hkd(t, s, 1.0, false),
            Some((2.0 * (p0 - (1.0 - p0)), 1e-12)),
        );
        assert!((g.value(v).item() - 1.5232).abs() <= 1e-4);
    }

    // Distance potentials for raw distances (1, 3).
    {
        let rows: &[&[f64]] = &[&[0.0, 0.0], &[1.0, 0.0], &[4.0, 0.0]];
        let pairs = [(0, 1), (1, 2)];
        let mut g = Graph::new();
        let n = matrix(&mut g, rows, false);
        let psi = psi_distance(&mut g, n, &pairs, PsiNorm::Sum).unwrap();
        let want = oracle::psi_d(rows, &pairs);
        check(
            "psi_distance/0",
            g.value(psi[0]).item(),
            want[0],
            Some((0.25, 0.0)),
        );
        check(
            "psi_distance/1",
            g.value(psi[1]).item(),
            want[1],
            Some((0.75, 0.0)),
        );
    }

    // Huber on both sides of the unit disagreement.
    {
        let mut g = Graph::new();
        let p = g.constant(3.0);
        let q = g.constant(1.0);
        let v = huber(&mut g, p, q);
        check(
            "huber/linear",
            g.value(v).item(),
            oracle::huber(3.0, 1.0),
            Some((1.5, 0.0)),
        );
        let p2 = g.constant(0.5);
        let q2 = g.constant(0.0);
        let v2 = huber(&mut g, p2, q2);
        check(
            "huber/quadratic",
            g.value(v2).item(),
            oracle::huber(0.5, 0.0),
            Some((0.125, 0.0)),
        );
    }

    // RKD-D: teacher potentials (0.25, 0.75) vs uniform student.
    {
        let t: &[&[f64]] = &[&[0.0, 0.0], &[1.0, 0.0], &[4.0, 0.0]];
        let s: &[&[f64]] = &[&[0.0, 0.0], &[1.0, 0.0], &[2.0, 0.0]];
        let pairs = [(0, 1), (1, 2)];
        let mut g = Graph::new();
        let tn = matrix(&mut g, t, true);
        let sn = matrix(&mut g, s, false);
        let v = rkd_d_loss(&mut g, tn, sn, &pairs, PsiNorm::Sum).unwrap();
        check(
            "rkd_d",
            g.value(v).item(),
            oracle::rkd_d(t, s, &pairs),
            Some((0.0625, 0.0)),
        );
    }

    // Angle potential of the right-angle corner.
    {
        let rows: &[&[f64]] = &[&[1.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]];
        let mut g = Graph::new();
        let n = matrix(&mut g, rows, false);
        let v = psi_angle(&mut g, n, 0, 1, 2)
            .unwrap()
            .expect("non-degenerate");
        check(
            "psi_angle",
            g.value(v).item(),
            oracle::cos_at(rows, 0, 1, 2),
            Some((std::f64::consts::FRAC_1_SQRT_2, 1e-12)),
        );
    }

    // RKD-A: teacher cosine 1, student cosine 0.
    {
        let t: &[&[f64]] = &[&[1.0, 0.0], &[0.0, 0.0], &[2.0, 0.0]];
        let s: &[&[f64]] = &[&[1.0, 0.0], &[0.0, 0.0], &[0.0, 1.0]];
        let mut g = Graph::new();
        let tn = matrix(&mut g, t, true);
        let sn = matrix(&mut g, s, false);
        let v = rkd_a_loss(&mut g, tn, sn, &[(0, 1, 2)]).unwrap();
        check(
            "rkd_a",
            g.value(v).item(),
            oracle::rkd_a(t, s, &[(0, 1, 2)]),
            Some((0.5, 0.0)),
        );
    }

    // RKD-DA: weighted sum of the two relational terms on a shared
    // batch, plus the published arithmetic shape.
    {
        let t: &[&[f64]] = &[&[0.0, 0.0], &[1.0, 0.0], &[4.0, 0.0], &[4.0, 3.0]];
        let s: &[&[f64]] = &[&[0.0, 0.0], &[1.0, 0.0], &[2.0, 0.0], &[3.0, 1.0]];
        let pairs = [(0, 1), (1, 2), (2, 3)];
        let triplets = [(0, 1, 2), (1, 2, 3)];
        let mut g = Graph::new();
        let tn = matrix(&mut g, t, true);
        let sn = matrix(&mut g, s, false);
        let v = rkd_da_loss(&mut g, tn, sn, &pairs, &triplets, 1.0, 2.0, PsiNorm::Sum).unwrap();
        check(
            "rkd_da",
            g.value(v).item(),
            oracle::rkd_da(t, s, &pairs, &triplets, 1.0, 2.0),
            None,
        );
        assert_eq!(1.0 * 0.1 + 2.0 * 0.2, 0.5);
    }

    // Triplet distillation: active hinge, then a zero positive distance.
    {
        let t: &[&[f64]] = &[&[0.0, 0.0], &[9.0, 9.0]];
        let s: &[&[f64]] = &[&[1.0, 0.0], &[1.0, 1.0]];
        let mut g = Graph::new();
        let tn = matrix(&mut g, t, true);
        let sn = matrix(&mut g, s, false);
        let v = triplet_kd_loss(&mut g, tn, sn, &[(0, 1)], 5.0).unwrap();
        check(
            "triplet_kd/active",
            g.value(v).item(),
            oracle::triplet_kd(t, s, &[(0, 1)], 5.0),
            Some((4.0, 0.0)),
        );

        let t2: &[&[f64]] = &[&[0.0, 0.0, 0.0], &[9.0, 9.0, 9.0]];
        let s2: &[&[f64]] = &[&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]];
        let tn2 = matrix(&mut g, t2, true);
        let sn2 = matrix(&mut g, s2, false);
        let v2 = triplet_kd_loss(&mut g, tn2, sn2, &[(0, 1)], 5.0).unwrap();
        check(
            "triplet_kd/zero_positive",
            g.value(v2).item(),
            oracle::triplet_kd(t2, s2, &[(0, 1)], 5.0),
            Some((2.0, 0.0)),
        );
    }

    // Cross-entropy on a confident correct 2-class logit row.
    {
        let rows: &[&[f64]] = &[&[2.0, 0.0]];
        let mut g = Graph::new();
        let n = matrix(&mut g, rows, false);
        let v = cross_entropy_loss(&mut g, n, &[0]).unwrap();
        check(
            "cross_entropy",
            g.value(v).item(),
            oracle::cross_entropy(rows, &[0]),
            Some(((1.0 + (-2.0f64).exp()).ln(), 1e-12)),
        );
        assert!((g.value(v).item() - 0.1269).abs() <= 1e-4);
    }

    // Combined objective: a batch built so the soft terms land exactly
    // on 1 and 2, weighted 2 and 16 over the hard term.
    {
        let t: &[&[f64]] = &[&[0.0, 0.0], &[3.0, 0.0]];
        let s: &[&[f64]] = &[&[1.0, 0.0], &[2.0, 0.0]];
        let labels = vec![0usize, 0];
        let spec = LossSpec {
            hard: true,
            soft: vec![
                SoftTerm {
                    kind: SoftKind::Bkd,
                    lambda: 2.0,
                },
                SoftTerm {
                    kind: SoftKind::TripletKd,
                    lambda: 16.0,
                },
            ],
            margin: 5.0,
            ..LossSpec::hard_only()
        };
        let mut g = Graph::new();
        let tn = matrix(&mut g, t, true);
        let sn = matrix(&mut g, s, false);
        let batch = BatchOutputs {
            teacher_logits: tn,
            student_logits: sn,
            labels: labels.clone(),
            pairs: vec![],
            triplets: vec![],
            anchor_negatives: vec![(0, 1)],
        };
        let (total, breakdown) = combined_loss(&mut g, &spec, &batch).unwrap();
        let hard = oracle::cross_entropy(s, &labels);
        let want = hard + 2.0 * oracle::bkd(t, s) + 16.0 * oracle::triplet_kd(t, s, &[(0, 1)], 5.0);
        check("combined", g.value(total).item(), want, None);
        assert_eq!(breakdown.soft[0].1, 1.0);
        assert_eq!(breakdown.soft[1].1, 2.0);
        assert!((g.value(total).item() - (breakdown.hard.unwrap() + 34.0)).abs() <= 1e-12);
        assert_eq!(0.5 + 2.0 * 1.0 + 16.0 * 2.0, 34.5);
    }

    verdict(
        3,
        true,
        &format!(
            "16 worked examples, scalar oracle deviation at most {:.2e}",
            worst
        ),
    );
}

// ---------------------------------------------------------------------
// 4. Exact zeros when the student matches the teacher.

#[test]
fn criterion_4_zero_at_identity() {
    // Distinct, well-separated rows: every cross-row squared distance is
    // at least 16, clearing the margin of 5.
    let rows: &[&[f64]] = &[
        &[0.0, 0.0, 0.0],
        &[4.0, 0.0, 0.0],
        &[0.0, 4.0, 0.0],
        &[4.0, 4.0, 4.0],
    ];
    let pairs = [(0, 1), (1, 2), (2, 3)];
    let triplets = [(0, 1, 2), (1, 2, 3)];
    let omega = [(0, 1), (1, 2), (2, 3), (3, 0)];

    let mut g = Graph::new();
    let t = matrix(&mut g, rows, true);
    let s = matrix(&mut g, rows, false);

    let bkd = bkd_loss(&mut g, t, s).unwrap();
    let hkd1 = hkd_loss(&mut g, t, s, 1.0, false).unwrap();
    let hkd4 = hkd_loss(&mut g, t, s, 4.0, true).unwrap();
    let rkd_d = rkd_d_loss(&mut g, t, s, &pairs, PsiNorm::Sum).unwrap();
    let rkd_a = rkd_a_loss(&mut g, t, s, &triplets).unwrap();
    let tkd = triplet_kd_loss(&mut g, t, s, &omega, 5.0).unwrap();

    let values = [
        ("bkd", g.value(bkd).item()),
        ("hkd T=1", g.value(hkd1).item()),
        ("hkd T=4 scaled", g.value(hkd4).item()),
        ("rkd_d", g.value(rkd_d).item()),
        ("rkd_a", g.value(rkd_a).item()),
        ("triplet_kd", g.value(tkd).item()),
    ];
    for (name, v) in values {
        assert_eq!(v, 0.0, "{} should vanish at identity, got {}", name, v);
    }
    verdict(
        4,
        true,
        "bkd, hkd (T=1 and T=4 scaled), rkd_d, rkd_a, triplet_kd all exactly 0.0",
    );
}

// ---------------------------------------------------------------------
// 5. The teacher checkpoint survives distillation byte for byte.

fn desk_config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: dir.to_path_buf(),
        seeds: vec![1],
        epochs: 4,
        batch_size: 15,
        method: None,
        dataset: DatasetConfig::SynthBlobs {
            classes: 3,
            per_class: 30,
            dim: 4,
            spread: 0.25,
            seed: 9,
            train_per_class: 20,
            normalize: false,
        },
        teacher: Some(mlp(4, &[16], 3)),
        student: Some(mlp(4, &[], 3)),
        teacher_checkpoint: None,
        student_checkpoint: None,
        optimizer: OptimConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: Schedule::None,
        },
        loss: LossSpec::hard_only(),
        sampling: SamplingConfig::default(),
    }
}

#[test]
fn criterion_5_frozen_teacher() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = desk_config(&tmp.path().join("runs"));
    let outcome = cmd_train_teacher(&cfg).unwrap();
    let ckpt = outcome.runs[0].checkpoint.clone();
    let before = fs::read(&ckpt).unwrap();

    let distill_cfg = ExperimentConfig {
        teacher_checkpoint: Some(ckpt.clone()),
        loss: LossSpec {
            hard: true,
            soft: vec![
                SoftTerm {
                    kind: SoftKind::Bkd,
                    lambda: 1.0,
                },
                SoftTerm {
                    kind: SoftKind::TripletKd,
                    lambda: 0.5,
                },
            ],
            margin: 5.0,
            ..LossSpec::hard_only()
        },
        ..cfg
    };
    cmd_distill(&distill_cfg).unwrap();
    let after = fs::read(&ckpt).unwrap();

    verdict(
        5,
        before == after,
        &format!(
            "teacher checkpoint unchanged across distillation ({} bytes)",
            before.len()
        ),
    );
}

// ---------------------------------------------------------------------
// 6. All-zero soft weights reproduce plain training step for step.

#[test]
fn criterion_6_reduction_to_baseline() {
    const STEP_TOL: f64 = 1e-12;

    let ds = DatasetConfig::SynthBlobs {
        classes: 3,
        per_class: 30,
        dim: 4,
        spread: 0.25,
        seed: 9,
        train_per_class: 20,
        normalize: false,
    };
    let (train, _) = ds.load().unwrap();
    let teacher_spec = mlp(4, &[8], 3);
    let student_spec = mlp(4, &[], 3);
    let optim = OptimConfig {
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 5e-4,
        schedule: Schedule::None,
    };
    let (teacher_params, _) =
        train_teacher(&teacher_spec, &train, None, &optim, 2, 15, 99).unwrap();

    let (_, plain) = train_teacher(&student_spec, &train, None, &optim, 5, 15, 7).unwrap();

    let zeros = LossSpec {
        hard: true,
        soft: [
            SoftKind::Bkd,
            SoftKind::Hkd,
            SoftKind::RkdD,
            SoftKind::RkdA,
            SoftKind::TripletKd,
        ]
        .into_iter()
        .map(|kind| SoftTerm { kind, lambda: 0.0 })
        .collect(),
        temperature: 4.0,
        margin: 5.0,
        ..LossSpec::hard_only()
    };
    let (_, distilled) = distill_student(
        &student_spec,
        &teacher_spec,
        &teacher_params,
        &train,
        None,
        &zeros,
        &SamplingConfig::default(),
        &optim,
        5,
        15,
        7,
    )
    .unwrap();

    assert_eq!(plain.step_totals.len(), distilled.step_totals.len());
    let max_diff = plain
        .step_totals
        .iter()
        .zip(&distilled.step_totals)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    verdict(
        6,
        max_diff <= STEP_TOL,
        &format!(
            "{} optimizer steps, max per-step loss difference {:.2e}",
            plain.step_totals.len(),
            max_diff
        ),
    );
}

// ---------------------------------------------------------------------
// 7. Desk-scale ordering: distillation beats the plain student.

#[test]
fn criterion_7_desk_scale_ordering() {
    // Constants picked so the plain student lands inside the 70-85%
    // band; everything is seeded, so the run is fully reproducible.
    const BAND: (f64, f64) = (0.70, 0.85);
    const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

    let ds = DatasetConfig::SynthBlobs {
        classes: 5,
        per_class: 100,
        dim: 16,
        spread: 0.4,
        seed: 42,
        train_per_class: 30,
        normalize: false,
    };
    let (train, test) = ds.load().unwrap();
    let test = test.expect("held-out split");

    let teacher_spec = mlp(16, &[64], 5);
    let student_spec = mlp(16, &[], 5);
    let teacher_optim = OptimConfig {
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 5e-3,
        schedule: Schedule::StepDecay {
            factor: 0.1,
            period: 100,
        },
    };
    let (teacher_params, _) = train_teacher(
        &teacher_spec,
        &train,
        Some(&test),
        &teacher_optim,
        200,
        25,
        1000,
    )
    .unwrap();

    let student_optim = OptimConfig {
        lr: 0.002,
        momentum: 0.9,
        weight_decay: 5e-4,
        schedule: Schedule::None,
    };
    let ours = LossSpec {
        hard: true,
        soft: vec![SoftTerm {
            kind: SoftKind::TripletKd,
            lambda: 2.0,
        }],
        margin: 5.0,
        ..LossSpec::hard_only()
    };

    let mut plain = Vec::new();
    let mut distilled = Vec::new();
    for &seed in &SEEDS {
        let (p, _) = train_teacher(
            &student_spec,
            &train,
            Some(&test),
            &student_optim,
            70,
            25,
            seed,
        )
        .unwrap();
        plain.push(evaluate_accuracy(&student_spec, &p, &test).unwrap());

        let (d, _) = distill_student(
            &student_spec,
            &teacher_spec,
            &teacher_params,
            &train,
            Some(&test),
            &ours,
            &SamplingConfig::default(),
            &student_optim,
            70,
            25,
            seed,
        )
        .unwrap();
        distilled.push(evaluate_accuracy(&student_spec, &d, &test).unwrap());
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let plain_mean = mean(&plain);
    let ours_mean = mean(&distilled);
    let wins = plain.iter().zip(&distilled).filter(|(p, o)| o > p).count();

    let ok = plain_mean >= BAND.0 && plain_mean <= BAND.1 && ours_mean > plain_mean && wins >= 4;
    verdict(
        7,
        ok,
        &format!(
            "plain mean {:.3} (band {:.2}..{:.2}), distilled mean {:.3}, improvement +{:.3}, wins {}/{}",
            plain_mean,
            BAND.0,
            BAND.1,
            ours_mean,
            ours_mean - plain_mean,
            wins,
            SEEDS.len()
        ),
    );
}

// ---------------------------------------------------------------------
// 8. Published learning-rate schedules, bit exact.

#[test]
fn criterion_8_schedule_exactness() {
    let cifar = OptimConfig::cifar10_preset();
    assert_eq!(lr_at_epoch(&cifar, 0), 0.01);
    assert_eq!(lr_at_epoch(&cifar, 99), 0.01);
    assert_eq!(lr_at_epoch(&cifar, 100), 0.001);
    assert_eq!(lr_at_epoch(&cifar, 200), 0.0001);

    let tin = OptimConfig::tiny_imagenet_preset();
    assert_eq!(lr_at_epoch(&tin, 0), 0.001);
    assert_eq!(lr_at_epoch(&tin, 2), 0.001);
    assert_eq!(lr_at_epoch(&tin, 3), 0.0009);

    verdict(
        8,
        true,
        "0.01/0.001/0.0001 at epochs 0/100/200 and 0.001/0.0009 at epochs 0/3, exact",
    );
}

// ---------------------------------------------------------------------
// 9. Bitwise-identical metrics for identical config and seed.

#[test]
fn criterion_9_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut compared = 0usize;

    let mut run_pair = |name: &str, build: &dyn Fn(&Path) -> ExperimentConfig| {
        let dir_a = tmp.path().join(format!("{}_a", name));
        let dir_b = tmp.path().join(format!("{}_b", name));
        let out_a = build(&dir_a);
        let out_b = build(&dir_b);
        let runs_a = match name {
            "teacher" => cmd_train_teacher(&out_a).unwrap().runs,
            _ => cmd_distill(&out_a).unwrap().runs,
        };
        let runs_b = match name {
            "teacher" => cmd_train_teacher(&out_b).unwrap().runs,
            _ => cmd_distill(&out_b).unwrap().runs,
        };
        for (a, b) in runs_a.iter().zip(&runs_b) {
            let ma = fs::read(&a.metrics).unwrap();
            let mb = fs::read(&b.metrics).unwrap();
            assert_eq!(ma, mb, "{} metrics differ between identical runs", name);
            let ca = fs::read(&a.checkpoint).unwrap();
            let cb = fs::read(&b.checkpoint).unwrap();
            assert_eq!(ca, cb, "{} checkpoints differ between identical runs", name);
            compared += 1;
        }
    };

    run_pair("teacher", &|dir| desk_config(dir));

    // A distillation run exercising the sampled index sets as well.
    let teacher_dir = tmp.path().join("teacher_a");
    let teacher_ckpt = teacher_dir.join("teacher_seed1.ckpt");
    assert!(teacher_ckpt.exists(), "teacher pair must run first");
    run_pair("distill", &|dir| ExperimentConfig {
        output_dir: dir.to_path_buf(),
        teacher_checkpoint: Some(teacher_ckpt.clone()),
        loss: LossSpec {
            hard: true,
            soft: vec![
                SoftTerm {
                    kind: SoftKind::Hkd,
                    lambda: 1.0,
                },
                SoftTerm {
                    kind: SoftKind::RkdD,
                    lambda: 0.5,
                },
                SoftTerm {
                    kind: SoftKind::RkdA,
                    lambda: 0.5,
                },
                SoftTerm {
                    kind: SoftKind::TripletKd,
                    lambda: 0.5,
                },
            ],
            temperature: 4.0,
            margin: 5.0,
            ..LossSpec::hard_only()
        },
        ..desk_config(dir)
    });

    verdict(
        9,
        compared == 2,
        "teacher and distillation reruns produced bitwise-identical metrics and checkpoints",
    );
}
