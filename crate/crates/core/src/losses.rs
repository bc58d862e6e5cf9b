//! Distillation and metric-learning losses, all recorded on the autodiff
//! tape as pure functions of teacher/student output nodes.
//!
//! Teacher outputs must enter as constant leaves: every distillation loss
//! rejects a differentiable teacher node, so gradients can only flow into
//! the student.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};

pub const KL_PROB_FLOOR: f64 = 1e-12;

/// Normalization denominator for the relational distance potential.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiNorm {
    /// Divide each pair distance by the sum over the pair set.
    #[default]
    Sum,
    /// Divide by the mean over the pair set instead.
    Mean,
}

/// Soft-loss family member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftKind {
    Bkd,
    Hkd,
    RkdD,
    RkdA,
    TripletKd,
}

impl SoftKind {
    pub fn name(self) -> &'static str {
        match self {
            SoftKind::Bkd => "bkd",
            SoftKind::Hkd => "hkd",
            SoftKind::RkdD => "rkd_d",
            SoftKind::RkdA => "rkd_a",
            SoftKind::TripletKd => "triplet_kd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftTerm {
    pub kind: SoftKind,
    pub lambda: f64,
}

/// Full training objective: hard cross-entropy plus weighted soft terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    /// Include the hard cross-entropy term.
    #[serde(default = "default_true")]
    pub hard: bool,
    #[serde(default)]
    pub soft: Vec<SoftTerm>,
    /// Softening temperature for the KL term.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Margin for hinge-based terms.
    #[serde(default)]
    pub margin: f64,
    /// Multiply the KL term by T² to compensate the softened gradients.
    #[serde(default)]
    pub hkd_t2_scale: bool,
    #[serde(default)]
    pub psi_norm: PsiNorm,
    /// Feed softmax outputs instead of logits into the point-matching
    /// terms (ablation switch).
    #[serde(default)]
    pub kd_on_probs: bool,
}

fn default_true() -> bool {
    true
}

fn default_temperature() -> f64 {
    1.0
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::hard_only()
    }
}

impl LossSpec {
    pub fn hard_only() -> Self {
        LossSpec {
            hard: true,
            soft: Vec::new(),
            temperature: 1.0,
            margin: 0.0,
            hkd_t2_scale: false,
            psi_norm: PsiNorm::Sum,
            kd_on_probs: false,
        }
    }

    /// All violations, one message per offending field.
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            v.push(format!(
                "{}temperature: must be > 0, got {}",
                prefix, self.temperature
            ));
        }
        if self.margin < 0.0 || !self.margin.is_finite() {
            v.push(format!(
                "{}margin: must be >= 0, got {}",
                prefix, self.margin
            ));
        }
        for (i, term) in self.soft.iter().enumerate() {
            if term.lambda < 0.0 || !term.lambda.is_finite() {
                v.push(format!(
                    "{}soft[{}].lambda: must be >= 0, got {}",
                    prefix, i, term.lambda
                ));
            }
        }
        if !self.hard && !self.soft.iter().any(|t| t.lambda > 0.0) {
            v.push(format!(
                "{}: at least one loss term must be active",
                prefix.trim_end_matches('.')
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("loss.");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

/// One batch as seen by the combined objective. Teacher logits must be a
/// constant node; index sets refer to batch row positions.
pub struct BatchOutputs {
    pub teacher_logits: NodeId,
    pub student_logits: NodeId,
    pub labels: Vec<usize>,
    /// Sample pairs (i, j) for relational distance terms.
    pub pairs: Vec<(usize, usize)>,
    /// Sample triplets (i, j, k) for relational angle terms.
    pub triplets: Vec<(usize, usize, usize)>,
    /// Anchor/negative pairs (a, n) for the triplet distillation term.
    pub anchor_negatives: Vec<(usize, usize)>,
}

/// Per-term forward values of one combined-loss evaluation.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub hard: Option<f64>,
    /// (kind, unweighted value, λ) per active soft term.
    pub soft: Vec<(SoftKind, f64, f64)>,
    pub total: f64,
    /// The triplet term saw an empty anchor/negative set this batch.
    pub empty_anchor_set: bool,
}

fn ensure_constant(g: &Graph, teacher: NodeId) -> Result<()> {
    if g.requires_grad(teacher) {
        return Err(Error::Contract(
            "teacher outputs must be recorded as constants (no gradient)".into(),
        ));
    }
    Ok(())
}

fn ensure_same_matrix(g: &Graph, t: NodeId, s: NodeId) -> Result<(usize, usize)> {
    let (vt, vs) = (g.value(t), g.value(s));
    if vt.shape() != vs.shape() || vt.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "teacher and student outputs must be matching [N,K] matrices, got {:?} vs {:?}",
            vt.shape(),
            vs.shape()
        )));
    }
    Ok((vt.shape()[0], vt.shape()[1]))
}

/// Squared Euclidean distance between two equal-width vector nodes.
fn dist_sq(g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
    let d = g.sub(a, b);
    let sq = g.mul(d, d);
    g.sum(sq)
}

/// Euclidean distance between two equal-width vector nodes.
pub fn pairwise_distance(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::Shape(format!(
            "pairwise_distance needs equal widths, got {:?} vs {:?}",
            g.value(a).shape(),
            g.value(b).shape()
        )));
    }
    let sq = dist_sq(g, a, b);
    Ok(g.sqrt(sq))
}

/// Huber penalty between two scalar nodes: quadratic within unit
/// disagreement, linear outside. Both branches meet smoothly at 1.
pub fn huber(g: &mut Graph, p: NodeId, q: NodeId) -> NodeId {
    assert!(g.value(p).is_scalar() && g.value(q).is_scalar());
    let d = g.sub(p, q);
    if g.value(d).item().abs() <= 1.0 {
        let sq = g.mul(d, d);
        g.scale(sq, 0.5)
    } else {
        let a = g.abs(d);
        let half = g.constant(0.5);
        g.sub(a, half)
    }
}

/// Labeled-pair contrastive loss over embedding rows:
/// (1/(2|pairs|)) Σ [ same: D² ; different: max(m−D, 0)² ].
pub fn contrastive_loss(
    g: &mut Graph,
    embeddings: NodeId,
    pairs: &[(usize, usize, bool)],
    margin: f64,
) -> Result<NodeId> {
    if pairs.is_empty() {
        return Err(Error::Contract(
            "contrastive loss needs at least one pair".into(),
        ));
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for &(i, j, same) in pairs {
        let a = g.row(embeddings, i);
        let b = g.row(embeddings, j);
        if same {
            terms.push(dist_sq(g, a, b));
        } else {
            let d = pairwise_distance(g, a, b)?;
            let m = g.constant(margin);
            let gap = g.sub(m, d);
            let hinge = g.relu(gap);
            terms.push(g.mul(hinge, hinge));
        }
    }
    let stacked = g.stack(&terms);
    let total = g.sum(stacked);
    Ok(g.scale(total, 1.0 / (2.0 * pairs.len() as f64)))
}

/// Anchor/positive/negative triplet loss over embedding rows:
/// Σ max(0, m + ‖a−p‖² − ‖a−n‖²).
pub fn triplet_metric_loss(
    g: &mut Graph,
    embeddings: NodeId,
    triplets: &[(usize, usize, usize)],
    margin: f64,
) -> Result<NodeId> {
    if triplets.is_empty() {
        return Err(Error::Contract(
            "triplet loss needs at least one triplet".into(),
        ));
    }
    let mut terms = Vec::with_capacity(triplets.len());
    for &(a, p, n) in triplets {
        let ra = g.row(embeddings, a);
        let rp = g.row(embeddings, p);
        let rn = g.row(embeddings, n);
        let dap = dist_sq(g, ra, rp);
        let dan = dist_sq(g, ra, rn);
        let m = g.constant(margin);
        let gap = g.sub(dap, dan);
        let arg = g.add(m, gap);
        terms.push(g.relu(arg));
    }
    let stacked = g.stack(&terms);
    Ok(g.sum(stacked))
}

/// Point-wise logit regression: (1/2) Σ over the batch of squared
/// teacher/student output distances.
pub fn bkd_loss(g: &mut Graph, teacher: NodeId, student: NodeId) -> Result<NodeId> {
    ensure_constant(g, teacher)?;
    ensure_same_matrix(g, teacher, student)?;
    let d = g.sub(teacher, student);
    let sq = g.mul(d, d);
    let total = g.sum(sq);
    Ok(g.scale(total, 0.5))
}

/// KL(p ‖ q) for probability-vector nodes; probabilities are floored at
/// 1e-12 inside the logs, and p_i = 0 terms contribute exactly 0.
pub fn kl_divergence(g: &mut Graph, p: NodeId, q: NodeId) -> Result<NodeId> {
    if g.value(p).shape() != g.value(q).shape() {
        return Err(Error::Shape(format!(
            "kl_divergence needs equal shapes, got {:?} vs {:?}",
            g.value(p).shape(),
            g.value(q).shape()
        )));
    }
    let pf = g.clamp_min(p, KL_PROB_FLOOR);
    let qf = g.clamp_min(q, KL_PROB_FLOOR);
    let lp = g.ln(pf);
    let lq = g.ln(qf);
    let diff = g.sub(lp, lq);
    let terms = g.mul(p, diff);
    Ok(g.sum(terms))
}

/// Softened-distribution matching: Σ over the batch of
/// KL(softmax(t/T) ‖ softmax(s/T)), optionally scaled by T².
pub fn hkd_loss(
    g: &mut Graph,
    teacher: NodeId,
    student: NodeId,
    temperature: f64,
    t2_scale: bool,
) -> Result<NodeId> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be > 0, got {}",
            temperature
        )));
    }
    ensure_constant(g, teacher)?;
    ensure_same_matrix(g, teacher, student)?;
    let ts = g.scale(teacher, 1.0 / temperature);
    let ss = g.scale(student, 1.0 / temperature);
    let pt = g.softmax(ts);
    let ps = g.softmax(ss);
    // Row KLs summed over the batch equal one elementwise sum.
    let kl = kl_divergence(g, pt, ps)?;
    Ok(if t2_scale {
        g.scale(kl, temperature * temperature)
    } else {
        kl
    })
}

/// Normalized pairwise-distance potential over `pairs` of output rows.
/// Returns one scalar node per pair, aligned with the input order.
pub fn psi_distance(
    g: &mut Graph,
    outputs: NodeId,
    pairs: &[(usize, usize)],
    norm: PsiNorm,
) -> Result<Vec<NodeId>> {
    if pairs.is_empty() {
        return Err(Error::Contract(
            "psi_distance needs at least one pair".into(),
        ));
    }
    let mut dists = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        let a = g.row(outputs, i);
        let b = g.row(outputs, j);
        dists.push(pairwise_distance(g, a, b)?);
    }
    let total: f64 = dists.iter().map(|&d| g.value(d).item()).sum();
    if total == 0.0 {
        return Err(Error::Numeric(
            "degenerate batch: all pairwise distances are zero".into(),
        ));
    }
    let stacked = g.stack(&dists);
    let denom = g.sum(stacked);
    let denom = match norm {
        PsiNorm::Sum => denom,
        PsiNorm::Mean => g.scale(denom, 1.0 / pairs.len() as f64),
    };
    Ok(dists.into_iter().map(|d| g.div(d, denom)).collect())
}

/// Relational distance distillation: Huber penalty between the teacher's
/// and student's normalized pairwise-distance potentials.
pub fn rkd_d_loss(
    g: &mut Graph,
    teacher: NodeId,
    student: NodeId,
    pairs: &[(usize, usize)],
    norm: PsiNorm,
) -> Result<NodeId> {
    ensure_constant(g, teacher)?;
    ensure_same_matrix(g, teacher, student)?;
    let psi_t = psi_distance(g, teacher, pairs, norm)?;
    let psi_s = psi_distance(g, student, pairs, norm)?;
    let terms: Vec<NodeId> = psi_t
        .iter()
        .zip(psi_s.iter())
        .map(|(&pt, &ps)| huber(g, pt, ps))
        .collect();
    let stacked = g.stack(&terms);
    Ok(g.sum(stacked))
}

/// Cosine of the angle at `j` formed by output rows `i` and `k`:
/// ⟨(out_i−out_j)/‖·‖, (out_k−out_j)/‖·‖⟩. `None` when either ray is
/// degenerate (coincident outputs).
pub fn psi_angle(
    g: &mut Graph,
    outputs: NodeId,
    i: usize,
    j: usize,
    k: usize,
) -> Result<Option<NodeId>> {
    let ri = g.row(outputs, i);
    let rj = g.row(outputs, j);
    let rk = g.row(outputs, k);
    let dij = pairwise_distance(g, ri, rj)?;
    let dkj = pairwise_distance(g, rk, rj)?;
    if g.value(dij).item() == 0.0 || g.value(dkj).item() == 0.0 {
        return Ok(None);
    }
    let vij = g.sub(ri, rj);
    let vkj = g.sub(rk, rj);
    let eij = g.div(vij, dij);
    let ekj = g.div(vkj, dkj);
    let prod = g.mul(eij, ekj);
    Ok(Some(g.sum(prod)))
}

/// Relational angle distillation: Huber penalty between teacher and
/// student angle potentials. Triplets degenerate on either side are
/// skipped; an entirely degenerate set is an error.
pub fn rkd_a_loss(
    g: &mut Graph,
    teacher: NodeId,
    student: NodeId,
    triplets: &[(usize, usize, usize)],
) -> Result<NodeId> {
    if triplets.is_empty() {
        return Err(Error::Contract(
            "rkd_a_loss needs at least one triplet".into(),
        ));
    }
    ensure_constant(g, teacher)?;
    ensure_same_matrix(g, teacher, student)?;
    let mut terms = Vec::new();
    for &(i, j, k) in triplets {
        let at = psi_angle(g, teacher, i, j, k)?;
        let as_ = psi_angle(g, student, i, j, k)?;
        if let (Some(t), Some(s)) = (at, as_) {
            terms.push(huber(g, t, s));
        }
    }
    if terms.is_empty() {
        return Err(Error::Numeric(
            "degenerate batch: every angle triplet has coincident outputs".into(),
        ));
    }
    let stacked = g.stack(&terms);
    Ok(g.sum(stacked))
}

/// Weighted sum of the two relational terms.
#[allow(clippy::too_many_arguments)]
pub fn rkd_da_loss(
    g: &mut Graph,
    teacher: NodeId,
    student: NodeId,
    pairs: &[(usize, usize)],
    triplets: &[(usize, usize, usize)],
    lambda_d: f64,
    lambda_a: f64,
    norm: PsiNorm,
) -> Result<NodeId> {
    if lambda_d < 0.0 || lambda_a < 0.0 {
        return Err(Error::Config("relational weights must be >= 0".into()));
    }
    let d = rkd_d_loss(g, teacher, student, pairs, norm)?;
    let a = rkd_a_loss(g, teacher, student, triplets)?;
    let wd = g.scale(d, lambda_d);
    let wa = g.scale(a, lambda_a);
    Ok(g.add(wd, wa))
}

/// Triplet distillation: for each (anchor, negative) row pair, hinge on
/// the teacher-anchor/student-anchor distance beating the
/// teacher-anchor/student-negative distance by the margin:
/// Σ max(0, m + ‖t_a − s_a‖² − ‖t_a − s_n‖²).
///
/// An empty pair set contributes 0 (the caller tracks the occurrence).
pub fn triplet_kd_loss(
    g: &mut Graph,
    teacher: NodeId,
    student: NodeId,
    anchor_negatives: &[(usize, usize)],
    margin: f64,
) -> Result<NodeId> {
    ensure_constant(g, teacher)?;
    ensure_same_matrix(g, teacher, student)?;
    if anchor_negatives.is_empty() {
        return Ok(g.constant(0.0));
    }
    let mut terms = Vec::with_capacity(anchor_negatives.len());
    for &(a, n) in anchor_negatives {
        let ta = g.row(teacher, a);
        let sa = g.row(student, a);
        let sn = g.row(student, n);
        let pos = dist_sq(g, ta, sa);
        let neg = dist_sq(g, ta, sn);
        let m = g.constant(margin);
        let gap = g.sub(pos, neg);
        let arg = g.add(m, gap);
        terms.push(g.relu(arg));
    }
    let stacked = g.stack(&terms);
    Ok(g.sum(stacked))
}

/// Mean over the batch of −ln softmax(logits)[label].
pub fn cross_entropy_loss(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "cross entropy needs [N,K] logits, got {:?}",
            shape
        )));
    }
    let (n, k) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::Contract(format!(
            "{} labels for a batch of {}",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!(
            "label {} out of range for {} classes",
            bad, k
        )));
    }
    let probs = g.softmax(logits);
    let picked = g.gather(probs, labels);
    let floored = g.clamp_min(picked, KL_PROB_FLOOR);
    let logp = g.ln(floored);
    let total = g.sum(logp);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Full objective per the configured spec: hard term plus λ-weighted soft
/// terms. Zero-λ terms are skipped entirely, so a degenerate spec reduces
/// to plain hard-target training bit for bit.
pub fn combined_loss(
    g: &mut Graph,
    spec: &LossSpec,
    batch: &BatchOutputs,
) -> Result<(NodeId, LossBreakdown)> {
    spec.validate()?;
    ensure_constant(g, batch.teacher_logits)?;

    let mut total: Option<NodeId> = None;
    let mut add_term = |g: &mut Graph, node: NodeId| {
        total = Some(match total {
            None => node,
            Some(t) => g.add(t, node),
        });
    };

    let mut hard_value = None;
    if spec.hard {
        let ce = cross_entropy_loss(g, batch.student_logits, &batch.labels)?;
        hard_value = Some(g.value(ce).item());
        add_term(g, ce);
    }

    // Point-matching terms may run on probabilities for ablation.
    let (t_point, s_point) = if spec.kd_on_probs {
        (
            g.softmax(batch.teacher_logits),
            g.softmax(batch.student_logits),
        )
    } else {
        (batch.teacher_logits, batch.student_logits)
    };

    let mut soft_values = Vec::new();
    let mut empty_anchor_set = false;
    for term in &spec.soft {
        if term.lambda == 0.0 {
            continue;
        }
        let node = match term.kind {
            SoftKind::Bkd => bkd_loss(g, t_point, s_point)?,
            SoftKind::Hkd => hkd_loss(
                g,
                batch.teacher_logits,
                batch.student_logits,
                spec.temperature,
                spec.hkd_t2_scale,
            )?,
            SoftKind::RkdD => rkd_d_loss(
                g,
                batch.teacher_logits,
                batch.student_logits,
                &batch.pairs,
                spec.psi_norm,
            )?,
            SoftKind::RkdA => rkd_a_loss(
                g,
                batch.teacher_logits,
                batch.student_logits,
                &batch.triplets,
            )?,
            SoftKind::TripletKd => {
                if batch.anchor_negatives.is_empty() {
                    empty_anchor_set = true;
                }
                triplet_kd_loss(g, t_point, s_point, &batch.anchor_negatives, spec.margin)?
            }
        };
        soft_values.push((term.kind, g.value(node).item(), term.lambda));
        let weighted = g.scale(node, term.lambda);
        add_term(g, weighted);
    }

    let total = total.ok_or_else(|| Error::Config("no active loss terms".into()))?;
    let breakdown = LossBreakdown {
        hard: hard_value,
        soft: soft_values,
        total: g.value(total).item(),
        empty_anchor_set,
    };
    Ok((total, breakdown))
}
