//! Training objectives: cosine-classifier cross-entropy, the influence loss,
//! the regression-alleviating contrast loss, and the two-part objective of
//! the basis-transformation model.
//!
//! Every function here appends nodes to a [`Graph`] and returns the scalar
//! loss node. Frozen heads and precomputed targets enter the graph as input
//! nodes, so no gradient ever reaches them.

use thiserror::Error;

use crate::grad::{Graph, GraphError, NodeId, ParamMap};
use crate::linalg::vec_norm;
use crate::model::ClassifierHead;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("config error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Loss weights and the contrast temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the influence / contrast term.
    pub lambda: f64,
    /// Weight of the new-target cosine term.
    pub lambda1: f64,
    /// Weight of the old-head classification term.
    pub lambda2: f64,
    /// Weight of the old-target cosine term.
    pub lambda3: f64,
    /// Contrast temperature.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            tau: 0.07,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::Config(format!(
                    "{name} must be a non-negative finite number, got {v}"
                )));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(LossError::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// One minibatch: feature rows, labels, and whatever precomputed target
/// embeddings the method requires (stored unit-normalized).
#[derive(Debug, Clone, Default)]
pub struct TrainingBatch {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<usize>,
    /// Per-sample old-model embeddings, unit norm.
    pub old_targets: Option<Vec<Vec<f64>>>,
    /// Per-sample independently-trained-new embeddings, unit norm.
    pub new_targets: Option<Vec<Vec<f64>>>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// A classifier head materialized in a graph: frozen heads become plain
/// inputs, trainable heads become parameters.
#[derive(Debug, Clone, Copy)]
pub struct HeadNode {
    pub w: NodeId,
    pub classes: usize,
    pub frozen: bool,
}

/// Adds `head`'s weight tensor to the graph under `key`, preferring the
/// live value in `params` over the head's own copy.
pub fn head_node(
    g: &mut Graph,
    key: &str,
    head: &ClassifierHead,
    params: &ParamMap,
) -> Result<HeadNode, LossError> {
    let value = params
        .get(key)
        .cloned()
        .unwrap_or_else(|| head.weight.clone());
    let w = if head.frozen {
        g.input(key, value)
    } else {
        g.parameter(key, value)
    };
    Ok(HeadNode {
        w,
        classes: head.classes(),
        frozen: head.frozen,
    })
}

/// Softmax cross-entropy of `head.weight . normalize(phi)` against label `y`.
pub fn cross_entropy(
    g: &mut Graph,
    head: &HeadNode,
    phi: NodeId,
    y: usize,
) -> Result<NodeId, LossError> {
    if y >= head.classes {
        return Err(LossError::Domain(format!(
            "label {y} out of range for {} classes",
            head.classes
        )));
    }
    let normalized = g.l2_normalize(phi)?;
    let logits = g.matmul(head.w, normalized)?;
    Ok(g.softmax_cross_entropy(logits, y)?)
}

/// Influence loss: `CE(head_new, phi) + lambda * CE(head_old, phi)`.
/// The old head must be frozen; the second term sees the same embedding but
/// pushes it toward the old classifier's geometry.
pub fn bct_loss(
    g: &mut Graph,
    phi: NodeId,
    head_new: &HeadNode,
    head_old: &HeadNode,
    y: usize,
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    if !head_old.frozen {
        return Err(LossError::Config(
            "the old classification head must be frozen".into(),
        ));
    }
    let ce_new = cross_entropy(g, head_new, phi, y)?;
    if cfg.lambda == 0.0 {
        return Ok(ce_new);
    }
    let ce_old = cross_entropy(g, head_old, phi, y)?;
    let weighted = g.scale(ce_old, cfg.lambda);
    Ok(g.add(ce_new, weighted)?)
}

fn expect_unit(g: &Graph, id: NodeId, what: &str) -> Result<(), LossError> {
    let norm = vec_norm(g.value(id).data());
    if (norm - 1.0).abs() > 1e-6 {
        return Err(LossError::Domain(format!(
            "{what} must be unit-normalized (norm = {norm})"
        )));
    }
    Ok(())
}

/// Regression-alleviating contrast loss, implemented exactly as printed:
///
/// ```text
/// log(1 + sum_{k in B - p(x)} exp(phi_new(k).phi_old(k)/tau) / exp(phi_new(x).phi_old(x)/tau)
///       + sum_{k in B - p(x)} exp(phi_new(k).phi_new(k)/tau) / exp(phi_new(x).phi_old(x)/tau))
/// ```
///
/// averaged over the batch, where `p(x)` is the same-label subset (note the
/// second sum really dots each negative with itself). Each per-sample term
/// is assembled in log space: the exponent gaps to the anchor are shifted by
/// a baked max before `exp`, which changes neither the value nor the
/// gradients but prevents overflow at small temperatures. Samples with an
/// empty negative set contribute zero.
pub fn contrast_loss(
    g: &mut Graph,
    labels: &[usize],
    phi_new_of: &[NodeId],
    phi_old_of: &[NodeId],
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    cfg.validate()?;
    let b = labels.len();
    if b < 2 {
        return Err(LossError::Config(format!(
            "contrast loss needs a batch of at least 2, got {b}"
        )));
    }
    if phi_new_of.len() != b || phi_old_of.len() != b {
        return Err(LossError::Config(
            "per-sample embedding lists must match the batch length".into(),
        ));
    }
    for (i, (&pn, &po)) in phi_new_of.iter().zip(phi_old_of.iter()).enumerate() {
        expect_unit(g, pn, &format!("phi_new of sample {i}"))?;
        expect_unit(g, po, &format!("phi_old of sample {i}"))?;
    }

    let inv_tau = 1.0 / cfg.tau;
    let mut per_sample = Vec::with_capacity(b);
    for x in 0..b {
        let negatives: Vec<usize> = (0..b).filter(|&k| labels[k] != labels[x]).collect();
        if negatives.is_empty() {
            per_sample.push(g.constant(0.0));
            continue;
        }

        // anchor exponent: phi_new(x) . phi_old(x) / tau
        let anchor_dot = g.dot(phi_new_of[x], phi_old_of[x])?;
        let anchor = g.scale(anchor_dot, inv_tau);
        let neg_anchor = g.scale(anchor, -1.0);

        // exponent gaps for both sums
        let mut gaps = Vec::with_capacity(2 * negatives.len());
        for &k in &negatives {
            let cross = g.dot(phi_new_of[k], phi_old_of[k])?;
            let cross = g.scale(cross, inv_tau);
            gaps.push(g.add(cross, neg_anchor)?);
            let self_new = g.dot(phi_new_of[k], phi_new_of[k])?;
            let self_new = g.scale(self_new, inv_tau);
            gaps.push(g.add(self_new, neg_anchor)?);
        }

        // log(1 + sum exp(gap)) = shift + log(exp(-shift) + sum exp(gap - shift))
        let shift = gaps
            .iter()
            .map(|&id| g.value(id).at(0, 0))
            .fold(0.0f64, f64::max);
        let neg_shift = g.constant(-shift);
        let mut total = g.exp(neg_shift);
        for &gap in &gaps {
            let shifted = g.add(gap, neg_shift)?;
            let e = g.exp(shifted);
            total = g.add(total, e)?;
        }
        let log_total = g.log(total);
        let shift_node = g.constant(shift);
        per_sample.push(g.add(shift_node, log_total)?);
    }
    batch_mean(g, &per_sample)
}

/// New-representation objective: `CE(head_phi3, ce_phi) + lambda1 (1 - phi3 . target)`.
/// `ce_phi` is `phi3` itself unless the model classifies on the final
/// embedding, in which case the caller passes the final embedding node.
pub fn bt2_new_loss(
    g: &mut Graph,
    phi3: NodeId,
    ce_phi: NodeId,
    head_phi3: &HeadNode,
    phi_new_prime_target: NodeId,
    y: usize,
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    if g.value(phi3).shape() != g.value(phi_new_prime_target).shape() {
        return Err(LossError::Domain(format!(
            "target has shape {:?}, phi3 has {:?}",
            g.value(phi_new_prime_target).shape(),
            g.value(phi3).shape()
        )));
    }
    expect_unit(g, phi_new_prime_target, "phi_new' target")?;
    let ce = cross_entropy(g, head_phi3, ce_phi, y)?;
    if cfg.lambda1 == 0.0 {
        return Ok(ce);
    }
    let cos = g.dot(phi3, phi_new_prime_target)?;
    let neg_cos = g.scale(cos, -1.0);
    let one = g.constant(1.0);
    let gap = g.add(one, neg_cos)?;
    let weighted = g.scale(gap, cfg.lambda1);
    Ok(g.add(ce, weighted)?)
}

/// Old-representation matching objective:
/// `lambda2 CE(head_old, phi5) + lambda3 (1 - normalize(phi5) . target)`.
/// `y` is consulted only when the classification term is active; callers
/// drop that term for samples the old head has no class for by zeroing
/// `lambda2` in the config they pass.
pub fn bt2_old_loss(
    g: &mut Graph,
    phi5: NodeId,
    head_old: &HeadNode,
    phi_old_target: NodeId,
    y: usize,
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    if !head_old.frozen {
        return Err(LossError::Config(
            "the old classification head must be frozen".into(),
        ));
    }
    expect_unit(g, phi_old_target, "phi_old target")?;
    let mut terms: Vec<NodeId> = Vec::new();
    if cfg.lambda2 > 0.0 {
        let ce = cross_entropy(g, head_old, phi5, y)?;
        terms.push(g.scale(ce, cfg.lambda2));
    }
    if cfg.lambda3 > 0.0 {
        let nphi5 = g.l2_normalize(phi5)?;
        let cos = g.dot(nphi5, phi_old_target)?;
        let neg_cos = g.scale(cos, -1.0);
        let one = g.constant(1.0);
        let gap = g.add(one, neg_cos)?;
        terms.push(g.scale(gap, cfg.lambda3));
    }
    match terms.len() {
        0 => Ok(g.constant(0.0)),
        1 => Ok(terms[0]),
        _ => Ok(g.add(terms[0], terms[1])?),
    }
}

/// Mean of scalar loss nodes; zero for an empty list.
pub fn batch_mean(g: &mut Graph, losses: &[NodeId]) -> Result<NodeId, LossError> {
    match losses {
        [] => Ok(g.constant(0.0)),
        [single] => Ok(*single),
        [first, rest @ ..] => {
            let mut acc = *first;
            for &l in rest {
                acc = g.add(acc, l)?;
            }
            Ok(g.scale(acc, 1.0 / losses.len() as f64))
        }
    }
}
