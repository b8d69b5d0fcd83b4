use super::DistillError;
use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::tokenizer::EncodedSequence;

pub(crate) const PROB_CLAMP: f64 = 1e-12;

/// Mean binary cross-entropy of probabilities `y_hat` against 0/1 targets.
pub fn loss_bce(g: &mut Graph, y_hat: Var, y: &[f64]) -> Result<Var, DistillError> {
    if let Some(&bad) = y.iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(DistillError::BadTarget(bad));
    }
    let e = g.bce(y_hat, y, PROB_CLAMP)?;
    Ok(g.mean(e)?)
}

/// Negative log-likelihood of `targets` under the rows of `log_probs`,
/// averaged over the rows where `mask` is set. With one-hot targets this is
/// the cross-entropy per predicted position.
pub fn loss_ce(g: &mut Graph, log_probs: Var, targets: &[usize], mask: &[bool]) -> Result<Var, DistillError> {
    let rows = g.value(log_probs).shape().first().copied().unwrap_or(0);
    if targets.len() != rows || mask.len() != rows {
        return Err(TensorError::ShapeMismatch {
            op: "loss_ce",
            lhs: g.value(log_probs).shape().to_vec(),
            rhs: vec![targets.len(), mask.len()],
        }
        .into());
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(TensorError::Invalid {
            op: "loss_ce",
            reason: "no target positions selected".into(),
        }
        .into());
    }
    let w = 1.0 / count as f64;
    let weights: Vec<f64> = mask.iter().map(|&m| if m { -w } else { 0.0 }).collect();
    let picked = g.pick(log_probs, targets)?;
    let weights = g.constant(Tensor::vector(weights)?);
    let weighted = g.mul(picked, weights)?;
    Ok(g.sum(weighted)?)
}

/// Targets and label mask aligned with teacher-forced rows: row `i` of a
/// sequence scores position `i + 1`.
pub fn shifted_targets(seqs: &[EncodedSequence]) -> (Vec<usize>, Vec<bool>) {
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for s in seqs {
        let lm = s.label_mask();
        targets.extend_from_slice(&s.ids[1..]);
        mask.extend_from_slice(&lm[1..]);
    }
    (targets, mask)
}

/// Mean squared difference of two equally shaped embeddings.
pub fn loss_embed(g: &mut Graph, e_r: Var, e_c: Var) -> Result<Var, DistillError> {
    let (a, b) = (g.value(e_r).shape().to_vec(), g.value(e_c).shape().to_vec());
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op: "loss_embed",
            lhs: a,
            rhs: b,
        }
        .into());
    }
    let d = g.sub(e_c, e_r)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq)?)
}

/// Expected embeddings `dist · table` for distributions over the vocabulary.
pub fn soft_embed_bridge(g: &mut Graph, dist: Var, table: Var) -> Result<Var, DistillError> {
    Ok(g.matmul(dist, table)?)
}
