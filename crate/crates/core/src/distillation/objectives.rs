use super::losses::{loss_bce, loss_ce, loss_embed, shifted_targets, soft_embed_bridge};
use super::{DistillError, EncodedQuality, EncodedRefinement, Layout, LossWeights, TrainingPhase};
use crate::autodiff::{Graph, TensorError, Var};
use crate::model::Bound;
use crate::tokenizer::{EncodedSequence, BOS, EOS, MSG};

/// Graph nodes of one composed objective.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    /// What the student minimizes.
    pub student_loss: Var,
    /// What a trainable teacher minimizes, when it is trained at all.
    pub teacher_loss: Option<Var>,
    pub ce: Var,
    /// `L_t1` or `L_t2`.
    pub teacher: Var,
    pub embed: Option<Var>,
}

/// Scalar values of an objective's logged components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub teacher: f64,
    pub embed: Option<f64>,
}

impl Objective {
    pub fn parts(&self, g: &Graph) -> Result<LossParts, DistillError> {
        Ok(LossParts {
            total: g.value(self.student_loss).item()?,
            ce: g.value(self.ce).item()?,
            teacher: g.value(self.teacher).item()?,
            embed: self.embed.map(|e| g.value(e).item()).transpose()?,
        })
    }
}

fn weighted_sum(g: &mut Graph, terms: &[(f64, Var)]) -> Result<Var, DistillError> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let t = g.scale(v, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    acc.ok_or_else(|| {
        TensorError::Invalid {
            op: "weighted_sum",
            reason: "no terms".into(),
        }
        .into()
    })
}

/// Per sample: embedded `prefix[b]`, then `soft[b * stride .. b * stride + len]`,
/// then embedded `suffix[b]`. Returns `[batch * seq, d]`.
fn splice(
    g: &mut Graph,
    table: Var,
    soft: Var,
    stride: usize,
    len: usize,
    prefix: &[Vec<usize>],
    suffix: &[Vec<usize>],
) -> Result<Var, DistillError> {
    let b = prefix.len();
    let (lp, ls) = (prefix[0].len(), suffix[0].len());
    let flat_p: Vec<usize> = prefix.iter().flatten().copied().collect();
    let flat_s: Vec<usize> = suffix.iter().flatten().copied().collect();
    if flat_p.len() != b * lp || flat_s.len() != b * ls || suffix.len() != b {
        return Err(TensorError::Invalid {
            op: "splice",
            reason: "ragged prefix or suffix".into(),
        }
        .into());
    }
    let ep = if lp > 0 { Some(g.embedding(table, &flat_p)?) } else { None };
    let es = if ls > 0 { Some(g.embedding(table, &flat_s)?) } else { None };
    let mut pieces = Vec::with_capacity(3 * b);
    for i in 0..b {
        if let Some(ep) = ep {
            pieces.push(g.slice(ep, 0, i * lp, lp)?);
        }
        pieces.push(g.slice(soft, 0, i * stride, len)?);
        if let Some(es) = es {
            pieces.push(g.slice(es, 0, i * ls, ls)?);
        }
    }
    Ok(g.concat(&pieces, 0)?)
}

fn expected_rows(g: &mut Graph, log_probs: Var, table: Var) -> Result<Var, DistillError> {
    let p = g.exp(log_probs)?;
    soft_embed_bridge(g, p, table)
}

fn ce_against(g: &mut Graph, log_probs: Var, targets: &[EncodedSequence]) -> Result<Var, DistillError> {
    let (t, m) = shifted_targets(targets);
    loss_ce(g, log_probs, &t, &m)
}

fn check_batch(batch: &[EncodedRefinement], layout: &Layout) -> Result<(), DistillError> {
    if batch.is_empty() {
        return Err(DistillError::EmptyDataset("batch"));
    }
    for e in batch {
        if e.code.len() != layout.code_len()
            || e.review.len() != layout.review_len()
            || e.pair.len() != layout.pair_len()
            || e.refined.len() != layout.code_len()
        {
            return Err(TensorError::Invalid {
                op: "batch",
                reason: "example does not follow the configured layout".into(),
            }
            .into());
        }
    }
    Ok(())
}

/// CE of decoding `c_r` from `(c, r)`.
pub fn supervised_refine_loss(g: &mut Graph, model: &mut Bound, batch: &[EncodedRefinement]) -> Result<Var, DistillError> {
    let pairs: Vec<EncodedSequence> = batch.iter().map(|e| e.pair.clone()).collect();
    let refined: Vec<EncodedSequence> = batch.iter().map(|e| e.refined.clone()).collect();
    let enc = model.encode(g, &pairs)?;
    let lp = model.decode_teacher_forced(g, &enc, &refined)?;
    ce_against(g, lp, &refined)
}

/// CE of decoding `r` from `c`.
pub fn supervised_comment_loss(g: &mut Graph, model: &mut Bound, batch: &[EncodedRefinement]) -> Result<Var, DistillError> {
    let codes: Vec<EncodedSequence> = batch.iter().map(|e| e.code.clone()).collect();
    let reviews: Vec<EncodedSequence> = batch.iter().map(|e| e.review.clone()).collect();
    let enc = model.encode(g, &codes)?;
    let lp = model.decode_teacher_forced(g, &enc, &reviews)?;
    ce_against(g, lp, &reviews)
}

/// BCE of the quality head against the recorded decisions.
pub fn supervised_quality_loss(g: &mut Graph, model: &mut Bound, batch: &[EncodedQuality]) -> Result<Var, DistillError> {
    if batch.is_empty() {
        return Err(DistillError::EmptyDataset("batch"));
    }
    let pairs: Vec<EncodedSequence> = batch.iter().map(|e| e.pair.clone()).collect();
    let y: Vec<f64> = batch.iter().map(|e| e.triplet.decision as f64).collect();
    let enc = model.encode(g, &pairs)?;
    let p = model.classify_quality(g, &enc)?;
    loss_bce(g, p, &y)
}

/// Refinement student with quality-teacher feedback:
/// `alpha * CE(c_r, student(c, r)) + beta * BCE(1, teacher(bridge(c_rp), r))`.
/// The teacher must be bound as constants.
pub fn loss_student_refine(
    g: &mut Graph,
    student: &mut Bound,
    teacher: &mut Bound,
    batch: &[EncodedRefinement],
    w: &LossWeights,
    layout: &Layout,
) -> Result<Objective, DistillError> {
    w.validate()?;
    check_batch(batch, layout)?;
    if teacher.vars().iter().any(|&v| g.requires_grad(v)) {
        return Err(DistillError::TeacherNotFrozen(TrainingPhase::JointRefineQuality));
    }
    let (cw, rw, rs) = (layout.code_window, layout.review_window, layout.pair_review_start());
    let pairs: Vec<EncodedSequence> = batch.iter().map(|e| e.pair.clone()).collect();
    let refined: Vec<EncodedSequence> = batch.iter().map(|e| e.refined.clone()).collect();

    let enc = student.encode(g, &pairs)?;
    let lp = student.decode_teacher_forced(g, &enc, &refined)?;
    let ce = ce_against(g, lp, &refined)?;

    let table = teacher.get("tok_emb");
    let soft = expected_rows(g, lp, table)?;
    let prefix = vec![vec![BOS]; batch.len()];
    let suffix: Vec<Vec<usize>> = batch
        .iter()
        .map(|e| {
            let mut s = vec![MSG];
            s.extend_from_slice(&e.pair.ids[rs..rs + rw]);
            s.push(EOS);
            s
        })
        .collect();
    let x = splice(g, table, soft, layout.code_len() - 1, cw, &prefix, &suffix)?;
    let mask: Vec<bool> = batch
        .iter()
        .flat_map(|e| {
            let mut m = vec![true];
            m.extend_from_slice(&e.refined.mask[1..=cw]);
            m.push(true);
            m.extend_from_slice(&e.pair.mask[rs..rs + rw]);
            m.push(true);
            m
        })
        .collect();
    let tenc = teacher.encode_embedded(g, x, mask, batch.len(), layout.pair_len())?;
    let p = teacher.classify_quality(g, &tenc)?;
    let lt1 = loss_bce(g, p, &vec![1.0; batch.len()])?;

    let total = weighted_sum(g, &[(w.alpha, ce), (w.beta, lt1)])?;
    Ok(Objective {
        student_loss: total,
        teacher_loss: None,
        ce,
        teacher: lt1,
        embed: None,
    })
}

/// Comment-generation student with refinement-teacher feedback. The student
/// predicts `r` from `c`; its review distributions are bridged with `c` into
/// the teacher, whose CE on `c_r` is `L_t2`. When `aligned`, the pooled
/// student encoding of the bridged review and the pooled teacher encoding of
/// its own bridged code edits are pulled together.
pub fn loss_student_comment(
    g: &mut Graph,
    student: &mut Bound,
    teacher: &mut Bound,
    batch: &[EncodedRefinement],
    w: &LossWeights,
    aligned: bool,
    layout: &Layout,
) -> Result<Objective, DistillError> {
    w.validate()?;
    check_batch(batch, layout)?;
    if student.config.d_model != teacher.config.d_model && aligned {
        return Err(DistillError::Incompatible(format!(
            "alignment needs equal widths, got {} and {}",
            student.config.d_model, teacher.config.d_model
        )));
    }
    let (cw, rw) = (layout.code_window, layout.review_window);
    let codes: Vec<EncodedSequence> = batch.iter().map(|e| e.code.clone()).collect();
    let reviews: Vec<EncodedSequence> = batch.iter().map(|e| e.review.clone()).collect();
    let refined: Vec<EncodedSequence> = batch.iter().map(|e| e.refined.clone()).collect();

    let enc = student.encode(g, &codes)?;
    let lp_s = student.decode_teacher_forced(g, &enc, &reviews)?;
    let ce = ce_against(g, lp_s, &reviews)?;

    let t_table = teacher.get("tok_emb");
    let soft_r = expected_rows(g, lp_s, t_table)?;
    let prefix: Vec<Vec<usize>> = batch.iter().map(|e| e.pair.ids[..cw + 2].to_vec()).collect();
    let suffix = vec![vec![EOS]; batch.len()];
    let x = splice(g, t_table, soft_r, layout.review_len() - 1, rw, &prefix, &suffix)?;
    let mask: Vec<bool> = batch
        .iter()
        .flat_map(|e| {
            let mut m = e.pair.mask[..cw + 2].to_vec();
            m.extend_from_slice(&e.review.mask[1..=rw]);
            m.push(true);
            m
        })
        .collect();
    let tenc = teacher.encode_embedded(g, x, mask, batch.len(), layout.pair_len())?;
    let lp_t = teacher.decode_teacher_forced(g, &tenc, &refined)?;
    let lt2 = ce_against(g, lp_t, &refined)?;

    let core = weighted_sum(g, &[(w.alpha, ce), (w.beta, lt2)])?;
    if !aligned {
        let teacher_loss = g.scale(lt2, w.alpha1)?;
        return Ok(Objective {
            student_loss: core,
            teacher_loss: Some(teacher_loss),
            ce,
            teacher: lt2,
            embed: None,
        });
    }

    let bos = vec![vec![BOS]; batch.len()];
    let eos = vec![vec![EOS]; batch.len()];
    let s_table = student.get("tok_emb");
    let soft_rs = expected_rows(g, lp_s, s_table)?;
    let xr = splice(g, s_table, soft_rs, layout.review_len() - 1, rw, &bos, &eos)?;
    let mr: Vec<bool> = reviews.iter().flat_map(|r| r.mask.iter().copied()).collect();
    let e_r = student.encode_embedded(g, xr, mr, batch.len(), layout.review_len())?.pooled;

    let soft_c = expected_rows(g, lp_t, t_table)?;
    let xc = splice(g, t_table, soft_c, layout.code_len() - 1, cw, &bos, &eos)?;
    let mc: Vec<bool> = refined.iter().flat_map(|r| r.mask.iter().copied()).collect();
    let e_c = teacher.encode_embedded(g, xc, mc, batch.len(), layout.code_len())?.pooled;

    let embed = loss_embed(g, e_r, e_c)?;
    let student_loss = weighted_sum(g, &[(w.alpha2, core), (w.beta2, embed)])?;
    let teacher_loss = weighted_sum(g, &[(w.alpha1, lt2), (w.beta1, embed)])?;
    Ok(Objective {
        student_loss,
        teacher_loss: Some(teacher_loss),
        ce,
        teacher: lt2,
        embed: Some(embed),
    })
}
