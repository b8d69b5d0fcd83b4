use std::fmt::Write as _;

use rand::seq::SliceRandom;

use super::objectives::{
    loss_student_comment, loss_student_refine, supervised_quality_loss, supervised_refine_loss, LossParts,
};
use super::{
    DistillError, EncodedQuality, EncodedRefinement, FreezeMask, FreezeSnapshot, LossWeights, TaskCodec,
    TrainingPhase,
};
use crate::autodiff::{clip_global_norm, AdamConfig, AdamState, Gradients, Graph, Tensor, Var};
use crate::data::rng_stream;
use crate::metrics::{bleu4, codebleu, tokenize, CodeBleuWeights};
use crate::model::{Bound, Seq2Seq};
use crate::tokenizer::EncodedSequence;

const GEN_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm bound, applied to each model separately.
    pub clip_norm: f64,
    pub seed: u64,
    /// Validation runs every this many epochs and after the last one.
    /// Zero means only after the last epoch.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), DistillError> {
        if self.batch_size == 0 {
            return Err(DistillError::Incompatible("batch_size must be positive".into()));
        }
        if !(self.adam.lr.is_finite() && self.adam.lr >= 0.0 && self.clip_norm > 0.0) {
            return Err(DistillError::Incompatible("lr must be >= 0 and clip_norm > 0".into()));
        }
        Ok(())
    }

    fn evaluates_at(&self, epoch: usize) -> bool {
        epoch == self.epochs || (self.eval_every > 0 && epoch.is_multiple_of(self.eval_every))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub parts: LossParts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: TrainingPhase,
    pub total: f64,
    pub ce: Option<f64>,
    pub teacher: Option<f64>,
    pub embed: Option<f64>,
    pub val_bleu4: Option<f64>,
    pub val_codebleu: Option<f64>,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub phase: TrainingPhase,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str =
        "# epoch\tphase\tL_total\tL_CE\tL_teacher\tL_embed\tval_BLEU4\tval_CodeBLEU\ttrain_acc\tval_acc";

    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
        let mut out = format!("{}\n", Self::HEADER);
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.epoch,
                e.phase,
                e.total,
                opt(e.ce),
                opt(e.teacher),
                opt(e.embed),
                opt(e.val_bleu4),
                opt(e.val_codebleu),
                opt(e.train_acc),
                opt(e.val_acc)
            );
        }
        out
    }
}

/// Batches of indices for one epoch, reshuffled by a persistent stream.
fn epoch_batches(order: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng, batch: usize) -> Vec<Vec<usize>> {
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn grads_for(grads: &Gradients, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
}

fn apply_update(
    model: &mut Seq2Seq,
    adam: &mut AdamState,
    mut grads: Vec<Tensor>,
    frozen: &[bool],
    clip: f64,
) -> Result<(), DistillError> {
    for (g, &f) in grads.iter_mut().zip(frozen) {
        if f {
            g.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    clip_global_norm(&mut grads, clip);
    let mut params: Vec<&mut Tensor> = model.params_mut().collect();
    adam.step(&mut params, &grads, frozen)?;
    Ok(())
}

fn new_adam(cfg: AdamConfig, model: &Seq2Seq) -> AdamState {
    let refs: Vec<&Tensor> = model.params().iter().map(|(_, t)| t).collect();
    AdamState::new(cfg, &refs)
}

fn bind_for_step(model: &Seq2Seq, g: &mut Graph, trainable: bool, seed: u64, role: &str, step: usize) -> Bound {
    model
        .bind(g, trainable)
        .with_dropout(rng_stream(seed, &format!("dropout/{role}/{step}")))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Training data for a pre-finetuning phase.
#[derive(Clone, Copy, Debug)]
pub enum PreFinetuneData<'a> {
    Quality {
        train: &'a [EncodedQuality],
        val: &'a [EncodedQuality],
    },
    Refine {
        train: &'a [EncodedRefinement],
        val: &'a [EncodedRefinement],
    },
}

/// Standard supervised fine-tuning of a teacher: BCE on decisions for the
/// quality task, CE on refined code for the refinement task.
pub fn pre_finetune(
    phase: TrainingPhase,
    model: &mut Seq2Seq,
    data: PreFinetuneData<'_>,
    cfg: &TrainConfig,
    codec: &TaskCodec,
) -> Result<TrainLog, DistillError> {
    cfg.validate()?;
    codec.check_model("model", model)?;
    let n = match (phase, data) {
        (TrainingPhase::PreFinetuneQuality, PreFinetuneData::Quality { train, .. }) => train.len(),
        (TrainingPhase::PreFinetuneRefine, PreFinetuneData::Refine { train, .. }) => train.len(),
        _ => return Err(DistillError::WrongPhase(phase)),
    };
    if n == 0 {
        return Err(DistillError::EmptyDataset("training set"));
    }
    let mut log = TrainLog {
        phase,
        epochs: Vec::new(),
        steps: Vec::new(),
    };
    let mut adam = new_adam(cfg.adam, model);
    let frozen = vec![false; model.params().len()];
    let mut shuffle = rng_stream(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut totals = Vec::new();
        for idx in epoch_batches(&mut order, &mut shuffle, cfg.batch_size) {
            let mut g = Graph::new();
            let mut b = bind_for_step(model, &mut g, true, cfg.seed, "model", step);
            let loss = match data {
                PreFinetuneData::Quality { train, .. } => {
                    let batch: Vec<EncodedQuality> = idx.iter().map(|&i| train[i].clone()).collect();
                    supervised_quality_loss(&mut g, &mut b, &batch)?
                }
                PreFinetuneData::Refine { train, .. } => {
                    let batch: Vec<EncodedRefinement> = idx.iter().map(|&i| train[i].clone()).collect();
                    supervised_refine_loss(&mut g, &mut b, &batch)?
                }
            };
            let value = g.value(loss).item()?;
            let grads = g.backward(loss)?;
            let grads = grads_for(&grads, b.vars());
            apply_update(model, &mut adam, grads, &frozen, cfg.clip_norm)?;
            step += 1;
            log.steps.push(StepRecord {
                step,
                epoch,
                parts: LossParts {
                    total: value,
                    ce: value,
                    teacher: 0.0,
                    embed: None,
                },
            });
            totals.push(value);
        }
        let total = mean(&totals);
        let mut rec = EpochRecord {
            epoch,
            phase,
            total,
            ce: None,
            teacher: None,
            embed: None,
            val_bleu4: None,
            val_codebleu: None,
            train_acc: None,
            val_acc: None,
        };
        match data {
            PreFinetuneData::Quality { train, val } => {
                if cfg.evaluates_at(epoch) {
                    rec.train_acc = Some(evaluate_quality(model, train)?);
                    if !val.is_empty() {
                        rec.val_acc = Some(evaluate_quality(model, val)?);
                    }
                }
            }
            PreFinetuneData::Refine { val, .. } => {
                rec.ce = Some(total);
                if cfg.evaluates_at(epoch) && !val.is_empty() {
                    let (b, c) = evaluate_refine(model, val, codec)?;
                    rec.val_bleu4 = Some(b);
                    rec.val_codebleu = Some(c);
                }
            }
        }
        log::info!("{phase} epoch {epoch}: loss {total:.6}");
        log.epochs.push(rec);
    }
    Ok(log)
}

/// Joint fine-tuning of a student with feedback from a teacher.
///
/// In `JointRefineQuality` the teacher is constant and must be covered by
/// `freeze`; in the comment phases it trains on its own loss unless frozen.
/// Any frozen parameter that changes aborts the run.
#[allow(clippy::too_many_arguments)]
pub fn joint_train(
    phase: TrainingPhase,
    student: &mut Seq2Seq,
    teacher: &mut Seq2Seq,
    train: &[EncodedRefinement],
    val: &[EncodedRefinement],
    w: &LossWeights,
    freeze: &FreezeMask,
    cfg: &TrainConfig,
    codec: &TaskCodec,
) -> Result<TrainLog, DistillError> {
    if !phase.is_joint() {
        return Err(DistillError::WrongPhase(phase));
    }
    w.validate()?;
    cfg.validate()?;
    codec.check_model("student", student)?;
    codec.check_model("teacher", teacher)?;
    if train.is_empty() {
        return Err(DistillError::EmptyDataset("training set"));
    }
    let teacher_all_frozen = freeze.covers("teacher", teacher);
    if phase == TrainingPhase::JointRefineQuality && !teacher_all_frozen {
        return Err(DistillError::TeacherNotFrozen(phase));
    }
    let teacher_trainable = !teacher_all_frozen;
    let s_frozen = freeze.flags("student", student);
    let t_frozen = freeze.flags("teacher", teacher);
    let s_snap = FreezeSnapshot::take("student", student, freeze);
    let t_snap = FreezeSnapshot::take("teacher", teacher, freeze);
    let mut s_adam = new_adam(cfg.adam, student);
    let mut t_adam = new_adam(cfg.adam, teacher);

    let mut log = TrainLog {
        phase,
        epochs: Vec::new(),
        steps: Vec::new(),
    };
    let mut shuffle = rng_stream(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut parts = Vec::new();
        for idx in epoch_batches(&mut order, &mut shuffle, cfg.batch_size) {
            let batch: Vec<EncodedRefinement> = idx.iter().map(|&i| train[i].clone()).collect();
            let mut g = Graph::new();
            let mut s = bind_for_step(student, &mut g, true, cfg.seed, "student", step);
            let mut t = bind_for_step(teacher, &mut g, teacher_trainable, cfg.seed, "teacher", step);
            let obj = match phase {
                TrainingPhase::JointRefineQuality => {
                    loss_student_refine(&mut g, &mut s, &mut t, &batch, w, &codec.layout)?
                }
                _ => loss_student_comment(&mut g, &mut s, &mut t, &batch, w, phase.is_aligned(), &codec.layout)?,
            };
            let p = obj.parts(&g)?;
            let sg = grads_for(&g.backward(obj.student_loss)?, s.vars());
            let tg = match obj.teacher_loss {
                Some(tl) if teacher_trainable => Some(grads_for(&g.backward(tl)?, t.vars())),
                _ => None,
            };
            drop(g);
            apply_update(student, &mut s_adam, sg, &s_frozen, cfg.clip_norm)?;
            if let Some(tg) = tg {
                apply_update(teacher, &mut t_adam, tg, &t_frozen, cfg.clip_norm)?;
            }
            step += 1;
            s_snap.verify(student, step)?;
            t_snap.verify(teacher, step)?;
            log.steps.push(StepRecord { step, epoch, parts: p });
            parts.push(p);
        }
        let col = |f: fn(&LossParts) -> f64| mean(&parts.iter().map(f).collect::<Vec<_>>());
        let (ce, lt) = (col(|p| p.ce), col(|p| p.teacher));
        let embed = phase
            .is_aligned()
            .then(|| col(|p| p.embed.unwrap_or(f64::NAN)));
        let mut rec = EpochRecord {
            epoch,
            phase,
            total: w.student_total(ce, lt, embed),
            ce: Some(ce),
            teacher: Some(lt),
            embed,
            val_bleu4: None,
            val_codebleu: None,
            train_acc: None,
            val_acc: None,
        };
        if cfg.evaluates_at(epoch) && !val.is_empty() {
            let (b, c) = match phase {
                TrainingPhase::JointRefineQuality => evaluate_refine(student, val, codec)?,
                _ => evaluate_comment(student, teacher, val, codec)?,
            };
            rec.val_bleu4 = Some(b);
            rec.val_codebleu = Some(c);
        }
        log::info!(
            "{phase} epoch {epoch}: total {:.6} ce {ce:.6} teacher {lt:.6}",
            rec.total
        );
        log.epochs.push(rec);
    }
    Ok(log)
}

fn generate_texts(
    model: &Seq2Seq,
    inputs: &[EncodedSequence],
    out_len: usize,
    codec: &TaskCodec,
) -> Result<Vec<String>, DistillError> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(GEN_CHUNK) {
        for seq in model.greedy_generate(chunk, out_len)? {
            out.push(codec.decode(&seq)?);
        }
    }
    Ok(out)
}

/// Greedy reviews for code inputs.
pub fn generate_reviews(model: &Seq2Seq, codes: &[EncodedSequence], codec: &TaskCodec) -> Result<Vec<String>, DistillError> {
    generate_texts(model, codes, codec.layout.review_len(), codec)
}

/// Greedy refined code for `(c, r)` inputs.
pub fn generate_refinements(
    model: &Seq2Seq,
    pairs: &[EncodedSequence],
    codec: &TaskCodec,
) -> Result<Vec<String>, DistillError> {
    generate_texts(model, pairs, codec.layout.code_len(), codec)
}

fn mean_scores(cands: &[String], refs: &[&str]) -> (f64, f64) {
    let w = CodeBleuWeights::default();
    let n = cands.len().max(1) as f64;
    let b = cands
        .iter()
        .zip(refs)
        .map(|(c, r)| bleu4(&tokenize(c), &tokenize(r)))
        .sum::<f64>();
    let cb = cands.iter().zip(refs).map(|(c, r)| codebleu(c, r, &w)).sum::<f64>();
    (b / n, cb / n)
}

/// Mean BLEU-4 and CodeBLEU of the model's refinements against `c_r`.
pub fn evaluate_refine(
    model: &Seq2Seq,
    data: &[EncodedRefinement],
    codec: &TaskCodec,
) -> Result<(f64, f64), DistillError> {
    if data.is_empty() {
        return Err(DistillError::EmptyDataset("evaluation set"));
    }
    let pairs: Vec<EncodedSequence> = data.iter().map(|e| e.pair.clone()).collect();
    let cands = generate_refinements(model, &pairs, codec)?;
    let refs: Vec<&str> = data.iter().map(|e| e.triplet.refined_code.as_str()).collect();
    Ok(mean_scores(&cands, &refs))
}

/// BLEU-4 of the student's reviews against `r`, and CodeBLEU of the teacher's
/// refinements conditioned on those generated reviews against `c_r`.
pub fn evaluate_comment(
    student: &Seq2Seq,
    teacher: &Seq2Seq,
    data: &[EncodedRefinement],
    codec: &TaskCodec,
) -> Result<(f64, f64), DistillError> {
    if data.is_empty() {
        return Err(DistillError::EmptyDataset("evaluation set"));
    }
    let codes: Vec<EncodedSequence> = data.iter().map(|e| e.code.clone()).collect();
    let reviews = generate_reviews(student, &codes, codec)?;
    let l = codec.layout;
    let pairs = data
        .iter()
        .zip(&reviews)
        .map(|(e, r)| codec.vocab.encode_pair(&e.triplet.code, r, l.code_window, l.review_window))
        .collect::<Result<Vec<_>, _>>()?;
    let fixes = generate_refinements(teacher, &pairs, codec)?;
    let review_refs: Vec<&str> = data.iter().map(|e| e.triplet.review.as_str()).collect();
    let code_refs: Vec<&str> = data.iter().map(|e| e.triplet.refined_code.as_str()).collect();
    let (b, _) = mean_scores(&reviews, &review_refs);
    let (_, cb) = mean_scores(&fixes, &code_refs);
    Ok((b, cb))
}

/// Fraction of decisions predicted correctly at threshold 0.5.
pub fn evaluate_quality(model: &Seq2Seq, data: &[EncodedQuality]) -> Result<f64, DistillError> {
    if data.is_empty() {
        return Err(DistillError::EmptyDataset("evaluation set"));
    }
    let mut correct = 0;
    for chunk in data.chunks(GEN_CHUNK) {
        let pairs: Vec<EncodedSequence> = chunk.iter().map(|e| e.pair.clone()).collect();
        for (p, e) in model.quality_probs(&pairs)?.into_iter().zip(chunk) {
            if (p >= 0.5) == (e.triplet.decision == 1) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
