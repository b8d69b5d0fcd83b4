//! Cross-task distillation: loss terms, the soft student-to-teacher bridge,
//! pre-finetuning and joint training.

mod losses;
mod objectives;
mod train;

pub use losses::{loss_bce, loss_ce, loss_embed, shifted_targets, soft_embed_bridge};
pub use objectives::{
    loss_student_comment, loss_student_refine, supervised_comment_loss, supervised_quality_loss,
    supervised_refine_loss, LossParts, Objective,
};
pub use train::{
    evaluate_comment, evaluate_quality, evaluate_refine, generate_refinements, generate_reviews, joint_train,
    pre_finetune, EpochRecord, PreFinetuneData, StepRecord, TrainConfig, TrainLog,
};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::TensorError;
use crate::data::{QualityTriplet, RefinementTriplet};
use crate::model::Seq2Seq;
use crate::tokenizer::{EncodedSequence, TokenizerError, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error("binary target {0} is neither 0 nor 1")]
    BadTarget(f64),
    #[error("the teacher must be frozen in phase {0}")]
    TeacherNotFrozen(TrainingPhase),
    #[error("frozen parameter `{name}` changed at step {step}")]
    FreezeViolation { name: String, step: usize },
    #[error("{0} is empty")]
    EmptyDataset(&'static str),
    #[error("phase {0} cannot be run here")]
    WrongPhase(TrainingPhase),
    #[error("incompatible models: {0}")]
    Incompatible(String),
}

impl DistillError {
    /// True for failures of the numeric kind: non-finite values and freeze
    /// violations.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            DistillError::Tensor(TensorError::NonFinite { .. }) | DistillError::FreezeViolation { .. }
        )
    }
}

/// Weights of the composed objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub alpha1: f64,
    pub beta1: f64,
    pub alpha2: f64,
    pub beta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            alpha1: 0.5,
            beta1: 0.5,
            alpha2: 0.5,
            beta2: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), DistillError> {
        let named = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("alpha1", self.alpha1),
            ("beta1", self.beta1),
            ("alpha2", self.alpha2),
            ("beta2", self.beta2),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(DistillError::Weights(format!("{name} = {v} must be a finite value >= 0")));
            }
        }
        Ok(())
    }

    /// Weights with every feedback term switched off.
    pub fn baseline(self) -> Self {
        Self {
            beta: 0.0,
            beta1: 0.0,
            beta2: 0.0,
            ..self
        }
    }

    /// Student total from its logged components.
    pub fn student_total(&self, ce: f64, teacher: f64, embed: Option<f64>) -> f64 {
        let core = self.alpha * ce + self.beta * teacher;
        match embed {
            Some(e) => self.alpha2 * core + self.beta2 * e,
            None => core,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainingPhase {
    PreFinetuneQuality,
    PreFinetuneRefine,
    JointRefineQuality,
    JointCommentRefine,
    JointCommentRefineAligned,
}

impl TrainingPhase {
    pub const ALL: [TrainingPhase; 5] = [
        TrainingPhase::PreFinetuneQuality,
        TrainingPhase::PreFinetuneRefine,
        TrainingPhase::JointRefineQuality,
        TrainingPhase::JointCommentRefine,
        TrainingPhase::JointCommentRefineAligned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainingPhase::PreFinetuneQuality => "pre-finetune-quality",
            TrainingPhase::PreFinetuneRefine => "pre-finetune-refine",
            TrainingPhase::JointRefineQuality => "joint-refine-quality",
            TrainingPhase::JointCommentRefine => "joint-comment-refine",
            TrainingPhase::JointCommentRefineAligned => "joint-comment-refine-aligned",
        }
    }

    pub fn is_joint(self) -> bool {
        matches!(
            self,
            TrainingPhase::JointRefineQuality
                | TrainingPhase::JointCommentRefine
                | TrainingPhase::JointCommentRefineAligned
        )
    }

    pub fn is_aligned(self) -> bool {
        self == TrainingPhase::JointCommentRefineAligned
    }
}

impl fmt::Display for TrainingPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainingPhase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        TrainingPhase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = TrainingPhase::ALL.iter().map(|p| p.name()).collect();
                format!("unknown phase `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// Parameter names, qualified as `student.<name>` or `teacher.<name>`, that
/// the optimizer must leave untouched.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezeMask {
    pub frozen_names: BTreeSet<String>,
}

impl FreezeMask {
    pub fn none() -> Self {
        Self::default()
    }

    /// Every parameter of `model` under the `role` prefix.
    pub fn all_of(role: &str, model: &Seq2Seq) -> Self {
        Self {
            frozen_names: model.params().iter().map(|(n, _)| format!("{role}.{n}")).collect(),
        }
    }

    pub fn contains(&self, role: &str, name: &str) -> bool {
        self.frozen_names.contains(&format!("{role}.{name}"))
    }

    /// Per-parameter flags for `model` in construction order.
    pub fn flags(&self, role: &str, model: &Seq2Seq) -> Vec<bool> {
        model.params().iter().map(|(n, _)| self.contains(role, n)).collect()
    }

    pub fn covers(&self, role: &str, model: &Seq2Seq) -> bool {
        self.flags(role, model).iter().all(|&f| f)
    }
}

/// Bit-exact copies of frozen parameters, used to detect any drift.
#[derive(Clone, Debug)]
pub(crate) struct FreezeSnapshot {
    entries: Vec<(String, usize, Vec<u64>)>,
}

impl FreezeSnapshot {
    pub(crate) fn take(role: &str, model: &Seq2Seq, mask: &FreezeMask) -> Self {
        let entries = model
            .params()
            .iter()
            .enumerate()
            .filter(|(_, (n, _))| mask.contains(role, n))
            .map(|(i, (n, t))| (format!("{role}.{n}"), i, t.data().iter().map(|x| x.to_bits()).collect()))
            .collect();
        Self { entries }
    }

    pub(crate) fn verify(&self, model: &Seq2Seq, step: usize) -> Result<(), DistillError> {
        for (name, i, bits) in &self.entries {
            let now = model.params()[*i].1.data();
            if now.len() != bits.len() || now.iter().zip(bits).any(|(x, b)| x.to_bits() != *b) {
                return Err(DistillError::FreezeViolation {
                    name: name.clone(),
                    step,
                });
            }
        }
        Ok(())
    }
}

/// Fixed input and output windows shared by every task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub code_window: usize,
    pub review_window: usize,
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            code_window: 36,
            review_window: 12,
        }
    }
}

impl Layout {
    /// `<s> c… </s>`
    pub fn code_len(&self) -> usize {
        self.code_window + 2
    }

    /// `<s> r… </s>`
    pub fn review_len(&self) -> usize {
        self.review_window + 2
    }

    /// `<s> c… <msg> r… </s>`
    pub fn pair_len(&self) -> usize {
        self.code_window + self.review_window + 3
    }

    /// Offset of the review window inside a pair layout.
    pub fn pair_review_start(&self) -> usize {
        self.code_window + 2
    }

    pub fn max_len(&self) -> usize {
        self.pair_len()
    }
}

/// One refinement triplet in every layout the tasks use.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedRefinement {
    pub triplet: RefinementTriplet,
    /// `c` alone, the comment-generation input.
    pub code: EncodedSequence,
    /// `r` alone, the comment-generation target.
    pub review: EncodedSequence,
    /// `(c, r)`, the refinement input.
    pub pair: EncodedSequence,
    /// `c_r`, the refinement target.
    pub refined: EncodedSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedQuality {
    pub triplet: QualityTriplet,
    pub pair: EncodedSequence,
}

/// A vocabulary with the layout every encoded example follows.
#[derive(Clone, Debug)]
pub struct TaskCodec {
    pub vocab: Vocabulary,
    pub layout: Layout,
}

impl TaskCodec {
    pub fn new(vocab: Vocabulary, layout: Layout) -> Self {
        Self { vocab, layout }
    }

    pub fn encode_refinement(&self, t: &RefinementTriplet) -> Result<EncodedRefinement, DistillError> {
        let l = self.layout;
        Ok(EncodedRefinement {
            triplet: t.clone(),
            code: self.vocab.encode_code(&t.code, l.code_len())?,
            review: self.vocab.encode_code(&t.review, l.review_len())?,
            pair: self.vocab.encode_pair(&t.code, &t.review, l.code_window, l.review_window)?,
            refined: self.vocab.encode_code(&t.refined_code, l.code_len())?,
        })
    }

    pub fn encode_quality(&self, t: &QualityTriplet) -> Result<EncodedQuality, DistillError> {
        let l = self.layout;
        Ok(EncodedQuality {
            triplet: t.clone(),
            pair: self.vocab.encode_pair(&t.code_change, &t.review, l.code_window, l.review_window)?,
        })
    }

    pub fn encode_refinements(&self, ts: &[RefinementTriplet]) -> Result<Vec<EncodedRefinement>, DistillError> {
        ts.iter().map(|t| self.encode_refinement(t)).collect()
    }

    pub fn encode_qualities(&self, ts: &[QualityTriplet]) -> Result<Vec<EncodedQuality>, DistillError> {
        ts.iter().map(|t| self.encode_quality(t)).collect()
    }

    /// Source text of a generated layout.
    pub fn decode(&self, seq: &EncodedSequence) -> Result<String, DistillError> {
        Ok(self.vocab.decode(&seq.ids)?)
    }

    /// Rejects models whose vocabulary or position table does not fit.
    pub fn check_model(&self, role: &str, model: &Seq2Seq) -> Result<(), DistillError> {
        let c = &model.config;
        if c.vocab_size != self.vocab.len() {
            return Err(DistillError::Incompatible(format!(
                "{role} vocab_size {} differs from vocabulary size {}",
                c.vocab_size,
                self.vocab.len()
            )));
        }
        if c.max_len < self.layout.max_len() {
            return Err(DistillError::Incompatible(format!(
                "{role} max_len {} is below the layout length {}",
                c.max_len,
                self.layout.max_len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
