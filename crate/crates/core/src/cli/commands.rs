use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use super::{CliError, RunConfig};
use crate::data::{
    load_jsonl, rng_stream, save_jsonl, split, synth_generate, QualityTriplet, RefinementTriplet, Splits,
};
use crate::distillation::{
    evaluate_comment, evaluate_quality, evaluate_refine, generate_refinements, generate_reviews, joint_train,
    pre_finetune as run_pre_finetune, FreezeMask, PreFinetuneData, TaskCodec, TrainLog, TrainingPhase,
};
use crate::metrics::{score_jsonl, CodeBleuWeights};
use crate::model::{ModelConfig, Seq2Seq};
use crate::tokenizer::{train_bpe, Vocabulary};

pub(crate) const QUALITY_CKPT: &str = "pretrained_quality.ckpt";
pub(crate) const REFINE_CKPT: &str = "pretrained_refine.ckpt";

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn read_vocab(cfg: &RunConfig) -> Result<Vocabulary, CliError> {
    let path = cfg.vocab_path();
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::data(format!("{}: {e} (run train-tokenizer first)", path.display())))?;
    Vocabulary::from_text(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn model_config(cfg: &RunConfig, vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    }
}

fn shape(c: &ModelConfig) -> String {
    format!(
        "n_layers={} n_heads={} d_model={} d_ff={} vocab_size={} max_len={}",
        c.n_layers, c.n_heads, c.d_model, c.d_ff, c.vocab_size, c.max_len
    )
}

/// Initializes a model from the `init/<role>` stream of the run seed.
pub(crate) fn init_model(mc: &ModelConfig, seed: u64, role: &str) -> Result<Seq2Seq, CliError> {
    Ok(Seq2Seq::new(mc.clone(), &mut rng_stream(seed, &format!("init/{role}")))?)
}

/// Loads a checkpoint whose dimensions must equal `expected`.
fn load_model(path: &Path, expected: &ModelConfig) -> Result<Seq2Seq, CliError> {
    if !path.exists() {
        return Err(CliError::data(format!("checkpoint {} not found", path.display())));
    }
    let mut m = Seq2Seq::load(path)?;
    let mut found = m.config.clone();
    found.dropout = expected.dropout;
    if &found != expected {
        return Err(CliError::config(format!(
            "checkpoint {} has shape [{}] but the configuration gives [{}]",
            path.display(),
            shape(&m.config),
            shape(expected)
        )));
    }
    m.config.dropout = expected.dropout;
    Ok(m)
}

fn save_model(model: &Seq2Seq, path: &Path) -> Result<(), CliError> {
    write_file(path, &model.to_bytes())
}

fn refinement_splits(cfg: &RunConfig) -> Result<Splits<RefinementTriplet>, CliError> {
    Ok(split(load_jsonl(&cfg.refinement_path())?, &cfg.split)?)
}

fn quality_splits(cfg: &RunConfig) -> Result<Splits<QualityTriplet>, CliError> {
    Ok(split(load_jsonl(&cfg.quality_path())?, &cfg.split)?)
}

fn pick<T>(s: Splits<T>, name: &str) -> Vec<T> {
    match name {
        "train" => s.train,
        "val" => s.val,
        _ => s.test,
    }
}

fn steps_tsv(log: &TrainLog) -> String {
    let mut out = String::from("# step\tepoch\tL_total\tL_CE\tL_teacher\tL_embed\n");
    for s in &log.steps {
        let p = &s.parts;
        let embed = p.embed.map_or_else(|| "-".to_string(), |e| e.to_string());
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}", s.step, s.epoch, p.total, p.ce, p.teacher, embed);
    }
    out
}

fn write_logs(cfg: &RunConfig, log: &TrainLog) -> Result<PathBuf, CliError> {
    let path = cfg.run_dir.join(format!("{}.log.tsv", log.phase));
    write_file(&path, log.to_tsv().as_bytes())?;
    write_file(&cfg.run_dir.join(format!("{}.steps.tsv", log.phase)), steps_tsv(log).as_bytes())?;
    Ok(path)
}

fn print_last_epoch(log: &TrainLog, path: &Path) {
    let tsv = log.to_tsv();
    println!("{}", TrainLog::HEADER);
    if let Some(last) = tsv.lines().skip(1).last() {
        println!("{last}");
    }
    println!("# log {}", path.display());
}

/// The configured phase, with `aligned` selecting the aligned comment phase.
fn resolve_phase(cfg: &RunConfig, command: &str) -> Result<TrainingPhase, CliError> {
    let phase = cfg
        .phase
        .ok_or_else(|| CliError::usage(format!("{command} needs --phase")))?;
    match (phase, cfg.aligned) {
        (TrainingPhase::JointCommentRefine, true) => Ok(TrainingPhase::JointCommentRefineAligned),
        (p, true) if !p.is_aligned() => Err(CliError::usage(format!("--aligned does not apply to phase {p}"))),
        (p, _) => Ok(p),
    }
}

fn student_path(cfg: &RunConfig, phase: TrainingPhase) -> PathBuf {
    cfg.run_dir.join(format!("{phase}.student.ckpt"))
}

fn teacher_path(cfg: &RunConfig, phase: TrainingPhase) -> PathBuf {
    cfg.run_dir.join(format!("{phase}.teacher.ckpt"))
}

pub(crate) fn synth_data(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let dir = &cfg.data_dir;
    let manifest_path = dir.join("manifest.json");
    let outputs = [cfg.refinement_path(), cfg.quality_path(), manifest_path.clone()];
    if !force {
        if let Some(p) = outputs.iter().find(|p| p.exists()) {
            return Err(CliError::usage(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    let corpus = synth_generate(cfg.synth_n, cfg.seed)?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    save_jsonl(&cfg.refinement_path(), &corpus.refinement)?;
    save_jsonl(&cfg.quality_path(), &corpus.quality)?;
    let manifest = serde_json::json!({
        "seed": cfg.seed,
        "n": cfg.synth_n,
        "refinement": corpus.refinement.len(),
        "quality": corpus.quality.len(),
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::data(e.to_string()))? + "\n";
    write_file(&manifest_path, text.as_bytes())?;
    println!(
        "wrote {} refinement and {} quality records to {}",
        corpus.refinement.len(),
        corpus.quality.len(),
        dir.display()
    );
    Ok(())
}

pub(crate) fn train_tokenizer(cfg: &RunConfig) -> Result<(), CliError> {
    let refinement: Vec<RefinementTriplet> = load_jsonl(&cfg.refinement_path())?;
    let quality: Vec<QualityTriplet> = if cfg.quality_path().exists() {
        load_jsonl(&cfg.quality_path())?
    } else {
        Vec::new()
    };
    let mut corpus: Vec<&str> = Vec::new();
    for t in &refinement {
        corpus.extend([t.code.as_str(), t.review.as_str(), t.refined_code.as_str()]);
    }
    for t in &quality {
        corpus.extend([t.code_change.as_str(), t.review.as_str()]);
    }
    let vocab = train_bpe(&corpus, cfg.model.vocab_size)?;
    let path = cfg.vocab_path();
    write_file(&path, vocab.to_text().as_bytes())?;
    println!(
        "vocabulary: {} tokens, {} merges -> {}",
        vocab.len(),
        vocab.merges().len(),
        path.display()
    );
    Ok(())
}

pub(crate) fn pre_finetune(cfg: &RunConfig) -> Result<(), CliError> {
    let phase = resolve_phase(cfg, "pre-finetune")?;
    let ckpt = match phase {
        TrainingPhase::PreFinetuneQuality => QUALITY_CKPT,
        TrainingPhase::PreFinetuneRefine => REFINE_CKPT,
        p => return Err(CliError::usage(format!("phase {p} is not a pre-finetune phase"))),
    };
    let codec = TaskCodec::new(read_vocab(cfg)?, cfg.layout);
    let mc = model_config(cfg, &codec.vocab);
    let mut model = init_model(&mc, cfg.seed, "teacher")?;
    let tc = cfg.train_config();
    let log = if phase == TrainingPhase::PreFinetuneQuality {
        let s = quality_splits(cfg)?;
        let (train, val) = (codec.encode_qualities(&s.train)?, codec.encode_qualities(&s.val)?);
        run_pre_finetune(phase, &mut model, PreFinetuneData::Quality { train: &train, val: &val }, &tc, &codec)?
    } else {
        let s = refinement_splits(cfg)?;
        let (train, val) = (codec.encode_refinements(&s.train)?, codec.encode_refinements(&s.val)?);
        run_pre_finetune(phase, &mut model, PreFinetuneData::Refine { train: &train, val: &val }, &tc, &codec)?
    };
    save_model(&model, &cfg.run_dir.join(ckpt))?;
    let path = write_logs(cfg, &log)?;
    print_last_epoch(&log, &path);
    Ok(())
}

fn check_freeze_names(mask: &FreezeMask, student: &Seq2Seq, teacher: &Seq2Seq) -> Result<(), CliError> {
    for name in &mask.frozen_names {
        let known = match name.split_once('.') {
            Some(("student", n)) => student.param(n).is_some(),
            Some(("teacher", n)) => teacher.param(n).is_some(),
            _ => false,
        };
        if !known {
            return Err(CliError::config(format!("freeze names unknown parameter `{name}`")));
        }
    }
    Ok(())
}

pub(crate) fn train_joint(cfg: &RunConfig) -> Result<(), CliError> {
    let phase = resolve_phase(cfg, "train-joint")?;
    if !phase.is_joint() {
        return Err(CliError::usage(format!("phase {phase} is not a joint phase")));
    }
    let codec = TaskCodec::new(read_vocab(cfg)?, cfg.layout);
    let mc = model_config(cfg, &codec.vocab);
    let mut teacher = if cfg.fresh_teacher {
        init_model(&mc, cfg.seed, "teacher")?
    } else {
        let name = if phase == TrainingPhase::JointRefineQuality {
            QUALITY_CKPT
        } else {
            REFINE_CKPT
        };
        load_model(&cfg.run_dir.join(name), &mc)?
    };
    let mut student = init_model(&mc, cfg.seed, "student")?;
    let mut freeze = cfg.freeze_mask();
    check_freeze_names(&freeze, &student, &teacher)?;
    if phase == TrainingPhase::JointRefineQuality {
        freeze.frozen_names.extend(FreezeMask::all_of("teacher", &teacher).frozen_names);
    }
    let s = refinement_splits(cfg)?;
    let (train, val) = (codec.encode_refinements(&s.train)?, codec.encode_refinements(&s.val)?);
    let log = joint_train(
        phase,
        &mut student,
        &mut teacher,
        &train,
        &val,
        &cfg.weights,
        &freeze,
        &cfg.train_config(),
        &codec,
    )?;
    save_model(&student, &student_path(cfg, phase))?;
    save_model(&teacher, &teacher_path(cfg, phase))?;
    let path = write_logs(cfg, &log)?;
    print_last_epoch(&log, &path);
    Ok(())
}

pub(crate) fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let phase = resolve_phase(cfg, "evaluate")?;
    let codec = TaskCodec::new(read_vocab(cfg)?, cfg.layout);
    let mc = model_config(cfg, &codec.vocab);
    let split_name = cfg.eval_split.as_str();
    let empty = || CliError::data(format!("the {split_name} split is empty"));
    let mut rows: Vec<(&str, f64)> = Vec::new();
    let mut count = 0;
    let refinements = |count: &mut usize| -> Result<_, CliError> {
        let data = codec.encode_refinements(&pick(refinement_splits(cfg)?, split_name))?;
        if data.is_empty() {
            return Err(empty());
        }
        *count = data.len();
        Ok(data)
    };
    let qualities = |count: &mut usize| -> Result<_, CliError> {
        let data = codec.encode_qualities(&pick(quality_splits(cfg)?, split_name))?;
        if data.is_empty() {
            return Err(empty());
        }
        *count = data.len();
        Ok(data)
    };
    match phase {
        TrainingPhase::PreFinetuneQuality => {
            let model = load_model(&cfg.run_dir.join(QUALITY_CKPT), &mc)?;
            rows.push(("quality_accuracy", evaluate_quality(&model, &qualities(&mut count)?)?));
        }
        TrainingPhase::PreFinetuneRefine => {
            let model = load_model(&cfg.run_dir.join(REFINE_CKPT), &mc)?;
            let (b, cb) = evaluate_refine(&model, &refinements(&mut count)?, &codec)?;
            rows.extend([("refine_bleu4", b), ("refine_codebleu", cb)]);
        }
        TrainingPhase::JointRefineQuality => {
            let student = load_model(&student_path(cfg, phase), &mc)?;
            let teacher = load_model(&teacher_path(cfg, phase), &mc)?;
            let (b, cb) = evaluate_refine(&student, &refinements(&mut count)?, &codec)?;
            let acc = evaluate_quality(&teacher, &qualities(&mut count)?)?;
            rows.extend([("refine_bleu4", b), ("refine_codebleu", cb), ("quality_accuracy", acc)]);
        }
        TrainingPhase::JointCommentRefine | TrainingPhase::JointCommentRefineAligned => {
            let student = load_model(&student_path(cfg, phase), &mc)?;
            let teacher = load_model(&teacher_path(cfg, phase), &mc)?;
            let (b, cb) = evaluate_comment(&student, &teacher, &refinements(&mut count)?, &codec)?;
            rows.extend([("comment_bleu4", b), ("refine_codebleu", cb)]);
        }
    }
    let mut report = format!("# phase\t{phase}\n# split\t{split_name}\t{count}\n");
    for (k, v) in rows {
        let _ = writeln!(report, "{k}\t{v}");
    }
    write_file(
        &cfg.run_dir.join(format!("{phase}.{split_name}.report.tsv")),
        report.as_bytes(),
    )?;
    print!("{report}");
    Ok(())
}

fn warn_truncation(what: &str, tokens: usize, window: usize) {
    if tokens > window {
        log::warn!("{what} has {tokens} tokens; truncated to the first {window}");
    }
}

pub(crate) fn generate(cfg: &RunConfig, input: &str, refine: bool) -> Result<(), CliError> {
    let phase = match cfg.phase {
        None => resolve_phase(
            &RunConfig {
                phase: Some(TrainingPhase::JointCommentRefine),
                ..cfg.clone()
            },
            "generate",
        )?,
        Some(_) => resolve_phase(cfg, "generate")?,
    };
    if !matches!(
        phase,
        TrainingPhase::JointCommentRefine | TrainingPhase::JointCommentRefineAligned
    ) {
        return Err(CliError::usage(format!("generate needs a comment phase, not {phase}")));
    }
    let codec = TaskCodec::new(read_vocab(cfg)?, cfg.layout);
    let mc = model_config(cfg, &codec.vocab);
    let l = codec.layout;
    let student = load_model(&student_path(cfg, phase), &mc)?;
    let teacher = if refine {
        Some(load_model(&teacher_path(cfg, phase), &mc)?)
    } else {
        None
    };
    warn_truncation("input", codec.vocab.tokenize(input).len(), l.code_window);
    let code = codec.vocab.encode_code(input, l.code_len())?;
    let review = generate_reviews(&student, &[code], &codec)?.remove(0);
    println!("{review}");
    if let Some(teacher) = teacher {
        warn_truncation("review", codec.vocab.tokenize(&review).len(), l.review_window);
        let pair = codec.vocab.encode_pair(input, &review, l.code_window, l.review_window)?;
        let refined = generate_refinements(&teacher, &[pair], &codec)?.remove(0);
        println!("{refined}");
    }
    Ok(())
}

pub(crate) fn score(input: &Path) -> Result<(), CliError> {
    let f = std::fs::File::open(input).map_err(|e| CliError::data(format!("{}: {e}", input.display())))?;
    print!("{}", score_jsonl(BufReader::new(f), &CodeBleuWeights::default())?);
    Ok(())
}
