use super::*;
use crate::autodiff::{finite_diff_check_many, AdamConfig, Graph, Tensor, TensorError, Var};
use crate::data::{rng_stream, synth_generate};
use crate::model::{ModelConfig, Seq2Seq};
use crate::tokenizer::{train_bpe, EncodedSequence, BOS, EOS, MSG, PAD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const TINY_LAYOUT: Layout = Layout {
    code_window: 4,
    review_window: 3,
};

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: 32,
        max_len: 12,
        dropout: 0.0,
    }
}

fn tiny_model(seed: &str) -> Seq2Seq {
    let mut rng = rng_stream(7, seed);
    let mut m = Seq2Seq::new(tiny_cfg(), &mut rng).unwrap();
    for t in m.params_mut() {
        if t.rank() == 1 {
            for x in t.data_mut() {
                *x += 0.1 * (rng.gen::<f64>() - 0.5);
            }
        }
    }
    m
}

fn window(rng: &mut ChaCha8Rng, w: usize) -> (Vec<usize>, usize) {
    let n = rng.gen_range(1..=w);
    let mut ids: Vec<usize> = (0..n).map(|_| rng.gen_range(MSG + 1..32)).collect();
    ids.resize(w, PAD);
    (ids, n)
}

fn seq(ids: Vec<usize>, content: usize) -> EncodedSequence {
    let mask = ids.iter().map(|&i| i != PAD).collect();
    EncodedSequence {
        ids,
        mask,
        true_length: content,
    }
}

fn single(win: &(Vec<usize>, usize)) -> EncodedSequence {
    let mut ids = vec![BOS];
    ids.extend_from_slice(&win.0);
    ids.push(EOS);
    seq(ids, win.1)
}

fn tiny_batch(n: usize, seed: &str) -> Vec<EncodedRefinement> {
    let mut rng = rng_stream(3, seed);
    let l = TINY_LAYOUT;
    (0..n)
        .map(|_| {
            let c = window(&mut rng, l.code_window);
            let r = window(&mut rng, l.review_window);
            let cr = window(&mut rng, l.code_window);
            let mut pair = vec![BOS];
            pair.extend_from_slice(&c.0);
            pair.push(MSG);
            pair.extend_from_slice(&r.0);
            pair.push(EOS);
            EncodedRefinement {
                triplet: RefinementTriplet {
                    code: "c".into(),
                    review: "r".into(),
                    refined_code: "cr".into(),
                },
                code: single(&c),
                review: single(&r),
                pair: seq(pair, c.1 + r.1),
                refined: single(&cr),
            }
        })
        .collect()
}

fn to_tensor_err(e: DistillError) -> TensorError {
    match e {
        DistillError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "objective",
            reason: other.to_string(),
        },
    }
}

/// A few random coordinates of every tensor.
fn sample_coords(inputs: &[Tensor], per: usize, seed: &str) -> Vec<(usize, usize)> {
    let mut rng = rng_stream(5, seed);
    let mut out = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        for _ in 0..per.min(t.numel()) {
            out.push((i, rng.gen_range(0..t.numel())));
        }
    }
    out
}

fn tensors(m: &Seq2Seq) -> Vec<Tensor> {
    m.params().iter().map(|(_, t)| t.clone()).collect()
}

fn scalar(g: &mut Graph, x: f64) -> Var {
    g.constant(Tensor::scalar(x))
}

#[test]
fn bce_examples() {
    let mut g = Graph::new();
    let cases = [(1.0, 1.0 - 1e-12, 0.0, 1e-9), (0.0, 0.5, std::f64::consts::LN_2, 1e-9), (1.0, 0.9, 0.105361, 1e-6)];
    for (y, p, want, tol) in cases {
        let pv = g.constant(Tensor::vector(vec![p]).unwrap());
        let l = loss_bce(&mut g, pv, &[y]).unwrap();
        let v = g.value(l).item().unwrap();
        assert!((v - want).abs() < tol, "bce({y}, {p}) = {v}");
        assert!(v >= 0.0);
    }
    let pv = g.constant(Tensor::vector(vec![0.5]).unwrap());
    assert!(matches!(loss_bce(&mut g, pv, &[0.5]), Err(DistillError::BadTarget(_))));
    assert!(matches!(loss_bce(&mut g, pv, &[2.0]), Err(DistillError::BadTarget(_))));
}

#[test]
fn bce_clamps_boundaries() {
    let mut g = Graph::new();
    let pv = g.constant(Tensor::vector(vec![0.0, 1.0]).unwrap());
    let l = loss_bce(&mut g, pv, &[1.0, 0.0]).unwrap();
    let v = g.value(l).item().unwrap();
    let hi: f64 = 1.0 - 1e-12;
    let want = (-(1e-12f64).ln() - (1.0 - hi).ln()) / 2.0;
    assert!((v - want).abs() < 1e-9, "{v} vs {want}");
}

fn log_probs_const(g: &mut Graph, rows: &[Vec<f64>]) -> Var {
    let v = rows[0].len();
    let flat = rows.iter().flatten().copied().collect();
    let logits = g.constant(Tensor::matrix(rows.len(), v, flat).unwrap());
    g.log_softmax(logits).unwrap()
}

#[test]
fn ce_examples() {
    let mut g = Graph::new();
    let sure = log_probs_const(&mut g, &[vec![0.0, -800.0, -800.0], vec![-800.0, -800.0, 0.0]]);
    let l = loss_ce(&mut g, sure, &[0, 2], &[true, true]).unwrap();
    assert!(g.value(l).item().unwrap().abs() < 1e-12);

    let uniform = log_probs_const(&mut g, &[vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]]);
    let l = loss_ce(&mut g, uniform, &[3, 1, 0], &[true, true, true]).unwrap();
    assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    assert!((4f64.ln() - 1.386294).abs() < 1e-6);

    assert!(loss_ce(&mut g, uniform, &[0, 1], &[true, true]).is_err());
    assert!(loss_ce(&mut g, uniform, &[0, 1, 2], &[false, false, false]).is_err());
}

#[test]
fn ce_matches_direct_sum() {
    let mut rng = rng_stream(1, "ce");
    let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect()).collect();
    let targets = [4, 0, 2];
    let mask = [true, false, true];
    let mut g = Graph::new();
    let lp = log_probs_const(&mut g, &rows);
    let l = loss_ce(&mut g, lp, &targets, &mask).unwrap();
    let mut want = 0.0;
    for i in [0, 2] {
        let z: f64 = rows[i].iter().map(|x| x.exp()).sum();
        let q = rows[i][targets[i]].exp() / z;
        want -= q.ln();
    }
    want /= 2.0;
    assert!((g.value(l).item().unwrap() - want).abs() < 1e-12);
}

#[test]
fn shifted_targets_align_with_teacher_forcing() {
    let s = seq(vec![BOS, 7, 8, PAD, PAD, EOS], 2);
    let (t, m) = shifted_targets(&[s.clone(), s]);
    assert_eq!(t, vec![7, 8, PAD, PAD, EOS, 7, 8, PAD, PAD, EOS]);
    assert_eq!(m, vec![true, true, true, false, true, true, true, true, false, true]);
}

#[test]
fn embed_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1.0, 1.0]).unwrap());
    let b = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
    let l = loss_embed(&mut g, b, a).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 1.0);
    let l = loss_embed(&mut g, a, a).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);
    let c = g.constant(Tensor::vector(vec![0.0; 3]).unwrap());
    assert!(loss_embed(&mut g, a, c).is_err());

    let mut rng = rng_stream(1, "embed");
    let er: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
    let ec: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
    let want = er.iter().zip(&ec).map(|(r, c)| (c - r) * (c - r)).sum::<f64>() / 8.0;
    let (vr, vc) = (
        g.constant(Tensor::vector(er).unwrap()),
        g.constant(Tensor::vector(ec).unwrap()),
    );
    let l = loss_embed(&mut g, vr, vc).unwrap();
    assert!((g.value(l).item().unwrap() - want).abs() < 1e-12);
}

#[test]
fn bridge_examples() {
    let mut rng = rng_stream(1, "bridge");
    let (v, d) = (6, 3);
    let table_data: Vec<f64> = (0..v * d).map(|_| rng.gen::<f64>() - 0.5).collect();
    let mut g = Graph::new();
    let table = g.constant(Tensor::matrix(v, d, table_data.clone()).unwrap());
    let mut dist = vec![0.0; 2 * v];
    dist[4] = 1.0;
    dist[v + 1] = 0.5;
    dist[v + 3] = 0.5;
    let rand_row: Vec<f64> = {
        let raw: Vec<f64> = (0..v).map(|_| rng.gen::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|x| x / s).collect()
    };
    dist.extend_from_slice(&rand_row);
    let dv = g.constant(Tensor::matrix(3, v, dist).unwrap());
    let out = soft_embed_bridge(&mut g, dv, table).unwrap();
    let o = g.value(out);
    assert_eq!(o.shape(), &[3, d]);
    assert_eq!(o.row(0), &table_data[4 * d..5 * d]);
    for j in 0..d {
        let mean = 0.5 * (table_data[d + j] + table_data[3 * d + j]);
        assert!((o.row(1)[j] - mean).abs() < 1e-15);
        let direct: f64 = (0..v).map(|k| rand_row[k] * table_data[k * d + j]).sum();
        assert!((o.row(2)[j] - direct).abs() < 1e-9);
    }
}

#[test]
fn weights_default_and_validation() {
    let w = LossWeights::default();
    assert_eq!([w.alpha, w.beta, w.alpha1, w.beta1, w.alpha2, w.beta2], [0.5; 6]);
    assert!(w.validate().is_ok());
    assert!(LossWeights { beta1: -0.1, ..w }.validate().is_err());
    assert!(LossWeights { alpha: f64::NAN, ..w }.validate().is_err());
    assert_eq!(w.student_total(2.0, 1.0, None), 1.5);
    assert_eq!(w.student_total(2.0, 1.0, Some(1.0)), 0.5 * 1.5 + 0.5);
}

#[test]
fn phase_names_round_trip() {
    for p in TrainingPhase::ALL {
        assert_eq!(p.name().parse::<TrainingPhase>().unwrap(), p);
    }
    assert!("joint".parse::<TrainingPhase>().is_err());
    assert!(!TrainingPhase::PreFinetuneQuality.is_joint());
    assert!(TrainingPhase::JointCommentRefineAligned.is_aligned());
}

#[test]
fn refine_objective_combines_linearly() {
    let (s, t) = (tiny_model("s"), tiny_model("t"));
    let batch = tiny_batch(3, "lin");
    let mut g = Graph::new();
    let mut sb = s.bind(&mut g, true);
    let mut tb = t.bind(&mut g, false);
    let w = LossWeights::default();
    let obj = loss_student_refine(&mut g, &mut sb, &mut tb, &batch, &w, &TINY_LAYOUT).unwrap();
    let p = obj.parts(&g).unwrap();
    assert!((p.total - (0.5 * p.ce + 0.5 * p.teacher)).abs() < 1e-12);
    assert!(p.ce > 0.0 && p.teacher > 0.0);
    // The linear rule itself on fixed components.
    let (ce, lt) = (scalar(&mut g, 2.0), scalar(&mut g, 1.0));
    let a = g.scale(ce, w.alpha).unwrap();
    let b = g.scale(lt, w.beta).unwrap();
    let total = g.add(a, b).unwrap();
    assert_eq!(g.value(total).item().unwrap(), 1.5);
}

#[test]
fn refine_objective_rejects_trainable_teacher() {
    let (s, t) = (tiny_model("s"), tiny_model("t"));
    let batch = tiny_batch(2, "frozen");
    let mut g = Graph::new();
    let mut sb = s.bind(&mut g, true);
    let mut tb = t.bind(&mut g, true);
    let r = loss_student_refine(&mut g, &mut sb, &mut tb, &batch, &LossWeights::default(), &TINY_LAYOUT);
    assert!(matches!(r, Err(DistillError::TeacherNotFrozen(_))));
}

#[test]
fn refine_objective_rejects_wrong_layout() {
    let (s, t) = (tiny_model("s"), tiny_model("t"));
    let batch = tiny_batch(2, "layout");
    let mut g = Graph::new();
    let mut sb = s.bind(&mut g, true);
    let mut tb = t.bind(&mut g, false);
    let other = Layout {
        code_window: 5,
        review_window: 3,
    };
    assert!(loss_student_refine(&mut g, &mut sb, &mut tb, &batch, &LossWeights::default(), &other).is_err());
}

fn student_grads(
    build: impl Fn(&mut Graph, &mut crate::model::Bound, &mut crate::model::Bound) -> Var,
    s: &Seq2Seq,
    t: &Seq2Seq,
    teacher_trainable: bool,
) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let mut sb = s.bind(&mut g, true);
    let mut tb = t.bind(&mut g, teacher_trainable);
    let loss = build(&mut g, &mut sb, &mut tb);
    let grads = g.backward(loss).unwrap();
    let v = g.value(loss).item().unwrap();
    (v, sb.vars().iter().map(|&x| grads.get_or_zeros(x)).collect())
}

fn max_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

#[test]
fn refine_reduces_to_scaled_fine_tuning_when_beta_is_zero() {
    let (s, t) = (tiny_model("s"), tiny_model("t"));
    let batch = tiny_batch(3, "reduce");
    let w = LossWeights {
        alpha: 0.7,
        ..LossWeights::default().baseline()
    };
    let (jv, jg) = student_grads(
        |g, sb, tb| loss_student_refine(g, sb, tb, &batch, &w, &TINY_LAYOUT).unwrap().student_loss,
        &s,
        &t,
        false,
    );
    let (bv, bg) = student_grads(
        |g, sb, _| {
            let l = supervised_refine_loss(g, sb, &batch).unwrap();
            g.scale(l, 0.7).unwrap()
        },
        &s,
        &t,
        false,
    );
    assert_eq!(jv, bv);
    assert!(max_diff(&jg, &bg) < 1e-12);
}

#[test]
fn comment_reduces_to_scaled_fine_tuning_when_betas_are_zero() {
    let (s, t) = (tiny_model("s"), tiny_model("t"));
    let batch = tiny_batch(3, "reduce2");
    let w = LossWeights::default().baseline();
    for aligned in [false, true] {
        let scale = if aligned { w.alpha * w.alpha2 } else { w.alpha };
        let (jv, jg) = student_grads(
            |g, sb, tb| {
                loss_student_comment(g, sb, tb, &batch, &w, aligned, &TINY_LAYOUT)
                    .unwrap()
                    .student_loss
            },
            &s,
            &t,
            true,
        );
        let (bv, bg) = student_grads(
            |g, sb, _| {
                let l = supervised_comment_loss(g, sb, &batch).unwrap();
                g.scale(l, scale).unwrap()
            },
            &s,
            &t,
            true,
        );
        assert!((jv - bv).abs() < 1e-12);
        assert!(max_diff(&jg, &bg) < 1e-12, "aligned={aligned}");
    }
}

#[test]
fn aligned_objective_with_identical_embeddings_drops_the_alignment_term() {
    let (mut s, mut t) = (tiny_model("s"), tiny_model("t"));
    let shared: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
    for m in [&mut s, &mut t] {
        m.param_mut("enc.ln_f.g").unwrap().data_mut().fill(0.0);
        m.param_mut("enc.ln_f.b").unwrap().data_mut().copy_from_slice(&shared);
    }
    let batch = tiny_batch(3, "same");
    let w = LossWeights {
        alpha2: 0.3,
        beta2: 0.9,
        ..LossWeights::default()
    };
    let mut g = Graph::new();
    let mut sb = s.bind(&mut g, true);
    let mut tb = t.bind(&mut g, true);
    let obj = loss_student_comment(&mut g, &mut sb, &mut tb, &batch, &w, true, &TINY_LAYOUT).unwrap();
    let p = obj.parts(&g).unwrap();
    // Equal up to the rounding of pooling identical rows.
    assert!(p.embed.unwrap() < 1e-30);
    let l_s2 = w.alpha * p.ce + w.beta * p.teacher;
    assert!((p.total - w.alpha2 * l_s2).abs() < 1e-12);
}

fn check_objective(name: &str, s: &Seq2Seq, t: &Seq2Seq, teacher_inputs: bool, pick: impl Fn(&mut Graph, &mut crate::model::Bound, &mut crate::model::Bound) -> Result<Var, DistillError>) {
    let ns = s.params().len();
    let mut inputs = tensors(s);
    if teacher_inputs {
        inputs.extend(tensors(t));
    }
    let coords = sample_coords(&inputs, 3, name);
    let worst = finite_diff_check_many(
        |g, vars| {
            let mut sb = s.bind_vars(vars[..ns].to_vec())?;
            let mut tb = if teacher_inputs {
                t.bind_vars(vars[ns..].to_vec())?
            } else {
                t.bind(g, false)
            };
            pick(g, &mut sb, &mut tb).map_err(to_tensor_err)
        },
        &inputs,
        1e-5,
        Some(&coords),
    )
    .unwrap();
    assert!(worst < 1e-4, "{name}: {worst}");
}

#[test]
fn refine_objective_gradients_match_finite_differences() {
    let (s, t) = (tiny_model("s"), tiny_model("t"));
    let batch = tiny_batch(2, "fd1");
    let w = LossWeights::default();
    check_objective("refine", &s, &t, false, |g, sb, tb| {
        Ok(loss_student_refine(g, sb, tb, &batch, &w, &TINY_LAYOUT)?.student_loss)
    });
}

#[test]
fn comment_objective_gradients_match_finite_differences() {
    let (s, t) = (tiny_model("s"), tiny_model("t"));
    let batch = tiny_batch(2, "fd2");
    let w = LossWeights::default();
    check_objective("comment", &s, &t, true, |g, sb, tb| {
        Ok(loss_student_comment(g, sb, tb, &batch, &w, false, &TINY_LAYOUT)?.student_loss)
    });
}

#[test]
fn aligned_objective_gradients_match_finite_differences() {
    let (s, t) = (tiny_model("s"), tiny_model("t"));
    let batch = tiny_batch(2, "fd3");
    let w = LossWeights {
        beta1: 0.8,
        beta2: 0.6,
        ..LossWeights::default()
    };
    check_objective("aligned student", &s, &t, true, |g, sb, tb| {
        Ok(loss_student_comment(g, sb, tb, &batch, &w, true, &TINY_LAYOUT)?.student_loss)
    });
    check_objective("aligned teacher", &s, &t, true, |g, sb, tb| {
        Ok(loss_student_comment(g, sb, tb, &batch, &w, true, &TINY_LAYOUT)?
            .teacher_loss
            .unwrap())
    });
}

#[test]
fn freeze_snapshot_detects_a_single_bit_change() {
    let mut m = tiny_model("snap");
    let mask = FreezeMask::all_of("teacher", &m);
    assert!(mask.covers("teacher", &m));
    assert!(!mask.covers("student", &m));
    let snap = FreezeSnapshot::take("teacher", &m, &mask);
    snap.verify(&m, 0).unwrap();
    let x = &mut m.param_mut("dec.0.ff.b2").unwrap().data_mut()[1];
    *x = f64::from_bits(x.to_bits() ^ 1);
    match snap.verify(&m, 4) {
        Err(DistillError::FreezeViolation { name, step }) => {
            assert_eq!(name, "teacher.dec.0.ff.b2");
            assert_eq!(step, 4);
        }
        other => panic!("{other:?}"),
    }
}

struct Fixture {
    codec: TaskCodec,
    data: Vec<EncodedRefinement>,
    cfg: ModelConfig,
}

fn fixture(n: usize) -> Fixture {
    let corpus = synth_generate(n, 2).unwrap();
    let texts: Vec<&str> = corpus
        .refinement
        .iter()
        .flat_map(|t| [t.code.as_str(), t.review.as_str(), t.refined_code.as_str()])
        .collect();
    let vocab = train_bpe(&texts, 200).unwrap();
    let codec = TaskCodec::new(vocab, Layout::default());
    let data = codec.encode_refinements(&corpus.refinement).unwrap();
    let cfg = ModelConfig {
        vocab_size: codec.vocab.len(),
        max_len: codec.layout.max_len(),
        ..tiny_cfg()
    };
    Fixture { codec, data, cfg }
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        eval_every: 0,
        ..TrainConfig::default()
    }
}

fn init(cfg: &ModelConfig, name: &str) -> Seq2Seq {
    Seq2Seq::new(cfg.clone(), &mut rng_stream(0, name)).unwrap()
}

#[test]
fn joint_refine_quality_keeps_teacher_bit_identical() {
    let f = fixture(8);
    let mut s = init(&f.cfg, "s");
    let mut t = init(&f.cfg, "t");
    let before = t.to_bytes();
    let s_before = s.clone();
    let freeze = FreezeMask::all_of("teacher", &t);
    let log = joint_train(
        TrainingPhase::JointRefineQuality,
        &mut s,
        &mut t,
        &f.data,
        &f.data[..2],
        &LossWeights::default(),
        &freeze,
        &quick_cfg(5),
        &f.codec,
    )
    .unwrap();
    assert_eq!(log.steps.len(), 10);
    assert_eq!(t.to_bytes(), before);
    assert_ne!(s, s_before);
    assert!(log.epochs.last().unwrap().val_bleu4.is_some());
}

#[test]
fn joint_refine_quality_requires_a_frozen_teacher() {
    let f = fixture(4);
    let mut s = init(&f.cfg, "s");
    let mut t = init(&f.cfg, "t");
    let r = joint_train(
        TrainingPhase::JointRefineQuality,
        &mut s,
        &mut t,
        &f.data,
        &[],
        &LossWeights::default(),
        &FreezeMask::none(),
        &quick_cfg(1),
        &f.codec,
    );
    assert!(matches!(r, Err(DistillError::TeacherNotFrozen(_))));
}

#[test]
fn zero_weights_leave_parameters_unchanged() {
    let f = fixture(8);
    let zero = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        alpha1: 0.0,
        beta1: 0.0,
        alpha2: 0.0,
        beta2: 0.0,
    };
    for phase in [TrainingPhase::JointCommentRefine, TrainingPhase::JointCommentRefineAligned] {
        let mut s = init(&f.cfg, "s");
        let mut t = init(&f.cfg, "t");
        let (s0, t0) = (s.to_bytes(), t.to_bytes());
        joint_train(phase, &mut s, &mut t, &f.data, &[], &zero, &FreezeMask::none(), &quick_cfg(3), &f.codec).unwrap();
        assert_eq!(s.to_bytes(), s0);
        assert_eq!(t.to_bytes(), t0);
    }
}

#[test]
fn logged_totals_equal_weighted_components() {
    let f = fixture(8);
    let w = LossWeights {
        alpha: 0.4,
        beta: 0.7,
        alpha1: 0.2,
        beta1: 0.3,
        alpha2: 0.9,
        beta2: 0.6,
    };
    for phase in [TrainingPhase::JointCommentRefine, TrainingPhase::JointCommentRefineAligned] {
        let mut s = init(&f.cfg, "s");
        let mut t = init(&f.cfg, "t");
        let log = joint_train(phase, &mut s, &mut t, &f.data, &[], &w, &FreezeMask::none(), &quick_cfg(2), &f.codec).unwrap();
        for st in &log.steps {
            let p = st.parts;
            assert_eq!(p.embed.is_some(), phase.is_aligned());
            assert!((p.total - w.student_total(p.ce, p.teacher, p.embed)).abs() < 1e-9);
        }
        for e in &log.epochs {
            assert!((e.total - w.student_total(e.ce.unwrap(), e.teacher.unwrap(), e.embed)).abs() < 1e-9);
        }
        let tsv = log.to_tsv();
        assert!(tsv.starts_with(TrainLog::HEADER));
        let row: Vec<&str> = tsv.lines().nth(1).unwrap().split('\t').collect();
        assert_eq!(row.len(), 10);
        assert_eq!(row[1], phase.name());
        assert_eq!(row[5] == "-", !phase.is_aligned());
    }
}

#[test]
fn joint_training_is_deterministic() {
    let f = fixture(8);
    let run = || {
        let mut s = init(&f.cfg, "s");
        let mut t = init(&f.cfg, "t");
        let cfg = TrainConfig {
            seed: 9,
            eval_every: 1,
            ..quick_cfg(2)
        };
        let log = joint_train(
            TrainingPhase::JointCommentRefineAligned,
            &mut s,
            &mut t,
            &f.data,
            &f.data[..3],
            &LossWeights::default(),
            &FreezeMask::none(),
            &cfg,
            &f.codec,
        )
        .unwrap();
        (log.to_tsv(), s.to_bytes(), t.to_bytes())
    };
    assert_eq!(run(), run());
}

#[test]
fn partially_frozen_student_keeps_those_parameters() {
    let f = fixture(8);
    let mut s = init(&f.cfg, "s");
    let mut t = init(&f.cfg, "t");
    let emb = s.param("tok_emb").unwrap().clone();
    let freeze = FreezeMask {
        frozen_names: ["student.tok_emb".to_string()].into_iter().collect(),
    };
    joint_train(
        TrainingPhase::JointCommentRefine,
        &mut s,
        &mut t,
        &f.data,
        &[],
        &LossWeights::default(),
        &freeze,
        &quick_cfg(2),
        &f.codec,
    )
    .unwrap();
    assert_eq!(s.param("tok_emb").unwrap(), &emb);
    assert_ne!(s.param("enc.0.attn.wq").unwrap(), init(&f.cfg, "s").param("enc.0.attn.wq").unwrap());
}

#[test]
fn pre_finetune_with_zero_epochs_keeps_initialization() {
    let f = fixture(4);
    let mut m = init(&f.cfg, "m");
    let before = m.to_bytes();
    let log = pre_finetune(
        TrainingPhase::PreFinetuneRefine,
        &mut m,
        PreFinetuneData::Refine {
            train: &f.data,
            val: &[],
        },
        &quick_cfg(0),
        &f.codec,
    )
    .unwrap();
    assert!(log.epochs.is_empty());
    assert_eq!(m.to_bytes(), before);
}

#[test]
fn pre_finetune_rejects_bad_inputs() {
    let f = fixture(4);
    let mut m = init(&f.cfg, "m");
    let refine = PreFinetuneData::Refine {
        train: &f.data,
        val: &[],
    };
    assert!(matches!(
        pre_finetune(TrainingPhase::PreFinetuneQuality, &mut m, refine, &quick_cfg(1), &f.codec),
        Err(DistillError::WrongPhase(_))
    ));
    assert!(matches!(
        pre_finetune(
            TrainingPhase::PreFinetuneRefine,
            &mut m,
            PreFinetuneData::Refine { train: &[], val: &[] },
            &quick_cfg(1),
            &f.codec
        ),
        Err(DistillError::EmptyDataset(_))
    ));
    let mut wrong = init(&ModelConfig { vocab_size: 40, ..f.cfg.clone() }, "w");
    assert!(matches!(
        pre_finetune(TrainingPhase::PreFinetuneRefine, &mut wrong, refine, &quick_cfg(1), &f.codec),
        Err(DistillError::Incompatible(_))
    ));
}

#[test]
fn pre_finetune_quality_logs_accuracy() {
    let corpus = synth_generate(8, 4).unwrap();
    let f = fixture(8);
    let q = f.codec.encode_qualities(&corpus.quality);
    // The fixture vocabulary may miss characters of another seed; unknown
    // characters are skipped, so encoding still succeeds.
    let q = q.unwrap();
    let mut m = init(&f.cfg, "q");
    let log = pre_finetune(
        TrainingPhase::PreFinetuneQuality,
        &mut m,
        PreFinetuneData::Quality { train: &q, val: &q[..2] },
        &quick_cfg(2),
        &f.codec,
    )
    .unwrap();
    let last = log.epochs.last().unwrap();
    assert!(last.train_acc.is_some() && last.val_acc.is_some());
    assert!(last.val_bleu4.is_none());
    assert_eq!(log.steps.len(), 4);
}
