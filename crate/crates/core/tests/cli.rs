use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use discorev::data::{load_jsonl, rng_stream, QualityTriplet, RefinementTriplet};
use discorev::metrics::parse_toy;
use discorev::model::{ModelConfig, Seq2Seq};
use discorev::tokenizer::Vocabulary;

const BIN: &str = env!("CARGO_BIN_EXE_discorev");

fn desk_conf() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf")
}

/// A tiny model so that command plumbing tests stay fast.
const TINY: &[&str] = &[
    "n_layers=1",
    "n_heads=2",
    "d_model=8",
    "d_ff=16",
    "max_len=51",
    "epochs=2",
    "eval_every=0",
    "lr=0.001",
    "batch_size=8",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .env_remove("DISCOREV_LOG")
        .args(args)
        .output()
        .expect("spawn discorev")
}

fn run_with(dir: &Path, cmd: &str, extra: &[&str], sets: &[&str]) -> Output {
    let mut args: Vec<String> = vec![cmd.to_string()];
    args.extend(extra.iter().map(|s| s.to_string()));
    for s in sets {
        args.push("--set".into());
        args.push(s.to_string());
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run(dir, &refs)
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn fails(out: &Output, code: i32) -> String {
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(out.status.code(), Some(code), "stderr: {err}");
    let last = err.lines().last().unwrap_or("");
    assert!(last.starts_with("error: "), "{err}");
    err
}

/// Writes synthetic data and a vocabulary into a fresh directory.
fn prepared(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let n = format!("synth_n={n}");
    ok(&run_with(dir.path(), "synth-data", &["--out", "data"], &[&n]));
    ok(&run_with(dir.path(), "train-tokenizer", &[], &[]));
    dir
}

fn tiny_sets<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = TINY.to_vec();
    v.extend_from_slice(extra);
    v
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn synth_data_writes_counted_validated_files() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run_with(dir.path(), "synth-data", &["--out", "a", "--seed", "3"], &["synth_n=100"]));
    let refinement: Vec<RefinementTriplet> = load_jsonl(&dir.path().join("a/refinement.jsonl")).unwrap();
    let quality: Vec<QualityTriplet> = load_jsonl(&dir.path().join("a/quality.jsonl")).unwrap();
    assert_eq!((refinement.len(), quality.len()), (100, 100));
    let manifest: serde_json::Value = serde_json::from_slice(&read(dir.path().join("a/manifest.json"))).unwrap();
    assert_eq!(manifest["refinement"], 100);
    assert_eq!(manifest["quality"], 100);
    assert_eq!(manifest["seed"], 3);

    ok(&run_with(dir.path(), "synth-data", &["--out", "b", "--seed", "3"], &["synth_n=100"]));
    for f in ["refinement.jsonl", "quality.jsonl", "manifest.json"] {
        assert_eq!(read(dir.path().join("a").join(f)), read(dir.path().join("b").join(f)), "{f}");
    }

    let err = fails(&run_with(dir.path(), "synth-data", &["--out", "a"], &["synth_n=5"]), 1);
    assert!(err.contains("--force"), "{err}");
    ok(&run_with(dir.path(), "synth-data", &["--out", "a", "--force"], &["synth_n=5"]));
    let refinement: Vec<RefinementTriplet> = load_jsonl(&dir.path().join("a/refinement.jsonl")).unwrap();
    assert_eq!(refinement.len(), 5);
    fails(&run_with(dir.path(), "synth-data", &["--out", "c"], &["synth_n=0"]), 2);
}

#[test]
fn train_tokenizer_is_deterministic_and_validates_size() {
    let dir = prepared(40);
    let first = read(dir.path().join("runs/vocab.txt"));
    assert!(first.starts_with(b"DSCRV-VOCAB 1\n"));
    let out = ok(&run_with(dir.path(), "train-tokenizer", &[], &[]));
    assert!(out.contains("tokens") && out.contains("merges"), "{out}");
    assert_eq!(read(dir.path().join("runs/vocab.txt")), first);
    let v = Vocabulary::from_text(std::str::from_utf8(&first).unwrap()).unwrap();
    assert!(out.contains(&format!("{} tokens", v.len())));

    fails(&run_with(dir.path(), "train-tokenizer", &["--out", "small"], &["vocab_size=4"]), 1);
    let err = fails(&run_with(dir.path(), "train-tokenizer", &[], &["data_dir=missing"]), 2);
    assert!(err.contains("missing/refinement.jsonl"), "{err}");
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    fails(&run(dir.path(), &["warp"]), 1);
    fails(&run(dir.path(), &["pre-finetune", "--phase", "warmup"]), 1);
    let err = fails(&run(dir.path(), &["pre-finetune", "--set", "colour=blue"]), 1);
    assert!(err.contains("unknown configuration key `colour`"), "{err}");
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "epochs = 3\nwidth = 9\n").unwrap();
    let err = fails(&run(dir.path(), &["evaluate", "--config", conf.to_str().unwrap()]), 1);
    assert!(err.contains("bad.conf:2"), "{err}");
    assert!(run(dir.path(), &["--help"]).status.success());
}

#[test]
fn pre_finetune_checks_phase_and_paths() {
    let dir = prepared(24);
    let sets = tiny_sets(&[]);
    fails(&run_with(dir.path(), "pre-finetune", &[], &sets), 1);
    fails(&run_with(dir.path(), "pre-finetune", &["--phase", "joint-comment-refine"], &sets), 1);
    let sets = tiny_sets(&["data_dir=elsewhere"]);
    let err = fails(&run_with(dir.path(), "pre-finetune", &["--phase", "pre-finetune-quality"], &sets), 2);
    assert!(err.contains("elsewhere/quality.jsonl"), "{err}");
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = prepared(24);
    let sets = tiny_sets(&["epochs=0"]);
    ok(&run_with(dir.path(), "pre-finetune", &["--phase", "pre-finetune-refine", "--seed", "5"], &sets));
    let vocab = Vocabulary::from_text(&String::from_utf8(read(dir.path().join("runs/vocab.txt"))).unwrap()).unwrap();
    let mc = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: vocab.len(),
        max_len: 51,
        dropout: 0.0,
    };
    let init = Seq2Seq::new(mc, &mut rng_stream(5, "init/teacher")).unwrap();
    assert_eq!(read(dir.path().join("runs/pretrained_refine.ckpt")), init.to_bytes());
}

#[test]
fn joint_refine_quality_leaves_the_teacher_checkpoint_unchanged() {
    let dir = prepared(24);
    let sets = tiny_sets(&[]);
    ok(&run_with(dir.path(), "pre-finetune", &["--phase", "pre-finetune-quality"], &sets));
    let before = read(dir.path().join("runs/pretrained_quality.ckpt"));
    let out = ok(&run_with(dir.path(), "train-joint", &["--phase", "joint-refine-quality"], &sets));
    assert!(out.contains("joint-refine-quality"), "{out}");
    assert_eq!(read(dir.path().join("runs/joint-refine-quality.teacher.ckpt")), before);
    assert_eq!(read(dir.path().join("runs/pretrained_quality.ckpt")), before);
    let report = ok(&run_with(dir.path(), "evaluate", &["--phase", "joint-refine-quality"], &sets));
    for key in ["refine_bleu4\t", "refine_codebleu\t", "quality_accuracy\t"] {
        assert!(report.contains(key), "{report}");
    }
}

#[test]
fn train_joint_needs_a_teacher_unless_fresh() {
    let dir = prepared(24);
    let sets = tiny_sets(&[]);
    let err = fails(&run_with(dir.path(), "train-joint", &["--phase", "joint-comment-refine"], &sets), 2);
    assert!(err.contains("pretrained_refine.ckpt"), "{err}");
    fails(&run_with(dir.path(), "train-joint", &["--phase", "pre-finetune-refine"], &sets), 1);
    fails(&run_with(dir.path(), "train-joint", &["--phase", "joint-refine-quality", "--aligned"], &sets), 1);
    ok(&run_with(
        dir.path(),
        "train-joint",
        &["--phase", "joint-comment-refine", "--fresh-teacher"],
        &sets,
    ));
    assert!(dir.path().join("runs/joint-comment-refine.teacher.ckpt").exists());
}

#[test]
fn aligned_runs_log_the_embedding_loss() {
    let dir = prepared(24);
    let sets = tiny_sets(&["eval_every=1"]);
    ok(&run_with(dir.path(), "pre-finetune", &["--phase", "pre-finetune-refine"], &sets));
    for (flags, aligned) in [(&["--phase", "joint-comment-refine"][..], false), (&["--phase", "joint-comment-refine", "--aligned"][..], true)] {
        ok(&run_with(dir.path(), "train-joint", flags, &sets));
        let name = if aligned { "joint-comment-refine-aligned" } else { "joint-comment-refine" };
        let log = String::from_utf8(read(dir.path().join(format!("runs/{name}.log.tsv")))).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 3, "{log}");
        assert_eq!(lines[0].split('\t').nth(5), Some("L_embed"));
        for row in &lines[1..] {
            let cols: Vec<&str> = row.split('\t').collect();
            assert_eq!(cols.len(), 10);
            assert_eq!(cols[1], name);
            assert_eq!(cols[5] != "-", aligned, "{row}");
            assert!(cols[2..5].iter().all(|c| c.parse::<f64>().is_ok()), "{row}");
            assert!(cols[6].parse::<f64>().is_ok(), "{row}");
        }
    }
}

#[test]
fn numeric_failures_exit_three() {
    let dir = prepared(24);
    let sets = tiny_sets(&["lr=1e300", "epochs=1"]);
    let err = fails(&run_with(dir.path(), "pre-finetune", &["--phase", "pre-finetune-refine"], &sets), 3);
    assert!(err.contains("error: numeric:"), "{err}");
}

#[test]
fn evaluate_rejects_empty_splits_and_mismatched_shapes() {
    let dir = prepared(24);
    let sets = tiny_sets(&[]);
    ok(&run_with(dir.path(), "pre-finetune", &["--phase", "pre-finetune-quality"], &sets));
    let report = ok(&run_with(dir.path(), "evaluate", &["--phase", "pre-finetune-quality"], &sets));
    assert!(report.starts_with("# phase\tpre-finetune-quality\n# split\ttest\t"), "{report}");
    assert_eq!(
        read(dir.path().join("runs/pre-finetune-quality.test.report.tsv")),
        report.as_bytes()
    );
    let again = ok(&run_with(dir.path(), "evaluate", &["--phase", "pre-finetune-quality"], &sets));
    assert_eq!(again, report);

    let sets = tiny_sets(&["train_frac=1", "val_frac=0", "test_frac=0"]);
    let err = fails(&run_with(dir.path(), "evaluate", &["--phase", "pre-finetune-quality"], &sets), 2);
    assert!(err.contains("test split is empty"), "{err}");

    let sets = tiny_sets(&["d_model=12"]);
    let err = fails(&run_with(dir.path(), "evaluate", &["--phase", "pre-finetune-quality"], &sets), 1);
    assert!(err.contains("d_model=8") && err.contains("d_model=12"), "{err}");
    fails(&run_with(dir.path(), "evaluate", &[], TINY), 1);
}

#[test]
fn score_command_reads_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("pairs.jsonl");
    std::fs::write(&f, "{\"candidate\":\"a b c d\",\"reference\":\"a b c d e\"}\n").unwrap();
    let out = ok(&run(dir.path(), &["score", "--input", f.to_str().unwrap()]));
    assert!(out.contains("0\t0.800000\t"), "{out}");
    fails(&run(dir.path(), &["score", "--input", "absent.jsonl"]), 2);
    std::fs::write(&f, "{\"candidate\":1}\n").unwrap();
    fails(&run(dir.path(), &["score", "--input", f.to_str().unwrap()]), 2);
}

/// One overfitted desk run, shared by the tests that inspect its outputs.
fn overfit() -> &'static (tempfile::TempDir, Vec<RefinementTriplet>) {
    static RUN: OnceLock<(tempfile::TempDir, Vec<RefinementTriplet>)> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let conf = desk_conf();
        let c = conf.to_str().unwrap();
        ok(&run_with(dir.path(), "synth-data", &["--config", c, "--out", "data"], &["synth_n=32"]));
        ok(&run_with(dir.path(), "train-tokenizer", &["--config", c], &[]));
        ok(&run_with(
            dir.path(),
            "pre-finetune",
            &["--config", c, "--phase", "pre-finetune-refine"],
            &["epochs=80", "eval_every=0"],
        ));
        ok(&run_with(
            dir.path(),
            "train-joint",
            &["--config", c, "--phase", "joint-comment-refine"],
            &["epochs=80", "eval_every=0"],
        ));
        let data = load_jsonl(&dir.path().join("data/refinement.jsonl")).unwrap();
        (dir, data)
    })
}

#[test]
fn overfitted_checkpoints_score_high_on_their_training_set() {
    let (dir, _) = overfit();
    let c = desk_conf();
    let report = ok(&run_with(
        dir.path(),
        "evaluate",
        &["--config", c.to_str().unwrap(), "--phase", "joint-comment-refine"],
        &[],
    ));
    let bleu: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("comment_bleu4\t"))
        .unwrap()
        .parse()
        .unwrap();
    assert!(bleu >= 0.9, "{report}");
}

#[test]
fn generate_reproduces_training_reviews_and_parseable_fixes() {
    let (dir, data) = overfit();
    let conf = desk_conf();
    let c = conf.to_str().unwrap();
    let mut parsed = 0;
    for (i, t) in data.iter().enumerate() {
        let out = ok(&run(dir.path(), &["generate", "--config", c, "--refine", "--input", &t.code]));
        let (review, refined) = out.split_once('\n').unwrap();
        if i == 0 {
            assert_eq!(review, t.review);
        }
        if parse_toy(refined.trim_end()).is_ok() {
            parsed += 1;
        }
    }
    assert!(parsed * 5 >= data.len() * 4, "{parsed} of {}", data.len());

    let out = ok(&run(dir.path(), &["generate", "--config", c, "--input", ""]));
    assert_eq!(out.lines().count(), 1, "{out}");
    let long = format!("{}\nreturn x", vec!["x = x + 2"; 30].join("\n"));
    let out = run(dir.path(), &["generate", "--config", c, "--input", &long]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated"));
    fails(&run(dir.path(), &["generate", "--config", c, "--phase", "joint-refine-quality", "--input", "x"]), 1);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = prepared(24);
    let sets = tiny_sets(&["eval_every=1"]);
    let mut artifacts = Vec::new();
    for out in ["r1", "r2"] {
        let o = ["--out", out];
        ok(&run(dir.path(), &["train-tokenizer", "--out", out]));
        let with = |cmd: &str, extra: &[&str]| {
            let mut e = o.to_vec();
            e.extend_from_slice(extra);
            ok(&run_with(dir.path(), cmd, &e, &sets))
        };
        let stdout = [
            with("pre-finetune", &["--phase", "pre-finetune-refine"]),
            with("train-joint", &["--phase", "joint-comment-refine", "--aligned"]),
            with("evaluate", &["--phase", "joint-comment-refine", "--aligned"]),
        ];
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path().join(out))
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), read(e.path()))
            })
            .collect();
        files.sort();
        artifacts.push((stdout.map(|s| s.replace(out, "_")), files));
    }
    assert_eq!(artifacts[0].1.len(), 9);
    assert_eq!(artifacts[0], artifacts[1]);
}
