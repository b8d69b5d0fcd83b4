//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use crate::autodiff::AdamConfig;
use crate::data::SplitSpec;
use crate::distillation::{FreezeMask, Layout, LossWeights, TrainConfig, TrainingPhase};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `vocab_size` is the tokenizer's training target; models take the
    /// size of the vocabulary actually learned.
    pub model: ModelConfig,
    pub layout: Layout,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub split: SplitSpec,
    pub phase: Option<TrainingPhase>,
    pub aligned: bool,
    pub fresh_teacher: bool,
    /// Extra qualified parameter names to freeze, comma-separated in files.
    pub freeze: Vec<String>,
    pub synth_n: usize,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub eval_split: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            layout: Layout::default(),
            lr: 1e-5,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            eval_every: 1,
            clip_norm: 1.0,
            weights: LossWeights::default(),
            split: SplitSpec::default(),
            phase: None,
            aligned: false,
            fresh_teacher: false,
            freeze: Vec::new(),
            synth_n: 1000,
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs"),
            eval_split: "test".into(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("invalid value `{v}` for `{key}`"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("invalid value `{v}` for `{key}` (expected true or false)")),
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "n_layers",
        "n_heads",
        "d_model",
        "d_ff",
        "vocab_size",
        "max_len",
        "dropout",
        "code_window",
        "review_window",
        "lr",
        "batch_size",
        "epochs",
        "seed",
        "eval_every",
        "clip_norm",
        "alpha",
        "beta",
        "alpha1",
        "beta1",
        "alpha2",
        "beta2",
        "train_frac",
        "val_frac",
        "test_frac",
        "phase",
        "aligned",
        "fresh_teacher",
        "freeze",
        "synth_n",
        "data_dir",
        "run_dir",
        "eval_split",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let m = &mut self.model;
        let w = &mut self.weights;
        match key {
            "n_layers" => m.n_layers = parse(key, v)?,
            "n_heads" => m.n_heads = parse(key, v)?,
            "d_model" => m.d_model = parse(key, v)?,
            "d_ff" => m.d_ff = parse(key, v)?,
            "vocab_size" => m.vocab_size = parse(key, v)?,
            "max_len" => m.max_len = parse(key, v)?,
            "dropout" => m.dropout = parse(key, v)?,
            "code_window" => self.layout.code_window = parse(key, v)?,
            "review_window" => self.layout.review_window = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "alpha" => w.alpha = parse(key, v)?,
            "beta" => w.beta = parse(key, v)?,
            "alpha1" => w.alpha1 = parse(key, v)?,
            "beta1" => w.beta1 = parse(key, v)?,
            "alpha2" => w.alpha2 = parse(key, v)?,
            "beta2" => w.beta2 = parse(key, v)?,
            "train_frac" => self.split.train_frac = parse(key, v)?,
            "val_frac" => self.split.val_frac = parse(key, v)?,
            "test_frac" => self.split.test_frac = parse(key, v)?,
            "phase" => self.phase = if v.is_empty() { None } else { Some(v.parse()?) },
            "aligned" => self.aligned = parse_bool(key, v)?,
            "fresh_teacher" => self.fresh_teacher = parse_bool(key, v)?,
            "freeze" => {
                self.freeze = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "synth_n" => self.synth_n = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "run_dir" => self.run_dir = PathBuf::from(v),
            "eval_split" => match v {
                "train" | "val" | "test" => self.eval_split = v.to_string(),
                _ => return Err(format!("invalid value `{v}` for `eval_split` (expected train, val or test)")),
            },
            _ => return Err(format!("unknown configuration key `{key}`")),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), String> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{origin}:{}: expected `key = value`", i + 1))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| format!("{origin}:{}: {e}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), String> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("override `{kv}` is not of the form key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            clip_norm: self.clip_norm,
            seed: self.seed,
            eval_every: self.eval_every,
        }
    }

    pub fn freeze_mask(&self) -> FreezeMask {
        FreezeMask {
            frozen_names: self.freeze.iter().cloned().collect(),
        }
    }

    pub fn refinement_path(&self) -> PathBuf {
        self.data_dir.join("refinement.jsonl")
    }

    pub fn quality_path(&self) -> PathBuf {
        self.data_dir.join("quality.jsonl")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.run_dir.join("vocab.txt")
    }
}
