//! A small pre-LN encoder-decoder transformer with a pooled quality head.

mod checkpoint;

pub use checkpoint::CheckpointError;

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttentionSpec, Graph, Tensor, TensorError, Var};
use crate::tokenizer::{EncodedSequence, BOS, EOS, MSG, PAD};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 128,
            vocab_size: 512,
            max_len: 64,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |reason: String| TensorError::Invalid {
            op: "model_config",
            reason,
        };
        if self.n_layers == 0
            || self.n_heads == 0
            || self.d_model == 0
            || self.d_ff == 0
            || self.max_len == 0
        {
            return Err(bad("layer, head, width and length settings must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= MSG + 1 {
            return Err(bad(format!("vocab_size {} leaves no room past the specials", self.vocab_size)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(bad(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Total scalar parameters implied by the configuration.
    pub fn param_count(&self) -> usize {
        let (d, f, v, l) = (self.d_model, self.d_ff, self.vocab_size, self.max_len);
        let ln = 2 * d;
        let attn = 4 * (d * d + d);
        let ff = d * f + f + f * d + d;
        let enc_layer = 2 * ln + attn + ff;
        let dec_layer = 3 * ln + 2 * attn + ff;
        v * d + 2 * l * d + self.n_layers * (enc_layer + dec_layer) + 2 * ln + d * v + v + d + 1
    }
}

/// Named parameters of one model, in a fixed construction order.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    params: Vec<(String, Tensor)>,
}

fn layer_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, v, l) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_len);
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("tok_emb".into(), vec![v, d]),
        ("enc.pos".into(), vec![l, d]),
        ("dec.pos".into(), vec![l, d]),
    ];
    let ln = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        out.push((format!("{p}.g"), vec![d]));
        out.push((format!("{p}.b"), vec![d]));
    };
    let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        for m in ["q", "k", "v", "o"] {
            out.push((format!("{p}.w{m}"), vec![d, d]));
            out.push((format!("{p}.b{m}"), vec![d]));
        }
    };
    let ff = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        out.push((format!("{p}.w1"), vec![d, f]));
        out.push((format!("{p}.b1"), vec![f]));
        out.push((format!("{p}.w2"), vec![f, d]));
        out.push((format!("{p}.b2"), vec![d]));
    };
    for i in 0..cfg.n_layers {
        let p = format!("enc.{i}");
        ln(&mut out, &format!("{p}.ln1"));
        attn(&mut out, &format!("{p}.attn"));
        ln(&mut out, &format!("{p}.ln2"));
        ff(&mut out, &format!("{p}.ff"));
    }
    ln(&mut out, "enc.ln_f");
    for i in 0..cfg.n_layers {
        let p = format!("dec.{i}");
        ln(&mut out, &format!("{p}.ln1"));
        attn(&mut out, &format!("{p}.self"));
        ln(&mut out, &format!("{p}.ln2"));
        attn(&mut out, &format!("{p}.cross"));
        ln(&mut out, &format!("{p}.ln3"));
        ff(&mut out, &format!("{p}.ff"));
    }
    ln(&mut out, "dec.ln_f");
    out.push(("lm_head.w".into(), vec![d, v]));
    out.push(("lm_head.b".into(), vec![v]));
    out.push(("quality.w".into(), vec![d, 1]));
    out.push(("quality.b".into(), vec![1]));
    out
}

impl Seq2Seq {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, TensorError> {
        config.validate()?;
        let params = layer_shapes(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".g") {
                    Tensor::filled(&shape, 1.0)
                } else if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else if name == "tok_emb" || name.ends_with(".pos") {
                    Tensor::randn(&shape, 0.1, rng)
                } else {
                    Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), rng)
                };
                (name, t)
            })
            .collect();
        Ok(Self { config, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<(String, Tensor)>) -> Result<Self, TensorError> {
        config.validate()?;
        let want = layer_shapes(&config);
        if want.len() != params.len()
            || want
                .iter()
                .zip(&params)
                .any(|((n, s), (m, t))| n != m || s.as_slice() != t.shape())
        {
            return Err(TensorError::Invalid {
                op: "model_params",
                reason: "parameter names or shapes do not match the configuration".into(),
            });
        }
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Places every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let mut index = HashMap::new();
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, (name, t))| {
                index.insert(name.clone(), i);
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound {
            config: self.config.clone(),
            vars,
            index,
            dropout_rng: None,
        }
    }

    /// Wraps existing tape variables, one per parameter in construction
    /// order, as this model's parameters.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound, TensorError> {
        if vars.len() != self.params.len() {
            return Err(TensorError::Invalid {
                op: "bind_vars",
                reason: format!("{} variables for {} parameters", vars.len(), self.params.len()),
            });
        }
        let index = self.params.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Ok(Bound {
            config: self.config.clone(),
            vars,
            index,
            dropout_rng: None,
        })
    }

    /// Encodes `inputs` as constants and returns `(states, pooled)` values.
    pub fn encode_values(&self, inputs: &[EncodedSequence]) -> Result<(Tensor, Tensor), TensorError> {
        let mut g = Graph::new();
        let mut b = self.bind(&mut g, false);
        let enc = b.encode(&mut g, inputs)?;
        Ok((g.value(enc.states).clone(), g.value(enc.pooled).clone()))
    }

    /// Quality probabilities for pair-layout inputs.
    pub fn quality_probs(&self, inputs: &[EncodedSequence]) -> Result<Vec<f64>, TensorError> {
        let mut g = Graph::new();
        let mut b = self.bind(&mut g, false);
        let enc = b.encode(&mut g, inputs)?;
        let p = b.classify_quality(&mut g, &enc)?;
        Ok(g.value(p).data().to_vec())
    }

    /// Greedy decoding of `out_len`-long layouts. `<s>` and `<msg>` are never
    /// emitted; ties go to the lowest id. Decoding stops at `<pad>` or `</s>`.
    pub fn greedy_generate(
        &self,
        inputs: &[EncodedSequence],
        out_len: usize,
    ) -> Result<Vec<EncodedSequence>, TensorError> {
        if out_len < 3 || out_len > self.config.max_len + 1 {
            return Err(TensorError::Invalid {
                op: "greedy_generate",
                reason: format!("output length {out_len} outside 3..={}", self.config.max_len + 1),
            });
        }
        let n = inputs.len();
        let (states, _) = self.encode_values(inputs)?;
        let mask: Vec<bool> = inputs.iter().flat_map(|s| s.mask.iter().copied()).collect();
        let enc_len = inputs.first().map_or(0, |s| s.len());
        let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; n];
        let mut done = vec![false; n];
        let v = self.config.vocab_size;
        for step in 1..out_len - 1 {
            if done.iter().all(|&d| d) {
                break;
            }
            let mut g = Graph::new();
            let mut b = self.bind(&mut g, false);
            let enc = EncoderOutput {
                states: g.constant(states.clone()),
                pooled: g.constant(Tensor::zeros(&[n, self.config.d_model])),
                mask: mask.clone(),
                batch: n,
                len: enc_len,
            };
            let refs: Vec<&[usize]> = prefixes.iter().map(|p| p.as_slice()).collect();
            let logits = b.decode(&mut g, &enc, &refs)?;
            let lv = g.value(logits);
            for i in 0..n {
                if done[i] {
                    prefixes[i].push(PAD);
                    continue;
                }
                let row = lv.row(i * step + step - 1);
                let mut best: Option<usize> = None;
                for id in (0..v).filter(|&id| id != BOS && id != MSG) {
                    if best.is_none_or(|b| row[id] > row[b]) {
                        best = Some(id);
                    }
                }
                let best = best.unwrap_or(EOS);
                if best == PAD || best == EOS {
                    done[i] = true;
                    prefixes[i].push(PAD);
                } else {
                    prefixes[i].push(best);
                }
            }
        }
        Ok(prefixes
            .into_iter()
            .map(|p| {
                let mut ids: Vec<usize> = p.into_iter().take_while(|&t| t != PAD).collect();
                let content = ids.len() - 1;
                ids.resize(out_len - 1, PAD);
                ids.push(EOS);
                let mask = ids.iter().map(|&i| i != PAD).collect();
                EncodedSequence {
                    ids,
                    mask,
                    true_length: content,
                }
            })
            .collect())
    }
}

/// Encoder result for a batch laid out as `[batch * len, d_model]`.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub states: Var,
    /// Masked mean of `states` per sequence, `[batch, d_model]`.
    pub pooled: Var,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

/// One model's parameters placed on a tape.
pub struct Bound {
    pub config: ModelConfig,
    vars: Vec<Var>,
    index: HashMap<String, usize>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    /// Enables dropout with the given stream; without it the forward pass is
    /// deterministic.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    fn drop(&mut self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        match self.dropout_rng.as_mut() {
            Some(rng) if self.config.dropout > 0.0 => g.dropout(x, self.config.dropout, rng),
            _ => Ok(x),
        }
    }

    fn linear(&self, g: &mut Graph, x: Var, w: &str, b: &str) -> Result<Var, TensorError> {
        let y = g.matmul(x, self.get(w))?;
        g.add(y, self.get(b))
    }

    fn norm(&self, g: &mut Graph, x: Var, p: &str) -> Result<Var, TensorError> {
        let n = g.layer_norm(x, LN_EPS)?;
        let n = g.mul(n, self.get(&format!("{p}.g")))?;
        g.add(n, self.get(&format!("{p}.b")))
    }

    fn attend(
        &self,
        g: &mut Graph,
        p: &str,
        xq: Var,
        xkv: Var,
        spec: AttentionSpec,
    ) -> Result<Var, TensorError> {
        let q = self.linear(g, xq, &format!("{p}.wq"), &format!("{p}.bq"))?;
        let k = self.linear(g, xkv, &format!("{p}.wk"), &format!("{p}.bk"))?;
        let v = self.linear(g, xkv, &format!("{p}.wv"), &format!("{p}.bv"))?;
        let a = g.attention(q, k, v, spec)?;
        self.linear(g, a, &format!("{p}.wo"), &format!("{p}.bo"))
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, p: &str) -> Result<Var, TensorError> {
        let h = self.linear(g, x, &format!("{p}.w1"), &format!("{p}.b1"))?;
        let h = g.gelu(h)?;
        self.linear(g, h, &format!("{p}.w2"), &format!("{p}.b2"))
    }

    fn positions(&self, g: &mut Graph, table: &str, batch: usize, len: usize) -> Result<Var, TensorError> {
        if len > self.config.max_len {
            return Err(TensorError::IndexOutOfRange {
                op: "positions",
                index: len,
                bound: self.config.max_len,
            });
        }
        let ids: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        g.embedding(self.get(table), &ids)
    }

    /// Token embeddings for a batch of equal-length sequences.
    pub fn embed(&self, g: &mut Graph, ids: &[&[usize]]) -> Result<Var, TensorError> {
        let flat: Vec<usize> = ids.iter().flat_map(|s| s.iter().copied()).collect();
        g.embedding(self.get("tok_emb"), &flat)
    }

    pub fn encode(&mut self, g: &mut Graph, seqs: &[EncodedSequence]) -> Result<EncoderOutput, TensorError> {
        let len = check_rectangular(seqs.iter().map(|s| s.len()))?;
        let ids: Vec<&[usize]> = seqs.iter().map(|s| s.ids.as_slice()).collect();
        let x = self.embed(g, &ids)?;
        let mask = seqs.iter().flat_map(|s| s.mask.iter().copied()).collect();
        self.encode_embedded(g, x, mask, seqs.len(), len)
    }

    /// Runs the encoder from input vectors `[batch * len, d_model]`, such as
    /// expected embeddings under a predicted distribution.
    pub fn encode_embedded(
        &mut self,
        g: &mut Graph,
        x: Var,
        mask: Vec<bool>,
        batch: usize,
        len: usize,
    ) -> Result<EncoderOutput, TensorError> {
        if mask.len() != batch * len {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                lhs: g.value(x).shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let pos = self.positions(g, "enc.pos", batch, len)?;
        let mut h = g.add(x, pos)?;
        h = self.drop(g, h)?;
        let spec = AttentionSpec {
            heads: self.config.n_heads,
            batch,
            key_mask: mask.clone(),
            causal: false,
        };
        for i in 0..self.config.n_layers {
            let p = format!("enc.{i}");
            let n = self.norm(g, h, &format!("{p}.ln1"))?;
            let a = self.attend(g, &format!("{p}.attn"), n, n, spec.clone())?;
            let a = self.drop(g, a)?;
            h = g.add(h, a)?;
            let n = self.norm(g, h, &format!("{p}.ln2"))?;
            let f = self.feed_forward(g, n, &format!("{p}.ff"))?;
            let f = self.drop(g, f)?;
            h = g.add(h, f)?;
        }
        let states = self.norm(g, h, "enc.ln_f")?;
        let pooled = g.masked_mean(states, &mask, batch)?;
        Ok(EncoderOutput {
            states,
            pooled,
            mask,
            batch,
            len,
        })
    }

    /// Next-token logits `[batch * len, vocab]` for decoder inputs of equal
    /// length, attending causally to themselves and to `enc`.
    pub fn decode(&mut self, g: &mut Graph, enc: &EncoderOutput, inputs: &[&[usize]]) -> Result<Var, TensorError> {
        let len = check_rectangular(inputs.iter().map(|s| s.len()))?;
        if inputs.len() != enc.batch {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                lhs: vec![inputs.len()],
                rhs: vec![enc.batch],
            });
        }
        let batch = enc.batch;
        let x = self.embed(g, inputs)?;
        let pos = self.positions(g, "dec.pos", batch, len)?;
        let mut h = g.add(x, pos)?;
        h = self.drop(g, h)?;
        let self_spec = AttentionSpec {
            heads: self.config.n_heads,
            batch,
            key_mask: vec![true; batch * len],
            causal: true,
        };
        let cross_spec = AttentionSpec {
            heads: self.config.n_heads,
            batch,
            key_mask: enc.mask.clone(),
            causal: false,
        };
        for i in 0..self.config.n_layers {
            let p = format!("dec.{i}");
            let n = self.norm(g, h, &format!("{p}.ln1"))?;
            let a = self.attend(g, &format!("{p}.self"), n, n, self_spec.clone())?;
            let a = self.drop(g, a)?;
            h = g.add(h, a)?;
            let n = self.norm(g, h, &format!("{p}.ln2"))?;
            let a = self.attend(g, &format!("{p}.cross"), n, enc.states, cross_spec.clone())?;
            let a = self.drop(g, a)?;
            h = g.add(h, a)?;
            let n = self.norm(g, h, &format!("{p}.ln3"))?;
            let f = self.feed_forward(g, n, &format!("{p}.ff"))?;
            let f = self.drop(g, f)?;
            h = g.add(h, f)?;
        }
        let out = self.norm(g, h, "dec.ln_f")?;
        self.linear(g, out, "lm_head.w", "lm_head.b")
    }

    /// Log-probabilities `[batch * (len - 1), vocab]`: row `i` of a sequence
    /// scores `target[i + 1]` given `target[..=i]`.
    pub fn decode_teacher_forced(
        &mut self,
        g: &mut Graph,
        enc: &EncoderOutput,
        targets: &[EncodedSequence],
    ) -> Result<Var, TensorError> {
        let inputs: Vec<&[usize]> = targets.iter().map(|t| &t.ids[..t.ids.len() - 1]).collect();
        let logits = self.decode(g, enc, &inputs)?;
        g.log_softmax(logits)
    }

    /// `sigmoid(pooled · w + b)` per sequence, shape `[batch]`.
    pub fn classify_quality(&self, g: &mut Graph, enc: &EncoderOutput) -> Result<Var, TensorError> {
        let z = self.linear(g, enc.pooled, "quality.w", "quality.b")?;
        let z = g.reshape(z, &[enc.batch])?;
        g.sigmoid(z)
    }
}

fn check_rectangular(lens: impl Iterator<Item = usize>) -> Result<usize, TensorError> {
    let lens: Vec<usize> = lens.collect();
    match lens.first() {
        None => Err(TensorError::Invalid {
            op: "batch",
            reason: "empty batch".into(),
        }),
        Some(&l) if lens.iter().all(|&x| x == l) && l > 0 => Ok(l),
        Some(_) => Err(TensorError::Invalid {
            op: "batch",
            reason: format!("sequence lengths differ: {lens:?}"),
        }),
    }
}
