//! BLEU-4 and a CodeBLEU variant over the toy language.

mod bleu;
mod toy;

pub use bleu::{bleu4, brevity, corpus_bleu4, precisions, tokenize, weighted_bleu4, NGramCounts};
pub use toy::{
    parse_toy, BinOp, DataflowError, DefSite, DefUseEdge, Expr, ParseError, Stmt, ToyAst,
    UseSite, KEYWORDS,
};

use std::collections::HashMap;
use std::hash::Hash;
use std::io::BufRead;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("CodeBLEU weights must sum to 1, got {0}")]
    BadWeights(f64),
    #[error("line {line}: {reason}")]
    BadRecord { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Weights of the n-gram, weighted n-gram, AST and dataflow components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodeBleuWeights([f64; 4]);

impl CodeBleuWeights {
    pub fn new(w: [f64; 4]) -> Result<Self, MetricError> {
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-9 || w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(MetricError::BadWeights(s));
        }
        Ok(Self(w))
    }

    pub fn values(&self) -> [f64; 4] {
        self.0
    }
}

impl Default for CodeBleuWeights {
    fn default() -> Self {
        Self([0.25; 4])
    }
}

/// Per-component scores. The structural parts are `None` when either side
/// fails to parse.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodeBleuParts {
    pub ngram: f64,
    pub weighted_ngram: f64,
    pub ast: Option<f64>,
    pub dataflow: Option<f64>,
}

impl CodeBleuParts {
    pub fn combine(&self, w: &CodeBleuWeights) -> f64 {
        let [w1, w2, w3, w4] = w.0;
        match (self.ast, self.dataflow) {
            (Some(a), Some(d)) => w1 * self.ngram + w2 * self.weighted_ngram + w3 * a + w4 * d,
            _ => {
                let lexical = w1 + w2;
                if lexical == 0.0 {
                    return 0.0;
                }
                (w1 * self.ngram + w2 * self.weighted_ngram) / lexical
            }
        }
    }
}

fn keyword_weight(tok: &str) -> f64 {
    if KEYWORDS.contains(&tok) {
        4.0
    } else {
        1.0
    }
}

fn multiset<T: Eq + Hash>(items: Vec<T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for x in items {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}

fn multiset_recall<T: Eq + Hash>(cand: Vec<T>, reference: Vec<T>) -> f64 {
    if reference.is_empty() {
        return 1.0;
    }
    let total = reference.len();
    let c = multiset(cand);
    let hits: usize = multiset(reference)
        .iter()
        .map(|(k, &n)| n.min(c.get(k).copied().unwrap_or(0)))
        .sum();
    hits as f64 / total as f64
}

/// Fraction of reference subtrees (size ≥ 2, identifiers anonymized) found
/// in the candidate, counted as multisets.
pub fn ast_match(cand: &ToyAst, reference: &ToyAst) -> f64 {
    multiset_recall(cand.subtrees(), reference.subtrees())
}

/// Fraction of reference def-use edges found in the candidate.
pub fn dataflow_match(cand: &ToyAst, reference: &ToyAst) -> f64 {
    multiset_recall(cand.def_use_edges(), reference.def_use_edges())
}

pub fn codebleu_parts(candidate: &str, reference: &str) -> CodeBleuParts {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    let ngram = bleu4(&c, &r);
    let weighted_ngram = weighted_bleu4(&c, &r, keyword_weight);
    match (parse_toy(candidate), parse_toy(reference)) {
        (Ok(ca), Ok(ra)) => CodeBleuParts {
            ngram,
            weighted_ngram,
            ast: Some(ast_match(&ca, &ra)),
            dataflow: Some(dataflow_match(&ca, &ra)),
        },
        (ca, ra) => {
            if let Err(e) = ca.as_ref().and(ra.as_ref()) {
                log::debug!("codebleu falling back to lexical components: {e}");
            }
            CodeBleuParts {
                ngram,
                weighted_ngram,
                ast: None,
                dataflow: None,
            }
        }
    }
}

pub fn codebleu(candidate: &str, reference: &str, weights: &CodeBleuWeights) -> f64 {
    codebleu_parts(candidate, reference).combine(weights)
}

/// Mean CodeBLEU over text pairs.
pub fn corpus_codebleu<S: AsRef<str>>(pairs: &[(S, S)], weights: &CodeBleuWeights) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|(c, r)| codebleu(c.as_ref(), r.as_ref(), weights))
        .sum::<f64>()
        / pairs.len() as f64
}

#[derive(serde::Deserialize)]
struct ScoreRecord {
    candidate: String,
    reference: String,
}

/// Scores `{"candidate","reference"}` JSONL. Each output line is
/// `index\tbleu4\tcodebleu`; the last is `corpus\t<mean>\t<mean>`.
pub fn score_jsonl<R: BufRead>(input: R, weights: &CodeBleuWeights) -> Result<String, MetricError> {
    let mut out = String::from("# index\tbleu4\tcodebleu\n");
    let (mut sb, mut sc, mut n) = (0.0, 0.0, 0usize);
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreRecord = serde_json::from_str(&line).map_err(|e| MetricError::BadRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let b = bleu4(&tokenize(&rec.candidate), &tokenize(&rec.reference));
        let c = codebleu(&rec.candidate, &rec.reference, weights);
        out.push_str(&format!("{n}\t{b:.6}\t{c:.6}\n"));
        sb += b;
        sc += c;
        n += 1;
    }
    let d = n.max(1) as f64;
    out.push_str(&format!("corpus\t{:.6}\t{:.6}\n", sb / d, sc / d));
    Ok(out)
}
