//! Dataset records, JSONL IO, seeded splitting and the synthetic corpus.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::metrics::{BinOp, Expr, Stmt, ToyAst};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Record { line: usize, reason: String },
    #[error("{0} contains no records")]
    Empty(String),
    #[error("{0}")]
    Invalid(String),
}

/// Independent generator for one named consumer of a run seed.
pub fn rng_stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// `(c, r, c_r)`: code, the review on it, and the revised code.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementTriplet {
    pub code: String,
    pub review: String,
    pub refined_code: String,
}

/// `(c_c, r, d)`: a code change, a review, and whether the change is accepted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityTriplet {
    pub code_change: String,
    pub review: String,
    pub decision: u8,
}

pub trait Record: Serialize + Sized {
    const FIELDS: &'static [&'static str];
    fn from_object(obj: &Map<String, Value>) -> Result<Self, String>;
}

fn text_field(obj: &Map<String, Value>, name: &str) -> Result<String, String> {
    match obj.get(name) {
        None => Err(format!("missing field `{name}`")),
        Some(Value::String(s)) if s.is_empty() => Err(format!("field `{name}` is empty")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(format!("field `{name}` must be a string")),
    }
}

impl Record for RefinementTriplet {
    const FIELDS: &'static [&'static str] = &["code", "review", "refined_code"];

    fn from_object(obj: &Map<String, Value>) -> Result<Self, String> {
        let t = Self {
            code: text_field(obj, "code")?,
            review: text_field(obj, "review")?,
            refined_code: text_field(obj, "refined_code")?,
        };
        if t.code == t.refined_code {
            return Err("`refined_code` is identical to `code`".into());
        }
        Ok(t)
    }
}

impl Record for QualityTriplet {
    const FIELDS: &'static [&'static str] = &["code_change", "review", "decision"];

    fn from_object(obj: &Map<String, Value>) -> Result<Self, String> {
        let decision = match obj.get("decision") {
            None => return Err("missing field `decision`".into()),
            Some(v) => match v.as_u64() {
                Some(d @ (0 | 1)) => d as u8,
                _ => return Err("field `decision` must be 0 or 1".into()),
            },
        };
        Ok(Self {
            code_change: text_field(obj, "code_change")?,
            review: text_field(obj, "review")?,
            decision,
        })
    }
}

/// Which record shape a JSONL file holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schema {
    Refinement,
    Quality,
}

impl Schema {
    pub fn fields(self) -> &'static [&'static str] {
        match self {
            Schema::Refinement => RefinementTriplet::FIELDS,
            Schema::Quality => QualityTriplet::FIELDS,
        }
    }
}

pub fn parse_jsonl<T: Record, R: BufRead>(input: R, origin: &str) -> Result<Vec<T>, DataError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: origin.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = |reason: String| DataError::Record { line: i + 1, reason };
        let value: Value = serde_json::from_str(&line).map_err(|e| record(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| record("expected a JSON object".into()))?;
        out.push(T::from_object(obj).map_err(record)?);
    }
    if out.is_empty() {
        return Err(DataError::Empty(origin.to_string()));
    }
    Ok(out)
}

pub fn load_jsonl<T: Record>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_jsonl(BufReader::new(file), &path.display().to_string())
}

pub fn to_jsonl<T: Record>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn save_jsonl<T: Record>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(to_jsonl(records).as_bytes()).map_err(io)
}

/// Split fractions and the shuffle seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.85,
            val_frac: 0.075,
            test_frac: 0.075,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let f = [self.train_frac, self.val_frac, self.test_frac];
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::Invalid(format!(
                "split fractions {f:?} must lie in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes: each part gets the floor of its share and
    /// the leftover records go one apiece to test, then val, then train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let share = |f: f64| ((f * n as f64 + 1e-9).floor() as usize).min(n);
        let mut s = [share(self.train_frac), share(self.val_frac), share(self.test_frac)];
        let mut left = n.saturating_sub(s.iter().sum());
        for slot in [2, 1, 0] {
            if left > 0 {
                s[slot] += 1;
                left -= 1;
            }
        }
        s[0] += left;
        (s[0], s[1], s[2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

pub fn split<T>(mut records: Vec<T>, spec: &SplitSpec) -> Result<Splits<T>, DataError> {
    spec.validate()?;
    if records.is_empty() {
        return Err(DataError::Empty("split input".into()));
    }
    let (tr, va, _) = spec.sizes(records.len());
    records.shuffle(&mut rng_stream(spec.seed, "split"));
    let test = records.split_off(tr + va);
    let val = records.split_off(tr);
    Ok(Splits {
        train: records,
        val,
        test,
    })
}

/// The defect injected into a synthetic program.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Defect {
    OffByOne,
    WrongComparison,
    UnusedAssignment,
    MisnamedVariable,
    MissingReturn,
}

impl Defect {
    pub const ALL: [Defect; 5] = [
        Defect::OffByOne,
        Defect::WrongComparison,
        Defect::UnusedAssignment,
        Defect::MisnamedVariable,
        Defect::MissingReturn,
    ];
}

impl fmt::Display for Defect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Defect::OffByOne => "off-by-one literal",
            Defect::WrongComparison => "wrong comparison operator",
            Defect::UnusedAssignment => "unused assignment",
            Defect::MisnamedVariable => "misnamed variable",
            Defect::MissingReturn => "missing return",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub refinement: Vec<RefinementTriplet>,
    pub quality: Vec<QualityTriplet>,
    pub defects: Vec<Defect>,
}

// Correct programs only use these names, even literals, and `==`.
const VARS: [&str; 8] = ["a", "b", "d", "n", "m", "x", "y", "s"];
const LITERALS: [u64; 4] = [2, 4, 6, 8];
const UNUSED: [&str; 3] = ["t", "u", "w"];
const UNDEFINED: [&str; 3] = ["z", "q", "k"];

fn pick<T: Copy, R: Rng>(rng: &mut R, xs: &[T]) -> T {
    xs[rng.gen_range(0..xs.len())]
}

fn operand<R: Rng>(rng: &mut R, defined: &[String]) -> Expr {
    if rng.gen_bool(0.5) {
        Expr::Var(defined[rng.gen_range(0..defined.len())].clone())
    } else {
        Expr::Int(pick(rng, &LITERALS))
    }
}

fn arith<R: Rng>(rng: &mut R) -> BinOp {
    pick(rng, &[BinOp::Add, BinOp::Sub, BinOp::Mul])
}

/// A straight-line program of 2 to 4 statements ending in `return`.
fn clean_program<R: Rng>(rng: &mut R, with_if: bool) -> ToyAst {
    let mut names: Vec<&str> = VARS.to_vec();
    names.shuffle(rng);
    let total = if with_if {
        rng.gen_range(3..=4)
    } else {
        rng.gen_range(2..=4)
    };
    let middle = total - 2;
    let if_slot = with_if.then(|| rng.gen_range(0..middle));
    let mut defined = vec![names[0].to_string()];
    let mut body = vec![Stmt::Assign(names[0].into(), Expr::Int(pick(rng, &LITERALS)))];
    for slot in 0..middle {
        let target = names[slot + 1].to_string();
        let base = Expr::Var(defined[rng.gen_range(0..defined.len())].clone());
        let stmt = if if_slot == Some(slot) {
            let cond = Expr::Bin(BinOp::Eq, Box::new(base.clone()), Box::new(Expr::Int(pick(rng, &LITERALS))));
            let then = Expr::Bin(arith(rng), Box::new(base), Box::new(Expr::Int(pick(rng, &LITERALS))));
            Stmt::If(
                cond,
                vec![Stmt::Assign(target.clone(), then)],
                vec![Stmt::Assign(target.clone(), Expr::Int(pick(rng, &LITERALS)))],
            )
        } else {
            let rhs = operand(rng, &defined);
            let (l, r) = if rng.gen_bool(0.5) { (base, rhs) } else { (rhs, base) };
            Stmt::Assign(target.clone(), Expr::Bin(arith(rng), Box::new(l), Box::new(r)))
        };
        body.push(stmt);
        defined.push(target);
    }
    body.push(Stmt::Return(Expr::Var(defined.last().unwrap().clone())));
    ToyAst {
        name: None,
        params: vec![],
        body,
    }
}

fn bump_expr(e: &mut Expr, index: &mut usize) -> Option<u64> {
    match e {
        Expr::Int(v) => {
            if *index == 0 {
                *v += 1;
                return Some(*v - 1);
            }
            *index -= 1;
            None
        }
        Expr::Var(_) => None,
        Expr::Bin(_, l, r) => bump_expr(l, index).or_else(|| bump_expr(r, index)),
        Expr::Call(_, args) => args.iter_mut().find_map(|a| bump_expr(a, index)),
    }
}

/// Adds one to the `index`-th integer literal in program order and returns
/// its old value.
fn bump_literal(body: &mut [Stmt], index: &mut usize) -> Option<u64> {
    body.iter_mut().find_map(|s| match s {
        Stmt::Assign(_, e) | Stmt::Return(e) => bump_expr(e, index),
        Stmt::If(c, t, f) => bump_expr(c, index)
            .or_else(|| bump_literal(t, index))
            .or_else(|| bump_literal(f, index)),
    })
}

fn count_literals(body: &[Stmt]) -> usize {
    fn expr(e: &Expr) -> usize {
        match e {
            Expr::Int(_) => 1,
            Expr::Var(_) => 0,
            Expr::Bin(_, l, r) => expr(l) + expr(r),
            Expr::Call(_, a) => a.iter().map(expr).sum(),
        }
    }
    body.iter()
        .map(|s| match s {
            Stmt::Assign(_, e) | Stmt::Return(e) => expr(e),
            Stmt::If(c, t, f) => expr(c) + count_literals(t) + count_literals(f),
        })
        .sum()
}

fn inject<R: Rng>(rng: &mut R, fixed: &ToyAst, defect: Defect) -> (ToyAst, String) {
    let mut code = fixed.clone();
    let last_var = match fixed.body.last() {
        Some(Stmt::Return(Expr::Var(v))) => v.clone(),
        _ => unreachable!("clean programs end in `return var`"),
    };
    let review = match defect {
        Defect::OffByOne => {
            let mut idx = rng.gen_range(0..count_literals(&code.body));
            let k = bump_literal(&mut code.body, &mut idx).expect("literal index in range");
            format!("use `{k}` instead of `{}`", k + 1)
        }
        Defect::WrongComparison => {
            for s in code.body.iter_mut() {
                if let Stmt::If(Expr::Bin(op, ..), ..) = s {
                    *op = BinOp::Lt;
                }
            }
            "replace `<` with `==`".to_string()
        }
        Defect::UnusedAssignment => {
            let name = pick(rng, &UNUSED);
            let at = rng.gen_range(1..code.body.len());
            let src = match &code.body[at - 1] {
                Stmt::Assign(v, _) => v.clone(),
                Stmt::If(_, t, _) => match &t[0] {
                    Stmt::Assign(v, _) => v.clone(),
                    _ => unreachable!(),
                },
                Stmt::Return(_) => unreachable!(),
            };
            let rhs = Expr::Bin(arith(rng), Box::new(Expr::Var(src)), Box::new(Expr::Int(pick(rng, &LITERALS))));
            code.body.insert(at, Stmt::Assign(name.into(), rhs));
            format!("remove unused assignment to `{name}`")
        }
        Defect::MisnamedVariable => {
            let wrong = pick(rng, &UNDEFINED);
            *code.body.last_mut().unwrap() = Stmt::Return(Expr::Var(wrong.into()));
            format!("rename `{wrong}` to `{last_var}`")
        }
        Defect::MissingReturn => {
            code.body.pop();
            format!("add missing `return {last_var}`")
        }
    };
    (code, review)
}

/// Generates `n` defect/fix examples and a balanced quality set: even
/// indices pair code with its own fix, odd ones with another example's.
pub fn synth_generate(n: usize, seed: u64) -> Result<SynthCorpus, DataError> {
    if n == 0 {
        return Err(DataError::Invalid("synthetic corpus size must be at least 1".into()));
    }
    let mut rng = rng_stream(seed, "synth");
    let mut refinement = Vec::with_capacity(n);
    let mut defects = Vec::with_capacity(n);
    for i in 0..n {
        let defect = Defect::ALL[i % Defect::ALL.len()];
        let with_if = defect == Defect::WrongComparison || rng.gen_bool(0.25);
        let fixed = clean_program(&mut rng, with_if);
        let (code, review) = inject(&mut rng, &fixed, defect);
        refinement.push(RefinementTriplet {
            code: code.to_source(),
            review,
            refined_code: fixed.to_source(),
        });
        defects.push(defect);
    }
    let quality = (0..n)
        .map(|i| {
            let r = &refinement[i];
            if i % 2 == 0 || n == 1 {
                return QualityTriplet {
                    code_change: r.refined_code.clone(),
                    review: r.review.clone(),
                    decision: 1,
                };
            }
            let j = (1..n)
                .map(|k| (i + k) % n)
                .find(|&j| defects[j] != defects[i] && refinement[j].refined_code != r.refined_code)
                .unwrap_or((i + 1) % n);
            QualityTriplet {
                code_change: refinement[j].refined_code.clone(),
                review: r.review.clone(),
                decision: if refinement[j].refined_code == r.refined_code { 1 } else { 0 },
            }
        })
        .collect();
    Ok(SynthCorpus {
        refinement,
        quality,
        defects,
    })
}
