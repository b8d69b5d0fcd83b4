//! Byte-pair-encoding subword tokenizer and fixed-length sequence layouts.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const MSG: usize = 3;
pub const SPECIALS: [&str; 4] = ["<s>", "</s>", "<pad>", "<msg>"];

const HEADER: &str = "DSCRV-VOCAB 1";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TokenizerError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("vocab size {requested} is below the {minimum} specials and base symbols")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("unknown token id {0}")]
    UnknownId(usize),
    #[error("bad vocabulary file at line {line}: {reason}")]
    BadFile { line: usize, reason: String },
    #[error("{0}")]
    Layout(String),
}

/// Trained subword vocabulary. Ids 0..4 are the specials, then the sorted
/// base alphabet, then one id per merge that produced a new string.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, usize>,
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), usize>,
}

/// A fixed-length id sequence with its attention mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<usize>,
    /// `false` exactly at `<pad>` positions.
    pub mask: Vec<bool>,
    /// Number of non-pad content tokens.
    pub true_length: usize,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions a decoder is trained to predict: every content token, the
    /// first pad after the content, and the closing `</s>`.
    pub fn label_mask(&self) -> Vec<bool> {
        let mut out = vec![false; self.ids.len()];
        let mut seen_pad = false;
        for (i, &id) in self.ids.iter().enumerate().skip(1) {
            out[i] = match id {
                PAD if !seen_pad => {
                    seen_pad = true;
                    true
                }
                PAD => false,
                _ => true,
            };
        }
        out
    }
}

/// Splits text into BPE chunks: an optional single leading space followed by
/// an identifier run or one symbol. Any other whitespace stands alone.
pub fn pre_split(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let word = |c: char| c.is_alphanumeric() || c == '_';
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let mut chunk = String::new();
        if chars[i] == ' ' && i + 1 < chars.len() && !chars[i + 1].is_whitespace() {
            chunk.push(' ');
            i += 1;
        }
        let c = chars[i];
        if word(c) {
            while i < chars.len() && word(chars[i]) {
                chunk.push(chars[i]);
                i += 1;
            }
        } else {
            chunk.push(c);
            i += 1;
        }
        out.push(chunk);
    }
    out
}

fn apply_merge(sym: &[String], left: &str, right: &str, merged: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(sym.len());
    let mut i = 0;
    while i < sym.len() {
        if i + 1 < sym.len() && sym[i] == left && sym[i + 1] == right {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(sym[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns merges greedily by pair frequency; ties go to the
/// lexicographically smallest pair.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Vocabulary, TokenizerError> {
    if corpus.iter().all(|s| s.as_ref().is_empty()) {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut words: BTreeMap<String, usize> = BTreeMap::new();
    let mut alphabet = BTreeSet::new();
    for s in corpus {
        alphabet.extend(s.as_ref().chars());
        for w in pre_split(s.as_ref()) {
            *words.entry(w).or_insert(0) += 1;
        }
    }
    let minimum = SPECIALS.len() + alphabet.len();
    if vocab_size < minimum {
        return Err(TokenizerError::VocabTooSmall {
            requested: vocab_size,
            minimum,
        });
    }
    let mut vocab = Vocabulary::from_parts(alphabet.into_iter().collect(), Vec::new());
    let mut split: Vec<(Vec<String>, usize)> = words
        .into_iter()
        .map(|(w, n)| (w.chars().map(String::from).collect(), n))
        .collect();
    while vocab.len() < vocab_size {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (sym, n) in &split {
            for w in sym.windows(2) {
                if SPECIALS.contains(&format!("{}{}", w[0], w[1]).as_str()) {
                    continue;
                }
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_insert(0) += n;
            }
        }
        let Some(((l, r), _)) = pairs
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
        else {
            break;
        };
        let (l, r) = (l.to_string(), r.to_string());
        let merged = format!("{l}{r}");
        for (sym, _) in split.iter_mut() {
            *sym = apply_merge(sym, &l, &r, &merged);
        }
        vocab.push_merge(l, r);
    }
    Ok(vocab)
}

fn escape(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            ' ' => out.push_str("\\s"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str, line: usize) -> Result<String, TokenizerError> {
    let mut out = String::new();
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        out.push(match it.next() {
            Some('\\') => '\\',
            Some('n') => '\n',
            Some('t') => '\t',
            Some('r') => '\r',
            Some('s') => ' ',
            other => {
                return Err(TokenizerError::BadFile {
                    line,
                    reason: format!("bad escape {other:?}"),
                })
            }
        });
    }
    Ok(out)
}

impl Vocabulary {
    fn from_parts(alphabet: Vec<char>, merges: Vec<(String, String)>) -> Self {
        let mut v = Self {
            tokens: SPECIALS.iter().map(|s| s.to_string()).collect(),
            token_to_id: HashMap::new(),
            alphabet: alphabet.clone(),
            merges: Vec::new(),
            merge_rank: HashMap::new(),
        };
        for (i, s) in SPECIALS.iter().enumerate() {
            v.token_to_id.insert(s.to_string(), i);
        }
        for c in alphabet {
            v.intern(c.to_string());
        }
        for (l, r) in merges {
            v.push_merge(l, r);
        }
        v
    }

    fn intern(&mut self, tok: String) {
        if !self.token_to_id.contains_key(&tok) {
            self.token_to_id.insert(tok.clone(), self.tokens.len());
            self.tokens.push(tok);
        }
    }

    fn push_merge(&mut self, l: String, r: String) {
        self.intern(format!("{l}{r}"));
        self.merge_rank.insert((l.clone(), r.clone()), self.merges.len());
        self.merges.push((l, r));
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    fn encode_chunk(&self, chunk: &str, out: &mut Vec<usize>) {
        let mut sym: Vec<String> = Vec::new();
        for c in chunk.chars() {
            if self.alphabet.contains(&c) {
                sym.push(c.to_string());
            } else {
                log::warn!("skipping character {c:?} outside the vocabulary");
            }
        }
        loop {
            let best = sym
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            sym = apply_merge(&sym, l, r, &format!("{l}{r}"));
        }
        out.extend(sym.iter().map(|s| self.token_to_id[s]));
    }

    /// Content token ids, no specials.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for chunk in pre_split(text) {
            self.encode_chunk(&chunk, &mut out);
        }
        out
    }

    /// `<s> c… <pad>… </s>`, content truncated to `max_len - 2`.
    pub fn encode_code(&self, c: &str, max_len: usize) -> Result<EncodedSequence, TokenizerError> {
        if max_len < 3 {
            return Err(TokenizerError::Layout(format!("max_len {max_len} < 3")));
        }
        let mut ids = vec![BOS];
        let n = push_window(&mut ids, &self.tokenize(c), max_len - 2);
        ids.push(EOS);
        Ok(finish(ids, n))
    }

    /// `<s> c… <pad>… <msg> r… <pad>… </s>` with fixed windows.
    pub fn encode_pair(
        &self,
        c: &str,
        r: &str,
        max_len_c: usize,
        max_len_r: usize,
    ) -> Result<EncodedSequence, TokenizerError> {
        if max_len_c == 0 || max_len_r == 0 {
            return Err(TokenizerError::Layout("pair budgets must be at least 1".into()));
        }
        let mut ids = vec![BOS];
        let nc = push_window(&mut ids, &self.tokenize(c), max_len_c);
        ids.push(MSG);
        let nr = push_window(&mut ids, &self.tokenize(r), max_len_r);
        ids.push(EOS);
        Ok(finish(ids, nc + nr))
    }

    /// Concatenates non-special tokens.
    pub fn decode(&self, ids: &[usize]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.tokens.get(id).ok_or(TokenizerError::UnknownId(id))?;
            if id >= SPECIALS.len() {
                out.push_str(tok);
            }
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for s in SPECIALS {
            out.push_str(s);
            out.push('\n');
        }
        let alpha: Vec<String> = self.alphabet.iter().map(|c| escape(&c.to_string())).collect();
        let _ = writeln!(out, "alphabet {}", alpha.join(" "));
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{} {}", escape(l), escape(r));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let bad = |line: usize, reason: &str| TokenizerError::BadFile {
            line,
            reason: reason.to_string(),
        };
        let lines: Vec<&str> = text.lines().collect();
        if lines.first() != Some(&HEADER) {
            return Err(bad(1, "missing header"));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if lines.get(i + 1) != Some(s) {
                return Err(bad(i + 2, &format!("expected special token {s}")));
            }
        }
        let alpha_line = lines.get(5).ok_or_else(|| bad(6, "missing alphabet"))?;
        let rest = alpha_line
            .strip_prefix("alphabet")
            .ok_or_else(|| bad(6, "missing alphabet"))?;
        let mut alphabet = Vec::new();
        for tok in rest.split(' ').filter(|t| !t.is_empty()) {
            let s = unescape(tok, 6)?;
            let mut cs = s.chars();
            match (cs.next(), cs.next()) {
                (Some(c), None) => alphabet.push(c),
                _ => return Err(bad(6, "alphabet entries must be single characters")),
            }
        }
        let mut merges = Vec::new();
        for (i, line) in lines.iter().enumerate().skip(6) {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((unescape(l, i + 1)?, unescape(r, i + 1)?));
                }
                _ => return Err(bad(i + 1, "expected `left right`")),
            }
        }
        Ok(Self::from_parts(alphabet, merges))
    }
}

fn push_window(ids: &mut Vec<usize>, content: &[usize], budget: usize) -> usize {
    let n = content.len().min(budget);
    ids.extend_from_slice(&content[..n]);
    ids.extend(std::iter::repeat_n(PAD, budget - n));
    n
}

fn finish(ids: Vec<usize>, true_length: usize) -> EncodedSequence {
    let mask = ids.iter().map(|&i| i != PAD).collect();
    EncodedSequence {
        ids,
        mask,
        true_length,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus() -> Vec<&'static str> {
        vec![
            "x = a + 1\nreturn x",
            "def f(a, b):\ny = a * b\nreturn y",
            "use `2` instead of `3`",
            "remove unused assignment to `t`",
        ]
    }

    #[test]
    fn first_merge_on_two_symbol_corpus() {
        let v = train_bpe(&["aa aa"], 10).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn minimal_vocab_learns_nothing() {
        let v = train_bpe(&["ab ba"], 4 + 3).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.len(), 7);
        assert!(matches!(
            train_bpe(&["ab ba"], 6),
            Err(TokenizerError::VocabTooSmall { minimum: 7, .. })
        ));
        assert_eq!(train_bpe::<&str>(&[], 50), Err(TokenizerError::EmptyCorpus));
    }

    #[test]
    fn specials_have_reserved_ids_and_never_merge() {
        let v = train_bpe(&corpus(), 80).unwrap();
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i));
        }
        for (l, r) in v.merges() {
            assert!(!SPECIALS.contains(&l.as_str()) && !SPECIALS.contains(&r.as_str()));
        }
        let ids: BTreeSet<usize> = v.token_to_id.values().copied().collect();
        assert_eq!(ids.len(), v.len());
        assert_eq!(ids.iter().max(), Some(&(v.len() - 1)));
    }

    #[test]
    fn layouts_match_examples() {
        let v = train_bpe(&["ab"], 6).unwrap();
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        let e = v.encode_code("ab", 6).unwrap();
        assert_eq!(e.ids, vec![BOS, a, b, PAD, PAD, EOS]);
        assert_eq!(e.true_length, 2);
        assert_eq!(e.mask, vec![true, true, true, false, false, true]);
        assert_eq!(e.label_mask(), vec![false, true, true, true, false, true]);
        assert_eq!(v.encode_code("", 3).unwrap().ids, vec![BOS, PAD, EOS]);
        let long = v.encode_code("ababababab", 6).unwrap();
        assert_eq!(long.ids, vec![BOS, a, b, a, b, EOS]);
        let p = v.encode_pair("a", "b", 3, 3).unwrap();
        assert_eq!(p.ids, vec![BOS, a, PAD, PAD, MSG, b, PAD, PAD, EOS]);
        let p = v.encode_pair("a", "", 3, 2).unwrap();
        assert_eq!(&p.ids[4..], &[MSG, PAD, PAD, EOS]);
        let p = v.encode_pair("a", "bbbbb", 1, 3).unwrap();
        assert_eq!(p.ids, vec![BOS, a, MSG, b, b, b, EOS]);
        assert!(v.encode_code("a", 2).is_err());
    }

    #[test]
    fn decode_strips_specials_and_rejects_unknown() {
        let v = train_bpe(&corpus(), 60).unwrap();
        assert_eq!(v.decode(&[BOS, PAD, EOS]).unwrap(), "");
        assert_eq!(v.decode(&[9999]), Err(TokenizerError::UnknownId(9999)));
    }

    #[test]
    fn corpus_round_trips_and_training_is_deterministic() {
        let v = train_bpe(&corpus(), 90).unwrap();
        for s in corpus() {
            let e = v.encode_code(s, 200).unwrap();
            assert_eq!(v.decode(&e.ids).unwrap(), s);
        }
        assert_eq!(train_bpe(&corpus(), 90).unwrap().merges(), v.merges());
    }

    #[test]
    fn vocabulary_file_round_trips() {
        let v = train_bpe(&["a b\n\tc\\d  e", "x = y"], 40).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("DSCRV-VOCAB 1\n<s>\n</s>\n<pad>\n<msg>\n"));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
        assert!(Vocabulary::from_text("nope").is_err());
    }

    #[test]
    fn literal_special_text_stays_content() {
        let v = train_bpe(&["<pad> <pad> <pad>"], 60).unwrap();
        let ids = v.tokenize("<pad>");
        assert!(ids.iter().all(|&i| i >= SPECIALS.len()));
        assert_eq!(v.decode(&ids).unwrap(), "<pad>");
    }

    #[test]
    fn unknown_characters_are_skipped() {
        let v = train_bpe(&["ab"], 6).unwrap();
        assert_eq!(v.decode(&v.tokenize("a?b")).unwrap(), "ab");
    }

    proptest! {
        #[test]
        fn round_trip_over_random_corpora(
            lines in prop::collection::vec("[a-c =+\\n()_1-3]{1,20}", 1..6),
            extra in 0usize..40,
        ) {
            let alpha: BTreeSet<char> = lines.iter().flat_map(|s| s.chars()).collect();
            let v = train_bpe(&lines, 4 + alpha.len() + extra).unwrap();
            for s in &lines {
                let e = v.encode_code(s, 64).unwrap();
                prop_assert_eq!(e.ids.len(), 64);
                prop_assert_eq!(e.ids[0], BOS);
                prop_assert_eq!(e.ids[63], EOS);
                prop_assert_eq!(&v.decode(&e.ids).unwrap(), s);
            }
        }

        #[test]
        fn msg_sits_after_code_window(c in "[a-c ]{0,12}", r in "[a-c ]{0,12}", lc in 1usize..8, lr in 1usize..8) {
            let v = train_bpe(&["abc cba"], 12).unwrap();
            let e = v.encode_pair(&c, &r, lc, lr).unwrap();
            prop_assert_eq!(e.ids.len(), lc + lr + 3);
            let msgs: Vec<usize> = e.ids.iter().enumerate().filter(|(_, &i)| i == MSG).map(|(p, _)| p).collect();
            prop_assert_eq!(msgs, vec![1 + lc]);
            for (id, m) in e.ids.iter().zip(&e.mask) {
                prop_assert_eq!(*m, *id != PAD);
            }
        }
    }
}
