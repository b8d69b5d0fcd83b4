use std::collections::HashMap;

/// Multiset of the order-`n` n-grams of one token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NGramCounts<'a> {
    pub n: usize,
    pub counts: HashMap<&'a [String], usize>,
}

impl<'a> NGramCounts<'a> {
    pub fn new(tokens: &'a [String], n: usize) -> Self {
        assert!((1..=4).contains(&n), "n-gram order must be in 1..=4");
        let mut counts = HashMap::new();
        if tokens.len() >= n {
            for w in tokens.windows(n) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        Self { n, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Sum over n-grams of `weight(gram) * min(self, reference)`.
    pub fn clipped_overlap<W: Fn(&[String]) -> f64>(&self, reference: &Self, weight: W) -> f64 {
        self.counts
            .iter()
            .map(|(g, &c)| weight(g) * c.min(reference.counts.get(g).copied().unwrap_or(0)) as f64)
            .sum()
    }

    pub fn weighted_total<W: Fn(&[String]) -> f64>(&self, weight: W) -> f64 {
        self.counts.iter().map(|(g, &c)| weight(g) * c as f64).sum()
    }
}

/// Splits text into identifier/number runs, `==`, and single symbols.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_alphanumeric() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        } else if c == '=' && chars.get(i + 1) == Some(&'=') {
            out.push("==".to_string());
            i += 2;
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

fn precision<W: Fn(&[String]) -> f64>(cand: &[String], reference: &[String], n: usize, weight: W) -> f64 {
    let c = NGramCounts::new(cand, n);
    let r = NGramCounts::new(reference, n);
    let denom = c.weighted_total(&weight);
    if c.total() == 0 {
        // Neither side long enough: the order carries no evidence either way.
        return if r.total() == 0 { 1.0 } else { 0.0 };
    }
    c.clipped_overlap(&r, &weight) / denom
}

/// Brevity factor `min(1, |candidate| / |reference|)`.
pub fn brevity(cand_len: usize, ref_len: usize) -> f64 {
    if ref_len == 0 {
        return 1.0;
    }
    (cand_len as f64 / ref_len as f64).min(1.0)
}

fn combine(cand_len: usize, ref_len: usize, p: [f64; 4]) -> f64 {
    if cand_len == 0 || p.contains(&0.0) {
        return 0.0;
    }
    let geo = p.iter().map(|x| x.ln()).sum::<f64>() / 4.0;
    (brevity(cand_len, ref_len) * geo.exp()).clamp(0.0, 1.0)
}

/// Clipped n-gram precisions for orders 1 through 4.
pub fn precisions(candidate: &[String], reference: &[String]) -> [f64; 4] {
    [1, 2, 3, 4].map(|n| precision(candidate, reference, n, |_| 1.0))
}

/// Sentence BLEU-4 with a linear brevity factor and no smoothing.
pub fn bleu4(candidate: &[String], reference: &[String]) -> f64 {
    combine(candidate.len(), reference.len(), precisions(candidate, reference))
}

/// BLEU-4 where unigram matches are weighted by `token_weight`.
pub fn weighted_bleu4<W: Fn(&str) -> f64>(candidate: &[String], reference: &[String], token_weight: W) -> f64 {
    let p1 = precision(candidate, reference, 1, |g| token_weight(&g[0]));
    let rest = [2, 3, 4].map(|n| precision(candidate, reference, n, |_| 1.0));
    combine(
        candidate.len(),
        reference.len(),
        [p1, rest[0], rest[1], rest[2]],
    )
}

/// Arithmetic mean of sentence scores over text pairs.
pub fn corpus_bleu4<S: AsRef<str>>(pairs: &[(S, S)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|(c, r)| bleu4(&tokenize(c.as_ref()), &tokenize(r.as_ref())))
        .sum::<f64>()
        / pairs.len() as f64
}
