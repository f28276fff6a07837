//! N-gram and longest-common-subsequence overlap scores for summaries.
//!
//! Single-pair scores live on `[0, 1]`; corpus-level reports use the
//! conventional 0-100 scale, with the geometric mean `rg` defined as the
//! cube root of the product of the three 0-100 F1 means.

use std::collections::HashMap;

/// Precision/recall/F1 of one candidate-reference pair, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(matches: usize, candidate_total: usize, reference_total: usize) -> Self {
        let precision = if candidate_total == 0 {
            0.0
        } else {
            matches as f64 / candidate_total as f64
        };
        let recall = if reference_total == 0 {
            0.0
        } else {
            matches as f64 / reference_total as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

/// Lowercases, maps every non-alphanumeric character (newlines included) to
/// a space, and splits on whitespace.
fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// N-gram overlap with clipped counts (each reference n-gram is matched at
/// most as often as it occurs there).
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> RougeScore {
    let cand = normalize(candidate);
    let refr = normalize(reference);
    let cand_counts = ngram_counts(&cand, n);
    let ref_counts = ngram_counts(&refr, n);
    let matches: usize = cand_counts
        .iter()
        .map(|(gram, &count)| count.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    let cand_total = cand.len().saturating_sub(n - 1);
    let ref_total = refr.len().saturating_sub(n - 1);
    RougeScore::from_counts(matches, cand_total, ref_total)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence overlap across the whole token sequence
/// (line breaks carry no special meaning — they normalize to spaces).
pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    let cand = normalize(candidate);
    let refr = normalize(reference);
    let lcs = lcs_len(&cand, &refr);
    RougeScore::from_counts(lcs, cand.len(), refr.len())
}

/// Geometric mean of three 0-100 scores: `cbrt(r1 * r2 * rl)`, zero if any
/// input is zero.
pub fn rouge_g(r1: f64, r2: f64, rl: f64) -> f64 {
    if r1 == 0.0 || r2 == 0.0 || rl == 0.0 {
        0.0
    } else {
        (r1 * r2 * rl).cbrt()
    }
}

/// Corpus-level F1 means on the 0-100 scale.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RougeReport {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub rg: f64,
}

/// Arithmetic mean of per-pair F1 scores, scaled to 0-100, with the
/// geometric mean over the three components.
pub fn corpus_rouge(pairs: &[(String, String)]) -> RougeReport {
    if pairs.is_empty() {
        return RougeReport { r1: 0.0, r2: 0.0, rl: 0.0, rg: 0.0 };
    }
    let n = pairs.len() as f64;
    let mut r1 = 0.0;
    let mut r2 = 0.0;
    let mut rl = 0.0;
    for (candidate, reference) in pairs {
        r1 += rouge_n(candidate, reference, 1).f1;
        r2 += rouge_n(candidate, reference, 2).f1;
        rl += rouge_l(candidate, reference).f1;
    }
    let r1 = 100.0 * r1 / n;
    let r2 = 100.0 * r2 / n;
    let rl = 100.0 * rl / n;
    RougeReport { r1, r2, rl, rg: rouge_g(r1, r2, rl) }
}
