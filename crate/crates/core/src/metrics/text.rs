//! Reference-based text similarity: BLEU, METEOR and ROUGE-L.
//!
//! All three tokenize by lowercasing and splitting on whitespace.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BleuOptions {
    pub max_n: usize,
    /// Adds `epsilon` to zero n-gram match counts.
    pub smoothing: bool,
    pub epsilon: f64,
}

impl Default for BleuOptions {
    fn default() -> Self {
        Self {
            max_n: 1,
            smoothing: false,
            epsilon: 0.1,
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

fn check_reference(reference: &[String]) -> Result<()> {
    if reference.is_empty() {
        return Err(invalid("reference text is empty"));
    }
    Ok(())
}

/// Single-reference BLEU with clipped n-gram precisions up to `max_n`,
/// uniform geometric mean and brevity penalty. An empty candidate scores 0.
pub fn bleu(candidate: &str, reference: &str, opts: &BleuOptions) -> Result<f64> {
    if opts.max_n == 0 {
        return Err(invalid("bleu max_n must be at least 1"));
    }
    let (cand, refr) = (tokenize(candidate), tokenize(reference));
    check_reference(&refr)?;
    if cand.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=opts.max_n {
        let total = cand.len().saturating_sub(n - 1);
        let ref_counts = ngram_counts(&refr, n);
        let matched: usize = ngram_counts(&cand, n)
            .iter()
            .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        let precision = match (matched, total) {
            (0, _) if opts.smoothing => opts.epsilon / total.max(1) as f64,
            (0, _) => return Ok(0.0),
            (m, t) => m as f64 / t as f64,
        };
        log_sum += precision.ln();
    }
    let (c, r) = (cand.len() as f64, refr.len() as f64);
    let brevity = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok(brevity * (log_sum / opts.max_n as f64).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS-based F1.
pub fn rouge_l(candidate: &str, reference: &str) -> Result<f64> {
    let (cand, refr) = (tokenize(candidate), tokenize(reference));
    check_reference(&refr)?;
    let l = lcs_len(&cand, &refr);
    if l == 0 {
        return Ok(0.0);
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / refr.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Search budget for the chunk-minimizing alignment before falling back to
/// the leftmost greedy alignment.
const ALIGN_BUDGET: usize = 200_000;

struct Aligner<'a> {
    cand: &'a [String],
    refr: &'a [String],
    used: Vec<bool>,
    current: Vec<Option<usize>>,
    best: Option<(usize, Vec<Option<usize>>)>,
    target: usize,
    nodes: usize,
}

fn count_chunks(align: &[Option<usize>]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for a in align {
        match (a, prev) {
            (Some(j), Some(p)) if *j == p + 1 => {}
            (Some(_), _) => chunks += 1,
            (None, _) => {}
        }
        prev = *a;
    }
    chunks
}

impl Aligner<'_> {
    fn search(&mut self, i: usize, matched: usize) {
        self.nodes += 1;
        if self.nodes > ALIGN_BUDGET {
            return;
        }
        let remaining_possible = self.cand.len() - i;
        if matched + remaining_possible < self.target {
            return;
        }
        if i == self.cand.len() {
            let chunks = count_chunks(&self.current);
            if self.best.as_ref().is_none_or(|(b, _)| chunks < *b) {
                self.best = Some((chunks, self.current.clone()));
            }
            return;
        }
        for j in 0..self.refr.len() {
            if !self.used[j] && self.refr[j] == self.cand[i] {
                self.used[j] = true;
                self.current[i] = Some(j);
                self.search(i + 1, matched + 1);
                self.current[i] = None;
                self.used[j] = false;
            }
        }
        self.search(i + 1, matched);
    }
}

fn greedy_alignment(cand: &[String], refr: &[String]) -> Vec<Option<usize>> {
    let mut used = vec![false; refr.len()];
    cand.iter()
        .map(|w| {
            let j = (0..refr.len()).find(|&j| !used[j] && &refr[j] == w)?;
            used[j] = true;
            Some(j)
        })
        .collect()
}

/// Exact-match unigram alignment with the most matches and, among those, the
/// fewest chunks; candidate positions prefer the leftmost reference match.
fn align(cand: &[String], refr: &[String]) -> Vec<Option<usize>> {
    let cand_counts = ngram_counts(cand, 1);
    let ref_counts = ngram_counts(refr, 1);
    let target = cand_counts
        .iter()
        .map(|(w, &c)| c.min(ref_counts.get(w).copied().unwrap_or(0)))
        .sum();
    let mut aligner = Aligner {
        cand,
        refr,
        used: vec![false; refr.len()],
        current: vec![None; cand.len()],
        best: None,
        target,
        nodes: 0,
    };
    aligner.search(0, 0);
    match aligner.best {
        Some((_, a)) if aligner.nodes <= ALIGN_BUDGET => a,
        _ => greedy_alignment(cand, refr),
    }
}

/// METEOR with exact matching only: F_mean = 10PR/(R + 9P) scaled by
/// 1 − 0.5·(chunks/matches)³.
pub fn meteor(candidate: &str, reference: &str) -> Result<f64> {
    let (cand, refr) = (tokenize(candidate), tokenize(reference));
    check_reference(&refr)?;
    let alignment = align(&cand, &refr);
    let matches = alignment.iter().flatten().count();
    if matches == 0 {
        return Ok(0.0);
    }
    let p = matches as f64 / cand.len() as f64;
    let r = matches as f64 / refr.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let frag = count_chunks(&alignment) as f64 / matches as f64;
    Ok(f_mean * (1.0 - 0.5 * frag.powi(3)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub bleu: f64,
    pub meteor: f64,
    pub rouge_l: f64,
}

pub fn text_scores(
    candidate: &str,
    reference: &str,
    bleu_opts: &BleuOptions,
) -> Result<TextScores> {
    Ok(TextScores {
        bleu: bleu(candidate, reference, bleu_opts)?,
        meteor: meteor(candidate, reference)?,
        rouge_l: rouge_l(candidate, reference)?,
    })
}

/// (candidate, reference) pairs from a two-column tab-separated file. Blank
/// lines are skipped.
pub fn read_text_pairs(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    parse_text_pairs(&fs::read_to_string(path)?)
}

pub fn parse_text_pairs(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            match cols.as_slice() {
                [c, r] => Ok((c.trim().to_string(), r.trim().to_string())),
                _ => Err(invalid(format!(
                    "line {}: expected 2 tab-separated columns, found {}",
                    i + 1,
                    cols.len()
                ))),
            }
        })
        .collect()
}
