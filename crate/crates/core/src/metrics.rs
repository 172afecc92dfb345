//! Report-level text metrics and per-indicator state accuracy.
//!
//! Every text metric works on lowercased whitespace tokens of the detokenised
//! report, so scores do not depend on the subword vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing applied to zero n-gram precisions.
pub const BLEU_EPSILON: f64 = 1e-9;
/// Recall weight of the LCS F-measure.
pub const ROUGE_BETA: f64 = 1.2;
/// Nodes explored per pair by the chunk-minimising aligner before it settles
/// for the best alignment found so far.
pub const METEOR_SEARCH_BUDGET: usize = 200_000;

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn check_pairs(candidates: &[String], references: &[String]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::contract("no candidates to score"));
    }
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU over 1..=n grams with brevity penalty.
pub fn bleu_n(candidates: &[String], references: &[String], n: usize) -> Result<f64> {
    check_pairs(candidates, references)?;
    if n == 0 {
        return Err(Error::contract("BLEU order must be at least 1"));
    }
    let cands: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(c)).collect();
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let c_len: usize = cands.iter().map(Vec::len).sum();
    let r_len: usize = refs.iter().map(Vec::len).sum();
    if c_len == 0 {
        return Ok(0.0);
    }

    let mut log_sum = 0.0;
    for k in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (c, r) in cands.iter().zip(&refs) {
            let rc = ngram_counts(r, k);
            for (gram, count) in ngram_counts(c, k) {
                matched += count.min(rc.get(gram).copied().unwrap_or(0));
                total += count;
            }
        }
        let p = if matched == 0 {
            BLEU_EPSILON / total.max(1) as f64
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * (log_sum / n as f64).exp())
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_pair(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let r = l as f64 / reference.len() as f64;
    let p = l as f64 / candidate.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * r * p / (r + b2 * p)
}

/// Mean per-pair ROUGE-L F-measure.
pub fn rouge_l(candidates: &[String], references: &[String]) -> Result<f64> {
    check_pairs(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l_pair(&tokenize(c), &tokenize(r)))
        .sum();
    Ok(total / candidates.len() as f64)
}

/// Size and chunk count of a maximum exact-match unigram alignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

struct Aligner<'a> {
    cand: &'a [String],
    positions: Vec<Vec<usize>>,
    skips: Vec<usize>,
    word: Vec<usize>,
    used: Vec<bool>,
    best: usize,
    nodes: usize,
}

impl Aligner<'_> {
    fn search(&mut self, i: usize, prev: Option<usize>, chunks: usize) {
        if chunks >= self.best {
            return;
        }
        if i == self.cand.len() {
            self.best = chunks;
            return;
        }
        self.nodes += 1;
        if self.nodes > METEOR_SEARCH_BUDGET {
            return;
        }
        let w = self.word[i];
        if w == usize::MAX {
            return self.search(i + 1, None, chunks);
        }
        // Continuing the current chunk first finds good bounds early.
        let mut order: Vec<usize> = self.positions[w].clone();
        if let Some(p) = prev {
            if let Some(k) = order.iter().position(|&j| j == p + 1) {
                order[..=k].rotate_right(1);
            }
        }
        for j in order {
            if self.used[j] {
                continue;
            }
            self.used[j] = true;
            let extends = prev.is_some_and(|p| p + 1 == j);
            self.search(i + 1, Some(j), chunks + usize::from(!extends));
            self.used[j] = false;
        }
        if self.skips[w] > 0 {
            self.skips[w] -= 1;
            self.search(i + 1, None, chunks);
            self.skips[w] += 1;
        }
    }
}

/// Maximises matched unigrams, then minimises the number of chunks (runs
/// contiguous in both sequences). Exact unless the search budget runs out.
pub fn align(candidate: &[String], reference: &[String]) -> Alignment {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let mut positions: Vec<Vec<usize>> = Vec::new();
    for (j, tok) in reference.iter().enumerate() {
        let next = ids.len();
        let id = *ids.entry(tok.as_str()).or_insert(next);
        if id == positions.len() {
            positions.push(Vec::new());
        }
        positions[id].push(j);
    }
    let word: Vec<usize> = candidate
        .iter()
        .map(|t| ids.get(t.as_str()).copied().unwrap_or(usize::MAX))
        .collect();
    let mut cand_counts = vec![0usize; positions.len()];
    for &w in word.iter().filter(|&&w| w != usize::MAX) {
        cand_counts[w] += 1;
    }
    let matches: usize = cand_counts.iter().zip(&positions).map(|(&c, p)| c.min(p.len())).sum();
    if matches == 0 {
        return Alignment { matches: 0, chunks: 0 };
    }
    let skips = cand_counts.iter().zip(&positions).map(|(&c, p)| c.saturating_sub(p.len())).collect();
    let mut aligner = Aligner {
        cand: candidate,
        positions,
        skips,
        word,
        used: vec![false; reference.len()],
        best: matches + 1,
        nodes: 0,
    };
    aligner.search(0, None, 0);
    Alignment {
        matches,
        chunks: aligner.best.min(matches),
    }
}

pub fn meteor_pair(candidate: &[String], reference: &[String]) -> f64 {
    let a = align(candidate, reference);
    if a.matches == 0 {
        return 0.0;
    }
    let m = a.matches as f64;
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (a.chunks as f64 / m).powi(3);
    f_mean * (1.0 - penalty)
}

/// METEOR restricted to exact unigram matches, averaged over pairs.
pub fn meteor_exact(candidates: &[String], references: &[String]) -> Result<f64> {
    check_pairs(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| meteor_pair(&tokenize(c), &tokenize(r)))
        .sum();
    Ok(total / candidates.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateAccuracy {
    pub accuracy: Vec<f64>,
    /// `confusion[t][true][predicted]`.
    pub confusion: Vec<Vec<Vec<usize>>>,
}

pub fn state_accuracy(predicted: &[Vec<usize>], labels: &[Vec<usize>], states: usize) -> Result<StateAccuracy> {
    if predicted.len() != labels.len() || predicted.is_empty() {
        return Err(Error::contract(format!(
            "{} predictions for {} label rows",
            predicted.len(),
            labels.len()
        )));
    }
    let indicators = labels[0].len();
    let mut confusion = vec![vec![vec![0usize; states]; states]; indicators];
    for (p, l) in predicted.iter().zip(labels) {
        if p.len() != indicators || l.len() != indicators {
            return Err(Error::contract("records disagree on the number of indicators"));
        }
        for (t, (&pm, &lm)) in p.iter().zip(l).enumerate() {
            if pm >= states || lm >= states {
                return Err(Error::contract(format!("state index out of range for indicator {t}")));
            }
            confusion[t][lm][pm] += 1;
        }
    }
    let n = labels.len() as f64;
    let accuracy = confusion
        .iter()
        .map(|c| (0..states).map(|m| c[m][m]).sum::<usize>() as f64 / n)
        .collect();
    Ok(StateAccuracy { accuracy, confusion })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    #[serde(rename = "meteor_exact")]
    pub meteor: f64,
    pub state_accuracy: Vec<f64>,
    pub mean_state_accuracy: f64,
    pub confusion: Vec<Vec<Vec<usize>>>,
    pub n_pairs: usize,
}

impl EvalReport {
    pub fn compute(
        candidates: &[String],
        references: &[String],
        predicted: &[Vec<usize>],
        labels: &[Vec<usize>],
        states: usize,
    ) -> Result<Self> {
        let acc = state_accuracy(predicted, labels, states)?;
        let mean = acc.accuracy.iter().sum::<f64>() / acc.accuracy.len().max(1) as f64;
        Ok(EvalReport {
            bleu1: bleu_n(candidates, references, 1)?,
            bleu2: bleu_n(candidates, references, 2)?,
            bleu3: bleu_n(candidates, references, 3)?,
            bleu4: bleu_n(candidates, references, 4)?,
            rouge_l: rouge_l(candidates, references)?,
            meteor: meteor_exact(candidates, references)?,
            state_accuracy: acc.accuracy,
            mean_state_accuracy: mean,
            confusion: acc.confusion,
            n_pairs: candidates.len(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
