//! Ranking, classification, and generation metrics.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `1 / rank` of the first gold answer, 0 when none is ranked.
pub fn reciprocal_rank(ranked: &[String], gold: &HashSet<String>) -> f64 {
    ranked
        .iter()
        .position(|a| gold.contains(a))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

/// 1 if a gold answer is among the first `k`, else 0.
pub fn hits_at_k(ranked: &[String], gold: &HashSet<String>, k: usize) -> f64 {
    if ranked.iter().take(k).any(|a| gold.contains(a)) {
        1.0
    } else {
        0.0
    }
}

pub fn precision_at_1(ranked: &[String], gold: &HashSet<String>) -> f64 {
    hits_at_k(ranked, gold, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassScores {
    pub class: usize,
    pub support: usize,
    #[serde(flatten)]
    pub prf: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainScores {
    pub per_class: Vec<ClassScores>,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class and macro precision/recall/F1 over every class that occurs in
/// either list. Undefined ratios count as 0.
pub fn domain_prf(predictions: &[usize], golds: &[usize]) -> Result<DomainScores> {
    if predictions.len() != golds.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::invalid("no domain labels to score"));
    }
    let classes: BTreeSet<usize> = predictions.iter().chain(golds).copied().collect();
    let mut per_class = Vec::with_capacity(classes.len());
    for &c in &classes {
        let tp = predictions.iter().zip(golds).filter(|&(&p, &g)| p == c && g == c).count();
        let predicted = predictions.iter().filter(|&&p| p == c).count();
        let support = golds.iter().filter(|&&g| g == c).count();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        per_class.push(ClassScores { class: c, support, prf: Prf { precision, recall, f1: f1(precision, recall) } });
    }
    let n = per_class.len() as f64;
    let macro_avg = Prf {
        precision: per_class.iter().map(|c| c.prf.precision).sum::<f64>() / n,
        recall: per_class.iter().map(|c| c.prf.recall).sum::<f64>() / n,
        f1: per_class.iter().map(|c| c.prf.f1).sum::<f64>() / n,
    };
    Ok(DomainScores { per_class, macro_avg })
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU-4: clipped n-gram precisions for n = 1..4 (add-one
/// smoothing for n ≥ 2), geometric mean, brevity penalty.
pub fn bleu4<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let total: usize = cand.values().sum();
        let matched: usize = cand
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if n == 1 {
            ratio(matched, total)
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln() / 4.0;
    }
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_sum.exp()
}

/// Exact-match unigram METEOR: each candidate token, left to right, aligns
/// to the earliest unused identical reference token.
pub fn meteor_simplified<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    let mut used = vec![false; reference.len()];
    let mut alignment: Vec<(usize, usize)> = Vec::new();
    for (i, c) in candidate.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j].as_ref() == c.as_ref()) {
            used[j] = true;
            alignment.push((i, j));
        }
    }
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let chunks = 1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}
