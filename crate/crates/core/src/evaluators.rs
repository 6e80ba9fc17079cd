//! Correctness functionals: exact match, numeric tolerance and Spearman rank
//! correlation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experience::normalize_content;

/// Reference answer: text for match-style evaluators, a score vector for
/// rank correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gold {
    Text(String),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Evaluator {
    ExactMatch,
    NumericTolerance { atol: f64 },
    SpearmanRho,
}

impl Evaluator {
    /// True for evaluators whose scores are in {0, 1}.
    pub fn is_binary(&self) -> bool {
        !matches!(self, Evaluator::SpearmanRho)
    }

    pub fn accepts(&self, gold: &Gold) -> bool {
        match self {
            Evaluator::SpearmanRho => matches!(gold, Gold::Values(v) if v.len() >= 2),
            Evaluator::NumericTolerance { atol } => *atol >= 0.0 && matches!(gold, Gold::Text(_)),
            Evaluator::ExactMatch => matches!(gold, Gold::Text(_)),
        }
    }

    /// Scores an extracted answer. Anything unscorable (type mismatch, parse
    /// failure, undefined correlation) scores 0.
    pub fn score(&self, answer: &str, gold: &Gold) -> f64 {
        match (self, gold) {
            (Evaluator::ExactMatch, Gold::Text(g)) => exact_match(answer, g),
            (Evaluator::NumericTolerance { atol }, Gold::Text(g)) => numeric_match(answer, g, *atol),
            (Evaluator::SpearmanRho, Gold::Values(g)) => match parse_values(answer) {
                Some(p) => spearman_rho(&p, g).unwrap_or(0.0),
                None => 0.0,
            },
            _ => 0.0,
        }
    }
}

pub fn exact_match(pred: &str, gold: &str) -> f64 {
    match (normalize_content(pred), normalize_content(gold)) {
        (Ok(p), Ok(g)) if p == g => 1.0,
        // Two blank strings are identical too.
        (Err(_), Err(_)) => 1.0,
        _ => 0.0,
    }
}

fn parse_real(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn numeric_match(pred: &str, gold: &str, atol: f64) -> f64 {
    match (parse_real(pred), parse_real(gold)) {
        (Some(p), Some(g)) if (p - g).abs() <= atol => 1.0,
        _ => 0.0,
    }
}

/// Parses a list of reals separated by commas, semicolons or whitespace,
/// optionally wrapped in brackets.
pub fn parse_values(text: &str) -> Option<Vec<f64>> {
    let inner = text.trim().trim_start_matches('[').trim_end_matches(']');
    let vals: Option<Vec<f64>> = inner
        .split(|c: char| c == ',' || c == ';' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(parse_real)
        .collect();
    vals.filter(|v| !v.is_empty())
}

#[derive(Debug, Error, PartialEq)]
pub enum SpearmanError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("one input is constant")]
    ZeroVariance,
    #[error("input contains a non-finite value")]
    NonFinite,
}

/// 1-based ranks with ties sharing the average of the positions they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share rank ((i+1)+(j+1))/2
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of the average-rank vectors.
pub fn spearman_rho(preds: &[f64], golds: &[f64]) -> Result<f64, SpearmanError> {
    if preds.len() != golds.len() {
        return Err(SpearmanError::LengthMismatch(preds.len(), golds.len()));
    }
    if preds.len() < 2 {
        return Err(SpearmanError::TooFewPoints(preds.len()));
    }
    if preds.iter().chain(golds).any(|v| !v.is_finite()) {
        return Err(SpearmanError::NonFinite);
    }
    let rx = average_ranks(preds);
    let ry = average_ranks(golds);
    // Ranks average to (n+1)/2 exactly, and centred ranks are multiples of
    // 0.5, so the sums below are exact for any realistic n.
    let mean = (preds.len() + 1) as f64 / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (dx, dy) = (a - mean, b - mean);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(SpearmanError::ZeroVariance);
    }
    let denom = if sxx == syy { sxx } else { (sxx * syy).sqrt() };
    Ok((sxy / denom).clamp(-1.0, 1.0))
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
