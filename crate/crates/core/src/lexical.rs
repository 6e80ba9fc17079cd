//! Token-level lexical similarity shared by the updater shortlist and the
//! fallback retrieval scorer.

use std::collections::BTreeSet;

/// Lowercased, whitespace-separated token set.
pub fn token_set(text: &str) -> BTreeSet<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Jaccard index of two token sets. Two empty sets score 0.
pub fn jaccard_sets(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

pub fn jaccard(a: &str, b: &str) -> f64 {
    jaccard_sets(&token_set(a), &token_set(b))
}
