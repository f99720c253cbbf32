//! Evaluation metrics: ROC AUC, R², MAE and sentence BLEU-4.

use std::collections::HashMap;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no values")]
    Empty,
    #[error("labels contain a single class")]
    OneClassOnly,
    #[error("gold values have zero variance")]
    ZeroVariance,
    #[error("non-finite input")]
    NonFinite,
    #[error("reference set is empty")]
    EmptyRef,
}

fn check_lengths(a: usize, b: usize) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Mann–Whitney AUC, `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`, from mid-ranks.
///
/// Computed from the integer `2U` so that the result is bit-identical to
/// exhaustive pair counting.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check_lengths(scores.len(), labels.len())?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::OneClassOnly);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of the positives, ties at their mid-rank
    let mut twice_rank_sum = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let group_pos = idx[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += group_pos * (i as u64 + 1 + j as u64 + 1);
        i = j + 1;
    }
    let twice_u = twice_rank_sum - pos * (pos + 1);
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

fn check_values(pred: &[f64], gold: &[f64]) -> Result<(), MetricError> {
    check_lengths(pred.len(), gold.len())?;
    if pred.iter().chain(gold).any(|x| !x.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// `1 − Σ(g−p)² / Σ(g−ḡ)²`.
pub fn r2(pred: &[f64], gold: &[f64]) -> Result<f64, MetricError> {
    check_values(pred, gold)?;
    let mean = gold.iter().sum::<f64>() / gold.len() as f64;
    let ss_tot: f64 = gold.iter().map(|g| (g - mean) * (g - mean)).sum();
    if ss_tot == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    let ss_res: f64 = gold.iter().zip(pred).map(|(g, p)| (g - p) * (g - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Mean absolute error.
pub fn mae(pred: &[f64], gold: &[f64]) -> Result<f64, MetricError> {
    check_values(pred, gold)?;
    Ok(gold
        .iter()
        .zip(pred)
        .map(|(g, p)| (g - p).abs())
        .sum::<f64>()
        / gold.len() as f64)
}

fn ngram_counts<'a>(toks: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and candidate n-gram count for order `n`.
fn matches(cand: &[&str], refs: &[Vec<&str>], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
    let matched = c
        .iter()
        .map(|(g, &k)| {
            let max_ref = ref_counts
                .iter()
                .map(|rc| rc.get(g).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            k.min(max_ref)
        })
        .sum();
    (matched, cand.len().saturating_sub(n - 1))
}

/// Sentence BLEU-4 on whitespace tokens, scaled to `[0, 100]`.
///
/// Uniform weights over orders 1–4, clipped counts against the best
/// reference, brevity penalty against the reference closest in length
/// (shorter on ties). Orders 2–4 with no match use `(m+1)/(c+1)`; a
/// candidate with no unigram match scores 0.
pub fn bleu(pred: &str, refs: &[&str]) -> Result<f64, MetricError> {
    if refs.is_empty() {
        return Err(MetricError::EmptyRef);
    }
    let cand: Vec<&str> = pred.split_whitespace().collect();
    let refs: Vec<Vec<&str>> = refs
        .iter()
        .map(|r| r.split_whitespace().collect())
        .collect();
    if cand.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (m, c) = matches(&cand, &refs, n);
        let p = if m > 0 {
            m as f64 / c as f64
        } else if n == 1 {
            return Ok(0.0);
        } else {
            1.0 / (c as f64 + 1.0)
        };
        log_sum += 0.25 * p.ln();
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(c), l))
        .expect("non-empty refs");
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(100.0 * bp * log_sum.exp())
}
