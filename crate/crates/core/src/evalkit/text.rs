//! Instruction-similarity metrics over lowercased, punctuation-free
//! whitespace tokens.

use std::collections::HashMap;

use log::warn;

/// Lowercases, strips ASCII punctuation and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .collect::<String>()
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped-count overlap of two multisets of n-grams.
fn clipped_overlap(hyp: &HashMap<&[String], usize>, refs: &HashMap<&[String], usize>) -> usize {
    hyp.iter()
        .map(|(g, c)| (*c).min(refs.get(g).copied().unwrap_or(0)))
        .sum()
}

/// Sentence BLEU with clipped n-gram precisions up to `max_n`, add-one
/// smoothing of zero matches for `n ≥ 2`, and the brevity penalty. Orders
/// longer than the hypothesis are skipped.
pub fn bleu(hypothesis: &[String], reference: &[String], max_n: usize) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        warn!("BLEU of an empty sentence is 0");
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=max_n {
        let h = ngram_counts(hypothesis, n);
        let total: usize = h.values().sum();
        if total == 0 {
            continue;
        }
        let matched = clipped_overlap(&h, &ngram_counts(reference, n));
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln();
        orders += 1;
    }
    let (c, r) = (hypothesis.len() as f64, reference.len() as f64);
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / orders as f64).exp()
}

/// F1 of the clipped unigram multiset intersection.
pub fn rouge1_f1(hypothesis: &[String], reference: &[String]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let overlap = clipped_overlap(&ngram_counts(hypothesis, 1), &ngram_counts(reference, 1)) as f64;
    if overlap == 0.0 {
        return 0.0;
    }
    let p = overlap / hypothesis.len() as f64;
    let r = overlap / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// METEOR with exact-match alignment: each hypothesis token, left to right,
/// takes the leftmost unused identical reference token.
pub fn meteor(hypothesis: &[String], reference: &[String]) -> f64 {
    let mut used = vec![false; reference.len()];
    let mut align: Vec<(usize, usize)> = Vec::new();
    for (i, w) in hypothesis.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *w) {
            used[j] = true;
            align.push((i, j));
        }
    }
    let m = align.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + align
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = m as f64 / hypothesis.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        normalize(s)
    }

    #[test]
    fn bleu_examples() {
        assert!(
            (bleu(
                &t("push the red star left"),
                &t("push the red star left"),
                4
            ) - 1.0)
                .abs()
                < 1e-12
        );
        assert_eq!(bleu(&t("a b c"), &t("d e f"), 4), 0.0);
        let v = bleu(&t("the cat sat"), &t("the cat sat down"), 4);
        assert!((v - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
        assert!((v - 0.7165).abs() < 1e-4);
        assert_eq!(bleu(&[], &t("x"), 4), 0.0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge1_f1(&t("a b c"), &t("a b c")), 1.0);
        assert_eq!(rouge1_f1(&t("a b"), &t("c d")), 0.0);
        assert!((rouge1_f1(&t("move red block"), &t("push red block")) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn meteor_examples() {
        assert_eq!(meteor(&t("a b"), &t("c d")), 0.0);
        assert!((meteor(&t("a b c d e"), &t("a b c d e")) - 0.996).abs() < 1e-12);
        assert!((meteor(&t("a x"), &t("a y")) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn normalization_strips_punctuation_and_case() {
        assert_eq!(
            normalize("Push the Red star, left."),
            vec!["push", "the", "red", "star", "left"]
        );
    }
}
