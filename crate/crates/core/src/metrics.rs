//! Reward and evaluation metrics: smoothed sentence BLEU, corpus BLEU,
//! ROUGE-L, normalized corpus-level multimodality, oracle BLEU, and the
//! synthetic-task modality metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus_bleu: f64,
    pub ncm: f64,
    pub oracle_bleu: f64,
    pub exact_valid_match_rate: f64,
    pub multi_ref_bleu: f64,
}

fn ngram_counts(tokens: &[u32], order: usize) -> HashMap<&[u32], u64> {
    let mut map: HashMap<&[u32], u64> = HashMap::new();
    if tokens.len() >= order {
        for gram in tokens.windows(order) {
            *map.entry(gram).or_insert(0) += 1;
        }
    }
    map
}

/// Clipped match count and total count for one order.
fn clipped_matches(hyp: &[u32], reference: &[u32], order: usize) -> (u64, u64) {
    let total = hyp.len().saturating_sub(order - 1) as u64;
    if total == 0 {
        return (0, 0);
    }
    let ref_counts = ngram_counts(reference, order);
    let hyp_counts = ngram_counts(hyp, order);
    let mut matched = 0;
    for (gram, &count) in &hyp_counts {
        let cap = ref_counts.get(gram).copied().unwrap_or(0);
        matched += count.min(cap);
    }
    (matched, total)
}

fn brevity_penalty(hyp_len: u64, ref_len: u64) -> f64 {
    if hyp_len >= ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Smoothed sentence-level BLEU-4 in [0, 1].
///
/// Zero clipped counts at order k are replaced by 1/(2^j * |hyp|) where j
/// counts the zero orders seen before k; orders the hypothesis is too short
/// to produce count as zero-match orders.
pub fn sentence_bleu(hyp: &[u32], reference: &[u32]) -> f64 {
    if reference.is_empty() {
        return 0.0;
    }
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_prec_sum = 0.0;
    let mut zeros_before = 0u32;
    for order in 1..=MAX_ORDER {
        let (matched, total) = clipped_matches(hyp, reference, order);
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else {
            let smoothed = 1.0 / (f64::powi(2.0, zeros_before as i32) * hyp.len() as f64);
            zeros_before += 1;
            smoothed.min(1.0)
        };
        log_prec_sum += p.ln();
    }
    let bp = brevity_penalty(hyp.len() as u64, reference.len() as u64);
    bp * (log_prec_sum / MAX_ORDER as f64).exp()
}

/// Corpus BLEU-4: clipped counts pooled across the corpus before combining.
/// No smoothing; any order with zero pooled matches gives 0.
pub fn corpus_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Metric(format!(
            "corpus_bleu: {} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Metric("corpus_bleu: empty corpus".into()));
    }
    let mut matched = [0u64; MAX_ORDER];
    let mut total = [0u64; MAX_ORDER];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len() as u64;
        ref_len += r.len() as u64;
        for order in 1..=MAX_ORDER {
            let (m, t) = clipped_matches(h, r, order);
            matched[order - 1] += m;
            total[order - 1] += t;
        }
    }
    let mut log_prec_sum = 0.0;
    for order in 0..MAX_ORDER {
        if matched[order] == 0 || total[order] == 0 {
            return Ok(0.0);
        }
        log_prec_sum += (matched[order] as f64 / total[order] as f64).ln();
    }
    Ok(brevity_penalty(hyp_len, ref_len) * (log_prec_sum / MAX_ORDER as f64).exp())
}

/// Longest-common-subsequence length.
fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
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

/// ROUGE-L as the symmetric LCS F1.
pub fn rouge_l(hyp: &[u32], reference: &[u32]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(hyp, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hyp.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Normalized corpus-level multimodality: mean NLL divided by mean
/// reference length (ratio of expectations, not mean of ratios).
pub fn ncm(nlls: &[f64], ref_lens: &[usize]) -> Result<f64> {
    if nlls.is_empty() || nlls.len() != ref_lens.len() {
        return Err(Error::Metric(format!(
            "ncm: {} NLLs vs {} lengths",
            nlls.len(),
            ref_lens.len()
        )));
    }
    if ref_lens.iter().any(|&l| l == 0) {
        return Err(Error::Metric("ncm: zero reference length".into()));
    }
    let nll_sum: f64 = nlls.iter().sum();
    let len_sum: usize = ref_lens.iter().sum();
    Ok(nll_sum / len_sum as f64)
}

/// Mean over inputs of the best sentence BLEU among that input's samples.
pub fn oracle_bleu(samples: &[Vec<Vec<u32>>], refs: &[Vec<u32>]) -> Result<f64> {
    if samples.len() != refs.len() {
        return Err(Error::Metric(format!(
            "oracle_bleu: {} sample sets vs {} references",
            samples.len(),
            refs.len()
        )));
    }
    if samples.is_empty() {
        return Err(Error::Metric("oracle_bleu: empty corpus".into()));
    }
    let mut sum = 0.0;
    for (set, r) in samples.iter().zip(refs) {
        let best = set
            .iter()
            .map(|h| sentence_bleu(h, r))
            .fold(0.0f64, f64::max);
        sum += best;
    }
    Ok(sum / samples.len() as f64)
}

/// Synthetic-task modality metrics: the fraction of outputs exactly equal
/// to some valid target, and corpus BLEU against the nearest valid target.
pub fn modality_metrics(outputs: &[Vec<u32>], valid: &[Vec<Vec<u32>>]) -> Result<(f64, f64)> {
    if outputs.len() != valid.len() {
        return Err(Error::Metric(format!(
            "modality_metrics: {} outputs vs {} target sets",
            outputs.len(),
            valid.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::Metric("modality_metrics: empty corpus".into()));
    }
    if valid.iter().any(|set| set.is_empty()) {
        return Err(Error::Metric("modality_metrics: input with no valid target".into()));
    }
    let mut matches = 0usize;
    let mut nearest: Vec<Vec<u32>> = Vec::with_capacity(outputs.len());
    for (out, set) in outputs.iter().zip(valid) {
        if set.iter().any(|t| t == out) {
            matches += 1;
        }
        let best = set
            .iter()
            .max_by(|a, b| {
                sentence_bleu(out, a)
                    .partial_cmp(&sentence_bleu(out, b))
                    .unwrap()
            })
            .unwrap()
            .clone();
        nearest.push(best);
    }
    let rate = matches as f64 / outputs.len() as f64;
    let bleu = corpus_bleu(outputs, &nearest)?;
    Ok((rate, bleu))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_exact_match_is_one() {
        let s: Vec<u32> = vec![5, 6, 7, 8, 9];
        assert!((sentence_bleu(&s, &s) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_brevity_penalty_applies() {
        // hypothesis is the first half of the reference: all n-gram
        // precisions are 1, so the score is exactly the brevity penalty
        let reference: Vec<u32> = (10..20).collect();
        let hyp: Vec<u32> = (10..15).collect();
        let got = sentence_bleu(&hyp, &reference);
        let bp = (1.0f64 - 10.0 / 5.0).exp();
        assert!((got - bp).abs() < 1e-12, "{got} vs {bp}");
    }

    #[test]
    fn bleu_disjoint_is_small_but_positive() {
        let hyp: Vec<u32> = (0..10).collect();
        let reference: Vec<u32> = (20..30).collect();
        let got = sentence_bleu(&hyp, &reference);
        assert!(got > 0.0 && got < 0.05, "smoothed disjoint BLEU = {got}");
    }

    #[test]
    fn bleu_two_substitutions_matches_hand_counts() {
        // len-10 pair with substitutions at indices 3 and 7 leaves clean
        // runs of lengths 3, 3, 2: 1-gram 8/10, 2-gram 5/9, 3-gram 2/8,
        // 4-gram 0/7 smoothed to 1/(2^0 * 10)
        let reference: Vec<u32> = (10..20).collect();
        let mut hyp = reference.clone();
        hyp[3] = 99;
        hyp[7] = 98;
        let expect = ((8.0f64 / 10.0).ln()
            + (5.0f64 / 9.0).ln()
            + (2.0f64 / 8.0).ln()
            + (1.0f64 / 10.0).ln())
            / 4.0;
        let got = sentence_bleu(&hyp, &reference);
        assert!((got - expect.exp()).abs() < 1e-12, "{got}");
    }

    #[test]
    fn bleu_empty_hypothesis_is_zero() {
        assert_eq!(sentence_bleu(&[], &[1, 2, 3]), 0.0);
    }

    #[test]
    fn bleu_asymmetric_but_one_iff_equal() {
        let a: Vec<u32> = vec![4, 5, 6, 7, 8];
        let b: Vec<u32> = vec![4, 5, 6];
        assert_ne!(sentence_bleu(&a, &b), sentence_bleu(&b, &a));
        assert!(sentence_bleu(&a, &b) < 1.0);
        assert!((sentence_bleu(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corpus_bleu_pools_counts() {
        let h1: Vec<u32> = (0..6).collect();
        let r1 = h1.clone();
        let h2: Vec<u32> = (10..16).collect();
        let r2: Vec<u32> = (10..16).rev().collect();
        // single-pair corpus equals unsmoothed sentence BLEU when all
        // orders are nonzero
        let single = corpus_bleu(&[h1.clone()], &[r1.clone()]).unwrap();
        assert!((single - 1.0).abs() < 1e-12);
        // concatenation invariance: merged corpus equals pooled counts
        let merged = corpus_bleu(&[h1.clone(), h2.clone()], &[r1.clone(), r2.clone()]).unwrap();
        let mut matched = [0u64; 4];
        let mut total = [0u64; 4];
        for (h, r) in [(&h1, &r1), (&h2, &r2)] {
            for order in 1..=4 {
                let (m, t) = clipped_matches(h, r, order);
                matched[order - 1] += m;
                total[order - 1] += t;
            }
        }
        let mut log_sum = 0.0;
        for k in 0..4 {
            log_sum += (matched[k] as f64 / total[k] as f64).ln();
        }
        assert!((merged - (log_sum / 4.0).exp()).abs() < 1e-12);
        assert!(corpus_bleu(&[h1], &[]).is_err());
    }

    #[test]
    fn rouge_l_cases() {
        let abc = vec![1u32, 2, 3];
        let acb = vec![1u32, 3, 2];
        assert!((rouge_l(&abc, &abc) - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l(&[1, 2], &[3, 4]), 0.0);
        // LCS(abc, acb) = 2 -> P = R = 2/3 -> F1 = 2/3
        assert!((rouge_l(&abc, &acb) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ncm_is_ratio_of_means() {
        assert!((ncm(&[4.0], &[8]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(ncm(&[0.0, 0.0], &[3, 9]).unwrap(), 0.0);
        assert!((ncm(&[2.0, 4.0], &[4, 8]).unwrap() - 0.5).abs() < 1e-12);
        // distinguishes ratio-of-means from mean-of-ratios
        assert!((ncm(&[2.0, 4.0], &[2, 8]).unwrap() - 0.6).abs() < 1e-12);
        assert!(ncm(&[], &[]).is_err());
        // duplication invariance
        let a = ncm(&[1.0, 3.0], &[5, 7]).unwrap();
        let b = ncm(&[1.0, 3.0, 1.0, 3.0], &[5, 7, 5, 7]).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn oracle_bleu_cases() {
        let r: Vec<u32> = (0..6).collect();
        let far: Vec<u32> = (20..26).collect();
        // K=1 reduces to mean sentence BLEU
        let k1 = oracle_bleu(&[vec![far.clone()]], &[r.clone()]).unwrap();
        assert!((k1 - sentence_bleu(&far, &r)).abs() < 1e-12);
        // reference inside the sample set contributes 1.0
        let with_ref = oracle_bleu(&[vec![far.clone(), r.clone()]], &[r.clone()]).unwrap();
        assert!((with_ref - 1.0).abs() < 1e-12);
        // nondecreasing in K (prefix property)
        let sets = vec![far.clone(), vec![0, 1, 2, 9, 9, 9], r.clone()];
        let mut last = 0.0;
        for k in 1..=3 {
            let v = oracle_bleu(&[sets[..k].to_vec()], &[r.clone()]).unwrap();
            assert!(v >= last - 1e-15);
            last = v;
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bleu_bounded_and_pure(
                hyp in proptest::collection::vec(0u32..12, 1..12),
                reference in proptest::collection::vec(0u32..12, 1..12),
            ) {
                let a = sentence_bleu(&hyp, &reference);
                prop_assert!((0.0..=1.0).contains(&a));
                // pure function: identical inputs, bitwise-identical output
                prop_assert_eq!(a.to_bits(), sentence_bleu(&hyp, &reference).to_bits());
                if hyp == reference {
                    prop_assert!((a - 1.0).abs() < 1e-12);
                } else {
                    prop_assert!(a < 1.0);
                }
            }

            #[test]
            fn rouge_bounded(
                hyp in proptest::collection::vec(0u32..8, 1..10),
                reference in proptest::collection::vec(0u32..8, 1..10),
            ) {
                let r = rouge_l(&hyp, &reference);
                prop_assert!((0.0..=1.0).contains(&r));
            }
        }
    }

    #[test]
    fn modality_metrics_cases() {
        let t1: Vec<u32> = vec![4, 5, 6, 7];
        let t2: Vec<u32> = vec![7, 6, 5, 4];
        let valid = vec![vec![t1.clone(), t2.clone()]];
        // exact valid output counts as a match
        let (rate, _) = modality_metrics(&[t2.clone()], &valid).unwrap();
        assert!((rate - 1.0).abs() < 1e-12);
        // splicing halves of two valid targets is not a match
        let spliced = vec![4u32, 5, 5, 4];
        let (rate2, bleu2) = modality_metrics(&[spliced], &valid).unwrap();
        assert_eq!(rate2, 0.0);
        assert!(bleu2 < 1.0);
    }
}
