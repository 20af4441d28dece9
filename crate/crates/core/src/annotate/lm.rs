//! Interpolated n-gram language model.
//!
//! `P(w | h) = Σ_k λ_k P_k(w | h_{k−1})` where `P_1` is an add-δ unigram and
//! `P_k` (k > 1) is the maximum-likelihood estimate given the last `k−1`
//! words, falling back to `P_{k−1}` when that context was never seen. Each
//! `P_k` is a distribution, so the mixture is too.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDAS: [f64; 3] = [0.1, 0.3, 0.6];
pub const DEFAULT_FLOOR: f64 = 0.01;
const BOS: &str = "<s>";
const EOS: &str = "</s>";
const UNK: &str = "<unk>";

#[derive(Clone, Debug)]
pub struct NGramLm {
    order: usize,
    lambdas: Vec<f64>,
    floor: f64,
    ids: HashMap<String, u32>,
    /// `counts[k-1]`: k-gram → count
    counts: Vec<HashMap<Vec<u32>, f64>>,
    /// `contexts[k-1]`: (k−1)-word history → total continuations
    contexts: Vec<HashMap<Vec<u32>, f64>>,
    total: f64,
}

impl NGramLm {
    pub fn train<S: AsRef<str>>(sentences: &[Vec<S>], lambdas: &[f64], floor: f64) -> Result<Self> {
        let order = lambdas.len();
        if order == 0
            || lambdas.iter().any(|&l| l < 0.0)
            || (lambdas.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::contract(format!(
                "interpolation weights must be non-negative and sum to 1: {lambdas:?}"
            )));
        }
        if floor <= 0.0 {
            return Err(Error::contract("unigram floor must be positive"));
        }
        if sentences.is_empty() {
            return Err(Error::contract("language model needs training text"));
        }
        let mut ids: HashMap<String, u32> = HashMap::new();
        for w in [BOS, EOS, UNK] {
            let n = ids.len() as u32;
            ids.insert(w.to_string(), n);
        }
        let mut counts = vec![HashMap::new(); order];
        let mut contexts = vec![HashMap::new(); order];
        let mut total = 0.0;
        for s in sentences {
            let mut seq = vec![ids[BOS]; order - 1];
            for w in s {
                let n = ids.len() as u32;
                seq.push(*ids.entry(w.as_ref().to_string()).or_insert(n));
            }
            seq.push(ids[EOS]);
            for i in order - 1..seq.len() {
                total += 1.0;
                for k in 1..=order {
                    let gram = &seq[i + 1 - k..=i];
                    *counts[k - 1].entry(gram.to_vec()).or_insert(0.0) += 1.0;
                    *contexts[k - 1].entry(gram[..k - 1].to_vec()).or_insert(0.0) += 1.0;
                }
            }
        }
        Ok(Self {
            order,
            lambdas: lambdas.to_vec(),
            floor,
            ids,
            counts,
            contexts,
            total,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Outcomes that can be predicted: every known word, `</s>` and `<unk>`.
    pub fn outcomes(&self) -> impl Iterator<Item = &str> {
        self.ids.keys().map(String::as_str).filter(|w| *w != BOS)
    }

    fn id(&self, w: &str) -> u32 {
        self.ids.get(w).copied().unwrap_or(self.ids[UNK])
    }

    fn unigram(&self, w: u32) -> f64 {
        let c = self.counts[0].get(&vec![w]).copied().unwrap_or(0.0);
        let v = (self.ids.len() - 1) as f64;
        (c + self.floor) / (self.total + self.floor * v)
    }

    fn prob_ids(&self, history: &[u32], w: u32) -> f64 {
        let mut p_k = self.unigram(w);
        let mut p = self.lambdas[0] * p_k;
        for k in 2..=self.order {
            let h = &history[history.len() + 1 - k..];
            if let Some(&c) = self.contexts[k - 1].get(h) {
                let mut gram = h.to_vec();
                gram.push(w);
                p_k = self.counts[k - 1].get(&gram).copied().unwrap_or(0.0) / c;
            }
            p += self.lambdas[k - 1] * p_k;
        }
        p
    }

    /// `P(w | history)`; history is padded with sentence-begin markers.
    pub fn prob<S: AsRef<str>>(&self, history: &[S], w: &str) -> f64 {
        let mut h = vec![self.ids[BOS]; self.order - 1];
        h.extend(history.iter().map(|x| self.id(x.as_ref())));
        self.prob_ids(&h, self.id(w))
    }

    /// Natural-log probability of a sentence including `</s>`.
    pub fn log_prob<S: AsRef<str>>(&self, sentence: &[S]) -> f64 {
        let mut seq = vec![self.ids[BOS]; self.order - 1];
        seq.extend(sentence.iter().map(|w| self.id(w.as_ref())));
        seq.push(self.ids[EOS]);
        (self.order - 1..seq.len())
            .map(|i| self.prob_ids(&seq[..i], seq[i]).ln())
            .sum()
    }

    /// `exp(−log P / (len + 1))`.
    pub fn perplexity<S: AsRef<str>>(&self, sentence: &[S]) -> f64 {
        (-self.log_prob(sentence) / (sentence.len() + 1) as f64).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<Vec<&'static str>> {
        vec![vec!["a", "b", "c"], vec!["a", "b", "b"], vec!["c", "a"]]
    }

    #[test]
    fn continuations_sum_to_one() {
        let lm = NGramLm::train(&corpus(), &DEFAULT_LAMBDAS, DEFAULT_FLOOR).unwrap();
        for h in [
            vec![],
            vec!["a"],
            vec!["a", "b"],
            vec!["zz", "c"],
            vec!["b", "b"],
        ] {
            let s: f64 = lm.outcomes().map(|w| lm.prob(&h, w)).sum();
            assert!((s - 1.0).abs() < 1e-9, "{h:?}: {s}");
        }
    }

    #[test]
    fn seen_beats_unseen() {
        let lm = NGramLm::train(&corpus(), &DEFAULT_LAMBDAS, DEFAULT_FLOOR).unwrap();
        assert!(lm.perplexity(&["a", "b", "c"]) < lm.perplexity(&["c", "b", "a"]));
    }

    #[test]
    fn unigram_model_matches_counts() {
        // 8 events: a×3, b×3, c×2... plus </s>×3 = 11 with floor 0.01 over 5 outcomes
        let lm = NGramLm::train(&corpus(), &[1.0], 0.01).unwrap();
        let p = lm.prob::<&str>(&[], "a");
        assert!((p - (3.0 + 0.01) / (11.0 + 0.05)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(NGramLm::train(&corpus(), &[0.5, 0.4], 0.01).is_err());
        assert!(NGramLm::train(&corpus(), &[1.0], 0.0).is_err());
    }
}
