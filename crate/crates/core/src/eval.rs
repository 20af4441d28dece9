//! Corpus BLEU, ZP prediction precision/recall/F1 and the paired sign test.

use std::collections::HashMap;

use crate::corpus::{ZpLabelSequence, NO_ZP};
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Corpus-level BLEU with its sufficient statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Bleu {
    /// In `[0, 100]`.
    pub score: f64,
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl Bleu {
    pub fn precision(&self, order: usize) -> f64 {
        let n = order - 1;
        if self.totals[n] == 0 {
            0.0
        } else {
            self.matches[n] as f64 / self.totals[n] as f64
        }
    }
}

fn fold<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens.iter().map(|t| t.as_ref().to_lowercase()).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in tokens.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Clipped n-gram matches and hypothesis n-gram totals for one pair.
fn sentence_stats(
    hyp: &[String],
    reference: &[String],
) -> ([usize; MAX_ORDER], [usize; MAX_ORDER]) {
    let mut matches = [0; MAX_ORDER];
    let mut totals = [0; MAX_ORDER];
    for n in 1..=MAX_ORDER {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        matches[n - 1] = h
            .iter()
            .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
            .sum();
        totals[n - 1] = hyp.len().saturating_sub(n - 1);
    }
    (matches, totals)
}

fn brevity(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    }
}

/// Case-insensitive corpus BLEU-4, one reference per line, no smoothing: any
/// order without matches gives 0.
pub fn bleu<S: AsRef<str>, T: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<T>]) -> Result<Bleu> {
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "BLEU needs one reference per hypothesis: {} hypotheses, {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut matches = [0; MAX_ORDER];
    let mut totals = [0; MAX_ORDER];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hyps.iter().zip(refs) {
        let (h, rf) = (fold(h), fold(rf));
        let (m, t) = sentence_stats(&h, &rf);
        for n in 0..MAX_ORDER {
            matches[n] += m[n];
            totals[n] += t[n];
        }
        c += h.len();
        r += rf.len();
    }
    let bp = brevity(c, r);
    let score = if matches.contains(&0) {
        0.0
    } else {
        let log_mean = (0..MAX_ORDER)
            .map(|n| (matches[n] as f64 / totals[n] as f64).ln())
            .sum::<f64>()
            / MAX_ORDER as f64;
        100.0 * bp * log_mean.exp()
    };
    Ok(Bleu {
        score,
        matches,
        totals,
        brevity_penalty: bp,
        hyp_len: c,
        ref_len: r,
    })
}

/// Sentence BLEU with add-one smoothing on orders 2–4, in `[0, 100]`.
pub fn sentence_bleu<S: AsRef<str>, T: AsRef<str>>(hyp: &[S], reference: &[T]) -> f64 {
    let (h, r) = (fold(hyp), fold(reference));
    let (m, t) = sentence_stats(&h, &r);
    if m[0] == 0 {
        return 0.0;
    }
    let log_mean = (0..MAX_ORDER)
        .map(|n| {
            let (m, t) = if n == 0 {
                (m[n] as f64, t[n] as f64)
            } else {
                (m[n] as f64 + 1.0, t[n] as f64 + 1.0)
            };
            (m / t).ln()
        })
        .sum::<f64>()
        / MAX_ORDER as f64;
    100.0 * brevity(h.len(), r.len()) * log_mean.exp()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(matched: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (p, r) = (ratio(matched, predicted), ratio(matched, gold));
        let f1 = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        Self {
            matched,
            predicted,
            gold,
            precision: p,
            recall: r,
            f1,
        }
    }
}

/// ZP scores at the two granularities.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ZpScores {
    /// Slot must match; the pronoun is ignored.
    pub position: Prf,
    /// Slot and pronoun must both match.
    pub word: Prf,
}

/// Scores predicted ZPs against gold. Every slot (including the final
/// end-of-sentence slot) counts alike.
pub fn zp_prf(pred: &[ZpLabelSequence], gold: &[ZpLabelSequence]) -> Result<ZpScores> {
    zp_prf_where(pred, gold, |_, _| true)
}

/// Like [`zp_prf`], restricted to the `(line, slot)` pairs accepted by
/// `keep` on both the predicted and the gold side.
pub fn zp_prf_where(
    pred: &[ZpLabelSequence],
    gold: &[ZpLabelSequence],
    keep: impl Fn(usize, usize) -> bool,
) -> Result<ZpScores> {
    if pred.len() != gold.len() {
        return Err(Error::contract(format!(
            "{} predicted label lines vs {} gold lines",
            pred.len(),
            gold.len()
        )));
    }
    let (mut pos, mut word, mut np, mut ng) = (0, 0, 0, 0);
    for (line, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::contract(format!(
                "line {}: {} predicted labels vs {} gold labels",
                line + 1,
                p.len(),
                g.len()
            )));
        }
        for (slot, (a, b)) in p.0.iter().zip(&g.0).enumerate() {
            if !keep(line, slot) {
                continue;
            }
            let (pa, gb) = (a != NO_ZP, b != NO_ZP);
            np += pa as usize;
            ng += gb as usize;
            if pa && gb {
                pos += 1;
                word += (a == b) as usize;
            }
        }
    }
    Ok(ZpScores {
        position: Prf::from_counts(pos, np, ng),
        word: Prf::from_counts(word, np, ng),
    })
}

/// Outcome of a paired sign test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

/// `log C(n, k)`.
fn ln_choose(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k)
        .map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln())
        .sum()
}

fn normal_cdf(z: f64) -> f64 {
    // Abramowitz–Stegun 7.1.26 erfc approximation, |error| < 1.5e-7.
    let x = z.abs() / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erfc = poly * (-x * x).exp();
    if z >= 0.0 {
        1.0 - 0.5 * erfc
    } else {
        0.5 * erfc
    }
}

/// Two-sided sign test on per-item scores; ties are dropped. Exact binomial
/// tail up to 1000 non-tied items, continuity-corrected normal beyond.
pub fn sign_test(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "sign test needs paired scores: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let ties = a.len() - wins - losses;
    let n = wins + losses;
    let k = wins.min(losses);
    let p = if n == 0 {
        1.0
    } else if n <= 1000 {
        let half = n as f64 * 0.5f64.ln();
        let tail: f64 = (0..=k).map(|i| (ln_choose(n, i) + half).exp()).sum();
        (2.0 * tail).min(1.0)
    } else {
        let z = (k as f64 + 0.5 - n as f64 / 2.0) / (n as f64 / 4.0).sqrt();
        (2.0 * normal_cdf(z)).min(1.0)
    };
    Ok(SignTest {
        wins,
        losses,
        ties,
        p_value: p,
    })
}
