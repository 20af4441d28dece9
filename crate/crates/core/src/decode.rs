//! Beam search, reconstruction re-scoring and test-time ZP labeling.
//!
//! Decoding sees only the source sentence and its preceding source
//! sentences; [`SourceSentence`] has no room for targets or labels.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::corpus::{Document, Padded, Vocab, BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::model::{DiscourseTarget, EncoderStates, Model};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Hypotheses stop after `ceil(max_ratio · |x|)` tokens.
    pub max_ratio: f64,
    /// Weight of the per-token reconstruction score; 0 disables re-scoring.
    pub beta: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 4,
            max_ratio: 2.0,
            beta: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::contract("beam size must be at least 1"));
        }
        if self.max_ratio.is_nan() || self.max_ratio <= 0.0 || !self.beta.is_finite() {
            return Err(Error::contract(format!(
                "bad decode settings: max_ratio {}, beta {}",
                self.max_ratio, self.beta
            )));
        }
        Ok(())
    }
}

/// A source sentence (ids ending in end-of-sentence) with its preceding
/// source sentences, oldest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceSentence {
    pub x: Vec<usize>,
    pub context: Vec<Vec<usize>>,
}

/// Encodes every sentence of source documents, each with up to `k`
/// predecessors from the same document. Targets and labels are ignored.
pub fn sources(docs: &[Document], vocab: &Vocab, k: usize) -> Vec<SourceSentence> {
    let mut out = Vec::new();
    for doc in docs {
        let xs: Vec<Vec<usize>> = doc.src.iter().map(|s| vocab.encode_sentence(s)).collect();
        for i in 0..xs.len() {
            out.push(SourceSentence {
                x: xs[i].clone(),
                context: xs[i.saturating_sub(k)..i].to_vec(),
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, ending in end-of-sentence unless cut at the length limit.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub rec_score: Option<f64>,
    /// Ranking score: normalized log-likelihood, plus `β·rec_score/|x|` when
    /// re-scored.
    pub score: f64,
}

impl Hypothesis {
    pub fn normalized(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }

    /// Tokens without the end-of-sentence marker.
    pub fn words(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn log_softmax_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| {
            let row = t.row_slice(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lz = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            row.iter().map(|v| v - lz).collect()
        })
        .collect()
}

fn single(ids: &[usize]) -> Padded {
    Padded::new(&[ids])
}

/// `C` for one sentence, or `None` when the model has no discourse encoder.
fn context_vector(
    tape: &Tape,
    model: &Model,
    context: &[Vec<usize>],
    batch: usize,
) -> Result<Option<Var>> {
    if !model.config.use_discourse {
        return Ok(None);
    }
    let k = model.config.k;
    let used = &context[context.len().saturating_sub(k)..];
    let slots: Vec<Padded> = used
        .iter()
        .map(|s| Padded::new(&vec![s.as_slice(); batch]))
        .collect();
    let mask = vec![1.0; used.len() * batch];
    Ok(Some(model.encode_discourse(tape, &slots, &mask, batch)?))
}

fn decoder_uses_context(model: &Model) -> bool {
    model.config.use_discourse && model.config.discourse_target == DiscourseTarget::Decoder
}

/// Encoder states of one sentence replicated for `k` beam rows.
struct Expanded {
    enc: EncoderStates,
    keys: Var,
}

fn expand(tape: &Tape, enc: &EncoderStates, keys: Var, k: usize) -> Result<Expanded> {
    let rows: Vec<usize> = (0..enc.steps)
        .flat_map(|t| std::iter::repeat_n(t, k))
        .collect();
    let mask: Vec<f64> = (0..k).flat_map(|_| enc.mask.iter().copied()).collect();
    Ok(Expanded {
        enc: EncoderStates {
            states: tape.gather(enc.states, &rows)?,
            last_fwd: tape.gather(enc.last_fwd, &vec![0; k])?,
            first_bwd: tape.gather(enc.first_bwd, &vec![0; k])?,
            steps: enc.steps,
            batch: k,
            mask,
        },
        keys: tape.gather(keys, &rows)?,
    })
}

fn generatable(token: usize) -> bool {
    !matches!(token, PAD | UNK | BOS)
}

/// N-best list ranked by length-normalized log-likelihood. Each step keeps
/// the `beam` best extensions by cumulative log-probability; those ending in
/// end-of-sentence (or reaching the length limit) are set aside as finished.
pub fn beam_search(
    model: &Model,
    src: &SourceSentence,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let tape = Tape::new();
    let enc = model.encode(&tape, &single(&src.x))?;
    let ctx = if decoder_uses_context(model) {
        context_vector(&tape, model, &src.context, 1)?
    } else {
        None
    };
    let keys = model.decoder_keys(&tape, &enc)?;
    let max_len = ((cfg.max_ratio * src.x.len() as f64).ceil() as usize).max(1);

    let mut state = model.decoder_init(&tape, &enc, ctx)?;
    // (tokens, log-prob) per live row
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut cache: HashMap<usize, Expanded> = HashMap::new();
    for step in 0..max_len {
        let k = live.len();
        if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(k) {
            e.insert(expand(&tape, &enc, keys, k)?);
        }
        let ex = &cache[&k];
        let prev: Vec<usize> = live
            .iter()
            .map(|(t, _)| t.last().copied().unwrap_or(BOS))
            .collect();
        let out = model.decoder_step(&tape, &ex.enc, ex.keys, state, &prev)?;
        let logp = log_softmax_rows(&tape.value(out.logits));
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(k * logp[0].len());
        for (i, row) in logp.iter().enumerate() {
            for (w, &lp) in row.iter().enumerate() {
                if generatable(w) {
                    cands.push((live[i].1 + lp, i, w));
                }
            }
        }
        // descending score; ties go to the earlier row, then the lower id
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(cfg.beam);
        let last = step + 1 == max_len;
        let mut next = Vec::new();
        let mut parents = Vec::new();
        for (lp, i, w) in cands {
            let mut tokens = live[i].0.clone();
            tokens.push(w);
            if w == EOS || last {
                let h = Hypothesis {
                    tokens,
                    log_prob: lp,
                    rec_score: None,
                    score: 0.0,
                };
                finished.push(Hypothesis {
                    score: h.normalized(),
                    ..h
                });
            } else {
                next.push((tokens, lp));
                parents.push(i);
            }
        }
        if next.is_empty() {
            break;
        }
        state = tape.gather(out.state, &parents)?;
        live = next;
    }
    finished.sort_by(|a, b| b.score.total_cmp(&a.score));
    finished.truncate(cfg.beam);
    Ok(finished)
}

/// Reconstruction log-score of `x` and the argmax ZP labels for each
/// candidate translation. The score adds the log-probability of the argmax
/// label at every position when the model has a labeler.
fn reconstruct_candidates(
    model: &Model,
    src: &SourceSentence,
    cands: &[&[usize]],
) -> Result<Vec<(f64, Option<Vec<usize>>)>> {
    if !model.has_reconstructor() {
        return Err(Error::contract(
            "re-scoring and ZP labeling need a model with a reconstructor",
        ));
    }
    let n = cands.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let tape = Tape::new();
    let x = Padded::new(&vec![src.x.as_slice(); n]);
    let y = Padded::new(cands);
    let ctx = context_vector(&tape, model, &src.context, n)?;
    let enc = model.encode(&tape, &x)?;
    let dec_ctx = if decoder_uses_context(model) {
        ctx
    } else {
        None
    };
    let (dec, _) = model.force_decode(&tape, &enc, &y, dec_ctx)?;
    let rec = model.reconstruct(&tape, &x, &enc, &dec, ctx)?;
    let rec_lp = log_softmax_rows(&tape.value(rec.logits));
    let label_lp = if model.has_labeler() {
        Some(log_softmax_rows(
            &tape.value(model.label_logits(&tape, &rec)?),
        ))
    } else {
        None
    };
    let steps = src.x.len();
    Ok((0..n)
        .map(|b| {
            let mut score = 0.0;
            let mut labels = label_lp.as_ref().map(|_| Vec::with_capacity(steps));
            for t in 0..steps {
                let row = t * n + b;
                score += rec_lp[row][src.x[t]];
                if let (Some(lp), Some(out)) = (&label_lp, labels.as_mut()) {
                    let r = &lp[row];
                    // first label wins ties
                    let best = (1..r.len()).fold(0, |m, j| if r[j] > r[m] { j } else { m });
                    score += r[best];
                    out.push(best);
                }
            }
            (score, labels)
        })
        .collect())
}

/// Re-ranks an N-best list by `normalized log-likelihood + β·rec/|x|`.
pub fn rescore(
    model: &Model,
    src: &SourceSentence,
    hyps: &[Hypothesis],
    beta: f64,
) -> Result<Vec<Hypothesis>> {
    let cands: Vec<&[usize]> = hyps.iter().map(|h| h.tokens.as_slice()).collect();
    let scores = reconstruct_candidates(model, src, &cands)?;
    let norm = src.x.len() as f64;
    let mut out: Vec<Hypothesis> = hyps
        .iter()
        .zip(scores)
        .map(|(h, (r, _))| Hypothesis {
            rec_score: Some(r),
            score: h.normalized() + beta * r / norm,
            ..h.clone()
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

/// Per-position argmax ZP label ids given a translation of `src`.
pub fn predict_labels(
    model: &Model,
    src: &SourceSentence,
    translation: &[usize],
) -> Result<Vec<usize>> {
    if !model.has_labeler() {
        return Err(Error::contract("model has no ZP labeler"));
    }
    let (_, labels) = reconstruct_candidates(model, src, &[translation])?.remove(0);
    Ok(labels.expect("labeler present"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub best: Hypothesis,
    /// Label ids (one per source id) when the model has a labeler.
    pub labels: Option<Vec<usize>>,
}

/// Beam search, optional re-scoring, then ZP labels from the top hypothesis.
pub fn translate(model: &Model, src: &SourceSentence, cfg: &DecodeConfig) -> Result<Translation> {
    let mut hyps = beam_search(model, src, cfg)?;
    if cfg.beta != 0.0 && model.has_reconstructor() {
        hyps = rescore(model, src, &hyps, cfg.beta)?;
    }
    let best = hyps
        .into_iter()
        .next()
        .ok_or_else(|| Error::contract("beam search produced no hypothesis"))?;
    let labels = if model.has_labeler() {
        Some(predict_labels(model, src, &best.tokens)?)
    } else {
        None
    };
    Ok(Translation { best, labels })
}

/// Translates sentences on up to `threads` threads; output order equals
/// input order.
pub fn translate_all(
    model: &Model,
    srcs: &[SourceSentence],
    cfg: &DecodeConfig,
    threads: usize,
) -> Result<Vec<Translation>> {
    let threads = threads.max(1).min(srcs.len().max(1));
    if threads == 1 {
        return srcs.iter().map(|s| translate(model, s, cfg)).collect();
    }
    let chunk = srcs.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Translation>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = srcs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || part.iter().map(|s| translate(model, s, cfg)).collect())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::contract("decoding thread panicked")))
            })
            .collect()
    });
    let mut out = Vec::with_capacity(srcs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy(preset: &str, tgt_vocab: usize, seed: u64) -> Model {
        let cfg = ModelConfig {
            src_vocab: 8,
            tgt_vocab,
            labels: 3,
            emb: 4,
            hidden: 5,
            rec_hidden: 5,
            ctx_hidden: 3,
            att: 4,
            k: 2,
            ..ModelConfig::preset(preset).unwrap()
        };
        let mut m = Model::new(cfg, seed).unwrap();
        // sharpen the output layer so that hypotheses differ clearly
        for p in m.store.params_mut() {
            if p.name.starts_with("decoder.out") {
                p.value.scale_assign(8.0);
            }
        }
        m
    }

    fn src(x: &[usize]) -> SourceSentence {
        SourceSentence {
            x: x.to_vec(),
            context: vec![vec![5, EOS], vec![6, 7, EOS]],
        }
    }

    /// Sum of log-probabilities of `tokens` under teacher forcing.
    fn forced_log_prob(m: &Model, s: &SourceSentence, tokens: &[usize]) -> f64 {
        let tape = Tape::new();
        let enc = m.encode(&tape, &single(&s.x)).unwrap();
        let (_, logits) = m.force_decode(&tape, &enc, &single(tokens), None).unwrap();
        let lp = log_softmax_rows(&tape.value(logits));
        tokens.iter().enumerate().map(|(t, &w)| lp[t][w]).sum()
    }

    fn greedy(m: &Model, s: &SourceSentence, max_len: usize) -> Vec<usize> {
        let tape = Tape::new();
        let enc = m.encode(&tape, &single(&s.x)).unwrap();
        let keys = m.decoder_keys(&tape, &enc).unwrap();
        let mut state = m.decoder_init(&tape, &enc, None).unwrap();
        let mut out = Vec::new();
        let mut prev = BOS;
        while out.len() < max_len {
            let step = m.decoder_step(&tape, &enc, keys, state, &[prev]).unwrap();
            state = step.state;
            let lg = tape.value(step.logits);
            let row = lg.row_slice(0);
            let w = (0..row.len())
                .filter(|&w| generatable(w))
                .fold(None, |b: Option<usize>, w| match b {
                    Some(b) if row[b] >= row[w] => Some(b),
                    _ => Some(w),
                })
                .unwrap();
            out.push(w);
            if w == EOS {
                break;
            }
            prev = w;
        }
        out
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..10 {
            let m = toy("baseline", 9, seed);
            let s = src(&[4, 5, 6, EOS]);
            let hyps = beam_search(
                &m,
                &s,
                &DecodeConfig {
                    beam: 1,
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(hyps.len(), 1);
            assert_eq!(hyps[0].tokens, greedy(&m, &s, 8), "seed {seed}");
            let lp = forced_log_prob(&m, &s, &hyps[0].tokens);
            assert!((hyps[0].log_prob - lp).abs() < 1e-9);
        }
    }

    #[test]
    fn nbest_is_sorted_and_never_emits_reserved_ids() {
        let m = toy("baseline", 10, 3);
        let hyps = beam_search(
            &m,
            &src(&[4, 6, EOS]),
            &DecodeConfig {
                beam: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!hyps.is_empty() && hyps.len() <= 5);
        assert!(hyps.windows(2).all(|w| w[0].score >= w[1].score));
        for h in &hyps {
            assert!(h.tokens.iter().all(|&t| generatable(t)));
            assert!(h.tokens.len() <= 6);
            assert!((h.score - h.normalized()).abs() < 1e-15);
        }
    }

    /// All outputs of at most `max_len` steps: strings ending in
    /// end-of-sentence, or cut at the limit.
    fn enumerate(alphabet: &[usize], max_len: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut frontier = vec![Vec::new()];
        for len in 1..=max_len {
            let mut next = Vec::new();
            for p in &frontier {
                for &w in alphabet {
                    let mut s: Vec<usize> = p.clone();
                    s.push(w);
                    if w == EOS || len == max_len {
                        out.push(s);
                    } else {
                        next.push(s);
                    }
                }
            }
            frontier = next;
        }
        out
    }

    #[test]
    fn wide_beam_matches_exhaustive_search() {
        // three generatable ids, three steps: a beam of 6 never prunes an
        // unfinished prefix, so the top hypothesis must be the global best
        for seed in 0..20 {
            let m = toy("baseline", 6, seed);
            let s = src(&[4, EOS]);
            let cfg = DecodeConfig {
                beam: 6,
                max_ratio: 1.5,
                beta: 0.0,
            };
            let top = &beam_search(&m, &s, &cfg).unwrap()[0];
            let best = enumerate(&[EOS, 4, 5], 3)
                .into_iter()
                .map(|t| (forced_log_prob(&m, &s, &t) / t.len() as f64, t))
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap();
            assert_eq!(top.tokens, best.1, "seed {seed}");
            assert!((top.score - best.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rescoring_limits() {
        let m = toy("joint", 10, 4);
        let s = src(&[4, 5, EOS]);
        let hyps = beam_search(
            &m,
            &s,
            &DecodeConfig {
                beam: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let same = rescore(&m, &s, &hyps, 0.0).unwrap();
        let order = |v: &[Hypothesis]| v.iter().map(|h| h.tokens.clone()).collect::<Vec<_>>();
        assert_eq!(order(&same), order(&hyps));
        let big = rescore(&m, &s, &hyps, 1e6).unwrap();
        assert!(big.windows(2).all(|w| w[0].rec_score >= w[1].rec_score));
        assert!(big.iter().all(|h| h.rec_score.unwrap() <= 0.0));
        assert!(rescore(&toy("baseline", 10, 4), &s, &hyps, 1.0).is_err());
    }

    #[test]
    fn untrained_uniform_labeler_predicts_first_label() {
        let mut m = toy("joint", 10, 5);
        for p in m.store.params_mut() {
            if p.name.starts_with("labeler.") {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let s = src(&[4, 5, 6, EOS]);
        let t = translate(&m, &s, &DecodeConfig::default()).unwrap();
        assert_eq!(t.labels.unwrap(), vec![0; 4]);
    }

    #[test]
    fn parallel_matches_serial_and_is_deterministic() {
        let m = toy("discourse", 10, 6);
        let srcs: Vec<SourceSentence> = (0..7).map(|i| src(&[4 + i % 3, 5, EOS])).collect();
        let cfg = DecodeConfig {
            beam: 3,
            beta: 1.0,
            ..Default::default()
        };
        let serial = translate_all(&m, &srcs, &cfg, 1).unwrap();
        let par = translate_all(&m, &srcs, &cfg, 3).unwrap();
        assert_eq!(serial, par);
        assert!(serial.iter().all(|t| t.labels.as_ref().unwrap().len() == 3));
    }

    #[test]
    fn reconstructor_side_context_does_not_change_translation() {
        let m = toy("discourse", 10, 7);
        let mut a = src(&[4, 5, EOS]);
        let cfg = DecodeConfig::default();
        let t1 = beam_search(&m, &a, &cfg).unwrap();
        a.context = vec![vec![7, 7, 7, EOS]];
        assert_eq!(t1, beam_search(&m, &a, &cfg).unwrap());
    }

    #[test]
    fn sources_take_the_window() {
        let docs = vec![Document {
            id: 0,
            src: vec![vec!["a".into()], vec!["b".into()], vec!["c".into()]],
            tgt: vec![],
            labels: None,
        }];
        let v = crate::corpus::build_vocab([["a", "b", "c"]], 10).unwrap();
        let s = sources(&docs, &v, 1);
        assert_eq!(s.len(), 3);
        assert!(s[0].context.is_empty());
        assert_eq!(s[2].context, vec![vec![v.encode("b"), EOS]]);
    }
}
