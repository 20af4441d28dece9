//! Alignment-based zero-pronoun annotation: target pronouns with no aligned
//! source word mark a dropped source pronoun; its slot is projected through
//! the alignment and its identity chosen by language-model perplexity.

pub mod ibm1;
pub mod lm;

use std::io::{BufRead, BufReader};
use std::path::Path;

use log::debug;

use crate::corpus::{AlignmentSet, Document, LabelSet, ZpLabelSequence, NO_ZP};
use crate::error::{Error, Result};

pub use ibm1::{train_ibm1, Ibm1Table};
pub use lm::NGramLm;

/// Source pronouns in a fixed order, each with its target equivalents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PronounVocab {
    entries: Vec<(String, Vec<String>)>,
}

impl PronounVocab {
    pub fn new(entries: Vec<(String, Vec<String>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::contract("pronoun vocabulary is empty"));
        }
        for (i, (s, t)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(p, _)| p == s) {
                return Err(Error::contract(format!("duplicate source pronoun {s}")));
            }
            if t.is_empty() {
                return Err(Error::contract(format!(
                    "source pronoun {s} has no target equivalent"
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Lines of `source<TAB>target1,target2`.
    pub fn load(path: &Path) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut entries = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (s, t) = line.split_once('\t').ok_or_else(|| {
                Error::format(
                    path.display().to_string(),
                    i + 1,
                    "expected source<TAB>targets",
                )
            })?;
            let targets: Vec<String> = t
                .split(',')
                .map(|x| x.trim().to_string())
                .filter(|x| !x.is_empty())
                .collect();
            entries.push((s.trim().to_string(), targets));
        }
        Self::new(entries).map_err(|e| Error::format(path.display().to_string(), 0, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body: String = self
            .entries
            .iter()
            .map(|(s, t)| format!("{s}\t{}\n", t.join(",")))
            .collect();
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(s, _)| s.as_str())
    }

    pub fn is_source(&self, w: &str) -> bool {
        self.entries.iter().any(|(s, _)| s == w)
    }

    pub fn is_target(&self, w: &str) -> bool {
        self.entries.iter().any(|(_, t)| t.iter().any(|x| x == w))
    }

    /// Source pronouns that translate to `tgt`, in vocabulary order; every
    /// source pronoun if none does.
    pub fn candidates(&self, tgt: &str) -> Vec<&str> {
        let c: Vec<&str> = self
            .entries
            .iter()
            .filter(|(_, t)| t.iter().any(|x| x == tgt))
            .map(|(s, _)| s.as_str())
            .collect();
        if c.is_empty() {
            self.sources().collect()
        } else {
            c
        }
    }

    pub fn label_set(&self) -> LabelSet {
        let names: Vec<&str> = self.sources().collect();
        LabelSet::new(&names).expect("validated on construction")
    }
}

/// Target positions holding a pronoun that no alignment link touches.
pub fn detect_unaligned_pronouns<S: AsRef<str>>(
    target: &[S],
    alignment: &AlignmentSet,
    pronouns: &PronounVocab,
) -> Vec<(usize, String)> {
    target
        .iter()
        .enumerate()
        .filter(|(j, w)| pronouns.is_target(w.as_ref()) && !alignment.iter().any(|&(_, t)| t == *j))
        .map(|(j, w)| (j, w.as_ref().to_string()))
        .collect()
}

/// Slot "before source token s": one past the rightmost source token linked
/// to any target word left of `tgt_index`, or 0 when there is none. `src_len`
/// is the end-of-sentence slot.
pub fn project_zp_position(tgt_index: usize, alignment: &AlignmentSet, src_len: usize) -> usize {
    alignment
        .iter()
        .filter(|&&(_, t)| t < tgt_index)
        .map(|&(s, _)| s + 1)
        .max()
        .unwrap_or(0)
        .min(src_len)
}

/// Inserts each candidate at `slot` and keeps the one with the lowest
/// perplexity; earlier candidates win ties.
pub fn recover_zp_word<S: AsRef<str>>(
    source: &[S],
    slot: usize,
    tgt_pronoun: &str,
    lm: &NGramLm,
    pronouns: &PronounVocab,
) -> Result<String> {
    let candidates = pronouns.candidates(tgt_pronoun);
    if candidates.len() == 1 {
        return Ok(candidates[0].to_string());
    }
    let mut best: Option<(&str, f64)> = None;
    for c in candidates {
        let mut sent: Vec<&str> = source.iter().map(AsRef::as_ref).collect();
        sent.insert(slot.min(sent.len()), c);
        let ppl = lm.perplexity(&sent);
        if best.is_none_or(|(_, b)| ppl < b) {
            best = Some((c, ppl));
        }
    }
    best.map(|(c, _)| c.to_string())
        .ok_or_else(|| Error::Annotation(format!("no candidate pronoun for {tgt_pronoun}")))
}

/// Where links come from: one gold set per sentence (documents flattened in
/// order), or a trained table.
pub enum Alignments<'a> {
    Gold(&'a [AlignmentSet]),
    Table(&'a Ibm1Table),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotationSummary {
    pub sentences: usize,
    pub touched: usize,
    pub zps: usize,
    pub overt_pronouns: usize,
    pub skipped: usize,
}

impl AnnotationSummary {
    /// Share of source pronouns that are dropped.
    pub fn zp_rate(&self) -> f64 {
        let total = self.zps + self.overt_pronouns;
        if total == 0 {
            0.0
        } else {
            self.zps as f64 / total as f64
        }
    }
}

/// Labels every sentence; per-pair failures are counted and leave that
/// pronoun unlabelled.
pub fn annotate_corpus(
    docs: &[Document],
    alignments: Alignments<'_>,
    lm: &NGramLm,
    pronouns: &PronounVocab,
) -> Result<(Vec<Document>, AnnotationSummary)> {
    let n_sent: usize = docs.iter().map(Document::len).sum();
    if let Alignments::Gold(g) = alignments {
        if g.len() != n_sent {
            return Err(Error::contract(format!(
                "{} alignment lines for {n_sent} sentences",
                g.len()
            )));
        }
    }
    let mut summary = AnnotationSummary::default();
    let mut out = Vec::with_capacity(docs.len());
    let mut k = 0;
    for doc in docs {
        let mut labels = Vec::with_capacity(doc.len());
        for (i, src) in doc.src.iter().enumerate() {
            let tgt = doc.tgt.get(i).map(Vec::as_slice).unwrap_or(&[]);
            let computed;
            let links = match alignments {
                Alignments::Gold(g) => &g[k],
                Alignments::Table(t) => {
                    computed = t.align(src, tgt);
                    &computed
                }
            };
            k += 1;
            summary.sentences += 1;
            summary.overt_pronouns += src.iter().filter(|w| pronouns.is_source(w)).count();
            let mut seq = ZpLabelSequence::none(src.len());
            for (j, tp) in detect_unaligned_pronouns(tgt, links, pronouns) {
                let slot = project_zp_position(j, links, src.len());
                if seq.0[slot] != NO_ZP {
                    debug!(
                        "doc {} sentence {i}: second pronoun for slot {slot} skipped",
                        doc.id
                    );
                    summary.skipped += 1;
                    continue;
                }
                match recover_zp_word(src, slot, &tp, lm, pronouns) {
                    Ok(w) => {
                        seq.0[slot] = w;
                        summary.zps += 1;
                    }
                    Err(e) => {
                        debug!("doc {} sentence {i}: {e}", doc.id);
                        summary.skipped += 1;
                    }
                }
            }
            if !seq.zps().is_empty() {
                summary.touched += 1;
            }
            labels.push(seq);
        }
        out.push(Document {
            labels: Some(labels),
            ..doc.clone()
        });
    }
    Ok((out, summary))
}
