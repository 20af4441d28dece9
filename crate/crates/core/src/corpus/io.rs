//! Documents, label sequences and alignments in plain-text form.
//!
//! Parallel files hold one tokenized sentence per line with blank lines
//! separating documents. Label lines carry one label per source token plus
//! one for the end-of-sentence slot. Alignment files hold one sentence per
//! line as `i-j` pairs with no document separators (an empty line is an
//! empty set).

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::corpus::vocab::{Vocab, EOS};
use crate::error::{Error, Result};

/// Label meaning "no pronoun is missing before this token".
pub const NO_ZP: &str = "N";

/// `{N} ∪ V_zp` in a fixed order; id 0 is always `N`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn new<S: AsRef<str>>(pronouns: &[S]) -> Result<Self> {
        let mut labels = vec![NO_ZP.to_string()];
        for p in pronouns {
            let p = p.as_ref();
            if p == NO_ZP || labels.iter().any(|l| l == p) {
                return Err(Error::contract(format!(
                    "duplicate or reserved pronoun {p}"
                )));
            }
            labels.push(p.to_string());
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn pronouns(&self) -> &[String] {
        &self.labels[1..]
    }
}

/// One label per source token, the last one for the end-of-sentence slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZpLabelSequence(pub Vec<String>);

impl ZpLabelSequence {
    pub fn none(source_len: usize) -> Self {
        Self(vec![NO_ZP.to_string(); source_len + 1])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `(slot, pronoun)` for every slot whose label is not `N`.
    pub fn zps(&self) -> Vec<(usize, &str)> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, l)| l.as_str() != NO_ZP)
            .map(|(i, l)| (i, l.as_str()))
            .collect()
    }

    pub fn ids(&self, set: &LabelSet) -> Result<Vec<usize>> {
        self.0
            .iter()
            .map(|l| {
                set.id(l)
                    .ok_or_else(|| Error::contract(format!("unknown label {l}")))
            })
            .collect()
    }

    pub fn from_ids(ids: &[usize], set: &LabelSet) -> Self {
        Self(ids.iter().map(|&i| set.name(i).to_string()).collect())
    }

    /// Source with each labelled pronoun re-inserted before its slot.
    pub fn fill(&self, source: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(source.len() + 2);
        for (i, l) in self.0.iter().enumerate() {
            if l != NO_ZP {
                out.push(l.clone());
            }
            if let Some(t) = source.get(i) {
                out.push(t.clone());
            }
        }
        out
    }
}

impl fmt::Display for ZpLabelSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.join(" "))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AlignmentSet(pub BTreeSet<(usize, usize)>);

impl AlignmentSet {
    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let mut set = BTreeSet::new();
        for pair in line.split_whitespace() {
            let (i, j) = pair
                .split_once('-')
                .ok_or_else(|| format!("bad alignment pair {pair:?}"))?;
            let i = i
                .parse()
                .map_err(|_| format!("bad source index in {pair:?}"))?;
            let j = j
                .parse()
                .map_err(|_| format!("bad target index in {pair:?}"))?;
            set.insert((i, j));
        }
        Ok(Self(set))
    }

    pub fn contains(&self, src: usize, tgt: usize) -> bool {
        self.0.contains(&(src, tgt))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(usize, usize)> {
        self.0.iter()
    }
}

impl fmt::Display for AlignmentSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(i, j)| format!("{i}-{j}")).collect();
        write!(f, "{}", parts.join(" "))
    }
}

pub fn read_alignments(path: &Path) -> Result<Vec<AlignmentSet>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        out.push(
            AlignmentSet::parse(&line)
                .map_err(|m| Error::format(path.display().to_string(), i + 1, m))?,
        );
    }
    Ok(out)
}

pub fn write_alignments(path: &Path, sets: &[AlignmentSet]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for s in sets {
        writeln!(f, "{s}")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: usize,
    pub src: Vec<Vec<String>>,
    pub tgt: Vec<Vec<String>>,
    pub labels: Option<Vec<ZpLabelSequence>>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// A sentence line with its 1-based line number.
pub type Line = (usize, Vec<String>);

/// Reads a blank-line separated file into documents of tokenized lines.
/// Runs of blank lines count as one separator.
pub fn read_blocks(path: &Path) -> Result<Vec<Vec<Line>>> {
    let f = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    let mut cur: Vec<Line> = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        let toks: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if toks.is_empty() {
            if !cur.is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push((i + 1, toks));
        }
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    Ok(docs)
}

pub fn write_blocks<'a, D, S>(path: &Path, docs: D) -> Result<()>
where
    D: IntoIterator<Item = S>,
    S: IntoIterator<Item = &'a Vec<String>>,
{
    let mut f = BufWriter::new(File::create(path)?);
    for (i, doc) in docs.into_iter().enumerate() {
        if i > 0 {
            writeln!(f)?;
        }
        for sent in doc {
            writeln!(f, "{}", sent.join(" "))?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn write_labels(path: &Path, docs: &[Vec<ZpLabelSequence>]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            writeln!(f)?;
        }
        for l in doc {
            writeln!(f, "{l}")?;
        }
    }
    f.flush()?;
    Ok(())
}

fn check_shape(path: &Path, reference: &[Vec<Line>], other: &[Vec<Line>]) -> Result<()> {
    let name = path.display().to_string();
    if reference.len() != other.len() {
        let line = other
            .get(reference.len())
            .or(other.last())
            .and_then(|d| d.first())
            .map_or(0, |l| l.0);
        return Err(Error::format(
            name,
            line,
            format!("{} documents, expected {}", other.len(), reference.len()),
        ));
    }
    for (a, b) in reference.iter().zip(other) {
        for (la, lb) in a.iter().zip(b) {
            if la.0 != lb.0 {
                return Err(Error::format(
                    name,
                    lb.0,
                    format!("sentence misaligned with source line {}", la.0),
                ));
            }
        }
        if a.len() != b.len() {
            let line = b.get(a.len()).or(b.last()).map_or(0, |l| l.0);
            return Err(Error::format(
                name,
                line,
                format!("document has {} sentences, source has {}", b.len(), a.len()),
            ));
        }
    }
    Ok(())
}

/// Loads parallel documents; labels are validated against `labels.1`.
pub fn load_documents(
    src: &Path,
    tgt: &Path,
    labels: Option<(&Path, &LabelSet)>,
) -> Result<Vec<Document>> {
    let s = read_blocks(src)?;
    let t = read_blocks(tgt)?;
    check_shape(tgt, &s, &t)?;
    let l = match labels {
        Some((path, set)) => {
            let l = read_blocks(path)?;
            check_shape(path, &s, &l)?;
            for (sd, ld) in s.iter().zip(&l) {
                for ((_, stoks), (line, ltoks)) in sd.iter().zip(ld) {
                    if ltoks.len() != stoks.len() + 1 {
                        return Err(Error::format(
                            path.display().to_string(),
                            *line,
                            format!(
                                "{} labels for a source of {} tokens (expected {} including end of sentence)",
                                ltoks.len(),
                                stoks.len(),
                                stoks.len() + 1
                            ),
                        ));
                    }
                    if let Some(bad) = ltoks.iter().find(|x| set.id(x).is_none()) {
                        return Err(Error::format(
                            path.display().to_string(),
                            *line,
                            format!("unknown label {bad:?}"),
                        ));
                    }
                }
            }
            Some(l)
        }
        None => None,
    };
    Ok(s.into_iter()
        .zip(t)
        .enumerate()
        .map(|(id, (sd, td))| Document {
            id,
            src: sd.into_iter().map(|l| l.1).collect(),
            tgt: td.into_iter().map(|l| l.1).collect(),
            labels: l.as_ref().map(|l| {
                l[id]
                    .iter()
                    .map(|(_, toks)| ZpLabelSequence(toks.clone()))
                    .collect()
            }),
        })
        .collect())
}

/// Source-only documents for translation; targets are left empty.
pub fn load_source_documents(src: &Path) -> Result<Vec<Document>> {
    Ok(read_blocks(src)?
        .into_iter()
        .enumerate()
        .map(|(id, sd)| Document {
            id,
            tgt: Vec::new(),
            src: sd.into_iter().map(|l| l.1).collect(),
            labels: None,
        })
        .collect())
}

/// A training/decoding instance in id space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    /// Source ids ending in the end-of-sentence id.
    pub x: Vec<usize>,
    /// Target ids ending in the end-of-sentence id (empty when unknown).
    pub y: Vec<usize>,
    /// Label ids, one per entry of `x`.
    pub zp: Option<Vec<usize>>,
    /// Up to K preceding source sentences, oldest first.
    pub context: Vec<Vec<usize>>,
    pub doc: usize,
    pub sent: usize,
}

pub fn make_examples(
    docs: &[Document],
    src_vocab: &Vocab,
    tgt_vocab: Option<&Vocab>,
    labels: Option<&LabelSet>,
    k: usize,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for doc in docs {
        let xs: Vec<Vec<usize>> = doc
            .src
            .iter()
            .map(|s| src_vocab.encode_sentence(s))
            .collect();
        for (i, x) in xs.iter().enumerate() {
            let y = match tgt_vocab {
                Some(v) if i < doc.tgt.len() => v.encode_sentence(&doc.tgt[i]),
                _ => Vec::new(),
            };
            let zp = match (labels, &doc.labels) {
                (Some(set), Some(l)) => {
                    let ids = l[i].ids(set)?;
                    if ids.len() != x.len() {
                        return Err(Error::contract(format!(
                            "document {} sentence {i}: {} labels for {} source ids",
                            doc.id,
                            ids.len(),
                            x.len()
                        )));
                    }
                    Some(ids)
                }
                _ => None,
            };
            let start = i.saturating_sub(k);
            out.push(Example {
                x: x.clone(),
                y,
                zp,
                context: xs[start..i].to_vec(),
                doc: doc.id,
                sent: i,
            });
        }
    }
    debug_assert!(out.iter().all(|e| e.x.last() == Some(&EOS)));
    Ok(out)
}
