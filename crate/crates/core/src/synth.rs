//! A toy pro-drop language with gold zero-pronoun bookkeeping.
//!
//! Source sentences follow `SUBJ [ADV] VERB OBJ [ma]`, where noun phrases are
//! `[adj] n<i>`. Nouns fall into two classes (`i % 3 == 2` → class `ti`,
//! otherwise `ta`); an object pronoun always agrees with the most recent
//! noun, which is the sentence's own subject or, when the subject is a
//! speech-act pronoun, the last noun of the previous sentence. Verbs carry a
//! person suffix (`v<j>.1` for `wo`, `.2` for `ni`/`nin`, `.3` for nouns), and
//! the first quarter of the verbs are honorific: their second-person subject
//! is `nin` instead of `ni`. The target is the undropped source uppercased,
//! with `nin` rendered `NI`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::annotate::PronounVocab;
use crate::corpus::io::{read_blocks, write_blocks, write_labels};
use crate::corpus::{load_documents, write_alignments, AlignmentSet, Document, ZpLabelSequence};
use crate::error::{Error, Result};
use crate::kv::KeyValues;

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub num_documents: usize,
    pub valid_documents: usize,
    pub test_documents: usize,
    pub sentences_per_document: usize,
    pub nouns: usize,
    pub verbs: usize,
    pub adjectives: usize,
    pub adverbs: usize,
    pub subject_drop_rate: f64,
    pub object_drop_rate: f64,
    /// Share of object pronouns whose antecedent is in the previous sentence.
    pub discourse_fraction: f64,
    /// Chance that a sentence after a noun-bearing one has a pronoun object.
    pub object_pronoun_rate: f64,
    /// Chance of a speech-act subject in sentences with a noun object.
    pub subject_pronoun_rate: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            num_documents: 2000,
            valid_documents: 200,
            test_documents: 200,
            sentences_per_document: 4,
            nouns: 30,
            verbs: 12,
            adjectives: 6,
            adverbs: 4,
            subject_drop_rate: 0.27,
            object_drop_rate: 0.27,
            discourse_fraction: 0.5,
            object_pronoun_rate: 0.5,
            subject_pronoun_rate: 0.5,
        }
    }
}

const KEYS: [&str; 14] = [
    "seed",
    "num_documents",
    "valid_documents",
    "test_documents",
    "sentences_per_document",
    "nouns",
    "verbs",
    "adjectives",
    "adverbs",
    "subject_drop_rate",
    "object_drop_rate",
    "discourse_fraction",
    "object_pronoun_rate",
    "subject_pronoun_rate",
];

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("subject_drop_rate", self.subject_drop_rate),
            ("object_drop_rate", self.object_drop_rate),
            ("discourse_fraction", self.discourse_fraction),
            ("object_pronoun_rate", self.object_pronoun_rate),
            ("subject_pronoun_rate", self.subject_pronoun_rate),
        ];
        if let Some((k, v)) = rates.iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract(format!("{k} must lie in [0,1], got {v}")));
        }
        if self.nouns < 3 || self.verbs < 2 {
            return Err(Error::contract(
                "need at least 3 nouns (both classes) and 2 verbs",
            ));
        }
        if self.sentences_per_document == 0 {
            return Err(Error::contract("documents need at least one sentence"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&KEYS)?;
        let mut c = Self::default();
        kv.read_into("seed", &mut c.seed)?;
        kv.read_into("num_documents", &mut c.num_documents)?;
        kv.read_into("valid_documents", &mut c.valid_documents)?;
        kv.read_into("test_documents", &mut c.test_documents)?;
        kv.read_into("sentences_per_document", &mut c.sentences_per_document)?;
        kv.read_into("nouns", &mut c.nouns)?;
        kv.read_into("verbs", &mut c.verbs)?;
        kv.read_into("adjectives", &mut c.adjectives)?;
        kv.read_into("adverbs", &mut c.adverbs)?;
        kv.read_into("subject_drop_rate", &mut c.subject_drop_rate)?;
        kv.read_into("object_drop_rate", &mut c.object_drop_rate)?;
        kv.read_into("discourse_fraction", &mut c.discourse_fraction)?;
        kv.read_into("object_pronoun_rate", &mut c.object_pronoun_rate)?;
        kv.read_into("subject_pronoun_rate", &mut c.subject_pronoun_rate)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("seed", self.seed);
        kv.set("num_documents", self.num_documents);
        kv.set("valid_documents", self.valid_documents);
        kv.set("test_documents", self.test_documents);
        kv.set("sentences_per_document", self.sentences_per_document);
        kv.set("nouns", self.nouns);
        kv.set("verbs", self.verbs);
        kv.set("adjectives", self.adjectives);
        kv.set("adverbs", self.adverbs);
        kv.set("subject_drop_rate", self.subject_drop_rate);
        kv.set("object_drop_rate", self.object_drop_rate);
        kv.set("discourse_fraction", self.discourse_fraction);
        kv.set("object_pronoun_rate", self.object_pronoun_rate);
        kv.set("subject_pronoun_rate", self.subject_pronoun_rate);
        kv
    }
}

/// The toy language's pronoun inventory in label order.
pub fn pronoun_vocab() -> PronounVocab {
    let e = |s: &str, t: &str| (s.to_string(), vec![t.to_string()]);
    PronounVocab::new(vec![
        e("ta", "TA"),
        e("ti", "TI"),
        e("wo", "WO"),
        e("ni", "NI"),
        e("nin", "NI"),
    ])
    .expect("static inventory")
}

pub fn noun_pronoun(noun: usize) -> &'static str {
    if noun % 3 == 2 {
        "ti"
    } else {
        "ta"
    }
}

pub fn translate_token(w: &str) -> String {
    if w == "nin" {
        "NI".to_string()
    } else {
        w.to_uppercase()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Subject,
    Object,
}

/// Ground truth for one source pronoun, overt or dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PronounRecord {
    pub doc: usize,
    pub sent: usize,
    pub role: Role,
    pub pronoun: String,
    /// Index in the undropped sentence.
    pub position: usize,
    /// Label slot in the dropped sentence when dropped.
    pub slot: Option<usize>,
    /// Sentences back to the antecedent (objects only).
    pub antecedent_offset: Option<usize>,
}

impl PronounRecord {
    pub fn dropped(&self) -> bool {
        self.slot.is_some()
    }

    fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.doc,
            self.sent,
            match self.role {
                Role::Subject => "subj",
                Role::Object => "obj",
            },
            self.pronoun,
            self.position,
            self.slot.map_or("-".to_string(), |s| s.to_string()),
            self.antecedent_offset
                .map_or("-".to_string(), |s| s.to_string()),
        )
    }

    fn parse(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(format!("expected 7 fields, got {}", f.len()));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad number {s:?}"));
        let opt = |s: &str| if s == "-" { Ok(None) } else { num(s).map(Some) };
        Ok(Self {
            doc: num(f[0])?,
            sent: num(f[1])?,
            role: match f[2] {
                "subj" => Role::Subject,
                "obj" => Role::Object,
                r => return Err(format!("bad role {r:?}")),
            },
            pronoun: f[3].to_string(),
            position: num(f[4])?,
            slot: opt(f[5])?,
            antecedent_offset: opt(f[6])?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    /// Dropped sources, full targets and gold labels.
    pub docs: Vec<Document>,
    /// Undropped sources.
    pub full: Vec<Vec<Vec<String>>>,
    /// One gold set per sentence, documents flattened in order.
    pub alignments: Vec<AlignmentSet>,
    pub pronouns: Vec<PronounRecord>,
}

enum Np {
    Noun(usize, Option<usize>),
    Pronoun(&'static str),
}

fn np_tokens(np: &Np, out: &mut Vec<String>) {
    match np {
        Np::Noun(i, adj) => {
            if let Some(a) = adj {
                out.push(format!("a{a}"));
            }
            out.push(format!("n{i}"));
        }
        Np::Pronoun(p) => out.push(p.to_string()),
    }
}

struct Builder<'a> {
    cfg: &'a GenConfig,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn noun(&mut self) -> Np {
        let adj = (self.cfg.adjectives > 0 && self.rng.gen_bool(0.3))
            .then(|| self.rng.gen_range(0..self.cfg.adjectives));
        Np::Noun(self.rng.gen_range(0..self.cfg.nouns), adj)
    }

    /// Returns the undropped sentence, its pronouns as
    /// `(position, role, pronoun, antecedent offset)`, and its last noun.
    #[allow(clippy::type_complexity)]
    fn sentence(
        &mut self,
        prev_noun: Option<usize>,
    ) -> (
        Vec<String>,
        Vec<(usize, Role, String, Option<usize>)>,
        Option<usize>,
    ) {
        let cfg = self.cfg;
        let pronoun_object = prev_noun.is_some() && self.rng.gen_bool(cfg.object_pronoun_rate);
        let speech_subject = if pronoun_object {
            self.rng.gen_bool(cfg.discourse_fraction)
        } else {
            self.rng.gen_bool(cfg.subject_pronoun_rate)
        };
        let verb = self.rng.gen_range(0..cfg.verbs);
        let honorific = verb < cfg.verbs.div_ceil(4);
        let (subj, person) = if speech_subject {
            if self.rng.gen_bool(0.5) {
                (Np::Pronoun("wo"), 1)
            } else {
                (Np::Pronoun(if honorific { "nin" } else { "ni" }), 2)
            }
        } else {
            (self.noun(), 3)
        };
        let mut toks = Vec::with_capacity(7);
        let mut prons = Vec::new();
        let mut last_noun = None;
        np_tokens(&subj, &mut toks);
        match subj {
            Np::Pronoun(p) => prons.push((0, Role::Subject, p.to_string(), None)),
            Np::Noun(i, _) => last_noun = Some(i),
        }
        if cfg.adverbs > 0 && self.rng.gen_bool(0.3) {
            toks.push(format!("d{}", self.rng.gen_range(0..cfg.adverbs)));
        }
        toks.push(format!("v{verb}.{person}"));
        if pronoun_object {
            let (antecedent, offset) = match last_noun {
                Some(n) => (n, 0),
                None => (prev_noun.expect("checked above"), 1),
            };
            let p = noun_pronoun(antecedent);
            prons.push((toks.len(), Role::Object, p.to_string(), Some(offset)));
            toks.push(p.to_string());
        } else {
            let obj = self.noun();
            if let Np::Noun(i, _) = obj {
                last_noun = Some(i);
            }
            np_tokens(&obj, &mut toks);
        }
        if self.rng.gen_bool(0.2) {
            toks.push("ma".to_string());
        }
        (toks, prons, last_noun)
    }
}

/// Generates `num_documents` documents from `config.seed`.
pub fn generate(config: &GenConfig) -> Result<SynthCorpus> {
    generate_n(config, config.num_documents, config.seed)
}

/// Train/valid/test corpora from seeds derived from `config.seed`.
pub fn generate_splits(config: &GenConfig) -> Result<[SynthCorpus; 3]> {
    let base = config.seed.wrapping_mul(3);
    Ok([
        generate_n(config, config.num_documents, base)?,
        generate_n(config, config.valid_documents, base.wrapping_add(1))?,
        generate_n(config, config.test_documents, base.wrapping_add(2))?,
    ])
}

fn generate_n(config: &GenConfig, n_docs: usize, seed: u64) -> Result<SynthCorpus> {
    config.validate()?;
    let mut b = Builder {
        cfg: config,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut out = SynthCorpus {
        docs: Vec::with_capacity(n_docs),
        full: Vec::with_capacity(n_docs),
        alignments: Vec::new(),
        pronouns: Vec::new(),
    };
    for d in 0..n_docs {
        let mut prev_noun = None;
        let mut doc = Document {
            id: d,
            src: Vec::new(),
            tgt: Vec::new(),
            labels: Some(Vec::new()),
        };
        let mut full_doc = Vec::new();
        for s in 0..config.sentences_per_document {
            let (full, prons, last_noun) = b.sentence(prev_noun);
            prev_noun = last_noun;
            let mut drop = vec![false; full.len()];
            for &(pos, role, _, _) in &prons {
                let rate = match role {
                    Role::Subject => config.subject_drop_rate,
                    Role::Object => config.object_drop_rate,
                };
                drop[pos] = b.rng.gen_bool(rate);
            }
            let mut src = Vec::with_capacity(full.len());
            let mut links = AlignmentSet::default();
            let mut slot_of = vec![0; full.len()];
            for (i, w) in full.iter().enumerate() {
                slot_of[i] = src.len();
                if !drop[i] {
                    links.0.insert((src.len(), i));
                    src.push(w.clone());
                }
            }
            let mut labels = ZpLabelSequence::none(src.len());
            for (pos, role, p, offset) in prons {
                let slot = drop[pos].then_some(slot_of[pos]);
                if let Some(sl) = slot {
                    labels.0[sl] = p.clone();
                }
                out.pronouns.push(PronounRecord {
                    doc: d,
                    sent: s,
                    role,
                    pronoun: p,
                    position: pos,
                    slot,
                    antecedent_offset: offset,
                });
            }
            doc.tgt
                .push(full.iter().map(|w| translate_token(w)).collect());
            doc.src.push(src);
            doc.labels.as_mut().expect("set above").push(labels);
            out.alignments.push(links);
            full_doc.push(full);
        }
        out.docs.push(doc);
        out.full.push(full_doc);
    }
    Ok(out)
}

pub const SRC_FILE: &str = "src.txt";
pub const TGT_FILE: &str = "tgt.txt";
pub const LABEL_FILE: &str = "labels.txt";
pub const ALIGN_FILE: &str = "align.txt";
pub const FULL_FILE: &str = "full.txt";
pub const GOLD_FILE: &str = "gold.tsv";
pub const STATS_FILE: &str = "stats.txt";
pub const PRONOUN_FILE: &str = "pronouns.tsv";

const GOLD_HEADER: &str = "doc\tsent\trole\tpronoun\tposition\tslot\toffset";

/// Writes the corpus files, the gold sidecar, the pronoun list and stats.
pub fn write_corpus(dir: &Path, corpus: &SynthCorpus) -> Result<CorpusStats> {
    std::fs::create_dir_all(dir)?;
    write_blocks(
        &dir.join(SRC_FILE),
        corpus.docs.iter().map(|d| d.src.iter()),
    )?;
    write_blocks(
        &dir.join(TGT_FILE),
        corpus.docs.iter().map(|d| d.tgt.iter()),
    )?;
    write_blocks(&dir.join(FULL_FILE), corpus.full.iter().map(|d| d.iter()))?;
    let labels: Vec<Vec<ZpLabelSequence>> = corpus
        .docs
        .iter()
        .map(|d| d.labels.clone().unwrap_or_default())
        .collect();
    write_labels(&dir.join(LABEL_FILE), &labels)?;
    write_alignments(&dir.join(ALIGN_FILE), &corpus.alignments)?;
    let mut gold = String::from(GOLD_HEADER);
    gold.push('\n');
    for r in &corpus.pronouns {
        gold.push_str(&r.to_line());
        gold.push('\n');
    }
    std::fs::write(dir.join(GOLD_FILE), gold)?;
    pronoun_vocab().save(&dir.join(PRONOUN_FILE))?;
    let stats = corpus_stats(&corpus.docs, Some(&corpus.pronouns))?;
    stats.to_kv().save(&dir.join(STATS_FILE))?;
    Ok(stats)
}

pub fn read_gold(path: &Path) -> Result<Vec<PronounRecord>> {
    let text = std::fs::read_to_string(path)?;
    let name = path.display().to_string();
    text.lines()
        .enumerate()
        .filter(|(i, l)| !(*i == 0 && *l == GOLD_HEADER) && !l.trim().is_empty())
        .map(|(i, l)| PronounRecord::parse(l).map_err(|m| Error::format(name.clone(), i + 1, m)))
        .collect()
}

/// Reads a split written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<SynthCorpus> {
    let set = pronoun_vocab().label_set();
    let docs = load_documents(
        &dir.join(SRC_FILE),
        &dir.join(TGT_FILE),
        Some((&dir.join(LABEL_FILE), &set)),
    )?;
    let full = read_blocks(&dir.join(FULL_FILE))?
        .into_iter()
        .map(|d| d.into_iter().map(|l| l.1).collect())
        .collect();
    Ok(SynthCorpus {
        docs,
        full,
        alignments: crate::corpus::read_alignments(&dir.join(ALIGN_FILE))?,
        pronouns: read_gold(&dir.join(GOLD_FILE))?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub documents: usize,
    pub sentences: usize,
    pub pronouns: usize,
    pub zps: usize,
    pub object_pronouns: usize,
    pub discourse_objects: usize,
    pub object_zps: usize,
    pub discourse_object_zps: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl CorpusStats {
    pub fn zp_rate(&self) -> f64 {
        ratio(self.zps, self.pronouns)
    }

    /// Share of object pronouns whose antecedent is in an earlier sentence.
    pub fn discourse_fraction(&self) -> f64 {
        ratio(self.discourse_objects, self.object_pronouns)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("documents", self.documents);
        kv.set("sentences", self.sentences);
        kv.set("pronouns", self.pronouns);
        kv.set("zps", self.zps);
        kv.set("zp_rate", format!("{:.6}", self.zp_rate()));
        kv.set("object_pronouns", self.object_pronouns);
        kv.set("discourse_objects", self.discourse_objects);
        kv.set(
            "discourse_fraction",
            format!("{:.6}", self.discourse_fraction()),
        );
        kv.set("object_zps", self.object_zps);
        kv.set("discourse_object_zps", self.discourse_object_zps);
        kv.set("src_vocab", self.src_vocab);
        kv.set("tgt_vocab", self.tgt_vocab);
        kv
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn corpus_stats(docs: &[Document], gold: Option<&[PronounRecord]>) -> Result<CorpusStats> {
    let gold =
        gold.ok_or_else(|| Error::contract("corpus statistics need the gold pronoun sidecar"))?;
    let vocab = |f: fn(&Document) -> &Vec<Vec<String>>| {
        let mut v: Vec<&str> = docs
            .iter()
            .flat_map(|d| f(d).iter().flatten().map(String::as_str))
            .collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    let obj = |r: &&PronounRecord| r.role == Role::Object;
    let disc = |r: &&PronounRecord| r.antecedent_offset.is_some_and(|o| o > 0);
    Ok(CorpusStats {
        documents: docs.len(),
        sentences: docs.iter().map(Document::len).sum(),
        pronouns: gold.len(),
        zps: gold.iter().filter(|r| r.dropped()).count(),
        object_pronouns: gold.iter().filter(obj).count(),
        discourse_objects: gold.iter().filter(obj).filter(disc).count(),
        object_zps: gold.iter().filter(obj).filter(|r| r.dropped()).count(),
        discourse_object_zps: gold
            .iter()
            .filter(obj)
            .filter(disc)
            .filter(|r| r.dropped())
            .count(),
        src_vocab: vocab(|d| &d.src),
        tgt_vocab: vocab(|d| &d.tgt),
    })
}

/// Human-readable one-line summary.
pub fn describe_stats(s: &CorpusStats) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "{} docs, {} sentences, ZP rate {:.3}, discourse-dependent objects {:.3}",
        s.documents,
        s.sentences,
        s.zp_rate(),
        s.discourse_fraction()
    );
    out
}
