//! Joint training with Adadelta, validation-based model selection and early
//! stopping, plus the model-row comparison.

use std::fmt::Write as _;

use crate::autodiff::Tape;
use crate::corpus::{
    build_vocab, make_batches, make_examples, Document, Example, LabelSet, Vocab, ZpLabelSequence,
};
use crate::decode::{sources, translate_all, DecodeConfig, SourceSentence};
use crate::error::{Error, Result};
use crate::eval::{bleu, zp_prf, ZpScores};
use crate::kv::KeyValues;
use crate::model::{Model, ModelBundle, ModelConfig};
use crate::optim::Adadelta;
use crate::params::{Group, ParameterStore};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Upper bound on epochs; early stopping may end sooner.
    pub epochs: usize,
    /// Epochs without a validation BLEU improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    /// Pairs with more words than this on either side are skipped.
    pub max_len: usize,
    /// Global gradient-norm clip.
    pub clip: f64,
    pub seed: u64,
    /// Beam used for the per-epoch validation decode.
    pub valid_beam: usize,
    /// Source/target vocabulary caps (non-reserved entries).
    pub vocab_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            patience: 5,
            batch_size: 16,
            max_len: 20,
            clip: 5.0,
            seed: 1,
            valid_beam: 1,
            vocab_size: 10_000,
        }
    }
}

pub const TRAIN_KEYS: [&str; 8] = [
    "epochs",
    "patience",
    "batch_size",
    "max_len",
    "clip",
    "seed",
    "valid_beam",
    "vocab_size",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.patience == 0
            || self.batch_size == 0
            || self.max_len == 0
            || self.valid_beam == 0
        {
            return Err(Error::contract(
                "epochs, patience, batch_size, max_len and valid_beam must be positive",
            ));
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return Err(Error::contract(format!(
                "clip must be positive (got {})",
                self.clip
            )));
        }
        Ok(())
    }

    pub fn apply(mut self, kv: &KeyValues) -> Result<Self> {
        kv.read_into("epochs", &mut self.epochs)?;
        kv.read_into("patience", &mut self.patience)?;
        kv.read_into("batch_size", &mut self.batch_size)?;
        kv.read_into("max_len", &mut self.max_len)?;
        kv.read_into("clip", &mut self.clip)?;
        kv.read_into("seed", &mut self.seed)?;
        kv.read_into("valid_beam", &mut self.valid_beam)?;
        kv.read_into("vocab_size", &mut self.vocab_size)?;
        Ok(self)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("epochs", self.epochs);
        kv.set("patience", self.patience);
        kv.set("batch_size", self.batch_size);
        kv.set("max_len", self.max_len);
        kv.set("clip", self.clip);
        kv.set("seed", self.seed);
        kv.set("valid_beam", self.valid_beam);
        kv.set("vocab_size", self.vocab_size);
        kv
    }
}

/// Mean per-token loss terms over an epoch plus validation scores.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub likelihood: f64,
    pub reconstruction: f64,
    pub labeling: f64,
    pub valid_bleu: f64,
    /// Word-level ZP F1; `None` without a labeler.
    pub valid_f1: Option<f64>,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch\tL\tR\tP\tvalid_bleu\tvalid_f1";

    pub fn to_tsv(&self) -> String {
        let f1 = self
            .valid_f1
            .map_or("n/a".to_string(), |f| format!("{f:.4}"));
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.2}\t{}",
            self.epoch, self.likelihood, self.reconstruction, self.labeling, self.valid_bleu, f1
        )
    }
}

pub fn format_log(log: &[EpochRecord]) -> String {
    let mut s = String::from(EpochRecord::HEADER);
    s.push('\n');
    for r in log {
        let _ = writeln!(s, "{}", r.to_tsv());
    }
    s
}

/// Held-out sentences with references and optional gold ZP labels.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub sources: Vec<SourceSentence>,
    pub references: Vec<Vec<String>>,
    pub gold: Option<Vec<ZpLabelSequence>>,
}

impl EvalSet {
    pub fn new(docs: &[Document], src_vocab: &Vocab, k: usize) -> Self {
        let has_labels = docs.iter().all(|d| d.labels.is_some());
        Self {
            sources: sources(docs, src_vocab, k),
            references: docs.iter().flat_map(|d| d.tgt.iter().cloned()).collect(),
            gold: has_labels.then(|| {
                docs.iter()
                    .flat_map(|d| d.labels.clone().unwrap())
                    .collect()
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

/// Decoded output of an [`EvalSet`] with its scores.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub bleu: f64,
    pub hypotheses: Vec<Vec<String>>,
    pub labels: Option<Vec<ZpLabelSequence>>,
    /// Against gold labels when both exist.
    pub zp: Option<ZpScores>,
}

pub fn evaluate(
    model: &Model,
    tgt_vocab: &Vocab,
    labels: &LabelSet,
    set: &EvalSet,
    cfg: &DecodeConfig,
    threads: usize,
) -> Result<Evaluation> {
    let out = translate_all(model, &set.sources, cfg, threads)?;
    let hypotheses: Vec<Vec<String>> = out
        .iter()
        .map(|t| tgt_vocab.decode_sentence(t.best.words()))
        .collect();
    let score = bleu(&hypotheses, &set.references)?.score;
    let predicted: Option<Vec<ZpLabelSequence>> = out
        .iter()
        .map(|t| {
            t.labels
                .as_ref()
                .map(|l| ZpLabelSequence::from_ids(l, labels))
        })
        .collect();
    let zp = match (&predicted, &set.gold) {
        (Some(p), Some(g)) => Some(zp_prf(p, g)?),
        _ => None,
    };
    Ok(Evaluation {
        bleu: score,
        hypotheses,
        labels: predicted,
        zp,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    /// 1-based epoch of the selected checkpoint.
    pub best_epoch: usize,
    pub best_bleu: f64,
}

/// Trains `model` in place; on return it holds the checkpoint with the best
/// validation BLEU (ties keep the earlier epoch). `on_epoch` sees each
/// record as soon as it is complete.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut Model,
    examples: &[Example],
    valid: &EvalSet,
    tgt_vocab: &Vocab,
    labels: &LabelSet,
    cfg: &TrainConfig,
    threads: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mc = &model.config;
    if mc.use_labeler && mc.w_l > 0.0 && examples.iter().any(|e| e.zp.is_none()) {
        return Err(Error::contract(
            "the labeler needs ZP labels for every training example",
        ));
    }
    if examples.iter().any(|e| e.y.is_empty()) {
        return Err(Error::contract(
            "every training example needs a target sentence",
        ));
    }
    let decode = DecodeConfig {
        beam: cfg.valid_beam,
        ..DecodeConfig::default()
    };
    let mut opt = Adadelta::default();
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    let mut log = Vec::new();
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let batches = make_batches(
            examples,
            cfg.batch_size,
            cfg.max_len,
            cfg.seed.wrapping_add(epoch as u64),
        )?;
        let (mut l, mut r, mut p) = (0.0, 0.0, 0.0);
        for (bi, batch) in batches.iter().enumerate() {
            let tape = Tape::new();
            let (loss, terms) = match model.joint_loss(&tape, batch) {
                Err(Error::Numeric(_)) => {
                    return Err(Error::Divergence {
                        epoch,
                        batch: bi + 1,
                        loss: f64::NAN,
                    })
                }
                other => other?,
            };
            if !terms.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi + 1,
                    loss: terms.total,
                });
            }
            let grads = tape.backward(loss)?;
            model.store.zero_grads();
            grads.accumulate_into(&mut model.store);
            model.store.clip_grad_norm(cfg.clip);
            opt.step(&mut model.store)?;
            l += terms.likelihood;
            r += terms.reconstruction;
            p += terms.labeling;
        }
        let n = batches.len() as f64;
        let ev = evaluate(model, tgt_vocab, labels, valid, &decode, threads)?;
        let rec = EpochRecord {
            epoch,
            likelihood: l / n,
            reconstruction: r / n,
            labeling: p / n,
            valid_bleu: ev.bleu,
            valid_f1: ev.zp.map(|z| z.word.f1),
        };
        log::info!("{}", rec.to_tsv());
        on_epoch(&rec);
        log.push(rec);
        if best.as_ref().is_none_or(|(b, _, _)| ev.bleu > *b) {
            best = Some((ev.bleu, epoch, model.store.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_bleu, best_epoch, store) = best.expect("at least one epoch ran");
    model.store = store;
    model.store.clear_grads();
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_bleu,
    })
}

/// Sum of absolute labeler gradients after one backward pass; exactly zero
/// when the labeling weight is zero.
pub fn gamma_grad_mass(model: &mut Model, batch: &crate::corpus::Batch) -> Result<f64> {
    let tape = Tape::new();
    let (loss, _) = model.joint_loss(&tape, batch)?;
    let grads = tape.backward(loss)?;
    model.store.zero_grads();
    grads.accumulate_into(&mut model.store);
    let mass = model
        .store
        .iter()
        .filter(|(_, p)| p.group == Group::Gamma)
        .map(|(_, p)| {
            p.grad
                .as_ref()
                .map_or(0.0, |g| g.data().iter().map(|v| v.abs()).sum())
        })
        .sum();
    model.store.clear_grads();
    Ok(mass)
}

/// Train/valid/test documents turned into model inputs with shared
/// vocabularies built from the training side.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub labels: LabelSet,
    pub k: usize,
    pub train: Vec<Example>,
    pub valid: EvalSet,
    pub test: Option<EvalSet>,
}

impl Dataset {
    pub fn new(
        train: &[Document],
        valid: &[Document],
        test: Option<&[Document]>,
        labels: LabelSet,
        k: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset("no training documents".into()));
        }
        let src_vocab = build_vocab(train.iter().flat_map(|d| d.src.iter()), vocab_size)?;
        let tgt_vocab = build_vocab(train.iter().flat_map(|d| d.tgt.iter()), vocab_size)?;
        let with_labels = train.iter().all(|d| d.labels.is_some());
        let examples = make_examples(
            train,
            &src_vocab,
            Some(&tgt_vocab),
            with_labels.then_some(&labels),
            k,
        )?;
        Ok(Self {
            valid: EvalSet::new(valid, &src_vocab, k),
            test: test.map(|t| EvalSet::new(t, &src_vocab, k)),
            src_vocab,
            tgt_vocab,
            labels,
            k,
            train: examples,
        })
    }

    /// Fills the data-dependent sizes of `config`.
    pub fn model_config(&self, config: &ModelConfig) -> ModelConfig {
        ModelConfig {
            src_vocab: self.src_vocab.len(),
            tgt_vocab: self.tgt_vocab.len(),
            labels: self.labels.len(),
            ..config.clone()
        }
    }

    pub fn bundle(&self, model: Model) -> ModelBundle {
        ModelBundle {
            model,
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// One row of the model comparison.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    pub params: usize,
    /// Test BLEU with the row's full decoder (re-scoring when available).
    pub bleu: f64,
    /// Test BLEU with re-scoring switched off; `None` without a reconstructor.
    pub bleu_plain: Option<f64>,
    /// Word-level ZP scores; `None` for rows without a labeler.
    pub zp: Option<ZpScores>,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub evaluation: Evaluation,
    pub model: Model,
}

/// Trains `config` on `data` and scores it on the test split.
pub fn run_row(
    name: &str,
    config: &ModelConfig,
    data: &Dataset,
    train_cfg: &TrainConfig,
    decode: &DecodeConfig,
    threads: usize,
) -> Result<AblationRow> {
    let test = data
        .test
        .as_ref()
        .ok_or_else(|| Error::contract("the comparison needs a test split"))?;
    let mut model = Model::new(data.model_config(config), train_cfg.seed)?;
    let out = train(
        &mut model,
        &data.train,
        &data.valid,
        &data.tgt_vocab,
        &data.labels,
        train_cfg,
        threads,
        |r| log::info!("[{name}] {}", r.to_tsv()),
    )?;
    let evaluation = evaluate(&model, &data.tgt_vocab, &data.labels, test, decode, threads)?;
    let bleu_plain = if model.has_reconstructor() {
        if decode.beta == 0.0 {
            Some(evaluation.bleu)
        } else {
            let plain = DecodeConfig {
                beta: 0.0,
                ..*decode
            };
            Some(evaluate(&model, &data.tgt_vocab, &data.labels, test, &plain, threads)?.bleu)
        }
    } else {
        None
    };
    Ok(AblationRow {
        name: name.to_string(),
        params: model.store.count(None),
        bleu: evaluation.bleu,
        bleu_plain,
        zp: evaluation.zp,
        best_epoch: out.best_epoch,
        log: out.log,
        evaluation,
        model,
    })
}

pub const ABLATION_ROWS: [&str; 4] = ["baseline", "reconstruction", "joint", "discourse"];

/// Trains every row with the same seed and data. `base` supplies dimensions
/// and weights; each row's preset decides which components are present.
pub fn ablation_matrix(
    data: &Dataset,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    decode: &DecodeConfig,
    threads: usize,
) -> Result<Vec<AblationRow>> {
    ABLATION_ROWS
        .iter()
        .map(|name| {
            let p = ModelConfig::preset(name)?;
            let cfg = ModelConfig {
                use_reconstructor: p.use_reconstructor,
                use_labeler: p.use_labeler,
                use_discourse: p.use_discourse,
                ..base.clone()
            };
            run_row(name, &cfg, data, train_cfg, decode, threads)
        })
        .collect()
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s =
        String::from("model\tparams\tbleu\tbleu_no_rescore\tzp_p\tzp_r\tzp_f1\tbest_epoch\n");
    let na = || "n/a".to_string();
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.2}\t{}\t{}\t{}\t{}\t{}",
            r.name,
            r.params,
            r.bleu,
            r.bleu_plain.map_or_else(na, |b| format!("{b:.2}")),
            r.zp.map_or_else(na, |z| format!("{:.4}", z.word.precision)),
            r.zp.map_or_else(na, |z| format!("{:.4}", z.word.recall)),
            r.zp.map_or_else(na, |z| format!("{:.4}", z.word.f1)),
            r.best_epoch
        );
    }
    s
}
