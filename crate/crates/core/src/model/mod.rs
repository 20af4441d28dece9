//! Encoder–decoder–reconstructor with a ZP labeler and a hierarchical
//! discourse encoder.
//!
//! All sequences are processed as padded batches laid out time-major
//! (`row = t·B + b`).
//!
//! * Encoder: bidirectional GRU over source embeddings; `h_enc_t = [→h_t; ←h_t]`.
//! * Decoder: `s_0 = tanh(W ←h_0)`; at step j the attention query is
//!   `[s_{j−1}; e(y_{j−1})]`, `s_j = GRU([e(y_{j−1}); c_j], s_{j−1})` and the
//!   output layer reads `[s_j; c_j; e(y_{j−1})]`.
//! * Reconstructor: reads `x_{t−1}`; `α̂_enc` is queried with
//!   `[e(x_{t−1}); r_{t−1}]`, `α̂_dec` with `[e(x_{t−1}); r_{t−1}; ĉ_enc_t]`;
//!   `r_t = GRU([e(x_{t−1}); ĉ_enc_t; ĉ_dec_t], r_{t−1})`. With discourse
//!   context, `r̂_t = tanh(W_c [r_t; C] + b)` replaces `r_t` for the output
//!   and labeling layers.
//! * Labeler: per-position softmax over `{N} ∪ V_zp` from `r̂_t`.
//! * Discourse: the shared encoder summarises each previous sentence as
//!   `[→h_last; ←h_first]`; a sentence-level GRU starting from a learned
//!   vector runs over them oldest first.

mod config;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{DiscourseTarget, ModelConfig, MODEL_KEYS};

use crate::autodiff::{Tape, Var};
use crate::corpus::{Batch, LabelSet, Padded, Vocab, BOS};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::nn::{Attention, GruCell, Linear};
use crate::params::{Group, ParamId, ParameterStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Reconstructor {
    init: Linear,
    att_enc: Attention,
    att_dec: Attention,
    gru: GruCell,
    out: Linear,
    combine: Option<Linear>,
}

#[derive(Clone, Copy, Debug)]
struct Discourse {
    c0: ParamId,
    gru: GruCell,
}

#[derive(Clone, Copy, Debug)]
struct Layers {
    src_emb: ParamId,
    tgt_emb: ParamId,
    enc_fwd: GruCell,
    enc_bwd: GruCell,
    dec_init: Linear,
    dec_att: Attention,
    dec_gru: GruCell,
    dec_out: Linear,
    rec: Option<Reconstructor>,
    labeler: Option<Linear>,
    discourse: Option<Discourse>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    layers: Layers,
}

/// `h_enc` for a batch.
#[derive(Clone, Debug)]
pub struct EncoderStates {
    /// `[T·B × 2H]`
    pub states: Var,
    /// Final forward state `[B × H]`.
    pub last_fwd: Var,
    /// Backward state at the first position `[B × H]`.
    pub first_bwd: Var,
    pub steps: usize,
    pub batch: usize,
    /// `[B × T]` validity mask.
    pub mask: Vec<f64>,
}

/// `h_dec` for a batch of (forced or generated) targets.
#[derive(Clone, Debug)]
pub struct DecoderStates {
    /// `[T'·B × H]`
    pub states: Var,
    pub steps: usize,
    pub batch: usize,
    /// `[B × T']`
    pub mask: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ReconstructorStates {
    /// `r̂_t` stacked `[T·B × R]` (context-combined when discourse is on).
    pub hidden: Var,
    /// Source-word logits `[T·B × V_src]`.
    pub logits: Var,
    /// Per step `[B × T]`.
    pub att_enc: Vec<Var>,
    /// Per step `[B × T']`.
    pub att_dec: Vec<Var>,
}

/// Output of one decoder step.
#[derive(Clone, Copy, Debug)]
pub struct Step {
    pub logits: Var,
    pub state: Var,
    pub attention: Var,
}

/// Per-token loss terms of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub likelihood: f64,
    pub reconstruction: f64,
    pub labeling: f64,
    pub total: f64,
}

fn col(tape: &Tape, mask: &[f64]) -> Option<Var> {
    if mask.iter().all(|&m| m == 1.0) {
        None
    } else {
        Some(tape.constant(Tensor::from_parts(mask.len(), 1, mask.to_vec())))
    }
}

fn zeros(tape: &Tape, rows: usize, cols: usize) -> Var {
    tape.constant(Tensor::zeros(&[rows, cols]))
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParameterStore::new();
        let th = Group::Theta;
        let (e, h, r, a) = (c.emb, c.hidden, c.rec_hidden, c.att);
        let src_emb = s.add_uniform("src_emb", th, &[c.src_vocab, e], 0.1, &mut rng)?;
        let tgt_emb = s.add_uniform("tgt_emb", th, &[c.tgt_vocab, e], 0.1, &mut rng)?;
        let enc_fwd = GruCell::new(&mut s, "encoder.fwd", e, h, th, &mut rng)?;
        let enc_bwd = GruCell::new(&mut s, "encoder.bwd", e, h, th, &mut rng)?;
        let ctx_to_decoder = c.use_discourse && c.discourse_target == DiscourseTarget::Decoder;
        let init_in = h + if ctx_to_decoder { c.ctx_hidden } else { 0 };
        let dec_init = Linear::new(&mut s, "decoder.init", init_in, h, true, th, &mut rng)?;
        let dec_att = Attention::new(&mut s, "decoder.att", 2 * h, h + e, a, th, &mut rng)?;
        let dec_gru = GruCell::new(&mut s, "decoder.gru", e + 2 * h, h, th, &mut rng)?;
        let dec_out = Linear::new(
            &mut s,
            "decoder.out",
            h + 2 * h + e,
            c.tgt_vocab,
            true,
            th,
            &mut rng,
        )?;
        let rec = if c.use_reconstructor {
            let combine = if c.use_discourse && c.discourse_target == DiscourseTarget::Reconstructor
            {
                Some(Linear::new(
                    &mut s,
                    "reconstructor.combine",
                    r + c.ctx_hidden,
                    r,
                    true,
                    th,
                    &mut rng,
                )?)
            } else {
                None
            };
            Some(Reconstructor {
                init: Linear::new(&mut s, "reconstructor.init", h, r, true, th, &mut rng)?,
                att_enc: Attention::new(
                    &mut s,
                    "reconstructor.att_enc",
                    2 * h,
                    e + r,
                    a,
                    th,
                    &mut rng,
                )?,
                att_dec: Attention::new(
                    &mut s,
                    "reconstructor.att_dec",
                    h,
                    e + r + 2 * h,
                    a,
                    th,
                    &mut rng,
                )?,
                gru: GruCell::new(&mut s, "reconstructor.gru", e + 2 * h + h, r, th, &mut rng)?,
                out: Linear::new(
                    &mut s,
                    "reconstructor.out",
                    r + 2 * h + h + e,
                    c.src_vocab,
                    true,
                    th,
                    &mut rng,
                )?,
                combine,
            })
        } else {
            None
        };
        let labeler = if c.use_labeler {
            Some(Linear::new(
                &mut s,
                "labeler.out",
                r,
                c.labels,
                true,
                Group::Gamma,
                &mut rng,
            )?)
        } else {
            None
        };
        let discourse = if c.use_discourse {
            Some(Discourse {
                c0: s.add_uniform("discourse.c0", th, &[1, c.ctx_hidden], 0.1, &mut rng)?,
                gru: GruCell::new(&mut s, "discourse.gru", 2 * h, c.ctx_hidden, th, &mut rng)?,
            })
        } else {
            None
        };
        let layers = Layers {
            src_emb,
            tgt_emb,
            enc_fwd,
            enc_bwd,
            dec_init,
            dec_att,
            dec_gru,
            dec_out,
            rec,
            labeler,
            discourse,
        };
        Ok(Self {
            config,
            store: s,
            layers,
        })
    }

    /// Rebuilds the layout for `config` and loads values from `store`.
    pub fn with_params(config: ModelConfig, store: &ParameterStore) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        if store.len() != m.store.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} parameters, configuration expects {}",
                store.len(),
                m.store.len()
            )));
        }
        m.store.copy_values_from(store)?;
        Ok(m)
    }

    pub fn has_reconstructor(&self) -> bool {
        self.layers.rec.is_some()
    }

    pub fn has_labeler(&self) -> bool {
        self.layers.labeler.is_some()
    }

    fn embed(&self, tape: &Tape, table: ParamId, ids: &[usize]) -> Result<Var> {
        tape.gather(tape.param(&self.store, table), ids)
    }

    /// Like [`encode`](Self::encode) but allows empty rows (context slots).
    fn encode_padded(&self, tape: &Tape, x: &Padded) -> Result<EncoderStates> {
        let (b, h) = (x.batch, self.config.hidden);
        let l = &self.layers;
        let mut fwd = Vec::with_capacity(x.steps);
        let mut hf = zeros(tape, b, h);
        let inputs: Vec<Var> = (0..x.steps)
            .map(|t| self.embed(tape, l.src_emb, x.ids_at(t)))
            .collect::<Result<_>>()?;
        for (t, &xt) in inputs.iter().enumerate() {
            hf = l
                .enc_fwd
                .step_masked(tape, &self.store, xt, hf, col(tape, x.mask_at(t)))?;
            fwd.push(hf);
        }
        let mut bwd = vec![hf; x.steps];
        let mut hb = zeros(tape, b, h);
        for t in (0..x.steps).rev() {
            hb =
                l.enc_bwd
                    .step_masked(tape, &self.store, inputs[t], hb, col(tape, x.mask_at(t)))?;
            bwd[t] = hb;
        }
        let per_step: Vec<Var> = fwd
            .iter()
            .zip(&bwd)
            .map(|(&f, &bk)| tape.concat(&[f, bk]))
            .collect::<Result<_>>()?;
        Ok(EncoderStates {
            states: tape.stack_rows(&per_step)?,
            last_fwd: hf,
            first_bwd: hb,
            steps: x.steps,
            batch: b,
            mask: x.mask_bt(),
        })
    }

    /// Bidirectional encoding of a padded source batch.
    pub fn encode(&self, tape: &Tape, x: &Padded) -> Result<EncoderStates> {
        if x.steps == 0 || x.lens.contains(&0) {
            return Err(Error::contract("cannot encode an empty source sentence"));
        }
        self.encode_padded(tape, x)
    }

    /// Summarises previous sentences into `C [B × ctx_hidden]`. `slots` are
    /// oldest first; `mask` is `[slots × B]`. Rows with no sentence in a slot
    /// keep their state, so no context at all yields the learned initial
    /// vector.
    pub fn encode_discourse(
        &self,
        tape: &Tape,
        slots: &[Padded],
        mask: &[f64],
        batch: usize,
    ) -> Result<Var> {
        let d = self
            .layers
            .discourse
            .ok_or_else(|| Error::contract("model has no discourse encoder"))?;
        let mut c = tape.gather(tape.param(&self.store, d.c0), &vec![0; batch])?;
        for (j, slot) in slots.iter().enumerate() {
            if slot.steps == 0 {
                continue;
            }
            let enc = self.encode_padded(tape, slot)?;
            let summary = tape.concat(&[enc.last_fwd, enc.first_bwd])?;
            let m = &mask[j * batch..(j + 1) * batch];
            c = d
                .gru
                .step_masked(tape, &self.store, summary, c, col(tape, m))?;
        }
        Ok(c)
    }

    /// `tanh(W [h_rec; C] + b)`.
    pub fn combine_context(&self, tape: &Tape, h_rec: Var, ctx: Var) -> Result<Var> {
        let lin = self.layers.rec.and_then(|r| r.combine).ok_or_else(|| {
            Error::contract("model does not combine context into the reconstructor")
        })?;
        Ok(tape.tanh(lin.forward(tape, &self.store, tape.concat(&[h_rec, ctx])?)?))
    }

    fn discourse_for_decoder(&self) -> bool {
        self.config.use_discourse && self.config.discourse_target == DiscourseTarget::Decoder
    }

    fn discourse_for_reconstructor(&self) -> bool {
        self.config.use_discourse && self.config.discourse_target == DiscourseTarget::Reconstructor
    }

    pub fn decoder_init(&self, tape: &Tape, enc: &EncoderStates, ctx: Option<Var>) -> Result<Var> {
        let input = match (self.discourse_for_decoder(), ctx) {
            (true, Some(c)) => tape.concat(&[enc.first_bwd, c])?,
            (true, None) => {
                return Err(Error::contract(
                    "decoder-side discourse needs a context vector",
                ))
            }
            (false, _) => enc.first_bwd,
        };
        Ok(tape.tanh(self.layers.dec_init.forward(tape, &self.store, input)?))
    }

    /// Attention keys over `h_enc`, computed once per source batch.
    pub fn decoder_keys(&self, tape: &Tape, enc: &EncoderStates) -> Result<Var> {
        self.layers.dec_att.keys(tape, &self.store, enc.states)
    }

    /// One step: attend with `[s; e(prev)]`, update the state, emit logits.
    pub fn decoder_step(
        &self,
        tape: &Tape,
        enc: &EncoderStates,
        keys: Var,
        state: Var,
        prev: &[usize],
    ) -> Result<Step> {
        let l = &self.layers;
        let e = self.embed(tape, l.tgt_emb, prev)?;
        let q = tape.concat(&[state, e])?;
        let (attention, c) = l
            .dec_att
            .attend(tape, &self.store, keys, enc.states, q, &enc.mask)?;
        let s = l
            .dec_gru
            .step(tape, &self.store, tape.concat(&[e, c])?, state)?;
        let logits = l
            .dec_out
            .forward(tape, &self.store, tape.concat(&[s, c, e])?)?;
        Ok(Step {
            logits,
            state: s,
            attention,
        })
    }

    /// Teacher-forced decoding of `y`; returns the states and stacked logits
    /// `[T'·B × V_tgt]`.
    pub fn force_decode(
        &self,
        tape: &Tape,
        enc: &EncoderStates,
        y: &Padded,
        ctx: Option<Var>,
    ) -> Result<(DecoderStates, Var)> {
        if y.steps == 0 {
            return Err(Error::contract("cannot force-decode an empty target"));
        }
        let keys = self.decoder_keys(tape, enc)?;
        let mut s = self.decoder_init(tape, enc, ctx)?;
        let mut states = Vec::with_capacity(y.steps);
        let mut logits = Vec::with_capacity(y.steps);
        let mut prev = vec![BOS; y.batch];
        for t in 0..y.steps {
            let step = self.decoder_step(tape, enc, keys, s, &prev)?;
            s = step.state;
            states.push(s);
            logits.push(step.logits);
            prev = y.ids_at(t).to_vec();
        }
        Ok((
            DecoderStates {
                states: tape.stack_rows(&states)?,
                steps: y.steps,
                batch: y.batch,
                mask: y.mask_bt(),
            },
            tape.stack_rows(&logits)?,
        ))
    }

    /// Runs the reconstructor over the source `x` given encoder and decoder
    /// states; `ctx` is combined into every state when discourse targets the
    /// reconstructor.
    pub fn reconstruct(
        &self,
        tape: &Tape,
        x: &Padded,
        enc: &EncoderStates,
        dec: &DecoderStates,
        ctx: Option<Var>,
    ) -> Result<ReconstructorStates> {
        let rc = self
            .layers
            .rec
            .ok_or_else(|| Error::contract("model has no reconstructor"))?;
        if x.steps != enc.steps || x.batch != enc.batch || dec.batch != enc.batch {
            return Err(Error::contract(format!(
                "reconstructor inputs disagree: source {}×{}, encoder {}×{}, decoder batch {}",
                x.steps, x.batch, enc.steps, enc.batch, dec.batch
            )));
        }
        let ctx = match (self.discourse_for_reconstructor(), ctx) {
            (true, Some(c)) => Some(c),
            (true, None) => {
                return Err(Error::contract(
                    "reconstructor-side discourse needs a context vector",
                ))
            }
            (false, _) => None,
        };
        let st = &self.store;
        let b = x.batch;
        let keys_enc = rc.att_enc.keys(tape, st, enc.states)?;
        let keys_dec = rc.att_dec.keys(tape, st, dec.states)?;
        let mut r = tape.tanh(rc.init.forward(tape, st, enc.first_bwd)?);
        let (mut hidden, mut logits) = (Vec::with_capacity(x.steps), Vec::with_capacity(x.steps));
        let (mut att_enc, mut att_dec) = (Vec::with_capacity(x.steps), Vec::with_capacity(x.steps));
        let blank = zeros(tape, b, 2 * self.config.hidden);
        for t in 0..x.steps {
            let prev: Vec<usize> = if t == 0 {
                vec![BOS; b]
            } else {
                x.ids_at(t - 1).to_vec()
            };
            let e = self.embed(tape, self.layers.src_emb, &prev)?;
            let (ae, ce) = rc.att_enc.attend(
                tape,
                st,
                keys_enc,
                enc.states,
                tape.concat(&[e, r])?,
                &enc.mask,
            )?;
            let coupling = if self.config.interactive { ce } else { blank };
            let (ad, cd) = rc.att_dec.attend(
                tape,
                st,
                keys_dec,
                dec.states,
                tape.concat(&[e, r, coupling])?,
                &dec.mask,
            )?;
            r = rc.gru.step(tape, st, tape.concat(&[e, ce, cd])?, r)?;
            let rh = match ctx {
                Some(c) => self.combine_context(tape, r, c)?,
                None => r,
            };
            logits.push(rc.out.forward(tape, st, tape.concat(&[rh, ce, cd, e])?)?);
            hidden.push(rh);
            att_enc.push(ae);
            att_dec.push(ad);
        }
        Ok(ReconstructorStates {
            hidden: tape.stack_rows(&hidden)?,
            logits: tape.stack_rows(&logits)?,
            att_enc,
            att_dec,
        })
    }

    /// Label logits `[T·B × |labels|]` from reconstructor states.
    pub fn label_logits(&self, tape: &Tape, rec: &ReconstructorStates) -> Result<Var> {
        let lab = self
            .layers
            .labeler
            .ok_or_else(|| Error::contract("model has no labeler"))?;
        lab.forward(tape, &self.store, rec.hidden)
    }

    /// Per-position distributions over `{N} ∪ V_zp`.
    pub fn label_zp(&self, tape: &Tape, rec: &ReconstructorStates) -> Result<Var> {
        tape.softmax(self.label_logits(tape, rec)?)
    }

    fn context(&self, tape: &Tape, batch: &Batch) -> Result<Option<Var>> {
        if self.config.use_discourse {
            Ok(Some(self.encode_discourse(
                tape,
                &batch.context,
                &batch.context_mask,
                batch.size(),
            )?))
        } else {
            Ok(None)
        }
    }

    /// `L/|y| + w_r·R/|x| + w_l·P/|x|` as negative log-likelihoods, each term
    /// summed over non-padding tokens and divided by their count.
    pub fn joint_loss(&self, tape: &Tape, batch: &Batch) -> Result<(Var, LossTerms)> {
        let c = &self.config;
        if c.use_labeler && c.w_l > 0.0 && batch.labels.is_none() {
            return Err(Error::contract(
                "the labeler needs ZP labels for every example",
            ));
        }
        let ctx = self.context(tape, batch)?;
        let enc = self.encode(tape, &batch.src)?;
        let (dec, logits) = self.force_decode(tape, &enc, &batch.tgt, ctx)?;
        let ny = batch.tgt.tokens() as f64;
        let nx = batch.src.tokens() as f64;
        let l = tape.scale(
            tape.cross_entropy_logits(logits, &batch.tgt.ids, &batch.tgt.mask)?,
            1.0 / ny,
        );
        let mut terms = LossTerms {
            likelihood: tape.value(l).item(),
            ..LossTerms::default()
        };
        let mut total = l;
        if self.has_reconstructor() && (c.w_r > 0.0 || (c.use_labeler && c.w_l > 0.0)) {
            let rec = self.reconstruct(tape, &batch.src, &enc, &dec, ctx)?;
            if c.w_r > 0.0 {
                let r = tape.scale(
                    tape.cross_entropy_logits(rec.logits, &batch.src.ids, &batch.src.mask)?,
                    1.0 / nx,
                );
                terms.reconstruction = tape.value(r).item();
                total = tape.add(total, tape.scale(r, c.w_r))?;
            }
            if c.use_labeler && c.w_l > 0.0 {
                let labels = batch.labels.as_ref().expect("checked above");
                let ll = self.label_logits(tape, &rec)?;
                let p = tape.scale(
                    tape.cross_entropy_logits(ll, labels, &batch.src.mask)?,
                    1.0 / nx,
                );
                terms.labeling = tape.value(p).item();
                total = tape.add(total, tape.scale(p, c.w_l))?;
            }
        }
        terms.total = tape.value(total).item();
        Ok((total, terms))
    }

    /// Parameter counts per group and component.
    pub fn describe(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("params.total", self.store.count(None));
        kv.set("params.theta", self.store.count(Some(Group::Theta)));
        kv.set("params.gamma", self.store.count(Some(Group::Gamma)));
        let mut by: std::collections::BTreeMap<String, usize> = Default::default();
        for (_, p) in self.store.iter() {
            let comp = p.name.split('.').next().unwrap_or(&p.name);
            let comp = if comp.ends_with("_emb") {
                "embeddings"
            } else {
                comp
            };
            *by.entry(comp.to_string()).or_default() += p.value.len();
        }
        for (k, v) in by {
            kv.set(&format!("params.{k}"), v);
        }
        kv
    }
}

pub const CONFIG_FILE: &str = "model.cfg";
pub const PARAMS_FILE: &str = "params.ckpt";
pub const SRC_VOCAB_FILE: &str = "src.vocab";
pub const TGT_VOCAB_FILE: &str = "tgt.vocab";
pub const LABELS_FILE: &str = "labels.vocab";

/// A model together with the vocabularies it was trained with.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub model: Model,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub labels: LabelSet,
}

impl ModelBundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.config.to_kv().save(&dir.join(CONFIG_FILE))?;
        self.model.store.save(&dir.join(PARAMS_FILE))?;
        self.src_vocab.save(&dir.join(SRC_VOCAB_FILE))?;
        self.tgt_vocab.save(&dir.join(TGT_VOCAB_FILE))?;
        let body: String = self
            .labels
            .pronouns()
            .iter()
            .map(|p| format!("{p}\n"))
            .collect();
        std::fs::write(dir.join(LABELS_FILE), body)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let kv = KeyValues::load(&dir.join(CONFIG_FILE))?;
        kv.reject_unknown(&MODEL_KEYS)?;
        let config = ModelConfig::default().apply(&kv)?;
        let store = ParameterStore::load(&dir.join(PARAMS_FILE))?;
        let pronouns: Vec<String> = std::fs::read_to_string(dir.join(LABELS_FILE))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Ok(Self {
            model: Model::with_params(config, &store)?,
            src_vocab: Vocab::load(&dir.join(SRC_VOCAB_FILE))?,
            tgt_vocab: Vocab::load(&dir.join(TGT_VOCAB_FILE))?,
            labels: LabelSet::new(&pronouns)?,
        })
    }
}
