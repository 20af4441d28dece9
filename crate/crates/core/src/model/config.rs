use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KeyValues;

/// Which component receives the discourse context vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscourseTarget {
    Reconstructor,
    Decoder,
}

impl FromStr for DiscourseTarget {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "reconstructor" => Ok(Self::Reconstructor),
            "decoder" => Ok(Self::Decoder),
            _ => Err(format!("unknown discourse target {s}")),
        }
    }
}

impl fmt::Display for DiscourseTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Reconstructor => "reconstructor",
            Self::Decoder => "decoder",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// `|V_zp| + 1`.
    pub labels: usize,
    pub emb: usize,
    pub hidden: usize,
    pub rec_hidden: usize,
    pub ctx_hidden: usize,
    pub att: usize,
    /// Previous sentences fed to the discourse encoder.
    pub k: usize,
    pub use_reconstructor: bool,
    pub use_labeler: bool,
    pub use_discourse: bool,
    pub discourse_target: DiscourseTarget,
    /// Feed the encoder-side reconstructor context into the decoder-side
    /// attention query; when off a zero vector takes its place.
    pub interactive: bool,
    pub w_r: f64,
    pub w_l: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            src_vocab: 0,
            tgt_vocab: 0,
            labels: 1,
            emb: 32,
            hidden: 64,
            rec_hidden: 64,
            ctx_hidden: 64,
            att: 64,
            k: 3,
            use_reconstructor: true,
            use_labeler: true,
            use_discourse: false,
            discourse_target: DiscourseTarget::Reconstructor,
            interactive: true,
            w_r: 1.0,
            w_l: 1.0,
        }
    }
}

pub const MODEL_KEYS: [&str; 17] = [
    "src_vocab",
    "tgt_vocab",
    "labels",
    "emb",
    "hidden",
    "rec_hidden",
    "ctx_hidden",
    "att",
    "k",
    "use_reconstructor",
    "use_labeler",
    "use_discourse",
    "discourse_target",
    "interactive",
    "w_r",
    "w_l",
    "preset",
];

impl ModelConfig {
    /// The four model rows compared throughout: `baseline`,
    /// `reconstruction`, `joint`, `discourse`.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        Ok(match name {
            "baseline" => Self {
                use_reconstructor: false,
                use_labeler: false,
                ..base
            },
            "reconstruction" => Self {
                use_labeler: false,
                ..base
            },
            "joint" => base,
            "discourse" => Self {
                use_discourse: true,
                ..base
            },
            _ => return Err(Error::Usage(format!("unknown model preset {name}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("labels", self.labels),
            ("emb", self.emb),
            ("hidden", self.hidden),
            ("rec_hidden", self.rec_hidden),
            ("ctx_hidden", self.ctx_hidden),
            ("att", self.att),
        ];
        if let Some((k, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!(
                "model dimension {k} must be positive"
            )));
        }
        if self.use_labeler && !self.use_reconstructor {
            return Err(Error::contract(
                "the labeler reads reconstructor states: use_labeler needs use_reconstructor",
            ));
        }
        if self.use_discourse
            && self.discourse_target == DiscourseTarget::Reconstructor
            && !self.use_reconstructor
        {
            return Err(Error::contract(
                "discourse_target=reconstructor needs use_reconstructor",
            ));
        }
        if !(self.w_r >= 0.0 && self.w_l >= 0.0) {
            return Err(Error::contract("loss weights must be non-negative"));
        }
        Ok(())
    }

    /// Applies keys from `kv` on top of `self` (a `preset` key is applied
    /// first).
    pub fn apply(mut self, kv: &KeyValues) -> Result<Self> {
        if let Some(p) = kv.get_str("preset") {
            let keep = (self.src_vocab, self.tgt_vocab, self.labels);
            self = Self::preset(p)?;
            (self.src_vocab, self.tgt_vocab, self.labels) = keep;
        }
        kv.read_into("src_vocab", &mut self.src_vocab)?;
        kv.read_into("tgt_vocab", &mut self.tgt_vocab)?;
        kv.read_into("labels", &mut self.labels)?;
        kv.read_into("emb", &mut self.emb)?;
        kv.read_into("hidden", &mut self.hidden)?;
        kv.read_into("rec_hidden", &mut self.rec_hidden)?;
        kv.read_into("ctx_hidden", &mut self.ctx_hidden)?;
        kv.read_into("att", &mut self.att)?;
        kv.read_into("k", &mut self.k)?;
        kv.read_into("use_reconstructor", &mut self.use_reconstructor)?;
        kv.read_into("use_labeler", &mut self.use_labeler)?;
        kv.read_into("use_discourse", &mut self.use_discourse)?;
        kv.read_into("discourse_target", &mut self.discourse_target)?;
        kv.read_into("interactive", &mut self.interactive)?;
        kv.read_into("w_r", &mut self.w_r)?;
        kv.read_into("w_l", &mut self.w_l)?;
        Ok(self)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("src_vocab", self.src_vocab);
        kv.set("tgt_vocab", self.tgt_vocab);
        kv.set("labels", self.labels);
        kv.set("emb", self.emb);
        kv.set("hidden", self.hidden);
        kv.set("rec_hidden", self.rec_hidden);
        kv.set("ctx_hidden", self.ctx_hidden);
        kv.set("att", self.att);
        kv.set("k", self.k);
        kv.set("use_reconstructor", self.use_reconstructor);
        kv.set("use_labeler", self.use_labeler);
        kv.set("use_discourse", self.use_discourse);
        kv.set("discourse_target", self.discourse_target);
        kv.set("interactive", self.interactive);
        kv.set("w_r", self.w_r);
        kv.set("w_l", self.w_l);
        kv
    }

    /// Context window actually used by the model.
    pub fn window(&self) -> usize {
        if self.use_discourse {
            self.k
        } else {
            0
        }
    }
}
