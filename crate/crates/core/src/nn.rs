//! Layers shared by every model component: affine maps, the gated recurrent
//! cell and additive attention.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{Group, ParamId, ParameterStore};

fn init_scale(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt().min(0.2)
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        group: Group,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_uniform(
            &format!("{name}.w"),
            group,
            &[input, output],
            init_scale(input),
            rng,
        )?;
        let b = if bias {
            Some(store.add_zeros(&format!("{name}.b"), group, &[1, output])?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            input,
            output,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let y = tape.matmul(x, tape.param(store, self.w))?;
        match self.b {
            Some(b) => tape.add_row(y, tape.param(store, b)),
            None => Ok(y),
        }
    }
}

/// Gated recurrent unit:
///
/// ```text
/// z = σ(x W_z + h U_z + b_z)        r = σ(x W_r + h U_r + b_r)
/// h̃ = tanh(x W_h + (r ⊙ h) U_h + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
///
/// `w_x` packs `[W_z | W_r | W_h]`, `w_hzr` packs `[U_z | U_r]`.
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub w_x: ParamId,
    pub w_hzr: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        hidden: usize,
        group: Group,
        rng: &mut R,
    ) -> Result<Self> {
        let sx = init_scale(input);
        let sh = init_scale(hidden);
        Ok(Self {
            w_x: store.add_uniform(&format!("{name}.w_x"), group, &[input, 3 * hidden], sx, rng)?,
            w_hzr: store.add_uniform(
                &format!("{name}.w_hzr"),
                group,
                &[hidden, 2 * hidden],
                sh,
                rng,
            )?,
            w_hh: store.add_uniform(&format!("{name}.w_hh"), group, &[hidden, hidden], sh, rng)?,
            b: store.add_zeros(&format!("{name}.b"), group, &[1, 3 * hidden])?,
            input,
            hidden,
        })
    }

    pub fn step(&self, tape: &Tape, store: &ParameterStore, x: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let xw = tape.add_row(
            tape.matmul(x, tape.param(store, self.w_x))?,
            tape.param(store, self.b),
        )?;
        let hu = tape.matmul(h, tape.param(store, self.w_hzr))?;
        let zr = tape.sigmoid(tape.add(tape.slice_cols(xw, 0, 2 * hd)?, hu)?);
        let z = tape.slice_cols(zr, 0, hd)?;
        let r = tape.slice_cols(zr, hd, 2 * hd)?;
        let rh = tape.matmul(tape.mul(r, h)?, tape.param(store, self.w_hh))?;
        let cand = tape.tanh(tape.add(tape.slice_cols(xw, 2 * hd, 3 * hd)?, rh)?);
        let delta = tape.mul(z, tape.sub(cand, h)?)?;
        tape.add(h, delta)
    }

    /// Like [`step`](Self::step), but rows whose `mask` entry is 0 keep `h`
    /// unchanged (padding).
    pub fn step_masked(
        &self,
        tape: &Tape,
        store: &ParameterStore,
        x: Var,
        h: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let next = self.step(tape, store, x, h)?;
        match mask {
            None => Ok(next),
            Some(m) => {
                let diff = tape.sub(next, h)?;
                tape.add(h, tape.mul_col(diff, m)?)
            }
        }
    }
}

/// One recurrence step `h_t = GRU(x_t, h_{t−1})`.
pub fn gru_step(
    tape: &Tape,
    store: &ParameterStore,
    cell: &GruCell,
    x: Var,
    h_prev: Var,
) -> Result<Var> {
    cell.step(tape, store, x, h_prev)
}

/// Single-hidden-layer additive scorer: `e_s = vᵀ tanh(W_k m_s + W_q q)`.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub key: Linear,
    pub query: Linear,
    pub v: ParamId,
}

impl Attention {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        memory_dim: usize,
        query_dim: usize,
        att_dim: usize,
        group: Group,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            key: Linear::new(
                store,
                &format!("{name}.key"),
                memory_dim,
                att_dim,
                false,
                group,
                rng,
            )?,
            query: Linear::new(
                store,
                &format!("{name}.query"),
                query_dim,
                att_dim,
                true,
                group,
                rng,
            )?,
            v: store.add_uniform(
                &format!("{name}.v"),
                group,
                &[att_dim, 1],
                init_scale(att_dim),
                rng,
            )?,
        })
    }

    /// Projects time-major memory `[S·B × d]` to keys once per sequence.
    pub fn keys(&self, tape: &Tape, store: &ParameterStore, memory: Var) -> Result<Var> {
        self.key.forward(tape, store, memory)
    }

    /// Returns `(weights [B×S], context [B×d])`. `mask` is `[B×S]` row-major.
    pub fn attend(
        &self,
        tape: &Tape,
        store: &ParameterStore,
        keys: Var,
        memory: Var,
        query_input: Var,
        mask: &[f64],
    ) -> Result<(Var, Var)> {
        let q = self.query.forward(tape, store, query_input)?;
        let e = tape.attn_scores(keys, q, tape.param(store, self.v))?;
        let w = tape.softmax_masked(e, Some(mask))?;
        let c = tape.attn_context(w, memory)?;
        Ok((w, c))
    }
}
