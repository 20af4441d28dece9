//! Finite-difference checks of the full model: joint loss, the interactive
//! reconstructor coupling, context combination and loss-term linearity.

mod common;

use common::{check_params, close, H};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zpmt::autodiff::{Tape, Var};
use zpmt::corpus::{Batch, Example, Padded, EOS};
use zpmt::model::{Model, ModelConfig};
use zpmt::params::ParameterStore;
use zpmt::Result;

fn tiny(preset: &str) -> ModelConfig {
    ModelConfig {
        src_vocab: 10,
        tgt_vocab: 11,
        labels: 4,
        emb: 4,
        hidden: 5,
        rec_hidden: 6,
        ctx_hidden: 3,
        att: 4,
        k: 2,
        ..ModelConfig::preset(preset).unwrap()
    }
}

fn sentence(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<usize> {
    let n = rng.gen_range(1..4);
    let mut s: Vec<usize> = (0..n).map(|_| rng.gen_range(4..vocab)).collect();
    s.push(EOS);
    s
}

fn random_batch(seed: u64, cfg: &ModelConfig) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples: Vec<Example> = (0..2)
        .map(|i| {
            let x = sentence(&mut rng, cfg.src_vocab);
            let zp = x.iter().map(|_| rng.gen_range(0..cfg.labels)).collect();
            let ctx = (0..rng.gen_range(0..=cfg.k))
                .map(|_| sentence(&mut rng, cfg.src_vocab))
                .collect();
            Example {
                y: sentence(&mut rng, cfg.tgt_vocab),
                x,
                zp: Some(zp),
                context: ctx,
                doc: 0,
                sent: i,
            }
        })
        .collect();
    Batch::from_examples(&examples.iter().collect::<Vec<_>>(), vec![0, 1])
}

fn joint(config: &ModelConfig, batch: &Batch) -> impl Fn(&Tape, &ParameterStore) -> Result<Var> {
    let config = config.clone();
    let batch = batch.clone();
    move |tape: &Tape, store: &ParameterStore| {
        let m = Model::with_params(config.clone(), store)?;
        Ok(m.joint_loss(tape, &batch)?.0)
    }
}

#[test]
fn joint_loss_gradients_match_finite_differences() {
    for preset in ["joint", "discourse"] {
        for seed in 0..20 {
            let cfg = tiny(preset);
            let mut m = Model::new(cfg.clone(), seed).unwrap();
            let batch = random_batch(seed + 100, &cfg);
            let n = check_params(&mut m.store, joint(&cfg, &batch), 1e-3, 1e-7)
                .unwrap_or_else(|e| panic!("{preset} seed {seed}: {e}"));
            assert_eq!(n, m.store.count(None));
        }
    }
}

/// Reconstruction log-score of the batch source given forced targets.
fn rec_score(
    config: &ModelConfig,
    batch: &Batch,
) -> impl Fn(&Tape, &ParameterStore) -> Result<Var> {
    let config = config.clone();
    let batch = batch.clone();
    move |tape: &Tape, store: &ParameterStore| {
        let m = Model::with_params(config.clone(), store)?;
        let enc = m.encode(tape, &batch.src)?;
        let (dec, _) = m.force_decode(tape, &enc, &batch.tgt, None)?;
        let rec = m.reconstruct(tape, &batch.src, &enc, &dec, None)?;
        let ce = tape.cross_entropy_logits(rec.logits, &batch.src.ids, &batch.src.mask)?;
        Ok(tape.scale(ce, -1.0))
    }
}

fn numeric(
    store: &mut ParameterStore,
    name: &str,
    f: &impl Fn(&Tape, &ParameterStore) -> Result<Var>,
) -> Vec<f64> {
    let id = store.id(name).unwrap();
    let eval = |s: &ParameterStore| {
        let t = Tape::new();
        let v = f(&t, s).unwrap();
        t.value(v).item()
    };
    (0..store.value(id).len())
        .map(|j| {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + H;
            let p = eval(store);
            store.value_mut(id).data_mut()[j] = orig - H;
            let m = eval(store);
            store.value_mut(id).data_mut()[j] = orig;
            (p - m) / (2.0 * H)
        })
        .collect()
}

fn analytic(
    store: &ParameterStore,
    name: &str,
    f: &impl Fn(&Tape, &ParameterStore) -> Result<Var>,
) -> Vec<f64> {
    let t = Tape::new();
    let v = f(&t, store).unwrap();
    let g = t.backward(v).unwrap();
    let id = store.id(name).unwrap();
    g.param(id)
        .map_or(vec![0.0; store.value(id).len()], |g| g.data().to_vec())
}

#[test]
fn encoder_side_attention_reaches_score_through_both_paths() {
    let name = "reconstructor.att_enc.query.w";
    let on = tiny("joint");
    let off = ModelConfig {
        interactive: false,
        ..on.clone()
    };
    for seed in 0..5 {
        let batch = random_batch(seed + 7, &on);
        let mut store = Model::new(on.clone(), seed).unwrap().store;
        // widen the initial weights so attention is far from uniform
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            store
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|w| *w = rng.gen_range(-0.8..0.8));
        }
        let f_on = rec_score(&on, &batch);
        let f_off = rec_score(&off, &batch);
        let n_on = numeric(&mut store, name, &f_on);
        let n_off = numeric(&mut store, name, &f_off);
        for (a, n) in analytic(&store, name, &f_on).iter().zip(&n_on) {
            assert!(close(*a, *n, 1e-3, 1e-7), "coupled: {a} vs {n}");
        }
        for (a, n) in analytic(&store, name, &f_off).iter().zip(&n_off) {
            assert!(close(*a, *n, 1e-3, 1e-7), "severed: {a} vs {n}");
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = n_on.iter().zip(&n_off).map(|(a, b)| a - b).collect();
        assert!(
            norm(&n_off) > 1e-4,
            "seed {seed}: direct path carries no gradient"
        );
        // the coupled score differs by the path through the decoder-side query
        assert!(
            norm(&diff) > 1e-3 * norm(&n_on),
            "seed {seed}: coupling adds no gradient"
        );
    }
}

#[test]
fn labeling_loss_reaches_sentence_level_encoder() {
    let cfg = ModelConfig {
        w_r: 0.0,
        ..tiny("discourse")
    };
    for seed in 0..5 {
        let mut batch = random_batch(seed + 11, &cfg);
        // make sure at least one example has context
        if batch.context.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sentence(&mut rng, cfg.src_vocab);
            batch.context = vec![Padded::new(&[&s[..], &s[..]])];
            batch.context_mask = vec![1.0, 1.0];
        }
        let mut store = Model::new(cfg.clone(), seed).unwrap().store;
        // likelihood ignores the context here, so only the labeling term reaches it
        let labeling = joint(&cfg, &batch);
        for name in [
            "discourse.gru.w_x",
            "discourse.c0",
            "reconstructor.combine.w",
        ] {
            let n = numeric(&mut store, name, &labeling);
            let a = analytic(&store, name, &labeling);
            assert!(
                n.iter().any(|v| v.abs() > 1e-8),
                "seed {seed}: no gradient into {name}"
            );
            for (a, n) in a.iter().zip(&n) {
                assert!(close(*a, *n, 1e-3, 1e-7), "{name}: {a} vs {n}");
            }
        }
    }
}

fn grads(cfg: &ModelConfig, store: &ParameterStore, batch: &Batch) -> Vec<f64> {
    let f = joint(cfg, batch);
    let t = Tape::new();
    let v = f(&t, store).unwrap();
    let g = t.backward(v).unwrap();
    store
        .iter()
        .flat_map(|(id, p)| {
            g.param(id)
                .map_or(vec![0.0; p.value.len()], |g| g.data().to_vec())
        })
        .collect()
}

#[test]
fn total_gradient_is_the_weighted_sum_of_term_gradients() {
    let base = tiny("discourse");
    let with = |w_r: f64, w_l: f64| ModelConfig {
        w_r,
        w_l,
        ..base.clone()
    };
    for seed in 0..5 {
        let batch = random_batch(seed + 3, &base);
        let mut store = Model::new(base.clone(), seed).unwrap().store;
        let g00 = grads(&with(0.0, 0.0), &store, &batch);
        let g10 = grads(&with(1.0, 0.0), &store, &batch);
        let g01 = grads(&with(0.0, 1.0), &store, &batch);
        let (wr, wl) = (2.0, 0.5);
        let gw = grads(&with(wr, wl), &store, &batch);
        for i in 0..gw.len() {
            let expect = g00[i] + wr * (g10[i] - g00[i]) + wl * (g01[i] - g00[i]);
            assert!(
                close(gw[i], expect, 1e-9, 1e-12),
                "entry {i}: {} vs {expect}",
                gw[i]
            );
        }
        // and the weighted gradient itself agrees with finite differences
        let f = joint(&with(wr, wl), &batch);
        for name in ["encoder.fwd.w_x", "reconstructor.out.w", "labeler.out.b"] {
            let n = numeric(&mut store, name, &f);
            for (a, n) in analytic(&store, name, &f).iter().zip(&n) {
                assert!(close(*a, *n, 1e-3, 1e-7), "{name}: {a} vs {n}");
            }
        }
    }
}
