//! Central-difference gradient oracle shared by the integration suites.
#![allow(dead_code)]

use zpmt::autodiff::{Tape, Var};
use zpmt::params::ParameterStore;
use zpmt::tensor::Tensor;
use zpmt::Result;

pub const H: f64 = 1e-5;

/// `|a − n| ≤ rel·max(|a|,|n|) + abs`.
pub fn close(a: f64, n: f64, rel: f64, abs: f64) -> bool {
    (a - n).abs() <= rel * a.abs().max(n.abs()) + abs
}

/// Checks d f / d inputs for a scalar-valued `f` built on a fresh tape.
/// Returns the worst violation message, if any.
pub fn check_inputs<F>(
    inputs: &[Tensor],
    f: F,
    rel: f64,
    abs: f64,
) -> std::result::Result<(), String>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars).map_err(|e| e.to_string())?;
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    let eval = |ins: &[Tensor]| -> f64 {
        let t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
        let l = f(&t, &vs).expect("forward");
        t.value(l).item()
    };
    for (i, inp) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inp.shape()));
        for j in 0..inp.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[j];
            if !close(a, num, rel, abs) {
                return Err(format!(
                    "input {i} entry {j}: analytic {a} vs numeric {num}"
                ));
            }
        }
    }
    Ok(())
}

/// Checks every parameter gradient of `loss` against central differences.
pub fn check_params<F>(
    store: &mut ParameterStore,
    loss: F,
    rel: f64,
    abs: f64,
) -> std::result::Result<usize, String>
where
    F: Fn(&Tape, &ParameterStore) -> Result<Var>,
{
    let tape = Tape::new();
    let l = loss(&tape, store).map_err(|e| e.to_string())?;
    let grads = tape.backward(l).map_err(|e| e.to_string())?;
    let analytic: Vec<Option<Tensor>> = store
        .iter()
        .map(|(id, _)| grads.param(id).cloned())
        .collect();
    drop(tape);
    let eval = |s: &ParameterStore| -> f64 {
        let t = Tape::new();
        let l = loss(&t, s).expect("forward");
        t.value(l).item()
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut checked = 0;
    for (k, id) in ids.into_iter().enumerate() {
        let n = store.value(id).len();
        for j in 0..n {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + H;
            let fp = eval(store);
            store.value_mut(id).data_mut()[j] = orig - H;
            let fm = eval(store);
            store.value_mut(id).data_mut()[j] = orig;
            let num = (fp - fm) / (2.0 * H);
            let a = analytic[k].as_ref().map_or(0.0, |g| g.data()[j]);
            if !close(a, num, rel, abs) {
                return Err(format!(
                    "{}[{j}]: analytic {a} vs numeric {num}",
                    store.get(id).name
                ));
            }
            checked += 1;
        }
    }
    Ok(checked)
}
