//! Central finite-difference validation of analytic gradients.

use rand::Rng as _;

use crate::error::Result;
use crate::numerics::ParamStore;
use crate::util::rng_from_seed;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative disagreement with a denominator floor, so entries whose true
/// gradient is below `floor` are judged on an absolute scale instead of
/// amplifying finite-difference roundoff.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares analytic gradients against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε`.
///
/// `loss` must evaluate the loss for the current parameter values without
/// touching gradient state. The caller populates analytic gradients (one
/// forward+backward pass) before calling. For tensors larger than
/// `max_entries`, the largest-magnitude analytic entries are checked plus a
/// seeded random sample, covering both the active and the quiet parts of
/// each parameter.
pub fn grad_check<F>(
    store: &mut ParamStore,
    eps: f64,
    max_entries: usize,
    floor: f64,
    seed: u64,
    mut loss: F,
) -> Result<Vec<GradCheckEntry>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut rng = rng_from_seed(seed);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let name = store.get(id).name.clone();
        let analytic = store.get(id).grad.clone();
        let numel = analytic.numel();
        let entries: Vec<usize> = if numel <= max_entries {
            (0..numel).collect()
        } else {
            let mut order: Vec<usize> = (0..numel).collect();
            order.sort_by(|&a, &b| {
                analytic.data()[b]
                    .abs()
                    .total_cmp(&analytic.data()[a].abs())
            });
            let mut chosen: Vec<usize> = order[..max_entries / 2].to_vec();
            while chosen.len() < max_entries {
                chosen.push(rng.gen_range(0..numel));
            }
            chosen.sort_unstable();
            chosen.dedup();
            chosen
        };

        let mut max_err = 0.0f64;
        for &flat in &entries {
            let original = store.value(id).data()[flat];
            set_entry(store, id, flat, original + eps);
            let f_plus = loss(store)?;
            set_entry(store, id, flat, original - eps);
            let f_minus = loss(store)?;
            set_entry(store, id, flat, original);
            let fd = (f_plus - f_minus) / (2.0 * eps);
            max_err = max_err.max(rel_err(fd, analytic.data()[flat], floor));
        }
        report.push(GradCheckEntry {
            name,
            max_rel_err: max_err,
            checked: entries.len(),
        });
    }
    Ok(report)
}

fn set_entry(store: &mut ParamStore, id: crate::numerics::ParamId, flat: usize, v: f64) {
    store.value_mut(id).data_mut()[flat] = v;
}

/// Convenience for ops tests: checks every trainable parameter of `store`
/// against `loss` and returns the worst relative error overall.
pub fn max_rel_err_over_store<F>(
    store: &mut ParamStore,
    eps: f64,
    floor: f64,
    loss: F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let report = grad_check(store, eps, usize::MAX, floor, 0, loss)?;
    Ok(report
        .iter()
        .map(|e| e.max_rel_err)
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    #[test]
    fn linear_loss_matches_exactly() {
        // loss = w · x for fixed x; gradient is x, exact for central diffs.
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::row_vector(vec![0.3, -0.7, 1.1]), true);
        let x = Tensor::row_vector(vec![2.0, 0.5, -1.5]);

        let x_for_grad = x.clone();
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let xn = tape.input(x_for_grad);
        let prod = tape.mul(wn, xn).unwrap();
        let lossn = tape.sum_all(prod);
        tape.backward(lossn, &mut store).unwrap();
        drop(tape);

        let worst = max_rel_err_over_store(&mut store, 1e-5, 1e-12, |store| {
            let mut tape = Tape::new();
            let wn = tape.param(store, w);
            let xn = tape.input(x.clone());
            let prod = tape.mul(wn, xn)?;
            let lossn = tape.sum_all(prod);
            Ok(tape.value(lossn).item())
        })
        .unwrap();
        assert!(worst < 1e-10, "relative error {worst}");
    }
}
