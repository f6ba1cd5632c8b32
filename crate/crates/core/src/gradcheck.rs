//! Central-difference verification of tape gradients.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

/// Floor on the denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct Probe {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
    pub params_covered: usize,
    /// Smallest relu pre-activation magnitude seen at the probe point.
    pub min_relu_margin: Option<f64>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare tape gradients of `f` against central differences with step `h`
/// at `n_probes` sampled coordinates of the trainable parameters.
///
/// The first probes visit distinct parameter tensors in random order so that
/// small tensors (scales, layer logits) are covered whenever `n_probes` is at
/// least the number of trainable tensors; the rest are drawn uniformly.
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut f: F,
    h: f64,
    n_probes: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    let margin = tape.min_relu_margin();
    let analytic: Vec<Tensor> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    let mut report = compare_gradients(store, f, &analytic, h, n_probes, seed)?;
    report.min_relu_margin = margin;
    Ok(report)
}

/// Probe `analytic` (one tensor per parameter, in store order) against
/// central differences of `f`.
pub fn compare_gradients<F>(
    store: &mut ParamStore,
    mut f: F,
    analytic: &[Tensor],
    h: f64,
    n_probes: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let trainable: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut r = rng::stream(seed, "grad-check", &[]);
    let mut order = trainable.clone();
    rng::shuffle(&mut r, &mut order);
    let sizes: Vec<usize> = trainable.iter().map(|&id| store.value(id).len()).collect();
    let total: usize = sizes.iter().sum();

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.value(loss).item())
    };

    let mut probes = Vec::with_capacity(n_probes);
    let mut covered = std::collections::BTreeSet::new();
    for k in 0..n_probes {
        if total == 0 {
            break;
        }
        let (id, coord) = if k < order.len() {
            let id = order[k];
            (id, r.random_range(0..store.value(id).len()))
        } else {
            let mut flat = r.random_range(0..total);
            let mut pick = 0;
            while flat >= sizes[pick] {
                flat -= sizes[pick];
                pick += 1;
            }
            (trainable[pick], flat)
        };
        covered.insert(id);

        let orig = store.value(id).data()[coord];
        store.get_mut(id).value.data_mut()[coord] = orig + h;
        let plus = eval(store)?;
        store.get_mut(id).value.data_mut()[coord] = orig - h;
        let minus = eval(store)?;
        store.get_mut(id).value.data_mut()[coord] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[id.index()].data()[coord];
        probes.push(Probe {
            param: store.get(id).name.clone(),
            coord,
            analytic: a,
            numeric,
            rel_error: rel_error(a, numeric),
        });
    }

    Ok(GradCheckReport {
        max_rel_error: probes.iter().map(|p| p.rel_error).fold(0.0, f64::max),
        probes,
        params_covered: covered.len(),
        min_relu_margin: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Component, ParamKind};

    fn quadratic_store() -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(
            "x",
            Tensor::vector(vec![0.7, -1.3, 2.1]),
            Component::Transformer,
            ParamKind::Weight,
        );
        (s, id)
    }

    // f(x) = sum(x ⊙ x ⊙ c) for a fixed c
    fn quadratic(id: ParamId) -> impl FnMut(&mut Tape, &ParamStore) -> Result<Var> {
        move |t: &mut Tape, s: &ParamStore| {
            let x = t.param(s, id);
            let c = t.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
            let xx = t.mul(x, x)?;
            let y = t.mul(xx, c)?;
            Ok(t.sum(y))
        }
    }

    #[test]
    fn quadratic_form_is_exact() {
        let (mut s, id) = quadratic_store();
        let rep = grad_check(&mut s, quadratic(id), 1e-5, 20, 1).unwrap();
        assert!(rep.max_rel_error < 1e-8, "{}", rep.max_rel_error);
        assert_eq!(rep.params_covered, 1);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let (mut s, id) = quadratic_store();
        let _ = grad_check(&mut s, quadratic(id), 1e-5, 1, 1).unwrap();
        let mut analytic: Vec<Tensor> = s.iter().map(|(_, p)| p.grad.clone()).collect();
        for v in analytic[0].data_mut() {
            *v += 0.1;
        }
        let rep = compare_gradients(&mut s, quadratic(id), &analytic, 1e-5, 10, 2).unwrap();
        assert!(rep.max_rel_error > 0.05, "{}", rep.max_rel_error);
    }

    #[test]
    fn constant_function_scores_zero() {
        let (mut s, id) = quadratic_store();
        let f = move |t: &mut Tape, st: &ParamStore| {
            let x = t.param(st, id);
            let z = t.scale(x, 0.0);
            Ok(t.sum(z))
        };
        let rep = grad_check(&mut s, f, 1e-5, 10, 3).unwrap();
        assert_eq!(rep.max_rel_error, 0.0);
    }

    #[test]
    fn probing_restores_values() {
        let (mut s, id) = quadratic_store();
        let before = s.value(id).clone();
        grad_check(&mut s, quadratic(id), 1e-5, 30, 4).unwrap();
        assert_eq!(s.value(id), &before);
    }
}
