//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Denominator floor for the relative error. A central difference at
/// eps = 1e-5 on an O(1) loss carries ~1e-10 of rounding error, so
/// entries with smaller gradients are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `name[index]` of the entry with the largest relative error.
    pub worst_param: String,
    pub eps: f64,
    pub checked: usize,
}

/// Which parameter entries to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Selection {
    All,
    /// At most `max_entries` randomly chosen entries of every tensor.
    PerTensor { max_entries: usize, seed: u64 },
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the analytic gradient returned by `loss_fn` with
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` for every selected entry.
///
/// `loss_fn` must be a deterministic function of the parameters. Entries
/// absent from the returned [`Gradients`] count as analytic zero.
pub fn grad_check<F>(params: &ParamStore, eps: f64, selection: Selection, loss_fn: F) -> Result<GradReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Contract(format!("grad_check eps must be positive, got {eps}")));
    }
    let (base, grads) = loss_fn(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss at unperturbed parameters".into()));
    }

    let mut rng = match selection {
        Selection::PerTensor { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Selection::All => None,
    };

    let mut work = params.clone();
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        eps,
        checked: 0,
    };

    for id in params.ids() {
        let n = params.get(id).len();
        let indices: Vec<usize> = match (selection, rng.as_mut()) {
            (Selection::PerTensor { max_entries, .. }, Some(rng)) if n > max_entries => {
                let mut v = sample(rng, n, max_entries).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let analytic = grads.get(id);
        for i in indices {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let plus = loss_fn(&work)?.0;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let minus = loss_fn(&work)?.0;
            work.get_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at perturbed {}[{i}]",
                    params.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst_param.is_empty() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = format!("{}[{i}]", params.name(id));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::{ParamId, Tape};
    use crate::numerics::Tensor;

    fn single(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(value));
        s
    }

    #[test]
    fn quadratic_matches_fd() {
        let store = single(3.0);
        let f = |p: &ParamStore| {
            let mask = vec![true];
            let mut tape = Tape::new(p, &mask);
            let w = tape.param(ParamId(0));
            let y = tape.mul(w, w);
            Ok((tape.value(y).item(), tape.backward(y)))
        };
        let (_, g) = f(&store).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().item(), 6.0);
        let report = grad_check(&store, 1e-5, Selection::All, f).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
        assert_eq!(report.checked, 1);
        assert_eq!(report.worst_param, "w[0]");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let store = single(1.5);
        let f = |p: &ParamStore| Ok((4.0, Gradients::empty(p.len())));
        let report = grad_check(&store, 1e-5, Selection::All, f).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let store = single(2.0);
        let f = |p: &ParamStore| {
            let mask = vec![true];
            let mut tape = Tape::new(p, &mask);
            let w = tape.param(ParamId(0));
            let y = tape.mul(w, w);
            let y3 = tape.scale(y, 3.0);
            // report gradient of w² while evaluating 3w²
            let mut t2 = Tape::new(p, &mask);
            let w2 = t2.param(ParamId(0));
            let sq = t2.mul(w2, w2);
            Ok((tape.value(y3).item(), t2.backward(sq)))
        };
        let report = grad_check(&store, 1e-5, Selection::All, f).unwrap();
        assert!(report.max_rel_err > 0.5);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let store = single(0.0);
        let f = |p: &ParamStore| {
            let w = p.get(ParamId(0)).item();
            Ok(((1.0 / w).abs(), Gradients::empty(1)))
        };
        assert!(matches!(
            grad_check(&store, 1e-5, Selection::All, f),
            Err(Error::NonFinite(_))
        ));
        assert!(grad_check(&single(1.0), 0.0, Selection::All, |p: &ParamStore| Ok((0.0, Gradients::empty(p.len())))).is_err());
    }

    #[test]
    fn tape_ops_pass_gradient_check() {
        use crate::numerics::tape::ConvSpec;
        let mut store = ParamStore::new();
        let data = |n: usize, k: f64| (0..n).map(|i| ((i as f64 + 1.0) * k).sin() * 0.7).collect::<Vec<_>>();
        let x = store.add("x", Tensor::from_vec(5, 3, data(15, 0.31)));
        let w = store.add("w", Tensor::from_vec(9, 4, data(36, 0.17)));
        let b = store.add("b", Tensor::from_vec(1, 4, data(4, 0.9)));
        let table = store.add("table", Tensor::from_vec(3, 2, data(6, 1.3)));
        let f = move |p: &ParamStore| {
            let mask = vec![true; p.len()];
            let mut t = Tape::new(p, &mask);
            let (xv, wv, bv, tv) = (t.param(x), t.param(w), t.param(b), t.param(table));
            let h = t.conv1d(xv, wv, bv, ConvSpec::same(3, 2));
            let h = t.tanh(h);
            let mean = t.slice_cols(h, 0, 2);
            let lv_raw = t.slice_cols(h, 2, 4);
            let lv = t.clamp(lv_raw, -0.5, 0.5);
            let e = t.gather(tv, vec![0, 2, 1, 1, 0]);
            let e2 = t.exp(e);
            let q = t.concat_cols(e, e2);
            let q_mean = t.slice_cols(q, 0, 2);
            let q_lv = t.slice_cols(q, 2, 4);
            let kl = t.sym_kld(mean, lv, q_mean, q_lv);
            let rep = t.repeat_rows(h, 2);
            let sl = t.slice_rows(rep, 1, 7);
            let ce = t.softmax_xent(sl, vec![0, 1, 2, 3, 0, 1]);
            let z = t.reparam(mean, lv, Tensor::filled(5, 2, 0.3));
            let first = t.slice_rows(tv, 0, 1);
            let zz = t.add_bias(z, first);
            let mse = t.mse(zz, &Tensor::filled(5, 2, 0.1));
            let doubled = table_rows(&mut t, tv);
            let tail = t.slice_rows(doubled, 0, 2);
            let wide = wv_t(&mut t, wv);
            let prod = t.matmul(h, wide);
            let m2 = t.mse(prod, &Tensor::zeros(5, 9));
            let diff = t.sub(tail, tail);
            let m3 = t.mse(diff, &Tensor::zeros(2, 2));
            let root = t.weighted_sum(&[(kl, 1.0), (ce, 0.5), (mse, 2.0), (m2, 0.1), (m3, 1.0)]);
            Ok((t.value(root).item(), t.backward(root)))
        };
        let report = grad_check(&store, 1e-5, Selection::All, f).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    fn table_rows(t: &mut Tape, tv: crate::numerics::Var) -> crate::numerics::Var {
        t.scale(tv, 2.0)
    }

    fn wv_t(t: &mut Tape, wv: crate::numerics::Var) -> crate::numerics::Var {
        // 9x4 -> need 4x9 for h(5x4)·W: use the first 4 rows reshaped via slice
        let top = t.slice_rows(wv, 0, 4);
        let sq = t.mul(top, top);
        let wide = t.concat_cols(top, sq);
        let wide = t.concat_cols(wide, top);
        t.slice_cols(wide, 0, 9)
    }
}
