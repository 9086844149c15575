//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    /// `max|g_ad - g_fd| / (max|g_ad| + max|g_fd| + 1e-12)` over checked entries.
    pub rel_err: f64,
    pub max_abs_diff: f64,
    pub entries_checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub label: String,
    pub tol: f64,
    pub step: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `h`, for every non-frozen parameter in `store`.
///
/// At most `max_entries` entries per parameter are perturbed (evenly strided
/// through the tensor, always including the first and last). Frozen
/// parameters are left out of the report.
pub fn finite_diff_check<F>(
    label: &str,
    store: &mut ParamStore<f64>,
    f: F,
    h: f64,
    tol: f64,
    max_entries: usize,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_store(store);
        let loss = f(&mut g)?;
        Ok(g.value(loss).item())
    };

    let analytic: Vec<Option<Vec<f64>>> = {
        let mut g = Graph::with_store(store);
        let loss = f(&mut g)?;
        let base = g.value(loss).item();
        if !base.is_finite() {
            return Err(Error::NonFinite(format!("{label}: loss at the base point")));
        }
        let grads = g.backward(loss)?;
        let mut out = vec![None; store.len()];
        for (id, t) in grads.params() {
            out[id.index()] = Some(t.data().to_vec());
        }
        out
    };

    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::new();
    for id in ids {
        if store.get(id).frozen {
            continue;
        }
        let name = store.get(id).name.clone();
        let n = store.get(id).value.numel();
        let ad = analytic[id.index()].clone().unwrap_or_else(|| vec![0.0; n]);
        let entries = sample_entries(n, max_entries);
        let (mut max_diff, mut max_ad, mut max_fd) = (0.0f64, 0.0f64, 0.0f64);
        for &e in &entries {
            let orig = store.get(id).value.data()[e];
            store.get_mut(id).value.data_mut()[e] = orig + h;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[e] = orig - h;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[e] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("{label}: loss while perturbing parameter {name}[{e}]")));
            }
            let fd = (plus - minus) / (2.0 * h);
            if !ad[e].is_finite() {
                return Err(Error::NonFinite(format!("{label}: analytic gradient of {name}[{e}]")));
            }
            max_diff = max_diff.max((ad[e] - fd).abs());
            max_ad = max_ad.max(ad[e].abs());
            max_fd = max_fd.max(fd.abs());
        }
        let rel_err = max_diff / (max_ad + max_fd + 1e-12);
        params.push(ParamCheck {
            name,
            rel_err,
            max_abs_diff: max_diff,
            entries_checked: entries.len(),
            passed: rel_err <= tol,
        });
    }
    Ok(GradCheckReport { label: label.to_string(), tol, step: h, params })
}

fn sample_entries(n: usize, max_entries: usize) -> Vec<usize> {
    if n <= max_entries {
        return (0..n).collect();
    }
    if max_entries < 2 {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..max_entries).map(|i| i * (n - 1) / (max_entries - 1)).collect();
    v.dedup();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn entry_sampling_covers_ends() {
        assert_eq!(sample_entries(3, 8), vec![0, 1, 2]);
        let s = sample_entries(100, 5);
        assert_eq!(s.first(), Some(&0));
        assert_eq!(s.last(), Some(&99));
        assert_eq!(s.len(), 5);
    }

    #[test]
    fn quadratic_is_exact_to_roundoff() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::from_f64(&[3], &[0.3, -1.2, 2.0]).unwrap()).unwrap();
        let report = finite_diff_check(
            "quadratic",
            &mut store,
            |g| {
                let v = g.param(x);
                let sq = g.square(v);
                Ok(g.sum(sq))
            },
            1e-5,
            1e-9,
            16,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_err() < 1e-9);
    }

    #[test]
    fn frozen_parameters_are_excluded() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        let b = store.add("b", Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap()).unwrap();
        store.set_frozen(b, true);
        let report = finite_diff_check(
            "frozen",
            &mut store,
            |g| {
                let (va, vb) = (g.param(a), g.param(b));
                let p = g.mul(va, vb)?;
                Ok(g.sum(p))
            },
            1e-5,
            1e-6,
            8,
        )
        .unwrap();
        let names: Vec<_> = report.params.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["a"]);
    }

    #[test]
    fn non_finite_loss_names_the_parameter() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("edge", Tensor::from_f64(&[1], &[0.0]).unwrap()).unwrap();
        let err = finite_diff_check(
            "log-at-zero",
            &mut store,
            |g| {
                let v = g.param(x);
                let sq = g.square(v);
                let l = g.log(sq);
                Ok(g.sum(l))
            },
            1e-5,
            1e-4,
            4,
        );
        // ln(0) = -inf at the base point.
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }
}
