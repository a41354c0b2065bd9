//! Central-difference verification of analytic gradients.

use rand::SeedableRng;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// max |analytic − numeric| / max(1, |analytic|) over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Where the worst error occurred (parameter name, flat index).
    pub worst: Option<(String, usize)>,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn pick(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, k).into_vec();
        v.sort_unstable();
        v
    }
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(Error::Graph(format!("finite_diff_check needs a scalar function, got {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Checks `f` at `point` on up to `samples` coordinates.
pub fn finite_diff_check<F>(f: F, point: &Tensor, epsilon: f64, samples: usize, seed: u64) -> Result<FdReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone().requires_grad(true))?;
    let y = f(&mut g, x)?;
    scalar_of(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = grads.wrt(x)?.clone();

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p)?;
        let y = f(&mut g, x).map_err(|_| Error::Numeric { op: "finite_diff_check" })?;
        let v = scalar_of(&g, y)?;
        if v.is_finite() { Ok(v) } else { Err(Error::Numeric { op: "finite_diff_check" }) }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport { max_rel_error: 0.0, checked: 0, worst: None };
    for i in pick(point.numel(), samples, &mut rng) {
        let mut plus = point.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = point.clone();
        minus.data_mut()[i] -= epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        let e = rel_err(analytic.data()[i], numeric);
        if e > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = Some(("input".into(), i));
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Same check against every parameter of `store`, sampling up to
/// `per_param` coordinates from each tensor.
pub fn finite_diff_check_params<F>(f: F, store: &ParamStore, epsilon: f64, per_param: usize, seed: u64) -> Result<FdReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    scalar_of(&g, y)?;
    let grads = g.backward(y)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let y = f(&mut g, s).map_err(|_| Error::Numeric { op: "finite_diff_check" })?;
        let v = scalar_of(&g, y)?;
        if v.is_finite() { Ok(v) } else { Err(Error::Numeric { op: "finite_diff_check" }) }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport { max_rel_error: 0.0, checked: 0, worst: None };
    let mut work = store.clone();
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let numel = store.get(&name)?.numel();
        let analytic = grads.param(&name).ok().cloned();
        for i in pick(numel, per_param, &mut rng) {
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[i]);
            let orig = store.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + epsilon;
            let fp = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig - epsilon;
            let fm = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            let e = rel_err(a, (fp - fm) / (2.0 * epsilon));
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = Some((name.clone(), i));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
