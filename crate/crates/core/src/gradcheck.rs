//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{fnv1a, ParamId, ParamStore};

pub mod suite;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates checked per parameter tensor; `None` checks every one.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
    /// Corrupts the analytic convolution weight gradients (test fixture).
    pub weight_grad_fault: Option<f64>,
    /// When set, only parameters whose names start with one of these
    /// prefixes are perturbed.
    pub prefixes: Option<Vec<String>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            coords_per_param: None,
            seed: 0,
            weight_grad_fault: None,
            prefixes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat coordinate where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Analytic and central-difference values at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coords_checked: usize,
    /// Coordinates whose step had to shrink below `eps` to avoid a kink.
    pub coords_reduced: usize,
}

/// `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Smallest step the checker falls back to.
pub const MIN_EPS: f64 = 1e-7;

/// `f(store)` as a compensated `(hi, lo)` pair, with the branch signature.
fn eval<F>(f: &F, store: &ParamStore) -> Result<((f64, f64), u64)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    let v = g.value_precise(root)?;
    if !(v.0.is_finite() && v.1.is_finite()) {
        return Err(Error::Numeric(format!("grad_check: function value {}", v.0)));
    }
    Ok((v, g.branch_signature()))
}

/// Fourth-order central difference along coordinate `i` of `id`, combining
/// symmetric steps `h` and `h / 2`. The step starts at `eps` and is halved,
/// not below [`MIN_EPS`], while any perturbed point takes a different relu or
/// absolute-value branch than the unperturbed point. Returns the estimate
/// and the step used.
fn central_difference<F>(f: &F, store: &mut ParamStore, id: ParamId, i: usize, eps: f64, base: u64) -> Result<(f64, f64)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let orig = store.value(id).data()[i];
    let at = |store: &mut ParamStore, d: f64| {
        store.value_mut(id).data_mut()[i] = orig + d;
        let r = eval(f, store);
        store.value_mut(id).data_mut()[i] = orig;
        r
    };
    let diff = |(ph, pl): (f64, f64), (mh, ml): (f64, f64)| (ph - mh) + (pl - ml);
    let mut h = eps;
    loop {
        let (p1, s1) = at(store, h)?;
        let (m1, s2) = at(store, -h)?;
        let (p2, s3) = at(store, h / 2.0)?;
        let (m2, s4) = at(store, -h / 2.0)?;
        let smooth = [s1, s2, s3, s4].iter().all(|s| *s == base);
        if smooth || h / 2.0 < MIN_EPS {
            let wide = diff(p1, m1) / (2.0 * h);
            let narrow = diff(p2, m2) / h;
            return Ok(((4.0 * narrow - wide) / 3.0, h));
        }
        h /= 2.0;
    }
}

pub fn grad_check<F>(store: &mut ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&opts.eps) {
        return Err(Error::contract(format!("grad_check: eps {} outside [1e-7, 1e-4]", opts.eps)));
    }
    store.zero_grad();
    let mut g = match opts.weight_grad_fault {
        Some(k) => Graph::with_weight_grad_fault(k),
        None => Graph::new(),
    };
    let root = f(&mut g, store)?;
    g.backward_into(root, store)?;
    let base = g.branch_signature();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coords_checked: 0,
        coords_reduced: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if let Some(pre) = &opts.prefixes {
            if !pre.iter().any(|p| store.get(id).name.starts_with(p.as_str())) {
                continue;
            }
        }
        let analytic = store.grad(id).clone();
        if !analytic.is_finite() {
            return Err(Error::Numeric(format!(
                "grad_check: non-finite gradient for {}",
                store.get(id).name
            )));
        }
        let numel = analytic.numel();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < numel => {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ fnv1a(&store.get(id).name));
                let mut v = sample(&mut rng, numel, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..numel).collect(),
        };
        for i in coords {
            let (numeric, step) = central_difference(&f, store, id, i, opts.eps, base)?;
            let err = relative_error(analytic.data()[i], numeric);
            report.coords_checked += 1;
            if step < opts.eps {
                report.coords_reduced += 1;
            }
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), i));
                report.worst_values = (analytic.data()[i], numeric);
            }
        }
    }
    Ok(report)
}
