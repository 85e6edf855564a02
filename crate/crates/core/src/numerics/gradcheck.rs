//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst per-tensor error `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)` over the
    /// checked coordinates of each parameter.
    pub max_rel_error: f64,
    /// Parameter with the worst tensor error.
    pub worst_param: String,
    /// Worst single-coordinate relative error, for diagnostics. Coordinates
    /// whose gradient sits near the finite-difference noise floor inflate it.
    pub max_coord_error: f64,
    pub coordinates_checked: usize,
}

/// Options for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Caps the coordinates checked per parameter tensor (sampled uniformly).
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

/// Compares analytic parameter gradients of `loss_fn` with central differences.
///
/// `loss_fn` is always evaluated on inference graphs, so dropout is disabled.
pub fn grad_check<F>(store: &ParamStore, opts: GradCheckOptions, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, s)?;
        let v = g.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let analytic = g.backward(loss)?.into_params();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        max_coord_error: 0.0,
        coordinates_checked: 0,
    };
    for (id, name, value) in store.iter() {
        let n = value.numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(cap) if cap < n => sample(&mut rng, n, cap).into_vec(),
            _ => (0..n).collect(),
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for c in coords {
            let original = value.data()[c];
            work.get_mut(id).data_mut()[c] = original + opts.eps;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[c] = original - opts.eps;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[c] = original;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[c]);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            report.max_coord_error = report.max_coord_error.max((a - numeric).abs() / denom);
            report.coordinates_checked += 1;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = name.to_owned();
        }
    }
    Ok(report)
}
