use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParameterStore, Var};
use crate::error::Result;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative error with an absolute floor, so coordinates whose true gradient
/// is ~0 are judged on absolute error instead.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare tape gradients of `build` against central differences.
///
/// At most `per_param` coordinates are probed in each parameter tensor
/// (all of them when the tensor is smaller), chosen by `seed`.
pub fn check_gradients<B>(
    store: &ParameterStore<f64>,
    build: B,
    step: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new(false, 0);
    let loss = build(&mut g, store)?;
    g.backward(loss)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    g.accumulate_param_grads(&mut analytic);

    let eval = |s: &ParameterStore<f64>| -> Result<f64> {
        let mut g = Graph::new(false, 0);
        let l = build(&mut g, s)?;
        Ok(g.value(l).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport { coordinates: 0, max_rel_err: 0.0, worst: None };
    for idx in 0..store.len() {
        let n = store.value_at(idx).len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_param).into_vec()
        };
        for c in coords {
            let orig = probe.value_at(idx).data()[c];
            probe.value_at_mut(idx).data_mut()[c] = orig + step;
            let plus = eval(&probe)?;
            probe.value_at_mut(idx).data_mut()[c] = orig - step;
            let minus = eval(&probe)?;
            probe.value_at_mut(idx).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_err(analytic.grad_at(idx)[c], numeric, 1e-6);
            report.coordinates += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((store.name_at(idx).to_string(), c));
                }
            }
        }
    }
    Ok(report)
}
