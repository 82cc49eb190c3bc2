//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Parameter, Scalar, Var};
use crate::error::Result;

/// Which parameter coordinates to perturb.
#[derive(Clone, Copy, Debug)]
pub enum CheckCoords {
    All,
    /// Up to `per_param` coordinates per parameter, drawn without
    /// replacement from `seed`.
    Sample { per_param: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose gradient magnitude fell under [`GRAD_FLOOR`].
    pub below_floor: usize,
    /// Coordinates skipped because every tried step crossed a branch point.
    pub kinks: usize,
}

/// Magnitude below which a central difference of an O(1) loss is dominated
/// by f64 rounding (about `1e-16 / step`).
pub const GRAD_FLOOR: f64 = 1e-6;

/// Compares tape gradients of `loss` with central differences.
///
/// Each coordinate is perturbed by `step`, retried at `step/10` and
/// `step/100` while the perturbed pass takes a different branch (see
/// [`Graph::branch_signature`]), and counted in `kinks` if none stays on the
/// same piece.
///
/// `loss` builds a fresh forward pass from the given parameters (loaded via
/// [`Graph::param`] with their slice index) and returns the scalar loss.
/// The per-coordinate error is
/// `|analytic − numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`, so
/// gradients smaller than the floor are judged on absolute error.
pub fn finite_diff_check<T, F>(
    params: &mut [Parameter<T>],
    mut loss: F,
    step: f64,
    coords: CheckCoords,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &[Parameter<T>]) -> Result<Var>,
{
    for p in params.iter_mut() {
        p.zero_grad();
    }
    let mut g = Graph::new();
    let l = loss(&mut g, params)?;
    g.backward(l)?;
    g.accumulate_param_grads(params);
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad.data().iter().map(|v| v.as_f64()).collect())
        .collect();

    let base = g.branch_signature();
    let mut eval = |params: &[Parameter<T>]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let l = loss(&mut g, params)?;
        Ok((g.value(l).data()[0].as_f64(), g.branch_signature()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        below_floor: 0,
        kinks: 0,
    };
    for pi in 0..params.len() {
        let n = params[pi].numel();
        let idx: Vec<usize> = match coords {
            CheckCoords::All => (0..n).collect(),
            CheckCoords::Sample { per_param, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut v = sample(&mut rng, n, per_param.min(n)).into_vec();
                v.sort_unstable();
                v
            }
        };
        for j in idx {
            let orig = params[pi].value.data()[j];
            // a perturbation that flips a relu or a max-pool winner measures
            // two pieces of the function; shrink it, then give up
            let mut numeric = None;
            for h in [step, step / 10.0, step / 100.0] {
                params[pi].value.data_mut()[j] = T::of(orig.as_f64() + h);
                let (plus, sp) = eval(params)?;
                params[pi].value.data_mut()[j] = T::of(orig.as_f64() - h);
                let (minus, sm) = eval(params)?;
                params[pi].value.data_mut()[j] = orig;
                if sp == base && sm == base {
                    numeric = Some((plus - minus) / (2.0 * h));
                    break;
                }
            }
            let Some(numeric) = numeric else {
                report.kinks += 1;
                continue;
            };
            let a = analytic[pi][j];
            let scale = a.abs().max(numeric.abs());
            let err = (a - numeric).abs() / scale.max(GRAD_FLOOR);
            report.checked += 1;
            if scale < GRAD_FLOOR {
                report.below_floor += 1;
            }
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params[pi].name.clone(), j));
            }
        }
    }
    Ok(report)
}
