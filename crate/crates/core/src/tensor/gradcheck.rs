use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Denominator floor for the relative error, so that coordinates whose
    /// true gradient is ~0 are judged by absolute error instead.
    pub floor: f64,
    /// Probe at most this many coordinates per parameter tensor (chosen
    /// uniformly with `seed`). `None` probes every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
    /// Use the five-point stencil `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`
    /// instead of `(f(x+h) - f(x-h)) / 2h`. Its truncation error is `O(h^4)`,
    /// which allows a larger step and so less cancellation in deep graphs.
    pub fourth_order: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-3,
            floor: 1e-8,
            max_coords_per_param: None,
            seed: 0,
            fourth_order: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, flat coordinate)` of the worst mismatch.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, entirely in 64-bit.
///
/// `f` receives a fresh tape with `params` registered as leaves (in order)
/// and must return a single-element loss.
pub fn grad_check<F>(params: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = ps
            .iter()
            .map(|p| tape.leaf(p.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars).map_err(|e| Error::CheckFailed(e.to_string()))?;
        let v = tape.value(loss).data();
        if v.len() != 1 || !v[0].is_finite() {
            return Err(Error::CheckFailed("loss is not a finite scalar".into()));
        }
        Ok((tape, vars, loss))
    };
    let scalar = |ps: &[Tensor<f64>]| -> Result<f64> {
        let (tape, _, loss) = eval(ps)?;
        Ok(tape.value(loss).data()[0])
    };

    let (tape, vars, loss) = eval(params)?;
    let grads = tape.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };

    for (pi, var) in vars.iter().enumerate() {
        let n = params[pi].numel();
        let analytic = grads.get_f64(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = params[pi].data()[c];
            let mut at = |h: f64| -> Result<f64> {
                work[pi].data_mut()[c] = orig + h;
                let v = scalar(&work);
                work[pi].data_mut()[c] = orig;
                v
            };
            let h = opts.eps;
            let numeric = if opts.fourth_order {
                (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h)
            } else {
                (at(h)? - at(-h)?) / (2.0 * h)
            };
            let a = analytic[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, c));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
