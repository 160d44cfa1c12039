use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Check at most this many coordinates per input (sampled
    /// deterministically); `None` checks all of them.
    pub max_coords_per_input: Option<usize>,
    /// Lower bound on the relative-error denominator, so coordinates with
    /// vanishing gradients are compared in absolute terms.
    pub denom_floor: f64,
    /// Kink handling for piecewise-smooth functions. When the central and the
    /// second-order forward and backward differences disagree by more than
    /// this relative amount, a kink lies within `2h` of the coordinate. The step is then
    /// divided by 4, up to `kink_refinements` times; if the kink persists,
    /// the central, forward and backward estimates are all accepted as the
    /// numeric gradient (the closest one is reported). `None` always uses
    /// the central difference.
    pub kink_threshold: Option<f64>,
    pub kink_refinements: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords_per_input: None,
            denom_floor: 1e-6,
            kink_threshold: None,
            kink_refinements: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Coordinates where a kink persisted at the smallest step.
    pub kinks: usize,
    /// `(input, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central differences at `inputs`.
///
/// `f` receives a graph and one leaf per input and returns the scalar loss.
/// The relative error of a coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, denom_floor)`.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&g, &vars)?;
    let base = g.value(loss).item();
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss at the base point is {base}")));
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(grads);
    drop(g);

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let g = Graph::inference();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&g, &vars)?;
        let v = g.value(loss).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("loss evaluated to {v} during finite differences")))
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        kinks: 0,
        worst: None,
    };
    for input in 0..inputs.len() {
        let n = inputs[input].len();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => {
                let mut c = rand::seq::index::sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = work[input].data()[c];
            let mut at = |d: f64| -> Result<f64> {
                work[input].data_mut()[c] = orig + d;
                let v = eval(&work);
                work[input].data_mut()[c] = orig;
                v
            };
            let a = analytic[input].data()[c];
            let rel_err = |n: f64| (a - n).abs() / a.abs().max(n.abs()).max(opts.denom_floor);
            let mut h = opts.h;
            let mut level = 0;
            let numeric = loop {
                let plus = at(h)?;
                let minus = at(-h)?;
                let central = (plus - minus) / (2.0 * h);
                let Some(t) = opts.kink_threshold else {
                    break central;
                };
                let (plus2, minus2) = (at(2.0 * h)?, at(-2.0 * h)?);
                let fwd = (4.0 * plus - 3.0 * base - plus2) / (2.0 * h);
                let bwd = (3.0 * base - 4.0 * minus + minus2) / (2.0 * h);
                let est = [central, fwd, bwd];
                let hi = est.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lo = est.iter().copied().fold(f64::INFINITY, f64::min);
                if hi - lo <= t * hi.abs().max(lo.abs()).max(opts.denom_floor) {
                    break central;
                }
                if level < opts.kink_refinements {
                    level += 1;
                    h /= 4.0;
                    continue;
                }
                report.kinks += 1;
                let mut best = central;
                for n in [fwd, bwd] {
                    if rel_err(n) < rel_err(best) {
                        best = n;
                    }
                }
                break best;
            };
            let rel = rel_err(numeric);
            report.coords_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((input, c, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_of_squares(g: &Graph, v: &[Var]) -> Result<Var> {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.sum(sq))
    }

    #[test]
    fn polynomial_is_exact() {
        let x = Tensor::from_fn(&[5], |i| i as f64 * 0.3 - 0.7);
        let r = finite_diff_check(sum_of_squares, &[x], &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.coords_checked, 5);
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        // forward x², backward claims 3x
        let bad = |g: &Graph, v: &[Var]| -> Result<Var> {
            let x = g.value(v[0]);
            let y = x.map(|a| a * a);
            let xc = x.clone();
            let out = g.custom(
                y,
                &[v[0]],
                Some(Box::new(move |gr, _| {
                    let d = gr.data().iter().zip(xc.data()).map(|(g, a)| g * 3.0 * a).collect();
                    vec![Some(Tensor::new(gr.shape().to_vec(), d).unwrap())]
                })),
            );
            Ok(g.sum(out))
        };
        let x = Tensor::from_fn(&[4], |i| i as f64 + 0.5);
        let r = finite_diff_check(bad, std::slice::from_ref(&x), &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error > 1e-2, "{r:?}");
        let opts = GradCheckOptions {
            kink_threshold: Some(1e-3),
            ..Default::default()
        };
        let r = finite_diff_check(bad, &[x], &opts).unwrap();
        assert!(r.max_rel_error > 1e-2 && r.kinks == 0, "{r:?}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let f = |g: &Graph, v: &[Var]| -> Result<Var> {
            let s = g.sum(v[0]);
            Ok(g.scale(s, f64::INFINITY))
        };
        let x = Tensor::full(&[2], 1.0);
        assert!(matches!(
            finite_diff_check(f, &[x], &GradCheckOptions::default()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn kinks_use_one_sided_slopes() {
        // relu(x - 1e-7) at x = 0: the central difference straddles the kink
        let f = |g: &Graph, v: &[Var]| -> Result<Var> {
            let shift = g.constant(Tensor::full(&[1], -1e-7));
            let shifted = g.add(v[0], shift)?;
            Ok(g.sum(g.relu(shifted)))
        };
        let x = Tensor::zeros(&[1]);
        let plain = finite_diff_check(f, std::slice::from_ref(&x), &GradCheckOptions::default()).unwrap();
        assert!(plain.max_rel_error > 0.1, "{plain:?}");
        let opts = GradCheckOptions {
            kink_threshold: Some(1e-3),
            ..Default::default()
        };
        let r = finite_diff_check(f, &[x], &opts).unwrap();
        assert_eq!(r.kinks, 1);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        let r = finite_diff_check(sum_of_squares, &[Tensor::full(&[3], 2.0)], &opts).unwrap();
        assert_eq!(r.kinks, 0);
    }

    #[test]
    fn subsamples_coordinates() {
        let x = Tensor::from_fn(&[100], |i| i as f64 * 0.01);
        let opts = GradCheckOptions {
            max_coords_per_input: Some(7),
            ..Default::default()
        };
        let r = finite_diff_check(sum_of_squares, &[x], &opts).unwrap();
        assert_eq!(r.coords_checked, 7);
    }
}
