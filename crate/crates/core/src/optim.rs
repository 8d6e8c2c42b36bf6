//! Box-constrained Nelder–Mead minimiser.

use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct NelderMeadOptions<T> {
    pub max_iter: usize,
    /// Relative spread of simplex values, `|f_worst - f_best| <= ftol (1 + |f_best|)`.
    pub ftol: T,
    /// Largest coordinate spread of the simplex.
    pub xtol: T,
    pub initial_step: T,
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult<T> {
    pub x: Vec<T>,
    pub value: T,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best value after each iteration; non-increasing.
    pub trace: Vec<T>,
}

fn clamp_into<T: Real>(x: &mut [T], lower: &[T], upper: &[T]) {
    for ((xi, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
        *xi = xi.max(lo).min(hi);
    }
}

pub fn nelder_mead<T, F>(mut f: F, x0: &[T], opts: &NelderMeadOptions<T>) -> NelderMeadResult<T>
where
    T: Real,
    F: FnMut(&[T]) -> T,
{
    let n = x0.len();
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let mut evaluations = 0usize;
    let mut eval = |x: &[T], evaluations: &mut usize| {
        *evaluations += 1;
        let v = f(x);
        if v.is_nan() {
            T::infinity()
        } else {
            v
        }
    };

    let mut simplex: Vec<Vec<T>> = Vec::with_capacity(n + 1);
    let mut start = x0.to_vec();
    clamp_into(&mut start, &opts.lower, &opts.upper);
    simplex.push(start.clone());
    for i in 0..n {
        let mut v = start.clone();
        // step away from the nearer bound
        let up = v[i] + opts.initial_step;
        v[i] = if up <= opts.upper[i] { up } else { v[i] - opts.initial_step };
        clamp_into(&mut v, &opts.lower, &opts.upper);
        simplex.push(v);
    }
    let mut values: Vec<T> = simplex.iter().map(|x| eval(x, &mut evaluations)).collect();

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0usize;
    while iterations < opts.max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let best = values[0];
        let worst = values[n];
        let fspread = (worst - best).abs();
        let xspread = (0..n)
            .map(|d| {
                let (lo, hi) = simplex.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), v| {
                    (lo.min(v[d]), hi.max(v[d]))
                });
                hi - lo
            })
            .fold(T::zero(), |a, b| a.max(b));
        if best.is_finite() && fspread <= opts.ftol * (T::one() + best.abs()) && xspread <= opts.xtol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut centroid = vec![T::zero(); n];
        for v in simplex.iter().take(n) {
            for d in 0..n {
                centroid[d] += v[d];
            }
        }
        let inv_n = T::one() / T::from_count(n);
        centroid.iter_mut().for_each(|c| *c *= inv_n);

        let along = |t: T| -> Vec<T> {
            let mut p: Vec<T> = (0..n).map(|d| centroid[d] + t * (simplex[n][d] - centroid[d])).collect();
            clamp_into(&mut p, &opts.lower, &opts.upper);
            p
        };

        let xr = along(-T::one());
        let fr = eval(&xr, &mut evaluations);
        if fr < values[0] {
            let xe = along(-two);
            let fe = eval(&xe, &mut evaluations);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                let xc = along(-half);
                let fc = eval(&xc, &mut evaluations);
                (xc, fc)
            } else {
                let xc = along(half);
                let fc = eval(&xc, &mut evaluations);
                (xc, fc)
            };
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    let mut p: Vec<T> =
                        (0..n).map(|d| simplex[0][d] + half * (simplex[i][d] - simplex[0][d])).collect();
                    clamp_into(&mut p, &opts.lower, &opts.upper);
                    values[i] = eval(&p, &mut evaluations);
                    simplex[i] = p;
                }
            }
        }
        trace.push(values.iter().copied().fold(T::infinity(), T::min));
    }

    let (bi, _) = values
        .iter()
        .enumerate()
        .fold((0, T::infinity()), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
    NelderMeadResult {
        x: simplex[bi].clone(),
        value: values[bi],
        iterations,
        evaluations,
        converged,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(n: usize) -> NelderMeadOptions<f64> {
        NelderMeadOptions {
            max_iter: 500,
            ftol: 1e-12,
            xtol: 1e-8,
            initial_step: 0.5,
            lower: vec![-10.0; n],
            upper: vec![10.0; n],
        }
    }

    #[test]
    fn minimises_rosenbrock() {
        let r = nelder_mead(
            |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            &opts(2),
        );
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r.x);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn respects_bounds() {
        let mut o = opts(2);
        o.lower = vec![0.5, -10.0];
        let r = nelder_mead(|x: &[f64]| x[0] * x[0] + (x[1] - 2.0).powi(2), &[3.0, 0.0], &o);
        assert!((r.x[0] - 0.5).abs() < 1e-8);
        assert!((r.x[1] - 2.0).abs() < 1e-5);
    }
}
