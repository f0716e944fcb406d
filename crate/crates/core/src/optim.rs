//! Derivative-free minimizers used by the variance-component fits.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub point: f64,
    pub value: f64,
    pub iterations: usize,
}

/// Brent's method on `[lo, hi]`; assumes the minimum is bracketed.
pub fn brent_minimize(
    f: &mut impl FnMut(f64) -> Result<f64>,
    lo: f64,
    hi: f64,
    x_tol: f64,
    max_iter: usize,
) -> Result<Minimum> {
    const GOLDEN: f64 = 0.381_966_011_250_105;
    let (mut a, mut b) = (lo.min(hi), lo.max(hi));
    let mut x = a + GOLDEN * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x)?;
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for iter in 0..max_iter {
        let m = 0.5 * (a + b);
        let tol1 = x_tol * x.abs() + 1e-14;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            return Ok(Minimum {
                point: x,
                value: fx,
                iterations: iter,
            });
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if m >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= m { a - x } else { b - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u)?;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Err(Error::Convergence {
        iterations: max_iter,
        best_objective: fx,
        best_point: vec![x],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexMinimum {
    pub point: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

/// Nelder-Mead simplex search. Stops when the spread of objective values across
/// the simplex drops below `f_tol`.
pub fn nelder_mead(
    f: &mut impl FnMut(&[f64]) -> Result<f64>,
    start: &[f64],
    step: f64,
    f_tol: f64,
    max_iter: usize,
) -> Result<SimplexMinimum> {
    let dim = start.len();
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..dim {
        let mut pt = start.to_vec();
        pt[i] += step;
        simplex.push(pt);
    }
    let mut values = simplex
        .iter()
        .map(|pt| f(pt))
        .collect::<Result<Vec<f64>>>()?;

    for iter in 0..max_iter {
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        if (values[dim] - values[0]).abs() < f_tol {
            return Ok(SimplexMinimum {
                point: simplex[0].clone(),
                value: values[0],
                iterations: iter,
            });
        }

        let centroid: Vec<f64> = (0..dim)
            .map(|k| simplex[..dim].iter().map(|pt| pt[k]).sum::<f64>() / dim as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[dim])
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };

        let reflected = along(-1.0);
        let fr = f(&reflected)?;
        if fr < values[0] {
            let expanded = along(-2.0);
            let fe = f(&expanded)?;
            if fe < fr {
                simplex[dim] = expanded;
                values[dim] = fe;
            } else {
                simplex[dim] = reflected;
                values[dim] = fr;
            }
            continue;
        }
        if fr < values[dim - 1] {
            simplex[dim] = reflected;
            values[dim] = fr;
            continue;
        }
        let (contracted, fc) = if fr < values[dim] {
            let c = along(-0.5);
            let fc = f(&c)?;
            (c, fc)
        } else {
            let c = along(0.5);
            let fc = f(&c)?;
            (c, fc)
        };
        if fc < values[dim].min(fr) {
            simplex[dim] = contracted;
            values[dim] = fc;
            continue;
        }
        let best = simplex[0].clone();
        for i in 1..=dim {
            simplex[i] = best
                .iter()
                .zip(&simplex[i])
                .map(|(b, x)| b + 0.5 * (x - b))
                .collect();
            values[i] = f(&simplex[i])?;
        }
    }
    let best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Err(Error::Convergence {
        iterations: max_iter,
        best_objective: values[best],
        best_point: simplex[best].clone(),
    })
}
