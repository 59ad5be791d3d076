//! Derivative-free local minimisation (Nelder-Mead simplex).

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SimplexOptions {
    /// Initial edge length along each axis.
    pub step: f64,
    pub max_evals: usize,
    /// Stop once the spread of simplex values falls below this.
    pub f_tol: f64,
    /// ... and the simplex fits in a box of this half-width.
    pub x_tol: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            step: 0.5,
            max_evals: 200,
            f_tol: 1e-8,
            x_tol: 1e-4,
        }
    }
}

/// Minimise `f` from `x0`. Non-finite values are treated as `+inf`, so `f`
/// may reject infeasible points that way. The returned point is never worse
/// than `x0`.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], opts: &SimplexOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), f0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += opts.step;
        let v = eval(&x, &mut evals);
        simplex.push((x, v));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let spread = if worst.is_finite() {
            worst - best
        } else {
            f64::INFINITY
        };
        let size = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if evals >= opts.max_evals || (spread <= opts.f_tol && size <= opts.x_tol) {
            break;
        }

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / n as f64;
            }
        }
        let towards = |coef: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + coef * (w - c))
                .collect()
        };

        let xr = towards(-alpha);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = towards(-gamma);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[n].1 {
            let xc = towards(-rho);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = towards(rho);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < fr.min(simplex[n].1) {
            simplex[n] = (xc, fc);
            continue;
        }
        let x_best = simplex[0].0.clone();
        for entry in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = x_best
                .iter()
                .zip(&entry.0)
                .map(|(b, xi)| b + sigma * (xi - b))
                .collect();
            let v = eval(&x, &mut evals);
            *entry = (x, v);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Minimum { x, value, evals }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_quadratic_minimum() {
        let f = |x: &[f64]| (x[0] - 1.0).powi(2) + 3.0 * (x[1] + 2.0).powi(2) + 0.5 * (x[2] - 0.3).powi(2);
        let opts = SimplexOptions {
            max_evals: 2000,
            ..Default::default()
        };
        let m = nelder_mead(f, &[0.0, 0.0, 0.0], &opts);
        assert!((m.x[0] - 1.0).abs() < 1e-3);
        assert!((m.x[1] + 2.0).abs() < 1e-3);
        assert!((m.x[2] - 0.3).abs() < 1e-3);
    }

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
        let opts = SimplexOptions {
            max_evals: 5000,
            f_tol: 1e-14,
            x_tol: 1e-8,
            ..Default::default()
        };
        let m = nelder_mead(f, &[-1.2, 1.0], &opts);
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn never_worse_than_start_and_respects_budget() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::INFINITY } else { (x[0] - 5.0).abs() };
        let opts = SimplexOptions {
            max_evals: 10,
            ..Default::default()
        };
        let m = nelder_mead(f, &[0.1], &opts);
        assert!(m.value <= 4.9);
        assert!(m.evals <= 12);
    }
}
