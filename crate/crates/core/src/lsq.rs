//! Small dense nonlinear least-squares solver used by the primitive fits.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub(crate) struct LmOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-10,
        }
    }
}

fn jacobian<F>(f: &F, x: &DVector<f64>, rows: usize) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut j = DMatrix::zeros(rows, x.len());
    for k in 0..x.len() {
        let h = 1e-7 * (1.0 + x[k].abs());
        let mut xp = x.clone();
        xp[k] += h;
        let mut xm = x.clone();
        xm[k] -= h;
        let d = (f(&xp) - f(&xm)) / (2.0 * h);
        j.set_column(k, &d);
    }
    j
}

/// Damped Gauss-Newton (Levenberg-Marquardt) minimization of `|f(x)|^2`.
///
/// Steps are only accepted when they lower the cost, so the returned cost is
/// never above the cost at `x0`.
pub(crate) fn minimize<F>(x0: DVector<f64>, f: F, opts: LmOptions) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut x = x0;
    let mut r = f(&x);
    let mut cost = r.norm_squared();
    if !cost.is_finite() {
        return x;
    }
    let mut lambda = 1e-3;
    for _ in 0..opts.max_iterations {
        let j = jacobian(&f, &x, r.len());
        let g = j.transpose() * &r;
        if g.amax() <= opts.gradient_tolerance * (1.0 + cost) || cost == 0.0 {
            break;
        }
        let jtj = j.transpose() * &j;
        let mut accepted = false;
        for _ in 0..12 {
            let mut a = jtj.clone();
            for k in 0..a.nrows() {
                a[(k, k)] += lambda * (jtj[(k, k)].max(1e-12));
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&g));
            let xn = &x + &step;
            let rn = f(&xn);
            let cn = rn.norm_squared();
            if cn.is_finite() && cn < cost {
                let rel = (cost - cn) / cost.max(1e-300);
                x = xn;
                r = rn;
                cost = cn;
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                if rel < 1e-15 {
                    return x;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    x
}
