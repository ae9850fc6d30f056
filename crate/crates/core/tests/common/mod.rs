//! Independent reference implementations shared by the integration suites.
//!
//! Nothing here calls into the code paths it is used to check.

#![allow(dead_code)]

use nalgebra::Vector3;
use rand::Rng;

pub type P3 = Vector3<f64>;

/// Full knot sequence for a cubic spline over `count` controls. Periodic
/// sequences cover `count + 3` wrapped controls.
pub fn oracle_knots(count: usize, closed: bool) -> Vec<f64> {
    if closed {
        (0..count + 7).map(|k| (k as f64 - 3.0) / count as f64).collect()
    } else {
        let spans = count - 3;
        let mut t = vec![0.0; 4];
        for k in 1..spans {
            t.push(k as f64 / spans as f64);
        }
        t.extend([1.0; 4]);
        t
    }
}

/// Textbook Cox-de Boor recursion, 0/0 := 0.
pub fn cox_de_boor(i: usize, p: usize, u: f64, t: &[f64], right_end: bool) -> f64 {
    if p == 0 {
        let inside = t[i] <= u && u < t[i + 1];
        // At the right end of a clamped domain the last non-empty span is closed.
        let at_end = right_end && u == t[i + 1] && t[i] < t[i + 1] && t[i + 1..].iter().all(|&x| x == t[i + 1]);
        return if inside || at_end { 1.0 } else { 0.0 };
    }
    let mut out = 0.0;
    let d1 = t[i + p] - t[i];
    if d1 > 0.0 {
        out += (u - t[i]) / d1 * cox_de_boor(i, p - 1, u, t, right_end);
    }
    let d2 = t[i + p + 1] - t[i + 1];
    if d2 > 0.0 {
        out += (t[i + p + 1] - u) / d2 * cox_de_boor(i + 1, p - 1, u, t, right_end);
    }
    out
}

/// Basis values for `count` controls, folding wrapped functions for closed splines.
pub fn oracle_basis(u: f64, count: usize, closed: bool) -> Vec<f64> {
    let t = oracle_knots(count, closed);
    let u = if closed && u >= 1.0 { 0.0 } else { u };
    let n_ext = if closed { count + 3 } else { count };
    let mut out = vec![0.0; count];
    for i in 0..n_ext {
        out[i % count] += cox_de_boor(i, 3, u, &t, !closed);
    }
    out
}

/// de Boor's point evaluation of a cubic curve over the full knot sequence `t`.
pub fn de_boor_curve(u: f64, t: &[f64], ctrl: &[P3]) -> P3 {
    let n = ctrl.len();
    let mut k = 3;
    while k + 1 < n && t[k + 1] <= u {
        k += 1;
    }
    let mut d: Vec<P3> = (0..4).map(|j| ctrl[j + k - 3]).collect();
    for r in 1..=3 {
        for j in (r..=3).rev() {
            let i = j + k - 3;
            let denom = t[i + 4 - r] - t[i];
            let alpha = if denom > 0.0 { (u - t[i]) / denom } else { 0.0 };
            d[j] = d[j - 1] * (1.0 - alpha) + d[j] * alpha;
        }
    }
    d[3]
}

fn extend(ctrl: &[P3], closed: bool) -> Vec<P3> {
    if closed {
        (0..ctrl.len() + 3).map(|i| ctrl[i % ctrl.len()]).collect()
    } else {
        ctrl.to_vec()
    }
}

/// Surface point by nested de Boor evaluation (rows along u, row-major grid).
pub fn de_boor_surface(points: &[P3], rows: usize, cols: usize, closed_u: bool, closed_v: bool, u: f64, v: f64) -> P3 {
    let tu = oracle_knots(rows, closed_u);
    let tv = oracle_knots(cols, closed_v);
    let u = if closed_u && u >= 1.0 { 0.0 } else { u };
    let v = if closed_v && v >= 1.0 { 0.0 } else { v };
    let column: Vec<P3> = (0..rows)
        .map(|p| {
            let row: Vec<P3> = (0..cols).map(|q| points[p * cols + q]).collect();
            de_boor_curve(v, &tv, &extend(&row, closed_v))
        })
        .collect();
    de_boor_curve(u, &tu, &extend(&column, closed_u))
}

pub fn random_unit<R: Rng>(rng: &mut R) -> P3 {
    loop {
        let v = P3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Minimum-cost assignment of rows to distinct columns by exhaustive search.
pub fn brute_force_assignment(costs: &[Vec<f64>]) -> f64 {
    fn rec(costs: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == costs.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                rec(costs, row + 1, used, acc + costs[row][c], best);
                used[c] = false;
            }
        }
    }
    let rows = costs.len();
    let cols = costs[0].len();
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| costs[r][c]).collect()).collect();
        return brute_force_assignment(&t);
    }
    let mut best = f64::INFINITY;
    rec(costs, 0, &mut vec![false; cols], 0.0, &mut best);
    best
}

/// Squared-distance Chamfer terms by direct double loop.
pub fn brute_chamfer(a: &[P3], b: &[P3]) -> (f64, f64, f64) {
    let side = |x: &[P3], y: &[P3]| {
        x.iter()
            .map(|p| y.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    let p = side(a, b);
    let s = side(b, a);
    (p, s, 0.5 * (p + s))
}
