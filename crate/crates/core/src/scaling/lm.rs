//! Levenberg-Marquardt on the softplus-reparameterized law with
//! iteratively reweighted Huber residuals.

use super::{FitMethod, LawParams, ScalingPoint, HUBER_DELTA};

const MAX_ITERS: usize = 2_000;
const LAMBDA0: f64 = 1e-3;
/// Weak ridge on the coefficients a, b, c (relative to the mean loss). It
/// only matters when the data cannot tell a flat term from `L0`, and then
/// it hands the constant to `L0`.
const RIDGE: f64 = 1e-6;
const COEFFS: [usize; 3] = [1, 2, 3];

/// Parameter order: L0, a, b, c, α, β, γ.
pub(super) fn free_params(method: FitMethod) -> usize {
    match method {
        FitMethod::Full => 7,
        FitMethod::FixedN => 5,
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    let y = y.max(1e-300);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Indices into the 7-vector that are optimized.
fn active(method: FitMethod) -> &'static [usize] {
    match method {
        FitMethod::Full => &[0, 1, 2, 3, 4, 5, 6],
        FitMethod::FixedN => &[0, 1, 2, 4, 5],
    }
}

fn params_of(theta: &[f64; 7], method: FitMethod) -> LawParams {
    let p: Vec<f64> = theta.iter().map(|&t| softplus(t)).collect();
    let fixed = method == FitMethod::FixedN;
    LawParams {
        l0: p[0],
        a: p[1],
        b: p[2],
        c: if fixed { 0.0 } else { p[3] },
        alpha: p[4],
        beta: p[5],
        gamma: if fixed { 0.0 } else { p[6] },
    }
}

fn huber(r: f64) -> f64 {
    if r.abs() <= HUBER_DELTA {
        0.5 * r * r
    } else {
        HUBER_DELTA * (r.abs() - 0.5 * HUBER_DELTA)
    }
}

fn residuals(points: &[ScalingPoint], p: &LawParams) -> Vec<f64> {
    points
        .iter()
        .map(|q| p.predict(q.depth, q.width, q.tokens).max(1e-300).ln() - q.loss.ln())
        .collect()
}

fn mean_loss(points: &[ScalingPoint]) -> f64 {
    points.iter().map(|q| q.loss).sum::<f64>() / points.len() as f64
}

fn prior(points: &[ScalingPoint], p: &LawParams) -> [f64; 3] {
    let s = RIDGE / mean_loss(points);
    [s * p.a, s * p.b, s * p.c]
}

fn cost(points: &[ScalingPoint], p: &LawParams) -> f64 {
    let c: f64 = residuals(points, p).into_iter().map(huber).sum::<f64>()
        + 0.5 * prior(points, p).iter().map(|r| r * r).sum::<f64>();
    if c.is_finite() {
        c
    } else {
        f64::INFINITY
    }
}

/// Jacobian of the log residuals with respect to the active raw parameters.
fn jacobian(points: &[ScalingPoint], theta: &[f64; 7], method: FitMethod) -> Vec<Vec<f64>> {
    let p = params_of(theta, method);
    let act = active(method);
    points
        .iter()
        .map(|q| {
            let pred = p.predict(q.depth, q.width, q.tokens).max(1e-300);
            let (dd, dw, dn) = (q.depth.powf(-p.alpha), q.width.powf(-p.beta), q.tokens.powf(-p.gamma));
            let full = [
                1.0,
                dd,
                dw,
                dn,
                -p.a * dd * q.depth.ln(),
                -p.b * dw * q.width.ln(),
                -p.c * dn * q.tokens.ln(),
            ];
            act.iter().map(|&k| full[k] * sigmoid(theta[k]) / pred).collect()
        })
        .collect()
}

/// Solve `a x = b` by Gaussian elimination with partial pivoting.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Minimize from `start` (positive parameter values in L0, a, b, c, α, β, γ
/// order). Returns the parameters and the final Huber cost.
pub(super) fn solve(points: &[ScalingPoint], method: FitMethod, start: &[f64; 7]) -> (LawParams, f64) {
    let mut theta = start.map(softplus_inv);
    let act = active(method);
    let k = act.len();
    let mut cur = cost(points, &params_of(&theta, method));
    let mut lambda = LAMBDA0;
    for _ in 0..MAX_ITERS {
        let p = params_of(&theta, method);
        let r = residuals(points, &p);
        let j = jacobian(points, &theta, method);
        // IRLS weights turn the Huber loss into weighted least squares.
        let w: Vec<f64> = r
            .iter()
            .map(|x| {
                if x.abs() <= HUBER_DELTA {
                    1.0
                } else {
                    HUBER_DELTA / x.abs()
                }
            })
            .collect();
        let mut jtj = vec![vec![0.0; k]; k];
        let mut jtr = vec![0.0; k];
        for i in 0..points.len() {
            for a in 0..k {
                jtr[a] += w[i] * j[i][a] * r[i];
                for b in 0..k {
                    jtj[a][b] += w[i] * j[i][a] * j[i][b];
                }
            }
        }
        let pr = prior(points, &p);
        let s = RIDGE / mean_loss(points);
        for (slot, &idx) in COEFFS.iter().enumerate() {
            if let Some(a) = act.iter().position(|&x| x == idx) {
                let d = s * sigmoid(theta[idx]);
                jtr[a] += d * pr[slot];
                jtj[a][a] += d * d;
            }
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut damped = jtj.clone();
            for a in 0..k {
                damped[a][a] += lambda * (jtj[a][a] + 1e-12);
            }
            let Some(step) = solve_linear(damped, jtr.iter().map(|v| -v).collect()) else {
                lambda *= 4.0;
                continue;
            };
            let mut trial = theta;
            for (a, &idx) in act.iter().enumerate() {
                trial[idx] += step[a];
            }
            let c = cost(points, &params_of(&trial, method));
            if c < cur {
                theta = trial;
                cur = c;
                lambda = (lambda / 3.0).max(1e-15);
                improved = true;
                break;
            }
            lambda *= 4.0;
        }
        if !improved || cur < 1e-32 {
            break;
        }
    }
    (params_of(&theta, method), cur)
}
