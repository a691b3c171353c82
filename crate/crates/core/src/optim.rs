//! BFGS minimiser with a backtracking Armijo line search.
//!
//! The objective and gradient are supplied separately so the caller decides
//! how derivatives are obtained; objective failures inside the line search are
//! treated as `+∞` and simply shorten the step.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    /// Stop once the Euclidean gradient norm falls below this.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Longest step (Euclidean) the line search may start from.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            grad_tol: 1e-6,
            max_iter: 500,
            max_step: 4.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting with the initial value.
    pub history: Vec<f64>,
    pub message: String,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const STALL_ITERATIONS: usize = 4;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn identity(k: usize, scale: f64) -> Vec<f64> {
    let mut h = vec![0.0; k * k];
    for i in 0..k {
        h[i * k + i] = scale;
    }
    h
}

/// `H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ` on a row-major inverse Hessian.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], rho: f64) {
    let k = s.len();
    let hy: Vec<f64> = (0..k).map(|i| dot(&h[i * k..(i + 1) * k], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..k {
        for j in 0..k {
            h[i * k + j] +=
                -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

pub fn minimize<F, G>(f: F, grad: G, x0: &[f64], opts: &BfgsOptions) -> Result<Minimum>
where
    F: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let k = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x)?;
    if !fx.is_finite() {
        return Err(Error::Domain(format!(
            "objective is {fx} at the starting point"
        )));
    }
    let mut g = grad(&x)?;
    let mut h = identity(k, 1.0);
    let mut fresh = true;
    let mut history = vec![fx];
    let mut stalled = 0;
    let mut message = String::from("iteration limit reached");
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        let gn = norm(&g);
        if gn < opts.grad_tol {
            converged = true;
            message = "gradient norm below tolerance".into();
            break;
        }
        iterations += 1;

        let mut d: Vec<f64> = (0..k).map(|i| -dot(&h[i * k..(i + 1) * k], &g)).collect();
        let mut slope = dot(&d, &g);
        if !(slope < 0.0) {
            h = identity(k, 1.0);
            fresh = true;
            d = g.iter().map(|v| -v).collect();
            slope = -gn * gn;
        }
        let dn = norm(&d);
        let mut alpha = if fresh { (1.0 / gn).min(1.0) } else { 1.0 };
        if alpha * dn > opts.max_step {
            alpha = opts.max_step / dn;
        }

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            let ft = f(&trial).unwrap_or(f64::INFINITY);
            if ft.is_finite() && ft <= fx + ARMIJO * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            // Minimiser of the quadratic through f(0), f'(0) and f(α), kept in [0.1α, 0.5α].
            let next = if ft.is_finite() {
                -slope * alpha * alpha / (2.0 * (ft - fx - slope * alpha))
            } else {
                0.1 * alpha
            };
            alpha = next.clamp(0.1 * alpha, 0.5 * alpha);
        }
        let Some((x_new, f_new)) = accepted else {
            message = "line search could not decrease the objective".into();
            break;
        };

        let g_new = grad(&x_new)?;
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if fresh {
                h = identity(k, sy / dot(&y, &y));
            }
            bfgs_update(&mut h, &s, &y, 1.0 / sy);
            fresh = false;
        }

        if fx - f_new <= 1e-15 * fx.abs().max(1.0) {
            stalled += 1;
        } else {
            stalled = 0;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        history.push(fx);
        if stalled >= STALL_ITERATIONS {
            message = "objective stopped decreasing".into();
            break;
        }
    }

    let grad_norm = norm(&g);
    if grad_norm < opts.grad_tol {
        converged = true;
    }
    Ok(Minimum {
        x,
        value: fx,
        gradient: g,
        grad_norm,
        iterations,
        converged,
        history,
        message,
    })
}
