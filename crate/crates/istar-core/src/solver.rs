//! Exact matrix-form ISTA for the l1-regularized least-squares objective
//!
//! ```text
//!     minimize  ||D x - y||_2^2 + lambda * ||x||_1
//! ```
//!
//! over an explicit degradation matrix `D`. One iteration is a gradient step
//! on the data term followed by soft thresholding:
//!
//! ```text
//!     x_{k+1} = T_{lambda * alpha}( x_k - alpha * D^T (D x_k - y) )
//! ```
//!
//! which expands to the algebraically identical rewrite
//! `T_{lambda*alpha}((E - alpha D^T D) x_k + alpha D^T y)`. Since `D^T y`
//! does not depend on the iterate it is computed once before the loop and
//! reused every iteration.
//!
//! The step uses the half-scaled gradient convention (no factor 2 in front
//! of `D^T`), which makes it a proximal-gradient step on the composite
//!
//! ```text
//!     0.5 * ||D x - y||_2^2 + lambda * ||x||_1
//! ```
//!
//! ([`composite_objective`]). That composite is guaranteed non-increasing
//! for `alpha <= 1/L`, `L` the largest eigenvalue of `D^T D`; the unscaled
//! objective above is reported in the trace but can tick up transiently when
//! the threshold dominates the gradient step.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::ops::soft_threshold_scalar;

/// Degradation matrix, observation, and l1 weight.
#[derive(Debug, Clone)]
pub struct IstaProblem {
    pub d: Array2<f64>,
    pub y: Array1<f64>,
    pub lambda: f64,
}

impl IstaProblem {
    pub fn new(d: Array2<f64>, y: Array1<f64>, lambda: f64) -> Result<Self> {
        if d.nrows() == 0 || d.ncols() == 0 {
            return Err(Error::invalid("ista_problem", "empty matrix"));
        }
        if d.nrows() != y.len() {
            return Err(Error::shape(
                "ista_problem",
                format!("D is {}x{} but y has length {}", d.nrows(), d.ncols(), y.len()),
            ));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid("ista_problem", "lambda must be finite and >= 0"));
        }
        if d.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("ista_problem entries"));
        }
        Ok(IstaProblem { d, y, lambda })
    }

    pub fn m(&self) -> usize {
        self.d.nrows()
    }

    pub fn n(&self) -> usize {
        self.d.ncols()
    }

    /// Parse the plain-text problem format: first line `m n`, then `m` rows
    /// of `D`, then the `m` entries of `y`, then `lambda`. Tokens are
    /// whitespace-separated; `#` starts a comment that runs to end of line.
    pub fn from_text(text: &str) -> Result<Self> {
        let cleaned: String = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .collect::<Vec<_>>()
            .join("\n");
        let mut tokens = cleaned.split_whitespace();
        let mut next_usize = |what: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| Error::Parse(format!("missing {what}")))?
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("bad {what}: {e}")))
        };
        let m = next_usize("m")?;
        let n = next_usize("n")?;
        if m == 0 || n == 0 {
            return Err(Error::Parse("m and n must be >= 1".into()));
        }
        let mut next_f64 = |what: String| -> Result<f64> {
            tokens
                .next()
                .ok_or_else(|| Error::Parse(format!("missing {what}")))?
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad {what}: {e}")))
        };
        let mut d = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                d.push(next_f64(format!("D[{i}][{j}]"))?);
            }
        }
        let mut y = Vec::with_capacity(m);
        for i in 0..m {
            y.push(next_f64(format!("y[{i}]"))?);
        }
        let lambda = next_f64("lambda".into())?;
        if tokens.next().is_some() {
            return Err(Error::Parse("trailing tokens after lambda".into()));
        }
        let d = Array2::from_shape_vec((m, n), d)
            .map_err(|e| Error::Parse(format!("matrix shape: {e}")))?;
        IstaProblem::new(d, Array1::from_vec(y), lambda)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

/// Step size, iteration budget, and stopping tolerance for [`solve`].
#[derive(Debug, Clone)]
pub struct IstaSolverConfig {
    /// Fixed step size; `None` selects `0.99 / L` with `L` estimated by
    /// power iteration.
    pub alpha: Option<f64>,
    pub max_iters: usize,
    /// Stop when the relative objective decrease falls below this.
    pub tol: f64,
}

impl Default for IstaSolverConfig {
    fn default() -> Self {
        IstaSolverConfig {
            alpha: None,
            max_iters: 10_000,
            tol: 1e-10,
        }
    }
}

impl IstaSolverConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::invalid("solver_config", "alpha must be finite and > 0"));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("solver_config", "max_iters must be >= 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::invalid("solver_config", "tol must be >= 0"));
        }
        Ok(())
    }
}

/// Iterates, objective values, and residual norms of one solve.
#[derive(Debug, Clone, Default)]
pub struct IstaTrace {
    pub iterates: Vec<Array1<f64>>,
    pub objectives: Vec<f64>,
    /// The half-quadratic composite per iterate; see [`composite_objective`].
    pub composite_objectives: Vec<f64>,
    pub residual_norms: Vec<f64>,
    /// Step size actually used.
    pub alpha: f64,
    pub converged: bool,
}

impl IstaTrace {
    /// `iter,objective,residual` rows, starting from the initial point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,objective,residual\n");
        for (i, (obj, res)) in self
            .objectives
            .iter()
            .zip(&self.residual_norms)
            .enumerate()
        {
            let _ = writeln!(out, "{i},{obj:.17e},{res:.17e}");
        }
        out
    }
}

/// `||D x - y||_2^2 + lambda ||x||_1`
pub fn objective(problem: &IstaProblem, x: &Array1<f64>) -> Result<f64> {
    check_len(problem, x, "objective")?;
    let r = problem.d.dot(x) - &problem.y;
    Ok(r.dot(&r) + problem.lambda * x.iter().map(|v| v.abs()).sum::<f64>())
}

/// `0.5 * ||D x - y||_2^2 + lambda ||x||_1`, the composite the ISTA map is
/// a proximal-gradient step on. Monotone under [`ista_step`] whenever
/// `alpha <= 1/L`.
pub fn composite_objective(problem: &IstaProblem, x: &Array1<f64>) -> Result<f64> {
    check_len(problem, x, "composite_objective")?;
    let r = problem.d.dot(x) - &problem.y;
    Ok(0.5 * r.dot(&r) + problem.lambda * x.iter().map(|v| v.abs()).sum::<f64>())
}

fn check_len(problem: &IstaProblem, x: &Array1<f64>, op: &'static str) -> Result<()> {
    if x.len() != problem.n() {
        return Err(Error::shape(
            op,
            format!("x has length {}, expected {}", x.len(), problem.n()),
        ));
    }
    Ok(())
}

/// One ISTA iteration in the gradient form with a caller-supplied `D^T y`.
fn ista_step_with(
    problem: &IstaProblem,
    x: &Array1<f64>,
    alpha: f64,
    dty: &Array1<f64>,
) -> Array1<f64> {
    let dx = problem.d.dot(x);
    let grad = problem.d.t().dot(&dx) - dty;
    let threshold = problem.lambda * alpha;
    let mut next = x - &(alpha * grad);
    next.mapv_inplace(|v| soft_threshold_scalar(v, threshold));
    next
}

/// One ISTA iteration: `T_{lambda*alpha}(x - alpha * D^T (D x - y))`.
pub fn ista_step(problem: &IstaProblem, x: &Array1<f64>, alpha: f64) -> Result<Array1<f64>> {
    check_len(problem, x, "ista_step")?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("ista_step", "alpha must be finite and > 0"));
    }
    let dty = problem.d.t().dot(&problem.y);
    Ok(ista_step_with(problem, x, alpha, &dty))
}

/// The same iteration computed through the explicit rewrite
/// `T_{lambda*alpha}((E - alpha D^T D) x + alpha D^T y)`; an independent
/// code path kept for cross-checking the algebraic identity.
pub fn ista_step_rewrite(
    problem: &IstaProblem,
    x: &Array1<f64>,
    alpha: f64,
) -> Result<Array1<f64>> {
    check_len(problem, x, "ista_step_rewrite")?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("ista_step_rewrite", "alpha must be finite and > 0"));
    }
    let n = problem.n();
    let dtd = problem.d.t().dot(&problem.d);
    let mut iteration_matrix = Array2::<f64>::eye(n);
    iteration_matrix = iteration_matrix - alpha * &dtd;
    let shift = alpha * problem.d.t().dot(&problem.y);
    let mut next = iteration_matrix.dot(x) + &shift;
    let threshold = problem.lambda * alpha;
    next.mapv_inplace(|v| soft_threshold_scalar(v, threshold));
    Ok(next)
}

/// Largest eigenvalue of `D^T D`, estimated with 50 power-iteration steps.
pub fn estimate_lipschitz(d: &Array2<f64>) -> f64 {
    let n = d.ncols();
    let mut v = Array1::<f64>::from_elem(n, 1.0 / (n as f64).sqrt());
    for _ in 0..50 {
        let w = d.t().dot(&d.dot(&v));
        let norm = w.dot(&w).sqrt();
        if norm < 1e-300 {
            return 0.0;
        }
        v = w / norm;
    }
    let dv = d.dot(&v);
    dv.dot(&dv)
}

/// Run ISTA from `x = 0` until the iteration budget is exhausted or the
/// relative objective decrease drops below `tol`. Non-convergence is
/// reported in the trace, not as an error.
pub fn solve(problem: &IstaProblem, config: &IstaSolverConfig) -> Result<(Array1<f64>, IstaTrace)> {
    config.validate()?;
    let alpha = match config.alpha {
        Some(a) => a,
        None => {
            let l = estimate_lipschitz(&problem.d);
            if l > 0.0 {
                0.99 / l
            } else {
                1.0
            }
        }
    };

    // the iterate-independent part of the gradient, computed once
    let dty = problem.d.t().dot(&problem.y);

    let mut x = Array1::<f64>::zeros(problem.n());
    let mut trace = IstaTrace {
        alpha,
        ..Default::default()
    };
    let push = |trace: &mut IstaTrace, x: &Array1<f64>| -> Result<f64> {
        let obj = objective(problem, x)?;
        if !obj.is_finite() {
            return Err(Error::non_finite("ista objective"));
        }
        let r = problem.d.dot(x) - &problem.y;
        let rsq = r.dot(&r);
        let l1: f64 = x.iter().map(|v| v.abs()).sum();
        trace.iterates.push(x.clone());
        trace.objectives.push(obj);
        trace.composite_objectives.push(0.5 * rsq + problem.lambda * l1);
        trace.residual_norms.push(rsq.sqrt());
        Ok(obj)
    };

    let mut prev_obj = push(&mut trace, &x)?;
    for _ in 0..config.max_iters {
        x = ista_step_with(problem, &x, alpha, &dty);
        let obj = push(&mut trace, &x)?;
        if (prev_obj - obj).abs() < config.tol * prev_obj.abs().max(1.0) {
            trace.converged = true;
            break;
        }
        prev_obj = obj;
    }
    Ok((x, trace))
}

/// True when `x` is a fixed point of the ISTA map to within `1e-8` in the
/// max norm, which is equivalent to the l1 subgradient optimality condition.
pub fn check_fixed_point(problem: &IstaProblem, x: &Array1<f64>, alpha: f64) -> Result<bool> {
    let next = ista_step(problem, x, alpha)?;
    let dist = next
        .iter()
        .zip(x.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    Ok(dist < 1e-8)
}
