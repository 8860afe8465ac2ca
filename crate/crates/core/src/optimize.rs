//! Poisson maximum-likelihood fitting.
//!
//! The observation model is `y_m ~ Poisson((X a)_m)` with `X` column-normalised
//! and `a >= 0` the per-signature total counts. The negative log-likelihood
//! (dropping the `a`-independent `log y!` terms) is
//!
//! `L(a) = sum_m (X a)_m - y_m log (X a)_m`,
//!
//! with `0 log 0 = 0` and `L = +inf` when some `y_m > 0` has `(X a)_m = 0`.
//!
//! Solvers: a multiplicative non-negative Poisson update (`nnpu_fit`, monotone
//! in `L` and convergent on this convex objective), a bounded one-dimensional
//! Nelder-Mead for scalar signature parameters, and a block-coordinate descent
//! (`bcd_fit`) alternating the two for parametric libraries.
//!
//! The multiplicative update only needs channels with `y_m > 0` for its ratio
//! sums, and the linear NLL term reduces to full column sums; the solver
//! exploits both, so cost scales with the observed support, not the grid.

use crate::error::{Error, Result};
use crate::signature::SignatureLibrary;
use crate::variability::SignatureSource;
use ndarray::ArrayView2;

/// Floor inside divisions guarding against zero expected counts.
const DIVISION_FLOOR: f64 = 1e-12;

/// Warm-start floor: an exactly zero entry is absorbing for multiplicative
/// updates, so zero warm entries are lifted to a strictly positive fraction of
/// total counts. Positive entries pass through verbatim, which makes a
/// restart at a previous solution exact.
const WARM_FLOOR_FRAC: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Stop the multiplicative updates when the relative NLL change per
    /// iteration falls below this.
    pub nll_rel_tol: f64,
    /// Cap on multiplicative updates per activity fit.
    pub max_iterations: usize,
    /// Stop block-coordinate descent when one outer round improves the NLL by
    /// less than this (absolute).
    pub outer_abs_tol: f64,
    /// Cap on outer rounds of block-coordinate descent.
    pub max_outer_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            nll_rel_tol: 1e-8,
            max_iterations: 10_000,
            outer_abs_tol: 1e-6,
            max_outer_iterations: 50,
        }
    }
}

/// Strictly positive starting point for a refit.
#[derive(Debug, Clone)]
pub struct WarmStart {
    /// Full-length activity vector (one entry per library signature); entries
    /// outside the active set are ignored.
    pub a: Vec<f64>,
    /// Starting scalar parameter for parametric sources.
    pub param: Option<f64>,
}

/// One fitting task: observed counts, a signature source, and the active
/// subset of columns to estimate.
#[derive(Debug, Clone)]
pub struct FitProblem<'a> {
    pub y: &'a [f64],
    pub source: &'a SignatureSource,
    /// Strictly increasing column indices into the library.
    pub active: Vec<usize>,
    pub options: FitOptions,
    pub warm: Option<WarmStart>,
}

impl<'a> FitProblem<'a> {
    pub fn new(y: &'a [f64], source: &'a SignatureSource, active: Vec<usize>) -> Result<Self> {
        let m = source.grid().n_channels;
        if y.len() != m {
            return Err(Error::Dimension {
                context: "observed spectrum".into(),
                expected: m,
                got: y.len(),
            });
        }
        for (i, &v) in y.iter().enumerate() {
            if !v.is_finite() || v < 0.0 || v.fract() != 0.0 {
                return Err(Error::invalid(
                    "observed spectrum",
                    format!("channel {i}: {v} is not a non-negative count"),
                ));
            }
        }
        if active.is_empty() {
            return Err(Error::invalid("active set", "must not be empty"));
        }
        let n = source.n_signatures();
        for w in active.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::invalid(
                    "active set",
                    "indices must be strictly increasing",
                ));
            }
        }
        if *active.last().unwrap() >= n {
            return Err(Error::Dimension {
                context: "active set".into(),
                expected: n,
                got: *active.last().unwrap(),
            });
        }
        Ok(FitProblem {
            y,
            source,
            active,
            options: FitOptions::default(),
            warm: None,
        })
    }

    pub fn with_options(mut self, options: FitOptions) -> Self {
        self.options = options;
        self
    }

    pub fn with_warm(mut self, warm: WarmStart) -> Self {
        self.warm = Some(warm);
        self
    }
}

/// Result of an activity (and optional parameter) fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Active column indices, as given in the problem.
    pub active: Vec<usize>,
    /// Estimated counts per active column (aligned with `active`).
    pub a_hat: Vec<f64>,
    /// Estimated scalar parameter for parametric sources.
    pub param_hat: Option<f64>,
    pub nll: f64,
    /// Multiplicative updates performed (summed over refits).
    pub iterations: usize,
    /// Outer rounds of block-coordinate descent (0 for plain activity fits).
    pub outer_iterations: usize,
    pub converged: bool,
    /// NLL after the start point and after every multiplicative update,
    /// concatenated across refits; non-increasing up to round-off.
    pub nll_trace: Vec<f64>,
    /// NLL after the initial activity fit and after every outer round of
    /// block-coordinate descent; empty for plain activity fits. Non-increasing
    /// up to round-off.
    pub outer_nll_trace: Vec<f64>,
}

impl FitResult {
    /// Expand `a_hat` to a full-length vector with zeros off the active set.
    pub fn counts_full(&self, n_signatures: usize) -> Vec<f64> {
        let mut full = vec![0.0; n_signatures];
        for (&j, &a) in self.active.iter().zip(&self.a_hat) {
            full[j] = a;
        }
        full
    }
}

/// Poisson negative log-likelihood of counts `y` under expectation `X a`
/// (column-normalised `X` is not required here). Returns `+inf` when a
/// positive count has zero expectation.
pub fn poisson_nll(y: &[f64], x: ArrayView2<'_, f64>, a: &[f64]) -> Result<f64> {
    let (m, n) = x.dim();
    if y.len() != m {
        return Err(Error::Dimension {
            context: "poisson_nll observations".into(),
            expected: m,
            got: y.len(),
        });
    }
    if a.len() != n {
        return Err(Error::Dimension {
            context: "poisson_nll activities".into(),
            expected: n,
            got: a.len(),
        });
    }
    if a.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::invalid(
            "activities",
            "must be finite and non-negative",
        ));
    }
    if y.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::invalid(
            "observations",
            "must be finite and non-negative",
        ));
    }
    let mut nll = 0.0;
    for row in 0..m {
        let mut mu = 0.0;
        for (j, &aj) in a.iter().enumerate() {
            mu += x[(row, j)] * aj;
        }
        nll += mu;
        let ym = y[row];
        if ym > 0.0 {
            if mu <= 0.0 {
                return Ok(f64::INFINITY);
            }
            nll -= ym * mu.ln();
        }
    }
    Ok(nll)
}

/// Support-restricted evaluation state for one (library, active set) pair.
struct Engine {
    /// Channels with y > 0.
    supp_y: Vec<f64>,
    /// Active columns restricted to the support, contiguous per column.
    cols: Vec<Vec<f64>>,
    /// Full column sums (the linear NLL term).
    col_sums: Vec<f64>,
    sum_y: f64,
}

impl Engine {
    fn new(y: &[f64], lib: &SignatureLibrary, active: &[usize]) -> Engine {
        let supp: Vec<usize> = (0..y.len()).filter(|&i| y[i] > 0.0).collect();
        let supp_y: Vec<f64> = supp.iter().map(|&i| y[i]).collect();
        let mut cols = Vec::with_capacity(active.len());
        let mut col_sums = Vec::with_capacity(active.len());
        for &j in active {
            let col = lib.column(j);
            cols.push(supp.iter().map(|&i| col[i]).collect());
            col_sums.push(col.sum());
        }
        Engine {
            supp_y,
            cols,
            col_sums,
            sum_y: y.iter().sum(),
        }
    }

    fn compute_mu(&self, a: &[f64], mu: &mut [f64]) {
        mu.fill(0.0);
        for (col, &aj) in self.cols.iter().zip(a) {
            if aj == 0.0 {
                continue;
            }
            for (m, &x) in mu.iter_mut().zip(col) {
                *m += aj * x;
            }
        }
    }

    /// Full-grid NLL from the support values: channels with y = 0 only
    /// contribute their expectation, which sums to `a . col_sums`.
    fn nll(&self, a: &[f64], mu: &[f64]) -> f64 {
        let mut nll = 0.0;
        for (&aj, &cs) in a.iter().zip(&self.col_sums) {
            nll += aj * cs;
        }
        for (&ym, &m) in self.supp_y.iter().zip(mu) {
            if m <= 0.0 {
                return f64::INFINITY;
            }
            nll -= ym * m.ln();
        }
        nll
    }

    /// One multiplicative update of every activity in place.
    fn update(&self, a: &mut [f64], mu: &[f64], ratio: &mut [f64]) {
        for (r, (&ym, &m)) in ratio.iter_mut().zip(self.supp_y.iter().zip(mu)) {
            *r = ym / m.max(DIVISION_FLOOR);
        }
        for ((aj, col), &cs) in a.iter_mut().zip(&self.cols).zip(&self.col_sums) {
            let mut num = 0.0;
            for (&x, &r) in col.iter().zip(ratio.iter()) {
                num += x * r;
            }
            *aj *= num / cs;
        }
    }
}

/// Multiplicative-update fit against a concrete library.
fn nnpu_library(
    y: &[f64],
    lib: &SignatureLibrary,
    active: &[usize],
    warm_a: Option<&[f64]>,
    options: &FitOptions,
) -> FitResult {
    let engine = Engine::new(y, lib, active);
    let k = active.len();

    if engine.sum_y == 0.0 {
        // No observed counts: L(a) = sum_j a_j, minimised at a = 0.
        return FitResult {
            active: active.to_vec(),
            a_hat: vec![0.0; k],
            param_hat: None,
            nll: 0.0,
            iterations: 0,
            outer_iterations: 0,
            converged: true,
            nll_trace: vec![0.0],
            outer_nll_trace: Vec::new(),
        };
    }

    let floor = WARM_FLOOR_FRAC * engine.sum_y.max(1.0);
    let mut a: Vec<f64> = match warm_a {
        Some(full) => active
            .iter()
            .map(|&j| if full[j] > 0.0 { full[j] } else { floor })
            .collect(),
        None => vec![engine.sum_y / k as f64; k],
    };

    let s = engine.supp_y.len();
    let mut mu = vec![0.0; s];
    let mut ratio = vec![0.0; s];
    engine.compute_mu(&a, &mut mu);
    let mut nll_prev = engine.nll(&a, &mu);
    let mut trace = Vec::with_capacity(64);
    trace.push(nll_prev);

    let mut iterations = 0;
    let mut converged = false;
    while iterations < options.max_iterations {
        engine.update(&mut a, &mu, &mut ratio);
        engine.compute_mu(&a, &mut mu);
        let nll = engine.nll(&a, &mu);
        iterations += 1;
        trace.push(nll);
        if (nll_prev - nll).abs() <= options.nll_rel_tol * nll_prev.abs().max(1.0) {
            nll_prev = nll;
            converged = true;
            break;
        }
        nll_prev = nll;
    }

    FitResult {
        active: active.to_vec(),
        a_hat: a,
        param_hat: None,
        nll: nll_prev,
        iterations,
        outer_iterations: 0,
        converged,
        nll_trace: trace,
        outer_nll_trace: Vec::new(),
    }
}

/// NLL at fixed activities against columns packed contiguously (`cols[j*m..]`
/// is column `j`); the parameter-step objective inside block-coordinate
/// descent, which avoids realizing whole parametric libraries.
fn nll_fixed_columns(y: &[f64], cols: &[f64], m: usize, a: &[f64]) -> f64 {
    let mut nll = 0.0;
    for (j, &aj) in a.iter().enumerate() {
        let col_sum: f64 = cols[j * m..(j + 1) * m].iter().sum();
        nll += aj * col_sum;
    }
    for (i, &ym) in y.iter().enumerate() {
        if ym > 0.0 {
            let mut mu = 0.0;
            for (j, &aj) in a.iter().enumerate() {
                mu += cols[j * m + i] * aj;
            }
            if mu <= 0.0 {
                return f64::INFINITY;
            }
            nll -= ym * mu.ln();
        }
    }
    nll
}

/// NLL at fixed activities against a concrete library (support-restricted).
fn nll_fixed_activities(y: &[f64], lib: &SignatureLibrary, active: &[usize], a: &[f64]) -> f64 {
    let mut nll = 0.0;
    for (&j, &aj) in active.iter().zip(a) {
        nll += aj * lib.column(j).sum();
    }
    for (i, &ym) in y.iter().enumerate() {
        if ym > 0.0 {
            let mut mu = 0.0;
            for (&j, &aj) in active.iter().zip(a) {
                mu += lib.matrix()[(i, j)] * aj;
            }
            if mu <= 0.0 {
                return f64::INFINITY;
            }
            nll -= ym * mu.ln();
        }
    }
    nll
}

/// Fit activities for a fixed (non-parametric) library.
pub fn nnpu_fit(problem: &FitProblem<'_>) -> Result<FitResult> {
    let lib = match problem.source {
        SignatureSource::Fixed(lib) => lib,
        _ => {
            return Err(Error::invalid(
                "fit",
                "activity-only fit requires a fixed library; use bcd_fit",
            ))
        }
    };
    let warm_a = problem.warm.as_ref().map(|w| w.a.as_slice());
    if let Some(w) = warm_a {
        if w.len() != problem.source.n_signatures() {
            return Err(Error::Dimension {
                context: "warm start".into(),
                expected: problem.source.n_signatures(),
                got: w.len(),
            });
        }
    }
    Ok(nnpu_library(
        problem.y,
        lib,
        &problem.active,
        warm_a,
        &problem.options,
    ))
}

/// Bounded one-dimensional Nelder-Mead (reflection 1, expansion 2,
/// contraction 0.5, shrink 0.5). Trial points are projected onto the bounds.
/// Terminates when the simplex width falls below `1e-5 * (hi - lo)` or after
/// 200 iterations, and returns the best point ever evaluated (the start is
/// part of the initial simplex, so the result never exceeds `f(x0)`).
pub fn nelder_mead<F: FnMut(f64) -> f64>(
    mut f: F,
    x0: f64,
    bounds: (f64, f64),
) -> Result<(f64, f64)> {
    let (lo, hi) = bounds;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::invalid("bounds", format!("({lo}, {hi})")));
    }
    if !x0.is_finite() {
        return Err(Error::invalid("start point", format!("{x0}")));
    }
    let range = hi - lo;
    let clamp = |x: f64| x.clamp(lo, hi);
    let mut best = (f64::NAN, f64::INFINITY);
    let eval = |x: f64, f: &mut F, best: &mut (f64, f64)| -> f64 {
        let v = f(x);
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if v < best.1 || best.0.is_nan() {
            *best = (x, v);
        }
        v
    };

    let x0 = clamp(x0);
    let mut x1 = clamp(x0 + 0.25 * range);
    if x1 == x0 {
        x1 = clamp(x0 - 0.25 * range);
    }
    let mut simplex = [
        (x0, eval(x0, &mut f, &mut best)),
        (x1, eval(x1, &mut f, &mut best)),
    ];

    for _ in 0..200 {
        if simplex[0].1 > simplex[1].1 {
            simplex.swap(0, 1);
        }
        let (xb, fb) = simplex[0];
        let (xw, fw) = simplex[1];
        if (xw - xb).abs() < 1e-5 * range {
            break;
        }
        let xr = clamp(xb + (xb - xw));
        let fr = eval(xr, &mut f, &mut best);
        if fr < fb {
            let xe = clamp(xb + 2.0 * (xb - xw));
            let fe = eval(xe, &mut f, &mut best);
            simplex[1] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < fw {
            simplex[1] = (xr, fr);
        } else {
            // In one dimension the inside contraction and the shrink coincide;
            // either way the worst vertex moves halfway towards the best.
            let xc = xb + 0.5 * (xw - xb);
            let fc = eval(xc, &mut f, &mut best);
            simplex[1] = (xc, fc);
        }
    }
    Ok(best)
}

/// Block-coordinate descent for parametric sources: alternate a warm-started
/// activity fit with a Nelder-Mead step over the scalar parameter. For a
/// fixed library this degenerates to a single activity fit.
pub fn bcd_fit(problem: &FitProblem<'_>) -> Result<FitResult> {
    let (plo, phi) = match problem.source.param_bounds() {
        Some(b) => b,
        None => return nnpu_fit(problem),
    };
    if let Some(w) = &problem.warm {
        if w.a.len() != problem.source.n_signatures() {
            return Err(Error::Dimension {
                context: "warm start".into(),
                expected: problem.source.n_signatures(),
                got: w.a.len(),
            });
        }
    }
    let mut param = problem
        .warm
        .as_ref()
        .and_then(|w| w.param)
        .unwrap_or_else(|| match problem.source {
            SignatureSource::Shift(_) => 0.0f64.clamp(plo, phi),
            _ => 0.5 * (plo + phi),
        });
    param = param.clamp(plo, phi);

    let opts = &problem.options;
    let warm_a = problem.warm.as_ref().map(|w| w.a.clone());

    let lib = problem.source.realize(Some(param))?;
    let mut fit = nnpu_library(problem.y, &lib, &problem.active, warm_a.as_deref(), opts);
    drop(lib);
    let mut trace = std::mem::take(&mut fit.nll_trace);
    let mut outer_trace = vec![fit.nll];
    let mut total_inner = fit.iterations;
    let mut outer_iterations = 0;
    let mut converged = false;

    // Scratch for the parameter step: active columns realized at candidate
    // parameters, packed column-major. Realizing only the active columns keeps
    // each Nelder-Mead evaluation cheap.
    let m = problem.source.grid().n_channels;
    let k = problem.active.len();
    let mut col_buf = vec![0.0; k * m];

    for _ in 0..opts.max_outer_iterations {
        outer_iterations += 1;
        let current_nll = fit.nll;

        let a_now = fit.a_hat.clone();
        let objective = |p: f64| {
            for (slot, &j) in problem.active.iter().enumerate() {
                let out = &mut col_buf[slot * m..(slot + 1) * m];
                if problem.source.realize_column_into(j, Some(p), out).is_err() {
                    return f64::INFINITY;
                }
            }
            nll_fixed_columns(problem.y, &col_buf, m, &a_now)
        };
        let (p_cand, f_cand) = nelder_mead(objective, param, (plo, phi))?;
        // Accept the candidate only if the full library confirms the
        // improvement, so descent is monotone in the numbers the a-step sees.
        let mut lib_at_param = None;
        if f_cand < current_nll {
            let lib = problem.source.realize(Some(p_cand))?;
            if nll_fixed_activities(problem.y, &lib, &problem.active, &a_now) < current_nll {
                param = p_cand;
                lib_at_param = Some(lib);
            }
        }

        let lib = match lib_at_param {
            Some(lib) => lib,
            None => problem.source.realize(Some(param))?,
        };
        let full_a = fit.counts_full(problem.source.n_signatures());
        let mut refit = nnpu_library(problem.y, &lib, &problem.active, Some(&full_a), opts);
        total_inner += refit.iterations;
        trace.append(&mut refit.nll_trace);
        outer_trace.push(refit.nll);
        let improvement = current_nll - refit.nll;
        let inner_converged = refit.converged;
        fit = refit;
        if improvement < opts.outer_abs_tol {
            converged = inner_converged;
            break;
        }
    }

    Ok(FitResult {
        active: problem.active.clone(),
        a_hat: fit.a_hat,
        param_hat: Some(param),
        nll: fit.nll,
        iterations: total_inner,
        outer_iterations,
        converged,
        nll_trace: trace,
        outer_nll_trace: outer_trace,
    })
}

/// Dispatch on the source: plain activity fit for fixed libraries,
/// block-coordinate descent otherwise.
pub fn fit(problem: &FitProblem<'_>) -> Result<FitResult> {
    match problem.source {
        SignatureSource::Fixed(_) => nnpu_fit(problem),
        _ => bcd_fit(problem),
    }
}
