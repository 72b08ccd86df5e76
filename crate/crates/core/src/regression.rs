//! Weighted least squares and logistic regression on stacked at-risk data.

use crate::data::{StudyConfig, SubjectRecord};
use crate::error::{Error, Result};
use crate::linalg;

/// Row-major design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    ncols: usize,
    data: Vec<f64>,
    pub names: Vec<String>,
}

impl Design {
    pub fn new(ncols: usize, names: Vec<String>) -> Self {
        Self {
            ncols,
            data: Vec::new(),
            names,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let ncols = rows.first().map_or(0, Vec::len);
        let mut d = Self::new(ncols, (0..ncols).map(|k| format!("x{k}")).collect());
        for r in rows {
            d.push_row(r);
        }
        d
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.ncols);
        self.data.extend_from_slice(row);
    }

    pub fn nrows(&self) -> usize {
        self.data.len().checked_div(self.ncols).unwrap_or(0)
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.ncols.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub coefficients: Vec<f64>,
    pub feature_names: Vec<String>,
    pub residual_variance: f64,
    /// Design was rank deficient; coefficients are the minimum-norm solution.
    pub rank_deficient: bool,
}

impl LinearFit {
    /// The identically-zero model.
    pub fn zero(feature_names: Vec<String>) -> Self {
        Self {
            coefficients: vec![0.0; feature_names.len()],
            feature_names,
            residual_variance: f64::NAN,
            rank_deficient: false,
        }
    }

    #[inline]
    pub fn predict(&self, x: &[f64]) -> f64 {
        linalg::dot(&self.coefficients, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub feature_names: Vec<String>,
    pub converged: bool,
    pub separated: bool,
    pub iterations: usize,
}

impl LogisticFit {
    #[inline]
    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(linalg::dot(&self.coefficients, x))
    }
}

#[inline]
pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Weighted least squares through the normal equations. Falls back to the
/// minimum-norm solution when `XᵀWX` is singular.
pub fn fit_ols(x: &Design, y: &[f64], weights: Option<&[f64]>) -> Result<LinearFit> {
    let p = x.ncols();
    assert_eq!(x.nrows(), y.len());
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    let mut total_w = 0.0;
    for (i, row) in x.rows().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        total_w += w;
        linalg::add_outer_upper(&mut xtx, row, w);
        let wy = w * y[i];
        for (acc, v) in xty.iter_mut().zip(row) {
            *acc += wy * v;
        }
    }
    if total_w == 0.0 {
        return Err(Error::EmptyDesign("least squares".into()));
    }
    linalg::symmetrize_from_upper(&mut xtx, p);
    let (coefficients, rank) = match linalg::cholesky(&xtx, p, 1e-11) {
        Some(l) => (linalg::cholesky_solve(&l, p, &xty), p),
        None => linalg::pinv_solve_symmetric(&xtx, p, &xty),
    };
    let mut rss = 0.0;
    for (i, row) in x.rows().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w != 0.0 {
            let r = y[i] - linalg::dot(&coefficients, row);
            rss += w * r * r;
        }
    }
    let dof = (total_w - rank as f64).max(1.0);
    Ok(LinearFit {
        coefficients,
        feature_names: x.names.clone(),
        residual_variance: rss / dof,
        rank_deficient: rank < p,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub separation_bound: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-8,
            separation_bound: 30.0,
        }
    }
}

fn logistic_pass(
    x: &Design,
    y: &[f64],
    weights: Option<&[f64]>,
    beta: &[f64],
    hessian: Option<&mut [f64]>,
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut ll = 0.0;
    let mut hess = hessian;
    if let Some(h) = hess.as_deref_mut() {
        h.iter_mut().for_each(|v| *v = 0.0);
    }
    for (i, row) in x.rows().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let eta = linalg::dot(beta, row);
        let mu = sigmoid(eta);
        // log(1 + e^eta) computed stably
        let softplus = if eta > 0.0 {
            eta + (-eta).exp().ln_1p()
        } else {
            eta.exp().ln_1p()
        };
        ll += w * (y[i] * eta - softplus);
        let r = w * (y[i] - mu);
        for (g, v) in grad.iter_mut().zip(row) {
            *g += r * v;
        }
        if let Some(h) = hess.as_deref_mut() {
            linalg::add_outer_upper(h, row, w * mu * (1.0 - mu));
        }
    }
    ll
}

/// Newton–Raphson with step halving on a concave log-likelihood. `pass`
/// fills the Hessian (upper triangle of the negated second derivative) and
/// gradient at `beta` and returns the log-likelihood.
fn newton_logistic<F>(
    p: usize,
    nrows: usize,
    start: Option<&[f64]>,
    names: Vec<String>,
    options: &LogisticOptions,
    pass: F,
) -> LogisticFit
where
    F: Fn(&[f64], &mut [f64], &mut [f64]) -> f64,
{
    let mut beta = start.map_or_else(|| vec![0.0; p], <[f64]>::to_vec);
    let mut grad = vec![0.0; p];
    let mut hess = vec![0.0; p * p];
    let mut ll = pass(&beta, &mut hess, &mut grad);
    let max_norm = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let mut iterations = 0;
    let mut converged = false;
    let mut separated = false;
    let mut trial_grad = vec![0.0; p];
    let mut trial_hess = vec![0.0; p * p];
    loop {
        if max_norm(&grad) <= options.tol {
            converged = true;
            break;
        }
        if max_norm(&beta) > options.separation_bound {
            separated = true;
            break;
        }
        if iterations >= options.max_iter {
            break;
        }
        iterations += 1;
        linalg::symmetrize_from_upper(&mut hess, p);
        let step = match linalg::cholesky(&hess, p, 1e-13) {
            Some(l) => linalg::cholesky_solve(&l, p, &grad),
            None => linalg::pinv_solve_symmetric(&hess, p, &grad).0,
        };
        let mut scale = 1.0;
        loop {
            let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let trial_ll = pass(&trial, &mut trial_hess, &mut trial_grad);
            if trial_ll >= ll - 1e-12 * ll.abs() {
                beta = trial;
                ll = trial_ll;
                std::mem::swap(&mut grad, &mut trial_grad);
                std::mem::swap(&mut hess, &mut trial_hess);
                break;
            }
            scale *= 0.5;
            if scale < 1e-10 {
                separated = true;
                break;
            }
        }
        if separated {
            break;
        }
        if max_norm(&step) * scale < 1e-13 {
            // Newton has stalled at machine precision.
            converged = max_norm(&grad) <= options.tol.max(1e-10 * nrows as f64);
            break;
        }
    }
    LogisticFit {
        coefficients: beta,
        feature_names: names,
        converged,
        separated,
        iterations,
    }
}

/// Maximum likelihood logistic regression by Newton–Raphson (IRLS).
pub fn fit_logistic(
    x: &Design,
    y: &[f64],
    weights: Option<&[f64]>,
    options: &LogisticOptions,
) -> Result<LogisticFit> {
    let p = x.ncols();
    assert_eq!(x.nrows(), y.len());
    let (mut has0, mut has1) = (false, false);
    for (i, &v) in y.iter().enumerate() {
        if weights.map_or(1.0, |w| w[i]) > 0.0 {
            has0 |= v == 0.0;
            has1 |= v == 1.0;
        }
    }
    if !(has0 && has1) {
        return Err(Error::SingleClass);
    }
    Ok(newton_logistic(
        p,
        x.nrows(),
        None,
        x.names.clone(),
        options,
        |beta, hess, grad| logistic_pass(x, y, weights, beta, Some(hess), grad),
    ))
}

/// Which subjects contribute a row at grid time `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Restriction {
    /// Still untreated and under observation: `T ≥ u`.
    AtRisk,
    /// Initiated treatment at or after `u`, before the end of study: `u ≤ T ≤ τ`.
    TreatedAfter,
}

impl Restriction {
    fn label(self) -> &'static str {
        match self {
            Restriction::AtRisk => "T >= u",
            Restriction::TreatedAfter => "u <= T <= tau",
        }
    }
}

/// Position of one stacked row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackedIndex {
    pub subject: usize,
    pub grid: usize,
    /// Governing visit of the subject at the grid time.
    pub visit: usize,
}

/// Consecutive grid times `grid[start..end]` of one subject sharing a
/// governing visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub subject: usize,
    pub visit: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Stacked rows whose features are affine in the grid time within each
/// segment, `x(u) = x₀ + u·x₁`. Both feature expansions have this form, which
/// lets the fits accumulate per-segment moments instead of per-row outer
/// products.
#[derive(Debug, Clone, PartialEq)]
pub struct AtRiskDesign {
    pub names: Vec<String>,
    pub grid: Vec<f64>,
    pub segments: Vec<Segment>,
    width: usize,
    x0: Vec<f64>,
    x1: Vec<f64>,
    /// `Σ u^k` over each segment's grid times, `k = 0, 1, 2`.
    moments: Vec<[f64; 3]>,
    nrows: usize,
}

impl AtRiskDesign {
    pub fn new(names: Vec<String>, grid: Vec<f64>) -> Self {
        Self {
            width: names.len(),
            names,
            grid,
            segments: Vec::new(),
            x0: Vec::new(),
            x1: Vec::new(),
            moments: Vec::new(),
            nrows: 0,
        }
    }

    /// Appends a segment; `row_at` writes the expanded features at a given
    /// grid time and must be affine in it.
    pub fn push_segment(&mut self, segment: Segment, row_at: impl Fn(f64, &mut Vec<f64>)) {
        debug_assert!(segment.end > segment.start && segment.end <= self.grid.len());
        let mut a = Vec::with_capacity(self.width);
        let mut b = Vec::with_capacity(self.width);
        row_at(0.0, &mut a);
        row_at(1.0, &mut b);
        assert_eq!(a.len(), self.width);
        self.x0.extend_from_slice(&a);
        self.x1.extend(b.iter().zip(&a).map(|(b, a)| b - a));
        let mut m = [0.0; 3];
        for &u in &self.grid[segment.start..segment.end] {
            m[0] += 1.0;
            m[1] += u;
            m[2] += u * u;
        }
        self.moments.push(m);
        self.nrows += segment.len();
        self.segments.push(segment);
    }

    pub fn ncols(&self) -> usize {
        self.width
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn segment_coefficients(&self, s: usize) -> (&[f64], &[f64]) {
        let r = s * self.width..(s + 1) * self.width;
        (&self.x0[r.clone()], &self.x1[r])
    }

    /// `(βᵀx₀, βᵀx₁)` so that the linear predictor at `u` is `a + u·b`.
    pub fn segment_predictor(&self, s: usize, beta: &[f64]) -> (f64, f64) {
        let (x0, x1) = self.segment_coefficients(s);
        (linalg::dot(beta, x0), linalg::dot(beta, x1))
    }

    pub fn write_row(&self, s: usize, u: f64, out: &mut Vec<f64>) {
        let (x0, x1) = self.segment_coefficients(s);
        out.clear();
        out.extend(x0.iter().zip(x1).map(|(a, b)| a + u * b));
    }

    /// Rows in stacking order with their index map.
    pub fn materialize(&self) -> (Design, Vec<StackedIndex>) {
        let mut x = Design::new(self.width, self.names.clone());
        let mut index = Vec::with_capacity(self.nrows);
        let mut buf = Vec::with_capacity(self.width);
        for (s, seg) in self.segments.iter().enumerate() {
            for k in seg.start..seg.end {
                self.write_row(s, self.grid[k], &mut buf);
                x.push_row(&buf);
                index.push(StackedIndex {
                    subject: seg.subject,
                    grid: k,
                    visit: seg.visit,
                });
            }
        }
        (x, index)
    }
}

/// Stacks one row per (subject, grid time) pair satisfying `restriction`,
/// skipping subjects whose weight is zero. Rows come out grouped by subject
/// in input order, grid times ascending within a subject. A subject's row at
/// `u` uses its governing (last strictly earlier) visit.
pub fn build_at_risk_design(
    subjects: &[SubjectRecord],
    weights: Option<&[f64]>,
    grid: &[f64],
    study: &StudyConfig,
    restriction: Restriction,
) -> Result<AtRiskDesign> {
    if grid.is_empty() {
        return Err(Error::EmptyDesign(format!(
            "{} (empty grid)",
            restriction.label()
        )));
    }
    debug_assert!(grid.windows(2).all(|w| w[0] < w[1]));
    let recipe = &study.nuisance;
    let base_names = recipe.names(&study.ti_names, &study.td_names);
    let mut design = AtRiskDesign::new(study.expansion.names(&base_names), grid.to_vec());
    let mut base = Vec::with_capacity(recipe.len());
    for (i, s) in subjects.iter().enumerate() {
        if weights.is_some_and(|w| w[i] == 0.0) {
            continue;
        }
        let include = match restriction {
            Restriction::AtRisk => true,
            Restriction::TreatedAfter => s.treated && s.treatment_time <= study.tau,
        };
        if !include {
            continue;
        }
        let entry = s.trajectory.visit_times()[0];
        let end = s.risk_end(crate::data::Process::Treatment).min(study.tau);
        let first = grid.partition_point(|&u| u < entry);
        let last = grid.partition_point(|&u| u <= end);
        let mut k = first;
        while k < last {
            let j = s.trajectory.governing_visit(grid[k]);
            let mut stop = k + 1;
            while stop < last && s.trajectory.governing_visit(grid[stop]) == j {
                stop += 1;
            }
            recipe.write_features(s, j, &mut base);
            design.push_segment(
                Segment {
                    subject: i,
                    visit: j,
                    start: k,
                    end: stop,
                },
                |u, out| study.expansion.write_row(u, &base, out),
            );
            k = stop;
        }
    }
    if design.segments.is_empty() {
        return Err(Error::EmptyDesign(restriction.label().into()));
    }
    Ok(design)
}

/// Weighted least squares on a segmented design where the response and the
/// weight are constant within each segment (`y[s]`, `w[s]`). Agrees with
/// [`fit_ols`] on the materialized rows.
pub fn fit_ols_segments(d: &AtRiskDesign, y: &[f64], w: &[f64]) -> Result<LinearFit> {
    let p = d.ncols();
    assert_eq!(y.len(), d.segments.len());
    assert_eq!(w.len(), d.segments.len());
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    let mut total_w = 0.0;
    for s in 0..d.segments.len() {
        if w[s] == 0.0 {
            continue;
        }
        let m = d.moments[s];
        total_w += w[s] * m[0];
        let (x0, x1) = d.segment_coefficients(s);
        add_affine_outer(&mut xtx, x0, x1, w[s] * m[0], w[s] * m[1], w[s] * m[2]);
        let (a, b) = (w[s] * y[s] * m[0], w[s] * y[s] * m[1]);
        for j in 0..p {
            xty[j] += a * x0[j] + b * x1[j];
        }
    }
    if total_w == 0.0 {
        return Err(Error::EmptyDesign("least squares".into()));
    }
    linalg::symmetrize_from_upper(&mut xtx, p);
    let (coefficients, rank) = match linalg::cholesky(&xtx, p, 1e-11) {
        Some(l) => (linalg::cholesky_solve(&l, p, &xty), p),
        None => linalg::pinv_solve_symmetric(&xtx, p, &xty),
    };
    let mut rss = 0.0;
    for s in 0..d.segments.len() {
        if w[s] == 0.0 {
            continue;
        }
        let (a, b) = d.segment_predictor(s, &coefficients);
        let e = y[s] - a;
        let m = d.moments[s];
        rss += w[s] * (e * e * m[0] - 2.0 * e * b * m[1] + b * b * m[2]);
    }
    let dof = (total_w - rank as f64).max(1.0);
    Ok(LinearFit {
        coefficients,
        feature_names: d.names.clone(),
        residual_variance: rss.max(0.0) / dof,
        rank_deficient: rank < p,
    })
}

/// `acc += h0·x0x0ᵀ + h1·(x0x1ᵀ + x1x0ᵀ) + h2·x1x1ᵀ` on the upper triangle.
fn add_affine_outer(acc: &mut [f64], x0: &[f64], x1: &[f64], h0: f64, h1: f64, h2: f64) {
    let p = x0.len();
    for i in 0..p {
        let (a, b) = (h0 * x0[i] + h1 * x1[i], h1 * x0[i] + h2 * x1[i]);
        let row = &mut acc[i * p..(i + 1) * p];
        for j in i..p {
            row[j] += a * x0[j] + b * x1[j];
        }
    }
}

fn logistic_pass_segments(
    d: &AtRiskDesign,
    y: &[f64],
    w: &[f64],
    beta: &[f64],
    hess: &mut [f64],
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    hess.iter_mut().for_each(|v| *v = 0.0);
    let mut ll = 0.0;
    for (s, seg) in d.segments.iter().enumerate() {
        if w[s] == 0.0 {
            continue;
        }
        let (a, b) = d.segment_predictor(s, beta);
        let (mut g0, mut g1, mut h0, mut h1, mut h2, mut l) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for &u in &d.grid[seg.start..seg.end] {
            let eta = a + u * b;
            let e = (-eta.abs()).exp();
            let mu = if eta >= 0.0 {
                1.0 / (1.0 + e)
            } else {
                e / (1.0 + e)
            };
            l += y[s] * eta - (eta.max(0.0) + e.ln_1p());
            let r = y[s] - mu;
            g0 += r;
            g1 += r * u;
            let v = mu * (1.0 - mu);
            h0 += v;
            h1 += v * u;
            h2 += v * u * u;
        }
        let (x0, x1) = d.segment_coefficients(s);
        for j in 0..x0.len() {
            grad[j] += w[s] * (g0 * x0[j] + g1 * x1[j]);
        }
        add_affine_outer(hess, x0, x1, w[s] * h0, w[s] * h1, w[s] * h2);
        ll += w[s] * l;
    }
    ll
}

/// Logistic regression on a segmented design with per-segment labels and
/// weights, optionally warm-started. Agrees with [`fit_logistic`] on the
/// materialized rows.
pub fn fit_logistic_segments(
    d: &AtRiskDesign,
    y: &[f64],
    w: &[f64],
    start: Option<&[f64]>,
    options: &LogisticOptions,
) -> Result<LogisticFit> {
    let p = d.ncols();
    assert_eq!(y.len(), d.segments.len());
    let (mut has0, mut has1) = (false, false);
    for (&v, &wt) in y.iter().zip(w) {
        if wt > 0.0 {
            has0 |= v == 0.0;
            has1 |= v == 1.0;
        }
    }
    if !(has0 && has1) {
        return Err(Error::SingleClass);
    }
    Ok(newton_logistic(
        p,
        d.nrows(),
        start,
        d.names.clone(),
        options,
        |beta, hess, grad| logistic_pass_segments(d, y, w, beta, hess, grad),
    ))
}
