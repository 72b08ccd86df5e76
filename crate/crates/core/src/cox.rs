//! Proportional hazards regression with time-varying covariates.
//!
//! Rows are `(start, stop]` intervals; ties use the Breslow convention. All
//! sums accept optional per-subject case weights, which is how bootstrap
//! resamples are represented without duplicating subjects.

use std::io::Write;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{FeatureRecipe, Process, RiskRow, SubjectRecord};
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoxOptions {
    pub max_iter: usize,
    /// Convergence threshold on the max-norm of the score.
    pub tol: f64,
    /// Coefficients beyond this magnitude with a non-vanishing score are
    /// reported as monotone likelihood.
    pub separation_bound: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-8,
            separation_bound: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoxFit {
    pub coefficients: Vec<f64>,
    pub names: Vec<String>,
    /// `(event time, baseline hazard mass)`, times strictly increasing.
    pub baseline: Vec<(f64, f64)>,
    pub log_partial_likelihood: f64,
    pub converged: bool,
    /// Monotone likelihood: some coefficient diverges.
    pub separated: bool,
    pub iterations: usize,
    pub score_max_norm: f64,
    /// Observed information (negative Hessian), row-major `p × p`.
    pub information: Vec<f64>,
}

/// Risk-set bookkeeping shared by the likelihood, score and Breslow sums.
struct RiskSets<'a> {
    rows: &'a [RiskRow],
    row_weight: Vec<f64>,
    p: usize,
    event_times: Vec<f64>,
    /// Weighted event count per event time.
    deaths: Vec<f64>,
    /// Weighted covariate sum of the events per event time.
    death_x: Vec<f64>,
    by_stop_desc: Vec<usize>,
    by_start_desc: Vec<usize>,
}

struct Evaluation {
    loglik: f64,
    score: Vec<f64>,
    information: Vec<f64>,
    s0: Vec<f64>,
}

impl<'a> RiskSets<'a> {
    fn new(rows: &'a [RiskRow], weights: Option<&[f64]>) -> Result<Self> {
        let p = rows.first().map_or(0, |r| r.covariates.len());
        if rows.iter().any(|r| r.covariates.len() != p) {
            return Err(Error::InvalidData(
                "risk rows differ in covariate dimension".into(),
            ));
        }
        let row_weight: Vec<f64> = rows
            .iter()
            .map(|r| weights.map_or(1.0, |w| w[r.subject]))
            .collect();

        let mut events: Vec<usize> = (0..rows.len())
            .filter(|&r| rows[r].event && row_weight[r] > 0.0)
            .collect();
        if events.is_empty() {
            return Err(Error::NoEvents);
        }
        events.sort_by(|&a, &b| rows[a].stop.total_cmp(&rows[b].stop));
        let mut event_times = Vec::new();
        let mut deaths = Vec::new();
        let mut death_x = Vec::new();
        for &r in &events {
            let t = rows[r].stop;
            if event_times.last() != Some(&t) {
                event_times.push(t);
                deaths.push(0.0);
                death_x.extend(std::iter::repeat_n(0.0, p));
            }
            let k = event_times.len() - 1;
            deaths[k] += row_weight[r];
            for j in 0..p {
                death_x[k * p + j] += row_weight[r] * rows[r].covariates[j];
            }
        }

        let mut by_stop_desc: Vec<usize> =
            (0..rows.len()).filter(|&r| row_weight[r] > 0.0).collect();
        let mut by_start_desc = by_stop_desc.clone();
        by_stop_desc.sort_by(|&a, &b| rows[b].stop.total_cmp(&rows[a].stop));
        by_start_desc.sort_by(|&a, &b| rows[b].start.total_cmp(&rows[a].start));
        Ok(Self {
            rows,
            row_weight,
            p,
            event_times,
            deaths,
            death_x,
            by_stop_desc,
            by_start_desc,
        })
    }

    /// Sweeps event times in decreasing order, maintaining the weighted
    /// sums over the risk set `{start < t <= stop}`.
    fn evaluate(&self, coef: &[f64], second_order: bool) -> Evaluation {
        let p = self.p;
        let risk: Vec<f64> = self
            .rows
            .iter()
            .zip(&self.row_weight)
            .map(|(r, w)| w * linalg::dot(coef, &r.covariates).exp())
            .collect();
        let n_events = self.event_times.len();
        let mut s0_out = vec![0.0; n_events];
        let mut s0 = 0.0;
        let mut s1 = vec![0.0; p];
        let mut s2 = vec![0.0; p * p];
        let mut loglik = 0.0;
        let mut score = vec![0.0; p];
        let mut info = vec![0.0; p * p];
        let (mut add, mut remove) = (0, 0);

        let update = |r: usize, sign: f64, s0: &mut f64, s1: &mut [f64], s2: &mut [f64]| {
            let w = sign * risk[r];
            let x = &self.rows[r].covariates;
            *s0 += w;
            for j in 0..p {
                s1[j] += w * x[j];
            }
            if second_order {
                linalg::add_outer_upper(s2, x, w);
            }
        };

        for k in (0..n_events).rev() {
            let t = self.event_times[k];
            while add < self.by_stop_desc.len() && self.rows[self.by_stop_desc[add]].stop >= t {
                update(self.by_stop_desc[add], 1.0, &mut s0, &mut s1, &mut s2);
                add += 1;
            }
            while remove < self.by_start_desc.len()
                && self.rows[self.by_start_desc[remove]].start >= t
            {
                update(self.by_start_desc[remove], -1.0, &mut s0, &mut s1, &mut s2);
                remove += 1;
            }
            debug_assert!(s0 > 0.0, "empty risk set at event time {t}");
            s0_out[k] = s0;
            let d = self.deaths[k];
            let dx = &self.death_x[k * p..(k + 1) * p];
            loglik += linalg::dot(coef, dx) - d * s0.ln();
            for j in 0..p {
                score[j] += dx[j] - d * s1[j] / s0;
            }
            if second_order {
                for i in 0..p {
                    for j in i..p {
                        info[i * p + j] += d * (s2[i * p + j] / s0 - s1[i] * s1[j] / (s0 * s0));
                    }
                }
            }
        }
        linalg::symmetrize_from_upper(&mut info, p);
        Evaluation {
            loglik,
            score,
            information: info,
            s0: s0_out,
        }
    }
}

pub fn log_partial_likelihood(
    rows: &[RiskRow],
    weights: Option<&[f64]>,
    coef: &[f64],
) -> Result<f64> {
    Ok(RiskSets::new(rows, weights)?.evaluate(coef, false).loglik)
}

pub fn partial_likelihood_score(
    rows: &[RiskRow],
    weights: Option<&[f64]>,
    coef: &[f64],
) -> Result<Vec<f64>> {
    Ok(RiskSets::new(rows, weights)?.evaluate(coef, false).score)
}

/// Maximizes the partial likelihood by Newton–Raphson with step halving,
/// starting from zero.
pub fn fit_cox(
    rows: &[RiskRow],
    weights: Option<&[f64]>,
    names: Vec<String>,
    options: &CoxOptions,
) -> Result<CoxFit> {
    let sets = RiskSets::new(rows, weights)?;
    let p = sets.p;
    let mut coef = vec![0.0; p];
    let mut eval = sets.evaluate(&coef, true);
    let mut iterations = 0;
    let mut converged = false;
    let mut separated = false;
    let max_norm = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));

    loop {
        if max_norm(&eval.score) <= options.tol {
            converged = true;
            break;
        }
        if max_norm(&coef) > options.separation_bound {
            separated = true;
            break;
        }
        if iterations >= options.max_iter {
            break;
        }
        iterations += 1;
        let Some(l) = linalg::cholesky(&eval.information, p, 1e-12) else {
            if iterations > 1 && max_norm(&coef) > options.separation_bound / 2.0 {
                separated = true;
                break;
            }
            return Err(Error::Singular("proportional hazards information".into()));
        };
        let step = linalg::cholesky_solve(&l, p, &eval.score);
        let mut scale = 1.0;
        loop {
            let trial: Vec<f64> = coef.iter().zip(&step).map(|(c, s)| c + scale * s).collect();
            let next = sets.evaluate(&trial, true);
            if next.loglik.is_finite() && next.loglik >= eval.loglik - 1e-12 * eval.loglik.abs() {
                coef = trial;
                eval = next;
                break;
            }
            scale *= 0.5;
            if scale < 1e-10 {
                return Err(Error::NotConverged("step halving exhausted".into()));
            }
        }
    }

    let baseline = sets
        .event_times
        .iter()
        .zip(&sets.deaths)
        .zip(&eval.s0)
        .map(|((&t, &d), &s0)| (t, d / s0))
        .collect();
    Ok(CoxFit {
        score_max_norm: max_norm(&eval.score),
        coefficients: coef,
        names,
        baseline,
        log_partial_likelihood: eval.loglik,
        converged,
        separated,
        iterations,
        information: eval.information,
    })
}

/// Breslow point masses `d(t) / Σ_{at risk} w exp(coefᵀW)` at each distinct event time.
pub fn breslow_baseline(
    coefficients: &[f64],
    rows: &[RiskRow],
    weights: Option<&[f64]>,
) -> Result<Vec<(f64, f64)>> {
    if coefficients.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidData("non-finite coefficients".into()));
    }
    let sets = RiskSets::new(rows, weights)?;
    let eval = sets.evaluate(coefficients, false);
    Ok(sets
        .event_times
        .iter()
        .zip(&sets.deaths)
        .zip(&eval.s0)
        .map(|((&t, &d), &s0)| (t, d / s0))
        .collect())
}

impl CoxFit {
    pub fn relative_risk(&self, x: &[f64]) -> f64 {
        linalg::dot(&self.coefficients, x).exp()
    }

    /// `exp(coefᵀW(u))` for each baseline time `u`, with `W` from the
    /// subject's governing visit.
    fn risks_along<'s>(
        &'s self,
        subject: &'s SubjectRecord,
        recipe: &'s FeatureRecipe,
    ) -> impl Iterator<Item = (f64, f64, f64)> + 's {
        let mut buf = Vec::with_capacity(recipe.len());
        let mut cached: Option<(usize, f64)> = None;
        self.baseline.iter().map(move |&(u, mass)| {
            let j = subject.trajectory.governing_visit(u);
            let rr = match cached {
                Some((cj, rr)) if cj == j => rr,
                _ => {
                    recipe.write_features(subject, j, &mut buf);
                    let rr = self.relative_risk(&buf);
                    cached = Some((j, rr));
                    rr
                }
            };
            (u, mass, rr)
        })
    }

    /// Standard errors from the inverse observed information.
    pub fn standard_errors(&self) -> Vec<f64> {
        let p = self.coefficients.len();
        match linalg::cholesky(&self.information, p, 1e-14) {
            Some(l) => {
                let inv = linalg::cholesky_inverse(&l, p);
                (0..p).map(|i| inv[i * p + i].sqrt()).collect()
            }
            None => vec![f64::NAN; p],
        }
    }

    pub fn coefficient_table(&self) -> Vec<CoefficientRow> {
        let normal = Normal::standard();
        self.coefficients
            .iter()
            .zip(self.standard_errors())
            .enumerate()
            .map(|(k, (&est, se))| {
                let z = est / se;
                CoefficientRow {
                    name: self
                        .names
                        .get(k)
                        .cloned()
                        .unwrap_or_else(|| format!("x{k}")),
                    estimate: est,
                    se,
                    p_value: 2.0 * (1.0 - normal.cdf(z.abs())),
                }
            })
            .collect()
    }

    /// Coefficient table as CSV. SEs are model-based (inverse information).
    pub fn write_coefficient_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "term",
            "estimate",
            "se_inverse_information",
            "p_value",
            "signif",
        ])?;
        for row in self.coefficient_table() {
            w.write_record([
                row.name.clone(),
                format!("{:.6}", row.estimate),
                format!("{:.6}", row.se),
                format!("{:.4}", row.p_value),
                significance_code(row.p_value).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub p_value: f64,
}

pub fn significance_code(p: f64) -> &'static str {
    match p {
        p if p < 0.001 => "***",
        p if p < 0.01 => "**",
        p if p < 0.05 => "*",
        p if p < 0.1 => ".",
        _ => "",
    }
}

pub fn cumulative_hazard(
    fit: &CoxFit,
    subject: &SubjectRecord,
    recipe: &FeatureRecipe,
    t: f64,
) -> f64 {
    fit.risks_along(subject, recipe)
        .take_while(|&(u, _, _)| u <= t)
        .map(|(_, mass, rr)| mass * rr)
        .sum()
}

/// Product-integral survival `Π_{u ≤ t} (1 − exp(coefᵀW(u)) mass(u))`, unclipped.
pub fn censoring_survival_raw(
    fit: &CoxFit,
    subject: &SubjectRecord,
    recipe: &FeatureRecipe,
    t: f64,
) -> Result<f64> {
    let mut k = 1.0;
    for (u, mass, rr) in fit.risks_along(subject, recipe) {
        if u > t {
            break;
        }
        let factor = 1.0 - rr * mass;
        if factor < 0.0 {
            return Err(Error::NegativeSurvivalFactor { time: u, factor });
        }
        k *= factor;
    }
    Ok(k)
}

/// Censoring survival clipped below at the positivity floor.
pub fn censoring_survival(
    fit: &CoxFit,
    subject: &SubjectRecord,
    recipe: &FeatureRecipe,
    t: f64,
    floor: f64,
) -> Result<f64> {
    Ok(censoring_survival_raw(fit, subject, recipe, t)?.max(floor))
}

/// `dM(u) = dN(u) − exp(coefᵀW(u)) mass(u)` at each pooled event time the
/// subject is at risk for.
pub fn martingale_increments(
    fit: &CoxFit,
    subject: &SubjectRecord,
    recipe: &FeatureRecipe,
    process: Process,
) -> Vec<(f64, f64)> {
    let end = subject.risk_end(process);
    let entry = subject.trajectory.visit_times()[0];
    let event = subject.has_event(process);
    fit.risks_along(subject, recipe)
        .take_while(|&(u, _, _)| u <= end)
        .filter(|&(u, _, _)| u > entry)
        .map(|(u, mass, rr)| {
            let dn = if event && u == end { 1.0 } else { 0.0 };
            (u, dn - rr * mass)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{to_risk_rows, StudyConfig, Trajectory};

    fn row(subject: usize, start: f64, stop: f64, x: &[f64], event: bool) -> RiskRow {
        RiskRow {
            subject,
            start,
            stop,
            covariates: x.to_vec(),
            event,
        }
    }

    #[test]
    fn separation_is_flagged() {
        let rows = vec![
            row(0, 0.0, 1.0, &[1.0], true),
            row(1, 0.0, 2.0, &[0.0], false),
        ];
        let fit = fit_cox(&rows, None, vec!["x".into()], &CoxOptions::default()).unwrap();
        assert!(fit.separated);
        assert!(!fit.converged);
        assert!(fit.coefficients[0] > 15.0);
    }

    fn four_subjects() -> Vec<RiskRow> {
        vec![
            row(0, 0.0, 1.0, &[1.0], true),
            row(1, 0.0, 2.0, &[0.0], true),
            row(2, 0.0, 3.0, &[1.0], true),
            row(3, 0.0, 4.0, &[0.0], false),
        ]
    }

    fn analytic_score(a: f64) -> f64 {
        let e = a.exp();
        2.0 / (e + 1.0) - e / (e + 2.0)
    }

    #[test]
    fn matches_bisection_on_analytic_score() {
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if analytic_score(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let root = 0.5 * (lo + hi);
        let fit = fit_cox(
            &four_subjects(),
            None,
            vec!["x".into()],
            &CoxOptions::default(),
        )
        .unwrap();
        assert!(fit.converged);
        assert!(
            (fit.coefficients[0] - root).abs() < 1e-8,
            "{} vs {root}",
            fit.coefficients[0]
        );
        assert!(fit.score_max_norm <= 1e-8);
        let e = root.exp();
        let expected = [1.0 / (2.0 * e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 1.0)];
        for ((t, m), (k, want)) in fit.baseline.iter().zip(expected.iter().enumerate()) {
            assert_eq!(*t, (k + 1) as f64);
            assert!((m - want).abs() < 1e-9);
        }
    }

    #[test]
    fn nelson_aalen_reduction() {
        let rows: Vec<RiskRow> = (0..4)
            .map(|i| row(i, 0.0, if i == 0 { 1.0 } else { 2.0 }, &[i as f64], i == 0))
            .collect();
        let masses = breslow_baseline(&[0.0], &rows, None).unwrap();
        assert_eq!(masses, vec![(1.0, 0.25)]);
    }

    #[test]
    fn breslow_identity() {
        let rows = four_subjects();
        let coef = [0.37];
        let masses = breslow_baseline(&coef, &rows, None).unwrap();
        let total: f64 = masses
            .iter()
            .map(|&(t, m)| {
                let s: f64 = rows
                    .iter()
                    .filter(|r| r.start < t && t <= r.stop)
                    .map(|r| (coef[0] * r.covariates[0]).exp())
                    .sum();
                m * s
            })
            .sum();
        assert!((total - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_events_is_an_error() {
        let rows = vec![row(0, 0.0, 1.0, &[1.0], false)];
        assert!(matches!(
            fit_cox(&rows, None, vec![], &CoxOptions::default()),
            Err(Error::NoEvents)
        ));
    }

    #[test]
    fn collinear_design_is_singular() {
        let rows = vec![
            row(0, 0.0, 1.0, &[1.0, 2.0], true),
            row(1, 0.0, 2.0, &[2.0, 4.0], true),
            row(2, 0.0, 3.0, &[0.5, 1.0], false),
        ];
        assert!(matches!(
            fit_cox(&rows, None, vec![], &CoxOptions::default()),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn case_weights_equal_duplication() {
        let base = vec![
            row(0, 0.0, 1.0, &[0.3], true),
            row(1, 0.0, 1.5, &[-0.2], true),
            row(2, 0.0, 2.5, &[1.1], true),
            row(3, 0.5, 3.0, &[0.0], false),
            row(4, 0.0, 2.2, &[0.7], true),
        ];
        let weights = [2.0, 1.0, 3.0, 1.0, 1.0];
        let mut dup = Vec::new();
        let mut next = 0;
        for r in &base {
            for _ in 0..weights[r.subject] as usize {
                let mut c = r.clone();
                c.subject = next;
                next += 1;
                dup.push(c);
            }
        }
        let a = fit_cox(&base, Some(&weights), vec![], &CoxOptions::default()).unwrap();
        let b = fit_cox(&dup, None, vec![], &CoxOptions::default()).unwrap();
        assert!((a.coefficients[0] - b.coefficients[0]).abs() < 1e-10);
        for (x, y) in a.baseline.iter().zip(&b.baseline) {
            assert!((x.1 - y.1).abs() < 1e-12);
        }
    }

    fn subject(visits: &[f64], values: &[f64], t: f64) -> SubjectRecord {
        let traj = Trajectory::new(
            visits.to_vec(),
            values.iter().map(|&v| vec![v]).collect(),
            vec![],
        )
        .unwrap();
        SubjectRecord::new("s", traj, t, f64::INFINITY, 2.0, Some(0.0)).unwrap()
    }

    #[test]
    fn cumulative_hazard_and_survival() {
        let fit = CoxFit {
            coefficients: vec![2f64.ln()],
            names: vec![],
            baseline: vec![(0.5, 0.1)],
            log_partial_likelihood: 0.0,
            converged: true,
            separated: false,
            iterations: 0,
            score_max_norm: 0.0,
            information: vec![1.0],
        };
        let s = subject(&[0.0], &[1.0], f64::INFINITY);
        let recipe = FeatureRecipe::all(0, 1);
        assert_eq!(cumulative_hazard(&fit, &s, &recipe, 0.0), 0.0);
        assert!((cumulative_hazard(&fit, &s, &recipe, 1.0) - 0.2).abs() < 1e-15);
        assert_eq!(
            censoring_survival(&fit, &s, &recipe, 0.0, 0.01).unwrap(),
            1.0
        );

        let mut one = fit.clone();
        one.coefficients = vec![0.0];
        one.baseline = vec![(0.5, 0.25)];
        assert_eq!(
            censoring_survival(&one, &s, &recipe, 1.0, 0.01).unwrap(),
            0.75
        );
        one.baseline = vec![(0.5, 1.5)];
        assert!(matches!(
            censoring_survival_raw(&one, &s, &recipe, 1.0),
            Err(Error::NegativeSurvivalFactor { .. })
        ));
        one.baseline = vec![(0.5, 0.995)];
        assert_eq!(
            censoring_survival(&one, &s, &recipe, 1.0, 0.01).unwrap(),
            0.01
        );
    }

    #[test]
    fn martingale_two_subjects() {
        let subjects = vec![
            subject(&[0.0], &[0.0], 1.0),
            subject(&[0.0], &[1.0], f64::INFINITY),
        ];
        let study = StudyConfig::full(2.0, vec![], vec!["z".into()]).unwrap();
        let rows = to_risk_rows(&subjects, Process::Treatment, &study).unwrap();
        let mut fit = fit_cox(&rows, None, vec![], &CoxOptions::default()).unwrap();
        assert!(fit.separated);
        fit.coefficients = vec![0.0];
        fit.baseline = breslow_baseline(&[0.0], &rows, None).unwrap();
        let m0 = martingale_increments(&fit, &subjects[0], &study.treatment, Process::Treatment);
        let m1 = martingale_increments(&fit, &subjects[1], &study.treatment, Process::Treatment);
        assert_eq!(m0, vec![(1.0, 0.5)]);
        assert_eq!(m1, vec![(1.0, -0.5)]);
    }

    #[test]
    fn coefficient_csv_layout() {
        let fit = fit_cox(
            &four_subjects(),
            None,
            vec!["x".into()],
            &CoxOptions::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        fit.write_coefficient_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("term,estimate,se_inverse_information,p_value,signif\nx,"));
    }
}
