//! Blip model, estimating-function assembly and the continuous-time estimators.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cox::{self, CoxFit, CoxOptions};
use crate::data::{to_risk_rows, Process, StudyConfig, SubjectRecord};
use crate::error::{Error, Result};
use crate::linalg;
use crate::regression::{
    build_at_risk_design, fit_logistic_segments, fit_ols_segments, AtRiskDesign, LinearFit,
    LogisticFit, LogisticOptions, Restriction,
};
use crate::rng::{self, StreamRng};

pub const DIM: usize = 2;

/// `γ_t(ψ) = (ψ₁ + ψ₂ t)(τ − t) I(t ≤ τ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlipSpec {
    pub tau: f64,
}

impl BlipSpec {
    /// `∂γ_t/∂ψ`, zero after `τ`.
    pub fn basis(&self, t: f64) -> [f64; DIM] {
        if t <= self.tau {
            let r = self.tau - t;
            [r, t * r]
        } else {
            [0.0; DIM]
        }
    }

    pub fn blip(&self, t: f64, psi: &[f64; DIM]) -> f64 {
        let g = self.basis(t);
        g[0] * psi[0] + g[1] * psi[1]
    }
}

/// `H(ψ) = Y − γ_T(ψ)` for treated subjects, `Y` otherwise.
pub fn mimicking_outcome(
    subject: &SubjectRecord,
    psi: &[f64; DIM],
    blip: &BlipSpec,
) -> Result<f64> {
    let y = subject
        .outcome
        .ok_or_else(|| Error::MissingOutcome(subject.id.clone()))?;
    Ok(if subject.treated {
        y - blip.blip(subject.treatment_time, psi)
    } else {
        y
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorTag {
    #[serde(rename = "p")]
    Preliminary,
    #[serde(rename = "cont1")]
    Cont1,
    #[serde(rename = "cont2")]
    Cont2,
    #[serde(rename = "disc_g")]
    DiscreteG,
}

impl EstimatorTag {
    pub const ALL: [EstimatorTag; 4] = [
        EstimatorTag::Preliminary,
        EstimatorTag::Cont1,
        EstimatorTag::Cont2,
        EstimatorTag::DiscreteG,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EstimatorTag::Preliminary => "p",
            EstimatorTag::Cont1 => "cont1",
            EstimatorTag::Cont2 => "cont2",
            EstimatorTag::DiscreteG => "disc_g",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.label() == s)
    }
}

/// `Pₙ G(ψ) = b − Aψ`; `a` is row-major.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EstimatingSystem {
    pub a: [f64; DIM * DIM],
    pub b: [f64; DIM],
}

impl EstimatingSystem {
    pub fn evaluate(&self, psi: &[f64; DIM]) -> [f64; DIM] {
        std::array::from_fn(|i| {
            self.b[i] - (0..DIM).map(|j| self.a[i * DIM + j] * psi[j]).sum::<f64>()
        })
    }

    fn add_scaled(&mut self, other: &EstimatingSystem, s: f64) {
        self.a
            .iter_mut()
            .zip(other.a)
            .for_each(|(x, y)| *x += s * y);
        self.b
            .iter_mut()
            .zip(other.b)
            .for_each(|(x, y)| *x += s * y);
    }
}

/// Solves `Aψ = b`, refusing ill-conditioned systems.
pub fn solve_psi(system: &EstimatingSystem) -> Result<[f64; DIM]> {
    if system.a.iter().chain(&system.b).any(|v| !v.is_finite()) {
        return Err(Error::Identification("non-finite estimating system".into()));
    }
    let cond = linalg::condition_number(&system.a, DIM);
    if !(cond < 1e10) {
        return Err(Error::Identification(format!(
            "condition number {cond:.3e}"
        )));
    }
    let x = linalg::lu_solve(&system.a, DIM, &system.b)
        .ok_or_else(|| Error::Identification("singular estimating system".into()))?;
    let psi = [x[0], x[1]];
    let r = system.evaluate(&psi);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm(&r) > 1e-8 * norm(&system.b).max(f64::MIN_POSITIVE) {
        return Err(Error::Identification("residual check failed".into()));
    }
    Ok(psi)
}

/// The three regressions behind `c(V̄_u)`.
#[derive(Debug, Clone)]
pub struct CWeightModels {
    /// `P(T ≤ τ | V̄_u, T ≥ u)`.
    pub treated_by_tau: LogisticFit,
    /// `E(τ − T | V̄_u, u ≤ T ≤ τ)`.
    pub remaining: LinearFit,
    /// `E{T(τ − T) | V̄_u, u ≤ T ≤ τ}`.
    pub remaining_product: LinearFit,
}

impl CWeightModels {
    /// `c(V̄_u)` from an expanded feature row.
    pub fn weight_from_features(&self, u: f64, tau: f64, x: &[f64]) -> [f64; DIM] {
        let basis = BlipSpec { tau }.basis(u);
        let p = self.treated_by_tau.predict(x);
        [
            basis[0] - p * self.remaining.predict(x),
            basis[1] - p * self.remaining_product.predict(x),
        ]
    }
}

fn nuisance_row(study: &StudyConfig, subject: &SubjectRecord, u: f64) -> Vec<f64> {
    let base = study.nuisance.features_at(subject, u);
    let mut x = Vec::with_capacity(study.expansion.width(base.len()));
    study.expansion.write_row(u, &base, &mut x);
    x
}

pub fn c_weight_preliminary(
    u: f64,
    subject: &SubjectRecord,
    models: &CWeightModels,
    study: &StudyConfig,
) -> [f64; DIM] {
    models.weight_from_features(u, study.tau, &nuisance_row(study, subject, u))
}

/// Conditional variance of the residual `H(ψ̂ₚ) − Ê{H | V̄_u, T ≥ u}` at each
/// grid time, used by the locally efficient weight.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceProfile {
    pub times: Vec<f64>,
    pub variances: Vec<f64>,
    /// Grid times where fewer than the minimum number of subjects were at
    /// risk and the pooled variance was used instead.
    pub fallbacks: usize,
}

impl VarianceProfile {
    /// Value at the grid time nearest to `u`.
    pub fn at(&self, u: f64) -> f64 {
        let k = self.times.partition_point(|&t| t < u);
        let pick = match (k.checked_sub(1), self.times.get(k)) {
            (Some(lo), Some(&hi)) => {
                if u - self.times[lo] <= hi - u {
                    lo
                } else {
                    k
                }
            }
            (Some(lo), None) => lo,
            (None, _) => 0,
        };
        self.variances[pick]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarianceOption<'a> {
    Constant,
    Empirical(&'a VarianceProfile),
}

pub fn c_weight_efficient(
    u: f64,
    subject: &SubjectRecord,
    models: &CWeightModels,
    study: &StudyConfig,
    variance: VarianceOption<'_>,
) -> [f64; DIM] {
    let c = c_weight_preliminary(u, subject, models, study);
    match variance {
        VarianceOption::Constant => c,
        VarianceOption::Empirical(profile) => {
            let v = profile.at(u);
            [c[0] / v, c[1] / v]
        }
    }
}

/// Subject-by-grid-time rows on which the nuisance regressions are fit and
/// the estimating function is summed. Shared by the continuous estimators
/// and the discretized comparator.
#[derive(Debug, Clone)]
pub struct StackedProblem {
    pub tau: f64,
    /// Expanded nuisance features, grouped in segments of one subject.
    pub design: AtRiskDesign,
    /// Treatment-process residual per row: `dM̂_T(u)` or `A_m − p̂_m`.
    pub increment: Vec<f64>,
    /// Case weight times inverse probability of censoring weight; zero for
    /// censored subjects.
    pub subject_weight: Vec<f64>,
    /// Observed outcome, zero where missing (such subjects carry weight zero).
    pub outcome: Vec<f64>,
    /// Initiation time on the analysis scale, infinite if never initiated.
    pub initiation: Vec<f64>,
    /// Normalizing sample size `Σ` case weights.
    pub n_total: f64,
}

/// One stacked row as seen by a weight function.
#[derive(Debug, Clone, Copy)]
pub struct RowView<'a> {
    pub row: usize,
    pub subject: usize,
    pub grid: usize,
    pub u: f64,
    pub x: &'a [f64],
}

impl StackedProblem {
    fn blip(&self) -> BlipSpec {
        BlipSpec { tau: self.tau }
    }

    pub fn grid(&self) -> &[f64] {
        &self.design.grid
    }

    pub fn nrows(&self) -> usize {
        self.design.nrows()
    }

    pub fn treated_by_tau(&self, i: usize) -> bool {
        self.initiation[i] <= self.tau
    }

    pub fn mimicking(&self, i: usize, psi: &[f64; DIM]) -> f64 {
        if self.treated_by_tau(i) {
            self.outcome[i] - self.blip().blip(self.initiation[i], psi)
        } else {
            self.outcome[i]
        }
    }

    fn per_segment(&self, f: impl Fn(usize) -> f64) -> Vec<f64> {
        self.design.segments.iter().map(|s| f(s.subject)).collect()
    }

    /// Fits the three `c` regressions, optionally warm-starting the logistic
    /// model.
    pub fn fit_c_models(
        &self,
        options: &LogisticOptions,
        start: Option<&CWeightModels>,
    ) -> Result<CWeightModels> {
        let w = self.per_segment(|i| self.subject_weight[i]);
        let label = self.per_segment(|i| f64::from(u8::from(self.treated_by_tau(i))));
        let treated_by_tau = fit_logistic_segments(
            &self.design,
            &label,
            &w,
            start.map(|m| m.treated_by_tau.coefficients.as_slice()),
            options,
        )?;
        let w_treated: Vec<f64> = w.iter().zip(&label).map(|(w, l)| w * l).collect();
        let rem = self.per_segment(|i| {
            let t = self.initiation[i];
            if t <= self.tau {
                self.tau - t
            } else {
                0.0
            }
        });
        let rem_prod = self.per_segment(|i| {
            let t = self.initiation[i];
            if t <= self.tau {
                t * (self.tau - t)
            } else {
                0.0
            }
        });
        Ok(CWeightModels {
            treated_by_tau,
            remaining: fit_ols_segments(&self.design, &rem, &w_treated)?,
            remaining_product: fit_ols_segments(&self.design, &rem_prod, &w_treated)?,
        })
    }

    /// Working model `Ê{H(ψ) | V̄_u, T ≥ u; β}` fit by least squares.
    pub fn fit_outcome(&self, psi: &[f64; DIM]) -> Result<LinearFit> {
        let h = self.per_segment(|i| self.mimicking(i, psi));
        let w = self.per_segment(|i| self.subject_weight[i]);
        fit_ols_segments(&self.design, &h, &w)
    }

    /// Visits every row with positive subject weight.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let mut r = 0;
        for (s, seg) in self.design.segments.iter().enumerate() {
            if self.subject_weight[seg.subject] == 0.0 {
                r += seg.len();
                continue;
            }
            for k in seg.start..seg.end {
                f(r, s, seg.subject, k);
                r += 1;
            }
        }
    }

    pub fn variance_profile(
        &self,
        psi: &[f64; DIM],
        outcome: Option<&LinearFit>,
        min_at_risk: usize,
        floor: f64,
    ) -> VarianceProfile {
        let grid = self.grid();
        let k = grid.len();
        let mut sw = vec![0.0; k];
        let mut s1 = vec![0.0; k];
        let mut s2 = vec![0.0; k];
        let mut count = vec![0usize; k];
        let mut seg_pred: Option<(usize, f64, f64)> = None;
        self.for_each_row(|_, s, i, g| {
            let (a, b) = match (seg_pred, outcome) {
                (Some((cs, a, b)), _) if cs == s => (a, b),
                (_, Some(f)) => {
                    let (a, b) = self.design.segment_predictor(s, &f.coefficients);
                    seg_pred = Some((s, a, b));
                    (a, b)
                }
                (_, None) => (0.0, 0.0),
            };
            let w = self.subject_weight[i];
            let e = self.mimicking(i, psi) - (a + b * grid[g]);
            sw[g] += w;
            s1[g] += w * e;
            s2[g] += w * e * e;
            count[g] += 1;
        });
        let var = |w: f64, a: f64, b: f64| {
            if w > 0.0 {
                (b / w - (a / w).powi(2)).max(0.0)
            } else {
                0.0
            }
        };
        let pooled = var(sw.iter().sum(), s1.iter().sum(), s2.iter().sum()).max(floor);
        let mut fallbacks = 0;
        let variances = (0..k)
            .map(|g| {
                if count[g] < min_at_risk {
                    fallbacks += 1;
                    pooled
                } else {
                    var(sw[g], s1[g], s2[g]).max(floor)
                }
            })
            .collect();
        VarianceProfile {
            times: grid.to_vec(),
            variances,
            fallbacks,
        }
    }

    /// Per-subject `(b_i, A_i)` with `G_i(ψ) = b_i − A_iψ`, including the
    /// subject weight but not the `1/n` factor. `weight` supplies `c`.
    pub fn contributions<F>(&self, outcome: Option<&LinearFit>, weight: F) -> Vec<EstimatingSystem>
    where
        F: Fn(&RowView<'_>) -> [f64; DIM],
    {
        let blip = self.blip();
        let grid = self.grid();
        let mut out = vec![EstimatingSystem::default(); self.subject_weight.len()];
        let mut x = Vec::with_capacity(self.design.ncols());
        self.for_each_row(|r, s, i, k| {
            let dm = self.increment[r];
            if dm == 0.0 {
                return;
            }
            let u = grid[k];
            self.design.write_row(s, u, &mut x);
            let c = weight(&RowView {
                row: r,
                subject: i,
                grid: k,
                u,
                x: &x,
            });
            let m = outcome.map_or(0.0, |f| f.predict(&x));
            let g = if self.treated_by_tau(i) {
                blip.basis(self.initiation[i])
            } else {
                [0.0; DIM]
            };
            let w = self.subject_weight[i];
            let sys = &mut out[i];
            for a in 0..DIM {
                let f = w * c[a] * dm;
                sys.b[a] += f * (self.outcome[i] - m);
                for b in 0..DIM {
                    sys.a[a * DIM + b] += f * g[b];
                }
            }
        });
        out
    }

    pub fn assemble<F>(&self, outcome: Option<&LinearFit>, weight: F) -> EstimatingSystem
    where
        F: Fn(&RowView<'_>) -> [f64; DIM],
    {
        let mut total = EstimatingSystem::default();
        for s in self.contributions(outcome, weight) {
            total.add_scaled(&s, 1.0 / self.n_total);
        }
        total
    }

    pub fn preliminary_weight<'a>(
        &'a self,
        models: &'a CWeightModels,
    ) -> impl Fn(&RowView<'_>) -> [f64; DIM] + 'a {
        move |row| models.weight_from_features(row.u, self.tau, row.x)
    }

    pub fn efficient_weight<'a>(
        &'a self,
        models: &'a CWeightModels,
        profile: &'a VarianceProfile,
    ) -> impl Fn(&RowView<'_>) -> [f64; DIM] + 'a {
        move |row| {
            let c = models.weight_from_features(row.u, self.tau, row.x);
            let v = profile.variances[row.grid];
            [c[0] / v, c[1] / v]
        }
    }

    /// Runs the two-stage fit: preliminary estimate with `E{H|·} ≡ 0`, then
    /// the outcome model on `H(ψ̂ₚ)` and the constant-variance estimator,
    /// plus the empirical-variance estimator when `efficient` is set.
    pub fn solve_two_stage(
        &self,
        options: &PipelineOptions,
        efficient: bool,
        start: Option<&CWeightModels>,
    ) -> Result<TwoStage> {
        let models = self.fit_c_models(&options.logistic, start)?;
        let preliminary = solve_psi(&self.assemble(None, self.preliminary_weight(&models)))?;
        let outcome = if options.outcome_model {
            Some(self.fit_outcome(&preliminary)?)
        } else {
            None
        };
        let cont1 = solve_psi(&self.assemble(outcome.as_ref(), self.preliminary_weight(&models)))?;
        let (cont2, variance) = if efficient {
            let profile = self.variance_profile(
                &preliminary,
                outcome.as_ref(),
                options.min_at_risk,
                options.variance_floor,
            );
            let psi = solve_psi(
                &self.assemble(outcome.as_ref(), self.efficient_weight(&models, &profile)),
            )?;
            (psi, Some(profile))
        } else {
            ([f64::NAN; DIM], None)
        };
        Ok(TwoStage {
            preliminary,
            cont1,
            cont2,
            models,
            outcome,
            variance,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TwoStage {
    pub preliminary: [f64; DIM],
    pub cont1: [f64; DIM],
    /// NaN when the empirical-variance stage was skipped.
    pub cont2: [f64; DIM],
    pub models: CWeightModels,
    pub outcome: Option<LinearFit>,
    pub variance: Option<VarianceProfile>,
}

/// Inverse probability of censoring weights `δ_C / max(K̂_C(τ), floor)`.
/// Returns the weights and the number of subjects clamped at the floor.
pub fn ipcw_weights(
    subjects: &[SubjectRecord],
    censoring: &CoxFit,
    study: &StudyConfig,
    floor: f64,
) -> Result<(Vec<f64>, usize)> {
    let mut clamped = 0;
    let w = subjects
        .iter()
        .map(|s| {
            if !s.uncensored {
                return Ok(0.0);
            }
            let k = cox::censoring_survival_raw(censoring, s, &study.censoring, study.tau)?;
            if k < floor {
                clamped += 1;
            }
            Ok(1.0 / k.max(floor))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((w, clamped))
}

/// Stacks the continuous-time problem at the pooled treatment-initiation
/// times of `treatment`. `subject_weight` must be zero for censored subjects.
pub fn stack_continuous(
    subjects: &[SubjectRecord],
    study: &StudyConfig,
    treatment: &CoxFit,
    subject_weight: &[f64],
    n_total: f64,
) -> Result<StackedProblem> {
    if let Some(s) = subjects
        .iter()
        .zip(subject_weight)
        .find(|(s, &w)| w != 0.0 && !s.uncensored)
    {
        return Err(Error::InvalidData(format!(
            "censored subject {} carries weight",
            s.0.id
        )));
    }
    let grid: Vec<f64> = treatment
        .baseline
        .iter()
        .map(|&(t, _)| t)
        .filter(|&t| t <= study.tau)
        .collect();
    let mass: Vec<f64> = treatment.baseline.iter().map(|&(_, m)| m).collect();
    let design = build_at_risk_design(
        subjects,
        Some(subject_weight),
        &grid,
        study,
        Restriction::AtRisk,
    )?;
    let recipe = &study.treatment;
    let mut increment = Vec::with_capacity(design.nrows());
    let mut buf = Vec::with_capacity(recipe.len());
    for seg in &design.segments {
        let s = &subjects[seg.subject];
        recipe.write_features(s, seg.visit, &mut buf);
        let rr = treatment.relative_risk(&buf);
        let entry = s.trajectory.visit_times()[0];
        for k in seg.start..seg.end {
            let u = grid[k];
            if u <= entry {
                increment.push(0.0);
                continue;
            }
            let dn = if s.treated && s.treatment_time == u {
                1.0
            } else {
                0.0
            };
            increment.push(dn - rr * mass[k]);
        }
    }
    Ok(StackedProblem {
        tau: study.tau,
        design,
        increment,
        subject_weight: subject_weight.to_vec(),
        outcome: subjects.iter().map(|s| s.outcome.unwrap_or(0.0)).collect(),
        initiation: subjects
            .iter()
            .map(|s| {
                if s.treated {
                    s.treatment_time
                } else {
                    f64::INFINITY
                }
            })
            .collect(),
        n_total,
    })
}

/// `Pₙ G(ψ)` as a linear system, for a fitted treatment model, optional
/// censoring model and outcome model, with the preliminary or locally
/// efficient weight.
#[allow(clippy::too_many_arguments)]
pub fn assemble_system(
    subjects: &[SubjectRecord],
    study: &StudyConfig,
    treatment: &CoxFit,
    censoring: Option<&CoxFit>,
    outcome: Option<&LinearFit>,
    models: &CWeightModels,
    variance: VarianceOption<'_>,
    ipcw_floor: f64,
) -> Result<EstimatingSystem> {
    let weights = match censoring {
        Some(c) => ipcw_weights(subjects, c, study, ipcw_floor)?.0,
        None => {
            if subjects.iter().any(|s| !s.uncensored) {
                return Err(Error::CensoringWithoutModel);
            }
            vec![1.0; subjects.len()]
        }
    };
    let stacked = stack_continuous(subjects, study, treatment, &weights, subjects.len() as f64)?;
    Ok(match variance {
        VarianceOption::Constant => stacked.assemble(outcome, stacked.preliminary_weight(models)),
        VarianceOption::Empirical(profile) => stacked.assemble(outcome, |row| {
            let c = models.weight_from_features(row.u, study.tau, row.x);
            let v = profile.at(row.u);
            [c[0] / v, c[1] / v]
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineOptions {
    /// Fit the working outcome model; when false `E{H|·}` is set to zero
    /// for every estimator.
    pub outcome_model: bool,
    pub ipcw_floor: f64,
    pub min_at_risk: usize,
    pub variance_floor: f64,
    #[serde(skip)]
    pub cox: CoxOptions,
    #[serde(skip)]
    pub logistic: LogisticOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            outcome_model: true,
            ipcw_floor: 0.01,
            min_at_risk: 5,
            variance_floor: 1e-8,
            cox: CoxOptions::default(),
            logistic: LogisticOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Diagnostics {
    pub ipcw_clamped: usize,
    pub variance_fallbacks: usize,
    pub nuisance_separated: bool,
    pub n_rows: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineFit {
    pub preliminary: [f64; DIM],
    pub cont1: [f64; DIM],
    pub cont2: [f64; DIM],
    pub treatment_fit: CoxFit,
    pub censoring_fit: Option<CoxFit>,
    pub c_models: CWeightModels,
    pub diagnostics: Diagnostics,
}

impl PipelineFit {
    pub fn get(&self, tag: EstimatorTag) -> Option<[f64; DIM]> {
        match tag {
            EstimatorTag::Preliminary => Some(self.preliminary),
            EstimatorTag::Cont1 => Some(self.cont1),
            EstimatorTag::Cont2 => Some(self.cont2),
            EstimatorTag::DiscreteG => None,
        }
    }
}

fn fit_process(
    subjects: &[SubjectRecord],
    study: &StudyConfig,
    process: Process,
    case_weights: Option<&[f64]>,
    options: &CoxOptions,
) -> Result<CoxFit> {
    let rows = to_risk_rows(subjects, process, study)?;
    let names = study
        .recipe(process)
        .names(&study.ti_names, &study.td_names);
    let fit = cox::fit_cox(&rows, case_weights, names, options)?;
    if fit.separated {
        return Err(Error::Identification(format!(
            "monotone likelihood in the {process:?} model"
        )));
    }
    if !fit.converged {
        return Err(Error::NotConverged(format!(
            "{process:?} model after {} iterations",
            fit.iterations
        )));
    }
    Ok(fit)
}

/// Fits the censoring model when any weighted subject is censored and returns
/// `(weights, censoring fit, clamped)`, with weights `case × δ_C / K̂_C(τ)`.
pub fn observation_weights(
    subjects: &[SubjectRecord],
    study: &StudyConfig,
    case_weights: Option<&[f64]>,
    options: &PipelineOptions,
) -> Result<(Vec<f64>, Option<CoxFit>, usize)> {
    let case = |i: usize| case_weights.map_or(1.0, |w| w[i]);
    if !subjects
        .iter()
        .enumerate()
        .any(|(i, s)| s.uncensored && case(i) > 0.0)
    {
        return Err(Error::Identification(
            "every subject is censored before the end of study".into(),
        ));
    }
    let any_censored = subjects
        .iter()
        .enumerate()
        .any(|(i, s)| !s.uncensored && case(i) > 0.0);
    if !any_censored {
        let w = subjects
            .iter()
            .enumerate()
            .map(|(i, s)| if s.uncensored { case(i) } else { 0.0 })
            .collect();
        return Ok((w, None, 0));
    }
    let fit = fit_process(
        subjects,
        study,
        Process::Censoring,
        case_weights,
        &options.cox,
    )?;
    let (ipcw, clamped) = ipcw_weights(subjects, &fit, study, options.ipcw_floor)?;
    let w = ipcw.iter().enumerate().map(|(i, w)| w * case(i)).collect();
    Ok((w, Some(fit), clamped))
}

/// Fits every nuisance model and returns the preliminary, constant-variance
/// and empirical-variance estimates. `case_weights` are subject multiplicities
/// (bootstrap resamples); `None` means one each.
pub fn estimate_pipeline(
    subjects: &[SubjectRecord],
    study: &StudyConfig,
    options: &PipelineOptions,
    case_weights: Option<&[f64]>,
) -> Result<PipelineFit> {
    estimate_pipeline_with(subjects, study, options, case_weights, true, None)
}

/// As [`estimate_pipeline`]; `efficient = false` skips the empirical-variance
/// estimator (left NaN) and `warm_start` seeds the logistic fit.
pub fn estimate_pipeline_with(
    subjects: &[SubjectRecord],
    study: &StudyConfig,
    options: &PipelineOptions,
    case_weights: Option<&[f64]>,
    efficient: bool,
    warm_start: Option<&CWeightModels>,
) -> Result<PipelineFit> {
    if subjects.is_empty() {
        return Err(Error::EmptySubjects);
    }
    let treatment_fit = fit_process(
        subjects,
        study,
        Process::Treatment,
        case_weights,
        &options.cox,
    )
    .map_err(|e| match e {
        Error::NoEvents => Error::Identification("no treatment initiations".into()),
        other => other,
    })?;
    let (weights, censoring_fit, ipcw_clamped) =
        observation_weights(subjects, study, case_weights, options)?;
    let n_total = case_weights.map_or(subjects.len() as f64, |w| w.iter().sum());
    let stacked = stack_continuous(subjects, study, &treatment_fit, &weights, n_total)?;
    let two = stacked.solve_two_stage(options, efficient, warm_start)?;
    Ok(PipelineFit {
        preliminary: two.preliminary,
        cont1: two.cont1,
        cont2: two.cont2,
        diagnostics: Diagnostics {
            ipcw_clamped,
            variance_fallbacks: two.variance.as_ref().map_or(0, |v| v.fallbacks),
            nuisance_separated: two.models.treated_by_tau.separated,
            n_rows: stacked.nrows(),
        },
        treatment_fit,
        censoring_fit,
        c_models: two.models,
    })
}

/// Subject multiplicities of one nonparametric bootstrap resample.
pub fn resample_weights(n: usize, rng: &mut StreamRng) -> Vec<f64> {
    let mut w = vec![0.0; n];
    for _ in 0..n {
        w[rng.below(n as u64) as usize] += 1.0;
    }
    w
}

/// Estimates from the successful bootstrap resamples; each entry holds one
/// value per requested slot.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapDraws {
    pub draws: Vec<Vec<[f64; DIM]>>,
    pub failed: usize,
    pub requested: usize,
}

impl BootstrapDraws {
    /// Sample covariance of slot `k` (divisor `B − 1`).
    pub fn covariance(&self, k: usize) -> [f64; DIM * DIM] {
        let m = self.draws.len();
        if m < 2 {
            return [f64::NAN; DIM * DIM];
        }
        let mean: [f64; DIM] =
            std::array::from_fn(|j| self.draws.iter().map(|d| d[k][j]).sum::<f64>() / m as f64);
        std::array::from_fn(|ij| {
            let (i, j) = (ij / DIM, ij % DIM);
            self.draws
                .iter()
                .map(|d| (d[k][i] - mean[i]) * (d[k][j] - mean[j]))
                .sum::<f64>()
                / (m - 1) as f64
        })
    }
}

/// Runs `estimate` on `b` resamples in parallel. Resample `r` of replicate
/// `replicate` draws from stream `[BOOTSTRAP, replicate, r]` of `seed`.
/// Failed resamples are dropped; more than 10% failures is an error.
pub fn bootstrap<F>(
    n: usize,
    b: usize,
    seed: u64,
    replicate: u64,
    estimate: F,
) -> Result<BootstrapDraws>
where
    F: Fn(&[f64]) -> Result<Vec<[f64; DIM]>> + Sync,
{
    if b < 2 {
        return Err(Error::Config("bootstrap size must be at least 2".into()));
    }
    let results: Vec<Option<Vec<[f64; DIM]>>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = StreamRng::new(seed, &[rng::BOOTSTRAP, replicate, r as u64]);
            estimate(&resample_weights(n, &mut rng)).ok()
        })
        .collect();
    let failed = results.iter().filter(|r| r.is_none()).count();
    if failed * 10 > b {
        return Err(Error::BootstrapFailures { failed, total: b });
    }
    Ok(BootstrapDraws {
        draws: results.into_iter().flatten().collect(),
        failed,
        requested: b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiEstimate {
    pub estimator: EstimatorTag,
    pub psi: [f64; DIM],
    pub covariance: [f64; DIM * DIM],
    pub ci_lower: [f64; DIM],
    pub ci_upper: [f64; DIM],
    pub n_bootstrap: usize,
}

impl PsiEstimate {
    pub fn new(
        estimator: EstimatorTag,
        psi: [f64; DIM],
        covariance: [f64; DIM * DIM],
        n_bootstrap: usize,
    ) -> Self {
        let se: [f64; DIM] = std::array::from_fn(|i| covariance[i * DIM + i].sqrt());
        Self {
            estimator,
            psi,
            covariance,
            ci_lower: std::array::from_fn(|i| psi[i] - 1.96 * se[i]),
            ci_upper: std::array::from_fn(|i| psi[i] + 1.96 * se[i]),
            n_bootstrap,
        }
    }

    pub fn point(estimator: EstimatorTag, psi: [f64; DIM]) -> Self {
        Self::new(estimator, psi, [f64::NAN; DIM * DIM], 0)
    }

    pub fn se(&self) -> [f64; DIM] {
        std::array::from_fn(|i| self.covariance[i * DIM + i].sqrt())
    }

    /// Two-sided Wald p-values for `ψ_j = 0`.
    pub fn p_values(&self) -> [f64; DIM] {
        let normal = Normal::standard();
        let se = self.se();
        std::array::from_fn(|i| 2.0 * (1.0 - normal.cdf((self.psi[i] / se[i]).abs())))
    }

    pub fn covers(&self, truth: &[f64; DIM]) -> [bool; DIM] {
        std::array::from_fn(|i| self.ci_lower[i] <= truth[i] && truth[i] <= self.ci_upper[i])
    }
}

pub const PARAMETER_NAMES: [&str; DIM] = ["psi1", "psi2"];

/// Coefficient table of estimates: estimate, SE, CI bounds and p-value per
/// parameter.
pub fn write_estimates_csv<W: std::io::Write>(estimates: &[PsiEstimate], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "estimator",
        "parameter",
        "estimate",
        "se",
        "ci_lower",
        "ci_upper",
        "p_value",
    ])?;
    for e in estimates {
        let se = e.se();
        let p = e.p_values();
        let num = |v: f64| {
            if e.n_bootstrap > 0 {
                format!("{v}")
            } else {
                "NA".to_string()
            }
        };
        for j in 0..DIM {
            w.write_record([
                e.estimator.label().to_string(),
                PARAMETER_NAMES[j].to_string(),
                format!("{}", e.psi[j]),
                num(se[j]),
                num(e.ci_lower[j]),
                num(e.ci_upper[j]),
                num(p[j]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn format_estimates_table(estimates: &[PsiEstimate]) -> String {
    let mut s = format!(
        "{:<12} {:<6} {:>10} {:>9} {:>21} {:>9}\n",
        "estimator", "param", "estimate", "se", "95% CI", "p-value"
    );
    for e in estimates {
        let se = e.se();
        let p = e.p_values();
        for j in 0..DIM {
            let (se, ci) = if e.n_bootstrap > 0 {
                (
                    format!("{:.3}", se[j]),
                    format!("({:.3}, {:.3})", e.ci_lower[j], e.ci_upper[j]),
                )
            } else {
                ("NA".to_string(), "NA".to_string())
            };
            s.push_str(&format!(
                "{:<12} {:<6} {:>10.3} {:>9} {:>21} {:>9}\n",
                e.estimator.label(),
                PARAMETER_NAMES[j],
                e.psi[j],
                se,
                ci,
                format_p(p[j])
            ));
        }
    }
    s
}

fn format_p(p: f64) -> String {
    if p.is_nan() {
        "NA".into()
    } else if p < 0.001 {
        "<0.001".into()
    } else {
        format!("{p:.3}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Trajectory;

    fn subject(id: &str, t: f64, y: f64) -> SubjectRecord {
        let times = if t < 2.0 { vec![0.0, t] } else { vec![0.0] };
        let vals = times.iter().map(|_| vec![0.0]).collect();
        let traj = Trajectory::new(times, vals, vec![0.0]).unwrap();
        SubjectRecord::new(id, traj, t, f64::INFINITY, 2.0, Some(y)).unwrap()
    }

    #[test]
    fn blip_values() {
        let b = BlipSpec { tau: 2.0 };
        assert_eq!(b.blip(0.0, &[15.0, -1.0]), 30.0);
        assert_eq!(b.blip(2.0, &[15.0, -1.0]), 0.0);
        assert_eq!(b.blip(2.5, &[15.0, -1.0]), 0.0);
        assert_eq!(b.blip(1.3, &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn mimicking_outcome_values() {
        let b = BlipSpec { tau: 2.0 };
        let s = subject("a", 0.5, 100.0);
        assert!((mimicking_outcome(&s, &[15.0, -1.0], &b).unwrap() - 78.25).abs() < 1e-12);
        assert_eq!(mimicking_outcome(&s, &[0.0, 0.0], &b).unwrap(), 100.0);
        let never = subject("b", f64::INFINITY, 3.0);
        assert_eq!(mimicking_outcome(&never, &[15.0, -1.0], &b).unwrap(), 3.0);
    }

    #[test]
    fn missing_outcome_is_an_error() {
        let traj = Trajectory::new(vec![0.0], vec![vec![0.0]], vec![0.0]).unwrap();
        let s = SubjectRecord::new("c", traj, f64::INFINITY, 1.0, 2.0, None).unwrap();
        assert!(matches!(
            mimicking_outcome(&s, &[1.0, 1.0], &BlipSpec { tau: 2.0 }),
            Err(Error::MissingOutcome(_))
        ));
    }

    #[test]
    fn solve_identity() {
        let sys = EstimatingSystem {
            a: [1.0, 0.0, 0.0, 1.0],
            b: [15.0, -1.0],
        };
        assert_eq!(solve_psi(&sys).unwrap(), [15.0, -1.0]);
        let singular = EstimatingSystem {
            a: [1.0, 2.0, 2.0, 4.0],
            b: [1.0, 1.0],
        };
        assert!(matches!(
            solve_psi(&singular),
            Err(Error::Identification(_))
        ));
        assert!(matches!(
            solve_psi(&EstimatingSystem::default()),
            Err(Error::Identification(_))
        ));
    }

    #[test]
    fn variance_profile_nearest() {
        let p = VarianceProfile {
            times: vec![0.5, 1.0, 1.8],
            variances: vec![1.0, 2.0, 3.0],
            fallbacks: 0,
        };
        assert_eq!(p.at(0.1), 1.0);
        assert_eq!(p.at(0.8), 2.0);
        assert_eq!(p.at(1.5), 3.0);
        assert_eq!(p.at(5.0), 3.0);
    }

    #[test]
    fn bootstrap_of_constant_data_has_zero_variance() {
        let data = vec![4.0; 30];
        let draws = bootstrap(30, 20, 1, 0, |w| {
            let m = w.iter().zip(&data).map(|(w, x)| w * x).sum::<f64>() / w.iter().sum::<f64>();
            Ok(vec![[m, 2.0 * m]])
        })
        .unwrap();
        assert_eq!(draws.draws.len(), 20);
        assert!(draws.covariance(0).iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn bootstrap_failure_budget() {
        let err = bootstrap(10, 20, 1, 0, |w| {
            if w[0] >= 1.0 {
                Err(Error::Identification("x".into()))
            } else {
                Ok(vec![[0.0, 0.0]])
            }
        });
        assert!(matches!(err, Err(Error::BootstrapFailures { .. })));
    }

    #[test]
    fn resample_weights_sum_to_n() {
        let mut rng = StreamRng::new(5, &[0]);
        let w = resample_weights(37, &mut rng);
        assert_eq!(w.iter().sum::<f64>(), 37.0);
    }

    #[test]
    fn wald_interval() {
        let e = PsiEstimate::new(EstimatorTag::Cont1, [15.0, -1.0], [0.25, 0.0, 0.0, 1.0], 50);
        assert_eq!(e.ci_lower, [15.0 - 0.98, -1.0 - 1.96]);
        assert_eq!(e.ci_upper, [15.0 + 0.98, -1.0 + 1.96]);
        assert_eq!(e.covers(&[15.5, 0.9]), [true, true]);
        assert_eq!(e.covers(&[16.0, 1.0]), [false, false]);
    }

    #[test]
    fn all_censored_is_not_identified() {
        let traj =
            || Trajectory::new(vec![0.0, 0.5], vec![vec![0.0], vec![1.0]], vec![0.0]).unwrap();
        let subjects: Vec<SubjectRecord> = (0..4)
            .map(|i| {
                let t = if i % 2 == 0 { 0.5 } else { f64::INFINITY };
                SubjectRecord::new(i.to_string(), traj(), t, 1.0 + 0.1 * i as f64, 2.0, None)
                    .unwrap()
            })
            .collect();
        let study = StudyConfig::full(2.0, vec!["a".into()], vec!["b".into()]).unwrap();
        let err =
            observation_weights(&subjects, &study, None, &PipelineOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Identification(_)));
    }
}
