//! Irregular longitudinal trajectories and their counting-process view.
//!
//! Covariates are piecewise constant between visits. The value recorded at a
//! visit holds until the next visit (right-continuous). Hazards and any other
//! quantity evaluated "at time u" use the predictable version: the covariates
//! of the last visit strictly before `u`, which is also the value a
//! counting-process row `(start, stop]` carries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    visit_times: Vec<f64>,
    covariates_at_visit: Vec<Vec<f64>>,
    time_independent: Vec<f64>,
}

impl Trajectory {
    pub fn new(
        visit_times: Vec<f64>,
        covariates_at_visit: Vec<Vec<f64>>,
        time_independent: Vec<f64>,
    ) -> Result<Self> {
        if visit_times.is_empty() {
            return Err(Error::InvalidData("trajectory without visits".into()));
        }
        if visit_times.len() != covariates_at_visit.len() {
            return Err(Error::InvalidData(format!(
                "{} visit times but {} covariate vectors",
                visit_times.len(),
                covariates_at_visit.len()
            )));
        }
        if visit_times[0] < 0.0 || !visit_times.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidData(
                "visit times must be finite and >= 0".into(),
            ));
        }
        if visit_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidData(
                "visit times must be strictly increasing".into(),
            ));
        }
        let dim = covariates_at_visit[0].len();
        if covariates_at_visit.iter().any(|c| c.len() != dim) {
            return Err(Error::InvalidData(
                "covariate dimension varies across visits".into(),
            ));
        }
        Ok(Self {
            visit_times,
            covariates_at_visit,
            time_independent,
        })
    }

    pub fn visit_times(&self) -> &[f64] {
        &self.visit_times
    }

    pub fn covariates_at_visit(&self) -> &[Vec<f64>] {
        &self.covariates_at_visit
    }

    pub fn time_independent(&self) -> &[f64] {
        &self.time_independent
    }

    pub fn n_time_dependent(&self) -> usize {
        self.covariates_at_visit[0].len()
    }

    /// Index of the visit whose values govern the hazard at `u`: the last
    /// visit strictly before `u`, or the first visit when none precedes it.
    pub fn governing_visit(&self, u: f64) -> usize {
        self.visit_times
            .partition_point(|&t| t < u)
            .saturating_sub(1)
    }

    /// Right-continuous LOCF value of the time-dependent covariates at `t`.
    pub fn value_at(&self, t: f64) -> &[f64] {
        let j = self
            .visit_times
            .partition_point(|&v| v <= t)
            .saturating_sub(1);
        &self.covariates_at_visit[j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub trajectory: Trajectory,
    /// `f64::INFINITY` when initiation was not observed during follow-up.
    pub treatment_time: f64,
    pub treated: bool,
    /// `f64::INFINITY` when no censoring occurred before the end of study.
    pub censor_time: f64,
    pub uncensored: bool,
    pub followup_end: f64,
    pub outcome: Option<f64>,
}

impl SubjectRecord {
    /// Builds a record from observed times, deriving the flags.
    ///
    /// A treatment time beyond the end of follow-up is stored as infinity.
    pub fn new(
        id: impl Into<String>,
        trajectory: Trajectory,
        treatment_time: f64,
        censor_time: f64,
        tau: f64,
        outcome: Option<f64>,
    ) -> Result<Self> {
        let id = id.into();
        let uncensored = censor_time >= tau;
        let followup_end = censor_time.min(tau);
        let treated = treatment_time.is_finite() && treatment_time <= followup_end;
        if uncensored != outcome.is_some() {
            return Err(Error::InvalidData(format!(
                "subject {id}: outcome must be present exactly when uncensored"
            )));
        }
        if let Some(&last) = trajectory.visit_times().last() {
            if last > followup_end {
                return Err(Error::InvalidData(format!(
                    "subject {id}: visit at {last} after end of follow-up {followup_end}"
                )));
            }
        }
        Ok(Self {
            id,
            trajectory,
            treatment_time: if treated {
                treatment_time
            } else {
                f64::INFINITY
            },
            treated,
            censor_time: if uncensored {
                f64::INFINITY
            } else {
                censor_time
            },
            uncensored,
            followup_end,
            outcome,
        })
    }

    /// End of the at-risk period for the given process.
    pub fn risk_end(&self, process: Process) -> f64 {
        match process {
            Process::Treatment => self.treatment_time.min(self.followup_end),
            Process::Censoring => self.followup_end,
        }
    }

    pub fn has_event(&self, process: Process) -> bool {
        match process {
            Process::Treatment => self.treated,
            Process::Censoring => !self.uncensored,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Process {
    Treatment,
    Censoring,
}

/// One at-risk interval `(start, stop]` of a subject.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskRow {
    /// Index into the subject slice the rows were built from.
    pub subject: usize,
    pub start: f64,
    pub stop: f64,
    pub covariates: Vec<f64>,
    pub event: bool,
}

/// Which pieces of a trajectory enter a covariate vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureRecipe {
    pub time_independent: Vec<usize>,
    pub time_dependent: Vec<usize>,
    /// Appends time since previous visit, first-visit and second-visit indicators.
    pub visit_history: bool,
    /// Appends an indicator of treatment initiated at or before the governing visit.
    pub treated: bool,
}

impl FeatureRecipe {
    pub fn all(n_ti: usize, n_td: usize) -> Self {
        Self {
            time_independent: (0..n_ti).collect(),
            time_dependent: (0..n_td).collect(),
            ..Self::default()
        }
    }

    pub fn time_independent_only(n_ti: usize) -> Self {
        Self {
            time_independent: (0..n_ti).collect(),
            ..Self::default()
        }
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.time_independent.len()
            + self.time_dependent.len()
            + if self.visit_history { 3 } else { 0 }
            + usize::from(self.treated)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self, ti_names: &[String], td_names: &[String]) -> Vec<String> {
        let mut out: Vec<String> = self
            .time_independent
            .iter()
            .map(|&k| ti_names[k].clone())
            .chain(self.time_dependent.iter().map(|&k| td_names[k].clone()))
            .collect();
        if self.visit_history {
            out.extend(["time_since_last_visit", "first_visit", "second_visit"].map(String::from));
        }
        if self.treated {
            out.push("treated".into());
        }
        out
    }

    /// Writes the feature vector governed by visit `j` into `out` (cleared first).
    pub fn write_features(&self, subject: &SubjectRecord, j: usize, out: &mut Vec<f64>) {
        out.clear();
        let traj = &subject.trajectory;
        out.extend(
            self.time_independent
                .iter()
                .map(|&k| traj.time_independent[k]),
        );
        let td = &traj.covariates_at_visit[j];
        out.extend(self.time_dependent.iter().map(|&k| td[k]));
        if self.visit_history {
            let gap = if j == 0 {
                0.0
            } else {
                traj.visit_times[j] - traj.visit_times[j - 1]
            };
            out.push(gap);
            out.push(f64::from(u8::from(j == 0)));
            out.push(f64::from(u8::from(j == 1)));
        }
        if self.treated {
            let t = traj.visit_times[j];
            out.push(f64::from(u8::from(
                subject.treated && subject.treatment_time <= t,
            )));
        }
    }

    pub fn features(&self, subject: &SubjectRecord, j: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        self.write_features(subject, j, &mut out);
        out
    }

    /// Features at time `u` via the governing visit.
    pub fn features_at(&self, subject: &SubjectRecord, u: f64) -> Vec<f64> {
        self.features(subject, subject.trajectory.governing_visit(u))
    }
}

/// How the nuisance regressions expand `(u, base features)` into a design row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expansion {
    /// Intercept, `u`, and the base features.
    Linear,
    /// Intercept plus every product of a non-empty subset of `{u, base features}`.
    #[default]
    Interactions,
}

impl Expansion {
    pub fn width(self, n_base: usize) -> usize {
        match self {
            Expansion::Linear => n_base + 2,
            Expansion::Interactions => 1 << (n_base + 1),
        }
    }

    /// Expands into `out` (cleared first). Column `k` of the interaction
    /// expansion is the product of the terms whose bits are set in `k`, with
    /// bit 0 standing for `u`.
    pub fn write_row(self, u: f64, base: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match self {
            Expansion::Linear => {
                out.push(1.0);
                out.push(u);
                out.extend_from_slice(base);
            }
            Expansion::Interactions => {
                out.push(1.0);
                let mut terms = Vec::with_capacity(base.len() + 1);
                terms.push(u);
                terms.extend_from_slice(base);
                for (bit, &term) in terms.iter().enumerate() {
                    let half = 1usize << bit;
                    for k in 0..half {
                        let v = out[k] * term;
                        out.push(v);
                    }
                }
            }
        }
    }

    pub fn names(self, base_names: &[String]) -> Vec<String> {
        match self {
            Expansion::Linear => {
                let mut out = vec!["(intercept)".to_string(), "u".to_string()];
                out.extend(base_names.iter().cloned());
                out
            }
            Expansion::Interactions => {
                let mut terms = vec!["u".to_string()];
                terms.extend(base_names.iter().cloned());
                let mut out = vec!["(intercept)".to_string()];
                for (bit, term) in terms.iter().enumerate() {
                    let half = 1usize << bit;
                    for k in 0..half {
                        let name = if k == 0 {
                            term.clone()
                        } else {
                            format!("{}:{}", out[k], term)
                        };
                        out.push(name);
                    }
                }
                out
            }
        }
    }
}

/// Study-level settings shared by all fits.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub tau: f64,
    pub ti_names: Vec<String>,
    pub td_names: Vec<String>,
    pub treatment: FeatureRecipe,
    pub censoring: FeatureRecipe,
    pub nuisance: FeatureRecipe,
    pub expansion: Expansion,
}

impl StudyConfig {
    /// All covariates everywhere, full interactions in the nuisance regressions.
    pub fn full(tau: f64, ti_names: Vec<String>, td_names: Vec<String>) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {tau}")));
        }
        let all = FeatureRecipe::all(ti_names.len(), td_names.len());
        Ok(Self {
            tau,
            treatment: all.clone(),
            censoring: all.clone(),
            nuisance: all,
            expansion: Expansion::Interactions,
            ti_names,
            td_names,
        })
    }

    pub fn recipe(&self, process: Process) -> &FeatureRecipe {
        match process {
            Process::Treatment => &self.treatment,
            Process::Censoring => &self.censoring,
        }
    }
}

/// Counting-process rows for the treatment or censoring process.
///
/// Each subject contributes one row per inter-visit interval while at risk.
/// For the treatment process the at-risk period ends at the first of
/// initiation, censoring and the end of study.
pub fn to_risk_rows(
    subjects: &[SubjectRecord],
    process: Process,
    study: &StudyConfig,
) -> Result<Vec<RiskRow>> {
    if subjects.is_empty() {
        return Err(Error::EmptySubjects);
    }
    let recipe = study.recipe(process);
    let mut rows = Vec::with_capacity(subjects.len() * 4);
    for (i, s) in subjects.iter().enumerate() {
        let times = s.trajectory.visit_times();
        if let Some(&last) = times.last() {
            if last > study.tau {
                return Err(Error::VisitBeyondTau {
                    id: s.id.clone(),
                    time: last,
                    tau: study.tau,
                });
            }
        }
        let end = s.risk_end(process).min(study.tau);
        let event = s.has_event(process);
        for (j, &start) in times.iter().enumerate() {
            if start >= end {
                break;
            }
            let stop = times.get(j + 1).map_or(end, |&next| next.min(end));
            rows.push(RiskRow {
                subject: i,
                start,
                stop,
                covariates: recipe.features(s, j),
                event: event && stop == end,
            });
        }
    }
    Ok(rows)
}
