//! Discretization to a fixed grid and the discrete-time g-estimator.
//!
//! Follow-up `[0, τ]` is cut at `t_m = mτ/K`. Bin `m` carries the time
//! average of the (last observation carried forward) covariate process over
//! `[t_{m−1}, t_m]`, and `A_m = I(T ≤ t_m)`. The estimator then runs the same
//! two-stage recipe as the continuous one on the binned rows, with a pooled
//! logistic model for `P(A_m = 1 | Ā_{m−1} = 0, L̄_m)` in place of the
//! proportional hazards model.

use crate::data::{FeatureRecipe, StudyConfig, SubjectRecord};
use crate::error::{Error, Result};
use crate::regression::{fit_logistic, AtRiskDesign, Design, Segment};
use crate::snmm::{observation_weights, PipelineOptions, StackedProblem, DIM};

pub const DEFAULT_BINS: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteRecord {
    pub id: String,
    pub time_independent: Vec<f64>,
    /// `L_m` for `m = 1..=K`, time-dependent covariates averaged over the bin.
    pub covariates: Vec<Vec<f64>>,
    /// `A_m` for `m = 1..=K`.
    pub treatment: Vec<bool>,
    /// First bin edge with `A_m = 1`, or infinity.
    pub t_disc: f64,
    pub outcome: Option<f64>,
    /// Bins fully inside follow-up.
    pub observed_bins: usize,
    /// Inverse probability of censoring weight, zero when censored.
    pub weight: f64,
}

impl DiscreteRecord {
    /// Index of the first bin with `A_m = 1` (zero-based), if any.
    pub fn initiation_bin(&self) -> Option<usize> {
        self.treatment.iter().position(|&a| a)
    }
}

pub fn bin_edges(tau: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|m| m as f64 * tau / bins as f64).collect()
}

/// Time average of the right-continuous step function over `[a, b]`.
fn step_average(times: &[f64], values: &[Vec<f64>], a: f64, b: f64, out: &mut Vec<f64>) {
    let dim = values[0].len();
    out.clear();
    out.resize(dim, 0.0);
    // before the first visit the first value is carried backward
    let mut j = times.partition_point(|&t| t <= a).saturating_sub(1);
    let mut lo = a;
    loop {
        let hi = times.get(j + 1).map_or(b, |&t| t.min(b));
        for (o, v) in out.iter_mut().zip(&values[j]) {
            *o += v * (hi - lo);
        }
        if hi >= b {
            break;
        }
        lo = hi;
        j += 1;
    }
    out.iter_mut().for_each(|o| *o /= b - a);
}

pub fn discretize(
    subjects: &[SubjectRecord],
    tau: f64,
    bins: usize,
) -> Result<Vec<DiscreteRecord>> {
    if bins < 2 {
        return Err(Error::Config("at least two bins are required".into()));
    }
    let edges = bin_edges(tau, bins);
    Ok(subjects
        .iter()
        .map(|s| {
            let traj = &s.trajectory;
            let covariates = (1..=bins)
                .map(|m| {
                    let mut v = Vec::new();
                    step_average(
                        traj.visit_times(),
                        traj.covariates_at_visit(),
                        edges[m - 1],
                        edges[m],
                        &mut v,
                    );
                    v
                })
                .collect();
            let treatment: Vec<bool> = edges[1..]
                .iter()
                .map(|&t| s.treated && s.treatment_time <= t)
                .collect();
            let t_disc = treatment
                .iter()
                .position(|&a| a)
                .map_or(f64::INFINITY, |m| edges[m + 1]);
            DiscreteRecord {
                id: s.id.clone(),
                time_independent: traj.time_independent().to_vec(),
                covariates,
                treatment,
                t_disc,
                outcome: s.outcome,
                observed_bins: edges[1..].partition_point(|&t| t <= s.followup_end),
                weight: if s.uncensored { 1.0 } else { 0.0 },
            }
        })
        .collect())
}

fn base_features(recipe: &FeatureRecipe, r: &DiscreteRecord, m: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend(
        recipe
            .time_independent
            .iter()
            .map(|&k| r.time_independent[k]),
    );
    out.extend(recipe.time_dependent.iter().map(|&k| r.covariates[m][k]));
}

/// Bins `m` (zero-based) at which the record is still untreated before the
/// bin, `Ā_{m−1} = 0`, within `limit` bins.
fn at_risk_bins(r: &DiscreteRecord, limit: usize) -> std::ops::Range<usize> {
    let last = r.initiation_bin().map_or(r.treatment.len(), |m| m + 1);
    0..last.min(limit)
}

/// Pooled logistic regression of `A_m` on `(1, t_m, treatment-recipe
/// features)` over bins at risk and under observation. Returns the fitted
/// probability for every at-risk bin of every record, keyed by record.
fn pooled_treatment_model(
    records: &[DiscreteRecord],
    edges: &[f64],
    recipe: &FeatureRecipe,
    case_weights: Option<&[f64]>,
    options: &PipelineOptions,
) -> Result<Vec<Vec<f64>>> {
    let mut names = vec!["(intercept)".to_string(), "t".to_string()];
    names.extend((0..recipe.len()).map(|k| format!("x{k}")));
    let mut x = Design::new(names.len(), names);
    let mut y = Vec::new();
    let mut w = Vec::new();
    let mut base = Vec::new();
    let mut row = Vec::new();
    let mut write = |r: &DiscreteRecord, m: usize, row: &mut Vec<f64>| {
        base_features(recipe, r, m, &mut base);
        row.clear();
        row.push(1.0);
        row.push(edges[m + 1]);
        row.extend_from_slice(&base);
    };
    for (i, r) in records.iter().enumerate() {
        let cw = case_weights.map_or(1.0, |c| c[i]);
        if cw == 0.0 {
            continue;
        }
        for m in at_risk_bins(r, r.observed_bins) {
            write(r, m, &mut row);
            x.push_row(&row);
            y.push(f64::from(u8::from(r.treatment[m])));
            w.push(cw);
        }
    }
    let fit = fit_logistic(&x, &y, Some(&w), &options.logistic).map_err(|e| match e {
        Error::SingleClass => Error::Identification("no initiations on the discrete grid".into()),
        other => other,
    })?;
    if fit.separated {
        return Err(Error::Identification(
            "separation in pooled treatment model".into(),
        ));
    }
    Ok(records
        .iter()
        .map(|r| {
            at_risk_bins(r, r.treatment.len())
                .map(|m| {
                    write(r, m, &mut row);
                    fit.predict(&row)
                })
                .collect()
        })
        .collect())
}

/// Stacks the binned problem: one row per record and bin with `Ā_{m−1} = 0`,
/// for records with positive weight.
pub fn stack_discrete(
    records: &[DiscreteRecord],
    study: &StudyConfig,
    probabilities: &[Vec<f64>],
    subject_weight: &[f64],
    n_total: f64,
) -> Result<StackedProblem> {
    let bins = records.first().map_or(0, |r| r.treatment.len());
    let edges = bin_edges(study.tau, bins);
    let recipe = &study.nuisance;
    let base_names = recipe.names(&study.ti_names, &study.td_names);
    let mut design = AtRiskDesign::new(study.expansion.names(&base_names), edges[1..].to_vec());
    let mut increment = Vec::new();
    let mut base = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if subject_weight[i] == 0.0 {
            continue;
        }
        for m in at_risk_bins(r, bins) {
            base_features(recipe, r, m, &mut base);
            design.push_segment(
                Segment {
                    subject: i,
                    visit: m,
                    start: m,
                    end: m + 1,
                },
                |u, out| study.expansion.write_row(u, &base, out),
            );
            increment.push(f64::from(u8::from(r.treatment[m])) - probabilities[i][m]);
        }
    }
    if design.segments.is_empty() {
        return Err(Error::EmptyDesign("discrete at-risk bins".into()));
    }
    Ok(StackedProblem {
        tau: study.tau,
        design,
        increment,
        subject_weight: subject_weight.to_vec(),
        outcome: records.iter().map(|r| r.outcome.unwrap_or(0.0)).collect(),
        initiation: records.iter().map(|r| r.t_disc).collect(),
        n_total,
    })
}

/// Discrete-time g-estimate from binned records whose `weight` already holds
/// the censoring weight. The treatment model uses `study.treatment`; the
/// nuisance regressions use `study.nuisance` and `study.expansion`.
pub fn g_estimate_discrete(
    records: &[DiscreteRecord],
    study: &StudyConfig,
    options: &PipelineOptions,
    case_weights: Option<&[f64]>,
) -> Result<[f64; DIM]> {
    if records.is_empty() {
        return Err(Error::EmptySubjects);
    }
    if !records.iter().any(|r| r.initiation_bin().is_some()) {
        return Err(Error::Identification("no initiations".into()));
    }
    let bins = records[0].treatment.len();
    let edges = bin_edges(study.tau, bins);
    let probabilities =
        pooled_treatment_model(records, &edges, &study.treatment, case_weights, options)?;
    let weights: Vec<f64> = records
        .iter()
        .enumerate()
        .map(|(i, r)| r.weight * case_weights.map_or(1.0, |c| c[i]))
        .collect();
    let n_total = case_weights.map_or(records.len() as f64, |c| c.iter().sum());
    let stacked = stack_discrete(records, study, &probabilities, &weights, n_total)?;
    Ok(stacked.solve_two_stage(options, false, None)?.cont1)
}

/// Fits the censoring model on the continuous data (if anyone is censored),
/// attaches the weights to the binned records and runs the g-estimator.
pub fn estimate_discrete(
    subjects: &[SubjectRecord],
    records: &[DiscreteRecord],
    study: &StudyConfig,
    options: &PipelineOptions,
    case_weights: Option<&[f64]>,
) -> Result<[f64; DIM]> {
    let (weights, _, _) = observation_weights(subjects, study, case_weights, options)?;
    let records: Vec<DiscreteRecord> = records
        .iter()
        .zip(&weights)
        .enumerate()
        .map(|(i, (r, &w))| {
            let cw = case_weights.map_or(1.0, |c| c[i]);
            DiscreteRecord {
                // observation weights already include the case weight
                weight: if cw > 0.0 { w / cw } else { 0.0 },
                ..r.clone()
            }
        })
        .collect();
    g_estimate_discrete(&records, study, options, case_weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Trajectory;

    fn subject(visits: &[f64], vals: &[f64], t: f64) -> SubjectRecord {
        let traj = Trajectory::new(
            visits.to_vec(),
            vals.iter().map(|&v| vec![v]).collect(),
            vec![1.0],
        )
        .unwrap();
        SubjectRecord::new("s", traj, t, f64::INFINITY, 2.0, Some(1.0)).unwrap()
    }

    #[test]
    fn ceiling_to_bin_edge() {
        let s = subject(&[0.0, 0.7], &[1.0, 1.0], 0.7);
        let r = &discretize(&[s], 2.0, 24).unwrap()[0];
        assert!((r.t_disc - 9.0 / 12.0).abs() < 1e-12);
        assert_eq!(r.initiation_bin(), Some(8));
        assert!(r.treatment.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn never_treated() {
        let s = subject(&[0.0, 1.0], &[1.0, 2.0], f64::INFINITY);
        let r = &discretize(&[s], 2.0, 24).unwrap()[0];
        assert!(r.treatment.iter().all(|&a| !a));
        assert!(r.t_disc.is_infinite());
    }

    #[test]
    fn one_visit_per_bin_at_bin_start() {
        let edges = bin_edges(2.0, 4);
        let vals = [0.3, -1.2, 2.5, 0.9];
        let s = subject(&edges[..4], &vals, f64::INFINITY);
        let r = &discretize(&[s], 2.0, 4).unwrap()[0];
        for m in 0..4 {
            assert!((r.covariates[m][0] - vals[m]).abs() < 1e-15);
        }
    }

    #[test]
    fn time_average_within_bin() {
        // value 1 on [0, 0.25), 3 afterwards; first bin [0, 0.5]
        let s = subject(&[0.0, 0.25], &[1.0, 3.0], f64::INFINITY);
        let r = &discretize(&[s], 2.0, 4).unwrap()[0];
        assert!((r.covariates[0][0] - 2.0).abs() < 1e-15);
        assert!((r.covariates[1][0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn idempotent_on_binned_trajectories() {
        let s = subject(&[0.0, 0.3, 1.1], &[1.0, -2.0, 0.5], 1.1);
        let first = discretize(&[s], 2.0, 8).unwrap().remove(0);
        let edges = bin_edges(2.0, 8);
        let mut times = edges[..8].to_vec();
        let mut vals: Vec<Vec<f64>> = first.covariates.clone();
        // initiation at the bin edge, as a visit
        let t = first.t_disc;
        let m = first.initiation_bin().unwrap() + 1;
        times.truncate(m + 1);
        vals.truncate(m + 1);
        let traj = Trajectory::new(times, vals, vec![1.0]).unwrap();
        let rebinned = SubjectRecord::new("s", traj, t, f64::INFINITY, 2.0, Some(1.0)).unwrap();
        let second = discretize(&[rebinned], 2.0, 8).unwrap().remove(0);
        assert_eq!(first.treatment, second.treatment);
        assert_eq!(first.t_disc, second.t_disc);
        for m in 0..=first.initiation_bin().unwrap() {
            assert!((first.covariates[m][0] - second.covariates[m][0]).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_bins() {
        assert!(discretize(&[], 2.0, 1).is_err());
    }
}
