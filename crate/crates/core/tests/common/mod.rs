#![allow(dead_code)]

use ctsnmm::cox::{self, martingale_increments, CoxFit};
use ctsnmm::data::{to_risk_rows, Process, RiskRow, StudyConfig, SubjectRecord};
use ctsnmm::rng::{StreamRng, DATASET};
use ctsnmm::simgen::{self, GenConfig};
use ctsnmm::snmm::{
    self, mimicking_outcome, stack_continuous, BlipSpec, CWeightModels, StackedProblem, DIM,
};

pub fn dataset(config: &GenConfig, replicate: u64) -> Vec<SubjectRecord> {
    let mut rng = StreamRng::new(config.seed, &[DATASET, replicate]);
    simgen::gen_dataset_with(config, &mut rng).unwrap()
}

pub fn risk_rows(
    subjects: &[SubjectRecord],
    study: &StudyConfig,
    process: Process,
) -> Vec<RiskRow> {
    to_risk_rows(subjects, process, study).unwrap()
}

pub fn fit(
    subjects: &[SubjectRecord],
    study: &StudyConfig,
    process: Process,
) -> ctsnmm::Result<CoxFit> {
    let rows = risk_rows(subjects, study, process);
    let names = study
        .recipe(process)
        .names(&study.ti_names, &study.td_names);
    cox::fit_cox(&rows, None, names, &Default::default())
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

pub fn stacked(
    subjects: &[SubjectRecord],
    config: &GenConfig,
) -> Option<(StackedProblem, CWeightModels)> {
    let study = config.study();
    let treatment = fit(subjects, &study, Process::Treatment).ok()?;
    if treatment.separated || !treatment.converged {
        return None;
    }
    let w: Vec<f64> = subjects
        .iter()
        .map(|s| f64::from(u8::from(s.uncensored)))
        .collect();
    let sp = stack_continuous(subjects, &study, &treatment, &w, subjects.len() as f64).ok()?;
    let models = sp.fit_c_models(&Default::default(), None).ok()?;
    Some((sp, models))
}

/// Direct evaluation of `Pₙ G(ψ)` subject by subject from the martingale
/// increments, without the linear decomposition.
pub fn direct_g(
    subjects: &[SubjectRecord],
    config: &GenConfig,
    models: &CWeightModels,
    outcome: Option<&ctsnmm::regression::LinearFit>,
    psi: &[f64; DIM],
) -> [f64; DIM] {
    let study = config.study();
    let treatment = fit(subjects, &study, Process::Treatment).unwrap();
    let blip = BlipSpec { tau: study.tau };
    let mut total = [0.0; DIM];
    for s in subjects.iter().filter(|s| s.uncensored) {
        let h = mimicking_outcome(s, psi, &blip).unwrap();
        for (u, dm) in martingale_increments(&treatment, s, &study.treatment, Process::Treatment) {
            if u > study.tau {
                continue;
            }
            let c = snmm::c_weight_preliminary(u, s, models, &study);
            let base = study.nuisance.features_at(s, u);
            let mut x = Vec::new();
            study.expansion.write_row(u, &base, &mut x);
            let m = outcome.map_or(0.0, |f| f.predict(&x));
            for a in 0..DIM {
                total[a] += c[a] * (h - m) * dm;
            }
        }
    }
    total.map(|v| v / subjects.len() as f64)
}
