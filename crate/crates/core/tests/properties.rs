mod common;

use common::{dataset, direct_g, fit, rel_close, risk_rows, stacked};
use ctsnmm::cox::{self, log_partial_likelihood, martingale_increments, partial_likelihood_score};
use ctsnmm::data::{Process, SubjectRecord, Trajectory};
use ctsnmm::simgen::GenConfig;
use ctsnmm::snmm::{
    self, mimicking_outcome, solve_psi, stack_continuous, BlipSpec, EstimatingSystem, RowView, DIM,
};
use proptest::prelude::*;

fn config(seed: u64, n: usize, censored: bool) -> GenConfig {
    if censored {
        GenConfig::setting_ii(n, seed)
    } else {
        GenConfig::setting_i(n, seed)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn breslow_martingale_sums_vanish(seed in any::<u64>(), censored in any::<bool>()) {
        let cfg = config(seed, 60, censored);
        let subjects = dataset(&cfg, 0);
        let study = cfg.study();
        for process in [Process::Treatment, Process::Censoring] {
            let Ok(f) = fit(&subjects, &study, process) else { continue };
            let mut sums = vec![0.0; f.baseline.len()];
            for s in &subjects {
                for (u, dm) in martingale_increments(&f, s, study.recipe(process), process) {
                    let k = f.baseline.iter().position(|&(t, _)| t == u).unwrap();
                    sums[k] += dm;
                }
            }
            for s in sums {
                prop_assert!(s.abs() <= 1e-12, "sum {s}");
            }
        }
    }

    #[test]
    fn cox_score_vanishes_and_matches_finite_differences(
        seed in any::<u64>(),
        b0 in -1.0f64..1.0,
        b1 in -1.0f64..1.0,
    ) {
        let cfg = config(seed, 50, true);
        let subjects = dataset(&cfg, 0);
        let study = cfg.study();
        let rows = risk_rows(&subjects, &study, Process::Treatment);
        if let Ok(f) = fit(&subjects, &study, Process::Treatment) {
            if f.converged {
                let score = partial_likelihood_score(&rows, None, &f.coefficients).unwrap();
                prop_assert!(score.iter().all(|g| g.abs() <= 1e-8));
            }
        }
        let coef = [b0, b1];
        let score = partial_likelihood_score(&rows, None, &coef).unwrap();
        let h = 1e-5;
        for j in 0..2 {
            let mut up = coef;
            let mut down = coef;
            up[j] += h;
            down[j] -= h;
            let fd = (log_partial_likelihood(&rows, None, &up).unwrap()
                - log_partial_likelihood(&rows, None, &down).unwrap())
                / (2.0 * h);
            prop_assert!(rel_close(score[j], fd, 1e-6), "score {} fd {}", score[j], fd);
        }
    }

    #[test]
    fn cox_is_invariant_to_covariate_shift(seed in any::<u64>(), shift in -3.0f64..3.0) {
        let cfg = config(seed, 60, false);
        let subjects = dataset(&cfg, 0);
        let study = cfg.study();
        let rows = risk_rows(&subjects, &study, Process::Treatment);
        let shifted: Vec<_> = rows
            .iter()
            .cloned()
            .map(|mut r| {
                r.covariates[1] += shift;
                r
            })
            .collect();
        let names = vec!["L_TI".to_string(), "L_TD".to_string()];
        let (Ok(a), Ok(b)) = (
            cox::fit_cox(&rows, None, names.clone(), &Default::default()),
            cox::fit_cox(&shifted, None, names, &Default::default()),
        ) else {
            return Ok(());
        };
        prop_assume!(a.converged && b.converged);
        for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
            prop_assert!((x - y).abs() <= 1e-8);
        }
        let x = [1.0, 0.3];
        let xs = [1.0, 0.3 + shift];
        for (&(_, ma), &(_, mb)) in a.baseline.iter().zip(&b.baseline) {
            prop_assert!(rel_close(a.relative_risk(&x) * ma, b.relative_risk(&xs) * mb, 1e-10));
        }
    }

    #[test]
    fn linear_system_matches_direct_evaluation(
        seed in any::<u64>(),
        censored in any::<bool>(),
        psi in prop::array::uniform2(-20.0f64..20.0),
    ) {
        let cfg = config(seed, 80, censored);
        let subjects = dataset(&cfg, 0);
        let Some((sp, models)) = stacked(&subjects, &cfg) else { return Ok(()) };
        let outcome = sp.fit_outcome(&[15.0, -1.0]).ok();
        for m in [None, outcome.as_ref()] {
            let sys = sp.assemble(m, sp.preliminary_weight(&models));
            let via_system = sys.evaluate(&psi);
            let direct = direct_g(&subjects, &cfg, &models, m, &psi);
            for a in 0..DIM {
                prop_assert!(
                    rel_close(via_system[a], direct[a], 1e-10),
                    "{} vs {}", via_system[a], direct[a]
                );
            }
        }
    }

    #[test]
    fn estimate_is_invariant_to_weight_scale(
        seed in any::<u64>(),
        k in 0.1f64..10.0,
        m in prop::array::uniform4(-2.0f64..2.0),
    ) {
        let det = m[0] * m[3] - m[1] * m[2];
        prop_assume!(det.abs() > 0.1);
        let cfg = config(seed, 80, false);
        let subjects = dataset(&cfg, 0);
        let Some((sp, models)) = stacked(&subjects, &cfg) else { return Ok(()) };
        let base = sp.preliminary_weight(&models);
        let Ok(psi) = solve_psi(&sp.assemble(None, &base)) else { return Ok(()) };
        let scaled = solve_psi(&sp.assemble(None, |r: &RowView<'_>| base(r).map(|c| k * c))).unwrap();
        let mixed = solve_psi(&sp.assemble(None, |r: &RowView<'_>| {
            let c = base(r);
            [m[0] * c[0] + m[1] * c[1], m[2] * c[0] + m[3] * c[1]]
        }))
        .unwrap();
        for j in 0..DIM {
            prop_assert!(rel_close(psi[j], scaled[j], 1e-10));
            prop_assert!(rel_close(psi[j], mixed[j], 1e-9), "{} vs {}", psi[j], mixed[j]);
        }
    }

    #[test]
    fn constant_censoring_weights_do_not_change_estimates(seed in any::<u64>(), k in 1.0f64..20.0) {
        let cfg = config(seed, 80, false);
        let subjects = dataset(&cfg, 0);
        let study = cfg.study();
        let Ok(treatment) = fit(&subjects, &study, Process::Treatment) else { return Ok(()) };
        let n = subjects.len() as f64;
        let one = stack_continuous(&subjects, &study, &treatment, &vec![1.0; subjects.len()], n).unwrap();
        let heavy = stack_continuous(&subjects, &study, &treatment, &vec![k; subjects.len()], n).unwrap();
        let opts = Default::default();
        let (Ok(a), Ok(b)) = (one.solve_two_stage(&opts, true, None), heavy.solve_two_stage(&opts, true, None)) else {
            return Ok(());
        };
        for (x, y) in [(a.preliminary, b.preliminary), (a.cont1, b.cont1), (a.cont2, b.cont2)] {
            for j in 0..DIM {
                prop_assert!(rel_close(x[j], y[j], 1e-10), "{} vs {}", x[j], y[j]);
            }
        }
    }

    #[test]
    fn mimicking_outcome_identities(y in -50.0f64..50.0, t in 0.0f64..2.0, psi in prop::array::uniform2(-20.0f64..20.0)) {
        let blip = BlipSpec { tau: 2.0 };
        let traj = |last: f64| Trajectory::new(vec![0.0, last], vec![vec![0.0], vec![0.0]], vec![0.0]).unwrap();
        let untreated = SubjectRecord::new("a", traj(1.0), f64::INFINITY, f64::INFINITY, 2.0, Some(y)).unwrap();
        prop_assert_eq!(mimicking_outcome(&untreated, &psi, &blip).unwrap(), y);
        let treated = SubjectRecord::new("b", traj(t.max(1e-9)), t.max(1e-9), f64::INFINITY, 2.0, Some(y)).unwrap();
        prop_assert_eq!(mimicking_outcome(&treated, &[0.0, 0.0], &blip).unwrap(), y);
    }

    #[test]
    fn estimates_do_not_depend_on_subject_order(seed in any::<u64>()) {
        let cfg = config(seed, 80, true);
        let subjects = dataset(&cfg, 0);
        let study = cfg.study();
        let opts = Default::default();
        let Ok(a) = snmm::estimate_pipeline(&subjects, &study, &opts, None) else { return Ok(()) };
        let mut rev = subjects.clone();
        rev.reverse();
        let b = snmm::estimate_pipeline(&rev, &study, &opts, None).unwrap();
        for (x, y) in [(a.preliminary, b.preliminary), (a.cont1, b.cont1)] {
            for j in 0..DIM {
                prop_assert!(rel_close(x[j], y[j], 1e-8), "{} vs {}", x[j], y[j]);
            }
        }
    }
}

#[test]
fn empty_system_is_singular() {
    assert!(solve_psi(&EstimatingSystem::default()).is_err());
}

#[test]
fn fixed_seed_direct_evaluation() {
    let cfg = config(11, 120, true);
    let subjects = dataset(&cfg, 0);
    let (sp, models) = stacked(&subjects, &cfg).expect("fit succeeds");
    let outcome = sp.fit_outcome(&[15.0, -1.0]).unwrap();
    let psi = [3.0, -7.5];
    let sys = sp.assemble(Some(&outcome), sp.preliminary_weight(&models));
    let direct = direct_g(&subjects, &cfg, &models, Some(&outcome), &psi);
    let via = sys.evaluate(&psi);
    assert!(via.iter().all(|v| v.abs() > 1e-3));
    for a in 0..DIM {
        assert!(
            rel_close(via[a], direct[a], 1e-10),
            "{} vs {}",
            via[a],
            direct[a]
        );
    }
}
