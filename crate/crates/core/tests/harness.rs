use std::path::PathBuf;

use ctsnmm::harness::{self, ScenarioConfig, Setting};
use ctsnmm::snmm::EstimatorTag;

fn golden_config() -> ScenarioConfig {
    ScenarioConfig {
        mt_correct: false,
        kc_correct: false,
        bootstrap_b: 5,
        ..ScenarioConfig::new(Setting::Censoring, 200, 10, 20240611)
    }
}

fn report(config: &ScenarioConfig) -> (Vec<u8>, String) {
    let summary = harness::run_scenario(config).unwrap();
    let mut csv = Vec::new();
    let mut text = Vec::new();
    harness::emit_table(&[summary], &mut csv, &mut text).unwrap();
    (csv, String::from_utf8(text).unwrap())
}

/// Set `UPDATE_GOLDEN=1` to regenerate after an intentional numerical change.
#[test]
fn seeded_ten_replicate_run_matches_golden_file() {
    let path =
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/setting_ii_iv_10rep.csv");
    let (csv, _) = report(&golden_config());
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &csv).unwrap();
    }
    let golden = std::fs::read(&path).expect("golden file present");
    assert_eq!(
        String::from_utf8(csv).unwrap(),
        String::from_utf8(golden).unwrap()
    );
}

#[test]
fn repeated_runs_are_identical() {
    let config = ScenarioConfig {
        bootstrap_b: 4,
        ..ScenarioConfig::new(Setting::NoCensoring, 150, 6, 3)
    };
    let a = harness::run_replicates(&config).unwrap();
    let b = harness::run_replicates(&config).unwrap();
    assert_eq!(a, b);
    assert_eq!(report(&config), report(&config));
}

#[test]
fn thread_count_does_not_change_results() {
    let config = ScenarioConfig {
        bootstrap_b: 4,
        ..ScenarioConfig::new(Setting::Censoring, 150, 6, 9)
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| report(&config))
    };
    assert_eq!(run(1), run(8));
}

#[test]
fn replicate_results_do_not_depend_on_replicate_count() {
    let few = ScenarioConfig {
        bootstrap_b: 0,
        ..ScenarioConfig::new(Setting::NoCensoring, 150, 3, 4)
    };
    let many = ScenarioConfig {
        replicates: 5,
        ..few.clone()
    };
    let psi = |c: &ScenarioConfig| -> Vec<Vec<[f64; 2]>> {
        harness::run_replicates(c)
            .unwrap()
            .into_iter()
            .map(|r| r.outcome.unwrap().iter().map(|e| e.psi).collect())
            .collect()
    };
    assert_eq!(psi(&few)[..], psi(&many)[..3]);
}

#[test]
fn text_table_scales_csv_values() {
    let config = ScenarioConfig {
        bootstrap_b: 0,
        estimators: vec![EstimatorTag::Cont1],
        ..ScenarioConfig::new(Setting::NoCensoring, 150, 4, 12)
    };
    let summary = harness::run_scenario(&config).unwrap();
    let text = harness::format_summary_table(std::slice::from_ref(&summary));
    assert!(text.starts_with("# no bootstrap"));
    let line = text.lines().find(|l| l.starts_with("cont1")).unwrap();
    let fields: Vec<&str> = line.split_whitespace().collect();
    let bias: f64 = fields[1].parse().unwrap();
    assert!((bias - 100.0 * summary.rows[0].bias).abs() <= 0.05);
    assert!(text.contains("Setting I, scenario (i), n = 150: 4 replicates, 0 failed"));
}
