//! Monte Carlo scenario runner and summary tables.

use std::fmt::Write as _;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureRecipe, StudyConfig, SubjectRecord};
use crate::discrete::{self, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::simgen::{self, GenConfig};
use crate::snmm::{
    self, CWeightModels, EstimatorTag, PipelineFit, PipelineOptions, PsiEstimate, DIM,
    PARAMETER_NAMES,
};

/// Bootstrap size of the full simulation protocol.
pub const FULL_BOOTSTRAP: usize = 100;
/// Replicates per scenario in the full simulation protocol.
pub const FULL_REPLICATES: usize = 1000;
const MISSING: &str = "NA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    NoCensoring,
    Censoring,
}

fn yes() -> bool {
    true
}

fn default_bootstrap() -> usize {
    FULL_BOOTSTRAP
}

fn default_estimators() -> Vec<EstimatorTag> {
    EstimatorTag::ALL.to_vec()
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub setting: Setting,
    pub n: usize,
    pub replicates: usize,
    #[serde(default = "yes")]
    pub mt_correct: bool,
    #[serde(default = "yes")]
    pub kc_correct: bool,
    #[serde(default = "yes")]
    pub outcome_model_correct: bool,
    /// Bootstrap resamples per replicate; 0 skips intervals and coverage.
    #[serde(default = "default_bootstrap")]
    pub bootstrap_b: usize,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorTag>,
    /// Estimators that get bootstrap intervals; defaults to all of them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval_estimators: Option<Vec<EstimatorTag>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

impl ScenarioConfig {
    pub fn new(setting: Setting, n: usize, replicates: usize, seed: u64) -> Self {
        Self {
            label: None,
            setting,
            n,
            replicates,
            mt_correct: true,
            kc_correct: true,
            outcome_model_correct: true,
            bootstrap_b: FULL_BOOTSTRAP,
            estimators: default_estimators(),
            interval_estimators: None,
            seed,
            bins: DEFAULT_BINS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.replicates == 0 {
            return bad("replicates must be >= 1");
        }
        if self.n < 2 {
            return bad("n must be >= 2");
        }
        if self.bootstrap_b == 1 {
            return bad("bootstrap_b must be 0 or >= 2");
        }
        if self.bins < 2 {
            return bad("bins must be >= 2");
        }
        if let Some(iv) = &self.interval_estimators {
            if iv.iter().any(|t| !self.estimators.contains(t)) {
                return bad("interval_estimators must be a subset of estimators");
            }
        }
        Ok(())
    }

    /// Scenario name, e.g. "Setting II, scenario (iii)".
    pub fn scenario_label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let (setting, scenario) = match self.setting {
            Setting::NoCensoring => ("I", if self.mt_correct { "i" } else { "ii" }),
            Setting::Censoring => (
                "II",
                match (self.mt_correct, self.kc_correct) {
                    (true, true) => "i",
                    (false, true) => "ii",
                    (true, false) => "iii",
                    (false, false) => "iv",
                },
            ),
        };
        let mut s = format!("Setting {setting}, scenario ({scenario})");
        if !self.outcome_model_correct {
            s.push_str(", outcome model misspecified");
        }
        s
    }

    pub fn generator(&self) -> GenConfig {
        match self.setting {
            Setting::NoCensoring => GenConfig::setting_i(self.n, self.seed),
            Setting::Censoring => GenConfig::setting_ii(self.n, self.seed),
        }
    }

    /// Study configuration with the treatment and censoring models reduced
    /// according to the misspecification switches.
    pub fn study(&self, gen: &GenConfig) -> StudyConfig {
        let mut study = gen.study();
        let n_ti = study.ti_names.len();
        if !self.mt_correct {
            study.treatment = FeatureRecipe::time_independent_only(n_ti);
        }
        if !self.kc_correct {
            study.censoring = FeatureRecipe::none();
        }
        study
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            outcome_model: self.outcome_model_correct,
            ..PipelineOptions::default()
        }
    }

    pub fn interval_set(&self) -> Vec<EstimatorTag> {
        if self.bootstrap_b == 0 {
            return Vec::new();
        }
        self.interval_estimators
            .clone()
            .unwrap_or_else(|| self.estimators.clone())
    }

    /// The full protocol: 1000 replicates and 100 bootstrap resamples.
    pub fn full_protocol(mut self) -> Self {
        self.replicates = FULL_REPLICATES;
        self.bootstrap_b = FULL_BOOTSTRAP;
        self.interval_estimators = None;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub index: usize,
    pub outcome: std::result::Result<Vec<PsiEstimate>, String>,
}

struct Estimator<'a> {
    subjects: &'a [SubjectRecord],
    records: Option<Vec<discrete::DiscreteRecord>>,
    study: &'a StudyConfig,
    options: &'a PipelineOptions,
}

impl Estimator<'_> {
    fn run(
        &self,
        tags: &[EstimatorTag],
        case_weights: Option<&[f64]>,
        warm: Option<&CWeightModels>,
    ) -> Result<(Vec<[f64; DIM]>, Option<PipelineFit>)> {
        let continuous = tags.iter().any(|t| *t != EstimatorTag::DiscreteG);
        let fit = if continuous {
            let efficient = tags.contains(&EstimatorTag::Cont2);
            Some(snmm::estimate_pipeline_with(
                self.subjects,
                self.study,
                self.options,
                case_weights,
                efficient,
                warm,
            )?)
        } else {
            None
        };
        let disc = match &self.records {
            Some(r) if tags.contains(&EstimatorTag::DiscreteG) => {
                Some(discrete::estimate_discrete(
                    self.subjects,
                    r,
                    self.study,
                    self.options,
                    case_weights,
                )?)
            }
            _ => None,
        };
        let values = tags
            .iter()
            .map(|&t| match t {
                EstimatorTag::DiscreteG => disc.expect("computed above"),
                other => fit
                    .as_ref()
                    .and_then(|f| f.get(other))
                    .expect("computed above"),
            })
            .collect();
        Ok((values, fit))
    }
}

/// What [`analyze`] computes and how.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisPlan {
    pub estimators: Vec<EstimatorTag>,
    /// Subset of `estimators` that get bootstrap intervals.
    pub intervals: Vec<EstimatorTag>,
    pub bootstrap_b: usize,
    pub bins: usize,
    pub seed: u64,
    /// Selects the bootstrap streams `[BOOTSTRAP, replicate, b]`.
    pub replicate: u64,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    /// One entry per requested estimator, in request order.
    pub estimates: Vec<PsiEstimate>,
    /// The continuous-time fit on the full data, when any continuous
    /// estimator was requested.
    pub fit: Option<PipelineFit>,
}

/// Point estimates for every requested estimator plus bootstrap Wald
/// intervals for those in `plan.intervals`.
pub fn analyze(
    subjects: &[SubjectRecord],
    study: &StudyConfig,
    options: &PipelineOptions,
    plan: &AnalysisPlan,
) -> Result<Analysis> {
    if plan.estimators.is_empty() {
        return Ok(Analysis {
            estimates: Vec::new(),
            fit: None,
        });
    }
    let records = if plan.estimators.contains(&EstimatorTag::DiscreteG) {
        Some(discrete::discretize(subjects, study.tau, plan.bins)?)
    } else {
        None
    };
    let est = Estimator {
        subjects,
        records,
        study,
        options,
    };
    let (points, fit) = est.run(&plan.estimators, None, None)?;
    let intervals = if plan.bootstrap_b == 0 {
        &[][..]
    } else {
        &plan.intervals[..]
    };
    let draws = if intervals.is_empty() {
        None
    } else {
        let warm = fit.as_ref().map(|f| &f.c_models);
        Some(snmm::bootstrap(
            subjects.len(),
            plan.bootstrap_b,
            plan.seed,
            plan.replicate,
            |w| est.run(intervals, Some(w), warm).map(|(v, _)| v),
        )?)
    };
    let estimates = plan
        .estimators
        .iter()
        .zip(points)
        .map(
            |(&t, p)| match (&draws, intervals.iter().position(|&i| i == t)) {
                (Some(d), Some(k)) => PsiEstimate::new(t, p, d.covariance(k), d.draws.len()),
                _ => PsiEstimate::point(t, p),
            },
        )
        .collect();
    Ok(Analysis { estimates, fit })
}

/// Generates replicate `index` and runs the configured estimators, with
/// bootstrap intervals where requested.
pub fn run_replicate(config: &ScenarioConfig, index: usize) -> Result<Vec<PsiEstimate>> {
    if config.estimators.is_empty() {
        return Ok(Vec::new());
    }
    let gen = config.generator();
    let mut rng = StreamRng::new(config.seed, &[rng::DATASET, index as u64]);
    let subjects = simgen::gen_dataset_with(&gen, &mut rng)?;
    let plan = AnalysisPlan {
        estimators: config.estimators.clone(),
        intervals: config.interval_set(),
        bootstrap_b: config.bootstrap_b,
        bins: config.bins,
        seed: config.seed,
        replicate: index as u64,
    };
    Ok(analyze(
        &subjects,
        &config.study(&gen),
        &config.pipeline_options(),
        &plan,
    )?
    .estimates)
}

/// Runs every replicate in parallel; results are returned in index order.
pub fn run_replicates(config: &ScenarioConfig) -> Result<Vec<ReplicateResult>> {
    config.validate()?;
    Ok((0..config.replicates)
        .into_par_iter()
        .map(|index| ReplicateResult {
            index,
            outcome: run_replicate(config, index).map_err(|e| e.to_string()),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub estimator: EstimatorTag,
    pub parameter: usize,
    pub bias: f64,
    pub mc_se: Option<f64>,
    pub rmse: Option<f64>,
    pub coverage: Option<f64>,
    pub coverage_mc_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub label: String,
    pub n: usize,
    pub replicates: usize,
    pub failure_count: usize,
    pub bootstrap_b: usize,
    pub rows: Vec<MetricRow>,
}

impl McSummary {
    /// More than 5% of replicates failed.
    pub fn flagged(&self) -> bool {
        self.failure_count * 20 > self.replicates
    }

    pub fn row(&self, estimator: EstimatorTag, parameter: usize) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.parameter == parameter)
    }
}

/// Aggregates replicate results in index order. `mc_se` is the sample
/// standard deviation over successful replicates.
pub fn summarize(config: &ScenarioConfig, results: &[ReplicateResult]) -> Result<McSummary> {
    let truth = config.generator().psi;
    let mut ordered: Vec<&ReplicateResult> = results.iter().collect();
    ordered.sort_by_key(|r| r.index);
    let ok: Vec<&Vec<PsiEstimate>> = ordered
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok())
        .collect();
    let failure_count = ordered.len() - ok.len();
    if ok.is_empty() {
        return Err(Error::AllReplicatesFailed(failure_count));
    }
    let m = ok.len() as f64;
    let mut rows = Vec::new();
    for (k, &estimator) in config.estimators.iter().enumerate() {
        for j in 0..DIM {
            let values: Vec<f64> = ok.iter().map(|e| e[k].psi[j]).collect();
            let mean = values.iter().sum::<f64>() / m;
            let bias = mean - truth[j];
            let mc_se = (ok.len() > 1).then(|| {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
            });
            let rmse = mc_se.map(|s| (bias * bias + s * s).sqrt());
            let with_ci: Vec<bool> = ok
                .iter()
                .filter(|e| e[k].n_bootstrap > 0)
                .map(|e| e[k].covers(&truth)[j])
                .collect();
            let (coverage, coverage_mc_error) = if with_ci.is_empty() {
                (None, None)
            } else {
                let p = with_ci.iter().filter(|&&c| c).count() as f64 / with_ci.len() as f64;
                (Some(p), Some((p * (1.0 - p) / with_ci.len() as f64).sqrt()))
            };
            rows.push(MetricRow {
                estimator,
                parameter: j,
                bias,
                mc_se,
                rmse,
                coverage,
                coverage_mc_error,
            });
        }
    }
    Ok(McSummary {
        label: config.scenario_label(),
        n: config.n,
        replicates: ordered.len(),
        failure_count,
        bootstrap_b: config.bootstrap_b,
        rows,
    })
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<McSummary> {
    summarize(config, &run_replicates(config)?)
}

const CSV_HEADER: [&str; 13] = [
    "scenario",
    "n",
    "replicates",
    "failures",
    "bootstrap_b",
    "estimator",
    "parameter",
    "bias",
    "mc_se",
    "rmse",
    "coverage",
    "coverage_mc_error",
    "flagged",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |x| format!("{x}"))
}

/// Summary rows at full precision, unscaled.
pub fn write_summary_csv<W: Write>(summaries: &[McSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for s in summaries {
        for r in &s.rows {
            w.write_record([
                s.label.clone(),
                s.n.to_string(),
                s.replicates.to_string(),
                s.failure_count.to_string(),
                s.bootstrap_b.to_string(),
                r.estimator.label().to_string(),
                PARAMETER_NAMES[r.parameter].to_string(),
                format!("{}", r.bias),
                opt(r.mc_se),
                opt(r.rmse),
                opt(r.coverage),
                opt(r.coverage_mc_error),
                u8::from(s.flagged()).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses a file written by [`write_summary_csv`].
pub fn read_summary_csv<R: Read>(input: R) -> Result<Vec<McSummary>> {
    let mut rdr = csv::Reader::from_reader(input);
    if rdr.headers()?.iter().ne(CSV_HEADER) {
        return Err(Error::Schema(format!(
            "summary header must be {}",
            CSV_HEADER.join(",")
        )));
    }
    let schema = |m: String| Error::Schema(m);
    let int = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| schema(format!("'{s}' is not an integer")))
    };
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| schema(format!("'{s}' is not a number")))
    };
    let opt_num = |s: &str| {
        if s == MISSING {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    let mut out: Vec<McSummary> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let estimator = EstimatorTag::parse(&rec[5])
            .ok_or_else(|| schema(format!("unknown estimator '{}'", &rec[5])))?;
        let parameter = PARAMETER_NAMES
            .iter()
            .position(|p| *p == &rec[6])
            .ok_or_else(|| schema(format!("unknown parameter '{}'", &rec[6])))?;
        let head = McSummary {
            label: rec[0].to_string(),
            n: int(&rec[1])?,
            replicates: int(&rec[2])?,
            failure_count: int(&rec[3])?,
            bootstrap_b: int(&rec[4])?,
            rows: Vec::new(),
        };
        let row = MetricRow {
            estimator,
            parameter,
            bias: num(&rec[7])?,
            mc_se: opt_num(&rec[8])?,
            rmse: opt_num(&rec[9])?,
            coverage: opt_num(&rec[10])?,
            coverage_mc_error: opt_num(&rec[11])?,
        };
        match out.last_mut() {
            Some(last)
                if last.label == head.label
                    && last.n == head.n
                    && last.replicates == head.replicates
                    && last.failure_count == head.failure_count
                    && last.bootstrap_b == head.bootstrap_b =>
            {
                last.rows.push(row)
            }
            _ => out.push(McSummary {
                rows: vec![row],
                ..head
            }),
        }
    }
    Ok(out)
}

fn scaled(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |x| format!("{:.1}", 100.0 * x))
}

/// Aligned text table, values ×10², one block per scenario in input order.
pub fn format_summary_table(summaries: &[McSummary]) -> String {
    let mut s = String::new();
    let reduced: Vec<usize> = {
        let mut b: Vec<usize> = summaries
            .iter()
            .map(|x| x.bootstrap_b)
            .filter(|&b| b < FULL_BOOTSTRAP)
            .collect();
        b.sort_unstable();
        b.dedup();
        b
    };
    for b in reduced {
        if b == 0 {
            let _ = writeln!(s, "# no bootstrap: coverage not computed");
        } else {
            let _ = writeln!(s, "# reduced bootstrap: B = {b} resamples per replicate (full protocol: {FULL_BOOTSTRAP})");
        }
    }
    let _ = writeln!(
        s,
        "{:<8} {:>15} {:>15} {:>15} {:>15}",
        "", "Bias (x10^2)", "SE (x10^2)", "rMSE (x10^2)", "CR (x10^2)"
    );
    let mut cols = format!("{:<8}", "Method");
    for _ in 0..4 {
        let _ = write!(cols, " {:>7} {:>7}", "psi1", "psi2");
    }
    let _ = writeln!(s, "{}", cols.trim_end());
    for sum in summaries {
        let _ = write!(
            s,
            "{}, n = {}: {} replicates, {} failed",
            sum.label, sum.n, sum.replicates, sum.failure_count
        );
        if sum.flagged() {
            s.push_str(" [FLAGGED: more than 5% failed]");
        }
        s.push('\n');
        let mut estimators: Vec<EstimatorTag> = sum.rows.iter().map(|r| r.estimator).collect();
        estimators.dedup();
        for e in estimators {
            let get =
                |j: usize, f: fn(&MetricRow) -> Option<f64>| scaled(sum.row(e, j).and_then(f));
            let mut line = format!("{:<8}", e.label());
            for f in [
                (|r: &MetricRow| Some(r.bias)) as fn(&MetricRow) -> Option<f64>,
                |r| r.mc_se,
                |r| r.rmse,
                |r| r.coverage,
            ] {
                let _ = write!(line, " {:>7} {:>7}", get(0, f), get(1, f));
            }
            let _ = writeln!(s, "{line}");
        }
    }
    s
}

/// Writes the CSV and text forms of the summaries.
pub fn emit_table<W1: Write, W2: Write>(
    summaries: &[McSummary],
    csv_out: W1,
    mut text_out: W2,
) -> Result<()> {
    write_summary_csv(summaries, csv_out)?;
    text_out.write_all(format_summary_table(summaries).as_bytes())?;
    text_out.flush()?;
    Ok(())
}

/// Per-replicate estimates of one scenario.
pub fn write_replicates_csv<W: Write>(results: &[ReplicateResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "replicate",
        "estimator",
        "parameter",
        "estimate",
        "se",
        "ci_lower",
        "ci_upper",
        "error",
    ])?;
    for r in results {
        match &r.outcome {
            Ok(estimates) => {
                for e in estimates {
                    let se = e.se();
                    for j in 0..DIM {
                        let ci = |v: f64| {
                            if e.n_bootstrap > 0 {
                                format!("{v}")
                            } else {
                                MISSING.to_string()
                            }
                        };
                        w.write_record([
                            r.index.to_string(),
                            e.estimator.label().to_string(),
                            PARAMETER_NAMES[j].to_string(),
                            format!("{}", e.psi[j]),
                            ci(se[j]),
                            ci(e.ci_lower[j]),
                            ci(e.ci_upper[j]),
                            String::new(),
                        ])?;
                    }
                }
            }
            Err(msg) => {
                w.write_record([&r.index.to_string(), "", "", "", "", "", "", msg.as_str()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            bootstrap_b: 0,
            estimators: vec![EstimatorTag::Preliminary, EstimatorTag::Cont1],
            ..ScenarioConfig::new(Setting::NoCensoring, 150, 3, 5)
        }
    }

    #[test]
    fn labels_follow_switches() {
        let mut c = ScenarioConfig::new(Setting::Censoring, 10, 1, 0);
        c.mt_correct = false;
        c.kc_correct = false;
        assert_eq!(c.scenario_label(), "Setting II, scenario (iv)");
        c.setting = Setting::NoCensoring;
        assert_eq!(c.scenario_label(), "Setting I, scenario (ii)");
    }

    #[test]
    fn switches_reduce_models() {
        let mut c = ScenarioConfig::new(Setting::Censoring, 10, 1, 0);
        c.mt_correct = false;
        c.kc_correct = false;
        let study = c.study(&c.generator());
        assert_eq!(study.treatment, FeatureRecipe::time_independent_only(1));
        assert!(study.censoring.is_empty());
        assert_eq!(study.nuisance, FeatureRecipe::all(1, 1));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<ScenarioConfig>(
            r#"{"setting":"censoring","n":10,"replicates":1,"bootstrap":5}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("bootstrap"));
        let c: ScenarioConfig = serde_json::from_str(
            r#"{"setting":"no_censoring","n":10,"replicates":2,"estimators":["p","disc_g"]}"#,
        )
        .unwrap();
        assert_eq!(
            c.estimators,
            vec![EstimatorTag::Preliminary, EstimatorTag::DiscreteG]
        );
        assert_eq!(c.bootstrap_b, FULL_BOOTSTRAP);
    }

    #[test]
    fn single_replicate_has_missing_se() {
        let c = ScenarioConfig {
            replicates: 1,
            ..small()
        };
        let s = run_scenario(&c).unwrap();
        assert!(s.rows.iter().all(|r| r.mc_se.is_none() && r.rmse.is_none()));
        assert!(format_summary_table(&[s]).contains("NA"));
    }

    #[test]
    fn rmse_identity_and_round_trip() {
        let s = run_scenario(&small()).unwrap();
        for r in &s.rows {
            let (se, rmse) = (r.mc_se.unwrap(), r.rmse.unwrap());
            assert!((rmse * rmse - (r.bias * r.bias + se * se)).abs() <= 1e-10);
        }
        let mut buf = Vec::new();
        write_summary_csv(&[s.clone(), s.clone()], &mut buf).unwrap();
        let back = read_summary_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), 1, "identical consecutive scenarios merge");
        let mut other = s.clone();
        other.label = "other".into();
        let mut buf = Vec::new();
        write_summary_csv(&[s.clone(), other.clone()], &mut buf).unwrap();
        assert_eq!(read_summary_csv(&buf[..]).unwrap(), vec![s, other]);
    }

    #[test]
    fn empty_estimator_set_gives_header_only() {
        let c = ScenarioConfig {
            estimators: Vec::new(),
            ..small()
        };
        let s = run_scenario(&c).unwrap();
        assert!(s.rows.is_empty());
        let mut buf = Vec::new();
        write_summary_csv(&[s], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1);
    }

    #[test]
    fn all_failed_is_an_error() {
        let c = small();
        let results: Vec<ReplicateResult> = (0..3)
            .map(|index| ReplicateResult {
                index,
                outcome: Err("boom".into()),
            })
            .collect();
        assert!(matches!(
            summarize(&c, &results),
            Err(Error::AllReplicatesFailed(3))
        ));
    }

    #[test]
    fn failures_flag_scenario() {
        let c = small();
        let mut results = run_replicates(&c).unwrap();
        results[1].outcome = Err("singular".into());
        let s = summarize(&c, &results).unwrap();
        assert_eq!(s.failure_count, 1);
        assert!(s.flagged());
        assert!(format_summary_table(&[s]).contains("FLAGGED"));
    }
}
