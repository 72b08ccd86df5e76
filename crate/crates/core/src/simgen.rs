//! Synthetic datasets following the two-setting simulation design.
//!
//! Each subject gets a Bernoulli time-independent covariate and an AR(1)-
//! correlated Gaussian covariate that is constant on four equal sub-intervals
//! of `[0, τ]`. Treatment initiation (and, optionally, censoring) follows a
//! time-dependent proportional hazards model, generated interval by interval.
//! Draw order per subject is fixed: one uniform for the binary covariate, four
//! normals, the initiation-time uniforms, then the censoring-time uniforms.

use serde::{Deserialize, Serialize};

use crate::data::{StudyConfig, SubjectRecord, Trajectory};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, StreamRng};
use crate::snmm::BlipSpec;

pub const KNOTS: usize = 4;

fn default_tau() -> f64 {
    2.0
}
fn default_lambda_t0() -> f64 {
    0.4
}
fn default_alpha() -> [f64; 2] {
    [0.15, 0.8]
}
fn default_psi() -> [f64; 2] {
    [15.0, -1.0]
}
fn default_bernoulli_p() -> f64 {
    0.55
}
fn default_ar_rho() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CensoringConfig {
    #[serde(default = "CensoringConfig::default_lambda")]
    pub lambda_c0: f64,
    #[serde(default = "CensoringConfig::default_eta")]
    pub eta: [f64; 2],
}

impl CensoringConfig {
    fn default_lambda() -> f64 {
        0.2
    }
    fn default_eta() -> [f64; 2] {
        [0.2, 0.2]
    }
}

impl Default for CensoringConfig {
    fn default() -> Self {
        Self {
            lambda_c0: Self::default_lambda(),
            eta: Self::default_eta(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_lambda_t0")]
    pub lambda_t0: f64,
    #[serde(default = "default_alpha")]
    pub alpha: [f64; 2],
    #[serde(default = "default_psi")]
    pub psi: [f64; 2],
    #[serde(default = "default_bernoulli_p")]
    pub bernoulli_p: f64,
    #[serde(default = "default_ar_rho")]
    pub ar_rho: f64,
    #[serde(default)]
    pub censoring: Option<CensoringConfig>,
    #[serde(default)]
    pub seed: u64,
}

impl GenConfig {
    /// No censoring.
    pub fn setting_i(n: usize, seed: u64) -> Self {
        Self {
            n,
            tau: default_tau(),
            lambda_t0: default_lambda_t0(),
            alpha: default_alpha(),
            psi: default_psi(),
            bernoulli_p: default_bernoulli_p(),
            ar_rho: default_ar_rho(),
            censoring: None,
            seed,
        }
    }

    /// Covariate-dependent censoring.
    pub fn setting_ii(n: usize, seed: u64) -> Self {
        Self {
            censoring: Some(CensoringConfig::default()),
            ..Self::setting_i(n, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("generator: {what}")));
        if self.n == 0 {
            return bad("n must be >= 1");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if self.lambda_t0 <= 0.0 {
            return bad("lambda_t0 must be positive");
        }
        if !(0.0..=1.0).contains(&self.bernoulli_p) {
            return bad("bernoulli_p must lie in [0, 1]");
        }
        if !(self.ar_rho.abs() < 1.0) {
            return bad("ar_rho must lie in (-1, 1)");
        }
        if let Some(c) = &self.censoring {
            if c.lambda_c0 <= 0.0 {
                return bad("lambda_c0 must be positive");
            }
        }
        Ok(())
    }

    pub fn knots(&self) -> [f64; KNOTS] {
        std::array::from_fn(|k| k as f64 * self.tau / KNOTS as f64)
    }

    pub fn blip(&self) -> BlipSpec {
        BlipSpec { tau: self.tau }
    }

    /// Study configuration matching the generated covariates, with the
    /// correctly specified models everywhere.
    pub fn study(&self) -> StudyConfig {
        StudyConfig::full(self.tau, vec!["L_TI".into()], vec!["L_TD".into()])
            .expect("validated tau")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovariateDraw {
    pub l_ti: f64,
    /// Values on the four sub-intervals of `[0, τ]`.
    pub l_td: [f64; KNOTS],
}

/// Lower Cholesky factor of `Σ_ij = ρ^|i−j|`.
pub fn ar_cholesky(rho: f64) -> [f64; KNOTS * KNOTS] {
    let mut sigma = [0.0; KNOTS * KNOTS];
    for i in 0..KNOTS {
        for j in 0..KNOTS {
            sigma[i * KNOTS + j] = rho.powi((i as i32 - j as i32).abs());
        }
    }
    let l = linalg::cholesky(&sigma, KNOTS, 0.0).expect("AR(1) covariance is positive definite");
    std::array::from_fn(|k| l[k])
}

pub fn gen_covariates(
    config: &GenConfig,
    chol: &[f64; KNOTS * KNOTS],
    rng: &mut StreamRng,
) -> CovariateDraw {
    let l_ti = f64::from(u8::from(rng.uniform() < config.bernoulli_p));
    let z: [f64; KNOTS] = std::array::from_fn(|_| rng.normal());
    let l_td = std::array::from_fn(|i| (0..=i).map(|k| chol[i * KNOTS + k] * z[k]).sum());
    CovariateDraw { l_ti, l_td }
}

/// Hazard that is constant on `[starts[k], starts[k+1])`, the last piece
/// ending at `end` (which may be infinite).
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseHazard {
    pub starts: Vec<f64>,
    pub rates: Vec<f64>,
    pub end: f64,
}

impl PiecewiseHazard {
    pub fn constant(rate: f64) -> Self {
        Self {
            starts: vec![0.0],
            rates: vec![rate],
            end: f64::INFINITY,
        }
    }

    pub fn survival(&self, t: f64) -> f64 {
        let mut h = 0.0;
        for (k, (&s, &r)) in self.starts.iter().zip(&self.rates).enumerate() {
            let e = self.starts.get(k + 1).copied().unwrap_or(self.end);
            if t <= s {
                break;
            }
            h += r * (t.min(e) - s);
        }
        (-h).exp()
    }
}

/// Sequential inversion: a fresh exponential draw per piece, accepted if it
/// falls inside the piece. Returns infinity when no event occurs before `end`.
pub fn gen_event_time(hazard: &PiecewiseHazard, rng: &mut StreamRng) -> f64 {
    for (k, (&start, &rate)) in hazard.starts.iter().zip(&hazard.rates).enumerate() {
        let stop = hazard.starts.get(k + 1).copied().unwrap_or(hazard.end);
        let temp = rng.exponential(rate);
        if temp < stop - start {
            return start + temp;
        }
    }
    f64::INFINITY
}

/// A generated subject before observation by censoring, kept for oracles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentSubject {
    pub covariates: CovariateDraw,
    pub treatment_time: f64,
    pub censor_time: f64,
    /// Outcome had treatment never been initiated.
    pub untreated_outcome: f64,
}

pub fn gen_latent(config: &GenConfig, rng: &mut StreamRng) -> Vec<LatentSubject> {
    let chol = ar_cholesky(config.ar_rho);
    let knots = config.knots();
    (0..config.n)
        .map(|_| {
            let cov = gen_covariates(config, &chol, rng);
            let hazard = |base: f64, coef: [f64; 2]| PiecewiseHazard {
                starts: knots.to_vec(),
                rates: cov
                    .l_td
                    .iter()
                    .map(|&l| base * (coef[0] * cov.l_ti + coef[1] * l).exp())
                    .collect(),
                end: config.tau,
            };
            let t = gen_event_time(&hazard(config.lambda_t0, config.alpha), rng);
            let c = match &config.censoring {
                Some(cc) => gen_event_time(&hazard(cc.lambda_c0, cc.eta), rng),
                None => f64::INFINITY,
            };
            LatentSubject {
                covariates: cov,
                treatment_time: t,
                censor_time: c,
                untreated_outcome: cov.l_td[KNOTS - 1],
            }
        })
        .collect()
}

/// Reduces latent subjects to what is observed.
pub fn observe(config: &GenConfig, latent: &[LatentSubject]) -> Result<Vec<SubjectRecord>> {
    let knots = config.knots();
    let blip = config.blip();
    latent
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let x = s.censor_time.min(config.tau);
            let mut visits: Vec<(f64, f64)> = knots
                .iter()
                .zip(s.covariates.l_td)
                .filter(|(&t, _)| t <= x)
                .map(|(&t, l)| (t, l))
                .collect();
            let t = s.treatment_time;
            if t <= x && !knots.contains(&t) {
                let piece = knots.partition_point(|&k| k <= t) - 1;
                visits.push((t, s.covariates.l_td[piece]));
                visits.sort_by(|a, b| a.0.total_cmp(&b.0));
            }
            let (times, values): (Vec<f64>, Vec<Vec<f64>>) =
                visits.into_iter().map(|(t, l)| (t, vec![l])).unzip();
            let traj = Trajectory::new(times, values, vec![s.covariates.l_ti])?;
            let uncensored = s.censor_time >= config.tau;
            let outcome = uncensored.then(|| {
                let effect = if t <= config.tau {
                    blip.blip(t, &config.psi)
                } else {
                    0.0
                };
                s.untreated_outcome + effect
            });
            SubjectRecord::new(
                (i + 1).to_string(),
                traj,
                t,
                s.censor_time,
                config.tau,
                outcome,
            )
        })
        .collect()
}

pub fn gen_dataset_with(config: &GenConfig, rng: &mut StreamRng) -> Result<Vec<SubjectRecord>> {
    config.validate()?;
    observe(config, &gen_latent(config, rng))
}

/// Dataset from the configured seed, replicate stream 0.
pub fn gen_dataset(config: &GenConfig) -> Result<Vec<SubjectRecord>> {
    gen_dataset_with(config, &mut StreamRng::new(config.seed, &[rng::DATASET, 0]))
}
