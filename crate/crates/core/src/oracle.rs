//! Brute-force reference implementations used to check the closed form.
//!
//! Nothing here calls into the threshold/sort machinery of
//! [`crate::simplex`]: the QP oracle enumerates every support directly and the
//! finite-difference Jacobian only evaluates whatever projection it is handed.

// `!(err <= tol)` is used on purpose so that NaN counts as a failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::simplex::{
    jacobian, lambda_interval, sparsegen_project, GateScores, RoutingJacobian, RoutingWeights,
    SparsityFactor,
};

/// Largest `E` the support enumeration accepts (`2^E − 1` subsets).
pub const MAX_ORACLE_EXPERTS: usize = 12;

/// Denominator floor for elementwise relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-2;

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Minimizes `‖p − u‖² − λ‖p‖²` over the simplex by trying every support.
pub fn qp_oracle(u: &[f64], lambda: f64) -> Result<RoutingWeights> {
    let e = u.len();
    if e == 0 {
        return Err(Error::InvalidInput("empty score vector".into()));
    }
    if e > MAX_ORACLE_EXPERTS {
        return Err(Error::Unsupported(format!(
            "support enumeration is limited to {MAX_ORACLE_EXPERTS} experts, got {e}"
        )));
    }
    if !(lambda < 1.0) {
        return Err(Error::InvalidInput(format!("lambda must be < 1, got {lambda}")));
    }
    let gap = 1.0 - lambda;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut cand = vec![0.0; e];
    for mask in 1u32..(1u32 << e) {
        let size = mask.count_ones() as f64;
        let sum: f64 = (0..e).filter(|i| mask >> i & 1 == 1).map(|i| u[i]).sum();
        let tau = (sum - gap) / size;
        let mut feasible = true;
        for i in 0..e {
            cand[i] = if mask >> i & 1 == 1 {
                let p = (u[i] - tau) / gap;
                if p < -1e-12 {
                    feasible = false;
                    break;
                }
                p.max(0.0)
            } else {
                0.0
            };
        }
        if !feasible {
            continue;
        }
        let obj: f64 = (0..e)
            .map(|i| (cand[i] - u[i]).powi(2) - lambda * cand[i] * cand[i])
            .sum();
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, cand.clone()));
        }
    }
    // singletons are always feasible, so `best` is set
    let (_, p) = best.expect("a singleton support is always feasible");
    Ok(RoutingWeights::from_probs(p))
}

/// The projection and derivative pair a suite run checks.
#[derive(Clone, Copy)]
pub struct Subject {
    pub project: fn(&GateScores, SparsityFactor) -> RoutingWeights,
    pub jacobian: fn(&GateScores, SparsityFactor) -> RoutingJacobian,
}

impl Subject {
    pub fn closed_form() -> Self {
        Self {
            project: sparsegen_project,
            jacobian,
        }
    }
}

/// Why a finite-difference evaluation was refused.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRejected {
    pub margin: f64,
}

/// Central differences of `project` at `(u, λ)`, refusing points within
/// `10h` of a support change.
pub fn fd_derivatives_with(
    project: fn(&GateScores, SparsityFactor) -> RoutingWeights,
    u: &[f64],
    lambda: f64,
    h: f64,
) -> std::result::Result<RoutingJacobian, TrialRejected> {
    let e = u.len();
    let eval = |v: &[f64], l: f64| -> Option<RoutingWeights> {
        let g = GateScores::new(v.to_vec()).ok()?;
        let s = SparsityFactor::new(l).ok()?;
        Some(project(&g, s))
    };
    let reject = TrialRejected { margin: 0.0 };
    let base = eval(u, lambda).ok_or(reject.clone())?;
    if base.support.is_empty() {
        return Err(reject);
    }
    let gap = 1.0 - lambda;
    let tau = base
        .support
        .iter()
        .map(|&i| u[i] - base.probs[i] * gap)
        .sum::<f64>()
        / base.support.len() as f64;
    let margin = u.iter().map(|&x| (x - tau).abs()).fold(f64::INFINITY, f64::min);
    if margin < 10.0 * h || lambda + h >= 1.0 {
        return Err(TrialRejected { margin });
    }

    let mut d_p_d_u = vec![0.0; e * e];
    let mut shifted = u.to_vec();
    for j in 0..e {
        shifted[j] = u[j] + h;
        let plus = eval(&shifted, lambda).ok_or(reject.clone())?;
        shifted[j] = u[j] - h;
        let minus = eval(&shifted, lambda).ok_or(reject.clone())?;
        shifted[j] = u[j];
        if plus.support != base.support || minus.support != base.support {
            return Err(TrialRejected { margin });
        }
        for i in 0..e {
            d_p_d_u[i * e + j] = (plus.probs[i] - minus.probs[i]) / (2.0 * h);
        }
    }
    let plus = eval(u, lambda + h).ok_or(reject.clone())?;
    let minus = eval(u, lambda - h).ok_or(reject)?;
    if plus.support != base.support || minus.support != base.support {
        return Err(TrialRejected { margin });
    }
    let d_p_d_lambda = (0..e)
        .map(|i| (plus.probs[i] - minus.probs[i]) / (2.0 * h))
        .collect();
    Ok(RoutingJacobian {
        num_experts: e,
        d_p_d_u,
        d_p_d_lambda,
    })
}

pub fn fd_derivatives(
    u: &[f64],
    lambda: f64,
    h: f64,
) -> std::result::Result<RoutingJacobian, TrialRejected> {
    fd_derivatives_with(sparsegen_project, u, lambda, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    pub projection: f64,
    pub gradient: f64,
    pub simplex_sum: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            projection: 1e-8,
            gradient: 1e-4,
            simplex_sum: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteConfig {
    /// Random `(u, λ)` pairs for the projection and nonempty-support checks.
    pub trials: usize,
    pub interval_trials: usize,
    pub grad_trials: usize,
    pub min_experts: usize,
    pub max_experts: usize,
    pub seed: u64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub fd_step: f64,
    pub tolerances: Tolerances,
    /// When false, only the derivative checks run (the `grad-check` command).
    pub run_projection_checks: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            trials: 10_000,
            interval_trials: 1_000,
            grad_trials: 1_000,
            min_experts: 2,
            max_experts: 8,
            seed: 0,
            lambda_min: -10.0,
            lambda_max: 0.99,
            fd_step: 1e-6,
            tolerances: Tolerances::default(),
            run_projection_checks: true,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 && self.grad_trials == 0 && self.interval_trials == 0 {
            return Err(Error::InvalidArgument("at least one trial is required".into()));
        }
        if self.min_experts == 0 || self.min_experts > self.max_experts {
            return Err(Error::InvalidArgument(format!(
                "expert range [{}, {}] is empty",
                self.min_experts, self.max_experts
            )));
        }
        if self.max_experts > MAX_ORACLE_EXPERTS {
            return Err(Error::Unsupported(format!(
                "max_experts {} exceeds the enumeration bound {MAX_ORACLE_EXPERTS}",
                self.max_experts
            )));
        }
        if !(self.lambda_min < self.lambda_max && self.lambda_max < 1.0) {
            return Err(Error::InvalidArgument("lambda range must satisfy min < max < 1".into()));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::InvalidArgument("fd step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub check: &'static str,
    pub u: Vec<f64>,
    pub lambda: f64,
    pub diagnostic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub seed: u64,
    pub trials: usize,
    pub interval_trials: usize,
    pub grad_trials: usize,
    pub regenerated_grad_trials: usize,
    pub max_abs_p_error: f64,
    pub max_simplex_sum_error: f64,
    pub min_support: usize,
    pub interval_violations: usize,
    pub max_rel_grad_error: f64,
    pub failure_count: usize,
    /// At most [`OracleReport::MAX_RECORDED`] entries; `failure_count` has the total.
    pub failures: Vec<Failure>,
}

impl OracleReport {
    pub const MAX_RECORDED: usize = 50;

    pub fn passed(&self) -> bool {
        self.failure_count == 0
    }

    fn fail(&mut self, check: &'static str, u: &[f64], lambda: f64, diagnostic: String) {
        self.failure_count += 1;
        if self.failures.len() < Self::MAX_RECORDED {
            self.failures.push(Failure {
                check,
                u: u.to_vec(),
                lambda,
                diagnostic,
            });
        }
    }
}

fn draw_scores(rng: &mut ChaCha8Rng, cfg: &SuiteConfig) -> Vec<f64> {
    let e = rng.random_range(cfg.min_experts..=cfg.max_experts);
    (0..e).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn draw_lambda(rng: &mut ChaCha8Rng, cfg: &SuiteConfig) -> f64 {
    rng.random_range(cfg.lambda_min..cfg.lambda_max)
}

fn project_raw(subject: &Subject, u: &[f64], lambda: f64) -> Result<RoutingWeights> {
    let g = GateScores::new(u.to_vec())?;
    let l = SparsityFactor::new(lambda)?;
    Ok((subject.project)(&g, l))
}

fn has_near_ties(u: &[f64], eps: f64) -> bool {
    let mut s = u.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).any(|w| (w[1] - w[0]).abs() < eps)
}

/// Runs the projection-equivalence, nonempty-support, interval and
/// derivative checks. Failures are collected, never raised.
pub fn run_suite(cfg: &SuiteConfig, subject: &Subject) -> Result<OracleReport> {
    cfg.validate()?;
    let tol = cfg.tolerances;
    let mut report = OracleReport {
        seed: cfg.seed,
        trials: 0,
        interval_trials: 0,
        grad_trials: 0,
        regenerated_grad_trials: 0,
        max_abs_p_error: 0.0,
        max_simplex_sum_error: 0.0,
        min_support: usize::MAX,
        interval_violations: 0,
        max_rel_grad_error: 0.0,
        failure_count: 0,
        failures: Vec::new(),
    };

    if cfg.run_projection_checks {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..cfg.trials {
            let u = draw_scores(&mut rng, cfg);
            let lambda = draw_lambda(&mut rng, cfg);
            let p = project_raw(subject, &u, lambda)?;
            let q = qp_oracle(&u, lambda)?;
            report.trials += 1;

            let err = p
                .probs
                .iter()
                .zip(&q.probs)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            report.max_abs_p_error = report.max_abs_p_error.max(err);
            if !(err <= tol.projection) {
                report.fail("projection", &u, lambda, format!("max |p - p_qp| = {err:e}"));
            }

            let sum_err = (p.probs.iter().sum::<f64>() - 1.0).abs();
            report.max_simplex_sum_error = report.max_simplex_sum_error.max(sum_err);
            report.min_support = report.min_support.min(p.k());
            if p.k() == 0 || p.probs.iter().any(|&x| x < 0.0) || !(sum_err <= tol.simplex_sum) {
                report.fail(
                    "simplex",
                    &u,
                    lambda,
                    format!("support {} sum error {sum_err:e}", p.k()),
                );
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
        for _ in 0..cfg.interval_trials {
            let u = loop {
                let u = draw_scores(&mut rng, cfg);
                if !has_near_ties(&u, 1e-9) {
                    break u;
                }
            };
            report.interval_trials += 1;
            let g = GateScores::new(u.clone())?;
            for k in 1..=u.len() {
                let iv = lambda_interval(&g, k)?;
                let Some(mid) = iv.midpoint() else {
                    report.interval_violations += 1;
                    report.fail("interval", &u, f64::NAN, format!("empty interval for k = {k}"));
                    continue;
                };
                let got = project_raw(subject, &u, mid)?.k();
                if got != k {
                    report.interval_violations += 1;
                    report.fail(
                        "interval",
                        &u,
                        mid,
                        format!("midpoint of k = {k} interval activates {got}"),
                    );
                }
                if k < u.len() {
                    let below = iv.lower - 1e-6;
                    let got = project_raw(subject, &u, below)?.k();
                    if got < k + 1 {
                        report.interval_violations += 1;
                        report.fail(
                            "interval",
                            &u,
                            below,
                            format!("just below lower(k = {k}) activates {got}"),
                        );
                    }
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD1B5_4A32_D192_ED03);
    for _ in 0..cfg.grad_trials {
        let mut attempts = 0;
        let (u, lambda, fd) = loop {
            let u = draw_scores(&mut rng, cfg);
            let lambda = draw_lambda(&mut rng, cfg);
            match fd_derivatives_with(subject.project, &u, lambda, cfg.fd_step) {
                Ok(fd) => break (u, lambda, fd),
                Err(_) => {
                    attempts += 1;
                    report.regenerated_grad_trials += 1;
                    if attempts > 1000 {
                        return Err(Error::InvalidInput(
                            "could not draw a trial away from support boundaries".into(),
                        ));
                    }
                }
            }
        };
        report.grad_trials += 1;
        let g = GateScores::new(u.clone())?;
        let an = (subject.jacobian)(&g, SparsityFactor::new(lambda)?);
        let worst = an
            .d_p_d_u
            .iter()
            .zip(&fd.d_p_d_u)
            .chain(an.d_p_d_lambda.iter().zip(&fd.d_p_d_lambda))
            .map(|(&a, &b)| rel_err(a, b, REL_ERR_FLOOR))
            .fold(0.0, f64::max);
        report.max_rel_grad_error = report.max_rel_grad_error.max(worst);
        if !(worst <= tol.gradient) {
            report.fail("gradient", &u, lambda, format!("max relative error {worst:e}"));
        }
    }

    if report.min_support == usize::MAX {
        report.min_support = 0;
    }
    Ok(report)
}
