//! Transfer to a target task: penalized EM on the target, shrinking every
//! parameter block toward fixed centers learned from the sources.

use serde::{Deserialize, Serialize};

use crate::em::{
    advance_constants, covariance_update, default_rounds, e_step, Centers, Lambdas,
    RoundConstants, ScriptConstants,
};
use crate::error::{check_dim, Error, Result};
use crate::gmm::{distance_d, TaskData, ThetaEstimate};
use crate::linalg::Matrix;
use crate::prox::{clamp_w, BetaProblem, ProxProblem};

/// Penalty schedule for the target fit: `C^(1)[t] sqrt(p) + C^(2)[t] sqrt(n0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TlSchedule {
    pub c1_w: f64,
    pub c1_mu: f64,
    pub c1_beta: f64,
    pub c2_w: f64,
    pub c2_mu: f64,
    pub c2_beta: f64,
    pub script: ScriptConstants,
    pub kappa0: f64,
    /// When false (the default) the sample-size `beta` constant couples to the
    /// dimension-term `mu` constant; when true it couples to the sample-size
    /// `mu` constant, mirroring the multi-task recurrence.
    #[serde(default)]
    pub symmetric: bool,
}

impl TlSchedule {
    pub fn tied(value_w: f64, value_rest: f64, script: ScriptConstants, kappa0: f64) -> Result<Self> {
        let s = TlSchedule {
            c1_w: value_w,
            c1_mu: value_rest,
            c1_beta: value_rest,
            c2_w: value_w,
            c2_mu: value_rest,
            c2_beta: value_rest,
            script,
            kappa0,
            symmetric: false,
        };
        s.validate()?;
        Ok(s)
    }

    /// Every penalty zero; the fit reduces to EM on the target.
    pub fn zero() -> Self {
        TlSchedule {
            c1_w: 0.0,
            c1_mu: 0.0,
            c1_beta: 0.0,
            c2_w: 0.0,
            c2_mu: 0.0,
            c2_beta: 0.0,
            script: ScriptConstants::new(0.0, 0.0, 0.0, 0.0),
            kappa0: 1.0 / 3.0,
            symmetric: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa0 >= 0.0 && self.kappa0 < 1.0) {
            return Err(Error::InvalidParameter(format!("kappa0 {} outside [0, 1)", self.kappa0)));
        }
        for v in [self.c1_w, self.c1_mu, self.c1_beta, self.c2_w, self.c2_mu, self.c2_beta] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("schedule constant {v} must be >= 0")));
            }
        }
        self.script.validate()
    }

    /// Constants for rounds `1..=rounds`.
    pub fn constants(&self, rounds: usize) -> Vec<RoundConstants> {
        let base = RoundConstants {
            dim: [self.c1_w, self.c1_mu, self.c1_beta],
            size: [self.c2_w, self.c2_mu, self.c2_beta],
        };
        let mut out = Vec::with_capacity(rounds);
        let mut c = base;
        for t in 0..rounds {
            if t > 0 {
                c = advance_constants(&base, &c, &self.script, self.kappa0, !self.symmetric);
            }
            out.push(c);
        }
        out
    }
}

impl Default for TlSchedule {
    fn default() -> Self {
        TlSchedule::tied(0.1, 0.1, ScriptConstants::default(), 1.0 / 3.0).unwrap()
    }
}

/// Target penalties at round `t` (1-based).
pub fn tl_tuning_lambda(schedule: &TlSchedule, t: usize, p: usize, n0: usize) -> Result<Lambdas> {
    if t == 0 {
        return Err(Error::InvalidParameter("rounds are numbered from 1".into()));
    }
    schedule.validate()?;
    let c = schedule.constants(t)[t - 1];
    Ok(Lambdas::combine(&c, (p as f64).sqrt(), (n0 as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TlPenalty {
    Schedule(TlSchedule),
    Constant(Lambdas),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TlOptions {
    /// Round cap; `None` uses the default rule on the target sample size.
    pub rounds: Option<usize>,
    /// Early stop once successive estimates differ by less than this; 0 disables.
    pub tol: f64,
    pub record_path: bool,
}

impl Default for TlOptions {
    fn default() -> Self {
        TlOptions {
            rounds: None,
            tol: 1e-6,
            record_path: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlFitResult {
    pub theta0: ThetaEstimate,
    pub sigma0: Matrix,
    pub anchors: Centers,
    pub lambdas: Vec<Lambdas>,
    pub iterations: usize,
    pub converged: bool,
    pub path: Vec<ThetaEstimate>,
}

/// Penalized EM on `target` anchored at `anchors`. `init0` must use the same
/// label convention as the anchors.
pub fn fit_tl_gmm(
    target: &TaskData,
    init0: &ThetaEstimate,
    anchors: &Centers,
    penalty: &TlPenalty,
    opts: &TlOptions,
) -> Result<TlFitResult> {
    let p = target.p();
    init0.validate()?;
    check_dim(p, init0.dim())?;
    check_dim(p, anchors.mu1.len())?;
    check_dim(p, anchors.mu2.len())?;
    check_dim(p, anchors.beta.len())?;
    let n0 = target.n();
    let rounds = opts.rounds.unwrap_or_else(|| default_rounds(n0, p));
    if rounds == 0 {
        return Err(Error::InvalidParameter("at least one round is required".into()));
    }
    let plan: Vec<Lambdas> = match penalty {
        TlPenalty::Schedule(s) => {
            s.validate()?;
            s.constants(rounds)
                .iter()
                .map(|c| Lambdas::combine(c, (p as f64).sqrt(), (n0 as f64).sqrt()))
                .collect()
        }
        TlPenalty::Constant(l) => vec![*l; rounds],
    };

    let mut theta = init0.clone();
    let mut sigma = Matrix::zeros(0, 0);
    let mut used = Vec::new();
    let mut path = Vec::new();
    let mut converged = false;
    let anchor_w = crate::linalg::Vector::from_element(1, anchors.w);

    for lam in &plan {
        let stats = e_step(&theta, target)?;
        let w = clamp_w(ProxProblem::scalar_w(stats.gbar, n0)?.prox(lam.w, &anchor_w)?[0]);
        let mu1 = ProxProblem::vector_mu(stats.mass1, stats.mean1.clone(), n0)?.prox(lam.mu, &anchors.mu1)?;
        let mu2 = ProxProblem::vector_mu(stats.mass2, stats.mean2.clone(), n0)?.prox(lam.mu, &anchors.mu2)?;
        let (s, ch) = covariance_update(target, &stats.gamma, &mu1, &mu2)?;
        let beta = BetaProblem::with_cholesky(s.clone(), &ch, &mu1 - &mu2, n0)?;
        let beta = ProxProblem::VectorBeta(beta).prox(lam.beta, &anchors.beta)?;
        let next = ThetaEstimate { w, mu1, mu2, beta };
        let change = distance_d(&next, &theta)?.value();
        theta = next;
        sigma = s;
        used.push(*lam);
        if opts.record_path {
            path.push(theta.clone());
        }
        if change < opts.tol {
            converged = true;
            break;
        }
    }

    Ok(TlFitResult {
        theta0: theta,
        sigma0: sigma,
        anchors: anchors.clone(),
        iterations: used.len(),
        lambdas: used,
        converged,
        path,
    })
}
