//! Single-task EM and the penalized multi-task EM with its tuning schedule.

use nalgebra::{Cholesky, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Component, Error, Result};
use crate::gmm::{distance_d, posteriors, TaskData, ThetaEstimate};
use crate::linalg::{regularized_cholesky, symmetrize, Matrix, Vector};
use crate::prox::{
    clamp_w, gls_solve, solve_joint_penalized, BetaProblem, JointOptions, ProxProblem,
};

/// Posterior mass below `COLLAPSE * n` on either component is treated as a collapse.
const COLLAPSE: f64 = 1e-12;

/// Sufficient statistics of one E-step.
#[derive(Debug, Clone)]
pub(crate) struct EStats {
    pub gamma: Vec<f64>,
    pub n: usize,
    pub gbar: f64,
    pub mass1: f64,
    pub mass2: f64,
    pub mean1: Vector,
    pub mean2: Vector,
}

pub(crate) fn e_step(theta: &ThetaEstimate, data: &TaskData) -> Result<EStats> {
    theta.validate()?;
    let gamma = posteriors(theta, &data.z)?;
    let n = data.n();
    let g = Vector::from_column_slice(&gamma);
    let one_minus = g.map(|v| 1.0 - v);
    let mass2: f64 = g.sum();
    let mass1: f64 = one_minus.sum();
    if mass1 < COLLAPSE * n as f64 {
        return Err(Error::DegeneratePosterior(Component::First));
    }
    if mass2 < COLLAPSE * n as f64 {
        return Err(Error::DegeneratePosterior(Component::Second));
    }
    let zt = data.z.transpose();
    let mean1 = &zt * &one_minus / mass1;
    let mean2 = &zt * &g / mass2;
    Ok(EStats {
        gbar: mass2 / n as f64,
        gamma,
        n,
        mass1,
        mass2,
        mean1,
        mean2,
    })
}

/// Pooled posterior-weighted covariance around the updated means, with its
/// (possibly ridge-regularized) Cholesky factor.
pub(crate) fn covariance_update(
    data: &TaskData,
    gamma: &[f64],
    mu1: &Vector,
    mu2: &Vector,
) -> Result<(Matrix, Cholesky<f64, Dyn>)> {
    let n = data.n();
    let mut c1 = data.z.clone();
    let mut c2 = data.z.clone();
    for i in 0..n {
        let mut r1 = c1.row_mut(i);
        r1 -= mu1.transpose();
        let mut r2 = c2.row_mut(i);
        r2 -= mu2.transpose();
    }
    let mut w1 = c1.clone();
    let mut w2 = c2.clone();
    for (i, &g) in gamma.iter().enumerate() {
        w1.row_mut(i).scale_mut(1.0 - g);
        w2.row_mut(i).scale_mut(g);
    }
    let mut sigma = (w1.transpose() * &c1 + w2.transpose() * &c2) / n as f64;
    symmetrize(&mut sigma);
    let ch = regularized_cholesky(&mut sigma)?;
    Ok((sigma, ch))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop once `d` between successive iterates falls below this; 0 runs `max_iter` rounds.
    pub tol: f64,
    pub record_path: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iter: 500,
            tol: 1e-6,
            record_path: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleFit {
    pub theta: ThetaEstimate,
    pub sigma: Matrix,
    pub iterations: usize,
    pub converged: bool,
    /// Iterates after each round when requested.
    pub path: Vec<ThetaEstimate>,
}

/// One unpenalized EM round.
pub(crate) fn em_step(theta: &ThetaEstimate, data: &TaskData) -> Result<(ThetaEstimate, Matrix)> {
    let stats = e_step(theta, data)?;
    let w = clamp_w(stats.gbar);
    let (sigma, ch) = covariance_update(data, &stats.gamma, &stats.mean1, &stats.mean2)?;
    let beta = gls_solve(&ch, &(&stats.mean1 - &stats.mean2));
    Ok((
        ThetaEstimate {
            w,
            mu1: stats.mean1,
            mu2: stats.mean2,
            beta,
        },
        sigma,
    ))
}

/// Standard EM for one task, started from `init`.
pub fn em_single_task(data: &TaskData, init: &ThetaEstimate, opts: &EmOptions) -> Result<SingleFit> {
    init.validate()?;
    check_dim(init.dim(), data.p())?;
    if opts.max_iter == 0 {
        return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
    }
    let mut theta = init.clone();
    let mut sigma = Matrix::zeros(0, 0);
    let mut path = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let (next, s) = em_step(&theta, data)?;
        let change = distance_d(&next, &theta)?.value();
        theta = next;
        sigma = s;
        if opts.record_path {
            path.push(theta.clone());
        }
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(SingleFit {
        theta,
        sigma,
        iterations,
        converged,
        path,
    })
}

/// The four coupling constants of the schedule recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
}

impl ScriptConstants {
    pub fn new(c1: f64, c2: f64, c3: f64, c4: f64) -> Self {
        ScriptConstants { c1, c2, c3, c4 }
    }

    /// All four equal to one.
    pub fn unit() -> Self {
        Self::new(1.0, 1.0, 1.0, 1.0)
    }

    /// All four equal to one half. With `kappa = 1/3` the recurrence contracts
    /// at rate `7/12`, so the data-size term of every penalty dies out.
    pub fn contracting() -> Self {
        Self::new(0.5, 0.5, 0.5, 0.5)
    }

    /// Growth factor of the data-size constants per round under `kappa`.
    pub fn spectral_radius(&self, kappa: f64) -> f64 {
        kappa * (self.c1 + self.c2 + self.c3 * (1.0 + self.c4))
    }

    pub(crate) fn validate(&self) -> Result<()> {
        for v in [self.c1, self.c2, self.c3, self.c4] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("coupling constant {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

impl Default for ScriptConstants {
    fn default() -> Self {
        Self::contracting()
    }
}

/// Constants in force at one round: `[w, mu, beta]` for the dimension term and
/// for the sample-size term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundConstants {
    pub dim: [f64; 3],
    pub size: [f64; 3],
}

/// One step of the constant recurrence. The `beta` constants pick up
/// `c4` times the current `mu` constant; `beta_size_from_dim` selects the
/// dimension-term `mu` constant for the sample-size `beta` constant.
pub(crate) fn advance_constants(
    base: &RoundConstants,
    prev: &RoundConstants,
    s: &ScriptConstants,
    kappa: f64,
    beta_size_from_dim: bool,
) -> RoundConstants {
    let mix = |c: &[f64; 3]| kappa * (s.c1 * c[0] + s.c2 * c[1] + s.c3 * c[2]);
    let (md, ms) = (mix(&prev.dim), mix(&prev.size));
    let mu_d = base.dim[1] + md;
    let mu_s = ms;
    let coupled = if beta_size_from_dim { mu_d } else { mu_s };
    RoundConstants {
        dim: [base.dim[0] + md, mu_d, base.dim[2] + s.c4 * mu_d + md],
        size: [ms, mu_s, s.c4 * coupled + ms],
    }
}

/// Base constants and recurrence for the multi-task penalty schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningSchedule {
    pub c1_w: f64,
    pub c1_mu: f64,
    pub c1_beta: f64,
    pub c2_w: f64,
    pub c2_mu: f64,
    pub c2_beta: f64,
    pub script: ScriptConstants,
    pub kappa: f64,
}

impl TuningSchedule {
    /// Ties `C_w^(1) = C_w^(2) = value_w` and sets the four `mu`/`beta` constants to `value_rest`.
    pub fn tied(value_w: f64, value_rest: f64, script: ScriptConstants, kappa: f64) -> Result<Self> {
        let s = TuningSchedule {
            c1_w: value_w,
            c1_mu: value_rest,
            c1_beta: value_rest,
            c2_w: value_w,
            c2_mu: value_rest,
            c2_beta: value_rest,
            script,
            kappa,
        };
        s.validate()?;
        Ok(s)
    }

    /// All constants zero: every penalty vanishes. Meant for testing the reduction to EM.
    pub fn zero() -> Self {
        TuningSchedule {
            c1_w: 0.0,
            c1_mu: 0.0,
            c1_beta: 0.0,
            c2_w: 0.0,
            c2_mu: 0.0,
            c2_beta: 0.0,
            script: ScriptConstants::new(0.0, 0.0, 0.0, 0.0),
            kappa: 1.0 / 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0 && self.kappa < 1.0) {
            return Err(Error::InvalidParameter(format!("kappa {} outside [0, 1)", self.kappa)));
        }
        for v in [self.c1_w, self.c1_mu, self.c1_beta, self.c2_w, self.c2_mu, self.c2_beta] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("schedule constant {v} must be >= 0")));
            }
        }
        self.script.validate()
    }

    fn base(&self) -> RoundConstants {
        RoundConstants {
            dim: [self.c1_w, self.c1_mu, self.c1_beta],
            size: [self.c2_w, self.c2_mu, self.c2_beta],
        }
    }

    fn advance(&self, prev: &RoundConstants) -> RoundConstants {
        advance_constants(&self.base(), prev, &self.script, self.kappa, false)
    }

    /// Constants for rounds `1..=rounds`.
    pub fn constants(&self, rounds: usize) -> Vec<RoundConstants> {
        let mut out = Vec::with_capacity(rounds);
        let mut c = self.base();
        for t in 0..rounds {
            if t > 0 {
                c = self.advance(&c);
            }
            out.push(c);
        }
        out
    }
}

impl Default for TuningSchedule {
    /// `kappa = 1/3`, contracting coupling, and all base constants `0.1`.
    fn default() -> Self {
        TuningSchedule::tied(0.1, 0.1, ScriptConstants::default(), 1.0 / 3.0).unwrap()
    }
}

/// Penalty levels of one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub w: f64,
    pub mu: f64,
    pub beta: f64,
}

impl Lambdas {
    pub fn zero() -> Self {
        Lambdas::uniform(0.0)
    }

    pub fn uniform(v: f64) -> Self {
        Lambdas { w: v, mu: v, beta: v }
    }

    pub(crate) fn combine(c: &RoundConstants, dim_scale: f64, size_scale: f64) -> Self {
        let at = |i: usize| c.dim[i] * dim_scale + c.size[i] * size_scale;
        Lambdas {
            w: at(0),
            mu: at(1),
            beta: at(2),
        }
    }
}

/// Penalties at round `t` (1-based): `C^(1)[t] sqrt(p + ln K) + C^(2)[t] max_k sqrt(n_k)`.
pub fn tuning_lambda(schedule: &TuningSchedule, t: usize, p: usize, k: usize, max_nk: usize) -> Result<Lambdas> {
    if t == 0 {
        return Err(Error::InvalidParameter("rounds are numbered from 1".into()));
    }
    schedule.validate()?;
    let c = schedule.constants(t)[t - 1];
    Ok(Lambdas::combine(&c, mtl_dim_scale(p, k), (max_nk as f64).sqrt()))
}

fn mtl_dim_scale(p: usize, k: usize) -> f64 {
    (p as f64 + (k as f64).ln()).sqrt()
}

/// `ceil(5 ln(sum n_k / p)) + 10`, at least 10.
pub fn default_rounds(total_n: usize, p: usize) -> usize {
    let ratio = total_n as f64 / p.max(1) as f64;
    (5.0 * ratio.ln()).ceil().max(0.0) as usize + 10
}

/// How the per-round penalties are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    Schedule(TuningSchedule),
    Constant(Lambdas),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtlOptions {
    /// Round cap; `None` uses [`default_rounds`].
    pub rounds: Option<usize>,
    /// Early stop once the largest per-task change is below this; 0 disables.
    pub tol: f64,
    pub record_path: bool,
    #[serde(skip)]
    pub joint: JointOptions,
}

impl Default for MtlOptions {
    fn default() -> Self {
        MtlOptions {
            rounds: None,
            tol: 1e-6,
            record_path: false,
            joint: JointOptions::default(),
        }
    }
}

/// Center estimates `(w, mu1, mu2, beta)` shared across tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centers {
    pub w: f64,
    pub mu1: Vector,
    pub mu2: Vector,
    pub beta: Vector,
}

impl Centers {
    pub fn as_theta(&self) -> ThetaEstimate {
        ThetaEstimate {
            w: self.w,
            mu1: self.mu1.clone(),
            mu2: self.mu2.clone(),
            beta: self.beta.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtlFitResult {
    pub per_task: Vec<ThetaEstimate>,
    pub sigmas: Vec<Matrix>,
    pub centers: Centers,
    /// Penalties used at each round.
    pub lambdas: Vec<Lambdas>,
    /// Largest per-task `d` between successive rounds.
    pub max_change: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `path[t][k]`: estimate of task `k` after round `t + 1`, when requested.
    pub path: Vec<Vec<ThetaEstimate>>,
}

fn check_tasks(tasks: &[TaskData], inits: &[ThetaEstimate]) -> Result<usize> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::InvalidData("no tasks".into()))?;
    check_dim(tasks.len(), inits.len())?;
    let p = first.p();
    for (k, (t, i)) in tasks.iter().zip(inits).enumerate() {
        check_dim(p, t.p()).map_err(|e| e.in_task(k))?;
        check_dim(p, i.dim()).map_err(|e| e.in_task(k))?;
        i.validate().map_err(|e| e.in_task(k))?;
    }
    Ok(p)
}

pub(crate) fn in_tasks<T>(results: impl Iterator<Item = Result<T>>) -> Result<Vec<T>> {
    results
        .enumerate()
        .map(|(k, r)| r.map_err(|e| e.in_task(k)))
        .collect()
}

/// Penalized multi-task EM. `inits` must already be label-aligned.
pub fn fit_mtl_gmm(
    tasks: &[TaskData],
    inits: &[ThetaEstimate],
    penalty: &Penalty,
    opts: &MtlOptions,
) -> Result<MtlFitResult> {
    let p = check_tasks(tasks, inits)?;
    let k = tasks.len();
    let total_n: usize = tasks.iter().map(|t| t.n()).sum();
    let max_n = tasks.iter().map(|t| t.n()).max().unwrap();
    let rounds = opts.rounds.unwrap_or_else(|| default_rounds(total_n, p));
    if rounds == 0 {
        return Err(Error::InvalidParameter("at least one round is required".into()));
    }
    let lambda_plan: Vec<Lambdas> = match penalty {
        Penalty::Schedule(s) => {
            s.validate()?;
            s.constants(rounds)
                .iter()
                .map(|c| Lambdas::combine(c, mtl_dim_scale(p, k), (max_n as f64).sqrt()))
                .collect()
        }
        Penalty::Constant(l) => vec![*l; rounds],
    };

    let mut theta: Vec<ThetaEstimate> = inits.to_vec();
    let mut sigmas = Vec::new();
    let mut centers = None;
    let mut used = Vec::new();
    let mut max_change = Vec::new();
    let mut path = Vec::new();
    let mut converged = false;

    for lam in &lambda_plan {
        let stats = in_tasks(theta.iter().zip(tasks).map(|(th, d)| e_step(th, d)))?;

        let w_pb = in_tasks(stats.iter().map(|s| ProxProblem::scalar_w(s.gbar, s.n)))?;
        let w_sol = solve_joint_penalized(&w_pb, lam.w, &opts.joint)?;
        let mu1_pb = in_tasks(stats.iter().map(|s| ProxProblem::vector_mu(s.mass1, s.mean1.clone(), s.n)))?;
        let mu1_sol = solve_joint_penalized(&mu1_pb, lam.mu, &opts.joint)?;
        let mu2_pb = in_tasks(stats.iter().map(|s| ProxProblem::vector_mu(s.mass2, s.mean2.clone(), s.n)))?;
        let mu2_sol = solve_joint_penalized(&mu2_pb, lam.mu, &opts.joint)?;

        let mut beta_pb = Vec::with_capacity(k);
        let mut new_sigmas = Vec::with_capacity(k);
        for (idx, (s, data)) in stats.iter().zip(tasks).enumerate() {
            let (mu1, mu2) = (&mu1_sol.per_task[idx], &mu2_sol.per_task[idx]);
            let (sigma, ch) = covariance_update(data, &s.gamma, mu1, mu2).map_err(|e| e.in_task(idx))?;
            let pb = BetaProblem::with_cholesky(sigma.clone(), &ch, mu1 - mu2, s.n)
                .map_err(|e| e.in_task(idx))?;
            beta_pb.push(ProxProblem::VectorBeta(pb));
            new_sigmas.push(sigma);
        }
        let beta_sol = solve_joint_penalized(&beta_pb, lam.beta, &opts.joint)?;

        let next: Vec<ThetaEstimate> = (0..k)
            .map(|i| ThetaEstimate {
                w: w_sol.per_task[i][0],
                mu1: mu1_sol.per_task[i].clone(),
                mu2: mu2_sol.per_task[i].clone(),
                beta: beta_sol.per_task[i].clone(),
            })
            .collect();
        let mut change = 0.0f64;
        for (a, b) in next.iter().zip(&theta) {
            change = change.max(distance_d(a, b)?.value());
        }
        theta = next;
        sigmas = new_sigmas;
        centers = Some(Centers {
            w: w_sol.center[0],
            mu1: mu1_sol.center,
            mu2: mu2_sol.center,
            beta: beta_sol.center,
        });
        used.push(*lam);
        max_change.push(change);
        if opts.record_path {
            path.push(theta.clone());
        }
        if change < opts.tol {
            converged = true;
            break;
        }
    }

    Ok(MtlFitResult {
        per_task: theta,
        sigmas,
        centers: centers.unwrap(),
        iterations: used.len(),
        lambdas: used,
        max_change,
        converged,
        path,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::gmm::{log_likelihood, GmmParams};
    use crate::linalg::ar1_matrix;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn sample_task(rng: &mut ChaCha8Rng, params: &GmmParams, n: usize) -> TaskData {
        let l = params.sigma.clone().cholesky().unwrap().l();
        let p = params.dim();
        let mut z = Matrix::zeros(n, p);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let second = rng.gen::<f64>() < params.w;
            let e = Vector::from_fn(p, |_, _| StandardNormal.sample(rng));
            let mu = if second { &params.mu2 } else { &params.mu1 };
            z.row_mut(i).copy_from(&(mu + &l * e).transpose());
            labels.push(if second { 2 } else { 1 });
        }
        TaskData::new(z, Some(labels)).unwrap()
    }

    fn canonical(p: usize, shift: f64) -> GmmParams {
        let mut mu1 = Vector::zeros(p);
        mu1[0] = 2.0;
        mu1[p - 1] += shift;
        GmmParams::new(0.5, mu1.clone(), -mu1, ar1_matrix(p, 0.2)).unwrap()
    }

    fn perturbed_init(rng: &mut ChaCha8Rng, truth: &GmmParams, scale: f64) -> ThetaEstimate {
        let mut t = truth.theta().unwrap();
        let p = t.dim();
        t.mu1 += Vector::from_fn(p, |_, _| rng.gen_range(-scale..scale));
        t.mu2 += Vector::from_fn(p, |_, _| rng.gen_range(-scale..scale));
        t.beta += Vector::from_fn(p, |_, _| rng.gen_range(-scale..scale));
        t.w = (t.w + rng.gen_range(-0.1..0.1)).clamp(0.1, 0.9);
        t
    }

    #[test]
    fn lambda_first_round_formula() {
        let s = TuningSchedule::tied(1.0, 1.0, ScriptConstants::unit(), 1.0 / 3.0).unwrap();
        let l = tuning_lambda(&s, 1, 5, 10, 100).unwrap();
        let expected = (5.0 + 10f64.ln()).sqrt() + 10.0;
        assert!((l.w - expected).abs() < 1e-12);
        assert!((l.w - 12.702_330_5).abs() < 1e-6);
        assert_eq!(l.w, l.mu);
        assert_eq!(l.w, l.beta);
    }

    #[test]
    fn lambda_kappa_zero() {
        let mut s = TuningSchedule::tied(1.0, 2.0, ScriptConstants::unit(), 0.0).unwrap();
        s.c1_beta = 3.0;
        let c = s.constants(2)[1];
        assert_eq!(c.size, [0.0, 0.0, 0.0]);
        assert_eq!(c.dim[0], 1.0);
        assert_eq!(c.dim[1], 2.0);
        // only the beta constant picks up the mu coupling
        assert_eq!(c.dim[2], 3.0 + 2.0);
    }

    #[test]
    fn recurrence_matches_hand_iteration() {
        let s = TuningSchedule {
            c1_w: 0.3,
            c1_mu: 0.7,
            c1_beta: 1.1,
            c2_w: 0.2,
            c2_mu: 0.5,
            c2_beta: 0.9,
            script: ScriptConstants::new(0.4, 0.6, 0.8, 1.5),
            kappa: 0.25,
        };
        let cs = s.constants(6);
        let (mut d, mut z) = ([0.3, 0.7, 1.1], [0.2, 0.5, 0.9]);
        for c in cs.iter().skip(1) {
            let m1 = 0.25 * (0.4 * d[0] + 0.6 * d[1] + 0.8 * d[2]);
            let m2 = 0.25 * (0.4 * z[0] + 0.6 * z[1] + 0.8 * z[2]);
            let mu1 = 0.7 + m1;
            d = [0.3 + m1, mu1, 1.1 + 1.5 * mu1 + m1];
            z = [m2, m2, 1.5 * m2 + m2];
            for i in 0..3 {
                assert!((c.dim[i] - d[i]).abs() < 1e-15);
                assert!((c.size[i] - z[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn unit_coupling_grows_and_half_coupling_decays() {
        let unit = TuningSchedule::tied(1.0, 1.0, ScriptConstants::unit(), 1.0 / 3.0).unwrap();
        assert!((ScriptConstants::unit().spectral_radius(1.0 / 3.0) - 4.0 / 3.0).abs() < 1e-15);
        let cs = unit.constants(30);
        for pair in cs.windows(2).skip(1) {
            for i in 0..3 {
                assert!(pair[1].size[i] > pair[0].size[i]);
                assert!((pair[1].size[i] / pair[0].size[i] - 4.0 / 3.0).abs() < 1e-12);
            }
        }

        let half = TuningSchedule::tied(1.0, 1.0, ScriptConstants::contracting(), 1.0 / 3.0).unwrap();
        assert!((ScriptConstants::contracting().spectral_radius(1.0 / 3.0) - 7.0 / 12.0).abs() < 1e-15);
        let cs = half.constants(60);
        for pair in cs.windows(2) {
            for i in 0..3 {
                assert!(pair[1].size[i] < pair[0].size[i]);
            }
        }
        assert!(cs[59].size.iter().all(|&v| v < 1e-12));
        // the dimension constants settle at a finite limit
        assert!((cs[59].dim[0] - cs[58].dim[0]).abs() < 1e-12);
    }

    #[test]
    fn default_rounds_rule() {
        assert_eq!(default_rounds(1000, 5), (5.0 * 200f64.ln()).ceil() as usize + 10);
        assert_eq!(default_rounds(5, 5), 10);
        assert_eq!(default_rounds(1, 5), 10);
    }

    #[test]
    fn identical_observations_are_rejected() {
        let z = Matrix::from_element(20, 2, 1.5);
        let data = TaskData::unlabeled(z).unwrap();
        let init = ThetaEstimate::new(0.5, dvector![1.0, 1.0], dvector![2.0, 2.0], dvector![1.0, 0.0]).unwrap();
        let err = em_single_task(&data, &init, &EmOptions::default()).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn collapse_is_reported_by_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = sample_task(&mut rng, &canonical(2, 0.0), 50);
        let far = ThetaEstimate::new(0.5, dvector![0.0, 0.0], dvector![0.0, 0.0], dvector![1e6, 0.0]).unwrap();
        let err = e_step(&far, &data);
        // a huge beta puts almost every point firmly on one side, but not all
        assert!(err.is_ok());
        let tiny_w = ThetaEstimate::new(1e-300, dvector![0.0, 0.0], dvector![0.0, 0.0], dvector![0.0, 0.0]).unwrap();
        assert!(matches!(e_step(&tiny_w, &data), Err(Error::DegeneratePosterior(Component::Second))));
    }

    #[test]
    fn one_step_near_truth_moves_little() {
        // beta = 6 / sigma_hat^2 inherits the sampling error of the variance
        // (relative sd about sqrt(2 / n)), so beta is checked on a relative scale.
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = GmmParams::new(0.5, dvector![3.0], dvector![-3.0], Matrix::identity(1, 1)).unwrap();
            let data = sample_task(&mut rng, &truth, 500);
            let start = truth.theta().unwrap();
            let (next, _) = em_step(&start, &data).unwrap();
            let means = (next.w - start.w)
                .abs()
                .max((&next.mu1 - &start.mu1).norm())
                .max((&next.mu2 - &start.mu2).norm());
            assert!(means < 0.2, "seed {seed}: {means}");
            assert!((&next.beta - &start.beta).norm() / start.beta.norm() < 0.2);
        }
    }

    #[test]
    fn em_log_likelihood_never_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let p = rng.gen_range(1..5);
            let truth = canonical(p, rng.gen_range(-1.0..1.0));
            let n = rng.gen_range(40..200);
            let data = sample_task(&mut rng, &truth, n);
            let init = perturbed_init(&mut rng, &truth, 1.0);
            let opts = EmOptions {
                max_iter: 40,
                tol: 0.0,
                record_path: false,
            };
            let mut theta = init;
            let mut prev = f64::NEG_INFINITY;
            for _ in 0..opts.max_iter {
                let (next, sigma) = em_step(&theta, &data).unwrap();
                let params = GmmParams { w: next.w, mu1: next.mu1.clone(), mu2: next.mu2.clone(), sigma };
                let ll = log_likelihood(&params, &data).unwrap();
                assert!(ll >= prev - 1e-9 * prev.abs().max(1.0), "{prev} -> {ll}");
                prev = ll;
                theta = next;
            }
        }
    }

    #[test]
    fn em_records_path_and_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = canonical(3, 0.0);
        let data = sample_task(&mut rng, &truth, 300);
        let init = perturbed_init(&mut rng, &truth, 0.3);
        let fit = em_single_task(&data, &init, &EmOptions { max_iter: 500, tol: 1e-8, record_path: true }).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.path.len(), fit.iterations);
        assert_eq!(fit.path.last().unwrap(), &fit.theta);
        assert!(crate::linalg::is_symmetric(&fit.sigma, 0.0));
    }

    fn mtl_instance(seed: u64, k: usize, p: usize, hetero: f64) -> (Vec<TaskData>, Vec<ThetaEstimate>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tasks = Vec::new();
        let mut inits = Vec::new();
        for _ in 0..k {
            let truth = canonical(p, rng.gen_range(-hetero..=hetero));
            let n = rng.gen_range(60..120);
            tasks.push(sample_task(&mut rng, &truth, n));
            inits.push(perturbed_init(&mut rng, &truth, 0.3));
        }
        (tasks, inits)
    }

    #[test]
    fn zero_penalty_reproduces_single_task_em_exactly() {
        let (tasks, inits) = mtl_instance(10, 5, 3, 0.8);
        let rounds = 15;
        let opts = MtlOptions { rounds: Some(rounds), tol: 0.0, record_path: true, ..Default::default() };
        for penalty in [Penalty::Schedule(TuningSchedule::zero()), Penalty::Constant(Lambdas::zero())] {
            let fit = fit_mtl_gmm(&tasks, &inits, &penalty, &opts).unwrap();
            assert_eq!(fit.iterations, rounds);
            for (k, (data, init)) in tasks.iter().zip(&inits).enumerate() {
                let single = em_single_task(data, init, &EmOptions { max_iter: rounds, tol: 0.0, record_path: true }).unwrap();
                for t in 0..rounds {
                    assert_eq!(distance_d(&fit.path[t][k], &single.path[t]).unwrap().value(), 0.0);
                }
                assert_eq!(fit.sigmas[k], single.sigma);
            }
        }
    }

    #[test]
    fn huge_penalty_pools_every_block() {
        let (tasks, inits) = mtl_instance(11, 6, 3, 0.8);
        let opts = MtlOptions { rounds: Some(5), tol: 0.0, ..Default::default() };
        let fit = fit_mtl_gmm(&tasks, &inits, &Penalty::Constant(Lambdas::uniform(1e6)), &opts).unwrap();
        let c = fit.centers.as_theta();
        for t in &fit.per_task {
            assert!(distance_d(t, &c).unwrap().value() < 1e-6);
        }
    }

    #[test]
    fn identical_tasks_share_estimates() {
        let (tasks, inits) = mtl_instance(12, 1, 3, 0.0);
        let tasks = vec![tasks[0].clone(); 4];
        let inits = vec![inits[0].clone(); 4];
        let opts = MtlOptions { rounds: Some(8), ..Default::default() };
        let fit = fit_mtl_gmm(&tasks, &inits, &Penalty::Schedule(TuningSchedule::default()), &opts).unwrap();
        for t in &fit.per_task {
            assert_eq!(t, &fit.per_task[0]);
        }
        assert_eq!(fit.centers.as_theta(), fit.per_task[0]);
    }

    #[test]
    fn task_permutation_is_equivariant_and_fit_is_deterministic() {
        let (tasks, inits) = mtl_instance(13, 5, 3, 0.5);
        let opts = MtlOptions { rounds: Some(10), ..Default::default() };
        let penalty = Penalty::Schedule(TuningSchedule::default());
        let fit = fit_mtl_gmm(&tasks, &inits, &penalty, &opts).unwrap();
        let again = fit_mtl_gmm(&tasks, &inits, &penalty, &opts).unwrap();
        assert_eq!(fit, again);

        let order = [3, 0, 4, 1, 2];
        let pt: Vec<TaskData> = order.iter().map(|&i| tasks[i].clone()).collect();
        let pi: Vec<ThetaEstimate> = order.iter().map(|&i| inits[i].clone()).collect();
        let perm = fit_mtl_gmm(&pt, &pi, &penalty, &opts).unwrap();
        for (j, &i) in order.iter().enumerate() {
            assert!(distance_d(&perm.per_task[j], &fit.per_task[i]).unwrap().value() < 1e-9);
        }
        assert!(distance_d(&perm.centers.as_theta(), &fit.centers.as_theta()).unwrap().value() < 1e-9);
    }

    #[test]
    fn sigmas_stay_symmetric_positive_definite() {
        let (tasks, inits) = mtl_instance(14, 4, 4, 0.5);
        let opts = MtlOptions { rounds: Some(6), tol: 0.0, ..Default::default() };
        let fit = fit_mtl_gmm(&tasks, &inits, &Penalty::Schedule(TuningSchedule::default()), &opts).unwrap();
        for s in &fit.sigmas {
            assert!(crate::linalg::is_symmetric(s, 0.0));
            assert!(s.clone().cholesky().is_some());
        }
        assert!(fit.per_task.iter().all(|t| t.w > 0.0 && t.w < 1.0));
    }

    #[test]
    fn errors_carry_the_task_index() {
        let (mut tasks, inits) = mtl_instance(15, 3, 2, 0.0);
        tasks[2] = TaskData::unlabeled(Matrix::from_element(30, 2, 0.5)).unwrap();
        let err = fit_mtl_gmm(&tasks, &inits, &Penalty::Constant(Lambdas::zero()), &MtlOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Task { index: 2, .. }), "{err}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]
        #[test]
        fn fit_is_equivariant_under_any_task_order(seed in 0u64..1000, rot in 0usize..4, flip in proptest::bool::ANY) {
            let (tasks, inits) = mtl_instance(seed, 4, 2, 0.5);
            let mut order: Vec<usize> = (0..4).collect();
            order.rotate_left(rot);
            if flip {
                order.swap(0, 1);
            }
            let opts = MtlOptions { rounds: Some(6), ..Default::default() };
            let penalty = Penalty::Schedule(TuningSchedule::default());
            let fit = fit_mtl_gmm(&tasks, &inits, &penalty, &opts).unwrap();
            let pt: Vec<TaskData> = order.iter().map(|&i| tasks[i].clone()).collect();
            let pi: Vec<ThetaEstimate> = order.iter().map(|&i| inits[i].clone()).collect();
            let perm = fit_mtl_gmm(&pt, &pi, &penalty, &opts).unwrap();
            for (j, &i) in order.iter().enumerate() {
                proptest::prop_assert!(distance_d(&perm.per_task[j], &fit.per_task[i]).unwrap().value() < 1e-9);
            }
            proptest::prop_assert!(distance_d(&perm.centers.as_theta(), &fit.centers.as_theta()).unwrap().value() < 1e-9);
        }
    }
}
