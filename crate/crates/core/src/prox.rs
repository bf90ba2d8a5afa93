//! Solvers for the penalized M-step subproblems.
//!
//! Every parameter block of one task is a quadratic
//! `q(theta) = 1/2 (theta - b)^T A (theta - b)` plus a fusion penalty
//! `tau * ||theta - center||` with `tau = sqrt(n) * lambda`:
//!
//! | block | curvature `A`     | unpenalized minimizer `b` |
//! |-------|-------------------|---------------------------|
//! | `w`   | `n`               | mean posterior            |
//! | `mu`  | posterior mass    | posterior-weighted mean   |
//! | `beta`| `n * Sigma_hat`   | `Sigma_hat^{-1} d`        |
//!
//! Scalars are carried as vectors of length one.

use nalgebra::{Cholesky, Dyn, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{cholesky, Matrix, Vector};

/// Mixing weights are kept inside `[W_CLAMP, 1 - W_CLAMP]`.
pub const W_CLAMP: f64 = 1e-6;

pub fn clamp_w(w: f64) -> f64 {
    w.clamp(W_CLAMP, 1.0 - W_CLAMP)
}

/// The `beta` block: curvature `n * Sigma_hat`, linear term `n * d`.
#[derive(Debug, Clone)]
pub struct BetaProblem {
    n: usize,
    sigma_hat: Matrix,
    d: Vector,
    unpenalized: Vector,
    eigenvalues: Vector,
    eigenvectors: Matrix,
}

/// `Sigma^{-1} d` through an existing Cholesky factor. EM and the penalized
/// solver both go through here so the unpenalized paths agree bit for bit.
pub(crate) fn gls_solve(ch: &Cholesky<f64, Dyn>, d: &Vector) -> Vector {
    ch.solve(d)
}

impl BetaProblem {
    pub fn new(sigma_hat: Matrix, d: Vector, n: usize) -> Result<Self> {
        let ch = cholesky(&sigma_hat, "covariance estimate")?;
        Self::with_cholesky(sigma_hat, &ch, d, n)
    }

    pub(crate) fn with_cholesky(
        sigma_hat: Matrix,
        ch: &Cholesky<f64, Dyn>,
        d: Vector,
        n: usize,
    ) -> Result<Self> {
        check_dim(sigma_hat.nrows(), d.len())?;
        check_dim(sigma_hat.nrows(), sigma_hat.ncols())?;
        check_n(n)?;
        let unpenalized = gls_solve(ch, &d);
        let eig = SymmetricEigen::new(sigma_hat.clone());
        if eig.eigenvalues.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::NotPositiveDefinite("covariance estimate"));
        }
        Ok(BetaProblem {
            n,
            sigma_hat,
            d,
            unpenalized,
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        })
    }

    pub fn unpenalized(&self) -> &Vector {
        &self.unpenalized
    }

    fn prox(&self, lambda: f64, anchor: &Vector) -> Result<Vector> {
        check_dim(self.d.len(), anchor.len())?;
        if lambda == 0.0 {
            return Ok(self.unpenalized.clone());
        }
        let sqrt_n = (self.n as f64).sqrt();
        if (&self.sigma_hat * anchor - &self.d).norm() <= lambda / sqrt_n {
            return Ok(anchor.clone());
        }
        let tau = sqrt_n * lambda;
        let n = self.n as f64;
        let q = &self.eigenvectors;
        let v = q.transpose() * (&self.unpenalized - anchor);
        let curv: Vec<f64> = self.eigenvalues.iter().map(|s| n * s).collect();
        // ||theta(r) - anchor|| / r - 1, strictly decreasing in r
        let excess = |r: f64| -> f64 {
            curv.iter()
                .zip(v.iter())
                .map(|(a, vi)| (a * vi / (a * r + tau)).powi(2))
                .sum::<f64>()
                .sqrt()
                - 1.0
        };
        let mut hi = v.norm();
        let mut lo = 0.0;
        let at_hi = excess(hi);
        if !at_hi.is_finite() || !(hi > 0.0) {
            return Err(Error::Bracketing(format!(
                "beta prox: upper bracket {hi} gives {at_hi}"
            )));
        }
        if at_hi < 0.0 {
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if excess(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-15 * hi {
                    break;
                }
            }
        }
        let r = 0.5 * (lo + hi);
        let shrunk = Vector::from_iterator(
            v.len(),
            curv.iter()
                .zip(v.iter())
                .map(|(a, vi)| a * r / (a * r + tau) * vi),
        );
        Ok(anchor + q * shrunk)
    }
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::InvalidParameter("sample size must be at least 1".into()))
    } else {
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("penalty {lambda} must be finite and >= 0")))
    }
}

/// One task's block of a penalized M-step, in canonical quadratic form.
#[derive(Debug, Clone)]
pub enum ProxProblem {
    ScalarW { gbar: f64, n: usize },
    VectorMu { weight_sum: f64, weighted_mean: Vector, n: usize },
    VectorBeta(BetaProblem),
}

impl ProxProblem {
    pub fn scalar_w(gbar: f64, n: usize) -> Result<Self> {
        check_n(n)?;
        if !gbar.is_finite() {
            return Err(Error::InvalidParameter(format!("mean posterior {gbar}")));
        }
        Ok(ProxProblem::ScalarW { gbar, n })
    }

    pub fn vector_mu(weight_sum: f64, weighted_mean: Vector, n: usize) -> Result<Self> {
        check_n(n)?;
        if !(weight_sum > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "posterior mass {weight_sum} must be positive"
            )));
        }
        Ok(ProxProblem::VectorMu {
            weight_sum,
            weighted_mean,
            n,
        })
    }

    pub fn vector_beta(sigma_hat: Matrix, d: Vector, n: usize) -> Result<Self> {
        Ok(ProxProblem::VectorBeta(BetaProblem::new(sigma_hat, d, n)?))
    }

    pub fn dim(&self) -> usize {
        match self {
            ProxProblem::ScalarW { .. } => 1,
            ProxProblem::VectorMu { weighted_mean, .. } => weighted_mean.len(),
            ProxProblem::VectorBeta(b) => b.d.len(),
        }
    }

    pub fn n(&self) -> usize {
        match self {
            ProxProblem::ScalarW { n, .. } | ProxProblem::VectorMu { n, .. } => *n,
            ProxProblem::VectorBeta(b) => b.n,
        }
    }

    /// `tau = sqrt(n) * lambda`.
    pub fn penalty_weight(&self, lambda: f64) -> f64 {
        (self.n() as f64).sqrt() * lambda
    }

    /// Minimizer of the quadratic alone.
    pub fn unpenalized(&self) -> Vector {
        match self {
            ProxProblem::ScalarW { gbar, .. } => Vector::from_element(1, *gbar),
            ProxProblem::VectorMu { weighted_mean, .. } => weighted_mean.clone(),
            ProxProblem::VectorBeta(b) => b.unpenalized.clone(),
        }
    }

    /// `argmin_theta q(theta) + sqrt(n) lambda ||theta - anchor||` (no clamping).
    pub fn prox(&self, lambda: f64, anchor: &Vector) -> Result<Vector> {
        check_lambda(lambda)?;
        check_dim(self.dim(), anchor.len())?;
        match self {
            ProxProblem::ScalarW { gbar, n } => Ok(Vector::from_element(
                1,
                soft_threshold_w(*gbar, *n, lambda, anchor[0]),
            )),
            ProxProblem::VectorMu {
                weight_sum,
                weighted_mean,
                n,
            } => Ok(block_shrink(*weight_sum, weighted_mean, *n, lambda, anchor)),
            ProxProblem::VectorBeta(b) => b.prox(lambda, anchor),
        }
    }

    /// `q(theta) + sqrt(n) lambda ||theta - anchor||`.
    pub fn objective(&self, theta: &Vector, lambda: f64, anchor: &Vector) -> f64 {
        let b = self.unpenalized();
        let diff = theta - &b;
        let quad = 0.5 * diff.dot(&self.curvature_times(&diff));
        quad + self.penalty_weight(lambda) * (theta - anchor).norm()
    }

    fn curvature_times(&self, x: &Vector) -> Vector {
        match self {
            ProxProblem::ScalarW { n, .. } => x * (*n as f64),
            ProxProblem::VectorMu { weight_sum, .. } => x * *weight_sum,
            ProxProblem::VectorBeta(b) => &b.sigma_hat * x * (b.n as f64),
        }
    }

    /// Curvature of the task's contribution to the center objective: `A` when the
    /// task is fused with the center, `(A^{-1} + (r / tau) I)^{-1}` otherwise.
    fn center_curvature(&self, r: f64, tau: f64) -> Matrix {
        let shrink = |a: f64| if r == 0.0 { a } else { 1.0 / (1.0 / a + r / tau) };
        match self {
            ProxProblem::ScalarW { n, .. } => Matrix::from_element(1, 1, shrink(*n as f64)),
            ProxProblem::VectorMu {
                weight_sum,
                weighted_mean,
                ..
            } => Matrix::identity(weighted_mean.len(), weighted_mean.len()) * shrink(*weight_sum),
            ProxProblem::VectorBeta(b) => {
                let n = b.n as f64;
                let diag = Vector::from_iterator(
                    b.eigenvalues.len(),
                    b.eigenvalues.iter().map(|s| shrink(n * s)),
                );
                &b.eigenvectors * Matrix::from_diagonal(&diag) * b.eigenvectors.transpose()
            }
        }
    }
}

fn soft_threshold_w(gbar: f64, n: usize, lambda: f64, anchor: f64) -> f64 {
    if lambda == 0.0 {
        return gbar;
    }
    let diff = gbar - anchor;
    let excess = diff.abs() - lambda / (n as f64).sqrt();
    if excess <= 0.0 {
        anchor
    } else {
        anchor + diff.signum() * excess
    }
}

fn block_shrink(a: f64, m: &Vector, n: usize, lambda: f64, anchor: &Vector) -> Vector {
    if lambda == 0.0 {
        return m.clone();
    }
    let diff = m - anchor;
    let norm = diff.norm();
    if norm == 0.0 {
        return anchor.clone();
    }
    let factor = 1.0 - (n as f64).sqrt() * lambda / (a * norm);
    if factor <= 0.0 {
        anchor.clone()
    } else {
        anchor + diff * factor
    }
}

/// `argmin_w n/2 (w - gbar)^2 + sqrt(n) lambda |w - anchor|`, clamped into `[1e-6, 1 - 1e-6]`.
pub fn prox_scalar_w(gbar: f64, n: usize, lambda: f64, anchor: f64) -> Result<f64> {
    check_n(n)?;
    check_lambda(lambda)?;
    Ok(clamp_w(soft_threshold_w(gbar, n, lambda, anchor)))
}

/// Block soft-threshold of `weighted_mean` toward `anchor`.
pub fn prox_vector_mu(
    weight_sum: f64,
    weighted_mean: &Vector,
    n: usize,
    lambda: f64,
    anchor: &Vector,
) -> Result<Vector> {
    ProxProblem::vector_mu(weight_sum, weighted_mean.clone(), n)?.prox(lambda, anchor)
}

/// `argmin_beta n (beta^T Sigma beta / 2 - beta^T d) + sqrt(n) lambda ||beta - anchor||`.
pub fn prox_vector_beta(
    sigma_hat: &Matrix,
    d: &Vector,
    n: usize,
    lambda: f64,
    anchor: &Vector,
) -> Result<Vector> {
    ProxProblem::vector_beta(sigma_hat.clone(), d.clone(), n)?.prox(lambda, anchor)
}

/// Points closer than this are treated as coincident by the median solver.
const COINCIDENT: f64 = 1e-12;

fn check_median_input(points: &[Vector], weights: &[f64]) -> Result<usize> {
    let first = points
        .first()
        .ok_or_else(|| Error::InvalidParameter("geometric median of no points".into()))?;
    check_dim(points.len(), weights.len())?;
    for p in points {
        check_dim(first.len(), p.len())?;
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidParameter(format!("median weight {w} must be positive")));
    }
    Ok(first.len())
}

/// Weight sitting exactly at `y` and the pull of all other points.
fn pull_at(points: &[Vector], weights: &[f64], y: &Vector) -> (f64, Vector) {
    let mut at = 0.0;
    let mut pull = Vector::zeros(y.len());
    for (x, &w) in points.iter().zip(weights) {
        let diff = x - y;
        let dist = diff.norm();
        if dist <= COINCIDENT {
            at += w;
        } else {
            pull += diff * (w / dist);
        }
    }
    (at, pull)
}

/// Norm of the smallest subgradient of `sum_k w_k ||x_k - y||` at `y`.
pub fn median_residual(points: &[Vector], weights: &[f64], y: &Vector) -> f64 {
    let (at, pull) = pull_at(points, weights, y);
    (pull.norm() - at).max(0.0)
}

/// Minimizer of `sum_k w_k ||x_k - y||` by Weiszfeld iteration, with an exact
/// optimality test at the data points and the Vardi-Zhang step when an iterate
/// lands on one. Stops once the residual is at most `tol * sum(w)`.
pub fn weighted_geometric_median(points: &[Vector], weights: &[f64], tol: f64) -> Result<Vector> {
    let p = check_median_input(points, weights)?;
    if points.len() == 1 {
        return Ok(points[0].clone());
    }
    let total: f64 = weights.iter().sum();
    let slack = tol * total;
    for x in points {
        let (at, pull) = pull_at(points, weights, x);
        if pull.norm() <= at + slack {
            return Ok(x.clone());
        }
    }
    let mut y = points
        .iter()
        .zip(weights)
        .fold(Vector::zeros(p), |acc, (x, &w)| acc + x * w)
        / total;
    for _ in 0..100_000 {
        let mut num = Vector::zeros(p);
        let mut den = 0.0;
        let mut at = 0.0;
        let mut pull = Vector::zeros(p);
        for (x, &w) in points.iter().zip(weights) {
            let diff = x - &y;
            let dist = diff.norm();
            if dist <= COINCIDENT {
                at += w;
            } else {
                num += x * (w / dist);
                den += w / dist;
                pull += diff * (w / dist);
            }
        }
        let pull_norm = pull.norm();
        if pull_norm - at <= slack {
            return Ok(y);
        }
        let target = num / den;
        let next = if at > 0.0 {
            let t = at / pull_norm;
            target * (1.0 - t) + &y * t
        } else {
            target
        };
        if (&next - &y).norm() <= 1e-15 * (1.0 + y.norm()) {
            return Ok(next);
        }
        y = next;
    }
    Ok(y)
}

/// Joint solution of `sum_k [q_k(theta_k) + sqrt(n_k) lambda ||theta_k - center||]`.
#[derive(Debug, Clone)]
pub struct JointPenalizedSolution {
    pub per_task: Vec<Vector>,
    pub center: Vector,
    pub inner_iterations: usize,
    pub converged: bool,
    /// Objective after the initial prox and after every sweep.
    pub objective_trace: Vec<f64>,
    /// `||sum_k A_k (theta_k - b_k)||`, zero at an exact joint minimizer.
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointOptions {
    pub tol: f64,
    pub max_sweeps: usize,
    pub median_tol: f64,
}

impl Default for JointOptions {
    fn default() -> Self {
        JointOptions {
            tol: 1e-8,
            max_sweeps: 200,
            median_tol: 1e-12,
        }
    }
}

/// Joint objective value of a configuration.
pub fn joint_objective(problems: &[ProxProblem], lambda: f64, per_task: &[Vector], center: &Vector) -> f64 {
    problems
        .iter()
        .zip(per_task)
        .map(|(pb, t)| pb.objective(t, lambda, center))
        .sum()
}

/// Solves one joint penalized block. The center starts at the weighted geometric
/// median of the unpenalized minimizers (weights `sqrt(n_k)`); each sweep moves
/// the center to the minimizer of a quadratic majorizer of the profiled
/// objective, then re-solves every task prox exactly. Mixing-weight blocks are
/// clamped on return.
pub fn solve_joint_penalized(
    problems: &[ProxProblem],
    lambda: f64,
    opts: &JointOptions,
) -> Result<JointPenalizedSolution> {
    check_lambda(lambda)?;
    let first = problems
        .first()
        .ok_or_else(|| Error::InvalidParameter("no tasks".into()))?;
    let p = first.dim();
    for (k, pb) in problems.iter().enumerate() {
        check_dim(p, pb.dim()).map_err(|e| e.in_task(k))?;
        if std::mem::discriminant(pb) != std::mem::discriminant(first) {
            return Err(Error::InvalidParameter("mixed block kinds".into()));
        }
    }
    let targets: Vec<Vector> = problems.iter().map(|pb| pb.unpenalized()).collect();
    let weights: Vec<f64> = problems.iter().map(|pb| (pb.n() as f64).sqrt()).collect();
    let mut center = weighted_geometric_median(&targets, &weights, opts.median_tol)?;

    let prox_all = |center: &Vector| -> Result<Vec<Vector>> {
        problems
            .iter()
            .enumerate()
            .map(|(k, pb)| pb.prox(lambda, center).map_err(|e| e.in_task(k)))
            .collect()
    };

    let mut per_task = prox_all(&center)?;
    let mut trace = vec![joint_objective(problems, lambda, &per_task, &center)];
    let mut sweeps = 0;
    let mut converged = lambda == 0.0;

    while !converged && sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut h_sum = Matrix::zeros(p, p);
        let mut rhs = Vector::zeros(p);
        for ((pb, theta), b) in problems.iter().zip(&per_task).zip(&targets) {
            let r = if *theta == center { 0.0 } else { (theta - &center).norm() };
            let h = pb.center_curvature(r, pb.penalty_weight(lambda));
            rhs += &h * b;
            h_sum += h;
        }
        let next_center = cholesky(&h_sum, "center curvature")?.solve(&rhs);
        let next = prox_all(&next_center)?;
        let mut change = (&next_center - &center).norm();
        for (a, b) in next.iter().zip(&per_task) {
            change = change.max((a - b).norm());
        }
        center = next_center;
        per_task = next;
        trace.push(joint_objective(problems, lambda, &per_task, &center));
        converged = change < opts.tol;
    }

    let mut grad = Vector::zeros(p);
    for ((pb, theta), b) in problems.iter().zip(&per_task).zip(&targets) {
        grad += pb.curvature_times(&(theta - b));
    }
    if matches!(first, ProxProblem::ScalarW { .. }) {
        for t in per_task.iter_mut() {
            t[0] = clamp_w(t[0]);
        }
        center[0] = clamp_w(center[0]);
    }
    Ok(JointPenalizedSolution {
        per_task,
        center,
        inner_iterations: sweeps,
        converged,
        objective_trace: trace,
        kkt_residual: grad.norm(),
    })
}
