//! Two-component Gaussian mixtures with a shared covariance: parameter types,
//! posterior probabilities, the plug-in Bayes classifier and error metrics.
//!
//! Component 1 has prior weight `1 - w` and component 2 has prior weight `w`,
//! so `w` is the probability of label 2. The discriminant coefficient is
//! `beta = Sigma^{-1} (mu1 - mu2)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{cholesky, is_symmetric, log_sum_exp, Matrix, Vector, SYMMETRY_TOL};

/// Exponents of the posterior odds are clamped to this magnitude.
pub const EXPONENT_CLAMP: f64 = 700.0;

/// Full parameter set of one mixture: `(w, mu1, mu2, Sigma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub w: f64,
    pub mu1: Vector,
    pub mu2: Vector,
    pub sigma: Matrix,
}

impl GmmParams {
    pub fn new(w: f64, mu1: Vector, mu2: Vector, sigma: Matrix) -> Result<Self> {
        let params = GmmParams { w, mu1, mu2, sigma };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.w < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "mixing weight {} outside (0, 1)",
                self.w
            )));
        }
        let p = self.mu1.len();
        check_dim(p, self.mu2.len())?;
        check_dim(p, self.sigma.nrows())?;
        check_dim(p, self.sigma.ncols())?;
        if !is_symmetric(&self.sigma, SYMMETRY_TOL) {
            return Err(Error::InvalidParameter("covariance is not symmetric".into()));
        }
        cholesky(&self.sigma, "mixture covariance")?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mu1.len()
    }

    /// `Sigma^{-1} (mu1 - mu2)` via a Cholesky solve.
    pub fn beta(&self) -> Result<Vector> {
        let ch = cholesky(&self.sigma, "mixture covariance")?;
        Ok(ch.solve(&(&self.mu1 - &self.mu2)))
    }

    pub fn theta(&self) -> Result<ThetaEstimate> {
        Ok(ThetaEstimate {
            w: self.w,
            mu1: self.mu1.clone(),
            mu2: self.mu2.clone(),
            beta: self.beta()?,
        })
    }

    /// The same distribution with the two labels exchanged.
    pub fn swapped(&self) -> GmmParams {
        GmmParams {
            w: 1.0 - self.w,
            mu1: self.mu2.clone(),
            mu2: self.mu1.clone(),
            sigma: self.sigma.clone(),
        }
    }
}

/// The EM iterate `(w, mu1, mu2, beta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub w: f64,
    pub mu1: Vector,
    pub mu2: Vector,
    pub beta: Vector,
}

impl ThetaEstimate {
    pub fn new(w: f64, mu1: Vector, mu2: Vector, beta: Vector) -> Result<Self> {
        let theta = ThetaEstimate { w, mu1, mu2, beta };
        theta.validate()?;
        Ok(theta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.w < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "mixing weight {} outside (0, 1)",
                self.w
            )));
        }
        let p = self.mu1.len();
        check_dim(p, self.mu2.len())?;
        check_dim(p, self.beta.len())
    }

    pub fn dim(&self) -> usize {
        self.mu1.len()
    }

    /// `(mu1 + mu2) / 2`.
    pub fn midpoint(&self) -> Vector {
        (&self.mu1 + &self.mu2) * 0.5
    }

    /// Relabelled parameters `(1 - w, mu2, mu1, -beta)`; they describe the same mixture.
    pub fn swapped(&self) -> ThetaEstimate {
        ThetaEstimate {
            w: 1.0 - self.w,
            mu1: self.mu2.clone(),
            mu2: self.mu1.clone(),
            beta: -&self.beta,
        }
    }

    fn check_point(&self, z: &Vector) -> Result<()> {
        self.validate()?;
        check_dim(self.dim(), z.len())
    }
}

/// Observations of one task: an `n x p` matrix plus optional evaluation labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub z: Matrix,
    pub labels: Option<Vec<u8>>,
}

impl TaskData {
    pub fn new(z: Matrix, labels: Option<Vec<u8>>) -> Result<Self> {
        if z.nrows() < 2 {
            return Err(Error::InvalidData(format!(
                "need at least 2 observations, got {}",
                z.nrows()
            )));
        }
        if z.ncols() < 1 {
            return Err(Error::InvalidData("observations have no features".into()));
        }
        if let Some(l) = &labels {
            check_dim(z.nrows(), l.len())?;
            if let Some(bad) = l.iter().find(|&&v| v != 1 && v != 2) {
                return Err(Error::InvalidData(format!("label {bad} not in {{1, 2}}")));
            }
        }
        Ok(TaskData { z, labels })
    }

    pub fn unlabeled(z: Matrix) -> Result<Self> {
        Self::new(z, None)
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn p(&self) -> usize {
        self.z.ncols()
    }

    pub fn row(&self, i: usize) -> Vector {
        self.z.row(i).transpose()
    }

    /// Subset of rows, keeping labels aligned.
    pub fn select_rows(&self, rows: &[usize]) -> Result<TaskData> {
        let z = self.z.select_rows(rows);
        let labels = self
            .labels
            .as_ref()
            .map(|l| rows.iter().map(|&i| l[i]).collect());
        TaskData::new(z, labels)
    }

    /// Row-wise concatenation of several tasks (used by the pooled estimator).
    pub fn concat(tasks: &[&TaskData]) -> Result<TaskData> {
        let first = tasks
            .first()
            .ok_or_else(|| Error::InvalidData("nothing to concatenate".into()))?;
        let p = first.p();
        let n: usize = tasks.iter().map(|t| t.n()).sum();
        let mut z = Matrix::zeros(n, p);
        let mut offset = 0;
        for t in tasks {
            check_dim(p, t.p())?;
            z.rows_mut(offset, t.n()).copy_from(&t.z);
            offset += t.n();
        }
        let labels = if tasks.iter().all(|t| t.labels.is_some()) {
            Some(
                tasks
                    .iter()
                    .flat_map(|t| t.labels.as_ref().unwrap().iter().copied())
                    .collect(),
            )
        } else {
            None
        };
        TaskData::new(z, labels)
    }
}

/// `d(theta, theta')`: the largest of the four component distances.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ParamDistance(pub f64);

impl ParamDistance {
    pub fn value(self) -> f64 {
        self.0
    }
}

fn posterior_from_exponent(w: f64, exponent: f64) -> f64 {
    let e = exponent.clamp(-EXPONENT_CLAMP, EXPONENT_CLAMP);
    let log_w = w.ln();
    let log_rest = (1.0 - w).ln() + e;
    (log_w - log_sum_exp(log_w, log_rest)).exp()
}

/// Posterior probability of label 2:
/// `w / (w + (1 - w) exp(beta^T (z - (mu1 + mu2) / 2)))`.
pub fn posterior_gamma(theta: &ThetaEstimate, z: &Vector) -> Result<f64> {
    theta.check_point(z)?;
    let exponent = theta.beta.dot(&(z - theta.midpoint()));
    Ok(posterior_from_exponent(theta.w, exponent))
}

/// Posteriors for every row of `z`. Shared by all EM variants so that their
/// E-steps follow the same arithmetic.
pub(crate) fn posteriors(theta: &ThetaEstimate, z: &Matrix) -> Result<Vec<f64>> {
    check_dim(theta.dim(), z.ncols())?;
    let proj = z * &theta.beta;
    let offset = theta.beta.dot(&theta.midpoint());
    Ok(proj
        .iter()
        .map(|&v| posterior_from_exponent(theta.w, v - offset))
        .collect())
}

/// Plug-in Bayes rule: label 1 iff `(z - (mu1 + mu2)/2)^T beta >= log(w / (1 - w))`.
pub fn bayes_classify(theta: &ThetaEstimate, z: &Vector) -> Result<u8> {
    theta.check_point(z)?;
    let score = theta.beta.dot(&(z - theta.midpoint()));
    Ok(if score >= (theta.w / (1.0 - theta.w)).ln() {
        1
    } else {
        2
    })
}

/// Anything that assigns a label in {1, 2} to every row of a data matrix.
pub trait Classifier {
    fn predict(&self, z: &Matrix) -> Result<Vec<u8>>;
}

impl Classifier for ThetaEstimate {
    fn predict(&self, z: &Matrix) -> Result<Vec<u8>> {
        self.validate()?;
        check_dim(self.dim(), z.ncols())?;
        let proj = z * &self.beta;
        let offset = self.beta.dot(&self.midpoint());
        let threshold = (self.w / (1.0 - self.w)).ln();
        Ok(proj
            .iter()
            .map(|&v| if v - offset >= threshold { 1 } else { 2 })
            .collect())
    }
}

/// Observed-data log-likelihood
/// `sum_i log[(1 - w) phi(z_i; mu1, Sigma) + w phi(z_i; mu2, Sigma)]`.
pub fn log_likelihood(params: &GmmParams, data: &TaskData) -> Result<f64> {
    params.validate()?;
    check_dim(params.dim(), data.p())?;
    let ch = cholesky(&params.sigma, "mixture covariance")?;
    let p = params.dim() as f64;
    let log_det: f64 = ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let norm = -0.5 * (p * (2.0 * std::f64::consts::PI).ln() + log_det);
    let log_w1 = (1.0 - params.w).ln();
    let log_w2 = params.w.ln();
    let mut total = 0.0;
    for i in 0..data.n() {
        let z = data.row(i);
        let r1 = ch.l().solve_lower_triangular(&(&z - &params.mu1)).unwrap();
        let r2 = ch.l().solve_lower_triangular(&(&z - &params.mu2)).unwrap();
        let l1 = log_w1 + norm - 0.5 * r1.norm_squared();
        let l2 = log_w2 + norm - 0.5 * r2.norm_squared();
        total += log_sum_exp(l1, l2);
    }
    Ok(total)
}

pub fn distance_d(a: &ThetaEstimate, b: &ThetaEstimate) -> Result<ParamDistance> {
    let p = a.dim();
    check_dim(p, b.dim())?;
    check_dim(p, a.mu2.len())?;
    check_dim(p, b.mu2.len())?;
    check_dim(p, a.beta.len())?;
    check_dim(p, b.beta.len())?;
    let d = (a.w - b.w)
        .abs()
        .max((&a.mu1 - &b.mu1).norm())
        .max((&a.mu2 - &b.mu2).norm())
        .max((&a.beta - &b.beta).norm());
    Ok(ParamDistance(d))
}

/// Mahalanobis separation `sqrt((mu1 - mu2)^T Sigma^{-1} (mu1 - mu2))`.
pub fn mahalanobis_delta(params: &GmmParams) -> Result<f64> {
    check_dim(params.mu1.len(), params.mu2.len())?;
    check_dim(params.mu1.len(), params.sigma.nrows())?;
    let ch = cholesky(&params.sigma, "mixture covariance")?;
    let diff = &params.mu1 - &params.mu2;
    let r = ch.l().solve_lower_triangular(&diff).unwrap();
    Ok(r.norm())
}

/// Mismatch rate minimized over the two label permutations; always in `[0, 0.5]`.
pub fn mismatch_rate(predicted: &[u8], truth: &[u8]) -> Result<f64> {
    check_dim(truth.len(), predicted.len())?;
    if truth.is_empty() {
        return Err(Error::InvalidData("no labels to compare".into()));
    }
    let wrong = predicted.iter().zip(truth).filter(|(a, b)| a != b).count();
    Ok(wrong.min(truth.len() - wrong) as f64 / truth.len() as f64)
}

/// Empirical mis-clustering error of `classifier` on labeled test data.
pub fn misclustering_error<C: Classifier + ?Sized>(classifier: &C, test: &TaskData) -> Result<f64> {
    let labels = test.labels.as_ref().ok_or(Error::MissingLabels)?;
    let predicted = classifier.predict(&test.z)?;
    mismatch_rate(&predicted, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn theta(w: f64, mu1: Vector, mu2: Vector, beta: Vector) -> ThetaEstimate {
        ThetaEstimate::new(w, mu1, mu2, beta).unwrap()
    }

    fn normal_pdf(z: &Vector, mu: &Vector, sigma: &Matrix) -> f64 {
        let p = z.len() as f64;
        let inv = sigma.clone().try_inverse().unwrap();
        let diff = z - mu;
        let q = (diff.transpose() * inv * &diff)[(0, 0)];
        (-(0.5 * q)).exp() / ((2.0 * std::f64::consts::PI).powf(p / 2.0) * sigma.determinant().sqrt())
    }

    #[test]
    fn posterior_symmetric_weights_zero_beta() {
        let t = theta(0.5, dvector![1.0, 2.0], dvector![3.0, -1.0], dvector![0.0, 0.0]);
        assert_eq!(posterior_gamma(&t, &dvector![10.0, -4.0]).unwrap(), 0.5);
    }

    #[test]
    fn posterior_at_midpoint_is_w() {
        let t = theta(0.3, dvector![1.0, 2.0], dvector![3.0, -1.0], dvector![0.7, -2.0]);
        let g = posterior_gamma(&t, &t.midpoint()).unwrap();
        assert!((g - 0.3).abs() < 1e-15);
    }

    #[test]
    fn posterior_matches_density_ratio() {
        let t = theta(0.5, dvector![2.0, 0.0], dvector![-2.0, 0.0], dvector![4.0, 0.0]);
        let z = dvector![1.0, 0.0];
        let g = posterior_gamma(&t, &z).unwrap();
        let expected = 1.0 / (1.0 + 4f64.exp());
        assert!((g - expected).abs() < 1e-15);
        assert!((g - 0.017_986_209_962_091_56).abs() < 1e-12);

        // independent route: ratio of the two weighted normal densities
        let sigma = Matrix::identity(2, 2);
        let f1 = 0.5 * normal_pdf(&z, &t.mu1, &sigma);
        let f2 = 0.5 * normal_pdf(&z, &t.mu2, &sigma);
        assert!((g - f2 / (f1 + f2)).abs() < 1e-14);
    }

    #[test]
    fn posterior_survives_huge_exponents() {
        let t = theta(0.5, dvector![0.0], dvector![0.0], dvector![1.0]);
        let lo = posterior_gamma(&t, &dvector![1e6]).unwrap();
        let hi = posterior_gamma(&t, &dvector![-1e6]).unwrap();
        assert!(lo > 0.0 && lo.is_finite());
        assert!(hi <= 1.0 && hi.is_finite());
    }

    #[test]
    fn posterior_rejects_dimension_mismatch() {
        let t = theta(0.5, dvector![0.0, 0.0], dvector![0.0, 0.0], dvector![1.0, 0.0]);
        assert!(matches!(
            posterior_gamma(&t, &dvector![1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn classify_examples() {
        let t = theta(0.5, dvector![2.0, 0.0], dvector![-2.0, 0.0], dvector![4.0, 0.0]);
        assert_eq!(bayes_classify(&t, &t.midpoint()).unwrap(), 1);
        assert_eq!(bayes_classify(&t, &dvector![0.1, 5.0]).unwrap(), 1);
        assert_eq!(bayes_classify(&t, &dvector![-0.1, 5.0]).unwrap(), 2);
        assert!(bayes_classify(&t, &dvector![0.1]).is_err());
    }

    #[test]
    fn classify_agrees_with_posterior_on_random_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut disagreements = 0;
        for _ in 0..10_000 {
            let p = rng.gen_range(1..5);
            let v = |rng: &mut rand_chacha::ChaCha8Rng| {
                Vector::from_fn(p, |_, _| rng.gen_range(-3.0..3.0))
            };
            let t = theta(rng.gen_range(0.05..0.95), v(&mut rng), v(&mut rng), v(&mut rng));
            let z = v(&mut rng);
            let label = bayes_classify(&t, &z).unwrap();
            let g = posterior_gamma(&t, &z).unwrap();
            if (label == 1) != (g <= 0.5) {
                disagreements += 1;
            }
        }
        assert_eq!(disagreements, 0);
    }

    #[test]
    fn predict_matches_pointwise_rule() {
        let t = theta(0.4, dvector![1.0, 1.0], dvector![-1.0, 0.5], dvector![2.0, 0.3]);
        let z = dmatrix![0.0, 0.0; 1.0, -1.0; -2.0, 3.0; 0.5, 0.75];
        let rows = t.predict(&z).unwrap();
        for (i, &label) in rows.iter().enumerate() {
            let zi = z.row(i).transpose();
            assert_eq!(label, bayes_classify(&t, &zi).unwrap());
        }
    }

    #[test]
    fn loglik_examples() {
        let one = |z: f64| TaskData::new(dmatrix![z; z], None).unwrap();
        let collapsed = GmmParams::new(0.5, dvector![0.0], dvector![0.0], dmatrix![1.0]).unwrap();
        let ll = log_likelihood(&collapsed, &one(0.0)).unwrap() / 2.0;
        assert!((ll - (-0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-14);
        assert!((ll + 0.918_938_533_204_672_7).abs() < 1e-12);

        let split = GmmParams::new(0.5, dvector![1.0], dvector![-1.0], dmatrix![1.0]).unwrap();
        let ll = log_likelihood(&split, &one(0.0)).unwrap() / 2.0;
        let phi1 = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((ll - phi1.ln()).abs() < 1e-14);
        assert!((ll + 1.418_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn loglik_matches_direct_density_sum() {
        let sigma = dmatrix![1.5, 0.3; 0.3, 0.8];
        let params = GmmParams::new(0.35, dvector![1.0, -0.5], dvector![-1.0, 1.0], sigma.clone()).unwrap();
        let data = TaskData::new(dmatrix![0.2, 0.1; -1.0, 2.0; 3.0, 0.0], None).unwrap();
        let direct: f64 = (0..3)
            .map(|i| {
                let z = data.row(i);
                (0.65 * normal_pdf(&z, &params.mu1, &sigma) + 0.35 * normal_pdf(&z, &params.mu2, &sigma)).ln()
            })
            .sum();
        assert!((log_likelihood(&params, &data).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn loglik_relabel_invariant_and_rejects_non_pd() {
        let params = GmmParams::new(
            0.2,
            dvector![1.0, 2.0],
            dvector![-1.0, 0.0],
            dmatrix![1.0, 0.2; 0.2, 2.0],
        )
        .unwrap();
        let data = TaskData::new(dmatrix![0.0, 1.0; 2.0, 2.0; -3.0, 0.5], None).unwrap();
        let a = log_likelihood(&params, &data).unwrap();
        let b = log_likelihood(&params.swapped(), &data).unwrap();
        assert_eq!(a, b);

        let bad = GmmParams {
            w: 0.5,
            mu1: dvector![0.0, 0.0],
            mu2: dvector![1.0, 0.0],
            sigma: dmatrix![1.0, 2.0; 2.0, 1.0],
        };
        assert!(matches!(log_likelihood(&bad, &data), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn distance_examples() {
        let a = theta(0.5, dvector![0.0, 0.0], dvector![1.0, 1.0], dvector![2.0, 0.0]);
        assert_eq!(distance_d(&a, &a).unwrap().value(), 0.0);
        let mut b = a.clone();
        b.w = 0.6;
        assert!((distance_d(&a, &b).unwrap().value() - 0.1).abs() < 1e-15);
        let c = theta(0.55, dvector![0.2, 0.0], dvector![1.0, 1.1], dvector![2.0, 0.15]);
        assert!((distance_d(&a, &c).unwrap().value() - 0.2).abs() < 1e-15);
        let short = theta(0.5, dvector![0.0], dvector![1.0], dvector![2.0]);
        assert!(distance_d(&a, &short).is_err());
    }

    #[test]
    fn mahalanobis_examples() {
        let same = GmmParams::new(0.5, dvector![1.0], dvector![1.0], dmatrix![2.0]).unwrap();
        assert_eq!(mahalanobis_delta(&same).unwrap(), 0.0);
        let p1 = GmmParams::new(0.5, dvector![2.0], dvector![-2.0], dmatrix![1.0]).unwrap();
        assert!((mahalanobis_delta(&p1).unwrap() - 4.0).abs() < 1e-15);

        // AR(0.2) covariance in five dimensions: solve Sigma x = (4,0,0,0,0) by LU.
        let sigma = crate::linalg::ar1_matrix(5, 0.2);
        let mut mu1 = Vector::zeros(5);
        mu1[0] = 2.0;
        let params = GmmParams::new(0.5, mu1.clone(), -&mu1, sigma.clone()).unwrap();
        let x = sigma.lu().solve(&(&mu1 * 2.0)).unwrap();
        let oracle = (4.0 * x[0]).sqrt();
        assert!((mahalanobis_delta(&params).unwrap() - oracle).abs() < 1e-12);
        // AR(1) precision has (1,1) entry 1 / (1 - rho^2)
        assert!((oracle - 4.0 / (1.0f64 - 0.04).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn misclustering_examples() {
        let truth: Vec<u8> = (0..100).map(|i| if i % 2 == 0 { 1 } else { 2 }).collect();
        assert_eq!(mismatch_rate(&truth, &truth).unwrap(), 0.0);
        let flipped: Vec<u8> = truth.iter().map(|&l| 3 - l).collect();
        assert_eq!(mismatch_rate(&flipped, &truth).unwrap(), 0.0);
        let mut partial = flipped.clone();
        for l in partial.iter_mut().take(30) {
            *l = 3 - *l;
        }
        assert!((mismatch_rate(&partial, &truth).unwrap() - 0.30).abs() < 1e-15);

        let t = theta(0.5, dvector![1.0], dvector![-1.0], dvector![2.0]);
        let unlabeled = TaskData::new(dmatrix![0.0; 1.0], None).unwrap();
        assert!(matches!(misclustering_error(&t, &unlabeled), Err(Error::MissingLabels)));
    }

    #[test]
    fn task_data_validation() {
        assert!(TaskData::new(dmatrix![1.0, 2.0], None).is_err());
        assert!(TaskData::new(dmatrix![1.0; 2.0], Some(vec![1, 3])).is_err());
        assert!(TaskData::new(dmatrix![1.0; 2.0], Some(vec![1])).is_err());
        let t = TaskData::new(dmatrix![1.0; 2.0; 3.0], Some(vec![1, 2, 2])).unwrap();
        let s = t.select_rows(&[2, 0]).unwrap();
        assert_eq!(s.labels.unwrap(), vec![2, 1]);
    }

    fn arb_theta(p: usize) -> impl Strategy<Value = ThetaEstimate> {
        (
            0.01f64..0.99,
            prop::collection::vec(-5.0f64..5.0, 3 * p),
        )
            .prop_map(move |(w, v)| ThetaEstimate {
                w,
                mu1: Vector::from_column_slice(&v[..p]),
                mu2: Vector::from_column_slice(&v[p..2 * p]),
                beta: Vector::from_column_slice(&v[2 * p..]),
            })
    }

    proptest! {
        #[test]
        fn posterior_in_open_unit_interval_and_monotone_in_w(
            t in arb_theta(3),
            z in prop::collection::vec(-3.0f64..3.0, 3),
            dw in 0.001f64..0.2,
        ) {
            let z = Vector::from_vec(z);
            let e = t.beta.dot(&(&z - t.midpoint()));
            prop_assume!(e.abs() < 30.0);
            let g = posterior_gamma(&t, &z).unwrap();
            prop_assert!(g > 0.0 && g < 1.0);
            let mut higher = t.clone();
            higher.w = (t.w + dw).min(0.999);
            prop_assume!(higher.w > t.w);
            prop_assert!(posterior_gamma(&higher, &z).unwrap() >= g);
        }

        #[test]
        fn distance_triangle_inequality(a in arb_theta(2), b in arb_theta(2), c in arb_theta(2)) {
            let ab = distance_d(&a, &b).unwrap().value();
            let bc = distance_d(&b, &c).unwrap().value();
            let ac = distance_d(&a, &c).unwrap().value();
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert_eq!(ab, distance_d(&b, &a).unwrap().value());
        }

        #[test]
        fn misclustering_invariant_to_global_flip(
            labels in prop::collection::vec(1u8..=2, 1..60),
            pred in prop::collection::vec(1u8..=2, 60),
        ) {
            let pred = &pred[..labels.len()];
            let flipped: Vec<u8> = pred.iter().map(|&l| 3 - l).collect();
            let e = mismatch_rate(pred, &labels).unwrap();
            prop_assert!((0.0..=0.5).contains(&e));
            prop_assert_eq!(e, mismatch_rate(&flipped, &labels).unwrap());
        }
    }
}
