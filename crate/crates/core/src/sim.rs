//! Simulation designs, replication harness and metric aggregation.
//!
//! Each replication draws a fresh dataset from one of four designs, builds
//! initial estimates (2-means plus a few EM rounds, then label alignment),
//! runs the requested estimators, and scores them against the truth. Metrics
//! are averaged over the non-outlier tasks (or taken on the target for the
//! transfer designs) and aggregated over replications.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_exhaustive, align_greedy, align_transfer, mu_pairs, Alignment};
use crate::em::{em_single_task, fit_mtl_gmm, EmOptions, MtlOptions, Penalty, TuningSchedule};
use crate::error::{Error, Result};
use crate::gmm::{distance_d, misclustering_error, GmmParams, TaskData, ThetaEstimate};
use crate::linalg::{ar1_matrix, cholesky, regularized_cholesky, spectral_norm_sym, Matrix, Vector};
use crate::prox::clamp_w;
use crate::selection::{cv_select_mtl, cv_select_tl, CvGrid, CvOptions};
use crate::transfer::{fit_tl_gmm, TlOptions, TlPenalty, TlSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    MtlSim1,
    MtlSim2,
    TlSim1,
    TlSim2,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::MtlSim1, Scenario::MtlSim2, Scenario::TlSim1, Scenario::TlSim2];

    pub fn is_transfer(self) -> bool {
        matches!(self, Scenario::TlSim1 | Scenario::TlSim2)
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::MtlSim1 => "mtl-sim1",
            Scenario::MtlSim2 => "mtl-sim2",
            Scenario::TlSim1 => "tl-sim1",
            Scenario::TlSim2 => "tl-sim2",
        }
    }

    /// Methods compared in this design.
    pub fn default_methods(self) -> Vec<Method> {
        if self.is_transfer() {
            vec![Method::TargetOnly, Method::Mtl, Method::MtlCenter, Method::Pooled, Method::Tl]
        } else {
            vec![Method::Single, Method::Pooled, Method::Mtl]
        }
    }

    /// Heterogeneity parameter swept by default.
    pub fn sweep_param(self) -> SweepParam {
        match self {
            Scenario::MtlSim2 => SweepParam::HBeta,
            _ => SweepParam::HMu,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown scenario `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Single,
    Pooled,
    Mtl,
    TargetOnly,
    MtlCenter,
    Tl,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Single,
        Method::Pooled,
        Method::Mtl,
        Method::TargetOnly,
        Method::MtlCenter,
        Method::Tl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Single => "single",
            Method::Pooled => "pooled",
            Method::Mtl => "mtl",
            Method::TargetOnly => "target-only",
            Method::MtlCenter => "mtl-center",
            Method::Tl => "tl",
        }
    }

    pub fn valid_for(self, scenario: Scenario) -> bool {
        match self {
            Method::Pooled | Method::Mtl => true,
            Method::Single => !scenario.is_transfer(),
            Method::TargetOnly | Method::MtlCenter | Method::Tl => scenario.is_transfer(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMethod {
    Exhaustive,
    Greedy,
}

impl FromStr for AlignMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exhaustive" => Ok(AlignMethod::Exhaustive),
            "greedy" => Ok(AlignMethod::Greedy),
            _ => Err(Error::InvalidParameter(format!("unknown alignment method `{s}`"))),
        }
    }
}

/// How the penalty constants are chosen inside each replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimTuning {
    Fixed { mtl: TuningSchedule, tl: TlSchedule },
    Cv { grid: CvGrid, options: CvOptions },
}

impl Default for SimTuning {
    /// Default multi-task schedule; the transfer schedule uses the symmetric
    /// recurrence so that every sample-size term dies out.
    fn default() -> Self {
        SimTuning::Fixed {
            mtl: TuningSchedule::default(),
            tl: TlSchedule {
                symmetric: true,
                ..TlSchedule::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    HW,
    HMu,
    HBeta,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::HW => "h_w",
            SweepParam::HMu => "h_mu",
            SweepParam::HBeta => "h_beta",
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "h_w" => Ok(SweepParam::HW),
            "h_mu" => Ok(SweepParam::HMu),
            "h_beta" => Ok(SweepParam::HBeta),
            _ => Err(Error::InvalidParameter(format!("unknown sweep parameter `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub scenario: Scenario,
    /// Number of tasks; for the transfer designs, the number of sources.
    pub k: usize,
    pub n: usize,
    pub p: usize,
    pub h_w: f64,
    pub h_mu: f64,
    pub h_beta: f64,
    pub n_outliers: usize,
    pub n_test: usize,
    pub reps: usize,
    pub seed: u64,
    pub align: AlignMethod,
    pub tuning: SimTuning,
    /// EM rounds applied to the 2-means start before alignment.
    pub init_em_iters: usize,
    pub em: EmOptions,
}

impl SimConfig {
    /// Defaults of the named design: ten tasks of 100 points in five
    /// dimensions, 500 test points per task, 50 replications.
    pub fn new(scenario: Scenario) -> Self {
        SimConfig {
            scenario,
            k: 10,
            n: 100,
            p: 5,
            h_w: if scenario == Scenario::MtlSim1 { 0.05 } else { 0.15 },
            h_mu: 0.0,
            h_beta: 0.0,
            n_outliers: 0,
            n_test: 500,
            reps: 50,
            seed: 0,
            align: AlignMethod::Exhaustive,
            tuning: SimTuning::default(),
            init_em_iters: 10,
            em: EmOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.k == 0 {
            return bad("at least one task is required".into());
        }
        if self.p == 0 {
            return bad("dimension must be positive".into());
        }
        if self.n < self.p + 2 || self.n_test < 2 {
            return bad(format!("sample sizes n={} n_test={} too small", self.n, self.n_test));
        }
        for (name, h) in [("h_w", self.h_w), ("h_mu", self.h_mu), ("h_beta", self.h_beta)] {
            if !(h >= 0.0 && h.is_finite()) {
                return bad(format!("{name} must be >= 0"));
            }
        }
        if self.h_w >= 1.0 {
            return bad("h_w must be below 1".into());
        }
        if self.n_outliers >= self.k {
            return bad("n_outliers must be below the task count".into());
        }
        if self.scenario == Scenario::TlSim1 && self.n_outliers > 0 {
            return bad("tl-sim1 has no outlier sources".into());
        }
        if self.reps == 0 {
            return bad("reps must be positive".into());
        }
        Ok(())
    }

    pub fn get(&self, param: SweepParam) -> f64 {
        match param {
            SweepParam::HW => self.h_w,
            SweepParam::HMu => self.h_mu,
            SweepParam::HBeta => self.h_beta,
        }
    }

    pub fn set(&mut self, param: SweepParam, v: f64) {
        match param {
            SweepParam::HW => self.h_w = v,
            SweepParam::HMu => self.h_mu = v,
            SweepParam::HBeta => self.h_beta = v,
        }
    }

    /// Generator for replication `rep`: the seed selects the generator and the
    /// replication index selects an independent stream.
    pub fn rep_rng(&self, rep: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep as u64);
        rng
    }
}

/// One simulated dataset. For the transfer designs task 0 is the target.
#[derive(Debug, Clone)]
pub struct SimData {
    pub train: Vec<TaskData>,
    pub test: Vec<TaskData>,
    pub truths: Vec<GmmParams>,
    /// Indices of the non-outlier tasks.
    pub s: Vec<usize>,
    pub target: Option<usize>,
}

#[derive(Clone, Copy)]
enum SecondCluster {
    Gaussian,
    /// Independent Student t coordinates with the given degrees of freedom.
    StudentT(f64),
}

fn unit_sphere<R: Rng + ?Sized>(rng: &mut R, p: usize) -> Vector {
    loop {
        let g = Vector::from_fn(p, |_, _| StandardNormal.sample(rng));
        let norm = g.norm();
        if norm > 0.0 {
            return g / norm;
        }
    }
}

fn e1(p: usize, v: f64) -> Vector {
    let mut x = Vector::zeros(p);
    x[0] = v;
    x
}

fn draw_task<R: Rng + ?Sized>(rng: &mut R, params: &GmmParams, n: usize, second: SecondCluster) -> Result<TaskData> {
    let p = params.dim();
    let l = cholesky(&params.sigma, "simulation covariance")?.l();
    let t = match second {
        SecondCluster::StudentT(df) => Some(StudentT::new(df).map_err(|e| Error::InvalidParameter(e.to_string()))?),
        SecondCluster::Gaussian => None,
    };
    let mut z = Matrix::zeros(n, p);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = if rng.gen::<f64>() < params.w { 2 } else { 1 };
        let row = match (y, &t) {
            (2, Some(t)) => Vector::from_fn(p, |_, _| t.sample(rng)),
            _ => {
                let g = Vector::from_fn(p, |_, _| StandardNormal.sample(rng));
                let mu = if y == 1 { &params.mu1 } else { &params.mu2 };
                mu + &l * g
            }
        };
        z.row_mut(i).copy_from(&row.transpose());
        labels.push(y);
    }
    TaskData::new(z, Some(labels))
}

fn outlier_set<R: Rng + ?Sized>(rng: &mut R, candidates: &[usize], count: usize) -> Vec<bool> {
    let mut out = vec![false; candidates.iter().max().map_or(0, |m| m + 1)];
    for i in sample(rng, candidates.len(), count) {
        out[candidates[i]] = true;
    }
    out
}

fn assemble<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &SimConfig,
    truths: Vec<GmmParams>,
    kinds: Vec<SecondCluster>,
    outlier: &[bool],
    target: Option<usize>,
) -> Result<SimData> {
    let mut train = Vec::with_capacity(truths.len());
    let mut test = Vec::with_capacity(truths.len());
    for (t, &kind) in truths.iter().zip(&kinds) {
        train.push(draw_task(rng, t, cfg.n, kind)?);
        test.push(draw_task(rng, t, cfg.n_test, kind)?);
    }
    let s = (0..truths.len()).filter(|&k| !outlier.get(k).copied().unwrap_or(false)).collect();
    Ok(SimData {
        train,
        test,
        truths,
        s,
        target,
    })
}

/// Truths of the first design for `k` tasks with the given outlier flags.
fn sim1_truths<R: Rng + ?Sized>(rng: &mut R, cfg: &SimConfig, outlier: &[bool], k: usize) -> Result<Vec<GmmParams>> {
    let sigma = ar1_matrix(cfg.p, 0.2);
    (0..k)
        .map(|i| {
            let (w, mu1) = if outlier.get(i).copied().unwrap_or(false) {
                (rng.gen_range(0.2..0.4), unit_sphere(rng, cfg.p) * 0.1)
            } else {
                let w = 0.5 + cfg.h_w * (rng.gen::<f64>() - 0.5);
                (w, e1(cfg.p, 2.0) + unit_sphere(rng, cfg.p) * cfg.h_mu)
            };
            let mu2 = -&mu1;
            GmmParams::new(w, mu1, mu2, sigma.clone())
        })
        .collect()
}

/// First multi-task design: mixing weights near 1/2, first means near
/// `2 e_1` within `h_mu`, symmetric second means, AR(0.2) covariance. Outlier
/// tasks have weights in (0.2, 0.4) and means of norm 0.1.
pub fn gen_mtl_sim1<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<SimData> {
    cfg.validate()?;
    let all: Vec<usize> = (0..cfg.k).collect();
    let outlier = outlier_set(rng, &all, cfg.n_outliers);
    let truths = sim1_truths(rng, cfg, &outlier, cfg.k)?;
    assemble(rng, cfg, truths, vec![SecondCluster::Gaussian; cfg.k], &outlier, None)
}

/// Largest `a` in `[0.5, 1)` (on a `1e-4` grid) with
/// `||AR(a)^-1 AR(0.5) beta_1 - beta_1|| <= h_beta`, where `beta_1 = 2.5 e_1`.
pub fn sim2_correlation(p: usize, h_beta: f64) -> Result<f64> {
    if !(h_beta >= 0.0) {
        return Err(Error::InvalidParameter("h_beta must be >= 0".into()));
    }
    let target = ar1_matrix(p, 0.5) * e1(p, 2.5);
    let gap = |a: f64| -> Result<f64> {
        let beta = cholesky(&ar1_matrix(p, a), "AR covariance")?.solve(&target);
        Ok((beta - e1(p, 2.5)).norm())
    };
    if gap(0.5)? > h_beta {
        return Err(Error::InvalidParameter(format!("h_beta = {h_beta} is infeasible")));
    }
    let top = 1.0 - 1e-4;
    if gap(top)? <= h_beta {
        return Ok(top);
    }
    let (mut lo, mut hi) = (0.5, top);
    while hi - lo > 1e-5 {
        let mid = 0.5 * (lo + hi);
        if gap(mid)? <= h_beta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Second multi-task design: every task in `S` shares the first mean
/// `AR(0.5) * 2.5 e_1` and a zero second mean, while half of them use an
/// AR(a) covariance so that the discriminant directions differ by at most
/// `h_beta`. Task 0 is always in `S`. Outlier tasks mix a Gaussian cluster
/// with mean `Sigma * (-2.5, ..., -2.5)` and a Student t(4) cluster.
pub fn gen_mtl_sim2<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<SimData> {
    cfg.validate()?;
    let a = sim2_correlation(cfg.p, cfg.h_beta)?;
    let base = ar1_matrix(cfg.p, 0.5);
    let mu1 = &base * e1(cfg.p, 2.5);
    let rest: Vec<usize> = (1..cfg.k).collect();
    let outlier = outlier_set(rng, &rest, cfg.n_outliers);
    let mut truths = Vec::with_capacity(cfg.k);
    let mut kinds = Vec::with_capacity(cfg.k);
    for i in 0..cfg.k {
        let sigma = if i > 0 && rng.gen::<bool>() { ar1_matrix(cfg.p, a) } else { base.clone() };
        if outlier.get(i).copied().unwrap_or(false) {
            let w = rng.gen_range(0.2..0.4);
            let m1 = &sigma * Vector::from_element(cfg.p, -2.5);
            truths.push(GmmParams::new(w, m1, Vector::zeros(cfg.p), sigma)?);
            kinds.push(SecondCluster::StudentT(4.0));
        } else {
            let w = 0.5 + cfg.h_w * (rng.gen::<f64>() - 0.5);
            truths.push(GmmParams::new(w, mu1.clone(), Vector::zeros(cfg.p), sigma)?);
            kinds.push(SecondCluster::Gaussian);
        }
    }
    assemble(rng, cfg, truths, kinds, &outlier, None)
}

/// First transfer design: `k` identical sources (`w = 1/2`, means `+-2 e_1`,
/// AR(0.2)) and a target at index 0 whose weight and means are perturbed by
/// `h_w` and `h_mu`.
pub fn gen_tl_sim1<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<SimData> {
    cfg.validate()?;
    let sigma = ar1_matrix(cfg.p, 0.2);
    let w0 = 0.5 + cfg.h_w * (rng.gen::<f64>() - 0.5);
    let mu0 = e1(cfg.p, 2.0) + unit_sphere(rng, cfg.p) * cfg.h_mu;
    let mut truths = vec![GmmParams::new(w0, mu0.clone(), -mu0, sigma.clone())?];
    for _ in 0..cfg.k {
        truths.push(GmmParams::new(0.5, e1(cfg.p, 2.0), e1(cfg.p, -2.0), sigma.clone())?);
    }
    let n = truths.len();
    assemble(rng, cfg, truths, vec![SecondCluster::Gaussian; n], &[], Some(0))
}

/// Second transfer design: the first multi-task design with `k + 1` tasks,
/// task 0 being the target (never an outlier).
pub fn gen_tl_sim2<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<SimData> {
    cfg.validate()?;
    let sources: Vec<usize> = (1..=cfg.k).collect();
    let outlier = outlier_set(rng, &sources, cfg.n_outliers);
    let truths = sim1_truths(rng, cfg, &outlier, cfg.k + 1)?;
    assemble(rng, cfg, truths, vec![SecondCluster::Gaussian; cfg.k + 1], &outlier, Some(0))
}

pub fn generate<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<SimData> {
    match cfg.scenario {
        Scenario::MtlSim1 => gen_mtl_sim1(cfg, rng),
        Scenario::MtlSim2 => gen_mtl_sim2(cfg, rng),
        Scenario::TlSim1 => gen_tl_sim1(cfg, rng),
        Scenario::TlSim2 => gen_tl_sim2(cfg, rng),
    }
}

/// 2-means with farthest-pair seeding: the first seed is the point farthest
/// from the sample mean and the second the point farthest from the first.
/// Returns labels in `{1, 2}`.
pub fn two_means(data: &TaskData) -> Result<Vec<u8>> {
    let n = data.n();
    let rows: Vec<Vector> = (0..n).map(|i| data.row(i)).collect();
    let mean = data.z.row_mean().transpose();
    let far = |from: &Vector| {
        (0..n)
            .map(|i| ((&rows[i] - from).norm_squared(), i))
            .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a })
            .1
    };
    let a = far(&mean);
    let b = far(&rows[a]);
    let mut c1 = rows[a].clone();
    let mut c2 = rows[b].clone();
    let mut labels = vec![0u8; n];
    for _ in 0..100 {
        let next: Vec<u8> = rows
            .iter()
            .map(|z| if (z - &c1).norm_squared() <= (z - &c2).norm_squared() { 1 } else { 2 })
            .collect();
        if next == labels {
            break;
        }
        labels = next;
        let (m1, m2) = group_means(&rows, &labels)?;
        c1 = m1;
        c2 = m2;
    }
    Ok(labels)
}

fn group_means(rows: &[Vector], labels: &[u8]) -> Result<(Vector, Vector)> {
    let p = rows[0].len();
    let (mut s1, mut s2) = (Vector::zeros(p), Vector::zeros(p));
    let (mut n1, mut n2) = (0usize, 0usize);
    for (z, &l) in rows.iter().zip(labels) {
        if l == 1 {
            s1 += z;
            n1 += 1;
        } else {
            s2 += z;
            n2 += 1;
        }
    }
    if n1 == 0 || n2 == 0 {
        return Err(Error::InvalidData("2-means produced an empty cluster".into()));
    }
    Ok((s1 / n1 as f64, s2 / n2 as f64))
}

/// Parameter estimate implied by a hard labeling: cluster proportions,
/// cluster means, pooled within-cluster covariance.
pub fn theta_from_labels(data: &TaskData, labels: &[u8]) -> Result<(ThetaEstimate, Matrix)> {
    let rows: Vec<Vector> = (0..data.n()).map(|i| data.row(i)).collect();
    let (m1, m2) = group_means(&rows, labels)?;
    let p = data.p();
    let mut sigma = Matrix::zeros(p, p);
    for (z, &l) in rows.iter().zip(labels) {
        let r = if l == 1 { z - &m1 } else { z - &m2 };
        sigma += &r * r.transpose();
    }
    sigma /= data.n() as f64;
    let ch = regularized_cholesky(&mut sigma)?;
    let n2 = labels.iter().filter(|&&l| l == 2).count();
    let w = clamp_w(n2 as f64 / data.n() as f64);
    let beta = ch.solve(&(&m1 - &m2));
    Ok((ThetaEstimate::new(w, m1, m2, beta)?, sigma))
}

/// 2-means followed by `em_iters` EM rounds; falls back to the 2-means
/// estimate if EM breaks down.
pub fn initial_estimate(data: &TaskData, em_iters: usize) -> Result<ThetaEstimate> {
    let labels = two_means(data)?;
    let (theta, _) = theta_from_labels(data, &labels)?;
    if em_iters == 0 {
        return Ok(theta);
    }
    let opts = EmOptions {
        max_iter: em_iters,
        tol: 0.0,
        record_path: false,
    };
    Ok(em_single_task(data, &theta, &opts).map(|f| f.theta).unwrap_or(theta))
}

/// Errors of one estimate against the truth (labels resolved to the closer
/// truth labeling).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepMetrics {
    pub w: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub beta: f64,
    /// Spectral-norm covariance error; absent when the method yields no covariance.
    pub sigma: Option<f64>,
    pub test_error: f64,
}

impl RepMetrics {
    pub const NAMES: [&'static str; 6] = ["w_error", "mu1_error", "mu2_error", "beta_error", "sigma_error", "test_error"];

    fn values(&self) -> [Option<f64>; 6] {
        [Some(self.w), Some(self.mu1), Some(self.mu2), Some(self.beta), self.sigma, Some(self.test_error)]
    }

    fn average(items: &[RepMetrics]) -> RepMetrics {
        let m = items.len() as f64;
        let mean = |f: &dyn Fn(&RepMetrics) -> f64| items.iter().map(f).sum::<f64>() / m;
        let sigma = if items.iter().all(|r| r.sigma.is_some()) {
            Some(mean(&|r| r.sigma.unwrap()))
        } else {
            None
        };
        RepMetrics {
            w: mean(&|r| r.w),
            mu1: mean(&|r| r.mu1),
            mu2: mean(&|r| r.mu2),
            beta: mean(&|r| r.beta),
            sigma,
            test_error: mean(&|r| r.test_error),
        }
    }
}

/// Scores `theta` (and optionally `sigma`) on one task.
pub fn score_estimate(theta: &ThetaEstimate, sigma: Option<&Matrix>, truth: &GmmParams, test: &TaskData) -> Result<RepMetrics> {
    let t = truth.theta()?;
    let ts = t.swapped();
    let t = if distance_d(theta, &ts)?.value() < distance_d(theta, &t)?.value() { ts } else { t };
    Ok(RepMetrics {
        w: (theta.w - t.w).abs(),
        mu1: (&theta.mu1 - &t.mu1).norm(),
        mu2: (&theta.mu2 - &t.mu2).norm(),
        beta: (&theta.beta - &t.beta).norm(),
        sigma: sigma.map(|s| spectral_norm_sym(&(s - &truth.sigma))),
        test_error: misclustering_error(theta, test)?,
    })
}

/// Metrics of every method that succeeded in one replication.
#[derive(Debug, Default)]
pub struct RepOutcome {
    pub metrics: Vec<(Method, Result<RepMetrics>)>,
}

fn align_inits(inits: &[ThetaEstimate], how: AlignMethod) -> Result<Vec<ThetaEstimate>> {
    let pairs = mu_pairs(inits);
    let a = match how {
        AlignMethod::Exhaustive => align_exhaustive(&pairs)?,
        AlignMethod::Greedy => align_greedy(&pairs)?,
    };
    a.apply(inits)
}

fn pooled_fit(tasks: &[TaskData], cfg: &SimConfig) -> Result<(ThetaEstimate, Matrix)> {
    let refs: Vec<&TaskData> = tasks.iter().collect();
    let all = TaskData::concat(&refs)?;
    let init = initial_estimate(&all, cfg.init_em_iters)?;
    let fit = em_single_task(&all, &init, &cfg.em)?;
    Ok((fit.theta, fit.sigma))
}

fn mtl_penalty(cfg: &SimConfig, tasks: &[TaskData], inits: &[ThetaEstimate], cv_seed: u64) -> Result<Penalty> {
    Ok(match &cfg.tuning {
        SimTuning::Fixed { mtl, .. } => Penalty::Schedule(*mtl),
        SimTuning::Cv { grid, options } => {
            let grid = CvGrid { seed: cv_seed, ..grid.clone() };
            Penalty::Schedule(cv_select_mtl(tasks, inits, &grid, options)?.0)
        }
    })
}

fn over_s(
    data: &SimData,
    f: impl Fn(usize) -> Result<(ThetaEstimate, Option<Matrix>)>,
) -> Result<RepMetrics> {
    let scored: Result<Vec<RepMetrics>> = data
        .s
        .iter()
        .map(|&k| {
            let (theta, sigma) = f(k)?;
            score_estimate(&theta, sigma.as_ref(), &data.truths[k], &data.test[k]).map_err(|e| e.in_task(k))
        })
        .collect();
    Ok(RepMetrics::average(&scored?))
}

fn run_mtl_rep(cfg: &SimConfig, data: &SimData, methods: &[Method], cv_seed: u64) -> Result<RepOutcome> {
    let inits: Vec<ThetaEstimate> = data
        .train
        .iter()
        .enumerate()
        .map(|(k, t)| initial_estimate(t, cfg.init_em_iters).map_err(|e| e.in_task(k)))
        .collect::<Result<_>>()?;
    let aligned = align_inits(&inits, cfg.align)?;
    let mut out = RepOutcome::default();
    for &m in methods {
        let r = match m {
            Method::Single => over_s(data, |k| {
                let f = em_single_task(&data.train[k], &aligned[k], &cfg.em)?;
                Ok((f.theta, Some(f.sigma)))
            }),
            Method::Pooled => pooled_fit(&data.train, cfg).and_then(|(theta, sigma)| {
                over_s(data, |_| Ok((theta.clone(), Some(sigma.clone()))))
            }),
            Method::Mtl => mtl_penalty(cfg, &data.train, &aligned, cv_seed)
                .and_then(|pen| fit_mtl_gmm(&data.train, &aligned, &pen, &MtlOptions::default()))
                .and_then(|fit| over_s(data, |k| Ok((fit.per_task[k].clone(), Some(fit.sigmas[k].clone()))))),
            _ => Err(Error::InvalidParameter(format!("method {m} does not apply to {}", cfg.scenario))),
        };
        out.metrics.push((m, r));
    }
    Ok(out)
}

fn run_tl_rep(cfg: &SimConfig, data: &SimData, methods: &[Method], cv_seed: u64) -> Result<RepOutcome> {
    let inits: Vec<ThetaEstimate> = data
        .train
        .iter()
        .enumerate()
        .map(|(k, t)| initial_estimate(t, cfg.init_em_iters).map_err(|e| e.in_task(k)))
        .collect::<Result<_>>()?;
    let source_pairs = mu_pairs(&inits[1..]);
    let source_alignment = match cfg.align {
        AlignMethod::Exhaustive => align_exhaustive(&source_pairs)?,
        AlignMethod::Greedy => align_greedy(&source_pairs)?,
    };
    let full: Alignment = align_transfer(&(inits[0].mu1.clone(), inits[0].mu2.clone()), &source_alignment, &source_pairs)?;
    let aligned = full.apply(&inits)?;
    let sources = &data.train[1..];
    let target = &data.train[0];
    let needs_sources = methods.iter().any(|m| matches!(m, Method::MtlCenter | Method::Tl));
    let source_fit = if needs_sources {
        Some(
            mtl_penalty(cfg, sources, &aligned[1..], cv_seed)
                .and_then(|pen| fit_mtl_gmm(sources, &aligned[1..], &pen, &MtlOptions::default())),
        )
    } else {
        None
    };
    let score = |theta: &ThetaEstimate, sigma: Option<&Matrix>| score_estimate(theta, sigma, &data.truths[0], &data.test[0]);
    let source_err = |e: &Error| Error::InvalidData(format!("source fit failed: {e}"));
    let mut out = RepOutcome::default();
    for &m in methods {
        let r = match m {
            Method::TargetOnly => em_single_task(target, &aligned[0], &cfg.em).and_then(|f| score(&f.theta, Some(&f.sigma))),
            Method::Pooled => pooled_fit(&data.train, cfg).and_then(|(t, s)| score(&t, Some(&s))),
            Method::Mtl => mtl_penalty(cfg, &data.train, &aligned, cv_seed)
                .and_then(|pen| fit_mtl_gmm(&data.train, &aligned, &pen, &MtlOptions::default()))
                .and_then(|fit| score(&fit.per_task[0], Some(&fit.sigmas[0]))),
            Method::MtlCenter => match source_fit.as_ref().unwrap() {
                Ok(fit) => score(&fit.centers.as_theta(), None),
                Err(e) => Err(source_err(e)),
            },
            Method::Tl => match source_fit.as_ref().unwrap() {
                Ok(fit) => {
                    let penalty = match &cfg.tuning {
                        SimTuning::Fixed { tl, .. } => Ok(TlPenalty::Schedule(*tl)),
                        SimTuning::Cv { grid, options } => {
                            let grid = CvGrid { seed: cv_seed, ..grid.clone() };
                            cv_select_tl(target, &aligned[0], &fit.centers, &grid, options).map(|(s, _)| TlPenalty::Schedule(s))
                        }
                    };
                    penalty
                        .and_then(|pen| fit_tl_gmm(target, &aligned[0], &fit.centers, &pen, &TlOptions::default()))
                        .and_then(|f| score(&f.theta0, Some(&f.sigma0)))
                }
                Err(e) => Err(source_err(e)),
            },
            _ => Err(Error::InvalidParameter(format!("method {m} does not apply to {}", cfg.scenario))),
        };
        out.metrics.push((m, r));
    }
    Ok(out)
}

fn canonical_methods(cfg: &SimConfig, methods: &[Method]) -> Result<Vec<Method>> {
    let mut ms = methods.to_vec();
    ms.sort();
    ms.dedup();
    if ms.is_empty() {
        return Err(Error::InvalidParameter("no methods requested".into()));
    }
    if let Some(m) = ms.iter().find(|m| !m.valid_for(cfg.scenario)) {
        return Err(Error::InvalidParameter(format!("method {m} does not apply to {}", cfg.scenario)));
    }
    Ok(ms)
}

/// Runs replication `rep` for the given (valid, deduplicated) methods.
pub fn run_replication(cfg: &SimConfig, methods: &[Method], rep: usize) -> Result<RepOutcome> {
    let ms = canonical_methods(cfg, methods)?;
    let mut rng = cfg.rep_rng(rep);
    let data = generate(cfg, &mut rng)?;
    let cv_seed = rng.gen();
    if cfg.scenario.is_transfer() {
        run_tl_rep(cfg, &data, &ms, cv_seed)
    } else {
        run_mtl_rep(cfg, &data, &ms, cv_seed)
    }
}

/// One aggregated line of the metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    pub method: String,
    pub sweep_param: String,
    pub sweep_value: f64,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub reps_ok: usize,
    pub reps_failed: usize,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Runs `cfg.reps` replications in parallel and aggregates each metric per
/// method. A replication that fails for a method counts toward that
/// method's `reps_failed` and is excluded from its averages.
pub fn run_replications(cfg: &SimConfig, methods: &[Method]) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    let ms = canonical_methods(cfg, methods)?;
    let outcomes: Vec<Result<RepOutcome>> = (0..cfg.reps).into_par_iter().map(|r| run_replication(cfg, &ms, r)).collect();
    let param = cfg.scenario.sweep_param();
    let mut rows = Vec::new();
    for (mi, &m) in ms.iter().enumerate() {
        let mut ok = Vec::new();
        let mut failed = 0;
        for o in &outcomes {
            match o.as_ref().map(|o| &o.metrics[mi].1) {
                Ok(Ok(r)) => ok.push(*r),
                _ => failed += 1,
            }
        }
        for (j, name) in RepMetrics::NAMES.iter().enumerate() {
            let xs: Vec<f64> = ok.iter().filter_map(|r| r.values()[j]).collect();
            if xs.is_empty() && !ok.is_empty() {
                continue;
            }
            let (mean, sd) = mean_sd(&xs);
            rows.push(MetricRow {
                scenario: cfg.scenario.name().into(),
                method: m.name().into(),
                sweep_param: param.name().into(),
                sweep_value: cfg.get(param),
                metric: name.to_string(),
                mean,
                sd,
                reps_ok: ok.len(),
                reps_failed: failed,
            });
        }
    }
    Ok(rows)
}

/// [`run_replications`] at each value of `param`.
pub fn sweep(cfg: &SimConfig, param: SweepParam, values: &[f64], methods: &[Method]) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for &v in values {
        let mut c = cfg.clone();
        c.set(param, v);
        let mut r = run_replications(&c, methods)?;
        for row in &mut r {
            row.sweep_param = param.name().into();
            row.sweep_value = v;
        }
        rows.extend(r);
    }
    Ok(rows)
}

/// Looks up the mean of `metric` for `method` at `sweep_value`.
pub fn lookup(rows: &[MetricRow], method: Method, sweep_value: f64, metric: &str) -> Option<f64> {
    rows.iter()
        .find(|r| r.method == method.name() && r.sweep_value == sweep_value && r.metric == metric)
        .map(|r| r.mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateMethod {
    Single,
    Mtl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateProbeConfig {
    pub method: RateMethod,
    pub p: usize,
    /// Tasks in the multi-task fit (ignored for single-task EM).
    pub k: usize,
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub bootstrap: usize,
}

impl RateProbeConfig {
    pub fn new(method: RateMethod) -> Self {
        RateProbeConfig {
            method,
            p: 5,
            k: 10,
            n_list: vec![100, 400, 1600],
            reps: 100,
            seed: 0,
            bootstrap: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateProbe {
    pub n_list: Vec<usize>,
    /// Mean over replications of the task-averaged `d` at each sample size.
    pub mean_d: Vec<f64>,
    pub slope: f64,
    /// 95% percentile bootstrap interval of the slope (replications resampled).
    pub ci: (f64, f64),
    pub reps_failed: usize,
}

/// Least-squares slope of `y` against `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn probe_rep(cfg: &RateProbeConfig, n: usize, rep: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(((n as u64) << 32) | rep as u64);
    let truth = GmmParams::new(0.5, e1(cfg.p, 2.0), e1(cfg.p, -2.0), ar1_matrix(cfg.p, 0.2))?;
    let theta_star = truth.theta()?;
    let k = if cfg.method == RateMethod::Single { 1 } else { cfg.k };
    let tasks: Vec<TaskData> = (0..k).map(|_| draw_task(&mut rng, &truth, n, SecondCluster::Gaussian)).collect::<Result<_>>()?;
    let inits: Vec<ThetaEstimate> = tasks.iter().map(|t| initial_estimate(t, 10)).collect::<Result<_>>()?;
    let inits = align_inits(&inits, AlignMethod::Exhaustive)?;
    let estimates = match cfg.method {
        RateMethod::Single => vec![em_single_task(&tasks[0], &inits[0], &EmOptions::default())?.theta],
        RateMethod::Mtl => fit_mtl_gmm(&tasks, &inits, &Penalty::Schedule(TuningSchedule::default()), &MtlOptions::default())?.per_task,
    };
    let mut total = 0.0;
    for e in &estimates {
        let d = distance_d(e, &theta_star)?.value().min(distance_d(e, &theta_star.swapped())?.value());
        total += d;
    }
    Ok(total / estimates.len() as f64)
}

/// Empirical convergence rate: slope of `log(mean d)` against `log(n_S)`
/// for identical tasks.
pub fn rate_probe(cfg: &RateProbeConfig) -> Result<RateProbe> {
    if cfg.n_list.len() < 2 || cfg.reps == 0 || cfg.p == 0 {
        return Err(Error::InvalidParameter("rate probe needs two sample sizes and at least one replication".into()));
    }
    let k = if cfg.method == RateMethod::Single { 1 } else { cfg.k };
    let jobs: Vec<(usize, usize)> = cfg.n_list.iter().flat_map(|&n| (0..cfg.reps).map(move |r| (n, r))).collect();
    let ds: Vec<Result<f64>> = jobs.par_iter().map(|&(n, r)| probe_rep(cfg, n, r)).collect();
    let mut per_n: Vec<Vec<f64>> = vec![Vec::new(); cfg.n_list.len()];
    let mut failed = 0;
    for (&(n, _), d) in jobs.iter().zip(ds) {
        let i = cfg.n_list.iter().position(|&m| m == n).unwrap();
        match d {
            Ok(v) => per_n[i].push(v),
            Err(_) => failed += 1,
        }
    }
    if per_n.iter().any(|v| v.is_empty()) {
        return Err(Error::InvalidData("every replication failed at some sample size".into()));
    }
    let x: Vec<f64> = cfg.n_list.iter().map(|&n| ((n * k) as f64).ln()).collect();
    let mean_d: Vec<f64> = per_n.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let slope = ls_slope(&x, &mean_d.iter().map(|m| m.ln()).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut boot: Vec<f64> = (0..cfg.bootstrap)
        .map(|_| {
            let y: Vec<f64> = per_n
                .iter()
                .map(|v| (0..v.len()).map(|_| v[rng.gen_range(0..v.len())]).sum::<f64>() / v.len() as f64)
                .map(f64::ln)
                .collect();
            ls_slope(&x, &y)
        })
        .collect();
    boot.sort_by(f64::total_cmp);
    let ci = if boot.is_empty() {
        (slope, slope)
    } else {
        let at = |q: f64| boot[((q * (boot.len() - 1) as f64).round() as usize).min(boot.len() - 1)];
        (at(0.025), at(0.975))
    };
    Ok(RateProbe {
        n_list: cfg.n_list.clone(),
        mean_d,
        slope,
        ci,
        reps_failed: failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn cfg(s: Scenario) -> SimConfig {
        SimConfig {
            reps: 2,
            n_test: 200,
            ..SimConfig::new(s)
        }
    }

    #[test]
    fn identical_truths_without_heterogeneity() {
        let mut c = cfg(Scenario::MtlSim1);
        c.h_w = 0.0;
        let d = gen_mtl_sim1(&c, &mut c.rep_rng(0)).unwrap();
        for t in &d.truths {
            assert_eq!(t.w, 0.5);
            assert_eq!(t.mu1, dvector![2.0, 0.0, 0.0, 0.0, 0.0]);
            assert_eq!(t.mu2, -&t.mu1);
        }
        assert_eq!(d.s, (0..10).collect::<Vec<_>>());
        assert_eq!(d.train[0].n(), 100);
        assert_eq!(d.test[0].n(), 200);
    }

    #[test]
    fn outlier_count_and_generator_reproducibility() {
        let mut c = cfg(Scenario::MtlSim1);
        c.n_outliers = 2;
        let a = gen_mtl_sim1(&c, &mut c.rep_rng(3)).unwrap();
        let b = gen_mtl_sim1(&c, &mut c.rep_rng(3)).unwrap();
        assert_eq!(a.s.len(), 8);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        for k in (0..10).filter(|k| !a.s.contains(k)) {
            assert!((a.truths[k].mu1.norm() - 0.1).abs() < 1e-12);
            assert!(a.truths[k].w >= 0.2 && a.truths[k].w < 0.4);
        }
        let other = gen_mtl_sim1(&c, &mut c.rep_rng(4)).unwrap();
        assert_ne!(a.train, other.train);
    }

    #[test]
    fn cluster_means_converge() {
        let mut c = cfg(Scenario::MtlSim1);
        c.n_test = 4000;
        let d = gen_mtl_sim1(&c, &mut c.rep_rng(0)).unwrap();
        let test = &d.test[0];
        let labels = test.labels.as_ref().unwrap();
        let rows: Vec<usize> = (0..test.n()).filter(|&i| labels[i] == 1).collect();
        let mean = test.z.select_rows(&rows).row_mean().transpose();
        let bound = 3.0 / (rows.len() as f64).sqrt();
        for j in 0..5 {
            assert!((mean[j] - d.truths[0].mu1[j]).abs() < bound);
        }
    }

    #[test]
    fn weight_marginal_mean() {
        let mut c = cfg(Scenario::MtlSim1);
        c.h_w = 0.2;
        c.n = 10;
        c.n_test = 2;
        let mut ws = Vec::new();
        for rep in 0..200 {
            ws.extend(gen_mtl_sim1(&c, &mut c.rep_rng(rep)).unwrap().truths.iter().map(|t| t.w));
        }
        let (m, _) = mean_sd(&ws);
        assert!((m - 0.5).abs() < 3.0 * (0.2 / 12f64.sqrt()) / (ws.len() as f64).sqrt());
    }

    #[test]
    fn sim2_shared_mean_and_correlation_search() {
        let c = cfg(Scenario::MtlSim2);
        let d = gen_mtl_sim2(&c, &mut c.rep_rng(0)).unwrap();
        let expect = dvector![2.5, 1.25, 0.625, 0.3125, 0.15625];
        for t in &d.truths {
            assert!((&t.mu1 - &expect).norm() < 1e-12);
            assert!((&t.sigma - ar1_matrix(5, 0.5)).norm() < 1e-15);
        }
        let gap = |a: f64| {
            let b = ar1_matrix(5, a).cholesky().unwrap().solve(&expect);
            (b - dvector![2.5, 0.0, 0.0, 0.0, 0.0]).norm()
        };
        let grid: Vec<f64> = (0..100).map(|i| gap(0.5 + 0.00499 * i as f64)).collect();
        assert!(grid.windows(2).all(|w| w[1] >= w[0]));
        for h in [0.2, 0.8, 1.5, 2.0] {
            let a = sim2_correlation(5, h).unwrap();
            assert!(gap(a) <= h);
            if a < 1.0 - 1e-4 {
                assert!(gap(a + 1e-4) > h);
            }
        }
        assert_eq!(sim2_correlation(5, 0.0).unwrap(), 0.5);
        assert!(sim2_correlation(5, -1.0).is_err());
    }

    #[test]
    fn sim2_task_zero_never_outlier() {
        let mut c = cfg(Scenario::MtlSim2);
        c.n_outliers = 2;
        c.h_beta = 1.0;
        for rep in 0..20 {
            let d = gen_mtl_sim2(&c, &mut c.rep_rng(rep)).unwrap();
            assert_eq!(d.s[0], 0);
            assert_eq!(d.s.len(), 8);
            for t in &d.truths {
                assert!(t.sigma.clone().cholesky().is_some());
            }
        }
    }

    #[test]
    fn tl_designs() {
        let c = cfg(Scenario::TlSim1);
        let d = gen_tl_sim1(&c, &mut c.rep_rng(0)).unwrap();
        assert_eq!(d.train.len(), 11);
        assert_eq!(d.target, Some(0));
        assert_eq!(d.truths[0].mu1, d.truths[1].mu1);
        let mut c2 = cfg(Scenario::TlSim2);
        c2.n_outliers = 2;
        let d = gen_tl_sim2(&c2, &mut c2.rep_rng(0)).unwrap();
        assert_eq!(d.train.len(), 11);
        assert_eq!(d.s.len(), 9);
        assert_eq!(d.s[0], 0);
    }

    #[test]
    fn two_means_separates_clusters() {
        let c = cfg(Scenario::MtlSim1);
        let d = gen_mtl_sim1(&c, &mut c.rep_rng(1)).unwrap();
        let labels = two_means(&d.train[0]).unwrap();
        let err = crate::gmm::mismatch_rate(&labels, d.train[0].labels.as_ref().unwrap()).unwrap();
        assert!(err < 0.1);
        let init = initial_estimate(&d.train[0], 10).unwrap();
        let truth = d.truths[0].theta().unwrap();
        let dd = distance_d(&init, &truth).unwrap().value().min(distance_d(&init, &truth.swapped()).unwrap().value());
        assert!(dd < 2.0, "{dd}");
    }

    #[test]
    fn score_resolves_label_flip() {
        let truth = GmmParams::new(0.4, dvector![1.0], dvector![-1.0], Matrix::identity(1, 1)).unwrap();
        let test = TaskData::new(Matrix::from_column_slice(3, 1, &[1.0, -1.0, 2.0]), Some(vec![1, 2, 1])).unwrap();
        let est = truth.theta().unwrap().swapped();
        let m = score_estimate(&est, Some(&truth.sigma), &truth, &test).unwrap();
        assert!(m.w < 1e-15 && m.mu1 == 0.0 && m.beta == 0.0);
        assert_eq!(m.sigma, Some(0.0));
        assert_eq!(m.test_error, 0.0);
    }

    #[test]
    fn one_rep_table_and_method_order_invariance() {
        let mut c = cfg(Scenario::MtlSim1);
        c.reps = 1;
        let rows = run_replications(&c, &[Method::Single]).unwrap();
        assert_eq!(rows.len(), RepMetrics::NAMES.len());
        assert!(rows.iter().all(|r| r.reps_ok == 1 && r.reps_failed == 0 && r.sd == 0.0));

        c.reps = 2;
        let a = run_replications(&c, &[Method::Mtl, Method::Single, Method::Pooled]).unwrap();
        let b = run_replications(&c, &[Method::Pooled, Method::Mtl, Method::Single]).unwrap();
        assert_eq!(a, b);
        for r in a.iter().filter(|r| r.metric == "test_error") {
            assert!(r.mean >= 0.0 && r.mean <= 0.5);
        }
        assert!(run_replications(&c, &[Method::Tl]).is_err());
    }

    #[test]
    fn transfer_rep_runs_every_method() {
        let c = cfg(Scenario::TlSim1);
        let rows = run_replications(&c, &c.scenario.default_methods()).unwrap();
        for m in c.scenario.default_methods() {
            assert_eq!(lookup(&rows, m, 0.0, "test_error").map(|v| v <= 0.5), Some(true), "{m}");
        }
        assert!(!rows.iter().any(|r| r.method == "mtl-center" && r.metric == "sigma_error"));
    }

    #[test]
    fn slope_and_stats_helpers() {
        assert!((ls_slope(&[0.0, 1.0, 2.0], &[1.0, 0.5, 0.0]) + 0.5).abs() < 1e-15);
        assert_eq!(mean_sd(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_sd(&[4.0]), (4.0, 0.0));
        assert!(mean_sd(&[]).0.is_nan());
    }

    #[test]
    fn bootstrap_interval_narrows_with_reps() {
        for seed in 0..3 {
            let mut small = RateProbeConfig::new(RateMethod::Single);
            small.n_list = vec![50, 200];
            small.reps = 10;
            small.seed = seed;
            small.bootstrap = 400;
            let mut big = small.clone();
            big.reps = 40;
            let a = rate_probe(&small).unwrap();
            let b = rate_probe(&big).unwrap();
            assert!(b.ci.1 - b.ci.0 < a.ci.1 - a.ci.0, "seed {seed}");
        }
    }

    #[test]
    fn names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("sim3".parse::<Scenario>().is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn generators_are_reproducible_with_pd_covariances(seed in proptest::num::u64::ANY, rep in 0usize..1000, which in 0usize..4) {
            let c = SimConfig { seed, k: 3, n_test: 20, n_outliers: usize::from(which != 2), h_mu: 1.0, h_beta: 1.0, ..SimConfig::new(Scenario::ALL[which]) };
            let a = generate(&c, &mut c.rep_rng(rep)).unwrap();
            let b = generate(&c, &mut c.rep_rng(rep)).unwrap();
            proptest::prop_assert_eq!(&a.train, &b.train);
            proptest::prop_assert_eq!(&a.test, &b.test);
            proptest::prop_assert_eq!(&a.truths, &b.truths);
            for t in &a.truths {
                proptest::prop_assert!(t.sigma.clone().cholesky().is_some());
            }
        }
    }
}
