//! Cluster-label alignment across tasks.
//!
//! Each task's two cluster labels are arbitrary, so before pooling information
//! the labels are matched so that similar clusters share an index. An
//! alignment is the pair of vectors `(r, r')` with `{r_k, r'_k} = {1, 2}`: the
//! aligned first mean of task `k` is its estimated mean number `r_k`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gmm::ThetaEstimate;
use crate::linalg::Vector;

/// Estimated `(mu1, mu2)` of one task.
pub type MuPair = (Vector, Vector);

/// Largest task count accepted by [`align_exhaustive`].
pub const EXHAUSTIVE_MAX_TASKS: usize = 25;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Alignment {
    pub r: Vec<u8>,
    pub r_prime: Vec<u8>,
}

impl Alignment {
    /// `r = (1, ..., 1)`, `r' = (2, ..., 2)`.
    pub fn identity(k: usize) -> Self {
        Self::from_swaps(&vec![false; k])
    }

    pub fn from_swaps(swaps: &[bool]) -> Self {
        Alignment {
            r: swaps.iter().map(|&s| if s { 2 } else { 1 }).collect(),
            r_prime: swaps.iter().map(|&s| if s { 1 } else { 2 }).collect(),
        }
    }

    pub fn from_r(r: Vec<u8>) -> Result<Self> {
        if let Some(bad) = r.iter().find(|&&v| v != 1 && v != 2) {
            return Err(Error::InvalidParameter(format!("alignment entry {bad} not in {{1, 2}}")));
        }
        let r_prime = r.iter().map(|&v| 3 - v).collect();
        Ok(Alignment { r, r_prime })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    /// Whether task `k` has its labels exchanged.
    pub fn swaps(&self, k: usize) -> bool {
        self.r[k] == 2
    }

    pub fn swap_flags(&self) -> Vec<bool> {
        self.r.iter().map(|&v| v == 2).collect()
    }

    /// Exchanges `r` and `r'` (the same partition of labels).
    pub fn flipped(&self) -> Self {
        Alignment {
            r: self.r_prime.clone(),
            r_prime: self.r.clone(),
        }
    }

    /// Equal to `other` or to its global flip.
    pub fn equivalent(&self, other: &Alignment) -> bool {
        self == other || *self == other.flipped()
    }

    /// Restriction to the tasks in `indices`.
    pub fn restrict(&self, indices: &[usize]) -> Alignment {
        Alignment {
            r: indices.iter().map(|&i| self.r[i]).collect(),
            r_prime: indices.iter().map(|&i| self.r_prime[i]).collect(),
        }
    }

    /// Relabels every estimate according to the alignment.
    pub fn apply(&self, thetas: &[ThetaEstimate]) -> Result<Vec<ThetaEstimate>> {
        check_dim(self.len(), thetas.len())?;
        Ok(thetas
            .iter()
            .enumerate()
            .map(|(k, t)| if self.swaps(k) { t.swapped() } else { t.clone() })
            .collect())
    }

    pub fn apply_pairs(&self, pairs: &[MuPair]) -> Result<Vec<MuPair>> {
        check_dim(self.len(), pairs.len())?;
        Ok(pairs
            .iter()
            .enumerate()
            .map(|(k, (a, b))| if self.swaps(k) { (b.clone(), a.clone()) } else { (a.clone(), b.clone()) })
            .collect())
    }
}

pub fn mu_pairs(thetas: &[ThetaEstimate]) -> Vec<MuPair> {
    thetas.iter().map(|t| (t.mu1.clone(), t.mu2.clone())).collect()
}

/// Pairwise costs: `same[i][j]` when tasks `i` and `j` share orientation,
/// `cross[i][j]` otherwise. Each already counts both ordered pairs.
struct PairCosts {
    same: Vec<Vec<f64>>,
    cross: Vec<Vec<f64>>,
}

impl PairCosts {
    fn new(pairs: &[MuPair]) -> Result<Self> {
        let k = pairs.len();
        if let Some((a, _)) = pairs.first() {
            for (x, y) in pairs {
                check_dim(a.len(), x.len())?;
                check_dim(a.len(), y.len())?;
            }
        }
        let mut same = vec![vec![0.0; k]; k];
        let mut cross = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in (i + 1)..k {
                let (a1, a2) = &pairs[i];
                let (b1, b2) = &pairs[j];
                let s = 2.0 * ((a1 - b1).norm() + (a2 - b2).norm());
                let c = 2.0 * ((a1 - b2).norm() + (a2 - b1).norm());
                same[i][j] = s;
                same[j][i] = s;
                cross[i][j] = c;
                cross[j][i] = c;
            }
        }
        Ok(PairCosts { same, cross })
    }

    fn score(&self, swaps: &[bool]) -> f64 {
        let k = swaps.len();
        let mut total = 0.0;
        for i in 0..k {
            for j in (i + 1)..k {
                total += if swaps[i] == swaps[j] { self.same[i][j] } else { self.cross[i][j] };
            }
        }
        total
    }

    /// Score change from toggling task `t`.
    fn toggle_delta(&self, swaps: &[bool], t: usize) -> f64 {
        let mut delta = 0.0;
        for (j, &sj) in swaps.iter().enumerate() {
            if j != t {
                let d = self.cross[t][j] - self.same[t][j];
                delta += if swaps[t] == sj { d } else { -d };
            }
        }
        delta
    }
}

/// `sum_{k1 != k2} ||mu1^(k1) - mu1^(k2)|| + ||mu2^(k1) - mu2^(k2)||` after aligning.
pub fn alignment_score(pairs: &[MuPair], alignment: &Alignment) -> Result<f64> {
    check_dim(pairs.len(), alignment.len())?;
    Ok(PairCosts::new(pairs)?.score(&alignment.swap_flags()))
}

/// Global minimizer of the score over all alignments, found by enumerating the
/// `2^(K-1)` alignments with `r_1 = 1` in Gray-code order. Near-ties (relative
/// `1e-12`) go to the lexicographically smallest `r`.
pub fn align_exhaustive(pairs: &[MuPair]) -> Result<Alignment> {
    let k = pairs.len();
    if k > EXHAUSTIVE_MAX_TASKS {
        return Err(Error::AlignmentTooLarge(k));
    }
    if k <= 1 {
        return Ok(Alignment::identity(k));
    }
    let costs = PairCosts::new(pairs)?;
    let mut swaps = vec![false; k];
    let mut running = costs.score(&swaps);
    let mut best = swaps.clone();
    let mut best_score = running;
    let scale = |s: f64| 1e-12 * s.abs().max(1e-300);
    for step in 1u64..(1u64 << (k - 1)) {
        let t = step.trailing_zeros() as usize + 1;
        running += costs.toggle_delta(&swaps, t);
        swaps[t] = !swaps[t];
        // the running sum screens candidates; contenders are rescored exactly
        if running <= best_score + 1e-9 * best_score.abs().max(1.0) {
            let exact = costs.score(&swaps);
            running = exact;
            if exact < best_score - scale(best_score)
                || (exact <= best_score + scale(best_score) && swaps < best)
            {
                best_score = exact;
                best = swaps.clone();
            }
        }
    }
    Ok(Alignment::from_swaps(&best))
}

/// Outcome of one greedy sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyTrace {
    pub alignment: Alignment,
    /// Score before the sweep followed by the score after each of the `K` comparisons.
    pub scores: Vec<f64>,
    pub comparisons: usize,
}

/// Greedy label swapping: from the identity, visit tasks once in order and
/// keep a swap only if it strictly lowers the score.
pub fn align_greedy(pairs: &[MuPair]) -> Result<Alignment> {
    Ok(align_greedy_traced(pairs)?.alignment)
}

pub fn align_greedy_traced(pairs: &[MuPair]) -> Result<GreedyTrace> {
    greedy_from(pairs, vec![false; pairs.len()])
}

fn greedy_from(pairs: &[MuPair], start: Vec<bool>) -> Result<GreedyTrace> {
    let costs = PairCosts::new(pairs)?;
    let mut swaps = start;
    let mut current = costs.score(&swaps);
    let mut scores = vec![current];
    for t in 0..swaps.len() {
        swaps[t] = !swaps[t];
        let candidate = costs.score(&swaps);
        if current > candidate {
            current = candidate;
        } else {
            swaps[t] = !swaps[t];
        }
        scores.push(current);
    }
    Ok(GreedyTrace {
        alignment: Alignment::from_swaps(&swaps),
        comparisons: pairs.len(),
        scores,
    })
}

/// Greedy swapping from the identity plus `restarts` random starting
/// alignments; returns the lowest-scoring result (earliest on ties).
pub fn align_greedy_restarts<R: Rng + ?Sized>(pairs: &[MuPair], restarts: usize, rng: &mut R) -> Result<Alignment> {
    let costs = PairCosts::new(pairs)?;
    let mut best = align_greedy(pairs)?;
    let mut best_score = costs.score(&best.swap_flags());
    for _ in 0..restarts {
        let start: Vec<bool> = (0..pairs.len()).map(|_| rng.gen()).collect();
        let cand = greedy_from(pairs, start)?.alignment;
        let s = costs.score(&cand.swap_flags());
        if s < best_score {
            best = cand;
            best_score = s;
        }
    }
    Ok(best)
}

/// Aligns a target (index 0 of the result) to already aligned sources: the
/// target starts at `(1, 2)` and is swapped only if that strictly lowers the
/// score over all `K + 1` tasks.
pub fn align_transfer(target: &MuPair, source_alignment: &Alignment, sources: &[MuPair]) -> Result<Alignment> {
    check_dim(sources.len(), source_alignment.len())?;
    check_dim(target.0.len(), target.1.len())?;
    let mut all = Vec::with_capacity(sources.len() + 1);
    all.push(target.clone());
    all.extend(source_alignment.apply_pairs(sources)?);
    let costs = PairCosts::new(&all)?;
    let mut flags = vec![false; all.len()];
    let keep = costs.score(&flags);
    flags[0] = true;
    let swap = costs.score(&flags);
    let mut out = vec![keep > swap];
    out.extend(source_alignment.swap_flags());
    Ok(Alignment::from_swaps(&out))
}

/// Relationship between estimated labels and the truth over the tasks in `S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentDiagnostics {
    /// `i_k = 1` when the estimated first mean is the one nearest the true first mean.
    pub i: Vec<u8>,
    pub j: Vec<u8>,
    /// `min(#{i_k = 1}, #{i_k = 2}) / |S|`.
    pub p_a: f64,
    /// The ideal alignment restricted to `S` (`r_k = i_k`).
    pub ideal: Alignment,
}

/// Nearest-truth labels for the tasks listed in `s`. An exact distance tie is an error.
pub fn alignment_diagnostics(estimated: &[MuPair], truth: &[MuPair], s: &[usize]) -> Result<AlignmentDiagnostics> {
    check_dim(estimated.len(), truth.len())?;
    if s.is_empty() {
        return Err(Error::InvalidParameter("empty task set".into()));
    }
    let mut i = Vec::with_capacity(s.len());
    for &k in s {
        let ((e1, e2), (t1, _)) = estimated
            .get(k)
            .zip(truth.get(k))
            .ok_or_else(|| Error::InvalidParameter(format!("task index {k} out of range")))?;
        check_dim(t1.len(), e1.len())?;
        let (d1, d2) = ((e1 - t1).norm(), (e2 - t1).norm());
        if d1 == d2 {
            return Err(Error::AmbiguousAlignment(k));
        }
        i.push(if d1 < d2 { 1 } else { 2 });
    }
    let ones = i.iter().filter(|&&v| v == 1).count();
    let p_a = ones.min(i.len() - ones) as f64 / i.len() as f64;
    let j = i.iter().map(|&v| 3 - v).collect();
    let ideal = Alignment::from_r(i.clone())?;
    Ok(AlignmentDiagnostics { i, j, p_a, ideal })
}

/// Settings for [`synthetic_pairs`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticPairs {
    pub tasks_in_s: usize,
    pub outliers: usize,
    pub p: usize,
    /// Minimum `||mu1* - mu2*||` over `S`.
    pub separation: f64,
    /// Radius of the true means around their common centers.
    pub h_mu: f64,
    /// Radius of the estimation error.
    pub xi: f64,
    /// Number of tasks in `S` whose labels are given swapped.
    pub swapped: usize,
    /// Outlier pairs are drawn with norm at most this.
    pub outlier_radius: f64,
}

/// Mean-pair estimates with known ideal alignment, for testing alignment
/// procedures. The first `tasks_in_s` entries of the output are in `S`.
#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    pub pairs: Vec<MuPair>,
    pub truth: Vec<MuPair>,
    pub s: Vec<usize>,
    /// Swap flags that undo the injected label swaps on `S`.
    pub ideal: Alignment,
}

fn in_ball<R: Rng + ?Sized>(rng: &mut R, p: usize, radius: f64) -> Vector {
    let g = Vector::from_fn(p, |_, _| StandardNormal.sample(rng));
    let dir = &g / g.norm();
    dir * (radius * rng.gen::<f64>().powf(1.0 / p as f64))
}

pub fn synthetic_pairs<R: Rng + ?Sized>(rng: &mut R, cfg: &SyntheticPairs) -> SyntheticInstance {
    let p = cfg.p;
    let half = (cfg.separation + 2.0 * cfg.h_mu) / 2.0;
    let dir = in_ball(rng, p, 1.0);
    let dir = &dir / dir.norm();
    let c1 = &dir * half;
    let c2 = -&c1;
    let mut order: Vec<usize> = (0..cfg.tasks_in_s).collect();
    order.shuffle(rng);
    let mut swapped = vec![false; cfg.tasks_in_s + cfg.outliers];
    for &k in order.iter().take(cfg.swapped) {
        swapped[k] = true;
    }
    let mut pairs = Vec::new();
    let mut truth = Vec::new();
    for k in 0..cfg.tasks_in_s {
        let t1 = &c1 + in_ball(rng, p, cfg.h_mu);
        let t2 = &c2 + in_ball(rng, p, cfg.h_mu);
        let e1 = &t1 + in_ball(rng, p, cfg.xi);
        let e2 = &t2 + in_ball(rng, p, cfg.xi);
        pairs.push(if swapped[k] { (e2, e1) } else { (e1, e2) });
        truth.push((t1, t2));
    }
    for _ in 0..cfg.outliers {
        let a = in_ball(rng, p, cfg.outlier_radius);
        let b = in_ball(rng, p, cfg.outlier_radius);
        pairs.push((a.clone(), b.clone()));
        truth.push((a, b));
    }
    SyntheticInstance {
        pairs,
        truth,
        s: (0..cfg.tasks_in_s).collect(),
        ideal: Alignment::from_swaps(&swapped),
    }
}
