//! Cross-validated choice of the base penalty constants.
//!
//! Every grid cell ties `C_w^(1) = C_w^(2)` to one value and the four
//! `mu`/`beta` constants to another. Each cell is scored by the held-out
//! log-likelihood of the fitted mixtures, summed over tasks and folds.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{fit_mtl_gmm, Centers, MtlOptions, Penalty, ScriptConstants, TuningSchedule};
use crate::error::{Error, Result};
use crate::gmm::{log_likelihood, GmmParams, TaskData, ThetaEstimate};
use crate::transfer::{fit_tl_gmm, TlOptions, TlPenalty, TlSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvGrid {
    pub values_w: Vec<f64>,
    pub values_rest: Vec<f64>,
    pub folds: usize,
    /// Seeds the fold assignment.
    pub seed: u64,
}

impl Default for CvGrid {
    fn default() -> Self {
        let v = vec![0.05, 0.1, 0.2, 0.5, 1.0, 2.0];
        CvGrid {
            values_w: v.clone(),
            values_rest: v,
            folds: 5,
            seed: 0,
        }
    }
}

impl CvGrid {
    /// Candidates must be finite and nonnegative; zero switches a block's penalty off.
    pub fn validate(&self) -> Result<()> {
        if self.values_w.is_empty() || self.values_rest.is_empty() {
            return Err(Error::InvalidParameter("CV grid is empty".into()));
        }
        if let Some(v) = self
            .values_w
            .iter()
            .chain(&self.values_rest)
            .find(|v| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::InvalidParameter(format!("CV candidate {v} must be finite and >= 0")));
        }
        if self.folds < 2 {
            return Err(Error::InvalidParameter("at least two folds are required".into()));
        }
        Ok(())
    }

    fn cells(&self) -> Vec<(f64, f64)> {
        let mut w = self.values_w.clone();
        let mut r = self.values_rest.clone();
        w.sort_by(f64::total_cmp);
        w.dedup();
        r.sort_by(f64::total_cmp);
        r.dedup();
        w.iter().flat_map(|&a| r.iter().map(move |&b| (a, b))).collect()
    }
}

/// Schedule shape shared by every cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub script: ScriptConstants,
    pub kappa: f64,
    /// Rounds per fit; `None` uses the default rule on each training split.
    pub rounds: Option<usize>,
    /// Transfer schedules use the symmetric recurrence (see [`TlSchedule::symmetric`]).
    #[serde(default)]
    pub tl_symmetric: bool,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            script: ScriptConstants::default(),
            kappa: 1.0 / 3.0,
            rounds: None,
            tl_symmetric: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub value_w: f64,
    pub value_rest: f64,
    /// Summed validation log-likelihood; `-inf` when some fold failed.
    pub loglik: f64,
    pub failed_folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvTable {
    pub rows: Vec<CvRow>,
    /// Index into `rows` of the selected cell.
    pub best: usize,
}

impl CvTable {
    pub fn best_row(&self) -> &CvRow {
        &self.rows[self.best]
    }
}

/// Fold label of each observation: a seeded shuffle, then position modulo `folds`.
pub fn fold_assignment(n: usize, folds: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

struct Split {
    train: TaskData,
    valid: TaskData,
}

fn split_task(task: &TaskData, fold: &[usize], f: usize) -> Result<Split> {
    let (tr, va): (Vec<usize>, Vec<usize>) = (0..task.n()).partition(|&i| fold[i] != f);
    Ok(Split {
        train: task.select_rows(&tr)?,
        valid: task.select_rows(&va)?,
    })
}

fn check_sizes(tasks: &[&TaskData], folds: usize) -> Result<()> {
    for (k, t) in tasks.iter().enumerate() {
        let need = folds * (t.p() + 2);
        if t.n() < need {
            return Err(Error::InvalidData(format!(
                "{} observations cannot be split into {folds} folds (need {need})",
                t.n()
            ))
            .in_task(k));
        }
    }
    Ok(())
}

fn fold_splits(tasks: &[&TaskData], grid: &CvGrid) -> Result<Vec<Vec<Split>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(grid.seed);
    let labels: Vec<Vec<usize>> = tasks
        .iter()
        .map(|t| fold_assignment(t.n(), grid.folds, &mut rng))
        .collect();
    (0..grid.folds)
        .map(|f| {
            tasks
                .iter()
                .zip(&labels)
                .map(|(t, l)| split_task(t, l, f))
                .collect()
        })
        .collect()
}

fn validation_loglik(theta: &ThetaEstimate, sigma: &crate::linalg::Matrix, valid: &TaskData) -> Result<f64> {
    let params = GmmParams::new(theta.w, theta.mu1.clone(), theta.mu2.clone(), sigma.clone())?;
    log_likelihood(&params, valid)
}

fn pick_best(cells: &[(f64, f64)], scores: &[(f64, usize)]) -> CvTable {
    let rows: Vec<CvRow> = cells
        .iter()
        .zip(scores)
        .map(|(&(w, r), &(ll, failed))| CvRow {
            value_w: w,
            value_rest: r,
            loglik: ll,
            failed_folds: failed,
        })
        .collect();
    // cells are in ascending order, so a strict comparison keeps the smaller constants on ties
    let mut best = 0;
    for (i, row) in rows.iter().enumerate() {
        if row.loglik > rows[best].loglik {
            best = i;
        }
    }
    CvTable { rows, best }
}

fn score_cells<F>(cells: &[(f64, f64)], folds: usize, eval: F) -> Vec<(f64, usize)>
where
    F: Fn(f64, f64, usize) -> Result<f64> + Sync,
{
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..folds).map(move |f| (c, f)))
        .collect();
    let results: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(c, f)| eval(cells[c].0, cells[c].1, f))
        .collect();
    let mut out = vec![(0.0, 0); cells.len()];
    for (&(c, _), r) in jobs.iter().zip(results) {
        match r {
            Ok(v) if v.is_finite() => out[c].0 += v,
            _ => out[c].1 += 1,
        }
    }
    for o in &mut out {
        if o.1 > 0 {
            o.0 = f64::NEG_INFINITY;
        }
    }
    out
}

/// Cross-validates the multi-task schedule. `inits` (already aligned) start
/// every training fit.
pub fn cv_select_mtl(
    tasks: &[TaskData],
    inits: &[ThetaEstimate],
    grid: &CvGrid,
    opts: &CvOptions,
) -> Result<(TuningSchedule, CvTable)> {
    grid.validate()?;
    TuningSchedule::tied(0.0, 0.0, opts.script, opts.kappa)?;
    if tasks.len() != inits.len() {
        return Err(Error::DimensionMismatch {
            expected: tasks.len(),
            found: inits.len(),
        });
    }
    let refs: Vec<&TaskData> = tasks.iter().collect();
    check_sizes(&refs, grid.folds)?;
    let splits = fold_splits(&refs, grid)?;
    let cells = grid.cells();
    let mtl_opts = MtlOptions {
        rounds: opts.rounds,
        ..MtlOptions::default()
    };
    let scores = score_cells(&cells, grid.folds, |vw, vr, f| {
        let schedule = TuningSchedule::tied(vw, vr, opts.script, opts.kappa)?;
        let train: Vec<TaskData> = splits[f].iter().map(|s| s.train.clone()).collect();
        let fit = fit_mtl_gmm(&train, inits, &Penalty::Schedule(schedule), &mtl_opts)?;
        let mut total = 0.0;
        for ((theta, sigma), s) in fit.per_task.iter().zip(&fit.sigmas).zip(&splits[f]) {
            total += validation_loglik(theta, sigma, &s.valid)?;
        }
        Ok(total)
    });
    let table = pick_best(&cells, &scores);
    let best = table.best_row();
    if best.loglik == f64::NEG_INFINITY {
        return Err(Error::InvalidData("every CV cell failed to fit".into()));
    }
    let schedule = TuningSchedule::tied(best.value_w, best.value_rest, opts.script, opts.kappa)?;
    Ok((schedule, table))
}

/// Cross-validates the transfer schedule on held-out target folds, with the
/// anchors fixed.
pub fn cv_select_tl(
    target: &TaskData,
    init0: &ThetaEstimate,
    anchors: &Centers,
    grid: &CvGrid,
    opts: &CvOptions,
) -> Result<(TlSchedule, CvTable)> {
    grid.validate()?;
    TlSchedule::tied(0.0, 0.0, opts.script, opts.kappa)?;
    check_sizes(&[target], grid.folds)?;
    let splits = fold_splits(&[target], grid)?;
    let cells = grid.cells();
    let tl_opts = TlOptions {
        rounds: opts.rounds,
        ..TlOptions::default()
    };
    let tied = |vw, vr| {
        TlSchedule::tied(vw, vr, opts.script, opts.kappa).map(|s| TlSchedule {
            symmetric: opts.tl_symmetric,
            ..s
        })
    };
    let scores = score_cells(&cells, grid.folds, |vw, vr, f| {
        let schedule = tied(vw, vr)?;
        let s = &splits[f][0];
        let fit = fit_tl_gmm(&s.train, init0, anchors, &TlPenalty::Schedule(schedule), &tl_opts)?;
        validation_loglik(&fit.theta0, &fit.sigma0, &s.valid)
    });
    let table = pick_best(&cells, &scores);
    let best = table.best_row();
    if best.loglik == f64::NEG_INFINITY {
        return Err(Error::InvalidData("every CV cell failed to fit".into()));
    }
    Ok((tied(best.value_w, best.value_rest)?, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::tests::sample_task;
    use crate::linalg::Matrix;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::Rng;

    fn heterogeneous(seed: u64, k: usize, n: usize, h: f64) -> (Vec<TaskData>, Vec<ThetaEstimate>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 3;
        let mut tasks = Vec::new();
        let mut inits = Vec::new();
        for i in 0..k {
            let mut mu = DVector::zeros(p);
            mu[0] = 2.0;
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            mu[1] = sign * h;
            let params = GmmParams::new(0.5, mu.clone(), -&mu, Matrix::identity(p, p)).unwrap();
            tasks.push(sample_task(&mut rng, &params, n));
            inits.push(params.theta().unwrap());
        }
        (tasks, inits)
    }

    #[test]
    fn folds_are_balanced_and_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let f1 = fold_assignment(103, 5, &mut a);
        assert_eq!(f1, fold_assignment(103, 5, &mut b));
        let mut sizes = [0usize; 5];
        for &f in &f1 {
            sizes[f] += 1;
        }
        assert_eq!(sizes, [21, 21, 21, 20, 20]);
    }

    #[test]
    fn single_cell_grid() {
        let (tasks, inits) = heterogeneous(1, 3, 60, 0.0);
        let grid = CvGrid {
            values_w: vec![0.3],
            values_rest: vec![0.2],
            folds: 3,
            seed: 1,
        };
        let (s, table) = cv_select_mtl(&tasks, &inits, &grid, &CvOptions::default()).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!((s.c1_w, s.c2_w, s.c1_mu, s.c2_beta), (0.3, 0.3, 0.2, 0.2));
        assert!(table.rows[0].loglik.is_finite());
    }

    #[test]
    fn table_shape_and_argmax() {
        let (tasks, inits) = heterogeneous(2, 3, 60, 0.5);
        let grid = CvGrid {
            values_w: vec![0.1, 1.0],
            values_rest: vec![0.05, 0.5, 2.0],
            folds: 3,
            seed: 2,
        };
        let (_, table) = cv_select_mtl(&tasks, &inits, &grid, &CvOptions::default()).unwrap();
        assert_eq!(table.rows.len(), 6);
        let best = table.best_row().loglik;
        assert!(table.rows.iter().all(|r| r.loglik.is_finite() && r.loglik <= best));
    }

    #[test]
    fn unpooled_cell_wins_on_heterogeneous_tasks() {
        let (tasks, inits) = heterogeneous(4, 4, 100, 2.0);
        let grid = CvGrid {
            values_w: vec![0.0, 1e6],
            values_rest: vec![0.0, 1e6],
            folds: 5,
            seed: 4,
        };
        let (s, table) = cv_select_mtl(&tasks, &inits, &grid, &CvOptions::default()).unwrap();
        assert_eq!(s.c1_mu, 0.0, "{table:?}");
    }

    #[test]
    fn too_few_observations() {
        let (tasks, inits) = heterogeneous(5, 2, 20, 0.0);
        let err = cv_select_mtl(&tasks, &inits, &CvGrid::default(), &CvOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Task { index: 0, .. }));
        let bad = CvGrid {
            values_w: vec![],
            ..CvGrid::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tl_selection_returns_grid_cell() {
        let (tasks, inits) = heterogeneous(6, 1, 80, 0.0);
        let anchors = Centers {
            w: 0.5,
            mu1: inits[0].mu1.clone(),
            mu2: inits[0].mu2.clone(),
            beta: inits[0].beta.clone(),
        };
        let grid = CvGrid {
            values_w: vec![0.1, 0.5],
            values_rest: vec![0.1, 0.5],
            folds: 4,
            seed: 6,
        };
        let (s, table) = cv_select_tl(&tasks[0], &inits[0], &anchors, &grid, &CvOptions::default()).unwrap();
        assert_eq!(table.rows.len(), 4);
        let b = table.best_row();
        assert_eq!((s.c1_w, s.c1_mu), (b.value_w, b.value_rest));
    }

    proptest! {
        #[test]
        fn fold_sizes_survive_reordering(n in 10usize..200, folds in 2usize..8, seed in 0u64..1000) {
            let mut a = ChaCha8Rng::seed_from_u64(seed);
            let f = fold_assignment(n, folds, &mut a);
            let mut sizes = vec![0; folds];
            for &x in &f { sizes[x] += 1; }
            let mut b = ChaCha8Rng::seed_from_u64(seed);
            let _ = b.gen::<u64>();
            let g = fold_assignment(n, folds, &mut b);
            let mut sizes2 = vec![0; folds];
            for &x in &g { sizes2[x] += 1; }
            sizes.sort();
            sizes2.sort();
            prop_assert_eq!(sizes, sizes2);
        }
    }
}
