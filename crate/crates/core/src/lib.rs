//! Penalized EM for two-component Gaussian mixtures fitted jointly across
//! related tasks, with transfer to a target task.
//!
//! ```
//! use mtgmm::em::{fit_mtl_gmm, MtlOptions, Penalty, TuningSchedule};
//! use mtgmm::sim::{generate, initial_estimate, Scenario, SimConfig};
//!
//! let cfg = SimConfig { k: 3, seed: 1, ..SimConfig::new(Scenario::MtlSim1) };
//! let data = generate(&cfg, &mut cfg.rep_rng(0)).unwrap();
//! let inits: Vec<_> = data.train.iter().map(|t| initial_estimate(t, 10).unwrap()).collect();
//! let inits = mtgmm::alignment::align_exhaustive(&mtgmm::alignment::mu_pairs(&inits))
//!     .unwrap()
//!     .apply(&inits)
//!     .unwrap();
//! let fit = fit_mtl_gmm(&data.train, &inits, &Penalty::Schedule(TuningSchedule::default()), &MtlOptions::default()).unwrap();
//! assert_eq!(fit.per_task.len(), 3);
//! ```

pub mod error;
pub mod gmm;
pub mod linalg;
pub mod prox;
pub mod em;
pub mod transfer;
pub mod alignment;
pub mod selection;
pub mod sim;
pub mod io;
pub mod cli;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/single_task.md")]
    mod single_task {}
    #[doc = include_str!("../../../book/src/multitask.md")]
    mod multitask {}
    #[doc = include_str!("../../../book/src/transfer.md")]
    mod transfer {}
    #[doc = include_str!("../../../book/src/alignment.md")]
    mod alignment {}
    #[doc = include_str!("../../../book/src/tuning.md")]
    mod tuning {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/io.md")]
    mod io {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
}
