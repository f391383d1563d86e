//! Closed-loop Monte Carlo engine for virtual clinical trials of
//! artificial-pancreas treatments.

pub mod analytics;
pub mod controller;
pub mod error;
pub mod manifest;
pub mod physiology;
pub mod population;
pub mod protocol;
pub mod rng;
pub mod simulation;
pub mod storage;

pub use error::{Error, ErrorClass, Result};

/// Run `f` on a pool of `threads` workers, or on the global pool.
pub(crate) fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool")
            .install(f),
    }
}
