//! Trial-level parallelism with a sequential fallback.
//!
//! Every independent unit of work (Monte Carlo trial, sweep point, ALS
//! restart) draws from its own random stream, so results do not depend on
//! how the work is scheduled. Building without the `parallel` feature turns
//! [`Execution::Parallel`] into a plain loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Run on rayon; `threads: None` uses the global pool.
    #[default]
    Parallel,
    ParallelWith {
        threads: usize,
    },
}

impl Execution {
    pub fn from_threads(threads: Option<usize>) -> Self {
        match threads {
            None => Execution::Parallel,
            Some(0) | Some(1) => Execution::Sequential,
            Some(n) => Execution::ParallelWith { threads: n },
        }
    }
}

/// Independent random stream `stream` of the family identified by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `f(0), f(1), ..., f(n-1)` in index order, computed under `exec`.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Execution::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        #[cfg(feature = "parallel")]
        Execution::ParallelWith { threads } => {
            use rayon::prelude::*;
            match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
                Err(_) => (0..n).map(f).collect(),
            }
        }
        #[cfg(not(feature = "parallel"))]
        Execution::Parallel | Execution::ParallelWith { .. } => (0..n).map(f).collect(),
    }
}
