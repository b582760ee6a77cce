//! Order-preserving parallel map over a stream.

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Items pulled from the source per worker before a batch is dispatched.
const ITEMS_PER_WORKER: usize = 256;

/// A worker panicked on one item.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("worker failed on item {index}: {message}")]
pub struct WorkerError {
    /// Position of the item in the input stream.
    pub index: usize,
    pub message: String,
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "worker panicked".to_string()
    }
}

/// Iterator returned by [`parallel_map`].
pub struct ParallelMap<I: Iterator, F, O> {
    source: I,
    f: F,
    pool: Option<rayon::ThreadPool>,
    batch: usize,
    ready: VecDeque<Result<O, WorkerError>>,
    consumed: usize,
}

/// Applies `f` to every item using `workers` threads.
///
/// Output order equals input order and does not depend on `workers`. The
/// source is consumed lazily in bounded batches. A panic inside `f` becomes a
/// [`WorkerError`] for that item only.
pub fn parallel_map<I, T, O, F>(items: I, workers: usize, f: F) -> ParallelMap<I::IntoIter, F, O>
where
    I: IntoIterator<Item = T>,
    T: Send,
    O: Send,
    F: Fn(T) -> O + Sync,
{
    let workers = workers.max(1);
    let pool = if workers > 1 {
        rayon::ThreadPoolBuilder::new().num_threads(workers).build().ok()
    } else {
        None
    };
    ParallelMap { source: items.into_iter(), f, pool, batch: workers * ITEMS_PER_WORKER, ready: VecDeque::new(), consumed: 0 }
}

impl<I, T, O, F> ParallelMap<I, F, O>
where
    I: Iterator<Item = T>,
    T: Send,
    O: Send,
    F: Fn(T) -> O + Sync,
{
    fn fill(&mut self) {
        let base = self.consumed;
        let batch: Vec<(usize, T)> = self.source.by_ref().take(self.batch).enumerate().map(|(i, t)| (base + i, t)).collect();
        self.consumed += batch.len();
        let f = &self.f;
        let run = |(index, item): (usize, T)| {
            catch_unwind(AssertUnwindSafe(|| f(item))).map_err(|p| WorkerError { index, message: panic_message(p) })
        };
        let results: Vec<Result<O, WorkerError>> = match &self.pool {
            Some(pool) => pool.install(|| batch.into_par_iter().map(run).collect()),
            None => batch.into_iter().map(run).collect(),
        };
        self.ready.extend(results);
    }
}

impl<I, T, O, F> Iterator for ParallelMap<I, F, O>
where
    I: Iterator<Item = T>,
    T: Send,
    O: Send,
    F: Fn(T) -> O + Sync,
{
    type Item = Result<O, WorkerError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.ready.is_empty() {
            self.fill();
        }
        self.ready.pop_front()
    }
}
