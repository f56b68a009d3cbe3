use fedlora_core::federation::Executor;
use rayon::prelude::*;

/// Trains clients on the rayon pool. Results come back in client order, and
/// every client owns its random stream, so output matches [`Sequential`]
/// bit for bit.
///
/// [`Sequential`]: fedlora_core::federation::Sequential
#[derive(Clone, Copy, Debug, Default)]
pub struct Parallel;

impl Executor for Parallel {
    fn map<T, F>(&self, n: usize, job: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).into_par_iter().map(job).collect()
    }
}
