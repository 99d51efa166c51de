use cpaudit_core::trials::TrialExecutor;
use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};

/// Runs trials on a dedicated rayon pool. Results keep trial order, so
/// reports match [`cpaudit_core::trials::Sequential`] exactly.
pub struct Parallel {
    pool: ThreadPool,
}

impl Parallel {
    pub fn new(threads: usize) -> Result<Self, rayon::ThreadPoolBuildError> {
        let pool = ThreadPoolBuilder::new().num_threads(threads).build()?;
        Ok(Self { pool })
    }
}

impl TrialExecutor for Parallel {
    fn run<T, F>(&self, n: usize, trial: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        self.pool.install(|| (0..n).into_par_iter().map(trial).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cpaudit_core::trials::Sequential;

    #[test]
    fn same_order_as_sequential() {
        let f = |i: usize| (i * 7919) % 101;
        assert_eq!(Parallel::new(4).unwrap().run(500, f), Sequential.run(500, f));
    }
}
