//! Execution of independent Monte Carlo trials.
//!
//! Experiments express their trials as a closure over the trial index and
//! hand it to a [`TrialExecutor`]. Results always come back in index order,
//! so any reduction over them is independent of how they were scheduled.

use alloc::vec::Vec;

pub trait TrialExecutor: Sync {
    fn run<T, F>(&self, n: usize, trial: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs trials one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl TrialExecutor for Sequential {
    fn run<T, F>(&self, n: usize, trial: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(trial).collect()
    }
}

/// Sample mean and standard error of the mean (n - 1 denominator).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, libm::sqrt(var / n as f64))
}

/// Sample standard deviation (n - 1 denominator).
pub fn std_dev(values: &[f64]) -> f64 {
    let (_, se) = mean_and_se(values);
    se * libm::sqrt(values.len() as f64)
}
