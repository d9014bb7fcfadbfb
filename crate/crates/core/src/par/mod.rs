//! Data-parallel helpers. The rayon-backed path is used when the `parallel`
//! feature is enabled; `single` is always compiled so the two can be compared.

#[cfg(feature = "parallel")]
mod rayon;
#[cfg(feature = "parallel")]
pub use self::rayon::*;

pub mod single;
#[cfg(not(feature = "parallel"))]
pub use self::single::*;

/// Name of the environment variable that caps worker threads.
pub const THREADS_ENV: &str = "STRIPE_IMPURITY_THREADS";

/// Reads the thread cap from the environment, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}
