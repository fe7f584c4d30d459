//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature (on by default) [`Execution::Parallel`] runs on
//! the rayon global pool; without it every mode runs sequentially. Outputs are
//! always returned in input order, so results never depend on the mode.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    /// Whether this mode actually fans out in the current build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

impl std::str::FromStr for Execution {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "parallel" => Ok(Execution::Parallel),
            "sequential" => Ok(Execution::Sequential),
            other => Err(format!("unknown execution mode {other:?}")),
        }
    }
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Order-preserving fallible map; the first error in input order wins.
pub fn try_map<T, R, E, F>(exec: Execution, items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    map(exec, items, f).into_iter().collect()
}

/// Minimum under `key` with ties broken by `tie`, reduced in parallel when
/// allowed. The reduction is associative and commutative, so the winner is
/// the same in both modes.
pub fn min_by<T, K, F, G>(exec: Execution, items: &[T], key: F, tie: G) -> Option<&T>
where
    T: Sync,
    K: PartialOrd + Send,
    F: Fn(&T) -> K + Sync + Send,
    G: Fn(&T, &T) -> std::cmp::Ordering + Sync + Send,
{
    fn pick<'a, T, K: PartialOrd>(
        a: (&'a T, K),
        b: (&'a T, K),
        tie: &impl Fn(&T, &T) -> std::cmp::Ordering,
    ) -> (&'a T, K) {
        match a.1.partial_cmp(&b.1) {
            Some(std::cmp::Ordering::Less) => a,
            Some(std::cmp::Ordering::Greater) => b,
            _ if tie(a.0, b.0) == std::cmp::Ordering::Greater => b,
            _ => a,
        }
    }
    let better = |a, b| pick(a, b, &tie);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items
            .par_iter()
            .map(|t| (t, key(t)))
            .reduce_with(better)
            .map(|(t, _)| t);
    }
    let _ = exec;
    items.iter().map(|t| (t, key(t))).reduce(better).map(|(t, _)| t)
}
