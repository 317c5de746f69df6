//! Data-parallel helpers.
//!
//! Every batch-shaped loop in the crate (per-example gradients, caption
//! sampling, judging) goes through [`map`]. With the `parallel` feature the
//! work is spread over the rayon pool; without it, or with
//! [`ExecMode::Sequential`], it runs on the calling thread. Results are always
//! returned in input order so reductions stay bit-identical across modes.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(1);

/// Selects the execution mode used by [`map`]. Has no effect when the crate is
/// built without the `parallel` feature.
pub fn set_mode(mode: ExecMode) {
    MODE.store(matches!(mode, ExecMode::Parallel) as u8, Ordering::Relaxed);
}

pub fn mode() -> ExecMode {
    if cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == 1 {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    match mode() {
        ExecMode::Parallel => items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect(),
        ExecMode::Sequential => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Like [`map`] but short-circuits on the first error (in input order).
pub fn try_map<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync + Send,
{
    map(items, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let xs: Vec<u64> = (0..257).collect();
        set_mode(ExecMode::Sequential);
        let a = map(&xs, |i, x| x * 3 + i as u64);
        set_mode(ExecMode::Parallel);
        let b = map(&xs, |i, x| x * 3 + i as u64);
        assert_eq!(a, b);
    }
}
