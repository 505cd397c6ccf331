//! Data-parallel helpers. With the `parallel` feature these go through rayon;
//! without it every helper runs sequentially. Results always come back in index
//! order so reductions done by the caller are deterministic.

/// Sequential map over `0..n`.
pub fn map_seq<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

/// Parallel map over `0..n` (rayon). Order of the output matches the index.
#[cfg(feature = "parallel")]
pub fn map_par<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_par<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    map_seq(n, f)
}

/// Map over `0..n`, parallel when the feature is on.
pub fn map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    map_par(n, f)
}

/// Runs `f` inside a pool capped at `threads` workers (no-op cap when sequential).
#[cfg(feature = "parallel")]
pub fn with_threads<R: Send, F: FnOnce() -> R + Send>(threads: Option<usize>, f: F) -> R {
    match threads {
        Some(t) if t > 0 => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<R: Send, F: FnOnce() -> R + Send>(_threads: Option<usize>, f: F) -> R {
    f()
}

/// Thread cap read from `SBMM_THREADS`, if set to a positive integer.
pub fn env_threads() -> Option<usize> {
    std::env::var("SBMM_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&t| t > 0)
}
