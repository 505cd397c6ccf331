//! Finite-state Markov data sources.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};

pub const STATIONARY_TOL: f64 = 1e-12;
pub const STATIONARY_MAX_ITERS: usize = 100_000;
/// Horizon of exact matrix powers used by [`mixing_rate`].
pub const MIXING_HORIZON: usize = 200;
/// Distances below this are treated as rounding noise by the tail-ratio estimate.
const TAIL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct MarkovSource<T> {
    /// Row-stochastic S×S transition matrix.
    pub p: DMatrix<f64>,
    pub emissions: Vec<T>,
    pub state: usize,
    pub seed: u64,
    cumulative: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

fn check_stochastic(p: &DMatrix<f64>) -> Result<()> {
    if p.nrows() != p.ncols() || p.nrows() == 0 {
        return Err(Error::Arg("transition matrix must be square and non-empty".into()));
    }
    for i in 0..p.nrows() {
        let row = p.row(i);
        if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Arg(format!("transition row {i} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Arg(format!("transition row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Some P^k with k ≤ S² is entrywise positive.
pub fn is_primitive(p: &DMatrix<f64>) -> bool {
    let s = p.nrows();
    let pattern = p.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let mut cur = pattern.clone();
    for _ in 0..s * s {
        if cur.iter().all(|v| *v > 0.0) {
            return true;
        }
        cur = (&cur * &pattern).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    }
    false
}

impl<T: Clone> MarkovSource<T> {
    /// Fails unless P is row-stochastic, irreducible and aperiodic.
    pub fn new(p: DMatrix<f64>, emissions: Vec<T>, initial_state: usize, seed: u64) -> Result<Self> {
        check_stochastic(&p)?;
        if !is_primitive(&p) {
            return Err(Error::Arg("transition matrix is not irreducible and aperiodic".into()));
        }
        Self::build(p, emissions, initial_state, seed)
    }

    /// Skips the ergodicity check. Only meant for tests of deterministic chains.
    #[doc(hidden)]
    pub fn new_unchecked(p: DMatrix<f64>, emissions: Vec<T>, initial_state: usize, seed: u64) -> Result<Self> {
        check_stochastic(&p)?;
        Self::build(p, emissions, initial_state, seed)
    }

    fn build(p: DMatrix<f64>, emissions: Vec<T>, initial_state: usize, seed: u64) -> Result<Self> {
        let s = p.nrows();
        if emissions.len() != s {
            return Err(Error::Dim(format!("{} emissions for {s} states", emissions.len())));
        }
        if initial_state >= s {
            return Err(Error::Arg(format!("initial state {initial_state} out of range")));
        }
        let cumulative = (0..s)
            .map(|i| {
                let mut acc = 0.0;
                p.row(i).iter().map(|v| {
                    acc += v;
                    acc
                }).collect()
            })
            .collect();
        Ok(MarkovSource { p, emissions, state: initial_state, seed, cumulative, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn states(&self) -> usize {
        self.p.nrows()
    }

    /// Same chain and emissions, fresh rng with `seed`, restarted at `state`.
    pub fn reseeded(&self, seed: u64, state: usize) -> Self {
        let mut out = self.clone();
        out.seed = seed;
        out.state = state.min(self.states() - 1);
        out.rng = ChaCha8Rng::seed_from_u64(seed);
        out
    }

    /// Advances one step with the source's own rng.
    pub fn next(&mut self) -> (usize, T) {
        let u: f64 = self.rng.gen();
        self.state = draw(&self.cumulative[self.state], u);
        (self.state, self.emissions[self.state].clone())
    }
}

fn draw(cum: &[f64], u: f64) -> usize {
    let idx = cum.partition_point(|c| *c <= u);
    // guard against rows whose cumulative sum rounds below 1
    let mut i = idx.min(cum.len() - 1);
    while i > 0 && cum[i] == cum[i - 1] {
        i -= 1;
    }
    i
}

/// Advances `src` with a caller-owned rng; returns the emission and new state.
pub fn next_sample<T: Clone, R: Rng + ?Sized>(src: &mut MarkovSource<T>, rng: &mut R) -> (T, usize) {
    let u: f64 = rng.gen();
    src.state = draw(&src.cumulative[src.state], u);
    (src.emissions[src.state].clone(), src.state)
}

/// One categorical step from `state` (no emission), for Monte-Carlo studies.
pub fn step_state<T, R: Rng + ?Sized>(src: &MarkovSource<T>, state: usize, rng: &mut R) -> usize {
    draw(&src.cumulative[state], rng.gen())
}

/// Chain whose rows all equal `weights`.
pub fn make_iid<T: Clone>(weights: &[f64], emissions: Vec<T>, seed: u64) -> Result<MarkovSource<T>> {
    let s = weights.len();
    if s == 0 || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Arg("i.i.d. weights must be a nonnegative vector".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Arg(format!("i.i.d. weights sum to {total}")));
    }
    let p = DMatrix::from_fn(s, s, |_, j| weights[j]);
    // a point mass is not irreducible on all states; rows are identical so it still mixes in one step
    let start = weights.iter().position(|w| *w > 0.0).unwrap_or(0);
    MarkovSource::new_unchecked(p, emissions, start, seed)
}

/// π with ‖πP − π‖₁ ≤ 1e−12, by power iteration.
pub fn stationary_distribution<T>(src: &MarkovSource<T>) -> Result<Vec<f64>> {
    stationary_of(&src.p)
}

pub fn stationary_of(p: &DMatrix<f64>) -> Result<Vec<f64>> {
    let s = p.nrows();
    let pt = p.transpose();
    let mut pi = nalgebra::DVector::from_element(s, 1.0 / s as f64);
    for _ in 0..STATIONARY_MAX_ITERS {
        let mut next = &pt * &pi;
        let total = next.sum();
        next /= total;
        let diff = (&next - &pi).abs().sum();
        pi = next;
        if diff <= STATIONARY_TOL {
            let check = (&pt * &pi - &pi).abs().sum();
            if check <= STATIONARY_TOL {
                return Ok(pi.as_slice().to_vec());
            }
        }
    }
    Err(Error::NoConvergence { what: "stationary distribution", iters: STATIONARY_MAX_ITERS })
}

/// Total variation sup_A |μ(A) − ν(A)| = ½‖μ − ν‖₁.
pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[derive(Clone, Debug)]
pub struct MixingReport {
    pub lambda: f64,
    /// The m at which the bound is attained; `None` when λ comes from the tail ratio.
    pub binding_m: Option<usize>,
    /// dₘ = max_y TV(Pᵐ(y,·), π) for m = 1..M.
    pub tv: Vec<f64>,
    pub pi: Vec<f64>,
}

/// Worst-start TV distance of Pᵐ to π for m = 1..horizon, from exact powers.
pub fn tv_profile(p: &DMatrix<f64>, pi: &[f64], horizon: usize) -> Vec<f64> {
    let s = p.nrows();
    let mut pm = p.clone();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let d = (0..s)
            .map(|y| tv_distance(pm.row(y).transpose().as_slice(), pi))
            .fold(0.0, f64::max);
        out.push(d);
        pm = &pm * p;
    }
    out
}

/// Smallest λ with dₘ ≤ λᵐ for every m ≥ 1.
///
/// Over m ≤ M this is max dₘ^{1/m}. Beyond the horizon dₘ decays like ρᵐ for
/// the chain's geometric rate ρ, so the supremum over all m is at least ρ; ρ is
/// estimated by d_k/d_{k−1} at the last k whose distance is still above rounding
/// noise. The reported λ is the larger of the two. Distances below 1e−6 are
/// not used for either estimate.
pub fn mixing_rate<T>(src: &MarkovSource<T>) -> Result<MixingReport> {
    mixing_rate_of(&src.p)
}

pub fn mixing_rate_of(p: &DMatrix<f64>) -> Result<MixingReport> {
    let pi = stationary_of(p)?;
    let tv = tv_profile(p, &pi, MIXING_HORIZON);
    let mut lambda = 0.0;
    let mut binding = None;
    // distances at the rounding floor carry no information about the rate
    let last = tv.iter().rposition(|d| *d > TAIL_FLOOR);
    if let Some(k) = last {
        for (i, d) in tv[..=k].iter().enumerate() {
            let v = d.powf(1.0 / (i + 1) as f64);
            if v > lambda {
                lambda = v;
                binding = Some(i + 1);
            }
        }
        if k >= 1 {
            let ratio = tv[k] / tv[k - 1];
            if ratio > lambda {
                lambda = ratio.min(1.0);
                binding = None;
            }
        }
    }
    Ok(MixingReport { lambda, binding_m: binding, tv, pi })
}

/// P = a·C + (1 − a)·U with C the cyclic shift and U uniform; mixing rate a.
pub fn cyclic_mixing_chain(s: usize, a: f64) -> DMatrix<f64> {
    DMatrix::from_fn(s, s, |i, j| {
        let shift = if j == (i + 1) % s { a } else { 0.0 };
        shift + (1.0 - a) / s as f64
    })
}
