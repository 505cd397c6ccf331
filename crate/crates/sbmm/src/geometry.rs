//! Box constraints, coordinate blocks, projections and the tangent-cone
//! stationarity measure.

use rand::Rng;

use crate::error::{dim_check, Error, Result};

/// Tolerance for deciding that a coordinate sits on a bound.
pub const BOUNDARY_TOL: f64 = 1e-9;
pub const DYKSTRA_TOL: f64 = 1e-10;
pub const DYKSTRA_MAX_ITERS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        dim_check("box upper bound", upper.len(), lower.len())?;
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite()) {
                return Err(Error::Arg(format!("box bound {i} is not finite")));
            }
            if !(l < u) {
                return Err(Error::Arg(format!("box coordinate {i}: lower {l} must be < upper {u}")));
            }
        }
        Ok(BoxSet { lower, upper })
    }

    pub fn uniform(p: usize, lower: f64, upper: f64) -> Result<Self> {
        BoxSet::new(vec![lower; p], vec![upper; p])
    }

    /// [0, upper]^p.
    pub fn nonneg(p: usize, upper: f64) -> Result<Self> {
        BoxSet::uniform(p, 0.0, upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }

    pub fn diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| (u - l) * (u - l))
            .sum::<f64>()
            .sqrt()
    }

    /// The sub-box on the coordinates in `block`.
    pub fn slice(&self, block: &[usize]) -> BoxSet {
        BoxSet {
            lower: block.iter().map(|&i| self.lower[i]).collect(),
            upper: block.iter().map(|&i| self.upper[i]).collect(),
        }
    }

    /// Concatenation of two boxes.
    pub fn concat(&self, other: &BoxSet) -> BoxSet {
        let mut lower = self.lower.clone();
        lower.extend_from_slice(&other.lower);
        let mut upper = self.upper.clone();
        upper.extend_from_slice(&other.upper);
        BoxSet { lower, upper }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| rng.gen_range(*l..*u))
            .collect()
    }
}

pub fn project_box(x: &[f64], b: &BoxSet) -> Result<Vec<f64>> {
    dim_check("project_box", x.len(), b.dim())?;
    Ok(x.iter()
        .zip(b.lower.iter().zip(&b.upper))
        .map(|(v, (l, u))| v.clamp(*l, *u))
        .collect())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[inline]
fn soft(v: f64, k: f64) -> f64 {
    if v > k {
        v - k
    } else if v < -k {
        v + k
    } else {
        0.0
    }
}

/// argmin over box ∩ ball(center, radius) of ½‖z − v‖² + t‖z‖₁.
///
/// For a multiplier μ ≥ 0 on the ball the problem separates per coordinate:
/// z(μ)ᵢ = clamp(soft((vᵢ + μcᵢ)/(1+μ), t/(1+μ))). ‖z(μ) − c‖ is non-increasing
/// in μ, so μ is found by bisection. `radius = None` drops the ball.
pub fn prox_l1_box_ball(
    v: &[f64],
    lower: &[f64],
    upper: &[f64],
    center: &[f64],
    radius: Option<f64>,
    t: f64,
) -> Vec<f64> {
    let eval = |mu: f64| -> Vec<f64> {
        let s = 1.0 / (1.0 + mu);
        (0..v.len())
            .map(|i| soft((v[i] + mu * center[i]) * s, t * s).clamp(lower[i], upper[i]))
            .collect()
    };
    let z0 = eval(0.0);
    let r = match radius {
        None => return z0,
        Some(r) => r,
    };
    if r <= 0.0 {
        return center.to_vec();
    }
    if dist(&z0, center) <= r {
        return z0;
    }
    let mut hi = 1.0;
    let mut z_hi = eval(hi);
    while dist(&z_hi, center) > r {
        hi *= 2.0;
        z_hi = eval(hi);
        if hi > 1e300 {
            return center.to_vec();
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let z = eval(mid);
        if dist(&z, center) > r {
            lo = mid;
        } else {
            hi = mid;
            z_hi = z;
        }
    }
    z_hi
}

/// Euclidean projection onto box ∩ ball(center, radius), exact up to the
/// bisection on the ball multiplier.
pub fn project_box_ball(x: &[f64], b: &BoxSet, center: &[f64], radius: f64) -> Result<Vec<f64>> {
    dim_check("project_box_ball", x.len(), b.dim())?;
    dim_check("project_box_ball center", center.len(), b.dim())?;
    if !b.contains(center, BOUNDARY_TOL) {
        return Err(Error::Contract("ball center lies outside the box".into()));
    }
    if !(radius >= 0.0) {
        return Err(Error::Arg(format!("radius {radius} must be >= 0")));
    }
    let r = if radius.is_finite() { Some(radius) } else { None };
    Ok(prox_l1_box_ball(x, &b.lower, &b.upper, center, r, 0.0))
}

/// The same projection by Dykstra's alternating scheme, kept as an
/// independent cross-check of [`project_box_ball`].
pub fn project_box_ball_dykstra(
    x: &[f64],
    b: &BoxSet,
    center: &[f64],
    radius: f64,
) -> Result<Vec<f64>> {
    dim_check("dykstra", x.len(), b.dim())?;
    if !b.contains(center, BOUNDARY_TOL) {
        return Err(Error::Contract("ball center lies outside the box".into()));
    }
    if radius <= 0.0 {
        return Ok(center.to_vec());
    }
    let n = x.len();
    let ball = |y: &[f64]| -> Vec<f64> {
        let d = dist(y, center);
        if d <= radius {
            y.to_vec()
        } else {
            (0..n).map(|i| center[i] + (y[i] - center[i]) * radius / d).collect()
        }
    };
    let mut cur = x.to_vec();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for _ in 0..DYKSTRA_MAX_ITERS {
        let shifted: Vec<f64> = (0..n).map(|i| cur[i] + p[i]).collect();
        let y = project_box(&shifted, b)?;
        for i in 0..n {
            p[i] = shifted[i] - y[i];
        }
        let shifted: Vec<f64> = (0..n).map(|i| y[i] + q[i]).collect();
        let next = ball(&shifted);
        for i in 0..n {
            q[i] = shifted[i] - next[i];
        }
        let change = dist(&next, &cur);
        let gap = dist(&next, &y);
        cur = next;
        if change <= DYKSTRA_TOL && gap <= DYKSTRA_TOL {
            return Ok(cur);
        }
    }
    Err(Error::NoConvergence { what: "Dykstra projection", iters: DYKSTRA_MAX_ITERS })
}

/// Feasible set of one block sub-problem: coordinates outside `block` frozen
/// at `frozen`, the block sub-vector confined to the box slice intersected with
/// a ball around `center` (`radius = None` means no ball).
#[derive(Clone, Debug)]
pub struct RestrictedBlockSet {
    pub block: Vec<usize>,
    pub frozen: Vec<f64>,
    pub sub_box: BoxSet,
    pub center: Vec<f64>,
    pub radius: Option<f64>,
}

impl RestrictedBlockSet {
    pub fn contains(&self, theta: &[f64], tol: f64) -> bool {
        if theta.len() != self.frozen.len() {
            return false;
        }
        let mut inside = vec![false; theta.len()];
        for &i in &self.block {
            inside[i] = true;
        }
        for i in 0..theta.len() {
            if !inside[i] && theta[i] != self.frozen[i] {
                return false;
            }
        }
        let z: Vec<f64> = self.block.iter().map(|&i| theta[i]).collect();
        if !self.sub_box.contains(&z, tol) {
            return false;
        }
        match self.radius {
            None => true,
            Some(r) => dist(&z, &self.center) <= r + tol,
        }
    }

    /// Block sub-vector of a full point.
    pub fn gather(&self, theta: &[f64]) -> Vec<f64> {
        self.block.iter().map(|&i| theta[i]).collect()
    }

    /// Full point with the block replaced by `z`.
    pub fn scatter(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.frozen.clone();
        for (k, &i) in self.block.iter().enumerate() {
            out[i] = z[k];
        }
        out
    }

    pub fn project(&self, z: &[f64], l1: f64) -> Vec<f64> {
        prox_l1_box_ball(z, &self.sub_box.lower, &self.sub_box.upper, &self.center, self.radius, l1)
    }
}

/// Freeze everything outside `block` at `theta_prev`; the ball is centred at
/// the block part of `theta_prev`. A non-finite radius means no ball.
pub fn restricted_block_set(
    b: &BoxSet,
    theta_prev: &[f64],
    block: &[usize],
    radius: f64,
) -> Result<RestrictedBlockSet> {
    dim_check("restricted_block_set", theta_prev.len(), b.dim())?;
    if let Some(&bad) = block.iter().find(|&&i| i >= b.dim()) {
        return Err(Error::Arg(format!("block index {bad} out of range")));
    }
    if !b.contains(theta_prev, BOUNDARY_TOL) {
        return Err(Error::Contract("anchor of the block set lies outside the box".into()));
    }
    Ok(RestrictedBlockSet {
        block: block.to_vec(),
        frozen: theta_prev.to_vec(),
        sub_box: b.slice(block),
        center: block.iter().map(|&i| theta_prev[i]).collect(),
        radius: radius.is_finite().then_some(radius.max(0.0)),
    })
}

/// Projection of `g` onto the tangent cone of the box at `theta`.
pub fn tangent_cone_project(g: &[f64], theta: &[f64], b: &BoxSet) -> Result<Vec<f64>> {
    dim_check("tangent_cone_project", g.len(), b.dim())?;
    dim_check("tangent_cone_project theta", theta.len(), b.dim())?;
    if !b.contains(theta, BOUNDARY_TOL) {
        return Err(Error::Contract("tangent cone requested at a point outside the box".into()));
    }
    Ok((0..g.len())
        .map(|i| {
            let at_lower = theta[i] <= b.lower[i] + BOUNDARY_TOL;
            let at_upper = theta[i] >= b.upper[i] - BOUNDARY_TOL;
            if (at_lower && g[i] < 0.0) || (at_upper && g[i] > 0.0) {
                0.0
            } else {
                g[i]
            }
        })
        .collect())
}

/// ‖tangent_cone_project(−grad)‖: the steepest feasible descent rate.
pub fn stationarity_measure(grad: &[f64], theta: &[f64], b: &BoxSet) -> Result<f64> {
    let neg: Vec<f64> = grad.iter().map(|v| -v).collect();
    let t = tangent_cone_project(&neg, theta, b)?;
    Ok(t.iter().map(|v| v * v).sum::<f64>().sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    Cyclic,
    UniformRandom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    pub blocks: Vec<Vec<usize>>,
    pub m: usize,
    pub selection: Selection,
}

impl BlockSpec {
    /// Validates coverage of {0..p-1}; `m = None` means one sub-step per block.
    pub fn new(p: usize, blocks: Vec<Vec<usize>>, m: Option<usize>, selection: Selection) -> Result<Self> {
        if blocks.is_empty() || blocks.iter().any(|b| b.is_empty()) {
            return Err(Error::Arg("block list must be non-empty with non-empty blocks".into()));
        }
        let mut seen = vec![false; p];
        for b in &blocks {
            for &i in b {
                if i >= p {
                    return Err(Error::Arg(format!("block index {i} out of range for dimension {p}")));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Arg(format!("coordinate {i} is not covered by any block")));
        }
        let m = m.unwrap_or(blocks.len());
        if m == 0 {
            return Err(Error::Arg("m must be positive".into()));
        }
        Ok(BlockSpec { blocks, m, selection })
    }

    pub fn full(p: usize) -> Self {
        BlockSpec { blocks: vec![(0..p).collect()], m: 1, selection: Selection::Cyclic }
    }

    /// Rows of a row-major q×r matrix.
    pub fn rows(q: usize, r: usize) -> Self {
        let blocks = (0..q).map(|a| (a * r..a * r + r).collect()).collect();
        BlockSpec { blocks, m: q, selection: Selection::Cyclic }
    }

    /// Columns of a row-major q×r matrix.
    pub fn columns(q: usize, r: usize) -> Self {
        let blocks = (0..r).map(|j| (0..q).map(|a| a * r + j).collect()).collect();
        BlockSpec { blocks, m: r, selection: Selection::Cyclic }
    }

    /// Contiguous segments of the given lengths (one block per CP factor).
    pub fn segments(lengths: &[usize]) -> Self {
        let mut start = 0;
        let blocks = lengths
            .iter()
            .map(|&l| {
                let b: Vec<usize> = (start..start + l).collect();
                start += l;
                b
            })
            .collect();
        BlockSpec { blocks, m: lengths.len(), selection: Selection::Cyclic }
    }

    pub fn is_partition(&self) -> bool {
        let p = self.blocks.iter().map(|b| b.len()).sum::<usize>();
        let mut seen = vec![false; p];
        for b in &self.blocks {
            for &i in b {
                if i >= p || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        true
    }
}

/// The m blocks for one outer step: the partition order for cyclic selection
/// (wrapping when m exceeds the block count), independent uniform draws otherwise.
pub fn select_blocks<'a, R: Rng + ?Sized>(spec: &'a BlockSpec, rng: &mut R) -> Vec<&'a [usize]> {
    match spec.selection {
        Selection::Cyclic => (0..spec.m).map(|i| spec.blocks[i % spec.blocks.len()].as_slice()).collect(),
        Selection::UniformRandom => (0..spec.m)
            .map(|_| spec.blocks[rng.gen_range(0..spec.blocks.len())].as_slice())
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RowSampler {
    All,
    /// Uniform subset of this many rows.
    Fixed(usize),
    /// Each row independently with this probability.
    Bernoulli(f64),
    /// Always these rows.
    Rows(Vec<usize>),
}

impl RowSampler {
    pub fn validate(&self, q: usize) -> Result<()> {
        match self {
            RowSampler::All => Ok(()),
            RowSampler::Fixed(k) if *k >= 1 && *k <= q => Ok(()),
            RowSampler::Bernoulli(p) if *p > 0.0 && *p <= 1.0 => Ok(()),
            RowSampler::Rows(rows) if !rows.is_empty() && rows.iter().all(|&a| a < q) => Ok(()),
            other => Err(Error::Arg(format!("invalid row sampler {other:?} for {q} rows"))),
        }
    }

    /// Sorted row subset; an empty Bernoulli draw is redrawn once, then rejected.
    pub fn sample<R: Rng + ?Sized>(&self, q: usize, rng: &mut R) -> Result<Vec<usize>> {
        self.validate(q)?;
        Ok(match self {
            RowSampler::All => (0..q).collect(),
            RowSampler::Fixed(k) => {
                let mut rows = rand::seq::index::sample(rng, q, *k).into_vec();
                rows.sort_unstable();
                rows
            }
            RowSampler::Bernoulli(p) => {
                for _ in 0..2 {
                    let rows: Vec<usize> = (0..q).filter(|_| rng.gen::<f64>() < *p).collect();
                    if !rows.is_empty() {
                        return Ok(rows);
                    }
                }
                return Err(Error::Contract("row sampler drew an empty set twice".into()));
            }
            RowSampler::Rows(rows) => {
                let mut rows = rows.clone();
                rows.sort_unstable();
                rows.dedup();
                rows
            }
        })
    }
}
