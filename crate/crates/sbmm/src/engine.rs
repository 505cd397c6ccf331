//! The SBMM outer loop and its block-minimization inner pass.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_check, Error, Result};
use crate::geometry::{restricted_block_set, select_blocks, BlockSpec, BoxSet, RowSampler, BOUNDARY_TOL};
use crate::quadform::{
    average_surrogate, make_dc_surrogate, make_lipschitz_surrogate, make_prox_surrogate, AveragedSurrogate,
    ConvexQuad, Penalty, QuadSurrogate, Surrogate,
};
use crate::schedule::WeightSchedule;
use crate::stream::MarkovSource;
use crate::subsolver::solve_block_qp;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Strongly convex surrogates, no trust region.
    C1,
    /// Block multi-convex surrogates inside a ball of radius c′wₙ.
    C2,
}

#[derive(Clone, Debug)]
pub struct LossEval {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// A per-sample surrogate built at an anchor, with the loss value achieved there.
#[derive(Clone, Debug)]
pub struct BuiltSurrogate<S> {
    pub g: S,
    /// Value of the inner problem at the anchor, within `g.eps()` of ℓ(x, anchor).
    pub loss_at_anchor: f64,
}

/// A loss ℓ(x, θ) over a box together with its surrogate recipe.
pub trait Problem: Sync {
    type Sample: Clone + Send + Sync;
    type Surr: Surrogate;

    fn dim(&self) -> usize;
    fn param_box(&self) -> &BoxSet;
    /// ℓ(x, θ) and ∇θℓ(x, θ).
    fn loss(&self, x: &Self::Sample, theta: &[f64]) -> Result<LossEval>;
    fn loss_value(&self, x: &Self::Sample, theta: &[f64]) -> Result<f64> {
        Ok(self.loss(x, theta)?.value)
    }
    /// gₙ at `anchor` with εₙ ≤ `eps_cap`; `tol` is the inner solver tolerance.
    fn build_surrogate(&self, x: &Self::Sample, anchor: &[f64], eps_cap: f64, tol: f64) -> Result<BuiltSurrogate<Self::Surr>>;
    /// (ρ/2)‖θ − θ₀‖² in this problem's representation.
    fn initial_surrogate(&self, theta0: &[f64], rho: f64) -> Self::Surr;
    /// Adds (ρ/2)‖θ − center‖² to `g`.
    fn add_proximal(&self, g: &mut Self::Surr, center: &[f64], rho: f64);
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub mode: Mode,
    /// Trust-region constant; `f64::INFINITY` disables the ball.
    pub c_prime: f64,
    pub schedule: WeightSchedule,
    pub blocks: BlockSpec,
    pub tol: f64,
    pub max_iters: usize,
    pub eps_cap: f64,
    /// Weight of the initial surrogate (ρ/2)‖θ − θ₀‖²; in mode C1 the same
    /// proximal term is added to every gₙ whose own modulus is zero.
    pub rho: f64,
    pub seed: u64,
    /// Keep every sample in the state (needed only for direct empirical-loss sums).
    pub retain_samples: bool,
    /// Replace `blocks` by one block of randomly drawn rows of a row-major
    /// matrix with this many columns.
    pub row_sampler: Option<(RowSampler, usize)>,
}

impl EngineConfig {
    pub fn new(mode: Mode, schedule: WeightSchedule, blocks: BlockSpec) -> Self {
        EngineConfig {
            mode,
            c_prime: if mode == Mode::C1 { f64::INFINITY } else { 1.0 },
            schedule,
            blocks,
            tol: crate::subsolver::DEFAULT_TOL,
            max_iters: crate::subsolver::DEFAULT_MAX_ITERS,
            eps_cap: 1e-6,
            rho: if mode == Mode::C1 { 1.0 } else { 0.0 },
            seed: 0,
            retain_samples: false,
            row_sampler: None,
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        match self.mode {
            Mode::C1 => {
                if self.c_prime.is_finite() {
                    return Err(Error::Config("mode c1 runs without a trust region (c_prime must be infinite)".into()));
                }
            }
            Mode::C2 => {
                if !(self.c_prime > 0.0 && self.c_prime.is_finite()) {
                    return Err(Error::Config(format!("mode c2 needs a finite c_prime > 0, got {}", self.c_prime)));
                }
            }
        }
        if self.rho < 0.0 {
            return Err(Error::Config("rho must be >= 0".into()));
        }
        if !(self.tol > 0.0) || !(self.eps_cap > 0.0) {
            return Err(Error::Config("solver tolerance and eps cap must be positive".into()));
        }
        let covered: usize = {
            let mut seen = vec![false; p];
            for b in &self.blocks.blocks {
                for &i in b {
                    if i >= p {
                        return Err(Error::Config(format!("block index {i} out of range for dimension {p}")));
                    }
                    seen[i] = true;
                }
            }
            seen.iter().filter(|s| **s).count()
        };
        if covered != p {
            return Err(Error::Config("blocks do not cover every coordinate".into()));
        }
        if let Some((sampler, r)) = &self.row_sampler {
            if *r == 0 || p % r != 0 {
                return Err(Error::Config(format!("row width {r} does not divide dimension {p}")));
            }
            sampler.validate(p / r).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SbmmState<S, X> {
    pub n: usize,
    pub theta: Vec<f64>,
    pub theta_prev: Vec<f64>,
    pub gbar: AveragedSurrogate<S>,
    pub sample_log: Vec<X>,
    /// Σ_{k≤n} εₖ.
    pub eps_sum: f64,
    pub rng: ChaCha8Rng,
}

/// What one outer step did, for auditing.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub n: usize,
    pub w: f64,
    pub eps: f64,
    pub eps_bar: f64,
    pub eps_sum: f64,
    /// Inner-problem value at θₙ₋₁ (≥ ℓ(xₙ, θₙ₋₁), within εₙ).
    pub loss_at_anchor: f64,
    /// ḡₙ₋₁(θₙ₋₁).
    pub gbar_prev_at_prev: f64,
    /// ḡₙ(θ⁽ⁱ⁾) for the sub-iterates i = 0..m (θ⁽⁰⁾ = θₙ₋₁, θ⁽ᵐ⁾ = θₙ).
    pub sub_values: Vec<f64>,
    /// ‖θ⁽ⁱ⁾ − θ⁽ⁱ⁻¹⁾‖ for i = 1..m.
    pub sub_steps: Vec<f64>,
    /// Per-block radius, `None` without a trust region.
    pub radius: Option<f64>,
    pub step_norm: f64,
    /// ‖∇gₙ‖ at θₙ₋₁ and θₙ (for the C1 step-bound audit).
    pub g_grad_norms: (f64, f64),
    /// Block modulus of ḡₙ.
    pub rho_bar: f64,
}

impl StepReport {
    pub fn gbar_at_prev(&self) -> f64 {
        self.sub_values[0]
    }

    pub fn gbar_at_new(&self) -> f64 {
        *self.sub_values.last().unwrap()
    }
}

pub struct Sbmm<P: Problem> {
    pub problem: P,
    pub config: EngineConfig,
    pub state: SbmmState<P::Surr, P::Sample>,
}

pub fn eps_bar_update(eps_bar_prev: f64, eps_n: f64, w_n: f64) -> f64 {
    (1.0 - w_n) * eps_bar_prev + w_n * eps_n
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl<P: Problem> Sbmm<P> {
    /// θ₀ = `theta0`, or uniform in the box from the config seed.
    pub fn new(problem: P, config: EngineConfig, theta0: Option<Vec<f64>>) -> Result<Self> {
        let p = problem.dim();
        config.validate(p)?;
        dim_check("parameter box", problem.param_box().dim(), p)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let theta0 = match theta0 {
            Some(t) => {
                dim_check("theta0", t.len(), p)?;
                if !problem.param_box().contains(&t, BOUNDARY_TOL) {
                    return Err(Error::Config("theta0 lies outside the parameter box".into()));
                }
                t
            }
            None => problem.param_box().sample(&mut rng),
        };
        let g0 = problem.initial_surrogate(&theta0, config.rho);
        Ok(Sbmm {
            state: SbmmState {
                n: 0,
                theta: theta0.clone(),
                theta_prev: theta0,
                gbar: AveragedSurrogate::initial(g0),
                sample_log: Vec::new(),
                eps_sum: 0.0,
                rng,
            },
            problem,
            config,
        })
    }

    /// One pass of block minimization of `gbar` starting from the current θ.
    /// Returns θₙ, the surrogate values along the sub-iterates and the sub-step norms.
    pub fn block_minimize(&mut self, gbar: &AveragedSurrogate<P::Surr>, w_n: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let cfg = &self.config;
        let blocks: Vec<Vec<usize>> = match &cfg.row_sampler {
            Some((sampler, r)) => {
                let rows = sampler.sample(self.state.theta.len() / r, &mut self.state.rng)?;
                vec![rows.iter().flat_map(|&a| a * r..a * r + r).collect()]
            }
            None => select_blocks(&cfg.blocks, &mut self.state.rng).into_iter().map(|b| b.to_vec()).collect(),
        };
        let radius = match cfg.mode {
            Mode::C1 => f64::INFINITY,
            Mode::C2 => cfg.c_prime * w_n / blocks.len() as f64,
        };
        minimize_blocks(&gbar.g, &self.state.theta, self.problem.param_box(), &blocks, radius, cfg.tol, cfg.max_iters)
    }

    /// One outer step with sample `x`.
    pub fn step(&mut self, x: &P::Sample) -> Result<StepReport> {
        let n = self.state.n + 1;
        let w = self.config.schedule.weight_at(n);
        let anchor = self.state.theta.clone();
        let built = self.problem.build_surrogate(x, &anchor, self.config.eps_cap, self.config.tol)?;
        let mut g = built.g;
        if self.config.mode == Mode::C1 && g.rho() <= 0.0 {
            if self.config.rho <= 0.0 {
                return Err(Error::Config("mode c1 needs strongly convex surrogates: set rho > 0".into()));
            }
            self.problem.add_proximal(&mut g, &anchor, self.config.rho);
        }
        let eps = g.eps();
        let gbar_prev_at_prev = self.state.gbar.eval(&anchor);
        let gbar = average_surrogate(&self.state.gbar, &g, w)?;
        if self.config.mode == Mode::C1 && gbar.g.rho() <= 0.0 {
            return Err(Error::Config("mode c1 needs a strongly convex averaged surrogate".into()));
        }
        let (theta, sub_values, sub_steps) = self.block_minimize(&gbar, w)?;
        let g_grad_norms = (norm(&g.grad(&anchor)), norm(&g.grad(&theta)));
        let step_norm = diff_norm(&theta, &anchor);
        let radius = match self.config.mode {
            Mode::C1 => None,
            Mode::C2 => Some(self.config.c_prime * w / sub_steps.len() as f64),
        };
        let rho_bar = gbar.g.rho();
        self.state.eps_sum += eps;
        self.state.theta_prev = anchor;
        self.state.theta = theta;
        self.state.gbar = gbar;
        self.state.n = n;
        if self.config.retain_samples {
            self.state.sample_log.push(x.clone());
        }
        Ok(StepReport {
            n,
            w,
            eps,
            eps_bar: self.state.gbar.eps_bar,
            eps_sum: self.state.eps_sum,
            loss_at_anchor: built.loss_at_anchor,
            gbar_prev_at_prev,
            sub_values,
            sub_steps,
            radius,
            step_norm,
            g_grad_norms,
            rho_bar,
        })
    }
}

/// One pass over `blocks`: each block of `g` is minimized over the box with the
/// other coordinates frozen, inside a ball of `radius` around the latest iterate.
/// Returns the final point, g along the sub-iterates and the sub-step norms.
pub fn minimize_blocks<S: Surrogate>(
    g: &S,
    theta0: &[f64],
    pbox: &BoxSet,
    blocks: &[Vec<usize>],
    radius: f64,
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut theta = theta0.to_vec();
    let mut values = vec![g.eval(&theta)];
    let mut steps = Vec::with_capacity(blocks.len());
    for block in blocks {
        let feas = restricted_block_set(pbox, &theta, block, radius)?;
        let bp = g.block_problem(&theta, block)?;
        let z0 = feas.gather(&theta);
        let sol = solve_block_qp(&bp, &feas, &z0, tol, max_iters)?;
        let next = feas.scatter(&sol.z);
        steps.push(diff_norm(&next, &theta));
        theta = next;
        values.push(g.eval(&theta));
    }
    Ok((theta, values, steps))
}

/// Same as [`Sbmm::step`], as a free function.
pub fn sbmm_step<P: Problem>(engine: &mut Sbmm<P>, x: &P::Sample) -> Result<StepReport> {
    engine.step(x)
}

/// Runs `n_iters` steps drawing samples from `source`. `observe` sees the engine
/// after each step, with the chain state that emitted the sample.
pub fn run<P, F>(engine: &mut Sbmm<P>, source: &mut MarkovSource<P::Sample>, n_iters: usize, mut observe: F) -> Result<Vec<Vec<f64>>>
where
    P: Problem,
    F: FnMut(&Sbmm<P>, usize, &P::Sample, &StepReport) -> Result<()>,
{
    let mut traj = Vec::with_capacity(n_iters + 1);
    traj.push(engine.state.theta.clone());
    for _ in 0..n_iters {
        let (state, x) = source.next();
        let rep = engine.step(&x)?;
        observe(engine, state, &x, &rep)?;
        traj.push(engine.state.theta.clone());
    }
    Ok(traj)
}

/// Violations of the per-step stability invariants.
#[derive(Clone, Debug, Default)]
pub struct InvariantAudit {
    pub steps: usize,
    pub monotonicity: usize,
    pub radius: usize,
    pub c1_step: usize,
    /// Loosest observed ratio ‖Δ‖ / bound for the radius / C1 checks.
    pub worst_radius_ratio: f64,
    pub worst_c1_ratio: f64,
    /// Running estimate of the Lipschitz constant R.
    pub r_hat: f64,
    pub messages: Vec<String>,
}

impl InvariantAudit {
    pub fn violations(&self) -> usize {
        self.monotonicity + self.radius + self.c1_step
    }

    /// Checks forward monotonicity, the c′wₙ step bound (C2) and the 2Rwₙ/ρ
    /// step bound (C1) for one step.
    pub fn record(&mut self, rep: &StepReport, mode: Mode, c_prime: f64, tol: f64) {
        self.steps += 1;
        let scale = rep.sub_values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for (i, pair) in rep.sub_values.windows(2).enumerate() {
            if pair[1] > pair[0] + 1e-10 * scale {
                self.monotonicity += 1;
                self.messages.push(format!("n={} sub-step {}: {} > {}", rep.n, i + 1, pair[1], pair[0]));
            }
        }
        self.r_hat = self.r_hat.max(rep.g_grad_norms.0).max(rep.g_grad_norms.1);
        match mode {
            Mode::C2 => {
                let bound = c_prime * rep.w;
                let ratio = rep.step_norm / bound;
                self.worst_radius_ratio = self.worst_radius_ratio.max(ratio);
                let per_block_ok = match rep.radius {
                    Some(r) => rep.sub_steps.iter().all(|s| *s <= r * (1.0 + 1e-9) + 1e-12),
                    None => true,
                };
                if rep.step_norm > bound * (1.0 + 1e-9) + 1e-12 || !per_block_ok {
                    self.radius += 1;
                    self.messages.push(format!("n={}: step {} exceeds c'w_n = {}", rep.n, rep.step_norm, bound));
                }
            }
            Mode::C1 => {
                let bound = 2.0 * self.r_hat * rep.w / rep.rho_bar;
                // inexact inner minimizers contribute O(tol/ρ)
                let slack = 1e-6 * bound + 4.0 * tol / rep.rho_bar;
                let ratio = if bound > 0.0 { rep.step_norm / bound } else { 0.0 };
                self.worst_c1_ratio = self.worst_c1_ratio.max(ratio);
                if rep.step_norm > bound + slack {
                    self.c1_step += 1;
                    self.messages.push(format!("n={}: step {} exceeds 2Rw/rho = {}", rep.n, rep.step_norm, bound));
                }
            }
        }
    }
}

/// How a vector-valued loss is majorized.
#[derive(Clone, Debug, PartialEq)]
pub enum SurrogateRecipe {
    /// ℓ = ½‖x − Dθ‖², quadratic upper bound with constant L.
    Lipschitz { l: f64 },
    /// ℓ = ½‖x − Dθ‖² + λ‖θ‖₁, prox surrogate with constant L.
    Prox { l: f64, lambda: f64 },
    /// ℓ = ½‖x − Dθ‖² − (γ/4)‖θ‖⁴, concave part linearized.
    Dc { gamma: f64 },
}

/// Regression-type losses of a vector sample against a fixed design D (d×p).
#[derive(Clone, Debug)]
pub struct VectorProblem {
    pub design: DMatrix<f64>,
    pub pbox: BoxSet,
    pub recipe: SurrogateRecipe,
}

impl VectorProblem {
    pub fn new(design: DMatrix<f64>, pbox: BoxSet, recipe: SurrogateRecipe) -> Result<Self> {
        dim_check("design columns", design.ncols(), pbox.dim())?;
        match &recipe {
            SurrogateRecipe::Lipschitz { l } | SurrogateRecipe::Prox { l, .. } => {
                if !(*l > 0.0) {
                    return Err(Error::Arg("recipe constant L must be positive".into()));
                }
                let lmax = (design.transpose() * &design).symmetric_eigen().eigenvalues.max();
                if *l < lmax * (1.0 - 1e-12) {
                    return Err(Error::Arg(format!("L = {l} is below the smoothness constant {lmax}")));
                }
            }
            SurrogateRecipe::Dc { gamma } => {
                if *gamma < 0.0 {
                    return Err(Error::Arg("gamma must be >= 0".into()));
                }
            }
        }
        if let SurrogateRecipe::Prox { lambda, .. } = &recipe {
            if *lambda < 0.0 {
                return Err(Error::Arg("lambda must be >= 0".into()));
            }
        }
        Ok(VectorProblem { design, pbox, recipe })
    }

    fn smooth(&self, x: &[f64], theta: &[f64]) -> (f64, Vec<f64>) {
        let t = DVector::from_column_slice(theta);
        let r = DVector::from_column_slice(x) - &self.design * t;
        let grad = -(self.design.transpose() * &r);
        (0.5 * r.norm_squared(), grad.as_slice().to_vec())
    }
}

impl Problem for VectorProblem {
    type Sample = Vec<f64>;
    type Surr = QuadSurrogate;

    fn dim(&self) -> usize {
        self.pbox.dim()
    }

    fn param_box(&self) -> &BoxSet {
        &self.pbox
    }

    fn loss(&self, x: &Vec<f64>, theta: &[f64]) -> Result<LossEval> {
        dim_check("sample", x.len(), self.design.nrows())?;
        let (mut value, mut grad) = self.smooth(x, theta);
        match &self.recipe {
            SurrogateRecipe::Lipschitz { .. } => {}
            SurrogateRecipe::Prox { lambda, .. } => {
                for (g, t) in grad.iter_mut().zip(theta) {
                    value += lambda * t.abs();
                    *g += lambda * if *t > 0.0 { 1.0 } else if *t < 0.0 { -1.0 } else { 0.0 };
                }
            }
            SurrogateRecipe::Dc { gamma } => {
                let sq: f64 = theta.iter().map(|t| t * t).sum();
                value -= 0.25 * gamma * sq * sq;
                for (g, t) in grad.iter_mut().zip(theta) {
                    *g -= gamma * sq * t;
                }
            }
        }
        Ok(LossEval { value, grad })
    }

    fn build_surrogate(&self, x: &Vec<f64>, anchor: &[f64], _eps_cap: f64, _tol: f64) -> Result<BuiltSurrogate<QuadSurrogate>> {
        let (f1, g1) = self.smooth(x, anchor);
        let value = self.loss(x, anchor)?.value;
        let g = match &self.recipe {
            SurrogateRecipe::Lipschitz { l } => make_lipschitz_surrogate(f1, &g1, anchor, *l)?,
            SurrogateRecipe::Prox { l, lambda } => make_prox_surrogate(f1, &g1, &Penalty::L1(*lambda), anchor, *l)?,
            SurrogateRecipe::Dc { gamma } => {
                let dt = self.design.transpose();
                let xv = DVector::from_column_slice(x);
                let f1q = ConvexQuad {
                    curvature: &dt * &self.design,
                    linear: (-(&dt * &xv)).as_slice().to_vec(),
                    constant: 0.5 * xv.norm_squared(),
                };
                let sq: f64 = anchor.iter().map(|t| t * t).sum();
                let f2_grad: Vec<f64> = anchor.iter().map(|t| -gamma * sq * t).collect();
                // Hessian of (γ/4)‖θ‖⁴ is γ(‖θ‖²I + 2θθᵀ) ⪯ 3γ·max‖θ‖² I on the box
                let rmax2: f64 = self.pbox.lower.iter().zip(&self.pbox.upper).map(|(l, u)| l.abs().max(u.abs()).powi(2)).sum();
                make_dc_surrogate(&f1q, -0.25 * gamma * sq * sq, &f2_grad, anchor, None, 3.0 * gamma * rmax2)?
            }
        };
        Ok(BuiltSurrogate { g, loss_at_anchor: value })
    }

    fn initial_surrogate(&self, theta0: &[f64], rho: f64) -> QuadSurrogate {
        QuadSurrogate::proximal(theta0, rho)
    }

    fn add_proximal(&self, g: &mut QuadSurrogate, center: &[f64], rho: f64) {
        g.add_proximal(center, rho);
    }
}
