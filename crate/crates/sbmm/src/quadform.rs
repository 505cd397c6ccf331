//! Quadratic surrogate representations, the surrogate factories, recursive
//! averaging and majorization checks.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_check, Error, Result};
use crate::subsolver::{solve_code_lasso, BlockProblem};
use crate::geometry::BoxSet;

/// Common interface of every surrogate representation the engine averages and
/// minimizes.
pub trait Surrogate: Clone + Send + Sync + std::fmt::Debug {
    fn dim(&self) -> usize;
    fn eval(&self, theta: &[f64]) -> f64;
    /// Gradient of the differentiable part.
    fn smooth_grad(&self, theta: &[f64]) -> Vec<f64>;
    /// Weight of the ℓ₁ term carried symbolically (0 when absent).
    fn l1_weight(&self) -> f64 {
        0.0
    }
    /// (1 − w)·self + w·other.
    fn combine(&self, other: &Self, w: f64) -> Result<Self>;
    /// Hessian of the smooth part on `block`, at `theta` (other coordinates fixed).
    fn hessian_block(&self, theta: &[f64], block: &[usize]) -> Result<DMatrix<f64>>;
    /// Block strong-convexity modulus.
    fn rho(&self) -> f64;
    fn eps(&self) -> f64;

    /// Gradient with the subgradient convention sign(0) = 0 for the ℓ₁ term.
    fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = self.smooth_grad(theta);
        let l1 = self.l1_weight();
        if l1 != 0.0 {
            for (gi, t) in g.iter_mut().zip(theta) {
                if *t > 0.0 {
                    *gi += l1;
                } else if *t < 0.0 {
                    *gi -= l1;
                }
            }
        }
        g
    }

    /// The surrogate restricted to `block` with everything else frozen at
    /// `theta`, as z ↦ ½zᵀHz + ⟨c,z⟩ + l1‖z‖₁ up to a constant.
    fn block_problem(&self, theta: &[f64], block: &[usize]) -> Result<BlockProblem> {
        let h = self.hessian_block(theta, block)?;
        let g = self.smooth_grad(theta);
        let zj = DVector::from_iterator(block.len(), block.iter().map(|&i| theta[i]));
        let gj = DVector::from_iterator(block.len(), block.iter().map(|&i| g[i]));
        let linear = gj - &h * zj;
        Ok(BlockProblem { hessian: h, linear, l1: self.l1_weight() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Curvature {
    /// L·I.
    Scaled(f64),
    Dense(DMatrix<f64>),
}

impl Curvature {
    fn to_dense(&self, p: usize) -> DMatrix<f64> {
        match self {
            Curvature::Scaled(l) => DMatrix::identity(p, p) * *l,
            Curvature::Dense(m) => m.clone(),
        }
    }
}

/// g(θ) = ½θᵀQθ + ⟨b,θ⟩ + c + l1‖θ‖₁.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadSurrogate {
    pub curvature: Curvature,
    pub linear: Vec<f64>,
    pub constant: f64,
    pub l1: f64,
    pub anchor: Vec<f64>,
    /// Lipschitz constant of the gradient of the error g − f.
    pub lipschitz: f64,
    pub rho: f64,
    pub eps: f64,
}

impl QuadSurrogate {
    /// (ρ/2)‖θ − θ₀‖², the initial averaged surrogate.
    pub fn proximal(theta0: &[f64], rho: f64) -> Self {
        QuadSurrogate {
            curvature: Curvature::Scaled(rho),
            linear: theta0.iter().map(|t| -rho * t).collect(),
            constant: 0.5 * rho * dot(theta0, theta0),
            l1: 0.0,
            anchor: theta0.to_vec(),
            lipschitz: 0.0,
            rho,
            eps: 0.0,
        }
    }

    fn quad_times(&self, theta: &[f64]) -> Vec<f64> {
        match &self.curvature {
            Curvature::Scaled(l) => theta.iter().map(|t| l * t).collect(),
            Curvature::Dense(m) => (m * DVector::from_column_slice(theta)).as_slice().to_vec(),
        }
    }

    /// Adds (rho/2)‖θ − center‖² in place.
    pub fn add_proximal(&mut self, center: &[f64], rho: f64) {
        let prox = QuadSurrogate::proximal(center, rho);
        self.curvature = match (&self.curvature, prox.curvature) {
            (Curvature::Scaled(a), Curvature::Scaled(b)) => Curvature::Scaled(a + b),
            (c, p) => Curvature::Dense(c.to_dense(center.len()) + p.to_dense(center.len())),
        };
        for (l, p) in self.linear.iter_mut().zip(&prox.linear) {
            *l += p;
        }
        self.constant += prox.constant;
        self.rho += rho;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Surrogate for QuadSurrogate {
    fn dim(&self) -> usize {
        self.linear.len()
    }

    fn eval(&self, theta: &[f64]) -> f64 {
        let qt = self.quad_times(theta);
        0.5 * dot(theta, &qt) + dot(&self.linear, theta) + self.constant + self.l1 * theta.iter().map(|t| t.abs()).sum::<f64>()
    }

    fn smooth_grad(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = self.quad_times(theta);
        for (gi, b) in g.iter_mut().zip(&self.linear) {
            *gi += b;
        }
        g
    }

    fn l1_weight(&self) -> f64 {
        self.l1
    }

    fn combine(&self, other: &Self, w: f64) -> Result<Self> {
        dim_check("surrogate average", other.dim(), self.dim())?;
        let v = 1.0 - w;
        let curvature = match (&self.curvature, &other.curvature) {
            (Curvature::Scaled(a), Curvature::Scaled(b)) => Curvature::Scaled(v * a + w * b),
            (a, b) => Curvature::Dense(a.to_dense(self.dim()) * v + b.to_dense(self.dim()) * w),
        };
        Ok(QuadSurrogate {
            curvature,
            linear: self.linear.iter().zip(&other.linear).map(|(a, b)| v * a + w * b).collect(),
            constant: v * self.constant + w * other.constant,
            l1: v * self.l1 + w * other.l1,
            anchor: other.anchor.clone(),
            lipschitz: v * self.lipschitz + w * other.lipschitz,
            rho: v * self.rho + w * other.rho,
            eps: v * self.eps + w * other.eps,
        })
    }

    fn hessian_block(&self, _theta: &[f64], block: &[usize]) -> Result<DMatrix<f64>> {
        let k = block.len();
        Ok(match &self.curvature {
            Curvature::Scaled(l) => DMatrix::identity(k, k) * *l,
            Curvature::Dense(m) => DMatrix::from_fn(k, k, |i, j| m[(block[i], block[j])]),
        })
    }

    fn rho(&self) -> f64 {
        self.rho
    }

    fn eps(&self) -> f64 {
        self.eps
    }
}

/// g(θ) = f(θ*) + ⟨∇f(θ*), θ − θ*⟩ + (L/2)‖θ − θ*‖².
pub fn make_lipschitz_surrogate(f_value: f64, grad: &[f64], theta_star: &[f64], l: f64) -> Result<QuadSurrogate> {
    dim_check("lipschitz surrogate", grad.len(), theta_star.len())?;
    if !(l > 0.0) {
        return Err(Error::Arg(format!("L must be positive, got {l}")));
    }
    Ok(QuadSurrogate {
        curvature: Curvature::Scaled(l),
        linear: grad.iter().zip(theta_star).map(|(g, t)| g - l * t).collect(),
        constant: f_value - dot(grad, theta_star) + 0.5 * l * dot(theta_star, theta_star),
        l1: 0.0,
        anchor: theta_star.to_vec(),
        // ∇²(g − f) lies in [0, 2L] when ∇f is L-Lipschitz
        lipschitz: 2.0 * l,
        rho: l,
        eps: 0.0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Penalty {
    /// λ‖θ‖₁.
    L1(f64),
    /// λ Σ_groups ‖θ_G‖₂; not handled by the quadratic factories.
    GroupL2(f64),
}

/// Lipschitz surrogate of the smooth part plus the penalty carried symbolically.
pub fn make_prox_surrogate(
    f1_value: f64,
    f1_grad: &[f64],
    penalty: &Penalty,
    theta_star: &[f64],
    l: f64,
) -> Result<QuadSurrogate> {
    let lambda = match penalty {
        Penalty::L1(lam) if *lam >= 0.0 => *lam,
        Penalty::L1(lam) => return Err(Error::Arg(format!("l1 weight {lam} must be >= 0"))),
        other => return Err(Error::Arg(format!("unsupported penalty {other:?}"))),
    };
    let mut g = make_lipschitz_surrogate(f1_value, f1_grad, theta_star, l)?;
    g.l1 = lambda;
    Ok(g)
}

/// Convex quadratic ½θᵀQθ + ⟨b,θ⟩ + c.
#[derive(Clone, Debug)]
pub struct ConvexQuad {
    pub curvature: DMatrix<f64>,
    pub linear: Vec<f64>,
    pub constant: f64,
}

/// f = f1 + f2 with f1 convex quadratic and f2 concave: f2 is linearized at θ*.
/// `blocks` lists the blocks on which f1 must be convex (None: jointly);
/// `error_lipschitz` is a bound on the gradient Lipschitz constant of −f2.
pub fn make_dc_surrogate(
    f1: &ConvexQuad,
    f2_value: f64,
    f2_grad: &[f64],
    theta_star: &[f64],
    blocks: Option<&[Vec<usize>]>,
    error_lipschitz: f64,
) -> Result<QuadSurrogate> {
    let p = theta_star.len();
    dim_check("dc surrogate linear", f1.linear.len(), p)?;
    dim_check("dc surrogate gradient", f2_grad.len(), p)?;
    if f1.curvature.shape() != (p, p) {
        return Err(Error::Dim("dc surrogate curvature shape".into()));
    }
    let full: Vec<Vec<usize>> = vec![(0..p).collect()];
    let blocks = blocks.unwrap_or(&full);
    let mut rho = f64::INFINITY;
    for b in blocks {
        let sub = DMatrix::from_fn(b.len(), b.len(), |i, j| f1.curvature[(b[i], b[j])]);
        let min_eig = symmetric_min_eig(&sub);
        if min_eig < -1e-8 {
            return Err(Error::Arg(format!("convex part has curvature {min_eig} < 0 on a block")));
        }
        rho = rho.min(min_eig.max(0.0));
    }
    Ok(QuadSurrogate {
        curvature: Curvature::Dense(f1.curvature.clone()),
        linear: f1.linear.iter().zip(f2_grad).map(|(a, b)| a + b).collect(),
        constant: f1.constant + f2_value - dot(f2_grad, theta_star),
        l1: 0.0,
        anchor: theta_star.to_vec(),
        lipschitz: error_lipschitz,
        rho,
        eps: 0.0,
    })
}

pub fn symmetric_min_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.min()
}

/// tr(WAWᵀ) − 2tr(WB) + C for a q×r matrix W stored row-major in θ.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorQuad {
    pub q: usize,
    pub r: usize,
    /// r×r.
    pub a: DMatrix<f64>,
    /// r×q.
    pub b: DMatrix<f64>,
    pub c: f64,
    pub anchor: Vec<f64>,
    pub lipschitz: f64,
    pub rho: f64,
    pub eps: f64,
}

pub fn matrix_from_theta(theta: &[f64], q: usize, r: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(q, r, theta)
}

pub fn theta_from_matrix(m: &DMatrix<f64>) -> Vec<f64> {
    let (q, r) = m.shape();
    let mut out = Vec::with_capacity(q * r);
    for a in 0..q {
        for j in 0..r {
            out.push(m[(a, j)]);
        }
    }
    out
}

impl FactorQuad {
    pub fn zero(q: usize, r: usize) -> Self {
        FactorQuad {
            q,
            r,
            a: DMatrix::zeros(r, r),
            b: DMatrix::zeros(r, q),
            c: 0.0,
            anchor: vec![0.0; q * r],
            lipschitz: 0.0,
            rho: 0.0,
            eps: 0.0,
        }
    }

    /// (ρ/2)‖W − W₀‖²_F in factor form.
    pub fn proximal(w0: &[f64], q: usize, r: usize, rho: f64) -> Self {
        let w = matrix_from_theta(w0, q, r);
        FactorQuad {
            q,
            r,
            a: DMatrix::identity(r, r) * (0.5 * rho),
            b: w.transpose() * (0.5 * rho),
            c: 0.5 * rho * w.norm_squared(),
            anchor: w0.to_vec(),
            lipschitz: 0.0,
            rho,
            eps: 0.0,
        }
    }

    pub fn add_proximal(&mut self, center: &[f64], rho: f64) {
        let p = FactorQuad::proximal(center, self.q, self.r, rho);
        self.a += p.a;
        self.b += p.b;
        self.c += p.c;
        self.rho += rho;
    }
}

impl Surrogate for FactorQuad {
    fn dim(&self) -> usize {
        self.q * self.r
    }

    fn eval(&self, theta: &[f64]) -> f64 {
        let w = matrix_from_theta(theta, self.q, self.r);
        let waw = (&w * &self.a).component_mul(&w).sum();
        let wb = (&w * &self.b).trace();
        waw - 2.0 * wb + self.c
    }

    fn smooth_grad(&self, theta: &[f64]) -> Vec<f64> {
        let w = matrix_from_theta(theta, self.q, self.r);
        let g = (&w * &self.a) * 2.0 - self.b.transpose() * 2.0;
        theta_from_matrix(&g)
    }

    fn combine(&self, other: &Self, w: f64) -> Result<Self> {
        if (self.q, self.r) != (other.q, other.r) {
            return Err(Error::Dim("factor surrogates of different shapes".into()));
        }
        let v = 1.0 - w;
        Ok(FactorQuad {
            q: self.q,
            r: self.r,
            a: &self.a * v + &other.a * w,
            b: &self.b * v + &other.b * w,
            c: v * self.c + w * other.c,
            anchor: other.anchor.clone(),
            lipschitz: v * self.lipschitz + w * other.lipschitz,
            rho: v * self.rho + w * other.rho,
            eps: v * self.eps + w * other.eps,
        })
    }

    fn hessian_block(&self, _theta: &[f64], block: &[usize]) -> Result<DMatrix<f64>> {
        let r = self.r;
        let k = block.len();
        Ok(DMatrix::from_fn(k, k, |i, j| {
            let (ai, ji) = (block[i] / r, block[i] % r);
            let (aj, jj) = (block[j] / r, block[j] % r);
            if ai == aj {
                2.0 * self.a[(ji, jj)]
            } else {
                0.0
            }
        }))
    }

    fn rho(&self) -> f64 {
        self.rho
    }

    fn eps(&self) -> f64 {
        self.eps
    }
}

/// Code solve at `w_prev` and the resulting factor surrogate.
///
/// The contribution is A = HHᵀ, B = HXᵀ, C = tr(XXᵀ) + λ‖H‖₁, so the surrogate
/// at `w_prev` equals the achieved code objective; `eps` is the certified gap.
pub fn make_factor_surrogate(
    x: &DMatrix<f64>,
    w_prev: &DMatrix<f64>,
    lambda: f64,
    code_box: &BoxSet,
    tol: f64,
) -> Result<(DMatrix<f64>, FactorQuad)> {
    let sol = solve_code_lasso(x, w_prev, lambda, code_box, tol, None)?;
    Ok((sol.h.clone(), factor_contribution(x, &sol.h, lambda, w_prev, sol.gap)))
}

pub fn factor_contribution(x: &DMatrix<f64>, h: &DMatrix<f64>, lambda: f64, w_prev: &DMatrix<f64>, gap: f64) -> FactorQuad {
    let a = h * h.transpose();
    let lip = 2.0 * crate::subsolver::power_lambda_max(&a);
    FactorQuad {
        q: x.nrows(),
        r: h.nrows(),
        b: h * x.transpose(),
        a,
        c: x.norm_squared() + lambda * h.iter().map(|v| v.abs()).sum::<f64>(),
        anchor: theta_from_matrix(w_prev),
        lipschitz: lip,
        rho: 0.0,
        eps: gap,
    }
}

/// A surrogate together with the running ε̄.
#[derive(Clone, Debug)]
pub struct AveragedSurrogate<S> {
    pub g: S,
    pub eps_bar: f64,
}

impl<S: Surrogate> AveragedSurrogate<S> {
    pub fn initial(g0: S) -> Self {
        AveragedSurrogate { g: g0, eps_bar: 0.0 }
    }

    pub fn eval(&self, theta: &[f64]) -> f64 {
        self.g.eval(theta)
    }

    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        self.g.grad(theta)
    }
}

/// ḡₙ = (1 − wₙ)ḡₙ₋₁ + wₙgₙ, and ε̄ₙ = (1 − wₙ)ε̄ₙ₋₁ + wₙεₙ with εₙ = gₙ.eps().
pub fn average_surrogate<S: Surrogate>(prev: &AveragedSurrogate<S>, g_n: &S, w_n: f64) -> Result<AveragedSurrogate<S>> {
    if !(w_n > 0.0 && w_n <= 1.0) {
        return Err(Error::Arg(format!("weight {w_n} outside (0,1]")));
    }
    Ok(AveragedSurrogate {
        g: prev.g.combine(g_n, w_n)?,
        eps_bar: (1.0 - w_n) * prev.eps_bar + w_n * g_n.eps(),
    })
}

#[derive(Clone, Debug)]
pub struct MajorizationReport {
    /// max over samples of f(θ) − g(θ) − eps; ≤ 0 means pass.
    pub max_violation: f64,
    pub worst_index: usize,
}

impl MajorizationReport {
    pub fn passed(&self) -> bool {
        self.max_violation <= 0.0
    }
}

pub fn check_majorization<S, F>(g: &S, f: F, samples: &[Vec<f64>], eps: f64) -> MajorizationReport
where
    S: Surrogate,
    F: Fn(&[f64]) -> f64,
{
    let mut rep = MajorizationReport { max_violation: f64::NEG_INFINITY, worst_index: 0 };
    for (i, t) in samples.iter().enumerate() {
        let v = f(t) - g.eval(t) - eps;
        if v > rep.max_violation {
            rep = MajorizationReport { max_violation: v, worst_index: i };
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{cumulative_weights, WeightSchedule};
    use crate::subsolver::soft_threshold;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    #[test]
    fn lipschitz_examples() {
        let g = make_lipschitz_surrogate(1.0, &[2.0], &[0.0], 4.0).unwrap();
        for t in [-1.0, -0.5, 0.3, 2.0] {
            assert!((g.eval(&[t]) - (1.0 + 2.0 * t + 2.0 * t * t)).abs() < 1e-14);
        }
        // unconstrained minimizer θ* − grad/L
        assert!(g.smooth_grad(&[-0.5])[0].abs() < 1e-15);
        let g0 = make_lipschitz_surrogate(3.0, &[0.0, 0.0], &[0.2, 0.4], 2.0).unwrap();
        assert!((g0.eval(&[0.2, 0.4]) - 3.0).abs() < 1e-15);
        // f = θ², L = 2 at θ* = 1: g ≡ f
        let g = make_lipschitz_surrogate(1.0, &[2.0], &[1.0], 2.0).unwrap();
        for t in [-3.0, 0.0, 0.7] {
            assert!((g.eval(&[t]) - t * t).abs() < 1e-14);
        }
        assert!(make_lipschitz_surrogate(1.0, &[2.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn prox_examples() {
        let a = make_prox_surrogate(1.0, &[0.5], &Penalty::L1(0.0), &[0.1], 3.0).unwrap();
        let b = make_lipschitz_surrogate(1.0, &[0.5], &[0.1], 3.0).unwrap();
        assert_eq!(a, b);
        assert!(make_prox_surrogate(1.0, &[0.5], &Penalty::GroupL2(0.1), &[0.1], 3.0).is_err());
        // 1-D minimizer soft(θ* − g/L, λ/L), found by dense scan
        let (gv, l, lam, ts) = (0.8, 2.0, 0.6, 0.1);
        let g = make_prox_surrogate(0.0, &[gv], &Penalty::L1(lam), &[ts], l).unwrap();
        let want = soft_threshold(ts - gv / l, lam / l);
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=40000 {
            let t = -2.0 + 4.0 * k as f64 / 40000.0;
            let v = g.eval(&[t]);
            if v < best.0 {
                best = (v, t);
            }
        }
        assert!((best.1 - want).abs() <= 1e-4);
    }

    #[test]
    fn prox_majorizes_smooth_plus_penalty() {
        // f1(θ) = Σ log(1 + e^{θᵢ}) + 0.5 sin(θ₁): gradient Lipschitz ≤ 0.25 + 0.5
        let f1 = |t: &[f64]| t.iter().map(|x| (1.0 + x.exp()).ln()).sum::<f64>() + 0.5 * t[0].sin();
        let grad = |t: &[f64]| {
            let mut g: Vec<f64> = t.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
            g[0] += 0.5 * t[0].cos();
            g
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lam = 0.3;
        let ts = rand_vec(&mut rng, 3, -1.0, 1.0);
        let g = make_prox_surrogate(f1(&ts), &grad(&ts), &Penalty::L1(lam), &ts, 0.75).unwrap();
        let samples: Vec<Vec<f64>> = (0..1000).map(|_| rand_vec(&mut rng, 3, -3.0, 3.0)).collect();
        let f = |t: &[f64]| f1(t) + lam * t.iter().map(|x| x.abs()).sum::<f64>();
        assert!(check_majorization(&g, f, &samples, 1e-12).passed());
    }

    #[test]
    fn dc_examples() {
        // f = θ² − θ⁴ on [−0.5, 0.5] at θ* = 0
        let f1 = ConvexQuad { curvature: DMatrix::from_element(1, 1, 2.0), linear: vec![0.0], constant: 0.0 };
        let g = make_dc_surrogate(&f1, 0.0, &[0.0], &[0.0], None, 3.0).unwrap();
        let samples: Vec<Vec<f64>> = (0..1000).map(|k| vec![-0.5 + k as f64 / 999.0]).collect();
        for s in &samples {
            assert!((g.eval(s) - s[0] * s[0]).abs() < 1e-15);
        }
        let f = |t: &[f64]| t[0] * t[0] - t[0].powi(4);
        assert!(check_majorization(&g, f, &samples, 0.0).passed());
        assert_eq!(g.eval(&[0.0]), f(&[0.0]));
        // linear f2 is reproduced exactly
        let g = make_dc_surrogate(&f1, 0.5 - 0.3 * 0.2, &[-0.3], &[0.2], None, 0.0).unwrap();
        for t in [-1.0, 0.4, 2.0] {
            assert!((g.eval(&[t]) - (t * t + 0.5 - 0.3 * t)).abs() < 1e-14);
        }
        let bad = ConvexQuad { curvature: DMatrix::from_element(1, 1, -1.0), linear: vec![0.0], constant: 0.0 };
        assert!(make_dc_surrogate(&bad, 0.0, &[0.0], &[0.0], None, 0.0).is_err());
    }

    #[test]
    fn majorization_failure_detected() {
        let g = make_lipschitz_surrogate(0.0, &[0.0], &[0.0], 2.0).unwrap();
        let f = |t: &[f64]| g.eval(t) + 1.0;
        let samples = vec![vec![0.1], vec![0.5]];
        let rep = check_majorization(&g, f, &samples, 0.0);
        assert!((rep.max_violation - 1.0).abs() < 1e-12);
    }

    #[test]
    fn descent_lemma_on_errors() {
        // f(θ) = Σ cos(θᵢ): ∇f is 1-Lipschitz
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = |t: &[f64]| t.iter().map(|x| x.cos()).sum::<f64>();
        let gf = |t: &[f64]| t.iter().map(|x| -x.sin()).collect::<Vec<_>>();
        let ts = rand_vec(&mut rng, 4, -1.0, 1.0);
        let g = make_lipschitz_surrogate(f(&ts), &gf(&ts), &ts, 1.0).unwrap();
        let h = |t: &[f64]| g.eval(t) - f(t);
        let gh = |t: &[f64]| g.grad(t).iter().zip(gf(t)).map(|(a, b)| a - b).collect::<Vec<_>>();
        for _ in 0..1000 {
            let a = rand_vec(&mut rng, 4, -2.0, 2.0);
            let b = rand_vec(&mut rng, 4, -2.0, 2.0);
            let d: Vec<f64> = b.iter().zip(&a).map(|(x, y)| x - y).collect();
            let lhs = (h(&b) - h(&a) - dot(&gh(&a), &d)).abs();
            assert!(lhs <= 0.5 * g.lipschitz * dot(&d, &d) + 1e-6);
        }
    }

    #[test]
    fn factor_quad_identity_curvature() {
        let mut f = FactorQuad::zero(3, 2);
        f.a = DMatrix::identity(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rand_vec(&mut rng, 6, -1.0, 1.0);
        assert!((f.eval(&w) - dot(&w, &w)).abs() < 1e-14);
        let g = f.grad(&w);
        for i in 0..6 {
            assert!((g[i] - 2.0 * w[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = DMatrix::from_fn(3, 4, |_, _| rng.gen_range(0.0..1.0));
        let w0 = DMatrix::from_fn(3, 2, |_, _| rng.gen_range(0.0..1.0));
        let cb = BoxSet::uniform(8, 0.0, 5.0).unwrap();
        let (_, f) = make_factor_surrogate(&x, &w0, 0.1, &cb, 1e-12).unwrap();
        let m = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
        let q = QuadSurrogate {
            curvature: Curvature::Dense(m.transpose() * m),
            linear: rand_vec(&mut rng, 5, -1.0, 1.0),
            constant: 0.3,
            l1: 0.0,
            anchor: vec![0.0; 5],
            lipschitz: 0.0,
            rho: 0.0,
            eps: 0.0,
        };
        let check = |s: &dyn Fn(&[f64]) -> f64, g: Vec<f64>, t: &[f64]| {
            let fd: Vec<f64> = (0..t.len())
                .map(|i| {
                    let (mut a, mut b) = (t.to_vec(), t.to_vec());
                    a[i] += 1e-5;
                    b[i] -= 1e-5;
                    (s(&a) - s(&b)) / 2e-5
                })
                .collect();
            let num: f64 = fd.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let den: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            assert!(num / den <= 1e-5, "{num} / {den}");
        };
        for _ in 0..20 {
            let t = rand_vec(&mut rng, 6, -1.0, 1.0);
            check(&|z| f.eval(z), f.grad(&t), &t);
            let t = rand_vec(&mut rng, 5, -1.0, 1.0);
            check(&|z| q.eval(z), q.grad(&t), &t);
        }
    }

    #[test]
    fn factor_surrogate_examples() {
        // W = I, λ = 0: exact fit
        let x = DMatrix::from_row_slice(2, 3, &[0.2, 0.4, 0.1, 0.9, 0.3, 0.5]);
        let w = DMatrix::identity(2, 2);
        let cb = BoxSet::uniform(6, -10.0, 10.0).unwrap();
        let (h, g) = make_factor_surrogate(&x, &w, 0.0, &cb, 1e-14).unwrap();
        assert!((&h - &x).norm() < 1e-12);
        assert!(g.eval(&theta_from_matrix(&w)).abs() < 1e-12);
        // λ above the KKT threshold: H = 0, value ‖X‖²
        let thresh = (2.0 * w.transpose() * &x).amax();
        let (h, g) = make_factor_surrogate(&x, &w, thresh * 1.01, &cb, 1e-14).unwrap();
        assert_eq!(h.amax(), 0.0);
        assert!((g.eval(&theta_from_matrix(&w)) - x.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn factor_surrogate_majorizes_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = DMatrix::from_fn(3, 4, |_, _| rng.gen_range(0.0..1.0));
        let w0 = DMatrix::from_fn(3, 2, |_, _| rng.gen_range(0.0..1.0));
        let cb = BoxSet::uniform(8, 0.0, 3.0).unwrap();
        let lam = 0.2;
        let tol = 1e-10;
        let (_, g) = make_factor_surrogate(&x, &w0, lam, &cb, tol).unwrap();
        let loss = |t: &[f64]| {
            let w = matrix_from_theta(t, 3, 2);
            solve_code_lasso(&x, &w, lam, &cb, 1e-12, None).unwrap().objective
        };
        let samples: Vec<Vec<f64>> = (0..100).map(|_| rand_vec(&mut rng, 6, 0.0, 1.0)).collect();
        // the loss evaluator itself is accurate to 1e-12
        assert!(check_majorization(&g, loss, &samples, 1e-12).passed());
        let t0 = theta_from_matrix(&w0);
        assert!(g.eval(&t0) - loss(&t0) <= g.eps + 1e-12);
        assert!(g.eps <= tol);
    }

    #[test]
    fn averaging_is_affine_and_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = WeightSchedule::Balanced;
        let n = 40;
        let gs: Vec<QuadSurrogate> = (0..n)
            .map(|_| {
                let t = rand_vec(&mut rng, 3, -1.0, 1.0);
                let mut g = make_lipschitz_surrogate(rng.gen_range(0.0..1.0), &rand_vec(&mut rng, 3, -1.0, 1.0), &t, 2.0).unwrap();
                g.eps = rng.gen_range(0.0..1e-3);
                g
            })
            .collect();
        let mut avg = AveragedSurrogate::initial(QuadSurrogate::proximal(&[0.0; 3], 0.0));
        for (k, g) in gs.iter().enumerate() {
            let next = average_surrogate(&avg, g, s.weight_at(k + 1)).unwrap();
            let t = rand_vec(&mut rng, 3, -2.0, 2.0);
            let w = s.weight_at(k + 1);
            let want = (1.0 - w) * avg.eval(&t) + w * g.eval(&t);
            assert!((next.eval(&t) - want).abs() <= 1e-12 * want.abs().max(1.0));
            avg = next;
        }
        let cw = cumulative_weights(&s, n);
        for _ in 0..10 {
            let t = rand_vec(&mut rng, 3, -2.0, 2.0);
            let direct: f64 = gs.iter().zip(&cw).map(|(g, c)| c * g.eval(&t)).sum();
            let mean: f64 = gs.iter().map(|g| g.eval(&t)).sum::<f64>() / n as f64;
            assert!((avg.eval(&t) - direct).abs() <= 1e-10 * direct.abs());
            assert!((avg.eval(&t) - mean).abs() <= 1e-10 * mean.abs());
        }
        let eps_direct: f64 = gs.iter().zip(&cw).map(|(g, c)| c * g.eps).sum();
        assert!((avg.eps_bar - eps_direct).abs() <= 1e-15);
    }

    #[test]
    fn weight_one_erases_history() {
        let a = make_lipschitz_surrogate(1.0, &[0.3, 0.1], &[0.0, 0.5], 2.0).unwrap();
        let b = make_lipschitz_surrogate(-2.0, &[0.7, -0.4], &[1.0, 0.0], 5.0).unwrap();
        let avg = average_surrogate(&AveragedSurrogate::initial(a), &b, 1.0).unwrap();
        assert_eq!(avg.g.linear, b.linear);
        assert_eq!(avg.g.constant, b.constant);
        assert_eq!(avg.g.curvature, b.curvature);
        assert!(average_surrogate(&avg, &b, 0.0).is_err());
    }

    #[test]
    fn constant_eps_average() {
        let mut avg = AveragedSurrogate::initial(FactorQuad::zero(2, 2));
        let mut g = FactorQuad::zero(2, 2);
        g.eps = 0.37;
        for n in 1..=50 {
            avg = average_surrogate(&avg, &g, 1.0 / n as f64).unwrap();
            assert!((avg.eps_bar - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn factor_a_stays_psd_and_block_hessians() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cb = BoxSet::uniform(2 * 3, 0.0, 2.0).unwrap();
        let mut avg = AveragedSurrogate::initial(FactorQuad::zero(4, 2));
        for n in 1..=30 {
            let x = DMatrix::from_fn(4, 3, |_, _| rng.gen_range(0.0..1.0));
            let w = DMatrix::from_fn(4, 2, |_, _| rng.gen_range(0.0..1.0));
            let (_, g) = make_factor_surrogate(&x, &w, 0.05, &cb, 1e-10).unwrap();
            avg = average_surrogate(&avg, &g, 1.0 / n as f64).unwrap();
            assert!(symmetric_min_eig(&avg.g.a) >= -1e-8);
        }
        // block Hessian of a row block is 2A
        let hb = avg.g.hessian_block(&[0.0; 8], &[2, 3]).unwrap();
        assert!((hb - &avg.g.a * 2.0).norm() < 1e-15);
        // block problem reproduces the surrogate up to a constant
        let theta = rand_vec(&mut rng, 8, 0.0, 1.0);
        let block = [1usize, 4, 5];
        let bp = avg.g.block_problem(&theta, &block).unwrap();
        let z0: Vec<f64> = block.iter().map(|&i| theta[i]).collect();
        let off = avg.eval(&theta) - bp.objective(&z0);
        for _ in 0..10 {
            let z = rand_vec(&mut rng, 3, 0.0, 1.0);
            let mut t = theta.clone();
            for (k, &i) in block.iter().enumerate() {
                t[i] = z[k];
            }
            assert!((avg.eval(&t) - bp.objective(&z) - off).abs() < 1e-12);
        }
    }
}
