//! Block quadratic programs over box ∩ ball, and box-constrained lasso code solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_check, Error, Result};
use crate::geometry::{BoxSet, RestrictedBlockSet, BOUNDARY_TOL};
use crate::par;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 100_000;
const POWER_ITERS: usize = 50;

pub fn soft_threshold(v: f64, kappa: f64) -> f64 {
    if v > kappa {
        v - kappa
    } else if v < -kappa {
        v + kappa
    } else {
        0.0
    }
}

/// q(z) = ½ zᵀHz + ⟨c, z⟩ + l1‖z‖₁ on the coordinates of one block.
#[derive(Clone, Debug)]
pub struct BlockProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub l1: f64,
}

impl BlockProblem {
    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let zv = DVector::from_column_slice(z);
        let hz = &self.hessian * &zv;
        0.5 * zv.dot(&hz) + self.linear.dot(&zv) + self.l1 * z.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Gradient of the smooth part.
    pub fn smooth_grad(&self, z: &[f64]) -> Vec<f64> {
        let zv = DVector::from_column_slice(z);
        (&self.hessian * zv + &self.linear).as_slice().to_vec()
    }

    /// Largest eigenvalue of the Hessian by power iteration.
    pub fn curvature_bound(&self) -> f64 {
        power_lambda_max(&self.hessian)
    }
}

/// Rayleigh-quotient estimate of λ_max for a symmetric PSD matrix.
pub fn power_lambda_max(h: &DMatrix<f64>) -> f64 {
    let n = h.nrows();
    if n == 0 {
        return 0.0;
    }
    if n == 1 {
        return h[(0, 0)].max(0.0);
    }
    // deterministic start with no symmetry that could hide the top eigenvector
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i * 7919) % 13) as f64);
    v /= v.norm();
    let mut lam = 0.0;
    for _ in 0..POWER_ITERS {
        let hv = h * &v;
        let nrm = hv.norm();
        if nrm == 0.0 {
            return 0.0;
        }
        lam = v.dot(&hv);
        v = hv / nrm;
    }
    lam.max((h * &v).dot(&v)).max(0.0)
}

#[derive(Clone, Debug)]
pub struct BlockSolution {
    pub z: Vec<f64>,
    pub objective: f64,
    pub iters: usize,
    pub residual: f64,
}

/// Monotone accelerated proximal gradient with adaptive restart.
///
/// Stops when the prox-gradient residual L‖z − prox(z − ∇/L)‖ is at most `tol`.
/// Without a ball and without an ℓ₁ term it additionally waits until the
/// tangent-cone measure of the block box is at most `tol`. The returned point is
/// feasible and its objective is never above that of `z0`.
pub fn solve_block_qp(
    prob: &BlockProblem,
    feas: &RestrictedBlockSet,
    z0: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<BlockSolution> {
    let n = prob.dim();
    dim_check("block problem start", z0.len(), n)?;
    dim_check("block problem box", feas.sub_box.dim(), n)?;
    let lmax = prob.curvature_bound();
    let mut lip = if lmax > 0.0 { 1.05 * lmax } else { 1.0 };
    let check_cone = feas.radius.is_none() && prob.l1 == 0.0;
    let prox_at = |y: &[f64], g: &[f64], lip: f64| -> Vec<f64> {
        let v: Vec<f64> = y.iter().zip(g).map(|(a, b)| a - b / lip).collect();
        feas.project(&v, prob.l1 / lip)
    };
    let residual_at = |x: &[f64], gx: &[f64], lip: f64| -> f64 {
        let p = prox_at(x, gx, lip);
        let pg = lip * p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if check_cone {
            pg.max(cone_measure(gx, x, &feas.sub_box))
        } else {
            pg
        }
    };

    let f_start = prob.objective(z0);
    let slack = 1e-13 * f_start.abs().max(1.0);
    let mut x = z0.to_vec();
    let mut fx = f_start;
    let mut gx = prob.smooth_grad(&x);
    let mut res = residual_at(&x, &gx, lip);
    let mut y = x.clone();
    let mut y_is_x = true;
    let mut t = 1.0f64;
    let mut it = 0;
    while res > tol {
        it += 1;
        if it > max_iters {
            return Err(Error::NoConvergence { what: "block quadratic solve", iters: max_iters });
        }
        let gy = if y_is_x { gx.clone() } else { prob.smooth_grad(&y) };
        let z = prox_at(&y, &gy, lip);
        let fz = prob.objective(&z);
        if fz <= fx {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let x_prev = std::mem::replace(&mut x, z);
            fx = fz;
            gx = prob.smooth_grad(&x);
            for i in 0..n {
                y[i] = x[i] + ((t - 1.0) / t_next) * (x[i] - x_prev[i]);
            }
            t = t_next;
            y_is_x = false;
        } else if !y_is_x {
            // momentum overshoot: restart from the best point
            y.clone_from(&x);
            y_is_x = true;
            t = 1.0;
        } else if fz <= fx + slack {
            // a plain step that only loses to rounding
            x = z;
            fx = fz;
            gx = prob.smooth_grad(&x);
            y.clone_from(&x);
        } else {
            // curvature estimate too low for a descent step
            lip *= 2.0;
        }
        res = residual_at(&x, &gx, lip);
    }
    if fx > f_start {
        x = z0.to_vec();
        fx = f_start;
        res = residual_at(&x, &prob.smooth_grad(&x), lip);
    }
    Ok(BlockSolution { z: x, objective: fx, iters: it, residual: res })
}

fn cone_measure(g: &[f64], x: &[f64], b: &BoxSet) -> f64 {
    let mut s = 0.0;
    for i in 0..g.len() {
        let d = -g[i];
        let at_lower = x[i] <= b.lower[i] + BOUNDARY_TOL;
        let at_upper = x[i] >= b.upper[i] - BOUNDARY_TOL;
        if !((at_lower && d < 0.0) || (at_upper && d > 0.0)) {
            s += d * d;
        }
    }
    s.sqrt()
}

#[derive(Clone, Debug)]
pub struct CodeSolution {
    /// r×d code matrix.
    pub h: DMatrix<f64>,
    /// ‖X − WH‖² + λ‖H‖₁ at `h`.
    pub objective: f64,
    /// Certified duality gap (sum over columns), ≥ 0.
    pub gap: f64,
    pub sweeps: usize,
}

/// min over the code box of ‖X − WH‖²_F + λ‖H‖₁, column by column, by cyclic
/// coordinate descent. `code_box` indexes H row-major (entry (j,s) at j·d + s).
/// Sweeps stop once the certified duality gap is at most `tol`.
pub fn solve_code_lasso(
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    lambda: f64,
    code_box: &BoxSet,
    tol: f64,
    warm: Option<&DMatrix<f64>>,
) -> Result<CodeSolution> {
    solve_code_lasso_capped(x, w, lambda, code_box, tol, warm, DEFAULT_MAX_ITERS)
}

pub fn solve_code_lasso_capped(
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    lambda: f64,
    code_box: &BoxSet,
    tol: f64,
    warm: Option<&DMatrix<f64>>,
    max_sweeps: usize,
) -> Result<CodeSolution> {
    let (q, d) = x.shape();
    let r = w.ncols();
    dim_check("code solve: rows of W", w.nrows(), q)?;
    dim_check("code solve: code box", code_box.dim(), r * d)?;
    if lambda < 0.0 {
        return Err(Error::Arg(format!("lambda {lambda} must be >= 0")));
    }
    if let Some(h0) = warm {
        if h0.shape() != (r, d) {
            return Err(Error::Dim(format!("warm start shape {:?}, expected ({r}, {d})", h0.shape())));
        }
    }
    let gram = w.transpose() * w;
    let wtx = w.transpose() * x;
    // per-column tolerance so the summed gap stays below tol
    let col_tol = tol / d.max(1) as f64;
    let solve_col = |s: usize| -> Result<(Vec<f64>, f64, f64, usize)> {
        let lo: Vec<f64> = (0..r).map(|j| code_box.lower[j * d + s]).collect();
        let hi: Vec<f64> = (0..r).map(|j| code_box.upper[j * d + s]).collect();
        let mut h: Vec<f64> = match warm {
            Some(h0) => (0..r).map(|j| h0[(j, s)].clamp(lo[j], hi[j])).collect(),
            None => (0..r).map(|j| 0f64.clamp(lo[j], hi[j])).collect(),
        };
        let xs = x.column(s);
        let b: Vec<f64> = (0..r).map(|j| wtx[(j, s)]).collect();
        let mut prev_obj = f64::INFINITY;
        for sweep in 0..=max_sweeps {
            let (obj, gap) = column_gap(&xs.clone_owned(), w, &h, lambda, &lo, &hi);
            debug_assert!(obj <= prev_obj + 1e-10 * prev_obj.abs().max(1.0), "code descent increased");
            prev_obj = obj;
            if gap <= col_tol {
                return Ok((h, obj, gap, sweep));
            }
            if sweep == max_sweeps {
                break;
            }
            for j in 0..r {
                let gjj = gram[(j, j)];
                let mut rho = b[j];
                for k in 0..r {
                    if k != j {
                        rho -= gram[(j, k)] * h[k];
                    }
                }
                h[j] = if gjj > 0.0 {
                    (soft_threshold(rho, 0.5 * lambda) / gjj).clamp(lo[j], hi[j])
                } else if lambda > 0.0 {
                    0f64.clamp(lo[j], hi[j])
                } else {
                    h[j]
                };
            }
        }
        Err(Error::NoConvergence { what: "code lasso", iters: max_sweeps })
    };
    let cols: Vec<Result<(Vec<f64>, f64, f64, usize)>> = if q * r * d >= 4096 {
        par::map(d, solve_col)
    } else {
        par::map_seq(d, solve_col)
    };
    let mut h = DMatrix::zeros(r, d);
    let (mut objective, mut gap, mut sweeps) = (0.0, 0.0, 0);
    for (s, c) in cols.into_iter().enumerate() {
        let (hs, o, g, sw) = c?;
        for j in 0..r {
            h[(j, s)] = hs[j];
        }
        objective += o;
        gap += g;
        sweeps = sweeps.max(sw);
    }
    Ok(CodeSolution { h, objective, gap, sweeps })
}

/// Primal value and certified gap for one column.
///
/// With residual ρ = x − Wh the dual bound is 2⟨ρ,x⟩ − ‖ρ‖² − ψ*(2Wᵀρ), where
/// ψ*(s) = Σⱼ max over [loⱼ, hiⱼ] of (sⱼt − λ|t|).
fn column_gap(x: &DVector<f64>, w: &DMatrix<f64>, h: &[f64], lambda: f64, lo: &[f64], hi: &[f64]) -> (f64, f64) {
    let hv = DVector::from_column_slice(h);
    let resid = x - w * &hv;
    let l1: f64 = h.iter().map(|v| v.abs()).sum();
    let primal = resid.norm_squared() + lambda * l1;
    let s = 2.0 * w.transpose() * &resid;
    let mut conj = 0.0;
    for j in 0..h.len() {
        let f = |t: f64| s[j] * t - lambda * t.abs();
        let mut m = f(lo[j]).max(f(hi[j]));
        if lo[j] <= 0.0 && hi[j] >= 0.0 {
            m = m.max(0.0);
        }
        conj += m;
    }
    let dual = 2.0 * resid.dot(x) - resid.norm_squared() - conj;
    (primal, (primal - dual).max(0.0))
}

/// ‖X − WH‖²_F + λ‖H‖₁.
pub fn code_objective(x: &DMatrix<f64>, w: &DMatrix<f64>, h: &DMatrix<f64>, lambda: f64) -> f64 {
    (x - w * h).norm_squared() + lambda * h.iter().map(|v| v.abs()).sum::<f64>()
}
