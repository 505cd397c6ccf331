//! Online matrix factorization, its row-subsampled variant and online
//! CP-dictionary learning, with the tensor primitives they need.
//!
//! Tensors are dense and row-major (last index fastest). A minibatch of b
//! tensors of shape (I₁,…,I_m) is passed around as a P×b matrix, P = ∏Iₖ, whose
//! rows follow the same lexicographic order.

use nalgebra::DMatrix;
use rand::Rng;

use crate::engine::{minimize_blocks, BuiltSurrogate, LossEval, Problem};
use crate::error::{dim_check, Error, Result};
use crate::geometry::BoxSet;
pub use crate::geometry::RowSampler;
use crate::quadform::{factor_contribution, matrix_from_theta, theta_from_matrix, FactorQuad, Surrogate};
use crate::subsolver::{solve_code_lasso, BlockProblem, CodeSolution, DEFAULT_MAX_ITERS};

/// Default tolerance for code solves used in loss evaluation.
pub const EVAL_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn multi_index(mut k: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for a in (0..shape.len()).rev() {
        idx[a] = k % shape[a];
        k /= shape[a];
    }
    idx
}

fn flat_index(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (i, s)| acc * s + i)
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        dim_check("tensor data", data.len(), len)?;
        if shape.is_empty() {
            return Err(Error::Dim("tensor needs at least one axis".into()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor { shape, data: vec![0.0; len] }
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[flat_index(idx, &self.shape)]
    }

    /// Leading axes flattened into rows, last axis as columns.
    pub fn as_matrix(&self) -> DMatrix<f64> {
        let cols = *self.shape.last().unwrap();
        let rows = self.data.len() / cols.max(1);
        DMatrix::from_row_slice(rows, cols, &self.data)
    }

    /// Inverse of [`Tensor::as_matrix`].
    pub fn from_matrix(lead: &[usize], m: &DMatrix<f64>) -> Result<Self> {
        dim_check("matrix rows", m.nrows(), lead.iter().product())?;
        let mut shape = lead.to_vec();
        shape.push(m.ncols());
        Tensor::new(shape, theta_from_matrix(m))
    }
}

/// Mode-`mode` matricization (0-based). Columns run lexicographically over the
/// remaining axes in their original order.
pub fn unfold(t: &Tensor, mode: usize) -> Result<DMatrix<f64>> {
    if mode >= t.shape.len() {
        return Err(Error::Arg(format!("mode {mode} out of range for a {}-way tensor", t.shape.len())));
    }
    let rest: Vec<usize> = t.shape.iter().enumerate().filter(|(a, _)| *a != mode).map(|(_, s)| *s).collect();
    let ncols: usize = rest.iter().product();
    let mut out = DMatrix::zeros(t.shape[mode], ncols);
    for (k, v) in t.data.iter().enumerate() {
        let idx = multi_index(k, &t.shape);
        let others: Vec<usize> = idx.iter().enumerate().filter(|(a, _)| *a != mode).map(|(_, i)| *i).collect();
        out[(idx[mode], flat_index(&others, &rest))] = *v;
    }
    Ok(out)
}

pub fn fold(m: &DMatrix<f64>, mode: usize, shape: &[usize]) -> Result<Tensor> {
    if mode >= shape.len() {
        return Err(Error::Arg(format!("mode {mode} out of range for a {}-way tensor", shape.len())));
    }
    let rest: Vec<usize> = shape.iter().enumerate().filter(|(a, _)| *a != mode).map(|(_, s)| *s).collect();
    dim_check("unfolded rows", m.nrows(), shape[mode])?;
    dim_check("unfolded columns", m.ncols(), rest.iter().product())?;
    let mut t = Tensor::zeros(shape.to_vec());
    for k in 0..t.data.len() {
        let idx = multi_index(k, shape);
        let others: Vec<usize> = idx.iter().enumerate().filter(|(a, _)| *a != mode).map(|(_, i)| *i).collect();
        t.data[k] = m[(idx[mode], flat_index(&others, &rest))];
    }
    Ok(t)
}

/// Loading matrices U⁽¹⁾,…,U⁽ᵐ⁾, each Iₖ×r.
#[derive(Clone, Debug, PartialEq)]
pub struct CpDictionary {
    pub factors: Vec<DMatrix<f64>>,
}

impl CpDictionary {
    pub fn new(factors: Vec<DMatrix<f64>>) -> Result<Self> {
        let r = factors.first().ok_or_else(|| Error::Dim("need at least one loading matrix".into()))?.ncols();
        if factors.iter().any(|u| u.ncols() != r) {
            return Err(Error::Dim("loading matrices have different column counts".into()));
        }
        Ok(CpDictionary { factors })
    }

    pub fn rank(&self) -> usize {
        self.factors[0].ncols()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|u| u.nrows()).collect()
    }

    pub fn theta(&self) -> Vec<f64> {
        self.factors.iter().flat_map(theta_from_matrix).collect()
    }

    pub fn from_theta(theta: &[f64], dims: &[usize], r: usize) -> Result<Self> {
        dim_check("dictionary parameter", theta.len(), dims.iter().sum::<usize>() * r)?;
        let mut start = 0;
        let factors = dims
            .iter()
            .map(|&i| {
                let u = matrix_from_theta(&theta[start..start + i * r], i, r);
                start += i * r;
                u
            })
            .collect();
        Ok(CpDictionary { factors })
    }

    /// Out(U) flattened to P×r.
    pub fn matrix(&self) -> DMatrix<f64> {
        dictionary_matrix(&self.factors)
    }
}

fn dictionary_matrix(us: &[DMatrix<f64>]) -> DMatrix<f64> {
    let dims: Vec<usize> = us.iter().map(|u| u.nrows()).collect();
    let p: usize = dims.iter().product();
    let r = us[0].ncols();
    let mut d = DMatrix::zeros(p, r);
    for row in 0..p {
        let idx = multi_index(row, &dims);
        for j in 0..r {
            let mut v = 1.0;
            for (k, u) in us.iter().enumerate() {
                v *= u[(idx[k], j)];
            }
            d[(row, j)] = v;
        }
    }
    d
}

/// Out(U): slice j of the last axis is U⁽¹⁾(:,j) ⊗ … ⊗ U⁽ᵐ⁾(:,j).
pub fn out_product(u: &CpDictionary) -> Result<Tensor> {
    let u = CpDictionary::new(u.factors.clone())?;
    Tensor::from_matrix(&u.dims(), &u.matrix())
}

/// Product of a dictionary tensor (…, r) with an r×b matrix along the last axis.
pub fn mode_product(d: &Tensor, h: &DMatrix<f64>) -> Result<Tensor> {
    dim_check("mode product inner dimension", h.nrows(), *d.shape.last().unwrap())?;
    let lead = &d.shape[..d.shape.len() - 1];
    Tensor::from_matrix(lead, &(d.as_matrix() * h))
}

fn danskin_grad(x: &DMatrix<f64>, d: &DMatrix<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
    -(x - d * h) * h.transpose() * 2.0
}

/// ℓ(X, W) = min over the code box of ‖X − WH‖² + λ‖H‖₁, with W a q×r dictionary.
#[derive(Clone, Debug)]
pub struct OmfProblem {
    pub q: usize,
    pub r: usize,
    pub d: usize,
    pub lambda: f64,
    pub dict_box: BoxSet,
    pub code_box: BoxSet,
    pub eval_tol: f64,
}

impl OmfProblem {
    pub fn new(q: usize, r: usize, d: usize, lambda: f64, dict_box: BoxSet, code_box: BoxSet) -> Result<Self> {
        dim_check("dictionary box", dict_box.dim(), q * r)?;
        dim_check("code box", code_box.dim(), r * d)?;
        if !(lambda >= 0.0) {
            return Err(Error::Arg("lambda must be >= 0".into()));
        }
        Ok(OmfProblem { q, r, d, lambda, dict_box, code_box, eval_tol: EVAL_TOL })
    }

    pub fn code(&self, x: &DMatrix<f64>, theta: &[f64], tol: f64) -> Result<CodeSolution> {
        if x.shape() != (self.q, self.d) {
            return Err(Error::Dim(format!("sample shape {:?}, expected ({}, {})", x.shape(), self.q, self.d)));
        }
        solve_code_lasso(x, &matrix_from_theta(theta, self.q, self.r), self.lambda, &self.code_box, tol, None)
    }
}

impl Problem for OmfProblem {
    type Sample = DMatrix<f64>;
    type Surr = FactorQuad;

    fn dim(&self) -> usize {
        self.q * self.r
    }

    fn param_box(&self) -> &BoxSet {
        &self.dict_box
    }

    fn loss(&self, x: &DMatrix<f64>, theta: &[f64]) -> Result<LossEval> {
        let sol = self.code(x, theta, self.eval_tol)?;
        let w = matrix_from_theta(theta, self.q, self.r);
        Ok(LossEval { value: sol.objective, grad: theta_from_matrix(&danskin_grad(x, &w, &sol.h)) })
    }

    fn loss_value(&self, x: &DMatrix<f64>, theta: &[f64]) -> Result<f64> {
        Ok(self.code(x, theta, self.eval_tol)?.objective)
    }

    fn build_surrogate(&self, x: &DMatrix<f64>, anchor: &[f64], eps_cap: f64, tol: f64) -> Result<BuiltSurrogate<FactorQuad>> {
        let sol = self.code(x, anchor, tol.min(eps_cap))?;
        if sol.gap > eps_cap {
            return Err(Error::Contract(format!("code gap {} above the eps cap {eps_cap}", sol.gap)));
        }
        let w = matrix_from_theta(anchor, self.q, self.r);
        Ok(BuiltSurrogate { g: factor_contribution(x, &sol.h, self.lambda, &w, sol.gap), loss_at_anchor: sol.objective })
    }

    fn initial_surrogate(&self, theta0: &[f64], rho: f64) -> FactorQuad {
        FactorQuad::proximal(theta0, self.q, self.r, rho)
    }

    fn add_proximal(&self, g: &mut FactorQuad, center: &[f64], rho: f64) {
        g.add_proximal(center, rho);
    }
}

#[derive(Clone, Debug)]
pub struct OmfStep {
    pub h: DMatrix<f64>,
    pub surrogate: FactorQuad,
    pub w: DMatrix<f64>,
    pub eps: f64,
}

fn check_weight(w_n: f64) -> Result<()> {
    if !(w_n > 0.0 && w_n <= 1.0) {
        return Err(Error::Arg(format!("weight {w_n} outside (0,1]")));
    }
    Ok(())
}

fn omf_update(
    x: &DMatrix<f64>,
    w_prev: &DMatrix<f64>,
    prev: &FactorQuad,
    w_n: f64,
    lambda: f64,
    code_box: &BoxSet,
    dict_box: &BoxSet,
    radius: Option<f64>,
    tol: f64,
    block: Vec<usize>,
) -> Result<OmfStep> {
    check_weight(w_n)?;
    let sol = solve_code_lasso(x, w_prev, lambda, code_box, tol, None)?;
    let g = factor_contribution(x, &sol.h, lambda, w_prev, sol.gap);
    let avg = prev.combine(&g, w_n)?;
    let (theta, _, _) = minimize_blocks(
        &avg,
        &theta_from_matrix(w_prev),
        dict_box,
        &[block],
        radius.unwrap_or(f64::INFINITY),
        tol,
        DEFAULT_MAX_ITERS,
    )?;
    Ok(OmfStep { h: sol.h, surrogate: avg, w: matrix_from_theta(&theta, w_prev.nrows(), w_prev.ncols()), eps: sol.gap })
}

/// One OMF step: code solve at W_prev, Aₙ = (1−wₙ)A + wₙHHᵀ, Bₙ = (1−wₙ)B + wₙHXᵀ,
/// Cₙ likewise, then W minimized over the dictionary box (inside `radius` if given).
pub fn omf_step(
    x: &DMatrix<f64>,
    w_prev: &DMatrix<f64>,
    prev: &FactorQuad,
    w_n: f64,
    lambda: f64,
    code_box: &BoxSet,
    dict_box: &BoxSet,
    radius: Option<f64>,
    tol: f64,
) -> Result<OmfStep> {
    let p = w_prev.nrows() * w_prev.ncols();
    omf_update(x, w_prev, prev, w_n, lambda, code_box, dict_box, radius, tol, (0..p).collect())
}

/// [`omf_step`] with only the sampled rows of W updated. Returns the rows used.
pub fn subsampled_omf_step<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    w_prev: &DMatrix<f64>,
    prev: &FactorQuad,
    w_n: f64,
    lambda: f64,
    code_box: &BoxSet,
    dict_box: &BoxSet,
    radius: Option<f64>,
    tol: f64,
    sampler: &RowSampler,
    rng: &mut R,
) -> Result<(OmfStep, Vec<usize>)> {
    let r = w_prev.ncols();
    let rows = sampler.sample(w_prev.nrows(), rng)?;
    let block: Vec<usize> = rows.iter().flat_map(|&a| a * r..a * r + r).collect();
    Ok((omf_update(x, w_prev, prev, w_n, lambda, code_box, dict_box, radius, tol, block)?, rows))
}

/// tr(DĀDᵀ) − 2tr(DB̄) + C̄ + (ρ/2)‖θ‖² − ⟨ℓ,θ⟩ + c₀ with D = Out(U) flattened to P×r
/// and θ the concatenated loading matrices. Quadratic in each U⁽ⁱ⁾ separately.
#[derive(Clone, Debug, PartialEq)]
pub struct CpQuad {
    pub dims: Vec<usize>,
    pub r: usize,
    /// r×r.
    pub a: DMatrix<f64>,
    /// r×P.
    pub b: DMatrix<f64>,
    pub c: f64,
    pub prox_rho: f64,
    pub prox_lin: Vec<f64>,
    pub prox_c: f64,
    pub eps: f64,
}

impl CpQuad {
    pub fn zero(dims: &[usize], r: usize) -> Self {
        let p: usize = dims.iter().product();
        CpQuad {
            dims: dims.to_vec(),
            r,
            a: DMatrix::zeros(r, r),
            b: DMatrix::zeros(r, p),
            c: 0.0,
            prox_rho: 0.0,
            prox_lin: vec![0.0; dims.iter().sum::<usize>() * r],
            prox_c: 0.0,
            eps: 0.0,
        }
    }

    pub fn from_contribution(dims: &[usize], f: &FactorQuad) -> Self {
        let mut g = CpQuad::zero(dims, f.r);
        g.a = f.a.clone();
        g.b = f.b.clone();
        g.c = f.c;
        g.eps = f.eps;
        g
    }

    pub fn add_proximal(&mut self, center: &[f64], rho: f64) {
        self.prox_rho += rho;
        for (l, c) in self.prox_lin.iter_mut().zip(center) {
            *l += rho * c;
        }
        self.prox_c += 0.5 * rho * center.iter().map(|c| c * c).sum::<f64>();
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = vec![0];
        for &i in &self.dims {
            off.push(off.last().unwrap() + i * self.r);
        }
        off
    }

    fn factor_of(&self, block: &[usize]) -> Result<(usize, Vec<usize>)> {
        let off = self.offsets();
        let first = *block.first().ok_or_else(|| Error::Arg("empty block".into()))?;
        let i = (0..self.dims.len()).find(|&i| first >= off[i] && first < off[i + 1]).ok_or_else(|| Error::Arg(format!("index {first} out of range")))?;
        if block.iter().any(|&k| k < off[i] || k >= off[i + 1]) {
            return Err(Error::Arg("a CP block must stay within one loading matrix".into()));
        }
        Ok((i, block.iter().map(|k| k - off[i]).collect()))
    }

    /// The surrogate as a function of U⁽ⁱ⁾ alone, other factors fixed at `theta`:
    /// A = Ā ∘ (∘_{k≠i} U⁽ᵏ⁾ᵀU⁽ᵏ⁾), B gathers B̄ against the other factors' rows.
    pub fn factor_quad(&self, theta: &[f64], i: usize) -> FactorQuad {
        let u = CpDictionary::from_theta(theta, &self.dims, self.r).expect("parameter length");
        let off = self.offsets();
        let r = self.r;
        let mut a = self.a.clone();
        for (k, uk) in u.factors.iter().enumerate() {
            if k != i {
                a.component_mul_assign(&(uk.transpose() * uk));
            }
        }
        let mut b = DMatrix::zeros(r, self.dims[i]);
        let p: usize = self.dims.iter().product();
        for row in 0..p {
            let idx = multi_index(row, &self.dims);
            for j in 0..r {
                let mut coef = 1.0;
                for (k, uk) in u.factors.iter().enumerate() {
                    if k != i {
                        coef *= uk[(idx[k], j)];
                    }
                }
                b[(j, idx[i])] += coef * self.b[(j, row)];
            }
        }
        let mut c = self.c + self.prox_c;
        if self.prox_rho != 0.0 {
            a += DMatrix::identity(r, r) * (0.5 * self.prox_rho);
            let lin_i = matrix_from_theta(&self.prox_lin[off[i]..off[i + 1]], self.dims[i], r);
            b += lin_i.transpose() * 0.5;
            for k in (0..self.dims.len()).filter(|&k| k != i) {
                let seg = &theta[off[k]..off[k + 1]];
                let lin = &self.prox_lin[off[k]..off[k + 1]];
                c += seg.iter().zip(lin).map(|(t, l)| 0.5 * self.prox_rho * t * t - l * t).sum::<f64>();
            }
        }
        FactorQuad {
            q: self.dims[i],
            r,
            a,
            b,
            c,
            anchor: theta[off[i]..off[i + 1]].to_vec(),
            lipschitz: 0.0,
            rho: self.prox_rho,
            eps: self.eps,
        }
    }
}

impl Surrogate for CpQuad {
    fn dim(&self) -> usize {
        self.prox_lin.len()
    }

    fn eval(&self, theta: &[f64]) -> f64 {
        let u = CpDictionary::from_theta(theta, &self.dims, self.r).expect("parameter length");
        let d = u.matrix();
        let quad = (&d * &self.a).component_mul(&d).sum();
        let mut lin = 0.0;
        for row in 0..d.nrows() {
            for j in 0..self.r {
                lin += d[(row, j)] * self.b[(j, row)];
            }
        }
        let prox: f64 = theta.iter().zip(&self.prox_lin).map(|(t, l)| 0.5 * self.prox_rho * t * t - l * t).sum();
        quad - 2.0 * lin + self.c + prox + self.prox_c
    }

    fn smooth_grad(&self, theta: &[f64]) -> Vec<f64> {
        let off = self.offsets();
        (0..self.dims.len()).flat_map(|i| self.factor_quad(theta, i).smooth_grad(&theta[off[i]..off[i + 1]])).collect()
    }

    fn combine(&self, other: &Self, w: f64) -> Result<Self> {
        if self.dims != other.dims || self.r != other.r {
            return Err(Error::Dim("CP surrogates of different shapes".into()));
        }
        let v = 1.0 - w;
        Ok(CpQuad {
            dims: self.dims.clone(),
            r: self.r,
            a: &self.a * v + &other.a * w,
            b: &self.b * v + &other.b * w,
            c: v * self.c + w * other.c,
            prox_rho: v * self.prox_rho + w * other.prox_rho,
            prox_lin: self.prox_lin.iter().zip(&other.prox_lin).map(|(a, b)| v * a + w * b).collect(),
            prox_c: v * self.prox_c + w * other.prox_c,
            eps: v * self.eps + w * other.eps,
        })
    }

    fn hessian_block(&self, theta: &[f64], block: &[usize]) -> Result<DMatrix<f64>> {
        let (i, local) = self.factor_of(block)?;
        let off = self.offsets();
        self.factor_quad(theta, i).hessian_block(&theta[off[i]..off[i + 1]], &local)
    }

    fn block_problem(&self, theta: &[f64], block: &[usize]) -> Result<BlockProblem> {
        let (i, local) = self.factor_of(block)?;
        let off = self.offsets();
        self.factor_quad(theta, i).block_problem(&theta[off[i]..off[i + 1]], &local)
    }

    fn rho(&self) -> f64 {
        self.prox_rho
    }

    fn eps(&self) -> f64 {
        self.eps
    }
}

/// ℓ(X, U) = min over the code box of ‖X − Out(U)×H‖² + λ‖H‖₁ for a P×b minibatch X.
#[derive(Clone, Debug)]
pub struct CpdlProblem {
    pub dims: Vec<usize>,
    pub r: usize,
    pub batch: usize,
    pub lambda: f64,
    pub factor_box: BoxSet,
    pub code_box: BoxSet,
    pub eval_tol: f64,
}

impl CpdlProblem {
    pub fn new(dims: Vec<usize>, r: usize, batch: usize, lambda: f64, factor_box: BoxSet, code_box: BoxSet) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) || r == 0 || batch == 0 {
            return Err(Error::Dim("tensor dimensions, rank and batch must be positive".into()));
        }
        dim_check("factor box", factor_box.dim(), dims.iter().sum::<usize>() * r)?;
        dim_check("code box", code_box.dim(), r * batch)?;
        if !(lambda >= 0.0) {
            return Err(Error::Arg("lambda must be >= 0".into()));
        }
        Ok(CpdlProblem { dims, r, batch, lambda, factor_box, code_box, eval_tol: EVAL_TOL })
    }

    /// Lengths of the per-factor parameter segments, for `BlockSpec::segments`.
    pub fn segment_lengths(&self) -> Vec<usize> {
        self.dims.iter().map(|i| i * self.r).collect()
    }

    pub fn code(&self, x: &DMatrix<f64>, theta: &[f64], tol: f64) -> Result<(DMatrix<f64>, CodeSolution)> {
        let p: usize = self.dims.iter().product();
        if x.shape() != (p, self.batch) {
            return Err(Error::Dim(format!("sample shape {:?}, expected ({p}, {})", x.shape(), self.batch)));
        }
        let d = CpDictionary::from_theta(theta, &self.dims, self.r)?.matrix();
        let sol = solve_code_lasso(x, &d, self.lambda, &self.code_box, tol, None)?;
        Ok((d, sol))
    }
}

impl Problem for CpdlProblem {
    type Sample = DMatrix<f64>;
    type Surr = CpQuad;

    fn dim(&self) -> usize {
        self.factor_box.dim()
    }

    fn param_box(&self) -> &BoxSet {
        &self.factor_box
    }

    fn loss(&self, x: &DMatrix<f64>, theta: &[f64]) -> Result<LossEval> {
        let (d, sol) = self.code(x, theta, self.eval_tol)?;
        let gd = danskin_grad(x, &d, &sol.h);
        let u = CpDictionary::from_theta(theta, &self.dims, self.r)?;
        let mut grad = Vec::with_capacity(theta.len());
        for i in 0..self.dims.len() {
            let mut gi = DMatrix::zeros(self.dims[i], self.r);
            for row in 0..d.nrows() {
                let idx = multi_index(row, &self.dims);
                for j in 0..self.r {
                    let mut coef = 1.0;
                    for (k, uk) in u.factors.iter().enumerate() {
                        if k != i {
                            coef *= uk[(idx[k], j)];
                        }
                    }
                    gi[(idx[i], j)] += coef * gd[(row, j)];
                }
            }
            grad.extend(theta_from_matrix(&gi));
        }
        Ok(LossEval { value: sol.objective, grad })
    }

    fn loss_value(&self, x: &DMatrix<f64>, theta: &[f64]) -> Result<f64> {
        Ok(self.code(x, theta, self.eval_tol)?.1.objective)
    }

    fn build_surrogate(&self, x: &DMatrix<f64>, anchor: &[f64], eps_cap: f64, tol: f64) -> Result<BuiltSurrogate<CpQuad>> {
        let (d, sol) = self.code(x, anchor, tol.min(eps_cap))?;
        if sol.gap > eps_cap {
            return Err(Error::Contract(format!("code gap {} above the eps cap {eps_cap}", sol.gap)));
        }
        let f = factor_contribution(x, &sol.h, self.lambda, &d, sol.gap);
        Ok(BuiltSurrogate { g: CpQuad::from_contribution(&self.dims, &f), loss_at_anchor: sol.objective })
    }

    fn initial_surrogate(&self, theta0: &[f64], rho: f64) -> CpQuad {
        let mut g = CpQuad::zero(&self.dims, self.r);
        if rho != 0.0 {
            g.add_proximal(theta0, rho);
        }
        g
    }

    fn add_proximal(&self, g: &mut CpQuad, center: &[f64], rho: f64) {
        g.add_proximal(center, rho);
    }
}

#[derive(Clone, Debug)]
pub struct CpdlStep {
    pub h: DMatrix<f64>,
    pub surrogate: CpQuad,
    pub dict: CpDictionary,
    pub eps: f64,
}

/// One CPDL step: code solve at U_prev, surrogate averaging, then one cyclic pass
/// over the loading matrices, each kept within c′wₙ/m of its value at the start
/// of its block update.
pub fn cpdl_step(
    x: &DMatrix<f64>,
    u_prev: &CpDictionary,
    prev: &CpQuad,
    w_n: f64,
    lambda: f64,
    c_prime: f64,
    code_box: &BoxSet,
    factor_box: &BoxSet,
    tol: f64,
) -> Result<CpdlStep> {
    check_weight(w_n)?;
    let dims = u_prev.dims();
    let r = u_prev.rank();
    let d = u_prev.matrix();
    let sol = solve_code_lasso(x, &d, lambda, code_box, tol, None)?;
    let g = CpQuad::from_contribution(&dims, &factor_contribution(x, &sol.h, lambda, &d, sol.gap));
    let avg = prev.combine(&g, w_n)?;
    let mut blocks = Vec::new();
    let mut start = 0;
    for &i in &dims {
        blocks.push((start..start + i * r).collect());
        start += i * r;
    }
    let radius = c_prime * w_n / dims.len() as f64;
    let (theta, _, _) = minimize_blocks(&avg, &u_prev.theta(), factor_box, &blocks, radius, tol, DEFAULT_MAX_ITERS)?;
    Ok(CpdlStep { h: sol.h, surrogate: avg, dict: CpDictionary::from_theta(&theta, &dims, r)?, eps: sol.gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{EngineConfig, Mode, Sbmm};
    use crate::geometry::{BlockSpec, BOUNDARY_TOL};
    use crate::quadform::check_majorization;
    use crate::schedule::{cumulative_weights, WeightSchedule};
    use crate::subsolver::code_objective;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(lo..hi))
    }

    #[test]
    fn out_product_examples() {
        let u = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = out_product(&CpDictionary::new(vec![u.clone()]).unwrap()).unwrap();
        assert_eq!(t.as_matrix(), u);
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let b = DMatrix::from_row_slice(2, 1, &[3.0, 4.0]);
        let t = out_product(&CpDictionary::new(vec![a, b]).unwrap()).unwrap();
        assert_eq!(t.shape, vec![2, 2, 1]);
        assert_eq!(t.data, vec![3.0, 4.0, 6.0, 8.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let us: Vec<DMatrix<f64>> = [2, 3, 4].iter().map(|&i| rand_mat(&mut rng, i, 3, -1.0, 1.0)).collect();
        let t = out_product(&CpDictionary::new(us.clone()).unwrap()).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    for c in 0..3 {
                        let want = us[0][(i, c)] * us[1][(j, c)] * us[2][(k, c)];
                        assert!((t.get(&[i, j, k, c]) - want).abs() <= 1e-12);
                    }
                }
            }
        }
        let bad = CpDictionary { factors: vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 3)] };
        assert!(out_product(&bad).is_err());
    }

    #[test]
    fn mode_product_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let us: Vec<DMatrix<f64>> = [2, 3].iter().map(|&i| rand_mat(&mut rng, i, 3, -1.0, 1.0)).collect();
        let d = out_product(&CpDictionary::new(us).unwrap()).unwrap();
        assert_eq!(mode_product(&d, &DMatrix::identity(3, 3)).unwrap(), d);
        let h = rand_mat(&mut rng, 3, 4, -1.0, 1.0);
        let y = mode_product(&d, &h).unwrap();
        assert_eq!(y.shape, vec![2, 3, 4]);
        for i in 0..2 {
            for j in 0..3 {
                for s in 0..4 {
                    let want: f64 = (0..3).map(|c| d.get(&[i, j, c]) * h[(c, s)]).sum();
                    assert!((y.get(&[i, j, s]) - want).abs() <= 1e-12);
                }
            }
        }
        // one atom: every output slice is a multiple of it
        let d1 = Tensor::new(vec![3, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let y = mode_product(&d1, &DMatrix::from_row_slice(1, 2, &[2.0, -1.0])).unwrap();
        assert_eq!(y.data, vec![2.0, -1.0, -4.0, 2.0, 1.0, -0.5]);
        assert!(mode_product(&d, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn unfold_fold() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = Tensor::from_matrix(&[2], &m).unwrap();
        assert_eq!(unfold(&t, 0).unwrap(), m);
        assert_eq!(unfold(&t, 1).unwrap(), m.transpose());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = vec![2, 3, 4];
        let t = Tensor::new(shape.clone(), (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        for mode in 0..3 {
            let u = unfold(&t, mode).unwrap();
            assert_eq!(u.nrows(), shape[mode]);
            assert_eq!(fold(&u, mode, &shape).unwrap(), t);
        }
        // mode 1 column order: (i, k) lexicographic
        let u = unfold(&t, 1).unwrap();
        assert_eq!(u[(2, 1 * 4 + 3)], t.get(&[1, 2, 3]));
        assert!(unfold(&t, 3).is_err());
    }

    fn omf_setup(seed: u64, q: usize, r: usize, d: usize, lambda: f64) -> (OmfProblem, Vec<DMatrix<f64>>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prob = OmfProblem::new(q, r, d, lambda, BoxSet::uniform(q * r, 0.0, 1.0).unwrap(), BoxSet::uniform(r * d, 0.0, 5.0).unwrap()).unwrap();
        let data = (0..6).map(|_| rand_mat(&mut rng, q, d, 0.0, 1.0)).collect();
        (prob, data, rng)
    }

    #[test]
    fn omf_recursion_matches_direct_sums() {
        let (prob, data, mut rng) = omf_setup(4, 5, 2, 3, 0.1);
        let n = 60;
        let mut w = matrix_from_theta(&prob.dict_box.sample(&mut rng), 5, 2);
        let mut state = FactorQuad::zero(5, 2);
        let (mut hs, mut xs) = (Vec::new(), Vec::new());
        for k in 1..=n {
            let x = data[rng.gen_range(0..data.len())].clone();
            let st = omf_step(&x, &w, &state, 1.0 / k as f64, 0.1, &prob.code_box, &prob.dict_box, Some(0.5 / k as f64), 1e-10).unwrap();
            hs.push(st.h.clone());
            xs.push(x);
            state = st.surrogate;
            w = st.w;
            assert!(prob.dict_box.contains(&theta_from_matrix(&w), BOUNDARY_TOL));
            assert!(crate::quadform::symmetric_min_eig(&state.a) >= -1e-8);
        }
        let a: DMatrix<f64> = hs.iter().map(|h| h * h.transpose()).fold(DMatrix::zeros(2, 2), |s, m| s + m) / n as f64;
        let b: DMatrix<f64> = hs.iter().zip(&xs).map(|(h, x)| h * x.transpose()).fold(DMatrix::zeros(2, 5), |s, m| s + m) / n as f64;
        assert!((&state.a - &a).norm() <= 1e-10 * a.norm());
        assert!((&state.b - &b).norm() <= 1e-10 * b.norm());
        // polylog weights through cumulative_weight
        let sched = WeightSchedule::polylog(0.6, 1.0).unwrap();
        let mut state = FactorQuad::zero(5, 2);
        let mut w = matrix_from_theta(&prob.dict_box.sample(&mut rng), 5, 2);
        let mut contribs = Vec::new();
        for k in 1..=40 {
            let x = data[k % data.len()].clone();
            let st = omf_step(&x, &w, &state, sched.weight_at(k), 0.1, &prob.code_box, &prob.dict_box, None, 1e-10).unwrap();
            contribs.push(factor_contribution(&x, &st.h, 0.1, &w, 0.0));
            state = st.surrogate;
            w = st.w;
        }
        let cw = cumulative_weights(&sched, 40);
        let c: f64 = contribs.iter().zip(&cw).map(|(g, wk)| wk * g.c).sum();
        assert!((state.c - c).abs() <= 1e-10 * c.abs());
    }

    #[test]
    fn omf_scalar_hand_calculation() {
        // x = 2, W = 0.5, λ = 1: h minimizes (2 − h/2)² + |h| → h = 2; A = 4, B = 4, W = B/A = 1
        let x = DMatrix::from_element(1, 1, 2.0);
        let w0 = DMatrix::from_element(1, 1, 0.5);
        let st = omf_step(
            &x,
            &w0,
            &FactorQuad::zero(1, 1),
            1.0,
            1.0,
            &BoxSet::uniform(1, -10.0, 10.0).unwrap(),
            &BoxSet::uniform(1, 0.0, 5.0).unwrap(),
            None,
            1e-12,
        )
        .unwrap();
        assert!((st.h[(0, 0)] - 2.0).abs() < 1e-10);
        assert!((st.surrogate.a[(0, 0)] - 4.0).abs() < 1e-9);
        assert!((st.surrogate.b[(0, 0)] - 4.0).abs() < 1e-9);
        assert!((st.surrogate.c - 6.0).abs() < 1e-9);
        assert!((st.w[(0, 0)] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn omf_exact_basis_does_not_increase_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w0 = rand_mat(&mut rng, 4, 2, 0.1, 1.0);
        let h0 = rand_mat(&mut rng, 2, 3, 0.0, 1.0);
        let x = &w0 * &h0;
        let st = omf_step(&x, &w0, &FactorQuad::zero(4, 2), 1.0, 0.0, &BoxSet::uniform(6, 0.0, 5.0).unwrap(), &BoxSet::uniform(8, 0.0, 1.0).unwrap(), None, 1e-12).unwrap();
        let before = st.surrogate.eval(&theta_from_matrix(&w0));
        let after = st.surrogate.eval(&theta_from_matrix(&st.w));
        assert!(after <= before + 1e-12);
        assert!(before.abs() < 1e-9);
    }

    #[test]
    fn row_blocks_reproduce_block_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, r) = (4, 3);
        let hm = rand_mat(&mut rng, r, 6, -1.0, 1.0);
        let a = &hm * hm.transpose() + DMatrix::identity(r, r) * 0.1;
        let b = rand_mat(&mut rng, r, q, -1.0, 1.0);
        let g = FactorQuad { q, r, a: a.clone(), b: b.clone(), c: 0.0, anchor: vec![0.0; q * r], lipschitz: 0.0, rho: 0.0, eps: 0.0 };
        let spec = BlockSpec::rows(q, r);
        let pbox = BoxSet::uniform(q * r, -100.0, 100.0).unwrap();
        let (theta, values, _) = minimize_blocks(&g, &vec![0.0; q * r], &pbox, &spec.blocks, f64::INFINITY, 1e-12, DEFAULT_MAX_ITERS).unwrap();
        let want = b.transpose() * a.try_inverse().unwrap();
        let got = matrix_from_theta(&theta, q, r);
        assert!((got - want).norm() < 1e-8);
        assert!(values.windows(2).all(|v| v[1] <= v[0] + 1e-12));
    }

    #[test]
    fn subsampled_rows() {
        let (prob, data, mut rng) = omf_setup(7, 4, 2, 3, 0.05);
        let w0 = matrix_from_theta(&prob.dict_box.sample(&mut rng), 4, 2);
        let g0 = FactorQuad::zero(4, 2);
        let full = omf_step(&data[0], &w0, &g0, 0.5, 0.05, &prob.code_box, &prob.dict_box, Some(0.2), 1e-10).unwrap();
        let (sub, rows) = subsampled_omf_step(&data[0], &w0, &g0, 0.5, 0.05, &prob.code_box, &prob.dict_box, Some(0.2), 1e-10, &RowSampler::All, &mut rng).unwrap();
        assert_eq!(rows, vec![0, 1, 2, 3]);
        assert_eq!(sub.w, full.w);
        let mut w = w0.clone();
        let mut g = g0.clone();
        for k in 1..=30 {
            let (st, _) = subsampled_omf_step(&data[k % 6], &w, &g, 1.0 / k as f64, 0.05, &prob.code_box, &prob.dict_box, None, 1e-10, &RowSampler::Rows(vec![2]), &mut rng).unwrap();
            for a in [0, 1, 3] {
                assert_eq!(st.w.row(a), w0.row(a));
            }
            w = st.w;
            g = st.surrogate;
        }
        assert_ne!(w.row(2), w0.row(2));
        assert!(RowSampler::Fixed(0).sample(4, &mut rng).is_err());
        assert!(RowSampler::Rows(vec![9]).sample(4, &mut rng).is_err());
        let fixed = RowSampler::Fixed(2).sample(4, &mut rng).unwrap();
        assert_eq!(fixed.len(), 2);
    }

    #[test]
    fn bernoulli_row_frequency() {
        let (prob, data, mut rng) = omf_setup(8, 12, 2, 2, 0.05);
        let mut w = matrix_from_theta(&prob.dict_box.sample(&mut rng), 12, 2);
        let mut g = FactorQuad::zero(12, 2);
        let mut counts = [0usize; 12];
        let n = 10_000;
        for k in 1..=n {
            let (st, rows) = subsampled_omf_step(&data[k % 6], &w, &g, 1.0 / k as f64, 0.05, &prob.code_box, &prob.dict_box, None, 1e-8, &RowSampler::Bernoulli(0.5), &mut rng).unwrap();
            for a in rows {
                counts[a] += 1;
            }
            w = st.w;
            g = st.surrogate;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.5).abs() <= 0.02, "{c}");
        }
    }

    #[test]
    fn empty_draws_are_redrawn_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut errors = 0;
        for _ in 0..2000 {
            match RowSampler::Bernoulli(0.5).sample(1, &mut rng) {
                Ok(rows) => assert_eq!(rows, vec![0]),
                Err(_) => errors += 1,
            }
        }
        // P(empty twice) = 1/4
        assert!((errors as f64 / 2000.0 - 0.25).abs() < 0.04);
    }

    fn cp_setup(seed: u64, dims: Vec<usize>, r: usize, b: usize) -> (CpdlProblem, ChaCha8Rng) {
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let p: usize = dims.iter().sum::<usize>() * r;
        let prob = CpdlProblem::new(dims, r, b, 0.05, BoxSet::uniform(p, 0.0, 1.0).unwrap(), BoxSet::uniform(r * b, 0.0, 5.0).unwrap()).unwrap();
        (prob, rng)
    }

    #[test]
    fn cp_quad_consistency_and_gradients() {
        let (prob, mut rng) = cp_setup(9, vec![2, 3, 2], 2, 3);
        let mut g = prob.initial_surrogate(&prob.factor_box.sample(&mut rng), 0.3);
        for k in 1..=4 {
            let x = rand_mat(&mut rng, 12, 3, 0.0, 1.0);
            let built = prob.build_surrogate(&x, &prob.factor_box.sample(&mut rng), 1e-6, 1e-10).unwrap();
            g = g.combine(&built.g, 1.0 / k as f64).unwrap();
        }
        let theta = prob.factor_box.sample(&mut rng);
        let off = g.offsets();
        for i in 0..3 {
            let fq = g.factor_quad(&theta, i);
            let v = fq.eval(&theta[off[i]..off[i + 1]]);
            assert!((v - g.eval(&theta)).abs() < 1e-10 * v.abs().max(1.0));
        }
        let grad = g.smooth_grad(&theta);
        for k in 0..theta.len() {
            let (mut tp, mut tm) = (theta.clone(), theta.clone());
            tp[k] += 1e-5;
            tm[k] -= 1e-5;
            let fd = (g.eval(&tp) - g.eval(&tm)) / 2e-5;
            assert!((fd - grad[k]).abs() <= 1e-5 * grad[k].abs().max(1.0));
        }
        assert!(g.hessian_block(&theta, &[4, 5, 6]).is_ok());
        assert!(g.hessian_block(&theta, &[0, 3]).is_ok());
        assert!(g.hessian_block(&theta, &[3, 4]).is_err());
    }

    #[test]
    fn cp_surrogate_majorizes_loss() {
        let (prob, mut rng) = cp_setup(10, vec![2, 3], 2, 2);
        let x = rand_mat(&mut rng, 6, 2, 0.0, 1.0);
        let anchor = prob.factor_box.sample(&mut rng);
        let built = prob.build_surrogate(&x, &anchor, 1e-8, 1e-10).unwrap();
        let samples: Vec<Vec<f64>> = (0..100).map(|_| prob.factor_box.sample(&mut rng)).collect();
        let rep = check_majorization(&built.g, |t| prob.loss_value(&x, t).unwrap(), &samples, 1e-9);
        assert!(rep.passed(), "{rep:?}");
        assert!((built.g.eval(&anchor) - built.loss_at_anchor).abs() < 1e-10);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (omf, data, mut rng) = omf_setup(11, 4, 2, 3, 0.0);
        let (cp, _) = cp_setup(12, vec![2, 2], 2, 3);
        let mut checked = 0;
        for _ in 0..10 {
            let theta = omf.dict_box.sample(&mut rng);
            let x = &data[rng.gen_range(0..6)];
            let g = omf.loss(x, &theta).unwrap().grad;
            for k in 0..theta.len() {
                let (mut tp, mut tm) = (theta.clone(), theta.clone());
                tp[k] += 1e-5;
                tm[k] -= 1e-5;
                let fd = (omf.loss_value(x, &tp).unwrap() - omf.loss_value(x, &tm).unwrap()) / 2e-5;
                assert!((fd - g[k]).abs() <= 1e-4 * g[k].abs().max(1.0), "{fd} vs {}", g[k]);
            }
            let theta = cp.factor_box.sample(&mut rng);
            let g = cp.loss(x, &theta).unwrap().grad;
            for k in 0..theta.len() {
                let (mut tp, mut tm) = (theta.clone(), theta.clone());
                tp[k] += 1e-5;
                tm[k] -= 1e-5;
                let fd = (cp.loss_value(x, &tp).unwrap() - cp.loss_value(x, &tm).unwrap()) / 2e-5;
                assert!((fd - g[k]).abs() <= 1e-4 * g[k].abs().max(1.0), "{fd} vs {}", g[k]);
                checked += 1;
            }
        }
        assert_eq!(checked, 80);
    }

    #[test]
    fn cpdl_single_factor_is_omf_bitwise() {
        let (omf, data, _) = omf_setup(13, 4, 2, 3, 0.1);
        let cp = CpdlProblem::new(vec![4], 2, 3, 0.1, omf.dict_box.clone(), omf.code_box.clone()).unwrap();
        let sched = WeightSchedule::polylog(0.6, 1.2).unwrap();
        let mut cfg = EngineConfig::new(Mode::C2, sched.clone(), BlockSpec::full(8));
        cfg.c_prime = 0.3;
        cfg.seed = 4;
        let mut e1 = Sbmm::new(omf.clone(), cfg.clone(), None).unwrap();
        let mut e2 = Sbmm::new(cp.clone(), cfg, None).unwrap();
        assert_eq!(e1.state.theta, e2.state.theta);
        let mut u = CpDictionary::from_theta(&e1.state.theta, &[4], 2).unwrap();
        let mut w = u.factors[0].clone();
        let (mut gq, mut gc) = (FactorQuad::zero(4, 2), CpQuad::zero(&[4], 2));
        for n in 1..=200 {
            let x = &data[(n * 7) % 6];
            e1.step(x).unwrap();
            e2.step(x).unwrap();
            assert_eq!(e1.state.theta, e2.state.theta, "step {n}");
            let wn = sched.weight_at(n);
            let so = omf_step(x, &w, &gq, wn, 0.1, &omf.code_box, &omf.dict_box, Some(0.3 * wn), 1e-8).unwrap();
            let sc = cpdl_step(x, &u, &gc, wn, 0.1, 0.3, &cp.code_box, &cp.factor_box, 1e-8).unwrap();
            assert_eq!(so.w, sc.dict.factors[0]);
            assert_eq!(theta_from_matrix(&so.w), e1.state.theta);
            w = so.w;
            gq = so.surrogate;
            u = sc.dict;
            gc = sc.surrogate;
        }
    }

    #[test]
    fn cpdl_step_moves_and_reconstruction() {
        let (prob, mut rng) = cp_setup(14, vec![3, 2, 2], 2, 4);
        let mut u = CpDictionary::from_theta(&prob.factor_box.sample(&mut rng), &prob.dims, 2).unwrap();
        let mut g = CpQuad::zero(&prob.dims, 2);
        for n in 1..=30 {
            let x = rand_mat(&mut rng, 12, 4, 0.0, 1.0);
            let wn = 1.0 / (n as f64).sqrt();
            let st = cpdl_step(&x, &u, &g, wn, 0.05, 0.5, &prob.code_box, &prob.factor_box, 1e-9).unwrap();
            for (a, b) in st.dict.factors.iter().zip(&u.factors) {
                assert!((a - b).norm() <= 0.5 * wn + 1e-12);
            }
            assert!(prob.factor_box.contains(&st.dict.theta(), 1e-9));
            let recon = mode_product(&out_product(&st.dict).unwrap(), &st.h).unwrap();
            let mut loop_err = 0.0;
            for i in 0..3 {
                for j in 0..2 {
                    for k in 0..2 {
                        for s in 0..4 {
                            let mut v = 0.0;
                            for c in 0..2 {
                                v += st.dict.factors[0][(i, c)] * st.dict.factors[1][(j, c)] * st.dict.factors[2][(k, c)] * st.h[(c, s)];
                            }
                            let row = (i * 2 + j) * 2 + k;
                            loop_err += (x[(row, s)] - v).powi(2);
                        }
                    }
                }
            }
            let mat_err = (&x - recon.as_matrix()).norm_squared();
            assert!((mat_err - loop_err).abs() <= 1e-10);
            let obj = code_objective(&x, &st.dict.matrix(), &st.h, 0.0);
            assert!((obj - loop_err).abs() <= 1e-10);
            u = st.dict;
            g = st.surrogate;
        }
    }
}
