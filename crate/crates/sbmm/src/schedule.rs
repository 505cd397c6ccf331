//! Weight sequences wₙ and the induced averaging coefficients wⁿₖ.

use crate::error::{Error, Result};

/// Horizon used by [`validate_schedule`] for the numerical checks.
pub const VALIDATION_HORIZON: usize = 10_000;

/// Above this n the running product is accumulated in log space.
const LOG_SPACE_THRESHOLD: usize = 1_000;

#[derive(Clone, Debug, PartialEq)]
pub enum WeightSchedule {
    /// wₙ = 1/n.
    Balanced,
    /// wₙ = min(1, n^-beta (ln(n+1))^-delta).
    Polylog { beta: f64, delta: f64 },
    /// wₙ = alpha.
    Constant { alpha: f64 },
    /// Listed values; the last one repeats past the end of the list.
    Custom(Vec<f64>),
}

impl WeightSchedule {
    pub fn balanced() -> Self {
        WeightSchedule::Balanced
    }

    pub fn polylog(beta: f64, delta: f64) -> Result<Self> {
        if !(beta.is_finite() && delta.is_finite() && beta >= 0.0 && delta >= 0.0) {
            return Err(Error::Arg(format!(
                "polylog exponents must be finite and nonnegative (beta={beta}, delta={delta})"
            )));
        }
        Ok(WeightSchedule::Polylog { beta, delta })
    }

    pub fn constant(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Arg(format!("constant weight {alpha} outside (0,1]")));
        }
        Ok(WeightSchedule::Constant { alpha })
    }

    pub fn custom(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Arg("custom schedule needs at least one value".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(Error::Arg(format!("custom weight {v} outside (0,1]")));
        }
        Ok(WeightSchedule::Custom(values))
    }

    /// wₙ for n ≥ 1.
    pub fn weight_at(&self, n: usize) -> f64 {
        weight_at(self, n)
    }

    /// w₁..wₙ.
    pub fn weights(&self, n: usize) -> Vec<f64> {
        (1..=n).map(|k| weight_at(self, k)).collect()
    }

    /// Σ_{k≤n} wₖ.
    pub fn weight_sum(&self, n: usize) -> f64 {
        (1..=n).map(|k| weight_at(self, k)).sum()
    }
}

/// wₙ. Panics if n = 0.
pub fn weight_at(s: &WeightSchedule, n: usize) -> f64 {
    assert!(n >= 1, "weights are indexed from 1");
    match s {
        WeightSchedule::Balanced => 1.0 / n as f64,
        WeightSchedule::Polylog { beta, delta } => {
            let nf = n as f64;
            let v = nf.powf(-beta) * (nf + 1.0).ln().powf(-delta);
            v.min(1.0)
        }
        WeightSchedule::Constant { alpha } => *alpha,
        WeightSchedule::Custom(vals) => *vals.get(n - 1).unwrap_or(vals.last().unwrap()),
    }
}

/// wⁿₖ = wₖ ∏_{i=k+1}^{n} (1 − wᵢ).
pub fn cumulative_weight(s: &WeightSchedule, k: usize, n: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::Arg(format!("cumulative weight needs 1 <= k <= n (k={k}, n={n})")));
    }
    let wk = weight_at(s, k);
    if n <= LOG_SPACE_THRESHOLD {
        let mut p = wk;
        for i in k + 1..=n {
            p *= 1.0 - weight_at(s, i);
        }
        return Ok(p);
    }
    let mut log_sum = 0.0;
    for i in k + 1..=n {
        let wi = weight_at(s, i);
        if wi >= 1.0 {
            return Ok(0.0);
        }
        log_sum += (-wi).ln_1p();
    }
    Ok(wk * log_sum.exp())
}

/// All coefficients wⁿ₁..wⁿₙ at once (index k-1 holds wⁿₖ).
pub fn cumulative_weights(s: &WeightSchedule, n: usize) -> Vec<f64> {
    let w = s.weights(n);
    let mut out = vec![0.0; n];
    if n <= LOG_SPACE_THRESHOLD {
        let mut tail = 1.0;
        for k in (0..n).rev() {
            out[k] = w[k] * tail;
            tail *= 1.0 - w[k];
        }
    } else {
        let mut log_tail = 0.0f64;
        let mut zero = false;
        for k in (0..n).rev() {
            out[k] = if zero { 0.0 } else { w[k] * log_tail.exp() };
            if w[k] >= 1.0 {
                zero = true;
            } else {
                log_tail += (-w[k]).ln_1p();
            }
        }
    }
    out
}

/// ∏_{i≤n} (1 − wᵢ): the weight left on the initial surrogate after n steps.
pub fn residual_mass(s: &WeightSchedule, n: usize) -> f64 {
    let mut p = 1.0;
    for i in 1..=n {
        p *= 1.0 - weight_at(s, i);
        if p == 0.0 {
            break;
        }
    }
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidityReport {
    pub non_increasing: bool,
    /// wₙ⁻¹ − wₙ₋₁⁻¹ ≤ 1 from `ratio_onset` to the end of the horizon.
    pub ratio_condition: bool,
    /// First n from which the ratio condition holds through the horizon.
    pub ratio_onset: Option<usize>,
    pub square_summable: bool,
    pub a4_prime_valid: bool,
    pub optional_condition: bool,
    pub horizon: usize,
}

impl ValidityReport {
    /// True when the schedule is covered by the convergence theory.
    pub fn theory_valid(&self) -> bool {
        self.non_increasing && self.ratio_condition && self.square_summable && self.a4_prime_valid
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.non_increasing {
            out.push("weights are not non-increasing".to_string());
        }
        if !self.ratio_condition {
            out.push("1/w_n - 1/w_(n-1) <= 1 fails on the tail of the horizon".to_string());
        }
        if !self.square_summable {
            out.push("sum of w_n^2 diverges".to_string());
        }
        if !self.a4_prime_valid {
            out.push("schedule is neither 1/n nor polylog with beta in [1/2,1), delta > 1".to_string());
        }
        out
    }
}

pub fn validate_schedule(s: &WeightSchedule) -> ValidityReport {
    validate_schedule_horizon(s, VALIDATION_HORIZON)
}

pub fn validate_schedule_horizon(s: &WeightSchedule, horizon: usize) -> ValidityReport {
    let horizon = horizon.max(2);
    let w = s.weights(horizon);
    let non_increasing = w.windows(2).all(|p| p[1] <= p[0] * (1.0 + 1e-15));

    // onset: last index where the ratio condition fails, plus one
    let mut onset = 1usize;
    for n in 2..=horizon {
        let d = 1.0 / w[n - 1] - 1.0 / w[n - 2];
        if d > 1.0 + 1e-9 {
            onset = n + 1;
        }
    }
    let ratio_onset = (onset <= horizon).then_some(onset);
    let ratio_condition = onset <= horizon / 2;

    let square_summable = match s {
        WeightSchedule::Balanced => true,
        WeightSchedule::Polylog { beta, delta } => {
            2.0 * beta > 1.0 || (2.0 * beta == 1.0 && 2.0 * delta > 1.0)
        }
        WeightSchedule::Constant { .. } | WeightSchedule::Custom(_) => false,
    };
    let (a4_prime_valid, optional_condition) = match s {
        WeightSchedule::Balanced => (true, false),
        WeightSchedule::Polylog { beta, delta } => (
            (0.5..1.0).contains(beta) && *delta > 1.0,
            (0.75..1.0).contains(beta) && *delta > 1.0,
        ),
        _ => (false, false),
    };
    ValidityReport {
        non_increasing,
        ratio_condition,
        ratio_onset,
        square_summable,
        a4_prime_valid,
        optional_condition,
        horizon,
    }
}

/// Σ_{i=1}^{T} wⁿᵢ, summed directly.
pub fn tail_weight_sum(s: &WeightSchedule, t: usize, n: usize) -> Result<f64> {
    if t > n || n == 0 {
        return Err(Error::Arg(format!("tail sum needs T <= n (T={t}, n={n})")));
    }
    let c = cumulative_weights(s, n);
    Ok(c[..t].iter().sum())
}

/// Upper bound on Σ_{i≤T} wⁿᵢ for non-increasing weights with wₙ ≥ c n^-γ.
///
/// For γ = 1 this is T((T+1)/n)^c; see the README for why it differs from
/// the often quoted T n^-c.
pub fn tail_weight_bound(c: f64, gamma: f64, t: usize, n: usize) -> f64 {
    let (t, nf) = (t as f64, n as f64);
    if gamma < 1.0 {
        let e = 1.0 - gamma;
        t * (-c * nf.powf(e) + c * (t + 1.0).powf(e)).exp()
    } else {
        t * ((t + 1.0) / nf).powf(c)
    }
}
