//! Run diagnostics, CSV output, run configuration and the command-line entry points.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{run, EngineConfig, InvariantAudit, LossEval, Mode, Problem, Sbmm, StepReport};
use crate::error::{Error, Result};
use crate::factorize::{CpdlProblem, OmfProblem};
use crate::geometry::{stationarity_measure, BlockSpec, BoxSet, RowSampler, Selection};
use crate::par;
use crate::schedule::{cumulative_weights, validate_schedule, ValidityReport, WeightSchedule};
use crate::stream::{cyclic_mixing_chain, make_iid, mixing_rate_of, stationary_of, MarkovSource};

/// One row of the diagnostics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsRecord {
    pub n: usize,
    pub w_n: f64,
    /// ℓ(xₙ, θₙ₋₁).
    pub loss_new: f64,
    /// f̄ₙ(θₙ).
    pub fbar: f64,
    /// f(θₙ).
    pub f_exp: f64,
    /// ḡₙ(θₙ).
    pub gbar_val: f64,
    pub gap_emp: f64,
    pub gap_exp: f64,
    pub ggap_emp: f64,
    pub ggap_exp: f64,
    pub stat_surr: f64,
    pub stat_emp: f64,
    pub stat_exp: f64,
    pub step_norm: f64,
    pub eps_bar: f64,
    /// gap + ggap².
    pub thm32_emp: f64,
    pub thm32_exp: f64,
    pub min_thm32_emp: f64,
    pub min_thm32_exp: f64,
    pub min_stat_surr: f64,
    pub min_stat_emp: f64,
    pub min_stat_exp: f64,
    /// Σ_{k≤n} wₖ.
    pub sum_w: f64,
}

impl DiagnosticsRecord {
    pub const FIELDS: [&'static str; 23] = [
        "n",
        "w_n",
        "loss_new",
        "fbar",
        "f_exp",
        "gbar_val",
        "gap_emp",
        "gap_exp",
        "ggap_emp",
        "ggap_exp",
        "stat_surr",
        "stat_emp",
        "stat_exp",
        "step_norm",
        "eps_bar",
        "thm32_emp",
        "thm32_exp",
        "min_thm32_emp",
        "min_thm32_exp",
        "min_stat_surr",
        "min_stat_emp",
        "min_stat_exp",
        "sum_w",
    ];

    /// Every field after `n`, in CSV order.
    pub fn values(&self) -> [f64; 22] {
        [
            self.w_n,
            self.loss_new,
            self.fbar,
            self.f_exp,
            self.gbar_val,
            self.gap_emp,
            self.gap_exp,
            self.ggap_emp,
            self.ggap_exp,
            self.stat_surr,
            self.stat_emp,
            self.stat_exp,
            self.step_norm,
            self.eps_bar,
            self.thm32_emp,
            self.thm32_exp,
            self.min_thm32_emp,
            self.min_thm32_exp,
            self.min_stat_surr,
            self.min_stat_emp,
            self.min_stat_exp,
            self.sum_w,
        ]
    }

    fn from_values(n: usize, v: &[f64]) -> Self {
        DiagnosticsRecord {
            n,
            w_n: v[0],
            loss_new: v[1],
            fbar: v[2],
            f_exp: v[3],
            gbar_val: v[4],
            gap_emp: v[5],
            gap_exp: v[6],
            ggap_emp: v[7],
            ggap_exp: v[8],
            stat_surr: v[9],
            stat_emp: v[10],
            stat_exp: v[11],
            step_norm: v[12],
            eps_bar: v[13],
            thm32_emp: v[14],
            thm32_exp: v[15],
            min_thm32_emp: v[16],
            min_thm32_exp: v[17],
            min_stat_surr: v[18],
            min_stat_emp: v[19],
            min_stat_exp: v[20],
            sum_w: v[21],
        }
    }

    pub fn column(&self, name: &str) -> Option<f64> {
        if name == "n" {
            return Some(self.n as f64);
        }
        let i = Self::FIELDS.iter().position(|f| *f == name)?;
        Some(self.values()[i - 1])
    }
}

/// Σᵢ weights[i]·ℓ(samples[i], θ) and its gradient; zero weights are skipped.
pub fn weighted_loss<P: Problem>(problem: &P, samples: &[P::Sample], weights: &[f64], theta: &[f64], with_grad: bool) -> Result<LossEval> {
    let active: Vec<usize> = (0..samples.len()).filter(|&i| weights[i] != 0.0).collect();
    let evals = par::map(active.len(), |k| {
        let i = active[k];
        if with_grad {
            problem.loss(&samples[i], theta)
        } else {
            problem.loss_value(&samples[i], theta).map(|value| LossEval { value, grad: Vec::new() })
        }
    });
    let mut value = 0.0;
    let mut grad = vec![0.0; if with_grad { theta.len() } else { 0 }];
    for (k, e) in evals.into_iter().enumerate() {
        let e = e?;
        let w = weights[active[k]];
        value += w * e.value;
        for (g, v) in grad.iter_mut().zip(&e.grad) {
            *g += w * v;
        }
    }
    Ok(LossEval { value, grad })
}

/// f̄ₙ(θ) = Σₖ wⁿₖ ℓ(xₖ, θ) from the full sample log.
pub fn eval_empirical<P: Problem>(problem: &P, theta: &[f64], samples: &[P::Sample], schedule: &WeightSchedule, n: usize) -> Result<LossEval> {
    if samples.len() < n {
        return Err(Error::Arg(format!("sample log holds {} samples, need {n}", samples.len())));
    }
    weighted_loss(problem, &samples[..n], &cumulative_weights(schedule, n), theta, true)
}

/// f(θ) = Σ_y π(y) ℓ(φ(y), θ), exact over the stationary distribution.
pub fn eval_expected<P: Problem>(problem: &P, theta: &[f64], source: &MarkovSource<P::Sample>) -> Result<LossEval> {
    let pi = stationary_of(&source.p)?;
    weighted_loss(problem, &source.emissions, &pi, theta, true)
}

/// f̄ₙ aggregated by emission state: the weight of state y is Σ_{k: yₖ=y} wⁿₖ.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalTracker {
    pub weights: Vec<f64>,
    pub n: usize,
}

impl EmpiricalTracker {
    pub fn new(states: usize) -> Self {
        EmpiricalTracker { weights: vec![0.0; states], n: 0 }
    }

    pub fn update(&mut self, state: usize, w: f64) {
        for c in &mut self.weights {
            *c *= 1.0 - w;
        }
        self.weights[state] += w;
        self.n += 1;
    }

    pub fn eval<P: Problem>(&self, problem: &P, emissions: &[P::Sample], theta: &[f64], with_grad: bool) -> Result<LossEval> {
        weighted_loss(problem, emissions, &self.weights, theta, with_grad)
    }
}

/// Checks ḡₙ₊₁(θₙ₊₁) − ḡₙ(θₙ) ≤ wₙ₊₁(ℓ(xₙ₊₁,θₙ) − f̄ₙ(θₙ)) + wₙ²Σ_{k≤n+1}εₖ.
#[derive(Clone, Debug, Default)]
pub struct IncrementAudit {
    pub checks: usize,
    pub violations: usize,
    /// Largest (lhs − rhs)/scale seen.
    pub worst: f64,
    pub messages: Vec<String>,
}

pub const INCREMENT_TOL: f64 = 1e-8;

impl IncrementAudit {
    pub fn check(&mut self, n: usize, lhs: f64, rhs: f64, scale: f64) {
        self.checks += 1;
        let excess = (lhs - rhs) / scale;
        if self.checks == 1 || excess > self.worst {
            self.worst = excess;
        }
        if excess > INCREMENT_TOL {
            self.violations += 1;
            self.messages.push(format!("n={n}: increment {lhs} exceeds bound {rhs}"));
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiagOptions {
    /// Record every `interval` steps (and always at n = 1).
    pub interval: usize,
    /// Record every step up to this n.
    pub full_until: usize,
}

impl Default for DiagOptions {
    fn default() -> Self {
        DiagOptions { interval: 10, full_until: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trajectory: Vec<Vec<f64>>,
    pub records: Vec<DiagnosticsRecord>,
    pub invariants: InvariantAudit,
    pub increments: IncrementAudit,
}

struct Collector {
    tracker: EmpiricalTracker,
    pi: Vec<f64>,
    opts: DiagOptions,
    sum_w: f64,
    records: Vec<DiagnosticsRecord>,
    invariants: InvariantAudit,
    increments: IncrementAudit,
    mins: [f64; 5],
}

impl Collector {
    fn observe<P: Problem>(&mut self, eng: &Sbmm<P>, emissions: &[P::Sample], state: usize, x: &P::Sample, rep: &StepReport) -> Result<()> {
        let problem = &eng.problem;
        let n = rep.n;
        let record = n == 1 || n % self.opts.interval == 0 || n <= self.opts.full_until;
        let prev = &eng.state.theta_prev;
        let mut loss_new = f64::NAN;
        if record {
            loss_new = problem.loss_value(x, prev)?;
            if n >= 2 {
                let fbar_prev = self.tracker.eval(problem, emissions, prev, false)?.value;
                let w_prev = eng.config.schedule.weight_at(n - 1);
                let lhs = rep.gbar_at_new() - rep.gbar_prev_at_prev;
                let rhs = rep.w * (loss_new - fbar_prev) + w_prev * w_prev * rep.eps_sum;
                let scale = [1.0, rep.gbar_at_new(), rep.gbar_prev_at_prev, loss_new, fbar_prev].iter().fold(0.0f64, |a, v| a.max(v.abs()));
                self.increments.check(n, lhs, rhs, scale);
            }
        }
        self.tracker.update(state, rep.w);
        self.sum_w += rep.w;
        self.invariants.record(rep, eng.config.mode, eng.config.c_prime, eng.config.tol);
        if !record {
            return Ok(());
        }
        let theta = &eng.state.theta;
        let pbox = problem.param_box();
        let fbar = self.tracker.eval(problem, emissions, theta, true)?;
        let fexp = weighted_loss(problem, emissions, &self.pi, theta, true)?;
        let gval = rep.gbar_at_new();
        let ggrad = eng.state.gbar.grad(theta);
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let gap_emp = (gval - fbar.value).abs();
        let gap_exp = (gval - fexp.value).abs();
        let ggap_emp = dist(&ggrad, &fbar.grad);
        let ggap_exp = dist(&ggrad, &fexp.grad);
        let stat_surr = stationarity_measure(&ggrad, theta, pbox)?;
        let stat_emp = stationarity_measure(&fbar.grad, theta, pbox)?;
        let stat_exp = stationarity_measure(&fexp.grad, theta, pbox)?;
        let thm32_emp = gap_emp + ggap_emp * ggap_emp;
        let thm32_exp = gap_exp + ggap_exp * ggap_exp;
        for (m, v) in self.mins.iter_mut().zip([thm32_emp, thm32_exp, stat_surr, stat_emp, stat_exp]) {
            *m = m.min(v);
        }
        self.records.push(DiagnosticsRecord {
            n,
            w_n: rep.w,
            loss_new,
            fbar: fbar.value,
            f_exp: fexp.value,
            gbar_val: gval,
            gap_emp,
            gap_exp,
            ggap_emp,
            ggap_exp,
            stat_surr,
            stat_emp,
            stat_exp,
            step_norm: rep.step_norm,
            eps_bar: rep.eps_bar,
            thm32_emp,
            thm32_exp,
            min_thm32_emp: self.mins[0],
            min_thm32_exp: self.mins[1],
            min_stat_surr: self.mins[2],
            min_stat_emp: self.mins[3],
            min_stat_exp: self.mins[4],
            sum_w: self.sum_w,
        });
        Ok(())
    }
}

/// Runs the engine for `n_iters` steps, recording diagnostics and auditing the
/// per-step invariants and the one-step increment bound.
pub fn run_with_diagnostics<P: Problem>(
    engine: &mut Sbmm<P>,
    source: &mut MarkovSource<P::Sample>,
    n_iters: usize,
    opts: DiagOptions,
) -> Result<RunOutput> {
    if opts.interval == 0 {
        return Err(Error::Config("diag_interval must be >= 1".into()));
    }
    let emissions = source.emissions.clone();
    let mut col = Collector {
        tracker: EmpiricalTracker::new(source.states()),
        pi: stationary_of(&source.p)?,
        opts,
        sum_w: 0.0,
        records: Vec::new(),
        invariants: InvariantAudit::default(),
        increments: IncrementAudit::default(),
        mins: [f64::INFINITY; 5],
    };
    let trajectory = run(engine, source, n_iters, |eng, state, x, rep| col.observe(eng, &emissions, state, x, rep))?;
    Ok(RunOutput { trajectory, records: col.records, invariants: col.invariants, increments: col.increments })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Emp,
    Exp,
    Surr,
}

/// Smallest recorded n whose stationarity measure squared is at most `eps`.
pub fn iteration_complexity_estimate(records: &[DiagnosticsRecord], eps: f64, target: Target) -> Option<usize> {
    records
        .iter()
        .find(|r| {
            let s = match target {
                Target::Emp => r.stat_emp,
                Target::Exp => r.stat_exp,
                Target::Surr => r.stat_surr,
            };
            s * s <= eps
        })
        .map(|r| r.n)
}

pub fn csv_string(records: &[DiagnosticsRecord]) -> String {
    let mut out = DiagnosticsRecord::FIELDS.join(",");
    out.push('\n');
    for r in records {
        write!(out, "{}", r.n).unwrap();
        for v in r.values() {
            write!(out, ",{v:.16e}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn emit_csv(records: &[DiagnosticsRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(csv_string(records).as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Vec<DiagnosticsRecord>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Config("empty csv".into()))?;
    if header != DiagnosticsRecord::FIELDS.join(",") {
        return Err(Error::Config("csv header does not match the diagnostics schema".into()));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = |msg: String| Error::ConfigLine { line: i + 2, msg };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != DiagnosticsRecord::FIELDS.len() {
            return Err(bad(format!("{} cells, expected {}", cells.len(), DiagnosticsRecord::FIELDS.len())));
        }
        let n = cells[0].parse::<usize>().map_err(|e| bad(e.to_string()))?;
        let vals = cells[1..].iter().map(|c| c.parse::<f64>().map_err(|e| bad(e.to_string()))).collect::<Result<Vec<f64>>>()?;
        out.push(DiagnosticsRecord::from_values(n, &vals));
    }
    Ok(out)
}

/// Least-squares slope of ln y against ln x over rows where both are positive.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs.iter().zip(ys).filter(|(x, y)| **x > 0.0 && **y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AppKind {
    Omf,
    OmfSub,
    Cpdl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamKind {
    Iid,
    Cyclic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Full,
    Rows,
    Columns,
    Factors,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Theta0 {
    Random,
    File(PathBuf),
}

/// Everything one run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub label: String,
    pub output: Option<PathBuf>,
    pub schedule: WeightSchedule,
    pub allow_invalid: bool,
    pub stream_kind: StreamKind,
    pub states: usize,
    pub stream_lambda: f64,
    pub stream_seed: u64,
    pub data_seed: u64,
    pub app: AppKind,
    pub rank: usize,
    pub lambda: f64,
    /// Rows q of an OMF data matrix.
    pub rows: usize,
    /// Columns per sample (d for OMF, b for CPDL).
    pub minibatch: usize,
    pub row_sample: Option<RowSampler>,
    pub tensor_shape: Vec<usize>,
    pub dict_lower: f64,
    pub dict_upper: f64,
    pub code_lower: f64,
    pub code_upper: f64,
    pub mode: Mode,
    /// In units of the parameter box diameter; infinite disables the ball.
    pub c_prime: f64,
    pub n_iters: usize,
    pub theta0: Theta0,
    pub eps_cap: f64,
    pub diag_interval: usize,
    pub full_until: usize,
    pub seed: u64,
    pub rho: Option<f64>,
    pub tol: f64,
    pub blocks: Option<BlockKind>,
    pub selection: Selection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            label: "run".into(),
            output: None,
            schedule: WeightSchedule::Balanced,
            allow_invalid: false,
            stream_kind: StreamKind::Iid,
            states: 5,
            stream_lambda: 0.7,
            stream_seed: 0,
            data_seed: 0,
            app: AppKind::Omf,
            rank: 3,
            lambda: 0.1,
            rows: 8,
            minibatch: 4,
            row_sample: None,
            tensor_shape: vec![3, 3],
            dict_lower: 0.0,
            dict_upper: 1.0,
            code_lower: 0.0,
            code_upper: 10.0,
            mode: Mode::C2,
            c_prime: 1.0,
            n_iters: 1000,
            theta0: Theta0::Random,
            eps_cap: 1e-6,
            diag_interval: 10,
            full_until: 0,
            seed: 0,
            rho: None,
            tol: crate::subsolver::DEFAULT_TOL,
            blocks: None,
            selection: Selection::Cyclic,
        }
    }
}

/// Recognized keys with a one-line description each.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("output.label", "free-form run label"),
    ("output.path", "CSV destination"),
    ("schedule.kind", "balanced | polylog | constant | custom"),
    ("schedule.beta", "polylog exponent of n"),
    ("schedule.delta", "polylog exponent of log(n+1)"),
    ("schedule.alpha", "constant weight"),
    ("schedule.values", "comma-separated weights, last one repeats"),
    ("schedule.allow_invalid", "run schedules outside the convergence theory"),
    ("stream.kind", "iid | cyclic"),
    ("stream.states", "number of chain states"),
    ("stream.lambda", "mixing rate of the cyclic chain"),
    ("stream.seed", "chain seed"),
    ("data.seed", "seed of the emission table"),
    ("app.kind", "omf | omf_sub | cpdl"),
    ("app.rank", "dictionary size r"),
    ("app.lambda", "l1 weight on codes"),
    ("app.rows", "rows q of an OMF sample"),
    ("app.minibatch", "columns per sample"),
    ("app.row_sample", "omf_sub rows: integer count or probability in (0,1)"),
    ("app.tensor_shape", "CPDL tensor shape, e.g. 3x3x2"),
    ("dict.lower", "lower bound of dictionary entries"),
    ("dict.upper", "upper bound of dictionary entries"),
    ("code.lower", "lower bound of code entries"),
    ("code.upper", "upper bound of code entries"),
    ("engine.mode", "c1 | c2"),
    ("engine.c_prime", "trust-region constant in units of box diameter, or inf"),
    ("engine.n_iters", "number of steps"),
    ("engine.theta0", "random | path to whitespace-separated values"),
    ("engine.eps_cap", "cap on the per-step surrogate error"),
    ("engine.diag_interval", "record diagnostics every this many steps"),
    ("engine.full_until", "record every step up to this n"),
    ("engine.seed", "seed of theta0 and block selection"),
    ("engine.rho", "weight of the initial proximal surrogate (c1 default 1, c2 default 0)"),
    ("engine.tol", "inner solver tolerance"),
    ("engine.blocks", "full | rows | columns | factors"),
    ("engine.selection", "cyclic | random"),
];

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse '{v}': {e}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got '{v}'")),
    }
}

/// Parses a key=value document. Later keys override earlier ones; unknown keys are errors.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigLine { line: i + 1, msg: format!("expected key=value, got '{line}'") })?;
        let k = k.trim();
        if !CONFIG_KEYS.iter().any(|(key, _)| *key == k) {
            return Err(Error::ConfigLine { line: i + 1, msg: format!("unknown key '{k}'") });
        }
        kv.insert(k.to_string(), (i + 1, v.trim().to_string()));
    }
    let mut c = RunConfig::default();
    let get = |k: &str| kv.get(k).map(|(l, v)| (*l, v.as_str()));
    let at = |line: usize| move |msg: String| Error::ConfigLine { line, msg };
    macro_rules! set {
        ($key:expr, $field:expr, $parse:expr) => {
            if let Some((l, v)) = get($key) {
                $field = $parse(v).map_err(at(l))?;
            }
        };
    }
    set!("output.label", c.label, |v: &str| Ok::<_, String>(v.to_string()));
    set!("output.path", c.output, |v: &str| Ok::<_, String>(Some(PathBuf::from(v))));
    set!("schedule.allow_invalid", c.allow_invalid, parse_bool);
    if let Some((l, kind)) = get("schedule.kind") {
        let num = |k: &str, default: f64| -> Result<f64> {
            match get(k) {
                Some((l, v)) => parse_num::<f64>(v).map_err(at(l)),
                None => Ok(default),
            }
        };
        c.schedule = match kind {
            "balanced" => WeightSchedule::Balanced,
            "polylog" => WeightSchedule::polylog(num("schedule.beta", 0.75)?, num("schedule.delta", 1.0)?).map_err(|e| at(l)(e.to_string()))?,
            "constant" => WeightSchedule::constant(num("schedule.alpha", 0.1)?).map_err(|e| at(l)(e.to_string()))?,
            "custom" => {
                let (lv, v) = get("schedule.values").ok_or_else(|| at(l)("custom schedule needs schedule.values".into()))?;
                let vals = v.split(',').map(|s| parse_num::<f64>(s.trim())).collect::<std::result::Result<Vec<_>, _>>().map_err(at(lv))?;
                WeightSchedule::custom(vals).map_err(|e| at(lv)(e.to_string()))?
            }
            other => return Err(at(l)(format!("unknown schedule kind '{other}'"))),
        };
    }
    if let Some((l, v)) = get("stream.kind") {
        c.stream_kind = match v {
            "iid" => StreamKind::Iid,
            "cyclic" | "markov" => StreamKind::Cyclic,
            other => return Err(at(l)(format!("unknown stream kind '{other}'"))),
        };
    }
    set!("stream.states", c.states, parse_num);
    set!("stream.lambda", c.stream_lambda, parse_num);
    set!("stream.seed", c.stream_seed, parse_num);
    set!("data.seed", c.data_seed, parse_num);
    if let Some((l, v)) = get("app.kind") {
        c.app = match v {
            "omf" => AppKind::Omf,
            "omf_sub" => AppKind::OmfSub,
            "cpdl" => AppKind::Cpdl,
            other => return Err(at(l)(format!("unknown app kind '{other}'"))),
        };
    }
    set!("app.rank", c.rank, parse_num);
    set!("app.lambda", c.lambda, parse_num);
    set!("app.rows", c.rows, parse_num);
    set!("app.minibatch", c.minibatch, parse_num);
    if let Some((l, v)) = get("app.row_sample") {
        c.row_sample = Some(if v.contains('.') {
            RowSampler::Bernoulli(parse_num(v).map_err(at(l))?)
        } else {
            RowSampler::Fixed(parse_num(v).map_err(at(l))?)
        });
    }
    if let Some((l, v)) = get("app.tensor_shape") {
        c.tensor_shape = v.split('x').map(|s| parse_num::<usize>(s.trim())).collect::<std::result::Result<_, _>>().map_err(at(l))?;
    }
    set!("dict.lower", c.dict_lower, parse_num);
    set!("dict.upper", c.dict_upper, parse_num);
    set!("code.lower", c.code_lower, parse_num);
    set!("code.upper", c.code_upper, parse_num);
    if let Some((l, v)) = get("engine.mode") {
        c.mode = match v {
            "c1" | "C1" => Mode::C1,
            "c2" | "C2" => Mode::C2,
            other => return Err(at(l)(format!("unknown mode '{other}'"))),
        };
        if c.mode == Mode::C1 && get("engine.c_prime").is_none() {
            c.c_prime = f64::INFINITY;
        }
    }
    set!("engine.c_prime", c.c_prime, parse_num);
    set!("engine.n_iters", c.n_iters, parse_num);
    set!("engine.theta0", c.theta0, |v: &str| Ok::<_, String>(if v == "random" { Theta0::Random } else { Theta0::File(PathBuf::from(v)) }));
    set!("engine.eps_cap", c.eps_cap, parse_num);
    set!("engine.diag_interval", c.diag_interval, parse_num);
    set!("engine.full_until", c.full_until, parse_num);
    set!("engine.seed", c.seed, parse_num);
    set!("engine.rho", c.rho, |v: &str| parse_num::<f64>(v).map(Some));
    set!("engine.tol", c.tol, parse_num);
    if let Some((l, v)) = get("engine.blocks") {
        c.blocks = Some(match v {
            "full" => BlockKind::Full,
            "rows" => BlockKind::Rows,
            "columns" => BlockKind::Columns,
            "factors" => BlockKind::Factors,
            other => return Err(at(l)(format!("unknown block kind '{other}'"))),
        });
    }
    if let Some((l, v)) = get("engine.selection") {
        c.selection = match v {
            "cyclic" => Selection::Cyclic,
            "random" => Selection::UniformRandom,
            other => return Err(at(l)(format!("unknown selection '{other}'"))),
        };
    }
    c.validate()?;
    Ok(c)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    parse_config_str(&std::fs::read_to_string(path)?)
}

impl RunConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        RunConfig { seed, stream_seed: seed, ..self.clone() }
    }

    pub fn rho(&self) -> f64 {
        self.rho.unwrap_or(if self.mode == Mode::C1 { 1.0 } else { 0.0 })
    }

    /// Structural checks; schedule validity is reported separately by [`RunConfig::schedule_report`].
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.states == 0 || self.rank == 0 || self.minibatch == 0 || self.rows == 0 {
            return bad("states, rank, rows and minibatch must be positive");
        }
        if self.stream_kind == StreamKind::Cyclic && !(0.0..1.0).contains(&self.stream_lambda) {
            return bad("stream.lambda must lie in [0, 1)");
        }
        if !(self.dict_lower < self.dict_upper) || !(self.code_lower < self.code_upper) {
            return bad("box lower bounds must be below upper bounds");
        }
        if self.app == AppKind::Cpdl && (self.tensor_shape.is_empty() || self.tensor_shape.contains(&0)) {
            return bad("app.tensor_shape must list positive sizes");
        }
        if self.app == AppKind::OmfSub {
            self.row_sample.clone().unwrap_or(RowSampler::All).validate(self.rows)?;
        }
        match self.mode {
            Mode::C1 if self.c_prime.is_finite() => return bad("mode c1 runs without a trust region: engine.c_prime must be inf"),
            Mode::C1 if self.rho() <= 0.0 => return bad("mode c1 needs engine.rho > 0"),
            Mode::C2 if !(self.c_prime > 0.0 && self.c_prime.is_finite()) => return bad("mode c2 needs a finite engine.c_prime > 0"),
            _ => {}
        }
        if self.diag_interval == 0 {
            return bad("engine.diag_interval must be >= 1");
        }
        if !(self.tol > 0.0 && self.eps_cap > 0.0) {
            return bad("engine.tol and engine.eps_cap must be positive");
        }
        if let Some(b) = self.blocks {
            let ok = match self.app {
                AppKind::Omf => b != BlockKind::Factors,
                AppKind::OmfSub => false,
                AppKind::Cpdl => b == BlockKind::Factors || (b == BlockKind::Full && self.tensor_shape.len() == 1),
            };
            if !ok {
                return bad("engine.blocks does not fit app.kind");
            }
        }
        Ok(())
    }

    pub fn schedule_report(&self) -> ValidityReport {
        validate_schedule(&self.schedule)
    }

    /// Errors when the schedule falls outside the theory and the run was not explicitly allowed.
    pub fn check_schedule(&self, allow_flag: bool) -> Result<Vec<String>> {
        let rep = self.schedule_report();
        let warnings = rep.warnings();
        if !rep.theory_valid() && !(allow_flag || self.allow_invalid) {
            return Err(Error::Config(format!("weight schedule rejected: {}", warnings.join("; "))));
        }
        Ok(warnings)
    }

    pub fn transition_matrix(&self) -> DMatrix<f64> {
        match self.stream_kind {
            StreamKind::Iid => DMatrix::from_element(self.states, self.states, 1.0 / self.states as f64),
            StreamKind::Cyclic => cyclic_mixing_chain(self.states, self.stream_lambda),
        }
    }

    pub fn emissions(&self) -> Vec<DMatrix<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.data_seed);
        let rows = match self.app {
            AppKind::Cpdl => self.tensor_shape.iter().product(),
            _ => self.rows,
        };
        (0..self.states).map(|_| DMatrix::from_fn(rows, self.minibatch, |_, _| rng.gen::<f64>())).collect()
    }

    pub fn source(&self) -> Result<MarkovSource<DMatrix<f64>>> {
        let em = self.emissions();
        match self.stream_kind {
            StreamKind::Iid => make_iid(&vec![1.0 / self.states as f64; self.states], em, self.stream_seed),
            StreamKind::Cyclic => MarkovSource::new(self.transition_matrix(), em, 0, self.stream_seed),
        }
    }

    fn theta0(&self, p: usize) -> Result<Option<Vec<f64>>> {
        match &self.theta0 {
            Theta0::Random => Ok(None),
            Theta0::File(path) => {
                let text = std::fs::read_to_string(path)?;
                let v = text
                    .split(|c: char| c.is_whitespace() || c == ',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("theta0 file: {e}"))))
                    .collect::<Result<Vec<f64>>>()?;
                if v.len() != p {
                    return Err(Error::Config(format!("theta0 file holds {} values, expected {p}", v.len())));
                }
                Ok(Some(v))
            }
        }
    }

    fn engine_config(&self, pbox: &BoxSet, blocks: BlockSpec) -> EngineConfig {
        let mut e = EngineConfig::new(self.mode, self.schedule.clone(), blocks);
        e.c_prime = if self.c_prime.is_finite() { self.c_prime * pbox.diameter() } else { f64::INFINITY };
        e.tol = self.tol;
        e.eps_cap = self.eps_cap;
        e.rho = self.rho();
        e.seed = self.seed;
        e
    }

    fn diag(&self) -> DiagOptions {
        DiagOptions { interval: self.diag_interval, full_until: self.full_until }
    }
}

fn drive<P: Problem<Sample = DMatrix<f64>>>(cfg: &RunConfig, problem: P, mut ecfg: EngineConfig) -> Result<RunOutput> {
    ecfg.blocks.selection = cfg.selection;
    let theta0 = cfg.theta0(problem.dim())?;
    let mut engine = Sbmm::new(problem, ecfg, theta0)?;
    let mut source = cfg.source()?;
    run_with_diagnostics(&mut engine, &mut source, cfg.n_iters, cfg.diag())
}

/// Builds the problem, source and engine described by `cfg` and runs it.
pub fn execute(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (r, b) = (cfg.rank, cfg.minibatch);
    let code_box = BoxSet::uniform(r * b, cfg.code_lower, cfg.code_upper)?;
    match cfg.app {
        AppKind::Omf | AppKind::OmfSub => {
            let q = cfg.rows;
            let dict_box = BoxSet::uniform(q * r, cfg.dict_lower, cfg.dict_upper)?;
            let problem = OmfProblem::new(q, r, b, cfg.lambda, dict_box.clone(), code_box)?;
            let blocks = match cfg.blocks {
                Some(BlockKind::Rows) => BlockSpec::rows(q, r),
                Some(BlockKind::Columns) => BlockSpec::columns(q, r),
                _ => BlockSpec::full(q * r),
            };
            let mut ecfg = cfg.engine_config(&dict_box, blocks);
            if cfg.app == AppKind::OmfSub {
                ecfg.row_sampler = Some((cfg.row_sample.clone().unwrap_or(RowSampler::All), r));
            }
            drive(cfg, problem, ecfg)
        }
        AppKind::Cpdl => {
            let dims = cfg.tensor_shape.clone();
            let factor_box = BoxSet::uniform(dims.iter().sum::<usize>() * r, cfg.dict_lower, cfg.dict_upper)?;
            let problem = CpdlProblem::new(dims, r, b, cfg.lambda, factor_box.clone(), code_box)?;
            let blocks = BlockSpec::segments(&problem.segment_lengths());
            let ecfg = cfg.engine_config(&factor_box, blocks);
            drive(cfg, problem, ecfg)
        }
    }
}

/// Runs `cfg` once per seed, in parallel, capped by `SBMM_THREADS`.
pub fn sweep(cfg: &RunConfig, seeds: &[u64]) -> Vec<Result<RunOutput>> {
    par::with_threads(par::env_threads(), || par::map(seeds.len(), |i| execute(&cfg.with_seed(seeds[i]))))
}

/// Text report of π, λ and the TV decay of the configured chain.
pub fn mixing_report(cfg: &RunConfig) -> Result<String> {
    let rep = mixing_rate_of(&cfg.transition_matrix())?;
    let mut out = String::new();
    let pi: Vec<String> = rep.pi.iter().map(|v| format!("{v:.6}")).collect();
    writeln!(out, "pi = [{}]", pi.join(", ")).unwrap();
    writeln!(out, "lambda = {:.6}", rep.lambda).unwrap();
    writeln!(out, "{:>4}  {:>12}  {:>12}", "t", "tv", "lambda^t").unwrap();
    for (i, d) in rep.tv.iter().take(20).enumerate() {
        writeln!(out, "{:>4}  {:>12.4e}  {:>12.4e}", i + 1, d, rep.lambda.powi(i as i32 + 1)).unwrap();
    }
    Ok(out)
}

#[derive(Parser, Debug)]
#[command(name = "sbmm", about = "Stochastic block majorization-minimization runs and diagnostics")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run a configuration and write the diagnostics CSV.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run even if the weight schedule is outside the theory.
        #[arg(long)]
        allow_invalid: bool,
    },
    /// Parse and check a configuration.
    Validate { config: PathBuf },
    /// Print π, λ and the TV decay table of the configured chain.
    MixingReport { config: PathBuf },
    /// Fit the log-log slope of a CSV column against sum_w.
    RateCheck {
        csv: PathBuf,
        #[arg(long)]
        column: String,
        #[arg(long, default_value = "sum_w")]
        x: String,
    },
}

fn cli_run(cmd: Cmd, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Cmd::Run { config, seed, out: path, allow_invalid } => {
            let mut cfg = parse_config(&config)?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            for w in cfg.check_schedule(allow_invalid)? {
                eprintln!("warning: {w}");
            }
            let res = execute(&cfg)?;
            let csv = csv_string(&res.records);
            match path.or(cfg.output.clone()) {
                Some(p) => {
                    std::fs::write(&p, csv)?;
                    writeln!(out, "{}: {} steps, {} records -> {}", cfg.label, cfg.n_iters, res.records.len(), p.display())?;
                    writeln!(
                        out,
                        "invariant violations: {}, increment violations: {}",
                        res.invariants.violations(),
                        res.increments.violations
                    )?;
                }
                None => out.write_all(csv.as_bytes())?,
            }
        }
        Cmd::Validate { config } => {
            let cfg = parse_config(&config)?;
            let warnings = cfg.check_schedule(false)?;
            for w in &warnings {
                writeln!(out, "warning: {w}")?;
            }
            writeln!(out, "{}: ok", config.display())?;
        }
        Cmd::MixingReport { config } => {
            let cfg = parse_config(&config)?;
            out.write_all(mixing_report(&cfg)?.as_bytes())?;
        }
        Cmd::RateCheck { csv, column, x } => {
            let recs = parse_csv(&std::fs::read_to_string(&csv)?)?;
            let get = |name: &str| -> Result<Vec<f64>> {
                recs.iter().map(|r| r.column(name).ok_or_else(|| Error::Config(format!("no column '{name}'")))).collect()
            };
            let slope = loglog_slope(&get(&x)?, &get(&column)?).ok_or_else(|| Error::Config("not enough positive rows to fit".into()))?;
            writeln!(out, "slope {slope:.6}")?;
        }
    }
    Ok(())
}

/// Entry point of the `sbmm` binary; returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    cli_main_to(argv, &mut std::io::stdout())
}

pub fn cli_main_to<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match cli_run(cli.cmd, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
