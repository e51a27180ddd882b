//! Seeded Monte Carlo harness: signals, noise, event indicators, oracle-inequality coverage
//! and the tail lemmas behind them.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{active_set, build_graph, is_admissible, ActiveSet, DirectedGraph, GraphFamily, IncidenceMatrix};
use crate::projections::{project_nullspace, pseudoinverse, PseudoInverse};
use crate::rng::stream_rng;
use crate::solvers::{AnalysisSolver, SolverOptions};
use crate::tuning::{oracle_rhs, KappaSource, RhsOptions, TheoremId, TuningInputs};
use crate::{norm1, norm2, norm_n};

/// A piecewise-constant signal: one level per component of the graph minus `s0`,
/// or a total-variation budget spread over alternating levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub graph: GraphFamily,
    pub s0: Vec<usize>,
    pub levels: Option<Vec<f64>>,
    pub tv_budget: Option<f64>,
}

impl SignalSpec {
    /// f⁰ on the graph. With a budget C the pattern 0, 1, 0, 1, … over the components is
    /// rescaled so that ‖Df⁰‖₁ = C and then centred.
    pub fn signal(&self, graph: &DirectedGraph) -> Result<Vec<f64>> {
        let s0 = active_set(graph, &self.s0)?;
        let d = graph.incidence();
        if !is_admissible(&d, &s0) {
            return Err(Error::Inadmissible);
        }
        let r = s0.r_s();
        let labels = s0.labels();
        match (&self.levels, self.tv_budget) {
            (Some(levels), None) => {
                if levels.len() != r {
                    return Err(Error::Dimension { expected: r, got: levels.len() });
                }
                if levels.iter().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidParameter("signal levels must be finite".into()));
                }
                Ok(labels.iter().map(|&l| levels[l]).collect())
            }
            (None, Some(budget)) => {
                if !(budget >= 0.0) || !budget.is_finite() {
                    return Err(Error::InvalidParameter(format!("tv_budget must be finite and >= 0, got {budget}")));
                }
                let mut f: Vec<f64> = labels.iter().map(|&l| (l % 2) as f64).collect();
                let tv = norm1(&d.apply(&f));
                if tv == 0.0 {
                    return Ok(vec![0.0; graph.n()]);
                }
                let mean = f.iter().sum::<f64>() / f.len() as f64;
                for v in &mut f {
                    *v = (*v - mean) * budget / tv;
                }
                Ok(f)
            }
            _ => Err(Error::InvalidParameter("signal needs exactly one of levels or tv_budget".into())),
        }
    }
}

/// Noise for trial `trial` under master seed `seed`: ε_i = σ·z_i with z drawn from the
/// stream keyed by (seed, trial).
pub fn noise(n: usize, sigma: f64, seed: u64, trial: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, trial);
    (0..n).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// (f⁰, Y, ε) for one trial.
pub fn generate_trial(spec: &SignalSpec, sigma: f64, seed: u64, trial: u64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    let graph = build_graph(&spec.graph)?;
    let f0 = spec.signal(&graph)?;
    let eps = noise(graph.n(), sigma, seed, trial);
    let y = f0.iter().zip(&eps).map(|(a, b)| a + b).collect();
    Ok((f0, y, eps))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventParams {
    pub sigma: f64,
    /// λ entering the set 𝒯
    pub lambda: f64,
    /// R entering ℛ
    pub r: f64,
    pub a: f64,
    pub x: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub struct EventFlags {
    pub t_holds: bool,
    pub x_holds: bool,
    pub a_holds: bool,
    pub aprime_holds: bool,
    pub r_holds: bool,
}

/// Precomputed pseudoinverse columns for repeated event evaluation.
pub struct EventContext {
    n: usize,
    s: ActiveSet,
    pinv: Option<PseudoInverse>,
    /// ‖d_i⁺‖_n per free row
    col_norms_n: Vec<f64>,
    pub gamma: f64,
}

impl EventContext {
    pub fn new(d: &IncidenceMatrix, s: &ActiveSet) -> Result<Self> {
        if !is_admissible(d, s) {
            return Err(Error::Inadmissible);
        }
        let n = d.n();
        let pinv = if s.free_rows().is_empty() { None } else { Some(pseudoinverse(d, s)?) };
        let col_norms_n: Vec<f64> = match &pinv {
            Some(p) => (0..p.ncols()).map(|j| p.column_norm(j) / (n as f64).sqrt()).collect(),
            None => Vec::new(),
        };
        let gamma = col_norms_n.iter().copied().fold(0.0, f64::max);
        Ok(Self { n, s: s.clone(), pinv, col_norms_n, gamma })
    }

    /// max over free rows of |ε′d_i⁺|/(n‖d_i⁺‖_n); R̂ is this divided by ‖ε‖_n.
    fn max_scaled_correlation(&self, eps: &[f64]) -> f64 {
        let Some(p) = &self.pinv else { return 0.0 };
        let nf = self.n as f64;
        p.transpose_apply(eps)
            .iter()
            .zip(&self.col_norms_n)
            .filter(|(_, &w)| w > 0.0)
            .map(|(c, w)| c.abs() / (nf * w))
            .fold(0.0, f64::max)
    }

    pub fn flags(&self, eps: &[f64], p: &EventParams) -> Result<EventFlags> {
        if eps.len() != self.n {
            return Err(Error::Dimension { expected: self.n, got: eps.len() });
        }
        let nf = self.n as f64;
        let r = self.s.r_s() as f64;
        let sig2 = p.sigma * p.sigma;
        let corr = self.max_scaled_correlation(eps);
        // |ε′d_i⁺|/n ≤ λ‖d_i⁺‖_n/γ for every free row
        let t_holds = self.gamma == 0.0 || corr * self.gamma <= p.lambda;
        let proj = project_nullspace(&self.s, eps);
        let proj_sq = proj.iter().map(|v| v * v).sum::<f64>();
        let total_sq = eps.iter().map(|v| v * v).sum::<f64>();
        let anti_sq = (total_sq - proj_sq).max(0.0);
        let x_holds = (proj_sq / nf).sqrt() <= (sig2 / nf).sqrt() * (r.sqrt() + (2.0 * p.x).sqrt());
        let chi_r = proj_sq / sig2;
        let chi_rest = anti_sq / sig2;
        let rest = nf - r;
        let a_holds = chi_r - r >= -2.0 * (p.a * r).sqrt()
            && chi_r - r <= 2.0 * (p.a * r).sqrt() + 2.0 * p.a
            && chi_rest >= rest - 2.0 * (p.a * rest).sqrt();
        let aprime_holds = a_holds && chi_rest <= rest + 2.0 * (p.a * rest).sqrt() + 2.0 * p.a;
        let eps_norm = norm_n(eps);
        let r_hat = if eps_norm > 0.0 { corr / eps_norm } else { 0.0 };
        let r_holds = self.gamma * r_hat <= p.r;
        Ok(EventFlags { t_holds, x_holds, a_holds, aprime_holds, r_holds })
    }
}

/// Indicators of 𝒯, 𝒳, 𝒜, 𝒜′ and ℛ for the realized noise.
pub fn event_flags(eps: &[f64], d: &IncidenceMatrix, s: &ActiveSet, params: &EventParams) -> Result<EventFlags> {
    EventContext::new(d, s)?.flags(eps, params)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbParams {
    pub x: f64,
    pub t: f64,
    pub a: f64,
    pub eta: f64,
}

impl Default for ProbParams {
    fn default() -> Self {
        Self { x: 2.0, t: 2.0, a: 2.0, eta: 0.5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalConfig {
    /// True active set; defaults to the oracle set S.
    #[serde(rename = "S0", default, skip_serializing_if = "Option::is_none")]
    pub s0: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tv_budget: Option<f64>,
}

fn default_trials() -> usize {
    1000
}

fn default_sigma() -> f64 {
    1.0
}

fn default_theorems() -> Vec<TheoremId> {
    vec![TheoremId::PlainFast, TheoremId::PlainSlow]
}

fn experiment_solver() -> SolverOptions {
    SolverOptions { certify: false, ..SolverOptions::default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub graph: GraphFamily,
    #[serde(rename = "S", default)]
    pub s: Vec<usize>,
    pub signal: SignalConfig,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub params: ProbParams,
    #[serde(default = "default_theorems")]
    pub theorems: Vec<TheoremId>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// λ for plain results; theorem-minimal when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// λ₀ for square-root results; theorem-minimal when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda0: Option<f64>,
    #[serde(default)]
    pub kappa: KappaSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_constant: Option<f64>,
    #[serde(default = "experiment_solver")]
    pub solver: SolverOptions,
}

impl ExperimentConfig {
    pub fn new(graph: GraphFamily, s: Vec<usize>, signal: SignalConfig) -> Self {
        Self {
            graph,
            s,
            signal,
            sigma: default_sigma(),
            params: ProbParams::default(),
            theorems: default_theorems(),
            trials: default_trials(),
            seed: 0,
            lambda: None,
            lambda0: None,
            kappa: KappaSource::default(),
            grid_constant: None,
            solver: experiment_solver(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremOutcome {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub seed: u64,
    pub mse_plain: Option<f64>,
    pub mse_sqrt: Option<f64>,
    pub sigma_hat: Option<f64>,
    /// ‖ε̂‖_n/‖ε‖_n with ε̂ = Y − f̂ of the square-root estimator
    pub ratio: Option<f64>,
    pub flags: EventFlags,
    pub nonoverfit_holds: Option<bool>,
    pub overfit: Option<bool>,
    pub converged: bool,
    pub outcomes: Vec<TheoremOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub q10: f64,
    pub median: f64,
    pub q90: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self { mean: v.iter().sum::<f64>() / v.len() as f64, q10: q(0.1), median: q(0.5), q90: q(0.9) })
    }
}

/// Empirical frequency against a floor, with the binomial SE evaluated at the floor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub fraction: f64,
    pub floor: f64,
    pub se: f64,
    pub pass: bool,
}

impl Coverage {
    pub fn new(hits: usize, trials: usize, floor: f64) -> Self {
        let fraction = hits as f64 / trials as f64;
        let p = floor.clamp(0.0, 1.0);
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        Self { fraction, floor, se, pass: fraction >= floor - 3.0 * se }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremSummary {
    pub theorem: TheoremId,
    pub tuning: f64,
    pub tuning_min: f64,
    pub rhs: f64,
    pub lhs_penalty_coef: f64,
    pub coverage: Coverage,
    pub mse: Stats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub lambda: f64,
    pub r: f64,
    #[serde(rename = "T")]
    pub t: Coverage,
    #[serde(rename = "X")]
    pub x: Coverage,
    #[serde(rename = "A")]
    pub a: Coverage,
    #[serde(rename = "Aprime")]
    pub aprime: Coverage,
    #[serde(rename = "R")]
    pub r_event: Coverage,
    /// trials where 𝒜′ held but 𝒜 did not (always 0)
    pub nesting_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub trials: usize,
    pub seed: u64,
    pub n: usize,
    #[serde(rename = "r_S")]
    pub r_s: usize,
    pub gamma: f64,
    pub tv_f0: f64,
    pub theorems: Vec<TheoremSummary>,
    pub events: EventSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nonoverfit: Option<Coverage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_sigma_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overfit_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse_plain: Option<Stats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse_sqrt: Option<Stats>,
    pub nonconverged: usize,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub summary: ExperimentSummary,
    pub records: Vec<TrialRecord>,
    pub theorems: Vec<TheoremId>,
}

struct Plan {
    theorem: TheoremId,
    sqrt: bool,
    tuning: f64,
    rhs: f64,
    lhs_coef: f64,
    tuning_min: f64,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Runs every trial (in parallel) and aggregates in trial order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    if config.trials == 0 {
        return Err(Error::InvalidParameter("trials must be positive".into()));
    }
    if config.theorems.is_empty() {
        return Err(Error::InvalidParameter("at least one theorem id is required".into()));
    }
    if !(config.sigma > 0.0) || !config.sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {}", config.sigma)));
    }
    let graph = build_graph(&config.graph)?;
    let d = graph.incidence();
    let s = active_set(&graph, &config.s)?;
    if !is_admissible(&d, &s) {
        return Err(Error::Inadmissible);
    }
    let spec = SignalSpec {
        graph: config.graph.clone(),
        s0: config.signal.s0.clone().unwrap_or_else(|| config.s.clone()),
        levels: config.signal.levels.clone(),
        tv_budget: config.signal.tv_budget,
    };
    let f0 = spec.signal(&graph)?;
    let n = graph.n();
    let nf = n as f64;
    let tv_f0 = norm1(&d.apply(&f0));
    let ctx = EventContext::new(&d, &s)?;
    let p = config.params;
    let inputs = TuningInputs {
        n,
        r_s: s.r_s(),
        gamma: ctx.gamma,
        sigma: config.sigma,
        t: p.t,
        x: p.x,
        a: p.a,
        eta: p.eta,
        norm_df0_1: Some(tv_f0),
    };

    let mut plans = Vec::new();
    for &th in &config.theorems {
        let sqrt = th.is_sqrt();
        let opts = RhsOptions {
            tuning: if sqrt { config.lambda0 } else { config.lambda },
            grid_constant: config.grid_constant,
        };
        let out = oracle_rhs(th, &inputs, &f0, &f0, &d, &s, &config.kappa, &opts)?;
        plans.push(Plan {
            theorem: th,
            sqrt,
            tuning: out.tuning,
            rhs: out.bound,
            lhs_coef: out.lhs_penalty_coef,
            tuning_min: out.tuning_min,
        });
    }
    // distinct (estimator, tuning) pairs are solved once per trial
    let mut solves: Vec<(bool, f64)> = Vec::new();
    let plan_solve: Vec<usize> = plans
        .iter()
        .map(|pl| match solves.iter().position(|&(q, v)| q == pl.sqrt && v.to_bits() == pl.tuning.to_bits()) {
            Some(i) => i,
            None => {
                solves.push((pl.sqrt, pl.tuning));
                solves.len() - 1
            }
        })
        .collect();
    let first_plain = solves.iter().position(|s| !s.0);
    let first_sqrt = solves.iter().position(|s| s.0);

    let log_free = (2.0 * (n - s.r_s()) as f64).ln();
    let event_params = EventParams {
        sigma: config.sigma,
        lambda: ctx.gamma * config.sigma * (2.0 * log_free / nf + 2.0 * p.t / nf).sqrt(),
        r: ctx.gamma * ((2.0 * log_free + 2.0 * p.t) / (nf - 1.0)).sqrt(),
        a: p.a,
        x: p.x,
    };
    let active_rows = s.active_rows();

    let solver = AnalysisSolver::new(&d);
    let records: Vec<TrialRecord> = (0..config.trials as u64)
        .into_par_iter()
        .map(|trial| -> Result<TrialRecord> {
            let eps = noise(n, config.sigma, config.seed, trial);
            let y: Vec<f64> = f0.iter().zip(&eps).map(|(a, b)| a + b).collect();
            let flags = ctx.flags(&eps, &event_params)?;
            let mut converged = true;
            let mut fits = Vec::with_capacity(solves.len());
            for &(sqrt, tuning) in &solves {
                let res = if sqrt { solver.solve_sqrt(&y, tuning, &config.solver)? } else { solver.solve(&y, tuning, &config.solver)? };
                converged &= res.converged;
                fits.push(res);
            }
            let outcomes = plans
                .iter()
                .zip(&plan_solve)
                .map(|(pl, &k)| {
                    let fh = &fits[k].f_hat;
                    let mut lhs = mse(fh, &f0);
                    if pl.lhs_coef > 0.0 {
                        let df = d.apply(fh);
                        lhs += pl.lhs_coef * active_rows.iter().map(|&i| df[i].abs()).sum::<f64>();
                    }
                    TheoremOutcome { lhs, rhs: pl.rhs, holds: lhs <= pl.rhs }
                })
                .collect();
            let (sigma_hat, ratio, nonoverfit, overfit) = match first_sqrt {
                Some(k) => {
                    let res = &fits[k];
                    let resid: Vec<f64> = y.iter().zip(&res.f_hat).map(|(a, b)| a - b).collect();
                    let ratio = norm2(&resid) / norm2(&eps);
                    (res.sigma_hat, Some(ratio), Some((ratio - 1.0).abs() <= p.eta), res.overfit)
                }
                None => (None, None, None, None),
            };
            Ok(TrialRecord {
                trial,
                seed: config.seed,
                mse_plain: first_plain.map(|k| mse(&fits[k].f_hat, &f0)),
                mse_sqrt: first_sqrt.map(|k| mse(&fits[k].f_hat, &f0)),
                sigma_hat,
                ratio,
                flags,
                nonoverfit_holds: nonoverfit,
                overfit,
                converged,
                outcomes,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let trials = records.len();
    let count = |f: &dyn Fn(&TrialRecord) -> bool| records.iter().filter(|r| f(r)).count();
    let theorems = plans
        .iter()
        .enumerate()
        .map(|(i, pl)| {
            let hits = count(&|r| r.outcomes[i].holds);
            let floor = pl_floor(pl.sqrt, &p);
            let lhs: Vec<f64> = records.iter().map(|r| r.outcomes[i].lhs).collect();
            TheoremSummary {
                theorem: pl.theorem,
                tuning: pl.tuning,
                tuning_min: pl.tuning_min,
                rhs: pl.rhs,
                lhs_penalty_coef: pl.lhs_coef,
                coverage: Coverage::new(hits, trials, floor),
                mse: Stats::of(&lhs).expect("trials > 0"),
            }
        })
        .collect();
    let e = |v: f64| (-v).exp();
    let events = EventSummary {
        lambda: event_params.lambda,
        r: event_params.r,
        t: Coverage::new(count(&|r| r.flags.t_holds), trials, 1.0 - e(p.t)),
        x: Coverage::new(count(&|r| r.flags.x_holds), trials, 1.0 - e(p.x)),
        a: Coverage::new(count(&|r| r.flags.a_holds), trials, 1.0 - 3.0 * e(p.a)),
        aprime: Coverage::new(count(&|r| r.flags.aprime_holds), trials, 1.0 - 4.0 * e(p.a)),
        r_event: Coverage::new(count(&|r| r.flags.r_holds), trials, 1.0 - e(p.t)),
        nesting_violations: count(&|r| r.flags.aprime_holds && !r.flags.a_holds),
    };
    let collect = |f: &dyn Fn(&TrialRecord) -> Option<f64>| records.iter().filter_map(f).collect::<Vec<f64>>();
    let sig = collect(&|r| r.sigma_hat);
    let summary = ExperimentSummary {
        trials,
        seed: config.seed,
        n,
        r_s: s.r_s(),
        gamma: ctx.gamma,
        tv_f0,
        theorems,
        events,
        nonoverfit: first_sqrt
            .map(|_| Coverage::new(count(&|r| r.nonoverfit_holds == Some(true)), trials, 1.0 - 3.0 * e(p.a) - e(p.t))),
        mean_sigma_hat: (!sig.is_empty()).then(|| sig.iter().sum::<f64>() / sig.len() as f64),
        overfit_rate: first_sqrt.map(|_| count(&|r| r.overfit == Some(true)) as f64 / trials as f64),
        mse_plain: Stats::of(&collect(&|r| r.mse_plain)),
        mse_sqrt: Stats::of(&collect(&|r| r.mse_sqrt)),
        nonconverged: count(&|r| !r.converged),
    };
    Ok(ExperimentOutput { summary, records, theorems: config.theorems.clone() })
}

fn pl_floor(sqrt: bool, p: &ProbParams) -> f64 {
    if sqrt {
        1.0 - 4.0 * (-p.a).exp() - (-p.t).exp()
    } else {
        1.0 - (-p.x).exp() - (-p.t).exp()
    }
}

/// 17 significant digits, so that rendered output is exact.
pub fn format_full(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    format!("{x:.16e}")
}

/// Column order of the trial CSV.
pub fn csv_header(theorems: &[TheoremId]) -> Vec<String> {
    let mut cols: Vec<String> = [
        "trial", "seed", "mse_plain", "mse_sqrt", "sigma_hat", "ratio", "T", "X", "A", "Aprime", "R", "nonoverfit", "overfit",
        "converged",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for th in theorems {
        cols.push(format!("lhs_{th}"));
        cols.push(format!("rhs_{th}"));
        cols.push(format!("holds_{th}"));
    }
    cols
}

pub fn write_csv<W: Write>(out: &ExperimentOutput, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(csv_header(&out.theorems))?;
    let opt = |v: Option<f64>| v.map(format_full).unwrap_or_default();
    let flag = |b: bool| if b { "1".to_string() } else { "0".to_string() };
    let optflag = |b: Option<bool>| b.map(flag).unwrap_or_default();
    for r in &out.records {
        let mut row = vec![
            r.trial.to_string(),
            r.seed.to_string(),
            opt(r.mse_plain),
            opt(r.mse_sqrt),
            opt(r.sigma_hat),
            opt(r.ratio),
            flag(r.flags.t_holds),
            flag(r.flags.x_holds),
            flag(r.flags.a_holds),
            flag(r.flags.aprime_holds),
            flag(r.flags.r_holds),
            optflag(r.nonoverfit_holds),
            optflag(r.overfit),
            flag(r.converged),
        ];
        for o in &r.outcomes {
            row.push(format_full(o.lhs));
            row.push(format_full(o.rhs));
            row.push(flag(o.holds));
        }
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LemmaCheckConfig {
    pub samples: usize,
    pub seed: u64,
    pub max_p: Vec<usize>,
    pub max_t: Vec<f64>,
    pub chi_d: Vec<usize>,
    pub chi_x: Vec<f64>,
    pub ratio_n: Vec<usize>,
    pub ratio_t: Vec<f64>,
}

impl Default for LemmaCheckConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            seed: 0,
            max_p: vec![1, 10, 100],
            max_t: vec![0.5, 1.0, 2.0],
            chi_d: vec![2, 5, 10],
            chi_x: vec![0.5, 1.0, 2.0],
            ratio_n: vec![10, 50, 200],
            ratio_t: vec![0.5, 1.0, 2.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TailLemma {
    /// P(max_j |V_j| ≥ √(2log(2p) + 2t)) ≤ e^{−t}
    MaxGaussian,
    /// P(X ≥ d + 2√(dx) + 2x) ≤ e^{−x}
    ChiSquareUpper,
    /// P(X ≤ d − 2√(dx)) ≤ e^{−x}
    ChiSquareLower,
    /// P(u′ε/(n‖ε‖_n) > √(2t/(n−1))) ≤ 2e^{−t}
    Ratio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub lemma: TailLemma,
    /// p, d or n
    pub size: usize,
    /// t or x
    pub level: f64,
    pub threshold: f64,
    pub empirical: f64,
    pub bound: f64,
    pub se: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaSummary {
    pub samples: usize,
    pub seed: u64,
    pub checks: Vec<LemmaCheck>,
    pub all_pass: bool,
}

fn tail_check(lemma: TailLemma, size: usize, level: f64, samples: usize, seed: u64, stream: u64) -> Result<LemmaCheck> {
    let sf = size as f64;
    let (threshold, bound) = match lemma {
        TailLemma::MaxGaussian => ((2.0 * (2.0 * sf).ln() + 2.0 * level).sqrt(), (-level).exp()),
        TailLemma::ChiSquareUpper => (sf + 2.0 * (sf * level).sqrt() + 2.0 * level, (-level).exp()),
        TailLemma::ChiSquareLower => (sf - 2.0 * (sf * level).sqrt(), (-level).exp()),
        TailLemma::Ratio => {
            if size < 2 || level >= (sf - 1.0) / 2.0 {
                return Err(Error::InvalidParameter(format!("ratio lemma needs n >= 2 and t < (n-1)/2, got n={size}, t={level}")));
            }
            ((2.0 * level / (sf - 1.0)).sqrt(), 2.0 * (-level).exp())
        }
    };
    if size == 0 || !(level > 0.0) {
        return Err(Error::InvalidParameter(format!("lemma check needs size >= 1 and level > 0, got {size}, {level}")));
    }
    let mut rng = stream_rng(seed, stream);
    let mut z = vec![0.0f64; size];
    let mut hits = 0usize;
    for _ in 0..samples {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let hit = match lemma {
            TailLemma::MaxGaussian => z.iter().fold(0.0f64, |m, v| m.max(v.abs())) >= threshold,
            TailLemma::ChiSquareUpper => z.iter().map(|v| v * v).sum::<f64>() >= threshold,
            TailLemma::ChiSquareLower => z.iter().map(|v| v * v).sum::<f64>() <= threshold,
            TailLemma::Ratio => {
                // u = √n·e₁, so ‖u‖_n = 1
                let stat = sf.sqrt() * z[0] / (sf * norm_n(&z));
                stat > threshold
            }
        };
        hits += hit as usize;
    }
    let empirical = hits as f64 / samples as f64;
    let b = bound.min(1.0);
    let se = (b * (1.0 - b) / samples as f64).sqrt();
    Ok(LemmaCheck { lemma, size, level, threshold, empirical, bound, se, pass: empirical <= bound + 3.0 * se })
}

/// Empirical tail frequencies for the max-Gaussian, chi-square and ratio lemmas.
pub fn verify_probability_lemmas(config: &LemmaCheckConfig) -> Result<LemmaSummary> {
    if config.samples < 10_000 {
        return Err(Error::InvalidParameter(format!("need at least 10000 samples, got {}", config.samples)));
    }
    let mut jobs = Vec::new();
    for &p in &config.max_p {
        for &t in &config.max_t {
            jobs.push((TailLemma::MaxGaussian, p, t));
        }
    }
    for &d in &config.chi_d {
        for &x in &config.chi_x {
            jobs.push((TailLemma::ChiSquareUpper, d, x));
            jobs.push((TailLemma::ChiSquareLower, d, x));
        }
    }
    for &n in &config.ratio_n {
        for &t in &config.ratio_t {
            jobs.push((TailLemma::Ratio, n, t));
        }
    }
    let checks = jobs
        .par_iter()
        .enumerate()
        .map(|(k, &(lemma, size, level))| tail_check(lemma, size, level, config.samples, config.seed, k as u64))
        .collect::<Result<Vec<_>>>()?;
    let all_pass = checks.iter().all(|c| c.pass);
    Ok(LemmaSummary { samples: config.samples, seed: config.seed, checks, all_pass })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateSweepConfig {
    pub sizes: Vec<usize>,
    pub trials: usize,
    pub tv: f64,
    pub sigma: f64,
    pub t: f64,
    pub seed: u64,
}

impl Default for RateSweepConfig {
    fn default() -> Self {
        Self { sizes: (6..=12).map(|k| 1usize << k).collect(), trials: 50, tv: 1.0, sigma: 1.0, t: 2.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n: usize,
    #[serde(rename = "r_S")]
    pub r_s: usize,
    pub lambda: f64,
    pub median_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSweep {
    pub points: Vec<RatePoint>,
    /// least-squares slope of log median MSE against log n
    pub slope: f64,
}

/// r_S ≍ n^{1/3}(log 2n + t)^{1/3}, at least 2.
pub fn rate_pieces(n: usize, t: f64) -> usize {
    let nf = n as f64;
    ((nf * ((2.0 * nf).ln() + t)).cbrt().round() as usize).max(2)
}

/// Path graphs with the ramp f⁰_i = C(i−1)/(n−1), so ‖Df⁰‖₁ = C for every n, estimated with the
/// equal-size slow-rate tuning λ = σ√((log 2n + t)/(r_S n)), r_S ≍ n^{1/3}(log 2n + t)^{1/3}.
pub fn rate_sweep(config: &RateSweepConfig) -> Result<RateSweep> {
    if config.sizes.len() < 2 || config.trials == 0 {
        return Err(Error::InvalidParameter("rate sweep needs two sizes and at least one trial".into()));
    }
    if !(config.sigma > 0.0) || !(config.t > 0.0) {
        return Err(Error::InvalidParameter("rate sweep needs sigma > 0 and t > 0".into()));
    }
    let mut points = Vec::new();
    for (idx, &n) in config.sizes.iter().enumerate() {
        if n < 4 {
            return Err(Error::InvalidParameter(format!("path of length {n} too short")));
        }
        let pieces = rate_pieces(n, config.t).min(n - 1);
        let graph = build_graph(&GraphFamily::Path { n })?;
        let d = graph.incidence();
        let f0: Vec<f64> = (0..n).map(|i| config.tv * i as f64 / (n - 1) as f64).collect();
        let nf = n as f64;
        let lambda = config.sigma * (((2.0 * nf).ln() + config.t) / (pieces as f64 * nf)).sqrt();
        let solver = AnalysisSolver::new(&d);
        let opts = experiment_solver();
        let mses = (0..config.trials as u64)
            .into_par_iter()
            .map(|trial| {
                let eps = noise(n, config.sigma, config.seed, ((idx as u64) << 32) | trial);
                let y: Vec<f64> = f0.iter().zip(&eps).map(|(a, b)| a + b).collect();
                solver.solve(&y, lambda, &opts).map(|r| mse(&r.f_hat, &f0))
            })
            .collect::<Result<Vec<f64>>>()?;
        let median = Stats::of(&mses).expect("trials > 0").median;
        points.push(RatePoint { n, r_s: pieces, lambda, median_mse: median });
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.median_mse.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(RateSweep { points, slope: sxy / sxx })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> DirectedGraph {
        build_graph(&GraphFamily::Path { n }).unwrap()
    }

    #[test]
    fn signals() {
        let spec = SignalSpec { graph: GraphFamily::Path { n: 100 }, s0: vec![50], levels: Some(vec![0.0, -1.5]), tv_budget: None };
        let g = path(100);
        let f = spec.signal(&g).unwrap();
        let df = g.incidence().apply(&f);
        assert_eq!(norm1(&df), 1.5);
        assert!(df.iter().enumerate().all(|(i, v)| i == 49 || *v == 0.0));
        let flat = SignalSpec { levels: Some(vec![2.0, 2.0]), ..spec.clone() };
        assert_eq!(norm1(&g.incidence().apply(&flat.signal(&g).unwrap())), 0.0);
        let budget = SignalSpec { s0: vec![20, 40, 60], levels: None, tv_budget: Some(0.7), ..spec.clone() };
        let f = budget.signal(&g).unwrap();
        assert!((norm1(&g.incidence().apply(&f)) - 0.7).abs() < 1e-12);
        assert!(f.iter().sum::<f64>().abs() < 1e-12);
        assert!(SignalSpec { levels: Some(vec![1.0]), ..spec.clone() }.signal(&g).is_err());
        assert!(SignalSpec { tv_budget: Some(1.0), ..spec }.signal(&g).is_err());
    }

    #[test]
    fn noise_moments_and_reproducibility() {
        let e = noise(100_000, 2.0, 7, 3);
        let n = e.len() as f64;
        let mean = e.iter().sum::<f64>() / n;
        let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // SE of the mean is σ/√n, of the variance σ²√(2/(n−1))
        assert!(mean.abs() <= 3.0 * 2.0 / n.sqrt());
        assert!((var - 4.0).abs() <= 3.0 * 4.0 * (2.0 / (n - 1.0)).sqrt());
        assert_eq!(e, noise(100_000, 2.0, 7, 3));
        assert_ne!(e[..10], noise(10, 2.0, 7, 4)[..]);
    }

    #[test]
    fn zero_noise_flags() {
        let g = path(30);
        let d = g.incidence();
        let s = active_set(&g, &[10]).unwrap();
        let p = EventParams { sigma: 1.0, lambda: 0.1, r: 0.1, a: 1.0, x: 1.0 };
        let f = event_flags(&vec![0.0; 30], &d, &s, &p).unwrap();
        assert!(f.t_holds && f.x_holds && f.r_holds);
        assert!(!f.a_holds && !f.aprime_holds);
    }

    /// Dense recomputation of every event for random noise.
    #[test]
    fn flags_match_dense_definitions() {
        let g = build_graph(&"grid:4x5".parse().unwrap()).unwrap();
        let d = g.incidence();
        let s = active_set(&g, &[1, 3, 5, 7, 9, 11, 13, 15]).unwrap();
        assert!(is_admissible(&d, &s));
        let free: Vec<usize> = s.free_rows().to_vec();
        let pinv = crate::linalg::pinv(&d.rows_dense(&free));
        let n = 20.0f64;
        let r = s.r_s() as f64;
        let gamma = (0..free.len()).map(|j| pinv.column(j).norm() / n.sqrt()).fold(0.0, f64::max);
        let ctx = EventContext::new(&d, &s).unwrap();
        assert!((ctx.gamma - gamma).abs() < 1e-12);
        for trial in 0..200 {
            let eps = noise(20, 1.3, 11, trial);
            let p = EventParams { sigma: 1.3, lambda: 0.25, r: 0.3, a: 0.7, x: 1.1 };
            let got = ctx.flags(&eps, &p).unwrap();
            let e = nalgebra::DVector::from_column_slice(&eps);
            let en = e.norm() / n.sqrt();
            let mut t = true;
            let mut rhat: f64 = 0.0;
            for j in 0..free.len() {
                let col = pinv.column(j);
                let c = e.dot(&col).abs();
                let cn = col.norm() / n.sqrt();
                t &= c / n <= p.lambda * cn / gamma;
                rhat = rhat.max(c / (en * cn * n));
            }
            let dm = d.rows_dense(&free);
            let proj = (nalgebra::DMatrix::<f64>::identity(20, 20) - crate::linalg::pinv(&dm) * &dm) * &e;
            let psq = proj.norm_squared() / 1.69;
            let asq = (e.norm_squared() - proj.norm_squared()) / 1.69;
            let x = (proj.norm_squared() / n).sqrt() <= (1.69 / n).sqrt() * (r.sqrt() + (2.2f64).sqrt());
            let a = psq - r >= -2.0 * (0.7 * r).sqrt()
                && psq - r <= 2.0 * (0.7 * r).sqrt() + 1.4
                && asq >= (n - r) - 2.0 * (0.7 * (n - r)).sqrt();
            let ap = a && asq <= (n - r) + 2.0 * (0.7 * (n - r)).sqrt() + 1.4;
            let want = EventFlags { t_holds: t, x_holds: x, a_holds: a, aprime_holds: ap, r_holds: gamma * rhat <= 0.3 };
            assert_eq!(got, want, "trial {trial}");
        }
    }

    #[test]
    fn coverage_and_stats() {
        let c = Coverage::new(700, 1000, 0.7293);
        assert!(c.pass);
        assert!(!Coverage::new(600, 1000, 0.7293).pass);
        let s = Stats::of(&[3.0, 1.0, 2.0, 4.0, 5.0]).unwrap();
        assert_eq!((s.mean, s.median), (3.0, 3.0));
        assert!((s.q10 - 1.4).abs() < 1e-12);
    }

    #[test]
    fn small_experiment_is_deterministic() {
        let mut cfg = ExperimentConfig::new(
            GraphFamily::Path { n: 64 },
            vec![32],
            SignalConfig { levels: Some(vec![0.0, 1.0]), ..Default::default() },
        );
        cfg.trials = 40;
        cfg.seed = 5;
        cfg.theorems = vec![TheoremId::PlainFast, TheoremId::PlainSlow, TheoremId::TreeCycleSlow];
        let a = run_experiment(&cfg).unwrap();
        let b = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| run_experiment(&cfg).unwrap());
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        write_csv(&a, &mut ca).unwrap();
        write_csv(&b, &mut cb).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.summary.events.nesting_violations, 0);
        assert_eq!(a.summary.theorems.len(), 3);
        let text = String::from_utf8(ca).unwrap();
        assert_eq!(text.lines().count(), 41);
        assert!(text.starts_with("trial,seed,mse_plain,mse_sqrt,sigma_hat,ratio,T,X,A,Aprime,R,nonoverfit,overfit,converged,lhs_plain-fast"));
    }

    #[test]
    fn lemma_examples() {
        let c = tail_check(TailLemma::ChiSquareUpper, 5, 1.0, 20_000, 1, 0).unwrap();
        assert!((c.threshold - (7.0 + 2.0 * 5f64.sqrt())).abs() < 1e-12);
        assert!((c.bound - (-1.0f64).exp()).abs() < 1e-15);
        assert!(c.pass);
        let m = tail_check(TailLemma::MaxGaussian, 1, 2.0, 20_000, 1, 1).unwrap();
        assert!((m.threshold - (2.0 * 2f64.ln() + 4.0).sqrt()).abs() < 1e-15);
        assert!(tail_check(TailLemma::Ratio, 10, 5.0, 20_000, 1, 2).is_err());
        assert!(verify_probability_lemmas(&LemmaCheckConfig { samples: 100, ..Default::default() }).is_err());
    }

    #[test]
    fn format_is_exact() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 12345.678] {
            assert_eq!(format_full(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(format_full(0.5), "5.0000000000000000e-1");
    }
}
