//! Tuning parameters, Assumption 1 checks and oracle-inequality right-hand sides.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::compatibility::{kappa_bound_cycle, kappa_bound_path, sup_ratio_numeric, KappaSearch};
use crate::error::{Error, Result};
use crate::graph::{build_graph, is_admissible, ActiveSet, GraphFamily, IncidenceMatrix};
use crate::norm1;
use crate::projections::theory_report;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningInputs {
    pub n: usize,
    #[serde(rename = "r_S")]
    pub r_s: usize,
    pub gamma: f64,
    pub sigma: f64,
    pub t: f64,
    pub x: f64,
    pub a: f64,
    pub eta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_df0_1: Option<f64>,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {v}")))
    }
}

fn check_rs(inp: &TuningInputs) -> Result<()> {
    if inp.r_s == 0 || inp.r_s >= inp.n {
        return Err(Error::InvalidParameter(format!("need 1 <= r_S < n, got r_S={} with n={}", inp.r_s, inp.n)));
    }
    Ok(())
}

/// Upper end of the admissible interval for t in the square-root results.
pub fn t_upper(n: usize, r_s: usize) -> f64 {
    (n as f64 - 1.0) / 2.0 - (2.0 * (n - r_s) as f64).ln()
}

fn check_sqrt(inp: &TuningInputs) -> Result<()> {
    check_rs(inp)?;
    positive("t", inp.t)?;
    if !(inp.eta > 0.0 && inp.eta < 1.0) {
        return Err(Error::InvalidParameter(format!("eta must lie in (0,1), got {}", inp.eta)));
    }
    let hi = t_upper(inp.n, inp.r_s);
    if inp.t >= hi {
        return Err(Error::InvalidParameter(format!("t={} outside (0, {hi})", inp.t)));
    }
    Ok(())
}

/// Minimal λ of the plain-estimator theorems: γσ√(2log(2(n−r_S))/n + 2t/n).
pub fn lambda_plain(inp: &TuningInputs) -> Result<f64> {
    check_rs(inp)?;
    positive("t", inp.t)?;
    let n = inp.n as f64;
    let log_term = (2.0 * (inp.n - inp.r_s) as f64).ln();
    Ok(inp.gamma * inp.sigma * (2.0 * log_term / n + 2.0 * inp.t / n).sqrt())
}

/// γ√((2log(2(n−r_S)) + 2t)/(n−1)), the smallest admissible R.
pub fn minimal_r(inp: &TuningInputs) -> Result<f64> {
    check_sqrt(inp)?;
    let log_term = (2.0 * (inp.n - inp.r_s) as f64).ln();
    Ok(inp.gamma * ((2.0 * log_term + 2.0 * inp.t) / (inp.n as f64 - 1.0)).sqrt())
}

/// Minimal λ₀ of the square-root theorems, R/(1−η). Does not involve σ.
pub fn lambda0_sqrt(inp: &TuningInputs) -> Result<f64> {
    Ok(minimal_r(inp)? / (1.0 - inp.eta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assumption1 {
    pub ok: bool,
    pub c: f64,
    pub lambda0_ok: bool,
    pub signal_ok: bool,
    pub eta_ok: bool,
    /// 2(√r_S + √(2a))/√(n − √(8an)); η must exceed it.
    pub eta_threshold: f64,
    /// cσ√(1 − √(8a/n))/λ₀; ‖Df⁰‖₁ must not exceed it.
    pub signal_cap: f64,
    pub reasons: Vec<String>,
}

pub fn check_assumption1(inp: &TuningInputs, lambda0: f64) -> Result<Assumption1> {
    positive("a", inp.a)?;
    positive("lambda0", lambda0)?;
    let n = inp.n as f64;
    if n <= 8.0 * inp.a {
        return Err(Error::InvalidParameter(format!("Assumption 1 needs n > 8a, got n={} and a={}", inp.n, inp.a)));
    }
    let r = minimal_r(inp)?;
    let root = (n - (8.0 * inp.a * n).sqrt()).sqrt();
    let q = ((inp.r_s as f64).sqrt() + (2.0 * inp.a).sqrt()) / root;
    let c = ((inp.eta / 2.0 - q).powi(2) + 4.0).sqrt() - 2.0;
    let eta_threshold = 2.0 * q;
    let signal_cap = c * inp.sigma * (1.0 - (8.0 * inp.a / n).sqrt()).sqrt() / lambda0;
    let lambda0_ok = lambda0 >= r / (1.0 - inp.eta);
    let norm = inp
        .norm_df0_1
        .ok_or_else(|| Error::InvalidParameter("Assumption 1 needs the signal's total variation ‖Df⁰‖₁".into()))?;
    let signal_ok = norm <= signal_cap;
    let eta_ok = inp.eta > eta_threshold;
    let mut reasons = Vec::new();
    if !lambda0_ok {
        reasons.push(format!("lambda0 {lambda0} below R/(1-eta) = {}", r / (1.0 - inp.eta)));
    }
    if !signal_ok {
        reasons.push(format!("signal total variation {norm} exceeds {signal_cap}"));
    }
    if !eta_ok {
        reasons.push(format!("eta too small for r_S (needs eta > {eta_threshold})"));
    }
    Ok(Assumption1 { ok: reasons.is_empty(), c, lambda0_ok, signal_ok, eta_ok, eta_threshold, signal_cap, reasons })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetRequirements {
    /// r_S must be strictly below this.
    #[serde(rename = "max_r_S")]
    pub max_r_s: f64,
    pub max_gamma: f64,
}

/// Caps on (r_S, γ) that an active set must respect for the square-root results.
pub fn admissible_set_requirements(lambda0: f64, a: f64, t: f64, eta: f64, n: usize) -> Result<SetRequirements> {
    positive("a", a)?;
    positive("t", t)?;
    positive("lambda0", lambda0)?;
    let nf = n as f64;
    if nf <= 8.0 * a {
        return Err(Error::InvalidParameter(format!("need n > 8a, got n={n} and a={a}")));
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::InvalidParameter(format!("eta must lie in (0,1), got {eta}")));
    }
    let base = eta * (nf - (8.0 * a * nf).sqrt()).sqrt() / 2.0 - (2.0 * a).sqrt();
    let max_gamma = lambda0 * (1.0 - eta) * ((nf - 1.0) / (2.0 * (2.0 * nf).ln() + 2.0 * t)).sqrt();
    if base <= 0.0 || base * base <= 1.0 {
        return Err(Error::NoAdmissibleSet(format!(
            "r_S would have to be below {}",
            if base <= 0.0 { 0.0 } else { base * base }
        )));
    }
    Ok(SetRequirements { max_r_s: base * base, max_gamma })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TheoremId {
    PlainFast,
    PlainSlow,
    SqrtFast,
    SqrtSlow,
    PathFast,
    PathFastEqual,
    SqrtPathFast,
    SqrtPathFastEqual,
    CycleFast,
    SqrtCycleFast,
    TreeCycleSlow,
    TreeCycleSlowEqual,
    SqrtTreeCycleSlow,
    SqrtTreeCycleSlowEqual,
    GridSlow,
    SqrtGridSlow,
}

impl TheoremId {
    pub const ALL: [TheoremId; 16] = [
        TheoremId::PlainFast,
        TheoremId::PlainSlow,
        TheoremId::SqrtFast,
        TheoremId::SqrtSlow,
        TheoremId::PathFast,
        TheoremId::PathFastEqual,
        TheoremId::SqrtPathFast,
        TheoremId::SqrtPathFastEqual,
        TheoremId::CycleFast,
        TheoremId::SqrtCycleFast,
        TheoremId::TreeCycleSlow,
        TheoremId::TreeCycleSlowEqual,
        TheoremId::SqrtTreeCycleSlow,
        TheoremId::SqrtTreeCycleSlowEqual,
        TheoremId::GridSlow,
        TheoremId::SqrtGridSlow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TheoremId::PlainFast => "plain-fast",
            TheoremId::PlainSlow => "plain-slow",
            TheoremId::SqrtFast => "sqrt-fast",
            TheoremId::SqrtSlow => "sqrt-slow",
            TheoremId::PathFast => "path-fast",
            TheoremId::PathFastEqual => "path-fast-equal",
            TheoremId::SqrtPathFast => "sqrt-path-fast",
            TheoremId::SqrtPathFastEqual => "sqrt-path-fast-equal",
            TheoremId::CycleFast => "cycle-fast",
            TheoremId::SqrtCycleFast => "sqrt-cycle-fast",
            TheoremId::TreeCycleSlow => "tree-cycle-slow",
            TheoremId::TreeCycleSlowEqual => "tree-cycle-slow-equal",
            TheoremId::SqrtTreeCycleSlow => "sqrt-tree-cycle-slow",
            TheoremId::SqrtTreeCycleSlowEqual => "sqrt-tree-cycle-slow-equal",
            TheoremId::GridSlow => "grid-slow",
            TheoremId::SqrtGridSlow => "sqrt-grid-slow",
        }
    }

    pub fn spec(self) -> TheoremSpec {
        use Estimator::*;
        use GraphReq::*;
        use Rate::*;
        use Stochastic::*;
        use TuningRule::*;
        let (estimator, rate, graph, tuning, stochastic) = match self {
            TheoremId::PlainFast => (Plain, Fast, AnyGraph, Gamma, KappaTerm),
            TheoremId::PlainSlow => (Plain, Slow, AnyGraph, Gamma, SlowTerm),
            TheoremId::SqrtFast => (Sqrt, Fast, AnyGraph, Gamma, KappaTerm),
            TheoremId::SqrtSlow => (Sqrt, Slow, AnyGraph, Gamma, SlowTerm),
            TheoremId::PathFast => (Plain, Fast, PathGraph, MaxComponent, ModulesK),
            TheoremId::PathFastEqual => (Plain, Fast, PathGraph, EqualSizes, ModulesEqual),
            TheoremId::SqrtPathFast => (Sqrt, Fast, PathGraph, MaxComponent, ModulesK),
            TheoremId::SqrtPathFastEqual => (Sqrt, Fast, PathGraph, MaxComponent, ModulesEqual),
            TheoremId::CycleFast => (Plain, Fast, CycleGraph, MaxComponent, ModulesK),
            TheoremId::SqrtCycleFast => (Sqrt, Fast, CycleGraph, MaxComponent, ModulesK),
            TheoremId::TreeCycleSlow => (Plain, Slow, TreeOrCycle, MaxComponent, SlowTerm),
            TheoremId::TreeCycleSlowEqual => (Plain, Slow, TreeOrCycle, EqualSizes, SlowTerm),
            TheoremId::SqrtTreeCycleSlow => (Sqrt, Slow, TreeOrCycle, MaxComponent, SlowTerm),
            TheoremId::SqrtTreeCycleSlowEqual => (Sqrt, Slow, TreeOrCycle, EqualSizes, SlowTerm),
            TheoremId::GridSlow => (Plain, Slow, SquareGrid, GridLog, SlowTerm),
            TheoremId::SqrtGridSlow => (Sqrt, Slow, SquareGrid, GridLog, SlowTerm),
        };
        let equal_sizes = matches!(
            self,
            TheoremId::PathFastEqual
                | TheoremId::SqrtPathFastEqual
                | TheoremId::TreeCycleSlowEqual
                | TheoremId::SqrtTreeCycleSlowEqual
        );
        let corollary = !matches!(self, TheoremId::PlainFast | TheoremId::PlainSlow | TheoremId::SqrtFast | TheoremId::SqrtSlow);
        TheoremSpec { estimator, rate, graph, tuning, stochastic, equal_sizes, corollary }
    }

    pub fn is_sqrt(self) -> bool {
        self.spec().estimator == Estimator::Sqrt
    }
}

impl fmt::Display for TheoremId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TheoremId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TheoremId::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown theorem id {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Plain,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Rate {
    Fast,
    Slow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum GraphReq {
    AnyGraph,
    PathGraph,
    CycleGraph,
    TreeOrCycle,
    SquareGrid,
}

/// Which minimal tuning parameter a result prescribes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TuningRule {
    /// built from the computed γ
    Gamma,
    /// built from n_max via the closed-form γ bound
    MaxComponent,
    /// built from r_S when all components have equal size
    EqualSizes,
    /// grid: C√(log n(log 2n + t))
    GridLog,
}

/// Shape of the stochastic term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Stochastic {
    /// (…+ λ√r_S/κ)² with κ from the chosen source
    KappaTerm,
    /// (…+ √(n_max K(log 2n + t)/n) + √(10 (r_S/n)(log 2n + t) log(n/r_S)))²
    ModulesK,
    /// as ModulesK with K ≤ 4r_S²/n
    ModulesEqual,
    /// (σ²/n)(√(2x) + √r_S)² plus a penalty on ‖Df‖₁
    SlowTerm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TheoremSpec {
    pub estimator: Estimator,
    pub rate: Rate,
    pub graph: GraphReq,
    pub tuning: TuningRule,
    pub stochastic: Stochastic,
    pub equal_sizes: bool,
    pub corollary: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum KappaSource {
    /// closed-form bounds on paths and cycles
    #[default]
    PaperBound,
    Numeric(KappaSearch),
    /// a known value of κ(S, W)
    Value(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRhs {
    pub theorem: TheoremId,
    pub bound: f64,
    /// additive pieces: approximation, penalty and stochastic
    pub terms: BTreeMap<String, f64>,
    pub probability: f64,
    /// λ (plain) or λ₀ (square root) used
    pub tuning: f64,
    /// minimal tuning parameter prescribed by the result
    pub tuning_min: f64,
    /// Coefficient of ‖D_S f̂‖₁ on the left-hand side (0 when absent).
    pub lhs_penalty_coef: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sqrt_rs_over_kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assumption1: Option<Assumption1>,
}

/// Extra knobs for `oracle_rhs`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RhsOptions {
    /// Use this λ (plain) or λ₀ (square root) instead of the minimal one; must not be smaller.
    pub tuning: Option<f64>,
    /// The unspecified grid constant C (default 1.0, not a validated value).
    pub grid_constant: Option<f64>,
}

pub const DEFAULT_GRID_CONSTANT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Path,
    Cycle,
    Tree,
    Grid { width: usize, height: usize },
    Other,
}

fn shape(d: &IncidenceMatrix) -> Shape {
    let g = d.graph();
    let n = g.n();
    let same = |fam: GraphFamily| build_graph(&fam).map(|h| h.edges() == g.edges()).unwrap_or(false);
    if n >= 2 && same(GraphFamily::Path { n }) {
        return Shape::Path;
    }
    if n >= 3 && same(GraphFamily::Cycle { n }) {
        return Shape::Cycle;
    }
    for h in 1..=n {
        if n.is_multiple_of(h) && same(GraphFamily::Grid { height: h, width: n / h }) && h > 1 && n / h > 1 {
            return Shape::Grid { width: n / h, height: h };
        }
    }
    if g.m() + 1 == n && g.is_forest() {
        return Shape::Tree;
    }
    Shape::Other
}

fn require(cond: bool, what: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Hypothesis(what.to_string()))
    }
}

fn check_graph(req: GraphReq, d: &IncidenceMatrix, s: &ActiveSet) -> Result<()> {
    let sh = shape(d);
    match req {
        GraphReq::AnyGraph => Ok(()),
        GraphReq::PathGraph => require(sh == Shape::Path, "the result is stated for the path graph"),
        GraphReq::CycleGraph => {
            require(sh == Shape::Cycle, "the result is stated for the cycle graph")?;
            require(s.size() > 0, "cycle graphs need a nonempty active set")
        }
        GraphReq::TreeOrCycle => {
            require(matches!(sh, Shape::Path | Shape::Tree | Shape::Cycle), "the result is stated for trees and cycles")?;
            require(sh != Shape::Cycle || s.size() > 0, "cycle graphs need a nonempty active set")
        }
        GraphReq::SquareGrid => {
            let Shape::Grid { width, height } = sh else {
                return Err(Error::Hypothesis("the result is stated for square two dimensional grids".into()));
            };
            require(width == height, "the grid must be square")?;
            for (i, comp) in s.components.iter().enumerate() {
                let rows: Vec<usize> = comp.iter().map(|v| (v - 1) / width).collect();
                let cols: Vec<usize> = comp.iter().map(|v| (v - 1) % width).collect();
                let h = rows.iter().max().unwrap() - rows.iter().min().unwrap() + 1;
                let w = cols.iter().max().unwrap() - cols.iter().min().unwrap() + 1;
                require(
                    h == w && h * w == comp.len(),
                    &format!("component {} of the graph minus S is not a square grid", i + 1),
                )?;
            }
            Ok(())
        }
    }
}

/// Right-hand side of the chosen oracle inequality for candidate `f`, signal `f0`.
/// `inputs.n`, `r_s` and `gamma` are recomputed from (D, S).
#[allow(clippy::too_many_arguments)]
pub fn oracle_rhs(
    theorem: TheoremId,
    inputs: &TuningInputs,
    f: &[f64],
    f0: &[f64],
    d: &IncidenceMatrix,
    s: &ActiveSet,
    kappa_source: &KappaSource,
    opts: &RhsOptions,
) -> Result<OracleRhs> {
    let spec = theorem.spec();
    let n = d.n();
    if f.len() != n || f0.len() != n {
        return Err(Error::Dimension { expected: n, got: if f.len() != n { f.len() } else { f0.len() } });
    }
    require(is_admissible(d, s), "S must be an admissible active set")?;
    check_graph(spec.graph, d, s)?;
    let report = theory_report(d, s)?;
    let inp = TuningInputs { n, r_s: s.r_s(), gamma: report.gamma, ..inputs.clone() };
    positive("sigma", inp.sigma)?;
    let nf = n as f64;
    let r = inp.r_s as f64;
    let n_max = s.n_max() as f64;
    let logt = (2.0 * nf).ln() + inp.t;
    let sigma = inp.sigma;

    if matches!(spec.stochastic, Stochastic::ModulesK | Stochastic::ModulesEqual) {
        require(s.n_min() >= 4, &format!("n_min >= 4 (got n_min = {})", s.n_min()))?;
    }
    if spec.equal_sizes {
        require(s.n_min() == s.n_max(), "all components must have equal size (n_min = n_max)")?;
        if spec.graph == GraphReq::PathGraph {
            require(s.n_max().is_multiple_of(2), "n_max must be even")?;
        }
    }
    let c_grid = opts.grid_constant.unwrap_or(DEFAULT_GRID_CONSTANT);
    if spec.tuning == TuningRule::GridLog {
        positive("grid_constant", c_grid)?;
    }

    let sqrt = spec.estimator == Estimator::Sqrt;
    let eta = inp.eta;
    if sqrt {
        check_sqrt(&inp)?;
        positive("a", inp.a)?;
    } else {
        check_rs(&inp)?;
        positive("x", inp.x)?;
        positive("t", inp.t)?;
    }
    let tuning_min = match (spec.estimator, spec.tuning) {
        (Estimator::Plain, TuningRule::Gamma) => lambda_plain(&inp)?,
        (Estimator::Plain, TuningRule::MaxComponent) => sigma * (n_max * logt).sqrt() / nf,
        (Estimator::Plain, TuningRule::EqualSizes) => sigma * (logt / (r * nf)).sqrt(),
        (Estimator::Plain, TuningRule::GridLog) => c_grid * sigma * (nf.ln() * logt).sqrt() / nf,
        (Estimator::Sqrt, TuningRule::Gamma) => lambda0_sqrt(&inp)?,
        (Estimator::Sqrt, TuningRule::MaxComponent) => (n_max * logt / (nf * (nf - 1.0))).sqrt() / (1.0 - eta),
        (Estimator::Sqrt, TuningRule::EqualSizes) => (logt / (r * (nf - 1.0))).sqrt() / (1.0 - eta),
        (Estimator::Sqrt, TuningRule::GridLog) => c_grid / (1.0 - eta) * (nf.ln() * logt / (nf * (nf - 1.0))).sqrt(),
    };
    let tuning = match opts.tuning {
        Some(v) => {
            positive("tuning parameter", v)?;
            require(
                v >= tuning_min * (1.0 - 1e-12),
                &format!("tuning parameter {v} is below the minimum {tuning_min} the result requires"),
            )?;
            v
        }
        None => tuning_min,
    };

    let assumption1 = if sqrt {
        let a1 = check_assumption1(&inp, tuning)?;
        if !a1.ok {
            return Err(Error::Hypothesis(format!("Assumption 1 fails: {}", a1.reasons.join("; "))));
        }
        Some(a1)
    } else {
        None
    };

    let diff: Vec<f64> = f.iter().zip(f0).map(|(a, b)| a - b).collect();
    let approx = diff.iter().map(|x| x * x).sum::<f64>() / nf;
    let df = d.apply(f);
    let df_free: f64 = df.iter().enumerate().filter(|(i, _)| !s.contains_row(*i)).map(|(_, x)| x.abs()).sum();
    let df_all = norm1(&df);

    let mut terms = BTreeMap::new();
    terms.insert("approximation".to_string(), approx);
    let mut sqrt_rs_over_kappa = None;
    let (penalty, stochastic, lhs_penalty_coef) = match spec.rate {
        Rate::Fast => {
            let penalty = if sqrt { 16.0 * sigma * tuning * df_free } else { 4.0 * tuning * df_free };
            let noise_dev = if sqrt { (2.0 * inp.a / nf).sqrt() } else { (2.0 * inp.x / nf).sqrt() };
            let base = noise_dev + (r / nf).sqrt();
            let bracket = match spec.stochastic {
                Stochastic::KappaTerm => {
                    let ratio = sqrt_rs_over_kappa_from(kappa_source, d, s, &report.weights, report.gamma)?;
                    sqrt_rs_over_kappa = Some(ratio);
                    if sqrt {
                        base + 4.0 * tuning * ratio
                    } else {
                        base + tuning * ratio / sigma
                    }
                }
                Stochastic::ModulesK | Stochastic::ModulesEqual => {
                    let k_term = if spec.stochastic == Stochastic::ModulesEqual {
                        4.0 * r / nf
                    } else {
                        let k = if spec.graph == GraphReq::CycleGraph {
                            kappa_bound_cycle(s, &report.weights, None)?.k_prime.unwrap_or(0.0)
                        } else {
                            kappa_bound_path(s, &report.weights, None)?.k.unwrap_or(0.0)
                        };
                        n_max * k / nf
                    };
                    let incr = 10.0 * r / nf * logt * (nf / r).ln();
                    if sqrt {
                        let scale = nf / (nf - 1.0);
                        base + 4.0 / (1.0 - eta) * (k_term * scale * logt).sqrt()
                            + 4.0 / (1.0 - eta) * (incr * scale).sqrt()
                    } else {
                        base + (k_term * logt).sqrt() + incr.sqrt()
                    }
                }
                Stochastic::SlowTerm => unreachable!("slow term in a fast result"),
            };
            terms.insert("stochastic_bracket".to_string(), bracket);
            if sqrt {
                terms.insert("intermediate_constant".to_string(), (1.0 + eta) * (1.0 + (4.0 * inp.a / nf).sqrt()));
            }
            (penalty, sigma * sigma * bracket * bracket, 0.0)
        }
        Rate::Slow => {
            let dev = if sqrt { inp.a } else { inp.x };
            let stochastic = sigma * sigma / nf * ((2.0 * dev).sqrt() + r.sqrt()).powi(2);
            let (penalty, lhs) = if spec.corollary {
                let coef = match (spec.estimator, spec.tuning) {
                    (Estimator::Plain, TuningRule::MaxComponent) => 4.0 * sigma / nf * (n_max * logt).sqrt(),
                    (Estimator::Plain, TuningRule::EqualSizes) => 4.0 * sigma * (logt / (r * nf)).sqrt(),
                    (Estimator::Plain, TuningRule::GridLog) => c_grid * sigma / nf * (nf.ln() * logt).sqrt(),
                    (Estimator::Sqrt, TuningRule::MaxComponent) => {
                        16.0 * sigma / (1.0 - eta) * (n_max * logt / (nf * (nf - 1.0))).sqrt()
                    }
                    (Estimator::Sqrt, TuningRule::EqualSizes) => {
                        16.0 * sigma / (1.0 - eta) * (logt / (r * (nf - 1.0))).sqrt()
                    }
                    (Estimator::Sqrt, TuningRule::GridLog) => {
                        c_grid * sigma / (1.0 - eta) * (nf.ln() * logt / (nf * (nf - 1.0))).sqrt()
                    }
                    _ => unreachable!("slow corollaries use closed-form tuning"),
                };
                (coef * df_all, 0.0)
            } else if sqrt {
                let lhs = 2.0 * (1.0 - eta) * (1.0 - (8.0 * inp.a / nf).sqrt()).sqrt() * sigma * tuning;
                (16.0 * sigma * tuning * df_all, lhs)
            } else {
                (4.0 * tuning * df_all, 2.0 * tuning)
            };
            (penalty, stochastic, lhs)
        }
    };
    terms.insert("penalty".to_string(), penalty);
    terms.insert("stochastic".to_string(), stochastic);
    let probability = if sqrt {
        1.0 - 4.0 * (-inp.a).exp() - (-inp.t).exp()
    } else {
        1.0 - (-inp.x).exp() - (-inp.t).exp()
    };
    Ok(OracleRhs {
        theorem,
        bound: approx + penalty + stochastic,
        terms,
        probability,
        tuning,
        tuning_min,
        lhs_penalty_coef,
        sqrt_rs_over_kappa,
        assumption1,
    })
}

fn sqrt_rs_over_kappa_from(
    source: &KappaSource,
    d: &IncidenceMatrix,
    s: &ActiveSet,
    weights: &[f64],
    gamma: f64,
) -> Result<f64> {
    match source {
        KappaSource::Value(k) => {
            positive("kappa", *k)?;
            Ok((s.r_s() as f64).sqrt() / k)
        }
        KappaSource::Numeric(search) => {
            if s.size() == 0 {
                return Ok(0.0);
            }
            sup_ratio_numeric(d, s, weights, search)
        }
        KappaSource::PaperBound => match shape(d) {
            Shape::Path => Ok(kappa_bound_path(s, weights, Some(gamma))?.sqrt_rs_over_kappa_weighted),
            Shape::Cycle => Ok(kappa_bound_cycle(s, weights, Some(gamma))?.sqrt_rs_over_kappa_weighted),
            _ => Err(Error::Hypothesis(
                "closed-form compatibility bounds exist only for paths and cycles; use a numeric or given kappa".into(),
            )),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::active_set;

    fn inputs(n: usize, r_s: usize, gamma: f64) -> TuningInputs {
        TuningInputs { n, r_s, gamma, sigma: 1.0, t: 2.0, x: 2.0, a: 2.0, eta: 0.5, norm_df0_1: Some(0.0) }
    }

    fn setup(spec: &str, s: &[usize]) -> (IncidenceMatrix, ActiveSet) {
        let graph = build_graph(&spec.parse().unwrap()).unwrap();
        (graph.incidence(), active_set(&graph, s).unwrap())
    }

    #[test]
    fn lambda_plain_example() {
        let inp = TuningInputs { t: 1.0, ..inputs(100, 2, 0.5) };
        let expect = 0.5 * ((2.0 * 196f64.ln() + 2.0) / 100.0).sqrt();
        assert!((lambda_plain(&inp).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.177_173_85).abs() < 1e-8);
        let doubled = lambda_plain(&TuningInputs { sigma: 2.0, ..inp.clone() }).unwrap();
        assert!((doubled - 2.0 * expect).abs() < 1e-15);
        assert_eq!(lambda_plain(&TuningInputs { gamma: 0.0, ..inp.clone() }).unwrap(), 0.0);
        assert!(lambda_plain(&TuningInputs { r_s: 100, ..inp }).is_err());
    }

    #[test]
    fn lambda0_properties() {
        let inp = inputs(400, 2, 0.3);
        let l = lambda0_sqrt(&inp).unwrap();
        let l_other_sigma = lambda0_sqrt(&TuningInputs { sigma: 7.5, ..inp.clone() }).unwrap();
        assert_eq!(l, l_other_sigma);
        let base = minimal_r(&inp).unwrap();
        assert!((l - 2.0 * base).abs() < 1e-15);
        // ratio to the plain choice: √(n/(n−1))/(1−η)
        let lp = lambda_plain(&inp).unwrap();
        assert!((l * inp.sigma / lp - (400.0f64 / 399.0).sqrt() / 0.5).abs() < 1e-12);
        assert!(lambda0_sqrt(&TuningInputs { t: 500.0, ..inp.clone() }).is_err());
        let edge = TuningInputs { r_s: 399, ..inp };
        let expect = 0.3 * ((2.0 * 2f64.ln() + 4.0) / 399.0).sqrt() / 0.5;
        assert!((lambda0_sqrt(&edge).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn assumption1_limits_and_reasons() {
        let inp = inputs(400, 2, 0.3);
        let l0 = lambda0_sqrt(&inp).unwrap();
        let a = check_assumption1(&TuningInputs { n: 100_000_000, ..inp.clone() }, l0).unwrap();
        let limit = ((0.25f64).powi(2) + 4.0).sqrt() - 2.0;
        assert!((a.c - limit).abs() < 1e-3);
        let bad = check_assumption1(&TuningInputs { eta: 0.05, ..inp.clone() }, l0).unwrap();
        assert!(!bad.ok && !bad.eta_ok);
        assert!(bad.reasons.iter().any(|r| r.contains("eta too small for r_S")));
        let ok = check_assumption1(&inp, l0).unwrap();
        assert!(ok.signal_ok && ok.lambda0_ok);
        assert!(check_assumption1(&TuningInputs { n: 16, ..inp }, l0).is_err());
    }

    #[test]
    fn set_requirements() {
        let r = admissible_set_requirements(0.2, 1.0, 1.0, 0.5, 400).unwrap();
        let n = 400f64;
        let base = 0.5 * (n - (8.0 * n).sqrt()).sqrt() / 2.0 - 2f64.sqrt();
        assert!((r.max_r_s - base * base).abs() < 1e-12);
        let g = 0.2 * 0.5 * (399.0 / (2.0 * 800f64.ln() + 2.0)).sqrt();
        assert!((r.max_gamma - g).abs() < 1e-15);
        let r2 = admissible_set_requirements(0.4, 1.0, 1.0, 0.5, 400).unwrap();
        assert!((r2.max_gamma - 2.0 * r.max_gamma).abs() < 1e-15);
        assert!(matches!(admissible_set_requirements(0.2, 1.0, 1.0, 0.01, 400), Err(Error::NoAdmissibleSet(_))));
    }

    #[test]
    fn slow_rhs_for_constant_signal() {
        let (d, s) = setup("path:50", &[]);
        let f0 = vec![1.5; 50];
        let out = oracle_rhs(TheoremId::PlainSlow, &inputs(50, 1, 0.0), &f0, &f0, &d, &s, &KappaSource::PaperBound, &RhsOptions::default())
            .unwrap();
        let expect = ((4.0f64).sqrt() + 1.0).powi(2) / 50.0;
        assert!((out.bound - expect).abs() < 1e-15);
        assert!((out.probability - (1.0 - 2.0 * (-2.0f64).exp())).abs() < 1e-15);
    }

    fn piecewise(n: usize, jumps: &[usize]) -> Vec<f64> {
        (0..n).map(|i| jumps.iter().filter(|&&j| i >= j).count() as f64 * 0.001).collect()
    }

    /// Independent recomputation of each RHS with the terms added in another order.
    fn reference(theorem: TheoremId, f: &[f64], f0: &[f64], d: &IncidenceMatrix, s: &ActiveSet, inp: &TuningInputs, ratio: f64) -> f64 {
        let n = d.n() as f64;
        let r = s.r_s() as f64;
        let nm = s.n_max() as f64;
        let l = (2.0 * n).ln() + inp.t;
        let (sg, x, a, t, eta) = (inp.sigma, inp.x, inp.a, inp.t, inp.eta);
        let df = d.apply(f);
        let all: f64 = df.iter().map(|v| v.abs()).sum();
        let free: f64 = all - s.active_rows().iter().map(|&i| df[i].abs()).sum::<f64>();
        let appr: f64 = f.iter().zip(f0).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / n;
        let gamma = theory_report(d, s).unwrap().gamma;
        let lam = gamma * sg * ((2.0 * (2.0 * (n - r)).ln() + 2.0 * t) / n).sqrt();
        let lam0 = gamma / (1.0 - eta) * ((2.0 * (2.0 * (n - r)).ln() + 2.0 * t) / (n - 1.0)).sqrt();
        let sizes = s.component_sizes();
        let rr = sizes.len();
        let half = |k: usize| 1.0 / (k / 2) as f64 + 1.0 / k.div_ceil(2) as f64;
        let kp: f64 = sizes.iter().map(|&k| half(k)).sum();
        let k = if rr < 2 {
            0.0
        } else {
            1.0 / sizes[0] as f64 + 1.0 / sizes[rr - 1] as f64 + sizes[1..rr - 1].iter().map(|&k| half(k)).sum::<f64>()
        };
        let tail = (10.0 * r / n * l * (n / r).ln()).sqrt();
        match theorem {
            TheoremId::PlainFast => (sg * (2.0 * x / n).sqrt() + lam * ratio + sg * (r / n).sqrt()).powi(2) + 4.0 * lam * free + appr,
            TheoremId::PlainSlow => 4.0 * lam * all + sg * sg * ((r).sqrt() + (2.0 * x).sqrt()).powi(2) / n + appr,
            TheoremId::SqrtFast => sg * sg * (4.0 * lam0 * ratio + (r / n).sqrt() + (2.0 * a / n).sqrt()).powi(2) + 16.0 * sg * lam0 * free + appr,
            TheoremId::SqrtSlow => 16.0 * sg * lam0 * all + sg * sg / n * ((r).sqrt() + (2.0 * a).sqrt()).powi(2) + appr,
            TheoremId::PathFast => {
                let l1 = sg * (nm * l).sqrt() / n;
                sg * sg * (tail + (nm * k / n * l).sqrt() + (r / n).sqrt() + (2.0 * x / n).sqrt()).powi(2) + 4.0 * l1 * free + appr
            }
            TheoremId::CycleFast => {
                let l1 = sg * (nm * l).sqrt() / n;
                sg * sg * (tail + (nm * kp / n * l).sqrt() + (r / n).sqrt() + (2.0 * x / n).sqrt()).powi(2) + 4.0 * l1 * free + appr
            }
            TheoremId::PathFastEqual => {
                let l1 = sg * (l / (r * n)).sqrt();
                sg * sg * (tail + (4.0 * r / n * l).sqrt() + (r / n).sqrt() + (2.0 * x / n).sqrt()).powi(2) + 4.0 * l1 * free + appr
            }
            TheoremId::SqrtPathFast | TheoremId::SqrtCycleFast | TheoremId::SqrtPathFastEqual => {
                let kk = match theorem {
                    TheoremId::SqrtPathFast => nm * k,
                    TheoremId::SqrtCycleFast => nm * kp,
                    _ => 4.0 * r,
                };
                let l0 = (nm * l / (n * (n - 1.0))).sqrt() / (1.0 - eta);
                let t4 = 4.0 * 10f64.sqrt() / (1.0 - eta) * (r / (n - 1.0) * l * (n / r).ln()).sqrt();
                sg * sg * (t4 + 4.0 / (1.0 - eta) * (kk / (n - 1.0) * l).sqrt() + (r / n).sqrt() + (2.0 * a / n).sqrt()).powi(2)
                    + 16.0 * l0 * sg * free
                    + appr
            }
            TheoremId::TreeCycleSlow => 4.0 * sg / n * (nm * l).sqrt() * all + sg * sg / n * ((2.0 * x).sqrt() + r.sqrt()).powi(2) + appr,
            TheoremId::TreeCycleSlowEqual => 4.0 * sg * (l / (r * n)).sqrt() * all + sg * sg / n * ((2.0 * x).sqrt() + r.sqrt()).powi(2) + appr,
            TheoremId::SqrtTreeCycleSlow => {
                16.0 * sg / (1.0 - eta) * (nm * l / (n * (n - 1.0))).sqrt() * all + sg * sg / n * ((2.0 * a).sqrt() + r.sqrt()).powi(2) + appr
            }
            TheoremId::SqrtTreeCycleSlowEqual => {
                16.0 * sg / (1.0 - eta) * (l / (r * (n - 1.0))).sqrt() * all + sg * sg / n * ((2.0 * a).sqrt() + r.sqrt()).powi(2) + appr
            }
            TheoremId::GridSlow => n.ln().sqrt() * l.sqrt() * sg / n * all + sg * sg / n * ((2.0 * x).sqrt() + r.sqrt()).powi(2) + appr,
            TheoremId::SqrtGridSlow => {
                sg / (1.0 - eta) * (n.ln() * l / (n * (n - 1.0))).sqrt() * all + sg * sg / n * ((2.0 * a).sqrt() + r.sqrt()).powi(2) + appr
            }
        }
    }

    #[test]
    fn dispatcher_matches_independent_formulas() {
        let cases: Vec<(TheoremId, &str, Vec<usize>)> = vec![
            (TheoremId::PlainFast, "path:400", vec![200]),
            (TheoremId::PlainSlow, "path:400", vec![200]),
            (TheoremId::SqrtFast, "path:400", vec![200]),
            (TheoremId::SqrtSlow, "path:400", vec![200]),
            (TheoremId::PathFast, "path:400", vec![150]),
            (TheoremId::PathFastEqual, "path:400", vec![200]),
            (TheoremId::SqrtPathFast, "path:400", vec![150]),
            (TheoremId::SqrtPathFastEqual, "path:400", vec![200]),
            (TheoremId::CycleFast, "cycle:400", vec![200, 400]),
            (TheoremId::SqrtCycleFast, "cycle:400", vec![150, 400]),
            (TheoremId::TreeCycleSlow, "path:400", vec![120]),
            (TheoremId::TreeCycleSlowEqual, "cycle:400", vec![200, 400]),
            (TheoremId::SqrtTreeCycleSlow, "path:400", vec![200]),
            (TheoremId::SqrtTreeCycleSlowEqual, "path:400", vec![200]),
            (TheoremId::GridSlow, "grid:20x20", vec![]),
            (TheoremId::SqrtGridSlow, "grid:20x20", vec![]),
        ];
        for (th, spec, s_idx) in cases {
            let (d, s) = setup(spec, &s_idx);
            let n = d.n();
            let jumps: Vec<usize> = s_idx.iter().map(|&i| d.row(i - 1).1).filter(|&v| v > 0).collect();
            let f0 = piecewise(n, &jumps);
            let f: Vec<f64> = f0.iter().enumerate().map(|(i, v)| v + 0.001 * ((i % 7) as f64)).collect();
            let inp = TuningInputs { norm_df0_1: Some(norm1(&d.apply(&f0))), ..inputs(n, s.r_s(), 0.0) };
            let out = oracle_rhs(th, &inp, &f, &f0, &d, &s, &KappaSource::PaperBound, &RhsOptions::default())
                .unwrap_or_else(|e| panic!("{th}: {e}"));
            let ratio = out.sqrt_rs_over_kappa.unwrap_or(0.0);
            let want = reference(th, &f, &f0, &d, &s, &inp, ratio);
            assert!((out.bound - want).abs() <= 1e-12 * want.abs().max(1.0), "{th}: {} vs {want}", out.bound);
            let sum: f64 = ["approximation", "penalty", "stochastic"].iter().map(|k| out.terms[*k]).sum();
            assert!((sum - out.bound).abs() < 1e-15 * out.bound.max(1.0) * 4.0);
            let expect_p = if th.is_sqrt() { 1.0 - 4.0 * (-2.0f64).exp() - (-2.0f64).exp() } else { 1.0 - 2.0 * (-2.0f64).exp() };
            assert_eq!(out.probability, expect_p);
        }
    }

    #[test]
    fn fast_rhs_increases_with_lambda() {
        let (d, s) = setup("path:128", &[64]);
        let f0 = piecewise(128, &[64]);
        let f: Vec<f64> = f0.iter().enumerate().map(|(i, v)| v + 0.01 * (i as f64).sin()).collect();
        let inp = inputs(128, 2, 0.0);
        let mut last = 0.0;
        let base = oracle_rhs(TheoremId::PlainFast, &inp, &f, &f0, &d, &s, &KappaSource::PaperBound, &RhsOptions::default()).unwrap();
        for mult in [1.0, 1.5, 2.0, 4.0] {
            let opts = RhsOptions { tuning: Some(base.tuning * mult), ..Default::default() };
            let out = oracle_rhs(TheoremId::PlainFast, &inp, &f, &f0, &d, &s, &KappaSource::PaperBound, &opts).unwrap();
            assert!(out.bound > last);
            last = out.bound;
        }
        let low = RhsOptions { tuning: Some(base.tuning * 0.5), ..Default::default() };
        assert!(oracle_rhs(TheoremId::PlainFast, &inp, &f, &f0, &d, &s, &KappaSource::PaperBound, &low).is_err());
    }

    #[test]
    fn hypotheses_are_named() {
        let (d, s) = setup("path:40", &[2]);
        let f0 = vec![0.0; 40];
        let err = oracle_rhs(TheoremId::PathFast, &inputs(40, 2, 0.0), &f0, &f0, &d, &s, &KappaSource::PaperBound, &RhsOptions::default())
            .unwrap_err();
        assert!(err.to_string().contains("n_min >= 4"));
        let (d, s) = setup("cycle:40", &[]);
        assert!(oracle_rhs(TheoremId::CycleFast, &inputs(40, 1, 0.0), &f0, &f0, &d, &s, &KappaSource::PaperBound, &RhsOptions::default()).is_err());
        let (d, s) = setup("grid:6x6", &[]);
        let f0 = vec![0.0; 36];
        assert!(oracle_rhs(TheoremId::PlainFast, &inputs(36, 1, 0.0), &f0, &f0, &d, &s, &KappaSource::PaperBound, &RhsOptions::default()).is_err());
        let out = oracle_rhs(TheoremId::PlainFast, &inputs(36, 1, 0.0), &f0, &f0, &d, &s, &KappaSource::Value(1.0), &RhsOptions::default()).unwrap();
        assert_eq!(out.sqrt_rs_over_kappa, Some(1.0));
    }

    #[test]
    fn theorem_ids_round_trip() {
        for t in TheoremId::ALL {
            assert_eq!(t.name().parse::<TheoremId>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{}\"", t.name()));
        }
    }
}
