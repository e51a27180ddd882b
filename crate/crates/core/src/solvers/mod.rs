//! Plain and square-root analysis estimators with KKT certificates.

mod admm;
mod kkt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::IncidenceMatrix;
use crate::{norm1, norm_inf, norm_n};
use admm::{admm, internal_objective, polish, AdmmSettings, LaplacianSolver, WarmStart};

pub use kkt::kkt_residual;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// ADMM stops once both residuals fall below tol·scale.
    pub tol: f64,
    pub relaxation: f64,
    /// Relative KKT tolerance; the absolute tolerance is kkt_tol·(λ + ‖Y‖_∞/n).
    pub kkt_tol: f64,
    pub polish: bool,
    /// Compute the KKT certificate (an LP solve) for the returned estimate.
    pub certify: bool,
    /// Square-root: σ̂ below overfit_floor·‖Y‖_n is reported as overfitting.
    pub overfit_floor: f64,
    pub max_outer: usize,
    pub outer_tol: f64,
    /// Keep the per-iteration objective trace.
    pub record_objective: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 100_000,
            tol: 1e-8,
            relaxation: 1.6,
            kkt_tol: 1e-6,
            polish: true,
            certify: true,
            overfit_floor: 1e-6,
            max_outer: 2000,
            outer_tol: 1e-11,
            record_objective: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub f_hat: Vec<f64>,
    pub lambda_used: f64,
    pub residual_norm_n: f64,
    /// ‖Y − f̂‖_n² + 2λ‖Df̂‖₁.
    pub objective: f64,
    /// None when no certificate applies (square-root overfit, or certify off).
    pub kkt_residual: Option<f64>,
    pub kkt_tolerance: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overfit: Option<bool>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub objective_trace: Vec<f64>,
}

/// Reusable solver bound to one analysis operator.
pub struct AnalysisSolver<'a> {
    d: &'a IncidenceMatrix,
    lap: LaplacianSolver,
}

fn paper_objective(d: &IncidenceMatrix, y: &[f64], f: &[f64], lambda: f64) -> f64 {
    let n = y.len() as f64;
    let fit: f64 = y.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    fit + 2.0 * lambda * norm1(&d.apply(f))
}

impl<'a> AnalysisSolver<'a> {
    pub fn new(d: &'a IncidenceMatrix) -> Self {
        Self { d, lap: LaplacianSolver::new(d) }
    }

    fn check(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.d.n() {
            return Err(Error::Dimension { expected: self.d.n(), got: y.len() });
        }
        if y.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("observations must be finite".into()));
        }
        Ok(())
    }

    fn kkt_tolerance(&self, y: &[f64], lambda: f64, opts: &SolverOptions) -> f64 {
        opts.kkt_tol * (lambda + norm_inf(y) / y.len() as f64)
    }

    pub fn solve(&self, y: &[f64], lambda: f64, opts: &SolverOptions) -> Result<EstimateResult> {
        self.check(y)?;
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("lambda must be a finite value >= 0, got {lambda}")));
        }
        Ok(self.solve_warm(y, lambda, opts, None).0)
    }

    fn solve_warm(
        &self,
        y: &[f64],
        lambda: f64,
        opts: &SolverOptions,
        warm: Option<&WarmStart>,
    ) -> (EstimateResult, Option<WarmStart>) {
        let d = self.d;
        let n = y.len();
        let kkt_tolerance = self.kkt_tolerance(y, lambda, opts);
        let dy = d.apply(y);
        if lambda == 0.0 || norm_inf(&dy) == 0.0 {
            let res = EstimateResult {
                f_hat: y.to_vec(),
                lambda_used: lambda,
                residual_norm_n: 0.0,
                objective: 2.0 * lambda * norm1(&dy),
                kkt_residual: opts.certify.then(|| kkt_residual(y, y, d, lambda)),
                kkt_tolerance,
                iterations: 0,
                converged: true,
                sigma_hat: None,
                overfit: None,
                objective_trace: Vec::new(),
            };
            return (res, None);
        }
        let mu = n as f64 * lambda;
        let settings = AdmmSettings {
            max_iter: opts.max_iter,
            tol: opts.tol,
            relaxation: opts.relaxation,
            record: opts.record_objective,
        };
        let out = admm(d, &self.lap, y, mu, &settings, warm);
        let mut f = out.f;
        let mut best = out.objective;
        let mut polished = false;
        if opts.polish {
            let mut edge = vec![0.0; d.m()];
            let mut candidates: Vec<Vec<f64>> = Vec::new();
            candidates.push(out.state.z.iter().map(|&x| if x == 0.0 { 0.0 } else { x.signum() }).collect());
            let df = d.apply(&f);
            for scale in [norm_inf(&df), norm_inf(&dy)] {
                for rel in [1e-10, 1e-8, 1e-6, 1e-4] {
                    candidates.push(df.iter().map(|&x| if x.abs() <= rel * scale { 0.0 } else { x.signum() }).collect());
                }
            }
            for signs in candidates {
                if let Some(p) = polish(d, y, mu, &signs) {
                    let obj = internal_objective(d, y, &p, mu, &mut edge);
                    if obj <= best * (1.0 + 1e-14) + 1e-300 {
                        best = obj;
                        f = p;
                        polished = true;
                    }
                }
            }
        }
        let mut trace = out.trace;
        if opts.record_objective {
            trace.push(best);
            // report in the paper's scaling: (2/n)·internal
            trace.iter_mut().for_each(|v| *v *= 2.0 / n as f64);
        }
        let kkt = opts.certify.then(|| kkt_residual(y, &f, d, lambda));
        let converged = match kkt {
            Some(k) => k <= kkt_tolerance,
            None => out.converged || polished,
        };
        let resid: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - b).collect();
        let res = EstimateResult {
            residual_norm_n: norm_n(&resid),
            objective: paper_objective(d, y, &f, lambda),
            f_hat: f,
            lambda_used: lambda,
            kkt_residual: kkt,
            kkt_tolerance,
            iterations: out.iterations,
            converged,
            sigma_hat: None,
            overfit: None,
            objective_trace: trace,
        };
        (res, Some(out.state))
    }

    pub fn solve_sqrt(&self, y: &[f64], lambda0: f64, opts: &SolverOptions) -> Result<EstimateResult> {
        self.check(y)?;
        if !(lambda0 > 0.0) || !lambda0.is_finite() {
            return Err(Error::InvalidParameter(format!("lambda0 must be a finite value > 0, got {lambda0}")));
        }
        let d = self.d;
        let n = y.len();
        let floor = opts.overfit_floor * norm_n(y);
        let overfit = |iterations: usize| EstimateResult {
            f_hat: y.to_vec(),
            lambda_used: 0.0,
            residual_norm_n: 0.0,
            objective: norm_n(&vec![0.0; n]) + lambda0 * norm1(&d.apply(y)),
            kkt_residual: None,
            kkt_tolerance: 0.0,
            iterations,
            converged: true,
            sigma_hat: Some(0.0),
            overfit: Some(true),
            objective_trace: Vec::new(),
        };
        // start from the residual of the projection onto N(D)
        let (labels, count) = d.graph().component_labels(&vec![false; d.m()]);
        let mut sums = vec![0.0; count];
        let mut counts = vec![0.0; count];
        for (v, &l) in labels.iter().enumerate() {
            sums[l] += y[v];
            counts[l] += 1.0;
        }
        let resid0: Vec<f64> = labels.iter().enumerate().map(|(v, &l)| y[v] - sums[l] / counts[l]).collect();
        let mut sigma = norm_n(&resid0);
        if sigma <= floor || sigma == 0.0 {
            return Ok(overfit(0));
        }
        let inner = SolverOptions { certify: false, record_objective: false, ..opts.clone() };
        let mut warm: Option<WarmStart> = None;
        let mut iterations = 0;
        for _ in 0..opts.max_outer {
            let lambda = lambda0 * sigma;
            let (res, state) = self.solve_warm(y, lambda, &inner, warm.as_ref());
            iterations += res.iterations;
            warm = state;
            let next = res.residual_norm_n;
            if next <= floor {
                return Ok(overfit(iterations));
            }
            if (next - sigma).abs() <= opts.outer_tol * sigma {
                let kkt = opts.certify.then(|| kkt_residual(y, &res.f_hat, d, lambda));
                let kkt_tolerance = self.kkt_tolerance(y, lambda, opts);
                let converged = kkt.map_or(res.converged, |k| k <= kkt_tolerance);
                let objective = next + lambda0 * norm1(&d.apply(&res.f_hat));
                return Ok(EstimateResult {
                    lambda_used: lambda,
                    residual_norm_n: next,
                    objective,
                    kkt_residual: kkt,
                    kkt_tolerance,
                    iterations,
                    converged,
                    sigma_hat: Some(next),
                    overfit: Some(false),
                    objective_trace: Vec::new(),
                    f_hat: res.f_hat,
                });
            }
            sigma = next;
        }
        // no fixed point within max_outer
        let lambda = lambda0 * sigma;
        let (res, _) = self.solve_warm(y, lambda, &inner, warm.as_ref());
        Ok(EstimateResult {
            lambda_used: lambda,
            objective: res.residual_norm_n + lambda0 * norm1(&d.apply(&res.f_hat)),
            sigma_hat: Some(res.residual_norm_n),
            overfit: Some(false),
            converged: false,
            kkt_residual: None,
            kkt_tolerance: self.kkt_tolerance(y, lambda, opts),
            iterations: iterations + res.iterations,
            ..res
        })
    }
}

/// argmin ‖Y − f‖_n² + 2λ‖Df‖₁.
pub fn solve_analysis(y: &[f64], d: &IncidenceMatrix, lambda: f64, opts: &SolverOptions) -> Result<EstimateResult> {
    AnalysisSolver::new(d).solve(y, lambda, opts)
}

/// argmin ‖Y − f‖_n + λ₀‖Df‖₁, via the fixed point σ ← ‖Y − f̂(λ₀σ)‖_n.
pub fn solve_sqrt_analysis(
    y: &[f64],
    d: &IncidenceMatrix,
    lambda0: f64,
    opts: &SolverOptions,
) -> Result<EstimateResult> {
    AnalysisSolver::new(d).solve_sqrt(y, lambda0, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, GraphFamily};
    use proptest::prelude::*;

    fn inc(spec: &str) -> IncidenceMatrix {
        build_graph(&spec.parse::<GraphFamily>().unwrap()).unwrap().incidence()
    }

    /// Reference: coordinate descent on the dual box QP
    /// min_{|u| ≤ μ} ½‖Y − D′u‖², f = Y − D′u. Sweeps continue until no
    /// coordinate moves by more than 1e−13, which is stricter than a 1e−12
    /// objective change.
    fn dual_cd(y: &[f64], d: &IncidenceMatrix, lambda: f64) -> Vec<f64> {
        let mu = y.len() as f64 * lambda;
        let mut u = vec![0.0; d.m()];
        let mut f = y.to_vec();
        for _ in 0..10_000_000 {
            let mut moved = 0.0f64;
            for e in 0..d.m() {
                let (t, h) = d.row(e);
                // f = Y − D′u; coordinate e enters f_h with −u_e and f_t with +u_e
                let g = -(f[h] - f[t]);
                let new = (u[e] - g / 2.0).clamp(-mu, mu);
                let delta = new - u[e];
                u[e] = new;
                f[h] -= delta;
                f[t] += delta;
                moved = moved.max(delta.abs());
            }
            if moved <= 1e-13 {
                break;
            }
        }
        f
    }

    /// Brute force minimum of the square-root objective on path(2), Y = (0, 2), f = (1 − u, 1 + u).
    fn sqrt_two_point_brute(lambda0: f64) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for k in -20000..=20000 {
            let u = k as f64 / 10000.0;
            let obj = ((1.0 - u).powi(2) + (1.0 - u).powi(2)).sqrt() / 2f64.sqrt() + lambda0 * (2.0 * u).abs();
            if obj < best.0 {
                best = (obj, u);
            }
        }
        best.1
    }

    #[test]
    fn two_point_closed_form() {
        let d = inc("path:2");
        for lambda in [0.0, 0.05, 0.25, 0.4, 0.5, 0.51, 0.9, 3.0] {
            let r = solve_analysis(&[0.0, 2.0], &d, lambda, &SolverOptions::default()).unwrap();
            let expect = if lambda <= 0.5 { [2.0 * lambda, 2.0 - 2.0 * lambda] } else { [1.0, 1.0] };
            assert!((r.f_hat[0] - expect[0]).abs() < 1e-9 && (r.f_hat[1] - expect[1]).abs() < 1e-9, "{lambda}: {:?}", r.f_hat);
            assert!(r.converged);
            assert!(r.kkt_residual.unwrap() <= 1e-8);
        }
    }

    #[test]
    fn sqrt_two_point_threshold_is_one_half() {
        let d = inc("path:2");
        for lambda0 in [0.2, 0.3, 0.4, 0.45] {
            assert!((sqrt_two_point_brute(lambda0) - 1.0).abs() < 1e-12);
            let r = solve_sqrt_analysis(&[0.0, 2.0], &d, lambda0, &SolverOptions::default()).unwrap();
            assert_eq!(r.overfit, Some(true), "lambda0 {lambda0}");
            assert_eq!(r.f_hat, vec![0.0, 2.0]);
        }
        for lambda0 in [0.55, 0.7, 2.0] {
            assert!(sqrt_two_point_brute(lambda0).abs() < 1e-12);
            let r = solve_sqrt_analysis(&[0.0, 2.0], &d, lambda0, &SolverOptions::default()).unwrap();
            assert_eq!(r.overfit, Some(false));
            assert!((r.f_hat[0] - 1.0).abs() < 1e-9 && (r.f_hat[1] - 1.0).abs() < 1e-9);
            assert!((r.sigma_hat.unwrap() - 1.0).abs() < 1e-9);
            assert!(r.converged);
        }
    }

    #[test]
    fn large_lambda_gives_component_means() {
        let d = inc("path:6");
        let y = [1.0, 5.0, -2.0, 3.0, 0.5, 4.0];
        let r = solve_analysis(&y, &d, 100.0, &SolverOptions::default()).unwrap();
        let mean = y.iter().sum::<f64>() / 6.0;
        assert!(r.f_hat.iter().all(|x| (x - mean).abs() < 1e-9));
    }

    #[test]
    fn nullspace_data_is_returned() {
        let d = inc("cycle:5");
        let y = [2.0; 5];
        let r = solve_analysis(&y, &d, 0.3, &SolverOptions::default()).unwrap();
        assert_eq!(r.f_hat, y.to_vec());
        let r = solve_sqrt_analysis(&y, &d, 0.3, &SolverOptions::default()).unwrap();
        assert_eq!(r.f_hat, y.to_vec());
        assert_eq!(r.overfit, Some(true));
    }

    #[test]
    fn cycle_and_grid_certify() {
        for (spec, lambda) in [("cycle:12", 0.05), ("grid:4x5", 0.02), ("tree:1,1,2,2,3,3,4", 0.04)] {
            let d = inc(spec);
            let y: Vec<f64> = (0..d.n()).map(|i| ((i * 7 % 5) as f64) + (i as f64).sin()).collect();
            let r = solve_analysis(&y, &d, lambda, &SolverOptions::default()).unwrap();
            assert!(r.converged, "{spec}: kkt {:?} tol {}", r.kkt_residual, r.kkt_tolerance);
            let reference = dual_cd(&y, &d, lambda);
            let diff: Vec<f64> = r.f_hat.iter().zip(&reference).map(|(a, b)| a - b).collect();
            assert!(norm_n(&diff) < 1e-6, "{spec}");
        }
    }

    #[test]
    fn objective_trace_non_increasing() {
        let d = inc("cycle:30");
        let y: Vec<f64> = (0..30).map(|i| if i < 15 { 0.0 } else { 1.0 } + 0.3 * ((i * i) as f64).sin()).collect();
        let opts = SolverOptions { record_objective: true, polish: false, ..Default::default() };
        let r = solve_analysis(&y, &d, 0.01, &opts).unwrap();
        assert!(r.objective_trace.len() > 2);
        assert!(r.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn sqrt_fixed_point_consistency() {
        let d = inc("path:40");
        let y: Vec<f64> = (0..40).map(|i| if i < 20 { 0.0 } else { 2.0 } + 0.5 * ((i * 13) as f64).sin()).collect();
        let r = solve_sqrt_analysis(&y, &d, 0.08, &SolverOptions::default()).unwrap();
        assert_eq!(r.overfit, Some(false));
        assert!(r.converged);
        let sigma = r.sigma_hat.unwrap();
        assert_eq!(sigma, r.residual_norm_n);
        assert!((r.lambda_used - 0.08 * sigma).abs() <= 1e-8);
        let plain = solve_analysis(&y, &d, 0.08 * sigma, &SolverOptions::default()).unwrap();
        let diff: Vec<f64> = plain.f_hat.iter().zip(&r.f_hat).map(|(a, b)| a - b).collect();
        assert!(norm_n(&diff) < 1e-8);
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = inc("path:3");
        assert!(solve_analysis(&[1.0, 2.0], &d, 0.1, &SolverOptions::default()).is_err());
        assert!(solve_analysis(&[1.0, 2.0, 3.0], &d, -0.1, &SolverOptions::default()).is_err());
        assert!(solve_sqrt_analysis(&[1.0, 2.0, 3.0], &d, 0.0, &SolverOptions::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn matches_dual_coordinate_descent_on_small_paths(
            y in proptest::collection::vec(-3.0f64..3.0, 2..=10),
            lambda in 0.001f64..0.5,
        ) {
            let d = inc(&format!("path:{}", y.len()));
            let r = solve_analysis(&y, &d, lambda, &SolverOptions::default()).unwrap();
            let reference = dual_cd(&y, &d, lambda);
            let diff: Vec<f64> = r.f_hat.iter().zip(&reference).map(|(a, b)| a - b).collect();
            prop_assert!(norm_n(&diff) < 1e-6);
            prop_assert!(r.converged);
        }
    }
}
