//! KKT certificate: min over admissible subgradients v of ‖(Y − f)/n − λD′v‖_∞.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus};

use crate::graph::IncidenceMatrix;
use crate::norm_inf;

/// Attained value of the best multiplier. Rows with |(Df)_i| above
/// 1e−6·‖Df‖_∞ have their multiplier fixed to the sign; the rest range over [−1, 1].
pub fn kkt_residual(y: &[f64], f_hat: &[f64], d: &IncidenceMatrix, lambda: f64) -> f64 {
    let n = d.n();
    let nf = n as f64;
    let r: Vec<f64> = y.iter().zip(f_hat).map(|(a, b)| (a - b) / nf).collect();
    if lambda <= 0.0 {
        return norm_inf(&r);
    }
    let df = d.apply(f_hat);
    let active_tol = 1e-6 * norm_inf(&df);
    let mut v = vec![0.0; d.m()];
    let mut free = Vec::new();
    for (i, &x) in df.iter().enumerate() {
        if x.abs() > active_tol && x != 0.0 {
            v[i] = x.signum();
        } else {
            free.push(i);
        }
    }
    // scaled target c = r/λ − D_A′s_A
    let fixed = d.apply_transpose(&v);
    let c: Vec<f64> = r.iter().zip(&fixed).map(|(a, b)| a / lambda - b).collect();
    let attained = |v: &[f64]| {
        let dv = d.apply_transpose(v);
        lambda * c.iter().zip(&dv).zip(&fixed).map(|((ci, a), b)| (ci - (a - b)).abs()).fold(0.0, f64::max)
    };
    let baseline = attained(&v);
    if free.is_empty() {
        return baseline;
    }
    match solve_lp(d, &free, &c) {
        Some(sol) => {
            let mut cand = v.clone();
            for (k, &i) in free.iter().enumerate() {
                cand[i] = sol[k].clamp(-1.0, 1.0);
            }
            attained(&cand).min(baseline)
        }
        None => baseline,
    }
}

/// min t s.t. |c_j − (D_F′v)_j| ≤ t, |v| ≤ 1. Variables (v_F, t).
fn solve_lp(d: &IncidenceMatrix, free: &[usize], c: &[f64]) -> Option<Vec<f64>> {
    let n = d.n();
    let k = free.len();
    let rows = 2 * n + 2 * k;
    let mut colptr = Vec::with_capacity(k + 2);
    let mut rowval = Vec::with_capacity(6 * k + 2 * n);
    let mut nzval = Vec::with_capacity(6 * k + 2 * n);
    colptr.push(0);
    for (j, &e) in free.iter().enumerate() {
        let (t, h) = d.row(e);
        // rows 0..n: −(D_F′v)_j − t ≤ −c_j ; rows n..2n: (D_F′v)_j − t ≤ c_j
        let mut entries = vec![(h, -1.0), (t, 1.0), (n + h, 1.0), (n + t, -1.0), (2 * n + j, 1.0), (2 * n + k + j, -1.0)];
        entries.sort_by_key(|e| e.0);
        for (r, x) in entries {
            rowval.push(r);
            nzval.push(x);
        }
        colptr.push(rowval.len());
    }
    for r in 0..2 * n {
        rowval.push(r);
        nzval.push(-1.0);
    }
    colptr.push(rowval.len());
    let a = CscMatrix::new(rows, k + 1, colptr, rowval, nzval);
    let mut b = Vec::with_capacity(rows);
    b.extend(c.iter().map(|x| -x));
    b.extend_from_slice(c);
    b.extend(std::iter::repeat_n(1.0, 2 * k));
    let mut q = vec![0.0; k + 1];
    q[k] = 1.0;
    let p = CscMatrix::zeros((k + 1, k + 1));
    let cones = [NonnegativeConeT(rows)];
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_gap_abs(1e-12)
        .tol_gap_rel(1e-12)
        .tol_feas(1e-12)
        .max_iter(200)
        .build()
        .ok()?;
    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings).ok()?;
    solver.solve();
    match solver.solution.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved | SolverStatus::MaxIterations | SolverStatus::InsufficientProgress => {
            Some(solver.solution.x[..k].to_vec())
        }
        _ => None,
    }
}
