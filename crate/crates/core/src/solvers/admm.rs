//! Over-relaxed ADMM for ½‖Y − f‖² + μ‖z‖₁ subject to z = Df, followed by a
//! fused-group polish.

use petgraph::unionfind::UnionFind;

use crate::graph::IncidenceMatrix;
use crate::{norm2, norm_inf};

/// Solver for (I + ρL)x = b with L = D′D.
pub(crate) enum LaplacianSolver {
    /// Exact elimination along a spanning forest (children before parents).
    Forest { parent: Vec<usize>, order: Vec<usize>, deg: Vec<f64> },
    /// Jacobi-preconditioned conjugate gradients.
    Cg { deg: Vec<f64> },
}

const NO_PARENT: usize = usize::MAX;

impl LaplacianSolver {
    pub(crate) fn new(d: &IncidenceMatrix) -> Self {
        let deg = d.degrees();
        if !d.graph().is_forest() {
            return LaplacianSolver::Cg { deg };
        }
        let n = d.n();
        let mut adj = vec![Vec::new(); n];
        for i in 0..d.m() {
            let (a, b) = d.row(i);
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut parent = vec![NO_PARENT; n];
        let mut seen = vec![false; n];
        let mut order = Vec::with_capacity(n);
        for root in 0..n {
            if seen[root] {
                continue;
            }
            seen[root] = true;
            let start = order.len();
            order.push(root);
            let mut head = start;
            while head < order.len() {
                let u = order[head];
                head += 1;
                for &w in &adj[u] {
                    if !seen[w] {
                        seen[w] = true;
                        parent[w] = u;
                        order.push(w);
                    }
                }
            }
        }
        LaplacianSolver::Forest { parent, order, deg }
    }

    pub(crate) fn solve(&self, d: &IncidenceMatrix, rho: f64, b: &[f64], x: &mut [f64], work: &mut CgWork) {
        match self {
            LaplacianSolver::Forest { parent, order, deg } => {
                let diag = &mut work.p;
                let y = &mut work.r;
                for (k, &dg) in deg.iter().enumerate() {
                    diag[k] = 1.0 + rho * dg;
                    y[k] = b[k];
                }
                for &v in order.iter().rev() {
                    let p = parent[v];
                    if p != NO_PARENT {
                        diag[p] -= rho * rho / diag[v];
                        y[p] += rho * y[v] / diag[v];
                    }
                }
                for &v in order {
                    let p = parent[v];
                    let up = if p == NO_PARENT { 0.0 } else { rho * x[p] };
                    x[v] = (y[v] + up) / diag[v];
                }
            }
            LaplacianSolver::Cg { deg } => cg(d, deg, rho, b, x, work),
        }
    }
}

pub(crate) struct CgWork {
    r: Vec<f64>,
    z: Vec<f64>,
    p: Vec<f64>,
    ap: Vec<f64>,
    edge: Vec<f64>,
}

impl CgWork {
    pub(crate) fn new(n: usize, m: usize) -> Self {
        Self { r: vec![0.0; n], z: vec![0.0; n], p: vec![0.0; n], ap: vec![0.0; n], edge: vec![0.0; m] }
    }
}

fn laplacian_apply(d: &IncidenceMatrix, rho: f64, x: &[f64], edge: &mut [f64], out: &mut [f64]) {
    d.apply_into(x, edge);
    d.apply_transpose_into(edge, out);
    for (o, xi) in out.iter_mut().zip(x) {
        *o = xi + rho * *o;
    }
}

fn cg(d: &IncidenceMatrix, deg: &[f64], rho: f64, b: &[f64], x: &mut [f64], w: &mut CgWork) {
    let n = b.len();
    let bnorm = norm2(b).max(1e-300);
    laplacian_apply(d, rho, x, &mut w.edge, &mut w.ap);
    for k in 0..n {
        w.r[k] = b[k] - w.ap[k];
        w.z[k] = w.r[k] / (1.0 + rho * deg[k]);
        w.p[k] = w.z[k];
    }
    let mut rz: f64 = w.r.iter().zip(&w.z).map(|(a, b)| a * b).sum();
    for _ in 0..(10 * n + 50) {
        if norm2(&w.r) <= 1e-13 * bnorm {
            break;
        }
        laplacian_apply(d, rho, &w.p, &mut w.edge, &mut w.ap);
        let pap: f64 = w.p.iter().zip(&w.ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * w.p[k];
            w.r[k] -= alpha * w.ap[k];
            w.z[k] = w.r[k] / (1.0 + rho * deg[k]);
        }
        let rz_new: f64 = w.r.iter().zip(&w.z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            w.p[k] = w.z[k] + beta * w.p[k];
        }
    }
}

/// ½‖Y − f‖² + μ‖Df‖₁.
pub(crate) fn internal_objective(d: &IncidenceMatrix, y: &[f64], f: &[f64], mu: f64, edge: &mut [f64]) -> f64 {
    d.apply_into(f, edge);
    let fit: f64 = y.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * fit + mu * edge.iter().map(|x| x.abs()).sum::<f64>()
}

/// Iterate state kept between calls so fixed-point outer loops can warm start.
#[derive(Clone, Debug)]
pub(crate) struct WarmStart {
    pub f: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub rho: f64,
}

pub(crate) struct AdmmOutput {
    pub f: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
    pub state: WarmStart,
}

pub(crate) struct AdmmSettings {
    pub max_iter: usize,
    pub tol: f64,
    pub relaxation: f64,
    pub record: bool,
}

pub(crate) fn admm(
    d: &IncidenceMatrix,
    lap: &LaplacianSolver,
    y: &[f64],
    mu: f64,
    settings: &AdmmSettings,
    warm: Option<&WarmStart>,
) -> AdmmOutput {
    let (n, m) = (d.n(), d.m());
    let mut work = CgWork::new(n, m);
    let (mut f, mut z, mut u, mut rho) = match warm {
        Some(w) => (w.f.clone(), w.z.clone(), w.u.clone(), w.rho),
        None => (y.to_vec(), d.apply(y), vec![0.0; m], 1.0),
    };
    let scale = norm_inf(y).max(f64::MIN_POSITIVE);
    let eps_abs = settings.tol * scale;
    let (sqrt_m, sqrt_n) = ((m as f64).sqrt(), (n as f64).sqrt());
    let alpha = settings.relaxation;

    let mut edge = vec![0.0; m];
    let mut best = f.clone();
    let mut best_obj = internal_objective(d, y, &f, mu, &mut edge);
    let mut trace = Vec::new();
    if settings.record {
        trace.push(best_obj);
    }
    let mut rhs = vec![0.0; n];
    let mut df = vec![0.0; m];
    let mut zhat = vec![0.0; m];
    let mut z_old = vec![0.0; m];
    let mut tmp_n = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;

    for k in 1..=settings.max_iter {
        iterations = k;
        for e in 0..m {
            edge[e] = z[e] - u[e];
        }
        d.apply_transpose_into(&edge, &mut rhs);
        for v in 0..n {
            rhs[v] = y[v] + rho * rhs[v];
        }
        lap.solve(d, rho, &rhs, &mut f, &mut work);
        d.apply_into(&f, &mut df);
        let thresh = mu / rho;
        z_old.copy_from_slice(&z);
        for e in 0..m {
            zhat[e] = alpha * df[e] + (1.0 - alpha) * z[e];
            let a = zhat[e] + u[e];
            z[e] = if a > thresh {
                a - thresh
            } else if a < -thresh {
                a + thresh
            } else {
                0.0
            };
            u[e] += zhat[e] - z[e];
        }

        let obj = internal_objective(d, y, &f, mu, &mut edge);
        if obj < best_obj {
            best_obj = obj;
            best.copy_from_slice(&f);
        }
        if settings.record {
            trace.push(best_obj);
        }

        let r_pri = df.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        for e in 0..m {
            edge[e] = z[e] - z_old[e];
        }
        d.apply_transpose_into(&edge, &mut tmp_n);
        let r_dual = rho * norm2(&tmp_n);
        let eps_pri = sqrt_m * eps_abs + settings.tol * norm2(&df).max(norm2(&z));
        d.apply_transpose_into(&u, &mut tmp_n);
        let eps_dual = sqrt_n * eps_abs + settings.tol * rho * norm2(&tmp_n);
        if r_pri <= eps_pri && r_dual <= eps_dual {
            converged = true;
            break;
        }
        if k % 10 == 0 {
            if r_pri > 10.0 * r_dual && rho < 1e8 {
                rho *= 2.0;
                u.iter_mut().for_each(|x| *x /= 2.0);
            } else if r_dual > 10.0 * r_pri && rho > 1e-8 {
                rho /= 2.0;
                u.iter_mut().for_each(|x| *x *= 2.0);
            }
        }
    }
    let state = WarmStart { f: f.clone(), z, u, rho };
    AdmmOutput { f: best, objective: best_obj, iterations, converged, trace, state }
}

/// Given a fusion pattern (edges treated as zero) and the signs of the
/// remaining edges, the optimum is constant on each fused group with level
/// mean(Y) − μ·b_g/|g|, b_g the signed count of jump edges entering g.
/// Returns None when the pattern is inconsistent (a jump inside a group or a
/// level ordering that contradicts a sign).
pub(crate) fn polish(d: &IncidenceMatrix, y: &[f64], mu: f64, signs: &[f64]) -> Option<Vec<f64>> {
    let n = d.n();
    let mut uf = UnionFind::<usize>::new(n);
    for (e, &s) in signs.iter().enumerate() {
        if s == 0.0 {
            let (a, b) = d.row(e);
            uf.union(a, b);
        }
    }
    let labels: Vec<usize> = (0..n).map(|v| uf.find(v)).collect();
    let mut sum = vec![0.0; n];
    let mut count = vec![0.0; n];
    let mut b = vec![0.0; n];
    for v in 0..n {
        sum[labels[v]] += y[v];
        count[labels[v]] += 1.0;
    }
    for (e, &s) in signs.iter().enumerate() {
        if s != 0.0 {
            let (t, h) = d.row(e);
            if labels[t] == labels[h] {
                return None;
            }
            b[labels[h]] += s;
            b[labels[t]] -= s;
        }
    }
    let level: Vec<f64> = (0..n)
        .map(|g| if count[g] > 0.0 { (sum[g] - mu * b[g]) / count[g] } else { 0.0 })
        .collect();
    for (e, &s) in signs.iter().enumerate() {
        if s != 0.0 {
            let (t, h) = d.row(e);
            if s * (level[labels[h]] - level[labels[t]]) <= 0.0 {
                return None;
            }
        }
    }
    Some(labels.iter().map(|&g| level[g]).collect())
}
