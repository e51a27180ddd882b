//! Pseudoinverses of D_{-S}, projections onto N(D_{-S}), antiprojection
//! lengths, the inverse scaling factor and the weights.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{is_admissible, ActiveSet, IncidenceMatrix};
use crate::linalg;

/// Per-component block of D⁺_{-S}.
#[derive(Clone, Debug)]
enum Block {
    /// Spanning tree of the component. Column for edge j is
    /// sign_j·(1_{subtree(child_j)} − size_j/n_c).
    Tree {
        vertices: Vec<usize>,
        cols: Vec<usize>,
        /// local index of the endpoint farther from the root, per local column
        child: Vec<usize>,
        sign: Vec<f64>,
        subtree: Vec<usize>,
        /// local parent (usize::MAX for root) and BFS order
        parent: Vec<usize>,
        order: Vec<usize>,
    },
    Dense {
        vertices: Vec<usize>,
        cols: Vec<usize>,
        pinv: DMatrix<f64>,
    },
}

/// Block-diagonal Moore–Penrose pseudoinverse of D_{-S} (n × (m−s)).
#[derive(Clone, Debug)]
pub struct PseudoInverse {
    n: usize,
    ncols: usize,
    blocks: Vec<Block>,
    /// (block, local column) for each global column
    locate: Vec<(usize, usize)>,
}

pub fn pseudoinverse(d: &IncidenceMatrix, s: &ActiveSet) -> Result<PseudoInverse> {
    let free = s.free_rows();
    if free.is_empty() {
        return Err(Error::NoRowsToInvert);
    }
    let labels = s.labels();
    let mut rows_by_comp: Vec<Vec<usize>> = vec![Vec::new(); s.r_s()];
    for (pos, &i) in free.iter().enumerate() {
        rows_by_comp[labels[d.row(i).0]].push(pos);
    }
    let blocks: Vec<Block> = s
        .components
        .par_iter()
        .zip(rows_by_comp.par_iter())
        .map(|(comp, cols)| build_block(d, free, comp, cols))
        .collect();
    let mut locate = vec![(0, 0); free.len()];
    for (b, block) in blocks.iter().enumerate() {
        for (k, &c) in block.cols().iter().enumerate() {
            locate[c] = (b, k);
        }
    }
    Ok(PseudoInverse { n: d.n(), ncols: free.len(), blocks, locate })
}

fn build_block(d: &IncidenceMatrix, free: &[usize], comp: &[usize], cols: &[usize]) -> Block {
    let vertices: Vec<usize> = comp.iter().map(|v| v - 1).collect();
    let nc = vertices.len();
    let local = |v: usize| vertices.binary_search(&v).expect("endpoint inside its component");
    if cols.len() + 1 == nc {
        // connected with n_c − 1 edges: a spanning tree rooted at the smallest vertex
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nc];
        for (k, &c) in cols.iter().enumerate() {
            let (a, b) = d.row(free[c]);
            let (a, b) = (local(a), local(b));
            adj[a].push((b, k));
            adj[b].push((a, k));
        }
        let mut parent = vec![usize::MAX; nc];
        let mut parent_col = vec![usize::MAX; nc];
        let mut seen = vec![false; nc];
        let mut order = Vec::with_capacity(nc);
        seen[0] = true;
        order.push(0);
        let mut head = 0;
        while head < order.len() {
            let u = order[head];
            head += 1;
            for &(w, k) in &adj[u] {
                if !seen[w] {
                    seen[w] = true;
                    parent[w] = u;
                    parent_col[w] = k;
                    order.push(w);
                }
            }
        }
        let mut subtree = vec![1usize; nc];
        for &u in order.iter().skip(1).rev() {
            subtree[parent[u]] += subtree[u];
        }
        let mut child = vec![0; cols.len()];
        let mut sign = vec![0.0; cols.len()];
        for &u in order.iter().skip(1) {
            let k = parent_col[u];
            child[k] = u;
            let (_, h) = d.row(free[cols[k]]);
            sign[k] = if local(h) == u { 1.0 } else { -1.0 };
        }
        Block::Tree { vertices, cols: cols.to_vec(), child, sign, subtree, parent, order }
    } else {
        let mut sub = DMatrix::zeros(cols.len(), nc);
        for (r, &c) in cols.iter().enumerate() {
            let (a, b) = d.row(free[c]);
            sub[(r, local(a))] = -1.0;
            sub[(r, local(b))] = 1.0;
        }
        Block::Dense { vertices, cols: cols.to_vec(), pinv: linalg::pinv(&sub) }
    }
}

impl Block {
    fn cols(&self) -> &[usize] {
        match self {
            Block::Tree { cols, .. } | Block::Dense { cols, .. } => cols,
        }
    }

    fn vertices(&self) -> &[usize] {
        match self {
            Block::Tree { vertices, .. } | Block::Dense { vertices, .. } => vertices,
        }
    }
}

impl PseudoInverse {
    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Number of blocks handled by the closed-form tree representation.
    pub fn tree_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| matches!(b, Block::Tree { .. })).count()
    }

    /// Column j (position within D_{-S}) as a dense length-n vector.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let (b, k) = self.locate[j];
        let mut out = vec![0.0; self.n];
        match &self.blocks[b] {
            Block::Tree { vertices, child, sign, subtree, parent, order, .. } => {
                let nc = vertices.len() as f64;
                let shift = subtree[child[k]] as f64 / nc;
                let mut inside = vec![false; vertices.len()];
                inside[child[k]] = true;
                for &u in order.iter().skip(1) {
                    if inside[parent[u]] {
                        inside[u] = true;
                    }
                }
                for (l, &v) in vertices.iter().enumerate() {
                    out[v] = sign[k] * (if inside[l] { 1.0 } else { 0.0 } - shift);
                }
            }
            Block::Dense { vertices, pinv, .. } => {
                for (l, &v) in vertices.iter().enumerate() {
                    out[v] = pinv[(l, k)];
                }
            }
        }
        out
    }

    /// ℓ² norm of column j.
    pub fn column_norm(&self, j: usize) -> f64 {
        let (b, k) = self.locate[j];
        match &self.blocks[b] {
            Block::Tree { vertices, child, subtree, .. } => {
                let nc = vertices.len() as f64;
                let size = subtree[child[k]] as f64;
                (size * (nc - size) / nc).sqrt()
            }
            Block::Dense { pinv, .. } => pinv.column(k).norm(),
        }
    }

    /// (D⁺_{-S})′v, one entry per row of D_{-S}.
    pub fn transpose_apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for block in &self.blocks {
            match block {
                Block::Tree { vertices, cols, child, sign, subtree, parent, order, .. } => {
                    let nc = vertices.len() as f64;
                    let mut sums: Vec<f64> = vertices.iter().map(|&u| v[u]).collect();
                    let total: f64 = sums.iter().sum();
                    for &u in order.iter().skip(1).rev() {
                        sums[parent[u]] += sums[u];
                    }
                    for (k, &c) in cols.iter().enumerate() {
                        let u = child[k];
                        out[c] = sign[k] * (sums[u] - subtree[u] as f64 / nc * total);
                    }
                }
                Block::Dense { vertices, cols, pinv } => {
                    for (k, &c) in cols.iter().enumerate() {
                        out[c] = vertices.iter().enumerate().map(|(l, &u)| pinv[(l, k)] * v[u]).sum();
                    }
                }
            }
        }
        out
    }

    /// D⁺_{-S}u for u indexed by the rows of D_{-S}.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for block in &self.blocks {
            match block {
                Block::Tree { vertices, cols, child, sign, subtree, parent, order } => {
                    let nc = vertices.len() as f64;
                    let mut acc = vec![0.0; vertices.len()];
                    let mut shift = 0.0;
                    for (k, &c) in cols.iter().enumerate() {
                        let coef = sign[k] * u[c];
                        acc[child[k]] += coef;
                        shift += coef * subtree[child[k]] as f64 / nc;
                    }
                    for &w in order.iter().skip(1) {
                        acc[w] += acc[parent[w]];
                    }
                    for (l, &v) in vertices.iter().enumerate() {
                        out[v] = acc[l] - shift;
                    }
                }
                Block::Dense { vertices, cols, pinv } => {
                    for (l, &v) in vertices.iter().enumerate() {
                        out[v] = cols.iter().enumerate().map(|(k, &c)| pinv[(l, k)] * u[c]).sum();
                    }
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.ncols);
        for j in 0..self.ncols {
            m.set_column(j, &nalgebra::DVector::from_vec(self.column(j)));
        }
        m
    }

    /// Vertices (0-indexed) of each block in component order.
    pub fn block_vertices(&self) -> Vec<Vec<usize>> {
        self.blocks.iter().map(|b| b.vertices().to_vec()).collect()
    }
}

/// Π_{N(D_{-S})}v: the mean of v on each component, replicated.
pub fn project_nullspace(s: &ActiveSet, v: &[f64]) -> Vec<f64> {
    let labels = s.labels();
    let mut sums = vec![0.0; s.r_s()];
    let mut counts = vec![0usize; s.r_s()];
    for (x, &l) in v.iter().zip(labels) {
        sums[l] += x;
        counts[l] += 1;
    }
    labels.iter().map(|&l| sums[l] / counts[l] as f64).collect()
}

/// (I − Π_{N(D_{-S})})v.
pub fn antiproject(s: &ActiveSet, v: &[f64]) -> Vec<f64> {
    let p = project_nullspace(s, v);
    v.iter().zip(p).map(|(a, b)| a - b).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub omega: Vec<f64>,
    pub gamma: f64,
    pub weights: Vec<f64>,
    #[serde(rename = "r_S")]
    pub r_s: usize,
    pub component_sizes: Vec<usize>,
}

pub fn theory_report(d: &IncidenceMatrix, s: &ActiveSet) -> Result<TheoryReport> {
    if !is_admissible(d, s) {
        return Err(Error::Inadmissible);
    }
    let pinv = pseudoinverse(d, s)?;
    theory_report_with(d, s, &pinv)
}

pub(crate) fn theory_report_with(d: &IncidenceMatrix, s: &ActiveSet, pinv: &PseudoInverse) -> Result<TheoryReport> {
    let sqrt_n = (d.n() as f64).sqrt();
    let omega: Vec<f64> = (0..d.m())
        .map(|i| match s.free_position(i) {
            Some(j) => pinv.column_norm(j) / sqrt_n,
            None => 0.0,
        })
        .collect();
    let gamma = omega.iter().cloned().fold(0.0, f64::max);
    if gamma <= 0.0 {
        return Err(Error::ZeroGamma);
    }
    let weights = (0..d.m())
        .map(|i| if s.contains_row(i) { 1.0 } else { 1.0 - omega[i] / gamma })
        .collect();
    Ok(TheoryReport { omega, gamma, weights, r_s: s.r_s(), component_sizes: s.component_sizes() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundFamily {
    Tree,
    Cycle,
    Grid,
}

/// Closed-form upper bound on γ: √((n_max+1)/(4n)) for trees and cycles,
/// C·√(log(n_max)/n) for grids with a caller-supplied C.
pub fn gamma_bound(family: BoundFamily, n: usize, n_max: usize, grid_constant: Option<f64>) -> Result<f64> {
    if n == 0 || n_max == 0 || n_max > n {
        return Err(Error::InvalidParameter(format!("need 1 <= n_max <= n, got n_max={n_max}, n={n}")));
    }
    let nf = n as f64;
    match family {
        BoundFamily::Tree => Ok(((n_max as f64 + 1.0) / (4.0 * nf)).sqrt()),
        BoundFamily::Cycle => {
            if n_max == n {
                return Err(Error::Hypothesis("cycle bound needs a nonempty active set (n_max < n)".into()));
            }
            Ok(((n_max as f64 + 1.0) / (4.0 * nf)).sqrt())
        }
        BoundFamily::Grid => {
            let c = grid_constant
                .ok_or_else(|| Error::InvalidParameter("grid bound needs grid_constant".into()))?;
            if c <= 0.0 {
                return Err(Error::InvalidParameter("grid_constant must be positive".into()));
            }
            Ok(c * ((n_max as f64).ln() / nf).sqrt())
        }
    }
}

/// i(n−i)/n, the squared column norm of a path pseudoinverse.
pub fn g(i: usize, n: usize) -> f64 {
    (i * (n - i)) as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{active_set, build_graph, random_tree, GraphFamily};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(spec: &str, s: &[usize]) -> (IncidenceMatrix, ActiveSet) {
        let graph = build_graph(&spec.parse().unwrap()).unwrap();
        let a = active_set(&graph, s).unwrap();
        (graph.incidence(), a)
    }

    fn check_moore_penrose(d: &IncidenceMatrix, s: &ActiveSet) {
        let dm = d.rows_dense(s.free_rows());
        let p = pseudoinverse(d, s).unwrap().to_dense();
        let tol = 1e-10;
        assert!((&dm * &p * &dm - &dm).amax() < tol);
        assert!((&p * &dm * &p - &p).amax() < tol);
        let dp = &dm * &p;
        assert!((&dp - dp.transpose()).amax() < tol);
        let pd = &p * &dm;
        assert!((&pd - pd.transpose()).amax() < tol);
        assert!((p - linalg::pinv(&dm)).amax() < 1e-9);
    }

    #[test]
    fn path2_pinv() {
        let (d, s) = setup("path:2", &[]);
        let p = pseudoinverse(&d, &s).unwrap().to_dense();
        assert!((p[(0, 0)] + 0.5).abs() < 1e-15 && (p[(1, 0)] - 0.5).abs() < 1e-15);
        // D⁺ = D'(DD')⁻¹ by hand: D' / 2
        let dm = d.to_dense();
        let direct = dm.transpose() * (&dm * dm.transpose()).try_inverse().unwrap();
        assert!((p - direct).amax() < 1e-15);
    }

    #[test]
    fn moore_penrose_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (spec, sets) in [
            ("path:6", vec![vec![], vec![3], vec![1, 4]]),
            ("cycle:7", vec![vec![], vec![2, 5], vec![1, 3, 6]]),
            ("grid:3x3", vec![vec![], vec![1, 7], vec![2, 3, 9, 12]]),
            ("tree:1,1,2,2,3,5", vec![vec![], vec![2], vec![1, 5]]),
        ] {
            for s in sets {
                let (d, a) = setup(spec, &s);
                check_moore_penrose(&d, &a);
            }
        }
        for _ in 0..20 {
            let n = rng.random_range(2..30);
            let graph = build_graph(&random_tree(n, &mut rng)).unwrap();
            let s: Vec<usize> = (1..n).filter(|_| rng.random_bool(0.3)).collect();
            if s.len() == n - 1 {
                continue;
            }
            let a = active_set(&graph, &s).unwrap();
            check_moore_penrose(&graph.incidence(), &a);
        }
    }

    #[test]
    fn block_structure_path6() {
        let (d, s) = setup("path:6", &[3]);
        let p = pseudoinverse(&d, &s).unwrap();
        assert_eq!(p.block_vertices(), vec![vec![0, 1, 2], vec![3, 4, 5]]);
        let m = p.to_dense();
        for j in 0..2 {
            for v in 3..6 {
                assert_eq!(m[(v, j)], 0.0);
            }
        }
        for j in 2..4 {
            for v in 0..3 {
                assert_eq!(m[(v, j)], 0.0);
            }
        }
    }

    #[test]
    fn path_column_norm_closed_form() {
        for ni in 2..=24 {
            let (d, s) = setup(&format!("path:{ni}"), &[]);
            let p = pseudoinverse(&d, &s).unwrap();
            for j in 1..ni {
                let col = p.column(j - 1);
                let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - g(j, ni).sqrt()).abs() < 1e-10);
                assert!((p.column_norm(j - 1) - norm).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn implicit_products_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (spec, s) in [("tree:1,1,2,3,3,1,7", vec![2, 6]), ("grid:3x4", vec![1, 2, 9]), ("cycle:9", vec![3, 7])] {
            let (d, a) = setup(spec, &s);
            let p = pseudoinverse(&d, &a).unwrap();
            let m = p.to_dense();
            let v: Vec<f64> = (0..d.n()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u: Vec<f64> = (0..p.ncols()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let tv = m.transpose() * nalgebra::DVector::from_vec(v.clone());
            let av = &m * nalgebra::DVector::from_vec(u.clone());
            for (x, y) in p.transpose_apply(&v).iter().zip(tv.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in p.apply(&u).iter().zip(av.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projection_examples() {
        let (_, s) = setup("path:4", &[]);
        assert_eq!(project_nullspace(&s, &[1., 2., 3., 4.]), vec![2.5; 4]);
        let (d, s) = setup("path:4", &[2]);
        assert_eq!(project_nullspace(&s, &[1., 3., 5., 7.]), vec![2., 2., 6., 6.]);
        // rowspan(D_{-S}) is fixed by the antiprojection
        let rows = d.rows_dense(s.free_rows());
        let v = rows.transpose() * nalgebra::DVector::from_vec(vec![0.3, -1.2]);
        let back = antiproject(&s, v.as_slice());
        for (a, b) in back.iter().zip(v.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        // idempotent, Π + A = I
        let x = [0.1, -2.0, 5.0, 3.3];
        let p = project_nullspace(&s, &x);
        assert_eq!(project_nullspace(&s, &p), p);
        let a = antiproject(&s, &x);
        for i in 0..4 {
            assert!((p[i] + a[i] - x[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn theory_report_small() {
        let (d, s) = setup("path:2", &[]);
        let r = theory_report(&d, &s).unwrap();
        // (DD')⁻¹/n = (1/2)/2
        assert!((r.omega[0] - 0.25f64.sqrt()).abs() < 1e-15);
        assert!((r.gamma - 0.5).abs() < 1e-15);
        assert_eq!(r.weights, vec![0.0]);
        let (d, s) = setup("path:3", &[]);
        let r = theory_report(&d, &s).unwrap();
        assert!((r.omega[0] - r.omega[1]).abs() < 1e-15);
        assert!(r.weights.iter().all(|&w| w.abs() < 1e-15));
        let (d, s) = setup("path:3", &[1, 2]);
        assert!(matches!(theory_report(&d, &s), Err(Error::NoRowsToInvert)));
        let (d, s) = setup("cycle:5", &[2]);
        assert!(matches!(theory_report(&d, &s), Err(Error::Inadmissible)));
    }

    #[test]
    fn omega_matches_gram_inverse_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = rng.random_range(3..40);
            let graph = build_graph(&random_tree(n, &mut rng)).unwrap();
            let s: Vec<usize> = (1..n).filter(|_| rng.random_bool(0.2)).collect();
            if s.len() == n - 1 {
                continue;
            }
            let a = active_set(&graph, &s).unwrap();
            let d = graph.incidence();
            let r = theory_report(&d, &a).unwrap();
            let dm = d.rows_dense(a.free_rows());
            let gram_inv = (&dm * dm.transpose()).try_inverse().unwrap();
            for (pos, &i) in a.free_rows().iter().enumerate() {
                let expect = (gram_inv[(pos, pos)] / n as f64).sqrt();
                assert!((r.omega[i] - expect).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn weights_properties() {
        for (spec, s) in [("path:20", vec![5, 12]), ("cycle:16", vec![4, 9, 16]), ("grid:4x4", vec![1, 13])] {
            let (d, a) = setup(spec, &s);
            let r = theory_report(&d, &a).unwrap();
            let min = r.weights.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(min, 0.0);
            assert!(r.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
            for &i in &a.s {
                assert_eq!(r.weights[i - 1], 1.0);
                assert_eq!(r.omega[i - 1], 0.0);
            }
        }
    }

    #[test]
    fn gamma_bound_examples() {
        let b = gamma_bound(BoundFamily::Tree, 2, 2, None).unwrap();
        assert!((b - (3.0f64 / 8.0).sqrt()).abs() < 1e-15);
        let (d, s) = setup("path:2", &[]);
        assert!(theory_report(&d, &s).unwrap().gamma <= b);
        let big = gamma_bound(BoundFamily::Tree, 1_000_000, 1_000_000, None).unwrap();
        assert!((big - 0.5).abs() < 1e-6);
        assert!(gamma_bound(BoundFamily::Grid, 16, 16, None).is_err());
        assert!(gamma_bound(BoundFamily::Cycle, 16, 16, None).is_err());
        // i(n−i)/n is largest at n/2
        for n in (2..40).step_by(2) {
            let best = (1..n).max_by(|&a, &b| g(a, n).partial_cmp(&g(b, n)).unwrap()).unwrap();
            assert_eq!(g(best, n), g(n / 2, n));
        }
    }

    #[test]
    fn gamma_bound_holds_on_paths_cycles_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut cases: Vec<(GraphFamily, BoundFamily)> = Vec::new();
        for n in [5usize, 12, 31, 50] {
            cases.push((GraphFamily::Path { n }, BoundFamily::Tree));
            cases.push((GraphFamily::Cycle { n }, BoundFamily::Cycle));
            cases.push((random_tree(n, &mut rng), BoundFamily::Tree));
        }
        for (fam, bf) in cases {
            let graph = build_graph(&fam).unwrap();
            let d = graph.incidence();
            for _ in 0..40 {
                let s: Vec<usize> = (1..=graph.m()).filter(|_| rng.random_bool(0.15)).collect();
                let a = active_set(&graph, &s).unwrap();
                if !is_admissible(&d, &a) || a.free_rows().is_empty() || (bf == BoundFamily::Cycle && s.is_empty()) {
                    continue;
                }
                let r = theory_report(&d, &a).unwrap();
                let bound = gamma_bound(bf, graph.n(), a.n_max(), None).unwrap();
                assert!(r.gamma <= bound, "{fam} S={s:?}: {} > {}", r.gamma, bound);
            }
        }
    }
}
