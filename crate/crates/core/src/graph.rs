//! Directed graphs, incidence matrices and active sets.
//!
//! Vertices and edges are 1-indexed at every public boundary (constructors,
//! file formats, active-set indices). Internally rows and vertices are
//! stored 0-indexed.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::DMatrix;
use petgraph::unionfind::UnionFind;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectedGraph {
    n: usize,
    /// (tail, head) pairs, 1-indexed, in row order of the incidence matrix.
    edges: Vec<(usize, usize)>,
}

impl DirectedGraph {
    pub fn new(n: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGraph("graph needs at least one vertex".into()));
        }
        for (i, &(a, b)) in edges.iter().enumerate() {
            if a == 0 || b == 0 || a > n || b > n {
                return Err(Error::InvalidGraph(format!(
                    "edge {} = ({a}, {b}) has an endpoint outside 1..={n}",
                    i + 1
                )));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("edge {} is a self-loop at vertex {a}", i + 1)));
            }
        }
        Ok(Self { n, edges })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn incidence(&self) -> IncidenceMatrix {
        IncidenceMatrix {
            n: self.n,
            tails: self.edges.iter().map(|e| e.0 - 1).collect(),
            heads: self.edges.iter().map(|e| e.1 - 1).collect(),
        }
    }

    /// Parses the plain-text format: a header line "n m" followed by m lines "tail head".
    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut tokens = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let line = line.split('#').next().unwrap_or("");
            for tok in line.split_whitespace() {
                tokens.push(
                    tok.parse::<usize>()
                        .map_err(|_| Error::Parse(format!("expected a non-negative integer, found {tok:?}")))?,
                );
            }
        }
        if tokens.len() < 2 {
            return Err(Error::Parse("graph file needs a header line \"n m\"".into()));
        }
        let (n, m) = (tokens[0], tokens[1]);
        let rest = &tokens[2..];
        if rest.len() != 2 * m {
            return Err(Error::Parse(format!(
                "header announces {m} edges but {} endpoint values follow",
                rest.len()
            )));
        }
        let edges = rest.chunks(2).map(|c| (c[0], c[1])).collect();
        Self::new(n, edges)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.n, self.m())?;
        for &(a, b) in &self.edges {
            writeln!(w, "{a} {b}")?;
        }
        Ok(())
    }

    /// Component label (0-based, ordered by smallest vertex) for every vertex,
    /// using only the edges whose row is not marked in `removed`.
    pub(crate) fn component_labels(&self, removed: &[bool]) -> (Vec<usize>, usize) {
        let mut uf = UnionFind::<usize>::new(self.n);
        for (i, &(a, b)) in self.edges.iter().enumerate() {
            if !removed[i] {
                uf.union(a - 1, b - 1);
            }
        }
        let mut root_label = vec![usize::MAX; self.n];
        let mut labels = vec![0; self.n];
        let mut count = 0;
        for v in 0..self.n {
            let r = uf.find(v);
            if root_label[r] == usize::MAX {
                root_label[r] = count;
                count += 1;
            }
            labels[v] = root_label[r];
        }
        (labels, count)
    }

    /// True when the underlying undirected multigraph has no cycle.
    pub fn is_forest(&self) -> bool {
        let mut uf = UnionFind::<usize>::new(self.n);
        self.edges.iter().all(|&(a, b)| uf.union(a - 1, b - 1))
    }
}

/// Graph families with canonical edge orderings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "lowercase")]
pub enum GraphFamily {
    Path { n: usize },
    Cycle { n: usize },
    Grid { height: usize, width: usize },
    /// `parents[k]` is the parent of vertex k+2; vertex 1 is the root.
    Tree { parents: Vec<usize> },
}

impl GraphFamily {
    pub fn n(&self) -> usize {
        match self {
            GraphFamily::Path { n } | GraphFamily::Cycle { n } => *n,
            GraphFamily::Grid { height, width } => height * width,
            GraphFamily::Tree { parents } => parents.len() + 1,
        }
    }
}

impl fmt::Display for GraphFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphFamily::Path { n } => write!(f, "path:{n}"),
            GraphFamily::Cycle { n } => write!(f, "cycle:{n}"),
            GraphFamily::Grid { height, width } => write!(f, "grid:{height}x{width}"),
            GraphFamily::Tree { parents } => {
                let p: Vec<String> = parents.iter().map(|p| p.to_string()).collect();
                write!(f, "tree:{}", p.join(","))
            }
        }
    }
}

impl FromStr for GraphFamily {
    type Err = Error;

    /// Accepts `path:N`, `cycle:N`, `grid:HxW` and `tree:P2,P3,...`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, params) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("graph spec {s:?} must look like family:params")))?;
        let num = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad integer {t:?} in graph spec {s:?}")))
        };
        match kind.trim().to_ascii_lowercase().as_str() {
            "path" => Ok(GraphFamily::Path { n: num(params)? }),
            "cycle" => Ok(GraphFamily::Cycle { n: num(params)? }),
            "grid" => {
                let (h, w) = params
                    .split_once(['x', 'X'])
                    .ok_or_else(|| Error::Parse(format!("grid spec {s:?} must look like grid:HxW")))?;
                Ok(GraphFamily::Grid { height: num(h)?, width: num(w)? })
            }
            "tree" => {
                let parents = if params.trim().is_empty() {
                    Vec::new()
                } else {
                    params.split(',').map(num).collect::<Result<Vec<_>>>()?
                };
                Ok(GraphFamily::Tree { parents })
            }
            other => Err(Error::Parse(format!("unknown graph family {other:?}"))),
        }
    }
}

pub fn build_graph(family: &GraphFamily) -> Result<DirectedGraph> {
    match family {
        GraphFamily::Path { n } => {
            if *n < 2 {
                return Err(Error::InvalidGraph(format!("path needs n >= 2, got {n}")));
            }
            DirectedGraph::new(*n, (1..*n).map(|i| (i, i + 1)).collect())
        }
        GraphFamily::Cycle { n } => {
            if *n < 3 {
                return Err(Error::InvalidGraph(format!("cycle needs n >= 3, got {n}")));
            }
            let mut edges: Vec<_> = (1..*n).map(|i| (i, i + 1)).collect();
            edges.push((*n, 1));
            DirectedGraph::new(*n, edges)
        }
        GraphFamily::Grid { height, width } => {
            let (h, w) = (*height, *width);
            if h == 0 || w == 0 || h * w < 2 {
                return Err(Error::InvalidGraph(format!("grid needs at least 2 vertices, got {h}x{w}")));
            }
            let id = |r: usize, c: usize| r * w + c + 1;
            let mut edges = Vec::with_capacity(h * (w - 1) + (h - 1) * w);
            for r in 0..h {
                for c in 0..w - 1 {
                    edges.push((id(r, c), id(r, c + 1)));
                }
            }
            for r in 0..h - 1 {
                for c in 0..w {
                    edges.push((id(r, c), id(r + 1, c)));
                }
            }
            DirectedGraph::new(h * w, edges)
        }
        GraphFamily::Tree { parents } => {
            let n = parents.len() + 1;
            if n < 2 {
                return Err(Error::InvalidGraph("tree needs n >= 2 (at least one parent entry)".into()));
            }
            for (k, &p) in parents.iter().enumerate() {
                let v = k + 2;
                if p == 0 || p > n {
                    return Err(Error::InvalidParents(format!("parent {p} of vertex {v} is out of range 1..={n}")));
                }
                if p == v {
                    return Err(Error::InvalidParents(format!("vertex {v} is its own parent")));
                }
            }
            // every vertex must reach the root 1 by following parents
            let parent_of = |v: usize| parents[v - 2];
            let mut state = vec![0u8; n + 1]; // 0 unknown, 1 on stack, 2 reaches root
            state[1] = 2;
            for start in 2..=n {
                let mut chain = Vec::new();
                let mut v = start;
                while state[v] == 0 {
                    state[v] = 1;
                    chain.push(v);
                    v = parent_of(v);
                }
                if state[v] == 1 {
                    return Err(Error::InvalidParents(format!("cycle detected through vertex {v}")));
                }
                for u in chain {
                    state[u] = 2;
                }
            }
            DirectedGraph::new(n, (2..=n).map(|v| (parent_of(v), v)).collect())
        }
    }
}

/// Random recursive tree on n vertices: vertex v attaches to a uniform earlier vertex.
pub fn random_tree<R: Rng + ?Sized>(n: usize, rng: &mut R) -> GraphFamily {
    GraphFamily::Tree { parents: (2..=n).map(|v| rng.random_range(1..v)).collect() }
}

/// Sparse incidence matrix: row i has −1 at its tail and +1 at its head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IncidenceMatrix {
    n: usize,
    tails: Vec<usize>,
    heads: Vec<usize>,
}

impl IncidenceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.tails.len()
    }

    /// 0-indexed (tail, head) of row i (0-indexed).
    #[inline]
    pub fn row(&self, i: usize) -> (usize, usize) {
        (self.tails[i], self.heads[i])
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m()];
        self.apply_into(f, &mut out);
        out
    }

    pub fn apply_into(&self, f: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = f[self.heads[i]] - f[self.tails[i]];
        }
    }

    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.apply_transpose_into(v, &mut out);
        out
    }

    pub fn apply_transpose_into(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for (i, &vi) in v.iter().enumerate() {
            out[self.heads[i]] += vi;
            out[self.tails[i]] -= vi;
        }
    }

    /// Vertex degrees in the underlying multigraph.
    pub fn degrees(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for i in 0..self.m() {
            d[self.tails[i]] += 1.0;
            d[self.heads[i]] += 1.0;
        }
        d
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.rows_dense(&(0..self.m()).collect::<Vec<_>>())
    }

    /// Dense submatrix made of the given 0-indexed rows, in that order.
    pub fn rows_dense(&self, rows: &[usize]) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(rows.len(), self.n);
        for (r, &i) in rows.iter().enumerate() {
            d[(r, self.tails[i])] = -1.0;
            d[(r, self.heads[i])] = 1.0;
        }
        d
    }

    pub fn graph(&self) -> DirectedGraph {
        DirectedGraph {
            n: self.n,
            edges: self.tails.iter().zip(&self.heads).map(|(&a, &b)| (a + 1, b + 1)).collect(),
        }
    }
}

/// Active set S with the component structure of the graph minus the S edges.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActiveSet {
    /// Sorted 1-indexed rows in S.
    pub s: Vec<usize>,
    #[serde(skip)]
    in_s: Vec<bool>,
    /// Vertex lists (1-indexed, increasing), ordered by smallest vertex.
    pub components: Vec<Vec<usize>>,
    #[serde(skip)]
    labels: Vec<usize>,
    /// For each row (0-indexed), its position among the rows of −S.
    #[serde(skip)]
    free_position: Vec<Option<usize>>,
    #[serde(skip)]
    free_rows: Vec<usize>,
}

impl ActiveSet {
    pub fn size(&self) -> usize {
        self.s.len()
    }

    pub fn r_s(&self) -> usize {
        self.components.len()
    }

    pub fn component_sizes(&self) -> Vec<usize> {
        self.components.iter().map(Vec::len).collect()
    }

    pub fn n_min(&self) -> usize {
        self.components.iter().map(Vec::len).min().unwrap_or(0)
    }

    pub fn n_max(&self) -> usize {
        self.components.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn m(&self) -> usize {
        self.in_s.len()
    }

    /// Whether 0-indexed row i is active.
    #[inline]
    pub fn contains_row(&self, i: usize) -> bool {
        self.in_s[i]
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.in_s
    }

    /// Component label of each 0-indexed vertex.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// 0-indexed rows not in S, in row order (the rows of D_{-S}).
    pub fn free_rows(&self) -> &[usize] {
        &self.free_rows
    }

    /// 0-indexed rows in S.
    pub fn active_rows(&self) -> Vec<usize> {
        self.s.iter().map(|i| i - 1).collect()
    }

    /// Position of 0-indexed row i within D_{-S}, if it is not active.
    pub fn free_position(&self, i: usize) -> Option<usize> {
        self.free_position[i]
    }
}

pub fn active_set(graph: &DirectedGraph, s: &[usize]) -> Result<ActiveSet> {
    let m = graph.m();
    let mut in_s = vec![false; m];
    for &i in s {
        if i == 0 || i > m {
            return Err(Error::EdgeOutOfRange { index: i, m });
        }
        in_s[i - 1] = true;
    }
    let (labels, count) = graph.component_labels(&in_s);
    let mut components = vec![Vec::new(); count];
    for (v, &l) in labels.iter().enumerate() {
        components[l].push(v + 1);
    }
    let mut free_position = vec![None; m];
    let mut free_rows = Vec::with_capacity(m);
    for i in 0..m {
        if !in_s[i] {
            free_position[i] = Some(free_rows.len());
            free_rows.push(i);
        }
    }
    Ok(ActiveSet {
        s: (1..=m).filter(|&i| in_s[i - 1]).collect(),
        in_s,
        components,
        labels,
        free_position,
        free_rows,
    })
}

/// S is admissible iff every active row has a nonzero projection onto
/// N(D_{-S}). For an incidence matrix that projection is supported on the
/// components of the two endpoints and vanishes exactly when both endpoints
/// lie in the same component.
pub fn is_admissible(d: &IncidenceMatrix, s: &ActiveSet) -> bool {
    let labels = s.labels();
    s.s.iter().all(|&i| {
        let (a, b) = d.row(i - 1);
        labels[a] != labels[b]
    })
}

/// Reads an active-set file: one 1-indexed row per line, blank lines and `#` comments ignored.
pub fn read_active_set<R: BufRead>(reader: R) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        for tok in line.split('#').next().unwrap_or("").split([',', ' ', '\t']) {
            let tok = tok.trim();
            if tok.is_empty() {
                continue;
            }
            out.push(tok.parse().map_err(|_| Error::Parse(format!("bad active-set index {tok:?}")))?);
        }
    }
    Ok(out)
}

pub fn write_active_set<W: Write>(s: &[usize], mut w: W) -> Result<()> {
    for i in s {
        writeln!(w, "{i}")?;
    }
    Ok(())
}
