//! Closed-form compatibility bounds on paths and cycles, and a numeric
//! multi-start search for the weighted compatibility constant.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ActiveSet, IncidenceMatrix};
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaBounds {
    #[serde(rename = "K", skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(rename = "K_prime", skip_serializing_if = "Option::is_none")]
    pub k_prime: Option<f64>,
    /// √(nK) or √(nK′): bound on √r_S/κ(S, I).
    pub sqrt_rs_over_kappa_identity: f64,
    pub weight_increment_sq: f64,
    /// identity bound + √(n·weight_increment_sq): bound on √r_S/κ(S, W).
    pub sqrt_rs_over_kappa_weighted: f64,
    /// (5/γ²)(r_S/n)log(n/r_S), when γ was supplied and all n_i ≥ 4.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_increment_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub numeric_kappa_estimate: Option<f64>,
}

/// 1/⌊k/2⌋ + 1/⌈k/2⌉, the cost of an interior module.
fn halves(k: usize) -> f64 {
    1.0 / (k / 2) as f64 + 1.0 / k.div_ceil(2) as f64
}

fn check_contiguous(s: &ActiveSet) -> Result<()> {
    let mut next = 1;
    for (i, c) in s.components.iter().enumerate() {
        if c.first() != Some(&next) || c.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Hypothesis(format!(
                "component {} is not a contiguous stretch of a path or cycle",
                i + 1
            )));
        }
        next = c.last().unwrap() + 1;
    }
    Ok(())
}

fn increment_bound(s: &ActiveSet, gamma: Option<f64>) -> Option<f64> {
    let (n, r) = (s.n() as f64, s.r_s() as f64);
    match gamma {
        Some(g) if s.n_min() >= 4 && g > 0.0 => Some(5.0 / (g * g) * (r / n) * (n / r).ln()),
        _ => None,
    }
}

/// Σ_{i=2}^{n}(w_i − w_{i−1})² with the convention w_n := 1 after the n−1 path weights.
pub fn path_weight_increment(weights: &[f64]) -> f64 {
    let mut w = weights.to_vec();
    w.push(1.0);
    w.windows(2).map(|p| (p[1] - p[0]).powi(2)).sum()
}

/// Cyclic Σ(w_i − w_{i−1})² with w_0 := w_n.
pub fn cycle_weight_increment(weights: &[f64]) -> f64 {
    let n = weights.len();
    (0..n).map(|i| (weights[i] - weights[(i + n - 1) % n]).powi(2)).sum()
}

/// Bounds for a path graph. Needs n_1, n_{r_S} ≥ 2 and interior components ≥ 4.
/// With S empty the compatibility constant is infinite and the bounds are 0.
pub fn kappa_bound_path(s: &ActiveSet, weights: &[f64], gamma: Option<f64>) -> Result<KappaBounds> {
    let n = s.n();
    if weights.len() != n - 1 {
        return Err(Error::Dimension { expected: n - 1, got: weights.len() });
    }
    check_contiguous(s)?;
    let sizes = s.component_sizes();
    let r = sizes.len();
    let incr = path_weight_increment(weights);
    let nf = n as f64;
    if r == 1 {
        return Ok(KappaBounds {
            k: Some(0.0),
            k_prime: None,
            sqrt_rs_over_kappa_identity: 0.0,
            weight_increment_sq: incr,
            sqrt_rs_over_kappa_weighted: 0.0,
            weight_increment_bound: None,
            numeric_kappa_estimate: None,
        });
    }
    for (i, &k) in sizes.iter().enumerate() {
        let end = i == 0 || i == r - 1;
        let need = if end { 2 } else { 4 };
        if k < need {
            return Err(Error::Hypothesis(format!(
                "component {} has {k} vertices, the path bound needs at least {need}",
                i + 1
            )));
        }
    }
    let k = 1.0 / sizes[0] as f64
        + sizes[1..r - 1].iter().map(|&k| halves(k)).sum::<f64>()
        + 1.0 / sizes[r - 1] as f64;
    let ident = (nf * k).sqrt();
    Ok(KappaBounds {
        k: Some(k),
        k_prime: None,
        sqrt_rs_over_kappa_identity: ident,
        weight_increment_sq: incr,
        sqrt_rs_over_kappa_weighted: ident + (nf * incr).sqrt(),
        weight_increment_bound: increment_bound(s, gamma),
        numeric_kappa_estimate: None,
    })
}

/// Bounds for a cycle graph. Needs S nonempty and every component ≥ 4.
pub fn kappa_bound_cycle(s: &ActiveSet, weights: &[f64], gamma: Option<f64>) -> Result<KappaBounds> {
    let n = s.n();
    if weights.len() != n {
        return Err(Error::Dimension { expected: n, got: weights.len() });
    }
    if s.size() < 2 {
        return Err(Error::Hypothesis("cycle bound needs an admissible nonempty active set (|S| >= 2)".into()));
    }
    let sizes = s.component_sizes();
    for (i, &k) in sizes.iter().enumerate() {
        if k < 4 {
            return Err(Error::Hypothesis(format!(
                "component {} has {k} vertices, the cycle bound needs at least 4",
                i + 1
            )));
        }
    }
    let kp: f64 = sizes.iter().map(|&k| halves(k)).sum();
    let nf = n as f64;
    let incr = cycle_weight_increment(weights);
    let ident = (nf * kp).sqrt();
    Ok(KappaBounds {
        k: None,
        k_prime: Some(kp),
        sqrt_rs_over_kappa_identity: ident,
        weight_increment_sq: incr,
        sqrt_rs_over_kappa_weighted: ident + (nf * incr).sqrt(),
        weight_increment_bound: increment_bound(s, gamma),
        numeric_kappa_estimate: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaSearch {
    pub restarts: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for KappaSearch {
    fn default() -> Self {
        Self { restarts: 10_000, steps: 200, seed: 0 }
    }
}

struct Ratio<'a> {
    d: &'a IncidenceMatrix,
    /// +1 on S, −w_i on −S
    coef: Vec<f64>,
    /// component labels of the full graph, for projecting out N(D)
    labels: Vec<usize>,
    counts: Vec<f64>,
}

impl Ratio<'_> {
    fn center(&self, f: &mut [f64]) {
        let mut sums = vec![0.0; self.counts.len()];
        for (x, &l) in f.iter().zip(&self.labels) {
            sums[l] += x;
        }
        for (x, &l) in f.iter_mut().zip(&self.labels) {
            *x -= sums[l] / self.counts[l];
        }
    }

    fn normalize(&self, f: &mut [f64]) -> bool {
        self.center(f);
        let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-300 || !norm.is_finite() {
            return false;
        }
        f.iter_mut().for_each(|x| *x /= norm);
        true
    }

    /// Numerator value and a subgradient direction (D′ξ).
    fn eval(&self, f: &[f64], df: &mut [f64], grad: &mut [f64]) -> f64 {
        self.d.apply_into(f, df);
        let mut val = 0.0;
        for (x, &c) in df.iter_mut().zip(&self.coef) {
            val += c * x.abs();
            *x = c * if *x > 0.0 {
                1.0
            } else if *x < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
        self.d.apply_transpose_into(df, grad);
        val
    }

    /// Best ratio (on the unit ℓ² sphere, so times √n for ‖·‖_n) reached from `f`.
    fn ascend(&self, mut f: Vec<f64>, steps: usize) -> f64 {
        if !self.normalize(&mut f) {
            return f64::NEG_INFINITY;
        }
        let mut df = vec![0.0; self.d.m()];
        let mut grad = vec![0.0; f.len()];
        let mut best = f64::NEG_INFINITY;
        for k in 1..=steps + 1 {
            let val = self.eval(&f, &mut df, &mut grad);
            best = best.max(val);
            if k > steps {
                break;
            }
            self.center(&mut grad);
            let radial: f64 = grad.iter().zip(&f).map(|(a, b)| a * b).sum();
            grad.iter_mut().zip(&f).for_each(|(g, x)| *g -= radial * x);
            let gn = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
            if gn <= 1e-14 {
                break;
            }
            let step = 1.0 / (k as f64).sqrt() / gn;
            f.iter_mut().zip(&grad).for_each(|(x, g)| *x += step * g);
            if !self.normalize(&mut f) {
                break;
            }
        }
        best
    }
}

/// Component-constant vector maximizing the S-jump sum for fixed jump signs:
/// level_k ∝ b_k/n_k with b_k the signed count of S-edges entering component k.
fn pattern_start(d: &IncidenceMatrix, s: &ActiveSet, active: &[usize], signs: u64) -> Vec<f64> {
    let labels = s.labels();
    let mut b = vec![0.0; s.r_s()];
    for (k, &i) in active.iter().enumerate() {
        let sg = if signs >> (k % 64) & 1 == 1 { -1.0 } else { 1.0 };
        let (t, h) = d.row(i);
        b[labels[h]] += sg;
        b[labels[t]] -= sg;
    }
    let sizes = s.component_sizes();
    labels.iter().map(|&l| b[l] / sizes[l] as f64).collect()
}

/// Half-split construction: around each active edge, the half of each
/// neighbouring component touching it gets a level ±1/|half|, with signs
/// alternating from one active edge to the next. Components touched by a
/// single active edge use the whole component.
fn half_split_start(d: &IncidenceMatrix, s: &ActiveSet, active: &[usize]) -> Vec<f64> {
    let labels = s.labels();
    let mut touches = vec![0usize; s.r_s()];
    for &i in active {
        let (t, h) = d.row(i);
        touches[labels[t]] += 1;
        touches[labels[h]] += 1;
    }
    let mut f = vec![0.0; d.n()];
    for (k, &i) in active.iter().enumerate() {
        let sg = if k % 2 == 0 { 1.0 } else { -1.0 };
        let (t, h) = d.row(i);
        for (v, dir) in [(t, -sg), (h, sg)] {
            let comp = &s.components[labels[v]];
            let piece: &[usize] = if touches[labels[v]] <= 1 || comp.len() < 2 {
                comp
            } else {
                let half = comp.len() / 2;
                let pos = comp.iter().position(|&u| u == v + 1).unwrap();
                if pos < half {
                    &comp[..half]
                } else {
                    &comp[half..]
                }
            };
            let level = dir / piece.len() as f64;
            for &u in piece {
                f[u - 1] += level;
            }
        }
    }
    f
}

/// Lower estimate of sup (‖D_S f‖₁ − ‖W_{-S}D_{-S}f‖₁)₊/‖f‖_n, which equals √r_S/κ(S, W).
pub fn sup_ratio_numeric(d: &IncidenceMatrix, s: &ActiveSet, weights: &[f64], search: &KappaSearch) -> Result<f64> {
    if weights.len() != d.m() {
        return Err(Error::Dimension { expected: d.m(), got: weights.len() });
    }
    let coef: Vec<f64> = (0..d.m()).map(|i| if s.contains_row(i) { 1.0 } else { -weights[i] }).collect();
    let (labels, count) = d.graph().component_labels(&vec![false; d.m()]);
    let mut counts = vec![0.0; count];
    for &l in &labels {
        counts[l] += 1.0;
    }
    let ratio = Ratio { d, coef, labels, counts };
    let active = s.active_rows();
    let n_patterns: usize = if active.is_empty() { 0 } else { 1usize << active.len().min(8) };
    let n = d.n();
    let best = (0..search.restarts)
        .into_par_iter()
        .map(|r| {
            let start = if r < n_patterns {
                if active.len() <= 8 {
                    pattern_start(d, s, &active, r as u64)
                } else {
                    let mut rng = stream_rng(search.seed, r as u64);
                    let signs: u64 = rand::Rng::random(&mut rng);
                    pattern_start(d, s, &active, signs)
                }
            } else if r == n_patterns && !active.is_empty() {
                half_split_start(d, s, &active)
            } else {
                let mut rng = stream_rng(search.seed, r as u64);
                (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
            };
            ratio.ascend(start, search.steps)
        })
        .reduce(|| f64::NEG_INFINITY, f64::max);
    let sup = best * (n as f64).sqrt();
    if !(sup > 0.0) {
        return Err(Error::DenominatorNeverPositive);
    }
    Ok(sup)
}

/// Numeric estimate of κ(S, W). The search lower-bounds the supremum, so this
/// is an upper estimate of κ.
pub fn kappa_numeric(d: &IncidenceMatrix, s: &ActiveSet, weights: &[f64], search: &KappaSearch) -> Result<f64> {
    let sup = sup_ratio_numeric(d, s, weights, search)?;
    Ok((s.r_s() as f64).sqrt() / sup)
}
