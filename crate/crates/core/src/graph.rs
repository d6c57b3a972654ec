//! Typed spatio-temporal graph and teleported feature propagation.
//!
//! Nodes are the `N = T * P` grid tokens, indexed `n = t * P + p`. Two edge
//! types share the node set:
//!
//! * intra-frame: every pair of sites `p != q` in the same frame `t`
//!   (a `P`-clique per frame);
//! * temporal: site `p` in frame `t` to the same site in frame `t + stride`.
//!
//! Every node also carries a self-loop. With `M` the union adjacency and
//! `D` the degree matrix of `M + I`, propagation runs
//!
//! ```text
//! H(k+1) = (1 - alpha) * A * H(k) + alpha * H(0),   A = D^-1/2 (M + I) D^-1/2
//! ```
//!
//! for `k_prop` steps. All nodes in one frame share a degree, so `A * H`
//! needs only the per-frame feature sum plus the two time-aligned neighbours:
//! that is the structured kernel, `O(T * P * C)` per step. The dense kernel
//! materializes `A` and is kept as the reference.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::scalar::{gemm, lit, to_f64, Scalar};
use crate::tensor::Tensor;

/// Largest node count accepted by [`appnp_closed_form`].
pub const MAX_DENSE_SOLVE_NODES: usize = 2048;

fn default_stride() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationConfig {
    /// Teleport (restart) probability, in `(0, 1]`.
    pub alpha: f64,
    pub k_prop: usize,
    pub use_intra: bool,
    pub use_temp: bool,
    /// Frame offset of temporal edges.
    #[serde(default = "default_stride")]
    pub stride: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            k_prop: 10,
            use_intra: true,
            use_temp: true,
            stride: 1,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if self.stride == 0 {
            return Err(Error::Config("temporal stride must be at least 1".into()));
        }
        Ok(())
    }

    /// True when the propagation stage reduces to the identity map.
    pub fn is_identity(&self) -> bool {
        !(self.use_intra || self.use_temp) || self.k_prop == 0 || self.alpha == 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeType {
    Intra,
    Temporal,
}

impl EdgeType {
    fn tag(self) -> &'static str {
        match self {
            EdgeType::Intra => "intra",
            EdgeType::Temporal => "temp",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StGraph {
    t_frames: usize,
    p_sites: usize,
    use_intra: bool,
    use_temp: bool,
    stride: usize,
    edge_intra: Vec<(usize, usize)>,
    edge_temp: Vec<(usize, usize)>,
    /// Degree of `M + I`, one entry per node.
    degree: Vec<usize>,
}

/// Builds the graph for a `T x P` token grid with the edge types enabled in `cfg`.
pub fn build_graph(t_frames: usize, p_sites: usize, cfg: &PropagationConfig) -> Result<StGraph> {
    if t_frames == 0 || p_sites == 0 {
        return Err(Error::Config(format!(
            "graph needs T >= 1 and P >= 1, got T={t_frames} P={p_sites}"
        )));
    }
    if cfg.stride == 0 {
        return Err(Error::Config("temporal stride must be at least 1".into()));
    }
    let (t, p, s) = (t_frames, p_sites, cfg.stride);
    let mut edge_intra = Vec::new();
    if cfg.use_intra {
        edge_intra.reserve(t * p * (p - 1) / 2);
        for f in 0..t {
            for a in 0..p {
                for b in a + 1..p {
                    edge_intra.push((f * p + a, f * p + b));
                }
            }
        }
    }
    let mut edge_temp = Vec::new();
    if cfg.use_temp && t > s {
        edge_temp.reserve((t - s) * p);
        for f in 0..t - s {
            for a in 0..p {
                edge_temp.push((f * p + a, (f + s) * p + a));
            }
        }
    }
    let mut g = StGraph {
        t_frames: t,
        p_sites: p,
        use_intra: cfg.use_intra,
        use_temp: cfg.use_temp,
        stride: s,
        edge_intra,
        edge_temp,
        degree: Vec::new(),
    };
    g.degree = (0..t)
        .flat_map(|f| std::iter::repeat_n(g.frame_degree(f), p))
        .collect();
    debug_assert_eq!(g.degree, g.enumerated_degrees());
    Ok(g)
}

impl StGraph {
    pub fn t_frames(&self) -> usize {
        self.t_frames
    }

    pub fn p_sites(&self) -> usize {
        self.p_sites
    }

    pub fn num_nodes(&self) -> usize {
        self.t_frames * self.p_sites
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn uses_intra(&self) -> bool {
        self.use_intra
    }

    pub fn uses_temp(&self) -> bool {
        self.use_temp
    }

    pub fn edge_intra(&self) -> &[(usize, usize)] {
        &self.edge_intra
    }

    pub fn edge_temp(&self) -> &[(usize, usize)] {
        &self.edge_temp
    }

    pub fn degree(&self) -> &[usize] {
        &self.degree
    }

    pub fn node(&self, t: usize, p: usize) -> usize {
        t * self.p_sites + p
    }

    /// `(t, p)` of node `n`.
    pub fn site(&self, n: usize) -> (usize, usize) {
        (n / self.p_sites, n % self.p_sites)
    }

    /// Number of temporal neighbours of any node in frame `t`.
    pub fn temporal_neighbours(&self, t: usize) -> usize {
        if !self.use_temp {
            return 0;
        }
        usize::from(t >= self.stride) + usize::from(t + self.stride < self.t_frames)
    }

    /// Analytic degree (self-loop included) shared by every node of frame `t`.
    pub fn frame_degree(&self, t: usize) -> usize {
        let intra = if self.use_intra { self.p_sites - 1 } else { 0 };
        1 + intra + self.temporal_neighbours(t)
    }

    /// Degrees counted by walking the edge lists.
    pub fn enumerated_degrees(&self) -> Vec<usize> {
        let mut deg = vec![1; self.num_nodes()];
        for &(a, b) in self.edge_intra.iter().chain(&self.edge_temp) {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    pub fn edges(&self) -> impl Iterator<Item = (EdgeType, usize, usize)> + '_ {
        self.edge_intra
            .iter()
            .map(|&(a, b)| (EdgeType::Intra, a, b))
            .chain(self.edge_temp.iter().map(|&(a, b)| (EdgeType::Temporal, a, b)))
    }

    pub fn is_connected(&self) -> bool {
        let n = self.num_nodes();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for (_, a, b) in self.edges() {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            parent[ra] = rb;
        }
        let root = find(&mut parent, 0);
        (0..n).all(|x| find(&mut parent, x) == root)
    }

    /// Debug export: a header, one `type t p t' p'` line per edge (0-based),
    /// and a closing `degree ...` line.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# stgraph T={} P={} stride={}", self.t_frames, self.p_sites, self.stride);
        for (kind, a, b) in self.edges() {
            let ((ta, pa), (tb, pb)) = (self.site(a), self.site(b));
            let _ = writeln!(out, "{} {ta} {pa} {tb} {pb}", kind.tag());
        }
        out.push_str("degree");
        for d in &self.degree {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        out
    }

    fn check_features<S: Scalar>(&self, h: &Tensor<S>, op: &'static str) -> Result<usize> {
        match h.shape() {
            [n, c] if *n == self.num_nodes() => Ok(*c),
            s => dim_err(op, format!("expected [{}, C] features, got {s:?}", self.num_nodes())),
        }
    }
}

/// Parsed form of [`StGraph::to_edge_list`].
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeList {
    pub t_frames: usize,
    pub p_sites: usize,
    pub edges: Vec<(EdgeType, (usize, usize), (usize, usize))>,
    pub degree: Vec<usize>,
}

pub fn parse_edge_list(text: &str) -> Result<EdgeList> {
    let bad = |line: &str| Error::Contract(format!("malformed edge-list line: {line}"));
    let mut out = EdgeList {
        t_frames: 0,
        p_sites: 0,
        edges: Vec::new(),
        degree: Vec::new(),
    };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("#") => {
                for kv in parts {
                    if let Some(v) = kv.strip_prefix("T=") {
                        out.t_frames = v.parse().map_err(|_| bad(line))?;
                    } else if let Some(v) = kv.strip_prefix("P=") {
                        out.p_sites = v.parse().map_err(|_| bad(line))?;
                    }
                }
            }
            Some(tag @ ("intra" | "temp")) => {
                let nums: Vec<usize> = parts
                    .map(|x| x.parse().map_err(|_| bad(line)))
                    .collect::<Result<_>>()?;
                let [ta, pa, tb, pb] = nums[..] else {
                    return Err(bad(line));
                };
                let kind = if tag == "intra" { EdgeType::Intra } else { EdgeType::Temporal };
                out.edges.push((kind, (ta, pa), (tb, pb)));
            }
            Some("degree") => {
                out.degree = parts.map(|x| x.parse().map_err(|_| bad(line))).collect::<Result<_>>()?;
            }
            _ => return Err(bad(line)),
        }
    }
    Ok(out)
}

/// Dense `A = D^-1/2 (M + I) D^-1/2` as an `N x N` tensor.
pub fn normalized_adjacency_dense<S: Scalar>(g: &StGraph) -> Tensor<S> {
    let n = g.num_nodes();
    let deg: Vec<S> = g.degree.iter().map(|&d| lit(d as f64)).collect();
    let mut a = vec![S::zero(); n * n];
    let entry = |i: usize, j: usize| S::one() / (deg[i] * deg[j]).sqrt();
    for i in 0..n {
        a[i * n + i] = entry(i, i);
    }
    for (_, i, j) in g.edges() {
        let v = entry(i, j);
        a[i * n + j] = v;
        a[j * n + i] = v;
    }
    Tensor::new(vec![n, n], a).expect("square operator")
}

/// Per-frame coefficients of the structured operator.
struct FrameCoeffs<S> {
    inv_degree: Vec<S>,
    /// Weight to the neighbour `stride` frames back / forward, if any.
    back: Vec<Option<S>>,
    forward: Vec<Option<S>>,
}

impl<S: Scalar> FrameCoeffs<S> {
    fn new(g: &StGraph) -> Self {
        let t = g.t_frames;
        let s = g.stride;
        let d: Vec<S> = (0..t).map(|f| lit(g.frame_degree(f) as f64)).collect();
        let link = |a: usize, b: usize| S::one() / (d[a] * d[b]).sqrt();
        Self {
            inv_degree: d.iter().map(|&x| S::one() / x).collect(),
            back: (0..t)
                .map(|f| (g.use_temp && f >= s).then(|| link(f, f - s)))
                .collect(),
            forward: (0..t)
                .map(|f| (g.use_temp && f + s < t).then(|| link(f, f + s)))
                .collect(),
        }
    }
}

/// One structured step: `out = keep * (A h) + restart * h0`.
fn structured_step<S: Scalar>(
    g: &StGraph,
    coeffs: &FrameCoeffs<S>,
    h: &[S],
    h0: &[S],
    keep: S,
    restart: S,
    c: usize,
    frame_sum: &mut [S],
    out: &mut [S],
) {
    let p = g.p_sites;
    let s = g.stride;
    let row = p * c;
    for t in 0..g.t_frames {
        let frame = &h[t * row..(t + 1) * row];
        if g.use_intra {
            frame_sum.fill(S::zero());
            for site in frame.chunks(c) {
                for (acc, &v) in frame_sum.iter_mut().zip(site) {
                    *acc += v;
                }
            }
        }
        let inv_d = coeffs.inv_degree[t];
        for site in 0..p {
            let i = t * row + site * c;
            for ch in 0..c {
                let own = if g.use_intra { frame_sum[ch] } else { h[i + ch] };
                let mut v = own * inv_d;
                if let Some(w) = coeffs.back[t] {
                    v += h[i - s * row + ch] * w;
                }
                if let Some(w) = coeffs.forward[t] {
                    v += h[i + s * row + ch] * w;
                }
                out[i + ch] = keep * v + restart * h0[i + ch];
            }
        }
    }
}

/// `A * h` with the structured kernel.
pub fn apply_operator<S: Scalar>(g: &StGraph, h: &Tensor<S>) -> Result<Tensor<S>> {
    let c = g.check_features(h, "apply_operator")?;
    let coeffs = FrameCoeffs::new(g);
    let mut out = vec![S::zero(); h.numel()];
    let mut frame_sum = vec![S::zero(); c];
    structured_step(g, &coeffs, h.data(), h.data(), S::one(), S::zero(), c, &mut frame_sum, &mut out);
    Tensor::new(h.shape().to_vec(), out)
}

/// Reference propagation through the materialized operator.
pub fn appnp_dense<S: Scalar>(h0: &Tensor<S>, g: &StGraph, cfg: &PropagationConfig) -> Result<Tensor<S>> {
    let c = g.check_features(h0, "appnp_dense")?;
    cfg.validate()?;
    if cfg.is_identity() {
        return Ok(h0.clone());
    }
    let a = normalized_adjacency_dense::<S>(g);
    appnp_dense_with(&a, h0, c, cfg)
}

/// Dense propagation with a prebuilt operator.
pub fn appnp_dense_with<S: Scalar>(
    a: &Tensor<S>,
    h0: &Tensor<S>,
    c: usize,
    cfg: &PropagationConfig,
) -> Result<Tensor<S>> {
    let n = a.shape()[0];
    let alpha: S = lit(cfg.alpha);
    let keep = S::one() - alpha;
    let mut h = h0.data().to_vec();
    let mut ah = vec![S::zero(); h.len()];
    for _ in 0..cfg.k_prop {
        gemm(false, false, n, n, c, a.data(), &h, S::zero(), &mut ah);
        for ((x, &y), &z) in h.iter_mut().zip(&ah).zip(h0.data()) {
            *x = keep * y + alpha * z;
        }
    }
    Tensor::new(h0.shape().to_vec(), h)
}

/// Structure-exploiting propagation; agrees with [`appnp_dense`].
pub fn appnp_structured<S: Scalar>(h0: &Tensor<S>, g: &StGraph, cfg: &PropagationConfig) -> Result<Tensor<S>> {
    let c = g.check_features(h0, "appnp_structured")?;
    cfg.validate()?;
    if cfg.is_identity() {
        return Ok(h0.clone());
    }
    Tensor::new(h0.shape().to_vec(), appnp_structured_raw(g, h0.data(), c, cfg))
}

fn appnp_structured_raw<S: Scalar>(g: &StGraph, h0: &[S], c: usize, cfg: &PropagationConfig) -> Vec<S> {
    let coeffs = FrameCoeffs::new(g);
    let alpha: S = lit(cfg.alpha);
    let keep = S::one() - alpha;
    let mut cur = h0.to_vec();
    let mut next = vec![S::zero(); h0.len()];
    let mut frame_sum = vec![S::zero(); c];
    for _ in 0..cfg.k_prop {
        structured_step(g, &coeffs, &cur, h0, keep, alpha, c, &mut frame_sum, &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Records propagation on a tape. The map is a polynomial in the symmetric
/// operator, so its adjoint is the same propagation applied to the cotangent.
pub fn propagate_on<S: Scalar>(
    tape: &mut Tape<S>,
    h: Var,
    g: &Arc<StGraph>,
    cfg: &PropagationConfig,
) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.shape(h).to_vec();
    let c = match shape[..] {
        [n, c] if n == g.num_nodes() => c,
        _ => return dim_err("propagate", format!("expected [{}, C], got {shape:?}", g.num_nodes())),
    };
    if cfg.is_identity() {
        return Ok(h);
    }
    let value = appnp_structured_raw(g, tape.value(h), c, cfg);
    let (graph, cfg) = (Arc::clone(g), *cfg);
    tape.linear(
        h,
        shape,
        value,
        Box::new(move |grad: &[S]| appnp_structured_raw(&graph, grad, c, &cfg)),
    )
}

/// Fixed point `alpha * (I - (1 - alpha) A)^-1 H0` by dense elimination.
pub fn appnp_closed_form<S: Scalar>(h0: &Tensor<S>, g: &StGraph, alpha: f64) -> Result<Tensor<S>> {
    let c = g.check_features(h0, "appnp_closed_form")?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if alpha == 1.0 {
        return Ok(h0.clone());
    }
    let n = g.num_nodes();
    if n > MAX_DENSE_SOLVE_NODES {
        return Err(Error::Capacity(format!(
            "dense solve limited to {MAX_DENSE_SOLVE_NODES} nodes, graph has {n}"
        )));
    }
    let a = normalized_adjacency_dense::<S>(g);
    let keep = S::one() - lit(alpha);
    let mut m: Vec<S> = a.data().iter().map(|&x| -keep * x).collect();
    for i in 0..n {
        m[i * n + i] += S::one();
    }
    let mut rhs: Vec<S> = h0.data().iter().map(|&x| x * lit(alpha)).collect();
    solve_in_place(&mut m, &mut rhs, n, c)?;
    Tensor::new(h0.shape().to_vec(), rhs)
}

/// Gaussian elimination with partial pivoting; `rhs` is `n x c`.
fn solve_in_place<S: Scalar>(m: &mut [S], rhs: &mut [S], n: usize, c: usize) -> Result<()> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| m[a * n + col].abs().partial_cmp(&m[b * n + col].abs()).unwrap())
            .unwrap();
        if m[pivot * n + col].abs() <= S::epsilon() {
            return Err(Error::Contract("singular propagation system".into()));
        }
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
            }
            for j in 0..c {
                rhs.swap(col * c + j, pivot * c + j);
            }
        }
        let inv = S::one() / m[col * n + col];
        for r in col + 1..n {
            let f = m[r * n + col] * inv;
            if f == S::zero() {
                continue;
            }
            for j in col..n {
                let v = m[col * n + j];
                m[r * n + j] -= f * v;
            }
            for j in 0..c {
                let v = rhs[col * c + j];
                rhs[r * c + j] -= f * v;
            }
        }
    }
    for col in (0..n).rev() {
        let inv = S::one() / m[col * n + col];
        for j in 0..c {
            let mut v = rhs[col * c + j];
            for k in col + 1..n {
                v -= m[col * n + k] * rhs[k * c + j];
            }
            rhs[col * c + j] = v * inv;
        }
    }
    Ok(())
}

/// Unit vector along `sqrt(degree)`, the top eigenvector of a connected `A`.
pub fn dominant_direction(g: &StGraph) -> Vec<f64> {
    let v: Vec<f64> = g.degree.iter().map(|&d| (d as f64).sqrt()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Frobenius norm of the part of `h` orthogonal to `u`, column by column.
fn orthogonal_residual<S: Scalar>(h: &[S], u: &[f64], c: usize) -> f64 {
    let mut total = 0.0;
    for ch in 0..c {
        let col = |i: usize| to_f64(h[i * c + ch]);
        let proj: f64 = u.iter().enumerate().map(|(i, &ui)| ui * col(i)).sum();
        total += u
            .iter()
            .enumerate()
            .map(|(i, &ui)| (col(i) - proj * ui).powi(2))
            .sum::<f64>();
    }
    total.sqrt()
}

/// Pure diffusion (`alpha = 0`): for `k = 0..=k_max`, the norm of the part of
/// `A^k h0` orthogonal to `sqrt(d)`. Decays geometrically on connected graphs.
pub fn oversmoothing_profile<S: Scalar>(h0: &Tensor<S>, g: &StGraph, k_max: usize) -> Result<Vec<f64>> {
    let c = g.check_features(h0, "oversmoothing_profile")?;
    let u = dominant_direction(g);
    let coeffs = FrameCoeffs::new(g);
    let mut cur = h0.data().to_vec();
    let mut next = vec![S::zero(); cur.len()];
    let mut frame_sum = vec![S::zero(); c];
    let mut out = Vec::with_capacity(k_max + 1);
    out.push(orthogonal_residual(&cur, &u, c));
    for _ in 0..k_max {
        structured_step(g, &coeffs, &cur, h0.data(), S::one(), S::zero(), c, &mut frame_sum, &mut next);
        std::mem::swap(&mut cur, &mut next);
        out.push(orthogonal_residual(&cur, &u, c));
    }
    Ok(out)
}

/// `||H(k) - H(0)||_F` for `k = 0..=k_max` under teleported propagation.
pub fn teleport_drift<S: Scalar>(h0: &Tensor<S>, g: &StGraph, alpha: f64, k_max: usize) -> Result<Vec<f64>> {
    let c = g.check_features(h0, "teleport_drift")?;
    let coeffs = FrameCoeffs::new(g);
    let a: S = lit(alpha);
    let mut cur = h0.data().to_vec();
    let mut next = vec![S::zero(); cur.len()];
    let mut frame_sum = vec![S::zero(); c];
    let dist = |h: &[S]| {
        h.iter()
            .zip(h0.data())
            .map(|(&x, &y)| to_f64(x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut out = vec![0.0];
    for _ in 0..k_max {
        structured_step(g, &coeffs, &cur, h0.data(), S::one() - a, a, c, &mut frame_sum, &mut next);
        std::mem::swap(&mut cur, &mut next);
        out.push(dist(&cur));
    }
    Ok(out)
}

/// Upper bound on [`teleport_drift`]: since `||A||_2 <= 1`, every iterate
/// has norm at most `||h0||`, so the drift never exceeds `2 (1 - alpha) ||h0||`.
pub fn drift_bound<S: Scalar>(h0: &Tensor<S>, alpha: f64) -> f64 {
    2.0 * (1.0 - alpha) * to_f64(h0.frobenius())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full() -> PropagationConfig {
        PropagationConfig::default()
    }

    #[test]
    fn two_by_two_graph_by_hand() {
        let g = build_graph(2, 2, &full()).unwrap();
        assert_eq!(g.edge_intra(), &[(0, 1), (2, 3)]);
        assert_eq!(g.edge_temp(), &[(0, 2), (1, 3)]);
        assert_eq!(g.degree(), &[3, 3, 3, 3]);
    }

    #[test]
    fn boundary_and_interior_degrees() {
        let g = build_graph(3, 4, &full()).unwrap();
        assert_eq!(g.degree(), &[5, 5, 5, 5, 6, 6, 6, 6, 5, 5, 5, 5]);
    }

    #[test]
    fn single_node_graph() {
        let g = build_graph(1, 1, &full()).unwrap();
        assert!(g.edges().next().is_none());
        assert_eq!(g.degree(), &[1]);
        let a = normalized_adjacency_dense::<f64>(&g);
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn zero_extent_is_rejected() {
        assert!(build_graph(0, 3, &full()).is_err());
        assert!(build_graph(3, 0, &full()).is_err());
    }

    #[test]
    fn degenerate_grids() {
        let g = build_graph(4, 1, &full()).unwrap();
        assert!(g.edge_intra().is_empty());
        assert_eq!(g.degree(), &[2, 3, 3, 2]);
        let g = build_graph(1, 5, &full()).unwrap();
        assert!(g.edge_temp().is_empty());
        assert_eq!(g.degree(), &[5; 5]);
    }

    #[test]
    fn dense_operator_for_equal_degrees() {
        let g = build_graph(2, 2, &full()).unwrap();
        let a = normalized_adjacency_dense::<f64>(&g);
        for i in 0..4 {
            let row = &a.data()[i * 4..(i + 1) * 4];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            for &v in row {
                assert!(v == 0.0 || (v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        assert_eq!(a, a.transpose().unwrap());
    }

    #[test]
    fn one_step_hand_example() {
        let g = build_graph(2, 2, &full()).unwrap();
        let cfg = PropagationConfig {
            alpha: 0.5,
            k_prop: 1,
            ..full()
        };
        let h0 = Tensor::new(vec![4, 1], vec![3.0f64, 0.0, 0.0, 0.0]).unwrap();
        let want = [2.0, 0.5, 0.5, 0.0];
        for out in [appnp_dense(&h0, &g, &cfg).unwrap(), appnp_structured(&h0, &g, &cfg).unwrap()] {
            for (x, y) in out.data().iter().zip(want) {
                assert!((x - y).abs() < 1e-15, "{out:?}");
            }
        }
    }

    #[test]
    fn teleport_only_and_zero_steps_are_identity() {
        let g = build_graph(3, 2, &full()).unwrap();
        let h0 = Tensor::from_fn(vec![6, 3], |i| (i as f64).sin()).unwrap();
        let alpha_one = PropagationConfig { alpha: 1.0, ..full() };
        let no_steps = PropagationConfig { k_prop: 0, ..full() };
        for cfg in [alpha_one, no_steps] {
            assert_eq!(appnp_dense(&h0, &g, &cfg).unwrap(), h0);
            assert_eq!(appnp_structured(&h0, &g, &cfg).unwrap(), h0);
        }
    }

    #[test]
    fn alpha_outside_range_is_rejected() {
        let g = build_graph(2, 2, &full()).unwrap();
        let h0 = Tensor::<f64>::zeros(vec![4, 1]).unwrap();
        for alpha in [0.0, -0.1, 1.5] {
            let cfg = PropagationConfig { alpha, ..full() };
            assert!(appnp_structured(&h0, &g, &cfg).is_err());
        }
    }

    #[test]
    fn closed_form_satisfies_its_defining_equation() {
        let g = build_graph(3, 3, &full()).unwrap();
        let h0 = Tensor::from_fn(vec![9, 2], |i| ((i * 7 % 5) as f64) - 2.0).unwrap();
        let alpha = 0.2;
        let fixed = appnp_closed_form(&h0, &g, alpha).unwrap();
        let a_h = apply_operator(&g, &fixed).unwrap();
        let rhs = a_h.scale(1.0 - alpha).add(&h0.scale(alpha)).unwrap();
        assert!(fixed.max_abs_diff(&rhs).unwrap() < 1e-10);
        assert_eq!(appnp_closed_form(&h0, &g, 1.0).unwrap(), h0);
    }

    #[test]
    fn closed_form_respects_capacity() {
        let g = build_graph(50, 50, &full()).unwrap();
        let h0 = Tensor::<f64>::zeros(vec![2500, 1]).unwrap();
        assert!(matches!(appnp_closed_form(&h0, &g, 0.1), Err(Error::Capacity(_))));
    }

    #[test]
    fn sqrt_degree_is_invariant_under_diffusion() {
        let g = build_graph(3, 4, &full()).unwrap();
        let u = dominant_direction(&g);
        let h0 = Tensor::from_fn(vec![12, 2], |i| u[i / 2] * if i % 2 == 0 { 1.0 } else { -3.0 }).unwrap();
        let profile = oversmoothing_profile(&h0, &g, 25).unwrap();
        assert!(profile.iter().all(|&r| r < 1e-12), "{profile:?}");
    }

    #[test]
    fn edge_list_round_trip() {
        let g = build_graph(3, 2, &full()).unwrap();
        let parsed = parse_edge_list(&g.to_edge_list()).unwrap();
        assert_eq!(parsed.t_frames, 3);
        assert_eq!(parsed.p_sites, 2);
        assert_eq!(parsed.edges.len(), 3 + 4);
        assert_eq!(parsed.degree, g.degree());
        assert!(parse_edge_list("intra 0 0 1").is_err());
    }

    #[test]
    fn stride_two_links_every_other_frame() {
        let cfg = PropagationConfig { stride: 2, ..full() };
        let g = build_graph(4, 1, &cfg).unwrap();
        assert_eq!(g.edge_temp(), &[(0, 2), (1, 3)]);
        assert_eq!(g.degree(), &[2, 2, 2, 2]);
        let h0 = Tensor::from_fn(vec![4, 2], |i| i as f64).unwrap();
        let d = appnp_dense(&h0, &g, &cfg).unwrap();
        let s = appnp_structured(&h0, &g, &cfg).unwrap();
        assert!(d.max_abs_diff(&s).unwrap() < 1e-12);
    }
}
