//! Graph topologies, mixing matrices and time-varying digraph sequences.
//!
//! Directed edges are stored as `(from, to)`. For an undirected topology the
//! edge set holds both orientations of every link. Weight matrices follow the
//! receiver-row convention: `w[(i, j)]` is the weight agent `i` applies to the
//! value received from agent `j`.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Retry budget for Erdős–Rényi connectivity resampling.
pub const ER_MAX_TRIES: usize = 100;

const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TopologyKind {
    ErdosRenyi { p: f64 },
    Star,
    Path,
    Cycle,
    Complete,
    Custom { edges: Vec<(usize, usize)>, directed: bool },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    m: usize,
    edges: BTreeSet<(usize, usize)>,
    directed: bool,
}

impl Topology {
    /// Builds a topology, closing undirected edge sets under reversal.
    /// Self-loops are implicit and rejected if listed.
    pub fn new<I>(m: usize, edges: I, directed: bool) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        if m == 0 {
            return Err(Error::Config("node count must be positive".into()));
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i >= m || j >= m {
                return Err(Error::Config(format!("edge ({i},{j}) out of range for m={m}")));
            }
            if i == j {
                return Err(Error::Config(format!("self-loop ({i},{i}) listed explicitly")));
            }
            set.insert((i, j));
            if !directed {
                set.insert((j, i));
            }
        }
        Ok(Self {
            m,
            edges: set,
            directed,
        })
    }

    pub fn node_count(&self) -> usize {
        self.m
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    /// All stored arcs `(from, to)`; undirected links appear twice.
    pub fn arcs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    /// Number of links: arcs for directed graphs, unordered pairs otherwise.
    pub fn edge_count(&self) -> usize {
        if self.directed {
            self.edges.len()
        } else {
            self.edges.len() / 2
        }
    }

    pub fn out_neighbors(&self, i: usize) -> Vec<usize> {
        self.edges
            .range((i, 0)..(i + 1, 0))
            .map(|&(_, j)| j)
            .collect()
    }

    pub fn in_neighbors(&self, i: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(_, j)| j == i)
            .map(|&(k, _)| k)
            .collect()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.edges.range((i, 0)..(i + 1, 0)).count()
    }

    /// Connected (undirected) or strongly connected (directed).
    pub fn is_connected(&self) -> bool {
        if self.m == 1 {
            return true;
        }
        let fwd = reach(self.m, 0, |i| self.out_neighbors(i));
        if fwd.iter().any(|r| !r) {
            return false;
        }
        if !self.directed {
            return true;
        }
        let bwd = reach(self.m, 0, |i| self.in_neighbors(i));
        bwd.iter().all(|&r| r)
    }

    /// Directed union of several topologies on the same node set.
    pub fn union<'a, I>(m: usize, parts: I) -> Self
    where
        I: IntoIterator<Item = &'a Topology>,
    {
        let mut edges = BTreeSet::new();
        for t in parts {
            edges.extend(t.edges.iter().copied());
        }
        Self {
            m,
            edges,
            directed: true,
        }
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        (0..self.m).map(|i| self.out_neighbors(i)).collect()
    }
}

fn reach<F>(m: usize, start: usize, next: F) -> Vec<bool>
where
    F: Fn(usize) -> Vec<usize>,
{
    let mut seen = vec![false; m];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(i) = queue.pop_front() {
        for j in next(i) {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen
}

pub fn generate_topology(kind: &TopologyKind, m: usize, seed_value: u64) -> Result<Topology> {
    if m < 2 {
        return Err(Error::Config(format!("topology needs m >= 2, got {m}")));
    }
    match kind {
        TopologyKind::ErdosRenyi { p } => {
            if !(*p > 0.0 && *p <= 1.0) {
                return Err(Error::Config(format!("erdos_renyi p must lie in (0, 1], got {p}")));
            }
            for attempt in 0..ER_MAX_TRIES {
                let mut rng = seed::stream(seed_value, seed::NETWORK, attempt as u64);
                let mut edges = Vec::new();
                for i in 0..m {
                    for j in (i + 1)..m {
                        if rng.gen::<f64>() < *p {
                            edges.push((i, j));
                        }
                    }
                }
                let t = Topology::new(m, edges, false)?;
                if t.is_connected() {
                    return Ok(t);
                }
            }
            Err(Error::Disconnected {
                tries: ER_MAX_TRIES,
            })
        }
        TopologyKind::Star => Topology::new(m, (1..m).map(|j| (0, j)), false),
        TopologyKind::Path => Topology::new(m, (0..m - 1).map(|i| (i, i + 1)), false),
        TopologyKind::Cycle => {
            let mut edges: Vec<_> = (0..m - 1).map(|i| (i, i + 1)).collect();
            if m > 2 {
                edges.push((m - 1, 0));
            }
            Topology::new(m, edges, false)
        }
        TopologyKind::Complete => {
            let edges = (0..m).flat_map(|i| ((i + 1)..m).map(move |j| (i, j)));
            Topology::new(m, edges, false)
        }
        TopologyKind::Custom { edges, directed } => Topology::new(m, edges.iter().copied(), *directed),
    }
}

/// Doubly stochastic mixing matrix with its consensus contraction factor.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingMatrix {
    weights: DMatrix<f64>,
    rho: f64,
}

impl MixingMatrix {
    /// Validates double stochasticity and nonnegativity, then computes `rho`.
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self> {
        let m = weights.nrows();
        if m == 0 || weights.ncols() != m {
            return Err(Error::Network("mixing matrix must be square and nonempty".into()));
        }
        if weights.iter().any(|&w| w < -STOCHASTIC_TOL || !w.is_finite()) {
            return Err(Error::Network("mixing matrix has negative or non-finite entries".into()));
        }
        for i in 0..m {
            let r: f64 = weights.row(i).sum();
            let c: f64 = weights.column(i).sum();
            if (r - 1.0).abs() > STOCHASTIC_TOL || (c - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Network(format!(
                    "row/column {i} sums ({r}, {c}) differ from 1"
                )));
            }
        }
        let rho = spectral_rho(&weights);
        Ok(Self { weights, rho })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn node_count(&self) -> usize {
        self.weights.nrows()
    }

    /// One round of mixing on an `m x d` stack.
    pub fn apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        &self.weights * v
    }

    /// Checks the support of `W` against a topology.
    pub fn respects(&self, topology: &Topology) -> bool {
        let m = self.node_count();
        if topology.node_count() != m {
            return false;
        }
        for i in 0..m {
            for j in 0..m {
                let w = self.weights[(i, j)];
                let allowed = i == j || topology.has_edge(j, i);
                if (i == j && w <= 0.0) || (!allowed && w.abs() > STOCHASTIC_TOL) || (allowed && i != j && w <= 0.0) {
                    return false;
                }
            }
        }
        true
    }

    pub fn to_json(&self, topology: Option<&Topology>) -> Result<String> {
        let file = NetworkFile::new(topology, Some(&self.weights), self.node_count());
        Ok(serde_json::to_string_pretty(&file)?)
    }
}

/// Metropolis–Hastings weights `1/(1 + max(deg_i, deg_j))`.
pub fn metropolis_weights(topology: &Topology) -> Result<MixingMatrix> {
    if topology.is_directed() {
        return Err(Error::Network("Metropolis weights need an undirected topology".into()));
    }
    if !topology.is_connected() {
        return Err(Error::Network("Metropolis weights need a connected topology".into()));
    }
    let m = topology.node_count();
    let mut w = DMatrix::zeros(m, m);
    for (i, j) in topology.arcs() {
        let dij = topology.degree(i).max(topology.degree(j));
        w[(i, j)] = 1.0 / (1.0 + dij as f64);
    }
    for i in 0..m {
        let off: f64 = (0..m).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    MixingMatrix::from_weights(w)
}

/// The master-worker averaging matrix `(1/m) 1 1^T`.
pub fn star_master_matrix(m: usize) -> Result<MixingMatrix> {
    if m < 2 {
        return Err(Error::Config(format!("star network needs m >= 2, got {m}")));
    }
    Ok(MixingMatrix {
        weights: DMatrix::from_element(m, m, 1.0 / m as f64),
        rho: 0.0,
    })
}

/// Largest singular value of `W - J`.
pub fn spectral_rho(w: &DMatrix<f64>) -> f64 {
    let m = w.nrows();
    let j = DMatrix::from_element(m, m, 1.0 / m as f64);
    let diff = w - j;
    diff.singular_values().max()
}

/// Worst-case contraction of `k` Chebyshev rounds on a spectrum in `[-rho, rho]`.
pub fn chebyshev_contraction(rho: f64, k: usize) -> f64 {
    if rho <= 0.0 {
        return 0.0;
    }
    if k <= 1 {
        return rho;
    }
    let c = (1.0 - (1.0 - rho * rho).sqrt()) / rho;
    let ck = c.powi(k as i32);
    2.0 * ck / (1.0 + ck * ck)
}

/// Applies `P_k(W) V` with `P_k(t) = T_k(t / rho) / T_k(1 / rho)`.
///
/// `T_k` is the Chebyshev polynomial of the first kind, so `P_k(1) = 1` and
/// `max |P_k|` on `[-rho, rho]` equals `1 / T_k(1/rho)`. The three-term
/// recurrence is run on normalised iterates `X_k = P_k(W) V` with the ratio
/// `q_k = T_k(1/rho) / T_{k+1}(1/rho)`, which avoids the exponential growth
/// of the raw polynomial values.
pub fn chebyshev_mix(w: &MixingMatrix, v: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let k = k.max(1);
    let rho = w.rho();
    if k == 1 || rho <= 0.0 {
        return w.apply(v);
    }
    let mut prev = v.clone();
    let mut cur = w.apply(v);
    let mut q_prev = rho;
    for _ in 1..k {
        let q = 1.0 / (2.0 / rho - q_prev);
        let wx = w.apply(&cur);
        let next = wx * (2.0 * q / rho) - &prev * (q_prev * q);
        prev = cur;
        cur = next;
        q_prev = q;
    }
    cur
}

/// Stacked deviation `||V - 1 mean(V)||_F`.
pub fn consensus_error(v: &DMatrix<f64>) -> f64 {
    let m = v.nrows() as f64;
    let mean = v.row_sum() / m;
    let mut s = 0.0;
    for i in 0..v.nrows() {
        s += (v.row(i) - &mean).norm_squared();
    }
    s.sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvKind {
    AlternatingSubgraphs,
    RandomSpanning,
    StaticAsTv,
}

/// Worst-case push-sum constants of a B-strongly connected sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvConstants {
    pub m: usize,
    pub phi_lb: f64,
    pub phi_ub: f64,
    pub c_ell_tilde: f64,
    /// May be `inf` when it overflows; `ln_c0` stays finite.
    pub c0: f64,
    pub ln_c0: f64,
    pub rho_b: f64,
    /// `1 - rho_b` evaluated without cancellation.
    pub one_minus_rho_b: f64,
}

impl TvConstants {
    pub fn new(m: usize, b: usize, c_ell: f64) -> Self {
        let n = ((m.max(2) - 1) * b) as f64;
        let ln_c = c_ell.ln();
        let ln_m = (m as f64).ln();
        let phi_lb = (2.0 * n * ln_c).exp();
        let phi_ub = m as f64 - phi_lb;
        let ln_ct = (2.0 * n + 1.0) * ln_c - ln_m;
        let c_ell_tilde = ln_ct.exp();
        let x = (n * ln_ct).exp();
        let one_minus_rho_b = if x > 0.0 { -((-x).ln_1p() / n).exp_m1() } else { 0.0 };
        let rho_b = 1.0 - one_minus_rho_b;
        let a = -n * ln_ct;
        let ln_one_plus = if a > 0.0 { a + (-a).exp().ln_1p() } else { a.exp().ln_1p() };
        let ln_c0 = (2.0 * m as f64).ln() + ln_one_plus - (-x).ln_1p();
        Self {
            m,
            phi_lb,
            phi_ub,
            c_ell_tilde,
            c0: ln_c0.exp(),
            ln_c0,
            rho_b,
            one_minus_rho_b,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum FrameSource {
    Periodic(Vec<Topology>),
    RandomSpanning { arcs: Vec<(usize, usize)> },
    Static { topology: Topology, weights: DMatrix<f64> },
}

/// Deterministic sequence of digraphs with column-stochastic weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeVaryingNetwork {
    m: usize,
    b: usize,
    c_ell: f64,
    seed: u64,
    source: FrameSource,
    constants: TvConstants,
}

impl TimeVaryingNetwork {
    /// Periodic sequence cycling through `frames`; no connectivity check.
    pub fn from_frames(frames: Vec<Topology>, b: usize, c_ell: f64) -> Result<Self> {
        let m = frames
            .first()
            .map(|f| f.node_count())
            .ok_or_else(|| Error::Config("at least one frame required".into()))?;
        if frames.iter().any(|f| f.node_count() != m) {
            return Err(Error::Config("frames disagree on node count".into()));
        }
        validate_tv_params(m, b, c_ell)?;
        Ok(Self {
            m,
            b,
            c_ell,
            seed: 0,
            source: FrameSource::Periodic(frames),
            constants: TvConstants::new(m, b, c_ell),
        })
    }

    pub fn node_count(&self) -> usize {
        self.m
    }

    pub fn window(&self) -> usize {
        self.b
    }

    pub fn c_ell(&self) -> f64 {
        self.c_ell
    }

    pub fn constants(&self) -> &TvConstants {
        &self.constants
    }

    pub fn frame(&self, nu: usize) -> Topology {
        match &self.source {
            FrameSource::Periodic(frames) => frames[nu % frames.len()].clone(),
            FrameSource::Static { topology, .. } => topology.clone(),
            FrameSource::RandomSpanning { arcs } => {
                let window = nu / self.b;
                let slot = nu % self.b;
                let mut rng = seed::stream(self.seed, seed::TV_FRAMES, window as u64);
                let picked: Vec<(usize, usize)> = arcs
                    .iter()
                    .filter(|_| rng.gen_range(0..self.b) == slot)
                    .copied()
                    .collect();
                Topology {
                    m: self.m,
                    edges: picked.into_iter().collect(),
                    directed: true,
                }
            }
        }
    }

    /// Column-stochastic weight matrix `C^nu`.
    pub fn matrix(&self, nu: usize) -> DMatrix<f64> {
        match &self.source {
            FrameSource::Static { weights, .. } => weights.clone(),
            _ => column_stochastic(&self.frame(nu)),
        }
    }

    /// Geometric-mean contraction of `C^{h-1} ... C^0` away from rank one.
    /// Diagnostic only; rate certificates use the worst-case constants.
    pub fn empirical_contraction(&self, horizon: usize) -> f64 {
        let m = self.m;
        let mut p = DMatrix::<f64>::identity(m, m);
        for nu in 0..horizon.max(1) {
            p = self.matrix(nu) * p;
        }
        let j = DMatrix::from_element(m, m, 1.0 / m as f64);
        let dev = &p - &p * j;
        dev.norm().powf(1.0 / horizon.max(1) as f64)
    }

    pub fn to_json(&self, horizon: usize) -> Result<String> {
        let frames: Vec<NetworkFile> = (0..horizon)
            .map(|nu| NetworkFile::new(Some(&self.frame(nu)), Some(&self.matrix(nu)), self.m))
            .collect();
        Ok(serde_json::to_string_pretty(&frames)?)
    }
}

fn validate_tv_params(m: usize, b: usize, c_ell: f64) -> Result<()> {
    if b < 1 {
        return Err(Error::Config("window length B must be at least 1".into()));
    }
    if !(c_ell > 0.0 && c_ell <= 1.0 / m as f64) {
        return Err(Error::Config(format!("c_ell must lie in (0, 1/m], got {c_ell}")));
    }
    Ok(())
}

/// Each sender splits its mass uniformly over its out-neighbours and itself.
pub fn column_stochastic(t: &Topology) -> DMatrix<f64> {
    let m = t.node_count();
    let mut c = DMatrix::zeros(m, m);
    for j in 0..m {
        let out = t.out_neighbors(j);
        let share = 1.0 / (out.len() + 1) as f64;
        c[(j, j)] = share;
        for i in out {
            c[(i, j)] = share;
        }
    }
    c
}

pub fn generate_tv_network(
    kind: TvKind,
    base: &Topology,
    b: usize,
    c_ell: f64,
    seed_value: u64,
) -> Result<TimeVaryingNetwork> {
    let m = base.node_count();
    validate_tv_params(m, b, c_ell)?;
    if !base.is_connected() {
        return Err(Error::Network("base topology is not (strongly) connected".into()));
    }
    let arcs: Vec<(usize, usize)> = base.arcs().collect();
    let source = match kind {
        TvKind::AlternatingSubgraphs => {
            let frames = (0..b)
                .map(|k| Topology {
                    m,
                    edges: arcs
                        .iter()
                        .enumerate()
                        .filter(|(idx, _)| idx % b == k)
                        .map(|(_, &a)| a)
                        .collect(),
                    directed: true,
                })
                .collect();
            FrameSource::Periodic(frames)
        }
        TvKind::RandomSpanning => FrameSource::RandomSpanning { arcs },
        TvKind::StaticAsTv => {
            let weights = if base.is_directed() {
                column_stochastic(base)
            } else {
                metropolis_weights(base)?.weights
            };
            FrameSource::Static {
                topology: base.clone(),
                weights,
            }
        }
    };
    let net = TimeVaryingNetwork {
        m,
        b,
        c_ell,
        seed: seed_value,
        source,
        constants: TvConstants::new(m, b, c_ell),
    };
    let horizon = 16 * b;
    if !check_b_strong_connectivity(&net, horizon) {
        return Err(Error::Network(format!(
            "sequence is not {b}-strongly connected over {horizon} frames"
        )));
    }
    for nu in 0..horizon {
        let c = net.matrix(nu);
        let min_nz = c.iter().filter(|&&w| w > 0.0).fold(f64::INFINITY, |a, &w| a.min(w));
        if min_nz < c_ell {
            return Err(Error::Network(format!(
                "frame {nu} has weight {min_nz} below c_ell = {c_ell}"
            )));
        }
    }
    Ok(net)
}

/// True iff every aligned window `[kB, (k+1)B)` inside the horizon has a
/// strongly connected edge union.
pub fn check_b_strong_connectivity(net: &TimeVaryingNetwork, horizon: usize) -> bool {
    let b = net.window();
    let windows = horizon / b;
    (0..windows).all(|k| {
        let frames: Vec<Topology> = (k * b..(k + 1) * b).map(|nu| net.frame(nu)).collect();
        Topology::union(net.node_count(), frames.iter()).is_connected()
    })
}

/// JSON interchange form for topologies and weight matrices.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkFile {
    pub schema_version: u32,
    pub node_count: usize,
    pub directed: bool,
    /// Out-neighbour lists.
    pub adjacency: Vec<Vec<usize>>,
    /// Dense weight rows, row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<Vec<f64>>>,
}

impl NetworkFile {
    fn new(topology: Option<&Topology>, weights: Option<&DMatrix<f64>>, m: usize) -> Self {
        Self {
            schema_version: 1,
            node_count: m,
            directed: topology.map(|t| t.is_directed()).unwrap_or(false),
            adjacency: topology.map(|t| t.adjacency()).unwrap_or_default(),
            weights: weights.map(|w| (0..w.nrows()).map(|i| w.row(i).iter().copied().collect()).collect()),
        }
    }

    pub fn topology(&self) -> Result<Topology> {
        let edges = self
            .adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.iter().map(move |&j| (i, j)));
        Topology::new(self.node_count, edges, self.directed)
    }

    pub fn mixing_matrix(&self) -> Result<MixingMatrix> {
        let rows = self
            .weights
            .as_ref()
            .ok_or_else(|| Error::Config("network file carries no weights".into()))?;
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Config("weight rows must form a square matrix".into()));
        }
        MixingMatrix::from_weights(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
