//! Undirected simple graphs, random generators, graph shift operators and
//! Metropolis-Hastings consensus weights.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Connectivity retries for Erdős-Rényi sampling.
pub const ER_MAX_ATTEMPTS: usize = 100;

/// Undirected graph without self-loops. Neighbor lists are kept sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    adjacency: Vec<BTreeSet<usize>>,
}

impl Graph {
    /// Graph with `n` nodes and no edges.
    pub fn empty(n: usize) -> Self {
        Graph {
            adjacency: vec![BTreeSet::new(); n],
        }
    }

    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut g = Graph::empty(n);
        for (i, j) in edges {
            g.add_edge(i, j)?;
        }
        Ok(g)
    }

    pub fn complete(n: usize) -> Self {
        let mut g = Graph::empty(n);
        for i in 0..n {
            for j in (i + 1)..n {
                g.insert(i, j);
            }
        }
        g
    }

    pub fn path(n: usize) -> Self {
        let mut g = Graph::empty(n);
        for i in 1..n {
            g.insert(i - 1, i);
        }
        g
    }

    /// Star with node 0 at the center.
    pub fn star(n: usize) -> Self {
        let mut g = Graph::empty(n);
        for i in 1..n {
            g.insert(0, i);
        }
        g
    }

    pub fn cycle(n: usize) -> Self {
        let mut g = Graph::path(n);
        if n > 2 {
            g.insert(0, n - 1);
        }
        g
    }

    /// Adds the undirected edge `{i, j}`. Duplicate insertions are ignored.
    pub fn add_edge(&mut self, i: usize, j: usize) -> Result<()> {
        let n = self.node_count();
        if i >= n || j >= n {
            return Err(Error::invalid(format!(
                "edge ({i}, {j}) out of range for {n} nodes"
            )));
        }
        if i == j {
            return Err(Error::invalid(format!("self-loop at node {i}")));
        }
        self.insert(i, j);
        Ok(())
    }

    fn insert(&mut self, i: usize, j: usize) {
        self.adjacency[i].insert(j);
        self.adjacency[j].insert(i);
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(BTreeSet::len).sum::<usize>() / 2
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency.get(i).is_some_and(|s| s.contains(&j))
    }

    /// Neighbors of `i` in ascending order.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[i].iter().copied()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    /// Edges `(i, j)` with `i < j`, ascending.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.range(i + 1..).map(move |&j| (i, j)))
            .collect()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.node_count();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == n
    }

    pub fn ensure_connected(&self) -> Result<()> {
        if self.is_connected() {
            Ok(())
        } else {
            Err(Error::Disconnected)
        }
    }

    /// Edge-list text: `n` on the first line, then `i j` per edge, ascending.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{}\n", self.node_count());
        for (i, j) in self.edges() {
            let _ = writeln!(out, "{i} {j}");
        }
        out
    }

    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty edge list".into()))?;
        let n: usize = header
            .parse()
            .map_err(|_| Error::Parse(format!("bad node count {header:?}")))?;
        let mut g = Graph::empty(n);
        for line in lines {
            let mut parts = line.split_whitespace();
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse(format!("bad edge line {line:?}")));
            };
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Parse(format!("bad node index {s:?}")))
            };
            g.add_edge(parse(a)?, parse(b)?)?;
        }
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_edge_list())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Graph::parse_edge_list(&std::fs::read_to_string(path)?)
    }
}

/// Barabási-Albert preferential attachment.
///
/// Starts from a clique on the first `m` nodes; every later node attaches to
/// `m` distinct existing nodes drawn with probability proportional to degree.
/// For `m = 2` this yields `2(n - 2) + 1` edges.
pub fn generate_ba(n: usize, m: usize, seed: u64) -> Result<Graph> {
    if m < 1 || n <= m {
        return Err(Error::invalid(format!(
            "Barabási-Albert needs n > m >= 1, got n={n}, m={m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::empty(n);
    // every edge endpoint appears once, so uniform picks are degree-weighted
    let mut endpoints: Vec<usize> = Vec::with_capacity(2 * m * n);
    for i in 0..m {
        for j in (i + 1)..m {
            g.insert(i, j);
            endpoints.extend([i, j]);
        }
    }
    for v in m..n {
        let mut targets = BTreeSet::new();
        if endpoints.is_empty() {
            // m = 1 seed has no edges yet
            targets.extend(0..v.min(m));
        }
        while targets.len() < m {
            let pick = endpoints[rng.random_range(0..endpoints.len())];
            targets.insert(pick);
        }
        for &u in &targets {
            g.insert(u, v);
            endpoints.extend([u, v]);
        }
    }
    Ok(g)
}

/// Connected Erdős-Rényi `G(n, p)` sample, resampling up to
/// [`ER_MAX_ATTEMPTS`] times.
pub fn generate_er(n: usize, p: f64, seed: u64) -> Result<Graph> {
    if n < 2 {
        return Err(Error::invalid(format!("Erdős-Rényi needs n >= 2, got {n}")));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("edge probability must be in (0, 1], got {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..ER_MAX_ATTEMPTS {
        let mut g = Graph::empty(n);
        for i in 0..n {
            for j in (i + 1)..n {
                if p >= 1.0 || rng.random::<f64>() < p {
                    g.insert(i, j);
                }
            }
        }
        if g.is_connected() {
            return Ok(g);
        }
    }
    Err(Error::GenerationFailed {
        attempts: ER_MAX_ATTEMPTS,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftVariant {
    Adjacency,
    Laplacian,
    #[default]
    NormalizedAdjacency,
    NormalizedLaplacian,
}

impl ShiftVariant {
    pub const ALL: [ShiftVariant; 4] = [
        ShiftVariant::Adjacency,
        ShiftVariant::Laplacian,
        ShiftVariant::NormalizedAdjacency,
        ShiftVariant::NormalizedLaplacian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShiftVariant::Adjacency => "adjacency",
            ShiftVariant::Laplacian => "laplacian",
            ShiftVariant::NormalizedAdjacency => "normalized-adjacency",
            ShiftVariant::NormalizedLaplacian => "normalized-laplacian",
        }
    }
}

impl FromStr for ShiftVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShiftVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown shift operator {s:?}")))
    }
}

/// Dense graph shift operator `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftOperator {
    pub variant: ShiftVariant,
    pub matrix: DMatrix<f64>,
}

impl ShiftOperator {
    pub fn node_count(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }
}

pub fn build_shift(g: &Graph, variant: ShiftVariant) -> Result<ShiftOperator> {
    g.ensure_connected()?;
    let n = g.node_count();
    let mut s = DMatrix::zeros(n, n);
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| match g.degree(i) {
            0 => 0.0,
            d => 1.0 / (d as f64).sqrt(),
        })
        .collect();
    for (i, j) in g.edges() {
        let w = match variant {
            ShiftVariant::Adjacency => 1.0,
            ShiftVariant::Laplacian => -1.0,
            ShiftVariant::NormalizedAdjacency => inv_sqrt[i] * inv_sqrt[j],
            ShiftVariant::NormalizedLaplacian => -inv_sqrt[i] * inv_sqrt[j],
        };
        s[(i, j)] = w;
        s[(j, i)] = w;
    }
    for i in 0..n {
        s[(i, i)] = match variant {
            ShiftVariant::Adjacency | ShiftVariant::NormalizedAdjacency => 0.0,
            ShiftVariant::Laplacian => g.degree(i) as f64,
            ShiftVariant::NormalizedLaplacian => {
                if g.degree(i) > 0 {
                    1.0
                } else {
                    0.0
                }
            }
        };
    }
    Ok(ShiftOperator { variant, matrix: s })
}

/// Consensus mixing matrix `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusWeights {
    pub matrix: DMatrix<f64>,
}

impl ConsensusWeights {
    pub fn node_count(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }
}

/// Metropolis-Hastings weight of edge `{i, j}` from the two endpoint degrees.
pub fn metropolis_edge_weight(d_i: usize, d_j: usize) -> f64 {
    1.0 / (1.0 + d_i.max(d_j) as f64)
}

/// Metropolis-Hastings weights. The diagonal absorbs the remaining mass so every
/// row sums to one, accumulated over neighbors in ascending order.
pub fn metropolis_weights(g: &Graph) -> Result<ConsensusWeights> {
    g.ensure_connected()?;
    let n = g.node_count();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut off = 0.0;
        for j in g.neighbors(i) {
            let wij = metropolis_edge_weight(g.degree(i), g.degree(j));
            w[(i, j)] = wij;
            off += wij;
        }
        w[(i, i)] = 1.0 - off;
    }
    Ok(ConsensusWeights { matrix: w })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> Graph {
        Graph::complete(3)
    }

    #[test]
    fn ba_edge_count_matches_seed_clique_convention() {
        let g = generate_ba(100, 2, 7).unwrap();
        assert_eq!(g.node_count(), 100);
        assert_eq!(g.edge_count(), 2 * (100 - 2) + 1);
        assert!(g.is_connected());
    }

    #[test]
    fn ba_three_nodes_is_triangle() {
        let g = generate_ba(3, 2, 0).unwrap();
        assert_eq!(g, triangle());
    }

    #[test]
    fn ba_rejects_small_n() {
        assert!(generate_ba(2, 2, 0).is_err());
        assert!(generate_ba(5, 0, 0).is_err());
    }

    #[test]
    fn ba_with_m1_is_a_tree() {
        let g = generate_ba(20, 1, 3).unwrap();
        assert_eq!(g.edge_count(), 19);
        assert!(g.is_connected());
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(generate_ba(50, 2, 11).unwrap(), generate_ba(50, 2, 11).unwrap());
        assert_eq!(generate_er(30, 0.2, 4).unwrap(), generate_er(30, 0.2, 4).unwrap());
        assert_ne!(generate_ba(50, 2, 11).unwrap(), generate_ba(50, 2, 12).unwrap());
    }

    #[test]
    fn er_full_probability_is_complete() {
        let g = generate_er(20, 1.0, 0).unwrap();
        assert_eq!(g.edge_count(), 190);
    }

    #[test]
    fn er_sparse_sample_is_connected() {
        let g = generate_er(20, 0.3, 3).unwrap();
        assert!(g.is_connected());
        assert!((0..20).all(|i| g.degree(i) >= 1));
    }

    #[test]
    fn er_two_nodes_single_edge() {
        let g = generate_er(2, 0.5, 1).unwrap();
        assert_eq!(g.edges(), vec![(0, 1)]);
    }

    #[test]
    fn er_gives_up_when_connectivity_is_hopeless() {
        let err = generate_er(200, 1e-6, 0).unwrap_err();
        assert!(matches!(err, Error::GenerationFailed { attempts: 100 }));
        assert!(generate_er(1, 0.5, 0).is_err());
        assert!(generate_er(5, 0.0, 0).is_err());
    }

    #[test]
    fn shift_single_edge() {
        let g = Graph::path(2);
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(build_shift(&g, ShiftVariant::Adjacency).unwrap().matrix, expected);
        assert_eq!(
            build_shift(&g, ShiftVariant::NormalizedAdjacency).unwrap().matrix,
            expected
        );
    }

    #[test]
    fn shift_triangle_laplacian() {
        let s = build_shift(&triangle(), ShiftVariant::Laplacian).unwrap().matrix;
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s[(i, j)], if i == j { 2.0 } else { -1.0 });
            }
        }
    }

    #[test]
    fn shift_rejects_disconnected() {
        let g = Graph::empty(3);
        assert!(matches!(
            build_shift(&g, ShiftVariant::Adjacency),
            Err(Error::Disconnected)
        ));
    }

    #[test]
    fn metropolis_edge_example() {
        assert_eq!(metropolis_edge_weight(2, 3), 0.25);
    }

    #[test]
    fn metropolis_single_edge() {
        let w = metropolis_weights(&Graph::path(2)).unwrap().matrix;
        assert_eq!(w, DMatrix::from_element(2, 2, 0.5));
    }

    #[test]
    fn metropolis_complete_graph_averages_in_one_round() {
        let n = 6;
        let w = metropolis_weights(&Graph::complete(n)).unwrap().matrix;
        let x = nalgebra::DVector::from_iterator(n, (0..n).map(|i| (i * i) as f64 - 3.5));
        let mean = x.mean();
        let mixed = &w * &x;
        for i in 0..n {
            for j in 0..n {
                assert!((w[(i, j)] - 1.0 / n as f64).abs() < 1e-15);
            }
            assert!((mixed[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_list_round_trip() {
        let g = generate_ba(15, 2, 5).unwrap();
        let text = g.to_edge_list();
        assert!(text.starts_with("15\n"));
        assert_eq!(Graph::parse_edge_list(&text).unwrap(), g);
    }

    #[test]
    fn edge_list_rejects_garbage() {
        assert!(Graph::parse_edge_list("").is_err());
        assert!(Graph::parse_edge_list("3\n0 1 2\n").is_err());
        assert!(Graph::parse_edge_list("3\n0 0\n").is_err());
        assert!(Graph::parse_edge_list("2\n0 5\n").is_err());
    }

    #[test]
    fn self_loops_rejected() {
        let mut g = Graph::empty(3);
        assert!(g.add_edge(1, 1).is_err());
    }
}
