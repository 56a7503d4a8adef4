//! Conflict graphs and the random topology generators used for experiments.
//!
//! Vertices are wireless links; an edge joins two links that interfere and
//! therefore can never transmit in the same slot.

use std::collections::BinaryHeap;
use std::cmp::Reverse;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::rng::{self, Rng};

/// Undirected simple graph with sorted adjacency lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConflictGraph {
    neighbors: Vec<Vec<usize>>,
    edge_count: usize,
}

impl ConflictGraph {
    /// Build a graph from an edge list. Self-loops, out-of-range endpoints and
    /// repeated edges are rejected.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(param_err("n", "graph needs at least one vertex"));
        }
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Input(format!("edge ({a}, {b}) out of range for n = {n}")));
            }
            if a == b {
                return Err(Error::Input(format!("self-loop on vertex {a}")));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for (v, list) in neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            if list.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Input(format!("repeated edge at vertex {v}")));
            }
        }
        Ok(Self { neighbors, edge_count: edges.len() })
    }

    /// Graph on `n` vertices with no edges.
    pub fn empty(n: usize) -> Result<Self> {
        Self::from_edges(n, &[])
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        a < self.n() && self.neighbors[a].binary_search(&b).is_ok()
    }

    /// Edges as `(a, b)` with `a < b`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count);
        for (a, list) in self.neighbors.iter().enumerate() {
            out.extend(list.iter().filter(|&&b| b > a).map(|&b| (a, b)));
        }
        out
    }

    /// Relabel vertices: vertex `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n() {
            return Err(Error::Input("permutation length differs from vertex count".into()));
        }
        let edges: Vec<_> = self.edges().into_iter().map(|(a, b)| (perm[a], perm[b])).collect();
        Self::from_edges(self.n(), &edges)
    }

    /// `true` iff no two members of `set` are adjacent.
    pub fn is_independent_set(&self, set: &[usize]) -> Result<bool> {
        Ok(self.first_conflict(set)?.is_none())
    }

    /// First adjacent pair inside `set`, if any.
    pub fn first_conflict(&self, set: &[usize]) -> Result<Option<(usize, usize)>> {
        let n = self.n();
        let mut member = vec![false; n];
        for &v in set {
            if v >= n {
                return Err(Error::Input(format!("vertex {v} out of range for n = {n}")));
            }
            member[v] = true;
        }
        for &v in set {
            if let Some(&u) = self.neighbors[v].iter().find(|&&u| member[u]) {
                return Ok(Some((v.min(u), v.max(u))));
            }
        }
        Ok(None)
    }

    pub fn degree_stats(&self) -> DegreeStats {
        let degrees = self.neighbors.iter().map(Vec::len);
        DegreeStats {
            min: degrees.clone().min().unwrap_or(0),
            max: degrees.clone().max().unwrap_or(0),
            mean: 2.0 * self.edge_count as f64 / self.n() as f64,
        }
    }

    /// `true` iff every vertex is reachable from vertex 0.
    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &u in &self.neighbors[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Plain-text edge list: `"n m"` then one `"a b"` line per edge, `a < b`,
    /// sorted.
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("{} {}\n", self.n(), self.edge_count);
        for (a, b) in self.edges() {
            s.push_str(&format!("{a} {b}\n"));
        }
        s
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| Error::Input("empty edge list".into()))?;
        let (n, m) = parse_pair(header)?;
        let edges = lines.map(parse_pair).collect::<Result<Vec<_>>>()?;
        if edges.len() != m {
            return Err(Error::Input(format!("header declares {m} edges, found {}", edges.len())));
        }
        Self::from_edges(n, &edges)
    }
}

fn parse_pair(line: &str) -> Result<(usize, usize)> {
    let mut it = line.split_whitespace().map(str::parse::<usize>);
    match (it.next(), it.next(), it.next()) {
        (Some(Ok(a)), Some(Ok(b)), None) => Ok((a, b)),
        _ => Err(Error::Input(format!("malformed edge-list line `{line}`"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegreeStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

/// A random topology model together with its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    /// One hub adjacent to `leaves` peripheral vertices.
    Star { leaves: usize },
    ErdosRenyi { n: usize, p: f64 },
    /// Preferential attachment with `m` edges per new vertex.
    BarabasiAlbert { n: usize, m: usize },
    /// Random tree whose degree sequence follows a power law.
    PowerLawTree { n: usize, gamma: f64 },
}

/// Default vertex count for the random families when a short name is used.
pub const DEFAULT_RANDOM_N: usize = 30;

impl Topology {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Topology::Star { .. } => Ok(()),
            Topology::ErdosRenyi { n, p } => {
                if n == 0 {
                    return Err(param_err("n", "must be at least 1"));
                }
                if !(0.0..=1.0).contains(&p) {
                    return Err(param_err("p", format!("{p} is outside [0, 1]")));
                }
                Ok(())
            }
            Topology::BarabasiAlbert { n, m } => {
                if n == 0 {
                    return Err(param_err("n", "must be at least 1"));
                }
                if m == 0 {
                    return Err(param_err("m", "must be at least 1"));
                }
                if m >= n {
                    return Err(param_err("m", format!("m = {m} must be below n = {n}")));
                }
                Ok(())
            }
            Topology::PowerLawTree { n, gamma } => {
                if n == 0 {
                    return Err(param_err("n", "must be at least 1"));
                }
                if !(gamma.is_finite() && gamma > 1.0) {
                    return Err(param_err("gamma", format!("{gamma} must be finite and > 1")));
                }
                Ok(())
            }
        }
    }

    pub fn vertex_count(&self) -> usize {
        match *self {
            Topology::Star { leaves } => leaves + 1,
            Topology::ErdosRenyi { n, .. }
            | Topology::BarabasiAlbert { n, .. }
            | Topology::PowerLawTree { n, .. } => n,
        }
    }

    /// Same family with the vertex count replaced (stars get `n - 1` leaves).
    pub fn with_n(self, n: usize) -> Self {
        match self {
            Topology::Star { .. } => Topology::Star { leaves: n.saturating_sub(1) },
            Topology::ErdosRenyi { p, .. } => Topology::ErdosRenyi { n, p },
            Topology::BarabasiAlbert { m, .. } => Topology::BarabasiAlbert { n, m },
            Topology::PowerLawTree { gamma, .. } => Topology::PowerLawTree { n, gamma },
        }
    }

    /// Short label used in file names and reports.
    pub fn label(&self) -> String {
        match *self {
            Topology::Star { leaves } => format!("star{leaves}"),
            Topology::ErdosRenyi { n, p } => {
                if n == DEFAULT_RANDOM_N && p == 0.1 {
                    "er".into()
                } else {
                    format!("er_n{n}_p{p}")
                }
            }
            Topology::BarabasiAlbert { n, m } => {
                if n == DEFAULT_RANDOM_N {
                    format!("ba{m}")
                } else {
                    format!("ba{m}_n{n}")
                }
            }
            Topology::PowerLawTree { n, gamma } => {
                if n == DEFAULT_RANDOM_N && gamma == 3.0 {
                    "tree".into()
                } else {
                    format!("tree_n{n}_g{gamma}")
                }
            }
        }
    }

    /// Draw one graph. Deterministic in `(self, seed)`.
    pub fn generate(&self, seed: u64) -> Result<ConflictGraph> {
        TopologyFamily { topology: *self, seed }.generate()
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Topology {
    type Err = Error;

    /// Accepts `starN`, `er`, `baM`, `tree` (random families on
    /// [`DEFAULT_RANDOM_N`] vertices) and the `_nN`, `_pP`, `_gG` suffixes
    /// that [`Topology::label`] emits for other parameters.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let mut parts = s.split('_');
        let head = parts.next().unwrap_or_default();
        let bad = |what: &str| Error::Input(format!("bad {what} in topology `{s}`"));
        let (mut n, mut p, mut gamma) = (DEFAULT_RANDOM_N, 0.1, 3.0);
        for part in parts {
            let (key, value) = part.split_at(part.len().min(1));
            match key {
                "n" => n = value.parse().map_err(|_| bad("vertex count"))?,
                "p" => p = value.parse().map_err(|_| bad("edge probability"))?,
                "g" => gamma = value.parse().map_err(|_| bad("exponent"))?,
                _ => return Err(bad("suffix")),
            }
        }
        let t = if let Some(rest) = head.strip_prefix("star") {
            Topology::Star { leaves: rest.parse().map_err(|_| bad("star size"))? }
        } else if head == "er" {
            Topology::ErdosRenyi { n, p }
        } else if let Some(rest) = head.strip_prefix("ba") {
            let m = if rest.is_empty() { 1 } else { rest.parse().map_err(|_| bad("attachment count"))? };
            Topology::BarabasiAlbert { n, m }
        } else if head == "tree" {
            Topology::PowerLawTree { n, gamma }
        } else {
            return Err(Error::Input(format!("unknown topology `{s}`")));
        };
        t.validate()?;
        Ok(t)
    }
}

/// A topology model plus the seed that pins down one realization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopologyFamily {
    pub topology: Topology,
    pub seed: u64,
}

impl TopologyFamily {
    pub fn generate(&self) -> Result<ConflictGraph> {
        self.topology.validate()?;
        let mut rng = rng::rng_from(self.seed);
        match self.topology {
            Topology::Star { leaves } => star(leaves),
            Topology::ErdosRenyi { n, p } => erdos_renyi(n, p, &mut rng),
            Topology::BarabasiAlbert { n, m } => barabasi_albert(n, m, &mut rng),
            Topology::PowerLawTree { n, gamma } => power_law_tree(n, gamma, &mut rng),
        }
    }
}

fn star(leaves: usize) -> Result<ConflictGraph> {
    let edges: Vec<_> = (1..=leaves).map(|l| (0, l)).collect();
    ConflictGraph::from_edges(leaves + 1, &edges)
}

fn erdos_renyi(n: usize, p: f64, rng: &mut Rng) -> Result<ConflictGraph> {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random::<f64>() < p {
                edges.push((a, b));
            }
        }
    }
    ConflictGraph::from_edges(n, &edges)
}

/// Complete seed graph on `m` vertices, then each new vertex attaches to `m`
/// distinct existing vertices chosen proportionally to degree.
fn barabasi_albert(n: usize, m: usize, rng: &mut Rng) -> Result<ConflictGraph> {
    let mut edges = Vec::with_capacity(m * (m - 1) / 2 + (n - m) * m);
    // Each vertex appears once per incident edge endpoint.
    let mut endpoints: Vec<usize> = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            edges.push((a, b));
            endpoints.extend([a, b]);
        }
    }
    let mut targets = Vec::with_capacity(m);
    for v in m..n {
        targets.clear();
        while targets.len() < m {
            let t = if endpoints.is_empty() {
                rng.random_range(0..v)
            } else {
                endpoints[rng.random_range(0..endpoints.len())]
            };
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        for &t in &targets {
            edges.push((t, v));
            endpoints.extend([t, v]);
        }
    }
    ConflictGraph::from_edges(n, &edges)
}

/// Power-law degree sequence, repaired to sum to `2(n - 1)`, realized as a
/// tree by decoding a shuffled Prüfer sequence.
fn power_law_tree(n: usize, gamma: f64, rng: &mut Rng) -> Result<ConflictGraph> {
    if n <= 2 {
        let edges: Vec<_> = (1..n).map(|v| (0, v)).collect();
        return ConflictGraph::from_edges(n, &edges);
    }
    let max_d = n - 1;
    let cdf: Vec<f64> = {
        let weights: Vec<f64> = (1..=max_d).map(|d| (d as f64).powf(-gamma)).collect();
        let total: f64 = weights.iter().sum();
        weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w / total;
                Some(*acc)
            })
            .collect()
    };
    let mut degree: Vec<usize> = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            1 + cdf.iter().position(|&c| u < c).unwrap_or(max_d - 1)
        })
        .collect();

    let target = 2 * (n - 1);
    let mut sum: usize = degree.iter().sum();
    while sum > target {
        let v = rng.random_range(0..n);
        if degree[v] > 1 {
            degree[v] -= 1;
            sum -= 1;
        }
    }
    while sum < target {
        let v = rng.random_range(0..n);
        if degree[v] < max_d {
            degree[v] += 1;
            sum += 1;
        }
    }

    let mut code: Vec<usize> = degree
        .iter()
        .enumerate()
        .flat_map(|(v, &d)| std::iter::repeat_n(v, d - 1))
        .collect();
    code.shuffle(rng);
    ConflictGraph::from_edges(n, &prufer_decode(n, &code))
}

fn prufer_decode(n: usize, code: &[usize]) -> Vec<(usize, usize)> {
    let mut remaining = vec![1usize; n];
    for &v in code {
        remaining[v] += 1;
    }
    let mut leaves: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&v| remaining[v] == 1).map(Reverse).collect();
    let mut edges = Vec::with_capacity(n - 1);
    for &v in code {
        let Reverse(leaf) = leaves.pop().expect("Prüfer decode ran out of leaves");
        edges.push((leaf.min(v), leaf.max(v)));
        remaining[v] -= 1;
        if remaining[v] == 1 {
            leaves.push(Reverse(v));
        }
    }
    let Reverse(a) = leaves.pop().expect("two leaves remain");
    let Reverse(b) = leaves.pop().expect("two leaves remain");
    edges.push((a.min(b), a.max(b)));
    edges
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> ConflictGraph {
        ConflictGraph::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap()
    }

    fn assert_well_formed(g: &ConflictGraph) {
        for v in 0..g.n() {
            let nb = g.neighbors(v);
            assert!(nb.windows(2).all(|w| w[0] < w[1]), "unsorted neighbors at {v}");
            assert!(!nb.contains(&v), "self-loop at {v}");
            for &u in nb {
                assert!(g.has_edge(u, v), "asymmetric edge {v}-{u}");
            }
        }
        let deg_sum: usize = (0..g.n()).map(|v| g.degree(v)).sum();
        assert_eq!(deg_sum, 2 * g.edge_count());
    }

    #[test]
    fn star_ten() {
        let g = Topology::Star { leaves: 10 }.generate(0).unwrap();
        assert_eq!(g.n(), 11);
        assert_eq!(g.edge_count(), 10);
        assert_eq!(g.degree(0), 10);
        assert!((1..11).all(|l| g.degree(l) == 1));
        let stats = g.degree_stats();
        assert_eq!((stats.min, stats.max), (1, 10));
        assert!((stats.mean - 20.0 / 11.0).abs() < 1e-15);
        let leaves: Vec<_> = (1..11).collect();
        assert!(g.is_independent_set(&leaves).unwrap());
    }

    #[test]
    fn single_vertex_er() {
        let g = Topology::ErdosRenyi { n: 1, p: 0.5 }.generate(3).unwrap();
        assert_eq!((g.n(), g.edge_count()), (1, 0));
    }

    #[test]
    fn er_extremes() {
        let none = Topology::ErdosRenyi { n: 12, p: 0.0 }.generate(1).unwrap();
        assert_eq!(none.edge_count(), 0);
        let full = Topology::ErdosRenyi { n: 12, p: 1.0 }.generate(1).unwrap();
        assert_eq!(full.edge_count(), 66);
    }

    #[test]
    fn er_mean_edge_count() {
        // E[m] = p * C(20, 2) = 19.
        let total: usize = (0..1000)
            .map(|s| Topology::ErdosRenyi { n: 20, p: 0.1 }.generate(s).unwrap().edge_count())
            .inspect(|&m| assert!(m <= 190))
            .sum();
        let mean = total as f64 / 1000.0;
        assert!((mean - 19.0).abs() < 3.0, "mean edge count {mean}");
    }

    #[test]
    fn ba_edge_count_matches_seed_clique_convention() {
        for (n, m) in [(20, 1), (20, 2), (30, 3), (5, 4)] {
            let g = Topology::BarabasiAlbert { n, m }.generate(9).unwrap();
            assert_well_formed(&g);
            assert_eq!(g.edge_count(), m * (m - 1) / 2 + (n - m) * m);
        }
        let g = Topology::BarabasiAlbert { n: 20, m: 2 }.generate(4).unwrap();
        assert_eq!(g.edge_count(), 37);
        assert!((g.degree_stats().mean - 3.7).abs() < 1e-12);
    }

    #[test]
    fn tree_is_connected_and_acyclic() {
        for n in [1, 2, 3, 10, 30, 100] {
            for seed in 0..20 {
                let g = Topology::PowerLawTree { n, gamma: 3.0 }.generate(seed).unwrap();
                assert_well_formed(&g);
                assert_eq!(g.edge_count(), n - 1);
                assert!(g.is_connected());
            }
        }
    }

    #[test]
    fn invalid_parameters_name_the_field() {
        let cases = [
            (Topology::ErdosRenyi { n: 5, p: 1.5 }, "p"),
            (Topology::ErdosRenyi { n: 0, p: 0.5 }, "n"),
            (Topology::BarabasiAlbert { n: 4, m: 4 }, "m"),
            (Topology::BarabasiAlbert { n: 0, m: 1 }, "n"),
            (Topology::PowerLawTree { n: 0, gamma: 3.0 }, "n"),
        ];
        for (t, field) in cases {
            match t.generate(0) {
                Err(Error::Parameter { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{t:?}: expected parameter error, got {other:?}"),
            }
        }
    }

    #[test]
    fn independence_checks() {
        let g = triangle();
        assert!(g.is_independent_set(&[0]).unwrap());
        assert!(!g.is_independent_set(&[0, 1]).unwrap());
        assert!(matches!(g.is_independent_set(&[3]), Err(Error::Input(_))));
    }

    #[test]
    fn empty_graph_stats() {
        let s = ConflictGraph::empty(5).unwrap().degree_stats();
        assert_eq!((s.min, s.max, s.mean), (0, 0, 0.0));
    }

    #[test]
    fn generation_is_pure() {
        for t in [
            Topology::ErdosRenyi { n: 40, p: 0.1 },
            Topology::BarabasiAlbert { n: 40, m: 2 },
            Topology::PowerLawTree { n: 40, gamma: 3.0 },
        ] {
            assert_eq!(t.generate(11).unwrap(), t.generate(11).unwrap());
            assert_ne!(t.generate(11).unwrap(), t.generate(12).unwrap());
        }
    }

    #[test]
    fn edge_list_format() {
        let g = triangle();
        assert_eq!(g.to_edge_list(), "3 3\n0 1\n0 2\n1 2\n");
        assert_eq!(ConflictGraph::from_edge_list(&g.to_edge_list()).unwrap(), g);
        assert!(ConflictGraph::from_edge_list("3 2\n0 1\n").is_err());
        assert!(ConflictGraph::from_edge_list("2 1\n0 0\n").is_err());
    }

    #[test]
    fn names_parse() {
        assert_eq!("star10".parse::<Topology>().unwrap(), Topology::Star { leaves: 10 });
        assert_eq!("ba2".parse::<Topology>().unwrap(), Topology::BarabasiAlbert { n: 30, m: 2 });
        for name in ["star20", "er", "ba1", "ba2", "tree"] {
            assert_eq!(name.parse::<Topology>().unwrap().label(), name);
        }
        assert!("ring".parse::<Topology>().is_err());
        assert!("er_x3".parse::<Topology>().is_err());
    }

    #[test]
    fn non_default_labels_round_trip() {
        let cases = [
            Topology::ErdosRenyi { n: 15, p: 0.2 },
            Topology::BarabasiAlbert { n: 12, m: 2 },
            Topology::PowerLawTree { n: 40, gamma: 2.5 },
        ];
        for t in cases {
            assert_eq!(t.label().parse::<Topology>().unwrap(), t, "{}", t.label());
        }
    }
}
