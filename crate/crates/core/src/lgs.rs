//! Local Greedy Solver and an exact maximum-weight independent set oracle.
//!
//! The solver runs synchronous rounds over a residual graph. In each round
//! every residual vertex whose utility strictly beats all residual neighbors
//! joins the schedule; the winners and their neighbors then leave the
//! residual graph. Ties are broken by vertex index so every round makes
//! progress.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ConflictGraph;
use crate::traffic::{NetworkState, Policy};

/// Per-vertex scores consumed by the solver. Always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityVector(Vec<f64>);

impl UtilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::Input(format!("utility of vertex {v} is {}", values[v])));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Which vertex wins among equal utilities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowerIndex,
    HigherIndex,
}

impl TieBreak {
    /// Total order on `(utility, vertex)` pairs.
    fn cmp(self, ua: f64, a: usize, ub: f64, b: usize) -> Ordering {
        ua.partial_cmp(&ub).expect("finite utilities").then_with(|| match self {
            TieBreak::LowerIndex => b.cmp(&a),
            TieBreak::HigherIndex => a.cmp(&b),
        })
    }
}

/// Links selected for transmission in one slot.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Schedule {
    /// Sorted vertex ids.
    pub members: Vec<usize>,
    pub rounds_used: usize,
    /// Utility announcements exchanged between residual neighbors.
    pub messages: usize,
}

impl Schedule {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Run the Local Greedy Solver to completion.
pub fn solve(graph: &ConflictGraph, utility: &UtilityVector, tie_break: TieBreak) -> Result<Schedule> {
    let n = graph.n();
    if utility.len() != n {
        return Err(Error::Input(format!("{} utilities for {n} vertices", utility.len())));
    }
    let u = utility.as_slice();
    let mut alive = vec![true; n];
    let mut remaining = n;
    let mut members = Vec::new();
    let mut rounds_used = 0;
    let mut messages = 0;
    let mut winners = Vec::new();

    while remaining > 0 {
        rounds_used += 1;
        winners.clear();
        for v in (0..n).filter(|&v| alive[v]) {
            let mut wins = true;
            for &w in graph.neighbors(v).iter().filter(|&&w| alive[w]) {
                messages += 1;
                if tie_break.cmp(u[v], v, u[w], w) != Ordering::Greater {
                    wins = false;
                }
            }
            if wins {
                winners.push(v);
            }
        }
        assert!(!winners.is_empty(), "greedy round removed no vertex");
        for &v in &winners {
            members.push(v);
            for x in std::iter::once(v).chain(graph.neighbors(v).iter().copied()) {
                if alive[x] {
                    alive[x] = false;
                    remaining -= 1;
                }
            }
        }
    }
    members.sort_unstable();
    Ok(Schedule { members, rounds_used, messages })
}

/// Default enumeration bound for [`mwis_exact`].
pub const MWIS_EXACT_LIMIT: usize = 26;

/// Maximum-weight independent set by branch and bound. Among optimal sets the
/// lexicographically smallest sorted id list is returned.
pub fn mwis_exact(graph: &ConflictGraph, weights: &[f64], limit: usize) -> Result<(Vec<usize>, f64)> {
    let n = graph.n();
    if n > limit.min(63) {
        return Err(Error::TooLarge { n, limit: limit.min(63) });
    }
    if weights.len() != n {
        return Err(Error::Input(format!("{} weights for {n} vertices", weights.len())));
    }
    if let Some(v) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::Input(format!("weight of vertex {v} is {}", weights[v])));
    }
    let closed: Vec<u64> = (0..n)
        .map(|v| graph.neighbors(v).iter().fold(1u64 << v, |m, &u| m | (1 << u)))
        .collect();
    let mut search = Mwis { weights, closed: &closed, best_set: 0, best_weight: 0.0, found: false };
    let all = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    search.branch(all, 0, 0.0);
    let set: Vec<usize> = (0..n).filter(|&v| search.best_set & (1 << v) != 0).collect();
    Ok((set, search.best_weight))
}

struct Mwis<'a> {
    weights: &'a [f64],
    closed: &'a [u64],
    best_set: u64,
    best_weight: f64,
    found: bool,
}

impl Mwis<'_> {
    fn branch(&mut self, candidates: u64, chosen: u64, weight: f64) {
        let bound = weight
            + bits(candidates).map(|v| self.weights[v].max(0.0)).sum::<f64>();
        if self.found && bound < self.best_weight {
            return;
        }
        if candidates == 0 {
            if !self.found
                || weight > self.best_weight
                || (weight == self.best_weight && lex_less(chosen, self.best_set))
            {
                self.best_set = chosen;
                self.best_weight = weight;
                self.found = true;
            }
            return;
        }
        let v = candidates.trailing_zeros() as usize;
        self.branch(candidates & !self.closed[v], chosen | (1 << v), weight + self.weights[v]);
        self.branch(candidates & !(1 << v), chosen, weight);
    }
}

fn bits(mask: u64) -> impl Iterator<Item = usize> {
    (0..64).filter(move |&v| mask & (1u64 << v) != 0)
}

/// Lexicographic comparison of the sorted id lists encoded by two masks.
fn lex_less(a: u64, b: u64) -> bool {
    let mut ia = bits(a);
    let mut ib = bits(b);
    loop {
        match (ia.next(), ib.next()) {
            (None, None) => return false,
            (None, Some(_)) => return true,
            (Some(_), None) => return false,
            (Some(x), Some(y)) if x != y => return x < y,
            _ => {}
        }
    }
}

/// Per-link weight used by the queue-based greedy baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineWeight {
    /// `q(v) * r(v)`.
    #[default]
    QueueRate,
    /// `q(v)`.
    Queue,
}

impl BaselineWeight {
    pub fn weights(self, q: &[f64], r: &[f64]) -> Vec<f64> {
        match self {
            BaselineWeight::QueueRate => q.iter().zip(r).map(|(q, r)| q * r).collect(),
            BaselineWeight::Queue => q.to_vec(),
        }
    }
}

/// Greedy baseline: solve with utilities `q * r`.
pub fn queue_weighted_lgs(graph: &ConflictGraph, q: &[f64], r: &[f64]) -> Result<Schedule> {
    let u = UtilityVector::new(BaselineWeight::QueueRate.weights(q, r))?;
    solve(graph, &u, TieBreak::LowerIndex)
}

/// The greedy baseline as a scheduling policy.
#[derive(Clone, Copy, Debug, Default)]
pub struct LgsPolicy {
    pub weight: BaselineWeight,
    pub tie_break: TieBreak,
}

impl Policy for LgsPolicy {
    fn schedule(&mut self, state: &NetworkState<'_>) -> Result<Schedule> {
        let u = UtilityVector::new(self.weight.weights(&state.q, &state.r))?;
        solve(state.graph, &u, self.tie_break)
    }
}
