//! Slotted-time queue simulation.
//!
//! Each slot the policy observes `(q, r)` and returns an independent set;
//! every link then evolves as `q' = q + a - min(r, q)` if scheduled and
//! `q' = q + a` otherwise. Rates are i.i.d. clipped normals per slot and
//! arrivals are Poisson with mean `lambda = mu * E[r]`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use libm::erf;

use crate::error::{param_err, Error, Result};
use crate::graph::ConflictGraph;
use crate::lgs::Schedule;
use crate::rng::{self, Rng};

/// Arrival process driving every link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arrivals {
    /// Poisson arrivals at normalized load `mu`.
    Poisson { mu: f64 },
    /// Exactly `per_slot` packets every slot.
    Fixed { per_slot: u32 },
}

/// Per-slot link rate model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rates {
    /// Normal(mean, std) clipped into `[min, max]`.
    ClippedNormal { mean: f64, std: f64, min: f64, max: f64 },
    Fixed { rate: f64 },
}

impl Default for Rates {
    fn default() -> Self {
        Rates::ClippedNormal { mean: 50.0, std: 25.0, min: 0.0, max: 100.0 }
    }
}

/// Upper bound on any link rate; also the feature normalizer for rates.
pub const RATE_CAP: f64 = 100.0;

/// Load grid used by the experiment drivers.
pub const DEFAULT_MU_GRID: [f64; 6] = [0.01, 0.03, 0.05, 0.07, 0.08, 0.10];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficConfig {
    pub arrivals: Arrivals,
    pub rates: Rates,
    /// Slots per episode.
    pub horizon: usize,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self::poisson(0.07, 64)
    }
}

impl TrafficConfig {
    pub fn poisson(mu: f64, horizon: usize) -> Self {
        Self { arrivals: Arrivals::Poisson { mu }, rates: Rates::default(), horizon }
    }

    pub fn validate(&self) -> Result<()> {
        if let Arrivals::Poisson { mu } = self.arrivals {
            if !(mu.is_finite() && mu > 0.0) {
                return Err(param_err("mu", format!("{mu} must be positive")));
            }
        }
        match self.rates {
            Rates::ClippedNormal { mean, std, min, max } => {
                if !(std >= 0.0 && std.is_finite()) {
                    return Err(param_err("rate_std", format!("{std} must be non-negative")));
                }
                if !(min >= 0.0 && min <= max && max <= RATE_CAP && mean.is_finite()) {
                    return Err(param_err("rate_clip", format!("[{min}, {max}] must lie in [0, {RATE_CAP}]")));
                }
            }
            Rates::Fixed { rate } => {
                if !(0.0..=RATE_CAP).contains(&rate) {
                    return Err(param_err("rate", format!("{rate} outside [0, {RATE_CAP}]")));
                }
            }
        }
        Ok(())
    }

    /// Mean of the clipped rate distribution, computed in closed form.
    pub fn expected_rate(&self) -> f64 {
        match self.rates {
            Rates::Fixed { rate } => rate,
            Rates::ClippedNormal { mean, std, min, max } => clipped_normal_mean(mean, std, min, max),
        }
    }

    /// Mean arrivals per link per slot.
    pub fn lambda(&self) -> f64 {
        match self.arrivals {
            Arrivals::Poisson { mu } => mu * self.expected_rate(),
            Arrivals::Fixed { per_slot } => per_slot as f64,
        }
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `E[clamp(X, lo, hi)]` for `X ~ Normal(mean, std)`.
pub fn clipped_normal_mean(mean: f64, std: f64, lo: f64, hi: f64) -> f64 {
    if std == 0.0 {
        return mean.clamp(lo, hi);
    }
    let a = (lo - mean) / std;
    let b = (hi - mean) / std;
    let (fa, fb) = (std_normal_cdf(a), std_normal_cdf(b));
    lo * fa + hi * (1.0 - fb) + mean * (fb - fa) + std * (std_normal_pdf(a) - std_normal_pdf(b))
}

/// Draw `n` independent link rates.
pub fn sample_rates(cfg: &TrafficConfig, n: usize, rng: &mut Rng) -> Vec<f64> {
    match cfg.rates {
        Rates::Fixed { rate } => vec![rate; n],
        Rates::ClippedNormal { mean, std, min, max } => (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                (mean + std * z).clamp(min, max)
            })
            .collect(),
    }
}

/// Draw `n` independent per-link arrival counts.
///
/// Poisson counts come from inverting the CDF of one uniform per draw, so two
/// configs sharing a seed are coupled: a higher load never yields fewer
/// arrivals on any link.
pub fn sample_arrivals(cfg: &TrafficConfig, n: usize, rng: &mut Rng) -> Result<Vec<u32>> {
    match cfg.arrivals {
        Arrivals::Fixed { per_slot } => Ok(vec![per_slot; n]),
        Arrivals::Poisson { mu } => {
            if !(mu.is_finite() && mu > 0.0) {
                return Err(param_err("mu", format!("{mu} must be positive")));
            }
            let lambda = cfg.lambda();
            Ok((0..n).map(|_| poisson_quantile(lambda, rng.random::<f64>())).collect())
        }
    }
}

/// Smallest `k` with `P(X <= k) >= u` for `X ~ Poisson(lambda)`.
pub fn poisson_quantile(lambda: f64, u: f64) -> u32 {
    if lambda <= 0.0 {
        return 0;
    }
    let ln_lambda = lambda.ln();
    let cap = lambda + 40.0 * lambda.sqrt() + 40.0;
    let mut ln_p = -lambda;
    let mut cdf = ln_p.exp();
    let mut k = 0u32;
    while cdf < u && (k as f64) < cap {
        k += 1;
        ln_p += ln_lambda - (k as f64).ln();
        cdf += ln_p.exp();
    }
    k
}

/// Observable network state at one slot boundary.
#[derive(Clone, Debug)]
pub struct NetworkState<'g> {
    pub graph: &'g ConflictGraph,
    /// Per-link backlog in packets.
    pub q: Vec<f64>,
    /// Per-link service rate for this slot.
    pub r: Vec<f64>,
    pub t: usize,
}

impl<'g> NetworkState<'g> {
    pub fn new(graph: &'g ConflictGraph, q: Vec<f64>, r: Vec<f64>, t: usize) -> Result<Self> {
        let n = graph.n();
        if q.len() != n || r.len() != n {
            return Err(Error::Input(format!(
                "state vectors have lengths {}/{} for a graph with {n} vertices",
                q.len(),
                r.len()
            )));
        }
        if let Some(v) = q.iter().position(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::Input(format!("queue {v} is {}", q[v])));
        }
        if let Some(v) = r.iter().position(|&x| !(0.0..=RATE_CAP).contains(&x)) {
            return Err(Error::Input(format!("rate {v} is {}", r[v])));
        }
        Ok(Self { graph, q, r, t })
    }

    /// Empty queues at slot 0.
    pub fn initial(graph: &'g ConflictGraph, r: Vec<f64>) -> Result<Self> {
        Self::new(graph, vec![0.0; graph.n()], r, 0)
    }

    pub fn total_backlog(&self) -> f64 {
        self.q.iter().sum()
    }
}

/// Advance one slot. The returned state keeps the old rates; the episode
/// driver installs fresh ones.
pub fn step<'g>(state: &NetworkState<'g>, schedule: &[usize], arrivals: &[u32]) -> Result<NetworkState<'g>> {
    let mut next = state.clone();
    apply_slot(&mut next.q, &state.r, state.graph, schedule, arrivals)?;
    next.t += 1;
    Ok(next)
}

/// Update queues in place and return the packets served.
fn apply_slot(
    q: &mut [f64],
    r: &[f64],
    graph: &ConflictGraph,
    schedule: &[usize],
    arrivals: &[u32],
) -> Result<f64> {
    if arrivals.len() != q.len() {
        return Err(Error::Input(format!("{} arrival counts for {} links", arrivals.len(), q.len())));
    }
    if let Some((a, b)) = graph.first_conflict(schedule)? {
        return Err(Error::Infeasible { a, b });
    }
    let mut served = 0.0;
    let mut drained = vec![0.0; q.len()];
    for &v in schedule {
        drained[v] = r[v].min(q[v]);
    }
    for v in 0..q.len() {
        served += drained[v];
        q[v] = q[v] + arrivals[v] as f64 - drained[v];
        debug_assert!(q[v] >= 0.0);
    }
    Ok(served)
}

/// A scheduling policy: maps an observed state to a feasible schedule.
pub trait Policy {
    /// Called once before slot 0 of each episode.
    fn reset(&mut self) {}

    fn schedule(&mut self, state: &NetworkState<'_>) -> Result<Schedule>;
}

/// Adapter turning a closure returning vertex ids into a [`Policy`].
pub struct FnPolicy<F>(pub F);

impl<F> Policy for FnPolicy<F>
where
    F: FnMut(&NetworkState<'_>) -> Vec<usize>,
{
    fn schedule(&mut self, state: &NetworkState<'_>) -> Result<Schedule> {
        let mut members = (self.0)(state);
        members.sort_unstable();
        Ok(Schedule { members, rounds_used: 0, messages: 0 })
    }
}

/// Pre-drawn exogenous randomness for one episode: rates for slots `0..=T`
/// and arrivals for slots `0..T`. Sharing one trace across policies gives a
/// paired comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficTrace {
    pub rates: Vec<Vec<f64>>,
    pub arrivals: Vec<Vec<u32>>,
    pub lambda: f64,
}

impl TrafficTrace {
    pub fn generate(cfg: &TrafficConfig, n: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rate_rng = rng::rng_from(rng::derive(seed, 1));
        let mut arrival_rng = rng::rng_from(rng::derive(seed, 2));
        let rates = (0..=cfg.horizon).map(|_| sample_rates(cfg, n, &mut rate_rng)).collect();
        let arrivals = (0..cfg.horizon)
            .map(|_| sample_arrivals(cfg, n, &mut arrival_rng))
            .collect::<Result<_>>()?;
        Ok(Self { rates, arrivals, lambda: cfg.lambda() })
    }

    pub fn horizon(&self) -> usize {
        self.arrivals.len()
    }
}

/// One line of the per-slot trace.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotRecord {
    pub t: usize,
    /// `||q(t)||_1` before the slot's update.
    pub backlog: f64,
    pub members: Vec<usize>,
    /// `sum q(v) r(v)` over scheduled links.
    pub scheduled_weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BacklogMetrics {
    /// `(1/(T+1)) sum_t ||q(t)||_1 / |V|`.
    pub mean_q: f64,
    /// Median over links of the time-averaged backlog.
    pub median_q: f64,
    /// 95th percentile over links of the time-averaged backlog.
    pub p95_q: f64,
    /// Little's-law delay `mean_q / lambda` (0 when lambda is 0).
    pub delay: f64,
    /// Mean over slots of the scheduled `sum q r`.
    pub utility_sum: f64,
    /// `||q(t)||_1 / |V|` for `t = 0..=T`.
    pub per_slot: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub metrics: BacklogMetrics,
    pub slots: Vec<SlotRecord>,
    pub final_q: Vec<f64>,
    pub total_arrivals: f64,
    pub total_served: f64,
}

impl EpisodeOutcome {
    /// Trace file body: `t,backlog,scheduled,members` per slot.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("t,backlog,scheduled,members\n");
        for rec in &self.slots {
            let members: Vec<String> = rec.members.iter().map(usize::to_string).collect();
            s.push_str(&format!("{},{},{},{}\n", rec.t, rec.backlog, rec.members.len(), members.join(" ")));
        }
        s
    }
}

/// Simulate `cfg.horizon` slots from empty queues with traffic drawn from
/// `seed`.
pub fn run_episode<P: Policy + ?Sized>(
    graph: &ConflictGraph,
    cfg: &TrafficConfig,
    policy: &mut P,
    seed: u64,
) -> Result<EpisodeOutcome> {
    let trace = TrafficTrace::generate(cfg, graph.n(), seed)?;
    simulate(graph, &trace, policy)
}

/// Simulate against a pre-drawn traffic trace.
pub fn simulate<P: Policy + ?Sized>(
    graph: &ConflictGraph,
    trace: &TrafficTrace,
    policy: &mut P,
) -> Result<EpisodeOutcome> {
    let n = graph.n();
    let horizon = trace.horizon();
    policy.reset();
    let mut state = NetworkState::initial(graph, trace.rates[0].clone())?;
    let mut slots = Vec::with_capacity(horizon + 1);
    let mut total_arrivals = 0.0;
    let mut total_served = 0.0;
    let mut link_sums = vec![0.0; n];
    let mut per_slot = Vec::with_capacity(horizon + 1);

    for t in 0..=horizon {
        let backlog = state.total_backlog();
        per_slot.push(backlog / n as f64);
        for (acc, &x) in link_sums.iter_mut().zip(&state.q) {
            *acc += x;
        }
        if t == horizon {
            slots.push(SlotRecord { t, backlog, members: Vec::new(), scheduled_weight: 0.0 });
            break;
        }
        let schedule = policy.schedule(&state)?;
        let scheduled_weight = schedule.members.iter().map(|&v| state.q[v] * state.r[v]).sum();
        let arrivals = &trace.arrivals[t];
        total_arrivals += arrivals.iter().map(|&a| a as f64).sum::<f64>();
        total_served += apply_slot(&mut state.q, &state.r, graph, &schedule.members, arrivals)?;
        state.t += 1;
        state.r.clone_from(&trace.rates[t + 1]);
        slots.push(SlotRecord { t, backlog, members: schedule.members, scheduled_weight });
    }

    let steps = (horizon + 1) as f64;
    let mut link_means: Vec<f64> = link_sums.iter().map(|s| s / steps).collect();
    link_means.sort_by(f64::total_cmp);
    let mean_q = per_slot.iter().sum::<f64>() / steps;
    let utility_sum = if horizon == 0 {
        0.0
    } else {
        slots[..horizon].iter().map(|s| s.scheduled_weight).sum::<f64>() / horizon as f64
    };
    let metrics = BacklogMetrics {
        mean_q,
        median_q: percentile_sorted(&link_means, 0.5),
        p95_q: percentile_sorted(&link_means, 0.95),
        delay: if trace.lambda > 0.0 { mean_q / trace.lambda } else { 0.0 },
        utility_sum,
        per_slot,
    };
    Ok(EpisodeOutcome { metrics, slots, final_q: state.q, total_arrivals, total_served })
}

/// Linearly interpolated percentile of sorted data, `p` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        len => {
            let pos = p * (len - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single() -> ConflictGraph {
        ConflictGraph::empty(1).unwrap()
    }

    fn fixed(per_slot: u32, rate: f64, horizon: usize) -> TrafficConfig {
        TrafficConfig { arrivals: Arrivals::Fixed { per_slot }, rates: Rates::Fixed { rate }, horizon }
    }

    #[test]
    fn step_branches() {
        let g = ConflictGraph::empty(3).unwrap();
        let s = NetworkState::new(&g, vec![5.0, 5.0, 10.0], vec![1.0, 8.0, 4.0], 0).unwrap();
        let next = step(&s, &[1, 2], &[2, 0, 1]).unwrap();
        assert_eq!(next.q, vec![7.0, 0.0, 7.0]);
        assert_eq!(next.t, 1);
    }

    #[test]
    fn step_rejects_conflicting_schedule() {
        let g = ConflictGraph::from_edges(2, &[(0, 1)]).unwrap();
        let s = NetworkState::new(&g, vec![1.0, 1.0], vec![1.0, 1.0], 0).unwrap();
        assert!(matches!(step(&s, &[0, 1], &[0, 0]), Err(Error::Infeasible { a: 0, b: 1 })));
        assert!(matches!(step(&s, &[0], &[0]), Err(Error::Input(_))));
    }

    #[test]
    fn state_rejects_negative_queue() {
        let g = single();
        assert!(NetworkState::new(&g, vec![-1.0], vec![1.0], 0).is_err());
        assert!(NetworkState::new(&g, vec![1.0], vec![101.0], 0).is_err());
    }

    #[test]
    fn empty_horizon_is_zero() {
        let g = single();
        let mut always = FnPolicy(|_: &NetworkState<'_>| vec![0]);
        let out = run_episode(&g, &TrafficConfig::poisson(0.07, 0), &mut always, 1).unwrap();
        assert_eq!(out.metrics.mean_q, 0.0);
        assert_eq!(out.slots.len(), 1);
    }

    #[test]
    fn no_arrivals_no_backlog() {
        let g = single();
        let mut always = FnPolicy(|_: &NetworkState<'_>| vec![0]);
        let out = run_episode(&g, &fixed(0, 50.0, 20), &mut always, 1).unwrap();
        assert_eq!(out.metrics.mean_q, 0.0);
    }

    #[test]
    fn deterministic_single_link_trace() {
        // q' = q + 3 - min(5, q): 0 -> 3 -> 3 -> 3 -> 3.
        let g = single();
        let mut always = FnPolicy(|_: &NetworkState<'_>| vec![0]);
        let out = run_episode(&g, &fixed(3, 5.0, 4), &mut always, 0).unwrap();
        assert_eq!(out.metrics.per_slot, vec![0.0, 3.0, 3.0, 3.0, 3.0]);
        assert_eq!(out.metrics.mean_q, 12.0 / 5.0);
        assert_eq!(out.total_arrivals, 12.0);
        assert_eq!(out.total_served, 9.0);
        assert_eq!(out.metrics.delay, 12.0 / 5.0 / 3.0);
    }

    #[test]
    fn clipped_mean_is_fifty() {
        let cfg = TrafficConfig::default();
        assert!((cfg.expected_rate() - 50.0).abs() < 1e-12);
        assert!((cfg.lambda() - 3.5).abs() < 1e-12);
        // Asymmetric clip moves the mean up.
        assert!(clipped_normal_mean(50.0, 25.0, 20.0, 100.0) > 50.0);
    }

    #[test]
    fn zero_std_rates_are_exact() {
        let cfg = TrafficConfig {
            rates: Rates::ClippedNormal { mean: 50.0, std: 0.0, min: 0.0, max: 100.0 },
            ..TrafficConfig::default()
        };
        let mut rng = rng::rng_from(3);
        assert!(sample_rates(&cfg, 100, &mut rng).iter().all(|&r| r == 50.0));
    }

    #[test]
    fn arrivals_require_positive_load() {
        let cfg = TrafficConfig::poisson(0.0, 4);
        assert!(matches!(
            sample_arrivals(&cfg, 3, &mut rng::rng_from(0)),
            Err(Error::Parameter { field: "mu", .. })
        ));
        let cfg = TrafficConfig::poisson(0.07, 4);
        let a = sample_arrivals(&cfg, 3, &mut rng::rng_from(5)).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, sample_arrivals(&cfg, 3, &mut rng::rng_from(5)).unwrap());
    }

    #[test]
    fn poisson_quantile_matches_cdf() {
        // P(X = 0) = e^-2 ~ 0.1353, P(X <= 1) ~ 0.4060.
        assert_eq!(poisson_quantile(2.0, 0.1), 0);
        assert_eq!(poisson_quantile(2.0, 0.2), 1);
        assert_eq!(poisson_quantile(2.0, 0.41), 2);
        assert_eq!(poisson_quantile(0.0, 0.99), 0);
        // Large means do not underflow.
        let k = poisson_quantile(1000.0, 0.5);
        assert!((990..=1010).contains(&k), "{k}");
    }

    #[test]
    fn percentiles() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile_sorted(&xs, 0.5), 3.0);
        assert!((percentile_sorted(&xs, 0.95) - 4.8).abs() < 1e-12);
        assert_eq!(percentile_sorted(&[7.0], 0.95), 7.0);
    }

    #[test]
    fn trace_csv_layout() {
        let g = ConflictGraph::empty(2).unwrap();
        let mut both = FnPolicy(|_: &NetworkState<'_>| vec![1, 0]);
        let out = run_episode(&g, &fixed(1, 5.0, 2), &mut both, 0).unwrap();
        assert_eq!(out.trace_csv(), "t,backlog,scheduled,members\n0,0,2,0 1\n1,2,2,0 1\n2,2,0,\n");
    }
}
