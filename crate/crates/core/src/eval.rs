//! Paired evaluation of scheduling policies against the greedy baseline.
//!
//! Every policy in a comparison runs on the same graph and the same pre-drawn
//! traffic trace. Each metric is averaged over instances per policy and then
//! divided by the LGS average, so the LGS row is exactly 1 by construction.
//! Percentile bootstrap intervals resample instances jointly for all
//! policies of a cell.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::graph::{ConflictGraph, Topology};
use crate::lgs::LgsPolicy;
use crate::models::{Composition, LearnedPolicy, ModelConfig, UtilityModel, Variant};
use crate::nn::Checkpoint;
use crate::rng;
use crate::traffic::{percentile_sorted, simulate, BacklogMetrics, EpisodeOutcome, Policy, TrafficConfig, TrafficTrace};

const GRAPH_STREAM: u64 = 21;
const TRAFFIC_STREAM: u64 = 22;
const BOOTSTRAP_STREAM: u64 = 23;

/// Report rows, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Lgs,
    Gcn,
    NoAttentionSampling,
    NoPositionalEncoding,
    Full,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Lgs,
        PolicyKind::Gcn,
        PolicyKind::NoAttentionSampling,
        PolicyKind::NoPositionalEncoding,
        PolicyKind::Full,
    ];

    /// Short identifier used on the command line and in CSVs.
    pub fn id(self) -> &'static str {
        match self {
            PolicyKind::Lgs => "lgs",
            PolicyKind::Gcn => "gcn",
            PolicyKind::NoAttentionSampling => "no_as",
            PolicyKind::NoPositionalEncoding => "no_pe",
            PolicyKind::Full => "full",
        }
    }

    /// Row label in rendered tables.
    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::Lgs => "LGS",
            PolicyKind::Gcn => "GCN",
            PolicyKind::NoAttentionSampling => "w/o-AS",
            PolicyKind::NoPositionalEncoding => "w/o-PE",
            PolicyKind::Full => "Full",
        }
    }

    /// Model configuration a checkpoint for this row must carry.
    pub fn model_config(self) -> Option<ModelConfig> {
        match self {
            PolicyKind::Lgs => None,
            PolicyKind::Gcn => Some(ModelConfig::gcn()),
            PolicyKind::NoAttentionSampling => Some(ModelConfig::transgnn().without_attention_sampling()),
            PolicyKind::NoPositionalEncoding => Some(ModelConfig::transgnn().without_positional_encoding()),
            PolicyKind::Full => Some(ModelConfig::transgnn()),
        }
    }

    fn accepts(self, config: &ModelConfig) -> bool {
        match self.model_config() {
            None => false,
            Some(want) => {
                want.variant == config.variant
                    && (config.variant == Variant::Gcn
                        || (want.attention_sampling == config.attention_sampling
                            && want.positional_encoding == config.positional_encoding))
            }
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.id() == s || k.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown policy `{s}` (expected lgs, gcn, no_as, no_pe or full)")))
    }
}

/// A policy row plus its trained model, if it has one.
#[derive(Clone, Debug)]
pub struct PolicyEntry {
    pub kind: PolicyKind,
    pub model: Option<UtilityModel>,
}

impl PolicyEntry {
    pub fn lgs() -> Self {
        Self { kind: PolicyKind::Lgs, model: None }
    }

    /// Learned row. Fails if the model's architecture does not fit the row.
    pub fn learned(kind: PolicyKind, model: UtilityModel) -> Result<Self> {
        if !kind.accepts(&model.config) {
            return Err(Error::Checkpoint(format!(
                "row `{}` cannot use a `{}` model",
                kind.label(),
                model.config.label()
            )));
        }
        Ok(Self { kind, model: Some(model) })
    }

    pub fn from_checkpoint_file(kind: PolicyKind, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck = Checkpoint::from_text(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::learned(kind, UtilityModel::from_checkpoint(&ck)?)
    }

    fn validate(&self) -> Result<()> {
        match (&self.model, self.kind) {
            (None, PolicyKind::Lgs) => Ok(()),
            (None, kind) => Err(Error::Config(format!("policy `{}` needs a checkpoint", kind.label()))),
            (Some(_), PolicyKind::Lgs) => Err(Error::Config("the LGS row takes no checkpoint".into())),
            (Some(model), kind) if !kind.accepts(&model.config) => Err(Error::Checkpoint(format!(
                "row `{}` cannot use a `{}` model",
                kind.label(),
                model.config.label()
            ))),
            _ => Ok(()),
        }
    }

    fn instantiate(&self, composition: Composition) -> Box<dyn Policy + '_> {
        match &self.model {
            None => Box::new(LgsPolicy::default()),
            Some(model) => Box::new(LearnedPolicy::new(model).with_composition(composition)),
        }
    }
}

/// The five reported metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    /// Median over links of the time-averaged backlog.
    QMed,
    /// 95th percentile over links.
    Q95,
    /// Mean backlog per link and slot.
    QAvg,
    /// Little's-law delay.
    DAvg,
    /// Scheduled `sum q r` per slot.
    UGcn,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::QMed, Metric::Q95, Metric::QAvg, Metric::DAvg, Metric::UGcn];

    pub fn id(self) -> &'static str {
        match self {
            Metric::QMed => "q_med",
            Metric::Q95 => "q_95",
            Metric::QAvg => "q_avg",
            Metric::DAvg => "d_avg",
            Metric::UGcn => "u_gcn",
        }
    }

    pub fn of(self, m: &BacklogMetrics) -> f64 {
        match self {
            Metric::QMed => m.median_q,
            Metric::Q95 => m.p95_q,
            Metric::QAvg => m.mean_q,
            Metric::DAvg => m.delay,
            Metric::UGcn => m.utility_sum,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub topologies: Vec<Topology>,
    pub instances: usize,
    pub horizon: usize,
    pub mus: Vec<f64>,
    pub policies: Vec<PolicyEntry>,
    pub base_seed: u64,
    pub bootstrap_resamples: usize,
    /// Two-sided coverage of the bootstrap interval.
    pub confidence: f64,
    pub composition: Composition,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            topologies: Vec::new(),
            instances: 100,
            horizon: 64,
            mus: vec![0.07],
            policies: vec![PolicyEntry::lgs()],
            base_seed: 0,
            bootstrap_resamples: 1000,
            confidence: 0.95,
            composition: Composition::Modulated,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(param_err("instances", "must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(param_err("horizon", "must be at least 1"));
        }
        if self.topologies.is_empty() {
            return Err(Error::Config("no topologies to evaluate".into()));
        }
        if self.mus.is_empty() {
            return Err(Error::Config("no loads to evaluate".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(param_err("confidence", "must lie in (0, 1)"));
        }
        for t in &self.topologies {
            t.validate()?;
        }
        for &mu in &self.mus {
            TrafficConfig::poisson(mu, self.horizon).validate()?;
        }
        let mut kinds: Vec<PolicyKind> = self.policies.iter().map(|p| p.kind).collect();
        kinds.sort();
        if kinds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("a policy is listed twice".into()));
        }
        self.policies.iter().try_for_each(PolicyEntry::validate)
    }

    /// Rows in table order. LGS is always present as the reference.
    fn rows(&self) -> Vec<PolicyEntry> {
        let mut rows = self.policies.clone();
        if !rows.iter().any(|p| p.kind == PolicyKind::Lgs) {
            rows.push(PolicyEntry::lgs());
        }
        rows.sort_by_key(|p| p.kind);
        rows
    }
}

/// Seed of graph `instance` of `topology`. Depends only on the family label
/// so graphs are shared across loads, policies and spec orderings.
pub fn instance_seed(base_seed: u64, topology: &Topology, instance: usize) -> u64 {
    rng::derive_path(base_seed, &[GRAPH_STREAM, label_key(&topology.label()), instance as u64])
}

/// Traffic seed of an instance at load `mu`.
pub fn traffic_seed(graph_seed: u64, mu: f64) -> u64 {
    rng::derive_path(graph_seed, &[TRAFFIC_STREAM, mu.to_bits()])
}

/// FNV-1a.
fn label_key(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Ratio of one metric for one policy.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRatio {
    pub metric: Metric,
    /// Mean over instances divided by the LGS mean.
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Mean over instances of the per-instance ratios.
    pub mean_instance_ratio: f64,
    /// Mean over instances of the raw metric.
    pub absolute: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub topology: String,
    pub mu: f64,
    pub policy: PolicyKind,
    pub metrics: Vec<MetricRatio>,
}

impl ReportRow {
    pub fn get(&self, metric: Metric) -> &MetricRatio {
        self.metrics.iter().find(|m| m.metric == metric).expect("every row carries all metrics")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioReport {
    pub rows: Vec<ReportRow>,
    pub instances: usize,
    /// Schedules checked for independence.
    pub schedules_audited: u64,
    pub violations: u64,
}

impl RatioReport {
    pub const CSV_HEADER: &'static str = "topology,mu,policy,metric,value,ci_low,ci_high";

    pub fn row(&self, topology: &str, mu: f64, policy: PolicyKind) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.topology == topology && r.mu == mu && r.policy == policy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for row in &self.rows {
            for m in &row.metrics {
                out.push_str(&format!(
                    "{},{},{},{},{:.6},{:.6},{:.6}\n",
                    row.topology,
                    row.mu,
                    row.policy.id(),
                    m.metric.id(),
                    m.value,
                    m.ci_low,
                    m.ci_high
                ));
            }
        }
        out
    }

    /// Plain-text tables, one per (topology, load).
    pub fn render_tables(&self) -> String {
        let mut out = String::new();
        let mut last: Option<(&str, f64)> = None;
        for row in &self.rows {
            if last != Some((row.topology.as_str(), row.mu)) {
                if last.is_some() {
                    out.push('\n');
                }
                out.push_str(&format!("{} mu={}\n{:<8}", row.topology, row.mu, "policy"));
                for m in Metric::ALL {
                    out.push_str(&format!("{:>8}", m.id()));
                }
                out.push('\n');
                last = Some((row.topology.as_str(), row.mu));
            }
            out.push_str(&format!("{:<8}", row.policy.label()));
            for m in &row.metrics {
                out.push_str(&format!("{:>8.3}", m.value));
            }
            out.push('\n');
        }
        out
    }
}

fn ratio(value: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        if value == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        value / reference
    }
}

/// Metrics of every row on one (topology, load, instance).
struct InstanceResult {
    metrics: Vec<BacklogMetrics>,
    audited: u64,
}

fn run_instance(
    spec: &ExperimentSpec,
    rows: &[PolicyEntry],
    topology: &Topology,
    mu: f64,
    instance: usize,
) -> Result<InstanceResult> {
    let graph_seed = instance_seed(spec.base_seed, topology, instance);
    let graph = topology.generate(graph_seed)?;
    let cfg = TrafficConfig::poisson(mu, spec.horizon);
    let trace = TrafficTrace::generate(&cfg, graph.n(), traffic_seed(graph_seed, mu))?;
    let mut metrics = Vec::with_capacity(rows.len());
    let mut audited = 0;
    for entry in rows {
        let dump = || instance_dump(&graph, topology, mu, instance, entry.kind);
        let mut policy = entry.instantiate(spec.composition);
        let outcome = match simulate(&graph, &trace, policy.as_mut()) {
            Err(Error::Infeasible { a, b }) => {
                return Err(Error::Input(format!("infeasible schedule ({a} and {b} conflict) in {}", dump())));
            }
            other => other?,
        };
        audited += audit(&graph, &outcome).map_err(|t| Error::Input(format!("slot {t} infeasible in {}", dump())))?;
        metrics.push(outcome.metrics);
    }
    Ok(InstanceResult { metrics, audited })
}

/// Count of checked schedules, or the first bad slot.
fn audit(graph: &ConflictGraph, outcome: &EpisodeOutcome) -> std::result::Result<u64, usize> {
    let mut n = 0;
    // The last record is the terminal state and carries no schedule.
    for slot in &outcome.slots[..outcome.slots.len().saturating_sub(1)] {
        if !graph.is_independent_set(&slot.members).unwrap_or(false) {
            return Err(slot.t);
        }
        n += 1;
    }
    Ok(n)
}

fn instance_dump(graph: &ConflictGraph, topology: &Topology, mu: f64, instance: usize, kind: PolicyKind) -> String {
    format!(
        "policy {} on {} instance {instance} mu {mu}; graph:\n{}",
        kind.label(),
        topology.label(),
        graph.to_edge_list()
    )
}

/// Run every policy of `spec` on every (topology, load, instance) and report
/// ratios to LGS.
pub fn evaluate(spec: &ExperimentSpec) -> Result<RatioReport> {
    spec.validate()?;
    let rows = spec.rows();
    let cells: Vec<(usize, usize, usize)> = (0..spec.topologies.len())
        .flat_map(|t| (0..spec.mus.len()).flat_map(move |m| (0..spec.instances).map(move |i| (t, m, i))))
        .collect();
    let results: Vec<InstanceResult> = cells
        .par_iter()
        .map(|&(t, m, i)| run_instance(spec, &rows, &spec.topologies[t], spec.mus[m], i))
        .collect::<Result<_>>()?;

    let lgs_index = rows.iter().position(|p| p.kind == PolicyKind::Lgs).expect("rows always include LGS");
    let mut report_rows = Vec::new();
    let mut audited = 0;
    for (t, topology) in spec.topologies.iter().enumerate() {
        let label = topology.label();
        for (m, &mu) in spec.mus.iter().enumerate() {
            let start = (t * spec.mus.len() + m) * spec.instances;
            let cell = &results[start..start + spec.instances];
            audited += cell.iter().map(|r| r.audited).sum::<u64>();
            let resamples = bootstrap_indices(spec, &label, mu);
            for (p, entry) in rows.iter().enumerate() {
                let metrics = Metric::ALL
                    .iter()
                    .map(|&metric| {
                        let own: Vec<f64> = cell.iter().map(|r| metric.of(&r.metrics[p])).collect();
                        let base: Vec<f64> = cell.iter().map(|r| metric.of(&r.metrics[lgs_index])).collect();
                        summarize(metric, &own, &base, &resamples, spec.confidence, p == lgs_index)
                    })
                    .collect();
                report_rows.push(ReportRow { topology: label.clone(), mu, policy: entry.kind, metrics });
            }
        }
    }
    Ok(RatioReport { rows: report_rows, instances: spec.instances, schedules_audited: audited, violations: 0 })
}

fn bootstrap_indices(spec: &ExperimentSpec, label: &str, mu: f64) -> Vec<Vec<usize>> {
    use rand::Rng as _;
    let mut r = rng::rng_from(rng::derive_path(spec.base_seed, &[BOOTSTRAP_STREAM, label_key(label), mu.to_bits()]));
    (0..spec.bootstrap_resamples)
        .map(|_| (0..spec.instances).map(|_| r.random_range(0..spec.instances)).collect())
        .collect()
}

fn summarize(
    metric: Metric,
    own: &[f64],
    base: &[f64],
    resamples: &[Vec<usize>],
    confidence: f64,
    is_reference: bool,
) -> MetricRatio {
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let absolute = mean(own);
    if is_reference {
        return MetricRatio { metric, value: 1.0, ci_low: 1.0, ci_high: 1.0, mean_instance_ratio: 1.0, absolute };
    }
    let value = ratio(absolute, mean(base));
    let per_instance: Vec<f64> = own.iter().zip(base).map(|(&a, &b)| ratio(a, b)).collect();
    let (ci_low, ci_high) = if resamples.is_empty() {
        (value, value)
    } else {
        let mut stats: Vec<f64> = resamples
            .iter()
            .map(|idx| {
                let a: f64 = idx.iter().map(|&i| own[i]).sum();
                let b: f64 = idx.iter().map(|&i| base[i]).sum();
                ratio(a, b)
            })
            .collect();
        stats.sort_by(f64::total_cmp);
        let tail = (1.0 - confidence) / 2.0;
        (percentile_sorted(&stats, tail), percentile_sorted(&stats, 1.0 - tail))
    };
    MetricRatio { metric, value, ci_low, ci_high, mean_instance_ratio: mean(&per_instance), absolute }
}

/// Topologies an ablation covers when the base spec names none.
pub fn ablation_topologies() -> Vec<Topology> {
    vec![Topology::Star { leaves: 10 }, "er".parse().expect("built-in family")]
}

/// All five table rows on every topology of `base` (star10 and ER when it
/// lists none). Every learned row must be present.
pub fn ablation_sweep(base: &ExperimentSpec) -> Result<RatioReport> {
    for kind in PolicyKind::ALL.into_iter().filter(|&k| k != PolicyKind::Lgs) {
        if !base.policies.iter().any(|p| p.kind == kind && p.model.is_some()) {
            return Err(Error::Config(format!("ablation needs a `{}` checkpoint", kind.label())));
        }
    }
    let mut spec = base.clone();
    if spec.topologies.is_empty() {
        spec.topologies = ablation_topologies();
    }
    evaluate(&spec)
}
