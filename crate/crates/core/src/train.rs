//! Curriculum training of utility estimators around the greedy solver.
//!
//! The solver is not differentiable, so parameters are updated with a
//! zeroth-order estimate: antithetic Gaussian perturbations of the flat
//! parameter vector, each pair scored on the same episodes, fed to Adam.
//! Phases run in order and carry parameters forward. After every epoch the
//! unperturbed model is scored on a fixed validation set; each phase stops
//! early after `patience` epochs without improvement and hands its best
//! parameters to the next phase.

use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::graph::{ConflictGraph, Topology};
use crate::models::{Composition, LearnedPolicy, ModelConfig, UtilityModel};
use crate::nn::{adam_step, AdamState, ModelParams};
use crate::rng;
use crate::traffic::{run_episode, Policy, TrafficConfig};

const TRAIN_STREAM: u64 = 11;
const VALIDATION_STREAM: u64 = 12;
const NOISE_STREAM: u64 = 13;
const TRAFFIC_STREAM: u64 = 1;

/// One stage of the curriculum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPhase {
    pub name: String,
    pub families: Vec<Topology>,
    pub epochs: usize,
    /// Fresh graph instances drawn per epoch.
    pub graphs_per_epoch: usize,
    /// Poisson loads cycled over the epoch's graphs.
    pub mus: Vec<f64>,
}

impl CurriculumPhase {
    pub fn new(name: &str, families: Vec<Topology>, epochs: usize, graphs_per_epoch: usize, mus: Vec<f64>) -> Self {
        Self { name: name.into(), families, epochs, graphs_per_epoch, mus }
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Config(format!("phase `{}` has no topology families", self.name)));
        }
        if self.epochs == 0 {
            return Err(Error::Config(format!("phase `{}` has zero epochs", self.name)));
        }
        if self.graphs_per_epoch == 0 {
            return Err(Error::Config(format!("phase `{}` draws no graphs per epoch", self.name)));
        }
        if self.mus.is_empty() || self.mus.iter().any(|&m| !(m.is_finite() && m > 0.0)) {
            return Err(Error::Config(format!("phase `{}` needs positive loads", self.name)));
        }
        for family in &self.families {
            family.validate()?;
        }
        Ok(())
    }
}

fn family(name: &str) -> Topology {
    name.parse().expect("built-in family name")
}

/// The long schedule: stars for 50 epochs, ER for 75, BA and trees for 76.
pub fn default_curriculum() -> Vec<CurriculumPhase> {
    let mus = vec![0.05, 0.07, 0.08];
    vec![
        CurriculumPhase::new("star", vec![Topology::Star { leaves: 10 }, Topology::Star { leaves: 20 }], 50, 32, mus.clone()),
        CurriculumPhase::new("er", vec![family("er")], 75, 32, mus.clone()),
        CurriculumPhase::new(
            "ba_tree",
            ["ba1", "ba2", "tree"].iter().map(|s| family(s)).collect(),
            76,
            32,
            mus,
        ),
    ]
}

/// Three epochs per phase on graphs with at most 15 links.
pub fn smoke_curriculum() -> Vec<CurriculumPhase> {
    let mus = vec![0.07];
    vec![
        CurriculumPhase::new("star", vec![Topology::Star { leaves: 10 }], 3, 4, mus.clone()),
        CurriculumPhase::new("er", vec![Topology::ErdosRenyi { n: 15, p: 0.2 }], 3, 4, mus.clone()),
        CurriculumPhase::new(
            "ba_tree",
            vec![Topology::BarabasiAlbert { n: 15, m: 1 }, Topology::PowerLawTree { n: 15, gamma: 3.0 }],
            3,
            4,
            mus,
        ),
    ]
}

/// Desk-scale schedule: 60 epochs in total on graphs with at most 30 links.
pub fn desk_curriculum() -> Vec<CurriculumPhase> {
    let mus = vec![0.05, 0.07, 0.08];
    vec![
        CurriculumPhase::new("star", vec![Topology::Star { leaves: 10 }, Topology::Star { leaves: 20 }], 15, 16, mus.clone()),
        CurriculumPhase::new("er", vec![family("er")], 25, 16, mus.clone()),
        CurriculumPhase::new(
            "ba_tree",
            ["ba1", "ba2", "tree"].iter().map(|s| family(s)).collect(),
            20,
            16,
            mus,
        ),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Episode evaluations per update, counting every perturbed evaluation.
    pub batch_size: usize,
    /// Perturbed parameter vectors per update (twice the antithetic pairs).
    pub num_perturbations: usize,
    pub sigma: f64,
    pub learning_rate: f64,
    pub patience: usize,
    /// Validation graphs per family.
    pub validation_instances: usize,
    pub validation_mu: f64,
    pub horizon: usize,
    pub composition: Composition,
    /// Replaces the Poisson loads of training and validation when set.
    pub traffic_override: Option<TrafficConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            num_perturbations: 32,
            sigma: 0.05,
            learning_rate: 1e-3,
            patience: 10,
            validation_instances: 20,
            validation_mu: 0.07,
            horizon: 64,
            composition: Composition::Modulated,
            traffic_override: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_perturbations(self.sigma, self.num_perturbations)?;
        if self.batch_size == 0 || self.batch_size % self.num_perturbations != 0 {
            return Err(param_err("batch_size", "must be a positive multiple of num_perturbations"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(param_err("learning_rate", "must be positive"));
        }
        if self.patience == 0 {
            return Err(param_err("patience", "must be at least 1"));
        }
        if self.validation_instances == 0 {
            return Err(param_err("validation_instances", "must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(param_err("horizon", "must be at least 1"));
        }
        self.traffic(self.validation_mu)?.validate()
    }

    /// Episodes each perturbed model is scored on per update.
    pub fn episodes_per_update(&self) -> usize {
        self.batch_size / self.num_perturbations
    }

    fn traffic(&self, mu: f64) -> Result<TrafficConfig> {
        let cfg = self.traffic_override.unwrap_or_else(|| TrafficConfig::poisson(mu, self.horizon));
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_perturbations(sigma: f64, num_perturbations: usize) -> Result<()> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(param_err("sigma", "must be positive"));
    }
    if num_perturbations < 2 || num_perturbations % 2 != 0 {
        return Err(param_err("num_perturbations", "must be even and at least 2"));
    }
    Ok(())
}

/// Negative mean backlog of one episode under `policy`.
pub fn policy_reward<P: Policy + ?Sized>(
    policy: &mut P,
    graph: &ConflictGraph,
    cfg: &TrafficConfig,
    seed: u64,
) -> Result<f64> {
    Ok(-run_episode(graph, cfg, policy, seed)?.metrics.mean_q)
}

/// Negative mean backlog of one episode scheduled by LGS over the model's
/// utilities.
pub fn episode_reward(
    model: &UtilityModel,
    composition: Composition,
    graph: &ConflictGraph,
    cfg: &TrafficConfig,
    seed: u64,
) -> Result<f64> {
    policy_reward(&mut LearnedPolicy::new(model).with_composition(composition), graph, cfg, seed)
}

/// One training or validation episode.
#[derive(Clone, Debug)]
pub struct Episode {
    pub graph: ConflictGraph,
    pub traffic: TrafficConfig,
    pub seed: u64,
}

/// Mean reward of `model` over `episodes`.
pub fn batch_reward(model: &UtilityModel, composition: Composition, episodes: &[Episode]) -> Result<f64> {
    let mut total = 0.0;
    for ep in episodes {
        total += episode_reward(model, composition, &ep.graph, &ep.traffic, ep.seed)?;
    }
    Ok(total / episodes.len().max(1) as f64)
}

/// Result of one zeroth-order estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct ZerothOrderEstimate {
    /// Descent direction for the loss `-reward`.
    pub gradient: Vec<f64>,
    /// Mean reward over every perturbed evaluation.
    pub mean_reward: f64,
}

/// Antithetic Gaussian-smoothing estimate of the gradient of `-reward` at
/// `theta`:
/// `-(1/P) sum_i (R(theta + sigma e_i) - R(theta - sigma e_i)) / (2 sigma) * e_i`
/// over `P = num_perturbations / 2` pairs. `reward` must be deterministic in
/// its argument so both members of a pair see the same episodes. Noise for
/// pair `i` comes from its own seed, so the estimate does not depend on how
/// pairs are scheduled across threads.
pub fn zeroth_order_grad<F>(
    theta: &[f64],
    reward: F,
    sigma: f64,
    num_perturbations: usize,
    seed: u64,
) -> Result<ZerothOrderEstimate>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    check_perturbations(sigma, num_perturbations)?;
    let pairs = num_perturbations / 2;
    let evaluated: Vec<(Vec<f64>, f64, f64)> = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let mut noise_rng = rng::rng_from(rng::derive(seed, i as u64));
            let eps: Vec<f64> = (0..theta.len()).map(|_| StandardNormal.sample(&mut noise_rng)).collect();
            let plus: Vec<f64> = theta.iter().zip(&eps).map(|(t, e)| t + sigma * e).collect();
            let minus: Vec<f64> = theta.iter().zip(&eps).map(|(t, e)| t - sigma * e).collect();
            Ok((eps, reward(&plus)?, reward(&minus)?))
        })
        .collect::<Result<_>>()?;

    let mut gradient = vec![0.0; theta.len()];
    let mut reward_sum = 0.0;
    for (eps, plus, minus) in &evaluated {
        let coeff = -(plus - minus) / (2.0 * sigma * pairs as f64);
        for (g, e) in gradient.iter_mut().zip(eps) {
            *g += coeff * e;
        }
        reward_sum += plus + minus;
    }
    Ok(ZerothOrderEstimate { gradient, mean_reward: reward_sum / num_perturbations as f64 })
}

/// Optimizer state carried across epochs and phases.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub epoch: usize,
    pub best_validation: f64,
    pub stagnant_epochs: usize,
    pub seed: u64,
}

/// One epoch of training.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// Global epoch index, starting at 1.
    pub epoch: usize,
    pub phase: String,
    pub train_reward: f64,
    pub validation_mean_q: f64,
    pub improved: bool,
}

/// Per-phase validation score of the parameters a phase starts from.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseBaseline {
    pub phase: String,
    pub validation_mean_q: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    pub baselines: Vec<PhaseBaseline>,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seconds per epoch, kept apart from the reproducible records.
    pub wall_clock: Vec<f64>,
}

impl TrainingHistory {
    /// Reproducible history: metadata comments, then one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# batch_size={}\n# learning_rate={:?}\n", self.batch_size, self.learning_rate);
        for b in &self.baselines {
            out.push_str(&format!("# initial_validation phase={} mean_q={:?}\n", b.phase, b.validation_mean_q));
        }
        out.push_str("epoch,phase,train_reward,validation_mean_q,improved\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{:?},{:?},{}\n",
                r.epoch, r.phase, r.train_reward, r.validation_mean_q, r.improved
            ));
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("epoch,wall_clock_s\n");
        for (r, s) in self.records.iter().zip(&self.wall_clock) {
            out.push_str(&format!("{},{s:.3}\n", r.epoch));
        }
        out
    }

    /// `(phase, validation at phase start, best validation in phase)`.
    pub fn phase_summary(&self) -> Vec<(String, f64, f64)> {
        self.baselines
            .iter()
            .map(|b| {
                let best = self
                    .records
                    .iter()
                    .filter(|r| r.phase == b.phase)
                    .map(|r| r.validation_mean_q)
                    .fold(b.validation_mean_q, f64::min);
                (b.phase.clone(), b.validation_mean_q, best)
            })
            .collect()
    }

    /// Initial validation score of the first phase.
    pub fn initial_validation(&self) -> Option<f64> {
        self.baselines.first().map(|b| b.validation_mean_q)
    }

    /// Best validation score reached in the last phase.
    pub fn final_validation(&self) -> Option<f64> {
        let last = self.baselines.last()?;
        let best = self
            .records
            .iter()
            .filter(|r| r.phase == last.phase)
            .map(|r| r.validation_mean_q)
            .fold(last.validation_mean_q, f64::min);
        Some(best)
    }
}

/// Hooks called during training.
pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }

    /// Called whenever the validation score improves on the phase best.
    fn on_improvement(&mut self, _model: &UtilityModel, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Trained model plus its history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: UtilityModel,
    pub history: TrainingHistory,
}

/// Train a fresh model through `phases`. See [`train_curriculum_with`].
pub fn train_curriculum(
    model_config: ModelConfig,
    phases: &[CurriculumPhase],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train_curriculum_with(model_config, phases, cfg, seed, &mut ())
}

/// Train a fresh model through `phases`, reporting to `observer`.
///
/// Validation covers every family seen so far, `validation_instances` fixed
/// graphs each. The returned parameters are the best on the last phase's
/// validation set.
pub fn train_curriculum_with(
    model_config: ModelConfig,
    phases: &[CurriculumPhase],
    cfg: &TrainConfig,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if phases.is_empty() {
        return Err(Error::Config("curriculum has no phases".into()));
    }
    for phase in phases {
        phase.validate()?;
    }

    let mut model = UtilityModel::init(model_config, rng::derive(seed, 0))?;
    let flat = model.params.flatten();
    let mut state = TrainState {
        adam: AdamState::with_lr(flat.len(), cfg.learning_rate),
        params: flat,
        epoch: 0,
        best_validation: f64::INFINITY,
        stagnant_epochs: 0,
        seed,
    };
    let mut history = TrainingHistory {
        records: Vec::new(),
        baselines: Vec::new(),
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        wall_clock: Vec::new(),
    };
    let mut seen: Vec<Topology> = Vec::new();
    let mut validation: Vec<Episode> = Vec::new();

    for (pi, phase) in phases.iter().enumerate() {
        for family in &phase.families {
            if !seen.contains(family) {
                let fi = seen.len() as u64;
                seen.push(*family);
                for i in 0..cfg.validation_instances as u64 {
                    let graph_seed = rng::derive_path(seed, &[VALIDATION_STREAM, fi, i]);
                    validation.push(Episode {
                        graph: family.generate(graph_seed)?,
                        traffic: cfg.traffic(cfg.validation_mu)?,
                        seed: rng::derive(graph_seed, TRAFFIC_STREAM),
                    });
                }
            }
        }

        let baseline = validation_score(&model, cfg, &validation)?;
        history.baselines.push(PhaseBaseline { phase: phase.name.clone(), validation_mean_q: baseline });
        state.best_validation = baseline;
        state.stagnant_epochs = 0;
        let mut best_params = state.params.clone();

        for e in 0..phase.epochs {
            let started = Instant::now();
            state.epoch += 1;
            let epoch_seed = rng::derive_path(seed, &[TRAIN_STREAM, pi as u64, e as u64]);
            let train_reward = run_epoch(&mut model, &mut state, phase, cfg, epoch_seed)?;
            let score = validation_score(&model, cfg, &validation)?;
            let improved = score < state.best_validation;
            if improved {
                state.best_validation = score;
                state.stagnant_epochs = 0;
                best_params.clone_from(&state.params);
            } else {
                state.stagnant_epochs += 1;
            }
            let record = EpochRecord {
                epoch: state.epoch,
                phase: phase.name.clone(),
                train_reward,
                validation_mean_q: score,
                improved,
            };
            observer.on_epoch(&record)?;
            if improved {
                observer.on_improvement(&model, &record)?;
            }
            history.records.push(record);
            history.wall_clock.push(started.elapsed().as_secs_f64());
            if state.stagnant_epochs >= cfg.patience {
                break;
            }
        }
        state.params = best_params;
        model.params.unflatten(&state.params)?;
    }
    Ok(TrainOutcome { model, history })
}

/// Mean backlog of the unperturbed model over the validation set.
fn validation_score(model: &UtilityModel, cfg: &TrainConfig, episodes: &[Episode]) -> Result<f64> {
    Ok(-batch_reward(model, cfg.composition, episodes)?)
}

/// Draw the epoch's graphs and run one update per `episodes_per_update` of
/// them. Returns the mean reward over all perturbed evaluations.
fn run_epoch(
    model: &mut UtilityModel,
    state: &mut TrainState,
    phase: &CurriculumPhase,
    cfg: &TrainConfig,
    epoch_seed: u64,
) -> Result<f64> {
    let per_update = cfg.episodes_per_update();
    let mut episodes = Vec::with_capacity(phase.graphs_per_epoch);
    for i in 0..phase.graphs_per_epoch {
        let family = &phase.families[i % phase.families.len()];
        let mu = phase.mus[(i / phase.families.len()) % phase.mus.len()];
        let graph_seed = rng::derive(epoch_seed, i as u64);
        episodes.push(Episode {
            graph: family.generate(graph_seed)?,
            traffic: cfg.traffic(mu)?,
            seed: rng::derive(graph_seed, TRAFFIC_STREAM),
        });
    }

    let template = model.params.clone();
    let mut reward_sum = 0.0;
    let mut updates = 0;
    for (u, batch) in episodes.chunks(per_update).enumerate() {
        let reward = |theta: &[f64]| -> Result<f64> {
            let mut params: ModelParams = template.clone();
            params.unflatten(theta)?;
            let perturbed = UtilityModel { config: model.config, params };
            batch_reward(&perturbed, cfg.composition, batch)
        };
        let noise_seed = rng::derive_path(epoch_seed, &[NOISE_STREAM, u as u64]);
        let est = zeroth_order_grad(&state.params, reward, cfg.sigma, cfg.num_perturbations, noise_seed)?;
        adam_step(&mut state.params, &est.gradient, &mut state.adam)?;
        reward_sum += est.mean_reward;
        updates += 1;
    }
    model.params.unflatten(&state.params)?;
    Ok(reward_sum / updates as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lgs::{solve, TieBreak, UtilityVector};
    use crate::traffic::{Arrivals, FnPolicy, NetworkState, Rates};

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn constant_reward_gives_zero_gradient() {
        let theta = vec![0.3; 20];
        let est = zeroth_order_grad(&theta, |_| Ok(-4.0), 0.05, 8, 1).unwrap();
        assert!(est.gradient.iter().all(|&g| g == 0.0));
        assert_eq!(est.mean_reward, -4.0);
    }

    #[test]
    fn quadratic_reward_estimate_aligns_with_gradient() {
        let mut r = rng::rng_from(5);
        for trial in 0..5u64 {
            let dim = 10 + 10 * trial as usize;
            let theta: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
            let reward = |x: &[f64]| Ok(-x.iter().map(|v| v * v).sum::<f64>());
            let est = zeroth_order_grad(&theta, reward, 0.05, 32, trial).unwrap();
            // Descent direction for -R = |theta|^2 is 2 theta.
            let truth: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
            let c = cosine(&est.gradient, &truth);
            assert!(c >= 0.5, "dim {dim}: cosine {c}");
        }
    }

    #[test]
    fn linear_reward_expectation_ignores_sigma() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let reward = |x: &[f64]| Ok(x.iter().zip(&a).map(|(x, a)| x * a).sum::<f64>());
        let theta = vec![0.1; 6];
        let mean_estimate = |sigma: f64| {
            let mut acc = vec![0.0; 6];
            let reps = 400;
            for s in 0..reps {
                let g = zeroth_order_grad(&theta, reward, sigma, 8, s).unwrap().gradient;
                for (o, x) in acc.iter_mut().zip(g) {
                    *o += x / reps as f64;
                }
            }
            acc
        };
        let (g1, g2) = (mean_estimate(0.05), mean_estimate(0.1));
        for i in 0..6 {
            // Same noise seeds: estimates are identical up to rounding.
            assert!((g1[i] - g2[i]).abs() < 1e-9, "{i}: {} vs {}", g1[i], g2[i]);
            // Both are centered on -a with Monte Carlo error ~ |a| / sqrt(1600).
            assert!((g1[i] + a[i]).abs() < 0.5, "{i}: {} vs {}", g1[i], -a[i]);
        }
    }

    #[test]
    fn perturbation_count_must_be_even_and_sigma_positive() {
        let f = |_: &[f64]| Ok(0.0);
        assert!(zeroth_order_grad(&[0.0], f, 0.05, 3, 0).is_err());
        assert!(zeroth_order_grad(&[0.0], f, 0.05, 0, 0).is_err());
        assert!(zeroth_order_grad(&[0.0], f, 0.0, 2, 0).is_err());
    }

    #[test]
    fn zero_traffic_reward_is_zero() {
        let g = Topology::Star { leaves: 5 }.generate(0).unwrap();
        let cfg = TrafficConfig { arrivals: Arrivals::Fixed { per_slot: 0 }, rates: Rates::default(), horizon: 16 };
        let mut model = UtilityModel::init(ModelConfig::transgnn(), 1).unwrap();
        let mut flat = model.params.flatten();
        flat.iter_mut().for_each(|x| *x += 0.3);
        model.params.unflatten(&flat).unwrap();
        for c in [Composition::Direct, Composition::Modulated] {
            assert_eq!(episode_reward(&model, c, &g, &cfg, 4).unwrap(), 0.0);
        }
    }

    #[test]
    fn episode_reward_is_deterministic() {
        let g = family("er").with_n(12).generate(2).unwrap();
        let model = UtilityModel::init(ModelConfig::gcn(), 2).unwrap();
        let cfg = TrafficConfig::poisson(0.07, 32);
        let a = episode_reward(&model, Composition::Modulated, &g, &cfg, 9).unwrap();
        let b = episode_reward(&model, Composition::Modulated, &g, &cfg, 9).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn serving_long_queues_beats_inverted_order_on_star() {
        let g = Topology::Star { leaves: 5 }.generate(0).unwrap();
        let cfg = TrafficConfig { arrivals: Arrivals::Fixed { per_slot: 3 }, rates: Rates::Fixed { rate: 5.0 }, horizon: 40 };
        let by = |sign: f64| {
            FnPolicy(move |s: &NetworkState<'_>| {
                let u = UtilityVector::new(s.q.iter().map(|q| sign * q).collect()).unwrap();
                solve(s.graph, &u, TieBreak::LowerIndex).unwrap().members
            })
        };
        let a = policy_reward(&mut by(1.0), &g, &cfg, 0).unwrap();
        let b = policy_reward(&mut by(-1.0), &g, &cfg, 0).unwrap();
        assert!(a >= b, "queue order {a} vs inverted {b}");
        assert!(a > b);
    }

    fn tiny() -> ModelConfig {
        ModelConfig { hidden_dim: 4, num_layers: 1, num_heads: 1, ..ModelConfig::gcn() }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig { batch_size: 4, num_perturbations: 4, validation_instances: 2, horizon: 16, ..TrainConfig::default() }
    }

    #[test]
    fn one_epoch_gives_one_record() {
        let phases = [CurriculumPhase::new("only", vec![Topology::Star { leaves: 4 }], 1, 2, vec![0.07])];
        let out = train_curriculum(tiny(), &phases, &small_cfg(), 3).unwrap();
        assert_eq!(out.history.records.len(), 1);
        assert_eq!(out.history.records[0].epoch, 1);
        assert_eq!(out.history.baselines.len(), 1);
    }

    #[test]
    fn frozen_validation_stops_after_patience() {
        let phases = [CurriculumPhase::new("only", vec![Topology::Star { leaves: 4 }], 50, 2, vec![0.07])];
        let cfg = TrainConfig {
            traffic_override: Some(TrafficConfig {
                arrivals: Arrivals::Fixed { per_slot: 0 },
                rates: Rates::default(),
                horizon: 8,
            }),
            ..small_cfg()
        };
        let out = train_curriculum(tiny(), &phases, &cfg, 3).unwrap();
        assert_eq!(out.history.records.len(), 10);
        assert!(out.history.records.iter().all(|r| !r.improved && r.validation_mean_q == 0.0));
    }

    #[test]
    fn empty_phase_is_a_config_error() {
        let phases = [CurriculumPhase::new("none", vec![], 1, 1, vec![0.07])];
        assert!(matches!(train_curriculum(tiny(), &phases, &small_cfg(), 0), Err(Error::Config(_))));
        assert!(matches!(train_curriculum(tiny(), &[], &small_cfg(), 0), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let phases = [
            CurriculumPhase::new("a", vec![Topology::Star { leaves: 5 }], 2, 2, vec![0.07]),
            CurriculumPhase::new("b", vec![Topology::ErdosRenyi { n: 8, p: 0.3 }], 2, 2, vec![0.08]),
        ];
        let a = train_curriculum(tiny(), &phases, &small_cfg(), 21).unwrap();
        let b = train_curriculum(tiny(), &phases, &small_cfg(), 21).unwrap();
        assert_eq!(a.history.to_csv(), b.history.to_csv());
        assert_eq!(a.model.to_checkpoint().to_text(), b.model.to_checkpoint().to_text());
    }

    #[test]
    fn returned_params_match_best_validation() {
        let phases = [CurriculumPhase::new("a", vec![Topology::Star { leaves: 6 }], 4, 4, vec![0.08])];
        let cfg = small_cfg();
        let out = train_curriculum(tiny(), &phases, &cfg, 8).unwrap();
        let episodes: Vec<Episode> = (0..cfg.validation_instances as u64)
            .map(|i| {
                let s = rng::derive_path(8, &[VALIDATION_STREAM, 0, i]);
                Episode {
                    graph: Topology::Star { leaves: 6 }.generate(s).unwrap(),
                    traffic: TrafficConfig::poisson(cfg.validation_mu, cfg.horizon),
                    seed: rng::derive(s, TRAFFIC_STREAM),
                }
            })
            .collect();
        let score = validation_score(&out.model, &cfg, &episodes).unwrap();
        assert_eq!(score, out.history.final_validation().unwrap());
        assert!(score <= out.history.initial_validation().unwrap());
    }
}
