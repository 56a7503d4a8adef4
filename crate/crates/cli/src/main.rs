//! `linksched`: generate graphs, simulate, train, evaluate and ablate.
//!
//! Settings come from an optional TOML file (`--config`) and are overridden
//! by flags. Every run writes into one directory: `config.echo` holds the
//! resolved configuration, with `graphs/`, `checkpoints/`, `reports/` and
//! `traces/` below it. The directory is `--run-dir` if given, otherwise
//! `$LINKSCHED_RUNS/<command>-seed<seed>` (`runs/` when the variable is
//! unset).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use linksched::config::{resolve_topology, RunConfig};
use linksched::eval::{ablation_sweep, evaluate, traffic_seed, PolicyKind, RatioReport};
use linksched::gradcheck::{estimator_suite, layer_suite, END_TO_END_TOLERANCE, LAYER_TOLERANCE};
use linksched::lgs::LgsPolicy;
use linksched::models::{LearnedPolicy, ModelConfig, UtilityModel};
use linksched::nn::Checkpoint;
use linksched::train::{train_curriculum_with, EpochRecord, TrainObserver};
use linksched::traffic::{run_episode, Policy, TrafficConfig};

const RUNS_ENV: &str = "LINKSCHED_RUNS";

#[derive(Parser, Debug)]
#[command(name = "linksched", version, about = "Delay-oriented link scheduling experiments")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for this run.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write conflict graphs as edge lists.
    Generate(GenerateArgs),
    /// Run one episode and write its per-slot trace.
    Simulate(SimulateArgs),
    /// Train an estimator through the curriculum.
    Train(TrainArgs),
    /// Report policies as ratios to LGS.
    Evaluate(EvaluateArgs),
    /// Five-row ablation table on star10 and ER.
    Ablate(AblateArgs),
    /// Finite-difference check of every layer and estimator.
    Gradcheck,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    topology: Option<String>,
    /// Vertex count for the random families.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    topology: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    policy: Option<PolicyKind>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Estimator to train: full, no_as, no_pe or gcn.
    #[arg(long, default_value = "full")]
    model: PolicyKind,
    /// Curriculum preset: default, desk or smoke.
    #[arg(long)]
    curriculum: Option<String>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Comma-separated topologies.
    #[arg(long, value_delimiter = ',')]
    topology: Vec<String>,
    /// Comma-separated loads.
    #[arg(long, value_delimiter = ',')]
    mu: Vec<f64>,
    /// Comma-separated policies.
    #[arg(long, value_delimiter = ',')]
    policies: Vec<PolicyKind>,
    /// `policy=path`, repeatable.
    #[arg(long = "checkpoint", value_parser = parse_checkpoint_arg)]
    checkpoints: Vec<(PolicyKind, PathBuf)>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    eval: EvaluateArgs,
    /// Directory holding `<policy>.ckpt` for every learned row.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Train every learned row that has no checkpoint first.
    #[arg(long)]
    train: bool,
    #[arg(long)]
    curriculum: Option<String>,
}

fn parse_checkpoint_arg(s: &str) -> std::result::Result<(PolicyKind, PathBuf), String> {
    let (kind, path) = s.split_once('=').ok_or_else(|| format!("expected policy=path, got `{s}`"))?;
    let kind = kind.parse::<PolicyKind>().map_err(|e| e.to_string())?;
    if kind == PolicyKind::Lgs {
        return Err("the LGS row takes no checkpoint".into());
    }
    Ok((kind, PathBuf::from(path)))
}

struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn create(root: PathBuf, config: &RunConfig) -> Result<Self> {
        for sub in ["graphs", "checkpoints", "reports", "traces"] {
            fs::create_dir_all(root.join(sub)).with_context(|| format!("creating {}", root.join(sub).display()))?;
        }
        let dir = Self { root };
        dir.write("config.echo", &config.to_toml()?)?;
        Ok(dir)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn write(&self, rel: &str, body: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let name = match &cli.command {
        Command::Generate(_) => "generate",
        Command::Simulate(_) => "simulate",
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::Ablate(_) => "ablate",
        Command::Gradcheck => "gradcheck",
    };
    let root = cli.run_dir.clone().unwrap_or_else(|| {
        let base = std::env::var_os(RUNS_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        base.join(format!("{name}-seed{}", config.seed))
    });

    match cli.command {
        Command::Generate(a) => generate(&mut config, a, root),
        Command::Simulate(a) => simulate(&mut config, a, root),
        Command::Train(a) => train(&mut config, a, root),
        Command::Evaluate(a) => run_evaluate(&mut config, a, root),
        Command::Ablate(a) => ablate(&mut config, a, root),
        Command::Gradcheck => gradcheck(&config, root),
    }
}

fn generate(config: &mut RunConfig, a: GenerateArgs, root: PathBuf) -> Result<()> {
    let g = &mut config.generate;
    if let Some(t) = a.topology {
        g.topology = t;
    }
    g.n = a.n.or(g.n);
    if let Some(c) = a.count {
        g.count = c;
    }
    let topology = resolve_topology(&g.topology, g.n)?;
    let dir = RunDir::create(root, config)?;
    for i in 0..config.generate.count {
        let seed = linksched::rng::derive(config.seed, i as u64);
        let graph = topology.generate(seed)?;
        let path = dir.write(&format!("graphs/{}-{i:04}.edges", topology.label()), &graph.to_edge_list())?;
        let stats = graph.degree_stats();
        println!(
            "{}: n={} edges={} degree min/mean/max {}/{:.2}/{}",
            path.display(),
            graph.n(),
            graph.edge_count(),
            stats.min,
            stats.mean,
            stats.max
        );
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<UtilityModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ck = Checkpoint::from_text(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(UtilityModel::from_checkpoint(&ck)?)
}

fn simulate(config: &mut RunConfig, a: SimulateArgs, root: PathBuf) -> Result<()> {
    let s = &mut config.simulate;
    if let Some(t) = a.topology {
        s.topology = t;
    }
    s.n = a.n.or(s.n);
    if let Some(mu) = a.mu {
        s.mu = mu;
    }
    if let Some(h) = a.horizon {
        s.horizon = h;
    }
    if let Some(p) = a.policy {
        s.policy = p;
    }
    if a.checkpoint.is_some() {
        s.checkpoint = a.checkpoint;
    }
    let s = config.simulate.clone();
    let topology = resolve_topology(&s.topology, s.n)?;
    let cfg = TrafficConfig::poisson(s.mu, s.horizon);
    cfg.validate()?;
    let model = match (s.policy, &s.checkpoint) {
        (PolicyKind::Lgs, None) => None,
        (PolicyKind::Lgs, Some(_)) => bail!("the lgs policy takes no checkpoint"),
        (_, None) => bail!("policy `{}` needs --checkpoint", s.policy),
        (_, Some(path)) => Some(load_model(path)?),
    };
    let dir = RunDir::create(root, config)?;

    let graph = topology.generate(config.seed)?;
    let mut policy: Box<dyn Policy + '_> = match &model {
        None => Box::new(LgsPolicy::default()),
        Some(m) => Box::new(LearnedPolicy::new(m)),
    };
    let outcome = run_episode(&graph, &cfg, policy.as_mut(), traffic_seed(config.seed, s.mu))?;
    let stem = format!("{}-mu{}-seed{}-{}", topology.label(), s.mu, config.seed, s.policy);
    dir.write(&format!("graphs/{}-seed{}.edges", topology.label(), config.seed), &graph.to_edge_list())?;
    let trace = dir.write(&format!("traces/{stem}.csv"), &outcome.trace_csv())?;
    let m = &outcome.metrics;
    println!("trace: {}", trace.display());
    println!(
        "mean_q={:.6} median_q={:.6} p95_q={:.6} delay={:.6} utility_sum={:.6}",
        m.mean_q, m.median_q, m.p95_q, m.delay, m.utility_sum
    );
    Ok(())
}

/// Prints progress and writes a checkpoint at every improvement.
struct CheckpointWriter<'a> {
    dir: &'a RunDir,
    prefix: String,
    started: Instant,
}

impl TrainObserver for CheckpointWriter<'_> {
    fn on_epoch(&mut self, r: &EpochRecord) -> linksched::Result<()> {
        eprintln!(
            "[{}] epoch {:>3} {:<8} train_reward {:>9.4} val_mean_q {:>8.4}{} ({:.0}s)",
            self.prefix,
            r.epoch,
            r.phase,
            r.train_reward,
            r.validation_mean_q,
            if r.improved { " *" } else { "" },
            self.started.elapsed().as_secs_f64()
        );
        Ok(())
    }

    fn on_improvement(&mut self, model: &UtilityModel, r: &EpochRecord) -> linksched::Result<()> {
        let path = self.dir.path(&format!("checkpoints/{}-epoch{:04}.ckpt", self.prefix, r.epoch));
        fs::write(path, model.to_checkpoint().to_text())?;
        Ok(())
    }
}

fn model_config_for(kind: PolicyKind, base: &ModelConfig) -> Result<ModelConfig> {
    let Some(shape) = kind.model_config() else {
        bail!("`lgs` has nothing to train");
    };
    let config = ModelConfig {
        variant: shape.variant,
        attention_sampling: shape.attention_sampling,
        positional_encoding: shape.positional_encoding,
        ..*base
    };
    config.validate()?;
    Ok(config)
}

/// Train one row and return the checkpoint path.
fn train_one(config: &RunConfig, kind: PolicyKind, dir: &RunDir) -> Result<PathBuf> {
    let model_config = model_config_for(kind, &config.model)?;
    let phases = config.curriculum.resolve()?;
    let mut observer = CheckpointWriter { dir, prefix: kind.id().into(), started: Instant::now() };
    let out = train_curriculum_with(model_config, &phases, &config.train, config.seed, &mut observer)?;
    dir.write(&format!("reports/history-{}.csv", kind.id()), &out.history.to_csv())?;
    dir.write(&format!("reports/timing-{}.csv", kind.id()), &out.history.timing_csv())?;
    let path = dir.write(&format!("checkpoints/{}.ckpt", kind.id()), &out.model.to_checkpoint().to_text())?;
    for (phase, start, best) in out.history.phase_summary() {
        eprintln!("[{}] phase {phase}: validation mean_q {start:.4} at start, best {best:.4}", kind.id());
    }
    Ok(path)
}

fn train(config: &mut RunConfig, a: TrainArgs, root: PathBuf) -> Result<()> {
    if let Some(c) = a.curriculum {
        config.curriculum.preset = c;
        config.curriculum.phases.clear();
    }
    config.curriculum.resolve()?;
    model_config_for(a.model, &config.model)?;
    let dir = RunDir::create(root, config)?;
    let path = train_one(config, a.model, &dir)?;
    println!("checkpoint: {}", path.display());
    Ok(())
}

fn apply_eval_args(config: &mut RunConfig, a: EvaluateArgs) {
    let e = &mut config.eval;
    if !a.topology.is_empty() {
        e.topologies = a.topology;
    }
    if !a.mu.is_empty() {
        e.mus = a.mu;
    }
    if !a.policies.is_empty() {
        e.policies = a.policies;
    }
    for (kind, path) in a.checkpoints {
        e.checkpoints.insert(kind.id().into(), path);
        if !e.policies.contains(&kind) {
            e.policies.push(kind);
        }
    }
    if let Some(i) = a.instances {
        e.instances = i;
    }
    if let Some(h) = a.horizon {
        e.horizon = h;
    }
}

fn write_report(dir: &RunDir, stem: &str, report: &RatioReport) -> Result<()> {
    let csv = dir.write(&format!("reports/{stem}.csv"), &report.to_csv())?;
    let tables = report.render_tables();
    dir.write(&format!("reports/{stem}.txt"), &tables)?;
    print!("{tables}");
    println!(
        "audited {} schedules, {} violations; report: {}",
        report.schedules_audited,
        report.violations,
        csv.display()
    );
    Ok(())
}

fn run_evaluate(config: &mut RunConfig, a: EvaluateArgs, root: PathBuf) -> Result<()> {
    apply_eval_args(config, a);
    let spec = config.eval.to_spec(config.seed)?;
    let dir = RunDir::create(root, config)?;
    let report = evaluate(&spec)?;
    write_report(&dir, "evaluate", &report)
}

fn ablate(config: &mut RunConfig, a: AblateArgs, root: PathBuf) -> Result<()> {
    if let Some(c) = a.curriculum {
        config.curriculum.preset = c;
        config.curriculum.phases.clear();
    }
    apply_eval_args(config, a.eval);
    config.eval.policies = PolicyKind::ALL.to_vec();
    let learned: Vec<PolicyKind> = PolicyKind::ALL.into_iter().filter(|&k| k != PolicyKind::Lgs).collect();
    if let Some(d) = &a.checkpoint_dir {
        for kind in &learned {
            let path = d.join(format!("{}.ckpt", kind.id()));
            config.eval.checkpoints.entry(kind.id().into()).or_insert(path);
        }
    }
    let missing: Vec<PolicyKind> =
        learned.iter().copied().filter(|k| !config.eval.checkpoints.contains_key(k.id())).collect();
    if !missing.is_empty() && !a.train {
        let names: Vec<&str> = missing.iter().map(|k| k.id()).collect();
        bail!("no checkpoint for {}; pass --checkpoint, --checkpoint-dir or --train", names.join(", "));
    }
    let dir = RunDir::create(root, config)?;
    for kind in missing {
        let path = train_one(config, kind, &dir)?;
        config.eval.checkpoints.insert(kind.id().into(), path);
    }
    dir.write("config.echo", &config.to_toml()?)?;
    let spec = config.eval.to_spec(config.seed)?;
    let report = ablation_sweep(&spec)?;
    write_report(&dir, "ablation", &report)
}

fn gradcheck(config: &RunConfig, root: PathBuf) -> Result<()> {
    let dir = RunDir::create(root, config)?;
    let mut csv = String::from("check,max_rel_error,tolerance,checked,passed\n");
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for c in layer_suite(config.seed)?.into_iter().chain(estimator_suite(config.seed)?) {
        let r = &c.report;
        println!("{:<40} max_rel_error {:.3e} (tol {:.0e}, {} coords)", c.name, r.max_rel_error, r.tolerance, r.checked);
        csv.push_str(&format!("{},{:e},{:e},{},{}\n", c.name, r.max_rel_error, r.tolerance, r.checked, r.passed()));
        worst = worst.max(r.max_rel_error);
        if !r.passed() {
            failed.push(c.name);
        }
    }
    dir.write("reports/gradcheck.csv", &csv)?;
    println!("max relative error {worst:.3e} (layers tol {LAYER_TOLERANCE:.0e}, estimators tol {END_TO_END_TOLERANCE:.0e})");
    if !failed.is_empty() {
        bail!("gradient check failed: {}", failed.join(", "));
    }
    Ok(())
}
