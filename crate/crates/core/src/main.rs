use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use mglab::diagnostics::{Fault, ProbeCounts};
use mglab::format::fmt_g12;
use mglab::harness::{
    cmd_diag, cmd_gen, cmd_gen_class, cmd_kappa, cmd_run, cmd_solve, ClassSpec, DiagConfig, DiagSource,
    ExitStatus, ExperimentConfig, GenSpec, HyperChoice,
};
use mglab::instances::{Dims, FeatureKind};
use mglab::{Error, Execution};

#[derive(Parser)]
#[command(name = "mglab", version, about = "Posterior-sampling self-play for zero-sum Markov games")]
struct Cli {
    /// Base random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file for `gen`, output directory otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Treat hyperparameter warnings as errors.
    #[arg(long, global = true)]
    strict: bool,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Size of the worker pool (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an instance or a function class.
    Gen(GenArgs),
    /// Solve an instance by backward induction and write nash.json.
    Solve {
        #[arg(long)]
        instance: PathBuf,
    },
    /// Compute kappa(eps) and kappa_1(eps) of a class and write kappa.json.
    Kappa {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        class: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        eps: f64,
    },
    /// Run self-play for one or more seeds.
    Run(RunArgs),
    /// Check the analysis identities on a recorded run or on random probes.
    Diag(DiagArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("kind").required(true).args(["tabular", "linear", "class"])))]
struct GenArgs {
    #[arg(long)]
    tabular: bool,
    #[arg(long)]
    linear: bool,
    /// Build a function class for `--instance`.
    #[arg(long)]
    class: bool,
    #[arg(long = "H", default_value_t = 2)]
    horizon: usize,
    #[arg(long, default_value_t = 2)]
    states: usize,
    /// Action counts of the max and min player.
    #[arg(long, num_args = 2, value_names = ["A", "B"], default_values_t = [2, 2])]
    actions: Vec<usize>,
    /// Probability that a reward is zeroed.
    #[arg(long, default_value_t = 0.0)]
    sparsity: f64,
    /// Feature dimension of a linear game.
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, value_enum, default_value_t = Features::Dirichlet)]
    features: Features,
    #[arg(long, required_if_eq("class", "true"))]
    instance: Option<PathBuf>,
    #[arg(long, default_value_t = 3.0)]
    beta: f64,
    #[arg(long = "class-kind", value_enum, default_value_t = ClassKind::Benchmark)]
    class_kind: ClassKind,
    /// Number of random seed functions.
    #[arg(long = "class-seeds", default_value_t = 3)]
    class_seeds: usize,
    #[arg(long, default_value_t = 0)]
    depth: usize,
    #[arg(long = "include-seeds")]
    include_seeds: bool,
    #[arg(long = "max-layer-size", default_value_t = 64)]
    max_layer_size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Features {
    Dirichlet,
    Onehot,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassKind {
    Singleton,
    Closure,
    Benchmark,
}

#[derive(Clone, Copy, ValueEnum)]
enum Hyper {
    Auto,
    Manual,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    class: PathBuf,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    /// Explicit seed list; overrides `--seed`/`--num-seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Run seeds `seed, seed + 1, ..., seed + n - 1`.
    #[arg(long = "num-seeds", default_value_t = 1)]
    num_seeds: u64,
    #[arg(long, value_enum, default_value_t = Hyper::Manual)]
    hyper: Hyper,
    #[arg(long, required_if_eq("hyper", "manual"))]
    eta: Option<f64>,
    #[arg(long, required_if_eq("hyper", "manual"))]
    lambda: Option<f64>,
    /// Use this kappa in the auto schedule instead of computing it.
    #[arg(long)]
    kappa: Option<f64>,
    /// Use this dc in the auto schedule instead of the linear bound.
    #[arg(long)]
    dc: Option<f64>,
    /// Keep (f_t, g_t) indices in trace.json for `diag`.
    #[arg(long = "record-trace")]
    record_trace: bool,
    /// Write the enumerated main posterior before each episode.
    #[arg(long = "dump-posterior")]
    dump_posterior: bool,
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["run", "probes"])))]
struct DiagArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long, required_if_eq("run", "true"))]
    class: Option<PathBuf>,
    /// Seed directory of a run made with --record-trace.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Use fresh random probes.
    #[arg(long)]
    probes: bool,
    #[arg(long, default_value_t = 3.0)]
    beta: f64,
    #[arg(long = "lemma-probes", default_value_t = 200)]
    lemma_probes: usize,
    #[arg(long = "moment-probes", default_value_t = 1000)]
    moment_probes: usize,
    #[arg(long = "elliptical-probes", default_value_t = 1000)]
    elliptical_probes: usize,
    /// Corrupt the residual tables before checking (self-test).
    #[arg(long = "inject-fault")]
    inject_fault: bool,
}

fn execute(cli: Cli, exec: Execution) -> Result<ExitStatus, Error> {
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    match cli.command {
        Command::Gen(g) => {
            let dims = Dims::new(g.horizon, g.states, g.actions[0], g.actions[1]);
            let out = cli.out.unwrap_or_else(|| PathBuf::from(if g.class { "class.json" } else { "g.json" }));
            if g.class {
                let spec = match g.class_kind {
                    ClassKind::Singleton => ClassSpec::Singleton,
                    ClassKind::Closure => ClassSpec::Closure {
                        seeds: g.class_seeds,
                        depth: g.depth,
                        include_seeds: g.include_seeds,
                        max_layer_size: g.max_layer_size,
                    },
                    ClassKind::Benchmark => ClassSpec::Benchmark { seeds: g.class_seeds },
                };
                let instance = g.instance.expect("required by clap");
                let fc = cmd_gen_class(&instance, g.beta, &spec, cli.seed, &out)?;
                println!("wrote {} (layer sizes {:?})", out.display(), fc.sizes());
            } else {
                let spec = if g.tabular {
                    GenSpec::Tabular { dims, sparsity: g.sparsity }
                } else {
                    let features = match g.features {
                        Features::Dirichlet => FeatureKind::Dirichlet,
                        Features::Onehot => FeatureKind::OneHot,
                    };
                    GenSpec::Linear { dims, d: g.d, features }
                };
                for p in cmd_gen(&spec, cli.seed, &out)? {
                    println!("wrote {}", p.display());
                }
            }
            Ok(ExitStatus::Success)
        }
        Command::Solve { instance } => {
            let v = cmd_solve(&instance, &out_dir)?;
            println!("V*_1(x1) = {}", fmt_g12(v));
            Ok(ExitStatus::Success)
        }
        Command::Kappa { instance, class, eps } => {
            let r = cmd_kappa(&instance, &class, eps, &out_dir, exec)?;
            println!("kappa = {}", fmt_g12(r.kappa));
            println!("kappa1 = {}", fmt_g12(r.kappa1));
            Ok(ExitStatus::Success)
        }
        Command::Run(r) => {
            let seeds = if r.seeds.is_empty() {
                (0..r.num_seeds).map(|i| cli.seed.wrapping_add(i)).collect()
            } else {
                r.seeds
            };
            let hyper = match r.hyper {
                Hyper::Auto => HyperChoice::Auto { kappa: r.kappa, dc: r.dc },
                Hyper::Manual => HyperChoice::Explicit {
                    eta: r.eta.expect("required by clap"),
                    lambda: r.lambda.expect("required by clap"),
                },
            };
            let cfg = ExperimentConfig {
                instance: r.instance,
                class: r.class,
                hyper,
                episodes: r.episodes,
                seeds,
                record_trace: r.record_trace,
                dump_posterior: r.dump_posterior,
                strict: cli.strict,
                out: out_dir,
            };
            let summary = cmd_run(&cfg, exec)?;
            let last = summary.episodes - 1;
            println!(
                "{} seed(s), {} episodes: mean cum_regret {} (stderr {})",
                summary.seeds.len(),
                summary.episodes,
                fmt_g12(summary.mean_cum_regret[last]),
                fmt_g12(summary.stderr_cum_regret[last])
            );
            Ok(ExitStatus::Success)
        }
        Command::Diag(d) => {
            let source = match d.run {
                Some(dir) => DiagSource::Run(dir),
                None => DiagSource::Probes {
                    beta: d.beta,
                    counts: ProbeCounts {
                        lemma_main: d.lemma_probes,
                        lemma_booster: d.lemma_probes,
                        moments: d.moment_probes,
                        elliptical: d.elliptical_probes,
                    },
                    seed: cli.seed,
                },
            };
            let cfg = DiagConfig {
                instance: d.instance,
                class: d.class,
                source,
                fault: if d.inject_fault { Fault::CorruptResidual } else { Fault::None },
                out: out_dir,
            };
            let report = cmd_diag(&cfg, exec)?;
            for c in &report.checks {
                println!(
                    "{} {}: {} probes, {} failures, extremal {}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.probes,
                    c.failures,
                    fmt_g12(c.extremal)
                );
            }
            for c in &report.dc {
                println!(
                    "{} dc mu={}: lhs {} <= rhs {}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.mu,
                    fmt_g12(c.lhs),
                    fmt_g12(c.rhs)
                );
            }
            Ok(if report.pass { ExitStatus::Success } else { ExitStatus::CheckFailed })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    #[cfg(feature = "parallel")]
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(ExitStatus::ConfigError as u8);
        }
    }
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let status = match execute(cli, exec) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            ExitStatus::ConfigError
        }
    };
    ExitCode::from(status as u8)
}
