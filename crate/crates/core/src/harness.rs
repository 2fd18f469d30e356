//! Experiment plumbing behind the `mglab` binary: file formats, configs and
//! the `gen`, `solve`, `kappa`, `run` and `diag` commands.
//!
//! Outputs are deterministic in (config, seed): CSV floats use `%.12g`, JSON
//! uses sorted keys and round-trip floats, and nothing time-dependent is
//! written.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::class::{build_benchmark_class, build_closure_class, compute_kappa, ClassFile, ClosureOptions, FunctionClass, KappaReport};
use crate::diagnostics::{dc_bound_linear, probe_battery, run_battery, Fault, LemmaReport, ProbeCounts};
use crate::exec::Execution;
use crate::format::{canonical_json, sha256_hex};
use crate::game::{GameFile, MarkovPolicy, TabularMG};
use crate::instances::{gen_linear_mg, gen_random_qfunction, gen_random_tabular, Dims, FeatureKind};
use crate::oracle::solve_nash;
use crate::selfplay::{class_contains, default_hyperparams, regret_csv, run_batch, DiagFlags, EpisodeArtifact, HyperParams, RunOutput};
use crate::{Error, Result};

/// Process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    CheckFailed = 1,
    ConfigError = 2,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &canonical_json(value)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_game(path: &Path) -> Result<TabularMG> {
    TabularMG::try_from(read_json::<GameFile>(path)?)
}

pub fn save_game(path: &Path, mg: &TabularMG) -> Result<()> {
    write_json(path, &GameFile::from(mg.clone()))
}

pub fn load_class(path: &Path) -> Result<FunctionClass> {
    FunctionClass::from_file(read_json::<ClassFile>(path)?)
}

pub fn save_class(path: &Path, fc: &FunctionClass) -> Result<()> {
    write_json(path, &fc.to_file())
}

/// SHA-256 of the canonical JSON of an instance.
pub fn game_hash(mg: &TabularMG) -> Result<String> {
    Ok(sha256_hex(canonical_json(&GameFile::from(mg.clone()))?.as_bytes()))
}

/// SHA-256 of the canonical JSON of a class.
pub fn class_hash(fc: &FunctionClass) -> Result<String> {
    Ok(sha256_hex(canonical_json(&fc.to_file())?.as_bytes()))
}

/// What `gen` produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GenSpec {
    Tabular { dims: Dims, sparsity: f64 },
    Linear { dims: Dims, d: usize, features: FeatureKind },
}

/// Writes the instance to `out`; linear games also get `linear_spec.json`
/// next to it. Returns the written paths.
pub fn cmd_gen(spec: &GenSpec, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    match spec {
        GenSpec::Tabular { dims, sparsity } => {
            if dims.horizon == 0 || dims.num_states == 0 || dims.num_a == 0 || dims.num_b == 0 {
                return Err(Error::dims("horizon and all cardinalities must be positive"));
            }
            if !(0.0..=1.0).contains(sparsity) {
                return Err(Error::pre(format!("sparsity {sparsity} is outside [0, 1]")));
            }
            save_game(out, &gen_random_tabular(*dims, *sparsity, seed))?;
            Ok(vec![out.to_path_buf()])
        }
        GenSpec::Linear { dims, d, features } => {
            let (mg, lin) = gen_linear_mg(seed, *d, *dims, *features)?;
            save_game(out, &mg)?;
            let side = out.with_file_name("linear_spec.json");
            write_json(&side, &lin)?;
            Ok(vec![out.to_path_buf(), side])
        }
    }
}

/// How `gen --class` builds a function class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ClassSpec {
    /// `{Q*}` only.
    Singleton,
    /// `Q*` plus best responses of `seeds` random functions, closed for `depth` rounds.
    Closure { seeds: usize, depth: usize, include_seeds: bool, max_layer_size: usize },
    /// See [`build_benchmark_class`].
    Benchmark { seeds: usize },
}

/// Builds a class for the instance at `instance`, writes it to `out` and
/// returns it. Random seed functions are drawn from `seed`, `seed + 1`, ...
pub fn cmd_gen_class(instance: &Path, beta: f64, spec: &ClassSpec, seed: u64, out: &Path) -> Result<FunctionClass> {
    let mg = load_game(instance)?;
    let draw = |n: usize| (0..n as u64).map(|i| gen_random_qfunction(&mg, beta, seed.wrapping_add(i))).collect::<Vec<_>>();
    let fc = match spec {
        ClassSpec::Singleton => {
            let q = solve_nash(&mg).q_star;
            FunctionClass::uniform(beta, q.layers().iter().map(|l| vec![l.clone()]).collect())?
        }
        ClassSpec::Closure {
            seeds,
            depth,
            include_seeds,
            max_layer_size,
        } => {
            let opts = ClosureOptions {
                beta,
                depth: *depth,
                include_seeds: *include_seeds,
                max_layer_size: *max_layer_size,
            };
            let (fc, report) = build_closure_class(&mg, &draw(*seeds), &opts)?;
            log::info!(
                "closure class sizes {:?}, completeness defect {}",
                report.layer_sizes,
                report.completeness_defect
            );
            fc
        }
        ClassSpec::Benchmark { seeds } => build_benchmark_class(&mg, beta, &draw(*seeds))?,
    };
    save_class(out, &fc)?;
    Ok(fc)
}

/// Contents of `nash.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NashFile {
    pub v_star: f64,
    /// `[h][x]`, with the zero row `H` omitted.
    pub values: Vec<Vec<f64>>,
    /// `[h][x][a][b]`.
    pub q_star: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[h][x][a]`.
    pub mu_star: Vec<Vec<Vec<f64>>>,
    /// `[h][x][b]`.
    pub nu_star: Vec<Vec<Vec<f64>>>,
}

fn policy_rows(p: &MarkovPolicy) -> Vec<Vec<Vec<f64>>> {
    (0..p.horizon())
        .map(|h| (0..p.num_states()).map(|x| p.row(h, x).to_vec()).collect())
        .collect()
}

/// Solves the instance, writes `out_dir/nash.json` and returns `V*_1(x^1)`.
pub fn cmd_solve(instance: &Path, out_dir: &Path) -> Result<f64> {
    let mg = load_game(instance)?;
    let nash = solve_nash(&mg);
    let (xn, bn) = (mg.num_states(), mg.num_b());
    let file = NashFile {
        v_star: nash.value(&mg),
        values: (0..mg.horizon()).map(|h| nash.v_star.step(h).to_vec()).collect(),
        q_star: nash
            .q_star
            .layers()
            .iter()
            .map(|l| (0..xn).map(|x| l.matrix(x).chunks_exact(bn).map(<[f64]>::to_vec).collect()).collect())
            .collect(),
        mu_star: policy_rows(&nash.mu_star),
        nu_star: policy_rows(&nash.nu_star),
    };
    write_json(&out_dir.join("nash.json"), &file)?;
    Ok(file.v_star)
}

/// Computes `kappa(eps)` and `kappa_1(eps)` and writes `out_dir/kappa.json`.
pub fn cmd_kappa(instance: &Path, class: &Path, epsilon: f64, out_dir: &Path, exec: Execution) -> Result<KappaReport> {
    let mg = load_game(instance)?;
    let fc = load_class(class)?;
    let report = compute_kappa(&mg, &fc, epsilon, exec)?;
    write_json(&out_dir.join("kappa.json"), &report)?;
    Ok(report)
}

/// Explicit hyperparameters or the theoretical schedule. The schedule
/// computes `kappa` and `dc` from the instance unless they are given.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HyperChoice {
    Auto { kappa: Option<f64>, dc: Option<f64> },
    Explicit { eta: f64, lambda: f64 },
}

/// Everything that determines a batch of runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub instance: PathBuf,
    pub class: PathBuf,
    pub hyper: HyperChoice,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub record_trace: bool,
    pub dump_posterior: bool,
    /// Hyperparameter warnings become errors.
    pub strict: bool,
    #[serde(skip)]
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, p) in [("instance", &self.instance), ("class", &self.class)] {
            if !p.is_file() {
                return Err(Error::pre(format!("{what} file {} does not exist", p.display())));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::pre("at least one seed is required"));
        }
        let distinct: HashSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::pre("seeds must be distinct"));
        }
        if self.episodes == 0 {
            return Err(Error::InvalidHyperParams("episode budget must be positive".into()));
        }
        Ok(())
    }
}

/// Inputs of the theoretical schedule, recorded in `run_meta.json`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInputs {
    /// `beta / T^2`.
    pub epsilon: f64,
    pub kappa: f64,
    /// `2 d H (2 + ln(2 H T))` with `d = |X| |A| |B|`.
    pub dc: f64,
}

/// Resolves `--hyper`. The seed field of the result is 0.
pub fn resolve_hyperparams(
    cfg: &ExperimentConfig,
    mg: &TabularMG,
    fc: &FunctionClass,
    exec: Execution,
) -> Result<(HyperParams, Option<ScheduleInputs>)> {
    let beta = fc.beta();
    match cfg.hyper {
        HyperChoice::Explicit { eta, lambda } => Ok((
            HyperParams {
                eta,
                lambda,
                episodes: cfg.episodes,
                beta,
                seed: 0,
            },
            None,
        )),
        HyperChoice::Auto { kappa, dc } => {
            let t = cfg.episodes as f64;
            let epsilon = beta / (t * t);
            let kappa = match kappa {
                Some(k) => k,
                None => compute_kappa(mg, fc, epsilon, exec)?.kappa,
            };
            if !kappa.is_finite() {
                return Err(Error::InvalidHyperParams(format!(
                    "kappa({epsilon}) is infinite for this class; pass --eta and --lambda"
                )));
            }
            if kappa == 0.0 {
                return Err(Error::InvalidHyperParams(format!(
                    "kappa({epsilon}) is 0 for this class, so the schedule is undefined; pass --eta and --lambda"
                )));
            }
            let d = mg.num_states() * mg.num_a() * mg.num_b();
            let dc = dc.unwrap_or_else(|| dc_bound_linear(d, mg.horizon(), cfg.episodes));
            let hp = default_hyperparams(beta, cfg.episodes, kappa, dc)?;
            Ok((hp, Some(ScheduleInputs { epsilon, kappa, dc })))
        }
    }
}

/// Contents of `run_meta.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMeta {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub hyperparams: HyperParams,
    pub schedule: Option<ScheduleInputs>,
    pub warnings: Vec<String>,
    pub instance_sha256: String,
    pub class_sha256: String,
    pub class_sizes: Vec<usize>,
    pub class_contains_q_star: bool,
    pub v_star: f64,
    pub final_cum_regret: f64,
}

/// Contents of `summary.json`: per-episode statistics of `cum_regret` across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub mean_cum_regret: Vec<f64>,
    /// Sample standard deviation over `sqrt(n)`; 0 for one seed.
    pub stderr_cum_regret: Vec<f64>,
}

impl Summary {
    pub fn from_runs(runs: &[RunOutput], episodes: usize) -> Self {
        let n = runs.len() as f64;
        let mut mean = Vec::with_capacity(episodes);
        let mut stderr = Vec::with_capacity(episodes);
        for t in 0..episodes {
            let vals: Vec<f64> = runs.iter().map(|r| r.records[t].cum_regret).collect();
            let m = vals.iter().sum::<f64>() / n;
            let se = if runs.len() > 1 {
                (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
            } else {
                0.0
            };
            mean.push(m);
            stderr.push(se);
        }
        Summary {
            seeds: runs.iter().map(|r| r.seed).collect(),
            episodes,
            mean_cum_regret: mean,
            stderr_cum_regret: stderr,
        }
    }
}

/// Directory of one seed's outputs.
pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Runs every seed and writes `seed_<s>/regret.csv`, `seed_<s>/run_meta.json`,
/// optionally `seed_<s>/trace.json` and `seed_<s>/posterior.csv`, and
/// `summary.json`.
pub fn cmd_run(cfg: &ExperimentConfig, exec: Execution) -> Result<Summary> {
    cfg.validate()?;
    let mg = load_game(&cfg.instance)?;
    let fc = load_class(&cfg.class)?;
    fc.check_game(&mg)?;
    let (hp, schedule) = resolve_hyperparams(cfg, &mg, &fc, exec)?;
    let warnings = hp.validate(cfg.strict)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    log::info!("eta = {}, lambda = {}", hp.eta, hp.lambda);
    let flags = DiagFlags {
        record_trace: cfg.record_trace,
        dump_posterior: cfg.dump_posterior,
    };
    let runs = run_batch(&mg, &fc, &hp, &cfg.seeds, flags, exec)?;
    let nash = solve_nash(&mg);
    let (instance_sha256, class_sha256) = (game_hash(&mg)?, class_hash(&fc)?);
    let contains = class_contains(&fc, nash.q_star.layers(), 1e-9);
    for run in &runs {
        let dir = seed_dir(&cfg.out, run.seed);
        write_text(&dir.join("regret.csv"), &regret_csv(&run.records))?;
        let meta = RunMeta {
            config: cfg.clone(),
            seed: run.seed,
            hyperparams: HyperParams { seed: run.seed, ..hp },
            schedule,
            warnings: warnings.clone(),
            instance_sha256: instance_sha256.clone(),
            class_sha256: class_sha256.clone(),
            class_sizes: fc.sizes(),
            class_contains_q_star: contains,
            v_star: nash.value(&mg),
            final_cum_regret: run.final_regret(),
        };
        write_json(&dir.join("run_meta.json"), &meta)?;
        if cfg.record_trace {
            write_json(&dir.join("trace.json"), &run.artifacts)?;
        }
        if let Some(dump) = &run.posterior_dump {
            write_text(&dir.join("posterior.csv"), dump)?;
        }
    }
    let summary = Summary::from_runs(&runs, cfg.episodes);
    write_json(&cfg.out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// What `diag` analyses.
#[derive(Clone, Debug, PartialEq)]
pub enum DiagSource {
    /// A seed directory written by `run --record-trace`.
    Run(PathBuf),
    /// Fresh random probes on the instance.
    Probes { beta: f64, counts: ProbeCounts, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagConfig {
    pub instance: PathBuf,
    /// Required for [`DiagSource::Run`].
    pub class: Option<PathBuf>,
    pub source: DiagSource,
    pub fault: Fault,
    pub out: PathBuf,
}

/// Runs the diagnostics battery and writes `lemma_report.json` (and
/// `diag.csv` for recorded runs) to `out`.
pub fn cmd_diag(cfg: &DiagConfig, exec: Execution) -> Result<LemmaReport> {
    let mg = load_game(&cfg.instance)?;
    let report = match &cfg.source {
        DiagSource::Run(dir) => {
            let class = cfg
                .class
                .as_ref()
                .ok_or_else(|| Error::pre("diagnosing a recorded run needs the class file"))?;
            let fc = load_class(class)?;
            let trace_path = dir.join("trace.json");
            if !trace_path.is_file() {
                return Err(Error::MissingArtifacts(format!(
                    "{} not found; rerun with --record-trace",
                    trace_path.display()
                )));
            }
            let artifacts: Vec<EpisodeArtifact> = read_json(&trace_path)?;
            let (report, trace) = run_battery(&mg, &fc, &artifacts, cfg.fault, exec)?;
            write_text(&cfg.out.join("diag.csv"), &trace.to_csv())?;
            report
        }
        DiagSource::Probes { beta, counts, seed } => probe_battery(&mg, *beta, *counts, *seed, cfg.fault, exec)?,
    };
    write_json(&cfg.out.join("lemma_report.json"), &report)?;
    Ok(report)
}
