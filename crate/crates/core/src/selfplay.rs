//! The self-play loop: sample `f_t` from the main posterior, play its induced
//! maximin policy, sample `g_t` from the booster posterior for that policy,
//! play the greedy response, and evaluate the episode exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::class::{FunctionClass, QLayer};
use crate::exec::Execution;
use crate::game::{policy_value, sample_episode, MarkovPolicy, Side, TabularMG};
use crate::matrix::{argmin_first, row_payoffs};
use crate::oracle::{best_response, solve_nash, NashSolution};
use crate::posterior::{
    build_booster_posterior, build_main_posterior, enumerate_posterior, write_posterior_csv, History,
    LossLedger, DEFAULT_ENUMERATION_CAP,
};
use crate::{Error, Result};

/// Learning rate, optimism weight, budget, bound and seed of one run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub eta: f64,
    pub lambda: f64,
    /// Episode budget `T`.
    pub episodes: usize,
    pub beta: f64,
    pub seed: u64,
}

impl HyperParams {
    /// Checks `eta beta^2 <= 0.5` and `lambda beta^2 >= 1`. Violations are
    /// returned as warnings, or as an error when `strict`.
    pub fn validate(&self, strict: bool) -> Result<Vec<String>> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidHyperParams(format!("eta must be finite and > 0, got {}", self.eta)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidHyperParams(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.beta > 1.0) || !self.beta.is_finite() {
            return Err(Error::InvalidHyperParams(format!("beta must be finite and > 1, got {}", self.beta)));
        }
        let b2 = self.beta * self.beta;
        let mut warnings = Vec::new();
        if self.eta * b2 > 0.5 {
            warnings.push(format!("eta * beta^2 = {} exceeds 0.5", self.eta * b2));
        }
        if self.lambda * b2 < 1.0 {
            warnings.push(format!("lambda * beta^2 = {} is below 1", self.lambda * b2));
        }
        if strict && !warnings.is_empty() {
            return Err(Error::InvalidHyperParams(warnings.join("; ")));
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(warnings)
    }
}

/// The schedule `eta = 1/(4 beta^2)`, `lambda = sqrt(T kappa / (beta^2 dc))`,
/// with `lambda` raised to `1/beta^2` when smaller. The seed is 0.
pub fn default_hyperparams(beta: f64, episodes: usize, kappa: f64, dc: f64) -> Result<HyperParams> {
    for (name, v) in [("beta", beta), ("kappa", kappa), ("dc", dc)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidHyperParams(format!("{name} must be finite and > 0, got {v}")));
        }
    }
    if episodes == 0 {
        return Err(Error::InvalidHyperParams("episode budget must be positive".into()));
    }
    let b2 = beta * beta;
    let mut lambda = (episodes as f64 * kappa / (b2 * dc)).sqrt();
    if lambda * b2 < 1.0 {
        log::info!("lambda {lambda} raised to 1/beta^2 = {}", 1.0 / b2);
        lambda = 1.0 / b2;
    }
    Ok(HyperParams {
        eta: 1.0 / (4.0 * b2),
        lambda,
        episodes,
        beta,
        seed: 0,
    })
}

/// Exact evaluation of one episode's policy pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretRecord {
    /// 1-based episode index `t`.
    pub episode: usize,
    /// `V*_1(x^1)`.
    pub v_star: f64,
    /// `V^{mu_t, nu_t}_1(x^1)`.
    pub v_exec: f64,
    /// `V^{mu_t, dagger}_1(x^1)`.
    pub v_br: f64,
    /// `v_star - v_exec`.
    pub main_gap: f64,
    /// `v_exec - v_br`.
    pub booster_gap: f64,
    /// `main_gap + booster_gap`, i.e. `v_star - v_br` up to one rounding.
    pub inst_regret: f64,
    pub cum_regret: f64,
}

/// CSV header matching [`RegretRecord::csv_row`].
pub const REGRET_CSV_HEADER: &str = "episode,v_star,v_exec,v_br,main_gap,booster_gap,inst_regret,cum_regret";

impl RegretRecord {
    pub fn csv_row(&self) -> String {
        use crate::format::fmt_g12;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.episode,
            fmt_g12(self.v_star),
            fmt_g12(self.v_exec),
            fmt_g12(self.v_br),
            fmt_g12(self.main_gap),
            fmt_g12(self.booster_gap),
            fmt_g12(self.inst_regret),
            fmt_g12(self.cum_regret)
        )
    }
}

/// Renders a full `regret.csv`.
pub fn regret_csv(records: &[RegretRecord]) -> String {
    let mut out = String::from(REGRET_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Exact values of `(mu, nu)` against the Nash solution. `cum_regret` is left
/// at `inst_regret`; the caller accumulates.
pub fn evaluate_episode(
    mg: &TabularMG,
    mu: &MarkovPolicy,
    nu: &MarkovPolicy,
    nash: &NashSolution,
    episode: usize,
) -> Result<RegretRecord> {
    let x1 = mg.initial_state();
    let v_star = nash.value(mg);
    let v_exec = policy_value(mg, mu, nu)?.get(0, x1);
    let v_br = best_response(mg, mu)?.v_br.get(0, x1);
    let main_gap = v_star - v_exec;
    let booster_gap = v_exec - v_br;
    let inst_regret = main_gap + booster_gap;
    Ok(RegretRecord {
        episode,
        v_star,
        v_exec,
        v_br,
        main_gap,
        booster_gap,
        inst_regret,
        cum_regret: inst_regret,
    })
}

/// `nu_h(x)`: the lowest-index pure minimiser of `mu_h(x)^T g^h(x, ., b)`.
pub fn booster_response(mu: &MarkovPolicy, layers: &[&QLayer]) -> Result<MarkovPolicy> {
    let first = layers.first().ok_or_else(|| Error::dims("no layers"))?;
    let (xn, bn) = (first.num_states(), first.num_b());
    if layers.len() != mu.horizon() || mu.num_states() != xn || mu.num_actions() != first.num_a() {
        return Err(Error::dims("policy does not match the layers"));
    }
    let mut actions = Vec::with_capacity(layers.len() * xn);
    for (h, g) in layers.iter().enumerate() {
        for x in 0..xn {
            actions.push(argmin_first(&row_payoffs(g.matrix(x), bn, mu.row(h, x))).1);
        }
    }
    MarkovPolicy::deterministic(Side::Min, layers.len(), xn, bn, &actions)
}

/// Optional extras recorded during a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagFlags {
    /// Keep `(f_t, g_t)` for every episode (needed by the decoupling trace).
    pub record_trace: bool,
    /// Dump the enumerated main posterior before every episode as CSV.
    pub dump_posterior: bool,
}

/// Class indices drawn in one episode.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeArtifact {
    pub episode: usize,
    pub f_idx: Vec<usize>,
    pub g_idx: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub seed: u64,
    pub records: Vec<RegretRecord>,
    /// Empty unless [`DiagFlags::record_trace`] is set.
    pub artifacts: Vec<EpisodeArtifact>,
    /// CSV text, present when [`DiagFlags::dump_posterior`] is set.
    pub posterior_dump: Option<String>,
}

impl RunOutput {
    pub fn final_regret(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cum_regret)
    }
}

/// True when every layer of `q` has a class member within `tol` in sup norm.
pub fn class_contains(fc: &FunctionClass, layers: &[QLayer], tol: f64) -> bool {
    layers.len() == fc.horizon()
        && layers
            .iter()
            .enumerate()
            .all(|(h, l)| fc.members(h).iter().any(|m| m.sup_distance(l) <= tol))
}

/// One full self-play run of `hp.episodes` episodes; deterministic in `hp.seed`.
pub fn run_selfplay(mg: &TabularMG, fc: &FunctionClass, hp: &HyperParams, flags: DiagFlags) -> Result<RunOutput> {
    let nash = solve_nash(mg);
    run_with_nash(mg, fc, hp, flags, &nash)
}

fn run_with_nash(
    mg: &TabularMG,
    fc: &FunctionClass,
    hp: &HyperParams,
    flags: DiagFlags,
    nash: &NashSolution,
) -> Result<RunOutput> {
    fc.check_game(mg)?;
    hp.validate(false)?;
    if !class_contains(fc, nash.q_star.layers(), 1e-9) {
        log::warn!("the class does not contain Q*; regret guarantees assume it does");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut ledger = LossLedger::new(fc, mg.initial_state());
    let mut history = History::new(mg.initial_state());
    let mut records = Vec::with_capacity(hp.episodes);
    let mut artifacts = Vec::new();
    let mut dump = flags.dump_posterior.then(Vec::new);
    let mut cum = 0.0;
    for t in 1..=hp.episodes {
        let main = build_main_posterior(fc, &ledger, hp.eta, hp.lambda)?;
        if let Some(buf) = dump.as_mut() {
            let atoms = enumerate_posterior(&main, DEFAULT_ENUMERATION_CAP)?;
            write_posterior_csv(buf, t, &atoms, t == 1)?;
        }
        let f_idx = main.sample(&mut rng);
        let mu = fc.induced(&f_idx).mu;

        let booster = build_booster_posterior(fc, &mu, &history, hp.eta, hp.lambda)?;
        let g_idx = booster.sample(&mut rng);
        let g_layers: Vec<&QLayer> = g_idx.iter().enumerate().map(|(h, &k)| fc.layer(h, k)).collect();
        let nu = booster_response(&mu, &g_layers)?;

        let traj = sample_episode(mg, &mu, &nu, t, &mut rng)?;
        ledger.absorb(fc, &traj)?;
        history.push(traj);

        let mut rec = evaluate_episode(mg, &mu, &nu, nash, t)?;
        cum += rec.inst_regret;
        rec.cum_regret = cum;
        records.push(rec);
        if flags.record_trace {
            artifacts.push(EpisodeArtifact {
                episode: t,
                f_idx,
                g_idx,
            });
        }
    }
    Ok(RunOutput {
        seed: hp.seed,
        records,
        artifacts,
        posterior_dump: dump.map(|b| String::from_utf8(b).expect("CSV is ASCII")),
    })
}

/// Independent runs over `seeds`, sharing the game, class and Nash solution.
pub fn run_batch(
    mg: &TabularMG,
    fc: &FunctionClass,
    hp: &HyperParams,
    seeds: &[u64],
    flags: DiagFlags,
    exec: Execution,
) -> Result<Vec<RunOutput>> {
    let nash = solve_nash(mg);
    exec.try_map_range(seeds.len(), |i| {
        let hp = HyperParams { seed: seeds[i], ..*hp };
        run_with_nash(mg, fc, &hp, flags, &nash)
    })
}
