//! Tabular episodic zero-sum Markov games.
//!
//! Steps are 0-based in code: step `h` ranges over `0..horizon`, and value
//! tables carry one extra terminal row `horizon` that is identically zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance used when validating probability tables.
pub const PROB_TOL: f64 = 1e-12;

/// Full model of an episodic zero-sum game with a fixed initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GameFile", into = "GameFile")]
pub struct TabularMG {
    horizon: usize,
    num_states: usize,
    num_a: usize,
    num_b: usize,
    initial_state: usize,
    /// Flat `(h, x, a, b)`.
    reward: Vec<f64>,
    /// Flat `(h, x, a, b, x')`.
    transition: Vec<f64>,
}

impl TabularMG {
    /// Builds a game from flat row-major tables, validating every invariant.
    pub fn from_flat(
        horizon: usize,
        num_states: usize,
        num_a: usize,
        num_b: usize,
        initial_state: usize,
        reward: Vec<f64>,
        transition: Vec<f64>,
    ) -> Result<Self> {
        if horizon == 0 || num_states == 0 || num_a == 0 || num_b == 0 {
            return Err(Error::dims("horizon and all cardinalities must be positive"));
        }
        let cells = horizon * num_states * num_a * num_b;
        if reward.len() != cells {
            return Err(Error::dims(format!(
                "reward has {} entries, expected {cells}",
                reward.len()
            )));
        }
        if transition.len() != cells * num_states {
            return Err(Error::dims(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                cells * num_states
            )));
        }
        if initial_state >= num_states {
            return Err(Error::OutOfRange {
                location: "initial_state".into(),
                value: initial_state as f64,
                lo: 0.0,
                hi: (num_states - 1) as f64,
            });
        }
        let mg = TabularMG {
            horizon,
            num_states,
            num_a,
            num_b,
            initial_state,
            reward,
            transition,
        };
        for h in 0..horizon {
            for x in 0..num_states {
                for a in 0..num_a {
                    for b in 0..num_b {
                        let loc = || format!("(h={h}, x={x}, a={a}, b={b})");
                        let r = mg.reward(h, x, a, b);
                        if !r.is_finite() {
                            return Err(Error::NonFinite(format!("reward at {}", loc())));
                        }
                        if !(0.0..=1.0).contains(&r) {
                            return Err(Error::OutOfRange {
                                location: format!("reward {}", loc()),
                                value: r,
                                lo: 0.0,
                                hi: 1.0,
                            });
                        }
                        check_distribution(mg.next_dist(h, x, a, b), || {
                            format!("transition {}", loc())
                        })?;
                    }
                }
            }
        }
        Ok(mg)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_a(&self) -> usize {
        self.num_a
    }

    pub fn num_b(&self) -> usize {
        self.num_b
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    /// Number of `(x, a, b)` cells per step.
    pub fn cells(&self) -> usize {
        self.num_states * self.num_a * self.num_b
    }

    #[inline]
    pub fn cell(&self, x: usize, a: usize, b: usize) -> usize {
        (x * self.num_a + a) * self.num_b + b
    }

    #[inline]
    pub fn reward(&self, h: usize, x: usize, a: usize, b: usize) -> f64 {
        self.reward[h * self.cells() + self.cell(x, a, b)]
    }

    /// Reward layer of step `h`, flat `(x, a, b)`.
    pub fn reward_layer(&self, h: usize) -> &[f64] {
        let n = self.cells();
        &self.reward[h * n..(h + 1) * n]
    }

    #[inline]
    pub fn next_dist(&self, h: usize, x: usize, a: usize, b: usize) -> &[f64] {
        let start = (h * self.cells() + self.cell(x, a, b)) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    pub fn reward_flat(&self) -> &[f64] {
        &self.reward
    }

    pub fn transition_flat(&self) -> &[f64] {
        &self.transition
    }

    /// Applies `P_h` to a next-step state function: `sum_x' P_h(x'|x,a,b) v(x')`.
    pub fn expect_next(&self, h: usize, x: usize, a: usize, b: usize, v: &[f64]) -> f64 {
        self.next_dist(h, x, a, b)
            .iter()
            .zip(v)
            .map(|(p, v)| p * v)
            .sum()
    }

    /// `r^h + P_h v` as a flat `(x, a, b)` table.
    pub fn backup(&self, h: usize, next_values: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.cells());
        for x in 0..self.num_states {
            for a in 0..self.num_a {
                for b in 0..self.num_b {
                    out.push(self.reward(h, x, a, b) + self.expect_next(h, x, a, b, next_values));
                }
            }
        }
        out
    }

    pub(crate) fn check_policy(&self, policy: &MarkovPolicy, side: Side) -> Result<()> {
        if policy.side != side {
            return Err(Error::WrongSide {
                expected: side.name(),
                found: policy.side.name(),
            });
        }
        let actions = match side {
            Side::Max => self.num_a,
            Side::Min => self.num_b,
        };
        if policy.horizon != self.horizon
            || policy.num_states != self.num_states
            || policy.num_actions != actions
        {
            return Err(Error::dims(format!(
                "{} policy is {}x{}x{}, game expects {}x{}x{}",
                side.name(),
                policy.horizon,
                policy.num_states,
                policy.num_actions,
                self.horizon,
                self.num_states,
                actions
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_distribution(p: &[f64], location: impl Fn() -> String) -> Result<()> {
    let mut sum = 0.0;
    for &v in p {
        if !v.is_finite() {
            return Err(Error::NonFinite(location()));
        }
        if v < 0.0 {
            return Err(Error::InvalidDistribution {
                location: location(),
                reason: format!("negative entry {v}"),
            });
        }
        sum += v;
    }
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidDistribution {
            location: location(),
            reason: format!("sums to {sum}"),
        });
    }
    Ok(())
}

/// JSON layout of an instance file: nested arrays in `(h, x, a, b[, x'])` order.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameFile {
    #[serde(rename = "H")]
    pub horizon: usize,
    pub num_states: usize,
    pub num_a: usize,
    pub num_b: usize,
    pub initial_state: usize,
    pub reward: Vec<Vec<Vec<Vec<f64>>>>,
    pub transition: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
}

impl TryFrom<GameFile> for TabularMG {
    type Error = Error;

    fn try_from(f: GameFile) -> Result<Self> {
        let shape_err = |what: &str| Error::dims(format!("{what} array has the wrong shape"));
        let mut reward = Vec::new();
        if f.reward.len() != f.horizon {
            return Err(shape_err("reward"));
        }
        for layer in &f.reward {
            if layer.len() != f.num_states {
                return Err(shape_err("reward"));
            }
            for row in layer {
                if row.len() != f.num_a || row.iter().any(|r| r.len() != f.num_b) {
                    return Err(shape_err("reward"));
                }
                reward.extend(row.iter().flatten());
            }
        }
        let mut transition = Vec::new();
        if f.transition.len() != f.horizon {
            return Err(shape_err("transition"));
        }
        for layer in &f.transition {
            if layer.len() != f.num_states {
                return Err(shape_err("transition"));
            }
            for row in layer {
                if row.len() != f.num_a {
                    return Err(shape_err("transition"));
                }
                for cols in row {
                    if cols.len() != f.num_b || cols.iter().any(|p| p.len() != f.num_states) {
                        return Err(shape_err("transition"));
                    }
                    transition.extend(cols.iter().flatten());
                }
            }
        }
        TabularMG::from_flat(
            f.horizon,
            f.num_states,
            f.num_a,
            f.num_b,
            f.initial_state,
            reward,
            transition,
        )
    }
}

impl From<TabularMG> for GameFile {
    fn from(mg: TabularMG) -> Self {
        let (hn, xn, an, bn) = (mg.horizon, mg.num_states, mg.num_a, mg.num_b);
        let reward = (0..hn)
            .map(|h| {
                (0..xn)
                    .map(|x| {
                        (0..an)
                            .map(|a| (0..bn).map(|b| mg.reward(h, x, a, b)).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let transition = (0..hn)
            .map(|h| {
                (0..xn)
                    .map(|x| {
                        (0..an)
                            .map(|a| (0..bn).map(|b| mg.next_dist(h, x, a, b).to_vec()).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        GameFile {
            horizon: hn,
            num_states: xn,
            num_a: an,
            num_b: bn,
            initial_state: mg.initial_state,
            reward,
            transition,
        }
    }
}

/// Which player a policy belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Max,
    Min,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Max => "max-player",
            Side::Min => "min-player",
        }
    }
}

/// Per-step, per-state action distribution for one player.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovPolicy {
    side: Side,
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    /// Flat `(h, x, action)`.
    probs: Vec<f64>,
}

impl MarkovPolicy {
    pub fn from_flat(
        side: Side,
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        probs: Vec<f64>,
    ) -> Result<Self> {
        if probs.len() != horizon * num_states * num_actions || num_actions == 0 {
            return Err(Error::dims(format!(
                "policy table has {} entries, expected {}",
                probs.len(),
                horizon * num_states * num_actions
            )));
        }
        let policy = MarkovPolicy {
            side,
            horizon,
            num_states,
            num_actions,
            probs,
        };
        for h in 0..horizon {
            for x in 0..num_states {
                check_distribution(policy.row(h, x), || {
                    format!("{} policy (h={h}, x={x})", side.name())
                })?;
            }
        }
        Ok(policy)
    }

    /// Builds a policy from per-`(h, x)` rows.
    pub fn from_rows(side: Side, horizon: usize, num_states: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let num_actions = rows.first().map_or(0, Vec::len);
        if rows.len() != horizon * num_states || rows.iter().any(|r| r.len() != num_actions) {
            return Err(Error::dims("policy rows have inconsistent shape"));
        }
        Self::from_flat(side, horizon, num_states, num_actions, rows.concat())
    }

    pub fn uniform(side: Side, horizon: usize, num_states: usize, num_actions: usize) -> Self {
        let p = 1.0 / num_actions as f64;
        MarkovPolicy {
            side,
            horizon,
            num_states,
            num_actions,
            probs: vec![p; horizon * num_states * num_actions],
        }
    }

    /// Deterministic policy from an action per flat `(h, x)`.
    pub fn deterministic(
        side: Side,
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        actions: &[usize],
    ) -> Result<Self> {
        if actions.len() != horizon * num_states {
            return Err(Error::dims("one action per (h, x) required"));
        }
        let mut probs = vec![0.0; horizon * num_states * num_actions];
        for (i, &act) in actions.iter().enumerate() {
            if act >= num_actions {
                return Err(Error::dims(format!("action {act} out of range")));
            }
            probs[i * num_actions + act] = 1.0;
        }
        Ok(MarkovPolicy {
            side,
            horizon,
            num_states,
            num_actions,
            probs,
        })
    }

    /// Random policy with rows drawn uniformly from the simplex.
    pub fn random<R: Rng + ?Sized>(
        side: Side,
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        rng: &mut R,
    ) -> Self {
        let mut probs = Vec::with_capacity(horizon * num_states * num_actions);
        for _ in 0..horizon * num_states {
            probs.extend(crate::instances::dirichlet_ones(num_actions, rng));
        }
        MarkovPolicy {
            side,
            horizon,
            num_states,
            num_actions,
            probs,
        }
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn row(&self, h: usize, x: usize) -> &[f64] {
        let start = (h * self.num_states + x) * self.num_actions;
        &self.probs[start..start + self.num_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// One step of an episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub a: usize,
    pub b: usize,
    pub reward: f64,
}

/// A full episode of exactly `horizon` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode: usize,
    pub steps: Vec<Step>,
}

impl Trajectory {
    /// State reached after step `h`, if it was recorded (`None` after the last step).
    pub fn next_state(&self, h: usize) -> Option<usize> {
        self.steps.get(h + 1).map(|s| s.state)
    }
}

/// Inverse-CDF draw from a normalised distribution given `u ~ U[0, 1)`.
pub(crate) fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    // Rounding left u above the accumulated mass.
    last_positive
}

/// Ancestral sampling of one episode under `(mu, nu)`.
pub fn sample_episode<R: Rng + ?Sized>(
    mg: &TabularMG,
    mu: &MarkovPolicy,
    nu: &MarkovPolicy,
    episode: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    mg.check_policy(mu, Side::Max)?;
    mg.check_policy(nu, Side::Min)?;
    let mut steps = Vec::with_capacity(mg.horizon);
    let mut x = mg.initial_state;
    for h in 0..mg.horizon {
        let a = inverse_cdf(mu.row(h, x), rng.random::<f64>());
        let b = inverse_cdf(nu.row(h, x), rng.random::<f64>());
        steps.push(Step {
            state: x,
            a,
            b,
            reward: mg.reward(h, x, a, b),
        });
        if h + 1 < mg.horizon {
            x = inverse_cdf(mg.next_dist(h, x, a, b), rng.random::<f64>());
        }
    }
    Ok(Trajectory { episode, steps })
}

/// Exact per-step visitation distribution over `(x, a, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyMeasure {
    horizon: usize,
    cells: usize,
    /// Flat `(h, x, a, b)`.
    dist: Vec<f64>,
}

impl OccupancyMeasure {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Step-`h` distribution, flat `(x, a, b)`.
    pub fn layer(&self, h: usize) -> &[f64] {
        &self.dist[h * self.cells..(h + 1) * self.cells]
    }

    /// `E_{d^h}[table]` for a flat `(x, a, b)` table.
    pub fn expect(&self, h: usize, table: &[f64]) -> f64 {
        self.layer(h).iter().zip(table).map(|(d, v)| d * v).sum()
    }
}

/// Forward recursion for the occupancy measure of `(mu, nu)` from the initial state.
pub fn compute_occupancy(
    mg: &TabularMG,
    mu: &MarkovPolicy,
    nu: &MarkovPolicy,
) -> Result<OccupancyMeasure> {
    mg.check_policy(mu, Side::Max)?;
    mg.check_policy(nu, Side::Min)?;
    let cells = mg.cells();
    let mut dist = vec![0.0; mg.horizon * cells];
    let mut state = vec![0.0; mg.num_states];
    state[mg.initial_state] = 1.0;
    for h in 0..mg.horizon {
        let mut next = vec![0.0; mg.num_states];
        for x in 0..mg.num_states {
            if state[x] == 0.0 {
                continue;
            }
            let (pa, pb) = (mu.row(h, x), nu.row(h, x));
            for a in 0..mg.num_a {
                for b in 0..mg.num_b {
                    let d = state[x] * pa[a] * pb[b];
                    dist[h * cells + mg.cell(x, a, b)] = d;
                    if d != 0.0 {
                        for (n, p) in next.iter_mut().zip(mg.next_dist(h, x, a, b)) {
                            *n += d * p;
                        }
                    }
                }
            }
        }
        state = next;
    }
    Ok(OccupancyMeasure {
        horizon: mg.horizon,
        cells,
        dist,
    })
}

/// State-value table over `horizon + 1` steps; the terminal row is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    horizon: usize,
    num_states: usize,
    values: Vec<f64>,
}

impl ValueTable {
    pub fn zeros(horizon: usize, num_states: usize) -> Self {
        ValueTable {
            horizon,
            num_states,
            values: vec![0.0; (horizon + 1) * num_states],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Values at step `h` (`h == horizon` is the zero terminal row).
    pub fn step(&self, h: usize) -> &[f64] {
        &self.values[h * self.num_states..(h + 1) * self.num_states]
    }

    pub fn step_mut(&mut self, h: usize) -> &mut [f64] {
        &mut self.values[h * self.num_states..(h + 1) * self.num_states]
    }

    pub fn get(&self, h: usize, x: usize) -> f64 {
        self.values[h * self.num_states + x]
    }
}

/// `mu^T M nu` for a flat row-major `m x n` matrix.
pub(crate) fn bilinear(mu: &[f64], matrix: &[f64], nu: &[f64]) -> f64 {
    let n = nu.len();
    mu.iter()
        .enumerate()
        .filter(|(_, &p)| p != 0.0)
        .map(|(a, &p)| {
            p * matrix[a * n..(a + 1) * n]
                .iter()
                .zip(nu)
                .map(|(m, q)| m * q)
                .sum::<f64>()
        })
        .sum()
}

/// Exact `V^{mu,nu}` by backward induction.
pub fn policy_value(mg: &TabularMG, mu: &MarkovPolicy, nu: &MarkovPolicy) -> Result<ValueTable> {
    mg.check_policy(mu, Side::Max)?;
    mg.check_policy(nu, Side::Min)?;
    let mut v = ValueTable::zeros(mg.horizon, mg.num_states);
    let ab = mg.num_a * mg.num_b;
    for h in (0..mg.horizon).rev() {
        let q = mg.backup(h, v.step(h + 1));
        let vals: Vec<f64> = (0..mg.num_states)
            .map(|x| bilinear(mu.row(h, x), &q[x * ab..(x + 1) * ab], nu.row(h, x)))
            .collect();
        v.step_mut(h).copy_from_slice(&vals);
    }
    Ok(v)
}
