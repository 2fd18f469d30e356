//! Exact chain-structured posteriors over a finite function class.
//!
//! Both agents' posteriors factor as a unary term on the first layer times
//! conditionals `q(f^h | f^{h+1})`, with a zero terminal layer. Sampling runs
//! a forward message pass followed by top-down ancestral draws, all in log
//! space.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;

use crate::class::{induced_min_value, FunctionClass};
use crate::game::{inverse_cdf, MarkovPolicy, Side, Trajectory};
use crate::{Error, Result};

/// Default cap on the number of atoms [`enumerate_posterior`] will visit.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// Numerically stable `ln sum_i exp(v_i)`; `-inf` for empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_trajectory(fc: &FunctionClass, traj: &Trajectory) -> Result<()> {
    let l = fc.layer(0, 0);
    if traj.steps.len() != fc.horizon() {
        return Err(Error::dims(format!(
            "trajectory has {} steps, class horizon is {}",
            traj.steps.len(),
            fc.horizon()
        )));
    }
    for (h, s) in traj.steps.iter().enumerate() {
        if s.state >= l.num_states() || s.a >= l.num_a() || s.b >= l.num_b() {
            return Err(Error::dims(format!("trajectory step {h} is outside the class tables")));
        }
        if !s.reward.is_finite() {
            return Err(Error::NonFinite(format!("reward at trajectory step {h}")));
        }
    }
    Ok(())
}

/// Cumulative squared `T_h`-losses for every `(f^h_i, f^{h+1}_j)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LossLedger {
    initial_state: usize,
    episodes: usize,
    /// Per `h`, flat `(i, j)` with `next_sizes[h]` columns.
    cum_loss: Vec<Vec<f64>>,
    next_sizes: Vec<usize>,
    /// Per `h`, flat `(j, x)` values `V_{f_j^{h+1}}(x)`; a single zero row at the last step.
    next_values: Vec<Vec<f64>>,
    num_states: usize,
}

impl LossLedger {
    /// Empty ledger (`t = 0`).
    pub fn new(fc: &FunctionClass, initial_state: usize) -> Self {
        let hn = fc.horizon();
        let xn = fc.layer(0, 0).num_states();
        let next_sizes: Vec<usize> = (0..hn)
            .map(|h| if h + 1 < hn { fc.size(h + 1) } else { 1 })
            .collect();
        let next_values = (0..hn)
            .map(|h| {
                if h + 1 < hn {
                    (0..fc.size(h + 1))
                        .flat_map(|j| (0..xn).map(move |x| fc.game_value(h + 1, j, x)))
                        .collect()
                } else {
                    vec![0.0; xn]
                }
            })
            .collect();
        LossLedger {
            initial_state,
            episodes: 0,
            cum_loss: (0..hn).map(|h| vec![0.0; fc.size(h) * next_sizes[h]]).collect(),
            next_sizes,
            next_values,
            num_states: xn,
        }
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    /// Number of absorbed episodes `t`.
    pub fn episodes(&self) -> usize {
        self.episodes
    }

    /// Flat `(i, j)` table `L^h(f_i^h, f_j^{h+1}; S_t)`.
    pub fn cum_loss(&self, h: usize) -> &[f64] {
        &self.cum_loss[h]
    }

    /// Number of successor candidates at step `h` (1 at the last step).
    pub fn next_size(&self, h: usize) -> usize {
        self.next_sizes[h]
    }

    /// Adds one squared residual per `(h, i, j)` cell.
    pub fn absorb(&mut self, fc: &FunctionClass, traj: &Trajectory) -> Result<()> {
        check_trajectory(fc, traj)?;
        if fc.sizes().iter().zip(&self.cum_loss).zip(&self.next_sizes).any(|((n, c), m)| n * m != c.len()) {
            return Err(Error::dims("ledger was built for a different class"));
        }
        for (h, s) in traj.steps.iter().enumerate() {
            let m = self.next_sizes[h];
            let xn = traj.next_state(h).unwrap_or(0);
            let next: Vec<f64> = (0..m)
                .map(|j| self.next_values[h][j * self.num_states + xn])
                .collect();
            for (i, member) in fc.members(h).iter().enumerate() {
                let fi = member.get(s.state, s.a, s.b);
                for (cell, v) in self.cum_loss[h][i * m..(i + 1) * m].iter_mut().zip(&next) {
                    let e = fi - s.reward - v;
                    *cell += e * e;
                }
            }
        }
        self.episodes += 1;
        Ok(())
    }
}

/// Functional form of [`LossLedger::absorb`].
pub fn update_ledger(mut ledger: LossLedger, zeta: &Trajectory, fc: &FunctionClass) -> Result<LossLedger> {
    ledger.absorb(fc, zeta)?;
    Ok(ledger)
}

/// Transition key `(h, x, a, b, x')`; `x'` is `None` after the last step.
type TransitionKey = (usize, usize, usize, usize, Option<usize>);

/// The history `S_t` plus visit counts per observed transition.
///
/// Rewards are deterministic, so the booster loss only depends on how often
/// each `(h, x, a, b, x')` was seen.
#[derive(Clone, Debug, Default)]
pub struct History {
    initial_state: usize,
    trajectories: Vec<Trajectory>,
    counts: BTreeMap<TransitionKey, (u64, f64)>,
}

impl History {
    pub fn new(initial_state: usize) -> Self {
        History {
            initial_state,
            ..Default::default()
        }
    }

    pub fn from_trajectories(initial_state: usize, trajectories: &[Trajectory]) -> Self {
        let mut h = History::new(initial_state);
        for t in trajectories {
            h.push(t.clone());
        }
        h
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn push(&mut self, traj: Trajectory) {
        for (h, s) in traj.steps.iter().enumerate() {
            let entry = self
                .counts
                .entry((h, s.state, s.a, s.b, traj.next_state(h)))
                .or_insert((0, s.reward));
            entry.0 += 1;
        }
        self.trajectories.push(traj);
    }
}

/// Log-space chain `p(f) ∝ exp(unary(f^1)) prod_h q_h(f^h | f^{h+1})`.
#[derive(Clone, Debug)]
pub struct PosteriorChain {
    sizes: Vec<usize>,
    unary: Vec<f64>,
    /// Per `h`, flat `(i, j)` with `next_sizes[h]` columns.
    log_q: Vec<Vec<f64>>,
    next_sizes: Vec<usize>,
    /// `incoming[h][i]`: log mass flowing into candidate `i` of layer `h` from below.
    incoming: Vec<Vec<f64>>,
    log_norm: f64,
}

impl PosteriorChain {
    /// Assembles a chain from a unary term and per-step pair losses.
    ///
    /// `log_q(i|j) = ln p0(i) - eta L(i, j) - logsumexp_i' (ln p0(i') - eta L(i', j))`.
    fn from_losses(fc: &FunctionClass, unary: Vec<f64>, losses: &[Vec<f64>], eta: f64) -> Result<Self> {
        let hn = fc.horizon();
        let sizes = fc.sizes();
        let next_sizes: Vec<usize> = (0..hn).map(|h| if h + 1 < hn { sizes[h + 1] } else { 1 }).collect();
        let mut log_q = Vec::with_capacity(hn);
        for h in 0..hn {
            let (n, m) = (sizes[h], next_sizes[h]);
            let lp = fc.log_prior(h);
            let mut table = vec![0.0; n * m];
            let mut column = vec![0.0; n];
            for j in 0..m {
                for i in 0..n {
                    column[i] = lp[i] - eta * losses[h][i * m + j];
                }
                let z = log_sum_exp(&column);
                for i in 0..n {
                    table[i * m + j] = column[i] - z;
                }
            }
            log_q.push(table);
        }
        let mut chain = PosteriorChain {
            sizes,
            unary,
            log_q,
            next_sizes,
            incoming: Vec::new(),
            log_norm: 0.0,
        };
        chain.pass_messages();
        Ok(chain)
    }

    fn pass_messages(&mut self) {
        let hn = self.sizes.len();
        let mut incoming = vec![self.unary.clone()];
        for h in 0..hn {
            let (n, m) = (self.sizes[h], self.next_sizes[h]);
            let mut terms = vec![0.0; n];
            let msg: Vec<f64> = (0..m)
                .map(|k| {
                    for i in 0..n {
                        terms[i] = incoming[h][i] + self.log_q[h][i * m + k];
                    }
                    log_sum_exp(&terms)
                })
                .collect();
            incoming.push(msg);
        }
        self.log_norm = incoming[hn][0];
        incoming.truncate(hn);
        self.incoming = incoming;
    }

    pub fn horizon(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn unary(&self) -> &[f64] {
        &self.unary
    }

    /// `ln q_h(i | j)`; at the last step `j` must be 0.
    pub fn log_q(&self, h: usize, i: usize, j: usize) -> f64 {
        self.log_q[h][i * self.next_sizes[h] + j]
    }

    /// Number of successor columns at step `h`.
    pub fn next_size(&self, h: usize) -> usize {
        self.next_sizes[h]
    }

    /// `ln Z` of the unnormalised joint.
    pub fn log_normalizer(&self) -> f64 {
        self.log_norm
    }

    /// Unnormalised log weight of an index vector.
    fn log_weight(&self, idx: &[usize]) -> f64 {
        let hn = self.horizon();
        let mut w = self.unary[idx[0]];
        for h in 0..hn {
            let j = if h + 1 < hn { idx[h + 1] } else { 0 };
            w += self.log_q(h, idx[h], j);
        }
        w
    }

    /// Normalised joint log-probability of one candidate per layer.
    pub fn log_prob(&self, idx: &[usize]) -> Result<f64> {
        if idx.len() != self.horizon() || idx.iter().zip(&self.sizes).any(|(i, n)| i >= n) {
            return Err(Error::dims("index vector does not match the chain"));
        }
        Ok(self.log_weight(idx) - self.log_norm)
    }

    /// Conditional distribution of layer `h` given its successor `k`.
    fn conditional(&self, h: usize, k: usize) -> Vec<f64> {
        let m = self.next_sizes[h];
        let logits: Vec<f64> = (0..self.sizes[h])
            .map(|i| self.incoming[h][i] + self.log_q[h][i * m + k])
            .collect();
        let z = log_sum_exp(&logits);
        logits.into_iter().map(|l| (l - z).exp()).collect()
    }

    /// Exact marginal of the last layer, read off the messages.
    pub fn last_layer_marginal(&self) -> Vec<f64> {
        self.conditional(self.horizon() - 1, 0)
    }

    /// Exact joint draw, one candidate index per layer.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let hn = self.horizon();
        let mut idx = vec![0; hn];
        let mut k = 0;
        for h in (0..hn).rev() {
            let p = self.conditional(h, k);
            idx[h] = inverse_cdf(&p, rng.random::<f64>());
            k = idx[h];
        }
        idx
    }
}

/// Draws one index vector from `chain`.
pub fn sample_chain<R: Rng + ?Sized>(chain: &PosteriorChain, rng: &mut R) -> Vec<usize> {
    chain.sample(rng)
}

fn check_hyper(eta: f64, lambda: f64) -> Result<()> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidHyperParams(format!("eta must be finite and > 0, got {eta}")));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidHyperParams(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

/// Main agent's posterior: optimistic unary `lambda V_{f,1}(x^1)` and `T_h`-losses from `ledger`.
pub fn build_main_posterior(
    fc: &FunctionClass,
    ledger: &LossLedger,
    eta: f64,
    lambda: f64,
) -> Result<PosteriorChain> {
    check_hyper(eta, lambda)?;
    let x1 = ledger.initial_state;
    let unary = (0..fc.size(0)).map(|i| lambda * fc.game_value(0, i, x1)).collect();
    PosteriorChain::from_losses(fc, unary, &ledger.cum_loss, eta)
}

/// Booster losses `L^h_mu(g_i^h, g_j^{h+1}; history)` for every step.
pub fn booster_losses(fc: &FunctionClass, mu: &MarkovPolicy, history: &History) -> Result<Vec<Vec<f64>>> {
    let hn = fc.horizon();
    let l0 = fc.layer(0, 0);
    let xn = l0.num_states();
    if mu.side() != Side::Max {
        return Err(Error::WrongSide {
            expected: Side::Max.name(),
            found: mu.side().name(),
        });
    }
    if mu.horizon() != hn || mu.num_states() != xn || mu.num_actions() != l0.num_a() {
        return Err(Error::dims("policy does not match the class"));
    }
    if let Some(t) = history.trajectories.last() {
        check_trajectory(fc, t)?;
    }
    let mut losses: Vec<Vec<f64>> = (0..hn)
        .map(|h| vec![0.0; fc.size(h) * if h + 1 < hn { fc.size(h + 1) } else { 1 }])
        .collect();
    // V^mu_{g_j^{h+1}}(x') for every successor candidate and state.
    let next_values: Vec<Vec<f64>> = (0..hn)
        .map(|h| {
            if h + 1 < hn {
                fc.members(h + 1)
                    .iter()
                    .flat_map(|g| (0..xn).map(move |x| induced_min_value(g, mu, h + 1, x)))
                    .collect()
            } else {
                vec![0.0; xn]
            }
        })
        .collect();
    for (&(h, x, a, b, next), &(count, r)) in &history.counts {
        let m = if h + 1 < hn { fc.size(h + 1) } else { 1 };
        let xn_idx = next.unwrap_or(0);
        let c = count as f64;
        for (i, g) in fc.members(h).iter().enumerate() {
            let gi = g.get(x, a, b);
            for j in 0..m {
                let e = gi - r - next_values[h][j * xn + xn_idx];
                losses[h][i * m + j] += c * e * e;
            }
        }
    }
    Ok(losses)
}

/// Booster posterior for a fixed max-player policy `mu` over the history:
/// pessimistic unary `-lambda V^mu_{g,1}(x^1)` and `T_h^mu`-losses.
pub fn build_booster_posterior(
    fc: &FunctionClass,
    mu: &MarkovPolicy,
    history: &History,
    eta: f64,
    lambda: f64,
) -> Result<PosteriorChain> {
    check_hyper(eta, lambda)?;
    let losses = booster_losses(fc, mu, history)?;
    let x1 = history.initial_state;
    let unary = fc
        .members(0)
        .iter()
        .map(|g| -lambda * induced_min_value(g, mu, 0, x1))
        .collect();
    PosteriorChain::from_losses(fc, unary, &losses, eta)
}

/// Every index vector with its normalised log-probability, computed by brute
/// force from the chain factors (not from the messages).
pub fn enumerate_posterior(chain: &PosteriorChain, cap: u128) -> Result<Vec<(Vec<usize>, f64)>> {
    let atoms: u128 = chain.sizes.iter().map(|&n| n as u128).product();
    if atoms > cap {
        return Err(Error::EnumerationCap { atoms, cap });
    }
    let hn = chain.horizon();
    let mut out = Vec::with_capacity(atoms as usize);
    let mut idx = vec![0; hn];
    loop {
        out.push((idx.clone(), chain.log_weight(&idx)));
        // Odometer increment, last layer fastest.
        let mut h = hn;
        loop {
            if h == 0 {
                let weights: Vec<f64> = out.iter().map(|(_, w)| *w).collect();
                let z = log_sum_exp(&weights);
                for (_, w) in &mut out {
                    *w -= z;
                }
                return Ok(out);
            }
            h -= 1;
            idx[h] += 1;
            if idx[h] < chain.sizes[h] {
                break;
            }
            idx[h] = 0;
        }
    }
}

/// Writes enumerated atoms as CSV rows `episode,layer_1..layer_H,log_prob`.
pub fn write_posterior_csv<W: Write>(
    out: &mut W,
    episode: usize,
    atoms: &[(Vec<usize>, f64)],
    header: bool,
) -> Result<()> {
    if header {
        let hn = atoms.first().map_or(0, |(i, _)| i.len());
        let cols: Vec<String> = (1..=hn).map(|h| format!("layer_{h}")).collect();
        writeln!(out, "episode,{},log_prob", cols.join(","))?;
    }
    for (idx, lp) in atoms {
        let cols: Vec<String> = idx.iter().map(usize::to_string).collect();
        writeln!(out, "{episode},{},{}", cols.join(","), crate::format::fmt_g12(*lp))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::class::{QLayer, build_closure_class, ClosureOptions};
    use crate::game::{sample_episode, Step, TabularMG};
    use crate::instances::{gen_random_qfunction, gen_random_tabular, Dims};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_class(h: usize, n: usize, seed: u64) -> FunctionClass {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..h)
            .map(|_| {
                (0..n)
                    .map(|_| QLayer::from_flat(2, 2, 2, (0..8).map(|_| rng.random::<f64>() * 2.0).collect()))
                    .collect()
            })
            .collect();
        let prior = (0..h)
            .map(|_| crate::instances::dirichlet_ones(n, &mut rng))
            .collect();
        FunctionClass::new(3.0, layers, prior).unwrap()
    }

    fn random_trajectory(h: usize, seed: u64) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Trajectory {
            episode: 0,
            steps: (0..h)
                .map(|_| Step {
                    state: rng.random_range(0..2),
                    a: rng.random_range(0..2),
                    b: rng.random_range(0..2),
                    reward: rng.random(),
                })
                .collect(),
        }
    }

    #[test]
    fn log_sum_exp_edge_cases() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_sum_exp(&[-1000.0, 0.0]) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn first_episode_cells_are_single_residuals() {
        let fc = random_class(3, 3, 1);
        let traj = random_trajectory(3, 2);
        let ledger = update_ledger(LossLedger::new(&fc, 0), &traj, &fc).unwrap();
        assert_eq!(ledger.episodes(), 1);
        for h in 0..3 {
            let s = traj.steps[h];
            let m = ledger.next_size(h);
            for i in 0..3 {
                for j in 0..m {
                    let v = match traj.next_state(h) {
                        Some(x) => fc.game_value(h + 1, j, x),
                        None => 0.0,
                    };
                    let e = fc.layer(h, i).get(s.state, s.a, s.b) - s.reward - v;
                    assert_eq!(ledger.cum_loss(h)[i * m + j], e * e);
                }
            }
        }
    }

    #[test]
    fn exact_fit_cell_is_zero() {
        // Layer 0 member 0 is built to match r + V_{f_0^1}(x') at the visited triple.
        let next = QLayer::from_flat(1, 1, 1, vec![0.25]);
        let fit = QLayer::from_flat(1, 1, 1, vec![0.75]);
        let off = QLayer::from_flat(1, 1, 1, vec![0.1]);
        let fc = FunctionClass::uniform(2.0, vec![vec![fit, off], vec![next]]).unwrap();
        let traj = Trajectory {
            episode: 0,
            steps: vec![
                Step { state: 0, a: 0, b: 0, reward: 0.5 },
                Step { state: 0, a: 0, b: 0, reward: 0.25 },
            ],
        };
        let ledger = update_ledger(LossLedger::new(&fc, 0), &traj, &fc).unwrap();
        assert_eq!(ledger.cum_loss(0)[0], 0.0);
        assert!(ledger.cum_loss(0)[1] > 0.0);
        assert_eq!(ledger.cum_loss(1)[0], 0.0);
    }

    #[test]
    fn incremental_ledger_matches_scratch_sum() {
        let fc = random_class(3, 3, 3);
        let trajs: Vec<Trajectory> = (0..3).map(|s| random_trajectory(3, 10 + s)).collect();
        let mut ledger = LossLedger::new(&fc, 0);
        for t in &trajs {
            ledger.absorb(&fc, t).unwrap();
        }
        for h in 0..3 {
            let m = ledger.next_size(h);
            for i in 0..3 {
                for j in 0..m {
                    let want: f64 = trajs
                        .iter()
                        .map(|t| {
                            let s = t.steps[h];
                            let v = t.next_state(h).map_or(0.0, |x| fc.game_value(h + 1, j, x));
                            (fc.layer(h, i).get(s.state, s.a, s.b) - s.reward - v).powi(2)
                        })
                        .sum();
                    assert!((ledger.cum_loss(h)[i * m + j] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ledger_rejects_foreign_trajectory() {
        let fc = random_class(2, 2, 4);
        let mut ledger = LossLedger::new(&fc, 0);
        assert!(ledger.absorb(&fc, &random_trajectory(3, 1)).is_err());
        let mut t = random_trajectory(2, 1);
        t.steps[0].state = 5;
        assert!(ledger.absorb(&fc, &t).is_err());
        assert_eq!(ledger.episodes(), 0);
    }

    #[test]
    fn empty_data_no_optimism_is_prior() {
        let fc = random_class(3, 3, 5);
        let chain = build_main_posterior(&fc, &LossLedger::new(&fc, 0), 0.5, 0.0).unwrap();
        for (idx, lp) in enumerate_posterior(&chain, DEFAULT_ENUMERATION_CAP).unwrap() {
            let want: f64 = (0..3).map(|h| fc.log_prior(h)[idx[h]]).sum();
            assert!((lp - want).abs() < 1e-12);
        }
        let mu = MarkovPolicy::uniform(Side::Max, 3, 2, 2);
        let chain = build_booster_posterior(&fc, &mu, &History::new(0), 0.5, 0.0).unwrap();
        for (idx, lp) in enumerate_posterior(&chain, DEFAULT_ENUMERATION_CAP).unwrap() {
            let want: f64 = (0..3).map(|h| fc.log_prior(h)[idx[h]]).sum();
            assert!((lp - want).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_is_a_softmax() {
        let a = QLayer::from_flat(1, 1, 1, vec![0.2]);
        let b = QLayer::from_flat(1, 1, 1, vec![0.9]);
        let fc = FunctionClass::uniform(2.0, vec![vec![a, b]]).unwrap();
        let traj = Trajectory {
            episode: 0,
            steps: vec![Step { state: 0, a: 0, b: 0, reward: 0.5 }],
        };
        let mut ledger = LossLedger::new(&fc, 0);
        ledger.absorb(&fc, &traj).unwrap();
        ledger.absorb(&fc, &traj).unwrap();
        let eta = 0.7;
        let (l1, l2) = (2.0 * 0.3f64.powi(2), 2.0 * 0.4f64.powi(2));
        let p1 = (-eta * l1).exp() / ((-eta * l1).exp() + (-eta * l2).exp());
        let chain = build_main_posterior(&fc, &ledger, eta, 0.0).unwrap();
        assert!((chain.log_prob(&[0]).unwrap().exp() - p1).abs() < 1e-12);
        assert!((chain.log_prob(&[1]).unwrap().exp() - (1.0 - p1)).abs() < 1e-12);
    }

    #[test]
    fn conditionals_are_normalised() {
        let fc = random_class(3, 4, 6);
        let mut ledger = LossLedger::new(&fc, 1);
        for s in 0..20 {
            ledger.absorb(&fc, &random_trajectory(3, s)).unwrap();
            let chain = build_main_posterior(&fc, &ledger, 0.3, 2.0).unwrap();
            for h in 0..3 {
                for j in 0..chain.next_size(h) {
                    let col: Vec<f64> = (0..4).map(|i| chain.log_q(h, i, j)).collect();
                    assert!(log_sum_exp(&col).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn enumeration_normalises_and_matches_messages() {
        let fc = random_class(3, 3, 7);
        let mut ledger = LossLedger::new(&fc, 0);
        for s in 0..5 {
            ledger.absorb(&fc, &random_trajectory(3, 100 + s)).unwrap();
        }
        let chain = build_main_posterior(&fc, &ledger, 0.25, 1.5).unwrap();
        let atoms = enumerate_posterior(&chain, DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(atoms.len(), 27);
        let lps: Vec<f64> = atoms.iter().map(|(_, l)| *l).collect();
        assert!(log_sum_exp(&lps).abs() < 1e-9);
        for (idx, lp) in &atoms {
            assert!((chain.log_prob(idx).unwrap() - lp).abs() < 1e-10);
        }
        let mut marginal = [0.0; 3];
        for (idx, lp) in &atoms {
            marginal[idx[2]] += lp.exp();
        }
        for (a, b) in marginal.iter().zip(chain.last_layer_marginal()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn enumeration_cap() {
        let fc = random_class(3, 4, 8);
        let chain = build_main_posterior(&fc, &LossLedger::new(&fc, 0), 0.25, 0.0).unwrap();
        assert!(matches!(
            enumerate_posterior(&chain, 63),
            Err(Error::EnumerationCap { atoms: 64, cap: 63 })
        ));
    }

    #[test]
    fn unique_maximiser_dominates_with_large_lambda() {
        let fc = random_class(2, 3, 9);
        let best = (0..3)
            .max_by(|&a, &b| fc.game_value(0, a, 0).total_cmp(&fc.game_value(0, b, 0)))
            .unwrap();
        let mut prev = 0.0;
        for lambda in [0.0, 1.0, 5.0, 20.0, 100.0, 1000.0] {
            let chain = build_main_posterior(&fc, &LossLedger::new(&fc, 0), 0.25, lambda).unwrap();
            let m: f64 = enumerate_posterior(&chain, DEFAULT_ENUMERATION_CAP)
                .unwrap()
                .iter()
                .filter(|(i, _)| i[0] == best)
                .map(|(_, l)| l.exp())
                .sum();
            assert!(m >= prev - 1e-12);
            prev = m;
        }
        assert!(prev > 1.0 - 1e-9);
    }

    #[test]
    fn booster_loss_against_constant_rows() {
        // mu is a point mass on action 1; every g^{h+1} row is constant, so
        // V^mu_{g_j} is that constant and the loss is a scalar square.
        let row = |c0: f64, c1: f64| QLayer::from_flat(1, 2, 2, vec![c0, c0, c1, c1]);
        let fc = FunctionClass::uniform(3.0, vec![vec![row(0.3, 0.6)], vec![row(0.1, 0.4), row(0.2, 0.9)]]).unwrap();
        let mu = MarkovPolicy::from_flat(Side::Max, 2, 1, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let traj = Trajectory {
            episode: 0,
            steps: vec![
                Step { state: 0, a: 0, b: 1, reward: 0.05 },
                Step { state: 0, a: 1, b: 0, reward: 0.35 },
            ],
        };
        let history = History::from_trajectories(0, &[traj.clone(), traj]);
        let losses = booster_losses(&fc, &mu, &history).unwrap();
        assert!((losses[0][0] - 2.0 * (0.3 - 0.05 - 0.4f64).powi(2)).abs() < 1e-15);
        assert!((losses[0][1] - 2.0 * (0.3 - 0.05 - 0.9f64).powi(2)).abs() < 1e-15);
        assert!((losses[1][0] - 2.0 * (0.4 - 0.35f64).powi(2)).abs() < 1e-15);
        assert!((losses[1][1] - 2.0 * (0.9 - 0.35f64).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn booster_matches_brute_force() {
        let fc = random_class(2, 2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mu = MarkovPolicy::random(Side::Max, 2, 2, 2, &mut rng);
        let traj = random_trajectory(2, 4);
        let history = History::from_trajectories(0, std::slice::from_ref(&traj));
        let (eta, lambda) = (0.3, 0.8);
        let chain = build_booster_posterior(&fc, &mu, &history, eta, lambda).unwrap();
        // Direct evaluation of the booster posterior over all four functions.
        let mut logw = Vec::new();
        for i0 in 0..2 {
            for i1 in 0..2 {
                let mut w = -lambda * induced_min_value(fc.layer(0, i0), &mu, 0, 0);
                for (h, k) in [(0, i0), (1, i1)] {
                    let s = traj.steps[h];
                    let loss = |i: usize| {
                        let v = if h == 0 {
                            induced_min_value(fc.layer(1, i1), &mu, 1, traj.next_state(0).unwrap())
                        } else {
                            0.0
                        };
                        (fc.layer(h, i).get(s.state, s.a, s.b) - s.reward - v).powi(2)
                    };
                    let denom: f64 = (0..2).map(|i| fc.prior(h)[i] * (-eta * loss(i)).exp()).sum();
                    w += (fc.prior(h)[k] * (-eta * loss(k)).exp() / denom).ln();
                }
                logw.push(((i0, i1), w));
            }
        }
        let z = log_sum_exp(&logw.iter().map(|(_, w)| *w).collect::<Vec<_>>());
        for ((i0, i1), w) in logw {
            assert!((chain.log_prob(&[i0, i1]).unwrap() - (w - z)).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let fc = random_class(2, 2, 12);
        let ledger = LossLedger::new(&fc, 0);
        assert!(build_main_posterior(&fc, &ledger, 0.0, 1.0).is_err());
        assert!(build_main_posterior(&fc, &ledger, f64::NAN, 1.0).is_err());
        assert!(build_main_posterior(&fc, &ledger, 0.1, f64::NAN).is_err());
        assert!(build_main_posterior(&fc, &ledger, 0.1, -1.0).is_err());
        let nu = MarkovPolicy::uniform(Side::Min, 2, 2, 2);
        assert!(build_booster_posterior(&fc, &nu, &History::new(0), 0.1, 1.0).is_err());
    }

    #[test]
    fn singleton_layers_sample_trivially() {
        let mg = gen_random_tabular(Dims::new(3, 2, 2, 2), 0.0, 1);
        let (fc, _) = build_closure_class(&mg, &[], &ClosureOptions::new(4.0)).unwrap();
        assert_eq!(fc.sizes(), vec![1, 1, 1]);
        let chain = build_main_posterior(&fc, &LossLedger::new(&fc, 0), 0.1, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(sample_chain(&chain, &mut rng), vec![0, 0, 0]);
        }
        assert!(chain.log_prob(&[0, 0, 0]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn prior_sampling_is_uniform() {
        let mg = gen_random_tabular(Dims::new(2, 2, 2, 2), 0.0, 2);
        let layers = (0..2)
            .map(|h| (0..4).map(|s| gen_random_qfunction(&mg, 3.0, s).layer(h).clone()).collect())
            .collect();
        let fc = FunctionClass::uniform(3.0, layers).unwrap();
        let chain = build_main_posterior(&fc, &LossLedger::new(&fc, 0), 0.1, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 50_000;
        let mut counts = [[0usize; 4]; 2];
        for _ in 0..n {
            let idx = chain.sample(&mut rng);
            counts[0][idx[0]] += 1;
            counts[1][idx[1]] += 1;
        }
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        for layer in counts {
            for c in layer {
                assert!((c as f64 - n as f64 / 4.0).abs() < 4.0 * sd);
            }
        }
    }

    #[test]
    fn zero_residual_pair_gains_mass() {
        let next = |v: f64| QLayer::from_flat(1, 1, 1, vec![v]);
        let fc = FunctionClass::uniform(
            3.0,
            vec![vec![next(0.9), next(1.2), next(0.4)], vec![next(0.4), next(0.7)]],
        )
        .unwrap();
        // (0, 0) fits 0.5 + 0.4 and 0.4; every other pair has a positive residual.
        let traj = Trajectory {
            episode: 0,
            steps: vec![
                Step { state: 0, a: 0, b: 0, reward: 0.5 },
                Step { state: 0, a: 0, b: 0, reward: 0.4 },
            ],
        };
        let mut ledger = LossLedger::new(&fc, 0);
        let mass = |l: &LossLedger| {
            build_main_posterior(&fc, l, 0.5, 0.0).unwrap().log_prob(&[0, 0]).unwrap()
        };
        let before = mass(&ledger);
        ledger.absorb(&fc, &traj).unwrap();
        assert!(mass(&ledger) > before);
    }

    #[test]
    fn csv_dump_layout() {
        let fc = random_class(2, 2, 13);
        let chain = build_main_posterior(&fc, &LossLedger::new(&fc, 0), 0.1, 0.0).unwrap();
        let atoms = enumerate_posterior(&chain, 10).unwrap();
        let mut buf = Vec::new();
        write_posterior_csv(&mut buf, 3, &atoms, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "episode,layer_1,layer_2,log_prob");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("3,0,0,"));
    }

    #[test]
    fn history_counts_aggregate_transitions() {
        let mg: TabularMG = gen_random_tabular(Dims::new(3, 2, 2, 2), 0.0, 3);
        let mu = MarkovPolicy::uniform(Side::Max, 3, 2, 2);
        let nu = MarkovPolicy::uniform(Side::Min, 3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut history = History::new(0);
        for t in 0..40 {
            history.push(sample_episode(&mg, &mu, &nu, t, &mut rng).unwrap());
        }
        let total: u64 = history.counts.values().map(|(c, _)| c).sum();
        assert_eq!(total, 120);
        assert_eq!(history.len(), 40);
    }
}
