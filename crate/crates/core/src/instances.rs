//! Seeded generators for benchmark games.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::class::{QFunction, QLayer};
use crate::game::TabularMG;
use crate::{Error, Result};

/// Horizon and cardinalities of a game.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub horizon: usize,
    pub num_states: usize,
    pub num_a: usize,
    pub num_b: usize,
}

impl Dims {
    pub fn new(horizon: usize, num_states: usize, num_a: usize, num_b: usize) -> Self {
        Dims {
            horizon,
            num_states,
            num_a,
            num_b,
        }
    }

    /// `|X| |A| |B|`.
    pub fn cells_per_step(&self) -> usize {
        self.num_states * self.num_a * self.num_b
    }

    fn check(&self) -> Result<()> {
        if self.horizon == 0 || self.num_states == 0 || self.num_a == 0 || self.num_b == 0 {
            return Err(Error::dims("horizon and all cardinalities must be positive"));
        }
        Ok(())
    }
}

/// A draw from the symmetric Dirichlet(1, ..., 1), i.e. uniform on the simplex.
pub fn dirichlet_ones<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|v| v / total).collect()
}

/// Random tabular game: uniform rewards, each zeroed with probability
/// `reward_sparsity`, and Dirichlet(1) transition rows. Starts in state 0.
///
/// # Panics
/// If a cardinality is zero or `reward_sparsity` is outside `[0, 1]`.
pub fn gen_random_tabular(dims: Dims, reward_sparsity: f64, seed: u64) -> TabularMG {
    dims.check().expect("positive dimensions");
    assert!((0.0..=1.0).contains(&reward_sparsity), "reward sparsity must lie in [0, 1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = dims.horizon * dims.cells_per_step();
    let mut reward = Vec::with_capacity(cells);
    for _ in 0..cells {
        let r: f64 = rng.random();
        let keep = rng.random::<f64>() >= reward_sparsity;
        reward.push(if keep { r } else { 0.0 });
    }
    let mut transition = Vec::with_capacity(cells * dims.num_states);
    for _ in 0..cells {
        transition.extend(dirichlet_ones(dims.num_states, &mut rng));
    }
    TabularMG::from_flat(
        dims.horizon,
        dims.num_states,
        dims.num_a,
        dims.num_b,
        0,
        reward,
        transition,
    )
    .expect("generator emits valid tables")
}

/// How features of a linear game are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// Uniform on the `d`-simplex for every `(h, x, a, b)`.
    Dirichlet,
    /// Indicator of the `(x, a, b)` cell; requires `d = |X| |A| |B|`.
    OneHot,
}

/// Parameters of a linear game: `r_h = phi^T theta_h`,
/// `P_h(x' | x, a, b) = sum_j phi_j(x, a, b) psi_{h, j}(x')`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearMGSpec {
    pub d: usize,
    /// `[h][x][a][b]` feature vectors on the simplex.
    pub phi: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
    /// `[h]` reward parameters in `[0, 1]^d`.
    pub theta: Vec<Vec<f64>>,
    /// `[h][j]` next-state distributions.
    pub anchors: Vec<Vec<Vec<f64>>>,
}

impl LinearMGSpec {
    /// Reward and transition tables implied by the parameters, flat as in [`TabularMG`].
    pub fn materialize(&self) -> (Vec<f64>, Vec<f64>) {
        let mut reward = Vec::new();
        let mut transition = Vec::new();
        for (h, step) in self.phi.iter().enumerate() {
            let num_states = self.anchors[h][0].len();
            for cell in step.iter().flatten().flatten() {
                reward.push(dot(cell, &self.theta[h]));
                for xn in 0..num_states {
                    transition.push(
                        cell.iter()
                            .zip(&self.anchors[h])
                            .map(|(w, psi)| w * psi[xn])
                            .sum::<f64>(),
                    );
                }
            }
        }
        (reward, transition)
    }

    /// Largest absolute deviation between `mg`'s tables and the reconstruction.
    pub fn reconstruction_error(&self, mg: &TabularMG) -> f64 {
        let (reward, transition) = self.materialize();
        let dev = |a: &[f64], b: &[f64]| {
            if a.len() != b.len() {
                return f64::INFINITY;
            }
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        };
        dev(&reward, mg.reward_flat()).max(dev(&transition, mg.transition_flat()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random linear game of dimension `d`. Features and anchors live on simplices,
/// so every induced kernel row is a distribution and, with `theta` in
/// `[0, 1]^d`, every reward lies in `[0, 1]`.
pub fn gen_linear_mg(seed: u64, d: usize, dims: Dims, kind: FeatureKind) -> Result<(TabularMG, LinearMGSpec)> {
    dims.check()?;
    let cells = dims.cells_per_step();
    if d == 0 || d > cells {
        return Err(Error::pre(format!("feature dimension {d} must lie in 1..={cells}")));
    }
    if kind == FeatureKind::OneHot && d != cells {
        return Err(Error::pre(format!("one-hot features need d = {cells}, got {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phi = Vec::with_capacity(dims.horizon);
    let mut theta = Vec::with_capacity(dims.horizon);
    let mut anchors = Vec::with_capacity(dims.horizon);
    for _ in 0..dims.horizon {
        let mut cell = 0;
        let step: Vec<Vec<Vec<Vec<f64>>>> = (0..dims.num_states)
            .map(|_| {
                (0..dims.num_a)
                    .map(|_| {
                        (0..dims.num_b)
                            .map(|_| {
                                let v = match kind {
                                    FeatureKind::Dirichlet => dirichlet_ones(d, &mut rng),
                                    FeatureKind::OneHot => {
                                        let mut e = vec![0.0; d];
                                        e[cell] = 1.0;
                                        e
                                    }
                                };
                                cell += 1;
                                v
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        phi.push(step);
        theta.push((0..d).map(|_| rng.random::<f64>()).collect());
        anchors.push((0..d).map(|_| dirichlet_ones(dims.num_states, &mut rng)).collect());
    }
    let spec = LinearMGSpec {
        d,
        phi,
        theta,
        anchors,
    };
    let (mut reward, transition) = spec.materialize();
    // Convex combinations of values in [0, 1] can overshoot by an ulp.
    for r in &mut reward {
        *r = r.clamp(0.0, 1.0);
    }
    let mg = TabularMG::from_flat(
        dims.horizon,
        dims.num_states,
        dims.num_a,
        dims.num_b,
        0,
        reward,
        transition,
    )?;
    Ok((mg, spec))
}

/// Random Q-function for `mg` with entries uniform in `[0, beta - 1]`.
pub fn gen_random_qfunction(mg: &TabularMG, beta: f64, seed: u64) -> QFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (xn, an, bn) = (mg.num_states(), mg.num_a(), mg.num_b());
    QFunction::new(
        (0..mg.horizon())
            .map(|_| {
                let data = (0..xn * an * bn).map(|_| rng.random::<f64>() * (beta - 1.0)).collect();
                QLayer::from_flat(xn, an, bn, data)
            })
            .collect(),
    )
}
