//! Finite hypothesis classes `F = F_1 x ... x F_H` over per-step Q-tables.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::game::{MarkovPolicy, Side, TabularMG, ValueTable};
use crate::matrix::{self, MatrixGameSolution};
use crate::oracle::{self, best_response, solve_nash};
use crate::{Error, Result};

/// One step of a Q-function: a flat `(x, a, b)` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QLayer {
    num_states: usize,
    num_a: usize,
    num_b: usize,
    data: Vec<f64>,
}

impl QLayer {
    pub fn zeros(num_states: usize, num_a: usize, num_b: usize) -> Self {
        QLayer {
            num_states,
            num_a,
            num_b,
            data: vec![0.0; num_states * num_a * num_b],
        }
    }

    /// # Panics
    /// If `data` does not hold `num_states * num_a * num_b` entries.
    pub fn from_flat(num_states: usize, num_a: usize, num_b: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), num_states * num_a * num_b, "layer size");
        QLayer {
            num_states,
            num_a,
            num_b,
            data,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, a: usize, b: usize) -> f64 {
        self.data[(x * self.num_a + a) * self.num_b + b]
    }

    /// The `a x b` payoff matrix at state `x`, row-major.
    pub fn matrix(&self, x: usize) -> &[f64] {
        let ab = self.num_a * self.num_b;
        &self.data[x * ab..(x + 1) * ab]
    }

    /// Matrix-game solution at every state.
    pub fn solve(&self) -> Vec<MatrixGameSolution> {
        (0..self.num_states)
            .map(|x| matrix::solve_flat(self.num_a, self.num_b, self.matrix(x)))
            .collect()
    }

    /// `V_f(x)`: the matrix-game value at every state.
    pub fn game_values(&self) -> Vec<f64> {
        self.solve().into_iter().map(|s| s.value).collect()
    }

    /// `V^mu_f(x) = min_b sum_a mu_h(a|x) f(x,a,b)` at every state.
    pub fn min_values(&self, mu: &MarkovPolicy, h: usize) -> Vec<f64> {
        (0..self.num_states)
            .map(|x| induced_min_value(self, mu, h, x))
            .collect()
    }

    /// `max |self - other|` over all cells.
    pub fn sup_distance(&self, other: &QLayer) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn check_game(&self, mg: &TabularMG) -> Result<()> {
        if self.num_states != mg.num_states() || self.num_a != mg.num_a() || self.num_b != mg.num_b()
        {
            return Err(Error::dims(format!(
                "layer is {}x{}x{}, game is {}x{}x{}",
                self.num_states,
                self.num_a,
                self.num_b,
                mg.num_states(),
                mg.num_a(),
                mg.num_b()
            )));
        }
        Ok(())
    }

    fn check_bounds(&self, beta: f64, location: impl Fn() -> String) -> Result<()> {
        for &v in &self.data {
            if !v.is_finite() {
                return Err(Error::NonFinite(location()));
            }
            if !(0.0..=beta - 1.0).contains(&v) {
                return Err(Error::OutOfRange {
                    location: location(),
                    value: v,
                    lo: 0.0,
                    hi: beta - 1.0,
                });
            }
        }
        Ok(())
    }

    /// Bit pattern after snapping to a 1e-12 grid; equal keys mean equal layers.
    fn canonical_key(&self) -> Vec<u64> {
        self.data
            .iter()
            .map(|v| {
                let snapped = (v * 1e12).round() / 1e12;
                (snapped + 0.0).to_bits()
            })
            .collect()
    }
}

/// `V^mu_{f,h}(x)`: min over pure columns of the `mu_h(x)`-averaged rows of `layer`.
pub fn induced_min_value(layer: &QLayer, mu: &MarkovPolicy, h: usize, x: usize) -> f64 {
    matrix::row_payoffs(layer.matrix(x), layer.num_b, mu.row(h, x))
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

/// A Q-function: one layer per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QFunction {
    layers: Vec<QLayer>,
}

impl QFunction {
    pub fn new(layers: Vec<QLayer>) -> Self {
        QFunction { layers }
    }

    pub fn horizon(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, h: usize) -> &QLayer {
        &self.layers[h]
    }

    /// Layer `h`, or `None` for the terminal zero layer at `h == horizon`.
    pub fn next_layer(&self, h: usize) -> Option<&QLayer> {
        self.layers.get(h)
    }

    pub fn layers(&self) -> &[QLayer] {
        &self.layers
    }

    pub fn check_game(&self, mg: &TabularMG) -> Result<()> {
        if self.layers.len() != mg.horizon() {
            return Err(Error::dims(format!(
                "function has {} layers, game horizon is {}",
                self.layers.len(),
                mg.horizon()
            )));
        }
        self.layers.iter().try_for_each(|l| l.check_game(mg))
    }

    pub fn check_bounds(&self, beta: f64) -> Result<()> {
        for (h, l) in self.layers.iter().enumerate() {
            l.check_bounds(beta, || format!("function layer h={h}"))?;
        }
        Ok(())
    }
}

/// Induced maximin policy `mu_f` and value `V_f` of a Q-function.
#[derive(Clone, Debug, PartialEq)]
pub struct InducedPolicyBundle {
    pub mu: MarkovPolicy,
    /// `V_{f,h}(x)` with a zero terminal row.
    pub values: ValueTable,
    /// Flat `(h, x)` matrix-game solutions.
    pub solutions: Vec<MatrixGameSolution>,
}

impl InducedPolicyBundle {
    fn from_solutions(
        horizon: usize,
        num_states: usize,
        num_a: usize,
        solutions: Vec<MatrixGameSolution>,
    ) -> Self {
        let mut values = ValueTable::zeros(horizon, num_states);
        let mut probs = Vec::with_capacity(horizon * num_states * num_a);
        for (i, s) in solutions.iter().enumerate() {
            values.step_mut(i / num_states)[i % num_states] = s.value;
            probs.extend_from_slice(&s.row_strategy);
        }
        let mu = MarkovPolicy::from_flat(Side::Max, horizon, num_states, num_a, probs)
            .expect("solver returns distributions");
        InducedPolicyBundle {
            mu,
            values,
            solutions,
        }
    }
}

/// Solves the matrix game `f^h(x, ., .)` at every `(h, x)`.
pub fn induce_policy(f: &QFunction) -> InducedPolicyBundle {
    let first = f.layer(0);
    let solutions: Vec<MatrixGameSolution> = f.layers.iter().flat_map(QLayer::solve).collect();
    InducedPolicyBundle::from_solutions(f.horizon(), first.num_states, first.num_a, solutions)
}

/// Finite class with per-layer priors.
///
/// Matrix-game solutions of every member layer are cached at construction.
#[derive(Clone, Debug)]
pub struct FunctionClass {
    beta: f64,
    layers: Vec<Vec<QLayer>>,
    prior: Vec<Vec<f64>>,
    log_prior: Vec<Vec<f64>>,
    solved: Vec<Vec<Vec<MatrixGameSolution>>>,
}

/// JSON layout of a class file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassFile {
    pub beta: f64,
    /// `[h][k][x][a][b]`.
    pub layers: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
    /// `[h][k]`.
    pub prior: Vec<Vec<f64>>,
}

impl FunctionClass {
    pub fn new(beta: f64, layers: Vec<Vec<QLayer>>, prior: Vec<Vec<f64>>) -> Result<Self> {
        if !(beta > 1.0) || !beta.is_finite() {
            return Err(Error::pre(format!("beta must be a finite value > 1, got {beta}")));
        }
        if layers.is_empty() || layers.len() != prior.len() {
            return Err(Error::dims("one prior per layer and at least one layer required"));
        }
        let shape = (layers[0].first().map(|l| (l.num_states, l.num_a, l.num_b)))
            .ok_or_else(|| Error::dims("empty layer in function class"))?;
        for (h, (members, p)) in layers.iter().zip(&prior).enumerate() {
            if members.is_empty() || members.len() != p.len() {
                return Err(Error::dims(format!(
                    "layer {h}: {} members with {} prior weights",
                    members.len(),
                    p.len()
                )));
            }
            for (k, m) in members.iter().enumerate() {
                if (m.num_states, m.num_a, m.num_b) != shape {
                    return Err(Error::dims(format!("member {k} of layer {h} has a different shape")));
                }
                m.check_bounds(beta, || format!("class layer h={h} member k={k}"))?;
            }
            if p.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
                return Err(Error::InvalidDistribution {
                    location: format!("prior of layer {h}"),
                    reason: "weights must be positive".into(),
                });
            }
            crate::game::check_distribution(p, || format!("prior of layer {h}"))?;
        }
        let log_prior = prior.iter().map(|p| p.iter().map(|w| w.ln()).collect()).collect();
        let solved = layers
            .iter()
            .map(|members| members.iter().map(QLayer::solve).collect())
            .collect();
        Ok(FunctionClass {
            beta,
            layers,
            prior,
            log_prior,
            solved,
        })
    }

    /// Uniform prior over each layer.
    pub fn uniform(beta: f64, layers: Vec<Vec<QLayer>>) -> Result<Self> {
        let prior = layers
            .iter()
            .map(|m| vec![1.0 / m.len().max(1) as f64; m.len()])
            .collect();
        Self::new(beta, layers, prior)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn horizon(&self) -> usize {
        self.layers.len()
    }

    /// `|F_h|`.
    pub fn size(&self, h: usize) -> usize {
        self.layers[h].len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    /// `prod_h |F_h|`.
    pub fn joint_size(&self) -> u128 {
        self.layers.iter().map(|l| l.len() as u128).product()
    }

    pub fn layer(&self, h: usize, k: usize) -> &QLayer {
        &self.layers[h][k]
    }

    pub fn members(&self, h: usize) -> &[QLayer] {
        &self.layers[h]
    }

    pub fn prior(&self, h: usize) -> &[f64] {
        &self.prior[h]
    }

    pub fn log_prior(&self, h: usize) -> &[f64] {
        &self.log_prior[h]
    }

    /// Cached `V_{f,h}(x)` of member `k` of layer `h`.
    pub fn game_value(&self, h: usize, k: usize, x: usize) -> f64 {
        self.solved[h][k][x].value
    }

    pub fn check_game(&self, mg: &TabularMG) -> Result<()> {
        if self.horizon() != mg.horizon() {
            return Err(Error::dims(format!(
                "class has {} layers, game horizon is {}",
                self.horizon(),
                mg.horizon()
            )));
        }
        self.layers[0][0].check_game(mg)
    }

    /// Assembles the function with member `idx[h]` at every step.
    pub fn function(&self, idx: &[usize]) -> QFunction {
        QFunction::new(
            idx.iter()
                .enumerate()
                .map(|(h, &k)| self.layers[h][k].clone())
                .collect(),
        )
    }

    /// [`induce_policy`] served from the cache.
    pub fn induced(&self, idx: &[usize]) -> InducedPolicyBundle {
        let l = &self.layers[0][0];
        let solutions = idx
            .iter()
            .enumerate()
            .flat_map(|(h, &k)| self.solved[h][k].iter().cloned())
            .collect();
        InducedPolicyBundle::from_solutions(self.horizon(), l.num_states, l.num_a, solutions)
    }

    /// Position of `f`'s layers inside the class, if every layer is a member.
    pub fn index_of(&self, f: &QFunction) -> Option<Vec<usize>> {
        f.layers
            .iter()
            .enumerate()
            .map(|(h, l)| self.layers.get(h)?.iter().position(|m| m == l))
            .collect()
    }

    pub fn to_file(&self) -> ClassFile {
        let layers = self
            .layers
            .iter()
            .map(|members| {
                members
                    .iter()
                    .map(|m| {
                        (0..m.num_states)
                            .map(|x| {
                                m.matrix(x).chunks_exact(m.num_b).map(<[f64]>::to_vec).collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        ClassFile {
            beta: self.beta,
            layers,
            prior: self.prior.clone(),
        }
    }

    pub fn from_file(file: ClassFile) -> Result<Self> {
        let mut layers = Vec::with_capacity(file.layers.len());
        for (h, members) in file.layers.into_iter().enumerate() {
            let mut out = Vec::with_capacity(members.len());
            for (k, m) in members.into_iter().enumerate() {
                let xn = m.len();
                let an = m.first().map_or(0, Vec::len);
                let bn = m.first().and_then(|r| r.first()).map_or(0, Vec::len);
                if xn == 0 || an == 0 || bn == 0 || m.iter().any(|r| r.len() != an || r.iter().any(|c| c.len() != bn))
                {
                    return Err(Error::dims(format!("class layer {h} member {k} is ragged or empty")));
                }
                let data: Vec<f64> = m.into_iter().flatten().flatten().collect();
                out.push(QLayer::from_flat(xn, an, bn, data));
            }
            layers.push(out);
        }
        Self::new(file.beta, layers, file.prior)
    }
}

/// Options for [`build_closure_class`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClosureOptions {
    pub beta: f64,
    /// Rounds of `T_h^{mu_f} g` applications over the current members.
    pub depth: usize,
    /// Also add the seed functions themselves.
    pub include_seeds: bool,
    /// Largest admissible `|F_h|`.
    pub max_layer_size: usize,
}

impl ClosureOptions {
    pub fn new(beta: f64) -> Self {
        ClosureOptions {
            beta,
            depth: 0,
            include_seeds: false,
            max_layer_size: 64,
        }
    }
}

/// How far a class is from being closed under `T_h^{mu_f}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClosureReport {
    pub layer_sizes: Vec<usize>,
    /// `max_{h, f, g} min_{f' in F_h} || T_h^{mu_f} g^{h+1} - f' ||_inf`.
    pub completeness_defect: f64,
    /// `(h, policy member at h+1, g member at h+1)` attaining the defect;
    /// member indices are `None` for the terminal zero layer.
    pub worst: Option<(usize, Option<usize>, Option<usize>)>,
}

struct LayerSet {
    members: Vec<QLayer>,
    keys: HashSet<Vec<u64>>,
}

impl LayerSet {
    fn insert(&mut self, layer: QLayer) -> bool {
        if self.keys.insert(layer.canonical_key()) {
            self.members.push(layer);
            true
        } else {
            false
        }
    }
}

/// Builds a finite class around the Nash Q-function and best-response
/// Q-functions of the seeds' induced policies, optionally closing it under
/// `T_h^{mu_f}` for `depth` rounds. Duplicate layers are removed.
pub fn build_closure_class(
    mg: &TabularMG,
    seeds: &[QFunction],
    opts: &ClosureOptions,
) -> Result<(FunctionClass, ClosureReport)> {
    let hn = mg.horizon();
    let nash = solve_nash(mg);
    let mut functions = vec![nash.q_star.clone()];
    for (i, seed) in seeds.iter().enumerate() {
        seed.check_game(mg)?;
        if opts.include_seeds {
            seed.check_bounds(opts.beta)
                .map_err(|e| Error::pre(format!("seed {i}: {e}")))?;
            functions.push(seed.clone());
        }
        let mu = induce_policy(seed).mu;
        functions.push(best_response(mg, &mu)?.q_br);
    }
    let mut sets: Vec<LayerSet> = (0..hn)
        .map(|_| LayerSet {
            members: Vec::new(),
            keys: HashSet::new(),
        })
        .collect();
    for (i, f) in functions.iter().enumerate() {
        for (h, l) in f.layers.iter().enumerate() {
            l.check_bounds(opts.beta, || format!("closure member {i} layer h={h}"))?;
            sets[h].insert(l.clone());
        }
    }
    for (h, s) in sets.iter().enumerate() {
        if s.members.len() > opts.max_layer_size {
            return Err(Error::ClassTooLarge {
                layer: h,
                size: s.members.len(),
                cap: opts.max_layer_size,
            });
        }
    }

    for _ in 0..opts.depth {
        let snapshot: Vec<Vec<QLayer>> = sets.iter().map(|s| s.members.clone()).collect();
        for (h, set) in sets.iter_mut().enumerate() {
            for t in closure_images(mg, &snapshot, h)? {
                let (layer, _, _) = t;
                layer.check_bounds(opts.beta, || format!("closure image at h={h}"))?;
                set.insert(layer);
                if set.members.len() > opts.max_layer_size {
                    return Err(Error::ClassTooLarge {
                        layer: h,
                        size: set.members.len(),
                        cap: opts.max_layer_size,
                    });
                }
            }
        }
    }

    let layers: Vec<Vec<QLayer>> = sets.into_iter().map(|s| s.members).collect();
    let fc = FunctionClass::uniform(opts.beta, layers)?;
    let report = completeness_defect(mg, &fc)?;
    Ok((fc, report))
}

type Image = (QLayer, Option<usize>, Option<usize>);

/// All `T_h^{mu_k} g_j` for policy layer `k` and successor layer `j` at `h + 1`.
fn closure_images(mg: &TabularMG, layers: &[Vec<QLayer>], h: usize) -> Result<Vec<Image>> {
    let hn = mg.horizon();
    if h + 1 == hn {
        return Ok(vec![(oracle::bellman_apply(mg, None, h)?, None, None)]);
    }
    let mut out = Vec::new();
    for (k, policy_layer) in layers[h + 1].iter().enumerate() {
        let mu = layer_policy(mg, policy_layer, h + 1);
        for (j, g) in layers[h + 1].iter().enumerate() {
            out.push((oracle::bellman_apply_mu(mg, Some(g), &mu, h)?, Some(k), Some(j)));
        }
    }
    Ok(out)
}

/// Uniform-prior class with `1 + seeds.len()` members per layer: `Q*_h` plus,
/// for each seed `s`, the best-response Q-function of `mu_s` at steps before
/// the last and `s` itself at the last step (where every best response
/// collapses to the reward). Members are not deduplicated.
pub fn build_benchmark_class(mg: &TabularMG, beta: f64, seeds: &[QFunction]) -> Result<FunctionClass> {
    let hn = mg.horizon();
    let nash = solve_nash(mg);
    let mut layers: Vec<Vec<QLayer>> = nash.q_star.layers().iter().map(|l| vec![l.clone()]).collect();
    for s in seeds {
        s.check_game(mg)?;
        let br = best_response(mg, &induce_policy(s).mu)?;
        for (h, layer) in layers.iter_mut().enumerate() {
            let src = if h + 1 == hn { s } else { &br.q_br };
            layer.push(src.layer(h).clone());
        }
    }
    FunctionClass::uniform(beta, layers)
}

/// A max-player policy whose step-`h` rows are the maximin strategies of
/// `layer`; other steps are uniform and never read by `T_{h-1}^mu`.
pub(crate) fn layer_policy(mg: &TabularMG, layer: &QLayer, h: usize) -> MarkovPolicy {
    let (hn, xn, an) = (mg.horizon(), mg.num_states(), mg.num_a());
    let mut probs = vec![1.0 / an as f64; hn * xn * an];
    for (x, s) in layer.solve().into_iter().enumerate() {
        let start = (h * xn + x) * an;
        probs[start..start + an].copy_from_slice(&s.row_strategy);
    }
    MarkovPolicy::from_flat(Side::Max, hn, xn, an, probs).expect("solver returns distributions")
}

/// Measures the completeness defect of an arbitrary class.
pub fn completeness_defect(mg: &TabularMG, fc: &FunctionClass) -> Result<ClosureReport> {
    fc.check_game(mg)?;
    let mut best = (0.0_f64, None);
    for h in 0..mg.horizon() {
        for (img, k, j) in closure_images(mg, &fc.layers, h)? {
            let d = fc.layers[h]
                .iter()
                .map(|m| img.sup_distance(m))
                .fold(f64::INFINITY, f64::min);
            if d > best.0 || best.1.is_none() {
                best = (d.max(best.0), if d >= best.0 { Some((h, k, j)) } else { best.1 });
            }
        }
    }
    Ok(ClosureReport {
        layer_sizes: fc.sizes(),
        completeness_defect: best.0,
        worst: best.1,
    })
}

/// Where a `kappa` set came out empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmptySet {
    pub h: usize,
    /// Policy-source member at `h + 1` (`None` at the last step).
    pub policy_member: Option<usize>,
    /// Successor member at `h + 1` (`None` at the last step).
    pub g_member: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KappaReport {
    pub epsilon: f64,
    /// `kappa(eps) = sup_f sup_g sum_h ln 1/p_0^h(F_h^{mu_f}(eps, g^{h+1}))`.
    pub kappa: f64,
    /// The same with `T_h` in place of `T_h^{mu_f}`.
    pub kappa1: f64,
    /// First empty set found, making `kappa` infinite.
    pub empty: Option<EmptySet>,
    pub empty_kappa1: Option<EmptySet>,
}

/// Exact `kappa(eps)` and `kappa_1(eps)` by enumeration over the class.
///
/// Every layer of `f` and `g` varies independently, and the step-`h` set only
/// depends on `(f^{h+1}, g^{h+1})`, so the supremum splits into a sum of
/// per-step maxima.
pub fn compute_kappa(
    mg: &TabularMG,
    fc: &FunctionClass,
    epsilon: f64,
    exec: Execution,
) -> Result<KappaReport> {
    if !(epsilon >= 0.0) {
        return Err(Error::pre(format!("epsilon must be >= 0, got {epsilon}")));
    }
    fc.check_game(mg)?;
    let hn = mg.horizon();
    let neg_log_mass = |h: usize, target: &QLayer| -> f64 {
        let mass: f64 = fc.layers[h]
            .iter()
            .zip(&fc.prior[h])
            .filter(|(m, _)| m.sup_distance(target) <= epsilon)
            .map(|(_, p)| p)
            .sum();
        if mass > 0.0 {
            // Guard against -0.0 and rounding above 1 for full sets.
            (-mass.ln()).max(0.0)
        } else {
            f64::INFINITY
        }
    };

    let per_step = exec.try_map_range(hn, |h| -> Result<_> {
        let mut worst_mu = (0.0_f64, None::<EmptySet>);
        for (img, k, j) in closure_images(mg, &fc.layers, h)? {
            let c = neg_log_mass(h, &img);
            if c > worst_mu.0 || (c.is_infinite() && worst_mu.1.is_none()) {
                worst_mu.0 = c;
                if c.is_infinite() {
                    worst_mu.1 = Some(EmptySet {
                        h,
                        policy_member: k,
                        g_member: j,
                    });
                }
            }
        }
        let mut worst_t = (0.0_f64, None::<EmptySet>);
        let successors: Vec<Option<&QLayer>> = if h + 1 == hn {
            vec![None]
        } else {
            fc.layers[h + 1].iter().map(Some).collect()
        };
        for (j, g) in successors.into_iter().enumerate() {
            let img = oracle::bellman_apply(mg, g, h)?;
            let c = neg_log_mass(h, &img);
            if c > worst_t.0 || (c.is_infinite() && worst_t.1.is_none()) {
                worst_t.0 = c;
                if c.is_infinite() {
                    let j = g.map(|_| j);
                    worst_t.1 = Some(EmptySet {
                        h,
                        policy_member: j,
                        g_member: j,
                    });
                }
            }
        }
        Ok((worst_mu, worst_t))
    })?;

    let kappa = per_step.iter().map(|(m, _)| m.0).sum();
    let kappa1 = per_step.iter().map(|(_, t)| t.0).sum();
    Ok(KappaReport {
        epsilon,
        kappa,
        kappa1,
        empty: per_step.iter().find_map(|(m, _)| m.1),
        empty_kappa1: per_step.iter().find_map(|(_, t)| t.1),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::game::policy_value;
    use crate::instances::{gen_random_qfunction, gen_random_tabular, Dims};
    use crate::matrix::{solve_matrix_game, Matrix};
    use crate::oracle::bellman_apply_mu;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nash_q_induces_nash_policy() {
        let mg = gen_random_tabular(Dims::new(3, 3, 2, 3), 0.0, 6);
        let nash = solve_nash(&mg);
        let bundle = induce_policy(&nash.q_star);
        let br = best_response(&mg, &bundle.mu).unwrap();
        assert!((br.v_br.get(0, 0) - nash.value(&mg)).abs() < 1e-7);
    }

    #[test]
    fn constant_function_is_deterministic() {
        let f = QFunction::new(vec![QLayer::from_flat(2, 3, 2, vec![0.8; 12]); 2]);
        let a = induce_policy(&f);
        let b = induce_policy(&f);
        assert_eq!(a.mu, b.mu);
        for h in 0..2 {
            for x in 0..2 {
                assert_eq!(a.values.get(h, x), 0.8);
            }
        }
        assert_eq!(a.values.get(2, 0), 0.0);
    }

    #[test]
    fn induced_values_match_independent_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = QFunction::new(
            (0..3)
                .map(|_| QLayer::from_flat(2, 2, 2, (0..8).map(|_| rng.random::<f64>()).collect()))
                .collect(),
        );
        let bundle = induce_policy(&f);
        for h in 0..3 {
            for x in 0..2 {
                let m = f.layer(h).matrix(x);
                let (a, b, c, d) = (m[0], m[1], m[2], m[3]);
                let maximin = f64::max(a.min(b), c.min(d));
                let minimax = f64::min(a.max(c), b.max(d));
                let want = if maximin == minimax {
                    maximin
                } else {
                    (a * d - b * c) / (a + d - b - c)
                };
                assert!((bundle.values.get(h, x) - want).abs() < 1e-10);
                let direct = solve_matrix_game(&Matrix::new(2, 2, m.to_vec()).unwrap());
                assert_eq!(bundle.mu.row(h, x), direct.row_strategy.as_slice());
            }
        }
    }

    #[test]
    fn induced_min_value_cases() {
        let layer = QLayer::from_flat(1, 2, 3, vec![0.4; 6]);
        let mu = MarkovPolicy::uniform(Side::Max, 1, 1, 2);
        assert_eq!(induced_min_value(&layer, &mu, 0, 0), 0.4);

        let layer = QLayer::from_flat(1, 2, 3, vec![0.9, 0.2, 0.5, 0.1, 0.7, 0.3]);
        let point = MarkovPolicy::from_flat(Side::Max, 1, 1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(induced_min_value(&layer, &point, 0, 0), 0.2);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let layer = QLayer::from_flat(1, 3, 4, (0..12).map(|_| rng.random()).collect());
            let mu = MarkovPolicy::random(Side::Max, 1, 1, 3, &mut rng);
            let w = mu.row(0, 0);
            let brute = (0..4)
                .map(|b| (0..3).map(|a| w[a] * layer.get(0, a, b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            assert!((induced_min_value(&layer, &mu, 0, 0) - brute).abs() < 1e-15);
        }
    }

    #[test]
    fn class_validation() {
        let l = QLayer::from_flat(1, 1, 1, vec![0.5]);
        assert!(FunctionClass::new(2.0, vec![vec![l.clone()]], vec![vec![1.0]]).is_ok());
        assert!(FunctionClass::new(1.0, vec![vec![l.clone()]], vec![vec![1.0]]).is_err());
        assert!(FunctionClass::new(2.0, vec![vec![l.clone(), l.clone()]], vec![vec![1.0, 0.0]]).is_err());
        assert!(FunctionClass::new(2.0, vec![vec![l.clone()]], vec![vec![0.9]]).is_err());
        let big = QLayer::from_flat(1, 1, 1, vec![1.5]);
        assert!(matches!(
            FunctionClass::new(2.0, vec![vec![big]], vec![vec![1.0]]),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn class_file_round_trip() {
        let mg = gen_random_tabular(Dims::new(2, 2, 2, 3), 0.0, 2);
        let seeds: Vec<QFunction> = (0..3).map(|s| gen_random_qfunction(&mg, 3.0, s)).collect();
        let (fc, _) = build_closure_class(&mg, &seeds, &ClosureOptions::new(3.0)).unwrap();
        let json = serde_json::to_string(&fc.to_file()).unwrap();
        let back = FunctionClass::from_file(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.sizes(), fc.sizes());
        for h in 0..2 {
            assert_eq!(back.members(h), fc.members(h));
            assert_eq!(back.prior(h), fc.prior(h));
        }
    }

    #[test]
    fn closure_from_nash_seed() {
        let mg = gen_random_tabular(Dims::new(3, 2, 2, 2), 0.0, 13);
        let nash = solve_nash(&mg);
        let opts = ClosureOptions::new(4.0);
        let (fc, report) = build_closure_class(&mg, std::slice::from_ref(&nash.q_star), &opts).unwrap();
        // Q^{mu*, dagger} coincides with Q* up to rounding, so dedup leaves one member.
        assert_eq!(fc.sizes(), vec![1, 1, 1]);
        assert_eq!(fc.index_of(&nash.q_star), Some(vec![0, 0, 0]));
        assert!(report.completeness_defect.is_finite());
    }

    #[test]
    fn duplicate_seeds_do_not_grow_class() {
        let mg = gen_random_tabular(Dims::new(2, 3, 2, 2), 0.0, 14);
        let s = gen_random_qfunction(&mg, 3.0, 1);
        let t = gen_random_qfunction(&mg, 3.0, 2);
        let opts = ClosureOptions::new(3.0);
        let (a, _) = build_closure_class(&mg, &[s.clone(), t.clone()], &opts).unwrap();
        let (b, _) = build_closure_class(&mg, &[s.clone(), t.clone(), s], &opts).unwrap();
        assert_eq!(a.sizes(), b.sizes());
    }

    #[test]
    fn depth_one_closure_on_single_state() {
        let mg = gen_random_tabular(Dims::new(2, 1, 2, 2), 0.0, 15);
        let seed = gen_random_qfunction(&mg, 3.0, 7);
        let mut opts = ClosureOptions::new(3.0);
        opts.depth = 1;
        let (fc, report) = build_closure_class(&mg, std::slice::from_ref(&seed), &opts).unwrap();
        // Hand-rolled membership: Q*, the seed's best response, and every T_0^{mu_k} g_j.
        let nash = solve_nash(&mg);
        let br = best_response(&mg, &induce_policy(&seed).mu).unwrap().q_br;
        let base = [nash.q_star.layer(1).clone(), br.layer(1).clone()];
        let mut expected = vec![nash.q_star.layer(0).clone(), br.layer(0).clone()];
        for k in &base {
            let mu = layer_policy(&mg, k, 1);
            for g in &base {
                expected.push(bellman_apply_mu(&mg, Some(g), &mu, 0).unwrap());
            }
        }
        for e in &expected {
            assert!(fc.members(0).iter().any(|m| m.sup_distance(e) < 1e-12));
        }
        for m in fc.members(0) {
            assert!(expected.iter().any(|e| m.sup_distance(e) < 1e-12));
        }
        // Every image of the depth-0 members is now in F_0, so only images of the
        // added members can leave a defect; F_1 is closed at the last step.
        assert!(report.completeness_defect.is_finite());
    }

    #[test]
    fn closure_bound_violation_fails_loudly() {
        let mg = gen_random_tabular(Dims::new(3, 2, 2, 2), 0.0, 16);
        // beta = 2 caps values at 1, but Q*_1 can reach 3.
        let err = build_closure_class(&mg, &[], &ClosureOptions::new(2.0)).unwrap_err();
        assert!(matches!(err, Error::OutOfRange { .. }));
    }

    #[test]
    fn closure_size_cap() {
        let mg = gen_random_tabular(Dims::new(2, 2, 2, 2), 0.0, 17);
        let seeds: Vec<QFunction> = (0..6).map(|s| gen_random_qfunction(&mg, 3.0, s)).collect();
        let mut opts = ClosureOptions::new(3.0);
        opts.max_layer_size = 3;
        assert!(matches!(
            build_closure_class(&mg, &seeds, &opts),
            Err(Error::ClassTooLarge { .. })
        ));
    }

    /// Tiny 1-state, H = 1 class where residual tables can be written by hand.
    fn one_state_class() -> (TabularMG, FunctionClass) {
        let mg = TabularMG::from_flat(1, 1, 2, 2, 0, vec![0.2, 0.6, 0.8, 0.4], vec![1.0; 4]).unwrap();
        let exact = QLayer::from_flat(1, 2, 2, vec![0.2, 0.6, 0.8, 0.4]);
        let off = QLayer::from_flat(1, 2, 2, vec![0.5, 0.6, 0.8, 0.1]);
        let fc = FunctionClass::new(2.0, vec![vec![exact, off]], vec![vec![0.25, 0.75]]).unwrap();
        (mg, fc)
    }

    #[test]
    fn benchmark_class_layout() {
        let mg = gen_random_tabular(Dims::new(3, 2, 2, 2), 0.0, 0);
        let seeds: Vec<QFunction> = (0..3).map(|s| gen_random_qfunction(&mg, 4.0, s)).collect();
        let fc = build_benchmark_class(&mg, 4.0, &seeds).unwrap();
        assert_eq!(fc.sizes(), vec![4, 4, 4]);
        let nash = solve_nash(&mg);
        assert_eq!(fc.index_of(&nash.q_star), Some(vec![0, 0, 0]));
        let br = best_response(&mg, &induce_policy(&seeds[1]).mu).unwrap();
        assert_eq!(fc.layer(1, 2), br.q_br.layer(1));
        assert_eq!(fc.layer(2, 2), seeds[1].layer(2));
    }

    #[test]
    fn kappa_by_hand_on_one_state() {
        let (mg, fc) = one_state_class();
        // Residuals against T_0 0 = r: member 0 is exact, member 1 is off by 0.3 at most.
        let cases = [(0.0, -(0.25f64).ln()), (0.29, -(0.25f64).ln()), (0.31, 0.0), (1.0, 0.0)];
        for (eps, want) in cases {
            let k = compute_kappa(&mg, &fc, eps, Execution::Sequential).unwrap();
            assert!((k.kappa - want).abs() < 1e-15, "eps {eps}: {}", k.kappa);
            assert!((k.kappa1 - want).abs() < 1e-15);
        }
    }

    #[test]
    fn kappa_zero_when_eps_at_least_beta() {
        let mg = gen_random_tabular(Dims::new(2, 2, 2, 2), 0.0, 18);
        let seeds: Vec<QFunction> = (0..3).map(|s| gen_random_qfunction(&mg, 3.0, s)).collect();
        let (fc, _) = build_closure_class(&mg, &seeds, &ClosureOptions::new(3.0)).unwrap();
        let k = compute_kappa(&mg, &fc, 3.0, Execution::Sequential).unwrap();
        assert_eq!(k.kappa, 0.0);
        assert_eq!(k.kappa1, 0.0);
    }

    #[test]
    fn kappa_is_ln_class_size_for_singletons() {
        // Layers spread far apart so every set is a singleton at small eps, and
        // the class is exactly closed: T_0^{mu} g = g_0 + const shifts.
        let mg = TabularMG::from_flat(2, 1, 1, 1, 0, vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let l = |v: f64| QLayer::from_flat(1, 1, 1, vec![v]);
        let layers = vec![vec![l(0.0), l(1.0), l(2.0)], vec![l(0.0), l(1.0), l(2.0)]];
        let fc = FunctionClass::uniform(4.0, layers).unwrap();
        let k = compute_kappa(&mg, &fc, 0.1, Execution::Sequential).unwrap();
        assert!((k.kappa - 2.0 * 3f64.ln()).abs() < 1e-12);
        assert!(k.empty.is_none());
    }

    #[test]
    fn empty_set_reports_infinity() {
        // With H = 2 every last-step member equals r and the class is closed, so use H = 3.
        let mg = gen_random_tabular(Dims::new(3, 2, 2, 2), 0.0, 19);
        let seeds: Vec<QFunction> = (0..2).map(|s| gen_random_qfunction(&mg, 4.0, s)).collect();
        let (fc, _) = build_closure_class(&mg, &seeds, &ClosureOptions::new(4.0)).unwrap();
        let k = compute_kappa(&mg, &fc, 1e-9, Execution::Sequential).unwrap();
        assert!(k.kappa.is_infinite());
        let e = k.empty.unwrap();
        assert_eq!(e.h, 0);
        assert!(compute_kappa(&mg, &fc, -1.0, Execution::Sequential).is_err());
    }

    #[test]
    fn kappa_monotone_and_dominates_kappa1() {
        let mg = gen_random_tabular(Dims::new(2, 2, 2, 2), 0.0, 20);
        let seeds: Vec<QFunction> = (0..4).map(|s| gen_random_qfunction(&mg, 3.0, s)).collect();
        let mut opts = ClosureOptions::new(3.0);
        opts.include_seeds = true;
        let (fc, _) = build_closure_class(&mg, &seeds, &opts).unwrap();
        let mut prev = f64::INFINITY;
        for i in 0..60 {
            let eps = i as f64 * 0.05;
            let seq = compute_kappa(&mg, &fc, eps, Execution::Sequential).unwrap();
            let par = compute_kappa(&mg, &fc, eps, Execution::Parallel).unwrap();
            assert_eq!(seq.kappa.to_bits(), par.kappa.to_bits());
            assert!(seq.kappa <= prev);
            assert!(seq.kappa1 <= seq.kappa);
            prev = seq.kappa;
        }
    }

    #[test]
    fn realizability_of_best_responses() {
        let mg = gen_random_tabular(Dims::new(2, 3, 2, 2), 0.0, 21);
        let seeds: Vec<QFunction> = (0..3).map(|s| gen_random_qfunction(&mg, 3.0, s)).collect();
        let (fc, _) = build_closure_class(&mg, &seeds, &ClosureOptions::new(3.0)).unwrap();
        let nash = solve_nash(&mg);
        assert!(fc.index_of(&nash.q_star).is_some());
        for s in &seeds {
            let mu = induce_policy(s).mu;
            let br = best_response(&mg, &mu).unwrap();
            assert!(fc.index_of(&br.q_br).is_some());
            // The best response Q-function evaluates mu against its response exactly.
            let v = policy_value(&mg, &mu, &br.nu_br).unwrap().get(0, 0);
            assert!((v - br.v_br.get(0, 0)).abs() < 1e-12);
        }
    }
}
