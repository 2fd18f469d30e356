//! Numerical checks of the analysis on concrete games and runs: Bellman
//! residuals, the two value decompositions, excess-loss moments, the
//! decoupling inequality on a realized run, and the elliptical potential
//! sandwich. Every expectation uses exact occupancy measures.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::class::{induce_policy, FunctionClass, QFunction, QLayer};
use crate::exec::Execution;
use crate::game::{compute_occupancy, policy_value, MarkovPolicy, OccupancyMeasure, Side, TabularMG};
use crate::instances::gen_random_qfunction;
use crate::oracle::{bellman_apply, bellman_apply_mu, best_response, solve_nash};
use crate::selfplay::{booster_response, EpisodeArtifact};
use crate::{Error, Result};

/// Tolerance for the value-decomposition checks.
pub const LEMMA_TOL: f64 = 1e-8;
/// Tolerance for the excess-loss moment checks.
pub const MOMENT_TOL: f64 = 1e-10;
/// The `mu` values at which the decoupling inequality is checked.
pub const DC_MUS: [f64; 4] = [0.1, 0.25, 0.5, 1.0];

/// Bellman residual tables, one flat `(x, a, b)` table per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub layers: Vec<Vec<f64>>,
}

impl ResidualReport {
    /// `E_pi[E_h]` for every step.
    pub fn expect(&self, occ: &OccupancyMeasure) -> Vec<f64> {
        self.layers.iter().enumerate().map(|(h, l)| occ.expect(h, l)).collect()
    }

    pub fn sup_norm(&self) -> f64 {
        self.layers.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

/// `E_h(f) = f^h - T_h f^{h+1}`.
pub fn residuals(mg: &TabularMG, f: &QFunction) -> Result<ResidualReport> {
    f.check_game(mg)?;
    let layers = (0..mg.horizon())
        .map(|h| {
            let backup = bellman_apply(mg, f.next_layer(h + 1), h)?;
            Ok(diff(f.layer(h), &backup))
        })
        .collect::<Result<_>>()?;
    Ok(ResidualReport { layers })
}

/// `E^mu_h(g) = g^h - T_h^mu g^{h+1}`.
pub fn residuals_mu(mg: &TabularMG, g: &QFunction, mu: &MarkovPolicy) -> Result<ResidualReport> {
    g.check_game(mg)?;
    let layers = (0..mg.horizon())
        .map(|h| {
            let backup = bellman_apply_mu(mg, g.next_layer(h + 1), mu, h)?;
            Ok(diff(g.layer(h), &backup))
        })
        .collect::<Result<_>>()?;
    Ok(ResidualReport { layers })
}

fn diff(a: &QLayer, b: &QLayer) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect()
}

/// Outcome of one value-decomposition check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs` for the inequality; `|lhs - rhs|` for the equality.
    pub slack: f64,
    pub pass: bool,
}

/// Main-agent decomposition with `mu = mu_f`:
/// `V* - V^{mu,nu} <= sum_h E_{mu,nu}[E_h(f)] + V* - V_{f,1}`.
pub fn check_lemma_main(mg: &TabularMG, f: &QFunction, nu: &MarkovPolicy) -> Result<LemmaCheck> {
    let res = residuals(mg, f)?;
    check_lemma_main_with(mg, f, nu, &res)
}

/// [`check_lemma_main`] with caller-supplied residual tables.
pub fn check_lemma_main_with(
    mg: &TabularMG,
    f: &QFunction,
    nu: &MarkovPolicy,
    res: &ResidualReport,
) -> Result<LemmaCheck> {
    let bundle = induce_policy(f);
    let x1 = mg.initial_state();
    let v_star = solve_nash(mg).value(mg);
    let v_exec = policy_value(mg, &bundle.mu, nu)?.get(0, x1);
    let occ = compute_occupancy(mg, &bundle.mu, nu)?;
    let lhs = v_star - v_exec;
    let rhs = res.expect(&occ).iter().sum::<f64>() + v_star - bundle.values.get(0, x1);
    let slack = rhs - lhs;
    Ok(LemmaCheck {
        lhs,
        rhs,
        slack,
        pass: slack >= -LEMMA_TOL,
    })
}

/// Booster decomposition with `mu = mu_f` and `nu` the greedy response to `g`:
/// `V^{mu,nu} - V^{mu,dagger} = -sum_h E_{mu,nu}[E^mu_h(g)] + V^mu_{g,1} - V^{mu,dagger}`.
pub fn check_lemma_booster(mg: &TabularMG, f: &QFunction, g: &QFunction) -> Result<LemmaCheck> {
    let mu = induce_policy(f).mu;
    let res = residuals_mu(mg, g, &mu)?;
    check_lemma_booster_with(mg, f, g, &res)
}

/// [`check_lemma_booster`] with caller-supplied residual tables.
pub fn check_lemma_booster_with(
    mg: &TabularMG,
    f: &QFunction,
    g: &QFunction,
    res: &ResidualReport,
) -> Result<LemmaCheck> {
    let mu = induce_policy(f).mu;
    let layers: Vec<&QLayer> = g.layers().iter().collect();
    let nu = booster_response(&mu, &layers)?;
    let x1 = mg.initial_state();
    let v_exec = policy_value(mg, &mu, &nu)?.get(0, x1);
    let v_br = best_response(mg, &mu)?.v_br.get(0, x1);
    let v_g = crate::class::induced_min_value(g.layer(0), &mu, 0, x1);
    let occ = compute_occupancy(mg, &mu, &nu)?;
    let lhs = v_exec - v_br;
    let rhs = -res.expect(&occ).iter().sum::<f64>() + v_g - v_br;
    let slack = (lhs - rhs).abs();
    Ok(LemmaCheck {
        lhs,
        rhs,
        slack,
        pass: slack <= LEMMA_TOL,
    })
}

/// Exact moments of the excess loss at one `(h, x, a, b)` over `x' ~ P_h`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcessMoments {
    pub mean: f64,
    pub second_moment: f64,
    pub residual_sq: f64,
    /// `4 beta^2 / 3 * residual_sq`.
    pub variance_bound: f64,
    pub pass: bool,
}

/// Moments of `Delta L^h = (f - r - V_{f,h+1}(x'))^2 - (T_h f - r - V_{f,h+1}(x'))^2`.
#[allow(clippy::too_many_arguments)]
pub fn excess_loss_moments(
    mg: &TabularMG,
    f: &QFunction,
    beta: f64,
    h: usize,
    x: usize,
    a: usize,
    b: usize,
) -> Result<ExcessMoments> {
    f.check_game(mg)?;
    let next = match f.next_layer(h + 1) {
        Some(l) => l.game_values(),
        None => vec![0.0; mg.num_states()],
    };
    moments(mg, f.layer(h).get(x, a, b), &next, beta, h, x, a, b)
}

/// Booster counterpart of [`excess_loss_moments`] with `V^mu_{g,h+1}`.
#[allow(clippy::too_many_arguments)]
pub fn excess_loss_moments_mu(
    mg: &TabularMG,
    g: &QFunction,
    mu: &MarkovPolicy,
    beta: f64,
    h: usize,
    x: usize,
    a: usize,
    b: usize,
) -> Result<ExcessMoments> {
    g.check_game(mg)?;
    mg.check_policy(mu, Side::Max)?;
    let next = match g.next_layer(h + 1) {
        Some(l) => l.min_values(mu, h + 1),
        None => vec![0.0; mg.num_states()],
    };
    moments(mg, g.layer(h).get(x, a, b), &next, beta, h, x, a, b)
}

#[allow(clippy::too_many_arguments)]
fn moments(
    mg: &TabularMG,
    value: f64,
    next: &[f64],
    beta: f64,
    h: usize,
    x: usize,
    a: usize,
    b: usize,
) -> Result<ExcessMoments> {
    if h >= mg.horizon() || x >= mg.num_states() || a >= mg.num_a() || b >= mg.num_b() {
        return Err(Error::dims(format!("({h}, {x}, {a}, {b}) is outside the game")));
    }
    let r = mg.reward(h, x, a, b);
    let p = mg.next_dist(h, x, a, b);
    let backup = r + mg.expect_next(h, x, a, b, next);
    let residual = value - backup;
    let (mut mean, mut second) = (0.0, 0.0);
    let outcomes: Vec<(f64, f64)> = if h + 1 < mg.horizon() {
        p.iter().zip(next).filter(|(w, _)| **w > 0.0).map(|(w, v)| (*w, *v)).collect()
    } else {
        vec![(1.0, 0.0)]
    };
    for (w, v) in outcomes {
        let y = r + v;
        let dl = (value - y).powi(2) - (backup - y).powi(2);
        mean += w * dl;
        second += w * dl * dl;
    }
    let residual_sq = residual * residual;
    let variance_bound = 4.0 * beta * beta / 3.0 * residual_sq;
    Ok(ExcessMoments {
        mean,
        second_moment: second,
        residual_sq,
        variance_bound,
        pass: (mean - residual_sq).abs() <= MOMENT_TOL && second <= variance_bound + MOMENT_TOL,
    })
}

/// `2 d H (2 + ln(2 H T))`.
pub fn dc_bound_linear(d: usize, horizon: usize, episodes: usize) -> f64 {
    let (d, h, t) = (d as f64, horizon as f64, episodes as f64);
    2.0 * d * h * (2.0 + (2.0 * h * t).ln())
}

/// One `(t, h)` term of the decoupling inequality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcRow {
    /// 1-based episode.
    pub t: usize,
    /// 1-based step.
    pub h: usize,
    /// `E_{pi_t}[E^{mu_{f_t}}_h(g_t)]`.
    pub lhs_term: f64,
    /// `sum_{s<t} (E_{pi_s}[E^{mu_{f_t}}_h(g_t)])^2`.
    pub rhs_inner: f64,
}

/// Both sides of the decoupling inequality along a realized run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcTrace {
    pub horizon: usize,
    pub episodes: usize,
    pub rows: Vec<DcRow>,
    pub lhs_total: f64,
    pub rhs_total: f64,
}

impl DcTrace {
    /// `diag.csv` contents.
    pub fn to_csv(&self) -> String {
        use crate::format::fmt_g12;
        let mut out = String::from("t,h,lhs_term,rhs_inner\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.t, r.h, fmt_g12(r.lhs_term), fmt_g12(r.rhs_inner)));
        }
        out
    }
}

/// Policies `(mu_{f_t}, nu_{f_t, g_t})` of a recorded run.
pub fn trace_policies(fc: &FunctionClass, artifacts: &[EpisodeArtifact]) -> Result<Vec<(MarkovPolicy, MarkovPolicy)>> {
    artifacts
        .iter()
        .map(|art| {
            if art.f_idx.len() != fc.horizon() || art.g_idx.len() != fc.horizon() {
                return Err(Error::MissingArtifacts(format!("episode {} has malformed indices", art.episode)));
            }
            for (h, (&f, &g)) in art.f_idx.iter().zip(&art.g_idx).enumerate() {
                if f >= fc.size(h) || g >= fc.size(h) {
                    return Err(Error::MissingArtifacts(format!(
                        "episode {} references a member outside the class",
                        art.episode
                    )));
                }
            }
            let mu = fc.induced(&art.f_idx).mu;
            let layers: Vec<&QLayer> = art.g_idx.iter().enumerate().map(|(h, &k)| fc.layer(h, k)).collect();
            let nu = booster_response(&mu, &layers)?;
            Ok((mu, nu))
        })
        .collect()
}

/// Exact decoupling trace of a recorded run.
pub fn dc_trace(
    mg: &TabularMG,
    fc: &FunctionClass,
    artifacts: &[EpisodeArtifact],
    exec: Execution,
) -> Result<DcTrace> {
    if artifacts.is_empty() {
        return Err(Error::MissingArtifacts("the run recorded no (f_t, g_t) pairs".into()));
    }
    for (i, a) in artifacts.iter().enumerate() {
        if a.episode != i + 1 {
            return Err(Error::MissingArtifacts(format!("episode {} is missing", i + 1)));
        }
    }
    fc.check_game(mg)?;
    let policies = trace_policies(fc, artifacts)?;
    let occupancies: Vec<OccupancyMeasure> = exec
        .try_map_range(policies.len(), |s| compute_occupancy(mg, &policies[s].0, &policies[s].1))?;
    let hn = mg.horizon();
    let per_t = exec.try_map_range(artifacts.len(), |t| -> Result<Vec<DcRow>> {
        let g = fc.function(&artifacts[t].g_idx);
        let res = residuals_mu(mg, &g, &policies[t].0)?;
        Ok((0..hn)
            .map(|h| {
                let rhs_inner = occupancies[..t]
                    .iter()
                    .map(|occ| occ.expect(h, &res.layers[h]).powi(2))
                    .sum();
                DcRow {
                    t: t + 1,
                    h: h + 1,
                    lhs_term: occupancies[t].expect(h, &res.layers[h]),
                    rhs_inner,
                }
            })
            .collect())
    })?;
    let rows: Vec<DcRow> = per_t.into_iter().flatten().collect();
    Ok(DcTrace {
        horizon: hn,
        episodes: artifacts.len(),
        lhs_total: rows.iter().map(|r| r.lhs_term).sum(),
        rhs_total: rows.iter().map(|r| r.rhs_inner).sum(),
        rows,
    })
}

/// Decoupling inequality at one `mu`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcCheck {
    pub mu: f64,
    pub lhs: f64,
    /// `mu * rhs_total + K / (4 mu)`.
    pub rhs: f64,
    pub pass: bool,
}

/// Realized-trace decoupling check at each `mu`.
pub fn check_dc(trace: &DcTrace, mus: &[f64], k: f64) -> Vec<DcCheck> {
    mus.iter()
        .map(|&mu| {
            let rhs = mu * trace.rhs_total + k / (4.0 * mu);
            DcCheck {
                mu,
                lhs: trace.lhs_total,
                rhs,
                pass: trace.lhs_total <= rhs,
            }
        })
        .collect()
}

/// The three quantities of the elliptical potential sandwich.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipticalReport {
    /// `ln det Lambda_t - ln det Lambda_0`.
    pub log_det_ratio: f64,
    /// `sum_i phi_i^T Lambda_{i-1}^{-1} phi_i`.
    pub quad_sum: f64,
    pub ok: bool,
}

fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    let chol = m.clone().cholesky()?;
    Some(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Checks `ln(det L_t / det L_0) <= sum phi^T L^{-1} phi <= 2 ln(det L_t / det L_0)`
/// for `L_i = L_0 + sum_{j <= i} phi_j phi_j^T`.
pub fn elliptical_potential_check(vectors: &[Vec<f64>], lambda0: &DMatrix<f64>) -> Result<EllipticalReport> {
    let d = lambda0.nrows();
    if lambda0.ncols() != d || d == 0 {
        return Err(Error::dims("Lambda_0 must be a non-empty square matrix"));
    }
    if lambda0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Lambda_0".into()));
    }
    if (lambda0 - lambda0.transpose()).amax() > 1e-12 {
        return Err(Error::pre("Lambda_0 must be symmetric"));
    }
    let min_eig = SymmetricEigen::new(lambda0.clone()).eigenvalues.min();
    if min_eig < 1.0 - 1e-12 {
        return Err(Error::pre(format!("smallest eigenvalue of Lambda_0 is {min_eig} < 1")));
    }
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != d {
            return Err(Error::dims(format!("vector {i} has length {}, expected {d}", v.len())));
        }
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(norm <= 1.0 + 1e-12) {
            return Err(Error::pre(format!("vector {i} has norm {norm} > 1")));
        }
    }
    let base = log_det_spd(lambda0).ok_or_else(|| Error::pre("Lambda_0 is not positive definite"))?;
    let mut lam = lambda0.clone();
    let mut quad_sum = 0.0;
    for v in vectors {
        let phi = DVector::from_column_slice(v);
        let chol = lam.clone().cholesky().expect("stays positive definite");
        quad_sum += phi.dot(&chol.solve(&phi));
        lam += &phi * phi.transpose();
    }
    let log_det_ratio = log_det_spd(&lam).expect("stays positive definite") - base;
    let tol = 1e-10 * (1.0 + quad_sum);
    Ok(EllipticalReport {
        log_det_ratio,
        quad_sum,
        ok: log_det_ratio <= quad_sum + tol && quad_sum <= 2.0 * log_det_ratio + tol,
    })
}

/// Pass/fail summary of one family of checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub name: String,
    pub probes: usize,
    pub failures: usize,
    /// Most adverse value seen: smallest slack for inequalities, largest
    /// deviation for equalities.
    pub extremal: f64,
    pub pass: bool,
}

impl CheckSummary {
    fn from_values(name: &str, values: &[(f64, bool)], take_min: bool) -> Self {
        let failures = values.iter().filter(|(_, ok)| !ok).count();
        let extremal = if take_min {
            values.iter().map(|v| v.0).fold(f64::INFINITY, f64::min)
        } else {
            values.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max)
        };
        CheckSummary {
            name: name.to_string(),
            probes: values.len(),
            failures,
            extremal,
            pass: failures == 0,
        }
    }
}

/// Contents of `lemma_report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub checks: Vec<CheckSummary>,
    /// Decoupling checks; empty for probe batteries.
    pub dc: Vec<DcCheck>,
    /// `K` used for the decoupling checks.
    pub dc_k: Option<f64>,
    pub dc_label: Option<String>,
    pub pass: bool,
}

impl LemmaReport {
    fn new(checks: Vec<CheckSummary>, dc: Vec<DcCheck>, dc_k: Option<f64>) -> Self {
        let pass = checks.iter().all(|c| c.pass) && dc.iter().all(|c| c.pass);
        let dc_label = dc_k.map(|_| "realized-trace dc check".to_string());
        LemmaReport {
            checks,
            dc,
            dc_k,
            dc_label,
            pass,
        }
    }
}

/// Which residual table to corrupt before running the decomposition checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fault {
    None,
    /// Adds 1 to the whole first layer of every residual table the checks consume.
    CorruptResidual,
}

fn corrupt(mut res: ResidualReport, fault: Fault) -> ResidualReport {
    if fault == Fault::CorruptResidual {
        // Step 0 carries unit mass, so this moves every expectation by 1.
        for v in &mut res.layers[0] {
            *v += 1.0;
        }
    }
    res
}

/// Sizes of a random probe battery.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeCounts {
    pub lemma_main: usize,
    pub lemma_booster: usize,
    pub moments: usize,
    pub elliptical: usize,
}

impl Default for ProbeCounts {
    fn default() -> Self {
        ProbeCounts {
            lemma_main: 200,
            lemma_booster: 200,
            moments: 1000,
            elliptical: 1000,
        }
    }
}

/// Random `(f, nu)`, `(f, g)`, `(f, h, x, a, b)` and elliptical probes on `mg`.
/// Functions are drawn with entries in `[0, beta - 1]`.
pub fn probe_battery(
    mg: &TabularMG,
    beta: f64,
    counts: ProbeCounts,
    seed: u64,
    fault: Fault,
    exec: Execution,
) -> Result<LemmaReport> {
    let (hn, xn, an, bn) = (mg.horizon(), mg.num_states(), mg.num_a(), mg.num_b());
    let probe_seed = |family: u64, i: usize| seed.wrapping_mul(1_000_003).wrapping_add(family << 40).wrapping_add(i as u64);

    let main = exec.try_map_range(counts.lemma_main, |i| -> Result<(f64, bool)> {
        let s = probe_seed(1, i);
        let f = gen_random_qfunction(mg, beta, s);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let nu = MarkovPolicy::random(Side::Min, hn, xn, bn, &mut rng);
        let res = corrupt(residuals(mg, &f)?, fault);
        let c = check_lemma_main_with(mg, &f, &nu, &res)?;
        Ok((c.slack, c.pass))
    })?;
    let booster = exec.try_map_range(counts.lemma_booster, |i| -> Result<(f64, bool)> {
        let s = probe_seed(2, i);
        let f = gen_random_qfunction(mg, beta, s);
        let g = gen_random_qfunction(mg, beta, s ^ 0x9e37_79b9);
        let mu = induce_policy(&f).mu;
        let res = corrupt(residuals_mu(mg, &g, &mu)?, fault);
        let c = check_lemma_booster_with(mg, &f, &g, &res)?;
        Ok((c.slack, c.pass))
    })?;
    let moments_probe = |family: u64| {
        exec.try_map_range(counts.moments, move |i| -> Result<(f64, bool)> {
            let s = probe_seed(family, i);
            let f = gen_random_qfunction(mg, beta, s);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (h, x, a, b) = (
                rng.random_range(0..hn),
                rng.random_range(0..xn),
                rng.random_range(0..an),
                rng.random_range(0..bn),
            );
            let m = if family == 3 {
                excess_loss_moments(mg, &f, beta, h, x, a, b)?
            } else {
                let mu = MarkovPolicy::random(Side::Max, hn, xn, an, &mut rng);
                excess_loss_moments_mu(mg, &f, &mu, beta, h, x, a, b)?
            };
            let dev = (m.mean - m.residual_sq).abs().max(m.second_moment - m.variance_bound);
            Ok((dev, m.pass))
        })
    };
    let moments_main = moments_probe(3)?;
    let moments_booster = moments_probe(4)?;
    let elliptical = exec.try_map_range(counts.elliptical, |i| -> Result<(f64, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(probe_seed(5, i));
        let d = rng.random_range(1..=6);
        let n = rng.random_range(0..=40);
        let vectors = random_ball_vectors(d, n, &mut rng);
        let r = elliptical_potential_check(&vectors, &DMatrix::identity(d, d))?;
        let margin = (r.quad_sum - r.log_det_ratio).min(2.0 * r.log_det_ratio - r.quad_sum);
        Ok((margin, r.ok))
    })?;

    Ok(LemmaReport::new(
        vec![
            CheckSummary::from_values("lemma_main", &main, true),
            CheckSummary::from_values("lemma_booster", &booster, false),
            CheckSummary::from_values("excess_loss_main", &moments_main, false),
            CheckSummary::from_values("excess_loss_booster", &moments_booster, false),
            CheckSummary::from_values("elliptical_potential", &elliptical, true),
        ],
        Vec::new(),
        None,
    ))
}

/// Vectors drawn uniformly in direction with norms uniform in `[0, 1]`.
pub fn random_ball_vectors<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let norm = raw.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-300);
            let r: f64 = rng.random();
            raw.into_iter().map(|c| c / norm * r).collect()
        })
        .collect()
}

/// Decomposition checks on every recorded episode plus the realized
/// decoupling check with `K = 2 d H (2 + ln(2 H T))`, `d = |X||A||B|`.
pub fn run_battery(
    mg: &TabularMG,
    fc: &FunctionClass,
    artifacts: &[EpisodeArtifact],
    fault: Fault,
    exec: Execution,
) -> Result<(LemmaReport, DcTrace)> {
    let trace = dc_trace(mg, fc, artifacts, exec)?;
    let policies = trace_policies(fc, artifacts)?;
    let main = exec.try_map_range(artifacts.len(), |t| -> Result<(f64, bool)> {
        let f = fc.function(&artifacts[t].f_idx);
        let res = corrupt(residuals(mg, &f)?, fault);
        let c = check_lemma_main_with(mg, &f, &policies[t].1, &res)?;
        Ok((c.slack, c.pass))
    })?;
    let booster = exec.try_map_range(artifacts.len(), |t| -> Result<(f64, bool)> {
        let f = fc.function(&artifacts[t].f_idx);
        let g = fc.function(&artifacts[t].g_idx);
        let res = corrupt(residuals_mu(mg, &g, &policies[t].0)?, fault);
        let c = check_lemma_booster_with(mg, &f, &g, &res)?;
        Ok((c.slack, c.pass))
    })?;
    let d = mg.num_states() * mg.num_a() * mg.num_b();
    let k = dc_bound_linear(d, mg.horizon(), artifacts.len());
    let dc = check_dc(&trace, &DC_MUS, k);
    let report = LemmaReport::new(
        vec![
            CheckSummary::from_values("lemma_main", &main, true),
            CheckSummary::from_values("lemma_booster", &booster, false),
        ],
        dc,
        Some(k),
    );
    Ok((report, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::class::{build_closure_class, ClosureOptions};
    use crate::instances::{gen_random_tabular, Dims};
    use crate::selfplay::{run_selfplay, DiagFlags, HyperParams};

    #[test]
    fn nash_and_best_response_have_zero_residuals() {
        let mg = gen_random_tabular(Dims::new(3, 3, 2, 3), 0.0, 1);
        let nash = solve_nash(&mg);
        assert!(residuals(&mg, &nash.q_star).unwrap().sup_norm() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mu = MarkovPolicy::random(Side::Max, 3, 3, 2, &mut rng);
        let br = best_response(&mg, &mu).unwrap();
        assert!(residuals_mu(&mg, &br.q_br, &mu).unwrap().sup_norm() < 1e-10);
    }

    #[test]
    fn residuals_by_hand_summation() {
        let mg = gen_random_tabular(Dims::new(2, 2, 2, 2), 0.0, 2);
        let f = gen_random_qfunction(&mg, 3.0, 5);
        let res = residuals(&mg, &f).unwrap();
        let v1: Vec<f64> = (0..2)
            .map(|x| crate::matrix::solve_matrix_game(&crate::matrix::Matrix::new(2, 2, f.layer(1).matrix(x).to_vec()).unwrap()).value)
            .collect();
        for x in 0..2 {
            for a in 0..2 {
                for b in 0..2 {
                    let p = mg.next_dist(0, x, a, b);
                    let want = f.layer(0).get(x, a, b) - mg.reward(0, x, a, b) - p[0] * v1[0] - p[1] * v1[1];
                    assert!((res.layers[0][(x * 2 + a) * 2 + b] - want).abs() < 1e-14);
                    let want = f.layer(1).get(x, a, b) - mg.reward(1, x, a, b);
                    assert!((res.layers[1][(x * 2 + a) * 2 + b] - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn lemma_main_cases() {
        let mg = gen_random_tabular(Dims::new(3, 3, 2, 2), 0.0, 3);
        let nash = solve_nash(&mg);
        let c = check_lemma_main(&mg, &nash.q_star, &nash.nu_star).unwrap();
        assert!(c.lhs.abs() < 1e-7 && c.rhs.abs() < 1e-7);

        // nu attaining the inner min of mu_f^T f^h makes the inequality tight.
        let f = gen_random_qfunction(&mg, 4.0, 8);
        let mu = induce_policy(&f).mu;
        let layers: Vec<&QLayer> = f.layers().iter().collect();
        let nu = booster_response(&mu, &layers).unwrap();
        let c = check_lemma_main(&mg, &f, &nu).unwrap();
        assert!(c.pass);
        assert!(c.slack.abs() < 1e-9, "{}", c.slack);
    }

    #[test]
    fn lemma_booster_cases() {
        let mg = gen_random_tabular(Dims::new(3, 2, 3, 2), 0.0, 4);
        let f = gen_random_qfunction(&mg, 4.0, 1);
        let mu = induce_policy(&f).mu;
        let br = best_response(&mg, &mu).unwrap();
        let c = check_lemma_booster(&mg, &f, &br.q_br).unwrap();
        assert!(c.lhs.abs() < 1e-8 && c.rhs.abs() < 1e-8);

        // H = 1, one state: both sides are mu^T g nu - min_b mu^T r.
        let mg = gen_random_tabular(Dims::new(1, 1, 2, 2), 0.0, 5);
        let f = gen_random_qfunction(&mg, 2.0, 2);
        let g = gen_random_qfunction(&mg, 2.0, 3);
        let c = check_lemma_booster(&mg, &f, &g).unwrap();
        let mu = induce_policy(&f).mu;
        let w = mu.row(0, 0);
        let col = |m: &QLayer, b: usize| w[0] * m.get(0, 0, b) + w[1] * m.get(0, 1, b);
        let rcol = |b: usize| w[0] * mg.reward(0, 0, 0, b) + w[1] * mg.reward(0, 0, 1, b);
        let nb = if col(g.layer(0), 1) < col(g.layer(0), 0) { 1 } else { 0 };
        let want = rcol(nb) - rcol(0).min(rcol(1));
        assert!((c.lhs - want).abs() < 1e-14);
        assert!(c.pass);
    }

    #[test]
    fn moment_cases() {
        let mg = gen_random_tabular(Dims::new(2, 3, 2, 2), 0.0, 6);
        let nash = solve_nash(&mg);
        let m = excess_loss_moments(&mg, &nash.q_star, 3.0, 0, 1, 1, 0).unwrap();
        assert!(m.mean.abs() < 1e-12 && m.second_moment < 1e-20);

        // Deterministic transition: Delta L is the constant residual^2.
        let det = TabularMG::from_flat(
            2,
            2,
            1,
            1,
            0,
            vec![0.3, 0.6, 0.2, 0.9],
            vec![0.0, 1.0, 1.0, 0.0, 0.5, 0.5, 0.5, 0.5],
        )
        .unwrap();
        let f = gen_random_qfunction(&det, 3.0, 1);
        let m = excess_loss_moments(&det, &f, 3.0, 0, 0, 0, 0).unwrap();
        assert!((m.mean - m.residual_sq).abs() < 1e-14);
        assert!((m.second_moment - m.residual_sq.powi(2)).abs() < 1e-14);

        // Three successors enumerated by hand.
        let f = gen_random_qfunction(&mg, 3.0, 2);
        let v: Vec<f64> = f.layer(1).game_values();
        let (r, p) = (mg.reward(0, 2, 1, 1), mg.next_dist(0, 2, 1, 1));
        let fv = f.layer(0).get(2, 1, 1);
        let tf = r + p[0] * v[0] + p[1] * v[1] + p[2] * v[2];
        let mean: f64 = (0..3).map(|k| p[k] * ((fv - r - v[k]).powi(2) - (tf - r - v[k]).powi(2))).sum();
        let m = excess_loss_moments(&mg, &f, 3.0, 0, 2, 1, 1).unwrap();
        assert!((m.mean - mean).abs() < 1e-14);
        assert!((m.mean - (fv - tf).powi(2)).abs() < 1e-10);
        assert!(m.pass);
    }

    #[test]
    fn dc_bound_formula() {
        assert!((dc_bound_linear(1, 1, 1) - 2.0 * (2.0 + 2f64.ln())).abs() < 1e-12);
        assert!((dc_bound_linear(1, 1, 1) - 5.3863).abs() < 1e-4);
        assert!((dc_bound_linear(24, 2, 2000) - 96.0 * (2.0 + 8000f64.ln())).abs() < 1e-9);
        assert!((dc_bound_linear(24, 2, 2000) - 1054.7).abs() < 0.1);
    }

    #[test]
    fn elliptical_cases() {
        let r = elliptical_potential_check(&[vec![1.0, 0.0, 0.0]], &DMatrix::identity(3, 3)).unwrap();
        assert!((r.log_det_ratio - 2f64.ln()).abs() < 1e-14);
        assert!((r.quad_sum - 1.0).abs() < 1e-14);
        assert!(r.ok);
        let r = elliptical_potential_check(&[], &DMatrix::identity(2, 2)).unwrap();
        assert_eq!((r.log_det_ratio, r.quad_sum, r.ok), (0.0, 0.0, true));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vs: Vec<Vec<f64>> = random_ball_vectors(4, 100, &mut rng)
            .into_iter()
            .map(|v| {
                let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                v.into_iter().map(|c| c / n).collect()
            })
            .collect();
        assert!(elliptical_potential_check(&vs, &DMatrix::identity(4, 4)).unwrap().ok);
    }

    #[test]
    fn elliptical_preconditions() {
        let id = DMatrix::<f64>::identity(2, 2);
        assert!(elliptical_potential_check(&[vec![1.0, 1.0]], &id).is_err());
        assert!(elliptical_potential_check(&[vec![1.0]], &id).is_err());
        assert!(elliptical_potential_check(&[], &(id.clone() * 0.5)).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.0, 2.0]);
        assert!(elliptical_potential_check(&[], &asym).is_err());
    }

    fn recorded_run(episodes: usize) -> (TabularMG, FunctionClass, Vec<EpisodeArtifact>) {
        let mg = gen_random_tabular(Dims::new(2, 2, 2, 2), 0.0, 7);
        let seeds: Vec<QFunction> = (0..3).map(|s| gen_random_qfunction(&mg, 3.0, s)).collect();
        let (fc, _) = build_closure_class(&mg, &seeds, &ClosureOptions::new(3.0)).unwrap();
        let hp = HyperParams {
            eta: 1.0 / 36.0,
            lambda: 1.0,
            episodes,
            beta: 3.0,
            seed: 4,
        };
        let flags = DiagFlags {
            record_trace: true,
            dump_posterior: false,
        };
        let out = run_selfplay(&mg, &fc, &hp, flags).unwrap();
        (mg, fc, out.artifacts)
    }

    #[test]
    fn dc_single_episode() {
        let (mg, fc, arts) = recorded_run(1);
        let trace = dc_trace(&mg, &fc, &arts, Execution::Sequential).unwrap();
        assert_eq!(trace.rhs_total, 0.0);
        let (mu, nu) = trace_policies(&fc, &arts).unwrap().remove(0);
        let occ = compute_occupancy(&mg, &mu, &nu).unwrap();
        let res = residuals_mu(&mg, &fc.function(&arts[0].g_idx), &mu).unwrap();
        let want: f64 = res.expect(&occ).iter().sum();
        assert!((trace.lhs_total - want).abs() < 1e-15);
        let k = dc_bound_linear(8, 2, 1);
        for c in check_dc(&trace, &DC_MUS, k) {
            assert!(c.pass);
            assert_eq!(c.rhs, k / (4.0 * c.mu));
        }
    }

    #[test]
    fn dc_trace_matches_naive_and_parallel() {
        let (mg, fc, arts) = recorded_run(30);
        let seq = dc_trace(&mg, &fc, &arts, Execution::Sequential).unwrap();
        let par = dc_trace(&mg, &fc, &arts, Execution::Parallel).unwrap();
        assert_eq!(seq, par);
        let pols = trace_policies(&fc, &arts).unwrap();
        let row = seq.rows.iter().find(|r| r.t == 17 && r.h == 1).unwrap();
        let res = residuals_mu(&mg, &fc.function(&arts[16].g_idx), &pols[16].0).unwrap();
        let inner: f64 = (0..16)
            .map(|s| compute_occupancy(&mg, &pols[s].0, &pols[s].1).unwrap().expect(0, &res.layers[0]).powi(2))
            .sum();
        assert!((row.rhs_inner - inner).abs() < 1e-14);
        assert_eq!(seq.to_csv().lines().count(), 1 + 60);
    }

    #[test]
    fn dc_requires_artifacts() {
        let (mg, fc, mut arts) = recorded_run(3);
        assert!(matches!(dc_trace(&mg, &fc, &[], Execution::Sequential), Err(Error::MissingArtifacts(_))));
        arts.remove(1);
        assert!(matches!(dc_trace(&mg, &fc, &arts, Execution::Sequential), Err(Error::MissingArtifacts(_))));
    }

    #[test]
    fn battery_passes_and_detects_faults() {
        let mg = gen_random_tabular(Dims::new(2, 2, 2, 2), 0.0, 8);
        let counts = ProbeCounts {
            lemma_main: 20,
            lemma_booster: 20,
            moments: 50,
            elliptical: 20,
        };
        let ok = probe_battery(&mg, 3.0, counts, 1, Fault::None, Execution::Parallel).unwrap();
        assert!(ok.pass, "{ok:?}");
        let bad = probe_battery(&mg, 3.0, counts, 1, Fault::CorruptResidual, Execution::Parallel).unwrap();
        assert!(!bad.pass);
        assert!(!bad.checks.iter().find(|c| c.name == "lemma_booster").unwrap().pass);

        let (mg, fc, arts) = recorded_run(40);
        let (report, trace) = run_battery(&mg, &fc, &arts, Fault::None, Execution::Parallel).unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.dc.len(), 4);
        assert_eq!(report.dc[0].lhs, trace.lhs_total);
        let (report, _) = run_battery(&mg, &fc, &arts, Fault::CorruptResidual, Execution::Parallel).unwrap();
        assert!(!report.pass);
    }
}
