//! Ground truth the learner never sees: Nash values, best responses, and the
//! two Bellman operators `T_h` and `T_h^mu`.

use serde::{Deserialize, Serialize};

use crate::class::{QFunction, QLayer};
use crate::game::{MarkovPolicy, Side, TabularMG, ValueTable};
use crate::matrix::{self, argmax_first, argmin_first, MatrixGameSolution};
use crate::{Error, Result};

/// Nash Q/V tables and one equilibrium policy pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NashSolution {
    pub q_star: QFunction,
    pub v_star: ValueTable,
    pub mu_star: MarkovPolicy,
    pub nu_star: MarkovPolicy,
}

impl NashSolution {
    /// `V*_1(x^1)`.
    pub fn value(&self, mg: &TabularMG) -> f64 {
        self.v_star.get(0, mg.initial_state())
    }
}

/// Backward induction with a matrix game at every `(h, x)`.
pub fn solve_nash(mg: &TabularMG) -> NashSolution {
    let (hn, xn, an, bn) = (mg.horizon(), mg.num_states(), mg.num_a(), mg.num_b());
    let mut v = ValueTable::zeros(hn, xn);
    let mut layers = vec![QLayer::zeros(xn, an, bn); hn];
    let mut mu_rows = vec![Vec::new(); hn * xn];
    let mut nu_rows = vec![Vec::new(); hn * xn];
    for h in (0..hn).rev() {
        let q = QLayer::from_flat(xn, an, bn, mg.backup(h, v.step(h + 1)));
        let sols: Vec<MatrixGameSolution> = (0..xn)
            .map(|x| matrix::solve_flat(an, bn, q.matrix(x)))
            .collect();
        for (x, s) in sols.into_iter().enumerate() {
            v.step_mut(h)[x] = s.value;
            mu_rows[h * xn + x] = s.row_strategy;
            nu_rows[h * xn + x] = s.col_strategy;
        }
        layers[h] = q;
    }
    NashSolution {
        q_star: QFunction::new(layers),
        v_star: v,
        mu_star: MarkovPolicy::from_flat(Side::Max, hn, xn, an, mu_rows.concat())
            .expect("solver returns distributions"),
        nu_star: MarkovPolicy::from_flat(Side::Min, hn, xn, bn, nu_rows.concat())
            .expect("solver returns distributions"),
    }
}

/// Best response of the min-player to a fixed max-player policy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BestResponseSolution {
    pub q_br: QFunction,
    pub v_br: ValueTable,
    pub nu_br: MarkovPolicy,
}

/// Best response of the max-player to a fixed min-player policy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaxBestResponseSolution {
    pub q_br: QFunction,
    pub v_br: ValueTable,
    pub mu_br: MarkovPolicy,
}

/// `Q^{mu,dagger}`, `V^{mu,dagger}` and a deterministic minimising response
/// (lowest action index on ties).
pub fn best_response(mg: &TabularMG, mu: &MarkovPolicy) -> Result<BestResponseSolution> {
    mg.check_policy(mu, Side::Max)?;
    let (hn, xn, an, bn) = (mg.horizon(), mg.num_states(), mg.num_a(), mg.num_b());
    let mut v = ValueTable::zeros(hn, xn);
    let mut layers = vec![QLayer::zeros(xn, an, bn); hn];
    let mut actions = vec![0; hn * xn];
    for h in (0..hn).rev() {
        let q = QLayer::from_flat(xn, an, bn, mg.backup(h, v.step(h + 1)));
        for x in 0..xn {
            let payoffs = matrix::row_payoffs(q.matrix(x), bn, mu.row(h, x));
            let (val, b) = argmin_first(&payoffs);
            v.step_mut(h)[x] = val;
            actions[h * xn + x] = b;
        }
        layers[h] = q;
    }
    Ok(BestResponseSolution {
        q_br: QFunction::new(layers),
        v_br: v,
        nu_br: MarkovPolicy::deterministic(Side::Min, hn, xn, bn, &actions)?,
    })
}

/// The symmetric entry point: `Q^{dagger,nu}`, `V^{dagger,nu}` and a maximising response.
pub fn best_response_to_min(mg: &TabularMG, nu: &MarkovPolicy) -> Result<MaxBestResponseSolution> {
    mg.check_policy(nu, Side::Min)?;
    let (hn, xn, an, bn) = (mg.horizon(), mg.num_states(), mg.num_a(), mg.num_b());
    let mut v = ValueTable::zeros(hn, xn);
    let mut layers = vec![QLayer::zeros(xn, an, bn); hn];
    let mut actions = vec![0; hn * xn];
    for h in (0..hn).rev() {
        let q = QLayer::from_flat(xn, an, bn, mg.backup(h, v.step(h + 1)));
        for x in 0..xn {
            let payoffs: Vec<f64> = q
                .matrix(x)
                .chunks_exact(bn)
                .map(|row| row.iter().zip(nu.row(h, x)).map(|(m, p)| m * p).sum())
                .collect();
            let (val, a) = argmax_first(&payoffs);
            v.step_mut(h)[x] = val;
            actions[h * xn + x] = a;
        }
        layers[h] = q;
    }
    Ok(MaxBestResponseSolution {
        q_br: QFunction::new(layers),
        v_br: v,
        mu_br: MarkovPolicy::deterministic(Side::Max, hn, xn, an, &actions)?,
    })
}

fn check_next(mg: &TabularMG, f_next: Option<&QLayer>, h: usize) -> Result<()> {
    if h >= mg.horizon() {
        return Err(Error::dims(format!("step {h} beyond horizon {}", mg.horizon())));
    }
    if let Some(layer) = f_next {
        layer.check_game(mg)?;
        if h + 1 == mg.horizon() {
            return Err(Error::pre("the layer after the last step is the zero function"));
        }
    }
    Ok(())
}

/// `(T_h f)(x,a,b) = r^h + P_h V_{f,h+1}` where `V_{f,h+1}` is the matrix-game
/// value of `f_next` at each state. `None` stands for the terminal zero layer.
pub fn bellman_apply(mg: &TabularMG, f_next: Option<&QLayer>, h: usize) -> Result<QLayer> {
    check_next(mg, f_next, h)?;
    let next_v = match f_next {
        Some(layer) => layer.game_values(),
        None => vec![0.0; mg.num_states()],
    };
    Ok(QLayer::from_flat(
        mg.num_states(),
        mg.num_a(),
        mg.num_b(),
        mg.backup(h, &next_v),
    ))
}

/// `(T_h^mu f)(x,a,b) = r^h + P_h V^mu_{f,h+1}` with the min over pure columns of
/// the `mu_{h+1}`-averaged rows of `f_next`.
pub fn bellman_apply_mu(
    mg: &TabularMG,
    f_next: Option<&QLayer>,
    mu: &MarkovPolicy,
    h: usize,
) -> Result<QLayer> {
    check_next(mg, f_next, h)?;
    mg.check_policy(mu, Side::Max)?;
    let next_v = match f_next {
        Some(layer) => layer.min_values(mu, h + 1),
        None => vec![0.0; mg.num_states()],
    };
    Ok(QLayer::from_flat(
        mg.num_states(),
        mg.num_a(),
        mg.num_b(),
        mg.backup(h, &next_v),
    ))
}
