use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::LogPartition;
use crate::numeric::{Axis, Tape, Tensor, Var};

/// Per-iteration loss terms. `total = expert_term + gamma * (gating_mse +
/// gating_repulsion + gating_entropy) + aux_term`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub expert_term: f64,
    pub gating_mse: f64,
    pub gating_repulsion: f64,
    pub gating_entropy: f64,
    /// Method-specific extra term (the weighted balancing penalty of the
    /// gated baseline); zero otherwise.
    pub aux_term: f64,
    pub total: f64,
    pub gamma: f64,
    pub warmup: bool,
}

impl LossBreakdown {
    pub fn recombined(&self) -> f64 {
        self.expert_term + self.gamma * (self.gating_mse + self.gating_repulsion + self.gating_entropy) + self.aux_term
    }
}

/// The gating half of the joint loss on the tape, plus its three parts.
#[derive(Clone, Copy, Debug)]
pub struct GatingTerms {
    /// `gamma * (mse + repulsion + entropy)`.
    pub loss: Var,
    pub mse: f64,
    pub repulsion: f64,
    pub entropy: f64,
}

/// `gamma * sum_e sum_i pi(o_i|e) (mse_ie - beta log pi~(e|o_i) + beta log pi(o_i|e))`.
///
/// `energies` is `[B, K]`; `detached_mse` is `[B, K]` and must already be
/// behind a stop-gradient. `pi(o|e)` is the column softmax of the energies;
/// `pi~(e|o)` is its row renormalization (uniform expert prior) behind a
/// stop-gradient.
pub fn gating_objective(tape: &mut Tape<'_>, energies: Var, detached_mse: Var, beta: f32, gamma: f32) -> Result<GatingTerms> {
    let (e, m) = (tape.value(energies), tape.value(detached_mse));
    if e.shape() != m.shape() {
        return Err(Error::dim("gating_objective", format!("{:?}", e.shape()), format!("{:?}", m.shape())));
    }
    let log_cond = tape.log_softmax(energies, Axis::Cols);
    let log_post = tape.log_softmax(log_cond, Axis::Rows);
    let log_post = tape.stop_gradient(log_post);
    let cond = tape.exp(log_cond);

    let rep = tape.scale(log_post, -beta);
    let ent = tape.scale(log_cond, beta);
    let inner = tape.add(detached_mse, rep)?;
    let inner = tape.add(inner, ent)?;
    let weighted = tape.mul(cond, inner)?;
    let sum = tape.sum_all(weighted);
    let loss = tape.scale(sum, gamma);

    let weigh = |x: &Tensor, c: f64| -> f64 {
        tape.value(cond)
            .data()
            .iter()
            .zip(x.data())
            .map(|(&p, &v)| p as f64 * v as f64 * c)
            .sum()
    };
    Ok(GatingTerms {
        loss,
        mse: weigh(tape.value(detached_mse), 1.0),
        repulsion: weigh(tape.value(log_post), -(beta as f64)),
        entropy: weigh(tape.value(log_cond), beta as f64),
    })
}

/// `KL(p(o) || pi(o))` with `p` uniform over the `N` rows of `energies`
/// and `pi(o) = (1/K) sum_e exp(g(o, e) - log Z_e)`. Clamped at zero.
pub fn kl_diagnostic(energies: &Tensor, log_z: &LogPartition) -> Result<f64> {
    let (n, k) = (energies.rows(), energies.cols());
    if n == 0 || log_z.log_z.len() != k {
        return Err(Error::dim("kl_diagnostic", format!("{k} experts over >= 1 rows"), format!("{} over {n}", log_z.log_z.len())));
    }
    let ln_n = (n as f64).ln();
    let ln_k = (k as f64).ln();
    let mut kl = 0.0f64;
    for i in 0..n {
        let terms: Vec<f64> = energies
            .row(i)
            .iter()
            .zip(&log_z.log_z)
            .map(|(&g, &z)| g as f64 - z as f64)
            .collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_pi = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln() - ln_k;
        kl += -ln_n - log_pi;
    }
    Ok((kl / n as f64).max(0.0))
}
