//! Probability that a round's random selection contains too many malicious
//! clients.

use serde::Serialize;

use crate::error::{Error, Result};

/// How the malicious-count cutoff `k0` is given.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cutoff {
    /// Derive `k0 = ceil(0.75 * threshold * n)` from a fraction of the
    /// selected clients.
    Threshold(f64),
    /// Count `k0` directly.
    K0(usize),
}

impl Cutoff {
    pub fn k0(self, n_selected: usize) -> Result<usize> {
        match self {
            Cutoff::K0(k) => Ok(k),
            Cutoff::Threshold(t) => {
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::config("threshold", "must lie in [0, 1]"));
                }
                Ok((0.75 * t * n_selected as f64 - 1e-9).ceil().max(0.0) as usize)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RoundProbability {
    pub k0: usize,
    pub rounds: u64,
    /// `P(X >= k0)` for `X ~ Binomial(n_selected, p)`.
    pub per_round: f64,
    /// `1 - (1 - per_round)^rounds`.
    pub at_least_once: f64,
}

/// `ln P(X >= k0)` summed in log space, `None` when the tail is empty.
fn log_tail(n: usize, p: f64, k0: usize) -> Option<f64> {
    if k0 > n || (p == 0.0 && k0 > 0) {
        return None;
    }
    if k0 == 0 || p == 1.0 {
        return Some(0.0);
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    // ln C(n, k0) by telescoping product
    let mut ln_choose = 0.0;
    for i in 1..=k0 {
        ln_choose += ((n - k0 + i) as f64 / i as f64).ln();
    }
    let mut terms = Vec::with_capacity(n - k0 + 1);
    let mut term = ln_choose + k0 as f64 * lp + (n - k0) as f64 * lq;
    for k in k0..=n {
        terms.push(term);
        if k < n {
            term += ((n - k) as f64 / (k + 1) as f64).ln() + lp - lq;
        }
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
}

/// Binomial tail of the malicious count in one round of `n_selected`
/// clients, and the chance that it happens in at least one of `rounds`
/// independent rounds.
pub fn malicious_round_probability(
    n_selected: usize,
    malicious_fraction: f64,
    cutoff: Cutoff,
    rounds: u64,
) -> Result<RoundProbability> {
    if !(0.0..=1.0).contains(&malicious_fraction) {
        return Err(Error::config("p", "must lie in [0, 1]"));
    }
    let k0 = cutoff.k0(n_selected)?;
    let per_round = log_tail(n_selected, malicious_fraction, k0).map_or(0.0, |l| l.exp().min(1.0));
    let at_least_once = if per_round >= 1.0 {
        if rounds > 0 {
            1.0
        } else {
            0.0
        }
    } else {
        -(rounds as f64 * (-per_round).ln_1p()).exp_m1()
    };
    Ok(RoundProbability {
        k0,
        rounds,
        per_round,
        at_least_once,
    })
}
