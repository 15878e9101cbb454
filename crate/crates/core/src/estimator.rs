//! Deviation scores π_J, selection σ(k) and the fused estimate.

use std::collections::BTreeMap;

use nalgebra::DVector;

use crate::combinatorics::{BankIndex, BankKey, SubsetIndex};
use crate::error::{Error, Result};
use crate::observers::IssGainModel;

/// Estimates of every bank member at one step.
pub type EstimateMap = BTreeMap<BankKey, DVector<f64>>;

/// Euclidean distance, with anything non-finite mapped to `+inf`.
pub fn deviation(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let d = (a - b).norm();
    if d.is_finite() {
        d
    } else {
        f64::INFINITY
    }
}

/// `π_J = max_{S ⊂ J} |x̂_J - x̂_S|`.
pub fn compute_pi(j: &SubsetIndex, estimates: &EstimateMap, bank: &BankIndex) -> Result<f64> {
    let pos = bank
        .j_position(j)
        .ok_or_else(|| Error::MissingEstimate(format!("{j} is not a J-class subset")))?;
    let jk = BankKey::j(j.clone());
    let xj = estimates
        .get(&jk)
        .ok_or_else(|| Error::MissingEstimate(jk.to_string()))?;
    let mut pi = 0.0f64;
    for s in bank.contained_in(pos) {
        let sk = BankKey::s(s.clone());
        let xs = estimates
            .get(&sk)
            .ok_or_else(|| Error::MissingEstimate(sk.to_string()))?;
        pi = pi.max(deviation(xj, xs));
    }
    Ok(pi)
}

/// Index of the smallest π, ties to the earliest entry. `NaN` counts as `+inf`.
pub fn select_sigma(k: usize, pi: &[(SubsetIndex, f64)]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (_, v)) in pi.iter().enumerate() {
        let v = if v.is_nan() { f64::INFINITY } else { *v };
        if v.is_finite() && best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::EstimatorStarved { step: k })
}

#[derive(Clone, Debug)]
pub struct EstimatorFrame {
    pub k: usize,
    pub estimates: EstimateMap,
    /// One entry per J-class subset, canonical order.
    pub pi: Vec<(SubsetIndex, f64)>,
    pub sigma: SubsetIndex,
    pub x_hat: DVector<f64>,
    /// `|x̂(k) - x(k)|` when the truth is known.
    pub error: Option<f64>,
}

impl EstimatorFrame {
    pub fn sigma_pi(&self) -> f64 {
        self.pi
            .iter()
            .find(|(j, _)| *j == self.sigma)
            .map(|(_, v)| *v)
            .unwrap_or(f64::INFINITY)
    }
}

pub fn estimator_step(
    k: usize,
    estimates: EstimateMap,
    bank: &BankIndex,
    truth: Option<&DVector<f64>>,
) -> Result<EstimatorFrame> {
    let pi = bank
        .j_list
        .iter()
        .map(|j| compute_pi(j, &estimates, bank).map(|v| (j.clone(), v)))
        .collect::<Result<Vec<_>>>()?;
    let idx = select_sigma(k, &pi)?;
    let sigma = pi[idx].0.clone();
    let x_hat = estimates[&BankKey::j(sigma.clone())].clone();
    let error = truth.map(|x| (&x_hat - x).norm());
    Ok(EstimatorFrame {
        k,
        estimates,
        pi,
        sigma,
        x_hat,
        error,
    })
}

/// Estimator-level bound obtained from per-observer gains: every term is
/// three times the largest per-observer term, λ the largest rate.
pub fn aggregate_bound(gains: &BTreeMap<BankKey, IssGainModel>, bank: &BankIndex) -> Result<IssGainModel> {
    let mut out = IssGainModel {
        c: 0.0,
        lambda: 0.0,
        gamma1: 0.0,
        gamma2: 0.0,
        nu: 0.0,
        k_star: 0,
    };
    for key in bank.keys() {
        let g = gains
            .get(&key)
            .ok_or_else(|| Error::config(format!("missing ISS gains for {key}")))?;
        out.c = out.c.max(3.0 * g.c);
        out.lambda = out.lambda.max(g.lambda);
        out.gamma1 = out.gamma1.max(3.0 * g.gamma1);
        out.gamma2 = out.gamma2.max(3.0 * g.gamma2);
        out.nu = out.nu.max(3.0 * g.nu);
        out.k_star = out.k_star.max(g.k_star);
    }
    Ok(out)
}
