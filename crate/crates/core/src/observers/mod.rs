//! Subset-indexed observers, gain certificates and ISS gain calibration.

mod calibration;
mod circle;
mod luenberger;
mod reduced;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::combinatorics::SubsetIndex;
use crate::error::{Error, Result};
use crate::model::{PlantModel, ScalarFn};

pub use calibration::{estimate_iss_gains, CalibrationSettings, IssGainModel};
pub use circle::CircleCriterionObserver;
pub use luenberger::LuenbergerObserver;
pub use reduced::{build_reduced_observer, ReducedOrderObserver};

/// Observer contract: one step consumes `y^J(k)` and `u(k)` and returns `x̂_J(k)`.
///
/// All families follow the same schedule so that estimates compared inside
/// the estimator refer to the same time step.
pub trait Observer: Send + Sync {
    fn subset(&self) -> &SubsetIndex;
    fn family(&self) -> ObserverFamily;
    fn step(&mut self, y_j: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// Restarts from the state estimate `x_hat0`.
    fn reset(&mut self, x_hat0: &DVector<f64>);
    /// Internal state `z_J`.
    fn internal_state(&self) -> &DVector<f64>;
    /// Sticky flag set once the internal state stops being finite.
    fn is_diverged(&self) -> bool;
    fn boxed_clone(&self) -> Box<dyn Observer>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverFamily {
    Luenberger,
    ReducedOrder,
    CircleCriterion,
}

/// Gain matrices for one bank member.
#[derive(Clone, Debug)]
pub enum ObserverGains {
    /// `K`: n x card(J)
    Luenberger { k: DMatrix<f64> },
    /// `L`: (n - card(J)) x n, `K`: (n - card(J)) x card(J)
    ReducedOrder { l: DMatrix<f64>, k: DMatrix<f64> },
    /// `K`: r x card(J), `L`: n x card(J)
    CircleCriterion { k: DMatrix<f64>, l: DMatrix<f64> },
}

impl ObserverGains {
    pub fn family(&self) -> ObserverFamily {
        match self {
            ObserverGains::Luenberger { .. } => ObserverFamily::Luenberger,
            ObserverGains::ReducedOrder { .. } => ObserverFamily::ReducedOrder,
            ObserverGains::CircleCriterion { .. } => ObserverFamily::CircleCriterion,
        }
    }
}

pub(crate) fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn shape_error(subset: &SubsetIndex, what: &str, want: (usize, usize), got: &DMatrix<f64>) -> Error {
    Error::Construction {
        subset: subset.to_string(),
        reason: format!(
            "{what} must be {}x{}, got {}x{}",
            want.0,
            want.1,
            got.nrows(),
            got.ncols()
        ),
    }
}

pub(crate) fn check_shape(
    subset: &SubsetIndex,
    what: &str,
    want: (usize, usize),
    m: &DMatrix<f64>,
) -> Result<()> {
    if m.shape() == want {
        Ok(())
    } else {
        Err(shape_error(subset, what, want, m))
    }
}

/// Builds an observer starting at `x_hat0`.
pub fn build_observer(
    plant: Arc<PlantModel>,
    subset: SubsetIndex,
    gains: &ObserverGains,
    x_hat0: &DVector<f64>,
    condition_cap: f64,
) -> Result<Box<dyn Observer>> {
    let mut obs: Box<dyn Observer> = match gains {
        ObserverGains::Luenberger { k } => {
            Box::new(LuenbergerObserver::new(plant, subset, k.clone())?)
        }
        ObserverGains::ReducedOrder { l, k } => Box::new(build_reduced_observer(
            plant,
            subset,
            l.clone(),
            k.clone(),
            condition_cap,
        )?),
        ObserverGains::CircleCriterion { k, l } => {
            Box::new(CircleCriterionObserver::new(plant, subset, k.clone(), l.clone())?)
        }
    };
    obs.reset(x_hat0);
    Ok(obs)
}

/// Largest eigenvalue modulus. Non-finite input gives `+inf`.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    if m.iter().any(|x| !x.is_finite()) {
        return f64::INFINITY;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainCertificate {
    pub spectral_radius: f64,
    pub margin: f64,
    pub passed: bool,
}

impl GainCertificate {
    fn from_matrix(m: &DMatrix<f64>, margin: f64) -> Self {
        let rho = spectral_radius(m);
        GainCertificate {
            spectral_radius: rho,
            margin,
            passed: rho < 1.0 - margin,
        }
    }
}

pub const DEFAULT_GAIN_MARGIN: f64 = 1e-3;

pub enum GainKind<'a> {
    /// `A - K C_J`
    Full,
    /// `(L - K C_J) A N`, the error matrix of the corrected reduced-order update.
    Reduced {
        l: &'a DMatrix<f64>,
        n: &'a DMatrix<f64>,
    },
}

/// Spectral-radius check of the linearized error dynamics.
pub fn certify_linear_gain(
    a: &DMatrix<f64>,
    c_j: &DMatrix<f64>,
    k: &DMatrix<f64>,
    kind: GainKind<'_>,
    margin: f64,
) -> GainCertificate {
    let m = match kind {
        GainKind::Full => a - k * c_j,
        GainKind::Reduced { l, n } => (l - k * c_j) * a * n,
    };
    GainCertificate::from_matrix(&m, margin)
}

/// Error matrix `A + G D H + G D K C_J + L C_J` of the circle-criterion
/// observer, with `D` the channel slopes at the operating point.
pub fn certify_circle_gain(
    a: &DMatrix<f64>,
    g: &DMatrix<f64>,
    slopes: &DMatrix<f64>,
    h: &DMatrix<f64>,
    c_j: &DMatrix<f64>,
    k: &DMatrix<f64>,
    l: &DMatrix<f64>,
    margin: f64,
) -> GainCertificate {
    let gd = g * slopes;
    let m = a + &gd * (h + k * c_j) + l * c_j;
    GainCertificate::from_matrix(&m, margin)
}

/// Certificate for a configured bank member, linearized at `x_op`.
pub fn certify_observer(
    plant: &PlantModel,
    subset: &SubsetIndex,
    gains: &ObserverGains,
    x_op: &DVector<f64>,
    margin: f64,
) -> Result<GainCertificate> {
    let u0 = DVector::zeros(plant.n_u);
    let jac_h = plant.jacobian_h(x_op).select_rows(&subset.rows());
    match gains {
        ObserverGains::Luenberger { k } => {
            let a = plant.jacobian_f(x_op, &u0);
            Ok(certify_linear_gain(&a, &jac_h, k, GainKind::Full, margin))
        }
        ObserverGains::ReducedOrder { l, k } => {
            let a = plant.jacobian_f(x_op, &u0);
            let (n_mat, _) = reduced::block_inverse(subset, l, &jac_h, f64::INFINITY)?;
            Ok(certify_linear_gain(
                &a,
                &jac_h,
                k,
                GainKind::Reduced { l, n: &n_mat },
                margin,
            ))
        }
        ObserverGains::CircleCriterion { k, l } => {
            let sd = plant.structured_dynamics().ok_or_else(|| Error::Construction {
                subset: subset.to_string(),
                reason: "circle-criterion observers need a structured plant".into(),
            })?;
            Ok(certify_circle_gain(
                &sd.a,
                &sd.g,
                &sd.slopes(x_op),
                &sd.h,
                &jac_h,
                k,
                l,
                margin,
            ))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeCertificate {
    pub passed: bool,
    /// `(channel, v, w)` of the first negative difference quotient.
    pub witness: Option<(usize, f64, f64)>,
    pub min_quotient: f64,
    pub samples: usize,
}

/// Samples difference quotients `(f(v) - f(w)) / (v - w)` per channel over the
/// image of `state_box` under `H`.
pub fn check_slope_condition(
    channels: &[ScalarFn],
    h: &DMatrix<f64>,
    samples: usize,
    state_box: &[(f64, f64)],
    seed: u64,
) -> Result<SlopeCertificate> {
    if samples < 2 {
        return Err(Error::config("slope check needs at least 2 samples"));
    }
    if state_box.len() != h.ncols() || channels.len() != h.nrows() {
        return Err(Error::config(format!(
            "slope check: box has {} entries, H is {}x{}, {} channels",
            state_box.len(),
            h.nrows(),
            h.ncols(),
            channels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_q = f64::INFINITY;
    for (i, f) in channels.iter().enumerate() {
        let (mut lo, mut hi) = (0.0, 0.0);
        for (j, (a, b)) in state_box.iter().enumerate() {
            let (ea, eb) = (h[(i, j)] * a, h[(i, j)] * b);
            lo += ea.min(eb);
            hi += ea.max(eb);
        }
        if hi <= lo {
            continue;
        }
        for s in 0..samples {
            let (v, w) = if s == 0 {
                (lo, hi)
            } else {
                (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
            };
            if v == w {
                continue;
            }
            let q = (f.eval(v) - f.eval(w)) / (v - w);
            min_q = min_q.min(q);
            if q < -1e-12 {
                return Ok(SlopeCertificate {
                    passed: false,
                    witness: Some((i + 1, v, w)),
                    min_quotient: q,
                    samples,
                });
            }
        }
    }
    Ok(SlopeCertificate {
        passed: true,
        witness: None,
        min_quotient: min_q,
        samples,
    })
}
