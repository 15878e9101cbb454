use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{all_finite, Observer};
use crate::error::{Error, Result};
use crate::model::{stream, InitialState, PlantModel};

/// Linear ISS bound `|e(k)| <= c λ^k |e(0)| + γ1 m̄ + γ2 d̄ + ν`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IssGainModel {
    pub c: f64,
    pub lambda: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub nu: f64,
    pub k_star: usize,
}

impl IssGainModel {
    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            bad.push(format!("lambda must lie in (0,1), got {}", self.lambda));
        }
        for (name, v) in [
            ("c", self.c),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("nu", self.nu),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                bad.push(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        bad
    }

    /// Steady part `γ1 m̄ + γ2 d̄ + ν`.
    pub fn steady_bound(&self, m_bar: f64, d_bar: f64) -> f64 {
        self.gamma1 * m_bar + self.gamma2 * d_bar + self.nu
    }

    pub fn bound(&self, k: usize, e0: f64, m_bar: f64, d_bar: f64) -> f64 {
        self.c * self.lambda.powi(k as i32) * e0 + self.steady_bound(m_bar, d_bar)
    }

    /// First step where `c λ^k e0 <= tol`.
    pub fn transient_horizon(c: f64, lambda: f64, e0: f64, tol: f64) -> usize {
        if e0 <= 0.0 || c * e0 <= tol {
            return 0;
        }
        ((tol / (c * e0)).ln() / lambda.ln()).ceil().max(0.0) as usize
    }
}

#[derive(Clone, Debug)]
pub struct CalibrationSettings {
    pub noise_bound: f64,
    pub disturbance_bound: f64,
    pub trials: usize,
    pub horizon: usize,
    pub seed: u64,
    pub safety_factor: f64,
    pub initial_state: InitialState,
    /// Radius of the random initial estimation error.
    pub initial_error: f64,
    pub epsilon: f64,
    /// Initial error bound of the run the gains are meant for; 0 when
    /// observers start at the true state.
    pub transient_e0: f64,
    pub divergence_ceiling: f64,
}

impl CalibrationSettings {
    pub fn new(noise_bound: f64, disturbance_bound: f64, trials: usize, horizon: usize, seed: u64) -> Self {
        CalibrationSettings {
            noise_bound,
            disturbance_bound,
            trials,
            horizon,
            seed,
            safety_factor: 1.2,
            initial_state: InitialState::Normal { mean: 0.0, std: 1.0 },
            initial_error: 1.0,
            epsilon: 0.0,
            transient_e0: 0.0,
            divergence_ceiling: 1e12,
        }
    }
}

const FLOOR: f64 = 1e-13;

struct Trial {
    errors: Vec<f64>,
}

fn run_trial(
    obs: &dyn Observer,
    plant: &PlantModel,
    set: &CalibrationSettings,
    phase: &str,
    t: usize,
    m_bar: f64,
    d_bar: f64,
) -> Result<Trial> {
    let subset = obs.subset().clone();
    let name = format!("calibration_{phase}_{}_{t}", subset.joined(","));
    let mut rng = stream(set.seed, &name);
    let fail = |why: String| {
        Error::Calibration(vec![format!(
            "{subset}: trial {t} (seed {}, stream {name}) {why}",
            set.seed
        )])
    };

    let mut x = set.initial_state.sample(plant.n, &mut rng)?;
    let dir = DVector::from_fn(plant.n, |_, _| StandardNormal.sample(&mut rng));
    let x_hat0 = &x + dir.normalize() * set.initial_error;
    let mut o = obs.boxed_clone();
    o.reset(&x_hat0);

    let noise = (m_bar > 0.0).then(|| Uniform::new_inclusive(-m_bar, m_bar).unwrap());
    let dist = (d_bar > 0.0).then(|| Uniform::new_inclusive(-d_bar, d_bar).unwrap());
    let u = DVector::zeros(plant.n_u);
    let rows = subset.rows();
    let mut errors = Vec::with_capacity(set.horizon + 1);
    for k in 0..=set.horizon {
        if !x.iter().all(|v| v.is_finite() && v.abs() <= set.divergence_ceiling) {
            return Err(fail(format!("plant diverged at step {k}")));
        }
        let mut y = plant.output(&x).select_rows(&rows);
        if let Some(nd) = &noise {
            y.iter_mut().for_each(|v| *v += nd.sample(&mut rng));
        }
        let xh = o.step(&y, &u);
        if o.is_diverged() || !all_finite(&xh) {
            return Err(fail(format!("observer diverged at step {k}")));
        }
        errors.push((xh - &x).norm());
        let d = match &dist {
            Some(dd) => DVector::from_fn(plant.s, |_, _| dd.sample(&mut rng)),
            None => DVector::zeros(plant.s),
        };
        x = plant.step(&x, &u, &d, k)?;
    }
    Ok(Trial { errors })
}

fn run_phase(
    obs: &dyn Observer,
    plant: &PlantModel,
    set: &CalibrationSettings,
    phase: &str,
    m_bar: f64,
    d_bar: f64,
) -> Result<Vec<Trial>> {
    (0..set.trials)
        .into_par_iter()
        .map(|t| run_trial(obs, plant, set, phase, t, m_bar, d_bar))
        .collect()
}

fn steady_max(trials: &[Trial], from: usize) -> f64 {
    trials
        .iter()
        .flat_map(|t| t.errors[from..].iter().copied())
        .fold(0.0, f64::max)
}

/// Least-squares slope of `ln r` against `k` over points above the floor.
fn fit_rate(envelope: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = envelope
        .iter()
        .enumerate()
        .filter(|(_, r)| **r > FLOOR)
        .map(|(k, r)| (k as f64, r.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let (sxy, sxx) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + (x - mx) * (y - my), b + (x - mx).powi(2)));
    Some(sxy / sxx)
}

/// Monte-Carlo fit of an [`IssGainModel`] for a single observer.
///
/// Three kinds of attack-free trials are run: noise-free with random initial
/// errors (decay envelope and ν), then noise at `m̄` and disturbance at `d̄`
/// (steady-state level). The steady part is the largest error seen over the
/// second half of the horizon, times the safety factor.
pub fn estimate_iss_gains(
    obs: &dyn Observer,
    plant: &PlantModel,
    set: &CalibrationSettings,
) -> Result<IssGainModel> {
    if set.trials == 0 {
        return Err(Error::config("calibration needs at least one trial"));
    }
    if set.horizon < 4 {
        return Err(Error::config("calibration horizon must be at least 4 steps"));
    }
    if !(set.initial_error > 0.0) {
        return Err(Error::config("calibration initial error radius must be positive"));
    }
    if set.noise_bound < 0.0 || set.disturbance_bound < 0.0 {
        return Err(Error::config("noise and disturbance bounds must be nonnegative"));
    }
    let subset = obs.subset().clone();
    let steady_from = set.horizon / 2;

    let clean = run_phase(obs, plant, set, "clean", 0.0, 0.0)?;
    let nu_raw = steady_max(&clean, steady_from);
    let envelope: Vec<f64> = (0..=set.horizon)
        .map(|k| {
            clean
                .iter()
                .filter(|t| t.errors[0] > FLOOR)
                .map(|t| (t.errors[k] - nu_raw).max(0.0) / t.errors[0])
                .fold(0.0, f64::max)
        })
        .collect();
    let lambda = match fit_rate(&envelope[1..]) {
        Some(s) if s < 0.0 => s.exp().clamp(1e-2, 1.0 - 1e-9),
        Some(_) => {
            return Err(Error::Calibration(vec![format!(
                "{subset}: noise-free error envelope does not decay"
            )]))
        }
        None => 1e-2,
    };
    // points at round-off level carry no decay information
    let c = envelope
        .iter()
        .enumerate()
        .filter(|(_, r)| **r > FLOOR)
        .map(|(k, r)| r / lambda.powi(k as i32))
        .fold(1.0, f64::max);

    let nu = set.safety_factor * nu_raw;
    let (m_bar, d_bar) = (set.noise_bound, set.disturbance_bound);
    let (mut gamma1, mut gamma2) = (0.0, 0.0);
    if m_bar > 0.0 || d_bar > 0.0 {
        let both = steady_max(&run_phase(obs, plant, set, "noisy", m_bar, d_bar)?, steady_from);
        let rest = (set.safety_factor * both - nu).max(0.0);
        if m_bar > 0.0 && d_bar > 0.0 {
            let bm = steady_max(&run_phase(obs, plant, set, "noise_only", m_bar, 0.0)?, steady_from);
            let bd = steady_max(
                &run_phase(obs, plant, set, "disturbance_only", 0.0, d_bar)?,
                steady_from,
            );
            let share = if bm + bd > 0.0 { bm / (bm + bd) } else { 0.5 };
            gamma1 = rest * share / m_bar;
            gamma2 = rest * (1.0 - share) / d_bar;
        } else if m_bar > 0.0 {
            gamma1 = rest / m_bar;
        } else {
            gamma2 = rest / d_bar;
        }
    }

    let tol = if set.epsilon > 0.0 { set.epsilon } else { 1e-6 };
    let k_star = IssGainModel::transient_horizon(c, lambda, set.transient_e0, tol);
    let model = IssGainModel {
        c,
        lambda,
        gamma1,
        gamma2,
        nu,
        k_star,
    };
    let bad = model.problems();
    if !bad.is_empty() {
        return Err(Error::Calibration(
            bad.into_iter().map(|b| format!("{subset}: {b}")).collect(),
        ));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combinatorics::SubsetIndex;
    use crate::model::{ScalarFn, StructuredDynamics};
    use crate::observers::LuenbergerObserver;
    use nalgebra::DMatrix;
    use std::sync::Arc;

    fn linear_plant() -> Arc<PlantModel> {
        let sd = StructuredDynamics {
            a: DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]),
            g: DMatrix::zeros(2, 1),
            h: DMatrix::zeros(1, 2),
            channels: vec![ScalarFn::Identity],
            offset: DVector::zeros(2),
        };
        let c = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        Arc::new(PlantModel::structured(sd, c).unwrap())
    }

    fn observer(plant: Arc<PlantModel>) -> LuenbergerObserver {
        let j = SubsetIndex::new(vec![1, 2], 3).unwrap();
        let k = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.4]);
        LuenbergerObserver::new(plant, j, k).unwrap()
    }

    #[test]
    fn noise_free_gains_vanish() {
        let plant = linear_plant();
        let obs = observer(plant.clone());
        let g = estimate_iss_gains(&obs, &plant, &CalibrationSettings::new(0.0, 0.0, 20, 200, 1)).unwrap();
        assert!(g.steady_bound(0.0, 0.0) < 1e-6);
        assert!(g.lambda < 1.0 && g.c >= 1.0);
    }

    #[test]
    fn envelope_holds_on_fresh_seeds() {
        let plant = linear_plant();
        let obs = observer(plant.clone());
        let g = estimate_iss_gains(&obs, &plant, &CalibrationSettings::new(0.0, 0.0, 50, 100, 2)).unwrap();
        let fresh = CalibrationSettings::new(0.0, 0.0, 30, 100, 99);
        for t in run_phase(&obs, &plant, &fresh, "fresh", 0.0, 0.0).unwrap() {
            for (k, e) in t.errors.iter().enumerate() {
                assert!(*e <= g.bound(k, t.errors[0], 0.0, 0.0) * (1.0 + 1e-9) + 1e-12);
            }
        }
    }

    #[test]
    fn doubling_noise_does_not_shrink_noise_term() {
        let plant = linear_plant();
        let obs = observer(plant.clone());
        let g1 = estimate_iss_gains(&obs, &plant, &CalibrationSettings::new(0.1, 0.0, 30, 200, 3)).unwrap();
        let g2 = estimate_iss_gains(&obs, &plant, &CalibrationSettings::new(0.2, 0.0, 30, 200, 3)).unwrap();
        assert!(g2.gamma1 * 0.2 >= g1.gamma1 * 0.1);
    }

    #[test]
    fn zero_trials_rejected() {
        let plant = linear_plant();
        let obs = observer(plant.clone());
        assert!(matches!(
            estimate_iss_gains(&obs, &plant, &CalibrationSettings::new(0.0, 0.0, 0, 100, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn divergent_observer_names_trial() {
        let plant = linear_plant();
        let j = SubsetIndex::new(vec![1, 2], 3).unwrap();
        let k = DMatrix::from_row_slice(2, 2, &[-5.0, 0.0, 0.0, -5.0]);
        let obs = LuenbergerObserver::new(plant.clone(), j, k).unwrap();
        match estimate_iss_gains(&obs, &plant, &CalibrationSettings::new(0.0, 0.0, 3, 2000, 1)) {
            Err(Error::Calibration(msgs)) => assert!(msgs[0].contains("trial")),
            other => panic!("expected calibration error, got {other:?}"),
        }
    }

    #[test]
    fn transient_horizon() {
        assert_eq!(IssGainModel::transient_horizon(1.0, 0.5, 0.0, 1e-6), 0);
        assert_eq!(IssGainModel::transient_horizon(1.0, 0.5, 1.0, 0.25), 2);
    }
}
