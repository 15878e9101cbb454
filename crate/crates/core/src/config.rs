//! Scenario configuration: a single JSON document with sections `plant`,
//! `scenario`, `observers`, `estimator`, `isolation`, `calibration` and
//! `output`. See the README for the schema.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::combinatorics::{bank_index, BankIndex, BankKey, SubsetIndex};
use crate::error::{Error, Result};
use crate::model::{
    AttackScenario, InitialState, InputSequence, PlantModel, ScalarFn, SignalSpec,
    StructuredDynamics,
};
use crate::observers::{
    certify_observer, check_slope_condition, GainCertificate, IssGainModel, ObserverFamily,
    ObserverGains, SlopeCertificate, DEFAULT_GAIN_MARGIN,
};

pub type RowMajor = Vec<Vec<f64>>;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub plant: PlantSpec,
    pub scenario: ScenarioSpec,
    pub observers: ObserverBundle,
    #[serde(default)]
    pub estimator: EstimatorOptions,
    #[serde(default)]
    pub isolation: IsolationOptions,
    #[serde(default)]
    pub calibration: CalibrationOptions,
    #[serde(default)]
    pub output: OutputOptions,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantSpec {
    /// The polynomial plant with outputs `2x1 + x1^2`, `x1 + x2`, `2x1 + x2`.
    Example1 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        e: Option<RowMajor>,
    },
    /// `x+ = A x + G f(H x) + offset + B u + E d`, `y = C x`.
    Structured {
        a: RowMajor,
        c: RowMajor,
        nonlinearity: NonlinearitySpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        offset: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        b: Option<RowMajor>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        e: Option<RowMajor>,
    },
}

/// Registered nonlinearities.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum NonlinearitySpec {
    None,
    /// `G = coefficients` (a column), `H = [1 ... 1]`, `f = sin`.
    SinSum { coefficients: Vec<f64> },
    /// `G = gain e4`, `H = e4ᵀ`, `f = tanh`.
    TanhX4 { gain: f64 },
    Channels {
        g: RowMajor,
        h: RowMajor,
        functions: Vec<ScalarFn>,
    },
}

fn zero_signal() -> SignalSpec {
    SignalSpec::Zero
}
fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_ceiling() -> f64 {
    1e12
}
fn default_margin() -> f64 {
    DEFAULT_GAIN_MARGIN
}
fn default_cap() -> f64 {
    1e12
}
fn default_samples() -> usize {
    100_000
}
fn default_window() -> usize {
    100
}
fn default_trials() -> usize {
    200
}
fn default_cal_horizon() -> usize {
    1000
}
fn default_safety() -> f64 {
    1.2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub q: usize,
    pub attacked: Vec<usize>,
    pub horizon: usize,
    pub seed: u64,
    pub initial_state: InitialState,
    /// Generator used for every attacked sensor.
    #[serde(default = "zero_signal")]
    pub attack: SignalSpec,
    /// Per-sensor replacements, keyed by sensor index.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attack_overrides: BTreeMap<String, SignalSpec>,
    #[serde(default = "one")]
    pub attack_scale: f64,
    #[serde(default = "zero_signal")]
    pub noise: SignalSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_bound: Option<f64>,
    #[serde(default = "zero_signal")]
    pub disturbance: SignalSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance_bound: Option<f64>,
    #[serde(default = "default_ceiling")]
    pub divergence_ceiling: f64,
    #[serde(default = "yes")]
    pub claims_attack_bound: bool,
    /// `u(k)` rows; zero after the table ends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<RowMajor>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObserverInit {
    #[default]
    Zero,
    Truth,
    Fixed {
        value: Vec<f64>,
    },
    /// Uniform in the ball of `radius` around the true initial state.
    Ball {
        radius: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlopeCheckSpec {
    /// Per-state interval `[lo, hi]`; mapped through `H`.
    #[serde(rename = "box")]
    pub state_box: Vec<[f64; 2]>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainEntry {
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<RowMajor>,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub l: Option<RowMajor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iss: Option<IssGainModel>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverBundle {
    pub family: ObserverFamily,
    #[serde(default)]
    pub init: ObserverInit,
    /// Linearization point for gain certificates; the origin by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operating_point: Option<Vec<f64>>,
    #[serde(default = "default_margin")]
    pub gain_margin: f64,
    /// Turn a failed gain certificate into a validation error.
    #[serde(default)]
    pub enforce_certificates: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_check: Option<SlopeCheckSpec>,
    #[serde(default = "default_cap")]
    pub condition_cap: f64,
    pub bank: BTreeMap<String, GainEntry>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorOptions {}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsolationOptions {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Defaults to the scenario's noise bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance_bound: Option<f64>,
    /// Replaces the transient horizon derived from the gains.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_bar_star: Option<usize>,
}

impl Default for IsolationOptions {
    fn default() -> Self {
        IsolationOptions {
            enabled: false,
            epsilon: 0.0,
            window: default_window(),
            noise_bound: None,
            disturbance_bound: None,
            k_bar_star: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationOptions {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_cal_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_safety")]
    pub safety_factor: f64,
    #[serde(default = "one")]
    pub initial_error: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            trials: default_trials(),
            horizon: default_cal_horizon(),
            seed: 0,
            safety_factor: default_safety(),
            initial_error: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

/// Command-line overrides applied on top of a loaded document.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub horizon: Option<usize>,
    pub window: Option<usize>,
    pub out: Option<String>,
}

/// A validated configuration plus the runtime objects built from it.
#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub doc: ConfigDocument,
    /// sha256 of the raw config bytes.
    pub source_hash: String,
    pub source_path: Option<PathBuf>,
    pub plant: Arc<PlantModel>,
    pub bank: BankIndex,
    pub scenario: AttackScenario,
    pub inputs: InputSequence,
    /// Gains in bank order.
    pub gains: Vec<(BankKey, ObserverGains)>,
    /// ISS models present in the bundle; may be partial.
    pub iss: BTreeMap<BankKey, IssGainModel>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config(&bytes)?;
    cfg.source_path = Some(path.to_path_buf());
    Ok(cfg)
}

pub fn parse_config(bytes: &[u8]) -> Result<ScenarioConfig> {
    let doc: ConfigDocument = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    ScenarioConfig::from_document(doc, sha256_hex(bytes))
}

fn matrix(path: &str, rows: &RowMajor, errs: &mut Vec<String>) -> Option<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        errs.push(format!("{path}: rows have different lengths"));
        return None;
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        errs.push(format!("{path}: non-finite entry"));
        return None;
    }
    Some(DMatrix::from_row_iterator(
        rows.len(),
        ncols,
        rows.iter().flatten().copied(),
    ))
}

fn expect_shape(path: &str, m: &DMatrix<f64>, want: (usize, usize), errs: &mut Vec<String>) -> bool {
    if m.shape() == want {
        true
    } else {
        errs.push(format!(
            "{path}: expected {}x{}, got {}x{}",
            want.0,
            want.1,
            m.nrows(),
            m.ncols()
        ));
        false
    }
}

fn build_plant(spec: &PlantSpec, errs: &mut Vec<String>) -> Option<PlantModel> {
    let (plant, b, e) = match spec {
        PlantSpec::Example1 { e } => (Some(PlantModel::example1()), None, e.as_ref()),
        PlantSpec::Structured {
            a,
            c,
            nonlinearity,
            offset,
            b,
            e,
        } => {
            let before = errs.len();
            let a = matrix("plant.a", a, errs);
            let c = matrix("plant.c", c, errs);
            let n = a.as_ref().map_or(0, |a| a.nrows());
            let (g, h, channels) = match nonlinearity {
                NonlinearitySpec::None => (
                    Some(DMatrix::zeros(n, 0)),
                    Some(DMatrix::zeros(0, n)),
                    vec![],
                ),
                NonlinearitySpec::SinSum { coefficients } => {
                    if coefficients.len() != n {
                        errs.push(format!(
                            "plant.nonlinearity.coefficients: expected {n} entries, got {}",
                            coefficients.len()
                        ));
                    }
                    (
                        Some(DMatrix::from_column_slice(coefficients.len(), 1, coefficients)),
                        Some(DMatrix::from_element(1, n, 1.0)),
                        vec![ScalarFn::Sin],
                    )
                }
                NonlinearitySpec::TanhX4 { gain } => {
                    if n < 4 {
                        errs.push(format!("plant.nonlinearity: tanh_x4 needs n >= 4, got {n}"));
                        (None, None, vec![])
                    } else {
                        let mut g = DMatrix::zeros(n, 1);
                        g[(3, 0)] = *gain;
                        let mut h = DMatrix::zeros(1, n);
                        h[(0, 3)] = 1.0;
                        (Some(g), Some(h), vec![ScalarFn::Tanh])
                    }
                }
                NonlinearitySpec::Channels { g, h, functions } => (
                    matrix("plant.nonlinearity.g", g, errs),
                    matrix("plant.nonlinearity.h", h, errs),
                    functions.clone(),
                ),
            };
            let offset = offset
                .as_ref()
                .map(|o| DVector::from_column_slice(o))
                .unwrap_or_else(|| DVector::zeros(n));
            if errs.len() > before {
                return None;
            }
            let sd = StructuredDynamics {
                a: a?,
                g: g?,
                h: h?,
                channels,
                offset,
            };
            match PlantModel::structured(sd, c?) {
                Ok(p) => (Some(p), b.as_ref(), e.as_ref()),
                Err(Error::Validation(list)) => {
                    errs.extend(list.into_iter().map(|m| format!("plant: {m}")));
                    return None;
                }
                Err(other) => {
                    errs.push(format!("plant: {other}"));
                    return None;
                }
            }
        }
    };
    let mut plant = plant?;
    if let Some(b) = b.and_then(|b| matrix("plant.b", b, errs)) {
        match plant.with_input_matrix(b) {
            Ok(p) => plant = p,
            Err(e) => {
                errs.push(format!("plant.b: {e}"));
                return None;
            }
        }
    }
    if let Some(e) = e.and_then(|e| matrix("plant.e", e, errs)) {
        match plant.with_disturbance_matrix(e) {
            Ok(p) => plant = p,
            Err(err) => {
                errs.push(format!("plant.e: {err}"));
                return None;
            }
        }
    }
    Some(plant)
}

fn build_scenario(
    spec: &ScenarioSpec,
    plant: &PlantModel,
    errs: &mut Vec<String>,
) -> Option<(AttackScenario, InputSequence)> {
    let p = plant.p;
    let before = errs.len();
    let attacked = match SubsetIndex::from_unsorted(spec.attacked.clone(), p) {
        Ok(w) => w,
        Err(e) => {
            errs.push(format!("scenario.attacked: {e}"));
            SubsetIndex::empty()
        }
    };
    let mut attack: Vec<SignalSpec> = (1..=p)
        .map(|i| {
            if attacked.contains(i) {
                spec.attack.clone()
            } else {
                SignalSpec::Zero
            }
        })
        .collect();
    for (key, gen) in &spec.attack_overrides {
        match key.parse::<usize>() {
            Ok(i) if (1..=p).contains(&i) => attack[i - 1] = gen.clone(),
            _ => errs.push(format!(
                "scenario.attack_overrides.{key}: not a sensor index in 1..={p}"
            )),
        }
    }
    if !spec.attack_scale.is_finite() {
        errs.push("scenario.attack_scale: must be finite".into());
    }
    let attack = attack.iter().map(|g| g.scaled(spec.attack_scale)).collect();
    let inputs = match &spec.input {
        None => InputSequence::zero(plant.n_u),
        Some(rows) => {
            let vals = rows.iter().map(|r| DVector::from_column_slice(r)).collect();
            match InputSequence::from_values(plant.n_u, vals) {
                Ok(s) => s,
                Err(e) => {
                    errs.push(format!("scenario.input: {e}"));
                    InputSequence::zero(plant.n_u)
                }
            }
        }
    };
    if let InitialState::Fixed { value } = &spec.initial_state {
        if value.len() != plant.n {
            errs.push(format!(
                "scenario.initial_state: expected {} entries, got {}",
                plant.n,
                value.len()
            ));
        }
    }
    let sc = AttackScenario {
        attacked,
        q: spec.q,
        attack,
        noise: vec![spec.noise.clone(); p],
        noise_bound: spec.noise_bound,
        disturbance: vec![spec.disturbance.clone(); plant.s],
        disturbance_bound: spec.disturbance_bound,
        horizon: spec.horizon,
        seed: spec.seed,
        initial_state: spec.initial_state.clone(),
        divergence_ceiling: spec.divergence_ceiling,
        claims_attack_bound: spec.claims_attack_bound,
    };
    errs.extend(sc.problems(p, plant.s).into_iter().map(|m| format!("scenario: {m}")));
    (errs.len() == before).then_some((sc, inputs))
}

fn build_gains(
    bundle: &ObserverBundle,
    plant: &PlantModel,
    bank: &BankIndex,
    errs: &mut Vec<String>,
) -> (Vec<(BankKey, ObserverGains)>, BTreeMap<BankKey, IssGainModel>) {
    let mut parsed: BTreeMap<BankKey, &GainEntry> = BTreeMap::new();
    for (key, entry) in &bundle.bank {
        match BankKey::parse(key, bank.p) {
            Ok(k) => {
                parsed.insert(k, entry);
            }
            Err(e) => errs.push(format!("observers.bank.{key}: {e}")),
        }
    }
    let expected = bank.keys();
    for key in &expected {
        if !parsed.contains_key(key) {
            errs.push(format!("observers.bank: missing observer for {key}"));
        }
    }
    for key in parsed.keys() {
        if !expected.contains(key) {
            errs.push(format!("observers.bank.{key}: not a member of the bank for p={}, q={}", bank.p, bank.q));
        }
    }
    let needs_structure = bundle.family != ObserverFamily::Luenberger;
    if needs_structure && (plant.structured_dynamics().is_none() || plant.output_matrix().is_none()) {
        errs.push(format!(
            "observers.family: {:?} observers need a structured plant with linear outputs",
            bundle.family
        ));
        return (vec![], BTreeMap::new());
    }
    let n = plant.n;
    let r = plant.structured_dynamics().map_or(0, |s| s.h.nrows());
    let mut gains = Vec::new();
    let mut iss = BTreeMap::new();
    for key in expected {
        let Some(entry) = parsed.get(&key) else { continue };
        let path = format!("observers.bank.{key}");
        let c = key.subset.card();
        let mut get = |name: &str, m: &Option<RowMajor>, want: (usize, usize)| -> Option<DMatrix<f64>> {
            let Some(rows) = m else {
                errs.push(format!("{path}.{name}: required for {:?}", bundle.family));
                return None;
            };
            let m = matrix(&format!("{path}.{name}"), rows, errs)?;
            expect_shape(&format!("{path}.{name}"), &m, want, errs).then_some(m)
        };
        let g = match bundle.family {
            ObserverFamily::Luenberger => get("K", &entry.k, (n, c)).map(|k| ObserverGains::Luenberger { k }),
            ObserverFamily::ReducedOrder => {
                if c > n {
                    errs.push(format!("{path}: more sensors than states"));
                    None
                } else {
                    let l = get("L", &entry.l, (n - c, n));
                    let k = get("K", &entry.k, (n - c, c));
                    l.zip(k).map(|(l, k)| ObserverGains::ReducedOrder { l, k })
                }
            }
            ObserverFamily::CircleCriterion => {
                let k = get("K", &entry.k, (r, c));
                let l = get("L", &entry.l, (n, c));
                k.zip(l).map(|(k, l)| ObserverGains::CircleCriterion { k, l })
            }
        };
        if let Some(g) = g {
            gains.push((key.clone(), g));
        }
        if let Some(model) = &entry.iss {
            let bad = model.problems();
            if bad.is_empty() {
                iss.insert(key.clone(), model.clone());
            } else {
                errs.extend(bad.into_iter().map(|b| format!("{path}.iss: {b}")));
            }
        }
    }
    (gains, iss)
}

impl ScenarioConfig {
    pub fn from_document(doc: ConfigDocument, source_hash: String) -> Result<Self> {
        let mut errs = Vec::new();
        let plant = build_plant(&doc.plant, &mut errs);
        let bank = match plant.as_ref().map(|p| bank_index(p.p, doc.scenario.q)) {
            Some(Ok(b)) => Some(b),
            Some(Err(e)) => {
                errs.push(format!("scenario.q: {e}"));
                None
            }
            None => None,
        };
        let scenario = plant
            .as_ref()
            .and_then(|p| build_scenario(&doc.scenario, p, &mut errs));
        let (gains, iss) = match (&plant, &bank) {
            (Some(p), Some(b)) => build_gains(&doc.observers, p, b, &mut errs),
            _ => (vec![], BTreeMap::new()),
        };
        if let Some(p) = &plant {
            match &doc.observers.init {
                ObserverInit::Fixed { value } if value.len() != p.n => errs.push(format!(
                    "observers.init: expected {} entries, got {}",
                    p.n,
                    value.len()
                )),
                ObserverInit::Ball { radius } if !(*radius >= 0.0) => {
                    errs.push("observers.init.radius: must be nonnegative".into())
                }
                _ => {}
            }
            if let Some(op) = &doc.observers.operating_point {
                if op.len() != p.n {
                    errs.push(format!(
                        "observers.operating_point: expected {} entries, got {}",
                        p.n,
                        op.len()
                    ));
                }
            }
            if let Some(sc) = &doc.observers.slope_check {
                match p.structured_dynamics() {
                    Some(sd) if sc.state_box.len() == sd.h.ncols() => {}
                    Some(_) => errs.push(format!(
                        "observers.slope_check.box: expected {} intervals, got {}",
                        p.n,
                        sc.state_box.len()
                    )),
                    None => errs.push("observers.slope_check: needs a structured plant".into()),
                }
            }
        }
        let iso = &doc.isolation;
        if iso.window == 0 {
            errs.push("isolation.window: must be at least 1".into());
        }
        if !(iso.epsilon >= 0.0) {
            errs.push("isolation.epsilon: must be nonnegative".into());
        }
        for (name, v) in [
            ("isolation.noise_bound", iso.noise_bound),
            ("isolation.disturbance_bound", iso.disturbance_bound),
        ] {
            if matches!(v, Some(b) if !(b >= 0.0)) {
                errs.push(format!("{name}: must be nonnegative"));
            }
        }
        let cal = &doc.calibration;
        if !(cal.safety_factor >= 1.0) {
            errs.push("calibration.safety_factor: must be at least 1".into());
        }
        if !(cal.initial_error > 0.0) {
            errs.push("calibration.initial_error: must be positive".into());
        }

        let cfg = match (plant, bank, scenario) {
            (Some(plant), Some(bank), Some((scenario, inputs))) if errs.is_empty() => ScenarioConfig {
                doc,
                source_hash,
                source_path: None,
                plant: Arc::new(plant),
                bank,
                scenario,
                inputs,
                gains,
                iss,
            },
            _ => return Err(Error::Validation(errs)),
        };

        // construction checks (block inverses, certificates) need a complete bundle
        for (key, g) in &cfg.gains {
            if let ObserverGains::ReducedOrder { l, k } = g {
                if let Err(e) = crate::observers::build_reduced_observer(
                    cfg.plant.clone(),
                    key.subset.clone(),
                    l.clone(),
                    k.clone(),
                    cfg.doc.observers.condition_cap,
                ) {
                    errs.push(format!("observers.bank.{key}: {e}"));
                }
            }
        }
        if errs.is_empty() && cfg.doc.observers.enforce_certificates {
            for (key, cert) in cfg.certificates()? {
                if !cert.passed {
                    errs.push(format!(
                        "observers.bank.{key}: gain certificate failed, spectral radius {:.6}",
                        cert.spectral_radius
                    ));
                }
            }
            if let Some(sc) = cfg.slope_certificate()? {
                if !sc.passed {
                    errs.push(format!("observers.slope_check: failed with witness {:?}", sc.witness));
                }
            }
        }
        if !errs.is_empty() {
            return Err(Error::Validation(errs));
        }
        Ok(cfg)
    }

    pub fn name(&self) -> String {
        self.doc.name.clone().unwrap_or_else(|| "scenario".into())
    }

    pub fn with_overrides(self, ov: &Overrides) -> Result<Self> {
        if ov.seed.is_none() && ov.horizon.is_none() && ov.window.is_none() && ov.out.is_none() {
            return Ok(self);
        }
        let mut doc = self.doc;
        if let Some(s) = ov.seed {
            doc.scenario.seed = s;
        }
        if let Some(h) = ov.horizon {
            doc.scenario.horizon = h;
        }
        if let Some(w) = ov.window {
            doc.isolation.window = w;
        }
        if let Some(o) = &ov.out {
            doc.output.dir = Some(o.clone());
        }
        let mut cfg = ScenarioConfig::from_document(doc, self.source_hash)?;
        cfg.source_path = self.source_path;
        Ok(cfg)
    }

    pub fn operating_point(&self) -> DVector<f64> {
        self.doc
            .observers
            .operating_point
            .as_ref()
            .map(|v| DVector::from_column_slice(v))
            .unwrap_or_else(|| DVector::zeros(self.plant.n))
    }

    pub fn certificates(&self) -> Result<Vec<(BankKey, GainCertificate)>> {
        let op = self.operating_point();
        self.gains
            .iter()
            .map(|(key, g)| {
                certify_observer(&self.plant, &key.subset, g, &op, self.doc.observers.gain_margin)
                    .map(|c| (key.clone(), c))
            })
            .collect()
    }

    pub fn slope_certificate(&self) -> Result<Option<SlopeCertificate>> {
        let (Some(spec), Some(sd)) = (&self.doc.observers.slope_check, self.plant.structured_dynamics())
        else {
            return Ok(None);
        };
        let bx: Vec<(f64, f64)> = spec.state_box.iter().map(|b| (b[0], b[1])).collect();
        check_slope_condition(&sd.channels, &sd.h, spec.samples, &bx, self.scenario.seed).map(Some)
    }

    /// `m̄` used for thresholds and calibration.
    pub fn noise_bound(&self) -> f64 {
        self.doc
            .isolation
            .noise_bound
            .or(self.doc.scenario.noise_bound)
            .unwrap_or(0.0)
    }

    pub fn disturbance_bound(&self) -> f64 {
        self.doc
            .isolation
            .disturbance_bound
            .or(self.doc.scenario.disturbance_bound)
            .unwrap_or(0.0)
    }

    /// Bank members lacking ISS gains.
    pub fn missing_iss(&self) -> Vec<BankKey> {
        self.bank
            .keys()
            .into_iter()
            .filter(|k| !self.iss.contains_key(k))
            .collect()
    }

    /// Serializes the document with ISS gains replaced by `iss`.
    pub fn document_with_iss(&self, iss: &BTreeMap<BankKey, IssGainModel>) -> Result<String> {
        let mut doc = self.doc.clone();
        for (key, entry) in doc.observers.bank.iter_mut() {
            if let Ok(k) = BankKey::parse(key, self.bank.p) {
                if let Some(g) = iss.get(&k) {
                    entry.iss = Some(g.clone());
                }
            }
        }
        serde_json::to_string_pretty(&doc)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| Error::config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"{
        "name": "tiny",
        "plant": { "kind": "example1" },
        "scenario": {
            "q": 1, "attacked": [2], "horizon": 10, "seed": 1,
            "initial_state": { "kind": "fixed", "value": [0.1, 0.2] },
            "attack": { "kind": "uniform", "low": -10, "high": 10 }
        },
        "observers": {
            "family": "luenberger",
            "bank": {
                "J:1,2": { "K": [[0.441, -0.504], [0.292, -0.406]] },
                "J:1,3": { "K": [[0, 0.048], [0, -1.152]] },
                "J:2,3": { "K": [[0.217, -0.134], [-1.473, 0.058]] },
                "S:1": { "K": [[0.1], [0.0]] },
                "S:2": { "K": [[0.124], [-0.669]] },
                "S:3": { "K": [[0.048], [-1.152]] }
            }
        }
    }"#;

    #[test]
    fn small_config_loads() {
        let cfg = parse_config(SMALL.as_bytes()).unwrap();
        assert_eq!(cfg.bank.observer_count(), 6);
        assert_eq!(cfg.source_hash, sha256_hex(SMALL.as_bytes()));
        assert_eq!(cfg.scenario.attack[0], SignalSpec::Zero);
    }

    #[test]
    fn missing_subset_named() {
        let text = SMALL.replace(r#""J:1,2": { "K": [[0.441, -0.504], [0.292, -0.406]] },"#, "");
        match parse_config(text.as_bytes()) {
            Err(Error::Validation(list)) => assert!(list.iter().any(|m| m.contains("J:1,2"))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn q_too_large_is_an_assumption_violation() {
        let text = SMALL.replace(r#""q": 1"#, r#""q": 2"#);
        match parse_config(text.as_bytes()) {
            Err(Error::Validation(list)) => {
                assert!(list.iter().any(|m| m.contains("assumption violated")), "{list:?}")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn all_errors_are_reported() {
        let text = SMALL
            .replace(r#""K": [[0.1], [0.0]]"#, r#""K": [[0.1]]"#)
            .replace(r#""horizon": 10"#, r#""horizon": 0"#);
        match parse_config(text.as_bytes()) {
            Err(Error::Validation(list)) => {
                assert!(list.iter().any(|m| m.contains("S:1.K")), "{list:?}");
                assert!(list.iter().any(|m| m.contains("horizon")), "{list:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_error_has_position() {
        match parse_config(b"{\n  \"plant\": ,\n}") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_apply() {
        let cfg = parse_config(SMALL.as_bytes()).unwrap();
        let cfg = cfg
            .with_overrides(&Overrides {
                seed: Some(9),
                horizon: Some(3),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(cfg.scenario.seed, 9);
        assert_eq!(cfg.scenario.horizon, 3);
    }
}
