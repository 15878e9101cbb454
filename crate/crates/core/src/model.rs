//! Plant, sensors, attack/noise/disturbance signals and trajectory simulation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::combinatorics::SubsetIndex;
use crate::error::{check_len, Error, Result};

/// Scalar nonlinearity used inside `G f(H x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ScalarFn {
    Identity,
    Negate,
    Sin,
    Tanh,
    /// `c0 + c1 v + c2 v^2 + ...`
    Polynomial { coefficients: Vec<f64> },
}

impl ScalarFn {
    pub fn eval(&self, v: f64) -> f64 {
        match self {
            ScalarFn::Identity => v,
            ScalarFn::Negate => -v,
            ScalarFn::Sin => v.sin(),
            ScalarFn::Tanh => v.tanh(),
            ScalarFn::Polynomial { coefficients } => {
                coefficients.iter().rev().fold(0.0, |acc, c| acc * v + c)
            }
        }
    }

    pub fn derivative(&self, v: f64) -> f64 {
        match self {
            ScalarFn::Identity => 1.0,
            ScalarFn::Negate => -1.0,
            ScalarFn::Sin => v.cos(),
            ScalarFn::Tanh => 1.0 - v.tanh().powi(2),
            ScalarFn::Polynomial { coefficients } => coefficients
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (i, c)| acc * v + i as f64 * c),
        }
    }
}

/// `x+ = A x + G f(H x) + offset + B u + E d`.
#[derive(Clone, Debug)]
pub struct StructuredDynamics {
    pub a: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub channels: Vec<ScalarFn>,
    pub offset: DVector<f64>,
}

impl StructuredDynamics {
    pub fn nonlinear_term(&self, x: &DVector<f64>) -> DVector<f64> {
        let v = &self.h * x;
        let fv = DVector::from_iterator(
            v.len(),
            v.iter().zip(&self.channels).map(|(vi, f)| f.eval(*vi)),
        );
        &self.g * fv
    }

    /// `diag(f'(H x))`
    pub fn slopes(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let v = &self.h * x;
        DMatrix::from_diagonal(&DVector::from_iterator(
            v.len(),
            v.iter().zip(&self.channels).map(|(vi, f)| f.derivative(*vi)),
        ))
    }
}

#[derive(Clone, Debug)]
pub enum Dynamics {
    /// `x1+ = x1 - x1^3 + x2 x1^2 - x2^2 x1^3`, `x2+ = -x2`.
    Example1,
    Structured(StructuredDynamics),
}

#[derive(Clone, Debug)]
pub enum OutputMap {
    /// `y1 = 2 x1 + x1^2`, `y2 = x1 + x2`, `y3 = 2 x1 + x2`.
    Example1,
    Linear(DMatrix<f64>),
}

/// Discrete-time plant with additive sensor noise and attacks.
#[derive(Clone, Debug)]
pub struct PlantModel {
    pub n: usize,
    pub n_u: usize,
    pub p: usize,
    pub s: usize,
    pub dynamics: Dynamics,
    pub output: OutputMap,
    /// n x n_u
    pub input_matrix: DMatrix<f64>,
    /// n x s
    pub disturbance_matrix: DMatrix<f64>,
}

impl PlantModel {
    pub fn example1() -> Self {
        PlantModel {
            n: 2,
            n_u: 0,
            p: 3,
            s: 0,
            dynamics: Dynamics::Example1,
            output: OutputMap::Example1,
            input_matrix: DMatrix::zeros(2, 0),
            disturbance_matrix: DMatrix::zeros(2, 0),
        }
    }

    /// Linear-plus-nonlinear plant with linear outputs `y = C x`.
    pub fn structured(dynamics: StructuredDynamics, c: DMatrix<f64>) -> Result<Self> {
        let n = dynamics.a.nrows();
        let mut bad = Vec::new();
        if dynamics.a.ncols() != n {
            bad.push(format!("A must be square, got {}x{}", n, dynamics.a.ncols()));
        }
        let r = dynamics.h.nrows();
        if dynamics.h.ncols() != n {
            bad.push(format!("H must have {n} columns, got {}", dynamics.h.ncols()));
        }
        if dynamics.g.nrows() != n || dynamics.g.ncols() != r {
            bad.push(format!(
                "G must be {n}x{r}, got {}x{}",
                dynamics.g.nrows(),
                dynamics.g.ncols()
            ));
        }
        if dynamics.channels.len() != r {
            bad.push(format!(
                "nonlinearity needs {r} channels, got {}",
                dynamics.channels.len()
            ));
        }
        if dynamics.offset.len() != n {
            bad.push(format!("offset must have length {n}, got {}", dynamics.offset.len()));
        }
        if c.ncols() != n {
            bad.push(format!("C must have {n} columns, got {}", c.ncols()));
        }
        if n == 0 || c.nrows() == 0 {
            bad.push("n and p must be at least 1".into());
        }
        if !bad.is_empty() {
            return Err(Error::Validation(bad));
        }
        let p = c.nrows();
        Ok(PlantModel {
            n,
            n_u: 0,
            p,
            s: 0,
            dynamics: Dynamics::Structured(dynamics),
            output: OutputMap::Linear(c),
            input_matrix: DMatrix::zeros(n, 0),
            disturbance_matrix: DMatrix::zeros(n, 0),
        })
    }

    pub fn with_input_matrix(mut self, b: DMatrix<f64>) -> Result<Self> {
        check_len("input matrix rows", self.n, b.nrows())?;
        self.n_u = b.ncols();
        self.input_matrix = b;
        Ok(self)
    }

    pub fn with_disturbance_matrix(mut self, e: DMatrix<f64>) -> Result<Self> {
        check_len("disturbance matrix rows", self.n, e.nrows())?;
        self.s = e.ncols();
        self.disturbance_matrix = e;
        Ok(self)
    }

    pub fn structured_dynamics(&self) -> Option<&StructuredDynamics> {
        match &self.dynamics {
            Dynamics::Structured(s) => Some(s),
            Dynamics::Example1 => None,
        }
    }

    pub fn output_matrix(&self) -> Option<&DMatrix<f64>> {
        match &self.output {
            OutputMap::Linear(c) => Some(c),
            OutputMap::Example1 => None,
        }
    }

    /// Rows of `C` selected by `subset`.
    pub fn output_rows_matrix(&self, subset: &SubsetIndex) -> Option<DMatrix<f64>> {
        self.output_matrix().map(|c| c.select_rows(&subset.rows()))
    }

    /// `F(x, u, 0)`, no dimension checks. Used by observers on the hot path.
    pub fn drift(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut next = match &self.dynamics {
            Dynamics::Example1 => {
                let (x1, x2) = (x[0], x[1]);
                DVector::from_vec(vec![
                    x1 - x1.powi(3) + x2 * x1.powi(2) - x2.powi(2) * x1.powi(3),
                    -x2,
                ])
            }
            Dynamics::Structured(sd) => &sd.a * x + sd.nonlinear_term(x) + &sd.offset,
        };
        if self.n_u > 0 {
            next += &self.input_matrix * u;
        }
        next
    }

    /// `x+ = F(x, u, d)`.
    pub fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        d: &DVector<f64>,
        _k: usize,
    ) -> Result<DVector<f64>> {
        check_len("state", self.n, x.len())?;
        check_len("input", self.n_u, u.len())?;
        check_len("disturbance", self.s, d.len())?;
        let mut next = self.drift(x, u);
        if self.s > 0 {
            next += &self.disturbance_matrix * d;
        }
        Ok(next)
    }

    /// Noise-free outputs `h(x)`.
    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.output {
            OutputMap::Example1 => {
                let (x1, x2) = (x[0], x[1]);
                DVector::from_vec(vec![2.0 * x1 + x1 * x1, x1 + x2, 2.0 * x1 + x2])
            }
            OutputMap::Linear(c) => c * x,
        }
    }

    /// `h^J(x)`.
    pub fn output_subset(&self, x: &DVector<f64>, subset: &SubsetIndex) -> DVector<f64> {
        match &self.output {
            OutputMap::Linear(c) => {
                let rows = subset.members();
                DVector::from_iterator(
                    rows.len(),
                    rows.iter().map(|&r| c.row(r - 1).transpose().dot(x)),
                )
            }
            OutputMap::Example1 => self.output(x).select_rows(&subset.rows()),
        }
    }

    /// `y = h(x) + m + a`.
    pub fn measure(
        &self,
        x: &DVector<f64>,
        m: &DVector<f64>,
        a: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        check_len("state", self.n, x.len())?;
        check_len("noise", self.p, m.len())?;
        check_len("attack", self.p, a.len())?;
        Ok(self.output(x) + m + a)
    }

    /// Forward-difference Jacobian of `F(., u, 0)` at `x`.
    pub fn jacobian_f(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        if let Dynamics::Structured(sd) = &self.dynamics {
            return &sd.a + &sd.g * sd.slopes(x) * &sd.h;
        }
        numeric_jacobian(self.n, x, |v| self.drift(v, u))
    }

    pub fn jacobian_h(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.output {
            OutputMap::Linear(c) => c.clone(),
            OutputMap::Example1 => numeric_jacobian(self.p, x, |v| self.output(v)),
        }
    }
}

fn numeric_jacobian(
    rows: usize,
    x: &DVector<f64>,
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
) -> DMatrix<f64> {
    let f0 = f(x);
    let mut jac = DMatrix::zeros(rows, x.len());
    for j in 0..x.len() {
        let h = 1e-7 * x[j].abs().max(1.0);
        let mut xp = x.clone();
        xp[j] += h;
        let col = (f(&xp) - &f0) / h;
        jac.set_column(j, &col);
    }
    jac
}

/// Scalar signal generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalSpec {
    Zero,
    Constant { value: f64 },
    /// Draws in the open interval `(low, high)`.
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std: f64 },
    /// `values[k]`, zero once the table runs out.
    Table { values: Vec<f64> },
}

impl SignalSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            SignalSpec::Zero => true,
            SignalSpec::Constant { value } => value.is_finite(),
            SignalSpec::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
            SignalSpec::Normal { mean, std } => mean.is_finite() && std.is_finite() && *std >= 0.0,
            SignalSpec::Table { values } => values.iter().all(|v| v.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid signal generator {self:?}")))
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            SignalSpec::Zero => true,
            SignalSpec::Constant { value } => *value == 0.0,
            SignalSpec::Table { values } => values.iter().all(|v| *v == 0.0),
            _ => false,
        }
    }

    /// Supremum of `|value|`, or `None` when unbounded.
    pub fn bound(&self) -> Option<f64> {
        match self {
            SignalSpec::Zero => Some(0.0),
            SignalSpec::Constant { value } => Some(value.abs()),
            SignalSpec::Uniform { low, high } => Some(low.abs().max(high.abs())),
            SignalSpec::Normal { std, mean } => (*std == 0.0).then(|| mean.abs()),
            SignalSpec::Table { values } => Some(values.iter().fold(0.0, |m, v| m.max(v.abs()))),
        }
    }

    /// Multiplies every value the generator can produce by `factor`.
    ///
    /// Scaling keeps the random stream consumption unchanged, so paired runs
    /// see the same underlying draws.
    pub fn scaled(&self, factor: f64) -> SignalSpec {
        match self {
            SignalSpec::Zero => SignalSpec::Zero,
            SignalSpec::Constant { value } => SignalSpec::Constant { value: value * factor },
            SignalSpec::Uniform { low, high } => {
                let (a, b) = (low * factor, high * factor);
                if a <= b {
                    SignalSpec::Uniform { low: a, high: b }
                } else {
                    SignalSpec::Uniform { low: b, high: a }
                }
            }
            SignalSpec::Normal { mean, std } => SignalSpec::Normal {
                mean: mean * factor,
                std: std * factor.abs(),
            },
            SignalSpec::Table { values } => SignalSpec::Table {
                values: values.iter().map(|v| v * factor).collect(),
            },
        }
    }
}

/// Draws one value of `gen` at step `k`.
pub fn sample_signal(gen: &SignalSpec, k: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    gen.validate()?;
    Ok(match gen {
        SignalSpec::Zero => 0.0,
        SignalSpec::Constant { value } => *value,
        SignalSpec::Uniform { low, high } => {
            let dist = Uniform::new(*low, *high).map_err(|e| Error::config(e.to_string()))?;
            loop {
                let v: f64 = dist.sample(rng);
                if v > *low && v < *high {
                    break v;
                }
            }
        }
        SignalSpec::Normal { mean, std } => {
            let dist = Normal::new(*mean, *std).map_err(|e| Error::config(e.to_string()))?;
            dist.sample(rng)
        }
        SignalSpec::Table { values } => values.get(k).copied().unwrap_or(0.0),
    })
}

/// Independent random stream for the signal called `name`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(name.as_bytes());
    let mut id = [0u8; 8];
    id.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from_le_bytes(id));
    rng
}

/// Distribution of the initial plant state, applied per component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialState {
    Fixed { value: Vec<f64> },
    Normal { mean: f64, std: f64 },
    Uniform { low: f64, high: f64 },
}

impl InitialState {
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<DVector<f64>> {
        match self {
            InitialState::Fixed { value } => {
                check_len("initial state", n, value.len())?;
                Ok(DVector::from_column_slice(value))
            }
            InitialState::Normal { mean, std } => {
                let d = Normal::new(*mean, *std).map_err(|e| Error::config(e.to_string()))?;
                Ok(DVector::from_fn(n, |_, _| d.sample(rng)))
            }
            InitialState::Uniform { low, high } => {
                let d = Uniform::new(*low, *high).map_err(|e| Error::config(e.to_string()))?;
                Ok(DVector::from_fn(n, |_, _| d.sample(rng)))
            }
        }
    }
}

/// Known input sequence; zero outside the table.
#[derive(Clone, Debug, Default)]
pub struct InputSequence {
    n_u: usize,
    values: Vec<DVector<f64>>,
}

impl InputSequence {
    pub fn zero(n_u: usize) -> Self {
        InputSequence {
            n_u,
            values: Vec::new(),
        }
    }

    pub fn from_values(n_u: usize, values: Vec<DVector<f64>>) -> Result<Self> {
        for v in &values {
            check_len("input sample", n_u, v.len())?;
        }
        Ok(InputSequence { n_u, values })
    }

    pub fn at(&self, k: usize) -> DVector<f64> {
        self.values
            .get(k)
            .cloned()
            .unwrap_or_else(|| DVector::zeros(self.n_u))
    }
}

#[derive(Clone, Debug)]
pub struct AttackScenario {
    pub attacked: SubsetIndex,
    pub q: usize,
    /// One generator per sensor.
    pub attack: Vec<SignalSpec>,
    pub noise: Vec<SignalSpec>,
    pub noise_bound: Option<f64>,
    /// One generator per disturbance channel.
    pub disturbance: Vec<SignalSpec>,
    pub disturbance_bound: Option<f64>,
    pub horizon: usize,
    pub seed: u64,
    pub initial_state: InitialState,
    pub divergence_ceiling: f64,
    /// When set, `card(W) <= q < p/2` is enforced.
    pub claims_attack_bound: bool,
}

impl AttackScenario {
    /// Every problem found, not just the first.
    pub fn problems(&self, p: usize, s: usize) -> Vec<String> {
        let mut bad = Vec::new();
        if self.attack.len() != p {
            bad.push(format!("attack: expected {p} generators, got {}", self.attack.len()));
        }
        if self.noise.len() != p {
            bad.push(format!("noise: expected {p} generators, got {}", self.noise.len()));
        }
        if self.disturbance.len() != s {
            bad.push(format!(
                "disturbance: expected {s} generators, got {}",
                self.disturbance.len()
            ));
        }
        if self.horizon < 1 {
            bad.push("horizon must be at least 1".into());
        }
        if let Some(&m) = self.attacked.members().iter().find(|&&m| m == 0 || m > p) {
            bad.push(format!("attacked sensor {m} outside 1..={p}"));
        }
        if self.claims_attack_bound {
            if 2 * self.q >= p {
                bad.push(format!("assumption violated: q < p/2 fails (q={}, p={p})", self.q));
            }
            if self.attacked.card() > self.q {
                bad.push(format!(
                    "assumption violated: {} attacked sensors exceed q={}",
                    self.attacked.card(),
                    self.q
                ));
            }
        }
        for (i, g) in self.attack.iter().enumerate() {
            if let Err(e) = g.validate() {
                bad.push(format!("attack[{}]: {e}", i + 1));
            }
            if !self.attacked.contains(i + 1) && !g.is_zero() {
                bad.push(format!("attack[{}]: sensor is not in W but has a nonzero attack", i + 1));
            }
        }
        for (label, gens, bound) in [
            ("noise", &self.noise, self.noise_bound),
            ("disturbance", &self.disturbance, self.disturbance_bound),
        ] {
            for (i, g) in gens.iter().enumerate() {
                if let Err(e) = g.validate() {
                    bad.push(format!("{label}[{}]: {e}", i + 1));
                }
                if let Some(b) = bound {
                    match g.bound() {
                        Some(gb) if gb <= b => {}
                        Some(gb) => bad.push(format!(
                            "{label}[{}]: generator reaches {gb}, above the declared bound {b}",
                            i + 1
                        )),
                        None => bad.push(format!(
                            "{label}[{}]: unbounded generator with a declared bound {b}",
                            i + 1
                        )),
                    }
                }
            }
        }
        if !(self.divergence_ceiling > 0.0) {
            bad.push("divergence ceiling must be positive".into());
        }
        bad
    }

    pub fn validate(&self, p: usize, s: usize) -> Result<()> {
        let bad = self.problems(p, s);
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    /// Same scenario with every attack generator multiplied by `factor`.
    pub fn with_attack_scale(&self, factor: f64) -> AttackScenario {
        let mut out = self.clone();
        out.attack = self.attack.iter().map(|g| g.scaled(factor)).collect();
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub k: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub d: DVector<f64>,
    pub m: DVector<f64>,
    pub a: DVector<f64>,
    pub y: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn csv_header(n: usize, p: usize, s: usize) -> Vec<String> {
        let mut h = vec!["k".to_string()];
        for (prefix, count) in [("x", n), ("y", p), ("a", p), ("m", p), ("d", s)] {
            h.extend((1..=count).map(|i| format!("{prefix}{i}")));
        }
        h
    }

    pub fn write_csv<W: std::io::Write>(&self, model: &PlantModel, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(Self::csv_header(model.n, model.p, model.s))?;
        for r in &self.records {
            let mut row = vec![r.k.to_string()];
            for v in [&r.x, &r.y, &r.a, &r.m, &r.d] {
                row.extend(v.iter().map(|x| x.to_string()));
            }
            wr.write_record(&row)?;
        }
        wr.flush().map_err(|e| Error::io("trajectory csv", e))?;
        Ok(())
    }
}

fn stream_name(signal: &str, index: usize) -> String {
    format!("{signal}_{index}")
}

/// Runs the plant forward for `horizon + 1` samples.
pub fn simulate(
    model: &PlantModel,
    scenario: &AttackScenario,
    inputs: &InputSequence,
) -> Result<Trajectory> {
    scenario.validate(model.p, model.s)?;
    let seed = scenario.seed;
    let mut attack_rng: Vec<_> = (1..=model.p).map(|i| stream(seed, &stream_name("attack", i))).collect();
    let mut noise_rng: Vec<_> = (1..=model.p).map(|i| stream(seed, &stream_name("noise", i))).collect();
    let mut dist_rng: Vec<_> =
        (1..=model.s).map(|i| stream(seed, &stream_name("disturbance", i))).collect();
    let mut x = scenario
        .initial_state
        .sample(model.n, &mut stream(seed, "init"))?;

    let mut records = Vec::with_capacity(scenario.horizon + 1);
    for k in 0..=scenario.horizon {
        if !state_ok(&x, scenario.divergence_ceiling) {
            return Err(Error::SimulationDiverged { step: k });
        }
        let draw = |gens: &[SignalSpec], rngs: &mut [ChaCha8Rng]| -> Result<DVector<f64>> {
            let v = gens
                .iter()
                .zip(rngs.iter_mut())
                .map(|(g, r)| sample_signal(g, k, r))
                .collect::<Result<Vec<_>>>()?;
            Ok(DVector::from_vec(v))
        };
        let a = draw(&scenario.attack, &mut attack_rng)?;
        let m = draw(&scenario.noise, &mut noise_rng)?;
        let d = draw(&scenario.disturbance, &mut dist_rng)?;
        let u = inputs.at(k);
        let y = model.measure(&x, &m, &a)?;
        let next = if k < scenario.horizon {
            Some(model.step(&x, &u, &d, k)?)
        } else {
            None
        };
        records.push(TrajectoryRecord {
            k,
            x,
            u,
            d,
            m,
            a,
            y,
        });
        match next {
            Some(nx) => x = nx,
            None => break,
        }
    }
    Ok(Trajectory { records })
}

fn state_ok(x: &DVector<f64>, ceiling: f64) -> bool {
    x.iter().all(|v| v.is_finite() && v.abs() <= ceiling)
}
