//! End-to-end runs, calibration and artifact files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::combinatorics::BankKey;
use crate::config::{ObserverInit, ScenarioConfig};
use crate::error::{Error, Result};
use crate::estimator::{estimator_step, EstimateMap, EstimatorFrame};
use crate::isolation::{compute_thresholds, IsolationFold, IsolationReport, ThresholdTable};
use crate::model::{simulate, stream, Trajectory};
use crate::observers::{
    build_observer, estimate_iss_gains, CalibrationSettings, GainCertificate, IssGainModel,
    Observer, SlopeCertificate,
};

pub const TRAJECTORY_CSV: &str = "trajectory.csv";
pub const FRAMES_CSV: &str = "frames.csv";
pub const WINDOWS_CSV: &str = "isolation_windows.csv";
pub const STEPS_CSV: &str = "isolation_steps.csv";
pub const METADATA_JSON: &str = "metadata.json";
pub const PLOT_STATES_CSV: &str = "plot_states.csv";
pub const PLOT_ISOLATION_CSV: &str = "plot_isolation.csv";

/// Everything a run produces, before anything touches the disk.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub frames: Vec<EstimatorFrame>,
    pub thresholds: Option<ThresholdTable>,
    pub isolation: Option<IsolationReport>,
    pub certificates: Vec<(BankKey, GainCertificate)>,
    pub slope: Option<SlopeCertificate>,
    /// First step at which each diverged observer stopped being finite.
    pub diverged: Vec<(BankKey, usize)>,
}

impl RunOutcome {
    /// `|e(k)|` for every frame.
    pub fn errors(&self) -> Vec<f64> {
        self.frames
            .iter()
            .map(|f| f.error.unwrap_or(f64::NAN))
            .collect()
    }

    /// Largest `|e(k)|` over `k >= from`.
    pub fn tail_max(&self, from: usize) -> f64 {
        self.frames
            .iter()
            .filter(|f| f.k >= from)
            .map(|f| f.error.unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub trajectory: PathBuf,
    pub frames: PathBuf,
    pub isolation_windows: Option<PathBuf>,
    pub isolation_steps: Option<PathBuf>,
    pub metadata: PathBuf,
    pub outcome: RunOutcome,
}

fn initial_estimate(cfg: &ScenarioConfig, key: &BankKey, x0: &DVector<f64>) -> DVector<f64> {
    match &cfg.doc.observers.init {
        ObserverInit::Zero => DVector::zeros(cfg.plant.n),
        ObserverInit::Truth => x0.clone(),
        ObserverInit::Fixed { value } => DVector::from_column_slice(value),
        ObserverInit::Ball { radius } => {
            let mut rng = stream(cfg.scenario.seed, &format!("observer_init_{key}"));
            let dir = DVector::from_fn(cfg.plant.n, |_, _| StandardNormal.sample(&mut rng));
            let r = radius * rng.random::<f64>().powf(1.0 / cfg.plant.n as f64);
            x0 + dir.normalize() * r
        }
    }
}

fn wrap(cfg: &ScenarioConfig, e: Error) -> Error {
    match e {
        Error::Run { .. } => e,
        other => Error::Run {
            config_hash: cfg.source_hash.clone(),
            source: Box::new(other),
        },
    }
}

/// Thresholds from the bundle's ISS gains, honoring the `k_bar_star` override.
pub fn thresholds_for(cfg: &ScenarioConfig) -> Result<ThresholdTable> {
    let iso = &cfg.doc.isolation;
    let mut t = compute_thresholds(
        &cfg.iss,
        &cfg.bank,
        cfg.noise_bound(),
        cfg.disturbance_bound(),
        iso.epsilon,
    )?;
    if let Some(k) = iso.k_bar_star {
        t.k_bar_star = k;
    }
    Ok(t)
}

/// Simulates the plant, steps the bank and the estimator, and folds the
/// isolation windows. No files are written.
pub fn execute(cfg: &ScenarioConfig) -> Result<RunOutcome> {
    execute_inner(cfg).map_err(|e| wrap(cfg, e))
}

fn execute_inner(cfg: &ScenarioConfig) -> Result<RunOutcome> {
    let certificates = cfg.certificates()?;
    let slope = cfg.slope_certificate()?;
    for (key, c) in certificates.iter().filter(|(_, c)| !c.passed) {
        log::warn!(
            "{key}: linearized error matrix has spectral radius {:.4}",
            c.spectral_radius
        );
    }
    let thresholds = if cfg.doc.isolation.enabled {
        Some(thresholds_for(cfg)?)
    } else {
        None
    };

    let trajectory = simulate(&cfg.plant, &cfg.scenario, &cfg.inputs)?;
    let x0 = &trajectory.records[0].x;
    let mut bank: Vec<(BankKey, Box<dyn Observer>)> = cfg
        .gains
        .iter()
        .map(|(key, g)| {
            build_observer(
                cfg.plant.clone(),
                key.subset.clone(),
                g,
                &initial_estimate(cfg, key, x0),
                cfg.doc.observers.condition_cap,
            )
            .map(|o| (key.clone(), o))
        })
        .collect::<Result<_>>()?;

    let mut fold = match &thresholds {
        Some(t) => Some(IsolationFold::new(t.clone(), cfg.doc.isolation.window)?),
        None => None,
    };
    let mut diverged = Vec::new();
    let mut frames = Vec::with_capacity(trajectory.len());
    for rec in &trajectory.records {
        let mut estimates = EstimateMap::new();
        for (key, obs) in bank.iter_mut() {
            let y_j = rec.y.select_rows(&key.subset.rows());
            let was = obs.is_diverged();
            estimates.insert(key.clone(), obs.step(&y_j, &rec.u));
            if obs.is_diverged() && !was {
                diverged.push((key.clone(), rec.k));
            }
        }
        let frame = estimator_step(rec.k, estimates, &cfg.bank, Some(&rec.x))?;
        if let Some(f) = fold.as_mut() {
            f.push(frame.k, &frame.pi);
        }
        frames.push(frame);
    }
    Ok(RunOutcome {
        trajectory,
        frames,
        thresholds,
        isolation: fold.map(IsolationFold::finish),
        certificates,
        slope,
        diverged,
    })
}

fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    body(&mut tmp)?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    v.to_string()
}

pub fn write_frames_csv<W: Write>(cfg: &ScenarioConfig, frames: &[EstimatorFrame], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["k".to_string(), "sigma".to_string()];
    header.extend((1..=cfg.plant.n).map(|i| format!("xhat{i}")));
    header.push("e_norm".into());
    header.extend(cfg.bank.j_list.iter().map(|j| format!("pi_{}", j.joined("_"))));
    wr.write_record(&header)?;
    for f in frames {
        let mut row = vec![f.k.to_string(), f.sigma.joined(",")];
        row.extend(f.x_hat.iter().map(|v| fmt_f64(*v)));
        row.push(f.error.map(fmt_f64).unwrap_or_default());
        row.extend(f.pi.iter().map(|(_, v)| fmt_f64(*v)));
        wr.write_record(&row)?;
    }
    wr.flush().map_err(|e| Error::io("frames csv", e))?;
    Ok(())
}

#[derive(Serialize)]
struct CertificateEntry<'a> {
    subset: String,
    #[serde(flatten)]
    certificate: &'a GainCertificate,
}

#[derive(Serialize)]
struct Metadata<'a> {
    name: String,
    config_hash: &'a str,
    config_path: Option<String>,
    seed: u64,
    horizon: usize,
    window: Option<usize>,
    version: &'static str,
    wall_time_ms: f64,
    observers: usize,
    certificates: Vec<CertificateEntry<'a>>,
    slope_certificate: &'a Option<SlopeCertificate>,
    thresholds: &'a Option<ThresholdTable>,
    diverged_observers: Vec<(String, usize)>,
    files: Vec<String>,
}

/// Runs the scenario and writes every artifact into `out_dir`.
pub fn run_scenario(cfg: &ScenarioConfig, out_dir: &Path) -> Result<RunArtifacts> {
    let started = Instant::now();
    let outcome = execute(cfg)?;
    let io = |e: Error| wrap(cfg, e);
    std::fs::create_dir_all(out_dir).map_err(|e| io(Error::io(out_dir, e)))?;

    let trajectory = out_dir.join(TRAJECTORY_CSV);
    write_atomic(&trajectory, |w| outcome.trajectory.write_csv(&cfg.plant, w)).map_err(io)?;
    let frames = out_dir.join(FRAMES_CSV);
    write_atomic(&frames, |w| write_frames_csv(cfg, &outcome.frames, w)).map_err(io)?;
    let mut files = vec![TRAJECTORY_CSV.to_string(), FRAMES_CSV.to_string()];
    let (mut isolation_windows, mut isolation_steps) = (None, None);
    if let Some(rep) = &outcome.isolation {
        let wpath = out_dir.join(WINDOWS_CSV);
        write_atomic(&wpath, |w| rep.write_windows_csv(w)).map_err(io)?;
        let spath = out_dir.join(STEPS_CSV);
        write_atomic(&spath, |w| rep.write_steps_csv(w)).map_err(io)?;
        files.push(WINDOWS_CSV.into());
        files.push(STEPS_CSV.into());
        isolation_windows = Some(wpath);
        isolation_steps = Some(spath);
    }

    let meta = Metadata {
        name: cfg.name(),
        config_hash: &cfg.source_hash,
        config_path: cfg.source_path.as_ref().map(|p| p.display().to_string()),
        seed: cfg.scenario.seed,
        horizon: cfg.scenario.horizon,
        window: cfg.doc.isolation.enabled.then_some(cfg.doc.isolation.window),
        version: env!("CARGO_PKG_VERSION"),
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        observers: cfg.bank.observer_count(),
        certificates: outcome
            .certificates
            .iter()
            .map(|(k, c)| CertificateEntry {
                subset: k.to_string(),
                certificate: c,
            })
            .collect(),
        slope_certificate: &outcome.slope,
        thresholds: &outcome.thresholds,
        diverged_observers: outcome.diverged.iter().map(|(k, s)| (k.to_string(), *s)).collect(),
        files,
    };
    let metadata = out_dir.join(METADATA_JSON);
    write_atomic(&metadata, |w| {
        serde_json::to_writer_pretty(&mut *w, &meta).map_err(|e| Error::config(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(METADATA_JSON, e))
    })
    .map_err(io)?;

    Ok(RunArtifacts {
        dir: out_dir.to_path_buf(),
        trajectory,
        frames,
        isolation_windows,
        isolation_steps,
        metadata,
        outcome,
    })
}

/// Calibration settings derived from a config.
pub fn calibration_settings(cfg: &ScenarioConfig, trials: usize, horizon: usize) -> CalibrationSettings {
    let cal = &cfg.doc.calibration;
    let transient_e0 = match &cfg.doc.observers.init {
        ObserverInit::Truth => 0.0,
        ObserverInit::Ball { radius } => *radius,
        _ => cal.initial_error,
    };
    CalibrationSettings {
        noise_bound: cfg.noise_bound(),
        disturbance_bound: cfg.disturbance_bound(),
        trials,
        horizon,
        seed: cal.seed,
        safety_factor: cal.safety_factor,
        initial_state: cfg.scenario.initial_state.clone(),
        initial_error: cal.initial_error,
        epsilon: cfg.doc.isolation.epsilon,
        transient_e0,
        divergence_ceiling: cfg.scenario.divergence_ceiling,
    }
}

/// Fits ISS gains for every bank member. Failures are collected per subset.
pub fn calibrate_gains(
    cfg: &ScenarioConfig,
    trials: usize,
    horizon: usize,
) -> Result<BTreeMap<BankKey, IssGainModel>> {
    if trials == 0 {
        return Err(Error::config("calibration needs trials >= 1"));
    }
    let settings = calibration_settings(cfg, trials, horizon);
    let mut out = BTreeMap::new();
    let mut failures = Vec::new();
    for (key, g) in &cfg.gains {
        let obs = build_observer(
            cfg.plant.clone(),
            key.subset.clone(),
            g,
            &DVector::zeros(cfg.plant.n),
            cfg.doc.observers.condition_cap,
        )?;
        match estimate_iss_gains(obs.as_ref(), &cfg.plant, &settings) {
            Ok(m) => {
                out.insert(key.clone(), m);
            }
            Err(Error::Calibration(list)) => failures.extend(list.into_iter().map(|m| format!("{key}: {m}"))),
            Err(e) => failures.push(format!("{key}: {e}")),
        }
    }
    if failures.is_empty() {
        Ok(out)
    } else {
        Err(Error::Calibration(failures))
    }
}

/// Default location of a calibrated bundle: `<stem>.calibrated.json` next to the source.
pub fn calibrated_path(cfg: &ScenarioConfig) -> PathBuf {
    match &cfg.source_path {
        Some(p) => {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            p.with_file_name(format!("{stem}.calibrated.json"))
        }
        None => PathBuf::from(format!("{}.calibrated.json", cfg.name())),
    }
}

/// Calibrates and writes a new bundle; the source file is left untouched.
pub fn calibrate(cfg: &ScenarioConfig, trials: usize, horizon: usize, out: Option<&Path>) -> Result<PathBuf> {
    let gains = calibrate_gains(cfg, trials, horizon)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| calibrated_path(cfg));
    if cfg.source_path.as_deref() == Some(path.as_path()) {
        return Err(Error::config("refusing to overwrite the source config"));
    }
    let text = cfg.document_with_iss(&gains)?;
    write_atomic(&path, |w| w.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e)))?;
    Ok(path)
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Ok((vec![], vec![]));
    }
    let mut rd = csv::Reader::from_reader(bytes.as_slice());
    let header = rd.headers()?.iter().map(str::to_string).collect();
    let rows = rd
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
    Ok((header, rows))
}

/// Writes plot-ready files next to the run artifacts:
///
/// * `plot_states.csv`: `k,x1,xhat1,x2,xhat2,...`
/// * `plot_isolation.csv`: `window_i,k_start,k_end,sensor`, one row per
///   isolated sensor and sensor `0` for an empty isolated set.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let (fh, frows) = read_csv(&dir.join(FRAMES_CSV))?;
    let (th, trows) = read_csv(&dir.join(TRAJECTORY_CSV))?;
    let states = dir.join(PLOT_STATES_CSV);
    let mut written = vec![states.clone()];
    if frows.is_empty() {
        log::warn!("{} has no frames; writing an empty plot file", dir.join(FRAMES_CSV).display());
        write_atomic(&states, |_| Ok(()))?;
    } else {
        let n = fh.iter().filter(|h| h.starts_with("xhat")).count();
        let col = |hdr: &[String], name: &str| {
            hdr.iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::config(format!("column {name} missing from artifacts")))
        };
        let mut cols = Vec::with_capacity(n);
        for i in 1..=n {
            cols.push((col(&th, &format!("x{i}"))?, col(&fh, &format!("xhat{i}"))?));
        }
        let by_k: BTreeMap<&str, &Vec<String>> = trows.iter().map(|r| (r[0].as_str(), r)).collect();
        write_atomic(&states, |w| {
            let mut wr = csv::Writer::from_writer(w);
            let mut header = vec!["k".to_string()];
            for i in 1..=n {
                header.push(format!("x{i}"));
                header.push(format!("xhat{i}"));
            }
            wr.write_record(&header)?;
            for fr in &frows {
                let Some(tr) = by_k.get(fr[0].as_str()) else { continue };
                let mut row = vec![fr[0].clone()];
                for (tc, fc) in &cols {
                    row.push(tr[*tc].clone());
                    row.push(fr[*fc].clone());
                }
                wr.write_record(&row)?;
            }
            wr.flush().map_err(|e| Error::io(PLOT_STATES_CSV, e))
        })?;
    }

    let windows = dir.join(WINDOWS_CSV);
    if windows.exists() {
        let (_, wrows) = read_csv(&windows)?;
        let iso = dir.join(PLOT_ISOLATION_CSV);
        write_atomic(&iso, |w| {
            let mut wr = csv::Writer::from_writer(w);
            wr.write_record(["window_i", "k_start", "k_end", "sensor"])?;
            for r in &wrows {
                for s in r[4].split(',') {
                    wr.write_record([&r[0], &r[1], &r[2], s])?;
                }
            }
            wr.flush().map_err(|e| Error::io(PLOT_ISOLATION_CSV, e))
        })?;
        written.push(iso);
    }
    Ok(written)
}
