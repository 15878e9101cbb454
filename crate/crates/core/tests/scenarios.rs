use secest::combinatorics::{BankKey, SubsetIndex};
use secest::config::{load_config, ConfigDocument, ObserverInit, ScenarioConfig};
use secest::harness::{execute, RunOutcome};
use secest::model::SignalSpec;
use secest::Error;

fn bundled(name: &str) -> ScenarioConfig {
    load_config(secest::scenario_dir().join(format!("{name}.json"))).unwrap()
}

fn variant(name: &str, edit: impl FnOnce(&mut ConfigDocument)) -> ScenarioConfig {
    let base = bundled(name);
    let mut doc = base.doc.clone();
    edit(&mut doc);
    ScenarioConfig::from_document(doc, base.source_hash).unwrap()
}

fn attack_free(doc: &mut ConfigDocument) {
    doc.scenario.attacked.clear();
    doc.scenario.attack = SignalSpec::Zero;
    doc.scenario.attack_overrides.clear();
}

fn quiet(doc: &mut ConfigDocument) {
    attack_free(doc);
    doc.scenario.noise = SignalSpec::Zero;
    doc.scenario.disturbance = SignalSpec::Zero;
}

fn observer_error(o: &RunOutcome, k: usize, key: &BankKey) -> f64 {
    (&o.frames[k].estimates[key] - &o.trajectory.records[k].x).norm()
}

fn ok_or_plant_diverged(r: Result<RunOutcome, Error>) -> Option<RunOutcome> {
    match r {
        Ok(o) => Some(o),
        Err(Error::Run { source, .. }) if matches!(*source, Error::SimulationDiverged { .. }) => None,
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn example1_bank_shape() {
    let cfg = bundled("example1");
    assert_eq!((cfg.plant.p, cfg.bank.q, cfg.bank.observer_count()), (3, 1, 6));
}

#[test]
fn example1_selects_attack_free_pair() {
    let thirteen = SubsetIndex::new(vec![1, 3], 3).unwrap();
    let mut checked = 0;
    for seed in 1..=20 {
        let cfg = variant("example1", |d| d.scenario.seed = seed);
        let Some(o) = ok_or_plant_diverged(execute(&cfg)) else { continue };
        checked += 1;
        assert_eq!(o.frames.len(), 50);
        let last = o.frames.last().unwrap();
        assert_eq!(last.sigma, thirteen, "seed {seed}");
        assert!(last.error.unwrap() < 1e-2);
    }
    assert!(checked >= 10);
}

#[test]
fn attack_free_truth_start_stays_exact_for_every_family() {
    for name in ["example1", "example2", "example3", "example4"] {
        let cfg = variant(name, |d| {
            quiet(d);
            d.observers.init = ObserverInit::Truth;
            d.scenario.horizon = d.scenario.horizon.min(60);
        });
        let o = (1..=10)
            .find_map(|s| ok_or_plant_diverged(execute(&cfg.clone().with_overrides(&secest::config::Overrides {
                seed: Some(s),
                ..Default::default()
            }).unwrap())))
            .unwrap();
        for (f, r) in o.frames.iter().zip(&o.trajectory.records) {
            let scale = 1.0 + r.x.norm();
            for (key, est) in &f.estimates {
                let e = (est - &r.x).norm();
                assert!(e <= 1e-9 * scale, "{name} {key} k={}: {e}", f.k);
            }
            for (_, pi) in &f.pi {
                assert!(*pi <= 1e-9 * scale);
            }
        }
    }
}

#[test]
fn example2_observers_converge_attack_free() {
    let cfg = variant("example2", |d| {
        quiet(d);
        d.observers.init = ObserverInit::Ball { radius: 1.0 };
    });
    let o = execute(&cfg).unwrap();
    let last = o.frames.len() - 1;
    for key in cfg.bank.keys() {
        assert!(observer_error(&o, last, &key) < 1e-6, "{key}");
    }
}

#[test]
fn example3_observer_123_respects_exponential_envelope() {
    let key = BankKey::parse("J:1,2,3", 5).unwrap();
    let iss = bundled("example3").iss[&key].clone();
    for seed in 1000..1020 {
        let cfg = variant("example3", |d| {
            quiet(d);
            d.observers.init = ObserverInit::Ball { radius: 1.0 };
            d.scenario.seed = seed;
        });
        let o = execute(&cfg).unwrap();
        let e0 = observer_error(&o, 0, &key);
        for k in 0..o.frames.len() {
            let bound = iss.bound(k, e0, 0.0, 0.0) + 1e-9;
            assert!(observer_error(&o, k, &key) <= bound, "seed {seed} k={k}");
        }
    }
}

#[test]
fn example4_iss_bounds_hold_on_fresh_seeds() {
    let base = bundled("example4");
    let m_bar = base.noise_bound();
    let seeds = 40;
    let mut ok = 0;
    for seed in 5000..5000 + seeds {
        let cfg = variant("example4", |d| {
            attack_free(d);
            d.scenario.seed = seed;
        });
        let o = execute(&cfg).unwrap();
        let tail = o.frames.len() / 2;
        let held = cfg.bank.keys().iter().all(|key| {
            let g = &cfg.iss[key];
            (tail..o.frames.len()).all(|k| observer_error(&o, k, key) <= g.steady_bound(m_bar, 0.0))
        });
        ok += held as u64;
    }
    assert!(ok as f64 >= 0.95 * seeds as f64, "{ok}/{seeds}");
}

#[test]
fn calibrated_bundles_are_finite() {
    for name in ["example3", "example4"] {
        let cfg = bundled(name);
        assert!(cfg.missing_iss().is_empty());
        for (key, g) in &cfg.iss {
            assert!(g.problems().is_empty(), "{name} {key}: {:?}", g.problems());
            assert!(g.c.is_finite() && g.gamma1.is_finite() && g.nu.is_finite());
        }
        let t = secest::harness::thresholds_for(&cfg).unwrap();
        assert!(t.thresholds.iter().all(|(_, v)| v.is_finite() && *v >= 0.0));
    }
}

#[test]
fn example3_certificates_pass() {
    let cfg = bundled("example3");
    let certs = cfg.certificates().unwrap();
    assert_eq!(certs.len(), 15);
    assert!(certs.iter().all(|(_, c)| c.passed));
    assert!(cfg.slope_certificate().unwrap().unwrap().passed);
}

#[test]
fn selected_pi_never_exceeds_attack_free_subset() {
    let o = execute(&bundled("example3")).unwrap();
    let free = SubsetIndex::new(vec![1, 3, 4], 5).unwrap();
    for f in &o.frames {
        let pi_free = f.pi.iter().find(|(j, _)| *j == free).unwrap().1;
        assert!(f.sigma_pi() <= pi_free);
    }
}

#[test]
fn example4_runs_ten_windows_at_n100() {
    let o = execute(&bundled("example4")).unwrap();
    let rep = o.isolation.unwrap();
    assert_eq!(o.frames.len(), 1000);
    assert_eq!(rep.windows.len(), 10);
    assert!(rep.windows.iter().all(|w| w.isolated.card() <= 1));
}

#[test]
fn attack_free_union_is_full_without_attacks() {
    let mut full = 0;
    let mut total = 0;
    for seed in 1..=5 {
        let cfg = variant("example4", |d| {
            attack_free(d);
            d.scenario.seed = seed;
        });
        let rep = execute(&cfg).unwrap().isolation.unwrap();
        for (k, set) in &rep.per_step {
            if *k >= rep.k_bar_star {
                total += 1;
                full += (set.card() == 4) as usize;
            }
        }
    }
    assert!(full as f64 >= 0.95 * total as f64, "{full}/{total}");
}

#[test]
fn larger_thresholds_only_grow_the_union() {
    let cfg = bundled("example4");
    let o = execute(&cfg).unwrap();
    let table = secest::harness::thresholds_for(&cfg).unwrap();
    for f in &o.frames {
        let small = secest::isolation::attack_free_union(&f.pi, &table.scaled(0.1));
        let big = secest::isolation::attack_free_union(&f.pi, &table);
        assert!(small.is_subset_of(&big));
    }
}

#[test]
fn pi_columns_follow_canonical_order() {
    let tmp = tempfile::tempdir().unwrap();
    secest::harness::run_scenario(&bundled("example3"), tmp.path()).unwrap();
    let header = std::fs::read_to_string(tmp.path().join("frames.csv")).unwrap();
    let header = header.lines().next().unwrap().to_string();
    let pis: Vec<&str> = header.split(',').filter(|c| c.starts_with("pi_")).collect();
    let mut sorted = pis.clone();
    sorted.sort_by_key(|c| c[3..].split('_').map(|s| s.parse::<usize>().unwrap()).collect::<Vec<_>>());
    assert_eq!(pis, sorted);
    assert!(header.contains(",e_norm,"));
}
