//! Thresholds π̄_J, the attack-free union W̄(k) and windowed isolation.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::combinatorics::{BankIndex, BankKey, SubsetIndex};
use crate::error::{Error, Result};
use crate::estimator::EstimatorFrame;
use crate::observers::IssGainModel;

#[derive(Clone, Debug, Serialize)]
pub struct ThresholdTable {
    pub p: usize,
    pub q: usize,
    /// `(J, π̄_J)` in canonical order.
    pub thresholds: Vec<(SubsetIndex, f64)>,
    pub k_bar_star: usize,
    pub epsilon: f64,
}

impl ThresholdTable {
    pub fn threshold(&self, j: &SubsetIndex) -> Option<f64> {
        self.thresholds.iter().find(|(s, _)| s == j).map(|(_, t)| *t)
    }

    /// Same table with every threshold multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> ThresholdTable {
        let mut t = self.clone();
        t.thresholds.iter_mut().for_each(|(_, v)| *v *= factor);
        t
    }
}

/// `π̄_J = 2 (ε + γ1' m̄ + γ2' d̄ + ν')`, primes taking the max over J and its S subsets.
pub fn compute_thresholds(
    gains: &BTreeMap<BankKey, IssGainModel>,
    bank: &BankIndex,
    m_bar: f64,
    d_bar: f64,
    epsilon: f64,
) -> Result<ThresholdTable> {
    let get = |key: BankKey| {
        gains
            .get(&key)
            .ok_or_else(|| Error::config(format!("missing ISS gains for {key}")))
    };
    let mut thresholds = Vec::with_capacity(bank.j_list.len());
    let mut k_bar_star = 0;
    for (ji, j) in bank.j_list.iter().enumerate() {
        let mut members = vec![get(BankKey::j(j.clone()))?];
        for s in bank.contained_in(ji) {
            members.push(get(BankKey::s(s.clone()))?);
        }
        let g1 = members.iter().map(|g| g.gamma1 * m_bar).fold(0.0, f64::max);
        let g2 = members.iter().map(|g| g.gamma2 * d_bar).fold(0.0, f64::max);
        let nu = members.iter().map(|g| g.nu).fold(0.0, f64::max);
        k_bar_star = members.iter().map(|g| g.k_star).fold(k_bar_star, usize::max);
        thresholds.push((j.clone(), 2.0 * (epsilon + g1 + g2 + nu)));
    }
    for s in &bank.s_list {
        k_bar_star = k_bar_star.max(get(BankKey::s(s.clone()))?.k_star);
    }
    Ok(ThresholdTable {
        p: bank.p,
        q: bank.q,
        thresholds,
        k_bar_star,
        epsilon,
    })
}

/// Union of every J with `π_J <= π̄_J`. `pi` must follow the table's order.
pub fn attack_free_union(pi: &[(SubsetIndex, f64)], table: &ThresholdTable) -> SubsetIndex {
    let mut union = SubsetIndex::empty();
    for ((j, v), (tj, t)) in pi.iter().zip(&table.thresholds) {
        debug_assert_eq!(j, tj);
        if *v <= *t {
            union = union.union(j);
        }
    }
    union
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WindowResult {
    /// 1-based window number.
    pub index: usize,
    pub k_start: usize,
    pub k_end: usize,
    pub counters: BTreeMap<SubsetIndex, usize>,
    pub winner: Option<SubsetIndex>,
    pub isolated: SubsetIndex,
    pub no_quorum: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct IsolationReport {
    pub window: usize,
    pub k_bar_star: usize,
    pub per_step: Vec<(usize, SubsetIndex)>,
    pub windows: Vec<WindowResult>,
}

impl IsolationReport {
    /// Share of windows whose isolated set equals `set`.
    pub fn fraction_isolating(&self, set: &SubsetIndex) -> f64 {
        if self.windows.is_empty() {
            return 0.0;
        }
        let hits = self.windows.iter().filter(|w| &w.isolated == set).count();
        hits as f64 / self.windows.len() as f64
    }

    pub fn write_windows_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["window_i", "k_start", "k_end", "winner_J", "isolated_set", "no_quorum"])?;
        for win in &self.windows {
            let isolated = if win.isolated.is_empty() {
                "0".to_string()
            } else {
                win.isolated.joined(",")
            };
            wr.write_record([
                win.index.to_string(),
                win.k_start.to_string(),
                win.k_end.to_string(),
                win.winner.as_ref().map(|j| j.joined(",")).unwrap_or_default(),
                isolated,
                win.no_quorum.to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("isolation csv", e))?;
        Ok(())
    }

    pub fn write_steps_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["k", "Wbar"])?;
        for (k, set) in &self.per_step {
            wr.write_record([k.to_string(), set.joined(",")])?;
        }
        wr.flush().map_err(|e| Error::io("isolation csv", e))?;
        Ok(())
    }
}

/// Streaming form of Algorithm 1: push one step at a time.
#[derive(Clone, Debug)]
pub struct IsolationFold {
    table: ThresholdTable,
    window: usize,
    current: BTreeMap<SubsetIndex, usize>,
    report: IsolationReport,
}

impl IsolationFold {
    pub fn new(table: ThresholdTable, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::config("window length N must be at least 1"));
        }
        let report = IsolationReport {
            window,
            k_bar_star: table.k_bar_star,
            ..Default::default()
        };
        Ok(IsolationFold {
            table,
            window,
            current: BTreeMap::new(),
            report,
        })
    }

    pub fn push(&mut self, k: usize, pi: &[(SubsetIndex, f64)]) {
        let wbar = attack_free_union(pi, &self.table);
        let kb = self.table.k_bar_star;
        if k >= kb {
            if wbar.card() >= self.table.p - self.table.q {
                *self.current.entry(wbar.clone()).or_insert(0) += 1;
            }
            let offset = k - kb;
            if offset % self.window == self.window - 1 {
                self.close_window(offset / self.window + 1);
            }
        }
        self.report.per_step.push((k, wbar));
    }

    fn close_window(&mut self, index: usize) {
        let counters = std::mem::take(&mut self.current);
        // BTreeMap iterates in canonical order, so the first max wins ties
        let mut winner: Option<(&SubsetIndex, usize)> = None;
        for (j, n) in &counters {
            if winner.is_none_or(|(_, b)| *n > b) {
                winner = Some((j, *n));
            }
        }
        let winner = winner.filter(|(_, n)| *n > 0).map(|(j, _)| j.clone());
        let isolated = winner
            .as_ref()
            .map(|j| j.complement(self.table.p))
            .unwrap_or_default();
        let k_start = self.table.k_bar_star + (index - 1) * self.window;
        self.report.windows.push(WindowResult {
            index,
            k_start,
            k_end: k_start + self.window - 1,
            no_quorum: winner.is_none(),
            counters,
            winner,
            isolated,
        });
    }

    /// Finishes the fold. A trailing partial window is dropped.
    pub fn finish(self) -> IsolationReport {
        self.report
    }
}

/// Algorithm 1 over a recorded frame stream.
pub fn windowed_isolation(
    frames: &[EstimatorFrame],
    table: &ThresholdTable,
    window: usize,
) -> Result<IsolationReport> {
    let mut fold = IsolationFold::new(table.clone(), window)?;
    for f in frames {
        fold.push(f.k, &f.pi);
    }
    Ok(fold.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combinatorics::bank_index;

    fn gm(gamma1: f64, nu: f64, k_star: usize) -> IssGainModel {
        IssGainModel {
            c: 1.0,
            lambda: 0.5,
            gamma1,
            gamma2: 0.0,
            nu,
            k_star,
        }
    }

    fn set(m: &[usize], p: usize) -> SubsetIndex {
        SubsetIndex::new(m.to_vec(), p).unwrap()
    }

    #[test]
    fn noise_free_thresholds_vanish() {
        let bank = bank_index(4, 1).unwrap();
        let gains = bank.keys().into_iter().map(|k| (k, gm(3.0, 0.0, 0))).collect();
        let t = compute_thresholds(&gains, &bank, 0.0, 0.0, 0.0).unwrap();
        assert!(t.thresholds.iter().all(|(_, v)| *v == 0.0));
    }

    #[test]
    fn threshold_takes_max_over_j_and_its_subsets() {
        // p=3, q=1, J={1,2} with S{1}, S{2}
        let bank = bank_index(3, 1).unwrap();
        let mut gains: BTreeMap<_, _> = bank.keys().into_iter().map(|k| (k, gm(0.0, 0.0, 0))).collect();
        gains.insert(BankKey::j(set(&[1, 2], 3)), gm(0.3, 0.0, 0));
        gains.insert(BankKey::s(set(&[1], 3)), gm(0.5, 0.0, 0));
        gains.insert(BankKey::s(set(&[2], 3)), gm(0.2, 0.0, 7));
        let t = compute_thresholds(&gains, &bank, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(t.threshold(&set(&[1, 2], 3)), Some(1.0));
        assert_eq!(t.k_bar_star, 7);
    }

    #[test]
    fn missing_gain_named() {
        let bank = bank_index(3, 1).unwrap();
        let mut gains: BTreeMap<_, _> = bank.keys().into_iter().map(|k| (k, gm(0.0, 0.0, 0))).collect();
        gains.remove(&BankKey::s(set(&[3], 3)));
        match compute_thresholds(&gains, &bank, 1.0, 0.0, 0.0) {
            Err(Error::Config(m)) => assert!(m.contains("S:3")),
            other => panic!("{other:?}"),
        }
    }

    fn table(p: usize, q: usize, th: f64) -> ThresholdTable {
        let bank = bank_index(p, q).unwrap();
        ThresholdTable {
            p,
            q,
            thresholds: bank.j_list.iter().map(|j| (j.clone(), th)).collect(),
            k_bar_star: 0,
            epsilon: 0.0,
        }
    }

    fn pis(t: &ThresholdTable, vals: &[f64]) -> Vec<(SubsetIndex, f64)> {
        t.thresholds.iter().map(|(j, _)| j.clone()).zip(vals.iter().copied()).collect()
    }

    #[test]
    fn unions() {
        let t = table(4, 1, 1.0);
        // J order: {1,2,3} {1,2,4} {1,3,4} {2,3,4}
        assert_eq!(attack_free_union(&pis(&t, &[0.0; 4]), &t), SubsetIndex::full(4));
        assert_eq!(attack_free_union(&pis(&t, &[5.0, 0.5, 5.0, 5.0]), &t), set(&[1, 2, 4], 4));
        assert_eq!(attack_free_union(&pis(&t, &[0.5, 0.5, 5.0, 5.0]), &t), SubsetIndex::full(4));
        assert!(attack_free_union(&pis(&t, &[5.0; 4]), &t).is_empty());
    }

    #[test]
    fn attack_free_stream_isolates_nothing() {
        let t = table(4, 1, 1.0);
        let mut fold = IsolationFold::new(t.clone(), 10).unwrap();
        for k in 0..35 {
            fold.push(k, &pis(&t, &[0.0; 4]));
        }
        let r = fold.finish();
        assert_eq!(r.windows.len(), 3);
        for w in &r.windows {
            assert_eq!(w.winner, Some(SubsetIndex::full(4)));
            assert!(w.isolated.is_empty());
            assert!(!w.no_quorum);
        }
        assert_eq!(r.per_step.len(), 35);
    }

    #[test]
    fn majority_vote_and_window_bounds() {
        let mut t = table(4, 1, 1.0);
        t.k_bar_star = 5;
        let mut fold = IsolationFold::new(t.clone(), 4).unwrap();
        for k in 0..13 {
            // only {1,2,4} passes on most steps
            let v = if k % 4 == 0 { [0.0; 4] } else { [5.0, 0.5, 5.0, 5.0] };
            fold.push(k, &pis(&t, &v));
        }
        let r = fold.finish();
        assert_eq!(r.windows.len(), 2);
        assert_eq!((r.windows[0].k_start, r.windows[0].k_end), (5, 8));
        assert_eq!((r.windows[1].k_start, r.windows[1].k_end), (9, 12));
        assert_eq!(r.windows[0].isolated, set(&[3], 4));
        assert_eq!(r.windows[0].counters.values().sum::<usize>(), 4);
    }

    #[test]
    fn no_quorum_window() {
        let t = table(4, 1, 1.0);
        let mut fold = IsolationFold::new(t.clone(), 5).unwrap();
        for k in 0..5 {
            // W̄ alternates between {1,2,3,4}-free sets of size < 3
            let v = [5.0; 4];
            fold.push(k, &pis(&t, &v));
        }
        let r = fold.finish();
        assert!(r.windows[0].no_quorum);
        assert!(r.windows[0].isolated.is_empty());
        assert_eq!(r.windows[0].winner, None);
    }

    #[test]
    fn tie_goes_to_canonical_order() {
        let t = table(4, 1, 1.0);
        let mut fold = IsolationFold::new(t.clone(), 2).unwrap();
        fold.push(0, &pis(&t, &[5.0, 5.0, 5.0, 0.0])); // {2,3,4}
        fold.push(1, &pis(&t, &[5.0, 0.0, 5.0, 5.0])); // {1,2,4}
        let r = fold.finish();
        assert_eq!(r.windows[0].winner, Some(set(&[1, 2, 4], 4)));
    }

    #[test]
    fn empty_stream_empty_report() {
        let t = table(3, 1, 1.0);
        let r = windowed_isolation(&[], &t, 10).unwrap();
        assert!(r.windows.is_empty() && r.per_step.is_empty());
    }
}
