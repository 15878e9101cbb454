//! Sensor subsets and the observer bank index.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A set of 1-based sensor indices, kept sorted.
///
/// Ordering is lexicographic on the member list, which is the canonical
/// order used for every tie-break.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubsetIndex {
    members: Vec<usize>,
}

impl Ord for SubsetIndex {
    fn cmp(&self, other: &Self) -> Ordering {
        self.members.cmp(&other.members)
    }
}

impl PartialOrd for SubsetIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl SubsetIndex {
    /// Builds a subset of `{1..p}`. Members must be strictly increasing.
    pub fn new(members: Vec<usize>, p: usize) -> Result<Self> {
        for w in members.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::config(format!(
                    "subset members must be strictly increasing: {members:?}"
                )));
            }
        }
        if let Some(&bad) = members.iter().find(|&&m| m == 0 || m > p) {
            return Err(Error::config(format!(
                "sensor index {bad} outside 1..={p}"
            )));
        }
        Ok(SubsetIndex { members })
    }

    /// Sorts and deduplicates before building.
    pub fn from_unsorted(mut members: Vec<usize>, p: usize) -> Result<Self> {
        members.sort_unstable();
        members.dedup();
        Self::new(members, p)
    }

    pub(crate) fn from_sorted_unchecked(members: Vec<usize>) -> Self {
        SubsetIndex { members }
    }

    pub fn full(p: usize) -> Self {
        SubsetIndex {
            members: (1..=p).collect(),
        }
    }

    pub fn empty() -> Self {
        SubsetIndex::default()
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn card(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, sensor: usize) -> bool {
        self.members.binary_search(&sensor).is_ok()
    }

    pub fn is_subset_of(&self, other: &SubsetIndex) -> bool {
        self.members.iter().all(|m| other.contains(*m))
    }

    /// Zero-based row indices, handy for slicing output vectors.
    pub fn rows(&self) -> Vec<usize> {
        self.members.iter().map(|m| m - 1).collect()
    }

    /// `{1..p}` minus this set.
    pub fn complement(&self, p: usize) -> SubsetIndex {
        SubsetIndex {
            members: (1..=p).filter(|i| !self.contains(*i)).collect(),
        }
    }

    pub fn union(&self, other: &SubsetIndex) -> SubsetIndex {
        let mut m = self.members.clone();
        m.extend_from_slice(&other.members);
        m.sort_unstable();
        m.dedup();
        SubsetIndex { members: m }
    }

    /// Comma-joined members, e.g. `1,3,4`. Empty set gives an empty string.
    pub fn joined(&self, sep: &str) -> String {
        self.members
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(sep)
    }
}

impl fmt::Display for SubsetIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.joined(","))
    }
}

/// J-class subsets have `p - q` members, S-class subsets `p - 2q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubsetClass {
    J,
    S,
}

/// A member of the observer bank: a subset tagged with its class.
///
/// The class is explicit because with `q = 0` both classes have the same
/// cardinality.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BankKey {
    pub class: SubsetClass,
    pub subset: SubsetIndex,
}

impl BankKey {
    pub fn j(subset: SubsetIndex) -> Self {
        BankKey {
            class: SubsetClass::J,
            subset,
        }
    }

    pub fn s(subset: SubsetIndex) -> Self {
        BankKey {
            class: SubsetClass::S,
            subset,
        }
    }

    /// Parses `J:1,3,4` or `S:2`.
    pub fn parse(key: &str, p: usize) -> Result<Self> {
        let (class, rest) = key
            .split_once(':')
            .ok_or_else(|| Error::config(format!("bank key {key:?} lacks a class prefix")))?;
        let class = match class.trim() {
            "J" => SubsetClass::J,
            "S" => SubsetClass::S,
            other => {
                return Err(Error::config(format!(
                    "bank key {key:?}: unknown class {other:?}"
                )))
            }
        };
        let members = rest
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config(format!("bank key {key:?}: bad index {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BankKey {
            class,
            subset: SubsetIndex::new(members, p)?,
        })
    }
}

impl fmt::Display for BankKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self.class {
            SubsetClass::J => "J",
            SubsetClass::S => "S",
        };
        write!(f, "{c}:{}", self.subset.joined(","))
    }
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// All subsets of `{1..p}` with `size` members, in lexicographic order.
pub fn enumerate_subsets(p: usize, size: usize) -> Result<Vec<SubsetIndex>> {
    if size == 0 || size > p {
        return Err(Error::config(format!(
            "subset size {size} out of range 1..={p}"
        )));
    }
    let mut out = Vec::with_capacity(binomial(p, size));
    let mut cur: Vec<usize> = (1..=size).collect();
    loop {
        out.push(SubsetIndex::from_sorted_unchecked(cur.clone()));
        // rightmost position that can still advance
        let Some(i) = (0..size).rev().find(|&i| cur[i] < p - (size - 1 - i)) else {
            break;
        };
        cur[i] += 1;
        for j in i + 1..size {
            cur[j] = cur[j - 1] + 1;
        }
    }
    Ok(out)
}

/// J list, S list and, for each J, the indices into the S list of its subsets.
#[derive(Clone, Debug)]
pub struct BankIndex {
    pub p: usize,
    pub q: usize,
    pub j_list: Vec<SubsetIndex>,
    pub s_list: Vec<SubsetIndex>,
    pub containment: Vec<Vec<usize>>,
}

impl BankIndex {
    pub fn observer_count(&self) -> usize {
        self.j_list.len() + self.s_list.len()
    }

    /// Every bank member, J-class first, each class in canonical order.
    pub fn keys(&self) -> Vec<BankKey> {
        self.j_list
            .iter()
            .cloned()
            .map(BankKey::j)
            .chain(self.s_list.iter().cloned().map(BankKey::s))
            .collect()
    }

    pub fn contained_in(&self, j: usize) -> impl Iterator<Item = &SubsetIndex> {
        self.containment[j].iter().map(move |&s| &self.s_list[s])
    }

    pub fn j_position(&self, j: &SubsetIndex) -> Option<usize> {
        self.j_list.binary_search(j).ok()
    }
}

pub fn bank_index(p: usize, q: usize) -> Result<BankIndex> {
    if p == 0 {
        return Err(Error::config("sensor count p must be at least 1"));
    }
    if 2 * q >= p {
        return Err(Error::Assumption(format!(
            "q < p/2 fails (q={q}, p={p})"
        )));
    }
    let j_list = enumerate_subsets(p, p - q)?;
    let s_list = enumerate_subsets(p, p - 2 * q)?;
    let containment = j_list
        .iter()
        .map(|j| {
            s_list
                .iter()
                .enumerate()
                .filter(|(_, s)| s.is_subset_of(j))
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    Ok(BankIndex {
        p,
        q,
        j_list,
        s_list,
        containment,
    })
}
