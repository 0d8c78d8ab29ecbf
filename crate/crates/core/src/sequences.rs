//! Treatment sequences, crossover designs and the complete-randomization
//! assignment mechanism.
//!
//! Sequences are words over `{A, B}` and order lexicographically with
//! `A < B`. That order fixes the column layout of every matrix in the crate.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Largest horizon for which the full `2^T` sequence set is enumerated.
pub const MAX_HORIZON: usize = 16;

/// Upper bound on the number of assignments [`enumerate_assignments`] will walk.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Treatment {
    A,
    B,
}

impl Treatment {
    pub fn symbol(self) -> char {
        match self {
            Treatment::A => 'A',
            Treatment::B => 'B',
        }
    }

    pub fn from_symbol(c: char) -> Option<Self> {
        match c {
            'A' => Some(Treatment::A),
            'B' => Some(Treatment::B),
            _ => None,
        }
    }
}

/// A word over the two treatment labels. Periods are 1-based in the public API.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TreatmentSequence(Vec<Treatment>);

impl TreatmentSequence {
    pub fn new(letters: Vec<Treatment>) -> Self {
        TreatmentSequence(letters)
    }

    pub fn empty() -> Self {
        TreatmentSequence(Vec::new())
    }

    pub fn parse(s: &str) -> Result<Self> {
        s.parse()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn letters(&self) -> &[Treatment] {
        &self.0
    }

    /// Treatment at 1-based period `t`.
    pub fn at(&self, t: usize) -> Result<Treatment> {
        if t == 0 || t > self.len() {
            return Err(Error::Index {
                index: t,
                horizon: self.len(),
            });
        }
        Ok(self.0[t - 1])
    }

    /// Letters `t1..=t2`; empty when `t1 > t2`.
    pub fn subsequence(&self, t1: usize, t2: usize) -> Result<TreatmentSequence> {
        let horizon = self.len();
        for index in [t1, t2] {
            if index == 0 || index > horizon {
                return Err(Error::Index { index, horizon });
            }
        }
        if t1 > t2 {
            return Ok(TreatmentSequence::empty());
        }
        Ok(TreatmentSequence(self.0[t1 - 1..t2].to_vec()))
    }

    /// First `t` letters; `t = 0` gives the empty word.
    pub fn prefix(&self, t: usize) -> TreatmentSequence {
        TreatmentSequence(self.0[..t.min(self.len())].to_vec())
    }

    /// The trailing `k` letters ending at period `t` (periods `t-k+1..=t`),
    /// truncated at period 1.
    pub fn window(&self, t: usize, k: usize) -> TreatmentSequence {
        let end = t.min(self.len());
        let start = end.saturating_sub(k);
        TreatmentSequence(self.0[start..end].to_vec())
    }

    pub fn starts_with(&self, prefix: &TreatmentSequence) -> bool {
        self.0.starts_with(&prefix.0)
    }

    pub fn concat(&self, other: &TreatmentSequence) -> TreatmentSequence {
        let mut letters = self.0.clone();
        letters.extend_from_slice(&other.0);
        TreatmentSequence(letters)
    }

    pub fn pushed(&self, letter: Treatment) -> TreatmentSequence {
        let mut letters = self.0.clone();
        letters.push(letter);
        TreatmentSequence(letters)
    }
}

impl fmt::Display for TreatmentSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("∅");
        }
        for t in &self.0 {
            write!(f, "{}", t.symbol())?;
        }
        Ok(())
    }
}

impl FromStr for TreatmentSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "∅" || s == "-" {
            return Ok(TreatmentSequence::empty());
        }
        s.chars()
            .map(|c| {
                Treatment::from_symbol(c).ok_or_else(|| {
                    Error::Parse(format!("unknown treatment symbol '{c}' in sequence \"{s}\""))
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(TreatmentSequence)
    }
}

impl Serialize for TreatmentSequence {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TreatmentSequence {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// All `2^T` sequences of length `horizon`, lexicographic with `A < B`.
pub fn full_sequence_set(horizon: usize) -> Result<Vec<TreatmentSequence>> {
    if horizon == 0 || horizon > MAX_HORIZON {
        return Err(Error::BoundedHorizon(horizon));
    }
    Ok((0..1usize << horizon)
        .map(|code| {
            TreatmentSequence(
                (0..horizon)
                    .map(|t| {
                        if code >> (horizon - 1 - t) & 1 == 0 {
                            Treatment::A
                        } else {
                            Treatment::B
                        }
                    })
                    .collect(),
            )
        })
        .collect())
}

/// Free-standing form of [`TreatmentSequence::subsequence`].
pub fn subsequence(z: &TreatmentSequence, t1: usize, t2: usize) -> Result<TreatmentSequence> {
    z.subsequence(t1, t2)
}

/// The implemented sequences with their fixed unit counts, plus the scope
/// `S ⊇ S^obs` of sequences that estimands may reference.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossoverDesign {
    horizon: usize,
    counts: BTreeMap<TreatmentSequence, usize>,
    scope: Vec<TreatmentSequence>,
}

impl CrossoverDesign {
    /// Builds a design whose scope is the full sequence set (or just the
    /// observed sequences when the horizon exceeds [`MAX_HORIZON`]).
    pub fn new(
        horizon: usize,
        counts: impl IntoIterator<Item = (TreatmentSequence, usize)>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::BoundedHorizon(horizon));
        }
        let mut map = BTreeMap::new();
        for (z, n) in counts {
            if z.len() != horizon {
                return Err(Error::Design(format!(
                    "sequence {z} has length {}, horizon is {horizon}",
                    z.len()
                )));
            }
            if n == 0 {
                return Err(Error::Design(format!("sequence {z} has a zero unit count")));
            }
            if map.insert(z.clone(), n).is_some() {
                return Err(Error::Design(format!("sequence {z} listed twice")));
            }
        }
        if map.is_empty() {
            return Err(Error::Design("no observed sequences".into()));
        }
        let scope = if horizon <= MAX_HORIZON {
            full_sequence_set(horizon)?
        } else {
            map.keys().cloned().collect()
        };
        Ok(CrossoverDesign {
            horizon,
            counts: map,
            scope,
        })
    }

    /// Convenience constructor from `("AB", 10)` pairs.
    pub fn from_pairs(horizon: usize, pairs: &[(&str, usize)]) -> Result<Self> {
        let counts = pairs
            .iter()
            .map(|(s, n)| Ok((s.parse::<TreatmentSequence>()?, *n)))
            .collect::<Result<Vec<_>>>()?;
        CrossoverDesign::new(horizon, counts)
    }

    /// Replaces the scope. It must contain every observed sequence.
    pub fn with_scope(mut self, scope: impl IntoIterator<Item = TreatmentSequence>) -> Result<Self> {
        let mut scope: Vec<_> = scope.into_iter().collect();
        scope.sort();
        scope.dedup();
        for z in &scope {
            if z.len() != self.horizon {
                return Err(Error::Design(format!(
                    "scope sequence {z} has length {}, horizon is {}",
                    z.len(),
                    self.horizon
                )));
            }
        }
        for z in self.counts.keys() {
            if scope.binary_search(z).is_err() {
                return Err(Error::Design(format!("observed sequence {z} missing from scope")));
            }
        }
        self.scope = scope;
        Ok(self)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn scope(&self) -> &[TreatmentSequence] {
        &self.scope
    }

    pub fn scope_index(&self, z: &TreatmentSequence) -> Option<usize> {
        self.scope.binary_search(z).ok()
    }

    pub fn observed(&self) -> impl Iterator<Item = &TreatmentSequence> + '_ {
        self.counts.keys()
    }

    pub fn counts(&self) -> &BTreeMap<TreatmentSequence, usize> {
        &self.counts
    }

    pub fn count(&self, z: &TreatmentSequence) -> usize {
        self.counts.get(z).copied().unwrap_or(0)
    }

    pub fn is_observed(&self, z: &TreatmentSequence) -> bool {
        self.counts.contains_key(z)
    }

    pub fn total_units(&self) -> usize {
        self.counts.values().sum()
    }

    /// `N! / Π N_z!`, or `None` on overflow.
    pub fn assignment_count(&self) -> Option<u128> {
        // Product of binomials avoids the factorial blow-up.
        let mut total: u128 = 1;
        let mut placed: u128 = 0;
        for &n in self.counts.values() {
            for j in 1..=n as u128 {
                placed += 1;
                total = total.checked_mul(placed)? / j;
            }
        }
        Some(total)
    }

    /// Parses the plain-text design description:
    ///
    /// ```text
    /// # comment
    /// horizon 2
    /// scope AA AB BA BB     (optional)
    /// AB 10
    /// BA 10
    /// ```
    pub fn from_text(text: &str) -> Result<Self> {
        let mut horizon = None;
        let mut scope = None;
        let mut counts = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line
                .split(|c: char| c.is_whitespace() || c == '=' || c == ':' || c == ',')
                .filter(|f| !f.is_empty());
            let key = fields.next().unwrap_or_default();
            let rest: Vec<&str> = fields.collect();
            let err = |msg: &str| Error::Parse(format!("design line {}: {msg}", lineno + 1));
            match key {
                "horizon" | "T" => {
                    let value = rest.first().ok_or_else(|| err("missing horizon value"))?;
                    horizon = Some(value.parse::<usize>().map_err(|_| err("horizon is not an integer"))?);
                }
                "scope" => {
                    scope = Some(
                        rest.iter()
                            .map(|s| s.parse::<TreatmentSequence>())
                            .collect::<Result<Vec<_>>>()
                            .map_err(|e| err(&e.to_string()))?,
                    );
                }
                seq => {
                    let z: TreatmentSequence = seq.parse().map_err(|e: Error| err(&e.to_string()))?;
                    let n = rest
                        .first()
                        .ok_or_else(|| err("missing unit count"))?
                        .parse::<usize>()
                        .map_err(|_| err("unit count is not a non-negative integer"))?;
                    counts.push((z, n));
                }
            }
        }
        let horizon = horizon
            .or_else(|| counts.first().map(|(z, _)| z.len()))
            .ok_or_else(|| Error::Parse("design has no horizon and no sequences".into()))?;
        let design = CrossoverDesign::new(horizon, counts)?;
        match scope {
            Some(s) => design.with_scope(s),
            None => Ok(design),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("horizon {}\n", self.horizon);
        let full = self.horizon <= MAX_HORIZON
            && full_sequence_set(self.horizon).map(|f| f == self.scope).unwrap_or(false);
        if !full {
            let names: Vec<String> = self.scope.iter().map(|z| z.to_string()).collect();
            out.push_str(&format!("scope {}\n", names.join(" ")));
        }
        for (z, n) in &self.counts {
            out.push_str(&format!("{z} {n}\n"));
        }
        out
    }

    fn observed_list(&self) -> Arc<[TreatmentSequence]> {
        self.counts.keys().cloned().collect::<Vec<_>>().into()
    }

    fn label_multiset(&self) -> Vec<usize> {
        self.counts
            .values()
            .enumerate()
            .flat_map(|(g, &n)| std::iter::repeat_n(g, n))
            .collect()
    }
}

/// A realized complete randomization: unit `i` receives sequence
/// `groups()[labels()[i]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    groups: Arc<[TreatmentSequence]>,
    labels: Vec<usize>,
}

impl Assignment {
    /// Observed sequences in design order; labels index into this slice.
    pub fn groups(&self) -> &[TreatmentSequence] {
        &self.groups
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sequence_of(&self, unit: usize) -> &TreatmentSequence {
        &self.groups[self.labels[unit]]
    }

    /// Number of units assigned to each group, in group order.
    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.groups.len()];
        for &g in &self.labels {
            counts[g] += 1;
        }
        counts
    }
}

/// Uniformly random permutation of the design's label multiset.
/// Deterministic in `seed`.
pub fn sample_assignment(design: &CrossoverDesign, seed: u64) -> Assignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_assignment_with(design, &mut rng)
}

pub fn sample_assignment_with<R: Rng + ?Sized>(design: &CrossoverDesign, rng: &mut R) -> Assignment {
    let mut labels = design.label_multiset();
    labels.shuffle(rng);
    Assignment {
        groups: design.observed_list(),
        labels,
    }
}

/// Every distinct assignment exactly once, in lexicographic order of the
/// label vector.
pub fn enumerate_assignments(design: &CrossoverDesign) -> Result<AssignmentIter> {
    let count = design.assignment_count().unwrap_or(u128::MAX);
    if count > ENUMERATION_LIMIT {
        return Err(Error::EnumerationTooLarge {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(AssignmentIter {
        groups: design.observed_list(),
        next: Some(design.label_multiset()),
    })
}

pub struct AssignmentIter {
    groups: Arc<[TreatmentSequence]>,
    next: Option<Vec<usize>>,
}

impl Iterator for AssignmentIter {
    type Item = Assignment;

    fn next(&mut self) -> Option<Assignment> {
        let current = self.next.take()?;
        let mut successor = current.clone();
        if next_permutation(&mut successor) {
            self.next = Some(successor);
        }
        Some(Assignment {
            groups: Arc::clone(&self.groups),
            labels: current,
        })
    }
}

fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}
