//! Identifiability: the global rank condition on `XᵀX + CᵀC` and the
//! per-mean sufficient conditions for single period means `Ȳ_t(z)`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::constraints::{column, column_label, RestrictionMatrix, Scenario};
use crate::error::{Error, Result};
use crate::linalg;
use crate::sequences::{CrossoverDesign, TreatmentSequence};

/// Per-sequence regressor blocks `X_z = e_zᵀ ⊗ I_T`.
#[derive(Clone, Debug)]
pub struct RegressorStructure {
    horizon: usize,
    scope: Vec<TreatmentSequence>,
}

impl RegressorStructure {
    pub fn new(design: &CrossoverDesign) -> Self {
        RegressorStructure {
            horizon: design.horizon(),
            scope: design.scope().to_vec(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.horizon * self.scope.len()
    }

    /// `T × T|S|` block for sequence `z`.
    pub fn block(&self, z: &TreatmentSequence) -> Result<DMatrix<f64>> {
        let s = self
            .scope
            .binary_search(z)
            .map_err(|_| Error::MissingSequence(z.to_string()))?;
        let mut x = DMatrix::zeros(self.horizon, self.dimension());
        for t in 1..=self.horizon {
            x[(t - 1, column(self.horizon, s, t))] = 1.0;
        }
        Ok(x)
    }
}

fn check_restriction(design: &CrossoverDesign, restriction: &RestrictionMatrix) -> Result<()> {
    if restriction.horizon() != design.horizon() || restriction.scope() != design.scope() {
        return Err(Error::Shape(
            "restriction matrix was assembled for a different horizon or scope".into(),
        ));
    }
    Ok(())
}

/// `M = Σ_z N_z X_zᵀX_z + CᵀC`.
pub fn gram_plus_restriction(
    design: &CrossoverDesign,
    restriction: &RestrictionMatrix,
) -> Result<DMatrix<f64>> {
    check_restriction(design, restriction)?;
    let c = restriction.matrix();
    let mut m = c.transpose() * c;
    let t = design.horizon();
    for (z, &n) in design.counts() {
        let s = design.scope_index(z).expect("observed sequences are in scope");
        for p in 1..=t {
            let j = column(t, s, p);
            m[(j, j)] += n as f64;
        }
    }
    Ok(m)
}

/// Outcome of the global rank check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Identifiability {
    pub rank: usize,
    pub dimension: usize,
    pub restriction_rows: usize,
    /// Coefficients that neither data nor restrictions touch.
    pub zero_columns: Vec<String>,
}

impl Identifiability {
    pub fn is_identified(&self) -> bool {
        self.rank == self.dimension
    }

    pub fn into_result(self) -> Result<Self> {
        if self.is_identified() {
            Ok(self)
        } else {
            Err(Error::NotIdentifiable {
                rank: self.rank,
                dim: self.dimension,
            })
        }
    }
}

/// Numerical rank of `XᵀX + CᵀC`; every linear estimand is unbiasedly
/// estimable when it is full.
pub fn is_identifiable(
    design: &CrossoverDesign,
    restriction: &RestrictionMatrix,
) -> Result<Identifiability> {
    let m = gram_plus_restriction(design, restriction)?;
    let t = design.horizon();
    let zero_columns = (0..m.ncols())
        .filter(|&j| m.column(j).iter().all(|&v| v == 0.0))
        .map(|j| column_label(j % t + 1, &design.scope()[j / t]))
        .collect();
    Ok(Identifiability {
        rank: linalg::numerical_rank(&m),
        dimension: m.ncols(),
        restriction_rows: restriction.rows(),
        zero_columns,
    })
}

fn first_match(
    observed: &[TreatmentSequence],
    target: &TreatmentSequence,
    same: impl Fn(&TreatmentSequence) -> bool,
) -> Option<TreatmentSequence> {
    if observed.contains(target) {
        return Some(target.clone());
    }
    observed.iter().find(|z| same(z)).cloned()
}

/// An observed sequence sharing the first `t` letters with `target`.
pub fn mean_identifiable_s1(
    target: &TreatmentSequence,
    t: usize,
    observed: &[TreatmentSequence],
) -> Option<TreatmentSequence> {
    let key = target.prefix(t);
    first_match(observed, target, |z| z.prefix(t) == key)
}

/// As [`mean_identifiable_s1`] for `t ≤ k`; for `t > k` matching the window
/// of letters `t−k+1..=t` suffices.
pub fn mean_identifiable_s2(
    target: &TreatmentSequence,
    t: usize,
    k: usize,
    observed: &[TreatmentSequence],
) -> Option<TreatmentSequence> {
    if t <= k {
        return mean_identifiable_s1(target, t, observed);
    }
    let key = target.window(t, k);
    first_match(observed, target, |z| z.window(t, k) == key)
}

/// How a period mean is obtained from observed sequence means.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Derivation {
    /// `Ȳ_t` of the target equals `Ȳ_t(witness)`, estimated by its sample mean.
    Observed {
        period: usize,
        key: TreatmentSequence,
        witness: TreatmentSequence,
    },
    /// `Ȳ_t(w) = Ȳ_{t'}(w) + Ȳ_t(w₂) − Ȳ_{t'}(w₂)` by time invariance.
    DifferenceInDifferences {
        period: usize,
        key: TreatmentSequence,
        other_period: usize,
        reference: TreatmentSequence,
        same_key_other_period: Box<Derivation>,
        reference_same_period: Box<Derivation>,
        reference_other_period: Box<Derivation>,
    },
}

impl Derivation {
    pub fn period(&self) -> usize {
        match self {
            Derivation::Observed { period, .. } | Derivation::DifferenceInDifferences { period, .. } => {
                *period
            }
        }
    }

    pub fn is_observed(&self) -> bool {
        matches!(self, Derivation::Observed { .. })
    }

    /// The estimator as a signed sum of observed period means:
    /// `(coefficient, period, witness sequence)`, merged and sorted.
    pub fn terms(&self) -> Vec<(f64, usize, TreatmentSequence)> {
        let mut acc: BTreeMap<(usize, TreatmentSequence), f64> = BTreeMap::new();
        self.accumulate(1.0, &mut acc);
        acc.into_iter()
            .filter(|(_, c)| *c != 0.0)
            .map(|((t, z), c)| (c, t, z))
            .collect()
    }

    fn accumulate(&self, sign: f64, acc: &mut BTreeMap<(usize, TreatmentSequence), f64>) {
        match self {
            Derivation::Observed { period, witness, .. } => {
                *acc.entry((*period, witness.clone())).or_insert(0.0) += sign;
            }
            Derivation::DifferenceInDifferences {
                same_key_other_period,
                reference_same_period,
                reference_other_period,
                ..
            } => {
                same_key_other_period.accumulate(sign, acc);
                reference_same_period.accumulate(sign, acc);
                reference_other_period.accumulate(-sign, acc);
            }
        }
    }

    /// One-line description such as `Y2(AAB) + Y3(AAB) - Y3(BAA)`.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (i, (c, t, z)) in self.terms().iter().enumerate() {
            let mag = c.abs();
            let term = if mag == 1.0 {
                format!("Y{t}({z})")
            } else {
                format!("{mag}*Y{t}({z})")
            };
            match (i, *c < 0.0) {
                (0, false) => out.push_str(&term),
                (0, true) => out.push_str(&format!("-{term}")),
                (_, false) => out.push_str(&format!(" + {term}")),
                (_, true) => out.push_str(&format!(" - {term}")),
            }
        }
        out
    }
}

type State = (usize, TreatmentSequence);

fn key_c(t: usize, k: usize, z: &TreatmentSequence) -> TreatmentSequence {
    Scenario::C.outcome_key(t, Some(k), z)
}

/// Least fixed point of the difference-in-differences closure over
/// `(period, key)` states, where the key is the window for `t ≥ k` and the
/// prefix otherwise. Seeded with every state identified directly.
pub fn s3_closure(
    scope: &[TreatmentSequence],
    k: usize,
    observed: &[TreatmentSequence],
) -> BTreeMap<State, Derivation> {
    let horizon = scope.first().map(|z| z.len()).unwrap_or(0);
    let mut states: BTreeSet<State> = BTreeSet::new();
    for z in scope {
        for t in 1..=horizon {
            states.insert((t, key_c(t, k, z)));
        }
    }
    let mut known: BTreeMap<State, Derivation> = BTreeMap::new();
    for (t, key) in &states {
        let witness = observed.iter().find(|z| &key_c(*t, k, z) == key);
        if let Some(w) = witness {
            known.insert(
                (*t, key.clone()),
                Derivation::Observed {
                    period: *t,
                    key: key.clone(),
                    witness: w.clone(),
                },
            );
        }
    }
    loop {
        let mut added = None;
        'search: for (t, key) in &states {
            if *t < k || known.contains_key(&(*t, key.clone())) {
                continue;
            }
            for u in k..=horizon {
                if u == *t {
                    continue;
                }
                let Some(d1) = known.get(&(u, key.clone())) else {
                    continue;
                };
                for ((t2, w2), d2) in known.range((*t, TreatmentSequence::empty())..) {
                    if t2 != t {
                        break;
                    }
                    if let Some(d3) = known.get(&(u, w2.clone())) {
                        added = Some((
                            (*t, key.clone()),
                            Derivation::DifferenceInDifferences {
                                period: *t,
                                key: key.clone(),
                                other_period: u,
                                reference: w2.clone(),
                                same_key_other_period: Box::new(d1.clone()),
                                reference_same_period: Box::new(d2.clone()),
                                reference_other_period: Box::new(d3.clone()),
                            },
                        ));
                        break 'search;
                    }
                }
            }
        }
        match added {
            Some((state, derivation)) => {
                known.insert(state, derivation);
            }
            None => return known,
        }
    }
}

/// Derivation of `Ȳ_t(target)` under time-invariant effects of order `k`,
/// or `None` if these conditions do not identify it.
pub fn mean_identifiable_s3(
    target: &TreatmentSequence,
    t: usize,
    k: usize,
    observed: &[TreatmentSequence],
    scope: &[TreatmentSequence],
) -> Option<Derivation> {
    if let Some(witness) = mean_identifiable_s2(target, t, k, observed) {
        return Some(Derivation::Observed {
            period: t,
            key: key_c(t, k, target),
            witness,
        });
    }
    s3_closure(scope, k, observed).remove(&(t, key_c(t, k, target)))
}

/// One row of the per-mean identification table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanVerdict {
    pub sequence: TreatmentSequence,
    pub period: usize,
    pub derivation: Option<Derivation>,
}

impl MeanVerdict {
    pub fn is_identified(&self) -> bool {
        self.derivation.is_some()
    }
}

/// Per-mean verdicts for every `(z, t)` in the scope using the checker that
/// matches the scenario.
pub fn mean_table(
    design: &CrossoverDesign,
    scenario: Scenario,
    k: Option<usize>,
) -> Result<Vec<MeanVerdict>> {
    let observed: Vec<TreatmentSequence> = design.observed().cloned().collect();
    let scope = design.scope();
    let horizon = design.horizon();
    let k = match (scenario, k) {
        (Scenario::A, _) => None,
        (_, Some(k)) if (1..=horizon).contains(&k) => Some(k),
        (_, other) => {
            return Err(Error::Parameter(format!(
                "scenario {scenario} needs a carryover order in 1..={horizon}, got {other:?}"
            )))
        }
    };
    let closure = match (scenario, k) {
        (Scenario::C, Some(k)) => Some(s3_closure(scope, k, &observed)),
        _ => None,
    };
    let mut rows = Vec::new();
    for z in scope {
        for t in 1..=horizon {
            let observed_as = |w: TreatmentSequence| Derivation::Observed {
                period: t,
                key: scenario.outcome_key(t, k, z),
                witness: w,
            };
            let derivation = match (scenario, k) {
                (Scenario::A, _) => mean_identifiable_s1(z, t, &observed).map(observed_as),
                (Scenario::B, Some(k)) => mean_identifiable_s2(z, t, k, &observed).map(observed_as),
                (_, Some(k)) => match mean_identifiable_s2(z, t, k, &observed) {
                    Some(w) => Some(observed_as(w)),
                    None => closure
                        .as_ref()
                        .and_then(|c| c.get(&(t, key_c(t, k, z))).cloned()),
                },
                _ => unreachable!("order validated above"),
            };
            rows.push(MeanVerdict {
                sequence: z.clone(),
                period: t,
                derivation,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::assemble;
    use crate::sequences::full_sequence_set;

    fn seq(s: &str) -> TreatmentSequence {
        s.parse().unwrap()
    }

    fn seqs(names: &[&str]) -> Vec<TreatmentSequence> {
        names.iter().map(|s| seq(s)).collect()
    }

    #[test]
    fn regressor_block_has_unit_entries() {
        let design = CrossoverDesign::from_pairs(2, &[("AB", 2), ("BA", 2)]).unwrap();
        let x = RegressorStructure::new(&design).block(&seq("BA")).unwrap();
        assert_eq!(x.iter().filter(|&&v| v == 1.0).count(), 2);
        assert_eq!(x[(0, 4)], 1.0);
        assert_eq!(x[(1, 5)], 1.0);
    }

    #[test]
    fn four_sequence_gram() {
        let design =
            CrossoverDesign::from_pairs(2, &[("AA", 3), ("AB", 4), ("BA", 5), ("BB", 6)]).unwrap();
        let empty = assemble(Scenario::A, 2, design.scope(), None)
            .unwrap()
            .with_extra_rows(&DMatrix::zeros(0, 8))
            .unwrap();
        let m = gram_plus_restriction(&design, &empty).unwrap();
        let c = empty.matrix();
        let xtx = m - c.transpose() * c;
        let expected = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            3., 3., 4., 4., 5., 5., 6., 6.,
        ]));
        assert_eq!(xtx, expected);
    }

    #[test]
    fn two_sequence_scenario_a_has_zero_columns() {
        let design = CrossoverDesign::from_pairs(2, &[("AB", 3), ("BA", 4)]).unwrap();
        let c1 = assemble(Scenario::A, 2, design.scope(), None).unwrap();
        let id = is_identifiable(&design, &c1).unwrap();
        assert!(!id.is_identified());
        assert_eq!(id.zero_columns, ["gamma2(AA)", "gamma2(BB)"]);
        assert!(matches!(id.into_result(), Err(Error::NotIdentifiable { rank: 6, dim: 8 })));
    }

    #[test]
    fn single_sequence_unrestricted_gram() {
        let design = CrossoverDesign::from_pairs(2, &[("AB", 5)])
            .unwrap()
            .with_scope(seqs(&["AB"]))
            .unwrap();
        let c = assemble(Scenario::B, 2, design.scope(), Some(1)).unwrap();
        assert_eq!(c.rows(), 0);
        let m = gram_plus_restriction(&design, &c).unwrap();
        assert_eq!(m, DMatrix::identity(2, 2) * 5.0);
    }

    #[test]
    fn s1_examples() {
        let obs = seqs(&["AB", "BA"]);
        assert_eq!(mean_identifiable_s1(&seq("AA"), 1, &obs), Some(seq("AB")));
        assert_eq!(mean_identifiable_s1(&seq("AA"), 2, &obs), None);
        assert_eq!(mean_identifiable_s1(&seq("BA"), 2, &obs), Some(seq("BA")));
    }

    #[test]
    fn s2_examples() {
        let obs = seqs(&["ABA", "BAA"]);
        assert_eq!(mean_identifiable_s2(&seq("AAA"), 3, 2, &obs), Some(seq("BAA")));
        let two = seqs(&["AB", "BA"]);
        assert_eq!(mean_identifiable_s2(&seq("AA"), 2, 1, &two), Some(seq("BA")));
        assert_eq!(mean_identifiable_s2(&seq("AA"), 1, 1, &two), Some(seq("AB")));
        assert_eq!(
            mean_identifiable_s2(&seq("BB"), 2, 2, &two),
            mean_identifiable_s1(&seq("BB"), 2, &two)
        );
    }

    #[test]
    fn s3_difference_in_differences() {
        let scope = full_sequence_set(3).unwrap();
        let obs = seqs(&["AAB", "BAA"]);
        assert_eq!(mean_identifiable_s2(&seq("ABA"), 2, 2, &obs), None);
        let d = mean_identifiable_s3(&seq("ABA"), 2, 2, &obs, &scope).unwrap();
        match &d {
            Derivation::DifferenceInDifferences {
                period,
                key,
                other_period,
                reference,
                ..
            } => {
                assert_eq!((*period, *other_period), (2, 3));
                assert_eq!(key, &seq("AB"));
                assert_eq!(reference, &seq("AA"));
            }
            other => panic!("expected a difference-in-differences step, got {other:?}"),
        }
        assert_eq!(
            d.terms(),
            vec![
                (1.0, 2, seq("AAB")),
                (1.0, 3, seq("AAB")),
                (-1.0, 3, seq("BAA")),
            ]
        );
        assert_eq!(d.summary(), "Y2(AAB) + Y3(AAB) - Y3(BAA)");
        let trivial = mean_identifiable_s3(&seq("AAB"), 2, 2, &obs, &scope).unwrap();
        assert!(trivial.is_observed());
        assert_eq!(mean_identifiable_s3(&seq("ABA"), 2, 2, &[], &scope), None);
    }

    #[test]
    fn mean_table_covers_scope() {
        let design = CrossoverDesign::from_pairs(2, &[("AB", 2), ("BA", 2)]).unwrap();
        let a = mean_table(&design, Scenario::A, None).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a.iter().filter(|r| !r.is_identified()).count(), 2);
        let b = mean_table(&design, Scenario::B, Some(1)).unwrap();
        assert!(b.iter().all(|r| r.is_identified()));
        assert!(mean_table(&design, Scenario::C, None).is_err());
    }
}
