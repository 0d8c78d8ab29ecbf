//! Compiles the causal assumptions into homogeneous linear restrictions
//! `Cγ = 0` on the stacked coefficient vector.
//!
//! * no anticipation: `γ_{t,z} = γ_{t,z'}` when `z` and `z'` share their
//!   first `t` letters;
//! * carryover of order `k`: `γ_{t,z} = γ_{t,z'}` for `t ≥ k` when they share
//!   the window of letters `t−k+1..=t`;
//! * time invariance: differences between windows are the same at every
//!   period `t ≥ k`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::sequences::TreatmentSequence;

/// Which assumptions are imposed: (a) no anticipation, (b) plus limited
/// carryover, (c) plus time-invariant effects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    A,
    B,
    C,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::A, Scenario::B, Scenario::C];

    pub fn needs_order(self) -> bool {
        self != Scenario::A
    }

    /// The part of `z` that determines `Ȳ_t(z)` under this scenario's
    /// assumptions: the trailing window for `t ≥ k` once carryover is
    /// limited, the prefix otherwise.
    pub fn outcome_key(self, t: usize, k: Option<usize>, z: &TreatmentSequence) -> TreatmentSequence {
        match (self, k) {
            (Scenario::B | Scenario::C, Some(k)) if t >= k => z.window(t, k),
            _ => z.prefix(t),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::A => "a",
            Scenario::B => "b",
            Scenario::C => "c",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Scenario::A),
            "b" => Ok(Scenario::B),
            "c" => Ok(Scenario::C),
            other => Err(Error::Parse(format!("unknown scenario \"{other}\", expected a, b or c"))),
        }
    }
}

/// Position of `γ_{t,z}` in the stacked vector: sequence-major, period-minor.
pub fn column(horizon: usize, scope_index: usize, t: usize) -> usize {
    scope_index * horizon + (t - 1)
}

pub fn column_label(t: usize, z: &TreatmentSequence) -> String {
    format!("gamma{t}({z})")
}

/// Labels for every entry of `γ` in column order.
pub fn column_labels(horizon: usize, scope: &[TreatmentSequence]) -> Vec<String> {
    scope
        .iter()
        .flat_map(|z| (1..=horizon).map(move |t| column_label(t, z)))
        .collect()
}

fn check_inputs(horizon: usize, scope: &[TreatmentSequence]) -> Result<()> {
    if horizon == 0 {
        return Err(Error::BoundedHorizon(0));
    }
    if let Some(z) = scope.iter().find(|z| z.len() != horizon) {
        return Err(Error::Shape(format!("sequence {z} does not have length {horizon}")));
    }
    if !scope.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Shape("scope must be sorted and free of duplicates".into()));
    }
    Ok(())
}

fn check_order(horizon: usize, k: usize) -> Result<()> {
    if k == 0 || k > horizon {
        return Err(Error::Parameter(format!(
            "carryover order {k} must lie in 1..={horizon}"
        )));
    }
    Ok(())
}

/// Builds chain rows `γ_{t,first} − γ_{t,next} = 0` within each class of
/// scope sequences sharing `key(z)` at period `t`.
fn chain_rows(
    horizon: usize,
    scope: &[TreatmentSequence],
    periods: impl Iterator<Item = usize>,
    key: impl Fn(usize, &TreatmentSequence) -> TreatmentSequence,
) -> DMatrix<f64> {
    let ncols = horizon * scope.len();
    let mut rows: Vec<(usize, usize)> = Vec::new();
    for t in periods {
        let mut classes: BTreeMap<TreatmentSequence, Vec<usize>> = BTreeMap::new();
        for (s, z) in scope.iter().enumerate() {
            classes.entry(key(t, z)).or_default().push(s);
        }
        for members in classes.values() {
            for pair in members.windows(2) {
                rows.push((column(horizon, pair[0], t), column(horizon, pair[1], t)));
            }
        }
    }
    let mut m = DMatrix::zeros(rows.len(), ncols);
    for (r, (plus, minus)) in rows.into_iter().enumerate() {
        m[(r, plus)] = 1.0;
        m[(r, minus)] = -1.0;
    }
    m
}

/// No-anticipation rows.
pub fn rows_no_anticipation(horizon: usize, scope: &[TreatmentSequence]) -> Result<DMatrix<f64>> {
    check_inputs(horizon, scope)?;
    Ok(chain_rows(horizon, scope, 1..=horizon, |t, z| z.prefix(t)))
}

/// Limited-carryover rows for periods `t > k` (earlier windows are whole
/// prefixes, already covered by no anticipation).
pub fn rows_no_carryover(
    horizon: usize,
    scope: &[TreatmentSequence],
    k: usize,
) -> Result<DMatrix<f64>> {
    check_inputs(horizon, scope)?;
    check_order(horizon, k)?;
    Ok(chain_rows(horizon, scope, k + 1..=horizon, |t, z| z.window(t, k)))
}

/// Time-invariance rows. Each window value `w` seen at period `t` is
/// represented by the first scope sequence carrying it there; for every pair
/// of periods `k ≤ t < t'` and every window `w` present at both, one row
/// `γ_{t,w₀} − γ_{t,w} − γ_{t',w₀} + γ_{t',w} = 0` ties it to the first
/// common window `w₀`. Rows implied by the other constraints are pruned by
/// [`row_reduce`] during assembly.
pub fn rows_time_invariant(
    horizon: usize,
    scope: &[TreatmentSequence],
    k: usize,
) -> Result<DMatrix<f64>> {
    check_inputs(horizon, scope)?;
    check_order(horizon, k)?;
    let representatives: Vec<BTreeMap<TreatmentSequence, usize>> = (k..=horizon)
        .map(|t| {
            let mut reps = BTreeMap::new();
            for (s, z) in scope.iter().enumerate() {
                reps.entry(z.window(t, k)).or_insert(s);
            }
            reps
        })
        .collect();
    let ncols = horizon * scope.len();
    let mut rows: Vec<[(usize, f64); 4]> = Vec::new();
    for (i, reps_t) in representatives.iter().enumerate() {
        let t = k + i;
        for (j, reps_u) in representatives.iter().enumerate().skip(i + 1) {
            let u = k + j;
            let common: Vec<&TreatmentSequence> =
                reps_t.keys().filter(|w| reps_u.contains_key(*w)).collect();
            let Some((base, rest)) = common.split_first() else {
                continue;
            };
            for w in rest {
                rows.push([
                    (column(horizon, reps_t[*base], t), 1.0),
                    (column(horizon, reps_t[*w], t), -1.0),
                    (column(horizon, reps_u[*base], u), -1.0),
                    (column(horizon, reps_u[*w], u), 1.0),
                ]);
            }
        }
    }
    let mut m = DMatrix::zeros(rows.len(), ncols);
    for (r, entries) in rows.into_iter().enumerate() {
        for (c, v) in entries {
            m[(r, c)] += v;
        }
    }
    Ok(m)
}

/// Maximal independent subset of rows with the same row space.
pub fn row_reduce(c: &DMatrix<f64>) -> DMatrix<f64> {
    linalg::row_reduce(c)
}

/// Assembled, full-row-rank restriction matrix for one scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct RestrictionMatrix {
    matrix: DMatrix<f64>,
    scenario: Scenario,
    order: Option<usize>,
    horizon: usize,
    scope: Vec<TreatmentSequence>,
}

impl RestrictionMatrix {
    /// A matrix with no rows: the unrestricted regression.
    pub fn unrestricted(horizon: usize, scope: &[TreatmentSequence]) -> Self {
        RestrictionMatrix {
            matrix: DMatrix::zeros(0, horizon * scope.len()),
            scenario: Scenario::A,
            order: None,
            horizon,
            scope: scope.to_vec(),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    /// Carryover order `k`, present for scenarios b and c.
    pub fn order(&self) -> Option<usize> {
        self.order
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn scope(&self) -> &[TreatmentSequence] {
        &self.scope
    }

    pub fn column_labels(&self) -> Vec<String> {
        column_labels(self.horizon, &self.scope)
    }

    /// Appends user-supplied rows and re-reduces.
    pub fn with_extra_rows(mut self, extra: &DMatrix<f64>) -> Result<Self> {
        if extra.ncols() != self.matrix.ncols() {
            return Err(Error::Shape(format!(
                "extra restriction rows have {} columns, expected {}",
                extra.ncols(),
                self.matrix.ncols()
            )));
        }
        let mut stacked = DMatrix::zeros(self.matrix.nrows() + extra.nrows(), extra.ncols());
        stacked.rows_mut(0, self.matrix.nrows()).copy_from(&self.matrix);
        stacked.rows_mut(self.matrix.nrows(), extra.nrows()).copy_from(extra);
        self.matrix = row_reduce(&stacked);
        Ok(self)
    }

    /// Whether row `b` (length `T|S|`) lies in the row space of `C`, i.e.
    /// whether `bᵀγ` is forced to zero by the restrictions.
    pub fn forces_zero(&self, b: &[f64]) -> bool {
        let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return true;
        }
        if self.matrix.nrows() == 0 {
            return false;
        }
        let mut stacked = DMatrix::zeros(self.matrix.nrows() + 1, self.matrix.ncols());
        stacked.rows_mut(0, self.matrix.nrows()).copy_from(&self.matrix);
        for (j, v) in b.iter().enumerate() {
            stacked[(self.matrix.nrows(), j)] = *v;
        }
        linalg::numerical_rank(&stacked) == self.matrix.nrows()
    }

    /// CSV dump with a header of `γ` column labels.
    pub fn to_csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Shape(e.to_string());
        writer.write_record(self.column_labels()).map_err(io)?;
        for row in self.matrix.row_iter() {
            writer
                .write_record(row.iter().map(|v| format!("{v}")))
                .map_err(io)?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::Shape(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Shape(e.to_string()))
    }
}

/// Stacks the rows for `scenario` and reduces them to full row rank.
/// `k` is required for scenarios b and c and ignored for a.
pub fn assemble(
    scenario: Scenario,
    horizon: usize,
    scope: &[TreatmentSequence],
    k: Option<usize>,
) -> Result<RestrictionMatrix> {
    check_inputs(horizon, scope)?;
    let mut parts = vec![rows_no_anticipation(horizon, scope)?];
    let order = if scenario.needs_order() {
        let k = k.ok_or_else(|| {
            Error::Parameter(format!("scenario {scenario} needs a carryover order k"))
        })?;
        parts.push(rows_no_carryover(horizon, scope, k)?);
        if scenario == Scenario::C {
            parts.push(rows_time_invariant(horizon, scope, k)?);
        }
        Some(k)
    } else {
        None
    };
    let total: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut stacked = DMatrix::zeros(total, horizon * scope.len());
    let mut r = 0;
    for p in &parts {
        stacked.rows_mut(r, p.nrows()).copy_from(p);
        r += p.nrows();
    }
    Ok(RestrictionMatrix {
        matrix: row_reduce(&stacked),
        scenario,
        order,
        horizon,
        scope: scope.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequences::full_sequence_set;
    use crate::simulator::consistent_table;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn full(t: usize) -> Vec<TreatmentSequence> {
        full_sequence_set(t).unwrap()
    }

    fn seqs(names: &[&str]) -> Vec<TreatmentSequence> {
        names.iter().map(|s| s.parse().unwrap()).collect()
    }

    fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    fn same_row_space(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
        let ra = linalg::numerical_rank(a);
        let rb = linalg::numerical_rank(b);
        let mut s = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
        s.rows_mut(0, a.nrows()).copy_from(a);
        s.rows_mut(a.nrows(), b.nrows()).copy_from(b);
        ra == rb && linalg::numerical_rank(&s) == ra
    }

    // Columns: γ1AA γ2AA γ1AB γ2AB γ1BA γ2BA γ1BB γ2BB
    fn printed_a1() -> DMatrix<f64> {
        m(2, 8, &[
            1., 0., -1., 0., 0., 0., 0., 0., //
            0., 0., 0., 0., 1., 0., -1., 0.,
        ])
    }

    fn printed_a2() -> DMatrix<f64> {
        m(2, 8, &[
            0., 1., 0., 0., 0., -1., 0., 0., //
            0., 0., 0., 1., 0., 0., 0., -1.,
        ])
    }

    fn printed_a3() -> DMatrix<f64> {
        m(1, 8, &[1., -1., 0., 1., -1., 0., 0., 0.])
    }

    #[test]
    fn no_anticipation_two_periods() {
        assert_eq!(rows_no_anticipation(2, &full(2)).unwrap(), printed_a1());
        assert_eq!(rows_no_anticipation(1, &full(1)).unwrap().nrows(), 0);
        assert_eq!(rows_no_anticipation(3, &full(3)).unwrap().nrows(), 10);
    }

    #[test]
    fn no_carryover_two_periods() {
        assert_eq!(rows_no_carryover(2, &full(2), 1).unwrap(), printed_a2());
    }

    #[test]
    fn no_carryover_full_order_adds_nothing() {
        let c1 = rows_no_anticipation(3, &full(3)).unwrap();
        let c2 = rows_no_carryover(3, &full(3), 3).unwrap();
        assert_eq!(c2.nrows(), 0);
        let both = assemble(Scenario::B, 3, &full(3), Some(3)).unwrap();
        assert!(same_row_space(both.matrix(), &c1));
    }

    #[test]
    fn no_carryover_sparse_scope() {
        let scope = seqs(&["AAB", "ABA", "BAA", "BBA"]);
        let rows = rows_no_carryover(3, &scope, 2).unwrap();
        // Only the period-3 window BA is shared (ABA, BBA).
        assert_eq!(rows.nrows(), 1);
        assert_eq!(rows[(0, column(3, 1, 3))], 1.0);
        assert_eq!(rows[(0, column(3, 3, 3))], -1.0);
        assert_eq!(rows.row(0).iter().filter(|v| **v != 0.0).count(), 2);
    }

    #[test]
    fn time_invariance_two_periods() {
        let c = assemble(Scenario::C, 2, &full(2), Some(1)).unwrap();
        assert_eq!(c.rows(), 5);
        let mut printed = DMatrix::zeros(5, 8);
        printed.rows_mut(0, 2).copy_from(&printed_a1());
        printed.rows_mut(2, 2).copy_from(&printed_a2());
        printed.rows_mut(4, 1).copy_from(&printed_a3());
        assert_eq!(c.matrix(), &printed);
        assert_eq!(rows_time_invariant(1, &full(1), 1).unwrap().nrows(), 0);
        let single = seqs(&["AA", "BA"]);
        assert_eq!(rows_time_invariant(2, &single, 2).unwrap().nrows(), 0);
    }

    #[test]
    fn assembled_scenarios_are_nested() {
        for (t, k) in [(2, 1), (3, 1), (3, 2), (4, 2)] {
            let s = full(t);
            let a = assemble(Scenario::A, t, &s, None).unwrap();
            let b = assemble(Scenario::B, t, &s, Some(k)).unwrap();
            let c = assemble(Scenario::C, t, &s, Some(k)).unwrap();
            for (small, big) in [(&a, &b), (&b, &c)] {
                let mut stacked = DMatrix::zeros(small.rows() + big.rows(), small.matrix().ncols());
                stacked.rows_mut(0, small.rows()).copy_from(small.matrix());
                stacked.rows_mut(small.rows(), big.rows()).copy_from(big.matrix());
                assert_eq!(linalg::numerical_rank(&stacked), big.rows());
            }
            for r in [&a, &b, &c] {
                assert_eq!(linalg::numerical_rank(r.matrix()), r.rows());
            }
        }
        assert_eq!(assemble(Scenario::A, 1, &full(1), None).unwrap().rows(), 0);
        assert!(assemble(Scenario::B, 2, &full(2), None).is_err());
    }

    #[test]
    fn forces_zero_detects_row_space() {
        let c = assemble(Scenario::B, 2, &full(2), Some(1)).unwrap();
        let carry: Vec<f64> = vec![0., 1., 0., 0., 0., -1., 0., 0.];
        assert!(c.forces_zero(&carry));
        let tau1: Vec<f64> = vec![0.5, 0., 0.5, 0., -0.5, 0., -0.5, 0.];
        assert!(!c.forces_zero(&tau1));
    }

    #[test]
    fn csv_dump_has_header() {
        let c = assemble(Scenario::A, 2, &full(2), None).unwrap();
        let text = c.to_csv().unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "gamma1(AA),gamma2(AA),gamma1(AB),gamma2(AB),gamma1(BA),gamma2(BA),gamma1(BB),gamma2(BB)"
        );
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn raw_stack_rank_two_period_c() {
        let s = full(2);
        let raw = [
            rows_no_anticipation(2, &s).unwrap(),
            rows_no_carryover(2, &s, 1).unwrap(),
            rows_time_invariant(2, &s, 1).unwrap(),
        ];
        let total: usize = raw.iter().map(|r| r.nrows()).sum();
        let mut stacked = DMatrix::zeros(total, 8);
        let mut r = 0;
        for p in &raw {
            stacked.rows_mut(r, p.nrows()).copy_from(p);
            r += p.nrows();
        }
        assert_eq!(row_reduce(&stacked).nrows(), 5);
        assert_eq!(linalg::numerical_rank(&stacked), 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn consistent_tables_satisfy_rows(seed in any::<u64>(), t in 1usize..5, k_raw in 1usize..5, which in 0usize..3) {
            let k = 1 + (k_raw - 1) % t;
            let scenario = Scenario::ALL[which];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let table = consistent_table(scenario, t, Some(k), 3, &mut rng).unwrap();
            let s = full(t);
            let mut rows = vec![rows_no_anticipation(t, &s).unwrap()];
            if scenario != Scenario::A {
                rows.push(rows_no_carryover(t, &s, k).unwrap());
            }
            if scenario == Scenario::C {
                rows.push(rows_time_invariant(t, &s, k).unwrap());
            }
            let means = table.stacked_means();
            for r in &rows {
                let resid = r * &means;
                prop_assert!(resid.iter().all(|v| v.abs() < 1e-12), "residual {}", resid.amax());
            }
            let assembled = assemble(scenario, t, &s, Some(k)).unwrap();
            for unit in 0..table.units() {
                prop_assert!((assembled.matrix() * table.unit_stack(unit)).amax() < 1e-12);
            }
        }

        #[test]
        fn row_reduce_preserves_row_space(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..6) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-2i32..=2) as f64);
            // Append combinations of existing rows.
            let mix = DMatrix::from_fn(3, rows, |_, _| rng.random_range(-1i32..=1) as f64);
            let mut stacked = DMatrix::zeros(rows + 3, cols);
            stacked.rows_mut(0, rows).copy_from(&base);
            stacked.rows_mut(rows, 3).copy_from(&(mix * &base));
            let reduced = row_reduce(&stacked);
            prop_assert_eq!(reduced.nrows(), linalg::numerical_rank(&stacked));
            prop_assert!(reduced.nrows() == 0 || same_row_space(&reduced, &stacked));
        }
    }
}
