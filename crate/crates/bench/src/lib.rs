//! Fixtures shared by the benchmarks.

use crossover_core::constraints::{assemble, RestrictionMatrix, Scenario};
use crossover_core::sequences::{full_sequence_set, sample_assignment, CrossoverDesign};
use crossover_core::simulator::seeded_consistent_table;
use crossover_core::{ObservedDataset, Result};

/// A balanced design over every sequence of length `horizon`, its observed
/// data and the scenario-b restriction with `k = 1`.
pub fn balanced_fixture(
    horizon: usize,
    units_per_sequence: usize,
    seed: u64,
) -> Result<(CrossoverDesign, ObservedDataset, RestrictionMatrix)> {
    let scope = full_sequence_set(horizon)?;
    let design = CrossoverDesign::new(horizon, scope.iter().map(|z| (z.clone(), units_per_sequence)))?;
    let table = seeded_consistent_table(Scenario::B, horizon, Some(1), design.total_units(), seed)?;
    let dataset = ObservedDataset::from_table(&table, &sample_assignment(&design, seed))?;
    let restriction = assemble(Scenario::B, horizon, design.scope(), Some(1))?;
    Ok((design, dataset, restriction))
}
