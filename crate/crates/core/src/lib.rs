//! Design-based analysis of crossover (switchback) randomized experiments.
//!
//! Causal assumptions (no anticipation, bounded carryover, time-invariant
//! effects) are compiled into linear restrictions on a sequence-indicator
//! regression. The restricted weighted least squares fit gives the best
//! linear unbiased estimator of any linear causal estimand, and the EHW
//! sandwich gives a conservative design-based variance.
//!
//! Module map:
//!
//! - [`sequences`]: treatment sequences, designs, complete randomization.
//! - [`estimands`]: linear estimands `θ(W) = Σ_z W(z) Ȳ(z)` and potential outcome tables.
//! - [`constraints`]: assumption rows and the scenario restriction matrices.
//! - [`identification`]: the global rank condition and per-mean identification checks.
//! - [`rwls`]: covariance estimation, the KKT solve, EHW variance and inference.
//! - [`twoperiod`]: closed-form two-period estimators.
//! - [`simulator`]: outcome generators, Monte Carlo and exact randomization audits.

pub mod constraints;
pub mod error;
pub mod estimands;
pub mod identification;
pub mod linalg;
pub mod rwls;
pub mod sequences;
pub mod simulator;
pub mod twoperiod;

pub use constraints::{assemble, RestrictionMatrix, Scenario};
pub use error::{Error, Result};
pub use estimands::{EstimandSpec, PotentialOutcomeTable};
pub use identification::{is_identifiable, Identifiability};
pub use rwls::{
    estimate, feasible_rwls, EstimateTable, FitOptions, ObservedDataset, RwlsFit, WeightChoice,
    WeightModel,
};
pub use sequences::{Assignment, CrossoverDesign, Treatment, TreatmentSequence};
