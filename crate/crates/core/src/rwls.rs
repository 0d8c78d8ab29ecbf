//! Restricted weighted least squares on per-sequence mean vectors, the EHW
//! sandwich variance, and estimand-level inference.
//!
//! The working model regresses each unit's outcome vector on sequence
//! indicators, `Y_i = X_i γ + ε_i`, with block-diagonal weights `Ω_z` per
//! sequence and restrictions `Cγ = 0`. Because `X_i` only selects the block
//! of the unit's own sequence, every quantity reduces to per-sequence counts,
//! means and scatter matrices.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::constraints::{column_labels, RestrictionMatrix, Scenario};
use crate::error::{Error, Result};
use crate::estimands::{column_means, EstimandSpec, PotentialOutcomeTable};
use crate::identification::{is_identifiable, Identifiability};
use crate::linalg;
use crate::sequences::{Assignment, CrossoverDesign, TreatmentSequence};

/// Condition number of the KKT matrix above which a warning is attached.
pub const CONDITION_WARNING: f64 = 1e12;

/// Relative floor on the smallest eigenvalue of each weight block.
pub const PD_FLOOR: f64 = 1e-8;

/// Observed outcomes `Y_i ∈ ℝ^T` and assigned sequences `Z_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedDataset {
    horizon: usize,
    sequences: Vec<TreatmentSequence>,
    outcomes: DMatrix<f64>,
}

impl ObservedDataset {
    pub fn new(
        horizon: usize,
        sequences: Vec<TreatmentSequence>,
        outcomes: DMatrix<f64>,
    ) -> Result<Self> {
        if outcomes.nrows() != sequences.len() || outcomes.ncols() != horizon {
            return Err(Error::Shape(format!(
                "outcomes are {}x{}, expected {}x{horizon}",
                outcomes.nrows(),
                outcomes.ncols(),
                sequences.len()
            )));
        }
        if sequences.is_empty() {
            return Err(Error::Shape("dataset has no units".into()));
        }
        if let Some((i, z)) = sequences.iter().enumerate().find(|(_, z)| z.len() != horizon) {
            return Err(Error::Shape(format!(
                "unit {i} has sequence {z} of length {}, horizon is {horizon}",
                z.len()
            )));
        }
        if let Some(pos) = outcomes.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!(
                "non-finite outcome for unit {}",
                pos % outcomes.nrows()
            )));
        }
        Ok(ObservedDataset {
            horizon,
            sequences,
            outcomes,
        })
    }

    /// Reveals `Y_i(Z_i)` for every unit.
    pub fn from_table(table: &PotentialOutcomeTable, assignment: &Assignment) -> Result<Self> {
        if assignment.len() != table.units() {
            return Err(Error::Shape(format!(
                "assignment covers {} units, table has {}",
                assignment.len(),
                table.units()
            )));
        }
        let t = table.horizon();
        let mut outcomes = DMatrix::zeros(table.units(), t);
        let mut sequences = Vec::with_capacity(table.units());
        for i in 0..table.units() {
            let z = assignment.sequence_of(i);
            let block = table
                .outcomes(z)
                .ok_or_else(|| Error::MissingSequence(z.to_string()))?;
            outcomes.row_mut(i).copy_from(&block.row(i));
            sequences.push(z.clone());
        }
        ObservedDataset::new(t, sequences, outcomes)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn units(&self) -> usize {
        self.sequences.len()
    }

    pub fn sequences(&self) -> &[TreatmentSequence] {
        &self.sequences
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn counts(&self) -> BTreeMap<TreatmentSequence, usize> {
        let mut counts = BTreeMap::new();
        for z in &self.sequences {
            *counts.entry(z.clone()).or_insert(0) += 1;
        }
        counts
    }

    /// The design implied by the observed counts, with the full scope.
    pub fn infer_design(&self) -> Result<CrossoverDesign> {
        CrossoverDesign::new(self.horizon, self.counts())
    }

    /// Checks that per-sequence counts agree with the design.
    pub fn check_design(&self, design: &CrossoverDesign) -> Result<()> {
        if design.horizon() != self.horizon {
            return Err(Error::Design(format!(
                "dataset horizon {} differs from design horizon {}",
                self.horizon,
                design.horizon()
            )));
        }
        let counts = self.counts();
        if &counts != design.counts() {
            let describe = |m: &BTreeMap<TreatmentSequence, usize>| {
                m.iter()
                    .map(|(z, n)| format!("{z}={n}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            return Err(Error::Design(format!(
                "dataset counts [{}] do not match design counts [{}]",
                describe(&counts),
                describe(design.counts())
            )));
        }
        Ok(())
    }

    /// Count, mean and scatter matrix per observed sequence.
    pub fn group_summaries(&self) -> BTreeMap<TreatmentSequence, GroupSummary> {
        let mut members: BTreeMap<&TreatmentSequence, Vec<usize>> = BTreeMap::new();
        for (i, z) in self.sequences.iter().enumerate() {
            members.entry(z).or_default().push(i);
        }
        members
            .into_iter()
            .map(|(z, rows)| {
                let block = self.outcomes.select_rows(rows.iter());
                (z.clone(), GroupSummary::from_block(&block))
            })
            .collect()
    }
}

/// Sufficient statistics of one sequence group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub count: usize,
    pub mean: DVector<f64>,
    /// `Σ_i (Y_i − Ŷ)(Y_i − Ŷ)ᵀ`.
    pub scatter: DMatrix<f64>,
}

impl GroupSummary {
    pub fn from_block(block: &DMatrix<f64>) -> Self {
        let mean = column_means(block);
        let mut centered = block.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        GroupSummary {
            count: block.nrows(),
            mean,
            scatter: centered.transpose() * centered,
        }
    }
}

/// `Ŷ(z)` for every observed sequence.
pub fn sequence_means(dataset: &ObservedDataset) -> BTreeMap<TreatmentSequence, DVector<f64>> {
    dataset
        .group_summaries()
        .into_iter()
        .map(|(z, g)| (z, g.mean))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightProvenance {
    Sample,
    Pooled,
    User,
}

/// A ridge added to a weight block to make it positive definite.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Repair {
    pub sequence: TreatmentSequence,
    pub min_eigenvalue: f64,
    pub added: f64,
}

/// Per-sequence `T × T` weight matrices `Ω_z`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightModel {
    blocks: BTreeMap<TreatmentSequence, DMatrix<f64>>,
    /// The blocks as supplied, before symmetrization and repair.
    raw: BTreeMap<TreatmentSequence, DMatrix<f64>>,
    provenance: WeightProvenance,
    repairs: Vec<Repair>,
}

impl WeightModel {
    /// Symmetrizes each block and lifts its smallest eigenvalue to at least
    /// `1e-8 · trace / T`. Blocks with zero trace borrow the average scale
    /// of the others (or 1).
    pub fn new(
        blocks: BTreeMap<TreatmentSequence, DMatrix<f64>>,
        provenance: WeightProvenance,
    ) -> Result<Self> {
        let mut scales = Vec::new();
        for (z, b) in &blocks {
            if !b.is_square() || b.nrows() == 0 {
                return Err(Error::Shape(format!("weight block for {z} is not square")));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Shape(format!("weight block for {z} is not finite")));
            }
            let trace = b.trace() / b.nrows() as f64;
            if trace > 0.0 {
                scales.push(trace);
            }
        }
        let fallback = if scales.is_empty() {
            1.0
        } else {
            scales.iter().sum::<f64>() / scales.len() as f64
        };
        let mut repairs = Vec::new();
        let raw = blocks.clone();
        let blocks = blocks
            .into_iter()
            .map(|(z, b)| {
                let mut b = linalg::symmetrize(&b);
                let t = b.nrows();
                let scale = match b.trace() / t as f64 {
                    s if s > 0.0 => s,
                    _ => fallback,
                };
                let floor = PD_FLOOR * scale;
                let lmin = linalg::min_eigenvalue(&b);
                if lmin < floor {
                    let added = floor - lmin;
                    for i in 0..t {
                        b[(i, i)] += added;
                    }
                    repairs.push(Repair {
                        sequence: z.clone(),
                        min_eigenvalue: lmin,
                        added,
                    });
                }
                (z, b)
            })
            .collect();
        Ok(WeightModel {
            blocks,
            raw,
            provenance,
            repairs,
        })
    }

    pub fn user(blocks: BTreeMap<TreatmentSequence, DMatrix<f64>>) -> Result<Self> {
        WeightModel::new(blocks, WeightProvenance::User)
    }

    /// Identity weights (ordinary restricted least squares).
    pub fn identity(design: &CrossoverDesign) -> Self {
        let t = design.horizon();
        let blocks = design
            .observed()
            .map(|z| (z.clone(), DMatrix::identity(t, t)))
            .collect();
        WeightModel::user(blocks).expect("identity blocks are valid")
    }

    /// True covariances `S²(z)` from a table, as fixed weights.
    pub fn from_table(table: &PotentialOutcomeTable, design: &CrossoverDesign) -> Result<Self> {
        let blocks = design
            .observed()
            .map(|z| Ok((z.clone(), table.covariance(z)?)))
            .collect::<Result<_>>()?;
        WeightModel::user(blocks)
    }

    pub fn block(&self, z: &TreatmentSequence) -> Option<&DMatrix<f64>> {
        self.blocks.get(z)
    }

    pub fn blocks(&self) -> &BTreeMap<TreatmentSequence, DMatrix<f64>> {
        &self.blocks
    }

    pub fn raw_blocks(&self) -> &BTreeMap<TreatmentSequence, DMatrix<f64>> {
        &self.raw
    }

    pub fn provenance(&self) -> WeightProvenance {
        self.provenance
    }

    pub fn repairs(&self) -> &[Repair] {
        &self.repairs
    }

    /// The same model with off-diagonal entries dropped from the supplied
    /// blocks, repaired afresh.
    pub fn diagonal(&self) -> Self {
        let blocks = self
            .raw
            .iter()
            .map(|(z, b)| (z.clone(), DMatrix::from_diagonal(&b.diagonal())))
            .collect();
        WeightModel::new(blocks, self.provenance).expect("diagonal of valid blocks")
    }
}

fn check_group_sizes(
    groups: &BTreeMap<TreatmentSequence, GroupSummary>,
) -> Result<()> {
    if let Some((z, g)) = groups.iter().find(|(_, g)| g.count < 2) {
        return Err(Error::DegenerateCovariance {
            sequence: z.to_string(),
            units: g.count,
        });
    }
    Ok(())
}

/// Per-sequence sample covariances with divisor `N_z − 1`.
pub fn sample_covariances(dataset: &ObservedDataset) -> Result<WeightModel> {
    sample_covariances_from(&dataset.group_summaries())
}

pub fn sample_covariances_from(
    groups: &BTreeMap<TreatmentSequence, GroupSummary>,
) -> Result<WeightModel> {
    check_group_sizes(groups)?;
    let blocks = groups
        .iter()
        .map(|(z, g)| (z.clone(), &g.scatter / (g.count as f64 - 1.0)))
        .collect();
    WeightModel::new(blocks, WeightProvenance::Sample)
}

/// Covariances pooled across sequences whose entries coincide under the
/// scenario's assumptions: entry `(t, t')` of `Ω_z` pools every observed
/// sequence sharing `z`'s outcome keys at both periods (prefix, or window
/// once carryover is limited), with `Σ N − #sequences` degrees of freedom.
pub fn pooled_covariances(
    dataset: &ObservedDataset,
    scenario: Scenario,
    k: Option<usize>,
) -> Result<WeightModel> {
    pooled_covariances_from(&dataset.group_summaries(), dataset.horizon(), scenario, k)
}

pub fn pooled_covariances_from(
    groups: &BTreeMap<TreatmentSequence, GroupSummary>,
    horizon: usize,
    scenario: Scenario,
    k: Option<usize>,
) -> Result<WeightModel> {
    let key = |t: usize, z: &TreatmentSequence| scenario.outcome_key(t, k, z);
    let mut blocks = BTreeMap::new();
    for z in groups.keys() {
        let mut block = DMatrix::zeros(horizon, horizon);
        for t in 1..=horizon {
            for u in t..=horizon {
                let (kt, ku) = (key(t, z), key(u, z));
                let mut scatter = 0.0;
                let mut df = 0isize;
                for (other, g) in groups {
                    if key(t, other) == kt && key(u, other) == ku {
                        scatter += g.scatter[(t - 1, u - 1)];
                        df += g.count as isize - 1;
                    }
                }
                if df < 1 {
                    return Err(Error::DegenerateCovariance {
                        sequence: z.to_string(),
                        units: groups[z].count,
                    });
                }
                block[(t - 1, u - 1)] = scatter / df as f64;
                block[(u - 1, t - 1)] = scatter / df as f64;
            }
        }
        blocks.insert(z.clone(), block);
    }
    WeightModel::new(blocks, WeightProvenance::Pooled)
}

/// How the weights of a feasible fit are chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightChoice {
    Sample,
    Pooled,
    User(WeightModel),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FitOptions {
    /// Scale the EHW covariance by `N / (N − p)` with `p = T|S| − rank C`.
    pub hc1: bool,
}

/// The data-free part of a fit: `U₁₁` from the KKT system for a given
/// design, weights and restriction.
#[derive(Clone, Debug)]
pub struct KktSolution {
    pub horizon: usize,
    pub scope: Vec<TreatmentSequence>,
    pub counts: BTreeMap<TreatmentSequence, usize>,
    pub weights: WeightModel,
    pub restriction: RestrictionMatrix,
    pub identifiability: Identifiability,
    /// Upper-left block of the inverse KKT matrix.
    pub u11: DMatrix<f64>,
    /// `N_z Ω_z⁻¹` per observed sequence.
    pub precision: BTreeMap<TreatmentSequence, DMatrix<f64>>,
    pub condition_number: f64,
    pub warnings: Vec<String>,
}

/// Builds and inverts `[[XᵀΩ⁻¹X, Cᵀ], [C, 0]]`.
pub fn solve_kkt(
    design: &CrossoverDesign,
    weights: &WeightModel,
    restriction: &RestrictionMatrix,
) -> Result<KktSolution> {
    let identifiability = is_identifiable(design, restriction)?.into_result()?;
    let t = design.horizon();
    let n = t * design.scope().len();
    let c = restriction.matrix();
    let m = c.nrows();
    let mut kkt = DMatrix::zeros(n + m, n + m);
    let mut precision = BTreeMap::new();
    for (z, &count) in design.counts() {
        let omega = weights
            .block(z)
            .ok_or_else(|| Error::MissingSequence(format!("no weight block for {z}")))?;
        if omega.nrows() != t {
            return Err(Error::Shape(format!(
                "weight block for {z} is {}x{}, horizon is {t}",
                omega.nrows(),
                omega.ncols()
            )));
        }
        let p = linalg::spd_inverse(omega)? * count as f64;
        let s = design.scope_index(z).expect("observed sequences are in scope");
        kkt.view_mut((s * t, s * t), (t, t)).copy_from(&p);
        precision.insert(z.clone(), p);
    }
    kkt.view_mut((n, 0), (m, n)).copy_from(c);
    kkt.view_mut((0, n), (n, m)).copy_from(&c.transpose());

    let condition_number = linalg::condition_number(&kkt);
    let mut warnings = Vec::new();
    if condition_number > CONDITION_WARNING {
        warnings.push(format!(
            "KKT matrix is ill-conditioned (condition number {condition_number:.3e})"
        ));
    }
    for r in weights.repairs() {
        warnings.push(format!(
            "weight block for {} was not positive definite (smallest eigenvalue {:.3e}); added {:.3e} to its diagonal",
            r.sequence, r.min_eigenvalue, r.added
        ));
    }
    let inverse = kkt
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::IllConditioned("KKT matrix is singular".into()))?;
    let u11 = linalg::symmetrize(&inverse.view((0, 0), (n, n)).into_owned());
    Ok(KktSolution {
        horizon: t,
        scope: design.scope().to_vec(),
        counts: design.counts().clone(),
        weights: weights.clone(),
        restriction: restriction.clone(),
        identifiability,
        u11,
        precision,
        condition_number,
        warnings,
    })
}

impl KktSolution {
    pub fn dimension(&self) -> usize {
        self.u11.nrows()
    }

    /// `XᵀΩ⁻¹Y`, stacked `N_z Ω_z⁻¹ Ŷ(z)`.
    fn score(&self, means: &BTreeMap<TreatmentSequence, DVector<f64>>) -> Result<DVector<f64>> {
        let t = self.horizon;
        let mut rhs = DVector::zeros(self.dimension());
        for (z, p) in &self.precision {
            let mean = means
                .get(z)
                .ok_or_else(|| Error::MissingSequence(z.to_string()))?;
            let s = self.scope.binary_search(z).expect("in scope");
            rhs.rows_mut(s * t, t).copy_from(&(p * mean));
        }
        Ok(rhs)
    }

    /// `γ̂ = U₁₁ XᵀΩ⁻¹Y`.
    pub fn gamma(&self, means: &BTreeMap<TreatmentSequence, DVector<f64>>) -> Result<DVector<f64>> {
        Ok(&self.u11 * self.score(means)?)
    }

    /// `W̃(z) = B U₁₁[·, z] N_z Ω_z⁻¹`, so that the estimate is
    /// `Σ_z W̃(z) Ŷ(z)`.
    pub fn estimator_weights(
        &self,
        spec: &EstimandSpec,
    ) -> Result<BTreeMap<TreatmentSequence, DMatrix<f64>>> {
        let spec = spec.rescoped(&self.scope)?;
        let t = self.horizon;
        let bu = spec.coefficients() * &self.u11;
        Ok(self
            .precision
            .iter()
            .map(|(z, p)| {
                let s = self.scope.binary_search(z).expect("in scope");
                let cols = bu.columns(s * t, t);
                (z.clone(), cols * p)
            })
            .collect())
    }

    /// `Σ_z W̃(z) S²(z) W̃(z)ᵀ / N_z − S²(θ̃)/N` on a known table, where
    /// `θ̃_i = Σ_z W̃(z) Y_i(z)`. This is the exact randomization variance
    /// of the fixed-weight estimator; it equals the textbook form with
    /// `S²(θ(W))` whenever the table satisfies the restrictions unit by unit.
    pub fn oracle_covariance(
        &self,
        spec: &EstimandSpec,
        table: &PotentialOutcomeTable,
    ) -> Result<DMatrix<f64>> {
        let w = self.estimator_weights(spec)?;
        let k = spec.dimension();
        let n = table.units();
        let mut v = DMatrix::zeros(k, k);
        for (z, wz) in &w {
            let s2 = table.covariance(z)?;
            v += wz * s2 * wz.transpose() / self.counts[z] as f64;
        }
        let mut effects = DMatrix::zeros(n, k);
        for (z, wz) in &w {
            let block = table
                .outcomes(z)
                .ok_or_else(|| Error::MissingSequence(z.to_string()))?;
            effects += block * wz.transpose();
        }
        let mean = column_means(&effects);
        for mut row in effects.row_iter_mut() {
            row -= mean.transpose();
        }
        let s2_effect = effects.transpose() * effects / (n as f64 - 1.0);
        Ok(v - s2_effect / n as f64)
    }
}

/// A solved restricted WLS problem with its EHW covariance.
#[derive(Clone, Debug)]
pub struct RwlsFit {
    pub solution: KktSolution,
    pub gamma: DVector<f64>,
    pub ehw: DMatrix<f64>,
    /// `Y_i − X_i γ̂` per unit (`N × T`); empty when fitted from summaries.
    pub residuals: DMatrix<f64>,
    pub means: BTreeMap<TreatmentSequence, DVector<f64>>,
    pub options: FitOptions,
}

impl RwlsFit {
    pub fn horizon(&self) -> usize {
        self.solution.horizon
    }

    pub fn scope(&self) -> &[TreatmentSequence] {
        &self.solution.scope
    }

    pub fn restriction(&self) -> &RestrictionMatrix {
        &self.solution.restriction
    }

    pub fn weights(&self) -> &WeightModel {
        &self.solution.weights
    }

    pub fn warnings(&self) -> &[String] {
        &self.solution.warnings
    }

    pub fn gamma_labels(&self) -> Vec<String> {
        column_labels(self.horizon(), self.scope())
    }

    /// `γ̂_{·,z}`.
    pub fn gamma_block(&self, z: &TreatmentSequence) -> Option<DVector<f64>> {
        let s = self.scope().binary_search(z).ok()?;
        let t = self.horizon();
        Some(self.gamma.rows(s * t, t).into_owned())
    }

    /// `max |Cγ̂|`.
    pub fn restriction_residual(&self) -> f64 {
        let c = self.restriction().matrix();
        if c.nrows() == 0 {
            0.0
        } else {
            (c * &self.gamma).amax()
        }
    }
}

/// Restricted WLS from per-sequence means only (no EHW covariance).
pub fn solve_restricted_wls(
    design: &CrossoverDesign,
    means: &BTreeMap<TreatmentSequence, DVector<f64>>,
    weights: &WeightModel,
    restriction: &RestrictionMatrix,
) -> Result<RwlsFit> {
    let solution = solve_kkt(design, weights, restriction)?;
    let gamma = solution.gamma(means)?;
    let n = solution.dimension();
    Ok(RwlsFit {
        gamma,
        ehw: DMatrix::zeros(n, n),
        residuals: DMatrix::zeros(0, design.horizon()),
        means: means.clone(),
        solution,
        options: FitOptions::default(),
    })
}

/// Fits from group summaries: weights, KKT solve and EHW covariance.
pub fn fit_from_summaries(
    groups: &BTreeMap<TreatmentSequence, GroupSummary>,
    design: &CrossoverDesign,
    restriction: &RestrictionMatrix,
    weight_choice: &WeightChoice,
    options: FitOptions,
) -> Result<RwlsFit> {
    let weights = match weight_choice {
        WeightChoice::Sample => sample_covariances_from(groups)?,
        WeightChoice::Pooled => pooled_covariances_from(
            groups,
            design.horizon(),
            restriction.scenario(),
            restriction.order(),
        )?,
        WeightChoice::User(w) => w.clone(),
    };
    let means: BTreeMap<_, _> = groups.iter().map(|(z, g)| (z.clone(), g.mean.clone())).collect();
    let solution = solve_kkt(design, &weights, restriction)?;
    let gamma = solution.gamma(&means)?;
    let ehw = ehw_from_summaries(&solution, &gamma, groups, options)?;
    Ok(RwlsFit {
        gamma,
        ehw,
        residuals: DMatrix::zeros(0, design.horizon()),
        means,
        solution,
        options,
    })
}

fn ehw_from_summaries(
    solution: &KktSolution,
    gamma: &DVector<f64>,
    groups: &BTreeMap<TreatmentSequence, GroupSummary>,
    options: FitOptions,
) -> Result<DMatrix<f64>> {
    let t = solution.horizon;
    let n = solution.dimension();
    let mut middle = DMatrix::zeros(n, n);
    for (z, g) in groups {
        let s = solution
            .scope
            .binary_search(z)
            .map_err(|_| Error::MissingSequence(z.to_string()))?;
        // Σ_i r_i r_iᵀ = scatter + N_z (Ŷ − γ̂_z)(Ŷ − γ̂_z)ᵀ
        let shift = &g.mean - gamma.rows(s * t, t);
        let outer = &g.scatter + &shift * shift.transpose() * g.count as f64;
        let omega_inv = &solution.precision[z] / solution.counts[z] as f64;
        middle
            .view_mut((s * t, s * t), (t, t))
            .copy_from(&(&omega_inv * outer * &omega_inv));
    }
    let mut v = &solution.u11 * middle * &solution.u11;
    if options.hc1 {
        let units: usize = solution.counts.values().sum();
        let p = n - solution.restriction.rows();
        if units <= p {
            return Err(Error::DegenerateSample(format!(
                "HC1 correction needs more than {p} units, got {units}"
            )));
        }
        v *= units as f64 / (units - p) as f64;
    }
    Ok(linalg::symmetrize(&v))
}

/// The two-step feasible estimator: estimate weights, then solve.
pub fn feasible_rwls(
    dataset: &ObservedDataset,
    design: &CrossoverDesign,
    restriction: &RestrictionMatrix,
    weight_choice: &WeightChoice,
    options: FitOptions,
) -> Result<RwlsFit> {
    dataset.check_design(design)?;
    let groups = dataset.group_summaries();
    let mut fit = fit_from_summaries(&groups, design, restriction, weight_choice, options)?;
    let t = design.horizon();
    let mut residuals = dataset.outcomes().clone();
    for (i, z) in dataset.sequences().iter().enumerate() {
        let s = design.scope_index(z).expect("checked against design");
        let fitted = fit.gamma.rows(s * t, t).transpose();
        let mut row = residuals.row_mut(i);
        row -= fitted;
    }
    fit.residuals = residuals;
    Ok(fit)
}

/// EHW covariance `U₁₁ XᵀΩ⁻¹ Σ̂ Ω⁻¹X U₁₁` recomputed from the dataset.
pub fn ehw_covariance(fit: &RwlsFit, dataset: &ObservedDataset) -> Result<DMatrix<f64>> {
    ehw_from_summaries(&fit.solution, &fit.gamma, &dataset.group_summaries(), fit.options)
}

/// `(point, covariance)` for the spec without restriction handling.
fn raw_estimate(fit: &RwlsFit, spec: &EstimandSpec) -> Result<(EstimandSpec, DVector<f64>, DMatrix<f64>)> {
    let spec = spec.rescoped(fit.scope())?;
    let b = spec.coefficients();
    let point = b * &fit.gamma;
    let cov = b * &fit.ehw * b.transpose();
    Ok((spec, point, cov))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WaldTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// `χ²_{df, level}` quantile bounding the confidence region.
    pub critical: f64,
}

/// Point estimates, EHW covariance and intervals for one estimand spec.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateTable {
    pub labels: Vec<String>,
    pub point: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub se: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    /// Coordinates forced to zero by the restrictions; reported as exactly 0.
    pub restricted: Vec<bool>,
    pub level: f64,
    /// Test of `θ = 0` over the unrestricted coordinates.
    pub wald: Option<WaldTest>,
}

impl EstimateTable {
    pub fn len(&self) -> usize {
        self.point.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point.is_empty()
    }

    pub fn covers(&self, j: usize, value: f64) -> bool {
        self.ci_lower[j] <= value && value <= self.ci_upper[j]
    }

    /// Whether `theta` lies in the Wald confidence region.
    pub fn region_contains(&self, theta: &[f64]) -> bool {
        let free: Vec<usize> = (0..self.len()).filter(|&j| !self.restricted[j]).collect();
        if free.iter().any(|&j| !theta[j].is_finite()) {
            return false;
        }
        if (0..self.len()).any(|j| self.restricted[j] && theta[j] != 0.0) {
            return false;
        }
        if free.is_empty() {
            return true;
        }
        let diff = DVector::from_iterator(free.len(), free.iter().map(|&j| self.point[j] - theta[j]));
        let cov = self.covariance.select_rows(free.iter()).select_columns(free.iter());
        let (stat, df) = quadratic_form(&cov, &diff);
        if df == 0 {
            return diff.amax() == 0.0;
        }
        let critical = ChiSquared::new(df as f64)
            .map(|d| d.inverse_cdf(self.level))
            .unwrap_or(f64::INFINITY);
        stat <= critical
    }
}

/// `xᵀ V⁺ x` and the numerical rank of `V`.
fn quadratic_form(v: &DMatrix<f64>, x: &DVector<f64>) -> (f64, usize) {
    let rank = linalg::numerical_rank(v);
    if rank == 0 {
        return (0.0, 0);
    }
    let svd = v.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = linalg::RANK_TOLERANCE * smax * v.nrows() as f64;
    let pinv = svd.pseudo_inverse(cutoff).expect("both factors computed");
    ((x.transpose() * pinv * x)[(0, 0)], rank)
}

/// Estimates `θ(W)` with EHW standard errors, normal intervals at `level`
/// and a Wald test. Coordinates whose coefficient row lies in the row space
/// of `C` are identically zero under the restrictions and are reported as
/// exactly zero.
pub fn estimate(fit: &RwlsFit, spec: &EstimandSpec, level: f64) -> Result<EstimateTable> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Parameter(format!("confidence level {level} is not in (0, 1)")));
    }
    let (spec, mut point, mut cov) = raw_estimate(fit, spec)?;
    let k = spec.dimension();
    let restricted: Vec<bool> = (0..k)
        .map(|j| {
            let row: Vec<f64> = spec.coefficients().row(j).iter().cloned().collect();
            fit.restriction().forces_zero(&row)
        })
        .collect();
    for j in (0..k).filter(|&j| restricted[j]) {
        point[j] = 0.0;
        cov.row_mut(j).fill(0.0);
        cov.column_mut(j).fill(0.0);
    }
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + level / 2.0);
    let se: Vec<f64> = (0..k).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let free: Vec<usize> = (0..k).filter(|&j| !restricted[j]).collect();
    let wald = if free.is_empty() {
        None
    } else {
        let x = DVector::from_iterator(free.len(), free.iter().map(|&j| point[j]));
        let sub = cov.select_rows(free.iter()).select_columns(free.iter());
        let (statistic, df) = quadratic_form(&sub, &x);
        (df > 0).then(|| {
            let chi = ChiSquared::new(df as f64).expect("positive df");
            WaldTest {
                statistic,
                df,
                p_value: 1.0 - chi.cdf(statistic),
                critical: chi.inverse_cdf(level),
            }
        })
    };
    Ok(EstimateTable {
        labels: spec.labels().to_vec(),
        ci_lower: (0..k).map(|j| point[j] - z * se[j]).collect(),
        ci_upper: (0..k).map(|j| point[j] + z * se[j]).collect(),
        point: point.iter().cloned().collect(),
        covariance: cov,
        se,
        restricted,
        level,
        wald,
    })
}
