//! Closed-form estimators for two-period designs with either all four
//! sequences or the two sequences `AB` and `BA`.
//!
//! Each estimator is returned together with its weights on the observed
//! period means, so that its conservative variance `Σ_z w(z)ᵀ Ŝ²(z) w(z)/N_z`
//! can be evaluated with whatever covariance inputs the summary carries.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::constraints::Scenario;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rwls::{pooled_covariances_from, sample_covariances_from, GroupSummary, ObservedDataset, WeightModel};
use crate::sequences::TreatmentSequence;

const AA: &str = "AA";
const AB: &str = "AB";
const BA: &str = "BA";
const BB: &str = "BB";

fn seq(s: &str) -> TreatmentSequence {
    s.parse().expect("valid literal")
}

/// Group counts, means and (optionally) covariance inputs for a
/// two-period design.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoPeriodSummary {
    counts: BTreeMap<TreatmentSequence, usize>,
    means: BTreeMap<TreatmentSequence, DVector<f64>>,
    covariances: BTreeMap<TreatmentSequence, DMatrix<f64>>,
}

impl TwoPeriodSummary {
    /// Means, counts and covariances taken from `weights` (any provenance).
    pub fn new(
        counts: BTreeMap<TreatmentSequence, usize>,
        means: BTreeMap<TreatmentSequence, DVector<f64>>,
        covariances: BTreeMap<TreatmentSequence, DMatrix<f64>>,
    ) -> Result<Self> {
        for (z, m) in &means {
            if z.len() != 2 || m.len() != 2 {
                return Err(Error::Shape(format!("{z} is not a two-period group")));
            }
            if counts.get(z).copied().unwrap_or(0) == 0 {
                return Err(Error::MissingSequence(z.to_string()));
            }
        }
        for (z, c) in &covariances {
            if c.shape() != (2, 2) {
                return Err(Error::Shape(format!("covariance for {z} is not 2x2")));
            }
        }
        Ok(TwoPeriodSummary {
            counts,
            means,
            covariances,
        })
    }

    /// Sample means with sample covariances (covariances omitted when some
    /// group has a single unit).
    pub fn from_dataset(dataset: &ObservedDataset) -> Result<Self> {
        let groups = two_period_groups(dataset)?;
        let covariances = sample_covariances_from(&groups)
            .map(|w| w.raw_blocks().clone())
            .unwrap_or_default();
        Self::from_groups(&groups, covariances)
    }

    /// Sample means with covariances pooled as the scenario allows (`k = 1`).
    pub fn pooled_from_dataset(dataset: &ObservedDataset, scenario: Scenario) -> Result<Self> {
        let groups = two_period_groups(dataset)?;
        let weights = pooled_covariances_from(&groups, 2, scenario, Some(1))?;
        Self::from_groups(&groups, weights.raw_blocks().clone())
    }

    fn from_groups(
        groups: &BTreeMap<TreatmentSequence, GroupSummary>,
        covariances: BTreeMap<TreatmentSequence, DMatrix<f64>>,
    ) -> Result<Self> {
        TwoPeriodSummary::new(
            groups.iter().map(|(z, g)| (z.clone(), g.count)).collect(),
            groups.iter().map(|(z, g)| (z.clone(), g.mean.clone())).collect(),
            covariances,
        )
    }

    /// Replaces the covariance inputs.
    pub fn with_covariances(mut self, covariances: BTreeMap<TreatmentSequence, DMatrix<f64>>) -> Result<Self> {
        self.covariances = covariances;
        TwoPeriodSummary::new(self.counts, self.means, self.covariances)
    }

    /// Keeps only the variances (zero covariance between periods).
    pub fn diagonal(mut self) -> Self {
        for c in self.covariances.values_mut() {
            c[(0, 1)] = 0.0;
            c[(1, 0)] = 0.0;
        }
        self
    }

    pub fn counts(&self) -> &BTreeMap<TreatmentSequence, usize> {
        &self.counts
    }

    pub fn covariances(&self) -> &BTreeMap<TreatmentSequence, DMatrix<f64>> {
        &self.covariances
    }

    /// The covariance inputs as user weights for the general engine.
    pub fn weight_model(&self) -> Result<WeightModel> {
        if self.covariances.len() != self.means.len() {
            return Err(Error::DegenerateCovariance {
                sequence: self
                    .means
                    .keys()
                    .find(|z| !self.covariances.contains_key(*z))
                    .map(|z| z.to_string())
                    .unwrap_or_default(),
                units: 1,
            });
        }
        WeightModel::user(self.covariances.clone())
    }

    fn n(&self, z: &str) -> Result<f64> {
        self.counts
            .get(&seq(z))
            .map(|&n| n as f64)
            .ok_or_else(|| Error::MissingSequence(z.into()))
    }

    /// `Ŷ_t(z)`.
    fn y(&self, t: usize, z: &str) -> Result<f64> {
        self.means
            .get(&seq(z))
            .map(|m| m[t - 1])
            .ok_or_else(|| Error::MissingSequence(z.into()))
    }

    fn require(&self, groups: &[&str]) -> Result<()> {
        for z in groups {
            self.n(z)?;
        }
        Ok(())
    }

    fn evaluate(&self, label: &str, weights: &[(&str, [f64; 2])]) -> Result<ClosedFormEstimate> {
        let mut value = 0.0;
        let mut map = BTreeMap::new();
        for (z, w) in weights {
            value += w[0] * self.y(1, z)? + w[1] * self.y(2, z)?;
            map.insert(seq(z), *w);
        }
        Ok(ClosedFormEstimate {
            label: label.into(),
            value,
            weights: map,
        })
    }

    /// `Σ_z w(z)ᵀ Ŝ²(z) w(z) / N_z` for an estimator with the given weights.
    pub fn variance_of(&self, estimate: &ClosedFormEstimate) -> Result<f64> {
        let mut v = 0.0;
        for (z, w) in &estimate.weights {
            let s = self
                .covariances
                .get(z)
                .ok_or_else(|| Error::DegenerateCovariance {
                    sequence: z.to_string(),
                    units: self.counts.get(z).copied().unwrap_or(0),
                })?;
            let w = DVector::from_row_slice(w);
            v += (w.transpose() * s * &w)[(0, 0)] / self.counts[z] as f64;
        }
        Ok(v)
    }
}

fn two_period_groups(dataset: &ObservedDataset) -> Result<BTreeMap<TreatmentSequence, GroupSummary>> {
    if dataset.horizon() != 2 {
        return Err(Error::Shape(format!(
            "closed forms need two periods, dataset has {}",
            dataset.horizon()
        )));
    }
    Ok(dataset.group_summaries())
}

/// One closed-form estimate and its weights `(w₁(z), w₂(z))` on the
/// observed period means.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedFormEstimate {
    pub label: String,
    pub value: f64,
    pub weights: BTreeMap<TreatmentSequence, [f64; 2]>,
}

/// Period-1 weights of `Ŷ₁(A) − Ŷ₁(B)` pooling over the period-2 arm.
fn tau1_weights(s: &TwoPeriodSummary) -> Result<Vec<(&'static str, [f64; 2])>> {
    let (aa, ab, ba, bb) = (s.n(AA)?, s.n(AB)?, s.n(BA)?, s.n(BB)?);
    Ok(vec![
        (AA, [aa / (aa + ab), 0.0]),
        (AB, [ab / (aa + ab), 0.0]),
        (BA, [-ba / (ba + bb), 0.0]),
        (BB, [-bb / (ba + bb), 0.0]),
    ])
}

/// Four sequences, no anticipation: `τ̂₁, τ̂₂(A), τ̂₂(B), τ̂₂¹(A), τ̂₂¹(B)`.
pub fn blue_4seq_scenario_a(s: &TwoPeriodSummary) -> Result<Vec<ClosedFormEstimate>> {
    s.require(&[AA, AB, BA, BB])?;
    Ok(vec![
        s.evaluate("tau1", &tau1_weights(s)?)?,
        s.evaluate("tau2(A)", &[(AA, [0.0, 1.0]), (AB, [0.0, -1.0])])?,
        s.evaluate("tau2(B)", &[(BA, [0.0, 1.0]), (BB, [0.0, -1.0])])?,
        s.evaluate("carry2^1(A)", &[(AA, [0.0, 1.0]), (BA, [0.0, -1.0])])?,
        s.evaluate("carry2^1(B)", &[(AB, [0.0, 1.0]), (BB, [0.0, -1.0])])?,
    ])
}

/// Four sequences, first-order carryover: `τ̂₁` and `τ̂₂ = Ŷ₂(A) − Ŷ₂(B)`
/// pooling over the period-1 arm.
pub fn blue_4seq_scenario_b(s: &TwoPeriodSummary) -> Result<Vec<ClosedFormEstimate>> {
    s.require(&[AA, AB, BA, BB])?;
    let (aa, ab, ba, bb) = (s.n(AA)?, s.n(AB)?, s.n(BA)?, s.n(BB)?);
    Ok(vec![
        s.evaluate("tau1", &tau1_weights(s)?)?,
        s.evaluate(
            "tau2",
            &[
                (AA, [0.0, aa / (aa + ba)]),
                (BA, [0.0, ba / (aa + ba)]),
                (AB, [0.0, -ab / (ab + bb)]),
                (BB, [0.0, -bb / (ab + bb)]),
            ],
        )?,
    ])
}

/// Four sequences, time-invariant effects: minimizes
/// `Σ_z w(z)ᵀ Ω_z w(z) / N_z` over the eight weights subject to
/// unbiasedness, using the summary's covariance inputs as `Ω_z`.
pub fn blue_4seq_scenario_c(s: &TwoPeriodSummary) -> Result<ClosedFormEstimate> {
    s.require(&[AA, AB, BA, BB])?;
    let weights = s.weight_model()?;
    let order = [AA, AB, BA, BB];
    let mut h = DMatrix::zeros(8, 8);
    for (g, z) in order.iter().enumerate() {
        let omega = weights.block(&seq(z)).expect("all four present");
        h.view_mut((2 * g, 2 * g), (2, 2))
            .copy_from(&(omega / s.n(z)?));
    }
    // Columns: w1(AA) w2(AA) w1(AB) w2(AB) w1(BA) w2(BA) w1(BB) w2(BB).
    let a = DMatrix::from_row_slice(
        3,
        8,
        &[
            1., 0., 1., 0., 1., 0., 1., 0., //
            0., 1., 0., 1., 0., 1., 0., 1., //
            1., 1., 1., 0., 0., 1., 0., 0.,
        ],
    );
    let b = DVector::from_vec(vec![0.0, 0.0, 1.0]);
    let x = linalg::solve_equality_qp(&h, &DVector::zeros(8), &a, &b)?;
    let w: Vec<(&str, [f64; 2])> = order
        .iter()
        .enumerate()
        .map(|(g, z)| (*z, [x[2 * g], x[2 * g + 1]]))
        .collect();
    s.evaluate("tau", &w)
}

/// Two sequences, no anticipation: `τ̂₁ = Ŷ₁(AB) − Ŷ₁(BA)`.
pub fn blue_2seq_scenario_a(s: &TwoPeriodSummary) -> Result<Vec<ClosedFormEstimate>> {
    s.require(&[AB, BA])?;
    Ok(vec![s.evaluate("tau1", &[(AB, [1.0, 0.0]), (BA, [-1.0, 0.0])])?])
}

/// Effects with no unbiased estimator in the two-sequence design without
/// further assumptions.
pub const TWO_SEQUENCE_UNIDENTIFIED: [&str; 4] = ["tau2(A)", "tau2(B)", "carry2^1(A)", "carry2^1(B)"];

/// Two sequences, first-order carryover: `τ̂₁` and `τ̂₂ = Ŷ₂(BA) − Ŷ₂(AB)`.
pub fn blue_2seq_scenario_b(s: &TwoPeriodSummary) -> Result<Vec<ClosedFormEstimate>> {
    s.require(&[AB, BA])?;
    Ok(vec![
        s.evaluate("tau1", &[(AB, [1.0, 0.0]), (BA, [-1.0, 0.0])])?,
        s.evaluate("tau2", &[(BA, [0.0, 1.0]), (AB, [0.0, -1.0])])?,
    ])
}

/// Two sequences, time-invariant effects: `p τ̂₁ + (1 − p) τ̂₂` with
/// `p = Σ_z (S²₂ + S₁₂)/N_z ÷ Σ_z (S²₁ + S²₂ + 2S₁₂)/N_z`.
pub fn blue_2seq_scenario_c(s: &TwoPeriodSummary) -> Result<(ClosedFormEstimate, f64)> {
    s.require(&[AB, BA])?;
    let weights = s.weight_model()?;
    let mut num = 0.0;
    let mut den = 0.0;
    for z in [AB, BA] {
        let c = weights.block(&seq(z)).expect("both present");
        let n = s.n(z)?;
        num += (c[(1, 1)] + c[(0, 1)]) / n;
        den += (c[(0, 0)] + c[(1, 1)] + 2.0 * c[(0, 1)]) / n;
    }
    if den <= 0.0 {
        return Err(Error::IllConditioned(
            "the variance of the period contrast is zero".into(),
        ));
    }
    let p = num / den;
    let est = s.evaluate("tau", &[(AB, [p, -(1.0 - p)]), (BA, [-p, 1.0 - p])])?;
    Ok((est, p))
}

/// Which two-period layout a set of observed sequences forms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TwoPeriodLayout {
    FourSequence,
    TwoSequence,
}

impl TwoPeriodLayout {
    pub fn detect<'a>(observed: impl IntoIterator<Item = &'a TreatmentSequence>) -> Option<Self> {
        let names: Vec<String> = observed.into_iter().map(|z| z.to_string()).collect();
        match names.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
            [AA, AB, BA, BB] => Some(TwoPeriodLayout::FourSequence),
            [AB, BA] => Some(TwoPeriodLayout::TwoSequence),
            _ => None,
        }
    }
}

/// The closed-form estimates for a layout and scenario.
pub fn closed_form(
    s: &TwoPeriodSummary,
    layout: TwoPeriodLayout,
    scenario: Scenario,
) -> Result<Vec<ClosedFormEstimate>> {
    match (layout, scenario) {
        (TwoPeriodLayout::FourSequence, Scenario::A) => blue_4seq_scenario_a(s),
        (TwoPeriodLayout::FourSequence, Scenario::B) => blue_4seq_scenario_b(s),
        (TwoPeriodLayout::FourSequence, Scenario::C) => Ok(vec![blue_4seq_scenario_c(s)?]),
        (TwoPeriodLayout::TwoSequence, Scenario::A) => blue_2seq_scenario_a(s),
        (TwoPeriodLayout::TwoSequence, Scenario::B) => blue_2seq_scenario_b(s),
        (TwoPeriodLayout::TwoSequence, Scenario::C) => Ok(vec![blue_2seq_scenario_c(s)?.0]),
    }
}

/// Conservative variance of each closed-form estimator: the randomization
/// variance with the inestimable individual-effect term dropped and the
/// summary's covariance inputs plugged in.
pub fn conservative_variances(
    s: &TwoPeriodSummary,
    layout: TwoPeriodLayout,
    scenario: Scenario,
) -> Result<Vec<(String, f64)>> {
    closed_form(s, layout, scenario)?
        .into_iter()
        .map(|e| Ok((e.label.clone(), s.variance_of(&e)?)))
        .collect()
}

/// A closed-form estimate with its conservative standard error and normal
/// interval.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedFormInterval {
    pub label: String,
    pub value: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn conservative_intervals(
    s: &TwoPeriodSummary,
    layout: TwoPeriodLayout,
    scenario: Scenario,
    level: f64,
) -> Result<Vec<ClosedFormInterval>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Parameter(format!("confidence level {level} is not in (0, 1)")));
    }
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + level / 2.0);
    closed_form(s, layout, scenario)?
        .into_iter()
        .map(|e| {
            let se = s.variance_of(&e)?.max(0.0).sqrt();
            Ok(ClosedFormInterval {
                lower: e.value - z * se,
                upper: e.value + z * se,
                label: e.label,
                value: e.value,
                se,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(groups: &[(&str, usize, [f64; 2], [f64; 3])]) -> TwoPeriodSummary {
        let counts = groups.iter().map(|(z, n, _, _)| (seq(z), *n)).collect();
        let means = groups
            .iter()
            .map(|(z, _, m, _)| (seq(z), DVector::from_row_slice(m)))
            .collect();
        let covs = groups
            .iter()
            .map(|(z, _, _, c)| (seq(z), DMatrix::from_row_slice(2, 2, &[c[0], c[2], c[2], c[1]])))
            .collect();
        TwoPeriodSummary::new(counts, means, covs).unwrap()
    }

    fn values(v: &[ClosedFormEstimate]) -> Vec<f64> {
        v.iter().map(|e| e.value).collect()
    }

    #[test]
    fn four_sequence_tau1_equal_sizes() {
        let s = summary(&[
            (AA, 5, [1.0, 0.3], [1.0, 1.0, 0.0]),
            (AB, 5, [1.0, 0.1], [1.0, 1.0, 0.0]),
            (BA, 5, [0.0, 2.0], [1.0, 1.0, 0.0]),
            (BB, 5, [0.0, 0.7], [1.0, 1.0, 0.0]),
        ]);
        let out = blue_4seq_scenario_a(&s).unwrap();
        assert_eq!(out[0].value, 1.0);
        assert!((out[1].value - 0.2).abs() < 1e-12);
        assert!((out[3].value - (0.3 - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn four_sequence_tau1_unequal_sizes() {
        let s = summary(&[
            (AA, 2, [3.0, 0.0], [1.0, 1.0, 0.0]),
            (AB, 6, [1.0, 0.0], [1.0, 1.0, 0.0]),
            (BA, 1, [0.0, 0.0], [1.0, 1.0, 0.0]),
            (BB, 3, [4.0, 0.0], [1.0, 1.0, 0.0]),
        ]);
        let tau1 = &blue_4seq_scenario_a(&s).unwrap()[0];
        let expected = (2.0 * 3.0 + 6.0 * 1.0) / 8.0 - (1.0 * 0.0 + 3.0 * 4.0) / 4.0;
        assert!((tau1.value - expected).abs() < 1e-12);
        assert_eq!(blue_4seq_scenario_b(&s).unwrap()[0], *tau1);
    }

    #[test]
    fn four_sequence_tau2_equal_sizes() {
        let s = summary(&[
            (AA, 4, [0.0, 1.0], [1.0, 1.0, 0.0]),
            (AB, 4, [0.0, 2.0], [1.0, 1.0, 0.0]),
            (BA, 4, [0.0, 3.0], [1.0, 1.0, 0.0]),
            (BB, 4, [0.0, 5.0], [1.0, 1.0, 0.0]),
        ]);
        let out = blue_4seq_scenario_b(&s).unwrap();
        assert!((out[1].value - ((1.0 + 3.0) / 2.0 - (2.0 + 5.0) / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn constant_data_gives_zero() {
        let s = summary(&[
            (AA, 3, [2.0, 2.0], [1.0, 1.0, 0.2]),
            (AB, 4, [2.0, 2.0], [1.0, 1.0, 0.2]),
            (BA, 5, [2.0, 2.0], [1.0, 1.0, 0.2]),
            (BB, 6, [2.0, 2.0], [1.0, 1.0, 0.2]),
        ]);
        assert!(values(&blue_4seq_scenario_b(&s).unwrap()).iter().all(|v| v.abs() < 1e-12));
        assert!(blue_4seq_scenario_c(&s).unwrap().value.abs() < 1e-12);
        assert!(values(&blue_2seq_scenario_a(&s).unwrap()).iter().all(|v| v.abs() < 1e-12));
        assert!(values(&blue_2seq_scenario_b(&s).unwrap()).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn symmetric_qp_weights() {
        let s = summary(&[
            (AA, 5, [0.0, 0.0], [1.0, 1.0, 0.0]),
            (AB, 5, [0.0, 0.0], [1.0, 1.0, 0.0]),
            (BA, 5, [0.0, 0.0], [1.0, 1.0, 0.0]),
            (BB, 5, [0.0, 0.0], [1.0, 1.0, 0.0]),
        ]);
        let w = blue_4seq_scenario_c(&s).unwrap().weights;
        let w1 = |z: &str| w[&seq(z)][0];
        let w2 = |z: &str| w[&seq(z)][1];
        assert!((w1(AA) - w1(AB)).abs() < 1e-12);
        assert!((w1(AA) + w1(BA)).abs() < 1e-12);
        assert!((w1(AA) + w1(BB)).abs() < 1e-12);
        assert!((w2(AA) - w2(BA)).abs() < 1e-12);
        assert!((w2(AA) + w2(AB)).abs() < 1e-12);
        assert!((w2(AA) + w2(BB)).abs() < 1e-12);
        assert!((w1(AA) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn two_sequence_hand_cases() {
        let s = summary(&[
            (AB, 3, [3.0, 0.5], [1.0, 1.0, 0.0]),
            (BA, 3, [1.0, 2.0], [1.0, 1.0, 0.0]),
        ]);
        assert_eq!(blue_2seq_scenario_a(&s).unwrap()[0].value, 2.0);
        assert_eq!(blue_2seq_scenario_b(&s).unwrap()[1].value, 1.5);
    }

    #[test]
    fn two_sequence_p_values() {
        let s = summary(&[
            (AB, 4, [1.0, 0.0], [2.0, 2.0, 0.5]),
            (BA, 4, [0.0, 3.0], [2.0, 2.0, 0.5]),
        ]);
        let (_, p) = blue_2seq_scenario_c(&s).unwrap();
        assert!((p - 0.5).abs() < 1e-12);

        let s = summary(&[
            (AB, 4, [1.0, 0.0], [2.0, 1.0, -1.0]),
            (BA, 6, [0.0, 3.0], [3.0, 0.5, -0.5]),
        ]);
        let (est, p) = blue_2seq_scenario_c(&s).unwrap();
        assert!(p.abs() < 1e-7);
        assert!((est.value - 3.0).abs() < 1e-6);
    }

    #[test]
    fn conservative_tau1_variance() {
        let s = summary(&[
            (AA, 4, [0.0, 0.0], [4.0, 1.0, 0.0]),
            (AB, 4, [0.0, 0.0], [4.0, 1.0, 0.0]),
            (BA, 4, [0.0, 0.0], [1.0, 1.0, 0.0]),
            (BB, 4, [0.0, 0.0], [1.0, 1.0, 0.0]),
        ]);
        let v = conservative_variances(&s, TwoPeriodLayout::FourSequence, Scenario::A).unwrap();
        assert_eq!(v[0].0, "tau1");
        assert!((v[0].1 - 0.625).abs() < 1e-12);
        let zero = summary(&[
            (AB, 4, [0.0, 0.0], [0.0, 0.0, 0.0]),
            (BA, 4, [0.0, 0.0], [0.0, 0.0, 0.0]),
        ]);
        let v = conservative_variances(&zero, TwoPeriodLayout::TwoSequence, Scenario::B).unwrap();
        assert!(v.iter().all(|(_, x)| *x == 0.0));
    }

    #[test]
    fn intervals_use_conservative_variance() {
        let s = summary(&[
            (AA, 4, [1.0, 0.0], [4.0, 1.0, 0.0]),
            (AB, 4, [1.0, 0.0], [4.0, 1.0, 0.0]),
            (BA, 4, [0.0, 0.0], [1.0, 1.0, 0.0]),
            (BB, 4, [0.0, 0.0], [1.0, 1.0, 0.0]),
        ]);
        let ci = conservative_intervals(&s, TwoPeriodLayout::FourSequence, Scenario::A, 0.95).unwrap();
        assert_eq!(ci[0].value, 1.0);
        assert!((ci[0].se - 0.625f64.sqrt()).abs() < 1e-12);
        assert!((ci[0].upper - (1.0 + 1.959963984540054 * ci[0].se)).abs() < 1e-9);
    }

    #[test]
    fn layout_detection() {
        let four: Vec<_> = [AA, AB, BA, BB].iter().map(|z| seq(z)).collect();
        assert_eq!(TwoPeriodLayout::detect(&four), Some(TwoPeriodLayout::FourSequence));
        let two = [seq(AB), seq(BA)];
        assert_eq!(TwoPeriodLayout::detect(&two), Some(TwoPeriodLayout::TwoSequence));
        assert_eq!(TwoPeriodLayout::detect(&[seq(AA)]), None);
    }

    #[test]
    fn missing_group_is_reported() {
        let s = summary(&[(AB, 3, [0.0, 0.0], [1.0, 1.0, 0.0])]);
        assert!(matches!(blue_2seq_scenario_a(&s), Err(Error::MissingSequence(_))));
    }
}
