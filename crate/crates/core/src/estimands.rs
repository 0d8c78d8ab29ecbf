//! Linear causal estimands `θ(W) = Σ_z W(z) Ȳ(z)` and tables of potential
//! outcomes to evaluate them on.
//!
//! Coefficients for all sequences are stored side by side in one `K × T|S|`
//! matrix whose column `s·T + (t − 1)` belongs to period `t` of the `s`-th
//! scope sequence. The same layout is used for the coefficient vector `γ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sequences::{full_sequence_set, Treatment, TreatmentSequence};

fn check_scope(horizon: usize, scope: &[TreatmentSequence]) -> Result<()> {
    if scope.is_empty() {
        return Err(Error::Shape("empty sequence scope".into()));
    }
    if let Some(z) = scope.iter().find(|z| z.len() != horizon) {
        return Err(Error::Shape(format!(
            "scope sequence {z} has length {}, horizon is {horizon}",
            z.len()
        )));
    }
    if !scope.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Shape("scope must be sorted and free of duplicates".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimandSpec {
    horizon: usize,
    scope: Vec<TreatmentSequence>,
    labels: Vec<String>,
    coefficients: DMatrix<f64>,
}

impl EstimandSpec {
    /// Builds a spec from its stacked coefficient matrix (`K × T|S|`).
    pub fn from_coefficients(
        horizon: usize,
        scope: Vec<TreatmentSequence>,
        labels: Vec<String>,
        coefficients: DMatrix<f64>,
    ) -> Result<Self> {
        check_scope(horizon, &scope)?;
        if coefficients.ncols() != horizon * scope.len() {
            return Err(Error::Shape(format!(
                "coefficient matrix has {} columns, expected {}",
                coefficients.ncols(),
                horizon * scope.len()
            )));
        }
        if coefficients.nrows() == 0 || labels.len() != coefficients.nrows() {
            return Err(Error::Shape(format!(
                "{} labels for {} estimand rows",
                labels.len(),
                coefficients.nrows()
            )));
        }
        Ok(EstimandSpec {
            horizon,
            scope,
            labels,
            coefficients,
        })
    }

    /// Builds a spec from per-sequence `K × T` weight matrices; sequences not
    /// listed get zero weight.
    pub fn from_weights(
        horizon: usize,
        scope: Vec<TreatmentSequence>,
        labels: Vec<String>,
        weights: &[(TreatmentSequence, DMatrix<f64>)],
    ) -> Result<Self> {
        check_scope(horizon, &scope)?;
        let k = labels.len();
        let mut coefficients = DMatrix::zeros(k, horizon * scope.len());
        for (z, w) in weights {
            if w.nrows() != k || w.ncols() != horizon {
                return Err(Error::Shape(format!(
                    "weight matrix for {z} is {}x{}, expected {k}x{horizon}",
                    w.nrows(),
                    w.ncols()
                )));
            }
            let s = scope
                .binary_search(z)
                .map_err(|_| Error::Shape(format!("sequence {z} is outside the scope")))?;
            let mut block = coefficients.view_mut((0, s * horizon), (k, horizon));
            block += w;
        }
        EstimandSpec::from_coefficients(horizon, scope, labels, coefficients)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn scope(&self) -> &[TreatmentSequence] {
        &self.scope
    }

    pub fn dimension(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.dimension() {
            return Err(Error::Shape(format!(
                "{} labels for {} estimand rows",
                labels.len(),
                self.dimension()
            )));
        }
        self.labels = labels;
        Ok(self)
    }

    /// `W(z)`, or `None` when `z` is outside the scope.
    pub fn weight(&self, z: &TreatmentSequence) -> Option<DMatrix<f64>> {
        let s = self.scope.binary_search(z).ok()?;
        Some(
            self.coefficients
                .view((0, s * self.horizon), (self.dimension(), self.horizon))
                .into_owned(),
        )
    }

    pub fn is_zero(&self) -> bool {
        self.coefficients.iter().all(|&v| v == 0.0)
    }

    /// Expresses the spec over a larger (or reordered) scope. Sequences
    /// absent from the current scope get zero weight; sequences with nonzero
    /// weight must all be present in the new scope.
    pub fn rescoped(&self, scope: &[TreatmentSequence]) -> Result<Self> {
        check_scope(self.horizon, scope)?;
        let t = self.horizon;
        let mut coefficients = DMatrix::zeros(self.dimension(), t * scope.len());
        for (s, z) in self.scope.iter().enumerate() {
            let block = self.coefficients.view((0, s * t), (self.dimension(), t));
            match scope.binary_search(z) {
                Ok(target) => coefficients
                    .view_mut((0, target * t), (self.dimension(), t))
                    .copy_from(&block),
                Err(_) if block.iter().all(|&v| v == 0.0) => {}
                Err(_) => {
                    return Err(Error::Shape(format!(
                        "estimand puts weight on {z}, which is outside the scope"
                    )))
                }
            }
        }
        EstimandSpec::from_coefficients(t, scope.to_vec(), self.labels.clone(), coefficients)
    }

    fn same_shape(&self, other: &EstimandSpec) -> bool {
        self.horizon == other.horizon && self.scope == other.scope
    }
}

/// Sequences in `scope` whose first `head.len()` letters equal `head`.
fn completions<'a>(
    scope: &'a [TreatmentSequence],
    head: &'a TreatmentSequence,
) -> impl Iterator<Item = (usize, &'a TreatmentSequence)> + 'a {
    scope.iter().enumerate().filter(move |(_, z)| z.starts_with(head))
}

/// Contrast at period `t`: average of `Ȳ_t` over scope sequences starting
/// with `plus` minus the average over those starting with `minus`.
fn period_contrast(
    t: usize,
    plus: &TreatmentSequence,
    minus: &TreatmentSequence,
    scope: &[TreatmentSequence],
    label: String,
) -> Result<EstimandSpec> {
    let horizon = scope.first().map(|z| z.len()).unwrap_or(0);
    check_scope(horizon, scope)?;
    if t == 0 || t > horizon {
        return Err(Error::Index { index: t, horizon });
    }
    let mut coefficients = DMatrix::zeros(1, horizon * scope.len());
    for (head, sign) in [(plus, 1.0), (minus, -1.0)] {
        let matches: Vec<usize> = completions(scope, head).map(|(s, _)| s).collect();
        if matches.is_empty() {
            return Err(Error::Shape(format!(
                "no sequence in scope starts with {head}"
            )));
        }
        let w = sign / matches.len() as f64;
        for s in matches {
            coefficients[(0, s * horizon + t - 1)] += w;
        }
    }
    EstimandSpec::from_coefficients(horizon, scope.to_vec(), vec![label], coefficients)
}

pub fn instantaneous_label(t: usize, history: &TreatmentSequence) -> String {
    if history.is_empty() {
        format!("tau{t}")
    } else {
        format!("tau{t}({history})")
    }
}

pub fn carryover_label(
    t: usize,
    k: usize,
    prefix: &TreatmentSequence,
    suffix: &TreatmentSequence,
) -> String {
    if prefix.is_empty() {
        format!("carry{t}^{k}({suffix})")
    } else {
        format!("carry{t}^{k}({prefix}|{suffix})")
    }
}

/// `τ_t(history) = Ȳ_t(history·A) − Ȳ_t(history·B)`, each mean averaged
/// uniformly over the scope sequences that extend it.
pub fn instantaneous_effect(
    t: usize,
    history: &TreatmentSequence,
    scope: &[TreatmentSequence],
) -> Result<EstimandSpec> {
    if t == 0 || history.len() + 1 != t {
        return Err(Error::Shape(format!(
            "history {history} has length {}, period {t} needs length {}",
            history.len(),
            t.saturating_sub(1)
        )));
    }
    period_contrast(
        t,
        &history.pushed(Treatment::A),
        &history.pushed(Treatment::B),
        scope,
        instantaneous_label(t, history),
    )
}

/// `τ_t^k`: contrast of `Ȳ_t(prefix·A·suffix)` and `Ȳ_t(prefix·B·suffix)`.
/// With `k = 0` this is the instantaneous effect with history `prefix`.
pub fn carryover_effect(
    t: usize,
    k: usize,
    prefix: &TreatmentSequence,
    suffix: &TreatmentSequence,
    scope: &[TreatmentSequence],
) -> Result<EstimandSpec> {
    if k == 0 {
        if !suffix.is_empty() {
            return Err(Error::Shape("order-0 carryover takes an empty suffix".into()));
        }
        return instantaneous_effect(t, prefix, scope);
    }
    if k >= t || prefix.len() + 1 + k != t || suffix.len() != k {
        return Err(Error::Shape(format!(
            "carryover at period {t} of order {k} needs prefix length {} and suffix length {k}, got {} and {}",
            t.saturating_sub(k + 1),
            prefix.len(),
            suffix.len()
        )));
    }
    period_contrast(
        t,
        &prefix.pushed(Treatment::A).concat(suffix),
        &prefix.pushed(Treatment::B).concat(suffix),
        scope,
        carryover_label(t, k, prefix, suffix),
    )
}

/// All `2^{t−1}` conditional instantaneous effects at period `t`, stacked in
/// lexicographic order of the history.
pub fn all_instantaneous(t: usize, scope: &[TreatmentSequence]) -> Result<EstimandSpec> {
    if t == 1 {
        return instantaneous_effect(1, &TreatmentSequence::empty(), scope);
    }
    let specs = full_sequence_set(t - 1)?
        .iter()
        .map(|h| instantaneous_effect(t, h, scope))
        .collect::<Result<Vec<_>>>()?;
    stack(&specs)
}

/// Convex combination of specs with identical shapes.
pub fn marginal_effect(specs: &[EstimandSpec], weights: &[f64]) -> Result<EstimandSpec> {
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::Parameter("marginal weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "marginal weights sum to {total}, expected 1"
        )));
    }
    let mut combined = linear_combination(specs, weights)?;
    if specs.len() == 1 {
        return Ok(combined);
    }
    let k = combined.dimension();
    combined.labels = (0..k)
        .map(|row| {
            let parts: Vec<String> = specs
                .iter()
                .zip(weights)
                .filter(|(_, &w)| w != 0.0)
                .map(|(s, w)| format!("{w}*{}", s.labels[row]))
                .collect();
            format!("marginal[{}]", parts.join(" + "))
        })
        .collect();
    Ok(combined)
}

/// `Σ_j a_j · spec_j`; labels are taken from the first spec.
pub fn linear_combination(specs: &[EstimandSpec], coefs: &[f64]) -> Result<EstimandSpec> {
    let first = specs
        .first()
        .ok_or_else(|| Error::Shape("no estimands to combine".into()))?;
    if specs.len() != coefs.len() {
        return Err(Error::Shape(format!(
            "{} estimands but {} coefficients",
            specs.len(),
            coefs.len()
        )));
    }
    let mut coefficients = DMatrix::zeros(first.dimension(), first.coefficients.ncols());
    for (spec, &a) in specs.iter().zip(coefs) {
        if !spec.same_shape(first) || spec.dimension() != first.dimension() {
            return Err(Error::Shape("estimands have different shapes".into()));
        }
        coefficients += &spec.coefficients * a;
    }
    Ok(EstimandSpec {
        coefficients,
        ..first.clone()
    })
}

/// Concatenates rows of several specs over the same scope.
pub fn stack(specs: &[EstimandSpec]) -> Result<EstimandSpec> {
    let first = specs
        .first()
        .ok_or_else(|| Error::Shape("no estimands to stack".into()))?;
    if specs.iter().any(|s| !s.same_shape(first)) {
        return Err(Error::Shape("stacked estimands must share horizon and scope".into()));
    }
    let k: usize = specs.iter().map(|s| s.dimension()).sum();
    let mut coefficients = DMatrix::zeros(k, first.coefficients.ncols());
    let mut labels = Vec::with_capacity(k);
    let mut row = 0;
    for s in specs {
        coefficients
            .rows_mut(row, s.dimension())
            .copy_from(&s.coefficients);
        labels.extend(s.labels.iter().cloned());
        row += s.dimension();
    }
    EstimandSpec::from_coefficients(first.horizon, first.scope.clone(), labels, coefficients)
}

/// The five two-period effects `τ₁, τ₂(A), τ₂(B), τ₂¹(A), τ₂¹(B)` over the
/// full two-period scope.
pub fn two_period_effects() -> EstimandSpec {
    let scope = full_sequence_set(2).expect("horizon 2");
    let a = TreatmentSequence::new(vec![Treatment::A]);
    let b = TreatmentSequence::new(vec![Treatment::B]);
    let empty = TreatmentSequence::empty();
    stack(&[
        instantaneous_effect(1, &empty, &scope).expect("valid"),
        instantaneous_effect(2, &a, &scope).expect("valid"),
        instantaneous_effect(2, &b, &scope).expect("valid"),
        carryover_effect(2, 1, &empty, &a, &scope).expect("valid"),
        carryover_effect(2, 1, &empty, &b, &scope).expect("valid"),
    ])
    .expect("same scope")
}

/// Potential outcomes `Y_i(z) ∈ ℝ^T` for every unit and every scope sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialOutcomeTable {
    horizon: usize,
    scope: Vec<TreatmentSequence>,
    /// One `N × T` matrix per scope sequence.
    outcomes: Vec<DMatrix<f64>>,
}

impl PotentialOutcomeTable {
    pub fn new(
        horizon: usize,
        scope: Vec<TreatmentSequence>,
        outcomes: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        check_scope(horizon, &scope)?;
        if outcomes.len() != scope.len() {
            return Err(Error::Shape(format!(
                "{} outcome blocks for {} sequences",
                outcomes.len(),
                scope.len()
            )));
        }
        let n = outcomes[0].nrows();
        if n == 0 {
            return Err(Error::Shape("table has no units".into()));
        }
        for (z, block) in scope.iter().zip(&outcomes) {
            if block.nrows() != n || block.ncols() != horizon {
                return Err(Error::Shape(format!(
                    "outcome block for {z} is {}x{}, expected {n}x{horizon}",
                    block.nrows(),
                    block.ncols()
                )));
            }
            if block.iter().any(|v| !v.is_finite()) {
                return Err(Error::Shape(format!("non-finite outcome for {z}")));
            }
        }
        Ok(PotentialOutcomeTable {
            horizon,
            scope,
            outcomes,
        })
    }

    /// Table with every entry produced by `f(unit, sequence, period)`.
    pub fn from_fn(
        horizon: usize,
        scope: Vec<TreatmentSequence>,
        units: usize,
        mut f: impl FnMut(usize, &TreatmentSequence, usize) -> f64,
    ) -> Result<Self> {
        let outcomes = scope
            .iter()
            .map(|z| DMatrix::from_fn(units, horizon, |i, t| f(i, z, t + 1)))
            .collect();
        PotentialOutcomeTable::new(horizon, scope, outcomes)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn scope(&self) -> &[TreatmentSequence] {
        &self.scope
    }

    pub fn units(&self) -> usize {
        self.outcomes[0].nrows()
    }

    /// `N × T` outcomes under sequence `z`.
    pub fn outcomes(&self, z: &TreatmentSequence) -> Option<&DMatrix<f64>> {
        self.scope.binary_search(z).ok().map(|s| &self.outcomes[s])
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.outcomes
    }

    pub fn unit_outcome(&self, unit: usize, z: &TreatmentSequence) -> Option<DVector<f64>> {
        self.outcomes(z).map(|m| m.row(unit).transpose())
    }

    /// `Ȳ(z)`.
    pub fn mean(&self, z: &TreatmentSequence) -> Option<DVector<f64>> {
        self.outcomes(z).map(column_means)
    }

    /// Finite-population covariance `S²(z)` with divisor `N − 1`.
    pub fn covariance(&self, z: &TreatmentSequence) -> Result<DMatrix<f64>> {
        let block = self
            .outcomes(z)
            .ok_or_else(|| Error::MissingSequence(z.to_string()))?;
        if block.nrows() < 2 {
            return Err(Error::DegenerateSample("covariance needs at least two units".into()));
        }
        Ok(sample_covariance(block))
    }

    /// Stacked means `γ̄` in the crate-wide column layout.
    pub fn stacked_means(&self) -> DVector<f64> {
        let t = self.horizon;
        let mut g = DVector::zeros(t * self.scope.len());
        for (s, block) in self.outcomes.iter().enumerate() {
            g.rows_mut(s * t, t).copy_from(&column_means(block));
        }
        g
    }

    /// Unit `i`'s outcomes under every scope sequence, stacked like `γ`.
    pub fn unit_stack(&self, unit: usize) -> DVector<f64> {
        let t = self.horizon;
        let mut g = DVector::zeros(t * self.scope.len());
        for (s, block) in self.outcomes.iter().enumerate() {
            g.rows_mut(s * t, t).copy_from(&block.row(unit).transpose());
        }
        g
    }

    fn check_spec(&self, spec: &EstimandSpec) -> Result<()> {
        if spec.horizon != self.horizon || spec.scope != self.scope {
            return Err(Error::Shape(
                "estimand and outcome table have different scopes".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn column_means(block: &DMatrix<f64>) -> DVector<f64> {
    let n = block.nrows() as f64;
    block.row_sum().transpose() / n
}

/// Covariance of the rows of `block`, divisor `rows − 1`.
pub(crate) fn sample_covariance(block: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = column_means(block);
    let mut centered = block.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    centered.transpose() * centered / (block.nrows() as f64 - 1.0)
}

/// `θ(W)` evaluated on the table.
pub fn true_value(spec: &EstimandSpec, table: &PotentialOutcomeTable) -> Result<DVector<f64>> {
    table.check_spec(spec)?;
    Ok(&spec.coefficients * table.stacked_means())
}

/// `S²(θ(W))`: covariance of the individual effects `θ_i(W)` across units.
pub fn individual_effect_covariance(
    spec: &EstimandSpec,
    table: &PotentialOutcomeTable,
) -> Result<DMatrix<f64>> {
    table.check_spec(spec)?;
    let n = table.units();
    if n < 2 {
        return Err(Error::DegenerateSample(
            "individual effect covariance needs at least two units".into(),
        ));
    }
    let mut effects = DMatrix::zeros(n, spec.dimension());
    for i in 0..n {
        let theta = &spec.coefficients * table.unit_stack(i);
        effects.row_mut(i).copy_from(&theta.transpose());
    }
    Ok(sample_covariance(&effects))
}
