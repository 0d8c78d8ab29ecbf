//! Assumption-consistent potential-outcome tables, Monte Carlo studies over
//! complete randomizations, and exact randomization audits.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{assemble, RestrictionMatrix, Scenario};
use crate::error::{Error, Result};
use crate::estimands::{true_value, EstimandSpec, PotentialOutcomeTable};
use crate::rwls::{
    estimate, feasible_rwls, sequence_means, solve_kkt, FitOptions, ObservedDataset, WeightChoice,
    WeightModel,
};
use crate::sequences::{enumerate_assignments, full_sequence_set, sample_assignment_with, Assignment, CrossoverDesign};

/// How a two-period table is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Independent bivariate normal draws per unit and sequence, with means
    /// indexed `AA, AB, BA, BB`, then overwritten to satisfy the scenario.
    GaussianModel {
        beta1: [f64; 4],
        beta2: [f64; 4],
        rho: f64,
    },
    /// Two standard normal baselines shifted by fixed effects; satisfies
    /// all three scenarios.
    ConstantEffect {
        tau1: f64,
        tau2_b: f64,
        carry_a: f64,
        carry_b: f64,
    },
}

impl GeneratorKind {
    pub fn gaussian_default() -> Self {
        GeneratorKind::GaussianModel {
            beta1: [0.0, 0.0, 1.0, 1.0],
            beta2: [0.0, 1.0, 0.0, 1.0],
            rho: 0.3,
        }
    }

    pub fn constant_default() -> Self {
        GeneratorKind::ConstantEffect {
            tau1: 1.0,
            tau2_b: 1.0,
            carry_a: 0.0,
            carry_b: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioGenerator {
    #[serde(flatten)]
    pub kind: GeneratorKind,
    pub scenario: Scenario,
    pub seed: u64,
}

impl ScenarioGenerator {
    pub fn new(kind: GeneratorKind, scenario: Scenario, seed: u64) -> Result<Self> {
        if let GeneratorKind::GaussianModel { rho, .. } = kind {
            if !(rho > -1.0 && rho < 1.0) {
                return Err(Error::Parameter(format!("correlation {rho} is not in (-1, 1)")));
            }
        }
        Ok(ScenarioGenerator { kind, scenario, seed })
    }
}

/// Draws a two-period table over `AA, AB, BA, BB` for `units` units.
#[allow(clippy::needless_range_loop)]
pub fn generate_table(generator: &ScenarioGenerator, units: usize) -> Result<PotentialOutcomeTable> {
    if units < 2 {
        return Err(Error::Parameter(format!("need at least 2 units, got {units}")));
    }
    let generator = ScenarioGenerator::new(generator.kind.clone(), generator.scenario, generator.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(generator.seed);
    // y[g][t] is the N-vector for sequence g (AA, AB, BA, BB) at period t.
    let mut y = vec![vec![vec![0.0; units]; 2]; 4];
    match generator.kind {
        GeneratorKind::GaussianModel { beta1, beta2, rho } => {
            let scale = (1.0 - rho * rho).sqrt();
            for i in 0..units {
                for g in 0..4 {
                    let e1: f64 = rng.sample(StandardNormal);
                    let e2: f64 = rng.sample(StandardNormal);
                    y[g][0][i] = beta1[g] + e1;
                    y[g][1][i] = beta2[g] + rho * e1 + scale * e2;
                }
            }
            let (aa, ab, ba, bb) = (0, 1, 2, 3);
            for i in 0..units {
                y[ab][0][i] = y[aa][0][i];
                y[bb][0][i] = y[ba][0][i];
                if generator.scenario != Scenario::A {
                    y[ba][1][i] = y[aa][1][i];
                    y[bb][1][i] = y[ab][1][i];
                }
                if generator.scenario == Scenario::C {
                    let shift = y[aa][0][i] - y[ba][0][i];
                    y[aa][1][i] = shift + y[ab][1][i];
                    y[ba][1][i] = shift + y[bb][1][i];
                }
            }
        }
        GeneratorKind::ConstantEffect {
            tau1,
            tau2_b,
            carry_a,
            carry_b,
        } => {
            for i in 0..units {
                let base1: f64 = rng.sample(StandardNormal);
                let base2: f64 = rng.sample(StandardNormal);
                let y2_ba = base2 + tau2_b;
                y[0][0][i] = base1 + tau1;
                y[1][0][i] = base1 + tau1;
                y[2][0][i] = base1;
                y[3][0][i] = base1;
                y[0][1][i] = y2_ba + carry_a;
                y[1][1][i] = base2 + carry_b;
                y[2][1][i] = y2_ba;
                y[3][1][i] = base2;
            }
        }
    }
    let scope = full_sequence_set(2)?;
    let outcomes = y
        .iter()
        .map(|g| DMatrix::from_fn(units, 2, |i, t| g[t][i]))
        .collect();
    PotentialOutcomeTable::new(2, scope, outcomes)
}

/// A table over every sequence of length `horizon` that satisfies the
/// scenario's assumptions unit by unit: period-`t` outcomes depend on the
/// prefix (scenario a), on the trailing window of length `k` from period `k`
/// on (b), and in (c) on the window through a unit-specific effect plus a
/// period-specific baseline.
pub fn consistent_table<R: Rng + ?Sized>(
    scenario: Scenario,
    horizon: usize,
    k: Option<usize>,
    units: usize,
    rng: &mut R,
) -> Result<PotentialOutcomeTable> {
    let scope = full_sequence_set(horizon)?;
    if scenario.needs_order() && k.is_none_or(|k| k == 0 || k > horizon) {
        return Err(Error::Parameter(format!(
            "scenario {scenario} needs a carryover order in 1..={horizon}"
        )));
    }
    let draw = |rng: &mut R| -> Vec<f64> { (0..units).map(|_| rng.sample(StandardNormal)).collect() };
    let baseline: Vec<Vec<f64>> = (0..horizon).map(|_| draw(rng)).collect();
    let mut by_key: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    let mut by_window: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut outcomes = Vec::with_capacity(scope.len());
    for z in &scope {
        let mut block = DMatrix::zeros(units, horizon);
        for t in 1..=horizon {
            let key = scenario.outcome_key(t, k, z).to_string();
            let values: Vec<f64> = match (scenario, k) {
                (Scenario::C, Some(k)) if t >= k => {
                    let effect = by_window.entry(key).or_insert_with(|| draw(rng));
                    effect.iter().zip(&baseline[t - 1]).map(|(e, b)| e + b).collect()
                }
                _ => by_key.entry((t, key)).or_insert_with(|| draw(rng)).clone(),
            };
            for (i, v) in values.into_iter().enumerate() {
                block[(i, t - 1)] = v;
            }
        }
        outcomes.push(block);
    }
    PotentialOutcomeTable::new(horizon, scope, outcomes)
}

/// [`consistent_table`] driven by a ChaCha8 generator seeded with `seed`.
pub fn seeded_consistent_table(
    scenario: Scenario,
    horizon: usize,
    k: Option<usize>,
    units: usize,
    seed: u64,
) -> Result<PotentialOutcomeTable> {
    consistent_table(scenario, horizon, k, units, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// The assignment drawn in replication `r`: stream `r` of a ChaCha8
/// generator seeded with `seed`.
pub fn replication_assignment(design: &CrossoverDesign, seed: u64, r: usize) -> Assignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    sample_assignment_with(design, &mut rng)
}

/// Everything a Monte Carlo study needs besides the table.
#[derive(Clone, Debug)]
pub struct Study {
    pub design: CrossoverDesign,
    pub scenario: Scenario,
    pub k: Option<usize>,
    pub specs: Vec<EstimandSpec>,
    pub replications: usize,
    pub weights: WeightChoice,
    pub options: FitOptions,
    pub level: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimandSummary {
    pub label: String,
    pub truth: f64,
    /// Forced to zero by the restrictions in every replication.
    pub restricted: bool,
    pub bias: Vec<f64>,
    pub mean_bias: f64,
    pub empirical_variance: f64,
    /// Monte Carlo standard error of `empirical_variance`.
    pub variance_mc_se: f64,
    pub mean_ehw_variance: f64,
    pub coverage: f64,
    /// Randomization variance of the estimator with the true covariances
    /// as fixed weights, including the individual-effect term.
    pub oracle_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McReport {
    pub scenario: Scenario,
    pub k: Option<usize>,
    pub units: usize,
    pub replications: usize,
    pub seed: u64,
    pub level: f64,
    pub estimands: Vec<EstimandSummary>,
}

impl McReport {
    pub fn estimand(&self, label: &str) -> Option<&EstimandSummary> {
        self.estimands.iter().find(|e| e.label == label)
    }
}

/// One replication: `(point − truth, EHW variance, covered, restricted)`
/// per estimand coordinate.
type Replicate = Vec<(f64, f64, bool, bool)>;

/// Runs the study on a table drawn from `generator` with as many units as
/// the design has.
pub fn run_monte_carlo(generator: &ScenarioGenerator, study: &Study) -> Result<McReport> {
    let table = generate_table(generator, study.design.total_units())?;
    monte_carlo_on_table(&table, study)
}

/// Replicates complete randomization on a fixed table. Replication `r`
/// draws its assignment from the ChaCha8 stream `r` of the study seed, so
/// results do not depend on scheduling.
pub fn monte_carlo_on_table(table: &PotentialOutcomeTable, study: &Study) -> Result<McReport> {
    let design = &study.design;
    if table.units() != design.total_units() || table.horizon() != design.horizon() {
        return Err(Error::Shape(format!(
            "table has {} units over {} periods, design has {} over {}",
            table.units(),
            table.horizon(),
            design.total_units(),
            design.horizon()
        )));
    }
    if study.replications < 2 {
        return Err(Error::Parameter("need at least 2 replications".into()));
    }
    let restriction = assemble(study.scenario, design.horizon(), design.scope(), study.k)?;
    // Refuse up front, with the rank diagnostics, if the pair is not identified.
    crate::identification::is_identifiable(design, &restriction)?.into_result()?;

    let mut truths = Vec::new();
    let mut labels = Vec::new();
    for spec in &study.specs {
        let rescoped = spec.rescoped(table.scope())?;
        truths.extend(true_value(&rescoped, table)?.iter().cloned());
        labels.extend(spec.labels().iter().cloned());
    }
    let oracle = oracle_variances(table, design, &restriction, &study.specs)?;

    let replicates: Vec<Replicate> = (0..study.replications)
        .into_par_iter()
        .map(|r| {
            let assignment = replication_assignment(design, study.seed, r);
            let dataset = ObservedDataset::from_table(table, &assignment)?;
            let fit = feasible_rwls(&dataset, design, &restriction, &study.weights, study.options)?;
            let mut out = Vec::with_capacity(truths.len());
            let mut j = 0;
            for spec in &study.specs {
                let est = estimate(&fit, spec, study.level)?;
                for c in 0..est.len() {
                    let truth = truths[j];
                    out.push((
                        est.point[c] - truth,
                        est.covariance[(c, c)],
                        est.covers(c, truth),
                        est.restricted[c],
                    ));
                    j += 1;
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let reps = study.replications as f64;
    let estimands = labels
        .into_iter()
        .enumerate()
        .map(|(j, label)| {
            let bias: Vec<f64> = replicates.iter().map(|r| r[j].0).collect();
            let mean_bias = bias.iter().sum::<f64>() / reps;
            let m2 = bias.iter().map(|b| (b - mean_bias).powi(2)).sum::<f64>() / reps;
            let m4 = bias.iter().map(|b| (b - mean_bias).powi(4)).sum::<f64>() / reps;
            EstimandSummary {
                label,
                truth: truths[j],
                restricted: replicates.iter().all(|r| r[j].3),
                mean_bias,
                empirical_variance: m2 * reps / (reps - 1.0),
                variance_mc_se: ((m4 - m2 * m2).max(0.0) / reps).sqrt(),
                mean_ehw_variance: replicates.iter().map(|r| r[j].1).sum::<f64>() / reps,
                coverage: replicates.iter().filter(|r| r[j].2).count() as f64 / reps,
                oracle_variance: oracle[j],
                bias,
            }
        })
        .collect();
    Ok(McReport {
        scenario: study.scenario,
        k: study.k,
        units: design.total_units(),
        replications: study.replications,
        seed: study.seed,
        level: study.level,
        estimands,
    })
}

fn oracle_variances(
    table: &PotentialOutcomeTable,
    design: &CrossoverDesign,
    restriction: &RestrictionMatrix,
    specs: &[EstimandSpec],
) -> Result<Vec<f64>> {
    let weights = WeightModel::from_table(table, design)?;
    let solution = solve_kkt(design, &weights, restriction)?;
    let mut out = Vec::new();
    for spec in specs {
        let v = solution.oracle_covariance(spec, table)?;
        out.extend((0..spec.dimension()).map(|j| v[(j, j)].max(0.0)));
    }
    Ok(out)
}

/// `scenario,estimand,replication,bias` rows for violin plots.
pub fn emit_bias_distribution(report: &McReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(["scenario", "estimand", "replication", "bias"]).map_err(io)?;
    for e in &report.estimands {
        for (r, b) in e.bias.iter().enumerate() {
            w.write_record([
                report.scenario.to_string(),
                e.label.clone(),
                r.to_string(),
                b.to_string(),
            ])
            .map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditRow {
    pub label: String,
    pub truth: f64,
    pub exact_mean: f64,
    pub exact_variance: f64,
    /// Closed-form randomization variance of the same fixed-weight estimator.
    pub formula_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub assignments: u128,
    pub rows: Vec<AuditRow>,
}

/// Exact mean and variance of the fixed-weight estimator over every
/// complete randomization of the design.
pub fn exact_randomization_audit(
    table: &PotentialOutcomeTable,
    design: &CrossoverDesign,
    restriction: &RestrictionMatrix,
    specs: &[EstimandSpec],
    weights: &WeightModel,
) -> Result<AuditReport> {
    let solution = solve_kkt(design, weights, restriction)?;
    let mut coefficient_rows = Vec::new();
    let mut rows = Vec::new();
    for spec in specs {
        let rescoped = spec.rescoped(table.scope())?;
        let truth = true_value(&rescoped, table)?;
        let formula = solution.oracle_covariance(spec, table)?;
        let b = spec.rescoped(design.scope())?;
        for j in 0..spec.dimension() {
            coefficient_rows.push(b.coefficients().row(j).into_owned());
            rows.push(AuditRow {
                label: spec.labels()[j].clone(),
                truth: truth[j],
                exact_mean: 0.0,
                exact_variance: 0.0,
                formula_variance: formula[(j, j)],
            });
        }
    }
    let mut sums = vec![0.0; rows.len()];
    let mut squares = vec![0.0; rows.len()];
    let mut count: u128 = 0;
    for assignment in enumerate_assignments(design)? {
        let dataset = ObservedDataset::from_table(table, &assignment)?;
        let gamma = solution.gamma(&sequence_means(&dataset))?;
        for (j, b) in coefficient_rows.iter().enumerate() {
            let v = (b * &gamma)[(0, 0)];
            sums[j] += v;
            squares[j] += v * v;
        }
        count += 1;
    }
    let n = count as f64;
    for (j, row) in rows.iter_mut().enumerate() {
        row.exact_mean = sums[j] / n;
        row.exact_variance = (squares[j] / n - row.exact_mean.powi(2)).max(0.0);
    }
    Ok(AuditReport {
        assignments: count,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{rows_no_anticipation, rows_no_carryover, rows_time_invariant};
    use crate::estimands::{instantaneous_effect, two_period_effects};
    use proptest::prelude::*;

    fn gen(kind: GeneratorKind, scenario: Scenario) -> ScenarioGenerator {
        ScenarioGenerator::new(kind, scenario, 7).unwrap()
    }

    fn all_rows_vanish(table: &PotentialOutcomeTable, scenario: Scenario) -> bool {
        let c = assemble(scenario, 2, table.scope(), Some(1)).unwrap();
        (0..table.units()).all(|i| (c.matrix() * table.unit_stack(i)).amax() < 1e-12)
    }

    #[test]
    fn gaussian_tables_satisfy_their_scenario() {
        for scenario in Scenario::ALL {
            let t = generate_table(&gen(GeneratorKind::gaussian_default(), scenario), 40).unwrap();
            assert!(all_rows_vanish(&t, scenario), "{scenario}");
        }
        let a = generate_table(&gen(GeneratorKind::gaussian_default(), Scenario::A), 40).unwrap();
        assert!(!all_rows_vanish(&a, Scenario::B));
    }

    #[test]
    fn scenario_c_table_passes_every_row_family() {
        let t = generate_table(&gen(GeneratorKind::gaussian_default(), Scenario::C), 30).unwrap();
        let s = t.scope().to_vec();
        let g = t.stacked_means();
        for rows in [
            rows_no_anticipation(2, &s).unwrap(),
            rows_no_carryover(2, &s, 1).unwrap(),
            rows_time_invariant(2, &s, 1).unwrap(),
        ] {
            assert!((rows * &g).amax() < 1e-12);
        }
    }

    #[test]
    fn constant_effects_are_constant() {
        let t = generate_table(&gen(GeneratorKind::constant_default(), Scenario::C), 50).unwrap();
        let spec = two_period_effects();
        let fx = crate::estimands::individual_effect_covariance(&spec, &t).unwrap();
        assert!(fx.amax() < 1e-20);
        let tau1 = instantaneous_effect(1, &"".parse().unwrap(), t.scope()).unwrap();
        for i in 0..t.units() {
            let v = (tau1.coefficients() * t.unit_stack(i))[0];
            assert!((v - 1.0).abs() < 1e-12);
        }
        for scenario in Scenario::ALL {
            assert!(all_rows_vanish(&t, scenario));
        }
    }

    #[test]
    fn invalid_rho_rejected() {
        let kind = GeneratorKind::GaussianModel {
            beta1: [0.0; 4],
            beta2: [0.0; 4],
            rho: 1.0,
        };
        assert!(matches!(
            ScenarioGenerator::new(kind, Scenario::A, 1),
            Err(Error::Parameter(_))
        ));
    }

    fn small_study(scenario: Scenario, reps: usize) -> Study {
        let design = CrossoverDesign::from_pairs(2, &[("AA", 5), ("AB", 5), ("BA", 5), ("BB", 5)]).unwrap();
        Study {
            design,
            scenario,
            k: Some(1),
            specs: vec![two_period_effects()],
            replications: reps,
            weights: WeightChoice::Sample,
            options: FitOptions::default(),
            level: 0.95,
            seed: 11,
        }
    }

    #[test]
    fn reports_are_reproducible() {
        let g = gen(GeneratorKind::gaussian_default(), Scenario::B);
        let a = run_monte_carlo(&g, &small_study(Scenario::B, 40)).unwrap();
        let b = run_monte_carlo(&g, &small_study(Scenario::B, 40)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.estimands.len(), 5);
        for e in &a.estimands {
            assert_eq!(e.bias.len(), 40);
            assert!((0.0..=1.0).contains(&e.coverage));
        }
    }

    #[test]
    fn restricted_estimands_are_exactly_zero() {
        let g = gen(GeneratorKind::gaussian_default(), Scenario::B);
        let r = run_monte_carlo(&g, &small_study(Scenario::B, 20)).unwrap();
        for label in ["carry2^1(A)", "carry2^1(B)"] {
            let e = r.estimand(label).unwrap();
            assert!(e.restricted);
            assert_eq!(e.truth, 0.0);
            assert!(e.bias.iter().all(|b| *b == 0.0));
            assert_eq!(e.coverage, 1.0);
        }
    }

    #[test]
    fn unidentified_study_is_refused() {
        let design = CrossoverDesign::from_pairs(2, &[("AB", 5), ("BA", 5)])
            .unwrap()
            .with_scope(full_sequence_set(2).unwrap())
            .unwrap();
        let mut study = small_study(Scenario::A, 10);
        study.design = design;
        let g = gen(GeneratorKind::gaussian_default(), Scenario::A);
        assert!(matches!(run_monte_carlo(&g, &study), Err(Error::NotIdentifiable { .. })));
    }

    #[test]
    fn bias_csv_layout() {
        let g = gen(GeneratorKind::constant_default(), Scenario::C);
        let r = run_monte_carlo(&g, &small_study(Scenario::C, 6)).unwrap();
        let csv = emit_bias_distribution(&r).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "scenario,estimand,replication,bias");
        assert_eq!(lines.len(), 1 + 6 * 5);
        let first = &r.estimands[0];
        assert_eq!(lines[1], format!("c,{},0,{}", first.label, first.bias[0]));
    }

    #[test]
    fn single_assignment_audit_has_zero_variance() {
        let design = CrossoverDesign::from_pairs(2, &[("AB", 3)])
            .unwrap()
            .with_scope(["AB".parse().unwrap()])
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = consistent_table(Scenario::B, 2, Some(1), 3, &mut rng).unwrap();
        let restriction = RestrictionMatrix::unrestricted(2, design.scope());
        let spec = crate::estimands::EstimandSpec::from_weights(
            2,
            design.scope().to_vec(),
            vec!["y1(AB)".into()],
            &[(design.scope()[0].clone(), DMatrix::from_row_slice(1, 2, &[1.0, 0.0]))],
        )
        .unwrap();
        let weights = WeightModel::identity(&design);
        let audit = exact_randomization_audit(&table, &design, &restriction, &[spec], &weights).unwrap();
        assert_eq!(audit.assignments, 1);
        assert_eq!(audit.rows[0].exact_variance, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn generated_tables_are_sound(seed in any::<u64>(), which in 0usize..3, constant in any::<bool>()) {
            let scenario = Scenario::ALL[which];
            let kind = if constant { GeneratorKind::constant_default() } else { GeneratorKind::gaussian_default() };
            let t = generate_table(&ScenarioGenerator::new(kind, scenario, seed).unwrap(), 8).unwrap();
            prop_assert!(all_rows_vanish(&t, scenario));
        }
    }
}
