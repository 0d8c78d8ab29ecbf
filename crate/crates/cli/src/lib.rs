//! Library side of the `crossover` binary: argument definitions, subcommand
//! drivers and JSON reports. `main.rs` only parses, runs and maps the exit
//! code.

pub mod config;
pub mod dataset;
pub mod error;
pub mod grammar;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use crossover_core::identification::mean_table;
use crossover_core::rwls::WeightProvenance;
use crossover_core::simulator::{
    emit_bias_distribution, exact_randomization_audit, generate_table, monte_carlo_on_table,
    replication_assignment, seeded_consistent_table,
};
use crossover_core::twoperiod::{
    conservative_intervals, TwoPeriodLayout, TwoPeriodSummary, TWO_SEQUENCE_UNIDENTIFIED,
};
use crossover_core::{
    assemble, estimate, feasible_rwls, is_identifiable, CrossoverDesign, EstimandSpec, FitOptions,
    ObservedDataset, Scenario, TreatmentSequence, WeightChoice, WeightModel,
};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::StudyConfig;
use crate::dataset::{read_dataset, write_dataset};
use crate::error::{CliError, CliResult};
use crate::grammar::parse_estimand;

#[derive(Debug, Parser)]
#[command(name = "crossover", version, about = "Design-based analysis of crossover experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check identifiability of a design under a scenario.
    Identify(IdentifyArgs),
    /// Estimate effects from a dataset.
    Fit(FitArgs),
    /// Run a Monte Carlo study described by a TOML file.
    Simulate(SimulateArgs),
    /// Exact randomization mean and variance for a small design.
    Audit(AuditArgs),
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: crossover_core::Error| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Assumption set: a, b or c.
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: Scenario,
    /// Carryover order for scenarios b and c.
    #[arg(long)]
    pub k: Option<usize>,
}

impl ModelArgs {
    fn order(&self) -> CliResult<Option<usize>> {
        match (self.scenario, self.k) {
            (Scenario::A, _) => Ok(None),
            (_, Some(k)) => Ok(Some(k)),
            (s, None) => Err(CliError::Parse(format!("scenario {s} needs --k"))),
        }
    }
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    /// Design file (`horizon`, optional `scope`, one `SEQ COUNT` per line).
    #[arg(long)]
    pub design: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Engine {
    /// Closed form for two-period layouts with default estimands, RWLS otherwise.
    Auto,
    Rwls,
    ClosedForm,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// CSV with header `unit,sequence,y1,...,yT`.
    #[arg(long)]
    pub data: PathBuf,
    /// Optional design file; counts must match the data.
    #[arg(long)]
    pub design: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Estimand expression; repeatable. Defaults to `tau t=1` .. `tau t=T`.
    #[arg(long = "estimand")]
    pub estimands: Vec<String>,
    /// `sample`, `pooled` or a JSON file mapping sequences to T×T matrices.
    #[arg(long, default_value = "sample")]
    pub weights: String,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, value_enum, default_value_t = Engine::Auto)]
    pub engine: Engine,
    /// Small-sample N/(N-p) scaling of the EHW covariance.
    #[arg(long)]
    pub hc1: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Study configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the number of replications.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Override the assignment seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for `report.json` and `bias.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write one simulated dataset (the first replication's assignment) as CSV.
    #[arg(long)]
    pub data_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub design: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long = "estimand")]
    pub estimands: Vec<String>,
    /// Seed of the synthetic potential-outcome table.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Units in the synthetic table; defaults to the design size.
    #[arg(long)]
    pub units: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// What the binary prints, and the exit code it ends with. A nonzero code
/// here still comes with a report (e.g. an unidentified design).
#[derive(Debug)]
pub struct Outcome {
    pub report: String,
    pub code: u8,
    pub message: Option<String>,
}

impl Outcome {
    fn ok(report: String) -> Self {
        Outcome { report, code: 0, message: None }
    }
}

pub fn run(cli: Cli) -> CliResult<Outcome> {
    match cli.command {
        Command::Identify(a) => identify(&a),
        Command::Fit(a) => fit(&a),
        Command::Simulate(a) => simulate(&a),
        Command::Audit(a) => audit(&a),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_design(path: &Path) -> CliResult<CrossoverDesign> {
    Ok(CrossoverDesign::from_text(&read_text(path)?)?)
}

fn render(value: &impl Serialize, out: Option<&Path>) -> CliResult<String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))? + "\n";
    match out {
        Some(path) => {
            write_text(path, &text)?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

fn non_finite_to_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

fn counts_json(design: &CrossoverDesign) -> BTreeMap<String, usize> {
    design.counts().iter().map(|(z, n)| (z.to_string(), *n)).collect()
}

fn scope_json(scope: &[TreatmentSequence]) -> Vec<String> {
    scope.iter().map(|z| z.to_string()).collect()
}

fn identify(a: &IdentifyArgs) -> CliResult<Outcome> {
    let design = read_design(&a.design)?;
    let k = a.model.order()?;
    let restriction = assemble(a.model.scenario, design.horizon(), design.scope(), k)?;
    let verdict = is_identifiable(&design, &restriction)?;
    let means: Vec<Value> = mean_table(&design, a.model.scenario, k)?
        .into_iter()
        .map(|m| {
            json!({
                "sequence": m.sequence.to_string(),
                "period": m.period,
                "identified": m.is_identified(),
                "estimator": m.derivation.as_ref().map(|d| d.summary()),
                "derivation": m.derivation,
            })
        })
        .collect();
    let report = json!({
        "command": "identify",
        "scenario": a.model.scenario,
        "k": k,
        "horizon": design.horizon(),
        "scope": scope_json(design.scope()),
        "counts": counts_json(&design),
        "identified": verdict.is_identified(),
        "rank": verdict.rank,
        "dimension": verdict.dimension,
        "restriction_rows": verdict.restriction_rows,
        "zero_columns": verdict.zero_columns,
        "means": means,
    });
    let text = render(&report, a.out.as_deref())?;
    if verdict.is_identified() {
        return Ok(Outcome::ok(text));
    }
    let mut message = format!(
        "not identifiable: X'X + C'C has rank {} < {}",
        verdict.rank, verdict.dimension
    );
    if !verdict.zero_columns.is_empty() {
        message.push_str(&format!("; unconstrained unobserved means: {}", verdict.zero_columns.join(", ")));
    }
    Ok(Outcome { report: text, code: 3, message: Some(message) })
}

/// `tau t=1` .. `tau t=T`, skipping periods where the scope has no
/// history followed by both treatments.
fn default_specs(horizon: usize, scope: &[TreatmentSequence]) -> CliResult<Vec<EstimandSpec>> {
    let specs: Vec<EstimandSpec> = (1..=horizon)
        .filter_map(|t| parse_estimand(&format!("tau t={t}"), scope).ok())
        .collect();
    if specs.is_empty() {
        return Err(CliError::Parse("no period effect is defined on this scope; pass --estimand".into()));
    }
    Ok(specs)
}

fn parse_specs(exprs: &[String], horizon: usize, scope: &[TreatmentSequence]) -> CliResult<Vec<EstimandSpec>> {
    if exprs.is_empty() {
        default_specs(horizon, scope)
    } else {
        exprs.iter().map(|e| parse_estimand(e, scope)).collect()
    }
}

/// Reads `{"AB": [[1, 0], [0, 1]], ...}`.
fn read_weight_file(path: &Path) -> CliResult<WeightModel> {
    let parsed: BTreeMap<String, Vec<Vec<f64>>> = serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    let mut blocks = BTreeMap::new();
    for (z, rows) in parsed {
        let z: TreatmentSequence = z.parse()?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(CliError::Parse(format!(
                "{}: weight matrix for {z} is not square",
                path.display()
            )));
        }
        blocks.insert(z, DMatrix::from_fn(n, n, |i, j| rows[i][j]));
    }
    Ok(WeightModel::user(blocks)?)
}

enum Weights {
    Sample,
    Pooled,
    File(WeightModel),
}

fn parse_weights(arg: &str) -> CliResult<Weights> {
    match arg {
        "sample" => Ok(Weights::Sample),
        "pooled" => Ok(Weights::Pooled),
        path => Ok(Weights::File(read_weight_file(Path::new(path))?)),
    }
}

fn fit(a: &FitArgs) -> CliResult<Outcome> {
    let data = read_dataset(&a.data)?;
    let design = match &a.design {
        Some(p) => {
            let d = read_design(p)?;
            data.check_design(&d)?;
            d
        }
        None => data.infer_design()?,
    };
    let k = a.model.order()?;
    let weights = parse_weights(&a.weights)?;
    let layout = (design.horizon() == 2)
        .then(|| TwoPeriodLayout::detect(design.observed()))
        .flatten();
    let engine = match a.engine {
        Engine::Auto if layout.is_some() && a.estimands.is_empty() && !matches!(weights, Weights::File(_)) => {
            Engine::ClosedForm
        }
        Engine::Auto => Engine::Rwls,
        e => e,
    };
    let report = match engine {
        Engine::ClosedForm => {
            let layout = layout.ok_or_else(|| {
                CliError::Parse(
                    "the closed-form engine needs two periods and sequences {AA, AB, BA, BB} or {AB, BA}".into(),
                )
            })?;
            if !a.estimands.is_empty() {
                return Err(CliError::Parse(
                    "the closed-form engine reports its own estimands; use --engine rwls for --estimand".into(),
                ));
            }
            fit_closed_form(a, &data, layout, k, weights)?
        }
        _ => fit_rwls(a, &data, &design, k, weights)?,
    };
    Ok(Outcome::ok(render(&report, a.out.as_deref())?))
}

fn provenance_name(p: WeightProvenance) -> &'static str {
    match p {
        WeightProvenance::Sample => "sample",
        WeightProvenance::Pooled => "pooled",
        WeightProvenance::User => "user",
    }
}

fn fit_closed_form(
    a: &FitArgs,
    data: &ObservedDataset,
    layout: TwoPeriodLayout,
    k: Option<usize>,
    weights: Weights,
) -> CliResult<Value> {
    if k.is_some_and(|k| k != 1) {
        return Err(CliError::Parse("the closed-form engine supports k = 1 only".into()));
    }
    let summary = match weights {
        Weights::Sample => TwoPeriodSummary::from_dataset(data)?,
        Weights::Pooled => TwoPeriodSummary::pooled_from_dataset(data, a.model.scenario)?,
        Weights::File(_) => unreachable!("user weights select the RWLS engine"),
    };
    let rows: Vec<Value> = conservative_intervals(&summary, layout, a.model.scenario, a.level)?
        .into_iter()
        .map(|c| {
            json!({
                "label": c.label,
                "estimate": c.value,
                "se": c.se,
                "ci_lower": c.lower,
                "ci_upper": c.upper,
            })
        })
        .collect();
    let unidentified: Vec<&str> = match (layout, a.model.scenario) {
        (TwoPeriodLayout::TwoSequence, Scenario::A) => TWO_SEQUENCE_UNIDENTIFIED.to_vec(),
        _ => Vec::new(),
    };
    Ok(json!({
        "command": "fit",
        "engine": "closed-form",
        "scenario": a.model.scenario,
        "k": k,
        "level": a.level,
        "units": data.units(),
        "counts": summary.counts().iter().map(|(z, n)| (z.to_string(), *n)).collect::<BTreeMap<_, _>>(),
        "weights": a.weights,
        "estimates": rows,
        "not_estimable": unidentified,
    }))
}

fn fit_rwls(
    a: &FitArgs,
    data: &ObservedDataset,
    design: &CrossoverDesign,
    k: Option<usize>,
    weights: Weights,
) -> CliResult<Value> {
    let restriction = assemble(a.model.scenario, design.horizon(), design.scope(), k)?;
    let choice = match weights {
        Weights::Sample => WeightChoice::Sample,
        Weights::Pooled => WeightChoice::Pooled,
        Weights::File(w) => WeightChoice::User(w),
    };
    let specs = parse_specs(&a.estimands, design.horizon(), design.scope())?;
    let fit = feasible_rwls(data, design, &restriction, &choice, FitOptions { hc1: a.hc1 })?;
    let mut rows = Vec::new();
    let mut wald = Vec::new();
    for spec in &specs {
        let table = estimate(&fit, spec, a.level)?;
        for j in 0..table.len() {
            rows.push(json!({
                "label": table.labels[j],
                "estimate": table.point[j],
                "se": table.se[j],
                "ci_lower": table.ci_lower[j],
                "ci_upper": table.ci_upper[j],
                "restricted": table.restricted[j],
            }));
        }
        if let Some(w) = &table.wald {
            wald.push(json!({
                "estimands": table.labels,
                "statistic": w.statistic,
                "df": w.df,
                "p_value": w.p_value,
                "critical": w.critical,
            }));
        }
    }
    let id = &fit.solution.identifiability;
    let gamma: Vec<Value> = fit
        .gamma_labels()
        .into_iter()
        .zip(fit.gamma.iter())
        .map(|(label, v)| json!({ "label": label, "value": v }))
        .collect();
    Ok(json!({
        "command": "fit",
        "engine": "rwls",
        "scenario": a.model.scenario,
        "k": k,
        "level": a.level,
        "hc1": a.hc1,
        "units": data.units(),
        "horizon": design.horizon(),
        "scope": scope_json(design.scope()),
        "counts": counts_json(design),
        "weights": {
            "provenance": provenance_name(fit.weights().provenance()),
            "repairs": fit.weights().repairs(),
        },
        "identification": {
            "rank": id.rank,
            "dimension": id.dimension,
            "restriction_rows": id.restriction_rows,
        },
        "condition_number": non_finite_to_null(fit.solution.condition_number),
        "restriction_residual": fit.restriction_residual(),
        "warnings": fit.warnings(),
        "estimates": rows,
        "wald": wald,
        "gamma": gamma,
    }))
}

fn simulate(a: &SimulateArgs) -> CliResult<Outcome> {
    let config = StudyConfig::read(&a.config)?;
    let mut study = config.study()?;
    if let Some(r) = a.reps {
        study.replications = r;
    }
    if let Some(s) = a.seed {
        study.seed = s;
    }
    let generator = config.generator()?;
    let table = generate_table(&generator, study.design.total_units())?;
    if let Some(path) = &a.data_out {
        let assignment = replication_assignment(&study.design, study.seed, 0);
        let data = ObservedDataset::from_table(&table, &assignment)?;
        write_text(path, &write_dataset(&data))?;
    }
    let report = monte_carlo_on_table(&table, &study)?;
    let summary = json!({
        "command": "simulate",
        "generator": generator,
        "scenario": report.scenario,
        "k": report.k,
        "units": report.units,
        "replications": report.replications,
        "seed": report.seed,
        "level": report.level,
        "estimands": report.estimands.iter().map(|e| json!({
            "label": e.label,
            "truth": e.truth,
            "restricted": e.restricted,
            "mean_bias": e.mean_bias,
            "empirical_variance": e.empirical_variance,
            "variance_mc_se": e.variance_mc_se,
            "mean_ehw_variance": e.mean_ehw_variance,
            "oracle_variance": e.oracle_variance,
            "coverage": e.coverage,
        })).collect::<Vec<_>>(),
    });
    let text = match &a.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            render(&summary, Some(&dir.join("report.json")))?;
            write_text(&dir.join("bias.csv"), &emit_bias_distribution(&report)?)?;
            String::new()
        }
        None => render(&summary, None)?,
    };
    Ok(Outcome::ok(text))
}

fn audit(a: &AuditArgs) -> CliResult<Outcome> {
    let design = read_design(&a.design)?;
    let k = a.model.order()?;
    let restriction = assemble(a.model.scenario, design.horizon(), design.scope(), k)?;
    let verdict = is_identifiable(&design, &restriction)?;
    verdict.clone().into_result()?;
    let units = a.units.unwrap_or(design.total_units());
    let table = seeded_consistent_table(a.model.scenario, design.horizon(), k, units, a.seed)?;
    let weights = WeightModel::from_table(&table, &design)?;
    let specs = parse_specs(&a.estimands, design.horizon(), design.scope())?;
    let audit = exact_randomization_audit(&table, &design, &restriction, &specs, &weights)?;
    let report = json!({
        "command": "audit",
        "scenario": a.model.scenario,
        "k": k,
        "counts": counts_json(&design),
        "table_seed": a.seed,
        "units": units,
        "assignments": audit.assignments.to_string(),
        "rows": audit.rows,
    });
    Ok(Outcome::ok(render(&report, a.out.as_deref())?))
}
