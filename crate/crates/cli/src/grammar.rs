//! Estimand expressions:
//!
//! ```text
//! tau t=2 history=A            conditional instantaneous effect
//! tau t=2                      average over histories with both arms in scope
//! carry t=3 k=1 prefix=A suffix=B
//! marginal weights=0.5,0.5 of [tau t=2 history=A; tau t=2 history=B]
//! ```
//!
//! Any form accepts `label=NAME`. `marginal` without weights averages
//! uniformly.

use std::collections::{BTreeMap, BTreeSet};

use crossover_core::estimands::{carryover_effect, instantaneous_effect, marginal_effect};
use crossover_core::{EstimandSpec, Treatment, TreatmentSequence};

use crate::error::{CliError, CliResult};

fn err(expr: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Parse(format!("estimand {expr:?}: {msg}"))
}

fn key_values<'a>(expr: &str, words: impl Iterator<Item = &'a str>) -> CliResult<BTreeMap<&'a str, &'a str>> {
    let mut map = BTreeMap::new();
    for w in words {
        let (k, v) = w
            .split_once('=')
            .ok_or_else(|| err(expr, format!("expected key=value, found {w:?}")))?;
        if map.insert(k, v).is_some() {
            return Err(err(expr, format!("{k} given twice")));
        }
    }
    Ok(map)
}

fn take_usize(expr: &str, map: &mut BTreeMap<&str, &str>, key: &str) -> CliResult<usize> {
    let v = map.remove(key).ok_or_else(|| err(expr, format!("missing {key}=")))?;
    v.parse().map_err(|_| err(expr, format!("{key}={v} is not a positive integer")))
}

fn take_sequence(expr: &str, map: &mut BTreeMap<&str, &str>, key: &str) -> CliResult<TreatmentSequence> {
    map.remove(key)
        .unwrap_or("")
        .parse()
        .map_err(|e| err(expr, e))
}

pub fn parse_estimand(expr: &str, scope: &[TreatmentSequence]) -> CliResult<EstimandSpec> {
    let expr = expr.trim();
    let (kind, rest) = expr.split_once(char::is_whitespace).unwrap_or((expr, ""));
    let spec = match kind {
        "tau" => {
            let mut map = key_values(expr, rest.split_whitespace())?;
            let label = map.remove("label");
            let t = take_usize(expr, &mut map, "t")?;
            let spec = if map.contains_key("history") || t == 1 {
                let history = take_sequence(expr, &mut map, "history")?;
                instantaneous_effect(t, &history, scope).map_err(|e| err(expr, e))?
            } else {
                if t > scope.first().map_or(0, |z| z.len()) {
                    return Err(err(expr, format!("period {t} is outside the horizon")));
                }
                // Histories followed by both treatments somewhere in the scope;
                // all of them for a full scope.
                let starts: BTreeSet<TreatmentSequence> = scope.iter().map(|z| z.prefix(t)).collect();
                let histories: Vec<TreatmentSequence> = starts
                    .iter()
                    .map(|p| p.prefix(t - 1))
                    .filter(|h| starts.contains(&h.pushed(Treatment::A)) && starts.contains(&h.pushed(Treatment::B)))
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                if histories.is_empty() {
                    return Err(err(expr, format!("no history in scope is followed by both A and B at period {t}")));
                }
                let specs = histories
                    .iter()
                    .map(|h| instantaneous_effect(t, h, scope))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| err(expr, e))?;
                let w = vec![1.0 / specs.len() as f64; specs.len()];
                marginal_effect(&specs, &w)
                    .and_then(|s| s.with_labels(vec![format!("tau{t}")]))
                    .map_err(|e| err(expr, e))?
            };
            finish(expr, map, spec, label)?
        }
        "carry" => {
            let mut map = key_values(expr, rest.split_whitespace())?;
            let label = map.remove("label");
            let t = take_usize(expr, &mut map, "t")?;
            let k = take_usize(expr, &mut map, "k")?;
            let prefix = take_sequence(expr, &mut map, "prefix")?;
            let suffix = take_sequence(expr, &mut map, "suffix")?;
            let spec = carryover_effect(t, k, &prefix, &suffix, scope).map_err(|e| err(expr, e))?;
            finish(expr, map, spec, label)?
        }
        "marginal" => {
            let (head, body) = rest
                .split_once(" of ")
                .or_else(|| rest.strip_prefix("of ").map(|b| ("", b)))
                .ok_or_else(|| err(expr, "expected `of [ ... ]`"))?;
            let body = body.trim();
            let inner = body
                .strip_prefix('[')
                .and_then(|b| b.strip_suffix(']'))
                .ok_or_else(|| err(expr, "components must be enclosed in [ ]"))?;
            let specs = inner
                .split(';')
                .map(|part| parse_estimand(part, scope))
                .collect::<CliResult<Vec<_>>>()?;
            let mut map = key_values(expr, head.split_whitespace())?;
            let label = map.remove("label");
            let weights = match map.remove("weights") {
                Some(w) => w
                    .split(',')
                    .map(|x| x.parse::<f64>().map_err(|_| err(expr, format!("weight {x:?} is not a number"))))
                    .collect::<CliResult<Vec<_>>>()?,
                None => vec![1.0 / specs.len() as f64; specs.len()],
            };
            if weights.len() != specs.len() {
                return Err(err(expr, format!("{} weights for {} components", weights.len(), specs.len())));
            }
            let spec = marginal_effect(&specs, &weights).map_err(|e| err(expr, e))?;
            finish(expr, map, spec, label)?
        }
        other => return Err(err(expr, format!("unknown estimand kind {other:?}"))),
    };
    Ok(spec)
}

fn finish(
    expr: &str,
    map: BTreeMap<&str, &str>,
    spec: EstimandSpec,
    label: Option<&str>,
) -> CliResult<EstimandSpec> {
    if let Some(k) = map.keys().next() {
        return Err(err(expr, format!("unknown key {k:?}")));
    }
    match label {
        Some(l) if spec.dimension() == 1 => spec.with_labels(vec![l.to_string()]).map_err(|e| err(expr, e)),
        Some(_) => Err(err(expr, "label= needs a single-row estimand")),
        None => Ok(spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crossover_core::sequences::full_sequence_set;

    fn scope(t: usize) -> Vec<TreatmentSequence> {
        full_sequence_set(t).unwrap()
    }

    #[test]
    fn conditional_and_average_effects() {
        let s = scope(2);
        let a = parse_estimand("tau t=2 history=A", &s).unwrap();
        assert_eq!(a, instantaneous_effect(2, &"A".parse().unwrap(), &s).unwrap());
        let avg = parse_estimand("tau t=2", &s).unwrap();
        assert_eq!(avg.labels(), ["tau2"]);
        let tau1 = parse_estimand("tau t=1", &s).unwrap();
        assert_eq!(tau1.labels(), ["tau1"]);
    }

    #[test]
    fn carryover_and_marginal() {
        let s = scope(3);
        let c = parse_estimand("carry t=3 k=1 prefix=A suffix=B", &s).unwrap();
        assert_eq!(c.labels(), ["carry3^1(A|B)"]);
        let m = parse_estimand("marginal weights=0.25,0.75 of [tau t=2 history=A; tau t=2 history=B]", &s).unwrap();
        let a = instantaneous_effect(2, &"A".parse().unwrap(), &s).unwrap();
        let b = instantaneous_effect(2, &"B".parse().unwrap(), &s).unwrap();
        let expected = a.coefficients() * 0.25 + b.coefficients() * 0.75;
        assert!((m.coefficients() - expected).amax() < 1e-15);
        let labelled = parse_estimand("marginal label=avg of [tau t=2 history=A; tau t=2 history=B]", &s).unwrap();
        assert_eq!(labelled.labels(), ["avg"]);
    }

    #[test]
    fn malformed_expressions() {
        let s = scope(2);
        for bad in [
            "tau",
            "tau t=x",
            "tau t=2 history=C",
            "tau t=2 colour=red",
            "carry t=2 k=1",
            "marginal of tau t=1",
            "marginal weights=1 of [tau t=1; tau t=2]",
            "effect t=1",
        ] {
            let e = parse_estimand(bad, &s).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}");
        }
    }

    #[test]
    fn average_uses_histories_with_both_arms() {
        let s: Vec<TreatmentSequence> = ["AAB", "ABA", "ABB", "BAA"].iter().map(|z| z.parse().unwrap()).collect();
        // Only history A is followed by both treatments at period 2.
        let avg = parse_estimand("tau t=2", &s).unwrap();
        let cond = parse_estimand("tau t=2 history=A", &s).unwrap();
        assert_eq!(avg.coefficients(), cond.coefficients());
        let two: Vec<TreatmentSequence> = ["AB", "BA"].iter().map(|z| z.parse().unwrap()).collect();
        assert!(parse_estimand("tau t=2", &two).is_err());
        assert!(parse_estimand("tau t=1", &two).is_ok());
    }
}
