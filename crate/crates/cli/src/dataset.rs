//! `unit,sequence,y1,...,yT` CSV files.

use std::path::Path;

use crossover_core::{ObservedDataset, TreatmentSequence};
use nalgebra::DMatrix;

use crate::error::{CliError, CliResult};

pub fn read_dataset(path: &Path) -> CliResult<ObservedDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_dataset(&text)
}

/// Parses a dataset; errors name the offending file line.
pub fn parse_dataset(text: &str) -> CliResult<ObservedDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| CliError::Parse(format!("line 1: {e}")))?
        .clone();
    let fields: Vec<&str> = header.iter().collect();
    if fields.len() < 3 || fields[0] != "unit" || fields[1] != "sequence" {
        return Err(CliError::Parse(
            "line 1: header must be unit,sequence,y1,...,yT".into(),
        ));
    }
    let horizon = fields.len() - 2;
    for (t, f) in fields[2..].iter().enumerate() {
        if *f != format!("y{}", t + 1) {
            return Err(CliError::Parse(format!(
                "line 1: column {} should be y{}, found {f}",
                t + 3,
                t + 1
            )));
        }
    }
    let mut sequences = Vec::new();
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| CliError::Parse(format!("line {line}: {e}")))?;
        if record.len() != horizon + 2 {
            return Err(CliError::Parse(format!(
                "line {line}: expected {} fields, found {}",
                horizon + 2,
                record.len()
            )));
        }
        let z: TreatmentSequence = record[1]
            .parse()
            .map_err(|e| CliError::Parse(format!("line {line}: {e}")))?;
        if z.len() != horizon {
            return Err(CliError::Parse(format!(
                "line {line}: sequence {z} has length {}, expected {horizon}",
                z.len()
            )));
        }
        for (t, v) in record.iter().skip(2).enumerate() {
            let y: f64 = v.parse().map_err(|_| {
                CliError::Parse(format!("line {line}: y{} value {v:?} is not a number", t + 1))
            })?;
            if !y.is_finite() {
                return Err(CliError::Parse(format!("line {line}: y{} is not finite", t + 1)));
            }
            values.push(y);
        }
        sequences.push(z);
    }
    if sequences.is_empty() {
        return Err(CliError::Parse("dataset has no rows".into()));
    }
    let outcomes = DMatrix::from_row_slice(sequences.len(), horizon, &values);
    Ok(ObservedDataset::new(horizon, sequences, outcomes)?)
}

/// Writes a dataset with units numbered from 1. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_dataset(dataset: &ObservedDataset) -> String {
    let t = dataset.horizon();
    let mut out = String::from("unit,sequence");
    for p in 1..=t {
        out.push_str(&format!(",y{p}"));
    }
    out.push('\n');
    for (i, z) in dataset.sequences().iter().enumerate() {
        out.push_str(&format!("{},{z}", i + 1));
        for p in 0..t {
            out.push_str(&format!(",{}", dataset.outcomes()[(i, p)]));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_rows() {
        let d = parse_dataset("unit,sequence,y1,y2\n1,AB,0.5,1\n2,BA,1,0\n").unwrap();
        assert_eq!(d.units(), 2);
        assert_eq!(d.horizon(), 2);
    }

    #[test]
    fn binary_outcomes_are_reals() {
        let d = parse_dataset("unit,sequence,y1,y2\na,AB,0,1\nb,BA,1,1\n").unwrap();
        assert_eq!(d.outcomes()[(0, 1)], 1.0);
    }

    #[test]
    fn errors_name_the_line() {
        let bad_symbol = parse_dataset("unit,sequence,y1,y2\n1,AB,0,1\n2,AC,1,0\n").unwrap_err();
        assert!(bad_symbol.to_string().starts_with("line 3:"), "{bad_symbol}");
        assert_eq!(bad_symbol.exit_code(), 2);
        let ragged = parse_dataset("unit,sequence,y1,y2\n1,AB,0\n").unwrap_err();
        assert!(ragged.to_string().contains("line 2: expected 4 fields"));
        let text = parse_dataset("unit,sequence,y1,y2\n1,AB,0,x\n").unwrap_err();
        assert!(text.to_string().contains("line 2: y2"));
        let short = parse_dataset("unit,sequence,y1,y2\n1,A,0,1\n").unwrap_err();
        assert!(short.to_string().contains("length 1"));
    }

    #[test]
    fn round_trip_is_exact() {
        let text = "unit,sequence,y1,y2\n1,AB,0.1,-3.3333333333333335\n2,BA,0.001,2.5\n";
        let d = parse_dataset(text).unwrap();
        assert_eq!(write_dataset(&d), text);
        assert_eq!(parse_dataset(&write_dataset(&d)).unwrap(), d);
    }
}
