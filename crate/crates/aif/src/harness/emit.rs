//! CSV and JSON output of result tables. Floats carry 17 significant digits; non-finite
//! values become empty CSV cells and JSON nulls.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Row, Table};
use crate::error::{AifError, Result};
use crate::format_float;

pub const CSV_COLUMNS: [&str; 12] = [
    "experiment",
    "epsilon",
    "seed",
    "delta_I",
    "delta_S",
    "S_aif",
    "S_emp",
    "runtime_ms",
    "param",
    "value",
    "reference",
    "status",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// `.json` selects JSON, anything else CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

/// serde adapter writing f64 through [`format_float`] as a raw JSON number.
pub mod f17 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use serde_json::value::RawValue;

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if !x.is_finite() {
            return s.serialize_none();
        }
        let raw = RawValue::from_string(crate::format_float(*x)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

fn cell(x: f64) -> String {
    if x.is_finite() {
        format_float(x)
    } else {
        String::new()
    }
}

fn csv_record(r: &Row) -> [String; 12] {
    [
        r.experiment.to_string(),
        cell(r.epsilon),
        r.seed.to_string(),
        cell(r.delta_i),
        cell(r.delta_s),
        cell(r.s_aif),
        cell(r.s_emp),
        cell(r.runtime_ms),
        r.param.clone(),
        cell(r.value),
        cell(r.reference),
        r.status.clone(),
    ]
}

pub fn write_csv<W: Write>(table: &Table, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| AifError::Config(format!("CSV write failed: {e}"));
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in &table.rows {
        w.write_record(csv_record(r)).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<W: Write>(table: &Table, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, table)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn to_string(table: &Table, format: Format) -> Result<String> {
    let mut buf = Vec::new();
    match format {
        Format::Csv => write_csv(table, &mut buf)?,
        Format::Json => write_json(table, &mut buf)?,
    }
    Ok(String::from_utf8(buf).expect("output is UTF-8"))
}

pub fn emit(table: &Table, path: &Path, format: Format) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    match format {
        Format::Csv => write_csv(table, &mut file)?,
        Format::Json => write_json(table, &mut file)?,
    }
    file.flush()?;
    Ok(())
}

pub fn read_json(path: &Path) -> Result<Table> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{aggregate, ExperimentName, Summary};

    fn table(rows: Vec<Row>) -> Table {
        Table {
            summary: Summary {
                experiment: ExperimentName::DroScaling,
                config_hash: "ab".repeat(32),
                seeds: vec![0, 1],
                data_source: "synthetic".into(),
                aggregates: aggregate(&rows),
            },
            rows,
        }
    }

    fn sample_rows() -> Vec<Row> {
        let mut a = Row::new(ExperimentName::DroScaling, "k=1".into(), 0.1, 0);
        a.value = 1.0 / 3.0;
        a.reference = 2f64.sqrt();
        let mut b = Row::new(ExperimentName::DroScaling, "k=1".into(), 0.1, 1);
        b.value = -1e-300;
        b.status = "numerical: singular".into();
        vec![a, b]
    }

    #[test]
    fn empty_table_is_header_only() {
        let text = to_string(&table(Vec::new()), Format::Csv).unwrap();
        assert_eq!(text, format!("{}\n", CSV_COLUMNS.join(",")));
    }

    #[test]
    fn csv_cells() {
        let text = to_string(&table(sample_rows()), Format::Csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[1],
            "dro-scaling,1.0000000000000001e-1,0,,,,,0.0000000000000000e0,k=1,3.3333333333333331e-1,1.4142135623730951e0,ok"
        );
        assert!(lines[2].ends_with(",numerical: singular"));
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let t = table(sample_rows());
        let first = to_string(&t, Format::Json).unwrap();
        let parsed: Table = serde_json::from_str(&first).unwrap();
        assert_eq!(parsed.rows[1].value, -1e-300);
        assert!(parsed.rows[0].delta_i.is_nan());
        assert_eq!(to_string(&parsed, Format::Json).unwrap(), first);
        assert!(first.contains("\"delta_I\": null"));
        assert!(first.contains("\"config_hash\""));
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(Format::from_path(Path::new("a/b.JSON")), Format::Json);
        assert_eq!(Format::from_path(Path::new("a/b.csv")), Format::Csv);
        assert_eq!(Format::from_path(Path::new("noext")), Format::Csv);
    }
}
