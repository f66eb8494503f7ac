//! The run ledger: an append-only CSV holding one row per completed
//! run, and the narrower import/export format used to shuttle batches
//! to an offline evaluator.
//!
//! Row layout: `run_id,phase,role,replicate,<decoded>,<coded>,loss,timestamp`
//! with one decoded column per declared factor (integer-valued kinds
//! print as integers) followed by one re-encoded coded column per
//! factor at six decimals. The loss uses shortest round-trip
//! formatting, so parsing a ledger back reproduces the exact values;
//! only the timestamp column is outside the determinism contract.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use super::Phase;
use crate::doe::{DecodedValue, FactorKind, FactorSpec, PointRole};
use crate::error::{Error, Result};

/// One completed run, exactly as the ledger stores it.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: u64,
    pub phase: Phase,
    pub role: PointRole,
    pub replicate: u32,
    /// Decoded settings in declared-factor order.
    pub decoded: Vec<DecodedValue>,
    /// Realized coded values (decode → repair → re-encode), rounded to
    /// the six decimals the ledger stores so in-memory state and a
    /// parsed ledger agree bit-for-bit.
    pub coded: Vec<f64>,
    pub loss: f64,
    pub timestamp: String,
}

/// Rounds a coded value to the ledger's six-decimal storage precision.
pub fn ledger_round(x: f64) -> f64 {
    format!("{x:.6}").parse().expect("fixed-point f64 reparses")
}

pub fn now_timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true)
}

pub fn header(names: &[String]) -> String {
    let mut h = String::from("run_id,phase,role,replicate");
    for n in names {
        write!(h, ",{n}").unwrap();
    }
    for n in names {
        write!(h, ",{n}_coded").unwrap();
    }
    h.push_str(",loss,timestamp");
    h
}

/// Header of the offline interchange format: the ledger header minus
/// the coded columns and the timestamp.
pub fn import_header(names: &[String]) -> String {
    let mut h = String::from("run_id,phase,role,replicate");
    for n in names {
        write!(h, ",{n}").unwrap();
    }
    h.push_str(",loss");
    h
}

pub fn format_row(rec: &RunRecord) -> String {
    let mut row = format!(
        "{},{},{},{}",
        rec.run_id, rec.phase, rec.role, rec.replicate
    );
    for v in &rec.decoded {
        write!(row, ",{v}").unwrap();
    }
    for c in &rec.coded {
        write!(row, ",{c:.6}").unwrap();
    }
    write!(row, ",{},{}", rec.loss, rec.timestamp).unwrap();
    row
}

/// Creates the ledger with its header line, refusing to clobber an
/// existing file.
pub fn create(path: &Path, names: &[String]) -> Result<()> {
    let mut file = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)?;
    writeln!(file, "{}", header(names))?;
    file.sync_all()?;
    Ok(())
}

/// Appends completed runs. Each row is written in a single call so a
/// crash cannot interleave partial rows from this process.
pub fn append(path: &Path, rows: &[RunRecord]) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let mut buf = String::new();
    for rec in rows {
        writeln!(buf, "{}", format_row(rec)).unwrap();
    }
    let mut file = OpenOptions::new().append(true).open(path)?;
    file.write_all(buf.as_bytes())?;
    file.sync_all()?;
    Ok(())
}

fn parse_phase(s: &str) -> Option<Phase> {
    Some(match s {
        "screening" => Phase::Screening,
        "descent" => Phase::Descent,
        "ccd" => Phase::Ccd,
        "confirmation" => Phase::Confirmation,
        "done" => Phase::Done,
        _ => return None,
    })
}

fn parse_role(s: &str) -> Option<PointRole> {
    Some(match s {
        "corner" => PointRole::Corner,
        "center" => PointRole::Center,
        "star" => PointRole::Star,
        "descent" => PointRole::Descent,
        "confirmation" => PointRole::Confirmation,
        _ => return None,
    })
}

fn parse_decoded(s: &str, factor: &FactorSpec) -> Option<DecodedValue> {
    match factor.kind {
        FactorKind::Continuous => s.parse::<f64>().ok().map(DecodedValue::Real),
        FactorKind::Integer | FactorKind::Cyclic { .. } => {
            s.parse::<i64>().ok().map(DecodedValue::Int)
        }
    }
}

/// Reads the whole ledger back, validating the header and every field
/// against the declared factors.
pub fn read(path: &Path, factors: &[FactorSpec]) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path)?;
    let names: Vec<String> = factors.iter().map(|f| f.name.clone()).collect();
    let expected = header(&names);
    let err = |line: usize, reason: String| Error::Ledger {
        path: path.display().to_string(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first == expected => {}
        Some((_, first)) => {
            return Err(err(1, format!("header mismatch: expected `{expected}`, found `{first}`")))
        }
        None => return Err(err(1, "empty ledger".into())),
    }
    let k = factors.len();
    let want_fields = 4 + 2 * k + 2;
    let mut records = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != want_fields {
            return Err(err(
                lineno,
                format!("expected {want_fields} fields, found {}", fields.len()),
            ));
        }
        let run_id = fields[0]
            .parse::<u64>()
            .map_err(|_| err(lineno, format!("bad run_id `{}`", fields[0])))?;
        let phase = parse_phase(fields[1])
            .ok_or_else(|| err(lineno, format!("unknown phase `{}`", fields[1])))?;
        let role = parse_role(fields[2])
            .ok_or_else(|| err(lineno, format!("unknown role `{}`", fields[2])))?;
        let replicate = fields[3]
            .parse::<u32>()
            .map_err(|_| err(lineno, format!("bad replicate `{}`", fields[3])))?;
        let mut decoded = Vec::with_capacity(k);
        for (j, factor) in factors.iter().enumerate() {
            let field = fields[4 + j];
            decoded.push(parse_decoded(field, factor).ok_or_else(|| {
                err(lineno, format!("bad value `{field}` for factor `{}`", factor.name))
            })?);
        }
        let mut coded = Vec::with_capacity(k);
        for j in 0..k {
            let field = fields[4 + k + j];
            coded.push(field.parse::<f64>().map_err(|_| {
                err(lineno, format!("bad coded value `{field}` for factor `{}`", factors[j].name))
            })?);
        }
        let loss = fields[4 + 2 * k]
            .parse::<f64>()
            .map_err(|_| err(lineno, format!("bad loss `{}`", fields[4 + 2 * k])))?;
        let timestamp = fields[4 + 2 * k + 1].to_string();
        records.push(RunRecord {
            run_id,
            phase,
            role,
            replicate,
            decoded,
            coded,
            loss,
            timestamp,
        });
    }
    Ok(records)
}

/// Parses an offline results file: the import header plus one row per
/// completed run. Returns (run_id, loss) pairs in file order.
pub fn parse_import(path: &Path, names: &[String]) -> Result<Vec<(u64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let expected = import_header(names);
    let err = |line: usize, reason: String| Error::Ledger {
        path: path.display().to_string(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim_end() == expected => {}
        Some((_, first)) => {
            return Err(err(1, format!("header mismatch: expected `{expected}`, found `{first}`")))
        }
        None => return Err(err(1, "empty results file".into())),
    }
    let want_fields = 4 + names.len() + 1;
    let mut out = Vec::new();
    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != want_fields {
            return Err(err(
                lineno,
                format!("expected {want_fields} fields, found {}", fields.len()),
            ));
        }
        let run_id = fields[0]
            .parse::<u64>()
            .map_err(|_| err(lineno, format!("bad run_id `{}`", fields[0])))?;
        let loss_field = fields[want_fields - 1];
        if loss_field.is_empty() {
            return Err(err(lineno, format!("missing loss for run {run_id}")));
        }
        let loss = loss_field
            .parse::<f64>()
            .map_err(|_| err(lineno, format!("bad loss `{loss_field}`")))?;
        out.push((run_id, loss));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doe::FactorKind;

    fn factors() -> Vec<FactorSpec> {
        vec![
            FactorSpec::new("Op", FactorKind::Cyclic { modulus: 7 }, 0.0, 6.0).unwrap(),
            FactorSpec::new("Lr", FactorKind::Integer, 2.0, 4.0).unwrap(),
            FactorSpec::new("w", FactorKind::Continuous, 0.0, 1.0).unwrap(),
        ]
    }

    fn record() -> RunRecord {
        RunRecord {
            run_id: 7,
            phase: Phase::Screening,
            role: PointRole::Corner,
            replicate: 0,
            decoded: vec![
                DecodedValue::Int(5),
                DecodedValue::Int(3),
                DecodedValue::Real(0.25),
            ],
            coded: vec![ledger_round(2.0 / 3.0), 0.0, -0.5],
            loss: 46.0791,
            timestamp: "2024-01-01T00:00:00.000000Z".into(),
        }
    }

    #[test]
    fn header_and_row_layout() {
        let names: Vec<String> = factors().iter().map(|f| f.name.clone()).collect();
        assert_eq!(
            header(&names),
            "run_id,phase,role,replicate,Op,Lr,w,Op_coded,Lr_coded,w_coded,loss,timestamp"
        );
        assert_eq!(
            format_row(&record()),
            "7,screening,corner,0,5,3,0.25,0.666667,0.000000,-0.500000,46.0791,\
             2024-01-01T00:00:00.000000Z"
        );
        assert_eq!(import_header(&names), "run_id,phase,role,replicate,Op,Lr,w,loss");
    }

    #[test]
    fn round_trips_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        let specs = factors();
        let names: Vec<String> = specs.iter().map(|f| f.name.clone()).collect();
        create(&path, &names).unwrap();
        let mut second = record();
        second.run_id = 8;
        second.loss = f64::from_bits(0x3FD5555555555555); // 1/3, exercises shortest round-trip
        append(&path, &[record(), second.clone()]).unwrap();
        let back = read(&path, &specs).unwrap();
        assert_eq!(back, vec![record(), second]);
    }

    #[test]
    fn create_refuses_to_clobber() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        let names = vec!["x".to_string()];
        create(&path, &names).unwrap();
        assert!(create(&path, &names).is_err());
    }

    #[test]
    fn read_reports_offending_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        let specs = factors();
        let names: Vec<String> = specs.iter().map(|f| f.name.clone()).collect();
        create(&path, &names).unwrap();
        append(&path, &[record()]).unwrap();
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"9,screening,corner,0,5,3,oops,0.1,0.2,0.3,1.0,t\n")
            .unwrap();
        match read(&path, &specs) {
            Err(Error::Ledger { line, reason, .. }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("`oops`"), "{reason}");
            }
            other => panic!("expected ledger error, got {other:?}"),
        }
    }

    #[test]
    fn read_rejects_foreign_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        std::fs::write(&path, "run_id,loss\n").unwrap();
        match read(&path, &factors()) {
            Err(Error::Ledger { line: 1, reason, .. }) => {
                assert!(reason.contains("header mismatch"))
            }
            other => panic!("expected header error, got {other:?}"),
        }
    }

    #[test]
    fn integer_decoded_columns_have_no_decimal_point() {
        let row = format_row(&record());
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[4], "5");
        assert_eq!(fields[5], "3");
        assert_eq!(fields[6], "0.25");
    }

    #[test]
    fn import_parses_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let names: Vec<String> = factors().iter().map(|f| f.name.clone()).collect();
        let text = format!(
            "{}\n1,screening,corner,0,5,3,0.25,46.0791\n2,screening,corner,0,5,3,0.3,47\n",
            import_header(&names)
        );
        std::fs::write(&path, &text).unwrap();
        let got = parse_import(&path, &names).unwrap();
        assert_eq!(got, vec![(1, 46.0791), (2, 47.0)]);

        let missing = format!("{}\n1,screening,corner,0,5,3,0.25,\n", import_header(&names));
        std::fs::write(&path, &missing).unwrap();
        match parse_import(&path, &names) {
            Err(Error::Ledger { line: 2, reason, .. }) => {
                assert!(reason.contains("missing loss"))
            }
            other => panic!("expected missing-loss error, got {other:?}"),
        }
    }
}
