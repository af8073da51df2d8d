//! CSV formats for telemetry, deployment and split files.
//!
//! Telemetry: `cell_id,timestamp,prb_util` with hour-aligned RFC 3339 UTC
//! timestamps and an empty `prb_util` for missing hours.
//! Deployment: `cell_id,site_id,sector_id,x_m,y_m,attr_idx_a,attr_idx_b`.
//! Splits: `cell_id,split`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use chrono::{DateTime, TimeZone, Timelike, Utc};

use super::{CellMeta, Hour, KpiSeries, Split, SplitSpec};
use crate::error::{Error, Result};

pub fn hour_to_timestamp(hour: Hour) -> String {
    let dt = Utc
        .timestamp_opt(hour * 3600, 0)
        .single()
        .expect("hour within chrono range");
    dt.format("%Y-%m-%dT%H:00:00Z").to_string()
}

pub fn parse_timestamp(s: &str) -> Result<Hour> {
    let dt: DateTime<Utc> = DateTime::parse_from_rfc3339(s.trim())
        .map_err(|e| Error::invalid(format!("bad timestamp `{s}`: {e}")))?
        .with_timezone(&Utc);
    if dt.minute() != 0 || dt.second() != 0 || dt.nanosecond() != 0 {
        return Err(Error::invalid(format!("timestamp `{s}` is not hour-aligned")));
    }
    Ok(dt.timestamp().div_euclid(3600))
}

pub(crate) fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub(crate) fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

pub(crate) fn expect_header(rdr: &mut csv::Reader<impl Read>, want: &[&str], name: &str) -> Result<()> {
    let got = rdr.headers()?;
    if got.iter().map(str::trim).ne(want.iter().copied()) {
        return Err(parse_err(
            name,
            1,
            format!(
                "expected header `{}`, got `{}`",
                want.join(","),
                got.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    Ok(())
}

/// Reads telemetry into dense hourly series spanning the global observation
/// period; hours without a row are missing.
pub fn read_telemetry_from(reader: impl Read, name: &str) -> Result<Vec<KpiSeries>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    expect_header(&mut rdr, &["cell_id", "timestamp", "prb_util"], name)?;
    let mut rows: BTreeMap<String, Vec<(Hour, Option<f64>)>> = BTreeMap::new();
    let (mut lo, mut hi) = (Hour::MAX, Hour::MIN);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != 3 {
            return Err(parse_err(name, line, "expected 3 fields"));
        }
        let hour = parse_timestamp(&rec[1]).map_err(|e| parse_err(name, line, e.to_string()))?;
        let raw = rec[2].trim();
        let value = if raw.is_empty() {
            None
        } else {
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(name, line, format!("bad prb_util `{raw}`")))?;
            if !(0.0..=100.0).contains(&v) {
                return Err(parse_err(name, line, format!("prb_util {v} outside [0, 100]")));
            }
            Some(v)
        };
        lo = lo.min(hour);
        hi = hi.max(hour);
        rows.entry(rec[0].trim().to_string()).or_default().push((hour, value));
    }
    if rows.is_empty() {
        return Err(Error::NoTelemetry);
    }
    let len = (hi - lo + 1) as usize;
    let mut out = Vec::with_capacity(rows.len());
    for (cell_id, points) in rows {
        let mut values = vec![f64::NAN; len];
        let mut mask = vec![false; len];
        let mut seen = vec![false; len];
        for (hour, v) in points {
            let i = (hour - lo) as usize;
            if seen[i] {
                return Err(parse_err(
                    name,
                    0,
                    format!("duplicate row for {cell_id} at {}", hour_to_timestamp(hour)),
                ));
            }
            seen[i] = true;
            if let Some(v) = v {
                values[i] = v;
                mask[i] = true;
            }
        }
        out.push(KpiSeries {
            cell_id,
            start: lo,
            values,
            mask,
        });
    }
    Ok(out)
}

pub fn read_telemetry(path: &Path) -> Result<Vec<KpiSeries>> {
    read_telemetry_from(open(path)?, &path.display().to_string())
}

pub fn write_telemetry_to(mut w: impl Write, series: &[KpiSeries]) -> Result<()> {
    let io = |e| Error::io("<telemetry>", e);
    writeln!(w, "cell_id,timestamp,prb_util").map_err(io)?;
    for s in series {
        for (i, (v, m)) in s.values.iter().zip(&s.mask).enumerate() {
            let ts = hour_to_timestamp(s.start + i as Hour);
            if *m {
                writeln!(w, "{},{ts},{v}", s.cell_id).map_err(io)?;
            } else {
                writeln!(w, "{},{ts},", s.cell_id).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn write_telemetry(path: &Path, series: &[KpiSeries]) -> Result<()> {
    write_telemetry_to(create(path)?, series)
}

pub fn read_deployment_from(reader: impl Read, name: &str) -> Result<Vec<CellMeta>> {
    let mut rdr = csv::Reader::from_reader(reader);
    expect_header(
        &mut rdr,
        &[
            "cell_id",
            "site_id",
            "sector_id",
            "x_m",
            "y_m",
            "attr_idx_a",
            "attr_idx_b",
        ],
        name,
    )?;
    let mut out = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != 7 {
            return Err(parse_err(name, line, "expected 7 fields"));
        }
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .trim()
                .parse()
                .map_err(|_| parse_err(name, line, format!("bad number `{}`", &rec[j])))
        };
        let idx = |j: usize| -> Result<usize> {
            rec[j]
                .trim()
                .parse()
                .map_err(|_| parse_err(name, line, format!("bad index `{}`", &rec[j])))
        };
        let cell = CellMeta::new(
            rec[0].trim(),
            rec[1].trim(),
            rec[2].trim(),
            (num(3)?, num(4)?),
            idx(5)?,
            idx(6)?,
        )
        .map_err(|e| parse_err(name, line, e.to_string()))?;
        if !ids.insert(cell.cell_id.clone()) {
            return Err(parse_err(name, line, format!("duplicate cell_id {}", cell.cell_id)));
        }
        out.push(cell);
    }
    Ok(out)
}

pub fn read_deployment(path: &Path) -> Result<Vec<CellMeta>> {
    read_deployment_from(open(path)?, &path.display().to_string())
}

pub fn write_deployment_to(mut w: impl Write, cells: &[CellMeta]) -> Result<()> {
    let io = |e| Error::io("<deployment>", e);
    writeln!(w, "cell_id,site_id,sector_id,x_m,y_m,attr_idx_a,attr_idx_b").map_err(io)?;
    for c in cells {
        let (a, b) = c
            .attr_indices()
            .ok_or_else(|| Error::invalid(format!("cell {} has malformed attrs", c.cell_id)))?;
        writeln!(w, "{},{},{},{},{},{a},{b}", c.cell_id, c.site_id, c.sector_id, c.x, c.y).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_deployment(path: &Path, cells: &[CellMeta]) -> Result<()> {
    write_deployment_to(create(path)?, cells)
}

pub fn read_splits(path: &Path) -> Result<SplitSpec> {
    let name = path.display().to_string();
    let mut rdr = csv::Reader::from_reader(open(path)?);
    expect_header(&mut rdr, &["cell_id", "split"], &name)?;
    let mut assignment = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let split: Split = rec[1]
            .trim()
            .parse()
            .map_err(|e: Error| parse_err(&name, i + 2, e.to_string()))?;
        if assignment.insert(rec[0].trim().to_string(), split).is_some() {
            return Err(parse_err(&name, i + 2, "cell listed twice"));
        }
    }
    let n = assignment.len().max(1) as f64;
    let mut fractions = [0.0; 3];
    for s in assignment.values() {
        fractions[*s as usize] += 1.0 / n;
    }
    Ok(SplitSpec { assignment, fractions })
}

pub fn write_splits(path: &Path, spec: &SplitSpec) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "cell_id,split").map_err(io)?;
    for (cell, split) in &spec.assignment {
        writeln!(w, "{cell},{split}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub(crate) fn create_file(path: &Path) -> Result<BufWriter<File>> {
    create(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamps_round_trip() {
        let h = parse_timestamp("2024-02-01T05:00:00Z").unwrap();
        assert_eq!(hour_to_timestamp(h), "2024-02-01T05:00:00Z");
        assert_eq!(parse_timestamp("2024-02-01T07:00:00+02:00").unwrap(), h);
        assert!(parse_timestamp("2024-02-01T05:30:00Z").is_err());
    }

    #[test]
    fn telemetry_gaps_and_empty_fields_are_missing() {
        let csv = "cell_id,timestamp,prb_util\n\
                   a,2024-02-01T00:00:00Z,10.5\n\
                   a,2024-02-01T01:00:00Z,\n\
                   a,2024-02-01T03:00:00Z,7\n\
                   b,2024-02-01T02:00:00Z,0\n";
        let series = read_telemetry_from(csv.as_bytes(), "t").unwrap();
        assert_eq!(series.len(), 2);
        let a = &series[0];
        assert_eq!(a.mask, vec![true, false, false, true]);
        assert_eq!(a.values[0], 10.5);
        assert_eq!(a.values[3], 7.0);
        assert_eq!(series[1].mask, vec![false, false, true, false]);
    }

    #[test]
    fn telemetry_rejects_out_of_range_and_bad_header() {
        let bad = "cell_id,timestamp,prb_util\na,2024-02-01T00:00:00Z,120\n";
        assert!(read_telemetry_from(bad.as_bytes(), "t").is_err());
        let bad = "cell,ts,v\na,2024-02-01T00:00:00Z,1\n";
        assert!(read_telemetry_from(bad.as_bytes(), "t").is_err());
        let dup = "cell_id,timestamp,prb_util\na,2024-02-01T00:00:00Z,1\na,2024-02-01T00:00:00Z,2\n";
        assert!(read_telemetry_from(dup.as_bytes(), "t").is_err());
    }

    #[test]
    fn telemetry_write_read_is_lossless() {
        let s = KpiSeries {
            cell_id: "c1".into(),
            start: 473_000,
            values: vec![0.1 + 0.2, 37.42, f64::NAN, 100.0],
            mask: vec![true, true, false, true],
        };
        let mut buf = Vec::new();
        write_telemetry_to(&mut buf, std::slice::from_ref(&s)).unwrap();
        let back = read_telemetry_from(buf.as_slice(), "t").unwrap();
        assert_eq!(back[0].start, s.start);
        assert_eq!(back[0].mask, s.mask);
        for (a, b) in back[0].values.iter().zip(&s.values) {
            assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
        }
    }

    #[test]
    fn deployment_round_trip() {
        let cells = vec![
            CellMeta::new("c1", "s1", "s1-0", (12.5, -3.0), 2, 9).unwrap(),
            CellMeta::new("c2", "s1", "s1-1", (12.5, -3.0), 7, 14).unwrap(),
        ];
        let mut buf = Vec::new();
        write_deployment_to(&mut buf, &cells).unwrap();
        assert_eq!(read_deployment_from(buf.as_slice(), "d").unwrap(), cells);
    }

    #[test]
    fn deployment_rejects_bad_attr_index() {
        let csv = "cell_id,site_id,sector_id,x_m,y_m,attr_idx_a,attr_idx_b\nc,s,s0,0,0,9,10\n";
        let err = read_deployment_from(csv.as_bytes(), "d").unwrap_err();
        assert!(err.to_string().contains("d:2"), "{err}");
    }
}
