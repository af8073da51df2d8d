//! CSV exports: per-sample verdicts, anomaly reports and calibration
//! histograms.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::{AnomalyPeriod, DetectorConfig, SampleVerdict};
use crate::error::{Error, Result};
use crate::graph_data::io::{create_file, expect_header, hour_to_timestamp, open, parse_err, parse_timestamp};

/// Historical-error percentiles exported for calibration.
pub const CALIBRATION_PERCENTILES: [f64; 4] = [75.0, 80.0, 90.0, 95.0];

const REPORT_HEADER: [&str; 7] = [
    "cell_id",
    "start",
    "end",
    "duration_h",
    "peak_score",
    "mean_score",
    "class",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `cell_id,anchor,passed,reason,entropy,h_err_p{P}` followed by one score
/// column per prediction hour, empty unless the sample passed.
pub fn write_verdicts(path: &Path, verdicts: &[SampleVerdict], cfg: &DetectorConfig, horizon: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    let mut header = vec![
        "cell_id".to_string(),
        "anchor".into(),
        "passed".into(),
        "reason".into(),
        "entropy".into(),
        format!("h_err_p{}", cfg.percentile),
    ];
    header.extend((1..=horizon).map(|i| format!("s{i}")));
    w.write_record(&header)?;
    for v in verdicts {
        let mut row = vec![
            v.cell_id.clone(),
            hour_to_timestamp(v.anchor),
            v.passed().to_string(),
            v.reason.to_string(),
            fmt_opt(v.entropy),
            fmt_opt(v.h_err_pct),
        ];
        match v.scores() {
            Some(s) => row.extend(s.iter().map(f64::to_string)),
            None => row.extend(std::iter::repeat_n(String::new(), horizon)),
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_report(path: &Path, periods: &[AnomalyPeriod]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    w.write_record(REPORT_HEADER)?;
    for p in periods {
        w.write_record([
            p.cell_id.clone(),
            hour_to_timestamp(p.start),
            hour_to_timestamp(p.end),
            p.duration_hours().to_string(),
            p.peak_score.to_string(),
            p.mean_score.to_string(),
            p.class.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<Vec<AnomalyPeriod>> {
    let name = path.display().to_string();
    let mut rdr = csv::Reader::from_reader(open(path)?);
    expect_header(&mut rdr, &REPORT_HEADER, &name)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let bad = |e: String| parse_err(&name, line, e);
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .trim()
                .parse()
                .map_err(|e| bad(format!("{}: {e}", REPORT_HEADER[j])))
        };
        let p = AnomalyPeriod {
            cell_id: rec[0].trim().to_string(),
            start: parse_timestamp(&rec[1]).map_err(|e| bad(e.to_string()))?,
            end: parse_timestamp(&rec[2]).map_err(|e| bad(e.to_string()))?,
            peak_score: num(4)?,
            mean_score: num(5)?,
            class: rec[6].trim().parse().map_err(|e: Error| bad(e.to_string()))?,
        };
        let dur: usize = rec[3].trim().parse().map_err(|e| bad(format!("duration_h: {e}")))?;
        if p.end < p.start || dur != p.duration_hours() {
            return Err(bad("duration does not match start and end".into()));
        }
        out.push(p);
    }
    Ok(out)
}

/// Equal-width histogram over `[lo, hi]`; the last bin is closed.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn build(values: &[f64], bins: usize, lo: f64, hi: f64) -> Self {
        let bins = bins.max(1);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let i = ((v - lo) / width).floor();
            let i = if i.is_nan() || i < 0.0 {
                0
            } else {
                (i as usize).min(bins - 1)
            };
            counts[i] += 1;
        }
        Self { edges, counts }
    }

    /// Histogram over `[0, max(values)]`.
    pub fn from_zero(values: &[f64], bins: usize) -> Self {
        let hi = values.iter().copied().fold(0.0, f64::max);
        Self::build(values, bins, 0.0, hi)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub struct CalibrationFiles {
    pub entropy: PathBuf,
    pub h_err: PathBuf,
    pub scores: PathBuf,
}

const BINS: usize = 50;

/// Writes the entropy distribution (every non-degenerate sample), the
/// distribution of each historical-error percentile in
/// [`CALIBRATION_PERCENTILES`], and the score distribution with its CDF
/// (passing samples only).
pub fn write_calibration(dir: &Path, verdicts: &[SampleVerdict], cfg: &DetectorConfig) -> Result<CalibrationFiles> {
    let files = CalibrationFiles {
        entropy: dir.join("calibration_entropy.csv"),
        h_err: dir.join("calibration_h_err.csv"),
        scores: dir.join("calibration_scores.csv"),
    };
    let entropy: Vec<f64> = verdicts.iter().filter_map(|v| v.entropy).collect();
    let cal: Vec<[f64; 4]> = verdicts.iter().filter_map(|v| v.h_err_calibration).collect();
    let scores: Vec<f64> = verdicts.iter().filter_map(|v| v.scores()).flatten().copied().collect();

    let mut text = String::from("bin_lo,bin_hi,count\n");
    if !entropy.is_empty() {
        let h = if cfg.entropy_normalized {
            Histogram::build(&entropy, BINS, 0.0, 1.0)
        } else {
            Histogram::from_zero(&entropy, BINS)
        };
        push_rows(&mut text, &h, None, false);
    }
    write_text(&files.entropy, &text)?;

    let mut text = String::from("percentile,bin_lo,bin_hi,count\n");
    for (j, p) in CALIBRATION_PERCENTILES.iter().enumerate() {
        if cal.is_empty() {
            break;
        }
        let vals: Vec<f64> = cal.iter().map(|c| c[j]).collect();
        push_rows(&mut text, &Histogram::from_zero(&vals, BINS), Some(*p), false);
    }
    write_text(&files.h_err, &text)?;

    let mut text = String::from("bin_lo,bin_hi,count,cdf\n");
    if scores.is_empty() {
        log::warn!("no sample passed the pre-filter; score calibration is empty");
    } else {
        push_rows(&mut text, &Histogram::from_zero(&scores, BINS), None, true);
    }
    write_text(&files.scores, &text)?;
    Ok(files)
}

fn push_rows(text: &mut String, h: &Histogram, prefix: Option<f64>, cdf: bool) {
    let total = h.total() as f64;
    let mut cum = 0usize;
    for (i, &c) in h.counts.iter().enumerate() {
        cum += c;
        if let Some(p) = prefix {
            text.push_str(&format!("{p},"));
        }
        text.push_str(&format!("{},{},{c}", h.edges[i], h.edges[i + 1]));
        if cdf {
            text.push_str(&format!(",{}", cum as f64 / total));
        }
        text.push('\n');
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create_file(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
