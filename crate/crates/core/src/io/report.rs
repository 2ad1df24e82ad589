//! Drift reports as CSV.

use std::path::Path;

use super::codec::{read_file, write_file};
use crate::error::{ensure, Error, Result};
use crate::metrics::{DriftReport, DriftRow};

pub const REPORT_HEADER: &str = "chunk,lfd_cumulative,are_deg,dtw";

/// Shortest decimal rendering with 6 significant digits, `%g` style.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim(mantissa))
    }
}

pub fn render_report(report: &DriftReport) -> Result<String> {
    ensure!(!report.rows.is_empty(), "cannot write an empty drift report");
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in &report.rows {
        for v in [r.lfd, r.are_deg, r.dtw] {
            if !v.is_finite() {
                return Err(Error::NonFinite("drift report"));
            }
        }
        out.push_str(&format!("{},{},{},{}\n", r.chunk, format_sig6(r.lfd), format_sig6(r.are_deg), format_sig6(r.dtw)));
    }
    Ok(out)
}

pub fn write_report(report: &DriftReport, path: &Path) -> Result<()> {
    write_file(path, render_report(report)?.as_bytes())
}

pub fn parse_report(text: &str, path: &Path) -> Result<DriftReport> {
    let fail = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(fail("missing or wrong header".into()));
    }
    let rows = lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(fail(format!("line {} has {} fields", i + 2, f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| fail(format!("line {}: bad number `{s}`", i + 2)));
            Ok(DriftRow {
                chunk: f[0].parse().map_err(|_| fail(format!("line {}: bad chunk index", i + 2)))?,
                lfd: num(f[1])?,
                are_deg: num(f[2])?,
                dtw: num(f[3])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(fail("report has no rows".into()));
    }
    Ok(DriftReport { rows, skipped_frames: 0 })
}

pub fn read_report(path: &Path) -> Result<DriftReport> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        reason: "not UTF-8".into(),
    })?;
    parse_report(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn report(n: usize) -> DriftReport {
        DriftReport {
            rows: (1..=n)
                .map(|c| DriftRow {
                    chunk: c,
                    lfd: 0.123456789 * c as f64,
                    are_deg: 1.5 / c as f64,
                    dtw: 1234567.0 * c as f64,
                })
                .collect(),
            skipped_frames: 0,
        }
    }

    #[test]
    fn sig6_examples() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(0.123456789), "0.123457");
        assert_eq!(format_sig6(123456.7), "123457");
        assert_eq!(format_sig6(1234567.0), "1.23457e6");
        assert_eq!(format_sig6(0.0000123456), "1.23456e-5");
        assert_eq!(format_sig6(-2.5), "-2.5");
        assert_eq!(format_sig6(999999.5), "1e6");
    }

    #[test]
    fn header_and_line_count() {
        let text = render_report(&report(5)).unwrap();
        assert!(text.starts_with("chunk,lfd_cumulative,are_deg,dtw\n"));
        assert!(text.ends_with('\n'));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn empty_report_is_rejected() {
        assert!(render_report(&DriftReport::default()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let r = report(3);
        write_report(&r, &path).unwrap();
        let back = read_report(&path).unwrap();
        for (a, b) in r.rows.iter().zip(&back.rows) {
            assert_eq!(a.chunk, b.chunk);
            for (x, y) in [(a.lfd, b.lfd), (a.are_deg, b.are_deg), (a.dtw, b.dtw)] {
                assert!((x - y).abs() <= 5e-6 * x.abs());
            }
        }
    }

    proptest! {
        #[test]
        fn sig6_parses_back_within_tolerance(x in -1e9f64..1e9) {
            let y: f64 = format_sig6(x).parse().unwrap();
            prop_assert!((x - y).abs() <= 5e-6 * x.abs() + f64::MIN_POSITIVE);
        }
    }
}
