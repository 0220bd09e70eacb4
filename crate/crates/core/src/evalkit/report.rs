//! CSV and text rendering of evaluation results.
//!
//! `curves.csv` holds one `metric,threshold,value` row per curve point,
//! followed by `metric,rep,value` and `metric,frames,count` rows. Values
//! use Rust's shortest round-trip float formatting, so parsing the file
//! reproduces the curves exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::attributes::{AttributeRow, AttributeSchema};
use super::metrics::{EvalConfig, Evaluation, MetricCurve};
use crate::{Error, Result};

fn named_curves(e: &Evaluation) -> [(&'static str, &MetricCurve); 5] {
    [("PR", &e.pr), ("NPR", &e.npr), ("SR", &e.sr), ("MPR", &e.max.mpr), ("MSR", &e.max.msr)]
}

pub fn curves_csv(e: &Evaluation) -> String {
    let mut out = String::from("metric,threshold,value\n");
    for (name, c) in named_curves(e) {
        for (t, v) in c.thresholds.iter().zip(&c.values) {
            writeln!(out, "{name},{t},{v}").unwrap();
        }
        writeln!(out, "{name},rep,{}", c.representative).unwrap();
        writeln!(out, "{name},frames,{}", c.frames).unwrap();
    }
    out
}

/// Parses [`curves_csv`] output back into named curves, in file order.
pub fn parse_curves_csv(text: &str) -> Result<Vec<(String, MetricCurve)>> {
    let bad = |line: usize, message: String| Error::Parse { path: "curves.csv".into(), line, message };
    let mut out: Vec<(String, MetricCurve)> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let line_no = i + 1;
        let mut parts = line.split(',');
        let (Some(name), Some(key), Some(value), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad(line_no, format!("expected 3 fields in {line:?}")));
        };
        if out.last().is_none_or(|(n, _)| n != name) {
            out.push((
                name.to_string(),
                MetricCurve { thresholds: Vec::new(), values: Vec::new(), representative: f64::NAN, frames: 0 },
            ));
        }
        let curve = &mut out.last_mut().unwrap().1;
        match key {
            "rep" => curve.representative = value.parse().map_err(|e| bad(line_no, format!("{e}")))?,
            "frames" => curve.frames = value.parse().map_err(|e| bad(line_no, format!("{e}")))?,
            t => {
                curve.thresholds.push(t.parse().map_err(|e| bad(line_no, format!("{e}")))?);
                curve.values.push(value.parse().map_err(|e| bad(line_no, format!("{e}")))?);
            }
        }
    }
    Ok(out)
}

/// `PR@20=0.667 NPR@0.2=0.500 SR-AUC=0.452`.
pub fn summary_line(e: &Evaluation, cfg: &EvalConfig) -> String {
    format!(
        "PR@{}={:.3} NPR@{}={:.3} SR-AUC={:.3}",
        cfg.precision_at, e.pr.representative, cfg.norm_precision_at, e.npr.representative, e.sr.representative
    )
}

pub fn summary_text(e: &Evaluation, cfg: &EvalConfig, attributes: Option<&[AttributeRow]>) -> String {
    let mut out = String::new();
    writeln!(out, "frames={}", e.pr.frames).unwrap();
    writeln!(out, "{}", summary_line(e, cfg)).unwrap();
    writeln!(out, "MPR@{}={:.3} MSR-AUC={:.3}", cfg.precision_at, e.max.mpr.representative, e.max.msr.representative)
        .unwrap();
    if e.max.fallback {
        writeln!(out, "warning: thermal annotations missing for some sequences; MPR/MSR used visible only").unwrap();
    }
    if let Some(rows) = attributes {
        writeln!(out).unwrap();
        writeln!(out, "{:<5} {:>4} {:>7} {:>7} {:>7}", "attr", "seqs", "PR", "NPR", "SR").unwrap();
        for r in rows {
            match &r.evaluation {
                Some(ev) => writeln!(
                    out,
                    "{:<5} {:>4} {:>7.3} {:>7.3} {:>7.3}",
                    r.name, r.sequences, ev.pr.representative, ev.npr.representative, ev.sr.representative
                ),
                None => writeln!(out, "{:<5} {:>4} {:>7} {:>7} {:>7}", r.name, 0, "-", "-", "-"),
            }
            .unwrap();
        }
    }
    out
}

pub fn attributes_csv(rows: &[AttributeRow]) -> String {
    let mut out = String::from("attribute,sequences,frames,PR,NPR,SR,MPR,MSR\n");
    for r in rows {
        match &r.evaluation {
            Some(e) => writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.name,
                r.sequences,
                e.pr.frames,
                e.pr.representative,
                e.npr.representative,
                e.sr.representative,
                e.max.mpr.representative,
                e.max.msr.representative
            ),
            None => writeln!(out, "{},0,0,absent,absent,absent,absent,absent", r.name),
        }
        .unwrap();
    }
    out
}

/// Writes `curves.csv`, `summary.txt` and, with attributes,
/// `attributes.csv` into `dir`.
pub fn export_report(
    e: &Evaluation,
    cfg: &EvalConfig,
    attributes: Option<(AttributeSchema, &[AttributeRow])>,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|err| Error::io(p, err))
    };
    write("curves.csv", curves_csv(e))?;
    write("summary.txt", summary_text(e, cfg, attributes.map(|(_, r)| r)))?;
    if let Some((_, rows)) = attributes {
        write("attributes.csv", attributes_csv(rows))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::{evaluate, BoundingBox, SequenceRecord};

    fn evaluation() -> Evaluation {
        let gt = vec![BoundingBox::new(0.0, 0.0, 10.0, 10.0); 3];
        let pred = vec![gt[0], gt[1].translated(10.0, 0.0), gt[2].translated(30.0, 0.0)];
        evaluate(&[SequenceRecord::new("a", pred, gt)], &EvalConfig::default()).unwrap()
    }

    #[test]
    fn csv_round_trips_exactly() {
        let e = evaluation();
        let parsed = parse_curves_csv(&curves_csv(&e)).unwrap();
        let names: Vec<_> = parsed.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["PR", "NPR", "SR", "MPR", "MSR"]);
        assert_eq!(parsed[0].1, e.pr);
        assert_eq!(parsed[1].1, e.npr);
        assert_eq!(parsed[2].1, e.sr);
    }

    #[test]
    fn summary_line_format() {
        let e = evaluation();
        let line = summary_line(&e, &EvalConfig::default());
        assert!(line.starts_with("PR@20=0.667 NPR@0.2="), "{line}");
        assert!(line.contains(" SR-AUC="), "{line}");
    }

    #[test]
    fn unwritable_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        fs::write(&file, "x").unwrap();
        let err = export_report(&evaluation(), &EvalConfig::default(), None, &file.join("sub")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
